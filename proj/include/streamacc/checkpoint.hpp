#pragma once

// Checkpoint file (little-endian):
//   magic "SACK" | version u32
//   header_len u32 | header text (key = value lines: model config, stream
//                    spec, objective, step)
//   tensor_count u32, then per tensor:
//     name_len u32 | name | rows u32 | cols u32 | rows*cols f32
//   has_optimizer u8 [| adam_step u64 | m f32[total] | v f32[total]]
//
// Tensors are matched by name and shape on load.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamacc/streamalign.hpp"
#include "streamacc/tinyformer.hpp"

namespace streamacc {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct AdamState {
  std::uint64_t step = 0;
  std::vector<float> m, v;
};

struct Checkpoint {
  ModelConfig model;
  StreamSpec spec;
  bool mlm = false;
  std::uint64_t step = 0;
  std::vector<float> params;
  bool has_optimizer = false;
  AdamState adam;
};

namespace detail {

inline std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("malformed line: " + line);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline const std::string& need(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw std::runtime_error("checkpoint header missing '" + key + "'");
  return it->second;
}

template <class T>
void put_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline std::string model_config_text(const ModelConfig& c) {
  std::ostringstream o;
  o << "layers = " << c.layers << "\n"
    << "model_dim = " << c.model_dim << "\n"
    << "input_embed_dim = " << c.input_embed_dim << "\n"
    << "heads = " << c.heads << "\n"
    << "kv_heads = " << c.kv_heads << "\n"
    << "ffn_dim = " << c.ffn_dim << "\n"
    << "levels = " << c.levels << "\n"
    << "data_vocab = " << c.data_vocab << "\n"
    << "num_instruments = " << c.num_instruments << "\n"
    << "max_positions = " << c.max_positions << "\n"
    << "rope_base = " << fmt_double(c.rope_base, 3) << "\n"
    << "norm_eps = " << c.norm_eps << "\n"
    << "causal = " << (c.causal ? 1 : 0) << "\n"
    << "seed = " << c.seed << "\n"
    << "codebook_seed = " << c.codebook_seed << "\n";
  return o.str();
}

inline ModelConfig parse_model_config(const std::map<std::string, std::string>& kv) {
  using detail::need;
  ModelConfig c;
  c.layers = std::stoi(need(kv, "layers"));
  c.model_dim = std::stoi(need(kv, "model_dim"));
  c.input_embed_dim = std::stoi(need(kv, "input_embed_dim"));
  c.heads = std::stoi(need(kv, "heads"));
  c.kv_heads = std::stoi(need(kv, "kv_heads"));
  c.ffn_dim = std::stoi(need(kv, "ffn_dim"));
  c.levels = std::stoi(need(kv, "levels"));
  c.data_vocab = static_cast<std::uint32_t>(std::stoul(need(kv, "data_vocab")));
  c.num_instruments = std::stoi(need(kv, "num_instruments"));
  c.max_positions = std::stoi(need(kv, "max_positions"));
  c.rope_base = std::stod(need(kv, "rope_base"));
  c.norm_eps = std::stod(need(kv, "norm_eps"));
  c.causal = std::stoi(need(kv, "causal")) != 0;
  c.seed = std::stoull(need(kv, "seed"));
  c.codebook_seed = std::stoull(need(kv, "codebook_seed"));
  c.validate();
  return c;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const ParamLayout layout(ck.model);
  if (ck.params.size() != layout.total()) throw std::invalid_argument("write_checkpoint: parameter count mismatch");
  std::ostringstream header;
  header << model_config_text(ck.model) << "t_f_frames = " << ck.spec.t_f_frames << "\n"
         << "k_frames = " << ck.spec.k_frames << "\n"
         << "objective = " << (ck.mlm ? "mlm" : "stream") << "\n"
         << "step = " << ck.step << "\n";
  const std::string h = header.str();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out.write("SACK", 4);
    detail::put_raw(out, kCheckpointVersion);
    detail::put_raw(out, static_cast<std::uint32_t>(h.size()));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    detail::put_raw(out, static_cast<std::uint32_t>(layout.tensors().size()));
    for (const auto& t : layout.tensors()) {
      detail::put_raw(out, static_cast<std::uint32_t>(t.name.size()));
      out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      detail::put_raw(out, static_cast<std::uint32_t>(t.rows));
      detail::put_raw(out, static_cast<std::uint32_t>(t.cols));
      out.write(reinterpret_cast<const char*>(ck.params.data() + t.offset), static_cast<std::streamsize>(t.size() * 4));
    }
    detail::put_raw(out, static_cast<std::uint8_t>(ck.has_optimizer ? 1 : 0));
    if (ck.has_optimizer) {
      if (ck.adam.m.size() != layout.total() || ck.adam.v.size() != layout.total())
        throw std::invalid_argument("write_checkpoint: optimizer state size mismatch");
      detail::put_raw(out, ck.adam.step);
      out.write(reinterpret_cast<const char*>(ck.adam.m.data()), static_cast<std::streamsize>(layout.total() * 4));
      out.write(reinterpret_cast<const char*>(ck.adam.v.data()), static_cast<std::streamsize>(layout.total() * 4));
    }
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SACK", 4) != 0) throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const auto version = detail::get_raw<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto hlen = detail::get_raw<std::uint32_t>(in);
  std::string h(hlen, '\0');
  in.read(h.data(), hlen);
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  const auto kv = detail::parse_kv(h);

  Checkpoint ck;
  ck.model = parse_model_config(kv);
  ck.spec.t_f_frames = std::stoi(detail::need(kv, "t_f_frames"));
  ck.spec.k_frames = std::stoi(detail::need(kv, "k_frames"));
  ck.mlm = detail::need(kv, "objective") == "mlm";
  ck.step = std::stoull(detail::need(kv, "step"));

  const ParamLayout layout(ck.model);
  ck.params.assign(layout.total(), 0.0f);
  const auto count = detail::get_raw<std::uint32_t>(in);
  if (count != layout.tensors().size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = detail::get_raw<std::uint32_t>(in);
    std::string name(nlen, '\0');
    in.read(name.data(), nlen);
    const auto rows = detail::get_raw<std::uint32_t>(in);
    const auto cols = detail::get_raw<std::uint32_t>(in);
    const auto& t = layout[layout.find(name)];
    if (rows != t.rows || cols != t.cols) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(ck.params.data() + t.offset), static_cast<std::streamsize>(t.size() * 4));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor " + name);
  }
  ck.has_optimizer = detail::get_raw<std::uint8_t>(in) != 0;
  if (ck.has_optimizer) {
    ck.adam.step = detail::get_raw<std::uint64_t>(in);
    ck.adam.m.resize(layout.total());
    ck.adam.v.resize(layout.total());
    in.read(reinterpret_cast<char*>(ck.adam.m.data()), static_cast<std::streamsize>(layout.total() * 4));
    in.read(reinterpret_cast<char*>(ck.adam.v.data()), static_cast<std::streamsize>(layout.total() * 4));
    if (!in) throw std::runtime_error("checkpoint: truncated optimizer state");
  }
  return ck;
}

}  // namespace streamacc
