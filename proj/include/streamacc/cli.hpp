#pragma once

// Command implementations behind tools/streamacc_cli.cpp.
//
// Configuration is an INI file with sections [data] [model] [train] [decode]
// [sched] [eval]. Precedence: built-in defaults < --config file <
// STREAMACC_<SECTION>_<KEY> environment variables < --set section.key=value
// < command flags. Unknown keys are rejected. Every command writes the
// effective configuration to <out>/config.ini.

#include "CLI11.hpp"
#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "streamacc/checkpoint.hpp"
#include "streamacc/decode.hpp"
#include "streamacc/evalkit.hpp"
#include "streamacc/rtsched.hpp"
#include "streamacc/synthdata.hpp"
#include "streamacc/trainer.hpp"

extern char** environ;

namespace streamacc::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  SynthConfig data;
  int num_songs = 200;

  ModelConfig model;

  TrainConfig train;
  std::string objective = "stream";  // stream | mlm
  double t_f_seconds = 0.2;
  double k_seconds = 0.02;
  std::vector<double> t_f_grid_seconds{-1.0, 0.0, 0.2};
  std::vector<double> k_grid_seconds{0.02};

  SampleConfig sample;
  MlmDecodeConfig mlm;

  LatencyProfile profile;
  int sim_chunks = 1000;
  std::uint64_t sim_seed = 0;
  std::vector<double> sched_t_f_grid_seconds = default_t_f_grid();
  std::vector<double> sched_k_grid_seconds = default_k_grid();

  EvalConfig eval;
  std::vector<std::string> variants{"paired", "random_input"};
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline std::string fmt_num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(const std::string& s, const std::string& what) {
  const std::string t = trim(s);
  T v{};
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || r.ec != std::errc() || r.ptr != t.data() + t.size())
    throw ConfigError(what + ": cannot parse '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& what) {
  const std::string t = trim(s);
  if (t == "1" || t == "true" || t == "yes" || t == "on") return true;
  if (t == "0" || t == "false" || t == "no" || t == "off") return false;
  throw ConfigError(what + ": expected a boolean, got '" + s + "'");
}

template <class T>
T parse_value(const std::string& s, const std::string& what) {
  if constexpr (std::is_same_v<T, bool>) {
    return parse_bool(s, what);
  } else if constexpr (std::is_same_v<T, std::string>) {
    return trim(s);
  } else if constexpr (std::is_same_v<T, JitterKind>) {
    try {
      return parse_jitter_kind(trim(s));
    } catch (const std::exception& e) {
      throw ConfigError(what + ": " + e.what());
    }
  } else if constexpr (std::is_arithmetic_v<T>) {
    return parse_number<T>(s, what);
  } else {
    using E = typename T::value_type;
    T out;
    for (const auto& item : split_list(s)) out.push_back(parse_value<E>(item, what));
    return out;
  }
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, JitterKind>) {
    return jitter_kind_name(v);
  } else if constexpr (std::is_floating_point_v<T>) {
    return fmt_num(v);
  } else if constexpr (std::is_arithmetic_v<T>) {
    return std::to_string(v);
  } else {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format_value(v[i]);
    return out;
  }
}

inline std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

// FNV-1a, used only as a content fingerprint.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void write_json(const fs::path& p, const json& j) { streamacc::detail::write_text_file(p, j.dump(2) + "\n"); }

}  // namespace detail

struct ConfigField {
  std::string section, key;
  std::string full_scale;  // full-scale value when it differs from the toy default
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Acc>
ConfigField make_field(std::string section, std::string key, std::string full_scale, Acc acc) {
  using T = std::remove_cvref_t<decltype(acc(std::declval<RunConfig&>()))>;
  ConfigField f;
  const std::string what = "[" + section + "] " + key;
  f.section = std::move(section);
  f.key = std::move(key);
  f.full_scale = std::move(full_scale);
  f.set = [acc, what](RunConfig& c, const std::string& v) { acc(c) = detail::parse_value<T>(v, what); };
  f.get = [acc](const RunConfig& c) { return detail::format_value(acc(const_cast<RunConfig&>(c))); };
  return f;
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    using C = RunConfig;
    // [data]
    f.push_back(make_field("data", "num_songs", "~1500 multi-stem songs", [](C& c) -> auto& { return c.num_songs; }));
    f.push_back(make_field("data", "num_chords", "", [](C& c) -> auto& { return c.data.num_chords; }));
    f.push_back(make_field("data", "switch_prob", "", [](C& c) -> auto& { return c.data.switch_prob; }));
    f.push_back(make_field("data", "beat_period", "", [](C& c) -> auto& { return c.data.beat_period; }));
    f.push_back(make_field("data", "min_stems", "", [](C& c) -> auto& { return c.data.min_stems; }));
    f.push_back(make_field("data", "max_stems", "", [](C& c) -> auto& { return c.data.max_stems; }));
    f.push_back(make_field("data", "song_frames", "", [](C& c) -> auto& { return c.data.song_frames; }));
    f.push_back(make_field("data", "window_frames", "500 (10 s)", [](C& c) -> auto& { return c.data.window_frames; }));
    f.push_back(make_field("data", "vocab_size", "1024", [](C& c) -> auto& { return c.data.vocab_size; }));
    f.push_back(make_field("data", "levels", "4", [](C& c) -> auto& { return c.data.levels; }));
    f.push_back(make_field("data", "mean_active_frames", "", [](C& c) -> auto& { return c.data.mean_active_frames; }));
    f.push_back(make_field("data", "mean_silent_frames", "", [](C& c) -> auto& { return c.data.mean_silent_frames; }));
    f.push_back(make_field("data", "residual_noise", "", [](C& c) -> auto& { return c.data.residual_noise; }));
    f.push_back(make_field("data", "seed", "", [](C& c) -> auto& { return c.data.seed; }));
    // [model]
    f.push_back(make_field("model", "layers", "16 (masked model: 20)", [](C& c) -> auto& { return c.model.layers; }));
    f.push_back(make_field("model", "model_dim", "1024", [](C& c) -> auto& { return c.model.model_dim; }));
    f.push_back(make_field("model", "input_embed_dim", "codec latent width", [](C& c) -> auto& { return c.model.input_embed_dim; }));
    f.push_back(make_field("model", "heads", "16", [](C& c) -> auto& { return c.model.heads; }));
    f.push_back(make_field("model", "kv_heads", "", [](C& c) -> auto& { return c.model.kv_heads; }));
    f.push_back(make_field("model", "ffn_dim", "", [](C& c) -> auto& { return c.model.ffn_dim; }));
    f.push_back(make_field("model", "max_positions", "", [](C& c) -> auto& { return c.model.max_positions; }));
    f.push_back(make_field("model", "rope_base", "", [](C& c) -> auto& { return c.model.rope_base; }));
    f.push_back(make_field("model", "norm_eps", "", [](C& c) -> auto& { return c.model.norm_eps; }));
    f.push_back(make_field("model", "seed", "", [](C& c) -> auto& { return c.model.seed; }));
    // [train]
    f.push_back(make_field("train", "objective", "", [](C& c) -> auto& { return c.objective; }));
    f.push_back(make_field("train", "t_f_seconds", "", [](C& c) -> auto& { return c.t_f_seconds; }));
    f.push_back(make_field("train", "k_seconds", "", [](C& c) -> auto& { return c.k_seconds; }));
    f.push_back(make_field("train", "t_f_grid_seconds", "-4, -2, -1, -0.4, -0.2, 0, 0.2, 0.4, 1, 2, 4",
                           [](C& c) -> auto& { return c.t_f_grid_seconds; }));
    f.push_back(make_field("train", "k_grid_seconds", "0.04, 0.1, 0.2, 1, 2", [](C& c) -> auto& { return c.k_grid_seconds; }));
    f.push_back(make_field("train", "peak_lr", "0.0001", [](C& c) -> auto& { return c.train.peak_lr; }));
    f.push_back(make_field("train", "floor_lr", "0.00001", [](C& c) -> auto& { return c.train.floor_lr; }));
    f.push_back(make_field("train", "warmup_steps", "10000", [](C& c) -> auto& { return c.train.warmup_steps; }));
    f.push_back(make_field("train", "total_steps", "", [](C& c) -> auto& { return c.train.total_steps; }));
    f.push_back(make_field("train", "batch_size", "64 (masked model: 96)", [](C& c) -> auto& { return c.train.batch_size; }));
    f.push_back(make_field("train", "beta1", "", [](C& c) -> auto& { return c.train.beta1; }));
    f.push_back(make_field("train", "beta2", "", [](C& c) -> auto& { return c.train.beta2; }));
    f.push_back(make_field("train", "adam_eps", "", [](C& c) -> auto& { return c.train.adam_eps; }));
    f.push_back(make_field("train", "grad_clip", "", [](C& c) -> auto& { return c.train.grad_clip; }));
    f.push_back(make_field("train", "input_dropout_prob", "0.2 for the masked model", [](C& c) -> auto& { return c.train.input_dropout_prob; }));
    f.push_back(make_field("train", "window_frames", "", [](C& c) -> auto& { return c.train.window_frames; }));
    f.push_back(make_field("train", "valid_every", "", [](C& c) -> auto& { return c.train.valid_every; }));
    f.push_back(make_field("train", "valid_examples", "", [](C& c) -> auto& { return c.train.valid_examples; }));
    f.push_back(make_field("train", "checkpoint_every", "", [](C& c) -> auto& { return c.train.checkpoint_every; }));
    f.push_back(make_field("train", "seed", "", [](C& c) -> auto& { return c.train.seed; }));
    // [decode]
    f.push_back(make_field("decode", "temperature", "1.0", [](C& c) -> auto& { return c.sample.temperature; }));
    f.push_back(make_field("decode", "top_k", "200", [](C& c) -> auto& { return c.sample.top_k; }));
    f.push_back(make_field("decode", "seed", "", [](C& c) -> auto& { return c.sample.seed; }));
    f.push_back(make_field("decode", "mlm_temperatures", "8, 8, 4, 4", [](C& c) -> auto& { return c.mlm.temperatures; }));
    f.push_back(make_field("decode", "mlm_steps", "128, 64, 32, 32", [](C& c) -> auto& { return c.mlm.steps; }));
    f.push_back(make_field("decode", "cfg_scale", "", [](C& c) -> auto& { return c.mlm.cfg_scale; }));
    // [sched]
    f.push_back(make_field("sched", "tau_sys", "", [](C& c) -> auto& { return c.profile.tau_sys; }));
    f.push_back(make_field("sched", "tau_jitter", "", [](C& c) -> auto& { return c.profile.tau_jitter; }));
    f.push_back(make_field("sched", "gen_a", "", [](C& c) -> auto& { return c.profile.gen_a; }));
    f.push_back(make_field("sched", "gen_b", "", [](C& c) -> auto& { return c.profile.gen_b; }));
    f.push_back(make_field("sched", "gen_alpha", "", [](C& c) -> auto& { return c.profile.gen_alpha; }));
    f.push_back(make_field("sched", "jitter", "", [](C& c) -> auto& { return c.profile.jitter.kind; }));
    f.push_back(make_field("sched", "jitter_low", "", [](C& c) -> auto& { return c.profile.jitter.low; }));
    f.push_back(make_field("sched", "jitter_high", "", [](C& c) -> auto& { return c.profile.jitter.high; }));
    f.push_back(make_field("sched", "jitter_mean", "", [](C& c) -> auto& { return c.profile.jitter.mean; }));
    f.push_back(make_field("sched", "jitter_stddev", "", [](C& c) -> auto& { return c.profile.jitter.stddev; }));
    f.push_back(make_field("sched", "chunks", "", [](C& c) -> auto& { return c.sim_chunks; }));
    f.push_back(make_field("sched", "seed", "", [](C& c) -> auto& { return c.sim_seed; }));
    f.push_back(make_field("sched", "t_f_grid_seconds", "", [](C& c) -> auto& { return c.sched_t_f_grid_seconds; }));
    f.push_back(make_field("sched", "k_grid_seconds", "", [](C& c) -> auto& { return c.sched_k_grid_seconds; }));
    // [eval]
    f.push_back(make_field("eval", "num_examples", "1024", [](C& c) -> auto& { return c.eval.num_examples; }));
    f.push_back(make_field("eval", "window_frames", "", [](C& c) -> auto& { return c.eval.window_frames; }));
    f.push_back(make_field("eval", "beat_tolerance", "", [](C& c) -> auto& { return c.eval.beat_tolerance; }));
    f.push_back(make_field("eval", "jsd_alpha", "", [](C& c) -> auto& { return c.eval.jsd_alpha; }));
    f.push_back(make_field("eval", "seed", "", [](C& c) -> auto& { return c.eval.seed; }));
    f.push_back(make_field("eval", "variants", "", [](C& c) -> auto& { return c.variants; }));
    return f;
  }();
  return fields;
}

inline const ConfigField& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : config_fields())
    if (f.section == section && f.key == key) return f;
  throw ConfigError("unknown config key [" + section + "] " + key);
}

inline void set_key(RunConfig& c, const std::string& dotted, const std::string& value) {
  const auto dot = dotted.find('.');
  if (dot == std::string::npos) throw ConfigError("config key '" + dotted + "' must be section.key");
  find_field(dotted.substr(0, dot), dotted.substr(dot + 1)).set(c, value);
}

// `--set` argument: section.key=value
inline void apply_assignment(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected section.key=value, got '" + assignment + "'");
  set_key(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void apply_config_file(RunConfig& c, const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_file(path.string());
  } catch (const CLI::Error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;
    if (it.parents.size() != 1) throw ConfigError("config key '" + it.name + "' must sit inside a [section]");
    std::string value;
    for (std::size_t i = 0; i < it.inputs.size(); ++i) value += (i ? ", " : "") + it.inputs[i];
    find_field(it.parents[0], it.name).set(c, value);
  }
}

inline std::string env_name(const ConfigField& f) { return "STREAMACC_" + detail::upper(f.section) + "_" + detail::upper(f.key); }

// Applies STREAMACC_<SECTION>_<KEY>; any other STREAMACC_<SECTION>_* name is
// rejected so that typos do not pass silently.
inline void apply_environment(RunConfig& c, char** env = environ) {
  std::map<std::string, const ConfigField*> known;
  for (const auto& f : config_fields()) known[env_name(f)] = &f;
  static const std::vector<std::string> prefixes = {"STREAMACC_DATA_", "STREAMACC_MODEL_", "STREAMACC_TRAIN_",
                                                    "STREAMACC_DECODE_", "STREAMACC_SCHED_", "STREAMACC_EVAL_"};
  for (char** e = env; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    const std::string name = kv.substr(0, eq);
    if (std::none_of(prefixes.begin(), prefixes.end(), [&](const std::string& p) { return name.rfind(p, 0) == 0; }))
      continue;
    auto it = known.find(name);
    if (it == known.end()) throw ConfigError("unknown config environment variable " + name);
    it->second->set(c, kv.substr(eq + 1));
  }
}

inline std::string config_text(const RunConfig& c) {
  std::ostringstream o;
  o << "# streamacc run configuration\n";
  std::string section;
  for (const auto& f : config_fields()) {
    if (f.section != section) {
      o << (section.empty() ? "" : "\n") << "[" << f.section << "]\n";
      section = f.section;
    }
    o << f.key << " = " << f.get(c);
    if (!f.full_scale.empty()) o << "  ; full scale: " << f.full_scale;
    o << "\n";
  }
  return o.str();
}

inline StreamSpec spec_from_seconds(double t_f, double k) {
  try {
    return StreamSpec::from_seconds(t_f, k);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// "-1", "-1s", "0.02s" -> seconds
inline double parse_seconds(const std::string& text) {
  std::string t = detail::trim(text);
  if (!t.empty() && t.back() == 's') t.pop_back();
  return detail::parse_number<double>(t, "duration '" + text + "'");
}

inline void validate(const RunConfig& c) {
  try {
    c.data.validate();
    if (c.num_songs < 3) throw ConfigError("[data] num_songs must be >= 3 for a train/valid/test split");
    ModelConfig m = c.model;
    m.levels = c.data.levels;
    m.data_vocab = c.data.vocab_size;
    m.validate();
    c.train.validate();
    if (c.objective != "stream" && c.objective != "mlm")
      throw ConfigError("[train] objective must be 'stream' or 'mlm', got '" + c.objective + "'");
    spec_from_seconds(c.t_f_seconds, c.k_seconds);
    if (c.t_f_grid_seconds.empty() || c.k_grid_seconds.empty()) throw ConfigError("[train] grids must be non-empty");
    for (double tf : c.t_f_grid_seconds)
      for (double k : c.k_grid_seconds) spec_from_seconds(tf, k);
    c.sample.validate();
    c.mlm.validate(static_cast<std::size_t>(c.data.levels));
    c.profile.validate();
    if (c.sim_chunks < 1) throw ConfigError("[sched] chunks must be >= 1");
    if (c.sched_t_f_grid_seconds.empty() || c.sched_k_grid_seconds.empty())
      throw ConfigError("[sched] grids must be non-empty");
    for (double tf : c.sched_t_f_grid_seconds)
      for (double k : c.sched_k_grid_seconds) spec_from_seconds(tf, k);
    c.eval.validate();
    if (c.variants.empty()) throw ConfigError("[eval] variants must be non-empty");
    for (const auto& v : c.variants) EvalVariant::parse(v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

inline RunConfig load_config(const std::string& config_path, const std::vector<std::string>& assignments,
                             char** env = environ) {
  RunConfig c;
  if (!config_path.empty()) apply_config_file(c, config_path);
  apply_environment(c, env);
  for (const auto& a : assignments) apply_assignment(c, a);
  return c;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ConfigError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw ConfigError(dir.string() + " exists and is not empty (use --force to overwrite)");
  fs::create_directories(dir);
}

inline void write_snapshot(const fs::path& dir, const RunConfig& c) {
  streamacc::detail::write_text_file(dir / "config.ini", config_text(c));
}

inline Corpus load_corpus(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.tsv")) throw ConfigError("no corpus at " + dir.string() + " (missing manifest.tsv)");
  return read_corpus(dir);
}

inline std::string cell_name(const StreamSpec& s) {
  return "tf" + std::to_string(s.t_f_frames) + "_k" + std::to_string(s.k_frames);
}

inline std::vector<StreamSpec> train_grid(const RunConfig& c) {
  std::vector<StreamSpec> out;
  for (double tf : c.t_f_grid_seconds)
    for (double k : c.k_grid_seconds) out.push_back(spec_from_seconds(tf, k));
  return out;
}

inline json spec_json(const StreamSpec& s) {
  json j;
  j["t_f_frames"] = s.t_f_frames;
  j["k_frames"] = s.k_frames;
  j["t_f_seconds"] = s.t_f_seconds();
  j["k_seconds"] = s.k_seconds();
  return j;
}

struct GenDataResult {
  std::size_t songs = 0, train = 0, valid = 0, test = 0;
  std::string manifest_hash;
};

inline GenDataResult cmd_gen_data(const RunConfig& cfg, const fs::path& out, bool force, std::ostream& log) {
  validate(cfg);
  prepare_out_dir(out, force);
  if (force) {
    fs::remove_all(out / "songs");
    for (const char* f : {"manifest.tsv", "synth.txt", "summary.json"}) fs::remove(out / f);
  }
  const Corpus corpus = generate_corpus(cfg.data, static_cast<std::size_t>(cfg.num_songs));
  write_corpus(out, corpus);
  write_snapshot(out, cfg);
  GenDataResult r;
  r.songs = corpus.songs.size();
  r.train = corpus.indices(Split::train).size();
  r.valid = corpus.indices(Split::valid).size();
  r.test = corpus.indices(Split::test).size();
  r.manifest_hash = detail::fnv1a_hex(manifest_text(corpus) + synth_config_text(corpus.cfg));
  json j;
  j["songs"] = r.songs;
  j["train"] = r.train;
  j["valid"] = r.valid;
  j["test"] = r.test;
  j["manifest_hash"] = r.manifest_hash;
  detail::write_json(out / "summary.json", j);
  log << "corpus " << out.string() << ": " << r.songs << " songs (train " << r.train << ", valid " << r.valid
      << ", test " << r.test << "), manifest hash " << r.manifest_hash << "\n";
  return r;
}

inline void train_one(const RunConfig& cfg, const Corpus& corpus, const StreamSpec& spec, const fs::path& out,
                      std::ostream& log) {
  const bool mlm = cfg.objective == "mlm";
  Trainer tr(corpus, cfg.model, spec, cfg.train, mlm);
  RunConfig snap = cfg;
  snap.t_f_seconds = spec.t_f_seconds();
  snap.k_seconds = spec.k_seconds();
  write_snapshot(out, snap);
  tr.run(out, [&](const LossRecord& r) {
    if (!std::isnan(r.valid_loss))
      log << "step " << r.step << " train " << fmt_double(r.train_loss, 4) << " valid " << fmt_double(r.valid_loss, 4)
          << " lr " << detail::fmt_num(r.lr) << "\n";
  });
  const auto& h = tr.history();
  json j;
  j["objective"] = cfg.objective;
  j["spec"] = spec_json(spec);
  j["steps"] = tr.step();
  j["parameters"] = tr.model().layout().total();
  j["final_train_loss"] = h.back().train_loss;
  if (!std::isnan(h.back().valid_loss)) j["final_valid_loss"] = h.back().valid_loss;
  detail::write_json(out / "train.json", j);
}

inline void cmd_train(const RunConfig& cfg, const fs::path& corpus_dir, const fs::path& out, bool force,
                      std::ostream& log) {
  validate(cfg);
  const Corpus corpus = load_corpus(corpus_dir);
  const StreamSpec spec = spec_from_seconds(cfg.t_f_seconds, cfg.k_seconds);
  prepare_out_dir(out, force);
  log << "training " << cfg.objective << " model t_f=" << spec.t_f_frames << " k=" << spec.k_frames << " frames\n";
  train_one(cfg, corpus, spec, out, log);
}

// Trains every (t_f, k) cell in order; cell i uses seeds derived from the
// configured train and model seeds.
inline void cmd_train_grid(const RunConfig& cfg, const fs::path& corpus_dir, const fs::path& out, bool force,
                           std::ostream& log) {
  validate(cfg);
  const Corpus corpus = load_corpus(corpus_dir);
  prepare_out_dir(out, force);
  write_snapshot(out, cfg);
  const auto grid = train_grid(cfg);
  json cells = json::array();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    RunConfig cell = cfg;
    cell.train.seed = derive_seed(cfg.train.seed, 0x6121D, i);
    cell.model.seed = derive_seed(cfg.model.seed, 0x6121D, i);
    const fs::path dir = out / cell_name(grid[i]);
    fs::create_directories(dir);
    log << "[" << i + 1 << "/" << grid.size() << "] " << cell_name(grid[i]) << "\n";
    train_one(cell, corpus, grid[i], dir, log);
    json c = spec_json(grid[i]);
    c["dir"] = cell_name(grid[i]);
    c["train_seed"] = cell.train.seed;
    c["model_seed"] = cell.model.seed;
    cells.push_back(c);
  }
  json j;
  j["objective"] = cfg.objective;
  j["cells"] = cells;
  detail::write_json(out / "grid.json", j);
}

struct LoadedModel {
  Checkpoint ck;
  TinyFormer<float> model;
};

inline LoadedModel load_model(const fs::path& path, const Corpus& corpus) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  Checkpoint ck = read_checkpoint(path);
  if (ck.model.levels != corpus.cfg.levels || ck.model.data_vocab != corpus.cfg.vocab_size)
    throw ConfigError("checkpoint " + path.string() + " does not match the corpus levels/vocabulary");
  TinyFormer<float> m(ck.model, ck.params);
  return {std::move(ck), std::move(m)};
}

inline EvalConfig eval_config(const RunConfig& cfg) {
  EvalConfig e = cfg.eval;
  e.sample = cfg.sample;
  e.mlm = cfg.mlm;
  return e;
}

inline std::size_t eval_window(const RunConfig& cfg, const Corpus& corpus) {
  return cfg.eval.window_frames > 0 ? static_cast<std::size_t>(cfg.eval.window_frames)
                                    : static_cast<std::size_t>(corpus.cfg.window_frames);
}

// Writes gen_NNNN.tgrd plus a JSON sidecar with the per-chunk timing hooks.
// Wall-clock times are included only with measure_time.
inline void cmd_generate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& corpus_dir,
                         const fs::path& out, std::size_t count, Split split, bool measure_time, bool force,
                         std::ostream& log) {
  validate(cfg);
  if (count < 1) throw ConfigError("--count must be >= 1");
  const Corpus corpus = load_corpus(corpus_dir);
  const LoadedModel lm = load_model(checkpoint, corpus);
  prepare_out_dir(out, force);
  write_snapshot(out, cfg);
  const StreamSpec spec = lm.ck.spec;
  const std::size_t window = eval_window(cfg, corpus);
  const std::size_t lookahead = lm.ck.mlm ? 0 : static_cast<std::size_t>(std::max(spec.t_f_frames, 0));
  const auto ex = eval_examples(corpus, count, window, lookahead, split);
  json index = json::array();
  for (std::size_t i = 0; i < ex.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "gen_%04zu", i);
    const auto& pair = ex[i].pair;
    json side;
    side["song"] = song_id(ex[i].song);
    side["window_start"] = pair.window_start;
    side["instrument"] = pair.target_instrument;
    side["objective"] = lm.ck.mlm ? "mlm" : "stream";
    side["spec"] = spec_json(spec);
    TokenGrid grid;
    if (lm.ck.mlm) {
      MlmDecodeConfig m = cfg.mlm;
      m.sample = cfg.sample;
      m.sample.seed = derive_seed(cfg.sample.seed, 0xDEC1, i);
      auto res = mlm_generate(lm.model, pair.input_mix, pair.target_instrument, m);
      grid = res.output;
      side["iterations"] = res.trace.size();
    } else {
      GenerateOptions opt;
      opt.sample = cfg.sample;
      opt.sample.seed = derive_seed(cfg.sample.seed, 0xDEC0, i);
      opt.measure_time = measure_time;
      auto res = stream_generate(lm.model, pair.input_mix, pair.target_instrument, spec, opt, pair.input_tail);
      grid = res.output;
      json chunks = json::array();
      for (const auto& c : res.chunks) {
        json r;
        r["index"] = c.index;
        r["first_frame"] = c.first_frame;
        r["frames"] = c.frames;
        r["input_visible"] = c.input_visible;
        r["positions_computed"] = c.positions_computed;
        if (measure_time) r["wall_seconds"] = c.wall_seconds;
        chunks.push_back(r);
      }
      side["model_calls"] = res.model_calls();
      side["chunks"] = chunks;
    }
    write_grid_file(out / (std::string(name) + ".tgrd"), grid);
    detail::write_json(out / (std::string(name) + ".json"), side);
    index.push_back(name);
  }
  json j;
  j["checkpoint"] = checkpoint.filename().string();
  j["split"] = split_name(split);
  j["outputs"] = index;
  detail::write_json(out / "generate.json", j);
  log << "wrote " << ex.size() << " generated grids to " << out.string() << "\n";
}

inline EvalReport evaluate_model(const LoadedModel& lm, const Corpus& corpus, const EvalVariant& v,
                                 const EvalConfig& ec) {
  return lm.ck.mlm ? run_eval_mlm(lm.model, corpus, v, ec) : run_eval(lm.model, corpus, lm.ck.spec, v, ec);
}

inline std::string eval_csv_header() {
  return "t_f_frames,k_frames,variant,coherence,beat_f1,jsd,underruns,n,seed,coherence_floor,beat_floor,jsd_floor";
}

inline std::string eval_csv_row(const EvalReport& r, std::size_t underruns) {
  std::ostringstream o;
  o << r.t_f_frames << ',' << r.k_frames << ',' << r.variant << ',' << fmt_double(r.coherence) << ','
    << fmt_double(r.beat_f1) << ',' << fmt_double(r.jsd) << ',' << underruns << ',' << r.n_examples << ',' << r.seed
    << ',' << fmt_double(r.coherence_floor) << ',' << fmt_double(r.beat_floor) << ',' << fmt_double(r.jsd_floor);
  return o.str();
}

inline void cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& corpus_dir, const fs::path& out,
                     bool force, std::ostream& log) {
  validate(cfg);
  const Corpus corpus = load_corpus(corpus_dir);
  const LoadedModel lm = load_model(checkpoint, corpus);
  prepare_out_dir(out, force);
  write_snapshot(out, cfg);
  const EvalConfig ec = eval_config(cfg);
  const StreamSpec spec = lm.ck.mlm ? StreamSpec{0, 1} : lm.ck.spec;
  const SimTrace tr = simulate(spec, cfg.profile, static_cast<std::size_t>(cfg.sim_chunks), cfg.sim_seed);
  std::string csv = eval_csv_header() + "\n";
  json reports = json::array();
  for (const auto& name : cfg.variants) {
    const EvalReport r = evaluate_model(lm, corpus, EvalVariant::parse(name), ec);
    csv += eval_csv_row(r, tr.underruns) + "\n";
    json rj = r.to_json();
    rj["underruns"] = tr.underruns;
    reports.push_back(rj);
    log << r.variant << ": coherence " << fmt_double(r.coherence, 4) << " (floor " << fmt_double(r.coherence_floor, 4)
        << "), beat F1 " << fmt_double(r.beat_f1, 4) << ", JSD " << fmt_double(r.jsd, 4) << "\n";
  }
  streamacc::detail::write_text_file(out / "eval.csv", csv);
  json j;
  j["note"] = kSurrogateNote;
  j["reports"] = reports;
  detail::write_json(out / "eval.json", j);
}

// One row per (cell, variant) over the [train] grid found under runs_dir.
// Cells without a checkpoint are skipped and listed under "warnings".
inline std::size_t cmd_sweep(const RunConfig& cfg, const fs::path& corpus_dir, const fs::path& runs_dir,
                             const fs::path& out, bool force, std::ostream& log) {
  validate(cfg);
  const Corpus corpus = load_corpus(corpus_dir);
  prepare_out_dir(out, force);
  write_snapshot(out, cfg);
  const EvalConfig ec = eval_config(cfg);
  const auto grid = train_grid(cfg);
  std::string csv = eval_csv_header() + ",feasible,latency_margin_s,throughput_margin_s\n";
  json rows = json::array(), warnings = json::array();
  std::size_t n_rows = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const fs::path ckp = runs_dir / cell_name(grid[i]) / "checkpoint.bin";
    if (!fs::exists(ckp)) {
      const std::string w = "missing checkpoint for " + cell_name(grid[i]) + "; cell skipped";
      warnings.push_back(w);
      log << "warning: " << w << "\n";
      continue;
    }
    const LoadedModel lm = load_model(ckp, corpus);
    if (!lm.ck.mlm && !(lm.ck.spec == grid[i]))
      throw std::runtime_error("checkpoint " + ckp.string() + " was trained for a different (t_f, k)");
    const FeasibilityReport fr = feasible(grid[i], cfg.profile);
    const SimTrace tr = simulate(grid[i], cfg.profile, static_cast<std::size_t>(cfg.sim_chunks),
                                 derive_seed(cfg.sim_seed, 0x5111, i));
    for (const auto& name : cfg.variants) {
      const EvalReport r = evaluate_model(lm, corpus, EvalVariant::parse(name), ec);
      csv += eval_csv_row(r, tr.underruns) + "," + (fr.feasible ? "1" : "0") + "," +
             fmt_double(nanos_to_seconds(fr.latency_margin), 9) + "," +
             fmt_double(nanos_to_seconds(fr.throughput_margin), 9) + "\n";
      json row = r.to_json();
      row.erase("note");
      row["underruns"] = tr.underruns;
      row["feasible"] = fr.feasible;
      row["latency_margin_s"] = nanos_to_seconds(fr.latency_margin);
      row["throughput_margin_s"] = nanos_to_seconds(fr.throughput_margin);
      rows.push_back(row);
      ++n_rows;
      log << cell_name(grid[i]) << " " << r.variant << ": coherence " << fmt_double(r.coherence, 4) << "\n";
    }
  }
  streamacc::detail::write_text_file(out / "sweep.csv", csv);
  json j;
  j["note"] = kSurrogateNote;
  j["rows"] = rows;
  j["warnings"] = warnings;
  detail::write_json(out / "sweep.json", j);
  return n_rows;
}

inline json profile_json(const LatencyProfile& p) {
  json j;
  j["tau_sys"] = p.tau_sys;
  j["tau_jitter"] = p.tau_jitter;
  j["gen_a"] = p.gen_a;
  j["gen_b"] = p.gen_b;
  j["gen_alpha"] = p.gen_alpha;
  j["jitter"] = jitter_kind_name(p.jitter.kind);
  j["jitter_low"] = p.jitter.low;
  j["jitter_high"] = p.jitter.high;
  j["jitter_mean"] = p.jitter.mean;
  j["jitter_stddev"] = p.jitter.stddev;
  return j;
}

inline std::vector<FeasibilityCell> cmd_feasibility(const RunConfig& cfg, const fs::path& out, bool force,
                                                    std::ostream& log) {
  validate(cfg);
  prepare_out_dir(out, force);
  write_snapshot(out, cfg);
  std::vector<FeasibilityCell> cells;
  try {
    cells = sweep_feasibility(cfg.sched_t_f_grid_seconds, cfg.sched_k_grid_seconds, cfg.profile);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  streamacc::detail::write_text_file(out / "feasibility.csv", feasibility_csv(cells));
  json arr = json::array();
  std::size_t n_ok = 0;
  for (const auto& c : cells) {
    json r = spec_json(c.spec);
    r["latency_margin_s"] = nanos_to_seconds(c.report.latency_margin);
    r["throughput_margin_s"] = nanos_to_seconds(c.report.throughput_margin);
    r["feasible"] = c.report.feasible;
    arr.push_back(r);
    n_ok += c.report.feasible ? 1 : 0;
  }
  json j;
  j["profile"] = profile_json(cfg.profile);
  j["cells"] = arr;
  detail::write_json(out / "feasibility.json", j);

  // Text map: rows t_f, columns k.
  log << "feasible cells: " << n_ok << " / " << cells.size() << "\n" << "t_f \\ k";
  for (double k : cfg.sched_k_grid_seconds) log << "\t" << detail::fmt_num(k);
  log << "\n";
  std::size_t idx = 0;
  for (double tf : cfg.sched_t_f_grid_seconds) {
    log << detail::fmt_num(tf);
    for (std::size_t j = 0; j < cfg.sched_k_grid_seconds.size(); ++j) log << "\t" << (cells[idx++].report.feasible ? "ok" : ".");
    log << "\n";
  }
  return cells;
}

inline SimTrace cmd_simulate(const RunConfig& cfg, const fs::path& out, bool force, std::ostream& log) {
  validate(cfg);
  prepare_out_dir(out, force);
  write_snapshot(out, cfg);
  const StreamSpec spec = spec_from_seconds(cfg.t_f_seconds, cfg.k_seconds);
  const SimTrace tr = simulate(spec, cfg.profile, static_cast<std::size_t>(cfg.sim_chunks), cfg.sim_seed);
  const FeasibilityReport fr = feasible(spec, cfg.profile);
  streamacc::detail::write_text_file(out / "trace.csv", tr.to_csv());
  json j;
  j["spec"] = spec_json(spec);
  j["profile"] = profile_json(cfg.profile);
  j["seed"] = tr.seed;
  j["chunks"] = tr.chunks.size();
  j["underruns"] = tr.underruns;
  j["max_lateness_s"] = nanos_to_seconds(tr.max_lateness);
  j["update_rate_hz"] = tr.update_rate_hz;
  j["feasible"] = fr.feasible;
  j["latency_margin_s"] = nanos_to_seconds(fr.latency_margin);
  j["throughput_margin_s"] = nanos_to_seconds(fr.throughput_margin);
  detail::write_json(out / "trace.json", j);
  log << "simulated " << tr.chunks.size() << " chunks: " << tr.underruns << " underruns ("
      << (fr.feasible ? "feasible" : "infeasible") << ")\n";
  return tr;
}

// Times streamed decoding of this repository's model for each chunk length
// and fits t_gen(k) = a + b k^alpha. Wall-clock based, so not reproducible.
inline GenTimeFit cmd_calibrate(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& corpus_dir,
                                const fs::path& out, const std::vector<double>& k_seconds, std::size_t examples,
                                bool force, std::ostream& log) {
  validate(cfg);
  if (k_seconds.size() < 2) throw ConfigError("calibration needs at least two chunk durations");
  if (examples < 1) throw ConfigError("--examples must be >= 1");
  const Corpus corpus = load_corpus(corpus_dir);
  const LoadedModel lm = load_model(checkpoint, corpus);
  if (lm.ck.mlm) throw ConfigError("calibration needs a streaming checkpoint");
  prepare_out_dir(out, force);
  write_snapshot(out, cfg);
  const std::size_t window = eval_window(cfg, corpus);
  const std::size_t lookahead = static_cast<std::size_t>(std::max(lm.ck.spec.t_f_frames, 0));
  const auto ex = eval_examples(corpus, examples, window, lookahead, Split::valid);
  std::vector<double> ks, ts;
  json samples = json::array();
  for (double k : k_seconds) {
    const StreamSpec spec{lm.ck.spec.t_f_frames, spec_from_seconds(0, k).k_frames};
    double total = 0;
    std::size_t chunks = 0;
    for (std::size_t i = 0; i < ex.size(); ++i) {
      GenerateOptions opt;
      opt.sample = cfg.sample;
      opt.sample.seed = derive_seed(cfg.sample.seed, 0xCA1, i);
      opt.measure_time = true;
      const auto res = stream_generate(lm.model, ex[i].pair.input_mix, ex[i].pair.target_instrument, spec, opt,
                                       ex[i].pair.input_tail);
      // The final chunk also flushes trailing delayed frames; leave it out.
      for (std::size_t c = 0; c + 1 < res.chunks.size(); ++c) {
        total += res.chunks[c].wall_seconds;
        ++chunks;
      }
    }
    if (chunks == 0) throw ConfigError("chunk duration " + detail::fmt_num(k) + " s leaves no full chunks in the window");
    const double mean = total / static_cast<double>(chunks);
    ks.push_back(k);
    ts.push_back(mean);
    json s;
    s["k_seconds"] = k;
    s["mean_chunk_seconds"] = mean;
    s["chunks"] = chunks;
    samples.push_back(s);
    log << "k=" << detail::fmt_num(k) << " s: " << fmt_double(mean * 1e3, 3) << " ms per chunk\n";
  }
  const GenTimeFit fit = fit_gen_time(ks, ts);
  json j;
  j["note"] = "wall-clock measurement; values vary between machines and runs";
  j["samples"] = samples;
  j["gen_a"] = fit.a;
  j["gen_b"] = fit.b;
  j["gen_alpha"] = fit.alpha;
  j["rmse"] = fit.rmse;
  detail::write_json(out / "calibration.json", j);
  log << "fit: t_gen(k) = " << fit.a << " + " << fit.b << " * k^" << fit.alpha << "\n";
  return fit;
}

}  // namespace streamacc::cli
