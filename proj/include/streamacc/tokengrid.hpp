#pragma once

// Token grids: T frames x N_q RVQ levels of discrete code indices, the
// delay-pattern interleaving used on the output stream, and the binary
// grid file format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace streamacc {

using Code = std::uint16_t;

inline constexpr int kFrameRate = 50;

// Row-major frames x levels. Immutable once built.
class TokenGrid {
 public:
  TokenGrid() = default;

  TokenGrid(std::size_t frames, std::size_t levels, std::uint32_t vocab, std::vector<Code> codes)
      : frames_(frames), levels_(levels), vocab_(vocab), codes_(std::move(codes)) {
    if (levels_ < 1) throw std::invalid_argument("TokenGrid: levels must be >= 1");
    if (vocab_ < 1) throw std::invalid_argument("TokenGrid: vocab must be >= 1");
    if (codes_.size() != frames_ * levels_)
      throw std::invalid_argument("TokenGrid: codes size " + std::to_string(codes_.size()) +
                                  " != frames*levels " + std::to_string(frames_ * levels_));
    for (Code c : codes_)
      if (c >= vocab_)
        throw std::invalid_argument("TokenGrid: code " + std::to_string(c) + " outside vocab " +
                                    std::to_string(vocab_));
  }

  // All-zero grid.
  static TokenGrid zeros(std::size_t frames, std::size_t levels, std::uint32_t vocab) {
    return TokenGrid(frames, levels, vocab, std::vector<Code>(frames * levels, 0));
  }

  std::size_t frames() const { return frames_; }
  std::size_t levels() const { return levels_; }
  std::uint32_t vocab() const { return vocab_; }
  bool empty() const { return frames_ == 0; }

  Code at(std::size_t frame, std::size_t level) const { return codes_[frame * levels_ + level]; }
  std::span<const Code> row(std::size_t frame) const {
    return {codes_.data() + frame * levels_, levels_};
  }
  std::span<const Code> codes() const { return codes_; }

  bool operator==(const TokenGrid&) const = default;

 private:
  std::size_t frames_ = 0;
  std::size_t levels_ = 1;
  std::uint32_t vocab_ = 1;
  std::vector<Code> codes_;
};

// Output of apply_delay. `inner` has T + N_q - 1 frames; its vocab is widened
// so the sentinel fits.
struct DelayedGrid {
  TokenGrid inner;
  Code sentinel = 0;
  std::uint32_t data_vocab = 0;

  std::size_t source_frames() const { return inner.frames() + 1 - inner.levels(); }
  bool operator==(const DelayedGrid&) const = default;
};

// Level l (0-based) is shifted right by l frames.
inline DelayedGrid apply_delay(const TokenGrid& grid, Code sentinel) {
  if (sentinel < grid.vocab())
    throw std::invalid_argument("apply_delay: sentinel " + std::to_string(sentinel) +
                                " collides with data vocab " + std::to_string(grid.vocab()));
  const std::size_t T = grid.frames(), nq = grid.levels();
  const std::size_t out_frames = T + nq - 1;
  std::vector<Code> codes(out_frames * nq, sentinel);
  for (std::size_t tau = 0; tau < out_frames; ++tau)
    for (std::size_t l = 0; l < nq; ++l)
      if (tau >= l && tau - l < T) codes[tau * nq + l] = grid.at(tau - l, l);
  const std::uint32_t vocab = std::max<std::uint32_t>(grid.vocab(), std::uint32_t{sentinel} + 1);
  return DelayedGrid{TokenGrid(out_frames, nq, vocab, std::move(codes)), sentinel, grid.vocab()};
}

inline TokenGrid undo_delay(const DelayedGrid& delayed) {
  const TokenGrid& g = delayed.inner;
  const std::size_t nq = g.levels();
  if (g.frames() + 1 < nq)
    throw std::invalid_argument("undo_delay: delayed grid shorter than N_q - 1 frames");
  const std::size_t T = g.frames() + 1 - nq;
  std::vector<Code> codes(T * nq);
  for (std::size_t tau = 0; tau < g.frames(); ++tau) {
    for (std::size_t l = 0; l < nq; ++l) {
      const Code c = g.at(tau, l);
      const bool data_region = tau >= l && tau - l < T;
      if (data_region) {
        if (c >= delayed.data_vocab)
          throw std::invalid_argument("undo_delay: non-data code in data region at frame " +
                                      std::to_string(tau));
        codes[(tau - l) * nq + l] = c;
      } else if (c != delayed.sentinel) {
        throw std::invalid_argument("undo_delay: malformed sentinel region at frame " +
                                    std::to_string(tau) + " level " + std::to_string(l));
      }
    }
  }
  return TokenGrid(T, nq, delayed.data_vocab, std::move(codes));
}

inline TokenGrid slice_frames(const TokenGrid& grid, std::size_t start, std::size_t end) {
  if (start > end || end > grid.frames())
    throw std::out_of_range("slice_frames: [" + std::to_string(start) + ", " + std::to_string(end) +
                            ") outside 0.." + std::to_string(grid.frames()));
  auto all = grid.codes();
  std::vector<Code> codes(all.begin() + static_cast<std::ptrdiff_t>(start * grid.levels()),
                          all.begin() + static_cast<std::ptrdiff_t>(end * grid.levels()));
  return TokenGrid(end - start, grid.levels(), grid.vocab(), std::move(codes));
}

// Extra latency introduced by the delay pattern, in seconds.
inline double delay_latency_seconds(std::size_t levels, double frame_rate = kFrameRate) {
  return static_cast<double>(levels - 1) / frame_rate;
}

// Seconds <-> frames on the 50 Hz grid. Values off the grid by more than
// 1e-9 s are rejected.
inline long long seconds_to_frames(double seconds, double frame_rate = kFrameRate) {
  if (!std::isfinite(seconds)) throw std::invalid_argument("seconds_to_frames: non-finite value");
  const double frames = std::round(seconds * frame_rate);
  if (std::abs(frames / frame_rate - seconds) > 1e-9) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%g s is not a whole number of frames at %g Hz", seconds, frame_rate);
    throw std::invalid_argument(buf);
  }
  return static_cast<long long>(frames);
}

inline double frames_to_seconds(long long frames, double frame_rate = kFrameRate) {
  return static_cast<double>(frames) / frame_rate;
}

// ---------------------------------------------------------------------------
// Binary grid file (little-endian):
//   magic "TGRD" | version u32 | T u32 | N_q u32 | V u32 | T*N_q u16 codes
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kGridFileVersion = 1;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}
inline void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}
inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

inline std::vector<unsigned char> encode_grid(const TokenGrid& grid) {
  std::vector<unsigned char> out;
  out.reserve(20 + grid.codes().size() * 2);
  for (char c : {'T', 'G', 'R', 'D'}) out.push_back(static_cast<unsigned char>(c));
  detail::put_u32(out, kGridFileVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(grid.frames()));
  detail::put_u32(out, static_cast<std::uint32_t>(grid.levels()));
  detail::put_u32(out, grid.vocab());
  for (Code c : grid.codes()) detail::put_u16(out, c);
  return out;
}

inline TokenGrid decode_grid(std::span<const unsigned char> bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), "TGRD", 4) != 0)
    throw std::runtime_error("grid file: bad magic");
  const unsigned char* p = bytes.data();
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != kGridFileVersion)
    throw std::runtime_error("grid file: unsupported version " + std::to_string(version));
  const std::uint32_t T = detail::get_u32(p + 8), nq = detail::get_u32(p + 12),
                      V = detail::get_u32(p + 16);
  const std::size_t n = std::size_t{T} * nq;
  if (bytes.size() != 20 + 2 * n) throw std::runtime_error("grid file: truncated or oversized payload");
  std::vector<Code> codes(n);
  for (std::size_t i = 0; i < n; ++i) codes[i] = detail::get_u16(p + 20 + 2 * i);
  return TokenGrid(T, nq, V, std::move(codes));
}

inline void write_grid_file(const std::filesystem::path& path, const TokenGrid& grid) {
  const auto bytes = encode_grid(grid);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline TokenGrid read_grid_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_grid(bytes);
}

}  // namespace streamacc
