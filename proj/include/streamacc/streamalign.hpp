#pragma once

// Alignment of the input (mixture) and output (target stem) streams for a
// design point (t_f, k).
//
// Frames are 0-based. Predicting output frame t may use input frames
// 0..t+t_f (inclusive) and output frames 0..t-1. The output stream is
// delay-patterned first, so "output frame" below means delayed frame tau.
//
// Fused sequence layout (one row per position p, logits at p predict the
// output row at p+1):
//
//   offset = max(t_f, 0)
//   output row 0            instrument slot
//   output rows 1..offset   PAD             (t_f > 0 only)
//   output row offset+1+tau delayed frame tau, tau in [0, T + N_q - 1)
//   output rows after that  PAD             (t_f < 0 only, |t_f| rows)
//   input row p             input frame p + min(t_f, 0), PAD embedding when
//                           that frame is negative or past the available input
//
//   length = 1 + T + (N_q - 1) + |t_f|
//
// For t_f < 0 the input is front-padded (the first |t_f| output frames see no
// input) and the output carries |t_f| trailing PAD rows; for t_f > 0 the
// output is front-padded and the input runs t_f frames past the window.

#include <algorithm>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamacc/common.hpp"
#include "streamacc/tokengrid.hpp"

namespace streamacc {

// Special per-level codes above the data vocabulary V.
struct Vocab {
  std::uint32_t data = 0;
  Code pad() const { return static_cast<Code>(data); }
  Code sentinel() const { return static_cast<Code>(data + 1); }
  Code mask() const { return static_cast<Code>(data + 2); }
  std::uint32_t model_size() const { return data + 3; }
};

struct StreamSpec {
  int t_f_frames = 0;
  int k_frames = 1;

  void validate() const {
    if (k_frames < 1) throw std::invalid_argument("StreamSpec: k_frames must be >= 1");
  }

  static StreamSpec from_seconds(double t_f_seconds, double k_seconds) {
    StreamSpec s;
    s.t_f_frames = static_cast<int>(seconds_to_frames(t_f_seconds));
    s.k_frames = static_cast<int>(seconds_to_frames(k_seconds));
    if (s.k_frames < 1) throw std::invalid_argument("StreamSpec: chunk duration must be at least one frame");
    return s;
  }
  double t_f_seconds() const { return frames_to_seconds(t_f_frames); }
  double k_seconds() const { return frames_to_seconds(k_frames); }

  bool operator==(const StreamSpec&) const = default;
};

inline std::size_t aligned_length(std::size_t T, std::size_t levels, int t_f) {
  return 1 + T + (levels - 1) + static_cast<std::size_t>(std::abs(t_f));
}

struct AlignedSequence {
  std::size_t length = 0;
  std::size_t levels = 1;
  std::uint32_t data_vocab = 0;
  int instrument = 0;
  bool input_dropped = false;  // zero the input embedding everywhere

  std::vector<std::uint8_t> input_pad;   // [length]
  std::vector<int> input_frame;          // [length], source input frame, -1 when padded
  std::vector<Code> input_codes;         // [length * levels]
  std::vector<Code> output_codes;        // [length * levels], row 0 is the instrument slot
  std::vector<Code> targets;             // [length * levels], target of logits at p
  std::vector<std::uint8_t> loss_mask;   // [length]
  std::vector<std::uint8_t> level_mask;  // [length * levels]

  int t_f = 0;
  int k = 1;
  std::size_t offset = 0;
  std::size_t source_frames = 0;
  std::size_t delayed_frames = 0;
  long long prefix = -1;  // sampled prefix length for chunk examples

  // Position whose logits predict delayed frame tau.
  std::size_t predict_position(std::size_t tau) const { return offset + tau; }
  long long input_frame_of(std::size_t p) const { return static_cast<long long>(p) + std::min(t_f, 0); }
  std::size_t loss_count() const {
    std::size_t n = 0;
    for (auto m : level_mask) n += m;
    return n;
  }
};

namespace detail {

inline void check_pair(const TokenGrid& input, const TokenGrid& output, const StreamSpec& spec) {
  spec.validate();
  if (input.frames() != output.frames())
    throw std::invalid_argument("align: input has " + std::to_string(input.frames()) + " frames, output has " +
                                std::to_string(output.frames()));
  if (input.levels() != output.levels()) throw std::invalid_argument("align: level count mismatch");
  if (input.vocab() != output.vocab()) throw std::invalid_argument("align: vocab mismatch");
  if (output.frames() == 0) throw std::invalid_argument("align: empty streams");
  if (static_cast<std::size_t>(std::abs(spec.t_f_frames)) >= output.frames())
    throw std::invalid_argument("align: |t_f| = " + std::to_string(std::abs(spec.t_f_frames)) +
                                " must be < T = " + std::to_string(output.frames()));
}

}  // namespace detail

// Marks input rows whose source frame exceeds `last_visible` as PAD. Rows
// already padded stay padded.
inline void restrict_input(AlignedSequence& seq, long long last_visible) {
  for (std::size_t p = 0; p < seq.length; ++p) {
    if (seq.input_pad[p]) continue;
    if (seq.input_frame[p] > last_visible) {
      seq.input_pad[p] = 1;
      seq.input_frame[p] = -1;
      std::fill_n(seq.input_codes.begin() + static_cast<std::ptrdiff_t>(p * seq.levels), seq.levels, Code{0});
    }
  }
}

// Drops positions at and after `new_length`.
inline void truncate_sequence(AlignedSequence& seq, std::size_t new_length) {
  if (new_length > seq.length) throw std::invalid_argument("truncate_sequence: cannot grow");
  const std::size_t nl = seq.levels;
  seq.length = new_length;
  seq.input_pad.resize(new_length);
  seq.input_frame.resize(new_length);
  seq.input_codes.resize(new_length * nl);
  seq.output_codes.resize(new_length * nl);
  seq.targets.resize(new_length * nl);
  seq.loss_mask.resize(new_length);
  seq.level_mask.resize(new_length * nl);
}

// Full-sequence alignment (k = 1 training and the decoding layout). Input
// frames past T come from `tail` when supplied, otherwise PAD.
inline AlignedSequence align(const TokenGrid& input, const TokenGrid& output, const StreamSpec& spec, int instrument,
                             const TokenGrid& tail = {}) {
  detail::check_pair(input, output, spec);
  if (!tail.empty() && tail.levels() != input.levels()) throw std::invalid_argument("align: tail level mismatch");
  const Vocab vocab{output.vocab()};
  const DelayedGrid delayed = apply_delay(output, vocab.sentinel());
  const std::size_t T = output.frames(), nq = output.levels(), Td = delayed.inner.frames();
  const int t_f = spec.t_f_frames;

  AlignedSequence s;
  s.length = aligned_length(T, nq, t_f);
  s.levels = nq;
  s.data_vocab = output.vocab();
  s.instrument = instrument;
  s.t_f = t_f;
  s.k = spec.k_frames;
  s.offset = static_cast<std::size_t>(std::max(t_f, 0));
  s.source_frames = T;
  s.delayed_frames = Td;

  const std::size_t L = s.length;
  s.input_pad.assign(L, 1);
  s.input_frame.assign(L, -1);
  s.input_codes.assign(L * nq, 0);
  s.output_codes.assign(L * nq, vocab.pad());
  s.targets.assign(L * nq, vocab.pad());
  s.loss_mask.assign(L, 0);
  s.level_mask.assign(L * nq, 0);

  for (std::size_t tau = 0; tau < Td; ++tau) {
    const std::size_t row = s.offset + 1 + tau;
    for (std::size_t l = 0; l < nq; ++l) s.output_codes[row * nq + l] = delayed.inner.at(tau, l);
  }
  for (std::size_t p = 0; p < L; ++p) {
    const long long f = s.input_frame_of(p);
    const TokenGrid* src = nullptr;
    std::size_t fi = 0;
    if (f >= 0 && static_cast<std::size_t>(f) < T) {
      src = &input;
      fi = static_cast<std::size_t>(f);
    } else if (f >= 0 && static_cast<std::size_t>(f) - T < tail.frames()) {
      src = &tail;
      fi = static_cast<std::size_t>(f) - T;
    }
    if (!src) continue;
    s.input_pad[p] = 0;
    s.input_frame[p] = static_cast<int>(f);
    for (std::size_t l = 0; l < nq; ++l) s.input_codes[p * nq + l] = src->at(fi, l);
  }
  for (std::size_t p = 0; p + 1 < L; ++p) {
    bool any = false;
    for (std::size_t l = 0; l < nq; ++l) {
      const Code c = s.output_codes[(p + 1) * nq + l];
      s.targets[p * nq + l] = c;
      if (c < vocab.data) {
        s.level_mask[p * nq + l] = 1;
        any = true;
      }
    }
    s.loss_mask[p] = any ? 1 : 0;
  }
  return s;
}

// Positions after the last supervised one never influence the loss under a
// causal mask; dropping them only saves compute.
inline void trim_after_last_loss(AlignedSequence& seq) {
  std::size_t last = 0;
  for (std::size_t p = 0; p < seq.length; ++p)
    if (seq.loss_mask[p]) last = p + 1;
  truncate_sequence(seq, last);
}

// Chunk (prefix) example for k > 1: prefix length l is drawn uniformly from
// {0, k, ..., T_k - k} where T_k is the delayed frame count truncated to a
// multiple of k. Only the k positions predicting delayed frames l..l+k-1
// carry loss, and the whole chunk sees input up to frame l + t_f.
inline AlignedSequence sample_prefix_example(const TokenGrid& input, const TokenGrid& output, const StreamSpec& spec,
                                             int instrument, Rng& rng, const TokenGrid& tail = {}) {
  detail::check_pair(input, output, spec);
  const int k = spec.k_frames;
  if (k < 2) throw std::invalid_argument("sample_prefix_example: requires k > 1");
  if (static_cast<std::size_t>(k) >= output.frames())
    throw std::invalid_argument("sample_prefix_example: k = " + std::to_string(k) + " must be < T = " +
                                std::to_string(output.frames()));
  AlignedSequence s = align(input, output, spec, instrument, tail);
  const std::size_t chunks = s.delayed_frames / static_cast<std::size_t>(k);
  const std::size_t prefix = static_cast<std::size_t>(k) * uniform_index(rng, chunks);
  s.prefix = static_cast<long long>(prefix);

  restrict_input(s, static_cast<long long>(prefix) + spec.t_f_frames);
  const std::size_t first = s.predict_position(prefix), last = first + static_cast<std::size_t>(k);
  truncate_sequence(s, last);
  for (std::size_t p = 0; p < first; ++p) {
    s.loss_mask[p] = 0;
    std::fill_n(s.level_mask.begin() + static_cast<std::ptrdiff_t>(p * s.levels), s.levels, std::uint8_t{0});
  }
  // Every delayed frame has at least one data level, so each chunk row is
  // supervised.
  for (std::size_t p = first; p < last; ++p) s.loss_mask[p] = 1;
  return s;
}

// Masked-prediction layout for the offline MLM baseline: row 0 holds the
// instrument (output) and PAD (input); row 1 + t holds input frame t and
// output frame t (or MASK). Logits at row p predict row p itself.
inline AlignedSequence mlm_layout(const TokenGrid& input, const std::vector<Code>& output_codes, int instrument,
                                  std::uint32_t data_vocab) {
  const std::size_t T = input.frames(), nq = input.levels();
  if (output_codes.size() != T * nq) throw std::invalid_argument("mlm_layout: output size mismatch");
  const Vocab vocab{data_vocab};
  AlignedSequence s;
  s.length = T + 1;
  s.levels = nq;
  s.data_vocab = data_vocab;
  s.instrument = instrument;
  s.source_frames = T;
  s.delayed_frames = T;
  s.input_pad.assign(s.length, 1);
  s.input_frame.assign(s.length, -1);
  s.input_codes.assign(s.length * nq, 0);
  s.output_codes.assign(s.length * nq, vocab.pad());
  s.targets.assign(s.length * nq, vocab.pad());
  s.loss_mask.assign(s.length, 0);
  s.level_mask.assign(s.length * nq, 0);
  for (std::size_t t = 0; t < T; ++t) {
    s.input_pad[t + 1] = 0;
    s.input_frame[t + 1] = static_cast<int>(t);
    for (std::size_t l = 0; l < nq; ++l) {
      s.input_codes[(t + 1) * nq + l] = input.at(t, l);
      s.output_codes[(t + 1) * nq + l] = output_codes[t * nq + l];
    }
  }
  return s;
}

}  // namespace streamacc
