#pragma once

// Inference: top-k / temperature sampling, chunked streaming generation
// with an incremental cache, and iterative confidence-ranked decoding for
// the masked baseline with classifier-free guidance.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamacc/common.hpp"
#include "streamacc/streamalign.hpp"
#include "streamacc/tinyformer.hpp"

namespace streamacc {

struct SampleConfig {
  double temperature = 1.0;
  int top_k = 200;  // clipped to the data vocabulary
  std::uint64_t seed = 0;

  void validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("SampleConfig: temperature must be > 0");
    if (top_k < 1) throw std::invalid_argument("SampleConfig: top_k must be >= 1");
  }
};

// Draws a data code (special tokens are never sampled). Ties in the top-k
// cut are broken toward the lower code.
template <class S>
Code sample_token(const S* logits, std::uint32_t data_vocab, const SampleConfig& cfg, Rng& rng) {
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k), data_vocab);
  std::vector<std::uint32_t> idx(data_vocab);
  std::iota(idx.begin(), idx.end(), 0u);
  auto better = [&](std::uint32_t a, std::uint32_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  if (k == 1) return static_cast<Code>(idx[0]);
  const double mx = static_cast<double>(logits[idx[0]]);
  std::vector<double> w(k);
  double sum = 0;
  for (std::size_t i = 0; i < k; ++i) sum += (w[i] = std::exp((static_cast<double>(logits[idx[i]]) - mx) / cfg.temperature));
  double u = uniform01(rng) * sum;
  for (std::size_t i = 0; i < k; ++i) {
    if (u < w[i]) return static_cast<Code>(idx[i]);
    u -= w[i];
  }
  return static_cast<Code>(idx[k - 1]);
}

// ---------------------------------------------------------------------------
// Streaming generation
// ---------------------------------------------------------------------------

struct ChunkRecord {
  std::size_t index = 0;
  std::size_t first_frame = 0;   // first delayed frame of the chunk
  std::size_t frames = 0;        // delayed frames emitted
  long long input_visible = -1;  // last input frame the chunk may see
  std::size_t positions_computed = 0;
  double wall_seconds = 0;  // only measured when requested
};

struct GenerateResult {
  TokenGrid output;
  DelayedGrid delayed;
  std::vector<ChunkRecord> chunks;
  std::size_t model_calls() const { return chunks.size(); }
};

struct GenerateOptions {
  SampleConfig sample;
  // Warm start: source frames < prompt_frames of the output are forced to
  // `prompt` instead of being sampled.
  const TokenGrid* prompt = nullptr;
  std::size_t prompt_frames = 0;
  bool measure_time = false;
};

// Generates T output frames for `input` (T frames, optional lookahead tail).
// Chunk j emits delayed frames [jk, min(jk + k, T)); the last chunk also
// flushes the N_q - 1 trailing delayed frames, so there are ceil(T / k)
// chunks. Every position of chunk j sees input frames <= jk + t_f only.
template <class S>
GenerateResult stream_generate(const TinyFormer<S>& model, const TokenGrid& input, int instrument,
                               const StreamSpec& spec, const GenerateOptions& opt, const TokenGrid& tail = {}) {
  spec.validate();
  opt.sample.validate();
  const auto& mc = model.config();
  if (!mc.causal) throw std::invalid_argument("stream_generate: model is not causal");
  if (input.levels() != static_cast<std::size_t>(mc.levels) || input.vocab() != mc.data_vocab)
    throw std::invalid_argument("stream_generate: input grid does not match the model's levels/vocab");
  const std::size_t T = input.frames(), nq = input.levels();
  const std::uint32_t V = input.vocab();
  if (opt.prompt_frames > 0) {
    if (!opt.prompt || opt.prompt->levels() != nq || opt.prompt->frames() < opt.prompt_frames)
      throw std::invalid_argument("stream_generate: prompt grid shorter than prompt_frames");
    if (opt.prompt_frames > T) throw std::invalid_argument("stream_generate: prompt longer than the input");
  }

  AlignedSequence full = align(input, TokenGrid::zeros(T, nq, V), spec, instrument, tail);
  AlignedSequence seq = full;
  restrict_input(seq, std::numeric_limits<long long>::min());
  const Vocab vocab{V};
  const std::size_t Td = full.delayed_frames, k = static_cast<std::size_t>(spec.k_frames);
  std::vector<Code> delayed(Td * nq, vocab.sentinel());

  Workspace<S> ws;
  ws.ensure(mc, seq.length);
  Rng rng(opt.sample.seed);
  GenerateResult res;
  std::size_t computed = 0;  // positions [0, computed) are valid in the cache
  long long visible = std::numeric_limits<long long>::min();
  const std::size_t n_chunks = (T + k - 1) / k;

  for (std::size_t j = 0; j < n_chunks; ++j) {
    const auto t0 = std::chrono::steady_clock::now();
    ChunkRecord rec;
    rec.index = j;
    rec.first_frame = j * k;
    const std::size_t end = (j + 1 == n_chunks) ? Td : std::min((j + 1) * k, T);
    rec.frames = end - rec.first_frame;
    const long long new_visible = static_cast<long long>(j * k) + spec.t_f_frames;
    rec.input_visible = new_visible;
    // Reveal input rows whose frames became visible; recompute from the first.
    for (std::size_t p = 0; p < seq.length; ++p) {
      if (full.input_pad[p]) continue;
      const long long f = full.input_frame[p];
      if (f > visible && f <= new_visible) {
        seq.input_pad[p] = 0;
        seq.input_frame[p] = full.input_frame[p];
        std::copy_n(full.input_codes.begin() + static_cast<std::ptrdiff_t>(p * nq), nq,
                    seq.input_codes.begin() + static_cast<std::ptrdiff_t>(p * nq));
        computed = std::min(computed, p);
      }
    }
    visible = new_visible;

    for (std::size_t tau = rec.first_frame; tau < end; ++tau) {
      const std::size_t pos = seq.predict_position(tau);
      if (computed <= pos) {
        rec.positions_computed += pos + 1 - computed;
        model.forward(seq, ws, computed, pos + 1);
        computed = pos + 1;
      }
      for (std::size_t l = 0; l < nq; ++l) {
        if (tau < l || tau - l >= T) continue;  // sentinel slot
        const std::size_t src = tau - l;
        Code c;
        if (src < opt.prompt_frames) {
          c = opt.prompt->at(src, l);
        } else {
          c = sample_token(model.logits(ws, pos, l), V, opt.sample, rng);
        }
        delayed[tau * nq + l] = c;
      }
      const std::size_t row = seq.offset + 1 + tau;
      if (row < seq.length) {
        std::copy_n(delayed.begin() + static_cast<std::ptrdiff_t>(tau * nq), nq,
                    seq.output_codes.begin() + static_cast<std::ptrdiff_t>(row * nq));
        computed = std::min(computed, row);
      }
    }
    if (opt.measure_time) rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.chunks.push_back(rec);
  }

  res.delayed = DelayedGrid{TokenGrid(Td, nq, vocab.sentinel() + 1u, delayed), vocab.sentinel(), V};
  res.output = undo_delay(res.delayed);
  return res;
}

// ---------------------------------------------------------------------------
// Masked baseline decoding
// ---------------------------------------------------------------------------

struct MlmDecodeConfig {
  std::vector<double> temperatures{8.0, 8.0, 4.0, 4.0};  // max noise temperature per level
  std::vector<int> steps{128, 64, 32, 32};                // iterations per level
  double cfg_scale = 2.0;
  SampleConfig sample;

  void validate(std::size_t levels) const {
    if (temperatures.size() != levels || steps.size() != levels)
      throw std::invalid_argument("MlmDecodeConfig: need one temperature and one step count per level");
    for (double t : temperatures)
      if (!(t >= 0.0)) throw std::invalid_argument("MlmDecodeConfig: temperatures must be >= 0");
    for (int s : steps)
      if (s < 1) throw std::invalid_argument("MlmDecodeConfig: step counts must be >= 1");
    if (!std::isfinite(cfg_scale)) throw std::invalid_argument("MlmDecodeConfig: cfg_scale must be finite");
    sample.validate();
  }
};

// Masked positions left after each iteration for M initially masked frames
// and S iterations (S clamped to M): cosine fraction, strictly decreasing,
// zero after the last iteration.
inline std::vector<std::size_t> mlm_mask_schedule(std::size_t M, std::size_t S) {
  if (M == 0) return {};
  S = std::clamp<std::size_t>(S, 1, M);
  std::vector<std::size_t> n(S);
  std::size_t prev = M;
  for (std::size_t i = 0; i < S; ++i) {
    const double frac = std::cos(std::numbers::pi / 2 * static_cast<double>(i + 1) / static_cast<double>(S));
    std::size_t f = static_cast<std::size_t>(std::floor(static_cast<double>(M) * std::max(frac, 0.0)));
    f = std::min(f, prev - 1);
    f = std::max(f, S - 1 - i);  // leave room to keep decreasing
    if (i + 1 == S) f = 0;
    n[i] = f;
    prev = f;
  }
  return n;
}

// Gumbel noise temperature at iteration i of S, annealed linearly to 0.
inline double mlm_temperature(std::size_t i, std::size_t S, double t_max) {
  if (S <= 1) return 0.0;
  if (i + 1 >= S) return 0.0;
  return t_max * (1.0 - static_cast<double>(i) / static_cast<double>(S - 1));
}

// Written as cond + (scale - 1)(cond - uncond), equal to
// uncond + scale (cond - uncond), so scale = 1 returns cond bit-exactly.
template <class S>
void guide_logits(const S* cond, const S* uncond, double scale, S* out, std::size_t n) {
  const S s1 = static_cast<S>(scale - 1.0);
  for (std::size_t i = 0; i < n; ++i) out[i] = cond[i] + s1 * (cond[i] - uncond[i]);
}

struct MlmIteration {
  std::size_t level = 0, iteration = 0;
  std::size_t masked_before = 0, masked_after = 0;
  double temperature = 0;
};

struct MlmResult {
  TokenGrid output;
  std::vector<MlmIteration> trace;
};

template <class S>
MlmResult mlm_generate(const TinyFormer<S>& model, const TokenGrid& input, int instrument, const MlmDecodeConfig& cfg,
                       const TokenGrid* prompt = nullptr, std::size_t prompt_frames = 0) {
  const auto& mc = model.config();
  if (mc.causal) throw std::invalid_argument("mlm_generate: model uses a causal mask");
  if (input.levels() != static_cast<std::size_t>(mc.levels) || input.vocab() != mc.data_vocab)
    throw std::invalid_argument("mlm_generate: input grid does not match the model");
  const std::size_t T = input.frames(), nq = input.levels();
  cfg.validate(nq);
  if (prompt_frames > 0 && (!prompt || prompt->frames() < prompt_frames || prompt_frames > T))
    throw std::invalid_argument("mlm_generate: bad prompt");
  const std::uint32_t V = input.vocab();
  const Vocab vocab{V};

  std::vector<Code> out(T * nq, vocab.mask());
  for (std::size_t t = 0; t < prompt_frames; ++t)
    for (std::size_t l = 0; l < nq; ++l) out[t * nq + l] = prompt->at(t, l);

  Rng rng(cfg.sample.seed);
  Workspace<S> wc, wu;
  std::vector<S> guided(V);
  MlmResult res;
  for (std::size_t l = 0; l < nq; ++l) {
    std::vector<std::size_t> masked;
    for (std::size_t t = prompt_frames; t < T; ++t) masked.push_back(t);
    const auto sched = mlm_mask_schedule(masked.size(), static_cast<std::size_t>(cfg.steps[l]));
    for (std::size_t it = 0; it < sched.size(); ++it) {
      AlignedSequence s = mlm_layout(input, out, instrument, V);
      model.forward(s, wc);
      const bool guided_pass = cfg.cfg_scale != 1.0;
      if (guided_pass) {
        s.input_dropped = true;
        model.forward(s, wu);
      }
      const double temp = mlm_temperature(it, sched.size(), cfg.temperatures[l]);
      std::vector<std::pair<double, std::size_t>> conf;
      std::vector<Code> drawn(masked.size());
      for (std::size_t m = 0; m < masked.size(); ++m) {
        const std::size_t row = masked[m] + 1;
        const S* c = model.logits(wc, row, l);
        if (guided_pass) {
          guide_logits(c, model.logits(wu, row, l), cfg.cfg_scale, guided.data(), V);
        } else {
          std::copy_n(c, V, guided.data());
        }
        const Code tok = sample_token(guided.data(), V, cfg.sample, rng);
        drawn[m] = tok;
        double mx = guided[0];
        for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, static_cast<double>(guided[v]));
        double sum = 0;
        for (std::size_t v = 0; v < V; ++v) sum += std::exp(static_cast<double>(guided[v]) - mx);
        const double logp = static_cast<double>(guided[tok]) - mx - std::log(sum);
        double gumbel = 0;
        if (temp > 0) {
          const double u = std::max(uniform01(rng), 1e-300);
          gumbel = -std::log(-std::log(u) + 1e-300);
        }
        conf.push_back({logp + temp * gumbel, m});
      }
      const std::size_t keep = masked.size() - sched[it];
      std::stable_sort(conf.begin(), conf.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      std::vector<std::uint8_t> fixed(masked.size(), 0);
      for (std::size_t i = 0; i < keep; ++i) fixed[conf[i].second] = 1;
      std::vector<std::size_t> still;
      for (std::size_t m = 0; m < masked.size(); ++m) {
        if (fixed[m]) {
          out[masked[m] * nq + l] = drawn[m];
        } else {
          still.push_back(masked[m]);
        }
      }
      res.trace.push_back({l, it, masked.size(), still.size(), temp});
      masked = std::move(still);
    }
  }
  res.output = TokenGrid(T, nq, V, std::move(out));
  return res;
}

}  // namespace streamacc
