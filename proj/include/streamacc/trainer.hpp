#pragma once

// Optimization loop: Adam with bias correction, linear warmup then cosine
// decay, global-norm gradient clipping, batches of freshly drawn example
// pairs, periodic validation and checkpoints.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamacc/checkpoint.hpp"
#include "streamacc/common.hpp"
#include "streamacc/streamalign.hpp"
#include "streamacc/synthdata.hpp"
#include "streamacc/tinyformer.hpp"

namespace streamacc {

struct TrainConfig {
  double peak_lr = 1e-4;
  double floor_lr = 1e-5;
  int warmup_steps = 200;  // full scale: 10000
  int total_steps = 1000;
  int batch_size = 16;  // full scale: 64 streaming, 96 masked
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  double input_dropout_prob = 0.0;  // masked baseline uses 0.2
  int window_frames = 0;            // 0: the corpus window length
  int valid_every = 100;
  int valid_examples = 32;
  int checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
    if (!(peak_lr > 0.0) || !(floor_lr >= 0.0) || floor_lr > peak_lr) fail("need 0 <= floor_lr <= peak_lr, peak_lr > 0");
    if (total_steps < 1) fail("total_steps must be >= 1");
    if (warmup_steps < 0 || warmup_steps >= total_steps) fail("need 0 <= warmup_steps < total_steps");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("adam betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
    if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0 (0 disables)");
    if (!(input_dropout_prob >= 0.0 && input_dropout_prob <= 1.0)) fail("input_dropout_prob must be in [0, 1]");
    if (window_frames < 0) fail("window_frames must be >= 0");
    if (valid_every < 0 || valid_examples < 0 || checkpoint_every < 0) fail("intervals must be >= 0");
  }
};

// Linear 0 -> peak over the warmup, cosine peak -> floor over the rest.
inline double lr_at(int step, const TrainConfig& c) {
  if (step < 0 || step > c.total_steps) throw std::out_of_range("lr_at: step outside [0, total_steps]");
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / c.warmup_steps;
  if (step == c.warmup_steps) return c.peak_lr;
  if (step == c.total_steps) return c.floor_lr;
  const double frac = static_cast<double>(step - c.warmup_steps) / (c.total_steps - c.warmup_steps);
  return c.floor_lr + (c.peak_lr - c.floor_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

// Draws one example pair from `songs`, moving to another song when a song
// has no window passing the overlap filter.
inline ExamplePair draw_pair(const Corpus& corpus, const std::vector<std::size_t>& songs, std::size_t window,
                             std::uint64_t seed, std::size_t lookahead) {
  if (songs.empty()) throw std::invalid_argument("draw_pair: empty song list");
  Rng rng(seed);
  std::string last_error;
  for (int attempt = 0; attempt < 16; ++attempt) {
    const std::size_t song = songs[uniform_index(rng, songs.size())];
    try {
      return make_example(corpus.songs[song], window, derive_seed(seed, 0xE7, attempt), lookahead);
    } catch (const std::exception& e) {
      last_error = e.what();
    }
  }
  throw std::runtime_error("draw_pair: no usable window after 16 songs (" + last_error + ")");
}

// k = 1: full-sequence loss. k > 1: one supervised chunk after a sampled prefix.
inline AlignedSequence make_stream_example(const ExamplePair& ex, const StreamSpec& spec, Rng& rng) {
  if (spec.k_frames == 1) {
    AlignedSequence s = align(ex.input_mix, ex.target, spec, ex.target_instrument, ex.input_tail);
    trim_after_last_loss(s);
    return s;
  }
  return sample_prefix_example(ex.input_mix, ex.target, spec, ex.target_instrument, rng, ex.input_tail);
}

// Masked-prediction example: one level is drawn; a cosine-scheduled fraction
// of its frames is masked and supervised, lower levels are given, higher
// levels are fully masked. The whole input is dropped with dropout_prob.
inline AlignedSequence make_mlm_example(const TokenGrid& input, const TokenGrid& target, int instrument, Rng& rng,
                                        double dropout_prob) {
  const std::size_t T = target.frames(), nq = target.levels();
  const Vocab vocab{target.vocab()};
  const std::size_t level = uniform_index(rng, nq);
  const double ratio = std::cos(std::numbers::pi / 2 * uniform01(rng));
  const std::size_t m =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(T))), 1, T);
  std::vector<std::size_t> order(T);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::uint8_t> masked(T, 0);
  for (std::size_t i = 0; i < m; ++i) masked[order[i]] = 1;

  std::vector<Code> out(T * nq);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t l = 0; l < nq; ++l)
      out[t * nq + l] = (l < level || (l == level && !masked[t])) ? target.at(t, l) : vocab.mask();
  AlignedSequence s = mlm_layout(input, out, instrument, target.vocab());
  for (std::size_t t = 0; t < T; ++t) {
    if (!masked[t]) continue;
    const std::size_t row = t + 1;
    s.targets[row * nq + level] = target.at(t, level);
    s.level_mask[row * nq + level] = 1;
    s.loss_mask[row] = 1;
  }
  s.input_dropped = uniform01(rng) < dropout_prob;
  return s;
}

struct LossRecord {
  int step = 0;
  double train_loss = 0;
  double valid_loss = std::nan("");  // NaN when not evaluated at this step
  double lr = 0;
};

inline std::string loss_csv(const std::vector<LossRecord>& rows) {
  std::string out = "step,train_loss,valid_loss,lr\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + "," + fmt_double(r.train_loss) + "," +
           (std::isnan(r.valid_loss) ? std::string() : fmt_double(r.valid_loss)) + "," + fmt_double(r.lr, 9) + "\n";
  return out;
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  // The model's level count, vocabulary and frozen-codebook seed are taken
  // from the corpus; the masked objective also switches off the causal mask.
  Trainer(const Corpus& corpus, ModelConfig mcfg, StreamSpec spec, TrainConfig tcfg, bool mlm = false)
      : corpus_(corpus), spec_(spec), cfg_(tcfg), mlm_(mlm) {
    cfg_.validate();
    spec_.validate();
    mcfg.levels = corpus.cfg.levels;
    mcfg.data_vocab = corpus.cfg.vocab_size;
    mcfg.codebook_seed = corpus.cfg.seed;
    mcfg.causal = !mlm;
    model_ = TinyFormer<float>(mcfg);
    window_ = cfg_.window_frames > 0 ? static_cast<std::size_t>(cfg_.window_frames)
                                     : static_cast<std::size_t>(corpus.cfg.window_frames);
    if (window_ > static_cast<std::size_t>(corpus.cfg.song_frames))
      throw std::invalid_argument("Trainer: window longer than songs");
    if (!mlm_ && spec_.k_frames > 1 && static_cast<std::size_t>(spec_.k_frames) >= window_)
      throw std::invalid_argument("Trainer: k must be smaller than the training window");
    if (!mlm_ && static_cast<std::size_t>(std::abs(spec_.t_f_frames)) >= window_)
      throw std::invalid_argument("Trainer: |t_f| must be smaller than the training window");
    const std::size_t need = mlm_ ? window_ + 1 : aligned_length(window_, mcfg.levels, spec_.t_f_frames);
    if (need > static_cast<std::size_t>(mcfg.max_positions))
      throw std::invalid_argument("Trainer: sequences of " + std::to_string(need) + " positions exceed max_positions");
    train_songs_ = corpus.indices(Split::train);
    if (train_songs_.empty()) throw std::invalid_argument("Trainer: corpus has no training songs");
    build_validation_set();
    const std::size_t n = model_.layout().total();
    adam_.m.assign(n, 0.0f);
    adam_.v.assign(n, 0.0f);
    grads_.assign(n, 0.0f);
  }

  const TinyFormer<float>& model() const { return model_; }
  TinyFormer<float>& model() { return model_; }
  int step() const { return step_; }
  const std::vector<LossRecord>& history() const { return history_; }
  const TrainConfig& config() const { return cfg_; }

  // Builds the i-th example of training step `step` (deterministic).
  AlignedSequence training_example(int step, int i) const {
    const std::uint64_t seed = derive_seed(cfg_.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i));
    const std::size_t lookahead = static_cast<std::size_t>(std::max(spec_.t_f_frames, 0));
    ExamplePair ex = draw_pair(corpus_, train_songs_, window_, seed, mlm_ ? 0 : lookahead);
    Rng rng(derive_seed(seed, 0xA1));
    if (mlm_) return make_mlm_example(ex.input_mix, ex.target, ex.target_instrument, rng, cfg_.input_dropout_prob);
    AlignedSequence s = make_stream_example(ex, spec_, rng);
    if (cfg_.input_dropout_prob > 0.0) s.input_dropped = uniform01(rng) < cfg_.input_dropout_prob;
    return s;
  }

  // One optimizer update; returns the batch-mean training loss.
  double train_step() {
    if (step_ >= cfg_.total_steps) throw std::logic_error("train_step: schedule finished");
    std::fill(grads_.begin(), grads_.end(), 0.0f);
    double loss = 0;
    const float inv_b = 1.0f / static_cast<float>(cfg_.batch_size);
    for (int b = 0; b < cfg_.batch_size; ++b) {
      const AlignedSequence s = training_example(step_, b);
      model_.forward(s, ws_);
      dlogits_.resize(s.length * model_.config().levels * model_.config().vocab());
      const double l = cross_entropy<float>(s, ws_.logits, model_.config().vocab(), dlogits_);
      for (float& g : dlogits_) g *= inv_b;
      model_.backward(s, ws_, dlogits_, grads_);
      loss += l;
    }
    loss /= cfg_.batch_size;
    if (!std::isfinite(loss))
      throw TrainingDiverged("training diverged at step " + std::to_string(step_ + 1) + " (non-finite loss)");
    const double lr = lr_at(step_ + 1, cfg_);
    apply_adam(lr);
    ++step_;
    LossRecord rec{step_, loss, std::nan(""), lr};
    const bool validate_now =
        cfg_.valid_examples > 0 && ((cfg_.valid_every > 0 && step_ % cfg_.valid_every == 0) || step_ == cfg_.total_steps);
    if (validate_now) rec.valid_loss = validation_loss();
    history_.push_back(rec);
    return loss;
  }

  double validation_loss() const {
    if (valid_.empty()) throw std::logic_error("validation_loss: no validation examples");
    Workspace<float> ws;
    double total = 0;
    for (const auto& s : valid_) {
      model_.forward(s, ws);
      total += cross_entropy<float>(s, ws.logits, model_.config().vocab());
    }
    return total / static_cast<double>(valid_.size());
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.model = model_.config();
    ck.spec = spec_;
    ck.mlm = mlm_;
    ck.step = static_cast<std::uint64_t>(step_);
    ck.params = model_.params();
    ck.has_optimizer = true;
    ck.adam = adam_;
    return ck;
  }

  // Runs the remaining schedule. When out_dir is non-empty, writes loss.csv
  // and checkpoints there. on_step is called after every update.
  void run(const std::filesystem::path& out_dir = {}, const std::function<void(const LossRecord&)>& on_step = {}) {
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
    while (step_ < cfg_.total_steps) {
      train_step();
      if (on_step) on_step(history_.back());
      if (!out_dir.empty() && cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0 &&
          step_ != cfg_.total_steps)
        write_checkpoint(out_dir / ("checkpoint_step_" + std::to_string(step_) + ".bin"), checkpoint());
    }
    if (!out_dir.empty()) {
      write_checkpoint(out_dir / "checkpoint.bin", checkpoint());
      detail::write_text_file(out_dir / "loss.csv", loss_csv(history_));
    }
  }

 private:
  void build_validation_set() {
    auto songs = corpus_.indices(Split::valid);
    if (songs.empty()) songs = train_songs_;
    const std::size_t lookahead = static_cast<std::size_t>(std::max(spec_.t_f_frames, 0));
    for (int i = 0; i < cfg_.valid_examples; ++i) {
      // Seeds depend on the corpus only, so every model sees the same set.
      const std::uint64_t seed = derive_seed(corpus_.cfg.seed, 0x7A11D, static_cast<std::uint64_t>(i));
      ExamplePair ex = draw_pair(corpus_, songs, window_, seed, mlm_ ? 0 : lookahead);
      Rng rng(derive_seed(seed, 0xA1));
      valid_.push_back(mlm_ ? make_mlm_example(ex.input_mix, ex.target, ex.target_instrument, rng, 0.0)
                            : make_stream_example(ex, spec_, rng));
    }
  }

  void apply_adam(double lr) {
    const auto& lay = model_.layout();
    double sq = 0;
    for (const auto& t : lay.tensors()) {
      if (t.frozen) continue;
      for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) sq += static_cast<double>(grads_[i]) * grads_[i];
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm))
      throw TrainingDiverged("training diverged at step " + std::to_string(step_ + 1) + " (non-finite gradient)");
    const double clip = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    ++adam_.step;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(adam_.step));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(adam_.step));
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const float step_size = static_cast<float>(lr / bc1), inv_bc2 = static_cast<float>(1.0 / bc2);
    const float eps = static_cast<float>(cfg_.adam_eps), scale = static_cast<float>(clip);
    auto& params = model_.params();
    for (const auto& t : lay.tensors()) {
      if (t.frozen) continue;
      for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
        const float g = grads_[i] * scale;
        adam_.m[i] = b1 * adam_.m[i] + (1.0f - b1) * g;
        adam_.v[i] = b2 * adam_.v[i] + (1.0f - b2) * g * g;
        params[i] -= step_size * adam_.m[i] / (std::sqrt(adam_.v[i] * inv_bc2) + eps);
      }
    }
  }

  const Corpus& corpus_;
  StreamSpec spec_;
  TrainConfig cfg_;
  bool mlm_ = false;
  TinyFormer<float> model_;
  std::size_t window_ = 0;
  std::vector<std::size_t> train_songs_;
  std::vector<AlignedSequence> valid_;
  AdamState adam_;
  std::vector<float> grads_, dlogits_;
  Workspace<float> ws_;
  int step_ = 0;
  std::vector<LossRecord> history_;
};

}  // namespace streamacc
