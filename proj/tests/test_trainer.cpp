#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "streamacc/checkpoint.hpp"
#include "streamacc/trainer.hpp"

using namespace streamacc;

namespace {

const Corpus& toy_corpus() {
  static const Corpus c = [] {
    SynthConfig s;
    s.song_frames = 80;
    s.window_frames = 32;
    s.seed = 41;
    return generate_corpus(s, 20);
  }();
  return c;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.layers = 1;
  m.model_dim = 32;
  m.input_embed_dim = 16;
  m.heads = 2;
  m.kv_heads = 1;
  m.ffn_dim = 64;
  m.max_positions = 128;
  m.seed = 3;
  return m;
}

TrainConfig tiny_train(int steps) {
  TrainConfig t;
  t.peak_lr = 3e-3;
  t.floor_lr = 3e-4;
  t.total_steps = steps;
  t.warmup_steps = steps / 10;
  t.batch_size = 4;
  t.valid_every = 0;
  t.valid_examples = 4;
  t.seed = 9;
  return t;
}

}  // namespace

TEST(LrSchedule, WarmupPeakAndFloorAreExact) {
  TrainConfig c;
  c.peak_lr = 1e-3;
  c.floor_lr = 1e-5;
  c.warmup_steps = 100;
  c.total_steps = 1000;
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_EQ(lr_at(100, c), 1e-3);
  EXPECT_EQ(lr_at(1000, c), 1e-5);
  EXPECT_DOUBLE_EQ(lr_at(50, c), 5e-4);
  EXPECT_THROW(lr_at(1001, c), std::out_of_range);
  // Closed form on ten points of the decay.
  for (int i = 1; i <= 10; ++i) {
    const int step = 100 + i * 89;
    const double u = (step - 100) / 900.0;
    const double want = 1e-5 + (1e-3 - 1e-5) * (1 + std::cos(std::numbers::pi * u)) / 2;
    EXPECT_NEAR(lr_at(step, c), want, 1e-15);
  }
  for (int s = 100; s < 1000; ++s) EXPECT_GE(lr_at(s, c), lr_at(s + 1, c));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.warmup_steps = c.total_steps;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.floor_lr = 2 * c.peak_lr;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Trainer, SmokeRunReducesLoss) {
  Trainer tr(toy_corpus(), tiny_model(), StreamSpec{2, 1}, tiny_train(400));
  tr.run();
  const auto& h = tr.history();
  ASSERT_EQ(h.size(), 400u);
  double first = 0, last = 0;
  for (int i = 0; i < 5; ++i) {
    first += h[i].train_loss;
    last += h[h.size() - 1 - i].train_loss;
  }
  EXPECT_LT(last, 0.7 * first) << "first " << first / 5 << " last " << last / 5;
  EXPECT_FALSE(std::isnan(h.back().valid_loss));
}

TEST(Trainer, FrozenCodebooksNeverMove) {
  Trainer tr(toy_corpus(), tiny_model(), StreamSpec{-2, 4}, tiny_train(10));
  const std::vector<float> before = tr.model().params();
  for (int i = 0; i < 5; ++i) tr.train_step();
  const auto& after = tr.model().params();
  std::size_t frozen = 0, moved = 0;
  for (const auto& t : tr.model().layout().tensors()) {
    bool changed = false;
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) changed |= before[i] != after[i];
    if (t.frozen) {
      ++frozen;
      EXPECT_FALSE(changed) << t.name;
    } else {
      moved += changed;
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(moved, 0u);
}

TEST(Trainer, DeterministicForFixedSeed) {
  Trainer a(toy_corpus(), tiny_model(), StreamSpec{0, 3}, tiny_train(10));
  Trainer b(toy_corpus(), tiny_model(), StreamSpec{0, 3}, tiny_train(10));
  TrainConfig other = tiny_train(10);
  other.seed = 10;
  Trainer c(toy_corpus(), tiny_model(), StreamSpec{0, 3}, other);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(a.train_step(), b.train_step());
    c.train_step();
  }
  EXPECT_EQ(a.model().params(), b.model().params());
  EXPECT_NE(a.model().params(), c.model().params());
}

TEST(Trainer, ChunkGradientIsZeroOutsideTheChunk) {
  Trainer tr(toy_corpus(), tiny_model(), StreamSpec{-3, 5}, tiny_train(10));
  for (int i = 0; i < 8; ++i) {
    const AlignedSequence s = tr.training_example(0, i);
    Workspace<float> ws;
    tr.model().forward(s, ws);
    const std::size_t row = tr.model().config().levels * tr.model().config().vocab();
    std::vector<float> d(s.length * row);
    cross_entropy<float>(s, ws.logits, tr.model().config().vocab(), d);
    const std::size_t first = s.predict_position(static_cast<std::size_t>(s.prefix));
    ASSERT_EQ(s.length, first + 5);
    for (std::size_t p = 0; p < s.length; ++p) {
      float mag = 0;
      for (std::size_t j = 0; j < row; ++j) mag += std::abs(d[p * row + j]);
      if (p < first) EXPECT_EQ(mag, 0.0f) << "p=" << p;
      else EXPECT_GT(mag, 0.0f) << "p=" << p;
    }
  }
}

TEST(Trainer, ChunkLossIgnoresInputPastVisibility) {
  // Perturbing input frames beyond prefix + t_f leaves the chunk loss unchanged.
  Trainer tr(toy_corpus(), tiny_model(), StreamSpec{2, 4}, tiny_train(10));
  const AlignedSequence s = tr.training_example(0, 0);
  AlignedSequence s2 = s;
  std::size_t changed = 0;
  for (std::size_t p = 0; p < s2.length; ++p) {
    if (!s2.input_pad[p]) continue;
    // Padded rows stay padded whatever the underlying codes were.
    for (std::size_t l = 0; l < s2.levels; ++l) s2.input_codes[p * s2.levels + l] = 5;
    ++changed;
  }
  Workspace<float> w1, w2;
  tr.model().forward(s, w1);
  tr.model().forward(s2, w2);
  const std::uint32_t V = tr.model().config().vocab();
  EXPECT_EQ(cross_entropy<float>(s, w1.logits, V), cross_entropy<float>(s2, w2.logits, V));
  for (std::size_t p = 0; p < s.length; ++p)
    if (!s.input_pad[p]) {
      EXPECT_LE(s.input_frame[p], s.prefix + 2);
    }
  EXPECT_GT(changed, 0u);
}

TEST(Trainer, MlmExampleSupervisesOneLevel) {
  const Corpus& c = toy_corpus();
  Rng rng(2);
  const ExamplePair ex = make_example(c.songs[0], 32, 5);
  for (int i = 0; i < 50; ++i) {
    const AlignedSequence s = make_mlm_example(ex.input_mix, ex.target, 1, rng, 0.0);
    const Code mask = Vocab{64}.mask();
    int level = -1;
    for (std::size_t p = 0; p < s.length; ++p)
      for (std::size_t l = 0; l < s.levels; ++l) {
        if (!s.level_mask[p * s.levels + l]) continue;
        if (level < 0) level = static_cast<int>(l);
        ASSERT_EQ(static_cast<int>(l), level);
        ASSERT_EQ(s.output_codes[p * s.levels + l], mask);
        ASSERT_EQ(s.targets[p * s.levels + l], ex.target.at(p - 1, l));
      }
    ASSERT_GE(level, 0);
    for (std::size_t t = 0; t < 32; ++t)
      for (std::size_t l = 0; l < s.levels; ++l) {
        const Code o = s.output_codes[(t + 1) * s.levels + l];
        if (static_cast<int>(l) < level) {
          ASSERT_EQ(o, ex.target.at(t, l));
        }
        if (static_cast<int>(l) > level) {
          ASSERT_EQ(o, mask);
        }
      }
  }
}

TEST(Trainer, CheckpointRoundTrip) {
  Trainer tr(toy_corpus(), tiny_model(), StreamSpec{-1, 2}, tiny_train(4));
  const auto dir = std::filesystem::temp_directory_path() / "streamacc_trainer_ck";
  std::filesystem::remove_all(dir);
  tr.run(dir);
  ASSERT_TRUE(std::filesystem::exists(dir / "loss.csv"));
  const Checkpoint ck = read_checkpoint(dir / "checkpoint.bin");
  EXPECT_EQ(ck.spec, (StreamSpec{-1, 2}));
  EXPECT_EQ(ck.step, 4u);
  EXPECT_FALSE(ck.mlm);
  EXPECT_EQ(ck.params, tr.model().params());
  EXPECT_TRUE(ck.has_optimizer);
  EXPECT_EQ(ck.adam.m, tr.checkpoint().adam.m);
  EXPECT_EQ(ck.adam.v, tr.checkpoint().adam.v);
  const TinyFormer<float> m(ck.model, ck.params);
  const AlignedSequence s = tr.training_example(0, 0);
  Workspace<float> w1, w2;
  m.forward(s, w1);
  tr.model().forward(s, w2);
  EXPECT_EQ(w1.logits, w2.logits);
  std::filesystem::remove_all(dir);
}

TEST(Trainer, DivergenceIsReported) {
  Trainer tr(toy_corpus(), tiny_model(), StreamSpec{0, 1}, tiny_train(4));
  for (const auto& t : tr.model().layout().tensors()) {
    if (t.frozen) continue;
    std::fill_n(tr.model().params().begin() + static_cast<std::ptrdiff_t>(t.offset), t.size(),
                std::numeric_limits<float>::quiet_NaN());
  }
  EXPECT_THROW(tr.train_step(), TrainingDiverged);
}

TEST(Trainer, RejectsOversizedDesignPoints) {
  EXPECT_THROW(Trainer(toy_corpus(), tiny_model(), StreamSpec{0, 32}, tiny_train(4)), std::invalid_argument);
  EXPECT_THROW(Trainer(toy_corpus(), tiny_model(), StreamSpec{-40, 1}, tiny_train(4)), std::invalid_argument);
}
