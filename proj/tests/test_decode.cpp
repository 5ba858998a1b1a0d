#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "streamacc/decode.hpp"

using namespace streamacc;

namespace {

ModelConfig small_config(bool causal = true) {
  ModelConfig c;
  c.layers = 2;
  c.model_dim = 16;
  c.input_embed_dim = 8;
  c.heads = 4;
  c.kv_heads = 2;
  c.ffn_dim = 24;
  c.levels = 2;
  c.data_vocab = 6;
  c.max_positions = 96;
  c.causal = causal;
  c.seed = 13;
  c.codebook_seed = 2;
  return c;
}

// Random weights so that input and history both shape the logits.
TinyFormer<float> random_model(bool causal = true, std::uint64_t seed = 5) {
  TinyFormer<float> m(small_config(causal));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.6);
  for (const auto& t : m.layout().tensors()) {
    if (t.frozen) continue;
    float* p = m.tensor(m.layout().find(t.name));
    for (std::size_t i = 0; i < t.size(); ++i) p[i] += static_cast<float>(nd(rng));
  }
  return m;
}

TokenGrid random_grid(std::size_t T, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Code> codes(T * 2);
  for (auto& c : codes) c = static_cast<Code>(rng() % 6);
  return TokenGrid(T, 2, 6, std::move(codes));
}

GenerateOptions opts(std::uint64_t seed, int top_k = 200) {
  GenerateOptions o;
  o.sample.seed = seed;
  o.sample.top_k = top_k;
  return o;
}

}  // namespace

TEST(SampleToken, MatchesTemperedSoftmax) {
  // Index 5 is a special token with a huge logit and must never be drawn.
  const std::vector<double> logits = {0.0, 1.0, 2.0, 0.5, -1.0, 50.0};
  for (double temp : {1.0, 2.0}) {
    SampleConfig cfg;
    cfg.temperature = temp;
    Rng rng(11);
    std::vector<double> counts(5, 0.0), p(5);
    double z = 0;
    for (int i = 0; i < 5; ++i) z += p[i] = std::exp(logits[i] / temp);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[sample_token(logits.data(), 5, cfg, rng)];
    double x = 0;
    for (int i = 0; i < 5; ++i) {
      const double e = n * p[i] / z;
      x += (counts[i] - e) * (counts[i] - e) / e;
    }
    EXPECT_LT(x, 18.47) << "temperature " << temp;  // 4 dof, 99.9%
  }
}

TEST(SampleToken, TopKRestrictsSupport) {
  const std::vector<float> logits = {0.0f, 1.0f, 2.0f, 0.5f, -1.0f};
  SampleConfig cfg;
  cfg.top_k = 2;
  Rng rng(3);
  int ones = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const Code c = sample_token(logits.data(), 5, cfg, rng);
    ASSERT_TRUE(c == 1 || c == 2);
    ones += c == 1;
  }
  const double p1 = 1.0 / (1.0 + std::exp(1.0));
  EXPECT_LT(std::abs(ones - n * p1), 4 * std::sqrt(n * p1 * (1 - p1)));
  cfg.top_k = 1;
  EXPECT_EQ(sample_token(logits.data(), 5, cfg, rng), 2);
  const std::vector<float> tie = {3.0f, 1.0f, 3.0f};
  EXPECT_EQ(sample_token(tie.data(), 3, cfg, rng), 0);
}

TEST(StreamGenerate, ChunkCountAndFlush) {
  const auto m = random_model();
  const TokenGrid in = random_grid(10, 1);
  for (int k : {1, 3, 4, 10}) {
    const auto r = stream_generate(m, in, 2, StreamSpec{-2, k}, opts(1));
    ASSERT_EQ(r.chunks.size(), static_cast<std::size_t>((10 + k - 1) / k)) << "k=" << k;
    std::size_t frames = 0;
    for (const auto& c : r.chunks) frames += c.frames;
    EXPECT_EQ(frames, 11u);  // T + N_q - 1 delayed frames
    EXPECT_EQ(r.chunks.back().frames, 10 - (r.chunks.size() - 1) * k + 1);
    EXPECT_EQ(r.output.frames(), 10u);
    for (Code c : r.output.codes()) EXPECT_LT(c, 6);
  }
}

TEST(StreamGenerate, ChunksOnlySeeVisibleInput) {
  // Two inputs agree on frames <= X. Every chunk with jk + t_f <= X must be
  // identical under the same seed.
  const auto m = random_model();
  const std::size_t T = 16;
  for (int t_f : {-3, 0, 2}) {
    for (int k : {1, 3, 5}) {
      for (std::size_t X : {3u, 7u, 11u}) {
        const TokenGrid a = random_grid(T, 21);
        std::vector<Code> codes(a.codes().begin(), a.codes().end());
        for (std::size_t t = X + 1; t < T; ++t)
          for (std::size_t l = 0; l < 2; ++l) codes[t * 2 + l] = static_cast<Code>((codes[t * 2 + l] + 1 + t) % 6);
        const TokenGrid b(T, 2, 6, codes);
        const auto ra = stream_generate(m, a, 1, StreamSpec{t_f, k}, opts(7));
        const auto rb = stream_generate(m, b, 1, StreamSpec{t_f, k}, opts(7));
        for (const auto& c : ra.chunks) {
          if (c.input_visible > static_cast<long long>(X)) break;
          for (std::size_t tau = c.first_frame; tau < c.first_frame + c.frames; ++tau)
            for (std::size_t l = 0; l < 2; ++l)
              ASSERT_EQ(ra.delayed.inner.at(tau, l), rb.delayed.inner.at(tau, l))
                  << "t_f=" << t_f << " k=" << k << " X=" << X << " tau=" << tau;
        }
      }
    }
  }
}

TEST(StreamGenerate, FullVisibilityMakesChunkSizeIrrelevantForGreedy) {
  const auto m = random_model();
  const std::size_t T = 12;
  const TokenGrid in = random_grid(T, 4);
  const StreamSpec one{static_cast<int>(T) - 1, 1}, all{static_cast<int>(T) - 1, static_cast<int>(T)};
  const auto a = stream_generate(m, in, 0, one, opts(1, 1));
  const auto b = stream_generate(m, in, 0, all, opts(2, 1));
  EXPECT_EQ(a.chunks.size(), T);
  EXPECT_EQ(b.chunks.size(), 1u);
  EXPECT_EQ(a.output, b.output);
}

TEST(StreamGenerate, SeededReproducibility) {
  const auto m = random_model();
  const TokenGrid in = random_grid(20, 8);
  const auto a = stream_generate(m, in, 0, StreamSpec{-1, 4}, opts(3));
  const auto b = stream_generate(m, in, 0, StreamSpec{-1, 4}, opts(3));
  const auto c = stream_generate(m, in, 0, StreamSpec{-1, 4}, opts(4));
  EXPECT_EQ(a.output, b.output);
  EXPECT_NE(a.output, c.output);
}

TEST(StreamGenerate, PromptFramesAreKept) {
  const auto m = random_model();
  const TokenGrid in = random_grid(10, 9), prompt = random_grid(10, 10);
  GenerateOptions o = opts(1);
  o.prompt = &prompt;
  o.prompt_frames = 4;
  const auto r = stream_generate(m, in, 0, StreamSpec{0, 2}, o);
  EXPECT_EQ(slice_frames(r.output, 0, 4), slice_frames(prompt, 0, 4));
  o.prompt_frames = 11;
  EXPECT_THROW(stream_generate(m, in, 0, StreamSpec{0, 2}, o), std::invalid_argument);
}

TEST(StreamGenerate, RejectsBidirectionalModel) {
  const auto m = random_model(false);
  EXPECT_THROW(stream_generate(m, random_grid(5, 1), 0, StreamSpec{0, 1}, opts(1)), std::invalid_argument);
}

TEST(MlmSchedule, StrictlyDecreasingToZero) {
  for (std::size_t M : {1u, 2u, 7u, 50u, 128u, 400u})
    for (std::size_t S : {1u, 4u, 32u, 128u, 1000u}) {
      const auto n = mlm_mask_schedule(M, S);
      ASSERT_EQ(n.size(), std::min(M, S));
      std::size_t prev = M;
      for (std::size_t v : n) {
        ASSERT_LT(v, prev) << "M=" << M << " S=" << S;
        prev = v;
      }
      ASSERT_EQ(n.back(), 0u);
    }
  EXPECT_TRUE(mlm_mask_schedule(0, 5).empty());
}

TEST(MlmSchedule, TemperatureAnnealsToZero) {
  EXPECT_EQ(mlm_temperature(0, 10, 8.0), 8.0);
  EXPECT_EQ(mlm_temperature(9, 10, 8.0), 0.0);
  for (std::size_t i = 1; i < 10; ++i) EXPECT_LT(mlm_temperature(i, 10, 8.0), mlm_temperature(i - 1, 10, 8.0));
}

TEST(Guidance, UnitScaleIsBitExact) {
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> u(-30.f, 30.f);
  std::vector<float> c(257), un(257), out(257);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = u(rng), un[i] = u(rng);
  guide_logits(c.data(), un.data(), 1.0, out.data(), c.size());
  EXPECT_EQ(out, c);
  guide_logits(c.data(), un.data(), 2.0, out.data(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(out[i], un[i] + 2 * (c[i] - un[i]), 1e-4);
}

TEST(MlmGenerate, FillsEveryFrameAndKeepsPrompt) {
  const auto m = random_model(false);
  const TokenGrid in = random_grid(12, 3), prompt = random_grid(12, 4);
  MlmDecodeConfig cfg;
  cfg.temperatures = {4.0, 2.0};
  cfg.steps = {6, 3};
  const auto r = mlm_generate(m, in, 1, cfg, &prompt, 3);
  for (Code c : r.output.codes()) EXPECT_LT(c, 6);
  EXPECT_EQ(slice_frames(r.output, 0, 3), slice_frames(prompt, 0, 3));
  ASSERT_EQ(r.trace.size(), 9u);
  EXPECT_EQ(r.trace[5].masked_after, 0u);
  EXPECT_EQ(r.trace[5].temperature, 0.0);
  EXPECT_EQ(r.trace[0].masked_before, 9u);
  const auto again = mlm_generate(m, in, 1, cfg, &prompt, 3);
  EXPECT_EQ(again.output, r.output);
  EXPECT_THROW(mlm_generate(random_model(), in, 1, cfg), std::invalid_argument);
  cfg.steps = {6};
  EXPECT_THROW(mlm_generate(m, in, 1, cfg), std::invalid_argument);
}
