#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "streamacc/tinyformer.hpp"

using namespace streamacc;

namespace {

ModelConfig small_config(int levels = 2, std::uint32_t vocab = 5) {
  ModelConfig c;
  c.layers = 2;
  c.model_dim = 16;
  c.input_embed_dim = 8;
  c.heads = 4;
  c.kv_heads = 2;
  c.ffn_dim = 24;
  c.levels = levels;
  c.data_vocab = vocab;
  c.max_positions = 64;
  c.seed = 11;
  c.codebook_seed = 5;
  return c;
}

TokenGrid random_grid(std::size_t T, std::size_t nq, std::uint32_t V, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Code> codes(T * nq);
  for (auto& c : codes) c = static_cast<Code>(rng() % V);
  return TokenGrid(T, nq, V, std::move(codes));
}

AlignedSequence random_sequence(const ModelConfig& c, std::size_t T, int t_f, std::uint64_t seed) {
  auto in = random_grid(T, c.levels, c.data_vocab, seed);
  auto out = random_grid(T, c.levels, c.data_vocab, seed + 1);
  return align(in, out, StreamSpec{t_f, 1}, 3);
}

template <class S>
void randomize(TinyFormer<S>& m, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (const auto& t : m.layout().tensors()) {
    if (t.frozen) continue;
    S* p = m.tensor(m.layout().find(t.name));
    for (std::size_t i = 0; i < t.size(); ++i) p[i] += static_cast<S>(nd(rng));
  }
}

// Straightforward re-implementation of the forward pass, reading tensors by
// name. Independent of the workspace/cache code.
std::vector<double> oracle_logits(const TinyFormer<double>& m, const AlignedSequence& s) {
  const auto& c = m.config();
  const auto& lay = m.layout();
  const int d = c.model_dim, dd = c.input_embed_dim, H = c.heads, KV = c.kv_heads, hd = c.head_dim(), F = c.ffn_dim,
            nq = c.levels, Vs = c.vocab();
  const int n = static_cast<int>(s.length);
  auto T = [&](const std::string& name) { return m.tensor(lay.find(name)); };
  auto rms = [&](std::vector<double> v) {
    double ss = 0;
    for (double x : v) ss += x * x;
    const double r = std::sqrt(ss / v.size() + c.norm_eps);
    for (double& x : v) x /= r;
    return v;
  };
  auto matvec = [](const double* W, const std::vector<double>& x, int out) {
    std::vector<double> y(out, 0.0);
    for (int o = 0; o < out; ++o)
      for (std::size_t i = 0; i < x.size(); ++i) y[o] += W[o * x.size() + i] * x[i];
    return y;
  };
  std::vector<std::vector<double>> xs(n);
  for (int p = 0; p < n; ++p) {
    std::vector<double> ex(dd, 0.0), ey(d, 0.0);
    if (s.input_pad[p]) {
      for (int i = 0; i < dd; ++i) ex[i] = T("input.pad")[i];
    } else {
      for (int l = 0; l < nq; ++l)
        for (int i = 0; i < dd; ++i)
          ex[i] += T("input.codebook." + std::to_string(l))[s.input_codes[p * nq + l] * dd + i];
    }
    if (p == 0) {
      for (int i = 0; i < d; ++i) ey[i] = T("instrument")[s.instrument * d + i];
    } else {
      for (int l = 0; l < nq; ++l)
        for (int i = 0; i < d; ++i) ey[i] += T("output.codebook." + std::to_string(l))[s.output_codes[p * nq + l] * d + i];
    }
    auto a = rms(matvec(T("input.proj"), rms(ex), d));
    auto b = rms(ey);
    xs[p].resize(d);
    for (int i = 0; i < d; ++i) xs[p][i] = a[i] + T("fusion.gate")[i] * b[i];
  }
  auto rot = [&](std::vector<double>& v, int p) {
    for (int i = 0; i < hd / 2; ++i) {
      const double ang = p * std::pow(c.rope_base, -2.0 * i / hd);
      const double a = v[2 * i], b = v[2 * i + 1];
      v[2 * i] = a * std::cos(ang) - b * std::sin(ang);
      v[2 * i + 1] = a * std::sin(ang) + b * std::cos(ang);
    }
  };
  auto unit = [&](std::vector<double> v) {
    double ss = 0;
    for (double x : v) ss += x * x;
    for (double& x : v) x /= std::sqrt(ss + c.norm_eps);
    return v;
  };
  for (int li = 0; li < c.layers; ++li) {
    const std::string pre = "layer" + std::to_string(li) + ".";
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (int p = 0; p < n; ++p) {
      auto h = rms(xs[p]);
      q[p] = matvec(T(pre + "wq"), h, H * hd);
      k[p] = matvec(T(pre + "wk"), h, KV * hd);
      v[p] = matvec(T(pre + "wv"), h, KV * hd);
    }
    std::vector<std::vector<double>> next = xs;
    for (int p = 0; p < n; ++p) {
      std::vector<double> att(H * hd, 0.0);
      for (int h = 0; h < H; ++h) {
        const int g = h / (H / KV);
        std::vector<double> qh(q[p].begin() + h * hd, q[p].begin() + (h + 1) * hd);
        qh = unit(qh);
        rot(qh, p);
        const int jn = c.causal ? p + 1 : n;
        std::vector<double> sc(jn);
        double mx = -1e300;
        for (int j = 0; j < jn; ++j) {
          std::vector<double> kh(k[j].begin() + g * hd, k[j].begin() + (g + 1) * hd);
          kh = unit(kh);
          rot(kh, j);
          double dot = 0;
          for (int i = 0; i < hd; ++i) dot += qh[i] * kh[i];
          sc[j] = T(pre + "qk_scale")[h] * dot;
          mx = std::max(mx, sc[j]);
        }
        double sum = 0;
        for (double& x : sc) sum += (x = std::exp(x - mx));
        for (int j = 0; j < jn; ++j)
          for (int i = 0; i < hd; ++i) att[h * hd + i] += sc[j] / sum * v[j][g * hd + i];
      }
      auto o = matvec(T(pre + "wo"), att, d);
      for (int i = 0; i < d; ++i) next[p][i] += o[i];
      auto h2 = rms(next[p]);
      auto ga = matvec(T(pre + "w_gate"), h2, F);
      auto ub = matvec(T(pre + "w_up"), h2, F);
      for (int i = 0; i < F; ++i) ga[i] = ga[i] / (1 + std::exp(-ga[i])) * ub[i];
      auto f = matvec(T(pre + "w_down"), ga, d);
      for (int i = 0; i < d; ++i) next[p][i] += f[i];
    }
    xs = next;
  }
  std::vector<double> logits(n * nq * Vs);
  for (int p = 0; p < n; ++p) {
    auto h = rms(xs[p]);
    for (int l = 0; l < nq; ++l) {
      auto y = matvec(T("head." + std::to_string(l)), h, Vs);
      std::copy(y.begin(), y.end(), logits.begin() + (p * nq + l) * Vs);
    }
  }
  return logits;
}

}  // namespace

TEST(TinyFormer, ConfigValidation) {
  ModelConfig c = small_config();
  c.kv_heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(TinyFormer<float>{c}, std::invalid_argument);
}

TEST(TinyFormer, ForwardMatchesIndependentOracle) {
  for (int kv : {1, 2, 4}) {
    ModelConfig c = small_config();
    c.kv_heads = kv;
    TinyFormer<double> m(c);
    randomize(m, 3);
    auto s = random_sequence(c, 5, 1, 17);
    Workspace<double> ws;
    m.forward(s, ws);
    auto ref = oracle_logits(m, s);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(ws.logits[i], ref[i], 1e-10) << "kv=" << kv << " i=" << i;
  }
}

TEST(TinyFormer, BidirectionalMatchesOracle) {
  ModelConfig c = small_config();
  c.causal = false;
  TinyFormer<double> m(c);
  randomize(m, 4);
  auto s = random_sequence(c, 4, 0, 21);
  Workspace<double> ws;
  m.forward(s, ws);
  auto ref = oracle_logits(m, s);
  for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(ws.logits[i], ref[i], 1e-10);
}

TEST(TinyFormer, GateZeroMakesOutputIrrelevantAtInit) {
  ModelConfig c = small_config();
  TinyFormer<float> m(c);
  const auto* g = m.tensor(m.layout().gate);
  for (int i = 0; i < c.model_dim; ++i) EXPECT_EQ(g[i], 0.0f);
  auto a = random_sequence(c, 8, 2, 5);
  auto b = a;
  std::mt19937_64 rng(9);
  for (std::size_t i = c.levels; i < b.output_codes.size(); ++i) b.output_codes[i] = static_cast<Code>(rng() % c.vocab());
  Workspace<float> wa, wb;
  m.forward(a, wa);
  m.forward(b, wb);
  EXPECT_EQ(wa.x, wb.x);
  EXPECT_EQ(wa.logits, wb.logits);
}

TEST(TinyFormer, SingleLevelInputIsOneLookup) {
  ModelConfig c = small_config(1, 6);
  TinyFormer<double> m(c);
  auto s = random_sequence(c, 4, 0, 8);
  Workspace<double> ws;
  m.forward(s, ws);
  for (std::size_t p = 1; p < s.length; ++p) {
    if (s.input_pad[p]) continue;
    const double* row = m.tensor(m.layout().in_codebook[0]) + s.input_codes[p] * c.input_embed_dim;
    for (int i = 0; i < c.input_embed_dim; ++i) EXPECT_EQ(ws.ex[p * c.input_embed_dim + i], row[i]);
  }
}

TEST(TinyFormer, InputCodebooksAreUnitNormAndFrozen) {
  TinyFormer<double> m(small_config());
  for (std::size_t t : m.layout().in_codebook) {
    EXPECT_TRUE(m.layout()[t].frozen);
    const auto& info = m.layout()[t];
    for (std::size_t r = 0; r < info.rows; ++r) {
      double ss = 0;
      for (std::size_t i = 0; i < info.cols; ++i) ss += std::pow(m.tensor(t)[r * info.cols + i], 2);
      EXPECT_NEAR(ss, 1.0, 1e-12);
    }
  }
  // codebook values depend on the codebook seed only
  ModelConfig c2 = small_config();
  c2.seed = 999;
  TinyFormer<double> m2(c2);
  auto a = m.tensor_span(m.layout().in_codebook[1]);
  auto b = m2.tensor_span(m2.layout().in_codebook[1]);
  EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
}

TEST(TinyFormer, CausalityIsBitExact) {
  ModelConfig c = small_config(2, 7);
  TinyFormer<float> m(c);
  randomize(m, 6);
  auto a = random_sequence(c, 10, 1, 31);
  Workspace<float> wa;
  m.forward(a, wa);
  const std::size_t nq = c.levels, Vs = c.vocab();
  for (std::size_t t = 0; t + 1 < a.length; ++t) {
    auto b = a;
    for (std::size_t p = t + 1; p < b.length; ++p) {
      for (std::size_t l = 0; l < nq; ++l) {
        b.input_codes[p * nq + l] = static_cast<Code>((b.input_codes[p * nq + l] + 3) % c.data_vocab);
        b.output_codes[p * nq + l] = static_cast<Code>((b.output_codes[p * nq + l] + 1) % Vs);
      }
      b.input_pad[p] = 0;
    }
    Workspace<float> wb;
    m.forward(b, wb);
    for (std::size_t i = 0; i < (t + 1) * nq * Vs; ++i) ASSERT_EQ(wa.logits[i], wb.logits[i]) << "t=" << t;
    bool changed = false;
    for (std::size_t i = (t + 1) * nq * Vs; i < a.length * nq * Vs; ++i) changed |= wa.logits[i] != wb.logits[i];
    EXPECT_TRUE(changed);
  }
}

TEST(TinyFormer, IncrementalForwardMatchesFullForwardBitExact) {
  ModelConfig c = small_config(2, 7);
  TinyFormer<float> m(c);
  randomize(m, 8);
  auto s = random_sequence(c, 12, -2, 41);
  Workspace<float> full, inc;
  m.forward(s, full);
  inc.ensure(c, s.length);
  for (std::size_t p = 0; p < s.length; p += 3) m.forward(s, inc, p, std::min(p + 3, s.length));
  EXPECT_EQ(full.logits, inc.logits);
  // recomputing a suffix after editing it matches a fresh full pass
  auto s2 = s;
  s2.output_codes[7 * c.levels] = 2;
  m.forward(s2, inc, 7, s2.length);
  Workspace<float> full2;
  m.forward(s2, full2);
  EXPECT_EQ(full2.logits, inc.logits);
}

TEST(TinyFormer, GroupedQueryEqualsMultiHeadWithSharedKv) {
  ModelConfig g = small_config();
  g.kv_heads = 2;
  ModelConfig mh = g;
  mh.kv_heads = g.heads;
  TinyFormer<float> a(g), b(mh);
  randomize(a, 12);
  // copy every tensor, expanding k/v rows so head h reads kv group h / 2
  const int hd = g.head_dim(), d = g.model_dim, group = g.heads / g.kv_heads;
  for (const auto& t : b.layout().tensors()) {
    float* dst = b.tensor(b.layout().find(t.name));
    const float* src = a.tensor(a.layout().find(t.name));
    const bool kv = t.name.ends_with(".wk") || t.name.ends_with(".wv");
    if (!kv) {
      std::copy_n(src, t.size(), dst);
      continue;
    }
    for (int h = 0; h < g.heads; ++h) std::copy_n(src + (h / group) * hd * d, hd * d, dst + h * hd * d);
  }
  auto s = random_sequence(g, 9, 0, 3);
  Workspace<float> wa, wb;
  a.forward(s, wa);
  b.forward(s, wb);
  EXPECT_EQ(wa.logits, wb.logits);
}

TEST(TinyFormer, RejectsTooLongSequence) {
  ModelConfig c = small_config();
  c.max_positions = 8;
  TinyFormer<float> m(c);
  auto s = random_sequence(c, 10, 0, 1);
  Workspace<float> ws;
  EXPECT_THROW(m.forward(s, ws), std::invalid_argument);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  AlignedSequence s = align(random_grid(6, 1, 64, 1), random_grid(6, 1, 64, 2), StreamSpec{0, 1}, 0);
  const std::size_t Vs = 67;
  std::vector<float> logits(s.length * Vs, 0.0f);
  // only the data vocab is uniform when the specials are pushed to -inf-ish
  for (std::size_t p = 0; p < s.length; ++p)
    for (std::size_t v = 64; v < Vs; ++v) logits[p * Vs + v] = -1e30f;
  const double loss = cross_entropy<float>(s, logits, Vs);
  EXPECT_NEAR(loss, std::log(64.0), 1e-6);
}

TEST(CrossEntropy, LargeMarginGivesZero) {
  AlignedSequence s = align(random_grid(5, 2, 8, 1), random_grid(5, 2, 8, 2), StreamSpec{1, 1}, 0);
  const std::size_t Vs = 11;
  std::vector<double> logits(s.length * 2 * Vs, 0.0);
  for (std::size_t i = 0; i < s.length * 2; ++i) logits[i * Vs + s.targets[i]] = 60.0;
  EXPECT_LT(cross_entropy<double>(s, logits, Vs), 1e-20);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOnMaskOnly) {
  AlignedSequence s = align(random_grid(5, 2, 6, 1), random_grid(5, 2, 6, 2), StreamSpec{-1, 1}, 0);
  const std::size_t Vs = 9, nq = 2;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::vector<double> logits(s.length * nq * Vs), grad(logits.size());
  for (auto& z : logits) z = nd(rng);
  cross_entropy<double>(s, logits, Vs, grad);
  const double count = static_cast<double>(s.loss_count());
  for (std::size_t p = 0; p < s.length; ++p) {
    for (std::size_t l = 0; l < nq; ++l) {
      const double* z = &logits[(p * nq + l) * Vs];
      double sum = 0;
      for (std::size_t v = 0; v < Vs; ++v) sum += std::exp(z[v]);
      for (std::size_t v = 0; v < Vs; ++v) {
        const double g = grad[(p * nq + l) * Vs + v];
        if (!(s.loss_mask[p] && s.level_mask[p * nq + l])) {
          EXPECT_EQ(g, 0.0);
        } else {
          const double want = (std::exp(z[v]) / sum - (v == s.targets[p * nq + l] ? 1.0 : 0.0)) / count;
          EXPECT_NEAR(g, want, 1e-14);
        }
      }
    }
  }
}

TEST(CrossEntropy, EmptyMaskRejected) {
  AlignedSequence s = align(random_grid(3, 1, 6, 1), random_grid(3, 1, 6, 2), StreamSpec{0, 1}, 0);
  std::fill(s.loss_mask.begin(), s.loss_mask.end(), 0);
  std::vector<double> logits(s.length * 9, 0.0);
  EXPECT_THROW(cross_entropy<double>(s, logits, 9), std::invalid_argument);
}

namespace {

double loss_of(const TinyFormer<double>& m, const AlignedSequence& s) {
  Workspace<double> ws;
  m.forward(s, ws);
  return cross_entropy<double>(s, ws.logits, m.config().vocab());
}

// Central-difference check of every trainable tensor; returns the worst
// per-tensor relative error ||analytic - numeric|| / max(||analytic||, ||numeric||).
void gradient_check(TinyFormer<double>& m, const AlignedSequence& s) {
  Workspace<double> ws;
  m.forward(s, ws);
  std::vector<double> dlogits(ws.logits.size());
  cross_entropy<double>(s, ws.logits, m.config().vocab(), dlogits);
  std::vector<double> grads(m.layout().total(), 0.0);
  m.backward(s, ws, dlogits, grads);
  const double h = 1e-6;
  for (const auto& t : m.layout().tensors()) {
    double* p = m.tensor(m.layout().find(t.name));
    const double* g = grads.data() + t.offset;
    if (t.frozen) {
      for (std::size_t i = 0; i < t.size(); ++i) ASSERT_EQ(g[i], 0.0) << t.name;
      continue;
    }
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = p[i];
      p[i] = keep + h;
      const double lp = loss_of(m, s);
      p[i] = keep - h;
      const double lm = loss_of(m, s);
      p[i] = keep;
      const double num = (lp - lm) / (2 * h);
      diff += (num - g[i]) * (num - g[i]);
      na += g[i] * g[i];
      nn += num * num;
    }
    const double denom = std::max(std::sqrt(std::max(na, nn)), 1e-12);
    if (std::sqrt(na) < 1e-9 && std::sqrt(nn) < 1e-9) continue;  // tensor unused by this sequence
    EXPECT_LT(std::sqrt(diff) / denom, 1e-4) << t.name;
  }
}

}  // namespace

TEST(TinyFormerGradient, SixPositionCausalModel) {
  ModelConfig c = small_config(2, 5);
  TinyFormer<double> m(c);
  randomize(m, 21);
  // T = 3, N_q = 2, t_f = 1 -> 6 positions; includes padded input rows
  auto s = random_sequence(c, 3, 1, 77);
  ASSERT_EQ(s.length, 6u);
  gradient_check(m, s);
}

TEST(TinyFormerGradient, NegativeLookaheadAndPadRows) {
  ModelConfig c = small_config(2, 5);
  c.kv_heads = 4;
  TinyFormer<double> m(c);
  randomize(m, 22);
  auto s = random_sequence(c, 3, -1, 78);
  gradient_check(m, s);
}

TEST(TinyFormerGradient, BidirectionalWithDroppedInput) {
  ModelConfig c = small_config(2, 5);
  c.causal = false;
  TinyFormer<double> m(c);
  randomize(m, 23);
  auto in = random_grid(4, 2, 5, 3);
  std::vector<Code> out(8);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Code>(i % 3 == 0 ? Vocab{5}.mask() : i % 5);
  auto s = mlm_layout(in, out, 2, 5);
  for (std::size_t t = 0; t < 4; ++t) {
    s.loss_mask[t + 1] = 1;
    s.level_mask[(t + 1) * 2] = 1;
    s.targets[(t + 1) * 2] = static_cast<Code>(t % 5);
  }
  gradient_check(m, s);
  s.input_dropped = true;
  gradient_check(m, s);
}

TEST(TinyFormerGradient, GateGradientMatchesCentralDifference) {
  ModelConfig c = small_config(2, 5);
  TinyFormer<double> m(c);  // gate exactly zero, as at initialization
  auto s = random_sequence(c, 3, 1, 90);
  Workspace<double> ws;
  m.forward(s, ws);
  std::vector<double> dl(ws.logits.size()), grads(m.layout().total(), 0.0);
  cross_entropy<double>(s, ws.logits, c.vocab(), dl);
  m.backward(s, ws, dl, grads);
  double* g = m.tensor(m.layout().gate);
  for (int i = 0; i < c.model_dim; ++i) {
    const double keep = g[i], h = 1e-6;
    g[i] = keep + h;
    const double lp = loss_of(m, s);
    g[i] = keep - h;
    const double lm = loss_of(m, s);
    g[i] = keep;
    const double num = (lp - lm) / (2 * h), an = grads[m.layout()[m.layout().gate].offset + i];
    EXPECT_LE(std::abs(num - an), 1e-4 * std::max(std::abs(num), std::abs(an)) + 1e-10);
  }
}

TEST(TinyFormer, FloatAndDoubleAgree) {
  ModelConfig c = small_config();
  TinyFormer<float> f(c);
  TinyFormer<double> d = f.cast<double>();
  ASSERT_EQ(d.params().size(), f.params().size());
  auto s = random_sequence(c, 6, 0, 2);
  Workspace<float> wf;
  Workspace<double> wd;
  f.forward(s, wf);
  d.forward(s, wd);
  for (std::size_t i = 0; i < wf.logits.size(); ++i) EXPECT_NEAR(wf.logits[i], wd.logits[i], 1e-4);
}

TEST(TinyFormer, InitIsSeedDeterministic) {
  TinyFormer<float> a(small_config()), b(small_config());
  EXPECT_EQ(a.params(), b.params());
  ModelConfig c = small_config();
  c.seed = 12;
  TinyFormer<float> e(c);
  EXPECT_NE(a.params(), e.params());
}
