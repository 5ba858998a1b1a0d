#pragma once

// Small decoder-only transformer with a hand-written backward pass.
//
// Embedding and fusion at each position p:
//   e^x = sum_l Emb^dac_l[x_l]        (frozen tables; learned PAD vector when
//                                       the input row is padded; zero when the
//                                       whole input is dropped)
//   e^y = sum_l Emb^out_l[y_l]        (instrument embedding on row 0)
//   z   = RMS(W RMS(e^x)) + g * RMS(e^y)
//
// Each layer: pre-RMSNorm, grouped-query attention with L2-normalized q/k,
// RoPE, a learnable per-head similarity scale, then pre-RMSNorm SwiGLU.
// Final RMSNorm and one linear head per level over the model vocabulary.
// All norms are gain-free.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamacc/common.hpp"
#include "streamacc/kernels.hpp"
#include "streamacc/streamalign.hpp"
#include "streamacc/synthdata.hpp"

namespace streamacc {

struct ModelConfig {
  // Full scale is 16 layers, 16 heads, width 1024; these are desk-scale.
  int layers = 2;
  int model_dim = 64;
  int input_embed_dim = 32;
  int heads = 4;
  int kv_heads = 2;
  int ffn_dim = 176;
  int levels = 4;
  std::uint32_t data_vocab = 64;
  int num_instruments = kNumInstruments;
  int max_positions = 2048;
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  bool causal = true;
  std::uint64_t seed = 1;           // learned parameters
  std::uint64_t codebook_seed = 7;  // frozen input codebooks (the data seed)

  int head_dim() const { return model_dim / heads; }
  std::uint32_t vocab() const { return Vocab{data_vocab}.model_size(); }

  void validate() const {
    auto req = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("ModelConfig: ") + what);
    };
    req(layers >= 1, "layers must be >= 1");
    req(model_dim >= 2 && input_embed_dim >= 1 && ffn_dim >= 1, "dimensions must be positive");
    req(heads >= 1 && kv_heads >= 1 && heads % kv_heads == 0, "kv_heads must divide heads");
    req(model_dim % heads == 0, "heads must divide model_dim");
    req(head_dim() % 2 == 0, "head_dim must be even for RoPE");
    req(levels >= 1, "levels must be >= 1");
    req(data_vocab >= 2, "data_vocab must be >= 2");
    req(num_instruments >= 1, "num_instruments must be >= 1");
    req(max_positions >= 2, "max_positions must be >= 2");
    req(rope_base > 1.0 && norm_eps > 0.0, "rope_base must be > 1 and norm_eps > 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::size_t offset = 0;
  bool frozen = false;
  std::size_t size() const { return rows * cols; }
};

// Named slots inside one flat parameter vector.
class ParamLayout {
 public:
  struct Layer {
    std::size_t wq, wk, wv, wo, qk_scale, w_gate, w_up, w_down;
  };

  ParamLayout() = default;
  explicit ParamLayout(const ModelConfig& c) {
    c.validate();
    const std::size_t d = c.model_dim, dd = c.input_embed_dim, hd = c.head_dim(), V = c.data_vocab,
                      Vs = c.vocab(), F = c.ffn_dim;
    for (int l = 0; l < c.levels; ++l) in_codebook.push_back(add("input.codebook." + std::to_string(l), V, dd, true));
    input_pad = add("input.pad", 1, dd);
    input_proj = add("input.proj", d, dd);
    gate = add("fusion.gate", 1, d);
    for (int l = 0; l < c.levels; ++l) out_codebook.push_back(add("output.codebook." + std::to_string(l), Vs, d));
    instrument = add("instrument", c.num_instruments, d);
    for (int i = 0; i < c.layers; ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      Layer L{};
      L.wq = add(p + "wq", c.heads * hd, d);
      L.wk = add(p + "wk", c.kv_heads * hd, d);
      L.wv = add(p + "wv", c.kv_heads * hd, d);
      L.wo = add(p + "wo", d, c.heads * hd);
      L.qk_scale = add(p + "qk_scale", 1, c.heads);
      L.w_gate = add(p + "w_gate", F, d);
      L.w_up = add(p + "w_up", F, d);
      L.w_down = add(p + "w_down", d, F);
      layers.push_back(L);
    }
    for (int l = 0; l < c.levels; ++l) head.push_back(add("head." + std::to_string(l), Vs, d));
  }

  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const TensorInfo& operator[](std::size_t i) const { return tensors_[i]; }
  std::size_t total() const { return total_; }
  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      if (tensors_[i].name == name) return i;
    throw std::out_of_range("no tensor named " + name);
  }

  std::vector<std::size_t> in_codebook, out_codebook, head;
  std::size_t input_pad = 0, input_proj = 0, gate = 0, instrument = 0;
  std::vector<Layer> layers;

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols, bool frozen = false) {
    tensors_.push_back({std::move(name), rows, cols, total_, frozen});
    total_ += rows * cols;
    return tensors_.size() - 1;
  }

  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

// Activations kept for backward plus the per-layer K/V cache used by
// incremental decoding. Rows at and after the first recomputed position are
// overwritten by the next forward call.
template <class S>
struct Workspace {
  struct LayerCache {
    std::vector<S> x_in, xn1, r1;
    std::vector<S> q, qhat, rq, qrot;
    std::vector<S> k, khat, rk, krot, v;
    std::vector<S> probs;  // heads x cap x cap
    std::vector<S> attn, x_mid, xn2, r2;
    std::vector<S> ga, ub, act;
  };

  std::size_t capacity = 0;
  std::vector<S> ex, exn, rx, u, un, ru, ey, eyn, ry, x, fn, rf, logits;
  std::vector<LayerCache> layer;

  void ensure(const ModelConfig& c, std::size_t len) {
    if (len <= capacity && layer.size() == static_cast<std::size_t>(c.layers)) return;
    const std::size_t L = len, d = c.model_dim, dd = c.input_embed_dim, hd = c.head_dim(), H = c.heads,
                      KV = c.kv_heads, F = c.ffn_dim;
    capacity = L;
    ex.assign(L * dd, 0);
    exn.assign(L * dd, 0);
    rx.assign(L, 0);
    u.assign(L * d, 0);
    un.assign(L * d, 0);
    ru.assign(L, 0);
    ey.assign(L * d, 0);
    eyn.assign(L * d, 0);
    ry.assign(L, 0);
    x.assign(L * d, 0);
    fn.assign(L * d, 0);
    rf.assign(L, 0);
    logits.assign(L * c.levels * c.vocab(), 0);
    layer.assign(c.layers, {});
    for (auto& lc : layer) {
      lc.x_in.assign(L * d, 0);
      lc.xn1.assign(L * d, 0);
      lc.r1.assign(L, 0);
      lc.q.assign(L * H * hd, 0);
      lc.qhat.assign(L * H * hd, 0);
      lc.rq.assign(L * H, 0);
      lc.qrot.assign(L * H * hd, 0);
      lc.k.assign(L * KV * hd, 0);
      lc.khat.assign(L * KV * hd, 0);
      lc.rk.assign(L * KV, 0);
      lc.krot.assign(L * KV * hd, 0);
      lc.v.assign(L * KV * hd, 0);
      lc.probs.assign(H * L * L, 0);
      lc.attn.assign(L * H * hd, 0);
      lc.x_mid.assign(L * d, 0);
      lc.xn2.assign(L * d, 0);
      lc.r2.assign(L, 0);
      lc.ga.assign(L * F, 0);
      lc.ub.assign(L * F, 0);
      lc.act.assign(L * F, 0);
    }
  }
};

template <class S>
class TinyFormer {
 public:
  TinyFormer() = default;

  explicit TinyFormer(const ModelConfig& cfg) : cfg_(cfg), layout_(cfg) {
    build_rope();
    std::vector<double> init = initial_values(cfg_, layout_);
    params_.assign(init.begin(), init.end());
  }

  // Same config and parameters at another precision.
  template <class T>
  TinyFormer<T> cast() const {
    TinyFormer<T> out(cfg_, std::vector<T>(params_.begin(), params_.end()));
    return out;
  }

  TinyFormer(const ModelConfig& cfg, std::vector<S> params) : cfg_(cfg), layout_(cfg), params_(std::move(params)) {
    if (params_.size() != layout_.total())
      throw std::invalid_argument("TinyFormer: parameter count " + std::to_string(params_.size()) + " != " +
                                  std::to_string(layout_.total()));
    build_rope();
  }

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<S>& params() { return params_; }
  const std::vector<S>& params() const { return params_; }
  S* tensor(std::size_t i) { return params_.data() + layout_[i].offset; }
  const S* tensor(std::size_t i) const { return params_.data() + layout_[i].offset; }
  std::span<const S> tensor_span(std::size_t i) const { return {tensor(i), layout_[i].size()}; }

  // Logits of position p, level l, inside a workspace filled by forward().
  const S* logits(const Workspace<S>& ws, std::size_t p, std::size_t l) const {
    return ws.logits.data() + (p * cfg_.levels + l) * cfg_.vocab();
  }

  void check_sequence(const AlignedSequence& seq) const {
    if (seq.levels != static_cast<std::size_t>(cfg_.levels))
      throw std::invalid_argument("model has " + std::to_string(cfg_.levels) + " levels, sequence has " +
                                  std::to_string(seq.levels));
    if (seq.data_vocab != cfg_.data_vocab) throw std::invalid_argument("sequence vocab does not match model");
    if (seq.length > static_cast<std::size_t>(cfg_.max_positions))
      throw std::invalid_argument("sequence length " + std::to_string(seq.length) + " exceeds max_positions " +
                                  std::to_string(cfg_.max_positions));
    if (seq.instrument < 0 || seq.instrument >= cfg_.num_instruments)
      throw std::invalid_argument("instrument id out of range");
  }

  void forward(const AlignedSequence& seq, Workspace<S>& ws) const { forward(seq, ws, 0, seq.length); }

  // Recomputes positions [p0, p1). With the causal mask, positions before p0
  // are read from the workspace cache and must already hold the results of a
  // forward pass over the same prefix.
  void forward(const AlignedSequence& seq, Workspace<S>& ws, std::size_t p0, std::size_t p1) const {
    check_sequence(seq);
    if (p0 > p1 || p1 > seq.length) throw std::invalid_argument("forward: bad position range");
    if (!cfg_.causal && (p0 != 0 || p1 != seq.length))
      throw std::invalid_argument("forward: bidirectional model needs the whole sequence");
    if (p0 > 0 && ws.capacity < seq.length) throw std::invalid_argument("forward: cache smaller than sequence");
    ws.ensure(cfg_, seq.length);
    if (p0 == p1) return;

    const std::size_t d = cfg_.model_dim, dd = cfg_.input_embed_dim, hd = cfg_.head_dim(), H = cfg_.heads,
                      KV = cfg_.kv_heads, F = cfg_.ffn_dim, nq = cfg_.levels, Vs = cfg_.vocab(),
                      group = H / KV, cap = ws.capacity;
    const S eps = static_cast<S>(cfg_.norm_eps);
    const auto& lay = layout_;

    for (std::size_t p = p0; p < p1; ++p) embed_position(seq, ws, p);
    kernels::linear_rows(ws.exn.data(), tensor(lay.input_proj), ws.u.data(), dd, d, p0, p1);
    const S* g = tensor(lay.gate);
    for (std::size_t p = p0; p < p1; ++p) {
      ws.ru[p] = kernels::rms_norm(&ws.u[p * d], &ws.un[p * d], d, eps);
      ws.ry[p] = kernels::rms_norm(&ws.ey[p * d], &ws.eyn[p * d], d, eps);
      for (std::size_t i = 0; i < d; ++i) ws.x[p * d + i] = ws.un[p * d + i] + g[i] * ws.eyn[p * d + i];
    }

    std::vector<S> scores(seq.length);
    for (std::size_t li = 0; li < lay.layers.size(); ++li) {
      const auto& L = lay.layers[li];
      auto& lc = ws.layer[li];
      for (std::size_t p = p0; p < p1; ++p) {
        std::copy_n(&ws.x[p * d], d, &lc.x_in[p * d]);
        lc.r1[p] = kernels::rms_norm(&ws.x[p * d], &lc.xn1[p * d], d, eps);
      }
      kernels::linear_rows(lc.xn1.data(), tensor(L.wq), lc.q.data(), d, H * hd, p0, p1);
      kernels::linear_rows(lc.xn1.data(), tensor(L.wk), lc.k.data(), d, KV * hd, p0, p1);
      kernels::linear_rows(lc.xn1.data(), tensor(L.wv), lc.v.data(), d, KV * hd, p0, p1);
      for (std::size_t p = p0; p < p1; ++p) {
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t o = (p * H + h) * hd;
          lc.rq[p * H + h] = kernels::l2_normalize(&lc.q[o], &lc.qhat[o], hd, eps);
          std::copy_n(&lc.qhat[o], hd, &lc.qrot[o]);
          rope(&lc.qrot[o], p, false);
        }
        for (std::size_t h = 0; h < KV; ++h) {
          const std::size_t o = (p * KV + h) * hd;
          lc.rk[p * KV + h] = kernels::l2_normalize(&lc.k[o], &lc.khat[o], hd, eps);
          std::copy_n(&lc.khat[o], hd, &lc.krot[o]);
          rope(&lc.krot[o], p, false);
        }
      }
      const S* scale = tensor(L.qk_scale);
      for (std::size_t p = p0; p < p1; ++p) {
        const std::size_t jn = cfg_.causal ? p + 1 : seq.length;
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t kh = h / group;
          const S* qv = &lc.qrot[(p * H + h) * hd];
          S mx = -std::numeric_limits<S>::infinity();
          for (std::size_t j = 0; j < jn; ++j) {
            scores[j] = scale[h] * kernels::dot(qv, &lc.krot[(j * KV + kh) * hd], hd);
            mx = std::max(mx, scores[j]);
          }
          S sum = 0;
          for (std::size_t j = 0; j < jn; ++j) {
            scores[j] = std::exp(scores[j] - mx);
            sum += scores[j];
          }
          S* prow = &lc.probs[(h * cap + p) * cap];
          S* out = &lc.attn[(p * H + h) * hd];
          std::fill_n(out, hd, S(0));
          for (std::size_t j = 0; j < jn; ++j) {
            prow[j] = scores[j] / sum;
            kernels::axpy(prow[j], &lc.v[(j * KV + kh) * hd], out, hd);
          }
        }
      }
      std::vector<S> tmp(std::max(d, F) * (p1 - p0));
      kernels::linear_rows(lc.attn.data() + p0 * H * hd, tensor(L.wo), tmp.data(), H * hd, d, 0, p1 - p0);
      for (std::size_t p = p0; p < p1; ++p) {
        for (std::size_t i = 0; i < d; ++i) ws.x[p * d + i] += tmp[(p - p0) * d + i];
        std::copy_n(&ws.x[p * d], d, &lc.x_mid[p * d]);
        lc.r2[p] = kernels::rms_norm(&ws.x[p * d], &lc.xn2[p * d], d, eps);
      }
      kernels::linear_rows(lc.xn2.data(), tensor(L.w_gate), lc.ga.data(), d, F, p0, p1);
      kernels::linear_rows(lc.xn2.data(), tensor(L.w_up), lc.ub.data(), d, F, p0, p1);
      for (std::size_t i = p0 * F; i < p1 * F; ++i) lc.act[i] = silu(lc.ga[i]) * lc.ub[i];
      kernels::linear_rows(lc.act.data() + p0 * F, tensor(L.w_down), tmp.data(), F, d, 0, p1 - p0);
      for (std::size_t p = p0; p < p1; ++p)
        for (std::size_t i = 0; i < d; ++i) ws.x[p * d + i] += tmp[(p - p0) * d + i];
    }

    for (std::size_t p = p0; p < p1; ++p) {
      ws.rf[p] = kernels::rms_norm(&ws.x[p * d], &ws.fn[p * d], d, eps);
      for (std::size_t l = 0; l < nq; ++l) {
        const S* W = tensor(lay.head[l]);
        S* out = &ws.logits[(p * nq + l) * Vs];
        for (std::size_t o = 0; o < Vs; ++o) out[o] = kernels::dot(W + o * d, &ws.fn[p * d], d);
      }
    }
  }

  // Accumulates d(loss)/d(params) into grads, given d(loss)/d(logits) laid out
  // like ws.logits. Requires a full forward over the same sequence. Frozen
  // tensors never receive gradient.
  void backward(const AlignedSequence& seq, const Workspace<S>& ws, std::span<const S> dlogits,
                std::span<S> grads) const {
    const std::size_t d = cfg_.model_dim, dd = cfg_.input_embed_dim, hd = cfg_.head_dim(), H = cfg_.heads,
                      KV = cfg_.kv_heads, F = cfg_.ffn_dim, nq = cfg_.levels, Vs = cfg_.vocab(),
                      group = H / KV, cap = ws.capacity, n = seq.length;
    if (grads.size() != layout_.total()) throw std::invalid_argument("backward: gradient buffer size mismatch");
    if (dlogits.size() < n * nq * Vs) throw std::invalid_argument("backward: dlogits too small");
    if (cap < n) throw std::invalid_argument("backward: workspace does not hold this sequence");
    const auto& lay = layout_;
    auto grad = [&](std::size_t t) { return grads.data() + lay[t].offset; };

    std::vector<S> dfn(n * d, 0), dx(n * d, 0);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t l = 0; l < nq; ++l) {
        const S* dl = &dlogits[(p * nq + l) * Vs];
        const S* W = tensor(lay.head[l]);
        S* dW = grad(lay.head[l]);
        for (std::size_t o = 0; o < Vs; ++o) {
          if (dl[o] == S(0)) continue;
          kernels::axpy(dl[o], W + o * d, &dfn[p * d], d);
          kernels::axpy(dl[o], &ws.fn[p * d], dW + o * d, d);
        }
      }
      kernels::rms_norm_backward(&dfn[p * d], &ws.fn[p * d], ws.rf[p], &dx[p * d], d);
    }

    std::vector<S> dact(n * F), dga(n * F), dub(n * F), dxn(n * d), dattn(n * H * hd), dqrot(n * H * hd),
        dkrot(n * KV * hd), dv(n * KV * hd), dq(n * H * hd), dk(n * KV * hd), dp(n);
    for (std::size_t li = lay.layers.size(); li-- > 0;) {
      const auto& L = lay.layers[li];
      const auto& lc = ws.layer[li];

      // SwiGLU block; dx is the gradient wrt the block output (residual).
      std::fill(dact.begin(), dact.end(), S(0));
      kernels::linear_backward_input(dx.data(), tensor(L.w_down), dact.data(), F, d, n);
      kernels::linear_backward_weight(dx.data(), lc.act.data(), grad(L.w_down), F, d, n);
      for (std::size_t i = 0; i < n * F; ++i) {
        const S a = lc.ga[i], sg = kernels::sigmoid(a), si = a * sg;
        dub[i] = dact[i] * si;
        dga[i] = dact[i] * lc.ub[i] * (sg + si * (S(1) - sg));
      }
      std::fill(dxn.begin(), dxn.end(), S(0));
      kernels::linear_backward_input(dga.data(), tensor(L.w_gate), dxn.data(), d, F, n);
      kernels::linear_backward_input(dub.data(), tensor(L.w_up), dxn.data(), d, F, n);
      kernels::linear_backward_weight(dga.data(), lc.xn2.data(), grad(L.w_gate), d, F, n);
      kernels::linear_backward_weight(dub.data(), lc.xn2.data(), grad(L.w_up), d, F, n);
      for (std::size_t p = 0; p < n; ++p)
        kernels::rms_norm_backward(&dxn[p * d], &lc.xn2[p * d], lc.r2[p], &dx[p * d], d);

      // Attention block.
      std::fill(dattn.begin(), dattn.end(), S(0));
      kernels::linear_backward_input(dx.data(), tensor(L.wo), dattn.data(), H * hd, d, n);
      kernels::linear_backward_weight(dx.data(), lc.attn.data(), grad(L.wo), H * hd, d, n);
      std::fill(dqrot.begin(), dqrot.end(), S(0));
      std::fill(dkrot.begin(), dkrot.end(), S(0));
      std::fill(dv.begin(), dv.end(), S(0));
      const S* scale = tensor(L.qk_scale);
      S* dscale = grad(L.qk_scale);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t kh = h / group;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t jn = cfg_.causal ? i + 1 : n;
          const S* prow = &lc.probs[(h * cap + i) * cap];
          const S* da = &dattn[(i * H + h) * hd];
          S dot_pd = 0;
          for (std::size_t j = 0; j < jn; ++j) {
            dp[j] = kernels::dot(da, &lc.v[(j * KV + kh) * hd], hd);
            dot_pd += prow[j] * dp[j];
            kernels::axpy(prow[j], da, &dv[(j * KV + kh) * hd], hd);
          }
          const S* qv = &lc.qrot[(i * H + h) * hd];
          S* dqv = &dqrot[(i * H + h) * hd];
          for (std::size_t j = 0; j < jn; ++j) {
            const S ds = prow[j] * (dp[j] - dot_pd);
            if (ds == S(0)) continue;
            const S* kv = &lc.krot[(j * KV + kh) * hd];
            dscale[h] += ds * kernels::dot(qv, kv, hd);
            kernels::axpy(ds * scale[h], kv, dqv, hd);
            kernels::axpy(ds * scale[h], qv, &dkrot[(j * KV + kh) * hd], hd);
          }
        }
      }
      std::fill(dq.begin(), dq.end(), S(0));
      std::fill(dk.begin(), dk.end(), S(0));
      for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t h = 0; h < H; ++h) {
          const std::size_t o = (p * H + h) * hd;
          rope(&dqrot[o], p, true);
          kernels::l2_normalize_backward(&dqrot[o], &lc.qhat[o], lc.rq[p * H + h], &dq[o], hd);
        }
        for (std::size_t h = 0; h < KV; ++h) {
          const std::size_t o = (p * KV + h) * hd;
          rope(&dkrot[o], p, true);
          kernels::l2_normalize_backward(&dkrot[o], &lc.khat[o], lc.rk[p * KV + h], &dk[o], hd);
        }
      }
      std::fill(dxn.begin(), dxn.end(), S(0));
      kernels::linear_backward_input(dq.data(), tensor(L.wq), dxn.data(), d, H * hd, n);
      kernels::linear_backward_input(dk.data(), tensor(L.wk), dxn.data(), d, KV * hd, n);
      kernels::linear_backward_input(dv.data(), tensor(L.wv), dxn.data(), d, KV * hd, n);
      kernels::linear_backward_weight(dq.data(), lc.xn1.data(), grad(L.wq), d, H * hd, n);
      kernels::linear_backward_weight(dk.data(), lc.xn1.data(), grad(L.wk), d, KV * hd, n);
      kernels::linear_backward_weight(dv.data(), lc.xn1.data(), grad(L.wv), d, KV * hd, n);
      for (std::size_t p = 0; p < n; ++p)
        kernels::rms_norm_backward(&dxn[p * d], &lc.xn1[p * d], lc.r1[p], &dx[p * d], d);
    }

    // Fusion: dx now holds d(loss)/dz.
    const S* g = tensor(lay.gate);
    S* dg = grad(lay.gate);
    std::vector<S> deyn(d), dey(d), du(n * d, 0), dexn(n * dd, 0), dex(dd);
    for (std::size_t p = 0; p < n; ++p) {
      const S* dz = &dx[p * d];
      for (std::size_t i = 0; i < d; ++i) {
        dg[i] += dz[i] * ws.eyn[p * d + i];
        deyn[i] = dz[i] * g[i];
      }
      kernels::rms_norm_backward(dz, &ws.un[p * d], ws.ru[p], &du[p * d], d);
      std::fill(dey.begin(), dey.end(), S(0));
      kernels::rms_norm_backward(deyn.data(), &ws.eyn[p * d], ws.ry[p], dey.data(), d);
      if (p == 0) {
        kernels::axpy(S(1), dey.data(), grad(lay.instrument) + static_cast<std::size_t>(seq.instrument) * d, d);
      } else {
        for (std::size_t l = 0; l < nq; ++l)
          kernels::axpy(S(1), dey.data(), grad(lay.out_codebook[l]) + seq.output_codes[p * nq + l] * d, d);
      }
    }
    kernels::linear_backward_input(du.data(), tensor(lay.input_proj), dexn.data(), dd, d, n);
    kernels::linear_backward_weight(du.data(), ws.exn.data(), grad(lay.input_proj), dd, d, n);
    if (!seq.input_dropped) {
      for (std::size_t p = 0; p < n; ++p) {
        if (!seq.input_pad[p]) continue;  // codebook rows are frozen
        std::fill(dex.begin(), dex.end(), S(0));
        kernels::rms_norm_backward(&dexn[p * dd], &ws.exn[p * dd], ws.rx[p], dex.data(), dd);
        kernels::axpy(S(1), dex.data(), grad(lay.input_pad), dd);
      }
    }
  }

  // Default initial parameters, always drawn in double so every precision
  // starts from the same values.
  static std::vector<double> initial_values(const ModelConfig& c, const ParamLayout& lay) {
    std::vector<double> v(lay.total(), 0.0);
    auto fill_normal = [&](std::size_t t, double stddev, std::uint64_t seed) {
      Rng rng(seed);
      std::normal_distribution<double> nd(0.0, stddev);
      double* p = v.data() + lay[t].offset;
      for (std::size_t i = 0; i < lay[t].size(); ++i) p[i] = nd(rng);
    };
    const double d = c.model_dim, dd = c.input_embed_dim, F = c.ffn_dim;
    for (std::size_t l = 0; l < lay.in_codebook.size(); ++l) {
      const std::size_t t = lay.in_codebook[l];
      fill_normal(t, 1.0, derive_seed(c.codebook_seed, 0xDAC, l));
      double* p = v.data() + lay[t].offset;
      for (std::size_t r = 0; r < lay[t].rows; ++r) {
        double s = 0;
        for (std::size_t i = 0; i < lay[t].cols; ++i) s += p[r * lay[t].cols + i] * p[r * lay[t].cols + i];
        s = std::sqrt(s);
        for (std::size_t i = 0; i < lay[t].cols; ++i) p[r * lay[t].cols + i] /= s;
      }
    }
    auto seed_of = [&](std::size_t t) { return derive_seed(c.seed, 0x1417, t); };
    fill_normal(lay.input_pad, 1.0 / std::sqrt(dd), seed_of(lay.input_pad));
    fill_normal(lay.input_proj, 1.0 / std::sqrt(dd), seed_of(lay.input_proj));
    // fusion.gate stays zero
    for (std::size_t t : lay.out_codebook) fill_normal(t, 1.0, seed_of(t));
    fill_normal(lay.instrument, 1.0, seed_of(lay.instrument));
    const double resid = 1.0 / std::sqrt(2.0 * c.layers);
    for (const auto& L : lay.layers) {
      fill_normal(L.wq, 1.0 / std::sqrt(d), seed_of(L.wq));
      fill_normal(L.wk, 1.0 / std::sqrt(d), seed_of(L.wk));
      fill_normal(L.wv, 1.0 / std::sqrt(d), seed_of(L.wv));
      fill_normal(L.wo, resid / std::sqrt(d), seed_of(L.wo));
      double* sc = v.data() + lay[L.qk_scale].offset;
      for (std::size_t h = 0; h < lay[L.qk_scale].size(); ++h) sc[h] = qk_scale_init(c.head_dim());
      fill_normal(L.w_gate, 1.0 / std::sqrt(d), seed_of(L.w_gate));
      fill_normal(L.w_up, 1.0 / std::sqrt(d), seed_of(L.w_up));
      fill_normal(L.w_down, resid / std::sqrt(F), seed_of(L.w_down));
    }
    for (std::size_t t : lay.head) fill_normal(t, 1.0 / std::sqrt(d), seed_of(t));
    return v;
  }

  // Initial similarity scale for unit-norm q/k: the dimension-dependent
  // factor is taken as sqrt(head_dim), learned per head afterwards.
  static double qk_scale_init(int head_dim) { return std::sqrt(static_cast<double>(head_dim)); }

 private:
  static S silu(S a) { return a * kernels::sigmoid(a); }

  void build_rope() {
    const std::size_t half = cfg_.head_dim() / 2;
    rope_cos_.resize(static_cast<std::size_t>(cfg_.max_positions) * half);
    rope_sin_.resize(rope_cos_.size());
    for (std::size_t p = 0; p < static_cast<std::size_t>(cfg_.max_positions); ++p)
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(cfg_.rope_base, -2.0 * static_cast<double>(i) / cfg_.head_dim());
        const double ang = static_cast<double>(p) * freq;
        rope_cos_[p * half + i] = static_cast<S>(std::cos(ang));
        rope_sin_[p * half + i] = static_cast<S>(std::sin(ang));
      }
  }

  // Rotates consecutive pairs; the inverse is the transpose (used by backward).
  void rope(S* v, std::size_t p, bool inverse) const {
    const std::size_t half = cfg_.head_dim() / 2;
    const S* cs = &rope_cos_[p * half];
    const S* sn = &rope_sin_[p * half];
    for (std::size_t i = 0; i < half; ++i) {
      const S a = v[2 * i], b = v[2 * i + 1], s = inverse ? -sn[i] : sn[i];
      v[2 * i] = a * cs[i] - b * s;
      v[2 * i + 1] = a * s + b * cs[i];
    }
  }

  void embed_position(const AlignedSequence& seq, Workspace<S>& ws, std::size_t p) const {
    const std::size_t d = cfg_.model_dim, dd = cfg_.input_embed_dim, nq = cfg_.levels;
    const S eps = static_cast<S>(cfg_.norm_eps);
    S* ex = &ws.ex[p * dd];
    std::fill_n(ex, dd, S(0));
    if (!seq.input_dropped) {
      if (seq.input_pad[p]) {
        std::copy_n(tensor(layout_.input_pad), dd, ex);
      } else {
        for (std::size_t l = 0; l < nq; ++l) {
          const Code c = seq.input_codes[p * nq + l];
          if (c >= cfg_.data_vocab) throw std::invalid_argument("input code outside data vocab");
          kernels::axpy(S(1), tensor(layout_.in_codebook[l]) + c * dd, ex, dd);
        }
      }
    }
    ws.rx[p] = kernels::rms_norm(ex, &ws.exn[p * dd], dd, eps);

    S* ey = &ws.ey[p * d];
    std::fill_n(ey, d, S(0));
    if (p == 0) {
      std::copy_n(tensor(layout_.instrument) + static_cast<std::size_t>(seq.instrument) * d, d, ey);
    } else {
      for (std::size_t l = 0; l < nq; ++l) {
        const Code c = seq.output_codes[p * nq + l];
        if (c >= cfg_.vocab()) throw std::invalid_argument("output code outside model vocab");
        kernels::axpy(S(1), tensor(layout_.out_codebook[l]) + c * d, ey, d);
      }
    }
  }

  template <class>
  friend class TinyFormer;

  ModelConfig cfg_;
  ParamLayout layout_;
  std::vector<S> params_;
  std::vector<S> rope_cos_, rope_sin_;
};

// Mean cross-entropy over supervised (position, level) entries. Writes
// d(loss)/d(logits) when dlogits is non-empty (zero outside the mask).
template <class S>
double cross_entropy(const AlignedSequence& seq, std::span<const S> logits, std::size_t vocab,
                     std::span<S> dlogits = {}) {
  const std::size_t nq = seq.levels, n = seq.length;
  if (logits.size() < n * nq * vocab) throw std::invalid_argument("cross_entropy: logits too small");
  std::size_t count = 0;
  for (std::size_t p = 0; p < n; ++p)
    if (seq.loss_mask[p])
      for (std::size_t l = 0; l < nq; ++l) count += seq.level_mask[p * nq + l];
  if (count == 0) throw std::invalid_argument("cross_entropy: empty loss mask");
  if (!dlogits.empty()) {
    if (dlogits.size() < n * nq * vocab) throw std::invalid_argument("cross_entropy: dlogits too small");
    std::fill(dlogits.begin(), dlogits.begin() + static_cast<std::ptrdiff_t>(n * nq * vocab), S(0));
  }
  const double inv = 1.0 / static_cast<double>(count);
  double total = 0;
  for (std::size_t p = 0; p < n; ++p) {
    if (!seq.loss_mask[p]) continue;
    for (std::size_t l = 0; l < nq; ++l) {
      if (!seq.level_mask[p * nq + l]) continue;
      const S* z = &logits[(p * nq + l) * vocab];
      const Code target = seq.targets[p * nq + l];
      double mx = z[0];
      for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, static_cast<double>(z[v]));
      double sum = 0;
      for (std::size_t v = 0; v < vocab; ++v) sum += std::exp(static_cast<double>(z[v]) - mx);
      const double lse = mx + std::log(sum);
      total += lse - static_cast<double>(z[target]);
      if (!dlogits.empty()) {
        S* dz = &dlogits[(p * nq + l) * vocab];
        for (std::size_t v = 0; v < vocab; ++v)
          dz[v] = static_cast<S>((std::exp(static_cast<double>(z[v]) - lse) - (v == target ? 1.0 : 0.0)) * inv);
      }
    }
  }
  return total * inv;
}

}  // namespace streamacc
