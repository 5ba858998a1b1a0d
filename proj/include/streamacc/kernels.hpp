#pragma once

// Small dense kernels. Every reduction uses a fixed 8-lane accumulation
// order, so a row's result never depends on how many rows are processed
// together or on buffer alignment.

#include <cmath>
#include <cstddef>

namespace streamacc::kernels {

template <class S>
inline S dot(const S* __restrict a, const S* __restrict b, std::size_t n) {
  S acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  S tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail;
}

template <class S>
inline void axpy(S alpha, const S* __restrict x, S* __restrict y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Y[r, o] = sum_i W[o, i] X[r, i] for rows [r0, r1). W is out x in, row-major.
template <class S>
inline void linear_rows(const S* X, const S* W, S* Y, std::size_t in, std::size_t out, std::size_t r0,
                        std::size_t r1) {
  for (std::size_t r = r0; r < r1; ++r) {
    const S* x = X + r * in;
    S* y = Y + r * out;
    for (std::size_t o = 0; o < out; ++o) y[o] = dot(W + o * in, x, in);
  }
}

// dX[r, :] += sum_o dY[r, o] W[o, :]
template <class S>
inline void linear_backward_input(const S* dY, const S* W, S* dX, std::size_t in, std::size_t out, std::size_t rows) {
  for (std::size_t r = 0; r < rows; ++r) {
    const S* dy = dY + r * out;
    S* dx = dX + r * in;
    for (std::size_t o = 0; o < out; ++o)
      if (dy[o] != S(0)) axpy(dy[o], W + o * in, dx, in);
  }
}

// dW[o, :] += sum_r dY[r, o] X[r, :]
template <class S>
inline void linear_backward_weight(const S* dY, const S* X, S* dW, std::size_t in, std::size_t out, std::size_t rows) {
  for (std::size_t r = 0; r < rows; ++r) {
    const S* dy = dY + r * out;
    const S* x = X + r * in;
    for (std::size_t o = 0; o < out; ++o)
      if (dy[o] != S(0)) axpy(dy[o], x, dW + o * in, in);
  }
}

// y = x / sqrt(mean(x^2) + eps); returns the divisor.
template <class S>
inline S rms_norm(const S* x, S* y, std::size_t n, S eps) {
  const S r = std::sqrt(dot(x, x, n) / static_cast<S>(n) + eps);
  const S inv = S(1) / r;
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * inv;
  return r;
}

// dx += (dy - y * mean(dy . y)) / r
template <class S>
inline void rms_norm_backward(const S* dy, const S* y, S r, S* dx, std::size_t n) {
  const S m = dot(dy, y, n) / static_cast<S>(n);
  const S inv = S(1) / r;
  for (std::size_t i = 0; i < n; ++i) dx[i] += (dy[i] - y[i] * m) * inv;
}

// y = x / sqrt(|x|^2 + eps); returns the divisor.
template <class S>
inline S l2_normalize(const S* x, S* y, std::size_t n, S eps) {
  const S r = std::sqrt(dot(x, x, n) + eps);
  const S inv = S(1) / r;
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * inv;
  return r;
}

// dx += (dy - y (y . dy)) / r
template <class S>
inline void l2_normalize_backward(const S* dy, const S* y, S r, S* dx, std::size_t n) {
  const S m = dot(dy, y, n);
  const S inv = S(1) / r;
  for (std::size_t i = 0; i < n; ++i) dx[i] += (dy[i] - y[i] * m) * inv;
}

template <class S>
inline S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

}  // namespace streamacc::kernels
