// Copyright 2026 The lidarclip-cpp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal row-major matrix plus the dense kernels the encoder needs. Storage
// is T (float or double); every reduction accumulates in double.

#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace lidarclip {

template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<T> data_;
};

namespace kernels {

/// out = in * W + b, W is (in.cols x out_cols) row-major.
template <typename T>
Matrix<T> linear(const Matrix<T>& in, std::span<const T> w, std::span<const T> b, std::size_t out_cols) {
  const std::size_t n = in.rows(), k = in.cols();
  assert(w.size() == k * out_cols && b.size() == out_cols);
  Matrix<T> out(n, out_cols);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out_cols; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < k; ++i) acc += static_cast<double>(in(r, i)) * static_cast<double>(w[i * out_cols + o]);
      out(r, o) = static_cast<T>(acc);
    }
  }
  return out;
}

/// Accumulates dW += in^T dout, db += colsum(dout) and returns din = dout W^T.
template <typename T>
Matrix<double> linear_backward(const Matrix<T>& in, std::span<const T> w, const Matrix<double>& dout,
                               std::span<double> dw, std::span<double> db) {
  const std::size_t n = in.rows(), k = in.cols(), m = dout.cols();
  Matrix<double> din(n, k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t o = 0; o < m; ++o) {
      double acc = 0;
      for (std::size_t r = 0; r < n; ++r) acc += static_cast<double>(in(r, i)) * dout(r, o);
      dw[i * m + o] += acc;
    }
  }
  for (std::size_t o = 0; o < m; ++o) {
    double acc = 0;
    for (std::size_t r = 0; r < n; ++r) acc += dout(r, o);
    db[o] += acc;
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < k; ++i) {
      double acc = 0;
      for (std::size_t o = 0; o < m; ++o) acc += dout(r, o) * static_cast<double>(w[i * m + o]);
      din(r, i) = acc;
    }
  }
  return din;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row layer normalization. xhat and the reciprocal std are kept for the
/// backward pass.
template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;
  std::vector<double> rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, std::span<const T> gamma, std::span<const T> beta, LayerNormCache<T>* cache) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix<T> y(n, d);
  Matrix<T> xhat(n, d);
  std::vector<double> rstd(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += x(r, c);
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const double dv = x(r, c) - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (x(r, c) - mean) * rstd[r];
      xhat(r, c) = static_cast<T>(h);
      y(r, c) = static_cast<T>(static_cast<double>(gamma[c]) * h + static_cast<double>(beta[c]));
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
Matrix<double> layer_norm_backward(const LayerNormCache<T>& cache, std::span<const T> gamma, const Matrix<double>& dy,
                                   std::span<double> dgamma, std::span<double> dbeta) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix<double> dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    double mean_dxhat = 0, mean_dxhat_xhat = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const double xh = cache.xhat(r, c);
      dgamma[c] += dy(r, c) * xh;
      dbeta[c] += dy(r, c);
      dxhat[c] = dy(r, c) * static_cast<double>(gamma[c]);
      mean_dxhat += dxhat[c];
      mean_dxhat_xhat += dxhat[c] * xh;
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) {
      dx(r, c) = cache.rstd[r] * (dxhat[c] - mean_dxhat - static_cast<double>(cache.xhat(r, c)) * mean_dxhat_xhat);
    }
  }
  return dx;
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * M_SQRT1_2)); }

inline double gelu_grad(double u) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(u * M_SQRT1_2)) + u * kInvSqrt2Pi * std::exp(-0.5 * u * u);
}

/// Softmax over `logits` in place, computed in double.
inline void softmax_inplace(std::span<double> logits) {
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : logits) v /= sum;
}

template <typename T>
bool all_finite(std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace kernels
}  // namespace lidarclip
