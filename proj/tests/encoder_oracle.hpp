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

// Test-only reference implementations. Nothing here reuses the encoder's
// kernels: parameters are looked up by segment name and every step is
// written out with plain vectors.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lidarclip/encoder.hpp"

namespace lidarclip::oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

class Named {
 public:
  Named(const EncoderConfig& cfg, const std::vector<double>& values) : layout_(cfg), values_(values) {}

  // (rows x cols) row-major block named `name`.
  Mat mat(const std::string& name) const {
    const auto* s = layout_.find(name);
    if (!s) throw std::runtime_error("missing segment " + name);
    Mat m(s->rows, Vec(s->cols));
    for (std::size_t r = 0; r < s->rows; ++r) {
      for (std::size_t c = 0; c < s->cols; ++c) m[r][c] = values_[s->offset + r * s->cols + c];
    }
    return m;
  }
  Vec vec(const std::string& name) const { return mat(name)[0]; }

 private:
  ParamLayout layout_;
  const std::vector<double>& values_;
};

inline Mat affine(const Mat& x, const Mat& w, const Vec& b) {
  Mat out(x.size(), Vec(b.size()));
  for (std::size_t n = 0; n < x.size(); ++n) {
    for (std::size_t o = 0; o < b.size(); ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < x[n].size(); ++i) s += x[n][i] * w[i][o];
      out[n][o] = s;
    }
  }
  return out;
}

inline Mat norm_rows(const Mat& x, const Vec& g, const Vec& b) {
  Mat out = x;
  for (std::size_t n = 0; n < x.size(); ++n) {
    const double d = static_cast<double>(x[n].size());
    double mu = 0;
    for (double v : x[n]) mu += v;
    mu /= d;
    double var = 0;
    for (double v : x[n]) var += (v - mu) * (v - mu);
    var /= d;
    for (std::size_t c = 0; c < x[n].size(); ++c) out[n][c] = g[c] * (x[n][c] - mu) / std::sqrt(var + 1e-5) + b[c];
  }
  return out;
}

// Softmax-weighted attention of each query row over the key/value rows.
inline Mat attend(const Mat& q, const Mat& k, const Mat& v, int heads) {
  const std::size_t d = q[0].size(), dh = d / static_cast<std::size_t>(heads);
  Mat out(q.size(), Vec(d, 0.0));
  for (int h = 0; h < heads; ++h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * dh;
    for (std::size_t i = 0; i < q.size(); ++i) {
      Vec w(k.size());
      double mx = -1e300;
      for (std::size_t j = 0; j < k.size(); ++j) {
        double s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i][c0 + c] * k[j][c0 + c];
        w[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, w[j]);
      }
      double z = 0;
      for (double& x : w) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < k.size(); ++j) {
        for (std::size_t c = 0; c < dh; ++c) out[i][c0 + c] += w[j] / z * v[j][c0 + c];
      }
    }
  }
  return out;
}

inline Vec straight_line_encode(const VoxelGrid& grid, const std::vector<double>& values, const EncoderConfig& cfg) {
  Named p(cfg, values);
  const auto& ws = cfg.window_shape;
  Mat feats;
  std::vector<int> slot;
  std::vector<VoxelIndex> window_of;
  for (const auto& [idx, f] : grid.voxels) {
    feats.push_back({f.offset[0], f.offset[1], f.offset[2], f.intensity, f.count});
    slot.push_back(((idx[0] % ws[0]) * ws[1] + idx[1] % ws[1]) * ws[2] + idx[2] % ws[2]);
    window_of.push_back({idx[0] / ws[0], idx[1] / ws[1], idx[2] / ws[2]});
  }
  Mat x = affine(feats, p.mat("input.weight"), p.vec("input.bias"));
  Mat pos = p.mat("pos_embed");
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t c = 0; c < x[i].size(); ++c) x[i][c] += pos[static_cast<std::size_t>(slot[i])][c];
  }
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    Mat a = norm_rows(x, p.vec(pre + "ln1.gamma"), p.vec(pre + "ln1.beta"));
    Mat q = affine(a, p.mat(pre + "attn.wq"), p.vec(pre + "attn.bq"));
    Mat k = affine(a, p.mat(pre + "attn.wk"), p.vec(pre + "attn.bk"));
    Mat v = affine(a, p.mat(pre + "attn.wv"), p.vec(pre + "attn.bv"));
    Mat ctx(x.size(), Vec(x[0].size()));
    // Brute force: every token attends to tokens sharing its window.
    for (std::size_t i = 0; i < x.size(); ++i) {
      Mat kk, vv;
      for (std::size_t j = 0; j < x.size(); ++j) {
        if (window_of[j] == window_of[i]) {
          kk.push_back(k[j]);
          vv.push_back(v[j]);
        }
      }
      ctx[i] = attend({q[i]}, kk, vv, cfg.layer_heads)[0];
    }
    Mat y = affine(ctx, p.mat(pre + "attn.wo"), p.vec(pre + "attn.bo"));
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t c = 0; c < x[i].size(); ++c) x[i][c] += y[i][c];
    }
    Mat b = norm_rows(x, p.vec(pre + "ln2.gamma"), p.vec(pre + "ln2.beta"));
    Mat u = affine(b, p.mat(pre + "ffn.w1"), p.vec(pre + "ffn.b1"));
    for (auto& row : u) {
      for (double& e : row) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
    }
    Mat y2 = affine(u, p.mat(pre + "ffn.w2"), p.vec(pre + "ffn.b2"));
    for (std::size_t i = 0; i < x.size(); ++i) {
      for (std::size_t c = 0; c < x[i].size(); ++c) x[i][c] += y2[i][c];
    }
  }
  Mat h = norm_rows(x, p.vec("final_ln.gamma"), p.vec("final_ln.beta"));
  Vec mean(h[0].size(), 0.0);
  for (const auto& row : h) {
    for (std::size_t c = 0; c < row.size(); ++c) mean[c] += row[c] / static_cast<double>(h.size());
  }
  Mat q = affine({mean}, p.mat("pool.wq"), p.vec("pool.bq"));
  Mat k = affine(h, p.mat("pool.wk"), p.vec("pool.bk"));
  Mat v = affine(h, p.mat("pool.wv"), p.vec("pool.bv"));
  Mat pooled = attend(q, k, v, cfg.pool_heads);
  return affine(pooled, p.mat("out.weight"), p.vec("out.bias"))[0];
}

/// Central differences, step h, in double precision.
inline std::vector<double> finite_difference_grad(const EncoderParams<double>& params,
                                                  const std::function<double(const EncoderParams<double>&)>& f,
                                                  double h = 1e-5) {
  EncoderParams<double> work = params;
  std::vector<double> grad(params.values.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double orig = work.values[i];
    work.values[i] = orig + h;
    const double fp = f(work);
    work.values[i] = orig - h;
    const double fm = f(work);
    work.values[i] = orig;
    grad[i] = (fp - fm) / (2 * h);
  }
  return grad;
}

/// max_i |a_i - b_i| / max(1, |b_i|)
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& reference) {
  double worst = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, std::abs(analytic[i] - reference[i]) / std::max(1.0, std::abs(reference[i])));
  }
  return worst;
}

}  // namespace lidarclip::oracle
