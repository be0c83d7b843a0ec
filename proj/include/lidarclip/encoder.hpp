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

// Sparse voxel transformer that maps a point cloud to one embedding vector.
//
// Pipeline: voxelize -> per-voxel linear projection + learned position
// embedding (indexed by the voxel's slot inside its window) -> N pre-norm
// blocks of windowed multi-head self-attention and a GELU feed-forward ->
// final layer norm -> multi-head attention pooling whose query is the mean
// voxel feature -> linear projection to the embedding dimension.
//
// encoder_grad() is the hand-written reverse pass of exactly this graph.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <algorithm>
#include <tuple>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lidarclip/binary_io.hpp"
#include "lidarclip/error.hpp"
#include "lidarclip/geometry.hpp"
#include "lidarclip/tensor.hpp"

namespace lidarclip {

struct EncoderConfig {
  std::array<double, 3> voxel_size{0.5, 0.5, 6.0};
  std::array<int, 3> window_shape{12, 12, 1};
  std::array<double, 6> pc_range{0, -20, -2, 40, 20, 4};  // xmin ymin zmin xmax ymax zmax
  int num_layers = 4;
  int d_model = 128;
  int d_ff = 256;
  int layer_heads = 8;
  int pool_heads = 8;
  int d_out = 768;

  int window_volume() const { return window_shape[0] * window_shape[1] * window_shape[2]; }

  std::array<int, 3> grid_dims() const {
    std::array<int, 3> dims{};
    for (int a = 0; a < 3; ++a) {
      dims[a] = static_cast<int>(std::ceil((pc_range[a + 3] - pc_range[a]) / voxel_size[a] - 1e-9));
    }
    return dims;
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (!(voxel_size[a] > 0)) fail(ErrorCode::kInvalidArgument, "voxel_size must be positive");
      if (window_shape[a] <= 0) fail(ErrorCode::kInvalidArgument, "window_shape must be positive");
      if (!(pc_range[a] < pc_range[a + 3])) fail(ErrorCode::kInvalidArgument, "pc_range min must be below max");
    }
    if (num_layers < 0) fail(ErrorCode::kInvalidArgument, "num_layers must be non-negative");
    if (d_model <= 0 || d_ff <= 0 || d_out <= 0 || layer_heads <= 0 || pool_heads <= 0) {
      fail(ErrorCode::kInvalidArgument, "encoder sizes must be positive");
    }
    if (d_model % pool_heads != 0) fail(ErrorCode::kInvalidArgument, "d_model must be divisible by pool_heads");
    if (d_model % layer_heads != 0) fail(ErrorCode::kInvalidArgument, "d_model must be divisible by layer_heads");
  }

  /// Small configuration used by tests, gradient checks and desk-scale
  /// training runs.
  static EncoderConfig tiny(int d_out = 8) {
    EncoderConfig c;
    c.voxel_size = {4.0, 4.0, 6.0};
    c.window_shape = {2, 2, 1};
    c.num_layers = 1;
    c.d_model = 8;
    c.d_ff = 16;
    c.layer_heads = 2;
    c.pool_heads = 2;
    c.d_out = d_out;
    return c;
  }
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"voxel_size", c.voxel_size}, {"window_shape", c.window_shape}, {"pc_range", c.pc_range},
          {"num_layers", c.num_layers}, {"d_model", c.d_model},           {"d_ff", c.d_ff},
          {"layer_heads", c.layer_heads}, {"pool_heads", c.pool_heads},   {"d_out", c.d_out}};
}

/// Missing keys keep their defaults.
inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  try {
    if (j.contains("voxel_size")) c.voxel_size = j["voxel_size"].get<std::array<double, 3>>();
    if (j.contains("window_shape")) c.window_shape = j["window_shape"].get<std::array<int, 3>>();
    if (j.contains("pc_range")) c.pc_range = j["pc_range"].get<std::array<double, 6>>();
    if (j.contains("num_layers")) c.num_layers = j["num_layers"].get<int>();
    if (j.contains("d_model")) c.d_model = j["d_model"].get<int>();
    if (j.contains("d_ff")) c.d_ff = j["d_ff"].get<int>();
    if (j.contains("layer_heads")) c.layer_heads = j["layer_heads"].get<int>();
    if (j.contains("pool_heads")) c.pool_heads = j["pool_heads"].get<int>();
    if (j.contains("d_out")) c.d_out = j["d_out"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

inline std::uint64_t config_digest(const EncoderConfig& c) { return io::fnv1a64(to_json(c).dump()); }

// ---------------------------------------------------------------------------
// Voxelization

using VoxelIndex = std::array<int, 3>;

/// Per-voxel summary: mean offset of the points from the voxel center,
/// mean intensity and the number of points.
struct VoxelFeature {
  std::array<double, 3> offset{};
  double intensity = 0;
  double count = 0;
};

inline constexpr std::size_t kVoxelFeatureDim = 5;

struct VoxelGrid {
  // std::map keeps voxels in canonical (lexicographic index) order.
  std::map<VoxelIndex, VoxelFeature> voxels;

  std::size_t size() const { return voxels.size(); }
  bool empty() const { return voxels.empty(); }
};

/// Points outside pc_range are dropped. Per-voxel sums run over the points
/// in sorted order so the result does not depend on input order.
inline VoxelGrid voxelize(const PointCloud& cloud, const EncoderConfig& cfg) {
  cfg.validate();
  const auto dims = cfg.grid_dims();
  std::map<VoxelIndex, std::vector<const Point*>> buckets;
  for (const Point& p : cloud.points) {
    const std::array<double, 3> xyz{p.x, p.y, p.z};
    VoxelIndex idx{};
    bool inside = true;
    for (int a = 0; a < 3 && inside; ++a) {
      if (!(xyz[a] >= cfg.pc_range[a] && xyz[a] < cfg.pc_range[a + 3])) {
        inside = false;
        break;
      }
      idx[a] = static_cast<int>(std::floor((xyz[a] - cfg.pc_range[a]) / cfg.voxel_size[a]));
      if (idx[a] < 0 || idx[a] >= dims[a]) inside = false;
    }
    if (inside) buckets[idx].push_back(&p);
  }
  if (buckets.empty()) fail(ErrorCode::kEmptyInput, "no points inside the encoder's point-cloud range");

  VoxelGrid grid;
  for (auto& [idx, pts] : buckets) {
    std::sort(pts.begin(), pts.end(), [](const Point* a, const Point* b) {
      return std::tie(a->x, a->y, a->z, a->intensity) < std::tie(b->x, b->y, b->z, b->intensity);
    });
    std::array<double, 3> center{};
    for (int a = 0; a < 3; ++a) center[a] = cfg.pc_range[a] + (idx[a] + 0.5) * cfg.voxel_size[a];
    VoxelFeature f;
    for (const Point* p : pts) {
      f.offset[0] += p->x - center[0];
      f.offset[1] += p->y - center[1];
      f.offset[2] += p->z - center[2];
      f.intensity += p->intensity;
    }
    const double n = static_cast<double>(pts.size());
    for (double& o : f.offset) o /= n;
    f.intensity /= n;
    f.count = n;
    grid.voxels.emplace(idx, f);
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Parameters

struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t fan_in = 0;  // 0 marks layer-norm gains/offsets

  std::size_t size() const { return rows * cols; }
};

/// Named views into the flat parameter vector. Weights are stored
/// (in_features x out_features) row-major.
class ParamLayout {
 public:
  struct Block {
    std::size_t ln1_gamma, ln1_beta;
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_gamma, ln2_beta;
    std::size_t w1, b1, w2, b2;
  };

  explicit ParamLayout(const EncoderConfig& cfg) {
    cfg.validate();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const std::size_t ff = static_cast<std::size_t>(cfg.d_ff);
    const std::size_t out = static_cast<std::size_t>(cfg.d_out);
    in_w = add("input.weight", kVoxelFeatureDim, d, kVoxelFeatureDim);
    in_b = add("input.bias", 1, d, kVoxelFeatureDim);
    pos = add("pos_embed", static_cast<std::size_t>(cfg.window_volume()), d, d);
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Block b{};
      b.ln1_gamma = add(p + "ln1.gamma", 1, d, 0);
      b.ln1_beta = add(p + "ln1.beta", 1, d, 0);
      b.wq = add(p + "attn.wq", d, d, d);
      b.bq = add(p + "attn.bq", 1, d, d);
      b.wk = add(p + "attn.wk", d, d, d);
      b.bk = add(p + "attn.bk", 1, d, d);
      b.wv = add(p + "attn.wv", d, d, d);
      b.bv = add(p + "attn.bv", 1, d, d);
      b.wo = add(p + "attn.wo", d, d, d);
      b.bo = add(p + "attn.bo", 1, d, d);
      b.ln2_gamma = add(p + "ln2.gamma", 1, d, 0);
      b.ln2_beta = add(p + "ln2.beta", 1, d, 0);
      b.w1 = add(p + "ffn.w1", d, ff, d);
      b.b1 = add(p + "ffn.b1", 1, ff, d);
      b.w2 = add(p + "ffn.w2", ff, d, ff);
      b.b2 = add(p + "ffn.b2", 1, d, ff);
      blocks.push_back(b);
    }
    lnf_gamma = add("final_ln.gamma", 1, d, 0);
    lnf_beta = add("final_ln.beta", 1, d, 0);
    pool_wq = add("pool.wq", d, d, d);
    pool_bq = add("pool.bq", 1, d, d);
    pool_wk = add("pool.wk", d, d, d);
    pool_bk = add("pool.bk", 1, d, d);
    pool_wv = add("pool.wv", d, d, d);
    pool_bv = add("pool.bv", 1, d, d);
    out_w = add("out.weight", d, out, d);
    out_b = add("out.bias", 1, out, d);
  }

  std::size_t total() const { return total_; }
  const std::vector<ParamSegment>& segments() const { return segments_; }
  const ParamSegment& operator[](std::size_t i) const { return segments_[i]; }

  const ParamSegment* find(const std::string& name) const {
    for (const auto& s : segments_) {
      if (s.name == name) return &s;
    }
    return nullptr;
  }

  std::size_t in_w, in_b, pos;
  std::vector<Block> blocks;
  std::size_t lnf_gamma, lnf_beta;
  std::size_t pool_wq, pool_bq, pool_wk, pool_bk, pool_wv, pool_bv;
  std::size_t out_w, out_b;

 private:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols, std::size_t fan_in) {
    segments_.push_back({std::move(name), total_, rows, cols, fan_in});
    total_ += rows * cols;
    return segments_.size() - 1;
  }

  std::vector<ParamSegment> segments_;
  std::size_t total_ = 0;
};

inline std::size_t parameter_count(const EncoderConfig& cfg) { return ParamLayout(cfg).total(); }

template <typename T>
struct EncoderParams {
  std::vector<T> values;

  std::span<const T> segment(const ParamSegment& s) const { return {values.data() + s.offset, s.size()}; }
  std::span<T> segment(const ParamSegment& s) { return {values.data() + s.offset, s.size()}; }

  template <typename U>
  EncoderParams<U> cast() const {
    return {std::vector<U>(values.begin(), values.end())};
  }
};

/// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); layer-norm gains
/// start at 1 and offsets at 0.
template <typename T>
EncoderParams<T> init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  ParamLayout layout(cfg);
  EncoderParams<T> params{std::vector<T>(layout.total(), T(0))};
  std::mt19937_64 rng(seed);
  for (const auto& seg : layout.segments()) {
    auto span = params.segment(seg);
    if (seg.fan_in == 0) {
      const bool gain = seg.name.ends_with("gamma");
      for (T& v : span) v = gain ? T(1) : T(0);
      continue;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(seg.fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (T& v : span) v = static_cast<T>(dist(rng));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

struct WindowGroup {
  std::vector<std::size_t> tokens;  // indices into the canonical voxel order
};

struct TokenLayout {
  Matrix<double> features;              // N x 5
  std::vector<std::size_t> pos_slot;    // learned position row per token
  std::vector<WindowGroup> windows;     // in window-index order
};

inline TokenLayout make_tokens(const VoxelGrid& grid, const EncoderConfig& cfg) {
  TokenLayout t;
  t.features = Matrix<double>(grid.size(), kVoxelFeatureDim);
  t.pos_slot.reserve(grid.size());
  std::map<VoxelIndex, WindowGroup> windows;
  const auto& ws = cfg.window_shape;
  std::size_t n = 0;
  for (const auto& [idx, f] : grid.voxels) {
    t.features(n, 0) = f.offset[0];
    t.features(n, 1) = f.offset[1];
    t.features(n, 2) = f.offset[2];
    t.features(n, 3) = f.intensity;
    t.features(n, 4) = f.count;
    const VoxelIndex win{idx[0] / ws[0], idx[1] / ws[1], idx[2] / ws[2]};
    const std::size_t slot = static_cast<std::size_t>(((idx[0] % ws[0]) * ws[1] + (idx[1] % ws[1])) * ws[2] + (idx[2] % ws[2]));
    t.pos_slot.push_back(slot);
    windows[win].tokens.push_back(n);
    ++n;
  }
  for (auto& [_, g] : windows) t.windows.push_back(std::move(g));
  return t;
}

template <typename T>
struct AttentionCache {
  Matrix<T> q, k, v;   // N x D
  Matrix<T> context;   // N x D, concatenated heads before the output projection
  // probs[w][h] is an n_w x n_w row-major matrix.
  std::vector<std::vector<std::vector<double>>> probs;
};

template <typename T>
struct BlockCache {
  Matrix<T> x_in;
  kernels::LayerNormCache<T> ln1;
  Matrix<T> a;  // ln1 output
  AttentionCache<T> attn;
  Matrix<T> x_mid;
  kernels::LayerNormCache<T> ln2;
  Matrix<T> b;  // ln2 output
  Matrix<T> u;  // pre-activation
  Matrix<T> g;  // GELU(u)
};

template <typename T>
struct ForwardCache {
  TokenLayout tokens;
  Matrix<T> feats;  // features as T
  std::vector<BlockCache<T>> blocks;
  Matrix<T> x_final;
  kernels::LayerNormCache<T> lnf;
  Matrix<T> h;            // final-normed tokens
  Matrix<T> mean;         // 1 x D
  Matrix<T> pq;           // 1 x D
  Matrix<T> pk, pv;       // N x D
  std::vector<std::vector<double>> pool_probs;  // per head, length N
  Matrix<T> pooled;       // 1 x D
};

template <typename T>
void check_finite(const Matrix<T>& m, int layer, const char* what) {
  if (!kernels::all_finite<T>(m.flat())) {
    throw NumericError(std::string("non-finite values in ") + what + " (layer " + std::to_string(layer) + ")", layer);
  }
}

template <typename T>
Matrix<T> windowed_attention(const Matrix<T>& a, const EncoderParams<T>& params, const ParamLayout& L,
                             const ParamLayout::Block& blk, const TokenLayout& tok, int heads, AttentionCache<T>& cache) {
  const std::size_t d = a.cols();
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto seg = [&](std::size_t i) { return params.segment(L[i]); };
  cache.q = kernels::linear(a, seg(blk.wq), seg(blk.bq), d);
  cache.k = kernels::linear(a, seg(blk.wk), seg(blk.bk), d);
  cache.v = kernels::linear(a, seg(blk.wv), seg(blk.bv), d);
  cache.context = Matrix<T>(a.rows(), d);
  cache.probs.assign(tok.windows.size(), {});
  for (std::size_t w = 0; w < tok.windows.size(); ++w) {
    const auto& ids = tok.windows[w].tokens;
    const std::size_t n = ids.size();
    cache.probs[w].assign(static_cast<std::size_t>(heads), std::vector<double>(n * n));
    for (int h = 0; h < heads; ++h) {
      const std::size_t c0 = static_cast<std::size_t>(h) * dh;
      auto& p = cache.probs[w][static_cast<std::size_t>(h)];
      for (std::size_t i = 0; i < n; ++i) {
        std::span<double> row(p.data() + i * n, n);
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(cache.q(ids[i], c0 + c)) * cache.k(ids[j], c0 + c);
          row[j] = s * scale;
        }
        kernels::softmax_inplace(row);
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += row[j] * static_cast<double>(cache.v(ids[j], c0 + c));
          cache.context(ids[i], c0 + c) = static_cast<T>(acc);
        }
      }
    }
  }
  return kernels::linear(cache.context, seg(blk.wo), seg(blk.bo), d);
}

template <typename T>
std::vector<T> forward(const VoxelGrid& grid, const EncoderParams<T>& params, const EncoderConfig& cfg,
                       ForwardCache<T>& cache) {
  cfg.validate();
  if (grid.empty()) fail(ErrorCode::kEmptyInput, "encode requires a non-empty voxel grid");
  const ParamLayout L(cfg);
  if (params.values.size() != L.total()) {
    fail(ErrorCode::kDimensionMismatch, "parameter vector has " + std::to_string(params.values.size()) +
                                            " entries, config expects " + std::to_string(L.total()));
  }
  auto seg = [&](std::size_t i) { return params.segment(L[i]); };
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t ff = static_cast<std::size_t>(cfg.d_ff);

  cache.tokens = make_tokens(grid, cfg);
  const std::size_t n = grid.size();
  cache.feats = Matrix<T>(n, kVoxelFeatureDim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < kVoxelFeatureDim; ++c) cache.feats(i, c) = static_cast<T>(cache.tokens.features(i, c));
  }

  Matrix<T> x = kernels::linear(cache.feats, seg(L.in_w), seg(L.in_b), d);
  {
    auto pos = seg(L.pos);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t slot = cache.tokens.pos_slot[i];
      for (std::size_t c = 0; c < d; ++c) {
        x(i, c) = static_cast<T>(static_cast<double>(x(i, c)) + static_cast<double>(pos[slot * d + c]));
      }
    }
  }
  check_finite(x, 0, "input projection");

  cache.blocks.assign(L.blocks.size(), {});
  for (std::size_t l = 0; l < L.blocks.size(); ++l) {
    const auto& blk = L.blocks[l];
    auto& bc = cache.blocks[l];
    bc.x_in = x;
    bc.a = kernels::layer_norm(x, seg(blk.ln1_gamma), seg(blk.ln1_beta), &bc.ln1);
    Matrix<T> y = windowed_attention(bc.a, params, L, blk, cache.tokens, cfg.layer_heads, bc.attn);
    for (std::size_t i = 0; i < x.flat().size(); ++i) {
      x.flat()[i] = static_cast<T>(static_cast<double>(x.flat()[i]) + static_cast<double>(y.flat()[i]));
    }
    bc.x_mid = x;
    bc.b = kernels::layer_norm(x, seg(blk.ln2_gamma), seg(blk.ln2_beta), &bc.ln2);
    bc.u = kernels::linear(bc.b, seg(blk.w1), seg(blk.b1), ff);
    bc.g = Matrix<T>(n, ff);
    for (std::size_t i = 0; i < bc.u.flat().size(); ++i) bc.g.flat()[i] = static_cast<T>(kernels::gelu(bc.u.flat()[i]));
    Matrix<T> y2 = kernels::linear(bc.g, seg(blk.w2), seg(blk.b2), d);
    for (std::size_t i = 0; i < x.flat().size(); ++i) {
      x.flat()[i] = static_cast<T>(static_cast<double>(x.flat()[i]) + static_cast<double>(y2.flat()[i]));
    }
    check_finite(x, static_cast<int>(l) + 1, "encoder block");
  }

  cache.x_final = x;
  cache.h = kernels::layer_norm(x, seg(L.lnf_gamma), seg(L.lnf_beta), &cache.lnf);

  // Attention pooling: the query starts from the mean token.
  cache.mean = Matrix<T>(1, d);
  for (std::size_t c = 0; c < d; ++c) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += cache.h(i, c);
    cache.mean(0, c) = static_cast<T>(acc / static_cast<double>(n));
  }
  cache.pq = kernels::linear(cache.mean, seg(L.pool_wq), seg(L.pool_bq), d);
  cache.pk = kernels::linear(cache.h, seg(L.pool_wk), seg(L.pool_bk), d);
  cache.pv = kernels::linear(cache.h, seg(L.pool_wv), seg(L.pool_bv), d);
  const std::size_t heads = static_cast<std::size_t>(cfg.pool_heads);
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  cache.pool_probs.assign(heads, std::vector<double>(n));
  cache.pooled = Matrix<T>(1, d);
  for (std::size_t h = 0; h < heads; ++h) {
    auto& p = cache.pool_probs[h];
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < dh; ++c) s += static_cast<double>(cache.pq(0, h * dh + c)) * cache.pk(j, h * dh + c);
      p[j] = s * scale;
    }
    kernels::softmax_inplace(p);
    for (std::size_t c = 0; c < dh; ++c) {
      double acc = 0;
      for (std::size_t j = 0; j < n; ++j) acc += p[j] * static_cast<double>(cache.pv(j, h * dh + c));
      cache.pooled(0, h * dh + c) = static_cast<T>(acc);
    }
  }
  Matrix<T> z = kernels::linear(cache.pooled, seg(L.out_w), seg(L.out_b), static_cast<std::size_t>(cfg.d_out));
  check_finite(z, cfg.num_layers + 1, "attention pooling");
  return {z.flat().begin(), z.flat().end()};
}

/// Reverse pass through one window-attention sublayer. Returns d(ln1 output).
template <typename T>
Matrix<double> windowed_attention_backward(const BlockCache<T>& bc, const EncoderParams<T>& params, const ParamLayout& L,
                                           const ParamLayout::Block& blk, const TokenLayout& tok, int heads,
                                           const Matrix<double>& dy, std::span<double> grad) {
  auto seg = [&](std::size_t i) { return params.segment(L[i]); };
  auto gseg = [&](std::size_t i) { return grad.subspan(L[i].offset, L[i].size()); };
  const auto& ac = bc.attn;
  const std::size_t n_tok = bc.a.rows();
  const std::size_t d = bc.a.cols();
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix<double> dctx = kernels::linear_backward(ac.context, seg(blk.wo), dy, gseg(blk.wo), gseg(blk.bo));
  Matrix<double> dq(n_tok, d), dk(n_tok, d), dv(n_tok, d);
  for (std::size_t w = 0; w < tok.windows.size(); ++w) {
    const auto& ids = tok.windows[w].tokens;
    const std::size_t n = ids.size();
    std::vector<double> dp(n);
    for (int h = 0; h < heads; ++h) {
      const std::size_t c0 = static_cast<std::size_t>(h) * dh;
      const auto& p = ac.probs[w][static_cast<std::size_t>(h)];
      for (std::size_t i = 0; i < n; ++i) {
        const double* prow = p.data() + i * n;
        double dot = 0;
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < dh; ++c) {
            s += dctx(ids[i], c0 + c) * static_cast<double>(ac.v(ids[j], c0 + c));
            dv(ids[j], c0 + c) += prow[j] * dctx(ids[i], c0 + c);
          }
          dp[j] = s;
          dot += prow[j] * s;
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double ds = prow[j] * (dp[j] - dot) * scale;
          for (std::size_t c = 0; c < dh; ++c) {
            dq(ids[i], c0 + c) += ds * static_cast<double>(ac.k(ids[j], c0 + c));
            dk(ids[j], c0 + c) += ds * static_cast<double>(ac.q(ids[i], c0 + c));
          }
        }
      }
    }
  }
  Matrix<double> da = kernels::linear_backward(bc.a, seg(blk.wq), dq, gseg(blk.wq), gseg(blk.bq));
  Matrix<double> da_k = kernels::linear_backward(bc.a, seg(blk.wk), dk, gseg(blk.wk), gseg(blk.bk));
  Matrix<double> da_v = kernels::linear_backward(bc.a, seg(blk.wv), dv, gseg(blk.wv), gseg(blk.bv));
  for (std::size_t i = 0; i < da.flat().size(); ++i) da.flat()[i] += da_k.flat()[i] + da_v.flat()[i];
  return da;
}

template <typename T>
void backward(const ForwardCache<T>& cache, const EncoderParams<T>& params, const EncoderConfig& cfg,
              std::span<const double> upstream, std::span<double> grad) {
  const ParamLayout L(cfg);
  auto seg = [&](std::size_t i) { return params.segment(L[i]); };
  auto gseg = [&](std::size_t i) { return grad.subspan(L[i].offset, L[i].size()); };
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t n = cache.h.rows();

  Matrix<double> dz(1, upstream.size());
  for (std::size_t c = 0; c < upstream.size(); ++c) dz(0, c) = upstream[c];
  Matrix<double> dpooled = kernels::linear_backward(cache.pooled, seg(L.out_w), dz, gseg(L.out_w), gseg(L.out_b));

  const std::size_t heads = static_cast<std::size_t>(cfg.pool_heads);
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix<double> dpq(1, d), dpk(n, d), dpv(n, d);
  std::vector<double> dp(n);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto& p = cache.pool_probs[h];
    double dot = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < dh; ++c) {
        s += dpooled(0, h * dh + c) * static_cast<double>(cache.pv(j, h * dh + c));
        dpv(j, h * dh + c) += p[j] * dpooled(0, h * dh + c);
      }
      dp[j] = s;
      dot += p[j] * s;
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double ds = p[j] * (dp[j] - dot) * scale;
      for (std::size_t c = 0; c < dh; ++c) {
        dpq(0, h * dh + c) += ds * static_cast<double>(cache.pk(j, h * dh + c));
        dpk(j, h * dh + c) += ds * static_cast<double>(cache.pq(0, h * dh + c));
      }
    }
  }
  Matrix<double> dmean = kernels::linear_backward(cache.mean, seg(L.pool_wq), dpq, gseg(L.pool_wq), gseg(L.pool_bq));
  Matrix<double> dh_tok = kernels::linear_backward(cache.h, seg(L.pool_wk), dpk, gseg(L.pool_wk), gseg(L.pool_bk));
  Matrix<double> dh_v = kernels::linear_backward(cache.h, seg(L.pool_wv), dpv, gseg(L.pool_wv), gseg(L.pool_bv));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) dh_tok(i, c) += dh_v(i, c) + dmean(0, c) / static_cast<double>(n);
  }

  Matrix<double> dx = kernels::layer_norm_backward(cache.lnf, seg(L.lnf_gamma), dh_tok, gseg(L.lnf_gamma), gseg(L.lnf_beta));

  for (std::size_t l = L.blocks.size(); l-- > 0;) {
    const auto& blk = L.blocks[l];
    const auto& bc = cache.blocks[l];
    // x_out = x_mid + W2 gelu(W1 ln2(x_mid))
    Matrix<double> dg = kernels::linear_backward(bc.g, seg(blk.w2), dx, gseg(blk.w2), gseg(blk.b2));
    for (std::size_t i = 0; i < dg.flat().size(); ++i) dg.flat()[i] *= kernels::gelu_grad(bc.u.flat()[i]);
    Matrix<double> db = kernels::linear_backward(bc.b, seg(blk.w1), dg, gseg(blk.w1), gseg(blk.b1));
    Matrix<double> dmid = kernels::layer_norm_backward(bc.ln2, seg(blk.ln2_gamma), db, gseg(blk.ln2_gamma), gseg(blk.ln2_beta));
    for (std::size_t i = 0; i < dmid.flat().size(); ++i) dmid.flat()[i] += dx.flat()[i];
    // x_mid = x_in + attn(ln1(x_in))
    Matrix<double> da = windowed_attention_backward(bc, params, L, blk, cache.tokens, cfg.layer_heads, dmid, grad);
    Matrix<double> din = kernels::layer_norm_backward(bc.ln1, seg(blk.ln1_gamma), da, gseg(blk.ln1_gamma), gseg(blk.ln1_beta));
    for (std::size_t i = 0; i < din.flat().size(); ++i) din.flat()[i] += dmid.flat()[i];
    dx = std::move(din);
  }

  auto gpos = gseg(L.pos);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t slot = cache.tokens.pos_slot[i];
    for (std::size_t c = 0; c < d; ++c) gpos[slot * d + c] += dx(i, c);
  }
  kernels::linear_backward(cache.feats, seg(L.in_w), dx, gseg(L.in_w), gseg(L.in_b));
}

}  // namespace detail

/// Encodes a voxel grid into a d_out-dimensional lidar embedding.
template <typename T>
std::vector<T> encode(const VoxelGrid& grid, const EncoderParams<T>& params, const EncoderConfig& cfg) {
  detail::ForwardCache<T> cache;
  return detail::forward(grid, params, cfg, cache);
}

struct EncodeWithGrad {
  std::vector<double> embedding;
  std::vector<double> grad;
};

/// Gradient of dot(upstream, encode(grid)) with respect to every parameter.
template <typename T>
std::vector<double> encoder_grad(const VoxelGrid& grid, const EncoderParams<T>& params, const EncoderConfig& cfg,
                                 std::span<const double> upstream) {
  if (upstream.size() != static_cast<std::size_t>(cfg.d_out)) {
    fail(ErrorCode::kDimensionMismatch, "upstream gradient must have d_out entries");
  }
  detail::ForwardCache<T> cache;
  detail::forward(grid, params, cfg, cache);
  std::vector<double> grad(params.values.size(), 0.0);
  detail::backward(cache, params, cfg, upstream, grad);
  return grad;
}

/// Forward pass plus a backward pass whose upstream gradient is computed
/// from the embedding by `loss_grad` (used by the training loop).
template <typename T, typename LossGrad>
EncodeWithGrad encode_and_grad(const VoxelGrid& grid, const EncoderParams<T>& params, const EncoderConfig& cfg,
                               LossGrad&& loss_grad) {
  detail::ForwardCache<T> cache;
  auto z = detail::forward(grid, params, cfg, cache);
  EncodeWithGrad out;
  out.embedding.assign(z.begin(), z.end());
  std::vector<double> upstream = loss_grad(std::span<const double>(out.embedding));
  out.grad.assign(params.values.size(), 0.0);
  detail::backward(cache, params, cfg, upstream, out.grad);
  return out;
}

// ---------------------------------------------------------------------------
// LCWT checkpoints: "LCWT", u16 version, u64 config digest, u64 count, f32[count].
// The config itself is stored as JSON next to the checkpoint.

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const EncoderParams<float>& params, const EncoderConfig& cfg) {
  if (params.values.size() != parameter_count(cfg)) {
    fail(ErrorCode::kDimensionMismatch, "parameter count does not match config");
  }
  io::ByteWriter w;
  w.magic("LCWT");
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint64_t>(config_digest(cfg));
  w.put<std::uint64_t>(params.values.size());
  w.floats(params.values);
  return w.bytes();
}

inline EncoderParams<float> decode_checkpoint(std::span<const std::uint8_t> bytes, const EncoderConfig& cfg) {
  io::ByteReader r(bytes);
  r.expect_magic("LCWT");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) fail(ErrorCode::kUnsupportedVersion, "unsupported LCWT version " + std::to_string(version));
  const auto digest = r.get<std::uint64_t>();
  if (digest != config_digest(cfg)) fail(ErrorCode::kFormat, "checkpoint was written for a different encoder config");
  const auto count = r.get<std::uint64_t>();
  if (count != parameter_count(cfg)) fail(ErrorCode::kFormat, "checkpoint parameter count does not match config");
  if (count > r.remaining() / sizeof(float)) fail(ErrorCode::kTruncated, "checkpoint shorter than its declared count");
  EncoderParams<float> params{std::vector<float>(count)};
  r.floats(params.values);
  if (!kernels::all_finite<float>(params.values)) fail(ErrorCode::kFormat, "checkpoint contains non-finite values");
  return params;
}

inline void write_checkpoint(const std::string& path, const EncoderParams<float>& params, const EncoderConfig& cfg) {
  io::write_file_bytes(path, encode_checkpoint(params, cfg));
  const std::string js = to_json(cfg).dump(2) + "\n";
  io::write_file_bytes(path + ".json", {reinterpret_cast<const std::uint8_t*>(js.data()), js.size()});
}

inline EncoderConfig read_encoder_config(const std::string& path) {
  try {
    return encoder_config_from_json(nlohmann::json::parse(io::read_text_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kFormat, std::string("encoder config is not valid JSON: ") + e.what());
  }
}

struct Checkpoint {
  EncoderConfig config;
  EncoderParams<float> params;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  Checkpoint ck;
  ck.config = read_encoder_config(path + ".json");
  ck.params = decode_checkpoint(io::read_file_bytes(path), ck.config);
  return ck;
}

}  // namespace lidarclip
