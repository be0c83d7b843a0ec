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

// Training the lidar encoder to reproduce frozen image embeddings.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "lidarclip/encoder.hpp"
#include "lidarclip/error.hpp"

namespace lidarclip {

struct LossValue {
  double loss = 0;
  std::vector<double> grad;  // d loss / d z_lidar
};

/// (1/d) * ||z_image - z_lidar||^2
template <typename A, typename B>
LossValue loss_mse(std::span<const A> z_image, std::span<const B> z_lidar) {
  if (z_image.size() != z_lidar.size() || z_image.empty()) {
    fail(ErrorCode::kDimensionMismatch, "loss_mse: embedding dimensions differ");
  }
  const double d = static_cast<double>(z_image.size());
  LossValue out;
  out.grad.resize(z_image.size());
  for (std::size_t i = 0; i < z_image.size(); ++i) {
    const double diff = static_cast<double>(z_lidar[i]) - static_cast<double>(z_image[i]);
    out.loss += diff * diff;
    out.grad[i] = 2.0 * diff / d;
  }
  out.loss /= d;
  return out;
}

inline constexpr double kNormEps = 1e-12;

/// Negative cosine similarity.
template <typename A, typename B>
LossValue loss_cosine(std::span<const A> z_image, std::span<const B> z_lidar) {
  if (z_image.size() != z_lidar.size() || z_image.empty()) {
    fail(ErrorCode::kDimensionMismatch, "loss_cosine: embedding dimensions differ");
  }
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < z_image.size(); ++i) {
    const double a = z_image[i], b = z_lidar[i];
    ab += a * b;
    aa += a * a;
    bb += b * b;
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (!(na > kNormEps) || !(nb > kNormEps)) fail(ErrorCode::kDegenerateEmbedding, "loss_cosine: near-zero embedding norm");
  LossValue out;
  const double cos = ab / (na * nb);
  out.loss = -cos;
  out.grad.resize(z_image.size());
  for (std::size_t i = 0; i < z_image.size(); ++i) {
    out.grad[i] = -(static_cast<double>(z_image[i]) / (na * nb) - cos * static_cast<double>(z_lidar[i]) / bb);
  }
  return out;
}

enum class LossKind { kMse, kCosine };

inline std::string_view to_string(LossKind k) { return k == LossKind::kMse ? "mse" : "cosine"; }

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "mse") return LossKind::kMse;
  if (s == "cosine") return LossKind::kCosine;
  fail(ErrorCode::kInvalidArgument, "unknown loss kind '" + std::string(s) + "' (expected mse or cosine)");
}

template <typename A, typename B>
LossValue compute_loss(LossKind kind, std::span<const A> z_image, std::span<const B> z_lidar) {
  return kind == LossKind::kMse ? loss_mse(z_image, z_lidar) : loss_cosine(z_image, z_lidar);
}

struct TrainConfig {
  double base_lr = 1e-5;
  double max_lr = 1e-3;
  double warmup_frac = 0.1;
  double final_lr = 1e-7;
  long total_steps = 1;
  std::size_t batch_size = 16;
  LossKind loss = LossKind::kMse;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    if (!(base_lr > 0) || !(base_lr <= max_lr)) fail(ErrorCode::kInvalidArgument, "need 0 < base_lr <= max_lr");
    if (!(warmup_frac > 0 && warmup_frac < 1)) fail(ErrorCode::kInvalidArgument, "need 0 < warmup_frac < 1");
    if (!(final_lr >= 0)) fail(ErrorCode::kInvalidArgument, "final_lr must be non-negative");
    if (total_steps < 0) fail(ErrorCode::kInvalidArgument, "total_steps must be non-negative");
    if (batch_size == 0) fail(ErrorCode::kInvalidArgument, "batch_size must be positive");
  }

  /// Number of steps spent ramping up; the peak is reached at this step.
  long warmup_steps() const {
    if (total_steps <= 1) return 0;
    const long w = std::lround(warmup_frac * static_cast<double>(total_steps));
    return std::clamp(w, 1L, total_steps - 1);
  }
};

/// Linear ramp base_lr -> max_lr over the warm-up, then cosine annealing
/// max_lr -> final_lr, landing on final_lr at the last step.
inline double one_cycle_lr(long step, const TrainConfig& cfg) {
  if (step < 0 || step >= cfg.total_steps) {
    fail(ErrorCode::kInvalidArgument, "one_cycle_lr: step " + std::to_string(step) + " outside [0, " +
                                          std::to_string(cfg.total_steps) + ")");
  }
  const long warm = cfg.warmup_steps();
  if (warm == 0) return cfg.base_lr;
  if (step <= warm) {
    return cfg.base_lr + (cfg.max_lr - cfg.base_lr) * static_cast<double>(step) / static_cast<double>(warm);
  }
  const double progress = static_cast<double>(step - warm) / static_cast<double>(cfg.total_steps - 1 - warm);
  return cfg.final_lr + (cfg.max_lr - cfg.final_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long t = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update. `step` is only used to label errors.
template <typename T>
void adam_step(std::span<T> params, std::span<const double> grads, AdamState& state, double lr, const TrainConfig& cfg,
               long step = -1) {
  if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    fail(ErrorCode::kDimensionMismatch, "adam_step: parameter, gradient and state lengths differ");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError("non-finite gradient at parameter " + std::to_string(i) + " (step " + std::to_string(step) + ")",
                         -1, step);
    }
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainPair {
  VoxelGrid grid;
  std::vector<float> target;  // image embedding
};

/// Indices into the training set making up one step's batch.
struct PairBatch {
  std::vector<std::size_t> items;
};

struct StepRecord {
  long step = 0;
  double lr = 0;
  double loss = 0;  // batch-mean loss before the update
};

/// Reshuffles the pair indices every epoch with a seeded generator and hands
/// out consecutive slices of batch_size.
class EpochBatcher {
 public:
  EpochBatcher(std::size_t n_pairs, std::size_t batch_size, std::uint64_t seed)
      : order_(n_pairs), batch_(std::min(batch_size, n_pairs)), rng_(seed) {
    if (n_pairs == 0) fail(ErrorCode::kEmptyInput, "training set is empty");
    reshuffle();
  }

  PairBatch next() {
    PairBatch b;
    while (b.items.size() < batch_) {
      if (cursor_ == order_.size()) reshuffle();
      b.items.push_back(order_[cursor_++]);
    }
    return b;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::mt19937_64 rng_;
  std::size_t cursor_ = 0;
};

struct BatchGradient {
  double loss = 0;
  std::vector<double> grad;
};

/// Mean loss and parameter gradient over the batch. Items may be evaluated
/// on several threads; the reduction always runs in item order.
template <typename T>
BatchGradient batch_gradient(std::span<const TrainPair> pairs, const PairBatch& batch, const EncoderParams<T>& params,
                             const EncoderConfig& enc, LossKind kind, unsigned threads = 1) {
  if (batch.items.empty()) fail(ErrorCode::kEmptyInput, "empty batch");
  const std::size_t n = batch.items.size();
  std::vector<EncodeWithGrad> per_item(n);
  std::vector<double> losses(n);
  auto work = [&](std::size_t i) {
    const TrainPair& pair = pairs[batch.items[i]];
    if (pair.target.size() != static_cast<std::size_t>(enc.d_out)) {
      fail(ErrorCode::kDimensionMismatch, "training target dimension differs from d_out");
    }
    per_item[i] = encode_and_grad(pair.grid, params, enc, [&](std::span<const double> z) {
      LossValue lv = compute_loss(kind, std::span<const float>(pair.target), z);
      losses[i] = lv.loss;
      return lv.grad;
    });
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  BatchGradient out;
  out.grad.assign(params.values.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    out.loss += losses[i];
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += per_item[i].grad[k];
  }
  const double inv = 1.0 / static_cast<double>(n);
  out.loss *= inv;
  for (double& g : out.grad) g *= inv;
  return out;
}

/// Runs cfg.total_steps optimizer steps. `next_batch` is called once per
/// step; `on_step` (optional) sees every record as it is produced.
template <typename T>
std::vector<StepRecord> train(std::span<const TrainPair> pairs, const std::function<PairBatch(long)>& next_batch,
                              EncoderParams<T>& params, const EncoderConfig& enc, const TrainConfig& cfg,
                              const std::function<void(const StepRecord&)>& on_step = {}) {
  cfg.validate();
  std::vector<StepRecord> history;
  if (cfg.total_steps == 0) return history;
  AdamState state(params.values.size());
  history.reserve(static_cast<std::size_t>(cfg.total_steps));
  for (long step = 0; step < cfg.total_steps; ++step) {
    BatchGradient bg;
    try {
      bg = batch_gradient(pairs, next_batch(step), params, enc, cfg.loss, cfg.threads);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at training step " + std::to_string(step), e.layer(), step);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kDegenerateEmbedding) throw;
      throw NumericError(std::string(e.what()) + " at training step " + std::to_string(step), -1, step);
    }
    if (!std::isfinite(bg.loss)) throw NumericError("non-finite loss at training step " + std::to_string(step), -1, step);
    const double lr = one_cycle_lr(step, cfg);
    StepRecord rec{step, lr, bg.loss};
    adam_step(std::span<T>(params.values), std::span<const double>(bg.grad), state, lr, cfg, step);
    history.push_back(rec);
    if (on_step) on_step(rec);
  }
  return history;
}

/// Convenience overload: epoch-shuffled batches seeded from cfg.seed.
template <typename T>
std::vector<StepRecord> train(std::span<const TrainPair> pairs, EncoderParams<T>& params, const EncoderConfig& enc,
                              const TrainConfig& cfg, const std::function<void(const StepRecord&)>& on_step = {}) {
  if (cfg.total_steps == 0) return {};
  EpochBatcher batcher(pairs.size(), cfg.batch_size, cfg.seed);
  return train<T>(pairs, [&](long) { return batcher.next(); }, params, enc, cfg, on_step);
}

inline nlohmann::json to_json(const StepRecord& r) { return {{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}}; }

}  // namespace lidarclip
