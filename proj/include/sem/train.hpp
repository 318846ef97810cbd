// Copyright 2026 The SEM Toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Matryoshka SAE trainer: reconstruction loss summed over nested TopK
// granularities with reverse weighting, AdamW updates and a
// constant-then-linear-decay learning rate.

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sem/common.hpp"
#include "sem/sae.hpp"

namespace sem {

struct TrainConfig {
  Index latent_dim = 64;
  std::vector<Index> granularities{16, 32};
  // Empty means "derive": weights proportional to 1/g, normalized.
  std::vector<double> reverse_weights;
  double learning_rate = 1e-4;
  Index batch_size = 2048;
  long total_steps = 1000;
  double warm_fraction = 0.8;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double validation_fraction = 0.1;
  long validate_every = 100;
  std::uint64_t seed = 0;
  SaeInitOptions init;

  // Fills reverse_weights if empty and checks every invariant.
  void resolve() {
    detail::require(!granularities.empty(), "train config: no granularities");
    for (std::size_t i = 0; i < granularities.size(); ++i) {
      detail::require(granularities[i] >= 1, "train config: granularity must be >= 1");
      detail::require(granularities[i] <= latent_dim,
                      "train config: granularity " + std::to_string(granularities[i]) +
                          " exceeds latent_dim " + std::to_string(latent_dim));
      if (i > 0) {
        detail::require(granularities[i] > granularities[i - 1],
                        "train config: granularities must be strictly increasing");
      }
    }
    if (reverse_weights.empty()) reverse_weights = inverse_granularity_weights(granularities);
    detail::require(reverse_weights.size() == granularities.size(),
                    "train config: one reverse weight per granularity");
    double sum = 0.0;
    for (double w : reverse_weights) {
      detail::require(w > 0.0, "train config: reverse weights must be positive");
      sum += w;
    }
    detail::require(std::abs(sum - 1.0) <= 1e-9, "train config: reverse weights must sum to 1");
    detail::require(learning_rate >= 0.0, "train config: negative learning rate");
    detail::require(batch_size >= 1, "train config: batch_size must be >= 1");
    detail::require(total_steps >= 1, "train config: total_steps must be >= 1");
    detail::require(warm_fraction >= 0.0 && warm_fraction <= 1.0,
                    "train config: warm_fraction outside [0,1]");
    detail::require(validation_fraction >= 0.0 && validation_fraction < 1.0,
                    "train config: validation_fraction outside [0,1)");
  }

  static std::vector<double> inverse_granularity_weights(const std::vector<Index>& gs) {
    std::vector<double> w;
    double sum = 0.0;
    for (Index g : gs) {
      w.push_back(1.0 / static_cast<double>(g));
      sum += w.back();
    }
    for (double& x : w) x /= sum;
    return w;
  }
};

// Same layout as SaeWeights; used for gradients and optimizer moments.
struct SaeTensors {
  Matrix encoder;
  Matrix decoder;
  Vector centering_bias;

  static SaeTensors zeros_like(const SaeWeights& w) {
    return {Matrix::Zero(w.encoder.rows(), w.encoder.cols()),
            Matrix::Zero(w.decoder.rows(), w.decoder.cols()),
            Vector::Zero(w.centering_bias.size())};
  }
  bool all_finite() const {
    return encoder.allFinite() && decoder.allFinite() && centering_bias.allFinite();
  }
};

struct LossResult {
  double loss = 0.0;
  std::vector<double> mse_per_granularity;
  // Largest nonzero count observed in any latent at each granularity.
  std::vector<Index> max_active;
  SaeTensors gradients;
};

// Loss and gradients with respect to W_e, W_d and b_pre. Gradients pass only
// through the TopK-selected support at each granularity.
inline LossResult matryoshka_loss(const RowMatrix& batch, const SaeWeights& w,
                                  const TrainConfig& cfg, bool want_gradients = true) {
  detail::require(batch.rows() > 0, "matryoshka_loss: empty batch");
  detail::require_dim(batch.cols(), w.input_dim(), "matryoshka_loss: embedding width");
  detail::require(!cfg.granularities.empty() &&
                      cfg.reverse_weights.size() == cfg.granularities.size(),
                  "matryoshka_loss: unresolved config");
  const Index kmax = cfg.granularities.back();
  detail::require(kmax <= w.latent_dim(), "matryoshka_loss: granularity " +
                                              std::to_string(kmax) + " exceeds latent_dim");

  const Index n = batch.rows();
  const Index d = w.input_dim();
  const Index s = w.latent_dim();
  const RowMatrix x = batch.rowwise() - w.centering_bias.transpose();
  const RowMatrix pre = x * w.encoder.transpose();

  // Row-wise TopK order once at the largest granularity; prefixes give the
  // nested supports.
  std::vector<std::vector<Index>> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    order[static_cast<std::size_t>(i)] = topk_indices(pre.row(i).transpose().cwiseMax(0.0), kmax);
  }

  LossResult out;
  out.gradients = SaeTensors::zeros_like(w);
  RowMatrix grad_latent = RowMatrix::Zero(n, s);
  const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(d));

  for (std::size_t gi = 0; gi < cfg.granularities.size(); ++gi) {
    const Index g = cfg.granularities[gi];
    RowMatrix latent = RowMatrix::Zero(n, s);
    RowMatrix mask = RowMatrix::Zero(n, s);
    Index max_active = 0;
    for (Index i = 0; i < n; ++i) {
      Index active = 0;
      const auto& ord = order[static_cast<std::size_t>(i)];
      for (Index r = 0; r < g; ++r) {
        const Index j = ord[static_cast<std::size_t>(r)];
        if (pre(i, j) > 0.0) {
          latent(i, j) = pre(i, j);
          mask(i, j) = 1.0;
          ++active;
        }
      }
      max_active = std::max(max_active, active);
    }
    RowMatrix residual = latent * w.decoder.transpose();
    residual.rowwise() += w.centering_bias.transpose();
    residual -= batch;
    const double mse = residual.squaredNorm() * scale;
    const double rw = cfg.reverse_weights[gi];
    out.loss += rw * mse;
    out.mse_per_granularity.push_back(mse);
    out.max_active.push_back(max_active);

    if (want_gradients) {
      const RowMatrix d_rec = (2.0 * rw * scale) * residual;
      out.gradients.decoder.noalias() += d_rec.transpose() * latent;
      out.gradients.centering_bias += d_rec.colwise().sum().transpose();
      grad_latent += (d_rec * w.decoder).cwiseProduct(mask);
    }
  }
  if (want_gradients) {
    out.gradients.encoder.noalias() += grad_latent.transpose() * x;
    out.gradients.centering_bias -= (grad_latent * w.encoder).colwise().sum().transpose();
  }
  return out;
}

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

// One decoupled-weight-decay Adam update on a flat tensor. `step` is the
// 1-based step number used for bias correction.
inline void adamw_update(std::span<double> param, std::span<const double> grad,
                         std::span<double> m, std::span<double> v, long step,
                         const AdamWParams& p, double lr) {
  detail::require(param.size() == grad.size() && m.size() == grad.size() &&
                      v.size() == grad.size(),
                  "adamw_update: shape mismatch");
  detail::require(step >= 1, "adamw_update: step must be >= 1");
  detail::require(lr >= 0.0, "adamw_update: negative learning rate");
  const double bc1 = 1.0 - std::pow(p.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(p.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    if (!std::isfinite(grad[i])) throw NumericError("adamw_update: non-finite gradient");
    param[i] -= lr * p.weight_decay * param[i];
    m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * grad[i];
    v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + p.epsilon);
  }
}

struct OptimizerState {
  SaeTensors first_moment;
  SaeTensors second_moment;
  long step = 0;

  static OptimizerState for_weights(const SaeWeights& w) {
    return {SaeTensors::zeros_like(w), SaeTensors::zeros_like(w), 0};
  }
};

namespace train_detail {
template <typename M>
std::span<double> flat(M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename M>
std::span<const double> flat_c(const M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
}  // namespace train_detail

// Weight decay applies to the encoder and decoder matrices, not b_pre.
inline void adamw_step(SaeWeights& w, const SaeTensors& grads, OptimizerState& state,
                       const TrainConfig& cfg, double lr) {
  using train_detail::flat;
  using train_detail::flat_c;
  detail::require(grads.encoder.rows() == w.encoder.rows() &&
                      grads.encoder.cols() == w.encoder.cols() &&
                      grads.decoder.rows() == w.decoder.rows() &&
                      grads.decoder.cols() == w.decoder.cols() &&
                      grads.centering_bias.size() == w.centering_bias.size(),
                  "adamw_step: gradient shapes do not match weights");
  if (!grads.all_finite()) throw NumericError("adamw_step: non-finite gradients");
  const long step = state.step + 1;
  AdamWParams p{cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay};
  adamw_update(flat(w.encoder), flat_c(grads.encoder), flat(state.first_moment.encoder),
               flat(state.second_moment.encoder), step, p, lr);
  adamw_update(flat(w.decoder), flat_c(grads.decoder), flat(state.first_moment.decoder),
               flat(state.second_moment.decoder), step, p, lr);
  p.weight_decay = 0.0;
  adamw_update(flat(w.centering_bias), flat_c(grads.centering_bias),
               flat(state.first_moment.centering_bias), flat(state.second_moment.centering_bias),
               step, p, lr);
  state.step = step;
}

// Constant base rate for the warm fraction of training, then linear to zero.
inline double lr_schedule(long step, const TrainConfig& cfg) {
  detail::require(step >= 0 && step <= cfg.total_steps, "lr_schedule: step out of range");
  const double total = static_cast<double>(cfg.total_steps);
  const double warm = cfg.warm_fraction * total;
  const double t = static_cast<double>(step);
  if (t < warm) return cfg.learning_rate;
  const double decay_len = total - warm;
  if (decay_len <= 0.0) return step >= cfg.total_steps ? 0.0 : cfg.learning_rate;
  return cfg.learning_rate * std::max(0.0, (total - t) / decay_len);
}

struct TrainLogRecord {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::vector<Index> max_active;
  std::optional<std::vector<double>> val_mse;
};

struct TrainResult {
  SaeWeights weights;
  std::vector<TrainLogRecord> log;
  std::vector<Index> train_rows;
  std::vector<Index> validation_rows;
};

// Mean squared reconstruction error per granularity over `rows`.
inline std::vector<double> validation_mse(const RowMatrix& rows, const SaeWeights& w,
                                          const TrainConfig& cfg) {
  if (rows.rows() == 0) return {};
  return matryoshka_loss(rows, w, cfg, false).mse_per_granularity;
}

// Deterministic for a fixed seed: one RNG drives the split, the initializer
// and every epoch shuffle.
inline TrainResult train_msae(const RowMatrix& corpus, TrainConfig cfg,
                              const std::function<void(const TrainLogRecord&)>& on_step = {}) {
  cfg.resolve();
  detail::require(corpus.rows() > 0, "train_msae: empty corpus");
  if (!corpus.allFinite()) throw NumericError("train_msae: non-finite corpus values");

  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> perm(static_cast<std::size_t>(corpus.rows()));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);

  Index n_val = 0;
  if (corpus.rows() >= 2) {
    n_val = static_cast<Index>(std::llround(cfg.validation_fraction *
                                            static_cast<double>(corpus.rows())));
    n_val = std::clamp<Index>(n_val, cfg.validation_fraction > 0.0 ? 1 : 0, corpus.rows() - 1);
  }
  TrainResult result;
  result.train_rows.assign(perm.begin(), perm.end() - n_val);
  result.validation_rows.assign(perm.end() - n_val, perm.end());
  std::sort(result.train_rows.begin(), result.train_rows.end());
  std::sort(result.validation_rows.begin(), result.validation_rows.end());

  const RowMatrix train = corpus(result.train_rows, Eigen::all);
  const RowMatrix val = corpus(result.validation_rows, Eigen::all);

  SaeWeights w = init_sae(corpus.cols(), cfg.latent_dim, rng(), train, cfg.init);
  OptimizerState state = OptimizerState::for_weights(w);
  const Index batch = std::min<Index>(cfg.batch_size, train.rows());

  std::vector<Index> order(static_cast<std::size_t>(train.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::vector<Index> batch_idx(static_cast<std::size_t>(batch));

  for (long step = 0; step < cfg.total_steps; ++step) {
    for (auto& b : batch_idx) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      b = order[cursor++];
    }
    const RowMatrix xb = train(batch_idx, Eigen::all);
    LossResult lr_out = matryoshka_loss(xb, w, cfg);
    if (!std::isfinite(lr_out.loss)) {
      throw NumericError("train_msae: non-finite loss at step " + std::to_string(step));
    }
    const double lr = lr_schedule(step, cfg);
    adamw_step(w, lr_out.gradients, state, cfg, lr);

    TrainLogRecord rec;
    rec.step = step;
    rec.lr = lr;
    rec.loss = lr_out.loss;
    rec.max_active = lr_out.max_active;
    const bool last = step + 1 == cfg.total_steps;
    if (val.rows() > 0 && cfg.validate_every > 0 &&
        (last || (step + 1) % cfg.validate_every == 0)) {
      rec.val_mse = validation_mse(val, w, cfg);
    }
    if (on_step) on_step(rec);
    result.log.push_back(std::move(rec));
  }
  w.validate();
  result.weights = std::move(w);
  return result;
}

}  // namespace sem
