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

// Linear probes (multinomial logistic regression fitted with L-BFGS) and
// the two-stage disentanglement study:
//
//   D = 1 - (acc_{b<-p} - chance_b) / (acc_b - chance_b)

#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sem/common.hpp"

namespace sem {

// Per-feature standardization; zero-variance features keep std = 1.
struct Standardizer {
  Vector mean;
  Vector stddev;
  std::vector<bool> constant;

  static Standardizer fit(const RowMatrix& x) {
    detail::require(x.rows() > 0, "standardizer: empty input");
    Standardizer s;
    s.mean = x.colwise().mean().transpose();
    s.stddev.resize(x.cols());
    s.constant.assign(static_cast<std::size_t>(x.cols()), false);
    for (Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - s.mean[j]).square().mean();
      if (var <= 1e-24 * std::max(1.0, s.mean[j] * s.mean[j])) {
        s.stddev[j] = 1.0;
        s.constant[static_cast<std::size_t>(j)] = true;
      } else {
        s.stddev[j] = std::sqrt(var);
      }
    }
    return s;
  }

  RowMatrix apply(const RowMatrix& x) const {
    detail::require_dim(x.cols(), mean.size(), "standardizer: feature width");
    RowMatrix out = x.rowwise() - mean.transpose();
    out.array().rowwise() /= stddev.transpose().array();
    return out;
  }
};

struct ProbeConfig {
  int max_iterations = 1000;
  double gradient_tolerance = 1e-6;
  double l2 = 0.0;
  int history = 10;
};

struct ProbeModel {
  Matrix weights;  // classes x features
  Vector bias;     // classes
  Standardizer scaler;
  double final_loss = 0.0;
  int iterations = 0;
  bool converged = false;

  Index n_classes() const { return weights.rows(); }

  RowMatrix logits(const RowMatrix& x) const {
    RowMatrix z = scaler.apply(x) * weights.transpose();
    z.rowwise() += bias.transpose();
    return z;
  }

  std::vector<int> predict(const RowMatrix& x) const {
    const RowMatrix z = logits(x);
    std::vector<int> out(static_cast<std::size_t>(z.rows()));
    for (Index i = 0; i < z.rows(); ++i) {
      Index best = 0;
      for (Index c = 1; c < z.cols(); ++c)
        if (z(i, c) > z(i, best)) best = c;
      out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
  }

  double accuracy(const RowMatrix& x, std::span<const int> labels) const {
    const auto pred = predict(x);
    detail::require(pred.size() == labels.size(), "probe accuracy: label count");
    Index hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
  }
};

// Mean multinomial cross-entropy (+ optional L2 on the weights) of
// standardized features; parameters packed as [W row-major | b].
class SoftmaxObjective {
 public:
  SoftmaxObjective(const RowMatrix& x, std::span<const int> labels, Index n_classes, double l2)
      : x_(x), k_(n_classes), l2_(l2), onehot_(RowMatrix::Zero(x.rows(), n_classes)) {
    for (std::size_t i = 0; i < labels.size(); ++i) onehot_(static_cast<Index>(i), labels[i]) = 1.0;
  }

  Index dim() const { return k_ * x_.cols() + k_; }

  double operator()(const Vector& theta, Vector& grad) const {
    const Index f = x_.cols();
    const Index n = x_.rows();
    Eigen::Map<const RowMatrix> w(theta.data(), k_, f);
    Eigen::Map<const Vector> b(theta.data() + k_ * f, k_);
    RowMatrix z = x_ * w.transpose();
    z.rowwise() += b.transpose();
    double loss = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double m = z.row(i).maxCoeff();
      z.row(i).array() -= m;
      const double lse = std::log(z.row(i).array().exp().sum());
      loss -= (onehot_.row(i).array() * (z.row(i).array() - lse)).sum();
      z.row(i) = (z.row(i).array() - lse).exp().matrix();  // softmax
    }
    loss /= static_cast<double>(n);
    const RowMatrix diff = (z - onehot_) / static_cast<double>(n);
    grad.resize(dim());
    Eigen::Map<RowMatrix> gw(grad.data(), k_, f);
    gw = diff.transpose() * x_;
    grad.tail(k_) = diff.colwise().sum().transpose();
    if (l2_ > 0.0) {
      loss += 0.5 * l2_ * w.squaredNorm();
      gw += l2_ * w;
    }
    return loss;
  }

 private:
  const RowMatrix& x_;
  Index k_;
  double l2_;
  RowMatrix onehot_;
};

struct LbfgsResult {
  Vector theta;
  double loss = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Limited-memory BFGS with a backtracking Armijo line search. Stops when
// the max-norm of the gradient drops to `tolerance` or at the iteration cap.
template <typename Objective>
LbfgsResult minimize_lbfgs(const Objective& f, Vector theta, int max_iterations, double tolerance,
                           int history = 10) {
  Vector g;
  double fx = f(theta, g);
  std::deque<std::pair<Vector, Vector>> mem;  // (s, y)
  LbfgsResult r;
  int it = 0;
  for (; it < max_iterations; ++it) {
    if (g.lpNorm<Eigen::Infinity>() <= tolerance) {
      r.converged = true;
      break;
    }
    // Two-loop recursion.
    Vector q = g;
    std::vector<double> alpha(mem.size());
    for (std::size_t i = mem.size(); i-- > 0;) {
      const auto& [s, y] = mem[i];
      alpha[i] = s.dot(q) / y.dot(s);
      q -= alpha[i] * y;
    }
    if (!mem.empty()) {
      const auto& [s, y] = mem.back();
      q *= s.dot(y) / y.squaredNorm();
    } else {
      q /= std::max(1.0, g.norm());
    }
    for (std::size_t i = 0; i < mem.size(); ++i) {
      const auto& [s, y] = mem[i];
      const double beta = y.dot(q) / y.dot(s);
      q += s * (alpha[i] - beta);
    }
    Vector dir = -q;
    double slope = g.dot(dir);
    if (slope >= 0.0) {  // not a descent direction; restart from steepest descent
      mem.clear();
      dir = -g / std::max(1.0, g.norm());
      slope = g.dot(dir);
    }
    double step = 1.0;
    Vector next;
    Vector g_next;
    double f_next = fx;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      next = theta + step * dir;
      f_next = f(next, g_next);
      if (std::isfinite(f_next) && f_next <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    Vector s = next - theta;
    Vector y = g_next - g;
    if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
      mem.emplace_back(std::move(s), std::move(y));
      if (static_cast<int>(mem.size()) > history) mem.pop_front();
    }
    const double decrease = fx - f_next;
    theta = std::move(next);
    g = std::move(g_next);
    fx = f_next;
    if (decrease <= 1e-16 * std::max(1.0, std::abs(fx)) &&
        g.lpNorm<Eigen::Infinity>() <= std::sqrt(tolerance)) {
      r.converged = true;
      ++it;
      break;
    }
  }
  r.theta = std::move(theta);
  r.loss = fx;
  r.iterations = it;
  if (!r.converged && g.lpNorm<Eigen::Infinity>() <= tolerance) r.converged = true;
  return r;
}

inline int count_classes(std::span<const int> labels) {
  int k = 0;
  for (int y : labels) {
    detail::require(y >= 0, "labels must be nonnegative class indices");
    k = std::max(k, y + 1);
  }
  return k;
}

// Multinomial logistic regression on internally standardized features.
inline ProbeModel train_logistic_probe(const RowMatrix& features, std::span<const int> labels,
                                       const ProbeConfig& cfg = {}, int n_classes = 0) {
  detail::require(features.rows() > 0, "train_logistic_probe: empty input");
  detail::require(static_cast<std::size_t>(features.rows()) == labels.size(),
                  "train_logistic_probe: label count differs from rows");
  if (!features.allFinite()) throw NumericError("train_logistic_probe: non-finite features");
  n_classes = std::max(n_classes, count_classes(labels));
  {
    std::vector<int> seen(labels.begin(), labels.end());
    std::sort(seen.begin(), seen.end());
    detail::require(std::unique(seen.begin(), seen.end()) - seen.begin() >= 2,
                    "train_logistic_probe: needs at least two classes present");
  }
  ProbeModel model;
  model.scaler = Standardizer::fit(features);
  const RowMatrix x = model.scaler.apply(features);
  SoftmaxObjective objective(x, labels, n_classes, cfg.l2);
  const auto res = minimize_lbfgs(objective, Vector::Zero(objective.dim()), cfg.max_iterations,
                                  cfg.gradient_tolerance, cfg.history);
  const Index f = features.cols();
  model.weights = Eigen::Map<const RowMatrix>(res.theta.data(), n_classes, f);
  model.bias = res.theta.tail(n_classes);
  for (Index j = 0; j < f; ++j) {
    if (model.scaler.constant[static_cast<std::size_t>(j)]) model.weights.col(j).setZero();
  }
  model.final_loss = res.loss;
  model.iterations = res.iterations;
  model.converged = res.converged;
  return model;
}

// Fold index per item. Each class is shuffled and dealt round-robin, with
// the starting fold rotating between classes so fold sizes stay balanced.
inline std::vector<int> stratified_kfold(std::span<const int> labels, int k, std::uint64_t seed,
                                         bool require_min_class_size = true) {
  detail::require(k >= 2, "stratified_kfold: k must be >= 2");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  std::vector<int> fold(labels.size(), -1);
  std::mt19937_64 rng(seed);
  int offset = 0;
  for (auto& [label, idx] : members) {
    if (require_min_class_size && static_cast<int>(idx.size()) < k) {
      throw DimensionError("stratified_kfold: class " + std::to_string(label) + " has " +
                           std::to_string(idx.size()) + " members, fewer than k=" +
                           std::to_string(k));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      fold[idx[r]] = static_cast<int>((static_cast<int>(r) + offset) % k);
    }
    offset = static_cast<int>((offset + idx.size()) % static_cast<std::size_t>(k));
  }
  return fold;
}

struct DisentanglementScore {
  double raw = 0.0;
  double clamped = 0.0;
  bool defined = false;
};

inline DisentanglementScore disentanglement_score(double acc_bp, double acc_b, double chance_b) {
  DisentanglementScore d;
  const double denom = acc_b - chance_b;
  if (!(denom > 0.0)) return d;
  d.defined = true;
  d.raw = 1.0 - (acc_bp - chance_b) / denom;
  d.clamped = std::clamp(d.raw, 0.0, 1.0);
  return d;
}

enum class StageTwoProtocol {
  kTrainFoldLogits,  // fit on train-fold logits, score on test-fold logits
  kTestFoldLogits,   // fit and score within test-fold logits (inner 2-fold split)
};

struct StudyConfig {
  int folds = 5;
  std::uint64_t seed = 0;
  StageTwoProtocol protocol = StageTwoProtocol::kTrainFoldLogits;
  ProbeConfig probe;
  double imbalance_tolerance = 0.0;  // max relative deviation of a cell from its row mean
};

struct FoldResult {
  double acc_p = 0.0;
  double acc_b = 0.0;
  double acc_bp = 0.0;
  DisentanglementScore d;
};

struct DisentanglementReport {
  std::vector<FoldResult> folds;
  double acc_p = 0.0;
  double acc_b = 0.0;
  double acc_bp = 0.0;
  double chance_b = 0.0;
  DisentanglementScore d;
  bool balanced = true;
  std::vector<std::string> warnings;
};

namespace probe_detail {
inline RowMatrix take_rows(const RowMatrix& m, const std::vector<Index>& rows) {
  return m(rows, Eigen::all);
}
inline std::vector<int> take(std::span<const int> v, const std::vector<Index>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(v[static_cast<std::size_t>(r)]);
  return out;
}
}  // namespace probe_detail

// Every profession should hold the same number of samples of each bias class.
inline bool check_balance(std::span<const int> task, std::span<const int> bias, int n_task,
                          int n_bias, double tolerance) {
  std::vector<Index> counts(static_cast<std::size_t>(n_task * n_bias), 0);
  for (std::size_t i = 0; i < task.size(); ++i) ++counts[static_cast<std::size_t>(task[i] * n_bias + bias[i])];
  for (int t = 0; t < n_task; ++t) {
    double mean = 0.0;
    for (int b = 0; b < n_bias; ++b) mean += static_cast<double>(counts[static_cast<std::size_t>(t * n_bias + b)]);
    mean /= n_bias;
    for (int b = 0; b < n_bias; ++b) {
      const double c = static_cast<double>(counts[static_cast<std::size_t>(t * n_bias + b)]);
      if (std::abs(c - mean) > tolerance * mean) return false;
    }
  }
  return true;
}

// Sequential probing: P_p on features -> task, P_b on features -> bias and
// P_{b<-p} on P_p's logits -> bias. Folds are stratified by the joint
// (task, bias) cell, which keeps them stratified by task.
inline DisentanglementReport run_disentanglement_study(const RowMatrix& features,
                                                       std::span<const int> task_labels,
                                                       std::span<const int> bias_labels,
                                                       const StudyConfig& cfg = {}) {
  const auto n = static_cast<std::size_t>(features.rows());
  detail::require(task_labels.size() == n && bias_labels.size() == n,
                  "disentanglement study: label counts differ from rows");
  const int n_task = count_classes(task_labels);
  const int n_bias = count_classes(bias_labels);
  detail::require(n_bias >= 2, "disentanglement study: needs >= 2 bias classes");
  detail::require(n_task >= 2, "disentanglement study: needs >= 2 task classes");

  DisentanglementReport rep;
  rep.chance_b = 1.0 / n_bias;
  rep.balanced = check_balance(task_labels, bias_labels, n_task, n_bias, cfg.imbalance_tolerance);
  if (!rep.balanced) {
    rep.warnings.push_back("task classes are not balanced across bias classes");
  }

  // Class-size precondition is on the task label; the split itself uses cells.
  (void)stratified_kfold(task_labels, cfg.folds, cfg.seed, true);
  std::vector<int> cell(n);
  for (std::size_t i = 0; i < n; ++i) cell[i] = task_labels[i] * n_bias + bias_labels[i];
  const auto fold = stratified_kfold(cell, cfg.folds, cfg.seed, false);

  for (int f = 0; f < cfg.folds; ++f) {
    std::vector<Index> train, test;
    for (std::size_t i = 0; i < n; ++i) (fold[i] == f ? test : train).push_back(static_cast<Index>(i));
    if (test.empty() || train.empty()) continue;
    const RowMatrix x_tr = probe_detail::take_rows(features, train);
    const RowMatrix x_te = probe_detail::take_rows(features, test);
    const auto p_tr = probe_detail::take(task_labels, train);
    const auto p_te = probe_detail::take(task_labels, test);
    const auto b_tr = probe_detail::take(bias_labels, train);
    const auto b_te = probe_detail::take(bias_labels, test);

    FoldResult fr;
    const ProbeModel task_probe = train_logistic_probe(x_tr, p_tr, cfg.probe, n_task);
    fr.acc_p = task_probe.accuracy(x_te, p_te);
    const ProbeModel bias_probe = train_logistic_probe(x_tr, b_tr, cfg.probe, n_bias);
    fr.acc_b = bias_probe.accuracy(x_te, b_te);

    const RowMatrix logits_te = task_probe.logits(x_te);
    if (cfg.protocol == StageTwoProtocol::kTrainFoldLogits) {
      const ProbeModel seq = train_logistic_probe(task_probe.logits(x_tr), b_tr, cfg.probe, n_bias);
      fr.acc_bp = seq.accuracy(logits_te, b_te);
    } else {
      std::vector<int> inner_key(test.size());
      for (std::size_t i = 0; i < test.size(); ++i) inner_key[i] = p_te[i] * n_bias + b_te[i];
      const auto inner = stratified_kfold(inner_key, 2, cfg.seed + 1 + static_cast<std::uint64_t>(f), false);
      double acc = 0.0;
      for (int h = 0; h < 2; ++h) {
        std::vector<Index> fit_rows, eval_rows;
        for (std::size_t i = 0; i < test.size(); ++i)
          (inner[i] == h ? eval_rows : fit_rows).push_back(static_cast<Index>(i));
        const auto b_fit = probe_detail::take(b_te, fit_rows);
        const auto b_eval = probe_detail::take(b_te, eval_rows);
        const ProbeModel seq = train_logistic_probe(probe_detail::take_rows(logits_te, fit_rows),
                                                    b_fit, cfg.probe, n_bias);
        acc += seq.accuracy(probe_detail::take_rows(logits_te, eval_rows), b_eval);
      }
      fr.acc_bp = acc / 2.0;
    }
    fr.d = disentanglement_score(fr.acc_bp, fr.acc_b, rep.chance_b);
    rep.acc_p += fr.acc_p;
    rep.acc_b += fr.acc_b;
    rep.acc_bp += fr.acc_bp;
    rep.folds.push_back(fr);
  }
  detail::require(!rep.folds.empty(), "disentanglement study: no usable folds");
  const double nf = static_cast<double>(rep.folds.size());
  rep.acc_p /= nf;
  rep.acc_b /= nf;
  rep.acc_bp /= nf;
  rep.d = disentanglement_score(rep.acc_bp, rep.acc_b, rep.chance_b);
  if (!rep.d.defined) rep.warnings.push_back("acc_b does not exceed chance; D is undefined");
  return rep;
}

}  // namespace sem
