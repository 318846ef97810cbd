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

// Retrieval fairness, zero-shot group accuracy, content preservation / bias
// neutralization and a 2-D PCA used for qualitative plots.

#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sem/common.hpp"

namespace sem {

struct GroupedEvalSet {
  RowMatrix image_embeddings;
  std::vector<int> task_labels;
  std::vector<int> group_labels;
  std::vector<std::string> group_names;

  void validate() const {
    const auto n = static_cast<std::size_t>(image_embeddings.rows());
    detail::require(task_labels.size() == n, "eval set: task label count differs from rows");
    detail::require(group_labels.size() == n, "eval set: group label count differs from rows");
    for (int g : group_labels) {
      detail::require(g >= 0 && (group_names.empty() ||
                                 g < static_cast<int>(group_names.size())),
                      "eval set: group index out of range");
    }
  }
  int n_groups() const {
    if (!group_names.empty()) return static_cast<int>(group_names.size());
    int m = -1;
    for (int g : group_labels) m = std::max(m, g);
    return m + 1;
  }
};

inline RowMatrix l2_normalize_rows(const RowMatrix& m) {
  RowMatrix out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n == 0.0) throw NumericError("row " + std::to_string(i) + " has zero norm");
    out.row(i) /= n;
  }
  return out;
}

// Indices of the k highest-cosine rows, best first; ties go to the lower index.
inline std::vector<Index> topk_retrieve(const Vector& query, const RowMatrix& images, Index k) {
  detail::require(k >= 1 && k <= images.rows(), "topk_retrieve: k outside [1, n]");
  detail::require_dim(query.size(), images.cols(), "topk_retrieve: query");
  const double qn = query.norm();
  if (qn == 0.0) throw NumericError("topk_retrieve: zero-norm query");
  const Vector scores = l2_normalize_rows(images) * (query / qn);
  std::vector<Index> idx(static_cast<std::size_t>(images.rows()));
  std::iota(idx.begin(), idx.end(), Index{0});
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&scores](Index a, Index b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

enum class DesiredDistribution { kUniform, kPool };

inline std::string_view desired_name(DesiredDistribution d) {
  return d == DesiredDistribution::kUniform ? "uniform" : "pool";
}

inline DesiredDistribution parse_desired(std::string_view s) {
  if (s == "uniform") return DesiredDistribution::kUniform;
  if (s == "pool") return DesiredDistribution::kPool;
  throw UsageError("unknown desired distribution '" + std::string(s) + "'");
}

// Target group distribution: uniform, or the group marginal of the pool.
inline std::vector<double> desired_distribution(DesiredDistribution mode,
                                                std::span<const int> pool_groups, int n_groups) {
  detail::require(n_groups >= 2, "desired_distribution: needs >= 2 groups");
  std::vector<double> q(static_cast<std::size_t>(n_groups), 1.0 / n_groups);
  if (mode == DesiredDistribution::kPool) {
    detail::require(!pool_groups.empty(), "desired_distribution: empty pool");
    std::fill(q.begin(), q.end(), 0.0);
    for (int g : pool_groups) {
      detail::require(g >= 0 && g < n_groups, "desired_distribution: group out of range");
      q[static_cast<std::size_t>(g)] += 1.0;
    }
    for (double& x : q) x /= static_cast<double>(pool_groups.size());
  }
  return q;
}

inline constexpr double kSmoothing = 1e-10;

namespace metrics_detail {
inline std::vector<double> smoothed_proportions(std::span<const int> groups, int n_groups) {
  detail::require(!groups.empty(), "retrieval metric: k must be >= 1");
  detail::require(n_groups >= 2, "retrieval metric: needs >= 2 groups");
  std::vector<double> p(static_cast<std::size_t>(n_groups), 0.0);
  for (int g : groups) {
    detail::require(g >= 0 && g < n_groups, "retrieval metric: group out of range");
    p[static_cast<std::size_t>(g)] += 1.0;
  }
  for (double& x : p) x = x / static_cast<double>(groups.size()) + kSmoothing;
  return p;
}
}  // namespace metrics_detail

// KL(p_hat || q) of the retrieved group distribution against `desired`.
inline double kl_at_k(std::span<const int> retrieved_groups, int n_groups,
                      const std::vector<double>& desired) {
  const auto p = metrics_detail::smoothed_proportions(retrieved_groups, n_groups);
  detail::require(desired.size() == p.size(), "kl_at_k: desired distribution size");
  double kl = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) kl += p[c] * std::log(p[c] / (desired[c] + kSmoothing));
  return std::max(0.0, kl);
}

// max_c log(p_hat_c / q_c)
inline double maxskew_at_k(std::span<const int> retrieved_groups, int n_groups,
                           const std::vector<double>& desired) {
  const auto p = metrics_detail::smoothed_proportions(retrieved_groups, n_groups);
  detail::require(desired.size() == p.size(), "maxskew_at_k: desired distribution size");
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < p.size(); ++c) {
    best = std::max(best, std::log(p[c] / (desired[c] + kSmoothing)));
  }
  return best;
}

inline double precision_at_k(std::span<const int> retrieved_task_labels, int target) {
  detail::require(!retrieved_task_labels.empty(), "precision_at_k: k must be >= 1");
  const auto hits = std::count(retrieved_task_labels.begin(), retrieved_task_labels.end(), target);
  return static_cast<double>(hits) / static_cast<double>(retrieved_task_labels.size());
}

struct RetrievalReport {
  Index k = 0;
  DesiredDistribution desired = DesiredDistribution::kUniform;
  double kl_at_k = 0.0;
  double maxskew_at_k = 0.0;
  std::optional<double> precision_at_k;
};

// Retrieval metrics for one query against an eval set.
inline RetrievalReport evaluate_retrieval(const Vector& query, const GroupedEvalSet& set, Index k,
                                          DesiredDistribution mode,
                                          std::optional<int> target_task = std::nullopt) {
  set.validate();
  const auto idx = topk_retrieve(query, set.image_embeddings, k);
  std::vector<int> groups;
  std::vector<int> tasks;
  for (Index i : idx) {
    groups.push_back(set.group_labels[static_cast<std::size_t>(i)]);
    tasks.push_back(set.task_labels[static_cast<std::size_t>(i)]);
  }
  const int ng = set.n_groups();
  const auto q = desired_distribution(mode, set.group_labels, ng);
  RetrievalReport r;
  r.k = k;
  r.desired = mode;
  r.kl_at_k = kl_at_k(groups, ng, q);
  r.maxskew_at_k = maxskew_at_k(groups, ng, q);
  if (target_task) r.precision_at_k = precision_at_k(tasks, *target_task);
  return r;
}

// Argmax cosine class per image; ties go to the lower class index.
inline std::vector<int> zeroshot_classify(const RowMatrix& images, const RowMatrix& class_embeddings) {
  detail::require(class_embeddings.rows() >= 2, "zeroshot_classify: needs >= 2 classes");
  detail::require_dim(class_embeddings.cols(), images.cols(), "zeroshot_classify: class width");
  const RowMatrix sims = l2_normalize_rows(images) * l2_normalize_rows(class_embeddings).transpose();
  std::vector<int> pred(static_cast<std::size_t>(images.rows()));
  for (Index i = 0; i < sims.rows(); ++i) {
    Index best = 0;
    for (Index c = 1; c < sims.cols(); ++c)
      if (sims(i, c) > sims(i, best)) best = c;
    pred[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return pred;
}

struct GroupCell {
  int task = 0;
  int group = 0;
  Index count = 0;
  Index correct = 0;
  double accuracy() const { return count ? static_cast<double>(correct) / count : 0.0; }
};

struct GroupMetricsReport {
  double accuracy = 0.0;
  double worst_group_accuracy = 0.0;
  double gap = 0.0;
  std::vector<GroupCell> cells;                 // nonempty task x group cells
  std::vector<std::pair<int, int>> empty_cells; // excluded from WG
};

// Cells are task x group intersections; WG is the minimum over nonempty cells.
inline GroupMetricsReport group_metrics(std::span<const int> predictions,
                                        std::span<const int> task_labels,
                                        std::span<const int> group_labels, int n_tasks = 0,
                                        int n_groups = 0) {
  detail::require(predictions.size() == task_labels.size() &&
                      predictions.size() == group_labels.size(),
                  "group_metrics: length mismatch");
  detail::require(!predictions.empty(), "group_metrics: empty input");
  for (int t : task_labels) n_tasks = std::max(n_tasks, t + 1);
  for (int g : group_labels) n_groups = std::max(n_groups, g + 1);
  std::vector<GroupCell> grid(static_cast<std::size_t>(n_tasks * n_groups));
  Index correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    detail::require(task_labels[i] >= 0 && group_labels[i] >= 0, "group_metrics: negative label");
    auto& cell = grid[static_cast<std::size_t>(task_labels[i] * n_groups + group_labels[i])];
    ++cell.count;
    if (predictions[i] == task_labels[i]) {
      ++cell.correct;
      ++correct;
    }
  }
  GroupMetricsReport r;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(predictions.size());
  r.worst_group_accuracy = 1.0;
  for (int t = 0; t < n_tasks; ++t) {
    for (int g = 0; g < n_groups; ++g) {
      GroupCell cell = grid[static_cast<std::size_t>(t * n_groups + g)];
      cell.task = t;
      cell.group = g;
      if (cell.count == 0) {
        r.empty_cells.emplace_back(t, g);
        continue;
      }
      r.worst_group_accuracy = std::min(r.worst_group_accuracy, cell.accuracy());
      r.cells.push_back(cell);
    }
  }
  r.gap = r.accuracy - r.worst_group_accuracy;
  return r;
}

// Mean cosine between each debiased gendered embedding and the original
// neutral embedding of the same concept. Each matrix in `gendered` is
// row-aligned with `neutral_original`.
inline double content_preservation(const std::vector<RowMatrix>& gendered,
                                   const RowMatrix& neutral_original) {
  detail::require(!gendered.empty(), "content_preservation: no gendered sets");
  double sum = 0.0;
  Index n = 0;
  for (const auto& g : gendered) {
    detail::require(g.rows() == neutral_original.rows() && g.cols() == neutral_original.cols(),
                    "content_preservation: gendered set not paired with neutral set");
    for (Index p = 0; p < g.rows(); ++p, ++n) sum += cosine(g.row(p), neutral_original.row(p));
  }
  detail::require(n > 0, "content_preservation: no concepts");
  return sum / static_cast<double>(n);
}

// Mean cosine between paired rows of the two bias-class sets.
inline double bias_neutralization(const RowMatrix& first, const RowMatrix& second) {
  detail::require(first.rows() == second.rows() && first.cols() == second.cols(),
                  "bias_neutralization: sets not paired");
  detail::require(first.rows() > 0, "bias_neutralization: no concepts");
  double sum = 0.0;
  for (Index p = 0; p < first.rows(); ++p) sum += cosine(first.row(p), second.row(p));
  return sum / static_cast<double>(first.rows());
}

struct PcaResult {
  RowMatrix coordinates;          // n x 2
  Matrix components;              // d x 2, unit columns
  double explained_variance[2] = {0.0, 0.0};
  double total_variance = 0.0;
  bool rank_deficient = false;    // second component zeroed
};

struct PowerIterationOptions {
  double tolerance = 1e-9;
  int max_iterations = 20000;
};

namespace metrics_detail {
// Dominant eigenpair of a symmetric PSD matrix.
inline std::pair<double, Vector> dominant_eigenpair(const Matrix& c, PowerIterationOptions opts) {
  Index start = 0;
  c.colwise().norm().maxCoeff(&start);
  Vector v = c.col(start);
  double n = v.norm();
  if (n == 0.0) return {0.0, Vector::Zero(c.rows())};
  v /= n;
  for (int it = 0; it < opts.max_iterations; ++it) {
    Vector next = c * v;
    n = next.norm();
    if (n == 0.0) return {0.0, v};
    next /= n;
    if (next.dot(v) < 0.0) next = -next;
    const double delta = (next - v).norm();
    v = std::move(next);
    if (delta <= opts.tolerance) break;
  }
  return {v.dot(c * v), v};
}
}  // namespace metrics_detail

// Mean-centred projection onto the top two principal directions found by
// power iteration with deflation. The largest-magnitude loading of each
// component is made positive.
inline PcaResult pca_project_2d(const RowMatrix& x, PowerIterationOptions opts = {}) {
  detail::require(x.rows() >= 3, "pca_project_2d: needs >= 3 points");
  const RowMatrix centered = x.rowwise() - x.colwise().mean();
  Matrix cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  PcaResult r;
  r.total_variance = cov.trace();
  r.components = Matrix::Zero(x.cols(), 2);
  const double floor = 1e-12 * std::max(r.total_variance, std::numeric_limits<double>::min());
  for (int k = 0; k < 2; ++k) {
    auto [lambda, v] = metrics_detail::dominant_eigenpair(cov, opts);
    if (lambda <= floor) {
      r.rank_deficient = true;
      break;
    }
    Index big = 0;
    v.cwiseAbs().maxCoeff(&big);
    if (v[big] < 0.0) v = -v;
    r.components.col(k) = v;
    r.explained_variance[k] = lambda;
    cov -= lambda * v * v.transpose();
  }
  r.coordinates = centered * r.components;
  return r;
}

}  // namespace sem
