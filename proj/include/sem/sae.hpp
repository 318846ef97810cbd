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

// Sparse autoencoder: weights, initialization, encoder and decoder.
//
//   h     = ReLU(W_e (z - b_pre))
//   z_hat = W_d h + b_pre

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "sem/common.hpp"

namespace sem {

struct SaeWeights {
  Matrix encoder;        // latent_dim x input_dim
  Matrix decoder;        // input_dim x latent_dim
  Vector centering_bias; // input_dim

  Index input_dim() const { return decoder.rows(); }
  Index latent_dim() const { return encoder.rows(); }

  // Throws DimensionError / NumericError when the invariants do not hold.
  void validate() const {
    const Index d = centering_bias.size();
    const Index s = encoder.rows();
    detail::require(d > 0 && s > 0, "sae weights: dimensions must be positive");
    detail::require(encoder.cols() == d, "sae weights: encoder must be latent_dim x input_dim");
    detail::require(decoder.rows() == d && decoder.cols() == s,
                    "sae weights: decoder must be input_dim x latent_dim");
    if (!encoder.allFinite() || !decoder.allFinite() || !centering_bias.allFinite()) {
      throw NumericError("sae weights contain non-finite entries");
    }
  }

  bool operator==(const SaeWeights& o) const {
    return encoder.rows() == o.encoder.rows() && encoder.cols() == o.encoder.cols() &&
           decoder.rows() == o.decoder.rows() && decoder.cols() == o.decoder.cols() &&
           centering_bias.size() == o.centering_bias.size() && encoder == o.encoder &&
           decoder == o.decoder && centering_bias == o.centering_bias;
  }
};

enum class CenteringInit { kGeometricMedian, kArithmeticMean };

struct GeometricMedianOptions {
  double tolerance = 1e-8;
  int max_iterations = 1000;
};

// Weiszfeld iteration started from the arithmetic mean. When the iterate
// lands on a sample point that point is skipped in the weighted update.
inline Vector geometric_median(const RowMatrix& points, GeometricMedianOptions opts = {}) {
  detail::require(points.rows() > 0, "geometric_median: empty point set");
  Vector y = points.colwise().mean().transpose();
  for (int it = 0; it < opts.max_iterations; ++it) {
    Vector num = Vector::Zero(points.cols());
    double den = 0.0;
    bool on_point = false;
    for (Index i = 0; i < points.rows(); ++i) {
      const double dist = (points.row(i).transpose() - y).norm();
      if (dist < 1e-15) {
        on_point = true;
        continue;
      }
      num += points.row(i).transpose() / dist;
      den += 1.0 / dist;
    }
    if (den == 0.0) break;  // every point coincides with y
    Vector next = num / den;
    if (on_point) {
      // Vardi-Zhang correction: stay on the sample point if it is optimal.
      Vector r = Vector::Zero(points.cols());
      for (Index i = 0; i < points.rows(); ++i) {
        const Vector diff = points.row(i).transpose() - y;
        const double dist = diff.norm();
        if (dist >= 1e-15) r += diff / dist;
      }
      if (r.norm() <= 1.0) break;
    }
    const double step = (next - y).norm();
    y = std::move(next);
    if (step <= opts.tolerance) break;
  }
  return y;
}

struct SaeInitOptions {
  CenteringInit centering = CenteringInit::kGeometricMedian;
  double column_norm = 0.1;
};

// Decoder columns from Kaiming-uniform (fan_in = latent_dim) rescaled to a
// fixed norm; encoder is the decoder transpose.
inline SaeWeights init_sae(Index input_dim, Index latent_dim, std::uint64_t seed,
                           const RowMatrix& training_embeddings, SaeInitOptions opts = {}) {
  detail::require(input_dim > 0, "init_sae: input_dim must be positive");
  detail::require(latent_dim > input_dim, "init_sae: latent_dim must exceed input_dim");
  detail::require(training_embeddings.rows() > 0, "init_sae: empty training set");
  detail::require_dim(training_embeddings.cols(), input_dim, "init_sae: training embedding");
  if (!training_embeddings.allFinite()) throw NumericError("init_sae: non-finite training data");

  std::mt19937_64 rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(latent_dim));
  std::uniform_real_distribution<double> uni(-bound, bound);

  SaeWeights w;
  w.decoder.resize(input_dim, latent_dim);
  for (Index j = 0; j < latent_dim; ++j) {
    for (Index i = 0; i < input_dim; ++i) w.decoder(i, j) = uni(rng);
    const double n = w.decoder.col(j).norm();
    if (n > 0.0) w.decoder.col(j) *= opts.column_norm / n;
  }
  w.encoder = w.decoder.transpose();
  if (opts.centering == CenteringInit::kGeometricMedian) {
    w.centering_bias = geometric_median(training_embeddings);
  } else {
    w.centering_bias = training_embeddings.colwise().mean().transpose();
  }
  return w;
}

inline Vector sae_encode(const Vector& z, const SaeWeights& w) {
  detail::require_dim(z.size(), w.input_dim(), "sae_encode: embedding");
  if (!z.allFinite()) throw NumericError("sae_encode: non-finite input");
  return (w.encoder * (z - w.centering_bias)).cwiseMax(0.0);
}

inline Vector sae_decode(const Vector& h, const SaeWeights& w) {
  detail::require_dim(h.size(), w.latent_dim(), "sae_decode: latent");
  return w.decoder * h + w.centering_bias;
}

// Indices of the k largest entries; ties resolved toward the lower index.
inline std::vector<Index> topk_indices(const Eigen::Ref<const Vector>& h, Index k) {
  std::vector<Index> idx(static_cast<std::size_t>(h.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  auto cmp = [&h](Index a, Index b) { return h[a] > h[b] || (h[a] == h[b] && a < b); };
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), cmp);
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

// ReLU followed by keeping the k largest activations.
inline Vector topk_relu(const Vector& h, Index k) {
  if (k < 1 || k > h.size()) {
    throw DimensionError("topk_relu: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(h.size()) + "]");
  }
  const Vector r = h.cwiseMax(0.0);
  Vector out = Vector::Zero(h.size());
  for (Index j : topk_indices(r, k)) out[j] = r[j];
  return out;
}

// Row-wise batch versions.
inline RowMatrix encode_rows(const RowMatrix& z, const SaeWeights& w) {
  detail::require_dim(z.cols(), w.input_dim(), "encode_rows: embedding width");
  if (!z.allFinite()) throw NumericError("encode_rows: non-finite input");
  RowMatrix centered = z.rowwise() - w.centering_bias.transpose();
  RowMatrix h = centered * w.encoder.transpose();
  return h.cwiseMax(0.0);
}

inline RowMatrix decode_rows(const RowMatrix& h, const SaeWeights& w) {
  detail::require_dim(h.cols(), w.latent_dim(), "decode_rows: latent width");
  RowMatrix z = h * w.decoder.transpose();
  z.rowwise() += w.centering_bias.transpose();
  return z;
}

inline RowMatrix topk_relu_rows(const RowMatrix& h, Index k) {
  RowMatrix out(h.rows(), h.cols());
  for (Index i = 0; i < h.rows(); ++i) out.row(i) = topk_relu(h.row(i).transpose(), k).transpose();
  return out;
}

}  // namespace sem
