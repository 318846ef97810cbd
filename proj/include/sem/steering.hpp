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

// Score-aware latent steering and the orthogonal-projection comparison
// baseline.

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sem/common.hpp"
#include "sem/sae.hpp"
#include "sem/scoring.hpp"

namespace sem {

enum class SteeringVariant {
  kSemI,   // bias-agnostic, augmented content score, median base latent
  kSemB,   // bias-aware, plain content score
  kSemBI,  // bias-aware, augmented content score
};

inline std::string_view variant_name(SteeringVariant v) {
  switch (v) {
    case SteeringVariant::kSemI: return "sem_i";
    case SteeringVariant::kSemB: return "sem_b";
    case SteeringVariant::kSemBI: return "sem_bi";
  }
  return "?";
}

inline SteeringVariant parse_variant(std::string_view s) {
  if (s == "sem_i") return SteeringVariant::kSemI;
  if (s == "sem_b") return SteeringVariant::kSemB;
  if (s == "sem_bi") return SteeringVariant::kSemBI;
  throw UsageError("unknown steering variant '" + std::string(s) + "'");
}

inline bool needs_bias(SteeringVariant v) { return v != SteeringVariant::kSemI; }
inline bool needs_paraphrases(SteeringVariant v) { return v != SteeringVariant::kSemB; }

namespace steer_detail {
inline void check_unit_range(const Vector& s, const char* what) {
  for (Index j = 0; j < s.size(); ++j) {
    if (!(s[j] >= 0.0 && s[j] <= 1.0)) {
      throw DimensionError(std::string(what) + ": score " + std::to_string(s[j]) +
                           " at neuron " + std::to_string(j) + " outside [0,1]");
    }
  }
}
}  // namespace steer_detail

// M(j) = S_concept(j)^2
inline Vector modulation_agnostic(const Vector& s_concept) {
  steer_detail::check_unit_range(s_concept, "modulation_agnostic");
  return s_concept.array().square().matrix();
}

// M(j) = (1 + S_concept(j) - S_bias(j))^2, in [0,4]; not clipped.
inline Vector modulation_aware(const Vector& s_concept, const Vector& s_bias) {
  detail::require_dim(s_bias.size(), s_concept.size(), "modulation_aware: s_bias");
  steer_detail::check_unit_range(s_concept, "modulation_aware");
  steer_detail::check_unit_range(s_bias, "modulation_aware");
  // Difference first, so equal scores give exactly M = 1.
  return (1.0 + (s_concept.array() - s_bias.array())).square().matrix();
}

// h_debias = h_base * M + (1 - M) * m_div
inline Vector steer(const Vector& h_base, const Vector& modulation, const Vector& m_div) {
  detail::require_dim(modulation.size(), h_base.size(), "steer: modulation");
  detail::require_dim(m_div.size(), h_base.size(), "steer: m_div");
  return (h_base.array() * modulation.array() + (1.0 - modulation.array()) * m_div.array())
      .matrix();
}

// A query as seen by the steering pipeline: its own latent and, when
// augmentation is used, the latents of its paraphrases.
struct QueryLatents {
  Vector h_q;            // empty when only paraphrases are available
  RowMatrix paraphrases; // zero rows when not augmented
};

struct DebiasResult {
  Vector embedding;   // reconstructed (L2-normalized unless disabled)
  Vector latent;      // h_debias
  Vector modulation;  // M
  Vector s_concept;
};

// Holds everything that is shared across queries: SAE weights, diverse
// latents with their median, and optional bias scores.
class Debiaser {
 public:
  Debiaser(const SaeWeights& weights, RowMatrix diverse_latents,
           std::optional<BiasSpec> bias = std::nullopt)
      : weights_(weights), diverse_(std::move(diverse_latents)) {
    detail::require(diverse_.rows() >= 1, "debiaser: empty diverse prompt set");
    detail::require_dim(diverse_.cols(), weights_.latent_dim(), "debiaser: diverse latent width");
    m_div_ = median_activation(diverse_);
    if (bias) {
      detail::require_dim(bias->latent_dim(), weights_.latent_dim(), "debiaser: bias latent width");
      bias_scores_ = bias_scores(*bias, diverse_);
      has_bias_ = true;
    }
  }

  const Vector& neutral_activation() const { return m_div_; }
  const NeuronScores& bias_scores_view() const { return bias_scores_; }
  bool has_bias() const { return has_bias_; }
  const SaeWeights& weights() const { return weights_; }

  // Steer `base` using the content score of `concept_probe`.
  DebiasResult steer_latent(SteeringVariant variant, const Vector& base,
                            const Vector& concept_probe, bool normalize = true) const {
    detail::require_dim(base.size(), weights_.latent_dim(), "steer_latent: base latent");
    if (needs_bias(variant) && !has_bias_) {
      throw UsageError(std::string(variant_name(variant)) + " requires bias prompts (bias: role)");
    }
    DebiasResult out;
    out.s_concept = percentile_score(concept_probe, diverse_);
    out.modulation = variant == SteeringVariant::kSemI
                         ? modulation_agnostic(out.s_concept)
                         : modulation_aware(out.s_concept, bias_scores_.s_bias);
    out.latent = steer(base, out.modulation, m_div_);
    out.embedding = sae_decode(out.latent, weights_);
    if (normalize) {
      const double n = out.embedding.norm();
      if (n == 0.0) throw NumericError("debiased embedding has zero norm");
      out.embedding /= n;
    }
    return out;
  }

  // Base-latent rules: sem_i steers the paraphrase median m_q, sem_b and
  // sem_bi steer h_q; sem_i and sem_bi score content with m_q.
  DebiasResult debias(SteeringVariant variant, const QueryLatents& q,
                      bool normalize = true) const {
    if (needs_paraphrases(variant) && q.paraphrases.rows() == 0) {
      throw UsageError(std::string(variant_name(variant)) +
                       " requires query paraphrases (paraphrases role)");
    }
    if (variant != SteeringVariant::kSemI && q.h_q.size() == 0) {
      throw UsageError(std::string(variant_name(variant)) + " requires the query latent");
    }
    switch (variant) {
      case SteeringVariant::kSemI: {
        const Vector m_q = median_activation(q.paraphrases);
        return steer_latent(variant, m_q, m_q, normalize);
      }
      case SteeringVariant::kSemB:
        return steer_latent(variant, q.h_q, q.h_q, normalize);
      case SteeringVariant::kSemBI:
        return steer_latent(variant, q.h_q, median_activation(q.paraphrases), normalize);
    }
    throw UsageError("unknown steering variant");
  }

 private:
  SaeWeights weights_;
  RowMatrix diverse_;
  Vector m_div_;
  NeuronScores bias_scores_;
  bool has_bias_ = false;
};

// One-shot convenience over raw embeddings: encodes, steers and decodes.
inline DebiasResult debias_embedding(const SaeWeights& w, const Vector& query_embedding,
                                     const RowMatrix& paraphrase_embeddings,
                                     const RowMatrix& diverse_embeddings,
                                     const std::optional<std::vector<RowMatrix>>& bias_embeddings,
                                     SteeringVariant variant, bool normalize = true) {
  if (needs_bias(variant) && !bias_embeddings) {
    throw UsageError(std::string(variant_name(variant)) + " requires bias prompts (bias: role)");
  }
  std::optional<BiasSpec> spec;
  if (bias_embeddings) {
    BiasSpec b;
    b.attribute = "bias";
    for (std::size_t c = 0; c < bias_embeddings->size(); ++c) {
      b.classes.push_back("class" + std::to_string(c));
      b.class_prompts.push_back({b.classes.back(), encode_rows((*bias_embeddings)[c], w),
                                 PromptRole::kBiasClass});
    }
    spec = std::move(b);
  }
  Debiaser debiaser(w, encode_rows(diverse_embeddings, w), std::move(spec));
  QueryLatents q;
  if (query_embedding.size() > 0) q.h_q = sae_encode(query_embedding, w);
  if (paraphrase_embeddings.rows() > 0) q.paraphrases = encode_rows(paraphrase_embeddings, w);
  return debiaser.debias(variant, q, normalize);
}

enum class ProjectionStatus { kOk, kDegenerateSubspace, kZeroRejection };

struct OrthProjResult {
  Vector embedding;
  ProjectionStatus status = ProjectionStatus::kOk;
  Index subspace_rank = 0;
};

// Orthonormal basis (columns) of the span of mean-centred class means,
// rank at most classes - 1.
inline Matrix bias_subspace(const std::vector<RowMatrix>& class_embeddings) {
  detail::require(class_embeddings.size() >= 2, "bias_subspace: needs >= 2 classes");
  const Index d = class_embeddings[0].cols();
  Matrix means(static_cast<Index>(class_embeddings.size()), d);
  for (std::size_t c = 0; c < class_embeddings.size(); ++c) {
    detail::require(class_embeddings[c].rows() > 0, "bias_subspace: empty class");
    detail::require_dim(class_embeddings[c].cols(), d, "bias_subspace: embedding width");
    means.row(static_cast<Index>(c)) = class_embeddings[c].colwise().mean();
  }
  means.rowwise() -= means.colwise().mean();
  Eigen::JacobiSVD<Matrix> svd(means, Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  const double cutoff = 1e-10 * std::max(1.0, means.cwiseAbs().maxCoeff());
  Index rank = 0;
  while (rank < sv.size() && rank < means.rows() - 1 && sv[rank] > cutoff) ++rank;
  return svd.matrixV().leftCols(rank);
}

inline OrthProjResult orth_proj_baseline(const Vector& z,
                                         const std::vector<RowMatrix>& class_embeddings,
                                         bool normalize = true) {
  const Matrix basis = bias_subspace(class_embeddings);
  detail::require_dim(z.size(), class_embeddings[0].cols(), "orth_proj_baseline: embedding");
  OrthProjResult out;
  out.subspace_rank = basis.cols();
  if (basis.cols() == 0) {
    out.embedding = z;
    out.status = ProjectionStatus::kDegenerateSubspace;
    return out;
  }
  out.embedding = z - basis * (basis.transpose() * z);
  const double n = out.embedding.norm();
  if (n <= 1e-12 * std::max(1.0, z.norm())) {
    out.status = ProjectionStatus::kZeroRejection;
    out.embedding.setZero();
    return out;
  }
  if (normalize) out.embedding /= n;
  return out;
}

}  // namespace sem
