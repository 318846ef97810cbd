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

// Percentile-rank neuron scoring.
//
// Every score is a fraction of reference prompts that a probe activation
// strictly exceeds at a given neuron, so scores live in [0,1] and only
// depend on comparisons.

#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "sem/common.hpp"

namespace sem {

enum class PromptRole { kDiverse, kQueryParaphrases, kBiasClass };

struct PromptActivations {
  std::string name;
  RowMatrix latents;  // one row per prompt
  PromptRole role = PromptRole::kDiverse;

  Index size() const { return latents.rows(); }
  Index latent_dim() const { return latents.cols(); }
};

struct BiasSpec {
  std::string attribute;
  std::vector<std::string> classes;
  std::vector<PromptActivations> class_prompts;  // parallel to `classes`

  void validate() const {
    detail::require(classes.size() >= 2, "bias spec '" + attribute + "': needs >= 2 classes");
    detail::require(class_prompts.size() == classes.size(),
                    "bias spec '" + attribute + "': one prompt set per class");
    for (std::size_t c = 0; c < classes.size(); ++c) {
      detail::require(class_prompts[c].size() >= 1,
                      "bias spec '" + attribute + "': class '" + classes[c] + "' has no prompts");
      detail::require(class_prompts[c].latent_dim() == class_prompts[0].latent_dim(),
                      "bias spec '" + attribute + "': latent width differs between classes");
    }
  }
  Index latent_dim() const { return class_prompts.empty() ? 0 : class_prompts[0].latent_dim(); }
};

struct NeuronScores {
  Vector s_concept;           // empty when no content score was computed
  std::vector<Vector> s_gen;  // per bias class
  std::vector<Vector> s_spec; // per bias class
  Vector s_bias;              // empty when bias-agnostic

  bool bias_aware() const { return s_bias.size() > 0; }
};

// Per-coordinate median; even counts average the middle pair.
inline Vector median_activation(const RowMatrix& latents) {
  detail::require(latents.rows() > 0, "median_activation: empty input");
  const Index n = latents.rows();
  Vector out(latents.cols());
  std::vector<double> col(static_cast<std::size_t>(n));
  for (Index j = 0; j < latents.cols(); ++j) {
    for (Index i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = latents(i, j);
    const auto mid = col.begin() + n / 2;
    std::nth_element(col.begin(), mid, col.end());
    if (n % 2 == 1) {
      out[j] = *mid;
    } else {
      const double upper = *mid;
      const double lower = *std::max_element(col.begin(), mid);
      out[j] = 0.5 * (lower + upper);
    }
  }
  return out;
}

// score(j) = |{p : probe(j) > reference_p(j)}| / |reference|
inline Vector percentile_score(const Vector& probe, const RowMatrix& reference) {
  detail::require(reference.rows() > 0, "percentile_score: empty reference set");
  detail::require_dim(probe.size(), reference.cols(), "percentile_score: probe");
  Vector counts = Vector::Zero(probe.size());
  for (Index p = 0; p < reference.rows(); ++p) {
    for (Index j = 0; j < probe.size(); ++j) {
      if (probe[j] > reference(p, j)) counts[j] += 1.0;
    }
  }
  return counts / static_cast<double>(reference.rows());
}

// With augmentation the probe is the median over paraphrase latents;
// otherwise query_latents must hold exactly the query latent.
inline Vector content_score(const RowMatrix& query_latents, const RowMatrix& diverse,
                            bool augmented) {
  detail::require(query_latents.rows() > 0, "content_score: no query latents");
  if (!augmented) {
    detail::require(query_latents.rows() == 1,
                    "content_score: non-augmented scoring takes exactly one latent");
    return percentile_score(query_latents.row(0).transpose(), diverse);
  }
  return percentile_score(median_activation(query_latents), diverse);
}

inline Vector content_score(const PromptActivations& query, const PromptActivations& diverse,
                            bool augmented) {
  return content_score(query.latents, diverse.latents, augmented);
}

// General, specific and combined bias scores. The specificity reference of
// class c pools the raw latents of every other class.
inline NeuronScores bias_scores(const BiasSpec& spec, const RowMatrix& diverse) {
  spec.validate();
  detail::require_dim(diverse.cols(), spec.latent_dim(), "bias_scores: diverse latent width");
  const std::size_t n_classes = spec.classes.size();
  NeuronScores out;
  out.s_bias = Vector::Zero(spec.latent_dim());
  for (std::size_t c = 0; c < n_classes; ++c) {
    const Vector signature = median_activation(spec.class_prompts[c].latents);
    Index others = 0;
    for (std::size_t o = 0; o < n_classes; ++o)
      if (o != c) others += spec.class_prompts[o].size();
    RowMatrix pooled(others, spec.latent_dim());
    Index row = 0;
    for (std::size_t o = 0; o < n_classes; ++o) {
      if (o == c) continue;
      pooled.middleRows(row, spec.class_prompts[o].size()) = spec.class_prompts[o].latents;
      row += spec.class_prompts[o].size();
    }
    out.s_gen.push_back(percentile_score(signature, diverse));
    out.s_spec.push_back(percentile_score(signature, pooled));
    out.s_bias = out.s_bias.cwiseMax(out.s_gen.back().cwiseMin(out.s_spec.back()));
  }
  return out;
}

inline NeuronScores bias_scores(const BiasSpec& spec, const PromptActivations& diverse) {
  return bias_scores(spec, diverse.latents);
}

}  // namespace sem
