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

// Synthetic end-to-end debiasing run: retrieval skew, bias neutralization and
// content preservation before and after sem_b steering, seed-averaged.

#pragma once

#include <string>
#include <vector>

#include "sem/metrics.hpp"
#include "sem/steering.hpp"
#include "sem/synth.hpp"

namespace e2e {

struct Summary {
  double kl_before = 0, kl_after = 0;
  double skew_before = 0, skew_after = 0;
  double bn_before = 0, bn_after = 0;
  double cp_before = 0, cp_after = 0;
};

inline Summary run(double rho, int n_seeds, sem::Index k = 40,
                   sem::SteeringVariant variant = sem::SteeringVariant::kSemB) {
  Summary s;
  double n_queries = 0;
  for (int seed = 0; seed < n_seeds; ++seed) {
    sem::SynthConfig cfg;
    cfg.rho = rho;
    cfg.seed = static_cast<std::uint64_t>(seed);
    const auto corpus = sem::gen_synthetic_corpus(cfg);
    const auto w = sem::planted_sae(cfg.d);

    sem::BiasSpec spec;
    spec.attribute = "group";
    for (int b = 0; b < cfg.n_bias_classes; ++b) {
      spec.classes.push_back("class" + std::to_string(b));
      spec.class_prompts.push_back({spec.classes.back(), sem::encode_rows(corpus.bias_prompts[b], w),
                                    sem::PromptRole::kBiasClass});
    }
    const sem::Debiaser deb(w, sem::encode_rows(corpus.diverse, w), spec);
    const sem::GroupedEvalSet set{corpus.embeddings, corpus.content_labels, corpus.bias_labels, {}};

    auto steer = [&](const sem::Vector& z, const sem::RowMatrix& para) {
      sem::QueryLatents q;
      q.h_q = sem::sae_encode(z, w);
      q.paraphrases = sem::encode_rows(para, w);
      return deb.debias(variant, q).embedding;
    };

    std::vector<sem::RowMatrix> steered(static_cast<std::size_t>(cfg.n_bias_classes),
                                        sem::RowMatrix(cfg.n_contents, cfg.d));
    for (int c = 0; c < cfg.n_contents; ++c) {
      const sem::Vector z = corpus.queries.row(c).transpose();
      const auto before = sem::evaluate_retrieval(z, set, k, sem::DesiredDistribution::kUniform);
      const auto after = sem::evaluate_retrieval(steer(z, corpus.paraphrases[c]), set, k,
                                                 sem::DesiredDistribution::kUniform);
      s.kl_before += before.kl_at_k;
      s.kl_after += after.kl_at_k;
      s.skew_before += before.maxskew_at_k;
      s.skew_after += after.maxskew_at_k;
      n_queries += 1;
      for (int b = 0; b < cfg.n_bias_classes; ++b) {
        steered[b].row(c) =
            steer(corpus.class_queries[b].row(c).transpose(), corpus.paraphrases[c]).transpose();
      }
    }
    s.bn_before += sem::bias_neutralization(corpus.class_queries[0], corpus.class_queries[1]);
    s.bn_after += sem::bias_neutralization(steered[0], steered[1]);
    s.cp_before += sem::content_preservation(corpus.class_queries, corpus.queries);
    s.cp_after += sem::content_preservation(steered, corpus.queries);
  }
  s.kl_before /= n_queries;
  s.kl_after /= n_queries;
  s.skew_before /= n_queries;
  s.skew_after /= n_queries;
  s.bn_before /= n_seeds;
  s.bn_after /= n_seeds;
  s.cp_before /= n_seeds;
  s.cp_after /= n_seeds;
  return s;
}

}  // namespace e2e
