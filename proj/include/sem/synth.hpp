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

// Synthetic corpora with planted structure.
//
// Entangled corpus: every sample of content c and bias class b is
//
//   x = a * u_c + beta * v_b + rho * t_b * r + noise
//
// where u_c, v_b are distinct coordinate axes (picked by a seeded
// permutation), r = (u_0 - u_1) / sqrt(2) is a shared stereotype axis inside
// the content span and t_b runs evenly over [-1, 1]. Keeping the cross term
// inside the content span is what lets a content probe leak bias through
// its logits; keeping every planted direction on an axis keeps per-feature
// standardization from mixing content and bias.
//
// Dictionary corpus: sparse nonnegative combinations of a few random unit
// atoms, used to check that the trainer recovers a planted dictionary.

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "sem/common.hpp"
#include "sem/sae.hpp"

namespace sem {

struct SynthConfig {
  Index d = 64;
  int n_contents = 8;
  int n_bias_classes = 2;
  double content_strength = 2.0;
  double bias_strength = 1.0;
  double rho = 0.5;
  double noise_std = 0.05;
  int samples_per_cell = 40;
  std::uint64_t seed = 0;

  // Prompt sets for the steering pipeline.
  int n_paraphrases = 8;
  int n_bias_prompts = 16;
  int n_diverse = 101;
  double diverse_std = 0.4;
  double prompt_noise_std = 0.05;
  double query_leak = 0.3;  // times rho * bias_strength, along the stereotyped class

  // Broad SAE training corpus: sparse signed combinations of coordinate axes.
  Index n_sae_corpus = 8192;
  int sae_corpus_max_active = 4;

  void validate() const {
    detail::require(n_contents >= 2, "synth: n_contents must be >= 2");
    detail::require(n_bias_classes >= 2, "synth: n_bias_classes must be >= 2");
    detail::require(content_strength > 0.0, "synth: content_strength must be > 0");
    detail::require(bias_strength >= 0.0, "synth: bias_strength must be >= 0");
    detail::require(rho >= 0.0 && rho <= 1.0, "synth: rho outside [0,1]");
    detail::require(noise_std >= 0.0 && prompt_noise_std >= 0.0 && diverse_std >= 0.0,
                    "synth: negative noise");
    detail::require(samples_per_cell >= 1, "synth: samples_per_cell must be >= 1");
    detail::require(n_paraphrases >= 1 && n_bias_prompts >= 1 && n_diverse >= 2,
                    "synth: prompt set sizes too small");
    if (d < n_contents + n_bias_classes) {
      throw DimensionError("synth: d=" + std::to_string(d) + " cannot hold " +
                           std::to_string(n_contents + n_bias_classes) + " orthogonal directions");
    }
  }
};

struct SynthCorpus {
  SynthConfig config;
  RowMatrix embeddings;  // the image-side pool
  std::vector<int> content_labels;
  std::vector<int> bias_labels;

  RowMatrix content_directions;  // n_contents x d, unit rows
  RowMatrix bias_directions;     // n_bias_classes x d, unit rows
  Vector stereotype_direction;   // r
  std::vector<double> stereotype_weights;  // t_b
  std::vector<int> stereotyped_class;      // per content, the class its query leaks toward
  std::string recipe;

  RowMatrix queries;                    // neutral query per content (with leak)
  std::vector<RowMatrix> paraphrases;   // per content
  RowMatrix diverse;
  std::vector<RowMatrix> bias_prompts;  // per bias class
  std::vector<RowMatrix> class_queries; // per bias class, one row per content
  RowMatrix sae_corpus;                 // generic data for training an SAE

  Index n_samples() const { return embeddings.rows(); }
};

namespace synth_detail {
class Gaussian {
 public:
  explicit Gaussian(std::uint64_t seed) : rng_(seed) {}
  double operator()(double stddev) { return stddev == 0.0 ? 0.0 : stddev * dist_(rng_); }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

inline void add_noise(Eigen::Ref<Vector> row, Gaussian& g, double stddev) {
  if (stddev == 0.0) return;
  for (Index j = 0; j < row.size(); ++j) row[j] += g(stddev);
}
}  // namespace synth_detail

inline SynthCorpus gen_synthetic_corpus(const SynthConfig& cfg) {
  cfg.validate();
  SynthCorpus out;
  out.config = cfg;
  synth_detail::Gaussian gauss(cfg.seed);

  std::vector<Index> axes(static_cast<std::size_t>(cfg.d));
  std::iota(axes.begin(), axes.end(), Index{0});
  std::shuffle(axes.begin(), axes.end(), gauss.engine());

  const Index d = cfg.d;
  out.content_directions = RowMatrix::Zero(cfg.n_contents, d);
  out.bias_directions = RowMatrix::Zero(cfg.n_bias_classes, d);
  for (int c = 0; c < cfg.n_contents; ++c) out.content_directions(c, axes[static_cast<std::size_t>(c)]) = 1.0;
  for (int b = 0; b < cfg.n_bias_classes; ++b)
    out.bias_directions(b, axes[static_cast<std::size_t>(cfg.n_contents + b)]) = 1.0;
  out.stereotype_direction =
      (out.content_directions.row(0) - out.content_directions.row(1)).transpose() / std::sqrt(2.0);
  for (int b = 0; b < cfg.n_bias_classes; ++b) {
    out.stereotype_weights.push_back(-1.0 + 2.0 * b / (cfg.n_bias_classes - 1));
  }
  for (int c = 0; c < cfg.n_contents; ++c) out.stereotyped_class.push_back(c % cfg.n_bias_classes);
  out.recipe =
      "x = content_strength*u_c + bias_strength*v_b + rho*t_b*r + N(0, noise_std^2 I); "
      "r = (u_0 - u_1)/sqrt(2); t_b = -1 + 2b/(n_bias_classes-1); u_c, v_b seeded coordinate axes";

  const Index n = static_cast<Index>(cfg.n_contents) * cfg.n_bias_classes * cfg.samples_per_cell;
  out.embeddings.resize(n, d);
  Index row = 0;
  for (int c = 0; c < cfg.n_contents; ++c) {
    for (int b = 0; b < cfg.n_bias_classes; ++b) {
      const Vector mean = cfg.content_strength * out.content_directions.row(c).transpose() +
                          cfg.bias_strength * out.bias_directions.row(b).transpose() +
                          cfg.rho * out.stereotype_weights[static_cast<std::size_t>(b)] *
                              out.stereotype_direction;
      for (int s = 0; s < cfg.samples_per_cell; ++s, ++row) {
        Vector x = mean;
        synth_detail::add_noise(x, gauss, cfg.noise_std);
        out.embeddings.row(row) = x.transpose();
        out.content_labels.push_back(c);
        out.bias_labels.push_back(b);
      }
    }
  }

  out.queries.resize(cfg.n_contents, d);
  for (int c = 0; c < cfg.n_contents; ++c) {
    const int sb = out.stereotyped_class[static_cast<std::size_t>(c)];
    out.queries.row(c) = cfg.content_strength * out.content_directions.row(c) +
                         cfg.rho * cfg.query_leak * cfg.bias_strength * out.bias_directions.row(sb);
  }

  for (int c = 0; c < cfg.n_contents; ++c) {
    RowMatrix p(cfg.n_paraphrases, d);
    for (int i = 0; i < cfg.n_paraphrases; ++i) {
      Vector x = cfg.content_strength * out.content_directions.row(c).transpose();
      synth_detail::add_noise(x, gauss, cfg.prompt_noise_std);
      p.row(i) = x.transpose();
    }
    out.paraphrases.push_back(std::move(p));
  }

  out.diverse.resize(cfg.n_diverse, d);
  for (int i = 0; i < cfg.n_diverse; ++i)
    for (Index j = 0; j < d; ++j) out.diverse(i, j) = gauss(cfg.diverse_std);

  for (int b = 0; b < cfg.n_bias_classes; ++b) {
    RowMatrix p(cfg.n_bias_prompts, d);
    for (int i = 0; i < cfg.n_bias_prompts; ++i) {
      Vector x = cfg.bias_strength * out.bias_directions.row(b).transpose();
      synth_detail::add_noise(x, gauss, cfg.prompt_noise_std);
      p.row(i) = x.transpose();
    }
    out.bias_prompts.push_back(std::move(p));
  }

  for (int b = 0; b < cfg.n_bias_classes; ++b) {
    RowMatrix q(cfg.n_contents, d);
    for (int c = 0; c < cfg.n_contents; ++c) {
      Vector x = cfg.content_strength * out.content_directions.row(c).transpose() +
                 cfg.bias_strength * out.bias_directions.row(b).transpose();
      synth_detail::add_noise(x, gauss, cfg.prompt_noise_std);
      q.row(c) = x.transpose();
    }
    out.class_queries.push_back(std::move(q));
  }

  // Generic data: each row lights 1..max_active random axes with random sign
  // and magnitude, so a dictionary of signed axes explains it exactly.
  out.sae_corpus = RowMatrix::Zero(cfg.n_sae_corpus, d);
  std::uniform_int_distribution<int> n_active(1, std::min<int>(cfg.sae_corpus_max_active, static_cast<int>(d)));
  std::uniform_int_distribution<Index> axis(0, d - 1);
  std::uniform_real_distribution<double> magnitude(0.2, 2.5);
  std::bernoulli_distribution negative(0.5);
  const double max_strength = std::max(cfg.content_strength, cfg.bias_strength);
  for (Index i = 0; i < cfg.n_sae_corpus; ++i) {
    const int k = n_active(gauss.engine());
    for (int t = 0; t < k; ++t) {
      const Index j = axis(gauss.engine());
      const double m = magnitude(gauss.engine()) * max_strength / 2.0;
      out.sae_corpus(i, j) += negative(gauss.engine()) ? -m : m;
    }
  }
  return out;
}

// Exact autoencoder for any input: latents are the positive and negative
// parts of each coordinate, W_e = [I; -I], W_d = [I, -I], b_pre = 0.
inline SaeWeights planted_sae(Index d) {
  detail::require(d >= 1, "planted_sae: d must be >= 1");
  SaeWeights w;
  w.encoder.resize(2 * d, d);
  w.encoder << Matrix::Identity(d, d), -Matrix::Identity(d, d);
  w.decoder = w.encoder.transpose();
  w.centering_bias = Vector::Zero(d);
  return w;
}

struct DictionaryConfig {
  Index d = 32;
  int n_atoms = 8;
  Index n_samples = 4096;
  int max_active = 3;
  double min_coefficient = 0.5;
  double max_coefficient = 1.5;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};

struct DictionaryCorpus {
  RowMatrix samples;
  RowMatrix atoms;  // n_atoms x d, unit rows
};

// Each sample sums 1..max_active distinct atoms with uniform coefficients.
inline DictionaryCorpus gen_dictionary_corpus(const DictionaryConfig& cfg) {
  detail::require(cfg.n_atoms >= 1 && cfg.max_active >= 1 && cfg.max_active <= cfg.n_atoms,
                  "dictionary corpus: need 1 <= max_active <= n_atoms");
  detail::require(cfg.d >= 1 && cfg.n_samples >= 1, "dictionary corpus: empty shape");
  synth_detail::Gaussian gauss(cfg.seed);
  DictionaryCorpus out;
  out.atoms.resize(cfg.n_atoms, cfg.d);
  for (int a = 0; a < cfg.n_atoms; ++a) {
    Vector v(cfg.d);
    do {
      for (Index j = 0; j < cfg.d; ++j) v[j] = gauss(1.0);
    } while (v.norm() == 0.0);
    out.atoms.row(a) = v.normalized().transpose();
  }
  std::uniform_int_distribution<int> count(1, cfg.max_active);
  std::uniform_real_distribution<double> coef(cfg.min_coefficient, cfg.max_coefficient);
  std::vector<int> ids(static_cast<std::size_t>(cfg.n_atoms));
  out.samples = RowMatrix::Zero(cfg.n_samples, cfg.d);
  for (Index i = 0; i < cfg.n_samples; ++i) {
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), gauss.engine());
    const int k = count(gauss.engine());
    for (int t = 0; t < k; ++t) out.samples.row(i) += coef(gauss.engine()) * out.atoms.row(ids[static_cast<std::size_t>(t)]);
    if (cfg.noise_std > 0.0) {
      for (Index j = 0; j < cfg.d; ++j) out.samples(i, j) += gauss(cfg.noise_std);
    }
  }
  return out;
}

// Mean per-coordinate variance, the scale against which reconstruction MSE
// is judged.
inline double mean_coordinate_variance(const RowMatrix& x) {
  detail::require(x.rows() > 0, "mean_coordinate_variance: empty input");
  const RowMatrix c = x.rowwise() - x.colwise().mean();
  return c.squaredNorm() / static_cast<double>(x.rows() * x.cols());
}

}  // namespace sem
