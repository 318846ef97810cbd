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

// Central finite differences on the matryoshka loss, shared by the unit
// tests and the acceptance binary.

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "sem/train.hpp"

namespace gradcheck {

struct Result {
  double rel_error = 0.0;
  double grad_norm = 0.0;
};

// A small random instance: d=5, s=12, granularities {3, 7}, 6 rows. Every
// parameter (encoder, decoder, centering bias) is perturbed by +-eps.
inline Result check_instance(std::uint64_t seed, double eps = 1e-6) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const sem::Index d = 5, s = 12, n = 6;
  sem::SaeWeights w;
  w.encoder = sem::Matrix(s, d);
  w.decoder = sem::Matrix(d, s);
  w.centering_bias = sem::Vector(d);
  sem::RowMatrix x(n, d);
  for (sem::Index i = 0; i < w.encoder.size(); ++i) w.encoder.data()[i] = u(rng);
  for (sem::Index i = 0; i < w.decoder.size(); ++i) w.decoder.data()[i] = u(rng);
  for (sem::Index i = 0; i < d; ++i) w.centering_bias[i] = 0.2 * u(rng);
  for (sem::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);

  sem::TrainConfig cfg;
  cfg.latent_dim = s;
  cfg.granularities = {3, 7};
  cfg.resolve();

  const auto analytic = sem::matryoshka_loss(x, w, cfg, true).gradients;
  std::vector<double*> params;
  std::vector<double> grads;
  auto collect = [&](auto& p, const auto& g) {
    for (sem::Index i = 0; i < p.size(); ++i) {
      params.push_back(p.data() + i);
      grads.push_back(g.data()[i]);
    }
  };
  collect(w.encoder, analytic.encoder);
  collect(w.decoder, analytic.decoder);
  collect(w.centering_bias, analytic.centering_bias);

  double diff2 = 0.0, norm2 = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double orig = *params[k];
    *params[k] = orig + eps;
    const double up = sem::matryoshka_loss(x, w, cfg, false).loss;
    *params[k] = orig - eps;
    const double down = sem::matryoshka_loss(x, w, cfg, false).loss;
    *params[k] = orig;
    const double fd = (up - down) / (2.0 * eps);
    diff2 += (fd - grads[k]) * (fd - grads[k]);
    norm2 += grads[k] * grads[k];
  }
  Result r;
  r.grad_norm = std::sqrt(norm2);
  r.rel_error = std::sqrt(diff2) / std::max(r.grad_norm, 1e-12);
  return r;
}

}  // namespace gradcheck
