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

#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "sem/sae.hpp"
#include "sem/synth.hpp"

namespace {

sem::SaeWeights random_weights(std::mt19937_64& rng, sem::Index d, sem::Index s) {
  sem::SaeWeights w;
  w.encoder = oracle::random_matrix(rng, s, d);
  w.decoder = oracle::random_matrix(rng, d, s);
  w.centering_bias = oracle::random_vector(rng, d, -0.2, 0.2);
  return w;
}

TEST(SaeEncode, MatchesLoopOracle) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const auto w = random_weights(rng, 6, 17);
    const sem::Vector z = oracle::random_vector(rng, 6);
    const sem::Vector h = sem::sae_encode(z, w);
    const auto ref = oracle::encode(oracle::to_vec(z), w);
    for (sem::Index j = 0; j < h.size(); ++j) EXPECT_NEAR(h[j], ref[j], 1e-12);
    const sem::Vector back = sem::sae_decode(h, w);
    const auto ref_back = oracle::decode(ref, w);
    for (sem::Index i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], ref_back[i], 1e-12);
  }
}

TEST(SaeEncode, RowsAgreeWithSingleVectors) {
  std::mt19937_64 rng(12);
  const auto w = random_weights(rng, 5, 12);
  const sem::RowMatrix z = oracle::random_matrix(rng, 9, 5);
  const sem::RowMatrix h = sem::encode_rows(z, w);
  const sem::RowMatrix back = sem::decode_rows(h, w);
  for (sem::Index i = 0; i < z.rows(); ++i) {
    EXPECT_LT((h.row(i).transpose() - sem::sae_encode(z.row(i).transpose(), w)).norm(), 1e-12);
    EXPECT_LT((back.row(i).transpose() - sem::sae_decode(h.row(i).transpose(), w)).norm(), 1e-12);
  }
}

TEST(SaeEncode, OutputIsNonnegative) {
  std::mt19937_64 rng(13);
  const auto w = random_weights(rng, 8, 32);
  for (int t = 0; t < 50; ++t) {
    EXPECT_GE(sem::sae_encode(oracle::random_vector(rng, 8, -3, 3), w).minCoeff(), 0.0);
  }
}

TEST(SaeEncode, RejectsWrongWidthAndNonFinite) {
  std::mt19937_64 rng(14);
  const auto w = random_weights(rng, 4, 8);
  EXPECT_THROW(sem::sae_encode(sem::Vector::Zero(5), w), sem::DimensionError);
  sem::Vector z = sem::Vector::Zero(4);
  z[1] = std::nan("");
  EXPECT_THROW(sem::sae_encode(z, w), sem::NumericError);
  EXPECT_THROW(sem::sae_decode(sem::Vector::Zero(7), w), sem::DimensionError);
}

TEST(TopK, TiesGoToLowerIndexEnumerated) {
  // Every vector over {0,1,2}^5 and every k: library order equals a stable sort.
  std::vector<double> v(5);
  for (int code = 0; code < 243; ++code) {
    int c = code;
    for (auto& x : v) {
      x = c % 3;
      c /= 3;
    }
    const sem::Vector h = Eigen::Map<const sem::Vector>(v.data(), 5);
    for (sem::Index k = 1; k <= 5; ++k) {
      const auto got = sem::topk_indices(h, k);
      const auto want = oracle::topk(v, static_cast<std::size_t>(k));
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(static_cast<std::size_t>(got[i]), want[i]);
    }
  }
}

TEST(TopK, KeepsAtMostKAndOnlyLargest) {
  std::mt19937_64 rng(15);
  for (int t = 0; t < 200; ++t) {
    const sem::Vector h = oracle::random_vector(rng, 16, -1, 1);
    const sem::Index k = 1 + static_cast<sem::Index>(rng() % 16);
    const sem::Vector out = sem::topk_relu(h, k);
    EXPECT_LE((out.array() != 0.0).count(), k);
    EXPECT_GE(out.minCoeff(), 0.0);
    const double kept_min = (out.array() > 0.0).any()
                                ? out.unaryExpr([](double x) { return x > 0 ? x : 1e300; }).minCoeff()
                                : 1e300;
    for (sem::Index j = 0; j < h.size(); ++j) {
      if (out[j] == 0.0 && h[j] > 0.0) {
        EXPECT_LE(h[j], kept_min);
      }
    }
  }
}

TEST(TopK, RejectsOutOfRangeK) {
  const sem::Vector h = sem::Vector::Ones(4);
  EXPECT_THROW(sem::topk_relu(h, 0), sem::DimensionError);
  EXPECT_THROW(sem::topk_relu(h, 5), sem::DimensionError);
  EXPECT_NO_THROW(sem::topk_relu(h, 4));
}

// Brute-force minimizer of the sum of distances on a shrinking grid.
sem::Vector grid_median(const sem::RowMatrix& p) {
  double cx = p.col(0).mean(), cy = p.col(1).mean(), step = 1.0;
  auto cost = [&p](double x, double y) {
    double s = 0.0;
    for (sem::Index i = 0; i < p.rows(); ++i) s += std::hypot(p(i, 0) - x, p(i, 1) - y);
    return s;
  };
  for (int level = 0; level < 40; ++level) {
    double bx = cx, by = cy, best = cost(cx, cy);
    for (int i = -10; i <= 10; ++i)
      for (int j = -10; j <= 10; ++j) {
        const double c = cost(cx + i * step, cy + j * step);
        if (c < best) {
          best = c;
          bx = cx + i * step;
          by = cy + j * step;
        }
      }
    cx = bx;
    cy = by;
    step *= 0.5;
  }
  return sem::Vector{{cx, cy}};
}

TEST(GeometricMedian, MatchesGridSearch) {
  std::mt19937_64 rng(16);
  for (int t = 0; t < 10; ++t) {
    const sem::RowMatrix p = oracle::random_matrix(rng, 7 + t, 2, -2, 2);
    const sem::Vector got = sem::geometric_median(p);
    const sem::Vector want = grid_median(p);
    EXPECT_LT((got - want).norm(), 1e-5) << "case " << t;
  }
}

TEST(GeometricMedian, CollinearOddCountIsMiddlePoint) {
  sem::RowMatrix p(5, 2);
  p << 0, 0, 1, 1, 2, 2, 7, 7, 30, 30;
  EXPECT_LT((sem::geometric_median(p) - sem::Vector{{2.0, 2.0}}).norm(), 1e-6);
}

TEST(GeometricMedian, RobustToOutlierUnlikeMean) {
  sem::RowMatrix p(5, 1);
  p << 0, 1, 2, 3, 1000;
  EXPECT_NEAR(sem::geometric_median(p)[0], 2.0, 1e-6);
}

TEST(InitSae, ColumnNormsEncoderTransposeAndCentering) {
  std::mt19937_64 rng(17);
  const sem::RowMatrix train = oracle::random_matrix(rng, 40, 6);
  const auto w = sem::init_sae(6, 24, 3, train);
  for (sem::Index j = 0; j < 24; ++j) EXPECT_NEAR(w.decoder.col(j).norm(), 0.1, 1e-12);
  EXPECT_EQ(w.encoder, w.decoder.transpose());
  EXPECT_LT((w.centering_bias - sem::geometric_median(train)).norm(), 1e-12);

  sem::SaeInitOptions mean_opts;
  mean_opts.centering = sem::CenteringInit::kArithmeticMean;
  const auto wm = sem::init_sae(6, 24, 3, train, mean_opts);
  EXPECT_LT((wm.centering_bias - train.colwise().mean().transpose()).norm(), 1e-12);
  EXPECT_EQ(wm.decoder, w.decoder);
}

TEST(InitSae, DeterministicPerSeedAndDistinctAcrossSeeds) {
  std::mt19937_64 rng(18);
  const sem::RowMatrix train = oracle::random_matrix(rng, 10, 4);
  EXPECT_TRUE(sem::init_sae(4, 8, 5, train) == sem::init_sae(4, 8, 5, train));
  EXPECT_FALSE(sem::init_sae(4, 8, 5, train) == sem::init_sae(4, 8, 6, train));
}

TEST(InitSae, RejectsBadShapes) {
  const sem::RowMatrix train = sem::RowMatrix::Ones(3, 4);
  EXPECT_THROW(sem::init_sae(4, 4, 0, train), sem::DimensionError);
  EXPECT_THROW(sem::init_sae(4, 8, 0, sem::RowMatrix::Ones(3, 5)), sem::DimensionError);
  EXPECT_THROW(sem::init_sae(4, 8, 0, sem::RowMatrix(0, 4)), sem::DimensionError);
}

TEST(PlantedSae, ReconstructsAnyInputExactly) {
  std::mt19937_64 rng(19);
  const auto w = sem::planted_sae(7);
  for (int t = 0; t < 20; ++t) {
    const sem::Vector z = oracle::random_vector(rng, 7, -5, 5);
    EXPECT_LT((sem::sae_decode(sem::sae_encode(z, w), w) - z).norm(), 1e-12);
  }
}

}  // namespace
