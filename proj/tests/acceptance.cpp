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

// Acceptance suite. Prints one PASS/FAIL line per criterion with the
// measured numbers; exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "cli_pipeline.hpp"
#include "e2e.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "sem/sem.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& why) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << why << "]";
    }
  }
};

std::string fmt(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

// Reference probe accuracies: gender (2 classes) and race (7 classes).
Outcome disentanglement_fixtures() {
  Outcome o;
  const auto t0 = Clock::now();
  const double g_clip = sem::disentanglement_score(0.923, 1.000, 0.5).raw;
  const double g_sae = sem::disentanglement_score(0.800, 0.997, 0.5).raw;
  const double r_clip = sem::disentanglement_score(0.957, 1.000, 1.0 / 7).raw;
  const double r_sae = sem::disentanglement_score(0.755, 1.000, 1.0 / 7).raw;
  const double elapsed = seconds_since(t0);
  o.detail << "gender D_clip=" << fmt(g_clip) << " D_sae=" << fmt(g_sae) << " ratio=" << fmt(g_sae / g_clip, 2)
           << "; race D_clip=" << fmt(r_clip) << " D_sae=" << fmt(r_sae) << " ratio=" << fmt(r_sae / r_clip, 2)
           << "; " << fmt(elapsed * 1e3, 3) << " ms";
  o.require(std::abs(g_clip - 0.154) <= 0.002, "gender CLIP");
  o.require(std::abs(g_sae - 0.396) <= 0.002, "gender SAE");
  o.require(std::abs(r_clip - 0.050) <= 0.002, "race CLIP");
  o.require(std::abs(r_sae - 0.286) <= 0.002, "race SAE");
  o.require(std::abs(g_sae / g_clip - 2.57) <= 0.02, "gender ratio");
  o.require(std::abs(r_sae / r_clip - 5.7) <= 0.1, "race ratio");
  o.require(elapsed < 1.0, "runtime");
  return o;
}

// Each fixture is a 2x2 (task x group) grid of (count, correct) cells whose
// accuracies round to the reference Acc and WG.
Outcome gap_fixtures() {
  struct Row {
    const char* name;
    double acc, wg, gap;
    std::vector<std::pair<int, int>> cells;
  };
  const std::vector<Row> rows = {
      {"CelebA/B16", 0.748, 0.612, 0.136, {{1000, 612}, {2333, 1790}, {2333, 1791}, {2334, 1791}}},
      // 0.869 - 0.780 = 0.089; the reference 0.090 comes from unrounded values.
      {"CelebA/L14", 0.869, 0.780, 0.090, {{2500, 1949}, {2500, 2248}, {2500, 2248}, {2500, 2249}}},
      {"Waterbirds/B16", 0.829, 0.250, 0.579, {{1000, 250}, {2333, 2127}, {2333, 2127}, {2334, 2128}}},
      {"Waterbirds/L14", 0.862, 0.396, 0.466, {{1000, 396}, {2333, 2166}, {2333, 2167}, {2334, 2167}}},
  };
  Outcome o;
  for (const auto& r : rows) {
    const auto f = oracle::cells_to_labels(r.cells);
    const auto m = sem::group_metrics(f.predictions, f.tasks, f.groups);
    o.detail << r.name << " gap=" << fmt(m.gap) << " ";
    o.require(std::abs(m.accuracy - r.acc) <= 5e-4, std::string(r.name) + " acc");
    o.require(std::abs(m.worst_group_accuracy - r.wg) <= 5e-4, std::string(r.name) + " wg");
    o.require(std::abs(m.gap - r.gap) <= 1e-3, std::string(r.name) + " gap");
    o.require(m.gap == m.accuracy - m.worst_group_accuracy, std::string(r.name) + " identity");
  }
  return o;
}

Outcome scoring_oracle() {
  Outcome o;
  std::mt19937_64 rng(2026);
  int mismatches = 0, cases = 0;
  auto rows = [&rng] { return 1 + static_cast<sem::Index>(rng() % 50); };
  for (int t = 0; t < 100; ++t, ++cases) {
    const sem::Index s = 1 + static_cast<sem::Index>(rng() % 64);
    const sem::RowMatrix diverse = oracle::random_latents(rng, rows(), s);
    const sem::RowMatrix para = oracle::random_latents(rng, rows(), s);
    const int n_classes = 2 + static_cast<int>(rng() % 3);
    sem::BiasSpec spec;
    std::vector<oracle::Mat> oclasses;
    for (int c = 0; c < n_classes; ++c) {
      spec.classes.push_back("c" + std::to_string(c));
      spec.class_prompts.push_back({spec.classes.back(), oracle::random_latents(rng, rows(), s),
                                    sem::PromptRole::kBiasClass});
      oclasses.push_back(oracle::to_mat(spec.class_prompts.back().latents));
    }
    const auto od = oracle::to_mat(diverse);
    const auto got_aug = sem::content_score(para, diverse, true);
    const auto want_aug = oracle::percentile(oracle::column_median(oracle::to_mat(para)), od);
    const auto got_one = sem::content_score(para.topRows(1), diverse, false);
    const auto want_one = oracle::percentile(oracle::to_mat(para)[0], od);
    const auto got = sem::bias_scores(spec, diverse);
    const auto want = oracle::bias_scores(oclasses, od);
    bool same = true;
    for (sem::Index j = 0; j < s; ++j) {
      same &= got_aug[j] == want_aug[j] && got_one[j] == want_one[j] && got.s_bias[j] == want.bias[j];
      for (int c = 0; c < n_classes; ++c)
        same &= got.s_gen[c][j] == want.gen[c][j] && got.s_spec[c][j] == want.spec[c][j];
    }
    mismatches += !same;
  }
  o.detail << cases << " cases, " << mismatches << " mismatches";
  o.require(mismatches == 0, "exact equality");
  return o;
}

Outcome steering_algebra() {
  Outcome o;
  std::mt19937_64 rng(77);
  const int n = 1000;
  int fixed = 0, replaced = 0, sign = 0, degenerate = 0;
  const sem::Index d = 8, s = 16;
  const auto w = sem::planted_sae(d);
  sem::BiasSpec spec;
  spec.attribute = "g";
  for (int c = 0; c < 2; ++c) {
    spec.classes.push_back("c" + std::to_string(c));
    sem::RowMatrix p = oracle::random_matrix(rng, 6, d);
    p.col(0).array() += c ? -1.0 : 1.0;
    spec.class_prompts.push_back({spec.classes.back(), sem::encode_rows(p, w), sem::PromptRole::kBiasClass});
  }
  const sem::Debiaser deb(w, sem::encode_rows(oracle::random_matrix(rng, 41, d), w), spec);
  std::uniform_int_distribution<int> grid(0, 40);
  for (int t = 0; t < n; ++t) {
    const sem::Vector h = oracle::random_latents(rng, 1, s).row(0).transpose();
    const sem::Vector m = oracle::random_latents(rng, 1, s).row(0).transpose();
    fixed += sem::steer(h, sem::Vector::Ones(s), m) == h;
    replaced += sem::steer(h, sem::Vector::Zero(s), m) == m;

    sem::Vector sc(s), sb(s);
    for (sem::Index j = 0; j < s; ++j) {
      sc[j] = grid(rng) / 40.0;
      sb[j] = grid(rng) / 40.0;
    }
    const sem::Vector mod = sem::modulation_aware(sc, sb);
    bool ok = true;
    for (sem::Index j = 0; j < s; ++j) ok &= (mod[j] >= 1.0) == (sc[j] >= sb[j]) && (mod[j] > 1.0) == (sc[j] > sb[j]);
    sign += ok;

    sem::QueryLatents q;
    q.h_q = sem::sae_encode(oracle::random_vector(rng, d), w);
    q.paraphrases = q.h_q.transpose();
    const auto b = deb.debias(sem::SteeringVariant::kSemB, q);
    const auto bi = deb.debias(sem::SteeringVariant::kSemBI, q);
    degenerate += b.embedding == bi.embedding && b.latent == bi.latent;
  }
  o.detail << "M=1 fixed " << fixed << "/" << n << ", M=0 replace " << replaced << "/" << n << ", sign "
           << sign << "/" << n << ", sem_bi==sem_b " << degenerate << "/" << n;
  o.require(fixed == n && replaced == n && sign == n && degenerate == n, "exact on every vector");
  return o;
}

Outcome trainer() {
  Outcome o;
  const auto t0 = Clock::now();
  const sem::DictionaryConfig dc;  // d=32, 8 atoms
  const auto corpus = sem::gen_dictionary_corpus(dc).samples;
  sem::TrainConfig cfg;
  cfg.latent_dim = 64;
  cfg.granularities = {16, 32};
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 256;
  cfg.total_steps = 2000;
  cfg.validate_every = 500;
  long sparsity_violations = 0;
  const auto res = sem::train_msae(corpus, cfg, [&](const sem::TrainLogRecord& r) {
    for (std::size_t g = 0; g < r.max_active.size(); ++g) sparsity_violations += r.max_active[g] > cfg.granularities[g];
  });
  const double variance = sem::mean_coordinate_variance(corpus);
  const auto& val = *res.log.back().val_mse;
  const double worst_val = *std::max_element(val.begin(), val.end());
  long first_below = -1;
  for (const auto& r : res.log)
    if (first_below < 0 && r.val_mse && *std::max_element(r.val_mse->begin(), r.val_mse->end()) < 0.1 * variance)
      first_below = r.step + 1;

  double worst_fd = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) worst_fd = std::max(worst_fd, gradcheck::check_instance(seed).rel_error);
  const double elapsed = seconds_since(t0);

  o.detail << "val_mse=" << val[0] << "/" << val[1] << " vs 0.1*var=" << 0.1 * variance
           << " (first below at step " << first_below << "), sparsity violations=" << sparsity_violations
           << ", max FD rel err=" << worst_fd << ", " << fmt(elapsed, 1) << " s";
  o.require(worst_val < 0.1 * variance, "validation MSE");
  o.require(sparsity_violations == 0, "TopK sparsity");
  o.require(worst_fd <= 1e-3, "finite differences");
  o.require(elapsed < 60.0, "runtime");
  return o;
}

Outcome end_to_end() {
  Outcome o;
  for (double rho : {0.5, 0.75, 1.0}) {
    const auto s = e2e::run(rho, 5);
    o.detail << "rho=" << rho << ": KL " << fmt(s.kl_before, 3) << "->" << fmt(s.kl_after, 3) << ", MaxSkew "
             << fmt(s.skew_before, 3) << "->" << fmt(s.skew_after, 3) << ", BN " << fmt(s.bn_before, 3) << "->"
             << fmt(s.bn_after, 3) << ", CP " << fmt(s.cp_before, 3) << "->" << fmt(s.cp_after, 3) << "; ";
    const std::string tag = "rho=" + fmt(rho, 2);
    o.require(s.kl_after < s.kl_before, tag + " KL");
    o.require(s.skew_after < s.skew_before, tag + " MaxSkew");
    o.require(s.bn_after > s.bn_before, tag + " BN");
    o.require(s.cp_after > s.cp_before - 0.05, tag + " CP");
  }
  return o;
}

Outcome metric_oracles() {
  Outcome o;
  long checked = 0;
  double worst = 0.0;
  for (int n_groups = 2; n_groups <= 3; ++n_groups) {
    std::vector<std::vector<double>> targets = {std::vector<double>(n_groups, 1.0 / n_groups)};
    targets.push_back(n_groups == 2 ? std::vector<double>{0.7, 0.3} : std::vector<double>{0.5, 0.3, 0.2});
    for (const auto& q : targets) {
      for (int k = 1; k <= 10; ++k) {
        long total = 1;
        for (int i = 0; i < k; ++i) total *= n_groups;
        std::vector<int> g(static_cast<std::size_t>(k));
        for (long code = 0; code < total; ++code) {
          long c = code;
          for (auto& x : g) {
            x = static_cast<int>(c % n_groups);
            c /= n_groups;
          }
          worst = std::max(worst, std::abs(sem::kl_at_k(g, n_groups, q) - oracle::kl(g, n_groups, q)));
          worst = std::max(worst, std::abs(sem::maxskew_at_k(g, n_groups, q) - oracle::maxskew(g, n_groups, q)));
          // Treat the group sequence as task labels for precision against class 0.
          long hits = 0;
          for (int x : g) hits += x == 0;
          worst = std::max(worst, std::abs(sem::precision_at_k(g, 0) - static_cast<double>(hits) / k));
          ++checked;
        }
      }
    }
  }
  // Hand-computed values.
  const std::vector<double> u{0.5, 0.5};
  const std::vector<int> skewed{0, 0, 0, 1};
  worst = std::max(worst, std::abs(sem::kl_at_k(skewed, 2, u) - (0.75 * std::log(1.5) + 0.25 * std::log(0.5))));
  worst = std::max(worst, std::abs(sem::maxskew_at_k(skewed, 2, u) - std::log(1.5)));
  o.detail << checked << " enumerated sequences, max abs diff " << worst;
  o.require(worst <= 1e-9, "tolerance 1e-9");
  return o;
}

Outcome cli_determinism() {
  Outcome o;
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(SEM_TEST_TMP) / "acceptance" / "determinism";
  const auto f1 = cli_pipeline::run_all(dir);
  const auto first = cli_pipeline::snapshot(dir);
  const auto f2 = cli_pipeline::run_all(dir);
  const auto second = cli_pipeline::snapshot(dir);
  for (const auto& f : f1) o.detail << "run1 " << f << "; ";
  for (const auto& f : f2) o.detail << "run2 " << f << "; ";
  o.require(f1.empty() && f2.empty(), "every subcommand exits 0");
  int differing = 0;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    if (it == second.end() || it->second != bytes) {
      ++differing;
      o.detail << "differs: " << name << "; ";
    }
  }
  o.require(first.size() == second.size(), "same artifact set");
  o.detail << cli_pipeline::steps(dir).size() << " invocations, " << first.size() << " artifacts, " << differing
           << " differing";
  o.require(differing == 0 && !first.empty(), "bit-identical artifacts");
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"disentanglement-score fixtures", disentanglement_fixtures},
      {"gap identity on reference fixtures", gap_fixtures},
      {"scoring oracle equivalence", scoring_oracle},
      {"steering algebra", steering_algebra},
      {"matryoshka trainer", trainer},
      {"end-to-end synthetic debiasing", end_to_end},
      {"retrieval metric oracles", metric_oracles},
      {"cli determinism", cli_determinism},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail.str() << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
