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

#include <cstring>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "sem/binary_io.hpp"
#include "sem/manifest.hpp"

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path(SEM_TEST_TMP) / "io" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string format_error_of(const std::vector<std::uint8_t>& bytes) {
  try {
    sem::parse_embedding_matrix(bytes);
  } catch (const sem::FormatError& e) {
    return e.what();
  }
  return "";
}

// float32 values survive the round trip bit-exactly.
sem::RowMatrix float_matrix(std::mt19937_64& rng, sem::Index r, sem::Index c) {
  sem::RowMatrix m = oracle::random_matrix(rng, r, c, -10, 10);
  return m.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

TEST(EmbeddingFile, RoundTripIsBitExactAndLittleEndian) {
  std::mt19937_64 rng(71);
  const auto dir = scratch("roundtrip");
  const sem::RowMatrix m = float_matrix(rng, 3, 4);
  sem::write_embedding_matrix(m, dir / "m.seme");
  EXPECT_EQ(sem::read_embedding_matrix(dir / "m.seme"), m);

  const auto bytes = oracle::slurp(dir / "m.seme");
  ASSERT_EQ(bytes.size(), 16u + 4u * 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SEME");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 3);
  EXPECT_EQ(bytes[12], 4);
  // Decode the first payload float by hand.
  const std::uint32_t bits = bytes[16] | (bytes[17] << 8) | (bytes[18] << 16) |
                             (static_cast<std::uint32_t>(bytes[19]) << 24);
  float f;
  std::memcpy(&f, &bits, 4);
  EXPECT_EQ(static_cast<double>(f), m(0, 0));
  EXPECT_FALSE(fs::exists(dir / "m.seme.tmp"));
}

TEST(EmbeddingFile, TruncatedPayloadReportsSizes) {
  std::mt19937_64 rng(72);
  auto bytes = sem::serialize_embedding_matrix(float_matrix(rng, 3, 4));
  bytes.resize(bytes.size() - 5);
  const auto msg = format_error_of(bytes);
  EXPECT_NE(msg.find("expected 64 bytes, got 59"), std::string::npos) << msg;
  EXPECT_NE(format_error_of({'S', 'E', 'M'}).find("too short"), std::string::npos);
}

TEST(EmbeddingFile, BadMagicAndVersion) {
  auto bytes = sem::serialize_embedding_matrix(sem::RowMatrix::Ones(1, 2));
  auto wrong = bytes;
  wrong[3] = 'W';
  EXPECT_NE(format_error_of(wrong).find("bad magic"), std::string::npos);
  wrong = bytes;
  wrong[4] = 2;
  EXPECT_NE(format_error_of(wrong).find("unsupported version 2"), std::string::npos);
  EXPECT_THROW(sem::parse_sae_weights(bytes), sem::FormatError);
}

TEST(EmbeddingFile, ZeroRowsIsValid) {
  const auto dir = scratch("empty");
  sem::write_embedding_matrix(sem::RowMatrix(0, 7), dir / "e.seme");
  const auto m = sem::read_embedding_matrix(dir / "e.seme");
  EXPECT_EQ(m.rows(), 0);
  EXPECT_EQ(m.cols(), 7);
}

TEST(EmbeddingFile, NonFinitePolicy) {
  sem::RowMatrix m = sem::RowMatrix::Ones(2, 2);
  m(1, 0) = std::nan("");
  const auto bytes = sem::serialize_embedding_matrix(m);
  EXPECT_NE(format_error_of(bytes).find("non-finite"), std::string::npos);
  const auto allowed = sem::parse_embedding_matrix(bytes, sem::NanPolicy::kAllow);
  EXPECT_TRUE(std::isnan(allowed(1, 0)));
}

TEST(WeightsFile, RoundTripAndValidation) {
  std::mt19937_64 rng(73);
  const auto dir = scratch("weights");
  sem::SaeWeights w;
  w.encoder = float_matrix(rng, 10, 4);
  w.decoder = float_matrix(rng, 4, 10);
  w.centering_bias = float_matrix(rng, 4, 1).col(0);
  sem::save_sae_weights(w, dir / "w.semw");
  EXPECT_TRUE(sem::load_sae_weights(dir / "w.semw") == w);
  auto bytes = oracle::slurp(dir / "w.semw");
  bytes.pop_back();
  EXPECT_THROW(sem::parse_sae_weights(bytes), sem::FormatError);
}

TEST(AtomicWrite, FailureLeavesNoPartialFile) {
  const auto dir = scratch("atomic");
  // A non-empty directory cannot be replaced by the final rename.
  const fs::path target = dir / "occupied";
  fs::create_directories(target / "child");
  EXPECT_THROW(sem::write_embedding_matrix(sem::RowMatrix::Ones(1, 1), target), sem::FormatError);
  EXPECT_TRUE(fs::is_directory(target));
  EXPECT_FALSE(fs::exists(dir / "occupied.tmp"));
}

TEST(LabelCsv, RoundTripAndStringMapping) {
  const auto dir = scratch("labels");
  const std::vector<int> labels{2, 0, 1}, groups{1, 1, 0};
  sem::write_text_atomic(dir / "a.csv", sem::label_csv_text(labels, groups));
  const auto t = sem::read_label_csv(dir / "a.csv");
  EXPECT_EQ(t.labels, labels);
  EXPECT_EQ(t.groups, groups);

  // Shuffled index order, string names mapped in sorted order.
  std::ofstream(dir / "b.csv") << "index,label,group\n2,nurse,male\n0,doctor,female\n1,nurse,female\n";
  const auto s = sem::read_label_csv(dir / "b.csv");
  EXPECT_EQ(s.labels, (std::vector<int>{0, 1, 1}));
  EXPECT_EQ(s.groups, (std::vector<int>{0, 0, 1}));
  EXPECT_EQ(s.label_names, (std::vector<std::string>{"doctor", "nurse"}));

  std::ofstream(dir / "c.csv") << "index,label,group\n0,1,1\n0,1,0\n";
  EXPECT_THROW(sem::read_label_csv(dir / "c.csv"), sem::FormatError);
  std::ofstream(dir / "d.csv") << "idx,label\n";
  EXPECT_THROW(sem::read_label_csv(dir / "d.csv"), sem::FormatError);
}

TEST(Manifest, RolesPathsAndErrors) {
  const auto dir = scratch("manifest");
  sem::write_embedding_matrix(sem::RowMatrix::Ones(3, 2), dir / "d.seme");
  const sem::Json ok = sem::Json::parse(R"({"params":{"folds":3},"embeddings":[
      {"role":"diverse","path":"d.seme","rows":3,"cols":2},
      {"role":"bias:gender:female","path":"d.seme"},
      {"role":"bias:gender:male","path":"d.seme"}]})");
  const auto m = sem::Manifest::from_json(ok, dir);
  EXPECT_EQ(m.load_matrix(m.require("diverse", "test")).rows(), 3);
  const auto attrs = m.bias_attributes();
  ASSERT_EQ(attrs.at("gender").size(), 2u);
  EXPECT_EQ(attrs.at("gender")[1].name, "male");
  EXPECT_EQ(m.params()["folds"], 3);

  auto with = [&](const std::string& entries) {
    return sem::Json::parse(R"({"embeddings":[)" + entries + "]}");
  };
  EXPECT_THROW(sem::Manifest::from_json(with(R"({"role":"bias:gender","path":"d.seme"})"), dir),
               sem::FormatError);
  EXPECT_THROW(sem::Manifest::from_json(with(R"({"role":"diverse","path":"nope.seme"})"), dir),
               sem::UsageError);
  const auto bad_dims = sem::Manifest::from_json(with(R"({"role":"diverse","path":"d.seme","rows":4})"), dir);
  EXPECT_THROW(bad_dims.load_matrix(bad_dims.entries()[0]), sem::FormatError);
  try {
    m.require("paraphrases", "sem_i");
    FAIL();
  } catch (const sem::UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("paraphrases"), std::string::npos);
  }
  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_THROW(sem::Manifest::load(dir / "broken.json"), sem::FormatError);
}

TEST(FileHash, Fnv1aKnownVectors) {
  EXPECT_EQ(sem::fnv1a64({}), 0xcbf29ce484222325ULL);
  EXPECT_EQ(sem::fnv1a64({'a'}), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(sem::fnv1a64({'f', 'o', 'o', 'b', 'a', 'r'}), 0x85944171f73967e8ULL);
}

}  // namespace
