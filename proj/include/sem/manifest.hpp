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

// Run manifests and label tables.
//
// A manifest is a JSON document:
//
//   {
//     "embeddings": [
//       {"role": "diverse", "path": "diverse.seme"},
//       {"role": "paraphrases", "path": "para_0.seme", "query": 0},
//       {"role": "bias:gender:female", "path": "female.seme"},
//       {"role": "images", "path": "images.seme", "labels": "images.csv"}
//     ],
//     "params": {"folds": 5, "seed": 0}
//   }
//
// Paths are relative to the manifest's directory. Label files are CSV with
// the header `index,label,group`.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sem/binary_io.hpp"
#include "sem/common.hpp"

namespace sem {

using Json = nlohmann::ordered_json;

inline std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string file_hash(const std::filesystem::path& path) {
  const auto bytes = io_detail::read_all(path);
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << fnv1a64(bytes);
  return "fnv1a64:" + os.str();
}

struct LabelTable {
  std::vector<int> labels;
  std::vector<int> groups;
  std::vector<std::string> label_names;  // id -> name
  std::vector<std::string> group_names;

  std::size_t size() const { return labels.size(); }
};

namespace manifest_detail {
inline std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
  return s.substr(i);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::optional<int> parse_int(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  try {
    const long v = std::stol(s, &used);
    if (used != s.size() || v < 0 || v > 1'000'000'000) return std::nullopt;
    return static_cast<int>(v);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

// Integer columns are used as ids directly; anything else is mapped to ids
// in sorted-name order.
inline std::vector<int> encode_column(const std::vector<std::string>& raw,
                                      std::vector<std::string>& names) {
  std::vector<int> ids(raw.size());
  bool all_int = true;
  for (const auto& s : raw) all_int = all_int && parse_int(s).has_value();
  if (all_int) {
    int mx = -1;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      ids[i] = *parse_int(raw[i]);
      mx = std::max(mx, ids[i]);
    }
    names.clear();
    for (int i = 0; i <= mx; ++i) names.push_back(std::to_string(i));
    return ids;
  }
  std::map<std::string, int> index;
  for (const auto& s : raw) index.emplace(s, 0);
  names.clear();
  int next = 0;
  for (auto& [name, id] : index) {
    id = next++;
    names.push_back(name);
  }
  for (std::size_t i = 0; i < raw.size(); ++i) ids[i] = index.at(raw[i]);
  return ids;
}
}  // namespace manifest_detail

inline LabelTable read_label_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open label file " + path.string());
  std::string line;
  if (!std::getline(in, line) || manifest_detail::trim(line) != "index,label,group") {
    throw FormatError(path.string() + ": expected header 'index,label,group'");
  }
  std::vector<std::pair<int, std::pair<std::string, std::string>>> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (manifest_detail::trim(line).empty()) continue;
    const auto cells = manifest_detail::split_csv(line);
    if (cells.size() != 3) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
    }
    const auto idx = manifest_detail::parse_int(cells[0]);
    if (!idx) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad index");
    rows.push_back({*idx, {cells[1], cells[2]}});
  }
  std::vector<std::string> labels(rows.size()), groups(rows.size());
  std::vector<bool> seen(rows.size(), false);
  for (const auto& [i, lg] : rows) {
    if (i < 0 || static_cast<std::size_t>(i) >= rows.size() || seen[static_cast<std::size_t>(i)]) {
      throw FormatError(path.string() + ": indices must be a permutation of 0..n-1");
    }
    seen[static_cast<std::size_t>(i)] = true;
    labels[static_cast<std::size_t>(i)] = lg.first;
    groups[static_cast<std::size_t>(i)] = lg.second;
  }
  LabelTable t;
  t.labels = manifest_detail::encode_column(labels, t.label_names);
  t.groups = manifest_detail::encode_column(groups, t.group_names);
  return t;
}

inline std::string label_csv_text(std::span<const int> labels, std::span<const int> groups) {
  detail::require(labels.size() == groups.size(), "label csv: column lengths differ");
  std::string out = "index,label,group\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(labels[i]) + "," + std::to_string(groups[i]) + "\n";
  }
  return out;
}

struct ManifestEntry {
  std::string role;
  std::string path;  // as written in the manifest
  std::filesystem::path resolved;
  std::optional<std::filesystem::path> labels;
  std::optional<int> query;
  std::optional<Index> rows;
  std::optional<Index> cols;
};

struct BiasClassEntry {
  std::string name;
  const ManifestEntry* entry = nullptr;
};

inline bool is_valid_role(const std::string& role) {
  static const char* plain[] = {"diverse", "paraphrases", "images", "classes",
                                "queries", "corpus",      "features"};
  for (const char* p : plain)
    if (role == p) return true;
  if (role.rfind("bias:", 0) == 0) {
    const auto rest = role.substr(5);
    const auto colon = rest.find(':');
    return colon != std::string::npos && colon > 0 && colon + 1 < rest.size() &&
           rest.find(':', colon + 1) == std::string::npos;
  }
  return false;
}

class Manifest {
 public:
  static Manifest from_json(const Json& doc, const std::filesystem::path& base_dir) {
    Manifest m;
    m.base_ = base_dir;
    if (!doc.is_object()) throw FormatError("manifest: top level must be an object");
    if (doc.contains("params")) {
      if (!doc["params"].is_object()) throw FormatError("manifest: 'params' must be an object");
      m.params_ = doc["params"];
    }
    if (!doc.contains("embeddings") || !doc["embeddings"].is_array()) {
      throw FormatError("manifest: missing 'embeddings' array");
    }
    for (const auto& e : doc["embeddings"]) {
      if (!e.is_object() || !e.contains("role") || !e.contains("path") || !e["role"].is_string() ||
          !e["path"].is_string()) {
        throw FormatError("manifest: each embedding entry needs string 'role' and 'path'");
      }
      ManifestEntry me;
      me.role = e["role"].get<std::string>();
      if (!is_valid_role(me.role)) throw FormatError("manifest: invalid role '" + me.role + "'");
      me.path = e["path"].get<std::string>();
      me.resolved = base_dir / me.path;
      if (!std::filesystem::exists(me.resolved)) {
        throw UsageError("manifest: file for role '" + me.role + "' not found: " + me.path);
      }
      if (e.contains("labels")) {
        me.labels = base_dir / e["labels"].get<std::string>();
        if (!std::filesystem::exists(*me.labels)) {
          throw UsageError("manifest: label file for role '" + me.role + "' not found");
        }
      }
      if (e.contains("query")) me.query = e["query"].get<int>();
      if (e.contains("rows")) me.rows = e["rows"].get<Index>();
      if (e.contains("cols")) me.cols = e["cols"].get<Index>();
      m.entries_.push_back(std::move(me));
    }
    return m;
  }

  static Manifest load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open manifest " + path.string());
    Json doc;
    try {
      doc = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    return from_json(doc, path.parent_path());
  }

  const std::vector<ManifestEntry>& entries() const { return entries_; }
  const Json& params() const { return params_; }

  const ManifestEntry* find(const std::string& role) const {
    for (const auto& e : entries_)
      if (e.role == role) return &e;
    return nullptr;
  }

  const ManifestEntry& require(const std::string& role, const std::string& why) const {
    const auto* e = find(role);
    if (!e) throw UsageError("manifest: missing required role '" + role + "' (" + why + ")");
    return *e;
  }

  std::vector<const ManifestEntry*> find_all(const std::string& role) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries_)
      if (e.role == role) out.push_back(&e);
    return out;
  }

  // attribute -> classes in manifest order
  std::map<std::string, std::vector<BiasClassEntry>> bias_attributes() const {
    std::map<std::string, std::vector<BiasClassEntry>> out;
    for (const auto& e : entries_) {
      if (e.role.rfind("bias:", 0) != 0) continue;
      const auto rest = e.role.substr(5);
      const auto colon = rest.find(':');
      out[rest.substr(0, colon)].push_back({rest.substr(colon + 1), &e});
    }
    return out;
  }

  // Loads an entry, checking declared dimensions against the file header.
  RowMatrix load_matrix(const ManifestEntry& e) const {
    RowMatrix m = read_embedding_matrix(e.resolved);
    if (e.rows && *e.rows != m.rows()) {
      throw FormatError("manifest: role '" + e.role + "' declares " + std::to_string(*e.rows) +
                        " rows, file has " + std::to_string(m.rows()));
    }
    if (e.cols && *e.cols != m.cols()) {
      throw FormatError("manifest: role '" + e.role + "' declares " + std::to_string(*e.cols) +
                        " cols, file has " + std::to_string(m.cols()));
    }
    return m;
  }

  LabelTable load_labels(const ManifestEntry& e, Index expected_rows) const {
    if (!e.labels) throw UsageError("manifest: role '" + e.role + "' needs a 'labels' file");
    LabelTable t = read_label_csv(*e.labels);
    if (static_cast<Index>(t.size()) != expected_rows) {
      throw FormatError("manifest: labels for role '" + e.role + "' have " +
                        std::to_string(t.size()) + " rows, embeddings have " +
                        std::to_string(expected_rows));
    }
    return t;
  }

 private:
  std::filesystem::path base_;
  std::vector<ManifestEntry> entries_;
  Json params_ = Json::object();
};

}  // namespace sem
