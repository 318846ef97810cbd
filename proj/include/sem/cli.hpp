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

// The `sem` command line: one binary, one subcommand per pipeline stage.
// Exit codes: 0 success, 2 usage, 3 format, 4 numeric failure.
//
// Every JSON report carries a "config" block with the subcommand, every
// resolved option and a hash of every input file, and no wall-clock data,
// so identical invocations produce identical bytes.

#pragma once

#include <charconv>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sem/binary_io.hpp"
#include "sem/common.hpp"
#include "sem/manifest.hpp"
#include "sem/metrics.hpp"
#include "sem/probes.hpp"
#include "sem/sae.hpp"
#include "sem/scoring.hpp"
#include "sem/steering.hpp"
#include "sem/synth.hpp"
#include "sem/train.hpp"

namespace sem::cli {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";

inline std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline Json vector_json(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline void write_json(const fs::path& path, const Json& doc) {
  write_text_atomic(path, doc.dump(2) + "\n");
}

// Options of a parsed subcommand: given values, or defaults when absent.
inline Json options_json(const CLI::App& app) {
  Json o = Json::object();
  for (const CLI::Option* opt : app.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name.empty()) continue;
    if (opt->get_type_size() == 0) {
      o[name] = opt->count() > 0;
      continue;
    }
    if (opt->count() > 0) {
      const auto& r = opt->results();
      if (opt->get_expected_max() > 1 || r.size() > 1) {
        o[name] = r;
      } else {
        o[name] = r.empty() ? "" : r.front();
      }
    } else {
      o[name] = opt->get_default_str();
    }
  }
  return o;
}

class InputLog {
 public:
  void add(const fs::path& p) { hashes_[p.lexically_normal().generic_string()] = file_hash(p); }
  void add(const Manifest& m, const fs::path& manifest_path) {
    add(manifest_path);
    for (const auto& e : m.entries()) {
      add(e.resolved);
      if (e.labels) add(*e.labels);
    }
  }
  Json to_json() const {
    Json j = Json::object();
    for (const auto& [k, v] : hashes_) j[k] = v;
    return j;
  }

 private:
  std::map<std::string, std::string> hashes_;
};

struct RunContext {
  const CLI::App* app = nullptr;
  int threads = 1;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
  InputLog inputs;

  Json config() const {
    Json c;
    c["tool"] = "sem";
    c["version"] = kToolVersion;
    c["command"] = app->get_name();
    c["threads"] = threads;
    c["options"] = options_json(*app);
    c["inputs"] = inputs.to_json();
    return c;
  }
};

namespace cli_detail {

inline RowMatrix encode_maybe_topk(const RowMatrix& z, const SaeWeights& w, Index topk) {
  RowMatrix h = encode_rows(z, w);
  return topk > 0 ? topk_relu_rows(h, topk) : h;
}

inline void check_width(const RowMatrix& m, Index d, const std::string& role) {
  if (m.cols() != d) {
    throw DimensionError("role '" + role + "' has width " + std::to_string(m.cols()) +
                         ", expected " + std::to_string(d));
  }
}

inline std::string pick_attribute(const Manifest& m, const std::string& requested,
                                  bool required, const std::string& why) {
  const auto attrs = m.bias_attributes();
  if (!requested.empty()) {
    if (!attrs.count(requested)) {
      throw UsageError("manifest has no 'bias:" + requested + ":<class>' role entries (" + why + ")");
    }
    return requested;
  }
  if (attrs.empty()) {
    if (required) {
      throw UsageError("manifest has no 'bias:<attribute>:<class>' role entries (" + why + ")");
    }
    return {};
  }
  if (attrs.size() > 1) {
    throw UsageError("manifest lists several bias attributes; choose one with --attribute");
  }
  return attrs.begin()->first;
}

inline std::vector<std::pair<std::string, RowMatrix>> load_bias_classes(const Manifest& m,
                                                                        const std::string& attr,
                                                                        Index d) {
  std::vector<std::pair<std::string, RowMatrix>> out;
  const auto attrs = m.bias_attributes();
  for (const auto& c : attrs.at(attr)) {
    RowMatrix x = m.load_matrix(*c.entry);
    check_width(x, d, c.entry->role);
    if (x.rows() == 0) throw UsageError("role '" + c.entry->role + "' has no prompts");
    out.emplace_back(c.name, std::move(x));
  }
  if (out.size() < 2) {
    throw UsageError("bias attribute '" + attr + "' needs >= 2 'bias:" + attr + ":<class>' roles");
  }
  return out;
}

inline std::optional<BiasSpec> bias_spec_for(const Manifest& m, const std::string& attr,
                                             const SaeWeights& w, Index topk) {
  if (attr.empty()) return std::nullopt;
  BiasSpec spec;
  spec.attribute = attr;
  for (auto& [name, x] : load_bias_classes(m, attr, w.input_dim())) {
    spec.classes.push_back(name);
    spec.class_prompts.push_back({name, encode_maybe_topk(x, w, topk), PromptRole::kBiasClass});
  }
  return spec;
}

// Paraphrase sets keyed by query row.
inline std::map<int, RowMatrix> load_paraphrases(const Manifest& m, Index n_queries, Index d) {
  std::map<int, RowMatrix> out;
  for (const auto* e : m.find_all("paraphrases")) {
    int q = 0;
    if (e->query) {
      q = *e->query;
    } else if (n_queries != 1) {
      throw FormatError("'paraphrases' entry " + e->path + " needs a 'query' index");
    }
    if (q < 0 || q >= n_queries) {
      throw FormatError("'paraphrases' entry " + e->path + " names query " + std::to_string(q) +
                        " of " + std::to_string(n_queries));
    }
    RowMatrix x = m.load_matrix(*e);
    check_width(x, d, "paraphrases");
    if (out.count(q)) {
      RowMatrix merged(out[q].rows() + x.rows(), d);
      merged << out[q], x;
      out[q] = std::move(merged);
    } else {
      out[q] = std::move(x);
    }
  }
  return out;
}

inline RowMatrix load_queries(const Manifest& m, const std::string& override_path, Index d,
                              InputLog& log) {
  RowMatrix q;
  if (!override_path.empty()) {
    q = read_embedding_matrix(override_path);
    log.add(override_path);
  } else {
    q = m.load_matrix(m.require("queries", "query embeddings to process"));
  }
  check_width(q, d, "queries");
  if (q.rows() == 0) throw UsageError("no query embeddings");
  return q;
}

inline void param_override(const CLI::App& app, const std::string& opt_name, const Json& params,
                           const char* key, int& value) {
  if (app.get_option(opt_name)->count() == 0 && params.contains(key)) value = params[key].get<int>();
}

}  // namespace cli_detail

// --- subcommands ------------------------------------------------------------

struct SynthGenArgs {
  std::string out;
  SynthConfig cfg;
  bool planted = false;
};

inline int cmd_synth_gen(const SynthGenArgs& a, RunContext& ctx) {
  const SynthCorpus s = gen_synthetic_corpus(a.cfg);
  const fs::path dir = a.out;
  fs::create_directories(dir);
  const auto& c = a.cfg;

  Json man;
  Json entries = Json::array();
  auto add = [&entries](const std::string& role, const std::string& path, Json extra = Json::object()) {
    Json e;
    e["role"] = role;
    e["path"] = path;
    for (auto& [k, v] : extra.items()) e[k] = v;
    entries.push_back(e);
  };

  write_embedding_matrix(s.embeddings, dir / "corpus.seme");
  write_text_atomic(dir / "corpus.csv", label_csv_text(s.content_labels, s.bias_labels));
  for (const char* role : {"images", "features"}) add(role, "corpus.seme", {{"labels", "corpus.csv"}});
  write_embedding_matrix(s.sae_corpus, dir / "sae_corpus.seme");
  add("corpus", "sae_corpus.seme");

  write_embedding_matrix(s.queries, dir / "queries.seme");
  std::vector<int> qlabels(static_cast<std::size_t>(c.n_contents));
  std::iota(qlabels.begin(), qlabels.end(), 0);
  write_text_atomic(dir / "queries.csv", label_csv_text(qlabels, s.stereotyped_class));
  add("queries", "queries.seme", {{"labels", "queries.csv"}});

  RowMatrix classes = c.content_strength * s.content_directions;
  write_embedding_matrix(classes, dir / "classes.seme");
  add("classes", "classes.seme");

  for (int q = 0; q < c.n_contents; ++q) {
    const std::string name = "paraphrases_" + std::to_string(q) + ".seme";
    write_embedding_matrix(s.paraphrases[static_cast<std::size_t>(q)], dir / name);
    add("paraphrases", name, {{"query", q}});
  }
  write_embedding_matrix(s.diverse, dir / "diverse.seme");
  add("diverse", "diverse.seme");
  Json class_files = Json::array();
  for (int b = 0; b < c.n_bias_classes; ++b) {
    const std::string bias_name = "bias_" + std::to_string(b) + ".seme";
    write_embedding_matrix(s.bias_prompts[static_cast<std::size_t>(b)], dir / bias_name);
    add("bias:group:class" + std::to_string(b), bias_name);
    const std::string cq = "class_queries_" + std::to_string(b) + ".seme";
    write_embedding_matrix(s.class_queries[static_cast<std::size_t>(b)], dir / cq);
    class_files.push_back(cq);
  }
  if (a.planted) save_sae_weights(planted_sae(c.d), dir / "planted.semw");

  man["embeddings"] = entries;
  man["params"] = {{"folds", 5}, {"seed", c.seed}};
  write_json(dir / "manifest.json", man);

  Json truth;
  truth["config"] = ctx.config();
  truth["recipe"] = s.recipe;
  auto axis_of = [](const RowMatrix& dirs) {
    Json axes = Json::array();
    for (Index r = 0; r < dirs.rows(); ++r) {
      Index j = 0;
      dirs.row(r).cwiseAbs().maxCoeff(&j);
      axes.push_back(j);
    }
    return axes;
  };
  truth["content_axes"] = axis_of(s.content_directions);
  truth["bias_axes"] = axis_of(s.bias_directions);
  truth["stereotype_weights"] = s.stereotype_weights;
  truth["stereotyped_class"] = s.stereotyped_class;
  truth["class_query_files"] = class_files;
  write_json(dir / "truth.json", truth);
  *ctx.out << "wrote synthetic corpus (" << s.n_samples() << " samples) to " << dir.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string manifest;
  std::string corpus;
  std::string out;
  std::string log;
  std::string report;
  std::string init = "median";
  TrainConfig cfg;
};

inline int cmd_sae_train(TrainArgs a, RunContext& ctx) {
  RowMatrix corpus;
  if (!a.corpus.empty()) {
    corpus = read_embedding_matrix(a.corpus);
    ctx.inputs.add(a.corpus);
  } else if (!a.manifest.empty()) {
    const Manifest m = Manifest::load(a.manifest);
    ctx.inputs.add(m, a.manifest);
    const ManifestEntry* e = m.find("corpus");
    if (!e) e = &m.require("images", "training corpus: 'corpus' or 'images'");
    corpus = m.load_matrix(*e);
  } else {
    throw UsageError("sae-train needs --corpus or --manifest");
  }
  if (corpus.rows() == 0) throw UsageError("training corpus is empty");
  if (a.init == "median") {
    a.cfg.init.centering = CenteringInit::kGeometricMedian;
  } else if (a.init == "mean") {
    a.cfg.init.centering = CenteringInit::kArithmeticMean;
  } else {
    throw UsageError("--init must be 'median' or 'mean'");
  }
  std::string jsonl;
  const TrainResult res = train_msae(corpus, a.cfg, [&jsonl](const TrainLogRecord& r) {
    Json j;
    j["step"] = r.step;
    j["lr"] = r.lr;
    j["loss"] = r.loss;
    j["max_active"] = r.max_active;
    if (r.val_mse) j["val_mse_per_granularity"] = *r.val_mse;
    jsonl += j.dump() + "\n";
  });
  save_sae_weights(res.weights, a.out);
  if (!a.log.empty()) write_text_atomic(a.log, jsonl);
  if (!a.report.empty()) {
    TrainConfig resolved = a.cfg;
    resolved.resolve();
    Json r;
    r["config"] = ctx.config();
    r["reverse_weights"] = resolved.reverse_weights;
    r["train_rows"] = res.train_rows.size();
    r["validation_rows"] = res.validation_rows.size();
    r["corpus_variance"] = mean_coordinate_variance(corpus);
    for (auto it = res.log.rbegin(); it != res.log.rend(); ++it) {
      if (it->val_mse) {
        r["final_val_mse_per_granularity"] = *it->val_mse;
        break;
      }
    }
    r["final_loss"] = res.log.back().loss;
    write_json(a.report, r);
  }
  *ctx.out << "trained SAE d=" << res.weights.input_dim() << " s=" << res.weights.latent_dim()
           << " final loss " << fmt_double(res.log.back().loss) << "\n";
  return 0;
}

struct CodecArgs {
  std::string weights;
  std::string in;
  std::string out;
  Index topk = 0;
};

inline int cmd_encode(const CodecArgs& a, RunContext& ctx) {
  const SaeWeights w = load_sae_weights(a.weights);
  const RowMatrix z = read_embedding_matrix(a.in);
  ctx.inputs.add(a.weights);
  ctx.inputs.add(a.in);
  cli_detail::check_width(z, w.input_dim(), "input");
  write_embedding_matrix(cli_detail::encode_maybe_topk(z, w, a.topk), a.out);
  return 0;
}

inline int cmd_decode(const CodecArgs& a, RunContext& ctx) {
  const SaeWeights w = load_sae_weights(a.weights);
  const RowMatrix h = read_embedding_matrix(a.in);
  ctx.inputs.add(a.weights);
  ctx.inputs.add(a.in);
  if (h.cols() != w.latent_dim()) {
    throw DimensionError("latent width " + std::to_string(h.cols()) + ", SAE has " +
                      std::to_string(w.latent_dim()));
  }
  write_embedding_matrix(decode_rows(h, w), a.out);
  return 0;
}

struct SteerArgs {
  std::string weights;
  std::string manifest;
  std::string variant = "sem_b";
  std::string out;
  std::string scores;
  std::string csv;
  std::string queries;
  std::string attribute;
  bool no_normalize = false;
  bool augmented = false;
  Index topk = 0;
};

struct LoadedSteering {
  SaeWeights weights;
  Manifest manifest;
  std::optional<BiasSpec> spec;
  RowMatrix diverse_latents;
  RowMatrix queries;
  std::map<int, RowMatrix> paraphrases;
};

inline LoadedSteering load_steering(const SteerArgs& a, bool bias_required, RunContext& ctx) {
  LoadedSteering L{load_sae_weights(a.weights), Manifest::load(a.manifest), {}, {}, {}, {}};
  ctx.inputs.add(a.weights);
  ctx.inputs.add(L.manifest, a.manifest);
  const Index d = L.weights.input_dim();
  const std::string attr = cli_detail::pick_attribute(
      L.manifest, a.attribute, bias_required, a.variant + " needs bias prompts");
  const ManifestEntry& div = L.manifest.require("diverse", "neutral reference prompts");
  RowMatrix diverse = L.manifest.load_matrix(div);
  cli_detail::check_width(diverse, d, "diverse");
  if (diverse.rows() < 2) throw UsageError("role 'diverse' needs >= 2 prompts");
  L.diverse_latents = cli_detail::encode_maybe_topk(diverse, L.weights, a.topk);
  L.spec = cli_detail::bias_spec_for(L.manifest, attr, L.weights, a.topk);
  L.queries = cli_detail::load_queries(L.manifest, a.queries, d, ctx.inputs);
  L.paraphrases = cli_detail::load_paraphrases(L.manifest, L.queries.rows(), d);
  return L;
}

inline int cmd_score(const SteerArgs& a, RunContext& ctx) {
  LoadedSteering L = load_steering(a, false, ctx);
  Json r;
  r["config"] = ctx.config();
  r["latent_dim"] = L.weights.latent_dim();
  r["diverse_median"] = vector_json(median_activation(L.diverse_latents));
  std::optional<NeuronScores> bias;
  if (L.spec) {
    bias = bias_scores(*L.spec, L.diverse_latents);
    Json b;
    b["attribute"] = L.spec->attribute;
    b["classes"] = L.spec->classes;
    Json gen = Json::array(), spec = Json::array();
    for (std::size_t c = 0; c < L.spec->classes.size(); ++c) {
      gen.push_back(vector_json(bias->s_gen[c]));
      spec.push_back(vector_json(bias->s_spec[c]));
    }
    b["s_gen"] = gen;
    b["s_spec"] = spec;
    b["s_bias"] = vector_json(bias->s_bias);
    r["bias"] = b;
  }
  Json qs = Json::array();
  std::vector<Vector> concept_scores;
  for (Index q = 0; q < L.queries.rows(); ++q) {
    Json jq;
    jq["query"] = q;
    Vector sc;
    if (a.augmented) {
      const auto it = L.paraphrases.find(static_cast<int>(q));
      if (it == L.paraphrases.end()) {
        throw UsageError("query " + std::to_string(q) +
                         " has no 'paraphrases' role entry (needed by --augmented)");
      }
      sc = content_score(cli_detail::encode_maybe_topk(it->second, L.weights, a.topk),
                         L.diverse_latents, true);
    } else {
      sc = content_score(cli_detail::encode_maybe_topk(L.queries.row(q), L.weights, a.topk),
                         L.diverse_latents, false);
    }
    jq["s_concept"] = vector_json(sc);
    concept_scores.push_back(sc);
    qs.push_back(jq);
  }
  r["queries"] = qs;
  write_json(a.out, r);
  if (!a.csv.empty()) {
    std::string csv = "neuron,m_div";
    if (bias) csv += ",s_bias";
    for (std::size_t q = 0; q < concept_scores.size(); ++q) csv += ",s_concept_q" + std::to_string(q);
    csv += "\n";
    const Vector m_div = median_activation(L.diverse_latents);
    for (Index j = 0; j < m_div.size(); ++j) {
      csv += std::to_string(j) + "," + fmt_double(m_div[j]);
      if (bias) csv += "," + fmt_double(bias->s_bias[j]);
      for (const auto& sc : concept_scores) csv += "," + fmt_double(sc[j]);
      csv += "\n";
    }
    write_text_atomic(a.csv, csv);
  }
  return 0;
}

inline int cmd_steer(const SteerArgs& a, RunContext& ctx) {
  const SteeringVariant variant = parse_variant(a.variant);
  if (needs_bias(variant)) {
    // Fail on the manifest before touching any other input.
    const Manifest m = Manifest::load(a.manifest);
    cli_detail::pick_attribute(m, a.attribute, true, a.variant + " needs bias prompts");
  }
  LoadedSteering L = load_steering(a, needs_bias(variant), ctx);
  Debiaser debiaser(L.weights, L.diverse_latents, L.spec);
  RowMatrix out(L.queries.rows(), L.weights.input_dim());
  Json qs = Json::array();
  for (Index q = 0; q < L.queries.rows(); ++q) {
    QueryLatents ql;
    ql.h_q = cli_detail::encode_maybe_topk(L.queries.row(q), L.weights, a.topk).row(0).transpose();
    const auto it = L.paraphrases.find(static_cast<int>(q));
    if (it != L.paraphrases.end()) {
      ql.paraphrases = cli_detail::encode_maybe_topk(it->second, L.weights, a.topk);
    } else if (needs_paraphrases(variant)) {
      throw UsageError(a.variant + ": query " + std::to_string(q) +
                       " has no 'paraphrases' role entry");
    }
    const DebiasResult res = debiaser.debias(variant, ql, !a.no_normalize);
    out.row(q) = res.embedding.transpose();
    Json jq;
    jq["query"] = q;
    jq["s_concept"] = vector_json(res.s_concept);
    jq["modulation"] = vector_json(res.modulation);
    qs.push_back(jq);
  }
  write_embedding_matrix(out, a.out);
  if (!a.scores.empty()) {
    Json r;
    r["config"] = ctx.config();
    r["variant"] = a.variant;
    r["diverse_median"] = vector_json(debiaser.neutral_activation());
    if (debiaser.has_bias()) {
      r["attribute"] = L.spec->attribute;
      r["s_bias"] = vector_json(debiaser.bias_scores_view().s_bias);
    }
    r["queries"] = qs;
    write_json(a.scores, r);
  }
  *ctx.out << "steered " << out.rows() << " queries with " << a.variant << "\n";
  return 0;
}

struct RetrieveArgs {
  std::string manifest;
  std::string queries;
  std::string query_labels;
  Index k = 10;
  std::string desired = "uniform";
  std::string out;
  std::string csv;
};

inline GroupedEvalSet load_eval_set(const Manifest& m) {
  const ManifestEntry& e = m.require("images", "labelled evaluation pool");
  GroupedEvalSet set;
  set.image_embeddings = m.load_matrix(e);
  const LabelTable t = m.load_labels(e, set.image_embeddings.rows());
  set.task_labels = t.labels;
  set.group_labels = t.groups;
  set.group_names = t.group_names;
  return set;
}

inline int cmd_retrieve_eval(const RetrieveArgs& a, RunContext& ctx) {
  const Manifest m = Manifest::load(a.manifest);
  ctx.inputs.add(m, a.manifest);
  const GroupedEvalSet set = load_eval_set(m);
  const DesiredDistribution mode = parse_desired(a.desired);
  RowMatrix queries;
  std::optional<LabelTable> qlabels;
  if (!a.queries.empty()) {
    queries = read_embedding_matrix(a.queries);
    ctx.inputs.add(a.queries);
  } else {
    queries = m.load_matrix(m.require("queries", "query embeddings to evaluate"));
  }
  cli_detail::check_width(queries, set.image_embeddings.cols(), "queries");
  if (!a.query_labels.empty()) {
    qlabels = read_label_csv(a.query_labels);
    ctx.inputs.add(a.query_labels);
    if (static_cast<Index>(qlabels->size()) != queries.rows()) {
      throw FormatError("query label count differs from query rows");
    }
  }
  if (a.k < 1 || a.k > set.image_embeddings.rows()) {
    throw UsageError("--k must lie in [1, " + std::to_string(set.image_embeddings.rows()) + "]");
  }
  Json rows = Json::array();
  double kl = 0.0, ms = 0.0, prec = 0.0;
  std::string csv = "query,kl_at_k,maxskew_at_k,precision_at_k\n";
  for (Index q = 0; q < queries.rows(); ++q) {
    std::optional<int> target;
    if (qlabels) target = qlabels->labels[static_cast<std::size_t>(q)];
    const RetrievalReport r = evaluate_retrieval(queries.row(q).transpose(), set, a.k, mode, target);
    Json jq;
    jq["query"] = q;
    jq["kl_at_k"] = r.kl_at_k;
    jq["maxskew_at_k"] = r.maxskew_at_k;
    if (r.precision_at_k) jq["precision_at_k"] = *r.precision_at_k;
    rows.push_back(jq);
    kl += r.kl_at_k;
    ms += r.maxskew_at_k;
    prec += r.precision_at_k.value_or(0.0);
    csv += std::to_string(q) + "," + fmt_double(r.kl_at_k) + "," + fmt_double(r.maxskew_at_k) + "," +
           (r.precision_at_k ? fmt_double(*r.precision_at_k) : std::string()) + "\n";
  }
  const double n = static_cast<double>(queries.rows());
  Json rep;
  rep["config"] = ctx.config();
  rep["k"] = a.k;
  rep["desired"] = std::string(desired_name(mode));
  rep["mean_kl_at_k"] = kl / n;
  rep["mean_maxskew_at_k"] = ms / n;
  if (qlabels) rep["mean_precision_at_k"] = prec / n;
  rep["queries"] = rows;
  write_json(a.out, rep);
  if (!a.csv.empty()) write_text_atomic(a.csv, csv);
  *ctx.out << "mean kl_at_k " << fmt_double(kl / n) << ", mean maxskew_at_k " << fmt_double(ms / n) << "\n";
  return 0;
}

struct ZeroShotArgs {
  std::string manifest;
  std::string classes;
  std::string out;
  std::string csv;
};

inline int cmd_zeroshot_eval(const ZeroShotArgs& a, RunContext& ctx) {
  const Manifest m = Manifest::load(a.manifest);
  ctx.inputs.add(m, a.manifest);
  const GroupedEvalSet set = load_eval_set(m);
  RowMatrix classes;
  if (!a.classes.empty()) {
    classes = read_embedding_matrix(a.classes);
    ctx.inputs.add(a.classes);
  } else {
    classes = m.load_matrix(m.require("classes", "class prompt embeddings"));
  }
  cli_detail::check_width(classes, set.image_embeddings.cols(), "classes");
  const auto pred = zeroshot_classify(set.image_embeddings, classes);
  const GroupMetricsReport g = group_metrics(pred, set.task_labels, set.group_labels,
                                             static_cast<int>(classes.rows()), set.n_groups());
  Json rep;
  rep["config"] = ctx.config();
  rep["accuracy"] = g.accuracy;
  rep["worst_group_accuracy"] = g.worst_group_accuracy;
  rep["gap"] = g.gap;
  Json cells = Json::array();
  std::string csv = "task,group,count,correct,accuracy\n";
  for (const auto& c : g.cells) {
    cells.push_back({{"task", c.task}, {"group", c.group}, {"count", c.count},
                     {"correct", c.correct}, {"accuracy", c.accuracy()}});
    csv += std::to_string(c.task) + "," + std::to_string(c.group) + "," + std::to_string(c.count) +
           "," + std::to_string(c.correct) + "," + fmt_double(c.accuracy()) + "\n";
  }
  rep["cells"] = cells;
  Json empty = Json::array();
  for (const auto& [t, gr] : g.empty_cells) empty.push_back({t, gr});
  rep["empty_cells"] = empty;
  write_json(a.out, rep);
  if (!a.csv.empty()) write_text_atomic(a.csv, csv);
  *ctx.out << "accuracy " << fmt_double(g.accuracy) << ", worst-group "
           << fmt_double(g.worst_group_accuracy) << ", gap " << fmt_double(g.gap) << "\n";
  return 0;
}

struct DisentangleArgs {
  std::string manifest;
  std::string out;
  int folds = 5;
  int seed = 0;
  std::string protocol = "train-logits";
  double l2 = 0.0;
  int max_iterations = 1000;
};

inline Json score_json(const DisentanglementScore& d) {
  Json j;
  j["defined"] = d.defined;
  if (d.defined) {
    j["raw"] = d.raw;
    j["clamped"] = d.clamped;
  }
  return j;
}

inline int cmd_disentangle(DisentangleArgs a, RunContext& ctx) {
  const Manifest m = Manifest::load(a.manifest);
  ctx.inputs.add(m, a.manifest);
  cli_detail::param_override(*ctx.app, "--folds", m.params(), "folds", a.folds);
  cli_detail::param_override(*ctx.app, "--seed", m.params(), "seed", a.seed);
  const ManifestEntry* e = m.find("features");
  if (!e) e = m.find("corpus");
  if (!e) e = &m.require("features", "probe features with task/bias labels");
  const RowMatrix x = m.load_matrix(*e);
  const LabelTable t = m.load_labels(*e, x.rows());

  StudyConfig sc;
  sc.folds = a.folds;
  sc.seed = static_cast<std::uint64_t>(a.seed);
  if (a.protocol == "train-logits") {
    sc.protocol = StageTwoProtocol::kTrainFoldLogits;
  } else if (a.protocol == "test-logits") {
    sc.protocol = StageTwoProtocol::kTestFoldLogits;
  } else {
    throw UsageError("--protocol must be 'train-logits' or 'test-logits'");
  }
  sc.probe.l2 = a.l2;
  sc.probe.max_iterations = a.max_iterations;
  const DisentanglementReport rep = run_disentanglement_study(x, t.labels, t.groups, sc);

  Json r;
  r["config"] = ctx.config();
  r["resolved"] = {{"folds", sc.folds}, {"seed", sc.seed}, {"protocol", a.protocol}};
  r["acc_p"] = rep.acc_p;
  r["acc_b"] = rep.acc_b;
  r["acc_bp"] = rep.acc_bp;
  r["chance_b"] = rep.chance_b;
  r["d"] = score_json(rep.d);
  r["balanced"] = rep.balanced;
  r["warnings"] = rep.warnings;
  Json folds = Json::array();
  for (const auto& f : rep.folds) {
    folds.push_back({{"acc_p", f.acc_p}, {"acc_b", f.acc_b}, {"acc_bp", f.acc_bp}, {"d", score_json(f.d)}});
  }
  r["folds"] = folds;
  write_json(a.out, r);
  for (const auto& w : rep.warnings) *ctx.err << "warning: " << w << "\n";
  *ctx.out << "D = " << (rep.d.defined ? fmt_double(rep.d.clamped) : std::string("undefined")) << "\n";
  return 0;
}

struct OrthProjArgs {
  std::string manifest;
  std::string queries;
  std::string attribute;
  std::string out;
  std::string report;
  bool no_normalize = false;
};

inline int cmd_baseline_orthproj(const OrthProjArgs& a, RunContext& ctx) {
  const Manifest m = Manifest::load(a.manifest);
  ctx.inputs.add(m, a.manifest);
  const std::string attr =
      cli_detail::pick_attribute(m, a.attribute, true, "the projection needs bias class prompts");
  const ManifestEntry* first = m.bias_attributes().at(attr).front().entry;
  const Index d = m.load_matrix(*first).cols();
  std::vector<RowMatrix> classes;
  for (auto& [name, x] : cli_detail::load_bias_classes(m, attr, d)) classes.push_back(std::move(x));
  const RowMatrix queries = cli_detail::load_queries(m, a.queries, d, ctx.inputs);
  RowMatrix out(queries.rows(), d);
  Json qs = Json::array();
  Index rank = 0;
  for (Index q = 0; q < queries.rows(); ++q) {
    const OrthProjResult r = orth_proj_baseline(queries.row(q).transpose(), classes, !a.no_normalize);
    out.row(q) = r.embedding.transpose();
    rank = r.subspace_rank;
    const char* status = r.status == ProjectionStatus::kOk                   ? "ok"
                         : r.status == ProjectionStatus::kDegenerateSubspace ? "degenerate_subspace"
                                                                              : "zero_rejection";
    qs.push_back({{"query", q}, {"status", status}});
  }
  write_embedding_matrix(out, a.out);
  if (!a.report.empty()) {
    Json r;
    r["config"] = ctx.config();
    r["attribute"] = attr;
    r["subspace_rank"] = rank;
    r["queries"] = qs;
    write_json(a.report, r);
  }
  return 0;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string pca;
  std::string pca_csv;
  std::string bn_first;
  std::string bn_second;
  std::string neutral;
  std::vector<std::string> gendered;
  std::string out;
  std::string csv;
};

inline void flatten_json(const Json& j, const std::string& prefix,
                         std::vector<std::pair<std::string, std::string>>& rows) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      if (prefix.empty() && k == "config") continue;
      flatten_json(v, prefix.empty() ? k : prefix + "." + k, rows);
    }
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) flatten_json(j[i], prefix + "[" + std::to_string(i) + "]", rows);
  } else if (j.is_number_float()) {
    rows.emplace_back(prefix, fmt_double(j.get<double>()));
  } else if (j.is_number() || j.is_boolean()) {
    rows.emplace_back(prefix, j.dump());
  }
}

inline int cmd_report(const ReportArgs& a, RunContext& ctx) {
  Json rep;
  std::vector<std::pair<std::string, std::string>> rows;
  Json summaries = Json::array();
  for (const auto& in : a.inputs) {
    std::ifstream f(in);
    if (!f) throw UsageError("cannot open report " + in);
    Json doc;
    try {
      doc = Json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("report " + in + ": " + e.what());
    }
    ctx.inputs.add(in);
    std::vector<std::pair<std::string, std::string>> local;
    flatten_json(doc, "", local);
    for (auto& [k, v] : local) rows.emplace_back(fs::path(in).filename().string() + ":" + k, v);
    Json s = Json::object();
    for (const char* key : {"mean_kl_at_k", "mean_maxskew_at_k", "mean_precision_at_k", "accuracy",
                            "worst_group_accuracy", "gap", "acc_p", "acc_b", "acc_bp", "d"}) {
      if (doc.contains(key)) s[key] = doc[key];
    }
    summaries.push_back({{"input", in}, {"summary", s}});
  }
  rep["config"] = ctx.config();
  rep["inputs"] = summaries;
  if (!a.bn_first.empty() || !a.bn_second.empty()) {
    if (a.bn_first.empty() || a.bn_second.empty()) throw UsageError("--bn-first and --bn-second go together");
    const RowMatrix x = read_embedding_matrix(a.bn_first);
    const RowMatrix y = read_embedding_matrix(a.bn_second);
    ctx.inputs.add(a.bn_first);
    ctx.inputs.add(a.bn_second);
    rep["bias_neutralization"] = bias_neutralization(x, y);
    rows.emplace_back("bias_neutralization", fmt_double(rep["bias_neutralization"].get<double>()));
  }
  if (!a.neutral.empty()) {
    if (a.gendered.empty()) throw UsageError("--neutral needs at least one --gendered file");
    const RowMatrix n = read_embedding_matrix(a.neutral);
    ctx.inputs.add(a.neutral);
    std::vector<RowMatrix> g;
    for (const auto& p : a.gendered) {
      g.push_back(read_embedding_matrix(p));
      ctx.inputs.add(p);
    }
    rep["content_preservation"] = content_preservation(g, n);
    rows.emplace_back("content_preservation", fmt_double(rep["content_preservation"].get<double>()));
  }
  if (!a.pca.empty()) {
    const RowMatrix x = read_embedding_matrix(a.pca);
    ctx.inputs.add(a.pca);
    const PcaResult p = pca_project_2d(x);
    rep["pca"] = {{"explained_variance", {p.explained_variance[0], p.explained_variance[1]}},
                  {"total_variance", p.total_variance},
                  {"rank_deficient", p.rank_deficient}};
    if (!a.pca_csv.empty()) {
      std::string csv = "index,pc1,pc2\n";
      for (Index i = 0; i < p.coordinates.rows(); ++i) {
        csv += std::to_string(i) + "," + fmt_double(p.coordinates(i, 0)) + "," +
               fmt_double(p.coordinates(i, 1)) + "\n";
      }
      write_text_atomic(a.pca_csv, csv);
    }
  }
  rep["config"]["inputs"] = ctx.inputs.to_json();
  write_json(a.out, rep);
  if (!a.csv.empty()) {
    std::string csv = "key,value\n";
    for (const auto& [k, v] : rows) csv += k + "," + v + "\n";
    write_text_atomic(a.csv, csv);
  }
  return 0;
}

// --- entry point -----------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"sem: sparse-autoencoder debiasing toolkit for text embeddings", "sem"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads for linear algebra")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  SynthGenArgs synth;
  auto* s_synth = app.add_subcommand("synth-gen", "Generate a synthetic entangled corpus");
  s_synth->add_option("--out", synth.out, "Output directory")->required();
  s_synth->add_option("--seed", synth.cfg.seed)->capture_default_str();
  s_synth->add_option("--d", synth.cfg.d)->capture_default_str();
  s_synth->add_option("--contents", synth.cfg.n_contents)->capture_default_str();
  s_synth->add_option("--bias-classes", synth.cfg.n_bias_classes)->capture_default_str();
  s_synth->add_option("--rho", synth.cfg.rho)->capture_default_str();
  s_synth->add_option("--content-strength", synth.cfg.content_strength)->capture_default_str();
  s_synth->add_option("--bias-strength", synth.cfg.bias_strength)->capture_default_str();
  s_synth->add_option("--noise", synth.cfg.noise_std)->capture_default_str();
  s_synth->add_option("--samples-per-cell", synth.cfg.samples_per_cell)->capture_default_str();
  s_synth->add_option("--paraphrases", synth.cfg.n_paraphrases)->capture_default_str();
  s_synth->add_option("--bias-prompts", synth.cfg.n_bias_prompts)->capture_default_str();
  s_synth->add_option("--diverse", synth.cfg.n_diverse)->capture_default_str();
  s_synth->add_option("--query-leak", synth.cfg.query_leak)->capture_default_str();
  s_synth->add_option("--sae-corpus", synth.cfg.n_sae_corpus, "Rows of generic SAE training data")->capture_default_str();
  s_synth->add_flag("--planted-sae", synth.planted, "Also write the exact planted SAE");

  TrainArgs train;
  train.cfg.total_steps = 2000;
  train.cfg.batch_size = 256;
  train.cfg.learning_rate = 1e-3;
  auto* s_train = app.add_subcommand("sae-train", "Train a Matryoshka SAE");
  s_train->add_option("--manifest", train.manifest, "Manifest with a 'corpus' or 'images' role");
  s_train->add_option("--corpus", train.corpus, "Embedding-matrix file to train on");
  s_train->add_option("--out", train.out, "Output SEMW weights")->required();
  s_train->add_option("--log", train.log, "JSON-lines training log");
  s_train->add_option("--report", train.report, "JSON training report");
  s_train->add_option("--latent-dim", train.cfg.latent_dim)->capture_default_str();
  s_train->add_option("--granularities", train.cfg.granularities)->delimiter(',')->capture_default_str();
  s_train->add_option("--reverse-weights", train.cfg.reverse_weights)->delimiter(',');
  s_train->add_option("--lr", train.cfg.learning_rate)->capture_default_str();
  s_train->add_option("--batch-size", train.cfg.batch_size)->capture_default_str();
  s_train->add_option("--steps", train.cfg.total_steps)->capture_default_str();
  s_train->add_option("--warm-fraction", train.cfg.warm_fraction)->capture_default_str();
  s_train->add_option("--weight-decay", train.cfg.weight_decay)->capture_default_str();
  s_train->add_option("--validation-fraction", train.cfg.validation_fraction)->capture_default_str();
  s_train->add_option("--validate-every", train.cfg.validate_every)->capture_default_str();
  s_train->add_option("--seed", train.cfg.seed)->capture_default_str();
  s_train->add_option("--init", train.init, "Centering init: median or mean")->capture_default_str();

  CodecArgs enc, dec;
  auto* s_enc = app.add_subcommand("encode", "Embeddings to SAE latents");
  s_enc->add_option("--weights", enc.weights)->required();
  s_enc->add_option("--in", enc.in)->required();
  s_enc->add_option("--out", enc.out)->required();
  s_enc->add_option("--topk", enc.topk, "Keep only the k largest latents (0 = plain ReLU)")->capture_default_str();
  auto* s_dec = app.add_subcommand("decode", "SAE latents to embeddings");
  s_dec->add_option("--weights", dec.weights)->required();
  s_dec->add_option("--in", dec.in)->required();
  s_dec->add_option("--out", dec.out)->required();

  SteerArgs score, steer_args;
  auto* s_score = app.add_subcommand("score", "Neuron content and bias scores");
  s_score->add_option("--weights", score.weights)->required();
  s_score->add_option("--manifest", score.manifest)->required();
  s_score->add_option("--out", score.out, "JSON score dump")->required();
  s_score->add_option("--csv", score.csv, "Per-neuron CSV");
  s_score->add_option("--queries", score.queries, "Override the 'queries' role");
  s_score->add_option("--attribute", score.attribute);
  s_score->add_flag("--augmented", score.augmented, "Score content from paraphrase medians");
  s_score->add_option("--topk", score.topk)->capture_default_str();

  auto* s_steer = app.add_subcommand("steer", "Debias query embeddings");
  s_steer->add_option("--weights", steer_args.weights)->required();
  s_steer->add_option("--manifest", steer_args.manifest)->required();
  s_steer->add_option("--variant", steer_args.variant, "sem_i, sem_b or sem_bi")->capture_default_str();
  s_steer->add_option("--out", steer_args.out, "Debiased embeddings (SEME)")->required();
  s_steer->add_option("--scores", steer_args.scores, "JSON per-neuron audit dump");
  s_steer->add_option("--queries", steer_args.queries, "Override the 'queries' role");
  s_steer->add_option("--attribute", steer_args.attribute);
  s_steer->add_flag("--no-normalize", steer_args.no_normalize);
  s_steer->add_option("--topk", steer_args.topk)->capture_default_str();

  RetrieveArgs retr;
  auto* s_retr = app.add_subcommand("retrieve-eval", "KL@k / MaxSkew@k / Precision@k");
  s_retr->add_option("--manifest", retr.manifest)->required();
  s_retr->add_option("--queries", retr.queries, "Override the 'queries' role");
  s_retr->add_option("--query-labels", retr.query_labels, "CSV whose label column is the target class");
  s_retr->add_option("--k", retr.k)->capture_default_str();
  s_retr->add_option("--desired", retr.desired, "uniform or pool")->capture_default_str();
  s_retr->add_option("--out", retr.out)->required();
  s_retr->add_option("--csv", retr.csv);

  ZeroShotArgs zs;
  auto* s_zs = app.add_subcommand("zeroshot-eval", "Zero-shot accuracy, worst-group accuracy and gap");
  s_zs->add_option("--manifest", zs.manifest)->required();
  s_zs->add_option("--classes", zs.classes, "Override the 'classes' role");
  s_zs->add_option("--out", zs.out)->required();
  s_zs->add_option("--csv", zs.csv);

  DisentangleArgs dis;
  auto* s_dis = app.add_subcommand("disentangle", "Sequential-probe disentanglement study");
  s_dis->add_option("--manifest", dis.manifest)->required();
  s_dis->add_option("--out", dis.out)->required();
  s_dis->add_option("--folds", dis.folds)->capture_default_str();
  s_dis->add_option("--seed", dis.seed)->capture_default_str();
  s_dis->add_option("--protocol", dis.protocol, "train-logits or test-logits")->capture_default_str();
  s_dis->add_option("--l2", dis.l2)->capture_default_str();
  s_dis->add_option("--max-iterations", dis.max_iterations)->capture_default_str();

  OrthProjArgs orth;
  auto* s_orth = app.add_subcommand("baseline-orthproj", "Project out the bias subspace");
  s_orth->add_option("--manifest", orth.manifest)->required();
  s_orth->add_option("--queries", orth.queries, "Override the 'queries' role");
  s_orth->add_option("--attribute", orth.attribute);
  s_orth->add_option("--out", orth.out)->required();
  s_orth->add_option("--report", orth.report);
  s_orth->add_flag("--no-normalize", orth.no_normalize);

  ReportArgs rep;
  auto* s_rep = app.add_subcommand("report", "Collect reports and compute CP/BN/PCA summaries");
  s_rep->add_option("--input", rep.inputs, "JSON reports to collect");
  s_rep->add_option("--pca", rep.pca, "Embeddings for a 2-D PCA");
  s_rep->add_option("--pca-csv", rep.pca_csv, "Plot-ready PCA coordinates");
  s_rep->add_option("--bn-first", rep.bn_first, "First bias class, row-paired");
  s_rep->add_option("--bn-second", rep.bn_second, "Second bias class, row-paired");
  s_rep->add_option("--neutral", rep.neutral, "Original neutral embeddings");
  s_rep->add_option("--gendered", rep.gendered, "Bias-class embeddings paired with --neutral");
  s_rep->add_option("--out", rep.out)->required();
  s_rep->add_option("--csv", rep.csv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::kUsage);
  }

  Eigen::setNbThreads(threads);
  RunContext ctx;
  ctx.threads = threads;
  ctx.out = &out;
  ctx.err = &err;
  try {
    for (const CLI::App* sub : app.get_subcommands()) {
      ctx.app = sub;
      if (sub == s_synth) return cmd_synth_gen(synth, ctx);
      if (sub == s_train) return cmd_sae_train(train, ctx);
      if (sub == s_enc) return cmd_encode(enc, ctx);
      if (sub == s_dec) return cmd_decode(dec, ctx);
      if (sub == s_score) return cmd_score(score, ctx);
      if (sub == s_steer) return cmd_steer(steer_args, ctx);
      if (sub == s_retr) return cmd_retrieve_eval(retr, ctx);
      if (sub == s_zs) return cmd_zeroshot_eval(zs, ctx);
      if (sub == s_dis) return cmd_disentangle(dis, ctx);
      if (sub == s_orth) return cmd_baseline_orthproj(orth, ctx);
      if (sub == s_rep) return cmd_report(rep, ctx);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    err << "format error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::kFormat);
  } catch (const fs::filesystem_error& e) {
    err << "usage error: " << e.what() << "\n";
    return static_cast<int>(ErrorKind::kUsage);
  }
  err << "usage error: no subcommand\n";
  return static_cast<int>(ErrorKind::kUsage);
}

}  // namespace sem::cli
