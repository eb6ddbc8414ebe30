#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "promptrisk/cohort.hpp"
#include "promptrisk/corpus.hpp"
#include "promptrisk/encoder.hpp"
#include "promptrisk/eval.hpp"
#include "promptrisk/wem.hpp"

namespace promptrisk::pipeline {

using nlohmann::json;
using text::TokenId;
using text::Vocabulary;

struct Paths {
  std::string out = "run";
  std::string corpus;       // empty: <out>/corpus.jsonl
  std::string checkpoints;  // empty: <out>/checkpoints
};

struct SplitSection {
  std::array<double, 4> fractions = SplitSpec{}.fractions;
  std::vector<std::size_t> imbalance_ratios = {10, 100, 250};
  std::vector<std::size_t> fewshot_sizes = default_fewshot_sizes();
};

struct TextSection {
  std::size_t vocab_size = 2000;
};

struct PromptSection {
  std::size_t n_prompts = 8;
  encoder::TrainSchedule schedule = [] {
    encoder::TrainSchedule s;
    s.epochs = 30;
    s.adam.lr = 3e-2;
    s.patience = 5;
    s.max_notes_per_patient = 4;
    return s;
  }();
};

struct WemSection {
  wem::WemConfig model;
  wem::SkipGramSchedule skipgram;
  wem::ClassifierSchedule classifier;
};

struct EvalSection {
  std::string rule = "min";
};

struct SweepSection {
  std::size_t replicates = 1;
};

// Everything a run depends on. Per-stage seeds are derived from `seed`, so
// the seed fields of the module schedules are not exposed.
struct RunConfig {
  std::uint64_t seed = 1;
  Paths paths;
  GeneratorConfig generator = [] {
    GeneratorConfig g;
    g.n_patients = 60000;
    g.prevalence = 0.0085;
    g.notes_per_patient = {8.0, 1, 60, 0.65};
    return g;
  }();
  CohortConfig cohort;
  SplitSection split;
  TextSection text;
  encoder::EncoderConfig encoder;
  encoder::MlmSchedule mlm;
  encoder::TrainSchedule finetune = [] {
    encoder::TrainSchedule s;
    s.adam.lr = 1e-3;
    s.patience = 3;
    s.max_notes_per_patient = 4;
    return s;
  }();
  PromptSection prompt;
  WemSection wem;
  EvalSection eval;
  SweepSection sweep;

  void validate() const;
};

namespace detail {

// Reads fields out of a JSON object; every key must be consumed exactly by a
// visitor call, so typos surface as errors instead of silent defaults.
class Loader {
 public:
  Loader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class T>
  void operator()(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) read(*it, out, join(key));
  }

  template <class F>
  void section(const char* key, F&& visit) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    Loader sub(*it, join(key));
    visit(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + join(item.key()) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  static void read(const json& v, bool& out, const std::string& p) {
    if (!v.is_boolean()) throw ConfigError(p + " must be a boolean");
    out = v.get<bool>();
  }
  static void read(const json& v, double& out, const std::string& p) {
    if (!v.is_number()) throw ConfigError(p + " must be a number");
    out = v.get<double>();
  }
  static void read(const json& v, int& out, const std::string& p) {
    if (!v.is_number_integer()) throw ConfigError(p + " must be an integer");
    out = v.get<int>();
  }
  static void read(const json& v, long& out, const std::string& p) {
    if (!v.is_number_integer()) throw ConfigError(p + " must be an integer");
    out = v.get<long>();
  }
  static void read(const json& v, std::size_t& out, const std::string& p) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      throw ConfigError(p + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }
  static void read(const json& v, std::string& out, const std::string& p) {
    if (!v.is_string()) throw ConfigError(p + " must be a string");
    out = v.get<std::string>();
  }
  static void read(const json& v, Date& out, const std::string& p) {
    std::string s;
    read(v, s, p);
    auto d = parse_iso(s);
    if (!d) throw ConfigError(p + " must be a YYYY-MM-DD date");
    out = *d;
  }
  template <class T>
  static void read(const json& v, std::vector<T>& out, const std::string& p) {
    if (!v.is_array()) throw ConfigError(p + " must be an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      T x{};
      read(v[i], x, p + "[" + std::to_string(i) + "]");
      out.push_back(std::move(x));
    }
  }
  template <class T, std::size_t N>
  static void read(const json& v, std::array<T, N>& out, const std::string& p) {
    if (!v.is_array() || v.size() != N) throw ConfigError(p + " must be an array of " + std::to_string(N));
    for (std::size_t i = 0; i < N; ++i) read(v[i], out[i], p + "[" + std::to_string(i) + "]");
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

class Dumper {
 public:
  template <class T>
  void operator()(const char* key, const T& v) {
    j[key] = to_json(v);
  }

  template <class F>
  void section(const char* key, F&& visit) {
    Dumper sub;
    visit(sub);
    j[key] = std::move(sub.j);
  }

  json j = json::object();

 private:
  static json to_json(const Date& d) { return to_iso(d); }
  template <class T>
  static json to_json(const T& v) {
    return json(v);
  }
};

template <class V>
void visit_counts(V& v, CountDistribution& c) {
  v("mean", c.mean);
  v("min", c.min);
  v("max", c.max);
  v("log_sigma", c.log_sigma);
}

template <class V>
void visit_schedule(V& v, encoder::TrainSchedule& s) {
  v("epochs", s.epochs);
  v("batch_size", s.batch_size);
  v("lr", s.adam.lr);
  v("clip_norm", s.clip_norm);
  v("patience", s.patience);
  v("max_notes_per_patient", s.max_notes_per_patient);
}

// Single description of the config tree, shared by loading and dumping.
template <class V>
void visit(V& v, RunConfig& c) {
  v("seed", c.seed);
  v.section("paths", [&](V& s) {
    s("out", c.paths.out);
    s("corpus", c.paths.corpus);
    s("checkpoints", c.paths.checkpoints);
  });
  v.section("generator", [&](V& s) {
    auto& g = c.generator;
    s("n_patients", g.n_patients);
    s("prevalence", g.prevalence);
    s.section("notes_per_patient", [&](V& t) { visit_counts(t, g.notes_per_patient); });
    s.section("tokens_per_note", [&](V& t) { visit_counts(t, g.tokens_per_note); });
    s("vocab_size", g.vocab_size);
    s("signal_tokens", g.signal_tokens);
    s("signal_rate", g.signal_rate);
    s.section("collection_period", [&](V& t) {
      t("start", g.collection_period.start);
      t("end", g.collection_period.end);
    });
    s("undated_fraction", g.undated_fraction);
    s("underage_fraction", g.underage_fraction);
    s("zipf_exponent", g.zipf_exponent);
  });
  v.section("cohort", [&](V& s) {
    s("min_age_years", c.cohort.min_age_years);
    s("pos_window_min_days", c.cohort.pos_window_min_days);
    s("pos_window_max_days", c.cohort.pos_window_max_days);
    s("neg_window_days", c.cohort.neg_window_days);
    s.section("collection_period", [&](V& t) {
      t("start", c.cohort.collection_period.start);
      t("end", c.cohort.collection_period.end);
    });
  });
  v.section("split", [&](V& s) {
    s("fractions", c.split.fractions);
    s("imbalance_ratios", c.split.imbalance_ratios);
    s("fewshot_sizes", c.split.fewshot_sizes);
  });
  v.section("text", [&](V& s) { s("vocab_size", c.text.vocab_size); });
  v.section("encoder", [&](V& s) {
    s("d_model", c.encoder.d_model);
    s("n_heads", c.encoder.n_heads);
    s("n_layers", c.encoder.n_layers);
    s("ffn_dim", c.encoder.ffn_dim);
    s("max_len", c.encoder.max_len);
    s("dropout", c.encoder.dropout);
  });
  v.section("mlm", [&](V& s) {
    s("steps", c.mlm.steps);
    s("batch_size", c.mlm.batch_size);
    s("lr", c.mlm.adam.lr);
    s("mask_rate", c.mlm.mask_rate);
    s("holdout_fraction", c.mlm.holdout_fraction);
    s("clip_norm", c.mlm.clip_norm);
  });
  v.section("finetune", [&](V& s) { visit_schedule(s, c.finetune); });
  v.section("prompt", [&](V& s) {
    s("n_prompts", c.prompt.n_prompts);
    visit_schedule(s, c.prompt.schedule);
  });
  v.section("wem", [&](V& s) {
    s("dim", c.wem.model.dim);
    s("n_min", c.wem.model.ngrams.n_min);
    s("n_max", c.wem.model.ngrams.n_max);
    s("buckets", c.wem.model.ngrams.n_buckets);
    s.section("skipgram", [&](V& t) {
      t("window", c.wem.skipgram.window);
      t("negatives", c.wem.skipgram.negatives);
      t("epochs", c.wem.skipgram.epochs);
      t("lr", c.wem.skipgram.lr);
      t("eval_pairs", c.wem.skipgram.eval_pairs);
    });
    s.section("classifier", [&](V& t) {
      t("epochs", c.wem.classifier.epochs);
      t("lr", c.wem.classifier.lr);
      t("update_embeddings", c.wem.classifier.update_embeddings);
      t("patience", c.wem.classifier.patience);
      t("max_notes_per_patient", c.wem.classifier.max_notes_per_patient);
    });
  });
  v.section("eval", [&](V& s) { s("rule", c.eval.rule); });
  v.section("sweep", [&](V& s) { s("replicates", c.sweep.replicates); });
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  RunConfig copy = c;
  detail::Dumper d;
  detail::visit(d, copy);
  return std::move(d.j);
}

inline RunConfig from_json(const json& j) {
  RunConfig c;
  detail::Loader l(j, "");
  detail::visit(l, c);
  l.finish();
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j);
}

// Hash of everything that can change an artifact's bytes. Paths are excluded
// so the same experiment in another directory hashes the same.
inline std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("paths");
  return hex64(fnv1a(j.dump()));
}

inline void RunConfig::validate() const {
  generator.validate();
  cohort.validate();
  SplitSpec{split.fractions, 0}.validate();
  for (auto r : split.imbalance_ratios)
    if (r < 1) throw ConfigError("split.imbalance_ratios must be positive");
  for (auto k : split.fewshot_sizes)
    if (k < 2 || k % 2) throw ConfigError("split.fewshot_sizes must be positive even numbers, got " + std::to_string(k));
  if (text.vocab_size <= Vocabulary::kNumSpecials) throw ConfigError("text.vocab_size is too small");
  auto enc = encoder;
  enc.vocab_size = text.vocab_size;
  enc.validate();
  if (mlm.steps == 0 || mlm.batch_size == 0) throw ConfigError("mlm.steps and mlm.batch_size must be positive");
  finetune.validate();
  prompt.schedule.validate();
  if (prompt.n_prompts == 0 || prompt.n_prompts + 1 >= encoder.max_len)
    throw ConfigError("prompt.n_prompts must be in [1, encoder.max_len - 2]");
  wem.model.validate();
  wem.skipgram.validate();
  wem.classifier.validate();
  eval::AggregationRule::parse(eval.rule);
  if (sweep.replicates == 0) throw ConfigError("sweep.replicates must be positive");
}

}  // namespace promptrisk::pipeline
