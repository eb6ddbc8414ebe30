#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "promptrisk/common.hpp"

namespace promptrisk::eval {

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

struct PredictionRecord {
  std::string patient_id;
  std::string note_id;
  double probability = 0.0;
  int label = 0;
};

using PredictionSet = std::vector<PredictionRecord>;

inline void validate(const PredictionSet& preds) {
  std::unordered_map<std::string, int> label_of;
  for (const auto& r : preds) {
    if (!(r.probability >= 0.0 && r.probability <= 1.0))
      throw ConfigError("prediction for note " + r.note_id + " is not a probability");
    if (r.label != 0 && r.label != 1) throw ConfigError("label of note " + r.note_id + " is not 0/1");
    auto [it, inserted] = label_of.emplace(r.patient_id, r.label);
    if (!inserted && it->second != r.label)
      throw ConfigError("patient " + r.patient_id + " has notes with conflicting labels");
  }
}

// ---------------------------------------------------------------------------
// Per-note -> per-patient aggregation

enum class AggregationKind { Min, Mean, Max, ScaledMaxMean };

struct AggregationRule {
  AggregationKind kind = AggregationKind::Min;
  double scale = 2.0;  // only used by ScaledMaxMean

  std::string name() const {
    switch (kind) {
      case AggregationKind::Min: return "min";
      case AggregationKind::Mean: return "mean";
      case AggregationKind::Max: return "max";
      case AggregationKind::ScaledMaxMean: {
        char buf[48];
        std::snprintf(buf, sizeof buf, "scaled_max_mean:%g", scale);
        return buf;
      }
    }
    return "?";
  }

  // "min" | "mean" | "max" | "scaled_max_mean" | "scaled_max_mean:<c>"
  static AggregationRule parse(const std::string& s) {
    if (s == "min") return {AggregationKind::Min};
    if (s == "mean") return {AggregationKind::Mean};
    if (s == "max") return {AggregationKind::Max};
    const std::string prefix = "scaled_max_mean";
    if (s.rfind(prefix, 0) == 0) {
      AggregationRule r{AggregationKind::ScaledMaxMean, 2.0};
      if (s.size() > prefix.size()) {
        if (s[prefix.size()] != ':') throw ConfigError("unknown aggregation rule '" + s + "'");
        try {
          r.scale = std::stod(s.substr(prefix.size() + 1));
        } catch (const std::exception&) {
          throw ConfigError("malformed aggregation scale in '" + s + "'");
        }
      }
      if (!(r.scale > 0.0)) throw ConfigError("aggregation scale must be positive");
      return r;
    }
    throw ConfigError("unknown aggregation rule '" + s + "'");
  }
};

inline double aggregate_probabilities(std::span<const double> p, const AggregationRule& rule) {
  if (p.empty()) throw UndefinedMetricError("aggregation over a patient with no notes");
  const double mn = *std::min_element(p.begin(), p.end());
  const double mx = *std::max_element(p.begin(), p.end());
  const double n = static_cast<double>(p.size());
  const double mean = std::accumulate(p.begin(), p.end(), 0.0) / n;
  switch (rule.kind) {
    case AggregationKind::Min: return mn;
    case AggregationKind::Max: return mx;
    case AggregationKind::Mean: return std::clamp(mean, mn, mx);
    case AggregationKind::ScaledMaxMean: {
      // Lies in [mean, max] exactly; the clamp removes round-off so a single
      // note maps to itself.
      const double w = n / rule.scale;
      return std::clamp((mx + mean * w) / (1.0 + w), mn, mx);
    }
  }
  return mn;
}

struct PatientPrediction {
  std::string patient_id;
  double probability = 0.0;
  int label = 0;
  std::size_t n_notes = 0;
};

// Patients appear in order of their first record.
inline std::vector<PatientPrediction> aggregate(const PredictionSet& preds, const AggregationRule& rule) {
  validate(preds);
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<PatientPrediction> out;
  std::vector<std::vector<double>> probs;
  for (const auto& r : preds) {
    auto [it, inserted] = slot.emplace(r.patient_id, out.size());
    if (inserted) {
      out.push_back({r.patient_id, 0.0, r.label, 0});
      probs.emplace_back();
    }
    probs[it->second].push_back(r.probability);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].probability = aggregate_probabilities(probs[i], rule);
    out[i].n_notes = probs[i].size();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {

inline void check_inputs(std::span<const double> scores, std::span<const int> labels, const char* metric) {
  if (scores.size() != labels.size())
    throw UndefinedMetricError(std::string(metric) + ": scores and labels differ in length");
  for (double s : scores)
    if (std::isnan(s)) throw UndefinedMetricError(std::string(metric) + ": NaN score");
}

}  // namespace detail

// Mann-Whitney probability that a random positive outscores a random
// negative, ties counting one half. Computed exactly in integers.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_inputs(scores, labels, "auroc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t n_pos = 0, n_neg = 0, twice_wins = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos_g = 0, neg_g = 0;
    for (; j < order.size() && scores[order[j]] == scores[order[i]]; ++j) (labels[order[j]] ? pos_g : neg_g)++;
    twice_wins += pos_g * (2 * n_neg + neg_g);
    n_pos += pos_g;
    n_neg += neg_g;
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("auroc: both classes must be present");
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Average precision: mean over positives of the precision at each positive's
// rank. Ranking is by descending score; equal scores keep input order.
inline double auprc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_inputs(scores, labels, "auprc");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!labels[order[r]]) continue;
    ++tp;
    sum += static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  if (tp == 0) throw UndefinedMetricError("auprc: no positive labels");
  return sum / static_cast<double>(tp);
}

inline double brier(std::span<const double> scores, std::span<const int> labels) {
  detail::check_inputs(scores, labels, "brier");
  if (scores.empty()) throw UndefinedMetricError("brier: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double d = scores[i] - labels[i];
    s += d * d;
  }
  return s / static_cast<double>(scores.size());
}

struct LevelMetrics {
  double auroc = 0.0;
  double auprc = 0.0;
  double brier = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

inline LevelMetrics compute_metrics(std::span<const double> scores, std::span<const int> labels) {
  LevelMetrics m;
  m.auroc = auroc(scores, labels);
  m.auprc = auprc(scores, labels);
  m.brier = brier(scores, labels);
  for (int y : labels) (y ? m.n_pos : m.n_neg)++;
  return m;
}

struct MetricReport {
  AggregationRule rule;
  LevelMetrics note;
  LevelMetrics patient;
};

inline MetricReport evaluate(const PredictionSet& preds, const AggregationRule& rule) {
  validate(preds);
  MetricReport rep;
  rep.rule = rule;
  std::vector<double> s;
  std::vector<int> y;
  for (const auto& r : preds) s.push_back(r.probability), y.push_back(r.label);
  rep.note = compute_metrics(s, y);
  s.clear();
  y.clear();
  for (const auto& p : aggregate(preds, rule)) s.push_back(p.probability), y.push_back(p.label);
  rep.patient = compute_metrics(s, y);
  return rep;
}

// Expected metrics of uniformly random scores at a given class balance.
inline LevelMetrics random_baseline(std::size_t n_pos, std::size_t n_neg) {
  LevelMetrics m;
  m.auroc = 0.5;
  m.auprc = static_cast<double>(n_pos) / static_cast<double>(n_pos + n_neg);
  m.brier = 1.0 / 3.0;
  m.n_pos = n_pos;
  m.n_neg = n_neg;
  return m;
}

// ---------------------------------------------------------------------------
// CSV reports

struct MetricRow {
  std::string model;
  std::string split;
  std::string level;  // "note" | "patient"
  std::string rule;
  LevelMetrics metrics;
};

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline constexpr const char* kMetricCsvHeader = "model,split,level,rule,auroc,auprc,brier_x100,n_pos,n_neg,config_hash,seed";

inline void write_metric_row(std::ostream& os, const MetricRow& r, const std::string& config_hash, std::uint64_t seed) {
  os << r.model << ',' << r.split << ',' << r.level << ',' << r.rule << ',' << format_fixed(r.metrics.auroc) << ','
     << format_fixed(r.metrics.auprc) << ',' << format_fixed(100.0 * r.metrics.brier) << ',' << r.metrics.n_pos << ','
     << r.metrics.n_neg << ',' << config_hash << ',' << seed << '\n';
}

inline std::vector<MetricRow> report_rows(const std::string& model, const std::string& split, const MetricReport& rep) {
  return {{model, split, "note", rep.rule.name(), rep.note}, {model, split, "patient", rep.rule.name(), rep.patient}};
}

}  // namespace promptrisk::eval
