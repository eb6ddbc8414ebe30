#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "promptrisk/common.hpp"
#include "promptrisk/corpus.hpp"
#include "promptrisk/eval.hpp"
#include "promptrisk/numcore.hpp"
#include "promptrisk/text.hpp"
#include "promptrisk/training.hpp"

// Static subword embeddings (skip-gram with negative sampling over words and
// hashed character n-grams) and a logistic classifier over mean note vectors.
namespace promptrisk::wem {

using nc::Tensor;
using text::Vocabulary;

struct WemConfig {
  std::size_t dim = 64;
  text::NgramConfig ngrams{3, 6, 1ULL << 16};

  void validate() const {
    if (dim == 0) throw ConfigError("wem.dim must be positive");
    if (ngrams.n_buckets == 0) throw ConfigError("wem.n_buckets must be positive");
    if (ngrams.n_min == 0 || ngrams.n_min > ngrams.n_max) throw ConfigError("wem n-gram range must satisfy 1 <= n_min <= n_max");
  }
};

// One distinct token of a note: its embedding rows and its share count/N.
struct BagEntry {
  std::vector<std::size_t> rows;
  double weight = 0.0;
};
using NoteBag = std::vector<BagEntry>;

class WemModel {
 public:
  WemModel(Vocabulary words, const WemConfig& cfg, std::uint64_t seed) : words_(std::move(words)), cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "wem.init"));
    const double a = 1.0 / static_cast<double>(cfg_.dim);
    std::uniform_real_distribution<double> u(-a, a);
    Tensor in({words_.size() + cfg_.ngrams.n_buckets, cfg_.dim});
    for (double& v : in.data) v = u(rng);
    in_ = store_.add("wem.in", std::move(in));
    out_ = store_.add("wem.out", Tensor({words_.size(), cfg_.dim}, 0.0));
    w_ = store_.add("clf.w", Tensor({cfg_.dim}, 0.0));
    b_ = store_.add("clf.b", Tensor({1}, 0.0));
  }

  static WemModel from_checkpoint(nc::Checkpoint ck, Vocabulary words) {
    auto get = [&](const char* k) -> const std::string& {
      auto it = ck.meta.find(k);
      if (it == ck.meta.end()) throw IoError(std::string("wem checkpoint metadata lacks '") + k + "'");
      return it->second;
    };
    if (get("kind") != "wem") throw IoError("checkpoint is not a word-embedding model");
    if (std::stoul(get("vocab_size")) != words.size())
      throw ConfigError("vocabulary sidecar has " + std::to_string(words.size()) + " tokens, checkpoint expects " +
                        get("vocab_size"));
    WemConfig cfg;
    cfg.dim = std::stoul(get("dim"));
    cfg.ngrams = {std::stoul(get("n_min")), std::stoul(get("n_max")), std::stoull(get("n_buckets"))};
    return WemModel(std::move(words), cfg, std::move(ck.store));
  }

  std::string serialize() const {
    return nc::serialize_checkpoint(store_, {{"kind", "wem"},
                                             {"dim", std::to_string(cfg_.dim)},
                                             {"n_min", std::to_string(cfg_.ngrams.n_min)},
                                             {"n_max", std::to_string(cfg_.ngrams.n_max)},
                                             {"n_buckets", std::to_string(cfg_.ngrams.n_buckets)},
                                             {"vocab_size", std::to_string(words_.size())}});
  }

  const Vocabulary& vocabulary() const { return words_; }
  const WemConfig& config() const { return cfg_; }
  nc::ParameterStore& store() { return store_; }
  const nc::ParameterStore& store() const { return store_; }
  Tensor& input_table() { return store_[in_].value; }
  const Tensor& input_table() const { return store_[in_].value; }
  Tensor& output_table() { return store_[out_].value; }
  std::vector<double>& weights() { return store_[w_].value.data; }
  const std::vector<double>& weights() const { return store_[w_].value.data; }
  double& bias() { return store_[b_].value.data[0]; }
  double bias() const { return store_[b_].value.data[0]; }

  // Word row (when the token is a vocabulary word) followed by its n-gram buckets.
  std::vector<std::size_t> token_rows(std::string_view tok) const {
    std::vector<std::size_t> rows;
    if (is_word(tok)) rows.push_back(static_cast<std::size_t>(words_.id(tok)));
    for (auto h : text::char_ngrams(tok, cfg_.ngrams)) rows.push_back(words_.size() + static_cast<std::size_t>(h));
    return rows;
  }

  bool is_word(std::string_view tok) const {
    return words_.contains(tok) && static_cast<std::size_t>(words_.id(tok)) >= Vocabulary::kNumSpecials;
  }

  std::vector<double> token_vector(std::string_view tok) const { return mean_rows(token_rows(tok)); }

  // Distinct tokens in lexicographic order with count/N weights, so the note
  // vector ignores token order and uniform repetition.
  NoteBag bag(std::string_view note) const {
    std::map<std::string, std::size_t> counts;
    std::size_t n = 0;
    for (auto& t : text::tokenize(note)) ++counts[t], ++n;
    NoteBag out;
    for (const auto& [tok, c] : counts)
      out.push_back({token_rows(tok), static_cast<double>(c) / static_cast<double>(n)});
    return out;
  }

  std::vector<double> note_vector(const NoteBag& bag) const {
    std::vector<double> x(cfg_.dim, 0.0);
    for (const auto& e : bag) {
      const auto tv = mean_rows(e.rows);
      for (std::size_t k = 0; k < cfg_.dim; ++k) x[k] += e.weight * tv[k];
    }
    return x;
  }
  std::vector<double> note_vector(std::string_view note) const { return note_vector(bag(note)); }

  double logit(const std::vector<double>& x) const {
    const auto& w = weights();
    double z = bias();
    for (std::size_t k = 0; k < cfg_.dim; ++k) z += w[k] * x[k];
    return z;
  }

  double predict(const NoteBag& b) const { return nc::sigmoid(logit(note_vector(b))); }
  double predict_note(std::string_view note) const { return predict(bag(note)); }

 private:
  WemModel(Vocabulary words, const WemConfig& cfg, nc::ParameterStore store)
      : words_(std::move(words)), cfg_(cfg), store_(std::move(store)) {
    cfg_.validate();
    in_ = store_.id("wem.in");
    out_ = store_.id("wem.out");
    w_ = store_.id("clf.w");
    b_ = store_.id("clf.b");
    if (store_[in_].value.shape != nc::Shape{words_.size() + cfg_.ngrams.n_buckets, cfg_.dim} ||
        store_[out_].value.shape != nc::Shape{words_.size(), cfg_.dim} || store_[w_].value.size() != cfg_.dim)
      throw IoError("wem checkpoint shapes do not match its metadata");
  }

  std::vector<double> mean_rows(const std::vector<std::size_t>& rows) const {
    const Tensor& E = input_table();
    std::vector<double> v(cfg_.dim, 0.0);
    for (auto r : rows) {
      const auto row = E.row(r);
      for (std::size_t k = 0; k < cfg_.dim; ++k) v[k] += row[k];
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (double& x : v) x *= inv;
    return v;
  }

  Vocabulary words_;
  WemConfig cfg_;
  nc::ParameterStore store_;
  nc::ParamId in_ = 0, out_ = 0, w_ = 0, b_ = 0;
};

// ---------------------------------------------------------------------------
// Skip-gram pretraining

struct SkipGramSchedule {
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::size_t epochs = 5;
  double lr = 0.05;
  std::size_t eval_pairs = 5000;  // fixed sample on which the objective is reported
  std::uint64_t seed = 1;

  void validate() const {
    if (window < 1) throw ConfigError("wem.window must be at least 1");
    if (negatives < 1) throw ConfigError("wem.negatives must be at least 1");
    if (epochs < 1) throw ConfigError("wem.epochs must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("wem.lr must be positive");
  }
};

struct SkipGramReport {
  double initial_objective = 0.0;  // mean negative-sampling loss per pair on the fixed sample
  double final_objective = 0.0;
  std::size_t pairs_trained = 0;
};

namespace detail {

struct Pair {
  std::size_t center, context;
  std::vector<std::size_t> negatives;
};

inline double log_sigmoid(double z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

}  // namespace detail

inline SkipGramReport pretrain_embeddings(WemModel& m, const std::vector<std::string>& notes,
                                          const SkipGramSchedule& sched) {
  sched.validate();
  const auto& words = m.vocabulary();
  const std::size_t d = m.config().dim;

  // Notes as sequences of word ids; out-of-vocabulary tokens are dropped.
  std::vector<std::vector<std::size_t>> seqs;
  std::vector<double> freq(words.size(), 0.0);
  std::size_t total = 0;
  for (const auto& n : notes) {
    std::vector<std::size_t> s;
    for (const auto& t : text::tokenize(n))
      if (m.is_word(t)) s.push_back(static_cast<std::size_t>(words.id(t)));
    for (auto w : s) freq[w] += 1.0;
    total += s.size();
    if (s.size() >= 2) seqs.push_back(std::move(s));
  }
  if (seqs.empty()) throw ConfigError("wem pretraining: no note has two vocabulary words");

  std::vector<std::vector<std::size_t>> rows(words.size());
  for (std::size_t w = Vocabulary::kNumSpecials; w < words.size(); ++w) rows[w] = m.token_rows(words.token(static_cast<text::TokenId>(w)));

  for (double& f : freq) f = std::pow(f, 0.75);
  std::discrete_distribution<std::size_t> noise(freq.begin(), freq.end());

  Rng rng(derive_seed(sched.seed, "wem.pretrain"));
  auto draw_negatives = [&](std::size_t target) {
    std::vector<std::size_t> neg;
    while (neg.size() < sched.negatives) {
      const std::size_t n = noise(rng);
      if (n != target) neg.push_back(n);
    }
    return neg;
  };

  Tensor& E = m.input_table();
  Tensor& O = m.output_table();
  std::vector<double> h(d), grad(d);
  auto hidden = [&](std::size_t center) {
    std::fill(h.begin(), h.end(), 0.0);
    for (auto r : rows[center])
      for (std::size_t k = 0; k < d; ++k) h[k] += E.row(r)[k];
    const double inv = 1.0 / static_cast<double>(rows[center].size());
    for (double& v : h) v *= inv;
  };
  auto pair_loss = [&](const detail::Pair& p) {
    hidden(p.center);
    double loss = -detail::log_sigmoid(detail::dot(h, O.row(p.context)));
    for (auto n : p.negatives) loss -= detail::log_sigmoid(-detail::dot(h, O.row(n)));
    return loss;
  };

  // Fixed evaluation sample.
  std::vector<detail::Pair> probe;
  {
    Rng prng(derive_seed(sched.seed, "wem.probe"));
    std::uniform_int_distribution<std::size_t> pick_seq(0, seqs.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_off(1, sched.window);
    for (std::size_t i = 0; i < sched.eval_pairs; ++i) {
      const auto& s = seqs[pick_seq(prng)];
      const std::size_t c = std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(prng);
      const std::size_t off = pick_off(prng);
      const std::size_t lo = c >= off ? c - off : 0, hi = std::min(s.size() - 1, c + off);
      std::size_t j = std::uniform_int_distribution<std::size_t>(lo, hi - 1)(prng);
      if (j >= c) ++j;
      detail::Pair p{s[c], s[j], {}};
      while (p.negatives.size() < sched.negatives) {
        const std::size_t n = noise(prng);
        if (n != p.context) p.negatives.push_back(n);
      }
      probe.push_back(std::move(p));
    }
  }
  auto objective = [&] {
    double s = 0.0;
    for (const auto& p : probe) s += pair_loss(p);
    return s / static_cast<double>(probe.size());
  };

  SkipGramReport rep;
  rep.initial_objective = objective();
  const double budget = static_cast<double>(sched.epochs) * static_cast<double>(total);
  double processed = 0.0;
  std::uniform_int_distribution<std::size_t> pick_window(1, sched.window);
  for (std::size_t epoch = 0; epoch < sched.epochs; ++epoch) {
    std::vector<std::size_t> order(seqs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (auto si : order) {
      const auto& s = seqs[si];
      for (std::size_t i = 0; i < s.size(); ++i, processed += 1.0) {
        const double lr = sched.lr * std::max(1e-4, 1.0 - processed / budget);
        const std::size_t b = pick_window(rng);
        const std::size_t lo = i >= b ? i - b : 0, hi = std::min(s.size() - 1, i + b);
        for (std::size_t j = lo; j <= hi; ++j) {
          if (j == i) continue;
          hidden(s[i]);
          std::fill(grad.begin(), grad.end(), 0.0);
          auto update = [&](std::size_t target, double label) {
            auto o = O.row(target);
            const double alpha = lr * (label - nc::sigmoid(detail::dot(h, o)));
            for (std::size_t k = 0; k < d; ++k) grad[k] += alpha * o[k];
            for (std::size_t k = 0; k < d; ++k) o[k] += alpha * h[k];
          };
          update(s[j], 1.0);
          for (auto n : draw_negatives(s[j])) update(n, 0.0);
          for (auto r : rows[s[i]]) {
            auto e = E.row(r);
            for (std::size_t k = 0; k < d; ++k) e[k] += grad[k];
          }
          ++rep.pairs_trained;
        }
      }
    }
  }
  rep.final_objective = objective();
  if (!std::isfinite(rep.final_objective)) throw TrainingError("wem pretraining diverged");
  return rep;
}

// ---------------------------------------------------------------------------
// Supervised classifier

struct ClassifierSchedule {
  std::size_t epochs = 25;
  double lr = 0.1;
  bool update_embeddings = true;
  std::size_t patience = 3;
  std::size_t max_notes_per_patient = 0;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0) throw ConfigError("wem classifier epochs must be positive");
    if (!(lr > 0.0)) throw ConfigError("wem classifier lr must be positive");
  }
};

struct Example {
  std::string patient_id;
  std::string note_id;
  NoteBag bag;
  int label = 0;
};

inline std::vector<Example> make_examples(const WemModel& m, const Corpus& patients) {
  std::vector<Example> out;
  for (const auto& p : patients)
    for (const auto& n : p.notes) out.push_back({p.patient_id, n.note_id, m.bag(n.text), p.label()});
  return out;
}

// Per-example logistic SGD; keeps the epoch with the best validation score.
inline TrainReport train_classifier(WemModel& m, const Corpus& train, const Corpus& valid,
                                    const ClassifierSchedule& sched) {
  sched.validate();
  const auto tr = make_examples(m, train);
  const auto va = make_examples(m, valid);
  if (tr.empty()) throw ConfigError("wem classifier needs a non-empty training set");
  const std::size_t d = m.config().dim;
  Rng rng(derive_seed(sched.seed, "wem.classifier"));

  TrainReport rep;
  auto best = m.store().values();
  bool have_best = false;
  std::size_t since_best = 0;
  std::vector<double> w_old(d);
  for (std::size_t epoch = 1; epoch <= sched.epochs; ++epoch) {
    std::vector<std::size_t> order;
    if (sched.max_notes_per_patient == 0) {
      order.resize(tr.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
    } else {
      std::map<std::string, std::vector<std::size_t>> by_patient;
      for (std::size_t i = 0; i < tr.size(); ++i) by_patient[tr[i].patient_id].push_back(i);
      for (auto& [id, idx] : by_patient) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min(idx.size(), sched.max_notes_per_patient));
        order.insert(order.end(), idx.begin(), idx.end());
      }
    }
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    auto& w = m.weights();
    for (auto i : order) {
      const auto& ex = tr[i];
      const auto x = m.note_vector(ex.bag);
      const double z = m.logit(x);
      const double y = ex.label;
      loss_sum -= y ? detail::log_sigmoid(z) : detail::log_sigmoid(-z);
      const double g = nc::sigmoid(z) - y;
      std::copy(w.begin(), w.end(), w_old.begin());
      for (std::size_t k = 0; k < d; ++k) w[k] -= sched.lr * g * x[k];
      m.bias() -= sched.lr * g;
      if (sched.update_embeddings) {
        Tensor& E = m.input_table();
        for (const auto& e : ex.bag) {
          const double c = sched.lr * g * e.weight / static_cast<double>(e.rows.size());
          for (auto r : e.rows) {
            auto row = E.row(r);
            for (std::size_t k = 0; k < d; ++k) row[k] -= c * w_old[k];
          }
        }
      }
    }
    if (!std::isfinite(loss_sum)) throw TrainingError("wem classifier diverged in epoch " + std::to_string(epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    if (va.empty()) {
      rec.valid_score = -rec.train_loss;
    } else {
      std::vector<double> probs;
      std::vector<int> labels;
      for (const auto& ex : va) probs.push_back(m.predict(ex.bag)), labels.push_back(ex.label);
      auto [score, is_auroc] = selection_score(probs, labels);
      rec.valid_score = score;
      if (!is_auroc) rep.selection_metric = "valid_note_neg_bce";
    }
    rep.epochs.push_back(rec);
    if (!have_best || rec.valid_score > rep.best_valid_score) {
      have_best = true;
      rep.best_valid_score = rec.valid_score;
      rep.best_epoch = epoch;
      best = m.store().values();
      since_best = 0;
    } else if (sched.patience && ++since_best >= sched.patience) {
      break;
    }
  }
  m.store().restore(best);
  return rep;
}

inline eval::PredictionSet predict_patients(const WemModel& m, const Corpus& patients) {
  eval::PredictionSet out;
  for (const auto& p : patients)
    for (const auto& n : p.notes) out.push_back({p.patient_id, n.note_id, m.predict_note(n.text), p.label()});
  return out;
}

}  // namespace promptrisk::wem
