#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptrisk/common.hpp"
#include "promptrisk/corpus.hpp"
#include "promptrisk/eval.hpp"
#include "promptrisk/numcore.hpp"
#include "promptrisk/text.hpp"
#include "promptrisk/training.hpp"

namespace promptrisk::encoder {

using nc::Graph;
using nc::ParamId;
using nc::ParameterStore;
using nc::Tensor;
using nc::Var;
using text::TokenId;
using text::Vocabulary;

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_len = 512;
  double dropout = 0.1;

  void validate() const {
    if (vocab_size <= Vocabulary::kNumSpecials) throw ConfigError("encoder.vocab_size must exceed the special tokens");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("encoder.d_model must be a positive multiple of encoder.n_heads");
    if (n_layers == 0) throw ConfigError("encoder.n_layers must be positive");
    if (ffn_dim == 0) throw ConfigError("encoder.ffn_dim must be positive");
    if (max_len < 2) throw ConfigError("encoder.max_len must be at least 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder.dropout must lie in [0, 1)");
  }

  nc::Metadata to_metadata() const {
    return {{"vocab_size", std::to_string(vocab_size)}, {"d_model", std::to_string(d_model)},
            {"n_heads", std::to_string(n_heads)},       {"n_layers", std::to_string(n_layers)},
            {"ffn_dim", std::to_string(ffn_dim)},       {"max_len", std::to_string(max_len)},
            {"dropout", eval::format_fixed(dropout, 17)}};
  }

  static EncoderConfig from_metadata(const nc::Metadata& m) {
    auto get = [&](const char* k) -> const std::string& {
      auto it = m.find(k);
      if (it == m.end()) throw IoError(std::string("checkpoint metadata lacks '") + k + "'");
      return it->second;
    };
    EncoderConfig c;
    c.vocab_size = std::stoul(get("vocab_size"));
    c.d_model = std::stoul(get("d_model"));
    c.n_heads = std::stoul(get("n_heads"));
    c.n_layers = std::stoul(get("n_layers"));
    c.ffn_dim = std::stoul(get("ffn_dim"));
    c.max_len = std::stoul(get("max_len"));
    c.dropout = std::stod(get("dropout"));
    c.validate();
    return c;
  }
};

// Parameter ids of a RoBERTa-style post-LN encoder inside a ParameterStore.
struct BackboneLayout {
  struct Layer {
    ParamId wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };
  ParamId tok = 0, pos = 0, ln_g = 0, ln_b = 0, mlm_bias = 0;
  std::vector<Layer> layers;

  static BackboneLayout create(ParameterStore& s, const EncoderConfig& c, Rng& rng) {
    // Embeddings N(0, 0.02); projections N(0, 1/fan_in) so a frozen backbone
    // still routes input-dependent signal to the CLS row.
    auto normal = [&](nc::Shape shape, double sd = 0.02) {
      std::normal_distribution<double> init(0.0, sd);
      Tensor t(std::move(shape));
      for (double& v : t.data) v = init(rng);
      return t;
    };
    auto proj = [&](std::size_t fan_in, std::size_t fan_out) {
      return normal({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    };
    const std::size_t d = c.d_model;
    BackboneLayout L;
    L.tok = s.add("emb.tok", normal({c.vocab_size, d}));
    L.pos = s.add("emb.pos", normal({c.max_len, d}));
    L.ln_g = s.add("emb.ln.g", Tensor({d}, 1.0));
    L.ln_b = s.add("emb.ln.b", Tensor({d}, 0.0));
    for (std::size_t i = 0; i < c.n_layers; ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      Layer l{};
      l.wq = s.add(p + "attn.wq", proj(d, d));
      l.bq = s.add(p + "attn.bq", Tensor({d}, 0.0));
      l.wk = s.add(p + "attn.wk", proj(d, d));
      l.bk = s.add(p + "attn.bk", Tensor({d}, 0.0));
      l.wv = s.add(p + "attn.wv", proj(d, d));
      l.bv = s.add(p + "attn.bv", Tensor({d}, 0.0));
      l.wo = s.add(p + "attn.wo", proj(d, d));
      l.bo = s.add(p + "attn.bo", Tensor({d}, 0.0));
      l.ln1_g = s.add(p + "ln1.g", Tensor({d}, 1.0));
      l.ln1_b = s.add(p + "ln1.b", Tensor({d}, 0.0));
      l.w1 = s.add(p + "ffn.w1", proj(d, c.ffn_dim));
      l.b1 = s.add(p + "ffn.b1", Tensor({c.ffn_dim}, 0.0));
      l.w2 = s.add(p + "ffn.w2", proj(c.ffn_dim, d));
      l.b2 = s.add(p + "ffn.b2", Tensor({d}, 0.0));
      l.ln2_g = s.add(p + "ln2.g", Tensor({d}, 1.0));
      l.ln2_b = s.add(p + "ln2.b", Tensor({d}, 0.0));
      L.layers.push_back(l);
    }
    L.mlm_bias = s.add("mlm.bias", Tensor({c.vocab_size}, 0.0));
    return L;
  }

  // Finds the parameters by name and checks their shapes against the config.
  static BackboneLayout locate(const ParameterStore& s, const EncoderConfig& c) {
    const std::size_t d = c.d_model;
    auto find = [&](const std::string& name, const nc::Shape& shape) {
      const ParamId id = s.id(name);
      if (s[id].value.shape != shape)
        throw IoError("parameter '" + name + "' has shape " + nc::shape_str(s[id].value.shape) + ", expected " +
                      nc::shape_str(shape));
      return id;
    };
    BackboneLayout L;
    L.tok = find("emb.tok", {c.vocab_size, d});
    L.pos = find("emb.pos", {c.max_len, d});
    L.ln_g = find("emb.ln.g", {d});
    L.ln_b = find("emb.ln.b", {d});
    for (std::size_t i = 0; i < c.n_layers; ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      Layer l{};
      l.wq = find(p + "attn.wq", {d, d});
      l.bq = find(p + "attn.bq", {d});
      l.wk = find(p + "attn.wk", {d, d});
      l.bk = find(p + "attn.bk", {d});
      l.wv = find(p + "attn.wv", {d, d});
      l.bv = find(p + "attn.bv", {d});
      l.wo = find(p + "attn.wo", {d, d});
      l.bo = find(p + "attn.bo", {d});
      l.ln1_g = find(p + "ln1.g", {d});
      l.ln1_b = find(p + "ln1.b", {d});
      l.w1 = find(p + "ffn.w1", {d, c.ffn_dim});
      l.b1 = find(p + "ffn.b1", {c.ffn_dim});
      l.w2 = find(p + "ffn.w2", {c.ffn_dim, d});
      l.b2 = find(p + "ffn.b2", {d});
      l.ln2_g = find(p + "ln2.g", {d});
      l.ln2_b = find(p + "ln2.b", {d});
      L.layers.push_back(l);
    }
    L.mlm_bias = find("mlm.bias", {c.vocab_size});
    return L;
  }
};

// Forward pass over already-embedded inputs x[T, d]. Adds positions, runs the
// layers and returns the final hidden states [T, d]. With a const store every
// backbone parameter enters the graph read-only. Dropout only when an rng is
// supplied.
template <class Store>
Var encode(Graph& g, Store& s, const BackboneLayout& L, const EncoderConfig& c, Var x, Rng* dropout_rng) {
  const std::size_t T = g.value(x).rows();
  if (T > c.max_len)
    throw nc::DimensionError("encode: sequence of " + std::to_string(T) + " positions exceeds max_len " +
                             std::to_string(c.max_len));
  auto P = [&](ParamId id) { return g.parameter(s[id]); };
  auto drop = [&](Var v) { return dropout_rng ? nc::dropout(v, c.dropout, *dropout_rng) : v; };

  std::vector<std::int32_t> positions(T);
  std::iota(positions.begin(), positions.end(), 0);
  Var h = nc::layer_norm(nc::add(x, nc::embedding(P(L.pos), positions)), P(L.ln_g), P(L.ln_b));
  h = drop(h);

  const std::size_t dh = c.d_model / c.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& l : L.layers) {
    Var q = nc::add_bias(nc::matmul(h, P(l.wq)), P(l.bq));
    Var k = nc::add_bias(nc::matmul(h, P(l.wk)), P(l.bk));
    Var v = nc::add_bias(nc::matmul(h, P(l.wv)), P(l.bv));
    std::vector<Var> heads;
    heads.reserve(c.n_heads);
    for (std::size_t i = 0; i < c.n_heads; ++i) {
      Var qi = nc::slice_cols(q, i * dh, dh);
      Var ki = nc::slice_cols(k, i * dh, dh);
      Var vi = nc::slice_cols(v, i * dh, dh);
      Var attn = nc::softmax(nc::scale(nc::matmul_bt(qi, ki), inv_sqrt_dh));
      heads.push_back(nc::matmul(attn, vi));
    }
    Var a = nc::add_bias(nc::matmul(nc::concat_cols(heads), P(l.wo)), P(l.bo));
    h = nc::layer_norm(nc::add(h, drop(a)), P(l.ln1_g), P(l.ln1_b));
    Var f = nc::add_bias(nc::matmul(nc::gelu(nc::add_bias(nc::matmul(h, P(l.w1)), P(l.b1))), P(l.w2)), P(l.b2));
    h = nc::layer_norm(nc::add(h, drop(f)), P(l.ln2_g), P(l.ln2_b));
  }
  return h;
}

template <class Store>
Var embed_tokens(Graph& g, Store& s, const BackboneLayout& L, std::span<const TokenId> ids) {
  return nc::embedding(g.parameter(s[L.tok]), ids);
}

// Masked-LM training example: corrupted input plus the positions to predict.
struct MaskedExample {
  std::vector<TokenId> input;
  std::vector<std::size_t> positions;
  std::vector<TokenId> targets;
};

// Selects each non-CLS position with probability `rate` (at least one when the
// note has any token); selected positions become MASK 80%, a random token 10%,
// and stay unchanged 10%.
inline MaskedExample mask_tokens(std::span<const TokenId> ids, std::size_t vocab_size, double rate, Rng& rng) {
  MaskedExample ex;
  ex.input.assign(ids.begin(), ids.end());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 1; i < ids.size(); ++i)
    if (u(rng) < rate) ex.positions.push_back(i);
  if (ex.positions.empty() && ids.size() > 1)
    ex.positions.push_back(1 + std::uniform_int_distribution<std::size_t>(0, ids.size() - 2)(rng));
  std::uniform_int_distribution<TokenId> random_token(static_cast<TokenId>(Vocabulary::kNumSpecials),
                                                      static_cast<TokenId>(vocab_size - 1));
  for (auto p : ex.positions) {
    ex.targets.push_back(ids[p]);
    const double r = u(rng);
    if (r < 0.8)
      ex.input[p] = Vocabulary::kMask;
    else if (r < 0.9)
      ex.input[p] = random_token(rng);
  }
  return ex;
}

class Backbone {
 public:
  Backbone(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(seed, "backbone.init"));
    layout_ = BackboneLayout::create(store_, config_, rng);
  }

  static Backbone from_checkpoint(nc::Checkpoint ck) {
    auto kind = ck.meta.find("kind");
    if (kind == ck.meta.end() || kind->second != "backbone") throw IoError("checkpoint is not a backbone");
    return Backbone(EncoderConfig::from_metadata(ck.meta), std::move(ck.store));
  }

  const EncoderConfig& config() const { return config_; }
  const BackboneLayout& layout() const { return layout_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  std::uint64_t content_hash() const { return nc::content_hash(store_); }

  std::string serialize() const {
    auto meta = config_.to_metadata();
    meta["kind"] = "backbone";
    return nc::serialize_checkpoint(store_, meta);
  }

  // Mean cross-entropy over the masked positions of one example.
  template <class Self>
  static Var mlm_loss(Self& self, Graph& g, const MaskedExample& ex, Rng* dropout_rng) {
    auto& s = self.store_;
    const auto& L = self.layout_;
    Var h = encode(g, s, L, self.config_, embed_tokens(g, s, L, ex.input), dropout_rng);
    Var logits = nc::add_bias(nc::matmul_bt(nc::select_rows(h, ex.positions), g.parameter(s[L.tok])),
                              g.parameter(s[L.mlm_bias]));
    return nc::cross_entropy(logits, ex.targets);
  }

  // Per-position argmax predictions for the masked positions (inference).
  std::vector<TokenId> mlm_predict(const MaskedExample& ex) const {
    Graph g;
    g.set_grad_enabled(false);
    Var h = encode(g, store_, layout_, config_, embed_tokens(g, store_, layout_, ex.input), nullptr);
    Var logits = nc::add_bias(nc::matmul_bt(nc::select_rows(h, ex.positions), g.parameter(store_[layout_.tok])),
                              g.parameter(store_[layout_.mlm_bias]));
    const Tensor& Lg = g.value(logits);
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < Lg.rows(); ++i) {
      auto r = Lg.row(i);
      out.push_back(static_cast<TokenId>(std::max_element(r.begin(), r.end()) - r.begin()));
    }
    return out;
  }

 private:
  Backbone(EncoderConfig config, ParameterStore store)
      : config_(config), store_(std::move(store)), layout_(BackboneLayout::locate(store_, config_)) {}

  EncoderConfig config_;
  ParameterStore store_;
  BackboneLayout layout_;
};

// ---------------------------------------------------------------------------
// Masked-LM pretraining

struct MlmSchedule {
  std::size_t steps = 300;
  std::size_t batch_size = 16;
  nc::AdamConfig adam{.lr = 1e-3};
  double mask_rate = 0.15;
  double holdout_fraction = 0.1;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
};

struct MlmReport {
  double initial_loss = 0.0;  // held-out masked-token cross-entropy before training
  double final_loss = 0.0;
  std::size_t steps = 0;
  std::size_t train_notes = 0;
  std::size_t heldout_notes = 0;
};

// Held-out loss with masks fixed by `seed`, so repeated calls are comparable.
inline double mlm_eval_loss(const Backbone& bb, const std::vector<std::vector<TokenId>>& notes, double mask_rate,
                            std::uint64_t seed) {
  Rng rng(derive_seed(seed, "mlm.eval"));
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& ids : notes) {
    if (ids.size() < 2) continue;
    const auto ex = mask_tokens(ids, bb.config().vocab_size, mask_rate, rng);
    Graph g;
    g.set_grad_enabled(false);
    total += g.value(Backbone::mlm_loss(bb, g, ex, nullptr)).data[0] * static_cast<double>(ex.positions.size());
    n += ex.positions.size();
  }
  if (n == 0) throw ConfigError("mlm: no maskable tokens in the evaluation notes");
  return total / static_cast<double>(n);
}

inline MlmReport pretrain_mlm(Backbone& bb, std::vector<std::vector<TokenId>> notes, const MlmSchedule& sched) {
  if (sched.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
  notes.erase(std::remove_if(notes.begin(), notes.end(), [](const auto& n) { return n.size() < 2; }), notes.end());
  if (notes.size() < 2) throw ConfigError("pretrain: need at least two non-empty notes");
  Rng rng(derive_seed(sched.seed, "mlm.train"));
  std::shuffle(notes.begin(), notes.end(), rng);
  const auto n_hold = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(sched.holdout_fraction * static_cast<double>(notes.size()))), 1,
      notes.size() - 1);
  const std::vector<std::vector<TokenId>> heldout(notes.end() - static_cast<std::ptrdiff_t>(n_hold), notes.end());
  notes.resize(notes.size() - n_hold);

  MlmReport rep;
  rep.train_notes = notes.size();
  rep.heldout_notes = heldout.size();
  rep.initial_loss = mlm_eval_loss(bb, heldout, sched.mask_rate, sched.seed);

  auto& store = bb.store();
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < sched.steps; ++step) {
    store.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < sched.batch_size; ++b) {
      if (cursor == notes.size()) {
        std::shuffle(notes.begin(), notes.end(), rng);
        cursor = 0;
      }
      const auto ex = mask_tokens(notes[cursor++], bb.config().vocab_size, sched.mask_rate, rng);
      Graph g;
      Var loss = nc::scale(Backbone::mlm_loss(bb, g, ex, &rng), 1.0 / static_cast<double>(sched.batch_size));
      batch_loss += g.value(loss).data[0];
      g.backward(loss);
    }
    if (!std::isfinite(batch_loss)) throw TrainingError("pretrain: loss diverged at step " + std::to_string(step));
    nc::clip_grad_norm(store, sched.clip_norm);
    nc::adam_step(store, sched.adam);
    rep.steps = step + 1;
  }
  rep.final_loss = mlm_eval_loss(bb, heldout, sched.mask_rate, sched.seed);
  return rep;
}

// ---------------------------------------------------------------------------
// Supervised adaptation

// A note with its patient's label propagated to it.
struct LabeledNote {
  std::string patient_id;
  std::string note_id;
  std::vector<TokenId> ids;  // CLS + tokens, unpadded
  int label = 0;
};

inline std::vector<LabeledNote> label_notes(const Corpus& patients, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<LabeledNote> out;
  for (const auto& p : patients)
    for (const auto& n : p.notes) {
      const auto enc = text::encode(n.text, vocab, max_len);
      const auto active = enc.active();
      out.push_back({p.patient_id, n.note_id, {active.begin(), active.end()}, p.label()});
    }
  return out;
}

struct TrainSchedule {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  nc::AdamConfig adam{};
  double clip_norm = 1.0;
  std::size_t patience = 5;               // epochs without improvement before stopping; 0 disables
  std::size_t max_notes_per_patient = 0;  // per-epoch subsample cap; 0 = all notes
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0) throw ConfigError("schedule.epochs must be positive");
    if (batch_size == 0) throw ConfigError("schedule.batch_size must be positive");
    if (!(adam.lr > 0.0)) throw ConfigError("schedule.lr must be positive");
  }
};

namespace detail {

inline std::vector<std::size_t> epoch_order(const std::vector<LabeledNote>& train, const TrainSchedule& sched, Rng& rng) {
  std::vector<std::size_t> order;
  if (sched.max_notes_per_patient == 0) {
    order.resize(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
  } else {
    std::map<std::string, std::vector<std::size_t>> by_patient;
    for (std::size_t i = 0; i < train.size(); ++i) by_patient[train[i].patient_id].push_back(i);
    for (auto& [id, idx] : by_patient) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(std::min(idx.size(), sched.max_notes_per_patient));
      order.insert(order.end(), idx.begin(), idx.end());
    }
  }
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Mini-batch BCE training of `store` with best-epoch selection on `valid`.
// forward(graph, ids, rng) returns the logit; predict(ids) the probability.
template <class Forward, class Predict>
TrainReport train_binary(ParameterStore& store, const std::vector<LabeledNote>& train,
                         const std::vector<LabeledNote>& valid, const TrainSchedule& sched, Forward forward,
                         Predict predict) {
  sched.validate();
  if (train.empty()) throw ConfigError("training set has no notes");
  Rng rng(derive_seed(sched.seed, "train"));
  TrainReport rep;
  std::vector<Tensor> best = store.values();
  bool have_best = false;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= sched.epochs; ++epoch) {
    const auto order = epoch_order(train, sched, rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += sched.batch_size) {
      const std::size_t end = std::min(order.size(), start + sched.batch_size);
      store.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train[order[i]];
        Graph g;
        const double y = ex.label;
        Var loss = nc::scale(nc::bce_with_logits(forward(g, ex.ids, &rng), std::span<const double>(&y, 1)),
                             1.0 / static_cast<double>(end - start));
        loss_sum += g.value(loss).data[0] * static_cast<double>(end - start);
        g.backward(loss);
      }
      if (!std::isfinite(loss_sum))
        throw TrainingError("training loss diverged in epoch " + std::to_string(epoch) + " at example " +
                            std::to_string(start));
      nc::clip_grad_norm(store, sched.clip_norm);
      nc::adam_step(store, sched.adam);
    }
    store.zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    if (valid.empty()) {
      rec.valid_score = -rec.train_loss;
    } else {
      std::vector<double> probs;
      std::vector<int> labels;
      for (const auto& n : valid) probs.push_back(predict(n.ids)), labels.push_back(n.label);
      auto [score, is_auroc] = selection_score(probs, labels);
      rec.valid_score = score;
      if (!is_auroc) rep.selection_metric = "valid_note_neg_bce";
    }
    rep.epochs.push_back(rec);
    if (!have_best || rec.valid_score > rep.best_valid_score) {
      have_best = true;
      rep.best_valid_score = rec.valid_score;
      rep.best_epoch = epoch;
      best = store.values();
      since_best = 0;
    } else if (sched.patience && ++since_best >= sched.patience) {
      break;
    }
  }
  store.restore(best);
  return rep;
}

}  // namespace detail

inline constexpr const char* kHeadWeight = "head.w";
inline constexpr const char* kHeadBias = "head.b";

// Full fine-tuning: every backbone parameter plus a linear head on the CLS
// state, all trainable.
class FineTunedClassifier {
 public:
  explicit FineTunedClassifier(const Backbone& bb) : config_(bb.config()), store_(bb.store()) {
    store_.set_all(nc::Tag::Trainable);
    store_.reset_optimizer();
    layout_ = BackboneLayout::locate(store_, config_);
    head_w_ = store_.add(kHeadWeight, Tensor({config_.d_model, 1}, 0.0));
    head_b_ = store_.add(kHeadBias, Tensor({1}, 0.0));
  }

  static FineTunedClassifier from_checkpoint(nc::Checkpoint ck) {
    auto kind = ck.meta.find("kind");
    if (kind == ck.meta.end() || kind->second != "finetuned") throw IoError("checkpoint is not a fine-tuned classifier");
    return FineTunedClassifier(EncoderConfig::from_metadata(ck.meta), std::move(ck.store));
  }

  const EncoderConfig& config() const { return config_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }

  template <class Self>
  static Var logit(Self& self, Graph& g, std::span<const TokenId> ids, Rng* dropout_rng) {
    auto& s = self.store_;
    Var h = encode(g, s, self.layout_, self.config_, embed_tokens(g, s, self.layout_, ids), dropout_rng);
    return nc::add_bias(nc::matmul(nc::select_rows(h, {0}), g.parameter(s[self.head_w_])), g.parameter(s[self.head_b_]));
  }

  double predict(std::span<const TokenId> ids) const {
    Graph g;
    g.set_grad_enabled(false);
    return nc::sigmoid(g.value(logit(*this, g, ids, nullptr)).data[0]);
  }

  std::string serialize() const {
    auto meta = config_.to_metadata();
    meta["kind"] = "finetuned";
    return nc::serialize_checkpoint(store_, meta);
  }

 private:
  FineTunedClassifier(EncoderConfig config, ParameterStore store)
      : config_(config), store_(std::move(store)), layout_(BackboneLayout::locate(store_, config_)),
        head_w_(store_.id(kHeadWeight)), head_b_(store_.id(kHeadBias)) {}

  EncoderConfig config_;
  ParameterStore store_;
  BackboneLayout layout_;
  ParamId head_w_ = 0, head_b_ = 0;
};

// Soft prompt: p trainable input embeddings inserted after CLS, plus a linear
// head. Binds to one backbone by content hash; the backbone stays frozen.
class PromptAdapter {
 public:
  PromptAdapter(const Backbone& bb, std::size_t n_prompts, std::uint64_t seed)
      : n_prompts_(n_prompts), d_model_(bb.config().d_model), backbone_hash_(bb.content_hash()) {
    if (n_prompts == 0) throw ConfigError("prompt length must be positive");
    if (n_prompts + 1 >= bb.config().max_len)
      throw ConfigError("prompt length " + std::to_string(n_prompts) + " leaves no room for text within max_len " +
                        std::to_string(bb.config().max_len));
    // Initialise each prompt row from the embedding of a random vocabulary token.
    Rng rng(derive_seed(seed, "prompt.init"));
    std::uniform_int_distribution<std::size_t> pick(Vocabulary::kNumSpecials, bb.config().vocab_size - 1);
    const Tensor& emb = bb.store()[bb.layout().tok].value;
    Tensor prompt({n_prompts, d_model_});
    for (std::size_t i = 0; i < n_prompts; ++i) {
      const auto row = emb.row(pick(rng));
      std::copy(row.begin(), row.end(), prompt.row(i).begin());
    }
    prompt_ = store_.add("prompt", std::move(prompt));
    head_w_ = store_.add(kHeadWeight, Tensor({d_model_, 1}, 0.0));
    head_b_ = store_.add(kHeadBias, Tensor({1}, 0.0));
  }

  static PromptAdapter from_checkpoint(nc::Checkpoint ck, const Backbone& bb) {
    auto kind = ck.meta.find("kind");
    if (kind == ck.meta.end() || kind->second != "prompt_adapter") throw IoError("checkpoint is not a prompt adapter");
    const auto hash = ck.meta.find("backbone_hash");
    if (hash == ck.meta.end() || hash->second != hex64(bb.content_hash()))
      throw ConfigError("prompt adapter was trained against a different backbone (hash " +
                        (hash == ck.meta.end() ? std::string("missing") : hash->second) + ", backbone is " +
                        hex64(bb.content_hash()) + ")");
    return PromptAdapter(std::move(ck.store), bb);
  }

  std::size_t n_prompts() const { return n_prompts_; }
  // Longest text (CLS included) that fits next to the prompts.
  std::size_t text_capacity(const EncoderConfig& c) const { return c.max_len - n_prompts_; }
  std::uint64_t backbone_hash() const { return backbone_hash_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  std::size_t trainable_count() const { return store_.trainable_count(); }

  // Input sequence: [CLS] prompt_1..prompt_p tokens...
  template <class Self>
  static Var input_embeddings(Self& self, Graph& g, const Backbone& bb, std::span<const TokenId> ids) {
    if (ids.empty() || ids[0] != Vocabulary::kCls) throw nc::DimensionError("prompt adapter: input must start with CLS");
    if (ids.size() > self.text_capacity(bb.config()))
      throw nc::DimensionError("prompt adapter: " + std::to_string(ids.size()) + " ids exceed text capacity " +
                               std::to_string(self.text_capacity(bb.config())));
    std::vector<Var> parts = {embed_tokens(g, bb.store(), bb.layout(), ids.first(1)), g.parameter(self.store_[self.prompt_])};
    if (ids.size() > 1) parts.push_back(embed_tokens(g, bb.store(), bb.layout(), ids.subspan(1)));
    return nc::concat_rows(parts);
  }

  template <class Self>
  static Var logit(Self& self, Graph& g, const Backbone& bb, std::span<const TokenId> ids, Rng* dropout_rng) {
    Var x = input_embeddings(self, g, bb, ids);
    Var h = encode(g, bb.store(), bb.layout(), bb.config(), x, dropout_rng);
    // The head reads the mean output state over CLS and the prompt positions.
    // Prompts can learn queries of their own in the first layer; CLS cannot.
    const std::size_t k = self.n_prompts_ + 1;
    std::vector<std::size_t> rows(k);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    Tensor avg({1, k});
    std::fill(avg.data.begin(), avg.data.end(), 1.0 / static_cast<double>(k));
    Var pooled = nc::matmul(g.constant(std::move(avg)), nc::select_rows(h, std::move(rows)));
    return nc::add_bias(nc::matmul(pooled, g.parameter(self.store_[self.head_w_])), g.parameter(self.store_[self.head_b_]));
  }

  double predict(const Backbone& bb, std::span<const TokenId> ids) const {
    Graph g;
    g.set_grad_enabled(false);
    return nc::sigmoid(g.value(logit(*this, g, bb, ids, nullptr)).data[0]);
  }

  std::string serialize() const {
    return nc::serialize_checkpoint(store_, {{"kind", "prompt_adapter"},
                                             {"n_prompts", std::to_string(n_prompts_)},
                                             {"d_model", std::to_string(d_model_)},
                                             {"backbone_hash", hex64(backbone_hash_)}});
  }

 private:
  PromptAdapter(ParameterStore store, const Backbone& bb)
      : d_model_(bb.config().d_model), backbone_hash_(bb.content_hash()), store_(std::move(store)) {
    prompt_ = store_.id("prompt");
    head_w_ = store_.id(kHeadWeight);
    head_b_ = store_.id(kHeadBias);
    n_prompts_ = store_[prompt_].value.rows();
    if (store_[prompt_].value.cols() != d_model_ || store_[head_w_].value.shape != nc::Shape{d_model_, 1})
      throw IoError("prompt adapter shapes do not match the backbone");
  }

  std::size_t n_prompts_ = 0;
  std::size_t d_model_ = 0;
  std::uint64_t backbone_hash_ = 0;
  ParameterStore store_;
  ParamId prompt_ = 0, head_w_ = 0, head_b_ = 0;
};

struct FineTuneResult {
  FineTunedClassifier model;
  TrainReport report;
};

inline FineTuneResult finetune(const Backbone& bb, const Corpus& train, const Corpus& valid, const Vocabulary& vocab,
                               const TrainSchedule& sched) {
  if (vocab.size() != bb.config().vocab_size) throw ConfigError("vocabulary size does not match the backbone");
  const auto tr = label_notes(train, vocab, bb.config().max_len);
  const auto va = label_notes(valid, vocab, bb.config().max_len);
  if (tr.empty()) throw ConfigError("fine-tuning needs a non-empty training set");
  FineTunedClassifier model(bb);
  auto report = detail::train_binary(
      model.store(), tr, va, sched,
      [&](Graph& g, std::span<const TokenId> ids, Rng* rng) { return FineTunedClassifier::logit(model, g, ids, rng); },
      [&](std::span<const TokenId> ids) { return model.predict(ids); });
  return {std::move(model), std::move(report)};
}

struct PromptTuneResult {
  PromptAdapter adapter;
  TrainReport report;
};

inline PromptTuneResult soft_prompt_tune(const Backbone& bb, const Corpus& train, const Corpus& valid,
                                         const Vocabulary& vocab, std::size_t n_prompts, const TrainSchedule& sched) {
  if (vocab.size() != bb.config().vocab_size) throw ConfigError("vocabulary size does not match the backbone");
  PromptAdapter adapter(bb, n_prompts, sched.seed);
  const std::size_t cap = adapter.text_capacity(bb.config());
  const auto tr = label_notes(train, vocab, cap);
  const auto va = label_notes(valid, vocab, cap);
  if (tr.empty()) throw ConfigError("prompt tuning needs a non-empty training set");
  auto report = detail::train_binary(
      adapter.store(), tr, va, sched,
      // The frozen backbone runs in inference mode, dropout off.
      [&](Graph& g, std::span<const TokenId> ids, Rng*) { return PromptAdapter::logit(adapter, g, bb, ids, nullptr); },
      [&](std::span<const TokenId> ids) { return adapter.predict(bb, ids); });
  return {std::move(adapter), std::move(report)};
}

// Per-note predictions for every note of every patient.
template <class PredictIds>
eval::PredictionSet predict_patients(const Corpus& patients, const Vocabulary& vocab, std::size_t max_len,
                                     PredictIds predict) {
  eval::PredictionSet out;
  for (const auto& n : label_notes(patients, vocab, max_len))
    out.push_back({n.patient_id, n.note_id, predict(n.ids), n.label});
  return out;
}

inline double predict_note(const FineTunedClassifier& m, const Vocabulary& vocab, std::string_view note) {
  const auto enc = text::encode(note, vocab, m.config().max_len);
  return m.predict(enc.active());
}

inline double predict_note(const Backbone& bb, const PromptAdapter& a, const Vocabulary& vocab, std::string_view note) {
  const auto enc = text::encode(note, vocab, a.text_capacity(bb.config()));
  return a.predict(bb, enc.active());
}

}  // namespace promptrisk::encoder
