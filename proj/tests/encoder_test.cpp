#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "promptrisk/cohort.hpp"
#include "promptrisk/encoder.hpp"
#include "support/gradcheck.hpp"

namespace promptrisk::encoder {
namespace {

using promptrisk::testing::relative_error;

EncoderConfig tiny_config(std::size_t vocab = 40) {
  EncoderConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ffn_dim = 32;
  c.max_len = 24;
  c.dropout = 0.0;
  return c;
}

std::vector<TokenId> random_ids(std::size_t n, std::size_t vocab, Rng& rng) {
  std::uniform_int_distribution<TokenId> u(static_cast<TokenId>(Vocabulary::kNumSpecials), static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> ids = {Vocabulary::kCls};
  for (std::size_t i = 1; i < n; ++i) ids.push_back(u(rng));
  return ids;
}

// Small labelled corpus whose words come from a fixed list; positives carry "hoest".
Corpus toy_patients(std::size_t n, std::uint64_t seed) {
  const std::vector<std::string> words = {"de", "het", "een", "pijn", "koorts", "controle", "recept", "thorax"};
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> w(0, words.size() - 1), len(3, 10);
  Corpus c;
  for (std::size_t i = 0; i < n; ++i) {
    Patient p;
    p.patient_id = "T" + std::to_string(i);
    if (i % 2 == 0) p.diagnosis_date = make_date(2019, 1, 1);
    for (int k = 0; k < 2; ++k) {
      std::string text;
      for (std::size_t t = 0, L = len(rng); t < L; ++t) text += words[w(rng)] + " ";
      if (p.positive()) text += "hoest";
      p.notes.push_back({p.patient_id + "-" + std::to_string(k), make_date(2018, 1, 1), text});
    }
    c.push_back(p);
  }
  return c;
}

Vocabulary toy_vocab(const Corpus& c) { return text::build_vocab(c, 64); }

TEST(EncoderConfig, Validation) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.max_len = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab_size = 4;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(EncoderConfig, MetadataRoundTrip) {
  auto c = tiny_config(77);
  c.dropout = 0.1;
  const auto back = EncoderConfig::from_metadata(c.to_metadata());
  EXPECT_EQ(back.vocab_size, 77u);
  EXPECT_EQ(back.d_model, c.d_model);
  EXPECT_EQ(back.dropout, 0.1);
}

TEST(Backbone, CheckpointRoundTripAndDeterministicInit) {
  const Backbone a(tiny_config(), 5), b(tiny_config(), 5), c(tiny_config(), 6);
  EXPECT_EQ(a.serialize(), b.serialize());
  EXPECT_NE(a.content_hash(), c.content_hash());
  const auto back = Backbone::from_checkpoint(nc::deserialize_checkpoint(a.serialize()));
  EXPECT_EQ(back.serialize(), a.serialize());
  EXPECT_EQ(back.config().n_layers, 2u);
}

TEST(Backbone, ForwardRejectsOverlongSequence) {
  const Backbone bb(tiny_config(), 1);
  Rng rng(1);
  MaskedExample ex;
  ex.input = random_ids(25, 40, rng);
  ex.positions = {1};
  EXPECT_THROW(bb.mlm_predict(ex), nc::DimensionError);
}

TEST(Mlm, UntrainedLossIsNearUniformEntropy) {
  auto cfg = tiny_config(500);
  cfg.max_len = 64;
  const Backbone bb(cfg, 2);
  Rng rng(3);
  std::vector<std::vector<TokenId>> notes;
  for (int i = 0; i < 40; ++i) notes.push_back(random_ids(40, 500, rng));
  const double loss = mlm_eval_loss(bb, notes, 0.15, 1);
  EXPECT_NEAR(loss, std::log(500.0), 0.05 * std::log(500.0));
}

TEST(Mlm, MaskingRecipe) {
  Rng rng(9);
  std::size_t masked = 0, as_mask = 0, kept = 0, total = 0;
  std::vector<TokenId> ids = {Vocabulary::kCls};
  for (int i = 0; i < 200; ++i) ids.push_back(10 + i % 7);
  for (int rep = 0; rep < 200; ++rep) {
    const auto ex = mask_tokens(ids, 100, 0.15, rng);
    ASSERT_EQ(ex.positions.size(), ex.targets.size());
    for (std::size_t i = 0; i < ex.positions.size(); ++i) {
      const auto p = ex.positions[i];
      EXPECT_NE(p, 0u);  // CLS never masked
      EXPECT_EQ(ex.targets[i], ids[p]);
      as_mask += ex.input[p] == Vocabulary::kMask;
      kept += ex.input[p] == ids[p];
    }
    masked += ex.positions.size();
    total += ids.size() - 1;
  }
  EXPECT_NEAR(static_cast<double>(masked) / static_cast<double>(total), 0.15, 0.01);
  EXPECT_NEAR(static_cast<double>(as_mask) / static_cast<double>(masked), 0.80, 0.02);
  EXPECT_GT(static_cast<double>(kept) / static_cast<double>(masked), 0.08);

  const std::vector<TokenId> two = {Vocabulary::kCls, 17};
  for (int rep = 0; rep < 20; ++rep) EXPECT_EQ(mask_tokens(two, 100, 0.0, rng).positions.size(), 1u);
}

// Five-token language where each token determines the next: t -> t+1 (mod 5).
TEST(Mlm, LearnsDeterministicBigramLanguage) {
  const std::size_t V = Vocabulary::kNumSpecials + 5;
  auto cfg = tiny_config(V);
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.ffn_dim = 64;
  cfg.max_len = 12;
  cfg.dropout = 0.0;
  Backbone bb(cfg, 4);
  Rng rng(10);
  std::uniform_int_distribution<int> start(0, 4);
  auto sentence = [&] {
    std::vector<TokenId> ids = {Vocabulary::kCls};
    int t = start(rng);
    for (int i = 0; i < 11; ++i, t = (t + 1) % 5) ids.push_back(static_cast<TokenId>(Vocabulary::kNumSpecials + t));
    return ids;
  };
  std::vector<std::vector<TokenId>> notes;
  for (int i = 0; i < 400; ++i) notes.push_back(sentence());
  MlmSchedule sched;
  sched.steps = 300;
  sched.adam.lr = 3e-3;
  sched.seed = 2;
  const auto rep = pretrain_mlm(bb, notes, sched);
  EXPECT_LT(rep.final_loss, 0.8 * rep.initial_loss);

  // A single [MASK] per sentence: the optimal predictor is exact.
  std::size_t correct = 0, n = 0;
  std::uniform_int_distribution<std::size_t> pos(1, 11);
  for (int i = 0; i < 200; ++i) {
    MaskedExample ex;
    const auto s = sentence();
    ex.input = s;
    const auto p = pos(rng);
    ex.input[p] = Vocabulary::kMask;
    ex.positions = {p};
    ex.targets = {s[p]};
    correct += bb.mlm_predict(ex)[0] == s[p];
    ++n;
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(n), 0.9);
}

TEST(Mlm, SameSeedSameCheckpoint) {
  Rng rng(5);
  std::vector<std::vector<TokenId>> notes;
  for (int i = 0; i < 30; ++i) notes.push_back(random_ids(12, 40, rng));
  MlmSchedule sched;
  sched.steps = 5;
  sched.batch_size = 4;
  auto cfg = tiny_config();
  cfg.dropout = 0.1;
  Backbone a(cfg, 1), b(cfg, 1);
  pretrain_mlm(a, notes, sched);
  pretrain_mlm(b, notes, sched);
  EXPECT_EQ(a.serialize(), b.serialize());
}

TEST(Mlm, NeedsNotes) {
  Backbone bb(tiny_config(), 1);
  EXPECT_THROW(pretrain_mlm(bb, {{Vocabulary::kCls}}, {}), ConfigError);
}

TEST(FineTune, AllParametersTrainableAndUntrainedPredictsHalf) {
  const Backbone bb(tiny_config(), 1);
  const FineTunedClassifier m(bb);
  EXPECT_EQ(m.store().trainable_count(), m.store().total_count());
  EXPECT_EQ(m.store().total_count(), bb.store().total_count() + bb.config().d_model + 1);
  Rng rng(2);
  for (int i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(m.predict(random_ids(1 + i, 40, rng)), 0.5);
}

TEST(FineTune, GradientMatchesFiniteDifferencesThroughWholeEncoder) {
  auto cfg = tiny_config();
  cfg.d_model = 8;
  cfg.ffn_dim = 12;
  cfg.max_len = 8;
  const Backbone bb(cfg, 3);
  FineTunedClassifier m(bb);
  Rng rng(4);
  std::normal_distribution<double> n(0.0, 0.5);
  for (auto& p : m.store())
    for (double& v : p.value.data) v += 0.3 * n(rng);  // move away from the symmetric init
  const auto ids = random_ids(6, cfg.vocab_size, rng);
  const double y = 1.0;
  auto loss = [&] {
    Graph g;
    g.set_grad_enabled(false);
    return g.value(nc::bce_with_logits(FineTunedClassifier::logit(std::as_const(m), g, ids, nullptr),
                                       std::span<const double>(&y, 1)))
        .data[0];
  };
  m.store().zero_grad();
  {
    Graph g;
    g.backward(nc::bce_with_logits(FineTunedClassifier::logit(m, g, ids, nullptr), std::span<const double>(&y, 1)));
  }
  double worst = 0.0;
  for (auto& p : m.store()) {
    std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
    for (int s = 0; s < 3; ++s) {
      const std::size_t i = pick(rng);
      const double analytic = p.grad.empty() ? 0.0 : p.grad[i];
      const double keep = p.value.data[i];
      p.value.data[i] = keep + 1e-5;
      const double up = loss();
      p.value.data[i] = keep - 1e-5;
      const double down = loss();
      p.value.data[i] = keep;
      const double numeric = (up - down) / 2e-5;
      worst = std::max(worst, relative_error(analytic, numeric));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(FineTune, EmptyTrainRejected) {
  const auto c = toy_patients(4, 1);
  const auto vocab = toy_vocab(c);
  auto cfg = tiny_config(vocab.size());
  const Backbone bb(cfg, 1);
  EXPECT_THROW(finetune(bb, {}, c, vocab, {}), ConfigError);
}

TEST(FineTune, SmokeOnTwoPatientsGivesProbabilities) {
  const auto c = toy_patients(4, 1);
  const auto vocab = toy_vocab(c);
  const Backbone bb(tiny_config(vocab.size()), 1);
  TrainSchedule s;
  s.epochs = 2;
  const Corpus train(c.begin(), c.begin() + 2), valid(c.begin() + 2, c.end());
  const auto res = finetune(bb, train, valid, vocab, s);
  EXPECT_EQ(res.report.epochs.size(), 2u);
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const double p = res.model.predict(random_ids(1 + i % 20, vocab.size(), rng));
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
  EXPECT_EQ(predict_note(res.model, vocab, "hoest pijn"), predict_note(res.model, vocab, "hoest pijn"));
}

TEST(FineTune, LearnsToyTask) {
  const auto c = toy_patients(60, 2);
  const auto vocab = toy_vocab(c);
  const Backbone bb(tiny_config(vocab.size()), 1);
  TrainSchedule s;
  s.epochs = 10;
  s.adam.lr = 3e-3;
  const Corpus train(c.begin(), c.begin() + 40), valid(c.begin() + 40, c.end());
  const auto res = finetune(bb, train, valid, vocab, s);
  const auto preds = predict_patients(valid, vocab, bb.config().max_len, [&](auto ids) { return res.model.predict(ids); });
  EXPECT_GE(eval::evaluate(preds, {}).note.auroc, 0.95);
  EXPECT_GE(res.report.best_epoch, 1u);
  EXPECT_LE(res.report.best_epoch, res.report.epochs.size());
}

TEST(FineTune, CheckpointRoundTrip) {
  const Backbone bb(tiny_config(), 1);
  const FineTunedClassifier m(bb);
  const auto back = FineTunedClassifier::from_checkpoint(nc::deserialize_checkpoint(m.serialize()));
  EXPECT_EQ(back.serialize(), m.serialize());
  EXPECT_THROW(FineTunedClassifier::from_checkpoint(nc::deserialize_checkpoint(bb.serialize())), IoError);
}

TEST(Prompt, TrainableCountIsPromptPlusHead) {
  auto cfg = tiny_config();
  cfg.d_model = 64;
  cfg.n_heads = 4;
  for (std::size_t layers : {1u, 2u, 4u}) {
    cfg.n_layers = layers;
    const Backbone bb(cfg, 1);
    const PromptAdapter a(bb, 8, 1);
    EXPECT_EQ(a.trainable_count(), 8u * 64u + 64u + 1u);
    EXPECT_EQ(a.trainable_count(), 577u);
  }
}

TEST(Prompt, PromptRowsStartAsVocabularyEmbeddings) {
  const Backbone bb(tiny_config(), 1);
  const PromptAdapter a(bb, 4, 3);
  const auto& prompt = a.store().at("prompt").value;
  const auto& emb = bb.store().at("emb.tok").value;
  for (std::size_t r = 0; r < 4; ++r) {
    bool found = false;
    for (std::size_t v = Vocabulary::kNumSpecials; v < emb.rows() && !found; ++v)
      found = std::equal(prompt.row(r).begin(), prompt.row(r).end(), emb.row(v).begin());
    EXPECT_TRUE(found) << "prompt row " << r;
  }
}

TEST(Prompt, LengthMustLeaveRoomForText) {
  const Backbone bb(tiny_config(), 1);  // max_len 24
  EXPECT_THROW(PromptAdapter(bb, 24, 1), ConfigError);
  EXPECT_THROW(PromptAdapter(bb, 30, 1), ConfigError);
  EXPECT_THROW(PromptAdapter(bb, 0, 1), ConfigError);
  EXPECT_NO_THROW(PromptAdapter(bb, 22, 1));
}

TEST(Prompt, SequenceIsClsPromptsThenText) {
  const Backbone bb(tiny_config(), 1);
  const PromptAdapter a(bb, 5, 1);
  EXPECT_EQ(a.text_capacity(bb.config()), 19u);
  Rng rng(3);
  for (std::size_t t : {1u, 2u, 10u, 19u}) {
    const auto ids = random_ids(t, 40, rng);
    Graph g;
    const Var x = PromptAdapter::input_embeddings(a, g, bb, ids);
    const Tensor& X = g.value(x);
    ASSERT_EQ(X.rows(), 1 + 5 + (t - 1)) << t;
    const auto& emb = bb.store().at("emb.tok").value;
    const auto& prompt = a.store().at("prompt").value;
    EXPECT_TRUE(std::equal(X.row(0).begin(), X.row(0).end(), emb.row(Vocabulary::kCls).begin()));
    EXPECT_TRUE(std::equal(X.row(1).begin(), X.row(1).end(), prompt.row(0).begin()));
    if (t > 1) {
      EXPECT_TRUE(std::equal(X.row(6).begin(), X.row(6).end(), emb.row(static_cast<std::size_t>(ids[1])).begin()));
    }
    EXPECT_LE(X.rows(), bb.config().max_len);
  }
  const auto too_long = random_ids(20, 40, rng);
  Graph g;
  EXPECT_THROW(PromptAdapter::input_embeddings(a, g, bb, too_long), nc::DimensionError);
}

TEST(Prompt, GradientReachesPromptThroughAllLayers) {
  auto cfg = tiny_config();
  cfg.d_model = 8;
  cfg.ffn_dim = 12;
  cfg.n_layers = 3;
  const Backbone bb(cfg, 7);
  PromptAdapter a(bb, 3, 2);
  Rng rng(8);
  std::normal_distribution<double> n(0.0, 0.5);
  for (double& v : a.store().at(kHeadWeight).value.data) v = n(rng);
  const auto ids = random_ids(5, cfg.vocab_size, rng);
  const double y = 0.0;
  auto loss = [&] {
    Graph g;
    g.set_grad_enabled(false);
    return g.value(nc::bce_with_logits(PromptAdapter::logit(std::as_const(a), g, bb, ids, nullptr),
                                       std::span<const double>(&y, 1)))
        .data[0];
  };
  a.store().zero_grad();
  {
    Graph g;
    g.backward(nc::bce_with_logits(PromptAdapter::logit(a, g, bb, ids, nullptr), std::span<const double>(&y, 1)));
  }
  auto& prompt = a.store().at("prompt");
  ASSERT_FALSE(prompt.grad.empty());
  for (std::size_t i : {0u, 5u, 13u, 23u}) {
    const double keep = prompt.value.data[i];
    prompt.value.data[i] = keep + 1e-5;
    const double up = loss();
    prompt.value.data[i] = keep - 1e-5;
    const double down = loss();
    prompt.value.data[i] = keep;
    const double numeric = (up - down) / 2e-5;
    EXPECT_NE(prompt.grad[i], 0.0);
    EXPECT_LT(relative_error(prompt.grad[i], numeric), 1e-3) << "coordinate " << i;
  }
  // Backbone received nothing.
  for (const auto& p : bb.store()) EXPECT_TRUE(p.grad.empty() || std::all_of(p.grad.begin(), p.grad.end(), [](double g) { return g == 0.0; })) << p.name;
}

TEST(Prompt, TrainingLeavesBackboneBytesIdentical) {
  const auto c = toy_patients(40, 3);
  const auto vocab = toy_vocab(c);
  const Backbone bb(tiny_config(vocab.size()), 1);
  const auto before = bb.serialize();
  TrainSchedule s;
  s.epochs = 3;
  s.adam.lr = 1e-2;
  const Corpus train(c.begin(), c.begin() + 30), valid(c.begin() + 30, c.end());
  const auto res = soft_prompt_tune(bb, train, valid, vocab, 4, s);
  EXPECT_EQ(bb.serialize(), before);
  EXPECT_EQ(res.adapter.backbone_hash(), bb.content_hash());
  const double p = predict_note(bb, res.adapter, vocab, "hoest de pijn");
  EXPECT_GT(p, 0.0);
  EXPECT_LT(p, 1.0);
}

TEST(Prompt, UntrainedAdapterPredictsHalf) {
  const Backbone bb(tiny_config(), 1);
  const PromptAdapter a(bb, 4, 1);
  Rng rng(2);
  for (int i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(a.predict(bb, random_ids(1 + i, 40, rng)), 0.5);
}

TEST(Prompt, CheckpointBindsToBackbone) {
  const Backbone bb(tiny_config(), 1), other(tiny_config(), 2);
  const PromptAdapter a(bb, 4, 1);
  const auto bytes = a.serialize();
  const auto back = PromptAdapter::from_checkpoint(nc::deserialize_checkpoint(bytes), bb);
  EXPECT_EQ(back.serialize(), bytes);
  EXPECT_EQ(back.n_prompts(), 4u);
  EXPECT_THROW(PromptAdapter::from_checkpoint(nc::deserialize_checkpoint(bytes), other), ConfigError);
  // The adapter file holds only prompt and head.
  EXPECT_EQ(nc::deserialize_checkpoint(bytes).store.size(), 3u);
}

TEST(Predict, ProbabilitiesStrictlyInsideUnitIntervalOnRandomNotes) {
  const auto c = toy_patients(20, 4);
  const auto vocab = toy_vocab(c);
  const Backbone bb(tiny_config(vocab.size()), 1);
  FineTunedClassifier m(bb);
  PromptAdapter a(bb, 4, 1);
  Rng rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : m.store().at(kHeadWeight).value.data) v = n(rng);
  for (double& v : a.store().at(kHeadWeight).value.data) v = n(rng);
  std::uniform_int_distribution<std::size_t> len(0, 30), w(0, vocab.size() - 1);
  for (int i = 0; i < 1000; ++i) {
    std::string note;
    for (std::size_t t = 0, L = len(rng); t < L; ++t) note += vocab.token(static_cast<TokenId>(w(rng))) + " ";
    const double pf = predict_note(m, vocab, note), ps = predict_note(bb, a, vocab, note);
    ASSERT_GT(pf, 0.0);
    ASSERT_LT(pf, 1.0);
    ASSERT_GT(ps, 0.0);
    ASSERT_LT(ps, 1.0);
    if (i % 100 == 0) {
      EXPECT_EQ(pf, predict_note(m, vocab, note));
    }
  }
}

}  // namespace
}  // namespace promptrisk::encoder
