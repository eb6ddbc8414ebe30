#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "promptrisk/numcore.hpp"
#include "support/gradcheck.hpp"

namespace promptrisk::nc {
namespace {

using promptrisk::testing::central_difference;
using promptrisk::testing::relative_error;

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data) v = n(rng);
  return t;
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  Graph g;
  auto y = softmax(g.constant(Tensor({1, 3}, 0.0)));
  for (double v : g.value(y).data) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Ops, LayerNormOfConstantRowIsZero) {
  Graph g;
  auto x = g.constant(Tensor({2, 4}, 3.5));
  auto y = layer_norm(x, g.constant(Tensor({4}, 1.0)), g.constant(Tensor({4}, 0.0)));
  for (double v : g.value(y).data) EXPECT_EQ(v, 0.0);
}

TEST(Ops, MatmulMatchesHandComputation) {
  Graph g;
  auto a = g.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = g.constant(Tensor({3, 2}, {7, 8, 9, 10, 11, 12}));
  EXPECT_EQ(g.value(matmul(a, b)).data, (std::vector<double>{58, 64, 139, 154}));
  // A B^T with B^T given row-wise
  auto bt = g.constant(Tensor({2, 3}, {7, 9, 11, 8, 10, 12}));
  EXPECT_EQ(g.value(matmul_bt(a, bt)).data, (std::vector<double>{58, 64, 139, 154}));
}

TEST(Ops, ShapeMismatchNamesTheOperation) {
  Graph g;
  auto a = g.constant(Tensor({2, 3}));
  auto b = g.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
  }
  EXPECT_THROW(add(a, g.constant(Tensor({3, 2}))), DimensionError);
  EXPECT_THROW(embedding(a, std::vector<std::int32_t>{5}), DimensionError);
}

TEST(Backward, SumGivesOnes) {
  Graph g;
  auto x = g.leaf(Tensor({3}, {0.3, -1.0, 2.0}));
  g.backward(sum(x));
  EXPECT_EQ(g.grad(x), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SumOfSquares) {
  Graph g;
  auto x = g.leaf(Tensor({2}, {1.0, 2.0}));
  g.backward(sum(mul(x, x)));
  EXPECT_EQ(g.grad(x), (std::vector<double>{2, 4}));
}

TEST(Backward, SecondCallIsStale) {
  Graph g;
  auto x = g.leaf(Tensor({2}, {1.0, 2.0}));
  auto loss = sum(x);
  g.backward(loss);
  EXPECT_THROW(g.backward(loss), StaleGraphError);
  EXPECT_THROW(sum(x), StaleGraphError);
}

TEST(Backward, RejectsNonScalarLoss) {
  Graph g;
  auto x = g.leaf(Tensor({2}, {1.0, 2.0}));
  EXPECT_THROW(g.backward(x), DimensionError);
}

TEST(Backward, ParameterGradientsAccumulateOnlyWhenTrainable) {
  ParameterStore store;
  auto w = store.add("w", Tensor({2}, {1.0, 2.0}));
  auto f = store.add("f", Tensor({2}, {3.0, 4.0}), Tag::Frozen);
  Graph g;
  g.backward(sum(mul(g.parameter(store[w]), g.parameter(store[f]))));
  EXPECT_EQ(store[w].grad, (std::vector<double>{3, 4}));
  EXPECT_TRUE(store[f].grad.empty());
}

// Random compositions of the op suite, checked against central differences.
TEST(GradientCheck, RandomSmallGraphs) {
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 24; ++trial) {
    const std::size_t m = 2 + trial % 3, k = 3 + trial % 2, n = 2 + trial % 4;
    Tensor x0 = random_tensor({m, k}, rng), w0 = random_tensor({k, n}, rng), b0 = random_tensor({n}, rng);
    Tensor gm0 = random_tensor({n}, rng), bt0 = random_tensor({n}, rng), probe = random_tensor({m, n}, rng);
    const int variant = trial % 6;
    auto build = [&](Graph& g, Var x, Var w, Var b, Var gm, Var bt) {
      Var h = add_bias(matmul(x, w), b);
      switch (variant) {
        case 0: h = tanh(h); break;
        case 1: h = gelu(h); break;
        case 2: h = softmax(h); break;
        case 3: h = layer_norm(h, gm, bt); break;
        case 4: h = mul(gelu(h), scale(h, 0.5)); break;
        default: {
          Var s = softmax(matmul_bt(h, h));
          h = layer_norm(add(matmul(s, h), h), gm, bt);
        }
      }
      return sum(mul(h, g.constant(probe)));
    };
    Graph g;
    auto x = g.leaf(x0), w = g.leaf(w0), b = g.leaf(b0), gm = g.leaf(gm0), bt = g.leaf(bt0);
    g.backward(build(g, x, w, b, gm, bt));
    std::vector<Tensor*> inputs = {&x0, &w0, &b0, &gm0, &bt0};
    std::vector<Var> vars = {x, w, b, gm, bt};
    auto f = [&]() {
      Graph fg;
      fg.set_grad_enabled(false);
      return fg.value(build(fg, fg.constant(x0), fg.constant(w0), fg.constant(b0), fg.constant(gm0), fg.constant(bt0))).data[0];
    };
    for (std::size_t v = 0; v < inputs.size(); ++v) {
      const auto& analytic = g.grad(vars[v]);
      for (std::size_t i = 0; i < inputs[v]->size(); ++i)
        worst = std::max(worst, relative_error(analytic[i], central_difference(f, inputs[v]->data[i])));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(GradientCheck, EmbeddingConcatSliceAndLosses) {
  Rng rng(7);
  Tensor table0 = random_tensor({6, 4}, rng), extra0 = random_tensor({2, 4}, rng), head0 = random_tensor({2, 5}, rng);
  const std::vector<std::int32_t> ids = {1, 3, 3, 0};
  const std::vector<std::int32_t> targets = {4, 0, 2};
  const std::vector<double> labels = {1.0, 0.0};
  auto build = [&](Var table, Var extra, Var head) {
    std::vector<Var> parts = {embedding(table, ids), extra};
    Var h = concat_rows(parts);                                  // 6 x 4
    std::vector<Var> cols = {slice_cols(h, 0, 2), slice_cols(h, 2, 2)};
    Var j = concat_cols(std::vector<Var>{cols[1], cols[0]});     // 6 x 4
    Var logits = matmul_bt(select_rows(j, {0, 2, 5}), table);   // 3 x 6
    Var ce = cross_entropy(slice_cols(logits, 0, 5), targets);
    Var z = matmul(slice_cols(select_rows(j, {1, 4}), 0, 2), slice_cols(head, 0, 1));  // 2 x 1
    return add(ce, bce_with_logits(z, labels));
  };
  Graph g;
  auto t = g.leaf(table0), e = g.leaf(extra0), hd = g.leaf(head0);
  g.backward(build(t, e, hd));
  auto f = [&]() {
    Graph fg;
    fg.set_grad_enabled(false);
    return fg.value(build(fg.constant(table0), fg.constant(extra0), fg.constant(head0))).data[0];
  };
  double worst = 0.0;
  for (auto [tensor, var] : {std::pair{&table0, t}, std::pair{&extra0, e}, std::pair{&head0, hd}}) {
    const auto analytic = g.grad(var);
    for (std::size_t i = 0; i < tensor->size(); ++i)
      worst = std::max(worst, relative_error(analytic[i], central_difference(f, tensor->data[i])));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Ops, CrossEntropyOfUniformLogitsIsLogClasses) {
  Graph g;
  auto loss = cross_entropy(g.constant(Tensor({2, 50}, 0.0)), std::vector<std::int32_t>{3, 7});
  EXPECT_NEAR(g.value(loss).data[0], std::log(50.0), 1e-12);
}

TEST(Ops, DropoutZeroRateIsIdentityAndScalesKeptUnits) {
  Graph g;
  Rng rng(1);
  auto x = g.constant(Tensor({1, 1000}, 1.0));
  EXPECT_EQ(dropout(x, 0.0, rng).id, x.id);
  auto y = dropout(x, 0.5, rng);
  for (double v : g.value(y).data) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterStore s;
  auto id = s.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
  s[id].grad_buffer();
  const auto before = s[id].value;
  adam_step(s, {});
  EXPECT_EQ(s[id].value, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterStore s;
  auto id = s.add("w", Tensor({1}, {0.0}));
  s[id].grad_buffer()[0] = 1.0;
  adam_step(s, {.lr = 0.1});
  // m_hat / sqrt(v_hat) == 1 on the first step
  EXPECT_NEAR(s[id].value.data[0], -0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, FrozenParameterIsUntouched) {
  ParameterStore s;
  auto id = s.add("w", Tensor({2}, {1.0, 2.0}), Tag::Frozen);
  s[id].grad_buffer() = {5.0, -3.0};
  const auto bytes = serialize_checkpoint(s);
  for (int i = 0; i < 10; ++i) adam_step(s, {.lr = 0.5});
  EXPECT_EQ(serialize_checkpoint(s), bytes);
}

TEST(Adam, RejectsNonPositiveLearningRate) {
  ParameterStore s;
  EXPECT_THROW(adam_step(s, {.lr = 0.0}), ConfigError);
  EXPECT_THROW(adam_step(s, {.lr = -1e-3}), ConfigError);
}

TEST(Checkpoint, RoundTripPreservesNamesShapesTagsAndValues) {
  Rng rng(3);
  ParameterStore s;
  s.add("a", random_tensor({3, 2}, rng));
  s.add("b", random_tensor({4}, rng), Tag::Frozen);
  const Metadata meta = {{"kind", "test"}, {"backbone", "abc"}};
  const auto bytes = serialize_checkpoint(s, meta);
  const auto ck = deserialize_checkpoint(bytes);
  EXPECT_EQ(ck.meta, meta);
  ASSERT_EQ(ck.store.size(), 2u);
  EXPECT_EQ(ck.store.at("a").value, s.at("a").value);
  EXPECT_EQ(ck.store.at("b").tag, Tag::Frozen);
  EXPECT_EQ(serialize_checkpoint(ck.store, ck.meta), bytes);
}

TEST(Checkpoint, PayloadIsLittleEndian) {
  ParameterStore s;
  s.add("x", Tensor({1}, {1.0}));
  const auto bytes = serialize_checkpoint(s);
  // 1.0 == 0x3FF0000000000000: last byte of the payload is 0x3F
  EXPECT_EQ(static_cast<unsigned char>(bytes.back()), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[bytes.size() - 2]), 0xF0);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  EXPECT_THROW(deserialize_checkpoint("garbage!"), IoError);
  ParameterStore s;
  s.add("x", Tensor({2}, {1.0, 2.0}));
  auto bytes = serialize_checkpoint(s);
  bytes.pop_back();
  EXPECT_THROW(deserialize_checkpoint(bytes), IoError);
}

TEST(Checkpoint, ContentHashIgnoresTags) {
  ParameterStore s;
  s.add("x", Tensor({2}, {1.0, 2.0}));
  const auto h = content_hash(s);
  s.set_all(Tag::Frozen);
  EXPECT_EQ(content_hash(s), h);
  s.at("x").value.data[0] = 1.5;
  EXPECT_NE(content_hash(s), h);
}

}  // namespace
}  // namespace promptrisk::nc
