#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "seqrec/numerics/checkpoint.hpp"
#include "seqrec/numerics/graph.hpp"
#include "seqrec/numerics/params.hpp"
#include "support.hpp"

using namespace seqrec;
using namespace seqrec::testing;

namespace {

constexpr int kInstances = 50;

std::size_t dim(std::mt19937_64& rng, std::size_t lo = 1, std::size_t hi = 5) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::vector<std::int32_t> random_rows(std::mt19937_64& rng, std::size_t count, std::size_t bound) {
  std::vector<std::int32_t> out(count);
  for (auto& v : out) v = static_cast<std::int32_t>(std::uniform_int_distribution<std::size_t>(0, bound - 1)(rng));
  return out;
}

void expect_fd(const Builder& b, const std::vector<TensorD>& inputs, std::mt19937_64& rng) {
  const auto rep = check_op_gradients(b, inputs, rng);
  EXPECT_TRUE(rep.ok) << rep.where;
  EXPECT_GT(rep.checked, 0u);
}

}  // namespace

TEST(GraphGradients, Matmul) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < kInstances; ++i) {
    const auto m = dim(rng), k = dim(rng), n = dim(rng);
    const bool tb = i % 2;
    expect_fd([tb](GraphD& g, const auto& v) { return g.matmul(v[0], v[1], tb); },
              {random_tensor({m, k}, rng), random_tensor(tb ? Shape{n, k} : Shape{k, n}, rng)}, rng);
  }
}

TEST(GraphGradients, AddSameShapeAndRowBroadcast) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < kInstances; ++i) {
    const auto m = dim(rng), n = dim(rng);
    Shape bs = i % 3 == 0 ? Shape{m, n} : (i % 3 == 1 ? Shape{n} : Shape{1, n});
    expect_fd([](GraphD& g, const auto& v) { return g.add(v[0], v[1]); },
              {random_tensor({m, n}, rng), random_tensor(bs, rng)}, rng);
  }
}

TEST(GraphGradients, MultiplyAndScale) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < kInstances; ++i) {
    const auto m = dim(rng), n = dim(rng);
    const double f = std::uniform_real_distribution<double>(-2, 2)(rng);
    expect_fd([f](GraphD& g, const auto& v) { return g.scale(g.multiply(v[0], v[1]), f); },
              {random_tensor({m, n}, rng), random_tensor({m, n}, rng)}, rng);
  }
}

TEST(GraphGradients, Softmax) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < kInstances; ++i)
    expect_fd([](GraphD& g, const auto& v) { return g.softmax(v[0]); }, {random_tensor({dim(rng), dim(rng, 2)}, rng, -3, 3)},
              rng);
}

TEST(GraphGradients, LayerNorm) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < kInstances; ++i) {
    const auto m = dim(rng), n = dim(rng, 2, 6);
    expect_fd([](GraphD& g, const auto& v) { return g.layer_norm(v[0], v[1], v[2]); },
              {random_tensor({m, n}, rng, -2, 2), random_tensor({n}, rng, 0.5, 1.5), random_tensor({n}, rng)}, rng);
  }
}

TEST(GraphGradients, Gelu) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < kInstances; ++i)
    expect_fd([](GraphD& g, const auto& v) { return g.gelu(v[0]); }, {random_tensor({dim(rng), dim(rng)}, rng, -3, 3)},
              rng);
}

TEST(GraphGradients, GatherAndGatherMean) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < kInstances; ++i) {
    const auto rows = dim(rng, 2, 6), cols = dim(rng);
    auto idx = random_rows(rng, dim(rng, 1, 8), rows);
    expect_fd([idx](GraphD& g, const auto& v) { return g.gather(v[0], idx); }, {random_tensor({rows, cols}, rng)}, rng);
    // Segments of random length, repeats allowed.
    std::vector<std::size_t> offsets{0};
    std::vector<std::int32_t> flat;
    for (std::size_t s = 0, segs = dim(rng, 1, 4); s < segs; ++s) {
      auto part = random_rows(rng, dim(rng, 1, 4), rows);
      flat.insert(flat.end(), part.begin(), part.end());
      offsets.push_back(flat.size());
    }
    expect_fd([flat, offsets](GraphD& g, const auto& v) { return g.gather_mean(v[0], flat, offsets); },
              {random_tensor({rows, cols}, rng)}, rng);
  }
}

TEST(GraphGradients, MeanConcatReshape) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < kInstances; ++i) {
    const auto m = dim(rng), n = dim(rng);
    const int axis = i % 2;
    expect_fd([axis](GraphD& g, const auto& v) { return g.mean(v[0], axis); }, {random_tensor({m, n}, rng)}, rng);
    expect_fd([](GraphD& g, const auto& v) { return g.mean(v[0], 0); }, {random_tensor({n}, rng)}, rng);
    const auto extra = dim(rng);
    expect_fd(
        [axis](GraphD& g, const auto& v) {
          const VarD parts[] = {v[0], v[1]};
          return g.concat(parts, axis);
        },
        {random_tensor({m, n}, rng), random_tensor(axis == 0 ? Shape{extra, n} : Shape{m, extra}, rng)}, rng);
    expect_fd([m, n](GraphD& g, const auto& v) { return g.reshape(v[0], {n, m}); }, {random_tensor({m, n}, rng)}, rng);
  }
}

TEST(GraphGradients, CausalMaskDotCrossEntropySum) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < kInstances; ++i) {
    const auto m = dim(rng), n = dim(rng, 2);
    expect_fd([](GraphD& g, const auto& v) { return g.softmax(g.causal_mask(v[0])); }, {random_tensor({m, m}, rng)},
              rng);
    expect_fd([](GraphD& g, const auto& v) { return g.dot(v[0], v[1]); },
              {random_tensor({m, n}, rng), random_tensor({m, n}, rng)}, rng);
    auto targets = random_rows(rng, m, n);
    expect_fd([targets](GraphD& g, const auto& v) { return g.cross_entropy(v[0], targets); },
              {random_tensor({m, n}, rng, -4, 4)}, rng);
    expect_fd([](GraphD& g, const auto& v) { return g.sum(v[0]); }, {random_tensor({m, n}, rng)}, rng);
  }
}

TEST(GraphGradients, ComposedSequenceLoss) {
  std::mt19937_64 rng(10);
  auto tiny = tiny_catalog();
  const auto split = split_leave_one_out(tiny.dataset.users);
  const auto pop = popularity_distribution(split, tiny.dataset.catalog.size());
  const NegativeSampler sampler(pop);
  for (int i = 0; i < 6; ++i) {
    const auto cfg = tiny_model_config(tiny.vocab.size(), 1 + i % 2, 2, 4, 6);
    auto params = init_params<double>(cfg, static_cast<std::uint64_t>(i));
    // Larger weights than the init scale so every path carries gradient.
    for (std::size_t a = 0; a < params.store.size(); ++a)
      if (!params.info[a].layer_norm_gain)
        for (double& v : params.store[a].values()) v = v * 20 + (a == params.layout.tok_emb ? 0 : 0.01);
    LossConfig lc;
    lc.num_negatives = 3;
    lc.shared_negatives = i % 2 == 0;
    lc.temperature = 0.7;
    const auto& items = split.train[static_cast<std::size_t>(i) % split.train.size()].items;
    Rng srng = negatives_stream(1, 0, static_cast<std::uint64_t>(i));
    const auto negs = draw_sequence_negatives(sampler, items, lc, srng);
    const LossSequence batch[] = {{items, negs}};
    const auto rep = check_sequence_loss_gradients(params, batch, tiny.tokens, lc, rng, 300);
    EXPECT_TRUE(rep.ok) << rep.where;
  }
}

TEST(Graph, BackwardBeforeForwardIsAnError) {
  Graph g;
  auto x = g.input(Tensor({2, 2}, {1, 2, 3, 4}));
  auto s = g.sum(x);
  EXPECT_THROW(g.backward(s), NumericError);
  g.forward();
  g.backward(s);
  EXPECT_THROW(g.backward(s), NumericError);
}

TEST(Graph, ShapeErrorsNameTheOperator) {
  Graph g;
  auto a = g.input(Tensor({2, 3}), "left");
  auto b = g.input(Tensor({2, 3}), "right");
  try {
    g.matmul(a, b);
    FAIL() << "expected a shape error";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos) << e.what();
  }
  EXPECT_THROW(g.gather(a, {5}), NumericError);
  EXPECT_THROW(g.cross_entropy(a, {0}), NumericError);
}

TEST(Graph, FrozenParameterReceivesNoGradient) {
  Graph g;
  Tensor w({2, 2}, {1, 2, 3, 4});
  Tensor sink({2, 2});
  auto frozen = g.parameter(w, nullptr, "frozen");
  auto live = g.parameter(w, &sink, "live");
  auto loss = g.sum(g.matmul(frozen, live));
  EXPECT_FALSE(g.requires_grad(frozen));
  g.forward();
  g.backward(loss);
  // d/dB Σ(A·B) = Aᵀ·1: column sums of A per row of B.
  EXPECT_FLOAT_EQ(sink.at(0, 0), 4.0f);
  EXPECT_FLOAT_EQ(sink.at(1, 1), 6.0f);
}

TEST(Graph, GradientsAccumulateIntoSinks) {
  Graph g;
  Tensor w = Tensor::scalar(3.0f);
  Tensor sink = Tensor::scalar(1.0f);
  auto p = g.parameter(w, &sink);
  auto y = g.sum(g.multiply(p, p));
  g.forward();
  g.backward(y);
  EXPECT_FLOAT_EQ(sink.data()[0], 7.0f);  // 1 + 2·3
}

TEST(Graph, CrossEntropyMatchesLogSumExp) {
  GraphD g;
  auto x = g.input(TensorD({1, 3}, {1.0, 2.0, 3.0}));
  auto ce = g.cross_entropy(x, {2});
  g.forward();
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(g.value(ce).data()[0], lse - 3.0, 1e-12);
}

TEST(Graph, CausalMaskBlocksFuturePositions) {
  GraphD g;
  auto x = g.input(TensorD({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  auto p = g.softmax(g.causal_mask(x));
  g.forward();
  const auto& v = g.value(p);
  EXPECT_DOUBLE_EQ(v.at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(v.at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(v.at(1, 2), 0.0);
  EXPECT_NEAR(v.at(2, 0) + v.at(2, 1) + v.at(2, 2), 1.0, 1e-12);
}

TEST(Kernels, GemmVariantsMatchNaive) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    const auto m = dim(rng, 1, 9), k = dim(rng, 1, 17), n = dim(rng, 1, 9);
    auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng), bt = random_tensor({n, k}, rng);
    std::vector<double> c(m * n, 0.0), ct(m * n, 0.0);
    kernel::gemm_nn(a.data(), b.data(), c.data(), m, k, n);
    kernel::gemm_nt(a.data(), bt.data(), ct.data(), m, k, n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0, st = 0;
        for (std::size_t q = 0; q < k; ++q) s += a.at(i, q) * b.at(q, j), st += a.at(i, q) * bt.at(j, q);
        EXPECT_NEAR(c[i * n + j], s, 1e-12);
        EXPECT_NEAR(ct[i * n + j], st, 1e-12);
      }
  }
}

TEST(Checkpoint, RoundTripIsBitwise) {
  ParamStore store;
  store.add("a", Tensor({2, 3}, {1.5f, -2.25f, 3e-8f, 0.0f, -0.0f, 1e30f}));
  store.add("b", Tensor({4}, {7, 8, 9, 10}));
  Checkpoint ckpt{store, {{"seed", 42}, {"note", "x"}}};
  const auto bytes = serialize_checkpoint(ckpt);
  ASSERT_EQ(bytes.substr(0, 8), "SEQRECK1");
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_TRUE(back.params == store);
  EXPECT_EQ(back.metadata.at("seed"), 42);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, RejectsCorruptInput) {
  EXPECT_THROW(deserialize_checkpoint("not a checkpoint"), DataError);
  ParamStore store;
  store.add("a", Tensor({2}, {1, 2}));
  auto bytes = serialize_checkpoint({store, {}});
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_checkpoint(bytes), DataError);
}

TEST(ParamStore, DuplicateNamesAndNorm) {
  ParamStore s;
  s.add("x", Tensor({2}, {3, 4}));
  EXPECT_THROW(s.add("x", Tensor({1})), NumericError);
  EXPECT_DOUBLE_EQ(s.global_norm(), 5.0);
}
