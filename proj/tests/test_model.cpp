#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "seqrec/model.hpp"
#include "seqrec/numerics/checkpoint.hpp"
#include "support.hpp"

using namespace seqrec;
using seqrec::testing::random_tensor;

namespace {

ModelConfig small_config(std::size_t layers = 2, std::size_t heads = 2, std::size_t dim = 16, std::size_t len = 12) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.hidden_dim = dim;
  c.max_seq_len = len;
  c.vocab_size = 40;
  return c;
}

BasicTensor<double> run(const BasicModelParams<double>& p, const BasicTensor<double>& x) {
  return forward_sequence_values(p, x);
}

}  // namespace

TEST(ModelConfig, ValidationAndJson) {
  ModelConfig c = small_config();
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  c.hidden_dim = 15;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"n_layers", 2}}).get<ModelConfig>(), nlohmann::json::exception);
}

TEST(ParamCount, SmallestReferenceByHand) {
  ModelConfig c;  // n_L=4, n_H=2, d=64, max_seq_len=50
  // one layer, array by array
  const std::size_t ln = 64 + 64;
  const std::size_t head = 3 * (64 * 32 + 32);
  const std::size_t out = 64 * 64 + 64;
  const std::size_t fc1 = 64 * 256 + 256, fc2 = 256 * 64 + 64;
  const std::size_t layer = ln + 2 * head + out + ln + fc1 + fc2;
  const std::size_t final = 64 + 64 + 64 * 64 + 64;
  EXPECT_EQ(count_params(c).non_embedding, 4 * layer + final);
  EXPECT_EQ(count_params(c).non_embedding, 204224u);
  EXPECT_EQ(count_params(c).total - count_params(c).non_embedding, 1923200u);  // 30050 x 64
  EXPECT_EQ(allocate_params<float>(c).store.element_count(), count_params(c).total);
}

TEST(ParamCount, ReferenceArchitectures) {
  auto refs = reference_architectures();
  ASSERT_EQ(refs.size(), 8u);
  // smallest three, ascending
  EXPECT_EQ(count_params(refs[7]).non_embedding, 204224u);  // 4 layers, d 64
  EXPECT_EQ(count_params(refs[6]).non_embedding, 413312u);  // 2 layers, d 128
  EXPECT_EQ(count_params(refs[5]).non_embedding, 809856u);  // 4 layers, d 128
  for (const auto& c : refs) EXPECT_EQ(allocate_params<float>(c).store.element_count(), count_params(c).total);
}

TEST(ParamCount, LinearInLayers) {
  ModelConfig a = small_config(3), b = small_config(6);
  const std::size_t fixed = 16 * 16 + 3 * 16;
  EXPECT_EQ(count_params(b).non_embedding - fixed, 2 * (count_params(a).non_embedding - fixed));
}

TEST(ParamCount, NoArrayDependsOnCatalog) {
  // Build the same model for two catalogs of very different size.
  auto small = seqrec::testing::tiny_catalog(4, 5, 4);
  auto large = seqrec::testing::tiny_catalog(40, 300, 20);
  ModelConfig c = small_config();
  c.vocab_size = 200;  // vocabulary cap used by tiny_catalog
  auto pa = init_params<double>(c, 1), pb = init_params<double>(c, 1);
  ASSERT_TRUE(pa.store.congruent(pb.store));
  auto ea = encode_catalog(pa, small.tokens), eb = encode_catalog(pb, large.tokens);
  EXPECT_EQ(ea.dim(0), small.dataset.catalog.size());
  EXPECT_EQ(eb.dim(0), large.dataset.catalog.size());
}

TEST(ParamCount, MatchesCheckpoint) {
  ModelConfig c = small_config(3, 4, 32, 20);
  ModelParams p = init_params(c, 4);
  Checkpoint ck{p.store, {}};
  Checkpoint back = deserialize_checkpoint(serialize_checkpoint(ck));
  EXPECT_EQ(back.params.element_count(), count_params(c).total);
}

TEST(Init, Scheme) {
  ModelConfig c = small_config(2, 2, 32);
  auto p = init_params<double>(c, 9);
  for (std::size_t i = 0; i < p.store.size(); ++i) {
    const auto& t = p.store[i];
    if (p.info[i].layer_norm_gain) {
      for (double v : t.values()) EXPECT_EQ(v, 1.0);
    } else if (t.rank() == 1) {
      for (double v : t.values()) EXPECT_EQ(v, 0.0) << p.store.name(i);
    }
  }
  const auto& w = p.store.at("layers.0.mlp.fc1.weight");
  double s = 0, s2 = 0;
  for (double v : w.values()) s += v, s2 += v * v;
  const double n = static_cast<double>(w.size());
  EXPECT_NEAR(s / n, 0.0, 0.002);
  EXPECT_NEAR(std::sqrt(s2 / n), kInitStd, 0.002);
  for (std::size_t j = 0; j < c.hidden_dim; ++j) EXPECT_EQ(p.store[p.layout.tok_emb].at(kPadId, j), 0.0);
  auto q = init_params<double>(c, 9);
  auto vals = [](const BasicTensor<double>& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
  EXPECT_EQ(vals(w), vals(q.store.at("layers.0.mlp.fc1.weight")));
  EXPECT_NE(vals(w), vals(init_params<double>(c, 10).store.at("layers.0.mlp.fc1.weight")));
}

TEST(Init, FinitePerLengthAndRandomInputs) {
  std::mt19937_64 rng(3);
  ModelConfig c = small_config(3, 2, 16, 20);
  auto p = init_params<double>(c, 2);
  for (std::size_t len : {1u, 5u, 20u}) {
    auto y = run(p, random_tensor({len, 16}, rng, -3, 3));
    ASSERT_EQ(y.shape(), (Shape{len, 16}));
    for (double v : y.values()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(EncodeItem, MeanPooling) {
  ModelConfig c = small_config();
  auto p = init_params<double>(c, 5);
  const auto& tab = p.store[p.layout.tok_emb];
  const std::vector<TokenId> one{7}, twice{7, 7}, mix{3, 7, 9}, perm{9, 3, 7}, padded{0, 7, 0};
  auto e1 = encode_item<double>(one, p);
  for (std::size_t j = 0; j < c.hidden_dim; ++j) EXPECT_EQ(e1[j], tab.at(7, j));
  EXPECT_EQ(encode_item<double>(twice, p), e1);
  EXPECT_EQ(encode_item<double>(padded, p), e1);
  auto a = encode_item<double>(mix, p), b = encode_item<double>(perm, p);
  for (std::size_t j = 0; j < c.hidden_dim; ++j) {
    EXPECT_NEAR(a[j], b[j], 1e-15);
    EXPECT_NEAR(a[j], (tab.at(3, j) + tab.at(7, j) + tab.at(9, j)) / 3, 1e-15);
  }
  EXPECT_THROW(encode_item<double>(std::vector<TokenId>{}, p), DataError);
  EXPECT_THROW(encode_item<double>(std::vector<TokenId>{40}, p), DataError);
}

TEST(EncodeItem, GraphMatchesDirect) {
  auto tiny = seqrec::testing::tiny_catalog();
  ModelConfig c = small_config();
  c.vocab_size = tiny.vocab.size();
  auto p = init_params<double>(c, 6);
  auto table = encode_catalog(p, tiny.tokens);
  for (std::size_t i = 0; i < tiny.tokens.size(); ++i) {
    auto e = encode_item<double>(tiny.tokens[i], p);
    for (std::size_t j = 0; j < c.hidden_dim; ++j) EXPECT_NEAR(table.at(i, j), e[j], 1e-15);
  }
}

TEST(Forward, CausalBitwise) {
  std::mt19937_64 rng(11);
  ModelConfig c = small_config(2, 4, 16, 10);
  auto p = init_params<double>(c, 3);
  // larger weights make every path matter
  for (std::size_t i = 0; i < p.store.size(); ++i)
    if (p.store[i].rank() == 2)
      for (double& v : p.store[i].values()) v *= 10;
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({10, 16}, rng);
    auto base = run(p, x);
    const std::size_t j = 1 + static_cast<std::size_t>(trial) % 9;
    auto x2 = x;
    for (std::size_t t = 0; t < 16; ++t) x2.at(j, t) += 0.5;
    auto pert = run(p, x2);
    for (std::size_t k = 0; k < 10; ++k) {
      bool same = true;
      for (std::size_t t = 0; t < 16; ++t) same = same && base.at(k, t) == pert.at(k, t);
      if (k < j)
        EXPECT_TRUE(same) << "position " << k << " saw item " << j;
      else
        EXPECT_FALSE(same) << "position " << k << " ignored item " << j;
    }
  }
}

TEST(Forward, SharedPrefix) {
  std::mt19937_64 rng(12);
  ModelConfig c = small_config();
  auto p = init_params<double>(c, 4);
  auto a = random_tensor({9, 16}, rng);
  auto b = random_tensor({6, 16}, rng);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t t = 0; t < 16; ++t) b.at(k, t) = a.at(k, t);
  auto ya = run(p, a), yb = run(p, b);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t t = 0; t < 16; ++t) EXPECT_DOUBLE_EQ(ya.at(k, t), yb.at(k, t));
}

TEST(Forward, PackedMatchesSeparate) {
  std::mt19937_64 rng(13);
  ModelConfig c = small_config(2, 2, 16, 12);
  auto p = init_params<double>(c, 8);
  const std::vector<std::size_t> lens{3, 12, 1, 7};
  std::size_t rows = 0;
  for (auto l : lens) rows += l;
  auto x = random_tensor({rows, 16}, rng);
  BasicGraph<double> g;
  auto bound = bind_params(g, p);
  auto y = forward_packed(g, g.constant(x), lens, p, bound);
  g.forward();
  const auto& packed = g.value(y);
  std::size_t off = 0;
  for (auto l : lens) {
    BasicTensor<double> part({l, 16});
    for (std::size_t k = 0; k < l; ++k)
      for (std::size_t t = 0; t < 16; ++t) part.at(k, t) = x.at(off + k, t);
    auto sep = run(p, part);
    for (std::size_t k = 0; k < l; ++k)
      for (std::size_t t = 0; t < 16; ++t) EXPECT_NEAR(packed.at(off + k, t), sep.at(k, t), 1e-12);
    off += l;
  }
}

TEST(Forward, Errors) {
  ModelConfig c = small_config(1, 2, 16, 4);
  auto p = init_params<double>(c, 1);
  std::mt19937_64 rng(1);
  EXPECT_THROW(run(p, random_tensor({5, 16}, rng)), ConfigError);
  EXPECT_THROW(run(p, random_tensor({3, 8}, rng)), NumericError);
  auto one = run(p, random_tensor({1, 16}, rng));
  EXPECT_EQ(one.shape(), (Shape{1, 16}));
}

TEST(Flops, HandCase) {
  // N_nonemb=10000, tokens=100, context=10, n_L=2, d=64, item_tokens=8
  EXPECT_EQ(train_flops(10000, 2, 64, 8, 100, 10), 6870400.0);
}

TEST(Flops, BreakdownAndLinearity) {
  ModelConfig c;
  auto b = count_flops(c, 1000, 50, 8);
  EXPECT_DOUBLE_EQ(b.train_flops_total, b.encoder + b.attention + b.mlp);
  EXPECT_DOUBLE_EQ(b.train_flops_total,
                   train_flops(static_cast<double>(count_params(c).non_embedding), 4, 64, 8, 1000, 50));
  auto b2 = count_flops(c, 2000, 50, 8);
  EXPECT_DOUBLE_EQ(b2.train_flops_total, 2 * b.train_flops_total);
  auto one = count_flops(c, 1000, 1, 8), zero_ctx = count_flops(c, 1000, 0, 8);
  EXPECT_DOUBLE_EQ(one.train_flops_total - zero_ctx.train_flops_total, 6.0 * 4 * 64 * 1000);
  EXPECT_GE(b.encoder, 0);
  EXPECT_GE(b.attention, 0);
  EXPECT_GE(b.mlp, 0);
  // default item_tokens is the config cap
  EXPECT_DOUBLE_EQ(count_flops(c, 10, 5).encoder, 2.0 * 64 * 32 * 10);
  auto j = to_json(b);
  EXPECT_EQ(j["convention"], kFlopsConvention);
}
