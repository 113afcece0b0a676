// Shared helpers for the test binaries: finite-difference gradient oracle,
// random tensors and small fixtures.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "seqrec/ingest.hpp"
#include "seqrec/model.hpp"
#include "seqrec/numerics/graph.hpp"
#include "seqrec/objective.hpp"
#include "seqrec/synthetic.hpp"
#include "seqrec/tokenize.hpp"

namespace seqrec::testing {

using GraphD = BasicGraph<double>;
using TensorD = BasicTensor<double>;
using VarD = GraphD::Var;

inline TensorD random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.values()) v = u(rng);
  return t;
}

struct FdReport {
  bool ok = true;
  double worst_excess = 0;  // max over components of |a - n| - (atol + rtol * max(|a|, |n|))
  std::size_t checked = 0;
  std::string where;
};

/// allclose-style comparison: |a - n| <= atol + rtol * max(|a|, |n|).
inline void compare(FdReport& rep, double analytic, double numeric, double rtol, double atol, const std::string& where) {
  const double tol = atol + rtol * std::max(std::abs(analytic), std::abs(numeric));
  const double excess = std::abs(analytic - numeric) - tol;
  ++rep.checked;
  if (excess > 0 && (rep.ok || excess > rep.worst_excess)) {
    rep.ok = false;
    rep.worst_excess = excess;
    rep.where = where + ": analytic " + std::to_string(analytic) + " vs numeric " + std::to_string(numeric);
  }
}

using Builder = std::function<VarD(GraphD&, const std::vector<VarD>&)>;

/// Central differences of L = Σ w ⊙ build(inputs) against the graph's
/// input gradients. The weights w are drawn once per call.
inline FdReport check_op_gradients(const Builder& build, const std::vector<TensorD>& inputs, std::mt19937_64& rng,
                                   double rtol = 1e-3, double atol = 1e-6, double h = 1e-5) {
  TensorD weights;
  auto evaluate = [&](const std::vector<TensorD>& xs, std::vector<TensorD>* grads) {
    GraphD g;
    std::vector<VarD> vars;
    for (const auto& x : xs) vars.push_back(g.input(x));
    VarD out = build(g, vars);
    if (weights.empty()) weights = random_tensor(g.shape(out), rng);
    VarD loss = g.sum(g.multiply(out, g.constant(weights)));
    g.forward();
    const double value = g.value(loss).data()[0];
    if (grads) {
      g.backward(loss);
      for (auto v : vars) grads->push_back(g.grad(v));
    }
    return value;
  };
  std::vector<TensorD> analytic;
  evaluate(inputs, &analytic);
  FdReport rep;
  std::vector<TensorD> xs = inputs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t k = 0; k < xs[i].size(); ++k) {
      const double orig = xs[i].data()[k];
      xs[i].data()[k] = orig + h;
      const double up = evaluate(xs, nullptr);
      xs[i].data()[k] = orig - h;
      const double down = evaluate(xs, nullptr);
      xs[i].data()[k] = orig;
      compare(rep, analytic[i].data()[k], (up - down) / (2 * h), rtol, atol,
              "input " + std::to_string(i) + "[" + std::to_string(k) + "]");
    }
  }
  return rep;
}

/// Tiny catalog with distinct word titles, tokenized with a vocabulary built
/// over it.
struct TinyCatalog {
  Dataset dataset;
  Vocabulary vocab;
  std::vector<std::vector<TokenId>> tokens;
};

inline TinyCatalog tiny_catalog(std::size_t users = 6, std::size_t items = 12, std::size_t length = 6) {
  TinyCatalog t;
  const auto recs = synthetic::cycle_records(users, items, length);
  t.dataset = build_dataset(recs);
  t.vocab = build_vocab(t.dataset.catalog, 200, 0);
  t.tokens = tokenize_catalog(t.dataset.catalog, t.vocab);
  return t;
}

inline ModelConfig tiny_model_config(std::size_t vocab_size, std::size_t layers = 1, std::size_t heads = 2,
                                     std::size_t dim = 8, std::size_t max_len = 8) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.hidden_dim = dim;
  c.max_seq_len = max_len;
  c.vocab_size = vocab_size;
  c.max_item_tokens = 8;
  return c;
}

/// Finite-difference check of the composed sequence loss with respect to
/// every model parameter (or a random subset of `max_entries` of them).
inline FdReport check_sequence_loss_gradients(const BasicModelParams<double>& params, std::span<const LossSequence> batch,
                                              std::span<const std::vector<TokenId>> tokens, const LossConfig& cfg,
                                              std::mt19937_64& rng, std::size_t max_entries = 0, double rtol = 1e-3,
                                              double atol = 1e-6, double h = 1e-5) {
  BasicModelParams<double> p = params;
  auto evaluate = [&](BasicParamStore<double>* grads) {
    GraphD g;
    auto bound = bind_params(g, p, grads);
    auto loss = sequence_loss(g, p, bound, batch, tokens, cfg);
    g.forward();
    const double v = g.value(loss).data()[0];
    if (grads) g.backward(loss);
    return v;
  };
  BasicParamStore<double> grads = p.store.zeros_like();
  evaluate(&grads);
  std::vector<std::pair<std::size_t, std::size_t>> entries;
  for (std::size_t i = 0; i < p.store.size(); ++i)
    for (std::size_t k = 0; k < p.store[i].size(); ++k) entries.emplace_back(i, k);
  if (max_entries && entries.size() > max_entries) {
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(max_entries);
  }
  FdReport rep;
  for (auto [i, k] : entries) {
    double& x = p.store[i].data()[k];
    const double orig = x;
    x = orig + h;
    const double up = evaluate(nullptr);
    x = orig - h;
    const double down = evaluate(nullptr);
    x = orig;
    compare(rep, grads[i].data()[k], (up - down) / (2 * h), rtol, atol,
            p.store.name(i) + "[" + std::to_string(k) + "]");
  }
  return rep;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("seqrec_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace seqrec::testing
