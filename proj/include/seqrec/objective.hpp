// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "seqrec/common.hpp"
#include "seqrec/ingest.hpp"
#include "seqrec/model.hpp"

namespace seqrec {

struct NegativeSample {
  ItemIndex item = 0;
  double q = 0;  // sampling probability under Q
  bool operator==(const NegativeSample&) const = default;
};

struct LossConfig {
  std::size_t num_negatives = 100;
  double temperature = 1.0;
  bool logq_correction = true;
  // One negative set per sequence, shared by all its positions. When false,
  // every position draws its own set.
  bool shared_negatives = true;

  void validate() const {
    if (num_negatives == 0) throw ConfigError("num_negatives must be >= 1");
    if (!(temperature > 0)) throw ConfigError("temperature must be positive, got " + std::to_string(temperature));
  }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"num_negatives", c.num_negatives},
       {"temperature", c.temperature},
       {"logq_correction", c.logq_correction},
       {"shared_negatives", c.shared_negatives}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  c.num_negatives = j.value("num_negatives", std::size_t{100});
  c.temperature = j.value("temperature", 1.0);
  c.logq_correction = j.value("logq_correction", true);
  c.shared_negatives = j.value("shared_negatives", true);
}

/// Draws from Q by inverse CDF with rejection of excluded items.
class NegativeSampler {
 public:
  explicit NegativeSampler(const PopularityDistribution& q) : probs_(q.probs) {
    cdf_.resize(probs_.size());
    double acc = 0;
    std::size_t support = 0;
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      if (probs_[i] < 0 || !std::isfinite(probs_[i])) throw DataError("popularity distribution has invalid mass");
      if (probs_[i] > 0) ++support;
      acc += probs_[i];
      cdf_[i] = acc;
    }
    if (support < 2) throw DataError("popularity distribution needs >= 2 items with positive mass");
    total_ = acc;
  }

  std::size_t catalog_size() const { return probs_.size(); }
  double probability(ItemIndex i) const { return probs_[static_cast<std::size_t>(i)] / total_; }

  /// X draws with replacement, re-drawing any draw that is in `exclude`.
  std::vector<NegativeSample> sample(std::size_t count, std::span<const ItemIndex> exclude, Rng& rng) const {
    double excluded_mass = 0;
    for (std::size_t i = 0; i < exclude.size(); ++i) {
      const auto e = exclude[i];
      if (e < 0 || static_cast<std::size_t>(e) >= probs_.size()) continue;
      if (std::find(exclude.begin(), exclude.begin() + static_cast<std::ptrdiff_t>(i), e) !=
          exclude.begin() + static_cast<std::ptrdiff_t>(i))
        continue;
      excluded_mass += probs_[static_cast<std::size_t>(e)];
    }
    if (excluded_mass >= total_ * (1 - 1e-12))
      throw DataError("negative sampling is degenerate: all popularity mass lies on excluded items");
    std::uniform_real_distribution<double> unif(0.0, total_);
    std::vector<NegativeSample> out;
    out.reserve(count);
    while (out.size() < count) {
      const double u = unif(rng);
      auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
      if (it == cdf_.end()) --it;
      auto idx = static_cast<std::size_t>(it - cdf_.begin());
      while (probs_[idx] == 0 && idx > 0) --idx;  // u landed exactly on a flat step
      const auto item = static_cast<ItemIndex>(idx);
      if (std::find(exclude.begin(), exclude.end(), item) != exclude.end()) continue;
      out.push_back({item, probs_[idx] / total_});
    }
    return out;
  }

 private:
  std::vector<double> probs_;
  std::vector<double> cdf_;
  double total_ = 0;
};

inline std::vector<NegativeSample> sample_negatives(const PopularityDistribution& q, std::size_t count,
                                                    ItemIndex exclude, Rng& rng) {
  const ItemIndex ex[] = {exclude};
  return NegativeSampler(q).sample(count, ex, rng);
}

/// Stream for the negatives of one training sequence in one epoch.
inline Rng negatives_stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sequence_id) {
  return make_stream(seed, {stream::kNegatives, epoch, sequence_id});
}

/// Negatives for a sequence of `items` (inputs items[0..n-2], targets
/// items[1..n-1]). Shared mode: X samples excluding every target. Per-position
/// mode: X samples per position excluding that position's target, laid out
/// position-major.
inline std::vector<NegativeSample> draw_sequence_negatives(const NegativeSampler& sampler, std::span<const ItemIndex> items,
                                                           const LossConfig& cfg, Rng& rng) {
  if (items.size() < 2) throw DataError("sequence needs at least 2 items to form a loss term");
  if (cfg.shared_negatives) return sampler.sample(cfg.num_negatives, items.subspan(1), rng);
  std::vector<NegativeSample> out;
  out.reserve((items.size() - 1) * cfg.num_negatives);
  for (std::size_t k = 1; k < items.size(); ++k) {
    auto part = sampler.sample(cfg.num_negatives, items.subspan(k, 1), rng);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

// ---- loss on plain vectors ----------------------------------------------------

/// −log softmax of the positive among {positive} ∪ negatives, evaluated in
/// double. With correction, each negative logit becomes s⁻/τ − log q.
inline double sampled_softmax_loss(std::span<const double> query, std::span<const double> positive,
                                   std::span<const std::vector<double>> negatives, std::span<const double> q,
                                   double temperature, bool logq_correction) {
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  if (positive.size() != query.size()) throw NumericError("positive vector dimension differs from query");
  if (logq_correction && q.size() != negatives.size())
    throw NumericError("need one sampling probability per negative");
  auto dotp = [&](std::span<const double> v) {
    if (v.size() != query.size()) throw NumericError("negative vector dimension differs from query");
    double s = 0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * query[i];
    return s;
  };
  std::vector<double> logits;
  logits.reserve(negatives.size() + 1);
  logits.push_back(dotp(positive) / temperature);
  for (std::size_t j = 0; j < negatives.size(); ++j)
    logits.push_back(dotp(negatives[j]) / temperature - (logq_correction ? std::log(q[j]) : 0.0));
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (double l : logits) z += std::exp(l - m);
  return m + std::log(z) - logits[0];
}

/// Logits of {positive, negatives...} as fed to the softmax.
inline std::vector<double> candidate_logits(std::span<const double> scores_pos_then_neg, std::span<const double> q,
                                            double temperature, bool logq_correction) {
  std::vector<double> out(scores_pos_then_neg.begin(), scores_pos_then_neg.end());
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] /= temperature;
    if (logq_correction && j > 0) out[j] -= std::log(q[j - 1]);
  }
  return out;
}

// ---- loss in the graph --------------------------------------------------------

/// Sampled-softmax losses per query row. `queries` and `positives` are (P×d).
/// Shared mode: `negatives` is (X×d), one set for all rows. Otherwise it is
/// (P·X×d), position-major. `q` holds the sampling probabilities aligned with
/// negative rows. Returns the (P×1) per-row losses.
template <class T>
typename BasicGraph<T>::Var sampled_softmax_rows(BasicGraph<T>& g, typename BasicGraph<T>::Var queries,
                                                 typename BasicGraph<T>::Var positives,
                                                 typename BasicGraph<T>::Var negatives, std::span<const double> q,
                                                 double temperature, bool logq_correction, bool shared) {
  using Var = typename BasicGraph<T>::Var;
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  const std::size_t rows = g.shape(queries)[0];
  const std::size_t neg_rows = g.shape(negatives)[0];
  const std::size_t x = shared ? neg_rows : neg_rows / rows;
  if (!shared && x * rows != neg_rows)
    throw NumericError("per-position negatives: " + std::to_string(neg_rows) + " rows do not split over " +
                       std::to_string(rows) + " positions");
  if (q.size() != neg_rows) throw NumericError("need one sampling probability per negative row");
  Var pos = g.dot(queries, positives);
  Var neg;
  if (shared) {
    neg = g.matmul(queries, negatives, true);
  } else {
    std::vector<std::int32_t> rep(neg_rows);
    for (std::size_t i = 0; i < neg_rows; ++i) rep[i] = static_cast<std::int32_t>(i / x);
    neg = g.reshape(g.dot(g.gather(queries, std::move(rep)), negatives), {rows, x});
  }
  const Var parts[] = {pos, neg};
  Var logits = g.concat(parts, 1);
  if (temperature != 1.0) logits = g.scale(logits, static_cast<T>(1.0 / temperature));
  if (logq_correction) {
    BasicTensor<T> corr(shared ? Shape{1, x + 1} : Shape{rows, x + 1});
    for (std::size_t r = 0; r < corr.dim(0); ++r)
      for (std::size_t j = 0; j < x; ++j) corr.at(r, j + 1) = static_cast<T>(-std::log(q[r * x + j]));
    logits = g.add(logits, g.constant(std::move(corr), "logq"));
  }
  return g.cross_entropy(logits, std::vector<std::int32_t>(rows, 0));
}

/// One training sequence with its negatives.
struct LossSequence {
  std::span<const ItemIndex> items;  // inputs are items[0..n-2], targets items[1..n-1]
  std::span<const NegativeSample> negatives;
};

/// Mean over sequences of the per-sequence mean sampled-softmax loss. All item
/// vectors (inputs, targets, negatives) are pooled from token embeddings in
/// this graph. Returns a (1×1) loss.
template <class T>
typename BasicGraph<T>::Var sequence_loss(BasicGraph<T>& g, const BasicModelParams<T>& params,
                                          const BoundParams<T>& p, std::span<const LossSequence> batch,
                                          std::span<const std::vector<TokenId>> item_tokens, const LossConfig& cfg) {
  using Var = typename BasicGraph<T>::Var;
  cfg.validate();
  if (batch.empty()) throw DataError("empty batch");
  // One pooled row per distinct item in the batch.
  std::unordered_map<ItemIndex, std::int32_t> slot;
  std::vector<ItemIndex> unique;
  auto slot_of = [&](ItemIndex it) {
    auto [pos, fresh] = slot.try_emplace(it, static_cast<std::int32_t>(unique.size()));
    if (fresh) unique.push_back(it);
    return pos->second;
  };
  for (const auto& s : batch) {
    if (s.items.size() < 2) throw DataError("sequence shorter than 2 items has no loss term");
    for (ItemIndex it : s.items) {
      if (it < 0 || static_cast<std::size_t>(it) >= item_tokens.size())
        throw DataError("item index " + std::to_string(it) + " outside the tokenized catalog");
      slot_of(it);
    }
    for (const auto& n : s.negatives) slot_of(n.item);
  }
  Var table = encode_items(g, p[params.layout.tok_emb], item_tokens, unique);
  std::vector<std::int32_t> in_rows;
  std::vector<std::size_t> lengths;
  for (const auto& s : batch) {
    lengths.push_back(s.items.size() - 1);
    for (std::size_t k = 0; k + 1 < s.items.size(); ++k) in_rows.push_back(slot.at(s.items[k]));
  }
  Var h_all = forward_packed(g, g.gather(table, std::move(in_rows)), lengths, params, p);
  std::vector<Var> losses;
  losses.reserve(batch.size());
  std::size_t offset = 0;
  for (const auto& s : batch) {
    const std::size_t len = s.items.size() - 1;
    std::vector<std::int32_t> own(len), tgt_rows(len), neg_rows(s.negatives.size());
    std::vector<double> q(s.negatives.size());
    for (std::size_t k = 0; k < len; ++k) {
      own[k] = static_cast<std::int32_t>(offset + k);
      tgt_rows[k] = slot.at(s.items[k + 1]);
    }
    offset += len;
    for (std::size_t j = 0; j < s.negatives.size(); ++j) {
      neg_rows[j] = slot.at(s.negatives[j].item);
      q[j] = s.negatives[j].q;
    }
    const std::size_t expected = cfg.shared_negatives ? cfg.num_negatives : cfg.num_negatives * len;
    if (s.negatives.size() != expected)
      throw DataError("sequence carries " + std::to_string(s.negatives.size()) + " negatives, expected " +
                      std::to_string(expected));
    Var h = batch.size() == 1 ? h_all : g.gather(h_all, std::move(own));
    Var rows = sampled_softmax_rows(g, h, g.gather(table, std::move(tgt_rows)), g.gather(table, std::move(neg_rows)),
                                    q, cfg.temperature, cfg.logq_correction, cfg.shared_negatives);
    losses.push_back(g.mean(rows, 0));
  }
  return losses.size() == 1 ? losses[0] : g.mean(g.concat(losses, 0), 0);
}

}  // namespace seqrec
