// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "seqrec/common.hpp"
#include "seqrec/ingest.hpp"
#include "seqrec/model.hpp"

namespace seqrec {

struct RankMetrics {
  double ndcg = 0;
  double hit = 0;
};

/// Single relevant item: NDCG@k = 1/log2(rank+1) and HIT@k = 1 when rank <= k.
inline RankMetrics rank_metrics(std::size_t rank, std::size_t k) {
  if (rank == 0) throw ConfigError("rank is 1-based");
  if (rank > k) return {};
  return {1.0 / std::log2(static_cast<double>(rank) + 1.0), 1.0};
}

/// Pessimistic 1-based rank: the target goes after every candidate with an
/// equal or higher score.
inline std::size_t pessimistic_rank(float target_score, std::span<const float> candidate_scores) {
  std::size_t r = 1;
  for (float s : candidate_scores) r += s >= target_score ? 1 : 0;
  return r;
}

struct EvalConfig {
  std::size_t num_eval_negatives = 10000;
  std::vector<std::size_t> ks = {5};
  std::uint64_t seed = 0;
  bool exclude_history = true;
  std::size_t threads = 1;

  void validate() const {
    if (num_eval_negatives == 0) throw ConfigError("num_eval_negatives must be >= 1");
    if (ks.empty()) throw ConfigError("need at least one cutoff k");
    for (auto k : ks)
      if (k == 0) throw ConfigError("cutoff k must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  j = {{"num_eval_negatives", c.num_eval_negatives},
       {"ks", c.ks},
       {"seed", c.seed},
       {"exclude_history", c.exclude_history}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  c.num_eval_negatives = j.value("num_eval_negatives", std::size_t{10000});
  c.ks = j.value("ks", std::vector<std::size_t>{5});
  c.seed = j.value("seed", std::uint64_t{0});
  c.exclude_history = j.value("exclude_history", true);
}

struct MetricSummary {
  std::map<std::size_t, double> ndcg;
  std::map<std::size_t, double> hit;
  std::size_t num_users = 0;
  std::size_t num_negatives = 0;  // requested per user
  std::uint64_t seed = 0;
  std::size_t full_catalog_users = 0;  // users ranked against every eligible item

  double ndcg_at(std::size_t k) const { return ndcg.count(k) ? ndcg.at(k) : 0.0; }
  double hit_at(std::size_t k) const { return hit.count(k) ? hit.at(k) : 0.0; }
};

inline nlohmann::json to_json(const MetricSummary& m) {
  nlohmann::json ndcg = nlohmann::json::object(), hit = nlohmann::json::object();
  for (auto [k, v] : m.ndcg) ndcg[std::to_string(k)] = v;
  for (auto [k, v] : m.hit) hit[std::to_string(k)] = v;
  return {{"ndcg", ndcg},
          {"hit", hit},
          {"num_users", m.num_users},
          {"num_negatives", m.num_negatives},
          {"seed", m.seed},
          {"full_catalog_fallback", m.full_catalog_users > 0},
          {"full_catalog_users", m.full_catalog_users}};
}

/// Candidate items for one user: uniform without replacement over the
/// catalog minus the target (and the history when requested). Returns every
/// eligible item when there are no more than `count` of them.
inline std::vector<ItemIndex> sample_eval_candidates(std::size_t catalog_size, std::span<const ItemIndex> history,
                                                     ItemIndex target, std::size_t count, bool exclude_history,
                                                     Rng& rng, bool* full_catalog = nullptr) {
  std::vector<char> banned(catalog_size, 0);
  if (target >= 0 && static_cast<std::size_t>(target) < catalog_size) banned[static_cast<std::size_t>(target)] = 1;
  if (exclude_history)
    for (ItemIndex h : history)
      if (h >= 0 && static_cast<std::size_t>(h) < catalog_size) banned[static_cast<std::size_t>(h)] = 1;
  std::vector<ItemIndex> eligible;
  eligible.reserve(catalog_size);
  for (std::size_t i = 0; i < catalog_size; ++i)
    if (!banned[i]) eligible.push_back(static_cast<ItemIndex>(i));
  if (eligible.size() <= count) {
    if (full_catalog) *full_catalog = true;
    return eligible;
  }
  if (full_catalog) *full_catalog = false;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  eligible.resize(count);
  return eligible;
}

/// Output of the last position for an item history, using precomputed item
/// vectors. Only the trailing max_seq_len items are used.
inline std::vector<float> final_state(const ModelParams& params, const Tensor& item_vectors,
                                      std::span<const ItemIndex> history) {
  if (history.empty()) throw DataError("cannot score an empty history");
  const std::size_t d = params.config.hidden_dim;
  const std::size_t len = std::min(history.size(), params.config.max_seq_len);
  const auto tail = history.subspan(history.size() - len);
  Tensor in({len, d});
  for (std::size_t r = 0; r < len; ++r) {
    const float* src = item_vectors.data() + static_cast<std::size_t>(tail[r]) * d;
    std::copy(src, src + d, in.data() + r * d);
  }
  Tensor out = forward_sequence_values(params, std::move(in));
  const float* last = out.data() + (len - 1) * d;
  return {last, last + d};
}

struct UserOutcome {
  std::size_t rank = 0;
  bool full_catalog = false;
};

/// Ranks every held-out target against its sampled candidates and averages
/// the metrics. Users are independent; each draws from its own stream.
inline MetricSummary evaluate_model(const ModelParams& params, std::span<const HeldOutExample> examples,
                                    std::span<const std::vector<TokenId>> item_tokens, const EvalConfig& cfg,
                                    std::vector<UserOutcome>* outcomes = nullptr) {
  cfg.validate();
  const Tensor item_vectors = encode_catalog(params, item_tokens);
  const std::size_t catalog = item_tokens.size();
  const std::size_t d = params.config.hidden_dim;
  std::vector<UserOutcome> per_user(examples.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    std::vector<float> scores;
    for (std::size_t u = begin; u < end; ++u) {
      const auto& ex = examples[u];
      Rng rng = make_stream(cfg.seed, {stream::kEvaluation, static_cast<std::uint64_t>(u)});
      bool full = false;
      auto cands = sample_eval_candidates(catalog, ex.prefix, ex.target, cfg.num_eval_negatives, cfg.exclude_history,
                                          rng, &full);
      const auto h = final_state(params, item_vectors, ex.prefix);
      auto score = [&](ItemIndex it) {
        return kernel::dot(h.data(), item_vectors.data() + static_cast<std::size_t>(it) * d, d);
      };
      scores.resize(cands.size());
      for (std::size_t j = 0; j < cands.size(); ++j) scores[j] = score(cands[j]);
      per_user[u] = {pessimistic_rank(score(ex.target), scores), full};
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.threads, examples.size()));
  if (threads == 1) {
    work(0, examples.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (examples.size() + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(examples.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  MetricSummary m;
  m.num_users = examples.size();
  m.num_negatives = cfg.num_eval_negatives;
  m.seed = cfg.seed;
  for (std::size_t k : cfg.ks) {
    double nd = 0, ht = 0;
    for (const auto& o : per_user) {
      const auto r = rank_metrics(o.rank, k);
      nd += r.ndcg;
      ht += r.hit;
    }
    const double n = examples.empty() ? 1.0 : static_cast<double>(examples.size());
    m.ndcg[k] = nd / n;
    m.hit[k] = ht / n;
  }
  for (const auto& o : per_user) m.full_catalog_users += o.full_catalog ? 1 : 0;
  if (outcomes) *outcomes = std::move(per_user);
  return m;
}

// ---- envelope -----------------------------------------------------------------

struct EnvelopePoint {
  double flops = 0;
  double metric = 0;
  std::string run_id;
  double n_nonemb = 0;
  double seen = 0;  // T
  bool operator==(const EnvelopePoint&) const = default;
};

/// Pools every point, orders by flops, and keeps a point iff its metric is
/// strictly above every other point with flops <= its own.
inline std::vector<EnvelopePoint> extract_envelope(std::span<const std::vector<EnvelopePoint>> runs) {
  std::vector<EnvelopePoint> pooled;
  for (const auto& r : runs) pooled.insert(pooled.end(), r.begin(), r.end());
  std::stable_sort(pooled.begin(), pooled.end(), [](const auto& a, const auto& b) { return a.flops < b.flops; });
  std::vector<EnvelopePoint> out;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].flops == pooled[i].flops) ++j;
    std::size_t arg = i;
    std::size_t ties = 0;
    for (std::size_t t = i; t < j; ++t) {
      if (pooled[t].metric > pooled[arg].metric) arg = t;
    }
    for (std::size_t t = i; t < j; ++t) ties += pooled[t].metric == pooled[arg].metric ? 1 : 0;
    if (pooled[arg].metric > best && ties == 1) out.push_back(pooled[arg]);
    best = std::max(best, pooled[arg].metric);
    i = j;
  }
  return out;
}

}  // namespace seqrec
