// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqrec/common.hpp"
#include "seqrec/ingest.hpp"

namespace seqrec::synthetic {

/// Pronounceable pseudo-word for an index, built from a fixed syllable set so
/// the tokenizer has shared subwords to learn.
inline std::string pseudo_word(std::uint64_t index, std::size_t syllables = 3) {
  static constexpr const char* kSyl[] = {"ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "so",
                                         "du", "ga", "hi", "jo", "be", "fy", "qu", "wa", "xe", "yo"};
  constexpr std::uint64_t n = sizeof(kSyl) / sizeof(kSyl[0]);
  std::string out;
  for (std::size_t s = 0; s < syllables; ++s) {
    out += kSyl[index % n];
    index /= n;
  }
  return out;
}

struct ZipfCatalogConfig {
  std::size_t num_items = 10000;
  std::size_t num_users = 8000;
  std::size_t min_length = 10;
  std::size_t max_length = 40;
  double zipf_exponent = 1.0;
  std::size_t num_categories = 40;
  std::size_t successors = 3;     // per item
  double follow_probability = 0.75;  // chance the next item is a successor of the current one
  // On a jump, chance the draw stays inside the user's preferred category.
  // 0 keeps the walk first-order Markov.
  double taste_probability = 0.0;
  std::uint64_t seed = 0;
};

inline void from_json(const nlohmann::json& j, ZipfCatalogConfig& c) {
  c.num_items = j.value("num_items", c.num_items);
  c.num_users = j.value("num_users", c.num_users);
  c.min_length = j.value("min_length", c.min_length);
  c.max_length = j.value("max_length", c.max_length);
  c.zipf_exponent = j.value("zipf_exponent", c.zipf_exponent);
  c.num_categories = j.value("num_categories", c.num_categories);
  c.successors = j.value("successors", c.successors);
  c.follow_probability = j.value("follow_probability", c.follow_probability);
  c.taste_probability = j.value("taste_probability", c.taste_probability);
  c.seed = j.value("seed", c.seed);
}

/// Interaction log over a catalog with Zipf popularity. Each item has a few
/// fixed successor items in its category; users mostly walk successor links
/// and otherwise jump to a popularity draw. Titles are category, brand and
/// two item-specific pseudo-words.
inline std::vector<InteractionRecord> zipf_catalog_records(const ZipfCatalogConfig& cfg) {
  if (cfg.num_items < 2 || cfg.num_users == 0 || cfg.min_length < 2 || cfg.max_length < cfg.min_length ||
      cfg.num_categories == 0 || cfg.successors == 0 || !(cfg.taste_probability >= 0.0) ||
      cfg.taste_probability > 1.0)
    throw ConfigError("invalid synthetic catalog config");
  Rng rng = make_stream(cfg.seed, {stream::kSynthetic});
  const std::size_t n = cfg.num_items;
  // Popularity rank is a random permutation of item ids.
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) rank[i] = i;
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<double> weight(n);
  for (std::size_t i = 0; i < n; ++i) weight[i] = 1.0 / std::pow(static_cast<double>(rank[i] + 1), cfg.zipf_exponent);
  std::discrete_distribution<std::size_t> popular(weight.begin(), weight.end());

  std::vector<std::size_t> category(n);
  std::vector<std::vector<std::size_t>> members(cfg.num_categories);
  for (std::size_t i = 0; i < n; ++i) {
    category[i] = std::uniform_int_distribution<std::size_t>(0, cfg.num_categories - 1)(rng);
    members[category[i]].push_back(i);
  }
  std::vector<std::discrete_distribution<std::size_t>> in_category;
  if (cfg.taste_probability > 0.0) {
    for (const auto& pool : members) {
      std::vector<double> w;
      for (std::size_t i : pool) w.push_back(weight[i]);
      if (w.empty()) w.push_back(0.0);
      in_category.emplace_back(w.begin(), w.end());
    }
  }
  std::vector<std::vector<std::size_t>> succ(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pool = members[category[i]];
    for (std::size_t s = 0; s < cfg.successors; ++s) {
      std::size_t pick = i;
      for (int tries = 0; tries < 8 && (pick == i); ++tries)
        pick = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      if (pick == i) pick = popular(rng);
      succ[i].push_back(pick);
    }
  }
  // Titles: distinct word pairs per item.
  const auto words = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n)))) + 1;
  std::vector<std::string> title(n), brand(n);
  for (std::size_t i = 0; i < n; ++i) {
    title[i] = pseudo_word(7919 + category[i], 2) + " " + pseudo_word(101 + i / words) + " " +
               pseudo_word(4001 + i % words);
    brand[i] = pseudo_word(557 + category[i] % 13, 2);
  }
  std::vector<InteractionRecord> out;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len_dist(cfg.min_length, cfg.max_length);
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    const std::size_t len = len_dist(rng);
    std::size_t taste = 0;
    if (cfg.taste_probability > 0.0) {
      do {
        taste = std::uniform_int_distribution<std::size_t>(0, cfg.num_categories - 1)(rng);
      } while (members[taste].empty());
    }
    auto jump = [&] {
      if (cfg.taste_probability > 0.0 && unif(rng) < cfg.taste_probability)
        return members[taste][in_category[taste](rng)];
      return popular(rng);
    };
    std::size_t cur = jump();
    for (std::size_t k = 0; k < len; ++k) {
      if (k > 0) {
        if (unif(rng) < cfg.follow_probability) {
          cur = succ[cur][std::uniform_int_distribution<std::size_t>(0, succ[cur].size() - 1)(rng)];
        } else {
          cur = jump();
        }
      }
      InteractionRecord r;
      r.user_id = "u" + std::to_string(u);
      r.item_id = "i" + std::to_string(cur);
      r.timestamp = static_cast<std::int64_t>(k);
      r.title = title[cur];
      r.brand = brand[cur];
      out.push_back(std::move(r));
    }
  }
  return out;
}

/// Small memorization set: `users` sequences walking one cycle over
/// `items` items, each user starting at a different offset.
inline std::vector<InteractionRecord> cycle_records(std::size_t users, std::size_t items, std::size_t length) {
  if (items < 3 || length < 3 || users == 0) throw ConfigError("invalid cycle dataset config");
  std::vector<InteractionRecord> out;
  for (std::size_t u = 0; u < users; ++u) {
    for (std::size_t k = 0; k < length; ++k) {
      const std::size_t it = (u * 7 + k) % items;
      InteractionRecord r;
      r.user_id = "user" + std::to_string(u);
      r.item_id = "item" + std::to_string(it);
      r.timestamp = static_cast<std::int64_t>(k);
      r.title = pseudo_word(it, 2) + " " + pseudo_word(it + 211, 2);
      r.brand = pseudo_word(it % 5 + 400, 2);
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace seqrec::synthetic
