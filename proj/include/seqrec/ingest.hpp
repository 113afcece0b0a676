// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "seqrec/common.hpp"

namespace seqrec {

using ItemIndex = std::int32_t;

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
  std::string title;
  std::string brand;
};

struct CatalogItem {
  std::string item_id;
  std::string title;
  std::string brand;

  bool operator==(const CatalogItem&) const = default;
};

/// Items with dense indices 0..size()-1 in insertion order.
class Catalog {
 public:
  /// Returns the existing index when the id is already present; metadata of
  /// the first occurrence wins.
  ItemIndex add(CatalogItem item) {
    auto [it, inserted] = index_.try_emplace(item.item_id, static_cast<ItemIndex>(items_.size()));
    if (inserted) items_.push_back(std::move(item));
    return it->second;
  }

  std::optional<ItemIndex> find(const std::string& item_id) const {
    auto it = index_.find(item_id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const CatalogItem& operator[](std::size_t i) const { return items_[i]; }
  const std::vector<CatalogItem>& items() const { return items_; }

  bool operator==(const Catalog& o) const { return items_ == o.items_; }

 private:
  std::vector<CatalogItem> items_;
  std::unordered_map<std::string, ItemIndex> index_;
};

struct UserSequence {
  std::string user_id;
  std::vector<ItemIndex> items;  // ascending timestamp, ties by input order

  std::size_t n() const { return items.size(); }
  bool operator==(const UserSequence&) const = default;
};

struct Dataset {
  Catalog catalog;
  std::vector<UserSequence> users;

  std::size_t interaction_count() const {
    std::size_t n = 0;
    for (const auto& u : users) n += u.n();
    return n;
  }
  bool operator==(const Dataset&) const = default;
};

struct ParseReport {
  std::size_t lines = 0;
  std::size_t records = 0;
  std::size_t users_seen = 0;
  std::size_t dropped_users = 0;  // fewer than kMinSequenceLength interactions
  std::size_t duplicate_records = 0;  // repeated (user, item, timestamp) triples, all kept
};

inline constexpr std::size_t kMinSequenceLength = 2;

/// Parses one JSON line. Throws DataError naming `line_no`.
inline InteractionRecord parse_record_line(const std::string& line, std::size_t line_no) {
  auto bad = [&](const std::string& what) {
    return DataError("line " + std::to_string(line_no) + ": " + what);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw bad(std::string("invalid JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw bad("record is not a JSON object");
  auto text = [&](const char* key, bool required) -> std::string {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) {
      if (required) throw bad(std::string("missing field '") + key + "'");
      return {};
    }
    if (it->is_string()) return it->get<std::string>();
    if (it->is_number_integer()) return std::to_string(it->get<std::int64_t>());
    throw bad(std::string("field '") + key + "' must be a string");
  };
  InteractionRecord r;
  r.user_id = text("user_id", true);
  r.item_id = text("item_id", true);
  if (r.user_id.empty()) throw bad("empty user_id");
  if (r.item_id.empty()) throw bad("empty item_id");
  auto ts = j.find("timestamp");
  if (ts == j.end() || !ts->is_number_integer()) throw bad("field 'timestamp' must be an integer");
  r.timestamp = ts->get<std::int64_t>();
  if (r.timestamp < 0) throw bad("negative timestamp");
  r.title = text("title", false);
  r.brand = text("brand", false);
  return r;
}

inline std::string record_to_json_line(const InteractionRecord& r) {
  nlohmann::json j = {{"user_id", r.user_id}, {"item_id", r.item_id}, {"timestamp", r.timestamp},
                      {"title", r.title}, {"brand", r.brand}};
  return j.dump();
}

/// Groups records by user, orders each history by timestamp (stable), drops
/// users with fewer than two interactions and builds the catalog over the
/// retained items, indexed in order of first appearance.
inline Dataset build_dataset(std::span<const InteractionRecord> records, ParseReport* report = nullptr) {
  std::vector<std::string> user_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto [it, inserted] = by_user.try_emplace(records[i].user_id);
    if (inserted) user_order.push_back(records[i].user_id);
    it->second.push_back(i);
  }
  ParseReport local;
  local.records = records.size();
  local.users_seen = user_order.size();

  Dataset ds;
  // First-seen metadata per item over the whole input, so that an item keeps
  // its text even when its first record belongs to a dropped user.
  std::unordered_map<std::string, std::size_t> first_record;
  for (std::size_t i = 0; i < records.size(); ++i) first_record.try_emplace(records[i].item_id, i);

  for (const std::string& uid : user_order) {
    std::vector<std::size_t>& rows = by_user[uid];
    if (rows.size() < kMinSequenceLength) {
      ++local.dropped_users;
      continue;
    }
    std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
      return records[a].timestamp < records[b].timestamp;
    });
    std::map<std::pair<std::string, std::int64_t>, int> seen;
    UserSequence seq{uid, {}};
    seq.items.reserve(rows.size());
    for (std::size_t r : rows) {
      const InteractionRecord& rec = records[r];
      if (++seen[{rec.item_id, rec.timestamp}] > 1) ++local.duplicate_records;
      const InteractionRecord& meta = records[first_record[rec.item_id]];
      seq.items.push_back(ds.catalog.add({rec.item_id, meta.title, meta.brand}));
    }
    ds.users.push_back(std::move(seq));
  }
  if (report) {
    local.lines = report->lines;
    *report = local;
  }
  return ds;
}

/// Reads line-delimited JSON records. Blank lines are skipped.
inline std::vector<InteractionRecord> read_records(std::istream& in, std::size_t* line_count = nullptr) {
  std::vector<InteractionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(parse_record_line(line, line_no));
  }
  if (line_count) *line_count = line_no;
  return out;
}

inline Dataset parse_interactions(std::istream& in, ParseReport* report = nullptr) {
  std::size_t lines = 0;
  auto records = read_records(in, &lines);
  ParseReport local;
  local.lines = lines;
  Dataset ds = build_dataset(records, &local);
  if (report) *report = local;
  return ds;
}

/// Rebuilds the catalog over the items referenced by `users`, in order of
/// first appearance.
inline Dataset redensify(const Catalog& catalog, std::vector<UserSequence> users) {
  Dataset out;
  for (UserSequence& u : users)
    for (ItemIndex& item : u.items) item = out.catalog.add(catalog[static_cast<std::size_t>(item)]);
  out.users = std::move(users);
  return out;
}

/// Seeded random permutation of user positions; prefixes of it are nested
/// uniform samples without replacement.
inline std::vector<std::size_t> user_permutation(std::size_t user_count, std::uint64_t seed) {
  std::vector<std::size_t> order(user_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_stream(seed, {stream::kSubsample});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Uniform sample of `num_users` users without replacement. Sampled users
/// keep their original relative order and the catalog is re-densified, so
/// re-applying with the same arguments is the identity.
inline Dataset subsample_users(const Dataset& ds, std::size_t num_users, std::uint64_t seed) {
  if (num_users > ds.users.size())
    throw ConfigError("cannot sample " + std::to_string(num_users) + " users from " +
                      std::to_string(ds.users.size()));
  std::vector<std::size_t> chosen = user_permutation(ds.users.size(), seed);
  chosen.resize(num_users);
  std::sort(chosen.begin(), chosen.end());
  std::vector<UserSequence> users;
  users.reserve(num_users);
  for (std::size_t i : chosen) users.push_back(ds.users[i]);
  return redensify(ds.catalog, std::move(users));
}

struct HeldOutExample {
  std::size_t user = 0;  // position in Dataset::users
  std::vector<ItemIndex> prefix;
  ItemIndex target = 0;
};

struct TrainSequence {
  std::size_t user = 0;
  std::vector<ItemIndex> items;
};

/// Leave-one-out split: item n is the test target, item n-1 the validation
/// target, items 1..n-2 the training prefix. Length-2 histories go to
/// training whole and have no held-out targets.
struct SplitDataset {
  std::vector<TrainSequence> train;
  std::vector<HeldOutExample> val;
  std::vector<HeldOutExample> test;

  std::size_t train_interactions() const {
    std::size_t n = 0;
    for (const auto& s : train) n += s.items.size();
    return n;
  }
};

inline SplitDataset split_leave_one_out(std::span<const UserSequence> users) {
  SplitDataset split;
  for (std::size_t u = 0; u < users.size(); ++u) {
    const auto& items = users[u].items;
    const std::size_t n = items.size();
    if (n < 3) {
      split.train.push_back({u, items});
      continue;
    }
    split.train.push_back({u, std::vector<ItemIndex>(items.begin(), items.end() - 2)});
    split.val.push_back({u, std::vector<ItemIndex>(items.begin(), items.end() - 2), items[n - 2]});
    split.test.push_back({u, std::vector<ItemIndex>(items.begin(), items.end() - 1), items[n - 1]});
  }
  return split;
}

struct PopularityDistribution {
  std::vector<double> probs;
  std::vector<std::uint64_t> counts;

  std::size_t support() const {
    return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
  }
};

/// Interaction counts over the training prefixes, normalized.
inline PopularityDistribution popularity_distribution(const SplitDataset& split, std::size_t catalog_size) {
  PopularityDistribution q;
  q.counts.assign(catalog_size, 0);
  std::uint64_t total = 0;
  for (const auto& s : split.train)
    for (ItemIndex i : s.items) {
      if (static_cast<std::size_t>(i) >= catalog_size)
        throw DataError("item index " + std::to_string(i) + " outside catalog of size " +
                        std::to_string(catalog_size));
      ++q.counts[static_cast<std::size_t>(i)];
      ++total;
    }
  if (total == 0) throw DataError("popularity distribution needs a non-empty training portion");
  q.probs.resize(catalog_size);
  for (std::size_t i = 0; i < catalog_size; ++i)
    q.probs[i] = static_cast<double>(q.counts[i]) / static_cast<double>(total);
  return q;
}

struct CatalogGrowthRow {
  std::size_t users = 0;
  std::size_t interactions = 0;
  std::size_t distinct_items = 0;
};

/// Interactions and distinct items for nested user samples (each sample
/// extends the previous one along one seeded permutation).
inline std::vector<CatalogGrowthRow> catalog_growth_report(const Dataset& ds, std::span<const std::size_t> user_counts,
                                                           std::uint64_t seed) {
  if (!std::is_sorted(user_counts.begin(), user_counts.end()))
    throw ConfigError("catalog growth user counts must be ascending");
  const std::vector<std::size_t> order = user_permutation(ds.users.size(), seed);
  std::vector<char> seen(ds.catalog.size(), 0);
  std::vector<CatalogGrowthRow> rows;
  CatalogGrowthRow acc;
  std::size_t next = 0;
  for (std::size_t target : user_counts) {
    if (target > ds.users.size())
      throw ConfigError("catalog growth requested " + std::to_string(target) + " users, dataset has " +
                        std::to_string(ds.users.size()));
    for (; next < target; ++next) {
      const UserSequence& u = ds.users[order[next]];
      acc.interactions += u.n();
      for (ItemIndex i : u.items)
        if (!seen[static_cast<std::size_t>(i)]) {
          seen[static_cast<std::size_t>(i)] = 1;
          ++acc.distinct_items;
        }
    }
    acc.users = target;
    rows.push_back(acc);
  }
  return rows;
}

/// Dense-index mapping as CSV (item_id,index).
inline void write_item_index_csv(std::ostream& os, const Catalog& catalog) {
  os << "item_id,index\n";
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    const std::string& id = catalog[i].item_id;
    if (id.find_first_of(",\"\n") != std::string::npos) {
      std::string quoted = "\"";
      for (char c : id) quoted += (c == '"') ? std::string("\"\"") : std::string(1, c);
      os << quoted << "\"," << i << '\n';
    } else {
      os << id << ',' << i << '\n';
    }
  }
}

inline nlohmann::json split_manifest(const Dataset& ds, const SplitDataset& split, const ParseReport& report) {
  nlohmann::json users = nlohmann::json::array();
  std::vector<const HeldOutExample*> val(ds.users.size(), nullptr), test(ds.users.size(), nullptr);
  for (const auto& e : split.val) val[e.user] = &e;
  for (const auto& e : split.test) test[e.user] = &e;
  for (const auto& s : split.train) {
    nlohmann::json u = {{"user_id", ds.users[s.user].user_id}, {"n", ds.users[s.user].n()},
                        {"train_length", s.items.size()}};
    u["val_target"] = val[s.user] ? nlohmann::json(val[s.user]->target) : nlohmann::json(nullptr);
    u["test_target"] = test[s.user] ? nlohmann::json(test[s.user]->target) : nlohmann::json(nullptr);
    users.push_back(std::move(u));
  }
  return {{"format", "seqrec-split-v1"},
          {"num_users", ds.users.size()},
          {"num_items", ds.catalog.size()},
          {"interactions", ds.interaction_count()},
          {"train_interactions", split.train_interactions()},
          {"val_examples", split.val.size()},
          {"test_examples", split.test.size()},
          {"parse",
           {{"lines", report.lines},
            {"records", report.records},
            {"users_seen", report.users_seen},
            {"dropped_users", report.dropped_users},
            {"duplicate_records", report.duplicate_records}}},
          {"users", users}};
}

}  // namespace seqrec
