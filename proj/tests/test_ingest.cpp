#include <gtest/gtest.h>

#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "seqrec/ingest.hpp"
#include "seqrec/synthetic.hpp"

using namespace seqrec;

namespace {

InteractionRecord rec(std::string user, std::string item, std::int64_t ts) {
  return {std::move(user), std::move(item), ts, "t " + item, "b"};
}

Dataset users_with_lengths(std::initializer_list<std::size_t> lengths) {
  std::vector<InteractionRecord> recs;
  std::size_t u = 0, next_item = 0;
  for (std::size_t n : lengths) {
    for (std::size_t k = 0; k < n; ++k)
      recs.push_back(rec("u" + std::to_string(u), "i" + std::to_string(next_item++ % 37), static_cast<std::int64_t>(k)));
    ++u;
  }
  return build_dataset(recs);
}

}  // namespace

TEST(Ingest, EmptyStream) {
  std::istringstream in("");
  ParseReport rep;
  Dataset ds = parse_interactions(in, &rep);
  EXPECT_TRUE(ds.catalog.empty());
  EXPECT_TRUE(ds.users.empty());
  EXPECT_EQ(rep.lines, 0u);
}

TEST(Ingest, SortsByTimestamp) {
  std::istringstream in(
      R"({"user_id":"a","item_id":"x5","timestamp":5,"title":"five","brand":""}
{"user_id":"a","item_id":"x1","timestamp":1,"title":"one","brand":""}
{"user_id":"a","item_id":"x9","timestamp":9,"title":"nine","brand":"","extra":true}
)");
  Dataset ds = parse_interactions(in);
  ASSERT_EQ(ds.users.size(), 1u);
  std::vector<std::string> ids;
  for (auto i : ds.users[0].items) ids.push_back(ds.catalog[static_cast<std::size_t>(i)].item_id);
  EXPECT_EQ(ids, (std::vector<std::string>{"x1", "x5", "x9"}));
}

TEST(Ingest, TiesKeepInputOrder) {
  std::vector<InteractionRecord> recs = {rec("a", "p", 3), rec("a", "q", 3), rec("a", "r", 1)};
  Dataset ds = build_dataset(recs);
  std::vector<std::string> ids;
  for (auto i : ds.users[0].items) ids.push_back(ds.catalog[static_cast<std::size_t>(i)].item_id);
  EXPECT_EQ(ids, (std::vector<std::string>{"r", "p", "q"}));
}

TEST(Ingest, DropsShortUsers) {
  std::vector<InteractionRecord> recs = {rec("A", "x", 0), rec("B", "y", 0), rec("B", "z", 1)};
  ParseReport rep;
  Dataset ds = build_dataset(recs, &rep);
  ASSERT_EQ(ds.users.size(), 1u);
  EXPECT_EQ(ds.users[0].user_id, "B");
  EXPECT_EQ(ds.users[0].n(), 2u);
  EXPECT_EQ(rep.dropped_users, 1u);
  EXPECT_EQ(ds.catalog.size(), 2u);  // x belongs only to the dropped user
}

TEST(Ingest, DuplicateTriplesKept) {
  std::vector<InteractionRecord> recs = {rec("a", "x", 1), rec("a", "x", 1), rec("a", "y", 2)};
  ParseReport rep;
  Dataset ds = build_dataset(recs, &rep);
  EXPECT_EQ(ds.users[0].n(), 3u);
  EXPECT_EQ(rep.duplicate_records, 1u);
}

TEST(Ingest, MalformedLineNamesLineNumber) {
  std::istringstream in(
      "{\"user_id\":\"a\",\"item_id\":\"x\",\"timestamp\":1,\"title\":\"\",\"brand\":\"\"}\n\n{not json\n");
  try {
    parse_interactions(in);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_record_line(R"({"user_id":"a","item_id":"x","timestamp":-1})", 1), DataError);
  EXPECT_THROW(parse_record_line(R"({"user_id":"","item_id":"x","timestamp":1})", 1), DataError);
  EXPECT_THROW(parse_record_line(R"({"user_id":"a","timestamp":1})", 1), DataError);
  EXPECT_THROW(parse_record_line(R"({"user_id":"a","item_id":"x","timestamp":"1"})", 1), DataError);
}

TEST(Ingest, RecordLineRoundTrip) {
  InteractionRecord r{"u\"1", "it,em", 42, "Tïtle", "brand"};
  InteractionRecord back = parse_record_line(record_to_json_line(r), 1);
  EXPECT_EQ(back.user_id, r.user_id);
  EXPECT_EQ(back.item_id, r.item_id);
  EXPECT_EQ(back.timestamp, 42);
  EXPECT_EQ(back.title, r.title);
}

TEST(Ingest, CatalogDenseAndUnique) {
  Dataset ds = users_with_lengths({5, 7, 3, 9});
  std::set<std::string> ids;
  for (std::size_t i = 0; i < ds.catalog.size(); ++i) {
    EXPECT_TRUE(ids.insert(ds.catalog[i].item_id).second);
    EXPECT_EQ(ds.catalog.find(ds.catalog[i].item_id), static_cast<ItemIndex>(i));
  }
  for (const auto& u : ds.users)
    for (auto i : u.items) EXPECT_LT(static_cast<std::size_t>(i), ds.catalog.size());
}

TEST(Split, FiveItems) {
  std::vector<UserSequence> users = {{"u", {10, 11, 12, 13, 14}}};
  SplitDataset s = split_leave_one_out(users);
  ASSERT_EQ(s.train.size(), 1u);
  EXPECT_EQ(s.train[0].items, (std::vector<ItemIndex>{10, 11, 12}));
  ASSERT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.val[0].prefix, (std::vector<ItemIndex>{10, 11, 12}));
  EXPECT_EQ(s.val[0].target, 13);
  ASSERT_EQ(s.test.size(), 1u);
  EXPECT_EQ(s.test[0].prefix, (std::vector<ItemIndex>{10, 11, 12, 13}));
  EXPECT_EQ(s.test[0].target, 14);
}

TEST(Split, ShortSequences) {
  std::vector<UserSequence> users = {{"a", {1, 2}}, {"b", {3, 4, 5}}};
  SplitDataset s = split_leave_one_out(users);
  ASSERT_EQ(s.train.size(), 2u);
  EXPECT_EQ(s.train[0].items, (std::vector<ItemIndex>{1, 2}));
  EXPECT_EQ(s.train[1].items, (std::vector<ItemIndex>{3}));
  ASSERT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.val[0].user, 1u);
  EXPECT_EQ(s.val[0].target, 4);
  EXPECT_EQ(s.test[0].target, 5);
}

TEST(Split, TargetsPartitionEachHistory) {
  Dataset ds = users_with_lengths({3, 4, 10, 25, 2, 6});
  SplitDataset s = split_leave_one_out(ds.users);
  for (const auto& t : s.train) {
    const auto& full = ds.users[t.user].items;
    if (full.size() < 3) continue;
    // train items 1..n-2, then val target, then test target reassemble the history
    std::vector<ItemIndex> joined = t.items;
    for (const auto& v : s.val)
      if (v.user == t.user) joined.push_back(v.target);
    for (const auto& e : s.test)
      if (e.user == t.user) joined.push_back(e.target);
    EXPECT_EQ(joined, full);
    EXPECT_EQ(joined.size(), full.size());
  }
}

TEST(Popularity, HandNormalization) {
  SplitDataset s;
  s.train.push_back({0, {0, 0, 1}});
  s.train.push_back({1, {0}});
  s.test.push_back({0, {0}, 2});
  auto q = popularity_distribution(s, 3);
  EXPECT_DOUBLE_EQ(q.probs[0], 0.75);
  EXPECT_DOUBLE_EQ(q.probs[1], 0.25);
  EXPECT_EQ(q.probs[2], 0.0);  // test-only item
  EXPECT_EQ(q.support(), 2u);
}

TEST(Popularity, UniformAndErrors) {
  SplitDataset s;
  s.train.push_back({0, {0, 1, 2, 3}});
  auto q = popularity_distribution(s, 4);
  for (double p : q.probs) EXPECT_DOUBLE_EQ(p, 0.25);
  EXPECT_THROW(popularity_distribution(SplitDataset{}, 4), DataError);
  EXPECT_THROW(popularity_distribution(s, 2), DataError);
}

TEST(Popularity, SumsToOne) {
  Dataset ds = users_with_lengths({5, 9, 13, 4, 30, 2, 7});
  auto s = split_leave_one_out(ds.users);
  auto q = popularity_distribution(s, ds.catalog.size());
  double total = std::accumulate(q.probs.begin(), q.probs.end(), 0.0);
  EXPECT_NEAR(total, 1.0, 1e-9);
  for (std::size_t i = 0; i < q.probs.size(); ++i) {
    EXPECT_GE(q.probs[i], 0.0);
    EXPECT_EQ(q.probs[i] > 0, q.counts[i] > 0);
  }
}

TEST(Subsample, Bounds) {
  Dataset ds = users_with_lengths({3, 4, 5});
  Dataset all = subsample_users(ds, 3, 7);
  EXPECT_EQ(all.users, ds.users);  // catalog order is first appearance either way
  EXPECT_EQ(all.catalog, ds.catalog);
  Dataset none = subsample_users(ds, 0, 7);
  EXPECT_TRUE(none.users.empty());
  EXPECT_TRUE(none.catalog.empty());
  EXPECT_THROW(subsample_users(ds, 4, 7), ConfigError);
}

TEST(Subsample, DeterministicAndSeedSensitive) {
  std::vector<InteractionRecord> recs;
  for (std::size_t u = 0; u < 100; ++u)
    for (std::size_t k = 0; k < 4; ++k) recs.push_back(rec("u" + std::to_string(u), "i" + std::to_string(u * 4 + k), k));
  Dataset ds = build_dataset(recs);
  Dataset a = subsample_users(ds, 30, 1), b = subsample_users(ds, 30, 1), c = subsample_users(ds, 30, 2);
  EXPECT_EQ(a, b);
  std::set<std::string> ua, uc;
  for (auto& u : a.users) ua.insert(u.user_id);
  for (auto& u : c.users) uc.insert(u.user_id);
  EXPECT_NE(ua, uc);
  // re-densified: every catalog item is referenced
  std::set<ItemIndex> used;
  for (auto& u : a.users) used.insert(u.items.begin(), u.items.end());
  EXPECT_EQ(used.size(), a.catalog.size());
  EXPECT_EQ(a.catalog.size(), 120u);
}

TEST(Subsample, Idempotent) {
  Dataset ds = users_with_lengths({3, 4, 5, 6, 7, 8, 9, 10});
  Dataset once = subsample_users(ds, 5, 11);
  Dataset twice = subsample_users(once, 5, 11);
  EXPECT_EQ(once, twice);
}

TEST(CatalogGrowth, HandCases) {
  std::vector<InteractionRecord> recs = {rec("a", "w", 0), rec("a", "x", 1), rec("b", "y", 0), rec("b", "z", 1)};
  Dataset ds = build_dataset(recs);
  const std::size_t counts[] = {0, 1, 2};
  auto rows = catalog_growth_report(ds, counts, 3);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].users, 0u);
  EXPECT_EQ(rows[0].interactions, 0u);
  EXPECT_EQ(rows[0].distinct_items, 0u);
  EXPECT_EQ(rows[1].distinct_items, 2u);
  EXPECT_EQ(rows[2].distinct_items, 4u);
  EXPECT_EQ(rows[2].interactions, 4u);
  const std::size_t bad[] = {2, 1};
  EXPECT_THROW(catalog_growth_report(ds, bad, 3), ConfigError);
}

TEST(CatalogGrowth, MonotoneAndComplete) {
  Dataset ds = users_with_lengths({3, 4, 5, 6, 7, 8, 9, 10, 2, 2});
  const std::size_t counts[] = {1, 2, 3, 5, 8, 10};
  auto rows = catalog_growth_report(ds, counts, 5);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    EXPECT_GE(rows[r].distinct_items, rows[r - 1].distinct_items);
    EXPECT_GE(rows[r].interactions, rows[r - 1].interactions);
  }
  EXPECT_EQ(rows.back().distinct_items, ds.catalog.size());
  EXPECT_EQ(rows.back().interactions, ds.interaction_count());
}

TEST(Manifest, ItemIndexCsvQuotes) {
  Catalog c;
  c.add({"plain", "", ""});
  c.add({"a,\"b\"", "", ""});
  std::ostringstream os;
  write_item_index_csv(os, c);
  EXPECT_EQ(os.str(), "item_id,index\nplain,0\n\"a,\"\"b\"\"\",1\n");
}

TEST(Manifest, CountsMatchSplit) {
  Dataset ds = users_with_lengths({2, 5, 6});
  auto s = split_leave_one_out(ds.users);
  auto j = split_manifest(ds, s, ParseReport{});
  EXPECT_EQ(j["num_users"], 3);
  EXPECT_EQ(j["val_examples"], 2);
  EXPECT_EQ(j["train_interactions"], s.train_interactions());
  ASSERT_EQ(j["users"].size(), 3u);
  EXPECT_TRUE(j["users"][0]["val_target"].is_null());
}

TEST(Synthetic, TasteKeepsJumpsInOneCategory) {
  synthetic::ZipfCatalogConfig zc;
  zc.num_items = 500;
  zc.num_users = 60;
  zc.follow_probability = 0.0;
  zc.taste_probability = 1.0;
  zc.seed = 3;
  const auto recs = synthetic::zipf_catalog_records(zc);
  // The first title word names the category.
  std::map<std::string, std::set<std::string>> cats;
  for (const auto& r : recs) cats[r.user_id].insert(r.title.substr(0, r.title.find(' ')));
  ASSERT_EQ(cats.size(), 60u);
  std::set<std::string> tastes;
  for (const auto& [u, c] : cats) {
    EXPECT_EQ(c.size(), 1u) << u;
    tastes.insert(*c.begin());
  }
  EXPECT_GT(tastes.size(), 10u);
}

TEST(Synthetic, TasteOffMixesCategories) {
  synthetic::ZipfCatalogConfig zc;
  zc.num_items = 500;
  zc.num_users = 60;
  zc.follow_probability = 0.0;
  zc.seed = 3;
  std::size_t mixed = 0;
  std::map<std::string, std::set<std::string>> cats;
  for (const auto& r : synthetic::zipf_catalog_records(zc)) cats[r.user_id].insert(r.title.substr(0, r.title.find(' ')));
  for (const auto& [u, c] : cats) mixed += c.size() > 1;
  EXPECT_GT(mixed, 50u);
}

TEST(Synthetic, TasteValidated) {
  synthetic::ZipfCatalogConfig zc;
  zc.taste_probability = 1.5;
  EXPECT_THROW(synthetic::zipf_catalog_records(zc), ConfigError);
  zc.taste_probability = -0.1;
  EXPECT_THROW(synthetic::zipf_catalog_records(zc), ConfigError);
}
