#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "seqrec/experiment.hpp"
#include "seqrec/numerics/checkpoint.hpp"
#include "support.hpp"

using namespace seqrec;
using nlohmann::json;

namespace {

fs::path write_cycle_data(const fs::path& dir, std::size_t users = 10, std::size_t items = 12, std::size_t len = 7) {
  std::ostringstream os;
  for (const auto& r : synthetic::cycle_records(users, items, len)) os << record_to_json_line(r) << '\n';
  const fs::path p = dir / "data.jsonl";
  write_file(p, os.str());
  return p;
}

json small_cell(const std::string& id, std::uint64_t seed = 1) {
  return {{"id", id},
          {"model", {{"n_layers", 1}, {"n_heads", 2}, {"hidden_dim", 8}, {"max_seq_len", 8}, {"max_item_tokens", 8}}},
          {"loss", {{"num_negatives", 4}}},
          {"train", {{"epochs", 3}, {"batch_size", 4}, {"base_lr", 1e-2}, {"eval_negatives", 5}, {"seed", seed}}}};
}

json manifest_json(const fs::path& dir, const fs::path& data, json cells) {
  return {{"output_dir", (dir / "out").string()}, {"data", data.string()}, {"vocab_size", 200}, {"root_seed", 7},
          {"cells", std::move(cells)}};
}

int run_cli(const std::string& args, std::string* out = nullptr) {
  const auto dir = fs::temp_directory_path();
  const fs::path so = dir / "seqrec_cli_stdout.txt";
  const std::string cmd = std::string(SEQREC_CLI_PATH) + " " + args + " >" + so.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  if (out) *out = read_file(so);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Manifest, Errors) {
  const auto dir = seqrec::testing::scratch_dir("manifest_errors");
  const auto data = write_cycle_data(dir);
  EXPECT_THROW(manifest_from_json(manifest_json(dir, data, {small_cell("a"), small_cell("a")})), ConfigError);
  EXPECT_THROW(manifest_from_json(manifest_json(dir, data, {small_cell("x/y")})), ConfigError);
  EXPECT_THROW(manifest_from_json(json{{"data", data.string()}}), ConfigError);
  auto bad = small_cell("b");
  bad["train"].erase("batch_size");
  EXPECT_THROW(manifest_from_json(manifest_json(dir, data, {bad})), ConfigError);
}

TEST(Grid, EmptyManifestIsNoop) {
  const auto dir = seqrec::testing::scratch_dir("grid_empty");
  const auto data = write_cycle_data(dir);
  const auto m = manifest_from_json(manifest_json(dir, data, json::array()));
  const auto s = run_grid(m);
  EXPECT_TRUE(s.cells.empty());
  EXPECT_EQ(s.steps_executed(), 0u);
}

TEST(Grid, OneCellMatchesDirectTraining) {
  const auto dir = seqrec::testing::scratch_dir("grid_one");
  const auto data = write_cycle_data(dir);
  const auto m = manifest_from_json(manifest_json(dir, data, {small_cell("c1")}));
  const auto s = run_grid(m);
  ASSERT_EQ(s.cells.size(), 1u);
  ASSERT_EQ(s.cells[0].status, "ok") << s.cells[0].error;

  const Dataset ds = load_dataset(data);
  const Vocabulary vocab = build_vocab(ds.catalog, 200, 7);
  const SplitDataset split = split_leave_one_out(ds.users);
  ExperimentCell cell = m.cells[0];
  cell.model.vocab_size = vocab.size();
  const auto tokens = tokenize_catalog(ds.catalog, vocab, cell.model.max_item_tokens);
  const auto res = train({&split, tokens, ds.catalog.size()}, cell.model, cell.loss, cell.train);
  std::ostringstream log;
  write_run_log(log, res.log);
  const fs::path cdir = m.output_dir / "cells" / "c1";
  EXPECT_EQ(read_file(cdir / "run_log.csv"), log.str());
  EXPECT_EQ(s.cells[0].steps_executed, res.steps);
  const auto ckpt = load_checkpoint((cdir / "final.ckpt").string());
  ASSERT_TRUE(ckpt.params.congruent(res.final_params.store));
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    const auto a = ckpt.params[i].values();
    const auto b = res.final_params.store[i].values();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << ckpt.params.name(i);
  }
  EXPECT_EQ(ckpt.metadata.at("vocab_hash"), hex64(vocab.hash()));
  for (const char* f : {"cell.json", "metrics.json", "best.ckpt", "done.json"}) EXPECT_TRUE(fs::exists(cdir / f)) << f;
}

TEST(Grid, RerunExecutesZeroSteps) {
  const auto dir = seqrec::testing::scratch_dir("grid_resume");
  const auto data = write_cycle_data(dir);
  auto mj = manifest_json(dir, data, {small_cell("c1"), small_cell("c2", 2)});
  const auto m = manifest_from_json(mj);
  const auto first = run_grid(m);
  EXPECT_GT(first.steps_executed(), 0u);
  const std::string log1 = read_file(m.output_dir / "cells" / "c1" / "run_log.csv");
  const auto second = run_grid(m);
  EXPECT_EQ(second.steps_executed(), 0u);
  for (const auto& c : second.cells) EXPECT_EQ(c.status, "skipped");
  EXPECT_EQ(read_file(m.output_dir / "cells" / "c1" / "run_log.csv"), log1);
  EXPECT_EQ(read_json(m.output_dir / "grid_summary.json").at("steps_executed"), 0);

  // A changed cell config invalidates only that cell.
  mj["cells"][1]["train"]["seed"] = 3;
  const auto third = run_grid(manifest_from_json(mj));
  EXPECT_EQ(third.cells[0].status, "skipped");
  EXPECT_EQ(third.cells[1].status, "ok");
  EXPECT_GT(third.cells[1].steps_executed, 0u);
}

TEST(Grid, FailedCellIsRecordedAndGridContinues) {
  const auto dir = seqrec::testing::scratch_dir("grid_fail");
  const auto data = write_cycle_data(dir);
  auto bad = small_cell("bad");
  bad["subsample"] = 1000;  // more users than the data has
  const auto m = manifest_from_json(manifest_json(dir, data, {bad, small_cell("good")}));
  const auto s = run_grid(m);
  EXPECT_EQ(s.cells[0].status, "failed");
  EXPECT_NE(s.cells[0].error.find("cannot sample"), std::string::npos) << s.cells[0].error;
  EXPECT_EQ(s.cells[1].status, "ok");
  EXPECT_EQ(read_json(m.output_dir / "cells" / "bad" / "done.json").at("status"), "failed");
}

TEST(Grid, OrderAndJobsDoNotChangeResults) {
  const auto d1 = seqrec::testing::scratch_dir("grid_order_a");
  const auto d2 = seqrec::testing::scratch_dir("grid_order_b");
  const auto data = write_cycle_data(d1);
  const auto m1 = manifest_from_json(manifest_json(d1, data, {small_cell("c1"), small_cell("c2", 2), small_cell("c3", 3)}));
  const auto m2 = manifest_from_json(manifest_json(d2, data, {small_cell("c3", 3), small_cell("c1"), small_cell("c2", 2)}));
  run_grid(m1, 1);
  run_grid(m2, 3);
  for (const char* id : {"c1", "c2", "c3"}) {
    EXPECT_EQ(read_file(m1.output_dir / "cells" / id / "run_log.csv"),
              read_file(m2.output_dir / "cells" / id / "run_log.csv"))
        << id;
    EXPECT_EQ(read_json(m1.output_dir / "cells" / id / "metrics.json"),
              read_json(m2.output_dir / "cells" / id / "metrics.json"))
        << id;
  }
}

TEST(Report, NeedsCompletedCells) {
  const auto dir = seqrec::testing::scratch_dir("report_none");
  EXPECT_THROW(report(dir), DataError);
}

TEST(Report, SingleCellEnvelopeAndFitErrors) {
  const auto dir = seqrec::testing::scratch_dir("report_single");
  const auto data = write_cycle_data(dir);
  const auto m = manifest_from_json(manifest_json(dir, data, {small_cell("c1")}));
  run_grid(m);
  const auto summary = report(m.output_dir);
  EXPECT_EQ(summary.at("cells"), 1);
  for (const auto& [k, p] : summary.at("artifacts").items()) EXPECT_TRUE(fs::exists(p.get<std::string>())) << k;

  // The envelope of one run is its strict running maximum.
  const auto log = parse_run_log(read_file(m.output_dir / "cells" / "c1" / "run_log.csv"));
  std::vector<double> running;
  double best = -1;
  for (const auto& r : log)
    if (r.val_ndcg5 > best) running.push_back(best = r.val_ndcg5);
  const auto env = parse_csv(read_file(m.output_dir / "report" / "envelope.csv"));
  ASSERT_EQ(env.rows.size(), running.size());
  for (std::size_t i = 0; i < running.size(); ++i) EXPECT_DOUBLE_EQ(to_double(env.rows[i][2]), running[i]);

  // Too few points: each fitter's message is carried through unchanged.
  EXPECT_EQ(summary.at("risk_fit").at("error"), "risk fit needs at least 6 points, got 1");
  EXPECT_EQ(summary.at("sigmoid_fit").at("error"),
            "sigmoid fit needs at least 5 points, got " + std::to_string(running.size()));
}

TEST(Report, SeedSpreadGroupsCellsDifferingOnlyInSeed) {
  const auto dir = seqrec::testing::scratch_dir("report_spread");
  const auto data = write_cycle_data(dir);
  auto other = small_cell("wide", 1);
  other["model"]["hidden_dim"] = 16;
  const auto m = manifest_from_json(manifest_json(dir, data, {small_cell("s1", 1), small_cell("s2", 2), other}));
  run_grid(m);
  report(m.output_dir);
  const auto spread = parse_csv(read_file(m.output_dir / "report" / "seed_spread.csv"));
  ASSERT_EQ(spread.rows.size(), 2u);
  bool found = false;
  for (const auto& row : spread.rows)
    if (row[1] == "s1;s2") {
      found = true;
      EXPECT_EQ(row[2], "2");
      const auto b1 = read_json(m.output_dir / "cells" / "s1" / "metrics.json").at("best_val_ndcg5").get<double>();
      const auto b2 = read_json(m.output_dir / "cells" / "s2" / "metrics.json").at("best_val_ndcg5").get<double>();
      EXPECT_NEAR(to_double(row[3]), (b1 + b2) / 2, 1e-12);
      EXPECT_NEAR(to_double(row[4]), std::abs(b1 - b2) / std::sqrt(2.0), 1e-12);
    }
  EXPECT_TRUE(found);
}

TEST(Cli, FlopsSubcommand) {
  const auto dir = seqrec::testing::scratch_dir("cli_flops");
  write_json(dir / "m.json", {{"n_layers", 4}, {"n_heads", 2}, {"hidden_dim", 64}});
  std::string out;
  ASSERT_EQ(run_cli("flops --config " + (dir / "m.json").string() + " --tokens 1000", &out), 0);
  EXPECT_EQ(json::parse(out).at("n_nonemb"), 204224);
}

TEST(Cli, ExitCodes) {
  const auto dir = seqrec::testing::scratch_dir("cli_exit");
  const auto data = write_cycle_data(dir);
  EXPECT_EQ(run_cli("flops"), 2);  // missing required option
  EXPECT_EQ(run_cli("train --config x --data y"), 2);
  write_file(dir / "broken.json", "{ not json");
  EXPECT_EQ(run_cli("flops --config " + (dir / "broken.json").string() + " --tokens 1"), 2);
  write_json(dir / "bad_model.json", {{"n_layers", 1}, {"n_heads", 3}, {"hidden_dim", 8}});
  EXPECT_EQ(run_cli("flops --config " + (dir / "bad_model.json").string() + " --tokens 1"), 2);

  write_json(dir / "cell.json", small_cell("t"));
  write_file(dir / "garbage.jsonl", "{\"user_id\": \"u\", \"item_id\": \"i\"}\nnot json at all\n");
  EXPECT_EQ(run_cli("train --config " + (dir / "cell.json").string() + " --data " + (dir / "garbage.jsonl").string() +
                    " --out " + (dir / "t").string() + " --vocab-size 200"),
            3);
  EXPECT_EQ(run_cli("train --config " + (dir / "cell.json").string() + " --data " + (dir / "missing.jsonl").string() +
                    " --out " + (dir / "t").string()),
            3);

  // An absurd learning rate overflows the parameters and the run is refused.
  EXPECT_EQ(run_cli("train --config " + (dir / "cell.json").string() + " --data " + data.string() + " --out " +
                    (dir / "diverge").string() + " --vocab-size 200 --lr 1e30"),
            4);
  EXPECT_EQ(run_cli("train --config " + (dir / "cell.json").string() + " --data " + data.string() + " --out " +
                    (dir / "ok").string() + " --vocab-size 200"),
            0);
}

TEST(Cli, GridTwiceThenReport) {
  const auto dir = seqrec::testing::scratch_dir("cli_grid");
  const auto data = write_cycle_data(dir);
  write_json(dir / "manifest.json", manifest_json(dir, data, {small_cell("c1"), small_cell("c2", 2)}));
  std::string out;
  ASSERT_EQ(run_cli("grid --manifest " + (dir / "manifest.json").string(), &out), 0);
  EXPECT_GT(json::parse(out).at("steps_executed").get<std::size_t>(), 0u);
  ASSERT_EQ(run_cli("grid --manifest " + (dir / "manifest.json").string(), &out), 0);
  EXPECT_EQ(json::parse(out).at("steps_executed"), 0);
  ASSERT_EQ(run_cli("report --dir " + (dir / "out").string(), &out), 0);
  EXPECT_EQ(json::parse(out).at("cells"), 2);
  EXPECT_EQ(run_cli("report --dir " + (dir / "nothing").string()), 3);
}
