// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "seqrec/common.hpp"
#include "seqrec/evaluate.hpp"
#include "seqrec/ingest.hpp"
#include "seqrec/model.hpp"
#include "seqrec/numerics/checkpoint.hpp"
#include "seqrec/objective.hpp"
#include "seqrec/scalefit.hpp"
#include "seqrec/tokenize.hpp"
#include "seqrec/train.hpp"

namespace seqrec {

namespace fs = std::filesystem;

// ---- small file helpers ---------------------------------------------------------

inline std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read '" + p.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write '" + p.string() + "'");
  os << content;
  if (!os) throw DataError("failed writing '" + p.string() + "'");
}

inline nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_file(p, j.dump(2) + "\n"); }

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("CSV has no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

/// Plain comma-separated values without quoting.
inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream is(text);
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(s);
    while (std::getline(ls, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  bool first = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (first) {
      t.header = split(line);
      first = false;
    } else {
      t.rows.push_back(split(line));
      if (t.rows.back().size() != t.header.size())
        throw DataError("CSV row " + std::to_string(t.rows.size()) + " has " + std::to_string(t.rows.back().size()) +
                        " cells, header has " + std::to_string(t.header.size()));
    }
  }
  return t;
}

inline double to_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("'" + s + "' is not a number");
  }
}

inline std::vector<RunRecord> parse_run_log(const std::string& text) {
  const CsvTable t = parse_csv(text);
  std::vector<RunRecord> out;
  const auto c_step = t.column("step"), c_epoch = t.column("epoch"), c_flops = t.column("flops"), c_t = t.column("T"),
             c_n = t.column("N_nonemb"), c_loss = t.column("train_loss"), c_nd = t.column("val_ndcg5"),
             c_hit = t.column("val_hit5"), c_lr = t.column("lr");
  for (const auto& r : t.rows) {
    RunRecord rec;
    rec.step = static_cast<std::size_t>(to_double(r[c_step]));
    rec.epoch = static_cast<std::size_t>(to_double(r[c_epoch]));
    rec.flops = to_double(r[c_flops]);
    rec.seen = to_double(r[c_t]);
    rec.n_nonemb = static_cast<std::size_t>(to_double(r[c_n]));
    rec.train_loss = to_double(r[c_loss]);
    rec.val_ndcg5 = to_double(r[c_nd]);
    rec.val_hit5 = to_double(r[c_hit]);
    rec.lr = to_double(r[c_lr]);
    out.push_back(rec);
  }
  return out;
}

// ---- cells ------------------------------------------------------------------------

struct ExperimentCell {
  std::string id;
  ModelConfig model;
  std::size_t subsample = 0;  // users; 0 keeps every user
  LossConfig loss;
  TrainConfig train;
};

inline ExperimentCell cell_from_json(const nlohmann::json& j, std::size_t vocab_size) {
  ExperimentCell c;
  try {
    c.id = j.at("id").get<std::string>();
    nlohmann::json m = j.at("model");
    if (!m.contains("vocab_size")) m["vocab_size"] = vocab_size;
    c.model = m.get<ModelConfig>();
    c.subsample = j.value("subsample", std::size_t{0});
    c.loss = j.value("loss", nlohmann::json::object()).get<LossConfig>();
    c.train = j.at("train").get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cell " + j.value("id", std::string("?")) + ": " + e.what());
  }
  if (c.id.empty() || c.id.find_first_of("/\\") != std::string::npos)
    throw ConfigError("cell id '" + c.id + "' must be non-empty and contain no path separators");
  c.model.validate();
  c.loss.validate();
  c.train.validate();
  return c;
}

inline nlohmann::json cell_to_json(const ExperimentCell& c) {
  return {{"id", c.id}, {"model", c.model}, {"subsample", c.subsample}, {"loss", c.loss}, {"train", c.train}};
}

struct ExperimentManifest {
  fs::path output_dir;
  fs::path data;
  fs::path vocab;  // optional; built from the data when empty
  std::size_t vocab_size = kDefaultVocabSize;
  std::uint64_t root_seed = 0;
  std::vector<ExperimentCell> cells;
};

inline ExperimentManifest manifest_from_json(const nlohmann::json& j, const fs::path& base = {}) {
  ExperimentManifest m;
  auto resolve = [&](const std::string& s) { return fs::path(s).is_absolute() || base.empty() ? fs::path(s) : base / s; };
  try {
    m.output_dir = resolve(j.at("output_dir").get<std::string>());
    m.data = resolve(j.at("data").get<std::string>());
    if (j.contains("vocab")) m.vocab = resolve(j.at("vocab").get<std::string>());
    m.vocab_size = j.value("vocab_size", kDefaultVocabSize);
    m.root_seed = j.value("root_seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  std::map<std::string, int> ids;
  for (const auto& c : j.value("cells", nlohmann::json::array())) {
    m.cells.push_back(cell_from_json(c, m.vocab_size));
    if (++ids[m.cells.back().id] > 1) throw ConfigError("duplicate cell id '" + m.cells.back().id + "'");
  }
  return m;
}

/// Everything a cell needs besides its configs.
struct CellContext {
  const Dataset* dataset = nullptr;
  const Vocabulary* vocab = nullptr;
  std::uint64_t root_seed = 0;
  std::uint64_t data_hash = 0;
};

inline std::string cell_checksum(const ExperimentCell& cell, const CellContext& ctx) {
  std::uint64_t h = fnv1a(cell_to_json(cell).dump());
  h = fnv1a(hex64(ctx.data_hash), h);
  h = fnv1a(hex64(ctx.vocab->hash()), h);
  h = fnv1a(std::to_string(ctx.root_seed), h);
  return hex64(h);
}

struct CellOutcome {
  std::string id;
  std::string status;  // "ok", "skipped", "failed"
  std::size_t steps_executed = 0;
  std::string error;
  fs::path dir;
};

inline nlohmann::json checkpoint_metadata(const ExperimentCell& cell, const Vocabulary& vocab, std::uint64_t root_seed,
                                          std::size_t epoch) {
  return {{"model", cell.model},       {"vocab_hash", hex64(vocab.hash())}, {"vocab_size", vocab.size()},
          {"root_seed", root_seed},    {"cell", cell.id},                   {"epoch", epoch},
          {"flops_convention", kFlopsConvention}};
}

/// Trains and evaluates one cell, writing its artifacts into `dir`:
/// cell.json, run_log.csv, metrics.json, best.ckpt, final.ckpt, done.json.
/// A previous done.json with the same checksum skips the work.
inline CellOutcome run_cell(const ExperimentCell& cell0, const CellContext& ctx, const fs::path& dir) {
  CellOutcome out{cell0.id, "ok", 0, {}, dir};
  const std::string checksum = cell_checksum(cell0, ctx);
  const fs::path done = dir / "done.json";
  if (fs::exists(done)) {
    try {
      const auto j = read_json(done);
      if (j.value("checksum", std::string{}) == checksum && j.value("status", std::string{}) == "ok") {
        out.status = "skipped";
        return out;
      }
    } catch (const Error&) {
      // unreadable marker: rerun
    }
  }
  ExperimentCell cell = cell0;
  cell.model.vocab_size = ctx.vocab->size();
  fs::create_directories(dir);
  write_json(dir / "cell.json", cell_to_json(cell));
  const Dataset ds = cell.subsample ? subsample_users(*ctx.dataset, cell.subsample, ctx.root_seed) : *ctx.dataset;
  const SplitDataset split = split_leave_one_out(ds.users);
  const auto tokens = tokenize_catalog(ds.catalog, *ctx.vocab, cell.model.max_item_tokens);
  TrainInputs in{&split, tokens, ds.catalog.size()};
  TrainResult res = train(in, cell.model, cell.loss, cell.train);
  out.steps_executed = res.steps;
  {
    std::ostringstream log;
    write_run_log(log, res.log);
    write_file(dir / "run_log.csv", log.str());
  }
  const std::size_t last_epoch = res.log.empty() ? 0 : res.log.back().epoch;
  save_checkpoint((dir / "final.ckpt").string(),
                  {res.final_params.store, checkpoint_metadata(cell, *ctx.vocab, ctx.root_seed, last_epoch)});
  if (res.best_params)
    save_checkpoint((dir / "best.ckpt").string(),
                    {res.best_params->store, checkpoint_metadata(cell, *ctx.vocab, ctx.root_seed, res.best_epoch)});
  const auto pc = count_params(cell.model);
  nlohmann::json metrics = {{"cell", cell.id},
                            {"seed", cell.train.seed},
                            {"root_seed", ctx.root_seed},
                            {"n_nonemb", pc.non_embedding},
                            {"n_total", pc.total},
                            {"train_interactions", split.train_interactions()},
                            {"best_epoch", res.best_epoch},
                            {"best_val_ndcg5", res.best_val_ndcg5},
                            {"diverged", res.diverged}};
  if (res.test_final) metrics["test_final"] = to_json(*res.test_final);
  if (res.test_best) metrics["test_best"] = to_json(*res.test_best);
  if (res.diverged) metrics["divergence"] = res.divergence;
  write_json(dir / "metrics.json", metrics);
  if (res.diverged) {
    out.status = "failed";
    out.error = res.divergence;
    write_json(done, {{"checksum", checksum}, {"status", "failed"}, {"error", res.divergence}});
    return out;
  }
  write_json(done, {{"checksum", checksum}, {"status", "ok"}, {"steps", res.steps}, {"root_seed", ctx.root_seed}});
  return out;
}

inline Vocabulary load_or_build_vocab(const ExperimentManifest& m, const Dataset& ds) {
  if (!m.vocab.empty()) {
    std::istringstream is(read_file(m.vocab));
    return read_vocab(is);
  }
  return build_vocab(ds.catalog, m.vocab_size, m.root_seed);
}

inline Dataset load_dataset(const fs::path& path, ParseReport* report = nullptr) {
  std::istringstream is(read_file(path));
  return parse_interactions(is, report);
}

struct GridSummary {
  std::vector<CellOutcome> cells;
  std::size_t steps_executed() const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.steps_executed;
    return n;
  }
};

/// Runs every cell (up to `jobs` at once). A failing cell is recorded and the
/// grid carries on. Outcomes are reported in manifest order.
inline GridSummary run_grid(const ExperimentManifest& m, std::size_t jobs = 1) {
  GridSummary summary;
  if (m.cells.empty()) return summary;
  fs::create_directories(m.output_dir);
  const std::string raw = read_file(m.data);
  std::istringstream is(raw);
  ParseReport report;
  const Dataset ds = parse_interactions(is, &report);
  const Vocabulary vocab = load_or_build_vocab(m, ds);
  if (m.vocab.empty()) {
    std::ostringstream vs;
    write_vocab(vs, vocab, m.root_seed);
    write_file(m.output_dir / "vocab.txt", vs.str());
  }
  CellContext ctx{&ds, &vocab, m.root_seed, fnv1a(raw)};
  summary.cells.resize(m.cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < m.cells.size(); i = next++) {
      const auto& cell = m.cells[i];
      const fs::path dir = m.output_dir / "cells" / cell.id;
      try {
        summary.cells[i] = run_cell(cell, ctx, dir);
      } catch (const std::exception& e) {
        summary.cells[i] = {cell.id, "failed", 0, e.what(), dir};
        try {
          write_json(dir / "done.json", {{"status", "failed"}, {"error", e.what()}});
        } catch (const std::exception&) {
        }
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, m.cells.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : summary.cells)
    cells.push_back({{"id", c.id}, {"status", c.status}, {"steps_executed", c.steps_executed}, {"error", c.error},
                     {"dir", c.dir.string()}});
  write_json(m.output_dir / "grid_summary.json",
             {{"root_seed", m.root_seed}, {"cells", cells}, {"steps_executed", summary.steps_executed()}});
  return summary;
}

// ---- report -------------------------------------------------------------------

struct CompletedCell {
  std::string id;
  nlohmann::json config;
  std::vector<RunRecord> log;
};

inline std::vector<CompletedCell> completed_cells(const fs::path& output_dir) {
  std::vector<CompletedCell> out;
  const fs::path cells = output_dir / "cells";
  if (!fs::exists(cells)) return out;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(cells))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    if (!fs::exists(d / "done.json")) continue;
    const auto done = read_json(d / "done.json");
    if (done.value("status", std::string{}) != "ok") continue;
    CompletedCell c;
    c.config = read_json(d / "cell.json");
    c.id = c.config.value("id", d.filename().string());
    c.log = parse_run_log(read_file(d / "run_log.csv"));
    if (!c.log.empty()) out.push_back(std::move(c));
  }
  return out;
}

/// Envelope, fits and plot-ready tables over every completed cell. Returns
/// the summary written to summary.json.
inline nlohmann::json report(const fs::path& output_dir) {
  const auto cells = completed_cells(output_dir);
  if (cells.empty()) throw DataError("no completed cells under '" + output_dir.string() + "'");
  const fs::path rdir = output_dir / "report";
  fs::create_directories(rdir);
  std::map<std::string, fs::path> artifacts;

  std::vector<std::vector<EnvelopePoint>> runs;
  std::ostringstream flops_csv, n_csv, t_csv;
  flops_csv.precision(17);
  n_csv.precision(17);
  t_csv.precision(17);
  flops_csv << "run_id,flops,log_flops,val_ndcg5\n";
  n_csv << "run_id,N_nonemb,best_val_ndcg5\n";
  t_csv << "run_id,T,val_ndcg5\n";
  std::vector<RiskPoint> risk_points;
  for (const auto& c : cells) {
    std::vector<EnvelopePoint> pts;
    const RunRecord* best = &c.log.front();
    for (const auto& r : c.log) {
      pts.push_back({r.flops, r.val_ndcg5, c.id, static_cast<double>(r.n_nonemb), r.seen});
      flops_csv << c.id << ',' << r.flops << ',' << std::log(r.flops) << ',' << r.val_ndcg5 << '\n';
      t_csv << c.id << ',' << r.seen << ',' << r.val_ndcg5 << '\n';
      if (r.val_ndcg5 > best->val_ndcg5) best = &r;
    }
    n_csv << c.id << ',' << best->n_nonemb << ',' << best->val_ndcg5 << '\n';
    risk_points.push_back({static_cast<double>(best->n_nonemb), best->seen, best->val_ndcg5});
    runs.push_back(std::move(pts));
  }
  const auto env = extract_envelope(runs);
  std::ostringstream env_csv;
  env_csv.precision(17);
  env_csv << "flops,log_flops,val_ndcg5,run_id,N_nonemb,T\n";
  for (const auto& p : env)
    env_csv << p.flops << ',' << std::log(p.flops) << ',' << p.metric << ',' << p.run_id << ',' << p.n_nonemb << ','
            << p.seen << '\n';
  write_file(rdir / "envelope.csv", env_csv.str());
  write_file(rdir / "flops_vs_metric.csv", flops_csv.str());
  write_file(rdir / "n_vs_metric.csv", n_csv.str());
  write_file(rdir / "t_vs_metric.csv", t_csv.str());
  artifacts["envelope"] = rdir / "envelope.csv";
  artifacts["flops_vs_metric"] = rdir / "flops_vs_metric.csv";
  artifacts["n_vs_metric"] = rdir / "n_vs_metric.csv";
  artifacts["t_vs_metric"] = rdir / "t_vs_metric.csv";

  nlohmann::json sig;
  try {
    std::vector<SigmoidPoint> sp;
    for (const auto& p : env) sp.push_back({std::log(p.flops), p.metric});
    const auto fit = fit_sigmoid(sp);
    sig = to_json(fit);
    if (fit.fit) {
      std::ostringstream curve;
      curve.precision(17);
      curve << "log_flops,predicted\n";
      const double lo = sp.front().x, hi = sp.back().x;
      for (int i = 0; i <= 100; ++i) {
        const double x = lo + (hi - lo) * i / 100.0;
        curve << x << ',' << sigmoid_value(*fit.fit, x) << '\n';
      }
      write_file(rdir / "sigmoid_curve.csv", curve.str());
      artifacts["sigmoid_curve"] = rdir / "sigmoid_curve.csv";
    }
  } catch (const Error& e) {
    sig = {{"error", e.what()}};
  }
  write_json(rdir / "sigmoid_fit.json", sig);
  artifacts["sigmoid_fit"] = rdir / "sigmoid_fit.json";

  nlohmann::json risk;
  try {
    risk = to_json(fit_risk(risk_points));
  } catch (const Error& e) {
    risk = {{"error", e.what()}};
  }
  write_json(rdir / "risk_fit.json", risk);
  artifacts["risk_fit"] = rdir / "risk_fit.json";

  // Spread across cells that differ only in their seed.
  std::map<std::string, std::vector<std::pair<std::string, double>>> groups;
  for (const auto& c : cells) {
    nlohmann::json key = c.config;
    key.erase("id");
    if (key.contains("train")) key["train"].erase("seed");
    double best = 0;
    for (const auto& r : c.log) best = std::max(best, r.val_ndcg5);
    groups[key.dump()].push_back({c.id, best});
  }
  std::ostringstream spread;
  spread.precision(17);
  spread << "group,runs,seeds,mean_best_val_ndcg5,std_best_val_ndcg5,min,max\n";
  std::size_t gi = 0;
  for (const auto& [key, members] : groups) {
    double mean = 0, lo = 1e300, hi = -1e300;
    for (const auto& [id, v] : members) mean += v, lo = std::min(lo, v), hi = std::max(hi, v);
    mean /= static_cast<double>(members.size());
    double var = 0;
    for (const auto& [id, v] : members) var += (v - mean) * (v - mean);
    const double sd = members.size() > 1 ? std::sqrt(var / static_cast<double>(members.size() - 1)) : 0.0;
    std::string ids;
    for (const auto& [id, v] : members) ids += (ids.empty() ? "" : ";") + id;
    spread << "g" << gi++ << ',' << ids << ',' << members.size() << ',' << mean << ',' << sd << ',' << lo << ',' << hi
           << '\n';
  }
  write_file(rdir / "seed_spread.csv", spread.str());
  artifacts["seed_spread"] = rdir / "seed_spread.csv";

  nlohmann::json arts = nlohmann::json::object();
  for (const auto& [k, p] : artifacts) {
    if (!fs::exists(p)) throw DataError("report artifact '" + p.string() + "' was not written");
    arts[k] = p.string();
  }
  nlohmann::json summary = {{"cells", cells.size()},
                            {"envelope_points", env.size()},
                            {"sigmoid_fit", sig},
                            {"risk_fit", risk},
                            {"artifacts", arts}};
  write_json(rdir / "summary.json", summary);
  return summary;
}

}  // namespace seqrec
