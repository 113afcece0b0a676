// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

// seqrec: command-line entry point for the recommendation scaling lab.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "seqrec/common.hpp"
#include "seqrec/evaluate.hpp"
#include "seqrec/experiment.hpp"
#include "seqrec/finetune.hpp"
#include "seqrec/ingest.hpp"
#include "seqrec/model.hpp"
#include "seqrec/numerics/checkpoint.hpp"
#include "seqrec/scalefit.hpp"
#include "seqrec/synthetic.hpp"
#include "seqrec/tokenize.hpp"
#include "seqrec/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace seqrec;

namespace {

Vocabulary load_vocab(const fs::path& p) {
  std::istringstream is(read_file(p));
  return read_vocab(is);
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

void log_epoch(const RunRecord& r) {
  std::cerr << "epoch " << r.epoch << "  step " << r.step << "  loss " << r.train_loss << "  val_ndcg@5 "
            << r.val_ndcg5 << "  lr " << r.lr << "  (" << r.wall_seconds << " s)\n";
}

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      throw ConfigError("invalid k list '" + s + "'");
    }
  }
  return out;
}

bool parse_on_off(const std::string& s) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw ConfigError("expected on|off, got '" + s + "'");
}

// ---- subcommands ------------------------------------------------------------------

struct IngestArgs {
  std::string input, out;
  std::vector<std::size_t> growth;
  std::uint64_t seed = 0;
};

int cmd_ingest(const IngestArgs& a) {
  ParseReport report;
  const Dataset ds = load_dataset(a.input, &report);
  const SplitDataset split = split_leave_one_out(ds.users);
  fs::create_directories(a.out);
  std::ostringstream idx;
  write_item_index_csv(idx, ds.catalog);
  write_file(fs::path(a.out) / "item_index.csv", idx.str());
  auto manifest = split_manifest(ds, split, report);
  manifest["seed"] = a.seed;
  write_json(fs::path(a.out) / "split_manifest.json", manifest);
  if (!a.growth.empty()) {
    std::ostringstream g;
    g << "users,interactions,distinct_items\n";
    for (const auto& row : catalog_growth_report(ds, a.growth, a.seed))
      g << row.users << ',' << row.interactions << ',' << row.distinct_items << '\n';
    write_file(fs::path(a.out) / "catalog_growth.csv", g.str());
  }
  print_json({{"users", ds.users.size()},
              {"items", ds.catalog.size()},
              {"interactions", ds.interaction_count()},
              {"dropped_users", report.dropped_users},
              {"duplicate_records", report.duplicate_records}});
  return 0;
}

struct SubsampleArgs {
  std::string input, out;
  std::size_t users = 0;
  std::uint64_t seed = 0;
};

int cmd_subsample(const SubsampleArgs& a) {
  const Dataset ds = load_dataset(a.input);
  const Dataset sub = subsample_users(ds, a.users, a.seed);
  std::ostringstream os;
  for (const auto& u : sub.users)
    for (std::size_t k = 0; k < u.items.size(); ++k) {
      const auto& item = sub.catalog[static_cast<std::size_t>(u.items[k])];
      os << record_to_json_line({u.user_id, item.item_id, static_cast<std::int64_t>(k), item.title, item.brand}) << '\n';
    }
  write_file(a.out, os.str());
  print_json({{"users", sub.users.size()}, {"items", sub.catalog.size()}, {"seed", a.seed}});
  return 0;
}

struct VocabArgs {
  std::string input, out;
  std::size_t size = kDefaultVocabSize;
  std::uint64_t seed = 0;
};

int cmd_vocab(const VocabArgs& a) {
  const Dataset ds = load_dataset(a.input);
  const Vocabulary v = build_vocab(ds.catalog, a.size, a.seed);
  std::ostringstream os;
  write_vocab(os, v, a.seed);
  write_file(a.out, os.str());
  print_json({{"size", v.size()}, {"hash", hex64(v.hash())}, {"seed", a.seed}});
  return 0;
}

struct TrainArgs {
  std::string config, data, vocab, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> negatives, epochs, batch_size;
  std::optional<double> temperature, lr;
  std::string logq;
  std::size_t vocab_size = kDefaultVocabSize;
};

int cmd_train(const TrainArgs& a) {
  json cfg = read_json(a.config);
  if (!cfg.contains("id")) cfg["id"] = fs::path(a.out).filename().string();
  if (a.seed) cfg["train"]["seed"] = *a.seed;
  if (a.negatives) cfg["loss"]["num_negatives"] = *a.negatives;
  if (a.temperature) cfg["loss"]["temperature"] = *a.temperature;
  if (!a.logq.empty()) cfg["loss"]["logq_correction"] = parse_on_off(a.logq);
  if (a.epochs) cfg["train"]["epochs"] = *a.epochs;
  if (a.lr) cfg["train"]["base_lr"] = *a.lr;
  if (a.batch_size) cfg["train"]["batch_size"] = *a.batch_size;
  const ExperimentCell cell = cell_from_json(cfg, a.vocab_size);
  const std::string raw = read_file(a.data);
  std::istringstream is(raw);
  const Dataset ds = parse_interactions(is);
  const Vocabulary vocab = a.vocab.empty() ? build_vocab(ds.catalog, a.vocab_size, cell.train.seed) : load_vocab(a.vocab);
  CellContext ctx{&ds, &vocab, cell.train.seed, fnv1a(raw)};
  const auto outcome = run_cell(cell, ctx, a.out);
  print_json({{"cell", outcome.id}, {"status", outcome.status}, {"steps", outcome.steps_executed}, {"dir", a.out}});
  if (outcome.status == "failed") throw NumericError(outcome.error);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, vocab, out, split = "test", ks = "5,10";
  std::size_t negatives = 10000, threads = 1;
  std::uint64_t seed = 0;
  std::string exclude_history = "on";
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Vocabulary vocab = load_vocab(a.vocab);
  check_vocabulary(ckpt.metadata, vocab);
  const ModelConfig mc = ckpt.metadata.at("model").get<ModelConfig>();
  const ModelParams params = params_from_store(mc, ckpt.params);
  const Dataset ds = load_dataset(a.data);
  const SplitDataset split = split_leave_one_out(ds.users);
  const auto tokens = tokenize_catalog(ds.catalog, vocab, mc.max_item_tokens);
  EvalConfig ec;
  ec.num_eval_negatives = a.negatives;
  ec.ks = parse_ks(a.ks);
  ec.seed = a.seed;
  ec.exclude_history = parse_on_off(a.exclude_history);
  ec.threads = a.threads;
  if (a.split != "val" && a.split != "test") throw ConfigError("--split must be val or test");
  const auto& examples = a.split == "val" ? split.val : split.test;
  const json metrics = to_json(evaluate_model(params, examples, tokens, ec));
  if (!a.out.empty()) write_json(a.out, metrics);
  print_json(metrics);
  return 0;
}

int cmd_grid(const std::string& manifest_path, std::size_t jobs) {
  const json j = read_json(manifest_path);
  const ExperimentManifest m = manifest_from_json(j, fs::path(manifest_path).parent_path());
  const GridSummary s = run_grid(m, jobs);
  json cells = json::array();
  for (const auto& c : s.cells)
    cells.push_back({{"id", c.id}, {"status", c.status}, {"steps_executed", c.steps_executed}, {"error", c.error}});
  print_json({{"cells", cells}, {"steps_executed", s.steps_executed()}});
  return 0;
}

int cmd_report(const std::string& dir) {
  print_json(report(dir));
  return 0;
}

struct ScalefitArgs {
  std::vector<std::string> inputs;
  std::string kind = "sigmoid", out, curve;
  bool reference = false;
};

// Points from run-log CSVs or a bare CSV with columns flops_or_N,T,metric.
int cmd_scalefit(const ScalefitArgs& a) {
  if (a.reference) {
    json j = reference_sigmoid_check();
    j["risk_limit"] = kReferenceRisk.E;
    print_json(j);
    return 0;
  }
  std::vector<SigmoidPoint> sp;
  std::vector<RiskPoint> rp;
  std::vector<std::vector<EnvelopePoint>> runs;
  for (const auto& path : a.inputs) {
    const CsvTable t = parse_csv(read_file(path));
    if (std::find(t.header.begin(), t.header.end(), "val_ndcg5") != t.header.end()) {
      const auto log = parse_run_log(read_file(path));
      std::vector<EnvelopePoint> pts;
      const RunRecord* best = nullptr;
      for (const auto& r : log) {
        pts.push_back({r.flops, r.val_ndcg5, path, static_cast<double>(r.n_nonemb), r.seen});
        if (!best || r.val_ndcg5 > best->val_ndcg5) best = &r;
      }
      if (best) rp.push_back({static_cast<double>(best->n_nonemb), best->seen, best->val_ndcg5});
      runs.push_back(std::move(pts));
    } else {
      if (t.header.size() < 3) throw DataError("'" + path + "' needs columns flops_or_N,T,metric");
      for (const auto& r : t.rows) {
        const double x = to_double(r[0]), tt = to_double(r[1]), y = to_double(r[2]);
        sp.push_back({std::log(x), y});
        rp.push_back({x, tt, y});
      }
    }
  }
  if (!runs.empty())
    for (const auto& p : extract_envelope(runs)) sp.push_back({std::log(p.flops), p.metric});
  json out;
  if (a.kind == "sigmoid") {
    const auto fit = fit_sigmoid(sp);
    out = to_json(fit);
    if (fit.fit && !a.curve.empty()) {
      double lo = sp.front().x, hi = sp.front().x;
      for (const auto& p : sp) lo = std::min(lo, p.x), hi = std::max(hi, p.x);
      std::ostringstream c;
      c.precision(17);
      c << "log_flops,predicted\n";
      for (int i = 0; i <= 100; ++i) {
        const double x = lo + (hi - lo) * i / 100.0;
        c << x << ',' << sigmoid_value(*fit.fit, x) << '\n';
      }
      write_file(a.curve, c.str());
    }
  } else if (a.kind == "risk") {
    out = to_json(fit_risk(rp));
  } else {
    throw ConfigError("--kind must be sigmoid or risk");
  }
  if (!a.out.empty()) write_json(a.out, out);
  print_json(out);
  return 0;
}

struct FinetuneArgs {
  std::string checkpoint, data, vocab, out, config, pretrain_data, pretrain_manifest;
  std::optional<double> lambda;
  std::optional<std::size_t> stage_epochs, final_epochs;
  std::optional<double> lr;
  std::size_t batch_size = 32, negatives = 100;
  std::uint64_t seed = 0;
};

int cmd_finetune(const FinetuneArgs& a) {
  FinetuneConfig fc;
  if (!a.config.empty()) fc = read_json(a.config).get<FinetuneConfig>();
  if (a.lambda) fc.lambda = *a.lambda;
  if (a.stage_epochs) fc.stage_epochs = *a.stage_epochs;
  if (a.final_epochs) fc.final_epochs = *a.final_epochs;
  if (a.lr) fc.lr = *a.lr;
  fc.validate();
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Vocabulary vocab = load_vocab(a.vocab);
  check_vocabulary(ckpt.metadata, vocab);
  const ModelConfig mc = ckpt.metadata.at("model").get<ModelConfig>();
  const ModelParams pretrained = params_from_store(mc, ckpt.params);

  const Dataset ds = load_dataset(a.data);
  if (!a.pretrain_manifest.empty()) {
    const auto leaked = leaked_users(read_json(a.pretrain_manifest), ds.users);
    if (!leaked.empty())
      std::cerr << "warning: " << leaked.size() << " downstream users also appear in the pre-training manifest (e.g. '"
                << leaked.front() << "')\n";
  }
  const SplitDataset split = split_leave_one_out(ds.users);
  const auto tokens = tokenize_catalog(ds.catalog, vocab, mc.max_item_tokens);
  const auto windows = training_windows(split.train, mc.max_seq_len);
  const NegativeSampler sampler(popularity_distribution(split, ds.catalog.size()));
  LossConfig lc;
  lc.num_negatives = a.negatives;
  TrainConfig tc;
  tc.batch_size = a.batch_size;
  tc.seed = a.seed;
  tc.base_lr = fc.lr;

  std::optional<FisherDiagonal> fisher;
  if (fc.lambda > 0) {
    if (a.pretrain_data.empty()) throw ConfigError("--pretrain-data is required for the EWC Fisher estimate (or --lambda 0)");
    const Dataset pre = load_dataset(a.pretrain_data);
    const SplitDataset psplit = split_leave_one_out(pre.users);
    const auto ptokens = tokenize_catalog(pre.catalog, vocab, mc.max_item_tokens);
    // Held-out slice: each validation prefix followed by its target.
    std::vector<std::vector<ItemIndex>> held;
    for (const auto& e : psplit.val) {
      auto seq = e.prefix;
      seq.push_back(e.target);
      if (seq.size() > mc.max_seq_len + 1) seq.erase(seq.begin(), seq.end() - static_cast<std::ptrdiff_t>(mc.max_seq_len + 1));
      held.push_back(std::move(seq));
    }
    const NegativeSampler psampler(popularity_distribution(psplit, pre.catalog.size()));
    fisher = estimate_fisher(pretrained, held, ptokens, psampler, lc, fc.fisher_samples, a.seed);
  }
  TrainData data{windows, split.val, tokens, &sampler, split.train_interactions()};
  auto res = progressive_finetune(pretrained, data, lc, tc, fc, fisher ? &*fisher : nullptr,
                                  [](std::size_t stage, const RunRecord& r, const ModelParams&) {
                                    std::cerr << "stage " << stage + 1 << ": ";
                                    log_epoch(r);
                                  });
  fs::create_directories(a.out);
  std::ostringstream log;
  write_run_log(log, res.log);
  write_file(fs::path(a.out) / "run_log.csv", log.str());
  json meta = ckpt.metadata;
  meta["finetune"] = fc;
  meta["seed"] = a.seed;
  save_checkpoint((fs::path(a.out) / "final.ckpt").string(), {res.params.store, meta});
  json stages = json::array();
  for (const auto& s : res.stages) stages.push_back({{"name", s.name}, {"epochs", s.epochs}});
  print_json({{"stages", stages}, {"epochs", res.log.size()}, {"diverged", res.diverged}});
  if (res.diverged) throw NumericError(res.divergence);
  return 0;
}

struct FlopsArgs {
  std::string config;
  double tokens = 0, context = 50, item_tokens = -1;
};

int cmd_flops(const FlopsArgs& a) {
  json cfg = read_json(a.config);
  if (cfg.contains("model")) cfg = cfg.at("model");
  const ModelConfig mc = cfg.get<ModelConfig>();
  const auto pc = count_params(mc);
  json out = to_json(count_flops(mc, a.tokens, a.context, a.item_tokens));
  out["n_nonemb"] = pc.non_embedding;
  out["n_total"] = pc.total;
  print_json(out);
  return 0;
}

struct SynthArgs {
  std::string kind = "zipf", out, config;
  std::size_t users = 32, items = 40, length = 10;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  std::vector<InteractionRecord> recs;
  if (a.kind == "zipf") {
    synthetic::ZipfCatalogConfig zc;
    if (!a.config.empty()) zc = read_json(a.config).get<synthetic::ZipfCatalogConfig>();
    zc.seed = a.seed;
    recs = synthetic::zipf_catalog_records(zc);
  } else if (a.kind == "cycle") {
    recs = synthetic::cycle_records(a.users, a.items, a.length);
  } else {
    throw ConfigError("--kind must be zipf or cycle");
  }
  std::ostringstream os;
  for (const auto& r : recs) os << record_to_json_line(r) << '\n';
  write_file(a.out, os.str());
  print_json({{"records", recs.size()}, {"seed", a.seed}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seqrec: transformer sequential recommendation with text-based item encoding"};
  app.require_subcommand(1);
  int rc = 0;

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Parse interactions, split leave-one-out, write manifests");
  c_ingest->add_option("--input", ingest.input, "JSONL interactions")->required();
  c_ingest->add_option("--out", ingest.out, "output directory")->required();
  c_ingest->add_option("--growth", ingest.growth, "user counts for a catalog-growth table");
  c_ingest->add_option("--seed", ingest.seed, "root seed");
  c_ingest->callback([&] { rc = cmd_ingest(ingest); });

  SubsampleArgs sub;
  auto* c_sub = app.add_subcommand("subsample", "Uniform user subsample without replacement");
  c_sub->add_option("--input", sub.input)->required();
  c_sub->add_option("--users", sub.users)->required();
  c_sub->add_option("--out", sub.out)->required();
  c_sub->add_option("--seed", sub.seed);
  c_sub->callback([&] { rc = cmd_subsample(sub); });

  VocabArgs voc;
  auto* c_voc = app.add_subcommand("vocab", "Train the subword vocabulary on item text");
  c_voc->add_option("--input", voc.input)->required();
  c_voc->add_option("--out", voc.out)->required();
  c_voc->add_option("--size", voc.size);
  c_voc->add_option("--seed", voc.seed);
  c_voc->callback([&] { rc = cmd_vocab(voc); });

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train one configuration");
  c_tr->add_option("--config", tr.config, "cell JSON: {model, loss, train}")->required();
  c_tr->add_option("--data", tr.data)->required();
  c_tr->add_option("--out", tr.out)->required();
  c_tr->add_option("--vocab", tr.vocab);
  c_tr->add_option("--vocab-size", tr.vocab_size);
  c_tr->add_option("--seed", tr.seed);
  c_tr->add_option("--negatives", tr.negatives);
  c_tr->add_option("--temperature", tr.temperature);
  c_tr->add_option("--logq", tr.logq, "on|off");
  c_tr->add_option("--epochs", tr.epochs);
  c_tr->add_option("--lr", tr.lr);
  c_tr->add_option("--batch-size", tr.batch_size);
  c_tr->callback([&] { rc = cmd_train(tr); });

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Evaluate a checkpoint with sampled negatives");
  c_ev->add_option("--checkpoint", ev.checkpoint)->required();
  c_ev->add_option("--data", ev.data)->required();
  c_ev->add_option("--vocab", ev.vocab)->required();
  c_ev->add_option("--split", ev.split, "val|test");
  c_ev->add_option("--negatives", ev.negatives);
  c_ev->add_option("--k", ev.ks, "comma-separated cutoffs");
  c_ev->add_option("--seed", ev.seed);
  c_ev->add_option("--exclude-history", ev.exclude_history, "on|off");
  c_ev->add_option("--threads", ev.threads);
  c_ev->add_option("--out", ev.out);
  c_ev->callback([&] { rc = cmd_eval(ev); });

  std::string manifest;
  std::size_t jobs = 1;
  auto* c_grid = app.add_subcommand("grid", "Run every cell of an experiment manifest (resumable)");
  c_grid->add_option("--manifest", manifest)->required();
  c_grid->add_option("--jobs", jobs);
  c_grid->callback([&] { rc = cmd_grid(manifest, jobs); });

  std::string report_dir;
  auto* c_rep = app.add_subcommand("report", "Envelope, scaling fits and plot tables for a grid output");
  c_rep->add_option("--dir", report_dir)->required();
  c_rep->callback([&] { rc = cmd_report(report_dir); });

  ScalefitArgs sf;
  auto* c_sf = app.add_subcommand("scalefit", "Fit the sigmoid or risk scaling law");
  c_sf->add_option("--input", sf.inputs, "run-log CSVs or a bare flops_or_N,T,metric CSV");
  c_sf->add_option("--kind", sf.kind, "sigmoid|risk");
  c_sf->add_option("--out", sf.out);
  c_sf->add_option("--curve", sf.curve, "curve samples CSV (sigmoid)");
  c_sf->add_flag("--reference", sf.reference, "evaluate the reference coefficients");
  c_sf->callback([&] {
    if (!sf.reference && sf.inputs.empty()) throw ConfigError("scalefit needs --input or --reference");
    rc = cmd_scalefit(sf);
  });

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Progressive unfreezing with an EWC penalty");
  c_ft->add_option("--checkpoint", ft.checkpoint)->required();
  c_ft->add_option("--data", ft.data)->required();
  c_ft->add_option("--vocab", ft.vocab)->required();
  c_ft->add_option("--out", ft.out)->required();
  c_ft->add_option("--config", ft.config);
  c_ft->add_option("--pretrain-data", ft.pretrain_data);
  c_ft->add_option("--pretrain-manifest", ft.pretrain_manifest);
  c_ft->add_option("--lambda", ft.lambda);
  c_ft->add_option("--stage-epochs", ft.stage_epochs);
  c_ft->add_option("--final-epochs", ft.final_epochs);
  c_ft->add_option("--lr", ft.lr);
  c_ft->add_option("--batch-size", ft.batch_size);
  c_ft->add_option("--negatives", ft.negatives);
  c_ft->add_option("--seed", ft.seed);
  c_ft->callback([&] { rc = cmd_finetune(ft); });

  FlopsArgs fl;
  auto* c_fl = app.add_subcommand("flops", "Parameter and FLOPs accounting for a model config");
  c_fl->add_option("--config", fl.config)->required();
  c_fl->add_option("--tokens", fl.tokens)->required();
  c_fl->add_option("--context", fl.context);
  c_fl->add_option("--item-tokens", fl.item_tokens);
  c_fl->callback([&] { rc = cmd_flops(fl); });

  SynthArgs sy;
  auto* c_sy = app.add_subcommand("synth", "Write a synthetic interaction log");
  c_sy->add_option("--kind", sy.kind, "zipf|cycle");
  c_sy->add_option("--out", sy.out)->required();
  c_sy->add_option("--config", sy.config, "zipf generator JSON");
  c_sy->add_option("--users", sy.users);
  c_sy->add_option("--items", sy.items);
  c_sy->add_option("--length", sy.length);
  c_sy->add_option("--seed", sy.seed);
  c_sy->callback([&] { rc = cmd_synth(sy); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return rc;
}
