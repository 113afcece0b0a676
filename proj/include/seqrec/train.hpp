// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqrec/common.hpp"
#include "seqrec/evaluate.hpp"
#include "seqrec/ingest.hpp"
#include "seqrec/model.hpp"
#include "seqrec/objective.hpp"

namespace seqrec {

struct TrainConfig {
  double base_lr = 1e-4;
  std::size_t epochs = 50;
  double clip_norm = 1.0;
  double weight_decay = 1e-5;
  std::size_t batch_size = 0;  // required
  std::uint64_t seed = 0;
  double warmup_fraction = 1.0 / 3.0;
  // Validation: a deterministic subset of at most this many users (0 = all).
  std::size_t max_val_users = 0;
  std::size_t eval_negatives = 10000;
  std::size_t eval_threads = 1;
  bool test_eval = true;  // score final and best params on the test split

  void validate() const {
    if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size is required and must be >= 1");
    if (!(warmup_fraction > 0 && warmup_fraction < 1)) throw ConfigError("warmup_fraction must lie in (0, 1)");
    if (eval_negatives == 0) throw ConfigError("eval_negatives must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"base_lr", c.base_lr},           {"epochs", c.epochs},
       {"clip_norm", c.clip_norm},       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},     {"seed", c.seed},
       {"warmup_fraction", c.warmup_fraction}, {"max_val_users", c.max_val_users},
       {"eval_negatives", c.eval_negatives}, {"test_eval", c.test_eval}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.base_lr = j.value("base_lr", 1e-4);
  c.epochs = j.value("epochs", std::size_t{50});
  c.clip_norm = j.value("clip_norm", 1.0);
  c.weight_decay = j.value("weight_decay", 1e-5);
  if (!j.contains("batch_size")) throw ConfigError("train config: batch_size is required");
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.value("seed", std::uint64_t{0});
  c.warmup_fraction = j.value("warmup_fraction", 1.0 / 3.0);
  c.max_val_users = j.value("max_val_users", std::size_t{0});
  c.eval_negatives = j.value("eval_negatives", std::size_t{10000});
  c.eval_threads = j.value("eval_threads", std::size_t{1});
  c.test_eval = j.value("test_eval", true);
}

/// Linear ramp to base_lr over the first warmup_fraction of steps, then
/// cosine decay to zero at total_steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction) {
  if (total_steps == 0) return base_lr;
  step = std::min(step, total_steps);
  const double warm = warmup_fraction * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s <= warm) return warm > 0 ? base_lr * s / warm : base_lr;
  const double progress = (s - warm) / (static_cast<double>(total_steps) - warm);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Scales `grads` in place so their global norm is at most clip_norm.
/// Returns the norm before clipping.
inline double clip_gradients(ParamStore& grads, double clip_norm) {
  const double norm = grads.global_norm();
  if (std::isfinite(norm) && norm > clip_norm) {
    const float f = static_cast<float>(clip_norm / norm);
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (float& g : grads[i].values()) g *= f;
  }
  return norm;
}

/// Adam moments with decoupled weight decay.
class AdamW {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamW(const ModelParams& params, double weight_decay)
      : m_(params.store.zeros_like()), v_(params.store.zeros_like()), weight_decay_(weight_decay) {}

  std::size_t steps() const { return t_; }

  /// One update. Arrays whose `trainable` flag is false are not touched.
  void step(ModelParams& params, const ParamStore& grads, double lr, std::span<const char> trainable = {}) {
    ++t_;
    const double bc1 = 1 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1 - std::pow(beta2, static_cast<double>(t_));
    const std::size_t d = params.config.hidden_dim;
    for (std::size_t i = 0; i < params.store.size(); ++i) {
      if (!trainable.empty() && !trainable[i]) continue;
      auto w = params.store[i].values();
      auto g = grads[i].values();
      auto m = m_[i].values();
      auto v = v_[i].values();
      const bool decay = params.info[i].decay && weight_decay_ > 0;
      const std::size_t skip_end = i == params.layout.tok_emb ? d : 0;  // PAD row is never decayed
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        const double mk = beta1 * m[k] + (1 - beta1) * gk;
        const double vk = beta2 * v[k] + (1 - beta2) * gk * gk;
        m[k] = static_cast<float>(mk);
        v[k] = static_cast<float>(vk);
        double upd = (mk / bc1) / (std::sqrt(vk / bc2) + eps);
        if (decay && k >= skip_end) upd += weight_decay_ * w[k];
        w[k] = static_cast<float>(w[k] - lr * upd);
      }
    }
  }

 private:
  ParamStore m_, v_;
  double weight_decay_;
  std::size_t t_ = 0;
};

struct RunRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double flops = 0;
  double seen = 0;  // T
  std::size_t n_nonemb = 0;
  double train_loss = 0;
  double val_ndcg5 = 0;
  double val_hit5 = 0;
  double lr = 0;
  double wall_seconds = 0;
};

inline constexpr const char* kRunLogHeader = "step,epoch,flops,T,N_nonemb,train_loss,val_ndcg5,val_hit5,lr";

inline void write_run_log(std::ostream& os, std::span<const RunRecord> log) {
  os << kRunLogHeader << '\n';
  os.precision(17);
  for (const auto& r : log)
    os << r.step << ',' << r.epoch << ',' << r.flops << ',' << r.seen << ',' << r.n_nonemb << ',' << r.train_loss
       << ',' << r.val_ndcg5 << ',' << r.val_hit5 << ',' << r.lr << '\n';
}

/// Windowed training sequences: the trailing max_seq_len+1 items of each
/// train history with at least two items.
inline std::vector<std::vector<ItemIndex>> training_windows(std::span<const TrainSequence> train, std::size_t max_seq_len) {
  std::vector<std::vector<ItemIndex>> out;
  out.reserve(train.size());
  for (const auto& s : train) {
    if (s.items.size() < 2) continue;
    const std::size_t len = std::min(s.items.size(), max_seq_len + 1);
    out.emplace_back(s.items.end() - static_cast<std::ptrdiff_t>(len), s.items.end());
  }
  return out;
}

/// Deterministic validation subset: every user when max_users is 0 or
/// larger than the split, otherwise an evenly strided selection.
inline std::vector<HeldOutExample> validation_subset(std::span<const HeldOutExample> val, std::size_t max_users) {
  if (max_users == 0 || max_users >= val.size()) return {val.begin(), val.end()};
  std::vector<HeldOutExample> out;
  out.reserve(max_users);
  for (std::size_t i = 0; i < max_users; ++i) out.push_back(val[i * val.size() / max_users]);
  return out;
}

inline double mean_item_tokens(std::span<const std::vector<TokenId>> item_tokens) {
  if (item_tokens.empty()) return 0;
  double n = 0;
  for (const auto& t : item_tokens) n += static_cast<double>(t.size());
  return n / static_cast<double>(item_tokens.size());
}

/// Adds a penalty to the loss: returns its value and accumulates its
/// gradient into `grads` for trainable arrays.
using PenaltyFn = std::function<double(const ModelParams&, ParamStore& grads, std::span<const char> trainable)>;

struct StageOptions {
  std::size_t epochs = 1;
  double lr = 1e-4;
  std::vector<char> trainable;  // empty: everything trains
  PenaltyFn penalty;
  std::size_t epoch_offset = 0;  // epochs already run before this stage (for T and stream keys)
  std::size_t step_offset = 0;
  double flops_offset = 0;
  std::function<void(const RunRecord&)> on_epoch;
  // Evaluate the validation split after every epoch.
  bool validate_each_epoch = true;
};

struct StageResult {
  std::vector<RunRecord> log;
  bool diverged = false;
  std::string divergence;
  std::optional<ModelParams> best;  // params at the best validation epoch
  double best_val = -1;
  std::size_t best_epoch = 0;
  std::size_t steps = 0;
  double flops = 0;
};

struct TrainData {
  std::span<const std::vector<ItemIndex>> windows;
  std::span<const HeldOutExample> val;
  std::span<const std::vector<TokenId>> item_tokens;
  const NegativeSampler* sampler = nullptr;
  std::size_t train_interactions = 0;
};

/// Trains `params` in place for one stage with a fresh optimizer and a
/// one-cycle schedule. On a non-finite loss or gradient the offending update
/// is skipped, params keep their last finite state and the stage stops.
inline StageResult train_stage(ModelParams& params, const TrainData& data, const LossConfig& loss_cfg,
                               const TrainConfig& cfg, const StageOptions& opt) {
  cfg.validate();
  loss_cfg.validate();
  if (data.windows.empty()) throw DataError("no training sequence has two or more items");
  if (!data.sampler) throw ConfigError("train stage needs a negative sampler");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n_seq = data.windows.size();
  const std::size_t batches_per_epoch = (n_seq + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches_per_epoch * opt.epochs;
  const ModelConfig& mc = params.config;
  const std::size_t n_nonemb = count_params(mc).non_embedding;
  const double tok_per_item = mean_item_tokens(data.item_tokens);
  const auto val = validation_subset(data.val, cfg.max_val_users);
  EvalConfig ecfg;
  ecfg.num_eval_negatives = cfg.eval_negatives;
  ecfg.ks = {5};
  ecfg.seed = cfg.seed;
  ecfg.threads = cfg.eval_threads;

  AdamW adam(params, cfg.weight_decay);
  ParamStore grads = params.store.zeros_like();
  StageResult res;
  double flops = opt.flops_offset;
  std::size_t step = 0;
  std::vector<std::size_t> order(n_seq);
  std::vector<std::vector<NegativeSample>> negs;
  std::vector<LossSequence> batch;

  for (std::size_t e = 0; e < opt.epochs && !res.diverged; ++e) {
    const std::size_t epoch = opt.epoch_offset + e;  // zero-based global epoch
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = make_stream(cfg.seed, {stream::kShuffle, epoch});
    std::shuffle(order.begin(), order.end(), shuffle);
    double loss_sum = 0;
    std::size_t loss_batches = 0;
    double lr = 0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n_seq, lo + cfg.batch_size);
      negs.assign(hi - lo, {});
      batch.clear();
      double batch_flops = 0;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& w = data.windows[order[i]];
        Rng rng = negatives_stream(cfg.seed, epoch, order[i]);
        negs[i - lo] = draw_sequence_negatives(*data.sampler, w, loss_cfg, rng);
        const double positions = static_cast<double>(w.size() - 1);
        batch_flops += train_flops(static_cast<double>(n_nonemb), static_cast<double>(mc.n_layers),
                                   static_cast<double>(mc.hidden_dim), tok_per_item, positions, positions);
      }
      for (std::size_t i = lo; i < hi; ++i) batch.push_back({data.windows[order[i]], negs[i - lo]});

      grads.zero();
      Graph g;
      auto bound = bind_params(g, params, &grads, opt.trainable);
      auto loss = sequence_loss(g, params, bound, std::span<const LossSequence>(batch), data.item_tokens, loss_cfg);
      g.forward();
      double value = g.value(loss).data()[0];
      if (std::isfinite(value)) g.backward(loss);
      if (opt.penalty) value += opt.penalty(params, grads, opt.trainable);
      const double norm = grads.global_norm();
      if (!std::isfinite(value) || !std::isfinite(norm)) {
        res.diverged = true;
        res.divergence = "non-finite " + std::string(std::isfinite(value) ? "gradient" : "loss") + " at epoch " +
                         std::to_string(epoch + 1) + ", step " + std::to_string(opt.step_offset + step + 1);
        break;
      }
      clip_gradients(grads, cfg.clip_norm);
      lr = lr_schedule(step + 1, total_steps, opt.lr, cfg.warmup_fraction);
      adam.step(params, grads, lr, opt.trainable);
      ++step;
      flops += batch_flops;
      loss_sum += value;
      ++loss_batches;
    }
    if (res.diverged) break;
    RunRecord r;
    r.step = opt.step_offset + step;
    r.epoch = epoch + 1;
    r.flops = flops;
    r.seen = static_cast<double>(epoch + 1) * static_cast<double>(data.train_interactions);
    r.n_nonemb = n_nonemb;
    r.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(1, loss_batches));
    r.lr = lr;
    if (opt.validate_each_epoch && !val.empty()) {
      const auto m = evaluate_model(params, val, data.item_tokens, ecfg);
      r.val_ndcg5 = m.ndcg_at(5);
      r.val_hit5 = m.hit_at(5);
      if (r.val_ndcg5 > res.best_val) {
        res.best_val = r.val_ndcg5;
        res.best_epoch = r.epoch;
        res.best = params;
      }
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.log.push_back(r);
    if (opt.on_epoch) opt.on_epoch(r);
  }
  res.steps = step;
  res.flops = flops;
  return res;
}

struct TrainResult {
  ModelParams final_params;
  std::optional<ModelParams> best_params;
  std::vector<RunRecord> log;
  std::size_t best_epoch = 0;
  double best_val_ndcg5 = 0;
  std::optional<MetricSummary> test_final;
  std::optional<MetricSummary> test_best;
  bool diverged = false;
  std::string divergence;
  std::size_t steps = 0;
};

struct TrainInputs {
  const SplitDataset* split = nullptr;
  std::span<const std::vector<TokenId>> item_tokens;
  std::size_t catalog_size = 0;
};

/// Full training run: init, one-cycle schedule over every epoch, per-epoch
/// validation, and test evaluation of the final and best-validation params.
inline TrainResult train(const TrainInputs& in, const ModelConfig& mc, const LossConfig& lc, const TrainConfig& tc,
                         std::function<void(const RunRecord&)> on_epoch = {}, const ModelParams* init = nullptr) {
  mc.validate();
  if (!in.split || in.split->train.empty()) throw DataError("training split is empty");
  if (in.item_tokens.size() != in.catalog_size)
    throw DataError("tokenized catalog has " + std::to_string(in.item_tokens.size()) + " items, expected " +
                    std::to_string(in.catalog_size));
  const auto windows = training_windows(in.split->train, mc.max_seq_len);
  const auto pop = popularity_distribution(*in.split, in.catalog_size);
  const NegativeSampler sampler(pop);
  TrainData data{windows, in.split->val, in.item_tokens, &sampler, in.split->train_interactions()};
  ModelParams params = init ? *init : init_params(mc, tc.seed);
  StageOptions opt;
  opt.epochs = tc.epochs;
  opt.lr = tc.base_lr;
  opt.on_epoch = std::move(on_epoch);
  auto stage = train_stage(params, data, lc, tc, opt);

  TrainResult out;
  out.final_params = std::move(params);
  out.best_params = std::move(stage.best);
  out.log = std::move(stage.log);
  out.best_epoch = stage.best_epoch;
  out.best_val_ndcg5 = std::max(0.0, stage.best_val);
  out.diverged = stage.diverged;
  out.divergence = stage.divergence;
  out.steps = stage.steps;
  if (tc.test_eval && !out.diverged && !in.split->test.empty()) {
    EvalConfig ecfg;
    ecfg.num_eval_negatives = tc.eval_negatives;
    ecfg.ks = {1, 5, 10};
    ecfg.seed = tc.seed;
    ecfg.threads = tc.eval_threads;
    out.test_final = evaluate_model(out.final_params, in.split->test, in.item_tokens, ecfg);
    if (out.best_params) out.test_best = evaluate_model(*out.best_params, in.split->test, in.item_tokens, ecfg);
  }
  return out;
}

}  // namespace seqrec
