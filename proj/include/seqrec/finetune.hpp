// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqrec/common.hpp"
#include "seqrec/model.hpp"
#include "seqrec/objective.hpp"
#include "seqrec/train.hpp"

namespace seqrec {

struct FinetuneConfig {
  std::size_t stage_epochs = 10;
  std::size_t final_epochs = 50;
  double lr = 1e-4;
  double lambda = 100;
  std::size_t fisher_samples = 256;
  // Positional embeddings and the output head train from the first stage.
  bool position_with_first_stage = true;

  void validate() const {
    if (stage_epochs == 0 || final_epochs == 0) throw ConfigError("fine-tune epoch counts must be >= 1");
    if (!(lr > 0)) throw ConfigError("fine-tune lr must be positive");
    if (lambda < 0) throw ConfigError("lambda must be non-negative");
    if (fisher_samples == 0) throw ConfigError("fisher_samples must be >= 1");
  }
};

inline void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  c.stage_epochs = j.value("stage_epochs", std::size_t{10});
  c.final_epochs = j.value("final_epochs", std::size_t{50});
  c.lr = j.value("lr", 1e-4);
  c.lambda = j.value("lambda", 100.0);
  c.fisher_samples = j.value("fisher_samples", std::size_t{256});
  c.position_with_first_stage = j.value("position_with_first_stage", true);
}

inline void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = {{"stage_epochs", c.stage_epochs}, {"final_epochs", c.final_epochs},
       {"lr", c.lr},                     {"lambda", c.lambda},
       {"fisher_samples", c.fisher_samples}, {"position_with_first_stage", c.position_with_first_stage}};
}

/// Diagonal Fisher values and the anchor they were estimated at.
struct FisherDiagonal {
  ParamStore fisher;
  ParamStore anchor;
};

/// (λ/2) Σ F (θ − θ*)², accumulated in double.
template <class T>
double ewc_penalty(const BasicParamStore<T>& theta, const BasicParamStore<T>& anchor, const BasicParamStore<T>& fisher,
                   double lambda) {
  if (!theta.congruent(anchor) || !theta.congruent(fisher))
    throw NumericError("EWC penalty: parameter, anchor and Fisher arrays are not shape-congruent");
  double acc = 0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const auto t = theta[i].values(), a = anchor[i].values(), f = fisher[i].values();
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double diff = static_cast<double>(t[k]) - static_cast<double>(a[k]);
      acc += static_cast<double>(f[k]) * diff * diff;
    }
  }
  return 0.5 * lambda * acc;
}

/// Penalty value plus λ F (θ − θ*) added into the gradient of every
/// trainable array.
inline double ewc_accumulate(const ParamStore& theta, const FisherDiagonal& fd, double lambda, ParamStore& grads,
                             std::span<const char> trainable) {
  const double value = ewc_penalty(theta, fd.anchor, fd.fisher, lambda);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    const auto t = theta[i].values(), a = fd.anchor[i].values(), f = fd.fisher[i].values();
    auto g = grads[i].values();
    for (std::size_t k = 0; k < t.size(); ++k)
      g[k] += static_cast<float>(lambda * static_cast<double>(f[k]) * (static_cast<double>(t[k]) - a[k]));
  }
  return value;
}

/// The penalty as graph nodes over parameter leaves `theta` (aligned with the
/// anchor and Fisher stores). Returns a {1} scalar.
template <class T>
typename BasicGraph<T>::Var ewc_penalty_graph(BasicGraph<T>& g, std::span<const typename BasicGraph<T>::Var> theta,
                                              const BasicParamStore<T>& anchor, const BasicParamStore<T>& fisher,
                                              double lambda) {
  using Var = typename BasicGraph<T>::Var;
  if (theta.size() != anchor.size() || !anchor.congruent(fisher))
    throw NumericError("EWC penalty: parameter, anchor and Fisher arrays are not shape-congruent");
  std::vector<Var> terms;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (g.shape(theta[i]) != anchor[i].shape())
      throw NumericError("EWC penalty: array '" + anchor.name(i) + "' has shape " + shape_string(g.shape(theta[i])) +
                         ", anchor has " + shape_string(anchor[i].shape()));
    BasicTensor<T> neg = anchor[i];
    for (T& v : neg.values()) v = -v;
    Var diff = g.add(theta[i], g.constant(std::move(neg)));
    Var w = g.multiply(g.multiply(diff, diff), g.constant(fisher[i]));
    terms.push_back(g.reshape(g.sum(w), {1, 1}));
  }
  if (terms.empty()) throw NumericError("EWC penalty over zero arrays");
  Var total = terms.size() == 1 ? terms[0] : g.concat(terms, 0);
  return g.scale(g.sum(total), static_cast<T>(0.5 * lambda));
}

/// Mean of squared per-sample gradients.
inline ParamStore fisher_from_gradients(std::span<const ParamStore> per_sample) {
  if (per_sample.empty()) throw ConfigError("Fisher estimate needs at least one sample");
  ParamStore out = per_sample[0].zeros_like();
  for (const auto& gs : per_sample) {
    if (!gs.congruent(out)) throw NumericError("per-sample gradients are not shape-congruent");
    for (std::size_t i = 0; i < gs.size(); ++i) {
      auto o = out[i].values();
      const auto g = gs[i].values();
      for (std::size_t k = 0; k < g.size(); ++k) o[k] += g[k] * g[k];
    }
  }
  const float inv = 1.0f / static_cast<float>(per_sample.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    for (float& v : out[i].values()) v *= inv;
  return out;
}

/// Squared per-sequence gradients of the training loss at `params`, averaged
/// over up to `samples` sequences chosen by a seeded shuffle.
inline FisherDiagonal estimate_fisher(const ModelParams& params, std::span<const std::vector<ItemIndex>> sequences,
                                      std::span<const std::vector<TokenId>> item_tokens, const NegativeSampler& sampler,
                                      const LossConfig& loss_cfg, std::size_t samples, std::uint64_t seed) {
  if (samples == 0) throw ConfigError("fisher_samples must be >= 1");
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_stream(seed, {stream::kFisher});
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(order.size(), samples));
  FisherDiagonal fd{params.store.zeros_like(), params.store};
  if (order.empty()) return fd;
  ParamStore grads = params.store.zeros_like();
  for (std::size_t idx : order) {
    const auto& seq = sequences[idx];
    if (seq.size() < 2) continue;
    Rng nrng = make_stream(seed, {stream::kFisher, static_cast<std::uint64_t>(idx)});
    auto negs = draw_sequence_negatives(sampler, seq, loss_cfg, nrng);
    const LossSequence one[] = {{seq, negs}};
    grads.zero();
    Graph g;
    auto bound = bind_params(g, params, &grads);
    auto loss = sequence_loss(g, params, bound, std::span<const LossSequence>(one), item_tokens, loss_cfg);
    g.forward();
    g.backward(loss);
    for (std::size_t i = 0; i < grads.size(); ++i) {
      auto f = fd.fisher[i].values();
      const auto gv = grads[i].values();
      for (std::size_t k = 0; k < gv.size(); ++k) f[k] += gv[k] * gv[k];
    }
  }
  const float inv = 1.0f / static_cast<float>(order.size());
  for (std::size_t i = 0; i < fd.fisher.size(); ++i)
    for (float& v : fd.fisher[i].values()) v *= inv;
  return fd;
}

struct UnfreezeStage {
  std::string name;
  std::size_t epochs = 0;
  std::vector<char> trainable;  // aligned with the parameter store
};

/// Top layer first; the last stage adds the token embeddings.
inline std::vector<UnfreezeStage> unfreeze_schedule(const ModelParams& params, const FinetuneConfig& cfg) {
  const std::size_t n_layers = params.config.n_layers;
  std::vector<char> open(params.store.size(), 0);
  auto open_if = [&](auto pred) {
    for (std::size_t i = 0; i < params.info.size(); ++i)
      if (pred(params.info[i])) open[i] = 1;
  };
  std::vector<UnfreezeStage> stages;
  for (std::size_t s = 0; s < n_layers; ++s) {
    const int layer = static_cast<int>(n_layers - 1 - s);
    open_if([&](const ParamInfo& pi) { return pi.group == ParamGroup::kLayer && pi.layer == layer; });
    if (s == 0) {
      open_if([](const ParamInfo& pi) { return pi.group == ParamGroup::kFinal; });
      if (cfg.position_with_first_stage)
        open_if([](const ParamInfo& pi) { return pi.group == ParamGroup::kPositionEmbedding; });
    }
    stages.push_back({"layer " + std::to_string(layer + 1), cfg.stage_epochs, open});
  }
  open_if([](const ParamInfo& pi) { return pi.group != ParamGroup::kTokenEmbedding; });
  open_if([](const ParamInfo& pi) { return pi.group == ParamGroup::kTokenEmbedding; });
  stages.push_back({"token embeddings", cfg.final_epochs, open});
  return stages;
}

struct FinetuneResult {
  ModelParams params;
  std::vector<RunRecord> log;
  std::vector<UnfreezeStage> stages;
  bool diverged = false;
  std::string divergence;
};

using StageObserver = std::function<void(std::size_t stage, const RunRecord&, const ModelParams&)>;

/// Progressive unfreezing with an EWC penalty anchored at the pre-trained
/// weights. `fisher` may be null, which disables the penalty.
inline FinetuneResult progressive_finetune(const ModelParams& pretrained, const TrainData& data,
                                           const LossConfig& loss_cfg, const TrainConfig& train_cfg,
                                           const FinetuneConfig& cfg, const FisherDiagonal* fisher,
                                           StageObserver observer = {}) {
  cfg.validate();
  if (fisher && (!fisher->fisher.congruent(pretrained.store) || !fisher->anchor.congruent(pretrained.store)))
    throw NumericError("Fisher diagonal is not shape-congruent with the model");
  FinetuneResult out;
  out.params = pretrained;
  out.stages = unfreeze_schedule(pretrained, cfg);
  std::size_t epochs_done = 0, steps_done = 0;
  double flops = 0;
  for (std::size_t s = 0; s < out.stages.size(); ++s) {
    const auto& stage = out.stages[s];
    StageOptions opt;
    opt.epochs = stage.epochs;
    opt.lr = cfg.lr;
    opt.trainable = stage.trainable;
    opt.epoch_offset = epochs_done;
    opt.step_offset = steps_done;
    opt.flops_offset = flops;
    if (fisher && cfg.lambda > 0) {
      opt.penalty = [fisher, lambda = cfg.lambda](const ModelParams& p, ParamStore& g, std::span<const char> tr) {
        return ewc_accumulate(p.store, *fisher, lambda, g, tr);
      };
    }
    if (observer)
      opt.on_epoch = [&, s](const RunRecord& r) { observer(s, r, out.params); };
    auto res = train_stage(out.params, data, loss_cfg, train_cfg, opt);
    out.log.insert(out.log.end(), res.log.begin(), res.log.end());
    epochs_done += stage.epochs;
    steps_done += res.steps;
    flops = res.flops;
    if (res.diverged) {
      out.diverged = true;
      out.divergence = res.divergence;
      break;
    }
  }
  return out;
}

/// Throws unless the checkpoint was trained with this vocabulary.
inline void check_vocabulary(const nlohmann::json& checkpoint_metadata, const Vocabulary& vocab) {
  const std::string have = hex64(vocab.hash());
  const std::string want = checkpoint_metadata.value("vocab_hash", std::string{});
  if (want.empty()) throw DataError("checkpoint does not record its vocabulary hash");
  if (want != have)
    throw DataError("vocabulary mismatch: checkpoint was trained with vocab " + want + ", downstream uses " + have);
}

/// Downstream user ids that also appear in a pre-training split manifest.
inline std::vector<std::string> leaked_users(const nlohmann::json& pretrain_manifest,
                                             std::span<const UserSequence> downstream) {
  std::set<std::string> seen;
  if (pretrain_manifest.contains("users"))
    for (const auto& u : pretrain_manifest.at("users"))
      seen.insert(u.is_string() ? u.get<std::string>() : u.at("user_id").get<std::string>());
  std::vector<std::string> out;
  for (const auto& u : downstream)
    if (seen.count(u.user_id)) out.push_back(u.user_id);
  return out;
}

}  // namespace seqrec
