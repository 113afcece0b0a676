// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqrec/common.hpp"
#include "seqrec/numerics/graph.hpp"
#include "seqrec/numerics/params.hpp"
#include "seqrec/tokenize.hpp"

namespace seqrec {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 2;
  std::size_t hidden_dim = 64;
  std::size_t max_seq_len = 50;
  std::size_t vocab_size = kDefaultVocabSize;
  std::size_t max_item_tokens = kDefaultMaxItemTokens;
  double temperature = 1.0;

  std::size_t head_dim() const { return hidden_dim / n_heads; }

  void validate() const {
    if (n_layers == 0 || n_heads == 0 || hidden_dim == 0 || max_seq_len == 0 || vocab_size == 0 ||
        max_item_tokens == 0)
      throw ConfigError("model config counts must all be >= 1");
    if (hidden_dim % n_heads != 0)
      throw ConfigError("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
       {"hidden_dim", c.hidden_dim},   {"max_seq_len", c.max_seq_len},
       {"vocab_size", c.vocab_size},   {"max_item_tokens", c.max_item_tokens},
       {"temperature", c.temperature}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.max_seq_len = j.value("max_seq_len", std::size_t{50});
  c.vocab_size = j.value("vocab_size", kDefaultVocabSize);
  c.max_item_tokens = j.value("max_item_tokens", kDefaultMaxItemTokens);
  c.temperature = j.value("temperature", 1.0);
}

/// The eight architectures of the scaling study, largest first.
inline std::vector<ModelConfig> reference_architectures(std::size_t vocab_size = kDefaultVocabSize) {
  const std::size_t layers[] = {24, 16, 8, 8, 8, 4, 2, 4};
  const std::size_t heads[] = {4, 4, 4, 4, 2, 2, 2, 2};
  const std::size_t dims[] = {256, 256, 256, 128, 128, 128, 128, 64};
  std::vector<ModelConfig> out;
  for (int i = 0; i < 8; ++i) {
    ModelConfig c;
    c.n_layers = layers[i];
    c.n_heads = heads[i];
    c.hidden_dim = dims[i];
    c.vocab_size = vocab_size;
    out.push_back(c);
  }
  return out;
}

/// Positions of every array in the parameter store.
struct ParamLayout {
  struct Head {
    std::size_t q_w, q_b, k_w, k_b, v_w, v_b;
  };
  struct Layer {
    std::size_t ln1_g, ln1_b;
    std::vector<Head> heads;
    std::size_t out_w, out_b;
    std::size_t ln2_g, ln2_b;
    std::size_t fc1_w, fc1_b, fc2_w, fc2_b;
  };
  std::size_t tok_emb = 0;
  std::size_t pos_emb = 1;
  std::vector<Layer> layers;
  std::size_t final_ln_g = 0, final_ln_b = 0, proj_w = 0, proj_b = 0;
};

/// Which unfreezing group an array belongs to.
enum class ParamGroup { kTokenEmbedding, kPositionEmbedding, kLayer, kFinal };

struct ParamInfo {
  ParamGroup group;
  int layer = -1;            // for kLayer
  bool decay = true;         // decoupled weight decay applies
  bool layer_norm_gain = false;
};

template <class T>
struct BasicModelParams {
  ModelConfig config;
  BasicParamStore<T> store;
  ParamLayout layout;
  std::vector<ParamInfo> info;  // aligned with store

  template <class U>
  BasicModelParams<U> cast() const {
    return {config, store.template cast<U>(), layout, info};
  }
};

using ModelParams = BasicModelParams<float>;

inline constexpr double kInitStd = 0.02;

namespace detail {

template <class T>
struct ParamBuilder {
  BasicParamStore<T>& store;
  std::vector<ParamInfo>& info;
  std::size_t add(std::string name, Shape shape, ParamInfo pi) {
    info.push_back(pi);
    return store.add(std::move(name), BasicTensor<T>(std::move(shape)));
  }
};

}  // namespace detail

/// Allocates the arrays of `config` (all zeros) and records the layout.
template <class T>
BasicModelParams<T> allocate_params(const ModelConfig& config) {
  config.validate();
  BasicModelParams<T> p;
  p.config = config;
  detail::ParamBuilder<T> b{p.store, p.info};
  const std::size_t d = config.hidden_dim, dh = config.head_dim();
  const ParamInfo emb{ParamGroup::kTokenEmbedding};
  p.layout.tok_emb = b.add("tok_emb", {config.vocab_size, d}, emb);
  p.layout.pos_emb = b.add("pos_emb", {config.max_seq_len, d}, {ParamGroup::kPositionEmbedding});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    const ParamInfo w{ParamGroup::kLayer, static_cast<int>(l)};
    ParamInfo gain = w;
    gain.decay = false;
    gain.layer_norm_gain = true;
    ParamLayout::Layer L;
    L.ln1_g = b.add(pre + "ln1.gain", {d}, gain);
    L.ln1_b = b.add(pre + "ln1.bias", {d}, w);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      const std::string hp = pre + "attn.head" + std::to_string(h) + ".";
      ParamLayout::Head H;
      H.q_w = b.add(hp + "q.weight", {d, dh}, w);
      H.q_b = b.add(hp + "q.bias", {dh}, w);
      H.k_w = b.add(hp + "k.weight", {d, dh}, w);
      H.k_b = b.add(hp + "k.bias", {dh}, w);
      H.v_w = b.add(hp + "v.weight", {d, dh}, w);
      H.v_b = b.add(hp + "v.bias", {dh}, w);
      L.heads.push_back(H);
    }
    L.out_w = b.add(pre + "attn.out.weight", {d, d}, w);
    L.out_b = b.add(pre + "attn.out.bias", {d}, w);
    L.ln2_g = b.add(pre + "ln2.gain", {d}, gain);
    L.ln2_b = b.add(pre + "ln2.bias", {d}, w);
    L.fc1_w = b.add(pre + "mlp.fc1.weight", {d, 4 * d}, w);
    L.fc1_b = b.add(pre + "mlp.fc1.bias", {4 * d}, w);
    L.fc2_w = b.add(pre + "mlp.fc2.weight", {4 * d, d}, w);
    L.fc2_b = b.add(pre + "mlp.fc2.bias", {d}, w);
    p.layout.layers.push_back(std::move(L));
  }
  ParamInfo fin{ParamGroup::kFinal};
  ParamInfo fin_gain = fin;
  fin_gain.decay = false;
  fin_gain.layer_norm_gain = true;
  p.layout.final_ln_g = b.add("final.ln.gain", {d}, fin_gain);
  p.layout.final_ln_b = b.add("final.ln.bias", {d}, fin);
  p.layout.proj_w = b.add("final.proj.weight", {d, d}, fin);
  p.layout.proj_b = b.add("final.proj.bias", {d}, fin);
  return p;
}

/// normal(0, 0.02) for embeddings and weight matrices, zeros for biases,
/// ones for layer-norm gains; the PAD embedding row stays zero.
template <class T = float>
BasicModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  BasicModelParams<T> p = allocate_params<T>(config);
  Rng rng = make_stream(seed, {stream::kInit});
  std::normal_distribution<double> normal(0.0, kInitStd);
  for (std::size_t i = 0; i < p.store.size(); ++i) {
    auto& t = p.store[i];
    if (p.info[i].layer_norm_gain) {
      t.fill(T{1});
    } else if (t.rank() == 2) {
      for (T& v : t.values()) v = static_cast<T>(normal(rng));
    }
  }
  auto& tok = p.store[p.layout.tok_emb];
  for (std::size_t j = 0; j < config.hidden_dim; ++j) tok.at(kPadId, j) = T{};
  return p;
}

/// Loads a store (e.g. from a checkpoint) into the layout of `config`.
template <class T>
BasicModelParams<T> params_from_store(const ModelConfig& config, BasicParamStore<T> store) {
  BasicModelParams<T> p = allocate_params<T>(config);
  if (!p.store.congruent(store))
    throw DataError("parameter arrays do not match the model config (" + std::to_string(store.size()) +
                    " arrays, expected " + std::to_string(p.store.size()) + ")");
  p.store = std::move(store);
  return p;
}

// ---- graph construction -----------------------------------------------------

/// Parameter leaves of one graph, aligned with the store.
template <class T>
struct BoundParams {
  std::vector<typename BasicGraph<T>::Var> vars;
  typename BasicGraph<T>::Var operator[](std::size_t i) const { return vars[i]; }
};

/// Adds every array as a parameter leaf. `grads` may be null (inference);
/// `trainable`, when non-empty, freezes the arrays whose flag is false.
template <class T>
BoundParams<T> bind_params(BasicGraph<T>& g, const BasicModelParams<T>& params, BasicParamStore<T>* grads = nullptr,
                           std::span<const char> trainable = {}) {
  BoundParams<T> b;
  b.vars.reserve(params.store.size());
  for (std::size_t i = 0; i < params.store.size(); ++i) {
    const bool train = grads && (trainable.empty() || trainable[i]);
    b.vars.push_back(g.parameter(params.store[i], train ? &(*grads)[i] : nullptr, params.store.name(i)));
  }
  return b;
}

/// φ for a list of items: per item, the mean of its token embeddings
/// (PAD ids are skipped). Output (items × d).
template <class T>
typename BasicGraph<T>::Var encode_items(BasicGraph<T>& g, typename BasicGraph<T>::Var token_table,
                                         std::span<const std::vector<TokenId>> item_tokens,
                                         std::span<const ItemIndex> items) {
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> offsets{0};
  for (ItemIndex item : items) {
    const auto& toks = item_tokens[static_cast<std::size_t>(item)];
    for (TokenId t : toks)
      if (t != kPadId) ids.push_back(t);
    if (ids.size() == offsets.back())
      throw DataError("item " + std::to_string(item) + " has no tokens to encode");
    offsets.push_back(ids.size());
  }
  return g.gather_mean(token_table, std::move(ids), std::move(offsets));
}

/// Pre-norm causal transformer over packed sequences: `item_vectors` holds
/// the rows of every sequence back to back (R × d) and `lengths` their
/// extents. Dense layers run on the packed rows; attention runs per
/// sequence. Output row k of a sequence depends on its rows 0..k only.
template <class T>
typename BasicGraph<T>::Var forward_packed(BasicGraph<T>& g, typename BasicGraph<T>::Var item_vectors,
                                           std::span<const std::size_t> lengths, const BasicModelParams<T>& params,
                                           const BoundParams<T>& p) {
  using Var = typename BasicGraph<T>::Var;
  const ModelConfig& cfg = params.config;
  const Shape& s = g.shape(item_vectors);
  if (s.size() != 2 || s[1] != cfg.hidden_dim)
    throw NumericError("transformer expects (rows x " + std::to_string(cfg.hidden_dim) + ") input, got " +
                       shape_string(s));
  std::size_t rows = 0;
  for (std::size_t len : lengths) {
    if (len == 0 || len > cfg.max_seq_len)
      throw ConfigError("sequence length " + std::to_string(len) + " outside [1, " +
                        std::to_string(cfg.max_seq_len) + "]");
    rows += len;
  }
  if (rows != s[0])
    throw NumericError("sequence lengths cover " + std::to_string(rows) + " rows, input has " + std::to_string(s[0]));
  const ParamLayout& lay = params.layout;
  std::vector<std::int32_t> positions;
  std::vector<std::vector<std::int32_t>> segment_rows;
  positions.reserve(rows);
  for (std::size_t b = 0, off = 0; b < lengths.size(); off += lengths[b], ++b) {
    std::vector<std::int32_t> seg(lengths[b]);
    for (std::size_t i = 0; i < lengths[b]; ++i) {
      positions.push_back(static_cast<std::int32_t>(i));
      seg[i] = static_cast<std::int32_t>(off + i);
    }
    segment_rows.push_back(std::move(seg));
  }
  const bool single = lengths.size() == 1;
  auto segment = [&](Var v, std::size_t b) { return single ? v : g.gather(v, segment_rows[b]); };

  Var x = g.add(item_vectors, g.gather(p[lay.pos_emb], std::move(positions)));
  const T attn_scale = T{1} / std::sqrt(static_cast<T>(cfg.head_dim()));
  for (const auto& L : lay.layers) {
    Var h = g.layer_norm(x, p[L.ln1_g], p[L.ln1_b]);
    std::vector<Var> heads;
    heads.reserve(L.heads.size());
    for (const auto& H : L.heads) {
      Var q = g.add(g.matmul(h, p[H.q_w]), p[H.q_b]);
      Var k = g.add(g.matmul(h, p[H.k_w]), p[H.k_b]);
      Var v = g.add(g.matmul(h, p[H.v_w]), p[H.v_b]);
      std::vector<Var> parts;
      parts.reserve(lengths.size());
      for (std::size_t b = 0; b < lengths.size(); ++b) {
        Var scores = g.causal_mask(g.scale(g.matmul(segment(q, b), segment(k, b), true), attn_scale));
        parts.push_back(g.matmul(g.softmax(scores), segment(v, b)));
      }
      heads.push_back(parts.size() == 1 ? parts[0] : g.concat(parts, 0));
    }
    Var attn = heads.size() == 1 ? heads[0] : g.concat(heads, 1);
    x = g.add(x, g.add(g.matmul(attn, p[L.out_w]), p[L.out_b]));
    Var m = g.layer_norm(x, p[L.ln2_g], p[L.ln2_b]);
    m = g.gelu(g.add(g.matmul(m, p[L.fc1_w]), p[L.fc1_b]));
    x = g.add(x, g.add(g.matmul(m, p[L.fc2_w]), p[L.fc2_b]));
  }
  Var out = g.layer_norm(x, p[lay.final_ln_g], p[lay.final_ln_b]);
  return g.add(g.matmul(out, p[lay.proj_w]), p[lay.proj_b]);
}

/// Single-sequence form of forward_packed: (L × d) in, (L × d) out.
template <class T>
typename BasicGraph<T>::Var forward_sequence(BasicGraph<T>& g, typename BasicGraph<T>::Var item_vectors,
                                             const BasicModelParams<T>& params, const BoundParams<T>& p) {
  const Shape& s = g.shape(item_vectors);
  if (s.size() != 2) throw NumericError("forward_sequence expects a rank-2 input, got " + shape_string(s));
  const std::size_t len[] = {s[0]};
  return forward_packed(g, item_vectors, len, params, p);
}

// ---- inference helpers ------------------------------------------------------

/// φ(item) for one token list, outside any graph.
template <class T>
std::vector<T> encode_item(std::span<const TokenId> token_ids, const BasicModelParams<T>& params) {
  const auto& table = params.store[params.layout.tok_emb];
  const std::size_t d = params.config.hidden_dim;
  std::vector<T> out(d, T{});
  std::size_t count = 0;
  for (TokenId t : token_ids) {
    if (t == kPadId) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= table.dim(0))
      throw DataError("token id " + std::to_string(t) + " outside vocabulary of size " +
                      std::to_string(table.dim(0)));
    kernel::axpy(T{1}, table.data() + static_cast<std::size_t>(t) * d, out.data(), d);
    ++count;
  }
  if (count == 0) throw DataError("encode_item needs at least one non-PAD token");
  for (T& v : out) v /= static_cast<T>(count);
  return out;
}

/// φ for every catalog item as an (|I| × d) matrix.
template <class T>
BasicTensor<T> encode_catalog(const BasicModelParams<T>& params, std::span<const std::vector<TokenId>> item_tokens) {
  BasicGraph<T> g;
  auto p = bind_params(g, params);
  std::vector<ItemIndex> all(item_tokens.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<ItemIndex>(i);
  auto v = encode_items(g, p[params.layout.tok_emb], item_tokens, all);
  g.forward();
  return g.value(v);
}

/// Forward pass over precomputed item vectors (L × d), no gradients.
template <class T>
BasicTensor<T> forward_sequence_values(const BasicModelParams<T>& params, BasicTensor<T> item_vectors) {
  BasicGraph<T> g;
  auto p = bind_params(g, params);
  auto in = g.constant(std::move(item_vectors), "items");
  auto out = forward_sequence(g, in, params, p);
  g.forward();
  return g.value(out);
}

// ---- accounting -------------------------------------------------------------

struct ParamCount {
  std::size_t total = 0;
  std::size_t non_embedding = 0;
};

/// Closed-form parameter count. Per layer: 12d² + 13d (attention 4d² + 4d,
/// MLP 8d² + 5d, two layer norms 4d); final layer norm and projection
/// d² + 3d; embeddings (vocab_size + max_seq_len)·d.
inline ParamCount count_params(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.hidden_dim;
  const std::size_t per_layer = 12 * d * d + 13 * d;
  ParamCount out;
  out.non_embedding = c.n_layers * per_layer + d * d + 3 * d;
  out.total = out.non_embedding + (c.vocab_size + c.max_seq_len) * d;
  return out;
}

/// Attention projection parameters (Q, K, V, output) across all layers.
inline std::size_t attention_projection_params(const ModelConfig& c) {
  const std::size_t d = c.hidden_dim;
  return c.n_layers * (4 * d * d + 4 * d);
}

struct FlopsBudget {
  double forward_flops_per_position = 0;
  double train_flops_total = 0;
  double encoder = 0;    // item feature pooling
  double attention = 0;  // projections plus score/value products
  double mlp = 0;        // remaining dense parameters (MLP, norms, output projection)
};

/// Training-FLOPs convention (version 1):
///   6·N_nonemb·tokens + 6·n_L·d·context·tokens + 2·d·item_tokens·tokens
/// i.e. forward+backward over every dense parameter, the attention score and
/// value products over the context, and token pooling in the item encoder.
inline constexpr const char* kFlopsConvention =
    "flops-v1: 6*N_nonemb*tokens + 6*n_layers*d*context*tokens + 2*d*item_tokens*tokens";

inline double train_flops(double n_nonemb, double n_layers, double d, double item_tokens, double tokens,
                          double context) {
  return 6 * n_nonemb * tokens + 6 * n_layers * d * context * tokens + 2 * d * item_tokens * tokens;
}

inline FlopsBudget count_flops(const ModelConfig& c, double tokens_processed, double context_len,
                               double item_tokens = -1) {
  if (item_tokens < 0) item_tokens = static_cast<double>(c.max_item_tokens);
  const double n = static_cast<double>(count_params(c).non_embedding);
  const double n_attn = static_cast<double>(attention_projection_params(c));
  const double nl = static_cast<double>(c.n_layers), d = static_cast<double>(c.hidden_dim);
  FlopsBudget b;
  b.encoder = 2 * d * item_tokens * tokens_processed;
  b.attention = 6 * n_attn * tokens_processed + 6 * nl * d * context_len * tokens_processed;
  b.mlp = 6 * (n - n_attn) * tokens_processed;
  b.train_flops_total = b.encoder + b.attention + b.mlp;
  b.forward_flops_per_position = 2 * n + 2 * nl * d * context_len + 2 * d * item_tokens;
  return b;
}

inline nlohmann::json to_json(const FlopsBudget& b) {
  return {{"forward_flops_per_position", b.forward_flops_per_position},
          {"train_flops_total", b.train_flops_total},
          {"breakdown", {{"encoder", b.encoder}, {"attention", b.attention}, {"mlp", b.mlp}}},
          {"convention", kFlopsConvention}};
}

}  // namespace seqrec
