// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "seqrec/common.hpp"
#include "seqrec/ingest.hpp"

namespace seqrec {

using TokenId = std::int32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kSepToken = "[SEP]";
/// Prefix marking a token that continues the current word.
inline constexpr std::string_view kContinuation = "##";
/// Rendering of an unknown word by detokenize().
inline constexpr std::string_view kUnknownGlyph = "\xEF\xBF\xBD";
inline constexpr std::size_t kDefaultVocabSize = 30000;
inline constexpr std::size_t kDefaultMaxItemTokens = 32;
inline constexpr std::size_t kMaxWordCodepoints = 64;

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{std::string(kPadToken), std::string(kUnkToken)}) {}

  /// Ids are positions; PAD and UNK must occupy ids 0 and 1.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2 || tokens_[0] != kPadToken || tokens_[1] != kUnkToken)
      throw DataError("vocabulary must start with [PAD] and [UNK]");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second)
        throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
      max_token_bytes_ = std::max(max_token_bytes_, tokens_[i].size());
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t max_token_bytes() const { return max_token_bytes_; }

  std::optional<TokenId> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Content hash over the token list.
  std::uint64_t hash() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& t : tokens_) h = fnv1a(t + "\n", h);
    return h;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_token_bytes_ = 0;
};

namespace text {

inline std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 1;  // stray continuation byte: treat as its own symbol
}

/// Splits a word into UTF-8 code points (byte strings).
inline std::vector<std::string> codepoints(std::string_view word) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < word.size();) {
    const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

/// ASCII-lowercases, splits on whitespace and isolates ASCII punctuation.
inline std::vector<std::string> pre_split(std::string_view s) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return words;
}

/// Word sequence of an item: title words, the separator, brand words.
/// Empty title and brand give no words.
inline std::vector<std::string> item_words(std::string_view title, std::string_view brand) {
  std::vector<std::string> words = pre_split(title);
  std::vector<std::string> brand_words = pre_split(brand);
  if (words.empty() && brand_words.empty()) return {};
  words.emplace_back(kSepToken);
  words.insert(words.end(), brand_words.begin(), brand_words.end());
  return words;
}

inline std::string join_pair(const std::string& left, const std::string& right) {
  std::string_view r = right;
  if (r.substr(0, kContinuation.size()) == kContinuation) r.remove_prefix(kContinuation.size());
  return left + std::string(r);
}

}  // namespace text

/// Trains a byte-pair-merge vocabulary over "title [SEP] brand" of every
/// catalog item.
///
/// Words start as code points, non-initial ones carrying the "##" prefix.
/// Base symbols enter by descending frequency, then the most frequent
/// adjacent pair is merged repeatedly (ties broken by the lexicographic order
/// of the pair) until the vocabulary holds `vocab_size` entries or no pair is
/// left. Training is fully deterministic; `seed` is recorded by callers but
/// does not influence the result.
inline Vocabulary build_vocab(const Catalog& catalog, std::size_t vocab_size, std::uint64_t seed = 0) {
  (void)seed;
  if (vocab_size < 3) throw ConfigError("vocab_size must be at least 3 (PAD, UNK and one token)");
  if (catalog.empty()) throw DataError("cannot build a vocabulary from an empty catalog");

  std::map<std::string, std::int64_t> word_freq;
  for (const auto& item : catalog.items())
    for (auto& w : text::item_words(item.title, item.brand)) ++word_freq[w];

  // Symbol strings are interned; words are sequences of symbol ids.
  std::vector<std::string> sym_str;
  std::unordered_map<std::string, int> sym_id;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = sym_id.try_emplace(s, static_cast<int>(sym_str.size()));
    if (inserted) sym_str.push_back(s);
    return it->second;
  };

  struct Word {
    std::vector<int> syms;
    std::int64_t freq;
  };
  std::vector<Word> words;
  std::map<int, std::int64_t> base_freq;
  for (const auto& [w, f] : word_freq) {
    Word word{{}, f};
    if (w == kSepToken) {
      word.syms.push_back(intern(w));
    } else {
      auto cps = text::codepoints(w);
      if (cps.size() > kMaxWordCodepoints) continue;
      for (std::size_t i = 0; i < cps.size(); ++i)
        word.syms.push_back(intern(i == 0 ? cps[i] : std::string(kContinuation) + cps[i]));
    }
    for (int s : word.syms) base_freq[s] += f;
    words.push_back(std::move(word));
  }

  std::vector<std::string> tokens{std::string(kPadToken), std::string(kUnkToken)};
  std::unordered_map<std::string, bool> in_vocab;
  {
    std::vector<std::pair<std::int64_t, std::string>> base;
    for (const auto& [s, f] : base_freq) base.emplace_back(f, sym_str[static_cast<std::size_t>(s)]);
    std::sort(base.begin(), base.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (const auto& [f, s] : base) {
      if (tokens.size() >= vocab_size) break;
      tokens.push_back(s);
      in_vocab[s] = true;
    }
  }

  using PairKey = std::uint64_t;
  auto key_of = [](int a, int b) { return (static_cast<PairKey>(a) << 32) | static_cast<std::uint32_t>(b); };
  std::unordered_map<PairKey, std::int64_t> pair_count;
  std::unordered_map<PairKey, std::vector<int>> pair_words;
  // Ordered by (-count, left string, right string).
  std::set<std::tuple<std::int64_t, std::string, std::string, PairKey>> ranked;

  auto rank_entry = [&](PairKey k, std::int64_t count) {
    return std::make_tuple(-count, sym_str[static_cast<std::size_t>(k >> 32)],
                           sym_str[static_cast<std::size_t>(k & 0xffffffffu)], k);
  };
  auto apply_delta = [&](const std::unordered_map<PairKey, std::int64_t>& delta) {
    for (const auto& [k, d] : delta) {
      if (d == 0) continue;
      std::int64_t& c = pair_count[k];
      if (c > 0) ranked.erase(rank_entry(k, c));
      c += d;
      if (c > 0) ranked.insert(rank_entry(k, c));
    }
  };

  {
    std::unordered_map<PairKey, std::int64_t> delta;
    for (std::size_t w = 0; w < words.size(); ++w)
      for (std::size_t i = 0; i + 1 < words[w].syms.size(); ++i) {
        const PairKey k = key_of(words[w].syms[i], words[w].syms[i + 1]);
        delta[k] += words[w].freq;
        pair_words[k].push_back(static_cast<int>(w));
      }
    apply_delta(delta);
  }

  std::vector<std::size_t> visited(words.size(), 0);
  std::size_t round = 0;
  while (tokens.size() < vocab_size && !ranked.empty()) {
    ++round;
    const auto [neg, left, right, key] = *ranked.begin();
    const int a = static_cast<int>(key >> 32);
    const int b = static_cast<int>(key & 0xffffffffu);
    const std::string merged = text::join_pair(left, right);
    const int c = intern(merged);
    if (!in_vocab.count(merged)) {
      tokens.push_back(merged);
      in_vocab[merged] = true;
    }
    std::unordered_map<PairKey, std::int64_t> delta;
    const std::vector<int> affected = pair_words[key];
    for (int w : affected) {
      if (visited[static_cast<std::size_t>(w)] == round) continue;
      visited[static_cast<std::size_t>(w)] = round;
      Word& word = words[static_cast<std::size_t>(w)];
      bool has = false;
      for (std::size_t i = 0; i + 1 < word.syms.size(); ++i)
        if (word.syms[i] == a && word.syms[i + 1] == b) has = true;
      if (!has) continue;
      for (std::size_t i = 0; i + 1 < word.syms.size(); ++i)
        delta[key_of(word.syms[i], word.syms[i + 1])] -= word.freq;
      std::vector<int> next;
      next.reserve(word.syms.size());
      for (std::size_t i = 0; i < word.syms.size(); ++i) {
        if (i + 1 < word.syms.size() && word.syms[i] == a && word.syms[i + 1] == b) {
          next.push_back(c);
          ++i;
        } else {
          next.push_back(word.syms[i]);
        }
      }
      word.syms = std::move(next);
      for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
        const PairKey k = key_of(word.syms[i], word.syms[i + 1]);
        delta[k] += word.freq;
        if (k != key) pair_words[k].push_back(w);
      }
    }
    apply_delta(delta);
    // The merged pair can no longer occur.
    if (auto it = pair_count.find(key); it != pair_count.end() && it->second > 0) {
      ranked.erase(rank_entry(key, it->second));
      it->second = 0;
    }
    pair_words.erase(key);
  }
  return Vocabulary(std::move(tokens));
}

struct TokenizedItem {
  ItemIndex item = 0;
  std::vector<TokenId> token_ids;
};

namespace detail {

/// Greedy longest-match of one word; the whole word becomes UNK when some
/// position has no match.
inline void encode_word(const std::string& word, const Vocabulary& vocab, std::vector<TokenId>& out) {
  if (word == kSepToken) {
    auto id = vocab.find(kSepToken);
    out.push_back(id ? *id : kUnkId);
    return;
  }
  auto cps = text::codepoints(word);
  if (cps.size() > kMaxWordCodepoints) {
    out.push_back(kUnkId);
    return;
  }
  std::vector<TokenId> pieces;
  std::size_t p = 0;
  while (p < cps.size()) {
    std::optional<TokenId> found;
    std::size_t end = cps.size();
    for (; end > p; --end) {
      std::string cand = p == 0 ? std::string() : std::string(kContinuation);
      for (std::size_t i = p; i < end; ++i) cand += cps[i];
      if (cand.size() > vocab.max_token_bytes()) continue;
      if ((found = vocab.find(cand))) break;
    }
    if (!found || *found == kPadId || *found == kUnkId) {
      out.push_back(kUnkId);
      return;
    }
    pieces.push_back(*found);
    p = end;
  }
  out.insert(out.end(), pieces.begin(), pieces.end());
}

inline std::vector<TokenId> encode_words(const std::vector<std::string>& words, const Vocabulary& vocab,
                                         std::size_t max_tokens) {
  std::vector<TokenId> ids;
  for (const auto& w : words) {
    encode_word(w, vocab, ids);
    if (ids.size() >= max_tokens) break;
  }
  if (ids.size() > max_tokens) ids.resize(max_tokens);
  if (ids.empty()) ids.push_back(kUnkId);
  return ids;
}

}  // namespace detail

/// Token ids for an item's title and brand: never empty, at most
/// `max_item_tokens` long (prefix kept).
inline TokenizedItem tokenize_item(std::string_view title, std::string_view brand, const Vocabulary& vocab,
                                   std::size_t max_item_tokens = kDefaultMaxItemTokens, ItemIndex item = 0) {
  if (max_item_tokens == 0) throw ConfigError("max_item_tokens must be positive");
  return {item, detail::encode_words(text::item_words(title, brand), vocab, max_item_tokens)};
}

/// Tokenizes free text; a whitespace-delimited literal "[SEP]" is read as the
/// separator. Inverse of detokenize() on its image.
inline std::vector<TokenId> tokenize_text(std::string_view s, const Vocabulary& vocab,
                                          std::size_t max_tokens = kDefaultMaxItemTokens) {
  std::vector<std::string> words;
  std::istringstream is{std::string(s)};
  std::string chunk;
  while (is >> chunk) {
    if (chunk == kSepToken) {
      words.push_back(chunk);
    } else {
      auto parts = text::pre_split(chunk);
      words.insert(words.end(), parts.begin(), parts.end());
    }
  }
  return detail::encode_words(words, vocab, max_tokens);
}

inline std::string detokenize(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
  std::string out;
  bool word_open = false;
  for (TokenId id : ids) {
    if (id == kPadId) continue;
    std::string_view tok = id == kUnkId ? kUnknownGlyph : std::string_view(vocab.token(id));
    const bool continues = id != kUnkId && tok.substr(0, kContinuation.size()) == kContinuation && word_open;
    if (continues) {
      out += tok.substr(kContinuation.size());
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
    word_open = id != kUnkId;
  }
  return out;
}

/// Token ids for every catalog item, indexed by item.
inline std::vector<std::vector<TokenId>> tokenize_catalog(const Catalog& catalog, const Vocabulary& vocab,
                                                          std::size_t max_item_tokens = kDefaultMaxItemTokens) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(catalog.size());
  for (std::size_t i = 0; i < catalog.size(); ++i)
    out.push_back(tokenize_item(catalog[i].title, catalog[i].brand, vocab, max_item_tokens,
                                static_cast<ItemIndex>(i))
                      .token_ids);
  return out;
}

inline void write_vocab(std::ostream& os, const Vocabulary& vocab, std::uint64_t seed = 0) {
  os << "# seqrec-vocab v1 size=" << vocab.size() << " hash=" << hex64(vocab.hash()) << " seed=" << seed << '\n';
  for (const auto& t : vocab.tokens()) os << t << '\n';
}

inline Vocabulary read_vocab(std::istream& is) {
  std::string line;
  std::vector<std::string> tokens;
  bool header = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (header && !line.empty() && line[0] == '#') {
      header = false;
      continue;
    }
    header = false;
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

}  // namespace seqrec
