// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace seqrec {

/// Base error. `exit_code()` is the process status the CLI maps it to.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 1; }
};

/// Invalid configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

/// Malformed or insufficient input data.
class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

/// Shape mismatches, non-finite values, divergence.
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 4; }
};

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives a child seed from a root seed and a key path, e.g.
/// derive_seed(root, {epoch, sequence_id}). Distinct key paths give
/// statistically independent streams, so results never depend on the order
/// in which streams are consumed.
inline std::uint64_t derive_seed(std::uint64_t root,
                                 std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(root);
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_stream(std::uint64_t root, std::initializer_list<std::uint64_t> keys) {
  return Rng(derive_seed(root, keys));
}

// Stream domains, so that e.g. training negatives and evaluation negatives
// drawn with the same root seed never coincide.
namespace stream {
inline constexpr std::uint64_t kSubsample = 1;
inline constexpr std::uint64_t kInit = 2;
inline constexpr std::uint64_t kShuffle = 3;
inline constexpr std::uint64_t kNegatives = 4;
inline constexpr std::uint64_t kEvaluation = 5;
inline constexpr std::uint64_t kFisher = 6;
inline constexpr std::uint64_t kSynthetic = 7;
}  // namespace stream

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace seqrec
