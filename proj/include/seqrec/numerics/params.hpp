// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "seqrec/numerics/tensor.hpp"

namespace seqrec {

/// Ordered collection of named tensors. Order is significant: it is the
/// serialization order and the order gradient norms are accumulated in.
template <class T>
class BasicParamStore {
 public:
  std::size_t add(std::string name, BasicTensor<T> tensor) {
    if (index_.count(name)) throw NumericError("duplicate parameter name '" + name + "'");
    index_.emplace(name, tensors_.size());
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(tensor));
    return tensors_.size() - 1;
  }

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  BasicTensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  const BasicTensor<T>& operator[](std::size_t i) const { return tensors_[i]; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  BasicTensor<T>& at(const std::string& name) {
    auto i = find(name);
    if (!i) throw NumericError("unknown parameter '" + name + "'");
    return tensors_[*i];
  }
  const BasicTensor<T>& at(const std::string& name) const {
    return const_cast<BasicParamStore*>(this)->at(name);
  }

  /// Total number of scalar entries.
  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  /// Same names and shapes, all zeros.
  BasicParamStore zeros_like() const {
    BasicParamStore out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], BasicTensor<T>(tensors_[i].shape()));
    return out;
  }

  void zero() {
    for (auto& t : tensors_) t.fill(T{});
  }

  bool congruent(const BasicParamStore& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (other.names_[i] != names_[i] || other.tensors_[i].shape() != tensors_[i].shape()) return false;
    return true;
  }

  template <class U>
  BasicParamStore<U> cast() const {
    BasicParamStore<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].template cast<U>());
    return out;
  }

  /// Euclidean norm over every entry, accumulated in double.
  double global_norm() const {
    double acc = 0;
    for (const auto& t : tensors_)
      for (T v : t.values()) acc += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(acc);
  }

  bool operator==(const BasicParamStore& other) const {
    return names_ == other.names_ && tensors_ == other.tensors_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<BasicTensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = BasicParamStore<float>;

}  // namespace seqrec
