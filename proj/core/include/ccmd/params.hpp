// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "ccmd/autodiff.hpp"

namespace ccmd {

struct Param {
  ad::Shape shape;
  std::vector<double> values;

  friend bool operator==(const Param&, const Param&) = default;
};

using GradMap = std::map<std::string, std::vector<double>>;

/// Named flat parameter arrays, ordered by name.
class ParamStore {
 public:
  void add(const std::string& name, ad::Shape shape, std::vector<double> values);
  bool contains(const std::string& name) const { return params_.contains(name); }
  const Param& at(const std::string& name) const;
  Param& at(const std::string& name);

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  std::size_t size() const { return params_.size(); }
  std::size_t total_values() const;

  /// FNV-1a over names, shapes and the raw bytes of every value.
  std::uint64_t fingerprint() const;

  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  std::map<std::string, Param> params_;
};

using Rng = std::mt19937_64;

std::vector<double> normal_init(std::size_t n, double stddev, Rng& rng);
/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
std::vector<double> fan_in_init(std::size_t n, std::size_t fan_in, Rng& rng);

/// Places parameters on a tape on first use and collects their gradients.
class ParamBinding {
 public:
  /// With `trainable == false` parameters enter the tape as constants.
  ParamBinding(ad::Tape& tape, const ParamStore& store, bool trainable = true)
      : tape_(&tape), store_(&store), trainable_(trainable) {}

  ad::Tensor get(const std::string& name);
  /// Binds `name` to an existing tensor instead of the stored values.
  void set(const std::string& name, const ad::Tensor& t);
  ad::Tape& tape() const { return *tape_; }
  const ParamStore& store() const { return *store_; }

  /// Gradients of every stored parameter; zeros for parameters not reached.
  GradMap gradients() const;

 private:
  ad::Tape* tape_;
  const ParamStore* store_;
  bool trainable_;
  std::map<std::string, ad::Tensor> bound_;
};

}  // namespace ccmd
