// SPDX-License-Identifier: Apache-2.0

#include "ccmd/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace ccmd {

void ParamStore::add(const std::string& name, ad::Shape shape, std::vector<double> values) {
  if (ad::numel(shape) != values.size())
    throw std::invalid_argument("param " + name + ": shape " + ad::to_string(shape) +
                                " does not match " + std::to_string(values.size()) + " values");
  if (!params_.emplace(name, Param{std::move(shape), std::move(values)}).second)
    throw std::invalid_argument("param " + name + " already exists");
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.values.size();
  return n;
}

std::uint64_t ParamStore::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, p] : params_) {
    mix(name.data(), name.size());
    for (auto d : p.shape) mix(&d, sizeof d);
    mix(p.values.data(), p.values.size() * sizeof(double));
  }
  return h;
}

std::vector<double> normal_init(std::size_t n, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

std::vector<double> fan_in_init(std::size_t n, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

ad::Tensor ParamBinding::get(const std::string& name) {
  if (auto it = bound_.find(name); it != bound_.end()) return it->second;
  const Param& p = store_->at(name);
  ad::Tensor t = trainable_ ? tape_->variable(p.shape, p.values) : tape_->constant(p.shape, p.values);
  bound_.emplace(name, t);
  return t;
}

void ParamBinding::set(const std::string& name, const ad::Tensor& t) {
  const Param& p = store_->at(name);
  if (t.shape() != p.shape)
    throw std::invalid_argument("ParamBinding::set: '" + name + "' expects " + ad::to_string(p.shape) +
                                ", got " + ad::to_string(t.shape()));
  if (&t.tape() != tape_) throw std::invalid_argument("ParamBinding::set: tensor on another tape");
  bound_.insert_or_assign(name, t);
}

GradMap ParamBinding::gradients() const {
  GradMap out;
  for (const auto& [name, p] : *store_) {
    auto& g = out[name];
    g.assign(p.values.size(), 0.0);
    if (auto it = bound_.find(name); it != bound_.end()) {
      auto src = tape_->grad(it->second);
      if (!src.empty()) std::memcpy(g.data(), src.data(), src.size() * sizeof(double));
    }
  }
  return out;
}

}  // namespace ccmd
