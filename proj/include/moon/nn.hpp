// Named trainable parameters and their initializers.
#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "moon/error.hpp"
#include "moon/rng.hpp"
#include "moon/tensor.hpp"

namespace moon {

// Insertion-ordered collection of named leaf tensors. The order is part of
// the checkpoint format and of optimizer state, so it never changes after
// construction.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor value) {
    if (index_.count(name)) throw Error("parameter store: duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, value.detach(true)});
    return entries_.back().tensor;
  }

  // Glorot/Xavier uniform in +-gain * sqrt(6 / (fan_in + fan_out)).
  Tensor add_glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng,
                    double gain = 1.0) {
    const double limit = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return add(name, Tensor::from(std::move(shape), std::move(v)));
  }

  Tensor add_zeros(const std::string& name, Shape shape) { return add(name, Tensor::zeros(std::move(shape))); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor& get(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw Error("parameter store: unknown parameter '" + name + "'");
    return entries_[it->second].tensor;
  }
  const Tensor& get(const std::string& name) const { return const_cast<ParameterStore*>(this)->get(name); }

  struct Entry {
    std::string name;
    Tensor tensor;
  };
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace moon
