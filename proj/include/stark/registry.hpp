#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "stark/rng.hpp"
#include "stark/tensor.hpp"

namespace stark {

// Named parameter/buffer registry. Registration order is fixed by model
// construction and defines both the serialization order and the per-tensor
// init stream, so identical (config, seed) pairs build identical models.
template <class S>
class ParamRegistryT {
 public:
  struct Entry {
    std::string name;
    TensorT<S> tensor;
    bool is_param = true;  // buffers (running stats) are saved but never optimized
  };

  explicit ParamRegistryT(std::uint64_t seed) : rng_(seed) {}

  // Linear/conv weight: uniform in +-1/sqrt(fan_in).
  TensorT<S> param_fanin(const std::string& name, std::vector<int> dims, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Rng r = rng_.split(entries_.size());
    auto t = TensorT<S>::uniform(std::move(dims), r, -bound, bound, true);
    push(name, t, true);
    return t;
  }

  TensorT<S> param_zeros(const std::string& name, std::vector<int> dims) {
    auto t = TensorT<S>::zeros(std::move(dims), true);
    push(name, t, true);
    return t;
  }

  TensorT<S> param_full(const std::string& name, std::vector<int> dims, S value) {
    auto t = TensorT<S>::full(std::move(dims), value);
    t.set_requires_grad(true);
    push(name, t, true);
    return t;
  }

  TensorT<S> buffer_full(const std::string& name, std::vector<int> dims, S value) {
    auto t = TensorT<S>::full(std::move(dims), value);
    push(name, t, false);
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<TensorT<S>> params() const {
    std::vector<TensorT<S>> out;
    for (const auto& e : entries_)
      if (e.is_param) out.push_back(e.tensor);
    return out;
  }

  const Entry& find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e;
    throw std::invalid_argument("registry: no tensor named '" + name + "'");
  }

  std::int64_t total_values() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

 private:
  void push(const std::string& name, const TensorT<S>& t, bool is_param) {
    for (const auto& e : entries_)
      if (e.name == name) throw std::invalid_argument("registry: duplicate tensor name '" + name + "'");
    entries_.push_back(Entry{name, t, is_param});
  }

  Rng rng_;
  std::vector<Entry> entries_;
};

using ParamRegistry = ParamRegistryT<float>;

}  // namespace stark
