#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "stgaze/rng.hpp"
#include "stgaze/tensor.hpp"

namespace stgaze {

// Named trainable tensor. The gradient buffer lives here and accumulates
// across backward passes until zero_grad() is called, so multiple streams or
// batch items can share one parameter set.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;
  int id = -1;

  void zero_grad() { grad.zero(); }
};

enum class Init {
  kZero,
  kFanIn,    // uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
  kNormal02  // N(0, 0.02), used for positional encodings
};

// Owns every parameter of a model; names are unique dotted paths stable
// across construction order, which fixes the checkpoint layout.
template <typename S>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t init_seed = 0) : rng_(init_seed) {}

  Parameter<S>& create(const std::string& name, Shape shape, Init init, int fan_in = 0) {
    if (index_.count(name)) {
      throw std::invalid_argument("parameter store: duplicate name '" + name + "'");
    }
    auto p = std::make_unique<Parameter<S>>();
    p->name = name;
    p->id = static_cast<int>(params_.size());
    switch (init) {
      case Init::kZero:
        p->value = Tensor<S>(shape);
        break;
      case Init::kFanIn: {
        if (fan_in < 1) throw std::invalid_argument("parameter store: fan_in must be >= 1");
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        p->value = Tensor<S>::uniform(shape, rng_, -bound, bound);
        break;
      }
      case Init::kNormal02:
        p->value = Tensor<S>::normal(shape, rng_, 0.0, 0.02);
        break;
    }
    p->grad = Tensor<S>(shape);
    index_[name] = p->id;
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[static_cast<std::size_t>(it->second)].get();
  }

  Parameter<S>& at(int id) { return *params_[static_cast<std::size_t>(id)]; }
  const Parameter<S>& at(int id) const { return *params_[static_cast<std::size_t>(id)]; }

  int size() const { return static_cast<int>(params_.size()); }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

  // Iteration in creation order.
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::unordered_map<std::string, int> index_;
  Rng rng_;
};

// Per-worker gradient sink keyed by parameter id; lets data-parallel batch
// items accumulate privately and reduce in a fixed order.
template <typename S>
class ParamGrads {
 public:
  void accumulate(const Parameter<S>& p, const Tensor<S>& g) {
    auto& slot = grads_[p.id];
    if (slot.empty()) slot = Tensor<S>(g.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) slot[i] += g[i];
  }

  // Adds scale * grads into the parameters' own buffers, ids ascending.
  void reduce_into(ParameterStore<S>& store, S scale) const {
    for (const auto& [id, g] : ordered()) {
      auto& dst = store.at(id).grad;
      for (std::int64_t i = 0; i < g->numel(); ++i) dst[i] += scale * (*g)[i];
    }
  }

  void clear() { grads_.clear(); }

  const Tensor<S>* find(int id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
  }

 private:
  std::vector<std::pair<int, const Tensor<S>*>> ordered() const {
    std::vector<std::pair<int, const Tensor<S>*>> v;
    v.reserve(grads_.size());
    for (const auto& [id, g] : grads_) v.emplace_back(id, &g);
    std::sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.first < b.first; });
    return v;
  }

  std::unordered_map<int, Tensor<S>> grads_;
};

}  // namespace stgaze
