#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mlunet/ops.hpp"

namespace mlunet {

template <typename T>
struct ParamTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

/// Owns every named weight of a model plus the batch-norm running buffers.
/// Initialization draws from one mt19937_64 stream in creation order, in
/// double precision, so f32 and f64 builds from one seed agree up to rounding.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> values, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto t = Tensor<T>::from(std::move(shape), std::move(values), trainable);
    index_[name] = params_.size();
    params_.push_back({name, t, trainable});
    return t;
  }

  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor<T> uniform(const std::string& name, Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    return add(name, std::move(shape), std::move(v));
  }

  Tensor<T> constant(const std::string& name, Shape shape, T value, bool trainable = true) {
    std::vector<T> v(numel(shape), value);
    return add(name, std::move(shape), std::move(v), trainable);
  }

  std::shared_ptr<BatchNormState<T>> bn_state(const std::string& name, std::size_t C) {
    auto s = std::make_shared<BatchNormState<T>>(BatchNormState<T>::initialized(C));
    bn_states_.emplace_back(name, s);
    return s;
  }

  const std::vector<ParamTensor<T>>& params() const { return params_; }
  const std::vector<std::pair<std::string, std::shared_ptr<BatchNormState<T>>>>& bn_states() const {
    return bn_states_;
  }

  const ParamTensor<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (auto& p : params_) n += p.tensor.size();
    return n;
  }

  std::size_t trainable_total() const {
    std::size_t n = 0;
    for (auto& p : params_)
      if (p.trainable) n += p.tensor.size();
    return n;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::vector<ParamTensor<T>> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::pair<std::string, std::shared_ptr<BatchNormState<T>>>> bn_states_;
  std::mt19937_64 rng_;
};

/// Name-prefixing view over a store.
template <typename T>
class Scope {
 public:
  Scope(ParamStore<T>& store, std::string prefix) : store_(&store), prefix_(std::move(prefix)) {}

  Scope sub(const std::string& name) const { return Scope(*store_, join(name)); }
  std::string join(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }
  ParamStore<T>& store() const { return *store_; }

  Tensor<T> uniform(const std::string& name, Shape shape, std::size_t fan_in) const {
    return store_->uniform(join(name), std::move(shape), fan_in);
  }
  Tensor<T> constant(const std::string& name, Shape shape, T v) const {
    return store_->constant(join(name), std::move(shape), v);
  }
  Tensor<T> values(const std::string& name, Shape shape, std::vector<T> v) const {
    return store_->add(join(name), std::move(shape), std::move(v));
  }
  std::shared_ptr<BatchNormState<T>> bn_state(const std::string& name, std::size_t C) const {
    return store_->bn_state(join(name), C);
  }

 private:
  ParamStore<T>* store_;
  std::string prefix_;
};

// ---------------------------------------------------------------------------
// Small reusable layers

template <typename T>
struct ConvLayer {
  Tensor<T> weight, bias;
  Conv2dOptions opt;

  static ConvLayer make(const Scope<T>& s, std::size_t cin, std::size_t cout, std::size_t k,
                        std::size_t groups = 1, bool with_bias = true) {
    ConvLayer c;
    const std::size_t fan_in = cin / groups * k * k;
    c.weight = s.uniform("weight", {cout, cin / groups, k, k}, fan_in);
    if (with_bias) c.bias = s.constant("bias", {cout}, T(0));
    c.opt = {1, k / 2, groups};
    return c;
  }
  static ConvLayer depthwise(const Scope<T>& s, std::size_t C, std::size_t k = 3) { return make(s, C, C, k, C); }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, opt); }
  std::size_t cin() const { return weight.dim(1) * opt.groups; }
  std::size_t cout() const { return weight.dim(0); }
  std::size_t k() const { return weight.dim(2); }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight, bias;

  static LinearLayer make(const Scope<T>& s, std::size_t in, std::size_t out, bool with_bias) {
    LinearLayer l;
    l.weight = s.uniform("weight", {out, in}, in);
    if (with_bias) l.bias = s.constant("bias", {out}, T(0));
    return l;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct NormAffine {
  Tensor<T> gamma, beta;

  static NormAffine make(const Scope<T>& s, std::size_t C) {
    return {s.constant("gamma", {C}, T(1)), s.constant("beta", {C}, T(0))};
  }
};

}  // namespace mlunet
