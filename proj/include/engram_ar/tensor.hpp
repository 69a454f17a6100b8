#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "engram_ar/errors.hpp"

namespace engram_ar {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array. Most kernels treat it as a matrix: rows() is the
/// product of all leading dimensions, cols() the last dimension.
template <typename Real>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, Real fill = Real{0}) { return Tensor({rows, cols}, fill); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 1 : size() / cols(); }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> span() { return data_; }
  std::span<const Real> span() const { return data_; }
  std::vector<Real>& values() { return data_; }
  const std::vector<Real>& values() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }
  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  std::span<Real> row(std::size_t r) { return std::span<Real>(data_).subspan(r * cols(), cols()); }
  std::span<const Real> row(std::size_t r) const { return std::span<const Real>(data_).subspan(r * cols(), cols()); }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, std::vector<Other>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

/// Optimizer treatment of a parameter.
enum class ParamGroup {
  weight,      // decayed
  norm,        // RMSNorm scales: no decay
  layerscale,  // no decay
  table,       // engram memory tables: no decay
};

template <typename Real>
struct Param {
  std::string name;
  Tensor<Real> value;
  ParamGroup group = ParamGroup::weight;
  bool trainable = true;
};

/// Ordered named parameter collection. Order is creation order and is the
/// serialization order.
template <typename Real>
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor<Real> value, ParamGroup group, bool trainable = true) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back(Param<Real>{std::move(name), std::move(value), group, trainable});
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Param<Real>& operator[](std::size_t i) { return params_[i]; }
  const Param<Real>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("missing parameter: " + name);
    return it->second;
  }
  Param<Real>& at(const std::string& name) { return params_[index_of(name)]; }
  const Param<Real>& at(const std::string& name) const { return params_[index_of(name)]; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  template <typename Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<Other>(), p.group, p.trainable);
    return out;
  }

 private:
  std::vector<Param<Real>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradient buffers aligned with a ParamSet.
template <typename Real>
class GradSet {
 public:
  GradSet() = default;
  explicit GradSet(const ParamSet<Real>& params) {
    grads_.reserve(params.size());
    for (const auto& p : params) grads_.emplace_back(p.value.shape());
  }
  std::size_t size() const { return grads_.size(); }
  Tensor<Real>& operator[](std::size_t i) { return grads_[i]; }
  const Tensor<Real>& operator[](std::size_t i) const { return grads_[i]; }
  void zero() {
    for (auto& g : grads_) g.fill(Real{0});
  }
  void accumulate(const GradSet& other) {
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      auto& a = grads_[i].values();
      const auto& b = other.grads_[i].values();
      for (std::size_t j = 0; j < a.size(); ++j) a[j] += b[j];
    }
  }

 private:
  std::vector<Tensor<Real>> grads_;
};

}  // namespace engram_ar
