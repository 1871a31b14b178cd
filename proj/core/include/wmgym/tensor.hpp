#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "wmgym/common.hpp"

namespace wmgym {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);

  size_t size() const { return data.size(); }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

size_t shape_numel(const std::vector<int>& shape);

// Flat named collection of trainable tensors with parallel gradient slots.
// Declaration order is stable and defines the checkpoint layout.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  // Adds a tensor (zero-initialized) and returns it.
  Tensor& add(const std::string& name, std::vector<int> shape);

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  Tensor& grad(const std::string& name);
  const Tensor& grad(const std::string& name) const;

  size_t size() const { return entries_.size(); }
  Entry& entry(size_t i) { return entries_[i]; }
  const Entry& entry(size_t i) const { return entries_[i]; }

  size_t param_count() const;
  void zero_grads();

  // Global L2 norm over all gradient slots (fixed reduction order).
  double grad_norm() const;

  // Throws NumericalError naming the first non-finite tensor, if any.
  void check_finite(const std::string& context) const;

  // FNV hash over (arch descriptor, tensor names, shapes); guards checkpoints.
  uint64_t layout_hash(const std::string& arch_descriptor) const;

  // Binary checkpoint: magic, version, layout hash, then tensors in
  // declaration order as little-endian float64.
  void save(const std::string& path, const std::string& arch_descriptor) const;
  // Requires identical declaration layout; verifies the stored hash.
  void load(const std::string& path, const std::string& arch_descriptor);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

}  // namespace wmgym
