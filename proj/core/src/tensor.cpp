#include "wmgym/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace wmgym {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ConfigError("tensor dimension must be positive");
    n *= static_cast<size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  data.assign(shape_numel(shape), 0.0);
}

Tensor& ParamStore::add(const std::string& name, std::vector<int> shape) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  index_[name] = entries_.size();
  entries_.push_back(Entry{name, Tensor(shape), Tensor(shape)});
  return entries_.back().value;
}

Tensor& ParamStore::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].value;
}

const Tensor& ParamStore::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].value;
}

Tensor& ParamStore::grad(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].grad;
}

const Tensor& ParamStore::grad(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second].grad;
}

size_t ParamStore::param_count() const {
  size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

double ParamStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& e : entries_) {
    for (double g : e.grad.data) sq += g * g;
  }
  return std::sqrt(sq);
}

void ParamStore::check_finite(const std::string& context) const {
  for (const auto& e : entries_) {
    for (double v : e.value.data) {
      if (!std::isfinite(v)) {
        throw NumericalError(context + ": non-finite value in tensor " + e.name);
      }
    }
  }
}

uint64_t ParamStore::layout_hash(const std::string& arch_descriptor) const {
  uint64_t h = fnv1a(arch_descriptor);
  for (const auto& e : entries_) {
    h = hash_mix(h, fnv1a(e.name));
    for (int d : e.value.shape) h = hash_mix(h, static_cast<uint64_t>(d));
  }
  return h;
}

namespace {
constexpr uint64_t kMagic = 0x574d47594d434b31ull;  // "WMGYMCK1"
constexpr uint32_t kVersionTag = 1;

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& is, T& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace

void ParamStore::save(const std::string& path, const std::string& arch_descriptor) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  write_pod(os, kMagic);
  write_pod(os, kVersionTag);
  write_pod(os, layout_hash(arch_descriptor));
  uint32_t n = static_cast<uint32_t>(entries_.size());
  write_pod(os, n);
  for (const auto& e : entries_) {
    uint32_t len = static_cast<uint32_t>(e.name.size());
    write_pod(os, len);
    os.write(e.name.data(), len);
    uint32_t nd = static_cast<uint32_t>(e.value.shape.size());
    write_pod(os, nd);
    for (int d : e.value.shape) {
      int32_t dd = d;
      write_pod(os, dd);
    }
    os.write(reinterpret_cast<const char*>(e.value.data.data()),
             static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  }
  if (!os) throw IoError("short write on checkpoint: " + path);
}

void ParamStore::load(const std::string& path, const std::string& arch_descriptor) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  uint64_t magic = 0;
  uint32_t version = 0;
  uint64_t hash = 0;
  uint32_t n = 0;
  read_pod(is, magic);
  read_pod(is, version);
  read_pod(is, hash);
  read_pod(is, n);
  if (magic != kMagic) throw IoError("bad checkpoint magic: " + path);
  if (version != kVersionTag) throw IoError("unsupported checkpoint version: " + path);
  if (hash != layout_hash(arch_descriptor)) {
    throw ConfigError("checkpoint arch hash mismatch: " + path);
  }
  if (n != entries_.size()) throw IoError("checkpoint tensor count mismatch: " + path);
  for (auto& e : entries_) {
    uint32_t len = 0;
    read_pod(is, len);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (name != e.name) throw IoError("checkpoint tensor order mismatch at " + e.name);
    uint32_t nd = 0;
    read_pod(is, nd);
    if (nd != e.value.shape.size()) throw IoError("checkpoint rank mismatch at " + e.name);
    for (int d : e.value.shape) {
      int32_t dd = 0;
      read_pod(is, dd);
      if (dd != d) throw IoError("checkpoint shape mismatch at " + e.name);
    }
    is.read(reinterpret_cast<char*>(e.value.data.data()),
            static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  }
  if (!is) throw IoError("short read on checkpoint: " + path);
}

}  // namespace wmgym
