#pragma once

#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "wmgym/tensor.hpp"

namespace wmgym::dynamo {

enum class ArchKind { mlp, temporal_transformer };
enum class Activation { tanh_act, relu, gelu };

std::string to_string(ArchKind k);
std::string to_string(Activation a);
ArchKind arch_kind_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);

// Shapes for the two supported architecture kinds.
//   mlp:                  widths = [in, hidden..., out]
//   temporal_transformer: widths = [d_model, d_ff]; layers, heads, context set
struct ArchSpec {
  ArchKind kind = ArchKind::mlp;
  std::vector<int> widths;
  int layers = 0;
  int heads = 0;
  int context = 0;
  Activation activation = Activation::tanh_act;

  void validate() const;
  std::string descriptor() const;  // canonical string, hashed into checkpoints
};

// Deterministic scaled-uniform init: weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)),
// biases and layer-norm offsets zero, layer-norm gains one.
ParamStore init_params(const ArchSpec& arch, uint64_t seed);

// Adds MLP parameters (fc{i}.W, fc{i}.b) under `prefix` to an existing store.
void add_mlp_params(ParamStore& ps, const ArchSpec& arch, const std::string& prefix,
                    Rng& rng);

double apply_activation(Activation a, double x);
double activation_grad(Activation a, double x);

// ---------------------------------------------------------------------------
// MLP forward / backward
// ---------------------------------------------------------------------------

struct MlpCache {
  std::vector<std::vector<double>> pre;   // preactivation per layer
  std::vector<std::vector<double>> act;   // act[0] = input copy; act[i] = layer i output
};

// Returns the output vector (reference into cache).
const std::vector<double>& mlp_forward(const ParamStore& ps, const ArchSpec& arch,
                                       std::span<const double> input, MlpCache& cache,
                                       const std::string& prefix = "");

// Accumulates parameter gradients into ps; optionally returns d_input.
void mlp_backward(ParamStore& ps, const ArchSpec& arch, const MlpCache& cache,
                  std::span<const double> d_output, std::vector<double>* d_input = nullptr,
                  const std::string& prefix = "");

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and global-norm gradient clipping.
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // <= 0 disables clipping
};

class AdamW {
 public:
  AdamW(const ParamStore& ps, AdamWConfig cfg);

  // Applies one update from the gradients stored in ps. Returns the pre-clip
  // global gradient norm.
  double step(ParamStore& ps);

  int64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// forward_backward with standard loss heads (used by grad checks and tests;
// composite models chain the lower-level forward/backward pairs directly).
// ---------------------------------------------------------------------------

struct MseHead {
  std::span<const double> target;  // loss = mean((y - t)^2)
};
struct XentHead {
  int classes = 0;                 // output interpreted as rows x classes
  std::span<const int> targets;    // loss = sum over rows of -log softmax[target]
};
using LossHead = std::variant<MseHead, XentHead>;

struct ForwardBackwardResult {
  std::vector<double> outputs;
  double loss = 0.0;
};

// For mlp, `inputs` is one input vector; for temporal_transformer, a row-major
// [n x d_model] token sequence. Gradients accumulate into ps.
ForwardBackwardResult forward_backward(ParamStore& ps, const ArchSpec& arch,
                                       std::span<const double> inputs,
                                       const LossHead& head);

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  int probes = 0;
  bool pass = false;
  std::string worst_param;
};

// Probes n_probes random parameter coordinates with central differences
// (h = 1e-4) against the analytic gradients. corrupt_coordinate >= 0 injects
// an error into that probe's analytic value (negative-control path for tests).
GradCheckReport grad_check(const ArchSpec& arch, uint64_t seed, int n_probes, double tol,
                           int corrupt_coordinate = -1);

}  // namespace wmgym::dynamo
