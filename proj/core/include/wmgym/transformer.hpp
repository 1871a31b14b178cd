#pragma once

// Small causal temporal-attention network over pre-built token vectors.
// Pre-LN blocks: x += attn(ln1(x)); x += mlp(ln2(x)); final layer norm.
// Positional information is the caller's responsibility (added into tokens).

#include <span>
#include <string>
#include <vector>

#include "wmgym/dynamo.hpp"
#include "wmgym/tensor.hpp"

namespace wmgym::dynamo {

void add_transformer_params(ParamStore& ps, const ArchSpec& arch,
                            const std::string& prefix, Rng& rng);

// Per-layer keys/values for already-processed positions. `len` counts cached
// positions; buffers are laid out [layer][pos * d_model].
struct KvCache {
  int len = 0;
  int stride = 0;  // d_model
  std::vector<std::vector<double>> k;
  std::vector<std::vector<double>> v;

  void init(const ArchSpec& arch);
  void clear() { len = 0; }
  // Adopts the first `prefix` cached positions from another cache.
  void clone_prefix(const KvCache& other, int prefix);
};

struct TfLayerCache {
  std::vector<double> x_in, ln1_out, q, k, v, ctx, attn_out, x_mid, ln2_out;
  std::vector<double> attw;            // [heads][n][n] packed
  std::vector<double> mlp_pre, mlp_hid;
  std::vector<double> ln1_stats, ln2_stats;  // per position: mean, inv_std
};

struct TfTrainCache {
  int n = 0;
  std::vector<double> tokens;
  std::vector<TfLayerCache> layers;
  std::vector<double> x_final, lnf_out;
  std::vector<double> lnf_stats;
};

// Full causal forward over n tokens; caches activations for backward.
// Returns row-major [n x d_model] outputs (reference into cache).
const std::vector<double>& transformer_forward(const ParamStore& ps, const ArchSpec& arch,
                                               std::span<const double> tokens, int n,
                                               TfTrainCache& cache,
                                               const std::string& prefix = "");

// Accumulates parameter gradients into ps; d_tokens (if non-null) receives
// gradients w.r.t. the input token vectors ([n x d_model], overwritten).
void transformer_backward(ParamStore& ps, const ArchSpec& arch, const TfTrainCache& cache,
                          std::span<const double> d_outputs,
                          std::vector<double>* d_tokens = nullptr,
                          const std::string& prefix = "");

// Inference over n tokens computing only the last position's output; fills
// `cache` with per-layer K/V for positions [0, cache_prefix). Output is the
// final-layer-normed last-position vector.
void transformer_forward_rollout(const ParamStore& ps, const ArchSpec& arch,
                                 std::span<const double> tokens, int n, KvCache& cache,
                                 int cache_prefix, std::span<double> out,
                                 const std::string& prefix = "");

// Single-token inference at position cache.len attending to cached K/V plus
// itself. append_kv=true also appends this token's K/V to the cache.
void transformer_forward_incremental(const ParamStore& ps, const ArchSpec& arch,
                                     std::span<const double> token, KvCache& cache,
                                     bool append_kv, std::span<double> out,
                                     const std::string& prefix = "");

}  // namespace wmgym::dynamo
