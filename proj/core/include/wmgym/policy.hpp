#pragma once

// Stochastic chunked-action policy: observation + goal class -> per-dimension
// categorical distributions over binned action values for a chunk of
// consecutive actions, with temperature sampling and exact log-probabilities.
//
// The network is a plain MLP over [flattened observation ++ one-hot goal
// class]; the first-layer slice acting on the one-hot block is the learned
// goal embedding table.

#include <string>
#include <vector>

#include "wmgym/dynamo.hpp"
#include "wmgym/envsim.hpp"

namespace wmgym::policy {

struct PolicyConfig {
  int chunk_len = 5;
  int bins = 11;  // odd, so a zero-centered bin exists
  int action_dims = 3;
  int goal_classes = 10;
  std::vector<int> hidden = {256, 256};
  dynamo::Activation activation = dynamo::Activation::tanh_act;
  std::string obs_mode = "pixels";  // "pixels" | "state_vector"
  int obs_width = 16, obs_height = 16, obs_channels = 3;
  int state_dim = 21;

  void validate() const;
  int obs_dim() const;
  int logits_per_chunk() const { return chunk_len * action_dims * bins; }
  int tokens_per_chunk() const { return chunk_len * action_dims; }
  dynamo::ArchSpec arch() const;
  std::string descriptor() const;  // hashed into checkpoints
};

struct ActionChunk {
  std::vector<int> tokens;           // chunk_len * action_dims bin indices
  std::vector<double> decoded;       // bin centers in [-1, 1]
  double logprob = 0.0;              // at the sampling temperature
  double logprob_unit = 0.0;         // at temperature 1

  envsim::Action action_at(int step, int action_dims) const;
};

// Uniform bin centers over [-1, 1]: center = -1 + (2*token + 1) / bins.
double decode_action(int token, int bins);
// Nearest bin center; ties break toward the lower index.
int quantize_action(double value, int bins);

ParamStore init_policy(const PolicyConfig& cfg, uint64_t seed);

// Assembles [obs ++ one-hot goal] respecting cfg.obs_mode.
std::vector<double> policy_input(const PolicyConfig& cfg, const envsim::Observation& obs,
                                 int goal_class);

// Deterministic forward pass to chunk logits [chunk_len x action_dims x bins].
std::vector<double> action_logits(const ParamStore& ps, const PolicyConfig& cfg,
                                  const envsim::Observation& obs, int goal_class);

// Forward keeping the cache for a later backward through the MLP.
const std::vector<double>& action_logits_cached(const ParamStore& ps, const PolicyConfig& cfg,
                                                const envsim::Observation& obs, int goal_class,
                                                dynamo::MlpCache& cache);

// Per-token categorical sampling from softmax(logits / temperature); records
// the chunk log-probability under both the scaled and unit distributions.
ActionChunk sample_chunk(const ParamStore& ps, const PolicyConfig& cfg,
                         const envsim::Observation& obs, int goal_class, double temperature,
                         Rng& rng);

// Per-token argmax (the temperature -> 0 limit).
ActionChunk greedy_chunk(const ParamStore& ps, const PolicyConfig& cfg,
                         const envsim::Observation& obs, int goal_class);

// Sum over chunk and dims of log softmax(logits / temperature)[token].
double logprob_chunk(const ParamStore& ps, const PolicyConfig& cfg,
                     const envsim::Observation& obs, int goal_class,
                     std::span<const int> tokens, double temperature);

// Log-probabilities of given tokens from precomputed logits; fills
// d_logits (same layout) with the gradient of the summed logprob when
// requested. Shared by the BC and surrogate losses.
double logprob_from_logits(const PolicyConfig& cfg, std::span<const double> logits,
                           std::span<const int> tokens, double temperature,
                           std::vector<double>* d_logits = nullptr);

// Mean per-token entropy of the chunk distributions at the given temperature.
double chunk_entropy(const PolicyConfig& cfg, std::span<const double> logits,
                     double temperature);

}  // namespace wmgym::policy
