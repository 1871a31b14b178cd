#include "wmgym/policy.hpp"

#include <cmath>

namespace wmgym::policy {

void PolicyConfig::validate() const {
  if (chunk_len < 1) throw ConfigError("chunk_len must be >= 1");
  if (bins < 2 || bins % 2 == 0) throw ConfigError("bins must be odd and >= 3");
  if (action_dims < 1 || action_dims > 3) throw ConfigError("action_dims must be 1..3");
  if (goal_classes < 1) throw ConfigError("goal_classes must be >= 1");
  if (obs_mode != "pixels" && obs_mode != "state_vector") {
    throw ConfigError("obs_mode must be pixels|state_vector");
  }
}

int PolicyConfig::obs_dim() const {
  if (obs_mode == "pixels") return obs_width * obs_height * obs_channels;
  return state_dim;
}

dynamo::ArchSpec PolicyConfig::arch() const {
  dynamo::ArchSpec a;
  a.kind = dynamo::ArchKind::mlp;
  a.widths.push_back(obs_dim() + goal_classes);
  for (int h : hidden) a.widths.push_back(h);
  a.widths.push_back(logits_per_chunk());
  a.activation = activation;
  return a;
}

std::string PolicyConfig::descriptor() const {
  return "policy:" + arch().descriptor() + ":chunk" + std::to_string(chunk_len) + ":bins" +
         std::to_string(bins) + ":dims" + std::to_string(action_dims) + ":" + obs_mode;
}

envsim::Action ActionChunk::action_at(int step, int action_dims) const {
  std::span<const double> row(decoded.data() + static_cast<size_t>(step) * action_dims,
                              action_dims);
  return envsim::Action::from_span(row);
}

double decode_action(int token, int bins) {
  if (token < 0 || token >= bins) throw ConfigError("action token out of range");
  return -1.0 + (2.0 * token + 1.0) / bins;
}

int quantize_action(double value, int bins) {
  int best = 0;
  double best_d = std::abs(value - decode_action(0, bins));
  for (int t = 1; t < bins; ++t) {
    double d = std::abs(value - decode_action(t, bins));
    if (d < best_d) {  // strict: ties stay on the lower index
      best_d = d;
      best = t;
    }
  }
  return best;
}

ParamStore init_policy(const PolicyConfig& cfg, uint64_t seed) {
  cfg.validate();
  return dynamo::init_params(cfg.arch(), seed);
}

std::vector<double> policy_input(const PolicyConfig& cfg, const envsim::Observation& obs,
                                 int goal_class) {
  if (goal_class < 0 || goal_class >= cfg.goal_classes) {
    throw ConfigError("unknown goal class: " + std::to_string(goal_class));
  }
  std::vector<double> input(static_cast<size_t>(cfg.obs_dim()) + cfg.goal_classes, 0.0);
  if (cfg.obs_mode == "pixels") {
    if (static_cast<int>(obs.pixels.size()) != cfg.obs_dim()) {
      throw ConfigError("observation pixel size does not match policy config");
    }
    std::copy(obs.pixels.begin(), obs.pixels.end(), input.begin());
  } else {
    if (static_cast<int>(obs.state_vec.size()) != cfg.state_dim) {
      throw ConfigError("observation state vector does not match policy config");
    }
    std::copy(obs.state_vec.begin(), obs.state_vec.end(), input.begin());
  }
  input[static_cast<size_t>(cfg.obs_dim()) + goal_class] = 1.0;
  return input;
}

const std::vector<double>& action_logits_cached(const ParamStore& ps, const PolicyConfig& cfg,
                                                const envsim::Observation& obs, int goal_class,
                                                dynamo::MlpCache& cache) {
  std::vector<double> input = policy_input(cfg, obs, goal_class);
  return dynamo::mlp_forward(ps, cfg.arch(), input, cache);
}

std::vector<double> action_logits(const ParamStore& ps, const PolicyConfig& cfg,
                                  const envsim::Observation& obs, int goal_class) {
  dynamo::MlpCache cache;
  return action_logits_cached(ps, cfg, obs, goal_class, cache);
}

namespace {

// log softmax(logits/T) for one token group; returns log-probs in `out`.
void log_softmax_row(std::span<const double> z, double temperature, std::span<double> out) {
  double mx = z[0] / temperature;
  for (size_t i = 1; i < z.size(); ++i) mx = std::max(mx, z[i] / temperature);
  double sum = 0.0;
  for (size_t i = 0; i < z.size(); ++i) sum += std::exp(z[i] / temperature - mx);
  double lse = mx + std::log(sum);
  for (size_t i = 0; i < z.size(); ++i) out[i] = z[i] / temperature - lse;
}

}  // namespace

ActionChunk sample_chunk(const ParamStore& ps, const PolicyConfig& cfg,
                         const envsim::Observation& obs, int goal_class, double temperature,
                         Rng& rng) {
  if (temperature <= 0.0) throw ConfigError("sampling temperature must be > 0");
  std::vector<double> logits = action_logits(ps, cfg, obs, goal_class);
  ActionChunk chunk;
  chunk.tokens.resize(cfg.tokens_per_chunk());
  chunk.decoded.resize(cfg.tokens_per_chunk());
  std::vector<double> lp(cfg.bins), lp_unit(cfg.bins);
  for (int t = 0; t < cfg.tokens_per_chunk(); ++t) {
    std::span<const double> row(logits.data() + static_cast<size_t>(t) * cfg.bins, cfg.bins);
    log_softmax_row(row, temperature, lp);
    log_softmax_row(row, 1.0, lp_unit);
    double u = rng.uniform();
    double acc = 0.0;
    int pick = cfg.bins - 1;
    for (int b = 0; b < cfg.bins; ++b) {
      acc += std::exp(lp[b]);
      if (u < acc) {
        pick = b;
        break;
      }
    }
    chunk.tokens[t] = pick;
    chunk.decoded[t] = decode_action(pick, cfg.bins);
    chunk.logprob += lp[pick];
    chunk.logprob_unit += lp_unit[pick];
  }
  return chunk;
}

ActionChunk greedy_chunk(const ParamStore& ps, const PolicyConfig& cfg,
                         const envsim::Observation& obs, int goal_class) {
  std::vector<double> logits = action_logits(ps, cfg, obs, goal_class);
  ActionChunk chunk;
  chunk.tokens.resize(cfg.tokens_per_chunk());
  chunk.decoded.resize(cfg.tokens_per_chunk());
  std::vector<double> lp(cfg.bins);
  for (int t = 0; t < cfg.tokens_per_chunk(); ++t) {
    std::span<const double> row(logits.data() + static_cast<size_t>(t) * cfg.bins, cfg.bins);
    int best = 0;
    for (int b = 1; b < cfg.bins; ++b) {
      if (row[b] > row[best]) best = b;
    }
    chunk.tokens[t] = best;
    chunk.decoded[t] = decode_action(best, cfg.bins);
    log_softmax_row(row, 1.0, lp);
    chunk.logprob += lp[best];
    chunk.logprob_unit += lp[best];
  }
  return chunk;
}

double logprob_from_logits(const PolicyConfig& cfg, std::span<const double> logits,
                           std::span<const int> tokens, double temperature,
                           std::vector<double>* d_logits) {
  if (static_cast<int>(tokens.size()) != cfg.tokens_per_chunk()) {
    throw ConfigError("token count does not match chunk layout");
  }
  if (d_logits != nullptr) d_logits->assign(logits.size(), 0.0);
  std::vector<double> lp(cfg.bins);
  double total = 0.0;
  for (int t = 0; t < cfg.tokens_per_chunk(); ++t) {
    int token = tokens[t];
    if (token < 0 || token >= cfg.bins) throw ConfigError("action token out of range");
    std::span<const double> row(logits.data() + static_cast<size_t>(t) * cfg.bins, cfg.bins);
    log_softmax_row(row, temperature, lp);
    total += lp[token];
    if (d_logits != nullptr) {
      double* drow = d_logits->data() + static_cast<size_t>(t) * cfg.bins;
      for (int b = 0; b < cfg.bins; ++b) {
        double p = std::exp(lp[b]);
        drow[b] = ((b == token ? 1.0 : 0.0) - p) / temperature;
      }
    }
  }
  return total;
}

double logprob_chunk(const ParamStore& ps, const PolicyConfig& cfg,
                     const envsim::Observation& obs, int goal_class,
                     std::span<const int> tokens, double temperature) {
  if (temperature <= 0.0) throw ConfigError("temperature must be > 0");
  std::vector<double> logits = action_logits(ps, cfg, obs, goal_class);
  return logprob_from_logits(cfg, logits, tokens, temperature);
}

double chunk_entropy(const PolicyConfig& cfg, std::span<const double> logits,
                     double temperature) {
  std::vector<double> lp(cfg.bins);
  double total = 0.0;
  for (int t = 0; t < cfg.tokens_per_chunk(); ++t) {
    std::span<const double> row(logits.data() + static_cast<size_t>(t) * cfg.bins, cfg.bins);
    log_softmax_row(row, temperature, lp);
    double h = 0.0;
    for (int b = 0; b < cfg.bins; ++b) h -= std::exp(lp[b]) * lp[b];
    total += h;
  }
  return total / cfg.tokens_per_chunk();
}

}  // namespace wmgym::policy
