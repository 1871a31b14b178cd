#include "wmgym/dynamo.hpp"

#include <cmath>
#include <numbers>

#include "wmgym/linalg.hpp"
#include "wmgym/transformer.hpp"

namespace wmgym::dynamo {

std::string to_string(ArchKind k) {
  return k == ArchKind::mlp ? "mlp" : "temporal_transformer";
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh_act: return "tanh";
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
  }
  return "tanh";
}

ArchKind arch_kind_from_string(const std::string& s) {
  if (s == "mlp") return ArchKind::mlp;
  if (s == "temporal_transformer") return ArchKind::temporal_transformer;
  throw ConfigError("unknown arch kind: " + s);
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh_act;
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation: " + s);
}

void ArchSpec::validate() const {
  for (int w : widths) {
    if (w <= 0) throw ConfigError("arch widths must be positive");
  }
  if (kind == ArchKind::mlp) {
    if (widths.size() < 2) throw ConfigError("mlp needs at least [in, out] widths");
  } else {
    if (widths.size() != 2) throw ConfigError("temporal_transformer widths are [d_model, d_ff]");
    if (layers <= 0 || heads <= 0 || context <= 0) {
      throw ConfigError("temporal_transformer needs positive layers, heads, context");
    }
    if (widths[0] % heads != 0) throw ConfigError("heads must divide d_model");
  }
}

std::string ArchSpec::descriptor() const {
  std::string d = to_string(kind) + ":";
  for (int w : widths) d += std::to_string(w) + ",";
  d += "L" + std::to_string(layers) + "H" + std::to_string(heads) +
       "C" + std::to_string(context) + ":" + to_string(activation);
  return d;
}

double apply_activation(Activation a, double x) {
  switch (a) {
    case Activation::tanh_act: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  }
  return x;
}

double activation_grad(Activation a, double x) {
  switch (a) {
    case Activation::tanh_act: {
      double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::gelu: {
      double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
      double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
      return cdf + x * pdf;
    }
  }
  return 1.0;
}

void add_mlp_params(ParamStore& ps, const ArchSpec& arch, const std::string& prefix,
                    Rng& rng) {
  for (size_t i = 0; i + 1 < arch.widths.size(); ++i) {
    int in = arch.widths[i];
    int out = arch.widths[i + 1];
    Tensor& w = ps.add(prefix + "fc" + std::to_string(i) + ".W", {out, in});
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    ps.add(prefix + "fc" + std::to_string(i) + ".b", {out});
  }
}

ParamStore init_params(const ArchSpec& arch, uint64_t seed) {
  arch.validate();
  ParamStore ps;
  Rng rng(seed);
  if (arch.kind == ArchKind::mlp) {
    add_mlp_params(ps, arch, "", rng);
  } else {
    add_transformer_params(ps, arch, "", rng);
  }
  return ps;
}

const std::vector<double>& mlp_forward(const ParamStore& ps, const ArchSpec& arch,
                                       std::span<const double> input, MlpCache& cache,
                                       const std::string& prefix) {
  size_t n_layers = arch.widths.size() - 1;
  if (static_cast<int>(input.size()) != arch.widths[0]) {
    throw ConfigError("mlp input size mismatch");
  }
  cache.pre.resize(n_layers);
  cache.act.resize(n_layers + 1);
  cache.act[0].assign(input.begin(), input.end());
  for (size_t l = 0; l < n_layers; ++l) {
    const Tensor& w = ps.param(prefix + "fc" + std::to_string(l) + ".W");
    const Tensor& b = ps.param(prefix + "fc" + std::to_string(l) + ".b");
    int rows = arch.widths[l + 1];
    int cols = arch.widths[l];
    cache.pre[l].resize(rows);
    matvec(w.ptr(), cache.act[l].data(), b.ptr(), cache.pre[l].data(), rows, cols);
    cache.act[l + 1].resize(rows);
    if (l + 1 == n_layers) {
      cache.act[l + 1] = cache.pre[l];  // final layer linear
    } else {
      for (int r = 0; r < rows; ++r) {
        cache.act[l + 1][r] = apply_activation(arch.activation, cache.pre[l][r]);
      }
    }
  }
  return cache.act[n_layers];
}

void mlp_backward(ParamStore& ps, const ArchSpec& arch, const MlpCache& cache,
                  std::span<const double> d_output, std::vector<double>* d_input,
                  const std::string& prefix) {
  size_t n_layers = arch.widths.size() - 1;
  std::vector<double> d_pre(d_output.begin(), d_output.end());
  std::vector<double> d_prev;
  for (size_t li = n_layers; li-- > 0;) {
    int rows = arch.widths[li + 1];
    int cols = arch.widths[li];
    if (li + 1 != n_layers) {
      // arriving gradient is w.r.t. activation output; fold in act'
      for (int r = 0; r < rows; ++r) {
        d_pre[r] *= activation_grad(arch.activation, cache.pre[li][r]);
      }
    }
    Tensor& gw = ps.grad(prefix + "fc" + std::to_string(li) + ".W");
    Tensor& gb = ps.grad(prefix + "fc" + std::to_string(li) + ".b");
    outer_acc(d_pre.data(), cache.act[li].data(), gw.ptr(), rows, cols);
    for (int r = 0; r < rows; ++r) gb.data[r] += d_pre[r];
    if (li > 0 || d_input != nullptr) {
      const Tensor& w = ps.param(prefix + "fc" + std::to_string(li) + ".W");
      d_prev.assign(cols, 0.0);
      matvec_t_acc(w.ptr(), d_pre.data(), d_prev.data(), rows, cols);
      d_pre = d_prev;
    }
  }
  if (d_input != nullptr) *d_input = d_pre;
}

AdamW::AdamW(const ParamStore& ps, AdamWConfig cfg) : cfg_(cfg) {
  m_.reserve(ps.size());
  v_.reserve(ps.size());
  for (size_t i = 0; i < ps.size(); ++i) {
    m_.emplace_back(ps.entry(i).value.shape);
    v_.emplace_back(ps.entry(i).value.shape);
  }
}

double AdamW::step(ParamStore& ps) {
  if (m_.size() != ps.size()) throw ConfigError("AdamW state does not match store");
  double norm = ps.grad_norm();
  double scale = 1.0;
  if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < ps.size(); ++i) {
    auto& e = ps.entry(i);
    double* p = e.value.ptr();
    const double* g = e.grad.ptr();
    double* m = m_[i].ptr();
    double* v = v_[i].ptr();
    size_t n = e.value.size();
    for (size_t j = 0; j < n; ++j) {
      double gj = g[j] * scale;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      p[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[j]);
    }
  }
  return norm;
}

namespace {

double head_loss_and_grad(const LossHead& head, const std::vector<double>& outputs,
                          std::vector<double>& d_out) {
  d_out.assign(outputs.size(), 0.0);
  if (const auto* mse = std::get_if<MseHead>(&head)) {
    if (mse->target.size() != outputs.size()) throw ConfigError("mse target size mismatch");
    double loss = 0.0;
    double inv = 1.0 / static_cast<double>(outputs.size());
    for (size_t i = 0; i < outputs.size(); ++i) {
      double d = outputs[i] - mse->target[i];
      loss += d * d;
      d_out[i] = 2.0 * d * inv;
    }
    return loss * inv;
  }
  const auto& xent = std::get<XentHead>(head);
  if (xent.classes <= 0 || outputs.size() % xent.classes != 0) {
    throw ConfigError("xent head: outputs not divisible by classes");
  }
  size_t rows = outputs.size() / xent.classes;
  if (xent.targets.size() != rows) throw ConfigError("xent head: target count mismatch");
  double loss = 0.0;
  for (size_t r = 0; r < rows; ++r) {
    const double* z = outputs.data() + r * xent.classes;
    double* dz = d_out.data() + r * xent.classes;
    double mx = z[0];
    for (int c = 1; c < xent.classes; ++c) mx = std::max(mx, z[c]);
    double sum = 0.0;
    for (int c = 0; c < xent.classes; ++c) sum += std::exp(z[c] - mx);
    double lse = mx + std::log(sum);
    int t = xent.targets[r];
    if (t < 0 || t >= xent.classes) throw ConfigError("xent head: target out of range");
    loss += lse - z[t];
    for (int c = 0; c < xent.classes; ++c) dz[c] = std::exp(z[c] - lse);
    dz[t] -= 1.0;
  }
  return loss;
}

}  // namespace

ForwardBackwardResult forward_backward(ParamStore& ps, const ArchSpec& arch,
                                       std::span<const double> inputs,
                                       const LossHead& head) {
  ForwardBackwardResult res;
  std::vector<double> d_out;
  if (arch.kind == ArchKind::mlp) {
    MlpCache cache;
    res.outputs = mlp_forward(ps, arch, inputs, cache);
    res.loss = head_loss_and_grad(head, res.outputs, d_out);
    mlp_backward(ps, arch, cache, d_out);
  } else {
    int d = arch.widths[0];
    if (inputs.size() % d != 0) throw ConfigError("transformer input not multiple of d_model");
    int n = static_cast<int>(inputs.size()) / d;
    TfTrainCache cache;
    res.outputs = transformer_forward(ps, arch, inputs, n, cache);
    res.loss = head_loss_and_grad(head, res.outputs, d_out);
    transformer_backward(ps, arch, cache, d_out);
  }
  for (double v : res.outputs) {
    if (!std::isfinite(v)) throw NumericalError("forward_backward: non-finite output");
  }
  return res;
}

GradCheckReport grad_check(const ArchSpec& arch, uint64_t seed, int n_probes, double tol,
                           int corrupt_coordinate) {
  arch.validate();
  if (n_probes < 1) throw ConfigError("grad_check needs n_probes >= 1");
  ParamStore ps = init_params(arch, seed);
  Rng rng = Rng(seed).fork("grad_check");

  size_t in_size;
  size_t out_size;
  if (arch.kind == ArchKind::mlp) {
    in_size = static_cast<size_t>(arch.widths[0]);
    out_size = static_cast<size_t>(arch.widths.back());
  } else {
    int n = std::min(arch.context, 5);
    in_size = static_cast<size_t>(n) * arch.widths[0];
    out_size = in_size;
  }
  std::vector<double> inputs(in_size);
  for (double& v : inputs) v = rng.uniform(-1.0, 1.0);
  std::vector<double> target(out_size);
  for (double& v : target) v = rng.uniform(-1.0, 1.0);
  LossHead head = MseHead{target};

  ps.zero_grads();
  forward_backward(ps, arch, inputs, head);

  // Snapshot analytic grads, then probe coordinates by central differences.
  std::vector<std::pair<size_t, size_t>> probes;
  for (int p = 0; p < n_probes; ++p) {
    size_t e = rng.uniform_int(ps.size());
    size_t j = rng.uniform_int(ps.entry(e).value.size());
    probes.emplace_back(e, j);
  }

  std::vector<double> analytic_grads(n_probes);
  for (int p = 0; p < n_probes; ++p) {
    auto [e, j] = probes[p];
    analytic_grads[p] = ps.entry(e).grad.data[j];
  }

  const double h = 1e-4;
  GradCheckReport report;
  report.probes = n_probes;
  for (int p = 0; p < n_probes; ++p) {
    auto [e, j] = probes[p];
    double analytic = analytic_grads[p];
    if (p == corrupt_coordinate) analytic += 1.0;
    double& coord = ps.entry(e).value.data[j];
    double saved = coord;
    coord = saved + h;
    double lp = forward_backward(ps, arch, inputs, head).loss;
    coord = saved - h;
    double lm = forward_backward(ps, arch, inputs, head).loss;
    coord = saved;
    double fd = (lp - lm) / (2.0 * h);
    // the 1e-6 floor keeps structurally-zero gradients (softmax shift
    // invariance makes some bias grads exactly 0) from registering as error
    double rel = std::abs(analytic - fd) / std::max(1e-6, std::abs(analytic) + std::abs(fd));
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = ps.entry(e).name;
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace wmgym::dynamo
