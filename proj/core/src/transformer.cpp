#include "wmgym/transformer.hpp"

#include <cmath>

#include "wmgym/linalg.hpp"

namespace wmgym::dynamo {

namespace {

constexpr double kLnEps = 1e-5;

void layer_norm(const double* x, const double* g, const double* b, int d,
                double* out, double* stats) {
  double mean = 0.0;
  for (int i = 0; i < d; ++i) mean += x[i];
  mean /= d;
  double var = 0.0;
  for (int i = 0; i < d; ++i) {
    double c = x[i] - mean;
    var += c * c;
  }
  var /= d;
  double inv = 1.0 / std::sqrt(var + kLnEps);
  for (int i = 0; i < d; ++i) out[i] = g[i] * ((x[i] - mean) * inv) + b[i];
  stats[0] = mean;
  stats[1] = inv;
}

// d_x accumulated; dg/db accumulated into grads.
void layer_norm_backward(const double* x, const double* g, const double* stats,
                         const double* dy, int d, double* dg, double* db, double* dx_acc) {
  double mean = stats[0], inv = stats[1];
  double m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < d; ++i) {
    double xhat = (x[i] - mean) * inv;
    double dxhat = dy[i] * g[i];
    m1 += dxhat;
    m2 += dxhat * xhat;
    dg[i] += dy[i] * xhat;
    db[i] += dy[i];
  }
  m1 /= d;
  m2 /= d;
  for (int i = 0; i < d; ++i) {
    double xhat = (x[i] - mean) * inv;
    double dxhat = dy[i] * g[i];
    dx_acc[i] += inv * (dxhat - m1 - xhat * m2);
  }
}

// Softmax over scores[0..m); written in one canonical order so the cached and
// uncached inference paths reduce identically.
void softmax_row(double* s, int m) {
  double mx = s[0];
  for (int j = 1; j < m; ++j) mx = std::max(mx, s[j]);
  double sum = 0.0;
  for (int j = 0; j < m; ++j) {
    s[j] = std::exp(s[j] - mx);
    sum += s[j];
  }
  double inv = 1.0 / sum;
  for (int j = 0; j < m; ++j) s[j] *= inv;
}

struct TfParams {
  struct Layer {
    const Tensor *ln1g, *ln1b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    const Tensor *ln2g, *ln2b, *w1, *b1, *w2, *b2;
  };
  std::vector<Layer> layers;
  const Tensor *lnfg, *lnfb;
};

TfParams bind_params(const ParamStore& ps, const ArchSpec& arch, const std::string& prefix) {
  TfParams p;
  p.layers.resize(arch.layers);
  for (int l = 0; l < arch.layers; ++l) {
    std::string b = prefix + "blk" + std::to_string(l) + ".";
    auto& L = p.layers[l];
    L.ln1g = &ps.param(b + "ln1.g");
    L.ln1b = &ps.param(b + "ln1.b");
    L.wq = &ps.param(b + "attn.wq");
    L.bq = &ps.param(b + "attn.bq");
    L.wk = &ps.param(b + "attn.wk");
    L.bk = &ps.param(b + "attn.bk");
    L.wv = &ps.param(b + "attn.wv");
    L.bv = &ps.param(b + "attn.bv");
    L.wo = &ps.param(b + "attn.wo");
    L.bo = &ps.param(b + "attn.bo");
    L.ln2g = &ps.param(b + "ln2.g");
    L.ln2b = &ps.param(b + "ln2.b");
    L.w1 = &ps.param(b + "mlp.w1");
    L.b1 = &ps.param(b + "mlp.b1");
    L.w2 = &ps.param(b + "mlp.w2");
    L.b2 = &ps.param(b + "mlp.b2");
  }
  p.lnfg = &ps.param(prefix + "ln_f.g");
  p.lnfb = &ps.param(prefix + "ln_f.b");
  return p;
}

struct TfGrads {
  struct Layer {
    Tensor *ln1g, *ln1b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    Tensor *ln2g, *ln2b, *w1, *b1, *w2, *b2;
  };
  std::vector<Layer> layers;
  Tensor *lnfg, *lnfb;
};

TfGrads bind_grads(ParamStore& ps, const ArchSpec& arch, const std::string& prefix) {
  TfGrads p;
  p.layers.resize(arch.layers);
  for (int l = 0; l < arch.layers; ++l) {
    std::string b = prefix + "blk" + std::to_string(l) + ".";
    auto& L = p.layers[l];
    L.ln1g = &ps.grad(b + "ln1.g");
    L.ln1b = &ps.grad(b + "ln1.b");
    L.wq = &ps.grad(b + "attn.wq");
    L.bq = &ps.grad(b + "attn.bq");
    L.wk = &ps.grad(b + "attn.wk");
    L.bk = &ps.grad(b + "attn.bk");
    L.wv = &ps.grad(b + "attn.wv");
    L.bv = &ps.grad(b + "attn.bv");
    L.wo = &ps.grad(b + "attn.wo");
    L.bo = &ps.grad(b + "attn.bo");
    L.ln2g = &ps.grad(b + "ln2.g");
    L.ln2b = &ps.grad(b + "ln2.b");
    L.w1 = &ps.grad(b + "mlp.w1");
    L.b1 = &ps.grad(b + "mlp.b1");
    L.w2 = &ps.grad(b + "mlp.w2");
    L.b2 = &ps.grad(b + "mlp.b2");
  }
  p.lnfg = &ps.grad(prefix + "ln_f.g");
  p.lnfb = &ps.grad(prefix + "ln_f.b");
  return p;
}

}  // namespace

void add_transformer_params(ParamStore& ps, const ArchSpec& arch,
                            const std::string& prefix, Rng& rng) {
  int d = arch.widths[0];
  int f = arch.widths[1];
  auto mat = [&](const std::string& name, int rows, int cols) {
    Tensor& t = ps.add(name, {rows, cols});
    double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
  };
  auto ones = [&](const std::string& name, int nn) {
    Tensor& t = ps.add(name, {nn});
    t.fill(1.0);
  };
  for (int l = 0; l < arch.layers; ++l) {
    std::string b = prefix + "blk" + std::to_string(l) + ".";
    ones(b + "ln1.g", d);
    ps.add(b + "ln1.b", {d});
    mat(b + "attn.wq", d, d);
    ps.add(b + "attn.bq", {d});
    mat(b + "attn.wk", d, d);
    ps.add(b + "attn.bk", {d});
    mat(b + "attn.wv", d, d);
    ps.add(b + "attn.bv", {d});
    mat(b + "attn.wo", d, d);
    ps.add(b + "attn.bo", {d});
    ones(b + "ln2.g", d);
    ps.add(b + "ln2.b", {d});
    mat(b + "mlp.w1", f, d);
    ps.add(b + "mlp.b1", {f});
    mat(b + "mlp.w2", d, f);
    ps.add(b + "mlp.b2", {d});
  }
  ones(prefix + "ln_f.g", d);
  ps.add(prefix + "ln_f.b", {d});
}

void KvCache::init(const ArchSpec& arch) {
  int cap = arch.context + 1;
  stride = arch.widths[0];
  k.assign(arch.layers, std::vector<double>(static_cast<size_t>(cap) * arch.widths[0], 0.0));
  v.assign(arch.layers, std::vector<double>(static_cast<size_t>(cap) * arch.widths[0], 0.0));
  len = 0;
}

void KvCache::clone_prefix(const KvCache& other, int prefix) {
  if (other.len < prefix) throw ConfigError("clone_prefix: source cache too short");
  if (k.size() != other.k.size() || stride != other.stride) {
    throw ConfigError("clone_prefix: cache layout mismatch");
  }
  size_t count = static_cast<size_t>(prefix) * stride;
  for (size_t l = 0; l < k.size(); ++l) {
    std::copy(other.k[l].begin(), other.k[l].begin() + count, k[l].begin());
    std::copy(other.v[l].begin(), other.v[l].begin() + count, v[l].begin());
  }
  len = prefix;
}

const std::vector<double>& transformer_forward(const ParamStore& ps, const ArchSpec& arch,
                                               std::span<const double> tokens, int n,
                                               TfTrainCache& cache,
                                               const std::string& prefix) {
  const int d = arch.widths[0];
  const int f = arch.widths[1];
  const int nh = arch.heads;
  const int hd = d / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (static_cast<int>(tokens.size()) != n * d) throw ConfigError("token buffer size mismatch");
  if (n > arch.context + 1) throw ConfigError("sequence exceeds context capacity");

  TfParams P = bind_params(ps, arch, prefix);
  cache.n = n;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.layers.resize(arch.layers);

  std::vector<double> x(tokens.begin(), tokens.end());
  for (int l = 0; l < arch.layers; ++l) {
    auto& C = cache.layers[l];
    const auto& L = P.layers[l];
    size_t nd = static_cast<size_t>(n) * d;
    C.x_in = x;
    C.ln1_out.resize(nd);
    C.ln1_stats.resize(static_cast<size_t>(n) * 2);
    C.q.resize(nd);
    C.k.resize(nd);
    C.v.resize(nd);
    C.attw.assign(static_cast<size_t>(nh) * n * n, 0.0);
    C.ctx.assign(nd, 0.0);
    C.attn_out.resize(nd);
    C.x_mid.resize(nd);
    for (int i = 0; i < n; ++i) {
      layer_norm(&C.x_in[i * d], L.ln1g->ptr(), L.ln1b->ptr(), d, &C.ln1_out[i * d],
                 &C.ln1_stats[i * 2]);
      matvec(L.wq->ptr(), &C.ln1_out[i * d], L.bq->ptr(), &C.q[i * d], d, d);
      matvec(L.wk->ptr(), &C.ln1_out[i * d], L.bk->ptr(), &C.k[i * d], d, d);
      matvec(L.wv->ptr(), &C.ln1_out[i * d], L.bv->ptr(), &C.v[i * d], d, d);
    }
    for (int h = 0; h < nh; ++h) {
      int off = h * hd;
      for (int i = 0; i < n; ++i) {
        double* row = &C.attw[(static_cast<size_t>(h) * n + i) * n];
        for (int j = 0; j <= i; ++j) {
          row[j] = scale * dot(&C.q[i * d + off], &C.k[j * d + off], hd);
        }
        softmax_row(row, i + 1);
        double* ctx = &C.ctx[i * d + off];
        for (int j = 0; j <= i; ++j) {
          axpy(row[j], &C.v[j * d + off], ctx, hd);
        }
      }
    }
    for (int i = 0; i < n; ++i) {
      matvec(L.wo->ptr(), &C.ctx[i * d], L.bo->ptr(), &C.attn_out[i * d], d, d);
      for (int c = 0; c < d; ++c) C.x_mid[i * d + c] = C.x_in[i * d + c] + C.attn_out[i * d + c];
    }
    C.ln2_out.resize(nd);
    C.ln2_stats.resize(static_cast<size_t>(n) * 2);
    C.mlp_pre.resize(static_cast<size_t>(n) * f);
    C.mlp_hid.resize(static_cast<size_t>(n) * f);
    for (int i = 0; i < n; ++i) {
      layer_norm(&C.x_mid[i * d], L.ln2g->ptr(), L.ln2b->ptr(), d, &C.ln2_out[i * d],
                 &C.ln2_stats[i * 2]);
      matvec(L.w1->ptr(), &C.ln2_out[i * d], L.b1->ptr(), &C.mlp_pre[i * f], f, d);
      for (int c = 0; c < f; ++c) {
        C.mlp_hid[i * f + c] = apply_activation(arch.activation, C.mlp_pre[i * f + c]);
      }
      // x = x_mid + W2 * hid + b2
      std::vector<double> out(d);
      matvec(L.w2->ptr(), &C.mlp_hid[i * f], L.b2->ptr(), out.data(), d, f);
      for (int c = 0; c < d; ++c) x[i * d + c] = C.x_mid[i * d + c] + out[c];
    }
  }
  cache.x_final = x;
  cache.lnf_out.resize(static_cast<size_t>(n) * d);
  cache.lnf_stats.resize(static_cast<size_t>(n) * 2);
  for (int i = 0; i < n; ++i) {
    layer_norm(&cache.x_final[i * d], P.lnfg->ptr(), P.lnfb->ptr(), d, &cache.lnf_out[i * d],
               &cache.lnf_stats[i * 2]);
  }
  return cache.lnf_out;
}

void transformer_backward(ParamStore& ps, const ArchSpec& arch, const TfTrainCache& cache,
                          std::span<const double> d_outputs,
                          std::vector<double>* d_tokens, const std::string& prefix) {
  const int d = arch.widths[0];
  const int f = arch.widths[1];
  const int nh = arch.heads;
  const int hd = d / nh;
  const int n = cache.n;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (static_cast<int>(d_outputs.size()) != n * d) throw ConfigError("d_outputs size mismatch");

  TfParams P = bind_params(ps, arch, prefix);
  TfGrads G = bind_grads(ps, arch, prefix);

  // Through final layer norm.
  std::vector<double> dx(static_cast<size_t>(n) * d, 0.0);
  for (int i = 0; i < n; ++i) {
    layer_norm_backward(&cache.x_final[i * d], P.lnfg->ptr(), &cache.lnf_stats[i * 2],
                        &d_outputs[i * d], d, G.lnfg->ptr(), G.lnfb->ptr(), &dx[i * d]);
  }

  std::vector<double> d_xmid(static_cast<size_t>(n) * d);
  std::vector<double> d_ctx(static_cast<size_t>(n) * d);
  std::vector<double> dq(static_cast<size_t>(n) * d);
  std::vector<double> dk(static_cast<size_t>(n) * d);
  std::vector<double> dv(static_cast<size_t>(n) * d);
  std::vector<double> d_ln1(static_cast<size_t>(n) * d);
  std::vector<double> d_hid(f), d_pre(f), d_ln2(d);

  for (int l = arch.layers - 1; l >= 0; --l) {
    const auto& C = cache.layers[l];
    const auto& L = P.layers[l];
    auto& GL = G.layers[l];

    // MLP sub-block: dx is gradient w.r.t. layer output x_out = x_mid + mlp(ln2(x_mid)).
    std::fill(d_xmid.begin(), d_xmid.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const double* dxo = &dx[i * d];
      outer_acc(dxo, &C.mlp_hid[i * f], GL.w2->ptr(), d, f);
      for (int c = 0; c < d; ++c) GL.b2->data[c] += dxo[c];
      std::fill(d_hid.begin(), d_hid.end(), 0.0);
      matvec_t_acc(L.w2->ptr(), dxo, d_hid.data(), d, f);
      for (int c = 0; c < f; ++c) {
        d_pre[c] = d_hid[c] * activation_grad(arch.activation, C.mlp_pre[i * f + c]);
      }
      outer_acc(d_pre.data(), &C.ln2_out[i * d], GL.w1->ptr(), f, d);
      for (int c = 0; c < f; ++c) GL.b1->data[c] += d_pre[c];
      std::fill(d_ln2.begin(), d_ln2.end(), 0.0);
      matvec_t_acc(L.w1->ptr(), d_pre.data(), d_ln2.data(), f, d);
      // residual + layer-norm path
      for (int c = 0; c < d; ++c) d_xmid[i * d + c] += dxo[c];
      layer_norm_backward(&C.x_mid[i * d], L.ln2g->ptr(), &C.ln2_stats[i * 2], d_ln2.data(),
                          d, GL.ln2g->ptr(), GL.ln2b->ptr(), &d_xmid[i * d]);
    }

    // Attention sub-block: x_mid = x_in + Wo ctx + bo.
    std::fill(d_ctx.begin(), d_ctx.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const double* dxm = &d_xmid[i * d];
      outer_acc(dxm, &C.ctx[i * d], GL.wo->ptr(), d, d);
      for (int c = 0; c < d; ++c) GL.bo->data[c] += dxm[c];
      matvec_t_acc(L.wo->ptr(), dxm, &d_ctx[i * d], d, d);
    }
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    std::vector<double> dalpha;
    for (int h = 0; h < nh; ++h) {
      int off = h * hd;
      for (int i = 0; i < n; ++i) {
        const double* row = &C.attw[(static_cast<size_t>(h) * n + i) * n];
        const double* dctx = &d_ctx[i * d + off];
        dalpha.assign(i + 1, 0.0);
        for (int j = 0; j <= i; ++j) {
          dalpha[j] = dot(dctx, &C.v[j * d + off], hd);
          axpy(row[j], dctx, &dv[j * d + off], hd);
        }
        double srow = 0.0;
        for (int j = 0; j <= i; ++j) srow += row[j] * dalpha[j];
        for (int j = 0; j <= i; ++j) {
          double ds = row[j] * (dalpha[j] - srow);
          axpy(ds * scale, &C.k[j * d + off], &dq[i * d + off], hd);
          axpy(ds * scale, &C.q[i * d + off], &dk[j * d + off], hd);
        }
      }
    }
    std::fill(d_ln1.begin(), d_ln1.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      outer_acc(&dq[i * d], &C.ln1_out[i * d], GL.wq->ptr(), d, d);
      outer_acc(&dk[i * d], &C.ln1_out[i * d], GL.wk->ptr(), d, d);
      outer_acc(&dv[i * d], &C.ln1_out[i * d], GL.wv->ptr(), d, d);
      for (int c = 0; c < d; ++c) {
        GL.bq->data[c] += dq[i * d + c];
        GL.bk->data[c] += dk[i * d + c];
        GL.bv->data[c] += dv[i * d + c];
      }
      matvec_t_acc(L.wq->ptr(), &dq[i * d], &d_ln1[i * d], d, d);
      matvec_t_acc(L.wk->ptr(), &dk[i * d], &d_ln1[i * d], d, d);
      matvec_t_acc(L.wv->ptr(), &dv[i * d], &d_ln1[i * d], d, d);
    }
    // dx for previous layer: residual + through ln1.
    dx = d_xmid;
    for (int i = 0; i < n; ++i) {
      layer_norm_backward(&C.x_in[i * d], L.ln1g->ptr(), &C.ln1_stats[i * 2], &d_ln1[i * d],
                          d, GL.ln1g->ptr(), GL.ln1b->ptr(), &dx[i * d]);
    }
  }
  if (d_tokens != nullptr) *d_tokens = dx;
}

namespace {

// Shared single-position block computation for the inference paths. Computes
// attention of `x` (position = n_prev, attending to k/v rows [0, n_prev] where
// row n_prev is this token's own k/v) and applies the MLP sub-block in place.
void block_apply_position(const ArchSpec& arch, const TfParams::Layer& L, double* x,
                          const double* k_rows, const double* v_rows, int n_prev,
                          std::vector<double>& scratch_q, std::vector<double>& scratch_k,
                          std::vector<double>& scratch_v, std::vector<double>& scratch_ln,
                          std::vector<double>& scratch_row, std::vector<double>& scratch_ctx,
                          std::vector<double>& scratch_f, double* out_k, double* out_v) {
  const int d = arch.widths[0];
  const int f = arch.widths[1];
  const int nh = arch.heads;
  const int hd = d / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  double stats[2];
  scratch_ln.resize(d);
  layer_norm(x, L.ln1g->ptr(), L.ln1b->ptr(), d, scratch_ln.data(), stats);
  scratch_q.resize(d);
  scratch_k.resize(d);
  scratch_v.resize(d);
  matvec(L.wq->ptr(), scratch_ln.data(), L.bq->ptr(), scratch_q.data(), d, d);
  matvec(L.wk->ptr(), scratch_ln.data(), L.bk->ptr(), scratch_k.data(), d, d);
  matvec(L.wv->ptr(), scratch_ln.data(), L.bv->ptr(), scratch_v.data(), d, d);
  if (out_k != nullptr) {
    std::copy(scratch_k.begin(), scratch_k.end(), out_k);
    std::copy(scratch_v.begin(), scratch_v.end(), out_v);
  }
  scratch_ctx.assign(d, 0.0);
  scratch_row.resize(n_prev + 1);
  for (int h = 0; h < nh; ++h) {
    int off = h * hd;
    double* row = scratch_row.data();
    for (int j = 0; j < n_prev; ++j) {
      row[j] = scale * dot(&scratch_q[off], k_rows + static_cast<size_t>(j) * d + off, hd);
    }
    row[n_prev] = scale * dot(&scratch_q[off], &scratch_k[off], hd);
    softmax_row(row, n_prev + 1);
    double* ctx = &scratch_ctx[off];
    for (int j = 0; j < n_prev; ++j) {
      axpy(row[j], v_rows + static_cast<size_t>(j) * d + off, ctx, hd);
    }
    axpy(row[n_prev], &scratch_v[off], ctx, hd);
  }
  scratch_f.resize(std::max(f, d));
  matvec(L.wo->ptr(), scratch_ctx.data(), L.bo->ptr(), scratch_f.data(), d, d);
  for (int c = 0; c < d; ++c) x[c] += scratch_f[c];
  layer_norm(x, L.ln2g->ptr(), L.ln2b->ptr(), d, scratch_ln.data(), stats);
  scratch_f.resize(f);
  matvec(L.w1->ptr(), scratch_ln.data(), L.b1->ptr(), scratch_f.data(), f, d);
  for (int c = 0; c < f; ++c) {
    scratch_f[c] = apply_activation(arch.activation, scratch_f[c]);
  }
  std::vector<double> out(d);
  matvec(L.w2->ptr(), scratch_f.data(), L.b2->ptr(), out.data(), d, f);
  for (int c = 0; c < d; ++c) x[c] += out[c];
}

}  // namespace

void transformer_forward_rollout(const ParamStore& ps, const ArchSpec& arch,
                                 std::span<const double> tokens, int n, KvCache& cache,
                                 int cache_prefix, std::span<double> out,
                                 const std::string& prefix) {
  const int d = arch.widths[0];
  const int f = arch.widths[1];
  const int nh = arch.heads;
  const int hd = d / nh;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (static_cast<int>(tokens.size()) != n * d) throw ConfigError("token buffer size mismatch");
  if (static_cast<int>(out.size()) != d) throw ConfigError("output buffer size mismatch");
  if (cache_prefix > n) throw ConfigError("cache_prefix exceeds sequence length");
  if (cache.k.empty()) cache.init(arch);

  TfParams P = bind_params(ps, arch, prefix);
  std::vector<double> x(tokens.begin(), tokens.end());
  std::vector<double> ln(static_cast<size_t>(n) * d);
  std::vector<double> q(static_cast<size_t>(n) * d);
  std::vector<double> k(static_cast<size_t>(n) * d);
  std::vector<double> v(static_cast<size_t>(n) * d);
  std::vector<double> ctx(static_cast<size_t>(n) * d);
  std::vector<double> row(n);
  std::vector<double> tmp(std::max(d, f));
  double stats[2];

  for (int l = 0; l < arch.layers; ++l) {
    const auto& L = P.layers[l];
    for (int i = 0; i < n; ++i) {
      layer_norm(&x[i * d], L.ln1g->ptr(), L.ln1b->ptr(), d, &ln[i * d], stats);
      matvec(L.wq->ptr(), &ln[i * d], L.bq->ptr(), &q[i * d], d, d);
      matvec(L.wk->ptr(), &ln[i * d], L.bk->ptr(), &k[i * d], d, d);
      matvec(L.wv->ptr(), &ln[i * d], L.bv->ptr(), &v[i * d], d, d);
    }
    for (int i = 0; i < cache_prefix; ++i) {
      std::copy(&k[i * d], &k[i * d] + d, cache.k[l].data() + static_cast<size_t>(i) * d);
      std::copy(&v[i * d], &v[i * d] + d, cache.v[l].data() + static_cast<size_t>(i) * d);
    }
    std::fill(ctx.begin(), ctx.end(), 0.0);
    for (int h = 0; h < nh; ++h) {
      int off = h * hd;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
          row[j] = scale * dot(&q[i * d + off], &k[j * d + off], hd);
        }
        softmax_row(row.data(), i + 1);
        for (int j = 0; j <= i; ++j) {
          axpy(row[j], &v[j * d + off], &ctx[i * d + off], hd);
        }
      }
    }
    for (int i = 0; i < n; ++i) {
      matvec(L.wo->ptr(), &ctx[i * d], L.bo->ptr(), tmp.data(), d, d);
      for (int c = 0; c < d; ++c) x[i * d + c] += tmp[c];
      layer_norm(&x[i * d], L.ln2g->ptr(), L.ln2b->ptr(), d, &ln[i * d], stats);
      matvec(L.w1->ptr(), &ln[i * d], L.b1->ptr(), tmp.data(), f, d);
      for (int c = 0; c < f; ++c) tmp[c] = apply_activation(arch.activation, tmp[c]);
      std::vector<double> o2(d);
      matvec(L.w2->ptr(), tmp.data(), L.b2->ptr(), o2.data(), d, f);
      for (int c = 0; c < d; ++c) x[i * d + c] += o2[c];
    }
  }
  cache.len = cache_prefix;
  layer_norm(&x[(n - 1) * d], P.lnfg->ptr(), P.lnfb->ptr(), d, out.data(), stats);
}

void transformer_forward_incremental(const ParamStore& ps, const ArchSpec& arch,
                                     std::span<const double> token, KvCache& cache,
                                     bool append_kv, std::span<double> out,
                                     const std::string& prefix) {
  const int d = arch.widths[0];
  if (static_cast<int>(token.size()) != d) throw ConfigError("token size mismatch");
  if (static_cast<int>(out.size()) != d) throw ConfigError("output buffer size mismatch");
  if (cache.k.empty()) cache.init(arch);

  TfParams P = bind_params(ps, arch, prefix);
  std::vector<double> x(token.begin(), token.end());
  std::vector<double> sq, sk, sv, sln, srow, sctx, sf;
  int n_prev = cache.len;
  for (int l = 0; l < arch.layers; ++l) {
    double* out_k = append_kv ? cache.k[l].data() + static_cast<size_t>(n_prev) * d : nullptr;
    double* out_v = append_kv ? cache.v[l].data() + static_cast<size_t>(n_prev) * d : nullptr;
    block_apply_position(arch, P.layers[l], x.data(), cache.k[l].data(), cache.v[l].data(),
                         n_prev, sq, sk, sv, sln, srow, sctx, sf, out_k, out_v);
  }
  if (append_kv) cache.len = n_prev + 1;
  double stats[2];
  layer_norm(x.data(), P.lnfg->ptr(), P.lnfb->ptr(), d, out.data(), stats);
}

}  // namespace wmgym::dynamo
