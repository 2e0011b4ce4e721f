#include "recurformer/mamba.hpp"

#include <Eigen/Core>
#include <cmath>

namespace rfm {

namespace {
using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapM = Eigen::Map<const MatRM>;
using MapM = Eigen::Map<MatRM>;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

Tensor fan_in_uniform(Shape shape, i64 fan_in, Rng& rng, bool rg) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound, rg);
}
}  // namespace

i64 MambaConfig::d_inner() const {
  const double v = k_epd * static_cast<double>(d_model_in);
  const double r = std::nearbyint(v);
  if (std::fabs(v - r) > 1e-9 || r <= 0) {
    throw config_error("mamba config: k_epd * d_model_in must be a positive integer");
  }
  return static_cast<i64>(r);
}

i64 MambaConfig::resolved_dt_rank() const {
  if (dt_rank > 0) return dt_rank;
  return std::max<i64>(1, d_model_in / 16);
}

void MambaConfig::validate() const {
  if (d_model_in <= 0) throw config_error("mamba config: d_model_in must be positive");
  if (d_conv <= 0 || d_state <= 0) throw config_error("mamba config: d_conv/d_state must be positive");
  if (k_epd <= 0) throw config_error("mamba config: k_epd must be positive");
  (void)d_inner();
}

i64 mamba_state_element_count(const MambaConfig& cfg) {
  cfg.validate();
  return cfg.d_inner() * cfg.d_conv + cfg.d_inner() * cfg.d_state;
}

MambaParams MambaParams::init(const MambaConfig& cfg, Rng& rng, bool requires_grad) {
  cfg.validate();
  MambaParams p;
  p.d_in = cfg.d_model_in;
  p.d_inner = cfg.d_inner();
  p.d_state = cfg.d_state;
  p.d_conv = cfg.d_conv;
  p.dt_rank = cfg.resolved_dt_rank();

  p.in_proj = fan_in_uniform({p.d_in, 2 * p.d_inner}, p.d_in, rng, requires_grad);
  p.conv_w = fan_in_uniform({p.d_inner, p.d_conv}, p.d_conv, rng, requires_grad);
  p.conv_b = fan_in_uniform({p.d_inner}, p.d_conv, rng, requires_grad);
  p.x_proj = fan_in_uniform({p.d_inner, p.dt_rank + 2 * p.d_state}, p.d_inner, rng, requires_grad);
  p.dt_proj = fan_in_uniform({p.dt_rank, p.d_inner}, p.dt_rank, rng, requires_grad);

  // softplus(dt_bias) log-uniform in [1e-3, 1e-1]
  p.dt_bias = Tensor::zeros({p.d_inner}, requires_grad);
  for (i64 c = 0; c < p.d_inner; ++c) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    p.dt_bias.data()[c] = std::log(std::expm1(dt));
  }

  // S4D-real: A = -exp(a_log) with a_log = log(1..d_state) per channel
  p.a_log = Tensor::zeros({p.d_inner, p.d_state}, requires_grad);
  for (i64 c = 0; c < p.d_inner; ++c)
    for (i64 s = 0; s < p.d_state; ++s)
      p.a_log.data()[c * p.d_state + s] = std::log(static_cast<double>(s + 1));

  p.d_skip = Tensor::ones({p.d_inner}, requires_grad);
  p.out_proj = fan_in_uniform({p.d_inner, p.d_in}, p.d_inner, rng, requires_grad);
  return p;
}

std::vector<Tensor*> MambaParams::parameters() {
  return {&in_proj, &conv_w, &conv_b, &x_proj, &dt_proj, &dt_bias, &a_log, &d_skip, &out_proj};
}

std::vector<const Tensor*> MambaParams::parameters() const {
  return {&in_proj, &conv_w, &conv_b, &x_proj, &dt_proj, &dt_bias, &a_log, &d_skip, &out_proj};
}

MambaState MambaState::zeros(const MambaParams& p) {
  MambaState s;
  s.d_inner = p.d_inner;
  s.d_conv = p.d_conv;
  s.d_state = p.d_state;
  s.conv_state.assign(static_cast<size_t>(p.d_inner * p.d_conv), 0.0);
  s.ssm_state.assign(static_cast<size_t>(p.d_inner * p.d_state), 0.0);
  return s;
}

i64 MambaState::element_count() const {
  return static_cast<i64>(conv_state.size() + ssm_state.size());
}

void discretize(const std::vector<double>& delta, const std::vector<double>& A,
                const std::vector<double>& B, i64 d_inner, i64 d_state,
                std::vector<double>& a_bar, std::vector<double>& b_bar) {
  if (static_cast<i64>(delta.size()) != d_inner ||
      static_cast<i64>(A.size()) != d_inner * d_state ||
      static_cast<i64>(B.size()) != d_state) {
    throw shape_error("discretize: size mismatch");
  }
  for (double d : delta) {
    if (!(d > 0.0)) throw contract_error("discretize: delta must be positive");
  }
  a_bar.resize(static_cast<size_t>(d_inner * d_state));
  b_bar.resize(static_cast<size_t>(d_inner * d_state));
  for (i64 c = 0; c < d_inner; ++c) {
    for (i64 s = 0; s < d_state; ++s) {
      a_bar[static_cast<size_t>(c * d_state + s)] =
          std::exp(delta[static_cast<size_t>(c)] * A[static_cast<size_t>(c * d_state + s)]);
      b_bar[static_cast<size_t>(c * d_state + s)] =
          delta[static_cast<size_t>(c)] * B[static_cast<size_t>(s)];
    }
  }
}

Tensor mamba_forward_parallel(const Tensor& v, const MambaParams& p) {
  if (v.dim(-1) != p.d_in) {
    throw shape_error("mamba_forward_parallel: input width " + std::to_string(v.dim(-1)) +
                      " != d_in " + std::to_string(p.d_in));
  }
  Tensor xz = ops::matmul(v, p.in_proj);
  Tensor x = ops::slice_last(xz, 0, p.d_inner);
  Tensor z = ops::slice_last(xz, p.d_inner, 2 * p.d_inner);
  x = ops::silu(ops::causal_conv1d(x, p.conv_w, p.conv_b));
  Tensor xdbl = ops::matmul(x, p.x_proj);
  Tensor dt_in = ops::slice_last(xdbl, 0, p.dt_rank);
  Tensor bm = ops::slice_last(xdbl, p.dt_rank, p.dt_rank + p.d_state);
  Tensor cm = ops::slice_last(xdbl, p.dt_rank + p.d_state, p.dt_rank + 2 * p.d_state);
  Tensor delta = ops::softplus(ops::add_bias(ops::matmul(dt_in, p.dt_proj), p.dt_bias));
  Tensor a = ops::neg(ops::exp(p.a_log));
  Tensor y = ops::selective_scan(x, delta, a, bm, cm, p.d_skip);
  Tensor gated = ops::mul(y, ops::silu(z));
  return ops::matmul(gated, p.out_proj);
}

std::vector<double> mamba_step(const std::vector<double>& v_t, const MambaParams& p,
                               MambaState& state) {
  if (static_cast<i64>(v_t.size()) != p.d_in) {
    throw shape_error("mamba_step: input width mismatch");
  }
  if (state.d_inner != p.d_inner || state.d_conv != p.d_conv || state.d_state != p.d_state) {
    throw contract_error("mamba_step: state does not match params");
  }
  const i64 ci = p.d_inner;
  const i64 n = p.d_state;
  const i64 kw = p.d_conv;

  std::vector<double> xz(static_cast<size_t>(2 * ci));
  MapM(xz.data(), 1, 2 * ci).noalias() =
      CMapM(v_t.data(), 1, p.d_in) * CMapM(p.in_proj.data(), p.d_in, 2 * ci);

  // roll the conv window and apply the depthwise kernel
  std::vector<double> x(static_cast<size_t>(ci));
  for (i64 c = 0; c < ci; ++c) {
    double* win = state.conv_state.data() + c * kw;
    for (i64 j = 0; j + 1 < kw; ++j) win[j] = win[j + 1];
    win[kw - 1] = xz[static_cast<size_t>(c)];
    double acc = p.conv_b.data()[c];
    for (i64 j = 0; j < kw; ++j) acc += p.conv_w.data()[c * kw + j] * win[j];
    x[static_cast<size_t>(c)] = acc * sigmoid(acc);  // silu
  }

  std::vector<double> xdbl(static_cast<size_t>(p.dt_rank + 2 * n));
  MapM(xdbl.data(), 1, p.dt_rank + 2 * n).noalias() =
      CMapM(x.data(), 1, ci) * CMapM(p.x_proj.data(), ci, p.dt_rank + 2 * n);

  std::vector<double> delta(static_cast<size_t>(ci));
  MapM(delta.data(), 1, ci).noalias() =
      CMapM(xdbl.data(), 1, p.dt_rank) * CMapM(p.dt_proj.data(), p.dt_rank, ci);
  for (i64 c = 0; c < ci; ++c) {
    delta[static_cast<size_t>(c)] = softplus(delta[static_cast<size_t>(c)] + p.dt_bias.data()[c]);
  }

  const std::vector<double> b_vec(xdbl.begin() + p.dt_rank, xdbl.begin() + p.dt_rank + n);
  const std::vector<double> c_vec(xdbl.begin() + p.dt_rank + n, xdbl.end());

  std::vector<double> a(static_cast<size_t>(ci * n));
  for (i64 i = 0; i < ci * n; ++i) a[static_cast<size_t>(i)] = -std::exp(p.a_log.data()[i]);
  std::vector<double> a_bar, b_bar;
  discretize(delta, a, b_vec, ci, n, a_bar, b_bar);

  std::vector<double> y(static_cast<size_t>(ci));
  for (i64 c = 0; c < ci; ++c) {
    double* h = state.ssm_state.data() + c * n;
    double acc = p.d_skip.data()[c] * x[static_cast<size_t>(c)];
    for (i64 s = 0; s < n; ++s) {
      h[s] = a_bar[static_cast<size_t>(c * n + s)] * h[s] +
             b_bar[static_cast<size_t>(c * n + s)] * x[static_cast<size_t>(c)];
      acc += c_vec[static_cast<size_t>(s)] * h[s];
    }
    y[static_cast<size_t>(c)] = acc;
  }

  // gate and project out
  std::vector<double> out(static_cast<size_t>(p.d_in));
  for (i64 c = 0; c < ci; ++c) {
    const double zc = xz[static_cast<size_t>(ci + c)];
    y[static_cast<size_t>(c)] *= zc * sigmoid(zc);
  }
  MapM(out.data(), 1, p.d_in).noalias() =
      CMapM(y.data(), 1, ci) * CMapM(p.out_proj.data(), ci, p.d_in);
  return out;
}

}  // namespace rfm
