#include "recurformer/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "recurformer/checkpoint.hpp"

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

Tensor fan_in_uniform(Shape shape, i64 fan_in, Rng& rng, bool rg) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound, rg);
}

Tensor clone_param(const Tensor& t) {
  std::vector<double> data(t.data(), t.data() + t.numel());
  return Tensor::from_data(t.shape(), std::move(data), true);
}
}  // namespace

i64 ModelConfig::resolved_ffn_hidden() const {
  if (ffn_hidden > 0) return ffn_hidden;
  const i64 raw = (8 * attention.d_model + 2) / 3;  // 8/3 ratio
  return ((raw + 7) / 8) * 8;
}

void ModelConfig::validate() const {
  attention.validate();
  if (n_layers <= 0) throw config_error("model config: n_layers must be positive");
  if (vocab_size <= 0) throw config_error("model config: vocab_size must be positive");
  if (norm_eps <= 0) throw config_error("model config: norm_eps must be positive");
}

HeadAssignment HeadAssignment::full_attention(i64 n_layers, i64 n_heads) {
  HeadAssignment a;
  a.heads_att.assign(static_cast<size_t>(n_layers), {});
  a.heads_m.assign(static_cast<size_t>(n_layers), {});
  for (i64 l = 0; l < n_layers; ++l) {
    a.heads_att[static_cast<size_t>(l)].resize(static_cast<size_t>(n_heads));
    std::iota(a.heads_att[static_cast<size_t>(l)].begin(),
              a.heads_att[static_cast<size_t>(l)].end(), 0);
  }
  return a;
}

i64 replaced_head_count(double beta, i64 total_heads) {
  if (beta < 0.0 || beta > 1.0) {
    throw contract_error("beta must lie in [0,1], got " + format_double(beta));
  }
  return static_cast<i64>(std::llround(beta * static_cast<double>(total_heads)));
}

HeadAssignment HeadAssignment::per_layer_prefix(i64 n_layers, i64 n_heads, double beta) {
  const i64 total = replaced_head_count(beta, n_layers * n_heads);
  HeadAssignment a;
  a.heads_att.assign(static_cast<size_t>(n_layers), {});
  a.heads_m.assign(static_cast<size_t>(n_layers), {});
  const i64 base = total / n_layers;
  const i64 rem = total % n_layers;
  for (i64 l = 0; l < n_layers; ++l) {
    const i64 k = base + (l < rem ? 1 : 0);
    for (i64 h = 0; h < n_heads; ++h) {
      if (h < k) {
        a.heads_m[static_cast<size_t>(l)].push_back(h);
      } else {
        a.heads_att[static_cast<size_t>(l)].push_back(h);
      }
    }
  }
  return a;
}

void HeadAssignment::validate(i64 n_layers, i64 n_heads) const {
  if (static_cast<i64>(heads_att.size()) != n_layers ||
      static_cast<i64>(heads_m.size()) != n_layers) {
    throw contract_error("head assignment: layer count mismatch");
  }
  for (i64 l = 0; l < n_layers; ++l) {
    std::vector<bool> seen(static_cast<size_t>(n_heads), false);
    auto check = [&](const std::vector<i64>& hs) {
      for (size_t i = 0; i < hs.size(); ++i) {
        const i64 h = hs[i];
        if (h < 0 || h >= n_heads) throw contract_error("head assignment: head index out of range");
        if (seen[static_cast<size_t>(h)]) throw contract_error("head assignment: duplicate head");
        seen[static_cast<size_t>(h)] = true;
        if (i > 0 && hs[i - 1] >= h) throw contract_error("head assignment: lists must be sorted");
      }
    };
    check(heads_att[static_cast<size_t>(l)]);
    check(heads_m[static_cast<size_t>(l)]);
    for (bool b : seen) {
      if (!b) throw contract_error("head assignment: not all heads covered");
    }
  }
}

i64 HeadAssignment::replaced_total() const {
  i64 n = 0;
  for (const auto& hs : heads_m) n += static_cast<i64>(hs.size());
  return n;
}

LayerPlan make_layer_plan(const AttentionConfig& cfg, const std::vector<i64>& heads_att,
                          const std::vector<i64>& heads_m) {
  LayerPlan p;
  p.heads_att = heads_att;
  p.heads_m = heads_m;
  p.d_head = cfg.d_head();
  p.mamba_width = static_cast<i64>(heads_m.size()) * p.d_head;
  const i64 gs = cfg.group_size();
  // A kv-head's cache is kept iff at least one query head in its group stays.
  std::vector<i64> kv_slot(static_cast<size_t>(cfg.n_kv_heads), -1);
  for (i64 h : heads_att) {
    const i64 kv = h / gs;
    if (kv_slot[static_cast<size_t>(kv)] < 0) {
      kv_slot[static_cast<size_t>(kv)] = static_cast<i64>(p.retained_kv.size());
      p.retained_kv.push_back(kv);
    }
  }
  for (i64 h : heads_att) {
    p.qh_to_kvslot.push_back(kv_slot[static_cast<size_t>(h / gs)]);
  }
  return p;
}

void Model::rebuild_plans() {
  cfg.validate();
  assign.validate(cfg.n_layers, cfg.attention.n_heads);
  plans.clear();
  for (i64 l = 0; l < cfg.n_layers; ++l) {
    plans.push_back(make_layer_plan(cfg.attention, assign.heads_att[static_cast<size_t>(l)],
                                    assign.heads_m[static_cast<size_t>(l)]));
  }
}

Model Model::random(const ModelConfig& cfg, const HeadAssignment& assign, u64 seed) {
  Model m;
  m.cfg = cfg;
  m.assign = assign;
  m.init_seed = seed;
  m.rebuild_plans();

  Rng rng(seed);
  const i64 d = cfg.attention.d_model;
  const i64 dh = cfg.attention.d_head();
  const i64 hidden = cfg.resolved_ffn_hidden();

  m.tok_embed = Tensor::normal({cfg.vocab_size, d}, rng, 0.0, 0.02, true);
  for (i64 l = 0; l < cfg.n_layers; ++l) {
    const LayerPlan& plan = m.plans[static_cast<size_t>(l)];
    LayerWeights w;
    if (plan.has_attention()) {
      w.wq = fan_in_uniform({d, static_cast<i64>(plan.heads_att.size()) * dh}, d, rng, true);
      w.wk = fan_in_uniform({d, static_cast<i64>(plan.retained_kv.size()) * dh}, d, rng, true);
    }
    w.wv = fan_in_uniform({d, cfg.attention.n_kv_heads * dh}, d, rng, true);
    w.wo = fan_in_uniform({d, d}, d, rng, true);
    w.attn_norm = Tensor::ones({d}, true);
    w.ffn_norm = Tensor::ones({d}, true);
    w.w_gate = fan_in_uniform({d, hidden}, d, rng, true);
    w.w_up = fan_in_uniform({d, hidden}, d, rng, true);
    w.w_down = fan_in_uniform({hidden, d}, hidden, rng, true);
    if (plan.has_mamba()) {
      Rng mrng = rng.fork(0x6d616d62ULL + static_cast<u64>(l));
      w.mamba = MambaParams::init(cfg.mamba.for_width(plan.mamba_width), mrng, true);
    }
    m.layers.push_back(std::move(w));
  }
  m.final_norm = Tensor::ones({d}, true);
  m.lm_head = fan_in_uniform({d, cfg.vocab_size}, d, rng, true);
  return m;
}

std::vector<Tensor*> Model::parameters() {
  std::vector<Tensor*> ps;
  ps.push_back(&tok_embed);
  for (auto& w : layers) {
    for (Tensor* t : {&w.wq, &w.wk, &w.wv, &w.wo, &w.attn_norm, &w.ffn_norm, &w.w_gate,
                      &w.w_up, &w.w_down}) {
      if (t->defined()) ps.push_back(t);
    }
    if (w.mamba) {
      for (Tensor* t : w.mamba->parameters()) ps.push_back(t);
    }
  }
  ps.push_back(&final_norm);
  ps.push_back(&lm_head);
  return ps;
}

i64 Model::parameter_count() const {
  i64 n = 0;
  n += tok_embed.numel() + final_norm.numel() + lm_head.numel();
  for (const auto& w : layers) {
    for (const Tensor* t : {&w.wq, &w.wk, &w.wv, &w.wo, &w.attn_norm, &w.ffn_norm,
                            &w.w_gate, &w.w_up, &w.w_down}) {
      if (t->defined()) n += t->numel();
    }
    if (w.mamba) {
      for (const Tensor* t : w.mamba->parameters()) n += t->numel();
    }
  }
  return n;
}

namespace {

// canonical head-order permutation for concat(att_out, mamba_out)
std::vector<i64> canonical_permutation(const LayerPlan& plan, i64 n_heads) {
  const i64 dh = plan.d_head;
  std::vector<i64> src_of_head(static_cast<size_t>(n_heads), -1);
  for (size_t r = 0; r < plan.heads_att.size(); ++r) {
    src_of_head[static_cast<size_t>(plan.heads_att[r])] = static_cast<i64>(r) * dh;
  }
  const i64 att_w = static_cast<i64>(plan.heads_att.size()) * dh;
  for (size_t r = 0; r < plan.heads_m.size(); ++r) {
    src_of_head[static_cast<size_t>(plan.heads_m[r])] = att_w + static_cast<i64>(r) * dh;
  }
  std::vector<i64> perm(static_cast<size_t>(n_heads * dh));
  for (i64 h = 0; h < n_heads; ++h) {
    for (i64 j = 0; j < dh; ++j) {
      perm[static_cast<size_t>(h * dh + j)] = src_of_head[static_cast<size_t>(h)] + j;
    }
  }
  return perm;
}

std::vector<i64> kv_block_columns(const std::vector<i64>& kv_heads, i64 dh) {
  std::vector<i64> cols;
  cols.reserve(kv_heads.size() * static_cast<size_t>(dh));
  for (i64 kv : kv_heads) {
    for (i64 j = 0; j < dh; ++j) cols.push_back(kv * dh + j);
  }
  return cols;
}

}  // namespace

Tensor model_forward(const Model& m, const std::vector<int>& tokens, i64 batch,
                     i64 seq_len, std::vector<AttentionRecord>* records,
                     const std::vector<i64>* logit_rows) {
  m.cfg.validate();
  if (tokens.empty()) throw contract_error("model_forward: empty token sequence");
  if (records && batch != 1) {
    throw contract_error("model_forward: records require batch == 1");
  }
  const AttentionConfig& att = m.cfg.attention;
  const i64 dh = att.d_head();
  const i64 gs = att.group_size();

  Tensor x = ops::embedding(tokens, batch, seq_len, m.tok_embed);
  std::vector<i64> positions(static_cast<size_t>(seq_len));
  for (i64 t = 0; t < seq_len; ++t) positions[static_cast<size_t>(t)] = t;

  if (records) records->assign(static_cast<size_t>(m.cfg.n_layers), AttentionRecord{});

  for (i64 l = 0; l < m.cfg.n_layers; ++l) {
    const LayerWeights& w = m.layers[static_cast<size_t>(l)];
    const LayerPlan& plan = m.plans[static_cast<size_t>(l)];

    Tensor xn = ops::rmsnorm(x, w.attn_norm, m.cfg.norm_eps);
    Tensor v_full = ops::matmul(xn, w.wv);

    std::vector<Tensor> streams;
    if (plan.has_attention()) {
      Tensor q = ops::rope(ops::matmul(xn, w.wq), static_cast<i64>(plan.heads_att.size()),
                           dh, positions, att.rope_theta);
      Tensor k = ops::rope(ops::matmul(xn, w.wk), static_cast<i64>(plan.retained_kv.size()),
                           dh, positions, att.rope_theta);
      Tensor v_att = ops::select_columns(v_full, kv_block_columns(plan.retained_kv, dh));
      std::vector<std::vector<double>> probs;
      Tensor att_out = ops::causal_attention(
          q, k, v_att, static_cast<i64>(plan.heads_att.size()),
          static_cast<i64>(plan.retained_kv.size()), dh, plan.qh_to_kvslot,
          records ? &probs : nullptr);
      if (records) {
        AttentionRecord& rec = (*records)[static_cast<size_t>(l)];
        rec.seq_len = seq_len;
        rec.head_ids = plan.heads_att;
        rec.head_weights = std::move(probs);
      }
      streams.push_back(att_out);
    }
    if (plan.has_mamba()) {
      std::vector<i64> mcols;
      mcols.reserve(plan.heads_m.size() * static_cast<size_t>(dh));
      for (i64 h : plan.heads_m) {
        const i64 kv = h / gs;
        for (i64 j = 0; j < dh; ++j) mcols.push_back(kv * dh + j);
      }
      Tensor v_m = ops::select_columns(v_full, mcols);
      streams.push_back(mamba_forward_parallel(v_m, *w.mamba));
    }
    if (records) {
      AttentionRecord& rec = (*records)[static_cast<size_t>(l)];
      rec.seq_len = seq_len;
      rec.value_l1.assign(static_cast<size_t>(seq_len), 0.0);
      rec.value_l2.assign(static_cast<size_t>(seq_len), 0.0);
      const i64 vw = v_full.dim(-1);
      for (i64 t = 0; t < seq_len; ++t) {
        double l1 = 0.0, l2 = 0.0;
        for (i64 j = 0; j < vw; ++j) {
          const double val = v_full.data()[t * vw + j];
          l1 += std::fabs(val);
          l2 += val * val;
        }
        rec.value_l1[static_cast<size_t>(t)] = l1;
        rec.value_l2[static_cast<size_t>(t)] = std::sqrt(l2);
      }
    }

    Tensor merged = streams.size() == 1 ? streams[0] : ops::concat_last(streams);
    Tensor canon = ops::select_columns(merged, canonical_permutation(plan, att.n_heads));
    x = ops::add(x, ops::matmul(canon, w.wo));

    Tensor xf = ops::rmsnorm(x, w.ffn_norm, m.cfg.norm_eps);
    Tensor gated = ops::mul(ops::silu(ops::matmul(xf, w.w_gate)), ops::matmul(xf, w.w_up));
    x = ops::add(x, ops::matmul(gated, w.w_down));
  }

  Tensor xn = ops::rmsnorm(x, m.final_norm, m.cfg.norm_eps);
  if (logit_rows) xn = ops::select_rows(xn, *logit_rows);
  return ops::matmul(xn, m.lm_head);
}

Model convert_model(const Model& base, const RecencyReport& report, double beta,
                    u64 mamba_seed) {
  base.cfg.validate();
  const i64 n_layers = base.cfg.n_layers;
  const i64 n_heads = base.cfg.attention.n_heads;
  if (report.n_layers != n_layers || report.n_heads != n_heads) {
    throw contract_error("convert_model: report does not cover the base model");
  }
  for (i64 l = 0; l < n_layers; ++l) {
    if (!base.assign.heads_m[static_cast<size_t>(l)].empty()) {
      throw contract_error("convert_model: base model must be pure attention");
    }
  }
  const i64 total = n_layers * n_heads;
  const i64 k = replaced_head_count(beta, total);

  // Global ranking: highest RA-I first; ties broken by lower layer then head.
  std::vector<i64> order(static_cast<size_t>(total));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](i64 a, i64 b) {
    const i64 ra = report.ra_index[static_cast<size_t>(a)];
    const i64 rb = report.ra_index[static_cast<size_t>(b)];
    if (ra != rb) return ra > rb;
    return a < b;  // flat index already orders (layer, head)
  });

  HeadAssignment assign;
  assign.heads_att.assign(static_cast<size_t>(n_layers), {});
  assign.heads_m.assign(static_cast<size_t>(n_layers), {});
  std::vector<bool> replaced(static_cast<size_t>(total), false);
  for (i64 i = 0; i < k; ++i) replaced[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;
  for (i64 l = 0; l < n_layers; ++l) {
    for (i64 h = 0; h < n_heads; ++h) {
      if (replaced[static_cast<size_t>(l * n_heads + h)]) {
        assign.heads_m[static_cast<size_t>(l)].push_back(h);
      } else {
        assign.heads_att[static_cast<size_t>(l)].push_back(h);
      }
    }
  }

  Model out;
  out.cfg = base.cfg;
  out.assign = assign;
  out.init_seed = base.init_seed;
  out.rebuild_plans();

  const i64 dh = base.cfg.attention.d_head();
  out.tok_embed = clone_param(base.tok_embed);
  out.final_norm = clone_param(base.final_norm);
  out.lm_head = clone_param(base.lm_head);

  for (i64 l = 0; l < n_layers; ++l) {
    const LayerWeights& bw = base.layers[static_cast<size_t>(l)];
    const LayerPlan& plan = out.plans[static_cast<size_t>(l)];
    LayerWeights w;
    if (plan.has_attention()) {
      // verbatim column slices of the retained heads
      const i64 d = base.cfg.attention.d_model;
      const i64 qa = static_cast<i64>(plan.heads_att.size()) * dh;
      w.wq = Tensor::zeros({d, qa}, true);
      for (size_t r = 0; r < plan.heads_att.size(); ++r) {
        const i64 src = plan.heads_att[r] * dh;
        for (i64 row = 0; row < d; ++row) {
          std::memcpy(w.wq.data() + row * qa + static_cast<i64>(r) * dh,
                      bw.wq.data() + row * n_heads * dh + src,
                      static_cast<size_t>(dh) * sizeof(double));
        }
      }
      const i64 n_kv = base.cfg.attention.n_kv_heads;
      const i64 ka = static_cast<i64>(plan.retained_kv.size()) * dh;
      w.wk = Tensor::zeros({d, ka}, true);
      for (size_t r = 0; r < plan.retained_kv.size(); ++r) {
        const i64 src = plan.retained_kv[r] * dh;
        for (i64 row = 0; row < d; ++row) {
          std::memcpy(w.wk.data() + row * ka + static_cast<i64>(r) * dh,
                      bw.wk.data() + row * n_kv * dh + src,
                      static_cast<size_t>(dh) * sizeof(double));
        }
      }
    }
    w.wv = clone_param(bw.wv);
    w.wo = clone_param(bw.wo);
    w.attn_norm = clone_param(bw.attn_norm);
    w.ffn_norm = clone_param(bw.ffn_norm);
    w.w_gate = clone_param(bw.w_gate);
    w.w_up = clone_param(bw.w_up);
    w.w_down = clone_param(bw.w_down);
    if (plan.has_mamba()) {
      Rng mrng = Rng(mamba_seed).fork(static_cast<u64>(l));
      w.mamba = MambaParams::init(base.cfg.mamba.for_width(plan.mamba_width), mrng, true);
    }
    out.layers.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// inference

InferenceSession::InferenceSession(const Model& m) : m_(m) {
  const i64 dh = m.cfg.attention.d_head();
  kv_.resize(static_cast<size_t>(m.cfg.n_layers));
  mamba_.resize(static_cast<size_t>(m.cfg.n_layers));
  for (i64 l = 0; l < m.cfg.n_layers; ++l) {
    const LayerPlan& plan = m.plans[static_cast<size_t>(l)];
    kv_[static_cast<size_t>(l)].init(static_cast<i64>(plan.retained_kv.size()), dh);
    if (plan.has_mamba()) {
      mamba_[static_cast<size_t>(l)] = MambaState::zeros(*m.layers[static_cast<size_t>(l)].mamba);
    }
  }
}

i64 InferenceSession::kv_element_count() const {
  i64 n = 0;
  for (const auto& c : kv_) n += c.element_count();
  return n;
}

i64 InferenceSession::mamba_element_count() const {
  i64 n = 0;
  for (size_t l = 0; l < mamba_.size(); ++l) {
    if (m_.plans[l].has_mamba()) n += mamba_[l].element_count();
  }
  return n;
}

std::vector<double> InferenceSession::prefill(const std::vector<int>& tokens,
                                              PrefillMode mode,
                                              std::vector<AttentionRecord>* records) {
  if (n_tokens_ != 0) throw contract_error("prefill: session already holds tokens");
  if (tokens.empty()) throw contract_error("prefill: empty token sequence");
  return forward_rows(tokens, 0, mode, records);
}

std::vector<double> InferenceSession::step(int token) {
  if (n_tokens_ == 0) throw contract_error("step: prefill first");
  return forward_rows({token}, n_tokens_, PrefillMode::streaming, nullptr);
}

std::vector<double> InferenceSession::forward_rows(const std::vector<int>& tokens,
                                                   i64 pos0, PrefillMode mode,
                                                   std::vector<AttentionRecord>* records) {
  const ModelConfig& cfg = m_.cfg;
  const AttentionConfig& att = cfg.attention;
  const i64 d = att.d_model;
  const i64 dh = att.d_head();
  const i64 gs = att.group_size();
  const i64 L = static_cast<i64>(tokens.size());
  const i64 hidden = cfg.resolved_ffn_hidden();

  // Transient scratch accounting (element counts of live temporaries).
  i64 cur = 0;
  transient_peak_ = 0;
  auto acquire = [&](i64 n) {
    cur += n;
    transient_peak_ = std::max(transient_peak_, cur);
  };
  auto release = [&](i64 n) { cur -= n; };

  for (int t : tokens) {
    if (t < 0 || static_cast<i64>(t) >= cfg.vocab_size) {
      throw data_error("token id " + std::to_string(t) + " outside vocab of size " +
                       std::to_string(cfg.vocab_size));
    }
  }

  if (records) records->assign(static_cast<size_t>(cfg.n_layers), AttentionRecord{});

  std::vector<double> x(static_cast<size_t>(L * d));
  acquire(L * d);
  for (i64 t = 0; t < L; ++t) {
    std::memcpy(x.data() + t * d,
                m_.tok_embed.data() + static_cast<i64>(tokens[static_cast<size_t>(t)]) * d,
                static_cast<size_t>(d) * sizeof(double));
  }

  std::vector<double> xn(static_cast<size_t>(L * d));
  acquire(L * d);

  auto rms_rows = [&](const std::vector<double>& in, const Tensor& gain,
                      std::vector<double>& out_buf) {
    for (i64 t = 0; t < L; ++t) {
      const double* row = in.data() + t * d;
      double ms = 0.0;
      for (i64 j = 0; j < d; ++j) ms += row[j] * row[j];
      ms /= static_cast<double>(d);
      const double ri = 1.0 / std::sqrt(ms + cfg.norm_eps);
      for (i64 j = 0; j < d; ++j) out_buf[static_cast<size_t>(t * d + j)] = row[j] * ri * gain.data()[j];
    }
  };

  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const i64 np = dh / 2;
  std::vector<double> inv_freq(static_cast<size_t>(np));
  for (i64 i = 0; i < np; ++i) {
    inv_freq[static_cast<size_t>(i)] =
        std::pow(att.rope_theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
  }
  auto rotate_rows = [&](std::vector<double>& buf, i64 heads) {
    const i64 w = heads * dh;
    for (i64 t = 0; t < L; ++t) {
      const double pos = static_cast<double>(pos0 + t);
      for (i64 h = 0; h < heads; ++h) {
        for (i64 i = 0; i < np; ++i) {
          const double ang = pos * inv_freq[static_cast<size_t>(i)];
          const double c = std::cos(ang), s = std::sin(ang);
          double& x0 = buf[static_cast<size_t>(t * w + h * dh + 2 * i)];
          double& x1 = buf[static_cast<size_t>(t * w + h * dh + 2 * i + 1)];
          const double t0 = x0 * c - x1 * s;
          const double t1 = x0 * s + x1 * c;
          x0 = t0;
          x1 = t1;
        }
      }
    }
  };

  for (i64 l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& w = m_.layers[static_cast<size_t>(l)];
    const LayerPlan& plan = m_.plans[static_cast<size_t>(l)];
    KVCache& cache = kv_[static_cast<size_t>(l)];

    rms_rows(x, w.attn_norm, xn);

    const i64 vw = att.n_kv_heads * dh;
    std::vector<double> v_full(static_cast<size_t>(L * vw));
    acquire(L * vw);
    MapM(v_full.data(), L, vw).noalias() =
        CMapM(xn.data(), L, d) * CMapM(w.wv.data(), d, vw);

    std::vector<double> merged(static_cast<size_t>(L * d), 0.0);
    acquire(L * d);

    i64 att_scratch = 0;
    if (plan.has_attention()) {
      const i64 qa = static_cast<i64>(plan.heads_att.size()) * dh;
      const i64 ka = static_cast<i64>(plan.retained_kv.size()) * dh;
      std::vector<double> q(static_cast<size_t>(L * qa)), kbuf(static_cast<size_t>(L * ka));
      acquire(L * (qa + ka));
      MapM(q.data(), L, qa).noalias() = CMapM(xn.data(), L, d) * CMapM(w.wq.data(), d, qa);
      MapM(kbuf.data(), L, ka).noalias() = CMapM(xn.data(), L, d) * CMapM(w.wk.data(), d, ka);
      rotate_rows(q, static_cast<i64>(plan.heads_att.size()));
      rotate_rows(kbuf, static_cast<i64>(plan.retained_kv.size()));

      std::vector<const double*> k_rows(plan.retained_kv.size());
      std::vector<const double*> v_rows(plan.retained_kv.size());
      for (i64 t = 0; t < L; ++t) {
        for (size_t slot = 0; slot < plan.retained_kv.size(); ++slot) {
          k_rows[slot] = kbuf.data() + t * ka + static_cast<i64>(slot) * dh;
          v_rows[slot] = v_full.data() + t * vw + plan.retained_kv[slot] * dh;
        }
        cache.append_token(k_rows, v_rows);
      }

      const i64 len = cache.length;
      if (mode == PrefillMode::recorded) {
        // full per-head score matrices, kept live for the whole layer
        att_scratch = static_cast<i64>(plan.heads_att.size()) * L * len;
      } else {
        att_scratch = len;  // one reusable score row
      }
      acquire(att_scratch);

      std::vector<double> scores(static_cast<size_t>(len));
      for (size_t hr = 0; hr < plan.heads_att.size(); ++hr) {
        const i64 head = plan.heads_att[hr];
        const i64 slot = plan.qh_to_kvslot[hr];
        const double* kk = cache.keys[static_cast<size_t>(slot)].data();
        const double* vv = cache.values[static_cast<size_t>(slot)].data();
        std::vector<double>* rec_w = nullptr;
        if (records && mode == PrefillMode::recorded) {
          AttentionRecord& rec = (*records)[static_cast<size_t>(l)];
          if (rec.head_weights.empty()) {
            rec.seq_len = L;
            rec.head_ids = plan.heads_att;
            rec.head_weights.assign(plan.heads_att.size(),
                                    std::vector<double>(static_cast<size_t>(L * L), 0.0));
          }
          rec_w = &rec.head_weights[hr];
        }
        for (i64 t = 0; t < L; ++t) {
          const i64 limit = pos0 + t + 1;  // causal horizon in cache coordinates
          double mx = -1e300;
          for (i64 j = 0; j < limit; ++j) {
            double dot = 0.0;
            const double* qr = q.data() + t * qa + static_cast<i64>(hr) * dh;
            for (i64 e = 0; e < dh; ++e) dot += qr[e] * kk[j * dh + e];
            scores[static_cast<size_t>(j)] = dot * inv_scale;
            mx = std::max(mx, scores[static_cast<size_t>(j)]);
          }
          double z = 0.0;
          for (i64 j = 0; j < limit; ++j) {
            scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
            z += scores[static_cast<size_t>(j)];
          }
          double* out_row = merged.data() + t * d + head * dh;
          for (i64 j = 0; j < limit; ++j) {
            const double p = scores[static_cast<size_t>(j)] / z;
            if (rec_w) (*rec_w)[static_cast<size_t>(t * L + j)] = p;
            for (i64 e = 0; e < dh; ++e) out_row[e] += p * vv[j * dh + e];
          }
        }
      }
      release(L * (qa + ka));
    }

    if (plan.has_mamba()) {
      const MambaParams& mp = *w.mamba;
      MambaState& state = mamba_[static_cast<size_t>(l)];
      std::vector<double> v_t(static_cast<size_t>(plan.mamba_width));
      acquire(static_cast<i64>(plan.mamba_width));
      for (i64 t = 0; t < L; ++t) {
        i64 off = 0;
        for (i64 h : plan.heads_m) {
          const i64 kvh = h / gs;
          std::memcpy(v_t.data() + off, v_full.data() + t * vw + kvh * dh,
                      static_cast<size_t>(dh) * sizeof(double));
          off += dh;
        }
        const std::vector<double> y = mamba_step(v_t, mp, state);
        i64 off2 = 0;
        for (i64 h : plan.heads_m) {
          std::memcpy(merged.data() + t * d + h * dh, y.data() + off2,
                      static_cast<size_t>(dh) * sizeof(double));
          off2 += dh;
        }
      }
      release(static_cast<i64>(plan.mamba_width));
    }

    if (records && mode == PrefillMode::recorded) {
      AttentionRecord& rec = (*records)[static_cast<size_t>(l)];
      rec.seq_len = L;
      rec.value_l1.assign(static_cast<size_t>(L), 0.0);
      rec.value_l2.assign(static_cast<size_t>(L), 0.0);
      for (i64 t = 0; t < L; ++t) {
        double l1 = 0.0, l2 = 0.0;
        for (i64 j = 0; j < vw; ++j) {
          const double val = v_full[static_cast<size_t>(t * vw + j)];
          l1 += std::fabs(val);
          l2 += val * val;
        }
        rec.value_l1[static_cast<size_t>(t)] = l1;
        rec.value_l2[static_cast<size_t>(t)] = std::sqrt(l2);
      }
    }

    // attention output projection + residual
    {
      std::vector<double> proj(static_cast<size_t>(L * d));
      acquire(L * d);
      MapM(proj.data(), L, d).noalias() =
          CMapM(merged.data(), L, d) * CMapM(w.wo.data(), d, d);
      for (i64 i = 0; i < L * d; ++i) x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)];
      release(L * d);
    }

    // feed-forward
    {
      rms_rows(x, w.ffn_norm, xn);
      std::vector<double> g(static_cast<size_t>(L * hidden)), u(static_cast<size_t>(L * hidden));
      acquire(2 * L * hidden);
      MapM(g.data(), L, hidden).noalias() =
          CMapM(xn.data(), L, d) * CMapM(w.w_gate.data(), d, hidden);
      MapM(u.data(), L, hidden).noalias() =
          CMapM(xn.data(), L, d) * CMapM(w.w_up.data(), d, hidden);
      for (i64 i = 0; i < L * hidden; ++i) {
        g[static_cast<size_t>(i)] =
            g[static_cast<size_t>(i)] * sigmoid(g[static_cast<size_t>(i)]) * u[static_cast<size_t>(i)];
      }
      std::vector<double> down(static_cast<size_t>(L * d));
      acquire(L * d);
      MapM(down.data(), L, d).noalias() =
          CMapM(g.data(), L, hidden) * CMapM(w.w_down.data(), hidden, d);
      for (i64 i = 0; i < L * d; ++i) x[static_cast<size_t>(i)] += down[static_cast<size_t>(i)];
      release(L * d);
      release(2 * L * hidden);
    }

    release(att_scratch);
    release(L * vw);
    release(L * d);  // merged
  }

  n_tokens_ += L;

  // last-row logits
  rms_rows(x, m_.final_norm, xn);
  std::vector<double> logits(static_cast<size_t>(cfg.vocab_size));
  MapM(logits.data(), 1, cfg.vocab_size).noalias() =
      CMapM(xn.data() + (L - 1) * d, 1, d) * CMapM(m_.lm_head.data(), d, cfg.vocab_size);
  return logits;
}

std::vector<int> greedy_generate(const Model& m, const std::vector<int>& prompt, i64 n_new) {
  NoGradGuard ng;
  InferenceSession sess(m);
  std::vector<double> logits = sess.prefill(prompt);
  std::vector<int> out;
  for (i64 i = 0; i < n_new; ++i) {
    int best = 0;
    for (i64 j = 1; j < static_cast<i64>(logits.size()); ++j) {
      if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) {
        best = static_cast<int>(j);
      }
    }
    out.push_back(best);
    if (i + 1 < n_new) logits = sess.step(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint I/O

namespace {

std::string join_heads(const std::vector<i64>& hs) {
  std::string s;
  for (size_t i = 0; i < hs.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(hs[i]);
  }
  return s;
}

std::vector<i64> parse_heads(const std::string& s) {
  std::vector<i64> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoll(item));
  return out;
}

std::string fmt_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

}  // namespace

void save_model(const Model& m, const std::string& dir) {
  std::filesystem::create_directories(dir);

  std::ostringstream man;
  man << "format=recurformer-model/1\n";
  man << "seed=" << m.init_seed << "\n";
  man << "n_layers=" << m.cfg.n_layers << "\n";
  man << "d_model=" << m.cfg.attention.d_model << "\n";
  man << "n_heads=" << m.cfg.attention.n_heads << "\n";
  man << "n_kv_heads=" << m.cfg.attention.n_kv_heads << "\n";
  man << "rope_theta=" << fmt_exact(m.cfg.attention.rope_theta) << "\n";
  man << "vocab_size=" << m.cfg.vocab_size << "\n";
  man << "norm_eps=" << fmt_exact(m.cfg.norm_eps) << "\n";
  man << "ffn_hidden=" << m.cfg.resolved_ffn_hidden() << "\n";
  man << "mamba.k_epd=" << fmt_exact(m.cfg.mamba.k_epd) << "\n";
  man << "mamba.d_conv=" << m.cfg.mamba.d_conv << "\n";
  man << "mamba.d_state=" << m.cfg.mamba.d_state << "\n";
  man << "mamba.dt_rank=" << m.cfg.mamba.dt_rank << "\n";
  for (i64 l = 0; l < m.cfg.n_layers; ++l) {
    man << "layer" << l << ".heads_att=" << join_heads(m.assign.heads_att[static_cast<size_t>(l)]) << "\n";
    man << "layer" << l << ".heads_m=" << join_heads(m.assign.heads_m[static_cast<size_t>(l)]) << "\n";
  }
  write_text_file(dir + "/model.txt", man.str());

  std::vector<NamedTensor> ts;
  ts.push_back({"tok_embed", m.tok_embed});
  for (i64 l = 0; l < m.cfg.n_layers; ++l) {
    const LayerWeights& w = m.layers[static_cast<size_t>(l)];
    const std::string p = "layer" + std::to_string(l) + ".";
    if (w.wq.defined()) ts.push_back({p + "wq", w.wq});
    if (w.wk.defined()) ts.push_back({p + "wk", w.wk});
    ts.push_back({p + "wv", w.wv});
    ts.push_back({p + "wo", w.wo});
    ts.push_back({p + "attn_norm", w.attn_norm});
    ts.push_back({p + "ffn_norm", w.ffn_norm});
    ts.push_back({p + "w_gate", w.w_gate});
    ts.push_back({p + "w_up", w.w_up});
    ts.push_back({p + "w_down", w.w_down});
    if (w.mamba) {
      const MambaParams& mp = *w.mamba;
      ts.push_back({p + "mamba.in_proj", mp.in_proj});
      ts.push_back({p + "mamba.conv_w", mp.conv_w});
      ts.push_back({p + "mamba.conv_b", mp.conv_b});
      ts.push_back({p + "mamba.x_proj", mp.x_proj});
      ts.push_back({p + "mamba.dt_proj", mp.dt_proj});
      ts.push_back({p + "mamba.dt_bias", mp.dt_bias});
      ts.push_back({p + "mamba.a_log", mp.a_log});
      ts.push_back({p + "mamba.d_skip", mp.d_skip});
      ts.push_back({p + "mamba.out_proj", mp.out_proj});
    }
  }
  ts.push_back({"final_norm", m.final_norm});
  ts.push_back({"lm_head", m.lm_head});
  write_tensor_file(dir + "/weights.rftc", ts);
}

Model load_model(const std::string& dir) {
  const std::string man = read_text_file(dir + "/model.txt");
  std::map<std::string, std::string> kv;
  std::stringstream ss(man);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) throw data_error("bad manifest line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw data_error("manifest missing key: " + key);
    return it->second;
  };
  if (need("format") != "recurformer-model/1") {
    throw data_error("unsupported model format: " + need("format"));
  }

  Model m;
  m.init_seed = std::stoull(need("seed"));
  m.cfg.n_layers = std::stoll(need("n_layers"));
  m.cfg.attention.d_model = std::stoll(need("d_model"));
  m.cfg.attention.n_heads = std::stoll(need("n_heads"));
  m.cfg.attention.n_kv_heads = std::stoll(need("n_kv_heads"));
  m.cfg.attention.rope_theta = std::stod(need("rope_theta"));
  m.cfg.vocab_size = std::stoll(need("vocab_size"));
  m.cfg.norm_eps = std::stod(need("norm_eps"));
  m.cfg.ffn_hidden = std::stoll(need("ffn_hidden"));
  m.cfg.mamba.k_epd = std::stod(need("mamba.k_epd"));
  m.cfg.mamba.d_conv = std::stoll(need("mamba.d_conv"));
  m.cfg.mamba.d_state = std::stoll(need("mamba.d_state"));
  m.cfg.mamba.dt_rank = std::stoll(need("mamba.dt_rank"));
  for (i64 l = 0; l < m.cfg.n_layers; ++l) {
    m.assign.heads_att.push_back(parse_heads(need("layer" + std::to_string(l) + ".heads_att")));
    m.assign.heads_m.push_back(parse_heads(need("layer" + std::to_string(l) + ".heads_m")));
  }
  m.rebuild_plans();

  std::map<std::string, Tensor> loaded;
  for (auto& nt : read_tensor_file(dir + "/weights.rftc")) {
    std::vector<double> data(nt.tensor.data(), nt.tensor.data() + nt.tensor.numel());
    loaded[nt.name] = Tensor::from_data(nt.tensor.shape(), std::move(data), true);
  }
  auto take = [&](const std::string& name) -> Tensor {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw data_error("checkpoint missing tensor: " + name);
    return it->second;
  };

  m.tok_embed = take("tok_embed");
  for (i64 l = 0; l < m.cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const LayerPlan& plan = m.plans[static_cast<size_t>(l)];
    LayerWeights w;
    if (plan.has_attention()) {
      w.wq = take(p + "wq");
      w.wk = take(p + "wk");
    }
    w.wv = take(p + "wv");
    w.wo = take(p + "wo");
    w.attn_norm = take(p + "attn_norm");
    w.ffn_norm = take(p + "ffn_norm");
    w.w_gate = take(p + "w_gate");
    w.w_up = take(p + "w_up");
    w.w_down = take(p + "w_down");
    if (plan.has_mamba()) {
      MambaParams mp;
      const MambaConfig mc = m.cfg.mamba.for_width(plan.mamba_width);
      mp.d_in = mc.d_model_in;
      mp.d_inner = mc.d_inner();
      mp.d_state = mc.d_state;
      mp.d_conv = mc.d_conv;
      mp.dt_rank = mc.resolved_dt_rank();
      mp.in_proj = take(p + "mamba.in_proj");
      mp.conv_w = take(p + "mamba.conv_w");
      mp.conv_b = take(p + "mamba.conv_b");
      mp.x_proj = take(p + "mamba.x_proj");
      mp.dt_proj = take(p + "mamba.dt_proj");
      mp.dt_bias = take(p + "mamba.dt_bias");
      mp.a_log = take(p + "mamba.a_log");
      mp.d_skip = take(p + "mamba.d_skip");
      mp.out_proj = take(p + "mamba.out_proj");
      w.mamba = std::move(mp);
    }
    m.layers.push_back(std::move(w));
  }
  m.final_norm = take("final_norm");
  m.lm_head = take("lm_head");
  return m;
}

}  // namespace rfm
