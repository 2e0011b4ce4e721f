#include "recurformer/attention.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>

namespace rfm {

namespace {
using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapM = Eigen::Map<const MatRM>;
using MapM = Eigen::Map<MatRM>;
}  // namespace

void AttentionConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || n_kv_heads <= 0) {
    throw config_error("attention config: extents must be positive");
  }
  if (d_model % n_heads != 0) {
    throw config_error("attention config: d_model not divisible by n_heads");
  }
  if (n_heads % n_kv_heads != 0) {
    throw config_error("attention config: n_heads not divisible by n_kv_heads");
  }
  if (rope_theta <= 0) throw config_error("attention config: rope_theta must be positive");
}

void KVCache::init(i64 n_kv_heads, i64 d_head_) {
  d_head = d_head_;
  length = 0;
  keys.assign(static_cast<size_t>(n_kv_heads), {});
  values.assign(static_cast<size_t>(n_kv_heads), {});
}

void KVCache::append_token(const std::vector<const double*>& k_rows,
                           const std::vector<const double*>& v_rows) {
  if (k_rows.size() != keys.size() || v_rows.size() != values.size()) {
    throw contract_error("KVCache::append_token: kv-head count mismatch");
  }
  for (size_t h = 0; h < keys.size(); ++h) {
    keys[h].insert(keys[h].end(), k_rows[h], k_rows[h] + d_head);
    values[h].insert(values[h].end(), v_rows[h], v_rows[h] + d_head);
  }
  ++length;
}

i64 KVCache::element_count() const {
  i64 n = 0;
  for (const auto& k : keys) n += static_cast<i64>(k.size());
  for (const auto& v : values) n += static_cast<i64>(v.size());
  return n;
}

i64 cache_element_count(const KVCache& cache) { return cache.element_count(); }

Tensor attention_forward(const Tensor& x, const AttentionConfig& cfg,
                         const AttentionWeights& w, KVCache* cache,
                         AttentionRecord* record) {
  cfg.validate();
  if (!x.defined() || x.numel() == 0) throw contract_error("attention_forward: empty input");
  if (x.dim(-1) != cfg.d_model) {
    throw shape_error("attention_forward: input width " + std::to_string(x.dim(-1)) +
                      " != d_model " + std::to_string(cfg.d_model));
  }
  if (cache && cache->length != 0) {
    throw contract_error("attention_forward: prefill requires an empty cache");
  }
  const i64 L = x.dim(-2);
  const i64 dh = cfg.d_head();

  Tensor q = ops::matmul(x, w.wq);
  Tensor k = ops::matmul(x, w.wk);
  Tensor v = ops::matmul(x, w.wv);

  std::vector<i64> positions(static_cast<size_t>(L));
  for (i64 t = 0; t < L; ++t) positions[static_cast<size_t>(t)] = t;
  q = ops::rope(q, cfg.n_heads, dh, positions, cfg.rope_theta);
  k = ops::rope(k, cfg.n_kv_heads, dh, positions, cfg.rope_theta);

  std::vector<i64> qh_to_kv(static_cast<size_t>(cfg.n_heads));
  for (i64 h = 0; h < cfg.n_heads; ++h) qh_to_kv[static_cast<size_t>(h)] = h / cfg.group_size();

  std::vector<std::vector<double>> probs;
  Tensor out = ops::causal_attention(q, k, v, cfg.n_heads, cfg.n_kv_heads, dh, qh_to_kv,
                                     record ? &probs : nullptr);

  if (cache) {
    cache->init(cfg.n_kv_heads, dh);
    const i64 kw = cfg.n_kv_heads * dh;
    std::vector<const double*> k_rows(static_cast<size_t>(cfg.n_kv_heads));
    std::vector<const double*> v_rows(static_cast<size_t>(cfg.n_kv_heads));
    for (i64 t = 0; t < L; ++t) {
      for (i64 h = 0; h < cfg.n_kv_heads; ++h) {
        k_rows[static_cast<size_t>(h)] = k.data() + t * kw + h * dh;
        v_rows[static_cast<size_t>(h)] = v.data() + t * kw + h * dh;
      }
      cache->append_token(k_rows, v_rows);
    }
  }

  if (record) {
    record->seq_len = L;
    record->head_ids.resize(static_cast<size_t>(cfg.n_heads));
    for (i64 h = 0; h < cfg.n_heads; ++h) record->head_ids[static_cast<size_t>(h)] = h;
    record->head_weights.assign(probs.begin(), probs.begin() + cfg.n_heads);
    record->value_l1.assign(static_cast<size_t>(L), 0.0);
    record->value_l2.assign(static_cast<size_t>(L), 0.0);
    const i64 kw = cfg.n_kv_heads * dh;
    for (i64 t = 0; t < L; ++t) {
      double l1 = 0.0, l2 = 0.0;
      for (i64 j = 0; j < kw; ++j) {
        const double val = v.data()[t * kw + j];
        l1 += std::fabs(val);
        l2 += val * val;
      }
      record->value_l1[static_cast<size_t>(t)] = l1;
      record->value_l2[static_cast<size_t>(t)] = std::sqrt(l2);
    }
  }
  return out;
}

std::vector<double> attention_step(const std::vector<double>& x_row,
                                   const AttentionConfig& cfg,
                                   const AttentionWeights& w, KVCache& cache) {
  cfg.validate();
  if (static_cast<i64>(x_row.size()) != cfg.d_model) {
    throw shape_error("attention_step: input width mismatch");
  }
  const i64 dh = cfg.d_head();
  const i64 qw = cfg.n_heads * dh;
  const i64 kw = cfg.n_kv_heads * dh;
  if (cache.keys.empty()) cache.init(cfg.n_kv_heads, dh);
  const i64 pos = cache.length;

  std::vector<double> q(static_cast<size_t>(qw)), k(static_cast<size_t>(kw)),
      v(static_cast<size_t>(kw));
  CMapM mx(x_row.data(), 1, cfg.d_model);
  MapM(q.data(), 1, qw).noalias() = mx * CMapM(w.wq.data(), cfg.d_model, qw);
  MapM(k.data(), 1, kw).noalias() = mx * CMapM(w.wk.data(), cfg.d_model, kw);
  MapM(v.data(), 1, kw).noalias() = mx * CMapM(w.wv.data(), cfg.d_model, kw);

  // rotate q and k at this absolute position
  const i64 np = dh / 2;
  auto rotate = [&](std::vector<double>& vec, i64 heads) {
    for (i64 h = 0; h < heads; ++h) {
      for (i64 i = 0; i < np; ++i) {
        const double freq =
            std::pow(cfg.rope_theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
        const double ang = static_cast<double>(pos) * freq;
        const double c = std::cos(ang), s = std::sin(ang);
        double& x0 = vec[static_cast<size_t>(h * dh + 2 * i)];
        double& x1 = vec[static_cast<size_t>(h * dh + 2 * i + 1)];
        const double t0 = x0 * c - x1 * s;
        const double t1 = x0 * s + x1 * c;
        x0 = t0;
        x1 = t1;
      }
    }
  };
  rotate(q, cfg.n_heads);
  rotate(k, cfg.n_kv_heads);

  std::vector<const double*> k_rows(static_cast<size_t>(cfg.n_kv_heads));
  std::vector<const double*> v_rows(static_cast<size_t>(cfg.n_kv_heads));
  for (i64 h = 0; h < cfg.n_kv_heads; ++h) {
    k_rows[static_cast<size_t>(h)] = k.data() + h * dh;
    v_rows[static_cast<size_t>(h)] = v.data() + h * dh;
  }
  cache.append_token(k_rows, v_rows);

  const i64 len = cache.length;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(static_cast<size_t>(qw), 0.0);
  std::vector<double> scores(static_cast<size_t>(len));
  for (i64 h = 0; h < cfg.n_heads; ++h) {
    const i64 kvh = h / cfg.group_size();
    const double* kk = cache.keys[static_cast<size_t>(kvh)].data();
    const double* vv = cache.values[static_cast<size_t>(kvh)].data();
    double mx2 = -1e300;
    for (i64 j = 0; j < len; ++j) {
      double dot = 0.0;
      for (i64 d = 0; d < dh; ++d) dot += q[static_cast<size_t>(h * dh + d)] * kk[j * dh + d];
      scores[static_cast<size_t>(j)] = dot * inv_scale;
      mx2 = std::max(mx2, scores[static_cast<size_t>(j)]);
    }
    double z = 0.0;
    for (i64 j = 0; j < len; ++j) {
      scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx2);
      z += scores[static_cast<size_t>(j)];
    }
    for (i64 j = 0; j < len; ++j) {
      const double p = scores[static_cast<size_t>(j)] / z;
      for (i64 d = 0; d < dh; ++d) out[static_cast<size_t>(h * dh + d)] += p * vv[j * dh + d];
    }
  }
  return out;
}

}  // namespace rfm
