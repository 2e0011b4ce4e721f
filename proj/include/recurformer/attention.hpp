#pragma once

#include "recurformer/ops.hpp"

namespace rfm {

struct AttentionConfig {
  i64 d_model = 0;
  i64 n_heads = 0;
  i64 n_kv_heads = 0;
  double rope_theta = 10000.0;

  i64 d_head() const { return d_model / n_heads; }
  i64 group_size() const { return n_heads / n_kv_heads; }
  void validate() const;
};

// Per-layer key/value storage for incremental decoding. Element count grows
// by exactly 2 * d_head per kv-head per appended token.
struct KVCache {
  i64 d_head = 0;
  i64 length = 0;
  std::vector<std::vector<double>> keys;    // per kv-head, flat [length * d_head]
  std::vector<std::vector<double>> values;

  void init(i64 n_kv_heads, i64 d_head_);
  // row pointers are per kv-head slices of width d_head
  void append_token(const std::vector<const double*>& k_rows,
                    const std::vector<const double*>& v_rows);
  i64 element_count() const;
};

i64 cache_element_count(const KVCache& cache);

// Per-layer recorded attention: per query head an L x L lower-triangular
// row-stochastic matrix, plus per-token L1/L2 norms of the layer's full
// value row (the ingestion format of the recency module).
struct AttentionRecord {
  i64 seq_len = 0;
  std::vector<i64> head_ids;                      // original head indices
  std::vector<std::vector<double>> head_weights;  // aligned with head_ids
  std::vector<double> value_l1, value_l2;
};

// Standalone causal self-attention over all heads: project, rotate, attend,
// concatenate head outputs (no output projection at this level).
struct AttentionWeights {
  Tensor wq;  // [d_model, n_heads * d_head]
  Tensor wk;  // [d_model, n_kv_heads * d_head]
  Tensor wv;  // [d_model, n_kv_heads * d_head]
};

// Parallel forward over a fresh sequence; x is [L, d_model] or [B, L, d_model].
// When cache is given it must be empty (prefill); it is extended by L tokens.
// The record, when requested, is captured for batch index 0.
Tensor attention_forward(const Tensor& x, const AttentionConfig& cfg,
                         const AttentionWeights& w, KVCache* cache = nullptr,
                         AttentionRecord* record = nullptr);

// One-token generation step against an existing cache (no autograd).
std::vector<double> attention_step(const std::vector<double>& x_row,
                                   const AttentionConfig& cfg,
                                   const AttentionWeights& w, KVCache& cache);

}  // namespace rfm
