#pragma once

#include <optional>

#include "recurformer/tensor.hpp"

namespace rfm {
namespace ops {

// Elementwise (shapes must match exactly).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor neg(const Tensor& x);

// b broadcast over the last dimension of x.
Tensor add_bias(const Tensor& x, const Tensor& b);

Tensor sum_all(const Tensor& x);   // -> [1]
Tensor mean_all(const Tensor& x);  // -> [1]

// Last-dimension column ops (leading dims preserved).
Tensor slice_last(const Tensor& x, i64 begin, i64 end);
Tensor select_columns(const Tensor& x, const std::vector<i64>& cols);
Tensor concat_last(const std::vector<Tensor>& parts);

// Row gather over the flattened leading dims: x [..., D] -> [N, D].
Tensor select_rows(const Tensor& x, const std::vector<i64>& rows);

// a [..., n, k] x b [k, m], or batched when b's leading dims match a's.
Tensor matmul(const Tensor& a, const Tensor& b);

// Rows of the last dimension: softmax(row / scale), max-subtracted.
Tensor softmax_rows(const Tensor& x, double scale);

// y = x * gain / sqrt(mean(x^2) + eps), per last-dim row.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);

// tokens laid out [B, L] -> [B, L, D] rows of table [V, D].
Tensor embedding(const std::vector<int>& tokens, i64 batch, i64 seq_len,
                 const Tensor& table);

// Rotary encoding over interleaved pairs; x is [..., L, H*d_head] with
// positions[t] the absolute position of row t. Angle of pair i at
// position p is p * theta^(-2i/d_head).
Tensor rope(const Tensor& x, i64 n_heads, i64 d_head,
            const std::vector<i64>& positions, double theta);

// Causal scaled-dot-product attention.
//   q [B, L, Hq*dh], k/v [B, L, Hkv*dh]; q head h reads kv head
//   qh_to_kv[h]. Scale is 1/sqrt(dh). probs_out, when given, receives the
//   per-(batch, query-head) row-stochastic L x L matrices.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        i64 n_q_heads, i64 n_kv_heads, i64 d_head,
                        const std::vector<i64>& qh_to_kv,
                        std::vector<std::vector<double>>* probs_out = nullptr);

// Depthwise causal conv over time: x [B, L, C], weight [C, K], bias [C].
Tensor causal_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Selective state-space scan.
//   u, delta [B, L, C]; A [C, N]; Bm, Cm [B, L, N]; D [C] -> y [B, L, C]
//   h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t;  y_t = C_t . h_t + D u_t
// Evaluated with an associative (Blelloch) scan over the time dimension.
Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A,
                      const Tensor& Bm, const Tensor& Cm, const Tensor& D);

// Mean next-token NLL over masked positions; logits [B, L, V] (or [N, V]),
// targets/mask flat with one entry per row.
Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask);

}  // namespace ops
}  // namespace rfm
