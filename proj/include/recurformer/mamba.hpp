#pragma once

#include "recurformer/ops.hpp"

namespace rfm {

struct MambaConfig {
  i64 d_model_in = 0;   // width of the concatenated replaced-head values
  double k_epd = 2.0;   // expand factor
  i64 d_conv = 4;
  i64 d_state = 16;
  i64 dt_rank = 0;      // 0 -> max(1, d_model_in / 16)

  i64 d_inner() const;
  i64 resolved_dt_rank() const;
  void validate() const;
};

// Cache footprint of one block: d_inner*d_conv + d_inner*d_state elements,
// independent of tokens processed.
i64 mamba_state_element_count(const MambaConfig& cfg);

struct MambaParams {
  i64 d_in = 0, d_inner = 0, d_state = 0, d_conv = 0, dt_rank = 0;
  Tensor in_proj;   // [d_in, 2*d_inner]: channel stream | gate stream
  Tensor conv_w;    // [d_inner, d_conv] depthwise
  Tensor conv_b;    // [d_inner]
  Tensor x_proj;    // [d_inner, dt_rank + 2*d_state]: dt | B | C
  Tensor dt_proj;   // [dt_rank, d_inner]
  Tensor dt_bias;   // [d_inner]
  Tensor a_log;     // [d_inner, d_state], A = -exp(a_log)
  Tensor d_skip;    // [d_inner]
  Tensor out_proj;  // [d_inner, d_in]

  static MambaParams init(const MambaConfig& cfg, Rng& rng, bool requires_grad);
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
};

struct MambaState {
  i64 d_inner = 0, d_conv = 0, d_state = 0;
  std::vector<double> conv_state;  // [d_inner * d_conv], rolling window, oldest first
  std::vector<double> ssm_state;   // [d_inner * d_state]

  static MambaState zeros(const MambaParams& p);
  i64 element_count() const;
};

// Zero-order hold on A, Euler on B: Abar = exp(delta*A), Bbar = delta*B.
// delta [d_inner], A [d_inner x d_state], B [d_state]; delta must be positive.
void discretize(const std::vector<double>& delta, const std::vector<double>& A,
                const std::vector<double>& B, i64 d_inner, i64 d_state,
                std::vector<double>& a_bar, std::vector<double>& b_bar);

// Full block over a sequence, associative-scan execution; v is
// [L, d_in] or [B, L, d_in]. Differentiable.
Tensor mamba_forward_parallel(const Tensor& v, const MambaParams& p);

// Recurrent one-token execution; state is updated in place.
std::vector<double> mamba_step(const std::vector<double>& v_t, const MambaParams& p,
                               MambaState& state);

}  // namespace rfm
