#pragma once

#include <optional>

#include "recurformer/attention.hpp"
#include "recurformer/mamba.hpp"
#include "recurformer/recency.hpp"

namespace rfm {

struct MambaSettings {
  double k_epd = 2.0;
  i64 d_conv = 4;
  i64 d_state = 16;
  i64 dt_rank = 0;  // 0 -> auto per replaced width

  MambaConfig for_width(i64 d_model_in) const {
    return MambaConfig{d_model_in, k_epd, d_conv, d_state, dt_rank};
  }
};

struct ModelConfig {
  i64 n_layers = 0;
  AttentionConfig attention;
  MambaSettings mamba;
  i64 vocab_size = 0;
  double norm_eps = 1e-5;
  i64 ffn_hidden = 0;  // 0 -> 8/3 * d_model rounded up to a multiple of 8

  i64 resolved_ffn_hidden() const;
  void validate() const;
};

// Per-layer split of query heads into retained (attention) and replaced
// (Mamba) sets. Both lists are sorted; together they cover 0..n_heads-1.
struct HeadAssignment {
  std::vector<std::vector<i64>> heads_att;
  std::vector<std::vector<i64>> heads_m;

  static HeadAssignment full_attention(i64 n_layers, i64 n_heads);
  // The ablation rule: round(beta * n_layers * n_heads) heads total,
  // spread as evenly as possible over layers, lowest head indices first.
  static HeadAssignment per_layer_prefix(i64 n_layers, i64 n_heads, double beta);

  void validate(i64 n_layers, i64 n_heads) const;
  i64 replaced_total() const;
};

// round-half-away-from-zero count of replaced heads for a given beta
i64 replaced_head_count(double beta, i64 total_heads);

// Bookkeeping derived from (config, assignment) for one layer.
struct LayerPlan {
  std::vector<i64> heads_att;      // retained query heads, sorted
  std::vector<i64> heads_m;        // replaced query heads, sorted
  std::vector<i64> retained_kv;    // kv-heads with >= 1 retained query head
  std::vector<i64> qh_to_kvslot;   // per retained query head: index into retained_kv
  i64 d_head = 0;
  i64 mamba_width = 0;             // |heads_m| * d_head

  bool has_attention() const { return !heads_att.empty(); }
  bool has_mamba() const { return heads_m.size() > 0; }
};

LayerPlan make_layer_plan(const AttentionConfig& cfg, const std::vector<i64>& heads_att,
                          const std::vector<i64>& heads_m);

struct LayerWeights {
  Tensor wq;  // [d_model, |heads_att| * d_head]
  Tensor wk;  // [d_model, |retained_kv| * d_head]
  Tensor wv;  // [d_model, n_kv_heads * d_head], always full
  Tensor wo;  // [d_model, d_model]
  Tensor attn_norm;  // [d_model]
  Tensor ffn_norm;   // [d_model]
  Tensor w_gate, w_up, w_down;
  std::optional<MambaParams> mamba;
};

struct Model {
  ModelConfig cfg;
  HeadAssignment assign;
  u64 init_seed = 0;
  Tensor tok_embed;   // [vocab, d_model]
  Tensor final_norm;  // [d_model]
  Tensor lm_head;     // [d_model, vocab]
  std::vector<LayerWeights> layers;
  std::vector<LayerPlan> plans;

  static Model random(const ModelConfig& cfg, const HeadAssignment& assign, u64 seed);
  void rebuild_plans();
  std::vector<Tensor*> parameters();
  i64 parameter_count() const;
};

// Full-sequence logits [B, L, vocab]; builds an autograd graph when grads
// are enabled and any parameter requires them. Records (per layer, batch
// must be 1) capture retained-head attention and value-row norms. When
// logit_rows is given only those flattened (batch*seq) positions reach the
// vocabulary projection and the result is [N, vocab].
Tensor model_forward(const Model& m, const std::vector<int>& tokens, i64 batch,
                     i64 seq_len, std::vector<AttentionRecord>* records = nullptr,
                     const std::vector<i64>* logit_rows = nullptr);

// Head replacement driven by RA-I: picks round(beta * total) heads with the
// highest RA-I across all layers (ties: lower layer, then lower head), slices
// the retained W_Q/W_K columns out of the base weights and initialises fresh
// Mamba parameters on every layer that lost heads.
Model convert_model(const Model& base, const RecencyReport& report, double beta,
                    u64 mamba_seed);

enum class PrefillMode { streaming, recorded };

// Incremental decoding session owning per-layer KV caches and Mamba states.
class InferenceSession {
 public:
  explicit InferenceSession(const Model& m);

  // Fresh-sequence parallel pass; returns last-token logits. Recorded mode
  // materialises per-head attention matrices (and can export them).
  std::vector<double> prefill(const std::vector<int>& tokens,
                              PrefillMode mode = PrefillMode::streaming,
                              std::vector<AttentionRecord>* records = nullptr);
  // One-token step; returns logits for the next position.
  std::vector<double> step(int token);

  i64 tokens_processed() const { return n_tokens_; }
  i64 kv_element_count() const;
  i64 mamba_element_count() const;
  // Scratch elements allocated by the most recent prefill()/step() call.
  i64 transient_peak() const { return transient_peak_; }
  const std::vector<KVCache>& caches() const { return kv_; }
  const std::vector<MambaState>& mamba_states() const { return mamba_; }

 private:
  std::vector<double> forward_rows(const std::vector<int>& tokens, i64 pos0,
                                   PrefillMode mode,
                                   std::vector<AttentionRecord>* records);

  const Model& m_;
  std::vector<KVCache> kv_;
  std::vector<MambaState> mamba_;
  i64 n_tokens_ = 0;
  i64 transient_peak_ = 0;
};

// Greedy decoding helper: prefill the prompt then append n_new argmax tokens.
std::vector<int> greedy_generate(const Model& m, const std::vector<int>& prompt,
                                 i64 n_new);

// Checkpoint = tensor container + text manifest (key=value), documented in
// docs/formats.md. `dir` is created if missing.
void save_model(const Model& m, const std::string& dir);
Model load_model(const std::string& dir);

}  // namespace rfm
