#pragma once

#include "recurformer/model.hpp"

namespace rfm {

enum class Phase { prefill, generation };

struct CacheStats {
  i64 step = 0;  // 0 = end of prefill, then one row per generated token
  Phase phase = Phase::prefill;
  i64 attention_elements = 0;
  i64 mamba_elements = 0;
  i64 peak_transient_elements = 0;
};

// Closed-form element ledgers for a model shape at l processed tokens.
i64 attention_elements_closed_form(const ModelConfig& cfg, const HeadAssignment& assign,
                                   i64 tokens);
i64 mamba_elements_closed_form(const ModelConfig& cfg, const HeadAssignment& assign);

// [sum 2*l*d_head*retained_kv + sum mamba states] / [sum 2*l*d_head*n_kv],
// the beta=0 baseline of the same shape at the same length being 1.
double closed_form_fraction(const ModelConfig& cfg, const HeadAssignment& assign, i64 tokens);

// Instrumented run: random prefill then greedy-free generation steps, reading
// the live caches after prefill and after every step.
std::vector<CacheStats> measured_stats(const Model& m, i64 prefill_len, i64 gen_steps,
                                       PrefillMode mode, u64 token_seed);

void write_cache_stats_csv(const std::vector<CacheStats>& stats,
                           const ModelConfig& cfg, const HeadAssignment& assign,
                           i64 prefill_len, const std::string& path);

}  // namespace rfm
