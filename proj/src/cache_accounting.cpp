#include "recurformer/cache_accounting.hpp"

#include <sstream>

namespace rfm {

i64 attention_elements_closed_form(const ModelConfig& cfg, const HeadAssignment& assign,
                                   i64 tokens) {
  const i64 dh = cfg.attention.d_head();
  i64 total = 0;
  for (i64 l = 0; l < cfg.n_layers; ++l) {
    const LayerPlan plan = make_layer_plan(cfg.attention, assign.heads_att[static_cast<size_t>(l)],
                                           assign.heads_m[static_cast<size_t>(l)]);
    total += 2 * tokens * dh * static_cast<i64>(plan.retained_kv.size());
  }
  return total;
}

i64 mamba_elements_closed_form(const ModelConfig& cfg, const HeadAssignment& assign) {
  const i64 dh = cfg.attention.d_head();
  i64 total = 0;
  for (i64 l = 0; l < cfg.n_layers; ++l) {
    const i64 replaced = static_cast<i64>(assign.heads_m[static_cast<size_t>(l)].size());
    if (replaced == 0) continue;
    total += mamba_state_element_count(cfg.mamba.for_width(replaced * dh));
  }
  return total;
}

double closed_form_fraction(const ModelConfig& cfg, const HeadAssignment& assign, i64 tokens) {
  if (tokens < 1) throw contract_error("closed_form_fraction: tokens must be >= 1");
  const i64 dh = cfg.attention.d_head();
  const i64 baseline = 2 * tokens * dh * cfg.attention.n_kv_heads * cfg.n_layers;
  const i64 hybrid =
      attention_elements_closed_form(cfg, assign, tokens) + mamba_elements_closed_form(cfg, assign);
  return static_cast<double>(hybrid) / static_cast<double>(baseline);
}

std::vector<CacheStats> measured_stats(const Model& m, i64 prefill_len, i64 gen_steps,
                                       PrefillMode mode, u64 token_seed) {
  if (prefill_len < 1) throw contract_error("measured_stats: prefill_len must be >= 1");
  NoGradGuard ng;
  Rng rng(token_seed);
  std::vector<int> tokens(static_cast<size_t>(prefill_len));
  for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(m.cfg.vocab_size));

  InferenceSession sess(m);
  std::vector<CacheStats> out;
  std::vector<double> logits = sess.prefill(tokens, mode);
  out.push_back({0, Phase::prefill, sess.kv_element_count(), sess.mamba_element_count(),
                 sess.transient_peak()});
  for (i64 g = 0; g < gen_steps; ++g) {
    const int next = static_cast<int>(rng.uniform_int(m.cfg.vocab_size));
    logits = sess.step(next);
    out.push_back({g + 1, Phase::generation, sess.kv_element_count(),
                   sess.mamba_element_count(), sess.transient_peak()});
  }
  (void)logits;

  // The measured ledger must equal the closed form at every checkpoint.
  for (const CacheStats& s : out) {
    const i64 l = prefill_len + (s.phase == Phase::generation ? s.step : 0);
    const i64 want_att = attention_elements_closed_form(m.cfg, m.assign, l);
    const i64 want_mamba = mamba_elements_closed_form(m.cfg, m.assign);
    if (s.attention_elements != want_att || s.mamba_elements != want_mamba) {
      throw contract_error("measured_stats: ledger disagrees with closed form at step " +
                           std::to_string(s.step));
    }
  }
  return out;
}

void write_cache_stats_csv(const std::vector<CacheStats>& stats, const ModelConfig& cfg,
                           const HeadAssignment& assign, i64 prefill_len,
                           const std::string& path) {
  const i64 dh = cfg.attention.d_head();
  std::ostringstream out;
  out << "step,phase,attention_elements,mamba_elements,peak_transient_elements,fraction\n";
  for (const CacheStats& s : stats) {
    const i64 tokens = prefill_len + (s.phase == Phase::generation ? s.step : 0);
    const i64 baseline = 2 * tokens * dh * cfg.attention.n_kv_heads * cfg.n_layers;
    const double fraction =
        static_cast<double>(s.attention_elements + s.mamba_elements) /
        static_cast<double>(baseline);
    out << s.step << "," << (s.phase == Phase::prefill ? "prefill" : "generation") << ","
        << s.attention_elements << "," << s.mamba_elements << ","
        << s.peak_transient_elements << "," << format_double(fraction) << "\n";
  }
  (void)assign;
  write_text_file(path, out.str());
}

}  // namespace rfm
