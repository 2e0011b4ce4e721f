#pragma once

#include "recurformer/attention.hpp"

namespace rfm {

struct RRConfig {
  i64 band_k = 0;             // local window half-width k
  double rr_threshold = 0.8;  // recording threshold on RR
  bool exclude_first_token = true;

  void validate() const;
  void validate_against(i64 seq_len) const;  // band_k must stay below L
};

// Recency ratio of one causal row-stochastic matrix: the attention mass
// within |i-j| <= band_k over the total mass. With first-token exclusion
// all j = 0 terms leave both sums (which drops row 0 entirely). An empty
// denominator yields 0.
double recency_ratio(const std::vector<double>& weights, i64 seq_len,
                     const RRConfig& cfg);

struct RecencyReport {
  i64 n_layers = 0;
  i64 n_heads = 0;
  i64 n_samples = 0;
  RRConfig cfg;
  std::vector<std::vector<double>> rr_values;  // [layer*n_heads][sample]
  std::vector<i64> ra_index;                   // [layer*n_heads]

  i64 idx(i64 layer, i64 head) const { return layer * n_heads + head; }
};

// records[sample][layer]; all samples must share sequence length and layout.
RecencyReport build_report(const std::vector<std::vector<AttentionRecord>>& records,
                           const RRConfig& cfg);

struct HeadContribution {
  double first_mean_l1 = 0, first_hw_l1 = 0;
  double first_mean_l2 = 0, first_hw_l2 = 0;
  double other_mean_l1 = 0, other_hw_l1 = 0;
  double other_mean_l2 = 0, other_hw_l2 = 0;
};

struct ContributionStats {
  i64 n_layers = 0;
  i64 n_heads = 0;
  std::vector<HeadContribution> heads;  // [layer*n_heads]
};

// Token contribution = attention weight x value-row norm. Per query row
// t >= 1: the first-token sample is A[t][0]*norm(v_0); the other-token
// sample is the mean of A[t][i]*norm(v_i) over 1 <= i <= t. Means and
// normal-approximation 95% half-widths are taken over (sample, row) pairs.
ContributionStats contribution_stats(
    const std::vector<std::vector<AttentionRecord>>& records);

// CSV / manifest I/O (column layouts documented in docs/formats.md)
void write_rr_csv(const RecencyReport& r, const std::string& path);
void write_rai_csv(const RecencyReport& r, const std::string& path);
void write_ranking_csv(const RecencyReport& r, const std::string& path);
void write_rrconfig_json(const RRConfig& cfg, i64 n_samples, const std::string& path);
void write_contribution_csv(const ContributionStats& s, const std::string& path);
RecencyReport load_rai_csv(const std::string& path);

// Container round-trip for per-sample records ("layer{i}.head{h}.attn",
// "layer{i}.value_l1", "layer{i}.value_l2").
void write_record_file(const std::string& path, const std::vector<AttentionRecord>& layers);
std::vector<AttentionRecord> read_record_file(const std::string& path);

}  // namespace rfm
