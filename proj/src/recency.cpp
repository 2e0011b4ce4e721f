#include "recurformer/recency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "recurformer/checkpoint.hpp"

namespace rfm {

void RRConfig::validate() const {
  if (band_k <= 0) throw config_error("rr config: band_k must be positive");
  if (!(rr_threshold > 0.0 && rr_threshold <= 1.0)) {
    throw config_error("rr config: rr_threshold must lie in (0,1]");
  }
}

void RRConfig::validate_against(i64 seq_len) const {
  validate();
  if (band_k >= seq_len) {
    throw config_error("rr config: band_k must be smaller than the sequence length");
  }
}

double recency_ratio(const std::vector<double>& weights, i64 seq_len,
                     const RRConfig& cfg) {
  cfg.validate();
  if (static_cast<i64>(weights.size()) != seq_len * seq_len) {
    throw shape_error("recency_ratio: weights are not seq_len x seq_len");
  }
  const i64 j0 = cfg.exclude_first_token ? 1 : 0;
  double num = 0.0, den = 0.0;
  for (i64 i = 0; i < seq_len; ++i) {
    for (i64 j = j0; j <= i; ++j) {
      const double a = weights[static_cast<size_t>(i * seq_len + j)];
      den += a;
      if (i - j <= cfg.band_k) num += a;
    }
  }
  if (den == 0.0) return 0.0;
  return num / den;
}

RecencyReport build_report(const std::vector<std::vector<AttentionRecord>>& records,
                           const RRConfig& cfg) {
  if (records.empty() || records[0].empty()) {
    throw data_error("build_report: no records");
  }
  const i64 n_samples = static_cast<i64>(records.size());
  const i64 n_layers = static_cast<i64>(records[0].size());
  const i64 seq_len = records[0][0].seq_len;
  i64 n_heads = 0;
  for (const auto& rec : records[0]) {
    n_heads = std::max(n_heads, rec.head_ids.empty()
                                    ? static_cast<i64>(rec.head_weights.size())
                                    : *std::max_element(rec.head_ids.begin(), rec.head_ids.end()) + 1);
  }
  cfg.validate_against(seq_len);

  for (const auto& sample : records) {
    if (static_cast<i64>(sample.size()) != n_layers) {
      throw data_error("build_report: samples disagree on layer count");
    }
    for (const auto& rec : sample) {
      if (rec.seq_len != seq_len) {
        throw data_error("build_report: samples disagree on sequence length");
      }
    }
  }

  RecencyReport rep;
  rep.n_layers = n_layers;
  rep.n_heads = n_heads;
  rep.n_samples = n_samples;
  rep.cfg = cfg;
  rep.rr_values.assign(static_cast<size_t>(n_layers * n_heads),
                       std::vector<double>(static_cast<size_t>(n_samples), 0.0));
  rep.ra_index.assign(static_cast<size_t>(n_layers * n_heads), 0);

  for (i64 s = 0; s < n_samples; ++s) {
    for (i64 l = 0; l < n_layers; ++l) {
      const AttentionRecord& rec = records[static_cast<size_t>(s)][static_cast<size_t>(l)];
      for (size_t hi = 0; hi < rec.head_weights.size(); ++hi) {
        const i64 head = rec.head_ids.empty() ? static_cast<i64>(hi) : rec.head_ids[hi];
        const double rr = recency_ratio(rec.head_weights[hi], seq_len, cfg);
        rep.rr_values[static_cast<size_t>(rep.idx(l, head))][static_cast<size_t>(s)] = rr;
        if (rr > cfg.rr_threshold) {
          rep.ra_index[static_cast<size_t>(rep.idx(l, head))] += 1;
        }
      }
    }
  }
  return rep;
}

namespace {

struct Welford {
  std::vector<double> xs;
  void add(double x) { xs.push_back(x); }
  double mean() const {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
  }
  double half_width() const {
    const size_t n = xs.size();
    if (n < 2) return 0.0;
    const double m = mean();
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    return 1.96 * sd / std::sqrt(static_cast<double>(n));
  }
};

}  // namespace

ContributionStats contribution_stats(
    const std::vector<std::vector<AttentionRecord>>& records) {
  if (records.empty() || records[0].empty()) {
    throw data_error("contribution_stats: no records");
  }
  const i64 n_layers = static_cast<i64>(records[0].size());
  i64 n_heads = 0;
  for (const auto& rec : records[0]) {
    n_heads = std::max(n_heads, rec.head_ids.empty()
                                    ? static_cast<i64>(rec.head_weights.size())
                                    : *std::max_element(rec.head_ids.begin(), rec.head_ids.end()) + 1);
  }

  ContributionStats out;
  out.n_layers = n_layers;
  out.n_heads = n_heads;
  out.heads.assign(static_cast<size_t>(n_layers * n_heads), HeadContribution{});

  for (i64 l = 0; l < n_layers; ++l) {
    for (i64 h = 0; h < n_heads; ++h) {
      Welford f1, f2, o1, o2;
      for (const auto& sample : records) {
        const AttentionRecord& rec = sample[static_cast<size_t>(l)];
        if (rec.value_l1.empty()) {
          throw data_error("contribution_stats: records lack value norms");
        }
        // locate this head within the record
        i64 hi = -1;
        if (rec.head_ids.empty()) {
          if (h < static_cast<i64>(rec.head_weights.size())) hi = h;
        } else {
          for (size_t r = 0; r < rec.head_ids.size(); ++r) {
            if (rec.head_ids[r] == h) hi = static_cast<i64>(r);
          }
        }
        if (hi < 0) continue;
        const i64 L = rec.seq_len;
        const std::vector<double>& A = rec.head_weights[static_cast<size_t>(hi)];
        for (i64 t = 1; t < L; ++t) {
          f1.add(A[static_cast<size_t>(t * L)] * rec.value_l1[0]);
          f2.add(A[static_cast<size_t>(t * L)] * rec.value_l2[0]);
          double s1 = 0.0, s2 = 0.0;
          for (i64 i = 1; i <= t; ++i) {
            s1 += A[static_cast<size_t>(t * L + i)] * rec.value_l1[static_cast<size_t>(i)];
            s2 += A[static_cast<size_t>(t * L + i)] * rec.value_l2[static_cast<size_t>(i)];
          }
          o1.add(s1 / static_cast<double>(t));
          o2.add(s2 / static_cast<double>(t));
        }
      }
      HeadContribution& hc = out.heads[static_cast<size_t>(l * n_heads + h)];
      hc.first_mean_l1 = f1.mean();
      hc.first_hw_l1 = f1.half_width();
      hc.first_mean_l2 = f2.mean();
      hc.first_hw_l2 = f2.half_width();
      hc.other_mean_l1 = o1.mean();
      hc.other_hw_l1 = o1.half_width();
      hc.other_mean_l2 = o2.mean();
      hc.other_hw_l2 = o2.half_width();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// I/O

void write_rr_csv(const RecencyReport& r, const std::string& path) {
  std::ostringstream out;
  out << "layer,head,sample,rr\n";
  for (i64 l = 0; l < r.n_layers; ++l) {
    for (i64 h = 0; h < r.n_heads; ++h) {
      const auto& vals = r.rr_values[static_cast<size_t>(r.idx(l, h))];
      for (i64 s = 0; s < r.n_samples; ++s) {
        out << l << "," << h << "," << s << "," << format_double(vals[static_cast<size_t>(s)])
            << "\n";
      }
    }
  }
  write_text_file(path, out.str());
}

void write_rai_csv(const RecencyReport& r, const std::string& path) {
  std::ostringstream out;
  out << "layer,head,ra_index,n_samples\n";
  for (i64 l = 0; l < r.n_layers; ++l) {
    for (i64 h = 0; h < r.n_heads; ++h) {
      out << l << "," << h << "," << r.ra_index[static_cast<size_t>(r.idx(l, h))] << ","
          << r.n_samples << "\n";
    }
  }
  write_text_file(path, out.str());
}

void write_ranking_csv(const RecencyReport& r, const std::string& path) {
  std::vector<i64> order(static_cast<size_t>(r.n_layers * r.n_heads));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](i64 a, i64 b) {
    if (r.ra_index[static_cast<size_t>(a)] != r.ra_index[static_cast<size_t>(b)]) {
      return r.ra_index[static_cast<size_t>(a)] > r.ra_index[static_cast<size_t>(b)];
    }
    return a < b;
  });
  std::ostringstream out;
  out << "rank,layer,head,ra_index\n";
  for (size_t i = 0; i < order.size(); ++i) {
    const i64 flat = order[i];
    out << i << "," << flat / r.n_heads << "," << flat % r.n_heads << ","
        << r.ra_index[static_cast<size_t>(flat)] << "\n";
  }
  write_text_file(path, out.str());
}

void write_rrconfig_json(const RRConfig& cfg, i64 n_samples, const std::string& path) {
  std::ostringstream out;
  out << "{\"band_k\": " << cfg.band_k << ", \"rr_threshold\": " << format_double(cfg.rr_threshold)
      << ", \"exclude_first_token\": " << (cfg.exclude_first_token ? "true" : "false")
      << ", \"n_samples\": " << n_samples << "}\n";
  write_text_file(path, out.str());
}

void write_contribution_csv(const ContributionStats& s, const std::string& path) {
  std::ostringstream out;
  out << "layer,head,first_mean_l1,first_hw_l1,first_mean_l2,first_hw_l2,"
         "other_mean_l1,other_hw_l1,other_mean_l2,other_hw_l2\n";
  for (i64 l = 0; l < s.n_layers; ++l) {
    for (i64 h = 0; h < s.n_heads; ++h) {
      const HeadContribution& c = s.heads[static_cast<size_t>(l * s.n_heads + h)];
      out << l << "," << h << "," << format_double(c.first_mean_l1) << ","
          << format_double(c.first_hw_l1) << "," << format_double(c.first_mean_l2) << ","
          << format_double(c.first_hw_l2) << "," << format_double(c.other_mean_l1) << ","
          << format_double(c.other_hw_l1) << "," << format_double(c.other_mean_l2) << ","
          << format_double(c.other_hw_l2) << "\n";
    }
  }
  write_text_file(path, out.str());
}

RecencyReport load_rai_csv(const std::string& path) {
  std::stringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line) || line != "layer,head,ra_index,n_samples") {
    throw data_error("bad rai csv header in " + path);
  }
  RecencyReport rep;
  std::vector<std::tuple<i64, i64, i64, i64>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    std::vector<i64> vals;
    while (std::getline(ls, cell, ',')) vals.push_back(std::stoll(cell));
    if (vals.size() != 4) throw data_error("bad rai csv row: " + line);
    rows.emplace_back(vals[0], vals[1], vals[2], vals[3]);
    rep.n_layers = std::max(rep.n_layers, vals[0] + 1);
    rep.n_heads = std::max(rep.n_heads, vals[1] + 1);
    rep.n_samples = std::max(rep.n_samples, vals[3]);
  }
  rep.ra_index.assign(static_cast<size_t>(rep.n_layers * rep.n_heads), 0);
  for (auto& [l, h, ra, ns] : rows) {
    rep.ra_index[static_cast<size_t>(rep.idx(l, h))] = ra;
  }
  return rep;
}

void write_record_file(const std::string& path, const std::vector<AttentionRecord>& layers) {
  std::vector<NamedTensor> ts;
  for (size_t l = 0; l < layers.size(); ++l) {
    const AttentionRecord& rec = layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    for (size_t hi = 0; hi < rec.head_weights.size(); ++hi) {
      const i64 head = rec.head_ids.empty() ? static_cast<i64>(hi) : rec.head_ids[hi];
      ts.push_back({p + "head" + std::to_string(head) + ".attn",
                    Tensor::from_data({rec.seq_len, rec.seq_len}, rec.head_weights[hi])});
    }
    ts.push_back({p + "value_l1", Tensor::from_data({rec.seq_len}, rec.value_l1)});
    ts.push_back({p + "value_l2", Tensor::from_data({rec.seq_len}, rec.value_l2)});
  }
  write_tensor_file(path, ts);
}

std::vector<AttentionRecord> read_record_file(const std::string& path) {
  std::vector<AttentionRecord> layers;
  for (auto& nt : read_tensor_file(path)) {
    // names: layer{i}.head{h}.attn | layer{i}.value_l1 | layer{i}.value_l2
    if (nt.name.rfind("layer", 0) != 0) throw data_error("unexpected record tensor: " + nt.name);
    const size_t dot = nt.name.find('.');
    if (dot == std::string::npos) throw data_error("unexpected record tensor: " + nt.name);
    const i64 layer = std::stoll(nt.name.substr(5, dot - 5));
    if (static_cast<i64>(layers.size()) <= layer) layers.resize(static_cast<size_t>(layer + 1));
    AttentionRecord& rec = layers[static_cast<size_t>(layer)];
    const std::string rest = nt.name.substr(dot + 1);
    if (rest == "value_l1") {
      rec.value_l1.assign(nt.tensor.data(), nt.tensor.data() + nt.tensor.numel());
      rec.seq_len = nt.tensor.dim(0);
    } else if (rest == "value_l2") {
      rec.value_l2.assign(nt.tensor.data(), nt.tensor.data() + nt.tensor.numel());
      rec.seq_len = nt.tensor.dim(0);
    } else if (rest.rfind("head", 0) == 0 && rest.size() > 9 &&
               rest.substr(rest.size() - 5) == ".attn") {
      const i64 head = std::stoll(rest.substr(4, rest.size() - 9));
      rec.head_ids.push_back(head);
      rec.head_weights.emplace_back(nt.tensor.data(), nt.tensor.data() + nt.tensor.numel());
      rec.seq_len = nt.tensor.dim(0);
    } else {
      throw data_error("unexpected record tensor: " + nt.name);
    }
  }
  return layers;
}

}  // namespace rfm
