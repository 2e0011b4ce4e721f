#include <doctest.h>

#include <cmath>

#include "recurformer/attention.hpp"

using namespace rfm;

namespace {

// Independent multi-head attention reference: plain double loops, one kv
// head per query head, interleaved-pair RoPE. Kept free of the library's
// attention path on purpose.
std::vector<double> mha_reference(const std::vector<double>& x, i64 L,
                                  const AttentionConfig& cfg, const Tensor& wq,
                                  const Tensor& wk, const Tensor& wv) {
  const i64 d = cfg.d_model;
  const i64 H = cfg.n_heads;
  const i64 dh = cfg.d_head();
  auto project = [&](const Tensor& w, i64 out_w) {
    std::vector<double> y(static_cast<size_t>(L * out_w), 0.0);
    for (i64 t = 0; t < L; ++t) {
      for (i64 j = 0; j < out_w; ++j) {
        double acc = 0;
        for (i64 i = 0; i < d; ++i) acc += x[static_cast<size_t>(t * d + i)] * w.data()[i * out_w + j];
        y[static_cast<size_t>(t * out_w + j)] = acc;
      }
    }
    return y;
  };
  auto rope_rows = [&](std::vector<double>& buf, i64 heads) {
    for (i64 t = 0; t < L; ++t) {
      for (i64 h = 0; h < heads; ++h) {
        for (i64 i = 0; i < dh / 2; ++i) {
          const double ang =
              static_cast<double>(t) *
              std::pow(cfg.rope_theta, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
          double& a = buf[static_cast<size_t>(t * heads * dh + h * dh + 2 * i)];
          double& b = buf[static_cast<size_t>(t * heads * dh + h * dh + 2 * i + 1)];
          const double na = a * std::cos(ang) - b * std::sin(ang);
          const double nb = a * std::sin(ang) + b * std::cos(ang);
          a = na;
          b = nb;
        }
      }
    }
  };
  std::vector<double> q = project(wq, H * dh);
  std::vector<double> k = project(wk, H * dh);
  std::vector<double> v = project(wv, H * dh);
  rope_rows(q, H);
  rope_rows(k, H);
  std::vector<double> out(static_cast<size_t>(L * H * dh), 0.0);
  for (i64 h = 0; h < H; ++h) {
    for (i64 t = 0; t < L; ++t) {
      std::vector<double> s(static_cast<size_t>(t + 1));
      double mx = -1e300;
      for (i64 j = 0; j <= t; ++j) {
        double dot = 0;
        for (i64 e = 0; e < dh; ++e) {
          dot += q[static_cast<size_t>(t * H * dh + h * dh + e)] *
                 k[static_cast<size_t>(j * H * dh + h * dh + e)];
        }
        s[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[static_cast<size_t>(j)]);
      }
      double z = 0;
      for (i64 j = 0; j <= t; ++j) {
        s[static_cast<size_t>(j)] = std::exp(s[static_cast<size_t>(j)] - mx);
        z += s[static_cast<size_t>(j)];
      }
      for (i64 j = 0; j <= t; ++j) {
        const double p = s[static_cast<size_t>(j)] / z;
        for (i64 e = 0; e < dh; ++e) {
          out[static_cast<size_t>(t * H * dh + h * dh + e)] +=
              p * v[static_cast<size_t>(j * H * dh + h * dh + e)];
        }
      }
    }
  }
  return out;
}

AttentionWeights random_weights(const AttentionConfig& cfg, Rng& rng) {
  AttentionWeights w;
  w.wq = Tensor::uniform({cfg.d_model, cfg.n_heads * cfg.d_head()}, rng, -0.5, 0.5);
  w.wk = Tensor::uniform({cfg.d_model, cfg.n_kv_heads * cfg.d_head()}, rng, -0.5, 0.5);
  w.wv = Tensor::uniform({cfg.d_model, cfg.n_kv_heads * cfg.d_head()}, rng, -0.5, 0.5);
  return w;
}

}  // namespace

TEST_CASE("single token attends only to itself: output is its projected value") {
  Rng rng(41);
  AttentionConfig cfg{8, 2, 2, 10000.0};
  AttentionWeights w = random_weights(cfg, rng);
  Tensor x = Tensor::uniform({1, cfg.d_model}, rng, -1.0, 1.0);
  AttentionRecord rec;
  Tensor y = attention_forward(x, cfg, w, nullptr, &rec);
  Tensor v = ops::matmul(x, w.wv);
  for (i64 i = 0; i < y.numel(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(v.data()[i]).epsilon(1e-12));
  }
  for (const auto& hw : rec.head_weights) {
    REQUIRE(hw.size() == 1);
    CHECK(hw[0] == doctest::Approx(1.0));
  }
}

TEST_CASE("GQA with n_kv_heads == n_heads matches the MHA reference within 1e-9") {
  Rng rng(42);
  AttentionConfig cfg{12, 3, 3, 10000.0};
  AttentionWeights w = random_weights(cfg, rng);
  const i64 L = 7;
  Tensor x = Tensor::uniform({L, cfg.d_model}, rng, -1.0, 1.0);
  Tensor y = attention_forward(x, cfg, w);
  std::vector<double> xs(x.data(), x.data() + x.numel());
  const auto ref = mha_reference(xs, L, cfg, w.wq, w.wk, w.wv);
  for (i64 i = 0; i < y.numel(); ++i) {
    CHECK(std::fabs(y.data()[i] - ref[static_cast<size_t>(i)]) <= 1e-9);
  }
}

TEST_CASE("prefill equals token-by-token generation through the KV cache") {
  Rng rng(43);
  AttentionConfig cfg{16, 4, 2, 10000.0};
  AttentionWeights w = random_weights(cfg, rng);
  const i64 L = 6;
  Tensor x = Tensor::uniform({L, cfg.d_model}, rng, -1.0, 1.0);
  KVCache prefill_cache;
  Tensor y = attention_forward(x, cfg, w, &prefill_cache);

  KVCache inc;
  inc.init(cfg.n_kv_heads, cfg.d_head());
  for (i64 t = 0; t < L; ++t) {
    std::vector<double> row(x.data() + t * cfg.d_model, x.data() + (t + 1) * cfg.d_model);
    const std::vector<double> out = attention_step(row, cfg, w, inc);
    for (i64 j = 0; j < cfg.d_model; ++j) {
      CHECK(std::fabs(out[static_cast<size_t>(j)] - y.data()[t * cfg.d_model + j]) <= 1e-6);
    }
  }
  CHECK(inc.element_count() == prefill_cache.element_count());
  CHECK(inc.length == L);
}

TEST_CASE("cache element count: closed form") {
  KVCache c;
  c.init(1, 4);
  CHECK(cache_element_count(c) == 0);
  std::vector<double> row(4, 1.0);
  std::vector<const double*> rows{row.data()};
  for (int i = 0; i < 3; ++i) c.append_token(rows, rows);
  CHECK(cache_element_count(c) == 24);  // 2 * 3 * 4

  // growth is exactly linear: prefill l_p then g steps
  Rng rng(44);
  AttentionConfig cfg{8, 2, 2, 10000.0};
  AttentionWeights w = random_weights(cfg, rng);
  KVCache kc;
  kc.init(cfg.n_kv_heads, cfg.d_head());
  const i64 lp = 5, g = 4;
  i64 prev = 0;
  for (i64 t = 0; t < lp + g; ++t) {
    std::vector<double> xr(static_cast<size_t>(cfg.d_model));
    for (auto& v : xr) v = rng.uniform(-1, 1);
    attention_step(xr, cfg, w, kc);
    const i64 now = cache_element_count(kc);
    CHECK(now - prev == 2 * cfg.d_head() * cfg.n_kv_heads);
    prev = now;
  }
  CHECK(prev == 2 * (lp + g) * cfg.d_head() * cfg.n_kv_heads);
}

TEST_CASE("recorded attention rows are stochastic and strictly causal") {
  Rng rng(45);
  AttentionConfig cfg{16, 4, 4, 10000.0};
  AttentionWeights w = random_weights(cfg, rng);
  const i64 L = 9;
  Tensor x = Tensor::uniform({L, cfg.d_model}, rng, -2.0, 2.0);
  AttentionRecord rec;
  attention_forward(x, cfg, w, nullptr, &rec);
  REQUIRE(rec.head_weights.size() == static_cast<size_t>(cfg.n_heads));
  for (const auto& hw : rec.head_weights) {
    for (i64 t = 0; t < L; ++t) {
      double s = 0;
      for (i64 j = 0; j < L; ++j) {
        const double p = hw[static_cast<size_t>(t * L + j)];
        if (j > t) CHECK(p == 0.0);
        s += p;
      }
      CHECK(std::fabs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("causality: perturbing token j never changes earlier outputs (exact)") {
  Rng rng(46);
  AttentionConfig cfg{8, 2, 1, 10000.0};
  AttentionWeights w = random_weights(cfg, rng);
  const i64 L = 8;
  Tensor x = Tensor::uniform({L, cfg.d_model}, rng, -1.0, 1.0);
  Tensor y1 = attention_forward(x, cfg, w);
  const i64 j = 5;
  Tensor x2 = Tensor::from_data(x.shape(), std::vector<double>(x.data(), x.data() + x.numel()));
  for (i64 e = 0; e < cfg.d_model; ++e) x2.data()[j * cfg.d_model + e] += 0.37;
  Tensor y2 = attention_forward(x2, cfg, w);
  for (i64 t = 0; t < j; ++t) {
    for (i64 e = 0; e < cfg.d_model; ++e) {
      CHECK(y1.data()[t * cfg.d_model + e] == y2.data()[t * cfg.d_model + e]);
    }
  }
}

TEST_CASE("rope: position zero is the identity and norms are preserved") {
  Rng rng(47);
  const i64 H = 2, dh = 6, L = 4;
  Tensor x = Tensor::uniform({1, L, H * dh}, rng, -2.0, 2.0);
  Tensor y = ops::rope(x, H, dh, {0, 0, 0, 0}, 10000.0);
  for (i64 i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

  Tensor yr = ops::rope(x, H, dh, {0, 3, 11, 250}, 10000.0);
  for (i64 t = 0; t < L; ++t) {
    for (i64 h = 0; h < H; ++h) {
      double n0 = 0, n1 = 0;
      for (i64 e = 0; e < dh; ++e) {
        n0 += x.data()[t * H * dh + h * dh + e] * x.data()[t * H * dh + h * dh + e];
        n1 += yr.data()[t * H * dh + h * dh + e] * yr.data()[t * H * dh + h * dh + e];
      }
      CHECK(std::sqrt(n1) == doctest::Approx(std::sqrt(n0)).epsilon(1e-9));
    }
  }
  CHECK_THROWS_AS(ops::rope(Tensor::zeros({1, 2, 6}), 2, 3, {0, 1}, 10000.0), shape_error);
}

TEST_CASE("rope: scores depend only on relative position") {
  Rng rng(48);
  const i64 dh = 8;
  Tensor q = Tensor::uniform({1, 1, dh}, rng, -1.0, 1.0);
  Tensor k = Tensor::uniform({1, 1, dh}, rng, -1.0, 1.0);
  auto dot_at = [&](i64 pq, i64 pk) {
    Tensor rq = ops::rope(q, 1, dh, {pq}, 10000.0);
    Tensor rk = ops::rope(k, 1, dh, {pk}, 10000.0);
    double acc = 0;
    for (i64 e = 0; e < dh; ++e) acc += rq.data()[e] * rk.data()[e];
    return acc;
  };
  for (const auto& [p1, p2, s] : std::vector<std::tuple<i64, i64, i64>>{
           {9, 2, 13}, {30, 7, 111}, {0, 0, 64}}) {
    CHECK(std::fabs(dot_at(p1, p2) - dot_at(p1 + s, p2 + s)) <= 1e-6);
  }
}

TEST_CASE("attention module contract errors") {
  Rng rng(49);
  AttentionConfig cfg{8, 2, 2, 10000.0};
  AttentionWeights w = random_weights(cfg, rng);
  Tensor x = Tensor::uniform({3, cfg.d_model}, rng, -1.0, 1.0);
  KVCache cache;
  cache.init(cfg.n_kv_heads, cfg.d_head());
  std::vector<double> row(static_cast<size_t>(cfg.d_model), 0.1);
  attention_step(row, cfg, w, cache);
  CHECK_THROWS_AS(attention_forward(x, cfg, w, &cache), contract_error);

  AttentionConfig bad{9, 2, 2, 10000.0};
  CHECK_THROWS_AS(bad.validate(), config_error);
  AttentionConfig bad2{8, 4, 3, 10000.0};
  CHECK_THROWS_AS(bad2.validate(), config_error);
}
