#include "recurformer/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace rfm {
namespace ops {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using StrideT = Eigen::OuterStride<>;
using SMapM = Eigen::Map<MatRM, 0, StrideT>;
using CSMapM = Eigen::Map<const MatRM, 0, StrideT>;
using VecX = Eigen::VectorXd;

Tensor result(Shape shape, std::initializer_list<const Tensor*> parents) {
  return Tensor::zeros(std::move(shape), any_requires_grad(parents));
}

void attach(Tensor& out, std::vector<Tensor> parents,
            std::function<void(const Tensor&)> fn) {
  if (!out.requires_grad()) return;
  out.node = std::make_shared<Node>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(fn);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
}

double sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = result(a.shape(), {&a, &b});
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  attach(out, {a, b}, [a, b](const Tensor& o) mutable {
    const i64 n2 = o.numel();
    if (a.requires_grad())
      for (i64 i = 0; i < n2; ++i) a.grad()[i] += o.grad()[i];
    if (b.requires_grad())
      for (i64 i = 0; i < n2; ++i) b.grad()[i] += o.grad()[i];
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = result(a.shape(), {&a, &b});
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  attach(out, {a, b}, [a, b](const Tensor& o) mutable {
    const i64 n2 = o.numel();
    if (a.requires_grad())
      for (i64 i = 0; i < n2; ++i) a.grad()[i] += o.grad()[i];
    if (b.requires_grad())
      for (i64 i = 0; i < n2; ++i) b.grad()[i] -= o.grad()[i];
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = result(a.shape(), {&a, &b});
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  attach(out, {a, b}, [a, b](const Tensor& o) mutable {
    const i64 n2 = o.numel();
    if (a.requires_grad())
      for (i64 i = 0; i < n2; ++i) a.grad()[i] += o.grad()[i] * b.data()[i];
    if (b.requires_grad())
      for (i64 i = 0; i < n2; ++i) b.grad()[i] += o.grad()[i] * a.data()[i];
  });
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = result(a.shape(), {&a});
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
  attach(out, {a}, [a, s](const Tensor& o) mutable {
    if (!a.requires_grad()) return;
    const i64 n2 = o.numel();
    for (i64 i = 0; i < n2; ++i) a.grad()[i] += o.grad()[i] * s;
  });
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor silu(const Tensor& x) {
  Tensor out = result(x.shape(), {&x});
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) {
    const double s = sigmoid(x.data()[i]);
    out.data()[i] = x.data()[i] * s;
  }
  attach(out, {x}, [x](const Tensor& o) mutable {
    if (!x.requires_grad()) return;
    const i64 n2 = o.numel();
    for (i64 i = 0; i < n2; ++i) {
      const double s = sigmoid(x.data()[i]);
      x.grad()[i] += o.grad()[i] * s * (1.0 + x.data()[i] * (1.0 - s));
    }
  });
  return out;
}

Tensor softplus(const Tensor& x) {
  Tensor out = result(x.shape(), {&x});
  const i64 n = out.numel();
  for (i64 i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out.data()[i] = v > 30.0 ? v : std::log1p(std::exp(v));
  }
  attach(out, {x}, [x](const Tensor& o) mutable {
    if (!x.requires_grad()) return;
    const i64 n2 = o.numel();
    for (i64 i = 0; i < n2; ++i) x.grad()[i] += o.grad()[i] * sigmoid(x.data()[i]);
  });
  return out;
}

Tensor exp(const Tensor& x) {
  Tensor out = result(x.shape(), {&x});
  const i64 n = out.numel();
  std::vector<double> saved(static_cast<size_t>(n));
  for (i64 i = 0; i < n; ++i) {
    saved[static_cast<size_t>(i)] = std::exp(x.data()[i]);
    out.data()[i] = saved[static_cast<size_t>(i)];
  }
  attach(out, {x}, [x, saved = std::move(saved)](const Tensor& o) mutable {
    if (!x.requires_grad()) return;
    const i64 n2 = o.numel();
    for (i64 i = 0; i < n2; ++i) x.grad()[i] += o.grad()[i] * saved[static_cast<size_t>(i)];
  });
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.ndim() != 1 || b.dim(0) != x.dim(-1)) {
    throw shape_error("add_bias: bias " + shape_str(b.shape()) + " vs input " +
                      shape_str(x.shape()));
  }
  Tensor out = result(x.shape(), {&x, &b});
  const i64 d = x.dim(-1);
  const i64 rows = x.numel() / d;
  for (i64 r = 0; r < rows; ++r)
    for (i64 j = 0; j < d; ++j)
      out.data()[r * d + j] = x.data()[r * d + j] + b.data()[j];
  attach(out, {x, b}, [x, b, d, rows](const Tensor& o) mutable {
    if (x.requires_grad()) {
      const i64 n2 = o.numel();
      for (i64 i = 0; i < n2; ++i) x.grad()[i] += o.grad()[i];
    }
    if (b.requires_grad()) {
      for (i64 r = 0; r < rows; ++r)
        for (i64 j = 0; j < d; ++j) b.grad()[j] += o.grad()[r * d + j];
    }
  });
  return out;
}

Tensor sum_all(const Tensor& x) {
  Tensor out = result({1}, {&x});
  double acc = 0.0;
  const i64 n = x.numel();
  for (i64 i = 0; i < n; ++i) acc += x.data()[i];
  out.data()[0] = acc;
  attach(out, {x}, [x](const Tensor& o) mutable {
    if (!x.requires_grad()) return;
    const double g = o.grad()[0];
    const i64 n2 = x.numel();
    for (i64 i = 0; i < n2; ++i) x.grad()[i] += g;
  });
  return out;
}

Tensor mean_all(const Tensor& x) {
  Tensor s = sum_all(x);
  return scale(s, 1.0 / static_cast<double>(x.numel()));
}

Tensor slice_last(const Tensor& x, i64 begin, i64 end) {
  const i64 d = x.dim(-1);
  if (begin < 0 || end > d || begin >= end) {
    throw shape_error("slice_last: range [" + std::to_string(begin) + "," +
                      std::to_string(end) + ") on width " + std::to_string(d));
  }
  Shape out_shape = x.shape();
  out_shape.back() = end - begin;
  Tensor out = result(std::move(out_shape), {&x});
  const i64 w = end - begin;
  const i64 rows = x.numel() / d;
  for (i64 r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * w, x.data() + r * d + begin,
                static_cast<size_t>(w) * sizeof(double));
  }
  attach(out, {x}, [x, begin, w, d, rows](const Tensor& o) mutable {
    if (!x.requires_grad()) return;
    for (i64 r = 0; r < rows; ++r)
      for (i64 j = 0; j < w; ++j) x.grad()[r * d + begin + j] += o.grad()[r * w + j];
  });
  return out;
}

Tensor select_columns(const Tensor& x, const std::vector<i64>& cols) {
  const i64 d = x.dim(-1);
  for (i64 c : cols) {
    if (c < 0 || c >= d) throw shape_error("select_columns: index out of range");
  }
  if (cols.empty()) throw shape_error("select_columns: empty selection");
  Shape out_shape = x.shape();
  out_shape.back() = static_cast<i64>(cols.size());
  Tensor out = result(std::move(out_shape), {&x});
  const i64 w = static_cast<i64>(cols.size());
  const i64 rows = x.numel() / d;
  for (i64 r = 0; r < rows; ++r)
    for (i64 j = 0; j < w; ++j)
      out.data()[r * w + j] = x.data()[r * d + cols[static_cast<size_t>(j)]];
  attach(out, {x}, [x, cols, w, d, rows](const Tensor& o) mutable {
    if (!x.requires_grad()) return;
    for (i64 r = 0; r < rows; ++r)
      for (i64 j = 0; j < w; ++j)
        x.grad()[r * d + cols[static_cast<size_t>(j)]] += o.grad()[r * w + j];
  });
  return out;
}

Tensor select_rows(const Tensor& x, const std::vector<i64>& rows) {
  const i64 d = x.dim(-1);
  const i64 r = x.numel() / d;
  if (rows.empty()) throw shape_error("select_rows: empty selection");
  for (i64 i : rows) {
    if (i < 0 || i >= r) throw shape_error("select_rows: row index out of range");
  }
  const i64 n = static_cast<i64>(rows.size());
  Tensor out = result({n, d}, {&x});
  for (i64 i = 0; i < n; ++i) {
    std::memcpy(out.data() + i * d, x.data() + rows[static_cast<size_t>(i)] * d,
                static_cast<size_t>(d) * sizeof(double));
  }
  attach(out, {x}, [x, rows, d, n](const Tensor& o) mutable {
    if (!x.requires_grad()) return;
    for (i64 i = 0; i < n; ++i) {
      double* dst = x.grad() + rows[static_cast<size_t>(i)] * d;
      const double* src = o.grad() + i * d;
      for (i64 j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw shape_error("concat_last: no parts");
  Shape lead = parts[0].shape();
  lead.pop_back();
  i64 total = 0;
  for (const Tensor& p : parts) {
    Shape pl = p.shape();
    pl.pop_back();
    if (pl != lead) throw shape_error("concat_last: leading dims differ");
    total += p.dim(-1);
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  bool rg = false;
  for (const Tensor& p : parts) rg = rg || (grad_enabled() && p.requires_grad());
  Tensor out = Tensor::zeros(out_shape, rg);
  const i64 rows = out.numel() / total;
  i64 off = 0;
  for (const Tensor& p : parts) {
    const i64 w = p.dim(-1);
    for (i64 r = 0; r < rows; ++r)
      std::memcpy(out.data() + r * total + off, p.data() + r * w,
                  static_cast<size_t>(w) * sizeof(double));
    off += w;
  }
  if (rg) {
    std::vector<Tensor> ps = parts;
    out.node = std::make_shared<Node>();
    out.node->parents = ps;
    out.node->backward = [ps, total, rows](const Tensor& o) mutable {
      i64 off2 = 0;
      for (Tensor& p : ps) {
        const i64 w = p.dim(-1);
        if (p.requires_grad()) {
          for (i64 r = 0; r < rows; ++r)
            for (i64 j = 0; j < w; ++j)
              p.grad()[r * w + j] += o.grad()[r * total + off2 + j];
        }
        off2 += w;
      }
    };
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw shape_error("matmul: operands must have >= 2 dims, got " +
                      shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const i64 k = a.dim(-1);
  const i64 n = a.dim(-2);
  const i64 m = b.dim(-1);
  if (b.dim(-2) != k) {
    throw shape_error("matmul: inner extents differ, " + shape_str(a.shape()) +
                      " x " + shape_str(b.shape()));
  }

  if (b.ndim() == 2) {
    // Collapse leading dims of a into rows; single GEMM against the weight.
    Shape out_shape = a.shape();
    out_shape.back() = m;
    const i64 rows = a.numel() / k;
    Tensor out = result(std::move(out_shape), {&a, &b});
    CMapM ma(a.data(), rows, k);
    CMapM mb(b.data(), k, m);
    MapM mo(out.data(), rows, m);
    mo.noalias() = ma * mb;
    attach(out, {a, b}, [a, b, rows, k, m](const Tensor& o) mutable {
      CMapM go(o.grad(), rows, m);
      if (a.requires_grad()) {
        MapM ga(a.grad(), rows, k);
        CMapM mb2(b.data(), k, m);
        ga.noalias() += go * mb2.transpose();
      }
      if (b.requires_grad()) {
        MapM gb(b.grad(), k, m);
        CMapM ma2(a.data(), rows, k);
        gb.noalias() += ma2.transpose() * go;
      }
    });
    return out;
  }

  // Batched: leading dims must match exactly.
  Shape la(a.shape().begin(), a.shape().end() - 2);
  Shape lb(b.shape().begin(), b.shape().end() - 2);
  if (la != lb) {
    throw shape_error("matmul: batch dims differ, " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  }
  const i64 batch = shape_numel(la);
  Shape out_shape = la;
  out_shape.push_back(n);
  out_shape.push_back(m);
  Tensor out = result(std::move(out_shape), {&a, &b});
  for (i64 i = 0; i < batch; ++i) {
    CMapM ma(a.data() + i * n * k, n, k);
    CMapM mb(b.data() + i * k * m, k, m);
    MapM mo(out.data() + i * n * m, n, m);
    mo.noalias() = ma * mb;
  }
  attach(out, {a, b}, [a, b, batch, n, k, m](const Tensor& o) mutable {
    for (i64 i = 0; i < batch; ++i) {
      CMapM go(o.grad() + i * n * m, n, m);
      if (a.requires_grad()) {
        MapM ga(a.grad() + i * n * k, n, k);
        CMapM mb2(b.data() + i * k * m, k, m);
        ga.noalias() += go * mb2.transpose();
      }
      if (b.requires_grad()) {
        MapM gb(b.grad() + i * k * m, k, m);
        CMapM ma2(a.data() + i * n * k, n, k);
        gb.noalias() += ma2.transpose() * go;
      }
    }
  });
  return out;
}

Tensor softmax_rows(const Tensor& x, double s) {
  if (s <= 0.0) throw contract_error("softmax_rows: scale must be positive");
  const i64 d = x.dim(-1);
  const i64 rows = x.numel() / d;
  for (i64 i = 0; i < x.numel(); ++i) {
    if (!std::isfinite(x.data()[i])) throw numeric_error("softmax_rows: non-finite input");
  }
  Tensor out = result(x.shape(), {&x});
  std::vector<double> saved(static_cast<size_t>(x.numel()));
  for (i64 r = 0; r < rows; ++r) {
    const double* row = x.data() + r * d;
    double mx = row[0];
    for (i64 j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (i64 j = 0; j < d; ++j) {
      const double e = std::exp((row[j] - mx) / s);
      out.data()[r * d + j] = e;
      z += e;
    }
    for (i64 j = 0; j < d; ++j) {
      out.data()[r * d + j] /= z;
      saved[static_cast<size_t>(r * d + j)] = out.data()[r * d + j];
    }
  }
  attach(out, {x}, [x, s, d, rows, saved = std::move(saved)](const Tensor& o) mutable {
    if (!x.requires_grad()) return;
    for (i64 r = 0; r < rows; ++r) {
      const double* y = saved.data() + r * d;
      const double* gy = o.grad() + r * d;
      double dot = 0.0;
      for (i64 j = 0; j < d; ++j) dot += y[j] * gy[j];
      for (i64 j = 0; j < d; ++j) x.grad()[r * d + j] += y[j] * (gy[j] - dot) / s;
    }
  });
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  const i64 d = x.dim(-1);
  if (gain.ndim() != 1 || gain.dim(0) != d) {
    throw shape_error("rmsnorm: gain " + shape_str(gain.shape()) + " vs input " +
                      shape_str(x.shape()));
  }
  const i64 rows = x.numel() / d;
  Tensor out = result(x.shape(), {&x, &gain});
  std::vector<double> rinv(static_cast<size_t>(rows));
  for (i64 r = 0; r < rows; ++r) {
    const double* row = x.data() + r * d;
    double ms = 0.0;
    for (i64 j = 0; j < d; ++j) ms += row[j] * row[j];
    ms /= static_cast<double>(d);
    const double ri = 1.0 / std::sqrt(ms + eps);
    rinv[static_cast<size_t>(r)] = ri;
    for (i64 j = 0; j < d; ++j) out.data()[r * d + j] = row[j] * ri * gain.data()[j];
  }
  attach(out, {x, gain}, [x, gain, d, rows, rinv = std::move(rinv)](const Tensor& o) mutable {
    for (i64 r = 0; r < rows; ++r) {
      const double ri = rinv[static_cast<size_t>(r)];
      const double* row = x.data() + r * d;
      const double* gy = o.grad() + r * d;
      if (x.requires_grad()) {
        double dot = 0.0;
        for (i64 j = 0; j < d; ++j) dot += gy[j] * gain.data()[j] * row[j];
        const double c = dot * ri * ri / static_cast<double>(d);
        for (i64 j = 0; j < d; ++j)
          x.grad()[r * d + j] += ri * (gy[j] * gain.data()[j] - row[j] * c);
      }
      if (gain.requires_grad()) {
        for (i64 j = 0; j < d; ++j) gain.grad()[j] += gy[j] * row[j] * ri;
      }
    }
  });
  return out;
}

Tensor embedding(const std::vector<int>& tokens, i64 batch, i64 seq_len,
                 const Tensor& table) {
  if (static_cast<i64>(tokens.size()) != batch * seq_len) {
    throw shape_error("embedding: token count does not match batch x seq_len");
  }
  const i64 v = table.dim(0);
  const i64 d = table.dim(1);
  for (int t : tokens) {
    if (t < 0 || t >= v) {
      throw data_error("embedding: token id " + std::to_string(t) +
                       " outside vocab of size " + std::to_string(v));
    }
  }
  Tensor out = result({batch, seq_len, d}, {&table});
  for (i64 i = 0; i < batch * seq_len; ++i) {
    std::memcpy(out.data() + i * d, table.data() + static_cast<i64>(tokens[static_cast<size_t>(i)]) * d,
                static_cast<size_t>(d) * sizeof(double));
  }
  attach(out, {table}, [table, tokens, d](const Tensor& o) mutable {
    if (!table.requires_grad()) return;
    const i64 n = static_cast<i64>(tokens.size());
    for (i64 i = 0; i < n; ++i) {
      double* dst = table.grad() + static_cast<i64>(tokens[static_cast<size_t>(i)]) * d;
      const double* src = o.grad() + i * d;
      for (i64 j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return out;
}

Tensor rope(const Tensor& x, i64 n_heads, i64 d_head,
            const std::vector<i64>& positions, double theta) {
  if (d_head % 2 != 0) {
    throw shape_error("rope: head dim must be even, got " + std::to_string(d_head));
  }
  const i64 hd = n_heads * d_head;
  if (x.dim(-1) != hd) {
    throw shape_error("rope: last extent " + std::to_string(x.dim(-1)) +
                      " != n_heads*d_head " + std::to_string(hd));
  }
  const i64 L = x.dim(-2);
  if (static_cast<i64>(positions.size()) != L) {
    throw shape_error("rope: positions length must equal sequence length");
  }
  const i64 batch = x.numel() / (L * hd);
  const i64 np = d_head / 2;

  // cos/sin per (t, pair), shared across heads and batch
  std::vector<double> cs(static_cast<size_t>(L * np)), sn(static_cast<size_t>(L * np));
  for (i64 t = 0; t < L; ++t) {
    for (i64 i = 0; i < np; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
      const double ang = static_cast<double>(positions[static_cast<size_t>(t)]) * freq;
      cs[static_cast<size_t>(t * np + i)] = std::cos(ang);
      sn[static_cast<size_t>(t * np + i)] = std::sin(ang);
    }
  }

  Tensor out = result(x.shape(), {&x});
  for (i64 b = 0; b < batch; ++b) {
    for (i64 t = 0; t < L; ++t) {
      const double* xr = x.data() + (b * L + t) * hd;
      double* yr = out.data() + (b * L + t) * hd;
      for (i64 h = 0; h < n_heads; ++h) {
        for (i64 i = 0; i < np; ++i) {
          const double c = cs[static_cast<size_t>(t * np + i)];
          const double s = sn[static_cast<size_t>(t * np + i)];
          const double x0 = xr[h * d_head + 2 * i];
          const double x1 = xr[h * d_head + 2 * i + 1];
          yr[h * d_head + 2 * i] = x0 * c - x1 * s;
          yr[h * d_head + 2 * i + 1] = x0 * s + x1 * c;
        }
      }
    }
  }
  attach(out, {x},
         [x, batch, L, hd, n_heads, d_head, np, cs = std::move(cs),
          sn = std::move(sn)](const Tensor& o) mutable {
           if (!x.requires_grad()) return;
           for (i64 b = 0; b < batch; ++b) {
             for (i64 t = 0; t < L; ++t) {
               const double* gy = o.grad() + (b * L + t) * hd;
               double* gx = x.grad() + (b * L + t) * hd;
               for (i64 h = 0; h < n_heads; ++h) {
                 for (i64 i = 0; i < np; ++i) {
                   const double c = cs[static_cast<size_t>(t * np + i)];
                   const double s = sn[static_cast<size_t>(t * np + i)];
                   const double g0 = gy[h * d_head + 2 * i];
                   const double g1 = gy[h * d_head + 2 * i + 1];
                   gx[h * d_head + 2 * i] += g0 * c + g1 * s;
                   gx[h * d_head + 2 * i + 1] += -g0 * s + g1 * c;
                 }
               }
             }
           }
         });
  return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        i64 n_q_heads, i64 n_kv_heads, i64 d_head,
                        const std::vector<i64>& qh_to_kv,
                        std::vector<std::vector<double>>* probs_out) {
  const i64 qw = n_q_heads * d_head;
  const i64 kw = n_kv_heads * d_head;
  if (q.dim(-1) != qw || k.dim(-1) != kw || v.dim(-1) != kw) {
    throw shape_error("causal_attention: widths q" + shape_str(q.shape()) + " k" +
                      shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  if (static_cast<i64>(qh_to_kv.size()) != n_q_heads) {
    throw contract_error("causal_attention: qh_to_kv size mismatch");
  }
  for (i64 m : qh_to_kv) {
    if (m < 0 || m >= n_kv_heads) throw contract_error("causal_attention: bad kv map");
  }
  const i64 L = q.dim(-2);
  if (k.dim(-2) != L || v.dim(-2) != L) {
    throw shape_error("causal_attention: sequence lengths differ");
  }
  const i64 batch = q.numel() / (L * qw);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(d_head));

  Tensor out = result(q.shape(), {&q, &k, &v});
  // Row-stochastic probs saved for the backward pass, [batch*Hq][L*L].
  std::vector<double> probs;
  const bool need_probs_store = out.requires_grad() || probs_out != nullptr;
  if (need_probs_store) probs.assign(static_cast<size_t>(batch * n_q_heads * L * L), 0.0);
  if (probs_out) {
    probs_out->assign(static_cast<size_t>(batch * n_q_heads),
                      std::vector<double>(static_cast<size_t>(L * L), 0.0));
  }

  std::vector<double> scores(static_cast<size_t>(L * L));
  for (i64 b = 0; b < batch; ++b) {
    for (i64 h = 0; h < n_q_heads; ++h) {
      const i64 kvh = qh_to_kv[static_cast<size_t>(h)];
      CSMapM mq(q.data() + b * L * qw + h * d_head, L, d_head, StrideT(qw));
      CSMapM mk(k.data() + b * L * kw + kvh * d_head, L, d_head, StrideT(kw));
      CSMapM mv(v.data() + b * L * kw + kvh * d_head, L, d_head, StrideT(kw));
      MapM ms(scores.data(), L, L);
      ms.noalias() = mq * mk.transpose() * inv_scale;
      // causal row softmax
      for (i64 t = 0; t < L; ++t) {
        double* row = scores.data() + t * L;
        double mx = row[0];
        for (i64 j = 1; j <= t; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (i64 j = 0; j <= t; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (i64 j = 0; j <= t; ++j) row[j] /= z;
        for (i64 j = t + 1; j < L; ++j) row[j] = 0.0;
      }
      SMapM mo(out.data() + b * L * qw + h * d_head, L, d_head, StrideT(qw));
      mo.noalias() = ms * mv;
      if (need_probs_store) {
        std::memcpy(probs.data() + (b * n_q_heads + h) * L * L, scores.data(),
                    static_cast<size_t>(L * L) * sizeof(double));
      }
      if (probs_out) {
        std::memcpy((*probs_out)[static_cast<size_t>(b * n_q_heads + h)].data(),
                    scores.data(), static_cast<size_t>(L * L) * sizeof(double));
      }
    }
  }

  attach(out, {q, k, v},
         [q, k, v, batch, L, qw, kw, n_q_heads, d_head, qh_to_kv, inv_scale,
          probs = std::move(probs)](const Tensor& o) mutable {
           MatRM dP(L, L), dS(L, L);
           for (i64 b = 0; b < batch; ++b) {
             for (i64 h = 0; h < n_q_heads; ++h) {
               const i64 kvh = qh_to_kv[static_cast<size_t>(h)];
               CMapM mp(probs.data() + (b * n_q_heads + h) * L * L, L, L);
               CSMapM go(o.grad() + b * L * qw + h * d_head, L, d_head, StrideT(qw));
               CSMapM mq(q.data() + b * L * qw + h * d_head, L, d_head, StrideT(qw));
               CSMapM mk(k.data() + b * L * kw + kvh * d_head, L, d_head, StrideT(kw));
               CSMapM mv(v.data() + b * L * kw + kvh * d_head, L, d_head, StrideT(kw));
               if (v.requires_grad()) {
                 SMapM gv(v.grad() + b * L * kw + kvh * d_head, L, d_head, StrideT(kw));
                 gv.noalias() += mp.transpose() * go;
               }
               dP.noalias() = go * mv.transpose();
               // softmax backward per causal row
               for (i64 t = 0; t < L; ++t) {
                 double dot = 0.0;
                 for (i64 j = 0; j <= t; ++j) dot += dP(t, j) * mp(t, j);
                 for (i64 j = 0; j <= t; ++j) dS(t, j) = mp(t, j) * (dP(t, j) - dot);
                 for (i64 j = t + 1; j < L; ++j) dS(t, j) = 0.0;
               }
               if (q.requires_grad()) {
                 SMapM gq(q.grad() + b * L * qw + h * d_head, L, d_head, StrideT(qw));
                 gq.noalias() += dS * mk * inv_scale;
               }
               if (k.requires_grad()) {
                 SMapM gk(k.grad() + b * L * kw + kvh * d_head, L, d_head, StrideT(kw));
                 gk.noalias() += dS.transpose() * mq * inv_scale;
               }
             }
           }
         });
  return out;
}

Tensor causal_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const i64 c = x.dim(-1);
  if (weight.ndim() != 2 || weight.dim(0) != c) {
    throw shape_error("causal_conv1d: weight " + shape_str(weight.shape()) +
                      " vs channels " + std::to_string(c));
  }
  if (bias.ndim() != 1 || bias.dim(0) != c) {
    throw shape_error("causal_conv1d: bias shape");
  }
  const i64 kw = weight.dim(1);
  const i64 L = x.dim(-2);
  const i64 batch = x.numel() / (L * c);
  Tensor out = result(x.shape(), {&x, &weight, &bias});
  for (i64 b = 0; b < batch; ++b) {
    for (i64 t = 0; t < L; ++t) {
      double* yr = out.data() + (b * L + t) * c;
      for (i64 ch = 0; ch < c; ++ch) {
        double acc = bias.data()[ch];
        for (i64 j = 0; j < kw; ++j) {
          const i64 tt = t - kw + 1 + j;
          if (tt < 0) continue;
          acc += weight.data()[ch * kw + j] * x.data()[(b * L + tt) * c + ch];
        }
        yr[ch] = acc;
      }
    }
  }
  attach(out, {x, weight, bias},
         [x, weight, bias, batch, L, c, kw](const Tensor& o) mutable {
           for (i64 b = 0; b < batch; ++b) {
             for (i64 t = 0; t < L; ++t) {
               const double* gy = o.grad() + (b * L + t) * c;
               for (i64 ch = 0; ch < c; ++ch) {
                 const double g = gy[ch];
                 if (bias.requires_grad()) bias.grad()[ch] += g;
                 for (i64 j = 0; j < kw; ++j) {
                   const i64 tt = t - kw + 1 + j;
                   if (tt < 0) continue;
                   if (weight.requires_grad())
                     weight.grad()[ch * kw + j] += g * x.data()[(b * L + tt) * c + ch];
                   if (x.requires_grad())
                     x.grad()[(b * L + tt) * c + ch] += g * weight.data()[ch * kw + j];
                 }
               }
             }
           }
         });
  return out;
}

namespace {

struct ScanPair {
  double a;
  double x;
};

// combine(p, q): apply p then q to the running state.
inline ScanPair combine(const ScanPair& p, const ScanPair& q) {
  return {q.a * p.a, q.a * p.x + q.x};
}

// In-place inclusive Blelloch scan of the linear recurrence
// h_t = a_t h_{t-1} + x_t from h_{-1} = 0; on return x[t] holds h_t.
void blelloch_scan(std::vector<ScanPair>& buf, i64 n) {
  i64 np = 1;
  while (np < n) np <<= 1;
  for (i64 i = n; i < np; ++i) buf[static_cast<size_t>(i)] = {1.0, 0.0};
  // Keep originals so the exclusive result can be turned inclusive.
  static thread_local std::vector<ScanPair> orig;
  orig.assign(buf.begin(), buf.begin() + n);
  // upsweep
  for (i64 d = 1; d < np; d <<= 1) {
    for (i64 i = 2 * d - 1; i < np; i += 2 * d) {
      buf[static_cast<size_t>(i)] = combine(buf[static_cast<size_t>(i - d)], buf[static_cast<size_t>(i)]);
    }
  }
  // downsweep -> exclusive scan
  buf[static_cast<size_t>(np - 1)] = {1.0, 0.0};
  for (i64 d = np / 2; d >= 1; d >>= 1) {
    for (i64 i = 2 * d - 1; i < np; i += 2 * d) {
      const ScanPair left = buf[static_cast<size_t>(i - d)];
      const ScanPair parent = buf[static_cast<size_t>(i)];
      buf[static_cast<size_t>(i - d)] = parent;
      buf[static_cast<size_t>(i)] = combine(parent, left);
    }
  }
  // inclusive
  for (i64 i = 0; i < n; ++i) {
    buf[static_cast<size_t>(i)] =
        combine(buf[static_cast<size_t>(i)], orig[static_cast<size_t>(i)]);
  }
}

}  // namespace

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& A,
                      const Tensor& Bm, const Tensor& Cm, const Tensor& D) {
  check_same_shape(u, delta, "selective_scan(u,delta)");
  const i64 c = u.dim(-1);
  const i64 L = u.dim(-2);
  const i64 batch = u.numel() / (L * c);
  if (A.ndim() != 2 || A.dim(0) != c) {
    throw shape_error("selective_scan: A " + shape_str(A.shape()));
  }
  const i64 n = A.dim(1);
  if (Bm.dim(-1) != n || Cm.dim(-1) != n || Bm.dim(-2) != L || Cm.dim(-2) != L) {
    throw shape_error("selective_scan: B/C shapes " + shape_str(Bm.shape()) + ", " +
                      shape_str(Cm.shape()));
  }
  if (D.ndim() != 1 || D.dim(0) != c) throw shape_error("selective_scan: D shape");

  Tensor out = result(u.shape(), {&u, &delta, &A, &Bm, &Cm, &D});
  const bool save_h = out.requires_grad();
  std::vector<double> h_store;
  if (save_h) h_store.assign(static_cast<size_t>(batch * L * c * n), 0.0);

  std::vector<ScanPair> buf;
  i64 np = 1;
  while (np < L) np <<= 1;
  buf.resize(static_cast<size_t>(np));

  for (i64 b = 0; b < batch; ++b) {
    for (i64 ch = 0; ch < c; ++ch) {
      // y starts from the skip term
      for (i64 t = 0; t < L; ++t) {
        out.data()[(b * L + t) * c + ch] =
            D.data()[ch] * u.data()[(b * L + t) * c + ch];
      }
      for (i64 s = 0; s < n; ++s) {
        const double acs = A.data()[ch * n + s];
        for (i64 t = 0; t < L; ++t) {
          const double dt = delta.data()[(b * L + t) * c + ch];
          const double ut = u.data()[(b * L + t) * c + ch];
          const double bt = Bm.data()[(b * L + t) * n + s];
          buf[static_cast<size_t>(t)] = {std::exp(dt * acs), dt * bt * ut};
        }
        blelloch_scan(buf, L);
        for (i64 t = 0; t < L; ++t) {
          const double h = buf[static_cast<size_t>(t)].x;
          if (save_h) h_store[static_cast<size_t>(((b * L + t) * c + ch) * n + s)] = h;
          out.data()[(b * L + t) * c + ch] += Cm.data()[(b * L + t) * n + s] * h;
        }
      }
    }
  }

  attach(out, {u, delta, A, Bm, Cm, D},
         [u, delta, A, Bm, Cm, D, batch, L, c, n,
          h_store = std::move(h_store)](const Tensor& o) mutable {
           std::vector<double> dh(static_cast<size_t>(n));
           for (i64 b = 0; b < batch; ++b) {
             for (i64 ch = 0; ch < c; ++ch) {
               std::fill(dh.begin(), dh.end(), 0.0);
               for (i64 t = L - 1; t >= 0; --t) {
                 const i64 row = (b * L + t) * c + ch;
                 const double dt = delta.data()[row];
                 const double ut = u.data()[row];
                 const double gy = o.grad()[row];
                 if (D.requires_grad()) D.grad()[ch] += gy * ut;
                 double du_acc = D.data()[ch] * gy;
                 double dd_acc = 0.0;
                 for (i64 s = 0; s < n; ++s) {
                   const double ct = Cm.data()[(b * L + t) * n + s];
                   const double ht = h_store[static_cast<size_t>(row * n + s)];
                   if (Cm.requires_grad()) Cm.grad()[(b * L + t) * n + s] += gy * ht;
                   double dhs = dh[static_cast<size_t>(s)] + ct * gy;
                   const double acs = A.data()[ch * n + s];
                   const double abar = std::exp(dt * acs);
                   const double hprev =
                       t > 0 ? h_store[static_cast<size_t>(((b * L + t - 1) * c + ch) * n + s)] : 0.0;
                   const double bt = Bm.data()[(b * L + t) * n + s];
                   // h_t = abar h_{t-1} + dt bt ut
                   if (A.requires_grad()) A.grad()[ch * n + s] += dhs * abar * dt * hprev;
                   if (Bm.requires_grad()) Bm.grad()[(b * L + t) * n + s] += dhs * dt * ut;
                   dd_acc += dhs * (abar * acs * hprev + bt * ut);
                   du_acc += dhs * dt * bt;
                   dh[static_cast<size_t>(s)] = dhs * abar;
                 }
                 if (delta.requires_grad()) delta.grad()[row] += dd_acc;
                 if (u.requires_grad()) u.grad()[row] += du_acc;
               }
             }
           }
         });
  return out;
}

Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask) {
  const i64 v = logits.dim(-1);
  const i64 rows = logits.numel() / v;
  if (static_cast<i64>(targets.size()) != rows || static_cast<i64>(mask.size()) != rows) {
    throw shape_error("cross_entropy_masked: targets/mask must have one entry per row");
  }
  i64 count = 0;
  for (i64 r = 0; r < rows; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    ++count;
    const int t = targets[static_cast<size_t>(r)];
    if (t < 0 || static_cast<i64>(t) >= v) {
      throw data_error("cross_entropy_masked: target out of range");
    }
  }
  if (count == 0) throw contract_error("cross_entropy_masked: empty mask");

  Tensor out = result({1}, {&logits});
  double loss = 0.0;
  for (i64 r = 0; r < rows; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    const double* row = logits.data() + r * v;
    double mx = row[0];
    for (i64 j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (i64 j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    loss += mx + std::log(z) - row[targets[static_cast<size_t>(r)]];
  }
  out.data()[0] = loss / static_cast<double>(count);

  attach(out, {logits}, [logits, targets, mask, rows, v, count](const Tensor& o) mutable {
    if (!logits.requires_grad()) return;
    const double g = o.grad()[0] / static_cast<double>(count);
    for (i64 r = 0; r < rows; ++r) {
      if (!mask[static_cast<size_t>(r)]) continue;
      const double* row = logits.data() + r * v;
      double* grow = logits.grad() + r * v;
      double mx = row[0];
      for (i64 j = 1; j < v; ++j) mx = std::max(mx, row[j]);
      double z = 0.0;
      for (i64 j = 0; j < v; ++j) z += std::exp(row[j] - mx);
      for (i64 j = 0; j < v; ++j) {
        double p = std::exp(row[j] - mx) / z;
        grow[j] += g * p;
      }
      grow[targets[static_cast<size_t>(r)]] -= g;
    }
  });
  return out;
}

}  // namespace ops
}  // namespace rfm
