#pragma once

// Central finite-difference gradient oracle, independent of the autograd
// path it checks: the forward is re-evaluated under NoGrad at x +- h.

#include <functional>

#include "recurformer/tensor.hpp"

namespace rfm::testing {

struct FdReport {
  double max_rel_err = 0.0;
  rfm::i64 checked = 0;
};

// forward() must rebuild the graph from the current leaf data and return a
// scalar. Coordinates are subsampled per leaf when max_coords > 0.
inline FdReport check_grads_fd(const std::function<Tensor()>& forward,
                               const std::vector<Tensor>& leaves, Rng& rng,
                               i64 max_coords, double h = 1e-5) {
  for (const Tensor& t : leaves) t.zero_grad();
  Tensor loss = forward();
  backward(loss);

  FdReport rep;
  for (const Tensor& leaf : leaves) {
    const i64 n = leaf.numel();
    std::vector<i64> coords;
    if (max_coords <= 0 || n <= max_coords) {
      for (i64 i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (i64 i = 0; i < max_coords; ++i) coords.push_back(rng.uniform_int(n));
    }
    for (i64 idx : coords) {
      const double saved = leaf.data()[idx];
      double lp, lm;
      {
        NoGradGuard ng;
        leaf.data()[idx] = saved + h;
        lp = forward().item();
        leaf.data()[idx] = saved - h;
        lm = forward().item();
        leaf.data()[idx] = saved;
      }
      const double fd = (lp - lm) / (2.0 * h);
      const double got = leaf.grad()[idx];
      const double denom = std::max({std::fabs(fd), std::fabs(got), 1e-6});
      rep.max_rel_err = std::max(rep.max_rel_err, std::fabs(fd - got) / denom);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace rfm::testing
