#pragma once

#include <functional>
#include <memory>

#include "recurformer/common.hpp"

namespace rfm {

struct Node;

// Dense row-major tensor of doubles with reverse-mode autograd.
// A Tensor is a cheap handle: copies share storage. Data is immutable
// after an op produces it; grad is the only mutable field and is
// accumulated into (add semantics) until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false);
  static Tensor normal(Shape shape, Rng& rng, double mean, double stddev,
                       bool requires_grad = false);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  i64 dim(int i) const;  // negative indices count from the back
  i64 numel() const;

  // Shallow-const handle semantics: accessors reach the shared storage.
  double* data() const;
  double item() const;  // numel()==1 only

  bool requires_grad() const;
  double* grad() const;  // null unless requires_grad
  void zero_grad() const;

  // Storage pointer doubles as a stable identity (optimizer state keys).
  const void* id() const { return st_.get(); }

  std::shared_ptr<Node> node;  // null for leaves / no-grad results

 private:
  struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized iff requires_grad
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> st_;

  static Tensor make(Shape shape, bool requires_grad);
};

struct Node {
  std::vector<Tensor> parents;
  // Reads out.grad() and accumulates into parents' grads.
  std::function<void(const Tensor& out)> backward;
};

bool grad_enabled();

// Disables graph construction in the enclosing scope (inference paths).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Reverse topological sweep from a scalar loss. Grads accumulate across
// repeated calls until explicitly zeroed.
void backward(const Tensor& loss);

// Helper for ops: result requires grad iff enabled and any parent does.
bool any_requires_grad(std::initializer_list<const Tensor*> ts);

}  // namespace rfm
