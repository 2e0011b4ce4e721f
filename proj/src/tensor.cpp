#include "recurformer/tensor.hpp"

#include <algorithm>
#include <unordered_set>

namespace rfm {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::make(Shape shape, bool requires_grad) {
  for (i64 d : shape) {
    if (d <= 0) throw shape_error("tensor extents must be positive, got " + shape_str(shape));
  }
  Tensor t;
  t.st_ = std::make_shared<Storage>();
  t.st_->shape = std::move(shape);
  t.st_->data.assign(static_cast<size_t>(shape_numel(t.st_->shape)), 0.0);
  t.st_->requires_grad = requires_grad;
  if (requires_grad) t.st_->grad.assign(t.st_->data.size(), 0.0);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return make(std::move(shape), requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  std::fill(t.st_->data.begin(), t.st_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<i64>(data.size())) {
    throw shape_error("from_data: " + shape_str(shape) + " does not hold " +
                      std::to_string(data.size()) + " elements");
  }
  Tensor t = make(std::move(shape), requires_grad);
  std::copy(data.begin(), data.end(), t.st_->data.begin());
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  for (double& v : t.st_->data) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::normal(Shape shape, Rng& rng, double mean, double stddev, bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  for (double& v : t.st_->data) v = rng.normal(mean, stddev);
  return t;
}

const Shape& Tensor::shape() const {
  if (!st_) throw contract_error("shape() on undefined tensor");
  return st_->shape;
}

i64 Tensor::dim(int i) const {
  const int n = ndim();
  if (i < 0) i += n;
  if (i < 0 || i >= n) throw shape_error("dim index out of range");
  return st_->shape[static_cast<size_t>(i)];
}

i64 Tensor::numel() const { return st_ ? static_cast<i64>(st_->data.size()) : 0; }

double* Tensor::data() const { return st_->data.data(); }

double Tensor::item() const {
  if (numel() != 1) throw contract_error("item() requires a scalar tensor");
  return st_->data[0];
}

bool Tensor::requires_grad() const { return st_ && st_->requires_grad; }

double* Tensor::grad() const {
  if (!requires_grad()) return nullptr;
  return st_->grad.data();
}

void Tensor::zero_grad() const {
  if (requires_grad()) std::fill(st_->grad.begin(), st_->grad.end(), 0.0);
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : ts) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw contract_error("backward: loss must be a defined scalar");
  }
  if (!loss.requires_grad()) {
    throw contract_error("backward: loss does not require grad");
  }

  // Seed d(loss)/d(loss) = 1, then sweep nodes in reverse topological order.
  // A node is visited once even when its output feeds several consumers.
  std::vector<Tensor> order;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS over the node graph.
  struct Frame {
    Tensor t;
    size_t next_parent = 0;
  };
  std::vector<Frame> frames;
  if (loss.node && !seen.count(loss.node.get())) {
    frames.push_back({loss, 0});
    seen.insert(loss.node.get());
  }
  while (!frames.empty()) {
    Frame& f = frames.back();
    Node* n = f.t.node.get();
    if (f.next_parent < n->parents.size()) {
      Tensor p = n->parents[f.next_parent++];
      if (p.node && !seen.count(p.node.get())) {
        seen.insert(p.node.get());
        frames.push_back({p, 0});
      }
    } else {
      order.push_back(f.t);
      frames.pop_back();
    }
  }

  Tensor seed = loss;
  seed.grad()[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = it->node.get();
    if (n->backward) n->backward(*it);
  }
}

}  // namespace rfm
