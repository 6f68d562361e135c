#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace weaktr {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

struct Node;

/// Dense rank-n float32 tensor with shared storage. Copies are shallow:
/// they alias the same data and gradient buffers. A tensor participates in
/// the autodiff tape iff `grad` is non-null; `node` links it to the ops
/// that produced it.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<float>> data;
  std::shared_ptr<std::vector<float>> grad;
  std::shared_ptr<Node> node;

  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false) { return full(std::move(s), 0.0f, requires_grad); }

  static Tensor full(Shape s, float value, bool requires_grad = false) {
    validate_shape(s);
    Tensor t;
    const auto n = static_cast<std::size_t>(shape_numel(s));
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<float>>(n, value);
    if (requires_grad) t.grad = std::make_shared<std::vector<float>>(n, 0.0f);
    return t;
  }

  static Tensor from_vector(Shape s, std::vector<float> values, bool requires_grad = false) {
    validate_shape(s);
    if (shape_numel(s) != static_cast<std::int64_t>(values.size())) {
      throw std::invalid_argument("Tensor::from_vector: shape " + shape_str(s) + " needs " +
                                  std::to_string(shape_numel(s)) + " values, got " +
                                  std::to_string(values.size()));
    }
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<float>>(std::move(values));
    if (requires_grad) t.grad = std::make_shared<std::vector<float>>(t.data->size(), 0.0f);
    return t;
  }

  static Tensor scalar(float value, bool requires_grad = false) { return full({1}, value, requires_grad); }

  bool defined() const { return data != nullptr; }
  bool requires_grad() const { return grad != nullptr; }
  std::int64_t numel() const { return data ? static_cast<std::int64_t>(data->size()) : 0; }
  std::size_t rank() const { return shape.size(); }
  std::int64_t dim(std::size_t i) const { return shape.at(i); }

  const float* ptr() const { return data->data(); }
  float* ptr() { return data->data(); }

  float item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
    return (*data)[0];
  }

  /// Row-major element access, mostly for tests and small utilities.
  float at(std::initializer_list<std::int64_t> idx) const { return (*data)[flat_index(idx)]; }
  float& at(std::initializer_list<std::int64_t> idx) { return (*data)[flat_index(idx)]; }

  bool all_finite() const {
    for (float v : *data)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  static void validate_shape(const Shape& s) {
    for (std::int64_t d : s) {
      if (d <= 0) throw std::invalid_argument("Tensor: dimensions must be positive, got " + shape_str(s));
    }
  }

  std::size_t flat_index(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != shape.size()) {
      throw std::invalid_argument("Tensor::at: rank mismatch, index has " + std::to_string(idx.size()) +
                                  " entries for shape " + shape_str(shape));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::int64_t i : idx) {
      if (i < 0 || i >= shape[axis]) throw std::out_of_range("Tensor::at: index out of range");
      flat = flat * static_cast<std::size_t>(shape[axis]) + static_cast<std::size_t>(i);
      ++axis;
    }
    return flat;
  }
};

/// One tape entry: the tensors an op consumed plus the closure that pushes
/// gradients back into them. The closure captures the output's buffers by
/// value (never its node) so the graph stays acyclic.
struct Node {
  std::vector<Tensor> parents;
  std::function<void()> backward;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

/// Disables tape construction for the enclosing scope (inference, finite
/// differences, data plumbing).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Reverse-mode sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and runs
/// every node's backward exactly once, consumers before producers.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a defined scalar");
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not require grad");
  }
  (*loss.grad)[0] += 1.0f;
  if (!loss.node) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node.get(), 0});
  seen.insert(loss.node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      Node* p = f.n->parents[f.next++].node.get();
      if (p && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
  }
}

/// Named trainable tensor. The gradient buffer persists across steps and
/// accumulates until zero_grad().
struct Parameter {
  std::string name;
  Tensor value;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    if (!value.defined()) throw std::invalid_argument("Parameter: undefined value");
    if (!value.grad) value.grad = std::make_shared<std::vector<float>>(value.data->size(), 0.0f);
  }

  std::int64_t numel() const { return value.numel(); }
  std::vector<float>& values() { return *value.data; }
  const std::vector<float>& values() const { return *value.data; }
  std::vector<float>& gradient() { return *value.grad; }
  const std::vector<float>& gradient() const { return *value.grad; }

  void zero_grad() { std::fill(value.grad->begin(), value.grad->end(), 0.0f); }
};

}  // namespace weaktr
