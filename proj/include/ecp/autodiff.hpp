#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

namespace ecp::ad {

/// Dense row-major 2-D tensor. Scalars are 1x1, vectors are 1xN or Nx1.
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Tensor(std::size_t r, std::size_t c, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor row_vector(std::vector<double> values);

  std::size_t size() const { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double item() const;
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const Tensor&) const = default;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows; }
  std::size_t cols() const { return value().cols; }
  double item() const { return value().item(); }
};

/// Maps the output gradient to one gradient per parent (same shape as that parent).
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records a custom primitive.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);

  /// Reverse sweep from a 1x1 root; gradients accumulate across fan-out.
  void backward(Var root);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

inline constexpr double kLogClamp = 1e-12;

// Elementwise binary ops broadcast any size-1 dimension.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var maximum(Var a, Var b);  // gradient goes to the larger input, the first one on ties

Var matmul(Var a, Var b);
Var exp(Var a);
Var log(Var a);  // clamped at kLogClamp, zero gradient below the clamp
Var sqrt(Var a);  // clamped at 0, gradient evaluated at max(x, kLogClamp)
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

Var sum(Var a);       // -> 1x1
Var mean(Var a);      // -> 1x1
Var sum_rows(Var a);  // (B, N) -> (B, 1)
Var sum_cols(Var a);  // (B, N) -> (1, N)

/// Picks flat indices of `a` into a tensor of the given shape.
Var gather(Var a, std::vector<std::size_t> flat_indices, std::size_t rows, std::size_t cols);
/// (B, N) and one column per row -> (B, 1).
Var pick(Var a, const std::vector<int>& columns);
/// Rows [begin, end) of a.
Var slice_rows(Var a, std::size_t begin, std::size_t end);
/// axis 0 stacks rows, axis 1 stacks columns.
Var concat(const std::vector<Var>& parts, int axis);

Var log_softmax(Var logits);  // row-wise
Var softmax(Var logits);      // row-wise
Var detach(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Builds f on a fresh tape for every evaluation. An entry passes when
/// |analytic - numeric| <= tol * max(|analytic|, |numeric|) + abs_floor.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& point, double h = 1e-5,
                           double tol = 1e-4, double abs_floor = 1e-6);

}  // namespace ecp::ad
