#include "ecp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ecp::ad {

Tensor::Tensor(std::size_t r, std::size_t c, std::vector<double> values)
    : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) throw std::invalid_argument("tensor data does not match its shape");
}

Tensor Tensor::row_vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor(1, n, std::move(values));
}

double Tensor::item() const {
  if (data.size() != 1) throw std::invalid_argument("item() on a non-scalar tensor");
  return data[0];
}

const Tensor& Var::value() const { return tape->value(id); }
const Tensor& Var::grad() const { return tape->grad(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.grad = Tensor(value.rows, value.cols);
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.grad = Tensor(value.rows, value.cols);
  n.value = std::move(value);
  for (const auto& p : parents) {
    if (p.tape != this) throw std::invalid_argument("parent belongs to another tape");
    n.parents.push_back(p.id);
    n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::backward(Var root) {
  if (root.tape != this) throw std::invalid_argument("root belongs to another tape");
  if (nodes_[root.id].value.size() != 1) throw std::invalid_argument("backward needs a scalar root");
  for (auto& n : nodes_) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
  nodes_[root.id].grad.data[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.parents.empty()) continue;
    auto grads = n.backward(n.grad);
    for (std::size_t k = 0; k < n.parents.size(); ++k) {
      Node& p = nodes_[n.parents[k]];
      if (!p.requires_grad) continue;
      if (!grads[k].same_shape(p.value)) throw std::logic_error("backward produced a misshapen gradient");
      for (std::size_t j = 0; j < p.grad.size(); ++j) p.grad.data[j] += grads[k].data[j];
    }
  }
}

namespace {

std::size_t broadcast_dim(std::size_t a, std::size_t b) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw std::invalid_argument("shape mismatch: " + std::to_string(a) + " vs " + std::to_string(b));
}

// Sums a gradient of the broadcast shape back to the operand shape.
Tensor reduce_to(const Tensor& g, std::size_t rows, std::size_t cols) {
  if (g.rows == rows && g.cols == cols) return g;
  Tensor out(rows, cols);
  for (std::size_t i = 0; i < g.rows; ++i) {
    for (std::size_t j = 0; j < g.cols; ++j) {
      out(rows == 1 ? 0 : i, cols == 1 ? 0 : j) += g(i, j);
    }
  }
  return out;
}

// Elementwise binary op with broadcasting. fwd(a, b) -> value; bwd(a, b, out) -> (d/da, d/db).
template <typename Fwd, typename Bwd>
Var binary(Var a, Var b, Fwd fwd, Bwd bwd) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t r = broadcast_dim(av.rows, bv.rows);
  const std::size_t c = broadcast_dim(av.cols, bv.cols);
  Tensor out(r, c);
  auto at = [](const Tensor& t, std::size_t i, std::size_t j) {
    return t(t.rows == 1 ? 0 : i, t.cols == 1 ? 0 : j);
  };
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out(i, j) = fwd(at(av, i, j), at(bv, i, j));
  }
  Tape* tape = a.tape;
  return tape->record(out, {a, b}, [tape, a, b, r, c, bwd, at](const Tensor& g) {
    const Tensor& av = tape->value(a.id);
    const Tensor& bv = tape->value(b.id);
    Tensor ga(r, c), gb(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        auto [da, db] = bwd(at(av, i, j), at(bv, i, j));
        ga(i, j) = g(i, j) * da;
        gb(i, j) = g(i, j) * db;
      }
    }
    return std::vector<Tensor>{reduce_to(ga, av.rows, av.cols), reduce_to(gb, bv.rows, bv.cols)};
  });
}

// Elementwise unary op; bwd(x, y) -> dy/dx.
template <typename Fwd, typename Bwd>
Var unary(Var a, Fwd fwd, Bwd bwd) {
  const Tensor& av = a.value();
  Tensor out(av.rows, av.cols);
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = fwd(av.data[i]);
  Tape* tape = a.tape;
  const std::size_t out_id = tape->size();
  return tape->record(out, {a}, [tape, a, out_id, bwd](const Tensor& g) {
    const Tensor& x = tape->value(a.id);
    const Tensor& y = tape->value(out_id);
    Tensor gx(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] = g.data[i] * bwd(x.data[i], y.data[i]);
    return std::vector<Tensor>{gx};
  });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  return binary(a, b, [](double x, double y) { return x + y; },
                [](double, double) { return std::pair{1.0, 1.0}; });
}

Var sub(Var a, Var b) {
  return binary(a, b, [](double x, double y) { return x - y; },
                [](double, double) { return std::pair{1.0, -1.0}; });
}

Var mul(Var a, Var b) {
  return binary(a, b, [](double x, double y) { return x * y; },
                [](double x, double y) { return std::pair{y, x}; });
}

Var div(Var a, Var b) {
  return binary(a, b, [](double x, double y) { return x / y; },
                [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

Var maximum(Var a, Var b) {
  return binary(a, b, [](double x, double y) { return x >= y ? x : y; },
                [](double x, double y) { return x >= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0}; });
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols != bv.rows) throw std::invalid_argument("matmul shape mismatch");
  const std::size_t n = av.rows, k = av.cols, m = bv.cols;
  Tensor out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av(i, p);
      if (x == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out(i, j) += x * bv(p, j);
    }
  }
  Tape* tape = a.tape;
  return tape->record(out, {a, b}, [tape, a, b, n, k, m](const Tensor& g) {
    const Tensor& av = tape->value(a.id);
    const Tensor& bv = tape->value(b.id);
    Tensor ga(n, k), gb(k, m);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += g(i, j) * bv(p, j);
        ga(i, p) = s;
        const double x = av(i, p);
        if (x == 0.0) continue;
        for (std::size_t j = 0; j < m; ++j) gb(p, j) += x * g(i, j);
      }
    }
    return std::vector<Tensor>{ga, gb};
  });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(std::max(x, kLogClamp)); },
               [](double x, double) { return x < kLogClamp ? 0.0 : 1.0 / x; });
}

Var sqrt(Var a) {
  return unary(a, [](double x) { return std::sqrt(std::max(x, 0.0)); },
               [](double x, double) { return 0.5 / std::sqrt(std::max(x, kLogClamp)); });
}

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var sum(Var a) {
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data) s += v;
  const std::size_t r = av.rows, c = av.cols;
  return a.tape->record(Tensor::scalar(s), {a}, [r, c](const Tensor& g) {
    return std::vector<Tensor>{Tensor(r, c, g.item())};
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0.0) throw std::invalid_argument("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(Var a) {
  const Tensor& av = a.value();
  Tensor out(av.rows, 1);
  for (std::size_t i = 0; i < av.rows; ++i) {
    for (std::size_t j = 0; j < av.cols; ++j) out(i, 0) += av(i, j);
  }
  const std::size_t r = av.rows, c = av.cols;
  return a.tape->record(out, {a}, [r, c](const Tensor& g) {
    Tensor ga(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga(i, j) = g(i, 0);
    }
    return std::vector<Tensor>{ga};
  });
}

Var sum_cols(Var a) {
  const Tensor& av = a.value();
  Tensor out(1, av.cols);
  for (std::size_t i = 0; i < av.rows; ++i) {
    for (std::size_t j = 0; j < av.cols; ++j) out(0, j) += av(i, j);
  }
  const std::size_t r = av.rows, c = av.cols;
  return a.tape->record(out, {a}, [r, c](const Tensor& g) {
    Tensor ga(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga(i, j) = g(0, j);
    }
    return std::vector<Tensor>{ga};
  });
}

Var gather(Var a, std::vector<std::size_t> flat_indices, std::size_t rows, std::size_t cols) {
  const Tensor& av = a.value();
  if (flat_indices.size() != rows * cols) throw std::invalid_argument("gather shape mismatch");
  Tensor out(rows, cols);
  for (std::size_t i = 0; i < flat_indices.size(); ++i) {
    if (flat_indices[i] >= av.size()) throw std::out_of_range("gather index out of range");
    out.data[i] = av.data[flat_indices[i]];
  }
  const std::size_t r = av.rows, c = av.cols;
  return a.tape->record(out, {a}, [r, c, idx = std::move(flat_indices)](const Tensor& g) {
    Tensor ga(r, c);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.data[idx[i]] += g.data[i];
    return std::vector<Tensor>{ga};
  });
}

Var pick(Var a, const std::vector<int>& columns) {
  const std::size_t r = a.rows(), c = a.cols();
  if (columns.size() != r) throw std::invalid_argument("pick needs one column per row");
  std::vector<std::size_t> idx(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (columns[i] < 0 || static_cast<std::size_t>(columns[i]) >= c) throw std::out_of_range("pick column out of range");
    idx[i] = i * c + static_cast<std::size_t>(columns[i]);
  }
  return gather(a, std::move(idx), r, 1);
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const std::size_t c = a.cols();
  if (begin > end || end > a.rows()) throw std::out_of_range("slice_rows range");
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) {
    for (std::size_t j = 0; j < c; ++j) idx.push_back(i * c + j);
  }
  return gather(a, std::move(idx), end - begin, c);
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of nothing");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat axis must be 0 or 1");
  std::size_t rows = 0, cols = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (rows > 0 && p.cols() != cols) throw std::invalid_argument("concat column mismatch");
      cols = p.cols();
      rows += p.rows();
    } else {
      if (cols > 0 && p.rows() != rows) throw std::invalid_argument("concat row mismatch");
      rows = p.rows();
      cols += p.cols();
    }
  }
  Tensor out(rows, cols);
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t i = 0; i < v.rows; ++i) {
      for (std::size_t j = 0; j < v.cols; ++j) {
        if (axis == 0) {
          out(offset + i, j) = v(i, j);
        } else {
          out(i, offset + j) = v(i, j);
        }
      }
    }
    offset += axis == 0 ? v.rows : v.cols;
    shapes.emplace_back(v.rows, v.cols);
  }
  return parts.front().tape->record(out, parts, [shapes, axis](const Tensor& g) {
    std::vector<Tensor> grads;
    std::size_t off = 0;
    for (auto [r, c] : shapes) {
      Tensor t(r, c);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) t(i, j) = axis == 0 ? g(off + i, j) : g(i, off + j);
      }
      off += axis == 0 ? r : c;
      grads.push_back(std::move(t));
    }
    return grads;
  });
}

Var log_softmax(Var logits) {
  const Tensor& x = logits.value();
  Tensor out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double top = x(i, 0);
    for (std::size_t j = 1; j < x.cols; ++j) top = std::max(top, x(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) s += std::exp(x(i, j) - top);
    const double lse = top + std::log(s);
    for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = x(i, j) - lse;
  }
  Tape* tape = logits.tape;
  const std::size_t out_id = tape->size();
  return tape->record(out, {logits}, [tape, out_id](const Tensor& g) {
    const Tensor& y = tape->value(out_id);
    Tensor gx(y.rows, y.cols);
    for (std::size_t i = 0; i < y.rows; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < y.cols; ++j) gs += g(i, j);
      for (std::size_t j = 0; j < y.cols; ++j) gx(i, j) = g(i, j) - std::exp(y(i, j)) * gs;
    }
    return std::vector<Tensor>{gx};
  });
}

Var softmax(Var logits) { return exp(log_softmax(logits)); }

Var detach(Var a) { return a.tape->constant(a.value()); }

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& point, double h, double tol,
                           double abs_floor) {
  auto evaluate = [&](const std::vector<Tensor>& at, bool with_grad, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> inputs;
    for (const auto& t : at) inputs.push_back(tape.leaf(t, true));
    Var out = f(tape, inputs);
    if (with_grad) {
      tape.backward(out);
      for (const auto& v : inputs) grads->push_back(v.grad());
    }
    return out.item();
  };

  std::vector<Tensor> analytic;
  evaluate(point, true, &analytic);
  GradCheckReport report;
  std::vector<Tensor> probe = point;
  for (std::size_t t = 0; t < point.size(); ++t) {
    for (std::size_t i = 0; i < point[t].size(); ++i) {
      const double orig = probe[t].data[i];
      probe[t].data[i] = orig + h;
      const double up = evaluate(probe, false, nullptr);
      probe[t].data[i] = orig - h;
      const double down = evaluate(probe, false, nullptr);
      probe[t].data[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[t].data[i];
      const double err = std::abs(a - numeric);
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double rel = err / std::max(scale, abs_floor);
      ++report.checked;
      if (err > tol * scale + abs_floor) report.passed = false;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_input = t;
        report.worst_index = i;
      }
      report.max_abs_error = std::max(report.max_abs_error, err);
    }
  }
  return report;
}

}  // namespace ecp::ad
