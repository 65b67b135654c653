#include "fedsdaf/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "fedsdaf/errors.hpp"
#include "fedsdaf/kernels.hpp"

namespace fedsdaf {

struct Node {
  const char* op;
  std::vector<Tensor> parents;
  std::function<void(const std::vector<double>&)> backward;
};

struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;
  std::shared_ptr<Node> node;

  std::size_t size() const { return data.size(); }
};

namespace {

thread_local int g_no_grad_depth = 0;

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " +
                   shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

bool needs_grad(const Tensor& t) { return t.requires_grad() || t.has_node(); }

// Ensures t's grad buffer exists and returns it, or nullptr when t does not
// participate in differentiation. Closures call this per parent.
std::vector<double>* accum_target(const Tensor& t) {
  TensorImpl* impl = t.impl();
  if (!impl || !(impl->requires_grad || impl->node)) return nullptr;
  if (impl->grad.size() != impl->data.size())
    impl->grad.assign(impl->data.size(), 0.0);
  return &impl->grad;
}

}  // namespace

Tensor make_leaf(std::vector<std::size_t> shape, std::vector<double> data,
                 bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(data.size()) + " values");
  if (shape.empty())
    throw ShapeError("tensor: rank-0 shapes are not supported; use {1}");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
  return Tensor(std::move(impl));
}

Tensor make_result(std::vector<std::size_t> shape, std::vector<double> data,
                   const char* op, std::vector<Tensor> parents,
                   std::function<void(const std::vector<double>&)> backward) {
  Tensor out = make_leaf(std::move(shape), std::move(data), false);
  bool track = grad_enabled();
  if (track) {
    track = false;
    for (const Tensor& p : parents)
      if (needs_grad(p)) {
        track = true;
        break;
      }
  }
  if (track) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
  }
  return out;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value,
                    bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
  return make_leaf(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_leaf({1}, {value}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
  if (!impl_) throw ContractError("tensor: use of empty handle");
  return impl_->shape;
}

std::size_t Tensor::size() const { return shape_numel(shape()); }

std::size_t Tensor::ndim() const { return shape().size(); }

std::size_t Tensor::rows() const {
  if (shape().size() != 2)
    throw ShapeError("tensor: rows() needs a matrix, got " + shape_str(shape()));
  return impl_->shape[0];
}

std::size_t Tensor::cols() const {
  if (shape().size() != 2)
    throw ShapeError("tensor: cols() needs a matrix, got " + shape_str(shape()));
  return impl_->shape[1];
}

const std::vector<double>& Tensor::data() const {
  if (!impl_) throw ContractError("tensor: use of empty handle");
  return impl_->data;
}

std::vector<double>& Tensor::mutable_data() {
  if (!impl_) throw ContractError("tensor: use of empty handle");
  if (impl_->node)
    throw ContractError("tensor: graph outputs are immutable; mutate leaves only");
  return impl_->data;
}

double Tensor::value() const {
  if (size() != 1)
    throw ContractError("tensor: value() needs a single element, got " +
                        shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const {
  if (i >= data().size())
    throw ShapeError("tensor: index " + std::to_string(i) + " out of range");
  return impl_->data[i];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  std::size_t r = rows(), c = cols();
  if (i >= r || j >= c)
    throw ShapeError("tensor: index (" + std::to_string(i) + "," +
                     std::to_string(j) + ") out of range for " + shape_str(shape()));
  return impl_->data[i * c + j];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  if (!impl_) throw ContractError("tensor: use of empty handle");
  if (impl_->node)
    throw ContractError("tensor: requires_grad is settable on leaves only");
  impl_->requires_grad = v;
  if (v && impl_->grad.size() != impl_->data.size())
    impl_->grad.assign(impl_->data.size(), 0.0);
}

bool Tensor::has_node() const { return impl_ && impl_->node != nullptr; }

const char* Tensor::op() const {
  return has_node() ? impl_->node->op : "leaf";
}

const std::vector<double>& Tensor::grad() const {
  if (!impl_) throw ContractError("tensor: use of empty handle");
  if (!impl_->requires_grad)
    throw ContractError("tensor: grad() on a tensor without requires_grad");
  if (impl_->grad.size() != impl_->data.size())
    impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_) throw ContractError("tensor: use of empty handle");
  impl_->grad.assign(impl_->data.size(), 0.0);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

// ---------------------------------------------------------------------------
// ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    shape_fail("matmul", a, b);
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n);
  kernels::matmul(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result(
      {m, n}, std::move(out), "matmul", {a, b},
      [a, b, m, k, n](const std::vector<double>& gout) {
        if (auto* ga = accum_target(a))
          kernels::matmul_grad_a(gout.data(), b.data().data(), ga->data(), m, k, n);
        if (auto* gb = accum_target(b))
          kernels::matmul_grad_b(a.data().data(), gout.data(), gb->data(), m, k, n);
      });
}

namespace {

enum class Bcast { none, row_vector, column };

// Classifies how `small` spreads across matrix `big`; ShapeError if it can't.
Bcast classify_broadcast(const char* op, const Tensor& big, const Tensor& small) {
  if (big.ndim() != 2) shape_fail(op, big, small);
  if (small.ndim() == 1 && small.size() == big.cols()) return Bcast::row_vector;
  if (small.ndim() == 2 && small.rows() == big.rows() && small.cols() == 1)
    return Bcast::column;
  shape_fail(op, big, small);
}

// Accumulates a full-shape gradient into the broadcast operand's grad:
// reduce over the axis the value was spread along. Serial on purpose; these
// reductions are cheap and must not depend on thread schedule.
void reduce_into(Bcast mode, const std::vector<double>& gfull, std::size_t m,
                 std::size_t n, std::vector<double>& gsmall, double sign) {
  if (mode == Bcast::row_vector) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < m; ++i) acc += gfull[i * n + j];
      gsmall[j] += sign * acc;
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += gfull[i * n + j];
      gsmall[i] += sign * acc;
    }
  }
}

template <class Fwd, class BwdSame, class BwdBcast>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b,
                          Fwd fwd, BwdSame bwd_same, BwdBcast bwd_bcast) {
  if (a.shape() == b.shape()) {
    std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.data()[i], b.data()[i]);
    return make_result(a.shape(), std::move(out), op, {a, b},
                       [a, b, bwd_same](const std::vector<double>& g) {
                         bwd_same(a, b, g);
                       });
  }
  bool a_big = a.size() >= b.size();
  const Tensor& big = a_big ? a : b;
  const Tensor& small = a_big ? b : a;
  Bcast mode = classify_broadcast(op, big, small);
  std::size_t m = big.rows(), n = big.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = mode == Bcast::row_vector ? small.data()[j] : small.data()[i];
      double bigv = big.data()[i * n + j];
      out[i * n + j] = a_big ? fwd(bigv, s) : fwd(s, bigv);
    }
  return make_result(big.shape(), std::move(out), op, {a, b},
                     [a_big, big, small, mode, m, n, bwd_bcast](
                         const std::vector<double>& g) {
                       bwd_bcast(big, small, mode, m, n, a_big, g);
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const Tensor& a, const Tensor& b, const std::vector<double>& g) {
        if (auto* ga = accum_target(a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = accum_target(b))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
      },
      [](const Tensor& big, const Tensor& small, Bcast mode, std::size_t m,
         std::size_t n, bool, const std::vector<double>& g) {
        if (auto* gb = accum_target(big))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
        if (auto* gs = accum_target(small)) reduce_into(mode, g, m, n, *gs, 1.0);
      });
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "subtract", a, b, [](double x, double y) { return x - y; },
      [](const Tensor& a, const Tensor& b, const std::vector<double>& g) {
        if (auto* ga = accum_target(a))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = accum_target(b))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
      },
      [](const Tensor& big, const Tensor& small, Bcast mode, std::size_t m,
         std::size_t n, bool a_big, const std::vector<double>& g) {
        double big_sign = a_big ? 1.0 : -1.0;
        if (auto* gb = accum_target(big))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += big_sign * g[i];
        if (auto* gs = accum_target(small))
          reduce_into(mode, g, m, n, *gs, -big_sign);
      });
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "multiply", a, b, [](double x, double y) { return x * y; },
      [](const Tensor& a, const Tensor& b, const std::vector<double>& g) {
        if (auto* ga = accum_target(a))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*ga)[i] += g[i] * b.data()[i];
        if (auto* gb = accum_target(b))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*gb)[i] += g[i] * a.data()[i];
      },
      [](const Tensor& big, const Tensor& small, Bcast mode, std::size_t m,
         std::size_t n, bool, const std::vector<double>& g) {
        if (auto* gb = accum_target(big))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              double s =
                  mode == Bcast::row_vector ? small.data()[j] : small.data()[i];
              (*gb)[i * n + j] += g[i * n + j] * s;
            }
        if (auto* gs = accum_target(small)) {
          if (mode == Bcast::row_vector) {
            for (std::size_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < m; ++i)
                acc += g[i * n + j] * big.data()[i * n + j];
              (*gs)[j] += acc;
            }
          } else {
            for (std::size_t i = 0; i < m; ++i) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j)
                acc += g[i * n + j] * big.data()[i * n + j];
              (*gs)[i] += acc;
            }
          }
        }
      });
}

Tensor scalar_mul(const Tensor& a, double s) {
  std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * s;
  return make_result(a.shape(), std::move(out), "scalar_mul", {a},
                     [a, s](const std::vector<double>& g) {
                       if (auto* ga = accum_target(a))
                         for (std::size_t i = 0; i < g.size(); ++i)
                           (*ga)[i] += g[i] * s;
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: needs at least one input");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const Tensor& p : parts)
    if (p.ndim() != 2)
      throw ShapeError("concat: inputs must be matrices, got " +
                       shape_str(p.shape()));
  std::size_t fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    std::size_t f = axis == 0 ? p.cols() : p.rows();
    if (f != fixed) shape_fail("concat", parts[0], p);
    total += axis == 0 ? p.rows() : p.cols();
  }
  std::size_t m = axis == 0 ? total : fixed;
  std::size_t n = axis == 0 ? fixed : total;
  std::vector<double> out(m * n);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::size_t pr = p.rows(), pc = p.cols();
    if (axis == 0) {
      for (std::size_t i = 0; i < pr * pc; ++i) out[off * n + i] = p.data()[i];
      off += pr;
    } else {
      for (std::size_t i = 0; i < pr; ++i)
        for (std::size_t j = 0; j < pc; ++j)
          out[i * n + off + j] = p.data()[i * pc + j];
      off += pc;
    }
  }
  return make_result(
      {m, n}, std::move(out), "concat", parts,
      [parts, axis, n](const std::vector<double>& g) {
        std::size_t off = 0;
        for (const Tensor& p : parts) {
          std::size_t pr = p.rows(), pc = p.cols();
          if (auto* gp = accum_target(p)) {
            if (axis == 0) {
              for (std::size_t i = 0; i < pr * pc; ++i)
                (*gp)[i] += g[off * n + i];
            } else {
              for (std::size_t i = 0; i < pr; ++i)
                for (std::size_t j = 0; j < pc; ++j)
                  (*gp)[i * pc + j] += g[i * n + off + j];
            }
          }
          off += axis == 0 ? pr : pc;
        }
      });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (a.ndim() != 2)
    throw ShapeError("slice: input must be a matrix, got " + shape_str(a.shape()));
  if (axis > 1) throw ShapeError("slice: axis must be 0 or 1");
  std::size_t extent = axis == 0 ? a.rows() : a.cols();
  if (len == 0 || start + len > extent)
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds axis extent " +
                     std::to_string(extent));
  std::size_t m = axis == 0 ? len : a.rows();
  std::size_t n = axis == 0 ? a.cols() : len;
  std::size_t ac = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t si = axis == 0 ? start + i : i;
      std::size_t sj = axis == 0 ? j : start + j;
      out[i * n + j] = a.data()[si * ac + sj];
    }
  return make_result({m, n}, std::move(out), "slice", {a},
                     [a, axis, start, m, n, ac](const std::vector<double>& g) {
                       auto* ga = accum_target(a);
                       if (!ga) return;
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j) {
                           std::size_t si = axis == 0 ? start + i : i;
                           std::size_t sj = axis == 0 ? j : start + j;
                           (*ga)[si * ac + sj] += g[i * n + j];
                         }
                     });
}

namespace {

Tensor reduce_full(const Tensor& a, bool take_mean) {
  std::size_t n = a.size();
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  double scale = take_mean ? 1.0 / static_cast<double>(n) : 1.0;
  return make_result({1}, {acc * scale}, take_mean ? "mean" : "sum", {a},
                     [a, scale](const std::vector<double>& g) {
                       if (auto* ga = accum_target(a))
                         for (double& v : *ga) v += g[0] * scale;
                     });
}

Tensor reduce_axis(const Tensor& a, std::size_t axis, bool keepdims,
                   bool take_mean) {
  if (a.ndim() != 2)
    throw ShapeError("reduce: axis form needs a matrix, got " +
                     shape_str(a.shape()));
  if (axis > 1) throw ShapeError("reduce: axis must be 0 or 1");
  std::size_t m = a.rows(), n = a.cols();
  std::size_t out_len = axis == 0 ? n : m;
  double scale =
      take_mean ? 1.0 / static_cast<double>(axis == 0 ? m : n) : 1.0;
  std::vector<double> out(out_len, 0.0);
  if (axis == 0) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += a.data()[i * n + j];
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += a.data()[i * n + j];
      out[i] = acc;
    }
  }
  for (double& v : out) v *= scale;
  std::vector<std::size_t> shape;
  if (keepdims)
    shape = axis == 0 ? std::vector<std::size_t>{1, n}
                      : std::vector<std::size_t>{m, 1};
  else
    shape = {out_len};
  return make_result(std::move(shape), std::move(out),
                     take_mean ? "mean" : "sum", {a},
                     [a, axis, m, n, scale](const std::vector<double>& g) {
                       auto* ga = accum_target(a);
                       if (!ga) return;
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           (*ga)[i * n + j] += scale * g[axis == 0 ? j : i];
                     });
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce_full(a, false); }
Tensor sum(const Tensor& a, std::size_t axis, bool keepdims) {
  return reduce_axis(a, axis, keepdims, false);
}
Tensor mean(const Tensor& a) { return reduce_full(a, true); }
Tensor mean(const Tensor& a, std::size_t axis, bool keepdims) {
  return reduce_axis(a, axis, keepdims, true);
}

Tensor relu(const Tensor& a) {
  std::size_t n = a.size();
  std::vector<double> out(n);
  kernels::relu(a.data().data(), out.data(), n);
  return make_result(a.shape(), std::move(out), "relu", {a},
                     [a, n](const std::vector<double>& g) {
                       if (auto* ga = accum_target(a))
                         kernels::relu_grad(a.data().data(), g.data(),
                                            ga->data(), n);
                     });
}

Tensor gelu(const Tensor& a) {
  std::size_t n = a.size();
  std::vector<double> out(n);
  kernels::gelu(a.data().data(), out.data(), n);
  return make_result(a.shape(), std::move(out), "gelu", {a},
                     [a, n](const std::vector<double>& g) {
                       if (auto* ga = accum_target(a))
                         kernels::gelu_grad(a.data().data(), g.data(),
                                            ga->data(), n);
                     });
}

Tensor exp(const Tensor& a) {
  std::size_t n = a.size();
  // The backward pass needs the forward output; keep a copy in the closure
  // rather than a handle to the result, which would cycle the graph.
  auto saved = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) (*saved)[i] = std::exp(a.data()[i]);
  std::vector<double> out = *saved;
  return make_result(a.shape(), std::move(out), "exp", {a},
                     [a, saved](const std::vector<double>& g) {
                       if (auto* ga = accum_target(a))
                         for (std::size_t i = 0; i < g.size(); ++i)
                           (*ga)[i] += g[i] * (*saved)[i];
                     });
}

Tensor log(const Tensor& a, double floor) {
  std::size_t n = a.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double x = a.data()[i];
    if (floor > 0.0 && x < floor) x = floor;
    out[i] = std::log(x);
  }
  return make_result(a.shape(), std::move(out), "log", {a},
                     [a, floor](const std::vector<double>& g) {
                       auto* ga = accum_target(a);
                       if (!ga) return;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         double x = a.data()[i];
                         if (floor > 0.0 && x < floor) continue;
                         (*ga)[i] += g[i] / x;
                       }
                     });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  if (a.ndim() == 1) {
    std::size_t w = a.size();
    auto saved = std::make_shared<std::vector<double>>(w);
    kernels::softmax_rows(a.data().data(), saved->data(), 1, w);
    std::vector<double> out = *saved;
    return make_result(a.shape(), std::move(out), "softmax", {a},
                       [a, saved, w](const std::vector<double>& g) {
                         if (auto* ga = accum_target(a))
                           kernels::softmax_grad_rows(saved->data(), g.data(),
                                                      ga->data(), 1, w);
                       });
  }
  if (a.ndim() != 2 || axis > 1)
    throw ShapeError("softmax: needs a matrix with axis 0 or 1, got " +
                     shape_str(a.shape()));
  std::size_t m = a.rows(), n = a.cols();
  auto saved = std::make_shared<std::vector<double>>(m * n);
  if (axis == 1) {
    kernels::softmax_rows(a.data().data(), saved->data(), m, n);
  } else {
    // Column softmax is off the hot path; plain strided loops.
    for (std::size_t j = 0; j < n; ++j) {
      double mx = a.data()[j];
      for (std::size_t i = 1; i < m; ++i)
        mx = std::max(mx, a.data()[i * n + j]);
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        (*saved)[i * n + j] = std::exp(a.data()[i * n + j] - mx);
        s += (*saved)[i * n + j];
      }
      for (std::size_t i = 0; i < m; ++i) (*saved)[i * n + j] /= s;
    }
  }
  std::vector<double> out = *saved;
  return make_result(
      {m, n}, std::move(out), "softmax", {a},
      [a, saved, axis, m, n](const std::vector<double>& g) {
        auto* ga = accum_target(a);
        if (!ga) return;
        if (axis == 1) {
          kernels::softmax_grad_rows(saved->data(), g.data(), ga->data(), m, n);
        } else {
          const std::vector<double>& y = *saved;
          for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t i = 0; i < m; ++i)
              dot += y[i * n + j] * g[i * n + j];
            for (std::size_t i = 0; i < m; ++i)
              (*ga)[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  if (x.ndim() != 2)
    throw ShapeError("layer_norm: input must be a matrix, got " +
                     shape_str(x.shape()));
  std::size_t m = x.rows(), n = x.cols();
  if (gain.ndim() != 1 || gain.size() != n) shape_fail("layer_norm", x, gain);
  if (bias.ndim() != 1 || bias.size() != n) shape_fail("layer_norm", x, bias);
  std::vector<double> out(m * n);
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto rstd = std::make_shared<std::vector<double>>(m);
  kernels::layer_norm_rows(x.data().data(), gain.data().data(),
                           bias.data().data(), eps, out.data(), xhat->data(),
                           rstd->data(), m, n);
  return make_result(
      {m, n}, std::move(out), "layer_norm", {x, gain, bias},
      [x, gain, bias, xhat, rstd, m, n](const std::vector<double>& g) {
        auto* gx = accum_target(x);
        auto* gg = accum_target(gain);
        auto* gb = accum_target(bias);
        // The fused kernel fills all three; route tensors that do not
        // participate into scratch so the others still get their share.
        std::vector<double> scratch_x, scratch_g, scratch_b;
        double* gx_p = gx ? gx->data() : (scratch_x.assign(m * n, 0.0), scratch_x.data());
        double* gg_p = gg ? gg->data() : (scratch_g.assign(n, 0.0), scratch_g.data());
        double* gb_p = gb ? gb->data() : (scratch_b.assign(n, 0.0), scratch_b.data());
        kernels::layer_norm_grad_rows(xhat->data(), rstd->data(),
                                      gain.data().data(), g.data(), gx_p, gg_p,
                                      gb_p, m, n);
      });
}

Tensor detach(const Tensor& a) {
  return make_leaf(a.shape(), a.data(), false);
}

// ---------------------------------------------------------------------------
// engine

namespace {

std::vector<Tensor> topo_order(const Tensor& root) {
  std::vector<Tensor> order;
  std::unordered_set<TensorImpl*> visited;
  // Iterative post-order DFS; the second stack field marks "children done".
  std::vector<std::pair<Tensor, bool>> stack;
  stack.emplace_back(root, false);
  while (!stack.empty()) {
    auto [t, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      order.push_back(t);
      continue;
    }
    if (visited.count(t.impl())) continue;
    visited.insert(t.impl());
    stack.emplace_back(t, true);
    if (t.has_node())
      for (const Tensor& p : t.impl()->node->parents)
        if (!visited.count(p.impl())) stack.emplace_back(p, false);
  }
  return order;
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward: loss must be a single-element tensor");
  if (!loss.has_node())
    throw ContractError("backward: loss is not attached to a graph");
  std::vector<Tensor> order = topo_order(loss);
  // Interior grads are scratch per sweep; leaf grads persist so repeated
  // backward calls accumulate.
  for (Tensor& t : order) {
    TensorImpl* impl = t.impl();
    if (impl->node)
      impl->grad.assign(impl->data.size(), 0.0);
    else if (impl->requires_grad && impl->grad.size() != impl->data.size())
      impl->grad.assign(impl->data.size(), 0.0);
  }
  loss.impl()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = it->impl();
    if (impl->node && impl->node->backward) impl->node->backward(impl->grad);
  }
}

std::vector<GraphOp> trace_graph(const Tensor& root) {
  std::vector<GraphOp> out;
  if (!root.defined()) return out;
  for (const Tensor& t : topo_order(root)) {
    GraphOp g;
    g.op = t.op();
    g.shape = t.shape();
    g.id = t.impl();
    if (t.has_node()) {
      g.arity = t.impl()->node->parents.size();
      for (const Tensor& p : t.impl()->node->parents) g.parents.push_back(p.impl());
    }
    out.push_back(std::move(g));
  }
  return out;
}

Tensor random_normal(std::vector<std::size_t> shape, Rng& rng, double stddev,
                     bool requires_grad) {
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = rng.normal(0.0, stddev);
  return make_leaf(std::move(shape), std::move(data), requires_grad);
}

}  // namespace fedsdaf
