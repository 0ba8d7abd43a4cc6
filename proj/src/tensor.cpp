#include "bat/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace bat {

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

using ConstMat = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutMat = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = acc;
    acc *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  }
  return st;
}

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": produced a non-finite value");
    }
  }
}

DiffTensor make_op(Shape shape, std::vector<double> val,
                   std::initializer_list<DiffTensor> parents,
                   std::function<void(Node*)> bw) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  if (g_grad_enabled) {
    bool req = false;
    for (const auto& p : parents) req = req || p.node()->requires_grad;
    if (req) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (const auto& p : parents) n->parents.push_back(p.node());
      n->backward_fn = std::move(bw);
    }
  }
  return wrap_node(std::move(n));
}

int normalize_axis(int axis, int rank, const char* op) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for rank " + std::to_string(rank));
  }
  return a;
}

void require_same_shape(const DiffTensor& a, const DiffTensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

}  // namespace

namespace detail {

void Node::ensure_grad() {
  if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
}

}  // namespace detail

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) n *= static_cast<std::size_t>(e);
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

DiffTensor wrap_node(NodePtr n) { return DiffTensor(std::move(n)); }

std::span<double> DiffTensor::values_mut() {
  if (!n_->leaf) {
    throw StateError("values_mut: only leaf tensors may be mutated");
  }
  return n_->val;
}

std::span<const double> DiffTensor::grad() const {
  if (n_->grad.size() != n_->val.size()) n_->ensure_grad();
  return n_->grad;
}

void DiffTensor::zero_grad() { n_->grad.assign(n_->val.size(), 0.0); }

double DiffTensor::scalar() const {
  if (size() != 1) {
    throw DimensionError("scalar: tensor has shape " + shape_str(shape()));
  }
  return n_->val[0];
}

double DiffTensor::at(std::initializer_list<int> idx) const {
  if (idx.size() != n_->shape.size()) {
    throw DimensionError("at: index rank mismatch for shape " + shape_str(shape()));
  }
  auto st = row_major_strides(n_->shape);
  std::size_t off = 0;
  std::size_t k = 0;
  for (int i : idx) off += static_cast<std::size_t>(i) * st[k++];
  return n_->val[off];
}

DiffTensor constant(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("constant: " + shape_str(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(values);
  return wrap_node(std::move(n));
}

DiffTensor constant_scalar(double v) { return constant(Shape{}, {v}); }

DiffTensor zeros(const Shape& shape) {
  return constant(shape, std::vector<double>(shape_size(shape), 0.0));
}

DiffTensor full(const Shape& shape, double v) {
  return constant(shape, std::vector<double>(shape_size(shape), v));
}

DiffTensor leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("leaf: " + shape_str(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->val = std::move(values);
  n->leaf = true;
  n->requires_grad = requires_grad;
  return wrap_node(std::move(n));
}

DiffTensor uniform_leaf(Shape shape, double bound, std::mt19937_64& rng,
                        bool requires_grad) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return leaf(std::move(shape), std::move(v), requires_grad);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const DiffTensor& root) {
  if (root.size() != 1) {
    throw DimensionError("backward: root must be scalar, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    throw StateError("backward: root does not require gradients");
  }
  // Iterative post-order over the parent DAG.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->ensure_grad();
  root.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(*it);
  }
}

// ---- elementwise ----------------------------------------------------------

DiffTensor add(const DiffTensor& a, const DiffTensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto& av = a.node()->val;
  const auto& bv = b.node()->val;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node* self) {
    for (int k = 0; k < 2; ++k) {
      Node* p = self->parents[static_cast<std::size_t>(k)].get();
      if (!p->requires_grad) continue;
      for (std::size_t i = 0; i < self->grad.size(); ++i) p->grad[i] += self->grad[i];
    }
  });
}

DiffTensor sub(const DiffTensor& a, const DiffTensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto& av = a.node()->val;
  const auto& bv = b.node()->val;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node* self) {
    Node* pa = self->parents[0].get();
    Node* pb = self->parents[1].get();
    if (pa->requires_grad)
      for (std::size_t i = 0; i < self->grad.size(); ++i) pa->grad[i] += self->grad[i];
    if (pb->requires_grad)
      for (std::size_t i = 0; i < self->grad.size(); ++i) pb->grad[i] -= self->grad[i];
  });
}

DiffTensor mul(const DiffTensor& a, const DiffTensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto& av = a.node()->val;
  const auto& bv = b.node()->val;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](Node* self) {
    Node* pa = self->parents[0].get();
    Node* pb = self->parents[1].get();
    if (pa->requires_grad)
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        pa->grad[i] += self->grad[i] * pb->val[i];
    if (pb->requires_grad)
      for (std::size_t i = 0; i < self->grad.size(); ++i)
        pb->grad[i] += self->grad[i] * pa->val[i];
  });
}

DiffTensor scale(const DiffTensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& av = a.node()->val;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return make_op(a.shape(), std::move(out), {a}, [c](Node* self) {
    Node* p = self->parents[0].get();
    for (std::size_t i = 0; i < self->grad.size(); ++i) p->grad[i] += self->grad[i] * c;
  });
}

DiffTensor relu(const DiffTensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.node()->val;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_op(x.shape(), std::move(out), {x}, [](Node* self) {
    Node* p = self->parents[0].get();
    for (std::size_t i = 0; i < self->grad.size(); ++i)
      if (p->val[i] > 0.0) p->grad[i] += self->grad[i];
  });
}

DiffTensor clamp_min(const DiffTensor& x, double lo) {
  std::vector<double> out(x.size());
  const auto& xv = x.node()->val;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > lo ? xv[i] : lo;
  return make_op(x.shape(), std::move(out), {x}, [lo](Node* self) {
    Node* p = self->parents[0].get();
    for (std::size_t i = 0; i < self->grad.size(); ++i)
      if (p->val[i] > lo) p->grad[i] += self->grad[i];
  });
}

DiffTensor sum_all(const DiffTensor& x) {
  double s = 0.0;
  for (double v : x.node()->val) s += v;
  return make_op(Shape{}, {s}, {x}, [](Node* self) {
    Node* p = self->parents[0].get();
    const double g = self->grad[0];
    for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
  });
}

// ---- matmul family ---------------------------------------------------------

DiffTensor matmul(const DiffTensor& a, const DiffTensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw DimensionError("matmul: ranks must be >= 2, got " + shape_str(as) + " x " +
                         shape_str(bs));
  }
  const int k = as.back();
  if (bs[bs.size() - 2] != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(as) + " x " +
                         shape_str(bs));
  }
  const int n = bs.back();

  if (bs.size() == 2) {
    // Every row of `a` through one [k, n] map.
    const std::size_t rows = a.size() / static_cast<std::size_t>(k);
    Shape out_shape(as.begin(), as.end() - 1);
    out_shape.push_back(n);
    std::vector<double> out(rows * static_cast<std::size_t>(n));
    ConstMat A(a.node()->val.data(), static_cast<Eigen::Index>(rows), k);
    ConstMat B(b.node()->val.data(), k, n);
    MutMat C(out.data(), static_cast<Eigen::Index>(rows), n);
    C.noalias() = A * B;
    return make_op(std::move(out_shape), std::move(out), {a, b},
                   [rows, k, n](Node* self) {
                     Node* pa = self->parents[0].get();
                     Node* pb = self->parents[1].get();
                     ConstMat dC(self->grad.data(), static_cast<Eigen::Index>(rows), n);
                     if (pa->requires_grad) {
                       ConstMat B(pb->val.data(), k, n);
                       MutMat dA(pa->grad.data(), static_cast<Eigen::Index>(rows), k);
                       dA.noalias() += dC * B.transpose();
                     }
                     if (pb->requires_grad) {
                       ConstMat A(pa->val.data(), static_cast<Eigen::Index>(rows), k);
                       MutMat dB(pb->grad.data(), k, n);
                       dB.noalias() += A.transpose() * dC;
                     }
                   });
  }

  if (as.size() != bs.size() ||
      !std::equal(as.begin(), as.end() - 2, bs.begin())) {
    throw DimensionError("matmul: incompatible batch shapes " + shape_str(as) + " x " +
                         shape_str(bs));
  }
  const int m = as[as.size() - 2];
  std::size_t batches = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batches *= static_cast<std::size_t>(as[i]);
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batches * static_cast<std::size_t>(m) * static_cast<std::size_t>(n));
  for (std::size_t t = 0; t < batches; ++t) {
    ConstMat A(a.node()->val.data() + t * static_cast<std::size_t>(m * k), m, k);
    ConstMat B(b.node()->val.data() + t * static_cast<std::size_t>(k * n), k, n);
    MutMat C(out.data() + t * static_cast<std::size_t>(m * n), m, n);
    C.noalias() = A * B;
  }
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [batches, m, k, n](Node* self) {
                   Node* pa = self->parents[0].get();
                   Node* pb = self->parents[1].get();
                   for (std::size_t t = 0; t < batches; ++t) {
                     ConstMat dC(self->grad.data() + t * static_cast<std::size_t>(m * n), m, n);
                     if (pa->requires_grad) {
                       ConstMat B(pb->val.data() + t * static_cast<std::size_t>(k * n), k, n);
                       MutMat dA(pa->grad.data() + t * static_cast<std::size_t>(m * k), m, k);
                       dA.noalias() += dC * B.transpose();
                     }
                     if (pb->requires_grad) {
                       ConstMat A(pa->val.data() + t * static_cast<std::size_t>(m * k), m, k);
                       MutMat dB(pb->grad.data() + t * static_cast<std::size_t>(k * n), k, n);
                       dB.noalias() += A.transpose() * dC;
                     }
                   }
                 });
}

DiffTensor matmul_nt(const DiffTensor& a, const DiffTensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || as.size() != bs.size()) {
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(as) + " x " +
                         shape_str(bs));
  }
  if (as.back() != bs.back() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
    throw DimensionError("matmul_nt: incompatible shapes " + shape_str(as) + " x " +
                         shape_str(bs));
  }
  const int m = as[as.size() - 2];
  const int k = as.back();
  const int n = bs[bs.size() - 2];
  std::size_t batches = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batches *= static_cast<std::size_t>(as[i]);
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batches * static_cast<std::size_t>(m * n));
  for (std::size_t t = 0; t < batches; ++t) {
    ConstMat A(a.node()->val.data() + t * static_cast<std::size_t>(m * k), m, k);
    ConstMat B(b.node()->val.data() + t * static_cast<std::size_t>(n * k), n, k);
    MutMat C(out.data() + t * static_cast<std::size_t>(m * n), m, n);
    C.noalias() = A * B.transpose();
  }
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [batches, m, k, n](Node* self) {
                   Node* pa = self->parents[0].get();
                   Node* pb = self->parents[1].get();
                   for (std::size_t t = 0; t < batches; ++t) {
                     ConstMat dC(self->grad.data() + t * static_cast<std::size_t>(m * n), m, n);
                     if (pa->requires_grad) {
                       ConstMat B(pb->val.data() + t * static_cast<std::size_t>(n * k), n, k);
                       MutMat dA(pa->grad.data() + t * static_cast<std::size_t>(m * k), m, k);
                       dA.noalias() += dC * B;
                     }
                     if (pb->requires_grad) {
                       ConstMat A(pa->val.data() + t * static_cast<std::size_t>(m * k), m, k);
                       MutMat dB(pb->grad.data() + t * static_cast<std::size_t>(n * k), n, k);
                       dB.noalias() += dC.transpose() * A;
                     }
                   }
                 });
}

DiffTensor linear(const DiffTensor& x, const DiffTensor& w, const DiffTensor& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() != 2 || xs.empty() || xs.back() != ws[0]) {
    throw DimensionError("linear: input " + shape_str(xs) + " incompatible with weight " +
                         shape_str(ws));
  }
  const int in = ws[0];
  const int out_w = ws[1];
  if (bias.shape() != Shape{out_w}) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " must be [" +
                         std::to_string(out_w) + "]");
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(in);
  Shape out_shape(xs.begin(), xs.end() - 1);
  out_shape.push_back(out_w);
  std::vector<double> out(rows * static_cast<std::size_t>(out_w));
  ConstMat X(x.node()->val.data(), static_cast<Eigen::Index>(rows), in);
  ConstMat W(w.node()->val.data(), in, out_w);
  MutMat C(out.data(), static_cast<Eigen::Index>(rows), out_w);
  C.noalias() = X * W;
  C.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.node()->val.data(), out_w);
  return make_op(std::move(out_shape), std::move(out), {x, w, bias},
                 [rows, in, out_w](Node* self) {
                   Node* px = self->parents[0].get();
                   Node* pw = self->parents[1].get();
                   Node* pb = self->parents[2].get();
                   ConstMat dC(self->grad.data(), static_cast<Eigen::Index>(rows), out_w);
                   if (px->requires_grad) {
                     ConstMat W(pw->val.data(), in, out_w);
                     MutMat dX(px->grad.data(), static_cast<Eigen::Index>(rows), in);
                     dX.noalias() += dC * W.transpose();
                   }
                   if (pw->requires_grad) {
                     ConstMat X(px->val.data(), static_cast<Eigen::Index>(rows), in);
                     MutMat dW(pw->grad.data(), in, out_w);
                     dW.noalias() += X.transpose() * dC;
                   }
                   if (pb->requires_grad) {
                     Eigen::Map<Eigen::RowVectorXd> db(pb->grad.data(), out_w);
                     db += dC.colwise().sum();
                   }
                 });
}

// ---- softmax / layer norm ---------------------------------------------------

namespace {

// Applies fn(base, stride, len) to every 1-D slice along `axis`.
template <typename F>
void for_each_slice(const Shape& shape, int axis, F&& fn) {
  const auto st = row_major_strides(shape);
  const std::size_t stride = st[static_cast<std::size_t>(axis)];
  const std::size_t len = static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    inner *= static_cast<std::size_t>(shape[i]);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      fn(o * len * inner + in, stride, len);
    }
  }
}

}  // namespace

DiffTensor softmax(const DiffTensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "softmax");
  std::vector<double> out(x.size());
  const auto& xv = x.node()->val;
  for_each_slice(x.shape(), a, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      const double e = std::exp(xv[base + i * stride] - mx);
      out[base + i * stride] = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t i = 0; i < len; ++i) out[base + i * stride] *= inv;
  });
  check_finite(out, "softmax");
  Shape shape = x.shape();
  return make_op(std::move(shape), std::move(out), {x}, [a](Node* self) {
    Node* p = self->parents[0].get();
    for_each_slice(self->shape, a, [&](std::size_t base, std::size_t stride, std::size_t len) {
      double dot = 0.0;
      for (std::size_t i = 0; i < len; ++i)
        dot += self->grad[base + i * stride] * self->val[base + i * stride];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * stride;
        p->grad[k] += self->val[k] * (self->grad[k] - dot);
      }
    });
  });
}

DiffTensor log_softmax(const DiffTensor& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "log_softmax");
  std::vector<double> out(x.size());
  const auto& xv = x.node()->val;
  for_each_slice(x.shape(), a, [&](std::size_t base, std::size_t stride, std::size_t len) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, xv[base + i * stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < len; ++i) sum += std::exp(xv[base + i * stride] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < len; ++i)
      out[base + i * stride] = xv[base + i * stride] - lse;
  });
  check_finite(out, "log_softmax");
  Shape shape = x.shape();
  return make_op(std::move(shape), std::move(out), {x}, [a](Node* self) {
    Node* p = self->parents[0].get();
    for_each_slice(self->shape, a, [&](std::size_t base, std::size_t stride, std::size_t len) {
      double gsum = 0.0;
      for (std::size_t i = 0; i < len; ++i) gsum += self->grad[base + i * stride];
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * stride;
        p->grad[k] += self->grad[k] - std::exp(self->val[k]) * gsum;
      }
    });
  });
}

DiffTensor layer_norm(const DiffTensor& x, const DiffTensor& gain, const DiffTensor& bias) {
  constexpr double kEps = 1e-5;
  if (x.rank() < 1) throw DimensionError("layer_norm: input must have rank >= 1");
  const int e = x.shape().back();
  if (gain.shape() != Shape{e} || bias.shape() != Shape{e}) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " must be [" + std::to_string(e) + "]");
  }
  const std::size_t rows = x.size() / static_cast<std::size_t>(e);
  const auto& xv = x.node()->val;
  const auto& gv = gain.node()->val;
  const auto& bv = bias.node()->val;
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * static_cast<std::size_t>(e);
    double mean = 0.0;
    for (int j = 0; j < e; ++j) mean += xv[base + static_cast<std::size_t>(j)];
    mean /= e;
    double var = 0.0;
    for (int j = 0; j < e; ++j) {
      const double d = xv[base + static_cast<std::size_t>(j)] - mean;
      var += d * d;
    }
    var /= e;
    const double inv = 1.0 / std::sqrt(var + kEps);
    (*inv_std)[r] = inv;
    for (int j = 0; j < e; ++j) {
      const std::size_t k = base + static_cast<std::size_t>(j);
      const double xh = (xv[k] - mean) * inv;
      (*xhat)[k] = xh;
      out[k] = xh * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
    }
  }
  check_finite(out, "layer_norm");
  Shape shape = x.shape();
  return make_op(std::move(shape), std::move(out), {x, gain, bias},
                 [rows, e, xhat, inv_std](Node* self) {
                   Node* px = self->parents[0].get();
                   Node* pg = self->parents[1].get();
                   Node* pb = self->parents[2].get();
                   const auto& gv = self->parents[1]->val;
                   for (std::size_t r = 0; r < rows; ++r) {
                     const std::size_t base = r * static_cast<std::size_t>(e);
                     double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                     for (int j = 0; j < e; ++j) {
                       const std::size_t k = base + static_cast<std::size_t>(j);
                       const double dxh = self->grad[k] * gv[static_cast<std::size_t>(j)];
                       mean_dxh += dxh;
                       mean_dxh_xh += dxh * (*xhat)[k];
                     }
                     mean_dxh /= e;
                     mean_dxh_xh /= e;
                     const double inv = (*inv_std)[r];
                     for (int j = 0; j < e; ++j) {
                       const std::size_t k = base + static_cast<std::size_t>(j);
                       const double dxh = self->grad[k] * gv[static_cast<std::size_t>(j)];
                       if (px->requires_grad)
                         px->grad[k] += inv * (dxh - mean_dxh - (*xhat)[k] * mean_dxh_xh);
                       if (pg->requires_grad)
                         pg->grad[static_cast<std::size_t>(j)] += self->grad[k] * (*xhat)[k];
                       if (pb->requires_grad)
                         pb->grad[static_cast<std::size_t>(j)] += self->grad[k];
                     }
                   }
                 });
}

DiffTensor dropout(const DiffTensor& x, double rate, std::mt19937_64& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ArgumentError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const double keep = 1.0 - rate;
  const double scale = 1.0 / keep;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  const auto& xv = x.node()->val;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double m = u(rng) < keep ? scale : 0.0;
    (*mask)[i] = m;
    out[i] = xv[i] * m;
  }
  Shape shape = x.shape();
  return make_op(std::move(shape), std::move(out), {x}, [mask](Node* self) {
    Node* p = self->parents[0].get();
    for (std::size_t i = 0; i < self->grad.size(); ++i)
      p->grad[i] += self->grad[i] * (*mask)[i];
  });
}

// ---- shape ops --------------------------------------------------------------

DiffTensor concat(std::span<const DiffTensor> parts, int axis) {
  if (parts.empty()) throw ArgumentError("concat: needs at least one tensor");
  const int rank = parts[0].rank();
  const int a = normalize_axis(axis, rank, "concat");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i) {
      if (i != a && p.shape()[static_cast<std::size_t>(i)] != out_shape[static_cast<std::size_t>(i)]) {
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(out_shape));
      }
    }
    total += p.shape()[static_cast<std::size_t>(a)];
  }
  out_shape[static_cast<std::size_t>(a)] = total;

  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= static_cast<std::size_t>(out_shape[static_cast<std::size_t>(i)]);
  for (int i = a + 1; i < rank; ++i) inner *= static_cast<std::size_t>(out_shape[static_cast<std::size_t>(i)]);

  std::vector<double> out(shape_size(out_shape));
  std::vector<std::size_t> offsets(parts.size());
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    offsets[p] = off;
    const std::size_t ext = static_cast<std::size_t>(parts[p].shape()[static_cast<std::size_t>(a)]);
    const auto& pv = parts[p].node()->val;
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + (o * static_cast<std::size_t>(total) + off) * inner,
                  pv.data() + o * ext * inner, ext * inner * sizeof(double));
    }
    off += ext;
  }

  // make_op takes an initializer_list; build the node by hand for N parents.
  auto n = std::make_shared<Node>();
  n->shape = std::move(out_shape);
  n->val = std::move(out);
  if (g_grad_enabled) {
    bool req = false;
    for (const auto& p : parts) req = req || p.requires_grad();
    if (req) {
      n->requires_grad = true;
      for (const auto& p : parts) n->parents.push_back(p.node());
      const std::size_t tot = static_cast<std::size_t>(total);
      n->backward_fn = [outer, inner, tot, offsets](Node* self) {
        for (std::size_t p = 0; p < self->parents.size(); ++p) {
          Node* pp = self->parents[p].get();
          if (!pp->requires_grad) continue;
          const std::size_t ext = pp->val.size() / (outer * inner);
          for (std::size_t o = 0; o < outer; ++o) {
            const double* g = self->grad.data() + (o * tot + offsets[p]) * inner;
            double* dst = pp->grad.data() + o * ext * inner;
            for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += g[i];
          }
        }
      };
    }
  }
  return wrap_node(std::move(n));
}

DiffTensor permute(const DiffTensor& x, const std::vector<int>& perm) {
  const int rank = x.rank();
  if (static_cast<int>(perm.size()) != rank) {
    throw DimensionError("permute: permutation size " + std::to_string(perm.size()) +
                         " does not match rank " + std::to_string(rank));
  }
  std::vector<bool> used(static_cast<std::size_t>(rank), false);
  for (int p : perm) {
    if (p < 0 || p >= rank || used[static_cast<std::size_t>(p)])
      throw DimensionError("permute: invalid permutation");
    used[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i)
    out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

  const auto in_st = row_major_strides(x.shape());
  const auto out_st = row_major_strides(out_shape);
  // stride in the input for each output axis
  std::vector<std::size_t> map_st(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i)
    map_st[static_cast<std::size_t>(i)] = in_st[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

  const auto& xv = x.node()->val;
  std::vector<double> out(x.size());
  const std::size_t n = out.size();
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t rem = j, src = 0;
    for (int i = 0; i < rank; ++i) {
      const std::size_t q = rem / out_st[static_cast<std::size_t>(i)];
      rem %= out_st[static_cast<std::size_t>(i)];
      src += q * map_st[static_cast<std::size_t>(i)];
    }
    out[j] = xv[src];
  }
  return make_op(std::move(out_shape), std::move(out), {x},
                 [out_st, map_st, rank](Node* self) {
                   Node* p = self->parents[0].get();
                   const std::size_t n = self->grad.size();
                   for (std::size_t j = 0; j < n; ++j) {
                     std::size_t rem = j, src = 0;
                     for (int i = 0; i < rank; ++i) {
                       const std::size_t q = rem / out_st[static_cast<std::size_t>(i)];
                       rem %= out_st[static_cast<std::size_t>(i)];
                       src += q * map_st[static_cast<std::size_t>(i)];
                     }
                     p->grad[src] += self->grad[j];
                   }
                 });
}

DiffTensor reshape(const DiffTensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(x.node()->val);
  return make_op(std::move(shape), std::move(out), {x}, [](Node* self) {
    Node* p = self->parents[0].get();
    for (std::size_t i = 0; i < self->grad.size(); ++i) p->grad[i] += self->grad[i];
  });
}

DiffTensor expand(const DiffTensor& x, const Shape& target) {
  const int rank = x.rank();
  if (static_cast<int>(target.size()) != rank) {
    throw DimensionError("expand: rank mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(target));
  }
  for (int i = 0; i < rank; ++i) {
    const int xe = x.shape()[static_cast<std::size_t>(i)];
    if (xe != target[static_cast<std::size_t>(i)] && xe != 1) {
      throw DimensionError("expand: " + shape_str(x.shape()) + " not expandable to " +
                           shape_str(target));
    }
  }
  const auto in_st = row_major_strides(x.shape());
  const auto out_st = row_major_strides(target);
  std::vector<std::size_t> eff_st(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i)
    eff_st[static_cast<std::size_t>(i)] =
        x.shape()[static_cast<std::size_t>(i)] == 1 ? 0 : in_st[static_cast<std::size_t>(i)];

  const auto& xv = x.node()->val;
  std::vector<double> out(shape_size(target));
  const std::size_t n = out.size();
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t rem = j, src = 0;
    for (int i = 0; i < rank; ++i) {
      const std::size_t q = rem / out_st[static_cast<std::size_t>(i)];
      rem %= out_st[static_cast<std::size_t>(i)];
      src += q * eff_st[static_cast<std::size_t>(i)];
    }
    out[j] = xv[src];
  }
  Shape out_shape = target;
  return make_op(std::move(out_shape), std::move(out), {x},
                 [out_st, eff_st, rank](Node* self) {
                   Node* p = self->parents[0].get();
                   const std::size_t n = self->grad.size();
                   for (std::size_t j = 0; j < n; ++j) {
                     std::size_t rem = j, src = 0;
                     for (int i = 0; i < rank; ++i) {
                       const std::size_t q = rem / out_st[static_cast<std::size_t>(i)];
                       rem %= out_st[static_cast<std::size_t>(i)];
                       src += q * eff_st[static_cast<std::size_t>(i)];
                     }
                     p->grad[src] += self->grad[j];
                   }
                 });
}

DiffTensor gather_rows(const DiffTensor& table, const std::vector<int>& rows) {
  if (table.rank() != 2) {
    throw DimensionError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
  }
  const int v = table.shape()[0];
  const int e = table.shape()[1];
  for (int r : rows) {
    if (r < 0 || r >= v) {
      throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range [0, " +
                           std::to_string(v) + ")");
    }
  }
  std::vector<double> out(rows.size() * static_cast<std::size_t>(e));
  const auto& tv = table.node()->val;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::memcpy(out.data() + i * static_cast<std::size_t>(e),
                tv.data() + static_cast<std::size_t>(rows[i]) * static_cast<std::size_t>(e),
                static_cast<std::size_t>(e) * sizeof(double));
  }
  auto idx = std::make_shared<std::vector<int>>(rows);
  return make_op({static_cast<int>(rows.size()), e}, std::move(out), {table},
                 [idx, e](Node* self) {
                   Node* p = self->parents[0].get();
                   for (std::size_t i = 0; i < idx->size(); ++i) {
                     const double* g = self->grad.data() + i * static_cast<std::size_t>(e);
                     double* dst = p->grad.data() +
                                   static_cast<std::size_t>((*idx)[i]) * static_cast<std::size_t>(e);
                     for (int j = 0; j < e; ++j) dst[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(j)];
                   }
                 });
}

DiffTensor select_index(const DiffTensor& x, const std::vector<int>& index) {
  if (x.rank() < 1) throw DimensionError("select_index: input must have rank >= 1");
  const int c = x.shape().back();
  const std::size_t rows = x.size() / static_cast<std::size_t>(c);
  if (index.size() != rows) {
    throw DimensionError("select_index: got " + std::to_string(index.size()) +
                         " indices for " + std::to_string(rows) + " rows");
  }
  for (int i : index) {
    if (i < 0 || i >= c) {
      throw DimensionError("select_index: index " + std::to_string(i) + " out of range [0, " +
                           std::to_string(c) + ")");
    }
  }
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  std::vector<double> out(rows);
  const auto& xv = x.node()->val;
  for (std::size_t r = 0; r < rows; ++r)
    out[r] = xv[r * static_cast<std::size_t>(c) + static_cast<std::size_t>(index[r])];
  auto idx = std::make_shared<std::vector<int>>(index);
  return make_op(std::move(out_shape), std::move(out), {x}, [idx, c](Node* self) {
    Node* p = self->parents[0].get();
    for (std::size_t r = 0; r < idx->size(); ++r)
      p->grad[r * static_cast<std::size_t>(c) + static_cast<std::size_t>((*idx)[r])] +=
          self->grad[r];
  });
}

// ---- masked pooling ----------------------------------------------------------

DiffTensor masked_pool(const DiffTensor& x, const DiffTensor& mask,
                       std::vector<int> axes, PoolMode mode) {
  const int rank = x.rank();
  if (mask.rank() != rank) {
    throw DimensionError("masked_pool: mask rank " + std::to_string(mask.rank()) +
                         " does not match input rank " + std::to_string(rank));
  }
  for (int i = 0; i < rank; ++i) {
    const int me = mask.shape()[static_cast<std::size_t>(i)];
    if (me != x.shape()[static_cast<std::size_t>(i)] && me != 1) {
      throw DimensionError("masked_pool: mask " + shape_str(mask.shape()) +
                           " not broadcastable to " + shape_str(x.shape()));
    }
  }
  if (axes.empty()) throw ArgumentError("masked_pool: no axes to reduce");
  std::sort(axes.begin(), axes.end());
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    axes[i] = normalize_axis(axes[i], rank, "masked_pool");
    if (reduced[static_cast<std::size_t>(axes[i])])
      throw ArgumentError("masked_pool: duplicate axis");
    reduced[static_cast<std::size_t>(axes[i])] = true;
  }

  Shape out_shape;
  for (int i = 0; i < rank; ++i)
    if (!reduced[static_cast<std::size_t>(i)]) out_shape.push_back(x.shape()[static_cast<std::size_t>(i)]);

  const auto in_st = row_major_strides(x.shape());
  const auto mk_st = row_major_strides(mask.shape());
  const auto out_st = row_major_strides(out_shape);

  // For every input linear index, the output cell and mask cell it maps to.
  const std::size_t n = x.size();
  const std::size_t out_n = shape_size(out_shape);
  const auto& xv = x.node()->val;
  const auto& mv = mask.node()->val;

  std::vector<double> acc(out_n, mode == PoolMode::kMean
                                     ? 0.0
                                     : -std::numeric_limits<double>::infinity());
  std::vector<double> cnt(out_n, 0.0);
  auto arg = std::make_shared<std::vector<std::size_t>>();
  if (mode == PoolMode::kMax) arg->assign(out_n, std::size_t(-1));

  for (std::size_t j = 0; j < n; ++j) {
    std::size_t rem = j, out_idx = 0, mask_idx = 0, oi = 0;
    for (int i = 0; i < rank; ++i) {
      const std::size_t q = rem / in_st[static_cast<std::size_t>(i)];
      rem %= in_st[static_cast<std::size_t>(i)];
      if (!reduced[static_cast<std::size_t>(i)]) out_idx += q * out_st[oi++];
      if (mask.shape()[static_cast<std::size_t>(i)] != 1) mask_idx += q * mk_st[static_cast<std::size_t>(i)];
    }
    if (mv[mask_idx] == 0.0) continue;
    cnt[out_idx] += 1.0;
    if (mode == PoolMode::kMean) {
      acc[out_idx] += xv[j];
    } else if (xv[j] > acc[out_idx]) {
      acc[out_idx] = xv[j];
      (*arg)[out_idx] = j;
    }
  }
  for (std::size_t o = 0; o < out_n; ++o) {
    if (cnt[o] == 0.0) {
      throw DegenerateError("masked_pool: slice " + std::to_string(o) +
                            " has no unmasked elements");
    }
  }
  std::vector<double> out(out_n);
  if (mode == PoolMode::kMean) {
    for (std::size_t o = 0; o < out_n; ++o) out[o] = acc[o] / cnt[o];
  } else {
    out = acc;
  }

  auto counts = std::make_shared<std::vector<double>>(std::move(cnt));
  auto reduced_sh = std::make_shared<std::vector<bool>>(std::move(reduced));
  Shape mask_shape = mask.shape();
  return make_op(std::move(out_shape), std::move(out), {x, mask},
                 [mode, counts, arg, reduced_sh, in_st, out_st, mask_shape, rank](Node* self) {
                   Node* px = self->parents[0].get();
                   if (!px->requires_grad) return;
                   const auto& mv = self->parents[1]->val;
                   const auto mk_st = row_major_strides(mask_shape);
                   if (mode == PoolMode::kMax) {
                     for (std::size_t o = 0; o < arg->size(); ++o) {
                       if ((*arg)[o] != std::size_t(-1)) px->grad[(*arg)[o]] += self->grad[o];
                     }
                     return;
                   }
                   const std::size_t n = px->val.size();
                   for (std::size_t j = 0; j < n; ++j) {
                     std::size_t rem = j, out_idx = 0, mask_idx = 0, oi = 0;
                     for (int i = 0; i < rank; ++i) {
                       const std::size_t q = rem / in_st[static_cast<std::size_t>(i)];
                       rem %= in_st[static_cast<std::size_t>(i)];
                       if (!(*reduced_sh)[static_cast<std::size_t>(i)]) out_idx += q * out_st[oi++];
                       if (mask_shape[static_cast<std::size_t>(i)] != 1)
                         mask_idx += q * mk_st[static_cast<std::size_t>(i)];
                     }
                     if (mv[mask_idx] == 0.0) continue;
                     px->grad[j] += self->grad[out_idx] / (*counts)[out_idx];
                   }
                 });
}

// ---- gradient verification -----------------------------------------------------

GradCheckReport grad_check(
    const std::function<DiffTensor(const std::vector<DiffTensor>&)>& f,
    const std::vector<DiffTensor>& inputs, double eps, double tol) {
  if (eps <= 0.0) throw ArgumentError("grad_check: eps must be positive");
  for (const auto& in : inputs) {
    if (!in.is_leaf() || !in.requires_grad()) {
      throw ArgumentError("grad_check: inputs must be gradient-tracking leaves");
    }
  }

  DiffTensor out = f(inputs);
  if (out.size() != 1) {
    throw ArgumentError("grad_check: f must return a scalar, got " + shape_str(out.shape()));
  }
  if (!std::isfinite(out.scalar())) {
    throw NumericError("grad_check: f produced a non-finite value");
  }
  for (auto in : inputs) in.zero_grad();
  backward(out);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    analytic.emplace_back(in.grad().begin(), in.grad().end());
  }

  GradCheckReport report;
  report.tol = tol;
  report.max_rel_err.assign(inputs.size(), 0.0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    DiffTensor in = inputs[i];
    auto vals = in.values_mut();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double orig = vals[j];
      double plus, minus;
      {
        NoGradGuard ng;
        vals[j] = orig + eps;
        plus = f(inputs).scalar();
        vals[j] = orig - eps;
        minus = f(inputs).scalar();
        vals[j] = orig;
      }
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check: non-finite value while probing input " +
                           std::to_string(i));
      }
      const double fd = (plus - minus) / (2.0 * eps);
      const double a = analytic[i][j];
      const double rel = std::abs(a - fd) / (std::max(std::abs(a), std::abs(fd)) + 1e-3);
      report.max_rel_err[i] = std::max(report.max_rel_err[i], rel);
    }
    report.worst = std::max(report.worst, report.max_rel_err[i]);
  }
  report.pass = report.worst <= tol;
  return report;
}

}  // namespace bat
