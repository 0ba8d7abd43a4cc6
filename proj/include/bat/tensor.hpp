#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bat/errors.hpp"

namespace bat {

/// Axis extents, outermost first. Values are stored row-major.
using Shape = std::vector<int>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  bool leaf = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node*)> backward_fn;

  std::size_t size() const { return val.size(); }
  void ensure_grad();
};

}  // namespace detail

/// Dense float64 tensor participating in reverse-mode differentiation.
/// Values are immutable after construction except for leaves (parameters),
/// which an optimizer may update between steps; gradients accumulate only
/// inside a backward pass.
class DiffTensor {
 public:
  DiffTensor() = default;

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::size_t size() const { return n_->val.size(); }
  bool requires_grad() const { return n_->requires_grad; }
  bool is_leaf() const { return n_->leaf; }

  std::span<const double> values() const { return n_->val; }
  /// Mutable access to a leaf's storage (optimizer updates, finite differences).
  std::span<double> values_mut();
  std::span<const double> grad() const;
  void zero_grad();

  double scalar() const;
  double at(std::initializer_list<int> idx) const;

  std::shared_ptr<detail::Node> node() const { return n_; }

 private:
  explicit DiffTensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;

  friend DiffTensor wrap_node(std::shared_ptr<detail::Node>);
};

DiffTensor wrap_node(std::shared_ptr<detail::Node> n);

/// Named leaf tensor; names are unique within a model.
struct Parameter {
  std::string name;
  DiffTensor tensor;
};

// ---- construction -------------------------------------------------------

DiffTensor constant(Shape shape, std::vector<double> values);
DiffTensor constant_scalar(double v);
DiffTensor zeros(const Shape& shape);
DiffTensor full(const Shape& shape, double v);
/// Leaf with gradient tracking (parameters, grad-check inputs).
DiffTensor leaf(Shape shape, std::vector<double> values, bool requires_grad = true);
/// Uniform values in [-bound, bound].
DiffTensor uniform_leaf(Shape shape, double bound, std::mt19937_64& rng,
                        bool requires_grad = true);

// ---- autodiff control ----------------------------------------------------

bool grad_enabled();

/// Disables graph construction within scope; evaluation-only forward passes.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Reverse pass from a scalar root; accumulates into every reachable
/// tensor that requires gradients.
void backward(const DiffTensor& root);

// ---- operations ----------------------------------------------------------

DiffTensor add(const DiffTensor& a, const DiffTensor& b);
DiffTensor sub(const DiffTensor& a, const DiffTensor& b);
DiffTensor mul(const DiffTensor& a, const DiffTensor& b);
DiffTensor scale(const DiffTensor& a, double c);

/// Contraction over the last axis of `a` and the second-to-last of `b`.
/// `b` may be rank 2 (applied to every row of `a`) or have the same rank
/// as `a` with identical leading extents (batched).
DiffTensor matmul(const DiffTensor& a, const DiffTensor& b);
/// a [..., m, k] times b [..., n, k] transposed -> [..., m, n].
DiffTensor matmul_nt(const DiffTensor& a, const DiffTensor& b);
/// x [..., in] * w [in, out] + bias[out].
DiffTensor linear(const DiffTensor& x, const DiffTensor& w, const DiffTensor& bias);

DiffTensor relu(const DiffTensor& x);
DiffTensor softmax(const DiffTensor& x, int axis);
DiffTensor log_softmax(const DiffTensor& x, int axis);
/// Normalizes the last axis to mean 0 / variance 1 (epsilon 1e-5 inside the
/// square root), then applies the affine gain/bias.
DiffTensor layer_norm(const DiffTensor& x, const DiffTensor& gain, const DiffTensor& bias);
/// Inverted dropout: keeps with probability 1-rate and scales kept entries
/// by 1/(1-rate); identity when `training` is false.
DiffTensor dropout(const DiffTensor& x, double rate, std::mt19937_64& rng, bool training);

DiffTensor concat(std::span<const DiffTensor> parts, int axis);
DiffTensor permute(const DiffTensor& x, const std::vector<int>& perm);
DiffTensor reshape(const DiffTensor& x, Shape shape);
/// Replicates axes of extent 1 up to `target`; backward sums over them.
DiffTensor expand(const DiffTensor& x, const Shape& target);
DiffTensor gather_rows(const DiffTensor& table, const std::vector<int>& rows);
/// Picks index[i] along the last axis of every row; output drops that axis.
DiffTensor select_index(const DiffTensor& x, const std::vector<int>& index);
DiffTensor clamp_min(const DiffTensor& x, double lo);
DiffTensor sum_all(const DiffTensor& x);

enum class PoolMode { kMean, kMax };

/// Reduces `axes` of x, restricted to positions where `mask` is nonzero.
/// `mask` has the same rank as x with extents equal to x's or 1.
/// Mean averages only unmasked entries; max ignores masked entries.
/// A slice with no unmasked element raises DegenerateError.
DiffTensor masked_pool(const DiffTensor& x, const DiffTensor& mask,
                       std::vector<int> axes, PoolMode mode);

// ---- gradient verification ------------------------------------------------

struct GradCheckReport {
  std::vector<double> max_rel_err;  // one entry per input
  double worst = 0.0;
  double tol = 0.0;
  bool pass = false;
};

/// Compares the analytic gradient of a deterministic scalar-valued function
/// against central finite differences, input by input. Relative error is
/// |a - f| / (max(|a|, |f|) + 1e-3).
GradCheckReport grad_check(
    const std::function<DiffTensor(const std::vector<DiffTensor>&)>& f,
    const std::vector<DiffTensor>& inputs, double eps, double tol);

}  // namespace bat
