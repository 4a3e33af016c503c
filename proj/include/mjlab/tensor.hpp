#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mjlab {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool recorded = false;  // output of an op on the active tape
  std::optional<std::vector<double>> grad;
};

/// Dense row-major float64 tensor. Copies share storage (handle semantics),
/// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  /// Turning gradient tracking off also drops any grad buffer.
  void set_requires_grad(bool on);
  bool has_grad() const { return impl_->grad.has_value(); }
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad() { impl_->grad.reset(); }

  Tensor clone() const;
  /// Deep copy that never participates in autograd.
  Tensor detach() const;
  std::vector<double> row(std::size_t r) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct TapeEntry {
  std::string op;
  std::shared_ptr<TensorImpl> output;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

/// Thread-local ordered record of differentiable ops. Entries are appended in
/// execution order, so reverse iteration is a reverse topological order.
class Tape {
 public:
  static Tape& active();

  void record(TapeEntry entry) { entries_.push_back(std::move(entry)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }
  const std::vector<TapeEntry>& entries() const { return entries_; }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

 private:
  std::vector<TapeEntry> entries_;
  bool grad_enabled_ = true;
};

/// Disables recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Tape::active().grad_enabled()) { Tape::active().set_grad_enabled(false); }
  ~NoGradGuard() { Tape::active().set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Populates grad for every requires_grad tensor reachable from a scalar loss
/// and clears the tape.
void backward(const Tensor& loss);

void accumulate_grad(TensorImpl& t, std::span<const double> g);

// ---------------------------------------------------------------------------
// Ops. Every op validates shapes, checks its output is finite and records
// itself on the active tape when an input requires grad.

/// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [m,k] x [n,k]^T -> [m,n]; the linear-layer product x W^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_rowvec(const Tensor& a, const Tensor& v);
Tensor mul_rowvec(const Tensor& a, const Tensor& v);
/// y[i,:] = x[i,:] * coeff[i, col]
Tensor scale_rows(const Tensor& x, const Tensor& coeff, std::size_t col);
Tensor sum(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor silu(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps = 1e-5);
/// Row-wise L2 normalisation; zero rows map to zero rows.
Tensor normalize_rows(const Tensor& x);

enum class DistanceKind { L1, L2 };
/// out[i,j] = -||x_i - c_j||; gradient flows to x only.
Tensor neg_distance(const Tensor& x, const Tensor& centers, DistanceKind kind);

Tensor embedding(const Tensor& table, std::span<const int> ids);
/// out[j,:] = x[idx[j],:]
Tensor index_rows(const Tensor& x, std::span<const std::size_t> idx);
/// out has n_rows rows, out[idx[j],:] = x[j,:], remaining rows zero.
Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> idx, std::size_t n_rows);

/// Multi-head causal self-attention over packed sequences. Rows
/// [offsets[s], offsets[s+1]) form sequence s; a row attends only to rows of
/// its own sequence at or before it.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const std::size_t> offsets, std::size_t n_heads);

/// Mean token cross-entropy of logits [n,c] against integer targets.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

}  // namespace mjlab
