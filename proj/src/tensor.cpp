#include "mjlab/tensor.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mjlab/kernels.hpp"

namespace mjlab {
namespace {

using kernels::Accumulate;
using ImplPtr = std::shared_ptr<TensorImpl>;

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NonFiniteError(std::string(op) + ": non-finite value produced");
  }
}

void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw ShapeError(std::string(op) + ": " + what);
}

void require_rank2(const Tensor& t, const char* op) {
  require(t.defined() && t.rank() == 2, op, "expected a rank-2 tensor");
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active().grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make(Shape shape, std::vector<double> data, const char* op) {
  check_finite(data, op);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

void record(const char* op, const Tensor& out, std::vector<ImplPtr> inputs, BackwardFn fn) {
  out.impl()->requires_grad = true;
  out.impl()->recorded = true;
  Tape::active().record(TapeEntry{op, out.impl(), std::move(inputs), std::move(fn)});
}

std::span<double> grad_buffer(TensorImpl& t) {
  if (!t.grad) t.grad.emplace(t.data.size(), 0.0);
  return *t.grad;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  for (auto d : shape) require(d > 0, "zeros", "dimensions must be positive");
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) require(d > 0, "from", "dimensions must be positive");
  require(shape_numel(shape) == data.size(), "from",
          "shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  check_finite(data, "from");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return from({rows, cols}, std::move(data));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : impl_->shape[0]; }
std::size_t Tensor::cols() const { return rank() == 1 ? impl_->shape[0] : impl_->shape[1]; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.reset();
}

std::span<const double> Tensor::grad() const {
  if (!impl_->grad) throw AutogradError("grad: tensor has no gradient buffer");
  return *impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>(*impl_);
  impl->recorded = false;
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

std::vector<double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return {impl_->data.begin() + static_cast<std::ptrdiff_t>(r * c),
          impl_->data.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
}

// ---------------------------------------------------------------------------
// Tape

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void accumulate_grad(TensorImpl& t, std::span<const double> g) {
  if (!t.requires_grad) return;
  auto buf = grad_buffer(t);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw AutogradError("backward: undefined loss");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw AutogradError("backward: loss is detached from the tape");
  Tape& tape = Tape::active();
  const auto& entries = tape.entries();
  if (loss.impl()->recorded) {
    const bool found = std::any_of(entries.begin(), entries.end(),
                                   [&](const TapeEntry& e) { return e.output == loss.impl(); });
    if (!found) throw AutogradError("backward: loss was not produced on the active tape");
  }
  accumulate_grad(*loss.impl(), std::vector<double>{1.0});
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (!it->output->grad) continue;
    check_finite(*it->output->grad, it->op.c_str());
    it->backward(*it->output->grad);
  }
  for (const auto& e : entries) e.output->recorded = false;
  tape.clear();
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, "matmul",
          "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<double> out(m * n);
  kernels::gemm_nn(a.data(), b.data(), out, m, k, n);
  Tensor y = make({m, n}, std::move(out), "matmul");
  if (needs_grad({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl();
    record("matmul", y, {ai, bi}, [ai, bi, m, k, n](std::span<const double> g) {
      if (ai->requires_grad) kernels::gemm_nt(g, bi->data, grad_buffer(*ai), m, n, k, Accumulate::Yes);
      if (bi->requires_grad) kernels::gemm_tn(ai->data, g, grad_buffer(*bi), k, m, n, Accumulate::Yes);
    });
  }
  return y;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  require(b.cols() == k, "matmul_nt",
          "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  std::vector<double> out(m * n);
  kernels::gemm_nt(a.data(), b.data(), out, m, k, n);
  Tensor y = make({m, n}, std::move(out), "matmul_nt");
  if (needs_grad({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl();
    record("matmul_nt", y, {ai, bi}, [ai, bi, m, k, n](std::span<const double> g) {
      if (ai->requires_grad) kernels::gemm_nn(g, bi->data, grad_buffer(*ai), m, n, k, Accumulate::Yes);
      if (bi->requires_grad) kernels::gemm_tn(g, ai->data, grad_buffer(*bi), n, m, k, Accumulate::Yes);
    });
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  Tensor y = make({n, m}, std::move(out), "transpose");
  if (needs_grad({&a})) {
    ImplPtr ai = a.impl();
    record("transpose", y, {ai}, [ai, m, n](std::span<const double> g) {
      auto ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.defined() && b.defined() && a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename F>
std::vector<double> zip(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor y = make(a.shape(), zip(a, b, std::plus<>()), "add");
  if (needs_grad({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl();
    record("add", y, {ai, bi}, [ai, bi](std::span<const double> g) {
      accumulate_grad(*ai, g);
      accumulate_grad(*bi, g);
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Tensor y = make(a.shape(), zip(a, b, std::minus<>()), "sub");
  if (needs_grad({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl();
    record("sub", y, {ai, bi}, [ai, bi](std::span<const double> g) {
      accumulate_grad(*ai, g);
      if (bi->requires_grad) {
        auto gb = grad_buffer(*bi);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Tensor y = make(a.shape(), zip(a, b, std::multiplies<>()), "mul");
  if (needs_grad({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl();
    record("mul", y, {ai, bi}, [ai, bi](std::span<const double> g) {
      if (ai->requires_grad) {
        auto ga = grad_buffer(*ai);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto gb = grad_buffer(*bi);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ai->data[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (double& x : out) x *= s;
  Tensor y = make(a.shape(), std::move(out), "scale");
  if (needs_grad({&a})) {
    ImplPtr ai = a.impl();
    record("scale", y, {ai}, [ai, s](std::span<const double> g) {
      auto ga = grad_buffer(*ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return y;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_rank2(a, "add_rowvec");
  const std::size_t n = a.rows(), c = a.cols();
  require(v.numel() == c, "add_rowvec", "vector length must equal column count");
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += v[j];
  Tensor y = make(a.shape(), std::move(out), "add_rowvec");
  if (needs_grad({&a, &v})) {
    ImplPtr ai = a.impl(), vi = v.impl();
    record("add_rowvec", y, {ai, vi}, [ai, vi, n, c](std::span<const double> g) {
      accumulate_grad(*ai, g);
      if (vi->requires_grad) {
        auto gv = grad_buffer(*vi);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
      }
    });
  }
  return y;
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  require_rank2(a, "mul_rowvec");
  const std::size_t n = a.rows(), c = a.cols();
  require(v.numel() == c, "mul_rowvec", "vector length must equal column count");
  std::vector<double> out(a.values());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= v[j];
  Tensor y = make(a.shape(), std::move(out), "mul_rowvec");
  if (needs_grad({&a, &v})) {
    ImplPtr ai = a.impl(), vi = v.impl();
    record("mul_rowvec", y, {ai, vi}, [ai, vi, n, c](std::span<const double> g) {
      if (ai->requires_grad) {
        auto ga = grad_buffer(*ai);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j] * vi->data[j];
      }
      if (vi->requires_grad) {
        auto gv = grad_buffer(*vi);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j] * ai->data[i * c + j];
      }
    });
  }
  return y;
}

Tensor scale_rows(const Tensor& x, const Tensor& coeff, std::size_t col) {
  require_rank2(x, "scale_rows");
  require_rank2(coeff, "scale_rows");
  const std::size_t n = x.rows(), c = x.cols(), e = coeff.cols();
  require(coeff.rows() == n && col < e, "scale_rows", "coefficient matrix does not cover the rows");
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= coeff[i * e + col];
  Tensor y = make(x.shape(), std::move(out), "scale_rows");
  if (needs_grad({&x, &coeff})) {
    ImplPtr xi = x.impl(), ci = coeff.impl();
    record("scale_rows", y, {xi, ci}, [xi, ci, n, c, e, col](std::span<const double> g) {
      if (xi->requires_grad) {
        auto gx = grad_buffer(*xi);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * ci->data[i * e + col];
      }
      if (ci->requires_grad) {
        auto gc = grad_buffer(*ci);
        for (std::size_t i = 0; i < n; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * xi->data[i * c + j];
          gc[i * e + col] += s;
        }
      }
    });
  }
  return y;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor y = make({1}, {s}, "sum");
  if (needs_grad({&a})) {
    ImplPtr ai = a.impl();
    record("sum", y, {ai}, [ai](std::span<const double> g) {
      auto ga = grad_buffer(*ai);
      for (double& v : ga) v += g[0];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Nonlinearities

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(x.defined() && axis < x.rank(), "softmax", "axis out of range");
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<double> out(x.values());
  if (inner == 1) {
    kernels::softmax_rows(out, outer, len);
  } else {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double mx = out[base];
        for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, out[base + j * inner]);
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          double& v = out[base + j * inner];
          v = std::exp(v - mx);
          z += v;
        }
        for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
      }
    }
  }
  Tensor y = make(s, std::move(out), "softmax");
  if (needs_grad({&x})) {
    ImplPtr xi = x.impl(), yi = y.impl();
    std::weak_ptr<TensorImpl> yw = yi;
    record("softmax", y, {xi}, [xi, yw, outer, inner, len](std::span<const double> g) {
      auto yv = yw.lock();
      auto gx = grad_buffer(*xi);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * yv->data[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += yv->data[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor silu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
  Tensor y = make(x.shape(), std::move(out), "silu");
  if (needs_grad({&x})) {
    ImplPtr xi = x.impl();
    record("silu", y, {xi}, [xi](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double v = xi->data[i];
        const double sig = 1.0 / (1.0 + std::exp(-v));
        gx[i] += g[i] * sig * (1.0 + v * (1.0 - sig));
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& offset, double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t n = x.rows(), c = x.cols();
  require(gain.numel() == c && offset.numel() == c, "layer_norm", "gain/offset length mismatch");
  std::vector<double> xhat(n * c), inv_std(n), out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += x[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double dlt = x[i * c + j] - mu;
      var += dlt * dlt;
    }
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (x[i * c + j] - mu) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gain[j] + offset[j];
    }
  }
  Tensor y = make(x.shape(), std::move(out), "layer_norm");
  if (needs_grad({&x, &gain, &offset})) {
    ImplPtr xi = x.impl(), gi = gain.impl(), oi = offset.impl();
    record("layer_norm", y, {xi, gi, oi},
           [xi, gi, oi, n, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const double> g) {
             if (xi->requires_grad) {
               auto gx = grad_buffer(*xi);
               std::vector<double> gh(c);
               for (std::size_t i = 0; i < n; ++i) {
                 double mean_gh = 0.0, mean_ghx = 0.0;
                 for (std::size_t j = 0; j < c; ++j) {
                   gh[j] = g[i * c + j] * gi->data[j];
                   mean_gh += gh[j];
                   mean_ghx += gh[j] * xhat[i * c + j];
                 }
                 mean_gh /= static_cast<double>(c);
                 mean_ghx /= static_cast<double>(c);
                 for (std::size_t j = 0; j < c; ++j) {
                   gx[i * c + j] += inv_std[i] * (gh[j] - mean_gh - xhat[i * c + j] * mean_ghx);
                 }
               }
             }
             if (gi->requires_grad) {
               auto gg = grad_buffer(*gi);
               for (std::size_t i = 0; i < n; ++i)
                 for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
             }
             if (oi->requires_grad) {
               auto go = grad_buffer(*oi);
               for (std::size_t i = 0; i < n; ++i)
                 for (std::size_t j = 0; j < c; ++j) go[j] += g[i * c + j];
             }
           });
  }
  return y;
}

Tensor normalize_rows(const Tensor& x) {
  require_rank2(x, "normalize_rows");
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> norms(n), out(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j] * x[i * c + j];
    norms[i] = std::sqrt(s);
    if (norms[i] > 0.0)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / norms[i];
  }
  Tensor y = make(x.shape(), std::move(out), "normalize_rows");
  if (needs_grad({&x})) {
    ImplPtr xi = x.impl();
    std::weak_ptr<TensorImpl> yw = y.impl();
    record("normalize_rows", y, {xi}, [xi, yw, n, c, norms = std::move(norms)](std::span<const double> g) {
      auto yv = yw.lock();
      auto gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < n; ++i) {
        if (norms[i] == 0.0) continue;
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += yv->data[i * c + j] * g[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          gx[i * c + j] += (g[i * c + j] - yv->data[i * c + j] * dot) / norms[i];
        }
      }
    });
  }
  return y;
}

Tensor neg_distance(const Tensor& x, const Tensor& centers, DistanceKind kind) {
  require_rank2(x, "neg_distance");
  require_rank2(centers, "neg_distance");
  const std::size_t n = x.rows(), d = x.cols(), k = centers.rows();
  require(centers.cols() == d, "neg_distance", "center width differs from input width");
  std::vector<double> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e = 0; e < k; ++e) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = x[i * d + j] - centers[e * d + j];
        s += kind == DistanceKind::L2 ? diff * diff : std::abs(diff);
      }
      out[i * k + e] = kind == DistanceKind::L2 ? -std::sqrt(s) : -s;
    }
  }
  Tensor y = make({n, k}, std::move(out), "neg_distance");
  if (needs_grad({&x})) {
    ImplPtr xi = x.impl(), ci = centers.impl();
    std::weak_ptr<TensorImpl> yw = y.impl();
    record("neg_distance", y, {xi}, [xi, ci, yw, n, d, k, kind](std::span<const double> g) {
      auto yv = yw.lock();
      auto gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t e = 0; e < k; ++e) {
          const double ge = g[i * k + e];
          const double dist = -yv->data[i * k + e];
          if (kind == DistanceKind::L2 && dist == 0.0) continue;
          for (std::size_t j = 0; j < d; ++j) {
            const double diff = xi->data[i * d + j] - ci->data[e * d + j];
            const double dd = kind == DistanceKind::L2 ? diff / dist
                                                       : static_cast<double>((diff > 0) - (diff < 0));
            gx[i * d + j] -= ge * dd;
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Indexing

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t v = table.rows(), d = table.cols();
  require(!ids.empty(), "embedding", "no ids");
  std::vector<double> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v)
      throw std::out_of_range("embedding: token id " + std::to_string(ids[t]) + " outside vocabulary of " +
                              std::to_string(v));
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[t] * d), d, out.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  Tensor y = make({ids.size(), d}, std::move(out), "embedding");
  if (needs_grad({&table})) {
    ImplPtr ti = table.impl();
    std::vector<int> saved(ids.begin(), ids.end());
    record("embedding", y, {ti}, [ti, d, saved = std::move(saved)](std::span<const double> g) {
      auto gt = grad_buffer(*ti);
      for (std::size_t t = 0; t < saved.size(); ++t)
        for (std::size_t j = 0; j < d; ++j) gt[saved[t] * d + j] += g[t * d + j];
    });
  }
  return y;
}

Tensor index_rows(const Tensor& x, std::span<const std::size_t> idx) {
  require_rank2(x, "index_rows");
  const std::size_t n = x.rows(), d = x.cols();
  require(!idx.empty(), "index_rows", "empty index");
  std::vector<double> out(idx.size() * d);
  for (std::size_t t = 0; t < idx.size(); ++t) {
    require(idx[t] < n, "index_rows", "row index out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(idx[t] * d), d, out.begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  Tensor y = make({idx.size(), d}, std::move(out), "index_rows");
  if (needs_grad({&x})) {
    ImplPtr xi = x.impl();
    std::vector<std::size_t> saved(idx.begin(), idx.end());
    record("index_rows", y, {xi}, [xi, d, saved = std::move(saved)](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (std::size_t t = 0; t < saved.size(); ++t)
        for (std::size_t j = 0; j < d; ++j) gx[saved[t] * d + j] += g[t * d + j];
    });
  }
  return y;
}

Tensor scatter_rows(const Tensor& x, std::span<const std::size_t> idx, std::size_t n_rows) {
  require_rank2(x, "scatter_rows");
  const std::size_t d = x.cols();
  require(idx.size() == x.rows(), "scatter_rows", "one index per input row required");
  std::vector<double> out(n_rows * d, 0.0);
  for (std::size_t t = 0; t < idx.size(); ++t) {
    require(idx[t] < n_rows, "scatter_rows", "row index out of range");
    for (std::size_t j = 0; j < d; ++j) out[idx[t] * d + j] += x[t * d + j];
  }
  Tensor y = make({n_rows, d}, std::move(out), "scatter_rows");
  if (needs_grad({&x})) {
    ImplPtr xi = x.impl();
    std::vector<std::size_t> saved(idx.begin(), idx.end());
    record("scatter_rows", y, {xi}, [xi, d, saved = std::move(saved)](std::span<const double> g) {
      auto gx = grad_buffer(*xi);
      for (std::size_t t = 0; t < saved.size(); ++t)
        for (std::size_t j = 0; j < d; ++j) gx[t * d + j] += g[saved[t] * d + j];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Attention

namespace {

struct AttnLayout {
  std::vector<std::size_t> prob_offset;  // per (segment, head) start into probs
  std::size_t total = 0;
};

AttnLayout attn_layout(std::span<const std::size_t> offsets, std::size_t n_heads) {
  AttnLayout lay;
  const std::size_t n_seg = offsets.size() - 1;
  lay.prob_offset.resize(n_seg * n_heads);
  for (std::size_t s = 0; s < n_seg; ++s) {
    const std::size_t len = offsets[s + 1] - offsets[s];
    for (std::size_t h = 0; h < n_heads; ++h) {
      lay.prob_offset[s * n_heads + h] = lay.total;
      lay.total += len * (len + 1) / 2;
    }
  }
  return lay;
}

inline std::size_t tri(std::size_t t) { return t * (t + 1) / 2; }

}  // namespace

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const std::size_t> offsets, std::size_t n_heads) {
  require_rank2(q, "causal_attention");
  require_same(q, k, "causal_attention");
  require_same(q, v, "causal_attention");
  const std::size_t n = q.rows(), d = q.cols();
  require(n_heads > 0 && d % n_heads == 0, "causal_attention", "width not divisible by head count");
  require(offsets.size() >= 2 && offsets.front() == 0 && offsets.back() == n, "causal_attention",
          "segment offsets must start at 0 and end at the row count");
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
    require(offsets[s] < offsets[s + 1], "causal_attention", "empty segment");
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const AttnLayout lay = attn_layout(offsets, n_heads);
  const std::size_t n_seg = offsets.size() - 1;
  auto probs = std::make_shared<std::vector<double>>(lay.total);
  std::vector<double> out(n * d, 0.0);
  const auto qd = q.data(), kd = k.data(), vd = v.data();
  const auto jobs = static_cast<std::ptrdiff_t>(n_seg * n_heads);
#pragma omp parallel for schedule(static) if (n * n * d >= (1u << 16))
  for (std::ptrdiff_t job = 0; job < jobs; ++job) {
    const std::size_t s = static_cast<std::size_t>(job) / n_heads;
    const std::size_t h = static_cast<std::size_t>(job) % n_heads;
    const std::size_t a = offsets[s], len = offsets[s + 1] - a, c0 = h * dh;
    double* p = probs->data() + lay.prob_offset[static_cast<std::size_t>(job)];
    for (std::size_t t = 0; t < len; ++t) {
      double* row = p + tri(t);
      for (std::size_t u = 0; u <= t; ++u) {
        double dot = 0.0;
        for (std::size_t j = 0; j < dh; ++j) dot += qd[(a + t) * d + c0 + j] * kd[(a + u) * d + c0 + j];
        row[u] = dot * sc;
      }
      double mx = row[0];
      for (std::size_t u = 1; u <= t; ++u) mx = std::max(mx, row[u]);
      double z = 0.0;
      for (std::size_t u = 0; u <= t; ++u) {
        row[u] = std::exp(row[u] - mx);
        z += row[u];
      }
      for (std::size_t u = 0; u <= t; ++u) row[u] /= z;
      for (std::size_t u = 0; u <= t; ++u)
        for (std::size_t j = 0; j < dh; ++j) out[(a + t) * d + c0 + j] += row[u] * vd[(a + u) * d + c0 + j];
    }
  }
  Tensor y = make({n, d}, std::move(out), "causal_attention");
  if (needs_grad({&q, &k, &v})) {
    ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl();
    std::vector<std::size_t> offs(offsets.begin(), offsets.end());
    record("causal_attention", y, {qi, ki, vi},
           [qi, ki, vi, probs, lay, offs = std::move(offs), n, d, n_heads, dh, sc](std::span<const double> g) {
             std::vector<double> gq(n * d, 0.0), gk(n * d, 0.0), gv(n * d, 0.0);
             const std::size_t n_seg = offs.size() - 1;
             const auto jobs = static_cast<std::ptrdiff_t>(n_seg * n_heads);
#pragma omp parallel for schedule(static) if (n * n * d >= (1u << 16))
             for (std::ptrdiff_t job = 0; job < jobs; ++job) {
               const std::size_t s = static_cast<std::size_t>(job) / n_heads;
               const std::size_t h = static_cast<std::size_t>(job) % n_heads;
               const std::size_t a = offs[s], len = offs[s + 1] - a, c0 = h * dh;
               const double* p = probs->data() + lay.prob_offset[static_cast<std::size_t>(job)];
               std::vector<double> dp(len);
               for (std::size_t t = 0; t < len; ++t) {
                 const double* row = p + tri(t);
                 const double* go = g.data() + (a + t) * d + c0;
                 double wsum = 0.0;
                 for (std::size_t u = 0; u <= t; ++u) {
                   double dot = 0.0;
                   for (std::size_t j = 0; j < dh; ++j) dot += go[j] * vi->data[(a + u) * d + c0 + j];
                   dp[u] = dot;
                   wsum += row[u] * dot;
                 }
                 for (std::size_t u = 0; u <= t; ++u) {
                   const double ds = row[u] * (dp[u] - wsum) * sc;
                   for (std::size_t j = 0; j < dh; ++j) {
                     gq[(a + t) * d + c0 + j] += ds * ki->data[(a + u) * d + c0 + j];
                     gk[(a + u) * d + c0 + j] += ds * qi->data[(a + t) * d + c0 + j];
                     gv[(a + u) * d + c0 + j] += row[u] * go[j];
                   }
                 }
               }
             }
             accumulate_grad(*qi, gq);
             accumulate_grad(*ki, gk);
             accumulate_grad(*vi, gv);
           });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Loss

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  require(targets.size() == n, "cross_entropy", "one target per row required");
  std::vector<double> probs(logits.values());
  kernels::softmax_rows(probs, n, c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c)
      throw std::out_of_range("cross_entropy: target out of range");
    const double* row = logits.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    loss += mx + std::log(z) - row[targets[i]];
  }
  loss /= static_cast<double>(n);
  Tensor y = make({1}, {loss}, "cross_entropy");
  if (needs_grad({&logits})) {
    ImplPtr li = logits.impl();
    std::vector<int> saved(targets.begin(), targets.end());
    record("cross_entropy", y, {li},
           [li, n, c, probs = std::move(probs), saved = std::move(saved)](std::span<const double> g) {
             auto gl = grad_buffer(*li);
             const double w = g[0] / static_cast<double>(n);
             for (std::size_t i = 0; i < n; ++i) {
               for (std::size_t j = 0; j < c; ++j) {
                 const double onehot = static_cast<int>(j) == saved[i] ? 1.0 : 0.0;
                 gl[i * c + j] += w * (probs[i * c + j] - onehot);
               }
             }
           });
  }
  return y;
}

}  // namespace mjlab
