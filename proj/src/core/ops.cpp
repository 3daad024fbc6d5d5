#include "mdt/ops.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <string>
#include <thread>

#include "mdt/autograd.h"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mdt {
namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void attach(Tensor& out, Tape::BackwardFn fn) {
  out.impl().requires_grad = true;
  active_tape()->record(out.impl_ptr(), std::move(fn));
}

// Gradient buffer of an input, or nullptr when it takes no gradient.
real* grad_of(const ImplPtr& p) {
  if (!p || !p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

template <typename F>
void parallel_rows(std::size_t rows, F&& body) {
  const std::size_t threads = std::min(kernel_threads(), rows / 32);
  if (threads <= 1) {
    body(std::size_t{0}, rows);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (rows + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(rows, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

// C[m×n] = A[m×k]·B[k×n]
void gemm(const real* a, const real* b, real* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_rows(m, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(n);
    for (std::size_t i = lo; i < hi; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const real* arow = a + i * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        const real* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
      }
      real* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<real>(acc[j]);
    }
  });
}

// dA[m×k] += dC[m×n]·Bᵀ, computed as row-wise axpy over a transposed B so the
// inner loop is contiguous and needs no reassociation.
void gemm_nt_acc(const real* dc, const real* b, real* da, std::size_t m, std::size_t n,
                 std::size_t k) {
  std::vector<real> bt(n * k);
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + kk] = b[kk * n + j];
  parallel_rows(m, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(k);
    for (std::size_t i = lo; i < hi; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const real* grow = dc + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double g = grow[j];
        const real* btrow = bt.data() + j * k;
        for (std::size_t kk = 0; kk < k; ++kk) acc[kk] += g * btrow[kk];
      }
      real* darow = da + i * k;
      for (std::size_t kk = 0; kk < k; ++kk) darow[kk] += static_cast<real>(acc[kk]);
    }
  });
}

// dB[k×n] += Aᵀ·dC, A [m×k], dC [m×n]
void gemm_tn_acc(const real* a, const real* dc, real* db, std::size_t m, std::size_t k,
                 std::size_t n) {
  std::vector<double> acc(k * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const real* grow = dc + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = a[i * k + kk];
      double* arow = acc.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) arow[j] += av * grow[j];
    }
  }
  for (std::size_t i = 0; i < k * n; ++i) db[i] += static_cast<real>(acc[i]);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  auto in = x.data();
  std::vector<real> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<real>(fwd(static_cast<double>(in[i])));
  auto y = Tensor::from(x.shape(), std::move(out));
  if (tracking({&x})) {
    ImplPtr xi = x.impl_ptr();
    attach(y, [xi, deriv](TensorImpl& o) {
      real* gx = grad_of(xi);
      if (!gx) return;
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        gx[i] += static_cast<real>(o.grad[i] * deriv(static_cast<double>(xi->data[i]),
                                                      static_cast<double>(o.data[i])));
      }
    });
  }
  return y;
}

}  // namespace

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

std::size_t kernel_threads() {
  static const std::size_t threads = [] {
    const char* env = std::getenv("MDT_THREADS");
    if (!env) return std::size_t{1};
    long v = std::strtol(env, nullptr, 10);
    return v > 0 ? static_cast<std::size_t>(v) : std::size_t{1};
  }();
  return threads;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  auto c = Tensor::zeros({m, n});
  gemm(a.data().data(), b.data().data(), c.data().data(), m, k, n);
  if (tracking({&a, &b})) {
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
    attach(c, [ai, bi, m, k, n](TensorImpl& o) {
      if (real* ga = grad_of(ai)) gemm_nt_acc(o.grad.data(), bi->data.data(), ga, m, n, k);
      if (real* gb = grad_of(bi)) gemm_tn_acc(ai->data.data(), o.grad.data(), gb, m, k, n);
    });
  }
  return c;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(weight, 2, "linear");
  const std::size_t k = weight.dim(0), n = weight.dim(1);
  if (x.rank() == 0 || x.shape().back() != k) {
    throw ShapeError("linear: input " + shape_to_string(x.shape()) + " does not match weight " +
                     shape_to_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n)) {
    throw ShapeError("linear: bias " + shape_to_string(bias.shape()) + " does not match weight " +
                     shape_to_string(weight.shape()));
  }
  const std::size_t m = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  auto y = Tensor::zeros(out_shape);
  real* yd = y.data().data();
  gemm(x.data().data(), weight.data().data(), yd, m, k, n);
  if (bias.defined()) {
    const real* bd = bias.data().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) yd[i * n + j] += bd[j];
  }
  if (tracking({&x, &weight, &bias})) {
    ImplPtr xi = x.impl_ptr(), wi = weight.impl_ptr();
    ImplPtr bi = bias.defined() ? bias.impl_ptr() : nullptr;
    attach(y, [xi, wi, bi, m, k, n](TensorImpl& o) {
      if (real* gx = grad_of(xi)) gemm_nt_acc(o.grad.data(), wi->data.data(), gx, m, n, k);
      if (real* gw = grad_of(wi)) gemm_tn_acc(xi->data.data(), o.grad.data(), gw, m, k, n);
      if (real* gb = grad_of(bi)) {
        std::vector<double> acc(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) acc[j] += o.grad[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gb[j] += static_cast<real>(acc[j]);
      }
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  bool suffix = bs.size() <= as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin());
  if (!suffix) {
    throw ShapeError("add: " + shape_to_string(bs) + " does not broadcast to " + shape_to_string(as));
  }
  const std::size_t na = a.numel(), nb = b.numel();
  std::vector<real> out(na);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < na; ++i) out[i] = ad[i] + bd[i % nb];
  auto y = Tensor::from(as, std::move(out));
  if (tracking({&a, &b})) {
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
    attach(y, [ai, bi, na, nb](TensorImpl& o) {
      if (real* ga = grad_of(ai))
        for (std::size_t i = 0; i < na; ++i) ga[i] += o.grad[i];
      if (real* gb = grad_of(bi)) {
        std::vector<double> acc(nb, 0.0);
        for (std::size_t i = 0; i < na; ++i) acc[i % nb] += o.grad[i];
        for (std::size_t i = 0; i < nb; ++i) gb[i] += static_cast<real>(acc[i]);
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto ad = a.data();
  auto bd = b.data();
  std::vector<real> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto y = Tensor::from(a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr();
    attach(y, [ai, bi](TensorImpl& o) {
      // Read both operands before writing: a and b may alias.
      real* ga = grad_of(ai);
      real* gb = grad_of(bi);
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const real g = o.grad[i];
        if (ga) ga[i] += g * bi->data[i];
        if (gb) gb[i] += g * ai->data[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, real factor) {
  return unary(x, [factor](double v) { return v * factor; },
               [factor](double, double) { return static_cast<double>(factor); });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        return cdf + v * pdf;
      });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng* rng) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be below 1");
  if (!rng) throw ContractError("dropout in training mode needs an RNG stream");
  const real keep_scale = static_cast<real>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<real>>(x.numel());
  auto xd = x.data();
  std::vector<real> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng->uniform() < rate ? 0.0f : keep_scale;
    out[i] = xd[i] * (*mask)[i];
  }
  auto y = Tensor::from(x.shape(), std::move(out));
  if (tracking({&x})) {
    ImplPtr xi = x.impl_ptr();
    attach(y, [xi, mask](TensorImpl& o) {
      if (real* gx = grad_of(xi))
        for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * (*mask)[i];
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (real v : x.data()) s += v;
  auto y = Tensor::scalar(static_cast<real>(s));
  if (tracking({&x})) {
    ImplPtr xi = x.impl_ptr();
    attach(y, [xi](TensorImpl& o) {
      if (real* gx = grad_of(xi))
        for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += o.grad[0];
    });
  }
  return y;
}

Tensor mean_tokens(const Tensor& x) {
  require_rank(x, 3, "mean_tokens");
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  auto xd = x.data();
  std::vector<real> out(b * d);
  std::vector<double> acc(d);
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < d; ++j) acc[j] += xd[(bi * n + t) * d + j];
    for (std::size_t j = 0; j < d; ++j) out[bi * d + j] = static_cast<real>(acc[j] / n);
  }
  auto y = Tensor::from({b, d}, std::move(out));
  if (tracking({&x})) {
    ImplPtr xi = x.impl_ptr();
    attach(y, [xi, b, n, d](TensorImpl& o) {
      real* gx = grad_of(xi);
      if (!gx) return;
      const real inv = 1.0f / static_cast<real>(n);
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t t = 0; t < n; ++t)
          for (std::size_t j = 0; j < d; ++j) gx[(bi * n + t) * d + j] += o.grad[bi * d + j] * inv;
    });
  }
  return y;
}

Tensor select_token(const Tensor& x, std::size_t index) {
  require_rank(x, 3, "select_token");
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (index >= n) throw ShapeError("select_token: index " + std::to_string(index) + " out of range");
  auto xd = x.data();
  std::vector<real> out(b * d);
  for (std::size_t bi = 0; bi < b; ++bi)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((bi * n + index) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(bi * d));
  auto y = Tensor::from({b, d}, std::move(out));
  if (tracking({&x})) {
    ImplPtr xi = x.impl_ptr();
    attach(y, [xi, b, n, d, index](TensorImpl& o) {
      if (real* gx = grad_of(xi))
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t j = 0; j < d; ++j) gx[(bi * n + index) * d + j] += o.grad[bi * d + j];
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                     shape_to_string(shape));
  }
  auto y = Tensor::from(std::move(shape), x.to_vector());
  if (tracking({&x})) {
    ImplPtr xi = x.impl_ptr();
    attach(y, [xi](TensorImpl& o) {
      if (real* gx = grad_of(xi))
        for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    });
  }
  return y;
}

Tensor concat_tokens(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_tokens: nothing to concatenate");
  for (const auto& p : parts) require_rank(p, 3, "concat_tokens");
  const std::size_t b = parts[0].dim(0), d = parts[0].dim(2);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != b || p.dim(2) != d) {
      throw ShapeError("concat_tokens: " + shape_to_string(p.shape()) + " incompatible with " +
                       shape_to_string(parts[0].shape()));
    }
    total += p.dim(1);
  }
  std::vector<real> out(b * total * d);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t n = p.dim(1);
    auto pd = p.data();
    for (std::size_t bi = 0; bi < b; ++bi)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(bi * n * d), n * d,
                  out.begin() + static_cast<std::ptrdiff_t>((bi * total + offset) * d));
    offset += n;
  }
  auto y = Tensor::from({b, total, d}, std::move(out));
  bool track = false;
  if (active_tape())
    for (const auto& p : parts) track = track || p.requires_grad();
  if (track) {
    std::vector<ImplPtr> impls;
    for (const auto& p : parts) impls.push_back(p.impl_ptr());
    attach(y, [impls, b, total, d](TensorImpl& o) {
      std::size_t off = 0;
      for (const auto& pi : impls) {
        const std::size_t n = pi->shape[1];
        if (real* gp = grad_of(pi)) {
          for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t i = 0; i < n * d; ++i) gp[bi * n * d + i] += o.grad[(bi * total + off) * d + i];
        }
        off += n;
      }
    });
  }
  return y;
}

Tensor concat_features(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_features: nothing to concatenate");
  const Shape& first = parts[0].shape();
  const std::size_t rows = parts[0].numel() / first.back();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin(), first.end() - 1, p.shape().begin())) {
      throw ShapeError("concat_features: " + shape_to_string(p.shape()) + " incompatible with " +
                       shape_to_string(first));
    }
    total += p.shape().back();
  }
  std::vector<real> out(rows * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape().back();
    auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    offset += w;
  }
  Shape shape = first;
  shape.back() = total;
  auto y = Tensor::from(shape, std::move(out));
  bool track = false;
  if (active_tape())
    for (const auto& p : parts) track = track || p.requires_grad();
  if (track) {
    std::vector<ImplPtr> impls;
    for (const auto& p : parts) impls.push_back(p.impl_ptr());
    attach(y, [impls, rows, total](TensorImpl& o) {
      std::size_t off = 0;
      for (const auto& pi : impls) {
        const std::size_t w = pi->shape.back();
        if (real* gp = grad_of(pi)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < w; ++i) gp[r * w + i] += o.grad[r * total + off + i];
        }
        off += w;
      }
    });
  }
  return y;
}

Tensor repeat_batch(const Tensor& x, std::size_t times) {
  if (x.rank() == 0 || times == 0) throw ShapeError("repeat_batch: bad arguments");
  if (times == 1) return x;
  const std::size_t b = x.dim(0);
  const std::size_t inner = x.numel() / b;
  auto xd = x.data();
  std::vector<real> out(b * times * inner);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t r = 0; r < times; ++r)
      std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(bi * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((bi * times + r) * inner));
  Shape shape = x.shape();
  shape[0] = b * times;
  auto y = Tensor::from(shape, std::move(out));
  if (tracking({&x})) {
    ImplPtr xi = x.impl_ptr();
    attach(y, [xi, b, times, inner](TensorImpl& o) {
      if (real* gx = grad_of(xi))
        for (std::size_t bi = 0; bi < b; ++bi)
          for (std::size_t r = 0; r < times; ++r)
            for (std::size_t i = 0; i < inner; ++i) gx[bi * inner + i] += o.grad[(bi * times + r) * inner + i];
    });
  }
  return y;
}

Tensor broadcast_batch(const Tensor& x, std::size_t batch) {
  require_rank(x, 2, "broadcast_batch");
  auto y3 = reshape(x, {1, x.dim(0), x.dim(1)});
  return repeat_batch(y3, batch);
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax_lastdim: empty last dimension");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  auto xd = x.data();
  std::vector<real> out(xd.size());
  std::vector<double> e(len);
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xd.data() + r * len;
    double mx = row[0];
    for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < len; ++j) s += (e[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = static_cast<real>(e[j] / s);
  }
  auto y = Tensor::from(x.shape(), std::move(out));
  if (tracking({&x})) {
    ImplPtr xi = x.impl_ptr();
    attach(y, [xi, rows, len](TensorImpl& o) {
      real* gx = grad_of(xi);
      if (!gx) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const real* yr = o.data.data() + r * len;
        const real* gr = o.grad.data() + r * len;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += static_cast<double>(gr[j]) * yr[j];
        for (std::size_t j = 0; j < len; ++j) gx[r * len + j] += static_cast<real>(yr[j] * (gr[j] - dot));
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: zero-length normalization axis");
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" +
                     shape_to_string(bias.shape()) + " do not match input " + shape_to_string(x.shape()));
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  auto normed = std::make_shared<std::vector<real>>(xd.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<real> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = xd.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * rs;
      (*normed)[r * d + j] = static_cast<real>(xh);
      out[r * d + j] = static_cast<real>(xh * gd[j] + bd[j]);
    }
  }
  auto y = Tensor::from(x.shape(), std::move(out));
  if (tracking({&x, &gain, &bias})) {
    ImplPtr xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr();
    attach(y, [xi, gi, bi, normed, rstd, rows, d](TensorImpl& o) {
      real* gx = grad_of(xi);
      real* gg = grad_of(gi);
      real* gb = grad_of(bi);
      std::vector<double> acc_g(d, 0.0), acc_b(d, 0.0), dxh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const real* go = o.grad.data() + r * d;
        const real* xh = normed->data() + r * d;
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          acc_g[j] += static_cast<double>(go[j]) * xh[j];
          acc_b[j] += go[j];
          dxh[j] = static_cast<double>(go[j]) * gi->data[j];
          mean_dxh += dxh[j];
          mean_dxh_xh += dxh[j] * xh[j];
        }
        mean_dxh /= d;
        mean_dxh_xh /= d;
        if (gx) {
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += static_cast<real>((*rstd)[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh));
        }
      }
      if (gg)
        for (std::size_t j = 0; j < d; ++j) gg[j] += static_cast<real>(acc_g[j]);
      if (gb)
        for (std::size_t j = 0; j < d; ++j) gb[j] += static_cast<real>(acc_b[j]);
    });
  }
  return y;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, std::size_t batch,
                 std::size_t count) {
  require_rank(table, 2, "embedding");
  if (ids.size() != batch * count) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids for a " +
                     std::to_string(batch) + "x" + std::to_string(count) + " layout");
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  auto td = table.data();
  std::vector<real> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  auto y = Tensor::from({batch, count, d}, std::move(out));
  if (tracking({&table})) {
    ImplPtr ti = table.impl_ptr();
    std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
    attach(y, [ti, id_copy = std::move(id_copy), d](TensorImpl& o) {
      if (real* gt = grad_of(ti))
        for (std::size_t i = 0; i < id_copy.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) gt[id_copy[i] * d + j] += o.grad[i * d + j];
    });
  }
  return y;
}

Tensor masked_mean_embedding(const Tensor& table, std::span<const std::int32_t> ids,
                             std::size_t batch, std::size_t count, std::int32_t pad_id) {
  require_rank(table, 2, "masked_mean_embedding");
  if (ids.size() != batch * count) throw ShapeError("masked_mean_embedding: id layout mismatch");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  auto td = table.data();
  std::vector<real> out(batch * d, 0.0f);
  std::vector<double> weights(ids.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t used = 0;
    for (std::size_t i = 0; i < count; ++i) {
      auto id = ids[b * count + i];
      if (id < 0 || static_cast<std::size_t>(id) >= vocab)
        throw ShapeError("masked_mean_embedding: id " + std::to_string(id) + " outside vocabulary");
      if (id != pad_id) ++used;
    }
    if (used == 0) continue;
    std::vector<double> acc(d, 0.0);
    for (std::size_t i = 0; i < count; ++i) {
      auto id = ids[b * count + i];
      if (id == pad_id) continue;
      weights[b * count + i] = 1.0 / static_cast<double>(used);
      for (std::size_t j = 0; j < d; ++j) acc[j] += td[id * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] = static_cast<real>(acc[j] / used);
  }
  auto y = Tensor::from({batch, d}, std::move(out));
  if (tracking({&table})) {
    ImplPtr ti = table.impl_ptr();
    std::vector<std::int32_t> id_copy(ids.begin(), ids.end());
    attach(y, [ti, id_copy = std::move(id_copy), weights = std::move(weights), count, d](TensorImpl& o) {
      real* gt = grad_of(ti);
      if (!gt) return;
      for (std::size_t i = 0; i < id_copy.size(); ++i) {
        if (weights[i] == 0.0) continue;
        const std::size_t b = i / count;
        for (std::size_t j = 0; j < d; ++j)
          gt[id_copy[i] * d + j] += static_cast<real>(o.grad[b * d + j] * weights[i]);
      }
    });
  }
  return y;
}

Tensor scalar_tokens(const Tensor& values, const Tensor& weight, const Tensor& bias) {
  require_rank(values, 2, "scalar_tokens");
  const std::size_t d = weight.numel();
  if (weight.rank() != 1 || bias.rank() != 1 || bias.numel() != d) {
    throw ShapeError("scalar_tokens: weight " + shape_to_string(weight.shape()) + " and bias " +
                     shape_to_string(bias.shape()) + " must be matching vectors");
  }
  const std::size_t b = values.dim(0), n = values.dim(1);
  auto vd = values.data();
  auto wd = weight.data();
  auto bd = bias.data();
  std::vector<real> out(b * n * d);
  for (std::size_t i = 0; i < b * n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = vd[i] * wd[j] + bd[j];
  auto y = Tensor::from({b, n, d}, std::move(out));
  if (tracking({&values, &weight, &bias})) {
    ImplPtr vi = values.impl_ptr(), wi = weight.impl_ptr(), bi = bias.impl_ptr();
    attach(y, [vi, wi, bi, b, n, d](TensorImpl& o) {
      real* gv = grad_of(vi);
      real* gw = grad_of(wi);
      real* gb = grad_of(bi);
      std::vector<double> acc_w(d, 0.0), acc_b(d, 0.0);
      for (std::size_t i = 0; i < b * n; ++i) {
        double dv = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double g = o.grad[i * d + j];
          dv += g * wi->data[j];
          acc_w[j] += g * vi->data[i];
          acc_b[j] += g;
        }
        if (gv) gv[i] += static_cast<real>(dv);
      }
      for (std::size_t j = 0; j < d; ++j) {
        if (gw) gw[j] += static_cast<real>(acc_w[j]);
        if (gb) gb[j] += static_cast<real>(acc_b[j]);
      }
    });
  }
  return y;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionOptions& options) {
  require_rank(q, 3, "attention");
  require_rank(k, 3, "attention");
  require_rank(v, 3, "attention");
  const std::size_t b = q.dim(0), nq = q.dim(1), d = q.dim(2);
  const std::size_t nk = k.dim(1);
  if (k.dim(0) != b || v.dim(0) != b || k.dim(2) != d || v.dim(2) != d || v.dim(1) != nk) {
    throw ShapeError("attention: query " + shape_to_string(q.shape()) + ", key " +
                     shape_to_string(k.shape()) + ", value " + shape_to_string(v.shape()) +
                     " are incompatible");
  }
  const std::size_t heads = options.heads;
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  const auto& mask = options.key_mask;
  if (!mask.empty() && mask.size() != b * nk) throw ShapeError("attention: key mask layout mismatch");
  const std::size_t dk = d / heads;
  const double sc = options.scale;
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  // probabilities, [b][h][nq][nk]
  auto probs = std::make_shared<std::vector<real>>(b * heads * nq * nk);
  std::vector<real> out(b * nq * d, 0.0f);
  std::vector<double> row(nk), acc(dk);
  for (std::size_t bi = 0; bi < b; ++bi) {
    const std::uint8_t* m = mask.empty() ? nullptr : mask.data() + bi * nk;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dk;
      real* p = probs->data() + ((bi * heads + h) * nq) * nk;
      for (std::size_t i = 0; i < nq; ++i) {
        const real* qi = qd.data() + (bi * nq + i) * d + off;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < nk; ++j) {
          if (m && !m[j]) continue;
          const real* kj = kd.data() + (bi * nk + j) * d + off;
          double s = 0.0;
          for (std::size_t t = 0; t < dk; ++t) s += static_cast<double>(qi[t]) * kj[t];
          row[j] = s * sc;
          mx = std::max(mx, row[j]);
        }
        if (mx == -INFINITY) throw ContractError("attention: every key of a row is masked");
        double z = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          row[j] = (m && !m[j]) ? 0.0 : std::exp(row[j] - mx);
          z += row[j];
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < nk; ++j) {
          const double pj = row[j] / z;
          p[i * nk + j] = static_cast<real>(pj);
          const real* vj = vd.data() + (bi * nk + j) * d + off;
          for (std::size_t t = 0; t < dk; ++t) acc[t] += pj * vj[t];
        }
        real* oi = out.data() + (bi * nq + i) * d + off;
        for (std::size_t t = 0; t < dk; ++t) oi[t] = static_cast<real>(acc[t]);
      }
    }
  }
  if (options.capture) {
    auto& cap = *options.capture;
    cap.assign(b * nq * nk, 0.0f);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t i = 0; i < nq * nk; ++i) {
        double s = 0.0;
        for (std::size_t h = 0; h < heads; ++h) s += (*probs)[(bi * heads + h) * nq * nk + i];
        cap[bi * nq * nk + i] = static_cast<real>(s / heads);
      }
  }
  auto y = Tensor::from({b, nq, d}, std::move(out));
  if (tracking({&q, &k, &v})) {
    ImplPtr qi = q.impl_ptr(), ki = k.impl_ptr(), vi = v.impl_ptr();
    attach(y, [qi, ki, vi, probs, b, nq, nk, d, heads, dk, sc](TensorImpl& o) {
      real* gq = grad_of(qi);
      real* gk = grad_of(ki);
      real* gv = grad_of(vi);
      const real* qd = qi->data.data();
      const real* kd = ki->data.data();
      const real* vd = vi->data.data();
      std::vector<double> dp(nk), ds(nk), acc(dk);
      for (std::size_t bi = 0; bi < b; ++bi) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dk;
          const real* p = probs->data() + ((bi * heads + h) * nq) * nk;
          for (std::size_t i = 0; i < nq; ++i) {
            const real* go = o.grad.data() + (bi * nq + i) * d + off;
            // dP = dO·Vᵀ, dV += Pᵀ·dO
            double dot = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
              const real* vj = vd + (bi * nk + j) * d + off;
              double s = 0.0;
              for (std::size_t t = 0; t < dk; ++t) s += static_cast<double>(go[t]) * vj[t];
              dp[j] = s;
              dot += s * p[i * nk + j];
              if (gv) {
                const real pj = p[i * nk + j];
                real* gvj = gv + (bi * nk + j) * d + off;
                for (std::size_t t = 0; t < dk; ++t) gvj[t] += pj * go[t];
              }
            }
            for (std::size_t j = 0; j < nk; ++j) ds[j] = p[i * nk + j] * (dp[j] - dot) * sc;
            const real* qrow = qd + (bi * nq + i) * d + off;
            if (gq) {
              std::fill(acc.begin(), acc.end(), 0.0);
              for (std::size_t j = 0; j < nk; ++j) {
                const real* kj = kd + (bi * nk + j) * d + off;
                for (std::size_t t = 0; t < dk; ++t) acc[t] += ds[j] * kj[t];
              }
              real* gqi = gq + (bi * nq + i) * d + off;
              for (std::size_t t = 0; t < dk; ++t) gqi[t] += static_cast<real>(acc[t]);
            }
            if (gk) {
              for (std::size_t j = 0; j < nk; ++j) {
                if (ds[j] == 0.0) continue;
                real* gkj = gk + (bi * nk + j) * d + off;
                for (std::size_t t = 0; t < dk; ++t) gkj[t] += static_cast<real>(ds[j] * qrow[t]);
              }
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, double d_k,
                        std::vector<real>* capture) {
  require_rank(q, 2, "scaled_attention");
  require_rank(k, 2, "scaled_attention");
  require_rank(v, 2, "scaled_attention");
  if (q.dim(1) != k.dim(1)) {
    throw ShapeError("scaled_attention: query width " + std::to_string(q.dim(1)) +
                     " differs from key width " + std::to_string(k.dim(1)));
  }
  if (v.dim(0) != k.dim(0)) throw ShapeError("scaled_attention: key/value counts differ");
  if (!(d_k > 0.0)) throw ContractError("scaled_attention: d_k must be positive");
  const std::size_t w = q.dim(1);
  if (v.dim(1) != w) throw ShapeError("scaled_attention: value width must equal key width");
  AttentionOptions opt;
  opt.heads = 1;
  opt.scale = 1.0 / std::sqrt(d_k);
  opt.capture = capture;
  auto q3 = reshape(q, {1, q.dim(0), w});
  auto k3 = reshape(k, {1, k.dim(0), w});
  auto v3 = reshape(v, {1, v.dim(0), w});
  auto out = multi_head_attention(q3, k3, v3, opt);
  return reshape(out, {q.dim(0), w});
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& labels) {
  require_same_shape(logits, labels, "bce_with_logits");
  auto zd = logits.data();
  auto yd = labels.data();
  const std::size_t n = zd.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = yd[i];
    if (y != 0.0 && y != 1.0) {
      throw ContractError("bce_with_logits: label " + std::to_string(y) + " is not 0 or 1");
    }
    const double z = zd[i];
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  auto out = Tensor::scalar(static_cast<real>(total / static_cast<double>(n)));
  if (tracking({&logits})) {
    ImplPtr zi = logits.impl_ptr(), yi = labels.impl_ptr();
    attach(out, [zi, yi, n](TensorImpl& o) {
      real* gz = grad_of(zi);
      if (!gz) return;
      const double g = o.grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double z = zi->data[i];
        const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        gz[i] += static_cast<real>(g * (s - yi->data[i]));
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 1 && logits.rank() != 2) throw ShapeError("softmax_cross_entropy: rank 1 or 2 logits");
  const std::size_t c = logits.shape().back();
  const std::size_t rows = logits.numel() / c;
  if (targets.size() != rows) throw ShapeError("softmax_cross_entropy: one target per row required");
  auto zd = logits.data();
  auto probs = std::make_shared<std::vector<double>>(zd.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= c) throw ShapeError("softmax_cross_entropy: target out of range");
    const real* z = zd.data() + r * c;
    double mx = z[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) (*probs)[r * c + j] = std::exp(z[j] - lse);
    total += lse - z[targets[r]];
  }
  auto out = Tensor::scalar(static_cast<real>(total / rows));
  if (tracking({&logits})) {
    ImplPtr zi = logits.impl_ptr();
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    attach(out, [zi, probs, tg = std::move(tg), rows, c](TensorImpl& o) {
      real* gz = grad_of(zi);
      if (!gz) return;
      const double g = o.grad[0] / static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j)
          gz[r * c + j] += static_cast<real>(g * ((*probs)[r * c + j] - (j == tg[r] ? 1.0 : 0.0)));
    });
  }
  return out;
}

}  // namespace mdt
