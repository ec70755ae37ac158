#include "mixri/ops.hpp"

#include <cblas.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "mixri/rng.hpp"

namespace mixri::ops {

namespace {

thread_local bool g_grad_enabled = true;

template <typename F>
void dispatch(Dtype dt, F&& f) {
  if (dt == Dtype::Float32)
    f(float{});
  else
    f(double{});
}

Tensor make_node(const Shape& shape, Dtype dt, const char* op,
                 std::vector<Tensor> parents) {
  Tensor out = Tensor::zeros(shape, dt);
  bool rg = false;
  if (g_grad_enabled)
    for (const auto& p : parents) rg = rg || p.requires_grad();
  out.set_requires_grad(rg);
  if (rg) {
    out.raw()->op_name = op;
    for (auto& p : parents) out.raw()->parents.push_back(p.impl());
  }
  return out;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype())
    throw std::invalid_argument(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) +
                                " vs " + dtype_name(b.dtype()) + ")");
}

// Suffix broadcasting: returns true if `small` is a suffix of `big` (or a
// single element). Binary ops may then tile `small` over big's leading dims.
bool is_suffix(const Shape& big, const Shape& small) {
  if (shape_numel(small) == 1) return true;
  if (small.size() > big.size()) return false;
  for (size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  return true;
}

void gemm_f(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha, const float* A,
            int64_t lda, const float* B, int64_t ldb, float beta, float* C, int64_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, A,
              static_cast<int>(lda), B, static_cast<int>(ldb), beta, C, static_cast<int>(ldc));
}

void gemm_f(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const double* A,
            int64_t lda, const double* B, int64_t ldb, double beta, double* C, int64_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, A,
              static_cast<int>(lda), B, static_cast<int>(ldb), beta, C, static_cast<int>(ldc));
}

// Elementwise binary op with suffix broadcasting. fwd(a,b) -> out;
// dfa/dfb give local derivatives as functions of (a, b, out_grad).
template <typename Fwd, typename Da, typename Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Da dfa, Db dfb) {
  check_same_dtype(a, b, op);
  const bool a_big = is_suffix(a.shape(), b.shape());
  const bool b_big = is_suffix(b.shape(), a.shape());
  if (!a_big && !b_big)
    throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()) + " do not broadcast");
  const Tensor& big = a_big ? a : b;
  Tensor out = make_node(big.shape(), a.dtype(), op, {a, b});
  const int64_t n = big.numel();
  const int64_t na = a.numel(), nb = b.numel();

  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* po = out.data<T>();
    if (na == n && nb == n) {
      for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else if (na == n) {
      for (int64_t r = 0; r < n / nb; ++r)
        for (int64_t j = 0; j < nb; ++j) po[r * nb + j] = fwd(pa[r * nb + j], pb[j]);
    } else {
      for (int64_t r = 0; r < n / na; ++r)
        for (int64_t j = 0; j < na; ++j) po[r * na + j] = fwd(pa[j], pb[r * na + j]);
    }
  });

  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, bi, oi, n, na, nb, dfa, dfb]() {
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = ai->storage->data<T>();
        const T* pb = bi->storage->data<T>();
        const T* og = oi->grad->data<T>();
        if (ai->requires_grad) {
          ai->ensure_grad();
          T* ga = ai->grad->data<T>();
          if (na == n && nb == n) {
            for (int64_t i = 0; i < n; ++i) ga[i] += dfa(pa[i], pb[i], og[i]);
          } else if (na == n) {
            for (int64_t r = 0; r < n / nb; ++r)
              for (int64_t j = 0; j < nb; ++j)
                ga[r * nb + j] += dfa(pa[r * nb + j], pb[j], og[r * nb + j]);
          } else {
            for (int64_t r = 0; r < n / na; ++r)
              for (int64_t j = 0; j < na; ++j) ga[j] += dfa(pa[j], pb[r * na + j], og[r * na + j]);
          }
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          T* gb = bi->grad->data<T>();
          if (na == n && nb == n) {
            for (int64_t i = 0; i < n; ++i) gb[i] += dfb(pa[i], pb[i], og[i]);
          } else if (nb == n) {
            for (int64_t r = 0; r < n / na; ++r)
              for (int64_t j = 0; j < na; ++j)
                gb[r * na + j] += dfb(pa[j], pb[r * na + j], og[r * na + j]);
          } else {
            for (int64_t r = 0; r < n / nb; ++r)
              for (int64_t j = 0; j < nb; ++j) gb[j] += dfb(pa[r * nb + j], pb[j], og[r * nb + j]);
          }
        }
      });
    };
  }
  return out;
}

template <typename Fwd, typename Dx>
Tensor unary_op(const Tensor& a, const char* op, Fwd fwd, Dx dfx) {
  Tensor out = make_node(a.shape(), a.dtype(), op, {a});
  const int64_t n = a.numel();
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    T* po = out.data<T>();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  });
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, oi, n, dfx]() {
      if (!ai->requires_grad) return;
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        ai->ensure_grad();
        const T* pa = ai->storage->data<T>();
        const T* po = oi->storage->data<T>();
        const T* og = oi->grad->data<T>();
        T* ga = ai->grad->data<T>();
        for (int64_t i = 0; i < n; ++i) ga[i] += dfx(pa[i], po[i], og[i]);
      });
    };
  }
  return out;
}

struct AxisSplit {
  int64_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("axis " + std::to_string(axis) + " invalid for shape " +
                                shape_str(s));
  AxisSplit sp{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) sp.outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](auto x, auto y) { return x + y; },
      [](auto, auto, auto g) { return g; }, [](auto, auto, auto g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](auto x, auto y) { return x - y; },
      [](auto, auto, auto g) { return g; }, [](auto, auto, auto g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](auto x, auto y) { return x * y; },
      [](auto, auto y, auto g) { return g * y; }, [](auto x, auto, auto g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](auto x, auto y) { return x / y; },
      [](auto, auto y, auto g) { return g / y; },
      [](auto x, auto y, auto g) { return -g * x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      a, "add_scalar", [s](auto x) { return x + decltype(x)(s); },
      [](auto, auto, auto g) { return g; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      a, "mul_scalar", [s](auto x) { return x * decltype(x)(s); },
      [s](auto, auto, auto g) { return g * decltype(g)(s); });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](auto x) { return x > 0 ? x : decltype(x)(0); },
      [](auto x, auto, auto g) { return x > 0 ? g : decltype(g)(0); });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid",
      [](auto x) {
        using T = decltype(x);
        return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      },
      [](auto, auto y, auto g) { return g * y * (1 - y); });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, "square", [](auto x) { return x * x; },
      [](auto x, auto, auto g) { return decltype(g)(2) * x * g; });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  Shape target = shape;
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < target.size(); ++i) {
    if (target[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: more than one inferred dim");
      infer = static_cast<int>(i);
    } else {
      known *= target[i];
    }
  }
  if (infer >= 0) target[infer] = a.numel() / known;
  if (shape_numel(target) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(target));
  Tensor out = make_node(target, a.dtype(), "reshape", {a});
  out.raw()->storage = a.impl()->storage;  // zero-copy view
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, oi]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const int64_t n = ai->numel();
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        T* ga = ai->grad->data<T>();
        for (int64_t i = 0; i < n; ++i) ga[i] += og[i];
      });
    };
  }
  return out;
}

Tensor permute(const Tensor& a, const std::vector<int>& dims) {
  const int nd = a.ndim();
  if (static_cast<int>(dims.size()) != nd)
    throw std::invalid_argument("permute: order size != rank");
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = a.dim(dims[i]);

  // row-major strides of the input
  std::vector<int64_t> in_strides(nd, 1);
  for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * a.dim(i + 1);
  std::vector<int64_t> gather(nd);
  for (int i = 0; i < nd; ++i) gather[i] = in_strides[dims[i]];

  Tensor out = make_node(out_shape, a.dtype(), "permute", {a});
  const int64_t n = a.numel();
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    T* po = out.data<T>();
    std::vector<int64_t> idx(nd, 0);
    for (int64_t i = 0; i < n; ++i) {
      int64_t src = 0;
      for (int d = 0; d < nd; ++d) src += idx[d] * gather[d];
      po[i] = pa[src];
      for (int d = nd - 1; d >= 0; --d) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
      }
    }
  });
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, oi, gather, out_shape, nd, n]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        T* ga = ai->grad->data<T>();
        std::vector<int64_t> idx(nd, 0);
        for (int64_t i = 0; i < n; ++i) {
          int64_t src = 0;
          for (int d = 0; d < nd; ++d) src += idx[d] * gather[d];
          ga[src] += og[i];
          for (int d = nd - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
          }
        }
      });
    };
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape base = parts[0].shape();
  if (axis < 0) axis += static_cast<int>(base.size());
  int64_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    for (size_t i = 0; i < base.size(); ++i)
      if (static_cast<int>(i) != axis && s[i] != base[i])
        throw std::invalid_argument("concat: shape " + shape_str(s) + " incompatible with " +
                                    shape_str(base));
    total += s[axis];
  }
  Shape out_shape = base;
  out_shape[axis] = total;
  std::vector<Tensor> parents = parts;
  Tensor out = make_node(out_shape, parts[0].dtype(), "concat", parents);

  const AxisSplit sp = split_axis(out_shape, axis);
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* po = out.data<T>();
    int64_t off = 0;
    for (const auto& p : parts) {
      const T* pp = p.data<T>();
      const int64_t len = p.shape()[axis];
      for (int64_t o = 0; o < sp.outer; ++o)
        std::memcpy(po + (o * sp.len + off) * sp.inner, pp + o * len * sp.inner,
                    sizeof(T) * static_cast<size_t>(len * sp.inner));
      off += len;
    }
  });
  if (out.requires_grad()) {
    auto oi = out.impl();
    std::vector<std::shared_ptr<TensorImpl>> pis;
    std::vector<int64_t> lens;
    for (const auto& p : parts) {
      pis.push_back(p.impl());
      lens.push_back(p.shape()[axis]);
    }
    out.raw()->backward_fn = [oi, pis, lens, sp]() {
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        int64_t off = 0;
        for (size_t pi = 0; pi < pis.size(); ++pi) {
          auto& par = pis[pi];
          const int64_t len = lens[pi];
          if (par->requires_grad) {
            par->ensure_grad();
            T* gp = par->grad->data<T>();
            for (int64_t o = 0; o < sp.outer; ++o) {
              const T* src = og + (o * sp.len + off) * sp.inner;
              T* dst = gp + o * len * sp.inner;
              for (int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
            }
          }
          off += len;
        }
      });
    };
  }
  return out;
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  Shape s = a.shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (start < 0 || len <= 0 || start + len > s[axis])
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") invalid for axis size " +
                                std::to_string(s[axis]));
  Shape out_shape = s;
  out_shape[axis] = len;
  Tensor out = make_node(out_shape, a.dtype(), "slice", {a});
  const AxisSplit sp = split_axis(s, axis);
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    T* po = out.data<T>();
    for (int64_t o = 0; o < sp.outer; ++o)
      std::memcpy(po + o * len * sp.inner, pa + (o * sp.len + start) * sp.inner,
                  sizeof(T) * static_cast<size_t>(len * sp.inner));
  });
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, oi, sp, start, len]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        T* ga = ai->grad->data<T>();
        for (int64_t o = 0; o < sp.outer; ++o) {
          const T* src = og + o * len * sp.inner;
          T* dst = ga + (o * sp.len + start) * sp.inner;
          for (int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
      });
    };
  }
  return out;
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (!is_suffix(shape, a.shape()))
    throw std::invalid_argument("broadcast_to: " + shape_str(a.shape()) + " is not a suffix of " +
                                shape_str(shape));
  Tensor out = make_node(shape, a.dtype(), "broadcast", {a});
  const int64_t n = out.numel(), na = a.numel();
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    T* po = out.data<T>();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i % na];
  });
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, oi, n, na]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        T* ga = ai->grad->data<T>();
        for (int64_t i = 0; i < n; ++i) ga[i % na] += og[i];
      });
    };
  }
  return out;
}

Tensor reduce_sum(const Tensor& a) {
  Tensor out = make_node({1}, a.dtype(), "sum", {a});
  const int64_t n = a.numel();
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(pa[i]);
    out.data<T>()[0] = static_cast<T>(acc);
  });
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, oi, n]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T g = oi->grad->data<T>()[0];
        T* ga = ai->grad->data<T>();
        for (int64_t i = 0; i < n; ++i) ga[i] += g;
      });
    };
  }
  return out;
}

Tensor reduce_mean(const Tensor& a) { return mul_scalar(reduce_sum(a), 1.0 / a.numel()); }

Tensor reduce_sum_axis(const Tensor& a, int axis) {
  const AxisSplit sp = split_axis(a.shape(), axis);
  if (axis < 0) axis += a.ndim();
  Shape out_shape;
  for (int i = 0; i < a.ndim(); ++i)
    if (i != axis) out_shape.push_back(a.dim(i));
  if (out_shape.empty()) out_shape = {1};
  Tensor out = make_node(out_shape, a.dtype(), "sum_axis", {a});
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    T* po = out.data<T>();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t in = 0; in < sp.inner; ++in) {
        double acc = 0.0;
        for (int64_t l = 0; l < sp.len; ++l) acc += static_cast<double>(pa[(o * sp.len + l) * sp.inner + in]);
        po[o * sp.inner + in] = static_cast<T>(acc);
      }
  });
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, oi, sp]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        T* ga = ai->grad->data<T>();
        for (int64_t o = 0; o < sp.outer; ++o)
          for (int64_t l = 0; l < sp.len; ++l)
            for (int64_t in = 0; in < sp.inner; ++in)
              ga[(o * sp.len + l) * sp.inner + in] += og[o * sp.inner + in];
      });
    };
  }
  return out;
}

Tensor reduce_mean_axis(const Tensor& a, int axis) {
  const int64_t len = a.dim(axis);
  return mul_scalar(reduce_sum_axis(a, axis), 1.0 / static_cast<double>(len));
}

// ---------------------------------------------------------------------------
// matmul

namespace {

struct BatchMap {
  Shape batch;                 // broadcast batch shape
  std::vector<int64_t> sa, sb; // per-dim batch strides into a/b (0 = broadcast)
  int64_t count() const { return shape_numel(batch); }
};

BatchMap broadcast_batches(const Shape& a, const Shape& b, const char* op) {
  const int ra = static_cast<int>(a.size()) - 2, rb = static_cast<int>(b.size()) - 2;
  const int r = std::max(ra, rb);
  BatchMap m;
  m.batch.resize(r);
  m.sa.resize(r);
  m.sb.resize(r);
  // strides of the pure batch part
  std::vector<int64_t> stra(ra, 1), strb(rb, 1);
  for (int i = ra - 2; i >= 0; --i) stra[i] = stra[i + 1] * a[i + 1];
  for (int i = rb - 2; i >= 0; --i) strb[i] = strb[i + 1] * b[i + 1];
  for (int i = 0; i < r; ++i) {
    const int ia = ra - r + i, ib = rb - r + i;
    const int64_t da = ia >= 0 ? a[ia] : 1;
    const int64_t db = ib >= 0 ? b[ib] : 1;
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument(std::string(op) + ": batch dims of " + shape_str(a) + " and " +
                                  shape_str(b) + " do not broadcast");
    m.batch[i] = std::max(da, db);
    m.sa[i] = (ia >= 0 && da != 1) ? stra[ia] : 0;
    m.sb[i] = (ib >= 0 && db != 1) ? strb[ib] : 0;
  }
  return m;
}

void batch_offsets(const BatchMap& m, std::vector<int64_t>& offa, std::vector<int64_t>& offb) {
  const int64_t cnt = m.count();
  offa.resize(cnt);
  offb.resize(cnt);
  const int r = static_cast<int>(m.batch.size());
  std::vector<int64_t> idx(r, 0);
  for (int64_t i = 0; i < cnt; ++i) {
    int64_t oa = 0, ob = 0;
    for (int d = 0; d < r; ++d) {
      oa += idx[d] * m.sa[d];
      ob += idx[d] * m.sb[d];
    }
    offa[i] = oa;
    offb[i] = ob;
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < m.batch[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "matmul");
  if (a.ndim() < 2 || b.ndim() < 2)
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int64_t m = a.dim(-2), k = a.dim(-1);
  const int64_t kb = b.dim(-2), n = b.dim(-1);
  if (k != kb)
    throw std::invalid_argument("matmul: inner dims disagree between " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));

  // Fast path: fold a's batch into rows when b is a plain matrix.
  if (b.ndim() == 2) {
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out = make_node(out_shape, a.dtype(), "matmul", {a, b});
    const int64_t rows = a.numel() / k;
    dispatch(a.dtype(), [&](auto tag) {
      using T = decltype(tag);
      gemm_f(false, false, rows, n, k, T(1), a.data<T>(), k, b.data<T>(), n, T(0), out.data<T>(), n);
    });
    if (out.requires_grad()) {
      auto ai = a.impl(), bi = b.impl(), oi = out.impl();
      out.raw()->backward_fn = [ai, bi, oi, rows, n, k]() {
        dispatch(oi->storage->dtype(), [&](auto tag) {
          using T = decltype(tag);
          const T* og = oi->grad->data<T>();
          if (ai->requires_grad) {
            ai->ensure_grad();
            gemm_f(false, true, rows, k, n, T(1), og, n, bi->storage->data<T>(), n, T(1),
                   ai->grad->data<T>(), k);
          }
          if (bi->requires_grad) {
            bi->ensure_grad();
            gemm_f(true, false, k, n, rows, T(1), ai->storage->data<T>(), k, og, n, T(1),
                   bi->grad->data<T>(), n);
          }
        });
      };
    }
    return out;
  }

  BatchMap map = broadcast_batches(a.shape(), b.shape(), "matmul");
  Shape out_shape = map.batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out = make_node(out_shape, a.dtype(), "matmul", {a, b});
  std::vector<int64_t> offa, offb;
  batch_offsets(map, offa, offb);
  const int64_t cnt = map.count();
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    const T* pb = b.data<T>();
    T* po = out.data<T>();
    for (int64_t i = 0; i < cnt; ++i)
      gemm_f(false, false, m, n, k, T(1), pa + offa[i] * m * k, k, pb + offb[i] * k * n, n, T(0),
             po + i * m * n, n);
  });
  if (out.requires_grad()) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, bi, oi, offa, offb, cnt, m, n, k]() {
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        const T* pa = ai->storage->data<T>();
        const T* pb = bi->storage->data<T>();
        if (ai->requires_grad) {
          ai->ensure_grad();
          T* ga = ai->grad->data<T>();
          for (int64_t i = 0; i < cnt; ++i)
            gemm_f(false, true, m, k, n, T(1), og + i * m * n, n, pb + offb[i] * k * n, n, T(1),
                   ga + offa[i] * m * k, k);
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          T* gb = bi->grad->data<T>();
          for (int64_t i = 0; i < cnt; ++i)
            gemm_f(true, false, k, n, m, T(1), pa + offa[i] * m * k, k, og + i * m * n, n, T(1),
                   gb + offb[i] * k * n, n);
        }
      });
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / layer_norm / masking

Tensor softmax(const Tensor& a, int axis) {
  const AxisSplit sp = split_axis(a.shape(), axis);
  Tensor out = make_node(a.shape(), a.dtype(), "softmax", {a});
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    T* po = out.data<T>();
    for (int64_t o = 0; o < sp.outer; ++o)
      for (int64_t in = 0; in < sp.inner; ++in) {
        const int64_t base = o * sp.len * sp.inner + in;
        T mx = pa[base];
        for (int64_t l = 1; l < sp.len; ++l) mx = std::max(mx, pa[base + l * sp.inner]);
        double denom = 0.0;
        for (int64_t l = 0; l < sp.len; ++l) {
          const T e = std::exp(pa[base + l * sp.inner] - mx);
          po[base + l * sp.inner] = e;
          denom += static_cast<double>(e);
        }
        for (int64_t l = 0; l < sp.len; ++l)
          po[base + l * sp.inner] = static_cast<T>(po[base + l * sp.inner] / denom);
      }
  });
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, oi, sp]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* y = oi->storage->data<T>();
        const T* og = oi->grad->data<T>();
        T* ga = ai->grad->data<T>();
        for (int64_t o = 0; o < sp.outer; ++o)
          for (int64_t in = 0; in < sp.inner; ++in) {
            const int64_t base = o * sp.len * sp.inner + in;
            double dot = 0.0;
            for (int64_t l = 0; l < sp.len; ++l)
              dot += static_cast<double>(og[base + l * sp.inner]) * y[base + l * sp.inner];
            for (int64_t l = 0; l < sp.len; ++l) {
              const int64_t i = base + l * sp.inner;
              ga[i] += y[i] * (og[i] - static_cast<T>(dot));
            }
          }
      });
    };
  }
  return out;
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  const int64_t L = a.dim(-1);
  if (gamma.numel() != L || beta.numel() != L)
    throw std::invalid_argument("layer_norm: gamma/beta size must match last dim " +
                                std::to_string(L));
  const int64_t rows = a.numel() / L;
  Tensor out = make_node(a.shape(), a.dtype(), "layer_norm", {a, gamma, beta});

  // saved normalized activations and reciprocal stds for backward
  auto xhat = std::make_shared<std::vector<double>>();
  auto rstd = std::make_shared<std::vector<double>>();
  const bool save = out.requires_grad();
  if (save) {
    xhat->resize(static_cast<size_t>(a.numel()));
    rstd->resize(static_cast<size_t>(rows));
  }

  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pa = a.data<T>();
    const T* pg = gamma.data<T>();
    const T* pb = beta.data<T>();
    T* po = out.data<T>();
    for (int64_t r = 0; r < rows; ++r) {
      const T* row = pa + r * L;
      double mean = 0.0;
      for (int64_t j = 0; j < L; ++j) mean += row[j];
      mean /= L;
      double var = 0.0;
      for (int64_t j = 0; j < L; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= L;
      const double rs = 1.0 / std::sqrt(var + eps);
      if (save) (*rstd)[r] = rs;
      for (int64_t j = 0; j < L; ++j) {
        const double xh = (row[j] - mean) * rs;
        if (save) (*xhat)[r * L + j] = xh;
        po[r * L + j] = static_cast<T>(xh * pg[j] + pb[j]);
      }
    }
  });

  if (out.requires_grad()) {
    auto ai = a.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    out.raw()->backward_fn = [ai, gi, bi, oi, xhat, rstd, rows, L]() {
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        const T* pg = gi->storage->data<T>();
        if (gi->requires_grad) gi->ensure_grad();
        if (bi->requires_grad) bi->ensure_grad();
        if (ai->requires_grad) ai->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          const T* dy = og + r * L;
          const double* xh = xhat->data() + r * L;
          if (gi->requires_grad) {
            T* gg = gi->grad->data<T>();
            for (int64_t j = 0; j < L; ++j) gg[j] += static_cast<T>(dy[j] * xh[j]);
          }
          if (bi->requires_grad) {
            T* gb = bi->grad->data<T>();
            for (int64_t j = 0; j < L; ++j) gb[j] += dy[j];
          }
          if (ai->requires_grad) {
            T* ga = ai->grad->data<T>() + r * L;
            double mean_g = 0.0, mean_gx = 0.0;
            for (int64_t j = 0; j < L; ++j) {
              const double g = static_cast<double>(dy[j]) * pg[j];
              mean_g += g;
              mean_gx += g * xh[j];
            }
            mean_g /= L;
            mean_gx /= L;
            const double rs = (*rstd)[r];
            for (int64_t j = 0; j < L; ++j) {
              const double g = static_cast<double>(dy[j]) * pg[j];
              ga[j] += static_cast<T>((g - mean_g - xh[j] * mean_gx) * rs);
            }
          }
        }
      });
    };
  }
  return out;
}

Tensor mask_pin(const Tensor& a, const Tensor& mask) {
  check_same_dtype(a, mask, "mask_pin");
  if (!is_suffix(a.shape(), mask.shape()))
    throw std::invalid_argument("mask_pin: mask " + shape_str(mask.shape()) +
                                " is not a suffix of " + shape_str(a.shape()));
  Tensor out = make_node(a.shape(), a.dtype(), "mask_pin", {a});
  const int64_t n = a.numel(), nm = mask.numel();
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T low = std::numeric_limits<T>::lowest();
    const T* pa = a.data<T>();
    const T* pm = mask.data<T>();
    T* po = out.data<T>();
    if (nm == n)
      for (int64_t i = 0; i < n; ++i) po[i] = pm[i] < 0 ? low : pa[i];
    else
      for (int64_t i = 0; i < n; ++i) po[i] = pm[i % nm] < 0 ? low : pa[i];
  });
  if (out.requires_grad()) {
    auto ai = a.impl(), oi = out.impl();
    auto mi = mask.impl();
    out.raw()->backward_fn = [ai, mi, oi, n, nm]() {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pm = mi->storage->data<T>();
        const T* og = oi->grad->data<T>();
        T* ga = ai->grad->data<T>();
        if (nm == n) {
          for (int64_t i = 0; i < n; ++i)
            if (!(pm[i] < 0)) ga[i] += og[i];
        } else {
          for (int64_t i = 0; i < n; ++i)
            if (!(pm[i % nm] < 0)) ga[i] += og[i];
        }
      });
    };
  }
  return out;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const std::optional<Tensor>& additive_mask, int heads) {
  if (q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3)
    throw std::invalid_argument("attention: q/k/v must be [B,L,D]");
  const int64_t B = q.dim(0), Lq = q.dim(1), D = q.dim(2);
  const int64_t Lk = k.dim(1);
  if (D % heads != 0)
    throw std::invalid_argument("attention: feature dim " + std::to_string(D) +
                                " not divisible by " + std::to_string(heads) + " heads");
  if (k.dim(0) != B || v.dim(0) != B || k.dim(2) != D || v.dim(2) != D || v.dim(1) != Lk)
    throw std::invalid_argument("attention: shapes " + shape_str(q.shape()) + ", " +
                                shape_str(k.shape()) + ", " + shape_str(v.shape()) +
                                " are inconsistent");
  const int64_t dh = D / heads;

  Tensor qh = permute(reshape(q, {B, Lq, heads, dh}), {0, 2, 1, 3});
  Tensor kt = permute(reshape(k, {B, Lk, heads, dh}), {0, 2, 3, 1});
  Tensor vh = permute(reshape(v, {B, Lk, heads, dh}), {0, 2, 1, 3});
  Tensor scores = mul_scalar(matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (additive_mask) {
    const Tensor& m = *additive_mask;
    if (m.ndim() != 3 || m.dim(0) != B || m.dim(1) != Lq || m.dim(2) != Lk)
      throw std::invalid_argument("attention: mask must be [B,Lq,Lk], got " +
                                  shape_str(m.shape()));
    // expand over heads; the mask is a constant
    Tensor expanded = Tensor::zeros({B, heads, Lq, Lk}, q.dtype());
    dispatch(q.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const T* pm = m.data<T>();
      T* pe = expanded.data<T>();
      for (int64_t b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
          std::memcpy(pe + ((b * heads + h) * Lq * Lk), pm + b * Lq * Lk,
                      sizeof(T) * static_cast<size_t>(Lq * Lk));
    });
    scores = mask_pin(scores, expanded);
  }
  Tensor attn = softmax(scores, 3);
  Tensor out = matmul(attn, vh);
  return reshape(permute(out, {0, 2, 1, 3}), {B, Lq, D});
}

// ---------------------------------------------------------------------------
// convolutions

namespace {

struct ConvGeom {
  int64_t B, C, H, W, OC, KH, KW, OH, OW;
  int stride, pad;
};

template <typename T>
void im2col2d(const T* x, const ConvGeom& g, T* col) {
  // col: [C*KH*KW, OH*OW]
  const int64_t ohw = g.OH * g.OW;
  for (int64_t c = 0; c < g.C; ++c)
    for (int64_t kh = 0; kh < g.KH; ++kh)
      for (int64_t kw = 0; kw < g.KW; ++kw) {
        T* dst = col + ((c * g.KH + kh) * g.KW + kw) * ohw;
        for (int64_t oh = 0; oh < g.OH; ++oh) {
          const int64_t ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.H) {
            std::fill(dst + oh * g.OW, dst + (oh + 1) * g.OW, T(0));
            continue;
          }
          const T* src = x + (c * g.H + ih) * g.W;
          for (int64_t ow = 0; ow < g.OW; ++ow) {
            const int64_t iw = ow * g.stride - g.pad + kw;
            dst[oh * g.OW + ow] = (iw < 0 || iw >= g.W) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im2d(const T* col, const ConvGeom& g, T* x) {
  const int64_t ohw = g.OH * g.OW;
  for (int64_t c = 0; c < g.C; ++c)
    for (int64_t kh = 0; kh < g.KH; ++kh)
      for (int64_t kw = 0; kw < g.KW; ++kw) {
        const T* src = col + ((c * g.KH + kh) * g.KW + kw) * ohw;
        for (int64_t oh = 0; oh < g.OH; ++oh) {
          const int64_t ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.H) continue;
          T* dst = x + (c * g.H + ih) * g.W;
          for (int64_t ow = 0; ow < g.OW; ++ow) {
            const int64_t iw = ow * g.stride - g.pad + kw;
            if (iw >= 0 && iw < g.W) dst[iw] += src[oh * g.OW + ow];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, int stride,
              int padding) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw std::invalid_argument("conv2d: expected x [B,C,H,W] and w [OC,C,KH,KW], got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  ConvGeom g;
  g.B = x.dim(0);
  g.C = x.dim(1);
  g.H = x.dim(2);
  g.W = x.dim(3);
  g.OC = w.dim(0);
  g.KH = w.dim(2);
  g.KW = w.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (w.dim(1) != g.C)
    throw std::invalid_argument("conv2d: channel mismatch between " + shape_str(x.shape()) +
                                " and " + shape_str(w.shape()));
  g.OH = (g.H + 2 * padding - g.KH) / stride + 1;
  g.OW = (g.W + 2 * padding - g.KW) / stride + 1;
  if (g.OH <= 0 || g.OW <= 0 || g.KH > g.H + 2 * padding || g.KW > g.W + 2 * padding)
    throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape()) +
                                " does not fit input " + shape_str(x.shape()));
  if (bias && bias->numel() != g.OC)
    throw std::invalid_argument("conv2d: bias size must equal out channels");

  std::vector<Tensor> parents{x, w};
  if (bias) parents.push_back(*bias);
  Tensor out = make_node({g.B, g.OC, g.OH, g.OW}, x.dtype(), "conv2d", parents);

  const int64_t K = g.C * g.KH * g.KW;
  const int64_t ohw = g.OH * g.OW;
  // saved column buffers, one per batch element
  auto cols = std::make_shared<Storage>(x.dtype(), out.requires_grad() ? g.B * K * ohw : K * ohw);

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    const T* pw = w.data<T>();
    T* po = out.data<T>();
    T* pc = cols->data<T>();
    const bool keep = out.requires_grad();
    for (int64_t b = 0; b < g.B; ++b) {
      T* col = keep ? pc + b * K * ohw : pc;
      im2col2d(px + b * g.C * g.H * g.W, g, col);
      gemm_f(false, false, g.OC, ohw, K, T(1), pw, K, col, ohw, T(0), po + b * g.OC * ohw, ohw);
    }
    if (bias) {
      const T* pb = bias->data<T>();
      for (int64_t b = 0; b < g.B; ++b)
        for (int64_t oc = 0; oc < g.OC; ++oc) {
          T* dst = po + (b * g.OC + oc) * ohw;
          const T bv = pb[oc];
          for (int64_t i = 0; i < ohw; ++i) dst[i] += bv;
        }
    }
  });

  if (out.requires_grad()) {
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    std::shared_ptr<TensorImpl> bi = bias ? bias->impl() : nullptr;
    out.raw()->backward_fn = [xi, wi, bi, oi, g, K, ohw, cols]() {
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        const T* pc = cols->data<T>();
        if (wi->requires_grad) {
          wi->ensure_grad();
          T* gw = wi->grad->data<T>();
          for (int64_t b = 0; b < g.B; ++b)
            gemm_f(false, true, g.OC, K, ohw, T(1), og + b * g.OC * ohw, ohw, pc + b * K * ohw,
                   ohw, T(1), gw, K);
        }
        if (bi && bi->requires_grad) {
          bi->ensure_grad();
          T* gb = bi->grad->data<T>();
          for (int64_t b = 0; b < g.B; ++b)
            for (int64_t oc = 0; oc < g.OC; ++oc) {
              const T* src = og + (b * g.OC + oc) * ohw;
              double acc = 0.0;
              for (int64_t i = 0; i < ohw; ++i) acc += src[i];
              gb[oc] += static_cast<T>(acc);
            }
        }
        if (xi->requires_grad) {
          xi->ensure_grad();
          T* gx = xi->grad->data<T>();
          const T* pw = wi->storage->data<T>();
          std::vector<T> dcol(static_cast<size_t>(K * ohw));
          for (int64_t b = 0; b < g.B; ++b) {
            gemm_f(true, false, K, ohw, g.OC, T(1), pw, K, og + b * g.OC * ohw, ohw, T(0),
                   dcol.data(), ohw);
            col2im2d(dcol.data(), g, gx + b * g.C * g.H * g.W);
          }
        }
      });
    };
  }
  return out;
}

namespace {

struct Conv3Geom {
  int64_t B, C, Dp, H, W, OC, KD, KH, KW, OD, OH, OW;
  int stride, pad;
};

template <typename T>
void im2col3d(const T* x, const Conv3Geom& g, T* col) {
  // col: [C*KD*KH*KW, OD*OH*OW]
  const int64_t on = g.OD * g.OH * g.OW;
  int64_t row = 0;
  for (int64_t c = 0; c < g.C; ++c)
    for (int64_t kd = 0; kd < g.KD; ++kd)
      for (int64_t kh = 0; kh < g.KH; ++kh)
        for (int64_t kw = 0; kw < g.KW; ++kw, ++row) {
          T* dst = col + row * on;
          int64_t o = 0;
          for (int64_t od = 0; od < g.OD; ++od) {
            const int64_t id = od * g.stride - g.pad + kd;
            for (int64_t oh = 0; oh < g.OH; ++oh) {
              const int64_t ih = oh * g.stride - g.pad + kh;
              for (int64_t ow = 0; ow < g.OW; ++ow, ++o) {
                const int64_t iw = ow * g.stride - g.pad + kw;
                dst[o] = (id < 0 || id >= g.Dp || ih < 0 || ih >= g.H || iw < 0 || iw >= g.W)
                             ? T(0)
                             : x[((c * g.Dp + id) * g.H + ih) * g.W + iw];
              }
            }
          }
        }
}

template <typename T>
void col2im3d(const T* col, const Conv3Geom& g, T* x) {
  const int64_t on = g.OD * g.OH * g.OW;
  int64_t row = 0;
  for (int64_t c = 0; c < g.C; ++c)
    for (int64_t kd = 0; kd < g.KD; ++kd)
      for (int64_t kh = 0; kh < g.KH; ++kh)
        for (int64_t kw = 0; kw < g.KW; ++kw, ++row) {
          const T* src = col + row * on;
          int64_t o = 0;
          for (int64_t od = 0; od < g.OD; ++od) {
            const int64_t id = od * g.stride - g.pad + kd;
            for (int64_t oh = 0; oh < g.OH; ++oh) {
              const int64_t ih = oh * g.stride - g.pad + kh;
              for (int64_t ow = 0; ow < g.OW; ++ow, ++o) {
                const int64_t iw = ow * g.stride - g.pad + kw;
                if (id >= 0 && id < g.Dp && ih >= 0 && ih < g.H && iw >= 0 && iw < g.W)
                  x[((c * g.Dp + id) * g.H + ih) * g.W + iw] += src[o];
              }
            }
          }
        }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias, int stride,
              int padding) {
  if (x.ndim() != 5 || w.ndim() != 5)
    throw std::invalid_argument("conv3d: expected x [B,C,D,H,W] and w [OC,C,KD,KH,KW], got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  Conv3Geom g;
  g.B = x.dim(0);
  g.C = x.dim(1);
  g.Dp = x.dim(2);
  g.H = x.dim(3);
  g.W = x.dim(4);
  g.OC = w.dim(0);
  g.KD = w.dim(2);
  g.KH = w.dim(3);
  g.KW = w.dim(4);
  g.stride = stride;
  g.pad = padding;
  if (w.dim(1) != g.C)
    throw std::invalid_argument("conv3d: channel mismatch between " + shape_str(x.shape()) +
                                " and " + shape_str(w.shape()));
  g.OD = (g.Dp + 2 * padding - g.KD) / stride + 1;
  g.OH = (g.H + 2 * padding - g.KH) / stride + 1;
  g.OW = (g.W + 2 * padding - g.KW) / stride + 1;
  if (g.OD <= 0 || g.OH <= 0 || g.OW <= 0)
    throw std::invalid_argument("conv3d: kernel " + shape_str(w.shape()) +
                                " does not fit input " + shape_str(x.shape()));
  if (bias && bias->numel() != g.OC)
    throw std::invalid_argument("conv3d: bias size must equal out channels");

  std::vector<Tensor> parents{x, w};
  if (bias) parents.push_back(*bias);
  Tensor out = make_node({g.B, g.OC, g.OD, g.OH, g.OW}, x.dtype(), "conv3d", parents);

  const int64_t K = g.C * g.KD * g.KH * g.KW;
  const int64_t on = g.OD * g.OH * g.OW;
  auto cols = std::make_shared<Storage>(x.dtype(), out.requires_grad() ? g.B * K * on : K * on);

  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>();
    const T* pw = w.data<T>();
    T* po = out.data<T>();
    T* pc = cols->data<T>();
    const bool keep = out.requires_grad();
    for (int64_t b = 0; b < g.B; ++b) {
      T* col = keep ? pc + b * K * on : pc;
      im2col3d(px + b * g.C * g.Dp * g.H * g.W, g, col);
      gemm_f(false, false, g.OC, on, K, T(1), pw, K, col, on, T(0), po + b * g.OC * on, on);
    }
    if (bias) {
      const T* pb = bias->data<T>();
      for (int64_t b = 0; b < g.B; ++b)
        for (int64_t oc = 0; oc < g.OC; ++oc) {
          T* dst = po + (b * g.OC + oc) * on;
          const T bv = pb[oc];
          for (int64_t i = 0; i < on; ++i) dst[i] += bv;
        }
    }
  });

  if (out.requires_grad()) {
    auto xi = x.impl(), wi = w.impl(), oi = out.impl();
    std::shared_ptr<TensorImpl> bi = bias ? bias->impl() : nullptr;
    out.raw()->backward_fn = [xi, wi, bi, oi, g, K, on, cols]() {
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        const T* pc = cols->data<T>();
        if (wi->requires_grad) {
          wi->ensure_grad();
          T* gw = wi->grad->data<T>();
          for (int64_t b = 0; b < g.B; ++b)
            gemm_f(false, true, g.OC, K, on, T(1), og + b * g.OC * on, on, pc + b * K * on, on,
                   T(1), gw, K);
        }
        if (bi && bi->requires_grad) {
          bi->ensure_grad();
          T* gb = bi->grad->data<T>();
          for (int64_t b = 0; b < g.B; ++b)
            for (int64_t oc = 0; oc < g.OC; ++oc) {
              const T* src = og + (b * g.OC + oc) * on;
              double acc = 0.0;
              for (int64_t i = 0; i < on; ++i) acc += src[i];
              gb[oc] += static_cast<T>(acc);
            }
        }
        if (xi->requires_grad) {
          xi->ensure_grad();
          T* gx = xi->grad->data<T>();
          const T* pw = wi->storage->data<T>();
          std::vector<T> dcol(static_cast<size_t>(K * on));
          for (int64_t b = 0; b < g.B; ++b) {
            gemm_f(true, false, K, on, g.OC, T(1), pw, K, og + b * g.OC * on, on, T(0),
                   dcol.data(), on);
            col2im3d(dcol.data(), g, gx + b * g.C * g.Dp * g.H * g.W);
          }
        }
      });
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear sampling

Tensor bilinear_sample(const Tensor& feature_map, const std::vector<std::array<double, 2>>& points) {
  if (feature_map.ndim() != 3)
    throw std::invalid_argument("bilinear_sample: feature map must be [C,H,W], got " +
                                shape_str(feature_map.shape()));
  const int64_t C = feature_map.dim(0), H = feature_map.dim(1), W = feature_map.dim(2);
  const int64_t N = static_cast<int64_t>(points.size());
  Tensor out = make_node({std::max<int64_t>(N, 1), C}, feature_map.dtype(), "bilinear_sample",
                         {feature_map});
  if (N == 0) return out;

  struct Tap {
    int64_t i00, i01, i10, i11;
    double w00, w01, w10, w11;
  };
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<size_t>(N));
  for (int64_t n = 0; n < N; ++n) {
    double x = std::clamp(points[n][0], 0.0, static_cast<double>(W - 1));
    double y = std::clamp(points[n][1], 0.0, static_cast<double>(H - 1));
    int64_t x0 = static_cast<int64_t>(std::floor(x));
    int64_t y0 = static_cast<int64_t>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    const int64_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    Tap& t = (*taps)[n];
    t.i00 = y0 * W + x0;
    t.i01 = y0 * W + x1;
    t.i10 = y1 * W + x0;
    t.i11 = y1 * W + x1;
    t.w00 = (1 - fx) * (1 - fy);
    t.w01 = fx * (1 - fy);
    t.w10 = (1 - fx) * fy;
    t.w11 = fx * fy;
  }

  dispatch(feature_map.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* pf = feature_map.data<T>();
    T* po = out.data<T>();
    const int64_t hw = H * W;
    for (int64_t n = 0; n < N; ++n) {
      const Tap& t = (*taps)[n];
      for (int64_t c = 0; c < C; ++c) {
        const T* fc = pf + c * hw;
        po[n * C + c] = static_cast<T>(t.w00 * fc[t.i00] + t.w01 * fc[t.i01] + t.w10 * fc[t.i10] +
                                       t.w11 * fc[t.i11]);
      }
    }
  });

  if (out.requires_grad()) {
    auto fi = feature_map.impl(), oi = out.impl();
    out.raw()->backward_fn = [fi, oi, taps, C, H, W, N]() {
      if (!fi->requires_grad) return;
      fi->ensure_grad();
      dispatch(oi->storage->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* og = oi->grad->data<T>();
        T* gf = fi->grad->data<T>();
        const int64_t hw = H * W;
        for (int64_t n = 0; n < N; ++n) {
          const Tap& t = (*taps)[n];
          for (int64_t c = 0; c < C; ++c) {
            const T g = og[n * C + c];
            T* fc = gf + c * hw;
            fc[t.i00] += static_cast<T>(t.w00 * g);
            fc[t.i01] += static_cast<T>(t.w01 * g);
            fc[t.i10] += static_cast<T>(t.w10 * g);
            fc[t.i11] += static_cast<T>(t.w11 * g);
          }
        }
      });
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// losses

Tensor bce_with_probs(const Tensor& probs, const Tensor& targets) {
  constexpr double kEps = 1e-7;
  return binary_op(
      probs, targets, "bce",
      [](auto p, auto y) {
        using T = decltype(p);
        const T pc = std::clamp(p, T(kEps), T(1.0 - kEps));
        return -(y * std::log(pc) + (1 - y) * std::log(1 - pc));
      },
      [](auto p, auto y, auto g) {
        using T = decltype(p);
        if (p < T(kEps) || p > T(1.0 - kEps)) return T(0);  // clamped region
        return g * (p - y) / (p * (1 - p));
      },
      [](auto p, auto, auto) { return decltype(p)(0); });
}

Tensor huber(const Tensor& pred, const Tensor& target, double delta) {
  return binary_op(
      pred, target, "huber",
      [delta](auto p, auto t) {
        using T = decltype(p);
        const T e = p - t;
        const T a = std::abs(e);
        return a <= T(delta) ? T(0.5) * e * e : T(delta) * (a - T(0.5) * T(delta));
      },
      [delta](auto p, auto t, auto g) {
        using T = decltype(p);
        const T e = p - t;
        const T d = std::abs(e) <= T(delta) ? e : (e > 0 ? T(delta) : T(-delta));
        return g * d;
      },
      [delta](auto p, auto t, auto g) {
        using T = decltype(p);
        const T e = p - t;
        const T d = std::abs(e) <= T(delta) ? e : (e > 0 ? T(delta) : T(-delta));
        return -g * d;
      });
}

// ---------------------------------------------------------------------------
// constants / init

Tensor constant_like(const Tensor& a, double v) { return Tensor::full(a.shape(), v, a.dtype()); }

Tensor randn(const Shape& shape, Dtype dt, Rng& rng, double mean, double stddev) {
  Tensor t = Tensor::zeros(shape, dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set_value(i, rng.normal(mean, stddev));
  return t;
}

Tensor uniform(const Shape& shape, Dtype dt, Rng& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(shape, dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set_value(i, rng.uniform(lo, hi));
  return t;
}

}  // namespace mixri::ops
