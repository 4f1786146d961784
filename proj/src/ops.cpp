#include "ega/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>

namespace ega {

namespace {

std::atomic<std::uint64_t> g_all_masked_rows{0};

// Broadcast layout of a binary op: per output axis, the stride into each operand
// (0 where that operand is broadcast).
struct BroadcastPlan {
  enum class Kind { kSame, kScalarA, kScalarB, kSuffixB, kGeneral };
  Kind kind = Kind::kGeneral;
  Shape out;
  Shape stride_a;
  Shape stride_b;
};

Shape padded_strides(const Shape& shape, const Shape& out) {
  const std::size_t offset = out.size() - shape.size();
  const Shape own = strides_of(shape);
  Shape s(out.size(), 0);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    s[offset + i] = shape[i] == 1 ? 0 : own[i];
  }
  return s;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.out = broadcast_shapes(a, b);
  const std::size_t na = shape_numel(a);
  const std::size_t nb = shape_numel(b);
  const std::size_t nout = shape_numel(plan.out);
  if (a == b) {
    plan.kind = BroadcastPlan::Kind::kSame;
  } else if (nb == 1 && na == nout) {
    plan.kind = BroadcastPlan::Kind::kScalarB;
  } else if (na == 1 && nb == nout) {
    plan.kind = BroadcastPlan::Kind::kScalarA;
  } else if (na == nout && b.size() <= a.size() &&
             std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    plan.kind = BroadcastPlan::Kind::kSuffixB;
  } else {
    plan.kind = BroadcastPlan::Kind::kGeneral;
  }
  plan.stride_a = padded_strides(a, plan.out);
  plan.stride_b = padded_strides(b, plan.out);
  return plan;
}

// Calls f(i, ia, ib) for every output element i in row-major order.
template <typename F>
void for_each_broadcast(const BroadcastPlan& plan, std::size_t nb, F&& f) {
  const std::size_t n = shape_numel(plan.out);
  switch (plan.kind) {
    case BroadcastPlan::Kind::kSame:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    case BroadcastPlan::Kind::kScalarB:
      for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
      return;
    case BroadcastPlan::Kind::kScalarA:
      for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
      return;
    case BroadcastPlan::Kind::kSuffixB:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i % nb);
      return;
    case BroadcastPlan::Kind::kGeneral:
      break;
  }
  const std::size_t rank = plan.out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += plan.stride_a[ax];
      ib += plan.stride_b[ax];
      if (idx[ax] < plan.out[ax]) break;
      ia -= plan.stride_a[ax] * plan.out[ax];
      ib -= plan.stride_b[ax] * plan.out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename S, typename F, typename DA, typename DB>
Var<S> binary(const Var<S>& a, const Var<S>& b, F f, DA da, DB db) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape());
  const NdArray<S>& av = a.value();
  const NdArray<S>& bv = b.value();
  NdArray<S> out(plan.out);
  for_each_broadcast(plan, bv.numel(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = f(av[ia], bv[ib]);
  });
  return make_result<S>(std::move(out), {&a, &b}, [a, b, plan, da, db](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* ga = t.grad_buffer(a);
    NdArray<S>* gb = t.grad_buffer(b);
    const NdArray<S>& av = a.value();
    const NdArray<S>& bv = b.value();
    for_each_broadcast(plan, bv.numel(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += da(av[ia], bv[ib], g[i]);
      if (gb) (*gb)[ib] += db(av[ia], bv[ib], g[i]);
    });
  });
}

// y = f(x); dx = df(x, y) * g
template <typename S, typename F, typename DF>
Var<S> unary(const Var<S>& x, F f, DF df) {
  const NdArray<S>& xv = x.value();
  auto out = std::make_shared<NdArray<S>>(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) (*out)[i] = f(xv[i]);
  std::shared_ptr<const NdArray<S>> y = out;
  return make_result<S>(y, {&x}, [x, y, df](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* gx = t.grad_buffer(x);
    const NdArray<S>& xv = x.value();
    for (std::size_t i = 0; i < xv.numel(); ++i) (*gx)[i] += df(xv[i], (*y)[i]) * g[i];
  });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

std::uint64_t softmax_all_masked_rows() { return g_all_masked_rows.load(); }

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

std::ptrdiff_t pad_source_index(std::ptrdiff_t pos, std::size_t n, PadMode mode) {
  if (pos >= 0) return pos;
  switch (mode) {
    case PadMode::kZero:
      return -1;
    case PadMode::kEdge:
      return 0;
    case PadMode::kReflect: {
      if (n <= 1) return 0;
      const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
      std::ptrdiff_t m = (-pos) % period;
      if (m >= static_cast<std::ptrdiff_t>(n)) m = period - m;
      return m;
    }
    case PadMode::kValid:
      break;
  }
  throw ContractError("pad_source_index: no left extension in valid mode");
}

// ---- elementwise ------------------------------------------------------------------------

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  return binary(
      a, b, [](S x, S y) { return x + y; }, [](S, S, S g) { return g; }, [](S, S, S g) { return g; });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  return binary(
      a, b, [](S x, S y) { return x - y; }, [](S, S, S g) { return g; }, [](S, S, S g) { return -g; });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  return binary(
      a, b, [](S x, S y) { return x * y; }, [](S, S y, S g) { return g * y; },
      [](S x, S, S g) { return g * x; });
}

template <typename S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
  return binary(
      a, b, [](S x, S y) { return x / y; }, [](S, S y, S g) { return g / y; },
      [](S x, S y, S g) { return -g * x / (y * y); });
}

template <typename S>
Var<S> scale(const Var<S>& x, S factor) {
  return unary(x, [factor](S v) { return v * factor; }, [factor](S, S) { return factor; });
}

template <typename S>
Var<S> add_scalar(const Var<S>& x, S c) {
  return unary(x, [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

template <typename S>
Var<S> neg(const Var<S>& x) {
  return scale(x, S(-1));
}

template <typename S>
Var<S> square(const Var<S>& x) {
  return unary(x, [](S v) { return v * v; }, [](S v, S) { return S(2) * v; });
}

template <typename S>
Var<S> exp(const Var<S>& x) {
  return unary(x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
Var<S> log(const Var<S>& x) {
  return unary(x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  return unary(
      x,
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
  constexpr S c = S(0.7978845608028654);  // sqrt(2 / pi)
  constexpr S k = S(0.044715);
  return unary(
      x, [](S v) { return S(0.5) * v * (S(1) + std::tanh(c * (v + k * v * v * v))); },
      [](S v, S) {
        const S u = c * (v + k * v * v * v);
        const S th = std::tanh(u);
        const S du = c * (S(1) + S(3) * k * v * v);
        return S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * du;
      });
}

// ---- reductions -------------------------------------------------------------------------

template <typename S>
Var<S> sum(const Var<S>& x) {
  double acc = 0.0;
  for (S v : x.value().values()) acc += static_cast<double>(v);
  return make_result<S>(NdArray<S>::scalar(static_cast<S>(acc)), {&x}, [x](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* gx = t.grad_buffer(x);
    gx->array() += g[0];
  });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

template <typename S>
Var<S> sum_axis(const Var<S>& x, int axis) {
  const std::size_t ax = x.value().normalize_axis(axis);
  const AxisSplit sp = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  NdArray<S> out(out_shape);
  const NdArray<S>& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.n; ++k) {
      const S* src = xv.data() + (o * sp.n + k) * sp.inner;
      S* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  return make_result<S>(std::move(out), {&x}, [x, sp](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* gx = t.grad_buffer(x);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t k = 0; k < sp.n; ++k) {
        S* dst = gx->data() + (o * sp.n + k) * sp.inner;
        const S* src = g.data() + o * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename S>
Var<S> mean_axis(const Var<S>& x, int axis) {
  const std::size_t n = x.dim(axis);
  return scale(sum_axis(x, axis), S(1) / static_cast<S>(n));
}

// ---- shape ------------------------------------------------------------------------------

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  NdArray<S> out = x.value().reshaped(std::move(shape));
  return make_result<S>(std::move(out), {&x}, [x](Tape<S>& t, const NdArray<S>& g) {
    t.accumulate(x, g.reshaped(x.shape()));
  });
}

template <typename S>
Var<S> permute(const Var<S>& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  if (axes.size() != in.size()) {
    throw ContractError("permute: " + std::to_string(axes.size()) + " axes for shape " + shape_str(in));
  }
  std::vector<bool> seen(in.size(), false);
  Shape out_shape(in.size());
  const Shape in_strides = strides_of(in);
  Shape gather(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || seen[axes[i]]) throw ContractError("permute: invalid axes");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
    gather[i] = in_strides[axes[i]];
  }
  // index map: out flat i -> in flat src[i]
  auto src = std::make_shared<std::vector<std::size_t>>(shape_numel(in));
  {
    const std::size_t rank = in.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < src->size(); ++i) {
      (*src)[i] = off;
      for (std::size_t ax = rank; ax-- > 0;) {
        ++idx[ax];
        off += gather[ax];
        if (idx[ax] < out_shape[ax]) break;
        off -= gather[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  }
  NdArray<S> out(out_shape);
  const NdArray<S>& xv = x.value();
  for (std::size_t i = 0; i < src->size(); ++i) out[i] = xv[(*src)[i]];
  return make_result<S>(std::move(out), {&x}, [x, src](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < src->size(); ++i) (*gx)[(*src)[i]] += g[i];
  });
}

template <typename S>
Var<S> transpose(const Var<S>& x) {
  if (x.rank() < 2) throw ContractError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

template <typename S>
Var<S> slice(const Var<S>& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = x.value().normalize_axis(axis);
  const AxisSplit sp = split_axis(x.shape(), ax);
  if (begin > end || end > sp.n) {
    throw ContractError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                        ") out of range for axis of length " + std::to_string(sp.n));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  NdArray<S> out(out_shape);
  const std::size_t len = (end - begin) * sp.inner;
  const NdArray<S>& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.data() + (o * sp.n + begin) * sp.inner, len, out.data() + o * len);
  }
  return make_result<S>(std::move(out), {&x}, [x, sp, begin, len](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* gx = t.grad_buffer(x);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      S* dst = gx->data() + (o * sp.n + begin) * sp.inner;
      const S* src = g.data() + o * len;
      for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
    }
  });
}

template <typename S>
Var<S> stack(const std::vector<Var<S>>& xs, int axis) {
  if (xs.empty()) throw ContractError("stack of zero values");
  const Shape& elem = xs.front().shape();
  for (const Var<S>& x : xs) {
    if (x.shape() != elem) {
      throw DimensionError("stack: shape " + shape_str(x.shape()) + " vs " + shape_str(elem));
    }
  }
  const int rank = static_cast<int>(elem.size()) + 1;
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ContractError("stack: axis out of range");
  const auto ax = static_cast<std::size_t>(a);
  std::size_t outer = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= elem[i];
  const std::size_t inner = shape_numel(elem) / outer;
  Shape out_shape = elem;
  out_shape.insert(out_shape.begin() + a, xs.size());
  NdArray<S> out(out_shape);
  const std::size_t n = xs.size();
  for (std::size_t s = 0; s < n; ++s) {
    const NdArray<S>& xv = xs[s].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(xv.data() + o * inner, inner, out.data() + (o * n + s) * inner);
    }
  }
  auto value = std::make_shared<const NdArray<S>>(std::move(out));
  auto fn = [xs, outer, inner](Tape<S>& t, const NdArray<S>& g) {
    const std::size_t n = xs.size();
    for (std::size_t s = 0; s < n; ++s) {
      NdArray<S>* gx = t.grad_buffer(xs[s]);
      if (!gx) continue;
      for (std::size_t o = 0; o < outer; ++o) {
        const S* src = g.data() + (o * n + s) * inner;
        S* dst = gx->data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  };
  Tape<S>* tape = nullptr;
  for (const Var<S>& x : xs) {
    if (x.tracked()) {
      if (tape && tape != x.tape()) throw ContractError("operands recorded on different tapes");
      tape = x.tape();
    }
  }
  if (!tape) return Var<S>(std::move(value), nullptr, -1);
  return tape->record(std::move(value), std::move(fn));
}

// ---- linear algebra ---------------------------------------------------------------------

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t kb = bs[bs.size() - 2];
  const std::size_t n = bs.back();
  if (k != kb) throw mismatch();

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);

  if (bs.size() == 2) {
    // shared right operand: one GEMM over all leading rows
    const std::size_t rows = a.numel() / k;
    NdArray<S> out(out_shape);
    out.matrix(rows, n).noalias() = a.value().matrix(rows, k) * b.value().matrix(k, n);
    return make_result<S>(std::move(out), {&a, &b}, [a, b, rows, k, n](Tape<S>& t, const NdArray<S>& g) {
      const auto gm = g.matrix(rows, n);
      if (NdArray<S>* ga = t.grad_buffer(a)) {
        ga->matrix(rows, k).noalias() += gm * b.value().matrix(k, n).transpose();
      }
      if (NdArray<S>* gb = t.grad_buffer(b)) {
        gb->matrix(k, n).noalias() += a.value().matrix(rows, k).transpose() * gm;
      }
    });
  }

  if (as.size() != bs.size() || !std::equal(as.begin(), as.end() - 2, bs.begin())) throw mismatch();
  const std::size_t batch = a.numel() / (m * k);
  NdArray<S> out(out_shape);
  using Map = typename NdArray<S>::ConstMatrixMap;
  using MutMap = typename NdArray<S>::MatrixMap;
  auto im = [](Eigen::Index v) { return v; };
  const auto M = im(static_cast<Eigen::Index>(m));
  const auto K = im(static_cast<Eigen::Index>(k));
  const auto N = im(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < batch; ++i) {
    MutMap(out.data() + i * m * n, M, N).noalias() =
        Map(a.value().data() + i * m * k, M, K) * Map(b.value().data() + i * k * n, K, N);
  }
  return make_result<S>(std::move(out), {&a, &b}, [a, b, batch, M, K, N](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* ga = t.grad_buffer(a);
    NdArray<S>* gb = t.grad_buffer(b);
    const std::size_t mk = static_cast<std::size_t>(M * K);
    const std::size_t kn = static_cast<std::size_t>(K * N);
    const std::size_t mn = static_cast<std::size_t>(M * N);
    for (std::size_t i = 0; i < batch; ++i) {
      const Map gm(g.data() + i * mn, M, N);
      if (ga) {
        MutMap(ga->data() + i * mk, M, K).noalias() += gm * Map(b.value().data() + i * kn, K, N).transpose();
      }
      if (gb) {
        MutMap(gb->data() + i * kn, K, N).noalias() += Map(a.value().data() + i * mk, M, K).transpose() * gm;
      }
    }
  });
}

// ---- neural-network primitives ----------------------------------------------------------

template <typename S>
NdArray<S> causal_mask(std::size_t t) {
  NdArray<S> m({t, t});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = static_cast<S>(kMaskedLogit);
  }
  return m;
}

template <typename S>
Var<S> softmax_lastdim(const Var<S>& x, const NdArray<S>* mask) {
  const NdArray<S>& xv = x.value();
  if (xv.rank() == 0) throw ContractError("softmax_lastdim on a scalar");
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.numel() / n;
  std::size_t mask_rows = 0;
  if (mask) {
    const Shape& ms = mask->shape();
    if (ms.empty() || ms.size() > xv.rank() ||
        !std::equal(ms.begin(), ms.end(), xv.shape().end() - static_cast<std::ptrdiff_t>(ms.size()))) {
      throw DimensionError("softmax mask " + shape_str(ms) + " does not trail " + shape_str(xv.shape()));
    }
    mask_rows = mask->numel() / n;
  }
  constexpr S kMaskedThreshold = static_cast<S>(kMaskedLogit / 2);
  auto out = std::make_shared<NdArray<S>>(xv.shape());
  std::vector<S> z(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = xv.data() + r * n;
    const S* mr = mask ? mask->data() + (r % mask_rows) * n : nullptr;
    S* yr = out->data() + r * n;
    bool all_masked = mr != nullptr;
    S mx = -std::numeric_limits<S>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      z[j] = xr[j] + (mr ? mr[j] : S(0));
      if (mr && mr[j] > kMaskedThreshold) all_masked = false;
      mx = std::max(mx, z[j]);
    }
    if (all_masked) {
      g_all_masked_rows.fetch_add(1);
      std::fill(yr, yr + n, S(1) / static_cast<S>(n));
      continue;
    }
    S total = S(0);
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(z[j] - mx);
      total += yr[j];
    }
    const S inv = S(1) / total;
    for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  std::shared_ptr<const NdArray<S>> y = out;
  return make_result<S>(y, {&x}, [x, y, n, rows](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const S* yr = y->data() + r * n;
      const S* gr = g.data() + r * n;
      S dot = S(0);
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      S* dr = gx->data() + r * n;
      for (std::size_t j = 0; j < n; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps) {
  const NdArray<S>& xv = x.value();
  if (xv.rank() == 0) throw ContractError("layer_norm on a scalar");
  const std::size_t d = xv.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " for input " + shape_str(xv.shape()));
  }
  const std::size_t rows = xv.numel() / d;
  auto xhat = std::make_shared<NdArray<S>>(xv.shape());
  auto rstd = std::make_shared<std::vector<S>>(rows);
  NdArray<S> out(xv.shape());
  const S* gv = gain.value().data();
  const S* bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = xv.data() + r * d;
    S mu = S(0);
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<S>(d);
    S var = S(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<S>(d);
    const S rs = S(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    S* hr = xhat->data() + r * d;
    S* orow = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * rs;
      orow[j] = hr[j] * gv[j] + bv[j];
    }
  }
  return make_result<S>(std::move(out), {&x, &gain, &bias},
                        [x, gain, bias, xhat, rstd, d, rows](Tape<S>& t, const NdArray<S>& g) {
                          NdArray<S>* gx = t.grad_buffer(x);
                          NdArray<S>* gg = t.grad_buffer(gain);
                          NdArray<S>* gb = t.grad_buffer(bias);
                          const S* gv = gain.value().data();
                          std::vector<S> gh(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const S* gr = g.data() + r * d;
                            const S* hr = xhat->data() + r * d;
                            if (gg) for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * hr[j];
                            if (gb) for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gr[j];
                            if (!gx) continue;
                            S m1 = S(0);
                            S m2 = S(0);
                            for (std::size_t j = 0; j < d; ++j) {
                              gh[j] = gr[j] * gv[j];
                              m1 += gh[j];
                              m2 += gh[j] * hr[j];
                            }
                            m1 /= static_cast<S>(d);
                            m2 /= static_cast<S>(d);
                            S* dr = gx->data() + r * d;
                            for (std::size_t j = 0; j < d; ++j) {
                              dr[j] += (*rstd)[r] * (gh[j] - m1 - hr[j] * m2);
                            }
                          }
                        });
}

template <typename S>
Var<S> embedding(const TokenArray& ids, const Var<S>& table) {
  if (table.rank() != 2) throw DimensionError("embedding table must be [V, d], got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  if (shape_numel(ids.shape) != ids.ids.size()) throw ContractError("token array shape/size mismatch");
  for (std::int32_t id : ids.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ContractError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(vocab));
    }
  }
  Shape out_shape = ids.shape;
  out_shape.push_back(d);
  NdArray<S> out(out_shape);
  const NdArray<S>& tv = table.value();
  for (std::size_t i = 0; i < ids.ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids.ids[i]) * d, d, out.data() + i * d);
  }
  auto idv = std::make_shared<std::vector<std::int32_t>>(ids.ids);
  return make_result<S>(std::move(out), {&table}, [table, idv, d](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* gt = t.grad_buffer(table);
    for (std::size_t i = 0; i < idv->size(); ++i) {
      S* dst = gt->data() + static_cast<std::size_t>((*idv)[i]) * d;
      const S* src = g.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <typename S>
Var<S> dropout(const Var<S>& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const NdArray<S>& xv = x.value();
  auto keep = std::make_shared<std::vector<std::uint8_t>>(xv.numel());
  const S kscale = static_cast<S>(1.0 / (1.0 - p));
  NdArray<S> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    (*keep)[i] = rng.uniform() >= p ? 1 : 0;
    out[i] = (*keep)[i] ? xv[i] * kscale : S(0);
  }
  return make_result<S>(std::move(out), {&x}, [x, keep, kscale](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < keep->size(); ++i) {
      if ((*keep)[i]) (*gx)[i] += g[i] * kscale;
    }
  });
}

template <typename S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<std::int32_t>& targets) {
  const NdArray<S>& lv = logits.value();
  if (lv.rank() == 0) throw ContractError("cross_entropy on a scalar");
  const std::size_t v = lv.shape().back();
  const std::size_t rows = lv.numel() / v;
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(lv.shape()));
  }
  auto tg = std::make_shared<std::vector<std::int32_t>>(targets);
  auto lse = std::make_shared<std::vector<S>>(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t target = targets[r];
    if (target < 0 || static_cast<std::size_t>(target) >= v) {
      throw ContractError("target id " + std::to_string(target) + " outside vocabulary of size " +
                          std::to_string(v));
    }
    const S* lr = lv.data() + r * v;
    S mx = lr[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
    S s = S(0);
    for (std::size_t j = 0; j < v; ++j) s += std::exp(lr[j] - mx);
    (*lse)[r] = mx + std::log(s);
    total += static_cast<double>((*lse)[r] - lr[target]);
  }
  NdArray<S> out = NdArray<S>::scalar(static_cast<S>(total / static_cast<double>(rows)));
  return make_result<S>(std::move(out), {&logits}, [logits, tg, lse, v, rows](Tape<S>& t, const NdArray<S>& g) {
    NdArray<S>* gl = t.grad_buffer(logits);
    const S coef = g[0] / static_cast<S>(rows);
    const NdArray<S>& lv = logits.value();
    for (std::size_t r = 0; r < rows; ++r) {
      const S* lr = lv.data() + r * v;
      S* dr = gl->data() + r * v;
      for (std::size_t j = 0; j < v; ++j) dr[j] += coef * std::exp(lr[j] - (*lse)[r]);
      dr[static_cast<std::size_t>((*tg)[r])] -= coef;
    }
  });
}

template <typename S>
Var<S> causal_conv1d(const Var<S>& signal, const Var<S>& kernel, PadMode mode) {
  const NdArray<S>& xv = signal.value();
  const NdArray<S>& kv = kernel.value();
  if (xv.rank() == 0) throw ContractError("causal_conv1d on a scalar");
  if (kv.rank() != 1 && kv.rank() != 2) {
    throw DimensionError("causal_conv1d: kernel must be [k] or [C, k], got " + shape_str(kv.shape()));
  }
  const std::size_t k = kv.shape().back();
  if (k == 0) throw ContractError("causal_conv1d: empty kernel");
  const std::size_t t_in = xv.shape().back();
  std::size_t channels = 1;
  if (kv.rank() == 2) {
    if (xv.rank() < 2 || xv.dim(-2) != kv.dim(0)) {
      throw DimensionError("causal_conv1d: per-channel kernel " + shape_str(kv.shape()) +
                           " for signal " + shape_str(xv.shape()));
    }
    channels = kv.dim(0);
  }
  std::size_t t_out = t_in;
  if (mode == PadMode::kValid) {
    if (k > t_in) {
      throw LengthError("causal_conv1d: kernel of length " + std::to_string(k) +
                        " exceeds padded signal of length " + std::to_string(t_in));
    }
    t_out = t_in - k + 1;
  } else if (t_in == 0) {
    throw LengthError("causal_conv1d: empty signal");
  }
  // src[p] is the input index feeding extended position p - (k - 1) of the output grid
  auto src = std::make_shared<std::vector<std::ptrdiff_t>>(t_out + k - 1);
  for (std::size_t p = 0; p < src->size(); ++p) {
    if (mode == PadMode::kValid) {
      (*src)[p] = static_cast<std::ptrdiff_t>(p);
    } else {
      (*src)[p] = pad_source_index(static_cast<std::ptrdiff_t>(p) - static_cast<std::ptrdiff_t>(k - 1), t_in, mode);
    }
  }
  const std::size_t rows = xv.numel() / t_in;
  Shape out_shape = xv.shape();
  out_shape.back() = t_out;
  NdArray<S> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = xv.data() + r * t_in;
    const S* kr = kv.data() + (kv.rank() == 2 ? (r % channels) * k : 0);
    S* yr = out.data() + r * t_out;
    for (std::size_t t = 0; t < t_out; ++t) {
      S acc = S(0);
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t s = (*src)[t + k - 1 - j];
        if (s >= 0) acc += kr[j] * xr[s];
      }
      yr[t] = acc;
    }
  }
  return make_result<S>(std::move(out), {&signal, &kernel},
                        [signal, kernel, src, k, t_in, t_out, rows, channels](Tape<S>& tp, const NdArray<S>& g) {
                          NdArray<S>* gx = tp.grad_buffer(signal);
                          NdArray<S>* gk = tp.grad_buffer(kernel);
                          const NdArray<S>& xv = signal.value();
                          const NdArray<S>& kv = kernel.value();
                          const bool per_channel = kv.rank() == 2;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const std::size_t koff = per_channel ? (r % channels) * k : 0;
                            const S* xr = xv.data() + r * t_in;
                            const S* kr = kv.data() + koff;
                            const S* gr = g.data() + r * t_out;
                            S* dx = gx ? gx->data() + r * t_in : nullptr;
                            S* dk = gk ? gk->data() + koff : nullptr;
                            for (std::size_t t = 0; t < t_out; ++t) {
                              const S gt = gr[t];
                              if (gt == S(0)) continue;
                              for (std::size_t j = 0; j < k; ++j) {
                                const std::ptrdiff_t s = (*src)[t + k - 1 - j];
                                if (s < 0) continue;
                                if (dx) dx[s] += gt * kr[j];
                                if (dk) dk[j] += gt * xr[s];
                              }
                            }
                          }
                        });
}

#define EGA_INSTANTIATE_OPS(S)                                                                  \
  template Var<S> add(const Var<S>&, const Var<S>&);                                             \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                             \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                             \
  template Var<S> div(const Var<S>&, const Var<S>&);                                             \
  template Var<S> scale(const Var<S>&, S);                                                       \
  template Var<S> add_scalar(const Var<S>&, S);                                                  \
  template Var<S> neg(const Var<S>&);                                                            \
  template Var<S> square(const Var<S>&);                                                         \
  template Var<S> exp(const Var<S>&);                                                            \
  template Var<S> log(const Var<S>&);                                                            \
  template Var<S> sigmoid(const Var<S>&);                                                        \
  template Var<S> gelu(const Var<S>&);                                                           \
  template Var<S> sum(const Var<S>&);                                                            \
  template Var<S> mean(const Var<S>&);                                                           \
  template Var<S> sum_axis(const Var<S>&, int);                                                  \
  template Var<S> mean_axis(const Var<S>&, int);                                                 \
  template Var<S> reshape(const Var<S>&, Shape);                                                 \
  template Var<S> permute(const Var<S>&, const std::vector<std::size_t>&);                       \
  template Var<S> transpose(const Var<S>&);                                                      \
  template Var<S> slice(const Var<S>&, int, std::size_t, std::size_t);                           \
  template Var<S> stack(const std::vector<Var<S>>&, int);                                        \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                          \
  template NdArray<S> causal_mask<S>(std::size_t);                                               \
  template Var<S> softmax_lastdim(const Var<S>&, const NdArray<S>*);                             \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                    \
  template Var<S> embedding(const TokenArray&, const Var<S>&);                                   \
  template Var<S> dropout(const Var<S>&, double, Rng&, bool);                                    \
  template Var<S> cross_entropy(const Var<S>&, const std::vector<std::int32_t>&);                \
  template Var<S> causal_conv1d(const Var<S>&, const Var<S>&, PadMode);

EGA_INSTANTIATE_OPS(float)
EGA_INSTANTIATE_OPS(double)

}  // namespace ega
