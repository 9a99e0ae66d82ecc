#include "breaknet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "breaknet/tape.hpp"

namespace breaknet {

namespace detail {

template <typename T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape::current().enabled()) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void attach(Tensor<T>& out, const char* op, std::initializer_list<const Tensor<T>*> inputs,
            std::function<void()> backward_fn) {
  std::vector<std::uint64_t> ids;
  ids.reserve(inputs.size());
  for (const auto* t : inputs) {
    if (t && t->defined()) ids.push_back(t->node()->id);
  }
  auto node = out.node();
  node->requires_grad = true;
  node->id = Tape::current().record(op, std::move(ids), std::move(backward_fn));
}

template <typename T>
T* grad_of(TensorNode<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
  return node.grad.data();
}

template bool needs_grad<float>(std::initializer_list<const Tensor<float>*>);
template bool needs_grad<double>(std::initializer_list<const Tensor<double>*>);
template void attach<float>(Tensor<float>&, const char*, std::initializer_list<const Tensor<float>*>,
                            std::function<void()>);
template void attach<double>(Tensor<double>&, const char*, std::initializer_list<const Tensor<double>*>,
                             std::function<void()>);
template float* grad_of<float>(TensorNode<float>&);
template double* grad_of<double>(TensorNode<double>&);

}  // namespace detail

namespace {

using detail::attach;
using detail::grad_of;
using detail::needs_grad;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

// Node of a tensor that wants gradients, or null.
template <typename T>
NodePtr<T> grad_target(const Tensor<T>& t) {
  return (t.defined() && t.requires_grad()) ? t.node() : nullptr;
}

template <typename T>
T dot(const T* a, const T* b, std::int64_t n) {
  T acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  }
  T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

void require_rank(const Shape& s, int rank, const char* op, const char* what) {
  if (static_cast<int>(s.size()) != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

// Output columns [lo, hi] whose input column ox*stride + k - pad lies in [0, in).
struct Span1 {
  std::int64_t lo, hi;
};
Span1 valid_range(std::int64_t in, std::int64_t out, int k, int stride, int pad) {
  Span1 r{std::max<std::int64_t>(0, ceil_div(pad - k, stride)),
          std::min<std::int64_t>(out - 1, floor_div(in - 1 + pad - k, stride))};
  return r;
}

// C (M x N) += op(A) * op(B), op(A) is M x K and op(B) is K x N.
template <typename T>
void gemm(bool ta, bool tb, std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C) {
  if (!tb) {
    for (std::int64_t i = 0; i < M; ++i) {
      T* crow = C + i * N;
      for (std::int64_t k = 0; k < K; ++k) {
        const T aik = ta ? A[k * M + i] : A[i * K + k];
        if (aik != T(0)) axpy(aik, B + k * N, crow, N);
      }
    }
    return;
  }
  std::vector<T> arow(static_cast<std::size_t>(K));
  for (std::int64_t i = 0; i < M; ++i) {
    const T* ap;
    if (ta) {
      for (std::int64_t k = 0; k < K; ++k) arow[k] = A[k * M + i];
      ap = arow.data();
    } else {
      ap = A + i * K;
    }
    for (std::int64_t j = 0; j < N; ++j) C[i * N + j] += dot(ap, B + j * K, K);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding, int groups) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  const std::int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::int64_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (groups < 1 || stride < 1 || padding < 0) {
    throw ShapeError("conv2d: stride and groups must be >= 1 and padding >= 0");
  }
  if (Cin % groups != 0) {
    throw ShapeError("conv2d: input channels " + std::to_string(Cin) + " not divisible by groups " +
                     std::to_string(groups));
  }
  if (Cout % groups != 0) {
    throw ShapeError("conv2d: output channels " + std::to_string(Cout) + " not divisible by groups " +
                     std::to_string(groups));
  }
  if (weight.dim(1) != Cin / groups) {
    throw ShapeError("conv2d: weight in-channel dimension " + std::to_string(weight.dim(1)) + " != Cin/groups = " +
                     std::to_string(Cin / groups) + " (input " + shape_str(input.shape()) + ", weight " +
                     shape_str(weight.shape()) + ")");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match out channels " +
                     std::to_string(Cout));
  }
  const std::int64_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - kw) / stride + 1;
  if (H + 2 * padding < kh || W + 2 * padding < kw || Ho < 1 || Wo < 1) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + shape_str(input.shape()));
  }

  Tensor<T> out(Shape{N, Cout, Ho, Wo});
  const std::int64_t cpg_in = Cin / groups, cpg_out = Cout / groups;
  const T* x = input.ptr();
  const T* w = weight.ptr();
  T* y = out.ptr();
  const std::int64_t in_plane = H * W, out_plane = Ho * Wo;

  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t co = 0; co < Cout; ++co) {
      T* yp = y + (n * Cout + co) * out_plane;
      if (bias.defined()) std::fill(yp, yp + out_plane, bias.ptr()[co]);
      const std::int64_t g = co / cpg_out;
      for (std::int64_t ci = 0; ci < cpg_in; ++ci) {
        const T* xp = x + (n * Cin + g * cpg_in + ci) * in_plane;
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            const T wv = w[((co * cpg_in + ci) * kh + ky) * kw + kx];
            const Span1 cols = valid_range(W, Wo, kx, stride, padding);
            if (cols.lo > cols.hi) continue;
            for (std::int64_t oy = 0; oy < Ho; ++oy) {
              const std::int64_t iy = oy * stride + ky - padding;
              if (iy < 0 || iy >= H) continue;
              T* yr = yp + oy * Wo;
              const T* xr = xp + iy * W + kx - padding;
              if (stride == 1) {
                for (std::int64_t ox = cols.lo; ox <= cols.hi; ++ox) yr[ox] += wv * xr[ox];
              } else {
                for (std::int64_t ox = cols.lo; ox <= cols.hi; ++ox) yr[ox] += wv * xr[ox * stride];
              }
            }
          }
        }
      }
    }
  }

  if (needs_grad<T>({&input, &weight, &bias})) {
    auto xn = input.node();
    auto wn = weight.node();
    auto gx = grad_target(input);
    auto gw = grad_target(weight);
    auto gb = bias.defined() ? grad_target(bias) : nullptr;
    auto on = out.node();
    attach(out, "conv2d", {&input, &weight, &bias},
           [=]() {
             if (on->grad.empty()) return;
             const T* dy = on->grad.data();
             const T* xd = xn->data.data();
             const T* wd = wn->data.data();
             if (gb) {
               T* db = grad_of(*gb);
               for (std::int64_t n = 0; n < N; ++n)
                 for (std::int64_t co = 0; co < Cout; ++co) {
                   const T* d = dy + (n * Cout + co) * out_plane;
                   T s = std::accumulate(d, d + out_plane, T(0));
                   db[co] += s;
                 }
             }
             if (gw) {
               T* dw = grad_of(*gw);
               for (std::int64_t co = 0; co < Cout; ++co) {
                 const std::int64_t g = co / cpg_out;
                 for (std::int64_t ci = 0; ci < cpg_in; ++ci)
                   for (int ky = 0; ky < kh; ++ky)
                     for (int kx = 0; kx < kw; ++kx) {
                       const Span1 cols = valid_range(W, Wo, kx, stride, padding);
                       if (cols.lo > cols.hi) continue;
                       const std::int64_t len = cols.hi - cols.lo + 1;
                       T s = 0;
                       for (std::int64_t n = 0; n < N; ++n) {
                         const T* dp = dy + (n * Cout + co) * out_plane;
                         const T* xp = xd + (n * Cin + g * cpg_in + ci) * in_plane;
                         for (std::int64_t oy = 0; oy < Ho; ++oy) {
                           const std::int64_t iy = oy * stride + ky - padding;
                           if (iy < 0 || iy >= H) continue;
                           const T* dr = dp + oy * Wo + cols.lo;
                           const T* xr = xp + iy * W + cols.lo * stride + kx - padding;
                           if (stride == 1) {
                             s += dot(dr, xr, len);
                           } else {
                             for (std::int64_t i = 0; i < len; ++i) s += dr[i] * xr[i * stride];
                           }
                         }
                       }
                       dw[((co * cpg_in + ci) * kh + ky) * kw + kx] += s;
                     }
               }
             }
             if (gx) {
               T* dx = grad_of(*gx);
               for (std::int64_t n = 0; n < N; ++n)
                 for (std::int64_t cig = 0; cig < Cin; ++cig) {
                   const std::int64_t g = cig / cpg_in, ci = cig % cpg_in;
                   T* dxp = dx + (n * Cin + cig) * in_plane;
                   for (std::int64_t col = 0; col < cpg_out; ++col) {
                     const std::int64_t co = g * cpg_out + col;
                     const T* dp = dy + (n * Cout + co) * out_plane;
                     for (int ky = 0; ky < kh; ++ky)
                       for (int kx = 0; kx < kw; ++kx) {
                         const T wv = wd[((co * cpg_in + ci) * kh + ky) * kw + kx];
                         const Span1 cols = valid_range(W, Wo, kx, stride, padding);
                         if (cols.lo > cols.hi) continue;
                         for (std::int64_t oy = 0; oy < Ho; ++oy) {
                           const std::int64_t iy = oy * stride + ky - padding;
                           if (iy < 0 || iy >= H) continue;
                           const T* dr = dp + oy * Wo;
                           T* xr = dxp + iy * W + kx - padding;
                           if (stride == 1) {
                             for (std::int64_t ox = cols.lo; ox <= cols.hi; ++ox) xr[ox] += wv * dr[ox];
                           } else {
                             for (std::int64_t ox = cols.lo; ox <= cols.hi; ++ox) xr[ox * stride] += wv * dr[ox];
                           }
                         }
                       }
                   }
                 }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// avg_pool2d

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, int kernel, int stride, int padding) {
  require_rank(input.shape(), 4, "avg_pool2d", "input");
  if (kernel < 1 || stride < 1 || padding < 0) {
    throw ShapeError("avg_pool2d: kernel and stride must be >= 1, padding >= 0");
  }
  const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (kernel > H + 2 * padding || kernel > W + 2 * padding) {
    throw ShapeError("avg_pool2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  const std::int64_t Ho = (H + 2 * padding - kernel) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - kernel) / stride + 1;
  Tensor<T> out(Shape{N, C, Ho, Wo});
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  const std::int64_t planes = N * C;
  const T* x = input.ptr();
  T* y = out.ptr();
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* xp = x + p * H * W;
    T* yp = y + p * Ho * Wo;
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx) {
        const Span1 cols = valid_range(W, Wo, kx, stride, padding);
        for (std::int64_t oy = 0; oy < Ho; ++oy) {
          const std::int64_t iy = oy * stride + ky - padding;
          if (iy < 0 || iy >= H) continue;
          const T* xr = xp + iy * W + kx - padding;
          T* yr = yp + oy * Wo;
          for (std::int64_t ox = cols.lo; ox <= cols.hi; ++ox) yr[ox] += xr[ox * stride];
        }
      }
    for (std::int64_t i = 0; i < Ho * Wo; ++i) yp[i] *= inv;
  }
  if (needs_grad<T>({&input})) {
    auto gx = input.node();
    auto on = out.node();
    attach(out, "avg_pool2d", {&input}, [=]() {
      if (on->grad.empty()) return;
      T* dx = grad_of(*gx);
      const T* dy = on->grad.data();
      for (std::int64_t p = 0; p < planes; ++p) {
        T* xp = dx + p * H * W;
        const T* yp = dy + p * Ho * Wo;
        for (int ky = 0; ky < kernel; ++ky)
          for (int kx = 0; kx < kernel; ++kx) {
            const Span1 cols = valid_range(W, Wo, kx, stride, padding);
            for (std::int64_t oy = 0; oy < Ho; ++oy) {
              const std::int64_t iy = oy * stride + ky - padding;
              if (iy < 0 || iy >= H) continue;
              T* xr = xp + iy * W + kx - padding;
              const T* yr = yp + oy * Wo;
              for (std::int64_t ox = cols.lo; ox <= cols.hi; ++ox) xr[ox * stride] += inv * yr[ox];
            }
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// bilinear_upsample

namespace {
struct Lerp {
  std::vector<std::int64_t> lo, hi;
  std::vector<double> frac;
};

Lerp lerp_table(std::int64_t in, std::int64_t out) {
  Lerp t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  for (std::int64_t o = 0; o < out; ++o) {
    const double src = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1)
                               : 0.0;
    std::int64_t l = static_cast<std::int64_t>(std::floor(src));
    l = std::clamp<std::int64_t>(l, 0, in - 1);
    t.lo[o] = l;
    t.hi[o] = std::min(l + 1, in - 1);
    t.frac[o] = src - static_cast<double>(l);
  }
  return t;
}
}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::int64_t target_h, std::int64_t target_w) {
  require_rank(input.shape(), 4, "bilinear_upsample", "input");
  if (target_h < 1 || target_w < 1) {
    throw ShapeError("bilinear_upsample: target size must be >= 1, got " + std::to_string(target_h) + "x" +
                     std::to_string(target_w));
  }
  const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H == target_h && W == target_w) {
    // Exact identity; routed through scale so the graph stays uniform.
    return scale(input, T(1));
  }
  const Lerp ty = lerp_table(H, target_h), tx = lerp_table(W, target_w);
  Tensor<T> out(Shape{N, C, target_h, target_w});
  const std::int64_t planes = N * C;
  const T* x = input.ptr();
  T* y = out.ptr();
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* xp = x + p * H * W;
    T* yp = y + p * target_h * target_w;
    for (std::int64_t oy = 0; oy < target_h; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      const T* r0 = xp + ty.lo[oy] * W;
      const T* r1 = xp + ty.hi[oy] * W;
      T* yr = yp + oy * target_w;
      for (std::int64_t ox = 0; ox < target_w; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const std::int64_t a = tx.lo[ox], b = tx.hi[ox];
        const T top = r0[a] + (r0[b] - r0[a]) * fx;
        const T bot = r1[a] + (r1[b] - r1[a]) * fx;
        yr[ox] = top + (bot - top) * fy;
      }
    }
  }
  if (needs_grad<T>({&input})) {
    auto gx = input.node();
    auto on = out.node();
    attach(out, "bilinear_upsample", {&input}, [=]() {
      if (on->grad.empty()) return;
      T* dx = grad_of(*gx);
      const T* dy = on->grad.data();
      for (std::int64_t p = 0; p < planes; ++p) {
        T* xp = dx + p * H * W;
        const T* yp = dy + p * target_h * target_w;
        for (std::int64_t oy = 0; oy < target_h; ++oy) {
          const T fy = static_cast<T>(ty.frac[oy]);
          T* r0 = xp + ty.lo[oy] * W;
          T* r1 = xp + ty.hi[oy] * W;
          const T* yr = yp + oy * target_w;
          for (std::int64_t ox = 0; ox < target_w; ++ox) {
            const T fx = static_cast<T>(tx.frac[ox]);
            const std::int64_t a = tx.lo[ox], b = tx.hi[ox];
            const T g = yr[ox];
            r0[a] += g * (T(1) - fy) * (T(1) - fx);
            r0[b] += g * (T(1) - fy) * fx;
            r1[a] += g * fy * (T(1) - fx);
            r1[b] += g * fy * fx;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax

template <typename T>
Tensor<T> softmax(const Tensor<T>& input, int axis) {
  const int r = input.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("softmax: axis out of range for shape " + shape_str(input.shape()));
  }
  const auto& s = input.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const std::int64_t len = s[axis];
  Tensor<T> out(s);
  const T* x = input.ptr();
  T* y = out.ptr();
  std::vector<T> mx(static_cast<std::size_t>(inner)), tot(static_cast<std::size_t>(inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    const T* xo = x + o * len * inner;
    T* yo = y + o * len * inner;
    std::copy(xo, xo + inner, mx.begin());
    for (std::int64_t c = 1; c < len; ++c)
      for (std::int64_t i = 0; i < inner; ++i) mx[i] = std::max(mx[i], xo[c * inner + i]);
    std::fill(tot.begin(), tot.end(), T(0));
    for (std::int64_t c = 0; c < len; ++c)
      for (std::int64_t i = 0; i < inner; ++i) {
        const T e = std::exp(xo[c * inner + i] - mx[i]);
        yo[c * inner + i] = e;
        tot[i] += e;
      }
    for (std::int64_t i = 0; i < inner; ++i) tot[i] = T(1) / tot[i];
    for (std::int64_t c = 0; c < len; ++c)
      for (std::int64_t i = 0; i < inner; ++i) yo[c * inner + i] *= tot[i];
  }
  if (needs_grad<T>({&input})) {
    auto gx = input.node();
    auto on = out.node();
    attach(out, "softmax", {&input}, [=]() {
      if (on->grad.empty()) return;
      T* dx = grad_of(*gx);
      const T* dy = on->grad.data();
      const T* yv = on->data.data();
      std::vector<T> acc(static_cast<std::size_t>(inner));
      for (std::int64_t o = 0; o < outer; ++o) {
        const std::int64_t base = o * len * inner;
        std::fill(acc.begin(), acc.end(), T(0));
        for (std::int64_t c = 0; c < len; ++c)
          for (std::int64_t i = 0; i < inner; ++i) acc[i] += yv[base + c * inner + i] * dy[base + c * inner + i];
        for (std::int64_t c = 0; c < len; ++c)
          for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t k = base + c * inner + i;
            dx[k] += yv[k] * (dy[k] - acc[i]);
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer_norm (channel axis)

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (input.rank() < 2) throw ShapeError("layer_norm: input must have a channel axis, got " + shape_str(input.shape()));
  const auto& s = input.shape();
  const std::int64_t N = s[0], C = s[1];
  const std::int64_t inner = input.numel() / std::max<std::int64_t>(1, N * C);
  if (gamma.numel() != C || beta.numel() != C) {
    throw ShapeError("layer_norm: gamma/beta length must equal channel count " + std::to_string(C));
  }
  Tensor<T> out(s);
  std::vector<T> xhat(static_cast<std::size_t>(input.numel()));
  std::vector<T> rstd(static_cast<std::size_t>(N * inner));
  const T* x = input.ptr();
  const T* g = gamma.ptr();
  const T* b = beta.ptr();
  T* y = out.ptr();
  std::vector<T> mu(static_cast<std::size_t>(inner)), var(static_cast<std::size_t>(inner));
  const T invC = T(1) / static_cast<T>(C);
  for (std::int64_t n = 0; n < N; ++n) {
    const T* xn = x + n * C * inner;
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < inner; ++i) mu[i] += xn[c * inner + i];
    for (std::int64_t i = 0; i < inner; ++i) mu[i] *= invC;
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < inner; ++i) {
        const T d = xn[c * inner + i] - mu[i];
        var[i] += d * d;
      }
    T* rs = rstd.data() + n * inner;
    for (std::int64_t i = 0; i < inner; ++i) rs[i] = T(1) / std::sqrt(var[i] * invC + eps);
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t k = (n * C + c) * inner + i;
        const T h = (x[k] - mu[i]) * rs[i];
        xhat[k] = h;
        y[k] = g[c] * h + b[c];
      }
  }
  if (needs_grad<T>({&input, &gamma, &beta})) {
    auto gx = grad_target(input);
    auto gg = grad_target(gamma);
    auto gb = grad_target(beta);
    auto gn = gamma.node();
    auto on = out.node();
    attach(out, "layer_norm", {&input, &gamma, &beta},
           [=, xhat = std::move(xhat), rstd = std::move(rstd)]() {
             if (on->grad.empty()) return;
             const T* dy = on->grad.data();
             const T* gv = gn->data.data();
             if (gg || gb) {
               T* dg = gg ? grad_of(*gg) : nullptr;
               T* db = gb ? grad_of(*gb) : nullptr;
               for (std::int64_t c = 0; c < C; ++c) {
                 T sg = 0, sb = 0;
                 for (std::int64_t n = 0; n < N; ++n) {
                   const std::int64_t off = (n * C + c) * inner;
                   sg += dot(dy + off, xhat.data() + off, inner);
                   sb += std::accumulate(dy + off, dy + off + inner, T(0));
                 }
                 if (dg) dg[c] += sg;
                 if (db) db[c] += sb;
               }
             }
             if (gx) {
               T* dx = grad_of(*gx);
               std::vector<T> s1(static_cast<std::size_t>(inner)), s2(static_cast<std::size_t>(inner));
               for (std::int64_t n = 0; n < N; ++n) {
                 std::fill(s1.begin(), s1.end(), T(0));
                 std::fill(s2.begin(), s2.end(), T(0));
                 for (std::int64_t c = 0; c < C; ++c)
                   for (std::int64_t i = 0; i < inner; ++i) {
                     const std::int64_t k = (n * C + c) * inner + i;
                     const T dh = dy[k] * gv[c];
                     s1[i] += dh;
                     s2[i] += dh * xhat[k];
                   }
                 const T* rs = rstd.data() + n * inner;
                 for (std::int64_t c = 0; c < C; ++c)
                   for (std::int64_t i = 0; i < inner; ++i) {
                     const std::int64_t k = (n * C + c) * inner + i;
                     const T dh = dy[k] * gv[c];
                     dx[k] += rs[i] * (dh - (s1[i] + xhat[k] * s2[i]) * invC);
                   }
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batch_norm

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, bool train, T momentum, T eps) {
  if (input.rank() < 2) throw ShapeError("batch_norm: input must have a channel axis, got " + shape_str(input.shape()));
  const auto& s = input.shape();
  const std::int64_t N = s[0], C = s[1];
  if (N < 1) throw ShapeError("batch_norm: batch size must be >= 1");
  const std::int64_t inner = input.numel() / (N * C);
  if (gamma.numel() != C || beta.numel() != C || stats.running_mean.numel() != C || stats.running_var.numel() != C) {
    throw ShapeError("batch_norm: parameter length must equal channel count " + std::to_string(C));
  }
  const std::int64_t M = N * inner;
  Tensor<T> out(s);
  std::vector<T> xhat(static_cast<std::size_t>(input.numel()));
  std::vector<T> rstd(static_cast<std::size_t>(C));
  const T* x = input.ptr();
  const T* g = gamma.ptr();
  const T* b = beta.ptr();
  T* y = out.ptr();
  for (std::int64_t c = 0; c < C; ++c) {
    T mu, var;
    if (train) {
      T sm = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = x + (n * C + c) * inner;
        sm += std::accumulate(p, p + inner, T(0));
      }
      mu = sm / static_cast<T>(M);
      T sq = 0;
      for (std::int64_t n = 0; n < N; ++n) {
        const T* p = x + (n * C + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<T>(M);
      const T unbiased = M > 1 ? sq / static_cast<T>(M - 1) : var;
      T& rm = stats.running_mean.ptr()[c];
      T& rv = stats.running_var.ptr()[c];
      rm = (T(1) - momentum) * rm + momentum * mu;
      rv = (T(1) - momentum) * rv + momentum * unbiased;
    } else {
      mu = stats.running_mean.ptr()[c];
      var = stats.running_var.ptr()[c];
    }
    const T r = T(1) / std::sqrt(var + eps);
    rstd[c] = r;
    for (std::int64_t n = 0; n < N; ++n) {
      const std::int64_t off = (n * C + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) {
        const T h = (x[off + i] - mu) * r;
        xhat[off + i] = h;
        y[off + i] = g[c] * h + b[c];
      }
    }
  }
  if (needs_grad<T>({&input, &gamma, &beta})) {
    auto gx = grad_target(input);
    auto gg = grad_target(gamma);
    auto gb = grad_target(beta);
    auto gn = gamma.node();
    auto on = out.node();
    attach(out, "batch_norm", {&input, &gamma, &beta},
           [=, xhat = std::move(xhat), rstd = std::move(rstd)]() {
             if (on->grad.empty()) return;
             const T* dy = on->grad.data();
             const T* gv = gn->data.data();
             T* dg = gg ? grad_of(*gg) : nullptr;
             T* db = gb ? grad_of(*gb) : nullptr;
             T* dx = gx ? grad_of(*gx) : nullptr;
             for (std::int64_t c = 0; c < C; ++c) {
               T sdy = 0, sdyx = 0;
               for (std::int64_t n = 0; n < N; ++n) {
                 const std::int64_t off = (n * C + c) * inner;
                 sdy += std::accumulate(dy + off, dy + off + inner, T(0));
                 sdyx += dot(dy + off, xhat.data() + off, inner);
               }
               if (dg) dg[c] += sdyx;
               if (db) db[c] += sdy;
               if (!dx) continue;
               const T k = gv[c] * rstd[c];
               for (std::int64_t n = 0; n < N; ++n) {
                 const std::int64_t off = (n * C + c) * inner;
                 if (train) {
                   const T invM = T(1) / static_cast<T>(M);
                   for (std::int64_t i = 0; i < inner; ++i)
                     dx[off + i] += k * (dy[off + i] - (sdy + xhat[off + i] * sdyx) * invM);
                 } else {
                   for (std::int64_t i = 0; i < inner; ++i) dx[off + i] += k * dy[off + i];
                 }
               }
             }
           });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

namespace {

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& input, const char* name, Fwd fwd, Deriv deriv) {
  Tensor<T> out(input.shape());
  const T* x = input.ptr();
  T* y = out.ptr();
  const std::int64_t n = input.numel();
  for (std::int64_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
  if (needs_grad<T>({&input})) {
    auto xn = input.node();
    auto on = out.node();
    attach(out, name, {&input}, [=]() {
      if (on->grad.empty()) return;
      T* dx = grad_of(*xn);
      const T* dy = on->grad.data();
      const T* xv = xn->data.data();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * deriv(xv[i]);
    });
  }
  return out;
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope) {
  return unary(
      input, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& input) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary(
      input, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double p, bool train, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (!train || p == 0.0) return input;
  const std::int64_t n = input.numel();
  std::vector<T> mask(static_cast<std::size_t>(n));
  const T keep_scale = T(1.0 / (1.0 - p));
  for (std::int64_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    mask[i] = u < p ? T(0) : keep_scale;
  }
  Tensor<T> out(input.shape());
  const T* x = input.ptr();
  T* y = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] * mask[i];
  if (needs_grad<T>({&input})) {
    auto xn = input.node();
    auto on = out.node();
    attach(out, "dropout", {&input}, [=, mask = std::move(mask)]() {
      if (on->grad.empty()) return;
      T* dx = grad_of(*xn);
      const T* dy = on->grad.data();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * mask[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  const std::int64_t n = a.numel();
  const T* x = a.ptr();
  const T* z = b.ptr();
  T* y = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] + z[i];
  if (needs_grad<T>({&a, &b})) {
    auto ga = grad_target(a), gb = grad_target(b);
    auto on = out.node();
    attach(out, "add", {&a, &b}, [=]() {
      if (on->grad.empty()) return;
      const T* dy = on->grad.data();
      if (ga) axpy(T(1), dy, grad_of(*ga), n);
      if (gb) axpy(T(1), dy, grad_of(*gb), n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  const std::int64_t n = a.numel();
  const T* x = a.ptr();
  const T* z = b.ptr();
  T* y = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] - z[i];
  if (needs_grad<T>({&a, &b})) {
    auto ga = grad_target(a), gb = grad_target(b);
    auto on = out.node();
    attach(out, "sub", {&a, &b}, [=]() {
      if (on->grad.empty()) return;
      const T* dy = on->grad.data();
      if (ga) axpy(T(1), dy, grad_of(*ga), n);
      if (gb) axpy(T(-1), dy, grad_of(*gb), n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  const std::int64_t n = a.numel();
  const T* x = a.ptr();
  const T* z = b.ptr();
  T* y = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] * z[i];
  if (needs_grad<T>({&a, &b})) {
    auto ga = grad_target(a), gb = grad_target(b);
    auto an = a.node(), bn = b.node();
    auto on = out.node();
    attach(out, "mul", {&a, &b}, [=]() {
      if (on->grad.empty()) return;
      const T* dy = on->grad.data();
      if (ga) {
        T* d = grad_of(*ga);
        const T* bv = bn->data.data();
        for (std::int64_t i = 0; i < n; ++i) d[i] += dy[i] * bv[i];
      }
      if (gb) {
        T* d = grad_of(*gb);
        const T* av = an->data.data();
        for (std::int64_t i = 0; i < n; ++i) d[i] += dy[i] * av[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const std::int64_t n = a.numel();
  const T* x = a.ptr();
  T* y = out.ptr();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] * factor;
  if (needs_grad<T>({&a})) {
    auto an = a.node();
    auto on = out.node();
    attach(out, "scale", {&a}, [=]() {
      if (on->grad.empty()) return;
      axpy(factor, on->grad.data(), grad_of(*an), n);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (needs_grad<T>({&a})) {
    auto an = a.node();
    auto on = out.node();
    const std::int64_t n = a.numel();
    attach(out, "sum", {&a}, [=]() {
      if (on->grad.empty()) return;
      const T g = on->grad[0];
      T* d = grad_of(*an);
      for (std::int64_t i = 0; i < n; ++i) d[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (needs_grad<T>({&a})) {
    auto an = a.node();
    auto on = out.node();
    const std::int64_t n = a.numel();
    attach(out, "reshape", {&a}, [=]() {
      if (on->grad.empty()) return;
      axpy(T(1), on->grad.data(), grad_of(*an), n);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  require_rank(a.shape(), 3, "batched_matmul", "lhs");
  require_rank(b.shape(), 3, "batched_matmul", "rhs");
  const std::int64_t B = a.dim(0);
  if (b.dim(0) != B) {
    throw ShapeError("batched_matmul: batch dimension mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::int64_t M = ta ? a.dim(2) : a.dim(1);
  const std::int64_t K = ta ? a.dim(1) : a.dim(2);
  const std::int64_t Kb = tb ? b.dim(2) : b.dim(1);
  const std::int64_t N = tb ? b.dim(1) : b.dim(2);
  if (K != Kb) {
    throw ShapeError("batched_matmul: inner dimension mismatch " + std::to_string(K) + " vs " + std::to_string(Kb) +
                     " (lhs " + shape_str(a.shape()) + ", rhs " + shape_str(b.shape()) + ")");
  }
  Tensor<T> out(Shape{B, M, N});
  for (std::int64_t i = 0; i < B; ++i) {
    gemm(ta, tb, M, N, K, a.ptr() + i * M * K, b.ptr() + i * K * N, out.ptr() + i * M * N);
  }
  if (needs_grad<T>({&a, &b})) {
    auto ga = grad_target(a), gb = grad_target(b);
    auto an = a.node(), bn = b.node();
    auto on = out.node();
    attach(out, "batched_matmul", {&a, &b}, [=]() {
      if (on->grad.empty()) return;
      for (std::int64_t i = 0; i < B; ++i) {
        const T* dc = on->grad.data() + i * M * N;
        const T* av = an->data.data() + i * M * K;
        const T* bv = bn->data.data() + i * K * N;
        if (ga) {
          T* da = grad_of(*ga) + i * M * K;
          if (!ta) {
            gemm(false, !tb, M, K, N, dc, bv, da);
          } else {
            gemm(tb, true, K, M, N, bv, dc, da);
          }
        }
        if (gb) {
          T* db = grad_of(*gb) + i * K * N;
          if (!tb) {
            gemm(!ta, false, K, N, M, av, dc, db);
          } else {
            gemm(true, ta, N, K, M, dc, av, db);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "matmul", "lhs");
  require_rank(b.shape(), 2, "matmul", "rhs");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  auto a3 = reshape(a, Shape{1, a.dim(0), a.dim(1)});
  auto b3 = reshape(b, Shape{1, b.dim(0), b.dim(1)});
  return reshape(batched_matmul(a3, b3), Shape{a.dim(0), b.dim(1)});
}

// ---------------------------------------------------------------------------
// concat

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& inputs, int axis) {
  if (inputs.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = inputs.front().shape();
  const int r = static_cast<int>(s0.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range for shape " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& t : inputs) {
    const Shape& s = t.shape();
    if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    for (int i = 0; i < r; ++i) {
      if (i != axis && s[i] != s0[i]) {
        throw ShapeError("concat: dimension " + std::to_string(i) + " mismatch " + shape_str(s0) + " vs " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < r; ++i) inner *= s0[i];
  Tensor<T> out(out_shape);
  const std::int64_t out_row = out_shape[axis] * inner;
  std::int64_t offset = 0;
  std::vector<std::int64_t> offsets;
  for (const auto& t : inputs) {
    const std::int64_t row = t.shape()[axis] * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(t.ptr() + o * row, t.ptr() + (o + 1) * row, out.ptr() + o * out_row + offset);
    }
    offsets.push_back(offset);
    offset += row;
  }
  bool any = false;
  for (const auto& t : inputs) any = any || needs_grad<T>({&t});
  if (any) {
    std::vector<NodePtr<T>> targets;
    std::vector<std::int64_t> rows;
    std::vector<std::uint64_t> ids;
    for (const auto& t : inputs) {
      targets.push_back(grad_target(t));
      rows.push_back(t.shape()[axis] * inner);
      ids.push_back(t.node()->id);
    }
    auto on = out.node();
    out.node()->requires_grad = true;
    out.node()->id = Tape::current().record("concat", std::move(ids), [=]() {
      if (on->grad.empty()) return;
      for (std::size_t k = 0; k < targets.size(); ++k) {
        if (!targets[k]) continue;
        T* d = grad_of(*targets[k]);
        for (std::int64_t o = 0; o < outer; ++o) {
          axpy(T(1), on->grad.data() + o * out_row + offsets[k], d + o * rows[k], rows[k]);
        }
      }
    });
  }
  return out;
}

#define BREAKNET_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int, int);          \
  template Tensor<T> avg_pool2d(const Tensor<T>&, int, int, int);                                          \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, std::int64_t, std::int64_t);                      \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                  \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormStats<T>&, \
                                bool, T, T);                                                               \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                      \
  template Tensor<T> gelu(const Tensor<T>&);                                                               \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, std::mt19937_64&);                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> batched_matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                           \
  template Tensor<T> sum(const Tensor<T>&);                                                                \
  template Tensor<T> mean(const Tensor<T>&);                                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);

BREAKNET_INSTANTIATE_OPS(float)
BREAKNET_INSTANTIATE_OPS(double)

}  // namespace breaknet
