#pragma once

// Dense kernels and their reverse-mode wrappers. Raw kernels are pure
// functions of Tensors with fixed accumulation order; the Var overloads
// record the backward closure on the tape. Everything upstream computes
// exclusively through this layer.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "simvos/autograd.hpp"
#include "simvos/tensor.hpp"

namespace simvos {

template <typename S>
constexpr S neg_inf() {
  return -std::numeric_limits<S>::infinity();
}

// ---------------------------------------------------------------------------
// matmul

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul dims mismatch: " + shape_str(a.dims()) + " * " +
                     shape_str(b.dims()));
  }
  Tensor<S> c({a.dim(0), b.dim(1)});
  c.mat().noalias() = a.mat() * b.mat();
  ensure_finite(c, "matmul");
  return c;
}

// c = a^T * b with a [k x m], b [k x n].
template <typename S>
Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw ShapeError("matmul_tn dims mismatch: " + shape_str(a.dims()) + " , " +
                     shape_str(b.dims()));
  }
  Tensor<S> c({a.dim(1), b.dim(1)});
  c.mat().noalias() = a.mat().transpose() * b.mat();
  ensure_finite(c, "matmul_tn");
  return c;
}

// c = a * b^T with a [m x k], b [n x k].
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt dims mismatch: " + shape_str(a.dims()) + " , " +
                     shape_str(b.dims()));
  }
  Tensor<S> c({a.dim(0), b.dim(0)});
  c.mat().noalias() = a.mat() * b.mat().transpose();
  ensure_finite(c, "matmul_nt");
  return c;
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  Tensor<S> out = matmul(a->value, b->value);
  return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& n) {
    if (a->requires_grad) a->accumulate(matmul_nt(n.grad, b->value));
    if (b->requires_grad) b->accumulate(matmul_tn(a->value, n.grad));
  });
}

template <typename S>
Var<S> matmul_tn(const Var<S>& a, const Var<S>& b) {
  Tensor<S> out = matmul_tn(a->value, b->value);
  return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& n) {
    if (a->requires_grad) a->accumulate(matmul_nt(b->value, n.grad));
    if (b->requires_grad) b->accumulate(matmul(a->value, n.grad));
  });
}

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (!a.same_dims(b)) throw ShapeError("add dims mismatch");
  Tensor<S> c(a.dims());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + b[i];
  return c;
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  return make_op<S>(add(a->value, b->value), {a, b}, [a, b](Node<S>& n) {
    if (a->requires_grad) a->accumulate(n.grad);
    if (b->requires_grad) b->accumulate(n.grad);
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  if (!a->value.same_dims(b->value)) throw ShapeError("mul dims mismatch");
  Tensor<S> c(a->value.dims());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a->value[i] * b->value[i];
  return make_op<S>(std::move(c), {a, b}, [a, b](Node<S>& n) {
    if (a->requires_grad) {
      Tensor<S> g(n.grad.dims());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * b->value[i];
      a->accumulate(g);
    }
    if (b->requires_grad) {
      Tensor<S> g(n.grad.dims());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * a->value[i];
      b->accumulate(g);
    }
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  if (!a->value.same_dims(b->value)) throw ShapeError("sub dims mismatch");
  Tensor<S> c(a->value.dims());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a->value[i] - b->value[i];
  return make_op<S>(std::move(c), {a, b}, [a, b](Node<S>& n) {
    if (a->requires_grad) a->accumulate(n.grad);
    if (b->requires_grad) {
      Tensor<S> g(n.grad.dims());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -n.grad[i];
      b->accumulate(g);
    }
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Tensor<S> c(a->value.dims());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a->value[i] * factor;
  return make_op<S>(std::move(c), {a}, [a, factor](Node<S>& n) {
    Tensor<S> g(n.grad.dims());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * factor;
    a->accumulate(g);
  });
}

// y = x + row-broadcast bias, x [T x C], bias [C].
template <typename S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& bias) {
  const Tensor<S>& xv = x->value;
  const Tensor<S>& bv = bias->value;
  if (xv.rank() != 2 || bv.size() != xv.dim(1)) throw ShapeError("add_rowvec dims mismatch");
  Tensor<S> out(xv.dims());
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
  }
  return make_op<S>(std::move(out), {x, bias}, [x, bias, rows, cols](Node<S>& n) {
    if (x->requires_grad) x->accumulate(n.grad);
    if (bias->requires_grad) {
      Tensor<S> db(bias->value.dims());
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) db[c] += n.grad[r * cols + c];
      }
      bias->accumulate(db);
    }
  });
}

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& bias) {
  Var<S> y = matmul(x, w);
  return bias ? add_rowvec(y, bias) : y;
}

// ---------------------------------------------------------------------------
// softmax over an axis of a rank-2 tensor

// -inf entries are suppression sentinels and map to exactly 0. A slice that
// is entirely -inf has no distribution to normalize and is an error.
template <typename S>
Tensor<S> softmax_over_axis(const Tensor<S>& x, std::size_t axis) {
  if (x.rank() != 2 || axis > 1) throw ShapeError("softmax_over_axis expects rank-2, axis 0/1");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor<S> y(x.dims());
  const std::size_t slices = (axis == 1) ? rows : cols;
  const std::size_t len = (axis == 1) ? cols : rows;
  const std::size_t stride = (axis == 1) ? 1 : cols;
  for (std::size_t s = 0; s < slices; ++s) {
    const std::size_t base = (axis == 1) ? s * cols : s;
    S m = neg_inf<S>();
    for (std::size_t i = 0; i < len; ++i) {
      const S v = x[base + i * stride];
      if (std::isnan(static_cast<double>(v)) || v == std::numeric_limits<S>::infinity()) {
        throw NumericError("softmax input must be finite or -inf");
      }
      m = std::max(m, v);
    }
    if (m == neg_inf<S>()) throw NumericError("softmax slice is entirely -inf");
    S sum = S(0);
    for (std::size_t i = 0; i < len; ++i) {
      const S e = std::exp(x[base + i * stride] - m);
      y[base + i * stride] = e;
      sum += e;
    }
    const S inv = S(1) / sum;
    for (std::size_t i = 0; i < len; ++i) y[base + i * stride] *= inv;
  }
  ensure_finite(y, "softmax_over_axis");
  return y;
}

template <typename S>
Var<S> softmax_over_axis(const Var<S>& x, std::size_t axis) {
  Tensor<S> y = softmax_over_axis(x->value, axis);
  Tensor<S> y_copy = y;
  return make_op<S>(std::move(y), {x}, [x, axis, y = std::move(y_copy)](Node<S>& n) {
    const std::size_t rows = y.dim(0), cols = y.dim(1);
    const std::size_t slices = (axis == 1) ? rows : cols;
    const std::size_t len = (axis == 1) ? cols : rows;
    const std::size_t stride = (axis == 1) ? 1 : cols;
    Tensor<S> dx(y.dims());
    for (std::size_t s = 0; s < slices; ++s) {
      const std::size_t base = (axis == 1) ? s * cols : s;
      S dot = S(0);
      for (std::size_t i = 0; i < len; ++i) {
        dot += y[base + i * stride] * n.grad[base + i * stride];
      }
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t k = base + i * stride;
        dx[k] = y[k] * (n.grad[k] - dot);
      }
    }
    x->accumulate(dx);
  });
}

// Sets rows where keep[r] is false to -inf (suppression before a column
// softmax). Gradients do not flow through suppressed rows.
template <typename S>
Tensor<S> mask_rows_neg_inf(const Tensor<S>& x, const std::vector<bool>& keep) {
  if (x.rank() != 2 || keep.size() != x.dim(0)) throw ShapeError("mask_rows dims mismatch");
  bool any = false;
  for (bool k : keep) any = any || k;
  if (!any) throw EmptyRegionError("suppression would remove every row");
  Tensor<S> y = x;
  const std::size_t cols = x.dim(1);
  for (std::size_t r = 0; r < keep.size(); ++r) {
    if (!keep[r]) {
      for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = neg_inf<S>();
    }
  }
  return y;
}

template <typename S>
Var<S> mask_rows_neg_inf(const Var<S>& x, std::vector<bool> keep) {
  Tensor<S> y = mask_rows_neg_inf(x->value, keep);
  return make_op<S>(std::move(y), {x}, [x, keep = std::move(keep)](Node<S>& n) {
    Tensor<S> dx(n.grad.dims());
    const std::size_t cols = dx.dim(1);
    for (std::size_t r = 0; r < keep.size(); ++r) {
      if (keep[r]) {
        for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] = n.grad[r * cols + c];
      }
    }
    x->accumulate(dx);
  });
}

// ---------------------------------------------------------------------------
// layer norm

inline constexpr double kLayerNormEps = 1e-6;

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta) {
  if (x.rank() != 2) throw ShapeError("layer_norm expects [T x C]");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (cols < 2) throw ShapeError("layer_norm needs C >= 2");
  if (gamma.size() != cols || beta.size() != cols) throw ShapeError("layer_norm affine dims");
  Tensor<S> y(x.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xr = x.data() + r * cols;
    S* yr = y.data() + r * cols;
    S mean = S(0);
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<S>(cols);
    S var = S(0);
    for (std::size_t c = 0; c < cols; ++c) {
      const S d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<S>(cols);
    const S inv = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = (xr[c] - mean) * inv * gamma[c] + beta[c];
    }
  }
  ensure_finite(y, "layer_norm");
  return y;
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta) {
  Tensor<S> y = layer_norm(x->value, gamma->value, beta->value);
  return make_op<S>(std::move(y), {x, gamma, beta}, [x, gamma, beta](Node<S>& n) {
    const Tensor<S>& xv = x->value;
    const std::size_t rows = xv.dim(0), cols = xv.dim(1);
    Tensor<S> dx(xv.dims());
    Tensor<S> dgamma(gamma->value.dims());
    Tensor<S> dbeta(beta->value.dims());
    for (std::size_t r = 0; r < rows; ++r) {
      const S* xr = xv.data() + r * cols;
      const S* gr = n.grad.data() + r * cols;
      S mean = S(0);
      for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
      mean /= static_cast<S>(cols);
      S var = S(0);
      for (std::size_t c = 0; c < cols; ++c) {
        const S d = xr[c] - mean;
        var += d * d;
      }
      var /= static_cast<S>(cols);
      const S inv = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
      // dxhat and the two row reductions of the standard layer-norm backward
      S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
      for (std::size_t c = 0; c < cols; ++c) {
        const S xhat = (xr[c] - mean) * inv;
        const S dxhat = gr[c] * gamma->value[c];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        dgamma[c] += gr[c] * xhat;
        dbeta[c] += gr[c];
      }
      for (std::size_t c = 0; c < cols; ++c) {
        const S xhat = (xr[c] - mean) * inv;
        const S dxhat = gr[c] * gamma->value[c];
        dx[r * cols + c] =
            inv * (dxhat - sum_dxhat / static_cast<S>(cols) -
                   xhat * sum_dxhat_xhat / static_cast<S>(cols));
      }
    }
    if (x->requires_grad) x->accumulate(dx);
    if (gamma->requires_grad) gamma->accumulate(dgamma);
    if (beta->requires_grad) beta->accumulate(dbeta);
  });
}

// ---------------------------------------------------------------------------
// gelu (tanh approximation)

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> y(x.dims());
  const S c0 = static_cast<S>(std::sqrt(2.0 / M_PI));
  const S c1 = static_cast<S>(0.044715);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const S v = x[i];
    const S u = c0 * (v + c1 * v * v * v);
    y[i] = S(0.5) * v * (S(1) + std::tanh(u));
  }
  ensure_finite(y, "gelu");
  return y;
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
  Tensor<S> y = gelu(x->value);
  return make_op<S>(std::move(y), {x}, [x](Node<S>& n) {
    const Tensor<S>& xv = x->value;
    Tensor<S> dx(xv.dims());
    const S c0 = static_cast<S>(std::sqrt(2.0 / M_PI));
    const S c1 = static_cast<S>(0.044715);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const S v = xv[i];
      const S u = c0 * (v + c1 * v * v * v);
      const S t = std::tanh(u);
      const S du = c0 * (S(1) + S(3) * c1 * v * v);
      dx[i] = n.grad[i] * (S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * du);
    }
    x->accumulate(dx);
  });
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, zero padding) via im2col + GEMM

struct ConvGeom {
  std::size_t cin, h, w, cout, kh, kw, stride, pad, oh, ow;
};

inline ConvGeom conv_geometry(const Shape& x, const Shape& k, std::size_t stride,
                              std::size_t pad) {
  if (x.size() != 3 || k.size() != 4) throw ShapeError("conv2d expects x[C x H x W], k rank-4");
  if (k[1] != x[0]) throw ShapeError("conv2d channel mismatch");
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const std::size_t h = x[1], w = x[2], kh = k[2], kw = k[3];
  if (h + 2 * pad < kh || w + 2 * pad < kw || (h + 2 * pad - kh) % stride != 0 ||
      (w + 2 * pad - kw) % stride != 0) {
    throw ShapeError("conv2d output dims are not integral");
  }
  return {x[0], h, w, k[0], kh, kw, stride, pad,
          (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1};
}

template <typename S>
Tensor<S> im2col(const Tensor<S>& x, const ConvGeom& g) {
  Tensor<S> col({g.cin * g.kh * g.kw, g.oh * g.ow});
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const std::size_t row = (c * g.kh + ky) * g.kw + kx;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            S v = S(0);
            if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.h) && ix >= 0 &&
                ix < static_cast<std::ptrdiff_t>(g.w)) {
              v = x[(c * g.h + iy) * g.w + ix];
            }
            col[row * (g.oh * g.ow) + oy * g.ow + ox] = v;
          }
        }
      }
    }
  }
  return col;
}

template <typename S>
void col2im_accumulate(const Tensor<S>& col, const ConvGeom& g, Tensor<S>& x_out) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const std::size_t row = (c * g.kh + ky) * g.kw + kx;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            x_out[(c * g.h + iy) * g.w + ix] += col[row * (g.oh * g.ow) + oy * g.ow + ox];
          }
        }
      }
    }
  }
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& k, const Tensor<S>* bias,
                 std::size_t stride, std::size_t pad) {
  const ConvGeom g = conv_geometry(x.dims(), k.dims(), stride, pad);
  if (bias && bias->size() != g.cout) throw ShapeError("conv2d bias dims");
  Tensor<S> col = im2col(x, g);
  Tensor<S> out({g.cout, g.oh, g.ow});
  out.mat(g.cout, g.oh * g.ow).noalias() =
      k.mat(g.cout, g.cin * g.kh * g.kw) * col.mat();
  if (bias) {
    for (std::size_t o = 0; o < g.cout; ++o) {
      for (std::size_t p = 0; p < g.oh * g.ow; ++p) out[o * g.oh * g.ow + p] += (*bias)[o];
    }
  }
  ensure_finite(out, "conv2d");
  return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& k, std::size_t stride, std::size_t pad) {
  return conv2d(x, k, static_cast<const Tensor<S>*>(nullptr), stride, pad);
}

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& k, const Var<S>& bias, std::size_t stride,
              std::size_t pad) {
  Tensor<S> out = conv2d(x->value, k->value, bias ? &bias->value : nullptr, stride, pad);
  std::vector<Var<S>> parents = {x, k};
  if (bias) parents.push_back(bias);
  return make_op<S>(std::move(out), std::move(parents), [x, k, bias, stride, pad](Node<S>& n) {
    const ConvGeom g = conv_geometry(x->value.dims(), k->value.dims(), stride, pad);
    auto dout_mat = n.grad.mat(g.cout, g.oh * g.ow);
    if (k->requires_grad) {
      Tensor<S> col = im2col(x->value, g);
      Tensor<S> dk(k->value.dims());
      dk.mat(g.cout, g.cin * g.kh * g.kw).noalias() = dout_mat * col.mat().transpose();
      k->accumulate(dk);
    }
    if (x->requires_grad) {
      Tensor<S> dcol({g.cin * g.kh * g.kw, g.oh * g.ow});
      dcol.mat().noalias() = k->value.mat(g.cout, g.cin * g.kh * g.kw).transpose() * dout_mat;
      Tensor<S> dx(x->value.dims());
      col2im_accumulate(dcol, g, dx);
      x->accumulate(dx);
    }
    if (bias && bias->requires_grad) {
      Tensor<S> db(bias->value.dims());
      for (std::size_t o = 0; o < g.cout; ++o) {
        for (std::size_t p = 0; p < g.oh * g.ow; ++p) db[o] += n.grad[o * g.oh * g.ow + p];
      }
      bias->accumulate(db);
    }
  });
}

// ---------------------------------------------------------------------------
// transposed conv2d, fixed geometry kernel = 2*stride, pad = stride/2
// (exact integer upsampling: output spatial dims = stride * input dims)

struct TConvGeom {
  std::size_t cin, h, w, cout, k, stride, pad, oh, ow;
};

inline TConvGeom tconv_geometry(const Shape& x, const Shape& kdims, std::size_t stride) {
  if (x.size() != 3 || kdims.size() != 4) throw ShapeError("tconv2d expects x[C x H x W], k rank-4");
  if (kdims[0] != x[0]) throw ShapeError("tconv2d channel mismatch");
  if (stride < 2 || stride % 2 != 0) throw ShapeError("tconv2d stride must be even and >= 2");
  if (kdims[2] != 2 * stride || kdims[3] != 2 * stride) {
    throw ShapeError("tconv2d kernel must be 2*stride square");
  }
  return {x[0], x[1], x[2], kdims[1], kdims[2], stride, stride / 2, stride * x[1], stride * x[2]};
}

// k is [Cin x Cout x kh x kw]. out[o, iy*s + ky - pad, ix*s + kx - pad] += x[c,iy,ix]*k[c,o,ky,kx].
template <typename S>
Tensor<S> transposed_conv2d(const Tensor<S>& x, const Tensor<S>& k, const Tensor<S>* bias,
                            std::size_t stride) {
  const TConvGeom g = tconv_geometry(x.dims(), k.dims(), stride);
  if (bias && bias->size() != g.cout) throw ShapeError("tconv2d bias dims");
  Tensor<S> out({g.cout, g.oh, g.ow});
  if (bias) {
    for (std::size_t o = 0; o < g.cout; ++o) {
      for (std::size_t p = 0; p < g.oh * g.ow; ++p) out[o * g.oh * g.ow + p] = (*bias)[o];
    }
  }
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t iy = 0; iy < g.h; ++iy) {
      for (std::size_t ix = 0; ix < g.w; ++ix) {
        const S xv = x[(c * g.h + iy) * g.w + ix];
        if (xv == S(0)) continue;
        for (std::size_t o = 0; o < g.cout; ++o) {
          const S* krow = k.data() + ((c * g.cout + o) * g.k) * g.k;
          S* orow = out.data() + o * g.oh * g.ow;
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const std::ptrdiff_t oy =
                static_cast<std::ptrdiff_t>(iy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(g.oh)) continue;
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * g.stride + kx) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(g.ow)) continue;
              orow[oy * g.ow + ox] += xv * krow[ky * g.k + kx];
            }
          }
        }
      }
    }
  }
  ensure_finite(out, "transposed_conv2d");
  return out;
}

template <typename S>
Tensor<S> transposed_conv2d(const Tensor<S>& x, const Tensor<S>& k, std::size_t stride) {
  return transposed_conv2d(x, k, static_cast<const Tensor<S>*>(nullptr), stride);
}

template <typename S>
Var<S> transposed_conv2d(const Var<S>& x, const Var<S>& k, const Var<S>& bias,
                         std::size_t stride) {
  Tensor<S> out = transposed_conv2d(x->value, k->value, bias ? &bias->value : nullptr, stride);
  std::vector<Var<S>> parents = {x, k};
  if (bias) parents.push_back(bias);
  return make_op<S>(std::move(out), std::move(parents), [x, k, bias, stride](Node<S>& n) {
    const TConvGeom g = tconv_geometry(x->value.dims(), k->value.dims(), stride);
    Tensor<S> dx(x->value.dims());
    Tensor<S> dk(k->value.dims());
    for (std::size_t c = 0; c < g.cin; ++c) {
      for (std::size_t iy = 0; iy < g.h; ++iy) {
        for (std::size_t ix = 0; ix < g.w; ++ix) {
          const S xv = x->value[(c * g.h + iy) * g.w + ix];
          S dxv = S(0);
          for (std::size_t o = 0; o < g.cout; ++o) {
            const S* krow = k->value.data() + ((c * g.cout + o) * g.k) * g.k;
            S* dkrow = dk.data() + ((c * g.cout + o) * g.k) * g.k;
            const S* grow = n.grad.data() + o * g.oh * g.ow;
            for (std::size_t ky = 0; ky < g.k; ++ky) {
              const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * g.stride + ky) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(g.oh)) continue;
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * g.stride + kx) -
                                          static_cast<std::ptrdiff_t>(g.pad);
                if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(g.ow)) continue;
                const S go = grow[oy * g.ow + ox];
                dxv += go * krow[ky * g.k + kx];
                dkrow[ky * g.k + kx] += go * xv;
              }
            }
          }
          dx[(c * g.h + iy) * g.w + ix] = dxv;
        }
      }
    }
    if (x->requires_grad) x->accumulate(dx);
    if (k->requires_grad) k->accumulate(dk);
    if (bias && bias->requires_grad) {
      const TConvGeom gg = g;
      Tensor<S> db(bias->value.dims());
      for (std::size_t o = 0; o < gg.cout; ++o) {
        for (std::size_t p = 0; p < gg.oh * gg.ow; ++p) db[o] += n.grad[o * gg.oh * gg.ow + p];
      }
      bias->accumulate(db);
    }
  });
}

// ---------------------------------------------------------------------------
// bilinear resize (align_corners = false)

struct BilinearTap {
  std::size_t lo, hi;
  double w_hi;
};

inline std::vector<BilinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<BilinearTap> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) /
                 static_cast<double>(out) - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
    const std::size_t lo = static_cast<std::size_t>(src);
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& x, std::size_t h2, std::size_t w2) {
  if (x.rank() != 3) throw ShapeError("bilinear_resize expects [C x H x W]");
  if (h2 == 0 || w2 == 0) throw ShapeError("bilinear_resize target dims must be >= 1");
  const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto ty = bilinear_taps(h, h2);
  const auto tx = bilinear_taps(w, w2);
  Tensor<S> y({ch, h2, w2});
  for (std::size_t c = 0; c < ch; ++c) {
    const S* plane = x.data() + c * h * w;
    S* out = y.data() + c * h2 * w2;
    for (std::size_t oy = 0; oy < h2; ++oy) {
      const S wy = static_cast<S>(ty[oy].w_hi);
      for (std::size_t ox = 0; ox < w2; ++ox) {
        const S wx = static_cast<S>(tx[ox].w_hi);
        const S v00 = plane[ty[oy].lo * w + tx[ox].lo];
        const S v01 = plane[ty[oy].lo * w + tx[ox].hi];
        const S v10 = plane[ty[oy].hi * w + tx[ox].lo];
        const S v11 = plane[ty[oy].hi * w + tx[ox].hi];
        out[oy * w2 + ox] = (S(1) - wy) * ((S(1) - wx) * v00 + wx * v01) +
                            wy * ((S(1) - wx) * v10 + wx * v11);
      }
    }
  }
  ensure_finite(y, "bilinear_resize");
  return y;
}

template <typename S>
Var<S> bilinear_resize(const Var<S>& x, std::size_t h2, std::size_t w2) {
  Tensor<S> y = bilinear_resize(x->value, h2, w2);
  return make_op<S>(std::move(y), {x}, [x, h2, w2](Node<S>& n) {
    const std::size_t ch = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    const auto ty = bilinear_taps(h, h2);
    const auto tx = bilinear_taps(w, w2);
    Tensor<S> dx(x->value.dims());
    for (std::size_t c = 0; c < ch; ++c) {
      S* plane = dx.data() + c * h * w;
      const S* g = n.grad.data() + c * h2 * w2;
      for (std::size_t oy = 0; oy < h2; ++oy) {
        const S wy = static_cast<S>(ty[oy].w_hi);
        for (std::size_t ox = 0; ox < w2; ++ox) {
          const S wx = static_cast<S>(tx[ox].w_hi);
          const S go = g[oy * w2 + ox];
          plane[ty[oy].lo * w + tx[ox].lo] += go * (S(1) - wy) * (S(1) - wx);
          plane[ty[oy].lo * w + tx[ox].hi] += go * (S(1) - wy) * wx;
          plane[ty[oy].hi * w + tx[ox].lo] += go * wy * (S(1) - wx);
          plane[ty[oy].hi * w + tx[ox].hi] += go * wy * wx;
        }
      }
    }
    x->accumulate(dx);
  });
}

// ---------------------------------------------------------------------------
// row concat / slice, column concat, token<->plane reshapes

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t cols = parts[0]->value.dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p->value.rank() != 2 || p->value.dim(1) != cols) {
      throw ShapeError("concat_rows column mismatch");
    }
    rows += p->value.dim(0);
  }
  Tensor<S> out({rows, cols});
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p->value.data(), p->value.data() + p->value.size(), out.data() + r * cols);
    r += p->value.dim(0);
  }
  std::vector<Var<S>> parents = parts;
  return make_op<S>(std::move(out), std::move(parents), [parts, cols](Node<S>& n) {
    std::size_t r = 0;
    for (const auto& p : parts) {
      const std::size_t pr = p->value.dim(0);
      if (p->requires_grad) {
        Tensor<S> g({pr, cols});
        std::copy(n.grad.data() + r * cols, n.grad.data() + (r + pr) * cols, g.data());
        p->accumulate(g);
      }
      r += pr;
    }
  });
}

template <typename S>
Var<S> slice_rows(const Var<S>& x, std::size_t begin, std::size_t count) {
  if (x->value.rank() != 2 || begin + count > x->value.dim(0)) {
    throw ShapeError("slice_rows out of range");
  }
  const std::size_t cols = x->value.dim(1);
  Tensor<S> out({count, cols});
  std::copy(x->value.data() + begin * cols, x->value.data() + (begin + count) * cols, out.data());
  return make_op<S>(std::move(out), {x}, [x, begin, count, cols](Node<S>& n) {
    Tensor<S> g(x->value.dims());
    std::copy(n.grad.data(), n.grad.data() + count * cols, g.data() + begin * cols);
    x->accumulate(g);
  });
}

template <typename S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(0) != b->value.dim(0)) {
    throw ShapeError("concat_cols row mismatch");
  }
  const std::size_t rows = a->value.dim(0), ca = a->value.dim(1), cb = b->value.dim(1);
  Tensor<S> out({rows, ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(a->value.data() + r * ca, a->value.data() + (r + 1) * ca, out.data() + r * (ca + cb));
    std::copy(b->value.data() + r * cb, b->value.data() + (r + 1) * cb,
              out.data() + r * (ca + cb) + ca);
  }
  return make_op<S>(std::move(out), {a, b}, [a, b, rows, ca, cb](Node<S>& n) {
    if (a->requires_grad) {
      Tensor<S> g({rows, ca});
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy(n.grad.data() + r * (ca + cb), n.grad.data() + r * (ca + cb) + ca,
                  g.data() + r * ca);
      }
      a->accumulate(g);
    }
    if (b->requires_grad) {
      Tensor<S> g({rows, cb});
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy(n.grad.data() + r * (ca + cb) + ca, n.grad.data() + (r + 1) * (ca + cb),
                  g.data() + r * cb);
      }
      b->accumulate(g);
    }
  });
}

// [N x C] tokens of an h x w grid -> [C x h x w] planes.
template <typename S>
Var<S> tokens_to_planes(const Var<S>& x, std::size_t h, std::size_t w) {
  if (x->value.rank() != 2 || x->value.dim(0) != h * w) throw ShapeError("tokens_to_planes dims");
  const std::size_t n = h * w, c = x->value.dim(1);
  Tensor<S> out({c, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * n + i] = x->value[i * c + ch];
  }
  return make_op<S>(std::move(out), {x}, [x, n, c](Node<S>& nd) {
    Tensor<S> g(x->value.dims());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) g[i * c + ch] = nd.grad[ch * n + i];
    }
    x->accumulate(g);
  });
}

// [C x h x w] planes -> [N x C] tokens.
template <typename S>
Var<S> planes_to_tokens(const Var<S>& x) {
  if (x->value.rank() != 3) throw ShapeError("planes_to_tokens expects [C x h x w]");
  const std::size_t c = x->value.dim(0), n = x->value.dim(1) * x->value.dim(2);
  Tensor<S> out({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] = x->value[ch * n + i];
  }
  return make_op<S>(std::move(out), {x}, [x, n, c](Node<S>& nd) {
    Tensor<S> g(x->value.dims());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) g[ch * n + i] = nd.grad[i * c + ch];
    }
    x->accumulate(g);
  });
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape dims) {
  Tensor<S> out = x->value.reshaped(dims);
  Shape orig = x->value.dims();
  return make_op<S>(std::move(out), {x}, [x, orig = std::move(orig)](Node<S>& n) {
    x->accumulate(n.grad.reshaped(orig));
  });
}

// ---------------------------------------------------------------------------
// reductions and loss pieces

template <typename S>
Var<S> sum_all(const Var<S>& x) {
  S total = S(0);
  for (std::size_t i = 0; i < x->value.size(); ++i) total += x->value[i];
  return make_op<S>(Tensor<S>::scalar(total), {x}, [x](Node<S>& n) {
    x->accumulate(Tensor<S>::full(x->value.dims(), n.grad[0]));
  });
}

template <typename S>
Var<S> mean_all(const Var<S>& x) {
  return scale(sum_all(x), S(1) / static_cast<S>(x->value.size()));
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  Tensor<S> y(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const S v = x[i];
    y[i] = (v >= S(0)) ? S(1) / (S(1) + std::exp(-v))
                       : std::exp(v) / (S(1) + std::exp(v));
  }
  ensure_finite(y, "sigmoid");
  return y;
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
  Tensor<S> y = sigmoid(x->value);
  Tensor<S> y_copy = y;
  return make_op<S>(std::move(y), {x}, [x, y = std::move(y_copy)](Node<S>& n) {
    Tensor<S> dx(y.dims());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = n.grad[i] * y[i] * (S(1) - y[i]);
    x->accumulate(dx);
  });
}

// Stable per-element binary cross-entropy from logits.
template <typename S>
Tensor<S> bce_from_logits(const Tensor<S>& logits, const Tensor<S>& targets) {
  if (!logits.same_dims(targets)) throw ShapeError("bce dims mismatch");
  Tensor<S> l(logits.dims());
  for (std::size_t i = 0; i < l.size(); ++i) {
    const S z = logits[i];
    const S y = targets[i];
    l[i] = std::max(z, S(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  ensure_finite(l, "bce_from_logits");
  return l;
}

// Bootstrapped cross-entropy: mean of the ceil(top_p * n) largest per-element
// losses. Gradients flow only through the selected elements; ties break by
// lowest index so selection is deterministic.
template <typename S>
Var<S> bootstrapped_ce(const Var<S>& logits, const Tensor<S>& targets, double top_p) {
  if (!(top_p > 0.0) || top_p > 1.0) throw ConfigError("top_p must be in (0, 1]");
  Tensor<S> losses = bce_from_logits(logits->value, targets);
  const std::size_t n = losses.size();
  const std::size_t k = static_cast<std::size_t>(std::ceil(top_p * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return losses[a] > losses[b]; });
  idx.resize(k);
  S total = S(0);
  for (std::size_t i : idx) total += losses[i];
  const S loss = total / static_cast<S>(k);
  Tensor<S> targets_copy = targets;
  return make_op<S>(
      Tensor<S>::scalar(loss), {logits},
      [logits, targets = std::move(targets_copy), idx = std::move(idx), k](Node<S>& n) {
        Tensor<S> dz(logits->value.dims());
        const S g = n.grad[0] / static_cast<S>(k);
        for (std::size_t i : idx) {
          const S z = logits->value[i];
          const S p = (z >= S(0)) ? S(1) / (S(1) + std::exp(-z))
                                  : std::exp(z) / (S(1) + std::exp(z));
          dz[i] = g * (p - targets[i]);
        }
        logits->accumulate(dz);
      });
}

}  // namespace simvos
