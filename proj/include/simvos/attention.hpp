#pragma once

// Multi-head scaled dot-product attention with a pluggable attendance
// policy. Two execution paths exist: MaskedDense materializes -inf scores
// for disallowed pairs and lets the softmax zero them; BlockSkip visits
// only each query's allowed span. Both share the same inner kernels and
// produce identical weights (tested), so BlockSkip is the default.

#include <cstddef>
#include <utility>
#include <vector>

#include "simvos/ops.hpp"

namespace simvos {

struct AttentionPolicy {
  enum class Kind { Global, WithinFrame };
  Kind kind = Kind::Global;
  std::size_t length = 0;
  // Partition of [0, length) into per-frame blocks when within-frame.
  std::vector<std::pair<std::size_t, std::size_t>> blocks;

  static AttentionPolicy global(std::size_t length) {
    AttentionPolicy p;
    p.kind = Kind::Global;
    p.length = length;
    p.blocks = {{0, length}};
    return p;
  }

  static AttentionPolicy within_frame(std::vector<std::pair<std::size_t, std::size_t>> blocks) {
    AttentionPolicy p;
    p.kind = Kind::WithinFrame;
    std::size_t expect = 0;
    for (const auto& [b, e] : blocks) {
      if (b != expect || e <= b) throw StructureError("attention blocks must tile the sequence");
      expect = e;
    }
    p.length = expect;
    p.blocks = std::move(blocks);
    return p;
  }

  // Allowed key range for query i.
  std::pair<std::size_t, std::size_t> span_of(std::size_t i) const {
    if (kind == Kind::Global) return {0, length};
    for (const auto& blk : blocks) {
      if (i >= blk.first && i < blk.second) return blk;
    }
    throw StructureError("query index outside policy");
  }

  bool allowed(std::size_t i, std::size_t j) const {
    const auto [b, e] = span_of(i);
    return j >= b && j < e;
  }

  double allowed_fraction() const {
    std::size_t allowed = 0;
    for (const auto& [b, e] : blocks) allowed += (e - b) * (e - b);
    if (kind == Kind::Global) allowed = length * length;
    return static_cast<double>(allowed) / (static_cast<double>(length) * length);
  }
};

enum class AttnExec { MaskedDense, BlockSkip };

namespace detail {

// Shared inner kernels; both execution paths call these with the same
// operands so allowed pairs get bit-identical results.
template <typename S>
inline S dot_span(const S* a, const S* b, std::size_t n) {
  S acc = S(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename S>
inline void axpy_span(S* acc, const S* v, S w, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += w * v[i];
}

}  // namespace detail

// qkv is [T x 3C] (packed Q | K | V). Returns the attended context [T x C]
// with heads concatenated. If weights_out is non-null it receives the
// post-softmax attention weights, laid out [heads x T x T].
template <typename S>
Tensor<S> attention_forward(const Tensor<S>& qkv, std::size_t heads,
                            const AttentionPolicy& policy, AttnExec exec,
                            Tensor<S>* weights_out) {
  if (qkv.rank() != 2 || qkv.dim(1) % 3 != 0) throw ShapeError("attention qkv must be [T x 3C]");
  const std::size_t t = qkv.dim(0);
  const std::size_t c = qkv.dim(1) / 3;
  if (heads == 0 || c % heads != 0) throw ConfigError("embed dim must divide by heads");
  if (policy.length != t) throw StructureError("policy length mismatch");
  const std::size_t d = c / heads;
  const S scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(d)));
  const std::size_t row = 3 * c;

  Tensor<S> ctx({t, c});
  Tensor<S> weights({heads, t, t});
  std::vector<S> srow(t);

  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t qo = h * d, ko = c + h * d, vo = 2 * c + h * d;
    S* wplane = weights.data() + h * t * t;
    for (std::size_t i = 0; i < t; ++i) {
      const auto [sb, se] = policy.span_of(i);
      const std::size_t jb = (exec == AttnExec::BlockSkip) ? sb : 0;
      const std::size_t je = (exec == AttnExec::BlockSkip) ? se : t;
      const S* qi = qkv.data() + i * row + qo;
      S m = neg_inf<S>();
      for (std::size_t j = jb; j < je; ++j) {
        S s;
        if (j >= sb && j < se) {
          s = scale * detail::dot_span(qi, qkv.data() + j * row + ko, d);
        } else {
          s = neg_inf<S>();
        }
        srow[j] = s;
        m = std::max(m, s);
      }
      S sum = S(0);
      S* wrow = wplane + i * t;
      for (std::size_t j = jb; j < je; ++j) {
        const S e = std::exp(srow[j] - m);
        wrow[j] = e;
        sum += e;
      }
      const S inv = S(1) / sum;
      S* crow = ctx.data() + i * c + h * d;
      for (std::size_t j = jb; j < je; ++j) {
        wrow[j] *= inv;
        detail::axpy_span(crow, qkv.data() + j * row + vo, wrow[j], d);
      }
    }
  }
  ensure_finite(ctx, "attention");
  if (weights_out) *weights_out = std::move(weights);
  return ctx;
}

template <typename S>
Var<S> attention(const Var<S>& qkv, std::size_t heads, const AttentionPolicy& policy,
                 AttnExec exec = AttnExec::BlockSkip) {
  Tensor<S> weights;
  Tensor<S> ctx = attention_forward(qkv->value, heads, policy, exec, &weights);
  return make_op<S>(
      std::move(ctx), {qkv}, [qkv, heads, policy, weights = std::move(weights)](Node<S>& n) {
        const std::size_t t = qkv->value.dim(0);
        const std::size_t c = qkv->value.dim(1) / 3;
        const std::size_t d = c / heads;
        const S scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(d)));
        const std::size_t row = 3 * c;
        Tensor<S> dqkv(qkv->value.dims());
        std::vector<S> dw(t), ds(t);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t qo = h * d, ko = c + h * d, vo = 2 * c + h * d;
          const S* wplane = weights.data() + h * t * t;
          for (std::size_t i = 0; i < t; ++i) {
            const auto [jb, je] = policy.span_of(i);
            const S* wrow = wplane + i * t;
            const S* gctx = n.grad.data() + i * c + h * d;
            const S* qi = qkv->value.data() + i * row + qo;
            // dV and dW
            S wd = S(0);
            for (std::size_t j = jb; j < je; ++j) {
              detail::axpy_span(dqkv.data() + j * row + vo, gctx, wrow[j], d);
              dw[j] = detail::dot_span(gctx, qkv->value.data() + j * row + vo, d);
              wd += wrow[j] * dw[j];
            }
            // softmax + score backward
            S* dqi = dqkv.data() + i * row + qo;
            for (std::size_t j = jb; j < je; ++j) {
              const S dsj = wrow[j] * (dw[j] - wd) * scale;
              detail::axpy_span(dqi, qkv->value.data() + j * row + ko, dsj, d);
              detail::axpy_span(dqkv.data() + j * row + ko, qi, dsj, d);
            }
          }
        }
        qkv->accumulate(dqkv);
      });
}

}  // namespace simvos
