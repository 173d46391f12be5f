#pragma once

// Token refinement: pools a memory frame's N tokens into K_f foreground and
// K_b background prototypes. The assignment logits come from a small conv +
// fc trunk over the tokens concatenated with the downsampled mask; rows at
// non-target tokens are suppressed to -inf before a column softmax, so each
// prototype is a convex combination of eligible tokens only.

#include <map>
#include <vector>

#include "simvos/tokenizer.hpp"

namespace simvos {

template <typename S>
struct TRWeights {
  std::size_t channels = 0;
  Param<S> conv;  // [(C/4) x (C+1) x 3 x 3], no bias
  // One fc head per distinct prototype count; equal K_f/K_b share one head.
  std::map<std::size_t, Param<S>> fc;

  TRWeights() = default;
  TRWeights(std::size_t c, std::vector<std::size_t> ks)
      : channels(c), conv("tr.conv", Tensor<S>({c / 4, c + 1, 3, 3})) {
    if (c % 4 != 0) throw ConfigError("TR needs embed dim divisible by 4");
    for (std::size_t k : ks) {
      if (k == 0) throw ConfigError("prototype count must be positive");
      fc.try_emplace(k, "tr.fc" + std::to_string(k), Tensor<S>({c / 4, k}));
    }
  }

  Param<S>& head(std::size_t k) {
    auto it = fc.find(k);
    if (it == fc.end()) throw ConfigError("no TR head for K=" + std::to_string(k));
    return it->second;
  }

  void init(Rng& rng, double stddev) {
    rng.fill_trunc_normal(conv.value(), stddev);
    for (auto& [k, p] : fc) rng.fill_trunc_normal(p.value(), stddev);
  }

  void collect(ParamRefs<S>& out) {
    out.push_back(&conv);
    for (auto& [k, p] : fc) out.push_back(&p);
  }
};

// phi: per-patch foreground fraction [N x 1] plus the target predicate
// (any foreground pixel in the patch makes it a target token).
template <typename S>
struct MaskDownsample {
  Tensor<S> frac;            // [N x 1]
  std::vector<bool> target;  // frac > 0
};

template <typename S>
MaskDownsample<S> downsample_mask(const Mask& mask, std::size_t p) {
  const GridShape grid = patch_grid(mask.h, mask.w, p);
  MaskDownsample<S> out;
  out.frac = Tensor<S>({grid.count(), 1});
  out.target.resize(grid.count());
  for (std::size_t gy = 0; gy < grid.rows; ++gy) {
    for (std::size_t gx = 0; gx < grid.cols; ++gx) {
      std::size_t fg = 0;
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          fg += (mask.at(gy * p + py, gx * p + px) != 0);
        }
      }
      const std::size_t i = gy * grid.cols + gx;
      out.frac[i] = static_cast<S>(fg) / static_cast<S>(p * p);
      out.target[i] = fg > 0;
    }
  }
  return out;
}

// W = fc(GELU(conv([H, phi(M)])))  ->  [N x K]
template <typename S>
Var<S> cluster_logits(const Var<S>& tokens, const Tensor<S>& frac, const GridShape& grid,
                      TRWeights<S>& w, std::size_t k) {
  const std::size_t c = tokens->value.dim(1);
  if (c != w.channels) throw ConfigError("TR weights channel mismatch");
  if (tokens->value.dim(0) != grid.count() || frac.dim(0) != grid.count()) {
    throw ShapeError("cluster_logits token/grid mismatch");
  }
  Var<S> with_mask = concat_cols(tokens, constant(frac));          // [N x (C+1)]
  Var<S> planes = tokens_to_planes(with_mask, grid.rows, grid.cols);
  Var<S> feat = gelu(conv2d(planes, w.conv.var, Var<S>(), 1, 1));  // [(C/4) x gh x gw]
  Var<S> reduced = planes_to_tokens(feat);                         // [N x C/4]
  return matmul(reduced, w.head(k).var);                           // [N x K]
}

// sigma: rows at non-target tokens to -inf.
template <typename S>
Var<S> suppress_nontarget(const Var<S>& logits, const std::vector<bool>& target) {
  return mask_rows_neg_inf(logits, target);
}

// Column softmax of the suppressed logits. Each column sums to 1 and
// suppressed rows are exactly zero.
template <typename S>
Var<S> assign(const Var<S>& suppressed) {
  return softmax_over_axis(suppressed, 0);
}

// hz = W_hat^T H  ->  [K x C]
template <typename S>
Var<S> pool_prototypes(const Var<S>& assignment, const Var<S>& tokens) {
  return matmul_tn(assignment, tokens);
}

enum class PrototypeKind { Foreground, Background };

template <typename S>
struct PrototypeSet {
  Var<S> protos;  // [K x C]
  PrototypeKind kind = PrototypeKind::Foreground;
  FrameTag source = FrameTag::Memory1;
  // Set when the frame had no eligible tokens for this kind; the prototypes
  // are zero vectors and carry no information.
  bool inert = false;
};

template <typename S>
struct RefineResult {
  PrototypeSet<S> fg, bg;
  Var<S> assign_fg;  // [N x K_f]; zeros when inert
  Var<S> assign_bg;  // [N x K_b]
  std::vector<bool> target_fg, target_bg;
};

// Full TR for one memory frame: foreground via the mask, background via its
// complement. A side with no eligible tokens yields inert zero prototypes.
template <typename S>
RefineResult<S> refine_memory(const Var<S>& tokens, const GridShape& grid, const Mask& mask,
                              TRWeights<S>& w, std::size_t k_fg, std::size_t k_bg,
                              FrameTag source = FrameTag::Memory1) {
  const std::size_t patch = mask.h / grid.rows;
  if (grid.rows * patch != mask.h || grid.cols * patch != mask.w ||
      mask.w / grid.cols != patch) {
    throw ShapeError("mask dims do not match token grid");
  }
  const MaskDownsample<S> fg_ds = downsample_mask<S>(mask, patch);

  Mask inverse(mask.h, mask.w);
  for (std::size_t i = 0; i < mask.v.size(); ++i) inverse.v[i] = mask.v[i] ? 0 : 1;
  const MaskDownsample<S> bg_ds = downsample_mask<S>(inverse, patch);

  const std::size_t c = tokens->value.dim(1);
  RefineResult<S> out;
  out.target_fg = fg_ds.target;
  out.target_bg = bg_ds.target;

  const auto run_side = [&](const MaskDownsample<S>& ds, std::size_t k, PrototypeKind kind) {
    PrototypeSet<S> set;
    set.kind = kind;
    set.source = source;
    bool any = false;
    for (bool t : ds.target) any = any || t;
    Var<S> assignment;
    if (!any) {
      set.protos = constant(Tensor<S>({k, c}));
      set.inert = true;
      assignment = constant(Tensor<S>({tokens->value.dim(0), k}));
    } else {
      Var<S> logits = cluster_logits(tokens, ds.frac, grid, w, k);
      assignment = assign(suppress_nontarget(logits, ds.target));
      set.protos = pool_prototypes(assignment, tokens);
    }
    return std::make_pair(set, assignment);
  };

  auto [fg_set, fg_a] = run_side(fg_ds, k_fg, PrototypeKind::Foreground);
  auto [bg_set, bg_a] = run_side(bg_ds, k_bg, PrototypeKind::Background);
  out.fg = std::move(fg_set);
  out.bg = std::move(bg_set);
  out.assign_fg = std::move(fg_a);
  out.assign_bg = std::move(bg_a);
  return out;
}

}  // namespace simvos
