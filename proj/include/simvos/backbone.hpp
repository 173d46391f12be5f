#pragma once

// ViT-style backbone over the joint sequence. The first L layers restrict
// attention to tokens of the same frame; if token refinement is enabled the
// memory segments are replaced by their prototypes after layer L and the
// remaining layers run global attention over the shortened sequence.

#include <optional>
#include <string>
#include <vector>

#include "simvos/attention.hpp"
#include "simvos/token_refine.hpp"
#include "simvos/tokenizer.hpp"

namespace simvos {

struct ViTConfig {
  std::size_t num_layers = 4;
  std::size_t embed_dim = 64;   // C
  std::size_t num_heads = 4;
  std::size_t patch = 8;        // P
  std::size_t within_frame_layers = 0;  // L
  bool tr_enabled = false;
  std::size_t k_fg = 384;
  std::size_t k_bg = 384;
  std::size_t mlp_ratio = 4;

  void validate() const {
    if (num_layers == 0) throw ConfigError("num_layers must be positive");
    if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
      throw ConfigError("embed_dim must be a positive multiple of num_heads");
    }
    if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be divisible by 4");
    if (patch == 0) throw ConfigError("patch size must be positive");
    if (within_frame_layers > num_layers) {
      throw ConfigError("within-frame layer count exceeds depth");
    }
    if (tr_enabled && within_frame_layers < 1) {
      throw ConfigError("token refinement requires at least one within-frame layer");
    }
    if (tr_enabled && (k_fg == 0 || k_bg == 0)) {
      throw ConfigError("prototype counts must be positive");
    }
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  }

  static ViTConfig toy() {
    ViTConfig c;
    c.num_layers = 4;
    c.embed_dim = 64;
    c.num_heads = 4;
    c.patch = 8;
    return c;
  }
  static ViTConfig base_like() {
    ViTConfig c;
    c.num_layers = 12;
    c.embed_dim = 768;
    c.num_heads = 12;
    c.patch = 16;
    c.within_frame_layers = 4;
    c.k_fg = 384;
    c.k_bg = 384;
    return c;
  }
  static ViTConfig large_like() {
    ViTConfig c;
    c.num_layers = 24;
    c.embed_dim = 1024;
    c.num_heads = 16;
    c.patch = 16;
    c.within_frame_layers = 4;
    c.k_fg = 384;
    c.k_bg = 384;
    return c;
  }
};

template <typename S>
struct BlockWeights {
  Param<S> ln1_gamma, ln1_beta;
  Param<S> qkv_w, qkv_b;    // [C x 3C], [3C]
  Param<S> proj_w, proj_b;  // [C x C], [C]
  Param<S> ln2_gamma, ln2_beta;
  Param<S> fc1_w, fc1_b;    // [C x rC]
  Param<S> fc2_w, fc2_b;    // [rC x C]

  BlockWeights() = default;
  BlockWeights(const std::string& prefix, std::size_t c, std::size_t mlp_ratio)
      : ln1_gamma(prefix + ".ln1.gamma", Tensor<S>::full({c}, S(1))),
        ln1_beta(prefix + ".ln1.beta", Tensor<S>({c})),
        qkv_w(prefix + ".qkv.w", Tensor<S>({c, 3 * c})),
        qkv_b(prefix + ".qkv.b", Tensor<S>({3 * c})),
        proj_w(prefix + ".proj.w", Tensor<S>({c, c})),
        proj_b(prefix + ".proj.b", Tensor<S>({c})),
        ln2_gamma(prefix + ".ln2.gamma", Tensor<S>::full({c}, S(1))),
        ln2_beta(prefix + ".ln2.beta", Tensor<S>({c})),
        fc1_w(prefix + ".mlp.fc1.w", Tensor<S>({c, mlp_ratio * c})),
        fc1_b(prefix + ".mlp.fc1.b", Tensor<S>({mlp_ratio * c})),
        fc2_w(prefix + ".mlp.fc2.w", Tensor<S>({mlp_ratio * c, c})),
        fc2_b(prefix + ".mlp.fc2.b", Tensor<S>({c})) {}

  void init(Rng& rng, double stddev) {
    rng.fill_trunc_normal(qkv_w.value(), stddev);
    rng.fill_trunc_normal(proj_w.value(), stddev);
    rng.fill_trunc_normal(fc1_w.value(), stddev);
    rng.fill_trunc_normal(fc2_w.value(), stddev);
  }

  void collect(ParamRefs<S>& out) {
    for (Param<S>* p : {&ln1_gamma, &ln1_beta, &qkv_w, &qkv_b, &proj_w, &proj_b, &ln2_gamma,
                        &ln2_beta, &fc1_w, &fc1_b, &fc2_w, &fc2_b}) {
      out.push_back(p);
    }
  }
};

// Block-diagonal policy: token i may attend to j iff they share a frame tag.
template <typename S>
AttentionPolicy within_frame_mask(const TokenSeq<S>& seq) {
  seq.validate();
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  for (const auto& s : seq.segments) blocks.emplace_back(s.begin, s.begin + s.count);
  return AttentionPolicy::within_frame(std::move(blocks));
}

template <typename S>
Var<S> multi_head_attention(const Var<S>& x, BlockWeights<S>& w, std::size_t heads,
                            const AttentionPolicy& policy,
                            AttnExec exec = AttnExec::BlockSkip) {
  Var<S> qkv = linear(x, w.qkv_w.var, w.qkv_b.var);
  Var<S> ctx = attention(qkv, heads, policy, exec);
  return linear(ctx, w.proj_w.var, w.proj_b.var);
}

// Pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x)).
template <typename S>
Var<S> transformer_block(const Var<S>& x, BlockWeights<S>& w, std::size_t heads,
                         const AttentionPolicy& policy,
                         AttnExec exec = AttnExec::BlockSkip) {
  Var<S> attended =
      multi_head_attention(layer_norm(x, w.ln1_gamma.var, w.ln1_beta.var), w, heads, policy, exec);
  Var<S> h = add(x, attended);
  Var<S> mlp = linear(gelu(linear(layer_norm(h, w.ln2_gamma.var, w.ln2_beta.var), w.fc1_w.var,
                                  w.fc1_b.var)),
                      w.fc2_w.var, w.fc2_b.var);
  return add(h, mlp);
}

struct LayerTrace {
  std::size_t seq_len = 0;
  AttentionPolicy::Kind policy = AttentionPolicy::Kind::Global;
};

template <typename S>
struct BackboneResult {
  Var<S> search_tokens;  // [N x C]
  std::optional<RefineResult<S>> refine_mem1, refine_mem2;
  std::vector<LayerTrace> trace;
};

// Memory masks are required iff token refinement is enabled.
template <typename S>
BackboneResult<S> run_backbone(const TokenSeq<S>& h0, const ViTConfig& cfg,
                               std::vector<BlockWeights<S>>& blocks, TRWeights<S>* tr,
                               const Mask* mask_mem1, const Mask* mask_mem2,
                               AttnExec exec = AttnExec::BlockSkip) {
  cfg.validate();
  h0.validate();
  if (blocks.size() != cfg.num_layers) throw ConfigError("block count mismatch");
  if (h0.segments.size() != 3) throw StructureError("backbone expects a three-frame sequence");
  if (cfg.tr_enabled && (!tr || !mask_mem1 || !mask_mem2)) {
    throw ConfigError("token refinement needs TR weights and both memory masks");
  }

  const std::size_t heads = cfg.num_heads;
  const AttentionPolicy within = within_frame_mask(h0);
  BackboneResult<S> result;

  Var<S> x = h0.tokens;
  std::size_t layer = 0;
  for (; layer < cfg.within_frame_layers; ++layer) {
    result.trace.push_back({x->value.dim(0), AttentionPolicy::Kind::WithinFrame});
    x = transformer_block(x, blocks[layer], heads, within, exec);
  }

  const Segment seg1 = h0.segment(FrameTag::Memory1);
  const Segment seg2 = h0.segment(FrameTag::Memory2);
  const Segment seg3 = h0.segment(FrameTag::Search);

  Var<S> search;
  if (cfg.tr_enabled) {
    Var<S> mem1 = slice_rows(x, seg1.begin, seg1.count);
    Var<S> mem2 = slice_rows(x, seg2.begin, seg2.count);
    search = slice_rows(x, seg3.begin, seg3.count);
    result.refine_mem1 =
        refine_memory(mem1, seg1.grid, *mask_mem1, *tr, cfg.k_fg, cfg.k_bg, FrameTag::Memory1);
    result.refine_mem2 =
        refine_memory(mem2, seg2.grid, *mask_mem2, *tr, cfg.k_fg, cfg.k_bg, FrameTag::Memory2);
    x = concat_rows<S>({result.refine_mem1->fg.protos, result.refine_mem1->bg.protos,
                        result.refine_mem2->fg.protos, result.refine_mem2->bg.protos, search});
    const std::size_t expect = seg3.count + 2 * (cfg.k_fg + cfg.k_bg);
    if (x->value.dim(0) != expect) {
      throw StructureError("refined sequence length mismatch");
    }
  }

  const AttentionPolicy global = AttentionPolicy::global(x->value.dim(0));
  for (; layer < cfg.num_layers; ++layer) {
    result.trace.push_back({x->value.dim(0), AttentionPolicy::Kind::Global});
    x = transformer_block(x, blocks[layer], heads, global, exec);
  }

  if (cfg.tr_enabled) {
    const std::size_t proto_len = 2 * (cfg.k_fg + cfg.k_bg);
    result.search_tokens = slice_rows(x, proto_len, seg3.count);
  } else {
    result.search_tokens = slice_rows(x, seg3.begin, seg3.count);
  }
  return result;
}

}  // namespace simvos
