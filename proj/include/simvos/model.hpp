#pragma once

// Whole-model weight container plus the frames-to-logits forward pass shared
// by training and online inference.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "simvos/backbone.hpp"
#include "simvos/decoder.hpp"

namespace simvos {

inline constexpr double kInitStd = 0.02;

template <typename S>
struct Model {
  ViTConfig cfg;
  EmbeddingTables<S> tables;
  std::vector<BlockWeights<S>> blocks;
  std::optional<TRWeights<S>> tr;
  DecoderWeights<S> decoder;

  explicit Model(const ViTConfig& config) : cfg(config) {
    cfg.validate();
    tables = EmbeddingTables<S>(cfg.patch, cfg.embed_dim);
    blocks.reserve(cfg.num_layers);
    for (std::size_t i = 0; i < cfg.num_layers; ++i) {
      blocks.emplace_back("blocks." + std::to_string(i), cfg.embed_dim, cfg.mlp_ratio);
    }
    if (cfg.tr_enabled) {
      tr.emplace(cfg.embed_dim, std::vector<std::size_t>{cfg.k_fg, cfg.k_bg});
    }
    decoder = DecoderWeights<S>(cfg.embed_dim);
  }

  void init_weights(Rng& rng) {
    tables.init(rng, kInitStd);
    for (auto& b : blocks) b.init(rng, kInitStd);
    if (tr) tr->init(rng, kInitStd);
    decoder.init(rng, kInitStd);
  }

  ParamRefs<S> params() {
    ParamRefs<S> out;
    tables.collect(out);
    for (auto& b : blocks) b.collect(out);
    if (tr) tr->collect(out);
    decoder.collect(out);
    return out;
  }

  Param<S>* find_param(const std::string& name) {
    for (Param<S>* p : params()) {
      if (p->name == name) return p;
    }
    return nullptr;
  }
};

template <typename S>
struct ForwardInput {
  const Tensor<S>* mem1_frame = nullptr;
  const Mask* mem1_mask = nullptr;
  const Tensor<S>* mem2_frame = nullptr;
  const Mask* mem2_mask = nullptr;
  const Tensor<S>* search_frame = nullptr;
};

template <typename S>
struct ForwardOutput {
  Var<S> logits;  // [H x W]
  BackboneResult<S> backbone;
  GridShape grid;
};

template <typename S>
TokenSeq<S> tokenize_memory(Model<S>& m, const Tensor<S>& frame, const Mask& mask) {
  const GridShape grid = patch_grid(frame.dim(1), frame.dim(2), m.cfg.patch);
  TokenSeq<S> seq = embed_patches(patchify(frame, m.cfg.patch), m.tables, grid);
  return encode_mask_into_memory(seq, flatten_mask<S>(mask, m.cfg.patch), m.tables);
}

template <typename S>
TokenSeq<S> tokenize_search(Model<S>& m, const Tensor<S>& frame) {
  const GridShape grid = patch_grid(frame.dim(1), frame.dim(2), m.cfg.patch);
  return embed_patches(patchify(frame, m.cfg.patch), m.tables, grid);
}

// Full pass: serialize, run the scheduled backbone, decode search logits.
template <typename S>
ForwardOutput<S> segment_forward(Model<S>& m, const ForwardInput<S>& in,
                                 AttnExec exec = AttnExec::BlockSkip) {
  if (!in.mem1_frame || !in.mem1_mask || !in.mem2_frame || !in.mem2_mask || !in.search_frame) {
    throw ConfigError("segment_forward requires two memory frames with masks and a search frame");
  }
  TokenSeq<S> mem1 = tokenize_memory(m, *in.mem1_frame, *in.mem1_mask);
  TokenSeq<S> mem2 = tokenize_memory(m, *in.mem2_frame, *in.mem2_mask);
  TokenSeq<S> search = tokenize_search(m, *in.search_frame);
  TokenSeq<S> joint = build_joint_sequence(mem1, mem2, search);

  ForwardOutput<S> out;
  out.backbone = run_backbone(joint, m.cfg, m.blocks, m.tr ? &*m.tr : nullptr, in.mem1_mask,
                              in.mem2_mask, exec);
  out.grid = search.segments[0].grid;
  out.logits = decode_mask(out.backbone.search_tokens, out.grid, m.decoder,
                           in.search_frame->dim(1), in.search_frame->dim(2));
  return out;
}

}  // namespace simvos
