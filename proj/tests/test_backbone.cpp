#include <cmath>

#include "doctest.h"
#include "simvos/model.hpp"
#include "simvos/rng.hpp"

using namespace simvos;

namespace {

// A joint three-frame sequence over raw token values (no embedding), so the
// backbone can be exercised in isolation.
TokenSeq<float> raw_joint(const Tensor<float>& tokens, std::size_t n, const GridShape& grid) {
  TokenSeq<float> seq;
  seq.tokens = constant(tokens);
  seq.segments = {{FrameTag::Memory1, 0, n, grid},
                  {FrameTag::Memory2, n, n, grid},
                  {FrameTag::Search, 2 * n, n, grid}};
  return seq;
}

std::vector<BlockWeights<float>> make_blocks(const ViTConfig& cfg, Rng& rng) {
  std::vector<BlockWeights<float>> blocks;
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    blocks.emplace_back("blocks." + std::to_string(i), cfg.embed_dim, cfg.mlp_ratio);
    blocks.back().init(rng, 0.1);
  }
  return blocks;
}

}  // namespace

TEST_CASE("within_frame_mask structure") {
  Rng rng(1);
  const GridShape grid{1, 2};
  Tensor<float> tokens({6, 8});
  rng.fill_uniform(tokens, -1.0, 1.0);
  auto seq = raw_joint(tokens, 2, grid);
  const auto policy = within_frame_mask(seq);

  CHECK(policy.kind == AttentionPolicy::Kind::WithinFrame);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(policy.allowed(i, j) == (i / 2 == j / 2));
    }
  }
  CHECK(policy.allowed_fraction() == doctest::Approx(1.0 / 3));
}

TEST_CASE("single-frame within policy equals global") {
  Rng rng(2);
  Tensor<float> tokens({4, 8});
  rng.fill_uniform(tokens, -1.0, 1.0);
  TokenSeq<float> seq;
  seq.tokens = constant(tokens);
  seq.segments = {{FrameTag::Search, 0, 4, {2, 2}}};
  const auto within = within_frame_mask(seq);
  const auto global = AttentionPolicy::global(4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(within.allowed(i, j));
      CHECK(global.allowed(i, j));
    }
  }

  BlockWeights<float> w("b", 8, 4);
  w.init(rng, 0.2);
  auto a = transformer_block(seq.tokens, w, 2, within);
  auto b = transformer_block(seq.tokens, w, 2, global);
  CHECK(exactly_equal(a->value, b->value));
}

TEST_CASE("non-contiguous segments are rejected") {
  Tensor<float> tokens({6, 8});
  TokenSeq<float> seq;
  seq.tokens = constant(tokens);
  seq.segments = {{FrameTag::Memory1, 0, 2, {1, 2}}, {FrameTag::Memory2, 3, 3, {1, 3}}};
  CHECK_THROWS_AS(within_frame_mask(seq), StructureError);
}

TEST_CASE("zero attention weights give uniform allowed weights and zero output") {
  Rng rng(3);
  Tensor<float> tokens({6, 8});
  rng.fill_uniform(tokens, -1.0, 1.0);
  auto seq = raw_joint(tokens, 2, {1, 2});
  const auto policy = within_frame_mask(seq);

  BlockWeights<float> w("b", 8, 4);  // all projections zero
  auto out = multi_head_attention(seq.tokens, w, 2, policy);
  for (std::size_t i = 0; i < out->value.size(); ++i) CHECK(out->value[i] == 0.0f);

  Tensor<float> zero_qkv({6, 24});
  Tensor<float> weights;
  attention_forward(zero_qkv, 2, policy, AttnExec::MaskedDense, &weights);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 6; ++j) {
        const float expect = policy.allowed(i, j) ? 0.5f : 0.0f;
        CHECK(weights[(h * 6 + i) * 6 + j] == expect);
      }
    }
  }
}

TEST_CASE("transformer block is the identity at zero weights and preserves shape") {
  Rng rng(4);
  for (std::size_t t : {std::size_t(3), std::size_t(7), std::size_t(12)}) {
    Tensor<float> x({t, 8});
    rng.fill_uniform(x, -1.0, 1.0);
    BlockWeights<float> w("b", 8, 4);
    auto out = transformer_block(constant(x), w, 2, AttentionPolicy::global(t));
    CHECK(out->value.dims() == x.dims());
    CHECK(exactly_equal(out->value, x));
  }
}

TEST_CASE("residual connections matter") {
  Rng rng(5);
  Tensor<float> x({4, 8});
  rng.fill_uniform(x, -1.0, 1.0);
  BlockWeights<float> w("b", 8, 4);
  w.init(rng, 0.3);
  const auto policy = AttentionPolicy::global(4);
  auto with_residual = transformer_block(constant(x), w, 2, policy);

  // the same block wiring without the residual adds
  auto xin = constant(x);
  auto attended = multi_head_attention(layer_norm(xin, w.ln1_gamma.var, w.ln1_beta.var), w, 2,
                                       policy);
  auto mlp_only = linear(
      gelu(linear(layer_norm(attended, w.ln2_gamma.var, w.ln2_beta.var), w.fc1_w.var,
                  w.fc1_b.var)),
      w.fc2_w.var, w.fc2_b.var);
  CHECK_FALSE(exactly_equal(with_residual->value, mlp_only->value));
}

TEST_CASE("run_backbone schedules: all-global when L=0 and TR off") {
  Rng rng(6);
  ViTConfig cfg = ViTConfig::toy();
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.num_layers = 3;
  auto blocks = make_blocks(cfg, rng);
  Tensor<float> tokens({12, 16});
  rng.fill_uniform(tokens, -1.0, 1.0);
  auto seq = raw_joint(tokens, 4, {2, 2});
  auto result = run_backbone(seq, cfg, blocks, nullptr, nullptr, nullptr);
  REQUIRE(result.trace.size() == 3);
  for (const auto& layer : result.trace) {
    CHECK(layer.policy == AttentionPolicy::Kind::Global);
    CHECK(layer.seq_len == 12);
  }
  CHECK(result.search_tokens->value.dims() == Shape{4, 16});
}

TEST_CASE("run_backbone with TR shortens the global tail") {
  Rng rng(7);
  ViTConfig cfg;
  cfg.num_layers = 4;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.patch = 4;
  cfg.within_frame_layers = 2;
  cfg.tr_enabled = true;
  cfg.k_fg = 3;
  cfg.k_bg = 3;
  auto blocks = make_blocks(cfg, rng);
  TRWeights<float> tr(cfg.embed_dim, {cfg.k_fg, cfg.k_bg});
  tr.init(rng, 0.1);

  const GridShape grid{4, 4};
  Tensor<float> tokens({48, 16});
  rng.fill_uniform(tokens, -1.0, 1.0);
  auto seq = raw_joint(tokens, 16, grid);

  Mask mask(16, 16);
  for (std::size_t y = 4; y < 10; ++y) {
    for (std::size_t x = 5; x < 12; ++x) mask.at(y, x) = 1;
  }

  auto result = run_backbone(seq, cfg, blocks, &tr, &mask, &mask);
  REQUIRE(result.trace.size() == 4);
  CHECK(result.trace[0].policy == AttentionPolicy::Kind::WithinFrame);
  CHECK(result.trace[0].seq_len == 48);
  CHECK(result.trace[1].seq_len == 48);
  CHECK(result.trace[2].policy == AttentionPolicy::Kind::Global);
  CHECK(result.trace[2].seq_len == 16 + 2 * (3 + 3));
  CHECK(result.trace[3].seq_len == 28);
  CHECK(result.search_tokens->value.dims() == Shape{16, 16});
  REQUIRE(result.refine_mem1.has_value());
  CHECK(result.refine_mem1->fg.protos->value.dims() == Shape{3, 16});
}

TEST_CASE("TR with L=0 is a config error") {
  ViTConfig cfg = ViTConfig::toy();
  cfg.tr_enabled = true;
  cfg.within_frame_layers = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("all-within schedule blocks cross-frame flow exactly") {
  Rng rng(8);
  ViTConfig cfg;
  cfg.num_layers = 3;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.patch = 4;
  cfg.within_frame_layers = 3;
  auto blocks = make_blocks(cfg, rng);

  Tensor<float> tokens({24, 16});
  rng.fill_uniform(tokens, -1.0, 1.0);
  auto seq = raw_joint(tokens, 8, {2, 4});
  auto base = run_backbone(seq, cfg, blocks, nullptr, nullptr, nullptr);

  // perturb every memory token, keep the search segment
  Tensor<float> perturbed = tokens;
  for (std::size_t i = 0; i < 16 * 16; ++i) perturbed[i] += 0.37f;
  auto moved = run_backbone(raw_joint(perturbed, 8, {2, 4}), cfg, blocks, nullptr, nullptr,
                            nullptr);
  CHECK(exactly_equal(base.search_tokens->value, moved.search_tokens->value));
}

TEST_CASE("token permutation within a frame permutes outputs identically") {
  Rng rng(9);
  ViTConfig cfg;
  cfg.num_layers = 2;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.patch = 4;
  auto blocks = make_blocks(cfg, rng);

  const std::size_t n = 6;
  Tensor<float> tokens({3 * n, 16});
  rng.fill_uniform(tokens, -1.0, 1.0);
  auto base = run_backbone(raw_joint(tokens, n, {2, 3}), cfg, blocks, nullptr, nullptr, nullptr);

  // swap two search tokens
  Tensor<float> swapped = tokens;
  for (std::size_t c = 0; c < 16; ++c) {
    std::swap(swapped.at(2 * n + 1, c), swapped.at(2 * n + 4, c));
  }
  auto out = run_backbone(raw_joint(swapped, n, {2, 3}), cfg, blocks, nullptr, nullptr, nullptr);

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = (i == 1) ? 4 : (i == 4) ? 1 : i;
    for (std::size_t c = 0; c < 16; ++c) {
      CHECK(out.search_tokens->value.at(i, c) ==
            doctest::Approx(base.search_tokens->value.at(src, c)).epsilon(1e-4));
    }
  }
}
