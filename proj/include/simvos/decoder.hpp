#pragma once

// Mask prediction head: the final search tokens become a (C, H/P, W/P)
// feature map, two deconvolution stages upsample it to 2x and 4x with 3x3
// refinement convs (channel schedule C -> C/2 -> C/4), a final conv predicts
// one logit channel, and a bilinear resize brings it to full resolution.

#include <string>

#include "simvos/tokenizer.hpp"

namespace simvos {

template <typename S>
struct DecoderWeights {
  std::size_t channels = 0;
  Param<S> up1_k, up1_b;      // [C x C/2 x 4 x 4]
  Param<S> conv1_k, conv1_b;  // [C/2 x C/2 x 3 x 3]
  Param<S> up2_k, up2_b;      // [C/2 x C/4 x 4 x 4]
  Param<S> conv2_k, conv2_b;  // [C/4 x C/4 x 3 x 3]
  Param<S> pred_k, pred_b;    // [1 x C/4 x 3 x 3]

  DecoderWeights() = default;
  explicit DecoderWeights(std::size_t c)
      : channels(c),
        up1_k("decoder.up1.k", Tensor<S>({c, c / 2, 4, 4})),
        up1_b("decoder.up1.b", Tensor<S>({c / 2})),
        conv1_k("decoder.conv1.k", Tensor<S>({c / 2, c / 2, 3, 3})),
        conv1_b("decoder.conv1.b", Tensor<S>({c / 2})),
        up2_k("decoder.up2.k", Tensor<S>({c / 2, c / 4, 4, 4})),
        up2_b("decoder.up2.b", Tensor<S>({c / 4})),
        conv2_k("decoder.conv2.k", Tensor<S>({c / 4, c / 4, 3, 3})),
        conv2_b("decoder.conv2.b", Tensor<S>({c / 4})),
        pred_k("decoder.pred.k", Tensor<S>({1, c / 4, 3, 3})),
        pred_b("decoder.pred.b", Tensor<S>({1})) {
    if (c % 4 != 0) throw ConfigError("decoder needs embed dim divisible by 4");
  }

  void init(Rng& rng, double stddev) {
    rng.fill_trunc_normal(up1_k.value(), stddev);
    rng.fill_trunc_normal(conv1_k.value(), stddev);
    rng.fill_trunc_normal(up2_k.value(), stddev);
    rng.fill_trunc_normal(conv2_k.value(), stddev);
    // prediction conv stays zero so the initial output is an even split
  }

  void collect(ParamRefs<S>& out) {
    for (Param<S>* p : {&up1_k, &up1_b, &conv1_k, &conv1_b, &up2_k, &up2_b, &conv2_k, &conv2_b,
                        &pred_k, &pred_b}) {
      out.push_back(p);
    }
  }
};

// Search tokens [N x C] -> per-pixel logits [H x W].
template <typename S>
Var<S> decode_mask(const Var<S>& search_tokens, const GridShape& grid, DecoderWeights<S>& w,
                   std::size_t out_h, std::size_t out_w) {
  if (search_tokens->value.dim(0) != grid.count()) {
    throw ShapeError("decode_mask token count does not match grid");
  }
  Var<S> x = tokens_to_planes(search_tokens, grid.rows, grid.cols);
  x = gelu(transposed_conv2d(x, w.up1_k.var, w.up1_b.var, 2));
  x = gelu(conv2d(x, w.conv1_k.var, w.conv1_b.var, 1, 1));
  x = gelu(transposed_conv2d(x, w.up2_k.var, w.up2_b.var, 2));
  x = gelu(conv2d(x, w.conv2_k.var, w.conv2_b.var, 1, 1));
  x = conv2d(x, w.pred_k.var, w.pred_b.var, 1, 1);  // [1 x 4gh x 4gw]
  x = bilinear_resize(x, out_h, out_w);
  return reshape(x, {out_h, out_w});
}

// Mean probability map from logits.
template <typename S>
Tensor<S> sigmoid_prob(const Tensor<S>& logits) {
  return sigmoid(logits);
}

}  // namespace simvos
