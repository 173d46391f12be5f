#pragma once

// Frame serialization: patch flattening, linear projections for patches and
// mask annotation, sinusoidal positions, and assembly of the joint
// memory/memory/search token sequence.

#include <cstdint>
#include <vector>

#include "simvos/ops.hpp"
#include "simvos/rng.hpp"

namespace simvos {

// Single-object binary mask or id-valued multi-object mask, H x W.
struct Mask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> v;

  Mask() = default;
  Mask(std::size_t hh, std::size_t ww) : h(hh), w(ww), v(hh * ww, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return v[y * w + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return v[y * w + x]; }

  std::size_t count_nonzero() const {
    std::size_t n = 0;
    for (auto p : v) n += (p != 0);
    return n;
  }
  bool is_binary() const {
    for (auto p : v) {
      if (p > 1) return false;
    }
    return true;
  }
  Mask binarized(std::uint8_t id) const {
    Mask m(h, w);
    for (std::size_t i = 0; i < v.size(); ++i) m.v[i] = (v[i] == id) ? 1 : 0;
    return m;
  }
  bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }
};

struct GridShape {
  std::size_t rows = 0, cols = 0;
  std::size_t count() const { return rows * cols; }
  bool operator==(const GridShape& o) const { return rows == o.rows && cols == o.cols; }
};

enum class FrameTag { Memory1, Memory2, Search };

struct Segment {
  FrameTag tag;
  std::size_t begin = 0, count = 0;
  GridShape grid;
};

template <typename S>
struct TokenSeq {
  Var<S> tokens;  // [T x C]
  std::vector<Segment> segments;

  std::size_t length() const { return tokens->value.dim(0); }
  std::size_t channels() const { return tokens->value.dim(1); }

  const Segment& segment(FrameTag tag) const {
    for (const auto& s : segments) {
      if (s.tag == tag) return s;
    }
    throw StructureError("no segment with requested tag");
  }

  FrameTag tag_of(std::size_t token) const {
    for (const auto& s : segments) {
      if (token >= s.begin && token < s.begin + s.count) return s.tag;
    }
    throw StructureError("token index outside sequence");
  }

  void validate() const {
    std::size_t expect = 0;
    for (const auto& s : segments) {
      if (s.begin != expect || s.count == 0) {
        throw StructureError("token segments must be contiguous");
      }
      expect = s.begin + s.count;
    }
    if (expect != length()) throw StructureError("segments do not cover the sequence");
  }
};

// ---------------------------------------------------------------------------
// patch serialization

inline GridShape patch_grid(std::size_t h, std::size_t w, std::size_t p) {
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw ShapeError("frame dims must be divisible by the patch size");
  }
  return {h / p, w / p};
}

// frame is [3 x H x W]; row i of the result is patch i (row-major grid
// order), flattened as (channel, py, px).
template <typename S>
Tensor<S> patchify(const Tensor<S>& frame, std::size_t p) {
  if (frame.rank() != 3 || frame.dim(0) != 3) throw ShapeError("frame must be [3 x H x W]");
  const std::size_t h = frame.dim(1), w = frame.dim(2);
  const GridShape grid = patch_grid(h, w, p);
  const std::size_t n = grid.count();
  Tensor<S> rows({n, 3 * p * p});
  for (std::size_t gy = 0; gy < grid.rows; ++gy) {
    for (std::size_t gx = 0; gx < grid.cols; ++gx) {
      S* out = rows.data() + (gy * grid.cols + gx) * 3 * p * p;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t py = 0; py < p; ++py) {
          const S* src = frame.data() + (c * h + gy * p + py) * w + gx * p;
          std::copy(src, src + p, out + (c * p + py) * p);
        }
      }
    }
  }
  return rows;
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& rows, const GridShape& grid) {
  if (rows.rank() != 2 || rows.dim(0) != grid.count() || rows.dim(1) % 3 != 0) {
    throw ShapeError("unpatchify dims mismatch");
  }
  const std::size_t pp = rows.dim(1) / 3;
  const std::size_t p = static_cast<std::size_t>(std::round(std::sqrt(static_cast<double>(pp))));
  if (p * p != pp) throw ShapeError("unpatchify patch area is not square");
  const std::size_t h = grid.rows * p, w = grid.cols * p;
  Tensor<S> frame({3, h, w});
  for (std::size_t gy = 0; gy < grid.rows; ++gy) {
    for (std::size_t gx = 0; gx < grid.cols; ++gx) {
      const S* in = rows.data() + (gy * grid.cols + gx) * 3 * p * p;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t py = 0; py < p; ++py) {
          S* dst = frame.data() + (c * h + gy * p + py) * w + gx * p;
          std::copy(in + (c * p + py) * p, in + (c * p + py) * p + p, dst);
        }
      }
    }
  }
  return frame;
}

// Mask flattened with the same patch order as patchify, [N x P^2].
template <typename S>
Tensor<S> flatten_mask(const Mask& mask, std::size_t p) {
  const GridShape grid = patch_grid(mask.h, mask.w, p);
  Tensor<S> rows({grid.count(), p * p});
  for (std::size_t gy = 0; gy < grid.rows; ++gy) {
    for (std::size_t gx = 0; gx < grid.cols; ++gx) {
      S* out = rows.data() + (gy * grid.cols + gx) * p * p;
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          out[py * p + px] = static_cast<S>(mask.at(gy * p + py, gx * p + px) != 0 ? 1 : 0);
        }
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// positional table and embedding tables

// 2D sinusoidal table [N x C]: the first C/2 channels encode the row index,
// the rest the column index, as interleaved sin/cos pairs.
template <typename S>
Tensor<S> positional_table(const GridShape& grid, std::size_t c) {
  if (c % 4 != 0) throw ConfigError("embed dim must be divisible by 4 for the 2D sinusoid");
  const std::size_t half = c / 2;
  Tensor<S> pos({grid.count(), c});
  const auto fill_axis = [&](std::size_t offset, bool use_row) {
    for (std::size_t gy = 0; gy < grid.rows; ++gy) {
      for (std::size_t gx = 0; gx < grid.cols; ++gx) {
        const double coord = static_cast<double>(use_row ? gy : gx);
        S* row = pos.data() + (gy * grid.cols + gx) * c + offset;
        for (std::size_t k = 0; k < half / 2; ++k) {
          const double freq =
              std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(half));
          row[2 * k] = static_cast<S>(std::sin(coord * freq));
          row[2 * k + 1] = static_cast<S>(std::cos(coord * freq));
        }
      }
    }
  };
  fill_axis(0, true);
  fill_axis(half, false);
  return pos;
}

template <typename S>
struct EmbeddingTables {
  std::size_t patch = 0, channels = 0;
  Param<S> patch_proj;  // E   [3P^2 x C]
  Param<S> mask_proj;   // E_m [P^2 x C]

  EmbeddingTables() = default;
  EmbeddingTables(std::size_t p, std::size_t c)
      : patch(p),
        channels(c),
        patch_proj("patch_proj", Tensor<S>({3 * p * p, c})),
        mask_proj("mask_proj", Tensor<S>({p * p, c})) {}

  void init(Rng& rng, double stddev) {
    rng.fill_trunc_normal(patch_proj.value(), stddev);
    rng.fill_trunc_normal(mask_proj.value(), stddev);
  }

  void collect(ParamRefs<S>& out) {
    out.push_back(&patch_proj);
    out.push_back(&mask_proj);
  }
};

// ---------------------------------------------------------------------------
// token construction

template <typename S>
TokenSeq<S> embed_patches(const Tensor<S>& rows, EmbeddingTables<S>& tables,
                          const GridShape& grid, FrameTag tag = FrameTag::Search) {
  if (rows.rank() != 2 || rows.dim(1) != 3 * tables.patch * tables.patch) {
    throw ShapeError("patch rows width must be 3P^2");
  }
  if (rows.dim(0) != grid.count()) throw ShapeError("patch rows do not match grid");
  Var<S> projected = matmul(constant(rows), tables.patch_proj.var);
  Var<S> tokens = add(projected, constant(positional_table<S>(grid, tables.channels)));
  TokenSeq<S> seq;
  seq.tokens = tokens;
  seq.segments = {{tag, 0, grid.count(), grid}};
  return seq;
}

// H_bar = M_hat * E_m + H. Search frames never pass through this op.
template <typename S>
TokenSeq<S> encode_mask_into_memory(const TokenSeq<S>& seq, const Tensor<S>& mask_rows,
                                    EmbeddingTables<S>& tables) {
  if (seq.segments.size() != 1) throw StructureError("mask encoding expects a single frame");
  if (mask_rows.rank() != 2 || mask_rows.dim(0) != seq.length() ||
      mask_rows.dim(1) != tables.patch * tables.patch) {
    throw ShapeError("flattened mask dims mismatch");
  }
  TokenSeq<S> out = seq;
  out.tokens = add(matmul(constant(mask_rows), tables.mask_proj.var), seq.tokens);
  return out;
}

// H0 = [mem1; mem2; search], tagged in that order.
template <typename S>
TokenSeq<S> build_joint_sequence(const TokenSeq<S>& mem1, const TokenSeq<S>& mem2,
                                 const TokenSeq<S>& search) {
  const std::size_t c = mem1.channels();
  if (mem2.channels() != c || search.channels() != c) {
    throw ShapeError("joint sequence channel mismatch");
  }
  for (const TokenSeq<S>* s : {&mem1, &mem2, &search}) {
    if (s->segments.size() != 1) throw StructureError("joint sequence inputs must be single frames");
  }
  TokenSeq<S> joint;
  joint.tokens = concat_rows<S>({mem1.tokens, mem2.tokens, search.tokens});
  const std::size_t n1 = mem1.length(), n2 = mem2.length(), n3 = search.length();
  joint.segments = {
      {FrameTag::Memory1, 0, n1, mem1.segments[0].grid},
      {FrameTag::Memory2, n1, n2, mem2.segments[0].grid},
      {FrameTag::Search, n1 + n2, n3, search.segments[0].grid},
  };
  joint.validate();
  return joint;
}

}  // namespace simvos
