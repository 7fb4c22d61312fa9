#pragma once

// Patch tokenization of [T][R][R][C] frames.
//
// Token order is raster: frames outermost, then patch rows, then patch
// columns. Inside a token the P*P*C values are pixel-row-major, then
// channel. patchify is a pure rearrangement; the learned projection lives in
// the model.

#include <span>
#include <string>
#include <vector>

#include "bcat/error.hpp"

namespace bcat {

struct PatchGrid {
  std::size_t patch = 8;       // P
  std::size_t resolution = 0;  // R
  std::size_t channels = 4;    // C

  PatchGrid() = default;
  PatchGrid(std::size_t p, std::size_t r, std::size_t c) : patch(p), resolution(r), channels(c) { validate(); }

  void validate() const {
    if (patch == 0 || resolution == 0 || resolution % patch != 0)
      throw ShapeError("patch size " + std::to_string(patch) + " does not divide resolution " +
                       std::to_string(resolution));
  }
  std::size_t per_side() const { return resolution / patch; }
  std::size_t tokens_per_frame() const { return per_side() * per_side(); }  // N
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t frame_size() const { return resolution * resolution * channels; }
  std::size_t sequence_length(std::size_t frames) const { return frames * tokens_per_frame(); }
};

struct TokenSequence {
  PatchGrid grid;
  std::size_t frames = 0;
  std::vector<float> tokens;  // [frames * N][patch_dim]

  std::size_t length() const { return frames * grid.tokens_per_frame(); }
  std::size_t frame_of(std::size_t s) const { return s / grid.tokens_per_frame(); }
  std::size_t patch_of(std::size_t s) const { return s % grid.tokens_per_frame(); }
  std::size_t position(std::size_t frame, std::size_t patch) const { return frame * grid.tokens_per_frame() + patch; }
};

namespace detail {

// Calls fn(frame_offset, token_offset) for every scalar of one frame.
template <typename Fn>
void for_each_patch_element(const PatchGrid& g, Fn&& fn) {
  const std::size_t side = g.per_side(), p = g.patch, c = g.channels, r = g.resolution;
  std::size_t k = 0;
  for (std::size_t py = 0; py < side; ++py)
    for (std::size_t px = 0; px < side; ++px)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t ch = 0; ch < c; ++ch, ++k) fn(((py * p + y) * r + px * p + x) * c + ch, k);
}

}  // namespace detail

inline TokenSequence patchify(std::span<const float> frames, const PatchGrid& grid) {
  grid.validate();
  const std::size_t fsize = grid.frame_size();
  if (frames.size() % fsize != 0)
    throw ShapeError("patchify: " + std::to_string(frames.size()) + " values is not a whole number of " +
                     std::to_string(grid.resolution) + "x" + std::to_string(grid.resolution) + "x" +
                     std::to_string(grid.channels) + " frames");
  TokenSequence seq;
  seq.grid = grid;
  seq.frames = frames.size() / fsize;
  seq.tokens.resize(frames.size());
  for (std::size_t t = 0; t < seq.frames; ++t) {
    const float* src = frames.data() + t * fsize;
    float* dst = seq.tokens.data() + t * fsize;
    detail::for_each_patch_element(grid, [&](std::size_t f, std::size_t k) { dst[k] = src[f]; });
  }
  return seq;
}

inline std::vector<float> depatchify(std::span<const float> tokens, const PatchGrid& grid) {
  grid.validate();
  const std::size_t fsize = grid.frame_size();
  if (tokens.size() % fsize != 0)
    throw ShapeError("depatchify: token count is not a multiple of N=" + std::to_string(grid.tokens_per_frame()));
  std::vector<float> frames(tokens.size());
  for (std::size_t t = 0; t < tokens.size() / fsize; ++t) {
    const float* src = tokens.data() + t * fsize;
    float* dst = frames.data() + t * fsize;
    detail::for_each_patch_element(grid, [&](std::size_t f, std::size_t k) { dst[f] = src[k]; });
  }
  return frames;
}

/// Per-feature 0/1 weights selecting the first `valid_channels` channels.
inline std::vector<float> channel_weights(const PatchGrid& grid, std::size_t valid_channels) {
  std::vector<float> w(grid.patch_dim());
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = (k % grid.channels) < valid_channels ? 1.0f : 0.0f;
  return w;
}

}  // namespace bcat
