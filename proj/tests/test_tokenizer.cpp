#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "bcat/rng.hpp"
#include "bcat/tokenizer.hpp"

namespace {

std::vector<float> ramp(std::size_t n) {
  std::vector<float> v(n);
  std::iota(v.begin(), v.end(), 0.0f);
  return v;
}

TEST(Tokenizer, OnePatchPerFrameIsFlatFrame) {
  const bcat::PatchGrid grid(4, 4, 2);
  const auto frames = ramp(3 * 4 * 4 * 2);
  const auto seq = bcat::patchify(frames, grid);
  EXPECT_EQ(seq.length(), 3u);
  EXPECT_EQ(seq.tokens, frames);
}

TEST(Tokenizer, SequenceLengthArithmetic) {
  const bcat::PatchGrid grid(8, 128, 4);
  EXPECT_EQ(grid.sequence_length(10 + 10), 5120u);
  EXPECT_EQ(bcat::PatchGrid(8, 32, 4).tokens_per_frame(), 16u);
  EXPECT_EQ(bcat::PatchGrid(4, 32, 4).tokens_per_frame(), 64u);
}

TEST(Tokenizer, RoundTripIsBitExact) {
  const bcat::PatchGrid grid(4, 16, 3);
  bcat::Rng rng(1);
  std::vector<float> frames(5 * grid.frame_size());
  for (auto& v : frames) v = static_cast<float>(rng.normal());
  const auto seq = bcat::patchify(frames, grid);
  EXPECT_EQ(bcat::depatchify(seq.tokens, grid), frames);
}

TEST(Tokenizer, RasterOrderWithinAndAcrossPatches) {
  // R=4, P=2, C=1: token 1 is the top-right patch; its values are rows 0-1, cols 2-3.
  const bcat::PatchGrid grid(2, 4, 1);
  const auto seq = bcat::patchify(ramp(16), grid);
  const std::vector<float> token1(seq.tokens.begin() + 4, seq.tokens.begin() + 8);
  EXPECT_EQ(token1, (std::vector<float>{2, 3, 6, 7}));
  const std::vector<float> token2(seq.tokens.begin() + 8, seq.tokens.begin() + 12);
  EXPECT_EQ(token2, (std::vector<float>{8, 9, 12, 13}));
}

TEST(Tokenizer, IndexMapsAreBijective) {
  bcat::TokenSequence seq;
  seq.grid = bcat::PatchGrid(8, 32, 4);
  seq.frames = 5;
  std::vector<int> seen(seq.length(), 0);
  for (std::size_t s = 0; s < seq.length(); ++s) {
    EXPECT_EQ(seq.position(seq.frame_of(s), seq.patch_of(s)), s);
    seen[seq.position(seq.frame_of(s), seq.patch_of(s))]++;
  }
  EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
}

TEST(Tokenizer, ZerosMapToZeros) {
  const bcat::PatchGrid grid(4, 8, 1);
  std::vector<float> zeros(grid.frame_size(), 0.0f);
  for (float v : bcat::depatchify(bcat::patchify(zeros, grid).tokens, grid)) EXPECT_EQ(v, 0.0f);
}

TEST(Tokenizer, ShuffledTokensAreDetected) {
  // 2x2 patches of a 4x4 frame: every non-identity permutation of the four
  // tokens changes a non-constant frame.
  const bcat::PatchGrid grid(2, 4, 1);
  const auto frame = ramp(16);
  const auto tokens = bcat::patchify(frame, grid).tokens;
  std::vector<int> perm{0, 1, 2, 3};
  int checked = 0;
  while (std::next_permutation(perm.begin(), perm.end())) {
    std::vector<float> shuffled;
    for (int p : perm) shuffled.insert(shuffled.end(), tokens.begin() + 4 * p, tokens.begin() + 4 * p + 4);
    EXPECT_NE(bcat::depatchify(shuffled, grid), frame);
    ++checked;
  }
  EXPECT_EQ(checked, 23);
}

TEST(Tokenizer, IndivisiblePatchIsError) {
  EXPECT_THROW(bcat::PatchGrid(5, 32, 4), bcat::ShapeError);
  const bcat::PatchGrid grid(4, 8, 1);
  EXPECT_THROW(bcat::patchify(std::vector<float>(63), grid), bcat::ShapeError);
  EXPECT_THROW(bcat::depatchify(std::vector<float>(65), grid), bcat::ShapeError);
}

TEST(Tokenizer, ChannelWeightsSelectValidChannels) {
  const auto w = bcat::channel_weights(bcat::PatchGrid(2, 4, 4), 1);
  ASSERT_EQ(w.size(), 16u);
  for (std::size_t k = 0; k < w.size(); ++k) EXPECT_EQ(w[k], k % 4 == 0 ? 1.0f : 0.0f);
}

}  // namespace
