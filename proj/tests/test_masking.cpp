#include "nxtv/masking.hpp"

#include "doctest.h"

#include <set>

using namespace nxtv;

namespace {

TokenSequence toy_tokens(int time_steps, int rows, int cols, int dim = 3) {
  TokenSequence seq;
  seq.time_steps = time_steps;
  seq.grid_rows = rows;
  seq.grid_cols = cols;
  const Index n = static_cast<Index>(time_steps) * rows * cols;
  seq.tokens.resize(n, dim);
  seq.pos.resize(static_cast<std::size_t>(n));
  Index r = 0;
  for (int t = 0; t < time_steps; ++t)
    for (int y = 0; y < rows; ++y)
      for (int x = 0; x < cols; ++x, ++r) {
        seq.pos[static_cast<std::size_t>(r)] = {t, y, x};
        for (int d = 0; d < dim; ++d)
          seq.tokens(r, d) = static_cast<float>(r * dim + d);
      }
  return seq;
}

}  // namespace

TEST_CASE("sampled mask ratio falls inside the scale window") {
  MaskConfig cfg;  // [0.15, 0.7], aspect [0.75, 1.5], 8 blocks
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    const auto m = sample_spatial_mask(cfg, 8, 8, seed);
    CHECK(m.ratio() >= 0.15);
    CHECK(m.ratio() <= 0.7);
  }
}

TEST_CASE("ratio bound holds over 1000 masks for both strategies") {
  MaskConfig base;
  const auto pair = two_strategy_configs(base);
  REQUIRE(pair.size() == 2);
  CHECK(pair[0].num_blocks == 8);
  CHECK(pair[1].num_blocks == 2);
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    for (const auto& cfg : pair) {
      const auto m = sample_spatial_mask(cfg, 8, 8, seed);
      lo = std::min(lo, m.ratio());
      hi = std::max(hi, m.ratio());
    }
  }
  CHECK(lo >= 0.15);
  CHECK(hi <= 0.7);
}

TEST_CASE("degenerate scale [0,0] yields an empty mask") {
  MaskConfig cfg;
  cfg.scale_lo = 0.0;
  cfg.scale_hi = 0.0;
  const auto m = sample_spatial_mask(cfg, 8, 8, 123);
  CHECK(m.hidden.empty());
  CHECK(m.ratio() == 0.0);
}

TEST_CASE("mask sampling is deterministic in seed") {
  MaskConfig cfg;
  const auto a = sample_spatial_mask(cfg, 8, 8, 99);
  const auto b = sample_spatial_mask(cfg, 8, 8, 99);
  CHECK(a.hidden == b.hidden);
  const auto c = sample_spatial_mask(cfg, 8, 8, 100);
  CHECK(a.hidden != c.hidden);
}

TEST_CASE("infeasible mask configs are rejected") {
  MaskConfig cfg;
  cfg.scale_lo = 0.8;
  cfg.scale_hi = 0.4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  MaskConfig no_blocks;
  no_blocks.num_blocks = 0;  // but scale_lo 0.15 demands coverage
  CHECK_THROWS_AS(no_blocks.validate(), ConfigError);

  MaskConfig full;
  full.scale_lo = 1.0;
  full.scale_hi = 1.0;
  CHECK_THROWS_AS(sample_spatial_mask(full, 4, 4, 0), ConfigError);
}

TEST_CASE("apply_mask drops hidden columns at every time step") {
  const auto seq = toy_tokens(2, 2, 2);
  SpatialMask mask;
  mask.grid_rows = 2;
  mask.grid_cols = 2;
  mask.hidden = {0};
  const auto out = apply_mask(seq, mask);
  CHECK(out.count() == 6);  // 2 time steps x 3 survivors
  for (const auto& p : out.pos) CHECK(p.y * 2 + p.x != 0);
  // Survivors keep frame-major order and token content.
  CHECK(out.pos[0].t == 0);
  CHECK(out.pos[3].t == 1);
  CHECK(out.tokens.row(0) == seq.tokens.row(1));
}

TEST_CASE("empty mask is the identity") {
  const auto seq = toy_tokens(2, 2, 2);
  SpatialMask mask;
  mask.grid_rows = 2;
  mask.grid_cols = 2;
  const auto out = apply_mask(seq, mask);
  CHECK(out.count() == seq.count());
  CHECK(out.tokens == seq.tokens);
}

TEST_CASE("attention mask matrices match their definitions at T=2, 2 tokens") {
  const std::vector<int> times = {0, 0, 1, 1};
  const auto causal =
      build_attention_mask(AttnMode::frame_wise_causal, times, times);
  const bool expect_causal[4][4] = {{1, 1, 0, 0}, {1, 1, 0, 0},
                                    {1, 1, 1, 1}, {1, 1, 1, 1}};
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j)
      CHECK(causal.allow(i, j) == expect_causal[i][j]);

  const auto iso = build_attention_mask(AttnMode::frame_isolated, times, times);
  const bool expect_iso[4][4] = {{1, 1, 0, 0}, {1, 1, 0, 0},
                                 {0, 0, 1, 1}, {0, 0, 1, 1}};
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(iso.allow(i, j) == expect_iso[i][j]);

  const auto ar = build_attention_mask(AttnMode::autoregressive, {1, 1, 2, 2},
                                       {0, 0, 1, 1});
  const bool expect_ar[4][4] = {{1, 1, 0, 0}, {1, 1, 0, 0},
                                {1, 1, 1, 1}, {1, 1, 1, 1}};
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) CHECK(ar.allow(i, j) == expect_ar[i][j]);
}

TEST_CASE("autoregressive query at time 0 is rejected") {
  CHECK_THROWS_AS(
      build_attention_mask(AttnMode::autoregressive, {0, 1}, {0, 1}),
      ConfigError);
}

TEST_CASE("a query row with no allowed key is rejected") {
  CHECK_THROWS_AS(
      build_attention_mask(AttnMode::frame_wise_causal, {0}, {1, 2}),
      ConfigError);
}

TEST_CASE("mask-mode algebra") {
  const std::vector<int> times = {0, 0, 1, 1, 2, 2};
  const auto causal =
      build_attention_mask(AttnMode::frame_wise_causal, times, times);
  const auto iso = build_attention_mask(AttnMode::frame_isolated, times, times);
  // frame_isolated allowed pairs are a subset of frame_wise_causal.
  for (Index i = 0; i < iso.allow.rows(); ++i)
    for (Index j = 0; j < iso.allow.cols(); ++j)
      if (iso.allow(i, j)) CHECK(causal.allow(i, j));

  // autoregressive(q) == frame_wise_causal(q - 1)
  const std::vector<int> q = {1, 2, 3};
  std::vector<int> q_minus;
  for (int t : q) q_minus.push_back(t - 1);
  const auto ar = build_attention_mask(AttnMode::autoregressive, q, times);
  const auto shifted =
      build_attention_mask(AttnMode::frame_wise_causal, q_minus, times);
  CHECK((ar.allow == shifted.allow).all());
}

TEST_CASE("attention bias is 0 or -1e30") {
  const auto iso = build_attention_mask(AttnMode::frame_isolated, {0, 1}, {0, 1});
  const auto bias = attention_bias<double>(iso);
  CHECK(bias(0, 0) == 0.0);
  CHECK(bias(0, 1) == -1e30);
  CHECK(bias(1, 0) == -1e30);
  CHECK(bias(1, 1) == 0.0);
}

TEST_CASE("mask text dump round-trips") {
  SpatialMask m;
  m.grid_rows = 4;
  m.grid_cols = 4;
  m.hidden = {1, 5, 6, 11};
  const auto text = mask_to_text(m);
  CHECK(text == "4 4 1 5 6 11\n");
  const auto back = mask_from_text(text);
  CHECK(back.grid_rows == 4);
  CHECK(back.hidden == m.hidden);
}

TEST_CASE("masks are temporally consistent through apply_mask") {
  const auto seq = toy_tokens(3, 4, 4);
  const auto mask = sample_spatial_mask(MaskConfig{}, 4, 4, 5);
  const auto out = apply_mask(seq, mask);
  // The surviving spatial set must be identical at every time step.
  std::vector<std::set<int>> per_step(3);
  for (const auto& p : out.pos)
    per_step[static_cast<std::size_t>(p.t)].insert(p.y * 4 + p.x);
  CHECK(per_step[0] == per_step[1]);
  CHECK(per_step[1] == per_step[2]);
  CHECK(per_step[0].size() ==
        static_cast<std::size_t>(16 - static_cast<int>(mask.hidden.size())));
}
