#include "nxtv/flowdecoder.hpp"

#include "doctest.h"

#include <cmath>
#include <vector>

using namespace nxtv;

namespace {

DecoderConfig small_cfg(int depth = 2) {
  DecoderConfig cfg;
  cfg.depth = depth;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.temb_dim = 8;
  return cfg;
}

std::vector<Pos3> pred_lattice(int t_from, int t_to, int rows, int cols) {
  std::vector<Pos3> pos;
  for (int t = t_from; t < t_to; ++t)
    for (int y = 0; y < rows; ++y)
      for (int x = 0; x < cols; ++x) pos.push_back({t, y, x});
  return pos;
}

}  // namespace

TEST_CASE("flow_interpolate endpoints and midpoint are exact") {
  MatD x0(1, 2), x1(1, 2);
  x0 << 0.0, 2.0;
  x1 << 2.0, 0.0;
  CHECK((flow_interpolate(x0, x1, 0.0) - x0).cwiseAbs().maxCoeff() == 0.0);
  CHECK((flow_interpolate(x0, x1, 1.0) - x1).cwiseAbs().maxCoeff() == 0.0);
  const MatD mid = flow_interpolate(x0, x1, 0.25);
  CHECK(mid(0, 0) == 0.5);
  CHECK(mid(0, 1) == 1.5);
  CHECK_THROWS_AS(flow_interpolate(x0, x1, 1.5), ConfigError);
}

TEST_CASE("pixel-cube targets: normalization, round-trip, identity latent") {
  ClipShape shape{4, 8, 8, 1, 4, 4, 2};
  VideoClip half;
  half.t_raw = 4;
  half.h = half.w = 8;
  half.c = 1;
  half.frames = Eigen::ArrayXf::Constant(4 * 8 * 8, 0.5f);
  TargetExtractor pixel;
  CHECK(extract_targets(half, shape, pixel).cwiseAbs().maxCoeff() == 0.0f);

  const auto clip = generate_synthetic_clip(2, MotionClass::SE, shape);
  const MatF targets = extract_targets(clip, shape, pixel);
  // Through unpatchify, the denormalized targets give back the frames.
  TokenSequence seq = patchify(clip, shape);
  seq.tokens = denormalize_pixels(targets);
  const auto back = unpatchify(seq, shape);
  CHECK((back.frames - clip.frames).abs().maxCoeff() < 1e-6f);

  // Identity per-frame latent reproduces the pixel cubes bitwise.
  TargetExtractor ident;
  ident.kind = TargetKind::pluggable_latent;
  ident.latent_fn = [](const Eigen::ArrayXf& frame, const ClipShape& s) {
    MatF rows(s.spatial_positions(), s.patch_h * s.patch_w * s.c);
    Index r = 0;
    for (int gy = 0; gy < s.grid_rows(); ++gy)
      for (int gx = 0; gx < s.grid_cols(); ++gx, ++r) {
        Index col = 0;
        for (int py = 0; py < s.patch_h; ++py)
          for (int px = 0; px < s.patch_w; ++px)
            for (int ch = 0; ch < s.c; ++ch, ++col)
              rows(r, col) =
                  (frame[((static_cast<Index>(gy) * s.patch_h + py) * s.w +
                          gx * s.patch_w + px) *
                             s.c +
                         ch] -
                   0.5f) /
                  0.5f;
      }
    return rows;
  };
  const MatF lat = extract_targets(clip, shape, ident);
  REQUIRE(lat.rows() == targets.rows());
  REQUIRE(lat.cols() == targets.cols());
  CHECK((lat - targets).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("decoder is frame-isolated in both x_tau and z") {
  const auto cfg = small_cfg();
  ParamStore<double> ps;
  Rng rng(substream(51, {1}));
  register_decoder(ps, cfg, 8, 6, rng);
  // Zero gates would mask leakage; open them and the head.
  for (int i = 0; i < cfg.depth; ++i) {
    ps.value("dec.blk" + std::to_string(i) + ".gate1.w") =
        rng.normal_mat<double>(16, 16) * 0.3;
    ps.value("dec.blk" + std::to_string(i) + ".gate2.w") =
        rng.normal_mat<double>(16, 16) * 0.3;
  }
  ps.value("dec.head.w") = rng.normal_mat<double>(16, 6) * 0.3;

  const auto pos = pred_lattice(1, 3, 2, 2);  // times 1,2; 4 tokens each
  Rng drng(substream(52, {2}));
  const MatD z = drng.normal_mat<double>(8, 8);
  const MatD x_tau = drng.normal_mat<double>(8, 6);

  auto run = [&](const MatD& zz, const MatD& xx) {
    Tape<double> tape;
    Bind<double> bind(tape, ps, false);
    auto zv = tape.constant(zz);
    return decoder_forward(bind, zv, xx, 0.37, pos, cfg).value();
  };
  const MatD base = run(z, x_tau);

  MatD x2 = x_tau;
  x2.bottomRows(4).setConstant(9.0);  // time 2 noisy tokens
  const MatD out_x = run(z, x2);
  CHECK((out_x.topRows(4) - base.topRows(4)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((out_x.bottomRows(4) - base.bottomRows(4)).cwiseAbs().maxCoeff() > 0.0);

  MatD z2 = z;
  z2.bottomRows(4).setConstant(-4.0);  // time 2 condition tokens
  const MatD out_z = run(z2, x_tau);
  CHECK((out_z.topRows(4) - base.topRows(4)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((out_z.bottomRows(4) - base.bottomRows(4)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("zero-init head gives zero velocity at init; tau matters after a step") {
  const auto cfg = small_cfg();
  ParamStore<double> ps;
  Rng rng(substream(53, {3}));
  register_decoder(ps, cfg, 8, 6, rng);
  const auto pos = pred_lattice(1, 2, 2, 2);
  Rng drng(substream(54, {4}));
  const MatD z = drng.normal_mat<double>(4, 8);
  const MatD x_tau = drng.normal_mat<double>(4, 6);

  auto run = [&](double tau) {
    Tape<double> tape;
    Bind<double> bind(tape, ps, false);
    auto zv = tape.constant(z);
    return decoder_forward(bind, zv, x_tau, tau, pos, cfg).value();
  };
  CHECK(run(0.2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(run(0.9).cwiseAbs().maxCoeff() == 0.0);

  // Gradient steps on a velocity target wake the tau path up (the first step
  // only opens the zero-init head; the second reaches the modulation).
  for (int it = 0; it < 2; ++it) {
    Tape<double> tape;
    Bind<double> bind(tape, ps, true);
    auto zv = tape.constant(z);
    auto out = decoder_forward(bind, zv, x_tau, 0.2, pos, cfg);
    auto loss = tape.mean_sq_diff(out, tape.constant(MatD::Ones(4, 6)));
    ps.zero_grads();
    tape.backward(loss);
    bind.accumulate_grads();
    for (auto& p : ps.params) p.value -= 0.5 * p.grad;
  }
  const MatD a = run(0.2);
  const MatD b = run(0.9);
  CHECK(a.cwiseAbs().maxCoeff() > 0.0);
  CHECK((a - b).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_CASE("flow_loss: oracle velocity field scores exactly zero") {
  Rng rng(substream(55, {5}));
  const MatD targets = rng.normal_mat<double>(6, 4);
  Tape<double> tape;
  FlowFieldFn<double> oracle = [](Tape<double>& tp,
                                  const FlowSample<double>& s) {
    return tp.constant(s.x1 - s.x0);
  };
  Rng flow_rng(substream(56, {6}));
  const auto loss = flow_loss(tape, targets, 3, flow_rng, oracle);
  CHECK(std::abs(loss.value()(0, 0)) < 1e-12);
}

TEST_CASE("flow_loss: zero field scores the mean squared velocity") {
  Rng rng(substream(57, {7}));
  const MatD targets = rng.normal_mat<double>(5, 3);
  FlowFieldFn<double> zero = [](Tape<double>& tp, const FlowSample<double>& s) {
    return tp.constant(MatD::Zero(s.v.rows(), s.v.cols()));
  };
  // Replay the same draws to compute the expected value independently.
  Rng draw_a(substream(58, {8}));
  Rng draw_b(substream(58, {8}));
  Tape<double> tape;
  const double loss = flow_loss(tape, targets, 4, draw_a, zero).value()(0, 0);
  double expect = 0;
  for (int k = 0; k < 4; ++k) {
    const auto s = draw_flow_sample<double>(targets, draw_b);
    expect += s.v.array().square().mean();
  }
  expect /= 4;
  CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("k_tau=4 loss equals the mean of its 4 single-draw losses") {
  Rng rng(substream(59, {9}));
  const MatD targets = rng.normal_mat<double>(4, 5);
  // A fixed nontrivial field (independent of draws) keeps the check honest.
  Rng frng(substream(60, {10}));
  const MatD w = frng.normal_mat<double>(5, 5);
  FlowFieldFn<double> field = [&w](Tape<double>& tp,
                                   const FlowSample<double>& s) {
    return tp.constant(MatD(s.x_tau * w));
  };
  Rng draws_k4(substream(61, {11}));
  Rng draws_k1(substream(61, {11}));
  Tape<double> tape;
  const double k4 = flow_loss(tape, targets, 4, draws_k4, field).value()(0, 0);
  double mean1 = 0;
  for (int k = 0; k < 4; ++k) {
    Tape<double> t1;
    mean1 += flow_loss(t1, targets, 1, draws_k1, field).value()(0, 0);
  }
  mean1 /= 4;
  CHECK(std::abs(k4 - mean1) < 1e-9);
}

TEST_CASE("euler sampling: one step, constant-field exactness, determinism") {
  Rng rng1(substream(62, {12}));
  Rng rng2(substream(62, {12}));
  const MatD v = MatD::Constant(3, 2, 0.7);

  // steps=1 -> x0 + g(x0, 0)
  auto field_cap = [&](const MatD& x, double tau) {
    return MatD(v + MatD::Constant(3, 2, tau));
  };
  const MatD one = euler_sample<double>(3, 2, 1, rng1, field_cap);
  const MatD x0 = rng2.normal_mat<double>(3, 2);
  CHECK((one - (x0 + v)).cwiseAbs().maxCoeff() < 1e-12);

  // Constant oracle field x1 - x0 integrates exactly to x1 for any steps.
  Rng rng3(substream(63, {13}));
  Rng rng4(substream(63, {13}));
  const MatD x1 = MatD::Constant(3, 2, 2.5);
  const MatD x0b = rng4.normal_mat<double>(3, 2);
  const MatD vfield = x1 - x0b;
  const MatD out = euler_sample<double>(
      3, 2, 7, rng3, [&](const MatD&, double) { return vfield; });
  CHECK((out - x1).cwiseAbs().maxCoeff() < 1e-9);

  // Fixed seed -> deterministic sample.
  Rng rng5(substream(64, {14}));
  Rng rng6(substream(64, {14}));
  const MatD a = euler_sample<double>(3, 2, 4, rng5, field_cap);
  const MatD b = euler_sample<double>(3, 2, 4, rng6, field_cap);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("4-fold tau sampling has no higher variance than single-fold") {
  Rng rng(substream(65, {15}));
  const MatD targets = rng.normal_mat<double>(4, 4);
  const MatD w = rng.normal_mat<double>(4, 4) * 0.5;
  FlowFieldFn<double> field = [&w](Tape<double>& tp,
                                   const FlowSample<double>& s) {
    return tp.constant(MatD(s.x_tau * w));
  };
  auto variance = [&](int k) {
    std::vector<double> vals;
    for (int trial = 0; trial < 200; ++trial) {
      Rng draws(substream(66, {static_cast<std::uint64_t>(trial), static_cast<std::uint64_t>(k)}));
      Tape<double> tape;
      vals.push_back(flow_loss(tape, targets, k, draws, field).value()(0, 0));
    }
    double mean = 0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    return var / static_cast<double>(vals.size() - 1);
  };
  CHECK(variance(4) <= variance(1));
}

TEST_CASE("discrete tau grid lands on (i + 0.5)/1000") {
  Rng rng(substream(67, {16}));
  const MatD targets = rng.normal_mat<double>(2, 2);
  Rng draws(substream(68, {17}));
  const auto s = draw_flow_sample<double>(targets, draws, /*discrete_grid=*/true);
  const double scaled = s.tau * 1000.0 - 0.5;
  CHECK(std::abs(scaled - std::round(scaled)) < 1e-9);
  CHECK(s.tau > 0.0);
  CHECK(s.tau < 1.0);
}
