#include "nxtv/predictor.hpp"
#include "nxtv/trainer.hpp"

#include "doctest.h"

using namespace nxtv;

namespace {

PredictorConfig small_cfg(int depth = 2) {
  PredictorConfig cfg;
  cfg.depth = depth;
  cfg.width = 16;
  cfg.heads = 2;
  return cfg;
}

ContextTokens<double> make_context(Tape<double>& tape, const MatD& tokens,
                                   int time_steps, int rows, int cols) {
  ContextTokens<double> ctx;
  ctx.tokens = tape.constant(tokens);
  ctx.time_steps = time_steps;
  ctx.grid_rows = rows;
  ctx.grid_cols = cols;
  for (int t = 0; t < time_steps; ++t)
    for (int y = 0; y < rows; ++y)
      for (int x = 0; x < cols; ++x) ctx.pos.push_back({t, y, x});
  return ctx;
}

}  // namespace

TEST_CASE("predictor is autoregressive: later context cannot perturb z_t") {
  const auto cfg = small_cfg();
  ParamStore<double> ps;
  Rng rng(substream(41, {1}));
  register_predictor(ps, cfg, 8, rng);
  // Zero-init output projection would hide leakage; randomize it.
  ps.value("pred.out.w") = rng.normal_mat<double>(16, 8) * 0.3;

  Rng drng(substream(42, {2}));
  const MatD ctx_tokens = drng.normal_mat<double>(12, 8);  // 3 steps x 4 tokens

  auto run = [&](const MatD& c) {
    Tape<double> tape;
    Bind<double> bind(tape, ps, false);
    auto ctx = make_context(tape, c, 3, 2, 2);
    return predictor_forward(bind, ctx, cfg).z.value();
  };
  const MatD base = run(ctx_tokens);
  REQUIRE(base.rows() == 8);  // times 1..2, 4 spatial each

  MatD perturbed = ctx_tokens;
  perturbed.middleRows(4, 8).setConstant(55.0);  // context times 1 and 2
  const MatD out = run(perturbed);
  // z at time 1 attends only to context time 0: bitwise unchanged.
  CHECK((out.topRows(4) - base.topRows(4)).cwiseAbs().maxCoeff() == 0.0);
  // z at time 2 sees context time 1 and must change.
  CHECK((out.bottomRows(4) - base.bottomRows(4)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("context tokens are bitwise untouched by predictor_forward") {
  const auto cfg = small_cfg();
  ParamStore<double> ps;
  Rng rng(substream(43, {3}));
  register_predictor(ps, cfg, 8, rng);
  Rng drng(substream(44, {4}));
  const MatD ctx_tokens = drng.normal_mat<double>(8, 8);

  Tape<double> tape;
  Bind<double> bind(tape, ps, false);
  auto ctx = make_context(tape, ctx_tokens, 2, 2, 2);
  const MatD before = ctx.tokens.value();
  (void)predictor_forward(bind, ctx, cfg);
  CHECK((ctx.tokens.value() - before).cwiseAbs().maxCoeff() == 0.0);
  CHECK((ctx.tokens.value() - ctx_tokens).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("depth-0 predictor output is independent of the clip") {
  const auto cfg = small_cfg(0);
  ParamStore<double> ps;
  Rng rng(substream(45, {5}));
  register_predictor(ps, cfg, 8, rng);

  auto run = [&](const MatD& c) {
    Tape<double> tape;
    Bind<double> bind(tape, ps, false);
    auto ctx = make_context(tape, c, 2, 2, 2);
    return predictor_forward(bind, ctx, cfg).z.value();
  };
  Rng drng(substream(46, {6}));
  const MatD za = run(drng.normal_mat<double>(8, 8));
  const MatD zb = run(drng.normal_mat<double>(8, 8));
  CHECK((za - zb).cwiseAbs().maxCoeff() == 0.0);
  // Zero-init query + zero-init output projection: z is exactly zero at init.
  CHECK(za.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("missing context for a required past frame is an error") {
  const auto cfg = small_cfg();
  ParamStore<double> ps;
  Rng rng(substream(47, {7}));
  register_predictor(ps, cfg, 8, rng);
  Tape<double> tape;
  Bind<double> bind(tape, ps, false);
  ContextTokens<double> ctx;
  ctx.tokens = tape.constant(MatD::Zero(4, 8));
  ctx.time_steps = 3;
  ctx.grid_rows = 2;
  ctx.grid_cols = 2;
  // All context sits at time 1; time 0 is required for the t=1 queries.
  for (int i = 0; i < 4; ++i) ctx.pos.push_back({1, i / 2, i % 2});
  CHECK_THROWS_AS(predictor_forward(bind, ctx, cfg), ConfigError);
}

TEST_CASE("align_loss basics and stop-gradient") {
  Tape<double> tape;
  PredictedLatents<double> pred;
  Rng rng(substream(48, {8}));
  const MatD z = rng.normal_mat<double>(4, 8);
  pred.z = tape.leaf(z, true);

  CHECK(align_loss(tape, pred, z).value()(0, 0) == 0.0);

  const MatD ones_off = z.array() + 1.0;
  auto loss = align_loss(tape, pred, ones_off);
  CHECK(loss.value()(0, 0) == doctest::Approx(1.0).epsilon(1e-12));

  // Shape mismatch rejected.
  CHECK_THROWS_AS(align_loss(tape, pred, MatD(MatD::Zero(3, 8))), ConfigError);

  // The reference side is a constant: after backward, only z has gradient.
  tape.backward(loss);
  CHECK(tape.grad(pred.z).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("reference_alignment_rows slices time steps 1..T-1") {
  MatD full(6, 2);  // T=3, N_s=2
  for (int i = 0; i < 6; ++i) full.row(i).setConstant(i);
  const MatD rows = reference_alignment_rows(full, 3, 2);
  REQUIRE(rows.rows() == 4);
  CHECK(rows(0, 0) == 2.0);
  CHECK(rows(3, 0) == 5.0);
  CHECK_THROWS_AS(reference_alignment_rows(full, 4, 2), ConfigError);
}
