#include "nxtv/gradcheck.hpp"
#include "nxtv/pipeline.hpp"

#include "doctest.h"

using namespace nxtv;

namespace {

// T=2, width 16 micro model in fp64.
ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.shape = ClipShape{4, 8, 8, 1, 4, 4, 2};
  cfg.enc = EncoderConfig{1, 16, 2, 4.0};
  cfg.pred = PredictorConfig{1, 16, 2, 4.0};
  cfg.dec = DecoderConfig{1, 16, 2, 4.0, 8};
  return cfg;
}

// Zero-init params (query, output heads, AdaLN, gates) block gradient flow
// at the exact init point; nudge them so the check exercises every path.
void open_zero_inits(ParamStore<double>& ps, std::uint64_t seed) {
  Rng rng(substream(seed, {0x6f70656eull}));
  for (auto& p : ps.params)
    if (p.value.cwiseAbs().maxCoeff() == 0.0 &&
        p.name.find(".b") == std::string::npos)
      p.value = rng.normal_mat<double>(p.value.rows(), p.value.cols()) * 0.05;
}

}  // namespace

TEST_CASE("full pipeline loss passes finite differences on the micro model") {
  auto model = make_model<double>(micro_config(), 1234);
  open_zero_inits(model.params, 99);

  const auto clip = generate_synthetic_clip(5, MotionClass::E, model.cfg.shape);
  const TokenSequence full = patchify(clip, model.cfg.shape);
  SpatialMask mask;
  mask.grid_rows = full.grid_rows;
  mask.grid_cols = full.grid_cols;
  mask.hidden = {2};
  const TokenSequence visible = apply_mask(full, mask);
  const MatD ref_rows = reference_targets(model, full);
  const MatD target_rows =
      targets_for_prediction(extract_targets(clip, model.cfg.shape, model.extractor),
                             full.time_steps, model.cfg.shape.spatial_positions())
          .cast<double>();

  LossFn<double> loss = [&](ParamStore<double>& store, bool want_grad) {
    Tape<double> tape;
    Bind<double> bind(tape, store);
    Rng flow_rng(substream(777, {1}));  // same draws every evaluation
    auto view = build_view_loss(bind, model, visible, target_rows, ref_rows,
                                /*k_tau=*/2, flow_rng, 0.5, 1.0);
    if (want_grad) {
      tape.backward(view.total);
      bind.accumulate_grads();
    }
    return view.total.value()(0, 0);
  };

  const auto rep = grad_check<double>(model.params, loss, 64, 4321);
  INFO("worst: ", rep.worst_param, " analytic=", rep.worst_analytic,
       " fd=", rep.worst_fd);
  CHECK(rep.max_rel_err < 1e-3);
  CHECK(rep.coords_checked == 64);

  // Reference encoder params stay gradient-free through the whole loss.
  model.params.zero_grads();
  model.ref.params.zero_grads();
  loss(model.params, true);
  for (const auto& p : model.ref.params.params)
    CHECK(p.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("loss report matches the weighted sum identity") {
  auto model = make_model<double>(micro_config(), 77);
  const auto clip = generate_synthetic_clip(3, MotionClass::N, model.cfg.shape);
  const TokenSequence full = patchify(clip, model.cfg.shape);
  const MatD ref_rows = reference_targets(model, full);
  const MatD target_rows =
      targets_for_prediction(extract_targets(clip, model.cfg.shape, model.extractor),
                             full.time_steps, model.cfg.shape.spatial_positions())
          .cast<double>();
  Tape<double> tape;
  Bind<double> bind(tape, model.params);
  Rng flow_rng(substream(7, {2}));
  auto view = build_view_loss(bind, model, full, target_rows, ref_rows, 1,
                              flow_rng, 0.5, 1.0);
  const double lhs = view.total.value()(0, 0);
  const double rhs = 0.5 * view.flow.value()(0, 0) + 1.0 * view.align.value()(0, 0);
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("generated target maps convert back to viewable frames") {
  auto model = make_model<float>(
      ModelConfig{ClipShape{4, 8, 8, 1, 4, 4, 2}, EncoderConfig{1, 16, 2, 4.0},
                  PredictorConfig{1, 16, 2, 4.0}, DecoderConfig{1, 16, 2, 4.0, 8}},
      9);
  const auto clip = generate_synthetic_clip(8, MotionClass::W, model.cfg.shape);
  const TokenSequence full = patchify(clip, model.cfg.shape);
  Rng rng(substream(10, {3}));
  const MatF map = generate_targets(model, full, 2, rng);
  CHECK(map.rows() == 4);  // (T-1) * N_s = 1 * 4
  const VideoClip out = prediction_map_to_clip(map, model.cfg.shape);
  CHECK(out.t_raw == 2);  // one predicted time step, tubelet 2
  CHECK(out.frames.minCoeff() >= 0.0f);
  CHECK(out.frames.maxCoeff() <= 1.0f);
}
