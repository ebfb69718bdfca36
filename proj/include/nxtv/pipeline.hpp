#pragma once

#include "nxtv/flowdecoder.hpp"
#include "nxtv/io.hpp"

#include <string>
#include <vector>

namespace nxtv {

struct ModelConfig {
  ClipShape shape;
  EncoderConfig enc;
  PredictorConfig pred;
  DecoderConfig dec;
  TargetKind target = TargetKind::pixel_cube;
  double ema_decay = 0.996;

  void validate() const {
    shape.validate_for_training();
    enc.validate();
    pred.validate();
    dec.validate();
    if (ema_decay < 0.0 || ema_decay > 1.0)
      throw ConfigError("model: ema_decay outside [0,1]");
  }
};

template <typename S>
struct Model {
  ModelConfig cfg;
  ParamStore<S> params;    // enc.* pred.* dec.*
  ReferenceState<S> ref;   // EMA copy of enc.*
  TargetExtractor extractor;

  Index target_dim() const {
    return extractor.kind == TargetKind::pixel_cube
               ? cfg.shape.token_dim_raw()
               : target_dim_override;
  }
  Index target_dim_override = 0;
};

template <typename S>
Model<S> make_model(const ModelConfig& cfg, std::uint64_t seed,
                    TargetExtractor extractor = {}, Index latent_dim = 0) {
  cfg.validate();
  Model<S> m;
  m.cfg = cfg;
  m.extractor = std::move(extractor);
  m.target_dim_override = latent_dim;
  if (m.extractor.kind == TargetKind::pluggable_latent && latent_dim <= 0)
    throw ConfigError("model: pluggable latent target needs its dim");
  Rng rng(substream(seed, {0x6d6f64656cull}));
  register_encoder(m.params, cfg.enc, cfg.shape.token_dim_raw(), rng);
  register_predictor(m.params, cfg.pred, cfg.enc.width, rng);
  register_decoder(m.params, cfg.dec, cfg.enc.width, m.target_dim(), rng);
  m.ref = make_reference(m.params, cfg.ema_decay);
  return m;
}

// Reference targets for one clip: full unmasked lattice through the EMA
// encoder, rows for time steps 1..T-1. Computed once per clip per step and
// shared across that clip's mask views.
template <typename S>
Mat<S> reference_targets(Model<S>& model, const TokenSequence& full_seq) {
  const auto& shape = model.cfg.shape;
  const Mat<S> norm = normalize_pixels<S>(full_seq.tokens);
  const Mat<S> all = reference_forward(model.ref, norm, full_seq.pos,
                                       full_seq.time_steps, full_seq.grid_rows,
                                       full_seq.grid_cols, model.cfg.enc);
  return reference_alignment_rows(all, full_seq.time_steps,
                                  shape.spatial_positions());
}

template <typename S>
struct ViewLoss {
  Var<S> total, flow, align;
  PredictedLatents<S> pred;
};

// One masked view through encoder -> predictor -> (align, k_tau-fold flow).
// Gradients flow decoder -> predictor -> encoder; only the reference branch
// is detached.
template <typename S>
ViewLoss<S> build_view_loss(Bind<S>& bind, Model<S>& model,
                            const TokenSequence& visible,
                            const Mat<S>& target_rows, const Mat<S>& ref_rows,
                            int k_tau, Rng& rng, double w_flow, double w_align,
                            bool discrete_tau = false) {
  Tape<S>& tape = bind.tape;
  const Mat<S> norm = normalize_pixels<S>(visible.tokens);
  auto ctx = encoder_forward(bind, norm, visible.pos, visible.time_steps,
                             visible.grid_rows, visible.grid_cols,
                             model.cfg.enc);
  ViewLoss<S> out;
  out.pred = predictor_forward(bind, ctx, model.cfg.pred);
  out.align = align_loss(tape, out.pred, ref_rows);
  FlowFieldFn<S> field = [&bind, &out, &model](Tape<S>& tp,
                                               const FlowSample<S>& s) {
    return decoder_forward(bind, out.pred.z, s.x_tau, s.tau, out.pred.pos,
                           model.cfg.dec);
  };
  out.flow = flow_loss(tape, target_rows, k_tau, rng, field, discrete_tau);
  out.total = tape.add(tape.scale(out.flow, static_cast<S>(w_flow)),
                       tape.scale(out.align, static_cast<S>(w_align)));
  return out;
}

// Frozen-parameter forward of encoder + predictor; returns plain z values.
template <typename S>
struct PredictionContext {
  Mat<S> z;
  std::vector<Pos3> pos;
};

template <typename S>
PredictionContext<S> predict_latents(Model<S>& model,
                                     const TokenSequence& visible) {
  Tape<S> tape;
  Bind<S> bind(tape, model.params, /*trainable=*/false);
  const Mat<S> norm = normalize_pixels<S>(visible.tokens);
  auto ctx = encoder_forward(bind, norm, visible.pos, visible.time_steps,
                             visible.grid_rows, visible.grid_cols,
                             model.cfg.enc);
  auto pred = predictor_forward(bind, ctx, model.cfg.pred);
  return {pred.z.value(), pred.pos};
}

// Euler-sampled target map for time steps 1..T-1 (normalized domain),
// conditioned on z from the given (possibly masked) view.
template <typename S>
Mat<S> generate_targets(Model<S>& model, const TokenSequence& visible,
                        int steps, Rng& rng) {
  const auto pc = predict_latents(model, visible);
  auto field = [&model, &pc](const Mat<S>& x, S tau) {
    Tape<S> tape;
    Bind<S> bind(tape, model.params, /*trainable=*/false);
    auto z = tape.constant(pc.z);
    return decoder_forward(bind, z, x, tau, pc.pos, model.cfg.dec).value();
  };
  return euler_sample<S>(pc.z.rows(), model.target_dim(), steps, rng, field);
}

// Seed-image rollout: starting from a frame-invariant single-step context,
// generate the next time step, feed it back, and repeat until the clip holds
// time_steps_total steps.
template <typename S>
VideoClip autoregressive_rollout(Model<S>& model,
                                 const Eigen::ArrayXf& seed_frame,
                                 int time_steps_total, int euler_steps,
                                 Rng& rng) {
  const ClipShape& shape = model.cfg.shape;
  if (time_steps_total < 2)
    throw ConfigError("rollout: need at least 2 time steps");
  VideoClip clip = image_to_clip(seed_frame, shape.tubelet, shape);
  clip.source = ClipSource::static_image;
  const int ns = shape.spatial_positions();
  for (int t = 1; t < time_steps_total; ++t) {
    ClipShape cur = shape;
    cur.t_raw = t * shape.tubelet;
    const TokenSequence ctx_seq = patchify(clip, cur);

    Tape<S> tape;
    Bind<S> bind(tape, model.params, /*trainable=*/false);
    auto ctx = encoder_forward(bind, normalize_pixels<S>(ctx_seq.tokens),
                               ctx_seq.pos, ctx_seq.time_steps,
                               ctx_seq.grid_rows, ctx_seq.grid_cols,
                               model.cfg.enc);
    auto pred = predictor_forward(bind, ctx, model.cfg.pred, t + 1);
    const Mat<S> z_all = pred.z.value();
    const Mat<S> z_next = z_all.bottomRows(ns);
    std::vector<Pos3> next_pos(pred.pos.end() - ns, pred.pos.end());

    auto field = [&model, &z_next, &next_pos](const Mat<S>& x, S tau) {
      Tape<S> t2;
      Bind<S> b2(t2, model.params, /*trainable=*/false);
      return decoder_forward(b2, t2.constant(z_next), x, tau, next_pos,
                             model.cfg.dec)
          .value();
    };
    const Mat<S> map =
        euler_sample<S>(ns, model.target_dim(), euler_steps, rng, field);

    // Append the decoded tubelet frames.
    TokenSequence block;
    block.time_steps = 1;
    block.grid_rows = shape.grid_rows();
    block.grid_cols = shape.grid_cols();
    block.tokens = denormalize_pixels(map.template cast<float>());
    for (int y = 0; y < block.grid_rows; ++y)
      for (int x = 0; x < block.grid_cols; ++x) block.pos.push_back({0, y, x});
    ClipShape one = shape;
    one.t_raw = shape.tubelet;
    VideoClip decoded = unpatchify(block, one);
    decoded.frames = decoded.frames.min(1.0f).max(0.0f);

    VideoClip grown;
    grown.t_raw = clip.t_raw + shape.tubelet;
    grown.h = clip.h;
    grown.w = clip.w;
    grown.c = clip.c;
    grown.frames.resize(clip.frames.size() + decoded.frames.size());
    grown.frames << clip.frames, decoded.frames;
    clip = std::move(grown);
  }
  return clip;
}

// Rebuilds viewable frames from a predicted target map (pixel targets only).
// The map covers time steps 1..T-1; returned clip has (T-1)*tubelet frames.
inline VideoClip prediction_map_to_clip(const MatF& map,
                                        const ClipShape& shape) {
  ClipShape sub = shape;
  sub.t_raw = (shape.time_steps() - 1) * shape.tubelet;
  TokenSequence seq;
  seq.time_steps = sub.time_steps();
  seq.grid_rows = sub.grid_rows();
  seq.grid_cols = sub.grid_cols();
  seq.tokens = denormalize_pixels(map);
  for (int t = 0; t < seq.time_steps; ++t)
    for (int y = 0; y < seq.grid_rows; ++y)
      for (int x = 0; x < seq.grid_cols; ++x) seq.pos.push_back({t, y, x});
  if (seq.count() != map.rows())
    throw ConfigError("prediction map: row count mismatch");
  VideoClip clip = unpatchify(seq, sub);
  clip.frames = clip.frames.min(1.0f).max(0.0f);
  return clip;
}

// Checkpoint io: online params, EMA reference, and a JSON manifest blob.
template <typename S>
void save_model(const Model<S>& model, Archive& ar) {
  store_to_archive(model.params, ar, "model.");
  store_to_archive(model.ref.params, ar, "ref.");
}

template <typename S>
void load_model(Model<S>& model, const Archive& ar) {
  store_from_archive(model.params, ar, "model.");
  store_from_archive(model.ref.params, ar, "ref.");
}

}  // namespace nxtv
