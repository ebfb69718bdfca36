#pragma once

#include "nxtv/predictor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace nxtv {

enum class TargetKind { pixel_cube, pluggable_latent };

// Per-frame latent hook: maps one raw frame (flat h*w*c) to N_s rows of
// latent features; the tubelet's frames are then stacked along channels so
// every target token covers the same video cube as its condition token.
using FrameLatentFn =
    std::function<MatF(const Eigen::ArrayXf& frame, const ClipShape& shape)>;

struct TargetExtractor {
  TargetKind kind = TargetKind::pixel_cube;
  FrameLatentFn latent_fn;  // required for pluggable_latent
};

// Full-lattice target map (T*N_s rows, frame-major). pixel_cube tokens are
// the normalized pixel cubes, identical to patchify up to normalization.
inline MatF extract_targets(const VideoClip& clip, const ClipShape& shape,
                            const TargetExtractor& ex) {
  shape.validate();
  if (!clip.conforms(shape))
    throw ConfigError("extract_targets: clip does not conform to shape");
  if (ex.kind == TargetKind::pixel_cube) {
    const auto seq = patchify(clip, shape);
    return normalize_pixels<float>(seq.tokens);
  }
  if (!ex.latent_fn)
    throw ConfigError("extract_targets: pluggable latent without extractor");
  const int T = shape.time_steps();
  const int ns = shape.spatial_positions();
  const Index fsz = static_cast<Index>(shape.h) * shape.w * shape.c;
  MatF out;
  for (int t = 0; t < T; ++t) {
    MatF stacked;
    for (int dt = 0; dt < shape.tubelet; ++dt) {
      const Eigen::ArrayXf frame =
          clip.frames.segment((static_cast<Index>(t) * shape.tubelet + dt) * fsz,
                              fsz);
      MatF lat = ex.latent_fn(frame, shape);
      if (lat.rows() != ns)
        throw ConfigError("extract_targets: latent extractor row mismatch");
      if (dt == 0) {
        stacked = std::move(lat);
      } else {
        if (lat.cols() != stacked.cols() / dt)
          throw ConfigError("extract_targets: latent extractor dim mismatch");
        MatF merged(ns, stacked.cols() + lat.cols());
        merged << stacked, lat;
        stacked = std::move(merged);
      }
    }
    if (out.size() == 0) {
      out.resize(static_cast<Index>(T) * ns, stacked.cols());
    } else if (stacked.cols() != out.cols()) {
      throw ConfigError("extract_targets: latent extractor dim mismatch");
    }
    out.middleRows(static_cast<Index>(t) * ns, ns) = stacked;
  }
  return out;
}

// Rows covering predicted time steps 1..T-1.
inline MatF targets_for_prediction(const MatF& full, int time_steps,
                                   int spatial_positions) {
  if (full.rows() != static_cast<Index>(time_steps) * spatial_positions)
    throw ConfigError("targets_for_prediction: full lattice expected");
  return full.bottomRows(static_cast<Index>(time_steps - 1) *
                         spatial_positions);
}

// x_tau = (1 - tau) * x0 + tau * x1, exactly.
template <typename S>
Mat<S> flow_interpolate(const Mat<S>& x0, const Mat<S>& x1, S tau) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
    throw ConfigError("flow_interpolate: shape mismatch");
  if (tau < S(0) || tau > S(1))
    throw ConfigError("flow_interpolate: tau outside [0,1]");
  return x0 * (S(1) - tau) + x1 * tau;
}

template <typename S>
struct FlowSample {
  Mat<S> x0;     // noise ~ N(0, I)
  Mat<S> x1;     // target tokens
  S tau = S(0);
  Mat<S> x_tau;  // (1 - tau) x0 + tau x1
  Mat<S> v;      // x1 - x0
};

template <typename S>
FlowSample<S> draw_flow_sample(const Mat<S>& x1, Rng& rng,
                               bool discrete_grid = false) {
  FlowSample<S> s;
  s.x1 = x1;
  // "Timesteps 1000, Mode Random": continuous Uniform(0,1) by default; the
  // discrete grid (i + 0.5)/1000 sits behind the flag.
  if (discrete_grid)
    s.tau = static_cast<S>((static_cast<double>(rng.uniform_int(0, 999)) + 0.5) /
                           1000.0);
  else
    s.tau = static_cast<S>(rng.uniform());
  s.x0 = rng.normal_mat<S>(x1.rows(), x1.cols());
  s.x_tau = flow_interpolate(s.x0, s.x1, s.tau);
  s.v = s.x1 - s.x0;
  return s;
}

struct DecoderConfig {
  int depth = 3;
  int width = 64;
  int heads = 4;
  double mlp_ratio = 4.0;
  int temb_dim = 64;  // sinusoidal feature dim for tau
  double rope_base = 10000.0;

  void validate() const {
    if (depth < 0 || width <= 0 || heads <= 0 || temb_dim <= 0 || temb_dim % 2)
      throw ConfigError("decoder: bad depth/width/heads/temb_dim");
    if (width % heads)
      throw ConfigError("decoder: width not divisible by heads");
  }
  int head_dim() const { return width / heads; }
  Index mlp_hidden() const {
    return static_cast<Index>(width * mlp_ratio + 0.5);
  }
  Rope3DSpec rope() const {
    return Rope3DSpec::proportional(head_dim(), rope_base);
  }
};

template <typename S>
void register_decoder(ParamStore<S>& ps, const DecoderConfig& cfg,
                      Index cond_width, Index target_dim, Rng& rng,
                      double sigma = 0.0) {
  cfg.validate();
  register_linear(ps, "dec.in", cond_width + target_dim, cfg.width, rng, sigma);
  register_linear(ps, "dec.temb.fc1", cfg.temb_dim, cfg.width, rng, sigma);
  register_linear(ps, "dec.temb.fc2", cfg.width, cfg.width, rng, sigma);
  Rng unused(0);
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string blk = "dec.blk" + std::to_string(i);
    register_adaln(ps, blk + ".mod1", cfg.width, cfg.width);
    register_linear(ps, blk + ".gate1", cfg.width, cfg.width, unused, 0.0, true);
    register_attention(ps, blk + ".attn", cfg.width, cfg.width, cfg.width, rng,
                       sigma);
    register_adaln(ps, blk + ".mod2", cfg.width, cfg.width);
    register_linear(ps, blk + ".gate2", cfg.width, cfg.width, unused, 0.0, true);
    register_mlp(ps, blk + ".mlp", cfg.width, cfg.mlp_hidden(), rng, sigma);
  }
  register_adaln(ps, "dec.final.mod", cfg.width, cfg.width);
  register_linear(ps, "dec.head", cfg.width, target_dim, unused, 0.0, true);
}

// Sinusoidal features of tau * 1000.
template <typename S>
Mat<S> timestep_features(S tau, int dim) {
  Mat<S> out(1, dim);
  const int half = dim / 2;
  const double t = static_cast<double>(tau) * 1000.0;
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
    out(0, i) = static_cast<S>(std::cos(t * freq));
    out(0, half + i) = static_cast<S>(std::sin(t * freq));
  }
  return out;
}

// DiT-style conditioned velocity field: per-token input is the channel
// concatenation concat(z, x_tau) on the shared (t, y, x) lattice; every block
// runs frame-isolated self-attention and an MLP, both AdaLN-modulated by the
// tau embedding, with zero-init gates so the trunk starts as identity.
template <typename S>
Var<S> decoder_forward(Bind<S>& b, Var<S> z, const Mat<S>& x_tau, S tau,
                       const std::vector<Pos3>& pos, const DecoderConfig& cfg) {
  cfg.validate();
  Tape<S>& tp = b.tape;
  if (x_tau.rows() != z.value().rows())
    throw ConfigError("decoder: z and x_tau lattice mismatch");
  if (static_cast<Index>(pos.size()) != x_tau.rows())
    throw ConfigError("decoder: position count mismatch");

  std::vector<int> times;
  times.reserve(pos.size());
  for (const auto& p : pos) times.push_back(p.t);
  const auto mask =
      build_attention_mask(AttnMode::frame_isolated, times, times);
  const Mat<S> bias = attention_bias<S>(mask);
  const Rope3DSpec rope = cfg.rope();

  Var<S> cond =
      mlp(b, tp.constant(timestep_features<S>(tau, cfg.temb_dim)), "dec.temb");
  Var<S> x = linear(b, tp.hcat(z, tp.constant(x_tau)), "dec.in");
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string blk = "dec.blk" + std::to_string(i);
    AttnInputs<S> in;
    in.q_in = adaln_modulate(b, x, cond, blk + ".mod1");
    in.kv_in = in.q_in;
    in.bias = &bias;
    in.rope = &rope;
    in.q_pos = &pos;
    in.k_pos = &pos;
    Var<S> a = masked_attention(b, in, cfg.heads, blk + ".attn");
    x = tp.add(x, tp.row_mul(a, linear(b, cond, blk + ".gate1")));
    Var<S> m = mlp(b, adaln_modulate(b, x, cond, blk + ".mod2"), blk + ".mlp");
    x = tp.add(x, tp.row_mul(m, linear(b, cond, blk + ".gate2")));
  }
  return linear(b, adaln_modulate(b, x, cond, "dec.final.mod"), "dec.head");
}

// Velocity field used by flow_loss; the production field wraps
// decoder_forward, tests substitute oracles (e.g. the exact velocity).
template <typename S>
using FlowFieldFn =
    std::function<Var<S>(Tape<S>&, const FlowSample<S>&)>;

// Mean squared velocity error over k_tau independent (x0, tau) draws.
// Per-time-step means are taken here by averaging over all predicted tokens.
template <typename S>
Var<S> flow_loss(Tape<S>& tape, const Mat<S>& targets, int k_tau, Rng& rng,
                 const FlowFieldFn<S>& field, bool discrete_grid = false) {
  if (k_tau < 1) throw ConfigError("flow_loss: k_tau must be >= 1");
  Var<S> acc{};
  for (int k = 0; k < k_tau; ++k) {
    const FlowSample<S> s = draw_flow_sample<S>(targets, rng, discrete_grid);
    Var<S> vhat = field(tape, s);
    Var<S> l = tape.mean_sq_diff(vhat, tape.constant(s.v));
    acc = (k == 0) ? l : tape.add(acc, l);
  }
  return tape.scale(acc, S(1) / static_cast<S>(k_tau));
}

// x <- x + (1/steps) * g(x, tau_i), tau_i = i/steps, from x ~ N(0, I).
template <typename S>
Mat<S> euler_sample(Index rows, Index cols, int steps, Rng& rng,
                    const std::function<Mat<S>(const Mat<S>&, S)>& field) {
  if (steps < 1) throw ConfigError("euler_sample: steps must be >= 1");
  Mat<S> x = rng.normal_mat<S>(rows, cols);
  const S h = S(1) / static_cast<S>(steps);
  for (int i = 0; i < steps; ++i)
    x += h * field(x, static_cast<S>(i) / static_cast<S>(steps));
  return x;
}

}  // namespace nxtv
