#pragma once

#include "nxtv/encoder.hpp"

#include <string>
#include <vector>

namespace nxtv {

struct PredictorConfig {
  int depth = 3;
  int width = 64;
  int heads = 4;
  double mlp_ratio = 4.0;
  double rope_base = 10000.0;

  void validate() const {
    if (depth < 0 || width <= 0 || heads <= 0)
      throw ConfigError("predictor: bad depth/width/heads");
    if (width % heads)
      throw ConfigError("predictor: width not divisible by heads");
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
void register_predictor(ParamStore<S>& ps, const PredictorConfig& cfg,
                        Index enc_width, Rng& rng, double sigma = 0.0) {
  cfg.validate();
  ps.add("pred.query", Mat<S>::Zero(1, cfg.width));  // zero-init mask token
  register_linear(ps, "pred.ctx_in", enc_width, cfg.width, rng, sigma);
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string blk = "pred.blk" + std::to_string(i);
    register_layernorm(ps, blk + ".ln1", cfg.width);
    register_attention(ps, blk + ".attn", cfg.width, cfg.width, cfg.width, rng,
                       sigma);
    register_layernorm(ps, blk + ".ln2", cfg.width);
    register_mlp(ps, blk + ".mlp", cfg.width, cfg.mlp_hidden(), rng, sigma);
  }
  register_layernorm(ps, "pred.out_ln", cfg.width);
  register_linear(ps, "pred.out", cfg.width, enc_width, rng, 0.0,
                  /*zero_init=*/true);
}

// One prediction per (time step >= 1, spatial position), projected back to
// encoder width.
template <typename S>
struct PredictedLatents {
  Var<S> z;  // (T-1)*N_s x enc_width, frame-major over time steps 1..T-1
  std::vector<Pos3> pos;
  int time_steps = 0;  // clip time steps T; predictions cover 1..T-1
  int grid_rows = 0;
  int grid_cols = 0;
};

// Learnable queries cross-attend to the context under the autoregressive
// mask. The context enters every layer as keys/values only, so it is never
// transformed in place; the projection to predictor width happens once.
// clip_time_steps defaults to the context's horizon; the autoregressive
// rollout passes ctx.time_steps + 1 to query one step beyond the context.
template <typename S>
PredictedLatents<S> predictor_forward(Bind<S>& b, const ContextTokens<S>& ctx,
                                      const PredictorConfig& cfg,
                                      int clip_time_steps = 0) {
  cfg.validate();
  const int T = clip_time_steps > 0 ? clip_time_steps : ctx.time_steps;
  if (T < 2) throw ConfigError("predictor: need at least 2 time steps");
  const int ns = ctx.grid_rows * ctx.grid_cols;

  std::vector<int> have(static_cast<std::size_t>(T), 0);
  std::vector<int> k_times;
  k_times.reserve(ctx.pos.size());
  for (const auto& p : ctx.pos) {
    ++have[static_cast<std::size_t>(p.t)];
    k_times.push_back(p.t);
  }
  for (int t = 0; t + 1 < T; ++t)
    if (have[static_cast<std::size_t>(t)] == 0)
      throw ConfigError("predictor: missing context for past frame " +
                        std::to_string(t));

  PredictedLatents<S> out;
  out.time_steps = T;
  out.grid_rows = ctx.grid_rows;
  out.grid_cols = ctx.grid_cols;
  std::vector<int> q_times;
  for (int t = 1; t < T; ++t)
    for (int y = 0; y < ctx.grid_rows; ++y)
      for (int x = 0; x < ctx.grid_cols; ++x) {
        out.pos.push_back({t, y, x});
        q_times.push_back(t);
      }

  const auto mask =
      build_attention_mask(AttnMode::autoregressive, q_times, k_times);
  const Mat<S> bias = attention_bias<S>(mask);
  const Rope3DSpec rope = cfg.rope();

  Tape<S>& tp = b.tape;
  Var<S> kv = linear(b, ctx.tokens, "pred.ctx_in");
  Var<S> x = tp.repeat_row(b("pred.query"), static_cast<Index>(T - 1) * ns);
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string blk = "pred.blk" + std::to_string(i);
    AttnInputs<S> in;
    in.q_in = layer_norm(b, x, blk + ".ln1");
    in.kv_in = kv;
    in.bias = &bias;
    in.rope = &rope;
    in.q_pos = &out.pos;
    in.k_pos = &ctx.pos;
    x = tp.add(x, masked_attention(b, in, cfg.heads, blk + ".attn"));
    x = tp.add(x, mlp(b, layer_norm(b, x, blk + ".ln2"), blk + ".mlp"));
  }
  out.z = linear(b, layer_norm(b, x, "pred.out_ln"), "pred.out");
  return out;
}

// MSE(z, sg[c']) over all predicted positions and channels. The reference
// rows enter as a tape constant, so no gradient reaches them.
template <typename S>
Var<S> align_loss(Tape<S>& tape, const PredictedLatents<S>& pred,
                  const Mat<S>& reference_rows) {
  if (reference_rows.rows() != pred.z.value().rows() ||
      reference_rows.cols() != pred.z.value().cols())
    throw ConfigError("align_loss: shape mismatch");
  return tape.mean_sq_diff(pred.z, tape.constant(reference_rows));
}

// Rows of the full-lattice reference output covering time steps 1..T-1.
template <typename S>
Mat<S> reference_alignment_rows(const Mat<S>& full_reference, int time_steps,
                                int spatial_positions) {
  const Index expect =
      static_cast<Index>(time_steps) * spatial_positions;
  if (full_reference.rows() != expect)
    throw ConfigError("reference rows: full lattice expected");
  return full_reference.bottomRows(static_cast<Index>(time_steps - 1) *
                                   spatial_positions);
}

}  // namespace nxtv
