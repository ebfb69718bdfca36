#pragma once

#include "nxtv/masking.hpp"
#include "nxtv/nn.hpp"

#include <string>
#include <vector>

namespace nxtv {

struct EncoderConfig {
  int depth = 4;
  int width = 64;
  int heads = 4;
  double mlp_ratio = 4.0;
  double rope_base = 10000.0;
  // frame_wise_causal in production; `full` exists as the negative-control
  // hook for the causality checks.
  AttnMode attn_mode = AttnMode::frame_wise_causal;

  void validate() const {
    if (depth < 0 || width <= 0 || heads <= 0)
      throw ConfigError("encoder: bad depth/width/heads");
    if (width % heads) throw ConfigError("encoder: width not divisible by heads");
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
void register_encoder(ParamStore<S>& ps, const EncoderConfig& cfg,
                      Index token_dim_raw, Rng& rng, double sigma = 0.0) {
  cfg.validate();
  register_linear(ps, "enc.in", token_dim_raw, cfg.width, rng, sigma);
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string blk = "enc.blk" + std::to_string(i);
    register_layernorm(ps, blk + ".ln1", cfg.width);
    register_attention(ps, blk + ".attn", cfg.width, cfg.width, cfg.width, rng,
                       sigma);
    register_layernorm(ps, blk + ".ln2", cfg.width);
    register_mlp(ps, blk + ".mlp", cfg.width, cfg.mlp_hidden(), rng, sigma);
  }
  register_layernorm(ps, "enc.out_ln", cfg.width);
}

// Per-token context embeddings; token at time t depends only on visible
// input tokens at times <= t.
template <typename S>
struct ContextTokens {
  Var<S> tokens;  // visible count x width, frame-major
  std::vector<Pos3> pos;
  int time_steps = 0;
  int grid_rows = 0;
  int grid_cols = 0;
};

template <typename S>
ContextTokens<S> encoder_forward(Bind<S>& b, const Mat<S>& tokens_normalized,
                                 const std::vector<Pos3>& pos, int time_steps,
                                 int grid_rows, int grid_cols,
                                 const EncoderConfig& cfg,
                                 std::vector<Var<S>>* block_outputs = nullptr) {
  cfg.validate();
  if (static_cast<Index>(pos.size()) != tokens_normalized.rows())
    throw ConfigError("encoder: token/position count mismatch");
  std::vector<int> per_step(static_cast<std::size_t>(time_steps), 0);
  std::vector<int> times;
  times.reserve(pos.size());
  for (const auto& p : pos) {
    if (p.t < 0 || p.t >= time_steps)
      throw ConfigError("encoder: position time out of range");
    ++per_step[static_cast<std::size_t>(p.t)];
    times.push_back(p.t);
  }
  for (int t = 0; t < time_steps; ++t)
    if (per_step[static_cast<std::size_t>(t)] == 0)
      throw ConfigError("encoder: empty frame after masking");

  const auto mask = build_attention_mask(cfg.attn_mode, times, times);
  const Mat<S> bias = attention_bias<S>(mask);
  const Rope3DSpec rope = cfg.rope();

  Tape<S>& tp = b.tape;
  Var<S> x = linear(b, tp.constant(tokens_normalized), "enc.in");
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string blk = "enc.blk" + std::to_string(i);
    AttnInputs<S> in;
    in.q_in = layer_norm(b, x, blk + ".ln1");
    in.kv_in = in.q_in;
    in.bias = &bias;
    in.rope = &rope;
    in.q_pos = &pos;
    in.k_pos = &pos;
    x = tp.add(x, masked_attention(b, in, cfg.heads, blk + ".attn"));
    x = tp.add(x, mlp(b, layer_norm(b, x, blk + ".ln2"), blk + ".mlp"));
    if (block_outputs != nullptr) block_outputs->push_back(x);
  }
  x = layer_norm(b, x, "enc.out_ln");

  ContextTokens<S> out;
  out.tokens = x;
  out.pos = pos;
  out.time_steps = time_steps;
  out.grid_rows = grid_rows;
  out.grid_cols = grid_cols;
  return out;
}

// EMA-updated parameter copy of the online encoder. Never receives gradient:
// its forward runs on a detached tape with non-trainable leaves.
template <typename S>
struct ReferenceState {
  ParamStore<S> params;
  double decay = 0.996;
};

template <typename S>
ReferenceState<S> make_reference(const ParamStore<S>& online, double decay) {
  ReferenceState<S> ref;
  ref.decay = decay;
  for (const auto& p : online.params)
    if (p.name.rfind("enc.", 0) == 0) ref.params.add(p.name, p.value);
  return ref;
}

// ref' = m * ref + (1 - m) * online, elementwise.
template <typename S>
void ema_update(ReferenceState<S>& ref, const ParamStore<S>& online, double m) {
  if (m < 0.0 || m > 1.0) throw ConfigError("ema: decay outside [0,1]");
  for (auto& p : ref.params.params) {
    const Mat<S>& online_v = online.value(p.name);
    if (online_v.rows() != p.value.rows() || online_v.cols() != p.value.cols())
      throw ConfigError("ema: shape mismatch for " + p.name);
    p.value = p.value * static_cast<S>(m) + online_v * static_cast<S>(1.0 - m);
  }
}

// Runs the encoder over the full unmasked lattice under the same frame-wise
// causal mask, recording no gradients.
template <typename S>
Mat<S> reference_forward(ReferenceState<S>& ref, const Mat<S>& full_tokens,
                         const std::vector<Pos3>& pos, int time_steps,
                         int grid_rows, int grid_cols,
                         const EncoderConfig& cfg) {
  Tape<S> tape;
  Bind<S> bind(tape, ref.params, /*trainable=*/false);
  auto ctx = encoder_forward(bind, full_tokens, pos, time_steps, grid_rows,
                             grid_cols, cfg);
  return ctx.tokens.value();
}

}  // namespace nxtv
