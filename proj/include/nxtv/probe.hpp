#pragma once

#include "nxtv/pipeline.hpp"
#include "nxtv/trainer.hpp"

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

namespace nxtv {

struct ProbeConfig {
  int heads = 4;        // paper preset uses 16
  int epochs = 30;
  int batch = 64;
  double lr = 1e-3;
  int last_k_layers = 1;  // concat of the last k block outputs
  std::uint64_t seed = 0;

  void validate() const {
    if (heads <= 0 || epochs <= 0 || batch <= 0 || lr <= 0 || last_k_layers < 1)
      throw ConfigError("probe: bad config");
  }
};

// One learnable query + one cross-attention layer + a linear classifier.
template <typename S>
struct ProbeHead {
  ParamStore<S> params;
  int width = 0;
  int heads = 0;
  int num_classes = 0;
};

template <typename S>
ProbeHead<S> make_probe_head(int width, int heads, int num_classes,
                             std::uint64_t seed) {
  if (width % heads) throw ConfigError("probe: width not divisible by heads");
  ProbeHead<S> head;
  head.width = width;
  head.heads = heads;
  head.num_classes = num_classes;
  Rng rng(substream(seed, {0x70726f6265ull}));
  head.params.add("probe.query", rng.normal_mat<S>(1, width) * S(0.02));
  register_attention(head.params, "probe.attn", width, width, width, rng);
  // Zero-init classifier keeps training exactly equivariant under class
  // relabeling.
  register_linear(head.params, "probe.cls", width, num_classes, rng, 0.0, true);
  return head;
}

// Frozen-encoder features of a full unmasked clip: last block output (or the
// channel concat of the last k block outputs), via the frame-wise causal
// encoder.
template <typename S>
Mat<S> probe_features(Model<S>& model, const VideoClip& clip, int last_k = 1) {
  const auto& shape = model.cfg.shape;
  ClipShape s = shape;
  s.t_raw = clip.t_raw;
  const TokenSequence seq = patchify(clip, s);
  Tape<S> tape;
  Bind<S> bind(tape, model.params, /*trainable=*/false);
  std::vector<Var<S>> blocks;
  auto ctx =
      encoder_forward(bind, normalize_pixels<S>(seq.tokens), seq.pos,
                      seq.time_steps, seq.grid_rows, seq.grid_cols,
                      model.cfg.enc, &blocks);
  if (last_k <= 1 || blocks.empty()) return ctx.tokens.value();
  const int k = std::min<int>(last_k, static_cast<int>(blocks.size()));
  Mat<S> out(ctx.tokens.value().rows(),
             static_cast<Index>(k) * model.cfg.enc.width);
  for (int i = 0; i < k; ++i)
    out.middleCols(static_cast<Index>(i) * model.cfg.enc.width,
                   model.cfg.enc.width) =
        blocks[blocks.size() - static_cast<std::size_t>(k) +
               static_cast<std::size_t>(i)]
            .value();
  return out;
}

// Attentive pooling + classifier logits for one clip's features.
template <typename S>
Var<S> probe_logits(Bind<S>& b, const Mat<S>& features, int heads) {
  AttnInputs<S> in;
  in.q_in = b("probe.query");
  in.kv_in = b.tape.constant(features);
  return linear(b, masked_attention(b, in, heads, "probe.attn"), "probe.cls");
}

struct LabeledFeatures {
  std::vector<MatF> feats_f32;  // stored compactly; cast per use
  std::vector<int> labels;
};

template <typename S>
LabeledFeatures extract_probe_features(Model<S>& model,
                                       const std::vector<ClipRecord>& records,
                                       const ClipShape& shape, int last_k,
                                       double speed = 0.0) {
  LabeledFeatures out;
  out.feats_f32.reserve(records.size());
  out.labels.reserve(records.size());
  for (const auto& rec : records) {
    const VideoClip clip = generate_synthetic_clip(
        rec.seed, static_cast<MotionClass>(rec.class_id), shape, speed);
    out.feats_f32.push_back(
        probe_features(model, clip, last_k).template cast<float>());
    out.labels.push_back(rec.class_id);
  }
  return out;
}

// Cross-entropy training of the head; the encoder is not part of the graph,
// so its parameters receive exactly zero gradient.
template <typename S>
ProbeHead<S> probe_train(const LabeledFeatures& train_data,
                         const ProbeConfig& cfg) {
  cfg.validate();
  for (int l : train_data.labels)
    if (l < 0 || l >= kNumMotionClasses)
      throw ConfigError("probe: label out of range");
  const int width =
      static_cast<int>(train_data.feats_f32.at(0).cols());
  ProbeHead<S> head =
      make_probe_head<S>(width, cfg.heads, kNumMotionClasses, cfg.seed);

  AdamW<S> opt;
  opt.beta1 = 0.9;
  opt.beta2 = 0.999;
  opt.weight_decay = 0.0;
  opt.init(head.params);

  const int n = static_cast<int>(train_data.feats_f32.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  Tape<S> tape;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(substream(cfg.seed, {0x73687566ull,
                                         static_cast<std::uint64_t>(epoch)}));
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, i))]);
    for (int start = 0; start < n; start += cfg.batch) {
      const int stop = std::min(n, start + cfg.batch);
      tape.clear();
      Bind<S> bind(tape, head.params);
      Var<S> logits{};
      auto labels = std::make_shared<std::vector<int>>();
      for (int i = start; i < stop; ++i) {
        const int idx = order[static_cast<std::size_t>(i)];
        const Mat<S> feats =
            train_data.feats_f32[static_cast<std::size_t>(idx)].template cast<S>();
        Var<S> row = probe_logits(bind, feats, cfg.heads);
        logits = (i == start) ? row : tape.vcat(logits, row);
        labels->push_back(train_data.labels[static_cast<std::size_t>(idx)]);
      }
      auto loss = tape.cross_entropy(
          logits, std::shared_ptr<const std::vector<int>>(labels));
      if (!std::isfinite(static_cast<double>(loss.value()(0, 0))))
        throw TrainAbort("probe: non-finite loss");
      head.params.zero_grads();
      tape.backward(loss);
      bind.accumulate_grads();
      opt.step(head.params, [&](const std::string&) { return cfg.lr; });
    }
  }
  return head;
}

// Top-1 accuracy in [0,1]; deterministic given head and data.
template <typename S>
double probe_eval(ProbeHead<S>& head, const LabeledFeatures& data) {
  if (data.feats_f32.empty()) throw ConfigError("probe_eval: empty corpus");
  int correct = 0;
  Tape<S> tape;
  for (std::size_t i = 0; i < data.feats_f32.size(); ++i) {
    tape.clear();
    Bind<S> bind(tape, head.params, /*trainable=*/false);
    const Mat<S> feats = data.feats_f32[i].template cast<S>();
    const Mat<S> logits = probe_logits(bind, feats, head.heads).value();
    Index best = 0;
    logits.row(0).maxCoeff(&best);
    if (static_cast<int>(best) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.feats_f32.size());
}

template <typename S>
void save_probe(const ProbeHead<S>& head, const std::string& path) {
  Archive ar;
  store_to_archive(head.params, ar, "probe_head.");
  char manifest[128];
  std::snprintf(manifest, sizeof(manifest),
                "{\"width\":%d,\"heads\":%d,\"classes\":%d}", head.width,
                head.heads, head.num_classes);
  ar.manifest = manifest;
  ar.save(path);
}

}  // namespace nxtv
