#include "nxtv/config.hpp"

#include "json.hpp"

#include <fstream>
#include <set>

namespace nxtv {

using nlohmann::json;

namespace {

// Marks consumed keys and rejects anything unexpected.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw ConfigError("config: " + path_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& target) {
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        target = it->get<T>();
      } catch (const json::exception&) {
        throw ConfigError("config: bad value for " + path_ + "." + key);
      }
    }
    seen_.insert(key);
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() != exc_at_entry_) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError("config: unknown key " + path_ + "." + it.key());
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
  int exc_at_entry_ = std::uncaught_exceptions();
};

void overlay_shape(Section& s, ClipShape& shape) {
  s.get("t_raw", shape.t_raw);
  s.get("h", shape.h);
  s.get("w", shape.w);
  s.get("c", shape.c);
  s.get("patch_h", shape.patch_h);
  s.get("patch_w", shape.patch_w);
  s.get("tubelet", shape.tubelet);
}

void overlay(const json& j, RunConfig& cfg) {
  Section root(j, "");
  root.get("preset", cfg.preset_name);
  root.get("seed", cfg.seed);
  root.get("threads", cfg.threads);
  root.get("out", cfg.out);
  root.get("dtype", cfg.dtype);
  root.get("target", cfg.target);

  if (root.has("data")) {
    Section s(root.raw("data"), "data");
    overlay_shape(s, cfg.data.shape);
    s.get("speed", cfg.data.speed);
    s.get("train_clips", cfg.data.train_clips);
    s.get("val_clips", cfg.data.val_clips);
    s.get("corpus_dir", cfg.data.corpus_dir);
  }
  if (root.has("masking")) {
    Section s(root.raw("masking"), "masking");
    s.get("scale_lo", cfg.trainer.mask_base.scale_lo);
    s.get("scale_hi", cfg.trainer.mask_base.scale_hi);
    s.get("aspect_lo", cfg.trainer.mask_base.aspect_lo);
    s.get("aspect_hi", cfg.trainer.mask_base.aspect_hi);
    s.get("enabled", cfg.trainer.masking);
  }
  if (root.has("encoder")) {
    Section s(root.raw("encoder"), "encoder");
    s.get("depth", cfg.model.enc.depth);
    s.get("width", cfg.model.enc.width);
    s.get("heads", cfg.model.enc.heads);
    s.get("mlp_ratio", cfg.model.enc.mlp_ratio);
    s.get("rope_base", cfg.model.enc.rope_base);
  }
  if (root.has("predictor")) {
    Section s(root.raw("predictor"), "predictor");
    s.get("depth", cfg.model.pred.depth);
    s.get("width", cfg.model.pred.width);
    s.get("heads", cfg.model.pred.heads);
    s.get("mlp_ratio", cfg.model.pred.mlp_ratio);
    s.get("rope_base", cfg.model.pred.rope_base);
  }
  if (root.has("decoder")) {
    Section s(root.raw("decoder"), "decoder");
    s.get("depth", cfg.model.dec.depth);
    s.get("width", cfg.model.dec.width);
    s.get("heads", cfg.model.dec.heads);
    s.get("mlp_ratio", cfg.model.dec.mlp_ratio);
    s.get("temb_dim", cfg.model.dec.temb_dim);
    s.get("rope_base", cfg.model.dec.rope_base);
  }
  root.get("ema_decay", cfg.model.ema_decay);
  if (root.has("trainer")) {
    Section s(root.raw("trainer"), "trainer");
    s.get("batch", cfg.trainer.batch);
    s.get("grad_clip", cfg.trainer.grad_clip);
    s.get("beta1", cfg.trainer.beta1);
    s.get("beta2", cfg.trainer.beta2);
    s.get("weight_decay", cfg.trainer.weight_decay);
    s.get("image_prob", cfg.trainer.image_prob);
    s.get("flow_weight", cfg.trainer.weights.flow);
    s.get("align_weight", cfg.trainer.weights.align);
    s.get("discrete_tau", cfg.trainer.discrete_tau);
    s.get("checkpoint_every", cfg.trainer.checkpoint_every);
    if (s.has("stages")) {
      const json& stages = s.raw("stages");
      if (!stages.is_array())
        throw ConfigError("config: trainer.stages must be an array");
      cfg.trainer.schedule.stages.clear();
      int idx = 0;
      for (const auto& stage_json : stages) {
        StageSpec spec;
        Section st(stage_json, "trainer.stages[" + std::to_string(idx) + "]");
        st.get("name", spec.name);
        st.get("steps", spec.steps);
        st.get("start_lr", spec.start_lr);
        st.get("final_lr", spec.final_lr);
        st.get("flow_lr", spec.flow_lr);
        st.get("k_tau", spec.k_tau);
        st.get("frames", spec.frames);
        if (spec.name.empty()) spec.name = "stage" + std::to_string(idx);
        cfg.trainer.schedule.stages.push_back(std::move(spec));
        ++idx;
      }
    }
  }
  if (root.has("probe")) {
    Section s(root.raw("probe"), "probe");
    s.get("heads", cfg.probe.heads);
    s.get("epochs", cfg.probe.epochs);
    s.get("batch", cfg.probe.batch);
    s.get("lr", cfg.probe.lr);
    s.get("last_k_layers", cfg.probe.last_k_layers);
  }
  if (root.has("generate")) {
    Section s(root.raw("generate"), "generate");
    s.get("euler_steps", cfg.generate.euler_steps);
    s.get("clips", cfg.generate.clips);
  }
}

Schedule desk_schedule() {
  Schedule s;
  s.stages = {
      {"warmup", 200, 1e-4, 5e-4, 0.0, 4, 16},
      {"stable1", 400, 5e-4, 4.5e-4, 0.0, 4, 16},
      {"stable2", 800, 4.5e-4, 1e-4, 8e-4, 1, 16},
      {"cooldown", 200, 1e-4, 1e-6, 3e-4, 1, 32},
  };
  return s;
}

// Shrunk four-stage schedule used by the acceptance runs; same shape as the
// desk schedule (warmup ramp, two stable stages with the k_tau 4 -> 1 switch
// and a separate flow lr, frame-doubling cooldown) at minutes-scale runtime.
Schedule accept_schedule() {
  Schedule s;
  s.stages = {
      {"warmup", 40, 1e-4, 1e-3, 0.0, 4, 16},
      {"stable1", 80, 1e-3, 8e-4, 0.0, 4, 16},
      {"stable2", 160, 8e-4, 2e-4, 1.2e-3, 1, 16},
      {"cooldown", 40, 2e-4, 1e-5, 5e-4, 1, 32},
  };
  return s;
}

}  // namespace

void RunConfig::validate() const {
  data.shape.validate_for_training();
  model.validate();
  trainer.validate();
  probe.validate();
  if (dtype != "f32" && dtype != "f64")
    throw ConfigError("config: dtype must be f32 or f64");
  if (target != "pixel" && target != "latent")
    throw ConfigError("config: target must be pixel or latent");
  if (data.train_clips < 0 || data.val_clips < 0)
    throw ConfigError("config: clip counts must be >= 0");
  if (generate.euler_steps < 1)
    throw ConfigError("config: euler_steps must be >= 1");
}

RunConfig preset_config(const std::string& name) {
  RunConfig cfg;
  cfg.preset_name = name;
  if (name == "desk-default") {
    cfg.data.shape = ClipShape{16, 32, 32, 3, 4, 4, 2};
    cfg.data.train_clips = 2048;
    cfg.data.val_clips = 512;
    cfg.model.enc = EncoderConfig{4, 64, 4, 4.0};
    cfg.model.pred = PredictorConfig{3, 64, 4, 4.0};
    cfg.model.dec = DecoderConfig{3, 64, 4, 4.0, 64};
    cfg.model.ema_decay = 0.996;
    cfg.trainer.schedule = desk_schedule();
    cfg.trainer.batch = 16;
    cfg.probe.heads = 4;
    cfg.probe.epochs = 30;
  } else if (name == "accept-small") {
    cfg.data.shape = ClipShape{16, 16, 16, 3, 4, 4, 2};
    cfg.data.train_clips = 192;
    cfg.data.val_clips = 64;
    cfg.model.enc = EncoderConfig{3, 64, 4, 4.0};
    cfg.model.pred = PredictorConfig{2, 64, 4, 4.0};
    cfg.model.dec = DecoderConfig{2, 64, 4, 4.0, 64};
    cfg.model.ema_decay = 0.996;
    cfg.trainer.schedule = accept_schedule();
    cfg.trainer.batch = 8;
    cfg.probe.heads = 4;
    cfg.probe.epochs = 30;
    cfg.probe.batch = 32;
    cfg.probe.lr = 5e-3;
  } else if (name == "paper-vitl") {
    cfg.data.shape = ClipShape{16, 256, 256, 3, 16, 16, 2};
    cfg.model.enc = EncoderConfig{24, 1024, 16, 4.0};
    cfg.model.pred = PredictorConfig{12, 384, 12, 4.0};
    cfg.model.dec = DecoderConfig{12, 384, 12, 4.0, 384};
    cfg.model.ema_decay = 0.99925;
    cfg.trainer.schedule = paper_schedule();
    cfg.trainer.batch = 3072;
    cfg.probe.heads = 16;
    cfg.probe.epochs = 20;
  } else {
    throw ConfigError("unknown preset: " + name);
  }
  cfg.model.shape = cfg.data.shape;
  cfg.trainer.seed = cfg.seed;
  return cfg;
}

RunConfig load_config(const std::string& preset_name,
                      const std::string& config_path) {
  RunConfig cfg = preset_config(preset_name.empty() ? "desk-default" : preset_name);
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw IoError("cannot open config: " + config_path);
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config parse error: " + std::string(e.what()));
    }
    overlay(j, cfg);
  }
  cfg.model.shape = cfg.data.shape;
  cfg.trainer.seed = cfg.seed;
  cfg.probe.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

std::string config_to_json(const RunConfig& cfg) {
  json stages = json::array();
  for (const auto& s : cfg.trainer.schedule.stages)
    stages.push_back({{"name", s.name},
                      {"steps", s.steps},
                      {"start_lr", s.start_lr},
                      {"final_lr", s.final_lr},
                      {"flow_lr", s.flow_lr},
                      {"k_tau", s.k_tau},
                      {"frames", s.frames}});
  json j = {
      {"preset", cfg.preset_name},
      {"seed", cfg.seed},
      {"threads", cfg.threads},
      {"out", cfg.out},
      {"dtype", cfg.dtype},
      {"target", cfg.target},
      {"ema_decay", cfg.model.ema_decay},
      {"data",
       {{"t_raw", cfg.data.shape.t_raw},
        {"h", cfg.data.shape.h},
        {"w", cfg.data.shape.w},
        {"c", cfg.data.shape.c},
        {"patch_h", cfg.data.shape.patch_h},
        {"patch_w", cfg.data.shape.patch_w},
        {"tubelet", cfg.data.shape.tubelet},
        {"speed", cfg.data.speed},
        {"train_clips", cfg.data.train_clips},
        {"val_clips", cfg.data.val_clips},
        {"corpus_dir", cfg.data.corpus_dir}}},
      {"masking",
       {{"scale_lo", cfg.trainer.mask_base.scale_lo},
        {"scale_hi", cfg.trainer.mask_base.scale_hi},
        {"aspect_lo", cfg.trainer.mask_base.aspect_lo},
        {"aspect_hi", cfg.trainer.mask_base.aspect_hi},
        {"enabled", cfg.trainer.masking}}},
      {"encoder",
       {{"depth", cfg.model.enc.depth},
        {"width", cfg.model.enc.width},
        {"heads", cfg.model.enc.heads},
        {"mlp_ratio", cfg.model.enc.mlp_ratio},
        {"rope_base", cfg.model.enc.rope_base}}},
      {"predictor",
       {{"depth", cfg.model.pred.depth},
        {"width", cfg.model.pred.width},
        {"heads", cfg.model.pred.heads},
        {"mlp_ratio", cfg.model.pred.mlp_ratio},
        {"rope_base", cfg.model.pred.rope_base}}},
      {"decoder",
       {{"depth", cfg.model.dec.depth},
        {"width", cfg.model.dec.width},
        {"heads", cfg.model.dec.heads},
        {"mlp_ratio", cfg.model.dec.mlp_ratio},
        {"temb_dim", cfg.model.dec.temb_dim},
        {"rope_base", cfg.model.dec.rope_base}}},
      {"trainer",
       {{"batch", cfg.trainer.batch},
        {"grad_clip", cfg.trainer.grad_clip},
        {"beta1", cfg.trainer.beta1},
        {"beta2", cfg.trainer.beta2},
        {"weight_decay", cfg.trainer.weight_decay},
        {"image_prob", cfg.trainer.image_prob},
        {"flow_weight", cfg.trainer.weights.flow},
        {"align_weight", cfg.trainer.weights.align},
        {"discrete_tau", cfg.trainer.discrete_tau},
        {"checkpoint_every", cfg.trainer.checkpoint_every},
        {"stages", stages}}},
      {"probe",
       {{"heads", cfg.probe.heads},
        {"epochs", cfg.probe.epochs},
        {"batch", cfg.probe.batch},
        {"lr", cfg.probe.lr},
        {"last_k_layers", cfg.probe.last_k_layers}}},
      {"generate",
       {{"euler_steps", cfg.generate.euler_steps},
        {"clips", cfg.generate.clips}}},
  };
  return j.dump(2);
}

}  // namespace nxtv
