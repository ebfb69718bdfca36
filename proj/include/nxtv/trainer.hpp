#pragma once

#include "nxtv/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace nxtv {

struct LossWeights {
  double flow = 0.5;
  double align = 1.0;

  void validate() const {
    if (flow < 0 || align < 0) throw ConfigError("loss weights must be >= 0");
    if (flow == 0 && align == 0)
      throw ConfigError("loss weights cannot both be zero");
  }
};

// L = w_flow * L_flow + w_align * L_align (beta = w_align / w_flow).
inline double total_loss(double flow, double align, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(flow) || !std::isfinite(align))
    throw TrainAbort("total_loss: non-finite input (flow=" +
                     std::to_string(flow) + ", align=" + std::to_string(align) +
                     ")");
  return w.flow * flow + w.align * align;
}

struct StageSpec {
  std::string name;
  int steps = 0;
  double start_lr = 0;
  double final_lr = 0;
  double flow_lr = 0;  // 0 = flow decoder follows the main lr
  int k_tau = 1;
  int frames = 16;  // raw frames per clip in this stage

  void validate() const {
    if (steps <= 0) throw ConfigError("stage " + name + ": steps must be > 0");
    if (start_lr <= 0 || final_lr <= 0)
      throw ConfigError("stage " + name + ": lr must be > 0");
    if (k_tau < 1) throw ConfigError("stage " + name + ": k_tau must be >= 1");
    if (frames <= 0) throw ConfigError("stage " + name + ": frames must be > 0");
  }
};

// Piecewise-linear lr over the stage list.
struct Schedule {
  std::vector<StageSpec> stages;

  void validate() const {
    if (stages.empty()) throw ConfigError("schedule: no stages");
    for (const auto& s : stages) s.validate();
  }
  int total_steps() const {
    int n = 0;
    for (const auto& s : stages) n += s.steps;
    return n;
  }
  // Stage index and position of a global step.
  std::pair<int, int> locate(int step) const {
    int base = 0;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (step < base + stages[i].steps)
        return {static_cast<int>(i), step - base};
      base += stages[i].steps;
    }
    throw ConfigError("schedule: step beyond total");
  }
  double lr_at(int step) const {
    const auto [si, pos] = locate(step);
    const StageSpec& s = stages[static_cast<std::size_t>(si)];
    const double f = static_cast<double>(pos) / s.steps;
    return s.start_lr + (s.final_lr - s.start_lr) * f;
  }
  double flow_lr_at(int step) const {
    const auto [si, pos] = locate(step);
    const StageSpec& s = stages[static_cast<std::size_t>(si)];
    return s.flow_lr > 0 ? s.flow_lr : lr_at(step);
  }
};

// The paper-scale four-stage preset.
inline Schedule paper_schedule() {
  Schedule s;
  s.stages = {
      {"warmup", 12000, 1e-4, 5e-4, 0.0, 4, 16},
      {"stable1", 28000, 5e-4, 4.5e-4, 0.0, 4, 16},
      {"stable2", 80000, 4.5e-4, 1e-4, 8e-4, 1, 16},
      {"cooldown", 12000, 1e-4, 1e-6, 3e-4, 1, 64},
  };
  return s;
}

// AdamW with decoupled weight decay on weight matrices only; biases, norm
// params and the query token are excluded via the per-param decay flag.
template <typename S>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.04;
  int t = 0;
  std::vector<Mat<S>> m, v;

  void init(const ParamStore<S>& ps) {
    m.clear();
    v.clear();
    for (const auto& p : ps.params) {
      m.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
      v.push_back(Mat<S>::Zero(p.value.rows(), p.value.cols()));
    }
    t = 0;
  }

  // Applies one update from the grads currently in the store. lr_for maps a
  // param name to its learning rate (the flow decoder may run on its own).
  template <typename LrFn>
  void step(ParamStore<S>& ps, const LrFn& lr_for) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < ps.params.size(); ++i) {
      auto& p = ps.params[i];
      const double lr = lr_for(p.name);
      m[i] = m[i] * static_cast<S>(beta1) + p.grad * static_cast<S>(1 - beta1);
      v[i] = v[i] * static_cast<S>(beta2) +
             p.grad.cwiseProduct(p.grad) * static_cast<S>(1 - beta2);
      const Mat<S> mhat = m[i] / static_cast<S>(bc1);
      const Mat<S> vhat = v[i] / static_cast<S>(bc2);
      Mat<S> update =
          (mhat.array() / (vhat.array().sqrt() + static_cast<S>(eps)))
              .matrix() *
          static_cast<S>(lr);
      if (p.decay && weight_decay > 0)
        update += p.value * static_cast<S>(lr * weight_decay);
      p.value -= update;
    }
  }
};

// Scales grads in place to cap the global norm; returns the raw norm.
template <typename S>
double clip_gradients(ParamStore<S>& ps, double max_norm) {
  const double norm = std::sqrt(ps.grad_norm_sq());
  if (!std::isfinite(norm)) throw TrainAbort("non-finite gradients");
  if (max_norm > 0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (auto& p : ps.params) p.grad *= scale;
  }
  return norm;
}

struct TrainConfig {
  Schedule schedule;
  LossWeights weights;
  int batch = 16;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.04;
  double image_prob = 0.25;  // static-image mixing rate
  bool masking = true;
  bool discrete_tau = false;
  MaskConfig mask_base;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // extra mid-stage checkpoints; 0 = stage ends only

  void validate() const {
    schedule.validate();
    weights.validate();
    if (batch <= 0) throw ConfigError("train: batch must be > 0");
    mask_base.validate();
  }
};

struct LossReport {
  int step = 0;
  std::string stage;
  double l_flow = 0, l_align = 0, l_total = 0;
  double lr = 0, lr_flow = 0;
  double grad_norm = 0;
};

inline std::string loss_report_csv_header() {
  return "step,L_flow,L_align,L_total,lr,lr_flow,grad_norm,stage";
}

inline std::string loss_report_csv_row(const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%s",
                r.step, r.l_flow, r.l_align, r.l_total, r.lr, r.lr_flow,
                r.grad_norm, r.stage.c_str());
  return buf;
}

template <typename S>
class Trainer {
 public:
  Trainer(Model<S>& model, TrainConfig cfg, CorpusManifest manifest)
      : model_(model), cfg_(std::move(cfg)), manifest_(std::move(manifest)) {
    cfg_.validate();
    train_records_ = manifest_.split("train");
    if (train_records_.empty()) throw ConfigError("trainer: empty train split");
    opt_.beta1 = cfg_.beta1;
    opt_.beta2 = cfg_.beta2;
    opt_.weight_decay = cfg_.weight_decay;
    opt_.init(model_.params);
  }

  int step() const { return global_step_; }
  const TrainConfig& config() const { return cfg_; }
  AdamW<S>& optimizer() { return opt_; }

  // Data sampling is a pure function of (seed, step, slot): resuming from a
  // checkpoint reproduces the uninterrupted stream bitwise.
  VideoClip sample_clip(int step, int slot, int t_raw) const {
    Rng rng(substream(cfg_.seed, {0x64617461ull, static_cast<std::uint64_t>(step),
                                  static_cast<std::uint64_t>(slot)}));
    const auto& rec = train_records_[static_cast<std::size_t>(rng.uniform_int(
        0, static_cast<std::int64_t>(train_records_.size()) - 1))];
    ClipShape shape = manifest_.shape;
    shape.t_raw = t_raw;
    VideoClip clip = generate_synthetic_clip(
        rec.seed, static_cast<MotionClass>(rec.class_id), shape,
        manifest_.speed);
    if (rng.uniform() < cfg_.image_prob) {
      const Index fsz = clip.frame_size();
      const Eigen::ArrayXf frame =
          clip.frames.segment((clip.t_raw / 2) * fsz, fsz);
      clip = image_to_clip(frame, t_raw, shape);
    }
    clip.clip_id = rec.clip_id;
    return clip;
  }

  LossReport train_step() {
    const auto [stage_idx, pos] = cfg_.schedule.locate(global_step_);
    const StageSpec& stage =
        cfg_.schedule.stages[static_cast<std::size_t>(stage_idx)];
    const double lr = cfg_.schedule.lr_at(global_step_);
    const double lr_flow = cfg_.schedule.flow_lr_at(global_step_);
    (void)pos;

    ClipShape stage_shape = model_.cfg.shape;
    stage_shape.t_raw = stage.frames;
    stage_shape.validate_for_training();

    const auto mask_cfgs = two_strategy_configs(cfg_.mask_base);
    const int views = cfg_.masking ? static_cast<int>(mask_cfgs.size()) : 1;
    const double inv_count = 1.0 / (cfg_.batch * views);

    model_.params.zero_grads();
    double sum_flow = 0, sum_align = 0;
    Tape<S> tape;
    for (int i = 0; i < cfg_.batch; ++i) {
      const VideoClip clip = sample_clip(global_step_, i, stage.frames);
      const TokenSequence full = patchify(clip, stage_shape);
      const Mat<S> ref_rows = reference_targets(model_, full);
      const MatF targets_full =
          extract_targets(clip, stage_shape, model_.extractor);
      const Mat<S> target_rows =
          targets_for_prediction(targets_full, full.time_steps,
                                 stage_shape.spatial_positions())
              .template cast<S>();

      for (int v = 0; v < views; ++v) {
        TokenSequence visible = full;
        if (cfg_.masking) {
          const auto mask = sample_spatial_mask(
              mask_cfgs[static_cast<std::size_t>(v)], full.grid_rows,
              full.grid_cols,
              substream(cfg_.seed,
                        {0x6d61736bull, static_cast<std::uint64_t>(global_step_),
                         static_cast<std::uint64_t>(i),
                         static_cast<std::uint64_t>(v)}));
          visible = apply_mask(full, mask);
        }
        Rng flow_rng(substream(cfg_.seed,
                               {0x666c6f77ull,
                                static_cast<std::uint64_t>(global_step_),
                                static_cast<std::uint64_t>(i),
                                static_cast<std::uint64_t>(v)}));
        tape.clear();
        Bind<S> bind(tape, model_.params);
        auto view = build_view_loss(bind, model_, visible, target_rows,
                                    ref_rows, stage.k_tau, flow_rng,
                                    cfg_.weights.flow, cfg_.weights.align,
                                    cfg_.discrete_tau);
        const double lf = static_cast<double>(view.flow.value()(0, 0));
        const double la = static_cast<double>(view.align.value()(0, 0));
        if (!std::isfinite(lf) || !std::isfinite(la))
          throw TrainAbort("non-finite loss at step " +
                           std::to_string(global_step_));
        sum_flow += lf;
        sum_align += la;
        tape.backward(view.total, static_cast<S>(inv_count));
        bind.accumulate_grads();
      }
    }

    LossReport rep;
    rep.step = global_step_;
    rep.stage = stage.name;
    rep.l_flow = sum_flow / (cfg_.batch * views);
    rep.l_align = sum_align / (cfg_.batch * views);
    rep.l_total = total_loss(rep.l_flow, rep.l_align, cfg_.weights);
    rep.lr = lr;
    rep.lr_flow = lr_flow;
    rep.grad_norm = clip_gradients(model_.params, cfg_.grad_clip);
    opt_.step(model_.params, [&](const std::string& name) {
      return name.rfind("dec.", 0) == 0 ? lr_flow : lr;
    });
    ema_update(model_.ref, model_.params, model_.cfg.ema_decay);
    ++global_step_;
    return rep;
  }

  void save_checkpoint(const std::string& path, int stage_idx) const {
    Archive ar;
    save_model(model_, ar);
    for (std::size_t i = 0; i < model_.params.params.size(); ++i) {
      ar.add("adam.m." + model_.params.params[i].name, opt_.m[i]);
      ar.add("adam.v." + model_.params.params[i].name, opt_.v[i]);
    }
    char manifest[256];
    std::snprintf(manifest, sizeof(manifest),
                  "{\"step\":%d,\"stage\":%d,\"adam_t\":%d,\"seed\":%llu}",
                  global_step_, stage_idx, opt_.t,
                  static_cast<unsigned long long>(cfg_.seed));
    ar.manifest = manifest;
    ar.save(path);
  }

  void load_checkpoint(const std::string& path) {
    Archive ar = Archive::load(path);
    load_model(model_, ar);
    for (std::size_t i = 0; i < model_.params.params.size(); ++i) {
      opt_.m[i] = ar.get<S>("adam.m." + model_.params.params[i].name);
      opt_.v[i] = ar.get<S>("adam.v." + model_.params.params[i].name);
    }
    global_step_ = json_int(ar.manifest, "step");
    opt_.t = json_int(ar.manifest, "adam_t");
  }

  // Runs from the current step to the end of the schedule, appending metrics
  // and dropping a checkpoint at each stage boundary.
  std::vector<LossReport> run(const std::string& out_dir,
                              bool quiet = true) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string metrics_path = out_dir + "/metrics.csv";
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw IoError("cannot open " + metrics_path);
    if (global_step_ == 0) metrics << loss_report_csv_header() << "\n";

    std::vector<LossReport> reports;
    const int total = cfg_.schedule.total_steps();
    while (global_step_ < total) {
      const int before = global_step_;
      LossReport rep = train_step();
      metrics << loss_report_csv_row(rep) << "\n";
      metrics.flush();
      if (!quiet && before % 25 == 0)
        std::fprintf(stderr, "[%s %d] flow=%.4f align=%.4f total=%.4f\n",
                     rep.stage.c_str(), rep.step, rep.l_flow, rep.l_align,
                     rep.l_total);
      const auto [stage_idx, pos] = cfg_.schedule.locate(before);
      const StageSpec& st =
          cfg_.schedule.stages[static_cast<std::size_t>(stage_idx)];
      if (pos + 1 == st.steps)
        save_checkpoint(out_dir + "/ckpt_" + st.name + ".nxta", stage_idx);
      else if (cfg_.checkpoint_every > 0 &&
               (before + 1) % cfg_.checkpoint_every == 0)
        save_checkpoint(out_dir + "/ckpt_step" + std::to_string(before + 1) +
                            ".nxta",
                        stage_idx);
      reports.push_back(std::move(rep));
    }
    save_checkpoint(out_dir + "/ckpt_final.nxta",
                    static_cast<int>(cfg_.schedule.stages.size()) - 1);
    return reports;
  }

  static int json_int(const std::string& json, const std::string& key) {
    const auto pos = json.find("\"" + key + "\":");
    if (pos == std::string::npos)
      throw IoError("checkpoint manifest missing key " + key);
    return std::atoi(json.c_str() + pos + key.size() + 3);
  }

 private:
  Model<S>& model_;
  TrainConfig cfg_;
  CorpusManifest manifest_;
  std::vector<ClipRecord> train_records_;
  AdamW<S> opt_;
  int global_step_ = 0;
};

}  // namespace nxtv
