#pragma once

#include "nxtv/probe.hpp"
#include "nxtv/trainer.hpp"

#include <string>

namespace nxtv {

struct DataConfig {
  ClipShape shape;
  double speed = 0.0;  // rectangle velocity in px/frame; 0 = default
  int train_clips = 2048;
  int val_clips = 512;
  std::string corpus_dir;
};

struct GenerateConfig {
  int euler_steps = 8;
  int clips = 4;
};

// One structured document wiring every module's config; presets give the
// named baselines and a config file overlays individual keys.
struct RunConfig {
  std::string preset_name = "desk-default";
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency
  std::string out;  // output root; NXTV_OUT env var wins over this
  std::string dtype = "f32";
  std::string target = "pixel";  // pixel | latent
  DataConfig data;
  ModelConfig model;
  TrainConfig trainer;
  ProbeConfig probe;
  GenerateConfig generate;

  void validate() const;
};

// Named presets: "desk-default", "accept-small", "paper-vitl".
RunConfig preset_config(const std::string& name);

// Preset base + optional JSON overlay; unknown keys are rejected.
RunConfig load_config(const std::string& preset_name,
                      const std::string& config_path);

// Resolved-config dump archived next to run outputs.
std::string config_to_json(const RunConfig& cfg);

}  // namespace nxtv
