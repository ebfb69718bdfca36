#include "nxtv/config.hpp"

#include "doctest.h"

#include <filesystem>
#include <fstream>

using namespace nxtv;

namespace {

std::string write_temp(const std::string& name, const std::string& text) {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "nxtv_test_config";
  fs::create_directories(dir);
  const auto path = (dir / name).string();
  std::ofstream os(path);
  os << text;
  return path;
}

}  // namespace

TEST_CASE("presets resolve and validate") {
  const auto desk = preset_config("desk-default");
  CHECK(desk.data.train_clips == 2048);
  CHECK(desk.data.val_clips == 512);
  CHECK(desk.model.enc.depth == 4);
  CHECK(desk.model.enc.width == 64);
  CHECK(desk.trainer.schedule.stages.size() == 4);
  CHECK(desk.trainer.batch == 16);
  CHECK(desk.trainer.schedule.stages[3].frames == 32);
  CHECK(desk.model.ema_decay == 0.996);
  desk.validate();

  const auto paper = preset_config("paper-vitl");
  CHECK(paper.model.enc.depth == 24);
  CHECK(paper.model.enc.width == 1024);
  CHECK(paper.model.enc.heads == 16);
  CHECK(paper.model.pred.depth == 12);
  CHECK(paper.model.pred.width == 384);
  CHECK(paper.model.dec.width == 384);
  CHECK(paper.model.ema_decay == 0.99925);
  CHECK(paper.trainer.batch == 3072);
  CHECK(paper.trainer.schedule.stages[0].steps == 12000);
  CHECK(paper.data.shape.patch_h == 16);
  CHECK(paper.data.shape.tubelet == 2);
  paper.validate();

  CHECK_THROWS_AS(preset_config("nope"), ConfigError);
}

TEST_CASE("config overlay merges into the preset") {
  const auto path = write_temp("overlay.json", R"({
    "seed": 9,
    "data": {"h": 16, "w": 16, "train_clips": 32},
    "encoder": {"depth": 2},
    "trainer": {
      "batch": 4,
      "stages": [
        {"name": "only", "steps": 10, "start_lr": 1e-3, "final_lr": 1e-3,
         "k_tau": 2, "frames": 8}
      ]
    }
  })");
  const auto cfg = load_config("desk-default", path);
  CHECK(cfg.seed == 9);
  CHECK(cfg.data.shape.h == 16);
  CHECK(cfg.data.shape.t_raw == 16);  // untouched keys keep preset values
  CHECK(cfg.data.train_clips == 32);
  CHECK(cfg.model.enc.depth == 2);
  CHECK(cfg.model.enc.width == 64);
  CHECK(cfg.trainer.batch == 4);
  REQUIRE(cfg.trainer.schedule.stages.size() == 1);
  CHECK(cfg.trainer.schedule.stages[0].k_tau == 2);
  CHECK(cfg.model.shape.h == 16);  // model shape mirrors data shape
  CHECK(cfg.trainer.seed == 9);
}

TEST_CASE("unknown keys are rejected") {
  const auto path = write_temp("unknown.json", R"({"data": {"hh": 3}})");
  CHECK_THROWS_WITH_AS(load_config("desk-default", path),
                       "config: unknown key data.hh", ConfigError);

  const auto top = write_temp("top.json", R"({"sede": 3})");
  CHECK_THROWS_AS(load_config("desk-default", top), ConfigError);
}

TEST_CASE("bad values are rejected with their path") {
  const auto path = write_temp("bad.json", R"({"encoder": {"depth": "deep"}})");
  CHECK_THROWS_WITH_AS(load_config("desk-default", path),
                       "config: bad value for encoder.depth", ConfigError);
}

TEST_CASE("resolved config dump re-parses to the same config") {
  auto cfg = preset_config("accept-small");
  cfg.seed = 17;
  const std::string json = config_to_json(cfg);
  const auto path = write_temp("resolved.json", json);
  const auto back = load_config("desk-default", path);
  CHECK(back.seed == 17);
  CHECK(back.data.shape.h == cfg.data.shape.h);
  CHECK(back.model.enc.depth == cfg.model.enc.depth);
  CHECK(back.trainer.schedule.stages.size() ==
        cfg.trainer.schedule.stages.size());
  CHECK(back.trainer.schedule.stages[2].flow_lr ==
        cfg.trainer.schedule.stages[2].flow_lr);
  CHECK(back.probe.epochs == cfg.probe.epochs);
}

TEST_CASE("dtype and target are validated") {
  auto cfg = preset_config("accept-small");
  cfg.dtype = "f16";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.dtype = "f64";
  cfg.target = "vae";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.target = "latent";
  cfg.validate();
}
