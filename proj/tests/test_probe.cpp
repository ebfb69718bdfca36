#include "nxtv/probe.hpp"

#include "doctest.h"

#include <vector>

using namespace nxtv;

namespace {

// Synthetic features made linearly separable by class: every token row of a
// class-c clip points along basis direction c (plus small noise).
LabeledFeatures separable_corpus(int per_class, int width, std::uint64_t seed,
                                 double noise = 0.05) {
  LabeledFeatures data;
  Rng rng(substream(seed, {0x7365706172ull}));
  for (int c = 0; c < kNumMotionClasses; ++c) {
    for (int i = 0; i < per_class; ++i) {
      MatF f = (rng.normal_mat<float>(6, width) * static_cast<float>(noise));
      f.col(c).array() += 2.0f;
      data.feats_f32.push_back(std::move(f));
      data.labels.push_back(c);
    }
  }
  return data;
}

ProbeConfig quick_probe() {
  ProbeConfig cfg;
  cfg.heads = 4;
  cfg.epochs = 20;
  cfg.batch = 16;
  cfg.lr = 5e-3;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("probe reaches 100% train accuracy on a separable corpus") {
  auto data = separable_corpus(6, 16, 1);
  auto head = probe_train<double>(data, quick_probe());
  CHECK(probe_eval(head, data) == 1.0);
}

TEST_CASE("probe training never touches encoder parameters") {
  ModelConfig mc;
  mc.shape = ClipShape{4, 8, 8, 1, 4, 4, 2};
  mc.enc = EncoderConfig{1, 16, 2, 2.0};
  mc.pred = PredictorConfig{1, 16, 2, 2.0};
  mc.dec = DecoderConfig{1, 16, 2, 2.0, 8};
  auto model = make_model<double>(mc, 21);
  model.params.zero_grads();
  const MatD enc_before = model.params.value("enc.in.w");

  std::vector<ClipRecord> records;
  for (int i = 0; i < 16; ++i)
    records.push_back({"r" + std::to_string(i), static_cast<std::uint64_t>(i),
                       i % 8, "train"});
  auto data = extract_probe_features(model, records, mc.shape, 1);
  auto head = probe_train<double>(data, quick_probe());

  CHECK((model.params.value("enc.in.w") - enc_before).cwiseAbs().maxCoeff() ==
        0.0);
  for (const auto& p : model.params.params)
    CHECK(p.grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("constant-prediction head scores the majority-class frequency") {
  auto data = separable_corpus(4, 8, 2);
  // 3 extra clips of class 0 make it the majority.
  for (int i = 0; i < 3; ++i) {
    data.feats_f32.push_back(MatF::Zero(6, 8));
    data.labels.push_back(0);
  }
  auto head = make_probe_head<double>(8, 2, kNumMotionClasses, 0);
  head.params.value("probe.cls.w").setZero();
  head.params.value("probe.cls.b").setZero();
  head.params.value("probe.cls.b")(0, 0) = 1.0;  // always predicts class 0
  const double freq0 = 7.0 / static_cast<double>(data.labels.size());
  CHECK(probe_eval(head, data) == doctest::Approx(freq0).epsilon(1e-12));
}

TEST_CASE("perfect head on a 2-class toy reaches accuracy 1") {
  LabeledFeatures data;
  Rng rng(substream(5, {5}));
  for (int i = 0; i < 20; ++i) {
    MatF f = rng.normal_mat<float>(4, 8) * 0.01f;
    const int label = i % 2;
    f.col(label).array() += 3.0f;
    data.feats_f32.push_back(std::move(f));
    data.labels.push_back(label);
  }
  auto head = probe_train<double>(data, quick_probe());
  CHECK(probe_eval(head, data) == 1.0);
}

TEST_CASE("repeated evaluation is deterministic") {
  auto data = separable_corpus(3, 8, 6);
  auto head = make_probe_head<double>(8, 2, kNumMotionClasses, 1);
  const double a = probe_eval(head, data);
  const double b = probe_eval(head, data);
  CHECK(a == b);
}

TEST_CASE("probe accuracy is invariant to bijective class relabeling") {
  auto data = separable_corpus(5, 16, 7, /*noise=*/0.6);
  auto head = probe_train<double>(data, quick_probe());
  const double base = probe_eval(head, data);

  // Relabel train+val consistently with a cyclic shift.
  LabeledFeatures relabeled = data;
  for (auto& l : relabeled.labels) l = (l + 3) % kNumMotionClasses;
  auto head2 = probe_train<double>(relabeled, quick_probe());
  const double shifted = probe_eval(head2, relabeled);
  CHECK(base == doctest::Approx(shifted).epsilon(1e-12));
}

TEST_CASE("attentive pooling is invariant to token order") {
  auto head = make_probe_head<double>(8, 2, kNumMotionClasses, 2);
  Rng rng(substream(8, {8}));
  head.params.value("probe.cls.w") = rng.normal_mat<double>(8, 8) * 0.3;
  const MatD feats = rng.normal_mat<double>(5, 8);
  MatD shuffled(5, 8);
  const int perm[5] = {3, 0, 4, 2, 1};
  for (int i = 0; i < 5; ++i) shuffled.row(i) = feats.row(perm[i]);

  Tape<double> tape;
  Bind<double> bind(tape, head.params, false);
  const MatD a = probe_logits(bind, feats, head.heads).value();
  const MatD b = probe_logits(bind, shuffled, head.heads).value();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("out-of-range labels are rejected") {
  LabeledFeatures data;
  data.feats_f32.push_back(MatF::Zero(2, 8));
  data.labels.push_back(99);
  CHECK_THROWS_AS(probe_train<double>(data, quick_probe()), ConfigError);
}

TEST_CASE("probe head round-trips through its archive") {
  namespace fs = std::filesystem;
  auto head = make_probe_head<double>(8, 2, kNumMotionClasses, 3);
  const auto dir = fs::temp_directory_path() / "nxtv_test_probe";
  fs::create_directories(dir);
  const auto path = (dir / "probe.nxta").string();
  save_probe(head, path);
  const auto ar = Archive::load(path);
  CHECK(ar.has("probe_head.probe.query"));
  CHECK(ar.manifest.find("\"classes\":8") != std::string::npos);
  fs::remove_all(dir);
}
