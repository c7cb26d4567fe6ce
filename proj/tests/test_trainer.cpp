#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ccmd/adam.hpp"
#include "ccmd/checkpoint.hpp"
#include "ccmd/trainer.hpp"

namespace {

using namespace ccmd;
using namespace ccmd::train;
namespace fs = std::filesystem;

TEST(Adam, MinimisesQuadratic) {
  // f(x) = sum_i a_i (x_i - c_i)^2
  const std::vector<double> a{1.0, 10.0, 0.1}, c{3.0, -2.0, 0.5};
  ParamStore s;
  s.add("x", {3}, {0.0, 0.0, 0.0});
  Adam opt(AdamConfig{.lr = 0.05});
  int steps = 0;
  auto err = [&] {
    double e = 0;
    for (int i = 0; i < 3; ++i) e = std::max(e, std::abs(s.at("x").values[i] - c[i]));
    return e;
  };
  while (err() >= 1e-6 && steps < 5000) {
    GradMap g{{"x", std::vector<double>(3)}};
    for (int i = 0; i < 3; ++i) g["x"][i] = 2 * a[i] * (s.at("x").values[i] - c[i]);
    opt.step(s, g);
    ++steps;
  }
  EXPECT_LT(err(), 1e-6) << "after " << steps << " steps";
  EXPECT_EQ(opt.steps(), static_cast<std::size_t>(steps));
}

TEST(Adam, FirstStepHasLearningRateMagnitude) {
  ParamStore s;
  s.add("x", {2}, {1.0, 1.0});
  Adam opt(AdamConfig{.lr = 0.01});
  opt.step(s, {{"x", {5.0, -0.001}}});
  EXPECT_NEAR(s.at("x").values[0], 0.99, 1e-9);
  EXPECT_NEAR(s.at("x").values[1], 1.01, 1e-6);
}

TEST(Adam, ClipsGlobalNorm) {
  ParamStore s;
  s.add("a", {1}, {0.0});
  s.add("b", {1}, {0.0});
  AdamConfig cfg{.lr = 0.1, .clip_norm = 1.0};
  Adam opt(cfg);
  // Clipped to (0.6, 0.8); the first Adam step is lr * g / (|g| + eps).
  opt.step(s, {{"a", {30.0}}, {"b", {40.0}}});
  EXPECT_NEAR(s.at("a").values[0], -0.1 * 0.6 / (0.6 + 1e-8), 1e-15);
  opt.step(s, {{"a", {1.0}}});
  EXPECT_THROW(opt.step(s, {{"a", {1.0, 2.0}}}), std::invalid_argument);
  EXPECT_THROW(Adam(AdamConfig{.lr = 0.0}), std::invalid_argument);
  EXPECT_THROW(Adam(AdamConfig{.beta1 = 1.0}), std::invalid_argument);
}

ModelConfig tiny(Arch arch = Arch::Transformer, enc::View view = enc::View::TwoD) {
  ModelConfig m;
  m.arch = arch;
  m.view = view;
  m.width = 16;
  m.layers = 2;
  m.heads = 2;
  m.ffn = 32;
  m.encoder.bond_width = 8;
  m.encoder.rbf.centers = 8;
  return m;
}

TrainConfig tiny_train(int epochs = 2) {
  TrainConfig c;
  c.model = tiny();
  c.epochs = epochs;
  c.batch_size = 8;
  c.adam.lr = 3e-3;
  c.seed = 11;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ccmd_trainer_" + name);
  fs::remove_all(p);
  return p;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Checkpoint c{tiny(Arch::Gin, enc::View::ThreeD), init_model(tiny(Arch::Gin, enc::View::ThreeD), 4), 1.25, 0.3, 4};
  c.params.at("gin.l0.w1").values[0] = 0.1 + 0.2;  // not exactly representable in short decimal
  c.params.at("gin.l0.w1").values[1] = -1e-300;
  auto dir = scratch("ckpt");
  fs::create_directories(dir);
  save_checkpoint(c, dir / "a.ckpt");
  auto back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.params.fingerprint(), c.params.fingerprint());
  EXPECT_EQ(load_checkpoint(dir / "a.ckpt", c.model), c);
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt", tiny()), std::runtime_error);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsTamperedFiles) {
  Checkpoint c{tiny(), init_model(tiny(), 1), 0, 1, 1};
  auto j = to_json(c);
  auto bad = j;
  bad["ccmd_ckpt_version"] = 99;
  EXPECT_THROW(checkpoint_from_json(bad), std::runtime_error);
  bad = j;
  bad.erase("ccmd_ckpt_version");
  EXPECT_THROW(checkpoint_from_json(bad), std::runtime_error);
  bad = j;
  bad["params"].erase("head.w2");
  EXPECT_THROW(checkpoint_from_json(bad), std::runtime_error);
  bad = j;
  bad["params"]["head.w2"]["shape"] = {3, 3};
  EXPECT_THROW(checkpoint_from_json(bad), std::runtime_error);
  EXPECT_EQ(checkpoint_from_json(j), c);
}

TEST(TrainConfig, JsonRoundTripAndUnknownKeys) {
  auto c = tiny_train();
  c.distill.mode = distill::Mode::LocalOnly;
  c.teacher_path = "t.ckpt";
  auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"learning_rate", 0.1}}), std::invalid_argument);
  auto merged = train_config_from_json(nlohmann::json{{"epochs", 7}, {"model", {{"width", 24}}}}, c);
  EXPECT_EQ(merged.epochs, 7);
  EXPECT_EQ(merged.model.width, 24);
  EXPECT_EQ(merged.model.layers, c.model.layers);
  EXPECT_EQ(merged.distill.mode, distill::Mode::LocalOnly);
}

struct Data {
  mol::Dataset train, val;
};

Data tiny_data(int train_n, int val_n, std::uint64_t seed = 5) {
  auto all = mol::gen_synthetic(train_n + val_n, 3, 9, seed);
  Data d{all, all};
  d.train.molecules.assign(all.molecules.begin(), all.molecules.begin() + train_n);
  d.val.molecules.assign(all.molecules.begin() + train_n, all.molecules.end());
  return d;
}

TEST(Trainer, SmokeWritesRunDirectory) {
  auto d = tiny_data(10, 5);
  auto cfg = tiny_train(1);
  cfg.run_dir = scratch("smoke");
  int calls = 0;
  auto r = train_supervised(cfg, d.train, d.val, [&](const EpochRecord& e) {
    ++calls;
    EXPECT_EQ(e.epoch, 1);
    EXPECT_TRUE(std::isfinite(e.train_mae));
  });
  EXPECT_EQ(calls, 1);
  ASSERT_EQ(r.record.epochs.size(), 1u);
  EXPECT_EQ(r.record.best_epoch, 1);
  for (const char* f : {"config.json", "record.csv", "best.ckpt", "last.ckpt"})
    EXPECT_TRUE(fs::exists(cfg.run_dir / f)) << f;
  EXPECT_EQ(load_checkpoint(cfg.run_dir / "best.ckpt"), r.best);
  std::ifstream rec(cfg.run_dir / "record.csv");
  std::string header;
  std::getline(rec, header);
  EXPECT_EQ(header, "epoch,train_mae,val_mae,l_2d,l_m,l_a_mean,weight_mean,seconds");
  fs::remove_all(cfg.run_dir);
}

TEST(Trainer, RecordHasOneRowPerEpochAndBestIsMinimum) {
  auto d = tiny_data(16, 8);
  auto r = train_supervised(tiny_train(4), d.train, d.val);
  ASSERT_EQ(r.record.epochs.size(), 4u);
  double best = 1e300;
  for (const auto& e : r.record.epochs) best = std::min(best, e.val_mae);
  EXPECT_EQ(r.record.best_val_mae, best);
  EXPECT_EQ(r.record.epochs[r.record.best_epoch - 1].val_mae, best);
  EXPECT_DOUBLE_EQ(evaluate(r.best, d.val.molecules, enc::View::TwoD), best);
}

TEST(Trainer, Deterministic) {
  auto d = tiny_data(12, 4);
  auto a = train_supervised(tiny_train(2), d.train, d.val);
  auto b = train_supervised(tiny_train(2), d.train, d.val);
  EXPECT_EQ(a.last.params.fingerprint(), b.last.params.fingerprint());
  auto cfg = tiny_train(2);
  cfg.seed = 12;
  auto c = train_supervised(cfg, d.train, d.val);
  EXPECT_NE(a.last.params.fingerprint(), c.last.params.fingerprint());
}

TEST(Trainer, OverfitsSmallSet) {
  auto d = tiny_data(20, 4, 9);
  auto cfg = tiny_train(200);
  cfg.batch_size = 20;
  auto r = train_supervised(cfg, d.train, d.train);
  EXPECT_LT(r.record.epochs.back().val_mae, 0.05);
}

TEST(Trainer, DistillModeNoneMatchesPlainTraining) {
  auto d = tiny_data(12, 4);
  auto tcfg = tiny_train(1);
  auto teacher = train_teacher(tcfg, d.train, d.val).best;
  EXPECT_EQ(teacher.model.view, enc::View::ThreeD);
  auto cfg = tiny_train(2);
  cfg.distill.mode = distill::Mode::None;
  auto plain = train_supervised(cfg, d.train, d.val);
  auto distilled = distill_student(cfg, teacher, d.train, d.val);
  EXPECT_EQ(plain.last.params, distilled.last.params);
  EXPECT_EQ(plain.record.best_val_mae, distilled.record.best_val_mae);
}

TEST(Trainer, DistillationLeavesTeacherUntouchedAndChangesStudent) {
  auto d = tiny_data(12, 4);
  auto teacher = train_teacher(tiny_train(1), d.train, d.val).best;
  const auto before = teacher.params.fingerprint();
  auto cfg = tiny_train(2);
  cfg.distill.mode = distill::Mode::GlobalLocal;
  auto r = distill_student(cfg, teacher, d.train, d.val);
  EXPECT_EQ(teacher.params.fingerprint(), before);
  EXPECT_EQ(r.best.model.view, enc::View::TwoD);
  for (const auto& e : r.record.epochs) {
    EXPECT_GT(e.loss.l_m, 0.0);
    EXPECT_GT(e.loss.l_a_mean, 0.0);
    EXPECT_GT(e.loss.weight_mean, 0.0);
  }
  cfg.distill.mode = distill::Mode::None;
  auto plain = distill_student(cfg, teacher, d.train, d.val);
  EXPECT_NE(plain.last.params, r.last.params);
}

TEST(Trainer, DistillRejectsMismatchedTeacher) {
  auto d = tiny_data(8, 4);
  auto cfg = tiny_train(1);
  auto twod = train_supervised(cfg, d.train, d.val).best;
  EXPECT_THROW(distill_student(cfg, twod, d.train, d.val), std::invalid_argument);
  auto tcfg = tiny_train(1);
  tcfg.model.layers = 3;
  auto deep = train_teacher(tcfg, d.train, d.val).best;
  EXPECT_THROW(distill_student(cfg, deep, d.train, d.val), std::invalid_argument);
  tcfg = tiny_train(1);
  tcfg.model.width = 24;
  auto wide = train_teacher(tcfg, d.train, d.val).best;
  EXPECT_THROW(distill_student(cfg, wide, d.train, d.val), std::invalid_argument);
  cfg.model.projection_width = 24;
  EXPECT_NO_THROW(distill_student(cfg, wide, d.train, d.val));
}

TEST(Trainer, GeometryRequirements) {
  auto d = tiny_data(8, 4);
  auto bare = d.train;
  for (auto& m : bare.molecules) m.coords.reset();
  EXPECT_THROW(train_teacher(tiny_train(1), bare, d.val), std::invalid_argument);
  // A 2D model trains without coordinates.
  auto val2 = d.val;
  for (auto& m : val2.molecules) m.coords.reset();
  EXPECT_NO_THROW(train_supervised(tiny_train(1), bare, val2));
  EXPECT_THROW(train_supervised(tiny_train(1), mol::Dataset{}, d.val), std::invalid_argument);
  EXPECT_THROW(train_supervised(tiny_train(1), d.train, mol::Dataset{}), std::invalid_argument);
}

TEST(Evaluate, ZeroPredictorGivesMeanAbsoluteLabel) {
  auto d = tiny_data(1, 9);
  Checkpoint c{tiny(), init_model(tiny(), 3), 0, 1, 3};
  for (auto& v : c.params.at("head.w2").values) v = 0.0;
  for (auto& v : c.params.at("head.b2").values) v = 0.0;
  double want = 0;
  for (const auto& m : d.val.molecules) want += std::abs(m.label);
  want /= d.val.molecules.size();
  EXPECT_NEAR(evaluate(c, d.val.molecules, enc::View::TwoD, 4), want, 1e-14);
}

TEST(Evaluate, Errors) {
  auto d = tiny_data(1, 3);
  Checkpoint twod{tiny(), init_model(tiny(), 3), 0, 1, 3};
  EXPECT_THROW(evaluate(twod, {}, enc::View::TwoD), std::invalid_argument);
  EXPECT_THROW(evaluate(twod, d.val.molecules, enc::View::ThreeD), std::invalid_argument);
  auto m3 = tiny(Arch::Transformer, enc::View::ThreeD);
  Checkpoint threed{m3, init_model(m3, 3), 0, 1, 3};
  auto bare = d.val.molecules;
  for (auto& m : bare) m.coords.reset();
  EXPECT_THROW(evaluate(threed, bare, enc::View::ThreeD), std::invalid_argument);
  EXPECT_NO_THROW(evaluate(threed, d.val.molecules, enc::View::ThreeD));
}

}  // namespace
