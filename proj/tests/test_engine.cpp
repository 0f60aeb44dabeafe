#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "ikdmil/checkpoint.hpp"
#include "ikdmil/data.hpp"
#include "ikdmil/engine.hpp"
#include "ikdmil/losses.hpp"
#include "ikdmil/metrics.hpp"
#include "ikdmil/rng.hpp"
#include "ikdmil/segmodel.hpp"

using namespace ikdmil;
namespace fs = std::filesystem;

namespace {

// Two-block 16x16 backbone: large enough to learn the toy corpus, small
// enough that full training runs stay in the millisecond range.
BackboneSpec tiny2_spec() {
  BackboneSpec spec;
  spec.name = "custom";
  spec.block_channel_plan = {{4, 4}, {8, 8}};
  spec.input_size = 16;
  return spec;
}

Dataset toy_data(int per_class = 12, uint64_t seed = 99) {
  SynthSpec spec;
  spec.count_pos = per_class;
  spec.count_neg = per_class;
  spec.image_size = 16;
  spec.seed = seed;
  spec.blobs.radius_min = 2.0;
  spec.blobs.radius_max = 4.0;
  return generate_synthetic_dataset(spec);
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 8;
  cfg.mil_epochs = 3;
  cfg.fusion_fit_epochs = 4;
  cfg.switch_period_epochs = 2;
  cfg.total_distill_epochs = 4;
  cfg.seed = 11;
  cfg.val_fraction = 0.25;
  return cfg;
}

// Mean teacher-objective loss over a dataset with label-derived naive masks.
double naive_mask_loss(const SegModel& model, const Dataset& data, const LossConfig& lcfg) {
  const TrainView view = data.train_view();
  const int side = model.spec().input_size;
  const ProbMap ones(side, side, 1.0);
  const ProbMap zeros(side, side, 0.0);
  double total = 0.0;
  for (size_t i = 0; i < view.size(); ++i) {
    const MultiScaleOutput out = model.forward(view.pixels(i));
    total += teacher_loss(out, view.label(i) == 1 ? ones : zeros, view.label(i), lcfg);
  }
  return total / double(view.size());
}

// Sets every head to a constant pre-sigmoid response: weights zeroed, bias
// fixed. The resulting maps are sigmoid(bias) everywhere.
void force_constant_heads(SegModel& model, float bias) {
  for (const SegModel::NamedParam& p : model.parameters()) {
    if (p.name.rfind("head", 0) != 0) continue;
    p.tensor->fill(p.name.back() == 'b' ? bias : 0.0f);
  }
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("ikdmil-engine-" + tag + "-" +
                                        std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE_BEGIN("engine");

TEST_CASE("mil stage: zero epochs is a no-op that still snapshots") {
  const Dataset data = toy_data();
  SegModel model = SegModel::build(tiny2_spec(), 7);
  const std::string before = model.parameter_checksum();
  TrainConfig cfg = quick_config();
  cfg.mil_epochs = 0;
  const Checkpoint ckpt = train_mil_stage(model, data, cfg);
  CHECK(model.parameter_checksum() == before);
  CHECK(ckpt.stage == "mil");
  CHECK(ckpt.restore_model().parameter_checksum() == before);
}

TEST_CASE("mil stage: deterministic and the naive-mask objective improves") {
  const Dataset data = toy_data();
  const TrainConfig cfg = quick_config();
  SegModel a = SegModel::build(tiny2_spec(), 7);
  SegModel b = a;
  const double loss_before = naive_mask_loss(a, data, cfg.loss);
  train_mil_stage(a, data, cfg);
  train_mil_stage(b, data, cfg);
  CHECK(a.parameter_checksum() == b.parameter_checksum());
  CHECK(naive_mask_loss(a, data, cfg.loss) < loss_before);
}

TEST_CASE("fusion fit: zero epochs leaves logits alone; heads stay frozen otherwise") {
  const Dataset data = toy_data();
  SegModel model = SegModel::build(tiny2_spec(), 3);
  TrainConfig cfg = quick_config();

  cfg.fusion_fit_epochs = 0;
  const Tensor logits_before = model.fusion().logits;
  fit_fusion_weights(model, data, cfg);
  for (size_t i = 0; i < logits_before.size(); ++i) {
    CHECK(model.fusion().logits[i] == logits_before[i]);
  }

  // A real fit may only touch the fusion logits.
  cfg.fusion_fit_epochs = 4;
  cfg.learning_rate = 0.05;
  std::vector<Tensor> frozen;
  for (const SegModel::NamedParam& p : model.parameters()) {
    if (p.name != "fusion.logits") frozen.push_back(*p.tensor);
  }
  fit_fusion_weights(model, data, cfg);
  size_t slot = 0;
  for (const SegModel::NamedParam& p : model.parameters()) {
    if (p.name == "fusion.logits") continue;
    const Tensor& before = frozen[slot++];
    REQUIRE(p.tensor->size() == before.size());
    for (size_t i = 0; i < before.size(); ++i) CHECK((*p.tensor)[i] == before[i]);
  }
  CHECK(slot == frozen.size());
}

TEST_CASE("fusion fit: a planted oracle head captures the softmax weight") {
  // Block 0 reproduces the true mask almost exactly; blocks 1 and 2 emit
  // uninformative noise. Fitting against the label-derived naive masks must
  // route nearly all fusion weight to the oracle. Foreground covers ~3/4 of
  // each positive so that confident correct maps beat hedging noise under
  // the all-ones/all-zeros targets.
  Pcg32 rng(2024);
  const int side = 8, n = 40;
  std::vector<std::vector<ProbMap>> maps;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    const int y = i % 2;
    ProbMap truth(side, side, 0.0);
    if (y == 1) {
      for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c) {
          if ((r + c) % 4 != 0) truth.v[size_t(r) * side + c] = 1.0;  // ~75% coverage
        }
      }
    }
    ProbMap oracle(side, side, 0.0);
    for (size_t p = 0; p < truth.v.size(); ++p) oracle.v[p] = truth.v[p] > 0.5 ? 0.98 : 0.02;
    ProbMap noise1(side, side, 0.0), noise2(side, side, 0.0);
    for (size_t p = 0; p < noise1.v.size(); ++p) {
      noise1.v[p] = rng.uniform(0.35, 0.65);
      noise2.v[p] = rng.uniform(0.35, 0.65);
    }
    maps.push_back({oracle, noise1, noise2});
    labels.push_back(y);
  }

  FusionWeights init;
  init.logits = Tensor({3});
  init.logits.fill(0.0f);
  TrainConfig cfg = quick_config();
  cfg.learning_rate = 0.1;
  cfg.fusion_fit_epochs = 60;
  const FusionWeights fitted = fit_fusion_weights_on_maps(maps, labels, init, cfg);
  const std::vector<double> w = fitted.weights();
  REQUIRE(w.size() == 3);
  CHECK(w[0] > 0.8);
}

TEST_CASE("fusion fit on maps: shape and emptiness preconditions") {
  const TrainConfig cfg = quick_config();
  FusionWeights init;
  init.logits = Tensor({2});
  init.logits.fill(0.0f);
  CHECK_THROWS_AS(fit_fusion_weights_on_maps({}, {}, init, cfg), ConfigError);
  const std::vector<std::vector<ProbMap>> maps{{ProbMap(4, 4, 0.5), ProbMap(4, 4, 0.5)}};
  CHECK_THROWS_AS(fit_fusion_weights_on_maps(maps, {1, 0}, init, cfg), PreconditionError);
  const std::vector<std::vector<ProbMap>> short_set{{ProbMap(4, 4, 0.5)}};
  CHECK_THROWS_AS(fit_fusion_weights_on_maps(short_set, {1}, init, cfg), PreconditionError);
}

TEST_CASE("distillation cycle: zero learning rate trains nothing yet reports everything") {
  const Dataset data = toy_data();
  const auto [train_idx, val_idx] = data.split_indices(0.25, 5);
  SegModel teacher = SegModel::build(tiny2_spec(), 7);
  SegModel student = teacher;
  TrainConfig cfg = quick_config();
  cfg.learning_rate = 0.0;
  cfg.switch_period_epochs = 3;
  const std::string teacher_before = teacher.parameter_checksum();
  const std::string student_before = student.parameter_checksum();
  const CycleReport report = distillation_cycle(teacher, student, data.train_view(train_idx),
                                                data.eval_view(val_idx), cfg);
  CHECK(student.parameter_checksum() == student_before);
  CHECK(teacher.parameter_checksum() == teacher_before);
  REQUIRE(report.epoch_metrics.size() == 3);
  for (const EpochRecord& rec : report.epoch_metrics) {
    CHECK(rec.role == "student");
    CHECK(rec.has_val);
  }
  CHECK(report.best_epoch >= 1);
}

TEST_CASE("distillation cycle: frozen teacher, and best-F1 equals the recorded maximum") {
  const Dataset data = toy_data();
  const auto [train_idx, val_idx] = data.split_indices(0.25, 5);
  SegModel teacher = SegModel::build(tiny2_spec(), 7);
  TrainConfig cfg = quick_config();
  train_mil_stage(teacher, data, cfg);
  SegModel student = teacher;
  cfg.switch_period_epochs = 3;

  Adam opt(cfg.adam());
  const std::string teacher_before = teacher.parameter_checksum();
  const CycleRun run = run_distill_cycle(teacher, student, data.train_view(train_idx),
                                         data.eval_view(val_idx), cfg, opt, 0, 0,
                                         cfg.switch_period_epochs);
  CHECK(teacher.parameter_checksum() == teacher_before);

  double max_seen = -1.0;
  for (const EpochRecord& rec : run.report.epoch_metrics) max_seen = std::max(max_seen, rec.val_f1);
  CHECK(run.best_f1 == doctest::Approx(max_seen).epsilon(1e-12));
  CHECK(run.report.best_f1 == run.best_f1);

  // The checkpointed best state really is the model that scored best_f1.
  REQUIRE(!run.best_state.tensors.empty());
  const SegModel best = run.best_state.restore_model();
  const MetricsReport rep = evaluate_dataset(best, data.eval_view(val_idx), cfg.metrics);
  CHECK(rep.mean_f1 == doctest::Approx(run.best_f1).epsilon(1e-12));
}

TEST_CASE("distillation cycle: structurally different teacher and student are refused") {
  const Dataset data = toy_data();
  const auto [train_idx, val_idx] = data.split_indices(0.25, 5);
  SegModel teacher = SegModel::build(tiny2_spec(), 7);
  BackboneSpec other = tiny2_spec();
  other.block_channel_plan = {{4, 4}, {8, 8}, {8, 8}};
  SegModel student = SegModel::build(other, 7);
  const TrainConfig cfg = quick_config();
  CHECK_THROWS_AS(distillation_cycle(teacher, student, data.train_view(train_idx),
                                     data.eval_view(val_idx), cfg),
                  IncompatibilityError);
}

TEST_CASE("iterative distillation: epoch budget controls the cycle count") {
  const Dataset data = toy_data();
  SegModel teacher = SegModel::build(tiny2_spec(), 7);
  TrainConfig cfg = quick_config();

  cfg.switch_period_epochs = 2;
  cfg.total_distill_epochs = 2;
  DistillResult one = run_iterative_distillation(teacher, data, cfg);
  CHECK(one.cycles.size() == 1);
  CHECK(one.cycles[0].epoch_metrics.size() == 2);

  cfg.total_distill_epochs = 5;  // 2 + 2 + trailing 1
  DistillResult three = run_iterative_distillation(teacher, data, cfg);
  REQUIRE(three.cycles.size() == 3);
  CHECK(three.cycles[0].epoch_metrics.size() == 2);
  CHECK(three.cycles[1].epoch_metrics.size() == 2);
  CHECK(three.cycles[2].epoch_metrics.size() == 1);
}

TEST_CASE("iterative distillation equals a hand-rolled loop with parameter switches") {
  const Dataset data = toy_data();
  SegModel stage1 = SegModel::build(tiny2_spec(), 7);
  TrainConfig cfg = quick_config();
  train_mil_stage(stage1, data, cfg);
  cfg.switch_period_epochs = 2;
  cfg.total_distill_epochs = 4;
  cfg.role_switch = true;

  const DistillResult driver = run_iterative_distillation(stage1, data, cfg);

  // Same computation, spelled out: copy, cycle, swap, reset, cycle.
  const auto [train_idx, val_idx] = data.split_indices(cfg.val_fraction, cfg.seed);
  const TrainView train = data.train_view(train_idx);
  const EvalView val = data.eval_view(val_idx);
  SegModel teacher = stage1;
  SegModel student = stage1;
  Adam opt(cfg.adam());
  double best = evaluate_dataset(student, val, cfg.metrics).mean_f1;
  Checkpoint best_state = Checkpoint::from_model(student, "mil");

  const CycleRun c0 = run_distill_cycle(teacher, student, train, val, cfg, opt, 0, 0, 2);
  if (c0.best_f1 > best) {
    best = c0.best_f1;
    best_state = c0.best_state;
  }
  const std::string student_before_swap = student.parameter_checksum();
  swap_parameters(teacher, student);
  opt.reset();
  CHECK(teacher.parameter_checksum() == student_before_swap);  // the switch hands over exactly
  CHECK(student.parameter_checksum() == stage1.parameter_checksum());

  const CycleRun c1 = run_distill_cycle(teacher, student, train, val, cfg, opt, 1, 2, 2);
  if (c1.best_f1 > best) {
    best = c1.best_f1;
    best_state = c1.best_state;
  }

  CHECK(driver.best_f1 == best);
  CHECK(driver.model.parameter_checksum() == best_state.restore_model().parameter_checksum());
  REQUIRE(driver.cycles.size() == 2);
  for (size_t c = 0; c < 2; ++c) {
    const auto& got = driver.cycles[c].epoch_metrics;
    const auto& want = (c == 0 ? c0 : c1).report.epoch_metrics;
    REQUIRE(got.size() == want.size());
    for (size_t e = 0; e < got.size(); ++e) {
      CHECK(got[e].val_f1 == want[e].val_f1);
      CHECK(got[e].train_loss == want[e].train_loss);
    }
  }
}

TEST_CASE("iterative distillation without switching keeps the original teacher throughout") {
  const Dataset data = toy_data();
  SegModel stage1 = SegModel::build(tiny2_spec(), 7);
  TrainConfig cfg = quick_config();
  train_mil_stage(stage1, data, cfg);
  cfg.switch_period_epochs = 2;
  cfg.total_distill_epochs = 4;
  cfg.role_switch = false;

  const DistillResult driver = run_iterative_distillation(stage1, data, cfg);

  // Without switches the optimizer and teacher persist across the boundary.
  const auto [train_idx, val_idx] = data.split_indices(cfg.val_fraction, cfg.seed);
  const TrainView train = data.train_view(train_idx);
  const EvalView val = data.eval_view(val_idx);
  SegModel teacher = stage1;
  SegModel student = stage1;
  Adam opt(cfg.adam());
  double best = evaluate_dataset(student, val, cfg.metrics).mean_f1;
  const CycleRun c0 = run_distill_cycle(teacher, student, train, val, cfg, opt, 0, 0, 2);
  const CycleRun c1 = run_distill_cycle(teacher, student, train, val, cfg, opt, 1, 2, 2);
  best = std::max({best, c0.best_f1, c1.best_f1});

  CHECK(teacher.parameter_checksum() == stage1.parameter_checksum());
  CHECK(driver.best_f1 == best);
  REQUIRE(driver.cycles.size() == 2);
  CHECK(driver.cycles[1].epoch_metrics.back().val_f1 == c1.report.epoch_metrics.back().val_f1);
}

TEST_CASE("reruns with one (config, seed) write byte-identical epoch histories") {
  const Dataset data = toy_data();
  SegModel stage1 = SegModel::build(tiny2_spec(), 7);
  TrainConfig cfg = quick_config();
  train_mil_stage(stage1, data, cfg);

  TempDir a("det-a"), b("det-b");
  {
    RunEmitter ea(a.path);
    run_iterative_distillation(stage1, data, cfg, &ea);
  }
  {
    RunEmitter eb(b.path);
    run_iterative_distillation(stage1, data, cfg, &eb);
  }
  const std::string csv_a = slurp(a.path / "epochs.csv");
  const std::string csv_b = slurp(b.path / "epochs.csv");
  CHECK(csv_a == csv_b);
  CHECK(csv_a.rfind("epoch,cycle,role,train_loss,loss_distill,loss_wce,val_f1,val_iou,val_hd\n",
                    0) == 0);
  CHECK(fs::exists(a.path / "ckpt-best.bin"));
}

TEST_CASE("an interrupted run resumes into the same history and final model") {
  const Dataset data = toy_data();
  SegModel stage1 = SegModel::build(tiny2_spec(), 7);
  TrainConfig cfg = quick_config();
  train_mil_stage(stage1, data, cfg);
  cfg.role_switch = false;  // boundary carries optimizer state, the harder case
  cfg.switch_period_epochs = 2;

  TempDir whole("resume-whole"), parts("resume-parts");
  cfg.total_distill_epochs = 4;
  DistillResult straight;
  {
    RunEmitter e(whole.path);
    straight = run_iterative_distillation(stage1, data, cfg, &e);
  }

  // First invocation stops after one cycle; the second extends the budget
  // and picks up from the saved state.
  {
    TrainConfig half = cfg;
    half.total_distill_epochs = 2;
    RunEmitter e(parts.path);
    run_iterative_distillation(stage1, data, half, &e);
  }
  DistillResult resumed;
  {
    RunEmitter e(parts.path);
    resumed = run_iterative_distillation(stage1, data, cfg, &e, /*resume=*/true);
  }

  CHECK(slurp(whole.path / "epochs.csv") == slurp(parts.path / "epochs.csv"));
  CHECK(resumed.best_f1 == straight.best_f1);
  CHECK(resumed.model.parameter_checksum() == straight.model.parameter_checksum());

  // Resuming an already-finished run changes nothing and retrains nothing.
  DistillResult again;
  {
    RunEmitter e(whole.path);
    again = run_iterative_distillation(stage1, data, cfg, &e, /*resume=*/true);
  }
  CHECK(again.best_f1 == straight.best_f1);
  CHECK(again.model.parameter_checksum() == straight.model.parameter_checksum());
  CHECK(slurp(whole.path / "epochs.csv") == slurp(parts.path / "epochs.csv"));
}

TEST_CASE("validation-triggered switching ends a cycle as soon as the student leads") {
  const Dataset data = toy_data();
  // Validation on background-only patches: a teacher that predicts
  // everything loses to a student that predicts nothing.
  std::vector<size_t> neg_idx, all_idx;
  for (size_t i = 0; i < data.size(); ++i) {
    all_idx.push_back(i);
    if (data.patch(i).label == 0) neg_idx.push_back(i);
  }
  REQUIRE(!neg_idx.empty());

  SegModel teacher = SegModel::build(tiny2_spec(), 7);
  force_constant_heads(teacher, 5.0f);  // maps ~1 -> wrongly flags all pixels
  SegModel student = SegModel::build(tiny2_spec(), 7);
  force_constant_heads(student, -5.0f);  // maps ~0 -> clean on background

  TrainConfig cfg = quick_config();
  cfg.learning_rate = 0.0;  // keep both models exactly as constructed
  cfg.switch_period_epochs = 5;
  cfg.switch_on_validation = true;
  Adam opt(cfg.adam());
  const CycleRun early = run_distill_cycle(teacher, student, data.train_view(all_idx),
                                           data.eval_view(neg_idx), cfg, opt, 0, 0, 5);
  CHECK(early.epochs_used == 1);

  cfg.switch_on_validation = false;
  SegModel student2 = SegModel::build(tiny2_spec(), 7);
  force_constant_heads(student2, -5.0f);
  Adam opt2(cfg.adam());
  const CycleRun full = run_distill_cycle(teacher, student2, data.train_view(all_idx),
                                          data.eval_view(neg_idx), cfg, opt2, 0, 0, 5);
  CHECK(full.epochs_used == 5);
}

TEST_CASE("empty datasets and empty validation splits are refused") {
  const Dataset data = toy_data();
  SegModel model = SegModel::build(tiny2_spec(), 7);
  TrainConfig cfg = quick_config();
  CHECK_THROWS_AS(train_mil_stage(model, Dataset{}, cfg), ConfigError);
  CHECK_THROWS_AS(fit_fusion_weights(model, Dataset{}, cfg), ConfigError);
  CHECK_THROWS_AS(run_iterative_distillation(model, Dataset{}, cfg), ConfigError);
  cfg.val_fraction = 0.01;  // rounds to zero validation patches per class
  CHECK_THROWS_AS(run_iterative_distillation(model, data, cfg), ConfigError);
}

TEST_SUITE_END();
