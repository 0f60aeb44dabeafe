#include "ikdmil/engine.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <utility>

#include "json.hpp"

#include "ikdmil/common.hpp"
#include "ikdmil/rng.hpp"
#include "ikdmil/sha256.hpp"

namespace ikdmil {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (mil_epochs < 0) throw ConfigError("mil_epochs must be non-negative");
  if (fusion_fit_epochs < 0) throw ConfigError("fusion_fit_epochs must be non-negative");
  if (switch_period_epochs < 1) throw ConfigError("switch_period_epochs must be at least 1");
  if (total_distill_epochs < 0) throw ConfigError("total_distill_epochs must be non-negative");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val_fraction must lie in (0,1)");
  }
  loss.validate();
  metrics.validate();
}

AdamConfig TrainConfig::adam() const {
  AdamConfig a;
  a.learning_rate = learning_rate;
  a.weight_decay = weight_decay;
  return a;
}

// ---------------------------------------------------------------------------
// RunEmitter

RunEmitter::RunEmitter(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
  const std::filesystem::path csv = dir_ / "epochs.csv";
  const bool fresh = !std::filesystem::exists(csv) || std::filesystem::file_size(csv) == 0;
  epochs_.open(csv, fresh ? std::ios::out : std::ios::app);
  if (!epochs_) throw IoError("cannot open " + csv.string());
  if (fresh) {
    epochs_ << "epoch,cycle,role,train_loss,loss_distill,loss_wce,val_f1,val_iou,val_hd\n";
  }
}

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void RunEmitter::write_epoch(const EpochRecord& rec) {
  epochs_ << rec.epoch << ',';
  if (rec.cycle >= 0) epochs_ << rec.cycle;
  epochs_ << ',' << rec.role << ',' << fmt_g(rec.train_loss) << ',' << fmt_g(rec.loss_distill)
          << ',' << fmt_g(rec.loss_wce) << ',';
  if (rec.has_val) {
    epochs_ << fmt_g(rec.val_f1) << ',' << fmt_g(rec.val_iou) << ',';
    if (rec.val_hd.has_value()) epochs_ << fmt_g(*rec.val_hd);
  } else {
    epochs_ << ",,";
  }
  epochs_ << '\n';
  epochs_.flush();
  if (!epochs_.good()) throw IoError("failed while appending to epochs.csv");
}

void RunEmitter::write_manifest(const std::string& config_json, uint64_t seed) {
  nlohmann::json manifest;
  try {
    manifest["config"] = nlohmann::json::parse(config_json);
  } catch (const nlohmann::json::parse_error&) {
    manifest["config"] = config_json;
  }
  manifest["seed"] = seed;
  manifest["config_sha256"] = sha256_hex(config_json);
  std::ofstream out(dir_ / "run-manifest.json");
  if (!out) throw IoError("cannot write run manifest in " + dir_.string());
  out << manifest.dump(2) << '\n';
  if (!out.good()) throw IoError("failed while writing run manifest");
}

void RunEmitter::flush() { epochs_.flush(); }

// ---------------------------------------------------------------------------
// Shared training plumbing

namespace {

// Parameter slots handed to the optimizer. Fusion logits are deliberately
// excluded from gradient descent everywhere except fit_fusion_weights.
struct TrainableSet {
  std::vector<Tensor*> params;
  std::vector<size_t> grad_slots;
};

TrainableSet backbone_and_heads(SegModel& model) {
  TrainableSet set;
  auto named = model.parameters();
  for (size_t i = 0; i < named.size(); ++i) {
    if (named[i].name == "fusion.logits") continue;
    set.params.push_back(named[i].tensor);
    set.grad_slots.push_back(i);
  }
  return set;
}

std::vector<const Tensor*> grad_ptrs(const GradStore& grads, const std::vector<size_t>& slots) {
  std::vector<const Tensor*> out;
  out.reserve(slots.size());
  for (size_t s : slots) out.push_back(&grads.grads[s]);
  return out;
}

ProbMap naive_mask_for(int label, int h, int w) {
  return ProbMap(h, w, label == 1 ? 1.0 : 0.0);
}

void check_finite_loss(double loss, const char* phase, int epoch, size_t batch) {
  if (!std::isfinite(loss)) {
    throw TrainingError(std::string("non-finite ") + phase + " loss at epoch " +
                        std::to_string(epoch) + ", batch " + std::to_string(batch));
  }
}

EpochRecord validation_record(const SegModel& model, const EvalView& val,
                              const MetricsConfig& mcfg, EpochRecord rec) {
  const MetricsReport rep = evaluate_dataset(model, val, mcfg);
  rec.has_val = true;
  rec.val_f1 = rep.mean_f1;
  rec.val_iou = rep.mean_iou;
  rec.val_hd = rep.mean_hd_pos;
  return rec;
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1: MIL teacher

Checkpoint train_mil_stage(SegModel& model, const Dataset& data, const TrainConfig& cfg,
                           RunEmitter* emitter) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train_mil_stage: training dataset is empty");
  const TrainView train = data.train_view();
  const int side = model.spec().input_size;
  const ProbMap naive_pos = naive_mask_for(1, side, side);
  const ProbMap naive_neg = naive_mask_for(0, side, side);

  TrainableSet set = backbone_and_heads(model);
  Adam opt(cfg.adam());
  GradStore grads = model.make_grad_store();
  ForwardCache cache;

  for (int epoch = 1; epoch <= cfg.mil_epochs; ++epoch) {
    const auto batches =
        make_batches(train, cfg.batch_size, derive_seed(cfg.seed, "mil-epoch", epoch), true);
    double epoch_loss = 0.0;
    size_t epoch_images = 0;
    for (size_t b = 0; b < batches.size(); ++b) {
      grads.clear();
      double batch_loss = 0.0;
      for (size_t idx : batches[b]) {
        const int y = train.label(idx);
        const MultiScaleOutput out = model.forward(train.pixels(idx), cache);
        const MultiScaleGrad g =
            teacher_loss_grad(out, y == 1 ? naive_pos : naive_neg, y, cfg.loss);
        model.backward(cache, g.d_blocks, g.d_fused, grads, /*logit_grads=*/false);
        batch_loss += g.value;
      }
      check_finite_loss(batch_loss, "teacher", epoch, b);
      grads.scale(1.0f / static_cast<float>(batches[b].size()));
      opt.step(set.params, grad_ptrs(grads, set.grad_slots));
      epoch_loss += batch_loss;
      epoch_images += batches[b].size();
    }
    if (emitter != nullptr) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.role = "mil-teacher";
      rec.train_loss = epoch_loss / double(epoch_images);
      emitter->write_epoch(rec);
    }
  }
  return Checkpoint::from_model(model, "mil");
}

// ---------------------------------------------------------------------------
// Stage 1b: fusion-weight fitting on frozen per-block maps

FusionWeights fit_fusion_weights_on_maps(const std::vector<std::vector<ProbMap>>& block_maps,
                                         const std::vector<int>& labels,
                                         const FusionWeights& init, const TrainConfig& cfg,
                                         RunEmitter* emitter) {
  cfg.validate();
  if (block_maps.empty()) throw ConfigError("fit_fusion_weights: no cached maps");
  if (block_maps.size() != labels.size()) {
    throw PreconditionError("fit_fusion_weights: " + std::to_string(block_maps.size()) +
                            " map sets but " + std::to_string(labels.size()) + " labels");
  }
  const size_t n_blocks = init.logits.size();
  for (const auto& maps : block_maps) {
    if (maps.size() != n_blocks) {
      throw PreconditionError("fit_fusion_weights: a map set holds " +
                              std::to_string(maps.size()) + " maps, expected " +
                              std::to_string(n_blocks));
    }
  }

  FusionWeights fusion{init.logits};
  Adam opt(cfg.adam());
  Tensor grad({static_cast<int>(n_blocks)});
  const std::vector<Tensor*> params{&fusion.logits};

  for (int epoch = 1; epoch <= cfg.fusion_fit_epochs; ++epoch) {
    const auto batches = make_batches(block_maps.size(), cfg.batch_size,
                                      derive_seed(cfg.seed, "fusion-epoch", epoch), true);
    double epoch_loss = 0.0;
    size_t epoch_images = 0;
    for (size_t b = 0; b < batches.size(); ++b) {
      grad.fill(0.0f);
      double batch_loss = 0.0;
      for (size_t idx : batches[b]) {
        const std::vector<ProbMap>& maps = block_maps[idx];
        const int y = labels[idx];
        MultiScaleOutput out;
        out.per_block = maps;  // per-block maps are constants here
        out.fused = fuse_maps(maps, fusion);
        const ProbMap naive = naive_mask_for(y, out.fused.h, out.fused.w);
        const MultiScaleGrad g = teacher_loss_grad(out, naive, y, cfg.loss);
        const Tensor dlog = fusion_logit_grad(maps, fusion, g.d_fused);
        for (size_t i = 0; i < grad.size(); ++i) grad[i] += dlog[i];
        batch_loss += g.value;
      }
      check_finite_loss(batch_loss, "fusion-fit", epoch, b);
      const float inv = 1.0f / static_cast<float>(batches[b].size());
      for (size_t i = 0; i < grad.size(); ++i) grad[i] *= inv;
      opt.step(params, {&grad});
      epoch_loss += batch_loss;
      epoch_images += batches[b].size();
    }
    if (emitter != nullptr) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.role = "fusion-fit";
      rec.train_loss = epoch_loss / double(epoch_images);
      emitter->write_epoch(rec);
    }
  }
  return fusion;
}

FusionWeights fit_fusion_weights(SegModel& model, const Dataset& data, const TrainConfig& cfg,
                                 RunEmitter* emitter) {
  cfg.validate();
  if (data.empty()) throw ConfigError("fit_fusion_weights: training dataset is empty");
  const TrainView train = data.train_view();
  std::vector<std::vector<ProbMap>> block_maps;
  std::vector<int> labels;
  block_maps.reserve(train.size());
  labels.reserve(train.size());
  for (size_t i = 0; i < train.size(); ++i) {
    block_maps.push_back(model.forward(train.pixels(i)).per_block);
    labels.push_back(train.label(i));
  }
  FusionWeights fitted = fit_fusion_weights_on_maps(block_maps, labels, model.fusion(), cfg,
                                                    emitter);
  model.fusion().logits = fitted.logits;
  return fitted;
}

// ---------------------------------------------------------------------------
// Stage 2: distillation cycles

CycleRun run_distill_cycle(const SegModel& teacher, SegModel& student, const TrainView& train,
                           const EvalView& val, const TrainConfig& cfg, Adam& opt,
                           int cycle_index, int epoch_offset, int max_epochs,
                           RunEmitter* emitter) {
  cfg.validate();
  if (train.size() == 0) throw ConfigError("distillation_cycle: training view is empty");
  if (val.size() == 0) throw ConfigError("distillation_cycle: validation view is empty");
  if (!teacher.spec().structurally_equal(student.spec())) {
    throw IncompatibilityError("teacher and student backbones differ structurally");
  }
  const std::string teacher_before = teacher.parameter_checksum();
  const std::string stage_tag = "distill-cycle-" + std::to_string(cycle_index);

  double teacher_val_f1 = -1.0;
  if (cfg.switch_on_validation) {
    teacher_val_f1 = evaluate_dataset(teacher, val, cfg.metrics).mean_f1;
  }

  // The teacher is frozen for the whole cycle, so its maps are computed once
  // up front when they fit in a modest memory budget; larger corpora fall
  // back to recomputing the teacher forward pass per image.
  constexpr size_t kTeacherCacheBudget = size_t{512} << 20;
  const size_t side = static_cast<size_t>(teacher.spec().input_size);
  const size_t per_image_bytes =
      (static_cast<size_t>(teacher.block_count()) + 1) * side * side * sizeof(double);
  const bool cache_teacher = train.size() * per_image_bytes <= kTeacherCacheBudget;
  std::vector<MultiScaleOutput> teacher_maps;
  if (cache_teacher) {
    teacher_maps.reserve(train.size());
    for (size_t i = 0; i < train.size(); ++i) {
      teacher_maps.push_back(teacher.forward(train.pixels(i)));
    }
  }

  TrainableSet set = backbone_and_heads(student);
  GradStore grads = student.make_grad_store();
  ForwardCache cache;

  CycleRun run;
  run.report.cycle = cycle_index;

  for (int k = 1; k <= max_epochs; ++k) {
    const int global_epoch = epoch_offset + k;
    const auto batches = make_batches(train, cfg.batch_size,
                                      derive_seed(cfg.seed, "distill-epoch", global_epoch), true);
    double sum_total = 0.0, sum_distill = 0.0, sum_wce = 0.0;
    size_t n_images = 0;
    for (size_t b = 0; b < batches.size(); ++b) {
      grads.clear();
      double batch_loss = 0.0;
      for (size_t idx : batches[b]) {
        const int y = train.label(idx);
        MultiScaleOutput t_fresh;
        if (!cache_teacher) t_fresh = teacher.forward(train.pixels(idx));
        const MultiScaleOutput& t_out = cache_teacher ? teacher_maps[idx] : t_fresh;
        const MultiScaleOutput s_out = student.forward(train.pixels(idx), cache);
        MultiScaleGrad g = distill_loss_grad(s_out, t_out, y, cfg.loss, cfg.distill_structure);
        sum_distill += g.value;
        if (y == 1 && cfg.loss.a != 0.0) {
          const DiceGrad wg = wce_loss_grad(s_out.fused, t_out.fused, cfg.loss);
          g.value += cfg.loss.a * wg.value;
          for (size_t p = 0; p < g.d_fused.size(); ++p) {
            g.d_fused.v[p] += cfg.loss.a * wg.d_pred.v[p];
          }
          sum_wce += cfg.loss.a * wg.value;
        }
        student.backward(cache, g.d_blocks, g.d_fused, grads, /*logit_grads=*/false);
        batch_loss += g.value;
      }
      check_finite_loss(batch_loss, "student", global_epoch, b);
      grads.scale(1.0f / static_cast<float>(batches[b].size()));
      opt.step(set.params, grad_ptrs(grads, set.grad_slots));
      sum_total += batch_loss;
      n_images += batches[b].size();
    }

    if (teacher.parameter_checksum() != teacher_before) {
      throw ContractViolation("teacher parameters changed during distillation cycle " +
                              std::to_string(cycle_index) + " (epoch " +
                              std::to_string(global_epoch) + ")");
    }

    EpochRecord rec;
    rec.epoch = global_epoch;
    rec.cycle = cycle_index;
    rec.role = "student";
    rec.train_loss = sum_total / double(n_images);
    rec.loss_distill = sum_distill / double(n_images);
    rec.loss_wce = sum_wce / double(n_images);
    rec = validation_record(student, val, cfg.metrics, std::move(rec));
    if (emitter != nullptr) emitter->write_epoch(rec);

    if (rec.val_f1 > run.best_f1) {
      run.best_f1 = rec.val_f1;
      run.best_global_epoch = global_epoch;
      run.best_state = Checkpoint::from_model(student, stage_tag);
    }
    run.report.epoch_metrics.push_back(std::move(rec));
    run.epochs_used = k;

    if (cfg.switch_on_validation && run.report.epoch_metrics.back().val_f1 > teacher_val_f1) {
      break;  // student already beats the frozen teacher; end the cycle early
    }
  }

  run.report.best_epoch = run.best_global_epoch;
  run.report.best_f1 = run.best_f1;
  if (emitter != nullptr && !run.best_state.tensors.empty()) {
    const std::filesystem::path p =
        emitter->path("ckpt-cycle-" + std::to_string(cycle_index) + ".bin");
    save_checkpoint(p, run.best_state);
    run.report.best_checkpoint = p;
  }
  return run;
}

CycleReport distillation_cycle(const SegModel& teacher, SegModel& student, const TrainView& train,
                               const EvalView& val, const TrainConfig& cfg, RunEmitter* emitter) {
  Adam opt(cfg.adam());
  return run_distill_cycle(teacher, student, train, val, cfg, opt, 0, 0,
                           cfg.switch_period_epochs, emitter)
      .report;
}

// ---------------------------------------------------------------------------
// Stage 2 driver with resume support

namespace {

constexpr char kResumeMagic[8] = {'I', 'K', 'D', 'M', 'I', 'L', 'R', 'S'};
constexpr uint32_t kResumeVersion = 1;

struct ResumeState {
  int epochs_done = 0;
  int cycle = 0;
  double best_f1 = -1.0;
  int best_cycle = -1;
  int best_epoch = 0;
  Checkpoint teacher;
  Checkpoint student;
  Checkpoint best;
  std::string optimizer_blob;
};

void save_resume_state(const std::filesystem::path& path, const ResumeState& st) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write resume state " + path.string());
  out.write(kResumeMagic, sizeof(kResumeMagic));
  const uint32_t ver = kResumeVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const int32_t ints[4] = {st.epochs_done, st.cycle, st.best_cycle, st.best_epoch};
  out.write(reinterpret_cast<const char*>(ints), sizeof(ints));
  out.write(reinterpret_cast<const char*>(&st.best_f1), sizeof(st.best_f1));
  save_checkpoint_stream(out, st.teacher);
  save_checkpoint_stream(out, st.student);
  save_checkpoint_stream(out, st.best);
  const uint64_t blob_len = st.optimizer_blob.size();
  out.write(reinterpret_cast<const char*>(&blob_len), sizeof(blob_len));
  out.write(st.optimizer_blob.data(), static_cast<std::streamsize>(blob_len));
  if (!out.good()) throw IoError("failed while writing resume state " + path.string());
}

ResumeState load_resume_state(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open resume state " + path.string());
  char magic[sizeof(kResumeMagic)] = {};
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kResumeMagic, sizeof(magic)) != 0) {
    throw IoError(path.string() + " is not a resume state (bad magic)");
  }
  uint32_t ver = 0;
  if (!in.read(reinterpret_cast<char*>(&ver), sizeof(ver)) || ver != kResumeVersion) {
    throw IoError("unsupported resume state version in " + path.string());
  }
  ResumeState st;
  int32_t ints[4] = {};
  if (!in.read(reinterpret_cast<char*>(ints), sizeof(ints)) ||
      !in.read(reinterpret_cast<char*>(&st.best_f1), sizeof(st.best_f1))) {
    throw IoError("resume state truncated: " + path.string());
  }
  st.epochs_done = ints[0];
  st.cycle = ints[1];
  st.best_cycle = ints[2];
  st.best_epoch = ints[3];
  st.teacher = load_checkpoint_stream(in);
  st.student = load_checkpoint_stream(in);
  st.best = load_checkpoint_stream(in);
  uint64_t blob_len = 0;
  if (!in.read(reinterpret_cast<char*>(&blob_len), sizeof(blob_len))) {
    throw IoError("resume state truncated: " + path.string());
  }
  st.optimizer_blob.resize(blob_len);
  if (blob_len > 0 && !in.read(st.optimizer_blob.data(),
                               static_cast<std::streamsize>(blob_len))) {
    throw IoError("resume state truncated: " + path.string());
  }
  return st;
}

}  // namespace

DistillResult run_iterative_distillation(const SegModel& stage1_teacher, const TrainView& train,
                                         const EvalView& val, const TrainConfig& cfg,
                                         RunEmitter* emitter, bool resume) {
  cfg.validate();
  if (val.size() == 0) {
    throw ConfigError("run_iterative_distillation: validation split is empty");
  }

  SegModel teacher = stage1_teacher;
  SegModel student = stage1_teacher;  // the student starts from the teacher snapshot
  Adam opt(cfg.adam());

  DistillResult result;
  int epochs_done = 0;
  int cycle = 0;
  double best_f1 = -1.0;
  int best_cycle = -1;
  int best_epoch = 0;
  Checkpoint best_state;

  const std::filesystem::path resume_path =
      emitter != nullptr ? emitter->path("resume-state.bin") : std::filesystem::path{};

  if (resume && emitter != nullptr && std::filesystem::exists(resume_path)) {
    const ResumeState st = load_resume_state(resume_path);
    teacher = st.teacher.restore_model();
    student = st.student.restore_model();
    best_state = st.best;
    best_f1 = st.best_f1;
    best_cycle = st.best_cycle;
    best_epoch = st.best_epoch;
    epochs_done = st.epochs_done;
    cycle = st.cycle;
    if (!st.optimizer_blob.empty()) {
      std::istringstream blob(st.optimizer_blob, std::ios::binary);
      opt.deserialize(blob);
    }
  } else {
    // Pre-training baseline: the untouched stage-1 model's validation score.
    // It seeds best-checkpoint tracking so the returned model never scores
    // below the input teacher on the validation split.
    EpochRecord base;
    base.epoch = 0;
    base.cycle = 0;
    base.role = "student-init";
    base = validation_record(student, val, cfg.metrics, std::move(base));
    if (emitter != nullptr) emitter->write_epoch(base);
    best_f1 = base.val_f1;
    best_state = Checkpoint::from_model(student, "mil");
  }

  while (epochs_done < cfg.total_distill_epochs) {
    const int budget =
        std::min(cfg.switch_period_epochs, cfg.total_distill_epochs - epochs_done);
    CycleRun cr =
        run_distill_cycle(teacher, student, train, val, cfg, opt, cycle, epochs_done, budget,
                          emitter);
    epochs_done += cr.epochs_used;
    if (cr.best_f1 > best_f1) {
      best_f1 = cr.best_f1;
      best_cycle = cycle;
      best_epoch = cr.best_global_epoch;
      best_state = cr.best_state;
    }
    result.cycles.push_back(std::move(cr.report));

    if (epochs_done < cfg.total_distill_epochs && cfg.role_switch) {
      swap_parameters(teacher, student);
      opt.reset();  // stale moments are meaningless after the parameter exchange
    }
    ++cycle;

    if (emitter != nullptr) {
      ResumeState st;
      st.epochs_done = epochs_done;
      st.cycle = cycle;
      st.best_f1 = best_f1;
      st.best_cycle = best_cycle;
      st.best_epoch = best_epoch;
      st.teacher = Checkpoint::from_model(teacher, "distill-cycle-" + std::to_string(cycle));
      st.student = Checkpoint::from_model(student, "distill-cycle-" + std::to_string(cycle));
      st.best = best_state;
      std::ostringstream blob(std::ios::binary);
      opt.serialize(blob);
      st.optimizer_blob = blob.str();
      save_resume_state(resume_path, st);
    }
  }

  result.model = best_state.restore_model();
  result.stage = best_state.stage;
  result.best_f1 = best_f1;
  result.best_cycle = best_cycle;
  result.best_epoch = best_epoch;
  if (emitter != nullptr) {
    save_checkpoint(emitter->path("ckpt-best.bin"), best_state);
  }
  return result;
}

DistillResult run_iterative_distillation(const SegModel& stage1_teacher, const Dataset& data,
                                         const TrainConfig& cfg, RunEmitter* emitter,
                                         bool resume) {
  cfg.validate();
  if (data.empty()) throw ConfigError("run_iterative_distillation: dataset is empty");
  const auto [train_idx, val_idx] = data.split_indices(cfg.val_fraction, cfg.seed);
  if (val_idx.empty()) {
    throw ConfigError("run_iterative_distillation: validation split is empty; "
                      "increase val_fraction or dataset size");
  }
  return run_iterative_distillation(stage1_teacher, data.train_view(train_idx),
                                    data.eval_view(val_idx), cfg, emitter, resume);
}

}  // namespace ikdmil
