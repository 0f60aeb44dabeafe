#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ikdmil/checkpoint.hpp"
#include "ikdmil/data.hpp"
#include "ikdmil/losses.hpp"
#include "ikdmil/metrics.hpp"
#include "ikdmil/optim.hpp"
#include "ikdmil/segmodel.hpp"

namespace ikdmil {

struct TrainConfig {
  double learning_rate = 5e-5;
  double weight_decay = 5e-4;
  int batch_size = 16;
  int mil_epochs = 30;
  int fusion_fit_epochs = 10;
  int switch_period_epochs = 30;
  int total_distill_epochs = 450;
  uint64_t seed = 0;
  DistillStructure distill_structure = DistillStructure::kFusion;
  bool role_switch = true;
  // Experimental alternative to the fixed schedule: end a cycle early once
  // the student's validation F1 exceeds the frozen teacher's.
  bool switch_on_validation = false;
  double val_fraction = 0.10;  // held-out slice of training data for selection
  LossConfig loss;             // carries the wce weight `a`
  MetricsConfig metrics;

  void validate() const;
  AdamConfig adam() const;
};

// One row of the training history. Stage-1 phases leave the distillation
// fields at their defaults; validation fields are present when a validation
// split was evaluated that epoch.
struct EpochRecord {
  int epoch = 0;       // 1-based position within its phase ("0" = baseline row)
  int cycle = -1;      // distillation cycle index, -1 outside stage 2
  std::string role;    // "mil-teacher", "fusion-fit", "student", "student-init"
  double train_loss = 0.0;
  double loss_distill = 0.0;
  double loss_wce = 0.0;
  bool has_val = false;
  double val_f1 = 0.0;
  double val_iou = 0.0;
  std::optional<double> val_hd;
};

struct CycleReport {
  int cycle = 0;
  std::vector<EpochRecord> epoch_metrics;
  int best_epoch = -1;   // global epoch number of the cycle's best validation F1
  double best_f1 = 0.0;
  std::filesystem::path best_checkpoint;  // empty when no emitter was attached
};

// Writes run artifacts: epochs.csv (appended row by row), checkpoints, and
// a manifest binding the effective config and seed to a content hash.
class RunEmitter {
 public:
  explicit RunEmitter(std::filesystem::path dir);

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& filename) const { return dir_ / filename; }
  void write_epoch(const EpochRecord& rec);
  void write_manifest(const std::string& config_json, uint64_t seed);
  void flush();

 private:
  std::filesystem::path dir_;
  std::ofstream epochs_;
};

// ---------------------------------------------------------------------------
// Stage 1: MIL teacher training on naive masks, then fusion-weight fitting.

// Optimizes backbone and head parameters under the teacher objective with
// naive masks derived from the image-level labels; fusion logits stay fixed.
// Returns the trained snapshot tagged "mil".
Checkpoint train_mil_stage(SegModel& model, const Dataset& data, const TrainConfig& cfg,
                           RunEmitter* emitter = nullptr);

// Optimizes only the fusion logits under the teacher objective, with the
// backbone and heads frozen (their per-block maps are precomputed once).
// The model's fusion weights are updated in place and also returned.
FusionWeights fit_fusion_weights(SegModel& model, const Dataset& data, const TrainConfig& cfg,
                                 RunEmitter* emitter = nullptr);

// Core of fit_fusion_weights, exposed for callers that already hold cached
// per-block maps (one vector of block maps per image, plus its label).
FusionWeights fit_fusion_weights_on_maps(const std::vector<std::vector<ProbMap>>& block_maps,
                                         const std::vector<int>& labels,
                                         const FusionWeights& init, const TrainConfig& cfg,
                                         RunEmitter* emitter = nullptr);

// ---------------------------------------------------------------------------
// Stage 2: iterative fusion-knowledge distillation.

// Detailed result of one frozen-teacher cycle.
struct CycleRun {
  CycleReport report;
  int epochs_used = 0;        // < max_epochs only under switch_on_validation
  double best_f1 = -1.0;
  int best_global_epoch = -1;
  Checkpoint best_state;      // student snapshot at the cycle's best epoch
};

// Trains the student against the frozen teacher for up to `max_epochs`
// epochs, recording per-epoch validation metrics. The teacher's checksum is
// guarded at every epoch boundary; any drift raises ContractViolation.
CycleRun run_distill_cycle(const SegModel& teacher, SegModel& student, const TrainView& train,
                           const EvalView& val, const TrainConfig& cfg, Adam& opt,
                           int cycle_index, int epoch_offset, int max_epochs,
                           RunEmitter* emitter = nullptr);

// Single-cycle convenience wrapper: fresh optimizer, one switch period.
CycleReport distillation_cycle(const SegModel& teacher, SegModel& student, const TrainView& train,
                               const EvalView& val, const TrainConfig& cfg,
                               RunEmitter* emitter = nullptr);

struct DistillResult {
  SegModel model;    // student snapshot with the best validation F1 seen
  std::string stage;  // checkpoint tag of that snapshot
  double best_f1 = 0.0;
  int best_cycle = -1;   // -1 when the pre-training baseline was never beaten
  int best_epoch = 0;    // global epoch number
  std::vector<CycleReport> cycles;
};

// Full stage-2 driver: repeats frozen-teacher cycles over the epoch budget,
// swapping teacher/student parameters (and resetting the optimizer) at each
// cycle boundary when role_switch is set. The student starts as a copy of
// the stage-1 teacher. When `resume` is set and the emitter's directory
// holds a resume file from an interrupted run, training continues from the
// last completed cycle.
DistillResult run_iterative_distillation(const SegModel& stage1_teacher, const TrainView& train,
                                         const EvalView& val, const TrainConfig& cfg,
                                         RunEmitter* emitter = nullptr, bool resume = false);

// Convenience overload that carves the validation split out of `data` with
// the configured fraction and seed.
DistillResult run_iterative_distillation(const SegModel& stage1_teacher, const Dataset& data,
                                         const TrainConfig& cfg, RunEmitter* emitter = nullptr,
                                         bool resume = false);

}  // namespace ikdmil
