#pragma once

#include <vector>

#include "ikdmil/tensor.hpp"

namespace ikdmil {

// Multi-scale prediction for one image: one probability map per backbone
// block (already upsampled to input resolution) plus their weighted fusion.
struct MultiScaleOutput {
  std::vector<ProbMap> per_block;
  ProbMap fused;
};

struct LossConfig {
  double dice_epsilon = 1e-6;  // smoothing in numerator and denominator
  double log_epsilon = 1e-8;   // clamp inside the cross-entropy log
  double a = 0.25;             // weight of the cross-entropy regularizer

  void validate() const;
};

// ---------------------------------------------------------------------------
// Soft dice

// 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps). Zero when pred == target
// and both are binary; the shared eps keeps the empty-empty case at zero and
// gradients finite.
double soft_dice_loss(const ProbMap& pred, const ProbMap& target, double eps);

struct DiceGrad {
  double value = 0.0;
  ProbMap d_pred;
};
DiceGrad soft_dice_loss_grad(const ProbMap& pred, const ProbMap& target, double eps);

// ---------------------------------------------------------------------------
// Label-complement convention

// For normal images (y = 0) every map and the target are complemented
// (m -> 1 - m) before dice, so the loss is non-degenerate on images whose
// naive mask is empty. For y = 1 this is the identity. Involution at y = 0.
void apply_label_complement(std::vector<ProbMap>& maps, ProbMap& target, int y);

// ---------------------------------------------------------------------------
// Teacher objective (MIL stage)

// Dice of the fused map against the naive mask plus the sum of per-block
// dice terms, all under the label-complement convention. naive_mask must be
// all-zeros for y = 0 and all-ones for y = 1.
double teacher_loss(const MultiScaleOutput& out, const ProbMap& naive_mask, int y,
                    const LossConfig& cfg);

struct MultiScaleGrad {
  double value = 0.0;
  std::vector<ProbMap> d_blocks;
  ProbMap d_fused;
};
MultiScaleGrad teacher_loss_grad(const MultiScaleOutput& out, const ProbMap& naive_mask, int y,
                                 const LossConfig& cfg);

// ---------------------------------------------------------------------------
// Distillation objective pieces (student stage)

// Fused-output distillation: dice of the student's fused map and of every
// per-block student map against the teacher's fused map. For y = 0 the
// target is the all-zero ground-truth mask instead of the teacher output
// (normal patches have an exact mask by definition). No gradient is ever
// produced for the teacher side.
double kd_loss(const MultiScaleOutput& student, const ProbMap& teacher_fused, int y,
               const LossConfig& cfg);
MultiScaleGrad kd_loss_grad(const MultiScaleOutput& student, const ProbMap& teacher_fused, int y,
                            const LossConfig& cfg);

// Weighted cross-entropy between fused maps. ce_i = -t_i*log(s_i + log_eps);
// pixels are weighted by softmax(-ce), so confidently-mismatched pixels are
// downweighted and pseudo-mask noise is not amplified.
double wce_loss(const ProbMap& student_fused, const ProbMap& teacher_fused,
                const LossConfig& cfg);
DiceGrad wce_loss_grad(const ProbMap& student_fused, const ProbMap& teacher_fused,
                       const LossConfig& cfg);

// kd + a * wce. The wce target follows the same y = 0 override as kd (zero
// target, hence zero contribution for normal patches).
double student_total_loss(const MultiScaleOutput& student, const ProbMap& teacher_fused, int y,
                          const LossConfig& cfg);
MultiScaleGrad student_total_loss_grad(const MultiScaleOutput& student,
                                       const ProbMap& teacher_fused, int y,
                                       const LossConfig& cfg);

// ---------------------------------------------------------------------------
// Distillation structure ablations share the dice machinery. "fusion" is the
// default objective above; "block" distills each student block against the
// teacher's corresponding block map; "output" distills fused-vs-fused only.
enum class DistillStructure { kFusion, kBlockToBlock, kOutputOnly };

DistillStructure parse_structure(const std::string& s);
std::string structure_name(DistillStructure s);

double distill_loss(const MultiScaleOutput& student, const MultiScaleOutput& teacher, int y,
                    const LossConfig& cfg, DistillStructure structure);
MultiScaleGrad distill_loss_grad(const MultiScaleOutput& student, const MultiScaleOutput& teacher,
                                 int y, const LossConfig& cfg, DistillStructure structure);

}  // namespace ikdmil
