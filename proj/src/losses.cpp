#include "ikdmil/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ikdmil {

namespace {

void check_label(int y) {
  if (y != 0 && y != 1) {
    throw PreconditionError("image-level label must be 0 or 1, got " + std::to_string(y));
  }
}

// Dice with an optional on-the-fly complement of both operands, so the
// label-complement convention does not force map copies in the hot loop.
struct DiceSums {
  double inter = 0.0;  // sum p*t
  double psum = 0.0;
  double tsum = 0.0;
};

DiceSums dice_sums(const ProbMap& pred, const ProbMap& target, bool comp) {
  DiceSums s;
  const size_t n = pred.size();
  for (size_t i = 0; i < n; ++i) {
    double p = comp ? 1.0 - pred.v[i] : pred.v[i];
    double t = comp ? 1.0 - target.v[i] : target.v[i];
    s.inter += p * t;
    s.psum += p;
    s.tsum += t;
  }
  return s;
}

double dice_from_sums(const DiceSums& s, double eps) {
  return 1.0 - (2.0 * s.inter + eps) / (s.psum + s.tsum + eps);
}

double dice_value(const ProbMap& pred, const ProbMap& target, bool comp, double eps) {
  check_same_shape(pred, target, "soft_dice_loss");
  return dice_from_sums(dice_sums(pred, target, comp), eps);
}

// Accumulates scale * dL/dpred into grad. Handles the complement chain rule
// (d/dp of a loss evaluated at 1-p flips the sign).
double dice_value_grad(const ProbMap& pred, const ProbMap& target, bool comp, double eps,
                       ProbMap& grad, double scale) {
  check_same_shape(pred, target, "soft_dice_loss");
  DiceSums s = dice_sums(pred, target, comp);
  const double num = 2.0 * s.inter + eps;
  const double den = s.psum + s.tsum + eps;
  const double inv_d2 = 1.0 / (den * den);
  const size_t n = pred.size();
  for (size_t i = 0; i < n; ++i) {
    double t = comp ? 1.0 - target.v[i] : target.v[i];
    double g = (num - 2.0 * t * den) * inv_d2;
    grad.v[i] += scale * (comp ? -g : g);
  }
  return 1.0 - num / den;
}

ProbMap zeros_like(const ProbMap& m) { return ProbMap(m.h, m.w, 0.0); }

void check_multiscale(const MultiScaleOutput& out) {
  if (out.per_block.empty()) throw PreconditionError("multi-scale output has no block maps");
  for (const auto& m : out.per_block) check_same_shape(out.fused, m, "multi-scale output");
}

}  // namespace

void LossConfig::validate() const {
  if (!(dice_epsilon > 0.0)) throw ConfigError("dice_epsilon must be > 0");
  if (!(log_epsilon > 0.0)) throw ConfigError("log_epsilon must be > 0");
  if (a < 0.0) throw ConfigError("loss weight a must be >= 0");
}

double soft_dice_loss(const ProbMap& pred, const ProbMap& target, double eps) {
  return dice_value(pred, target, /*comp=*/false, eps);
}

DiceGrad soft_dice_loss_grad(const ProbMap& pred, const ProbMap& target, double eps) {
  DiceGrad out;
  out.d_pred = zeros_like(pred);
  out.value = dice_value_grad(pred, target, /*comp=*/false, eps, out.d_pred, 1.0);
  return out;
}

void apply_label_complement(std::vector<ProbMap>& maps, ProbMap& target, int y) {
  check_label(y);
  if (y == 1) return;
  for (auto& m : maps)
    for (auto& v : m.v) v = 1.0 - v;
  for (auto& v : target.v) v = 1.0 - v;
}

double teacher_loss(const MultiScaleOutput& out, const ProbMap& naive_mask, int y,
                    const LossConfig& cfg) {
  return teacher_loss_grad(out, naive_mask, y, cfg).value;
}

MultiScaleGrad teacher_loss_grad(const MultiScaleOutput& out, const ProbMap& naive_mask, int y,
                                 const LossConfig& cfg) {
  check_label(y);
  check_multiscale(out);
  check_same_shape(out.fused, naive_mask, "teacher_loss");
  const double want = y == 1 ? 1.0 : 0.0;
  for (double v : naive_mask.v) {
    if (v != want) {
      std::ostringstream os;
      os << "naive mask inconsistent with label y=" << y << ": expected all-"
         << (y == 1 ? "ones" : "zeros");
      throw PreconditionError(os.str());
    }
  }
  const bool comp = (y == 0);
  MultiScaleGrad g;
  g.d_fused = zeros_like(out.fused);
  g.value = dice_value_grad(out.fused, naive_mask, comp, cfg.dice_epsilon, g.d_fused, 1.0);
  g.d_blocks.reserve(out.per_block.size());
  for (const auto& m : out.per_block) {
    ProbMap db = zeros_like(m);
    g.value += dice_value_grad(m, naive_mask, comp, cfg.dice_epsilon, db, 1.0);
    g.d_blocks.push_back(std::move(db));
  }
  return g;
}

double kd_loss(const MultiScaleOutput& student, const ProbMap& teacher_fused, int y,
               const LossConfig& cfg) {
  return kd_loss_grad(student, teacher_fused, y, cfg).value;
}

MultiScaleGrad kd_loss_grad(const MultiScaleOutput& student, const ProbMap& teacher_fused, int y,
                            const LossConfig& cfg) {
  check_label(y);
  check_multiscale(student);
  check_same_shape(student.fused, teacher_fused, "kd_loss");
  // Normal patches have an exact ground-truth mask (all background); it
  // replaces the teacher output as the distillation target.
  const ProbMap* target = &teacher_fused;
  ProbMap gt_zero;
  if (y == 0) {
    gt_zero = zeros_like(student.fused);
    target = &gt_zero;
  }
  const bool comp = (y == 0);
  MultiScaleGrad g;
  g.d_fused = zeros_like(student.fused);
  g.value = dice_value_grad(student.fused, *target, comp, cfg.dice_epsilon, g.d_fused, 1.0);
  g.d_blocks.reserve(student.per_block.size());
  for (const auto& m : student.per_block) {
    ProbMap db = zeros_like(m);
    g.value += dice_value_grad(m, *target, comp, cfg.dice_epsilon, db, 1.0);
    g.d_blocks.push_back(std::move(db));
  }
  return g;
}

double wce_loss(const ProbMap& student_fused, const ProbMap& teacher_fused,
                const LossConfig& cfg) {
  check_same_shape(student_fused, teacher_fused, "wce_loss");
  const size_t n = student_fused.size();
  std::vector<double> ce(n);
  double max_u = -1e300;
  for (size_t i = 0; i < n; ++i) {
    ce[i] = -teacher_fused.v[i] * std::log(student_fused.v[i] + cfg.log_epsilon);
    max_u = std::max(max_u, -ce[i]);
  }
  double z = 0.0;
  for (size_t i = 0; i < n; ++i) z += std::exp(-ce[i] - max_u);
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) loss += ce[i] * std::exp(-ce[i] - max_u) / z;
  return loss;
}

DiceGrad wce_loss_grad(const ProbMap& student_fused, const ProbMap& teacher_fused,
                       const LossConfig& cfg) {
  check_same_shape(student_fused, teacher_fused, "wce_loss");
  const size_t n = student_fused.size();
  std::vector<double> ce(n), w(n);
  double max_u = -1e300;
  for (size_t i = 0; i < n; ++i) {
    ce[i] = -teacher_fused.v[i] * std::log(student_fused.v[i] + cfg.log_epsilon);
    max_u = std::max(max_u, -ce[i]);
  }
  double z = 0.0;
  for (size_t i = 0; i < n; ++i) {
    w[i] = std::exp(-ce[i] - max_u);
    z += w[i];
  }
  DiceGrad out;
  out.d_pred = ProbMap(student_fused.h, student_fused.w, 0.0);
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    w[i] /= z;
    loss += ce[i] * w[i];
  }
  for (size_t i = 0; i < n; ++i) {
    // dL/dce_i = w_i * (1 + L - ce_i); chain through ce_i = -t*log(s + eps).
    double dce = w[i] * (1.0 + loss - ce[i]);
    out.d_pred.v[i] = dce * (-teacher_fused.v[i] / (student_fused.v[i] + cfg.log_epsilon));
  }
  out.value = loss;
  return out;
}

double student_total_loss(const MultiScaleOutput& student, const ProbMap& teacher_fused, int y,
                          const LossConfig& cfg) {
  cfg.validate();
  double total = kd_loss(student, teacher_fused, y, cfg);
  // y = 0 uses the zero target, whose cross-entropy vanishes identically.
  if (y == 1 && cfg.a != 0.0) total += cfg.a * wce_loss(student.fused, teacher_fused, cfg);
  return total;
}

MultiScaleGrad student_total_loss_grad(const MultiScaleOutput& student,
                                       const ProbMap& teacher_fused, int y,
                                       const LossConfig& cfg) {
  cfg.validate();
  MultiScaleGrad g = kd_loss_grad(student, teacher_fused, y, cfg);
  if (y == 1 && cfg.a != 0.0) {
    DiceGrad w = wce_loss_grad(student.fused, teacher_fused, cfg);
    g.value += cfg.a * w.value;
    for (size_t i = 0; i < g.d_fused.size(); ++i) g.d_fused.v[i] += cfg.a * w.d_pred.v[i];
  }
  return g;
}

DistillStructure parse_structure(const std::string& s) {
  if (s == "fusion") return DistillStructure::kFusion;
  if (s == "a" || s == "block-to-block") return DistillStructure::kBlockToBlock;
  if (s == "b" || s == "output-only") return DistillStructure::kOutputOnly;
  throw ConfigError("unknown distill_structure \"" + s + "\" (expected fusion, a, or b)");
}

std::string structure_name(DistillStructure s) {
  switch (s) {
    case DistillStructure::kFusion: return "fusion";
    case DistillStructure::kBlockToBlock: return "a";
    case DistillStructure::kOutputOnly: return "b";
  }
  return "?";
}

double distill_loss(const MultiScaleOutput& student, const MultiScaleOutput& teacher, int y,
                    const LossConfig& cfg, DistillStructure structure) {
  return distill_loss_grad(student, teacher, y, cfg, structure).value;
}

MultiScaleGrad distill_loss_grad(const MultiScaleOutput& student, const MultiScaleOutput& teacher,
                                 int y, const LossConfig& cfg, DistillStructure structure) {
  if (structure == DistillStructure::kFusion) {
    return kd_loss_grad(student, teacher.fused, y, cfg);
  }
  check_label(y);
  check_multiscale(student);
  check_multiscale(teacher);
  if (student.per_block.size() != teacher.per_block.size()) {
    throw IncompatibilityError("teacher and student block counts differ");
  }
  const bool comp = (y == 0);
  ProbMap gt_zero = zeros_like(student.fused);
  MultiScaleGrad g;
  g.d_fused = zeros_like(student.fused);
  g.d_blocks.assign(student.per_block.size(), ProbMap());
  if (structure == DistillStructure::kBlockToBlock) {
    for (size_t i = 0; i < student.per_block.size(); ++i) {
      const ProbMap& target = (y == 0) ? gt_zero : teacher.per_block[i];
      g.d_blocks[i] = zeros_like(student.per_block[i]);
      g.value += dice_value_grad(student.per_block[i], target, comp, cfg.dice_epsilon,
                                 g.d_blocks[i], 1.0);
    }
  } else {  // kOutputOnly
    const ProbMap& target = (y == 0) ? gt_zero : teacher.fused;
    g.value = dice_value_grad(student.fused, target, comp, cfg.dice_epsilon, g.d_fused, 1.0);
    for (size_t i = 0; i < student.per_block.size(); ++i) {
      g.d_blocks[i] = zeros_like(student.per_block[i]);
    }
  }
  return g;
}

}  // namespace ikdmil
