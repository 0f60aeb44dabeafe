#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "ikdmil/tensor.hpp"

namespace ikdmil {

struct AdamConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 5e-4;  // L2 term added to the gradient

  void validate() const;
};

// Adam with decoupled-nothing semantics: weight decay is folded into the
// gradient before the moment updates, and bias correction uses the shared
// step count. State is lazily sized on the first step and must see the same
// tensor slots in the same order afterwards.
class Adam {
 public:
  explicit Adam(const AdamConfig& cfg);

  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);
  // Drops all moment state and the step count (used at role switches).
  void reset();
  int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  void serialize(std::ostream& out) const;
  void deserialize(std::istream& in);

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

}  // namespace ikdmil
