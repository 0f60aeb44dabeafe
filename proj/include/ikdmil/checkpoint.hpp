#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ikdmil/segmodel.hpp"
#include "ikdmil/tensor.hpp"

namespace ikdmil {

// On-disk snapshot of a model: backbone spec, stage tag ("mil" or
// "distill-cycle-k"), and every named parameter tensor. The binary layout is
// versioned so stale files fail loudly instead of deserializing garbage.
struct Checkpoint {
  BackboneSpec spec;
  std::string stage;
  std::vector<std::pair<std::string, Tensor>> tensors;

  static Checkpoint from_model(const SegModel& model, const std::string& stage);
  // Rebuilds a model and overwrites its parameters from the stored tensors.
  SegModel restore_model() const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Stream forms, used when a checkpoint is embedded in a larger container
// (e.g. the distillation resume file).
void save_checkpoint_stream(std::ostream& out, const Checkpoint& ckpt);
Checkpoint load_checkpoint_stream(std::istream& in);

}  // namespace ikdmil
