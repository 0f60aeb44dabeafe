#pragma once

#include <filesystem>
#include <string>

#include "ikdmil/data.hpp"
#include "ikdmil/engine.hpp"
#include "ikdmil/segmodel.hpp"

namespace ikdmil {

// Everything a run needs, loadable from one JSON file. Parsing is strict:
// unknown keys are rejected with their full key path so typos never silently
// fall back to defaults.
struct RunConfig {
  std::string run_name = "run";
  std::string output_dir = "runs";
  int repeats = 3;  // repeated-trial count for ablation summaries
  BackboneSpec backbone;
  TrainConfig train;   // carries LossConfig + MetricsConfig
  SynthSpec synth;
  FilterSpec filter;

  void validate() const;
};

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::filesystem::path& path);

// Canonical JSON echo of the effective config; parse_config_text of the
// result reproduces the struct.
std::string serialize_config(const RunConfig& cfg);

}  // namespace ikdmil
