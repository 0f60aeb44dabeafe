#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ikdmil/tensor.hpp"

namespace ikdmil {

// One training/evaluation unit: a fixed-size RGB patch with an image-level
// label. The pixel-level gt_mask, when present, exists for evaluation only
// and is quarantined from training consumers.
struct ImagePatch {
  Tensor pixels;  // {3,H,W} in [0,1]
  int label = 0;  // 0 = normal only, 1 = contains lesion
  std::optional<BinaryMask> gt_mask;
  std::string source_id;
};

struct TextureParams {
  std::array<double, 3> background_base{0.84, 0.70, 0.80};
  std::array<double, 3> foreground_base{0.45, 0.32, 0.58};
  double contrast = 0.6;  // scales foreground separation from background
  double background_noise = 0.05;
  double foreground_noise = 0.05;
  double lighting_amplitude = 0.04;  // smooth low-frequency intensity drift
  double speckle_density = 0.002;    // dark distractor dots, both classes
  double speckle_strength = 0.35;
  int speckle_radius = 1;
};

struct BlobParams {
  int count_min = 1;
  int count_max = 3;
  double radius_min = 5.0;  // ellipse semi-axis range, pixels
  double radius_max = 12.0;
};

// Desk-scale stand-in for a cropped-patch corpus: lesion-like textured
// ellipses on a distinct background texture.
struct SynthSpec {
  int count_pos = 400;
  int count_neg = 400;
  int image_size = 64;
  TextureParams texture;
  BlobParams blobs;
  uint64_t seed = 1234;

  void validate() const;
};

struct FilterSpec {
  double background_drop_threshold = 0.80;  // drop patch above this fraction
  double white_intensity_cutoff = 0.90;     // all channels above -> "white"
  int target_size = 256;

  void validate() const;
};

class Dataset;

// Training-side accessor: (pixels, label) only. Reading the ground-truth
// mask through this view is a contract violation and always throws.
class TrainView {
 public:
  TrainView() = default;
  size_t size() const { return indices_.size(); }
  const Tensor& pixels(size_t i) const;
  int label(size_t i) const;
  const std::string& source_id(size_t i) const;
  const BinaryMask& gt_mask(size_t i) const;  // always throws ContractViolation

 private:
  friend class Dataset;
  TrainView(const Dataset* ds, std::vector<size_t> idx) : ds_(ds), indices_(std::move(idx)) {}
  const Dataset* ds_ = nullptr;
  std::vector<size_t> indices_;
};

// Evaluation-side accessor with ground-truth masks.
class EvalView {
 public:
  EvalView() = default;
  size_t size() const { return indices_.size(); }
  const Tensor& pixels(size_t i) const;
  int label(size_t i) const;
  const std::string& source_id(size_t i) const;
  bool has_gt_mask(size_t i) const;
  const BinaryMask& gt_mask(size_t i) const;

 private:
  friend class Dataset;
  EvalView(const Dataset* ds, std::vector<size_t> idx) : ds_(ds), indices_(std::move(idx)) {}
  const Dataset* ds_ = nullptr;
  std::vector<size_t> indices_;
};

class Dataset {
 public:
  // Validates the label/mask consistency invariants before admitting.
  void add(ImagePatch patch);
  size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const ImagePatch& patch(size_t i) const { return items_.at(i); }

  TrainView train_view() const;
  EvalView eval_view() const;
  TrainView train_view(std::vector<size_t> indices) const;
  EvalView eval_view(std::vector<size_t> indices) const;

  // Deterministic stratified split; returns (train indices, val indices).
  std::pair<std::vector<size_t>, std::vector<size_t>> split_indices(double val_fraction,
                                                                    uint64_t seed) const;

 private:
  std::vector<ImagePatch> items_;
};

Dataset generate_synthetic_dataset(const SynthSpec& spec);

// Fraction of pixels whose three channels all exceed the white cutoff.
double background_fraction(const ImagePatch& patch, const FilterSpec& spec);
double background_fraction(const Tensor& pixels, const FilterSpec& spec);

struct IngestReport {
  size_t input_records = 0;
  size_t kept = 0;
  size_t dropped_background = 0;
  size_t skipped_unreadable = 0;
};

struct ManifestRecord {
  std::string path;
  int label = 0;
  std::string mask_path;  // empty when absent
};

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const std::filesystem::path& manifest_path,
                    const std::vector<ManifestRecord>& records);

// Loads every manifest record under `dir`, drops patches whose white-
// background fraction exceeds the filter threshold, and resizes survivors
// to filter.target_size with the shared bilinear kernel (masks: nearest).
// Raster files in the folder that the manifest does not mention are a hard
// error; unreadable files are skipped with a warning.
Dataset ingest_patch_folder(const std::filesystem::path& dir, const FilterSpec& filter,
                            const std::filesystem::path& manifest_path = {},
                            IngestReport* report = nullptr);

// Writes images/, masks/ and manifest.csv so the folder can be re-ingested.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);

// Reads a folder written by write_dataset verbatim: no background filtering,
// no resizing. Use ingest_patch_folder for raw external corpora instead.
Dataset load_dataset(const std::filesystem::path& dir);

// Deterministic batch schedule over view positions; the final short batch
// is retained.
std::vector<std::vector<size_t>> make_batches(const TrainView& view, int batch_size,
                                              uint64_t seed, bool shuffle);
std::vector<std::vector<size_t>> make_batches(size_t count, int batch_size, uint64_t seed,
                                              bool shuffle);

}  // namespace ikdmil
