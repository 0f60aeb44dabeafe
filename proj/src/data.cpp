#include "ikdmil/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "ikdmil/common.hpp"
#include "ikdmil/imageio.hpp"
#include "ikdmil/rng.hpp"

namespace fs = std::filesystem;

namespace ikdmil {

void SynthSpec::validate() const {
  if (count_pos < 0 || count_neg < 0) {
    throw ConfigError("synthetic counts must be non-negative");
  }
  if (image_size < 8) {
    throw ConfigError("synthetic image_size must be at least 8, got " +
                      std::to_string(image_size));
  }
  if (blobs.count_min < 1 || blobs.count_max < blobs.count_min) {
    throw ConfigError("blob count range is invalid");
  }
  if (blobs.radius_min <= 0.0 || blobs.radius_max < blobs.radius_min) {
    throw ConfigError("blob radius range is invalid");
  }
  const int margin = static_cast<int>(std::ceil(blobs.radius_max)) + 1;
  if (2 * margin >= image_size) {
    throw ConfigError("blob radius_max " + std::to_string(blobs.radius_max) +
                      " leaves no room for placement in a " + std::to_string(image_size) +
                      "px image");
  }
  if (texture.contrast < 0.0 || texture.contrast > 1.0) {
    throw ConfigError("texture contrast must lie in [0,1]");
  }
}

void FilterSpec::validate() const {
  if (background_drop_threshold <= 0.0 || background_drop_threshold > 1.0) {
    throw ConfigError("background_drop_threshold must lie in (0,1]");
  }
  if (white_intensity_cutoff <= 0.0 || white_intensity_cutoff >= 1.0) {
    throw ConfigError("white_intensity_cutoff must lie in (0,1)");
  }
  if (target_size < 8) {
    throw ConfigError("ingest target_size must be at least 8");
  }
}

// ---------------------------------------------------------------------------
// Dataset and views

void Dataset::add(ImagePatch patch) {
  if (patch.pixels.ndims() != 3 || patch.pixels.dim(0) != 3) {
    throw PreconditionError("patch pixels must have shape {3,H,W}, got " +
                            patch.pixels.shape_str());
  }
  const int h = patch.pixels.dim(1);
  const int w = patch.pixels.dim(2);
  if (h < 1 || w < 1) {
    throw PreconditionError("patch has empty spatial extent");
  }
  for (float v : patch.pixels.raw()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw PreconditionError("patch pixel values must lie in [0,1] (patch " +
                              patch.source_id + ")");
    }
  }
  if (patch.label != 0 && patch.label != 1) {
    throw PreconditionError("patch label must be 0 or 1, got " + std::to_string(patch.label));
  }
  if (patch.gt_mask.has_value()) {
    const BinaryMask& m = *patch.gt_mask;
    if (m.h != h || m.w != w) {
      throw PreconditionError("mask size " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                              " does not match image " + std::to_string(h) + "x" +
                              std::to_string(w) + " (patch " + patch.source_id + ")");
    }
    bool any = false;
    for (uint8_t v : m.v) {
      if (v != 0 && v != 1) {
        throw PreconditionError("mask values must be 0 or 1 (patch " + patch.source_id + ")");
      }
      any = any || (v != 0);
    }
    if (patch.label == 0 && any) {
      throw PreconditionError("label-0 patch carries a non-empty lesion mask (patch " +
                              patch.source_id + ")");
    }
    if (patch.label == 1 && !any) {
      throw PreconditionError("label-1 patch carries an empty lesion mask (patch " +
                              patch.source_id + ")");
    }
  }
  items_.push_back(std::move(patch));
}

TrainView Dataset::train_view() const {
  std::vector<size_t> idx(size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return TrainView(this, std::move(idx));
}

EvalView Dataset::eval_view() const {
  std::vector<size_t> idx(size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return EvalView(this, std::move(idx));
}

TrainView Dataset::train_view(std::vector<size_t> indices) const {
  for (size_t i : indices) {
    if (i >= size()) throw PreconditionError("train view index out of range");
  }
  return TrainView(this, std::move(indices));
}

EvalView Dataset::eval_view(std::vector<size_t> indices) const {
  for (size_t i : indices) {
    if (i >= size()) throw PreconditionError("eval view index out of range");
  }
  return EvalView(this, std::move(indices));
}

std::pair<std::vector<size_t>, std::vector<size_t>> Dataset::split_indices(double val_fraction,
                                                                           uint64_t seed) const {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw PreconditionError("val_fraction must lie in [0,1)");
  }
  std::vector<size_t> train_idx, val_idx;
  for (int label = 0; label <= 1; ++label) {
    std::vector<size_t> cls;
    for (size_t i = 0; i < items_.size(); ++i) {
      if (items_[i].label == label) cls.push_back(i);
    }
    Pcg32 rng(derive_seed(seed, "stratified-split", static_cast<uint64_t>(label)));
    for (size_t i = cls.size(); i > 1; --i) {
      const auto j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(cls[i - 1], cls[j]);
    }
    const size_t n_val = static_cast<size_t>(std::llround(val_fraction * double(cls.size())));
    for (size_t i = 0; i < cls.size(); ++i) {
      (i < n_val ? val_idx : train_idx).push_back(cls[i]);
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  return {std::move(train_idx), std::move(val_idx)};
}

const Tensor& TrainView::pixels(size_t i) const { return ds_->patch(indices_.at(i)).pixels; }
int TrainView::label(size_t i) const { return ds_->patch(indices_.at(i)).label; }
const std::string& TrainView::source_id(size_t i) const {
  return ds_->patch(indices_.at(i)).source_id;
}
const BinaryMask& TrainView::gt_mask(size_t) const {
  throw ContractViolation(
      "ground-truth masks are not available to training code; "
      "use an EvalView for evaluation");
}

const Tensor& EvalView::pixels(size_t i) const { return ds_->patch(indices_.at(i)).pixels; }
int EvalView::label(size_t i) const { return ds_->patch(indices_.at(i)).label; }
const std::string& EvalView::source_id(size_t i) const {
  return ds_->patch(indices_.at(i)).source_id;
}
bool EvalView::has_gt_mask(size_t i) const {
  return ds_->patch(indices_.at(i)).gt_mask.has_value();
}
const BinaryMask& EvalView::gt_mask(size_t i) const {
  const ImagePatch& p = ds_->patch(indices_.at(i));
  if (!p.gt_mask.has_value()) {
    throw PreconditionError("patch " + p.source_id + " has no ground-truth mask");
  }
  return *p.gt_mask;
}

// ---------------------------------------------------------------------------
// Synthetic generation

namespace {

struct Ellipse {
  int cy = 0, cx = 0;   // center snapped to a pixel center
  double a = 0, b = 0;  // semi-axes
  double theta = 0;     // rotation, radians
};

// Smooth multiplicative-free intensity drift: a coarse Gaussian grid
// upsampled to full resolution with the shared bilinear kernel.
Grid<float> make_lighting_field(int size, double amplitude, Pcg32& rng) {
  constexpr int kGrid = 4;
  Grid<float> coarse(kGrid, kGrid);
  for (float& v : coarse.v) v = static_cast<float>(amplitude * rng.gaussian());
  return bilinear_resize(coarse, size, size);
}

void clamp_stamp(Tensor& px, int r, int c, const std::array<double, 3>& color) {
  const int h = px.dim(1), w = px.dim(2);
  if (r < 0 || r >= h || c < 0 || c >= w) return;
  for (int ch = 0; ch < 3; ++ch) {
    px[static_cast<size_t>(ch) * h * w + static_cast<size_t>(r) * w + c] =
        static_cast<float>(std::clamp(color[ch], 0.0, 1.0));
  }
}

// Paints the shared canvas: textured background, low-frequency lighting,
// and small dark speckles that appear in both classes.
void paint_background(Tensor& px, const TextureParams& tex, int size, Pcg32& rng) {
  const Grid<float> light = make_lighting_field(size, tex.lighting_amplitude, rng);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double drift = light.at(r, c);
      for (int ch = 0; ch < 3; ++ch) {
        const double v =
            tex.background_base[ch] + drift + tex.background_noise * rng.gaussian();
        px[static_cast<size_t>(ch) * size * size + static_cast<size_t>(r) * size + c] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  const double expected = tex.speckle_density * size * size;
  const int n_speckle = static_cast<int>(std::floor(expected + rng.uniform()));
  for (int s = 0; s < n_speckle; ++s) {
    const int sr = static_cast<int>(rng.uniform_int(0, size - 1));
    const int sc = static_cast<int>(rng.uniform_int(0, size - 1));
    std::array<double, 3> dark;
    for (int ch = 0; ch < 3; ++ch) dark[ch] = tex.background_base[ch] - tex.speckle_strength;
    for (int dr = -tex.speckle_radius; dr <= tex.speckle_radius; ++dr) {
      for (int dc = -tex.speckle_radius; dc <= tex.speckle_radius; ++dc) {
        if (dr * dr + dc * dc <= tex.speckle_radius * tex.speckle_radius) {
          clamp_stamp(px, sr + dr, sc + dc, dark);
        }
      }
    }
  }
}

void paint_lesions(Tensor& px, BinaryMask& mask, const std::vector<Ellipse>& blobs,
                   const TextureParams& tex, int size, Pcg32& rng) {
  std::array<double, 3> fg;
  for (int ch = 0; ch < 3; ++ch) {
    fg[ch] = tex.background_base[ch] +
             tex.contrast * (tex.foreground_base[ch] - tex.background_base[ch]);
  }
  for (const Ellipse& e : blobs) {
    const double ct = std::cos(e.theta), st = std::sin(e.theta);
    const int reach = static_cast<int>(std::ceil(std::max(e.a, e.b)));
    for (int r = e.cy - reach; r <= e.cy + reach; ++r) {
      for (int c = e.cx - reach; c <= e.cx + reach; ++c) {
        if (r < 0 || r >= size || c < 0 || c >= size) continue;
        const double dy = r - e.cy, dx = c - e.cx;
        const double u = dx * ct + dy * st;
        const double v = -dx * st + dy * ct;
        if ((u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) > 1.0) continue;
        mask.at(r, c) = 1;
        for (int ch = 0; ch < 3; ++ch) {
          const double val = fg[ch] + tex.foreground_noise * rng.gaussian();
          px[static_cast<size_t>(ch) * size * size + static_cast<size_t>(r) * size + c] =
              static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
      }
    }
  }
}

std::vector<Ellipse> place_blobs(const BlobParams& bp, int size, Pcg32& rng) {
  const int margin = static_cast<int>(std::ceil(bp.radius_max)) + 1;
  const int lo = margin, hi = size - 1 - margin;
  const int want = static_cast<int>(rng.uniform_int(bp.count_min, bp.count_max));
  std::vector<Ellipse> blobs;
  int attempts = 0;
  while (static_cast<int>(blobs.size()) < want) {
    if (++attempts > 100 * want) {
      throw GenerationError("unable to place " + std::to_string(want) +
                            " lesion blobs after " + std::to_string(attempts) + " attempts");
    }
    Ellipse e;
    e.cy = static_cast<int>(rng.uniform_int(lo, hi));
    e.cx = static_cast<int>(rng.uniform_int(lo, hi));
    e.a = rng.uniform(bp.radius_min, bp.radius_max);
    e.b = rng.uniform(bp.radius_min, bp.radius_max);
    e.theta = rng.uniform(0.0, 3.14159265358979323846);
    bool clashes = false;
    for (const Ellipse& prev : blobs) {
      const double d = std::hypot(double(e.cy - prev.cy), double(e.cx - prev.cx));
      if (d < bp.radius_min) {  // forbid near-coincident centers
        clashes = true;
        break;
      }
    }
    if (!clashes) blobs.push_back(e);
  }
  return blobs;
}

std::string format_source_id(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth-%s-%04d", prefix, i);
  return buf;
}

}  // namespace

Dataset generate_synthetic_dataset(const SynthSpec& spec) {
  spec.validate();
  Dataset ds;
  const int size = spec.image_size;
  for (int i = 0; i < spec.count_pos; ++i) {
    Pcg32 rng(derive_seed(spec.seed, "pos-image", static_cast<uint64_t>(i)));
    ImagePatch patch;
    patch.pixels = Tensor::zeros({3, size, size});
    BinaryMask mask(size, size);
    paint_background(patch.pixels, spec.texture, size, rng);
    const std::vector<Ellipse> blobs = place_blobs(spec.blobs, size, rng);
    paint_lesions(patch.pixels, mask, blobs, spec.texture, size, rng);
    patch.label = 1;
    patch.gt_mask = std::move(mask);
    patch.source_id = format_source_id("pos", i);
    ds.add(std::move(patch));
  }
  for (int i = 0; i < spec.count_neg; ++i) {
    Pcg32 rng(derive_seed(spec.seed, "neg-image", static_cast<uint64_t>(i)));
    ImagePatch patch;
    patch.pixels = Tensor::zeros({3, size, size});
    paint_background(patch.pixels, spec.texture, size, rng);
    patch.label = 0;
    patch.gt_mask = BinaryMask(size, size);  // explicit all-zero mask
    patch.source_id = format_source_id("neg", i);
    ds.add(std::move(patch));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Filtering and ingestion

double background_fraction(const Tensor& pixels, const FilterSpec& spec) {
  if (pixels.ndims() != 3 || pixels.dim(0) != 3) {
    throw PreconditionError("background_fraction expects {3,H,W} pixels, got " +
                            pixels.shape_str());
  }
  const size_t plane = static_cast<size_t>(pixels.dim(1)) * pixels.dim(2);
  if (plane == 0) throw PreconditionError("background_fraction on empty image");
  size_t white = 0;
  const float cut = static_cast<float>(spec.white_intensity_cutoff);
  for (size_t p = 0; p < plane; ++p) {
    if (pixels[p] > cut && pixels[plane + p] > cut && pixels[2 * plane + p] > cut) {
      ++white;
    }
  }
  return static_cast<double>(white) / static_cast<double>(plane);
}

double background_fraction(const ImagePatch& patch, const FilterSpec& spec) {
  return background_fraction(patch.pixels, spec);
}

std::vector<ManifestRecord> read_manifest(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) {
    throw IoError("cannot open manifest " + manifest_path.string());
  }
  std::vector<ManifestRecord> records;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line == "path,label,mask") continue;  // optional header
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (line.back() == ',') fields.push_back("");
    if (fields.size() != 3) {
      throw IoError("manifest " + manifest_path.string() + " line " + std::to_string(lineno) +
                    ": expected 3 comma-separated fields, got " + std::to_string(fields.size()));
    }
    ManifestRecord rec;
    rec.path = fields[0];
    if (fields[1] != "0" && fields[1] != "1") {
      throw IoError("manifest " + manifest_path.string() + " line " + std::to_string(lineno) +
                    ": label must be 0 or 1, got '" + fields[1] + "'");
    }
    rec.label = fields[1] == "1" ? 1 : 0;
    rec.mask_path = fields[2];
    records.push_back(std::move(rec));
  }
  return records;
}

void write_manifest(const fs::path& manifest_path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(manifest_path);
  if (!out) {
    throw IoError("cannot write manifest " + manifest_path.string());
  }
  out << "path,label,mask\n";
  for (const ManifestRecord& rec : records) {
    out << rec.path << ',' << rec.label << ',' << rec.mask_path << '\n';
  }
  if (!out.good()) {
    throw IoError("failed while writing manifest " + manifest_path.string());
  }
}

namespace {

bool is_raster_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

Tensor resize_image(const Tensor& pixels, int target) {
  if (pixels.dim(1) == target && pixels.dim(2) == target) return pixels;
  Tensor out = Tensor::zeros({3, target, target});
  const int h = pixels.dim(1), w = pixels.dim(2);
  for (int ch = 0; ch < 3; ++ch) {
    Grid<float> plane(h, w);
    std::copy_n(pixels.raw().begin() + static_cast<size_t>(ch) * h * w, plane.v.size(),
                plane.v.begin());
    const Grid<float> res = bilinear_resize(plane, target, target);
    std::copy(res.v.begin(), res.v.end(),
              out.raw().begin() + static_cast<size_t>(ch) * target * target);
  }
  for (float& v : out.raw()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

BinaryMask resize_mask_nearest(const BinaryMask& mask, int target) {
  if (mask.h == target && mask.w == target) return mask;
  BinaryMask out(target, target);
  for (int r = 0; r < target; ++r) {
    const int sr = target == 1 ? 0
                               : static_cast<int>(std::lround(double(r) * (mask.h - 1) /
                                                              double(target - 1)));
    for (int c = 0; c < target; ++c) {
      const int sc = target == 1 ? 0
                                 : static_cast<int>(std::lround(double(c) * (mask.w - 1) /
                                                                double(target - 1)));
      out.at(r, c) = mask.at(std::clamp(sr, 0, mask.h - 1), std::clamp(sc, 0, mask.w - 1));
    }
  }
  return out;
}

}  // namespace

Dataset ingest_patch_folder(const fs::path& dir, const FilterSpec& filter,
                            const fs::path& manifest_path, IngestReport* report) {
  filter.validate();
  if (!fs::is_directory(dir)) {
    throw IoError("ingest source is not a directory: " + dir.string());
  }
  const fs::path manifest = manifest_path.empty() ? dir / "manifest.csv" : manifest_path;
  std::vector<ManifestRecord> records = read_manifest(manifest);
  std::sort(records.begin(), records.end(),
            [](const ManifestRecord& a, const ManifestRecord& b) { return a.path < b.path; });

  // Every raster file in the folder must be accounted for by the manifest,
  // either as an image or as a mask; silent extras usually mean a stale or
  // truncated manifest.
  std::set<std::string> listed;
  for (const ManifestRecord& rec : records) {
    listed.insert((dir / rec.path).lexically_normal().string());
    if (!rec.mask_path.empty()) {
      listed.insert((dir / rec.mask_path).lexically_normal().string());
    }
  }
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_raster_file(entry.path())) continue;
    if (!listed.count(entry.path().lexically_normal().string())) {
      throw IoError("raster file not listed in manifest: " + entry.path().string());
    }
  }

  IngestReport local;
  local.input_records = records.size();
  Dataset ds;
  for (const ManifestRecord& rec : records) {
    const fs::path img_path = dir / rec.path;
    Tensor pixels;
    try {
      pixels = load_image_rgb(img_path);
    } catch (const IoError& e) {
      std::cerr << "warning: skipping unreadable patch: " << e.what() << "\n";
      ++local.skipped_unreadable;
      continue;
    }
    if (background_fraction(pixels, filter) > filter.background_drop_threshold) {
      ++local.dropped_background;
      continue;
    }
    ImagePatch patch;
    const int h = pixels.dim(1), w = pixels.dim(2);
    patch.pixels = resize_image(pixels, filter.target_size);
    if (!rec.mask_path.empty()) {
      BinaryMask mask = load_mask(dir / rec.mask_path);
      if (mask.h != h || mask.w != w) {
        throw IoError("mask " + rec.mask_path + " is " + std::to_string(mask.h) + "x" +
                      std::to_string(mask.w) + " but image " + rec.path + " is " +
                      std::to_string(h) + "x" + std::to_string(w));
      }
      patch.gt_mask = resize_mask_nearest(mask, filter.target_size);
    }
    patch.label = rec.label;
    patch.source_id = rec.path;
    ds.add(std::move(patch));
    ++local.kept;
  }
  if (report != nullptr) *report = local;
  return ds;
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::vector<ManifestRecord> records;
  for (size_t i = 0; i < ds.size(); ++i) {
    const ImagePatch& p = ds.patch(i);
    char name[32];
    std::snprintf(name, sizeof(name), "patch-%05zu.png", i);
    ManifestRecord rec;
    rec.path = std::string("images/") + name;
    rec.label = p.label;
    save_image_rgb(dir / rec.path, p.pixels);
    if (p.gt_mask.has_value()) {
      rec.mask_path = std::string("masks/") + name;
      save_mask(dir / rec.mask_path, *p.gt_mask);
    }
    records.push_back(std::move(rec));
  }
  write_manifest(dir / "manifest.csv", records);
}

Dataset load_dataset(const fs::path& dir) {
  std::vector<ManifestRecord> records = read_manifest(dir / "manifest.csv");
  Dataset ds;
  for (const ManifestRecord& rec : records) {
    ImagePatch patch;
    patch.pixels = load_image_rgb(dir / rec.path);
    if (!rec.mask_path.empty()) patch.gt_mask = load_mask(dir / rec.mask_path);
    patch.label = rec.label;
    patch.source_id = rec.path;
    ds.add(std::move(patch));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

std::vector<std::vector<size_t>> make_batches(const TrainView& view, int batch_size,
                                              uint64_t seed, bool shuffle) {
  return make_batches(view.size(), batch_size, seed, shuffle);
}

std::vector<std::vector<size_t>> make_batches(size_t count, int batch_size, uint64_t seed,
                                              bool shuffle) {
  if (batch_size < 1) {
    throw PreconditionError("batch_size must be positive, got " + std::to_string(batch_size));
  }
  std::vector<size_t> order(count);
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) {
    Pcg32 rng(seed);
    for (size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
  }
  std::vector<std::vector<size_t>> batches;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(order.size(), start + static_cast<size_t>(batch_size));
    batches.emplace_back(order.begin() + start, order.begin() + stop);
  }
  return batches;
}

}  // namespace ikdmil
