// Command-line front end for the iterative fusion-knowledge distillation
// pipeline. One process runs one command:
//
//   generate-data  synthesize a train/ + test/ patch corpus
//   train-mil      stage 1: teacher training on naive label-derived masks
//   fit-fusion     stage 1b: fit the fusion weights of a frozen teacher
//   distill        stage 2: iterative distillation with teacher-student switches
//   evaluate       score a checkpoint against a dataset with ground truth
//   report         plot best-per-cycle curves, or sweep the binarization threshold
//   ablate         scripted repeat studies: structure / switch / a-sweep

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ikdmil/checkpoint.hpp"
#include "ikdmil/common.hpp"
#include "ikdmil/config.hpp"
#include "ikdmil/data.hpp"
#include "ikdmil/engine.hpp"
#include "ikdmil/metrics.hpp"
#include "ikdmil/plot.hpp"
#include "ikdmil/rng.hpp"
#include "ikdmil/segmodel.hpp"
#include "ikdmil/sha256.hpp"

namespace fs = std::filesystem;
using namespace ikdmil;

namespace {

// Fraction of the configured train counts used for the held-out test split
// when the tool synthesizes its own data (400+400 train -> 100+100 test).
constexpr double kTestFraction = 0.25;

void check_device(const std::string& device) {
  if (device != "cpu") {
    throw ConfigError("unknown device \"" + device + "\"; this build runs on cpu only");
  }
}

RunConfig load_run_config(const std::string& config_path, std::optional<uint64_t> seed_override) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : parse_config(config_path);
  if (seed_override.has_value()) {
    cfg.train.seed = *seed_override;
    cfg.synth.seed = *seed_override;
  }
  cfg.validate();
  return cfg;
}

SynthSpec test_split_spec(SynthSpec spec) {
  spec.count_pos = std::max(1, static_cast<int>(std::lround(spec.count_pos * kTestFraction)));
  spec.count_neg = std::max(1, static_cast<int>(std::lround(spec.count_neg * kTestFraction)));
  spec.seed = derive_seed(spec.seed, "test-set");
  return spec;
}

std::string synth_cache_key(const SynthSpec& s) {
  nlohmann::json j;
  j["count_pos"] = s.count_pos;
  j["count_neg"] = s.count_neg;
  j["image_size"] = s.image_size;
  j["seed"] = s.seed;
  j["texture"] = {s.texture.background_base[0], s.texture.background_base[1],
                  s.texture.background_base[2], s.texture.foreground_base[0],
                  s.texture.foreground_base[1], s.texture.foreground_base[2],
                  s.texture.contrast,           s.texture.background_noise,
                  s.texture.foreground_noise,   s.texture.lighting_amplitude,
                  s.texture.speckle_density,    s.texture.speckle_strength,
                  double(s.texture.speckle_radius)};
  j["blobs"] = {double(s.blobs.count_min), double(s.blobs.count_max), s.blobs.radius_min,
                s.blobs.radius_max};
  return sha256_hex(j.dump()).substr(0, 16);
}

// Synthesizes one split, optionally through the on-disk cache named by
// IKD_MIL_CACHE. Cached splits round-trip through 8-bit PNG, so the cache is
// always write-then-reload to keep warm and cold runs bit-identical.
Dataset synth_split(const SynthSpec& spec) {
  const char* cache_env = std::getenv("IKD_MIL_CACHE");
  if (cache_env == nullptr || *cache_env == '\0') {
    return generate_synthetic_dataset(spec);
  }
  const fs::path dir = fs::path(cache_env) / ("synth-" + synth_cache_key(spec));
  if (!fs::exists(dir / "manifest.csv")) {
    write_dataset(generate_synthetic_dataset(spec), dir);
    std::cerr << "cached synthetic split at " << dir << "\n";
  }
  return load_dataset(dir);
}

// Resolves the dataset for one role ("train"/"test"): an explicit --data
// folder when given, otherwise the config's synthetic corpus.
Dataset obtain_split(const RunConfig& cfg, const std::string& data_dir, const std::string& role) {
  if (!data_dir.empty()) {
    const fs::path base(data_dir);
    if (fs::exists(base / role / "manifest.csv")) return load_dataset(base / role);
    if (fs::exists(base / "manifest.csv")) return load_dataset(base);
    throw IoError("no dataset manifest under " + (base / role).string() + " or " + base.string() +
                  " (run generate-data first, or point --data at a dataset folder)");
  }
  return synth_split(role == "test" ? test_split_spec(cfg.synth) : cfg.synth);
}

void check_input_size(const RunConfig& cfg, const Dataset& ds, const std::string& role) {
  if (ds.empty()) throw ConfigError(role + " dataset is empty");
  BackboneSpec spec = cfg.backbone;
  spec.resolve();
  const Tensor& px = ds.patch(0).pixels;
  if (px.dim(1) != spec.input_size || px.dim(2) != spec.input_size) {
    std::ostringstream os;
    os << role << " dataset images are " << px.dim(1) << "x" << px.dim(2)
       << " but backbone.input_size is " << spec.input_size
       << "; set backbone.input_size to match the data";
    throw ConfigError(os.str());
  }
}

SegModel build_model(const RunConfig& cfg) {
  return SegModel::build(cfg.backbone, derive_seed(cfg.train.seed, "param-init"));
}

Checkpoint load_checkpoint_or_die(const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) {
    throw IoError("checkpoint not found: " + path.string() + " (" + hint + ")");
  }
  return load_checkpoint(path);
}

// Picks the stage-1 checkpoint for distillation: an explicit --ckpt wins,
// else the run directory's fusion-fitted snapshot, else the raw MIL one.
fs::path resolve_stage1_ckpt(const std::string& explicit_path, const fs::path& run_dir) {
  if (!explicit_path.empty()) return explicit_path;
  const fs::path fitted = run_dir / "ckpt-stage1.bin";
  if (fs::exists(fitted)) return fitted;
  const fs::path mil = run_dir / "ckpt-mil.bin";
  if (fs::exists(mil)) return mil;
  throw IoError("stage-1 checkpoint not found: " + fitted.string() +
                " (run train-mil and fit-fusion first, or pass --ckpt)");
}

void print_weights(const FusionWeights& fusion) {
  const std::vector<double> w = fusion.weights();
  std::cout << "fusion weights:";
  for (double v : w) std::cout << ' ' << v;
  std::cout << "\n";
}

MetricsReport evaluate_and_write(const SegModel& model, const Dataset& ds,
                                 const MetricsConfig& mcfg, const fs::path& csv_path,
                                 const std::string& tag) {
  const MetricsReport report = evaluate_dataset(model, ds.eval_view(), mcfg);
  write_metrics_csv(csv_path, report);
  std::cout << tag << ": " << metrics_summary(report) << "\n";
  return report;
}

// ---------------------------------------------------------------------------
// epochs.csv reading (report command)

struct EpochRow {
  int epoch = 0;
  int cycle = -1;
  std::string role;
  bool has_val = false;
  double val_f1 = 0.0;
  double val_iou = 0.0;
};

std::vector<EpochRow> read_epochs_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<EpochRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first) {
      first = false;  // header
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    while (f.size() < 9) f.emplace_back();
    EpochRow row;
    row.epoch = std::stoi(f[0]);
    row.cycle = f[1].empty() ? -1 : std::stoi(f[1]);
    row.role = f[2];
    if (!f[6].empty()) {
      row.has_val = true;
      row.val_f1 = std::stod(f[6]);
      row.val_iou = std::stod(f[7]);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// Best validation F1 within each distillation cycle of one run.
std::vector<double> best_per_cycle(const std::vector<EpochRow>& rows) {
  std::map<int, double> best;
  for (const EpochRow& r : rows) {
    if (r.role != "student" || !r.has_val || r.cycle < 0) continue;
    auto [it, fresh] = best.emplace(r.cycle, r.val_f1);
    if (!fresh) it->second = std::max(it->second, r.val_f1);
  }
  std::vector<double> out;
  for (const auto& [cycle, f1] : best) {
    if (cycle != static_cast<int>(out.size())) {
      throw IoError("epochs.csv has a gap in its cycle numbering at cycle " +
                    std::to_string(cycle));
    }
    out.push_back(f1);
  }
  return out;
}

struct CurveStats {
  std::vector<double> x, mean, stddev;
  size_t runs = 0;
};

CurveStats aggregate_curves(const std::vector<std::vector<double>>& per_run) {
  if (per_run.empty()) throw PreconditionError("no runs to aggregate");
  size_t cycles = per_run.front().size();
  for (const auto& r : per_run) cycles = std::min(cycles, r.size());
  if (cycles == 0) throw IoError("runs contain no completed distillation cycles");
  CurveStats stats;
  stats.runs = per_run.size();
  for (size_t c = 0; c < cycles; ++c) {
    double sum = 0.0;
    for (const auto& r : per_run) sum += r[c];
    const double mean = sum / double(per_run.size());
    double var = 0.0;
    for (const auto& r : per_run) var += (r[c] - mean) * (r[c] - mean);
    stats.x.push_back(double(c));
    stats.mean.push_back(mean);
    stats.stddev.push_back(std::sqrt(var / double(per_run.size())));
  }
  return stats;
}

struct SeriesInput {
  std::string label;
  std::vector<fs::path> runs;
};

void write_curve_report(const fs::path& out_dir, const std::vector<SeriesInput>& inputs,
                        const std::string& title) {
  fs::create_directories(out_dir);
  std::vector<PlotSeries> series;
  std::ofstream csv(out_dir / "curves.csv");
  if (!csv) throw IoError("cannot write " + (out_dir / "curves.csv").string());
  csv << "series,cycle,mean_best_f1,std_best_f1,runs\n";
  for (const SeriesInput& input : inputs) {
    std::vector<std::vector<double>> per_run;
    for (const fs::path& run : input.runs) {
      per_run.push_back(best_per_cycle(read_epochs_csv(run / "epochs.csv")));
    }
    const CurveStats stats = aggregate_curves(per_run);
    for (size_t i = 0; i < stats.x.size(); ++i) {
      csv << input.label << ',' << static_cast<int>(stats.x[i]) << ',' << stats.mean[i] << ','
          << stats.stddev[i] << ',' << stats.runs << '\n';
    }
    PlotSeries s;
    s.label = input.label;
    s.x = stats.x;
    s.y = stats.mean;
    if (stats.runs > 1) s.yerr = stats.stddev;
    series.push_back(std::move(s));
  }
  PlotSpec spec;
  spec.title = title;
  spec.xlabel = "distillation cycle";
  spec.ylabel = "best validation F1 in cycle";
  write_svg_line_plot(out_dir / "curves.svg", spec, series);
  std::cout << "wrote " << (out_dir / "curves.svg").string() << " and curves.csv\n";
}

// ---------------------------------------------------------------------------
// Commands

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string data_dir;
  std::string device = "cpu";
  std::optional<uint64_t> seed;
};

int cmd_generate_data(const CommonArgs& args) {
  const RunConfig cfg = load_run_config(args.config_path, args.seed);
  const fs::path out(args.out_dir);
  const Dataset train = generate_synthetic_dataset(cfg.synth);
  const Dataset test = generate_synthetic_dataset(test_split_spec(cfg.synth));
  write_dataset(train, out / "train");
  write_dataset(test, out / "test");
  std::ofstream echo(out / "config.json");
  echo << serialize_config(cfg);
  std::cout << "train: " << train.size() << " patches, test: " << test.size() << " patches -> "
            << out.string() << "\n";
  return 0;
}

int cmd_train_mil(const CommonArgs& args) {
  check_device(args.device);
  const RunConfig cfg = load_run_config(args.config_path, args.seed);
  const Dataset train = obtain_split(cfg, args.data_dir, "train");
  check_input_size(cfg, train, "train");
  RunEmitter emitter{args.out_dir};
  emitter.write_manifest(serialize_config(cfg), cfg.train.seed);
  SegModel model = build_model(cfg);
  const Checkpoint ckpt = train_mil_stage(model, train, cfg.train, &emitter);
  save_checkpoint(emitter.path("ckpt-mil.bin"), ckpt);
  std::cout << "stage-1 MIL teacher saved to " << emitter.path("ckpt-mil.bin").string()
            << " (checksum " << model.parameter_checksum().substr(0, 12) << ")\n";
  return 0;
}

int cmd_fit_fusion(const CommonArgs& args, const std::string& ckpt_path) {
  check_device(args.device);
  const RunConfig cfg = load_run_config(args.config_path, args.seed);
  const Dataset train = obtain_split(cfg, args.data_dir, "train");
  check_input_size(cfg, train, "train");
  const fs::path in_path = ckpt_path.empty() ? fs::path(args.out_dir) / "ckpt-mil.bin"
                                             : fs::path(ckpt_path);
  const Checkpoint in_ckpt = load_checkpoint_or_die(in_path, "run train-mil first");
  SegModel model = in_ckpt.restore_model();
  RunEmitter emitter{args.out_dir};
  emitter.write_manifest(serialize_config(cfg), cfg.train.seed);
  fit_fusion_weights(model, train, cfg.train, &emitter);
  save_checkpoint(emitter.path("ckpt-stage1.bin"), Checkpoint::from_model(model, "stage1"));
  print_weights(model.fusion());
  std::cout << "fusion-fitted teacher saved to " << emitter.path("ckpt-stage1.bin").string()
            << "\n";
  return 0;
}

int cmd_distill(const CommonArgs& args, const std::string& ckpt_path, bool resume) {
  check_device(args.device);
  const RunConfig cfg = load_run_config(args.config_path, args.seed);
  const Dataset train = obtain_split(cfg, args.data_dir, "train");
  check_input_size(cfg, train, "train");
  const fs::path stage1_path = resolve_stage1_ckpt(ckpt_path, args.out_dir);
  const Checkpoint stage1 = load_checkpoint(stage1_path);
  SegModel teacher = stage1.restore_model();
  RunEmitter emitter{args.out_dir};
  emitter.write_manifest(serialize_config(cfg), cfg.train.seed);
  const DistillResult result =
      run_iterative_distillation(teacher, train, cfg.train, &emitter, resume);
  std::cout << "best validation F1 " << result.best_f1 << " at cycle " << result.best_cycle
            << ", epoch " << result.best_epoch << " (" << result.stage << ")\n";

  // Held-out reporting only; the returned snapshot was selected on the
  // validation split, never on this test set.
  const Dataset test = obtain_split(cfg, args.data_dir, "test");
  check_input_size(cfg, test, "test");
  evaluate_and_write(teacher, test, cfg.train.metrics, emitter.path("teacher-metrics.csv"),
                     "stage-1 teacher on test");
  evaluate_and_write(result.model, test, cfg.train.metrics, emitter.path("metrics.csv"),
                     "distilled student on test");
  return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& ckpt_path, const std::string& split,
                 std::optional<double> threshold) {
  check_device(args.device);
  RunConfig cfg = load_run_config(args.config_path, args.seed);
  if (threshold.has_value()) cfg.train.metrics.threshold = *threshold;
  cfg.train.metrics.validate();
  const Checkpoint ckpt = load_checkpoint_or_die(ckpt_path, "pass --ckpt");
  const SegModel model = ckpt.restore_model();
  const Dataset data = obtain_split(cfg, args.data_dir, split);
  check_input_size(cfg, data, split);
  fs::create_directories(args.out_dir);
  evaluate_and_write(model, data, cfg.train.metrics, fs::path(args.out_dir) / "metrics.csv",
                     ckpt.stage + " on " + split);
  return 0;
}

std::vector<double> parse_threshold_list(const std::string& text) {
  if (text.empty()) {
    std::vector<double> grid;
    for (int i = 1; i <= 19; ++i) grid.push_back(0.05 * i);
    return grid;
  }
  std::vector<double> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stod(tok));
  }
  if (out.empty()) throw ConfigError("--thresholds produced an empty list");
  return out;
}

int cmd_report_sweep(const CommonArgs& args, const std::string& ckpt_path, const std::string& split,
                     const std::string& thresholds_text) {
  check_device(args.device);
  RunConfig cfg = load_run_config(args.config_path, args.seed);
  const Checkpoint ckpt = load_checkpoint_or_die(ckpt_path, "pass --ckpt");
  const SegModel model = ckpt.restore_model();
  const Dataset data = obtain_split(cfg, args.data_dir, split);
  check_input_size(cfg, data, split);
  const std::vector<double> thresholds = parse_threshold_list(thresholds_text);

  // Forward passes are shared across thresholds: maps are computed once and
  // keyed by the patch's pixel storage.
  std::unordered_map<const float*, ProbMap> cache;
  const MapProvider provider = [&](const Tensor& pixels) {
    auto it = cache.find(pixels.data());
    if (it == cache.end()) {
      it = cache.emplace(pixels.data(), model.forward(pixels).fused).first;
    }
    return it->second;
  };

  fs::create_directories(args.out_dir);
  std::ofstream csv(fs::path(args.out_dir) / "sweep.csv");
  if (!csv) throw IoError("cannot write sweep.csv in " + args.out_dir);
  csv << "threshold,mean_f1,mean_iou,mean_hd_pos\n";
  PlotSeries f1_series{"F1", {}, {}, {}}, iou_series{"IoU", {}, {}, {}};
  for (double t : thresholds) {
    MetricsConfig mcfg = cfg.train.metrics;
    mcfg.threshold = t;
    mcfg.validate();
    const MetricsReport rep = evaluate_view(data.eval_view(), provider, mcfg);
    csv << t << ',' << rep.mean_f1 << ',' << rep.mean_iou << ',';
    if (rep.mean_hd_pos.has_value()) csv << *rep.mean_hd_pos;
    csv << '\n';
    f1_series.x.push_back(t);
    f1_series.y.push_back(rep.mean_f1);
    iou_series.x.push_back(t);
    iou_series.y.push_back(rep.mean_iou);
  }
  PlotSpec spec;
  spec.title = "binarization threshold sweep";
  spec.xlabel = "threshold";
  spec.ylabel = "mean score";
  write_svg_line_plot(fs::path(args.out_dir) / "sweep.svg", spec, {f1_series, iou_series});
  std::cout << "wrote sweep.csv and sweep.svg to " << args.out_dir << "\n";
  return 0;
}

int cmd_report_curves(const CommonArgs& args, const std::vector<std::string>& runs,
                      const std::vector<std::string>& series_args, const std::string& label) {
  std::vector<SeriesInput> inputs;
  for (const std::string& spec : series_args) {
    const size_t eq = spec.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--series expects LABEL=RUNDIR[,RUNDIR...], got \"" + spec + "\"");
    }
    SeriesInput input;
    input.label = spec.substr(0, eq);
    std::stringstream ss(spec.substr(eq + 1));
    std::string dir;
    while (std::getline(ss, dir, ',')) {
      if (!dir.empty()) input.runs.emplace_back(dir);
    }
    if (input.runs.empty()) throw ConfigError("--series \"" + input.label + "\" lists no runs");
    inputs.push_back(std::move(input));
  }
  if (!runs.empty()) {
    SeriesInput input;
    input.label = label;
    for (const std::string& dir : runs) input.runs.emplace_back(dir);
    inputs.push_back(std::move(input));
  }
  if (inputs.empty()) {
    throw ConfigError("report needs run directories (positional) or --series entries");
  }
  write_curve_report(args.out_dir, inputs, "distillation progress");
  return 0;
}

// ---------------------------------------------------------------------------
// ablate

struct Arm {
  std::string name;
  std::function<void(RunConfig&)> tweak;  // applied on top of the base config
};

std::vector<Arm> arms_for_study(const std::string& study) {
  if (study == "structure") {
    return {{"structure-fusion", [](RunConfig&) {}},
            {"structure-a",
             [](RunConfig& c) { c.train.distill_structure = DistillStructure::kBlockToBlock; }},
            {"structure-b",
             [](RunConfig& c) { c.train.distill_structure = DistillStructure::kOutputOnly; }}};
  }
  if (study == "switch") {
    return {{"switch-on", [](RunConfig&) {}},
            {"switch-off", [](RunConfig& c) { c.train.role_switch = false; }}};
  }
  if (study == "a-sweep") {
    std::vector<Arm> arms;
    for (double a : {0.0, 0.1, 0.25, 0.5, 1.0, 5.0}) {
      std::ostringstream name;
      name << "a-" << a;
      arms.push_back({name.str(), [a](RunConfig& c) { c.train.loss.a = a; }});
    }
    return arms;
  }
  throw ConfigError("unknown study \"" + study + "\" (expected structure, switch, a-sweep, all)");
}

struct ArmOutcome {
  std::string study, arm;
  int repeat = 0;
  double test_f1 = 0.0, test_iou = 0.0;
  std::optional<double> test_hd;
  double best_val_f1 = 0.0;
};

int cmd_ablate(const CommonArgs& args, const std::string& study_arg,
               std::optional<int> repeats_arg) {
  check_device(args.device);
  const RunConfig base = load_run_config(args.config_path, args.seed);
  const int repeats = repeats_arg.value_or(base.repeats);
  if (repeats < 1) throw ConfigError("--repeats must be at least 1");
  const std::vector<std::string> studies =
      study_arg == "all" ? std::vector<std::string>{"structure", "switch", "a-sweep"}
                         : std::vector<std::string>{study_arg};
  for (const std::string& s : studies) arms_for_study(s);  // validate the name up front

  const fs::path out(args.out_dir);
  fs::create_directories(out);

  const Dataset train = obtain_split(base, args.data_dir, "train");
  const Dataset test = obtain_split(base, args.data_dir, "test");
  check_input_size(base, train, "train");
  check_input_size(base, test, "test");

  // Stage 1 depends only on the repeat seed, so each repeat's teacher is
  // trained once and shared across every arm and study.
  std::vector<Checkpoint> teachers;
  for (int r = 0; r < repeats; ++r) {
    RunConfig cfg = base;
    cfg.train.seed = base.train.seed + static_cast<uint64_t>(r);
    const fs::path dir = out / ("stage1-r" + std::to_string(r));
    const fs::path ckpt_path = dir / "ckpt-stage1.bin";
    if (fs::exists(ckpt_path)) {
      std::cout << "[stage1 r" << r << "] reusing " << ckpt_path.string() << "\n";
      teachers.push_back(load_checkpoint(ckpt_path));
      continue;
    }
    std::cout << "[stage1 r" << r << "] training MIL teacher (seed " << cfg.train.seed << ")\n";
    RunEmitter emitter{dir};
    emitter.write_manifest(serialize_config(cfg), cfg.train.seed);
    SegModel model = build_model(cfg);
    train_mil_stage(model, train, cfg.train, &emitter);
    fit_fusion_weights(model, train, cfg.train, &emitter);
    const Checkpoint ckpt = Checkpoint::from_model(model, "stage1");
    save_checkpoint(ckpt_path, ckpt);
    teachers.push_back(ckpt);
  }

  std::vector<ArmOutcome> outcomes;
  std::map<std::string, std::map<std::string, std::vector<fs::path>>> study_runs;
  for (const std::string& study : studies) {
    for (const Arm& arm : arms_for_study(study)) {
      for (int r = 0; r < repeats; ++r) {
        RunConfig cfg = base;
        cfg.train.seed = base.train.seed + static_cast<uint64_t>(r);
        arm.tweak(cfg);
        const fs::path dir = out / (arm.name + "-r" + std::to_string(r));
        study_runs[study][arm.name].push_back(dir);

        ArmOutcome outcome;
        outcome.study = study;
        outcome.arm = arm.name;
        outcome.repeat = r;
        const fs::path done_marker = dir / "metrics.csv";
        if (!fs::exists(done_marker)) {
          std::cout << "[" << study << "] " << arm.name << " r" << r << "\n";
          RunEmitter emitter{dir};
          emitter.write_manifest(serialize_config(cfg), cfg.train.seed);
          SegModel teacher = teachers[r].restore_model();
          const DistillResult result =
              run_iterative_distillation(teacher, train, cfg.train, &emitter);
          outcome.best_val_f1 = result.best_f1;
          const MetricsReport rep = evaluate_and_write(result.model, test, cfg.train.metrics,
                                                       done_marker, arm.name + " r" +
                                                       std::to_string(r) + " test");
          outcome.test_f1 = rep.mean_f1;
          outcome.test_iou = rep.mean_iou;
          outcome.test_hd = rep.mean_hd_pos;
        } else {
          std::cout << "[" << study << "] " << arm.name << " r" << r << " already done, reusing\n";
          // Recover the summary numbers from the stored per-run artifacts.
          const std::vector<EpochRow> rows = read_epochs_csv(dir / "epochs.csv");
          for (const EpochRow& row : rows) {
            if (row.has_val) outcome.best_val_f1 = std::max(outcome.best_val_f1, row.val_f1);
          }
          std::ifstream in(done_marker);
          std::string line;
          while (std::getline(in, line)) {
            if (line.rfind("summary-mean,", 0) != 0) continue;
            std::stringstream ss(line);
            std::string tok;
            std::vector<std::string> f;
            while (std::getline(ss, tok, ',')) f.push_back(tok);
            while (f.size() < 5) f.emplace_back();
            outcome.test_f1 = std::stod(f[2]);
            outcome.test_iou = std::stod(f[3]);
            if (!f[4].empty()) outcome.test_hd = std::stod(f[4]);
          }
        }
        outcomes.push_back(std::move(outcome));
      }
    }
  }

  std::ofstream summary(out / "summary.csv");
  if (!summary) throw IoError("cannot write summary.csv in " + out.string());
  summary << "study,arm,repeat,test_f1,test_iou,test_hd_pos,best_val_f1\n";
  for (const ArmOutcome& o : outcomes) {
    summary << o.study << ',' << o.arm << ',' << o.repeat << ',' << o.test_f1 << ',' << o.test_iou
            << ',';
    if (o.test_hd.has_value()) summary << *o.test_hd;
    summary << ',' << o.best_val_f1 << '\n';
  }

  std::ofstream agg(out / "summary-agg.csv");
  agg << "study,arm,mean_test_f1,std_test_f1,mean_test_iou,std_test_iou,repeats\n";
  for (const std::string& study : studies) {
    for (const Arm& arm : arms_for_study(study)) {
      std::vector<double> f1s, ious;
      for (const ArmOutcome& o : outcomes) {
        if (o.study == study && o.arm == arm.name) {
          f1s.push_back(o.test_f1);
          ious.push_back(o.test_iou);
        }
      }
      auto mean_of = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / double(v.size());
      };
      auto std_of = [&](const std::vector<double>& v, double m) {
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / double(v.size()));
      };
      const double mf = mean_of(f1s), mi = mean_of(ious);
      agg << study << ',' << arm.name << ',' << mf << ',' << std_of(f1s, mf) << ',' << mi << ','
          << std_of(ious, mi) << ',' << f1s.size() << '\n';
      std::cout << "[" << study << "] " << arm.name << ": test F1 " << mf << " +- "
                << std_of(f1s, mf) << ", IoU " << mi << " over " << f1s.size() << " repeats\n";
    }
  }

  for (const std::string& study : studies) {
    std::vector<SeriesInput> inputs;
    for (const auto& [arm_name, dirs] : study_runs[study]) {
      inputs.push_back({arm_name, dirs});
    }
    write_curve_report(out / ("plot-" + study), inputs, study + " ablation");
  }
  return 0;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Iterative fusion-knowledge distillation for MIL segmentation"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string ckpt_path, split = "test", thresholds_text, study = "all", label = "runs";
  std::vector<std::string> run_dirs, series_args;
  std::optional<double> threshold;
  std::optional<int> repeats;
  bool resume = false, sweep = false;

  auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", common.config_path, "JSON config file (omit for defaults)");
    auto* out = sub->add_option("--out", common.out_dir, "output directory");
    if (needs_out) out->required();
    sub->add_option("--data", common.data_dir, "dataset folder (overrides synthetic data)");
    sub->add_option("--seed", common.seed, "seed override for training and data synthesis");
    sub->add_option("--device", common.device, "compute device (cpu)");
  };

  auto* gen = app.add_subcommand("generate-data", "synthesize a train/ + test/ patch corpus");
  add_common(gen, true);

  auto* mil = app.add_subcommand("train-mil", "stage 1: MIL teacher on naive masks");
  add_common(mil, true);

  auto* fuse = app.add_subcommand("fit-fusion", "stage 1b: fit fusion weights of a frozen teacher");
  add_common(fuse, true);
  fuse->add_option("--ckpt", ckpt_path, "input checkpoint (default: OUT/ckpt-mil.bin)");

  auto* dist = app.add_subcommand("distill", "stage 2: iterative distillation with role switches");
  add_common(dist, true);
  dist->add_option("--ckpt", ckpt_path, "stage-1 checkpoint (default: OUT/ckpt-stage1.bin)");
  dist->add_flag("--resume", resume, "continue an interrupted run from its resume file");

  auto* eval = app.add_subcommand("evaluate", "score a checkpoint against ground-truth masks");
  add_common(eval, true);
  eval->add_option("--ckpt", ckpt_path, "checkpoint to evaluate")->required();
  eval->add_option("--split", split, "dataset split to score (default test)");
  eval->add_option("--threshold", threshold, "binarization threshold override");

  auto* rep = app.add_subcommand("report", "plot best-per-cycle curves or sweep thresholds");
  add_common(rep, true);
  rep->add_option("runs", run_dirs, "run directories treated as repeats of one series");
  rep->add_option("--series", series_args, "extra series as LABEL=RUNDIR[,RUNDIR...]");
  rep->add_option("--label", label, "label for the positional run series");
  rep->add_flag("--sweep", sweep, "threshold-sweep mode (needs --ckpt)");
  rep->add_option("--ckpt", ckpt_path, "checkpoint for --sweep");
  rep->add_option("--split", split, "dataset split for --sweep (default test)");
  rep->add_option("--thresholds", thresholds_text, "comma list for --sweep (default 0.05..0.95)");

  auto* abl = app.add_subcommand("ablate", "repeat studies: structure / switch / a-sweep");
  add_common(abl, true);
  abl->add_option("--study", study, "structure, switch, a-sweep, or all");
  abl->add_option("--repeats", repeats, "repeat count override");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) return cmd_generate_data(common);
  if (mil->parsed()) return cmd_train_mil(common);
  if (fuse->parsed()) return cmd_fit_fusion(common, ckpt_path);
  if (dist->parsed()) return cmd_distill(common, ckpt_path, resume);
  if (eval->parsed()) return cmd_evaluate(common, ckpt_path, split, threshold);
  if (rep->parsed()) {
    if (sweep) return cmd_report_sweep(common, ckpt_path, split, thresholds_text);
    return cmd_report_curves(common, run_dirs, series_args, label);
  }
  if (abl->parsed()) return cmd_ablate(common, study, repeats);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
