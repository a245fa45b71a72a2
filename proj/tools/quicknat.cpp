// Command-line front end: phantom generation, training, segmentation and evaluation.

#include <CLI11.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "quicknat/checkpoint.hpp"
#include "quicknat/config.hpp"
#include "quicknat/fileio.hpp"
#include "quicknat/gradsuite.hpp"
#include "quicknat/log.hpp"
#include "quicknat/metrics.hpp"
#include "quicknat/multiview.hpp"
#include "quicknat/nifti.hpp"
#include "quicknat/phantom.hpp"
#include "quicknat/remap.hpp"
#include "quicknat/trainer.hpp"

namespace fs = std::filesystem;
using namespace quicknat;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Progress summaries on stdout; --quiet suppresses them.
std::ostream& status() {
  static std::ostream null(nullptr);
  return log_level() >= LogLevel::error ? null : std::cout;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(item);
  return out;
}

std::vector<View> parse_views(const std::string& list) {
  std::vector<View> views;
  for (const std::string& name : split(list, ',')) {
    try {
      const View v = parse_view(name);
      for (View seen : views) {
        if (seen == v) throw UsageError("view '" + name + "' listed twice");
      }
      views.push_back(v);
    } catch (const std::invalid_argument&) {
      throw UsageError("unknown view '" + name + "' (coronal, axial or sagittal)");
    }
  }
  if (views.empty()) throw UsageError("--views needs at least one view");
  return views;
}

AggregationWeights parse_lambda(const std::string& list) {
  const std::vector<std::string> parts = split(list, ',');
  if (parts.size() != 3) throw UsageError("--lambda takes three weights: axial,coronal,sagittal");
  std::array<double, 3> w{};
  for (std::size_t i = 0; i < 3; ++i) {
    try {
      std::size_t used = 0;
      w[i] = std::stod(parts[i], &used);
      if (used != parts[i].size()) throw std::invalid_argument(parts[i]);
    } catch (const std::exception&) {
      throw UsageError("--lambda: '" + parts[i] + "' is not a number");
    }
  }
  AggregationWeights weights{w[0], w[1], w[2]};
  try {
    weights.validate();
  } catch (const std::exception& e) {
    throw UsageError(std::string("--lambda: ") + e.what());
  }
  return weights;
}

fs::path checkpoint_in(const fs::path& model, View view) { return model / (std::string(to_string(view)) + ".ckpt"); }

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw DataError(what + " not found: " + path.string());
}

// ---- phantom ---------------------------------------------------------------

struct PhantomArgs {
  std::uint64_t seed = 0;
  Index size = 64;
  double corruption = 0.0;
  double noise = 0.1;
  std::string out;
};

int run_phantom(const PhantomArgs& a) {
  PhantomSpec spec;
  spec.seed = a.seed;
  spec.size = a.size;
  spec.noise_sd = a.noise;
  const Phantom p = generate_phantom(spec);
  fs::create_directories(a.out);
  const std::string stem = "phantom_" + std::to_string(a.seed);
  write_volume(p.image, fs::path(a.out) / (stem + "_image.nii"));
  write_volume(p.labels, fs::path(a.out) / (stem + "_labels.nii"));
  if (a.corruption > 0.0) {
    write_volume(corrupt_labels(p.labels, a.corruption, a.seed), fs::path(a.out) / (stem + "_aux.nii"));
  }
  status() << "wrote " << stem << " (" << a.size << "^3, " << kPhantomClasses << " classes) to " << a.out << '\n';
  return 0;
}

// ---- pretrain / finetune ---------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string views;
  std::string out;
};

template <typename T>
SliceDataset<T> phantom_slices(const RunConfig& rc, std::uint64_t first_seed, Index count, double corruption, View view,
                               const LabelMerge& merge) {
  SliceDataset<T> out;
  for (Index i = 0; i < count; ++i) {
    PhantomSpec spec = rc.phantom;
    spec.classes = rc.classes;
    spec.seed = first_seed + static_cast<std::uint64_t>(i);
    const Phantom p = generate_phantom(spec);
    LabelVolume labels = corruption > 0.0 ? corrupt_labels(p.labels, corruption, spec.seed) : p.labels;
    if (view == View::sagittal) labels = sagittal_merge_labels(labels, merge);
    out = SliceDataset<T>::concat(out, slice_dataset<T>(p.image, labels, view, merge.merged_classes));
  }
  return out;
}

template <typename T>
void train_view(RunConfig rc, View view, Stage stage) {
  const LabelMerge merge = view == View::sagittal ? phantom_sagittal_merge(rc.classes) : LabelMerge::identity(rc.classes);
  rc.train.view = view;
  const std::string name(to_string(view));
  rc.train.checkpoint_path = rc.out_dir / (name + ".ckpt");
  rc.train.history_path = rc.out_dir / (name + "_history.csv");

  NetworkParameters<T> params;
  if (stage == Stage::finetune) {
    const fs::path init = fs::is_directory(rc.init) ? checkpoint_in(rc.init, view) : rc.init;
    require_file(init, "initial checkpoint");
    Checkpoint<T> ckpt = load_checkpoint<T>(init);
    if (ckpt.view != view) {
      throw DataError("checkpoint " + init.string() + " holds a " + std::string(to_string(ckpt.view)) + " network");
    }
    if (ckpt.params.config.num_classes != merge.merged_classes) {
      throw DataError("label-space mismatch: checkpoint " + init.string() + " predicts " +
                      std::to_string(ckpt.params.config.num_classes) + " classes, the " + name + " data has " +
                      std::to_string(merge.merged_classes));
    }
    params = std::move(ckpt.params);
  } else {
    NetworkConfig net = rc.network();
    net.num_classes = merge.merged_classes;
    params = init_params<T>(net, rc.train.seed);
  }

  const std::uint64_t val_seed = rc.data_seed + static_cast<std::uint64_t>(rc.train_phantoms);
  const SliceDataset<T> train =
      phantom_slices<T>(rc, rc.data_seed, rc.train_phantoms, rc.corruption_rate, view, merge);
  const SliceDataset<T> val = phantom_slices<T>(rc, val_seed, rc.val_phantoms, rc.corruption_rate, view, merge);
  atomic_write(rc.out_dir / (name + ".cfg"), [&](std::ostream& os) { os << to_text(rc); });
  const TrainRun run = train_stage(params, train, val, rc.train);
  status() << name << ": " << run.history.size() << " epochs, best validation loss " << run.best_val_loss
            << " at epoch " << run.best_epoch << " -> " << rc.train.checkpoint_path.string() << '\n';
}

int run_train(const TrainArgs& a, Stage stage) {
  RunConfig rc = a.config.empty() ? default_run_config(stage) : load_run_config(a.config, stage);
  if (a.seed) rc.train.seed = *a.seed;
  if (!a.out.empty()) rc.out_dir = a.out;
  if (rc.out_dir.empty()) throw UsageError(std::string(to_string(stage)) + " needs --out DIR (or 'out' in the config)");
  if (stage == Stage::finetune && rc.init.empty()) {
    throw UsageError("finetune needs 'init' in the config: a checkpoint directory or file");
  }
  const std::vector<View> views = a.views.empty() ? std::vector<View>{rc.train.view} : parse_views(a.views);
  if (stage == Stage::finetune && views.size() > 1 && !fs::is_directory(rc.init)) {
    throw UsageError("finetune of several views needs 'init' to be a checkpoint directory");
  }
  rc.out_dir = fs::absolute(rc.out_dir);
  if (!rc.init.empty()) rc.init = fs::absolute(rc.init);
  fs::create_directories(rc.out_dir);
  for (View v : views) {
    if (rc.float64) {
      train_view<double>(rc, v, stage);
    } else {
      train_view<float>(rc, v, stage);
    }
  }
  return 0;
}

// ---- segment / consistency -------------------------------------------------

struct SegmentArgs {
  std::string image;
  std::string model;
  std::string views = "coronal,axial,sagittal";
  std::string lambda = "0.4,0.4,0.2";
  std::string out;
  Index runs = 2;
};

ViewEnsemble<float> load_ensemble(const fs::path& model, const std::vector<View>& views) {
  ViewEnsemble<float> nets;
  Index full_classes = 0;
  for (View v : views) {
    const fs::path path = checkpoint_in(model, v);
    require_file(path, "checkpoint");
    Checkpoint<float> ckpt = load_checkpoint<float>(path);
    if (ckpt.view != v) throw DataError("checkpoint " + path.string() + " holds a " + std::string(to_string(ckpt.view)) + " network");
    ViewNetwork<float> net(v, std::move(ckpt.params));
    if (v != View::sagittal) full_classes = net.num_classes();
    if (v == View::coronal) nets.coronal = std::move(net);
    if (v == View::axial) nets.axial = std::move(net);
    if (v == View::sagittal) nets.sagittal = std::move(net);
  }
  if (nets.sagittal) {
    const Index sag = nets.sagittal->num_classes();
    if (full_classes == 0) full_classes = sag == kQuickNatSagittalClasses ? kQuickNatClasses : kPhantomClasses;
    nets.sagittal_merge = full_classes == kQuickNatClasses ? LabelMerge::quicknat() : phantom_sagittal_merge(full_classes);
    if (nets.sagittal_merge.merged_classes != sag) {
      throw DataError("sagittal checkpoint predicts " + std::to_string(sag) + " classes; expected " +
                      std::to_string(nets.sagittal_merge.merged_classes) + " after merging " +
                      std::to_string(full_classes));
    }
  }
  return nets;
}

LabelVolume segment_once(const SegmentArgs& a, const IntensityVolume& image) {
  const std::vector<View> views = parse_views(a.views);
  const AggregationWeights weights = parse_lambda(a.lambda);
  ViewEnsemble<float> nets = load_ensemble(a.model, views);
  LabelVolume labels = segment_volume(nets, image, weights);
  labels.spacing = image.spacing;
  return labels;
}

int run_segment(const SegmentArgs& a) {
  const std::vector<View> views = parse_views(a.views);
  parse_lambda(a.lambda);
  for (View v : views) require_file(checkpoint_in(a.model, v), "checkpoint");
  require_file(a.image, "input volume");
  const IntensityVolume image = read_intensity_volume(a.image);
  const LabelVolume labels = segment_once(a, image);
  fs::create_directories(a.out);
  const fs::path dest = fs::path(a.out) / "segmentation.nii";
  write_volume(labels, dest);
  status() << "wrote " << dest.string() << '\n';
  return 0;
}

// Segments the same volume repeatedly with fresh networks and reports the
// volume distance of every structure between the first and each later run.
int run_consistency(const SegmentArgs& a) {
  if (a.runs < 2) throw UsageError("--runs must be at least 2");
  const std::vector<View> views = parse_views(a.views);
  for (View v : views) require_file(checkpoint_in(a.model, v), "checkpoint");
  require_file(a.image, "input volume");
  const IntensityVolume image = read_intensity_volume(a.image);
  std::vector<LabelVolume> runs;
  for (Index r = 0; r < a.runs; ++r) runs.push_back(segment_once(a, image));

  std::set<std::int32_t> labels;
  for (const auto& run : runs) {
    for (std::int32_t l : run.voxels.values()) {
      if (l != 0) labels.insert(l);
    }
  }
  std::ostringstream csv;
  csv << "run,label,volume_ml,reference_volume_ml,volume_distance\n";
  double worst = 0.0;
  for (Index r = 1; r < a.runs; ++r) {
    for (std::int32_t l : labels) {
      const double ref = volume_of(runs[0], l), v = volume_of(runs[static_cast<std::size_t>(r)], l);
      const double d = volume_distance(v, ref);
      worst = std::max(worst, d);
      csv << r << ',' << l << ',' << v << ',' << ref << ',' << d << '\n';
    }
  }
  std::cout << csv.str();
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    atomic_write(fs::path(a.out) / "consistency.csv", [&](std::ostream& os) { os << csv.str(); });
  }
  std::cerr << "max volume distance across " << a.runs << " runs: " << worst << '\n';
  return 0;
}

// ---- evaluate --------------------------------------------------------------

struct EvaluateArgs {
  std::string predicted;
  std::string truth;
  std::string scheme = "quicknat";
  std::string remap;
  std::string subject;
  std::string out;
};

int run_evaluate(const EvaluateArgs& a) {
  LabelScheme scheme;
  try {
    scheme = parse_scheme(a.scheme);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  const RemapTable table = a.remap.empty() ? RemapTable::builtin() : RemapTable::load(a.remap);
  require_file(a.predicted, "predicted volume");
  require_file(a.truth, "reference volume");
  const LabelVolume pred = read_label_volume(a.predicted);
  const RemapResult truth = remap_labels(read_label_volume(a.truth), table, scheme);
  if (pred.dims() != truth.labels.dims()) throw DataError("predicted and reference volumes differ in size");
  if (truth.unmapped_voxels > 0) {
    std::cerr << truth.unmapped_voxels << " reference voxels carried unlisted ids and were set to background\n";
  }
  MetricsReport report;
  const std::string subject = a.subject.empty() ? fs::path(a.predicted).stem().string() : a.subject;
  report.rows = compare_segmentations(subject, pred, truth.labels, table.structures);
  report.statistics.push_back({"mean_dice", report.mean_dice(), std::nullopt, std::nullopt, std::nullopt});
  std::cout << report.to_csv();
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    report.write_csv(fs::path(a.out) / "report.csv");
    report.write_json(fs::path(a.out) / "report.json");
  }
  return 0;
}

// ---- gradcheck -------------------------------------------------------------

int run_gradcheck(std::uint64_t seed) {
  const std::vector<GradSuiteEntry> suite = gradient_suite(seed);
  std::printf("%-20s %12s %10s %8s  %s\n", "op", "max_rel_err", "tolerance", "skipped", "status");
  for (const auto& e : suite) {
    std::printf("%-20s %12.3e %10.0e %4ld/%-4ld %s\n", e.name.c_str(), e.report.max_relative_error(),
                e.report.tolerance, static_cast<long>(e.report.skipped()), static_cast<long>(e.report.probes()),
                e.report.passed() ? "ok" : "FAIL");
  }
  const bool ok = all_passed(suite);
  std::printf("%s\n", ok ? "all gradients within tolerance" : "gradient check FAILED");
  return ok ? 0 : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quicknat: desk-scale brain segmentation pipeline on synthetic phantoms"};
  app.require_subcommand(1);
  bool quiet = false, verbose = false;
  app.add_flag("-q,--quiet", quiet, "Only print errors");
  app.add_flag("-v,--verbose", verbose, "Print per-epoch progress");

  PhantomArgs phantom;
  auto* cmd_phantom = app.add_subcommand("phantom", "Write a synthetic phantom (image, labels, optional auxiliary labels)");
  cmd_phantom->add_option("--seed", phantom.seed, "Phantom seed");
  cmd_phantom->add_option("--size", phantom.size, "Grid size per axis")->check(CLI::Range(16, 512));
  cmd_phantom->add_option("--corruption", phantom.corruption, "Also write auxiliary labels at this flip rate")
      ->check(CLI::Range(0.0, 0.5));
  cmd_phantom->add_option("--noise", phantom.noise, "Noise SD")->check(CLI::Range(0.0, 10.0));
  cmd_phantom->add_option("--out", phantom.out, "Output directory")->required();

  TrainArgs pretrain, finetune;
  auto add_train = [&](const char* name, const char* help, TrainArgs& args) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("--config", args.config, "Run config (key = value)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", args.seed, "Overrides the config seed");
    cmd->add_option("--views", args.views, "Comma-separated views to train (default: the config view)");
    cmd->add_option("--out", args.out, "Output directory (overrides the config)");
    return cmd;
  };
  auto* cmd_pretrain = add_train("pretrain", "Train view networks on phantoms with auxiliary labels", pretrain);
  auto* cmd_finetune = add_train("finetune", "Continue training from checkpoints on clean labels", finetune);

  SegmentArgs segment, consistency;
  auto add_segment = [&](const char* name, const char* help, SegmentArgs& args) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("image", args.image, "Intensity volume (NIfTI-1)")->required();
    cmd->add_option("--model", args.model, "Directory holding <view>.ckpt")->required();
    cmd->add_option("--views", args.views, "Comma-separated views to aggregate");
    cmd->add_option("--lambda", args.lambda, "Aggregation weights axial,coronal,sagittal");
    return cmd;
  };
  auto* cmd_segment = add_segment("segment", "Segment a volume with the multi-view ensemble", segment);
  cmd_segment->add_option("--out", segment.out, "Output directory")->required();
  auto* cmd_consistency = add_segment("consistency", "Segment repeatedly and report per-structure volume distance", consistency);
  cmd_consistency->add_option("--runs", consistency.runs, "Number of runs");
  cmd_consistency->add_option("--out", consistency.out, "Directory for consistency.csv");

  EvaluateArgs evaluate;
  auto* cmd_evaluate = app.add_subcommand("evaluate", "Dice and volume metrics of a segmentation against a reference");
  cmd_evaluate->add_option("predicted", evaluate.predicted, "Predicted label volume (QuickNAT ids)")->required();
  cmd_evaluate->add_option("truth", evaluate.truth, "Reference label volume")->required();
  cmd_evaluate->add_option("--scheme", evaluate.scheme, "Reference label scheme: quicknat, freesurfer or manual");
  cmd_evaluate->add_option("--remap", evaluate.remap, "Remap table CSV (default: bundled table)")->check(CLI::ExistingFile);
  cmd_evaluate->add_option("--subject", evaluate.subject, "Subject id in the report");
  cmd_evaluate->add_option("--out", evaluate.out, "Directory for report.csv and report.json");

  std::uint64_t grad_seed = 1;
  auto* cmd_gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op, the network and the loss");
  cmd_gradcheck->add_option("--seed", grad_seed, "Seed for the random inputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  set_log_level(quiet ? LogLevel::error : verbose ? LogLevel::info : LogLevel::warning);
  try {
    if (*cmd_phantom) return run_phantom(phantom);
    if (*cmd_pretrain) return run_train(pretrain, Stage::pretrain);
    if (*cmd_finetune) return run_train(finetune, Stage::finetune);
    if (*cmd_segment) return run_segment(segment);
    if (*cmd_consistency) return run_consistency(consistency);
    if (*cmd_evaluate) return run_evaluate(evaluate);
    if (*cmd_gradcheck) return run_gradcheck(grad_seed);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
