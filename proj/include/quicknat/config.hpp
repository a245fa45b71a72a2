#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "quicknat/network.hpp"
#include "quicknat/phantom.hpp"
#include "quicknat/trainer.hpp"

namespace quicknat {

/// A training run as read from a "key = value" text file. Blank lines and
/// everything after '#' are ignored. Every seed that influences the run is a
/// key here, so the file alone reproduces it.
struct RunConfig {
  TrainConfig train;
  Index width = 8;
  Index classes = kPhantomClasses;

  /// Phantom data: train volumes use seeds data_seed + i, validation volumes
  /// data_seed + train_phantoms + i.
  PhantomSpec phantom;
  Index train_phantoms = 4;
  Index val_phantoms = 1;
  std::uint64_t data_seed = 1000;
  /// Auxiliary-label corruption applied to training labels (0 = clean).
  double corruption_rate = 0.0;

  /// Directory receiving <view>.ckpt, <view>_history.csv and <view>.cfg.
  std::filesystem::path out_dir;
  /// Finetune starting point: a directory holding <view>.ckpt, or a single
  /// checkpoint file when one view is trained.
  std::filesystem::path init;
  /// Training precision: false trains in float32, true in float64.
  bool float64 = false;

  NetworkConfig network() const { return NetworkConfig::miniature(classes, width); }
};

/// Defaults for a stage: the stage's schedule and the desk-scale batch size.
RunConfig default_run_config(Stage stage);

/// Unknown keys and malformed values raise DataError naming the line.
/// Relative paths resolve against `base_dir`.
RunConfig parse_run_config(const std::string& text, Stage stage, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path, Stage stage);

/// Canonical text form; parse_run_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& config);

}  // namespace quicknat
