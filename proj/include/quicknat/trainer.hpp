#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "quicknat/loss.hpp"
#include "quicknat/multiview.hpp"
#include "quicknat/network.hpp"

namespace quicknat {

/// SGD-with-momentum state: one velocity per parameter tensor, in visit order.
template <typename T>
struct OptimizerState {
  double momentum = 0.95;
  double weight_decay = 1e-4;
  double learning_rate = 0.1;
  std::vector<Tensor<T>> velocity;
};

/// v <- mu*v - lr*(g + wd*w); w <- w + v. Weight decay is skipped for biases
/// and batch-norm affine parameters. Throws NumericalError on non-finite gradients.
template <typename T>
void sgd_momentum_step(std::span<Parameter<T>* const> params, std::span<const Tensor<T>> grads,
                       OptimizerState<T>& state);

template <typename T>
void sgd_momentum_step(NetworkParameters<T>& params, std::span<const Tensor<T>> grads, OptimizerState<T>& state);

enum class Stage { pretrain, finetune };

std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view name);

/// Step learning-rate schedule lr0 * factor^-floor(epoch / period) plus the
/// plateau rule used to stop a stage.
struct Schedule {
  Stage stage = Stage::pretrain;
  double initial_lr = 0.1;
  double decay_factor = 10.0;
  int decay_period = 10;
  int patience = 5;
  double min_relative_improvement = 1e-3;
  int max_epochs = 30;

  static Schedule pretrain() { return {Stage::pretrain, 0.1, 10.0, 10, 5, 1e-3, 30}; }
  static Schedule finetune() { return {Stage::finetune, 0.01, 10.0, 5, 5, 1e-3, 30}; }
  static Schedule for_stage(Stage stage) { return stage == Stage::pretrain ? pretrain() : finetune(); }

  double learning_rate(int epoch) const;
};

/// 2-D training slices with their labels, stacked along the batch axis.
template <typename T>
struct SliceDataset {
  Tensor<T> images;    ///< [S,1,H,W]
  LabelTensor labels;  ///< [S,H,W]
  Index num_classes = 0;

  Index size() const { return images.empty() ? 0 : images.dim(0); }
  SliceDataset subset(std::span<const Index> rows) const;
  /// Concatenates two datasets with matching slice size and label space.
  static SliceDataset concat(const SliceDataset& a, const SliceDataset& b);
};

/// The slices of one volume along `view` as a training set. Labels must lie
/// in [0, num_classes).
template <typename T>
SliceDataset<T> slice_dataset(const IntensityVolume& image, const LabelVolume& labels, View view, Index num_classes);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  Index batch_size = 4;
  Schedule schedule;
  /// Overrides schedule.initial_lr when set.
  std::optional<double> learning_rate;
  double momentum = 0.95;
  double weight_decay = 1e-4;
  /// When non-empty, the best-validation checkpoint is written here.
  std::filesystem::path checkpoint_path;
  /// When non-empty, the loss history CSV is written here after every epoch.
  std::filesystem::path history_path;
  View view = View::coronal;
};

struct TrainRun {
  std::uint64_t seed = 0;
  Index batch_size = 0;
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  std::vector<std::filesystem::path> checkpoints;
};

/// "epoch,train_loss,val_loss,lr" with one row per epoch.
void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

/// Trains `params` in place until the validation loss plateaus or the schedule's
/// epoch cap is hit. On return `params` hold the best-validation weights.
template <typename T>
TrainRun train_stage(NetworkParameters<T>& params, const SliceDataset<T>& train, const SliceDataset<T>& validation,
                     const TrainConfig& config, OptimizerState<T>* state = nullptr);

/// Mean composite loss over a dataset in eval mode, with weights from `freq`.
template <typename T>
double evaluate_dataset_loss(NetworkParameters<T>& params, const SliceDataset<T>& data, const ClassFrequencies& freq,
                             Index batch_size);

struct TwoStageConfig {
  TrainConfig pretrain;
  TrainConfig finetune;
};

template <typename T>
struct TwoStageResult {
  TrainRun pretrain_run;
  TrainRun finetune_run;
  NetworkParameters<T> pretrained;
  NetworkParameters<T> finetuned;
};

/// Pre-trains on auxiliary labels, then continues from that model on the manual set.
template <typename T>
TwoStageResult<T> two_stage(NetworkParameters<T> initial, const SliceDataset<T>& aux_train,
                            const SliceDataset<T>& aux_val, const SliceDataset<T>& manual_train,
                            const SliceDataset<T>& manual_val, const TwoStageConfig& config);

}  // namespace quicknat
