#include "quicknat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "quicknat/checkpoint.hpp"
#include "quicknat/fileio.hpp"
#include "quicknat/log.hpp"

namespace quicknat {

template <typename T>
void sgd_momentum_step(std::span<Parameter<T>* const> params, std::span<const Tensor<T>> grads,
                       OptimizerState<T>& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_momentum_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.velocity.empty()) {
    for (Parameter<T>* p : params) state.velocity.push_back(Tensor<T>::zeros_like(p->value));
  }
  if (state.velocity.size() != params.size()) {
    throw ShapeError("sgd_momentum_step: optimizer state has " + std::to_string(state.velocity.size()) +
                     " velocities for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i]->value.shape() || state.velocity[i].shape() != params[i]->value.shape()) {
      throw ShapeError("sgd_momentum_step: gradient shape " + to_string(grads[i].shape()) +
                       " does not match parameter " + to_string(params[i]->value.shape()));
    }
    if (!grads[i].all_finite()) throw NumericalError("sgd_momentum_step: non-finite gradient");
  }
  const T mu = static_cast<T>(state.momentum);
  const T lr = static_cast<T>(state.learning_rate);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    const T wd = p.kind == ParamKind::weight ? static_cast<T>(state.weight_decay) : T(0);
    auto w = p.value.array();
    auto v = state.velocity[i].array();
    v = mu * v - lr * (grads[i].array() + wd * w);
    w += v;
  }
}

namespace {

template <typename T>
std::vector<Parameter<T>*> parameter_list(NetworkParameters<T>& params) {
  std::vector<Parameter<T>*> out;
  params.visit([&](const std::string&, Parameter<T>& p) { out.push_back(&p); });
  return out;
}

}  // namespace

template <typename T>
void sgd_momentum_step(NetworkParameters<T>& params, std::span<const Tensor<T>> grads, OptimizerState<T>& state) {
  const std::vector<Parameter<T>*> list = parameter_list(params);
  sgd_momentum_step<T>(std::span<Parameter<T>* const>(list), grads, state);
}

std::string_view to_string(Stage stage) { return stage == Stage::pretrain ? "pretrain" : "finetune"; }

Stage parse_stage(std::string_view name) {
  if (name == "pretrain") return Stage::pretrain;
  if (name == "finetune") return Stage::finetune;
  throw DataError("unknown training stage '" + std::string(name) + "'");
}

double Schedule::learning_rate(int epoch) const {
  if (epoch < 0) throw std::invalid_argument("learning_rate: negative epoch");
  if (decay_period <= 0) return initial_lr;
  return initial_lr * std::pow(decay_factor, -static_cast<double>(epoch / decay_period));
}

template <typename T>
SliceDataset<T> SliceDataset<T>::subset(std::span<const Index> rows) const {
  const Index h = labels.dim(1), w = labels.dim(2), plane = h * w;
  SliceDataset out{Tensor<T>({static_cast<Index>(rows.size()), 1, h, w}),
                   LabelTensor({static_cast<Index>(rows.size()), h, w}), num_classes};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Index r = rows[i];
    if (r < 0 || r >= size()) throw std::out_of_range("SliceDataset::subset: row out of range");
    std::copy_n(images.data() + r * plane, plane, out.images.data() + static_cast<Index>(i) * plane);
    std::copy_n(labels.data() + r * plane, plane, out.labels.data() + static_cast<Index>(i) * plane);
  }
  return out;
}

template <typename T>
SliceDataset<T> SliceDataset<T>::concat(const SliceDataset& a, const SliceDataset& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.num_classes != b.num_classes) {
    throw DataError("cannot concatenate slice sets with " + std::to_string(a.num_classes) + " and " +
                    std::to_string(b.num_classes) + " classes");
  }
  if (a.labels.dim(1) != b.labels.dim(1) || a.labels.dim(2) != b.labels.dim(2)) {
    throw ShapeError("cannot concatenate slice sets of different slice sizes");
  }
  const Index h = a.labels.dim(1), w = a.labels.dim(2), n = a.size() + b.size();
  SliceDataset out{Tensor<T>({n, 1, h, w}), LabelTensor({n, h, w}), a.num_classes};
  std::copy(a.images.values().begin(), a.images.values().end(), out.images.data());
  std::copy(b.images.values().begin(), b.images.values().end(), out.images.data() + a.images.size());
  std::copy(a.labels.values().begin(), a.labels.values().end(), out.labels.data());
  std::copy(b.labels.values().begin(), b.labels.values().end(), out.labels.data() + a.labels.size());
  return out;
}

template <typename T>
SliceDataset<T> slice_dataset(const IntensityVolume& image, const LabelVolume& labels, View view, Index num_classes) {
  if (image.dims() != labels.dims()) throw ShapeError("slice_dataset: image and label volumes differ in size");
  for (std::int32_t l : labels.voxels.values()) {
    if (l < 0 || l >= num_classes) {
      throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  const Tensor<float> slices = slice_volume(image.voxels, view);
  Tensor<T> images({slices.dim(0), 1, slices.dim(1), slices.dim(2)});
  for (Index i = 0; i < slices.size(); ++i) images[i] = static_cast<T>(slices[i]);
  return {std::move(images), slice_volume(labels.voxels, view), num_classes};
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  atomic_write(path, [&](std::ostream& os) {
    os << "epoch,train_loss,val_loss,lr\n" << std::setprecision(17);
    for (const EpochRecord& r : history) {
      os << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.learning_rate << '\n';
    }
  });
}

namespace {

template <typename T>
void check_dataset(const SliceDataset<T>& data, Index num_classes, const char* what) {
  if (data.size() == 0) throw DataError(std::string(what) + " set is empty");
  if (data.images.rank() != 4 || data.images.dim(1) != 1 || data.labels.rank() != 3 ||
      data.labels.dim(0) != data.images.dim(0) || data.labels.dim(1) != data.images.dim(2) ||
      data.labels.dim(2) != data.images.dim(3)) {
    throw ShapeError(std::string(what) + " set: images " + to_string(data.images.shape()) + " and labels " +
                     to_string(data.labels.shape()) + " are inconsistent");
  }
  if (data.num_classes != num_classes) {
    throw DataError(std::string(what) + " set has " + std::to_string(data.num_classes) +
                    " label classes but the network predicts " + std::to_string(num_classes));
  }
}

// Batch tensors gathered from dataset rows.
template <typename T>
struct Batch {
  Tensor<T> images;
  LabelTensor labels;
  Tensor<T> weights;
};

template <typename T>
Batch<T> gather(const SliceDataset<T>& data, const Tensor<T>& weights, std::span<const Index> rows) {
  const Index h = data.labels.dim(1), w = data.labels.dim(2), plane = h * w;
  const Index b = static_cast<Index>(rows.size());
  Batch<T> out{Tensor<T>({b, 1, h, w}), LabelTensor({b, h, w}), Tensor<T>({b, h, w})};
  for (Index i = 0; i < b; ++i) {
    const Index r = rows[static_cast<std::size_t>(i)];
    std::copy_n(data.images.data() + r * plane, plane, out.images.data() + i * plane);
    std::copy_n(data.labels.data() + r * plane, plane, out.labels.data() + i * plane);
    std::copy_n(weights.data() + r * plane, plane, out.weights.data() + i * plane);
  }
  return out;
}

template <typename T>
double batch_loss(NetworkParameters<T>& params, const Batch<T>& batch, Mode mode, std::vector<Tensor<T>>* grads) {
  Tape<T> tape;
  params.bind(tape, grads != nullptr);
  const Var x = tape.constant(batch.images);
  const ForwardResult fr = forward(tape, params, x, mode);
  const Var loss = combined_loss(tape, fr.probabilities, batch.labels, batch.weights);
  const double value = static_cast<double>(tape.value(loss)[0]);
  if (!std::isfinite(value)) throw NumericalError("training loss became non-finite");
  if (grads != nullptr) {
    tape.backward(loss);
    grads->clear();
    params.visit([&](const std::string&, Parameter<T>& p) { grads->push_back(tape.grad(p.var)); });
  }
  return value;
}

template <typename T>
double dataset_loss(NetworkParameters<T>& params, const SliceDataset<T>& data, const Tensor<T>& weights,
                    Index batch_size) {
  double total = 0.0;
  std::vector<Index> rows;
  for (Index start = 0; start < data.size(); start += batch_size) {
    rows.clear();
    for (Index r = start; r < std::min(data.size(), start + batch_size); ++r) rows.push_back(r);
    total += batch_loss<T>(params, gather(data, weights, rows), Mode::eval, nullptr) * static_cast<double>(rows.size());
  }
  return total / static_cast<double>(data.size());
}

template <typename T>
Tensor<T> dataset_weights(const SliceDataset<T>& data, const ClassFrequencies& freq) {
  return weight_map(data.labels, freq).template cast<T>();
}

}  // namespace

template <typename T>
double evaluate_dataset_loss(NetworkParameters<T>& params, const SliceDataset<T>& data, const ClassFrequencies& freq,
                             Index batch_size) {
  check_dataset(data, params.config.num_classes, "evaluation");
  return dataset_loss(params, data, dataset_weights(data, freq), std::max<Index>(1, batch_size));
}

template <typename T>
TrainRun train_stage(NetworkParameters<T>& params, const SliceDataset<T>& train, const SliceDataset<T>& validation,
                     const TrainConfig& config, OptimizerState<T>* state) {
  const Index classes = params.config.num_classes;
  check_dataset(train, classes, "training");
  check_dataset(validation, classes, "validation");
  if (config.batch_size <= 0) throw std::invalid_argument("batch size must be positive");
  if (config.schedule.max_epochs <= 0) throw std::invalid_argument("max_epochs must be positive");

  OptimizerState<T> local;
  OptimizerState<T>& opt = state != nullptr ? *state : local;
  opt.momentum = config.momentum;
  opt.weight_decay = config.weight_decay;
  Schedule schedule = config.schedule;
  if (config.learning_rate) schedule.initial_lr = *config.learning_rate;

  const ClassFrequencies freq = class_frequencies(std::span<const LabelTensor>(&train.labels, 1), classes);
  const Tensor<T> train_weights = dataset_weights(train, freq);
  const Tensor<T> val_weights = dataset_weights(validation, freq);

  TrainRun run;
  run.seed = config.seed;
  run.batch_size = config.batch_size;
  std::mt19937_64 rng(config.seed);
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});

  NetworkParameters<T> best = params;
  double best_loss = std::numeric_limits<double>::infinity();
  int stale = 0;
  std::vector<Tensor<T>> grads;
  for (int epoch = 0; epoch < schedule.max_epochs; ++epoch) {
    opt.learning_rate = schedule.learning_rate(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double train_total = 0.0;
    for (Index start = 0; start < train.size(); start += config.batch_size) {
      const Index stop = std::min(train.size(), start + config.batch_size);
      const std::span<const Index> rows(order.data() + start, static_cast<std::size_t>(stop - start));
      train_total += batch_loss<T>(params, gather(train, train_weights, rows), Mode::train, &grads) *
                     static_cast<double>(rows.size());
      sgd_momentum_step<T>(params, grads, opt);
    }
    EpochRecord rec{epoch, train_total / static_cast<double>(train.size()),
                    dataset_loss(params, validation, val_weights, config.batch_size), opt.learning_rate};
    if (!std::isfinite(rec.val_loss)) throw NumericalError("validation loss became non-finite");
    run.history.push_back(rec);
    std::ostringstream msg;
    msg << to_string(schedule.stage) << " epoch " << epoch << " lr " << rec.learning_rate << " train "
        << rec.train_loss << " val " << rec.val_loss;
    log_info(msg.str());
    if (!config.history_path.empty()) write_history_csv(run.history, config.history_path);

    // Improvement must exceed the relative threshold of the best loss so far.
    const double threshold = best_loss - schedule.min_relative_improvement * std::abs(best_loss);
    if (!std::isfinite(best_loss) || rec.val_loss < threshold) {
      best_loss = rec.val_loss;
      best = params;
      run.best_epoch = epoch;
      stale = 0;
      if (!config.checkpoint_path.empty()) {
        Checkpoint<T> ckpt{config.view, params, opt, {}};
        ckpt.meta["stage"] = std::string(to_string(schedule.stage));
        ckpt.meta["epoch"] = std::to_string(epoch);
        ckpt.meta["seed"] = std::to_string(config.seed);
        save_checkpoint(ckpt, config.checkpoint_path);
        if (run.checkpoints.empty()) run.checkpoints.push_back(config.checkpoint_path);
      }
    } else if (++stale >= schedule.patience) {
      log_info("validation loss plateaued; stopping " + std::string(to_string(schedule.stage)));
      break;
    }
  }
  run.best_val_loss = best_loss;
  params = std::move(best);
  return run;
}

template <typename T>
TwoStageResult<T> two_stage(NetworkParameters<T> initial, const SliceDataset<T>& aux_train,
                            const SliceDataset<T>& aux_val, const SliceDataset<T>& manual_train,
                            const SliceDataset<T>& manual_val, const TwoStageConfig& config) {
  if (aux_train.num_classes != manual_train.num_classes) {
    throw DataError("auxiliary labels have " + std::to_string(aux_train.num_classes) +
                    " classes but manual labels have " + std::to_string(manual_train.num_classes));
  }
  TwoStageResult<T> out;
  TrainConfig pre = config.pretrain;
  pre.schedule.stage = Stage::pretrain;
  out.pretrain_run = train_stage(initial, aux_train, aux_val, pre);
  out.pretrained = initial;
  TrainConfig fine = config.finetune;
  fine.schedule.stage = Stage::finetune;
  out.finetune_run = train_stage(initial, manual_train, manual_val, fine);
  out.finetuned = std::move(initial);
  return out;
}

#define QUICKNAT_INSTANTIATE(T)                                                                                   \
  template void sgd_momentum_step<T>(std::span<Parameter<T>* const>, std::span<const Tensor<T>>,                 \
                                     OptimizerState<T>&);                                                         \
  template void sgd_momentum_step<T>(NetworkParameters<T>&, std::span<const Tensor<T>>, OptimizerState<T>&);     \
  template struct SliceDataset<T>;                                                                                \
  template SliceDataset<T> slice_dataset<T>(const IntensityVolume&, const LabelVolume&, View, Index);            \
  template TrainRun train_stage<T>(NetworkParameters<T>&, const SliceDataset<T>&, const SliceDataset<T>&,        \
                                   const TrainConfig&, OptimizerState<T>*);                                       \
  template double evaluate_dataset_loss<T>(NetworkParameters<T>&, const SliceDataset<T>&, const ClassFrequencies&, \
                                           Index);                                                                \
  template TwoStageResult<T> two_stage<T>(NetworkParameters<T>, const SliceDataset<T>&, const SliceDataset<T>&,  \
                                          const SliceDataset<T>&, const SliceDataset<T>&, const TwoStageConfig&);

QUICKNAT_INSTANTIATE(float)
QUICKNAT_INSTANTIATE(double)

}  // namespace quicknat
