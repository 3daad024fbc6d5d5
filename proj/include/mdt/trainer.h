#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mdt/model.h"

namespace mdt {

struct TrainConfig {
  double lr = 3e-5;
  double weight_decay = 1e-2;
  std::size_t epochs = 30;
  /// 1-based epoch from which the learning rate is divided by lr_drop_factor.
  std::size_t lr_drop_epoch = 20;
  double lr_drop_factor = 10.0;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  int task = 1;
  /// Random-area crop and flip for training images.
  bool augment = true;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  /// "MDTC" bytes of the parameters after best_epoch.
  std::vector<char> best_checkpoint;
};

/// Trains `model` and leaves it holding the checkpoint with the lowest
/// validation loss (ties go to the earlier epoch).
///
/// Each epoch shuffles the training records with a seeded stream, runs
/// forward, loss, backward and one AdamW step per batch, then measures the
/// validation loss without dropout or augmentation.
TrainResult train(Model& model, std::span<const PatientRecord> train_records,
                  std::span<const PatientRecord> val_records, const TaskLayout& layout, const LabStats& stats,
                  const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch = {});

/// Size-weighted mean loss in evaluation mode.
double evaluate_loss(Model& model, std::span<const PatientRecord> records, const TaskLayout& layout,
                     const LabStats& stats, std::size_t batch_size);

/// Probabilities [N × classes] in evaluation mode.
Tensor predict_records(Model& model, std::span<const PatientRecord> records, const TaskLayout& layout,
                       const LabStats& stats, std::size_t batch_size);

/// Loss of one multi-slice record: every slice runs through the model, the
/// pooled representations are averaged and the head and loss act on the
/// mean. Records on the active tape; any slice count ≥ 1 is accepted.
Tensor train_task2_step(Model& model, const PatientRecord& record, const TaskLayout& layout, const LabStats& stats,
                        ForwardContext& ctx);

/// CSV with header epoch,train_loss,val_loss,lr.
std::string format_training_log(const std::vector<EpochLog>& log);

}  // namespace mdt
