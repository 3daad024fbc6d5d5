#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mdt/baselines.h"
#include "mdt/dataset.h"
#include "mdt/metrics.h"
#include "mdt/trainer.h"

namespace mdt {

/// Records of a dataset split by admission date, with lab statistics fitted
/// on the training part.
struct SplitData {
  TaskLayout layout;
  std::vector<PatientRecord> train, val, test;
  LabStats stats;
};

SplitData split_dataset(const SyntheticDataset& dataset);

/// Multi-hot labels [N × classes].
Tensor label_matrix(std::span<const PatientRecord> records, std::size_t classes);

enum class ModelChoice { irene, image_only, early_fusion, late_fusion };

ModelChoice model_choice(const std::string& name);
std::string_view model_choice_name(ModelChoice choice);

/// Architecture of every selectable model at one width.
struct ModelRecipe {
  ModelChoice choice = ModelChoice::irene;
  MDTConfig mdt;
  /// Applied to `mdt` when set.
  std::optional<AblationSpec> ablation;
  /// Self-attention depth of the image-only encoder.
  std::size_t vit_blocks = 12;
  std::size_t word_dim = 768;
  std::size_t branch_hidden = 1024;
  std::size_t branch_out = 512;
  std::size_t fusion_hidden = 1024;
  double baseline_dropout = 0.3;

  VitConfig vit_config() const;
  EarlyFusionConfig fusion_config() const;
};

std::unique_ptr<Model> build_model(const ModelRecipe& recipe, std::uint64_t seed);

/// Training result plus held-out predictions.
struct RunOutcome {
  TrainResult training;
  Tensor test_probabilities;
  Tensor test_labels;
};

RunOutcome train_and_predict(Model& model, const SplitData& data, const TrainConfig& config);

/// Class-mean AUROC (task 1) or AUPRC (task 2) of held-out predictions.
double mean_metric(const Tensor& probabilities, const Tensor& labels, MetricKind kind);

MetricKind task_metric(int task);

}  // namespace mdt
