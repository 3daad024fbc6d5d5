#include "mdt/experiment.h"

namespace mdt {

SplitData split_dataset(const SyntheticDataset& dataset) {
  const DatasetSplit split = split_by_date(dataset.records, dataset.boundaries[0], dataset.boundaries[1]);
  SplitData data;
  data.layout = dataset.layout;
  for (std::size_t i : split.train) data.train.push_back(dataset.records[i]);
  for (std::size_t i : split.val) data.val.push_back(dataset.records[i]);
  for (std::size_t i : split.test) data.test.push_back(dataset.records[i]);
  if (data.train.empty() || data.val.empty() || data.test.empty()) {
    throw ContractError("date split left an empty partition (" + std::to_string(data.train.size()) + "/" +
                        std::to_string(data.val.size()) + "/" + std::to_string(data.test.size()) + ")");
  }
  data.stats = LabStats::fit(data.train, data.layout.lab_count);
  return data;
}

Tensor label_matrix(std::span<const PatientRecord> records, std::size_t classes) {
  std::vector<real> values;
  values.reserve(records.size() * classes);
  for (const auto& r : records) {
    if (r.labels.size() != classes) throw ShapeError("record '" + r.id + "' has the wrong label count");
    for (int y : r.labels) values.push_back(static_cast<real>(y));
  }
  return Tensor::from({records.size(), classes}, std::move(values));
}

ModelChoice model_choice(const std::string& name) {
  if (name == "irene") return ModelChoice::irene;
  if (name == "image-only") return ModelChoice::image_only;
  if (name == "early-fusion") return ModelChoice::early_fusion;
  if (name == "late-fusion") return ModelChoice::late_fusion;
  throw ContractError("unknown model '" + name + "' (irene, image-only, early-fusion, late-fusion)");
}

std::string_view model_choice_name(ModelChoice choice) {
  switch (choice) {
    case ModelChoice::irene: return "irene";
    case ModelChoice::image_only: return "image-only";
    case ModelChoice::early_fusion: return "early-fusion";
    case ModelChoice::late_fusion: return "late-fusion";
  }
  return "irene";
}

VitConfig ModelRecipe::vit_config() const {
  VitConfig v;
  v.dim = mdt.dim;
  v.heads = mdt.heads;
  v.blocks = vit_blocks;
  v.mlp_hidden = mdt.dim * mdt.mlp_ratio;
  v.dropout = baseline_dropout;
  v.layout = mdt.layout;
  return v;
}

EarlyFusionConfig ModelRecipe::fusion_config() const {
  EarlyFusionConfig f;
  f.vit = vit_config();
  f.word_dim = word_dim;
  f.hidden = branch_hidden;
  f.branch_out = branch_out;
  f.fusion_hidden = fusion_hidden;
  f.dropout = baseline_dropout;
  return f;
}

std::unique_ptr<Model> build_model(const ModelRecipe& recipe, std::uint64_t seed) {
  if (recipe.ablation && recipe.choice != ModelChoice::irene) {
    throw ContractError("ablations apply to the irene model only");
  }
  switch (recipe.choice) {
    case ModelChoice::irene:
      if (recipe.ablation) return build_ablation(*recipe.ablation, recipe.mdt, seed);
      recipe.mdt.validate();
      return std::make_unique<MDTModel>(recipe.mdt, seed);
    case ModelChoice::image_only: return std::make_unique<VitModel>(recipe.vit_config(), seed);
    case ModelChoice::early_fusion: return std::make_unique<EarlyFusionModel>(recipe.fusion_config(), seed);
    case ModelChoice::late_fusion: return std::make_unique<LateFusionModel>(recipe.fusion_config(), seed);
  }
  throw ContractError("unknown model choice");
}

RunOutcome train_and_predict(Model& model, const SplitData& data, const TrainConfig& config) {
  RunOutcome out;
  out.training = train(model, data.train, data.val, data.layout, data.stats, config);
  out.test_probabilities = predict_records(model, data.test, data.layout, data.stats, config.batch_size);
  out.test_labels = label_matrix(data.test, data.layout.class_count);
  return out;
}

double mean_metric(const Tensor& probabilities, const Tensor& labels, MetricKind kind) {
  const std::size_t n = probabilities.dim(0), k = probabilities.dim(1);
  auto pd = probabilities.data();
  auto ld = labels.data();
  std::vector<double> s(n);
  std::vector<int> y(n);
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = pd[i * k + c];
      y[i] = static_cast<int>(ld[i * k + c]);
    }
    total += kind == MetricKind::auroc ? auroc(s, y) : auprc(s, y);
  }
  return total / static_cast<double>(k);
}

MetricKind task_metric(int task) { return task == 2 ? MetricKind::auprc : MetricKind::auroc; }

}  // namespace mdt
