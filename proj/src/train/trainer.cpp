#include "mdt/trainer.h"

#include <cmath>
#include <cstdio>

#include "mdt/adamw.h"
#include "mdt/autograd.h"
#include "mdt/ops.h"

namespace mdt {

namespace {

std::vector<const PatientRecord*> pointers(std::span<const PatientRecord> records,
                                           std::span<const std::size_t> order, std::size_t lo, std::size_t hi) {
  std::vector<const PatientRecord*> out;
  out.reserve(hi - lo);
  for (std::size_t i = lo; i < hi; ++i) out.push_back(&records[order.empty() ? i : order[i]]);
  return out;
}

void clip_gradients(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (const auto& e : store.entries()) {
    for (real g : e.value.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double factor = max_norm / norm;
  for (auto& e : store.entries()) {
    if (!e.value.has_grad()) continue;
    for (real& g : e.value.mutable_grad()) g = static_cast<real>(g * factor);
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ContractError("weight decay must be nonnegative");
  if (epochs == 0 || batch_size == 0) throw ContractError("epochs and batch size must be positive");
  // A drop epoch past the last epoch simply never triggers, which short
  // smoke runs rely on.
  if (lr_drop_epoch == 0) throw ContractError("lr drop epoch is 1-based");
  if (!(lr_drop_factor > 0.0)) throw ContractError("lr drop factor must be positive");
  if (task != 1 && task != 2) throw ContractError("task must be 1 or 2");
  if (!(clip_norm >= 0.0)) throw ContractError("clip norm must be nonnegative");
}

double TrainConfig::lr_at(std::size_t epoch) const { return epoch >= lr_drop_epoch ? lr / lr_drop_factor : lr; }

double evaluate_loss(Model& model, std::span<const PatientRecord> records, const TaskLayout& layout,
                     const LabStats& stats, std::size_t batch_size) {
  if (records.empty()) throw ContractError("cannot evaluate on an empty split");
  NoGradScope no_grad;
  double total = 0.0;
  for (std::size_t lo = 0; lo < records.size(); lo += batch_size) {
    const std::size_t hi = std::min(records.size(), lo + batch_size);
    auto ptrs = pointers(records, {}, lo, hi);
    Batch batch = make_batch(ptrs, layout, stats);
    ForwardContext ctx;
    total += static_cast<double>(model.loss(batch, ctx).item()) * static_cast<double>(hi - lo);
  }
  return total / static_cast<double>(records.size());
}

Tensor predict_records(Model& model, std::span<const PatientRecord> records, const TaskLayout& layout,
                       const LabStats& stats, std::size_t batch_size) {
  if (records.empty()) throw ContractError("cannot predict an empty split");
  std::vector<real> out;
  out.reserve(records.size() * layout.class_count);
  for (std::size_t lo = 0; lo < records.size(); lo += batch_size) {
    const std::size_t hi = std::min(records.size(), lo + batch_size);
    auto ptrs = pointers(records, {}, lo, hi);
    Tensor p = model.predict(make_batch(ptrs, layout, stats));
    auto d = p.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return Tensor::from({records.size(), layout.class_count}, std::move(out));
}

Tensor train_task2_step(Model& model, const PatientRecord& record, const TaskLayout& layout, const LabStats& stats,
                        ForwardContext& ctx) {
  if (record.images.empty()) throw ContractError("record '" + record.id + "' has no slices");
  const PatientRecord* ptr = &record;
  BatchOptions options;
  options.training = ctx.training;
  options.rng = ctx.rng;
  Batch batch = make_batch(std::span<const PatientRecord* const>(&ptr, 1), layout, stats, options);
  return model.loss(batch, ctx);
}

TrainResult train(Model& model, std::span<const PatientRecord> train_records,
                  std::span<const PatientRecord> val_records, const TaskLayout& layout, const LabStats& stats,
                  const TrainConfig& config, const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (train_records.empty()) throw ContractError("training split is empty");
  if (val_records.empty()) throw ContractError("validation split is empty");
  tune_allocator();

  ParameterStore& params = model.parameters();
  AdamWOptions opt;
  opt.lr = config.lr;
  opt.weight_decay = config.weight_decay;
  AdamWState state = make_adamw_state(params, opt);

  Rng order_rng(Rng::mix(config.seed, 1));
  Rng dropout_rng(Rng::mix(config.seed, 2));
  Rng augment_rng(Rng::mix(config.seed, 3));

  std::vector<std::size_t> order(train_records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  Tape tape;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    state.options.lr = config.lr_at(epoch);
    order_rng.shuffle(order);
    double total = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size, ++batch_index) {
      const std::size_t hi = std::min(order.size(), lo + config.batch_size);
      auto ptrs = pointers(train_records, order, lo, hi);
      BatchOptions bopt;
      bopt.training = true;
      bopt.augment = config.augment;
      bopt.rng = &augment_rng;
      Batch batch = make_batch(ptrs, layout, stats, bopt);

      tape.reset();
      TapeScope scope(tape);
      params.zero_grad();
      ForwardContext ctx;
      ctx.training = true;
      ctx.rng = &dropout_rng;
      Tensor loss = model.loss(batch, ctx);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      }
      tape.backward(loss);
      if (config.clip_norm > 0.0) clip_gradients(params, config.clip_norm);
      adamw_step(params, state);
      total += value * static_cast<double>(hi - lo);
    }
    tape.reset();

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = total / static_cast<double>(order.size());
    entry.val_loss = evaluate_loss(model, val_records, layout, stats, config.batch_size);
    entry.lr = state.options.lr;
    if (!std::isfinite(entry.val_loss)) {
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    }
    result.log.push_back(entry);
    if (result.best_epoch == 0 || entry.val_loss < result.best_val_loss) {
      result.best_epoch = epoch;
      result.best_val_loss = entry.val_loss;
      result.best_checkpoint = save_checkpoint(params);
    }
    if (on_epoch) on_epoch(entry);
  }
  load_checkpoint(params, result.best_checkpoint);
  return result;
}

std::string format_training_log(const std::vector<EpochLog>& log) {
  std::string out = "epoch,train_loss,val_loss,lr\n";
  char buf[128];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g\n", e.epoch, e.train_loss, e.val_loss, e.lr);
    out += buf;
  }
  return out;
}

}  // namespace mdt
