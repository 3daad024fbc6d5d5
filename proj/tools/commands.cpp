#include "commands.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>

#include "CLI11.hpp"
#include "mdt/autograd.h"
#include "mdt/interpret.h"
#include "mdt/ops.h"
#include "run_config.h"

namespace mdt::cli {

namespace fs = std::filesystem;

namespace {

/// A subcommand with --config, repeatable --set and flags bound to keys.
class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& description)
      : app_(parent.add_subcommand(name, description)) {
    app_->add_option("--config", config_path_, "key=value config file");
    app_->add_option("--set", sets_, "override one key, KEY=VALUE (repeatable)");
    bind("--preset", "preset", "desk or paper defaults");
    bind("--seed", "seed", "random seed");
  }

  void bind(const std::string& flag, const std::string& key, const std::string& help) {
    auto b = std::make_unique<Bound>();
    b->key = key;
    b->option = app_->add_option(flag, b->value, help);
    for (const auto& k : config_keys()) {
      if (k.name != key) continue;
      switch (k.type) {
        case ValueType::integer: b->option->type_name("INT"); break;
        case ValueType::real: b->option->type_name("REAL"); break;
        case ValueType::boolean: b->option->type_name("BOOL"); break;
        case ValueType::text: break;
      }
    }
    bound_.push_back(std::move(b));
  }

  bool parsed() const { return app_->parsed(); }

  /// --set values in order, then named flags.
  Assignments flags() const {
    Assignments out;
    for (const auto& s : sets_) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects KEY=VALUE (got '" + s + "')");
      out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& b : bound_) {
      if (b->option->count() > 0) out.emplace_back(b->key, b->value);
    }
    return out;
  }

  /// Resolves flags against --config, or against `fallback` when it exists
  /// and no --config was given.
  RunConfig resolve(const fs::path& fallback = {}) const {
    Assignments file;
    if (!config_path_.empty()) {
      file = read_config_file(config_path_);
    } else if (!fallback.empty() && fs::exists(fallback)) {
      file = read_config_file(fallback);
    }
    return RunConfig::resolve(file, flags());
  }

  /// Value of `key` from the flags alone, if given there.
  std::string flag_value(const std::string& key, const std::string& otherwise) const {
    std::string v = otherwise;
    for (const auto& [k, value] : flags()) {
      if (k == key) v = value;
    }
    return v;
  }

 private:
  struct Bound {
    std::string key, value;
    CLI::Option* option = nullptr;
  };
  CLI::App* app_;
  std::string config_path_;
  std::vector<std::string> sets_;
  std::vector<std::unique_ptr<Bound>> bound_;
};

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct Loaded {
  SyntheticDataset dataset;
  SplitData split;
};

Loaded load_data(const RunConfig& cfg) {
  Loaded l;
  l.dataset = read_dataset(cfg.text("data"));
  l.split = split_dataset(l.dataset);
  return l;
}

std::unique_ptr<Model> restore_model(const RunConfig& cfg, const TaskLayout& layout, const fs::path& run_dir) {
  auto model = build_model(cfg.recipe(layout), cfg.u64("seed"));
  load_checkpoint(model->parameters(), read_file(run_dir / "checkpoint.mdtc"));
  return model;
}

/// Trains into cfg's out directory: config.txt, checkpoint.mdtc,
/// train_log.csv and lab_stats.json.
TrainResult run_training(const RunConfig& cfg, const Loaded& data, std::ostream& out) {
  const ModelRecipe recipe = cfg.recipe(data.split.layout);
  const TrainConfig tc = cfg.train_config(data.split.layout.task);
  const fs::path dir = cfg.text("out");
  make_dir(dir);
  cfg.write(dir / "config.txt");
  auto model = build_model(recipe, cfg.u64("seed"));
  const TrainResult result = train(*model, data.split.train, data.split.val, data.split.layout, data.split.stats, tc,
                                   [&](const EpochLog& e) {
                                     out << "epoch " << e.epoch << " train_loss " << fmt(e.train_loss) << " val_loss "
                                         << fmt(e.val_loss) << " lr " << fmt(e.lr) << "\n";
                                   });
  write_file(dir / "checkpoint.mdtc", result.best_checkpoint);
  write_text(dir / "train_log.csv", format_training_log(result.log));
  data.split.stats.save(dir / "lab_stats.json");
  out << "best epoch " << result.best_epoch << " val_loss " << fmt(result.best_val_loss) << "\n";
  return result;
}

EvalReport run_evaluation(const RunConfig& cfg, const Loaded& data, const fs::path& run_dir) {
  const auto& records = cfg.text("split") == "val" ? data.split.val : data.split.test;
  const LabStats stats = LabStats::load(run_dir / "lab_stats.json");
  auto model = restore_model(cfg, data.split.layout, run_dir);
  const Tensor probs = predict_records(*model, records, data.split.layout, stats, cfg.size("batch_size"));
  const Tensor labels = label_matrix(records, data.split.layout.class_count);
  std::vector<std::string> names;
  for (std::size_t c = 0; c < data.split.layout.class_count; ++c) names.push_back("class_" + std::to_string(c));
  EvalReport report = evaluate_predictions(probs, labels, task_metric(data.split.layout.task), cfg.size("n_boot"),
                                           cfg.u64("seed"), names);
  const std::string stem = "eval_" + cfg.text("split");
  write_text(run_dir / (stem + ".csv"), report.to_csv());
  write_text(run_dir / (stem + ".json"), report.to_json());
  cfg.write(run_dir / (stem + "_config.txt"));
  return report;
}

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  const SyntheticSpec spec = cfg.synthetic_spec();
  const fs::path dir = cfg.text("data");
  const SyntheticDataset ds = generate_synthetic_dataset(spec);
  write_dataset(ds, dir);
  cfg.write(dir / "config.txt");
  out << "wrote " << ds.records.size() << " records to " << dir.string() << "\n";
  out << "manifest sha256 " << sha256_file(dir / "manifest.jsonl") << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  cfg.recipe(TaskLayout::task1());  // reject bad model settings before loading data
  const Loaded data = load_data(cfg);
  run_training(cfg, data, out);
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const Loaded data = load_data(cfg);
  out << run_evaluation(cfg, data, cfg.text("out")).to_csv();
  return 0;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.text("model") != "irene") throw UsageError("ablate runs the irene model");
  const Loaded data = load_data(cfg);
  const fs::path root = cfg.text("out");
  make_dir(root);
  cfg.write(root / "config.txt");
  const MDTConfig base = cfg.recipe(data.split.layout).mdt;
  std::string summary = "ablation,metric,value,ci_lo,ci_hi\n";
  for (const auto& name : ablation_names()) {
    try {
      ablation_config(ablation_by_name(name), base).validate();
    } catch (const ContractError& e) {
      err << "skipping " << name << ": " << e.what() << "\n";
      continue;
    }
    RunConfig run = cfg;
    run.set("ablation", name);
    run.set("out", (root / name).string());
    out << "== " << name << "\n";
    run_training(run, data, out);
    const EvalReport report = run_evaluation(run, data, root / name);
    summary += name + "," + std::string(metric_name(report.metric)) + "," + fmt(report.mean) + "," +
               fmt(report.mean_interval.lo) + "," + fmt(report.mean_interval.hi) + "\n";
  }
  write_text(root / "ablation.csv", summary);
  out << summary;
  return 0;
}

int cmd_viz(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.text("model") != "irene") throw UsageError("viz needs the irene model");
  if (cfg.text("pooling") != "cls") throw UsageError("viz needs a model trained with pooling=cls");
  const Loaded data = load_data(cfg);
  const PatientRecord* record = nullptr;
  const std::string case_id = cfg.text("case");
  if (case_id.empty()) {
    record = &data.split.test.front();
  } else {
    for (const auto& r : data.dataset.records) {
      if (r.id == case_id) record = &r;
    }
    if (!record) throw UsageError("unknown case id '" + case_id + "'");
  }
  const fs::path run_dir = cfg.text("out");
  const TaskLayout& layout = data.split.layout;
  const LabStats stats = LabStats::load(run_dir / "lab_stats.json");
  auto model = restore_model(cfg, layout, run_dir);

  const Batch batch = make_batch(std::span<const PatientRecord* const>(&record, 1), layout, stats);
  AttentionTrace trace;
  {
    NoGradScope no_grad;
    ForwardContext ctx;
    ctx.trace = &trace;
    model->forward(batch, ctx);
  }

  const fs::path dir = run_dir / "viz" / record->id;
  make_dir(dir);
  cfg.write(dir / "config.txt");
  const RelevanceMap map = attention_rollout(trace);
  const ModalityShares shares = modality_shares(map);
  write_text(dir / "shares.csv", "modality,share\nimage," + fmt(shares.image) + "\ncc," + fmt(shares.cc) + "\nlab," +
                                     fmt(shares.lab) + "\ndemographics," + fmt(shares.demographics) + "\n");

  std::string labs = "lab,relevance\n";
  const auto lab = lab_importance(map);
  for (std::size_t i = 0; i < lab.size(); ++i) labs += std::to_string(i) + "," + fmt(lab[i]) + "\n";
  write_text(dir / "lab_importance.csv", labs);

  // Words sit at the front of the text stream, one per chief-complaint slot.
  const auto importance = word_importance(map);
  const auto word_name = [&](std::size_t pos) -> std::string {
    if (layout.structured_cc) return "component_" + std::to_string(pos);
    return data.dataset.vocabulary.word(batch.cc_ids[pos]);
  };
  const auto is_pad = [&](std::size_t pos) { return !layout.structured_cc && batch.cc_ids[pos] == kPadId; };
  std::string words = "position,word,importance\n";
  std::vector<std::size_t> ranked;
  for (std::size_t i = 0; i < importance.size(); ++i) {
    words += std::to_string(i) + "," + word_name(i) + "," + fmt(importance[i]) + "\n";
    if (!is_pad(i)) ranked.push_back(i);
  }
  write_text(dir / "word_importance.csv", words);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [&](std::size_t a, std::size_t b) { return importance[a] > importance[b]; });

  if (layout.grid_side() > 0 && model->parameters().size() > 0) {
    export_heatmap(image_relevance_grid(map), dir / "heatmap_rollout", layout.image_size, layout.image_size);
  }
  const std::size_t k = std::min(cfg.size("top_k"), ranked.size());
  if (trace.of_kind(AttentionKind::text_to_image).empty()) {
    err << "no text-to-image cross attention in this model; word heatmaps skipped\n";
  } else {
    for (std::size_t r = 0; r < k; ++r) {
      const Grid grid = cross_attention_map(trace, ranked[r]);
      export_heatmap(grid, dir / ("heatmap_word" + std::to_string(r + 1) + "_" + word_name(ranked[r])),
                     layout.image_size, layout.image_size);
    }
  }
  out << "case " << record->id << " image " << fmt(shares.image) << " cc " << fmt(shares.cc) << " lab "
      << fmt(shares.lab) << " demographics " << fmt(shares.demographics) << "\n";
  out << "wrote " << dir.string() << "\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal diagnostic transformer on synthetic patient records", "mdt"};
  app.require_subcommand(1);
  app.footer("Config precedence: preset defaults < --config file < --set < named flags. Exit codes: 0 success, "
             "1 runtime failure, 2 usage error. MDT_THREADS caps kernel threads.");

  Command gen(app, "gen-data", "generate a synthetic dataset");
  gen.bind("--out", "data", "dataset directory to write");
  gen.bind("--n", "records", "record count");
  gen.bind("--task", "task", "1 or 2");
  gen.bind("--cross-modal-fraction", "cross_modal_fraction", "share of positives needing both modalities");

  Command tr(app, "train", "train a model and keep the best checkpoint");
  tr.bind("--data", "data", "dataset directory");
  tr.bind("--out", "out", "run directory");
  tr.bind("--model", "model", "irene, image-only, early-fusion or late-fusion");
  tr.bind("--ablation", "ablation", "ablation name");
  tr.bind("--task", "task", "task the dataset was generated for");
  tr.bind("--epochs", "epochs", "training epochs");

  Command ev(app, "eval", "evaluate a trained run with bootstrap intervals");
  ev.bind("--out", "out", "run directory (its config.txt is the default config)");
  ev.bind("--data", "data", "dataset directory");
  ev.bind("--split", "split", "val or test");
  ev.bind("--n-boot", "n_boot", "bootstrap resamples");

  Command ab(app, "ablate", "train and evaluate every ablation");
  ab.bind("--data", "data", "dataset directory");
  ab.bind("--out", "out", "output directory");
  ab.bind("--epochs", "epochs", "training epochs");

  Command vz(app, "viz", "attention shares, importances and heatmaps for one case");
  vz.bind("--out", "out", "run directory (its config.txt is the default config)");
  vz.bind("--case", "case", "record id");
  vz.bind("--top-k", "top_k", "words with a cross-attention heatmap");

  std::vector<std::string> argv_store{"mdt"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen.parsed()) {
      return cmd_gen_data(gen.resolve(), out);
    }
    if (tr.parsed()) return cmd_train(tr.resolve(), out);
    if (ev.parsed()) {
      const fs::path dir = ev.flag_value("out", "run");
      return cmd_eval(ev.resolve(dir / "config.txt"), out);
    }
    if (ab.parsed()) return cmd_ablate(ab.resolve(), out, err);
    if (vz.parsed()) {
      const fs::path dir = vz.flag_value("out", "run");
      return cmd_viz(vz.resolve(dir / "config.txt"), out, err);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace mdt::cli
