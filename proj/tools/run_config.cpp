#include "run_config.h"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace mdt::cli {

namespace {

using enum ValueType;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

bool parse_bool(const std::string& v, bool& out) {
  if (v == "true" || v == "1") {
    out = true;
    return true;
  }
  if (v == "false" || v == "0") {
    out = false;
    return true;
  }
  return false;
}

void check_choice(const std::string& key, const std::string& value, const std::vector<std::string>& choices) {
  if (std::find(choices.begin(), choices.end(), value) != choices.end()) return;
  std::string list;
  for (const auto& c : choices) list += (list.empty() ? "" : ", ") + c;
  throw UsageError(key + " must be one of: " + list + " (got '" + value + "')");
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"preset", text, "desk", "paper", "default set: desk or paper"},
      {"seed", integer, "1", "1", "seed for data generation, initialization, training and bootstrap"},
      {"data", text, "data", "data", "dataset directory"},
      {"out", text, "run", "run", "output directory"},
      {"model", text, "irene", "irene", "irene, image-only, early-fusion or late-fusion"},
      {"ablation", text, "none", "none", "none or an ablation name (irene only)"},
      {"split", text, "test", "test", "evaluation split: val or test"},
      {"n_boot", integer, "1000", "1000", "bootstrap resamples"},
      {"case", text, "", "", "record id to visualize (default: first test record)"},
      {"top_k", integer, "3", "3", "words with a cross-attention heatmap"},
      // synthetic data
      {"records", integer, "2000", "2000", "synthetic record count"},
      {"classes", integer, "3", "8", "label count"},
      {"task", integer, "1", "1", "1: single image, word chief complaint; 2: 16 slices, structured"},
      {"image_size", integer, "32", "224", "image side in pixels"},
      {"patch", integer, "8", "16", "patch side in pixels"},
      {"cc_count", integer, "8", "40", "chief-complaint tokens"},
      {"lab_count", integer, "8", "92", "lab tokens"},
      {"vocab_size", integer, "64", "512", "chief-complaint vocabulary size"},
      {"cross_modal_fraction", real, "0.7", "0.7", "share of positives needing image and text together"},
      {"prevalence", real, "0.3", "0.3", "per-class positive rate"},
      {"noise", real, "0.3", "0.3", "pixel noise standard deviation"},
      {"motif_intensity", real, "1", "1", "motif brightness"},
      {"lab_missing_rate", real, "0.1", "0.1", "fraction of missing lab values"},
      {"first_date", text, "2018-01-01", "2018-01-01", "first admission date"},
      {"date_span_days", integer, "730", "730", "admission date span"},
      {"train_fraction", real, "0.6", "0.6", "training share (date quantile)"},
      {"val_fraction", real, "0.2", "0.2", "validation share (date quantile)"},
      // model
      {"dim", integer, "16", "768", "token width"},
      {"heads", integer, "2", "12", "attention heads"},
      {"bidirectional_blocks", integer, "2", "2", "bidirectional multimodal blocks"},
      {"self_blocks", integer, "2", "10", "self-attention blocks"},
      {"mlp_ratio", integer, "4", "4", "MLP hidden width over token width"},
      {"dropout", real, "0", "0.1", "dropout rate"},
      {"lambda", real, "1", "1", "cross-attention weight"},
      {"pooling", text, "average", "average", "average or cls"},
      {"uni_directional", boolean, "false", "false", "text-queries-image cross term only"},
      {"standard_residual", boolean, "false", "false", "residual around attention as well"},
      {"mask_padding", boolean, "false", "false", "exclude padded words from attention"},
      {"use_image", boolean, "true", "true", "image tokens"},
      {"use_cc", boolean, "true", "true", "chief-complaint tokens"},
      {"use_lab", boolean, "true", "true", "lab tokens"},
      {"tokenized_text", boolean, "true", "true", "one token per item instead of one per modality"},
      // baselines
      {"vit_blocks", integer, "4", "12", "image-only encoder depth"},
      {"word_dim", integer, "16", "768", "fusion baselines: word vector width"},
      {"branch_hidden", integer, "32", "1024", "early fusion: branch hidden width"},
      {"branch_out", integer, "16", "512", "early fusion: branch output width"},
      {"fusion_hidden", integer, "32", "1024", "early fusion: fusion hidden width"},
      {"baseline_dropout", real, "0", "0.3", "baseline dropout rate"},
      // training
      {"lr", real, "0.001", "3e-05", "AdamW learning rate"},
      {"weight_decay", real, "0.01", "0.01", "AdamW weight decay"},
      {"epochs", integer, "30", "30", "training epochs"},
      {"lr_drop_epoch", integer, "20", "20", "1-based epoch of the learning-rate drop"},
      {"lr_drop_factor", real, "10", "10", "learning-rate divisor"},
      {"batch_size", integer, "32", "256", "batch size"},
      {"augment", boolean, "false", "true", "random crop and flip of training images"},
      {"clip_norm", real, "0", "0", "gradient-norm clip, 0 disables"},
  };
  return keys;
}

Assignments parse_config_text(const std::string& text, const std::string& origin) {
  Assignments out;
  std::istringstream in(text);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw UsageError(origin + ":" + std::to_string(no) + ": expected key=value");
    }
    out.emplace_back(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
  }
  return out;
}

Assignments read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

RunConfig RunConfig::preset(const std::string& name) {
  if (name != "desk" && name != "paper") throw UsageError("preset must be desk or paper (got '" + name + "')");
  RunConfig c;
  for (const auto& k : config_keys()) c.values_[k.name] = name == "desk" ? k.desk : k.paper;
  return c;
}

RunConfig RunConfig::resolve(const Assignments& file, const Assignments& flags) {
  std::string preset_name = "desk";
  for (const auto* list : {&file, &flags}) {
    for (const auto& [k, v] : *list) {
      if (k == "preset") preset_name = v;
    }
  }
  RunConfig c = preset(preset_name);
  for (const auto& [k, v] : file) c.set(k, v);
  for (const auto& [k, v] : flags) c.set(k, v);
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const ConfigKey* k = find_key(key);
  if (!k) throw UsageError("unknown config key '" + key + "'");
  switch (k->type) {
    case integer: {
      std::uint64_t v = 0;
      const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (value.empty() || ec != std::errc() || p != value.data() + value.size()) {
        throw UsageError(key + " expects a nonnegative integer (got '" + value + "')");
      }
      break;
    }
    case real: {
      std::size_t used = 0;
      try {
        std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (value.empty() || used != value.size()) throw UsageError(key + " expects a number (got '" + value + "')");
      break;
    }
    case boolean: {
      bool b = false;
      if (!parse_bool(value, b)) throw UsageError(key + " expects true or false (got '" + value + "')");
      break;
    }
    case ValueType::text: break;
  }
  if (key == "model") check_choice(key, value, {"irene", "image-only", "early-fusion", "late-fusion"});
  if (key == "pooling") check_choice(key, value, {"average", "cls"});
  if (key == "split") check_choice(key, value, {"val", "test"});
  if (key == "preset") check_choice(key, value, {"desk", "paper"});
  if (key == "ablation" && value != "none") {
    auto names = ablation_names();
    names.insert(names.begin(), "none");
    check_choice(key, value, names);
  }
  values_[key] = value;
}

const std::string& RunConfig::text(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second;
}

std::size_t RunConfig::size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

std::uint64_t RunConfig::u64(const std::string& key) const { return std::stoull(text(key)); }

double RunConfig::number(const std::string& key) const { return std::stod(text(key)); }

bool RunConfig::flag(const std::string& key) const {
  bool b = false;
  parse_bool(text(key), b);
  return b;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : config_keys()) out += k.name + "=" + text(k.name) + "\n";
  return out;
}

void RunConfig::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config: " + path.string());
  out << to_text();
  if (!out) throw IoError("cannot write config: " + path.string());
}

SyntheticSpec RunConfig::synthetic_spec() const {
  SyntheticSpec s;
  s.records = size("records");
  s.classes = size("classes");
  s.task = static_cast<int>(u64("task"));
  s.image_size = size("image_size");
  s.patch = size("patch");
  s.cc_count = size("cc_count");
  s.lab_count = size("lab_count");
  s.vocab_size = size("vocab_size");
  s.cross_modal_fraction = number("cross_modal_fraction");
  s.prevalence = number("prevalence");
  s.noise = number("noise");
  s.motif_intensity = number("motif_intensity");
  s.lab_missing_rate = number("lab_missing_rate");
  s.first_date = text("first_date");
  s.date_span_days = size("date_span_days");
  s.train_fraction = number("train_fraction");
  s.val_fraction = number("val_fraction");
  s.seed = u64("seed");
  try {
    s.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  return s;
}

ModelRecipe RunConfig::recipe(const TaskLayout& layout) const {
  ModelRecipe r;
  r.choice = model_choice(text("model"));
  MDTConfig& m = r.mdt;
  m.dim = size("dim");
  m.heads = size("heads");
  m.bidirectional_blocks = size("bidirectional_blocks");
  m.self_blocks = size("self_blocks");
  m.mlp_ratio = size("mlp_ratio");
  m.dropout = number("dropout");
  m.lambda = number("lambda");
  m.pooling = text("pooling") == "cls" ? Pooling::cls : Pooling::average;
  m.uni_directional = flag("uni_directional");
  m.standard_residual = flag("standard_residual");
  m.mask_padding = flag("mask_padding");
  m.use_image = flag("use_image");
  m.use_cc = flag("use_cc");
  m.use_lab = flag("use_lab");
  m.tokenized_text = flag("tokenized_text");
  m.layout = layout;
  if (text("ablation") != "none") r.ablation = ablation_by_name(text("ablation"));
  r.vit_blocks = size("vit_blocks");
  r.word_dim = size("word_dim");
  r.branch_hidden = size("branch_hidden");
  r.branch_out = size("branch_out");
  r.fusion_hidden = size("fusion_hidden");
  r.baseline_dropout = number("baseline_dropout");
  try {
    if (r.ablation && r.choice != ModelChoice::irene) throw ContractError("ablations apply to the irene model only");
    if (r.ablation) {
      ablation_config(*r.ablation, m).validate();
    } else {
      m.validate();
    }
    if (!(r.baseline_dropout >= 0.0 && r.baseline_dropout < 1.0)) {
      throw ContractError("baseline dropout must lie in [0, 1)");
    }
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  } catch (const ShapeError& e) {
    throw UsageError(e.what());
  }
  return r;
}

TrainConfig RunConfig::train_config(int task) const {
  TrainConfig t;
  t.lr = number("lr");
  t.weight_decay = number("weight_decay");
  t.epochs = size("epochs");
  t.lr_drop_epoch = size("lr_drop_epoch");
  t.lr_drop_factor = number("lr_drop_factor");
  t.batch_size = size("batch_size");
  t.seed = u64("seed");
  t.task = task;
  t.augment = flag("augment");
  t.clip_norm = number("clip_norm");
  try {
    t.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  return t;
}

}  // namespace mdt::cli
