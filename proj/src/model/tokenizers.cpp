#include "mdt/tokenizers.h"

#include <algorithm>
#include <fstream>

#include "json.hpp"
#include "mdt/ops.h"

namespace mdt {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::image: return "image";
    case Modality::cc: return "cc";
    case Modality::lab: return "lab";
    case Modality::sex: return "sex";
    case Modality::age: return "age";
    case Modality::cls: return "cls";
  }
  return "?";
}

TaskLayout TaskLayout::task1() { return TaskLayout{}; }

TaskLayout TaskLayout::task2() {
  TaskLayout t;
  t.task = 2;
  t.slices = 16;
  t.cc_count = 16;
  t.lab_count = 19;
  t.class_count = 3;
  t.structured_cc = true;
  return t;
}

void TaskLayout::validate() const {
  if (task != 1 && task != 2) throw ContractError("task must be 1 or 2");
  if (patch == 0 || image_size == 0 || image_size % patch != 0) {
    throw ShapeError("image size " + std::to_string(image_size) + " is not divisible by patch " +
                     std::to_string(patch));
  }
  if (channels == 0 || slices == 0) throw ShapeError("image channels and slices must be positive");
  if (class_count == 0) throw ContractError("class count must be positive");
  if (cc_count == 0 || lab_count == 0) throw ShapeError("chief complaint and lab counts must be positive");
  if (!structured_cc && vocab_size < 2) throw ContractError("vocabulary needs at least PAD and UNK");
  if (resize_size < image_size) throw ContractError("resize size smaller than the model image size");
}

void validate_record(const PatientRecord& record, const TaskLayout& layout) {
  const auto where = [&] { return "record '" + record.id + "': "; };
  if (record.labels.size() != layout.class_count) {
    throw ShapeError(where() + "expected " + std::to_string(layout.class_count) + " labels, found " +
                     std::to_string(record.labels.size()));
  }
  for (int y : record.labels) {
    if (y != 0 && y != 1) throw ContractError(where() + "labels must be 0 or 1");
  }
  if (record.lab.size() != layout.lab_count) {
    throw ShapeError(where() + "expected " + std::to_string(layout.lab_count) + " lab values, found " +
                     std::to_string(record.lab.size()));
  }
  if (layout.structured_cc) {
    if (record.cc_values.size() != layout.cc_count) {
      throw ShapeError(where() + "expected " + std::to_string(layout.cc_count) + " chief-complaint components");
    }
  } else {
    for (auto id : record.cc_ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= layout.vocab_size) {
        throw ContractError(where() + "word id " + std::to_string(id) + " outside the vocabulary");
      }
    }
  }
  if (record.sex != 0 && record.sex != 1) throw ContractError(where() + "sex must be 0 or 1");
  if (!(record.age >= 0.0)) throw ContractError(where() + "age must be nonnegative");
}

std::vector<std::int32_t> pad_or_truncate_cc(std::span<const std::int32_t> ids, std::size_t length) {
  std::vector<std::int32_t> out(length, kPadId);
  std::copy_n(ids.begin(), std::min(length, ids.size()), out.begin());
  return out;
}

std::vector<double> normalize_lab(std::span<const std::optional<double>> values, std::span<const double> train_min,
                                  std::span<const double> train_max) {
  if (train_min.size() != values.size() || train_max.size() != values.size()) {
    throw ShapeError("normalize_lab: statistics cover " + std::to_string(train_min.size()) + " items, record has " +
                     std::to_string(values.size()));
  }
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!values[i]) {
      out[i] = -1.0;
    } else if (train_max[i] == train_min[i]) {
      out[i] = 0.0;
    } else {
      out[i] = std::clamp((*values[i] - train_min[i]) / (train_max[i] - train_min[i]), 0.0, 1.0);
    }
  }
  return out;
}

std::vector<std::optional<double>> impute_median(std::span<const std::optional<double>> values,
                                                 std::span<const double> train_medians) {
  if (train_medians.size() != values.size()) throw ShapeError("impute_median: statistics size mismatch");
  std::vector<std::optional<double>> out(values.begin(), values.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!out[i]) out[i] = train_medians[i];
  }
  return out;
}

LabStats LabStats::fit(std::span<const PatientRecord> records, std::size_t lab_count) {
  LabStats s;
  s.min.assign(lab_count, 0.0);
  s.max.assign(lab_count, 0.0);
  s.median.assign(lab_count, 0.0);
  std::vector<double> column;
  for (std::size_t i = 0; i < lab_count; ++i) {
    column.clear();
    for (const auto& r : records) {
      if (r.lab.size() != lab_count) throw ShapeError("LabStats::fit: record '" + r.id + "' has wrong lab count");
      if (r.lab[i]) column.push_back(*r.lab[i]);
    }
    if (column.empty()) continue;
    std::sort(column.begin(), column.end());
    s.min[i] = column.front();
    s.max[i] = column.back();
    const std::size_t n = column.size();
    s.median[i] = n % 2 == 1 ? column[n / 2] : 0.5 * (column[n / 2 - 1] + column[n / 2]);
  }
  return s;
}

void LabStats::save(const std::filesystem::path& path) const {
  nlohmann::json j{{"min", min}, {"max", max}, {"median", median}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump() << '\n';
}

LabStats LabStats::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    LabStats s{j.at("min").get<std::vector<double>>(), j.at("max").get<std::vector<double>>(),
               j.at("median").get<std::vector<double>>()};
    if (s.min.size() != s.max.size() || s.min.size() != s.median.size()) {
      throw IoError("statistics arrays differ in length");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
}

std::int32_t Vocabulary::add(const std::string& word) {
  if (auto it = ids_.find(word); it != ids_.end()) return it->second;
  const auto id = static_cast<std::int32_t>(words_.size());
  words_.push_back(word);
  ids_.emplace(word, id);
  return id;
}

std::int32_t Vocabulary::id(const std::string& word) const {
  auto it = ids_.find(word);
  return it == ids_.end() ? kUnknownId : it->second;
}

const std::string& Vocabulary::word(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw ContractError("word id " + std::to_string(id) + " outside the vocabulary");
  }
  return words_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (std::size_t i = 0; i < words_.size(); ++i) {
    out << nlohmann::json{{"word", words_[i]}, {"id", i}}.dump() << '\n';
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::vector<std::pair<std::int32_t, std::string>> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      entries.emplace_back(j.at("id").get<std::int32_t>(), j.at("word").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  std::sort(entries.begin(), entries.end());
  Vocabulary v;
  v.words_.clear();
  v.ids_.clear();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != static_cast<std::int32_t>(i)) throw IoError(path.string() + ": ids are not dense");
    v.words_.push_back(entries[i].second);
    v.ids_.emplace(entries[i].second, entries[i].first);
  }
  if (v.words_.size() < 2) throw IoError(path.string() + ": vocabulary lacks PAD and UNK");
  return v;
}

Tensor patchify(const Image& image, std::size_t patch) {
  if (patch == 0 || image.width % patch != 0 || image.height % patch != 0) {
    throw ShapeError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     " is not divisible into " + std::to_string(patch) + "x" + std::to_string(patch) + " patches");
  }
  const std::size_t gx = image.width / patch, gy = image.height / patch, c = image.channels;
  const std::size_t pd = patch * patch * c;
  std::vector<real> out(gx * gy * pd);
  for (std::size_t ty = 0; ty < gy; ++ty) {
    for (std::size_t tx = 0; tx < gx; ++tx) {
      real* dst = &out[(ty * gx + tx) * pd];
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) {
          for (std::size_t ch = 0; ch < c; ++ch) *dst++ = image.at(ty * patch + y, tx * patch + x, ch);
        }
      }
    }
  }
  return Tensor::from({gx * gy, pd}, std::move(out));
}

Image prepare_image(const Image& image, const TaskLayout& layout, const BatchOptions& options) {
  if (image.channels != layout.channels) {
    throw ShapeError("image has " + std::to_string(image.channels) + " channels, layout expects " +
                     std::to_string(layout.channels));
  }
  if (options.training && options.augment) {
    if (!options.rng) throw ContractError("augmentation needs a random stream");
    Image resized = (image.width == layout.resize_size && image.height == layout.resize_size)
                        ? image
                        : resize_bilinear(image, layout.resize_size, layout.resize_size);
    return augment_train_image(resized, layout.image_size, *options.rng);
  }
  if (image.width == layout.image_size && image.height == layout.image_size) return image;
  return preprocess_eval_image(image, layout.resize_size, layout.image_size);
}

Batch make_batch(std::span<const PatientRecord* const> records, const TaskLayout& layout, const LabStats& stats,
                 const BatchOptions& options) {
  if (records.empty()) throw ContractError("make_batch: no records");
  const std::size_t b = records.size();
  Batch batch;
  batch.size = b;
  batch.slices = records.front()->images.size();

  std::vector<real> patches, cc_values, lab, sex, age, labels;
  const std::size_t tiles = layout.image_tokens();
  for (const auto* rec : records) {
    validate_record(*rec, layout);
    if (!rec->images.empty()) {
      if (rec->images.size() != batch.slices) throw ShapeError("records in one batch differ in slice count");
      for (const auto& img : rec->images) {
        auto p = patchify(prepare_image(img, layout, options), layout.patch);
        if (p.dim(0) != tiles) throw ShapeError("image does not match the layout's patch grid");
        auto d = p.data();
        patches.insert(patches.end(), d.begin(), d.end());
      }
    } else if (batch.slices != 0) {
      throw ShapeError("record '" + rec->id + "' has no images");
    }
    if (layout.structured_cc) {
      cc_values.insert(cc_values.end(), rec->cc_values.begin(), rec->cc_values.end());
    } else {
      auto ids = pad_or_truncate_cc(rec->cc_ids, layout.cc_count);
      batch.cc_ids.insert(batch.cc_ids.end(), ids.begin(), ids.end());
    }
    std::vector<double> normalized =
        layout.structured_cc ? normalize_lab(impute_median(rec->lab, stats.median), stats.min, stats.max)
                             : normalize_lab(rec->lab, stats.min, stats.max);
    lab.insert(lab.end(), normalized.begin(), normalized.end());
    sex.push_back(static_cast<real>(rec->sex));
    age.push_back(static_cast<real>(rec->age / 100.0));
    for (int y : rec->labels) labels.push_back(static_cast<real>(y));
  }
  if (batch.slices > 0) {
    batch.patches = Tensor::from({b * batch.slices, tiles, layout.patch_dim()}, std::move(patches));
  } else {
    batch.slices = 1;
  }
  if (layout.structured_cc) batch.cc_values = Tensor::from({b, layout.cc_count}, std::move(cc_values));
  batch.lab = Tensor::from({b, layout.lab_count}, std::move(lab));
  batch.sex = Tensor::from({b, 1}, std::move(sex));
  batch.age = Tensor::from({b, 1}, std::move(age));
  batch.labels = Tensor::from({b, layout.class_count}, std::move(labels));
  return batch;
}

ImageEmbedder::ImageEmbedder(ParameterStore& store, const std::string& prefix, const TaskLayout& layout,
                             std::size_t dim, Rng& rng)
    : projection(store.add_weight(prefix + ".patch.weight", {layout.patch_dim(), dim}, rng)),
      projection_bias(store.add_zeros(prefix + ".patch.bias", {dim})),
      positions(store.add_weight(prefix + ".position", {layout.image_tokens(), dim}, rng)) {}

TokenSequence ImageEmbedder::embed(const Tensor& patches, double dropout_rate, bool training, Rng* rng) const {
  if (patches.rank() != 3 || patches.dim(1) != positions.dim(0) || patches.dim(2) != projection.dim(0)) {
    throw ShapeError("image embedder expects [B x " + std::to_string(positions.dim(0)) + " x " +
                     std::to_string(projection.dim(0)) + "] patches, got " + shape_to_string(patches.shape()));
  }
  Tensor tokens = add(linear(patches, projection, projection_bias), positions);
  tokens = dropout(tokens, dropout_rate, training, rng);
  return {tokens, std::vector<Modality>(patches.dim(1), Modality::image)};
}

TextEmbedder::TextEmbedder(ParameterStore& store, const std::string& prefix, const TaskLayout& layout,
                           std::size_t dim, Options options, Rng& rng)
    : layout_(layout), options_(options), dim_(dim) {
  if (options.use_cc) {
    if (!layout.structured_cc) {
      word_table = store.add_weight(prefix + ".cc.embedding", {layout.vocab_size, dim}, rng);
    } else if (options.tokenized) {
      cc_weight = store.add_weight(prefix + ".cc.weight", {dim}, rng);
      cc_bias = store.add_zeros(prefix + ".cc.bias", {dim});
    } else {
      cc_weight = store.add_weight(prefix + ".cc.weight", {layout.cc_count, dim}, rng);
      cc_bias = store.add_zeros(prefix + ".cc.bias", {dim});
    }
  }
  if (options.use_lab) {
    if (options.tokenized) {
      lab_weight = store.add_weight(prefix + ".lab.weight", {dim}, rng);
    } else {
      lab_weight = store.add_weight(prefix + ".lab.weight", {layout.lab_count, dim}, rng);
    }
    lab_bias = store.add_zeros(prefix + ".lab.bias", {dim});
  }
  sex_weight = store.add_weight(prefix + ".sex.weight", {dim}, rng);
  sex_bias = store.add_zeros(prefix + ".sex.bias", {dim});
  age_weight = store.add_weight(prefix + ".age.weight", {dim}, rng);
  age_bias = store.add_zeros(prefix + ".age.bias", {dim});
}

std::size_t TextEmbedder::token_count() const {
  std::size_t n = 2;
  if (options_.use_cc) n += options_.tokenized ? layout_.cc_count : 1;
  if (options_.use_lab) n += options_.tokenized ? layout_.lab_count : 1;
  return n;
}

TokenSequence TextEmbedder::embed(const Batch& batch) const {
  const std::size_t b = batch.size;
  TokenSequence out;
  std::vector<Tensor> parts;
  if (options_.use_cc) {
    const std::size_t n = options_.tokenized ? layout_.cc_count : 1;
    if (!layout_.structured_cc) {
      if (batch.cc_ids.size() != b * layout_.cc_count) throw ShapeError("batch chief-complaint ids have wrong count");
      if (options_.tokenized) {
        parts.push_back(embedding(word_table, batch.cc_ids, b, layout_.cc_count));
      } else {
        parts.push_back(reshape(masked_mean_embedding(word_table, batch.cc_ids, b, layout_.cc_count), {b, 1, dim_}));
      }
    } else {
      if (!batch.cc_values.defined() || batch.cc_values.shape() != Shape{b, layout_.cc_count}) {
        throw ShapeError("batch chief-complaint components have wrong shape");
      }
      if (options_.tokenized) {
        parts.push_back(scalar_tokens(batch.cc_values, cc_weight, cc_bias));
      } else {
        parts.push_back(reshape(linear(batch.cc_values, cc_weight, cc_bias), {b, 1, dim_}));
      }
    }
    out.tags.insert(out.tags.end(), n, Modality::cc);
  }
  if (options_.use_lab) {
    if (batch.lab.shape() != Shape{b, layout_.lab_count}) {
      throw ShapeError("batch lab values have shape " + shape_to_string(batch.lab.shape()) + ", expected " +
                       shape_to_string({b, layout_.lab_count}));
    }
    if (options_.tokenized) {
      parts.push_back(scalar_tokens(batch.lab, lab_weight, lab_bias));
      out.tags.insert(out.tags.end(), layout_.lab_count, Modality::lab);
    } else {
      parts.push_back(reshape(linear(batch.lab, lab_weight, lab_bias), {b, 1, dim_}));
      out.tags.push_back(Modality::lab);
    }
  }
  parts.push_back(scalar_tokens(batch.sex, sex_weight, sex_bias));
  out.tags.push_back(Modality::sex);
  parts.push_back(scalar_tokens(batch.age, age_weight, age_bias));
  out.tags.push_back(Modality::age);
  out.tokens = concat_tokens(parts);
  return out;
}

}  // namespace mdt
