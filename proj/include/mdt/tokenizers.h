#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mdt/image.h"
#include "mdt/parameters.h"
#include "mdt/random.h"
#include "mdt/tensor.h"

namespace mdt {

enum class Modality : std::uint8_t { image, cc, lab, sex, age, cls };

std::string_view modality_name(Modality m);

/// Token and class counts of a diagnosis task.
struct TaskLayout {
  int task = 1;
  std::size_t image_size = 224;
  std::size_t resize_size = 256;
  std::size_t patch = 16;
  std::size_t channels = 1;
  std::size_t slices = 1;
  std::size_t cc_count = 40;
  std::size_t lab_count = 92;
  std::size_t class_count = 8;
  std::size_t vocab_size = 512;
  /// Task 2 chief complaints are a fixed-length real vector, not word ids.
  bool structured_cc = false;

  /// Chest radiograph diagnosis, 8 diseases.
  static TaskLayout task1();
  /// CT-based adverse outcome prediction, 3 outcomes over 16 slices.
  static TaskLayout task2();

  std::size_t grid_side() const { return image_size / patch; }
  std::size_t image_tokens() const { return grid_side() * grid_side(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t text_tokens() const { return cc_count + lab_count + 2; }

  /// Throws ShapeError/ContractError for non-divisible images or zero counts.
  void validate() const;
};

struct PatientRecord {
  std::string id;
  std::string admission_date;  // YYYY-MM-DD
  std::vector<std::string> image_paths;
  std::vector<Image> images;
  std::vector<std::int32_t> cc_ids;  // unstructured chief complaint
  std::vector<double> cc_values;     // structured chief complaint
  std::vector<std::optional<double>> lab;
  int sex = 0;
  double age = 0.0;
  std::vector<int> labels;

  bool operator==(const PatientRecord&) const = default;
};

/// Checks label, lab and chief-complaint counts against the layout.
void validate_record(const PatientRecord& record, const TaskLayout& layout);

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnknownId = 1;

/// Keeps the first `length` ids, or pads the tail with kPadId.
std::vector<std::int32_t> pad_or_truncate_cc(std::span<const std::int32_t> ids, std::size_t length = 40);

/// Min-max scaling fitted on the training split. Present values map to
/// (v − min)/(max − min) clipped to [0, 1]; missing values map to −1. An item
/// with max == min maps every present value to 0.
std::vector<double> normalize_lab(std::span<const std::optional<double>> values, std::span<const double> train_min,
                                  std::span<const double> train_max);

/// Replaces missing entries by the training medians.
std::vector<std::optional<double>> impute_median(std::span<const std::optional<double>> values,
                                                 std::span<const double> train_medians);

/// Per-item lab statistics over the present values of a split. Items with no
/// present value get min = max = median = 0.
struct LabStats {
  std::vector<double> min;
  std::vector<double> max;
  std::vector<double> median;

  static LabStats fit(std::span<const PatientRecord> records, std::size_t lab_count);
  void save(const std::filesystem::path& path) const;
  static LabStats load(const std::filesystem::path& path);
  bool operator==(const LabStats&) const = default;
};

/// Word ↔ id map with PAD = 0 and UNK = 1; ids are dense.
class Vocabulary {
 public:
  Vocabulary();

  std::int32_t add(const std::string& word);
  /// kUnknownId for words never added.
  std::int32_t id(const std::string& word) const;
  const std::string& word(std::int32_t id) const;
  std::size_t size() const { return words_.size(); }

  /// JSON lines of {"word": ..., "id": ...}.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

/// Flattens non-overlapping patch×patch tiles in row-major tile order; each
/// row is the tile's pixels in (y, x, channel) order → [tiles × patch²·C].
Tensor patchify(const Image& image, std::size_t patch);

/// Model inputs for B records, each with S image slices.
struct Batch {
  std::size_t size = 0;
  std::size_t slices = 1;
  Tensor patches;                   // [B·S × tiles × patch_dim], slice-major within a record
  std::vector<std::int32_t> cc_ids;  // B × cc_count
  Tensor cc_values;                 // [B × cc_count] (structured chief complaint)
  Tensor lab;                       // [B × lab_count], normalized
  Tensor sex;                       // [B × 1]
  Tensor age;                       // [B × 1], years / 100
  Tensor labels;                    // [B × classes]
};

struct BatchOptions {
  bool training = false;
  /// Random-area crop and flip; only meaningful with training = true.
  bool augment = false;
  Rng* rng = nullptr;
};

/// Image preparation shared by batching: augmentation in training mode,
/// otherwise images already at the model resolution pass through and others
/// go through preprocess_eval_image.
Image prepare_image(const Image& image, const TaskLayout& layout, const BatchOptions& options);

Batch make_batch(std::span<const PatientRecord* const> records, const TaskLayout& layout, const LabStats& stats,
                 const BatchOptions& options = {});

/// Token embeddings [B × N × D] with one modality tag per token.
struct TokenSequence {
  Tensor tokens;
  std::vector<Modality> tags;
};

/// Linear patch projection plus a learned 1-D positional embedding.
class ImageEmbedder {
 public:
  ImageEmbedder() = default;
  ImageEmbedder(ParameterStore& store, const std::string& prefix, const TaskLayout& layout, std::size_t dim,
                Rng& rng);

  /// patches [B × tiles × patch_dim] → tokens [B × tiles × D].
  TokenSequence embed(const Tensor& patches, double dropout_rate, bool training, Rng* rng) const;

  Tensor projection, projection_bias, positions;
};

/// Chief-complaint, lab, sex and age tokens in that order.
///
/// Tokenized mode: word embeddings (or a shared scalar projection per
/// structured component) for the chief complaint, a shared scalar projection
/// per lab item, and separate scalar projections for sex and age. Untokenized
/// mode collapses the chief complaint into one averaged token and the labs
/// into one projected token.
class TextEmbedder {
 public:
  struct Options {
    bool tokenized = true;
    bool use_cc = true;
    bool use_lab = true;
  };

  TextEmbedder() = default;
  TextEmbedder(ParameterStore& store, const std::string& prefix, const TaskLayout& layout, std::size_t dim,
               Options options, Rng& rng);

  TokenSequence embed(const Batch& batch) const;
  std::size_t token_count() const;

  Tensor word_table;  // unstructured chief complaint
  Tensor cc_weight, cc_bias;
  Tensor lab_weight, lab_bias;
  Tensor sex_weight, sex_bias;
  Tensor age_weight, age_bias;

 private:
  TaskLayout layout_;
  Options options_;
  std::size_t dim_ = 0;
};

}  // namespace mdt
