#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mdt/tokenizers.h"

namespace mdt {

/// Parameters of the synthetic multimodal dataset.
///
/// Each class has a planted rule. A positive case is produced by one of
/// three mechanisms: with probability cross_modal_fraction both a
/// class-specific image motif and a class-specific cue word are present
/// (their conjunction is the signal); otherwise, with equal odds, a strong
/// image-only motif or a strong text-only word marks it. Negatives carry
/// exactly one of the two conjunctive cues, so neither modality alone
/// separates the conjunctive positives.
struct SyntheticSpec {
  std::size_t records = 2000;
  std::size_t classes = 3;
  int task = 1;
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::size_t cc_count = 8;
  std::size_t lab_count = 8;
  std::size_t vocab_size = 64;
  double cross_modal_fraction = 0.7;
  double prevalence = 0.3;
  /// Standard deviation of the additive pixel noise; 0 gives noiseless images.
  double noise = 0.3;
  double motif_intensity = 1.0;
  double lab_missing_rate = 0.1;
  std::string first_date = "2018-01-01";
  std::size_t date_span_days = 730;
  /// Split fractions used to place the date boundaries.
  double train_fraction = 0.6;
  double val_fraction = 0.2;
  std::uint64_t seed = 1;

  TaskLayout layout() const;
  void validate() const;
};

/// Where the generator planted each class's cues.
struct PlantedRule {
  std::vector<std::size_t> cross_cells;   // patch index of the conjunctive motif
  std::vector<std::size_t> strong_cells;  // patch index of the image-only motif
  std::vector<std::int32_t> cue_words;    // conjunctive word id (or component index)
  std::vector<std::int32_t> strong_words; // text-only word id (or component index)
};

enum class Mechanism : std::uint8_t { none, cross, image_only, text_only };

/// Per-class latent cue variables of one record.
struct LatentCues {
  std::vector<int> cross_image, cross_text, strong_image, strong_text;
  std::vector<Mechanism> mechanism;
};

struct SyntheticDataset {
  SyntheticSpec spec;
  TaskLayout layout;
  PlantedRule rule;
  Vocabulary vocabulary;
  std::vector<PatientRecord> records;
  std::vector<LatentCues> latent;
  /// Admission-date boundaries: train ≤ first < val ≤ second < test.
  std::array<std::string, 2> boundaries;
};

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec);

/// Writes manifest.jsonl, images/*.mimg, latent.jsonl, planted.json and
/// vocab.jsonl into `dir` (created if needed).
void write_dataset(const SyntheticDataset& dataset, const std::filesystem::path& dir);

/// Reads what write_dataset produced. Latent cues are read when present.
SyntheticDataset read_dataset(const std::filesystem::path& dir, bool load_images = true);

// -- manifest records ---------------------------------------------------------

/// One JSON line: {id, admission_date, image_paths, cc, lab, sex, age, labels};
/// missing labs are null.
std::string encode_record(const PatientRecord& record);
/// Throws IoError naming `line_no` on malformed input.
PatientRecord decode_record(std::string_view line, std::size_t line_no);

/// Writes manifest.jsonl plus every loaded image to its relative path.
void write_manifest(const std::filesystem::path& dir, std::span<const PatientRecord> records);
std::vector<PatientRecord> read_manifest(const std::filesystem::path& dir, bool load_images = true);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_hex(std::string_view bytes);

// -- splits -------------------------------------------------------------------

struct DatasetSplit {
  std::vector<std::size_t> train, val, test;
};

/// train: date ≤ first; val: first < date ≤ second; test: later.
DatasetSplit split_by_date(std::span<const PatientRecord> records, const std::string& first,
                           const std::string& second);

/// Throws ContractError unless `date` is a valid YYYY-MM-DD date.
void check_iso_date(const std::string& date);
std::string add_days(const std::string& date, long days);

}  // namespace mdt
