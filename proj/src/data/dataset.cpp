#include "mdt/dataset.h"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mdt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::chrono::sys_days parse_date(const std::string& date) {
  int y = 0;
  unsigned m = 0, d = 0;
  char tail = 0;
  if (date.size() != 10 || std::sscanf(date.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3 ||
      date[4] != '-' || date[7] != '-') {
    throw ContractError("not a YYYY-MM-DD date: '" + date + "'");
  }
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) throw ContractError("invalid calendar date: '" + date + "'");
  return std::chrono::sys_days{ymd};
}

std::string format_date(std::chrono::sys_days days) {
  const std::chrono::year_month_day ymd{days};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

std::string record_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "P%05zu", index + 1);
  return buf;
}

void add_motif(Image& img, std::size_t cell, std::size_t patch, float intensity) {
  const std::size_t grid = img.width / patch;
  const std::size_t cy = cell / grid, cx = cell % grid;
  const std::size_t margin = patch / 4;
  for (std::size_t y = margin; y < patch - margin; ++y) {
    for (std::size_t x = margin; x < patch - margin; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) img.at(cy * patch + y, cx * patch + x, c) += intensity;
    }
  }
}

const char* mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::none: return "none";
    case Mechanism::cross: return "cross";
    case Mechanism::image_only: return "image_only";
    case Mechanism::text_only: return "text_only";
  }
  return "none";
}

Mechanism mechanism_from(const std::string& s) {
  for (auto m : {Mechanism::none, Mechanism::cross, Mechanism::image_only, Mechanism::text_only}) {
    if (s == mechanism_name(m)) return m;
  }
  throw IoError("unknown mechanism '" + s + "'");
}

json spec_to_json(const SyntheticSpec& s) {
  return json{{"records", s.records},
              {"classes", s.classes},
              {"task", s.task},
              {"image_size", s.image_size},
              {"patch", s.patch},
              {"cc_count", s.cc_count},
              {"lab_count", s.lab_count},
              {"vocab_size", s.vocab_size},
              {"cross_modal_fraction", s.cross_modal_fraction},
              {"prevalence", s.prevalence},
              {"noise", s.noise},
              {"motif_intensity", s.motif_intensity},
              {"lab_missing_rate", s.lab_missing_rate},
              {"first_date", s.first_date},
              {"date_span_days", s.date_span_days},
              {"train_fraction", s.train_fraction},
              {"val_fraction", s.val_fraction},
              {"seed", s.seed}};
}

SyntheticSpec spec_from_json(const json& j) {
  SyntheticSpec s;
  s.records = j.at("records");
  s.classes = j.at("classes");
  s.task = j.at("task");
  s.image_size = j.at("image_size");
  s.patch = j.at("patch");
  s.cc_count = j.at("cc_count");
  s.lab_count = j.at("lab_count");
  s.vocab_size = j.at("vocab_size");
  s.cross_modal_fraction = j.at("cross_modal_fraction");
  s.prevalence = j.at("prevalence");
  s.noise = j.at("noise");
  s.motif_intensity = j.at("motif_intensity");
  s.lab_missing_rate = j.at("lab_missing_rate");
  s.first_date = j.at("first_date");
  s.date_span_days = j.at("date_span_days");
  s.train_fraction = j.at("train_fraction");
  s.val_fraction = j.at("val_fraction");
  s.seed = j.at("seed");
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void check_iso_date(const std::string& date) { parse_date(date); }

std::string add_days(const std::string& date, long days) {
  return format_date(parse_date(date) + std::chrono::days{days});
}

TaskLayout SyntheticSpec::layout() const {
  TaskLayout t = task == 2 ? TaskLayout::task2() : TaskLayout::task1();
  t.image_size = image_size;
  t.resize_size = image_size;
  t.patch = patch;
  t.cc_count = cc_count;
  t.lab_count = lab_count;
  t.class_count = classes;
  t.vocab_size = vocab_size;
  return t;
}

void SyntheticSpec::validate() const {
  if (classes == 0) throw ContractError("synthetic data needs at least one class");
  if (records == 0) throw ContractError("synthetic data needs at least one record");
  if (task != 1 && task != 2) throw ContractError("task must be 1 or 2");
  if (patch == 0 || image_size % patch != 0) {
    throw ShapeError("image size " + std::to_string(image_size) + " is not divisible by patch " +
                     std::to_string(patch));
  }
  const std::size_t cells = (image_size / patch) * (image_size / patch);
  if (2 * classes > cells) throw ContractError("image grid has too few patches for two motifs per class");
  if (!(cross_modal_fraction >= 0.0 && cross_modal_fraction <= 1.0)) {
    throw ContractError("cross_modal_fraction must lie in [0, 1]");
  }
  if (!(prevalence > 0.0 && prevalence < 1.0)) throw ContractError("prevalence must lie in (0, 1)");
  if (!(noise >= 0.0)) throw ContractError("noise must be nonnegative");
  if (!(lab_missing_rate >= 0.0 && lab_missing_rate < 1.0)) throw ContractError("lab_missing_rate must lie in [0, 1)");
  if (cc_count < 2 * classes + 1) throw ContractError("chief complaint too short to hold every cue word");
  if (task == 1 && vocab_size < 2 + 2 * classes + 4) throw ContractError("vocabulary too small for the cue words");
  if (!(train_fraction > 0.0 && val_fraction > 0.0 && train_fraction + val_fraction < 1.0)) {
    throw ContractError("split fractions must be positive and leave room for a test split");
  }
  if (date_span_days == 0) throw ContractError("date span must be positive");
  check_iso_date(first_date);
}

SyntheticDataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.spec = spec;
  ds.layout = spec.layout();
  const std::size_t k = spec.classes;
  const std::size_t grid = spec.image_size / spec.patch;
  Rng rng(spec.seed);

  std::vector<std::size_t> cells(grid * grid);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  rng.shuffle(cells);
  ds.rule.cross_cells.assign(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(k));
  ds.rule.strong_cells.assign(cells.begin() + static_cast<std::ptrdiff_t>(k),
                              cells.begin() + static_cast<std::ptrdiff_t>(2 * k));

  std::vector<std::int32_t> fillers;
  if (spec.task == 1) {
    for (std::size_t c = 0; c < k; ++c) ds.rule.cue_words.push_back(ds.vocabulary.add("cue_" + std::to_string(c)));
    for (std::size_t c = 0; c < k; ++c) {
      ds.rule.strong_words.push_back(ds.vocabulary.add("sign_" + std::to_string(c)));
    }
    for (std::size_t w = 0; ds.vocabulary.size() < spec.vocab_size; ++w) {
      fillers.push_back(ds.vocabulary.add("word_" + std::to_string(w)));
    }
  } else {
    for (std::size_t c = 0; c < k; ++c) {
      ds.rule.cue_words.push_back(static_cast<std::int32_t>(c));
      ds.rule.strong_words.push_back(static_cast<std::int32_t>(k + c));
    }
  }

  const auto first = parse_date(spec.first_date);
  const std::size_t slices = ds.layout.slices;
  for (std::size_t i = 0; i < spec.records; ++i) {
    PatientRecord rec;
    LatentCues cues;
    rec.id = record_id(i);
    rec.admission_date = format_date(first + std::chrono::days{static_cast<long>(i * spec.date_span_days / spec.records)});
    for (std::size_t c = 0; c < k; ++c) {
      const bool positive = rng.bernoulli(spec.prevalence);
      Mechanism mech = Mechanism::none;
      if (positive) {
        const double u = rng.uniform();
        const double f = spec.cross_modal_fraction;
        mech = u < f ? Mechanism::cross : (u < f + (1 - f) / 2 ? Mechanism::image_only : Mechanism::text_only);
      }
      int a = 0, b = 0;
      if (mech == Mechanism::cross) {
        a = b = 1;
      } else {
        // exactly one conjunctive cue, so it carries no information alone
        a = rng.bernoulli(0.5) ? 1 : 0;
        b = 1 - a;
      }
      cues.cross_image.push_back(a);
      cues.cross_text.push_back(b);
      cues.strong_image.push_back(mech == Mechanism::image_only);
      cues.strong_text.push_back(mech == Mechanism::text_only);
      cues.mechanism.push_back(mech);
      rec.labels.push_back(positive ? 1 : 0);
    }

    for (std::size_t s = 0; s < slices; ++s) {
      Image img = Image::filled(spec.image_size, spec.image_size, 1, 0.0f);
      if (spec.noise > 0) {
        for (auto& v : img.data) v = static_cast<float>(spec.noise * rng.normal());
      }
      for (std::size_t c = 0; c < k; ++c) {
        if (cues.cross_image[c]) add_motif(img, ds.rule.cross_cells[c], spec.patch, static_cast<float>(spec.motif_intensity));
        if (cues.strong_image[c]) {
          add_motif(img, ds.rule.strong_cells[c], spec.patch, static_cast<float>(spec.motif_intensity));
        }
      }
      rec.images.push_back(std::move(img));
      rec.image_paths.push_back(slices == 1 ? "images/" + rec.id + ".mimg"
                                            : "images/" + rec.id + "_" + std::to_string(s) + ".mimg");
    }

    if (spec.task == 1) {
      std::vector<std::int32_t> words;
      for (std::size_t c = 0; c < k; ++c) {
        if (cues.cross_text[c]) words.push_back(ds.rule.cue_words[c]);
        if (cues.strong_text[c]) words.push_back(ds.rule.strong_words[c]);
      }
      const std::size_t room = spec.cc_count - words.size();
      const std::size_t n_fill = 1 + static_cast<std::size_t>(rng.below(room));
      for (std::size_t f = 0; f < n_fill; ++f) words.push_back(fillers[rng.below(fillers.size())]);
      rng.shuffle(words);
      rec.cc_ids = std::move(words);
    } else {
      rec.cc_values.assign(spec.cc_count, 0.0);
      for (std::size_t c = 0; c < k; ++c) {
        rec.cc_values[c] = cues.cross_text[c];
        rec.cc_values[k + c] = cues.strong_text[c];
      }
      for (std::size_t j = 2 * k; j < spec.cc_count; ++j) rec.cc_values[j] = rng.bernoulli(0.3) ? 1.0 : 0.0;
    }

    for (std::size_t j = 0; j < spec.lab_count; ++j) {
      const double value = 10.0 * static_cast<double>(j + 1) + static_cast<double>(j + 1) * rng.normal();
      if (rng.bernoulli(spec.lab_missing_rate)) {
        rec.lab.push_back(std::nullopt);
      } else {
        rec.lab.push_back(std::round(value * 1000.0) / 1000.0);
      }
    }
    rec.sex = rng.bernoulli(0.5) ? 1 : 0;
    rec.age = static_cast<double>(18 + rng.below(73));
    ds.records.push_back(std::move(rec));
    ds.latent.push_back(std::move(cues));
  }

  const auto boundary = [&](double fraction) {
    const auto idx = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(spec.records)));
    return ds.records[std::min(spec.records - 1, std::max<std::size_t>(idx, 1) - 1)].admission_date;
  };
  ds.boundaries = {boundary(spec.train_fraction), boundary(spec.train_fraction + spec.val_fraction)};
  return ds;
}

std::string encode_record(const PatientRecord& r) {
  json lab = json::array();
  for (const auto& v : r.lab) lab.push_back(v ? json(*v) : json(nullptr));
  json cc = r.cc_values.empty() ? json(r.cc_ids) : json(r.cc_values);
  json j{{"id", r.id},   {"admission_date", r.admission_date}, {"image_paths", r.image_paths}, {"cc", cc},
         {"lab", lab},   {"sex", r.sex},
         {"age", r.age}, {"labels", r.labels}};
  return j.dump();
}

PatientRecord decode_record(std::string_view line, std::size_t line_no) {
  const auto fail = [&](const std::string& what) {
    return IoError("manifest line " + std::to_string(line_no) + ": " + what);
  };
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw fail(std::string("malformed JSON: ") + e.what());
  }
  try {
    PatientRecord r;
    r.id = j.at("id").get<std::string>();
    r.admission_date = j.at("admission_date").get<std::string>();
    check_iso_date(r.admission_date);
    r.image_paths = j.at("image_paths").get<std::vector<std::string>>();
    const auto& cc = j.at("cc");
    if (!cc.is_array()) throw fail("cc must be an array");
    const bool ids = std::all_of(cc.begin(), cc.end(), [](const json& v) { return v.is_number_integer(); });
    if (ids) {
      r.cc_ids = cc.get<std::vector<std::int32_t>>();
    } else {
      r.cc_values = cc.get<std::vector<double>>();
    }
    for (const auto& v : j.at("lab")) {
      if (v.is_null()) {
        r.lab.push_back(std::nullopt);
      } else {
        r.lab.push_back(v.get<double>());
      }
    }
    r.sex = j.at("sex").get<int>();
    r.age = j.at("age").get<double>();
    r.labels = j.at("labels").get<std::vector<int>>();
    return r;
  } catch (const json::exception& e) {
    throw fail(e.what());
  } catch (const ContractError& e) {
    throw fail(e.what());
  }
}

void write_manifest(const fs::path& dir, std::span<const PatientRecord> records) {
  fs::create_directories(dir);
  std::string text;
  for (const auto& r : records) {
    if (!r.images.empty() && r.images.size() != r.image_paths.size()) {
      throw ContractError("record '" + r.id + "' has images without matching paths");
    }
    for (std::size_t s = 0; s < r.images.size(); ++s) {
      const fs::path p = dir / r.image_paths[s];
      fs::create_directories(p.parent_path());
      write_mimg(p, r.images[s]);
    }
    text += encode_record(r);
    text += '\n';
  }
  write_text(dir / "manifest.jsonl", text);
}

std::vector<PatientRecord> read_manifest(const fs::path& dir, bool load_images) {
  const fs::path path = dir / "manifest.jsonl";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  std::vector<PatientRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    PatientRecord r = decode_record(line, line_no);
    if (load_images) {
      for (const auto& p : r.image_paths) r.images.push_back(read_mimg(dir / p));
    } else {
      for (const auto& p : r.image_paths) {
        if (!fs::exists(dir / p)) throw IoError("missing image file: " + (dir / p).string());
      }
    }
    records.push_back(std::move(r));
  }
  return records;
}

void write_dataset(const SyntheticDataset& ds, const fs::path& dir) {
  write_manifest(dir, ds.records);
  std::string latent;
  for (std::size_t i = 0; i < ds.latent.size(); ++i) {
    const auto& c = ds.latent[i];
    json mech = json::array();
    for (auto m : c.mechanism) mech.push_back(mechanism_name(m));
    latent += json{{"id", ds.records[i].id},         {"cross_image", c.cross_image},
                   {"cross_text", c.cross_text},     {"strong_image", c.strong_image},
                   {"strong_text", c.strong_text},   {"mechanism", mech}}
                  .dump();
    latent += '\n';
  }
  write_text(dir / "latent.jsonl", latent);
  json planted{{"spec", spec_to_json(ds.spec)},
               {"cross_cells", ds.rule.cross_cells},
               {"strong_cells", ds.rule.strong_cells},
               {"cue_words", ds.rule.cue_words},
               {"strong_words", ds.rule.strong_words},
               {"boundaries", ds.boundaries}};
  write_text(dir / "planted.json", planted.dump(2) + "\n");
  ds.vocabulary.save(dir / "vocab.jsonl");
}

SyntheticDataset read_dataset(const fs::path& dir, bool load_images) {
  SyntheticDataset ds;
  std::ifstream in(dir / "planted.json");
  if (!in) throw IoError("cannot open " + (dir / "planted.json").string());
  try {
    const json planted = json::parse(in);
    ds.spec = spec_from_json(planted.at("spec"));
    ds.rule.cross_cells = planted.at("cross_cells").get<std::vector<std::size_t>>();
    ds.rule.strong_cells = planted.at("strong_cells").get<std::vector<std::size_t>>();
    ds.rule.cue_words = planted.at("cue_words").get<std::vector<std::int32_t>>();
    ds.rule.strong_words = planted.at("strong_words").get<std::vector<std::int32_t>>();
    ds.boundaries = planted.at("boundaries").get<std::array<std::string, 2>>();
  } catch (const json::exception& e) {
    throw IoError((dir / "planted.json").string() + ": " + e.what());
  }
  ds.layout = ds.spec.layout();
  ds.records = read_manifest(dir, load_images);
  if (fs::exists(dir / "vocab.jsonl")) ds.vocabulary = Vocabulary::load(dir / "vocab.jsonl");
  std::ifstream lat(dir / "latent.jsonl");
  std::string line;
  std::size_t line_no = 0;
  while (lat && std::getline(lat, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      LatentCues c;
      c.cross_image = j.at("cross_image").get<std::vector<int>>();
      c.cross_text = j.at("cross_text").get<std::vector<int>>();
      c.strong_image = j.at("strong_image").get<std::vector<int>>();
      c.strong_text = j.at("strong_text").get<std::vector<int>>();
      for (const auto& m : j.at("mechanism")) c.mechanism.push_back(mechanism_from(m.get<std::string>()));
      ds.latent.push_back(std::move(c));
    } catch (const json::exception& e) {
      throw IoError("latent.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ds;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

std::string sha256_file(const fs::path& path) {
  const auto bytes = read_file(path);
  return sha256_hex(std::string_view(bytes.data(), bytes.size()));
}

DatasetSplit split_by_date(std::span<const PatientRecord> records, const std::string& first,
                           const std::string& second) {
  const auto b1 = parse_date(first), b2 = parse_date(second);
  if (b2 < b1) throw ContractError("split boundaries out of order: " + first + " > " + second);
  DatasetSplit split;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto d = parse_date(records[i].admission_date);
    if (d <= b1) {
      split.train.push_back(i);
    } else if (d <= b2) {
      split.val.push_back(i);
    } else {
      split.test.push_back(i);
    }
  }
  return split;
}

}  // namespace mdt
