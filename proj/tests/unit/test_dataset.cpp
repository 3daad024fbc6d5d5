#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "mdt/dataset.h"
#include "mdt/image.h"
#include "mdt/metrics.h"
#include "test_util.h"

using namespace mdt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mdt_test_dataset_" + name);
  fs::remove_all(p);
  return p;
}

SyntheticSpec small_spec(double fraction, double noise, std::uint64_t seed) {
  SyntheticSpec s;
  s.records = 2000;
  s.cross_modal_fraction = fraction;
  s.noise = noise;
  s.seed = seed;
  return s;
}

std::vector<int> class_labels(const SyntheticDataset& ds, std::size_t c) {
  std::vector<int> y;
  for (const auto& r : ds.records) y.push_back(r.labels[c]);
  return y;
}

// Mean intensity over a patch cell of the first slice.
double cell_mean(const Image& img, std::size_t cell, std::size_t patch) {
  const std::size_t grid = img.width / patch, cy = cell / grid, cx = cell % grid;
  double s = 0.0;
  for (std::size_t y = 0; y < patch; ++y) {
    for (std::size_t x = 0; x < patch; ++x) s += img.at(cy * patch + y, cx * patch + x);
  }
  return s / static_cast<double>(patch * patch);
}

// Plain batch gradient descent on the mean logistic loss.
std::vector<double> logistic_probe(const std::vector<std::vector<double>>& x, const std::vector<int>& y) {
  const std::size_t n = x.size(), d = x.front().size();
  std::vector<double> w(d + 1, 0.0);
  for (int it = 0; it < 3000; ++it) {
    std::vector<double> g(d + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double z = w[d];
      for (std::size_t k = 0; k < d; ++k) z += w[k] * x[i][k];
      const double err = 1.0 / (1.0 + std::exp(-z)) - y[i];
      for (std::size_t k = 0; k < d; ++k) g[k] += err * x[i][k];
      g[d] += err;
    }
    for (std::size_t k = 0; k <= d; ++k) w[k] -= 2.0 * g[k] / static_cast<double>(n);
  }
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    double z = w[d];
    for (std::size_t k = 0; k < d; ++k) z += w[k] * x[i][k];
    scores[i] = z;
  }
  return scores;
}

// Bayes score: the empirical positive rate of each distinct feature vector.
std::vector<double> bayes_scores(const std::vector<std::vector<double>>& x, const std::vector<int>& y) {
  std::map<std::vector<double>, std::pair<double, double>> groups;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto& g = groups[x[i]];
    g.first += y[i];
    g.second += 1.0;
  }
  std::vector<double> s;
  for (const auto& xi : x) s.push_back(groups[xi].first / groups[xi].second);
  return s;
}

}  // namespace

TEST_CASE("sha256 test vectors") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("same seed gives a byte-identical manifest") {
  SyntheticSpec spec = small_spec(0.7, 0.3, 5);
  spec.records = 60;
  const fs::path a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
  write_dataset(generate_synthetic_dataset(spec), a);
  write_dataset(generate_synthetic_dataset(spec), b);
  spec.seed = 6;
  write_dataset(generate_synthetic_dataset(spec), c);
  CHECK(sha256_file(a / "manifest.jsonl") == sha256_file(b / "manifest.jsonl"));
  CHECK(sha256_file(a / "latent.jsonl") == sha256_file(b / "latent.jsonl"));
  CHECK(sha256_file(a / "images" / "P00001.mimg") == sha256_file(b / "images" / "P00001.mimg"));
  CHECK(sha256_file(a / "manifest.jsonl") != sha256_file(c / "manifest.jsonl"));
  for (const auto& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("generated dataset round trips through its files") {
  SyntheticSpec spec = small_spec(0.7, 0.3, 3);
  spec.records = 40;
  const SyntheticDataset ds = generate_synthetic_dataset(spec);
  const fs::path dir = scratch("rt");
  write_dataset(ds, dir);
  const SyntheticDataset back = read_dataset(dir);
  CHECK(back.records == ds.records);
  CHECK(back.rule.cross_cells == ds.rule.cross_cells);
  CHECK(back.rule.strong_cells == ds.rule.strong_cells);
  CHECK(back.rule.cue_words == ds.rule.cue_words);
  CHECK(back.boundaries == ds.boundaries);
  REQUIRE(back.latent.size() == ds.latent.size());
  CHECK(back.latent[7].mechanism == ds.latent[7].mechanism);
  CHECK(back.vocabulary.size() == ds.vocabulary.size());
  fs::remove_all(dir);
}

TEST_CASE("generator rejects invalid specs") {
  SyntheticSpec s;
  s.classes = 0;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = SyntheticSpec{};
  s.patch = 7;
  CHECK_THROWS_AS(s.validate(), ShapeError);
  s = SyntheticSpec{};
  s.cross_modal_fraction = 1.5;
  CHECK_THROWS_AS(s.validate(), ContractError);
  s = SyntheticSpec{};
  s.patch = 16;  // a 2x2 grid cannot hold two motifs for each of 3 classes
  CHECK_THROWS_AS(s.validate(), ContractError);
}

TEST_CASE("records carry exactly the planted cues") {
  const SyntheticDataset ds = generate_synthetic_dataset(small_spec(0.7, 0.0, 9));
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& rec = ds.records[i];
    const auto& cues = ds.latent[i];
    for (std::size_t c = 0; c < ds.layout.class_count; ++c) {
      const bool has_cue = std::count(rec.cc_ids.begin(), rec.cc_ids.end(), ds.rule.cue_words[c]) > 0;
      const bool has_sign = std::count(rec.cc_ids.begin(), rec.cc_ids.end(), ds.rule.strong_words[c]) > 0;
      CHECK(has_cue == (cues.cross_text[c] == 1));
      CHECK(has_sign == (cues.strong_text[c] == 1));
      CHECK((cell_mean(rec.images[0], ds.rule.cross_cells[c], ds.spec.patch) > 0.1) == (cues.cross_image[c] == 1));
      CHECK((cell_mean(rec.images[0], ds.rule.strong_cells[c], ds.spec.patch) > 0.1) == (cues.strong_image[c] == 1));
      CHECK(rec.labels[c] == (cues.mechanism[c] != Mechanism::none ? 1 : 0));
      if (cues.mechanism[c] != Mechanism::cross) CHECK(cues.cross_image[c] + cues.cross_text[c] == 1);
    }
  }
}

TEST_CASE("fully conjunctive data: one modality reaches 0.75, both reach 1") {
  const SyntheticDataset ds = generate_synthetic_dataset(small_spec(1.0, 0.0, 4));
  for (std::size_t c = 0; c < ds.layout.class_count; ++c) {
    const auto y = class_labels(ds, c);
    std::vector<double> image, text, joint;
    std::size_t neg = 0, neg_with_motif = 0;
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
      const double a = cell_mean(ds.records[i].images[0], ds.rule.cross_cells[c], ds.spec.patch) > 0.1 ? 1.0 : 0.0;
      const auto& ids = ds.records[i].cc_ids;
      const double b = std::count(ids.begin(), ids.end(), ds.rule.cue_words[c]) > 0 ? 1.0 : 0.0;
      image.push_back(a);
      text.push_back(b);
      joint.push_back(a * b);
      if (!y[i]) {
        ++neg;
        neg_with_motif += a > 0;
      }
    }
    // positives always carry the motif, so AUROC = 1 - q/2 for the negative
    // motif rate q, and q = 1/2 in expectation
    const double q = static_cast<double>(neg_with_motif) / static_cast<double>(neg);
    CHECK(auroc(image, y) == doctest::Approx(1.0 - q / 2.0).epsilon(1e-12));
    CHECK(std::abs(q - 0.5) < 0.05);
    CHECK(auroc(text, y) < 0.78);
    CHECK(auroc(joint, y) == 1.0);
  }
}

TEST_CASE("without conjunctive cases image-only cues are exact") {
  const SyntheticDataset ds = generate_synthetic_dataset(small_spec(0.0, 0.0, 4));
  for (const auto& cues : ds.latent) {
    for (auto m : cues.mechanism) CHECK(m != Mechanism::cross);
  }
}

TEST_CASE("logistic probe on latent cues finds the planted signal") {
  const SyntheticDataset ds = generate_synthetic_dataset(small_spec(0.7, 0.0, 12));
  for (std::size_t c = 0; c < ds.layout.class_count; ++c) {
    const auto y = class_labels(ds, c);
    std::vector<std::vector<double>> all, image, text;
    for (const auto& l : ds.latent) {
      all.push_back({double(l.cross_image[c]), double(l.cross_text[c]), double(l.strong_image[c]),
                     double(l.strong_text[c])});
      image.push_back({double(l.cross_image[c]), double(l.strong_image[c])});
      text.push_back({double(l.cross_text[c]), double(l.strong_text[c])});
    }
    CHECK(auroc(logistic_probe(all, y), y) > 0.99);
    const double image_bound = auroc(bayes_scores(image, y), y);
    const double text_bound = auroc(bayes_scores(text, y), y);
    CHECK(std::abs(auroc(logistic_probe(image, y), y) - image_bound) < 0.05);
    CHECK(std::abs(auroc(logistic_probe(text, y), y) - text_bound) < 0.05);
    CHECK(image_bound < 0.95);
    CHECK(text_bound < 0.95);
  }
}

TEST_CASE("structured task-2 data uses component cues and slice stacks") {
  SyntheticSpec spec = small_spec(0.7, 0.0, 2);
  spec.task = 2;
  spec.records = 30;
  const SyntheticDataset ds = generate_synthetic_dataset(spec);
  CHECK(ds.layout.structured_cc);
  CHECK(ds.layout.slices == 16);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    CHECK(r.images.size() == 16);
    CHECK(r.cc_values.size() == spec.cc_count);
    for (std::size_t c = 0; c < spec.classes; ++c) {
      CHECK(r.cc_values[ds.rule.cue_words[c]] == ds.latent[i].cross_text[c]);
    }
  }
}

TEST_CASE("record JSON round trips nulls and UTF-8 ids") {
  mdt::Rng rng(1);
  PatientRecord r = mdt::testing::random_record(mdt::testing::desk_layout(), rng, "Zoë-患者-01");
  r.lab[0] = std::nullopt;
  r.lab[3] = std::nullopt;
  r.images.clear();
  const PatientRecord back = decode_record(encode_record(r), 1);
  CHECK(back == r);
  CHECK_FALSE(back.lab[0].has_value());

  PatientRecord s = r;
  s.cc_ids.clear();
  s.cc_values = {0.0, 1.0, 0.0};
  CHECK(decode_record(encode_record(s), 1) == s);
}

TEST_CASE("malformed manifest lines name their line number") {
  try {
    decode_record("{\"id\": \"x\", ", 7);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("line 7") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_record("{\"id\": \"x\"}", 2), IoError);
}

TEST_CASE("manifest reports missing image files by path") {
  mdt::Rng rng(2);
  PatientRecord r = mdt::testing::random_record(mdt::testing::desk_layout(), rng, "M1");
  const fs::path dir = scratch("missing");
  std::vector<PatientRecord> records{r};
  write_manifest(dir, records);
  CHECK(read_manifest(dir) == records);
  fs::remove(dir / r.image_paths[0]);
  try {
    read_manifest(dir);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find(r.image_paths[0]) != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("MIMG round trip and truncation guard") {
  Image img = Image::filled(3, 2, 2, 0.0f);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) * 0.37f - 1.0f;
  auto bytes = encode_mimg(img);
  CHECK(bytes.size() == 16 + 12 * 4);
  CHECK(decode_mimg(bytes) == img);
  bytes.pop_back();
  try {
    decode_mimg(bytes);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("size mismatch") != std::string::npos);
  }
  CHECK_THROWS_AS(decode_mimg(std::vector<char>{'X', 'I', 'M', 'G'}), IoError);
}

TEST_CASE("bilinear resampling uses half-pixel centres") {
  Image src = Image::filled(2, 1, 1, 0.0f);
  src.data = {0.0f, 1.0f};
  Image up = resize_bilinear(src, 4, 1);
  CHECK(up.data[0] == doctest::Approx(0.0));
  CHECK(up.data[1] == doctest::Approx(0.25));
  CHECK(up.data[2] == doctest::Approx(0.75));
  CHECK(up.data[3] == doctest::Approx(1.0));
  Image same = resize_bilinear(up, 4, 1);
  CHECK(same == up);
}

TEST_CASE("evaluation crop maps pixel (16,16) to (0,0)") {
  Image img = Image::filled(256, 256, 1, 0.0f);
  img.at(16, 16) = 5.0f;
  Image out = preprocess_eval_image(img, 256, 224);
  CHECK(out.width == 224);
  CHECK(out.height == 224);
  CHECK(out.at(0, 0) == 5.0f);
  CHECK(out.at(1, 0) == 0.0f);
  CHECK(out.at(0, 1) == 0.0f);
  CHECK(preprocess_eval_image(img, 256, 224) == out);
  CHECK(preprocess_eval_image(Image::filled(300, 280, 1, 1.0f)).width == 224);
  CHECK_THROWS_AS(preprocess_eval_image(img, 200, 224), ShapeError);
}

TEST_CASE("crop boxes stay inside the source for 10^4 draws") {
  mdt::Rng rng(17);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t w = 256 + (i % 3) * 20, h = 256;
    const CropBox b = sample_crop(w, h, rng);
    CHECK(b.size > 0);
    CHECK(b.x + b.size <= w);
    CHECK(b.y + b.size <= h);
    const double area = double(b.size) * double(b.size) / (double(w) * double(h));
    CHECK(area <= 1.0);
    CHECK(area >= 0.09 - 2.0 * std::sqrt(0.09) / 256.0);
  }
}

TEST_CASE("augmentation output size, flip involution and full crop") {
  mdt::Rng rng(3);
  Image img = Image::filled(256, 256, 1, 0.0f);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  CHECK(flip_horizontal(flip_horizontal(img)) == img);
  Image full = crop(img, 0, 0, 256, 256);
  CHECK(resize_bilinear(full, 224, 224) == resize_bilinear(img, 224, 224));
  mdt::Rng a(9), b(9);
  Image x = augment_train_image(img, 224, a), y = augment_train_image(img, 224, b);
  CHECK(x.width == 224);
  CHECK(x == y);
  CHECK_THROWS_AS(augment_train_image(Image::filled(100, 100, 1, 0.0f), 224, a), ShapeError);
}

TEST_CASE("date splits use the inclusive upper boundary") {
  auto rec = [](const std::string& d) {
    PatientRecord r;
    r.admission_date = d;
    return r;
  };
  std::vector<PatientRecord> rs{rec("2020-01-01"), rec("2020-06-01"), rec("2020-06-02"), rec("2021-01-01"),
                                rec("2021-01-02")};
  DatasetSplit s = split_by_date(rs, "2020-06-01", "2021-01-01");
  CHECK(s.train == std::vector<std::size_t>{0, 1});
  CHECK(s.val == std::vector<std::size_t>{2, 3});
  CHECK(s.test == std::vector<std::size_t>{4});

  DatasetSplit all = split_by_date(rs, "2030-01-01", "2030-01-02");
  CHECK(all.train.size() == rs.size());
  CHECK_THROWS_AS(split_by_date(rs, "2021-01-01", "2020-01-01"), ContractError);
  CHECK_THROWS_AS(check_iso_date("2020-02-30"), ContractError);
  CHECK(add_days("2020-02-28", 1) == "2020-02-29");
}

TEST_CASE("random dates partition totally and disjointly") {
  mdt::Rng rng(8);
  std::vector<PatientRecord> rs(500);
  for (auto& r : rs) r.admission_date = add_days("2019-01-01", static_cast<long>(rng.below(1000)));
  DatasetSplit s = split_by_date(rs, "2019-09-01", "2020-03-01");
  CHECK(s.train.size() + s.val.size() + s.test.size() == rs.size());
  std::vector<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(all.end(), part->begin(), part->end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i] == i);
}

TEST_CASE("generated boundaries give non-empty splits near the requested fractions") {
  const SyntheticDataset ds = generate_synthetic_dataset(small_spec(0.7, 0.3, 1));
  DatasetSplit s = split_by_date(ds.records, ds.boundaries[0], ds.boundaries[1]);
  CHECK(std::abs(double(s.train.size()) / 2000.0 - 0.6) < 0.02);
  CHECK(std::abs(double(s.val.size()) / 2000.0 - 0.2) < 0.02);
  CHECK(s.test.size() > 0);
}
