#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "mdt/image.h"
#include "mdt/interpret.h"
#include "mdt/mdt.h"
#include "oracles.h"
#include "test_util.h"

using namespace mdt;
namespace fs = std::filesystem;

namespace {

SquareMatrix random_stochastic(std::size_t n, Rng& rng) {
  SquareMatrix m{n, std::vector<double>(n * n)};
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (m.values[i * n + j] = rng.uniform(0.0, 1.0));
    for (std::size_t j = 0; j < n; ++j) m.values[i * n + j] /= z;
  }
  return m;
}

// Trace with CLS first and one uniform unified block.
AttentionTrace uniform_trace(const std::vector<Modality>& body, std::size_t grid_side, std::size_t blocks = 1) {
  AttentionTrace t;
  t.unified_tags.push_back(Modality::cls);
  t.unified_tags.insert(t.unified_tags.end(), body.begin(), body.end());
  t.cls_index = 0;
  t.grid_side = grid_side;
  const std::size_t n = t.unified_tags.size();
  for (std::size_t b = 0; b < blocks; ++b) {
    t.records.push_back({b, AttentionKind::unified, Tensor::full({1, n, n}, 1.0 / static_cast<double>(n))});
  }
  return t;
}

std::vector<Modality> task1_body() {
  std::vector<Modality> tags(196, Modality::image);
  tags.insert(tags.end(), 40, Modality::cc);
  tags.insert(tags.end(), 92, Modality::lab);
  tags.push_back(Modality::sex);
  tags.push_back(Modality::age);
  return tags;
}

}  // namespace

TEST_CASE("one uniform block gives 1/(2N) to every other token") {
  const AttentionTrace t = uniform_trace(task1_body(), 14);
  const RelevanceMap map = attention_rollout(t);
  const double n = 331.0;
  REQUIRE(map.relevance.size() == 331);
  CHECK(map.relevance[0] == doctest::Approx(0.5 + 1.0 / (2 * n)).epsilon(1e-12));
  for (std::size_t j = 1; j < 331; ++j) CHECK(map.relevance[j] == doctest::Approx(1.0 / (2 * n)).epsilon(1e-12));
}

TEST_CASE("uniform relevance gives shares proportional to token counts") {
  const RelevanceMap map = attention_rollout(uniform_trace(task1_body(), 14, 3));
  const ModalityShares s = modality_shares(map);
  CHECK(s.image == doctest::Approx(196.0 / 330.0).epsilon(1e-12));
  CHECK(s.cc == doctest::Approx(40.0 / 330.0).epsilon(1e-12));
  CHECK(s.lab == doctest::Approx(92.0 / 330.0).epsilon(1e-12));
  CHECK(s.demographics == doctest::Approx(2.0 / 330.0).epsilon(1e-12));
  CHECK(s.image + s.cc + s.lab + s.demographics == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("identity attention keeps all relevance on CLS") {
  AttentionTrace t = uniform_trace({Modality::image, Modality::image, Modality::image, Modality::image, Modality::cc,
                                    Modality::lab, Modality::sex, Modality::age},
                                   2);
  const std::size_t n = t.unified_tags.size();
  std::vector<real> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  t.records[0].weights = Tensor::from({1, n, n}, eye);
  const RelevanceMap map = attention_rollout(t);
  CHECK(map.relevance[0] == 1.0);
  for (std::size_t j = 1; j < n; ++j) CHECK(map.relevance[j] == 0.0);
  CHECK_THROWS_AS(modality_shares(map), ContractError);
}

TEST_CASE("rollout equals the brute-force product within 1e-6") {
  Rng rng(31);
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t n = 3 + rng.below(8), layers = 1 + rng.below(4);
    std::vector<SquareMatrix> mats;
    std::vector<std::vector<std::vector<double>>> nested;
    for (std::size_t l = 0; l < layers; ++l) {
      mats.push_back(random_stochastic(n, rng));
      std::vector<std::vector<double>> rows(n);
      for (std::size_t i = 0; i < n; ++i) rows[i].assign(mats.back().values.begin() + i * n, mats.back().values.begin() + (i + 1) * n);
      nested.push_back(rows);
    }
    const SquareMatrix r = rollout_matrix(mats);
    const auto oracle = mdt::testing::brute_rollout(nested);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        worst = std::max(worst, std::abs(r.at(i, j) - oracle[i][j]));
        row += r.at(i, j);
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK(worst < 1e-6);
  }
  std::vector<SquareMatrix> bad{SquareMatrix::identity(3), SquareMatrix::identity(4)};
  CHECK_THROWS_AS(rollout_matrix(bad), ShapeError);
}

TEST_CASE("rollout of a trained-shape trace uses only the unified blocks") {
  TaskLayout layout = mdt::testing::desk_layout();
  MDTConfig c;
  c.dim = 8;
  c.heads = 2;
  c.bidirectional_blocks = 2;
  c.self_blocks = 2;
  c.dropout = 0.0;
  c.pooling = Pooling::cls;
  c.layout = layout;
  MDTModel model(c, 1);
  Rng rng(2);
  std::vector<PatientRecord> recs{mdt::testing::random_record(layout, rng)};
  std::vector<const PatientRecord*> ptrs{&recs[0]};
  Batch batch = make_batch(ptrs, layout, LabStats::fit(recs, layout.lab_count));
  AttentionTrace trace;
  ForwardContext ctx;
  ctx.trace = &trace;
  model.forward(batch, ctx);

  const auto mats = unified_attention(trace);
  CHECK(mats.size() == 2);
  const RelevanceMap map = attention_rollout(trace);
  CHECK(map.relevance.size() == 35);
  CHECK(std::accumulate(map.relevance.begin(), map.relevance.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(image_relevance_grid(map).values.size() == 16);
  CHECK(lab_importance(map).size() == 8);
  CHECK(word_importance(map).size() == 8);

  AttentionTrace no_cls = trace;
  no_cls.cls_index.reset();
  CHECK_THROWS_AS(attention_rollout(no_cls), ContractError);
}

TEST_CASE("lab and word importance views") {
  RelevanceMap map;
  map.tags = {Modality::cls, Modality::image, Modality::image, Modality::image, Modality::image, Modality::cc,
              Modality::cc, Modality::cc, Modality::lab, Modality::lab, Modality::sex, Modality::age};
  map.relevance = {0.5, 0.01, 0.02, 0.03, 0.04, 0.1, 0.3, 0.2, 0.07, 0.05, 0.01, 0.02};
  map.grid_side = 2;
  CHECK(lab_importance(map) == std::vector<double>{0.07, 0.05});
  const auto words = word_importance(map);
  CHECK(words[0] == 0.0);
  CHECK(words[1] == 1.0);
  CHECK(words[2] == doctest::Approx(0.5));
  const Grid g = image_relevance_grid(map);
  CHECK(g.side == 2);
  CHECK(g.values == std::vector<double>{0.01, 0.02, 0.03, 0.04});

  map.relevance[5] = map.relevance[6] = map.relevance[7] = 0.2;
  for (double w : word_importance(map)) CHECK(w == 0.0);
}

TEST_CASE("cross-attention map averages text-to-image rows over blocks") {
  AttentionTrace t;
  t.grid_side = 2;
  t.text_tags = {Modality::cc, Modality::cc, Modality::lab};
  t.records.push_back({0, AttentionKind::text_to_image,
                       Tensor::from({1, 3, 4}, {0.1, 0.2, 0.3, 0.4, 1, 0, 0, 0, 0.25, 0.25, 0.25, 0.25})});
  t.records.push_back({1, AttentionKind::text_to_image,
                       Tensor::from({1, 3, 4}, {0.3, 0.2, 0.1, 0.4, 0, 0, 0, 1, 0.25, 0.25, 0.25, 0.25})});
  const Grid g = cross_attention_map(t, 1);
  CHECK(g.side == 2);
  CHECK(g.values == std::vector<double>{0.5, 0.0, 0.0, 0.5});
  const Grid g0 = cross_attention_map(t, 0);
  CHECK(g0.values[0] == doctest::Approx(0.2));
  CHECK_THROWS_AS(cross_attention_map(t, 3), ContractError);
  CHECK_THROWS_AS(cross_attention_map(AttentionTrace{}, 0), ContractError);
}

TEST_CASE("top-quartile mass") {
  std::vector<double> uniform(12, 1.0 / 12.0);
  CHECK(top_quartile_mass(uniform) == doctest::Approx(0.25));
  std::vector<double> peaked{0.97, 0.01, 0.01, 0.01};
  CHECK(top_quartile_mass(peaked) == doctest::Approx(0.97));
  std::vector<double> odd{0.1, 0.2, 0.3, 0.15, 0.25};  // ceil(5/4) = 2 largest
  CHECK(top_quartile_mass(odd) == doctest::Approx(0.55));
  std::vector<double> few{0.5, 0.5, 0.0};
  CHECK_THROWS_AS(top_quartile_mass(few), ContractError);

  Rng rng(4);
  for (int k = 0; k < 100; ++k) {
    std::vector<double> v(4 + rng.below(40));
    double total = 0.0;
    for (auto& x : v) total += (x = rng.uniform());
    for (auto& x : v) x /= total;
    const double m = top_quartile_mass(v);
    CHECK(m >= 0.25 - 1e-12);
    CHECK(m <= 1.0 + 1e-12);
  }
}

TEST_CASE("heatmap upsampling turns 14x14 cells into 16x16 blocks") {
  Grid g{14, std::vector<double>(196)};
  for (std::size_t i = 0; i < 196; ++i) g.values[i] = static_cast<double>(i) * 0.5 + 3.0;
  const Image img = heatmap_image(g, 224, 224);
  CHECK(img.width == 224);
  CHECK(img.height == 224);
  for (std::size_t y = 0; y < 224; ++y) {
    for (std::size_t x = 0; x < 224; ++x) {
      const double expect = static_cast<double>((y / 16) * 14 + x / 16) / 195.0;
      REQUIRE(img.at(y, x) == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  Grid flat{2, {0.3, 0.3, 0.3, 0.3}};
  for (float v : heatmap_image(flat, 8, 8).data) CHECK(v == 0.0f);
  Grid bad{2, {0.3, NAN, 0.3, 0.3}};
  CHECK_THROWS_AS(heatmap_image(bad, 8, 8), NumericError);
}

TEST_CASE("exported heatmap files round trip") {
  const fs::path dir = fs::temp_directory_path() / "mdt_test_heatmap";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Grid g{2, {0.0, 1.0, 2.0, 3.0}};
  const Image img = export_heatmap(g, dir / "map", 32, 32);
  CHECK(read_mimg(dir / "map.mimg") == img);
  std::ifstream svg(dir / "map.svg");
  const std::string text((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
  CHECK(text.find("<svg") != std::string::npos);
  CHECK(text.find("</svg>") != std::string::npos);
  CHECK_THROWS_AS(export_heatmap(g, dir / "missing" / "sub" / "map", 32, 32), IoError);
  fs::remove_all(dir);
}
