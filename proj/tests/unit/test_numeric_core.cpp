#include <cmath>
#include <functional>

#include "doctest.h"
#include "mdt/adamw.h"
#include "mdt/autograd.h"
#include "mdt/gradcheck.h"
#include "mdt/ops.h"
#include "mdt/parameters.h"
#include "test_util.h"

using namespace mdt;
using mdt::testing::max_abs_diff;
using mdt::testing::random_tensor;

TEST_CASE("matmul identity and projector") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m).to_vector() == std::vector<real>{1, 2, 3, 4});

  auto proj = Tensor::from({2, 2}, {1, 0, 0, 0});
  auto col = Tensor::from({2, 1}, {5, 7});
  CHECK(matmul(proj, col).to_vector() == std::vector<real>{5, 0});
}

TEST_CASE("matmul matches a triple-loop oracle") {
  Rng rng(11);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += static_cast<double>(a.data()[i * 4 + k]) * b.data()[k * 2 + j];
      CHECK(std::abs(c.data()[i * 2 + j] - s) < 1e-6);
    }
}

TEST_CASE("matmul shape error names both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul is associative on small tensors") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({4, 5}, rng);
    auto b = random_tensor({5, 3}, rng);
    auto c = random_tensor({3, 6}, rng);
    auto left = matmul(matmul(a, b), c);
    auto right = matmul(a, matmul(b, c));
    CHECK(max_abs_diff(left.data(), right.data()) < 1e-4);
  }
}

TEST_CASE("softmax examples") {
  CHECK(softmax_lastdim(Tensor::from({2}, {0, 0})).to_vector() == std::vector<real>{0.5f, 0.5f});
  for (real x : {-30.0f, 0.0f, 7.5f, 1000.0f}) {
    auto y = softmax_lastdim(Tensor::full({4}, x));
    for (real v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-7));
  }
  auto y = softmax_lastdim(Tensor::from({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(y.data()[0] - std::exp(1.0) / z) < 1e-6);
  CHECK(std::abs(y.data()[1] - std::exp(2.0) / z) < 1e-6);
  CHECK(std::abs(y.data()[2] - std::exp(3.0) / z) < 1e-6);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor({3, 1 + rng.below(8)}, rng, -5, 5);
    const real shift = static_cast<real>(rng.uniform(-20, 20));
    auto shifted = x.clone();
    for (auto& v : shifted.data()) v += shift;
    auto y = softmax_lastdim(x);
    auto ys = softmax_lastdim(shifted);
    const std::size_t len = x.dim(1);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < len; ++j) s += y.data()[r * len + j];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    CHECK(max_abs_diff(y.data(), ys.data()) < 1e-6);
  }
}

TEST_CASE("zero-length dimensions are rejected") {
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
}

TEST_CASE("layer norm examples") {
  auto one = Tensor::full({3}, 1.0f);
  auto zero = Tensor::zeros({3});
  auto y = layer_norm(Tensor::full({2, 3}, 4.2f), one, zero);
  for (real v : y.data()) CHECK(v == 0.0f);

  auto pair = layer_norm(Tensor::from({2}, {1, -1}), Tensor::full({2}, 1.0f), Tensor::zeros({2}));
  // closed form: mean 0, var 1 → x / sqrt(1 + eps)
  CHECK(std::abs(pair.data()[0] - 1.0 / std::sqrt(1.0 + 1e-6)) < 1e-6);
  CHECK(std::abs(pair.data()[1] + 1.0 / std::sqrt(1.0 + 1e-6)) < 1e-6);

  Rng rng(2);
  auto bias = Tensor::from({3}, {0.5f, -2.0f, 3.0f});
  auto collapsed = layer_norm(random_tensor({4, 3}, rng), Tensor::zeros({3}), bias);
  for (std::size_t i = 0; i < 12; ++i) CHECK(collapsed.data()[i] == bias.data()[i % 3]);

  CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_CASE("layer norm output is standardized per row") {
  Rng rng(8);
  auto x = random_tensor({6, 8}, rng, -3, 3);
  auto y = layer_norm(x, Tensor::full({8}, 1.0f), Tensor::zeros({8}));
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 8; ++j) mean += y.data()[r * 8 + j];
    mean /= 8;
    for (std::size_t j = 0; j < 8; ++j) var += std::pow(y.data()[r * 8 + j] - mean, 2);
    var /= 8;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("backward on simple functionals") {
  Rng rng(1);
  auto x = random_tensor({2, 3}, rng, -1, 1, true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  for (real g : x.grad()) CHECK(g == 1.0f);

  x.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(scale(sum(mul(x, x)), 0.5f));
  }
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-6));
}

TEST_CASE("backward contract errors") {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  Tape tape;
  TapeScope scope(tape);
  auto loss = sum(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);

  tape.reset();
  CHECK_THROWS_AS(tape.backward(scale(x, 2.0f)), ShapeError);
  tape.reset();
  CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0f, true)), ContractError);
  tape.reset();
  Tape other;
  Tensor foreign;
  {
    TapeScope inner(other);
    foreign = sum(x);
  }
  CHECK_THROWS_AS(tape.backward(foreign), ContractError);
}

TEST_CASE("tape ordering") {
  Tape tape;
  TapeScope scope(tape);
  auto outside = Tensor::zeros({2});
  CHECK(tape.size() == 0);
  auto x = Tensor::from({2}, {1, 2}, true);
  auto a = scale(x, 2.0f);
  auto b = gelu(a);
  auto c = sum(b);
  CHECK(tape.size() == 3);
  std::vector<std::size_t> visits;
  tape.backward(c, [&](std::size_t i) { visits.push_back(i); });
  CHECK(visits == std::vector<std::size_t>{2, 1, 0});
  // inputs that need no gradient stay unrecorded
  auto d = scale(outside, 3.0f);
  (void)d;
}

TEST_CASE("finite_diff_check examples") {
  Rng rng(4);
  auto x = random_tensor({5}, rng);
  CHECK(finite_diff_check([](const Tensor& t) { return sum(t); }, x, 1e-3) < 1e-7);

  auto logits = random_tensor({4}, rng, -2, 2);
  std::vector<std::size_t> target{2};
  auto ce = [&](const Tensor& t) { return softmax_cross_entropy(t, target); };
  CHECK(finite_diff_check(ce, logits, 1e-3) < 1e-4);

  Rng dropout_rng(9);
  auto noisy = [&](const Tensor& t) { return sum(dropout(t, 0.5, true, &dropout_rng)); };
  CHECK_THROWS_AS(finite_diff_check(noisy, x, 1e-3), ContractError);
  CHECK_THROWS_AS(finite_diff_check(ce, logits, 0.5), ContractError);
}

namespace {

// Weighted sum so every output coordinate contributes a distinct gradient.
double primitive_check(const std::function<Tensor(const Tensor&)>& op, Tensor x, Rng& rng) {
  auto probe = op(x);
  auto weights = random_tensor(probe.shape(), rng, 0.5, 1.5);
  return finite_diff_check([&](const Tensor& t) { return sum(mul(op(t), weights)); }, x, 1e-4);
}

}  // namespace

TEST_CASE("every differentiable primitive passes a finite-difference check") {
  Rng rng(21);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t b = 1 + rng.below(3), n = 1 + rng.below(5), d = 2 * (1 + rng.below(4));
    auto x3 = random_tensor({b, n, d}, rng);
    auto w = random_tensor({d, 1 + rng.below(7)}, rng);
    auto bias = random_tensor({w.dim(1)}, rng);
    auto vec = random_tensor({d}, rng);
    auto other = random_tensor({b, n, d}, rng);
    auto m1 = random_tensor({n, d}, rng);
    auto m2 = random_tensor({d, 3}, rng);

    CHECK(primitive_check([&](const Tensor& t) { return matmul(t, m2); }, m1.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return matmul(m1, t); }, m2.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return linear(t, w, bias); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return linear(x3, t, bias); }, w.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return linear(x3, w, t); }, bias.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return add(t, vec); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return add(x3, t); }, vec.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return mul(t, other); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return gelu(t); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return sigmoid(t); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return mean_tokens(t); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return select_token(t, n - 1); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return concat_tokens({t, other}); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return concat_features({other, t, x3}); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return repeat_batch(t, 3); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return broadcast_batch(t, 2); }, m1.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return softmax_lastdim(t); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return layer_norm(t, vec, vec); }, x3.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return layer_norm(x3, t, vec); }, vec.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return layer_norm(x3, vec, t); }, vec.clone(), rng) < 1e-5);

    auto vals = random_tensor({b, n}, rng);
    CHECK(primitive_check([&](const Tensor& t) { return scalar_tokens(t, vec, vec); }, vals.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return scalar_tokens(vals, t, vec); }, vec.clone(), rng) < 1e-5);

    std::vector<std::int32_t> ids(b * n);
    for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(5));
    auto table = random_tensor({5, d}, rng);
    CHECK(primitive_check([&](const Tensor& t) { return embedding(t, ids, b, n); }, table.clone(), rng) < 1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return masked_mean_embedding(t, ids, b, n); }, table.clone(), rng) <
          1e-5);

    const std::size_t nk = 1 + rng.below(6);
    auto k = random_tensor({b, nk, d}, rng);
    auto v = random_tensor({b, nk, d}, rng);
    AttentionOptions opt;
    opt.heads = 2;
    opt.scale = 1.0 / std::sqrt(d / 2.0);
    CHECK(primitive_check([&](const Tensor& t) { return multi_head_attention(t, k, v, opt); }, x3.clone(), rng) <
          1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return multi_head_attention(x3, t, v, opt); }, k.clone(), rng) <
          1e-5);
    CHECK(primitive_check([&](const Tensor& t) { return multi_head_attention(x3, k, t, opt); }, v.clone(), rng) <
          1e-5);

    auto labels = Tensor::zeros({b, n});
    for (auto& l : labels.data()) l = static_cast<real>(rng.below(2));
    CHECK(finite_diff_check([&](const Tensor& t) { return bce_with_logits(t, labels); }, vals.clone(), 1e-2) < 1e-5);
  }
}

TEST_CASE("relu gradient away from the kink") {
  auto x = Tensor::from({4}, {-1.0f, -0.3f, 0.4f, 2.0f});
  CHECK(finite_diff_check([](const Tensor& t) { return sum(relu(t)); }, x, 1e-3) < 1e-6);
}

TEST_CASE("bce examples") {
  auto zero = bce_with_logits(Tensor::zeros({3}), Tensor::from({3}, {0, 1, 1}));
  CHECK(zero.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  auto saturated = bce_with_logits(Tensor::from({1}, {40.0f}), Tensor::from({1}, {1.0f}));
  CHECK(std::isfinite(saturated.item()));
  CHECK(saturated.item() < 1e-12);
  CHECK_THROWS_AS(bce_with_logits(Tensor::zeros({1}), Tensor::from({1}, {0.5f})), ContractError);

  Rng rng(77);
  auto z = random_tensor({4, 3}, rng, -6, 6);
  auto y = Tensor::zeros({4, 3});
  for (auto& v : y.data()) v = static_cast<real>(rng.below(2));
  double direct = 0;
  for (std::size_t i = 0; i < 12; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(z.data()[i])));
    direct -= y.data()[i] * std::log(s) + (1 - y.data()[i]) * std::log(1 - s);
  }
  CHECK(std::abs(bce_with_logits(z, y).item() - direct / 12) < 1e-6);
}

TEST_CASE("dropout is the identity in evaluation mode and seeded in training") {
  Rng rng(1);
  auto x = random_tensor({4, 8}, rng);
  CHECK(dropout(x, 0.3, false, nullptr).to_vector() == x.to_vector());
  Rng a(42), b(42);
  CHECK(dropout(x, 0.3, true, &a).to_vector() == dropout(x, 0.3, true, &b).to_vector());
}

TEST_CASE("AdamW examples") {
  SUBCASE("zero gradient without decay leaves parameters unchanged") {
    ParameterStore store;
    auto p = store.add("p", Tensor::from({3}, {1.0f, -2.0f, 0.5f}));
    p.mutable_grad();
    auto state = make_adamw_state(store, {.lr = 0.1, .weight_decay = 0.0});
    adamw_step(store, state);
    CHECK(p.to_vector() == std::vector<real>{1.0f, -2.0f, 0.5f});
  }
  SUBCASE("single step matches a hand-rolled update") {
    ParameterStore store;
    auto p = store.add("p", Tensor::scalar(1.0f));
    p.mutable_grad()[0] = 1.0f;
    AdamWOptions opt{.lr = 0.1, .weight_decay = 0.0, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8};
    auto state = make_adamw_state(store, opt);
    adamw_step(store, state);
    const double m = (1 - 0.9) * 1.0, v = (1 - 0.999) * 1.0;
    const double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
    const double expected = 1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(p.item() == doctest::Approx(expected).epsilon(1e-7));
    CHECK(state.step == 1);
  }
  SUBCASE("decoupled decay with zero gradient") {
    ParameterStore store;
    auto p = store.add("p", Tensor::from({2}, {2.0f, -4.0f}));
    p.mutable_grad();
    auto state = make_adamw_state(store, {.lr = 3e-5, .weight_decay = 1e-2});
    adamw_step(store, state);
    CHECK(p.data()[0] == static_cast<float>(2.0 * (1 - 3e-7)));
    CHECK(p.data()[1] == static_cast<float>(-4.0 * (1 - 3e-7)));
  }
  SUBCASE("non-finite gradient names the parameter") {
    ParameterStore store;
    store.add("fine", Tensor::zeros({2})).mutable_grad();
    store.add("broken.weight", Tensor::zeros({2})).mutable_grad()[1] = NAN;
    auto state = make_adamw_state(store, {});
    try {
      adamw_step(store, state);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("broken.weight") != std::string::npos);
    }
    CHECK(state.step == 0);
  }
  SUBCASE("state mismatch is a shape error") {
    ParameterStore a, b;
    a.add("p", Tensor::zeros({2}));
    b.add("p", Tensor::zeros({3}));
    auto state = make_adamw_state(a, {});
    CHECK_THROWS_AS(adamw_step(b, state), ShapeError);
  }
}

namespace {

std::vector<real> run_toy_training(std::uint64_t seed) {
  Rng rng(seed);
  ParameterStore store;
  auto w = store.add_weight("w", {4, 2}, rng, 0.5);
  auto bias = store.add_zeros("b", {2});
  auto state = make_adamw_state(store, {.lr = 1e-2});
  auto x = random_tensor({8, 4}, rng);
  auto y = Tensor::zeros({8, 2});
  for (auto& v : y.data()) v = static_cast<real>(rng.below(2));
  std::vector<real> trajectory;
  for (int step = 0; step < 25; ++step) {
    store.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    Rng drop(seed + step);
    auto logits = linear(dropout(x, 0.2, true, &drop), w, bias);
    tape.backward(bce_with_logits(logits, y));
    adamw_step(store, state);
    auto snap = w.to_vector();
    trajectory.insert(trajectory.end(), snap.begin(), snap.end());
  }
  return trajectory;
}

}  // namespace

TEST_CASE("same seed gives bit-identical parameter trajectories") {
  CHECK(run_toy_training(5) == run_toy_training(5));
  CHECK(run_toy_training(5) != run_toy_training(6));
}

TEST_CASE("checkpoint container round trip is bit exact") {
  Rng rng(10);
  ParameterStore store;
  store.add_weight("encoder.weight", {3, 4}, rng);
  store.add("scalar", Tensor::scalar(-0.0f));
  store.add("ünïcode", Tensor::from({2}, {1e-38f, 3.4e38f}));
  auto bytes = save_checkpoint(store);
  CHECK(std::string(bytes.data(), 4) == "MDTC");
  auto decoded = decode_container(kCheckpointMagic, bytes);
  REQUIRE(decoded.size() == 3);
  CHECK(decoded[2].name == "ünïcode");
  CHECK(encode_container(kCheckpointMagic, decoded) == bytes);

  ParameterStore fresh;
  Rng other(99);
  fresh.add_weight("encoder.weight", {3, 4}, other);
  fresh.add_zeros("scalar", {1});
  fresh.add_zeros("ünïcode", {2});
  load_checkpoint(fresh, bytes);
  CHECK(save_checkpoint(fresh) == bytes);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_container(kCheckpointMagic, truncated), IoError);
  auto wrong = bytes;
  wrong[0] = 'X';
  CHECK_THROWS_AS(decode_container(kCheckpointMagic, wrong), IoError);
}
