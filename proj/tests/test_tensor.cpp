// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "medtune/errors.hpp"
#include "medtune/parallel.hpp"
#include "support.hpp"

using namespace medtune;
using namespace medtune::testing;

namespace {

template <typename F>
void check_op(const std::vector<Shape>& shapes, F fn, std::uint64_t seed = 1, double h = 1e-5) {
  const auto e = op_gradient_errors(shapes, fn, seed, h);
  CHECK(e.f64 < 1e-6);
  CHECK(e.f32 < 1e-4);
}

}  // namespace

TEST_CASE("matmul values") {
  const auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  const auto b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  const auto c = matmul(eye, b);
  CHECK(std::vector<float>(c.data().begin(), c.data().end()) == std::vector<float>{5, 6, 7, 8});

  const auto z = Tensor::zeros({2, 2});
  const auto any = Tensor::from_data({2, 3}, {1, -2, 3, 4, 5, -6});
  const auto zc = matmul(z, any);
  CHECK(zc.shape() == Shape{2, 3});
  for (float v : zc.data()) CHECK(v == 0.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const auto a = Tensor::zeros({2, 3});
  const auto b = Tensor::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient, h = 1e-3 in 64-bit") {
  Rng rng(7);
  std::vector<Tensor64> p{random_tensor<double>({3, 4}, rng), random_tensor<double>({4, 2}, rng)};
  const std::function<Tensor64()> f = [&] { return weighted_sum(matmul(p[0], p[1])); };
  CHECK(worst_rel_error(analytic_grads<double>(f, p), numeric_grads<double>(f, p, 1e-3)) < 1e-6);
}

TEST_CASE("gradient checks for every op") {
  SUBCASE("transpose") {
    check_op({{3, 5}}, [](auto& p) { return weighted_sum(transpose(p[0])); });
  }
  SUBCASE("add") {
    check_op({{3, 4}, {3, 4}}, [](auto& p) { return weighted_sum(add(p[0], p[1])); });
  }
  SUBCASE("add_row") {
    check_op({{3, 4}, {4}}, [](auto& p) { return weighted_sum(add_row(p[0], p[1])); });
  }
  SUBCASE("mul") {
    check_op({{3, 4}, {3, 4}}, [](auto& p) { return weighted_sum(mul(p[0], p[1])); });
  }
  SUBCASE("scale") {
    check_op({{2, 5}}, [](auto& p) {
      using T = typename std::decay_t<decltype(p[0])>::value_type;
      return weighted_sum(scale(p[0], T(-1.7)));
    });
  }
  SUBCASE("sum") {
    check_op({{4, 3}}, [](auto& p) { return sum(mul(p[0], p[0])); });
  }
  SUBCASE("silu") {
    check_op({{3, 6}}, [](auto& p) { return weighted_sum(silu(p[0])); });
  }
  SUBCASE("softmax_rows") {
    check_op({{3, 5}}, [](auto& p) { return weighted_sum(softmax_rows(p[0])); });
  }
  SUBCASE("causal_softmax_rows") {
    check_op({{4, 4}}, [](auto& p) { return weighted_sum(causal_softmax_rows(p[0])); });
  }
  SUBCASE("rms_norm") {
    check_op({{3, 6}, {6}}, [](auto& p) { return weighted_sum(rms_norm(p[0], p[1])); });
  }
  SUBCASE("embedding") {
    check_op({{5, 3}}, [](auto& p) {
      const std::vector<int> tokens{4, 0, 4, 2};
      return weighted_sum(embedding(p[0], std::span<const int>(tokens)));
    });
  }
  SUBCASE("slice_cols") {
    check_op({{3, 7}}, [](auto& p) { return weighted_sum(slice_cols(p[0], 2, 4)); });
  }
  SUBCASE("concat_cols") {
    check_op({{3, 2}, {3, 4}}, [](auto& p) { return weighted_sum(concat_cols(std::vector{p[0], p[1]})); });
  }
  SUBCASE("concat_rows") {
    check_op({{2, 3}, {4, 3}}, [](auto& p) { return weighted_sum(concat_rows(std::vector{p[0], p[1]})); });
  }
  SUBCASE("rope") {
    check_op({{5, 8}}, [](auto& p) { return weighted_sum(rope(p[0], 2, 10000.0, 3)); });
  }
  SUBCASE("cross_entropy_masked") {
    check_op({{4, 6}}, [](auto& p) {
      const std::vector<int> targets{1, 5, 0, 3};
      const std::vector<std::uint8_t> mask{1, 0, 1, 1};
      return cross_entropy_masked(p[0], std::span<const int>(targets), std::span<const std::uint8_t>(mask));
    });
  }
  SUBCASE("composite chain") {
    check_op({{3, 4}, {4, 5}, {5}}, [](auto& p) {
      return weighted_sum(softmax_rows(silu(rms_norm(matmul(p[0], p[1]), p[2]))));
    });
  }
}

TEST_CASE("cross entropy: uniform logits") {
  const auto logits = Tensor::zeros({1, 4});
  const std::vector<int> t{2};
  const std::vector<std::uint8_t> m{1};
  const auto loss = cross_entropy_masked(logits, std::span<const int>(t), std::span<const std::uint8_t>(m));
  CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  CHECK(loss.item() == doctest::Approx(1.3863).epsilon(1e-4));
}

TEST_CASE("cross entropy: masked position drops out of the mean") {
  const auto logits = Tensor64::from_data({3, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0, 0.2, 0.2, 0.2});
  const std::vector<int> t{1, 2, 0};
  auto nll = [&](std::size_t row) {
    const auto d = logits.data();
    double se = 0.0;
    for (std::size_t j = 0; j < 3; ++j) se += std::exp(d[row * 3 + j]);
    return std::log(se) - d[row * 3 + static_cast<std::size_t>(t[row])];
  };
  const std::vector<std::uint8_t> all{1, 1, 1}, two{1, 0, 1};
  const double full = cross_entropy_masked(logits, std::span<const int>(t), std::span<const std::uint8_t>(all)).item();
  const double part = cross_entropy_masked(logits, std::span<const int>(t), std::span<const std::uint8_t>(two)).item();
  CHECK(full == doctest::Approx((nll(0) + nll(1) + nll(2)) / 3.0).epsilon(1e-12));
  CHECK(part == doctest::Approx((nll(0) + nll(2)) / 2.0).epsilon(1e-12));
}

TEST_CASE("cross entropy: masked-out targets are never read") {
  Rng rng(3);
  auto logits = random_tensor<float>({3, 5}, rng);
  const std::vector<std::uint8_t> m{1, 0, 1};
  const std::vector<int> t1{1, 2, 3};
  const std::vector<int> t2{1, 4, 3};
  const std::vector<int> t3{1, -77, 3};
  auto run = [&](const std::vector<int>& t) {
    logits.zero_grad();
    Tape<float> tape;
    const auto loss = cross_entropy_masked(logits, std::span<const int>(t), std::span<const std::uint8_t>(m));
    tape.backward(loss);
    return std::make_pair(loss.item(), std::vector<float>(logits.grad().begin(), logits.grad().end()));
  };
  const auto a = run(t1);
  const auto b = run(t2);
  const auto c = run(t3);
  CHECK(a.first == b.first);
  CHECK(a.first == c.first);
  CHECK(a.second == b.second);
  CHECK(a.second == c.second);
  // Row 1 is masked out: its gradient is exactly zero.
  for (std::size_t j = 5; j < 10; ++j) CHECK(a.second[j] == 0.0f);
}

TEST_CASE("cross entropy: all-zero mask is an explicit error") {
  const auto logits = Tensor::zeros({2, 3});
  const std::vector<int> t{0, 1};
  const std::vector<std::uint8_t> m{0, 0};
  CHECK_THROWS_AS(cross_entropy_masked(logits, std::span<const int>(t), std::span<const std::uint8_t>(m)),
                  EmptyLossSupport);
  try {
    cross_entropy_masked(logits, std::span<const int>(t), std::span<const std::uint8_t>(m));
  } catch (const EmptyLossSupport& e) {
    CHECK(std::string(e.what()).find("empty loss support") != std::string::npos);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tape<float> tape;
    tape.backward(sum(x));
    for (float g : x.grad()) CHECK(g == 1.0f);
  }
  SUBCASE("product of scalars") {
    auto x = Tensor::scalar(3.0f, true);
    auto y = Tensor::scalar(-2.5f, true);
    Tape<float> tape;
    tape.backward(mul(x, y));
    CHECK(x.grad()[0] == -2.5f);
    CHECK(y.grad()[0] == 3.0f);
  }
  SUBCASE("repeated calls accumulate") {
    auto x = Tensor::from_data({3}, {1, 2, 3}, true);
    for (int i = 0; i < 2; ++i) {
      Tape<float> tape;
      tape.backward(sum(x));
    }
    for (float g : x.grad()) CHECK(g == 2.0f);
  }
  SUBCASE("non-scalar loss is a contract error") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    Tape<float> tape;
    const auto y = scale(x, 2.0f);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
  SUBCASE("no active tape") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    const auto y = sum(x);
    CHECK_THROWS_AS(backward(y), ContractError);
  }
  SUBCASE("tensors off the loss path get no gradient") {
    auto x = Tensor::from_data({2}, {1, 2}, true);
    auto unused = Tensor::from_data({2}, {3, 4}, true);
    Tape<float> tape;
    const auto side = sum(unused);
    tape.backward(sum(x));
    CHECK_FALSE(unused.has_grad());
    (void)side;
  }
  SUBCASE("ops do not record without requires_grad") {
    auto x = Tensor::from_data({2}, {1, 2});
    Tape<float> tape;
    const auto y = sum(x);
    CHECK(tape.size() == 0);
    (void)y;
  }
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(11);
  const auto x = random_tensor<float>({6, 9}, rng, 3.0, false);
  const auto s = softmax_rows(x);
  for (std::size_t i = 0; i < 6; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 9; ++j) total += s.data()[i * 9 + j];
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
}

TEST_CASE("causal softmax never reads the future") {
  const float nan = std::numeric_limits<float>::quiet_NaN();
  const auto x = Tensor::from_data({3, 3}, {0.1f, nan, nan, 0.2f, 0.3f, nan, 1.0f, 2.0f, 3.0f});
  const auto s = causal_softmax_rows(x);
  const auto d = s.data();
  CHECK(d[0] == 1.0f);
  CHECK(d[1] == 0.0f);
  CHECK(d[2] == 0.0f);
  CHECK(d[5] == 0.0f);
  for (float v : d) CHECK(std::isfinite(v));
}

TEST_CASE("rms_norm scale identity on constant rows") {
  const auto x = Tensor64::from_data({2, 4}, {3, 3, 3, 3, -0.5, -0.5, -0.5, -0.5});
  const auto g = Tensor64::from_data({4}, {1.0, 2.0, 0.5, -1.0});
  const auto y = rms_norm(x, g);
  const auto d = y.data();
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(d[j] == doctest::Approx(g.data()[j] * 3.0 / std::sqrt(9.0 + 1e-5)).epsilon(1e-12));
    CHECK(d[4 + j] == doctest::Approx(g.data()[j] * -0.5 / std::sqrt(0.25 + 1e-5)).epsilon(1e-12));
  }
}

TEST_CASE("rope rotates pairs by position") {
  // One head of width 2: pair (0, 1) rotates by position * theta^0 = position.
  const auto x = Tensor64::from_data({3, 2}, {1, 0, 1, 0, 0, 1});
  const auto y = rope(x, 1, 10000.0);
  const auto d = y.data();
  CHECK(d[0] == doctest::Approx(1.0));
  CHECK(d[1] == doctest::Approx(0.0));
  CHECK(d[2] == doctest::Approx(std::cos(1.0)));
  CHECK(d[3] == doctest::Approx(std::sin(1.0)));
  CHECK(d[4] == doctest::Approx(-std::sin(2.0)));
  CHECK(d[5] == doctest::Approx(std::cos(2.0)));
}

TEST_CASE("tensor construction contracts") {
  CHECK_THROWS_AS(Tensor::from_data({2, 0}, {}), DimensionError);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({2}).item(), ContractError);
  const auto t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  const auto c = t.clone();
  c.ensure_grad();
  CHECK_FALSE(t.is(c));
  CHECK_FALSE(t.has_grad());
  CHECK_THROWS_AS(add_row(t, Tensor::zeros({2})), DimensionError);
  CHECK_THROWS_AS(add(t, Tensor::zeros({3, 2})), DimensionError);
  const std::vector<int> bad{0, 2};
  CHECK_THROWS_AS(embedding(Tensor::zeros({2, 3}), std::span<const int>(bad)), InputError);
}

TEST_CASE("forward and backward are deterministic") {
  auto run = [] {
    Rng rng(5);
    auto a = random_tensor<float>({7, 5}, rng);
    auto b = random_tensor<float>({5, 3}, rng);
    Tape<float> tape;
    const auto loss = weighted_sum(softmax_rows(matmul(a, b)));
    tape.backward(loss);
    std::vector<float> out{loss.item()};
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    out.insert(out.end(), b.grad().begin(), b.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("matmul results do not depend on the thread count") {
  Rng rng(8);
  auto a = random_tensor<float>({64, 33}, rng);
  auto b = random_tensor<float>({33, 17}, rng);
  auto run = [&](int threads) {
    set_thread_count(threads);
    a.zero_grad();
    b.zero_grad();
    Tape<float> tape;
    const auto c = matmul(a, b);
    tape.backward(weighted_sum(c));
    std::vector<float> out(c.data().begin(), c.data().end());
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    out.insert(out.end(), b.grad().begin(), b.grad().end());
    return out;
  };
  const auto one = run(1);
  const auto three = run(3);
  set_thread_count(1);
  CHECK(one == three);
}
