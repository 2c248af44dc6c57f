#include <cmath>
#include <vector>

#include "doctest.h"
#include "styletalk/tensor.hpp"
#include "support/oracles.hpp"

using namespace styletalk;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = false) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& x : data) x = rng.normal();
  return requires_grad ? Tensor::param(std::move(shape), std::move(data))
                       : Tensor::from(std::move(shape), std::move(data));
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("matmul: identity leaves any 2x2 matrix unchanged") {
  Rng rng(11);
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  for (int rep = 0; rep < 5; ++rep) {
    Tensor m = random_tensor({2, 2}, rng);
    Tensor out = matmul(eye, m);
    for (int i = 0; i < 4; ++i) CHECK(out.values()[i] == m.values()[i]);
  }
}

TEST_CASE("matmul: hand arithmetic [[1,2],[3,4]]*[[0],[1]]") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {0, 1});
  Tensor c = matmul(a, b);
  CHECK(c.at({0, 0}) == 2.0);
  CHECK(c.at({1, 0}) == 4.0);
}

TEST_CASE("matmul: random 5x7 * 7x3 equals naive triple-loop oracle elementwise") {
  Rng rng(42);
  Tensor a = random_tensor({5, 7}, rng);
  Tensor b = random_tensor({7, 3}, rng);
  Tensor c = matmul(a, b);
  auto ref = oracles::naive_matmul({a.values().begin(), a.values().end()},
                                   {b.values().begin(), b.values().end()}, 5, 7, 3);
  for (size_t i = 0; i < ref.size(); ++i) CHECK(c.values()[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("matmul: bit-for-bit equal to naive oracle on sizes up to 16x16") {
  Rng rng(7);
  for (auto [m, k, n] : {std::tuple{3, 4, 5}, std::tuple{16, 16, 16}, std::tuple{1, 16, 2}}) {
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor c = matmul(a, b);
    auto ref = oracles::naive_matmul({a.values().begin(), a.values().end()},
                                     {b.values().begin(), b.values().end()}, m, k, n);
    for (size_t i = 0; i < ref.size(); ++i) CHECK(c.values()[i] == ref[i]);
  }
}

TEST_CASE("matmul: shape mismatch raises dimension error") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), ContractError);
}

TEST_CASE("softmax: uniform logits give uniform distribution") {
  Tensor x = Tensor::from({3}, {0, 0, 0});
  Tensor y = softmax(x);
  for (int i = 0; i < 3; ++i) CHECK(y.values()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax: shift invariance softmax(x + c) == softmax(x)") {
  Rng rng(3);
  Tensor x = random_tensor({6}, rng);
  Tensor y1 = softmax(x);
  Tensor y2 = softmax(add_scalar(x, 7.5));
  for (int i = 0; i < 6; ++i) CHECK(y1.values()[i] == doctest::Approx(y2.values()[i]).epsilon(1e-12));
}

TEST_CASE("softmax: [1,2,3] matches independent scalar-loop oracle") {
  Tensor x = Tensor::from({3}, {1, 2, 3});
  Tensor y = softmax(x);
  auto ref = oracles::scalar_softmax({1, 2, 3});
  for (int i = 0; i < 3; ++i) CHECK(y.values()[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("softmax: rows sum to 1 within 1e-9 across shapes") {
  Rng rng(5);
  for (auto shape : {std::vector<int>{4}, {1, 9}, {13, 7}, {40, 120}}) {
    Tensor x = random_tensor(shape, rng);
    Tensor y = softmax(x);
    const int n = shape.back();
    const int64_t rows = y.size() / n;
    for (int64_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += y.values()[i * n + j];
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer_norm: constant vector maps to pure bias") {
  Tensor x = Tensor::from({4}, {2.5, 2.5, 2.5, 2.5});
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::from({4}, {0.5, -0.5, 0, 1});
  Tensor y = layer_norm(x, gain, bias);
  for (int i = 0; i < 4; ++i) CHECK(y.values()[i] == doctest::Approx(bias.values()[i]).epsilon(1e-9));
}

TEST_CASE("layer_norm: two-point standardization gives [-1, 1] up to eps") {
  Tensor x = Tensor::from({2}, {1, 3});
  Tensor y = layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}));
  CHECK(y.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y.values()[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm: backward matches central finite differences") {
  Rng rng(17);
  Tensor x = random_tensor({3, 5}, rng, true);
  Tensor gain = random_tensor({5}, rng, true);
  Tensor bias = random_tensor({5}, rng, true);
  Tensor w = random_tensor({3, 5}, rng);  // fixed projection to a scalar
  auto f = [&] { return sum(mul(layer_norm(x, gain, bias), w)); };
  std::vector<Tensor> params{x, gain, bias};
  auto res = grad_check(f, params, 1e-5, 32, &rng);
  CHECK(res.deterministic);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("cross_entropy: one-hot-correct logits with huge margin drive loss to 0") {
  std::vector<double> logits(2 * 4, 0.0);
  logits[0 * 4 + 1] = 50.0;
  logits[1 * 4 + 3] = 50.0;
  Tensor l = Tensor::from({2, 4}, logits);
  std::vector<int> targets{1, 3};
  CHECK(cross_entropy(l, targets, -1).item() < 1e-12);
}

TEST_CASE("cross_entropy: uniform logits with V=4 give ln 4") {
  Tensor l = Tensor::zeros({3, 4});
  std::vector<int> targets{0, 2, 3};
  CHECK(cross_entropy(l, targets, -1).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross_entropy: random 3x5 matches scalar-loop oracle") {
  Rng rng(23);
  Tensor l = random_tensor({3, 5}, rng);
  std::vector<int> targets{4, 0, 2};
  const double ref = oracles::scalar_cross_entropy({l.values().begin(), l.values().end()}, targets, 5, -1);
  CHECK(cross_entropy(l, targets, -1).item() == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("cross_entropy: pad positions contribute zero") {
  Rng rng(29);
  Tensor l = random_tensor({4, 5}, rng);
  std::vector<int> with_pad{1, -1, 3, -1};
  Tensor l2 = concat_rows({slice_rows(l, 0, 1), slice_rows(l, 2, 3)});
  std::vector<int> packed{1, 3};
  CHECK(cross_entropy(l, with_pad, -1).item() ==
        doctest::Approx(cross_entropy(l2, packed, -1).item()).epsilon(1e-12));
}

TEST_CASE("cross_entropy: all-pad target sequence raises empty-target error") {
  Tensor l = Tensor::zeros({2, 4});
  std::vector<int> targets{-1, -1};
  CHECK_THROWS_AS(cross_entropy(l, targets, -1), ContractError);
}

TEST_CASE("backward: loss = sum(x) gives all-ones gradient") {
  Rng rng(31);
  Tensor x = random_tensor({2, 3}, rng, true);
  Tape tape;
  Tensor loss = sum(x);
  tape.backward(loss);
  for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward: loss = dot(x, y) gives grad(x) = y") {
  Rng rng(37);
  Tensor x = random_tensor({5}, rng, true);
  Tensor y = random_tensor({5}, rng);
  Tape tape;
  Tensor loss = sum(mul(x, y));
  tape.backward(loss);
  for (int i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(y.values()[i]).epsilon(1e-14));
}

TEST_CASE("backward: non-scalar loss is a contract error") {
  Tensor x = Tensor::param({3}, {1, 2, 3});
  Tape tape;
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("backward: gradient accumulates across multiple consumers") {
  Tensor x = Tensor::param({2}, {1.0, 2.0});
  Tape tape;
  Tensor loss = sum(add(mul(x, x), scale(x, 3.0)));  // d/dx (x^2 + 3x) = 2x + 3
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(x.grad()[1] == doctest::Approx(7.0).epsilon(1e-14));
}

TEST_CASE("backward: softmax + cross-entropy composite passes finite differences") {
  Rng rng(41);
  Tensor w = random_tensor({4, 6}, rng, true);
  Tensor x = random_tensor({3, 4}, rng);
  std::vector<int> targets{2, 5, 0};
  auto f = [&] { return cross_entropy(matmul(x, w), targets, -1); };
  std::vector<Tensor> params{w};
  auto res = grad_check(f, params, 1e-5, 24, &rng);
  CHECK(res.deterministic);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("backward: structural ops pass finite differences") {
  Rng rng(43);
  Tensor a = random_tensor({4, 3}, rng, true);
  Tensor b = random_tensor({2, 3}, rng, true);
  Tensor v = random_tensor({6}, rng, true);
  Tensor row = random_tensor({4}, rng);
  auto f = [&] {
    Tensor cat = concat_rows({a, b});             // [6,3]
    Tensor s = scale_rows(cat, v);                // [6,3]
    Tensor t = transpose(slice_rows(s, 1, 5));    // [3,4]
    Tensor u = slice_cols(add_row(t, row), 1, 3); // [3,2]
    Tensor flat = reshape(concat_cols({cat, s}), {18, 2});
    return add(sum(u), add(mean(flat), sum(sum_cols(stack_rows({v, v})))));
  };
  std::vector<Tensor> params{a, b, v};
  auto res = grad_check(f, params, 1e-5, 40, &rng);
  CHECK(res.deterministic);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("backward: elementwise chain (softplus, log, sqrt, div, exp) passes finite differences") {
  Rng rng(47);
  Tensor x = random_tensor({6}, rng, true);
  Tensor y = random_tensor({6}, rng, true);
  auto f = [&] {
    Tensor sp = add_scalar(softplus(x), 1e-3);
    Tensor num = exp_t(scale(y, 0.1));
    Tensor extra = log_t(sqrt_t(add_scalar(mul(y, y), 0.5)));
    return sum(add(div(num, sp), extra));
  };
  std::vector<Tensor> params{x, y};
  auto res = grad_check(f, params, 1e-5, 12, &rng);
  CHECK(res.deterministic);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("embedding: gather forward and scatter-add backward") {
  Tensor table = Tensor::param({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  std::vector<int> ids{2, 0, 2};
  Tape tape;
  Tensor e = embedding(table, ids);
  CHECK(e.at({0, 0}) == 20.0);
  CHECK(e.at({1, 1}) == 1.0);
  Tensor loss = sum(e);
  tape.backward(loss);
  CHECK(table.grad()[2 * 2 + 0] == 2.0);  // row 2 gathered twice
  CHECK(table.grad()[0 * 2 + 1] == 1.0);
  CHECK(table.grad()[3 * 2 + 0] == 0.0);
}

TEST_CASE("grad_check: linear function has error near machine precision") {
  Tensor x = Tensor::param({4}, {1, -2, 3, 0.5});
  Tensor w = Tensor::from({4}, {2, 0, -1, 4});
  auto f = [&] { return sum(mul(x, w)); };
  std::vector<Tensor> params{x};
  auto res = grad_check(f, params);
  CHECK(res.deterministic);
  CHECK(res.max_rel_err < 1e-9);
}

TEST_CASE("grad_check: flags a non-deterministic function as invalid") {
  int calls = 0;
  auto f = [&] { return Tensor::scalar(static_cast<double>(++calls)); };
  std::vector<Tensor> params;
  auto res = grad_check(f, params);
  CHECK_FALSE(res.deterministic);
}

TEST_CASE("determinism: same seeded forward+backward twice gives identical loss and grads") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor w1 = random_tensor({6, 6}, rng, true);
    Tensor w2 = random_tensor({6, 4}, rng, true);
    Tensor x = random_tensor({3, 6}, rng);
    std::vector<int> targets{1, 3, 0};
    Tape tape;
    Tensor h = relu(matmul(x, w1));
    Tensor loss = cross_entropy(matmul(h, w2), targets, -1);
    tape.backward(loss);
    std::vector<double> out{loss.item()};
    out.insert(out.end(), w1.grad().begin(), w1.grad().end());
    out.insert(out.end(), w2.grad().begin(), w2.grad().end());
    return out;
  };
  auto a = run(123), b = run(123);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("ops reject non-finite results") {
  Tensor big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(mul(big, big), NumericError);
  CHECK_THROWS_AS(log_t(Tensor::from({1}, {0.0})), NumericError);
  CHECK_THROWS_AS(sqrt_t(Tensor::from({1}, {-1.0})), NumericError);
  CHECK_THROWS_AS(div(Tensor::from({1}, {1.0}), Tensor::from({1}, {0.0})), NumericError);
}

TEST_CASE("tensor invariants: shape/data mismatch rejected") {
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ContractError);
  CHECK_THROWS_AS(Tensor::zeros({0}), ContractError);
}

TEST_SUITE_END();
