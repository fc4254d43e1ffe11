#include <doctest.h>

#include <cmath>
#include <numeric>

#include "cslr/tensor.hpp"
#include "test_util.hpp"

using namespace cslr;
using testutil::max_rel_err;
using testutil::random_tensor;

TEST_CASE("matmul identity and small cases") {
  Tensor a = Tensor::from_values({2, 2}, {1.5, -2.0, 0.25, 4.0});
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor r = matmul(a, eye);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.at(i) == a.at(i));

  Tensor b = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor ones = Tensor::from_values({2, 1}, {1, 1});
  Tensor c = matmul(b, ones);
  CHECK(c.at(0, 0) == 3.0);
  CHECK(c.at(1, 0) == 7.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Tensor a = random_tensor({3, 4}, 11);
  Tensor b = random_tensor({4, 2}, 12);
  Tensor r = matmul(a, b);
  auto expect = testutil::matmul_oracle({a.values().begin(), a.values().end()},
                                        {b.values().begin(), b.values().end()}, 3, 4, 2);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(std::abs(r.at(i) - expect[i]) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax_lastdim basics") {
  Tensor x = Tensor::from_values({2}, {0.0, 0.0});
  Tensor y = softmax_lastdim(x, 1.0);
  CHECK(y.at(0) == doctest::Approx(0.5));
  CHECK(y.at(1) == doctest::Approx(0.5));

  Tensor one = Tensor::from_values({1}, {123.456});
  CHECK(softmax_lastdim(one, 1.0).at(0) == doctest::Approx(1.0));

  Tensor z = Tensor::from_values({2}, {std::log(2.0), 0.0});
  Tensor yz = softmax_lastdim(z, 1.0);
  CHECK(yz.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(yz.at(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  Tensor x = random_tensor({5, 7}, 21, -3.0, 3.0);
  Tensor y = softmax_lastdim(x, 2.0);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += y.at(i, j);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  std::vector<double> shifted(x.values().begin(), x.values().end());
  for (auto& v : shifted) v += 17.25;
  Tensor y2 = softmax_lastdim(Tensor::from_values({5, 7}, shifted), 2.0);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y.at(i) - y2.at(i)) < 1e-12);
}

TEST_CASE("softmax rejects non-finite input") {
  Tensor x = Tensor::from_values({2}, {1.0, std::numeric_limits<double>::infinity()});
  CHECK_THROWS_AS(softmax_lastdim(x, 1.0), NumericError);
}

TEST_CASE("layer_norm basics") {
  Tensor gain = Tensor::from_values({4}, {1, 1, 1, 1});
  Tensor bias = Tensor::zeros({4});

  Tensor constant = Tensor::from_values({4}, {3.5, 3.5, 3.5, 3.5});
  Tensor y = layer_norm(constant, gain, bias, 1e-5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(y.at(i)) < 1e-12);

  Tensor pm = Tensor::from_values({2}, {1.0, -1.0});
  Tensor g2 = Tensor::from_values({2}, {1, 1});
  Tensor b2 = Tensor::zeros({2});
  Tensor y2 = layer_norm(pm, g2, b2, 1e-12);
  CHECK(y2.at(0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(y2.at(1) == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("layer_norm standardizes random rows") {
  Tensor x = random_tensor({3, 16}, 31, -2.0, 2.0);
  Tensor gain = Tensor::full({16}, 1.0);
  Tensor bias = Tensor::zeros({16});
  Tensor y = layer_norm(x, gain, bias, 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mean += y.at(r, j);
    mean /= 16.0;
    for (std::size_t j = 0; j < 16; ++j) var += (y.at(r, j) - mean) * (y.at(r, j) - mean);
    var /= 16.0;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-10);
  }
}

TEST_CASE("layer_norm shift and positive scale invariance") {
  Tensor gain = Tensor::full({8}, 1.0);
  Tensor bias = Tensor::zeros({8});
  Tensor x = random_tensor({8}, 33);
  Tensor y = layer_norm(x, gain, bias, 1e-10);
  std::vector<double> tx(x.values().begin(), x.values().end());
  for (auto& v : tx) v = 3.0 * v + 7.0;
  Tensor y2 = layer_norm(Tensor::from_values({8}, tx), gain, bias, 1e-10);
  for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(y.at(i) - y2.at(i)) < 1e-8);
}

TEST_CASE("layer_norm rejects zero-length axis and bad eps") {
  Tensor x = Tensor::zeros({3, 0});
  Tensor g = Tensor::zeros({0});
  CHECK_THROWS_AS(layer_norm(x, g, g, 1e-5), DimensionError);
  Tensor x2 = Tensor::zeros({4});
  Tensor g2 = Tensor::full({4}, 1.0);
  CHECK_THROWS_AS(layer_norm(x2, g2, g2, 0.0), ConfigError);
}

TEST_CASE("depthwise_conv1d identity kernels") {
  Tensor x = random_tensor({6, 3}, 41);
  Tensor k1 = Tensor::full({1, 3}, 1.0);
  Tensor y1 = depthwise_conv1d(x, k1);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y1.at(i) == x.at(i));

  Tensor k3 = Tensor::from_values({3, 3}, {0, 0, 0, 1, 1, 1, 0, 0, 0});
  Tensor y3 = depthwise_conv1d(x, k3);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y3.at(i) == x.at(i));
}

TEST_CASE("depthwise_conv1d ramp oracle") {
  Tensor x = Tensor::from_values({4, 1}, {1, 2, 3, 4});
  Tensor k = Tensor::from_values({3, 1}, {1, 1, 1});
  Tensor y = depthwise_conv1d(x, k);
  CHECK(y.at(0) == 3.0);
  CHECK(y.at(1) == 6.0);
  CHECK(y.at(2) == 9.0);
  CHECK(y.at(3) == 7.0);
}

TEST_CASE("depthwise_conv1d even kernel rejected and linearity holds") {
  CHECK_THROWS_AS(depthwise_conv1d(Tensor::zeros({4, 2}), Tensor::zeros({2, 2})), ConfigError);

  Tensor k = random_tensor({5, 4}, 51);
  Tensor x = random_tensor({9, 4}, 52);
  Tensor y = random_tensor({9, 4}, 53);
  const double alpha = 0.7, beta = -1.3;
  std::vector<double> mix(x.size());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * x.at(i) + beta * y.at(i);
  Tensor lhs = depthwise_conv1d(Tensor::from_values({9, 4}, mix), k);
  Tensor cx = depthwise_conv1d(x, k);
  Tensor cy = depthwise_conv1d(y, k);
  for (std::size_t i = 0; i < lhs.size(); ++i)
    CHECK(std::abs(lhs.at(i) - (alpha * cx.at(i) + beta * cy.at(i))) < 1e-12);
}

TEST_CASE("glu halves") {
  Tensor x = Tensor::from_values({4}, {2.0, -1.0, 0.0, 0.0});
  Tensor y = glu(x);
  CHECK(y.at(0) == doctest::Approx(1.0));
  CHECK(y.at(1) == doctest::Approx(-0.5));

  Tensor sat = Tensor::from_values({2}, {3.0, 50.0});
  CHECK(glu(sat).at(0) == doctest::Approx(3.0).epsilon(1e-12));

  Tensor ev = Tensor::from_values({2}, {2.0, std::log(3.0)});
  CHECK(glu(ev).at(0) == doctest::Approx(1.5).epsilon(1e-12));

  CHECK_THROWS_AS(glu(Tensor::zeros({3})), DimensionError);
}

TEST_CASE("swish values") {
  CHECK(swish(Tensor::scalar(0.0)).at(0) == 0.0);
  CHECK(swish(Tensor::scalar(40.0)).at(0) == doctest::Approx(40.0).epsilon(1e-12));
  CHECK(swish(Tensor::scalar(1.0)).at(0) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
}

TEST_CASE("backward of sum gives ones, of sum of squares gives 2x") {
  Tensor x = testutil::random_parameter({3, 2}, 61);
  {
    Tape tape;
    Tensor loss = sum(x);
    backward(loss, tape);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == 1.0);
  }
  x.zero_grad();
  {
    Tape tape;
    Tensor loss = sum(mul(x, x));
    backward(loss, tape);
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(x.grad()[i] == doctest::Approx(2.0 * x.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("backward contract errors") {
  Tensor x = testutil::random_parameter({2, 2}, 62);
  {
    Tape tape;
    Tensor y = mul(x, x);
    CHECK_THROWS_AS(backward(y, tape), ContractError);  // non-scalar
  }
  {
    Tape tape;
    Tensor detached = Tensor::scalar(1.0);
    CHECK_THROWS_AS(backward(detached, tape), GraphError);
  }
  {
    Tape tape;
    Tensor loss = sum(x);
    Tensor loss2 = sum(x);
    backward(loss, tape);
    CHECK_THROWS_AS(backward(loss2, tape), GraphError);  // consumed
    CHECK_THROWS_AS(sum(x), GraphError);                 // append after consumption
  }
}

TEST_CASE("composite graph gradient matches finite differences") {
  // matmul -> softmax -> layer_norm -> sum
  Tensor w = testutil::random_parameter({4, 4}, 71);
  Tensor gain = Tensor::full({4}, 1.0);
  Tensor bias = Tensor::zeros({4});
  Tensor x0 = random_tensor({3, 4}, 72);

  auto forward = [&](const Tensor& xin) {
    Tensor h = matmul(xin, w);
    Tensor s = softmax_lastdim(h, std::sqrt(4.0));
    Tensor n = layer_norm(s, gain, bias, 1e-5);
    return sum(n);
  };

  Tensor x = Tensor::parameter(x0.shape(), {x0.values().begin(), x0.values().end()});
  {
    Tape tape;
    Tensor loss = forward(x);
    backward(loss, tape);
  }
  auto fd = finite_difference_gradient([&](const Tensor& t) { return forward(t).item(); }, x0, 1e-4);
  CHECK(max_rel_err(x.grad(), fd) < 1e-4);
}

TEST_CASE("finite_difference_gradient analytic cases") {
  auto fsum = [](const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v;
    return s;
  };
  Tensor x = random_tensor({5}, 81);
  auto g = finite_difference_gradient(fsum, x, 1e-5);
  for (double v : g) CHECK(v == doctest::Approx(1.0).epsilon(1e-8));

  auto fsq = [](const Tensor& t) { return t.at(0) * t.at(0); };
  auto g2 = finite_difference_gradient(fsq, Tensor::scalar(3.0), 1e-4);
  CHECK(std::abs(g2[0] - 6.0) < 1e-6);

  // Symmetric quadratic form: grad of x' A x is 2 A x.
  const std::size_t n = 4;
  Tensor araw = random_tensor({n, n}, 82);
  std::vector<double> sym(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym[i * n + j] = 0.5 * (araw.at(i, j) + araw.at(j, i));
  Tensor xq = random_tensor({n}, 83);
  auto quad = [&](const Tensor& t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) acc += t.at(i) * sym[i * n + j] * t.at(j);
    return acc;
  };
  auto gq = finite_difference_gradient(quad, xq, 1e-5);
  for (std::size_t i = 0; i < n; ++i) {
    double expect = 0.0;
    for (std::size_t j = 0; j < n; ++j) expect += 2.0 * sym[i * n + j] * xq.at(j);
    CHECK(std::abs(gq[i] - expect) < 1e-5);
  }
}

namespace {

// Runs loss = sum(op(x)) backward and compares against central differences.
void gradcheck_unary(const std::function<Tensor(const Tensor&)>& op, Shape shape,
                     std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor x0 = random_tensor(shape, seed, lo, hi);
  Tensor x = Tensor::parameter(shape, {x0.values().begin(), x0.values().end()});
  {
    Tape tape;
    Tensor loss = sum(op(x));
    backward(loss, tape);
  }
  auto fd = finite_difference_gradient([&](const Tensor& t) { return sum(op(t)).item(); }, x0, 1e-4);
  CHECK(max_rel_err(x.grad(), fd) < 1e-4);
}

}  // namespace

TEST_CASE("gradient checks for every differentiable op") {
  gradcheck_unary([](const Tensor& t) { return swish(t); }, {3, 4}, 101);
  gradcheck_unary([](const Tensor& t) { return glu(t); }, {3, 6}, 102);
  gradcheck_unary([](const Tensor& t) { return softmax_lastdim(t, 1.7); }, {3, 5}, 103);
  gradcheck_unary([](const Tensor& t) { return scale(t, -2.5); }, {7}, 104);
  gradcheck_unary([](const Tensor& t) { return transpose(t); }, {3, 4}, 105);
  gradcheck_unary([](const Tensor& t) { return slice_cols(t, 1, 3); }, {4, 6}, 106);
  gradcheck_unary([](const Tensor& t) { return avgpool_rows(t, 2); }, {5, 3}, 107);
  gradcheck_unary([](const Tensor& t) { return upsample_rows_nearest(t, 7); }, {3, 2}, 108);

  Tensor gain = testutil::random_parameter({5}, 109, 0.5, 1.5);
  Tensor bias = testutil::random_parameter({5}, 110);
  gradcheck_unary([&](const Tensor& t) { return layer_norm(t, gain, bias, 1e-5); }, {4, 5}, 111);

  Tensor other = random_tensor({4, 5}, 112);
  gradcheck_unary([&](const Tensor& t) { return add(t, other); }, {4, 5}, 113);
  gradcheck_unary([&](const Tensor& t) { return sub(other, t); }, {4, 5}, 114);
  gradcheck_unary([&](const Tensor& t) { return mul(t, other); }, {4, 5}, 115);
  Tensor rowb = random_tensor({5}, 116);
  gradcheck_unary([&](const Tensor& t) { return add_rowwise(t, rowb); }, {4, 5}, 117);

  Tensor rhs = random_tensor({4, 3}, 118);
  gradcheck_unary([&](const Tensor& t) { return matmul(t, rhs); }, {2, 4}, 119);
  Tensor lhs = random_tensor({2, 4}, 120);
  gradcheck_unary([&](const Tensor& t) { return matmul(lhs, t); }, {4, 3}, 121);

  Tensor dwk = random_tensor({3, 4}, 122);
  gradcheck_unary([&](const Tensor& t) { return depthwise_conv1d(t, dwk); }, {6, 4}, 123);
  gradcheck_unary([&](const Tensor& t) { return depthwise_conv1d(random_tensor({6, 4}, 124), t); },
                  {3, 4}, 125);

  Tensor cw = random_tensor({3, 4, 5}, 126);
  gradcheck_unary([&](const Tensor& t) { return conv1d(t, cw, 2, PadMode::kZero); }, {7, 4}, 127);
  gradcheck_unary([&](const Tensor& t) { return conv1d(t, cw, 2, PadMode::kReplicate); }, {7, 4}, 128);
  gradcheck_unary([&](const Tensor& t) { return conv1d(random_tensor({7, 4}, 129), t, 1, PadMode::kZero); },
                  {3, 4, 5}, 130);

  Tensor rel = random_tensor({7, 4}, 131);
  gradcheck_unary([&](const Tensor& t) { return relative_position_logits(t, rel, 3); }, {5, 4}, 132);
  gradcheck_unary([&](const Tensor& t) { return relative_position_logits(random_tensor({5, 4}, 133), t, 3); },
                  {7, 4}, 134);

  // concat of a slice pair round-trips the gradient.
  gradcheck_unary(
      [](const Tensor& t) {
        return concat_cols({slice_cols(t, 0, 2), slice_cols(t, 2, 2)});
      },
      {3, 4}, 135);
}

TEST_CASE("gradients accumulate when a tensor is used twice") {
  Tensor x = testutil::random_parameter({3}, 141);
  Tape tape;
  Tensor loss = sum(add(x, x));
  backward(loss, tape);
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0);
}

TEST_CASE("ops are bitwise deterministic") {
  Tensor a = random_tensor({8, 8}, 151);
  Tensor b = random_tensor({8, 8}, 152);
  Tensor r1 = matmul(a, b);
  Tensor r2 = matmul(a, b);
  for (std::size_t i = 0; i < r1.size(); ++i) CHECK(r1.at(i) == r2.at(i));
  Tensor s1 = softmax_lastdim(a, 3.0);
  Tensor s2 = softmax_lastdim(a, 3.0);
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1.at(i) == s2.at(i));
}

TEST_CASE("forward ops stay finite on finite inputs") {
  Tensor x = random_tensor({6, 8}, 161, -5.0, 5.0);
  CHECK(swish(x).all_finite());
  CHECK(softmax_lastdim(x, std::sqrt(8.0)).all_finite());
  CHECK(glu(x).all_finite());
  Tensor gain = Tensor::full({8}, 1.0);
  CHECK(layer_norm(x, gain, Tensor::zeros({8}), 1e-5).all_finite());
}

TEST_CASE("dropout masks deterministically per seed and scales by keep") {
  Tensor x = Tensor::full({1000}, 1.0);
  cslr::Rng r1(99), r2(99);
  Tensor d1 = dropout(x, 0.4, r1);
  Tensor d2 = dropout(x, 0.4, r2);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < d1.size(); ++i) {
    CHECK(d1.at(i) == d2.at(i));
    if (d1.at(i) != 0.0) {
      CHECK(d1.at(i) == doctest::Approx(1.0 / 0.6));
      ++kept;
    }
  }
  CHECK(kept > 500);
  CHECK(kept < 700);
  cslr::Rng r3(1);
  Tensor id = dropout(x, 0.0, r3);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(id.at(i) == 1.0);
}
