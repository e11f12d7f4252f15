// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "xstr/autograd.hpp"
#include "xstr/gradcheck.hpp"

using namespace xstr;
using Catch::Approx;
using xstr::test::random_tensor;

namespace {

using DTape = BasicTape<double>;
using DVar = BasicVar<double>;
using DParams = BasicParamSet<double>;

}  // namespace

TEST_CASE("matmul: identity and hand arithmetic", "[numerics][matmul]") {
  Tape tape;
  auto a = tape.constant(random_tensor({3, 4}, 1));
  auto eye = tape.constant(Tensor({4, 4}, std::vector<float>{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}));
  CHECK(matmul(a, eye).value().bit_equal(a.value()));

  auto m = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  auto ones = tape.constant(Tensor::matrix({{1}, {1}}));
  auto out = matmul(m, ones).value();
  REQUIRE(out.shape() == Shape{2, 1});
  CHECK(out[0] == 3.0f);
  CHECK(out[1] == 7.0f);

  auto bad = tape.constant(Tensor({3, 2}));
  CHECK_THROWS_AS(matmul(m, bad), Error);
}

TEST_CASE("matmul: gradient matches central differences", "[numerics][matmul][grad]") {
  DParams p;
  p.add("enc.a", random_tensor<double>({3, 4}, 2));
  p.add("enc.b", random_tensor<double>({4, 2}, 3));
  auto w = random_tensor<double>({3, 2}, 4);
  LossFn<double> f = [&](DTape& t, DParams& ps) {
    auto y = matmul(t.param(ps, "enc.a"), t.param(ps, "enc.b"));
    return sum(mul(y, t.constant(w)));
  };
  CHECK(finite_diff_check(f, p) < 1e-3);
}

TEST_CASE("conv2d: identity kernel and hand arithmetic", "[numerics][conv]") {
  Tape tape;
  auto x = tape.constant(random_tensor({1, 4, 5}, 5));
  auto k = tape.constant(Tensor({1, 1, 1, 1}, 1.0f));
  CHECK(conv2d(x, k, Conv2dOptions{}).value().bit_equal(x.value()));

  auto x2 = tape.constant(Tensor({1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  auto k2 = tape.constant(Tensor({1, 1, 2, 2}, 1.0f));
  auto y = conv2d(x2, k2, Conv2dOptions{}).value();
  REQUIRE(y.shape() == Shape{1, 1, 1});
  CHECK(y[0] == 10.0f);
}

TEST_CASE("conv2d: output size, relu, and stride errors", "[numerics][conv]") {
  Tape tape;
  auto x = tape.constant(random_tensor({2, 8, 6}, 6));
  auto k = tape.constant(random_tensor({3, 2, 3, 3}, 7));
  Conv2dOptions opt;
  opt.pad_h = opt.pad_w = 1;
  opt.stride_h = 2;
  opt.relu = true;
  // H' = (8 + 2 - 3) / 2 + 1 would not tile: 7 % 2 != 0.
  CHECK_THROWS_MATCHES(conv2d(x, k, opt), Error,
                       Catch::Matchers::Predicate<Error>([](const Error& e) { return e.code() == ErrorCode::BadStride; }));
  opt.stride_h = 1;
  auto y = conv2d(x, k, opt).value();
  CHECK(y.shape() == Shape{3, 8, 6});
  for (float v : y.values()) CHECK(v >= 0.0f);

  auto big = tape.constant(random_tensor({2, 5, 5, 7}, 8));
  CHECK_THROWS_AS(conv2d(x, big, Conv2dOptions{}), Error);
}

TEST_CASE("conv2d: gradient matches central differences", "[numerics][conv][grad]") {
  DParams p;
  p.add("enc.x", random_tensor<double>({2, 5, 5}, 9));
  p.add("enc.k", random_tensor<double>({3, 2, 3, 3}, 10));
  p.add("enc.b", random_tensor<double>({3}, 11));
  auto w = random_tensor<double>({3, 25}, 12);
  LossFn<double> f = [&](DTape& t, DParams& ps) {
    Conv2dOptions opt;
    opt.pad_h = opt.pad_w = 1;
    auto y = conv2d(t.param(ps, "enc.x"), t.param(ps, "enc.k"), t.param(ps, "enc.b"), opt);
    return sum(mul(reshape(y, {3, 25}), t.constant(w)));
  };
  CHECK(finite_diff_check(f, p) < 1e-3);

  // Strided, unpadded, with relu.
  LossFn<double> g = [&](DTape& t, DParams& ps) {
    Conv2dOptions opt;
    opt.stride_h = opt.stride_w = 2;
    opt.relu = true;
    auto y = conv2d(t.param(ps, "enc.x"), t.param(ps, "enc.k"), t.param(ps, "enc.b"), opt);
    return sum(scale(y, 0.7));
  };
  CHECK(finite_diff_check(g, p) < 1e-3);
}

TEST_CASE("max_pool2d: values and tie routing", "[numerics][pool]") {
  Tape tape;
  auto c = tape.constant(Tensor({2, 4, 4}, 3.5f));
  auto pc = max_pool2d(c, 2, 2).value();
  CHECK(pc.shape() == Shape{2, 2, 2});
  for (float v : pc.values()) CHECK(v == 3.5f);

  auto x = tape.constant(Tensor({1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  CHECK(max_pool2d(x, 2, 2).value()[0] == 4.0f);

  ParamSet ps;
  ps.add("enc.x", Tensor({1, 2, 2}, 5.0f));
  Tape t2;
  t2.backward(sum(max_pool2d(t2.param(ps, "enc.x"), 2, 2)));
  const Tensor& g = ps.grad("enc.x");
  CHECK(g[0] == 1.0f);
  CHECK(g[1] == 0.0f);
  CHECK(g[2] == 0.0f);
  CHECK(g[3] == 0.0f);

  CHECK_THROWS_AS(max_pool2d(x, 3, 1), Error);
}

TEST_CASE("max_pool2d: gradient matches central differences", "[numerics][pool][grad]") {
  DParams p;
  p.add("enc.x", random_tensor<double>({2, 4, 6}, 13));
  auto w = random_tensor<double>({2, 2, 3}, 14);
  LossFn<double> f = [&](DTape& t, DParams& ps) {
    return sum(mul(max_pool2d(t.param(ps, "enc.x"), 2, 2), t.constant(w)));
  };
  CHECK(finite_diff_check(f, p) < 1e-3);
}

TEST_CASE("softmax: uniform, shift invariance, naive oracle", "[numerics][softmax]") {
  Tape tape;
  auto eq = softmax(tape.constant(Tensor({4}, 2.0f))).value();
  for (float v : eq.values()) CHECK(v == Approx(0.25f).margin(1e-7));

  auto x = random_tensor({3, 5}, 15, -3, 3);
  Tensor shifted = x;
  for (auto& v : shifted.values()) v += 7.25f;
  auto a = softmax(tape.constant(x)).value();
  auto b = softmax(tape.constant(shifted)).value();
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-6);

  // Naive exp / sum(exp) oracle in double.
  auto v = random_tensor({5}, 16, -2, 2);
  auto s = softmax(tape.constant(v)).value();
  double z = 0.0;
  for (float e : v.values()) z += std::exp(static_cast<double>(e));
  double total = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(std::abs(s[i] - std::exp(static_cast<double>(v[i])) / z) < 1e-6);
    CHECK(s[i] > 0.0f);
    CHECK(s[i] < 1.0f);
    total += s[i];
  }
  CHECK(std::abs(total - 1.0) < 1e-6);

  Tensor bad({3}, 0.0f);
  bad[1] = std::nanf("");
  CHECK_THROWS_AS(softmax(tape.constant(bad)), Error);
}

TEST_CASE("softmax: causal rows ignore the future", "[numerics][softmax]") {
  Tape tape;
  auto y = softmax(tape.constant(random_tensor({3, 3}, 17)), true).value();
  CHECK(y.at(0, 0) == 1.0f);
  CHECK(y.at(0, 1) == 0.0f);
  CHECK(y.at(0, 2) == 0.0f);
  CHECK(y.at(1, 2) == 0.0f);
  CHECK(std::abs(y.at(1, 0) + y.at(1, 1) - 1.0f) < 1e-6);
}

TEST_CASE("softmax: gradient matches central differences", "[numerics][softmax][grad]") {
  DParams p;
  p.add("dec.x", random_tensor<double>({3, 4}, 18));
  auto w = random_tensor<double>({3, 4}, 19);
  for (bool causal : {false, true}) {
    LossFn<double> f = [&](DTape& t, DParams& ps) {
      return sum(mul(t.constant(w), softmax(t.param(ps, "dec.x"), causal)));
    };
    CHECK(finite_diff_check(f, p) < 1e-3);
  }
}

TEST_CASE("layer_norm: constant rows and row statistics", "[numerics][layernorm]") {
  Tape tape;
  auto gain = tape.constant(Tensor({6}, 1.0f));
  auto bias = tape.constant(Tensor({6}, 0.0f));
  auto z = layer_norm(tape.constant(Tensor({2, 6}, 4.0f)), gain, bias).value();
  for (float v : z.values()) CHECK(v == 0.0f);

  auto y = layer_norm(tape.constant(random_tensor({5, 6}, 20, -4, 4)), gain, bias).value();
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mean += y.at(r, c);
    mean /= 6.0;
    for (std::size_t c = 0; c < 6; ++c) sq += (y.at(r, c) - mean) * (y.at(r, c) - mean);
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(std::sqrt(sq / 6.0) - 1.0) < 1e-3);
  }
}

TEST_CASE("layer_norm: gradient matches central differences", "[numerics][layernorm][grad]") {
  DParams p;
  p.add("enc.x", random_tensor<double>({3, 8}, 21));
  p.add("enc.g", random_tensor<double>({8}, 22, 0.5, 1.5));
  p.add("enc.b", random_tensor<double>({8}, 23));
  auto w = random_tensor<double>({3, 8}, 24);
  LossFn<double> f = [&](DTape& t, DParams& ps) {
    auto y = layer_norm(t.param(ps, "enc.x"), t.param(ps, "enc.g"), t.param(ps, "enc.b"));
    return sum(mul(t.constant(w), y));
  };
  CHECK(finite_diff_check(f, p) < 1e-3);
}

TEST_CASE("row ops: gather, slices, concat, bias gradients", "[numerics][grad]") {
  DParams p;
  p.add("dec.e", random_tensor<double>({5, 6}, 25));
  p.add("dec.b", random_tensor<double>({4}, 26));
  auto w = random_tensor<double>({3, 4}, 27);
  LossFn<double> f = [&](DTape& t, DParams& ps) {
    auto rows = gather_rows(t.param(ps, "dec.e"), {4, 0, 4});
    auto left = slice_cols(rows, 0, 2);
    auto right = slice_cols(rows, 4, 2);
    auto joined = add_bias(concat_cols<double>({relu(left), right}), t.param(ps, "dec.b"));
    return sum(mul(t.constant(w), joined));
  };
  CHECK(finite_diff_check(f, p) < 1e-3);
}

TEST_CASE("sgd_step: arithmetic, zero gradients, linearity", "[numerics][sgd]") {
  ParamSet p;
  p.add("enc.w", Tensor({1}, 1.0f));
  p.grad("enc.w")[0] = 0.5f;
  sgd_step(p, 0.01f);
  CHECK(p.value("enc.w")[0] == Approx(0.995f));
  CHECK(p.grad("enc.w")[0] == 0.0f);

  const Tensor before = p.value("enc.w");
  sgd_step(p, 0.01f);
  CHECK(p.value("enc.w").bit_equal(before));

  ParamSet a, b;
  a.add("dec.w", random_tensor({4}, 28));
  b.add("dec.w", a.value("dec.w"));
  auto g1 = random_tensor({4}, 29);
  auto g2 = random_tensor({4}, 30);
  a.grad("dec.w") = g1;
  sgd_step(a, 0.01f);
  a.grad("dec.w") = g2;
  sgd_step(a, 0.01f);
  for (std::size_t i = 0; i < 4; ++i) b.grad("dec.w")[i] = g1[i] + g2[i];
  sgd_step(b, 0.01f);
  for (std::size_t i = 0; i < 4; ++i) CHECK(a.value("dec.w")[i] == Approx(b.value("dec.w")[i]).margin(1e-6));

  ParamSet c;
  c.add("dec.w", Tensor({2}, 1.0f));
  c.grad("dec.w")[1] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(sgd_step(c, 0.01f), Error);
  CHECK(c.value("dec.w")[0] == 1.0f);
}

TEST_CASE("finite_diff_check: analytic sanity cases", "[numerics][gradcheck]") {
  DParams p;
  p.add("enc.t", random_tensor<double>({3, 3}, 31));
  LossFn<double> s = [](DTape& t, DParams& ps) { return sum(t.param(ps, "enc.t")); };
  CHECK(finite_diff_check(s, p) < 1e-6);

  DParams q;
  q.add("enc.t", BasicTensor<double>({2, 3}, 1.0));
  LossFn<double> sq = [](DTape& t, DParams& ps) {
    auto v = t.param(ps, "enc.t");
    return sum(mul(v, v));
  };
  q.zero_grad();
  {
    DTape t;
    t.backward(sq(t, q));
  }
  for (double g : q.grad("enc.t").values()) CHECK(g == 2.0);
  CHECK(finite_diff_check(sq, q) < 1e-4);
}
