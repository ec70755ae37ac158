#include <doctest.h>

#include <cmath>

#include "mixri/gradcheck.hpp"
#include "mixri/ops.hpp"
#include "mixri/rng.hpp"

using namespace mixri;

TEST_CASE("matmul identity and hand case") {
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::from_values({2, 2}, {3, -1, 2, 5});
  Tensor y = ops::matmul(eye, x);
  for (int i = 0; i < 4; ++i) CHECK(y.value_at(i) == doctest::Approx(x.value_at(i)));

  // [[1,2],[3,4]] @ [[5],[6]] = [[17],[39]]
  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_values({2, 1}, {5, 6});
  Tensor c = ops::matmul(a, b);
  CHECK(c.value_at(0) == doctest::Approx(17));
  CHECK(c.value_at(1) == doctest::Approx(39));
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor a = Tensor::zeros({2, 3}, Dtype::Float64);
  Tensor b = Tensor::zeros({2, 3}, Dtype::Float64);
  CHECK_THROWS_WITH_AS(ops::matmul(a, b),
                       doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("matmul gradient of sum(A@B) w.r.t. A equals ones@B^T") {
  Rng rng(42);
  Tensor a = ops::randn({3, 4}, Dtype::Float64, rng);
  a.set_requires_grad(true);
  Tensor b = ops::randn({4, 2}, Dtype::Float64, rng);
  Tensor s = ops::reduce_sum(ops::matmul(a, b));
  backward(s);
  // expected: each row of dA equals the row sums of B
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double expect = 0.0;
      for (int k = 0; k < 2; ++k) expect += b.value_at(j * 2 + k);
      CHECK(a.grad_at(i * 4 + j) == doctest::Approx(expect).epsilon(1e-12));
    }

  // and against central finite differences
  Tensor a0 = ops::randn({3, 4}, Dtype::Float64, rng);
  const double err = finite_diff_check(
      [&](const Tensor& x) { return ops::reduce_sum(ops::matmul(x, b)); }, a0);
  CHECK(err < 1e-6);
}

TEST_CASE("batched matmul broadcasting") {
  Rng rng(1);
  Tensor a = ops::randn({2, 3, 4, 5}, Dtype::Float64, rng);
  Tensor b = ops::randn({5, 6}, Dtype::Float64, rng);
  Tensor c = ops::matmul(a, b);
  CHECK(c.shape() == Shape{2, 3, 4, 6});
  // spot check one batch element against a rank-2 product
  Tensor a11 = Tensor::zeros({4, 5}, Dtype::Float64);
  for (int i = 0; i < 20; ++i) a11.set_value(i, a.value_at(1 * 3 * 20 + 2 * 20 + i));
  Tensor ref = ops::matmul(a11, b);
  for (int i = 0; i < 24; ++i)
    CHECK(c.value_at(1 * 3 * 24 + 2 * 24 + i) == doctest::Approx(ref.value_at(i)).epsilon(1e-12));
}

TEST_CASE("softmax examples") {
  Tensor x = Tensor::from_values({3}, {0, 0, 0});
  Tensor y = ops::softmax(x, 0);
  for (int i = 0; i < 3; ++i) CHECK(y.value_at(i) == doctest::Approx(1.0 / 3));

  Tensor big = Tensor::from_values({2}, {1000, 0});
  Tensor yb = ops::softmax(big, 0);
  CHECK(yb.value_at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(yb.value_at(1) == doctest::Approx(0.0));
  CHECK(std::isfinite(yb.value_at(0)));

  Tensor t = Tensor::from_values({3}, {1, 2, 3});
  Tensor yt = ops::softmax(t, 0);
  CHECK(yt.value_at(0) == doctest::Approx(0.09003057).epsilon(1e-7));
  CHECK(yt.value_at(1) == doctest::Approx(0.24472847).epsilon(1e-7));
  CHECK(yt.value_at(2) == doctest::Approx(0.66524096).epsilon(1e-7));
}

TEST_CASE("softmax sums to one for random finite inputs") {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = ops::randn({4, 7}, Dtype::Float64, rng, 0.0, 100.0);
    Tensor y = ops::softmax(x, 1);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int c = 0; c < 7; ++c) s += y.value_at(r * 7 + c);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("attention with a single key returns v") {
  Rng rng(3);
  Tensor q = ops::randn({2, 5, 8}, Dtype::Float64, rng);
  Tensor k = ops::randn({2, 1, 8}, Dtype::Float64, rng);
  Tensor v = ops::randn({2, 1, 8}, Dtype::Float64, rng);
  Tensor out = ops::multi_head_attention(q, k, v, std::nullopt, 2);
  for (int b = 0; b < 2; ++b)
    for (int l = 0; l < 5; ++l)
      for (int d = 0; d < 8; ++d)
        CHECK(out.value_at((b * 5 + l) * 8 + d) == doctest::Approx(v.value_at(b * 8 + d)));
}

TEST_CASE("attention: masked key is bitwise-ignored") {
  Rng rng(4);
  Tensor q = ops::randn({1, 3, 8}, Dtype::Float64, rng);
  Tensor k = ops::randn({1, 4, 8}, Dtype::Float64, rng);
  Tensor v = ops::randn({1, 4, 8}, Dtype::Float64, rng);
  Tensor mask = Tensor::zeros({1, 3, 4}, Dtype::Float64);
  for (int lq = 0; lq < 3; ++lq)
    mask.set_value(lq * 4 + 2, std::numeric_limits<double>::lowest());  // drop key 2

  Tensor out1 = ops::multi_head_attention(q, k, v, mask, 2);
  // scramble key/value 2 arbitrarily
  Tensor k2 = k.clone(), v2 = v.clone();
  for (int d = 0; d < 8; ++d) {
    k2.set_value(2 * 8 + d, rng.uniform(-1e6, 1e6));
    v2.set_value(2 * 8 + d, rng.uniform(-1e6, 1e6));
  }
  Tensor out2 = ops::multi_head_attention(q, k2, v2, mask, 2);
  for (int i = 0; i < out1.numel(); ++i) CHECK(out1.value_at(i) == out2.value_at(i));
}

TEST_CASE("attention fully masked row stays finite") {
  Rng rng(5);
  Tensor q = ops::randn({1, 2, 4}, Dtype::Float64, rng);
  Tensor k = ops::randn({1, 3, 4}, Dtype::Float64, rng);
  Tensor v = ops::randn({1, 3, 4}, Dtype::Float64, rng);
  Tensor mask = Tensor::full({1, 2, 3}, std::numeric_limits<double>::lowest(), Dtype::Float64);
  Tensor out = ops::multi_head_attention(q, k, v, mask, 1);
  for (int i = 0; i < out.numel(); ++i) CHECK(std::isfinite(out.value_at(i)));
}

TEST_CASE("attention single head hand case") {
  // one query, two keys, D = 2, scale 1/sqrt(2)
  Tensor q = Tensor::from_values({1, 1, 2}, {1.0, 0.5});
  Tensor k = Tensor::from_values({1, 2, 2}, {0.2, -0.3, 0.7, 0.1});
  Tensor v = Tensor::from_values({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  const double s0 = (1.0 * 0.2 + 0.5 * -0.3) / std::sqrt(2.0);
  const double s1 = (1.0 * 0.7 + 0.5 * 0.1) / std::sqrt(2.0);
  const double m = std::max(s0, s1);
  const double w0 = std::exp(s0 - m), w1 = std::exp(s1 - m);
  const double z = w0 + w1;
  const double e0 = (w0 * 1.0 + w1 * 3.0) / z;
  const double e1 = (w0 * 2.0 + w1 * 4.0) / z;
  Tensor out = ops::multi_head_attention(q, k, v, std::nullopt, 1);
  CHECK(out.value_at(0) == doctest::Approx(e0).epsilon(1e-12));
  CHECK(out.value_at(1) == doctest::Approx(e1).epsilon(1e-12));
}

TEST_CASE("conv2d identity and all-ones") {
  // 1x1 kernel of value 1 is the identity
  Rng rng(6);
  Tensor x = ops::randn({1, 1, 4, 4}, Dtype::Float64, rng);
  Tensor w = Tensor::from_values({1, 1, 1, 1}, {1.0});
  Tensor y = ops::conv2d(x, w, std::nullopt, 1, 0);
  for (int i = 0; i < 16; ++i) CHECK(y.value_at(i) == doctest::Approx(x.value_at(i)));

  // 3x3 ones kernel over 5x5 ones, no padding -> 3x3 of 9s
  Tensor ones5 = Tensor::full({1, 1, 5, 5}, 1.0, Dtype::Float64);
  Tensor w3 = Tensor::full({1, 1, 3, 3}, 1.0, Dtype::Float64);
  Tensor y3 = ops::conv2d(ones5, w3, std::nullopt, 1, 0);
  CHECK(y3.shape() == Shape{1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(y3.value_at(i) == doctest::Approx(9.0));
}

TEST_CASE("conv2d geometry error") {
  Tensor x = Tensor::zeros({1, 1, 2, 2}, Dtype::Float64);
  Tensor w = Tensor::zeros({1, 1, 5, 5}, Dtype::Float64);
  CHECK_THROWS_AS(ops::conv2d(x, w, std::nullopt, 1, 0), std::invalid_argument);
  Tensor w_badc = Tensor::zeros({1, 3, 1, 1}, Dtype::Float64);
  CHECK_THROWS_AS(ops::conv2d(x, w_badc, std::nullopt, 1, 0), std::invalid_argument);
}

TEST_CASE("conv2d backward vs finite differences") {
  Rng rng(7);
  Tensor x0 = ops::randn({2, 2, 5, 5}, Dtype::Float64, rng);
  Tensor w = ops::randn({3, 2, 3, 3}, Dtype::Float64, rng, 0.0, 0.5);
  Tensor b = ops::randn({3}, Dtype::Float64, rng, 0.0, 0.5);
  const double err_x = finite_diff_check(
      [&](const Tensor& x) { return ops::reduce_sum(ops::square(ops::conv2d(x, w, b, 2, 1))); },
      x0);
  CHECK(err_x < 1e-5);
  const double err_w = finite_diff_check(
      [&](const Tensor& wp) { return ops::reduce_sum(ops::square(ops::conv2d(x0, wp, b, 2, 1))); },
      w);
  CHECK(err_w < 1e-5);
}

TEST_CASE("conv3d forward shape and backward") {
  Rng rng(8);
  Tensor x0 = ops::randn({1, 1, 4, 4, 4}, Dtype::Float64, rng);
  Tensor w = ops::randn({2, 1, 3, 3, 3}, Dtype::Float64, rng, 0.0, 0.5);
  Tensor y = ops::conv3d(x0, w, std::nullopt, 1, 1);
  CHECK(y.shape() == Shape{1, 2, 4, 4, 4});
  const double err = finite_diff_check(
      [&](const Tensor& x) {
        return ops::reduce_sum(ops::square(ops::conv3d(x, w, std::nullopt, 1, 1)));
      },
      x0);
  CHECK(err < 1e-5);
}

TEST_CASE("bilinear_sample examples") {
  // feature map [1,2,2]: values 2 4 / 6 8
  Tensor fm = Tensor::from_values({1, 2, 2}, {2, 4, 6, 8});
  // integer coordinate -> exact value
  Tensor a = ops::bilinear_sample(fm, {{1.0, 0.0}});
  CHECK(a.value_at(0) == doctest::Approx(4.0));
  // midpoint between 2 and 4
  Tensor b = ops::bilinear_sample(fm, {{0.5, 0.0}});
  CHECK(b.value_at(0) == doctest::Approx(3.0));
  // clamped point equals the border sample
  Tensor c = ops::bilinear_sample(fm, {{-3.2, 1.0}});
  Tensor d = ops::bilinear_sample(fm, {{0.0, 1.0}});
  CHECK(c.value_at(0) == doctest::Approx(d.value_at(0)));
}

TEST_CASE("bilinear_sample backward vs finite differences") {
  Rng rng(10);
  Tensor fm = ops::randn({3, 4, 5}, Dtype::Float64, rng);
  const std::vector<std::array<double, 2>> pts = {{0.3, 1.7}, {-2.0, 0.5}, {4.9, 3.9}, {2.0, 2.0}};
  const double err = finite_diff_check(
      [&](const Tensor& f) { return ops::reduce_sum(ops::square(ops::bilinear_sample(f, pts))); },
      fm);
  CHECK(err < 1e-6);
}

TEST_CASE("finite_diff_check on quadratic, constant") {
  Rng rng(11);
  Tensor x = ops::randn({6}, Dtype::Float64, rng);
  const double err = finite_diff_check(
      [](const Tensor& t) { return ops::reduce_sum(ops::square(t)); }, x);
  CHECK(err < 1e-8);

  const double errc = finite_diff_check(
      [](const Tensor& t) { return ops::mul_scalar(ops::reduce_sum(ops::mul_scalar(t, 0.0)), 1.0); }, x);
  CHECK(errc < 1e-10);
}

TEST_CASE("layer_norm backward") {
  Rng rng(12);
  Tensor x0 = ops::randn({3, 6}, Dtype::Float64, rng);
  Tensor g = ops::randn({6}, Dtype::Float64, rng, 1.0, 0.2);
  Tensor b = ops::randn({6}, Dtype::Float64, rng, 0.0, 0.2);
  const double errx = finite_diff_check(
      [&](const Tensor& x) { return ops::reduce_sum(ops::square(ops::layer_norm(x, g, b))); }, x0);
  CHECK(errx < 1e-5);
  const double errg = finite_diff_check(
      [&](const Tensor& gp) { return ops::reduce_sum(ops::square(ops::layer_norm(x0, gp, b))); },
      g);
  CHECK(errg < 1e-6);
}

TEST_CASE("primitive gradients over randomized shapes and seeds") {
  // softmax, attention, reductions, elementwise ops across >= 20 seeds
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed * 13 + 5);
    const int64_t rows = 2 + static_cast<int64_t>(rng.uniform_int(3));
    const int64_t cols = 2 + static_cast<int64_t>(rng.uniform_int(4));
    Tensor x = ops::randn({rows, cols}, Dtype::Float64, rng);

    const double e1 = finite_diff_check(
        [&](const Tensor& t) { return ops::reduce_sum(ops::square(ops::softmax(t, 1))); }, x);
    CHECK(e1 < 1e-4);

    const double e2 = finite_diff_check(
        [&](const Tensor& t) { return ops::reduce_mean(ops::mul(ops::sigmoid(t), ops::relu(t))); },
        x);
    CHECK(e2 < 1e-4);

    Tensor q0 = ops::randn({1, rows, 4}, Dtype::Float64, rng);
    Tensor k0 = ops::randn({1, rows, 4}, Dtype::Float64, rng);
    Tensor v0 = ops::randn({1, rows, 4}, Dtype::Float64, rng);
    const double e3 = finite_diff_check(
        [&](const Tensor& t) {
          return ops::reduce_sum(ops::square(ops::multi_head_attention(t, k0, v0, std::nullopt, 2)));
        },
        q0);
    CHECK(e3 < 1e-4);
    const double e4 = finite_diff_check(
        [&](const Tensor& t) {
          return ops::reduce_sum(ops::square(ops::multi_head_attention(q0, t, v0, std::nullopt, 2)));
        },
        k0);
    CHECK(e4 < 1e-4);
  }
}

TEST_CASE("losses") {
  // BCE at a perfect confident prediction is tiny but finite
  Tensor p = Tensor::from_values({2}, {1.0, 0.0});
  Tensor y = Tensor::from_values({2}, {1.0, 0.0});
  Tensor l = ops::bce_with_probs(p, y);
  CHECK(l.value_at(0) < 1e-6);
  CHECK(l.value_at(1) < 1e-6);
  CHECK(std::isfinite(l.value_at(0)));

  // Huber quadratic branch: error 0.01 with delta 0.0357 -> 0.5 * 0.01^2
  Tensor pred = Tensor::from_values({1}, {0.01});
  Tensor target = Tensor::from_values({1}, {0.0});
  Tensor h = ops::huber(pred, target, 0.0357);
  CHECK(h.value_at(0) == doctest::Approx(0.5 * 0.01 * 0.01).epsilon(1e-12));

  // linear branch
  Tensor pred2 = Tensor::from_values({1}, {0.2});
  Tensor h2 = ops::huber(pred2, target, 0.0357);
  CHECK(h2.value_at(0) == doctest::Approx(0.0357 * (0.2 - 0.5 * 0.0357)).epsilon(1e-12));

  Rng rng(14);
  Tensor p0 = ops::uniform({5}, Dtype::Float64, rng, 0.05, 0.95);
  Tensor y0 = Tensor::from_values({5}, {1, 0, 1, 1, 0});
  const double err = finite_diff_check(
      [&](const Tensor& t) { return ops::reduce_mean(ops::bce_with_probs(t, y0)); }, p0);
  CHECK(err < 1e-6);
}

TEST_CASE("graph topological order and determinism") {
  Rng rng(15);
  Tensor x = ops::randn({4}, Dtype::Float64, rng);
  x.set_requires_grad(true);
  Tensor y = ops::reduce_sum(ops::mul(ops::relu(x), x));
  Graph g = Graph::from(y);
  // parents precede children
  std::vector<const TensorImpl*> seen;
  for (const auto& rec : g.nodes()) {
    for (const auto& parent : rec.node->parents)
      CHECK(std::find(seen.begin(), seen.end(), parent.get()) != seen.end());
    seen.push_back(rec.node);
  }
  g.backward();
  CHECK(x.has_grad());

  // forward determinism: same seed, same bytes
  Rng r1(77), r2(77);
  Tensor a1 = ops::randn({16}, Dtype::Float32, r1);
  Tensor a2 = ops::randn({16}, Dtype::Float32, r2);
  Tensor s1 = ops::softmax(a1, 0), s2 = ops::softmax(a2, 0);
  for (int i = 0; i < 16; ++i) CHECK(s1.data<float>()[i] == s2.data<float>()[i]);
}

TEST_CASE("reshape concat slice permute round trips") {
  Rng rng(16);
  Tensor x = ops::randn({2, 3, 4}, Dtype::Float64, rng);
  Tensor p = ops::permute(x, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  Tensor back = ops::permute(p, {1, 2, 0});
  for (int i = 0; i < x.numel(); ++i) CHECK(back.value_at(i) == x.value_at(i));

  Tensor a = ops::slice(x, 1, 0, 2);
  Tensor b = ops::slice(x, 1, 2, 1);
  Tensor cat = ops::concat({a, b}, 1);
  for (int i = 0; i < x.numel(); ++i) CHECK(cat.value_at(i) == x.value_at(i));

  const double err = finite_diff_check(
      [&](const Tensor& t) {
        Tensor u = ops::permute(t, {1, 0, 2});
        Tensor s = ops::concat({ops::slice(u, 0, 0, 1), ops::slice(u, 0, 1, 2)}, 0);
        return ops::reduce_sum(ops::square(ops::reshape(s, {24})));
      },
      x);
  CHECK(err < 1e-6);
}
