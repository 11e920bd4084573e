#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "ccgn/tensor.hpp"

using namespace ccgn;

namespace {

// Brute-force cross-correlation, quadruple nested loops over output position
// and kernel taps. This is the oracle conv2d is checked against.
Tensor reference_conv2d(const Tensor& x, const Tensor& k, int stride, Padding padding) {
  const int H = x.shape[0], W = x.shape[1], Cin = x.shape[2];
  const int kh = k.shape[0], kw = k.shape[1], Cout = k.shape[3];
  int oh, ow, pad_top = 0, pad_left = 0;
  if (padding == Padding::Valid) {
    oh = (H - kh) / stride + 1;
    ow = (W - kw) / stride + 1;
  } else {
    oh = (H + stride - 1) / stride;
    ow = (W + stride - 1) / stride;
    pad_top = std::max((oh - 1) * stride + kh - H, 0) / 2;
    pad_left = std::max((ow - 1) * stride + kw - W, 0) / 2;
  }
  Tensor out({oh, ow, Cout});
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j)
      for (int co = 0; co < Cout; ++co) {
        double acc = 0;
        for (int u = 0; u < kh; ++u)
          for (int v = 0; v < kw; ++v)
            for (int ci = 0; ci < Cin; ++ci) {
              const int ih = i * stride + u - pad_top;
              const int iw = j * stride + v - pad_left;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              acc += static_cast<double>(x(ih, iw, ci)) * k(u, v, ci, co);
            }
        out(i, j, co) = static_cast<float>(acc);
      }
  return out;
}

Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.f, float hi = 1.f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniformf(lo, hi);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += static_cast<double>(a.data[i]) * b.data[i];
  return acc;
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({3, 0, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  t(1, 2) = 5.f;
  CHECK(t.data[5] == 5.f);
  Tensor bad = Tensor::full({2}, 1.f);
  bad.data[1] = std::nanf("");
  CHECK_THROWS_AS(require_finite(bad, "test"), ValueError);
}

TEST_CASE("rng is deterministic and uniform-ish") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  Rng r(7);
  double mean = 0;
  for (int i = 0; i < 20000; ++i) mean += r.uniform();
  mean /= 20000;
  CHECK(std::abs(mean - 0.5) < 0.01);
}

TEST_CASE("matmul kernels match naive loops") {
  Rng rng(3);
  const int M = 7, K = 5, N = 9;
  std::vector<float> A(M * K), B(K * N), Bt(N * K);
  for (auto& v : A) v = rng.uniformf(-1, 1);
  for (auto& v : B) v = rng.uniformf(-1, 1);

  std::vector<float> C(M * N, 0.f), Cref(M * N, 0.f);
  matmul(A.data(), B.data(), C.data(), M, K, N);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      double acc = 0;
      for (int k = 0; k < K; ++k) acc += static_cast<double>(A[i * K + k]) * B[k * N + j];
      Cref[i * N + j] = static_cast<float>(acc);
    }
  for (int i = 0; i < M * N; ++i) CHECK(C[i] == Catch::Approx(Cref[i]).margin(1e-6));

  std::vector<float> D(K * N, 0.f);
  matmul_at_b(A.data(), C.data(), D.data(), M, K, N);
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < N; ++j) {
      double acc = 0;
      for (int i = 0; i < M; ++i) acc += static_cast<double>(A[i * K + k]) * C[i * N + j];
      CHECK(D[k * N + j] == Catch::Approx(acc).margin(1e-5));
    }

  std::vector<float> E(M * K, 0.f);
  matmul_a_bt(C.data(), B.data(), E.data(), M, N, K);
  for (int i = 0; i < M; ++i)
    for (int k = 0; k < K; ++k) {
      double acc = 0;
      for (int j = 0; j < N; ++j) acc += static_cast<double>(C[i * N + j]) * B[k * N + j];
      CHECK(E[i * K + k] == Catch::Approx(acc).margin(1e-5));
    }
}

TEST_CASE("conv2d identity kernel") {
  Rng rng(11);
  Tensor x = random_tensor({4, 5, 1}, rng);
  Tensor k = Tensor::full({1, 1, 1, 1}, 1.f);
  Tensor y = conv2d(x, k, 1, Padding::Same);
  REQUIRE(y.shape == x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(y.data[i] == x.data[i]);
}

TEST_CASE("conv2d constant field with all-ones kernel") {
  const float c = 0.37f;
  Tensor x = Tensor::full({6, 6, 1}, c);
  Tensor k = Tensor::full({3, 3, 1, 1}, 1.f);
  Tensor y = conv2d(x, k, 1, Padding::Valid);
  REQUIRE(y.shape == Shape{4, 4, 1});
  for (float v : y.data) CHECK(v == Catch::Approx(9 * c).epsilon(1e-6));
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  Rng rng(123);
  for (int iter = 0; iter < 8; ++iter) {
    const int stride = 1 + (iter % 2);
    const Padding pad = iter % 3 == 0 ? Padding::Valid : Padding::Same;
    Tensor x = random_tensor({5, 5, 2}, rng);
    Tensor k = random_tensor({3, 3, 2, 3}, rng);
    Tensor got = conv2d(x, k, stride, pad);
    Tensor want = reference_conv2d(x, k, stride, pad);
    REQUIRE(got.shape == want.shape);
    for (std::size_t i = 0; i < got.data.size(); ++i)
      CHECK(got.data[i] == Catch::Approx(want.data[i]).margin(1e-5));
  }
}

TEST_CASE("conv2d shape errors") {
  Tensor x({4, 4, 2});
  CHECK_THROWS_AS(conv2d(x, Tensor({5, 5, 2, 1}), 1, Padding::Valid), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Tensor({3, 3, 3, 1}), 1, Padding::Same), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Tensor({3, 3, 2}), 1, Padding::Same), ShapeError);
  Tensor nanx = Tensor::full({4, 4, 1}, 0.f);
  nanx.data[3] = std::nanf("");
  CHECK_THROWS_AS(conv2d(nanx, Tensor::full({1, 1, 1, 1}, 1.f), 1, Padding::Same), ValueError);
}

TEST_CASE("conv2d_transpose unit kernels") {
  Rng rng(5);
  Tensor x = random_tensor({3, 4, 1}, rng);
  Tensor k1 = Tensor::full({1, 1, 1, 1}, 1.f);
  Tensor y = conv2d_transpose(x, k1, 1);
  REQUIRE(y.shape == x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(y.data[i] == x.data[i]);

  // stride 2, 2x2 kernel with a single unit tap scatters inputs to even offsets
  Tensor x2 = random_tensor({2, 2, 1}, rng);
  Tensor k2 = Tensor({2, 2, 1, 1});
  k2(0, 0, 0, 0) = 1.f;
  Tensor y2 = conv2d_transpose(x2, k2, 2);
  REQUIRE(y2.shape == Shape{4, 4, 1});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const float want = (i % 2 == 0 && j % 2 == 0) ? x2(i / 2, j / 2, 0) : 0.f;
      CHECK(y2(i, j, 0) == want);
    }
}

TEST_CASE("conv2d_transpose is the adjoint of conv2d") {
  Rng rng(99);
  for (int iter = 0; iter < 12; ++iter) {
    const int stride = 1 + (iter % 2);
    const int h = 4 * stride, w = 2 * stride * (1 + iter % 2);
    const int cin = 1 + iter % 3, cout = 1 + (iter / 2) % 3;
    const int kh = 1 + (iter % 3);
    Tensor a = random_tensor({h, w, cin}, rng);
    Tensor k = random_tensor({kh, kh, cin, cout}, rng);
    Tensor ca = conv2d(a, k, stride, Padding::Same);
    Tensor b = random_tensor(ca.shape, rng);
    Tensor tb = conv2d_transpose(b, k, stride);
    REQUIRE(tb.shape == a.shape);
    const double lhs = dot(ca, b);
    const double rhs = dot(a, tb);
    CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(1.0, std::abs(lhs)));
  }
}
