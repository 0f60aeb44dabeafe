#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"

#include "ikdmil/rng.hpp"
#include "ikdmil/tensor.hpp"

using namespace ikdmil;

TEST_SUITE_BEGIN("rng");

TEST_CASE("pcg32 reproduces the reference sequence for seed 42, stream 54") {
  // First outputs of pcg32-oneseq seeded via the standard init sequence
  // (state = 0, advance, add seed, advance). Pins the generator to the
  // published algorithm rather than to this build.
  Pcg32 rng(42, 54);
  const uint32_t expected[] = {0xa15c02b7u, 0x7b47f409u, 0xba1d3330u,
                               0x83d2f293u, 0xbfa4784bu, 0xcbed606eu};
  for (uint32_t e : expected) CHECK(rng.next_u32() == e);
}

TEST_CASE("pcg32: same seed gives the same stream, different seeds diverge") {
  Pcg32 a(123), b(123), c(124);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 64; ++i) {
    const uint32_t va = a.next_u32();
    all_equal = all_equal && (va == b.next_u32());
    any_diff = any_diff || (va != c.next_u32());
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("splitmix64 reproduces its reference vectors") {
  CHECK(splitmix64(0) == 0xe220a8397b1dcdafULL);
  CHECK(splitmix64(0x9e3779b97f4a7c15ULL) == 0x6e789e6aa1b965f4ULL);
}

TEST_CASE("uniform: range and determinism") {
  Pcg32 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
  Pcg32 r1(9), r2(9);
  for (int i = 0; i < 100; ++i) CHECK(r1.uniform(-3.0, 5.0) == r2.uniform(-3.0, 5.0));
}

TEST_CASE("uniform_int: inclusive bounds, all values reachable") {
  Pcg32 rng(11);
  std::set<int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const int64_t v = rng.uniform_int(-2, 3);
    CHECK(v >= -2);
    CHECK(v <= 3);
    seen.insert(v);
  }
  CHECK(seen.size() == 6);
  CHECK(rng.uniform_int(5, 5) == 5);
}

TEST_CASE("gaussian: deterministic, sane first and second moments") {
  Pcg32 a(21), b(21);
  for (int i = 0; i < 50; ++i) CHECK(a.gaussian() == b.gaussian());
  Pcg32 rng(22);
  double sum = 0.0, sumsq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.gaussian();
    sum += v;
    sumsq += v * v;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sumsq / n - 1.0) < 0.05);
  Pcg32 shifted(22);
  CHECK(shifted.gaussian(10.0, 2.0) == doctest::Approx(10.0 + 2.0 * Pcg32(22).gaussian()));
}

TEST_CASE("derive_seed: purpose and index changes decorrelate streams") {
  const uint64_t base = 99;
  CHECK(derive_seed(base, "mil-epoch", 0) == derive_seed(base, "mil-epoch", 0));
  CHECK(derive_seed(base, "mil-epoch", 0) != derive_seed(base, "mil-epoch", 1));
  CHECK(derive_seed(base, "mil-epoch", 0) != derive_seed(base, "distill-epoch", 0));
  CHECK(derive_seed(base, "mil-epoch", 0) != derive_seed(base + 1, "mil-epoch", 0));
  // Index arithmetic must not alias neighboring purposes.
  std::set<uint64_t> all;
  for (uint64_t i = 0; i < 32; ++i) {
    all.insert(derive_seed(base, "a", i));
    all.insert(derive_seed(base, "b", i));
  }
  CHECK(all.size() == 64);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("tensor");

TEST_CASE("tensor: shape bookkeeping and fill") {
  Tensor t({2, 3, 4}, 0.5f);
  CHECK(t.size() == 24);
  CHECK(t.ndims() == 3);
  CHECK(t.dim(1) == 3);
  CHECK(t.shape_str() == "[2x3x4]");
  for (float v : t.raw()) CHECK(v == 0.5f);
  t.fill(-1.0f);
  CHECK(t[7] == -1.0f);
  CHECK(Tensor::zeros({3})[0] == 0.0f);
  CHECK(Tensor::full({3}, 2.0f)[2] == 2.0f);
  CHECK(Tensor().empty());
}

TEST_CASE("bilinear resize: identity when sizes match") {
  Pcg32 rng(30);
  Grid<float> src(5, 7);
  for (auto& v : src.v) v = static_cast<float>(rng.uniform());
  const Grid<float> out = bilinear_resize(src, 5, 7);
  for (size_t i = 0; i < src.v.size(); ++i) CHECK(out.v[i] == src.v[i]);
}

TEST_CASE("bilinear resize: corners are preserved exactly") {
  Grid<float> src(3, 3);
  src.v = {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f, 7.0f, 8.0f, 9.0f};
  const Grid<float> out = bilinear_resize(src, 7, 5);
  CHECK(out.at(0, 0) == doctest::Approx(1.0f));
  CHECK(out.at(0, 4) == doctest::Approx(3.0f));
  CHECK(out.at(6, 0) == doctest::Approx(7.0f));
  CHECK(out.at(6, 4) == doctest::Approx(9.0f));
}

TEST_CASE("bilinear resize: 2x upsample of a ramp stays a ramp") {
  // With corner-aligned sampling a linear function is reproduced exactly.
  Grid<float> src(2, 2);
  src.v = {0.0f, 1.0f, 2.0f, 3.0f};
  const Grid<float> out = bilinear_resize(src, 3, 3);
  const float expected[] = {0.0f, 0.5f, 1.0f, 1.0f, 1.5f, 2.0f, 2.0f, 2.5f, 3.0f};
  for (size_t i = 0; i < out.v.size(); ++i) CHECK(out.v[i] == doctest::Approx(expected[i]));
}

TEST_CASE("bilinear resize: constant input stays constant at any size") {
  const Grid<float> src(4, 4, 0.37f);
  for (const auto [dh, dw] : {std::pair{1, 1}, {9, 2}, {16, 16}}) {
    const Grid<float> out = bilinear_resize(src, dh, dw);
    for (float v : out.v) CHECK(v == doctest::Approx(0.37f));
  }
}

TEST_CASE("bilinear resize backward: inner product test against forward") {
  // <resize(x), g> must equal <x, resize_backward(g)> because the backward
  // pass is the transpose of the forward interpolation.
  Pcg32 rng(31);
  const int sh = 3, sw = 4, dh = 6, dw = 5;
  Grid<float> x(sh, sw);
  for (auto& v : x.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  Grid<float> g(dh, dw);
  for (auto& v : g.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));

  const Grid<float> y = bilinear_resize(x, dh, dw);
  double lhs = 0.0;
  for (size_t i = 0; i < y.v.size(); ++i) lhs += double(y.v[i]) * double(g.v[i]);

  std::vector<float> back(static_cast<size_t>(sh) * sw, 0.0f);
  bilinear_resize_backward_plane(g.v.data(), dh, dw, back.data(), sh, sw);
  double rhs = 0.0;
  for (size_t i = 0; i < back.size(); ++i) rhs += double(x.v[i]) * double(back[i]);
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
}

TEST_CASE("check_same_shape names the operation in the error") {
  const ProbMap a(2, 2), b(2, 3);
  CHECK_THROWS_WITH_AS(check_same_shape(a, b, "dice"), doctest::Contains("dice"), ShapeError);
}

TEST_SUITE_END();
