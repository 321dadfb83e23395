#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "precnet/common.hpp"
#include "precnet/gradcheck.hpp"
#include "precnet/tensor.hpp"

using namespace precnet;

namespace {

// Reference splitmix64 (public-domain algorithm), written out independently
// so the generator in common.hpp is checked against something it does not
// share code with.
std::uint64_t reference_splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

TEST_CASE("splitmix64 matches the reference recurrence") {
  SplitMix64 rng(0x1234abcdull);
  std::uint64_t ref = 0x1234abcdull;
  for (int i = 0; i < 100; ++i) REQUIRE(rng.next_u64() == reference_splitmix64(ref));
}

TEST_CASE("splitmix64 state save/restore resumes the exact stream") {
  SplitMix64 rng(99);
  for (int i = 0; i < 7; ++i) rng.next_u64();
  const std::uint64_t s = rng.state();
  std::vector<std::uint64_t> a, b;
  for (int i = 0; i < 16; ++i) a.push_back(rng.next_u64());
  rng.set_state(s);
  for (int i = 0; i < 16; ++i) b.push_back(rng.next_u64());
  REQUIRE(a == b);
}

TEST_CASE("splitmix64 derived draws stay in range") {
  SplitMix64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double d = rng.next_double();
    REQUIRE(d >= 0.0);
    REQUIRE(d < 1.0);
  }
  for (int i = 0; i < 1000; ++i) {
    const double r = rng.next_real(-0.25, 0.5);
    REQUIRE(r >= -0.25);
    REQUIRE(r < 0.5);
  }
  for (int i = 0; i < 1000; ++i) REQUIRE(rng.next_index(7) < 7);
}

TEST_CASE("conv2d with a centred identity kernel reproduces its input") {
  Tape<double> tp;
  SplitMix64 rng(3);
  std::vector<double> xv(2 * 4 * 4);
  for (auto& v : xv) v = rng.next_real(-1.0, 1.0);
  const Var x = tp.constant({2, 4, 4}, xv);
  std::vector<double> wv(2 * 2 * 3 * 3, 0.0);
  // Kernel centre tap of the matching input channel set to one.
  wv[(0 * 2 + 0) * 9 + 4] = 1.0;
  wv[(1 * 2 + 1) * 9 + 4] = 1.0;
  const Var w = tp.constant({2, 2, 3, 3}, wv);
  const Var b = tp.constant({2}, {0.0, 0.0});
  const Var y = tp.conv2d(x, w, b);
  REQUIRE(tp.value(y) == xv);
}

TEST_CASE("1x1 conv on a single pixel is an affine map") {
  Tape<double> tp;
  const Var x = tp.leaf({1, 1, 1}, {1.0});
  const Var w = tp.leaf({1, 1, 1, 1}, {2.0});
  const Var b = tp.leaf({1}, {0.5});
  const Var y = tp.conv2d(x, w, b);
  REQUIRE(tp.value(y)[0] == 2.5);
  const Var s = tp.sum(y);
  tp.backward(s);
  REQUIRE(tp.grad(x)[0] == 2.0);  // dL/dx = w
  REQUIRE(tp.grad(w)[0] == 1.0);  // dL/dw = x
  REQUIRE(tp.grad(b)[0] == 1.0);
}

TEST_CASE("3x3 all-ones conv on a 2x2 image sums the in-bounds window") {
  Tape<double> tp;
  const Var x = tp.constant({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  const Var w = tp.constant({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  const Var b = tp.constant({1}, {0.0});
  const Var y = tp.conv2d(x, w, b);
  // Every 3x3 window centred on a 2x2 image covers the whole image.
  REQUIRE(tp.value(y) == std::vector<double>{10.0, 10.0, 10.0, 10.0});
}

TEST_CASE("max_pool2 keeps the block maximum") {
  Tape<double> tp;
  const Var x = tp.leaf({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  const Var y = tp.max_pool2(x);
  REQUIRE(tp.shape(y) == Shape{1, 1, 1});
  REQUIRE(tp.value(y)[0] == 4.0);
  tp.backward(tp.sum(y));
  REQUIRE(tp.grad(x) == std::vector<double>{0.0, 0.0, 0.0, 1.0});
}

TEST_CASE("max_pool2 ties route the gradient to the first maximum in row-major order") {
  Tape<double> tp;
  const Var x = tp.leaf({1, 2, 2}, {7.0, 7.0, 7.0, 7.0});
  tp.backward(tp.sum(tp.max_pool2(x)));
  REQUIRE(tp.grad(x) == std::vector<double>{1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("upsample2 repeats each pixel into a 2x2 block") {
  Tape<double> tp;
  const Var x = tp.leaf({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  const Var y = tp.upsample2(x);
  REQUIRE(tp.shape(y) == Shape{1, 4, 4});
  REQUIRE(tp.value(y) == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
  tp.backward(tp.sum(y));
  REQUIRE(tp.grad(x) == std::vector<double>{4.0, 4.0, 4.0, 4.0});
}

TEST_CASE("max_pool2 after upsample2 is the identity") {
  Tape<float> tp;
  SplitMix64 rng(11);
  std::vector<float> xv(3 * 6 * 5);
  for (auto& v : xv) v = static_cast<float>(rng.next_real(-2.0, 2.0));
  const Var x = tp.constant({3, 6, 5}, xv);
  const Var y = tp.max_pool2(tp.upsample2(x));
  REQUIRE(tp.value(y) == xv);
}

TEST_CASE("pointwise activations match their definitions") {
  Tape<double> tp;
  const Var x = tp.leaf({5}, {-5.0, -2.5, 0.0, 1.0, 5.0});
  const Var h = tp.hard_sigmoid(x);
  REQUIRE(tp.value(h) == std::vector<double>{0.0, 0.0, 0.5, 0.7, 1.0});
  const Var r = tp.relu(x);
  REQUIRE(tp.value(r) == std::vector<double>{0.0, 0.0, 0.0, 1.0, 5.0});
  const Var c = tp.clamp_max(x, 0.9);
  REQUIRE(tp.value(c) == std::vector<double>{-5.0, -2.5, 0.0, 0.9, 0.9});

  tp.backward(tp.sum(h));
  // Slope 0.2 strictly inside the clip, zero on both saturated rails.
  REQUIRE(tp.grad(x) == std::vector<double>{0.0, 0.0, 0.2, 0.2, 0.0});
}

TEST_CASE("relu gradient is zero at the kink") {
  Tape<double> tp;
  const Var x = tp.leaf({3}, {-1.0, 0.0, 2.0});
  tp.backward(tp.sum(tp.relu(x)));
  REQUIRE(tp.grad(x) == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("sum of squares has gradient 2x") {
  Tape<double> tp;
  const Var x = tp.leaf({3}, {1.0, 2.0, 3.0});
  const Var s = tp.sum(tp.mul(x, x));
  REQUIRE(tp.value(s)[0] == 14.0);
  tp.backward(s);
  REQUIRE(tp.grad(x) == std::vector<double>{2.0, 4.0, 6.0});
}

TEST_CASE("gradients accumulate across backward calls until zero_grad") {
  Tape<double> tp;
  const Var x = tp.leaf({2}, {3.0, -1.0});
  const Var s = tp.sum(tp.scale(x, 2.0));
  tp.backward(s);
  tp.backward(s);
  REQUIRE(tp.grad(x) == std::vector<double>{4.0, 4.0});
  tp.zero_grad();
  REQUIRE(tp.grad(x) == std::vector<double>{0.0, 0.0});
  tp.backward(s);
  REQUIRE(tp.grad(x) == std::vector<double>{2.0, 2.0});
}

TEST_CASE("concat_ch then slice_ch round-trips both halves") {
  Tape<double> tp;
  const Var a = tp.leaf({1, 2, 2}, {1, 2, 3, 4});
  const Var b = tp.leaf({2, 2, 2}, {5, 6, 7, 8, 9, 10, 11, 12});
  const Var c = tp.concat_ch(a, b);
  REQUIRE(tp.shape(c) == Shape{3, 2, 2});
  REQUIRE(tp.value(tp.slice_ch(c, 0, 1)) == tp.value(a));
  REQUIRE(tp.value(tp.slice_ch(c, 1, 2)) == tp.value(b));
  // Gradient through the slice lands in the matching half only.
  tp.backward(tp.sum(tp.slice_ch(c, 1, 2)));
  REQUIRE(tp.grad(a) == std::vector<double>(4, 0.0));
  REQUIRE(tp.grad(b) == std::vector<double>(8, 1.0));
}

TEST_CASE("shape and usage violations are rejected") {
  Tape<double> tp;
  const Var x = tp.leaf({1, 3, 3}, std::vector<double>(9, 0.0));
  const Var w = tp.constant({1, 2, 3, 3}, std::vector<double>(18, 0.0));
  const Var b = tp.constant({1}, {0.0});
  REQUIRE_THROWS_AS(tp.conv2d(x, w, b), ValidationError);  // in_ch mismatch
  REQUIRE_THROWS_AS(tp.max_pool2(x), ValidationError);     // odd spatial dims
  REQUIRE_THROWS_AS(tp.backward(x), ValidationError);      // non-scalar root
  REQUIRE_THROWS_AS(tp.add(x, b), ValidationError);        // shape mismatch
  const Var k = tp.constant({2}, {1.0, 2.0});
  REQUIRE_THROWS_AS(tp.grad(k), ValidationError);  // constants carry no grad
  const Var even = tp.constant({1, 1, 4}, std::vector<double>(4, 0.0));
  REQUIRE_THROWS_AS(tp.max_pool2(even), ValidationError);  // height odd after all? h=1
}

TEST_CASE("rollback frees nodes created after the mark") {
  Tape<float> tp;
  const Var keep = tp.leaf({2}, {1.0f, 2.0f});
  const std::size_t m = tp.mark();
  for (int i = 0; i < 10; ++i) tp.scale(keep, 2.0f);
  REQUIRE(tp.node_count() == m + 10);
  tp.rollback(m);
  REQUIRE(tp.node_count() == m);
  REQUIRE(tp.value(keep) == std::vector<float>{1.0f, 2.0f});
  // The arena can be refilled after a rollback.
  const Var again = tp.scale(keep, 3.0f);
  REQUIRE(tp.value(again) == std::vector<float>{3.0f, 6.0f});
}

TEST_CASE("forward and backward are bit-identical across repeated runs") {
  const auto run = [] {
    Tape<float> tp;
    SplitMix64 rng(77);
    std::vector<float> xv(4 * 8 * 8), wv(6 * 4 * 3 * 3), bv(6);
    for (auto& v : xv) v = static_cast<float>(rng.next_real(-1.0, 1.0));
    for (auto& v : wv) v = static_cast<float>(rng.next_real(-0.3, 0.3));
    for (auto& v : bv) v = static_cast<float>(rng.next_real(-0.1, 0.1));
    const Var x = tp.leaf({4, 8, 8}, xv);
    const Var w = tp.leaf({6, 4, 3, 3}, wv);
    const Var b = tp.leaf({6}, bv);
    const Var y = tp.relu(tp.conv2d(x, w, b));
    tp.backward(tp.sum(tp.mul(y, y)));
    std::vector<float> out = tp.value(y);
    const auto& gw = tp.grad(w);
    out.insert(out.end(), gw.begin(), gw.end());
    return out;
  };
  REQUIRE(run() == run());
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  const GradCheckResult r = op_gradient_checks();
  INFO(r.worst);
  REQUIRE(r.checked > 0);
  REQUIRE(r.max_rel_err < 1e-4);
}
