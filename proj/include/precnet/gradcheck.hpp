#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "precnet/common.hpp"
#include "precnet/data.hpp"
#include "precnet/network.hpp"
#include "precnet/training.hpp"

namespace precnet {

// Central-difference verification of the analytic gradients. Double
// precision throughout; relative error uses a floor so that finite-
// difference noise on near-zero gradients does not register as failure.

inline double rel_err(double a, double b, double floor) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

struct GradCheckResult {
  double max_rel_err = 0;
  std::int64_t checked = 0;
  std::string worst;  // "tensor[index]" of the largest deviation
};

// Checks d loss / d x for one flat parameter vector against central
// differences of `loss_at`, which must re-evaluate the loss from scratch.
inline void fd_check_vector(const std::function<double()>& loss_at, std::vector<double>& x,
                            const std::vector<double>& analytic, const std::string& label,
                            double eps, double floor, GradCheckResult& res, int stride = 1) {
  check(x.size() == analytic.size(), "fd_check_vector: size mismatch");
  for (std::size_t i = 0; i < x.size(); i += stride) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = loss_at();
    x[i] = keep - eps;
    const double dn = loss_at();
    x[i] = keep;
    const double fd = (up - dn) / (2 * eps);
    const double e = rel_err(fd, analytic[i], floor);
    ++res.checked;
    if (e > res.max_rel_err) {
      res.max_rel_err = e;
      res.worst = label + "[" + std::to_string(i) + "]";
    }
  }
}

// Full-network check: gradient of the sequence loss with respect to every
// parameter (or every `stride`-th element per tensor when stride > 1).
// Biases are randomized so no activation sits exactly on a kink.
inline GradCheckResult network_gradient_check(const NetworkConfig& cfg, int height, int width,
                                              int l_s, std::uint64_t seed, double eps = 1e-5,
                                              double floor = 1e-7, int stride = 1) {
  NetworkWeights<double> w = NetworkWeights<double>::init(cfg, seed, /*bias_scale=*/0.1);
  SplitMix64 rng(seed ^ 0x5eedf00dULL);
  std::vector<Frame> frames;
  for (int t = 0; t < l_s; ++t) {
    Frame f(Shape{cfg.image_channels, height, width});
    for (float& v : f.data) v = static_cast<float>(rng.next_real(0.05, 0.95));
    frames.push_back(std::move(f));
  }
  std::vector<const Frame*> fp;
  for (const Frame& f : frames) fp.push_back(&f);

  const auto loss_at = [&]() {
    Tape<double> tp;
    NetworkBinding<double> b = NetworkBinding<double>::bind(tp, w, /*trainable=*/false);
    NetworkRun<double> run(tp, b, w);
    run.reset_state(height, width);
    return tp.value(sequence_loss(run, fp))[0];
  };

  // Analytic gradients in one backward pass.
  Tape<double> tp;
  NetworkBinding<double> b = NetworkBinding<double>::bind(tp, w, /*trainable=*/true);
  NetworkRun<double> run(tp, b, w);
  run.reset_state(height, width);
  tp.backward(sequence_loss(run, fp));
  std::vector<std::vector<double>> analytic;
  for (Var v : b.vars) analytic.push_back(tp.grad(v));

  GradCheckResult res;
  for (std::size_t s = 0; s < w.params.items.size(); ++s) {
    fd_check_vector(loss_at, w.params.items[s].second.data, analytic[s],
                    w.params.items[s].first, eps, floor, res, stride);
  }
  return res;
}

// Element-level checks of each differentiable op in isolation. The scalar
// read-out multiplies by a fixed random cotangent so upstream gradients are
// non-uniform.
inline GradCheckResult op_gradient_checks(std::uint64_t seed = 42, double eps = 1e-5,
                                          double floor = 1e-6) {
  SplitMix64 rng(seed);
  GradCheckResult res;

  const auto rand_vec = [&](std::int64_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.next_real(lo, hi);
    return v;
  };

  // One op under test: rebuild f(inputs) -> scalar with fresh tapes.
  const auto check_op = [&](const std::string& label, std::vector<Shape> in_shapes,
                            auto&& build) {
    std::vector<std::vector<double>> inputs;
    std::int64_t total_out = 0;
    {
      // Probe once for the output size to fix a cotangent.
      Tape<double> tp;
      std::vector<Var> vars;
      for (const Shape& s : in_shapes) {
        inputs.push_back(rand_vec(shape_numel(s), -1.2, 1.2));
        vars.push_back(tp.leaf(s, inputs.back()));
      }
      total_out = tp.numel(build(tp, vars));
    }
    const std::vector<double> cotangent = rand_vec(total_out, -1.0, 1.0);
    const auto loss_of = [&](Tape<double>& tp, std::vector<Var>& vars) {
      Var out = build(tp, vars);
      Var cot = tp.constant(tp.shape(out), cotangent);
      return tp.sum(tp.mul(out, cot));
    };
    const auto loss_at = [&]() {
      Tape<double> tp;
      std::vector<Var> vars;
      for (std::size_t i = 0; i < in_shapes.size(); ++i)
        vars.push_back(tp.constant(in_shapes[i], inputs[i]));
      return tp.value(loss_of(tp, vars))[0];
    };
    Tape<double> tp;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < in_shapes.size(); ++i)
      vars.push_back(tp.leaf(in_shapes[i], inputs[i]));
    tp.backward(loss_of(tp, vars));
    for (std::size_t i = 0; i < vars.size(); ++i) {
      fd_check_vector(loss_at, inputs[i], tp.grad(vars[i]),
                      label + ".in" + std::to_string(i), eps, floor, res);
    }
  };

  check_op("conv2d", {Shape{3, 5, 5}, Shape{4, 3, 3, 3}, Shape{4}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.conv2d(v[0], v[1], v[2]); });
  check_op("max_pool2", {Shape{2, 4, 4}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.max_pool2(v[0]); });
  check_op("upsample2", {Shape{2, 3, 3}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.upsample2(v[0]); });
  check_op("add", {Shape{2, 3, 3}, Shape{2, 3, 3}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.add(v[0], v[1]); });
  check_op("sub", {Shape{2, 3, 3}, Shape{2, 3, 3}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.sub(v[0], v[1]); });
  check_op("mul", {Shape{2, 3, 3}, Shape{2, 3, 3}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.mul(v[0], v[1]); });
  check_op("scale", {Shape{2, 3, 3}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.scale(v[0], 1.7); });
  check_op("relu", {Shape{2, 5, 5}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.relu(v[0]); });
  check_op("tanh", {Shape{2, 5, 5}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.tanh_op(v[0]); });
  check_op("hard_sigmoid", {Shape{2, 5, 5}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.hard_sigmoid(v[0]); });
  check_op("clamp_max", {Shape{2, 5, 5}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.clamp_max(v[0], 0.4); });
  check_op("concat_ch", {Shape{2, 4, 4}, Shape{3, 4, 4}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.concat_ch(v[0], v[1]); });
  check_op("slice_ch", {Shape{5, 4, 4}},
           [](Tape<double>& tp, std::vector<Var>& v) { return tp.slice_ch(v[0], 1, 3); });
  check_op("convlstm_step", {lstm_weight_shape(2, 3, 3), lstm_bias_shape(3), Shape{2, 4, 4},
                             Shape{3, 4, 4}, Shape{3, 4, 4}},
           [](Tape<double>& tp, std::vector<Var>& v) {
             auto [h, c] = convlstm_step(tp, v[0], v[1], v[2], v[3], v[4]);
             return tp.concat_ch(h, c);
           });
  check_op("error_units", {Shape{2, 4, 4}, Shape{2, 4, 4}},
           [](Tape<double>& tp, std::vector<Var>& v) { return error_units(tp, v[0], v[1]); });
  return res;
}

}  // namespace precnet
