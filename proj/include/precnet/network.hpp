#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "precnet/common.hpp"
#include "precnet/layers.hpp"
#include "precnet/tensor.hpp"

namespace precnet {

// Hierarchy of N+1 modules. Module 0 sits on the image; module l>0 sits on a
// 2x-downsampled copy of the representation below it. Per module:
//   R_l, C_l : hidden/cell state of the representation layer,
//   E_l      : rectified two-sided error, twice the channels of the target,
//   decoder  : conv + relu mapping R_l to the module's prediction.
// "standard" keeps two convLSTMs per non-top module (one fires top-down
// during prediction, one bottom-up during correction) sharing R_l/C_l.
// "single_lstm" merges them into one convLSTM whose input is the
// concatenation of both phase inputs with the inactive half zero-filled.
struct NetworkConfig {
  int image_channels = 3;
  std::vector<int> r_channels;  // hidden width per level, bottom to top
  int lstm_kernel = 3;
  int conv_kernel = 3;
  std::vector<double> lambda;  // per-level loss weights
  double pix_max = 1.0;
  enum class Variant { standard, single_lstm };
  Variant variant = Variant::standard;

  int levels() const { return static_cast<int>(r_channels.size()); }
  int top() const { return levels() - 1; }

  // Channel count of the target that module l predicts.
  int a_ch(int l) const { return l == 0 ? image_channels : r_channels[l - 1]; }
  // Channel count of E_l (two-sided error doubles the target).
  int e_ch(int l) const { return 2 * a_ch(l); }

  // Input channels of the convLSTM that fires during the prediction pass.
  int down_in_ch(int l) const { return l == top() ? e_ch(top()) : e_ch(l + 1); }
  // Input channels of the convLSTM that fires during the correction pass.
  int up_in_ch(int l) const { return e_ch(l); }

  void validate() const {
    check(image_channels > 0, "image_channels must be positive");
    check(r_channels.size() >= 2, "need at least two levels");
    for (int r : r_channels) check(r > 0, "r_channels entries must be positive");
    check(lambda.size() == r_channels.size(), "lambda must have one weight per level");
    check(lstm_kernel > 0 && lstm_kernel % 2 == 1, "lstm_kernel must be odd");
    check(conv_kernel > 0 && conv_kernel % 2 == 1, "conv_kernel must be odd");
    check(pix_max > 0, "pix_max must be positive");
  }
};

// Exact parameter count without allocating anything.
inline std::int64_t count_parameters(const NetworkConfig& cfg) {
  cfg.validate();
  const auto lstm = [&](std::int64_t in, std::int64_t hid) {
    const std::int64_t k2 = static_cast<std::int64_t>(cfg.lstm_kernel) * cfg.lstm_kernel;
    return 4 * (k2 * (in + hid) * hid + hid);
  };
  std::int64_t n = 0;
  for (int l = 0; l < cfg.levels(); ++l) {
    const std::int64_t hid = cfg.r_channels[l];
    if (l == cfg.top()) {
      n += lstm(cfg.down_in_ch(l), hid);
    } else if (cfg.variant == NetworkConfig::Variant::single_lstm) {
      n += lstm(cfg.down_in_ch(l) + cfg.up_in_ch(l), hid);
    } else {
      n += lstm(cfg.down_in_ch(l), hid);
      n += lstm(cfg.up_in_ch(l), hid);
    }
    const std::int64_t k2 = static_cast<std::int64_t>(cfg.conv_kernel) * cfg.conv_kernel;
    n += cfg.a_ch(l) * (hid * k2 + 1);  // decoder weight + bias
  }
  return n;
}

// Parameters plus the config that shaped them.
template <typename T>
struct NetworkWeights {
  NetworkConfig cfg;
  ParamStore<T> params;

  // Kernels start uniform in [-s, s] with s = 1/sqrt(fan_in); biases start at
  // zero. bias_scale > 0 draws biases uniformly instead — useful for
  // finite-difference tests, which need generic (kink-free) activations.
  static NetworkWeights init(const NetworkConfig& cfg, std::uint64_t seed,
                             double bias_scale = 0.0) {
    cfg.validate();
    NetworkWeights w;
    w.cfg = cfg;
    SplitMix64 rng(seed);
    const auto add_conv = [&](const std::string& name, int out, int in, int k) {
      HostTensor<T>& kw = w.params.add(name + ".w", Shape{out, in, k, k});
      const double s = 1.0 / std::sqrt(static_cast<double>(in) * k * k);
      fill_uniform(kw, rng, -s, s);
      HostTensor<T>& kb = w.params.add(name + ".b", Shape{out});  // zeros by default
      if (bias_scale > 0) fill_uniform(kb, rng, -bias_scale, bias_scale);
    };
    const auto add_lstm = [&](const std::string& name, int in, int hid) {
      add_conv(name, 4 * hid, in + hid, cfg.lstm_kernel);
    };
    for (int l = 0; l < cfg.levels(); ++l) {
      const std::string m = "m" + std::to_string(l);
      const int hid = cfg.r_channels[l];
      if (l == cfg.top()) {
        add_lstm(m + ".down", cfg.down_in_ch(l), hid);
      } else if (cfg.variant == NetworkConfig::Variant::single_lstm) {
        add_lstm(m + ".lstm", cfg.down_in_ch(l) + cfg.up_in_ch(l), hid);
      } else {
        add_lstm(m + ".down", cfg.down_in_ch(l), hid);
        add_lstm(m + ".up", cfg.up_in_ch(l), hid);
      }
      add_conv(m + ".decode", cfg.a_ch(l), hid, cfg.conv_kernel);
    }
    check(w.params.total_size() == count_parameters(cfg),
          "parameter layout disagrees with count_parameters");
    return w;
  }
};

// Persistent per-stream state between tape runs.
template <typename T>
struct NetworkState {
  std::vector<HostTensor<T>> R, C, E;
  int height = 0, width = 0;
};

template <typename T>
NetworkState<T> init_state(const NetworkConfig& cfg, int height, int width) {
  cfg.validate();
  const int n = cfg.levels();
  const int div = 1 << cfg.top();
  check(height > 0 && width > 0 && height % div == 0 && width % div == 0,
        "frame size must be divisible by 2^top_level, got " + std::to_string(height) + "x" +
            std::to_string(width));
  NetworkState<T> st;
  st.height = height;
  st.width = width;
  for (int l = 0; l < n; ++l) {
    const int h = height >> l, w = width >> l;
    st.R.emplace_back(Shape{cfg.r_channels[l], h, w});
    st.C.emplace_back(Shape{cfg.r_channels[l], h, w});
    st.E.emplace_back(Shape{cfg.e_ch(l), h, w});
  }
  return st;
}

// Network weights bound once to a tape; shared by every stream and timestep
// recorded on that tape.
template <typename T>
struct NetworkBinding {
  Tape<T>* tape = nullptr;
  const NetworkConfig* cfg = nullptr;
  std::vector<Var> vars;  // aligned with NetworkWeights::params.items

  static NetworkBinding bind(Tape<T>& tp, const NetworkWeights<T>& w, bool trainable) {
    NetworkBinding b;
    b.tape = &tp;
    b.cfg = &w.cfg;
    b.vars.reserve(w.params.items.size());
    for (const auto& [name, t] : w.params.items)
      b.vars.push_back(trainable ? tp.leaf(t.shape, t.data) : tp.constant(t.shape, t.data));
    return b;
  }

  // Accumulated parameter gradients in storage order; call after backward().
  std::vector<const std::vector<T>*> grads() const {
    std::vector<const std::vector<T>*> g;
    g.reserve(vars.size());
    for (Var v : vars) g.push_back(&tape->grad(v));
    return g;
  }
};

// One stream's state unrolled on a tape. predict() advances the top-down
// pass and yields the frame prediction before the frame is seen; correct()
// consumes the actual frame (or the prediction itself, for closed-loop
// rollouts) and runs the bottom-up pass.
template <typename T>
class NetworkRun {
 public:
  NetworkRun(Tape<T>& tp, const NetworkBinding<T>& binding, const NetworkWeights<T>& w)
      : tp_(&tp), cfg_(&w.cfg) {
    // Map parameter names to bound vars once.
    for (std::size_t i = 0; i < w.params.items.size(); ++i)
      names_.emplace_back(w.params.items[i].first, binding.vars[i]);
  }

  void reset_state(int height, int width) { load_state(init_state<T>(*cfg_, height, width)); }

  void load_state(const NetworkState<T>& st) {
    const int n = cfg_->levels();
    check(static_cast<int>(st.R.size()) == n, "state level count mismatch");
    h_ = st.height;
    w_ = st.width;
    R_.clear();
    C_.clear();
    E_.clear();
    for (int l = 0; l < n; ++l) {
      R_.push_back(tp_->constant(st.R[l].shape, st.R[l].data));
      C_.push_back(tp_->constant(st.C[l].shape, st.C[l].data));
      E_.push_back(tp_->constant(st.E[l].shape, st.E[l].data));
    }
    a_hat_.assign(n, Var{});
  }

  // Top-down pass. Every R_l/C_l advances; E_l for l >= 1 is refreshed
  // against the previous step's pooled R_{l-1}; returns the new frame
  // prediction (E_0 is untouched until correct()).
  Var predict() {
    const int top = cfg_->top();
    std::vector<Var> r_prev = R_;  // pre-update representations, for pooling targets
    for (int l = top; l >= 0; --l) {
      Var x = (l == top) ? E_[l] : tp_->upsample2(E_[l + 1]);
      if (cfg_->variant == NetworkConfig::Variant::single_lstm && l != top) {
        x = tp_->concat_ch(x, tp_->zeros(tp_->shape(E_[l])));
      }
      auto [h, c] = convlstm_step(*tp_, lstm_w(l, /*down=*/true), lstm_b(l, true), x, R_[l], C_[l]);
      R_[l] = h;
      C_[l] = c;
      Var dec = conv_decode(*tp_, var(level(l) + ".decode.w"), var(level(l) + ".decode.b"), R_[l]);
      if (l == 0) {
        a_hat_[0] = tp_->clamp_max(dec, static_cast<T>(cfg_->pix_max));
      } else {
        a_hat_[l] = dec;
        E_[l] = error_units(*tp_, a_hat_[l], tp_->max_pool2(r_prev[l - 1]));
      }
    }
    return a_hat_[0];
  }

  // Bottom-up pass over the actual frame. E_l is recomputed against the
  // current pooled R_{l-1}; every non-top module's correction convLSTM then
  // advances R_l/C_l.
  void correct(Var actual) {
    const int top = cfg_->top();
    check(tp_->shape(actual) == tp_->shape(a_hat_[0]),
          "correct(): frame shape mismatch " + shape_str(tp_->shape(actual)));
    for (int l = 0; l <= top; ++l) {
      Var target = (l == 0) ? actual : tp_->max_pool2(R_[l - 1]);
      E_[l] = error_units(*tp_, a_hat_[l], target);
      if (l == top) break;  // top module has no correction convLSTM
      Var x = E_[l];
      if (cfg_->variant == NetworkConfig::Variant::single_lstm) {
        // Zero-fill the slot the prediction pass fills with upsample(E_{l+1}).
        const Shape& sl = tp_->shape(E_[l]);
        x = tp_->concat_ch(tp_->zeros(Shape{cfg_->e_ch(l + 1), sl[1], sl[2]}), x);
      }
      auto [h, c] = convlstm_step(*tp_, lstm_w(l, /*down=*/false), lstm_b(l, false), x, R_[l], C_[l]);
      R_[l] = h;
      C_[l] = c;
    }
  }

  NetworkState<T> export_state() const {
    NetworkState<T> st;
    st.height = h_;
    st.width = w_;
    for (int l = 0; l < cfg_->levels(); ++l) {
      st.R.push_back(host(R_[l]));
      st.C.push_back(host(C_[l]));
      st.E.push_back(host(E_[l]));
    }
    return st;
  }

  Var r(int l) const { return R_[l]; }
  Var c(int l) const { return C_[l]; }
  Var e(int l) const { return E_[l]; }
  Var prediction() const { return a_hat_[0]; }
  const NetworkConfig& config() const { return *cfg_; }
  Tape<T>& tape() const { return *tp_; }

 private:
  std::string level(int l) const { return "m" + std::to_string(l); }

  Var var(const std::string& name) const {
    for (const auto& [n, v] : names_)
      if (n == name) return v;
    detail::fail_validation("unknown parameter: " + name);
  }

  Var lstm_w(int l, bool down) const { return var(lstm_name(l, down) + ".w"); }
  Var lstm_b(int l, bool down) const { return var(lstm_name(l, down) + ".b"); }

  std::string lstm_name(int l, bool down) const {
    if (l == cfg_->top()) return level(l) + ".down";
    if (cfg_->variant == NetworkConfig::Variant::single_lstm) return level(l) + ".lstm";
    return level(l) + (down ? ".down" : ".up");
  }

  HostTensor<T> host(Var v) const {
    HostTensor<T> t;
    t.shape = tp_->shape(v);
    t.data = tp_->value(v);
    return t;
  }

  Tape<T>* tp_;
  const NetworkConfig* cfg_;
  std::vector<std::pair<std::string, Var>> names_;
  std::vector<Var> R_, C_, E_, a_hat_;
  int h_ = 0, w_ = 0;
};

// Named ready-made configurations.
inline NetworkConfig preset_config(const std::string& name) {
  NetworkConfig cfg;
  if (name == "standard") {
    cfg.r_channels = {60, 120, 240};
  } else if (name == "small") {
    cfg.r_channels = {20, 40, 80};
  } else if (name == "single_lstm") {
    cfg.r_channels = {60, 120, 240};
    cfg.variant = NetworkConfig::Variant::single_lstm;
  } else if (name == "tiny") {
    cfg.r_channels = {2, 4, 8};
  } else {
    detail::fail_validation("unknown preset: " + name +
                            " (expected standard, small, single_lstm, or tiny)");
  }
  cfg.lambda.assign(cfg.r_channels.size(), 0.0);
  cfg.lambda[0] = 1.0;
  return cfg;
}

// Driver for inference: advances one stream step by step on a single tape,
// rolling the tape back after each step so memory stays bounded. Weights are
// bound once as constants (no gradients).
template <typename T>
class Predictor {
 public:
  Predictor(const NetworkWeights<T>& w, int height, int width)
      : weights_(&w),
        binding_(NetworkBinding<T>::bind(tape_, w, /*trainable=*/false)),
        mark_(tape_.mark()),
        state_(init_state<T>(w.cfg, height, width)) {}

  // Full step against an observed frame: returns the prediction the network
  // emitted before seeing it.
  HostTensor<T> observe(const HostTensor<T>& actual) {
    return run_step([&](NetworkRun<T>& run) {
      run.correct(tape_.constant(actual.shape, actual.data));
    });
  }

  // Closed-loop step: the prediction itself is fed back as the input, which
  // makes E_0 exactly zero.
  HostTensor<T> closed_loop() {
    return run_step([&](NetworkRun<T>& run) { run.correct(run.prediction()); });
  }

  // The prediction the next step would emit, without advancing the state.
  HostTensor<T> peek_prediction() {
    NetworkRun<T> run(tape_, binding_, *weights_);
    run.load_state(state_);
    Var pred = run.predict();
    HostTensor<T> out;
    out.shape = tape_.shape(pred);
    out.data = tape_.value(pred);
    tape_.rollback(mark_);
    return out;
  }

  const NetworkState<T>& state() const { return state_; }
  const NetworkConfig& config() const { return weights_->cfg; }

 private:
  template <typename CorrectFn>
  HostTensor<T> run_step(CorrectFn&& do_correct) {
    NetworkRun<T> run(tape_, binding_, *weights_);
    run.load_state(state_);
    Var pred = run.predict();
    do_correct(run);
    HostTensor<T> out;
    out.shape = tape_.shape(pred);
    out.data = tape_.value(pred);
    state_ = run.export_state();
    tape_.rollback(mark_);
    for (const T v : out.data)
      if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite prediction");
    return out;
  }

  const NetworkWeights<T>* weights_;
  Tape<T> tape_;
  NetworkBinding<T> binding_;
  std::size_t mark_;
  NetworkState<T> state_;
};

// Seeds the network with observed frames, then generates `horizon` frames
// closed-loop.
template <typename T>
std::vector<HostTensor<T>> rollout(const NetworkWeights<T>& w,
                                   const std::vector<const HostTensor<T>*>& seed_frames,
                                   int horizon) {
  check(!seed_frames.empty(), "rollout: need at least one seed frame");
  check(horizon >= 1, "rollout: horizon must be >= 1");
  const Shape& s = seed_frames.front()->shape;
  check(s.size() == 3, "rollout: frames must be {C,H,W}");
  Predictor<T> p(w, s[1], s[2]);
  for (const auto* f : seed_frames) p.observe(*f);
  std::vector<HostTensor<T>> out;
  for (int t = 0; t < horizon; ++t) out.push_back(p.closed_loop());
  return out;
}

}  // namespace precnet
