#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "precnet/common.hpp"
#include "precnet/data.hpp"
#include "precnet/network.hpp"

namespace precnet {

// Time weights: the prediction made before any frame of the sequence has
// been seen carries weight 0; the remaining l_s - 1 predictions share weight
// 1/(l_s - 1) so the weights of the scored steps sum to 1.
struct LossConfig {
  int sequence_length = 10;

  double mu(int t) const {  // t is the 1-based step index
    check(sequence_length >= 2, "loss needs sequences of length >= 2");
    check(t >= 1 && t <= sequence_length, "loss step index out of range");
    return t == 1 ? 0.0 : 1.0 / (sequence_length - 1);
  }
};

template <typename T>
Var frame_constant(Tape<T>& tp, const Frame& f) {
  std::vector<T> v(f.data.begin(), f.data.end());
  return tp.constant(f.shape, std::move(v));
}

// Runs the network over l_s frames and accumulates
//   sum_t mu_t * sum_l (lambda_l / n_l) * sum(E_l^t)
// on the tape, where n_l is the element count of E_l.
template <typename T>
Var sequence_loss(NetworkRun<T>& run, const std::vector<const Frame*>& frames) {
  const NetworkConfig& cfg = run.config();
  const int l_s = static_cast<int>(frames.size());
  LossConfig lc{l_s};
  Tape<T>& tp = run.tape();
  Var loss = tp.scalar(T(0));
  for (int t = 1; t <= l_s; ++t) {
    run.predict();
    run.correct(frame_constant(tp, *frames[t - 1]));
    const double mu = lc.mu(t);
    if (mu == 0.0) continue;
    for (int l = 0; l < cfg.levels(); ++l) {
      if (cfg.lambda[l] == 0.0) continue;
      const double coeff = mu * cfg.lambda[l] / static_cast<double>(tp.numel(run.e(l)));
      loss = tp.add(loss, tp.scale(tp.sum(run.e(l)), static_cast<T>(coeff)));
    }
  }
  return loss;
}

// ---- Adam ------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard bias-corrected Adam. Moment buffers align with the parameter
// store's order; step() applies one update in place.
template <typename T>
struct Adam {
  AdamConfig cfg;
  std::int64_t step_count = 0;
  std::vector<std::vector<T>> m, v;

  void init(const ParamStore<T>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, t] : params.items) {
      m.emplace_back(t.data.size(), T(0));
      v.emplace_back(t.data.size(), T(0));
    }
    step_count = 0;
  }

  void step(ParamStore<T>& params, const std::vector<const std::vector<T>*>& grads, double lr) {
    check(m.size() == params.items.size() && grads.size() == params.items.size(),
          "adam: slot count mismatch");
    ++step_count;
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(step_count)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(step_count)));
    const T eps = static_cast<T>(cfg.eps);
    const T lrt = static_cast<T>(lr);
    for (std::size_t s = 0; s < m.size(); ++s) {
      auto& p = params.items[s].second.data;
      const auto& g = *grads[s];
      check(g.size() == p.size(), "adam: gradient size mismatch for " + params.items[s].first);
      auto& ms = m[s];
      auto& vs = v[s];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T gi = g[i];
        ms[i] = b1 * ms[i] + (T(1) - b1) * gi;
        vs[i] = b2 * vs[i] + (T(1) - b2) * gi * gi;
        const T mhat = ms[i] / c1;
        const T vhat = vs[i] / c2;
        p[i] -= lrt * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// Piecewise-constant learning rate: breakpoints are (last epoch, lr) pairs in
// ascending epoch order; epochs past the last breakpoint keep its rate.
struct LrSchedule {
  std::vector<std::pair<int, double>> breakpoints;

  double lr_for_epoch(int epoch) const {  // 1-based
    check(!breakpoints.empty(), "empty learning-rate schedule");
    for (const auto& [until, lr] : breakpoints)
      if (epoch <= until) return lr;
    return breakpoints.back().second;
  }

  // Base rate for most of the run, dropping to final_lr for the last
  // `final_fraction` of epochs.
  static LrSchedule plateau_then_drop(int epochs, double lr, double final_lr,
                                      double final_fraction = 0.1) {
    check(epochs >= 0, "negative epoch count");
    const int tail = static_cast<int>(std::floor(epochs * final_fraction));
    LrSchedule s;
    if (tail > 0 && tail < epochs) {
      s.breakpoints = {{epochs - tail, lr}, {epochs, final_lr}};
    } else {
      s.breakpoints = {{epochs, lr}};
    }
    return s;
  }
};

// ---- training loop ---------------------------------------------------------

struct TrainConfig {
  int sequence_length = 10;
  int epochs = 10;
  int sequences_per_epoch = 500;
  int val_sequences = 100;
  int batch_size = 4;
  AdamConfig adam;
  LrSchedule schedule;
  std::uint64_t seed = 0;
};

struct EpochResult {
  double train_loss = 0;  // mean over the epoch's optimizer steps
  std::vector<double> step_losses;
};

namespace detail {
template <typename T>
double batch_loss_value(const NetworkWeights<T>& w, const SequenceDataset& ds,
                        const std::vector<Window>& windows, const std::vector<std::size_t>& pick,
                        int l_s, bool train, NetworkBinding<T>* binding_out, Tape<T>& tp) {
  NetworkBinding<T> binding = NetworkBinding<T>::bind(tp, w, train);
  Var total = tp.scalar(T(0));
  for (std::size_t idx : pick) {
    const Window& win = windows[idx];
    NetworkRun<T> run(tp, binding, w);
    run.reset_state(ds.height, ds.width);
    std::vector<const Frame*> frames;
    for (int t = 0; t < l_s; ++t)
      frames.push_back(&ds.recordings[win.recording].frames[win.start + t]);
    total = tp.add(total, sequence_loss(run, frames));
  }
  total = tp.scale(total, static_cast<T>(1.0 / pick.size()));
  const double loss = static_cast<double>(tp.value(total)[0]);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss encountered");
  if (train) {
    tp.backward(total);
    *binding_out = binding;
  }
  return loss;
}
}  // namespace detail

// One optimization epoch: sequences_per_epoch windows sampled with
// replacement (seeded), grouped into batches, one Adam update per batch.
template <typename T>
EpochResult run_train_epoch(NetworkWeights<T>& w, Adam<T>& opt, const SequenceDataset& ds,
                            const TrainConfig& tc, double lr, SplitMix64& sampler) {
  const std::vector<Window> windows = slice_sequences(ds, tc.sequence_length, 1);
  check(!windows.empty(), "training dataset yields no windows of length " +
                              std::to_string(tc.sequence_length));
  check(tc.batch_size >= 1, "batch_size must be >= 1");
  const int steps = std::max(1, tc.sequences_per_epoch / tc.batch_size);
  EpochResult res;
  for (int s = 0; s < steps; ++s) {
    std::vector<std::size_t> pick;
    for (int b = 0; b < tc.batch_size; ++b)
      pick.push_back(static_cast<std::size_t>(sampler.next_index(windows.size())));
    Tape<T> tp;
    NetworkBinding<T> binding;
    const double loss = detail::batch_loss_value(w, ds, windows, pick, tc.sequence_length,
                                                 /*train=*/true, &binding, tp);
    opt.step(w.params, binding.grads(), lr);
    res.step_losses.push_back(loss);
    res.train_loss += loss;
  }
  res.train_loss /= steps;
  return res;
}

// Mean sequence loss over val_sequences windows sampled with replacement.
template <typename T>
double run_validation(const NetworkWeights<T>& w, const SequenceDataset& ds,
                      const TrainConfig& tc, SplitMix64& sampler) {
  const std::vector<Window> windows = slice_sequences(ds, tc.sequence_length, 1);
  check(!windows.empty(), "validation dataset yields no windows of length " +
                              std::to_string(tc.sequence_length));
  const int n = std::max(1, tc.val_sequences);
  double total = 0;
  for (int i = 0; i < n; ++i) {
    std::vector<std::size_t> pick{static_cast<std::size_t>(sampler.next_index(windows.size()))};
    Tape<T> tp;
    total += detail::batch_loss_value<T>(w, ds, windows, pick, tc.sequence_length,
                                         /*train=*/false, nullptr, tp);
  }
  return total / n;
}

}  // namespace precnet
