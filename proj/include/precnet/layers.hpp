#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "precnet/common.hpp"
#include "precnet/tensor.hpp"

namespace precnet {

// Plain host-side tensor: parameter storage, network state between tape
// runs, frames. Tapes are transient; these persist.
template <typename T>
struct HostTensor {
  Shape shape;
  std::vector<T> data;

  HostTensor() = default;
  explicit HostTensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), T(0)) {}
  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

// Ordered name -> tensor map. Order is the canonical serialization order for
// checkpoints and the optimizer's slot order, so it must be stable.
template <typename T>
struct ParamStore {
  std::vector<std::pair<std::string, HostTensor<T>>> items;

  HostTensor<T>& add(const std::string& name, const Shape& shape) {
    check(find(name) == nullptr, "duplicate parameter name: " + name);
    items.emplace_back(name, HostTensor<T>(shape));
    return items.back().second;
  }

  HostTensor<T>* find(const std::string& name) {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }
  const HostTensor<T>* find(const std::string& name) const {
    for (auto& [n, t] : items)
      if (n == name) return &t;
    return nullptr;
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
};

template <typename T>
inline void fill_uniform(HostTensor<T>& t, SplitMix64& rng, double lo, double hi) {
  for (T& v : t.data) v = static_cast<T>(rng.next_real(lo, hi));
}

// ---- convolutional LSTM ----------------------------------------------------
//
// All four gates share one fused convolution over concat(input, hidden):
//   weight {4*hid, in+hid, k, k}, bias {4*hid}
// Row blocks in gate order: input gate, forget gate, cell candidate, output
// gate. Column blocks: input channels first, then recurrent channels. Gates
// use the saturating hard sigmoid; candidate and cell output use tanh.

inline Shape lstm_weight_shape(int in_ch, int hidden, int k) {
  return Shape{4 * hidden, in_ch + hidden, k, k};
}
inline Shape lstm_bias_shape(int hidden) { return Shape{4 * hidden}; }

// One recurrence step: returns {new_hidden, new_cell}.
template <typename T>
std::pair<Var, Var> convlstm_step(Tape<T>& tp, Var w, Var b, Var x, Var h, Var c) {
  const int hid = tp.shape(h)[0];
  Var z = tp.conv2d(tp.concat_ch(x, h), w, b);
  Var gi = tp.hard_sigmoid(tp.slice_ch(z, 0, hid));
  Var gf = tp.hard_sigmoid(tp.slice_ch(z, hid, hid));
  Var gc = tp.tanh_op(tp.slice_ch(z, 2 * hid, hid));
  Var go = tp.hard_sigmoid(tp.slice_ch(z, 3 * hid, hid));
  Var c_new = tp.add(tp.mul(gf, c), tp.mul(gi, gc));
  Var h_new = tp.mul(go, tp.tanh_op(c_new));
  return {h_new, c_new};
}

// Rectified two-sided prediction error: channels are relu(pred - actual)
// followed by relu(actual - pred), so the result is nonnegative and doubles
// the channel count.
template <typename T>
Var error_units(Tape<T>& tp, Var pred, Var actual) {
  return tp.relu(tp.concat_ch(tp.sub(pred, actual), tp.sub(actual, pred)));
}

// Decoding layer: rectified convolution.
template <typename T>
Var conv_decode(Tape<T>& tp, Var w, Var b, Var x) {
  return tp.relu(tp.conv2d(x, w, b));
}

}  // namespace precnet
