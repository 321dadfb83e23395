#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "precnet/common.hpp"

namespace precnet {

// Tensor extents, outermost first. Images are {channels, height, width},
// conv kernels {out_ch, in_ch, k, k}, biases {out_ch}, scalars {}.
using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << '}';
  return os.str();
}

// Handle into a Tape. Plain index; cheap to copy, invalid by default.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff over a write-once list of tensor nodes. Each op
// appends a node holding its value plus a closure that scatters the node's
// gradient back to its inputs; backward() replays the closures in exact
// reverse creation order. Leaf gradients accumulate across backward() calls
// until zero_grad(); interior gradients are scratch for one pass.
//
// Determinism contract: every op accumulates into each output (and each
// gradient) element in a fixed order that does not depend on thread count;
// parallel loops only ever split across disjoint output slices.
template <typename T>
class Tape {
 public:
  Tape() { nodes_.reserve(1024); }

  // ---- node creation ---------------------------------------------------

  Var leaf(const Shape& shape, std::vector<T> value) {
    return push(shape, std::move(value), /*needs_grad=*/true, nullptr);
  }

  Var leaf_zeros(const Shape& shape) {
    return push(shape, std::vector<T>(shape_numel(shape), T(0)), true, nullptr);
  }

  Var constant(const Shape& shape, std::vector<T> value) {
    return push(shape, std::move(value), /*needs_grad=*/false, nullptr);
  }

  Var zeros(const Shape& shape) {
    return constant(shape, std::vector<T>(shape_numel(shape), T(0)));
  }

  Var scalar(T v) { return constant(Shape{}, std::vector<T>{v}); }

  // ---- accessors -------------------------------------------------------

  const Shape& shape(Var v) const { return node(v).shape; }
  std::int64_t numel(Var v) const { return static_cast<std::int64_t>(node(v).value.size()); }
  std::vector<T>& value(Var v) { return node(v).value; }
  const std::vector<T>& value(Var v) const { return node(v).value; }
  const std::vector<T>& grad(Var v) const {
    const NodeRec& n = node(v);
    check(n.needs_grad, "grad requested for a node that does not track gradients");
    return n.grad;
  }
  std::size_t node_count() const { return nodes_.size(); }

  // ---- elementwise ops -------------------------------------------------

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    const auto& av = value(a);
    const auto& bv = value(b);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return push(shape(a), std::move(out), wants(a, b), [this, a, b](const NodeRec& o) {
      spread(a, o.grad, [](T g) { return g; });
      spread(b, o.grad, [](T g) { return g; });
    });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    const auto& av = value(a);
    const auto& bv = value(b);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return push(shape(a), std::move(out), wants(a, b), [this, a, b](const NodeRec& o) {
      spread(a, o.grad, [](T g) { return g; });
      spread(b, o.grad, [](T g) { return -g; });
    });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    const auto& av = value(a);
    const auto& bv = value(b);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return push(shape(a), std::move(out), wants(a, b), [this, a, b](const NodeRec& o) {
      if (node(a).needs_grad) {
        auto& ga = node(a).grad;
        const auto& bv2 = value(b);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * bv2[i];
      }
      if (node(b).needs_grad) {
        auto& gb = node(b).grad;
        const auto& av2 = value(a);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[i] * av2[i];
      }
    });
  }

  Var scale(Var a, T s) {
    const auto& av = value(a);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    return push(shape(a), std::move(out), wants(a), [this, a, s](const NodeRec& o) {
      spread(a, o.grad, [s](T g) { return g * s; });
    });
  }

  Var relu(Var a) {
    const auto& av = value(a);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    return push(shape(a), std::move(out), wants(a), [this, a](const NodeRec& o) {
      auto& ga = node(a).grad;
      const auto& av2 = value(a);
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (av2[i] > T(0)) ga[i] += o.grad[i];
    });
  }

  Var tanh_op(Var a) {
    const auto& av = value(a);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
    return push(shape(a), std::move(out), wants(a), [this, a](const NodeRec& o) {
      auto& ga = node(a).grad;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const T y = o.value[i];
        ga[i] += o.grad[i] * (T(1) - y * y);
      }
    });
  }

  // clip(0.2 x + 0.5, 0, 1); the saturating gate activation.
  Var hard_sigmoid(Var a) {
    const auto& av = value(a);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const T y = T(0.2) * av[i] + T(0.5);
      out[i] = y < T(0) ? T(0) : (y > T(1) ? T(1) : y);
    }
    return push(shape(a), std::move(out), wants(a), [this, a](const NodeRec& o) {
      auto& ga = node(a).grad;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const T y = o.value[i];
        if (y > T(0) && y < T(1)) ga[i] += o.grad[i] * T(0.2);
      }
    });
  }

  // min(x, cap); gradient passes only where x < cap.
  Var clamp_max(Var a, T cap) {
    const auto& av = value(a);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] < cap ? av[i] : cap;
    return push(shape(a), std::move(out), wants(a), [this, a, cap](const NodeRec& o) {
      auto& ga = node(a).grad;
      const auto& av2 = value(a);
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (av2[i] < cap) ga[i] += o.grad[i];
    });
  }

  // ---- shape ops (rank-3 images) ---------------------------------------

  // Stack b's channels after a's; heights and widths must match.
  Var concat_ch(Var a, Var b) {
    rank3(a, "concat_ch");
    rank3(b, "concat_ch");
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    check(sa[1] == sb[1] && sa[2] == sb[2],
          "concat_ch: spatial dims differ: " + shape_str(sa) + " vs " + shape_str(sb));
    const auto& av = value(a);
    const auto& bv = value(b);
    std::vector<T> out;
    out.reserve(av.size() + bv.size());
    out.insert(out.end(), av.begin(), av.end());
    out.insert(out.end(), bv.begin(), bv.end());
    Shape so{sa[0] + sb[0], sa[1], sa[2]};
    return push(so, std::move(out), wants(a, b), [this, a, b](const NodeRec& o) {
      const std::size_t na = node(a).value.size();
      if (node(a).needs_grad) {
        auto& ga = node(a).grad;
        for (std::size_t i = 0; i < na; ++i) ga[i] += o.grad[i];
      }
      if (node(b).needs_grad) {
        auto& gb = node(b).grad;
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += o.grad[na + i];
      }
    });
  }

  // Channels [begin, begin+count) of a rank-3 tensor.
  Var slice_ch(Var a, int begin, int count) {
    rank3(a, "slice_ch");
    const Shape& sa = shape(a);
    check(begin >= 0 && count > 0 && begin + count <= sa[0],
          "slice_ch: channel range [" + std::to_string(begin) + "," +
              std::to_string(begin + count) + ") out of bounds for " + shape_str(sa));
    const std::int64_t plane = static_cast<std::int64_t>(sa[1]) * sa[2];
    const auto& av = value(a);
    std::vector<T> out(av.begin() + begin * plane, av.begin() + (begin + count) * plane);
    Shape so{count, sa[1], sa[2]};
    return push(so, std::move(out), wants(a), [this, a, begin, plane](const NodeRec& o) {
      auto& ga = node(a).grad;
      const std::size_t off = static_cast<std::size_t>(begin) * plane;
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[off + i] += o.grad[i];
    });
  }

  // 2x2 max pooling, stride 2. Ties resolve to the first maximum in row-major
  // block order so the gradient routing is unambiguous.
  Var max_pool2(Var a) {
    rank3(a, "max_pool2");
    const Shape& sa = shape(a);
    check(sa[1] % 2 == 0 && sa[2] % 2 == 0,
          "max_pool2: spatial dims must be even, got " + shape_str(sa));
    const int C = sa[0], H = sa[1], W = sa[2];
    const int Ho = H / 2, Wo = W / 2;
    const auto& av = value(a);
    std::vector<T> out(static_cast<std::size_t>(C) * Ho * Wo);
    auto arg = std::make_shared<std::vector<std::int32_t>>(out.size());
    for (int c = 0; c < C; ++c) {
      const T* src = av.data() + static_cast<std::int64_t>(c) * H * W;
      T* dst = out.data() + static_cast<std::int64_t>(c) * Ho * Wo;
      std::int32_t* am = arg->data() + static_cast<std::int64_t>(c) * Ho * Wo;
      for (int y = 0; y < Ho; ++y) {
        for (int x = 0; x < Wo; ++x) {
          const int base = (2 * y) * W + 2 * x;
          int best = base;
          T bv = src[base];
          const int cand[3] = {base + 1, base + W, base + W + 1};
          for (int k = 0; k < 3; ++k) {
            if (src[cand[k]] > bv) {
              bv = src[cand[k]];
              best = cand[k];
            }
          }
          dst[y * Wo + x] = bv;
          am[y * Wo + x] = best;
        }
      }
    }
    Shape so{C, Ho, Wo};
    return push(so, std::move(out), wants(a), [this, a, arg, H, W, Ho, Wo, C](const NodeRec& o) {
      auto& ga = node(a).grad;
      for (int c = 0; c < C; ++c) {
        const T* g = o.grad.data() + static_cast<std::int64_t>(c) * Ho * Wo;
        const std::int32_t* am = arg->data() + static_cast<std::int64_t>(c) * Ho * Wo;
        T* dst = ga.data() + static_cast<std::int64_t>(c) * H * W;
        for (int i = 0; i < Ho * Wo; ++i) dst[am[i]] += g[i];
      }
    });
  }

  // Nearest-neighbour 2x upsampling.
  Var upsample2(Var a) {
    rank3(a, "upsample2");
    const Shape& sa = shape(a);
    const int C = sa[0], H = sa[1], W = sa[2];
    const int Ho = H * 2, Wo = W * 2;
    const auto& av = value(a);
    std::vector<T> out(static_cast<std::size_t>(C) * Ho * Wo);
    for (int c = 0; c < C; ++c) {
      const T* src = av.data() + static_cast<std::int64_t>(c) * H * W;
      T* dst = out.data() + static_cast<std::int64_t>(c) * Ho * Wo;
      for (int y = 0; y < Ho; ++y) {
        const T* row = src + (y / 2) * W;
        T* drow = dst + y * Wo;
        for (int x = 0; x < Wo; ++x) drow[x] = row[x / 2];
      }
    }
    Shape so{C, Ho, Wo};
    return push(so, std::move(out), wants(a), [this, a, C, H, W, Ho, Wo](const NodeRec& o) {
      auto& ga = node(a).grad;
      for (int c = 0; c < C; ++c) {
        const T* g = o.grad.data() + static_cast<std::int64_t>(c) * Ho * Wo;
        T* dst = ga.data() + static_cast<std::int64_t>(c) * H * W;
        for (int y = 0; y < H; ++y) {
          for (int x = 0; x < W; ++x) {
            const T* g00 = g + (2 * y) * Wo + 2 * x;
            dst[y * W + x] += g00[0] + g00[1] + g00[Wo] + g00[Wo + 1];
          }
        }
      }
    });
  }

  // ---- convolution -----------------------------------------------------

  // 2-D convolution, stride 1, zero 'same' padding, odd square kernel.
  // x: {Cin,H,W}, w: {Cout,Cin,k,k}, b: {Cout} -> {Cout,H,W}.
  // Each output element accumulates bias first, then inputs in fixed
  // (in_ch, ky, kx) order; the parallel split is across output channels.
  Var conv2d(Var x, Var w, Var b) {
    rank3(x, "conv2d input");
    const Shape& sx = shape(x);
    const Shape& sw = shape(w);
    const Shape& sb = shape(b);
    check(sw.size() == 4, "conv2d: weight must be rank 4, got " + shape_str(sw));
    check(sb.size() == 1, "conv2d: bias must be rank 1, got " + shape_str(sb));
    check(sw[1] == sx[0], "conv2d: weight in_ch " + std::to_string(sw[1]) +
                              " != input channels " + std::to_string(sx[0]));
    check(sw[2] == sw[3] && sw[2] % 2 == 1,
          "conv2d: kernel must be odd and square, got " + shape_str(sw));
    check(sb[0] == sw[0], "conv2d: bias size != out channels");
    const int Cin = sx[0], H = sx[1], W = sx[2];
    const int Cout = sw[0], K = sw[2], P = K / 2;
    const auto& xv = value(x);
    const auto& wv = value(w);
    const auto& bv = value(b);
    std::vector<T> out(static_cast<std::size_t>(Cout) * H * W);
    ThreadPool::instance().parallel_for(Cout, [&](std::int64_t oc0, std::int64_t oc1) {
      for (std::int64_t oc = oc0; oc < oc1; ++oc) {
        T* dst = out.data() + oc * H * W;
        std::fill(dst, dst + static_cast<std::int64_t>(H) * W, bv[oc]);
        for (int ic = 0; ic < Cin; ++ic) {
          const T* src = xv.data() + static_cast<std::int64_t>(ic) * H * W;
          const T* ker = wv.data() + ((oc * Cin + ic) * K) * K;
          for (int ky = 0; ky < K; ++ky) {
            const int dy = ky - P;
            const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
            for (int kx = 0; kx < K; ++kx) {
              const int dx = kx - P;
              const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
              const T kv = ker[ky * K + kx];
              for (int y = y0; y < y1; ++y) {
                const T* s = src + (y + dy) * W + (x0 + dx);
                T* d = dst + y * W + x0;
                const int n = x1 - x0;
                for (int i = 0; i < n; ++i) d[i] += kv * s[i];
              }
            }
          }
        }
      }
    });
    Shape so{Cout, H, W};
    const bool ng = wants(x) || wants(w) || wants(b);
    return push(so, std::move(out), ng,
                [this, x, w, b, Cin, Cout, H, W, K, P](const NodeRec& o) {
                  conv2d_backward(x, w, b, o, Cin, Cout, H, W, K, P);
                });
  }

  // ---- reductions ------------------------------------------------------

  // Sum of all elements, row-major order, single accumulator.
  Var sum(Var a) {
    const auto& av = value(a);
    T s = 0;
    for (const T v : av) s += v;
    return push(Shape{}, std::vector<T>{s}, wants(a), [this, a](const NodeRec& o) {
      auto& ga = node(a).grad;
      const T g = o.grad[0];
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }

  // ---- backward --------------------------------------------------------

  void backward(Var root) {
    check(root.valid() && static_cast<std::size_t>(root.id) < nodes_.size(),
          "backward: invalid root");
    check(nodes_[root.id].value.size() == 1, "backward: root must be scalar");
    check(nodes_[root.id].needs_grad, "backward: root does not track gradients");
    // Interior gradients are scratch for a single pass; only leaf gradients
    // (nodes without a backward closure) accumulate across calls.
    for (NodeRec& n : nodes_)
      if (n.needs_grad && n.back) std::fill(n.grad.begin(), n.grad.end(), T(0));
    nodes_[root.id].grad[0] += T(1);
    for (std::int32_t i = root.id; i >= 0; --i) {
      NodeRec& n = nodes_[i];
      if (n.needs_grad && n.back) n.back(n);
    }
  }

  void zero_grad() {
    for (NodeRec& n : nodes_)
      if (n.needs_grad) std::fill(n.grad.begin(), n.grad.end(), T(0));
  }

  // Arena watermark: rollback() frees every node created after mark() and
  // invalidates their handles. Lets long inference loops reuse one tape
  // without unbounded growth.
  std::size_t mark() const { return nodes_.size(); }
  void rollback(std::size_t m) {
    check(m <= nodes_.size(), "rollback past end of tape");
    nodes_.resize(m);
  }

 private:
  struct NodeRec {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // only allocated when needs_grad
    bool needs_grad = false;
    std::function<void(const NodeRec&)> back;
  };

  NodeRec& node(Var v) {
    check(v.valid() && static_cast<std::size_t>(v.id) < nodes_.size(), "invalid Var handle");
    return nodes_[v.id];
  }
  const NodeRec& node(Var v) const {
    check(v.valid() && static_cast<std::size_t>(v.id) < nodes_.size(), "invalid Var handle");
    return nodes_[v.id];
  }

  bool wants(Var a) const { return node(a).needs_grad; }
  bool wants(Var a, Var b) const { return node(a).needs_grad || node(b).needs_grad; }

  void same_shape(Var a, Var b, const char* op) const {
    check(shape(a) == shape(b), std::string(op) + ": shape mismatch " + shape_str(shape(a)) +
                                    " vs " + shape_str(shape(b)));
  }

  void rank3(Var a, const char* op) const {
    check(shape(a).size() == 3, std::string(op) + ": expected rank-3 tensor, got " +
                                    shape_str(shape(a)));
  }

  // ga[i] += f(gout[i]) for linear links whose local derivative is constant.
  template <typename F>
  void spread(Var a, const std::vector<T>& gout, F f) {
    NodeRec& n = node(a);
    if (!n.needs_grad) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += f(gout[i]);
  }

  Var push(Shape shape, std::vector<T> value, bool needs_grad,
           std::function<void(const NodeRec&)> back) {
    check(static_cast<std::int64_t>(value.size()) == shape_numel(shape),
          "tensor value size does not match shape " + shape_str(shape));
    NodeRec n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) {
      n.grad.assign(n.value.size(), T(0));
      n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    check(nodes_.size() - 1 <= 0x7fffffff, "tape overflow");
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  void conv2d_backward(Var x, Var w, Var b, const NodeRec& o, int Cin, int Cout, int H, int W,
                       int K, int P) {
    const auto& gout = o.grad;
    const auto& xv = value(x);
    const auto& wv = value(w);
    if (node(x).needs_grad) {
      auto& gx = node(x).grad;
      ThreadPool::instance().parallel_for(Cin, [&](std::int64_t ic0, std::int64_t ic1) {
        for (std::int64_t ic = ic0; ic < ic1; ++ic) {
          T* dst = gx.data() + ic * H * W;
          for (int oc = 0; oc < Cout; ++oc) {
            const T* g = gout.data() + static_cast<std::int64_t>(oc) * H * W;
            const T* ker = wv.data() + ((oc * Cin + ic) * K) * K;
            for (int ky = 0; ky < K; ++ky) {
              const int dy = ky - P;
              const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
              for (int kx = 0; kx < K; ++kx) {
                const int dx = kx - P;
                const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                const T kv = ker[ky * K + kx];
                for (int y = y0; y < y1; ++y) {
                  T* d = dst + (y + dy) * W + (x0 + dx);
                  const T* s = g + y * W + x0;
                  const int n = x1 - x0;
                  for (int i = 0; i < n; ++i) d[i] += kv * s[i];
                }
              }
            }
          }
        }
      });
    }
    if (node(w).needs_grad) {
      auto& gw = node(w).grad;
      ThreadPool::instance().parallel_for(Cout, [&](std::int64_t oc0, std::int64_t oc1) {
        for (std::int64_t oc = oc0; oc < oc1; ++oc) {
          const T* g = gout.data() + oc * H * W;
          for (int ic = 0; ic < Cin; ++ic) {
            const T* src = xv.data() + static_cast<std::int64_t>(ic) * H * W;
            T* gk = gw.data() + ((oc * Cin + ic) * K) * K;
            for (int ky = 0; ky < K; ++ky) {
              const int dy = ky - P;
              const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
              for (int kx = 0; kx < K; ++kx) {
                const int dx = kx - P;
                const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                T acc = 0;
                for (int y = y0; y < y1; ++y) {
                  const T* s = src + (y + dy) * W + (x0 + dx);
                  const T* gr = g + y * W + x0;
                  const int n = x1 - x0;
                  for (int i = 0; i < n; ++i) acc += gr[i] * s[i];
                }
                gk[ky * K + kx] += acc;
              }
            }
          }
        }
      });
    }
    if (node(b).needs_grad) {
      auto& gb = node(b).grad;
      for (int oc = 0; oc < Cout; ++oc) {
        const T* g = gout.data() + static_cast<std::int64_t>(oc) * H * W;
        T acc = 0;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) acc += g[i];
        gb[oc] += acc;
      }
    }
  }

  std::vector<NodeRec> nodes_;
};

}  // namespace precnet
