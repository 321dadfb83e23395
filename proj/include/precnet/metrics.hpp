#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "precnet/common.hpp"
#include "precnet/layers.hpp"

namespace precnet {

// Mean squared error over all elements; double accumulation in index order.
template <typename T>
double mse(const std::vector<T>& a, const std::vector<T>& b) {
  check(a.size() == b.size() && !a.empty(), "mse: size mismatch or empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

// 10*log10(peak^2 / mse); +inf for identical inputs. Callers averaging PSNR
// across frames must skip non-finite values.
inline double psnr_from_mse(double mse_value, double peak) {
  check(peak > 0, "psnr: peak must be positive");
  check(mse_value >= 0, "psnr: mse must be nonnegative");
  if (mse_value == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse_value);
}

template <typename T>
double psnr(const std::vector<T>& a, const std::vector<T>& b, double peak) {
  return psnr_from_mse(mse(a, b), peak);
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

namespace detail {
inline std::vector<double> gaussian_window(int n, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(n) * n);
  const int h = n / 2;
  double total = 0.0;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double dy = y - h, dx = x - h;
      const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      w[y * n + x] = v;
      total += v;
    }
  }
  for (double& v : w) v /= total;
  return w;
}
}  // namespace detail

// Structural similarity of two {C,H,W} images with peak value `peak`.
// Gaussian-weighted statistics over every fully interior window position,
// averaged per channel and then across channels. Identical inputs score
// exactly 1.
template <typename T>
double ssim(const HostTensor<T>& a, const HostTensor<T>& b, double peak,
            const SsimParams& p = {}) {
  check(a.shape == b.shape, "ssim: shape mismatch");
  check(a.shape.size() == 3, "ssim: expected {C,H,W} tensors");
  check(p.window % 2 == 1 && p.window > 0, "ssim: window must be odd");
  const int C = a.shape[0], H = a.shape[1], W = a.shape[2];
  check(H >= p.window && W >= p.window,
        "ssim: image smaller than window (" + std::to_string(H) + "x" + std::to_string(W) + ")");
  check(peak > 0, "ssim: peak must be positive");
  const std::vector<double> win = detail::gaussian_window(p.window, p.sigma);
  const double c1 = (p.k1 * peak) * (p.k1 * peak);
  const double c2 = (p.k2 * peak) * (p.k2 * peak);
  const int n = p.window;
  const int Ho = H - n + 1, Wo = W - n + 1;
  double channel_sum = 0.0;
  for (int c = 0; c < C; ++c) {
    const T* pa = a.data.data() + static_cast<std::int64_t>(c) * H * W;
    const T* pb = b.data.data() + static_cast<std::int64_t>(c) * H * W;
    double acc = 0.0;
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int wy = 0; wy < n; ++wy) {
          const T* ra = pa + (y + wy) * W + x;
          const T* rb = pb + (y + wy) * W + x;
          const double* rw = win.data() + wy * n;
          for (int wx = 0; wx < n; ++wx) {
            const double va = ra[wx], vb = rb[wx], w = rw[wx];
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        }
        const double va = saa - ma * ma;
        const double vb = sbb - mb * mb;
        const double cov = sab - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    }
    channel_sum += acc / (static_cast<double>(Ho) * Wo);
  }
  return channel_sum / C;
}

}  // namespace precnet
