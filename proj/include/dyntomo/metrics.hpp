#pragma once

// Image quality metrics. Conventions are pinned here once and shared by the
// tests, the CLI and the solver history logging:
//   - PSNR peak defaults to the maximum over the reference frames and is
//     capped at 200 dB when the MSE underflows to zero.
//   - SSIM uses an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
//     data range max(ref)-min(ref), symmetric boundary padding.
//   - HFEN is the l2 norm of the Laplacian-of-Gaussian (sigma 1.5 px, 9x9,
//     shifted to zero sum) applied to the error image, symmetric padding.

#include <vector>

#include "dyntomo/common.hpp"

namespace dyntomo {

inline constexpr double kPsnrCapDb = 200.0;

template <typename T>
double mse(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError("mse: shape mismatch");
  if (a.size() == 0) throw ValidationError("mse: empty input");
  return (a.template cast<double>() - b.template cast<double>())
             .squaredNorm() /
         static_cast<double>(a.size());
}

template <typename T>
double mae(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError("mae: shape mismatch");
  if (a.size() == 0) throw ValidationError("mae: empty input");
  return (a.template cast<double>() - b.template cast<double>())
             .cwiseAbs()
             .mean();
}

template <typename T>
double psnr_db(const Mat<T>& est, const Mat<T>& ref, double peak,
               bool* capped = nullptr) {
  if (!(peak > 0))
    throw ValidationError("psnr_db: peak must be > 0");
  const double m = mse(est, ref);
  if (capped) *capped = false;
  if (m == 0.0) {
    if (capped) *capped = true;
    return kPsnrCapDb;
  }
  const double v = 10.0 * std::log10(peak * peak / m);
  if (v >= kPsnrCapDb) {
    if (capped) *capped = true;
    return kPsnrCapDb;
  }
  return v;
}

namespace detail {

// Symmetric index reflection (edge sample repeated): -1 -> 0, -2 -> 1,
// n -> n-1. Used by both SSIM and HFEN.
inline int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

inline Mat<double> conv2_reflect(const Mat<double>& img,
                                 const Mat<double>& kernel) {
  const int J = static_cast<int>(img.rows());
  const int K = static_cast<int>(img.cols());
  const int kr = static_cast<int>(kernel.rows()) / 2;
  const int kc = static_cast<int>(kernel.cols()) / 2;
  Mat<double> out(J, K);
  for (int r = 0; r < J; ++r) {
    for (int c = 0; c < K; ++c) {
      double acc = 0;
      for (int i = -kr; i <= kr; ++i)
        for (int j = -kc; j <= kc; ++j)
          acc += kernel(i + kr, j + kc) *
                 img(reflect_index(r + i, J), reflect_index(c + j, K));
      out(r, c) = acc;
    }
  }
  return out;
}

inline Mat<double> gaussian_window(int size, double sigma) {
  Mat<double> w(size, size);
  const int h = size / 2;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double di = i - h, dj = j - h;
      w(i, j) = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
    }
  w /= w.sum();
  return w;
}

inline Mat<double> log_kernel(int size, double sigma) {
  Mat<double> k(size, size);
  const int h = size / 2;
  const double s2 = sigma * sigma;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double r2 = double(i - h) * (i - h) + double(j - h) * (j - h);
      k(i, j) = (r2 - 2 * s2) / (s2 * s2) * std::exp(-r2 / (2 * s2));
    }
  // Shift to exactly zero sum so constant offsets are annihilated.
  k.array() -= k.mean();
  return k;
}

}  // namespace detail

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = -1;  // <= 0 means max(ref) - min(ref)
};

template <typename T>
double ssim(const Mat<T>& est, const Mat<T>& ref, SsimParams p = {}) {
  if (est.rows() != ref.rows() || est.cols() != ref.cols())
    throw ValidationError("ssim: shape mismatch");
  if (est.rows() < p.window || est.cols() < p.window)
    throw ValidationError("ssim: image smaller than the window");
  const Mat<double> x = est.template cast<double>();
  const Mat<double> y = ref.template cast<double>();
  double range = p.data_range;
  if (!(range > 0)) range = y.maxCoeff() - y.minCoeff();
  if (!(range > 0))
    throw ValidationError("ssim: reference has zero data range");
  const double c1 = (p.k1 * range) * (p.k1 * range);
  const double c2 = (p.k2 * range) * (p.k2 * range);
  const Mat<double> w = detail::gaussian_window(p.window, p.sigma);

  const Mat<double> mx = detail::conv2_reflect(x, w);
  const Mat<double> my = detail::conv2_reflect(y, w);
  const Mat<double> mxx = detail::conv2_reflect(x.cwiseProduct(x), w);
  const Mat<double> myy = detail::conv2_reflect(y.cwiseProduct(y), w);
  const Mat<double> mxy = detail::conv2_reflect(x.cwiseProduct(y), w);

  double acc = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double ux = mx(i), uy = my(i);
    const double vx = mxx(i) - ux * ux;
    const double vy = myy(i) - uy * uy;
    const double cxy = mxy(i) - ux * uy;
    acc += ((2 * ux * uy + c1) * (2 * cxy + c2)) /
           ((ux * ux + uy * uy + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(x.size());
}

struct HfenParams {
  int size = 9;
  double sigma = 1.5;
};

template <typename T>
double hfen(const Mat<T>& est, const Mat<T>& ref, HfenParams p = {}) {
  if (est.rows() != ref.rows() || est.cols() != ref.cols())
    throw ValidationError("hfen: shape mismatch");
  if (est.rows() < p.size || est.cols() < p.size)
    throw ValidationError("hfen: image smaller than the kernel");
  const Mat<double> k = detail::log_kernel(p.size, p.sigma);
  const Mat<double> diff =
      est.template cast<double>() - ref.template cast<double>();
  return detail::conv2_reflect(diff, k).norm();
}

struct MetricsRecord {
  std::vector<int> frame_indices;
  std::vector<double> psnr;
  std::vector<double> ssim;
  std::vector<double> mae;
  std::vector<double> hfen;
  std::vector<bool> psnr_capped;
  double mean_psnr = 0, mean_ssim = 0, mean_mae = 0, mean_hfen = 0;
  double peak = 0;
  bool any_capped = false;
};

// Frame-wise metrics plus means. `frames` selects a subset (empty = all);
// `peak` <= 0 means use the maximum over the reference frames.
template <typename T>
MetricsRecord evaluate(const DynamicObject<T>& est,
                       const DynamicObject<T>& ref,
                       std::vector<int> frames = {}, double peak = -1,
                       SsimParams sp = {}, HfenParams hp = {}) {
  validate_object(est, "evaluate: estimate");
  validate_object(ref, "evaluate: reference");
  if (est.num_frames() != ref.num_frames())
    throw ValidationError("evaluate: frame count mismatch");
  if (est.side() != ref.side())
    throw ValidationError("evaluate: frame size mismatch");
  if (frames.empty()) {
    frames.resize(ref.num_frames());
    for (int i = 0; i < ref.num_frames(); ++i) frames[i] = i;
  }
  for (int t : frames)
    if (t < 0 || t >= ref.num_frames())
      throw ValidationError("evaluate: frame index " + std::to_string(t) +
                            " out of range");
  MetricsRecord rec;
  if (!(peak > 0)) {
    peak = 0;
    for (const auto& f : ref.frames)
      peak = std::max(peak, static_cast<double>(f.maxCoeff()));
    if (!(peak > 0))
      throw ValidationError("evaluate: reference peak is not positive; pass "
                            "an explicit peak");
  }
  rec.peak = peak;
  for (int t : frames) {
    bool capped = false;
    rec.frame_indices.push_back(t);
    rec.psnr.push_back(psnr_db(est.frames[t], ref.frames[t], peak, &capped));
    rec.psnr_capped.push_back(capped);
    rec.any_capped = rec.any_capped || capped;
    rec.ssim.push_back(ssim(est.frames[t], ref.frames[t], sp));
    rec.mae.push_back(mae(est.frames[t], ref.frames[t]));
    rec.hfen.push_back(hfen(est.frames[t], ref.frames[t], hp));
  }
  const auto n = static_cast<double>(frames.size());
  for (std::size_t i = 0; i < rec.psnr.size(); ++i) {
    rec.mean_psnr += rec.psnr[i] / n;
    rec.mean_ssim += rec.ssim[i] / n;
    rec.mean_mae += rec.mae[i] / n;
    rec.mean_hfen += rec.hfen[i] / n;
  }
  return rec;
}

}  // namespace dyntomo
