// Convolution machinery for the restoration pipeline: a separable Gaussian
// blur with reflective borders (degradation model) and zero-padded 3x3
// convolution layers evaluated as im2col + GEMM (restoration network).
//
// Multi-channel activations are stored as one matrix of shape
// channels x (J*J) with pixels scanned row-major (p = r*J + c), so a layer
// forward is a single GEMM against the patch matrix.
#pragma once

#include <cmath>
#include <vector>

#include "dyntomo/common.hpp"

namespace dyntomo {

// Normalized 1-D Gaussian taps of standard deviation k pixels, truncated at
// +/- 3k and renormalized so they sum to one. k = 0 is the identity tap.
template <typename T>
std::vector<T> gaussian_taps(T k) {
  if (!std::isfinite(static_cast<double>(k)) || k < T(0))
    throw ValidationError("gaussian_taps: std must be finite and >= 0");
  const int radius =
      k > T(0) ? static_cast<int>(std::ceil(3.0 * static_cast<double>(k))) : 0;
  std::vector<T> taps(2 * radius + 1);
  T sum = T(0);
  for (int i = -radius; i <= radius; ++i) {
    const T v = k > T(0) ? std::exp(-T(i) * T(i) / (T(2) * k * k)) : T(1);
    taps[i + radius] = v;
    sum += v;
  }
  for (T& v : taps) v /= sum;
  return taps;
}

// Mirror an index into [0, n), repeating the edge sample
// (... 1 0 | 0 1 ... n-1 | n-1 n-2 ...). The fold iterates so tap radii
// larger than the frame still resolve.
inline Eigen::Index reflect_index(Eigen::Index i, Eigen::Index n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

// Separable Gaussian blur with reflective boundary handling.
template <typename T>
Mat<T> gaussian_blur_reflect(const Mat<T>& frame, T k) {
  if (frame.size() == 0)
    throw ValidationError("gaussian_blur_reflect: empty frame");
  const auto taps = gaussian_taps(k);
  const int radius = (static_cast<int>(taps.size()) - 1) / 2;
  if (radius == 0) return frame;

  const Eigen::Index rows = frame.rows(), cols = frame.cols();
  Mat<T> tmp(rows, cols), out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      T acc = T(0);
      for (int i = -radius; i <= radius; ++i)
        acc += taps[i + radius] * frame(r, reflect_index(c + i, cols));
      tmp(r, c) = acc;
    }
  for (Eigen::Index c = 0; c < cols; ++c)
    for (Eigen::Index r = 0; r < rows; ++r) {
      T acc = T(0);
      for (int i = -radius; i <= radius; ++i)
        acc += taps[i + radius] * tmp(reflect_index(r + i, rows), c);
      out(r, c) = acc;
    }
  return out;
}

// One zero-padded 3x3 convolution layer. Weight row o holds output channel
// o's taps, scanned as in_channel-major then tap row-major, matching the
// patch rows produced by im2col3.
template <typename T>
struct ConvLayer {
  Mat<T> w;  // out_channels x (in_channels * 9)
  Vec<T> b;  // out_channels
};

// Patch matrix of a channels x (J*J) activation block: row ch*9 + dr*3 + dc
// of column r*J + c holds act(ch, (r+dr-1)*J + (c+dc-1)), zero outside the
// frame. Segments are copied row-wise; only the vertical neighbours change
// the source row, so each (tap, image row) pair is one contiguous block.
template <typename T>
void im2col3(const Mat<T>& act, int side, Mat<T>& col) {
  const Eigen::Index channels = act.rows();
  const Eigen::Index n = static_cast<Eigen::Index>(side) * side;
  if (act.cols() != n) throw ValidationError("im2col3: side mismatch");
  col.setZero(channels * 9, n);
  for (Eigen::Index ch = 0; ch < channels; ++ch)
    for (int dr = 0; dr < 3; ++dr)
      for (int dc = 0; dc < 3; ++dc) {
        const Eigen::Index row = ch * 9 + dr * 3 + dc;
        const int s = dc - 1;
        const int c0 = s < 0 ? 1 : 0;
        const Eigen::Index len = side - std::abs(s);
        for (int r = 0; r < side; ++r) {
          const int rr = r + dr - 1;
          if (rr < 0 || rr >= side) continue;
          col.block(row, Eigen::Index(r) * side + c0, 1, len) =
              act.block(ch, Eigen::Index(rr) * side + c0 + s, 1, len);
        }
      }
}

// Adjoint of im2col3: scatter-add patch-space gradients back onto the
// activation block.
template <typename T>
void col2im3_add(const Mat<T>& col, int side, Mat<T>& act) {
  const Eigen::Index channels = act.rows();
  const Eigen::Index n = static_cast<Eigen::Index>(side) * side;
  if (act.cols() != n || col.rows() != channels * 9 || col.cols() != n)
    throw ValidationError("col2im3_add: shape mismatch");
  for (Eigen::Index ch = 0; ch < channels; ++ch)
    for (int dr = 0; dr < 3; ++dr)
      for (int dc = 0; dc < 3; ++dc) {
        const Eigen::Index row = ch * 9 + dr * 3 + dc;
        const int s = dc - 1;
        const int c0 = s < 0 ? 1 : 0;
        const Eigen::Index len = side - std::abs(s);
        for (int r = 0; r < side; ++r) {
          const int rr = r + dr - 1;
          if (rr < 0 || rr >= side) continue;
          act.block(ch, Eigen::Index(rr) * side + c0 + s, 1, len) +=
              col.block(row, Eigen::Index(r) * side + c0, 1, len);
        }
      }
}

}  // namespace dyntomo
