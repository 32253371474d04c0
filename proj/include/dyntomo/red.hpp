// Regularizer algebra for the variational solver: the temporal smoothness
// penalty on frame stacks and the restoration-engine penalty
//   rho(f) = <f, f - D(f)>          (gradient surrogate: f - D(f))
// evaluated against any denoiser callable. The production denoiser is the
// trained restoration network; tests exercise linear stubs through the same
// entry points.
#pragma once

#include <concepts>
#include <utility>

#include "dyntomo/common.hpp"
#include "dyntomo/restoration.hpp"

namespace dyntomo {

// Anything that maps a frame matrix to an equal-shaped matrix. Constrains
// the generic overloads so that passing a RestorationModel resolves to its
// dedicated overload instead of a failed call on the model object.
template <typename Den, typename T>
concept FrameDenoiser = std::invocable<Den&, const Mat<T>&>;

// Sum over interior frames of squared second differences in time,
//   sum_{t=1}^{P-2} ||f_{t-1} - 2 f_t + f_{t+1}||_F^2.
// Zero for fewer than three frames; vanishes exactly on stacks affine in t.
template <typename T>
T temporal_penalty(const DynamicObject<T>& obj) {
  validate_object(obj, "temporal_penalty");
  const int P = obj.num_frames();
  if (P < 3) return T(0);
  T acc = T(0);
  for (int t = 1; t + 1 < P; ++t)
    acc += (obj.frames[t - 1] - T(2) * obj.frames[t] + obj.frames[t + 1])
               .squaredNorm();
  return acc;
}

// <f, f - D(f)> with frames vectorized. `denoise` maps a frame matrix to an
// equal-shaped matrix.
template <typename T, typename Den>
  requires FrameDenoiser<Den, T>
T red_penalty(const Mat<T>& frame, Den&& denoise) {
  validate_frame(frame, "red_penalty");
  const Mat<T> restored = std::forward<Den>(denoise)(frame);
  if (restored.rows() != frame.rows() || restored.cols() != frame.cols())
    throw ValidationError("red_penalty: denoiser changed the frame shape");
  return (frame.array() * (frame - restored).array()).sum();
}

template <typename T>
T red_penalty(const Mat<T>& frame, const RestorationModel<T>& model) {
  return red_penalty(frame, [&](const Mat<T>& f) { return restore(model, f); });
}

// Gradient surrogate f - D(f). For symmetric linear denoisers the true
// gradient of rho is twice this; callers that need the true gradient of the
// quadratic form scale accordingly.
template <typename T, typename Den>
  requires FrameDenoiser<Den, T>
Mat<T> red_gradient(const Mat<T>& frame, Den&& denoise) {
  validate_frame(frame, "red_gradient");
  const Mat<T> restored = std::forward<Den>(denoise)(frame);
  if (restored.rows() != frame.rows() || restored.cols() != frame.cols())
    throw ValidationError("red_gradient: denoiser changed the frame shape");
  return frame - restored;
}

template <typename T>
Mat<T> red_gradient(const Mat<T>& frame, const RestorationModel<T>& model) {
  return red_gradient(frame,
                      [&](const Mat<T>& f) { return restore(model, f); });
}

}  // namespace dyntomo
