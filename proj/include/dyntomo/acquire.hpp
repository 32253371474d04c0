#pragma once

// Measurement simulation: one projection per time step along a schedule,
// plus the noise-level calibration that anchors sigma to a reference
// reconstruction quality instead of an arbitrary number.

#include <vector>

#include "dyntomo/common.hpp"
#include "dyntomo/radon.hpp"
#include "dyntomo/schedule.hpp"

namespace dyntomo {

template <typename T>
struct SinogramSet {
  std::vector<Projection<T>> projections;  // one per schedule entry
  AngleSchedule schedule;
  T noise_sigma = T(0);

  int num_views() const { return static_cast<int>(projections.size()); }
  int detector_bins() const {
    return projections.empty()
               ? 0
               : static_cast<int>(projections.front().bins.size());
  }
};

// Projects frame t of the object at schedule angle t and adds i.i.d.
// Gaussian noise of standard deviation `sigma`. The noise stream is drawn
// view-major then bin-major from `seed`, so a given seed always produces the
// same measurements.
template <typename T>
SinogramSet<T> simulate_measurements(const DynamicObject<T>& obj,
                                     const AngleSchedule& schedule, T sigma,
                                     std::uint64_t seed) {
  validate_object(obj, "simulate_measurements");
  if (obj.num_frames() != schedule.num_views())
    throw ValidationError(
        "simulate_measurements: object has " +
        std::to_string(obj.num_frames()) + " frames but schedule has " +
        std::to_string(schedule.num_views()) + " views");
  if (!(sigma >= T(0)))
    throw ValidationError("simulate_measurements: sigma must be >= 0");

  SinogramSet<T> out;
  out.schedule = schedule;
  out.noise_sigma = sigma;
  out.projections.reserve(schedule.num_views());
  Rng rng(seed);
  for (int p = 0; p < schedule.num_views(); ++p) {
    ImageFrame<T> frame{obj.frames[p], obj.pixel_spacing};
    Projection<T> proj =
        radon_project(frame, static_cast<T>(schedule.angles[p]));
    proj.time_index = p;
    if (sigma > T(0)) {
      for (Eigen::Index k = 0; k < proj.bins.size(); ++k)
        proj.bins[k] += sigma * static_cast<T>(rng.normal());
    }
    out.projections.push_back(std::move(proj));
  }
  return out;
}

struct NoiseCalibration {
  double sigma = 0;
  double achieved_psnr_db = 0;
  int iterations = 0;
};

}  // namespace dyntomo
