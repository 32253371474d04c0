#pragma once

// View-angle schedules over [0, pi). One projection is taken per time step,
// so a schedule is a list of (angle, time) pairs plus a record of how many
// distinct angles it visits.

#include <algorithm>
#include <string>
#include <vector>

#include "dyntomo/common.hpp"

namespace dyntomo {

struct AngleSchedule {
  std::vector<double> angles;  // radians in [0, pi)
  std::vector<double> times;   // strictly increasing, one per view
  std::string scheme;
  int distinct_views = 0;

  int num_views() const { return static_cast<int>(angles.size()); }
};

namespace detail {

inline bool is_pow2(std::uint32_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline std::uint32_t bit_reverse(std::uint32_t x, int bits) {
  std::uint32_t r = 0;
  for (int i = 0; i < bits; ++i) {
    r = (r << 1) | (x & 1u);
    x >>= 1;
  }
  return r;
}

inline int log2_exact(std::uint32_t v) {
  int k = 0;
  while ((1u << k) < v) ++k;
  return k;
}

}  // namespace detail

// Bit-reversed ordering of P uniformly spaced angles: view p gets angle
// pi * bitreverse_k(p) / P where P = 2^k. Every power-of-two prefix of the
// sequence is itself a uniform set of angles, which is what makes truncated
// acquisitions usable.
inline AngleSchedule bit_reversed_schedule(int num_views) {
  if (num_views < 1)
    throw ValidationError("bit_reversed_schedule: need at least one view");
  if (!detail::is_pow2(static_cast<std::uint32_t>(num_views)))
    throw ValidationError(
        "bit_reversed_schedule: view count " + std::to_string(num_views) +
        " is not a power of two; use uniform_schedule or pick the nearest "
        "power of two");
  const int bits = detail::log2_exact(static_cast<std::uint32_t>(num_views));
  AngleSchedule s;
  s.scheme = "bit-reversed";
  s.distinct_views = num_views;
  s.angles.resize(num_views);
  s.times.resize(num_views);
  for (int p = 0; p < num_views; ++p) {
    s.angles[p] = kPi *
                  static_cast<double>(detail::bit_reverse(
                      static_cast<std::uint32_t>(p), bits)) /
                  static_cast<double>(num_views);
    s.times[p] = static_cast<double>(p);
  }
  return s;
}

// Reduced-view acquisition: the first `distinct` entries of the bit-reversed
// ordering, cycled until `num_views` time steps are filled. Models a scanner
// that keeps rotating through a short angle list while the object evolves.
inline AngleSchedule reduced_view_schedule(int distinct, int num_views) {
  if (distinct < 1 || num_views < 1)
    throw ValidationError("reduced_view_schedule: counts must be positive");
  if (distinct > num_views)
    throw ValidationError(
        "reduced_view_schedule: distinct view count exceeds total views");
  if (num_views % distinct != 0)
    throw ValidationError(
        "reduced_view_schedule: total views must be a multiple of the "
        "distinct view count");
  AngleSchedule base = bit_reversed_schedule(distinct);
  AngleSchedule s;
  s.scheme = "reduced-view";
  s.distinct_views = distinct;
  s.angles.resize(num_views);
  s.times.resize(num_views);
  for (int p = 0; p < num_views; ++p) {
    s.angles[p] = base.angles[p % distinct];
    s.times[p] = static_cast<double>(p);
  }
  return s;
}

inline AngleSchedule uniform_schedule(int num_views) {
  if (num_views < 1)
    throw ValidationError("uniform_schedule: need at least one view");
  AngleSchedule s;
  s.scheme = "uniform";
  s.distinct_views = num_views;
  s.angles.resize(num_views);
  s.times.resize(num_views);
  for (int p = 0; p < num_views; ++p) {
    s.angles[p] = kPi * static_cast<double>(p) / static_cast<double>(num_views);
    s.times[p] = static_cast<double>(p);
  }
  return s;
}

}  // namespace dyntomo
