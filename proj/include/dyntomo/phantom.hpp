#pragma once

// Synthetic objects: anti-aliased primitives, a textured disk slice, a
// mass-conserving vertical warp model, procedural dynamic phantoms and
// ingestion of externally supplied slice stacks.
//
// All generators keep their content inside a disk of radius <= 0.44 * side
// plus warp headroom, so projections never clip at the detector edge and
// mass identities hold.

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "dyntomo/acquire.hpp"
#include "dyntomo/common.hpp"
#include "dyntomo/container.hpp"

namespace dyntomo {

// Anti-aliased disk: each pixel is the area fraction covered by the disk,
// estimated on a supersample x supersample subgrid. cx/cy are in pixel index
// units (row/col), value is the interior density.
template <typename T>
Mat<T> disk_phantom(int side, double radius, double value = 1.0,
                    double cy = -1, double cx = -1, int supersample = 16) {
  if (side < 2) throw ValidationError("disk_phantom: side must be >= 2");
  if (!(radius > 0)) throw ValidationError("disk_phantom: radius must be > 0");
  if (supersample < 1)
    throw ValidationError("disk_phantom: supersample must be >= 1");
  if (cy < 0) cy = (side - 1) / 2.0;
  if (cx < 0) cx = (side - 1) / 2.0;
  Mat<T> out(side, side);
  const double ss = supersample;
  const double r2 = radius * radius;
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      // Quick accept/reject for pixels far from the rim.
      const double dy = r - cy, dx = c - cx;
      const double d = std::sqrt(dy * dy + dx * dx);
      if (d < radius - 1.0) {
        out(r, c) = static_cast<T>(value);
        continue;
      }
      if (d > radius + 1.0) {
        out(r, c) = T(0);
        continue;
      }
      int hits = 0;
      for (int i = 0; i < supersample; ++i)
        for (int j = 0; j < supersample; ++j) {
          const double sy = r - 0.5 + (i + 0.5) / ss - cy;
          const double sx = c - 0.5 + (j + 0.5) / ss - cx;
          if (sy * sy + sx * sx <= r2) ++hits;
        }
      out(r, c) = static_cast<T>(value * hits / (ss * ss));
    }
  }
  return out;
}

// Disk with a quintic smootherstep edge of the given width, evaluated
// analytically at pixel centers. Reconstruction benchmarks use this instead
// of a hard-edged disk: a sharp edge carries spectral content far past the
// grid Nyquist, and that content caps round-trip fidelity near 31 dB no
// matter how good the operator chain is. The soft edge keeps the comparison
// about the chain instead of the phantom.
template <typename T>
Mat<T> tapered_disk_phantom(int side, double radius, double edge_width,
                            double value = 1.0) {
  if (side < 2)
    throw ValidationError("tapered_disk_phantom: side must be >= 2");
  if (!(radius > 0))
    throw ValidationError("tapered_disk_phantom: radius must be > 0");
  if (!(edge_width > 0))
    throw ValidationError("tapered_disk_phantom: edge_width must be > 0");
  const double c0 = (side - 1) / 2.0;
  Mat<T> out(side, side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double dy = r - c0, dx = c - c0;
      const double rho = std::sqrt(dy * dy + dx * dx);
      double v;
      if (rho <= radius - 0.5 * edge_width) {
        v = 1.0;
      } else if (rho >= radius + 0.5 * edge_width) {
        v = 0.0;
      } else {
        const double s = (rho - radius + 0.5 * edge_width) / edge_width;
        v = 1.0 - (6.0 * s * s - 15.0 * s + 10.0) * s * s * s;
      }
      out(r, c) = static_cast<T>(value * v);
    }
  return out;
}

template <typename T>
Mat<T> gaussian_blob(int side, double sigma, double amplitude = 1.0,
                     double cy = -1, double cx = -1) {
  if (side < 2) throw ValidationError("gaussian_blob: side must be >= 2");
  if (!(sigma > 0)) throw ValidationError("gaussian_blob: sigma must be > 0");
  if (cy < 0) cy = (side - 1) / 2.0;
  if (cx < 0) cx = (side - 1) / 2.0;
  Mat<T> out(side, side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double dy = r - cy, dx = c - cx;
      out(r, c) = static_cast<T>(
          amplitude * std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma)));
    }
  return out;
}

// A textured slice: concentric rings with angular modulation and a few
// smooth bumps, masked to a disk of radius 0.40 * side. Values lie in [0, 1]
// and the texture is low-pass enough that |d f / d pixel| <= 1, which the
// procedural recipes rely on when declaring their velocity bounds.
//
// Everything here is deliberately band-limited: the value range is enforced
// with a smooth tanh squeeze instead of a hard clamp, and the disk mask
// fades out over a quintic taper instead of a sharp rim. Hard edges would
// put content past the grid Nyquist and cap any projector round trip near
// 31 dB, which would make the 46 dB noise-calibration target unreachable on
// this texture.
template <typename T>
Mat<T> rings_slice(int side, std::uint64_t seed) {
  if (side < 2) throw ValidationError("rings_slice: side must be >= 2");
  Rng rng(seed);
  const double c0 = (side - 1) / 2.0;
  const double content_radius = 0.40 * side;
  const double taper = std::max(2.0, 5.0 * side / 64.0);
  const double ring_freq = rng.uniform(5.0, 8.0);
  const double ring_phase = rng.uniform(0.0, 2 * kPi);
  const int lobes = 2 + static_cast<int>(rng.uniform_int(3));
  const double lobe_phase = rng.uniform(0.0, 2 * kPi);

  struct Bump {
    double cy, cx, sigma, amp;
  };
  std::vector<Bump> bumps(10);
  for (auto& b : bumps) {
    const double ang = rng.uniform(0.0, 2 * kPi);
    const double rad = rng.uniform(0.0, 0.7 * content_radius);
    b.cy = c0 + rad * std::sin(ang);
    b.cx = c0 + rad * std::cos(ang);
    b.sigma = rng.uniform(0.06, 0.12) * side;
    b.amp = rng.uniform(-0.22, 0.22);
  }

  Mat<T> out(side, side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double dy = r - c0, dx = c - c0;
      const double rad = std::sqrt(dy * dy + dx * dx);
      const double phi = std::atan2(dy, dx);
      double v = 0.45 +
                 0.28 * std::sin(2 * kPi * ring_freq * rad / side + ring_phase) *
                     (0.75 + 0.25 * std::sin(lobes * phi + lobe_phase));
      for (const auto& b : bumps) {
        const double by = r - b.cy, bx = c - b.cx;
        v += b.amp * std::exp(-(by * by + bx * bx) / (2 * b.sigma * b.sigma));
      }
      // Smooth squeeze into (0.05, 0.95); derivative <= 1 everywhere, so the
      // gradient bound of the raw texture survives.
      v = 0.5 + 0.45 * std::tanh((v - 0.5) / 0.45);
      // Quintic fade to zero at the content radius, entirely inside it.
      double mask;
      if (rad <= content_radius - taper) {
        mask = 1.0;
      } else if (rad >= content_radius) {
        mask = 0.0;
      } else {
        const double s = (rad - content_radius + taper) / taper;
        mask = 1.0 - (6.0 * s * s - 15.0 * s + 10.0) * s * s * s;
      }
      out(r, c) = static_cast<T>(v * mask);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Vertical warp model.
//
// The displacement field lives on `grid_rows` equally spaced control rows
// (control row n sits at pixel row n * side / grid_rows) and is
//   delta(n, t) = -amplitude[t] * sin(3 pi n / grid_rows),
// affine between control rows and clamped to the last control value below
// it. Frames are produced by forward row splatting: row r of the base frame
// moves, as a whole, to r + delta and its mass is shared linearly between
// the two surrounding integer rows. Deposits falling outside the frame are
// clamped into the edge rows so total mass is conserved exactly.

template <typename T>
struct WarpRecipe {
  Mat<T> base;
  int grid_rows = 8;
  std::vector<double> amplitude;  // one entry per frame, pixels

  static WarpRecipe ramp(Mat<T> base_frame, int frames, double max_amplitude,
                         int grid = 8) {
    if (frames < 1)
      throw ValidationError("WarpRecipe::ramp: need at least one frame");
    WarpRecipe r;
    r.base = std::move(base_frame);
    r.grid_rows = grid;
    r.amplitude.resize(frames);
    for (int t = 0; t < frames; ++t)
      r.amplitude[t] =
          frames == 1 ? 0.0 : max_amplitude * t / double(frames - 1);
    return r;
  }
};

template <typename T>
void validate_warp_recipe(const WarpRecipe<T>& recipe) {
  validate_frame(recipe.base, "warp recipe base");
  const int side = static_cast<int>(recipe.base.rows());
  if (recipe.grid_rows < 2)
    throw ValidationError("warp recipe: need at least 2 control rows");
  if (side % recipe.grid_rows != 0)
    throw ValidationError("warp recipe: side " + std::to_string(side) +
                          " is not divisible by grid_rows " +
                          std::to_string(recipe.grid_rows));
  if (recipe.amplitude.empty())
    throw ValidationError("warp recipe: no amplitude entries");
  if (recipe.amplitude.front() != 0.0)
    throw ValidationError(
        "warp recipe: amplitude must start at 0 so frame 0 is the base");
  for (double a : recipe.amplitude)
    if (!(a >= 0.0) || !std::isfinite(a))
      throw ValidationError("warp recipe: amplitudes must be finite and >= 0");
}

// Displacement at an arbitrary (possibly fractional) pixel row for frame t:
// exact closed form at control rows, affine in between.
template <typename T>
double warp_displacement(const WarpRecipe<T>& recipe, int t, double row) {
  const int side = static_cast<int>(recipe.base.rows());
  const int N = recipe.grid_rows;
  const double band = double(side) / N;
  const double amp = recipe.amplitude[t];
  auto node = [&](int n) { return -amp * std::sin(3.0 * kPi * n / N); };
  const double g = row / band;
  int n = static_cast<int>(std::floor(g));
  if (n >= N - 1) return node(N - 1);
  if (n < 0) return node(0);
  const double frac = g - n;
  return node(n) * (1.0 - frac) + node(n + 1) * frac;
}

template <typename T>
DynamicObject<T> warp_sequence(const WarpRecipe<T>& recipe) {
  validate_warp_recipe(recipe);
  const int side = static_cast<int>(recipe.base.rows());
  DynamicObject<T> out;
  out.provenance = "warp_sequence(grid_rows=" +
                   std::to_string(recipe.grid_rows) + ")";
  out.frames.reserve(recipe.amplitude.size());
  for (std::size_t t = 0; t < recipe.amplitude.size(); ++t) {
    Mat<T> frame = Mat<T>::Zero(side, side);
    for (int r = 0; r < side; ++r) {
      const double target =
          r + warp_displacement(recipe, static_cast<int>(t), r);
      const double tf = std::floor(target);
      int k0 = static_cast<int>(tf);
      T w = static_cast<T>(target - tf);
      // Clamp out-of-frame deposits into the edge rows.
      if (k0 < 0) { k0 = 0; w = T(0); }
      if (k0 >= side - 1) { k0 = side - 1; w = T(0); }
      frame.row(k0) += recipe.base.row(r) * (T(1) - w);
      if (w != T(0)) frame.row(k0 + 1) += recipe.base.row(r) * w;
    }
    out.frames.push_back(std::move(frame));
  }
  T peak = T(0);
  for (const auto& f : out.frames) peak = std::max(peak, f.maxCoeff());
  out.normalization = peak > T(0) ? peak : T(1);
  return out;
}

// ---------------------------------------------------------------------------
// Procedural dynamic phantoms.

template <typename T>
struct ProceduralPhantom {
  DynamicObject<T> object;
  // Declared upper bound on mean |f_{t+1} - f_t| per pixel, derived from the
  // recipe's sampled motion parameters. Tests check generated sequences
  // against it.
  double velocity_bound = 0;
};

namespace detail {

// Mean absolute inter-frame change of an anti-aliased shape moving at most
// `speed` pixels per frame: the indicator changes only in a band of width
// (speed + 1) around the boundary (the +1 absorbs anti-aliasing), so the
// mean is bounded by value * perimeter * (speed + 1) / side^2.
inline double moving_shape_bound(double value, double perimeter, double speed,
                                 int side) {
  return value * perimeter * (speed + 1.0) / (double(side) * side);
}

}  // namespace detail

template <typename T>
ProceduralPhantom<T> ellipses_phantom(int side, int frames,
                                      std::uint64_t seed) {
  Rng rng(seed);
  const double c0 = (side - 1) / 2.0;
  struct Ell {
    double cy0, cx0, orbit, omega, phase, a, b, pulse, tilt, value;
    double vy, vx;  // drift per frame
  };
  const int count = 3 + static_cast<int>(rng.uniform_int(3));
  std::vector<Ell> ells(count);
  for (int k = 0; k < count; ++k) {
    auto& e = ells[k];
    const double ang = rng.uniform(0.0, 2 * kPi);
    const double rad = rng.uniform(0.0, 0.20 * side);
    e.cy0 = c0 + rad * std::sin(ang);
    e.cx0 = c0 + rad * std::cos(ang);
    e.orbit = rng.uniform(0.02, 0.06) * side;
    e.omega = rng.uniform(0.5, 1.0) * 2 * kPi / std::max(1, frames - 1);
    e.phase = rng.uniform(0.0, 2 * kPi);
    e.a = rng.uniform(0.06, 0.14) * side;
    e.b = rng.uniform(0.06, 0.14) * side;
    e.pulse = rng.uniform(0.0, 0.15);
    e.tilt = rng.uniform(0.0, kPi);
    e.value = rng.uniform(0.3, 0.55);
    e.vy = e.vx = 0;
  }
  // Make the first two ellipses drift toward each other's start so they
  // overlap in the second half of the sequence (a merge event).
  if (count >= 2 && frames > 1) {
    ells[0].vy = (ells[1].cy0 - ells[0].cy0) * 0.6 / (frames - 1);
    ells[0].vx = (ells[1].cx0 - ells[0].cx0) * 0.6 / (frames - 1);
    ells[1].vy = -ells[0].vy;
    ells[1].vx = -ells[0].vx;
  }

  const int ss = 4;
  ProceduralPhantom<T> out;
  out.object.provenance = "procedural(ellipses, seed=" + std::to_string(seed) +
                          ")";
  double bound = 0;
  for (const auto& e : ells) {
    const double orbit_speed = e.orbit * e.omega;
    const double drift_speed = std::hypot(e.vy, e.vx);
    const double pulse_speed = frames > 1 ? std::max(e.a, e.b) * e.pulse * 2 *
                                                kPi / (frames - 1)
                                          : 0.0;
    const double speed = orbit_speed + drift_speed + pulse_speed;
    const double perimeter = 2 * kPi * std::max(e.a, e.b) * 1.2;
    bound += detail::moving_shape_bound(e.value, perimeter, speed, side);
  }
  out.velocity_bound = 1.5 * bound;

  for (int t = 0; t < frames; ++t) {
    Mat<T> frame = Mat<T>::Zero(side, side);
    for (const auto& e : ells) {
      const double th = e.omega * t + e.phase;
      const double cy = e.cy0 + e.vy * t + e.orbit * std::sin(th);
      const double cx = e.cx0 + e.vx * t + e.orbit * std::cos(th);
      const double grow =
          1.0 + e.pulse * std::sin(2 * kPi * t / std::max(1, frames - 1));
      const double a = e.a * grow, b = e.b * grow;
      const double ct = std::cos(e.tilt), st = std::sin(e.tilt);
      const int r_lo = std::max(0, int(cy - std::max(a, b)) - 2);
      const int r_hi = std::min(side - 1, int(cy + std::max(a, b)) + 2);
      const int c_lo = std::max(0, int(cx - std::max(a, b)) - 2);
      const int c_hi = std::min(side - 1, int(cx + std::max(a, b)) + 2);
      for (int r = r_lo; r <= r_hi; ++r)
        for (int c = c_lo; c <= c_hi; ++c) {
          int hits = 0;
          for (int i = 0; i < ss; ++i)
            for (int j = 0; j < ss; ++j) {
              const double sy = r - 0.5 + (i + 0.5) / ss - cy;
              const double sx = c - 0.5 + (j + 0.5) / ss - cx;
              const double u = (sx * ct + sy * st) / a;
              const double v = (-sx * st + sy * ct) / b;
              if (u * u + v * v <= 1.0) ++hits;
            }
          if (hits)
            frame(r, c) += static_cast<T>(e.value * hits / double(ss * ss));
        }
    }
    frame = frame.cwiseMin(T(1)).cwiseMax(T(0));
    out.object.frames.push_back(std::move(frame));
  }
  T peak = T(0);
  for (const auto& f : out.object.frames)
    peak = std::max(peak, f.maxCoeff());
  out.object.normalization = peak > T(0) ? peak : T(1);
  return out;
}

template <typename T>
ProceduralPhantom<T> porous_phantom(int side, int frames,
                                    std::uint64_t seed) {
  Rng rng(seed);
  const double c0 = (side - 1) / 2.0;
  const double content_radius = 0.38 * side;
  // Solid disk with smooth holes punched by random bumps.
  Mat<double> holes = Mat<double>::Zero(side, side);
  const int nb = 24;
  for (int k = 0; k < nb; ++k) {
    const double ang = rng.uniform(0.0, 2 * kPi);
    const double rad = rng.uniform(0.0, 0.85 * content_radius);
    const double cy = c0 + rad * std::sin(ang);
    const double cx = c0 + rad * std::cos(ang);
    const double sg = rng.uniform(0.035, 0.07) * side;
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c) {
        const double dy = r - cy, dx = c - cx;
        holes(r, c) += std::exp(-(dy * dy + dx * dx) / (2 * sg * sg));
      }
  }
  const Mat<T> mask = disk_phantom<T>(side, content_radius);
  Mat<double> base(side, side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double v = std::clamp(0.85 - 0.75 * holes(r, c), 0.0, 1.0);
      base(r, c) = v * static_cast<double>(mask(r, c));
    }

  // Compression: rows squash toward the center line, density rises to keep
  // mass, then clamped to [0, 1].
  const double max_squash = 0.18;
  ProceduralPhantom<T> out;
  out.object.provenance = "procedural(porous, seed=" + std::to_string(seed) +
                          ")";
  const double max_shift =
      frames > 1 ? max_squash * content_radius / (frames - 1) : 0.0;
  // Rows move at most max_shift px/frame; texture gradient is <= 1 per px by
  // construction and density rescaling adds max_squash/(frames-1) per frame.
  out.velocity_bound =
      2.0 * (max_shift * 0.5 +
             (frames > 1 ? max_squash / (frames - 1) : 0.0)) + 1e-3;
  for (int t = 0; t < frames; ++t) {
    const double q = 1.0 - max_squash * (frames > 1 ? t / double(frames - 1)
                                                    : 0.0);
    Mat<T> frame(side, side);
    for (int r = 0; r < side; ++r) {
      // Inverse map: output row r samples input row c0 + (r - c0)/q.
      const double src = c0 + (r - c0) / q;
      const double sf = std::floor(src);
      const int k0 = static_cast<int>(sf);
      const double w = src - sf;
      for (int c = 0; c < side; ++c) {
        double v = 0;
        if (k0 >= 0 && k0 < side) v += base(k0, c) * (1 - w);
        if (k0 + 1 >= 0 && k0 + 1 < side) v += base(k0 + 1, c) * w;
        frame(r, c) = static_cast<T>(std::clamp(v / q, 0.0, 1.0));
      }
    }
    out.object.frames.push_back(std::move(frame));
  }
  T peak = T(0);
  for (const auto& f : out.object.frames)
    peak = std::max(peak, f.maxCoeff());
  out.object.normalization = peak > T(0) ? peak : T(1);
  return out;
}

// A gallery of unrelated static slices. Useful as restorer training data,
// not as a dynamic scene; the velocity bound is the trivial one.
template <typename T>
ProceduralPhantom<T> gallery_phantom(int side, int frames,
                                     std::uint64_t seed) {
  ProceduralPhantom<T> out;
  out.object.provenance = "procedural(gallery, seed=" + std::to_string(seed) +
                          ")";
  out.velocity_bound = 2.0;
  for (int t = 0; t < frames; ++t)
    out.object.frames.push_back(rings_slice<T>(side, seed + t));
  T peak = T(0);
  for (const auto& f : out.object.frames)
    peak = std::max(peak, f.maxCoeff());
  out.object.normalization = peak > T(0) ? peak : T(1);
  return out;
}

template <typename T>
ProceduralPhantom<T> warped_rings_phantom(int side, int frames,
                                          std::uint64_t seed,
                                          double max_amplitude = -1,
                                          int grid_rows = 8) {
  if (max_amplitude < 0) max_amplitude = side / 16.0;
  auto recipe =
      WarpRecipe<T>::ramp(rings_slice<T>(side, seed), frames, max_amplitude,
                          grid_rows);
  ProceduralPhantom<T> out;
  out.object = warp_sequence(recipe);
  // Row compression concentrates mass, so warped frames can slightly exceed
  // the base frame's range; pin the [0, 1] contract back down.
  for (auto& f : out.object.frames) f = f.cwiseMin(T(1)).cwiseMax(T(0));
  T peak = T(0);
  for (const auto& f : out.object.frames) peak = std::max(peak, f.maxCoeff());
  out.object.normalization = peak > T(0) ? peak : T(1);
  out.object.provenance = "procedural(warped-rings, seed=" +
                          std::to_string(seed) + ")";
  // Per-frame displacement step, times the texture's gradient bound of 1.
  const double step =
      frames > 1 ? max_amplitude / double(frames - 1) : 0.0;
  out.velocity_bound = step + 1e-3;
  return out;
}

template <typename T>
ProceduralPhantom<T> procedural_phantom(const std::string& recipe, int side,
                                        int frames, std::uint64_t seed) {
  if (side < 2) throw ValidationError("procedural_phantom: side must be >= 2");
  if (frames < 1)
    throw ValidationError("procedural_phantom: need at least one frame");
  if (recipe == "ellipses") return ellipses_phantom<T>(side, frames, seed);
  if (recipe == "porous") return porous_phantom<T>(side, frames, seed);
  if (recipe == "gallery") return gallery_phantom<T>(side, frames, seed);
  if (recipe == "warped-rings")
    return warped_rings_phantom<T>(side, frames, seed);
  throw ValidationError(
      "procedural_phantom: unknown recipe '" + recipe +
      "' (known: ellipses, porous, gallery, warped-rings)");
}

// ---------------------------------------------------------------------------
// Ingestion: load a slice stack from a container file and resample each
// slice to the requested side. Integer downsampling uses box averaging
// (mean-exact); other ratios use bilinear sampling at pixel centers. Either
// way the mean, and hence the mass, is preserved to within a couple percent
// for smooth slices.

template <typename T>
Mat<T> resize_frame(const Mat<T>& in, int side) {
  const int j0 = static_cast<int>(in.rows());
  if (in.rows() != in.cols())
    throw ValidationError("resize_frame: input must be square");
  if (side < 2) throw ValidationError("resize_frame: side must be >= 2");
  if (j0 == side) return in;
  Mat<T> out(side, side);
  if (j0 > side && j0 % side == 0) {
    const int f = j0 / side;
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c)
        out(r, c) = in.block(r * f, c * f, f, f).mean();
    return out;
  }
  const double scale = double(j0) / side;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      double sy = (r + 0.5) * scale - 0.5;
      double sx = (c + 0.5) * scale - 0.5;
      sy = std::clamp(sy, 0.0, double(j0 - 1));
      sx = std::clamp(sx, 0.0, double(j0 - 1));
      const int y0 = std::min(int(sy), j0 - 2), x0 = std::min(int(sx), j0 - 2);
      const double wy = sy - y0, wx = sx - x0;
      out(r, c) = static_cast<T>(
          (1 - wy) * ((1 - wx) * in(y0, x0) + wx * in(y0, x0 + 1)) +
          wy * ((1 - wx) * in(y0 + 1, x0) + wx * in(y0 + 1, x0 + 1)));
    }
  return out;
}

template <typename T>
DynamicObject<T> ingest_volume(const std::string& path, int side) {
  ArrayStore store = ArrayStore::load(path);
  if (!store.has("frames"))
    throw IoError("ingest_volume: '" + path + "' has no 'frames' array");
  std::vector<Mat<T>> raw;
  const auto& arr = store.get("frames");
  if (arr.dtype == DType::f32)
    for (auto& f : store.get_frames<float>("frames"))
      raw.push_back(f.template cast<T>());
  else if (arr.dtype == DType::f64)
    for (auto& f : store.get_frames<double>("frames"))
      raw.push_back(f.template cast<T>());
  else
    throw IoError("ingest_volume: 'frames' must be f32 or f64");

  DynamicObject<T> out;
  out.provenance = "ingest(" + path + ")";
  for (const auto& f : raw) {
    validate_frame(f, "ingest_volume");
    out.frames.push_back(resize_frame(f, side));
  }
  T peak = T(0);
  for (const auto& f : out.frames) peak = std::max(peak, f.maxCoeff());
  out.normalization = peak > T(0) ? peak : T(1);
  if (store.meta.contains("pixel_spacing"))
    out.pixel_spacing =
        static_cast<T>(store.meta["pixel_spacing"].get<double>()) *
        static_cast<T>(raw.front().rows()) / static_cast<T>(side);
  validate_object(out, "ingest_volume");
  return out;
}

// Container round trips for objects and sinograms used by every pipeline
// stage and the CLI.

template <typename T>
void save_object(const DynamicObject<T>& obj, const std::string& path) {
  validate_object(obj, "save_object");
  ArrayStore store;
  store.meta["kind"] = "dynamic_object";
  store.meta["pixel_spacing"] = static_cast<double>(obj.pixel_spacing);
  store.meta["normalization"] = static_cast<double>(obj.normalization);
  store.meta["provenance"] = obj.provenance;
  store.put_frames("frames", obj.frames);
  store.save(path);
}

template <typename T>
DynamicObject<T> load_object(const std::string& path) {
  ArrayStore store = ArrayStore::load(path);
  if (!store.meta.contains("kind") || store.meta["kind"] != "dynamic_object")
    throw IoError("load_object: '" + path + "' is not an object container");
  DynamicObject<T> obj;
  obj.frames = store.get_frames<T>("frames");
  obj.pixel_spacing = static_cast<T>(store.meta["pixel_spacing"].get<double>());
  obj.normalization =
      static_cast<T>(store.meta["normalization"].get<double>());
  obj.provenance = store.meta.value("provenance", "");
  validate_object(obj, "load_object");
  return obj;
}

template <typename T>
void save_sinogram(const SinogramSet<T>& sinos, const std::string& path) {
  if (sinos.projections.empty())
    throw ValidationError("save_sinogram: empty sinogram set");
  ArrayStore store;
  store.meta["kind"] = "sinogram_set";
  store.meta["scheme"] = sinos.schedule.scheme;
  store.meta["distinct_views"] = sinos.schedule.distinct_views;
  store.meta["noise_sigma"] = static_cast<double>(sinos.noise_sigma);
  store.meta["bin_spacing"] =
      static_cast<double>(sinos.projections.front().bin_spacing);
  const int P = sinos.num_views();
  const int J = sinos.detector_bins();
  Mat<T> bins(P, J);
  Vec<double> angles(P), times(P);
  for (int p = 0; p < P; ++p) {
    if (sinos.projections[p].bins.size() != J)
      throw ValidationError("save_sinogram: ragged detector lengths");
    bins.row(p) = sinos.projections[p].bins.transpose();
    angles[p] = static_cast<double>(sinos.projections[p].angle);
    times[p] = sinos.schedule.times[p];
  }
  store.put_matrix("bins", bins);
  store.put_vector("angles", angles);
  store.put_vector("times", times);
  store.save(path);
}

template <typename T>
SinogramSet<T> load_sinogram(const std::string& path) {
  ArrayStore store = ArrayStore::load(path);
  if (!store.meta.contains("kind") || store.meta["kind"] != "sinogram_set")
    throw IoError("load_sinogram: '" + path + "' is not a sinogram container");
  SinogramSet<T> out;
  const Mat<T> bins = store.get_matrix<T>("bins");
  const Vec<double> angles = store.get_vector<double>("angles");
  const Vec<double> times = store.get_vector<double>("times");
  if (angles.size() != bins.rows() || times.size() != bins.rows())
    throw IoError("load_sinogram: angle/time/bins row counts disagree");
  const double spacing = store.meta["bin_spacing"].get<double>();
  out.noise_sigma = static_cast<T>(store.meta["noise_sigma"].get<double>());
  out.schedule.scheme = store.meta.value("scheme", "unknown");
  out.schedule.distinct_views = store.meta.value("distinct_views", 0);
  for (Eigen::Index p = 0; p < bins.rows(); ++p) {
    Projection<T> proj;
    proj.bins = bins.row(p).transpose();
    proj.angle = static_cast<T>(angles[p]);
    proj.bin_spacing = static_cast<T>(spacing);
    proj.time_index = static_cast<int>(p);
    out.projections.push_back(std::move(proj));
    out.schedule.angles.push_back(angles[p]);
    out.schedule.times.push_back(times[p]);
  }
  return out;
}

}  // namespace dyntomo
