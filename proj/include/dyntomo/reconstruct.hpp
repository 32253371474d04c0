// ADMM solver for dynamic reconstruction with a neural-field primal.
//
// The variational problem couples three terms over P time frames:
//   sum_t ||g_t - R_t ftilde_t||^2        data fidelity per view
//   xi * rho_tau(ftilde)                  temporal second-difference energy
//   lambda * sum_t rho(fbar_t)            restoration-engine penalty
// with the consensus constraint ftilde = fbar handled by scaled ADMM. Each
// outer iteration runs a fixed number of Adam steps on the network behind
// ftilde (minibatched over views, resampled with replacement), updates fbar
// either by one fixed-point application of the denoiser per frame or by an
// explicit inner gradient descent, and takes a dual ascent step. Setting
// lambda = 0 makes fbar and the dual inert and the pipeline degenerates to
// the temporal-only variant.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dyntomo/acquire.hpp"
#include "dyntomo/container.hpp"
#include "dyntomo/metrics.hpp"
#include "dyntomo/neural_field.hpp"
#include "dyntomo/red.hpp"

namespace dyntomo {

// ---------------------------------------------------------------------------
// Configuration and solver state

struct SolverConfig {
  double lambda = 0.0;  // restoration-prior weight, >= 0
  double xi = 0.0;      // temporal smoothness weight, >= 0
  double beta = 1.0;    // augmented-Lagrangian weight
  int outer_iters = 200;
  int inner_steps = 20;    // network updates per outer iteration
  double inner_lr = 5e-3;  // Adam rate for the inner updates
  int minibatch = 0;       // views per inner step; 0 means max(1, P/8)
  std::uint64_t seed = 0;

  // network architecture behind ftilde
  int nf_hidden_layers = 7;
  int nf_width = 64;
  int nf_freqs = 10;

  // stop when the relative objective change over the trailing window drops
  // below early_exit_rel (<= 0 disables); checkpoint cadence in outer
  // iterations (0 = never)
  double early_exit_rel = 1e-5;
  int early_exit_window = 10;
  int checkpoint_every = 0;
};

inline int resolved_minibatch(const SolverConfig& c, int num_views) {
  return c.minibatch > 0 ? c.minibatch : std::max(1, num_views / 8);
}

inline void validate_solver_config(const SolverConfig& c, int num_views) {
  if (!std::isfinite(c.lambda) || c.lambda < 0)
    throw ValidationError("solver config: lambda must be >= 0");
  if (!std::isfinite(c.xi) || c.xi < 0)
    throw ValidationError("solver config: xi must be >= 0");
  if (!std::isfinite(c.beta) || c.beta < 0)
    throw ValidationError("solver config: beta must be >= 0");
  if (c.lambda > 0 && c.beta <= 0)
    throw ValidationError("solver config: beta must be > 0 when lambda > 0");
  if (c.outer_iters < 1)
    throw ValidationError("solver config: outer_iters must be >= 1");
  if (c.inner_steps < 0)
    throw ValidationError("solver config: inner_steps must be >= 0");
  if (!std::isfinite(c.inner_lr) || c.inner_lr <= 0)
    throw ValidationError("solver config: inner_lr must be > 0");
  if (c.minibatch < 0 || c.minibatch > num_views)
    throw ValidationError("solver config: minibatch must be in [1, P]");
  if (c.early_exit_window < 1)
    throw ValidationError("solver config: early_exit_window must be >= 1");
  if (c.checkpoint_every < 0)
    throw ValidationError("solver config: checkpoint_every must be >= 0");
}

struct IterationRecord {
  int iter = 0;             // 1-based outer iteration
  double fidelity = 0;      // full-sum data term at the iterate
  double rho_tau = 0;       // temporal penalty of the render
  double rho_red = 0;       // restoration penalty, denoiser output lagged
                            // one iterate (reuses the f-step evaluation)
  double lagrangian = 0;    // full augmented Lagrangian
  double primal_residual = 0;  // ||ftilde - fbar||_F / ||ftilde||_F
  double psnr = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0;       // wall time of this outer iteration

  double objective(const SolverConfig& c) const {
    return fidelity + c.xi * rho_tau + c.lambda * rho_red;
  }
};

template <typename T>
struct ADMMState {
  NFParams<T> nf;
  DynamicObject<T> ftilde;  // render of nf at the current iterate
  DynamicObject<T> fbar;
  std::vector<Mat<T>> dual;  // scaled dual variable, one frame per view
  int iteration = 0;
  std::vector<IterationRecord> history;
};

template <typename T>
void validate_admm_state(const ADMMState<T>& st) {
  validate_nf(st.nf);
  validate_object(st.ftilde, "admm state ftilde");
  validate_object(st.fbar, "admm state fbar");
  const int P = st.ftilde.num_frames();
  const int J = st.ftilde.side();
  if (st.fbar.num_frames() != P || st.fbar.side() != J)
    throw ValidationError("admm state: fbar shape mismatch");
  if (static_cast<int>(st.dual.size()) != P)
    throw ValidationError("admm state: dual frame count mismatch");
  for (const auto& d : st.dual)
    if (d.rows() != J || d.cols() != J)
      throw ValidationError("admm state: dual shape mismatch");
  if (static_cast<int>(st.history.size()) != st.iteration)
    throw ValidationError(
        "admm state: history length must equal completed iterations");
}

template <typename T>
void validate_sinogram_set(const SinogramSet<T>& sinos, const char* what) {
  if (sinos.projections.empty())
    throw ValidationError(std::string(what) + ": empty sinogram set");
  if (sinos.schedule.num_views() !=
      static_cast<int>(sinos.projections.size()))
    throw ValidationError(std::string(what) +
                          ": schedule and projections disagree");
  const auto bins = sinos.projections.front().bins.size();
  for (const auto& p : sinos.projections) {
    if (p.bins.size() != bins)
      throw ValidationError(std::string(what) +
                            ": projections disagree on detector size");
    if (!(p.bin_spacing > T(0)))
      throw ValidationError(std::string(what) + ": bin_spacing must be > 0");
    require_finite(Mat<T>(p.bins), what);
  }
  if (bins < 2)
    throw ValidationError(std::string(what) + ": detector must have >= 2 bins");
}

// ---------------------------------------------------------------------------
// Objective terms

// Sum over the batch of squared projection residuals of rendered frames,
// rescaled by P/|batch| to estimate the full-view sum without bias.
// Duplicate indices are legal (minibatches sample with replacement) and
// count with multiplicity.
template <typename T>
T fidelity_loss(const NFParams<T>& p, const SinogramSet<T>& sinos,
                const std::vector<int>& batch) {
  validate_sinogram_set(sinos, "fidelity_loss");
  if (batch.empty()) throw ValidationError("fidelity_loss: empty batch");
  const int P = sinos.num_views();
  const int J = sinos.detector_bins();
  std::map<int, Mat<T>> cache;
  T acc = T(0);
  for (int t : batch) {
    if (t < 0 || t >= P)
      throw ValidationError("fidelity_loss: batch index out of range");
    auto it = cache.find(t);
    if (it == cache.end())
      it = cache.emplace(t, render_frame(p, J, P, t)).first;
    const auto& meas = sinos.projections[t];
    ImageFrame<T> fr;
    fr.pixels = it->second;
    fr.pixel_spacing = meas.bin_spacing;
    const Projection<T> proj = radon_project(fr, meas.angle);
    acc += (proj.bins - meas.bins).squaredNorm();
  }
  return acc * T(P) / T(batch.size());
}

namespace detail {

// Minibatch estimate of the inner objective and its network gradient:
//   (P/B) * sum_b [ ||R ft_b - g_b||^2
//                   + (beta/2) ||ft_b + dual_b - fbar_b||^2
//                   + xi * [b interior] ||ft_{b-1} - 2 ft_b + ft_{b+1}||^2 ]
// Every term is restricted to the sampled views (the temporal term to
// second-difference triplets centered on them) and the common P/B factor
// makes each an unbiased estimate of its full sum under sampling with
// replacement.
template <typename T>
std::pair<T, NFGrads<T>> nf_inner_objective(const NFParams<T>& p,
                                            const SinogramSet<T>& sinos,
                                            const std::vector<Mat<T>>& fbar,
                                            const std::vector<Mat<T>>& dual,
                                            const SolverConfig& cfg,
                                            const std::vector<int>& batch) {
  const int P = sinos.num_views();
  const int J = sinos.detector_bins();
  const Eigen::Index JJ = static_cast<Eigen::Index>(J) * J;
  if (batch.empty())
    throw ValidationError("nf_inner_objective: empty batch");
  const T scale = T(P) / T(batch.size());

  std::map<int, int> mult;
  for (int t : batch) {
    if (t < 0 || t >= P)
      throw ValidationError("nf_inner_objective: batch index out of range");
    ++mult[t];
  }
  const bool temporal = cfg.xi > 0 && P >= 3;
  std::set<int> needed;
  for (const auto& [t, m] : mult) {
    needed.insert(t);
    if (temporal && t >= 1 && t + 1 < P) {
      needed.insert(t - 1);
      needed.insert(t + 1);
    }
  }
  std::vector<int> frames(needed.begin(), needed.end());
  std::map<int, int> slot;
  for (std::size_t i = 0; i < frames.size(); ++i)
    slot[frames[i]] = static_cast<int>(i);

  Mat<T> enc(6 * p.posenc.L, static_cast<Eigen::Index>(frames.size()) * JJ);
  for (std::size_t i = 0; i < frames.size(); ++i)
    enc.middleCols(static_cast<Eigen::Index>(i) * JJ, JJ) =
        frame_encoding<T>(J, P, frames[i], p.posenc);

  auto closure = [&](const Vec<T>& out) -> std::pair<T, Vec<T>> {
    // materialize per-frame images (pixel order is row-major)
    std::vector<Mat<T>> img(frames.size()), grad(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) {
      img[i].resize(J, J);
      for (int r = 0; r < J; ++r)
        for (int c = 0; c < J; ++c)
          img[i](r, c) =
              out(static_cast<Eigen::Index>(i) * JJ + r * Eigen::Index(J) + c);
      grad[i] = Mat<T>::Zero(J, J);
    }

    T fid = T(0), aug = T(0), tau = T(0);
    for (const auto& [t, m] : mult) {
      const int i = slot.at(t);
      const T w = T(m);
      const auto& meas = sinos.projections[t];
      ImageFrame<T> fr;
      fr.pixels = img[i];
      fr.pixel_spacing = meas.bin_spacing;
      const Projection<T> proj = radon_project(fr, meas.angle);
      const Vec<T> resid = proj.bins - meas.bins;
      fid += w * resid.squaredNorm();
      radon_backproject_add(resid, meas.angle, meas.bin_spacing, grad[i],
                            scale * T(2) * w);
      if (cfg.beta > 0) {
        const Mat<T> diff = img[i] + dual[t] - fbar[t];
        aug += w * diff.squaredNorm();
        grad[i] += (scale * T(cfg.beta) * w) * diff;
      }
      if (temporal && t >= 1 && t + 1 < P) {
        const int lo = slot.at(t - 1), hi = slot.at(t + 1);
        const Mat<T> v = img[lo] - T(2) * img[i] + img[hi];
        tau += w * v.squaredNorm();
        const Mat<T> g = (scale * T(2) * T(cfg.xi) * w) * v;
        grad[lo] += g;
        grad[i] -= T(2) * g;
        grad[hi] += g;
      }
    }
    const T loss =
        scale * (fid + T(cfg.beta) / T(2) * aug + T(cfg.xi) * tau);
    if (!std::isfinite(static_cast<double>(loss)))
      throw NumericalError(
          "inner objective is not finite: fidelity=" + std::to_string(fid) +
          " augmented=" + std::to_string(aug) +
          " temporal=" + std::to_string(tau));

    Vec<T> g(out.size());
    for (std::size_t i = 0; i < frames.size(); ++i)
      for (int r = 0; r < J; ++r)
        for (int c = 0; c < J; ++c)
          g(static_cast<Eigen::Index>(i) * JJ + r * Eigen::Index(J) + c) =
              grad[i](r, c);
    return {loss, g};
  };
  return nf_gradient_encoded(p, enc, closure);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ADMM steps

// Inner network update: inner_steps Adam steps on the minibatched objective,
// with the batch redrawn (uniformly, with replacement) every step. Optimizer
// moments start fresh on every call; the cached render is refreshed at the
// end. inner_steps = 0 leaves the state untouched.
template <typename T>
void nf_step(ADMMState<T>& state, const SinogramSet<T>& sinos,
             const SolverConfig& cfg, Rng& rng) {
  validate_sinogram_set(sinos, "nf_step");
  validate_solver_config(cfg, sinos.num_views());
  if (cfg.inner_steps == 0) return;
  const int P = sinos.num_views();
  const int J = sinos.detector_bins();
  const int B = resolved_minibatch(cfg, P);

  AdamConfig adam;
  adam.lr = cfg.inner_lr;
  AdamState<T> moments = adam_init(state.nf);
  std::vector<int> batch(B);
  for (int s = 0; s < cfg.inner_steps; ++s) {
    for (int& t : batch)
      t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(P)));
    auto [loss, grads] = detail::nf_inner_objective(
        state.nf, sinos, state.fbar.frames, state.dual, cfg, batch);
    (void)loss;
    adam_step(state.nf, grads, moments, adam);
  }
  const T spacing = state.ftilde.pixel_spacing;
  state.ftilde = render_grid(state.nf, J, P);
  state.ftilde.pixel_spacing = spacing;
}

namespace detail {

// Fixed-point f-step shared by the public entry point and the solver
// driver. Returns the restoration penalty of the new fbar evaluated with
// the denoiser outputs computed here (so the log costs no extra network
// sweeps; the denoiser sees the previous iterate).
template <typename T, typename Den>
T fbar_fixed_point_logged(ADMMState<T>& state, Den&& denoise,
                          const SolverConfig& cfg) {
  const int P = state.ftilde.num_frames();
  if (cfg.lambda == 0) {
    for (int t = 0; t < P; ++t)
      state.fbar.frames[t] = state.ftilde.frames[t] + state.dual[t];
    return T(0);
  }
  const T denom = T(cfg.lambda) + T(cfg.beta);
  const T a = T(cfg.lambda) / denom;
  const T b = T(cfg.beta) / denom;
  T rho = T(0);
  for (int t = 0; t < P; ++t) {
    const Mat<T> restored = denoise(state.fbar.frames[t]);
    state.fbar.frames[t] =
        a * restored + b * (state.ftilde.frames[t] + state.dual[t]);
    rho += (state.fbar.frames[t].array() *
            (state.fbar.frames[t] - restored).array())
               .sum();
  }
  return rho;
}

}  // namespace detail

// One fixed-point sweep: each frame becomes the convex combination
//   fbar_t = lambda/(lambda+beta) * D(fbar_t) + beta/(lambda+beta) *
//            (ftilde_t + dual_t)
// warm-started from the previous outer iterate. lambda = 0 short-circuits
// to ftilde + dual without touching the denoiser.
template <typename T, typename Den>
  requires FrameDenoiser<Den, T>
void fbar_step_fixed_point(ADMMState<T>& state, Den&& denoise,
                           const SolverConfig& cfg) {
  if (cfg.lambda + cfg.beta <= 0 && cfg.lambda > 0)
    throw ValidationError("fbar_step_fixed_point: lambda + beta must be > 0");
  detail::fbar_fixed_point_logged(state, std::forward<Den>(denoise), cfg);
}

template <typename T>
void fbar_step_fixed_point(ADMMState<T>& state,
                           const RestorationModel<T>& model,
                           const SolverConfig& cfg) {
  fbar_step_fixed_point(
      state, [&](const Mat<T>& f) { return restore(model, f); }, cfg);
}

// Explicit subproblem solve, kept for validating the fixed-point step:
// per-frame gradient descent on
//   lambda * rho(f) + (beta/2) ||(ftilde_t + dual_t) - f||^2
// using the symmetric-denoiser gradient 2*lambda*(f - D(f)) + beta*(f - c),
// until the gradient norm falls under tol or max_steps is hit. Ten
// consecutive objective increases abort, since with an ill-behaved denoiser
// the surrogate direction need not descend.
template <typename T, typename Den>
  requires FrameDenoiser<Den, T>
void fbar_step_exact(ADMMState<T>& state, Den&& denoise,
                     const SolverConfig& cfg, T tol = T(1e-8),
                     int max_steps = 100) {
  const int P = state.ftilde.num_frames();
  const T lambda = T(cfg.lambda), beta = T(cfg.beta);
  if (lambda > 0 && beta <= 0)
    throw ValidationError("fbar_step_exact: beta must be > 0 when lambda > 0");
  for (int t = 0; t < P; ++t) {
    const Mat<T> c = state.ftilde.frames[t] + state.dual[t];
    if (lambda == 0) {
      state.fbar.frames[t] = c;
      continue;
    }
    Mat<T> f = state.fbar.frames[t];
    const T lr = T(1) / (T(2) * lambda + beta);
    T prev = std::numeric_limits<T>::infinity();
    int rises = 0;
    for (int s = 0; s < max_steps; ++s) {
      const Mat<T> rg = red_gradient(f, denoise);
      const Mat<T> grad = T(2) * lambda * rg + beta * (f - c);
      if (grad.norm() < tol) break;
      const T obj = lambda * (f.array() * rg.array()).sum() +
                    beta / T(2) * (c - f).squaredNorm();
      if (!std::isfinite(static_cast<double>(obj)) || obj > prev) {
        if (++rises >= 10)
          throw NumericalError(
              "fbar_step_exact: objective rose 10 consecutive steps on "
              "frame " +
              std::to_string(t) + " (last value " + std::to_string(obj) +
              ")");
      } else {
        rises = 0;
      }
      prev = obj;
      f -= lr * grad;
    }
    state.fbar.frames[t] = f;
  }
}

// Dual ascent: dual_t += ftilde_t - fbar_t.
template <typename T>
void dual_step(ADMMState<T>& state) {
  const int P = state.ftilde.num_frames();
  for (int t = 0; t < P; ++t)
    state.dual[t] += state.ftilde.frames[t] - state.fbar.frames[t];
}

// ---------------------------------------------------------------------------
// Checkpointing

template <typename T>
struct SolverCheckpoint {
  ADMMState<T> state;
  std::string rng_state;  // minibatch stream, for bit-exact resume
};

template <typename T>
using CheckpointSink = std::function<void(const ADMMState<T>&, const Rng&)>;

template <typename T>
void save_solver_state(ArrayStore& store, const ADMMState<T>& st,
                       const Rng& rng, const std::string& prefix = "solver") {
  validate_admm_state(st);
  save_nf(store, st.nf, prefix + ".nf");
  store.put_frames(prefix + ".fbar", st.fbar.frames);
  store.put_frames(prefix + ".dual", st.dual);
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& r : st.history) {
    nlohmann::json row = {{"iter", r.iter},
                          {"fidelity", r.fidelity},
                          {"rho_tau", r.rho_tau},
                          {"rho_red", r.rho_red},
                          {"lagrangian", r.lagrangian},
                          {"primal_residual", r.primal_residual},
                          {"seconds", r.seconds}};
    if (std::isfinite(r.psnr)) row["psnr"] = r.psnr;
    hist.push_back(row);
  }
  store.meta[prefix] = {{"iteration", st.iteration},
                        {"pixel_spacing",
                         static_cast<double>(st.ftilde.pixel_spacing)},
                        {"rng", rng.save_state()},
                        {"history", hist}};
}

template <typename T>
SolverCheckpoint<T> load_solver_state(const ArrayStore& store,
                                      const std::string& prefix = "solver") {
  if (!store.meta.contains(prefix))
    throw IoError("load_solver_state: no '" + prefix + "' metadata block");
  const auto& meta = store.meta.at(prefix);
  SolverCheckpoint<T> cp;
  auto& st = cp.state;
  st.nf = load_nf<T>(store, prefix + ".nf");
  st.fbar.frames = store.get_frames<T>(prefix + ".fbar");
  st.dual = store.get_frames<T>(prefix + ".dual");
  try {
    st.iteration = meta.at("iteration").get<int>();
    cp.rng_state = meta.at("rng").get<std::string>();
    const double spacing = meta.at("pixel_spacing").get<double>();
    st.fbar.pixel_spacing = static_cast<T>(spacing);
    for (const auto& row : meta.at("history")) {
      IterationRecord r;
      r.iter = row.at("iter").get<int>();
      r.fidelity = row.at("fidelity").get<double>();
      r.rho_tau = row.at("rho_tau").get<double>();
      r.rho_red = row.at("rho_red").get<double>();
      r.lagrangian = row.at("lagrangian").get<double>();
      r.primal_residual = row.at("primal_residual").get<double>();
      r.seconds = row.at("seconds").get<double>();
      if (row.contains("psnr")) r.psnr = row.at("psnr").get<double>();
      st.history.push_back(r);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_solver_state: malformed metadata: ") +
                  e.what());
  }
  // the render is derived state: rebuild it from the network
  const int P = st.fbar.num_frames();
  const int J = st.fbar.side();
  st.ftilde = render_grid(st.nf, J, P);
  st.ftilde.pixel_spacing = st.fbar.pixel_spacing;
  validate_admm_state(st);
  return cp;
}

// ---------------------------------------------------------------------------
// Solver driver

template <typename T>
struct ReconstructionResult {
  DynamicObject<T> object;  // render of the final network
  ADMMState<T> state;
};

namespace detail {

template <typename T>
double history_psnr(const DynamicObject<T>& est, const DynamicObject<T>& gt) {
  double acc = 0;
  for (int t = 0; t < est.num_frames(); ++t)
    acc += psnr_db(est.frames[t], gt.frames[t],
                   static_cast<double>(gt.normalization));
  return acc / est.num_frames();
}

// Full-sum data term of an already rendered stack (the render is
// bit-identical to what fidelity_loss would recompute from the network, so
// the per-iteration log can skip a second render sweep).
template <typename T>
double rendered_fidelity(const DynamicObject<T>& est,
                         const SinogramSet<T>& sinos) {
  double acc = 0;
  for (int t = 0; t < sinos.num_views(); ++t) {
    const auto& meas = sinos.projections[t];
    ImageFrame<T> fr;
    fr.pixels = est.frames[t];
    fr.pixel_spacing = meas.bin_spacing;
    const Projection<T> proj = radon_project(fr, meas.angle);
    acc += static_cast<double>((proj.bins - meas.bins).squaredNorm());
  }
  return acc;
}

template <typename T, typename Den>
ReconstructionResult<T> admm_reconstruct(
    const SinogramSet<T>& sinos, Den&& denoise, const SolverConfig& cfg,
    const DynamicObject<T>* ground_truth, const CheckpointSink<T>& sink,
    const SolverCheckpoint<T>* resume) {
  validate_sinogram_set(sinos, "reconstruct");
  const int P = sinos.num_views();
  const int J = sinos.detector_bins();
  validate_solver_config(cfg, P);
  if (ground_truth &&
      (ground_truth->num_frames() != P || ground_truth->side() != J))
    throw ValidationError("reconstruct: ground truth shape mismatch");
  const T spacing = sinos.projections.front().bin_spacing;

  ADMMState<T> st;
  Rng rng(cfg.seed ^ 0x6a09e667f3bcc908ULL);  // minibatch stream
  if (resume) {
    st = resume->state;
    validate_admm_state(st);
    if (st.ftilde.num_frames() != P || st.ftilde.side() != J)
      throw ValidationError("reconstruct: checkpoint shape mismatch");
    rng.load_state(resume->rng_state);
  } else {
    st.nf = nf_init<T>(PosEncConfig{cfg.nf_freqs}, cfg.nf_hidden_layers,
                       cfg.nf_width, cfg.seed);
    st.ftilde = render_grid(st.nf, J, P);
    st.ftilde.pixel_spacing = spacing;
    st.fbar = st.ftilde;
    st.dual.assign(P, Mat<T>::Zero(J, J));
  }

  ADMMState<T> last_good = st;
  std::string last_good_rng = rng.save_state();
  for (int i = st.iteration; i < cfg.outer_iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      nf_step(st, sinos, cfg, rng);
      IterationRecord rec;
      rec.iter = i + 1;
      rec.rho_red = static_cast<double>(
          fbar_fixed_point_logged(st, denoise, cfg));
      for (int t = 0; t < P; ++t)
        if (!st.fbar.frames[t].allFinite())
          throw NumericalError(
              "reconstruct: restoration output is not finite at iteration " +
              std::to_string(i + 1) + ", frame " + std::to_string(t));
      dual_step(st);

      // full-sum diagnostics at the new iterate
      rec.fidelity = rendered_fidelity(st.ftilde, sinos);
      rec.rho_tau = static_cast<double>(temporal_penalty(st.ftilde));
      double gap = 0, dual_sq = 0, tilde_sq = 0, prim_sq = 0;
      for (int t = 0; t < P; ++t) {
        const Mat<T> d = st.ftilde.frames[t] - st.fbar.frames[t];
        prim_sq += static_cast<double>(d.squaredNorm());
        gap += static_cast<double>((d + st.dual[t]).squaredNorm());
        dual_sq += static_cast<double>(st.dual[t].squaredNorm());
        tilde_sq += static_cast<double>(st.ftilde.frames[t].squaredNorm());
      }
      rec.lagrangian = rec.fidelity + cfg.xi * rec.rho_tau +
                       cfg.lambda * rec.rho_red +
                       cfg.beta / 2 * (gap - dual_sq);
      rec.primal_residual =
          std::sqrt(prim_sq) / std::max(std::sqrt(tilde_sq), 1e-300);
      if (ground_truth) rec.psnr = history_psnr(st.ftilde, *ground_truth);
      rec.seconds = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      st.iteration = i + 1;
      st.history.push_back(rec);
    } catch (const NumericalError&) {
      // hand the last consistent iterate to the checkpoint sink, then let
      // the caller see the failure
      if (sink) {
        Rng snap;
        snap.load_state(last_good_rng);
        sink(last_good, snap);
      }
      throw;
    }
    last_good = st;
    last_good_rng = rng.save_state();

    if (sink && cfg.checkpoint_every > 0 &&
        st.iteration % cfg.checkpoint_every == 0)
      sink(st, rng);

    // early exit on a flat objective
    const auto& h = st.history;
    if (cfg.early_exit_rel > 0 &&
        static_cast<int>(h.size()) > cfg.early_exit_window) {
      const double now = h.back().objective(cfg);
      const double then =
          h[h.size() - 1 - cfg.early_exit_window].objective(cfg);
      if (std::abs(now - then) <
          cfg.early_exit_rel * std::max(std::abs(then), 1e-300))
        break;
    }
  }

  ReconstructionResult<T> out;
  out.object = st.ftilde;
  out.state = std::move(st);
  return out;
}

}  // namespace detail

// Full solver: restoration prior active. The denoiser argument is any
// frame-to-frame callable; an overload takes the trained restoration model.
template <typename T, typename Den>
  requires FrameDenoiser<Den, T>
ReconstructionResult<T> rsr_nf_reconstruct(
    const SinogramSet<T>& sinos, Den&& denoise, const SolverConfig& cfg,
    const DynamicObject<T>* ground_truth = nullptr,
    const CheckpointSink<T>& sink = {},
    const SolverCheckpoint<T>* resume = nullptr) {
  return detail::admm_reconstruct(sinos, std::forward<Den>(denoise), cfg,
                                  ground_truth, sink, resume);
}

template <typename T>
ReconstructionResult<T> rsr_nf_reconstruct(
    const SinogramSet<T>& sinos, const RestorationModel<T>& model,
    const SolverConfig& cfg, const DynamicObject<T>* ground_truth = nullptr,
    const CheckpointSink<T>& sink = {},
    const SolverCheckpoint<T>* resume = nullptr) {
  return rsr_nf_reconstruct(
      sinos, [&](const Mat<T>& f) { return restore(model, f); }, cfg,
      ground_truth, sink, resume);
}

// Temporal-only ablation: the identical pipeline with lambda forced to
// zero, which makes fbar and the dual inert and never touches a denoiser.
template <typename T>
ReconstructionResult<T> temp_nf_reconstruct(
    const SinogramSet<T>& sinos, const SolverConfig& cfg,
    const DynamicObject<T>* ground_truth = nullptr,
    const CheckpointSink<T>& sink = {},
    const SolverCheckpoint<T>* resume = nullptr) {
  SolverConfig ablated = cfg;
  ablated.lambda = 0;
  return detail::admm_reconstruct(
      sinos, [](const Mat<T>& f) { return f; }, ablated, ground_truth, sink,
      resume);
}

}  // namespace dyntomo
