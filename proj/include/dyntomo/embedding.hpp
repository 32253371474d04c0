// Representation-power benchmark: fit the coordinate network directly to a
// fully known dynamic object (no projections involved) and compare against
// rank-K separable approximations of the same object at matched parameter
// counts. The rank-K side reshapes the stack to a (J*J) x P matrix, keeps
// the K dominant singular triplets and reshapes back, which is the
// best-possible separable model of that size.
#pragma once

#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dyntomo/common.hpp"
#include "dyntomo/metrics.hpp"
#include "dyntomo/neural_field.hpp"

namespace dyntomo {

// ---------------------------------------------------------------------------
// Rank-K truncation

template <typename T>
DynamicObject<T> svd_truncate(const DynamicObject<T>& obj, int K) {
  validate_object(obj, "svd_truncate");
  const int J = obj.side();
  const int P = obj.num_frames();
  const Eigen::Index n = static_cast<Eigen::Index>(J) * J;
  const Eigen::Index kmax = std::min<Eigen::Index>(n, P);
  if (K < 1 || K > kmax)
    throw ValidationError("svd_truncate: K must be in [1, " +
                          std::to_string(kmax) + "], got " +
                          std::to_string(K));

  Mat<T> M(n, P);
  for (int t = 0; t < P; ++t)
    M.col(t) = Eigen::Map<const Vec<T>>(obj.frames[t].data(), n);
  Eigen::BDCSVD<Mat<T>> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Mat<T> approx = svd.matrixU().leftCols(K) *
                        svd.singularValues().head(K).asDiagonal() *
                        svd.matrixV().leftCols(K).transpose();

  DynamicObject<T> out = obj;
  for (int t = 0; t < P; ++t)
    out.frames[t] = Eigen::Map<const Mat<T>>(approx.col(t).data(), J, J);
  out.provenance = "svd_truncate(K=" + std::to_string(K) + ")";
  return out;
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct NFArch {
  int hidden_layers = 7;
  int width = 64;
  int freqs = 10;
};

inline void validate_arch(const NFArch& a) {
  if (a.hidden_layers < 1)
    throw ValidationError("nf arch: need at least one hidden layer");
  if (a.width < 1) throw ValidationError("nf arch: width must be >= 1");
  if (a.freqs < 1) throw ValidationError("nf arch: freqs must be >= 1");
}

// Closed form Sum_layers (in + 1) * out for the encoding -> hidden^h -> 1
// stack; matches enumerating the stored weights of an initialized network.
inline std::int64_t nf_arch_param_count(const NFArch& a) {
  validate_arch(a);
  const std::int64_t in = 6LL * a.freqs;
  std::int64_t count = (in + 1) * a.width;
  count += static_cast<std::int64_t>(a.hidden_layers - 1) * (a.width + 1) *
           a.width;
  count += a.width + 1;
  return count;
}

// Raw factor entries of a rank-K separable model: K spatial maps of J^2
// pixels plus K temporal profiles of length P.
inline std::int64_t psm_param_count(int J, int P, int K) {
  if (J < 1 || P < 1 || K < 1)
    throw ValidationError("psm_param_count: J, P and K must be >= 1");
  return static_cast<std::int64_t>(K) *
         (static_cast<std::int64_t>(J) * J + P);
}

// ---------------------------------------------------------------------------
// Network fit

struct EmbeddingFitConfig {
  NFArch arch;
  int iters = 25000;
  double lr = 5e-3;        // initial rate; cosine-annealed toward lr * lr_floor
  double lr_floor = 0.0;   // final rate as a fraction of lr; 1 = constant rate
  int batch = 4096;        // grid points per Adam step
  std::uint64_t seed = 0;
  int record_every = 0;    // PSNR trajectory cadence; 0 = final value only
};

inline void validate_embedding_fit_config(const EmbeddingFitConfig& c) {
  validate_arch(c.arch);
  if (c.iters < 1)
    throw ValidationError("embedding fit: iters must be >= 1");
  if (!std::isfinite(c.lr) || c.lr <= 0)
    throw ValidationError("embedding fit: lr must be > 0");
  if (!std::isfinite(c.lr_floor) || c.lr_floor < 0 || c.lr_floor > 1)
    throw ValidationError("embedding fit: lr_floor must be in [0, 1]");
  if (c.batch < 1) throw ValidationError("embedding fit: batch must be >= 1");
  if (c.record_every < 0)
    throw ValidationError("embedding fit: record_every must be >= 0");
}

// One row of the comparison table; holds either a network fit or a rank-K
// truncation.
struct EmbeddingResult {
  std::string label;
  std::int64_t param_count = 0;
  double psnr = std::numeric_limits<double>::quiet_NaN();
  double ssim = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<double> psnr_trajectory;  // recorded during fits; final last
};

inline void validate_embedding_result(const EmbeddingResult& r) {
  if (r.label.empty())
    throw ValidationError("embedding result: empty label");
  if (r.param_count <= 0)
    throw ValidationError("embedding result: parameter count must be > 0");
  if (!std::isfinite(r.psnr) || !std::isfinite(r.ssim))
    throw ValidationError("embedding result: metrics must be finite");
}

// Divergent fits abort with the PSNR trajectory recorded up to the failure,
// so callers can report how far the fit got.
class FitDivergence : public NumericalError {
 public:
  FitDivergence(const std::string& msg, std::vector<double> trajectory)
      : NumericalError(msg), psnr_trajectory(std::move(trajectory)) {}
  std::vector<double> psnr_trajectory;
};

template <typename T>
struct EmbeddingFit {
  NFParams<T> params;
  EmbeddingResult result;
};

namespace detail {

template <typename T>
double mean_stack_psnr(const DynamicObject<T>& est,
                       const DynamicObject<T>& ref, double peak) {
  double acc = 0;
  for (int t = 0; t < ref.num_frames(); ++t)
    acc += psnr_db(est.frames[t], ref.frames[t], peak) / ref.num_frames();
  return acc;
}

}  // namespace detail

// Minibatched Adam fit of the network to the object's grid values. Each
// step draws `batch` grid points uniformly (with replacement) over all
// J*J*P positions, so the expected step objective is the full-grid MSE.
template <typename T>
EmbeddingFit<T> fit_nf_embedding(const DynamicObject<T>& obj,
                                 const EmbeddingFitConfig& cfg) {
  validate_object(obj, "fit_nf_embedding");
  validate_embedding_fit_config(cfg);
  const int J = obj.side();
  const int P = obj.num_frames();
  const int B = cfg.batch;

  double peak = 0;
  for (const auto& f : obj.frames)
    peak = std::max(peak, static_cast<double>(f.maxCoeff()));
  if (!(peak > 0))
    throw ValidationError(
        "fit_nf_embedding: object peak must be positive for PSNR tracking");

  NFParams<T> p = nf_init<T>(PosEncConfig{cfg.arch.freqs},
                             cfg.arch.hidden_layers, cfg.arch.width, cfg.seed);
  AdamConfig adam;  // lr is set per step by the decay schedule
  AdamState<T> moments = adam_init(p);
  Rng rng(cfg.seed ^ 0xbb67ae8584caa73bULL);  // point-sampling stream

  std::vector<double> trajectory;
  const auto t0 = std::chrono::steady_clock::now();
  Mat<T> coords(3, B);
  Vec<T> target(B);
  double best_loss = std::numeric_limits<double>::infinity();
  for (int i = 0; i < cfg.iters; ++i) {
    for (int j = 0; j < B; ++j) {
      const int r = static_cast<int>(rng.uniform_int(J));
      const int c = static_cast<int>(rng.uniform_int(J));
      const int t = static_cast<int>(rng.uniform_int(P));
      coords(0, j) = (T(c) + T(0.5)) / T(J);
      coords(1, j) = (T(r) + T(0.5)) / T(J);
      coords(2, j) = P == 1 ? T(0) : T(t) / T(P - 1);
      target(j) = obj.frames[t](r, c);
    }
    auto closure = [&](const Vec<T>& out) -> std::pair<T, Vec<T>> {
      const Vec<T> resid = out - target;
      return {resid.squaredNorm() / T(B), T(2) / T(B) * resid};
    };
    // a fixed rate leaves an lr-sized jitter floor on the final error, so
    // anneal toward lr * lr_floor to let the fit settle
    adam.lr = cfg.lr * (cfg.lr_floor +
                        (1.0 - cfg.lr_floor) * 0.5 *
                            (1.0 + std::cos(kPi * double(i) / cfg.iters)));
    double loss;
    try {
      auto [l, grads] = nf_gradient(p, coords, closure);
      loss = static_cast<double>(l);
      adam_step(p, grads, moments, adam);
    } catch (const NumericalError& e) {
      throw FitDivergence(std::string("fit_nf_embedding: ") + e.what() +
                              " at iteration " + std::to_string(i + 1),
                          std::move(trajectory));
    }
    if (loss > 1e8 * std::max(best_loss, 1e-300))
      throw FitDivergence(
          "fit_nf_embedding: diverged at iteration " + std::to_string(i + 1) +
              " (step loss " + std::to_string(loss) + ", best " +
              std::to_string(best_loss) + ")",
          std::move(trajectory));
    best_loss = std::min(best_loss, loss);
    if (cfg.record_every > 0 && (i + 1) % cfg.record_every == 0)
      trajectory.push_back(
          detail::mean_stack_psnr(render_grid(p, J, P), obj, peak));
  }

  EmbeddingFit<T> out;
  out.params = std::move(p);
  auto& res = out.result;
  DynamicObject<T> render = render_grid(out.params, J, P);
  render.pixel_spacing = obj.pixel_spacing;
  // anchor the SSIM stabilizers to the peak so constant objects (zero
  // empirical range) stay well-defined
  SsimParams sp;
  sp.data_range = peak;
  const MetricsRecord rec = evaluate(render, obj, {}, peak, sp);
  res.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  res.label = "nf-h" + std::to_string(cfg.arch.hidden_layers) + "-w" +
              std::to_string(cfg.arch.width) + "-L" +
              std::to_string(cfg.arch.freqs);
  res.param_count = nf_param_count(out.params);
  res.psnr = rec.mean_psnr;
  res.ssim = rec.mean_ssim;
  res.config = {{"model", "nf"},
                {"hidden_layers", cfg.arch.hidden_layers},
                {"width", cfg.arch.width},
                {"freqs", cfg.arch.freqs},
                {"iters", cfg.iters},
                {"lr", cfg.lr},
                {"lr_floor", cfg.lr_floor},
                {"batch", cfg.batch},
                {"seed", cfg.seed},
                {"record_every", cfg.record_every}};
  trajectory.push_back(detail::mean_stack_psnr(render, obj, peak));
  res.psnr_trajectory = std::move(trajectory);
  validate_embedding_result(res);
  return out;
}

// Companion row for the separable model at rank K.
template <typename T>
EmbeddingResult psm_embedding_result(const DynamicObject<T>& obj, int K) {
  const auto t0 = std::chrono::steady_clock::now();
  const DynamicObject<T> approx = svd_truncate(obj, K);
  EmbeddingResult res;
  res.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  double peak = 0;
  for (const auto& f : obj.frames)
    peak = std::max(peak, static_cast<double>(f.maxCoeff()));
  if (!(peak > 0))
    throw ValidationError(
        "psm_embedding_result: object peak must be positive for PSNR");
  SsimParams sp;
  sp.data_range = peak;
  const MetricsRecord rec = evaluate(approx, obj, {}, peak, sp);
  res.label = "psm-k" + std::to_string(K);
  res.param_count = psm_param_count(obj.side(), obj.num_frames(), K);
  res.psnr = rec.mean_psnr;
  res.ssim = rec.mean_ssim;
  res.config = {{"model", "psm"}, {"rank", K}};
  res.psnr_trajectory = {res.psnr};
  validate_embedding_result(res);
  return res;
}

// Comparison table, one row per result. Fixed six-decimal formatting keeps
// reruns byte-identical for identical inputs.
inline std::string embedding_csv(const std::vector<EmbeddingResult>& rows) {
  std::ostringstream os;
  os << "label,params,psnr_db,ssim,seconds\n";
  os << std::fixed << std::setprecision(6);
  for (const auto& r : rows) {
    validate_embedding_result(r);
    os << r.label << ',' << r.param_count << ',' << r.psnr << ',' << r.ssim
       << ',' << r.seconds << '\n';
  }
  return os.str();
}

}  // namespace dyntomo
