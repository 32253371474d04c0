// End-to-end experiment orchestration: a config describes dataset, view
// schedule, noise, method and solver; run_experiment materializes an output
// directory holding the reconstruction container, metrics and history CSVs,
// figures and the resolved config snapshot. Reruns with the same config
// reproduce metrics.csv byte for byte. Failures leave the outputs produced
// so far plus a machine-readable error manifest.
#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dyntomo/acquire.hpp"
#include "dyntomo/fbp.hpp"
#include "dyntomo/metrics.hpp"
#include "dyntomo/phantom.hpp"
#include "dyntomo/plot.hpp"
#include "dyntomo/reconstruct.hpp"
#include "dyntomo/restoration.hpp"
#include "dyntomo/schedule.hpp"

namespace dyntomo {

// ---------------------------------------------------------------------------
// Config

struct DatasetSpec {
  // generator fields; a non-empty `path` loads an object container instead
  std::string phantom = "warped-rings";  // warped-rings | static-rings
  std::string path;
  int side = 64;
  int frames = 64;
  double warp_amplitude = 3.0;
  std::uint64_t seed = 9000;
};

struct ScheduleSpec {
  std::string scheme = "bit-reversed";  // bit-reversed | reduced | uniform
  int distinct_views = 0;               // reduced scheme only
};

struct NoiseSpec {
  double sigma = 0.0;
  // > 0 calibrates sigma so a 512-view static reconstruction of frame 0
  // lands at this PSNR; overrides `sigma`
  double target_static_psnr_db = 0.0;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  ScheduleSpec schedule;
  NoiseSpec noise;
  std::string method = "rsr-nf";  // rsr-nf | temp-nf | fbp
  SolverConfig solver;            // seed is taken from the top-level seed
  int fbp_window = 0;             // sliding-window width; 0 means P/2
  std::string restorer;           // checkpoint container; needed when
                                  // method is rsr-nf with lambda > 0
  std::string output_dir;
  std::uint64_t seed = 0;
};

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kOutputRootEnv = "DYNTOMO_OUTPUT_ROOT";

namespace detail {

inline void expect_keys(const nlohmann::json& j, const std::string& ctx,
                        std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ValidationError("config: '" + ctx + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known)
      throw ValidationError("config: unknown key '" + key + "' in " + ctx);
  }
}

inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9e", v);
  return buf;
}

}  // namespace detail

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  return {
      {"schema_version", kConfigSchemaVersion},
      {"dataset",
       {{"phantom", c.dataset.phantom},
        {"path", c.dataset.path},
        {"side", c.dataset.side},
        {"frames", c.dataset.frames},
        {"warp_amplitude", c.dataset.warp_amplitude},
        {"seed", c.dataset.seed}}},
      {"schedule",
       {{"scheme", c.schedule.scheme},
        {"distinct_views", c.schedule.distinct_views}}},
      {"noise",
       {{"sigma", c.noise.sigma},
        {"target_static_psnr_db", c.noise.target_static_psnr_db},
        {"seed", c.noise.seed}}},
      {"method", c.method},
      {"solver",
       {{"lambda", c.solver.lambda},
        {"xi", c.solver.xi},
        {"beta", c.solver.beta},
        {"outer_iters", c.solver.outer_iters},
        {"inner_steps", c.solver.inner_steps},
        {"inner_lr", c.solver.inner_lr},
        {"minibatch", c.solver.minibatch},
        {"nf_hidden_layers", c.solver.nf_hidden_layers},
        {"nf_width", c.solver.nf_width},
        {"nf_freqs", c.solver.nf_freqs},
        {"early_exit_rel", c.solver.early_exit_rel},
        {"early_exit_window", c.solver.early_exit_window},
        {"checkpoint_every", c.solver.checkpoint_every}}},
      {"fbp_window", c.fbp_window},
      {"restorer", c.restorer},
      {"output_dir", c.output_dir},
      {"seed", c.seed}};
}

// Strict parse: unknown keys are errors at every level, so a mistyped
// weight name cannot silently fall back to a default.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::expect_keys(j, "config",
                      {"schema_version", "dataset", "schedule", "noise",
                       "method", "solver", "fbp_window", "restorer",
                       "output_dir", "seed"});
  ExperimentConfig c;
  try {
    if (!j.contains("schema_version"))
      throw ValidationError("config: missing schema_version");
    if (j.at("schema_version").get<int>() != kConfigSchemaVersion)
      throw ValidationError(
          "config: unsupported schema_version " +
          j.at("schema_version").dump() + ", expected " +
          std::to_string(kConfigSchemaVersion));

    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      detail::expect_keys(d, "dataset",
                          {"phantom", "path", "side", "frames",
                           "warp_amplitude", "seed"});
      c.dataset.phantom = d.value("phantom", c.dataset.phantom);
      c.dataset.path = d.value("path", c.dataset.path);
      c.dataset.side = d.value("side", c.dataset.side);
      c.dataset.frames = d.value("frames", c.dataset.frames);
      c.dataset.warp_amplitude =
          d.value("warp_amplitude", c.dataset.warp_amplitude);
      c.dataset.seed = d.value("seed", c.dataset.seed);
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      detail::expect_keys(s, "schedule", {"scheme", "distinct_views"});
      c.schedule.scheme = s.value("scheme", c.schedule.scheme);
      c.schedule.distinct_views =
          s.value("distinct_views", c.schedule.distinct_views);
    }
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      detail::expect_keys(n, "noise",
                          {"sigma", "target_static_psnr_db", "seed"});
      c.noise.sigma = n.value("sigma", c.noise.sigma);
      c.noise.target_static_psnr_db =
          n.value("target_static_psnr_db", c.noise.target_static_psnr_db);
      c.noise.seed = n.value("seed", c.noise.seed);
    }
    c.method = j.value("method", c.method);
    if (j.contains("solver")) {
      const auto& s = j.at("solver");
      detail::expect_keys(
          s, "solver",
          {"lambda", "xi", "beta", "outer_iters", "inner_steps", "inner_lr",
           "minibatch", "nf_hidden_layers", "nf_width", "nf_freqs",
           "early_exit_rel", "early_exit_window", "checkpoint_every"});
      c.solver.lambda = s.value("lambda", c.solver.lambda);
      c.solver.xi = s.value("xi", c.solver.xi);
      c.solver.beta = s.value("beta", c.solver.beta);
      c.solver.outer_iters = s.value("outer_iters", c.solver.outer_iters);
      c.solver.inner_steps = s.value("inner_steps", c.solver.inner_steps);
      c.solver.inner_lr = s.value("inner_lr", c.solver.inner_lr);
      c.solver.minibatch = s.value("minibatch", c.solver.minibatch);
      c.solver.nf_hidden_layers =
          s.value("nf_hidden_layers", c.solver.nf_hidden_layers);
      c.solver.nf_width = s.value("nf_width", c.solver.nf_width);
      c.solver.nf_freqs = s.value("nf_freqs", c.solver.nf_freqs);
      c.solver.early_exit_rel =
          s.value("early_exit_rel", c.solver.early_exit_rel);
      c.solver.early_exit_window =
          s.value("early_exit_window", c.solver.early_exit_window);
      c.solver.checkpoint_every =
          s.value("checkpoint_every", c.solver.checkpoint_every);
    }
    c.fbp_window = j.value("fbp_window", c.fbp_window);
    c.restorer = j.value("restorer", c.restorer);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.solver.seed = c.seed;
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config '" + path + "': " + e.what());
  }
  return experiment_config_from_json(j);
}

// Relative output directories land under the root named by the
// DYNTOMO_OUTPUT_ROOT environment variable (unset: current directory).
inline std::filesystem::path resolve_output_dir(const std::string& dir) {
  if (dir.empty())
    throw ValidationError("config: output_dir must not be empty");
  std::filesystem::path p(dir);
  if (p.is_absolute()) return p;
  const char* root = std::getenv(kOutputRootEnv);
  return root && *root ? std::filesystem::path(root) / p : p;
}

// Value ranges plus referential completeness: every path the run will need
// must resolve now, so a missing restorer fails before any simulation.
inline void validate_experiment_config(const ExperimentConfig& c) {
  if (c.dataset.path.empty()) {
    if (c.dataset.phantom != "warped-rings" &&
        c.dataset.phantom != "static-rings")
      throw ValidationError("config: unknown phantom '" + c.dataset.phantom +
                            "' (warped-rings | static-rings)");
    if (c.dataset.side < 4)
      throw ValidationError("config: dataset side must be >= 4");
    if (c.dataset.frames < 1)
      throw ValidationError("config: dataset frames must be >= 1");
    if (!(c.dataset.warp_amplitude >= 0) ||
        !std::isfinite(c.dataset.warp_amplitude))
      throw ValidationError("config: warp_amplitude must be >= 0");
  } else if (!std::filesystem::exists(c.dataset.path)) {
    throw ValidationError("config: dataset path '" + c.dataset.path +
                          "' does not exist");
  }

  if (c.schedule.scheme != "bit-reversed" && c.schedule.scheme != "reduced" &&
      c.schedule.scheme != "uniform")
    throw ValidationError("config: unknown schedule scheme '" +
                          c.schedule.scheme +
                          "' (bit-reversed | reduced | uniform)");
  if (c.schedule.scheme == "reduced") {
    if (c.schedule.distinct_views < 1)
      throw ValidationError(
          "config: reduced schedule needs distinct_views >= 1");
  } else if (c.schedule.distinct_views != 0) {
    throw ValidationError("config: distinct_views is only meaningful for "
                          "the reduced scheme; leave it at 0");
  }

  if (!(c.noise.sigma >= 0) || !std::isfinite(c.noise.sigma))
    throw ValidationError("config: noise sigma must be >= 0");
  if (!std::isfinite(c.noise.target_static_psnr_db) ||
      c.noise.target_static_psnr_db < 0)
    throw ValidationError("config: target_static_psnr_db must be >= 0");

  if (c.method != "rsr-nf" && c.method != "temp-nf" && c.method != "fbp")
    throw ValidationError("config: unknown method '" + c.method +
                          "' (rsr-nf | temp-nf | fbp)");
  if (c.fbp_window < 0)
    throw ValidationError("config: fbp_window must be >= 0");
  if (c.method == "rsr-nf" && c.solver.lambda > 0) {
    if (c.restorer.empty())
      throw ValidationError(
          "config: rsr-nf with lambda > 0 needs a restorer checkpoint");
    if (!std::filesystem::exists(c.restorer))
      throw ValidationError("config: restorer '" + c.restorer +
                            "' does not exist");
  }
  if (c.method != "fbp") {
    // view count is unknown until a dataset container is opened, so the
    // minibatch <= P relation is rechecked by the solver itself
    const int views = c.dataset.path.empty()
                          ? c.dataset.frames
                          : std::numeric_limits<int>::max();
    validate_solver_config(c.solver, views);
  }
  resolve_output_dir(c.output_dir);  // throws on empty
}

// ---------------------------------------------------------------------------
// Report pieces

inline std::string metrics_csv(const MetricsRecord& m) {
  std::string out = "frame,psnr_db,ssim,mae,hfen\n";
  for (std::size_t i = 0; i < m.frame_indices.size(); ++i) {
    out += std::to_string(m.frame_indices[i]) + ',' +
           detail::csv_num(m.psnr[i]) + ',' + detail::csv_num(m.ssim[i]) +
           ',' + detail::csv_num(m.mae[i]) + ',' + detail::csv_num(m.hfen[i]) +
           '\n';
  }
  out += "mean," + detail::csv_num(m.mean_psnr) + ',' +
         detail::csv_num(m.mean_ssim) + ',' + detail::csv_num(m.mean_mae) +
         ',' + detail::csv_num(m.mean_hfen) + '\n';
  return out;
}

inline std::string history_csv(const std::vector<IterationRecord>& history) {
  std::string out =
      "iter,fidelity,rho_tau,rho_red,lagrangian,primal_residual,psnr,"
      "seconds\n";
  for (const auto& r : history) {
    out += std::to_string(r.iter) + ',' + detail::csv_num(r.fidelity) + ',' +
           detail::csv_num(r.rho_tau) + ',' + detail::csv_num(r.rho_red) +
           ',' + detail::csv_num(r.lagrangian) + ',' +
           detail::csv_num(r.primal_residual) + ',';
    if (std::isfinite(r.psnr)) out += detail::csv_num(r.psnr);
    out += ',' + detail::csv_num(r.seconds) + '\n';
  }
  return out;
}

struct ExperimentReport {
  std::filesystem::path dir;
  ExperimentConfig config;  // as run, solver seed resolved
  MetricsRecord metrics;
  DynamicObject<double> reconstruction;
  std::vector<IterationRecord> history;  // empty for fbp
  double noise_sigma = 0;                // after calibration
};

namespace detail {

inline DynamicObject<double> build_dataset(const DatasetSpec& d) {
  if (!d.path.empty()) return load_object<double>(d.path);
  const Mat<double> base = rings_slice<double>(d.side, d.seed);
  if (d.phantom == "static-rings") {
    DynamicObject<double> obj;
    obj.frames.assign(d.frames, base);
    obj.normalization = base.maxCoeff();
    obj.provenance = "static-rings(side=" + std::to_string(d.side) +
                     ", seed=" + std::to_string(d.seed) + ")";
    return obj;
  }
  const auto recipe =
      WarpRecipe<double>::ramp(base, d.frames, d.warp_amplitude);
  return warp_sequence(recipe);
}

inline AngleSchedule build_schedule(const ScheduleSpec& s, int views) {
  if (s.scheme == "bit-reversed") return bit_reversed_schedule(views);
  if (s.scheme == "reduced")
    return reduced_view_schedule(s.distinct_views, views);
  return uniform_schedule(views);
}

}  // namespace detail

// Runs the full pipeline into the config's output directory. Files appear
// as their stage completes, so a failed run leaves everything produced up
// to the failure plus error.json naming the stage; the exception is then
// rethrown for the caller's exit-code mapping.
inline ExperimentReport run_experiment(const ExperimentConfig& config) {
  ExperimentReport rep;
  rep.config = config;
  rep.config.solver.seed = config.seed;
  const ExperimentConfig& cfg = rep.config;

  validate_experiment_config(cfg);
  rep.dir = resolve_output_dir(cfg.output_dir);
  std::filesystem::create_directories(rep.dir);
  write_file((rep.dir / "config.json").string(),
             experiment_config_to_json(cfg).dump(2) + "\n");

  std::string stage = "dataset";
  try {
    const DynamicObject<double> gt = detail::build_dataset(cfg.dataset);

    stage = "schedule";
    const AngleSchedule schedule =
        detail::build_schedule(cfg.schedule, gt.num_frames());

    stage = "simulate";
    rep.noise_sigma = cfg.noise.sigma;
    if (cfg.noise.target_static_psnr_db > 0) {
      CalibrationParams cal;
      cal.target_psnr_db = cfg.noise.target_static_psnr_db;
      rep.noise_sigma =
          calibrate_noise_sigma(
              ImageFrame<double>{gt.frames[0], gt.pixel_spacing}, cal)
              .sigma;
    }
    const SinogramSet<double> sinos =
        simulate_measurements(gt, schedule, rep.noise_sigma, cfg.noise.seed);

    stage = "reconstruct";
    CheckpointSink<double> sink;
    if (cfg.method != "fbp" && cfg.solver.checkpoint_every > 0) {
      const std::string ckpt = (rep.dir / "checkpoint.dtc").string();
      sink = [ckpt](const ADMMState<double>& st, const Rng& rng) {
        ArrayStore store;
        save_solver_state(store, st, rng);
        store.save(ckpt);
      };
    }
    if (cfg.method == "fbp") {
      rep.reconstruction = fbp_sliding_window(
          sinos, gt.side(), cfg.fbp_window > 0 ? cfg.fbp_window : -1);
    } else if (cfg.method == "temp-nf") {
      auto res = temp_nf_reconstruct(sinos, cfg.solver, &gt, sink);
      rep.reconstruction = std::move(res.object);
      rep.history = std::move(res.state.history);
    } else if (cfg.solver.lambda > 0) {
      const ArrayStore store = ArrayStore::load(cfg.restorer);
      const RestorationModel<double> model = load_restorer<double>(store);
      auto res = rsr_nf_reconstruct(sinos, model, cfg.solver, &gt, sink);
      rep.reconstruction = std::move(res.object);
      rep.history = std::move(res.state.history);
    } else {
      auto res = rsr_nf_reconstruct(
          sinos, [](const Mat<double>& f) { return f; }, cfg.solver, &gt,
          sink);
      rep.reconstruction = std::move(res.object);
      rep.history = std::move(res.state.history);
    }
    save_object(rep.reconstruction, (rep.dir / "reconstruction.dtc").string());
    if (cfg.method != "fbp")
      write_file((rep.dir / "history.csv").string(),
                 history_csv(rep.history));

    stage = "evaluate";
    rep.metrics = evaluate(rep.reconstruction, gt);
    write_file((rep.dir / "metrics.csv").string(), metrics_csv(rep.metrics));

    stage = "report";
    LinePlot lp;
    lp.title = "reconstruction PSNR by frame";
    lp.x_label = "frame";
    lp.y_label = "PSNR (dB)";
    PlotSeries series;
    series.label = cfg.method;
    for (std::size_t i = 0; i < rep.metrics.frame_indices.size(); ++i) {
      series.x.push_back(rep.metrics.frame_indices[i]);
      series.y.push_back(rep.metrics.psnr[i]);
    }
    lp.series.push_back(std::move(series));
    write_file((rep.dir / "psnr_vs_t.svg").string(), svg_line_plot(lp));

    // both slices share the reference gray range so they compare directly
    const Mat<double> ref_slice = xt_slice(gt);
    const double lo = ref_slice.minCoeff(), hi = ref_slice.maxCoeff();
    const double pad = hi - lo < 1e-300 ? 0.5 : 0.0;
    write_file((rep.dir / "xt_slice_reference.png").string(),
               png_encode_gray(ref_slice, lo - pad, hi + pad));
    write_file((rep.dir / "xt_slice.png").string(),
               png_encode_gray(xt_slice(rep.reconstruction), lo - pad,
                               hi + pad));
  } catch (const std::exception& e) {
    std::string category = "internal";
    if (dynamic_cast<const ValidationError*>(&e)) category = "validation";
    else if (dynamic_cast<const IoError*>(&e)) category = "io";
    else if (dynamic_cast<const NumericalError*>(&e)) category = "numerical";
    const nlohmann::json manifest = {
        {"stage", stage}, {"category", category}, {"message", e.what()}};
    write_file((rep.dir / "error.json").string(), manifest.dump(2) + "\n");
    throw;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Distinct-view sweep

struct SweepRow {
  int distinct_views = 0;
  MetricsRecord metrics;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "distinct_views,psnr_db,ssim,mae,hfen\n";
  for (const auto& r : rows) {
    out += std::to_string(r.distinct_views) + ',' +
           detail::csv_num(r.metrics.mean_psnr) + ',' +
           detail::csv_num(r.metrics.mean_ssim) + ',' +
           detail::csv_num(r.metrics.mean_mae) + ',' +
           detail::csv_num(r.metrics.mean_hfen) + '\n';
  }
  return out;
}

// One run per distinct-view count under pv<count>/ inside the base output
// directory, plus a combined sweep.csv of the mean metrics.
inline std::vector<SweepRow> sweep_distinct_views(
    const ExperimentConfig& base, const std::vector<int>& counts) {
  if (counts.empty())
    throw ValidationError("sweep: need at least one distinct-view count");
  std::vector<SweepRow> rows;
  for (int count : counts) {
    ExperimentConfig cfg = base;
    cfg.schedule.scheme = "reduced";
    cfg.schedule.distinct_views = count;
    cfg.output_dir =
        (std::filesystem::path(base.output_dir) / ("pv" + std::to_string(count)))
            .string();
    const ExperimentReport rep = run_experiment(cfg);
    rows.push_back({count, rep.metrics});
  }
  const auto dir = resolve_output_dir(base.output_dir);
  std::filesystem::create_directories(dir);
  write_file((dir / "sweep.csv").string(), sweep_csv(rows));
  return rows;
}

}  // namespace dyntomo
