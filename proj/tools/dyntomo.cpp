// Command-line front end. Subcommands cover the full pipeline: phantom
// generation, measurement simulation, restorer pretraining, reconstruction
// (rsr-nf | temp-nf | fbp), the representation benchmark, metrics between
// containers, and the distinct-view sweep. Relative output paths land under
// $DYNTOMO_OUTPUT_ROOT when that is set.
//
// Exit codes: 0 success, 2 invalid inputs or files, 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dyntomo/embedding.hpp"
#include "dyntomo/experiment.hpp"

using namespace dyntomo;

namespace {

std::string resolve_out(const std::string& path) {
  return resolve_output_dir(path).string();
}

// ---------------------------------------------------------------------------
// phantom

struct PhantomArgs {
  std::string kind = "warped-rings";
  int side = 64;
  int frames = 64;
  double amplitude = 3.0;
  std::uint64_t seed = 9000;
  std::string out;
};

void add_phantom(CLI::App& app, PhantomArgs& a) {
  auto* cmd = app.add_subcommand("phantom", "Generate a phantom container");
  cmd->add_option("--kind", a.kind, "warped-rings | static-rings")
      ->capture_default_str();
  cmd->add_option("--side", a.side, "Image side length")
      ->capture_default_str();
  cmd->add_option("--frames", a.frames, "Number of frames")
      ->capture_default_str();
  cmd->add_option("--amplitude", a.amplitude,
                  "Peak warp displacement in pixels")
      ->capture_default_str();
  cmd->add_option("--seed", a.seed, "Phantom seed")->capture_default_str();
  cmd->add_option("--out", a.out, "Output container path")->required();
  cmd->callback([&a] {
    DatasetSpec spec;
    spec.phantom = a.kind;
    spec.side = a.side;
    spec.frames = a.frames;
    spec.warp_amplitude = a.amplitude;
    spec.seed = a.seed;
    if (spec.phantom != "warped-rings" && spec.phantom != "static-rings")
      throw ValidationError("phantom: unknown kind '" + spec.phantom + "'");
    const auto obj = detail::build_dataset(spec);
    const std::string out = resolve_out(a.out);
    save_object(obj, out);
    std::printf("wrote %d frames of %dx%d to %s\n", obj.num_frames(),
                obj.side(), obj.side(), out.c_str());
  });
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string object;
  std::string scheme = "bit-reversed";
  int distinct_views = 0;
  double sigma = 0.0;
  double target_psnr = 0.0;
  std::uint64_t noise_seed = 1;
  std::string out;
};

void add_simulate(CLI::App& app, SimulateArgs& a) {
  auto* cmd = app.add_subcommand(
      "simulate", "Project an object container into measurements");
  cmd->add_option("--object", a.object, "Object container")->required();
  cmd->add_option("--scheme", a.scheme, "bit-reversed | reduced | uniform")
      ->capture_default_str();
  cmd->add_option("--distinct-views", a.distinct_views,
                  "Distinct angles for the reduced scheme")
      ->capture_default_str();
  cmd->add_option("--sigma", a.sigma, "Additive noise std")
      ->capture_default_str();
  cmd->add_option("--target-psnr", a.target_psnr,
                  "Calibrate sigma to this static 512-view PSNR (dB); "
                  "overrides --sigma")
      ->capture_default_str();
  cmd->add_option("--noise-seed", a.noise_seed, "Noise stream seed")
      ->capture_default_str();
  cmd->add_option("--out", a.out, "Output sinogram container")->required();
  cmd->callback([&a] {
    const auto obj = load_object<double>(a.object);
    ScheduleSpec spec;
    spec.scheme = a.scheme;
    spec.distinct_views = a.distinct_views;
    const AngleSchedule sched =
        detail::build_schedule(spec, obj.num_frames());
    double sigma = a.sigma;
    if (a.target_psnr > 0) {
      CalibrationParams cal;
      cal.target_psnr_db = a.target_psnr;
      sigma = calibrate_noise_sigma(
                  ImageFrame<double>{obj.frames[0], obj.pixel_spacing}, cal)
                  .sigma;
      std::printf("calibrated sigma = %.9e\n", sigma);
    }
    const auto sinos = simulate_measurements(obj, sched, sigma, a.noise_seed);
    const std::string out = resolve_out(a.out);
    save_sinogram(sinos, out);
    std::printf("wrote %d views to %s\n", sinos.num_views(), out.c_str());
  });
}

// ---------------------------------------------------------------------------
// train-restorer

struct TrainArgs {
  std::string object;
  RestorerConfig cfg;
  std::string out;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* cmd = app.add_subcommand(
      "train-restorer",
      "Pretrain the restoration network on an object's frames");
  cmd->add_option("--object", a.object, "Clean-frame source container")
      ->required();
  cmd->add_option("--epochs", a.cfg.epochs)->capture_default_str();
  cmd->add_option("--batch", a.cfg.batch)->capture_default_str();
  cmd->add_option("--lr", a.cfg.lr)->capture_default_str();
  cmd->add_option("--sigma-max", a.cfg.sigma_max,
                  "Degradation noise std cap")
      ->capture_default_str();
  cmd->add_option("--k-max", a.cfg.k_max, "Degradation blur std cap (px)")
      ->capture_default_str();
  cmd->add_flag("--residual", a.cfg.residual,
                "Predict the correction instead of the image");
  cmd->add_option("--layers", a.cfg.layers)->capture_default_str();
  cmd->add_option("--channels", a.cfg.channels)->capture_default_str();
  cmd->add_option("--seed", a.cfg.seed)->capture_default_str();
  cmd->add_option("--out", a.out, "Output checkpoint container")->required();
  cmd->callback([&a] {
    const auto obj = load_object<double>(a.object);
    const auto training = train_restorer(obj.frames, a.cfg);
    ArrayStore store;
    save_restorer(store, training.model);
    const Vec<double> losses = Eigen::Map<const Vec<double>>(
        training.epoch_loss.data(),
        static_cast<Eigen::Index>(training.epoch_loss.size()));
    store.put_vector("epoch_loss", losses);
    const std::string out = resolve_out(a.out);
    store.save(out);
    std::printf("trained %d epochs, loss %.3e -> %.3e, wrote %s\n",
                a.cfg.epochs, training.epoch_loss.front(),
                training.epoch_loss.back(), out.c_str());
  });
}

// ---------------------------------------------------------------------------
// reconstruct / sweep

// Every field of the experiment config is mirrored as a flag; flags given
// on the command line override the --config file, which overrides defaults.
struct ReconstructArgs {
  std::string config_path;
  std::string mode;
  std::string dataset_path;
  std::string phantom;
  int side = 0;
  int frames = 0;
  double amplitude = 0;
  std::uint64_t phantom_seed = 0;
  std::string scheme;
  int distinct_views = 0;
  double sigma = 0;
  double target_psnr = 0;
  std::uint64_t noise_seed = 0;
  double lambda = 0, xi = 0, beta = 0;
  int outer_iters = 0, inner_steps = 0, minibatch = 0;
  double inner_lr = 0;
  int nf_layers = 0, nf_width = 0, nf_freqs = 0;
  double early_exit_rel = 0;
  int early_exit_window = 0, checkpoint_every = 0;
  int fbp_window = 0;
  std::string restorer;
  std::string out;
  std::uint64_t seed = 0;

  CLI::App* cmd = nullptr;

  ExperimentConfig materialize() const {
    ExperimentConfig c = config_path.empty()
                             ? ExperimentConfig{}
                             : load_experiment_config(config_path);
    auto given = [this](const char* flag) {
      return cmd->count(flag) > 0;
    };
    if (given("--mode")) c.method = mode;
    if (given("--dataset")) c.dataset.path = dataset_path;
    if (given("--phantom")) c.dataset.phantom = phantom;
    if (given("--side")) c.dataset.side = side;
    if (given("--frames")) c.dataset.frames = frames;
    if (given("--amplitude")) c.dataset.warp_amplitude = amplitude;
    if (given("--phantom-seed")) c.dataset.seed = phantom_seed;
    if (given("--scheme")) c.schedule.scheme = scheme;
    if (given("--distinct-views")) c.schedule.distinct_views = distinct_views;
    if (given("--sigma")) c.noise.sigma = sigma;
    if (given("--target-psnr")) c.noise.target_static_psnr_db = target_psnr;
    if (given("--noise-seed")) c.noise.seed = noise_seed;
    if (given("--lambda")) c.solver.lambda = lambda;
    if (given("--xi")) c.solver.xi = xi;
    if (given("--beta")) c.solver.beta = beta;
    if (given("--outer-iters")) c.solver.outer_iters = outer_iters;
    if (given("--inner-steps")) c.solver.inner_steps = inner_steps;
    if (given("--inner-lr")) c.solver.inner_lr = inner_lr;
    if (given("--minibatch")) c.solver.minibatch = minibatch;
    if (given("--nf-layers")) c.solver.nf_hidden_layers = nf_layers;
    if (given("--nf-width")) c.solver.nf_width = nf_width;
    if (given("--nf-freqs")) c.solver.nf_freqs = nf_freqs;
    if (given("--early-exit-rel")) c.solver.early_exit_rel = early_exit_rel;
    if (given("--early-exit-window"))
      c.solver.early_exit_window = early_exit_window;
    if (given("--checkpoint-every"))
      c.solver.checkpoint_every = checkpoint_every;
    if (given("--fbp-window")) c.fbp_window = fbp_window;
    if (given("--restorer")) c.restorer = restorer;
    if (given("--out")) c.output_dir = out;
    if (given("--seed")) c.seed = seed;
    return c;
  }
};

void add_experiment_flags(CLI::App* cmd, ReconstructArgs& a) {
  a.cmd = cmd;
  cmd->add_option("--config", a.config_path, "Experiment config (json)");
  cmd->add_option("--mode", a.mode, "rsr-nf | temp-nf | fbp");
  cmd->add_option("--dataset", a.dataset_path,
                  "Object container (skips phantom generation)");
  cmd->add_option("--phantom", a.phantom, "warped-rings | static-rings");
  cmd->add_option("--side", a.side);
  cmd->add_option("--frames", a.frames);
  cmd->add_option("--amplitude", a.amplitude);
  cmd->add_option("--phantom-seed", a.phantom_seed);
  cmd->add_option("--scheme", a.scheme, "bit-reversed | reduced | uniform");
  cmd->add_option("--distinct-views", a.distinct_views);
  cmd->add_option("--sigma", a.sigma);
  cmd->add_option("--target-psnr", a.target_psnr,
                  "Calibrate sigma to this static PSNR (dB)");
  cmd->add_option("--noise-seed", a.noise_seed);
  cmd->add_option("--lambda", a.lambda, "Restoration-prior weight");
  cmd->add_option("--xi", a.xi, "Temporal smoothness weight");
  cmd->add_option("--beta", a.beta, "Augmented-Lagrangian weight");
  cmd->add_option("--outer-iters", a.outer_iters);
  cmd->add_option("--inner-steps", a.inner_steps);
  cmd->add_option("--inner-lr", a.inner_lr);
  cmd->add_option("--minibatch", a.minibatch, "Views per inner step; 0 = P/8");
  cmd->add_option("--nf-layers", a.nf_layers);
  cmd->add_option("--nf-width", a.nf_width);
  cmd->add_option("--nf-freqs", a.nf_freqs);
  cmd->add_option("--early-exit-rel", a.early_exit_rel);
  cmd->add_option("--early-exit-window", a.early_exit_window);
  cmd->add_option("--checkpoint-every", a.checkpoint_every);
  cmd->add_option("--fbp-window", a.fbp_window, "Sliding window; 0 = P/2");
  cmd->add_option("--restorer", a.restorer, "Restorer checkpoint container");
  cmd->add_option("--out", a.out, "Output directory");
  cmd->add_option("--seed", a.seed, "Experiment seed");
}

void add_reconstruct(CLI::App& app, ReconstructArgs& a) {
  auto* cmd = app.add_subcommand(
      "reconstruct", "Run the full pipeline into an output directory");
  add_experiment_flags(cmd, a);
  cmd->callback([&a] {
    const ExperimentReport rep = run_experiment(a.materialize());
    std::printf("%s: mean PSNR %.3f dB, SSIM %.4f -> %s\n",
                rep.config.method.c_str(), rep.metrics.mean_psnr,
                rep.metrics.mean_ssim, rep.dir.string().c_str());
  });
}

struct SweepArgs {
  ReconstructArgs base;
  std::vector<int> counts;
};

void add_sweep(CLI::App& app, SweepArgs& a) {
  auto* cmd = app.add_subcommand(
      "sweep", "Reconstruct at several distinct-view counts");
  add_experiment_flags(cmd, a.base);
  cmd->add_option("--counts", a.counts, "Distinct-view counts")
      ->required()
      ->delimiter(',');
  cmd->callback([&a] {
    const auto rows = sweep_distinct_views(a.base.materialize(), a.counts);
    for (const auto& r : rows)
      std::printf("distinct_views=%d mean PSNR %.3f dB\n", r.distinct_views,
                  r.metrics.mean_psnr);
  });
}

// ---------------------------------------------------------------------------
// embed

struct EmbedArgs {
  std::string dataset_path;
  int side = 64;
  int frames = 64;
  double amplitude = 3.0;
  std::uint64_t phantom_seed = 9000;
  std::vector<int> ranks = {1, 2, 3, 4, 8};
  std::string arch = "7x44x10";
  int iters = 25000;
  double lr = 5e-3;
  double lr_floor = 0.0;
  int batch = 2048;
  std::uint64_t fit_seed = 11;
  int record_every = 0;
  std::string out;
};

NFArch parse_arch(const std::string& s) {
  NFArch a;
  if (std::sscanf(s.c_str(), "%dx%dx%d", &a.hidden_layers, &a.width,
                  &a.freqs) != 3)
    throw ValidationError("embed: --arch must look like 7x44x10 "
                          "(layers x width x frequencies)");
  return a;
}

void add_embed(CLI::App& app, EmbedArgs& a) {
  auto* cmd = app.add_subcommand(
      "embed", "Representation benchmark: network fit vs rank-K truncation");
  cmd->add_option("--dataset", a.dataset_path,
                  "Object container (skips phantom generation)");
  cmd->add_option("--side", a.side)->capture_default_str();
  cmd->add_option("--frames", a.frames)->capture_default_str();
  cmd->add_option("--amplitude", a.amplitude)->capture_default_str();
  cmd->add_option("--phantom-seed", a.phantom_seed)->capture_default_str();
  cmd->add_option("--ranks", a.ranks, "Truncation ranks")
      ->delimiter(',')
      ->capture_default_str();
  cmd->add_option("--arch", a.arch, "layers x width x frequencies")
      ->capture_default_str();
  cmd->add_option("--iters", a.iters)->capture_default_str();
  cmd->add_option("--lr", a.lr)->capture_default_str();
  cmd->add_option("--lr-floor", a.lr_floor,
                  "Final rate as a fraction of --lr")
      ->capture_default_str();
  cmd->add_option("--batch", a.batch)->capture_default_str();
  cmd->add_option("--fit-seed", a.fit_seed)->capture_default_str();
  cmd->add_option("--record-every", a.record_every,
                  "PSNR trajectory cadence in iterations")
      ->capture_default_str();
  cmd->add_option("--out", a.out, "Output directory")->required();
  cmd->callback([&a] {
    DatasetSpec spec;
    spec.path = a.dataset_path;
    spec.side = a.side;
    spec.frames = a.frames;
    spec.warp_amplitude = a.amplitude;
    spec.seed = a.phantom_seed;
    const auto obj = detail::build_dataset(spec);

    EmbeddingFitConfig cfg;
    cfg.arch = parse_arch(a.arch);
    cfg.iters = a.iters;
    cfg.lr = a.lr;
    cfg.lr_floor = a.lr_floor;
    cfg.batch = a.batch;
    cfg.seed = a.fit_seed;
    cfg.record_every = a.record_every;

    std::vector<EmbeddingResult> rows;
    for (int k : a.ranks) rows.push_back(psm_embedding_result(obj, k));
    const auto fit = fit_nf_embedding(obj, cfg);
    rows.push_back(fit.result);

    const std::filesystem::path dir = resolve_out(a.out);
    std::filesystem::create_directories(dir);
    write_file((dir / "embedding.csv").string(), embedding_csv(rows));

    LinePlot lp;
    lp.title = "fit PSNR over iterations";
    lp.x_label = "iteration";
    lp.y_label = "PSNR (dB)";
    PlotSeries series;
    series.label = fit.result.label;
    const auto& traj = fit.result.psnr_trajectory;
    for (std::size_t i = 0; i < traj.size(); ++i) {
      const bool final_entry = i + 1 == traj.size();
      series.x.push_back(final_entry ? a.iters
                                     : static_cast<double>(a.record_every) *
                                           static_cast<double>(i + 1));
      series.y.push_back(traj[i]);
    }
    lp.series.push_back(std::move(series));
    write_file((dir / "fit_trajectory.svg").string(), svg_line_plot(lp));

    for (const auto& r : rows)
      std::printf("%-14s %8lld params  %7.3f dB  ssim %.4f\n",
                  r.label.c_str(), static_cast<long long>(r.param_count),
                  r.psnr, r.ssim);
    std::printf("-> %s\n", dir.string().c_str());
  });
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string est;
  std::string ref;
  std::vector<int> frames;
  double peak = -1;
  std::string out;
};

void add_evaluate(CLI::App& app, EvaluateArgs& a) {
  auto* cmd = app.add_subcommand(
      "evaluate", "Metrics between two object containers");
  cmd->add_option("--est", a.est, "Estimate container")->required();
  cmd->add_option("--ref", a.ref, "Reference container")->required();
  cmd->add_option("--frames", a.frames, "Frame subset (default: all)")
      ->delimiter(',');
  cmd->add_option("--peak", a.peak, "PSNR peak (default: max of reference)")
      ->capture_default_str();
  cmd->add_option("--out", a.out, "Write CSV here instead of stdout");
  cmd->callback([&a] {
    const auto est = load_object<double>(a.est);
    const auto ref = load_object<double>(a.ref);
    const MetricsRecord rec = evaluate(est, ref, a.frames, a.peak);
    const std::string csv = metrics_csv(rec);
    if (a.out.empty()) {
      std::fputs(csv.c_str(), stdout);
    } else {
      const std::string out = resolve_out(a.out);
      write_file(out, csv);
      std::printf("mean PSNR %.3f dB -> %s\n", rec.mean_psnr, out.c_str());
    }
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic CT reconstruction toolkit"};
  app.require_subcommand(1);
  app.footer("Relative output paths are rooted at $" +
             std::string(kOutputRootEnv) +
             " when set.\nExit codes: 0 success, 2 invalid inputs or files, "
             "3 numerical failure.");

  PhantomArgs phantom;
  SimulateArgs simulate;
  TrainArgs train;
  ReconstructArgs reconstruct;
  SweepArgs sweep;
  EmbedArgs embed;
  EvaluateArgs evaluate;
  add_phantom(app, phantom);
  add_simulate(app, simulate);
  add_train(app, train);
  add_reconstruct(app, reconstruct);
  add_sweep(app, sweep);
  add_embed(app, embed);
  add_evaluate(app, evaluate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 0;
}
