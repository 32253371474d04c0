#include <catch2/catch_amalgamated.hpp>

#include "dyntomo/phantom.hpp"
#include "helpers.hpp"

using namespace dyntomo;

namespace {

// Independent warp oracle: split every base row into 8 sub-rows, displace
// each sub-row by the field evaluated at the sub-row's own coordinate, and
// splat linearly with the same edge clamping. Converges to the continuous
// pushforward of the row-band density.
Mat<double> warp_oracle(const WarpRecipe<double>& recipe, int t) {
  const int side = static_cast<int>(recipe.base.rows());
  const int ss = 8;
  Mat<double> out = Mat<double>::Zero(side, side);
  for (int r = 0; r < side; ++r) {
    for (int i = 0; i < ss; ++i) {
      const double sub = r - 0.5 + (i + 0.5) / ss;
      const double target = sub + warp_displacement(recipe, t, sub);
      // Recenter the sub-row offset so an identity warp reproduces row r.
      const double pos = target - (sub - r);
      double tf = std::floor(pos);
      int k0 = static_cast<int>(tf);
      double w = pos - tf;
      if (k0 < 0) { k0 = 0; w = 0; }
      if (k0 >= side - 1) { k0 = side - 1; w = 0; }
      out.row(k0) += recipe.base.row(r) * (1.0 - w) / ss;
      if (w != 0) out.row(k0 + 1) += recipe.base.row(r) * w / ss;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("warp with zero amplitude reproduces the base frame bit-exactly",
          "[data]") {
  auto base = rings_slice<double>(64, 3);
  auto recipe = WarpRecipe<double>::ramp(base, 16, 4.0);
  auto obj = warp_sequence(recipe);
  REQUIRE(obj.num_frames() == 16);
  REQUIRE((obj.frames[0].array() == base.array()).all());
}

TEST_CASE("warp displacement matches the closed form at control rows",
          "[data]") {
  const int side = 64, N = 8;
  auto recipe = WarpRecipe<double>::ramp(rings_slice<double>(side, 4), 10,
                                         side / 16.0, N);
  const int band = side / N;
  for (int t = 0; t < 10; ++t) {
    const double amp = recipe.amplitude[t];
    for (int n = 0; n < N; ++n) {
      const double expect = -amp * std::sin(3.0 * kPi * n / N);
      REQUIRE(warp_displacement(recipe, t, double(n * band)) == expect);
    }
    // Control row 0 never moves.
    REQUIRE(warp_displacement(recipe, t, 0.0) == 0.0);
  }
}

TEST_CASE("warp conserves mass and matches the supersampled oracle",
          "[data]") {
  const int side = 64;
  auto base = rings_slice<double>(side, 9);
  auto recipe = WarpRecipe<double>::ramp(base, 8, side / 16.0);
  auto obj = warp_sequence(recipe);
  const double base_mass = base.sum();

  for (int t = 0; t < 8; ++t) {
    const double mass = obj.frames[t].sum();
    REQUIRE(testutil::rel_err(mass, base_mass) < 0.01);

    const Mat<double> oracle = warp_oracle(recipe, t);
    REQUIRE(testutil::rel_err(oracle.sum(), base_mass) < 0.01);
    const double mean_abs =
        (obj.frames[t] - oracle).cwiseAbs().mean();
    INFO("frame " << t << " mean abs deviation from oracle " << mean_abs);
    REQUIRE(mean_abs < 0.02 * base.maxCoeff());
  }
}

TEST_CASE("warp recipes are validated", "[data]") {
  auto base = rings_slice<double>(64, 1);

  SECTION("negative amplitude") {
    auto recipe = WarpRecipe<double>::ramp(base, 4, 2.0);
    recipe.amplitude[2] = -1.0;
    REQUIRE_THROWS_AS(warp_sequence(recipe), ValidationError);
  }
  SECTION("amplitude must start at zero") {
    auto recipe = WarpRecipe<double>::ramp(base, 4, 2.0);
    recipe.amplitude[0] = 0.5;
    REQUIRE_THROWS_AS(warp_sequence(recipe), ValidationError);
  }
  SECTION("side must divide into control bands") {
    auto recipe = WarpRecipe<double>::ramp(base, 4, 2.0, 7);
    REQUIRE_THROWS_AS(warp_sequence(recipe), ValidationError);
  }
  SECTION("at least two control rows") {
    auto recipe = WarpRecipe<double>::ramp(base, 4, 2.0, 1);
    REQUIRE_THROWS_AS(warp_sequence(recipe), ValidationError);
  }
}

TEST_CASE("procedural phantoms are deterministic, bounded and validated",
          "[data]") {
  const int side = 32, frames = 16;
  for (const std::string recipe :
       {"ellipses", "porous", "gallery", "warped-rings"}) {
    DYNAMIC_SECTION("recipe " << recipe) {
      auto a = procedural_phantom<double>(recipe, side, frames, 11);
      auto b = procedural_phantom<double>(recipe, side, frames, 11);
      auto c = procedural_phantom<double>(recipe, side, frames, 12);
      REQUIRE(a.object.num_frames() == frames);

      bool differs = false;
      double worst_step = 0;
      for (int t = 0; t < frames; ++t) {
        REQUIRE((a.object.frames[t].array() == b.object.frames[t].array())
                    .all());
        differs =
            differs ||
            (a.object.frames[t] - c.object.frames[t]).cwiseAbs().sum() > 0;
        REQUIRE(a.object.frames[t].minCoeff() >= 0.0);
        REQUIRE(a.object.frames[t].maxCoeff() <= 1.0);
        if (t > 0)
          worst_step = std::max(
              worst_step,
              (a.object.frames[t] - a.object.frames[t - 1]).cwiseAbs().mean());
      }
      REQUIRE(differs);
      INFO("worst inter-frame mean abs change " << worst_step
           << ", declared bound " << a.velocity_bound);
      REQUIRE(worst_step <= a.velocity_bound);
    }
  }
  REQUIRE_THROWS_AS(procedural_phantom<double>("nope", side, frames, 1),
                    ValidationError);
}

TEST_CASE("ingesting a slice stack resizes with mass preserved", "[data]") {
  const auto dir = testutil::temp_dir();
  const auto path = (dir / "stack.dtc").string();

  const int slices = 200, source_side = 48, target_side = 32;
  std::vector<Mat<double>> stack;
  Rng rng(31);
  for (int i = 0; i < slices; ++i) {
    const double sigma = rng.uniform(4.0, 9.0);
    const double amp = rng.uniform(0.5, 1.0);
    stack.push_back(gaussian_blob<double>(source_side, sigma, amp));
  }
  ArrayStore store;
  store.meta["kind"] = "slice_stack";
  store.meta["pixel_spacing"] = 1.0;
  store.put_frames("frames", stack);
  store.save(path);

  auto obj = ingest_volume<double>(path, target_side);
  REQUIRE(obj.num_frames() == slices);
  REQUIRE(obj.side() == target_side);
  for (int i = 0; i < slices; ++i) {
    // Mean preservation is mass preservation once the spacing rescale is
    // accounted for.
    const double src_mean = stack[i].mean();
    const double dst_mean = obj.frames[i].mean();
    REQUIRE(testutil::rel_err(dst_mean, src_mean) < 0.02);
  }

  SECTION("integer-ratio path uses exact box averaging") {
    Mat<double> img = rings_slice<double>(64, 5);
    Mat<double> half = resize_frame(img, 32);
    REQUIRE(testutil::rel_err(half.mean(), img.mean()) < 1e-12);
  }
  SECTION("identity resize returns the input") {
    Mat<double> img = rings_slice<double>(32, 6);
    REQUIRE((resize_frame(img, 32).array() == img.array()).all());
  }
  SECTION("missing frames array is an error") {
    ArrayStore empty;
    const auto p2 = (dir / "empty.dtc").string();
    empty.save(p2);
    REQUIRE_THROWS_AS(ingest_volume<double>(p2, 16), IoError);
  }
}
