#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "dyntomo/container.hpp"
#include "dyntomo/phantom.hpp"
#include "helpers.hpp"

using namespace dyntomo;

namespace {

template <typename T>
DynamicObject<T> random_object(int side, int frames, std::uint64_t seed) {
  Rng rng(seed);
  DynamicObject<T> obj;
  for (int t = 0; t < frames; ++t)
    obj.frames.push_back(testutil::random_matrix<T>(side, side, rng));
  obj.pixel_spacing = T(1);
  obj.normalization = T(1);
  obj.provenance = "random(seed=" + std::to_string(seed) + ")";
  return obj;
}

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(f),
                           std::istreambuf_iterator<char>());
}

void dump(const std::filesystem::path& p, const std::vector<char>& bytes,
          std::size_t count) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(count));
}

}  // namespace

TEST_CASE("object round trip is bit-exact", "[data]") {
  const auto dir = testutil::temp_dir();
  const auto path = (dir / "obj.dtc").string();

  SECTION("double precision") {
    auto obj = random_object<double>(17, 5, 42);
    save_object(obj, path);
    auto back = load_object<double>(path);
    REQUIRE(back.num_frames() == obj.num_frames());
    for (int t = 0; t < obj.num_frames(); ++t)
      REQUIRE((back.frames[t].array() == obj.frames[t].array()).all());
    REQUIRE(back.pixel_spacing == obj.pixel_spacing);
    REQUIRE(back.normalization == obj.normalization);
    REQUIRE(back.provenance == obj.provenance);
  }

  SECTION("single precision") {
    auto obj = random_object<float>(9, 3, 7);
    save_object(obj, path);
    auto back = load_object<float>(path);
    for (int t = 0; t < obj.num_frames(); ++t)
      REQUIRE((back.frames[t].array() == obj.frames[t].array()).all());
  }
}

TEST_CASE("sinogram round trip preserves schedule and noise metadata",
          "[data][acq]") {
  const auto dir = testutil::temp_dir();
  const auto path = (dir / "sino.dtc").string();
  Rng rng(3);
  DynamicObject<double> obj;
  for (int t = 0; t < 8; ++t)
    obj.frames.push_back(disk_phantom<double>(16, 5.0));
  auto sched = bit_reversed_schedule(8);
  auto sinos = simulate_measurements(obj, sched, 0.25, 99);
  save_sinogram(sinos, path);
  auto back = load_sinogram<double>(path);

  REQUIRE(back.num_views() == sinos.num_views());
  REQUIRE(back.noise_sigma == sinos.noise_sigma);
  REQUIRE(back.schedule.scheme == "bit-reversed");
  REQUIRE(back.schedule.distinct_views == 8);
  for (int p = 0; p < 8; ++p) {
    REQUIRE((back.projections[p].bins.array() ==
             sinos.projections[p].bins.array())
                .all());
    REQUIRE(back.projections[p].angle == sinos.projections[p].angle);
    REQUIRE(back.projections[p].time_index == p);
    REQUIRE(back.schedule.times[p] == sinos.schedule.times[p]);
  }
}

TEST_CASE("raw arrays of every dtype round trip", "[data]") {
  const auto dir = testutil::temp_dir();
  const auto path = (dir / "arrays.dtc").string();
  ArrayStore store;
  store.meta["note"] = "dtype coverage";

  std::vector<std::uint8_t> bytes = {0, 1, 255, 128};
  std::vector<std::int64_t> ints = {-5, 0, 1ll << 40};
  std::vector<std::uint64_t> uints = {0, 1ull << 63};
  store.put<std::uint8_t>("bytes", {4}, bytes.data());
  store.put<std::int64_t>("ints", {3}, ints.data());
  store.put<std::uint64_t>("uints", {2}, uints.data());
  Rng rng(5);
  Mat<float> mf = testutil::random_matrix<float>(3, 4, rng);
  Mat<double> md = testutil::random_matrix<double>(4, 3, rng);
  store.put_matrix("mf", mf);
  store.put_matrix("md", md);
  store.save(path);

  auto back = ArrayStore::load(path);
  REQUIRE(back.meta["note"] == "dtype coverage");
  REQUIRE(back.get("bytes").bytes == store.get("bytes").bytes);
  REQUIRE(back.get("ints").bytes == store.get("ints").bytes);
  REQUIRE(back.get("uints").bytes == store.get("uints").bytes);
  REQUIRE((back.get_matrix<float>("mf").array() == mf.array()).all());
  REQUIRE((back.get_matrix<double>("md").array() == md.array()).all());
}

TEST_CASE("loading rejects corruption with a byte offset", "[data]") {
  const auto dir = testutil::temp_dir();
  const auto path = dir / "victim.dtc";
  auto obj = random_object<double>(8, 2, 11);
  save_object(obj, path.string());
  const auto bytes = slurp(path);
  REQUIRE(bytes.size() > 64);

  SECTION("truncated mid-payload") {
    dump(path, bytes, bytes.size() - 17);
    try {
      ArrayStore::load(path.string());
      FAIL("expected IoError");
    } catch (const IoError& e) {
      REQUIRE(std::string(e.what()).find("byte offset") != std::string::npos);
      REQUIRE(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }

  SECTION("truncated inside the header") {
    dump(path, bytes, 10);
    REQUIRE_THROWS_AS(ArrayStore::load(path.string()), IoError);
  }

  SECTION("bad magic") {
    auto mutated = bytes;
    mutated[0] = 'X';
    dump(path, mutated, mutated.size());
    try {
      ArrayStore::load(path.string());
      FAIL("expected IoError");
    } catch (const IoError& e) {
      REQUIRE(std::string(e.what()).find("magic") != std::string::npos);
    }
  }

  SECTION("trailing garbage after declared arrays") {
    auto mutated = bytes;
    mutated.push_back('z');
    dump(path, mutated, mutated.size());
    try {
      ArrayStore::load(path.string());
      FAIL("expected IoError");
    } catch (const IoError& e) {
      REQUIRE(std::string(e.what()).find("trailing") != std::string::npos);
    }
  }

  SECTION("unknown dtype tag") {
    // Flip the dtype byte of the first array. Locate it: magic(8) +
    // version(4) + meta_len(8) + meta + count(4) + name_len(2) + name.
    auto mutated = bytes;
    std::uint64_t meta_len = 0;
    for (int i = 0; i < 8; ++i)
      meta_len |= static_cast<std::uint64_t>(
                      static_cast<unsigned char>(bytes[12 + i]))
                  << (8 * i);
    std::size_t pos = 8 + 4 + 8 + meta_len + 4;
    std::uint16_t name_len =
        static_cast<unsigned char>(bytes[pos]) |
        (static_cast<unsigned char>(bytes[pos + 1]) << 8);
    pos += 2 + name_len;
    mutated[pos] = char(200);
    dump(path, mutated, mutated.size());
    try {
      ArrayStore::load(path.string());
      FAIL("expected IoError");
    } catch (const IoError& e) {
      REQUIRE(std::string(e.what()).find("dtype") != std::string::npos);
      REQUIRE(std::string(e.what()).find("byte offset") != std::string::npos);
    }
  }
}

TEST_CASE("store lookups validate dtype, shape and existence", "[data]") {
  ArrayStore store;
  Mat<double> m = Mat<double>::Identity(3, 3);
  store.put_matrix("m", m);
  REQUIRE_THROWS_AS(store.get("nope"), IoError);
  REQUIRE_THROWS_AS(store.get_matrix<float>("m"), IoError);   // dtype
  REQUIRE_THROWS_AS(store.get_vector<double>("m"), IoError);  // ndim
  REQUIRE_THROWS_AS(ArrayStore::load("/nonexistent/nowhere.dtc"), IoError);
}
