#pragma once

// On-disk container for named n-d arrays plus a JSON metadata block.
// Layout (all integers little-endian):
//
//   bytes 0..7   magic "DYNTOMO1"
//   u32          format version (currently 1)
//   u64          metadata length in bytes, then that many UTF-8 JSON bytes
//   u32          array count
//   per array:   u16 name length, name bytes,
//                u8 dtype, u8 ndim, u64 dims[ndim],
//                payload (row-major, prod(dims) elements)
//
// Loading is strict: any structural mismatch raises IoError carrying the
// byte offset where parsing stopped. Save/load round trips are bit-exact
// because payloads are stored as raw element bytes.

#include <cstring>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "dyntomo/common.hpp"

namespace dyntomo {

enum class DType : std::uint8_t {
  f32 = 1,
  f64 = 2,
  i64 = 3,
  u64 = 4,
  u8 = 5,
};

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i64: return 8;
    case DType::u64: return 8;
    case DType::u8: return 1;
  }
  throw IoError("unknown dtype tag " +
                std::to_string(static_cast<int>(d)));
}

template <typename T> struct DTypeOf;
template <> struct DTypeOf<float> { static constexpr DType value = DType::f32; };
template <> struct DTypeOf<double> { static constexpr DType value = DType::f64; };
template <> struct DTypeOf<std::int64_t> { static constexpr DType value = DType::i64; };
template <> struct DTypeOf<std::uint64_t> { static constexpr DType value = DType::u64; };
template <> struct DTypeOf<std::uint8_t> { static constexpr DType value = DType::u8; };

struct StoredArray {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;

  std::uint64_t num_elements() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

class ArrayStore {
 public:
  nlohmann::json meta = nlohmann::json::object();

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  const StoredArray& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw IoError("ArrayStore: no array named '" + name + "'");
    return arrays_[it->second];
  }

  const std::vector<StoredArray>& arrays() const { return arrays_; }

  template <typename T>
  void put(const std::string& name, std::vector<std::uint64_t> shape,
           const T* data) {
    StoredArray a;
    a.name = name;
    a.dtype = DTypeOf<T>::value;
    a.shape = std::move(shape);
    a.bytes.resize(a.num_elements() * sizeof(T));
    if (!a.bytes.empty()) std::memcpy(a.bytes.data(), data, a.bytes.size());
    auto it = index_.find(name);
    if (it != index_.end()) {
      arrays_[it->second] = std::move(a);
    } else {
      index_[name] = arrays_.size();
      arrays_.push_back(std::move(a));
    }
  }

  // Matrices are stored row-major regardless of Eigen's in-memory layout, so
  // files are readable without knowing the writer's column-major convention.
  template <typename T>
  void put_matrix(const std::string& name, const Mat<T>& m) {
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    put<T>(name,
           {static_cast<std::uint64_t>(m.rows()),
            static_cast<std::uint64_t>(m.cols())},
           rm.data());
  }

  template <typename T>
  void put_vector(const std::string& name, const Vec<T>& v) {
    put<T>(name, {static_cast<std::uint64_t>(v.size())}, v.data());
  }

  template <typename T>
  void put_scalar(const std::string& name, T v) {
    put<T>(name, {1}, &v);
  }

  // Stacked frames as one 3-d array, shape {P, J, J}.
  template <typename T>
  void put_frames(const std::string& name, const std::vector<Mat<T>>& frames) {
    if (frames.empty())
      throw ValidationError("put_frames: empty frame list");
    const auto r = frames.front().rows(), c = frames.front().cols();
    std::vector<T> buf;
    buf.reserve(frames.size() * r * c);
    for (const auto& f : frames) {
      if (f.rows() != r || f.cols() != c)
        throw ValidationError("put_frames: frames disagree on shape");
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = f;
      buf.insert(buf.end(), rm.data(), rm.data() + r * c);
    }
    put<T>(name,
           {static_cast<std::uint64_t>(frames.size()),
            static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(c)},
           buf.data());
  }

  template <typename T>
  Mat<T> get_matrix(const std::string& name) const {
    const auto& a = checked<T>(name, 2);
    const auto r = static_cast<Eigen::Index>(a.shape[0]);
    const auto c = static_cast<Eigen::Index>(a.shape[1]);
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(r, c);
    std::memcpy(rm.data(), a.bytes.data(), a.bytes.size());
    return rm;
  }

  template <typename T>
  Vec<T> get_vector(const std::string& name) const {
    const auto& a = checked<T>(name, 1);
    Vec<T> v(static_cast<Eigen::Index>(a.shape[0]));
    std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
    return v;
  }

  template <typename T>
  T get_scalar(const std::string& name) const {
    const auto& a = checked<T>(name, 1);
    if (a.shape[0] != 1)
      throw IoError("ArrayStore: '" + name + "' is not a scalar");
    T v;
    std::memcpy(&v, a.bytes.data(), sizeof(T));
    return v;
  }

  template <typename T>
  std::vector<Mat<T>> get_frames(const std::string& name) const {
    const auto& a = checked<T>(name, 3);
    const auto p = static_cast<Eigen::Index>(a.shape[0]);
    const auto r = static_cast<Eigen::Index>(a.shape[1]);
    const auto c = static_cast<Eigen::Index>(a.shape[2]);
    std::vector<Mat<T>> frames(p);
    const auto* src = a.bytes.data();
    for (Eigen::Index i = 0; i < p; ++i) {
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(r, c);
      std::memcpy(rm.data(), src, sizeof(T) * r * c);
      src += sizeof(T) * r * c;
      frames[i] = rm;
    }
    return frames;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(kMagic, 8);
    write_u32(f, kVersion);
    const std::string meta_str = meta.dump();
    write_u64(f, meta_str.size());
    f.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    write_u32(f, static_cast<std::uint32_t>(arrays_.size()));
    for (const auto& a : arrays_) {
      if (a.name.size() > 0xffff)
        throw ValidationError("array name too long: " + a.name);
      write_u16(f, static_cast<std::uint16_t>(a.name.size()));
      f.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
      const std::uint8_t dt = static_cast<std::uint8_t>(a.dtype);
      const std::uint8_t nd = static_cast<std::uint8_t>(a.shape.size());
      f.write(reinterpret_cast<const char*>(&dt), 1);
      f.write(reinterpret_cast<const char*>(&nd), 1);
      for (auto d : a.shape) write_u64(f, d);
      const std::uint64_t want = a.num_elements() * dtype_size(a.dtype);
      if (want != a.bytes.size())
        throw ValidationError("array '" + a.name +
                              "': payload size disagrees with shape");
      f.write(reinterpret_cast<const char*>(a.bytes.data()),
              static_cast<std::streamsize>(a.bytes.size()));
    }
    if (!f) throw IoError("write to '" + path + "' failed");
  }

  static ArrayStore load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    Reader r(f, path);
    char magic[8];
    r.read(magic, 8, "magic");
    if (std::memcmp(magic, kMagic, 8) != 0)
      r.fail("bad magic (not a container file)", 0);
    const auto version = r.u32("version");
    if (version != kVersion)
      r.fail("unsupported version " + std::to_string(version), r.offset - 4);
    const auto meta_len = r.u64("metadata length");
    std::string meta_str(meta_len, '\0');
    r.read(meta_str.data(), meta_len, "metadata block");
    ArrayStore store;
    try {
      store.meta = meta_len ? nlohmann::json::parse(meta_str)
                            : nlohmann::json::object();
    } catch (const nlohmann::json::exception& e) {
      r.fail(std::string("metadata is not valid JSON: ") + e.what(),
             r.offset - meta_len);
    }
    const auto count = r.u32("array count");
    for (std::uint32_t i = 0; i < count; ++i) {
      StoredArray a;
      const auto name_len = r.u16("array name length");
      a.name.resize(name_len);
      r.read(a.name.data(), name_len, "array name");
      std::uint8_t dt = 0, nd = 0;
      r.read(reinterpret_cast<char*>(&dt), 1, "dtype tag");
      r.read(reinterpret_cast<char*>(&nd), 1, "ndim");
      if (dt < 1 || dt > 5)
        r.fail("array '" + a.name + "': unknown dtype tag " +
               std::to_string(int(dt)), r.offset - 2);
      if (nd == 0 || nd > 8)
        r.fail("array '" + a.name + "': ndim out of range", r.offset - 1);
      a.dtype = static_cast<DType>(dt);
      a.shape.resize(nd);
      for (auto& d : a.shape) d = r.u64("dimension");
      const std::uint64_t payload = a.num_elements() * dtype_size(a.dtype);
      a.bytes.resize(payload);
      r.read(reinterpret_cast<char*>(a.bytes.data()), payload,
             ("payload of '" + a.name + "'").c_str());
      store.index_[a.name] = store.arrays_.size();
      store.arrays_.push_back(std::move(a));
    }
    // Declared lengths must consume the file exactly; trailing garbage means
    // the writer and the header disagree.
    char probe;
    f.read(&probe, 1);
    if (!f.eof())
      r.fail("trailing bytes after last declared array", r.offset);
    return store;
  }

 private:
  static constexpr const char* kMagic = "DYNTOMO1";
  static constexpr std::uint32_t kVersion = 1;

  struct Reader {
    std::istream& f;
    const std::string& path;
    std::uint64_t offset = 0;
    Reader(std::istream& f_, const std::string& p) : f(f_), path(p) {}

    [[noreturn]] void fail(const std::string& why, std::uint64_t at) const {
      throw IoError(path + ": " + why + " (at byte offset " +
                    std::to_string(at) + ")");
    }
    void read(char* dst, std::uint64_t n, const char* what) {
      f.read(dst, static_cast<std::streamsize>(n));
      if (static_cast<std::uint64_t>(f.gcount()) != n)
        fail(std::string("truncated while reading ") + what +
                 " (wanted " + std::to_string(n) + " bytes, got " +
                 std::to_string(f.gcount()) + ")",
             offset);
      offset += n;
    }
    std::uint16_t u16(const char* what) { return read_int<std::uint16_t>(what); }
    std::uint32_t u32(const char* what) { return read_int<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return read_int<std::uint64_t>(what); }
    template <typename U>
    U read_int(const char* what) {
      std::uint8_t buf[sizeof(U)];
      read(reinterpret_cast<char*>(buf), sizeof(U), what);
      U v = 0;
      for (std::size_t i = 0; i < sizeof(U); ++i)
        v |= static_cast<U>(buf[i]) << (8 * i);
      return v;
    }
  };

  static void write_u16(std::ostream& f, std::uint16_t v) { write_int(f, v); }
  static void write_u32(std::ostream& f, std::uint32_t v) { write_int(f, v); }
  static void write_u64(std::ostream& f, std::uint64_t v) { write_int(f, v); }
  template <typename U>
  static void write_int(std::ostream& f, U v) {
    std::uint8_t buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i)
      buf[i] = static_cast<std::uint8_t>(v >> (8 * i));
    f.write(reinterpret_cast<const char*>(buf), sizeof(U));
  }

  template <typename T>
  const StoredArray& checked(const std::string& name,
                             std::size_t want_ndim) const {
    const auto& a = get(name);
    if (a.dtype != DTypeOf<T>::value)
      throw IoError("ArrayStore: '" + name + "' has dtype tag " +
                    std::to_string(static_cast<int>(a.dtype)) +
                    ", requested " +
                    std::to_string(static_cast<int>(DTypeOf<T>::value)));
    if (a.shape.size() != want_ndim)
      throw IoError("ArrayStore: '" + name + "' has ndim " +
                    std::to_string(a.shape.size()) + ", requested " +
                    std::to_string(want_ndim));
    return a;
  }

  std::vector<StoredArray> arrays_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace dyntomo
