#pragma once

// Coordinate-network representation of the dynamic object: sinusoidal
// positional encoding of (x, y, t), a ReLU MLP with a raw linear scalar
// output, grid rendering, exact reverse-mode gradients for any loss that is
// a function of the rendered values, and an Adam optimizer over the
// parameters.
//
// Evaluation convention: a batch of points is processed one column at a
// time (one GEMV per point) instead of a single GEMM over the batch.
// Eigen's GEMM kernel changes its packing with the operand shapes, so GEMM
// results are not guaranteed to match per-point evaluation at the bit
// level. The per-column form makes a batch identical to n separate calls
// by construction, and at these sizes (weight matrices resident in L1) it
// is also the faster path.

#include <array>
#include <cstdint>
#include <utility>

#include "dyntomo/common.hpp"
#include "dyntomo/container.hpp"

namespace dyntomo {

// Frequency bank for the encoding: band l covers angular frequency l*pi/2,
// l = 1..L, so the bands rise linearly and the slowest one completes a
// quarter period across the unit coordinate range.
struct PosEncConfig {
  int L = 10;
};

inline void validate_posenc(const PosEncConfig& cfg) {
  if (cfg.L < 1)
    throw ValidationError("posenc: frequency count L must be >= 1, got " +
                          std::to_string(cfg.L));
}

namespace detail {

template <typename T>
void check_unit_coord(T v, const char* what) {
  if (!(v >= T(0) && v <= T(1)))
    throw ValidationError(std::string(what) +
                          ": coordinates must be pre-normalized to [0,1]");
}

// Flattened encoding of one point, written to dst[0..6L-1]. Band l occupies
// entries 6(l-1)..6(l-1)+5 as (sin wx, sin wy, sin wt, cos wx, cos wy,
// cos wt) with w = l*pi/2, matching the rows of posenc below.
template <typename T>
void posenc_flat(T x, T y, T t, int L, T* dst) {
  for (int l = 1; l <= L; ++l) {
    const T w = T(l) * T(kPi) / T(2);
    T* r = dst + 6 * (l - 1);
    r[0] = std::sin(w * x);
    r[1] = std::sin(w * y);
    r[2] = std::sin(w * t);
    r[3] = std::cos(w * x);
    r[4] = std::cos(w * y);
    r[5] = std::cos(w * t);
  }
}

template <typename T>
Mat<T> encode_points(const Mat<T>& coords, const PosEncConfig& cfg) {
  validate_posenc(cfg);
  if (coords.rows() != 3)
    throw ValidationError("nf_forward: coords must be 3 x n, one point per "
                          "column, got " +
                          std::to_string(coords.rows()) + " rows");
  Mat<T> enc(6 * cfg.L, coords.cols());
  for (Eigen::Index j = 0; j < coords.cols(); ++j) {
    check_unit_coord(coords(0, j), "nf_forward");
    check_unit_coord(coords(1, j), "nf_forward");
    check_unit_coord(coords(2, j), "nf_forward");
    posenc_flat(coords(0, j), coords(1, j), coords(2, j), cfg.L,
                enc.col(j).data());
  }
  return enc;
}

}  // namespace detail

// The encoding matrix itself: row l-1 holds the three sines then the three
// cosines of the coordinates at frequency l*pi/2.
template <typename T>
Mat<T> posenc(const std::array<T, 3>& nu, const PosEncConfig& cfg) {
  validate_posenc(cfg);
  detail::check_unit_coord(nu[0], "posenc");
  detail::check_unit_coord(nu[1], "posenc");
  detail::check_unit_coord(nu[2], "posenc");
  Mat<T> enc(cfg.L, 6);
  Vec<T> flat(6 * cfg.L);
  detail::posenc_flat(nu[0], nu[1], nu[2], cfg.L, flat.data());
  for (int l = 0; l < cfg.L; ++l)
    for (int k = 0; k < 6; ++k) enc(l, k) = flat(6 * l + k);
  return enc;
}

// MLP over the encoded coordinates. weights[0] maps the 6L encoding to the
// first hidden layer, weights[1..h-1] are the remaining hidden layers and
// weights[h] is the 1-row output map. ReLU after every hidden layer, raw
// linear output (negative densities are allowed in iterates; clamping is a
// display concern).
template <typename T>
struct NFParams {
  PosEncConfig posenc;
  int hidden_layers = 7;
  int width = 64;
  std::string activation = "relu";
  std::vector<Mat<T>> weights;
  std::vector<Vec<T>> biases;
  std::uint64_t init_seed = 0;
};

template <typename T>
void validate_nf(const NFParams<T>& p) {
  validate_posenc(p.posenc);
  if (p.hidden_layers < 1)
    throw ValidationError("NFParams: need at least one hidden layer");
  if (p.width < 1) throw ValidationError("NFParams: width must be >= 1");
  if (p.activation != "relu")
    throw ValidationError("NFParams: unsupported activation '" +
                          p.activation + "'");
  const auto n_layers = static_cast<std::size_t>(p.hidden_layers) + 1;
  if (p.weights.size() != n_layers || p.biases.size() != n_layers)
    throw ValidationError("NFParams: expected " + std::to_string(n_layers) +
                          " weight/bias pairs, got " +
                          std::to_string(p.weights.size()) + "/" +
                          std::to_string(p.biases.size()));
  Eigen::Index in = 6 * p.posenc.L;
  for (std::size_t k = 0; k < n_layers; ++k) {
    const Eigen::Index out = (k + 1 == n_layers) ? 1 : p.width;
    if (p.weights[k].rows() != out || p.weights[k].cols() != in)
      throw ValidationError("NFParams: layer " + std::to_string(k) +
                            " must be " + std::to_string(out) + "x" +
                            std::to_string(in) + ", got " +
                            std::to_string(p.weights[k].rows()) + "x" +
                            std::to_string(p.weights[k].cols()));
    if (p.biases[k].size() != out)
      throw ValidationError("NFParams: bias " + std::to_string(k) +
                            " has wrong length");
    if (!p.weights[k].allFinite() || !p.biases[k].allFinite())
      throw ValidationError("NFParams: layer " + std::to_string(k) +
                            " contains non-finite values");
    in = out;
  }
}

// Stored parameter entries; the closed-form count per layer is (in+1)*out.
template <typename T>
std::int64_t nf_param_count(const NFParams<T>& p) {
  std::int64_t n = 0;
  for (const auto& w : p.weights) n += w.size();
  for (const auto& b : p.biases) n += b.size();
  return n;
}

// Fan-in He-style uniform initialization: |w| <= sqrt(6 / fan_in), biases
// zero. The seed is recorded on the params so runs can be reproduced.
template <typename T>
NFParams<T> nf_init(const PosEncConfig& enc, int hidden_layers, int width,
                    std::uint64_t seed) {
  validate_posenc(enc);
  if (hidden_layers < 1)
    throw ValidationError("nf_init: need at least one hidden layer");
  if (width < 1) throw ValidationError("nf_init: width must be >= 1");
  NFParams<T> p;
  p.posenc = enc;
  p.hidden_layers = hidden_layers;
  p.width = width;
  p.init_seed = seed;
  Rng rng(seed);
  const auto n_layers = static_cast<std::size_t>(hidden_layers) + 1;
  p.weights.resize(n_layers);
  p.biases.resize(n_layers);
  Eigen::Index in = 6 * enc.L;
  for (std::size_t k = 0; k < n_layers; ++k) {
    const Eigen::Index out = (k + 1 == n_layers) ? 1 : width;
    auto& w = p.weights[k];
    w.resize(out, in);
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    for (Eigen::Index i = 0; i < w.size(); ++i)
      w.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    p.biases[k] = Vec<T>::Zero(out);
    in = out;
  }
  return p;
}

namespace detail {

// Forward pass over pre-encoded inputs (6L x n, one point per column).
// When `trace` is non-null it receives the post-ReLU activations of every
// hidden layer, which the backward pass consumes. `enc` may be any Eigen
// expression (the gradient driver passes column blocks).
template <typename T, typename EncExpr>
Vec<T> mlp_forward(const NFParams<T>& p, const EncExpr& enc,
                   std::vector<Mat<T>>* trace = nullptr) {
  const int h = p.hidden_layers;
  const Eigen::Index n = enc.cols();
  if (trace) trace->assign(static_cast<std::size_t>(h), Mat<T>());
  Mat<T> cur(p.width, n), nxt(p.width, n);
  for (Eigen::Index j = 0; j < n; ++j)
    cur.col(j).noalias() = p.weights[0] * enc.col(j);
  cur.colwise() += p.biases[0];
  cur = cur.cwiseMax(T(0));
  if (trace) (*trace)[0] = cur;
  for (int k = 1; k < h; ++k) {
    for (Eigen::Index j = 0; j < n; ++j)
      nxt.col(j).noalias() = p.weights[k] * cur.col(j);
    nxt.colwise() += p.biases[k];
    cur = nxt.cwiseMax(T(0));
    if (trace) (*trace)[static_cast<std::size_t>(k)] = cur;
  }
  Vec<T> out(n);
  const Vec<T> w_out = p.weights[h].row(0).transpose();
  const T b_out = p.biases[h](0);
  for (Eigen::Index j = 0; j < n; ++j)
    out(j) = w_out.dot(cur.col(j)) + b_out;
  return out;
}

}  // namespace detail

// Densities at a batch of points, one per column of `coords` (rows x, y, t,
// all in [0,1]). A batch is bit-identical to evaluating each point alone.
template <typename T>
Vec<T> nf_forward(const NFParams<T>& p, const Mat<T>& coords) {
  validate_nf(p);
  const Mat<T> enc = detail::encode_points(coords, p.posenc);
  return detail::mlp_forward(p, enc);
}

template <typename T>
T nf_forward_one(const NFParams<T>& p, T x, T y, T t) {
  Mat<T> c(3, 1);
  c << x, y, t;
  return nf_forward(p, c)(0);
}

namespace detail {

// Encoding of one whole frame, pixels in row-major order (point r*J + c is
// pixel (r, c)). x comes from the column index, y from the row index,
// matching the projector's geometry. The spatial angles take only J
// distinct values per band, so the trig is tabulated once per axis and the
// table entries are bit-identical to what posenc_flat computes for the same
// coordinates.
template <typename T>
Mat<T> frame_encoding(int J, int P, int t, const PosEncConfig& cfg) {
  const int L = cfg.L;
  Mat<T> tab_sin(L, J), tab_cos(L, J);
  for (int c = 0; c < J; ++c) {
    const T v = (T(c) + T(0.5)) / T(J);
    for (int l = 1; l <= L; ++l) {
      const T w = T(l) * T(kPi) / T(2);
      tab_sin(l - 1, c) = std::sin(w * v);
      tab_cos(l - 1, c) = std::cos(w * v);
    }
  }
  const T tv = (P == 1) ? T(0) : T(t) / T(P - 1);
  Vec<T> t_sin(L), t_cos(L);
  for (int l = 1; l <= L; ++l) {
    const T w = T(l) * T(kPi) / T(2);
    t_sin(l - 1) = std::sin(w * tv);
    t_cos(l - 1) = std::cos(w * tv);
  }
  Mat<T> enc(6 * L, static_cast<Eigen::Index>(J) * J);
  for (int r = 0; r < J; ++r)
    for (int c = 0; c < J; ++c) {
      T* dst = enc.col(static_cast<Eigen::Index>(r) * J + c).data();
      for (int l = 0; l < L; ++l) {
        dst[6 * l + 0] = tab_sin(l, c);
        dst[6 * l + 1] = tab_sin(l, r);
        dst[6 * l + 2] = t_sin(l);
        dst[6 * l + 3] = tab_cos(l, c);
        dst[6 * l + 4] = tab_cos(l, r);
        dst[6 * l + 5] = t_cos(l);
      }
    }
  return enc;
}

}  // namespace detail

// One rendered time frame on the J x J pixel-center grid. Frame t uses the
// time coordinate t/(P-1), or 0 when there is a single frame.
template <typename T>
Mat<T> render_frame(const NFParams<T>& p, int J, int P, int t) {
  validate_nf(p);
  if (J < 1 || P < 1)
    throw ValidationError("render_frame: J and P must be >= 1");
  if (t < 0 || t >= P)
    throw ValidationError("render_frame: frame index out of range");
  const Mat<T> enc = detail::frame_encoding<T>(J, P, t, p.posenc);
  const Vec<T> vals = detail::mlp_forward(p, enc);
  Mat<T> frame(J, J);
  for (int r = 0; r < J; ++r)
    for (int c = 0; c < J; ++c)
      frame(r, c) = vals(static_cast<Eigen::Index>(r) * J + c);
  return frame;
}

template <typename T>
DynamicObject<T> render_grid(const NFParams<T>& p, int J, int P) {
  validate_nf(p);
  if (J < 1 || P < 1)
    throw ValidationError("render_grid: J and P must be >= 1");
  DynamicObject<T> obj;
  obj.frames.reserve(static_cast<std::size_t>(P));
  for (int t = 0; t < P; ++t) obj.frames.push_back(render_frame(p, J, P, t));
  obj.pixel_spacing = T(1);
  obj.normalization = T(1);
  obj.provenance = "neural field render";
  return obj;
}

// Parameter-shaped gradient accumulator.
template <typename T>
struct NFGrads {
  std::vector<Mat<T>> weights;
  std::vector<Vec<T>> biases;
};

template <typename T>
NFGrads<T> nf_zero_grads(const NFParams<T>& p) {
  NFGrads<T> g;
  g.weights.reserve(p.weights.size());
  g.biases.reserve(p.biases.size());
  for (const auto& w : p.weights)
    g.weights.push_back(Mat<T>::Zero(w.rows(), w.cols()));
  for (const auto& b : p.biases) g.biases.push_back(Vec<T>::Zero(b.size()));
  return g;
}

namespace detail {

// Reverse pass for one chunk: `g_out` is dLoss/d(output) per point, `act`
// the hidden activations recorded by mlp_forward. Parameter gradients are
// accumulated into `grads`; ReLU uses the zero subgradient at the kink.
// The per-chunk weight-gradient contractions run as GEMMs: unlike the
// forward pass there is no bit-level batching contract on gradients, only
// determinism for a fixed point order, which GEMM satisfies.
template <typename T, typename EncExpr>
void mlp_backward_chunk(const NFParams<T>& p, const EncExpr& enc,
                        const std::vector<Mat<T>>& act, const Vec<T>& g_out,
                        NFGrads<T>& grads) {
  const int h = p.hidden_layers;
  grads.weights[static_cast<std::size_t>(h)].row(0).noalias() +=
      (act[static_cast<std::size_t>(h - 1)] * g_out).transpose();
  grads.biases[static_cast<std::size_t>(h)](0) += g_out.sum();
  Mat<T> da = p.weights[static_cast<std::size_t>(h)].row(0).transpose() *
              g_out.transpose();
  for (int k = h - 1; k >= 1; --k) {
    const auto uk = static_cast<std::size_t>(k);
    const Mat<T> dz =
        (act[uk].array() > T(0)).select(da.array(), T(0)).matrix();
    grads.weights[uk].noalias() += dz * act[uk - 1].transpose();
    grads.biases[uk].noalias() += dz.rowwise().sum();
    da.noalias() = p.weights[uk].transpose() * dz;
  }
  const Mat<T> dz = (act[0].array() > T(0)).select(da.array(), T(0)).matrix();
  grads.weights[0].noalias() += dz * enc.transpose();
  grads.biases[0].noalias() += dz.rowwise().sum();
}

// Chunk width for gradient evaluation. Values are independent per point, so
// the choice only bounds the activation memory (width x chunk per layer);
// it never changes results.
inline constexpr Eigen::Index kNfGradChunk = 4096;

// Core gradient driver over pre-encoded inputs. Two passes: outputs alone
// are cheap, so the first pass renders every point and hands the full value
// vector to the closure, and the second re-runs each chunk with activation
// recording to backpropagate that chunk's slice of dLoss/d(values). Costs
// one extra forward pass but keeps activation memory bounded.
template <typename T, typename Closure>
std::pair<T, NFGrads<T>> nf_gradient_encoded(const NFParams<T>& p,
                                             const Mat<T>& enc,
                                             Closure&& loss_fn) {
  const Eigen::Index n = enc.cols();
  Vec<T> out(n);
  for (Eigen::Index j0 = 0; j0 < n; j0 += kNfGradChunk) {
    const Eigen::Index m = std::min(kNfGradChunk, n - j0);
    out.segment(j0, m) = mlp_forward(p, enc.middleCols(j0, m));
  }
  std::pair<T, Vec<T>> lg = loss_fn(static_cast<const Vec<T>&>(out));
  const T loss = lg.first;
  const Vec<T>& g_out = lg.second;
  if (!std::isfinite(static_cast<double>(loss)))
    throw NumericalError("nf_gradient: loss is not finite");
  if (g_out.size() != n)
    throw ValidationError("nf_gradient: closure returned gradient of length " +
                          std::to_string(g_out.size()) + " for " +
                          std::to_string(n) + " outputs");
  if (!g_out.allFinite())
    throw NumericalError("nf_gradient: closure gradient is not finite");
  NFGrads<T> grads = nf_zero_grads(p);
  std::vector<Mat<T>> act;
  for (Eigen::Index j0 = 0; j0 < n; j0 += kNfGradChunk) {
    const Eigen::Index m = std::min(kNfGradChunk, n - j0);
    mlp_forward(p, enc.middleCols(j0, m), &act);
    mlp_backward_chunk(p, enc.middleCols(j0, m), act,
                       Vec<T>(g_out.segment(j0, m)), grads);
  }
  return {loss, grads};
}

}  // namespace detail

// Loss value and exact parameter gradient. The closure receives the vector
// of network outputs at `coords` and must return the scalar loss together
// with dLoss/d(outputs); everything downstream of the outputs is the
// closure's business (projections, penalties), everything upstream is
// handled here by reverse mode.
template <typename T, typename Closure>
std::pair<T, NFGrads<T>> nf_gradient(const NFParams<T>& p, const Mat<T>& coords,
                                     Closure&& loss_fn) {
  validate_nf(p);
  const Mat<T> enc = detail::encode_points(coords, p.posenc);
  return detail::nf_gradient_encoded(p, enc,
                                     std::forward<Closure>(loss_fn));
}

// Smallest hidden-layer count with enough compositional depth to reach the
// grid's Nyquist frequency from the top encoding band: ceil(log2(J*pi /
// (L*pi/2))) = ceil(log2(2J/L)). The default h=7 clears the bound for
// J=128, L=10 (which needs 5) with margin; the config loader warns when a
// requested architecture falls below it.
inline int nf_min_hidden_layers(int grid_side, int L) {
  if (grid_side < 1 || L < 1)
    throw ValidationError("nf_min_hidden_layers: side and L must be >= 1");
  const double ratio = 2.0 * grid_side / L;
  if (ratio <= 1.0) return 0;
  return static_cast<int>(std::ceil(std::log2(ratio)));
}

// ---------------------------------------------------------------------------
// Adam over the NF parameters.

struct AdamConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Mat<T>> m_w, v_w;
  std::vector<Vec<T>> m_b, v_b;
  std::int64_t step = 0;
};

template <typename T>
AdamState<T> adam_init(const NFParams<T>& p) {
  AdamState<T> s;
  for (const auto& w : p.weights) {
    s.m_w.push_back(Mat<T>::Zero(w.rows(), w.cols()));
    s.v_w.push_back(Mat<T>::Zero(w.rows(), w.cols()));
  }
  for (const auto& b : p.biases) {
    s.m_b.push_back(Vec<T>::Zero(b.size()));
    s.v_b.push_back(Vec<T>::Zero(b.size()));
  }
  return s;
}

namespace detail {

template <typename T, typename A, typename B>
void adam_update_tensor(A& param, const B& grad, A& m, A& v,
                        const AdamConfig& cfg, T bc1, T bc2) {
  m = T(cfg.beta1) * m + T(1 - cfg.beta1) * grad;
  v = (T(cfg.beta2) * v.array() +
       T(1 - cfg.beta2) * grad.array().square()).matrix();
  param.array() -= T(cfg.lr) * (m.array() / bc1) /
                   ((v.array() / bc2).sqrt() + T(cfg.eps));
}

}  // namespace detail

// Standard bias-corrected Adam step. Gradients must be parameter-shaped.
template <typename T>
void adam_step(NFParams<T>& p, const NFGrads<T>& g, AdamState<T>& s,
               const AdamConfig& cfg) {
  if (g.weights.size() != p.weights.size() ||
      s.m_w.size() != p.weights.size())
    throw ValidationError("adam_step: state/gradient shape mismatch");
  s.step += 1;
  const T bc1 = T(1) - std::pow(T(cfg.beta1), T(s.step));
  const T bc2 = T(1) - std::pow(T(cfg.beta2), T(s.step));
  for (std::size_t k = 0; k < p.weights.size(); ++k) {
    detail::adam_update_tensor<T>(p.weights[k], g.weights[k], s.m_w[k],
                                  s.v_w[k], cfg, bc1, bc2);
    detail::adam_update_tensor<T>(p.biases[k], g.biases[k], s.m_b[k],
                                  s.v_b[k], cfg, bc1, bc2);
  }
}

// ---------------------------------------------------------------------------
// Checkpointing: one named array per layer plus a config metadata block.

template <typename T>
void save_nf(ArrayStore& store, const NFParams<T>& p,
             const std::string& prefix = "nf") {
  validate_nf(p);
  for (std::size_t k = 0; k < p.weights.size(); ++k) {
    store.put_matrix(prefix + ".w" + std::to_string(k), p.weights[k]);
    store.put_vector(prefix + ".b" + std::to_string(k), p.biases[k]);
  }
  store.meta[prefix] = {{"L", p.posenc.L},
                        {"hidden_layers", p.hidden_layers},
                        {"width", p.width},
                        {"activation", p.activation},
                        {"init_seed", p.init_seed}};
}

template <typename T>
NFParams<T> load_nf(const ArrayStore& store, const std::string& prefix = "nf") {
  if (!store.meta.contains(prefix))
    throw IoError("load_nf: no '" + prefix + "' metadata block");
  const auto& m = store.meta.at(prefix);
  NFParams<T> p;
  try {
    p.posenc.L = m.at("L").get<int>();
    p.hidden_layers = m.at("hidden_layers").get<int>();
    p.width = m.at("width").get<int>();
    p.activation = m.at("activation").get<std::string>();
    p.init_seed = m.at("init_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_nf: malformed metadata: ") + e.what());
  }
  if (p.activation != "relu")
    throw IoError("load_nf: unsupported activation '" + p.activation + "'");
  const auto n_layers = static_cast<std::size_t>(p.hidden_layers) + 1;
  p.weights.resize(n_layers);
  p.biases.resize(n_layers);
  for (std::size_t k = 0; k < n_layers; ++k) {
    p.weights[k] = store.get_matrix<T>(prefix + ".w" + std::to_string(k));
    p.biases[k] = store.get_vector<T>(prefix + ".b" + std::to_string(k));
  }
  validate_nf(p);
  return p;
}

}  // namespace dyntomo
