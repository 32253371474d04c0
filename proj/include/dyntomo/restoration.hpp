// Learned static restoration prior: the randomized degradation ensemble,
// the small fully convolutional restorer it trains, and supervised
// pretraining on clean frames.
//
// Degradation mixes a Gaussian blur with the identity and adds white noise,
//   degrade(f) = zeta * blur_k(f) + (1 - zeta) * f + N(0, sigma^2),
// with (zeta, k, sigma) drawn uniformly up to configured caps, freshly per
// example per epoch. The restorer is six zero-padded 3x3 conv layers of 64
// channels, rectified except for the single-channel output layer, trained
// with Adam on mean squared restoration error. It predicts the restored
// frame directly; a config flag switches to predicting the residual
// instead.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "dyntomo/common.hpp"
#include "dyntomo/container.hpp"
#include "dyntomo/conv.hpp"
#include "dyntomo/neural_field.hpp"

namespace dyntomo {

// ---------------------------------------------------------------------------
// Degradation model

struct DegradationSample {
  double zeta = 0.0;         // mix weight: 1 = pure blur, 0 = identity
  double kernel_size = 0.0;  // blur standard deviation in pixels
  double sigma = 0.0;        // additive white Gaussian noise std
  std::uint64_t seed = 0;    // noise draw
};

inline void validate_degradation(const DegradationSample& s) {
  if (!std::isfinite(s.zeta) || s.zeta < 0.0 || s.zeta > 1.0)
    throw ValidationError("degradation: zeta must be in [0, 1]");
  if (!std::isfinite(s.kernel_size) || s.kernel_size < 0.0)
    throw ValidationError("degradation: kernel size must be >= 0");
  if (!std::isfinite(s.sigma) || s.sigma < 0.0)
    throw ValidationError("degradation: sigma must be >= 0");
}

// Apply one degradation draw. Linear in the frame for fixed (zeta, k) and
// zero noise; zeta = 0 leaves the pixels untouched.
template <typename T>
Mat<T> degrade(const Mat<T>& frame, const DegradationSample& s) {
  validate_degradation(s);
  validate_frame(frame, "degrade");
  Mat<T> out;
  if (s.zeta == 0.0) {
    out = frame;
  } else {
    const Mat<T> blurred =
        gaussian_blur_reflect(frame, static_cast<T>(s.kernel_size));
    out = static_cast<T>(s.zeta) * blurred +
          static_cast<T>(1.0 - s.zeta) * frame;
  }
  if (s.sigma > 0.0) {
    Rng rng(s.seed);
    for (Eigen::Index i = 0; i < out.size(); ++i)
      out.data()[i] += static_cast<T>(s.sigma) * static_cast<T>(rng.normal());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Restoration network

template <typename T>
struct RestorationModel {
  std::vector<ConvLayer<T>> layers;  // 1 -> channels -> ... -> channels -> 1
  bool residual = false;             // predict input minus output instead
  std::uint64_t init_seed = 0;
};

template <typename T>
void validate_restorer(const RestorationModel<T>& m) {
  if (m.layers.size() < 2)
    throw ValidationError("restorer: needs at least two conv layers");
  Eigen::Index in_ch = 1;
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    const auto& l = m.layers[k];
    if (l.w.cols() != in_ch * 9 || l.w.rows() < 1 || l.b.size() != l.w.rows())
      throw ValidationError("restorer: layer " + std::to_string(k) +
                            " shape breaks the channel chain");
    require_finite(l.w, "restorer weights");
    if (!l.b.allFinite())
      throw ValidationError("restorer biases: non-finite values");
    in_ch = l.w.rows();
  }
  if (in_ch != 1)
    throw ValidationError("restorer: final layer must have one channel");
}

// Side length below which zero padding reaches every output pixel and the
// net degenerates: one ring of context per layer.
template <typename T>
int restorer_receptive_field(const RestorationModel<T>& m) {
  return 2 * static_cast<int>(m.layers.size()) + 1;
}

template <typename T>
std::size_t restorer_param_count(const RestorationModel<T>& m) {
  std::size_t n = 0;
  for (const auto& l : m.layers)
    n += static_cast<std::size_t>(l.w.size()) +
         static_cast<std::size_t>(l.b.size());
  return n;
}

// He fan-in init, biases zero. Layer and channel counts default to the
// production architecture.
template <typename T>
RestorationModel<T> restorer_init(std::uint64_t seed, int layers = 6,
                                  int channels = 64) {
  if (layers < 2) throw ValidationError("restorer_init: layers must be >= 2");
  if (channels < 1)
    throw ValidationError("restorer_init: channels must be >= 1");
  RestorationModel<T> m;
  m.init_seed = seed;
  m.layers.resize(layers);
  Rng rng(seed);
  Eigen::Index in_ch = 1;
  for (int k = 0; k < layers; ++k) {
    const Eigen::Index out_ch = k == layers - 1 ? 1 : channels;
    const Eigen::Index fan_in = in_ch * 9;
    const T bound = std::sqrt(T(6) / static_cast<T>(fan_in));
    auto& l = m.layers[k];
    l.w.resize(out_ch, fan_in);
    for (Eigen::Index i = 0; i < l.w.size(); ++i)
      l.w.data()[i] = static_cast<T>(
          rng.uniform(-static_cast<double>(bound), static_cast<double>(bound)));
    l.b = Vec<T>::Zero(out_ch);
    in_ch = out_ch;
  }
  return m;
}

namespace detail {

// Stack forward over a channels x (J*J) block. When `acts` is given it
// receives the input and every post-rectifier activation, which is what the
// backward pass needs (the rectifier mask is recoverable from its output).
template <typename T>
Mat<T> restorer_forward_block(const RestorationModel<T>& m, const Mat<T>& in,
                              int side, std::vector<Mat<T>>* acts = nullptr) {
  const std::size_t n_layers = m.layers.size();
  Mat<T> cur = in, col;
  if (acts) {
    acts->clear();
    acts->push_back(cur);
  }
  for (std::size_t k = 0; k < n_layers; ++k) {
    im2col3(cur, side, col);
    Mat<T> z = m.layers[k].w * col;
    z.colwise() += m.layers[k].b;
    if (k + 1 < n_layers) z = z.cwiseMax(T(0));
    cur = std::move(z);
    if (acts && k + 1 < n_layers) acts->push_back(cur);
  }
  return cur;
}

// Reverse pass for one sample. `acts` comes from the forward call above;
// patch matrices are rebuilt layer by layer rather than cached, they are
// pure data movement next to the GEMMs. Gradients accumulate into `grads`.
template <typename T>
void restorer_backward_block(const RestorationModel<T>& m,
                             const std::vector<Mat<T>>& acts, int side,
                             const Mat<T>& g_out,
                             std::vector<ConvLayer<T>>& grads) {
  const std::size_t n_layers = m.layers.size();
  Mat<T> g = g_out, col;
  for (std::size_t k = n_layers; k-- > 0;) {
    if (k + 1 < n_layers)  // rectifier mask; the output layer has none
      g = (acts[k + 1].array() > T(0)).select(g.array(), T(0)).matrix();
    im2col3(acts[k], side, col);
    grads[k].w.noalias() += g * col.transpose();
    grads[k].b.noalias() += g.rowwise().sum();
    if (k > 0) {
      const Mat<T> g_col = m.layers[k].w.transpose() * g;
      g.setZero(acts[k].rows(), acts[k].cols());
      col2im3_add(g_col, side, g);
    }
  }
}

}  // namespace detail

// Deterministic forward pass on a single frame.
template <typename T>
Mat<T> restore(const RestorationModel<T>& m, const Mat<T>& frame) {
  validate_restorer(m);
  validate_frame(frame, "restore");
  const int side = static_cast<int>(frame.rows());
  if (side < restorer_receptive_field(m))
    throw ValidationError("restore: frame side " + std::to_string(side) +
                          " is below the receptive field " +
                          std::to_string(restorer_receptive_field(m)));
  Mat<T> in(1, frame.size());
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c)
      in(0, static_cast<Eigen::Index>(r) * side + c) = frame(r, c);
  const Mat<T> out = detail::restorer_forward_block(m, in, side);
  Mat<T> restored(side, side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c)
      restored(r, c) = out(0, static_cast<Eigen::Index>(r) * side + c);
  if (m.residual) restored = frame - restored;
  require_finite(restored, "restore output");
  return restored;
}

// ---------------------------------------------------------------------------
// Training

struct RestorerConfig {
  int epochs = 40;
  int batch = 4;
  double lr = 1e-3;
  double sigma_max = 5e-2;  // noise std cap for the degradation draws
  double k_max = 2.0;       // blur std cap in pixels
  bool residual = false;
  int layers = 6;
  int channels = 64;
  std::uint64_t seed = 0;
};

inline void validate_restorer_config(const RestorerConfig& c) {
  if (c.epochs < 1) throw ValidationError("restorer config: epochs >= 1");
  if (c.batch < 1) throw ValidationError("restorer config: batch >= 1");
  if (!std::isfinite(c.lr) || c.lr <= 0)
    throw ValidationError("restorer config: lr must be > 0");
  if (!std::isfinite(c.sigma_max) || c.sigma_max < 0)
    throw ValidationError("restorer config: sigma_max must be >= 0");
  if (!std::isfinite(c.k_max) || c.k_max < 0)
    throw ValidationError("restorer config: k_max must be >= 0");
}

template <typename T>
struct RestorerTraining {
  RestorationModel<T> model;
  std::vector<T> epoch_loss;  // mean squared restoration error per epoch
  std::vector<T> step_loss;   // per optimizer step, in execution order
};

// Supervised pretraining: every epoch redraws one degradation per clean
// frame, shuffles the pairs, and takes Adam steps on minibatch MSE.
// Deterministic for a given config.
template <typename T>
RestorerTraining<T> train_restorer(const std::vector<Mat<T>>& clean,
                                   const RestorerConfig& cfg) {
  validate_restorer_config(cfg);
  if (clean.empty())
    throw ValidationError("train_restorer: empty training set");
  const int side = static_cast<int>(clean.front().rows());
  for (const auto& f : clean) {
    validate_frame(f, "train_restorer");
    if (f.rows() != side)
      throw ValidationError("train_restorer: frames disagree on side length");
  }

  RestorerTraining<T> out;
  out.model = restorer_init<T>(cfg.seed, cfg.layers, cfg.channels);
  out.model.residual = cfg.residual;
  auto& model = out.model;
  if (side < restorer_receptive_field(model))
    throw ValidationError("train_restorer: frame side below receptive field");

  // One stream drives degradation draws and shuffling; weight init above
  // consumed its own stream so the draw sequence does not depend on the
  // architecture.
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  // flattened clean targets, pixels row-major
  const Eigen::Index n_px = static_cast<Eigen::Index>(side) * side;
  std::vector<Mat<T>> target(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    target[i].resize(1, n_px);
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c)
        target[i](0, static_cast<Eigen::Index>(r) * side + c) = clean[i](r, c);
  }

  std::vector<ConvLayer<T>> grads(model.layers.size());
  std::vector<ConvLayer<T>> m_mom(model.layers.size()),
      v_mom(model.layers.size());
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const auto& l = model.layers[k];
    grads[k].w.setZero(l.w.rows(), l.w.cols());
    grads[k].b = Vec<T>::Zero(l.b.size());
    m_mom[k] = grads[k];
    v_mom[k] = grads[k];
  }
  AdamConfig adam;
  adam.lr = cfg.lr;
  long step = 0;

  std::vector<std::size_t> order(clean.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Mat<T>> acts;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // fresh degradation per example
    std::vector<Mat<T>> noisy(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) {
      DegradationSample s;
      s.zeta = rng.uniform01();
      s.kernel_size = rng.uniform(0.0, cfg.k_max);
      s.sigma = rng.uniform(0.0, cfg.sigma_max);
      s.seed = rng.uniform_int(std::uint64_t(1) << 62);
      const Mat<T> d = degrade(clean[i], s);
      noisy[i].resize(1, n_px);
      for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c)
          noisy[i](0, static_cast<Eigen::Index>(r) * side + c) = d(r, c);
    }
    rng.shuffle(order.begin(), order.end());

    T epoch_acc = T(0);
    int epoch_steps = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch) {
      const std::size_t stop = std::min(order.size(), at + cfg.batch);
      const T denom = static_cast<T>((stop - at) * n_px);
      for (auto& g : grads) {
        g.w.setZero();
        g.b.setZero();
      }
      T loss = T(0);
      for (std::size_t j = at; j < stop; ++j) {
        const Mat<T>& x = noisy[order[j]];
        const Mat<T> y =
            detail::restorer_forward_block(model, x, side, &acts);
        // restored = y directly, or x - y in residual mode
        const Mat<T> resid =
            (model.residual ? Mat<T>(x - y) : y) - target[order[j]];
        loss += resid.squaredNorm() / denom;
        Mat<T> g_out = T(2) / denom * resid;
        if (model.residual) g_out = -g_out;
        detail::restorer_backward_block(model, acts, side, g_out, grads);
      }
      if (!std::isfinite(static_cast<double>(loss)))
        throw NumericalError("train_restorer: non-finite loss at step " +
                             std::to_string(step));
      ++step;
      const T bc1 = T(1) - std::pow(T(adam.beta1), T(step));
      const T bc2 = T(1) - std::pow(T(adam.beta2), T(step));
      for (std::size_t k = 0; k < model.layers.size(); ++k) {
        detail::adam_update_tensor<T>(model.layers[k].w, grads[k].w,
                                      m_mom[k].w, v_mom[k].w, adam, bc1, bc2);
        detail::adam_update_tensor<T>(model.layers[k].b, grads[k].b,
                                      m_mom[k].b, v_mom[k].b, adam, bc1, bc2);
      }
      out.step_loss.push_back(loss);
      epoch_acc += loss;
      ++epoch_steps;
    }
    out.epoch_loss.push_back(epoch_acc / static_cast<T>(epoch_steps));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpointing, mirroring the neural-field layout.

template <typename T>
void save_restorer(ArrayStore& store, const RestorationModel<T>& m,
                   const std::string& prefix = "restorer") {
  validate_restorer(m);
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    store.put_matrix(prefix + ".w" + std::to_string(k), m.layers[k].w);
    store.put_vector(prefix + ".b" + std::to_string(k), m.layers[k].b);
  }
  store.meta[prefix] = {{"layers", m.layers.size()},
                        {"residual", m.residual},
                        {"init_seed", m.init_seed}};
}

template <typename T>
RestorationModel<T> load_restorer(const ArrayStore& store,
                                  const std::string& prefix = "restorer") {
  if (!store.meta.contains(prefix))
    throw IoError("load_restorer: no '" + prefix + "' metadata block");
  const auto& meta = store.meta.at(prefix);
  RestorationModel<T> m;
  std::size_t n_layers = 0;
  try {
    n_layers = meta.at("layers").get<std::size_t>();
    m.residual = meta.at("residual").get<bool>();
    m.init_seed = meta.at("init_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("load_restorer: malformed metadata: ") +
                  e.what());
  }
  m.layers.resize(n_layers);
  for (std::size_t k = 0; k < n_layers; ++k) {
    m.layers[k].w = store.get_matrix<T>(prefix + ".w" + std::to_string(k));
    m.layers[k].b = store.get_vector<T>(prefix + ".b" + std::to_string(k));
  }
  validate_restorer(m);
  return m;
}

}  // namespace dyntomo
