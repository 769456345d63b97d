#pragma once

// Fitting for the five decomposition families. Every fit takes an already
// preprocessed ROI matrix (rows = samples) plus a FitContext that records the
// preprocessing, so the emitted Decomposition can project raw responses.

#include "brainexplore/decomposition.hpp"
#include "brainexplore/rng.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <span>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace brainexplore {

enum class InputNormalization { none, zscore_per_voxel };

inline std::string_view to_string(InputNormalization n) {
  return n == InputNormalization::none ? "none" : "zscore_per_voxel";
}

inline InputNormalization input_normalization_from_string(std::string_view s) {
  if (s == "none") return InputNormalization::none;
  if (s == "zscore_per_voxel") return InputNormalization::zscore_per_voxel;
  throw ConfigError("unknown input normalization '" + std::string(s) + "'");
}

/// Per-voxel statistics from `reference` (the measured pool). Constant voxels
/// get scale 1.
inline Normalization compute_normalization(const Matrix& reference, InputNormalization mode) {
  if (mode == InputNormalization::none) return {};
  Normalization n;
  n.mean = reference.colwise().mean().transpose();
  n.scale.resize(reference.cols());
  const double denom = static_cast<double>(std::max<Eigen::Index>(1, reference.rows()));
  for (Eigen::Index j = 0; j < reference.cols(); ++j) {
    const double var = (reference.col(j).array() - n.mean[j]).square().sum() / denom;
    n.scale[j] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return n;
}

struct FitContext {
  std::string roi;
  Normalization normalization;
  std::vector<PoolKind> provenance{PoolKind::measured};
};

// ---------------------------------------------------------------------------
// Voxel baseline

inline Decomposition fit_voxels(std::size_t num_voxels, const FitContext& ctx = {}) {
  if (num_voxels < 1) throw Error("fit_voxels: need at least one voxel");
  const auto v = static_cast<Eigen::Index>(num_voxels);
  Decomposition d;
  d.method = Method::voxels;
  d.roi = ctx.roi;
  d.components = duplicate_signed_rows(Matrix::Identity(v, v));
  d.normalization = ctx.normalization;
  d.provenance = ctx.provenance;
  d.state = VoxelState{};
  return d;
}

// ---------------------------------------------------------------------------
// PCA

struct VarianceCurve {
  Vector center;
  Vector singular_values;   // all min(N, V) values, descending
  Vector explained_ratio;   // per component
  Vector cumulative_ratio;  // running sum of explained_ratio
  Matrix right_vectors;     // V x min(N, V)
  Matrix left_vectors;      // N x min(N, V)
  Eigen::Index rank = 0;
};

inline VarianceCurve pca_curve(const Matrix& x) {
  if (x.rows() < 2) throw Error("PCA needs at least two samples");
  if (!x.allFinite()) throw Error("SVD failure: input contains non-finite values");
  VarianceCurve c;
  c.center = x.colwise().mean().transpose();
  const Matrix centered = x.rowwise() - c.center.transpose();
  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw Error("SVD failure");
  c.singular_values = svd.singularValues();
  c.right_vectors = svd.matrixV();
  c.left_vectors = svd.matrixU();
  const Vector sq = c.singular_values.array().square();
  const double total = sq.sum();
  c.explained_ratio = total > 0.0 ? Vector(sq / total) : Vector(Vector::Zero(sq.size()));
  c.cumulative_ratio.resize(sq.size());
  double run = 0.0;
  for (Eigen::Index i = 0; i < sq.size(); ++i) c.cumulative_ratio[i] = (run += c.explained_ratio[i]);
  const double smax = c.singular_values.size() ? c.singular_values[0] : 0.0;
  const double tol = smax * static_cast<double>(std::max(x.rows(), x.cols())) *
                     std::numeric_limits<double>::epsilon();
  c.rank = 0;
  for (Eigen::Index i = 0; i < c.singular_values.size(); ++i)
    if (c.singular_values[i] > tol) ++c.rank;
  return c;
}

/// Smallest K whose cumulative explained variance reaches `threshold`,
/// capped at the numerical rank.
inline Eigen::Index k_for_threshold(const VarianceCurve& c, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("variance threshold must lie in (0, 1]");
  if (c.rank == 0) throw Error("input has zero variance");
  for (Eigen::Index k = 1; k <= c.rank; ++k)
    if (c.cumulative_ratio[k - 1] >= threshold - 1e-12) return k;
  return c.rank;
}

inline std::vector<std::size_t> variance_matched_k(const Matrix& x, std::span<const double> thresholds) {
  const auto curve = pca_curve(x);
  std::vector<std::size_t> out;
  for (double t : thresholds) out.push_back(static_cast<std::size_t>(k_for_threshold(curve, t)));
  return out;
}

struct PcaFit {
  std::vector<Decomposition> decompositions;  // one per threshold
  VarianceCurve curve;
  Matrix train_scores;  // N x rank, U * S
};

inline PcaFit fit_pca(const Matrix& x, std::span<const double> thresholds, const FitContext& ctx = {}) {
  PcaFit fit;
  fit.curve = pca_curve(x);
  const auto r = fit.curve.rank;
  fit.train_scores = fit.curve.left_vectors.leftCols(r) * fit.curve.singular_values.head(r).asDiagonal();
  // sign convention: largest-magnitude loading of each direction is positive
  Matrix dirs = fit.curve.right_vectors.leftCols(r);
  for (Eigen::Index k = 0; k < r; ++k) {
    Eigen::Index i = 0;
    dirs.col(k).cwiseAbs().maxCoeff(&i);
    if (dirs(i, k) < 0) {
      dirs.col(k) = -dirs.col(k);
      fit.train_scores.col(k) = -fit.train_scores.col(k);
    }
  }
  for (double t : thresholds) {
    const auto k = k_for_threshold(fit.curve, t);
    Decomposition d;
    d.method = Method::pca;
    d.roi = ctx.roi;
    d.components = duplicate_signed_rows(dirs.leftCols(k).transpose());
    d.hyperparams = {{"variance_threshold", t}};
    d.normalization = ctx.normalization;
    d.provenance = ctx.provenance;
    d.state = PcaState{fit.curve.center};
    d.diagnostics = {{"k", k}, {"explained_variance", fit.curve.cumulative_ratio[k - 1]}};
    fit.decompositions.push_back(std::move(d));
  }
  return fit;
}

// ---------------------------------------------------------------------------
// NMF (Lee-Seung multiplicative updates, Frobenius objective)

struct NmfConfig {
  std::size_t max_iter = 500;
  double tol = 1e-4;  // relative objective improvement between checks
  std::size_t check_every = 10;
};

struct NmfFit {
  Decomposition decomposition;
  Matrix coefficients;             // N x K
  std::vector<double> objective;   // 0.5 * ||X - HW||^2 at iteration 0 and every check_every
  std::size_t iterations = 0;
  bool converged = false;
};

inline NmfFit fit_nmf(const Matrix& x_in, std::size_t k, std::uint64_t seed, const FitContext& ctx = {},
                      const NmfConfig& cfg = {}) {
  const Matrix x = x_in.cwiseMax(0.0);
  const auto n = x.rows(), v = x.cols();
  const auto kk = static_cast<Eigen::Index>(k);
  if (k < 1 || kk > std::min(n, v)) throw Error("fit_nmf: K must lie in [1, min(N, V)]");
  if (x.maxCoeff() <= 0.0) throw Error("fit_nmf: input is all-zero after clipping negatives");

  Rng rng(seed);
  const double scale = std::sqrt(x.mean() / static_cast<double>(k));
  Matrix h(n, kk), w(kk, v);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = scale * rng.uniform(0.01, 1.0);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = scale * rng.uniform(0.01, 1.0);

  const double x_sq = x.squaredNorm();
  auto objective = [&] {
    // ||X - HW||^2 = ||X||^2 - 2 <H^T X, W> + <H^T H, W W^T>
    const Matrix htx = h.transpose() * x;
    const double cross = (htx.array() * w.array()).sum();
    const double quad = ((h.transpose() * h).array() * (w * w.transpose()).array()).sum();
    return 0.5 * std::max(0.0, x_sq - 2.0 * cross + quad);
  };

  auto mu = [](Matrix& target, const Matrix& num, const Matrix& den) {
    for (Eigen::Index i = 0; i < target.size(); ++i) {
      const double d = den.data()[i];
      target.data()[i] = d > 0.0 ? target.data()[i] * num.data()[i] / d : 0.0;
    }
  };

  NmfFit fit;
  fit.objective.push_back(objective());
  double last = fit.objective.back();
  std::size_t it = 0;
  for (; it < cfg.max_iter;) {
    mu(h, x * w.transpose(), h * (w * w.transpose()));
    mu(w, h.transpose() * x, (h.transpose() * h) * w);
    ++it;
    if (it % cfg.check_every == 0) {
      const double cur = objective();
      fit.objective.push_back(cur);
      const double rel = last > 0.0 ? (last - cur) / last : 0.0;
      last = cur;
      if (rel < cfg.tol) {
        fit.converged = true;
        break;
      }
    }
  }
  fit.iterations = it;

  // A component that collapsed to zero carries no pattern; drop it.
  std::vector<Eigen::Index> keep;
  for (Eigen::Index r = 0; r < kk; ++r)
    if (w.row(r).maxCoeff() > 0.0) keep.push_back(r);
  if (keep.empty()) throw Error("fit_nmf: every component collapsed to zero");
  Matrix wk(static_cast<Eigen::Index>(keep.size()), v), hk(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    wk.row(static_cast<Eigen::Index>(i)) = w.row(keep[i]);
    hk.col(static_cast<Eigen::Index>(i)) = h.col(keep[i]);
  }

  Decomposition& d = fit.decomposition;
  d.method = Method::nmf;
  d.roi = ctx.roi;
  d.components = std::move(wk);
  d.hyperparams = {{"k", k}, {"seed", seed}};
  d.normalization = ctx.normalization;
  d.provenance = ctx.provenance;
  d.state = NmfState{};
  d.converged = fit.converged;
  d.diagnostics = {{"iterations", fit.iterations},
                   {"objective", fit.objective.back()},
                   {"dropped_components", k - keep.size()}};
  fit.coefficients = std::move(hk);
  return fit;
}

// ---------------------------------------------------------------------------
// ICA (PCA whitening followed by symmetric FastICA with the logcosh contrast)

struct IcaConfig {
  double tol = 1e-5;
  std::size_t max_iter = 500;
};

struct IcaFit {
  Decomposition decomposition;
  Matrix sources;  // N x K (base, non-duplicated)
  std::size_t iterations = 0;
  bool converged = false;
};

/// (W W^T)^{-1/2} W
inline Matrix symmetric_decorrelation(const Matrix& w) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(w * w.transpose());
  const Vector inv_sqrt = eig.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
  return eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose() * w;
}

inline IcaFit fit_ica(const Matrix& x, std::size_t k, std::uint64_t seed, const FitContext& ctx = {},
                      const IcaConfig& cfg = {}) {
  const auto n = x.rows(), v = x.cols();
  const auto kk = static_cast<Eigen::Index>(k);
  if (k < 1 || kk > std::min(n, v)) throw Error("fit_ica: K must lie in [1, min(N, V)]");
  if (n <= kk) throw Error("fit_ica: need more samples than components");

  const VarianceCurve curve = pca_curve(x);
  if (kk > curve.rank) throw Error("fit_ica: K exceeds the numerical rank of the input");
  const double sqrt_n = std::sqrt(static_cast<double>(n));
  const Vector s = curve.singular_values.head(kk);
  // whitening rows: diag(sqrt(N)/s) V_K^T
  const Matrix whitening = (sqrt_n * s.cwiseInverse()).asDiagonal() * curve.right_vectors.leftCols(kk).transpose();
  const Matrix z = curve.left_vectors.leftCols(kk) * sqrt_n;  // N x K, unit variance columns

  Rng rng(seed);
  Matrix w(kk, kk);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  w = symmetric_decorrelation(w);

  IcaFit fit;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t it = 1; it <= cfg.max_iter; ++it) {
    const Matrix proj = z * w.transpose();  // N x K
    const Matrix g = proj.array().tanh().matrix();
    const Vector g_prime_mean = (1.0 - g.array().square()).colwise().mean().transpose();
    Matrix w_new = (g.transpose() * z) * inv_n - g_prime_mean.asDiagonal() * w;
    w_new = symmetric_decorrelation(w_new);
    const double lim = ((w_new * w.transpose()).diagonal().cwiseAbs().array() - 1.0).abs().maxCoeff();
    w = std::move(w_new);
    fit.iterations = it;
    if (lim < cfg.tol) {
      fit.converged = true;
      break;
    }
  }

  Matrix unmixing = w * whitening;                                              // K x V
  Matrix mixing = curve.right_vectors.leftCols(kk) * (s / sqrt_n).asDiagonal() * w.transpose();  // V x K
  for (Eigen::Index c = 0; c < kk; ++c) {
    Eigen::Index i = 0;
    mixing.col(c).cwiseAbs().maxCoeff(&i);
    if (mixing(i, c) < 0) {
      mixing.col(c) = -mixing.col(c);
      unmixing.row(c) = -unmixing.row(c);
    }
  }
  fit.sources = (x.rowwise() - curve.center.transpose()) * unmixing.transpose();

  Decomposition& d = fit.decomposition;
  d.method = Method::ica;
  d.roi = ctx.roi;
  d.components = duplicate_signed_rows(mixing.transpose());
  d.hyperparams = {{"k", k}, {"seed", seed}};
  d.normalization = ctx.normalization;
  d.provenance = ctx.provenance;
  d.state = IcaState{curve.center, unmixing};
  d.converged = fit.converged;
  d.diagnostics = {{"iterations", fit.iterations}};
  return fit;
}

// ---------------------------------------------------------------------------
// Sparse autoencoder: z = relu(E x + b), x_hat = D z + b_d,
// loss = mean_batch (||x_hat - x||^2 + lambda * ||z||_1) / V.
// With a predicted pool present, each pool has its own encoder and the
// decoder is shared; every batch is half measured, half predicted.

struct SaeConfig {
  double expansion_factor = 4.0;
  double sparsity = 4.0;
  std::size_t epochs = 30;
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_heldout = 512;
};

struct SaeFit {
  Decomposition decomposition;
  std::vector<double> heldout_loss;  // before training, then after each epoch
  double active_fraction = 0.0;      // mean fraction of measured codes > 0.01 after rescaling
  std::size_t latent_dim = 0;
  std::size_t dropped_latents = 0;
};

namespace detail {

using MatrixF = Eigen::MatrixXf;
using VectorF = Eigen::VectorXf;

// Flush-to-zero and denormals-are-zero for the current thread. Weights of
// latents that sparsity switches off decay into the subnormal range, which
// costs ~100x per operation on x86.
class FlushDenormals {
 public:
#if defined(__SSE__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

struct AdamSlot {
  MatrixF m, v;
  explicit AdamSlot(Eigen::Index r = 0, Eigen::Index c = 0) : m(MatrixF::Zero(r, c)), v(MatrixF::Zero(r, c)) {}
};

template <class Param, class Grad>
void adam_step(Param& p, const Grad& grad, AdamSlot& slot, const SaeConfig& cfg, std::size_t t) {
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
  const float lr = static_cast<float>(cfg.learning_rate * std::sqrt(c2) / c1);
  const float b1 = static_cast<float>(cfg.adam_beta1), b2 = static_cast<float>(cfg.adam_beta2);
  const float eps = static_cast<float>(cfg.adam_eps);
  float* pp = p.data();
  const float* g = grad.data();
  float* m = slot.m.data();
  float* v = slot.v.data();
  const Eigen::Index n = p.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + (1.0f - b1) * g[i];
    v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
    pp[i] -= lr * m[i] / (std::sqrt(v[i]) + eps);
  }
}

// Cycles through a shuffled permutation, reshuffling on wrap.
class BatchCursor {
 public:
  BatchCursor(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_.begin(), order_.end());
  }
  std::vector<Eigen::Index> take(std::size_t count) {
    std::vector<Eigen::Index> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == order_.size()) {
        rng_.shuffle(order_.begin(), order_.end());
        pos_ = 0;
      }
      out.push_back(static_cast<Eigen::Index>(order_[pos_++]));
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  Rng& rng_;
  std::size_t pos_ = 0;
};

inline Matrix gather_rows(const Matrix& x, const std::vector<Eigen::Index>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

}  // namespace detail

inline SaeFit fit_sae(const Matrix& measured, const Matrix& predicted, const SaeConfig& cfg,
                      const FitContext& ctx = {}) {
  if (measured.rows() < 1) throw Error("fit_sae: measured pool is empty");
  const auto v = measured.cols();
  if (v < 1) throw Error("fit_sae: need at least one voxel");
  const bool dual = predicted.rows() > 0;
  if (dual && predicted.cols() != v) throw Error("fit_sae: pool widths differ");
  if (cfg.batch_size < (dual ? 2u : 1u)) throw ConfigError("fit_sae: batch size too small");
  const auto latent = static_cast<Eigen::Index>(
      std::max(1.0, std::round(cfg.expansion_factor * static_cast<double>(v))));

  Rng rng(cfg.seed);
  detail::FlushDenormals ftz;

  // Held-out monitoring slice of the measured pool.
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(measured.rows()));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<Eigen::Index>(i);
  rng.shuffle(perm.begin(), perm.end());
  std::size_t n_hold = measured.rows() >= 20
                           ? std::min<std::size_t>(cfg.max_heldout, static_cast<std::size_t>(measured.rows()) / 20)
                           : 0;
  std::vector<Eigen::Index> hold_rows(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<Eigen::Index> train_rows(perm.begin() + static_cast<std::ptrdiff_t>(n_hold), perm.end());
  std::sort(hold_rows.begin(), hold_rows.end());
  std::sort(train_rows.begin(), train_rows.end());
  const Matrix train_m = detail::gather_rows(measured, train_rows);
  const Matrix heldout = n_hold ? detail::gather_rows(measured, hold_rows) : train_m;

  const double bound = 1.0 / std::sqrt(static_cast<double>(v));
  Matrix enc0(latent, v);
  for (Eigen::Index i = 0; i < enc0.size(); ++i) enc0.data()[i] = rng.uniform(-bound, bound);

  // Training runs in single precision with samples as columns; encoders are
  // kept transposed (V x L) so every per-latent update touches one column.
  using detail::MatrixF;
  using detail::VectorF;
  MatrixF we_m = enc0.transpose().cast<float>();
  VectorF b_m = VectorF::Zero(latent);
  MatrixF we_p = dual ? we_m : MatrixF();
  VectorF b_p = dual ? VectorF(VectorF::Zero(latent)) : VectorF();
  MatrixF dec = we_m;  // V x L
  VectorF b_d = VectorF::Zero(v);
  const MatrixF xt_m = train_m.transpose().cast<float>();
  const MatrixF xt_p = dual ? MatrixF(predicted.transpose().cast<float>()) : MatrixF();

  const double inv_v = 1.0 / static_cast<double>(v);
  auto loss_on = [&](const Matrix& x) {
    Matrix a = x * we_m.cast<double>();
    a.rowwise() += b_m.cast<double>().transpose();
    const Matrix z = a.cwiseMax(0.0);
    Matrix xh = z * dec.cast<double>().transpose();
    xh.rowwise() += b_d.cast<double>().transpose();
    return ((xh - x).squaredNorm() + cfg.sparsity * z.sum()) * inv_v / static_cast<double>(x.rows());
  };

  SaeFit fit;
  fit.latent_dim = static_cast<std::size_t>(latent);
  fit.heldout_loss.push_back(loss_on(heldout));

  detail::AdamSlot s_enc_m(v, latent), s_b_m(latent, 1), s_enc_p(dual ? v : 0, dual ? latent : 0),
      s_b_p(dual ? latent : 0, 1), s_dec(v, latent), s_b_d(v, 1);

  const std::size_t n_total = static_cast<std::size_t>(train_m.rows() + (dual ? predicted.rows() : 0));
  const std::size_t steps_per_epoch = (n_total + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t half = dual ? cfg.batch_size / 2 : cfg.batch_size;
  detail::BatchCursor cur_m(static_cast<std::size_t>(train_m.rows()), rng);
  std::optional<detail::BatchCursor> cur_p;
  if (dual) cur_p.emplace(static_cast<std::size_t>(predicted.rows()), rng);

  auto gather_cols = [](const MatrixF& x, const std::vector<Eigen::Index>& cols) {
    MatrixF out(x.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = x.col(cols[i]);
    return out;
  };

  const float lam = static_cast<float>(cfg.sparsity);
  MatrixF g_dec(v, latent), g_enc[2], a;
  VectorF g_bd(v), g_bias[2];
  std::vector<std::pair<Eigen::Index, float>> nz;
  std::vector<Eigen::Index> nz_start;
  std::size_t t = 0;
  std::size_t seen_measured = 0, seen_predicted = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      ++t;
      MatrixF xb[2];
      xb[0] = gather_cols(xt_m, cur_m.take(half));
      if (dual) xb[1] = gather_cols(xt_p, cur_p->take(cfg.batch_size - half));
      seen_measured += static_cast<std::size_t>(xb[0].cols());
      if (dual) seen_predicted += static_cast<std::size_t>(xb[1].cols());
      const double batch_rows = static_cast<double>(dual ? cfg.batch_size : half);
      const float scale = static_cast<float>(inv_v / batch_rows);

      g_dec.setZero();
      g_bd.setZero();
      double loss = 0.0;
      for (int pi = 0; pi < (dual ? 2 : 1); ++pi) {
        const MatrixF& x = xb[pi];
        const MatrixF& we = pi == 0 ? we_m : we_p;
        const VectorF& b = pi == 0 ? b_m : b_p;
        const auto cols = x.cols();
        a.noalias() = we.transpose() * x;  // L x B
        a.colwise() += b;
        const Eigen::Index active = (a.array() > 0.0f).count();
        MatrixF& g_we = g_enc[pi];
        VectorF& gb = g_bias[pi];
        if (active * 8 > cols * latent) {
          const MatrixF z = a.cwiseMax(0.0f);
          MatrixF r = dec * z;  // V x B
          r.colwise() += b_d;
          r -= x;
          loss += (static_cast<double>(r.squaredNorm()) + cfg.sparsity * static_cast<double>(z.sum())) *
                  static_cast<double>(scale);
          r *= 2.0f * scale;  // d loss / d x_hat
          g_dec.noalias() += r * z.transpose();
          g_bd += r.rowwise().sum();
          MatrixF d_z = dec.transpose() * r;  // L x B
          d_z.array() += lam * scale;
          d_z = (a.array() > 0.0f).select(d_z, 0.0f);
          g_we.noalias() = x * d_z.transpose();
          gb = d_z.rowwise().sum();
        } else {
          // Mostly-zero codes: walk the active entries only.
          nz.clear();
          nz_start.assign(static_cast<std::size_t>(cols) + 1, 0);
          double l1 = 0.0;
          for (Eigen::Index i = 0; i < cols; ++i) {
            nz_start[static_cast<std::size_t>(i)] = static_cast<Eigen::Index>(nz.size());
            const float* ai = a.col(i).data();
            for (Eigen::Index k = 0; k < latent; ++k)
              if (ai[k] > 0.0f) {
                nz.emplace_back(k, ai[k]);
                l1 += ai[k];
              }
          }
          nz_start.back() = static_cast<Eigen::Index>(nz.size());
          auto span_of = [&](Eigen::Index i) {
            return std::pair(nz.begin() + nz_start[static_cast<std::size_t>(i)],
                             nz.begin() + nz_start[static_cast<std::size_t>(i) + 1]);
          };
          MatrixF r(v, cols);
          for (Eigen::Index i = 0; i < cols; ++i) {
            auto col = r.col(i);
            col = b_d - x.col(i);
            auto [lo, hi] = span_of(i);
            for (auto it = lo; it != hi; ++it) col.noalias() += it->second * dec.col(it->first);
          }
          loss += (static_cast<double>(r.squaredNorm()) + cfg.sparsity * l1) * static_cast<double>(scale);
          r *= 2.0f * scale;
          g_bd += r.rowwise().sum();
          g_we.setZero(v, latent);
          gb.setZero(latent);
          for (Eigen::Index i = 0; i < cols; ++i) {
            auto [lo, hi] = span_of(i);
            for (auto it = lo; it != hi; ++it) {
              const Eigen::Index k = it->first;
              g_dec.col(k).noalias() += it->second * r.col(i);
              const float dz = r.col(i).dot(dec.col(k)) + lam * scale;
              g_we.col(k).noalias() += dz * x.col(i);
              gb[k] += dz;
            }
          }
        }
      }
      if (!std::isfinite(loss))
        throw Error("fit_sae: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                    std::to_string(step) + " (lr=" + std::to_string(cfg.learning_rate) +
                    ", sparsity=" + std::to_string(cfg.sparsity) + ")");
      detail::adam_step(dec, g_dec, s_dec, cfg, t);
      detail::adam_step(b_d, g_bd, s_b_d, cfg, t);
      detail::adam_step(we_m, g_enc[0], s_enc_m, cfg, t);
      detail::adam_step(b_m, g_bias[0], s_b_m, cfg, t);
      if (dual) {
        detail::adam_step(we_p, g_enc[1], s_enc_p, cfg, t);
        detail::adam_step(b_p, g_bias[1], s_b_p, cfg, t);
      }
    }
    fit.heldout_loss.push_back(loss_on(heldout));
  }

  // Unit-norm decoder columns; encoder rows and biases absorb the norm so the
  // reconstruction is unchanged. Zero columns are dropped.
  const Matrix dec_d = dec.cast<double>();
  const Matrix enc_m = we_m.transpose().cast<double>();
  const Matrix enc_p = dual ? Matrix(we_p.transpose().cast<double>()) : Matrix();
  std::vector<Eigen::Index> keep;
  for (Eigen::Index k = 0; k < latent; ++k)
    if (dec_d.col(k).norm() > 0.0) keep.push_back(k);
  if (keep.empty()) throw Error("fit_sae: all decoder columns are zero");
  const auto kept = static_cast<Eigen::Index>(keep.size());
  Matrix comp(kept, v), e_m(kept, v), e_p(dual ? kept : 0, dual ? v : 0);
  Vector bm(kept), bp(dual ? kept : 0);
  for (Eigen::Index i = 0; i < kept; ++i) {
    const Eigen::Index k = keep[static_cast<std::size_t>(i)];
    const double nrm = dec_d.col(k).norm();
    comp.row(i) = dec_d.col(k).transpose() / nrm;
    e_m.row(i) = enc_m.row(k) * nrm;
    bm[i] = static_cast<double>(b_m[k]) * nrm;
    if (dual) {
      e_p.row(i) = enc_p.row(k) * nrm;
      bp[i] = static_cast<double>(b_p[k]) * nrm;
    }
  }
  fit.dropped_latents = static_cast<std::size_t>(latent - kept);

  Matrix codes = train_m * e_m.transpose();
  codes.rowwise() += bm.transpose();
  fit.active_fraction = (codes.array() > 0.01).cast<double>().mean();

  Decomposition& d = fit.decomposition;
  d.method = Method::sae;
  d.roi = ctx.roi;
  d.components = std::move(comp);
  d.hyperparams = {{"expansion_factor", cfg.expansion_factor},
                   {"sparsity", cfg.sparsity},
                   {"seed", cfg.seed}};
  d.normalization = ctx.normalization;
  d.provenance = ctx.provenance;
  d.state = SaeState{std::move(e_m), std::move(bm), std::move(e_p), std::move(bp), b_d.cast<double>()};
  d.diagnostics = {{"epochs", cfg.epochs},
                   {"learning_rate", cfg.learning_rate},
                   {"batch_size", cfg.batch_size},
                   {"latent_dim", fit.latent_dim},
                   {"dropped_latents", fit.dropped_latents},
                   {"heldout_loss_initial", fit.heldout_loss.front()},
                   {"heldout_loss_final", fit.heldout_loss.back()},
                   {"active_fraction", fit.active_fraction},
                   {"dual_encoders", dual},
                   {"samples_seen_measured", seen_measured},
                   {"samples_seen_predicted", seen_predicted}};
  return fit;
}

}  // namespace brainexplore
