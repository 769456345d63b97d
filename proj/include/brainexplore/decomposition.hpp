#pragma once

// Decomposition artifacts, pattern identifiers and coefficient projection.

#include "brainexplore/core.hpp"
#include "brainexplore/matrix_io.hpp"

#include <compare>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <variant>

namespace brainexplore {

enum class Method { voxels, pca, nmf, ica, sae };

inline constexpr Method kMethods[] = {Method::voxels, Method::pca, Method::nmf, Method::ica, Method::sae};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::voxels: return "voxels";
    case Method::pca: return "pca";
    case Method::nmf: return "nmf";
    case Method::ica: return "ica";
    case Method::sae: return "sae";
  }
  return "?";
}

inline Method method_from_string(std::string_view s) {
  for (Method m : kMethods)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown decomposition method '" + std::string(s) + "'");
}

/// Methods whose components are emitted as (+c, -c) pairs.
inline bool is_sign_duplicated(Method m) {
  return m == Method::voxels || m == Method::pca || m == Method::ica;
}

enum class Sign { none, positive, negative };

struct PatternId {
  Method method = Method::voxels;
  std::string roi;
  std::string fingerprint;
  std::size_t index = 0;
  Sign sign = Sign::none;

  auto operator<=>(const PatternId&) const = default;

  std::string key() const {
    std::string s = std::string(to_string(method)) + "/" + roi + "/" + fingerprint + "/" + std::to_string(index);
    if (sign == Sign::positive) s += "+";
    if (sign == Sign::negative) s += "-";
    return s;
  }

  json to_json() const {
    return {{"method", to_string(method)},
            {"roi", roi},
            {"fingerprint", fingerprint},
            {"index", index},
            {"sign", sign == Sign::none ? "" : (sign == Sign::positive ? "+" : "-")},
            {"key", key()}};
  }

  static PatternId from_json(const json& j) {
    PatternId id;
    id.method = method_from_string(j.at("method").get<std::string>());
    id.roi = j.at("roi").get<std::string>();
    id.fingerprint = j.at("fingerprint").get<std::string>();
    id.index = j.at("index").get<std::size_t>();
    const auto s = j.at("sign").get<std::string>();
    id.sign = s.empty() ? Sign::none : (s == "+" ? Sign::positive : Sign::negative);
    return id;
  }
};

/// Per-voxel affine map applied to raw ROI responses before any method sees
/// them. An empty normalization is the identity.
struct Normalization {
  Vector mean;
  Vector scale;

  bool empty() const { return mean.size() == 0; }

  Matrix apply(const Matrix& x) const {
    if (empty()) return x;
    if (x.cols() != mean.size()) throw Error("normalization width mismatch");
    return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
  }
};

struct VoxelState {};
struct PcaState {
  Vector center;
};
struct NmfState {
  std::size_t nnls_max_iter = 0;  // 0 selects 3*K + 10
};
struct IcaState {
  Vector center;
  Matrix unmixing;  // K_base x V
};
struct SaeState {
  Matrix encoder_measured;  // L x V
  Vector bias_measured;
  Matrix encoder_predicted;  // empty when trained on a single pool
  Vector bias_predicted;
  Vector decoder_bias;  // V
};

using MethodState = std::variant<VoxelState, PcaState, NmfState, IcaState, SaeState>;

struct Decomposition {
  Method method = Method::voxels;
  std::string roi;
  Matrix components;  // K x V_roi; sign-duplicated methods store rows (2k, 2k+1) = (+c_k, -c_k)
  json hyperparams = json::object();
  std::vector<PoolKind> provenance{PoolKind::measured};
  Normalization normalization;
  MethodState state;
  bool converged = true;
  json diagnostics = json::object();

  std::size_t num_patterns() const { return static_cast<std::size_t>(components.rows()); }
  std::size_t num_voxels() const { return static_cast<std::size_t>(components.cols()); }
  bool sign_duplicated() const { return is_sign_duplicated(method); }
  std::size_t num_base() const { return sign_duplicated() ? num_patterns() / 2 : num_patterns(); }

  /// Canonical "key=value,..." over hyperparams (sorted keys).
  std::string fingerprint() const {
    std::string out;
    for (const auto& [k, v] : hyperparams.items()) {
      if (!out.empty()) out += ",";
      out += k + "=";
      if (v.is_string()) {
        out += v.get<std::string>();
      } else if (v.is_number_float()) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", v.get<double>());
        out += buf;
      } else {
        out += v.dump();
      }
    }
    return out.empty() ? "default" : out;
  }

  PatternId pattern_id(std::size_t row) const {
    PatternId id{method, roi, fingerprint(), row, Sign::none};
    if (sign_duplicated()) {
      id.index = row / 2;
      id.sign = row % 2 == 0 ? Sign::positive : Sign::negative;
    }
    return id;
  }

  void validate() const {
    if (components.rows() < 1) throw Error("decomposition has no components");
    for (Eigen::Index r = 0; r < components.rows(); ++r)
      if (components.row(r).cwiseAbs().maxCoeff() == 0.0)
        throw Error("component row " + std::to_string(r) + " is all-zero");
    if (method == Method::nmf && components.minCoeff() < 0.0) throw Error("nmf component has a negative entry");
    if (sign_duplicated()) {
      if (components.rows() % 2 != 0) throw Error("sign-duplicated decomposition has odd row count");
      for (Eigen::Index k = 0; k < components.rows(); k += 2)
        if (components.row(k) != -components.row(k + 1))
          throw Error("rows " + std::to_string(k) + "/" + std::to_string(k + 1) + " are not a negation pair");
    }
  }
};

/// Interleaves base rows into (+b_0, -b_0, +b_1, -b_1, ...).
inline Matrix duplicate_signed_rows(const Matrix& base) {
  Matrix out(2 * base.rows(), base.cols());
  for (Eigen::Index k = 0; k < base.rows(); ++k) {
    out.row(2 * k) = base.row(k);
    out.row(2 * k + 1) = -base.row(k);
  }
  return out;
}

inline Matrix duplicate_signed_cols(const Matrix& base) {
  Matrix out(base.rows(), 2 * base.cols());
  for (Eigen::Index k = 0; k < base.cols(); ++k) {
    out.col(2 * k) = base.col(k);
    out.col(2 * k + 1) = -base.col(k);
  }
  return out;
}

inline Matrix base_rows(const Decomposition& d) {
  if (!d.sign_duplicated()) return d.components;
  Matrix out(d.components.rows() / 2, d.components.cols());
  for (Eigen::Index k = 0; k < out.rows(); ++k) out.row(k) = d.components.row(2 * k);
  return out;
}

struct NnlsResult {
  Vector solution;
  bool converged = true;
};

/// Lawson-Hanson active set for min ||x - h W||, h >= 0, posed on the Gram
/// matrix G = W W^T and b = W x.
inline NnlsResult nnls_gram(const Matrix& gram, const Vector& b, std::size_t max_iter) {
  const Eigen::Index k = b.size();
  Vector h = Vector::Zero(k);
  std::vector<char> passive(static_cast<std::size_t>(k), 0);
  const double tol = 1e-12 * std::max(1.0, b.cwiseAbs().maxCoeff()) * static_cast<double>(k);
  Vector w = b;
  std::size_t iter = 0;

  auto solve_passive = [&](Vector& s) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < k; ++i)
      if (passive[static_cast<std::size_t>(i)]) idx.push_back(i);
    const auto n = static_cast<Eigen::Index>(idx.size());
    Matrix gp(n, n);
    Vector bp(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      bp[r] = b[idx[static_cast<std::size_t>(r)]];
      for (Eigen::Index c = 0; c < n; ++c) gp(r, c) = gram(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]);
    }
    const Vector sp = gp.ldlt().solve(bp);
    s = Vector::Zero(k);
    for (Eigen::Index r = 0; r < n; ++r) s[idx[static_cast<std::size_t>(r)]] = sp[r];
  };

  while (true) {
    Eigen::Index best = -1;
    double best_w = tol;
    for (Eigen::Index i = 0; i < k; ++i)
      if (!passive[static_cast<std::size_t>(i)] && w[i] > best_w) {
        best_w = w[i];
        best = i;
      }
    if (best < 0) return {h, true};
    if (++iter > max_iter) return {h, false};
    passive[static_cast<std::size_t>(best)] = 1;

    Vector s;
    while (true) {
      solve_passive(s);
      bool feasible = true;
      for (Eigen::Index i = 0; i < k; ++i)
        if (passive[static_cast<std::size_t>(i)] && s[i] <= 0.0) feasible = false;
      if (feasible) break;
      double alpha = 1.0;
      for (Eigen::Index i = 0; i < k; ++i)
        if (passive[static_cast<std::size_t>(i)] && s[i] <= 0.0)
          alpha = std::min(alpha, h[i] / (h[i] - s[i]));
      h += alpha * (s - h);
      for (Eigen::Index i = 0; i < k; ++i)
        if (passive[static_cast<std::size_t>(i)] && h[i] <= 1e-15) {
          passive[static_cast<std::size_t>(i)] = 0;
          h[i] = 0.0;
        }
      if (++iter > max_iter) return {h, false};
    }
    h = s;
    w = b - gram * h;
  }
}

struct ProjectionStats {
  std::size_t unconverged_rows = 0;
};

/// Coefficients (N x K) of raw ROI responses on every pattern of `d`.
/// `pool` selects the SAE encoder; other methods ignore it.
inline Matrix project_coefficients(const Decomposition& d, const Matrix& responses,
                                   PoolKind pool = PoolKind::measured, ProjectionStats* stats = nullptr) {
  if (static_cast<std::size_t>(responses.cols()) != d.num_voxels())
    throw Error("project_coefficients: responses have " + std::to_string(responses.cols()) +
                " columns, decomposition expects " + std::to_string(d.num_voxels()));
  const Matrix x = d.normalization.apply(responses);

  return std::visit(
      [&](const auto& st) -> Matrix {
        using T = std::decay_t<decltype(st)>;
        if constexpr (std::is_same_v<T, VoxelState>) {
          if (d.method != Method::voxels) throw Error("method/state mismatch");
          // base rows are one-hot: pick the voxel column directly
          const Matrix basis = base_rows(d);
          Matrix base(x.rows(), basis.rows());
          for (Eigen::Index k = 0; k < basis.rows(); ++k) {
            Eigen::Index voxel = 0;
            basis.row(k).cwiseAbs().maxCoeff(&voxel);
            base.col(k) = basis(k, voxel) * x.col(voxel);
          }
          return duplicate_signed_cols(base);
        } else if constexpr (std::is_same_v<T, PcaState>) {
          if (d.method != Method::pca) throw Error("method/state mismatch");
          Matrix base = (x.rowwise() - st.center.transpose()) * base_rows(d).transpose();
          return duplicate_signed_cols(base);
        } else if constexpr (std::is_same_v<T, IcaState>) {
          if (d.method != Method::ica || st.unmixing.rows() != static_cast<Eigen::Index>(d.num_base()))
            throw Error("method/state mismatch");
          Matrix base = (x.rowwise() - st.center.transpose()) * st.unmixing.transpose();
          return duplicate_signed_cols(base);
        } else if constexpr (std::is_same_v<T, NmfState>) {
          if (d.method != Method::nmf) throw Error("method/state mismatch");
          const Matrix& w = d.components;
          const Matrix gram = w * w.transpose();
          const Matrix rhs = w * x.cwiseMax(0.0).transpose();  // K x N
          const std::size_t cap = st.nnls_max_iter ? st.nnls_max_iter : 3 * static_cast<std::size_t>(w.rows()) + 10;
          Matrix h(x.rows(), w.rows());
          for (Eigen::Index i = 0; i < x.rows(); ++i) {
            auto r = nnls_gram(gram, rhs.col(i), cap);
            if (!r.converged && stats) ++stats->unconverged_rows;
            h.row(i) = r.solution.transpose();
          }
          return h;
        } else {
          static_assert(std::is_same_v<T, SaeState>);
          if (d.method != Method::sae) throw Error("method/state mismatch");
          const bool use_pred = pool == PoolKind::predicted && st.encoder_predicted.size() > 0;
          const Matrix& enc = use_pred ? st.encoder_predicted : st.encoder_measured;
          const Vector& bias = use_pred ? st.bias_predicted : st.bias_measured;
          Matrix a = x * enc.transpose();
          a.rowwise() += bias.transpose();
          return a.cwiseMax(0.0);
        }
      },
      d.state);
}

// ---------------------------------------------------------------------------
// Persistence: a directory holding components.bxmat, meta.json and one
// .bxmat per auxiliary array.

namespace detail {

inline Matrix as_row(const Vector& v) { return v.transpose(); }
inline Vector as_vector(const Matrix& m) { return m.size() == 0 ? Vector() : Vector(m.row(0).transpose()); }

}  // namespace detail

inline void save_decomposition(const std::filesystem::path& dir, const Decomposition& d) {
  std::filesystem::create_directories(dir);
  save_matrix(dir / "components.bxmat", d.components);
  json meta = {{"schema_version", 1},
               {"method", to_string(d.method)},
               {"roi", d.roi},
               {"hyperparams", d.hyperparams},
               {"fingerprint", d.fingerprint()},
               {"converged", d.converged},
               {"diagnostics", d.diagnostics},
               {"normalized", !d.normalization.empty()}};
  json prov = json::array();
  for (auto k : d.provenance) prov.push_back(to_string(k));
  meta["provenance"] = prov;
  if (!d.normalization.empty()) {
    save_matrix(dir / "norm_mean.bxmat", detail::as_row(d.normalization.mean));
    save_matrix(dir / "norm_scale.bxmat", detail::as_row(d.normalization.scale));
  }
  std::visit(
      [&](const auto& st) {
        using T = std::decay_t<decltype(st)>;
        if constexpr (std::is_same_v<T, PcaState>) {
          save_matrix(dir / "center.bxmat", detail::as_row(st.center));
        } else if constexpr (std::is_same_v<T, IcaState>) {
          save_matrix(dir / "center.bxmat", detail::as_row(st.center));
          save_matrix(dir / "unmixing.bxmat", st.unmixing);
        } else if constexpr (std::is_same_v<T, NmfState>) {
          meta["nnls_max_iter"] = st.nnls_max_iter;
        } else if constexpr (std::is_same_v<T, SaeState>) {
          save_matrix(dir / "encoder_measured.bxmat", st.encoder_measured);
          save_matrix(dir / "bias_measured.bxmat", detail::as_row(st.bias_measured));
          if (st.encoder_predicted.size() > 0) {
            save_matrix(dir / "encoder_predicted.bxmat", st.encoder_predicted);
            save_matrix(dir / "bias_predicted.bxmat", detail::as_row(st.bias_predicted));
          }
          save_matrix(dir / "decoder_bias.bxmat", detail::as_row(st.decoder_bias));
        }
      },
      d.state);
  detail::write_all(dir / "meta.json", meta.dump(2) + "\n");
}

inline Decomposition load_decomposition(const std::filesystem::path& dir) {
  const json meta = json::parse(detail::read_all(dir / "meta.json"));
  Decomposition d;
  d.method = method_from_string(meta.at("method").get<std::string>());
  d.roi = meta.at("roi").get<std::string>();
  d.hyperparams = meta.at("hyperparams");
  d.converged = meta.at("converged").get<bool>();
  d.diagnostics = meta.at("diagnostics");
  d.provenance.clear();
  for (const auto& p : meta.at("provenance")) d.provenance.push_back(pool_kind_from_string(p.get<std::string>()));
  d.components = load_matrix(dir / "components.bxmat");
  if (meta.at("normalized").get<bool>()) {
    d.normalization.mean = detail::as_vector(load_matrix(dir / "norm_mean.bxmat"));
    d.normalization.scale = detail::as_vector(load_matrix(dir / "norm_scale.bxmat"));
  }
  switch (d.method) {
    case Method::voxels: d.state = VoxelState{}; break;
    case Method::pca: d.state = PcaState{detail::as_vector(load_matrix(dir / "center.bxmat"))}; break;
    case Method::nmf: d.state = NmfState{meta.value("nnls_max_iter", std::size_t{0})}; break;
    case Method::ica:
      d.state = IcaState{detail::as_vector(load_matrix(dir / "center.bxmat")), load_matrix(dir / "unmixing.bxmat")};
      break;
    case Method::sae: {
      SaeState st;
      st.encoder_measured = load_matrix(dir / "encoder_measured.bxmat");
      st.bias_measured = detail::as_vector(load_matrix(dir / "bias_measured.bxmat"));
      if (std::filesystem::exists(dir / "encoder_predicted.bxmat")) {
        st.encoder_predicted = load_matrix(dir / "encoder_predicted.bxmat");
        st.bias_predicted = detail::as_vector(load_matrix(dir / "bias_predicted.bxmat"));
      }
      st.decoder_bias = detail::as_vector(load_matrix(dir / "decoder_bias.bxmat"));
      d.state = std::move(st);
      break;
    }
  }
  return d;
}

}  // namespace brainexplore
