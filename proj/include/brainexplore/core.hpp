#pragma once

// Domain data model shared by every stage: voxel spaces and their ROI
// partition, stimulus response pools, and a few numeric primitives.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace brainexplore {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using json = nlohmann::json;

// Error hierarchy. The CLI maps the three tagged kinds to exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct MissingArtifactError : Error {
  using Error::Error;
};
struct BackendError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};

enum class PoolKind { measured, predicted };

inline std::string_view to_string(PoolKind k) {
  return k == PoolKind::measured ? "measured" : "predicted";
}

inline PoolKind pool_kind_from_string(std::string_view s) {
  if (s == "measured") return PoolKind::measured;
  if (s == "predicted") return PoolKind::predicted;
  throw ConfigError("unknown pool kind '" + std::string(s) + "'");
}

inline constexpr PoolKind kPoolKinds[] = {PoolKind::measured, PoolKind::predicted};

class VoxelSpace {
 public:
  using RoiMap = std::map<std::string, std::vector<std::size_t>>;

  VoxelSpace() = default;

  /// Validates that ROI lists are sorted, duplicate-free, nonempty, in range
  /// and mutually disjoint.
  VoxelSpace(std::string subject_id, std::size_t total_voxels, RoiMap rois)
      : subject_id_(std::move(subject_id)), total_voxels_(total_voxels), rois_(std::move(rois)) {
    std::vector<char> seen(total_voxels_, 0);
    for (const auto& [name, idx] : rois_) {
      if (idx.empty()) throw Error("ROI '" + name + "' is empty");
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= total_voxels_)
          throw Error("ROI '" + name + "' index " + std::to_string(idx[i]) + " out of range");
        if (i > 0 && idx[i] <= idx[i - 1])
          throw Error("ROI '" + name + "' indices not strictly increasing");
        if (seen[idx[i]]) throw Error("ROI '" + name + "' overlaps another ROI");
        seen[idx[i]] = 1;
      }
    }
  }

  const std::string& subject_id() const { return subject_id_; }
  std::size_t total_voxels() const { return total_voxels_; }
  const RoiMap& rois() const { return rois_; }

  const std::vector<std::size_t>& roi(const std::string& name) const {
    auto it = rois_.find(name);
    if (it == rois_.end()) throw Error("unknown ROI '" + name + "'");
    return it->second;
  }

  std::vector<std::string> roi_names() const {
    std::vector<std::string> out;
    for (const auto& kv : rois_) out.push_back(kv.first);
    return out;
  }

  json to_json() const {
    json rois = json::object();
    for (const auto& [name, idx] : rois_) rois[name] = idx;
    return {{"subject_id", subject_id_}, {"total_voxels", total_voxels_}, {"rois", rois}};
  }

  static VoxelSpace from_json(const json& j) {
    RoiMap rois;
    for (const auto& [name, idx] : j.at("rois").items())
      rois[name] = idx.get<std::vector<std::size_t>>();
    return VoxelSpace(j.at("subject_id").get<std::string>(), j.at("total_voxels").get<std::size_t>(),
                      std::move(rois));
  }

 private:
  std::string subject_id_;
  std::size_t total_voxels_ = 0;
  RoiMap rois_;
};

class ResponsePool {
 public:
  ResponsePool() = default;

  ResponsePool(PoolKind kind, std::vector<std::string> stimulus_ids, Matrix responses)
      : kind_(kind), stimulus_ids_(std::move(stimulus_ids)), responses_(std::move(responses)) {
    if (stimulus_ids_.empty()) throw Error("response pool must contain at least one stimulus");
    if (static_cast<std::size_t>(responses_.rows()) != stimulus_ids_.size())
      throw Error("response rows (" + std::to_string(responses_.rows()) +
                  ") do not match stimulus count (" + std::to_string(stimulus_ids_.size()) + ")");
    std::unordered_set<std::string> seen;
    for (const auto& id : stimulus_ids_)
      if (!seen.insert(id).second) throw Error("duplicate stimulus id '" + id + "'");
  }

  PoolKind kind() const { return kind_; }
  const std::vector<std::string>& stimulus_ids() const { return stimulus_ids_; }
  const Matrix& responses() const { return responses_; }
  std::size_t size() const { return stimulus_ids_.size(); }

 private:
  PoolKind kind_ = PoolKind::measured;
  std::vector<std::string> stimulus_ids_;
  Matrix responses_;
};

/// Columns of `pool` belonging to `roi`, in the ROI's stored index order.
inline Matrix restrict_to_roi(const ResponsePool& pool, const VoxelSpace& space, const std::string& roi) {
  const auto& idx = space.roi(roi);
  if (static_cast<std::size_t>(pool.responses().cols()) != space.total_voxels())
    throw Error("pool width " + std::to_string(pool.responses().cols()) +
                " does not match voxel space width " + std::to_string(space.total_voxels()));
  Matrix out(pool.responses().rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = pool.responses().col(static_cast<Eigen::Index>(idx[j]));
  return out;
}

/// Pearson r. A constant input yields 0 rather than NaN.
inline double pearson_correlation(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  if (a.size() != b.size())
    throw Error("pearson_correlation: length mismatch (" + std::to_string(a.size()) + " vs " +
                std::to_string(b.size()) + ")");
  if (a.size() < 2) throw Error("pearson_correlation: need at least two samples");
  const double ma = a.mean();
  const double mb = b.mean();
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace brainexplore
