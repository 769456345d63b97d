#pragma once

// Top-activating stimulus retrieval, the ranking/evaluation split of each
// pool, embedding consistency and candidate triage.

#include "brainexplore/decomposition.hpp"
#include "brainexplore/rng.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace brainexplore {

// ---------------------------------------------------------------------------
// Split

enum class Half { ranking, evaluation };

inline std::string_view to_string(Half h) { return h == Half::ranking ? "ranking" : "evaluation"; }

inline Half half_from_string(std::string_view s) {
  if (s == "ranking") return Half::ranking;
  if (s == "evaluation") return Half::evaluation;
  throw ConfigError("unknown split half '" + std::string(s) + "'");
}

struct PoolSplit {
  std::vector<std::size_t> ranking;     // sorted row indices
  std::vector<std::size_t> evaluation;  // sorted row indices

  const std::vector<std::size_t>& rows(Half h) const { return h == Half::ranking ? ranking : evaluation; }
  std::size_t size() const { return ranking.size() + evaluation.size(); }
};

struct SplitAssignment {
  std::uint64_t seed = 0;
  std::map<PoolKind, PoolSplit> pools;

  const PoolSplit& pool(PoolKind k) const {
    auto it = pools.find(k);
    if (it == pools.end()) throw Error("split has no " + std::string(to_string(k)) + " pool");
    return it->second;
  }

  json to_json() const {
    json j = {{"seed", seed}, {"pools", json::object()}};
    for (const auto& [k, s] : pools)
      j["pools"][std::string(to_string(k))] = {{"ranking", s.ranking}, {"evaluation", s.evaluation}};
    return j;
  }

  static SplitAssignment from_json(const json& j) {
    SplitAssignment s;
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [k, v] : j.at("pools").items())
      s.pools[pool_kind_from_string(k)] = {v.at("ranking").get<std::vector<std::size_t>>(),
                                           v.at("evaluation").get<std::vector<std::size_t>>()};
    return s;
  }
};

/// Seeded uniform partition of one pool of `n` rows. The first ceil(n/2)
/// shuffled rows form the ranking half.
inline PoolSplit split_rows(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw Error("split_pools: pool needs at least 2 stimuli, has " + std::to_string(n));
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(perm.begin(), perm.end());
  const std::size_t cut = (n + 1) / 2;
  PoolSplit s{{perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(cut)},
              {perm.begin() + static_cast<std::ptrdiff_t>(cut), perm.end()}};
  std::sort(s.ranking.begin(), s.ranking.end());
  std::sort(s.evaluation.begin(), s.evaluation.end());
  return s;
}

inline SplitAssignment split_pools(const std::map<PoolKind, std::size_t>& pool_sizes, std::uint64_t seed) {
  SplitAssignment out;
  out.seed = seed;
  for (const auto& [kind, n] : pool_sizes)
    out.pools[kind] = split_rows(n, mix_seed(seed, static_cast<std::uint64_t>(kind) + 1));
  return out;
}

// ---------------------------------------------------------------------------
// Top-activating sets

struct TopRequest {
  std::optional<double> fraction;
  std::optional<std::size_t> count;

  static TopRequest of_fraction(double f) { return {f, std::nullopt}; }
  static TopRequest of_count(std::size_t n) { return {std::nullopt, n}; }

  /// Number of ids asked for out of `available` candidates.
  std::size_t resolve(std::size_t available) const {
    if (count) {
      if (*count < 1) throw ConfigError("top count must be at least 1");
      return *count;
    }
    if (!fraction || !(*fraction > 0.0 && *fraction <= 1.0))
      throw ConfigError("top fraction must lie in (0, 1]");
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(*fraction * static_cast<double>(available))));
  }
};

inline constexpr double kSaeActivationCutoff = 0.01;

/// Whether a coefficient may appear in a top set. Dead SAE codes sit just
/// above zero, hence the separate floor.
inline bool passes_cutoff(Method m, double coeff) {
  return m == Method::sae ? coeff >= kSaeActivationCutoff : coeff > 0.0;
}

struct TopSet {
  PatternId pattern;
  PoolKind pool = PoolKind::measured;
  std::vector<std::size_t> rows;  // row indices into the pool
  std::vector<std::string> ids;
  std::vector<double> coeffs;
  std::size_t requested = 0;
  std::optional<Half> half;  // split half the candidates were drawn from, if any

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool short_of_request() const { return ids.size() < requested; }

  json to_json() const {
    return {{"pattern", pattern.key()},
            {"pool", to_string(pool)},
            {"half", half ? std::string(to_string(*half)) : std::string()},
            {"requested", requested},
            {"rows", rows},
            {"ids", ids},
            {"coeffs", coeffs}};
  }
};

/// Highest coefficients among `candidates` (all rows when null), descending,
/// ties by stimulus id. Rows failing the method's cutoff never appear.
inline TopSet top_activating(const Eigen::Ref<const Vector>& coeff, std::span<const std::string> ids,
                             const TopRequest& request, Method method,
                             const std::vector<std::size_t>* candidates = nullptr) {
  if (static_cast<std::size_t>(coeff.size()) != ids.size())
    throw Error("top_activating: " + std::to_string(coeff.size()) + " coefficients for " +
                std::to_string(ids.size()) + " ids");
  const std::size_t available = candidates ? candidates->size() : ids.size();
  TopSet out;
  out.requested = request.resolve(available);

  std::vector<std::size_t> pass;
  pass.reserve(available);
  auto consider = [&](std::size_t r) {
    if (passes_cutoff(method, coeff[static_cast<Eigen::Index>(r)])) pass.push_back(r);
  };
  if (candidates)
    for (std::size_t r : *candidates) consider(r);
  else
    for (std::size_t r = 0; r < ids.size(); ++r) consider(r);

  auto before = [&](std::size_t a, std::size_t b) {
    const double ca = coeff[static_cast<Eigen::Index>(a)];
    const double cb = coeff[static_cast<Eigen::Index>(b)];
    if (ca != cb) return ca > cb;
    return ids[a] < ids[b];
  };
  const std::size_t take = std::min(out.requested, pass.size());
  std::partial_sort(pass.begin(), pass.begin() + static_cast<std::ptrdiff_t>(take), pass.end(), before);
  pass.resize(take);

  out.rows = pass;
  for (std::size_t r : pass) {
    out.ids.push_back(ids[r]);
    out.coeffs.push_back(coeff[static_cast<Eigen::Index>(r)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Explanation image set

inline constexpr std::size_t kExplainMeasured = 6;
inline constexpr std::size_t kExplainPredicted = 10;

struct ImageRef {
  PoolKind pool;
  std::string id;

  auto operator<=>(const ImageRef&) const = default;
};

struct ExplanationSet {
  std::vector<ImageRef> images;  // measured first
  bool short_measured = false;
  bool short_predicted = false;

  bool flagged() const { return short_measured || short_predicted; }
};

inline ExplanationSet explanation_image_set(const TopSet& measured, const TopSet& predicted,
                                            std::size_t n_measured = kExplainMeasured,
                                            std::size_t n_predicted = kExplainPredicted) {
  if (measured.empty() && predicted.empty())
    throw Error("explanation_image_set: both pools are empty for " + measured.pattern.key());
  ExplanationSet out;
  const auto take_m = std::min(n_measured, measured.size());
  const auto take_p = std::min(n_predicted, predicted.size());
  for (std::size_t i = 0; i < take_m; ++i) out.images.push_back({PoolKind::measured, measured.ids[i]});
  for (std::size_t i = 0; i < take_p; ++i) out.images.push_back({PoolKind::predicted, predicted.ids[i]});
  out.short_measured = take_m < n_measured;
  out.short_predicted = take_p < n_predicted;
  return out;
}

// ---------------------------------------------------------------------------
// Consistency and triage

/// Mean cosine over all unordered pairs of (unit) embeddings.
inline double consistency_score(std::span<const Vector> embeddings) {
  const std::size_t n = embeddings.size();
  if (n < 2) throw Error("consistency_score: need at least 2 embeddings, got " + std::to_string(n));
  // sum_{i<j} <e_i, e_j> = (|sum e|^2 - sum |e_i|^2) / 2
  Vector total = Vector::Zero(embeddings[0].size());
  double self = 0.0;
  for (const auto& e : embeddings) {
    if (e.size() != total.size()) throw Error("consistency_score: embedding dimensions differ");
    total += e;
    self += e.squaredNorm();
  }
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  return (total.squaredNorm() - self) / 2.0 / pairs;
}

struct ScoredPattern {
  PatternId pattern;
  double consistency = 0.0;
};

/// Best `top_k` patterns per (roi, method) by consistency; ties by PatternId.
/// Output is grouped by (roi, method) and ordered best-first within a group.
inline std::vector<PatternId> select_candidates(std::vector<ScoredPattern> scored, std::size_t top_k = 40) {
  std::sort(scored.begin(), scored.end(), [](const ScoredPattern& a, const ScoredPattern& b) {
    if (a.pattern.roi != b.pattern.roi) return a.pattern.roi < b.pattern.roi;
    if (a.pattern.method != b.pattern.method) return a.pattern.method < b.pattern.method;
    if (a.consistency != b.consistency) return a.consistency > b.consistency;
    return a.pattern < b.pattern;
  });
  std::vector<PatternId> out;
  std::size_t in_group = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    const bool new_group = i == 0 || scored[i].pattern.roi != scored[i - 1].pattern.roi ||
                           scored[i].pattern.method != scored[i - 1].pattern.method;
    in_group = new_group ? 0 : in_group;
    if (in_group++ < top_k) out.push_back(scored[i].pattern);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL persistence. The pattern is written as its key; the reader resolves
// it against the patterns of the run.

inline void write_topsets_jsonl(std::ostream& out, std::span<const TopSet> sets, std::string_view tag = {}) {
  for (const auto& s : sets) {
    json j = s.to_json();
    if (!tag.empty()) j["tag"] = tag;
    out << j.dump() << '\n';
  }
}

struct TopSetRecord {
  std::string pattern_key;
  std::string tag;
  TopSet set;
};

inline std::vector<TopSetRecord> read_topsets_jsonl(std::istream& in, const std::string& source = "<stream>") {
  std::vector<TopSetRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      TopSetRecord r;
      r.pattern_key = j.at("pattern").get<std::string>();
      r.tag = j.value("tag", "");
      r.set.pool = pool_kind_from_string(j.at("pool").get<std::string>());
      r.set.requested = j.at("requested").get<std::size_t>();
      if (const auto h = j.value("half", std::string()); !h.empty()) r.set.half = half_from_string(h);
      r.set.rows = j.at("rows").get<std::vector<std::size_t>>();
      r.set.ids = j.at("ids").get<std::vector<std::string>>();
      r.set.coeffs = j.at("coeffs").get<std::vector<double>>();
      if (r.set.ids.size() != r.set.coeffs.size() || r.set.ids.size() != r.set.rows.size())
        throw FormatError("ids/coeffs/rows lengths differ");
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError(source + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace brainexplore
