#pragma once

// Pattern-hypothesis alignment scores, pattern and hypothesis search, dedup,
// and the two interpretability metrics. Tables are typed by split half so a
// ranking table can never be passed where evaluation scores are expected.

#include "brainexplore/label.hpp"
#include "brainexplore/matrix_io.hpp"
#include "brainexplore/retrieve.hpp"

#include <limits>

namespace brainexplore {

inline constexpr double kDefaultP0 = 0.05;
inline constexpr double kMaxNormalizationFactor = 2.0;

/// Rarity boost: factor = clamp(p0 / p_h, 1, 2), p_h = 0 taking the cap;
/// the result is clipped to 1.
inline double normalize_score(double raw, double p_h, double p0 = kDefaultP0) {
  if (!(p_h >= 0.0 && p_h <= 1.0)) throw Error("normalize_score: frequency outside [0, 1]");
  const double factor = p_h == 0.0 ? kMaxNormalizationFactor : std::clamp(p0 / p_h, 1.0, kMaxNormalizationFactor);
  return std::min(1.0, raw * factor);
}

/// Fraction of the top set labeled positive for `h`; nullopt for an empty set.
inline std::optional<double> raw_alignment(const TopSet& top, std::size_t h, const LabelMatrix& labels) {
  if (top.empty()) return std::nullopt;
  std::size_t hits = 0;
  for (std::size_t r : top.rows) hits += labels.is_positive(r, h) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(top.size());
}

struct ScoreConfig {
  double p0 = kDefaultP0;
  TopRequest top = TopRequest::of_fraction(0.002);
  std::vector<PoolKind> pools{PoolKind::measured, PoolKind::predicted};
};

using PoolLabels = std::map<PoolKind, LabelMatrix>;
using PoolTopSets = std::map<PoolKind, TopSet>;

struct ScoreEntry {
  std::map<PoolKind, double> raw;
  std::map<PoolKind, double> normalized;
  double final = 0.0;
  bool missing_pool = false;
};

inline double mean_of_present(std::span<const double> values) {
  double sum = 0.0;
  int n = 0;
  for (double v : values)
    if (!std::isnan(v)) {
      sum += v;
      ++n;
    }
  return n ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

inline ScoreEntry pattern_hypothesis_score(const PoolTopSets& tops, std::size_t h, const PoolLabels& labels,
                                           double p0 = kDefaultP0) {
  ScoreEntry e;
  std::vector<double> parts;
  for (const auto& [kind, top] : tops) {
    const auto raw = raw_alignment(top, h, labels.at(kind));
    if (!raw) {
      e.missing_pool = true;
      continue;
    }
    e.raw[kind] = *raw;
    e.normalized[kind] = normalize_score(*raw, labels.at(kind).frequency(h), p0);
    parts.push_back(e.normalized[kind]);
  }
  if (parts.empty()) throw Error("pattern_hypothesis_score: no pool has top-activating stimuli");
  e.final = mean_of_present(parts);
  return e;
}

// ---------------------------------------------------------------------------
// Tables

template <Half H>
struct ScoreTable {
  static constexpr Half half = H;

  std::vector<PatternId> patterns;
  std::size_t num_hypotheses = 0;
  std::vector<PoolKind> pools;
  std::map<PoolKind, Matrix> raw;         // P x H, NaN where the top set is empty
  std::map<PoolKind, Matrix> normalized;  // P x H
  Matrix final;                           // P x H, NaN when every pool is missing
  double p0 = kDefaultP0;

  std::size_t num_patterns() const { return patterns.size(); }

  double score(std::size_t p, std::size_t h) const {
    return final(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(h));
  }

  /// Rows whose pattern satisfies `keep`, in the original order.
  template <class Pred>
  ScoreTable select(Pred keep) const {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < patterns.size(); ++i)
      if (keep(patterns[i])) rows.push_back(static_cast<Eigen::Index>(i));
    ScoreTable out;
    out.num_hypotheses = num_hypotheses;
    out.pools = pools;
    out.p0 = p0;
    auto take = [&](const Matrix& m) {
      Matrix r(static_cast<Eigen::Index>(rows.size()), m.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) r.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
      return r;
    };
    for (auto i : rows) out.patterns.push_back(patterns[static_cast<std::size_t>(i)]);
    for (const auto& [k, m] : raw) out.raw[k] = take(m);
    for (const auto& [k, m] : normalized) out.normalized[k] = take(m);
    out.final = take(final);
    return out;
  }
};

using RankingTable = ScoreTable<Half::ranking>;
using EvaluationTable = ScoreTable<Half::evaluation>;

struct PatternTops {
  PatternId pattern;
  PoolTopSets tops;  // per pool, drawn from one split half
};

/// Scores every pattern against every hypothesis. Each top set must come
/// from half H; anything else is a split-discipline violation.
template <Half H>
ScoreTable<H> build_score_table(const std::vector<PatternTops>& patterns, const PoolLabels& labels,
                                std::size_t num_hypotheses, const std::vector<PoolKind>& pools,
                                double p0 = kDefaultP0) {
  ScoreTable<H> t;
  t.num_hypotheses = num_hypotheses;
  t.pools = pools;
  t.p0 = p0;
  const auto P = static_cast<Eigen::Index>(patterns.size());
  const auto NH = static_cast<Eigen::Index>(num_hypotheses);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (PoolKind k : pools) {
    const auto& lab = labels.at(k);
    if (lab.num_hypotheses != num_hypotheses)
      throw Error("label matrix for " + std::string(to_string(k)) + " pool has " +
                  std::to_string(lab.num_hypotheses) + " hypotheses, dictionary has " +
                  std::to_string(num_hypotheses));
    t.raw[k] = Matrix::Constant(P, NH, nan);
    t.normalized[k] = Matrix::Constant(P, NH, nan);
  }
  t.final = Matrix::Constant(P, NH, nan);

  std::vector<std::size_t> hits(num_hypotheses);
  for (Eigen::Index p = 0; p < P; ++p) {
    const auto& pt = patterns[static_cast<std::size_t>(p)];
    t.patterns.push_back(pt.pattern);
    for (PoolKind k : pools) {
      auto it = pt.tops.find(k);
      if (it == pt.tops.end()) throw Error("no " + std::string(to_string(k)) + " top set for " + pt.pattern.key());
      const TopSet& top = it->second;
      if (top.half != H)
        throw Error("split discipline violation: " + std::string(to_string(H)) + " table given a top set from " +
                    (top.half ? std::string(to_string(*top.half)) : std::string("the whole pool")) + " for " +
                    pt.pattern.key());
      if (top.empty()) continue;
      const auto& lab = labels.at(k);
      std::fill(hits.begin(), hits.end(), 0);
      for (std::size_t r : top.rows) {
        if (r >= lab.num_stimuli) throw Error("top set row outside label matrix");
        for (const auto& pr : lab.row(r)) ++hits[pr.second];
      }
      for (Eigen::Index h = 0; h < NH; ++h) {
        const double raw = static_cast<double>(hits[static_cast<std::size_t>(h)]) / static_cast<double>(top.size());
        t.raw[k](p, h) = raw;
        t.normalized[k](p, h) = normalize_score(raw, lab.frequency(static_cast<std::size_t>(h)), p0);
      }
    }
    std::vector<double> parts(pools.size());
    for (Eigen::Index h = 0; h < NH; ++h) {
      for (std::size_t i = 0; i < pools.size(); ++i) parts[i] = t.normalized[pools[i]](p, h);
      t.final(p, h) = mean_of_present(parts);
    }
  }
  return t;
}

inline void check_paired(const RankingTable& r, const EvaluationTable& e) {
  if (r.patterns != e.patterns || r.num_hypotheses != e.num_hypotheses)
    throw Error("ranking and evaluation tables cover different patterns or hypotheses");
}

// ---------------------------------------------------------------------------
// Search

struct PairPick {
  std::size_t pattern_row = 0;
  std::size_t hypothesis = 0;
  double ranking_score = 0.0;
  double evaluation_score = 0.0;
};

/// Hypothesis with the highest ranking score for one pattern row (ties to
/// the lower id), reported with its evaluation score.
inline std::optional<PairPick> best_hypothesis(const RankingTable& rank, const EvaluationTable& eval,
                                               std::size_t pattern_row) {
  check_paired(rank, eval);
  std::optional<PairPick> best;
  for (std::size_t h = 0; h < rank.num_hypotheses; ++h) {
    const double s = rank.score(pattern_row, h);
    if (std::isnan(s)) continue;
    if (!best || s > best->ranking_score) best = PairPick{pattern_row, h, s, eval.score(pattern_row, h)};
  }
  return best;
}

/// Pattern with the highest ranking score for `h`, optionally limited to one
/// ROI; ties go to the lower PatternId.
inline PairPick best_pattern(const RankingTable& rank, const EvaluationTable& eval, std::size_t h,
                             const std::optional<std::string>& roi = std::nullopt) {
  check_paired(rank, eval);
  if (h >= rank.num_hypotheses) throw Error("best_pattern: hypothesis id out of range");
  std::optional<PairPick> best;
  bool any_in_scope = false;
  for (std::size_t p = 0; p < rank.num_patterns(); ++p) {
    if (roi && rank.patterns[p].roi != *roi) continue;
    any_in_scope = true;
    const double s = rank.score(p, h);
    if (std::isnan(s)) continue;
    if (!best || s > best->ranking_score ||
        (s == best->ranking_score && rank.patterns[p] < rank.patterns[best->pattern_row]))
      best = PairPick{p, h, s, eval.score(p, h)};
  }
  if (!any_in_scope) throw Error("best_pattern: empty scope" + (roi ? " (ROI '" + *roi + "')" : std::string()));
  if (!best) throw Error("best_pattern: no pattern in scope has a score");
  return *best;
}

// ---------------------------------------------------------------------------
// Dedup and metrics

struct DedupItem {
  PatternId pattern;
  double score = 0.0;
  Vector component;
};

/// Highest score first (ties by PatternId); a pattern survives iff its
/// |Pearson r| with every kept pattern of the same ROI is <= threshold.
inline std::vector<PatternId> dedup_patterns(std::vector<DedupItem> items, double corr_threshold = 0.5) {
  std::sort(items.begin(), items.end(), [](const DedupItem& a, const DedupItem& b) {
    return a.score != b.score ? a.score > b.score : a.pattern < b.pattern;
  });
  std::vector<const DedupItem*> kept;
  std::vector<PatternId> out;
  for (const auto& it : items) {
    bool ok = true;
    for (const DedupItem* k : kept) {
      if (k->pattern.roi != it.pattern.roi) continue;
      if (std::abs(pearson_correlation(k->component, it.component)) > corr_threshold) {
        ok = false;
        break;
      }
    }
    if (ok) {
      kept.push_back(&it);
      out.push_back(it.pattern);
    }
  }
  return out;
}

/// Explained iff some pattern scores above threshold for h on the ranking
/// half and again on the evaluation half. Denominator: `hypotheses` when
/// given, else the whole dictionary.
inline double metric_interpretable_hypotheses(const RankingTable& rank, const EvaluationTable& eval, double threshold,
                                              const std::vector<std::size_t>* hypotheses = nullptr) {
  check_paired(rank, eval);
  std::vector<std::size_t> all;
  if (!hypotheses) {
    all.resize(rank.num_hypotheses);
    std::iota(all.begin(), all.end(), std::size_t{0});
    hypotheses = &all;
  }
  if (hypotheses->empty()) throw Error("metric_interpretable_hypotheses: empty dictionary");
  std::size_t explained = 0;
  for (std::size_t h : *hypotheses) {
    if (h >= rank.num_hypotheses) throw Error("metric_interpretable_hypotheses: hypothesis id out of range");
    for (std::size_t p = 0; p < rank.num_patterns(); ++p)
      if (rank.score(p, h) > threshold && eval.score(p, h) > threshold) {
        ++explained;
        break;
      }
  }
  return static_cast<double>(explained) / static_cast<double>(hypotheses->size());
}

struct PatternMetric {
  std::vector<PatternId> qualifying;
  std::vector<PatternId> survivors;

  std::size_t count() const { return survivors.size(); }
};

/// Patterns whose best ranking-half hypothesis clears the threshold on both
/// halves, deduplicated by evaluation score. `component` maps a PatternId to
/// its voxel loading vector.
template <class ComponentFn>
PatternMetric metric_interpretable_patterns(const RankingTable& rank, const EvaluationTable& eval, double threshold,
                                            ComponentFn&& component, double corr_threshold = 0.5) {
  check_paired(rank, eval);
  std::vector<DedupItem> items;
  PatternMetric out;
  for (std::size_t p = 0; p < rank.num_patterns(); ++p) {
    const auto best = best_hypothesis(rank, eval, p);
    if (!best || !(best->ranking_score > threshold) || !(best->evaluation_score > threshold)) continue;
    out.qualifying.push_back(rank.patterns[p]);
    items.push_back({rank.patterns[p], best->evaluation_score, component(rank.patterns[p])});
  }
  out.survivors = dedup_patterns(std::move(items), corr_threshold);
  return out;
}

/// Gain in explained hypotheses (percentage points) from pooling two groups
/// over the better one alone. The diagonal compares a group with the best of
/// its own single models (distinct fingerprints).
struct Complementarity {
  std::vector<std::string> groups;
  Matrix gain;  // percentage points
  std::vector<double> single;  // metric per group, as a fraction
};

inline Complementarity pairwise_complementarity(const RankingTable& rank, const EvaluationTable& eval,
                                                const std::vector<std::string>& methods, double threshold = 0.5,
                                                const std::vector<std::size_t>* hypotheses = nullptr) {
  check_paired(rank, eval);
  auto metric_of = [&](auto keep) {
    return metric_interpretable_hypotheses(rank.select(keep), eval.select(keep), threshold, hypotheses);
  };
  auto in = [](const std::string& m, const PatternId& id) { return to_string(id.method) == m; };
  Complementarity c;
  c.groups = methods;
  const auto n = static_cast<Eigen::Index>(methods.size());
  c.gain = Matrix::Zero(n, n);
  for (const auto& m : methods) c.single.push_back(metric_of([&](const PatternId& id) { return in(m, id); }));
  for (Eigen::Index a = 0; a < n; ++a) {
    const auto& ma = methods[static_cast<std::size_t>(a)];
    std::set<std::string> models;
    for (const auto& id : rank.patterns)
      if (in(ma, id)) models.insert(id.fingerprint);
    double best_single = 0.0;
    for (const auto& fp : models)
      best_single = std::max(best_single, metric_of([&](const PatternId& id) { return in(ma, id) && id.fingerprint == fp; }));
    c.gain(a, a) = 100.0 * (c.single[static_cast<std::size_t>(a)] - best_single);
    for (Eigen::Index b = a + 1; b < n; ++b) {
      const auto& mb = methods[static_cast<std::size_t>(b)];
      const double pooled = metric_of([&](const PatternId& id) { return in(ma, id) || in(mb, id); });
      const double g = 100.0 * (pooled - std::max(c.single[static_cast<std::size_t>(a)], c.single[static_cast<std::size_t>(b)]));
      c.gain(a, b) = g;
      c.gain(b, a) = g;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Persistence: one .bxmat per score matrix plus index.json.

template <Half H>
void save_score_table(const std::filesystem::path& dir, const ScoreTable<H>& t) {
  std::filesystem::create_directories(dir);
  json pats = json::array();
  for (const auto& p : t.patterns) pats.push_back(p.to_json());
  json pools = json::array();
  for (PoolKind k : t.pools) pools.push_back(to_string(k));
  const json index = {{"split", to_string(H)},
                      {"num_hypotheses", t.num_hypotheses},
                      {"pools", pools},
                      {"p0", t.p0},
                      {"patterns", pats}};
  detail::write_all(dir / "index.json", index.dump(1) + "\n");
  save_matrix(dir / "final.bxmat", t.final);
  for (PoolKind k : t.pools) {
    save_matrix(dir / ("raw_" + std::string(to_string(k)) + ".bxmat"), t.raw.at(k));
    save_matrix(dir / ("normalized_" + std::string(to_string(k)) + ".bxmat"), t.normalized.at(k));
  }
}

template <Half H>
ScoreTable<H> load_score_table(const std::filesystem::path& dir) {
  json index;
  try {
    index = json::parse(detail::read_all(dir / "index.json"));
  } catch (const json::exception& e) {
    throw FormatError((dir / "index.json").string() + ": " + e.what());
  }
  const auto split = index.at("split").get<std::string>();
  if (half_from_string(split) != H)
    throw Error("split discipline violation: " + dir.string() + " holds " + split + " scores, expected " +
                std::string(to_string(H)));
  ScoreTable<H> t;
  t.num_hypotheses = index.at("num_hypotheses").get<std::size_t>();
  t.p0 = index.at("p0").get<double>();
  for (const auto& p : index.at("pools")) t.pools.push_back(pool_kind_from_string(p.get<std::string>()));
  for (const auto& p : index.at("patterns")) t.patterns.push_back(PatternId::from_json(p));
  t.final = load_matrix(dir / "final.bxmat");
  for (PoolKind k : t.pools) {
    t.raw[k] = load_matrix(dir / ("raw_" + std::string(to_string(k)) + ".bxmat"));
    t.normalized[k] = load_matrix(dir / ("normalized_" + std::string(to_string(k)) + ".bxmat"));
  }
  if (static_cast<std::size_t>(t.final.rows()) != t.patterns.size() ||
      static_cast<std::size_t>(t.final.cols()) != t.num_hypotheses)
    throw FormatError(dir.string() + ": score matrix shape disagrees with index.json");
  return t;
}

}  // namespace brainexplore
