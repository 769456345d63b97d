#pragma once

// A synthetic world with known answers: concepts with voxel signatures inside
// one ROI each, labeled stimuli, noisy responses, and annotators that read
// the ground truth. Also the brute-force scorer used to cross-check the score
// module.

#include "brainexplore/annotators.hpp"
#include "brainexplore/decomposition.hpp"
#include "brainexplore/retrieve.hpp"
#include "brainexplore/rng.hpp"

#include <atomic>
#include <cstdio>
#include <set>
#include <unordered_map>

namespace brainexplore {

struct WorldSpec {
  std::uint64_t seed = 0;
  std::size_t total_voxels = 2000;
  std::size_t num_concepts = 20;
  std::size_t num_rois = 5;
  std::vector<double> prevalences;  // empty: evenly spread over [prevalence_min, prevalence_max]
  double prevalence_min = 0.03;
  double prevalence_max = 0.15;
  double amplitude = 40.0;
  double max_cosine = 0.1;
  std::size_t n_measured = 5000;
  std::size_t n_predicted = 20000;
  double noise_measured = 0.1;
  double noise_predicted = 0.05;
  std::size_t extra_embedding_dims = 32;
  double embedding_jitter = 0.0;
  double label_flip = 0.0;
  bool paraphrases = false;

  json to_json() const {
    return {{"seed", seed},
            {"total_voxels", total_voxels},
            {"num_concepts", num_concepts},
            {"num_rois", num_rois},
            {"prevalences", prevalences},
            {"prevalence_min", prevalence_min},
            {"prevalence_max", prevalence_max},
            {"amplitude", amplitude},
            {"max_cosine", max_cosine},
            {"n_measured", n_measured},
            {"n_predicted", n_predicted},
            {"noise_measured", noise_measured},
            {"noise_predicted", noise_predicted},
            {"extra_embedding_dims", extra_embedding_dims},
            {"embedding_jitter", embedding_jitter},
            {"label_flip", label_flip},
            {"paraphrases", paraphrases}};
  }

  static WorldSpec from_json(const json& j) {
    static const std::set<std::string> known = {
        "seed",        "total_voxels",    "num_concepts",         "num_rois",         "prevalences",
        "prevalence_min", "prevalence_max", "amplitude",          "max_cosine",       "n_measured",
        "n_predicted", "noise_measured",  "noise_predicted",      "extra_embedding_dims", "embedding_jitter",
        "label_flip",  "paraphrases"};
    if (!j.is_object()) throw ConfigError("world spec must be a JSON object");
    for (const auto& [k, v] : j.items())
      if (!known.count(k)) throw ConfigError("unknown world spec key '" + k + "'");
    WorldSpec s;
    try {
      s.seed = j.value("seed", s.seed);
      s.total_voxels = j.value("total_voxels", s.total_voxels);
      s.num_concepts = j.value("num_concepts", s.num_concepts);
      s.num_rois = j.value("num_rois", s.num_rois);
      s.prevalences = j.value("prevalences", s.prevalences);
      s.prevalence_min = j.value("prevalence_min", s.prevalence_min);
      s.prevalence_max = j.value("prevalence_max", s.prevalence_max);
      s.amplitude = j.value("amplitude", s.amplitude);
      s.max_cosine = j.value("max_cosine", s.max_cosine);
      s.n_measured = j.value("n_measured", s.n_measured);
      s.n_predicted = j.value("n_predicted", s.n_predicted);
      s.noise_measured = j.value("noise_measured", s.noise_measured);
      s.noise_predicted = j.value("noise_predicted", s.noise_predicted);
      s.extra_embedding_dims = j.value("extra_embedding_dims", s.extra_embedding_dims);
      s.embedding_jitter = j.value("embedding_jitter", s.embedding_jitter);
      s.label_flip = j.value("label_flip", s.label_flip);
      s.paraphrases = j.value("paraphrases", s.paraphrases);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("world spec: ") + e.what());
    }
    return s;
  }
};

struct Concept {
  std::size_t id = 0;
  std::string text;
  std::vector<std::string> paraphrases;
  std::string roi;
  double prevalence = 0.0;
};

struct StimulusSet {
  PoolKind kind = PoolKind::measured;
  std::vector<std::string> ids;
  std::vector<std::vector<std::uint32_t>> concepts;  // sorted concept ids per stimulus
};

struct ConceptWorld {
  WorldSpec spec;
  VoxelSpace space;
  std::vector<Concept> concepts;
  std::vector<std::string> distractors;
  Matrix signatures;  // C x V, unit rows, support inside one ROI
  StimulusSet measured;
  StimulusSet predicted;

  const StimulusSet& stimuli(PoolKind k) const { return k == PoolKind::measured ? measured : predicted; }

  /// Concept behind a canonical text or paraphrase.
  std::optional<std::size_t> concept_of(const std::string& text) const {
    auto it = text_index_.find(text);
    if (it == text_index_.end()) return std::nullopt;
    return it->second;
  }

  /// (pool, row) of a stimulus id.
  std::optional<std::pair<PoolKind, std::size_t>> locate(const std::string& id) const {
    auto it = id_index_.find(id);
    if (it == id_index_.end()) return std::nullopt;
    return it->second;
  }

  bool has_concept(PoolKind k, std::size_t row, std::size_t c) const {
    const auto& cs = stimuli(k).concepts[row];
    return std::binary_search(cs.begin(), cs.end(), static_cast<std::uint32_t>(c));
  }

  void build_indexes() {
    text_index_.clear();
    id_index_.clear();
    for (const auto& c : concepts) {
      text_index_[c.text] = c.id;
      for (const auto& p : c.paraphrases) text_index_[p] = c.id;
    }
    for (PoolKind k : kPoolKinds) {
      const auto& s = stimuli(k);
      for (std::size_t i = 0; i < s.ids.size(); ++i) id_index_[s.ids[i]] = {k, i};
    }
  }

  json to_json() const {
    json cs = json::array();
    for (const auto& c : concepts)
      cs.push_back({{"id", c.id}, {"text", c.text}, {"paraphrases", c.paraphrases}, {"roi", c.roi},
                    {"prevalence", c.prevalence}});
    json pools = json::object();
    for (PoolKind k : kPoolKinds) pools[std::string(to_string(k))] = {{"ids", stimuli(k).ids}, {"concepts", stimuli(k).concepts}};
    return {{"spec", spec.to_json()}, {"space", space.to_json()}, {"concepts", cs}, {"distractors", distractors},
            {"stimuli", pools}};
  }

 private:
  std::unordered_map<std::string, std::size_t> text_index_;
  std::unordered_map<std::string, std::pair<PoolKind, std::size_t>> id_index_;
};

namespace detail {

inline const std::vector<std::string>& concept_vocabulary() {
  static const std::vector<std::string> words = {
      "red bicycle",        "snowy mountain",    "dog on a leash",    "bowl of fruit",     "city street at night",
      "sailboat",           "person surfing",    "birthday cake",     "giraffe",           "stop sign",
      "kitchen counter",    "tennis racket",     "pizza slice",       "train platform",    "horse rider",
      "umbrella in rain",   "laptop on desk",    "flock of birds",    "bridge over river", "teddy bear",
      "clock tower",        "skateboarder",      "cat on a sofa",     "fire hydrant",      "airplane in sky",
      "beach umbrella",     "bunch of bananas",  "traffic light",     "elephant herd",     "park bench",
      "soccer ball",        "wooden boat",       "cup of coffee",     "zebra",             "motorcycle",
      "library shelves",    "pine forest",       "hot air balloon",   "wind turbine",      "bathroom sink",
      "pair of skis",       "baseball glove",    "double decker bus", "vase of flowers",   "sheep in a field",
      "television screen",  "frisbee",           "kite on the beach", "brick wall",        "desert road",
      "cow grazing",        "grilled sandwich",  "lighthouse",        "waterfall",         "crowded market",
      "toy train",          "mailbox",           "snowboarder",       "candlelit table",   "bookshelf",
      "hay bales",          "ferris wheel",      "street musician",   "stone staircase"};
  return words;
}

inline const std::vector<std::string>& distractor_vocabulary() {
  static const std::vector<std::string> words = {
      "abstract texture",  "blurry background", "muted colors",      "diagonal lines",  "empty corner",
      "soft shadows",      "grainy film",       "overexposed sky",   "symmetric layout", "cluttered scene",
      "low contrast",      "wide angle view",   "tilted horizon",    "pastel palette",  "repeating tiles",
      "rough surface",     "distant silhouette", "glossy reflection", "dim lighting",    "bright highlights",
      "vertical stripes",  "curved edges",      "scattered dots",    "faded print"};
  return words;
}

inline std::string numbered(const char* prefix, std::size_t i) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s %zu", prefix, i);
  return buf;
}

inline std::string stimulus_id(PoolKind k, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c-%06zu", k == PoolKind::measured ? 'm' : 'p', i);
  return buf;
}

inline constexpr std::uint64_t kSignatureStream = 0x5167;
inline constexpr std::uint64_t kLabelStream = 0x1abe1;
inline constexpr std::uint64_t kNoiseStream = 0x40153;
inline constexpr std::uint64_t kEmbedStream = 0xe3bed;
inline constexpr std::uint64_t kFlipStream = 0xf119;
inline constexpr std::uint64_t kHypothesisStream = 0x4b9;

}  // namespace detail

inline ConceptWorld gen_world(const WorldSpec& spec) {
  const std::size_t C = spec.num_concepts;
  const std::size_t V = spec.total_voxels;
  if (C < 1) throw ConfigError("gen_world: need at least one concept");
  if (spec.num_rois < 1 || spec.num_rois > V) throw ConfigError("gen_world: ROI count must lie in [1, V]");
  if (4 * C > V)
    throw ConfigError("gen_world: infeasible orthogonality request (C=" + std::to_string(C) +
                      " exceeds V/4 with V=" + std::to_string(V) + ")");
  if (!spec.prevalences.empty() && spec.prevalences.size() != C)
    throw ConfigError("gen_world: prevalences must list one value per concept");

  ConceptWorld w;
  w.spec = spec;

  // Contiguous, near-equal ROI blocks covering every voxel.
  VoxelSpace::RoiMap rois;
  std::vector<std::string> roi_names;
  for (std::size_t r = 0; r < spec.num_rois; ++r) {
    const std::size_t lo = r * V / spec.num_rois;
    const std::size_t hi = (r + 1) * V / spec.num_rois;
    char name[16];
    std::snprintf(name, sizeof name, "roi%zu", r);
    roi_names.push_back(name);
    auto& idx = rois[name];
    for (std::size_t v = lo; v < hi; ++v) idx.push_back(v);
  }
  w.space = VoxelSpace("synthetic-" + std::to_string(spec.seed), V, rois);

  const auto& vocab = detail::concept_vocabulary();
  for (std::size_t c = 0; c < C; ++c) {
    Concept k;
    k.id = c;
    k.text = c < vocab.size() ? vocab[c] : detail::numbered("concept", c);
    if (spec.paraphrases) k.paraphrases = {"a scene with " + k.text, k.text + " in view"};
    k.roi = roi_names[c % spec.num_rois];
    if (!spec.prevalences.empty())
      k.prevalence = spec.prevalences[c];
    else
      k.prevalence = C == 1 ? spec.prevalence_min
                            : spec.prevalence_min + (spec.prevalence_max - spec.prevalence_min) *
                                                        static_cast<double>(c) / static_cast<double>(C - 1);
    if (!(k.prevalence >= 0.0 && k.prevalence <= 1.0))
      throw ConfigError("gen_world: prevalence of concept " + std::to_string(c) + " outside [0, 1]");
    w.concepts.push_back(std::move(k));
  }
  const auto& dvocab = detail::distractor_vocabulary();
  for (std::size_t d = 0; d < std::max<std::size_t>(dvocab.size(), 3); ++d)
    w.distractors.push_back(d < dvocab.size() ? dvocab[d] : detail::numbered("motif", d));

  // Dense Gaussian signatures inside the ROI, redrawn until every pair within
  // the ROI is below the cosine bound.
  Rng sig_rng(mix_seed(spec.seed, detail::kSignatureStream));
  w.signatures = Matrix::Zero(static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(V));
  constexpr int kMaxDraws = 10000;
  for (std::size_t r = 0; r < spec.num_rois; ++r) {
    const std::size_t in_roi = C / spec.num_rois + (r < C % spec.num_rois ? 1 : 0);
    if (4 * in_roi > w.space.roi(roi_names[r]).size())
      throw ConfigError("gen_world: infeasible orthogonality request in " + roi_names[r]);
  }
  for (std::size_t c = 0; c < C; ++c) {
    const auto& idx = w.space.roi(w.concepts[c].roi);
    bool ok = false;
    for (int attempt = 0; attempt < kMaxDraws && !ok; ++attempt) {
      Vector s = Vector::Zero(static_cast<Eigen::Index>(V));
      for (std::size_t v : idx) s[static_cast<Eigen::Index>(v)] = sig_rng.normal();
      s.normalize();
      ok = true;
      for (std::size_t o = c % spec.num_rois; o < c && ok; o += spec.num_rois)
        ok = std::abs(s.dot(w.signatures.row(static_cast<Eigen::Index>(o)))) <= spec.max_cosine;
      if (ok) w.signatures.row(static_cast<Eigen::Index>(c)) = s.transpose();
    }
    if (!ok) throw ConfigError("gen_world: infeasible orthogonality request for concept " + std::to_string(c));
  }

  for (PoolKind k : kPoolKinds) {
    StimulusSet& s = k == PoolKind::measured ? w.measured : w.predicted;
    s.kind = k;
    const std::size_t n = k == PoolKind::measured ? spec.n_measured : spec.n_predicted;
    Rng rng(mix_seed(spec.seed, detail::kLabelStream + static_cast<std::uint64_t>(k)));
    s.ids.reserve(n);
    s.concepts.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      s.ids.push_back(detail::stimulus_id(k, i));
      for (std::size_t c = 0; c < C; ++c)
        if (rng.bernoulli(w.concepts[c].prevalence)) s.concepts[i].push_back(static_cast<std::uint32_t>(c));
    }
  }
  w.build_indexes();
  return w;
}

/// Responses for `rows` of a pool (all rows when empty). Noise is seeded per
/// stimulus, so any subset sees the same values. `sigma` overrides the
/// world's noise level for the pool.
inline ResponsePool gen_responses(const ConceptWorld& w, PoolKind kind, const std::vector<std::size_t>& rows = {},
                                  std::optional<double> sigma = std::nullopt) {
  const auto& s = w.stimuli(kind);
  const double sd = sigma.value_or(kind == PoolKind::measured ? w.spec.noise_measured : w.spec.noise_predicted);
  std::vector<std::size_t> pick = rows;
  if (pick.empty()) {
    pick.resize(s.ids.size());
    std::iota(pick.begin(), pick.end(), std::size_t{0});
  }
  const auto V = static_cast<Eigen::Index>(w.spec.total_voxels);
  Matrix x(static_cast<Eigen::Index>(pick.size()), V);
  std::vector<std::string> ids;
  ids.reserve(pick.size());
  Vector row(V);
  for (std::size_t i = 0; i < pick.size(); ++i) {
    const std::size_t r = pick[i];
    if (r >= s.ids.size()) throw Error("gen_responses: row " + std::to_string(r) + " out of range");
    Rng rng(mix_seed(mix_seed(w.spec.seed, detail::kNoiseStream), fnv1a(s.ids[r])));
    for (Eigen::Index v = 0; v < V; ++v) row[v] = sd * rng.normal();
    for (std::uint32_t c : s.concepts[r]) row += w.spec.amplitude * w.signatures.row(c).transpose();
    x.row(static_cast<Eigen::Index>(i)) = row.transpose();
    ids.push_back(s.ids[r]);
  }
  return ResponsePool(kind, std::move(ids), std::move(x));
}

// ---------------------------------------------------------------------------
// Oracle annotators

inline constexpr std::string_view kCaptionPrefix = "a scene featuring: ";
inline constexpr std::string_view kEmptyCaption = "a scene featuring: nothing in particular";

class OracleAnnotators : public AnnotatorSuite {
 public:
  explicit OracleAnnotators(const ConceptWorld& world) : w_(world) {
    dims_ = static_cast<Eigen::Index>(w_.concepts.size() + w_.spec.extra_embedding_dims);
  }

  std::string caption(const std::string& image_ref) override {
    const auto [kind, row] = locate(image_ref);
    const auto& cs = w_.stimuli(kind).concepts[row];
    if (cs.empty()) return std::string(kEmptyCaption);
    std::string out(kCaptionPrefix);
    for (std::size_t i = 0; i < cs.size(); ++i) out += (i ? ", " : "") + w_.concepts[cs[i]].text;
    return out;
  }

  /// Concepts named in at least half the captions, padded with distractors
  /// to three entries.
  std::vector<std::string> hypotheses(const std::vector<std::string>& captions) override {
    std::vector<std::size_t> counts(w_.concepts.size(), 0);
    std::string joined;
    for (const auto& cap : captions) {
      joined += cap;
      joined += '\n';
      if (cap.rfind(kCaptionPrefix, 0) != 0 || cap == kEmptyCaption) continue;
      std::string_view rest(cap);
      rest.remove_prefix(kCaptionPrefix.size());
      while (!rest.empty()) {
        const auto cut = rest.find(", ");
        const std::string part(rest.substr(0, cut));
        if (auto c = w_.concept_of(part)) ++counts[*c];
        if (cut == std::string_view::npos) break;
        rest.remove_prefix(cut + 2);
      }
    }
    const std::uint64_t h = mix_seed(mix_seed(w_.spec.seed, detail::kHypothesisStream), fnv1a(joined));
    std::vector<std::string> out;
    for (std::size_t c = 0; c < counts.size(); ++c) {
      if (captions.empty() || 2 * counts[c] < captions.size()) continue;
      const auto& k = w_.concepts[c];
      const std::size_t variant = k.paraphrases.empty() ? 0 : mix_seed(h, c) % (k.paraphrases.size() + 1);
      out.push_back(variant == 0 ? k.text : k.paraphrases[variant - 1]);
    }
    Rng rng(h);
    while (out.size() < 3) {
      const auto& d = w_.distractors[rng.below(w_.distractors.size())];
      if (std::find(out.begin(), out.end(), d) == out.end()) out.push_back(d);
    }
    return out;
  }

  bool label(const std::string& image_ref, const std::string& hypothesis, LabelVariant variant) override {
    ++label_calls_;
    const auto [kind, row] = locate(image_ref);
    const auto c = w_.concept_of(hypothesis);
    bool truth = c && w_.has_concept(kind, row, *c);
    if (w_.spec.label_flip > 0.0) {
      const std::uint64_t s = mix_seed(mix_seed(mix_seed(w_.spec.seed, detail::kFlipStream), fnv1a(image_ref)),
                                       mix_seed(fnv1a(hypothesis), static_cast<std::uint64_t>(variant)));
      if (Rng(s).bernoulli(w_.spec.label_flip)) truth = !truth;
    }
    return truth;
  }

  /// Concept texts (and paraphrases) map to their indicator; anything else
  /// to a seeded direction in the extra dimensions.
  Vector embed_text(const std::string& text) override {
    Vector e = Vector::Zero(dims_);
    if (auto c = w_.concept_of(text)) {
      e[static_cast<Eigen::Index>(*c)] = 1.0;
      return e;
    }
    return hashed_extra(text);
  }

  Vector embed_image(const std::string& image_ref) override {
    const auto [kind, row] = locate(image_ref);
    const auto& cs = w_.stimuli(kind).concepts[row];
    Vector e = cs.empty() ? hashed_extra(image_ref) : Vector::Zero(dims_);
    for (std::uint32_t c : cs) e[c] = 1.0;
    e.normalize();
    if (w_.spec.embedding_jitter > 0.0) {
      Rng rng(mix_seed(mix_seed(w_.spec.seed, detail::kEmbedStream), fnv1a(image_ref)));
      for (Eigen::Index i = 0; i < dims_; ++i) e[i] += w_.spec.embedding_jitter * rng.normal();
    }
    return l2_normalized(e);
  }

  std::size_t label_calls() const { return label_calls_; }

 private:
  std::pair<PoolKind, std::size_t> locate(const std::string& image_ref) const {
    auto loc = w_.locate(image_ref);
    if (!loc) throw BackendError("oracle: unknown image '" + image_ref + "'");
    return *loc;
  }

  Vector hashed_extra(const std::string& key) const {
    Vector e = Vector::Zero(dims_);
    const auto extra = static_cast<Eigen::Index>(w_.spec.extra_embedding_dims);
    Rng rng(mix_seed(mix_seed(w_.spec.seed, detail::kEmbedStream + 1), fnv1a(key)));
    if (extra == 0) {
      for (Eigen::Index i = 0; i < dims_; ++i) e[i] = rng.normal();
    } else {
      for (Eigen::Index i = dims_ - extra; i < dims_; ++i) e[i] = rng.normal();
    }
    return l2_normalized(e);
  }

  const ConceptWorld& w_;
  Eigen::Index dims_ = 0;
  std::atomic<std::size_t> label_calls_{0};
};

// ---------------------------------------------------------------------------
// Brute-force scoring straight from the ground truth, for tests only.

struct BruteForceConfig {
  double top_fraction = 0.002;
  double p0 = 0.05;
  std::vector<PoolKind> pools{PoolKind::measured, PoolKind::predicted};
};

struct BruteForcePick {
  PatternId pattern;
  double ranking_score = 0.0;
  double evaluation_score = 0.0;
};

/// Every score of every pattern in `decomps` against concept `c`, recomputed
/// by full sort and set intersection. Missing values are NaN.
struct BruteForceScores {
  std::vector<PatternId> patterns;
  std::vector<double> ranking;
  std::vector<double> evaluation;
};

inline BruteForceScores brute_force_scores(const ConceptWorld& w, const std::map<PoolKind, ResponsePool>& pools,
                                           std::span<const Decomposition> decomps, std::size_t c,
                                           const SplitAssignment& split, const BruteForceConfig& cfg) {
  if (decomps.empty()) throw Error("brute_force: empty decomposition set");
  if (c >= w.concepts.size()) throw Error("brute_force: unknown concept");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  BruteForceScores out;
  for (const auto& d : decomps) {
    std::map<PoolKind, Matrix> coeff;
    for (PoolKind k : cfg.pools)
      coeff[k] = project_coefficients(d, restrict_to_roi(pools.at(k), w.space, d.roi), k);
    for (std::size_t p = 0; p < d.num_patterns(); ++p) {
      out.patterns.push_back(d.pattern_id(p));
      for (Half half : {Half::ranking, Half::evaluation}) {
        double sum = 0.0;
        int present = 0;
        for (PoolKind k : cfg.pools) {
          const auto& ids = pools.at(k).stimulus_ids();
          const auto& rows = split.pool(k).rows(half);
          std::vector<std::pair<double, std::string>> ranked;
          for (std::size_t r : rows) ranked.emplace_back(coeff[k](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(p)), ids[r]);
          std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
            return a.first != b.first ? a.first > b.first : a.second < b.second;
          });
          const double floor_sae = 0.01;
          std::erase_if(ranked, [&](const auto& e) { return d.method == Method::sae ? e.first < floor_sae : e.first <= 0.0; });
          const auto want = std::max<long long>(1, std::llround(cfg.top_fraction * static_cast<double>(rows.size())));
          if (ranked.size() > static_cast<std::size_t>(want)) ranked.resize(static_cast<std::size_t>(want));
          if (ranked.empty()) continue;
          std::set<std::string> positives;
          for (std::size_t r = 0; r < ids.size(); ++r)
            if (w.has_concept(k, r, c)) positives.insert(ids[r]);
          std::set<std::string> top;
          for (const auto& e : ranked) top.insert(e.second);
          std::vector<std::string> both;
          std::set_intersection(top.begin(), top.end(), positives.begin(), positives.end(), std::back_inserter(both));
          const double raw = static_cast<double>(both.size()) / static_cast<double>(top.size());
          const double freq = static_cast<double>(positives.size()) / static_cast<double>(ids.size());
          const double factor = freq == 0.0 ? 2.0 : std::min(2.0, std::max(1.0, cfg.p0 / freq));
          sum += std::min(1.0, raw * factor);
          ++present;
        }
        (half == Half::ranking ? out.ranking : out.evaluation).push_back(present ? sum / present : nan);
      }
    }
  }
  return out;
}

/// Pattern with the highest ranking-half score for concept `c` (ties to the
/// lower PatternId), optionally within one ROI, with its evaluation score.
inline BruteForcePick brute_force_best_pattern(const ConceptWorld& w, const std::map<PoolKind, ResponsePool>& pools,
                                               std::span<const Decomposition> decomps, std::size_t c,
                                               const SplitAssignment& split, const BruteForceConfig& cfg,
                                               const std::optional<std::string>& roi = std::nullopt) {
  const auto all = brute_force_scores(w, pools, decomps, c, split, cfg);
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < all.patterns.size(); ++i) {
    if (roi && all.patterns[i].roi != *roi) continue;
    if (std::isnan(all.ranking[i])) continue;
    if (!best || all.ranking[i] > all.ranking[*best] ||
        (all.ranking[i] == all.ranking[*best] && all.patterns[i] < all.patterns[*best]))
      best = i;
  }
  if (!best) throw Error("brute_force_best_pattern: no scored pattern in scope");
  return {all.patterns[*best], all.ranking[*best], all.evaluation[*best]};
}

}  // namespace brainexplore
