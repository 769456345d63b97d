#pragma once

// Run manifest and the in-memory pipeline: data, decompose, retrieve,
// dictionary, labels, scores. The CLI persists each step; tests and sweeps
// call these directly.

#include "brainexplore/decompose.hpp"
#include "brainexplore/explain.hpp"
#include "brainexplore/label.hpp"
#include "brainexplore/parallel.hpp"
#include "brainexplore/retrieve.hpp"
#include "brainexplore/score.hpp"
#include "brainexplore/synth.hpp"

#include <filesystem>
#include <memory>

namespace brainexplore {

// ---------------------------------------------------------------------------
// Manifest

struct MethodSpec {
  Method method = Method::ica;
  json params = json::object();
};

struct MatrixSource {
  std::filesystem::path responses;  // .bxmat, N x total_voxels
  std::filesystem::path ids;        // JSON array of stimulus ids
};

struct RunManifest {
  std::filesystem::path base_dir = ".";
  std::filesystem::path output_dir = "out";

  std::optional<WorldSpec> synth;
  std::filesystem::path space_path;
  std::map<PoolKind, MatrixSource> matrices;

  InputNormalization normalize = InputNormalization::zscore_per_voxel;
  bool train_on_predicted = true;
  std::vector<std::string> rois;  // empty: every ROI
  std::vector<MethodSpec> methods;

  double top_fraction = 0.002;
  std::vector<PoolKind> retrieval_pools{PoolKind::measured, PoolKind::predicted};
  std::size_t explain_measured = kExplainMeasured;
  std::size_t explain_predicted = kExplainPredicted;
  std::size_t candidates_per_group = 40;

  std::string backend = "oracle";
  HttpConfig http;
  std::filesystem::path prompts_dir;
  int client_retries = 2;

  double merge_threshold = 0.9;
  std::size_t shortlist_k = kDefaultShortlist;
  std::vector<std::string> templates{"{}"};

  double p0 = kDefaultP0;
  std::vector<double> thresholds{0.5, 0.8};
  std::string scope = "all";
  double dedup_threshold = 0.5;

  std::uint64_t split_seed = 0;
  std::size_t workers = 1;

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
  }
  std::filesystem::path out() const { return resolve(output_dir); }

  static RunManifest from_json(const json& j, const std::filesystem::path& base_dir = ".");
  static RunManifest load(const std::filesystem::path& path);
  json to_json() const;
  /// SHA-256 of the canonical manifest, excluding settings that cannot
  /// change any output (output location, worker count).
  std::string hash() const;
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

inline void check_method_params(const MethodSpec& m) {
  const std::string where = "method '" + std::string(to_string(m.method)) + "'";
  switch (m.method) {
    case Method::voxels: check_keys(m.params, {}, where); break;
    case Method::pca: check_keys(m.params, {"variance_thresholds"}, where); break;
    case Method::ica: check_keys(m.params, {"variance_thresholds", "k", "seeds", "max_iter", "tol"}, where); break;
    case Method::nmf: check_keys(m.params, {"variance_thresholds", "k", "seeds", "max_iter", "tol"}, where); break;
    case Method::sae:
      check_keys(m.params,
                 {"expansion_factors", "sparsities", "seeds", "epochs", "learning_rate", "batch_size", "max_heldout"},
                 where);
      break;
  }
  if ((m.method == Method::ica || m.method == Method::nmf) && m.params.contains("k") &&
      m.params.contains("variance_thresholds"))
    throw ConfigError(where + ": give either 'k' or 'variance_thresholds', not both");
  for (const char* key : {"variance_thresholds"})
    if (m.params.contains(key))
      for (double t : m.params[key].get<std::vector<double>>())
        if (!(t > 0.0 && t <= 1.0)) throw ConfigError(where + ": variance threshold must lie in (0, 1]");
}

}  // namespace detail

inline RunManifest RunManifest::from_json(const json& j, const std::filesystem::path& base_dir) {
  RunManifest m;
  m.base_dir = base_dir;
  try {
    detail::check_keys(j,
                       {"output_dir", "data", "normalize_input", "train_on_predicted", "rois", "methods", "retrieval",
                        "annotator", "dictionary", "label", "score", "split_seed", "workers"},
                       "manifest");
    m.output_dir = j.value("output_dir", std::string("out"));
    const json& data = j.at("data");
    detail::check_keys(data, {"synth", "space", "measured", "predicted"}, "data");
    if (data.contains("synth")) {
      if (data.contains("measured")) throw ConfigError("data: give either 'synth' or matrix sources, not both");
      m.synth = WorldSpec::from_json(data["synth"]);
    } else {
      m.space_path = data.at("space").get<std::string>();
      for (PoolKind k : kPoolKinds) {
        const std::string name(to_string(k));
        if (!data.contains(name)) continue;
        detail::check_keys(data[name], {"responses", "ids"}, "data." + name);
        m.matrices[k] = {data[name].at("responses").get<std::string>(), data[name].at("ids").get<std::string>()};
      }
      if (!m.matrices.count(PoolKind::measured)) throw ConfigError("data: a measured pool is required");
    }
    m.normalize = input_normalization_from_string(j.value("normalize_input", std::string("zscore_per_voxel")));
    m.train_on_predicted = j.value("train_on_predicted", true);
    m.rois = j.value("rois", std::vector<std::string>{});
    if (!j.contains("methods") || !j["methods"].is_array() || j["methods"].empty())
      throw ConfigError("manifest needs a nonempty 'methods' list");
    for (const auto& mj : j["methods"]) {
      MethodSpec ms;
      ms.method = method_from_string(mj.at("method").get<std::string>());
      ms.params = mj;
      ms.params.erase("method");
      detail::check_method_params(ms);
      m.methods.push_back(std::move(ms));
    }
    if (j.contains("retrieval")) {
      const json& r = j["retrieval"];
      detail::check_keys(r, {"top_fraction", "pools", "explain_measured", "explain_predicted", "candidates_per_group"},
                         "retrieval");
      m.top_fraction = r.value("top_fraction", m.top_fraction);
      if (r.contains("pools")) {
        m.retrieval_pools.clear();
        for (const auto& p : r["pools"]) m.retrieval_pools.push_back(pool_kind_from_string(p.get<std::string>()));
      }
      m.explain_measured = r.value("explain_measured", m.explain_measured);
      m.explain_predicted = r.value("explain_predicted", m.explain_predicted);
      m.candidates_per_group = r.value("candidates_per_group", m.candidates_per_group);
    }
    if (!(m.top_fraction > 0.0 && m.top_fraction <= 1.0)) throw ConfigError("retrieval.top_fraction must lie in (0, 1]");
    if (m.retrieval_pools.empty()) throw ConfigError("retrieval.pools must name at least one pool");
    std::sort(m.retrieval_pools.begin(), m.retrieval_pools.end());
    m.retrieval_pools.erase(std::unique(m.retrieval_pools.begin(), m.retrieval_pools.end()), m.retrieval_pools.end());
    if (j.contains("annotator")) {
      const json& a = j["annotator"];
      detail::check_keys(a,
                         {"backend", "base_url", "cache", "timeout_seconds", "retries", "offline", "max_in_flight",
                          "prompts_dir"},
                         "annotator");
      m.backend = a.value("backend", m.backend);
      m.http.base_url = a.value("base_url", std::string());
      m.http.cache_path = a.value("cache", std::string());
      m.http.timeout_seconds = a.value("timeout_seconds", m.http.timeout_seconds);
      m.http.retries = a.value("retries", m.http.retries);
      m.http.offline = a.value("offline", m.http.offline);
      m.http.max_in_flight = a.value("max_in_flight", m.http.max_in_flight);
      m.prompts_dir = a.value("prompts_dir", std::string());
      m.client_retries = m.http.retries;
    }
    if (m.backend != "oracle" && m.backend != "http") throw ConfigError("annotator.backend must be 'oracle' or 'http'");
    if (m.backend == "oracle" && !m.synth) throw ConfigError("the oracle annotator needs a synthetic world");
    if (j.contains("dictionary")) {
      detail::check_keys(j["dictionary"], {"merge_threshold"}, "dictionary");
      m.merge_threshold = j["dictionary"].value("merge_threshold", m.merge_threshold);
    }
    if (j.contains("label")) {
      detail::check_keys(j["label"], {"shortlist_k", "templates"}, "label");
      m.shortlist_k = j["label"].value("shortlist_k", m.shortlist_k);
      m.templates = j["label"].value("templates", m.templates);
    }
    for (const auto& t : m.templates) (void)apply_template(t, "x");
    if (m.shortlist_k < 1) throw ConfigError("label.shortlist_k must be at least 1");
    if (j.contains("score")) {
      detail::check_keys(j["score"], {"p0", "thresholds", "scope", "dedup_threshold"}, "score");
      m.p0 = j["score"].value("p0", m.p0);
      m.thresholds = j["score"].value("thresholds", m.thresholds);
      m.scope = j["score"].value("scope", m.scope);
      m.dedup_threshold = j["score"].value("dedup_threshold", m.dedup_threshold);
    }
    if (!(m.p0 > 0.0 && m.p0 <= 1.0)) throw ConfigError("score.p0 must lie in (0, 1]");
    if (m.thresholds.empty()) throw ConfigError("score.thresholds must not be empty");
    if (m.scope != "roi" && m.scope != "all") throw ConfigError("score.scope must be 'roi' or 'all'");
    m.split_seed = j.value("split_seed", m.split_seed);
    m.workers = j.value("workers", m.workers);
    if (m.workers < 1) throw ConfigError("workers must be at least 1");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  return m;
}

inline RunManifest RunManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto base = path.parent_path();
  return from_json(j, base.empty() ? std::filesystem::path(".") : base);
}

inline json RunManifest::to_json() const {
  json data = json::object();
  if (synth) {
    data["synth"] = synth->to_json();
  } else {
    data["space"] = space_path.string();
    for (const auto& [k, s] : matrices)
      data[std::string(to_string(k))] = {{"responses", s.responses.string()}, {"ids", s.ids.string()}};
  }
  json methods_j = json::array();
  for (const auto& ms : methods) {
    json e = ms.params;
    e["method"] = to_string(ms.method);
    methods_j.push_back(e);
  }
  json pools = json::array();
  for (PoolKind k : retrieval_pools) pools.push_back(to_string(k));
  return {{"output_dir", output_dir.string()},
          {"data", data},
          {"normalize_input", to_string(normalize)},
          {"train_on_predicted", train_on_predicted},
          {"rois", rois},
          {"methods", methods_j},
          {"retrieval",
           {{"top_fraction", top_fraction},
            {"pools", pools},
            {"explain_measured", explain_measured},
            {"explain_predicted", explain_predicted},
            {"candidates_per_group", candidates_per_group}}},
          {"annotator",
           {{"backend", backend},
            {"base_url", http.base_url},
            {"cache", http.cache_path.string()},
            {"timeout_seconds", http.timeout_seconds},
            {"retries", http.retries},
            {"offline", http.offline},
            {"max_in_flight", http.max_in_flight},
            {"prompts_dir", prompts_dir.string()}}},
          {"dictionary", {{"merge_threshold", merge_threshold}}},
          {"label", {{"shortlist_k", shortlist_k}, {"templates", templates}}},
          {"score", {{"p0", p0}, {"thresholds", thresholds}, {"scope", scope}, {"dedup_threshold", dedup_threshold}}},
          {"split_seed", split_seed},
          {"workers", workers}};
}

inline std::string RunManifest::hash() const {
  json j = to_json();
  j.erase("output_dir");
  j.erase("workers");
  return sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Data

struct PipelineData {
  VoxelSpace space;
  std::map<PoolKind, ResponsePool> pools;
  std::shared_ptr<const ConceptWorld> world;  // synthetic runs only

  const ResponsePool& pool(PoolKind k) const {
    auto it = pools.find(k);
    if (it == pools.end()) throw MissingArtifactError("no " + std::string(to_string(k)) + " pool in the data");
    return it->second;
  }
};

inline PipelineData synth_data(const WorldSpec& spec) {
  PipelineData d;
  auto world = std::make_shared<ConceptWorld>(gen_world(spec));
  d.space = world->space;
  d.pools.emplace(PoolKind::measured, gen_responses(*world, PoolKind::measured));
  if (spec.n_predicted > 0) d.pools.emplace(PoolKind::predicted, gen_responses(*world, PoolKind::predicted));
  d.world = std::move(world);
  return d;
}

inline ResponsePool load_pool(PoolKind kind, const std::filesystem::path& responses, const std::filesystem::path& ids) {
  json j;
  try {
    j = json::parse(detail::read_all(ids));
  } catch (const json::exception& e) {
    throw FormatError(ids.string() + ": " + e.what());
  }
  return ResponsePool(kind, j.get<std::vector<std::string>>(), load_matrix(responses));
}

inline PipelineData load_matrix_data(const RunManifest& m) {
  PipelineData d;
  json space;
  try {
    space = json::parse(detail::read_all(m.resolve(m.space_path)));
  } catch (const json::exception& e) {
    throw FormatError(m.resolve(m.space_path).string() + ": " + e.what());
  }
  d.space = VoxelSpace::from_json(space);
  for (const auto& [k, src] : m.matrices) d.pools.emplace(k, load_pool(k, m.resolve(src.responses), m.resolve(src.ids)));
  return d;
}

inline std::vector<std::string> selected_rois(const RunManifest& m, const VoxelSpace& space) {
  if (m.rois.empty()) return space.roi_names();
  for (const auto& r : m.rois) (void)space.roi(r);
  auto out = m.rois;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Decompose

inline std::vector<Decomposition> decompose_all(const RunManifest& m, const PipelineData& data) {
  const bool have_pred = data.pools.count(PoolKind::predicted) > 0;
  const auto rois = selected_rois(m, data.space);

  struct RoiInput {
    std::string roi;
    Normalization norm;
    Matrix measured;   // normalized
    Matrix predicted;  // normalized, may be empty
    std::vector<std::size_t> matched_cache_k;
  };
  std::vector<RoiInput> inputs(rois.size());
  for (std::size_t i = 0; i < rois.size(); ++i) {
    auto& in = inputs[i];
    in.roi = rois[i];
    const Matrix raw = restrict_to_roi(data.pool(PoolKind::measured), data.space, in.roi);
    in.norm = compute_normalization(raw, m.normalize);
    in.measured = in.norm.apply(raw);
    if (have_pred && m.train_on_predicted)
      in.predicted = in.norm.apply(restrict_to_roi(data.pool(PoolKind::predicted), data.space, in.roi));
  }

  // One job per (roi, method entry, grid point); each fills its own slot.
  using Job = std::function<std::vector<Decomposition>()>;
  std::vector<Job> jobs;
  for (auto& in : inputs) {
    const FitContext ctx{in.roi, in.norm, {PoolKind::measured}};
    for (const auto& ms : m.methods) {
      const json& p = ms.params;
      auto seeds = p.value("seeds", std::vector<std::uint64_t>{0});
      auto ks = [&]() -> std::vector<std::size_t> {
        if (p.contains("k")) return p["k"].get<std::vector<std::size_t>>();
        const auto thr = p.value("variance_thresholds", std::vector<double>{0.98});
        auto k = variance_matched_k(in.measured, thr);
        std::sort(k.begin(), k.end());
        k.erase(std::unique(k.begin(), k.end()), k.end());
        return k;
      };
      switch (ms.method) {
        case Method::voxels:
          jobs.push_back([&in, ctx] { return std::vector<Decomposition>{fit_voxels(in.measured.cols(), ctx)}; });
          break;
        case Method::pca: {
          const auto thr = p.value("variance_thresholds", std::vector<double>{0.98});
          jobs.push_back([&in, ctx, thr] { return fit_pca(in.measured, thr, ctx).decompositions; });
          break;
        }
        case Method::ica: {
          IcaConfig cfg;
          cfg.max_iter = p.value("max_iter", cfg.max_iter);
          cfg.tol = p.value("tol", cfg.tol);
          for (std::size_t k : ks())
            for (auto seed : seeds)
              jobs.push_back([&in, ctx, cfg, k, seed] {
                return std::vector<Decomposition>{fit_ica(in.measured, k, seed, ctx, cfg).decomposition};
              });
          break;
        }
        case Method::nmf: {
          NmfConfig cfg;
          cfg.max_iter = p.value("max_iter", cfg.max_iter);
          cfg.tol = p.value("tol", cfg.tol);
          for (std::size_t k : ks())
            for (auto seed : seeds)
              jobs.push_back([&in, ctx, cfg, k, seed] {
                return std::vector<Decomposition>{fit_nmf(in.measured, k, seed, ctx, cfg).decomposition};
              });
          break;
        }
        case Method::sae: {
          SaeConfig base;
          base.epochs = p.value("epochs", base.epochs);
          base.learning_rate = p.value("learning_rate", base.learning_rate);
          base.batch_size = p.value("batch_size", base.batch_size);
          base.max_heldout = p.value("max_heldout", base.max_heldout);
          FitContext sctx = ctx;
          if (in.predicted.rows() > 0) sctx.provenance = {PoolKind::measured, PoolKind::predicted};
          for (double ef : p.value("expansion_factors", std::vector<double>{4.0}))
            for (double lambda : p.value("sparsities", std::vector<double>{4.0}))
              for (auto seed : seeds) {
                SaeConfig cfg = base;
                cfg.expansion_factor = ef;
                cfg.sparsity = lambda;
                cfg.seed = seed;
                jobs.push_back([&in, sctx, cfg] {
                  return std::vector<Decomposition>{fit_sae(in.measured, in.predicted, cfg, sctx).decomposition};
                });
              }
          break;
        }
      }
    }
  }
  std::vector<std::vector<Decomposition>> slots(jobs.size());
  parallel_for(jobs.size(), m.workers, [&](std::size_t i) { slots[i] = jobs[i](); });
  std::vector<Decomposition> out;
  for (auto& s : slots)
    for (auto& d : s) out.push_back(std::move(d));
  std::set<std::string> seen;
  for (const auto& d : out)
    if (!seen.insert(std::string(to_string(d.method)) + "/" + d.roi + "/" + d.fingerprint()).second)
      throw ConfigError("method grid produces the same model twice: " + std::string(to_string(d.method)) + "/" +
                        d.roi + "/" + d.fingerprint());
  return out;
}

// ---------------------------------------------------------------------------
// Retrieve

struct PatternRecord {
  PatternId id;
  std::size_t decomposition = 0;
  std::size_t row = 0;
  std::map<Half, PoolTopSets> tops;     // scoring sets per split half
  std::map<PoolKind, TopSet> explain;   // explanation images, ranking half only
};

struct Retrieval {
  SplitAssignment split;
  std::vector<PoolKind> pools;
  std::vector<PatternRecord> patterns;
};

inline SplitAssignment make_split(const PipelineData& data, std::uint64_t seed) {
  std::map<PoolKind, std::size_t> sizes;
  for (const auto& [k, p] : data.pools) sizes[k] = p.size();
  return split_pools(sizes, seed);
}

inline Retrieval retrieve_all(const RunManifest& m, const PipelineData& data, const std::vector<Decomposition>& decomps) {
  Retrieval r;
  r.split = make_split(data, m.split_seed);
  r.pools = m.retrieval_pools;
  for (PoolKind k : r.pools) (void)data.pool(k);
  const TopRequest req = TopRequest::of_fraction(m.top_fraction);

  std::vector<std::vector<PatternRecord>> slots(decomps.size());
  // ROI restriction is shared by every decomposition of a ROI; do it once.
  std::map<std::pair<std::string, PoolKind>, Matrix> restricted;
  for (const auto& d : decomps)
    for (PoolKind k : r.pools)
      if (!restricted.count({d.roi, k})) restricted[{d.roi, k}] = restrict_to_roi(data.pool(k), data.space, d.roi);

  parallel_for(decomps.size(), m.workers, [&](std::size_t di) {
    const Decomposition& d = decomps[di];
    auto& recs = slots[di];
    recs.resize(d.num_patterns());
    for (std::size_t p = 0; p < d.num_patterns(); ++p) {
      recs[p].id = d.pattern_id(p);
      recs[p].decomposition = di;
      recs[p].row = p;
    }
    for (PoolKind k : r.pools) {
      const Matrix coeff = project_coefficients(d, restricted.at({d.roi, k}), k);
      const auto& ids = data.pool(k).stimulus_ids();
      const auto& ps = r.split.pool(k);
      const std::size_t n_explain = k == PoolKind::measured ? m.explain_measured : m.explain_predicted;
      for (std::size_t p = 0; p < d.num_patterns(); ++p) {
        const auto col = coeff.col(static_cast<Eigen::Index>(p));
        for (Half h : {Half::ranking, Half::evaluation}) {
          TopSet t = top_activating(col, ids, req, d.method, &ps.rows(h));
          t.pattern = recs[p].id;
          t.pool = k;
          t.half = h;
          recs[p].tops[h][k] = std::move(t);
        }
        if (n_explain > 0) {
          TopSet e = top_activating(col, ids, TopRequest::of_count(n_explain), d.method, &ps.ranking);
          e.pattern = recs[p].id;
          e.pool = k;
          e.half = Half::ranking;
          recs[p].explain[k] = std::move(e);
        }
      }
    }
  });
  for (auto& s : slots)
    for (auto& rec : s) r.patterns.push_back(std::move(rec));
  return r;
}

// ---------------------------------------------------------------------------
// Dictionary (consistency triage, explain, merge)

struct DictionaryStage {
  std::vector<ScoredPattern> consistency;
  std::vector<PatternId> candidates;
  ExplainResult explain;
  HypothesisDictionary dictionary;
};

inline ExplanationSet explanation_for(const RunManifest& m, const PatternRecord& rec) {
  static const TopSet none;
  auto get = [&](PoolKind k) -> const TopSet& {
    auto it = rec.explain.find(k);
    return it == rec.explain.end() ? none : it->second;
  };
  return explanation_image_set(get(PoolKind::measured), get(PoolKind::predicted), m.explain_measured,
                               m.explain_predicted);
}

inline DictionaryStage dictionary_stage(const RunManifest& m, const Retrieval& r, AnnotatorSuite& suite) {
  DictionaryStage out;
  std::vector<std::optional<ExplanationSet>> sets(r.patterns.size());
  std::set<std::string> needed;
  for (std::size_t i = 0; i < r.patterns.size(); ++i) {
    const auto& rec = r.patterns[i];
    bool any = false;
    for (const auto& [k, t] : rec.explain) any = any || !t.empty();
    if (!any) continue;
    sets[i] = explanation_for(m, rec);
    if (sets[i]->images.size() < 2) {
      sets[i].reset();
      continue;
    }
    for (const auto& img : sets[i]->images) needed.insert(img.id);
  }
  const std::vector<std::string> ids(needed.begin(), needed.end());
  std::vector<Vector> emb(ids.size());
  parallel_for(ids.size(), std::min(m.workers, suite.max_in_flight()), [&](std::size_t i) {
    emb[i] = l2_normalized(with_retries(m.client_retries, [&] { return suite.embed_image(ids[i]); }));
  });
  std::unordered_map<std::string, const Vector*> by_id;
  for (std::size_t i = 0; i < ids.size(); ++i) by_id[ids[i]] = &emb[i];

  std::map<PatternId, const ExplanationSet*> set_of;
  for (std::size_t i = 0; i < r.patterns.size(); ++i) {
    if (!sets[i]) continue;
    std::vector<Vector> es;
    for (const auto& img : sets[i]->images) es.push_back(*by_id.at(img.id));
    out.consistency.push_back({r.patterns[i].id, consistency_score(es)});
    set_of[r.patterns[i].id] = &*sets[i];
  }
  out.candidates = select_candidates(out.consistency, m.candidates_per_group);
  std::vector<Candidate> cands;
  for (const auto& id : out.candidates) cands.push_back({id, set_of.at(id)->images});
  out.explain = run_explain_stage(cands, suite, m.workers, m.client_retries);
  if (out.explain.pool.empty()) throw BackendError("explain stage produced no hypotheses");
  out.dictionary = build_dictionary(out.explain.texts(), suite, m.merge_threshold, m.client_retries);
  return out;
}

// ---------------------------------------------------------------------------
// Labels

inline PoolLabels label_all(const RunManifest& m, const PipelineData& data, const HypothesisDictionary& dict,
                            AnnotatorSuite& suite, std::vector<std::string>* log = nullptr) {
  PoolLabels out;
  LabelConfig cfg;
  cfg.shortlist_k = m.shortlist_k;
  cfg.templates = m.templates;
  cfg.workers = m.workers;
  cfg.retries = m.client_retries;
  for (PoolKind k : m.retrieval_pools) {
    auto b = build_label_matrix(data.pool(k).stimulus_ids(), k, dict, suite, cfg);
    if (log)
      for (auto& l : b.log) log->push_back(std::string(to_string(k)) + ": " + l);
    out.emplace(k, std::move(b.matrix));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scores and metrics

struct ScoreStage {
  RankingTable ranking;
  EvaluationTable evaluation;
};

inline ScoreStage score_all(const RunManifest& m, const Retrieval& r, const PoolLabels& labels,
                            const HypothesisDictionary& dict) {
  std::vector<PatternTops> rank_tops, eval_tops;
  rank_tops.reserve(r.patterns.size());
  eval_tops.reserve(r.patterns.size());
  for (const auto& rec : r.patterns) {
    rank_tops.push_back({rec.id, rec.tops.at(Half::ranking)});
    eval_tops.push_back({rec.id, rec.tops.at(Half::evaluation)});
  }
  for (PoolKind k : r.pools)
    if (labels.at(k).dictionary_hash != dict.hash())
      throw Error("label matrix for " + std::string(to_string(k)) + " pool was built against another dictionary");
  return {build_score_table<Half::ranking>(rank_tops, labels, dict.size(), r.pools, m.p0),
          build_score_table<Half::evaluation>(eval_tops, labels, dict.size(), r.pools, m.p0)};
}

/// Dictionary entries naming each planted concept.
inline std::vector<std::vector<std::size_t>> planted_entries(const ConceptWorld& w, const HypothesisDictionary& dict) {
  std::vector<std::vector<std::size_t>> out(w.concepts.size());
  for (const auto& e : dict.entries)
    if (auto c = w.concept_of(e.text)) out[*c].push_back(e.id);
  return out;
}

/// Fraction of planted concepts with at least one explained dictionary
/// entry; a concept missing from the dictionary counts as unexplained.
inline double planted_recovery(const RankingTable& rank, const EvaluationTable& eval, double threshold,
                               const ConceptWorld& w, const HypothesisDictionary& dict) {
  const auto entries = planted_entries(w, dict);
  std::size_t hit = 0;
  for (const auto& es : entries) {
    bool ok = false;
    for (std::size_t h : es) {
      const std::vector<std::size_t> one{h};
      ok = ok || metric_interpretable_hypotheses(rank, eval, threshold, &one) > 0.0;
    }
    hit += ok ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(entries.size());
}

inline std::vector<std::string> methods_present(const RankingTable& t) {
  std::vector<std::string> out;
  for (Method me : kMethods)
    for (const auto& p : t.patterns)
      if (p.method == me) {
        out.emplace_back(to_string(me));
        break;
      }
  return out;
}

inline const Decomposition& decomposition_of(const std::vector<Decomposition>& decomps, const PatternId& id) {
  for (const auto& d : decomps)
    if (d.method == id.method && d.roi == id.roi && d.fingerprint() == id.fingerprint) return d;
  throw Error("no decomposition for pattern " + id.key());
}

inline Vector component_of(const std::vector<Decomposition>& decomps, const PatternId& id) {
  const auto& d = decomposition_of(decomps, id);
  const std::size_t row = d.sign_duplicated() ? 2 * id.index + (id.sign == Sign::negative ? 1 : 0) : id.index;
  return d.components.row(static_cast<Eigen::Index>(row)).transpose();
}

/// Method x threshold metrics, the union over all methods, and the pairwise
/// complementarity at the first threshold.
inline json compute_metrics(const RunManifest& m, const ScoreStage& s, const std::vector<Decomposition>& decomps,
                            const HypothesisDictionary& dict, const ConceptWorld* world) {
  json out = {{"dictionary_size", dict.size()},
              {"p0", m.p0},
              {"thresholds", m.thresholds},
              {"strict_threshold", true},
              {"groups", json::array()}};
  auto methods = methods_present(s.ranking);
  std::vector<std::pair<std::string, std::vector<std::string>>> groups;
  for (const auto& me : methods) groups.push_back({me, {me}});
  if (methods.size() > 1) groups.push_back({"all", methods});
  auto component = [&](const PatternId& id) { return component_of(decomps, id); };
  for (const auto& [name, members] : groups) {
    auto keep = [&](const PatternId& id) {
      return std::find(members.begin(), members.end(), std::string(to_string(id.method))) != members.end();
    };
    const auto rank = s.ranking.select(keep);
    const auto eval = s.evaluation.select(keep);
    json g = {{"name", name}, {"patterns", rank.num_patterns()}, {"by_threshold", json::array()}};
    for (double t : m.thresholds) {
      json row = {{"threshold", t},
                  {"interpretable_hypotheses", metric_interpretable_hypotheses(rank, eval, t)},
                  {"interpretable_patterns", metric_interpretable_patterns(rank, eval, t, component, m.dedup_threshold).count()}};
      if (world) row["planted_recovery"] = planted_recovery(rank, eval, t, *world, dict);
      g["by_threshold"].push_back(row);
    }
    out["groups"].push_back(g);
  }
  const auto c = pairwise_complementarity(s.ranking, s.evaluation, methods, m.thresholds.front());
  json gain = json::array();
  for (Eigen::Index i = 0; i < c.gain.rows(); ++i) {
    json jr = json::array();
    for (Eigen::Index j = 0; j < c.gain.cols(); ++j) jr.push_back(c.gain(i, j));
    gain.push_back(jr);
  }
  out["complementarity"] = {{"threshold", m.thresholds.front()}, {"methods", c.groups}, {"gain_pp", gain}};
  return out;
}

// ---------------------------------------------------------------------------
// Everything in one call

struct PipelineRun {
  PipelineData data;
  std::vector<Decomposition> decompositions;
  Retrieval retrieval;
  DictionaryStage dictionary;
  PoolLabels labels;
  ScoreStage scores;
  json metrics;
};

inline std::unique_ptr<AnnotatorSuite> make_annotators(const RunManifest& m, const PipelineData& data) {
  if (m.backend == "oracle") {
    if (!data.world) throw ConfigError("the oracle annotator needs a synthetic world");
    return std::make_unique<OracleAnnotators>(*data.world);
  }
  HttpConfig cfg = m.http;
  if (!cfg.cache_path.empty()) cfg.cache_path = m.resolve(cfg.cache_path);
  if (!m.prompts_dir.empty()) cfg.prompts = PromptSet::load(m.resolve(m.prompts_dir));
  return std::make_unique<HttpAnnotators>(std::move(cfg));
}

inline PipelineRun run_pipeline(const RunManifest& m, PipelineData data) {
  PipelineRun run;
  run.data = std::move(data);
  auto suite = make_annotators(m, run.data);
  run.decompositions = decompose_all(m, run.data);
  run.retrieval = retrieve_all(m, run.data, run.decompositions);
  run.dictionary = dictionary_stage(m, run.retrieval, *suite);
  run.labels = label_all(m, run.data, run.dictionary.dictionary, *suite);
  run.scores = score_all(m, run.retrieval, run.labels, run.dictionary.dictionary);
  run.metrics = compute_metrics(m, run.scores, run.decompositions, run.dictionary.dictionary, run.data.world.get());
  return run;
}

inline PipelineRun run_pipeline(const RunManifest& m) {
  return run_pipeline(m, m.synth ? synth_data(*m.synth) : load_matrix_data(m));
}

}  // namespace brainexplore
