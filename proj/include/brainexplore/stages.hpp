#pragma once

// On-disk stages. Each stage writes into <output_dir>/<stage>/ and finishes
// with a STAMP.json naming its config digest, the stamps it consumed and the
// hash of every file it wrote. A stage whose stamp still matches is skipped.

#include "brainexplore/pipeline.hpp"
#include "brainexplore/report.hpp"

#include <iostream>

namespace brainexplore {

inline constexpr int kSchemaVersion = 1;

enum class Stage { synth, decompose, retrieve, dict, label, score, report };
inline constexpr Stage kStages[] = {Stage::synth, Stage::decompose, Stage::retrieve, Stage::dict,
                                    Stage::label, Stage::score,     Stage::report};

inline std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::synth: return "synth";
    case Stage::decompose: return "decompose";
    case Stage::retrieve: return "retrieve";
    case Stage::dict: return "dict";
    case Stage::label: return "label";
    case Stage::score: return "score";
    case Stage::report: return "report";
  }
  return "?";
}

inline Stage stage_from_string(std::string_view s) {
  for (Stage st : kStages)
    if (to_string(st) == s) return st;
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

inline std::vector<Stage> upstream_of(Stage s) {
  switch (s) {
    case Stage::synth: return {};
    case Stage::decompose: return {Stage::synth};
    case Stage::retrieve: return {Stage::decompose};
    case Stage::dict: return {Stage::retrieve};
    case Stage::label: return {Stage::dict};
    case Stage::score: return {Stage::retrieve, Stage::label};
    case Stage::report: return {Stage::score};
  }
  return {};
}

/// Options that come from the command line rather than the manifest.
struct RunOptions {
  std::optional<double> threshold;    // report only this threshold
  std::optional<std::string> scope;   // overrides score.scope in the report
  bool quiet = false;
};

struct StageContext {
  RunManifest manifest;
  RunOptions options;

  std::filesystem::path dir(Stage s) const { return manifest.out() / std::string(to_string(s)); }
  std::filesystem::path stamp_path(Stage s) const { return dir(s) / "STAMP.json"; }
  void note(const std::string& msg) const {
    if (!options.quiet) std::cerr << msg << "\n";
  }
};

namespace detail {

inline void write_json(const std::filesystem::path& p, const json& j) { write_all(p, j.dump(2) + "\n"); }

inline json read_json(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw MissingArtifactError("missing artifact " + p.string());
  try {
    return json::parse(read_all(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline json annotator_digest_input(const StageContext& c) {
  const auto& m = c.manifest;
  json j = {{"backend", m.backend}};
  if (m.backend == "http") {
    j["base_url"] = m.http.base_url;
    if (!m.prompts_dir.empty()) {
      const auto p = PromptSet::load(m.resolve(m.prompts_dir));
      j["prompts"] = {{"caption", p.caption}, {"hypotheses", p.hypotheses}, {"label_a", p.label_a}, {"label_b", p.label_b}};
    }
  }
  return j;
}

}  // namespace detail

/// Digest of the settings a stage reads directly; upstream settings reach it
/// through the upstream stamps.
inline std::string config_digest(const StageContext& c, Stage s) {
  const auto& m = c.manifest;
  const json full = m.to_json();
  json j = {{"stage", to_string(s)}, {"schema_version", kSchemaVersion}};
  switch (s) {
    case Stage::synth:
      j["data"] = full["data"];
      if (!m.synth) {
        json files = json::object();
        files["space"] = sha256_file(m.resolve(m.space_path));
        for (const auto& [k, src] : m.matrices) {
          files[std::string(to_string(k)) + ".responses"] = sha256_file(m.resolve(src.responses));
          files[std::string(to_string(k)) + ".ids"] = sha256_file(m.resolve(src.ids));
        }
        j["files"] = files;
      }
      break;
    case Stage::decompose:
      for (const char* k : {"normalize_input", "train_on_predicted", "rois", "methods"}) j[k] = full[k];
      break;
    case Stage::retrieve:
      j["retrieval"] = full["retrieval"];
      j["split_seed"] = m.split_seed;
      break;
    case Stage::dict:
      j["annotator"] = detail::annotator_digest_input(c);
      j["dictionary"] = full["dictionary"];
      break;
    case Stage::label:
      j["annotator"] = detail::annotator_digest_input(c);
      j["label"] = full["label"];
      break;
    case Stage::score:
      j["score"] = {{"p0", m.p0}, {"thresholds", m.thresholds}, {"dedup_threshold", m.dedup_threshold}};
      break;
    case Stage::report:
      j["thresholds"] = c.options.threshold ? std::vector<double>{*c.options.threshold} : m.thresholds;
      j["scope"] = c.options.scope.value_or(m.scope);
      break;
  }
  return sha256_hex(j.dump());
}

struct Stamp {
  json body;
  std::string digest;  // sha256 of the STAMP.json bytes
};

/// Reads and checks a stage stamp. Returns nullopt if the stage has not run;
/// throws if it ran against other settings or its files changed since.
inline std::optional<Stamp> read_stamp(const StageContext& c, Stage s) {
  const auto path = c.stamp_path(s);
  if (!std::filesystem::exists(path)) return std::nullopt;
  Stamp st;
  const std::string bytes = detail::read_all(path);
  st.digest = sha256_hex(bytes);
  try {
    st.body = json::parse(bytes);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (st.body.value("schema_version", 0) != kSchemaVersion)
    throw FormatError(path.string() + ": unsupported schema version");
  for (const auto& [rel, sha] : st.body.at("outputs").items()) {
    const auto f = c.dir(s) / rel;
    if (!std::filesystem::exists(f)) throw MissingArtifactError("missing artifact " + f.string());
    if (sha256_file(f) != sha.get<std::string>())
      throw MissingArtifactError("artifact " + f.string() + " does not match its stamp");
  }
  return st;
}

enum class StampState { missing, stale, current };

/// Whether a stage's outputs are current for this manifest and the present
/// upstream stamps.
inline StampState stamp_state(const StageContext& c, Stage s, std::string* why = nullptr) {
  std::optional<Stamp> st;
  try {
    st = read_stamp(c, s);
  } catch (const Error& e) {
    if (why) *why = e.what();
    return StampState::stale;
  }
  if (!st) return StampState::missing;
  if (st->body.at("config_digest").get<std::string>() != config_digest(c, s)) {
    if (why) *why = "settings changed since " + c.stamp_path(s).string() + " was written";
    return StampState::stale;
  }
  for (Stage u : upstream_of(s)) {
    std::optional<Stamp> up;
    try {
      up = read_stamp(c, u);
    } catch (const Error&) {
    }
    const auto& ups = st->body.at("upstream");
    const std::string name(to_string(u));
    if (!up || !ups.contains(name) || ups[name].get<std::string>() != up->digest) {
      if (why) *why = "upstream stage '" + name + "' changed since " + c.stamp_path(s).string() + " was written";
      return StampState::stale;
    }
  }
  return StampState::current;
}

/// Upstream stamps a stage needs, or exit-3 errors naming what is missing.
inline json require_upstream(const StageContext& c, Stage s) {
  json ups = json::object();
  for (Stage u : upstream_of(s)) {
    const auto path = c.stamp_path(u);
    std::string why;
    switch (stamp_state(c, u, &why)) {
      case StampState::missing:
        throw MissingArtifactError("stage '" + std::string(to_string(s)) + "' needs " + path.string() +
                                   "; run --stage " + std::string(to_string(u)) + " first");
      case StampState::stale:
        throw MissingArtifactError("stage '" + std::string(to_string(s)) + "' cannot use stale " + path.string() +
                                   ": " + why + "; rerun --stage " + std::string(to_string(u)));
      case StampState::current: break;
    }
    ups[std::string(to_string(u))] = read_stamp(c, u)->digest;
  }
  return ups;
}

inline void write_stamp(const StageContext& c, Stage s, const json& upstream) {
  json outputs = json::object();
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(c.dir(s)))
    if (e.is_regular_file() && e.path().filename() != "STAMP.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files)
    outputs[std::filesystem::relative(f, c.dir(s)).generic_string()] = sha256_file(f);
  detail::write_json(c.stamp_path(s), {{"stage", to_string(s)},
                                       {"schema_version", kSchemaVersion},
                                       {"manifest_hash", c.manifest.hash()},
                                       {"config_digest", config_digest(c, s)},
                                       {"upstream", upstream},
                                       {"outputs", outputs}});
}

// ---------------------------------------------------------------------------
// Loaders for stage artifacts

/// Input data. Synthetic worlds are regenerated from their spec, which is
/// bit-identical to the first generation.
inline PipelineData stage_data(const StageContext& c) {
  return c.manifest.synth ? synth_data(*c.manifest.synth) : load_matrix_data(c.manifest);
}

inline std::shared_ptr<const ConceptWorld> stage_world(const StageContext& c) {
  if (!c.manifest.synth) return nullptr;
  return std::make_shared<ConceptWorld>(gen_world(*c.manifest.synth));
}

inline std::vector<Decomposition> load_decompositions(const StageContext& c) {
  const auto dir = c.dir(Stage::decompose);
  const json idx = detail::read_json(dir / "index.json");
  std::vector<Decomposition> out;
  for (const auto& e : idx.at("decompositions")) out.push_back(load_decomposition(dir / e.at("dir").get<std::string>()));
  return out;
}

inline Retrieval load_retrieval(const StageContext& c) {
  const auto dir = c.dir(Stage::retrieve);
  Retrieval r;
  const json meta = detail::read_json(dir / "split.json");
  r.split = SplitAssignment::from_json(meta.at("split"));
  for (const auto& p : meta.at("pools")) r.pools.push_back(pool_kind_from_string(p.get<std::string>()));

  std::ifstream pin(dir / "patterns.jsonl");
  if (!pin) throw MissingArtifactError("missing artifact " + (dir / "patterns.jsonl").string());
  std::map<std::string, std::size_t> by_key;
  std::string line;
  while (std::getline(pin, line)) {
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      PatternRecord rec;
      rec.id = PatternId::from_json(j.at("pattern"));
      rec.decomposition = j.at("decomposition").get<std::size_t>();
      rec.row = j.at("row").get<std::size_t>();
      by_key[rec.id.key()] = r.patterns.size();
      r.patterns.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw FormatError((dir / "patterns.jsonl").string() + ": " + e.what());
    }
  }
  std::ifstream tin(dir / "topsets.jsonl");
  if (!tin) throw MissingArtifactError("missing artifact " + (dir / "topsets.jsonl").string());
  for (auto& rec : read_topsets_jsonl(tin, (dir / "topsets.jsonl").string())) {
    auto it = by_key.find(rec.pattern_key);
    if (it == by_key.end()) throw FormatError("top set for unknown pattern " + rec.pattern_key);
    auto& pr = r.patterns[it->second];
    rec.set.pattern = pr.id;
    if (rec.tag == "explain") {
      pr.explain[rec.set.pool] = std::move(rec.set);
    } else {
      const Half h = half_from_string(rec.tag);
      pr.tops[h][rec.set.pool] = std::move(rec.set);
    }
  }
  return r;
}

inline HypothesisDictionary load_dictionary(const StageContext& c) {
  const auto p = c.dir(Stage::dict) / "dictionary.json";
  try {
    return HypothesisDictionary::from_json(detail::read_json(p));
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline PoolLabels load_pool_labels(const StageContext& c, const std::vector<PoolKind>& pools) {
  PoolLabels out;
  for (PoolKind k : pools) {
    const auto p = c.dir(Stage::label) / (std::string(to_string(k)) + ".bxlbl");
    if (!std::filesystem::exists(p)) throw MissingArtifactError("missing artifact " + p.string());
    out.emplace(k, load_labels(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage bodies

namespace detail {

inline void run_synth(const StageContext& c) {
  const auto dir = c.dir(Stage::synth);
  if (c.manifest.synth) {
    const auto world = gen_world(*c.manifest.synth);
    write_json(dir / "world.json", world.to_json());
    write_json(dir / "space.json", world.space.to_json());
  } else {
    const auto data = load_matrix_data(c.manifest);
    json pools = json::object();
    for (const auto& [k, p] : data.pools)
      pools[std::string(to_string(k))] = {{"stimuli", p.size()}, {"voxels", p.responses().cols()}};
    write_json(dir / "space.json", data.space.to_json());
    write_json(dir / "inputs.json", {{"pools", pools}});
  }
}

inline std::string decomposition_dir_name(std::size_t i, const Decomposition& d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return std::string(buf) + "_" + std::string(to_string(d.method)) + "_" + d.roi + "_" + d.fingerprint();
}

inline void run_decompose(const StageContext& c) {
  const auto data = stage_data(c);
  const auto decomps = decompose_all(c.manifest, data);
  const auto dir = c.dir(Stage::decompose);
  json idx = json::array();
  for (std::size_t i = 0; i < decomps.size(); ++i) {
    const auto name = decomposition_dir_name(i, decomps[i]);
    save_decomposition(dir / name, decomps[i]);
    idx.push_back({{"dir", name},
                   {"method", to_string(decomps[i].method)},
                   {"roi", decomps[i].roi},
                   {"fingerprint", decomps[i].fingerprint()},
                   {"patterns", decomps[i].num_patterns()}});
  }
  write_json(dir / "index.json", {{"decompositions", idx}});
  c.note("decompose: " + std::to_string(decomps.size()) + " decompositions");
}

inline void run_retrieve(const StageContext& c) {
  const auto data = stage_data(c);
  const auto decomps = load_decompositions(c);
  const auto r = retrieve_all(c.manifest, data, decomps);
  const auto dir = c.dir(Stage::retrieve);
  json pools = json::array();
  for (PoolKind k : r.pools) pools.push_back(to_string(k));
  write_json(dir / "split.json", {{"split", r.split.to_json()}, {"pools", pools}});
  std::ofstream pout(dir / "patterns.jsonl", std::ios::binary);
  std::ofstream tout(dir / "topsets.jsonl", std::ios::binary);
  for (const auto& rec : r.patterns) {
    pout << json{{"pattern", rec.id.to_json()}, {"decomposition", rec.decomposition}, {"row", rec.row}}.dump() << '\n';
    for (Half h : {Half::ranking, Half::evaluation})
      for (const auto& [k, t] : rec.tops.at(h)) write_topsets_jsonl(tout, std::span(&t, 1), to_string(h));
    for (const auto& [k, t] : rec.explain) write_topsets_jsonl(tout, std::span(&t, 1), "explain");
  }
  if (!pout || !tout) throw Error("failed writing " + dir.string());
  c.note("retrieve: " + std::to_string(r.patterns.size()) + " patterns");
}

inline void run_dict(const StageContext& c) {
  const auto data = stage_data(c);
  const auto r = load_retrieval(c);
  auto suite = make_annotators(c.manifest, data);
  const auto ds = dictionary_stage(c.manifest, r, *suite);
  const auto dir = c.dir(Stage::dict);
  json cons = json::array();
  for (const auto& s : ds.consistency) cons.push_back({{"pattern", s.pattern.key()}, {"consistency", s.consistency}});
  write_json(dir / "consistency.json", cons);
  json cands = json::array();
  for (const auto& id : ds.candidates) cands.push_back(id.key());
  write_json(dir / "candidates.json", cands);
  std::ofstream raw(dir / "hypotheses_raw.jsonl", std::ios::binary);
  for (const auto& h : ds.explain.pool) raw << json{{"text", h.text}, {"source", h.source.key()}}.dump() << '\n';
  json notes = {{"failures", json::array()}, {"under_generated", json::array()}, {"outside_preferred", json::array()}};
  for (const auto& f : ds.explain.failures) notes["failures"].push_back({{"pattern", f.pattern.key()}, {"error", f.message}});
  for (const auto& id : ds.explain.under_generated) notes["under_generated"].push_back(id.key());
  for (const auto& id : ds.explain.outside_preferred) notes["outside_preferred"].push_back(id.key());
  write_json(dir / "explain_notes.json", notes);
  write_json(dir / "dictionary.json", ds.dictionary.to_json());
  c.note("dict: " + std::to_string(ds.candidates.size()) + " candidates, " + std::to_string(ds.dictionary.size()) +
         " dictionary entries, " + std::to_string(ds.explain.failures.size()) + " failures");
}

inline void run_label(const StageContext& c) {
  const auto data = stage_data(c);
  const auto dict = load_dictionary(c);
  auto suite = make_annotators(c.manifest, data);
  std::vector<std::string> log;
  const auto labels = label_all(c.manifest, data, dict, *suite, &log);
  const auto dir = c.dir(Stage::label);
  for (const auto& [k, lm] : labels) save_labels(dir / (std::string(to_string(k)) + ".bxlbl"), lm);
  std::string text;
  for (const auto& l : log) text += l + "\n";
  write_all(dir / "log.txt", text);
  c.note("label: " + std::to_string(log.size()) + " logged label failures");
}

inline void run_score(const StageContext& c) {
  const auto r = load_retrieval(c);
  const auto dict = load_dictionary(c);
  const auto labels = load_pool_labels(c, r.pools);
  const auto decomps = load_decompositions(c);
  const auto world = stage_world(c);
  const auto s = score_all(c.manifest, r, labels, dict);
  const auto dir = c.dir(Stage::score);
  save_score_table(dir / "ranking", s.ranking);
  save_score_table(dir / "evaluation", s.evaluation);
  write_json(dir / "metrics.json", compute_metrics(c.manifest, s, decomps, dict, world.get()));
  write_json(dir / "hypotheses.json", hypothesis_table(s.ranking, s.evaluation, dict));
}

inline void run_report(const StageContext& c) {
  const auto sdir = c.dir(Stage::score);
  ReportInput in;
  in.manifest_hash = c.manifest.hash();
  in.metrics = read_json(sdir / "metrics.json");
  in.hypotheses = read_json(sdir / "hypotheses.json");
  in.thresholds = c.options.threshold ? std::vector<double>{*c.options.threshold} : c.manifest.thresholds;
  in.scope = c.options.scope.value_or(c.manifest.scope);
  write_report(c.dir(Stage::report), in);
}

}  // namespace detail

/// Runs one stage if its outputs are not current. Returns true if it ran.
inline bool run_stage(const StageContext& c, Stage s) {
  const json upstream = require_upstream(c, s);
  std::string why;
  const auto state = stamp_state(c, s, &why);
  if (state == StampState::current) {
    c.note(std::string(to_string(s)) + ": up to date");
    return false;
  }
  if (state == StampState::stale) c.note(std::string(to_string(s)) + ": rebuilding (" + why + ")");
  std::filesystem::remove_all(c.dir(s));
  std::filesystem::create_directories(c.dir(s));
  switch (s) {
    case Stage::synth: detail::run_synth(c); break;
    case Stage::decompose: detail::run_decompose(c); break;
    case Stage::retrieve: detail::run_retrieve(c); break;
    case Stage::dict: detail::run_dict(c); break;
    case Stage::label: detail::run_label(c); break;
    case Stage::score: detail::run_score(c); break;
    case Stage::report: detail::run_report(c); break;
  }
  write_stamp(c, s, upstream);
  c.note(std::string(to_string(s)) + ": done");
  return true;
}

inline void run_all(const StageContext& c) {
  for (Stage s : kStages) run_stage(c, s);
}

}  // namespace brainexplore
