#pragma once

// Hypothesis generation from explanation image sets and the deduplicated
// hypothesis dictionary.

#include "brainexplore/annotators.hpp"
#include "brainexplore/hash.hpp"
#include "brainexplore/parallel.hpp"
#include "brainexplore/retrieve.hpp"

#include <cctype>
#include <functional>

namespace brainexplore {

inline constexpr std::size_t kMinHypotheses = 3;
inline constexpr std::size_t kMaxHypotheses = 12;
inline constexpr std::size_t kPreferredMinHypotheses = 5;
inline constexpr std::size_t kPreferredMaxHypotheses = 10;

struct GeneratedHypotheses {
  std::vector<std::string> texts;
  bool under_generated = false;  // fewer than 3 usable strings
  bool outside_preferred = false;  // count outside [5, 10]
  bool truncated = false;
};

inline bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

/// Retries transient backend failures; anything else propagates at once.
template <class Fn>
auto with_retries(int retries, Fn&& fn) -> decltype(fn()) {
  for (int attempt = 0;; ++attempt) {
    try {
      return fn();
    } catch (const BackendError&) {
      if (attempt >= retries) throw;
    }
  }
}

inline GeneratedHypotheses generate_hypotheses(AnnotatorSuite& suite, const std::vector<std::string>& captions,
                                               int retries = 2) {
  if (captions.size() < 2) throw Error("generate_hypotheses: need at least 2 captions");
  const auto raw = with_retries(retries, [&] { return suite.hypotheses(captions); });
  GeneratedHypotheses out;
  for (const auto& h : raw)
    if (!is_blank(h)) out.texts.push_back(h);
  if (out.texts.size() > kMaxHypotheses) {
    out.texts.resize(kMaxHypotheses);
    out.truncated = true;
  }
  out.under_generated = out.texts.size() < kMinHypotheses;
  out.outside_preferred = out.texts.size() < kPreferredMinHypotheses || out.texts.size() > kPreferredMaxHypotheses;
  return out;
}

// ---------------------------------------------------------------------------
// Dictionary

struct DictionaryEntry {
  std::size_t id = 0;
  std::string text;
  Vector embedding;
};

struct HypothesisDictionary {
  std::vector<DictionaryEntry> entries;
  std::vector<std::size_t> merge_log;  // raw index -> entry id
  std::vector<std::string> raw;        // merged strings, in input order
  double merge_threshold = 0.9;

  std::size_t size() const { return entries.size(); }

  std::optional<std::size_t> find(const std::string& text) const {
    for (const auto& e : entries)
      if (e.text == text) return e.id;
    return std::nullopt;
  }

  /// SHA-256 over the entry texts and threshold; label files carry it.
  std::string hash() const {
    Sha256 h;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g\n", merge_threshold);
    h.update(buf);
    for (const auto& e : entries) {
      h.update(e.text);
      h.update(std::string_view("\n", 1));
    }
    return h.hex();
  }

  json to_json() const {
    json es = json::array();
    for (const auto& e : entries)
      es.push_back({{"id", e.id},
                    {"text", e.text},
                    {"embedding", std::vector<double>(e.embedding.data(), e.embedding.data() + e.embedding.size())}});
    json log = json::array();
    for (std::size_t i = 0; i < raw.size(); ++i) log.push_back({{"raw", raw[i]}, {"entry", merge_log[i]}});
    return {{"merge_threshold", merge_threshold}, {"hash", hash()}, {"entries", es}, {"merge_log", log}};
  }

  static HypothesisDictionary from_json(const json& j) {
    HypothesisDictionary d;
    d.merge_threshold = j.at("merge_threshold").get<double>();
    for (const auto& e : j.at("entries")) {
      const auto v = e.at("embedding").get<std::vector<double>>();
      d.entries.push_back({e.at("id").get<std::size_t>(), e.at("text").get<std::string>(),
                           Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()))});
      if (d.entries.back().id != d.entries.size() - 1) throw FormatError("dictionary ids are not dense");
    }
    for (const auto& m : j.at("merge_log")) {
      d.raw.push_back(m.at("raw").get<std::string>());
      d.merge_log.push_back(m.at("entry").get<std::size_t>());
      if (d.merge_log.back() >= d.entries.size()) throw FormatError("merge log points past the last entry");
    }
    if (j.contains("hash") && j["hash"].get<std::string>() != d.hash())
      throw FormatError("dictionary hash does not match its entries");
    return d;
  }
};

/// Greedy first-fit: each string joins the first entry whose embedding has
/// cosine >= threshold with its own, otherwise it founds a new entry.
inline HypothesisDictionary build_dictionary(const std::vector<std::string>& raw, AnnotatorSuite& suite,
                                             double merge_threshold = 0.9, int retries = 2) {
  if (raw.empty()) throw Error("build_dictionary: no hypotheses to merge");
  HypothesisDictionary d;
  d.merge_threshold = merge_threshold;
  std::unordered_map<std::string, std::size_t> exact;  // text -> entry, skips repeat embedding calls
  for (const auto& text : raw) {
    std::optional<std::size_t> target;
    if (auto it = exact.find(text); it != exact.end()) {
      target = it->second;
    } else {
      const Vector e = l2_normalized(with_retries(retries, [&] { return suite.embed_text(text); }));
      for (const auto& entry : d.entries) {
        if (entry.embedding.size() != e.size()) throw BackendError("text embeddings differ in dimension");
        if (entry.embedding.dot(e) >= merge_threshold) {
          target = entry.id;
          break;
        }
      }
      if (!target) {
        target = d.entries.size();
        d.entries.push_back({*target, text, e});
      }
      exact.emplace(text, *target);
    }
    d.raw.push_back(text);
    d.merge_log.push_back(*target);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Explain stage

struct Candidate {
  PatternId pattern;
  std::vector<ImageRef> images;  // explanation image set
};

struct RawHypothesis {
  std::string text;
  PatternId source;
};

struct ExplainFailure {
  PatternId pattern;
  std::string message;
};

struct ExplainResult {
  std::vector<RawHypothesis> pool;
  std::vector<ExplainFailure> failures;
  std::vector<PatternId> under_generated;
  std::vector<PatternId> outside_preferred;

  std::vector<std::string> texts() const {
    std::vector<std::string> out;
    out.reserve(pool.size());
    for (const auto& r : pool) out.push_back(r.text);
    return out;
  }
};

/// Captions each candidate's images and asks for hypotheses. A failing
/// candidate is recorded and skipped. The pool follows candidate order.
inline ExplainResult run_explain_stage(const std::vector<Candidate>& candidates, AnnotatorSuite& suite,
                                       std::size_t workers = 1, int retries = 2) {
  struct Slot {
    std::optional<GeneratedHypotheses> result;
    std::string error;
  };
  std::vector<Slot> slots(candidates.size());
  parallel_for(candidates.size(), std::min(workers, suite.max_in_flight()), [&](std::size_t i) {
    try {
      std::vector<std::string> captions;
      for (const auto& img : candidates[i].images)
        captions.push_back(with_retries(retries, [&] { return suite.caption(img.id); }));
      slots[i].result = generate_hypotheses(suite, captions, retries);
    } catch (const std::exception& e) {
      slots[i].error = e.what();
    }
  });
  ExplainResult out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& id = candidates[i].pattern;
    if (!slots[i].result) {
      out.failures.push_back({id, slots[i].error});
      continue;
    }
    if (slots[i].result->under_generated) out.under_generated.push_back(id);
    if (slots[i].result->outside_preferred) out.outside_preferred.push_back(id);
    for (const auto& t : slots[i].result->texts) out.pool.push_back({t, id});
  }
  return out;
}

}  // namespace brainexplore
