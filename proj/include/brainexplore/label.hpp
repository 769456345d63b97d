#pragma once

// Sparse binary stimulus x hypothesis labels: an embedding shortlist per
// stimulus, then two-pass verification of each shortlisted hypothesis.

#include "brainexplore/explain.hpp"
#include "brainexplore/matrix_io.hpp"

#include <cstring>
#include <mutex>

namespace brainexplore {

inline constexpr std::size_t kDefaultShortlist = 300;

struct LabelMatrix {
  PoolKind pool = PoolKind::measured;
  std::size_t num_stimuli = 0;
  std::size_t num_hypotheses = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> positives;  // sorted (stimulus, hypothesis)
  std::vector<double> frequencies;                                 // per hypothesis
  std::string dictionary_hash;
  json provenance = json::object();  // shortlist size, templates, aggregation

  /// Sorts the pairs, checks bounds and recomputes frequencies.
  void finalize() {
    std::sort(positives.begin(), positives.end());
    positives.erase(std::unique(positives.begin(), positives.end()), positives.end());
    frequencies = compute_frequencies();
    build_offsets();
  }

  std::vector<double> compute_frequencies() const {
    if (num_stimuli == 0) throw Error("label matrix has no stimuli");
    std::vector<std::size_t> counts(num_hypotheses, 0);
    for (const auto& [s, h] : positives) {
      if (s >= num_stimuli || h >= num_hypotheses)
        throw Error("label pair (" + std::to_string(s) + ", " + std::to_string(h) + ") outside shape");
      ++counts[h];
    }
    std::vector<double> f(num_hypotheses);
    for (std::size_t h = 0; h < num_hypotheses; ++h)
      f[h] = static_cast<double>(counts[h]) / static_cast<double>(num_stimuli);
    return f;
  }

  double frequency(std::size_t h) const { return frequencies.at(h); }

  /// Hypotheses labeled positive for stimulus `s`, ascending.
  std::span<const std::pair<std::uint32_t, std::uint32_t>> row(std::size_t s) const {
    if (offsets_.size() != num_stimuli + 1) throw Error("label matrix not finalized");
    return {positives.data() + offsets_[s], positives.data() + offsets_[s + 1]};
  }

  bool is_positive(std::size_t s, std::size_t h) const {
    const auto r = row(s);
    return std::binary_search(r.begin(), r.end(), std::pair<std::uint32_t, std::uint32_t>(
                                                      static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(h)));
  }

 private:
  void build_offsets() {
    offsets_.assign(num_stimuli + 1, 0);
    for (const auto& p : positives) ++offsets_[p.first + 1];
    for (std::size_t i = 0; i < num_stimuli; ++i) offsets_[i + 1] += offsets_[i];
  }

  std::vector<std::size_t> offsets_;
};

// File layout: magic "BXLBL1\0", u64 LE header length, UTF-8 JSON header,
// then one (u32 stimulus, u32 hypothesis) little-endian pair per positive.
inline constexpr std::array<char, 7> kLabelMagic = {'B', 'X', 'L', 'B', 'L', '1', '\0'};

inline std::string encode_labels(const LabelMatrix& m) {
  json header = {{"shape", {m.num_stimuli, m.num_hypotheses}},
                 {"pool", to_string(m.pool)},
                 {"dictionary_hash", m.dictionary_hash},
                 {"positives", m.positives.size()},
                 {"frequencies", m.frequencies},
                 {"provenance", m.provenance}};
  const std::string h = header.dump();
  std::string out(kLabelMagic.data(), kLabelMagic.size());
  detail::put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + 8 * m.positives.size());
  for (const auto& [s, hyp] : m.positives)
    for (std::uint32_t v : {s, hyp})
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  return out;
}

inline LabelMatrix decode_labels(std::string_view bytes, const std::string& source = "<buffer>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kLabelMagic.size() || std::memcmp(bytes.data(), kLabelMagic.data(), kLabelMagic.size()) != 0)
    throw FormatError(source + ": bad magic at offset 0");
  if (bytes.size() < kLabelMagic.size() + 8) throw FormatError(source + ": truncated header at offset 7");
  const std::uint64_t hlen = detail::get_u64(p + 7);
  if (hlen > bytes.size() - 15) throw FormatError(source + ": truncated JSON header at offset 15");
  json header;
  try {
    header = json::parse(bytes.substr(15, hlen));
  } catch (const json::exception& e) {
    throw FormatError(source + ": bad JSON header at offset 15: " + e.what());
  }
  LabelMatrix m;
  try {
    m.num_stimuli = header.at("shape").at(0).get<std::size_t>();
    m.num_hypotheses = header.at("shape").at(1).get<std::size_t>();
    m.pool = pool_kind_from_string(header.at("pool").get<std::string>());
    m.dictionary_hash = header.at("dictionary_hash").get<std::string>();
    m.provenance = header.value("provenance", json::object());
    const auto n = header.at("positives").get<std::size_t>();
    const std::size_t start = 15 + hlen;
    if (bytes.size() - start != 8 * n)
      throw FormatError(source + ": pair list at offset " + std::to_string(start) + " has " +
                        std::to_string(bytes.size() - start) + " bytes, expected " + std::to_string(8 * n));
    auto u32 = [&](std::size_t off) {
      return static_cast<std::uint32_t>(p[off]) | (static_cast<std::uint32_t>(p[off + 1]) << 8) |
             (static_cast<std::uint32_t>(p[off + 2]) << 16) | (static_cast<std::uint32_t>(p[off + 3]) << 24);
    };
    m.positives.reserve(n);
    for (std::size_t i = 0; i < n; ++i) m.positives.emplace_back(u32(start + 8 * i), u32(start + 8 * i + 4));
    if (!std::is_sorted(m.positives.begin(), m.positives.end()))
      throw FormatError(source + ": pairs are not in canonical order");
    const auto stored = header.at("frequencies").get<std::vector<double>>();
    m.finalize();
    if (stored != m.frequencies) throw FormatError(source + ": stored frequencies disagree with the pair list");
  } catch (const json::exception& e) {
    throw FormatError(source + ": " + e.what());
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(source + ": " + e.what());
  }
  return m;
}

inline void save_labels(const std::filesystem::path& path, const LabelMatrix& m) {
  detail::write_all(path, encode_labels(m));
}

inline LabelMatrix load_labels(const std::filesystem::path& path) {
  return decode_labels(detail::read_all(path), path.string());
}

// ---------------------------------------------------------------------------
// Shortlist and verification

/// Text-embedding prompt templates; "{}" stands for the hypothesis.
inline std::string apply_template(const std::string& tmpl, const std::string& text) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos) throw ConfigError("template '" + tmpl + "' has no {} placeholder");
  return tmpl.substr(0, pos) + text + tmpl.substr(pos + 2);
}

/// One H x D matrix of unit text embeddings per template.
struct TemplateBank {
  std::vector<std::string> templates;
  std::vector<Matrix> embeddings;

  static TemplateBank build(const HypothesisDictionary& dict, AnnotatorSuite& suite,
                            std::vector<std::string> templates = {"{}"}, int retries = 2) {
    if (templates.empty()) throw ConfigError("at least one text template is required");
    TemplateBank b;
    b.templates = std::move(templates);
    for (const auto& t : b.templates) {
      Matrix m;
      for (std::size_t h = 0; h < dict.size(); ++h) {
        const Vector e =
            l2_normalized(with_retries(retries, [&] { return suite.embed_text(apply_template(t, dict.entries[h].text)); }));
        if (h == 0) m.resize(static_cast<Eigen::Index>(dict.size()), e.size());
        if (e.size() != m.cols()) throw BackendError("text embeddings differ in dimension");
        m.row(static_cast<Eigen::Index>(h)) = e.transpose();
      }
      b.embeddings.push_back(std::move(m));
    }
    return b;
  }
};

/// Top `k` dictionary entries by max-over-templates cosine to the image
/// embedding; ties by id.
inline std::vector<std::size_t> shortlist(const Vector& image_embedding, const TemplateBank& bank,
                                          std::size_t k = kDefaultShortlist) {
  if (bank.embeddings.empty()) return {};
  const auto H = static_cast<std::size_t>(bank.embeddings[0].rows());
  if (H == 0) return {};
  Vector best = bank.embeddings[0] * image_embedding;
  for (std::size_t t = 1; t < bank.embeddings.size(); ++t) best = best.cwiseMax(bank.embeddings[t] * image_embedding);
  std::vector<std::size_t> order(H);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t take = std::min(k, H);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = best[static_cast<Eigen::Index>(a)];
                      const double sb = best[static_cast<Eigen::Index>(b)];
                      return sa != sb ? sa > sb : a < b;
                    });
  order.resize(take);
  return order;
}

struct Verdict {
  bool positive = false;
  int calls = 0;
  std::optional<std::string> error;
};

/// Variant A first; variant B only when A says yes. Positive iff both agree.
/// A failing call counts as a no.
inline Verdict verify(AnnotatorSuite& suite, const std::string& image_ref, const std::string& hypothesis) {
  Verdict v;
  try {
    ++v.calls;
    if (!suite.label(image_ref, hypothesis, LabelVariant::a)) return v;
    ++v.calls;
    v.positive = suite.label(image_ref, hypothesis, LabelVariant::b);
  } catch (const std::exception& e) {
    v.positive = false;
    v.error = e.what();
  }
  return v;
}

struct LabelConfig {
  std::size_t shortlist_k = kDefaultShortlist;
  std::vector<std::string> templates{"{}"};
  std::size_t workers = 1;
  int retries = 2;
};

struct LabelBuild {
  LabelMatrix matrix;
  std::vector<std::string> log;  // one line per failure, sorted
  std::size_t label_calls = 0;
};

inline LabelBuild build_label_matrix(const std::vector<std::string>& stimulus_ids, PoolKind pool,
                                     const HypothesisDictionary& dict, AnnotatorSuite& suite,
                                     const LabelConfig& cfg = {}) {
  if (dict.size() == 0) throw Error("build_label_matrix: empty dictionary");
  if (dict.size() > std::numeric_limits<std::uint32_t>::max() ||
      stimulus_ids.size() > std::numeric_limits<std::uint32_t>::max())
    throw Error("build_label_matrix: shape exceeds 32-bit indices");
  const TemplateBank bank = TemplateBank::build(dict, suite, cfg.templates, cfg.retries);

  struct Slot {
    std::vector<std::uint32_t> positives;
    std::vector<std::string> errors;
    std::size_t calls = 0;
  };
  std::vector<Slot> slots(stimulus_ids.size());
  parallel_for(stimulus_ids.size(), std::min(cfg.workers, suite.max_in_flight()), [&](std::size_t s) {
    Slot& slot = slots[s];
    const std::string& id = stimulus_ids[s];
    Vector img;
    try {
      img = l2_normalized(with_retries(cfg.retries, [&] { return suite.embed_image(id); }));
    } catch (const std::exception& e) {
      slot.errors.push_back(id + ": image embedding failed: " + e.what());
      return;
    }
    if (img.size() != bank.embeddings[0].cols()) {
      slot.errors.push_back(id + ": image embedding dimension differs from text embeddings");
      return;
    }
    for (std::size_t h : shortlist(img, bank, cfg.shortlist_k)) {
      const Verdict v = verify(suite, id, dict.entries[h].text);
      slot.calls += static_cast<std::size_t>(v.calls);
      if (v.error) slot.errors.push_back(id + " / " + dict.entries[h].text + ": " + *v.error);
      if (v.positive) slot.positives.push_back(static_cast<std::uint32_t>(h));
    }
  });

  LabelBuild out;
  LabelMatrix& m = out.matrix;
  m.pool = pool;
  m.num_stimuli = stimulus_ids.size();
  m.num_hypotheses = dict.size();
  m.dictionary_hash = dict.hash();
  m.provenance = {{"shortlist_k", cfg.shortlist_k}, {"templates", cfg.templates}, {"template_aggregation", "max"}};
  for (std::size_t s = 0; s < slots.size(); ++s) {
    for (auto h : slots[s].positives) m.positives.emplace_back(static_cast<std::uint32_t>(s), h);
    for (auto& e : slots[s].errors) out.log.push_back(std::move(e));
    out.label_calls += slots[s].calls;
  }
  m.finalize();
  std::sort(out.log.begin(), out.log.end());
  return out;
}

}  // namespace brainexplore
