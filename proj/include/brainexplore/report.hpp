#pragma once

// Report tables: method x threshold summary, per-ROI hypothesis tables and
// the pairwise complementarity matrix, as markdown and CSV.

#include "brainexplore/explain.hpp"
#include "brainexplore/matrix_io.hpp"
#include "brainexplore/score.hpp"

#include <cstdio>

namespace brainexplore {

/// For every dictionary entry, its best pattern over all ROIs and within
/// each ROI (null where nothing in scope has a score).
inline json hypothesis_table(const RankingTable& rank, const EvaluationTable& eval, const HypothesisDictionary& dict) {
  std::set<std::string> rois;
  for (const auto& p : rank.patterns) rois.insert(p.roi);
  auto pick_json = [&](std::size_t h, const std::optional<std::string>& roi) -> json {
    try {
      const auto pk = best_pattern(rank, eval, h, roi);
      const auto& id = rank.patterns[pk.pattern_row];
      return {{"pattern", id.key()},
              {"method", to_string(id.method)},
              {"roi", id.roi},
              {"ranking", pk.ranking_score},
              {"evaluation", pk.evaluation_score}};
    } catch (const Error&) {
      return nullptr;
    }
  };
  json out = json::array();
  for (const auto& e : dict.entries) {
    json by_roi = json::object();
    for (const auto& r : rois) by_roi[r] = pick_json(e.id, r);
    out.push_back({{"id", e.id}, {"text", e.text}, {"all", pick_json(e.id, std::nullopt)}, {"rois", by_roi}});
  }
  return out;
}

struct ReportInput {
  std::string manifest_hash;
  json metrics;
  json hypotheses;
  std::vector<double> thresholds;
  std::string scope = "all";
};

namespace detail {

inline std::string fmt(const char* f, double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline double json_number(const json& j) { return j.is_number() ? j.get<double>() : std::nan(""); }

}  // namespace detail

inline void write_report(const std::filesystem::path& dir, const ReportInput& in) {
  using detail::fmt;
  std::filesystem::create_directories(dir);
  const auto scored = in.metrics.at("thresholds").get<std::vector<double>>();
  for (double t : in.thresholds)
    if (std::find(scored.begin(), scored.end(), t) == scored.end())
      throw ConfigError("threshold " + fmt("%g", t) + " was not scored; add it to score.thresholds");
  if (in.scope != "roi" && in.scope != "all") throw ConfigError("scope must be 'roi' or 'all'");
  const bool has_planted = [&] {
    for (const auto& g : in.metrics.at("groups"))
      for (const auto& row : g.at("by_threshold"))
        if (row.contains("planted_recovery")) return true;
    return false;
  }();

  std::string md = "# BrainExplore report\n\n";
  md += "- manifest: `" + in.manifest_hash + "`\n";
  md += "- dictionary entries: " + std::to_string(in.metrics.at("dictionary_size").get<std::size_t>()) + "\n";
  md += "- p0: " + fmt("%g", in.metrics.at("p0").get<double>()) + "\n";
  md += "- best-pattern scope: " + in.scope + "\n\n";

  // Method x threshold summary.
  std::string csv = "group,patterns,threshold,interpretable_hypotheses,interpretable_patterns";
  csv += has_planted ? ",planted_recovery\n" : "\n";
  md += "## Interpretable hypotheses (% of dictionary, evaluation half)\n\n| group | patterns |";
  for (double t : in.thresholds) md += " > " + fmt("%g", t) + " |";
  md += "\n|---|---|";
  for (std::size_t i = 0; i < in.thresholds.size(); ++i) md += "---|";
  md += "\n";
  std::string md_pat = "\n## Interpretable patterns (after dedup)\n\n| group |";
  for (double t : in.thresholds) md_pat += " > " + fmt("%g", t) + " |";
  md_pat += "\n|---|";
  for (std::size_t i = 0; i < in.thresholds.size(); ++i) md_pat += "---|";
  md_pat += "\n";
  std::string md_pl;
  if (has_planted) {
    md_pl = "\n## Planted concepts recovered (%)\n\n| group |";
    for (double t : in.thresholds) md_pl += " > " + fmt("%g", t) + " |";
    md_pl += "\n|---|";
    for (std::size_t i = 0; i < in.thresholds.size(); ++i) md_pl += "---|";
    md_pl += "\n";
  }
  for (const auto& g : in.metrics.at("groups")) {
    const std::string name = g.at("name").get<std::string>();
    const std::string n = std::to_string(g.at("patterns").get<std::size_t>());
    md += "| " + name + " | " + n + " |";
    md_pat += "| " + name + " |";
    if (has_planted) md_pl += "| " + name + " |";
    for (double t : in.thresholds) {
      for (const auto& row : g.at("by_threshold")) {
        if (row.at("threshold").get<double>() != t) continue;
        const double ih = row.at("interpretable_hypotheses").get<double>();
        const auto ip = row.at("interpretable_patterns").get<std::size_t>();
        md += " " + fmt("%.1f", 100.0 * ih) + " |";
        md_pat += " " + std::to_string(ip) + " |";
        csv += name + "," + n + "," + fmt("%g", t) + "," + fmt("%.6f", ih) + "," + std::to_string(ip);
        if (has_planted) {
          const double pr = detail::json_number(row.value("planted_recovery", json()));
          md_pl += " " + fmt("%.1f", 100.0 * pr) + " |";
          csv += "," + fmt("%.6f", pr);
        }
        csv += "\n";
      }
    }
    md += "\n";
    md_pat += "\n";
    if (has_planted) md_pl += "\n";
  }
  md += md_pat + md_pl;
  detail::write_all(dir / "summary.csv", csv);

  // Complementarity.
  const auto& comp = in.metrics.at("complementarity");
  const auto methods = comp.at("methods").get<std::vector<std::string>>();
  const auto& gain = comp.at("gain_pp");
  std::string ccsv = "method";
  for (const auto& me : methods) ccsv += "," + me;
  ccsv += "\n";
  md += "\n## Pairwise complementarity (pp gain over the better method, threshold " +
        fmt("%g", comp.at("threshold").get<double>()) + ")\n\n|  |";
  for (const auto& me : methods) md += " " + me + " |";
  md += "\n|---|";
  for (std::size_t i = 0; i < methods.size(); ++i) md += "---|";
  md += "\n";
  for (std::size_t i = 0; i < methods.size(); ++i) {
    ccsv += methods[i];
    md += "| " + methods[i] + " |";
    for (std::size_t j = 0; j < methods.size(); ++j) {
      const double v = detail::json_number(gain[i][j]);
      ccsv += "," + fmt("%.6f", v);
      md += " " + fmt("%.1f", v) + " |";
    }
    ccsv += "\n";
    md += "\n";
  }
  detail::write_all(dir / "complementarity.csv", ccsv);

  // Per-ROI hypothesis tables.
  struct Row {
    std::size_t id;
    std::string text;
    json pick;
  };
  std::map<std::string, std::vector<Row>> by_roi;
  for (const auto& h : in.hypotheses) {
    const auto id = h.at("id").get<std::size_t>();
    const auto text = h.at("text").get<std::string>();
    if (in.scope == "all") {
      if (!h.at("all").is_null()) by_roi[h["all"].at("roi").get<std::string>()].push_back({id, text, h["all"]});
    } else {
      for (const auto& [roi, pick] : h.at("rois").items())
        if (!pick.is_null()) by_roi[roi].push_back({id, text, pick});
    }
  }
  md += "\n## Best hypotheses per ROI\n";
  for (auto& [roi, rows] : by_roi) {
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      const double ea = detail::json_number(a.pick.at("evaluation")), eb = detail::json_number(b.pick.at("evaluation"));
      const bool na = std::isnan(ea), nb = std::isnan(eb);
      if (na != nb) return nb;
      if (!na && ea != eb) return ea > eb;
      return a.id < b.id;
    });
    std::string rcsv = "hypothesis_id,hypothesis,pattern,method,ranking_score,evaluation_score";
    for (double t : in.thresholds) rcsv += ",explained_" + fmt("%g", t);
    rcsv += "\n";
    md += "\n### " + roi + "\n\n| hypothesis | pattern | ranking | evaluation |\n|---|---|---|---|\n";
    std::size_t shown = 0;
    for (const auto& r : rows) {
      const double rs = detail::json_number(r.pick.at("ranking"));
      const double es = detail::json_number(r.pick.at("evaluation"));
      const std::string pat = r.pick.at("pattern").get<std::string>();
      rcsv += std::to_string(r.id) + "," + detail::csv_field(r.text) + "," + detail::csv_field(pat) + "," +
              r.pick.at("method").get<std::string>() + "," + fmt("%.6f", rs) + "," + fmt("%.6f", es);
      for (double t : in.thresholds) rcsv += (rs > t && es > t) ? ",1" : ",0";
      rcsv += "\n";
      if (shown++ < 10) md += "| " + r.text + " | `" + pat + "` | " + fmt("%.3f", rs) + " | " + fmt("%.3f", es) + " |\n";
    }
    detail::write_all(dir / ("roi_" + roi + ".csv"), rcsv);
  }
  detail::write_all(dir / "summary.md", md);
}

}  // namespace brainexplore
