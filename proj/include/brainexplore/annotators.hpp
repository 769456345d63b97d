#pragma once

// Annotator roles (captioner, hypothesis writer, binary labeler, text and
// image embedders) behind one interface, plus an HTTP JSON client with a
// replayable request cache.

#include "brainexplore/core.hpp"

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace brainexplore {

enum class LabelVariant { a, b };

inline std::string_view to_string(LabelVariant v) { return v == LabelVariant::a ? "A" : "B"; }

/// Every method may be called concurrently from several threads.
class AnnotatorSuite {
 public:
  virtual ~AnnotatorSuite() = default;

  virtual std::string caption(const std::string& image_ref) = 0;
  virtual std::vector<std::string> hypotheses(const std::vector<std::string>& captions) = 0;
  virtual bool label(const std::string& image_ref, const std::string& hypothesis, LabelVariant variant) = 0;
  virtual Vector embed_text(const std::string& text) = 0;
  virtual Vector embed_image(const std::string& image_ref) = 0;

  /// Upper bound on concurrent calls the backend should see.
  virtual std::size_t max_in_flight() const { return 8; }
};

inline Vector l2_normalized(Vector v) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw BackendError("embedding has zero or non-finite norm");
  return v / n;
}

// Prompt texts shipped with the project; sent alongside requests so a real
// backend can use them verbatim. Missing files leave the field out.
struct PromptSet {
  std::string caption;
  std::string hypotheses;
  std::string label_a;
  std::string label_b;

  static PromptSet load(const std::filesystem::path& dir) {
    auto read = [&](const char* name) -> std::string {
      std::ifstream in(dir / name);
      if (!in) return {};
      return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    };
    return {read("caption.txt"), read("hypotheses.txt"), read("label_a.txt"), read("label_b.txt")};
  }
};

struct HttpConfig {
  std::string base_url;  // scheme://host:port
  std::filesystem::path cache_path;
  double timeout_seconds = 30.0;
  int retries = 2;
  double retry_backoff_seconds = 0.5;
  bool offline = false;  // serve from cache only
  std::size_t max_in_flight = 8;
  PromptSet prompts;
};

/// Client for the annotator wire protocol:
///   POST /caption {image_ref} -> {caption}
///   POST /hypotheses {captions[]} -> {hypotheses[]}
///   POST /label {image_ref, hypothesis, variant} -> {label}
///   POST /embed_text {text} -> {vector[]}
///   POST /embed_image {image_ref} -> {vector[]}
/// Each exchange is appended to a JSONL cache keyed by endpoint and request
/// body, and a cached exchange is never re-sent.
class HttpAnnotators : public AnnotatorSuite {
 public:
  explicit HttpAnnotators(HttpConfig cfg) : cfg_(std::move(cfg)) {
    if (!cfg_.offline && cfg_.base_url.empty()) throw ConfigError("http annotator needs a base_url");
    if (!cfg_.cache_path.empty()) load_cache();
    if (const char* key = std::getenv("BRAINEXPLORE_API_KEY")) api_key_ = key;
  }

  std::string caption(const std::string& image_ref) override {
    json req = {{"image_ref", image_ref}};
    if (!cfg_.prompts.caption.empty()) req["prompt"] = cfg_.prompts.caption;
    const json res = call("/caption", req);
    if (!res.contains("caption") || !res["caption"].is_string()) throw BackendError("/caption: missing 'caption'");
    return res["caption"].get<std::string>();
  }

  std::vector<std::string> hypotheses(const std::vector<std::string>& captions) override {
    json req = {{"captions", captions}};
    if (!cfg_.prompts.hypotheses.empty()) req["prompt"] = cfg_.prompts.hypotheses;
    const json res = call("/hypotheses", req);
    if (!res.contains("hypotheses") || !res["hypotheses"].is_array())
      throw BackendError("/hypotheses: missing 'hypotheses'");
    std::vector<std::string> out;
    for (const auto& h : res["hypotheses"]) {
      if (!h.is_string()) throw BackendError("/hypotheses: non-string entry");
      out.push_back(h.get<std::string>());
    }
    return out;
  }

  bool label(const std::string& image_ref, const std::string& hypothesis, LabelVariant variant) override {
    json req = {{"image_ref", image_ref}, {"hypothesis", hypothesis}, {"variant", to_string(variant)}};
    const auto& prompt = variant == LabelVariant::a ? cfg_.prompts.label_a : cfg_.prompts.label_b;
    if (!prompt.empty()) req["prompt"] = prompt;
    const json res = call("/label", req);
    if (!res.contains("label") || !res["label"].is_number_integer()) throw BackendError("/label: missing 'label'");
    const int v = res["label"].get<int>();
    if (v != 0 && v != 1) throw BackendError("/label: label must be 0 or 1");
    return v == 1;
  }

  Vector embed_text(const std::string& text) override { return vector_from(call("/embed_text", {{"text", text}})); }

  Vector embed_image(const std::string& image_ref) override {
    return vector_from(call("/embed_image", {{"image_ref", image_ref}}));
  }

  std::size_t max_in_flight() const override { return cfg_.max_in_flight; }

  std::size_t cache_hits() const { return hits_; }
  std::size_t network_calls() const { return network_calls_; }

 private:
  static Vector vector_from(const json& res) {
    if (!res.contains("vector") || !res["vector"].is_array() || res["vector"].empty())
      throw BackendError("embedding response missing 'vector'");
    const auto raw = res["vector"].get<std::vector<double>>();
    return l2_normalized(Eigen::Map<const Vector>(raw.data(), static_cast<Eigen::Index>(raw.size())));
  }

  static std::string cache_key(const std::string& endpoint, const json& req) { return endpoint + " " + req.dump(); }

  void load_cache() {
    std::ifstream in(cfg_.cache_path);
    if (!in) return;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json rec;
      try {
        rec = json::parse(line);
        cache_[cache_key(rec.at("endpoint").get<std::string>(), rec.at("request"))] = rec.at("response");
      } catch (const json::exception& e) {
        throw FormatError(cfg_.cache_path.string() + ":" + std::to_string(lineno) + ": bad cache record: " + e.what());
      }
    }
  }

  json call(const std::string& endpoint, const json& req) {
    const std::string key = cache_key(endpoint, req);
    {
      std::lock_guard lock(mutex_);
      if (auto it = cache_.find(key); it != cache_.end()) {
        ++hits_;
        return it->second;
      }
    }
    if (cfg_.offline) throw BackendError(endpoint + ": not in replay cache and offline mode is on");

    const json res = post_with_retries(endpoint, req.dump());
    std::lock_guard lock(mutex_);
    if (cache_.emplace(key, res).second && !cfg_.cache_path.empty()) {
      if (cfg_.cache_path.has_parent_path()) std::filesystem::create_directories(cfg_.cache_path.parent_path());
      std::ofstream out(cfg_.cache_path, std::ios::app);
      out << json{{"endpoint", endpoint}, {"request", req}, {"response", res}}.dump() << '\n';
    }
    return res;
  }

  json post_with_retries(const std::string& endpoint, const std::string& body) {
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(std::chrono::duration<double>(cfg_.retry_backoff_seconds * attempt));
      httplib::Client client(cfg_.base_url);
      const auto secs = static_cast<time_t>(cfg_.timeout_seconds);
      const auto usecs = static_cast<time_t>((cfg_.timeout_seconds - static_cast<double>(secs)) * 1e6);
      client.set_connection_timeout(secs, usecs);
      client.set_read_timeout(secs, usecs);
      client.set_write_timeout(secs, usecs);
      httplib::Headers headers;
      if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
      {
        std::lock_guard lock(mutex_);
        ++network_calls_;
      }
      auto res = client.Post(endpoint, headers, body, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status);
        if (res->status >= 400 && res->status < 500 && res->status != 429) break;  // not worth retrying
        continue;
      }
      try {
        return json::parse(res->body);
      } catch (const json::exception& e) {
        last_error = std::string("malformed JSON: ") + e.what();
      }
    }
    throw BackendError(endpoint + " failed after " + std::to_string(cfg_.retries + 1) + " attempt(s): " + last_error);
  }

  HttpConfig cfg_;
  std::string api_key_;
  std::mutex mutex_;
  std::unordered_map<std::string, json> cache_;
  std::size_t hits_ = 0;
  std::size_t network_calls_ = 0;
};

}  // namespace brainexplore
