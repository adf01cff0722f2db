#pragma once

#include <set>
#include <string>

#include "json.hpp"

#include "neuroadapt/errors.hpp"

namespace neuroadapt {

// Reads fields of one JSON object and remembers which keys were consumed.
// `finish()` rejects whatever is left, naming the offending key by its path
// (e.g. "$.suites[1].target_prior").
class JsonFields {
 public:
  JsonFields(const nlohmann::json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return obj_.contains(key); }
  std::string path(const std::string& key) const { return path_ + "." + key; }

  const nlohmann::json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  template <typename T>
  T required(const std::string& key) {
    if (!obj_.contains(key)) throw ConfigError(path(key) + ": missing required field");
    return convert<T>(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!obj_.contains(key)) return fallback;
    return convert<T>(key);
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(path(it.key()) + ": unknown key");
    }
  }

 private:
  template <typename T>
  T convert(const std::string& key) {
    seen_.insert(key);
    try {
      return obj_.at(key).template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  const nlohmann::json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace neuroadapt
