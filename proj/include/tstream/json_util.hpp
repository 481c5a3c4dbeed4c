#pragma once

// Strict reading of JSON objects: typed lookups with dotted key paths in error
// messages, and rejection of keys nobody asked for.

#include <set>
#include <string>

#include <json.hpp>

#include "tstream/errors.hpp"

namespace tstream {

using Json = nlohmann::json;

class JsonReader {
 public:
  JsonReader(const Json& object, std::string path) : object_(object), path_(std::move(path)) {
    if (!object_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  bool has(const std::string& key) const { return object_.contains(key); }

  // Leaves `out` untouched when the key is absent.
  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = object_.find(key);
    if (it == object_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + ": wrong type (" + it->dump() + ")");
    }
  }

  // Sub-object reader; an absent key reads as an empty object.
  JsonReader child(const std::string& key) {
    seen_.insert(key);
    const auto it = object_.find(key);
    if (it == object_.end()) return JsonReader(empty(), where(key));
    return JsonReader(*it, where(key));
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    const auto it = object_.find(key);
    if (it == object_.end()) throw ConfigError(where(key) + ": missing");
    return *it;
  }

  // Throws ConfigError naming the first key that was never read.
  void finish() const {
    for (const auto& [key, value] : object_.items()) {
      if (!seen_.count(key)) throw ConfigError(where(key) + ": unknown key");
    }
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  static const Json& empty() {
    static const Json e = Json::object();
    return e;
  }

  const Json& object_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace tstream
