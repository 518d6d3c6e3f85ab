#pragma once

#include <set>
#include <string>
#include <vector>

#include "fmm/canonical_json.hpp"
#include "fmm/errors.hpp"

namespace fmm::detail {

// Reads known keys from a JSON object, warning about the rest.
class JsonReader {
 public:
  JsonReader(const Json& j, std::string path, std::vector<std::string>* warnings)
      : j_(j), path_(std::move(path)), warnings_(warnings) {
    if (!j.is_object()) throw ValueError(path_ + ": expected a JSON object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw ValueError(path_ + "." + key + ": wrong type");
    }
  }
  const Json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    if (!warnings_) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) warnings_->push_back("unknown config key '" + path_ + "." + it.key() + "'");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::vector<std::string>* warnings_;
  std::set<std::string> seen_;
};

}  // namespace fmm::detail
