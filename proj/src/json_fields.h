#pragma once

#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "siamese/errors.h"

namespace siamese::json_fields {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                           const std::string& section) {
  if (!j.is_object()) throw ConfigError(section + " section must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown " + section + " key '" + key + "'");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  const std::string where = section + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(where + " must be a boolean");
    out = v.get<bool>();
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    if (!v.is_number_unsigned()) throw ConfigError(where + " must be a non-negative integer");
    out = v.get<T>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(where + " must be an integer");
    out = v.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where + " must be a number");
    out = v.get<T>();
  } else {
    if (!v.is_string()) throw ConfigError(where + " must be a string");
    out = v.get<std::string>();
  }
}

}  // namespace siamese::json_fields
