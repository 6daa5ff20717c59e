#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "cbct/common.hpp"

namespace cbct {

// Config sections are strict: any key outside the schema is an error.
inline void require_known_keys(const nlohmann::json& j,
                               std::initializer_list<const char*> allowed,
                               const std::string& ctx) {
  require(j.is_object(), ctx + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ValidationError(ctx + ": unknown key '" + it.key() + "'");
  }
}

}  // namespace cbct
