#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

namespace fmm {

using Json = nlohmann::json;

// Sorted keys, no whitespace, doubles at 17 significant digits.
std::string canonical_dump(const Json& value);
// Same layout with two-space indentation, for files meant to be read by people.
std::string canonical_dump_pretty(const Json& value);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

}  // namespace fmm
