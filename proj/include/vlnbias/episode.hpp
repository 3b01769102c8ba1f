#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace vlnbias {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// One navigation episode: a viewpoint path through one environment plus the
// instruction describing it.
struct PathDatum {
    std::string id;
    std::string env_id;
    std::vector<std::string> path;
    TokenSeq instruction;
    std::string goal;

    friend bool operator==(const PathDatum&, const PathDatum&) = default;
};

void to_json(nlohmann::json& j, const PathDatum& p);
void from_json(const nlohmann::json& j, PathDatum& p);

}  // namespace vlnbias
