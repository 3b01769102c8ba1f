#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vlnbias/episode.hpp"
#include "vlnbias/navgraph.hpp"
#include "vlnbias/neuralcore.hpp"

namespace vlnbias::worldgen {

using navgraph::Vec3;
using neuralcore::Tensor;

struct IntRange {
    int lo = 1;
    int hi = 1;
    friend bool operator==(const IntRange&, const IntRange&) = default;
};

struct WorldSpec {
    int num_envs = 14;
    IntRange rooms_per_env{6, 6};
    int floors = 2;
    IntRange viewpoints_per_room{4, 4};
    int semantic_classes = 16;
    int room_types = 6;
    int style_dim = 8;
    int lowlevel_dim = 64;
    double env_style_w = 1.0;
    double region_style_w = 1.0;
    double appearance_noise_sd = 0.1;
    // Per-view perturbation of the room-type semantics; 0 makes every view
    // that looks into the same room type identical.
    double within_room_variation = 0.3;
    // Scale of W_sem relative to the unit-variance style projections.
    double semantic_gain = 2.0;
    std::uint64_t seed = 0;

    void validate() const;  // throws ValidationError
    friend bool operator==(const WorldSpec&, const WorldSpec&) = default;
};

inline constexpr int kDirections = 4;  // N, E, S, W
inline constexpr double kFloorHeight = 3.0;

enum class Direction { North = 0, East = 1, South = 2, West = 3 };

// Quadrant of a horizontal displacement; bearings are clockwise from +y.
Direction direction_of(double dx, double dy);
double bearing_degrees(double dx, double dy);

struct Viewpoint {
    std::string id;
    Vec3 position;
    int room_id = 0;
    friend bool operator==(const Viewpoint&, const Viewpoint&) = default;
};

struct Room {
    int room_id = 0;
    int room_type = 0;
    int floor = 0;
    std::array<double, 4> box{};  // x0, y0, x1, y1
    std::vector<double> region_style_vec;
    friend bool operator==(const Room&, const Room&) = default;
};

struct Environment {
    std::string id;
    std::vector<Viewpoint> viewpoints;
    std::vector<std::pair<int, int>> edges;
    std::vector<Room> rooms;
    std::vector<double> env_style_vec;
    // Indexed [viewpoint * kDirections + direction].
    std::vector<std::vector<double>> semantics;
    std::vector<int> view_region;  // room each view looks into

    navgraph::NavGraph graph;  // derived from viewpoints + edges

    std::size_t viewpoint_index(std::string_view id) const { return graph.index_of(id); }
    const std::vector<double>& view_semantics(std::size_t vp, int dir) const {
        return semantics.at(vp * kDirections + static_cast<std::size_t>(dir));
    }
    void rebuild_graph();

    friend bool operator==(const Environment& a, const Environment& b) {
        return a.id == b.id && a.viewpoints == b.viewpoints && a.edges == b.edges && a.rooms == b.rooms &&
               a.env_style_vec == b.env_style_vec && a.semantics == b.semantics && a.view_region == b.view_region;
    }
};

struct GlobalMixing {
    Tensor W_sem;  // D x C
    Tensor W_env;  // D x style_dim
    Tensor W_reg;  // D x style_dim
    friend bool operator==(const GlobalMixing& a, const GlobalMixing& b);
};

struct World {
    WorldSpec spec;
    std::vector<Environment> envs;
    GlobalMixing global_mixing;

    const Environment& env(std::string_view id) const;  // throws LookupError
    navgraph::GraphIndex graphs() const;

    friend bool operator==(const World&, const World&) = default;
};

World generate_world(const WorldSpec& spec);

// --- instructions ------------------------------------------------------------

// Fixed vocabulary: PAD, EOS, five direction tokens, then room_types x
// synonyms room tokens ordered by (type, synonym).
enum SpecialToken : Token { kPad = 0, kEos = 1, kLeft = 2, kRight = 3, kStraight = 4, kUp = 5, kDown = 6 };
inline constexpr Token kFirstRoomToken = 7;
inline constexpr int kDefaultSynonyms = 3;

struct InstructionNoise {
    double dropout = 0.0;
    double insertion = 0.0;
    int synonyms = kDefaultSynonyms;
};

int vocabulary_size(int room_types, int synonyms = kDefaultSynonyms);
Token room_token(int room_type, int synonym, int synonyms = kDefaultSynonyms);
std::string token_name(Token t, int synonyms = kDefaultSynonyms);

// Per step: a direction token relative to the current heading (initial
// heading north) and a room-type token for the step's destination.
TokenSeq render_instruction(const World& world, const PathDatum& path, const InstructionNoise& noise,
                            std::uint64_t seed);

// Direction token for one move given the heading before it; updates heading.
Token step_direction(const Vec3& from, const Vec3& to, double& heading_degrees);

// --- episodes ------------------------------------------------------------------

struct EpisodeRequest {
    std::size_t count = 0;
    IntRange path_edges{2, 5};  // inclusive range of shortest-path edge counts
    std::vector<std::string> env_ids;  // empty = all environments
    InstructionNoise noise;
    std::string id_prefix = "ep";
    int retry_budget = 2000;
};

// Shortest paths between uniformly drawn start/goal pairs, rejection-sampled
// until the edge count is in range. Throws GenerationError naming the
// environment when the retry budget runs out.
std::vector<PathDatum> sample_episodes(const World& world, const EpisodeRequest& request, std::uint64_t seed);

// --- views ------------------------------------------------------------------------

const std::vector<double>& ground_truth_semantics(const World& world, std::string_view env_id,
                                                  std::string_view viewpoint, int direction);

std::vector<double> low_level_appearance(const World& world, std::string_view env_id, std::string_view viewpoint,
                                         int direction, std::uint64_t seed);
std::vector<double> low_level_appearance(const World& world, std::size_t env_index, std::size_t viewpoint,
                                         int direction, std::uint64_t seed);

// --- serialization ------------------------------------------------------------------

void to_json(nlohmann::json& j, const WorldSpec& s);
void from_json(const nlohmann::json& j, WorldSpec& s);  // strict: unknown keys rejected
void to_json(nlohmann::json& j, const World& w);
void from_json(const nlohmann::json& j, World& w);

inline constexpr int kWorldSchemaVersion = 1;

std::string world_to_string(const World& world);
World world_from_string(std::string_view text);

}  // namespace vlnbias::worldgen
