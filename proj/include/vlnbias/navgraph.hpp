#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "vlnbias/common.hpp"
#include "vlnbias/episode.hpp"

namespace vlnbias::navgraph {

struct Vec3 {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    friend bool operator==(const Vec3&, const Vec3&) = default;
};

double distance(const Vec3& a, const Vec3& b);

enum class Axis { X, Z };

Axis parse_axis(std::string_view text);
std::string_view to_string(Axis axis);

struct Edge {
    std::size_t to;
    double weight;
};

// Undirected weighted navigation graph of one environment. Weights are the
// Euclidean edge lengths unless given explicitly; all weights are > 0.
class NavGraph {
public:
    NavGraph() = default;
    explicit NavGraph(std::string env_id) : env_id_(std::move(env_id)) {}

    const std::string& env_id() const { return env_id_; }

    std::size_t add_viewpoint(std::string id, Vec3 position);
    void add_edge(std::size_t a, std::size_t b);
    void add_edge(std::size_t a, std::size_t b, double weight);

    std::size_t size() const { return ids_.size(); }
    std::size_t edge_count() const;
    const std::string& id(std::size_t i) const { return ids_.at(i); }
    const Vec3& position(std::size_t i) const { return positions_.at(i); }
    double coordinate(std::size_t i, Axis axis) const;
    std::span<const Edge> neighbors(std::size_t i) const { return adjacency_.at(i); }
    bool has_edge(std::size_t a, std::size_t b) const;

    std::optional<std::size_t> find(std::string_view id) const;
    std::size_t index_of(std::string_view id) const;  // throws LookupError

private:
    std::string env_id_;
    std::vector<std::string> ids_;
    std::vector<Vec3> positions_;
    std::vector<std::vector<Edge>> adjacency_;
    std::unordered_map<std::string, std::size_t> index_;
};

using GraphIndex = std::map<std::string, NavGraph, std::less<>>;

const NavGraph& graph_for(const GraphIndex& graphs, std::string_view env_id);

// Single-source Dijkstra. Unreachable viewpoints get kInfinity.
std::vector<double> shortest_lengths(const NavGraph& graph, std::size_t source);
std::vector<double> shortest_lengths(const NavGraph& graph, std::string_view source_id);

// Dijkstra seeded with every source at distance zero.
std::vector<double> multi_source_lengths(const NavGraph& graph, std::span<const std::size_t> sources);

// Viewpoint sequence of one shortest path (inclusive of both ends); empty when
// unreachable. Ties resolve towards lower viewpoint indices.
std::vector<std::size_t> shortest_path(const NavGraph& graph, std::size_t from, std::size_t to);

bool is_connected(const NavGraph& graph);

// --- locality distances --------------------------------------------------

// Minimal graph distance from v to any viewpoint on a training path of the
// same environment. kInfinity if no training item lives in this environment.
// Throws DomainError when `training` is empty.
double dis_viewpoint(std::size_t v, std::span<const PathDatum> training, const NavGraph& graph);

// Maximal dis_viewpoint over the viewpoints of x. kInfinity when x is in a
// different environment than `graph`.
double dis_path(const PathDatum& x, std::span<const PathDatum> training, const NavGraph& graph);

struct DistanceTable {
    std::map<std::string, double> dis_path;                   // episode id -> meters
    std::map<std::string, std::vector<double>> dis_viewpoint;  // env id -> per-viewpoint meters

    friend bool operator==(const DistanceTable&, const DistanceTable&) = default;
};

// Builds the per-environment viewpoint cache once (multi-source Dijkstra) and
// evaluates dis_path for every item.
DistanceTable build_distance_table(const GraphIndex& graphs, std::span<const PathDatum> training,
                                   std::span<const PathDatum> items);

// --- structural re-splitting ---------------------------------------------

enum class SplitCategory { Train, PathSeen, PathUnseen, EnvUnseen };

std::string_view to_string(SplitCategory c);
SplitCategory parse_split_category(std::string_view text);

struct SplitAssignment {
    Axis axis = Axis::X;
    std::map<std::string, double> cuts;  // env id -> cut (meters)
    std::map<std::string, std::set<std::string>> training_viewpoints;  // env id -> viewpoint ids
    std::map<std::string, SplitCategory> split_items;                  // episode id -> category

    std::vector<std::string> items_in(SplitCategory c) const;

    friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

struct SplitInput {
    std::span<const PathDatum> episodes;
    const std::set<std::string>* original_train_ids = nullptr;  // episodes eligible for TRAIN
    const std::set<std::string>* heldout_envs = nullptr;        // kept as ENV_UNSEEN
};

// Re-splits the non-held-out environments along `axis`. The training side of
// an environment is every viewpoint with coordinate strictly below its cut.
// Throws ValidationError for a missing cut, SplitError for an empty training
// side or an empty TRAIN category.
SplitAssignment structural_split(const GraphIndex& graphs, const SplitInput& input, Axis axis,
                                 const std::map<std::string, double>& cuts);

// Single-environment convenience: every episode must live in `graph`.
SplitAssignment structural_split(const NavGraph& graph, std::span<const PathDatum> episodes,
                                 const std::set<std::string>& original_train_ids, Axis axis,
                                 double cut);

// Cut between distinct coordinate values whose training-side fraction is
// closest to target_fraction. Throws DomainError outside (0,1).
double choose_cut(const NavGraph& graph, Axis axis, double target_fraction);

void to_json(nlohmann::json& j, const SplitAssignment& s);
void from_json(const nlohmann::json& j, SplitAssignment& s);
void to_json(nlohmann::json& j, const DistanceTable& t);
void from_json(const nlohmann::json& j, DistanceTable& t);

}  // namespace vlnbias::navgraph
