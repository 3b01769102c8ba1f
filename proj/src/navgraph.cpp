#include "vlnbias/navgraph.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <queue>
#include <utility>

namespace vlnbias {

void to_json(nlohmann::json& j, const PathDatum& p) {
    j = nlohmann::json{{"id", p.id},
                       {"env_id", p.env_id},
                       {"path", p.path},
                       {"instruction", p.instruction},
                       {"goal", p.goal}};
}

void from_json(const nlohmann::json& j, PathDatum& p) {
    j.at("id").get_to(p.id);
    j.at("env_id").get_to(p.env_id);
    j.at("path").get_to(p.path);
    j.at("instruction").get_to(p.instruction);
    j.at("goal").get_to(p.goal);
}

}  // namespace vlnbias

namespace vlnbias::navgraph {

double distance(const Vec3& a, const Vec3& b) {
    const double dx = a.x - b.x;
    const double dy = a.y - b.y;
    const double dz = a.z - b.z;
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

Axis parse_axis(std::string_view text) {
    if (text == "x" || text == "X") return Axis::X;
    if (text == "z" || text == "Z") return Axis::Z;
    throw ValidationError("unknown split axis '" + std::string(text) + "' (expected x or z)");
}

std::string_view to_string(Axis axis) { return axis == Axis::X ? "x" : "z"; }

std::size_t NavGraph::add_viewpoint(std::string id, Vec3 position) {
    if (index_.contains(id)) throw ValidationError("duplicate viewpoint id '" + id + "'");
    const std::size_t i = ids_.size();
    index_.emplace(id, i);
    ids_.push_back(std::move(id));
    positions_.push_back(position);
    adjacency_.emplace_back();
    return i;
}

void NavGraph::add_edge(std::size_t a, std::size_t b) {
    add_edge(a, b, distance(position(a), position(b)));
}

void NavGraph::add_edge(std::size_t a, std::size_t b, double weight) {
    if (a >= size() || b >= size()) throw LookupError("edge endpoint out of range");
    if (a == b) throw ValidationError("self-loop on viewpoint '" + ids_[a] + "'");
    if (!(weight > 0.0) || !std::isfinite(weight)) {
        throw ValidationError("edge " + ids_[a] + "-" + ids_[b] + " has non-positive weight");
    }
    if (has_edge(a, b)) return;
    adjacency_[a].push_back({b, weight});
    adjacency_[b].push_back({a, weight});
}

std::size_t NavGraph::edge_count() const {
    std::size_t n = 0;
    for (const auto& adj : adjacency_) n += adj.size();
    return n / 2;
}

double NavGraph::coordinate(std::size_t i, Axis axis) const {
    const Vec3& p = position(i);
    return axis == Axis::X ? p.x : p.z;
}

bool NavGraph::has_edge(std::size_t a, std::size_t b) const {
    const auto& adj = adjacency_.at(a);
    return std::any_of(adj.begin(), adj.end(), [b](const Edge& e) { return e.to == b; });
}

std::optional<std::size_t> NavGraph::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t NavGraph::index_of(std::string_view id) const {
    if (auto i = find(id)) return *i;
    throw LookupError("unknown viewpoint '" + std::string(id) + "' in environment '" + env_id_ + "'");
}

const NavGraph& graph_for(const GraphIndex& graphs, std::string_view env_id) {
    auto it = graphs.find(env_id);
    if (it == graphs.end()) throw LookupError("unknown environment '" + std::string(env_id) + "'");
    return it->second;
}

namespace {

using QueueItem = std::pair<double, std::size_t>;
using MinQueue = std::priority_queue<QueueItem, std::vector<QueueItem>, std::greater<>>;

void relax_all(const NavGraph& graph, std::vector<double>& dist, MinQueue& queue,
               std::vector<std::size_t>* parent) {
    while (!queue.empty()) {
        const auto [d, u] = queue.top();
        queue.pop();
        if (d > dist[u]) continue;
        for (const Edge& e : graph.neighbors(u)) {
            const double nd = d + e.weight;
            if (nd < dist[e.to]) {
                dist[e.to] = nd;
                if (parent) (*parent)[e.to] = u;
                queue.emplace(nd, e.to);
            } else if (parent && nd == dist[e.to] && u < (*parent)[e.to]) {
                (*parent)[e.to] = u;
            }
        }
    }
}

}  // namespace

std::vector<double> shortest_lengths(const NavGraph& graph, std::size_t source) {
    if (source >= graph.size()) throw LookupError("source viewpoint out of range");
    const std::size_t sources[] = {source};
    return multi_source_lengths(graph, sources);
}

std::vector<double> shortest_lengths(const NavGraph& graph, std::string_view source_id) {
    return shortest_lengths(graph, graph.index_of(source_id));
}

std::vector<double> multi_source_lengths(const NavGraph& graph, std::span<const std::size_t> sources) {
    std::vector<double> dist(graph.size(), kInfinity);
    MinQueue queue;
    for (std::size_t s : sources) {
        if (s >= graph.size()) throw LookupError("source viewpoint out of range");
        dist[s] = 0.0;
        queue.emplace(0.0, s);
    }
    relax_all(graph, dist, queue, nullptr);
    return dist;
}

std::vector<std::size_t> shortest_path(const NavGraph& graph, std::size_t from, std::size_t to) {
    if (from >= graph.size() || to >= graph.size()) throw LookupError("path endpoint out of range");
    constexpr auto kNone = static_cast<std::size_t>(-1);
    std::vector<double> dist(graph.size(), kInfinity);
    std::vector<std::size_t> parent(graph.size(), kNone);
    MinQueue queue;
    dist[from] = 0.0;
    queue.emplace(0.0, from);
    relax_all(graph, dist, queue, &parent);
    if (!std::isfinite(dist[to])) return {};
    std::vector<std::size_t> path{to};
    while (path.back() != from) path.push_back(parent[path.back()]);
    std::reverse(path.begin(), path.end());
    return path;
}

bool is_connected(const NavGraph& graph) {
    if (graph.size() == 0) return true;
    const auto dist = shortest_lengths(graph, std::size_t{0});
    return std::all_of(dist.begin(), dist.end(), [](double d) { return std::isfinite(d); });
}

namespace {

void require_training(std::span<const PathDatum> training) {
    if (training.empty()) throw DomainError("training set is empty; locality distances undefined");
}

std::vector<std::size_t> training_sources(std::span<const PathDatum> training, const NavGraph& graph) {
    std::vector<std::size_t> sources;
    for (const PathDatum& t : training) {
        if (t.env_id != graph.env_id()) continue;
        for (const auto& vp : t.path) sources.push_back(graph.index_of(vp));
    }
    std::sort(sources.begin(), sources.end());
    sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
    return sources;
}

}  // namespace

double dis_viewpoint(std::size_t v, std::span<const PathDatum> training, const NavGraph& graph) {
    require_training(training);
    const auto sources = training_sources(training, graph);
    if (sources.empty()) return kInfinity;
    const auto dist = shortest_lengths(graph, v);
    double best = kInfinity;
    for (std::size_t s : sources) best = std::min(best, dist[s]);
    return best;
}

double dis_path(const PathDatum& x, std::span<const PathDatum> training, const NavGraph& graph) {
    require_training(training);
    if (x.env_id != graph.env_id()) return kInfinity;
    double worst = 0.0;
    for (const auto& vp : x.path) worst = std::max(worst, dis_viewpoint(graph.index_of(vp), training, graph));
    return worst;
}

DistanceTable build_distance_table(const GraphIndex& graphs, std::span<const PathDatum> training,
                                   std::span<const PathDatum> items) {
    require_training(training);
    DistanceTable table;
    for (const auto& [env_id, graph] : graphs) {
        const auto sources = training_sources(training, graph);
        table.dis_viewpoint[env_id] = sources.empty() ? std::vector<double>(graph.size(), kInfinity)
                                                      : multi_source_lengths(graph, sources);
    }
    for (const PathDatum& x : items) {
        auto it = table.dis_viewpoint.find(x.env_id);
        if (it == table.dis_viewpoint.end()) {
            throw LookupError("episode '" + x.id + "' references unknown environment '" + x.env_id + "'");
        }
        const NavGraph& graph = graph_for(graphs, x.env_id);
        double worst = 0.0;
        for (const auto& vp : x.path) worst = std::max(worst, it->second[graph.index_of(vp)]);
        table.dis_path[x.id] = worst;
    }
    return table;
}

// --- splitting -------------------------------------------------------------

std::string_view to_string(SplitCategory c) {
    switch (c) {
        case SplitCategory::Train: return "train";
        case SplitCategory::PathSeen: return "path_seen";
        case SplitCategory::PathUnseen: return "path_unseen";
        case SplitCategory::EnvUnseen: return "env_unseen";
    }
    return "?";
}

SplitCategory parse_split_category(std::string_view text) {
    for (auto c : {SplitCategory::Train, SplitCategory::PathSeen, SplitCategory::PathUnseen,
                   SplitCategory::EnvUnseen}) {
        if (to_string(c) == text) return c;
    }
    throw ValidationError("unknown split category '" + std::string(text) + "'");
}

std::vector<std::string> SplitAssignment::items_in(SplitCategory c) const {
    std::vector<std::string> out;
    for (const auto& [id, cat] : split_items) {
        if (cat == c) out.push_back(id);
    }
    return out;
}

SplitAssignment structural_split(const GraphIndex& graphs, const SplitInput& input, Axis axis,
                                 const std::map<std::string, double>& cuts) {
    static const std::set<std::string> kEmpty;
    const auto& original_train = input.original_train_ids ? *input.original_train_ids : kEmpty;
    const auto& heldout = input.heldout_envs ? *input.heldout_envs : kEmpty;

    SplitAssignment out;
    out.axis = axis;

    // Training side per environment that has episodes to split.
    std::map<std::string, std::vector<bool>> training_side;
    for (const PathDatum& x : input.episodes) {
        if (heldout.contains(x.env_id) || training_side.contains(x.env_id)) continue;
        const NavGraph& graph = graph_for(graphs, x.env_id);
        auto cut = cuts.find(x.env_id);
        if (cut == cuts.end()) throw ValidationError("no cut given for environment '" + x.env_id + "'");
        std::vector<bool> side(graph.size());
        bool any = false;
        for (std::size_t i = 0; i < graph.size(); ++i) {
            side[i] = graph.coordinate(i, axis) < cut->second;
            any = any || side[i];
        }
        if (!any) {
            throw SplitError("cut " + std::to_string(cut->second) + " leaves environment '" + x.env_id +
                             "' with an empty training side");
        }
        out.cuts[x.env_id] = cut->second;
        training_side.emplace(x.env_id, std::move(side));
    }

    // Pass 1: TRAIN episodes and the viewpoints they cover.
    for (const PathDatum& x : input.episodes) {
        if (heldout.contains(x.env_id)) {
            out.split_items[x.id] = SplitCategory::EnvUnseen;
            continue;
        }
        if (!original_train.contains(x.id)) continue;
        const NavGraph& graph = graph_for(graphs, x.env_id);
        const auto& side = training_side.at(x.env_id);
        const bool inside = std::all_of(x.path.begin(), x.path.end(),
                                        [&](const std::string& vp) { return side[graph.index_of(vp)]; });
        if (!inside) continue;
        out.split_items[x.id] = SplitCategory::Train;
        out.training_viewpoints[x.env_id].insert(x.path.begin(), x.path.end());
    }
    if (std::none_of(out.split_items.begin(), out.split_items.end(),
                     [](const auto& kv) { return kv.second == SplitCategory::Train; })) {
        throw SplitError("structural split produced no TRAIN episodes");
    }

    // Pass 2: everything else in the split environments.
    for (const PathDatum& x : input.episodes) {
        if (out.split_items.contains(x.id)) continue;
        const auto tv = out.training_viewpoints.find(x.env_id);
        const bool touches =
            tv != out.training_viewpoints.end() &&
            std::any_of(x.path.begin(), x.path.end(), [&](const std::string& vp) { return tv->second.contains(vp); });
        out.split_items[x.id] = touches ? SplitCategory::PathSeen : SplitCategory::PathUnseen;
    }
    return out;
}

SplitAssignment structural_split(const NavGraph& graph, std::span<const PathDatum> episodes,
                                 const std::set<std::string>& original_train_ids, Axis axis, double cut) {
    GraphIndex graphs;
    graphs.emplace(graph.env_id(), graph);
    for (const PathDatum& x : episodes) {
        if (x.env_id != graph.env_id()) {
            throw ValidationError("episode '" + x.id + "' is not in environment '" + graph.env_id() + "'");
        }
    }
    SplitInput input{episodes, &original_train_ids, nullptr};
    return structural_split(graphs, input, axis, {{graph.env_id(), cut}});
}

double choose_cut(const NavGraph& graph, Axis axis, double target_fraction) {
    if (!(target_fraction > 0.0 && target_fraction < 1.0)) {
        throw DomainError("target fraction must lie in (0, 1)");
    }
    if (graph.size() == 0) throw DomainError("cannot choose a cut on an empty graph");
    std::vector<double> coords(graph.size());
    for (std::size_t i = 0; i < graph.size(); ++i) coords[i] = graph.coordinate(i, axis);
    std::sort(coords.begin(), coords.end());

    const double n = static_cast<double>(coords.size());
    double best_cut = coords.back() + 1.0;
    double best_err = std::abs(1.0 - target_fraction);
    // Candidate cuts sit midway between distinct neighbours; coords[i] < cut for
    // exactly i+1 points.
    for (std::size_t i = 0; i + 1 < coords.size(); ++i) {
        if (coords[i] == coords[i + 1]) continue;
        const double frac = static_cast<double>(i + 1) / n;
        const double err = std::abs(frac - target_fraction);
        if (err < best_err) {
            best_err = err;
            best_cut = 0.5 * (coords[i] + coords[i + 1]);
        }
    }
    return best_cut;
}

// --- JSON ------------------------------------------------------------------

namespace {

nlohmann::json meters_to_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
double meters_from_json(const nlohmann::json& j) { return j.is_null() ? kInfinity : j.get<double>(); }

}  // namespace

void to_json(nlohmann::json& j, const SplitAssignment& s) {
    nlohmann::json items = nlohmann::json::object();
    for (const auto& [id, c] : s.split_items) items[id] = to_string(c);
    j = nlohmann::json{{"schema_version", 1},
                       {"axis", to_string(s.axis)},
                       {"cuts", s.cuts},
                       {"training_viewpoints", s.training_viewpoints},
                       {"split_items", std::move(items)}};
}

void from_json(const nlohmann::json& j, SplitAssignment& s) {
    s.axis = parse_axis(j.at("axis").get<std::string>());
    j.at("cuts").get_to(s.cuts);
    j.at("training_viewpoints").get_to(s.training_viewpoints);
    s.split_items.clear();
    for (const auto& [id, c] : j.at("split_items").items()) {
        s.split_items[id] = parse_split_category(c.get<std::string>());
    }
}

void to_json(nlohmann::json& j, const DistanceTable& t) {
    nlohmann::json paths = nlohmann::json::object();
    for (const auto& [id, d] : t.dis_path) paths[id] = meters_to_json(d);
    nlohmann::json views = nlohmann::json::object();
    for (const auto& [env, ds] : t.dis_viewpoint) {
        nlohmann::json arr = nlohmann::json::array();
        for (double d : ds) arr.push_back(meters_to_json(d));
        views[env] = std::move(arr);
    }
    j = nlohmann::json{{"schema_version", 1}, {"dis_path", std::move(paths)}, {"dis_viewpoint", std::move(views)}};
}

void from_json(const nlohmann::json& j, DistanceTable& t) {
    t = {};
    for (const auto& [id, d] : j.at("dis_path").items()) t.dis_path[id] = meters_from_json(d);
    for (const auto& [env, arr] : j.at("dis_viewpoint").items()) {
        auto& out = t.dis_viewpoint[env];
        for (const auto& d : arr) out.push_back(meters_from_json(d));
    }
}

}  // namespace vlnbias::navgraph
