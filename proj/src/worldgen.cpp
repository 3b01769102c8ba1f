#include "vlnbias/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "vlnbias/common.hpp"

namespace vlnbias::worldgen {

using navgraph::NavGraph;

namespace {

constexpr double kCellSize = 6.0;
constexpr double kIntraRoomRadius = 2.5;
constexpr double kSlotJitter = 0.25;
constexpr double kVerticalThreshold = 1.0;

}  // namespace

void WorldSpec::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ValidationError("invalid world spec: " + what);
    };
    require(num_envs >= 1, "num_envs must be >= 1");
    require(rooms_per_env.lo >= 1 && rooms_per_env.lo <= rooms_per_env.hi, "rooms_per_env must be a nonempty range >= 1");
    require(floors >= 1 && floors <= 2, "floors must be 1 or 2");
    require(viewpoints_per_room.lo >= 1 && viewpoints_per_room.lo <= viewpoints_per_room.hi,
            "viewpoints_per_room must be a nonempty range >= 1");
    require(semantic_classes >= 1, "semantic_classes must be >= 1");
    require(room_types >= 1, "room_types must be >= 1");
    require(style_dim >= 1, "style_dim must be >= 1");
    require(lowlevel_dim >= 1, "lowlevel_dim must be >= 1");
    require(std::isfinite(env_style_w) && env_style_w >= 0.0, "env_style_w must be finite and >= 0");
    require(std::isfinite(region_style_w) && region_style_w >= 0.0, "region_style_w must be finite and >= 0");
    require(std::isfinite(appearance_noise_sd) && appearance_noise_sd >= 0.0, "appearance_noise_sd must be >= 0");
    require(std::isfinite(within_room_variation) && within_room_variation >= 0.0,
            "within_room_variation must be >= 0");
    require(std::isfinite(semantic_gain) && semantic_gain >= 0.0, "semantic_gain must be >= 0");
}

bool operator==(const GlobalMixing& a, const GlobalMixing& b) {
    auto same = [](const Tensor& x, const Tensor& y) {
        return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
    };
    return same(a.W_sem, b.W_sem) && same(a.W_env, b.W_env) && same(a.W_reg, b.W_reg);
}

double bearing_degrees(double dx, double dy) {
    double deg = std::atan2(dx, dy) * 180.0 / M_PI;
    if (deg < 0.0) deg += 360.0;
    return deg;
}

Direction direction_of(double dx, double dy) {
    const double deg = bearing_degrees(dx, dy);
    return static_cast<Direction>(static_cast<int>(std::floor((deg + 45.0) / 90.0)) % kDirections);
}

void Environment::rebuild_graph() {
    graph = NavGraph(id);
    for (const auto& vp : viewpoints) graph.add_viewpoint(vp.id, vp.position);
    for (const auto& [a, b] : edges) graph.add_edge(static_cast<std::size_t>(a), static_cast<std::size_t>(b));
}

const Environment& World::env(std::string_view id) const {
    for (const auto& e : envs) {
        if (e.id == id) return e;
    }
    throw LookupError("unknown environment '" + std::string(id) + "'");
}

navgraph::GraphIndex World::graphs() const {
    navgraph::GraphIndex out;
    for (const auto& e : envs) out.emplace(e.id, e.graph);
    return out;
}

// --- generation ----------------------------------------------------------------

namespace {

std::string env_name(int e) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "env%02d", e);
    return buf;
}

std::string viewpoint_name(const std::string& env, int v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%s_v%03d", env.c_str(), v);
    return buf;
}

Tensor gaussian_matrix(int rows, int cols, double sd, Rng& rng) {
    Tensor t(rows, cols);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, sd);
    return t;
}

std::vector<double> gaussian_vector(int n, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (double& x : v) x = rng.normal();
    return v;
}

// Each room type concentrates its mass on a few signature classes with a thin
// tail everywhere else.
std::vector<std::vector<double>> room_type_semantics(const WorldSpec& spec, Rng& rng) {
    const int c = spec.semantic_classes;
    std::vector<std::vector<double>> out;
    for (int t = 0; t < spec.room_types; ++t) {
        std::vector<double> w(static_cast<std::size_t>(c));
        for (double& x : w) x = rng.gamma(0.3) * 0.2;
        const int signature = std::min(c, 3);
        for (int k = 0; k < signature; ++k) w[static_cast<std::size_t>(rng.uniform_int(0, c - 1))] += rng.gamma(2.0);
        const double total = std::accumulate(w.begin(), w.end(), 0.0);
        for (double& x : w) x /= total;
        out.push_back(std::move(w));
    }
    return out;
}

// Adds the shortest edges between components of `members` until they form one
// component. Only pairs accepted by `allowed` are considered.
template <class Allowed>
void connect_greedily(const std::vector<Viewpoint>& vps, const std::vector<int>& members,
                      std::vector<std::pair<int, int>>& edges, std::set<std::pair<int, int>>& edge_set,
                      Allowed allowed) {
    if (members.size() < 2) return;
    std::vector<int> comp(vps.size(), -1);
    auto relabel = [&] {
        std::vector<std::vector<int>> adj(vps.size());
        for (const auto& [a, b] : edges) {
            adj[static_cast<std::size_t>(a)].push_back(b);
            adj[static_cast<std::size_t>(b)].push_back(a);
        }
        std::fill(comp.begin(), comp.end(), -1);
        int label = 0;
        for (int m : members) {
            if (comp[static_cast<std::size_t>(m)] != -1) continue;
            std::vector<int> stack{m};
            comp[static_cast<std::size_t>(m)] = label;
            while (!stack.empty()) {
                const int u = stack.back();
                stack.pop_back();
                for (int w : adj[static_cast<std::size_t>(u)]) {
                    if (comp[static_cast<std::size_t>(w)] == -1) {
                        comp[static_cast<std::size_t>(w)] = label;
                        stack.push_back(w);
                    }
                }
            }
            ++label;
        }
        return label;
    };
    while (relabel() > 1) {
        double best = std::numeric_limits<double>::infinity();
        std::pair<int, int> pick{-1, -1};
        for (std::size_t i = 0; i < members.size(); ++i) {
            for (std::size_t j = i + 1; j < members.size(); ++j) {
                const int a = members[i];
                const int b = members[j];
                if (comp[static_cast<std::size_t>(a)] == comp[static_cast<std::size_t>(b)] || !allowed(a, b)) continue;
                const double d = navgraph::distance(vps[static_cast<std::size_t>(a)].position,
                                                    vps[static_cast<std::size_t>(b)].position);
                if (d < best) {
                    best = d;
                    pick = {a, b};
                }
            }
        }
        if (pick.first < 0) throw GenerationError("cannot connect viewpoints");
        edge_set.insert(std::minmax(pick.first, pick.second));
        edges.emplace_back(std::minmax(pick.first, pick.second));
    }
}

Environment generate_environment(const WorldSpec& spec, int e, const std::vector<std::vector<double>>& type_sem,
                                 std::uint64_t stream) {
    Rng layout_rng(hash_combine(stream, hash_tag("layout")));
    Rng style_rng(hash_combine(stream, hash_tag("style")));

    Environment env;
    env.id = env_name(e);
    env.env_style_vec = gaussian_vector(spec.style_dim, style_rng);

    const int n_rooms = layout_rng.uniform_int(spec.rooms_per_env.lo, spec.rooms_per_env.hi);
    const int n_floors = std::min(spec.floors, n_rooms);
    std::vector<std::pair<int, int>> grid_cells(static_cast<std::size_t>(n_rooms));
    std::vector<int> type_deck;
    for (int r = 0; r < n_rooms; ++r) {
        const int floor = r * n_floors / n_rooms;
        int first = 0;
        while (first * n_floors / n_rooms < floor) ++first;
        int on_floor = 0;
        while (first + on_floor < n_rooms && (first + on_floor) * n_floors / n_rooms == floor) ++on_floor;
        const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(on_floor))));
        const int slot = r - first;
        grid_cells[static_cast<std::size_t>(r)] = {slot % cols, slot / cols};

        Room room;
        room.room_id = r;
        if (type_deck.empty()) {
            type_deck.resize(static_cast<std::size_t>(spec.room_types));
            std::iota(type_deck.begin(), type_deck.end(), 0);
            for (std::size_t i = type_deck.size(); i > 1; --i) {
                std::swap(type_deck[i - 1], type_deck[static_cast<std::size_t>(
                                                layout_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
            }
        }
        room.room_type = type_deck.back();
        type_deck.pop_back();
        room.floor = floor;
        const double ox = slot % cols * kCellSize + layout_rng.uniform(-0.5, 0.5);
        const double oy = slot / cols * kCellSize + layout_rng.uniform(-0.5, 0.5);
        room.box = {ox, oy, ox + layout_rng.uniform(4.0, 5.0), oy + layout_rng.uniform(4.0, 5.0)};
        room.region_style_vec = gaussian_vector(spec.style_dim, style_rng);
        env.rooms.push_back(std::move(room));
    }

    std::vector<std::vector<int>> room_members(static_cast<std::size_t>(n_rooms));
    for (const Room& room : env.rooms) {
        const int n = layout_rng.uniform_int(spec.viewpoints_per_room.lo, spec.viewpoints_per_room.hi);
        const int slot_cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
        const int slot_rows = (n + slot_cols - 1) / slot_cols;
        std::vector<int> slots(static_cast<std::size_t>(slot_cols * slot_rows));
        std::iota(slots.begin(), slots.end(), 0);
        for (std::size_t i = slots.size(); i > 1; --i) {
            std::swap(slots[i - 1], slots[static_cast<std::size_t>(layout_rng.uniform_int(0, static_cast<int>(i) - 1))]);
        }
        const double cell_w = (room.box[2] - room.box[0]) / slot_cols;
        const double cell_h = (room.box[3] - room.box[1]) / slot_rows;
        for (int k = 0; k < n; ++k) {
            const int slot = slots[static_cast<std::size_t>(k)];
            Viewpoint vp;
            vp.id = viewpoint_name(env.id, static_cast<int>(env.viewpoints.size()));
            vp.position = {room.box[0] + (slot % slot_cols + 0.5) * cell_w + layout_rng.uniform(-kSlotJitter, kSlotJitter),
                           room.box[1] + (slot / slot_cols + 0.5) * cell_h + layout_rng.uniform(-kSlotJitter, kSlotJitter),
                           room.floor * kFloorHeight};
            vp.room_id = room.room_id;
            room_members[static_cast<std::size_t>(room.room_id)].push_back(static_cast<int>(env.viewpoints.size()));
            env.viewpoints.push_back(std::move(vp));
        }
    }

    std::set<std::pair<int, int>> edge_set;
    auto add_edge = [&](int a, int b) {
        const auto key = std::minmax(a, b);
        if (edge_set.insert(key).second) env.edges.emplace_back(key);
    };
    const auto& vps = env.viewpoints;
    auto dist = [&](int a, int b) {
        return navgraph::distance(vps[static_cast<std::size_t>(a)].position, vps[static_cast<std::size_t>(b)].position);
    };

    // Intra-room edges, then make every room internally connected.
    for (const auto& members : room_members) {
        for (std::size_t i = 0; i < members.size(); ++i) {
            for (std::size_t j = i + 1; j < members.size(); ++j) {
                if (dist(members[i], members[j]) <= kIntraRoomRadius) add_edge(members[i], members[j]);
            }
        }
        connect_greedily(vps, members, env.edges, edge_set, [](int, int) { return true; });
    }

    // One doorway per pair of grid-adjacent rooms on the same floor.
    for (int a = 0; a < n_rooms; ++a) {
        for (int b = a + 1; b < n_rooms; ++b) {
            const Room& ra = env.rooms[static_cast<std::size_t>(a)];
            const Room& rb = env.rooms[static_cast<std::size_t>(b)];
            const auto [ax, ay] = grid_cells[static_cast<std::size_t>(a)];
            const auto [bx, by] = grid_cells[static_cast<std::size_t>(b)];
            if (ra.floor != rb.floor || std::abs(ax - bx) + std::abs(ay - by) != 1) continue;
            double best = std::numeric_limits<double>::infinity();
            std::pair<int, int> pick{-1, -1};
            for (int u : room_members[static_cast<std::size_t>(a)]) {
                for (int w : room_members[static_cast<std::size_t>(b)]) {
                    if (dist(u, w) < best) {
                        best = dist(u, w);
                        pick = {u, w};
                    }
                }
            }
            add_edge(pick.first, pick.second);
        }
    }

    // Stairs and any remaining gaps.
    std::vector<int> everyone(vps.size());
    std::iota(everyone.begin(), everyone.end(), 0);
    connect_greedily(vps, everyone, env.edges, edge_set, [](int, int) { return true; });
    std::sort(env.edges.begin(), env.edges.end());
    env.rebuild_graph();

    // Views: each direction looks into the room of its nearest neighbour in
    // that quadrant (own room when the quadrant is empty).
    env.semantics.resize(vps.size() * kDirections);
    env.view_region.resize(vps.size() * kDirections);
    const int c = spec.semantic_classes;
    for (std::size_t v = 0; v < vps.size(); ++v) {
        for (int d = 0; d < kDirections; ++d) {
            int region = vps[v].room_id;
            double best = std::numeric_limits<double>::infinity();
            for (const auto& edge : env.graph.neighbors(v)) {
                const Vec3& p = vps[edge.to].position;
                const Vec3& q = vps[v].position;
                if (static_cast<int>(direction_of(p.x - q.x, p.y - q.y)) != d) continue;
                if (edge.weight < best) {
                    best = edge.weight;
                    region = vps[edge.to].room_id;
                }
            }
            const std::size_t view = v * kDirections + static_cast<std::size_t>(d);
            env.view_region[view] = region;

            Rng sem_rng(hash_combine(hash_combine(stream, hash_tag("semantics")), view));
            const auto& base = type_sem[static_cast<std::size_t>(env.rooms[static_cast<std::size_t>(region)].room_type)];
            std::vector<double> s(static_cast<std::size_t>(c));
            double total = 0.0;
            for (int k = 0; k < c; ++k) {
                s[static_cast<std::size_t>(k)] = base[static_cast<std::size_t>(k)] *
                                                 std::exp(spec.within_room_variation * sem_rng.normal());
                total += s[static_cast<std::size_t>(k)];
            }
            const double background =
                std::clamp(0.15 + 0.1 * spec.within_room_variation * sem_rng.normal(), 0.0, 0.6);
            for (double& x : s) x = x / total * (1.0 - background);
            env.semantics[view] = std::move(s);
        }
    }
    return env;
}

}  // namespace

World generate_world(const WorldSpec& spec) {
    spec.validate();
    World world;
    world.spec = spec;

    Rng mixing_rng(hash_combine(spec.seed, hash_tag("global_mixing")));
    const double style_sd = 1.0 / std::sqrt(static_cast<double>(spec.style_dim));
    world.global_mixing.W_sem = gaussian_matrix(spec.lowlevel_dim, spec.semantic_classes, spec.semantic_gain, mixing_rng);
    world.global_mixing.W_env = gaussian_matrix(spec.lowlevel_dim, spec.style_dim, style_sd, mixing_rng);
    world.global_mixing.W_reg = gaussian_matrix(spec.lowlevel_dim, spec.style_dim, style_sd, mixing_rng);

    Rng type_rng(hash_combine(spec.seed, hash_tag("room_types")));
    const auto type_sem = room_type_semantics(spec, type_rng);

    for (int e = 0; e < spec.num_envs; ++e) {
        world.envs.push_back(generate_environment(spec, e, type_sem, hash_combine(spec.seed, 1000 + e)));
    }
    return world;
}

// --- instructions ------------------------------------------------------------------

int vocabulary_size(int room_types, int synonyms) { return kFirstRoomToken + room_types * synonyms; }

Token room_token(int room_type, int synonym, int synonyms) {
    return kFirstRoomToken + room_type * synonyms + synonym;
}

std::string token_name(Token t, int synonyms) {
    switch (t) {
        case kPad: return "<pad>";
        case kEos: return "<eos>";
        case kLeft: return "left";
        case kRight: return "right";
        case kStraight: return "straight";
        case kUp: return "up";
        case kDown: return "down";
        default: break;
    }
    const int r = t - kFirstRoomToken;
    return "room" + std::to_string(r / synonyms) + "_" + std::to_string(r % synonyms);
}

Token step_direction(const Vec3& from, const Vec3& to, double& heading_degrees) {
    const double dx = to.x - from.x;
    const double dy = to.y - from.y;
    const double dz = to.z - from.z;
    const bool horizontal = std::hypot(dx, dy) > 1e-9;
    Token token;
    if (dz > kVerticalThreshold) {
        token = kUp;
    } else if (dz < -kVerticalThreshold) {
        token = kDown;
    } else {
        double delta = horizontal ? bearing_degrees(dx, dy) - heading_degrees : 0.0;
        while (delta > 180.0) delta -= 360.0;
        while (delta <= -180.0) delta += 360.0;
        token = std::abs(delta) <= 45.0 ? kStraight : (delta > 0.0 ? kRight : kLeft);
    }
    if (horizontal) heading_degrees = bearing_degrees(dx, dy);
    return token;
}

TokenSeq render_instruction(const World& world, const PathDatum& path, const InstructionNoise& noise,
                            std::uint64_t seed) {
    if (path.path.size() < 2) throw ValidationError("episode '" + path.id + "' has fewer than two viewpoints");
    if (noise.synonyms < 1) throw ValidationError("synonym count must be >= 1");
    const Environment& env = world.env(path.env_id);
    Rng rng(hash_combine(hash_combine(seed, hash_tag("instruction")), hash_tag(path.id)));

    TokenSeq clean;
    double heading = 0.0;
    for (std::size_t i = 1; i < path.path.size(); ++i) {
        const std::size_t a = env.viewpoint_index(path.path[i - 1]);
        const std::size_t b = env.viewpoint_index(path.path[i]);
        clean.push_back(step_direction(env.viewpoints[a].position, env.viewpoints[b].position, heading));
        const int type = env.rooms[static_cast<std::size_t>(env.viewpoints[b].room_id)].room_type;
        clean.push_back(room_token(type, rng.uniform_int(0, noise.synonyms - 1), noise.synonyms));
    }

    const Token last_content = vocabulary_size(world.spec.room_types, noise.synonyms) - 1;
    TokenSeq out;
    for (Token t : clean) {
        if (!rng.bernoulli(noise.dropout)) out.push_back(t);
        if (rng.bernoulli(noise.insertion)) out.push_back(rng.uniform_int(kLeft, last_content));
    }
    if (out.empty()) out.push_back(clean.front());
    return out;
}

// --- episodes ------------------------------------------------------------------------

std::vector<PathDatum> sample_episodes(const World& world, const EpisodeRequest& request, std::uint64_t seed) {
    if (world.envs.empty()) throw ValidationError("world has no environments");
    if (request.path_edges.lo < 1 || request.path_edges.lo > request.path_edges.hi) {
        throw ValidationError("path length range must be nonempty and >= 1");
    }
    std::vector<const Environment*> pool;
    if (request.env_ids.empty()) {
        for (const auto& e : world.envs) pool.push_back(&e);
    } else {
        for (const auto& id : request.env_ids) pool.push_back(&world.env(id));
    }

    Rng rng(hash_combine(seed, hash_tag("episodes")));
    std::vector<PathDatum> out;
    out.reserve(request.count);
    for (std::size_t k = 0; k < request.count; ++k) {
        const Environment& env = *pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
        const int n = static_cast<int>(env.viewpoints.size());
        std::vector<std::size_t> route;
        for (int attempt = 0; attempt < request.retry_budget && route.empty(); ++attempt) {
            const auto start = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
            const auto goal = static_cast<std::size_t>(rng.uniform_int(0, n - 1));
            if (start == goal) continue;
            auto candidate = navgraph::shortest_path(env.graph, start, goal);
            const int edges = static_cast<int>(candidate.size()) - 1;
            if (edges >= request.path_edges.lo && edges <= request.path_edges.hi) route = std::move(candidate);
        }
        if (route.empty()) {
            throw GenerationError("retry budget exhausted sampling a path of " + std::to_string(request.path_edges.lo) +
                                  "-" + std::to_string(request.path_edges.hi) + " edges in environment '" + env.id +
                                  "'");
        }
        PathDatum p;
        p.id = request.id_prefix + std::to_string(k);
        p.env_id = env.id;
        for (std::size_t v : route) p.path.push_back(env.viewpoints[v].id);
        p.goal = p.path.back();
        p.instruction = render_instruction(world, p, request.noise, rng.next_u64());
        out.push_back(std::move(p));
    }
    return out;
}

// --- views ------------------------------------------------------------------------------

namespace {

void check_direction(int direction) {
    if (direction < 0 || direction >= kDirections) {
        throw LookupError("unknown view direction " + std::to_string(direction));
    }
}

std::size_t env_index_of(const World& world, std::string_view env_id) {
    for (std::size_t i = 0; i < world.envs.size(); ++i) {
        if (world.envs[i].id == env_id) return i;
    }
    throw LookupError("unknown environment '" + std::string(env_id) + "'");
}

}  // namespace

const std::vector<double>& ground_truth_semantics(const World& world, std::string_view env_id,
                                                  std::string_view viewpoint, int direction) {
    check_direction(direction);
    const Environment& env = world.env(env_id);
    return env.view_semantics(env.viewpoint_index(viewpoint), direction);
}

std::vector<double> low_level_appearance(const World& world, std::string_view env_id, std::string_view viewpoint,
                                         int direction, std::uint64_t seed) {
    const std::size_t e = env_index_of(world, env_id);
    return low_level_appearance(world, e, world.envs[e].viewpoint_index(viewpoint), direction, seed);
}

std::vector<double> low_level_appearance(const World& world, std::size_t env_index, std::size_t viewpoint,
                                         int direction, std::uint64_t seed) {
    check_direction(direction);
    const Environment& env = world.envs.at(env_index);
    if (viewpoint >= env.viewpoints.size()) throw LookupError("viewpoint index out of range");
    const auto& spec = world.spec;
    const auto& mix = world.global_mixing;
    const std::size_t view = viewpoint * kDirections + static_cast<std::size_t>(direction);
    const auto& s = env.semantics[view];
    const auto& g_env = env.env_style_vec;
    const auto& g_reg = env.rooms[static_cast<std::size_t>(env.view_region[view])].region_style_vec;

    const std::uint64_t key = hash_combine(hash_combine(hash_combine(seed, hash_tag(env.id)), viewpoint),
                                           static_cast<std::uint64_t>(direction));
    std::vector<double> x(static_cast<std::size_t>(spec.lowlevel_dim));
    for (int i = 0; i < spec.lowlevel_dim; ++i) {
        double pre = 0.0;
        for (int k = 0; k < spec.semantic_classes; ++k) pre += mix.W_sem(i, k) * s[static_cast<std::size_t>(k)];
        for (int k = 0; k < spec.style_dim; ++k) {
            pre += spec.env_style_w * mix.W_env(i, k) * g_env[static_cast<std::size_t>(k)];
            pre += spec.region_style_w * mix.W_reg(i, k) * g_reg[static_cast<std::size_t>(k)];
        }
        if (spec.appearance_noise_sd > 0.0) {
            // Box-Muller on two counter-based uniforms.
            const std::uint64_t ki = hash_combine(key, static_cast<std::uint64_t>(i));
            const double u1 = std::max(hash_uniform(ki), 1e-300);
            const double u2 = hash_uniform(ki ^ 0x5851f42d4c957f2dULL);
            pre += spec.appearance_noise_sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
        }
        x[static_cast<std::size_t>(i)] = std::tanh(pre);
    }
    return x;
}

// --- serialization ----------------------------------------------------------------------

namespace {

nlohmann::json tensor_to_json(const Tensor& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
        std::vector<double> row(t.row(r).data(), t.row(r).data() + t.cols());
        rows.push_back(row);
    }
    return rows;
}

Tensor tensor_from_json(const nlohmann::json& j) {
    const auto rows = j.get<std::vector<std::vector<double>>>();
    Tensor t(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (static_cast<Eigen::Index>(rows[r].size()) != t.cols()) throw LoadError("ragged matrix in world file");
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            t(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
        }
    }
    return t;
}

const std::set<std::string>& spec_keys() {
    static const std::set<std::string> keys = {
        "num_envs",       "rooms_per_env",  "floors",      "viewpoints_per_room", "semantic_classes",
        "room_types",     "style_dim",      "lowlevel_dim", "env_style_w",        "region_style_w",
        "appearance_noise_sd", "within_room_variation", "semantic_gain", "seed"};
    return keys;
}

}  // namespace

void to_json(nlohmann::json& j, const WorldSpec& s) {
    j = nlohmann::json{{"num_envs", s.num_envs},
                       {"rooms_per_env", {s.rooms_per_env.lo, s.rooms_per_env.hi}},
                       {"floors", s.floors},
                       {"viewpoints_per_room", {s.viewpoints_per_room.lo, s.viewpoints_per_room.hi}},
                       {"semantic_classes", s.semantic_classes},
                       {"room_types", s.room_types},
                       {"style_dim", s.style_dim},
                       {"lowlevel_dim", s.lowlevel_dim},
                       {"env_style_w", s.env_style_w},
                       {"region_style_w", s.region_style_w},
                       {"appearance_noise_sd", s.appearance_noise_sd},
                       {"within_room_variation", s.within_room_variation},
                       {"semantic_gain", s.semantic_gain},
                       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, WorldSpec& s) {
    if (!j.is_object()) throw ConfigError("world spec must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!spec_keys().contains(key)) throw ConfigError("unknown world spec key '" + key + "'");
    }
    auto range = [](const nlohmann::json& v) {
        const auto a = v.get<std::vector<int>>();
        if (a.size() != 2) throw ConfigError("range fields take [lo, hi]");
        return IntRange{a[0], a[1]};
    };
    if (j.contains("num_envs")) j.at("num_envs").get_to(s.num_envs);
    if (j.contains("rooms_per_env")) s.rooms_per_env = range(j.at("rooms_per_env"));
    if (j.contains("floors")) j.at("floors").get_to(s.floors);
    if (j.contains("viewpoints_per_room")) s.viewpoints_per_room = range(j.at("viewpoints_per_room"));
    if (j.contains("semantic_classes")) j.at("semantic_classes").get_to(s.semantic_classes);
    if (j.contains("room_types")) j.at("room_types").get_to(s.room_types);
    if (j.contains("style_dim")) j.at("style_dim").get_to(s.style_dim);
    if (j.contains("lowlevel_dim")) j.at("lowlevel_dim").get_to(s.lowlevel_dim);
    if (j.contains("env_style_w")) j.at("env_style_w").get_to(s.env_style_w);
    if (j.contains("region_style_w")) j.at("region_style_w").get_to(s.region_style_w);
    if (j.contains("appearance_noise_sd")) j.at("appearance_noise_sd").get_to(s.appearance_noise_sd);
    if (j.contains("within_room_variation")) j.at("within_room_variation").get_to(s.within_room_variation);
    if (j.contains("semantic_gain")) j.at("semantic_gain").get_to(s.semantic_gain);
    if (j.contains("seed")) j.at("seed").get_to(s.seed);
}

void to_json(nlohmann::json& j, const World& w) {
    nlohmann::json envs = nlohmann::json::array();
    for (const auto& e : w.envs) {
        nlohmann::json vps = nlohmann::json::array();
        for (const auto& v : e.viewpoints) {
            vps.push_back({{"id", v.id}, {"x", v.position.x}, {"y", v.position.y}, {"z", v.position.z},
                           {"room_id", v.room_id}});
        }
        nlohmann::json rooms = nlohmann::json::array();
        for (const auto& r : e.rooms) {
            rooms.push_back({{"room_id", r.room_id},
                             {"room_type", r.room_type},
                             {"floor", r.floor},
                             {"box", r.box},
                             {"region_style_vec", r.region_style_vec}});
        }
        envs.push_back({{"id", e.id},
                        {"viewpoints", std::move(vps)},
                        {"edges", e.edges},
                        {"rooms", std::move(rooms)},
                        {"env_style_vec", e.env_style_vec},
                        {"semantics", e.semantics},
                        {"view_region", e.view_region}});
    }
    j = nlohmann::json{{"schema_version", kWorldSchemaVersion},
                       {"spec", w.spec},
                       {"envs", std::move(envs)},
                       {"global_mixing",
                        {{"W_sem", tensor_to_json(w.global_mixing.W_sem)},
                         {"W_env", tensor_to_json(w.global_mixing.W_env)},
                         {"W_reg", tensor_to_json(w.global_mixing.W_reg)}}}};
}

void from_json(const nlohmann::json& j, World& w) {
    if (j.at("schema_version").get<int>() != kWorldSchemaVersion) throw LoadError("unsupported world schema version");
    w = World{};
    j.at("spec").get_to(w.spec);
    for (const auto& je : j.at("envs")) {
        Environment e;
        je.at("id").get_to(e.id);
        for (const auto& jv : je.at("viewpoints")) {
            Viewpoint v;
            jv.at("id").get_to(v.id);
            v.position = {jv.at("x").get<double>(), jv.at("y").get<double>(), jv.at("z").get<double>()};
            jv.at("room_id").get_to(v.room_id);
            e.viewpoints.push_back(std::move(v));
        }
        je.at("edges").get_to(e.edges);
        for (const auto& jr : je.at("rooms")) {
            Room r;
            jr.at("room_id").get_to(r.room_id);
            jr.at("room_type").get_to(r.room_type);
            jr.at("floor").get_to(r.floor);
            jr.at("box").get_to(r.box);
            jr.at("region_style_vec").get_to(r.region_style_vec);
            e.rooms.push_back(std::move(r));
        }
        je.at("env_style_vec").get_to(e.env_style_vec);
        je.at("semantics").get_to(e.semantics);
        je.at("view_region").get_to(e.view_region);
        e.rebuild_graph();
        w.envs.push_back(std::move(e));
    }
    const auto& jm = j.at("global_mixing");
    w.global_mixing.W_sem = tensor_from_json(jm.at("W_sem"));
    w.global_mixing.W_env = tensor_from_json(jm.at("W_env"));
    w.global_mixing.W_reg = tensor_from_json(jm.at("W_reg"));
}

std::string world_to_string(const World& world) { return nlohmann::json(world).dump(); }

World world_from_string(std::string_view text) {
    try {
        return nlohmann::json::parse(text).get<World>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("malformed world document: ") + e.what());
    }
}

}  // namespace vlnbias::worldgen
