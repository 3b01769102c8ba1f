#include <gtest/gtest.h>

#include <cmath>
#include <queue>

#include "vlnbias/worldgen.hpp"

using namespace vlnbias;
using namespace vlnbias::worldgen;

namespace {

WorldSpec small_spec(std::uint64_t seed = 1) {
    WorldSpec s;
    s.num_envs = 3;
    s.rooms_per_env = {4, 5};
    s.viewpoints_per_room = {2, 4};
    s.seed = seed;
    return s;
}

// Independent BFS edge count on the raw edge list.
int hop_distance(const Environment& env, std::size_t from, std::size_t to) {
    std::vector<std::vector<std::size_t>> adj(env.viewpoints.size());
    for (auto [a, b] : env.edges) {
        adj[static_cast<std::size_t>(a)].push_back(static_cast<std::size_t>(b));
        adj[static_cast<std::size_t>(b)].push_back(static_cast<std::size_t>(a));
    }
    std::vector<int> d(env.viewpoints.size(), -1);
    std::queue<std::size_t> q;
    d[from] = 0;
    q.push(from);
    while (!q.empty()) {
        const auto v = q.front();
        q.pop();
        for (auto n : adj[v])
            if (d[n] < 0) {
                d[n] = d[v] + 1;
                q.push(n);
            }
    }
    return d[to];
}

// Independent Dijkstra over the raw positions.
double path_metres(const Environment& env, std::size_t from, std::size_t to) {
    const std::size_t n = env.viewpoints.size();
    std::vector<double> d(n, kInfinity);
    std::vector<bool> done(n, false);
    d[from] = 0.0;
    for (std::size_t it = 0; it < n; ++it) {
        std::size_t best = n;
        for (std::size_t v = 0; v < n; ++v)
            if (!done[v] && (best == n || d[v] < d[best])) best = v;
        done[best] = true;
        for (auto [a, b] : env.edges) {
            auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
            if (ub == best) std::swap(ua, ub);
            if (ua != best) continue;
            const double w = navgraph::distance(env.viewpoints[ua].position, env.viewpoints[ub].position);
            d[ub] = std::min(d[ub], d[best] + w);
        }
    }
    return d[to];
}

PathDatum two_step(const Environment& env, std::size_t a, std::size_t b) {
    PathDatum p;
    p.id = "probe";
    p.env_id = env.id;
    p.path = {env.viewpoints[a].id, env.viewpoints[b].id};
    p.goal = p.path.back();
    return p;
}

}  // namespace

TEST(GenerateWorld, SmallSpecIsConnected) {
    WorldSpec s;
    s.num_envs = 1;
    s.rooms_per_env = {2, 2};
    s.viewpoints_per_room = {1, 2};
    s.seed = 7;
    const auto w = generate_world(s);
    ASSERT_EQ(w.envs.size(), 1u);
    const auto& env = w.envs.front();
    EXPECT_GE(env.viewpoints.size(), 2u);
    bool crosses = false;
    for (auto [a, b] : env.edges) {
        crosses |= env.viewpoints[static_cast<std::size_t>(a)].room_id != env.viewpoints[static_cast<std::size_t>(b)].room_id;
    }
    EXPECT_TRUE(crosses);
    EXPECT_TRUE(navgraph::is_connected(env.graph));
}

TEST(GenerateWorld, DeterministicBytes) {
    EXPECT_EQ(world_to_string(generate_world(small_spec(5))), world_to_string(generate_world(small_spec(5))));
    EXPECT_NE(world_to_string(generate_world(small_spec(5))), world_to_string(generate_world(small_spec(6))));
}

TEST(GenerateWorld, FloorsMapToHeights) {
    WorldSpec s = small_spec(3);
    s.rooms_per_env = {4, 4};
    s.floors = 2;
    const auto w = generate_world(s);
    for (const auto& env : w.envs) {
        for (const auto& room : env.rooms) EXPECT_TRUE(room.floor == 0 || room.floor == 1);
        for (const auto& vp : env.viewpoints) {
            const int floor = env.rooms[static_cast<std::size_t>(vp.room_id)].floor;
            EXPECT_DOUBLE_EQ(vp.position.z, floor * kFloorHeight);
        }
    }
}

TEST(GenerateWorld, InvalidSpecThrows) {
    WorldSpec s = small_spec();
    s.rooms_per_env = {0, 0};
    EXPECT_THROW(generate_world(s), ValidationError);
    s = small_spec();
    s.num_envs = 0;
    EXPECT_THROW(generate_world(s), ValidationError);
}

TEST(GenerateWorld, SerializationRoundTrip) {
    const auto w = generate_world(small_spec(9));
    EXPECT_EQ(world_from_string(world_to_string(w)), w);
}

TEST(WorldSpecJson, UnknownKeyRejected) {
    nlohmann::json j = WorldSpec{};
    j["mystery"] = 1;
    EXPECT_ANY_THROW(j.get<WorldSpec>());
}

TEST(SampleEpisodes, ZeroCountIsEmpty) {
    const auto w = generate_world(small_spec());
    EpisodeRequest r;
    r.count = 0;
    EXPECT_TRUE(sample_episodes(w, r, 1).empty());
}

TEST(SampleEpisodes, SingleEdgeRange) {
    const auto w = generate_world(small_spec());
    EpisodeRequest r;
    r.count = 40;
    r.path_edges = {1, 1};
    for (const auto& ep : sample_episodes(w, r, 2)) {
        ASSERT_EQ(ep.path.size(), 2u);
        const auto& g = w.env(ep.env_id).graph;
        EXPECT_TRUE(g.has_edge(g.index_of(ep.path[0]), g.index_of(ep.path[1])));
    }
}

TEST(SampleEpisodes, PathsAreShortestAndInRange) {
    const auto w = generate_world(small_spec(4));
    EpisodeRequest r;
    r.count = 50;
    r.path_edges = {2, 4};
    for (const auto& ep : sample_episodes(w, r, 3)) {
        const auto& env = w.env(ep.env_id);
        const auto s = env.viewpoint_index(ep.path.front());
        const auto g = env.viewpoint_index(ep.goal);
        const int edges = static_cast<int>(ep.path.size()) - 1;
        EXPECT_GE(edges, 2);
        EXPECT_LE(edges, 4);
        EXPECT_GE(edges, hop_distance(env, s, g));
        double length = 0.0;
        for (std::size_t i = 1; i < ep.path.size(); ++i) {
            length += navgraph::distance(env.viewpoints[env.viewpoint_index(ep.path[i - 1])].position,
                                         env.viewpoints[env.viewpoint_index(ep.path[i])].position);
        }
        EXPECT_NEAR(length, path_metres(env, s, g), 1e-9);
    }
}

TEST(SampleEpisodes, ExhaustedBudgetNamesEnvironment) {
    const auto w = generate_world(small_spec());
    EpisodeRequest r;
    r.count = 1;
    r.path_edges = {200, 300};
    r.retry_budget = 50;
    try {
        sample_episodes(w, r, 1);
        FAIL() << "expected GenerationError";
    } catch (const GenerationError& e) {
        bool named = false;
        for (const auto& env : w.envs) named |= std::string(e.what()).find("'" + env.id + "'") != std::string::npos;
        EXPECT_TRUE(named) << e.what();
    }
}

TEST(RenderInstruction, NoiselessIsRepeatable) {
    const auto w = generate_world(small_spec());
    EpisodeRequest r;
    r.count = 5;
    for (const auto& ep : sample_episodes(w, r, 8)) {
        const InstructionNoise clean{0.0, 0.0, 1};
        EXPECT_EQ(render_instruction(w, ep, clean, 1), render_instruction(w, ep, clean, 2));
    }
}

TEST(RenderInstruction, StraightStepOnOneFloor) {
    const auto w = generate_world(small_spec(2));
    bool found = false;
    for (const auto& env : w.envs) {
        for (auto [a, b] : env.edges) {
            const auto& pa = env.viewpoints[static_cast<std::size_t>(a)].position;
            const auto& pb = env.viewpoints[static_cast<std::size_t>(b)].position;
            if (pa.z != pb.z) continue;
            // Bearing from north within 45 degrees: dy dominates and is positive.
            const double dx = pb.x - pa.x;
            const double dy = pb.y - pa.y;
            if (!(dy > 0.0 && std::abs(dx) < dy)) continue;
            const auto tokens = render_instruction(w, two_step(env, static_cast<std::size_t>(a), static_cast<std::size_t>(b)),
                                                   {0.0, 0.0, 1}, 0);
            const int type = env.rooms[static_cast<std::size_t>(env.viewpoints[static_cast<std::size_t>(b)].room_id)].room_type;
            EXPECT_EQ(tokens, (TokenSeq{kStraight, room_token(type, 0, 1)}));
            found = true;
        }
    }
    EXPECT_TRUE(found);
}

TEST(RenderInstruction, AscendingStepSaysUp) {
    const auto w = generate_world(small_spec(2));
    bool found = false;
    for (const auto& env : w.envs) {
        for (auto [a, b] : env.edges) {
            auto lo = static_cast<std::size_t>(a);
            auto hi = static_cast<std::size_t>(b);
            if (env.viewpoints[lo].position.z == env.viewpoints[hi].position.z) continue;
            if (env.viewpoints[lo].position.z > env.viewpoints[hi].position.z) std::swap(lo, hi);
            const auto tokens = render_instruction(w, two_step(env, lo, hi), {0.0, 0.0, 3}, 0);
            EXPECT_EQ(tokens.front(), kUp);
            found = true;
        }
    }
    EXPECT_TRUE(found);
}

TEST(GroundTruthSemantics, AreasBounded) {
    const auto w = generate_world(small_spec());
    for (const auto& env : w.envs) {
        for (const auto& vp : env.viewpoints) {
            for (int d = 0; d < kDirections; ++d) {
                const auto& s = ground_truth_semantics(w, env.id, vp.id, d);
                double total = 0.0;
                for (double a : s) {
                    EXPECT_GE(a, 0.0);
                    total += a;
                }
                EXPECT_LE(total, 1.0 + 1e-12);
            }
        }
    }
}

TEST(GroundTruthSemantics, ZeroVariationGivesEqualViewsPerRoom) {
    WorldSpec s = small_spec(6);
    s.within_room_variation = 0.0;
    const auto w = generate_world(s);
    for (const auto& env : w.envs) {
        for (std::size_t i = 0; i < env.view_region.size(); ++i) {
            for (std::size_t j = i + 1; j < env.view_region.size(); ++j) {
                if (env.view_region[i] == env.view_region[j]) {
                    EXPECT_EQ(env.semantics[i], env.semantics[j]);
                }
            }
        }
    }
}

TEST(GroundTruthSemantics, UnknownIdsThrow) {
    const auto w = generate_world(small_spec());
    EXPECT_THROW(ground_truth_semantics(w, "nope", "x", 0), LookupError);
    EXPECT_THROW(ground_truth_semantics(w, w.envs[0].id, "nope", 0), LookupError);
}

TEST(LowLevelAppearance, StyleFreeIdenticalSemanticsMatchAcrossEnvs) {
    WorldSpec s = small_spec(8);
    s.env_style_w = 0.0;
    s.region_style_w = 0.0;
    s.appearance_noise_sd = 0.0;
    s.within_room_variation = 0.0;
    const auto w = generate_world(s);
    int matched = 0;
    const auto& e0 = w.envs[0];
    const auto& e1 = w.envs[1];
    for (std::size_t i = 0; i < e0.semantics.size() && matched < 10; ++i) {
        for (std::size_t j = 0; j < e1.semantics.size(); ++j) {
            if (e0.semantics[i] != e1.semantics[j]) continue;
            const auto a = low_level_appearance(w, 0, i / kDirections, static_cast<int>(i % kDirections), 1);
            const auto b = low_level_appearance(w, 1, j / kDirections, static_cast<int>(j % kDirections), 1);
            EXPECT_EQ(a, b);
            ++matched;
            break;
        }
    }
    EXPECT_GT(matched, 0);
}

TEST(LowLevelAppearance, TanhRange) {
    const auto w = generate_world(small_spec());
    for (std::size_t v = 0; v < w.envs[0].viewpoints.size(); ++v) {
        for (double x : low_level_appearance(w, 0, v, 0, 3)) {
            EXPECT_GT(x, -1.0);
            EXPECT_LT(x, 1.0);
        }
    }
}

TEST(LowLevelAppearance, EnvironmentStyleSeparatesMatchedViews) {
    WorldSpec s = small_spec(10);
    s.num_envs = 4;
    s.region_style_w = 0.0;
    s.within_room_variation = 0.0;
    const auto w = generate_world(s);
    auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
        double d = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(d);
    };
    double within = 0.0, across = 0.0;
    int n_within = 0, n_across = 0;
    for (std::size_t e = 0; e < w.envs.size() && (n_within < 100 || n_across < 100); ++e) {
        for (std::size_t f = e; f < w.envs.size(); ++f) {
            const auto& A = w.envs[e];
            const auto& B = w.envs[f];
            for (std::size_t i = 0; i < A.semantics.size(); ++i) {
                for (std::size_t j = (e == f ? i + 1 : 0); j < B.semantics.size(); ++j) {
                    if (A.semantics[i] != B.semantics[j]) continue;
                    const double d = dist(low_level_appearance(w, e, i / kDirections, static_cast<int>(i % kDirections), 0),
                                          low_level_appearance(w, f, j / kDirections, static_cast<int>(j % kDirections), 0));
                    if (e == f && n_within < 100) {
                        within += d;
                        ++n_within;
                    } else if (e != f && n_across < 100) {
                        across += d;
                        ++n_across;
                    }
                }
            }
        }
    }
    ASSERT_GT(n_within, 10);
    ASSERT_GT(n_across, 10);
    EXPECT_GT(across / n_across, within / n_within);
}

TEST(Directions, QuadrantsAndBearings) {
    EXPECT_EQ(direction_of(0.0, 1.0), Direction::North);
    EXPECT_EQ(direction_of(1.0, 0.0), Direction::East);
    EXPECT_EQ(direction_of(0.0, -1.0), Direction::South);
    EXPECT_EQ(direction_of(-1.0, 0.0), Direction::West);
    EXPECT_DOUBLE_EQ(bearing_degrees(1.0, 0.0), 90.0);
}

TEST(Vocabulary, RoomTokensFollowSpecials) {
    EXPECT_EQ(vocabulary_size(6, 3), kFirstRoomToken + 18);
    EXPECT_EQ(room_token(0, 0, 3), kFirstRoomToken);
    EXPECT_EQ(room_token(2, 1, 3), kFirstRoomToken + 7);
}
