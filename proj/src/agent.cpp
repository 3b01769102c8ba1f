#include "vlnbias/agent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vlnbias/worldgen.hpp"

namespace vlnbias::agent {

namespace nc = neuralcore;

namespace {

Tensor gaussian(int rows, int cols, double sd, Rng& rng) {
    Tensor t(rows, cols);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, sd);
    return t;
}

// Neighbour ids and feature rows of one viewpoint, in graph adjacency order.
struct CandidateSet {
    std::vector<std::size_t> neighbors;
    Tensor features;  // K x feature_dim
};

class CandidateCache {
public:
    explicit CandidateCache(const NavContext& ctx) : ctx_(ctx) {}

    const CandidateSet& get(const navgraph::NavGraph& graph, std::size_t v) {
        auto key = std::make_pair(graph.env_id(), v);
        auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
        CandidateSet set;
        const auto nbrs = graph.neighbors(v);
        const int dim = ctx_.features->dim();
        set.features.resize(static_cast<Eigen::Index>(nbrs.size()), dim);
        const auto& from = graph.position(v);
        for (std::size_t k = 0; k < nbrs.size(); ++k) {
            const auto& to = graph.position(nbrs[k].to);
            const int dir = static_cast<int>(worldgen::direction_of(to.x - from.x, to.y - from.y));
            const auto row = ctx_.features->get(graph.env_id(), graph.id(v), dir);
            for (int j = 0; j < dim; ++j) set.features(static_cast<Eigen::Index>(k), j) = row[static_cast<std::size_t>(j)];
            set.neighbors.push_back(nbrs[k].to);
        }
        return cache_.emplace(std::move(key), std::move(set)).first->second;
    }

private:
    const NavContext& ctx_;
    std::map<std::pair<std::string, std::size_t>, CandidateSet> cache_;
};

Tensor candidate_matrix(const navgraph::NavGraph& graph, std::size_t v, const CandidateSet& set, double heading) {
    const Eigen::Index k = set.features.rows();
    const Eigen::Index f = set.features.cols();
    Tensor out(k, f + kDirEncodingDim);
    out.leftCols(f) = set.features;
    for (Eigen::Index i = 0; i < k; ++i) {
        const auto enc = relative_direction(graph.position(v), graph.position(set.neighbors[static_cast<std::size_t>(i)]),
                                            heading);
        for (int j = 0; j < kDirEncodingDim; ++j) out(i, f + j) = enc[static_cast<std::size_t>(j)];
    }
    return out;
}

void update_heading(const navgraph::Vec3& from, const navgraph::Vec3& to, double& heading) {
    const double dx = to.x - from.x;
    const double dy = to.y - from.y;
    if (std::hypot(dx, dy) > 1e-9) heading = worldgen::bearing_degrees(dx, dy);
}

std::vector<int> token_ids(std::span<const Token> tokens, int vocab) {
    if (tokens.empty()) throw ValidationError("instruction has no tokens");
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (Token t : tokens) {
        if (t < 0 || t >= vocab) {
            throw ValidationError("token " + std::to_string(t) + " outside vocabulary of size " + std::to_string(vocab));
        }
        ids.push_back(static_cast<int>(t));
    }
    return ids;
}

void check_context(const NavContext& ctx) {
    if (ctx.graphs == nullptr || ctx.features == nullptr) throw ValidationError("navigation context is incomplete");
}

// Viewpoint indices of the path; throws ValidationError on broken paths.
std::vector<std::size_t> path_indices(const navgraph::NavGraph& graph, const PathDatum& ep) {
    if (ep.path.empty()) throw ValidationError("episode '" + ep.id + "' has an empty path");
    std::vector<std::size_t> idx;
    idx.reserve(ep.path.size());
    for (const auto& id : ep.path) {
        const auto found = graph.find(id);
        if (!found) throw ValidationError("episode '" + ep.id + "' references unknown viewpoint '" + id + "'");
        if (!idx.empty() && !graph.has_edge(idx.back(), *found)) {
            throw ValidationError("episode '" + ep.id + "' path step to '" + id + "' is not a graph edge");
        }
        idx.push_back(*found);
    }
    return idx;
}

int index_in(const CandidateSet& set, std::size_t target) {
    const auto it = std::find(set.neighbors.begin(), set.neighbors.end(), target);
    return static_cast<int>(it - set.neighbors.begin());
}

Var episode_loss_impl(Tape& tape, const AgentVars& p, const PathDatum& ep, const NavContext& ctx,
                      CandidateCache& cache, int* correct, int* steps) {
    const auto& graph = navgraph::graph_for(*ctx.graphs, ep.env_id);
    const auto idx = path_indices(graph, ep);
    const Var contexts = encode_instruction(tape, p, ep.instruction);
    Var state = row(contexts, contexts.rows() - 1);
    double heading = 0.0;
    std::vector<Var> losses;
    for (std::size_t s = 0; s < idx.size(); ++s) {
        const std::size_t v = idx[s];
        const auto& set = cache.get(graph, v);
        const DecodeOutput out = decode_step(tape, p, state, contexts, candidate_matrix(graph, v, set, heading));
        const int target = s + 1 < idx.size() ? index_in(set, idx[s + 1]) : static_cast<int>(set.neighbors.size());
        losses.push_back(nc::cross_entropy(out.scores, target));
        if (correct != nullptr) {
            Eigen::Index best = 0;
            out.scores.value().row(0).maxCoeff(&best);
            *correct += best == target ? 1 : 0;
            ++*steps;
        }
        if (s + 1 < idx.size()) {
            state = next_state(tape, p, state, out, target);
            update_heading(graph.position(v), graph.position(idx[s + 1]), heading);
        }
    }
    Var total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    return total;
}

}  // namespace

ParamSet make_agent_params(const AgentDims& d, std::uint64_t seed) {
    if (d.vocab < 1 || d.embed < 1 || d.hidden < 1 || d.feature_dim < 0 || d.projection < 1) {
        throw ValidationError("agent dimensions must be positive");
    }
    Rng rng(hash_combine(seed, hash_tag("agent_init")));
    const int h = d.hidden;
    const int cand = d.candidate_dim();
    auto scaled = [&](int rows, int cols) { return gaussian(rows, cols, 1.0 / std::sqrt(double(cols)), rng); };
    ParamSet p;
    p.add("emb", gaussian(d.vocab, d.embed, 1.0, rng));
    p.add("W_e", scaled(h, d.embed));
    p.add("U_e", scaled(h, h));
    p.add("b_e", Tensor::Zero(1, h));
    p.add("W_a", scaled(h, h));
    p.add("W_f", scaled(d.projection, cand));
    p.add("W_c", scaled(d.projection, 2 * h));
    p.add("W_u", scaled(h, 2 * h + cand));
    p.add("b_u", Tensor::Zero(1, h));
    p.add("stop", gaussian(1, cand, 1.0 / std::sqrt(double(cand)), rng));
    return p;
}

AgentDims agent_dims(const ParamSet& params) {
    AgentDims d;
    d.vocab = static_cast<int>(params.at("emb").rows());
    d.embed = static_cast<int>(params.at("emb").cols());
    d.hidden = static_cast<int>(params.at("W_e").rows());
    d.projection = static_cast<int>(params.at("W_f").rows());
    d.feature_dim = static_cast<int>(params.at("W_f").cols()) - kDirEncodingDim;
    return d;
}

AgentVars record_params(Tape& tape, const ParamSet& params) {
    return AgentVars{tape.parameter("emb", params.at("emb")), tape.parameter("W_e", params.at("W_e")),
                     tape.parameter("U_e", params.at("U_e")), tape.parameter("b_e", params.at("b_e")),
                     tape.parameter("W_a", params.at("W_a")), tape.parameter("W_f", params.at("W_f")),
                     tape.parameter("W_c", params.at("W_c")), tape.parameter("W_u", params.at("W_u")),
                     tape.parameter("b_u", params.at("b_u")), tape.parameter("stop", params.at("stop"))};
}

Var encode_instruction(Tape&, const AgentVars& p, std::span<const Token> tokens) {
    const auto ids = token_ids(tokens, static_cast<int>(p.emb.rows()));
    const Var inputs = matmul_nt(embedding(p.emb, ids), p.W_e);
    std::vector<Var> states;
    states.reserve(ids.size());
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(ids.size()); ++i) {
        Var pre = add_row_bias(row(inputs, i), p.b_e);
        if (!states.empty()) pre = add(pre, matmul_nt(states.back(), p.U_e));
        states.push_back(tanh(pre));
    }
    return stack_rows(states);
}

DecodeOutput decode_step(Tape& tape, const AgentVars& p, Var state, Var contexts, const Tensor& candidates) {
    const Eigen::Index cand_dim = p.stop.cols();
    if (candidates.rows() < 1) throw ValidationError("decode step needs at least one candidate");
    if (candidates.cols() != cand_dim) {
        throw ValidationError("candidate width " + std::to_string(candidates.cols()) + " does not match " +
                              std::to_string(cand_dim));
    }
    if (state.cols() != p.W_a.cols() || state.rows() != 1 || contexts.cols() != p.W_a.cols()) {
        throw ValidationError("decoder state or contexts do not match the hidden size");
    }
    const Var query = matmul_nt(state, p.W_a);
    const Var alpha = softmax_rows(matmul_nt(query, contexts));
    const Var attended = matmul(alpha, contexts);
    const Var cand = tape.constant(candidates);
    const std::array<Var, 2> rows{cand, p.stop};
    const Var all = stack_rows(rows);
    const std::array<Var, 2> uc{state, attended};
    const Var context_proj = matmul_nt(concat_cols(uc), p.W_c);
    const Var scores = matmul_nt(context_proj, matmul_nt(all, p.W_f));
    return DecodeOutput{scores, attended, all};
}

Var next_state(Tape&, const AgentVars& p, Var state, const DecodeOutput& step, int chosen) {
    if (chosen < 0 || chosen >= step.candidates.rows()) throw ValidationError("chosen action out of range");
    const std::array<Var, 3> parts{state, step.attended, row(step.candidates, chosen)};
    return tanh(add_row_bias(matmul_nt(concat_cols(parts), p.W_u), p.b_u));
}

std::array<double, kDirEncodingDim> relative_direction(const navgraph::Vec3& from, const navgraph::Vec3& to,
                                                       double heading_degrees) {
    const double dx = to.x - from.x;
    const double dy = to.y - from.y;
    const double dz = to.z - from.z;
    const double delta = (worldgen::bearing_degrees(dx, dy) - heading_degrees) * M_PI / 180.0;
    const double sign_z = dz > 1e-9 ? 1.0 : (dz < -1e-9 ? -1.0 : 0.0);
    return {std::sin(delta), std::cos(delta), sign_z, navgraph::distance(from, to) / kEdgeLengthScale};
}

Var episode_loss(Tape& tape, const AgentVars& p, const PathDatum& episode, const NavContext& ctx) {
    check_context(ctx);
    CandidateCache cache(ctx);
    return episode_loss_impl(tape, p, episode, ctx, cache, nullptr, nullptr);
}

TrainedAgent train_imitation(std::span<const PathDatum> episodes, const NavContext& ctx, const AgentHyper& hyper,
                             std::uint64_t seed) {
    check_context(ctx);
    if (episodes.empty()) throw ValidationError("no training episodes");
    if (hyper.batch < 1 || hyper.epochs < 0 || !(hyper.lr > 0.0)) throw ValidationError("invalid agent hyperparameters");
    AgentDims dims = hyper.dims;
    if (dims.feature_dim == 0) dims.feature_dim = ctx.features->dim();
    if (dims.feature_dim != ctx.features->dim()) throw ValidationError("feature dimension does not match the table");
    if (dims.vocab == 0) {
        Token top = 0;
        for (const auto& ep : episodes) {
            for (Token t : ep.instruction) top = std::max(top, t);
        }
        dims.vocab = static_cast<int>(top) + 1;
    }
    for (const auto& ep : episodes) path_indices(navgraph::graph_for(*ctx.graphs, ep.env_id), ep);

    TrainedAgent result;
    result.params = make_agent_params(dims, seed);
    CandidateCache cache(ctx);
    Rng order_rng(hash_combine(seed, hash_tag("agent_order")));
    std::vector<std::size_t> order(episodes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch));
            Tape tape;
            const AgentVars p = record_params(tape, result.params);
            Var total = episode_loss_impl(tape, p, episodes[order[start]], ctx, cache, nullptr, nullptr);
            for (std::size_t b = start + 1; b < end; ++b) {
                total = add(total, episode_loss_impl(tape, p, episodes[order[b]], ctx, cache, nullptr, nullptr));
            }
            const Var loss = scale(total, 1.0 / static_cast<double>(end - start));
            if (!std::isfinite(loss.scalar())) {
                throw TrainingError("non-finite agent loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                                    std::to_string(start));
            }
            const auto lg = nc::forward_backward(tape, loss, result.params);
            nc::sgd_step(result.params, lg.grads, hyper.lr, hyper.clip_norm);
            epoch_loss += lg.loss * static_cast<double>(end - start);
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(episodes.size()));
    }
    return result;
}

double teacher_forced_accuracy(const ParamSet& params, std::span<const PathDatum> episodes, const NavContext& ctx) {
    check_context(ctx);
    CandidateCache cache(ctx);
    int correct = 0;
    int steps = 0;
    for (const auto& ep : episodes) {
        Tape tape(false);
        const AgentVars p = record_params(tape, params);
        episode_loss_impl(tape, p, ep, ctx, cache, &correct, &steps);
    }
    return steps == 0 ? 0.0 : static_cast<double>(correct) / steps;
}

Trajectory rollout(const ParamSet& params, const NavContext& ctx, const PathDatum& episode, int max_steps,
                   double score_offset) {
    check_context(ctx);
    const auto& graph = navgraph::graph_for(*ctx.graphs, episode.env_id);
    if (episode.path.empty()) throw ValidationError("episode '" + episode.id + "' has no start viewpoint");
    std::size_t v = graph.index_of(episode.path.front());

    Trajectory traj;
    traj.episode_id = episode.id;
    traj.env_id = episode.env_id;
    traj.visited.push_back(graph.id(v));

    CandidateCache cache(ctx);
    Tape tape(false);
    const AgentVars p = record_params(tape, params);
    const Var contexts = encode_instruction(tape, p, episode.instruction);
    Var state = row(contexts, contexts.rows() - 1);
    double heading = 0.0;
    for (int step = 0; step < max_steps; ++step) {
        const auto& set = cache.get(graph, v);
        const DecodeOutput out = decode_step(tape, p, state, contexts, candidate_matrix(graph, v, set, heading));
        const Eigen::Index n = out.scores.cols();
        Eigen::Index best = 0;
        for (Eigen::Index j = 1; j < n; ++j) {
            if (out.scores.value()(0, j) + score_offset > out.scores.value()(0, best) + score_offset) best = j;
        }
        if (best == n - 1) {
            traj.actions.emplace_back(kStopAction);
            traj.terminated_by = Termination::Stop;
            return traj;
        }
        const std::size_t next = set.neighbors[static_cast<std::size_t>(best)];
        state = next_state(tape, p, state, out, static_cast<int>(best));
        update_heading(graph.position(v), graph.position(next), heading);
        v = next;
        traj.actions.push_back(graph.id(v));
        traj.visited.push_back(graph.id(v));
    }
    traj.terminated_by = Termination::MaxSteps;
    return traj;
}

}  // namespace vlnbias::agent
