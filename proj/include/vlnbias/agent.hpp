#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vlnbias/episode.hpp"
#include "vlnbias/featurize.hpp"
#include "vlnbias/navgraph.hpp"
#include "vlnbias/neuralcore.hpp"

namespace vlnbias::agent {

using neuralcore::ParamSet;
using neuralcore::Tape;
using neuralcore::Tensor;
using neuralcore::Var;

inline constexpr int kDirEncodingDim = 4;
inline constexpr double kEdgeLengthScale = 5.0;

struct AgentDims {
    int vocab = 0;
    int embed = 32;
    int hidden = 64;
    int feature_dim = 0;
    int projection = 64;

    int candidate_dim() const { return feature_dim + kDirEncodingDim; }
};

// emb (vocab x embed), W_e, U_e, b_e (encoder); W_a (attention); W_f, W_c
// (candidate / context projections); W_u, b_u (state update); stop (the
// STOP action's candidate vector).
ParamSet make_agent_params(const AgentDims& dims, std::uint64_t seed);
AgentDims agent_dims(const ParamSet& params);

// Parameter nodes recorded once per tape.
struct AgentVars {
    Var emb, W_e, U_e, b_e, W_a, W_f, W_c, W_u, b_u, stop;
};
AgentVars record_params(Tape& tape, const ParamSet& params);

// h_i = tanh(W_e emb(t_i) + U_e h_{i-1} + b_e), h_0 = 0; one row per token.
Var encode_instruction(Tape& tape, const AgentVars& p, std::span<const Token> tokens);

struct DecodeOutput {
    Var scores;      // 1 x (K + 1); the last column is STOP
    Var attended;    // 1 x hidden
    Var candidates;  // (K + 1) x candidate_dim, STOP row last
};

// alpha = softmax(contexts W_a u); c = alpha^T contexts;
// score_j = (W_f [f_j; dir_j]) . (W_c [u; c]).
DecodeOutput decode_step(Tape& tape, const AgentVars& p, Var state, Var contexts, const Tensor& candidates);

// u' = tanh(W_u [u; c; f_chosen] + b_u).
Var next_state(Tape& tape, const AgentVars& p, Var state, const DecodeOutput& step, int chosen);

// sin/cos of the heading change, sign of the height change, edge length / 5 m.
std::array<double, kDirEncodingDim> relative_direction(const navgraph::Vec3& from, const navgraph::Vec3& to,
                                                       double heading_degrees);

// Navigation graphs plus one feature row per (env, viewpoint, direction).
struct NavContext {
    const navgraph::GraphIndex* graphs = nullptr;
    const featurize::FeatureTable* features = nullptr;
};

struct AgentHyper {
    int batch = 32;
    int epochs = 60;
    double lr = 0.05;
    double clip_norm = 5.0;
    AgentDims dims;  // vocab and feature_dim are filled from the data when 0
};

struct TrainedAgent {
    ParamSet params;
    std::vector<double> loss_curve;  // mean per-episode loss per epoch
};

// Teacher-forced imitation: every step's ground-truth move (STOP at the goal)
// is the cross-entropy target and the state follows the ground truth.
// Throws TrainingError at the first batch with a non-finite loss.
TrainedAgent train_imitation(std::span<const PathDatum> episodes, const NavContext& ctx, const AgentHyper& hyper,
                             std::uint64_t seed);

// Summed teacher-forced loss of one episode, recorded on `tape`.
Var episode_loss(Tape& tape, const AgentVars& p, const PathDatum& episode, const NavContext& ctx);

// Teacher-forced next-action accuracy over all steps of the episodes.
double teacher_forced_accuracy(const ParamSet& params, std::span<const PathDatum> episodes, const NavContext& ctx);

enum class Termination { Stop, MaxSteps };

struct Trajectory {
    std::string episode_id;
    std::string env_id;
    std::vector<std::string> visited;  // starts with the start viewpoint
    std::vector<std::string> actions;  // neighbour id per move, "STOP" last when stopped
    Termination terminated_by = Termination::MaxSteps;
};

inline constexpr int kDefaultMaxSteps = 20;
inline constexpr const char* kStopAction = "STOP";

// Greedy decoding; ties go to the lowest action index. `score_offset` is added
// to every score (used to check shift invariance).
Trajectory rollout(const ParamSet& params, const NavContext& ctx, const PathDatum& episode,
                   int max_steps = kDefaultMaxSteps, double score_offset = 0.0);

}  // namespace vlnbias::agent
