#include <gtest/gtest.h>

#include <cmath>

#include "vlnbias/agent.hpp"

using namespace vlnbias;
using namespace vlnbias::agent;

namespace {

Tensor random_tensor(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Tensor t(r, c);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, 0.5);
    return t;
}

struct Toy {
    worldgen::World world;
    navgraph::GraphIndex graphs;
    featurize::FeatureTable table;
    std::vector<PathDatum> episodes;

    NavContext ctx() const { return {&graphs, &table}; }
};

Toy make_toy(std::size_t episodes, featurize::FeatureKind kind = featurize::FeatureKind::LowLevel) {
    worldgen::WorldSpec spec;
    spec.num_envs = 1;
    spec.rooms_per_env = {3, 3};
    spec.viewpoints_per_room = {3, 3};
    spec.seed = 12;
    Toy t;
    t.world = worldgen::generate_world(spec);
    t.graphs = t.world.graphs();
    featurize::FeaturizerConfig fc;
    fc.kind = kind;
    t.table = featurize::build_feature_table(t.world, featurize::Featurizer(t.world, fc));
    worldgen::EpisodeRequest req;
    req.count = episodes;
    req.path_edges = {2, 4};
    t.episodes = worldgen::sample_episodes(t.world, req, 3);
    return t;
}

AgentDims toy_dims(const Toy& t) {
    AgentDims d;
    d.vocab = worldgen::vocabulary_size(t.world.spec.room_types);
    d.feature_dim = t.table.dim();
    d.embed = 8;
    d.hidden = 12;
    d.projection = 10;
    return d;
}

Tensor softmax_row(const Tensor& x) {
    Tensor e = (x.array() - x.maxCoeff()).exp().matrix();
    return e / e.sum();
}

}  // namespace

TEST(EncodeInstruction, SingleTokenHandValue) {
    AgentDims d{5, 3, 4, 2, 3};
    const auto params = make_agent_params(d, 1);
    Tape tape;
    const auto p = record_params(tape, params);
    const std::vector<Token> tokens{2};
    const Var h = encode_instruction(tape, p, tokens);
    ASSERT_EQ(h.rows(), 1);
    const Tensor emb = params.at("emb").row(2);
    const Tensor expected = (params.at("W_e") * emb.transpose()).transpose() + params.at("b_e");
    EXPECT_TRUE(h.value().isApprox(expected.array().tanh().matrix(), 1e-12));
}

TEST(EncodeInstruction, ZeroParamsGiveZeroContexts) {
    const auto params = make_agent_params({6, 4, 5, 3, 4}, 2).zeros_like();
    Tape tape;
    const auto p = record_params(tape, params);
    const std::vector<Token> tokens{1, 3, 5, 2};
    const Var h = encode_instruction(tape, p, tokens);
    EXPECT_EQ(h.rows(), 4);
    EXPECT_TRUE(h.value().isZero());
}

TEST(EncodeInstruction, UnknownTokenThrows) {
    const auto params = make_agent_params({6, 4, 5, 3, 4}, 2);
    Tape tape;
    const auto p = record_params(tape, params);
    const std::vector<Token> tokens{1, 6};
    EXPECT_THROW(encode_instruction(tape, p, tokens), ValidationError);
}

TEST(DecodeStep, OneCandidatePlusStop) {
    const AgentDims d{6, 4, 5, 3, 4};
    const auto params = make_agent_params(d, 3);
    Tape tape;
    const auto p = record_params(tape, params);
    const std::vector<Token> tokens{1, 2};
    const Var ctx = encode_instruction(tape, p, tokens);
    const Var u = row(ctx, 1);
    const auto out = decode_step(tape, p, u, ctx, Tensor::Ones(1, d.candidate_dim()));
    EXPECT_EQ(out.scores.cols(), 2);
}

TEST(DecodeStep, ZeroParamsGiveUniformActions) {
    const AgentDims d{6, 4, 5, 3, 4};
    const auto params = make_agent_params(d, 3).zeros_like();
    Tape tape;
    const auto p = record_params(tape, params);
    const std::vector<Token> tokens{1, 2, 3};
    const Var ctx = encode_instruction(tape, p, tokens);
    Rng rng(1);
    const auto out = decode_step(tape, p, row(ctx, 2), ctx, random_tensor(rng, 3, d.candidate_dim()));
    EXPECT_NEAR(neuralcore::cross_entropy(out.scores, 1).scalar(), std::log(4.0), 1e-12);
}

TEST(DecodeStep, TwoCandidateHandLinearAlgebra) {
    const AgentDims d{5, 3, 4, 2, 3};
    const auto params = make_agent_params(d, 4);
    Rng rng(2);
    const Tensor cands = random_tensor(rng, 2, d.candidate_dim());
    Tape tape;
    const auto p = record_params(tape, params);
    const std::vector<Token> tokens{3, 0, 4};
    const Var ctx = encode_instruction(tape, p, tokens);
    const Var u = row(ctx, 2);
    const auto out = decode_step(tape, p, u, ctx, cands);

    const Tensor C = ctx.value();
    const Tensor uu = u.value();
    const Tensor logits = (C * (params.at("W_a") * uu.transpose())).transpose();
    const Tensor alpha = softmax_row(logits);
    const Tensor c = alpha * C;
    Tensor uc(1, 2 * d.hidden);
    uc << uu, c;
    const Tensor g = params.at("W_c") * uc.transpose();
    Tensor all(3, d.candidate_dim());
    all << cands, params.at("stop");
    const Tensor expected = (all * params.at("W_f").transpose() * g).transpose();
    EXPECT_TRUE(out.attended.value().isApprox(c, 1e-12));
    EXPECT_TRUE(out.scores.value().isApprox(expected, 1e-12));
}

TEST(DecodeStep, RejectsBadCandidates) {
    const AgentDims d{5, 3, 4, 2, 3};
    const auto params = make_agent_params(d, 4);
    Tape tape;
    const auto p = record_params(tape, params);
    const std::vector<Token> tokens{1};
    const Var ctx = encode_instruction(tape, p, tokens);
    EXPECT_THROW(decode_step(tape, p, row(ctx, 0), ctx, Tensor(0, d.candidate_dim())), ValidationError);
    EXPECT_THROW(decode_step(tape, p, row(ctx, 0), ctx, Tensor::Ones(1, d.candidate_dim() + 1)), ValidationError);
}

TEST(DecodeStep, GradientMatchesFiniteDifferences) {
    const AgentDims d{7, 4, 6, 3, 5};
    const auto params = make_agent_params(d, 5);
    Rng rng(3);
    const Tensor c1 = random_tensor(rng, 3, d.candidate_dim());
    const Tensor c2 = random_tensor(rng, 2, d.candidate_dim());
    const std::vector<Token> tokens{2, 5, 1, 6};
    const neuralcore::ModelClosure model = [&](const ParamSet& ps, ParamSet* grads) {
        Tape tape(grads != nullptr);
        const auto p = record_params(tape, ps);
        const Var ctx = encode_instruction(tape, p, tokens);
        const auto step = decode_step(tape, p, row(ctx, 3), ctx, c1);
        const Var u2 = next_state(tape, p, row(ctx, 3), step, 1);
        const auto step2 = decode_step(tape, p, u2, ctx, c2);
        const Var loss = neuralcore::add(neuralcore::cross_entropy(step.scores, 1),
                                         neuralcore::cross_entropy(step2.scores, 2));
        if (grads != nullptr) {
            auto r = neuralcore::forward_backward(tape, loss, ps);
            *grads = std::move(r.grads);
            return r.loss;
        }
        return loss.scalar();
    };
    const auto check = neuralcore::grad_check(model, params, 1e-4, 1e-4, 7, 120);
    EXPECT_LT(check.max_relative_error, 1e-4) << check.worst_parameter;
}

TEST(RelativeDirection, HeadingAndHeight) {
    const auto e = relative_direction({0, 0, 0}, {0, 5, 0}, 0.0);
    EXPECT_NEAR(e[0], 0.0, 1e-12);
    EXPECT_NEAR(e[1], 1.0, 1e-12);
    EXPECT_EQ(e[2], 0.0);
    EXPECT_NEAR(e[3], 1.0, 1e-12);
    const auto r = relative_direction({0, 0, 0}, {2, 0, 3}, 0.0);
    EXPECT_NEAR(r[0], 1.0, 1e-12);
    EXPECT_EQ(r[2], 1.0);
}

TEST(TrainImitation, OverfitsFiveEpisodes) {
    const auto toy = make_toy(5);
    AgentHyper h;
    h.batch = 5;
    h.epochs = 200;
    h.dims = toy_dims(toy);
    const auto trained = train_imitation(toy.episodes, toy.ctx(), h, 1);
    EXPECT_EQ(trained.loss_curve.size(), 200u);
    EXPECT_LT(trained.loss_curve.back(), trained.loss_curve.front());
    EXPECT_GE(teacher_forced_accuracy(trained.params, toy.episodes, toy.ctx()), 0.99);

    int reached = 0;
    for (const auto& ep : toy.episodes) {
        const auto t = rollout(trained.params, toy.ctx(), ep);
        reached += t.visited.back() == ep.goal ? 1 : 0;
    }
    EXPECT_GE(reached, 4);
}

TEST(TrainImitation, SameSeedSameCheckpoint) {
    const auto toy = make_toy(6);
    AgentHyper h;
    h.batch = 4;
    h.epochs = 3;
    h.dims = toy_dims(toy);
    EXPECT_EQ(neuralcore::encode_checkpoint(train_imitation(toy.episodes, toy.ctx(), h, 9).params),
              neuralcore::encode_checkpoint(train_imitation(toy.episodes, toy.ctx(), h, 9).params));
}

TEST(TrainImitation, DivergenceRaisesTrainingError) {
    const auto toy = make_toy(4);
    AgentHyper h;
    h.batch = 2;
    h.epochs = 5;
    h.lr = 1e300;
    h.clip_norm = 1e300;
    h.dims = toy_dims(toy);
    EXPECT_THROW(train_imitation(toy.episodes, toy.ctx(), h, 1), TrainingError);
}

TEST(Rollout, AlwaysStopAgent) {
    const auto toy = make_toy(3, featurize::FeatureKind::Zero);
    AgentDims d = toy_dims(toy);
    auto params = make_agent_params(d, 1).zeros_like();
    // Every hidden unit is tanh(1); STOP projects to +1 on one axis and the
    // zero-feature candidates project to 0.
    params.at("b_e").setConstant(1.0);
    params.at("W_c")(0, 0) = 1.0;
    params.at("W_f")(0, 0) = 1.0;
    params.at("stop")(0, 0) = 1.0;
    for (const auto& ep : toy.episodes) {
        const auto t = rollout(params, toy.ctx(), ep);
        EXPECT_EQ(t.visited, std::vector<std::string>{ep.path.front()});
        EXPECT_EQ(t.actions, std::vector<std::string>{kStopAction});
        EXPECT_EQ(t.terminated_by, Termination::Stop);
    }
}

TEST(Rollout, EdgesValidAndStepLimit) {
    const auto toy = make_toy(10);
    AgentDims d = toy_dims(toy);
    const auto params = make_agent_params(d, 7);
    for (const auto& ep : toy.episodes) {
        const auto t = rollout(params, toy.ctx(), ep, 6);
        EXPECT_EQ(t.visited.front(), ep.path.front());
        EXPECT_LE(t.visited.size(), 7u);
        const auto& g = navgraph::graph_for(toy.graphs, ep.env_id);
        for (std::size_t i = 1; i < t.visited.size(); ++i) {
            EXPECT_TRUE(g.has_edge(g.index_of(t.visited[i - 1]), g.index_of(t.visited[i])));
        }
        if (t.terminated_by == Termination::MaxSteps) {
            EXPECT_EQ(t.visited.size(), 7u);
        }
    }
}

TEST(Rollout, ArgmaxIgnoresConstantShift) {
    const auto toy = make_toy(10);
    const auto params = make_agent_params(toy_dims(toy), 8);
    for (const auto& ep : toy.episodes) {
        const auto a = rollout(params, toy.ctx(), ep, 10, 0.0);
        const auto b = rollout(params, toy.ctx(), ep, 10, 123.0);
        EXPECT_EQ(a.visited, b.visited);
        EXPECT_EQ(a.actions, b.actions);
    }
}
