#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "vlnbias/neuralcore.hpp"

using namespace vlnbias;
using namespace vlnbias::neuralcore;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Tensor t(r, c);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
    return t;
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(ForwardBackward, SumGivesOnes) {
    ParamSet params;
    params.add("p", Tensor::Constant(2, 3, 0.7));
    Tape tape;
    const Var p = tape.parameter("p", params.at("p"));
    const auto r = forward_backward(tape, sum(p), params);
    EXPECT_DOUBLE_EQ(r.loss, 4.2);
    EXPECT_TRUE(r.grads.at("p").isApprox(Tensor::Ones(2, 3)));
}

TEST(ForwardBackward, DotSelfGivesTwiceP) {
    std::mt19937_64 rng(1);
    ParamSet params;
    params.add("p", random_tensor(rng, 1, 5));
    Tape tape;
    const Var p = tape.parameter("p", params.at("p"));
    const auto r = forward_backward(tape, dot(p, p), params);
    EXPECT_TRUE(r.grads.at("p").isApprox(2.0 * params.at("p")));
}

TEST(ForwardBackward, EveryNodeVisitedOnce) {
    ParamSet params;
    params.add("p", Tensor::Constant(1, 3, 0.5));
    Tape tape;
    const Var p = tape.parameter("p", params.at("p"));
    const Var y = tanh(add(p, p));
    const Var loss = sum(y);
    tape.backward(loss);
    EXPECT_EQ(tape.backward_visits(), tape.size());
}

TEST(ForwardBackward, ShapeMismatchThrows) {
    Tape tape;
    const Var a = tape.constant(Tensor::Ones(2, 3));
    const Var b = tape.constant(Tensor::Ones(2, 2));
    EXPECT_THROW(matmul(a, b), ValidationError);
    EXPECT_THROW(add(a, b), ValidationError);
}

TEST(ForwardBackward, RandomThreeOpGraphsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        ParamSet params;
        params.add("W", random_tensor(rng, 4, 3, 0.5));
        params.add("x", random_tensor(rng, 1, 4));
        params.add("b", random_tensor(rng, 1, 3));
        const int variant = trial % 3;
        const ModelClosure model = [variant](const ParamSet& p, ParamSet* grads) {
            Tape tape(grads != nullptr);
            const Var W = tape.parameter("W", p.at("W"));
            const Var x = tape.parameter("x", p.at("x"));
            const Var b = tape.parameter("b", p.at("b"));
            Var h = add_row_bias(matmul(x, W), b);
            h = variant == 0 ? tanh(h) : variant == 1 ? sigmoid(h) : softmax_rows(h);
            const Var loss = dot(h, h);
            if (grads != nullptr) {
                auto r = forward_backward(tape, loss, p);
                *grads = std::move(r.grads);
                return r.loss;
            }
            return loss.scalar();
        };
        const auto check = grad_check(model, params, 1e-4, 1e-4, static_cast<std::uint64_t>(trial));
        EXPECT_LT(check.max_relative_error, 1e-4);
        EXPECT_TRUE(check.passed);
    }
}

TEST(MlpForward, ZeroParamsGiveHalf) {
    ParamSet params = make_mlp({3, 5, 4, 2}, 1).zeros_like();
    const Tensor y = mlp_forward(params, Tensor::Ones(1, 3));
    EXPECT_TRUE(y.isApprox(Tensor::Constant(1, 2, 0.5)));
}

TEST(MlpForward, InferenceIgnoresSeed) {
    const auto params = make_mlp({6, 8, 8, 3}, 2);
    std::mt19937_64 rng(3);
    const Tensor x = random_tensor(rng, 2, 6);
    EXPECT_EQ(mlp_forward(params, x, 0.3, false, 1), mlp_forward(params, x, 0.3, false, 99));
}

TEST(MlpForward, ScalarHandEvaluation) {
    ParamSet p;
    p.add("A1", Tensor::Constant(1, 1, 2.0));
    p.add("b1", Tensor::Constant(1, 1, -0.5));
    p.add("A2", Tensor::Constant(1, 1, -1.5));
    p.add("b2", Tensor::Constant(1, 1, 3.0));
    p.add("A3", Tensor::Constant(1, 1, 0.8));
    p.add("b3", Tensor::Constant(1, 1, -0.2));
    // f = 1.25: h1 = relu(2.5 - 0.5) = 2, h2 = relu(-3 + 3) = 0 -> sigmoid(-0.2).
    EXPECT_NEAR(mlp_forward(p, Tensor::Constant(1, 1, 1.25))(0, 0), sigmoid_scalar(-0.2), 1e-15);
    // f = 0.5: h1 = relu(0.5) = 0.5, h2 = relu(-0.75 + 3) = 2.25 -> sigmoid(1.6).
    EXPECT_NEAR(mlp_forward(p, Tensor::Constant(1, 1, 0.5))(0, 0), sigmoid_scalar(1.6), 1e-15);
}

TEST(MlpForward, DimensionMismatchThrows) {
    const auto params = make_mlp({6, 8, 8, 3}, 2);
    EXPECT_THROW(mlp_forward(params, Tensor::Ones(1, 5)), ValidationError);
}

TEST(MlpForward, GradientMatchesFiniteDifferences) {
    const auto params = make_mlp({10, 16, 12, 5}, 4);
    std::mt19937_64 rng(5);
    const Tensor x = random_tensor(rng, 3, 10);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor target(3, 5);
    for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = u(rng);
    const ModelClosure model = [&](const ParamSet& p, ParamSet* grads) {
        Tape tape(grads != nullptr);
        const Var y = mlp_forward(tape, p, tape.constant(x), 0.0, false, nullptr);
        const Var loss = bce(y, target);
        if (grads != nullptr) {
            auto r = forward_backward(tape, loss, p);
            *grads = std::move(r.grads);
            return r.loss;
        }
        return loss.scalar();
    };
    const auto check = grad_check(model, params, 1e-4, 1e-4, 9, 80);
    EXPECT_GE(check.coordinates_checked, 80u);
    EXPECT_LT(check.max_relative_error, 1e-4);
}

TEST(BceLoss, PerfectPredictionIsZero) {
    Tensor y(1, 4);
    y << 0.0, 1.0, 1.0, 0.0;
    EXPECT_NEAR(bce_loss(y, y), 0.0, 1e-9);
}

TEST(BceLoss, HalfPredictionIsNLog2) {
    Tensor t(1, 3);
    t << 0.1, 0.9, 0.4;
    EXPECT_NEAR(bce_loss(Tensor::Constant(1, 3, 0.5), t), 3.0 * std::log(2.0), 1e-12);
}

TEST(BceLoss, MatchesScalarLoop) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    Tensor y(2, 7);
    Tensor t(2, 7);
    double expected = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        y.data()[i] = u(rng);
        t.data()[i] = u(rng);
        expected -= t.data()[i] * std::log(y.data()[i]) + (1 - t.data()[i]) * std::log(1 - y.data()[i]);
    }
    EXPECT_NEAR(bce_loss(y, t), expected, 1e-12);
}

TEST(BceLoss, LengthMismatchThrows) {
    EXPECT_THROW(bce_loss(Tensor::Constant(1, 3, 0.5), Tensor::Constant(1, 2, 0.5)), ValidationError);
}

TEST(CrossEntropy, UniformScoresGiveLogK) {
    EXPECT_NEAR(cross_entropy(Tensor::Zero(1, 7), 3), std::log(7.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginNearZero) {
    Tensor s = Tensor::Zero(1, 4);
    s(0, 2) = 50.0;
    EXPECT_LT(cross_entropy(s, 2), 1e-15 + 4 * std::exp(-50.0));
}

TEST(CrossEntropy, FiveWayDirectFormula) {
    Tensor s(1, 5);
    s << 0.3, -1.2, 2.5, 0.0, 0.7;
    double z = 0.0;
    for (int i = 0; i < 5; ++i) z += std::exp(s(0, i));
    EXPECT_NEAR(cross_entropy(s, 4), -(0.7 - std::log(z)), 1e-12);
}

TEST(CrossEntropy, OutOfRangeThrows) {
    EXPECT_THROW(cross_entropy(Tensor::Zero(1, 3), 3), ValidationError);
}

TEST(SgdStep, ZeroGradientLeavesParams) {
    ParamSet p;
    p.add("w", Tensor::Constant(2, 2, 1.5));
    const ParamSet before = p;
    sgd_step(p, p.zeros_like(), 0.1, 5.0);
    EXPECT_EQ(p, before);
}

TEST(SgdStep, PlainStepBelowClip) {
    ParamSet p;
    p.add("w", Tensor::Constant(1, 2, 1.0));
    ParamSet g;
    g.add("w", (Tensor(1, 2) << 0.3, -0.4).finished());
    const double norm = sgd_step(p, g, 0.5, 5.0);
    EXPECT_DOUBLE_EQ(norm, 0.5);
    EXPECT_DOUBLE_EQ(p.at("w")(0, 0), 0.85);
    EXPECT_DOUBLE_EQ(p.at("w")(0, 1), 1.2);
}

TEST(SgdStep, DoubleNormHalvesStep) {
    ParamSet p;
    p.add("w", Tensor::Zero(1, 2));
    ParamSet g;
    g.add("w", (Tensor(1, 2) << 6.0, 8.0).finished());  // norm 10 = 2 x clip
    sgd_step(p, g, 1.0, 5.0);
    EXPECT_NEAR(p.at("w")(0, 0), -3.0, 1e-12);
    EXPECT_NEAR(p.at("w")(0, 1), -4.0, 1e-12);
}

TEST(SgdStep, NonFiniteGradientNamesParameter) {
    ParamSet p;
    p.add("good", Tensor::Zero(1, 1));
    p.add("bad", Tensor::Zero(1, 1));
    ParamSet g = p.zeros_like();
    g.at("bad")(0, 0) = std::nan("");
    try {
        sgd_step(p, g, 0.1, 1.0);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
    }
}

TEST(GradCheck, LinearModelIsExact) {
    ParamSet params;
    std::mt19937_64 rng(8);
    params.add("w", random_tensor(rng, 1, 60));
    const Tensor c = random_tensor(rng, 1, 60);
    const ModelClosure model = [&](const ParamSet& p, ParamSet* grads) {
        if (grads != nullptr) {
            *grads = p.zeros_like();
            grads->at("w") = c;
        }
        return (p.at("w").array() * c.array()).sum();
    };
    EXPECT_LT(grad_check(model, params, 1e-4, 1e-4).max_relative_error, 1e-8);
}

TEST(GradCheck, CorruptedBackwardIsCaught) {
    ParamSet params;
    std::mt19937_64 rng(10);
    params.add("w", random_tensor(rng, 1, 60));
    const ModelClosure model = [](const ParamSet& p, ParamSet* grads) {
        const Tensor& w = p.at("w");
        if (grads != nullptr) {
            *grads = p.zeros_like();
            // True derivative of sum(tanh(w)) is 1 - tanh^2; drop the square.
            grads->at("w") = (1.0 - w.array().tanh()).matrix();
        }
        return w.array().tanh().sum();
    };
    const auto check = grad_check(model, params, 1e-4, 1e-4);
    EXPECT_GT(check.max_relative_error, 1e-2);
    EXPECT_FALSE(check.passed);
}

TEST(Dropout, InvertedScaling) {
    Rng rng(3);
    const Tensor m = dropout_mask(200, 50, 0.3, rng);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        const double v = m.data()[i];
        EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.7) < 1e-12);
    }
    EXPECT_NEAR(m.mean(), 1.0, 0.03);
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto params = make_mlp({7, 9, 5, 3}, 11);
    const auto bytes = encode_checkpoint(params);
    EXPECT_EQ(bytes.compare(0, 8, std::string(kCheckpointMagic, 8)), 0);
    EXPECT_EQ(decode_checkpoint(bytes), params);
    const auto path = std::filesystem::temp_directory_path() / "vlnbias_ckpt_test.bin";
    save_checkpoint(path, params);
    EXPECT_EQ(load_checkpoint(path), params);
    std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedBytesRejected) {
    const auto bytes = encode_checkpoint(make_mlp({3, 4, 4, 2}, 1));
    EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 5)), LoadError);
    EXPECT_THROW(decode_checkpoint("not a checkpoint"), LoadError);
}
