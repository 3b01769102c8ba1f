#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "vlnbias/featurize.hpp"

using namespace vlnbias;
using namespace vlnbias::featurize;

namespace {

worldgen::WorldSpec spec_with(int envs, std::uint64_t seed) {
    worldgen::WorldSpec s;
    s.num_envs = envs;
    s.seed = seed;
    return s;
}

std::vector<std::string> env_ids(const World& w) {
    std::vector<std::string> ids;
    for (const auto& e : w.envs) ids.push_back(e.id);
    return ids;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return saa > 0.0 && sbb > 0.0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

SegHyper quick_hyper() {
    SegHyper h;
    h.epochs = 15;
    h.hidden1 = 128;
    h.hidden2 = 64;
    return h;
}

}  // namespace

TEST(ZeroFeatures, AllZero) {
    EXPECT_EQ(zero_features(4), (std::vector<double>{0, 0, 0, 0}));
}

TEST(FeatureKindNames, RoundTrip) {
    for (auto k : {FeatureKind::Zero, FeatureKind::LowLevel, FeatureKind::ClassProb, FeatureKind::Detection,
                   FeatureKind::GtSeg, FeatureKind::LearnedSeg}) {
        EXPECT_EQ(parse_feature_kind(to_string(k)), k);
    }
    EXPECT_THROW(parse_feature_kind("resnet"), ValidationError);
}

TEST(ClassProb, InfiniteTemperatureIsUniform) {
    const auto map = identity_block_label_map(4, 3, 8.0);
    const std::vector<double> s{0.5, 0.2, 0.1, 0.0};
    for (double p : classprob_features(s, map, kInfinity, 0.0, 1)) EXPECT_NEAR(p, 1.0 / 12.0, 1e-12);
}

TEST(ClassProb, SumsToOne) {
    const auto map = identity_block_label_map(5, 2, 8.0);
    const std::vector<double> s{0.1, 0.3, 0.05, 0.2, 0.0};
    const auto p = classprob_features(s, map, 1.0, 0.5, 7);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
}

TEST(ClassProb, ArgmaxFollowsDominantClass) {
    const auto map = identity_block_label_map(4, 2, 8.0);
    const std::vector<double> s{0.05, 0.1, 0.6, 0.2};
    const auto p = classprob_features(s, map, 1.0, 0.0, 0);
    const auto best = std::max_element(p.begin(), p.end()) - p.begin();
    EXPECT_EQ(best / 2, 2);
}

TEST(DetectionFeatures, NoDetectionsIsZero) {
    const std::vector<int> vocab{0, 3};
    EXPECT_EQ(detection_features({}, vocab), (std::vector<double>{0.0, 0.0}));
}

TEST(DetectionFeatures, ConfidenceWeightedAreas) {
    const int chair = 5;
    const std::vector<Detection> d{{chair, 0.2, 0.9}, {chair, 0.1, 0.5}, {99, 0.4, 1.0}};
    const std::vector<int> vocab{1, chair};
    const auto f = detection_features(d, vocab);
    EXPECT_EQ(f[0], 0.0);
    EXPECT_NEAR(f[1], 0.23, 1e-12);
}

TEST(SelectDetectionVocab, SingleLabel) {
    const std::vector<DetectionRecord> records{{{3, 0.2, 0.9}}, {{3, 0.5, 0.5}}};
    EXPECT_EQ(select_detection_vocab(records, 0.9), std::vector<int>{3});
}

TEST(SelectDetectionVocab, FullCoverageKeepsAllNonzero) {
    const std::vector<DetectionRecord> records{{{1, 0.2, 0.9}, {4, 0.1, 0.1}}, {{2, 0.3, 0.5}, {7, 0.0, 0.9}}};
    auto v = select_detection_vocab(records, 1.0);
    std::sort(v.begin(), v.end());
    EXPECT_EQ(v, (std::vector<int>{1, 2, 4}));
}

TEST(SelectDetectionVocab, DominantLabelAtHalfCoverage) {
    const std::vector<DetectionRecord> records{{{1, 0.9, 1.0}, {2, 0.1, 1.0}}};
    EXPECT_EQ(select_detection_vocab(records, 0.5), std::vector<int>{1});
}

TEST(SelectDetectionVocab, EmptyRecordsThrow) {
    EXPECT_THROW(select_detection_vocab(std::vector<DetectionRecord>{}, 0.5), DomainError);
}

TEST(SampleDetections, AreasSumToClassArea) {
    DetectionSampling params;
    params.distractor_rate = 0.0;
    const std::vector<double> s{0.3, 0.01, 0.25, 0.0};
    const auto rec = sample_detections(s, params, 4);
    std::vector<double> area(4, 0.0);
    for (const auto& d : rec) {
        area[static_cast<std::size_t>(d.label_id)] += d.area;
        EXPECT_GT(d.confidence, 0.0);
        EXPECT_LT(d.confidence, 1.0);
    }
    EXPECT_NEAR(area[0], 0.3, 1e-12);
    EXPECT_EQ(area[1], 0.0);
    EXPECT_NEAR(area[2], 0.25, 1e-12);
}

TEST(GtSeg, DelegatesToWorld) {
    const auto w = worldgen::generate_world(spec_with(2, 1));
    const auto& env = w.envs[1];
    const auto& vp = env.viewpoints[3].id;
    EXPECT_EQ(gtseg_features(w, env.id, vp, 2), worldgen::ground_truth_semantics(w, env.id, vp, 2));
    EXPECT_EQ(static_cast<int>(gtseg_features(w, env.id, vp, 0).size()), w.spec.semantic_classes);
    EXPECT_THROW(gtseg_features(w, env.id, "missing", 0), LookupError);
}

TEST(DefaultPartition, MirrorsRatio) {
    std::vector<std::string> envs;
    for (int i = 0; i < 6; ++i) envs.push_back("env_" + std::to_string(i));
    const auto p = default_partition(envs, 3);
    EXPECT_EQ(p.train_envs.size(), 5u);
    EXPECT_EQ(p.heldout_envs.size(), 1u);
    for (const auto& h : p.heldout_envs) {
        EXPECT_EQ(std::find(p.train_envs.begin(), p.train_envs.end(), h), p.train_envs.end());
    }
}

TEST(SegPredictor, ConstantSemanticsNearBaseline) {
    worldgen::WorldSpec s = spec_with(2, 4);
    s.room_types = 1;
    s.within_room_variation = 0.0;
    s.rooms_per_env = {2, 2};
    const auto w = worldgen::generate_world(s);
    const auto ids = env_ids(w);
    const auto data = seg_dataset_from_world(w, ids, 1);
    const EnvPartition part{{ids[0]}, {ids[1]}};
    SegHyper h = quick_hyper();
    h.epochs = 400;
    h.patience = 400;
    const auto pred = train_seg_predictor(data, part, h);
    // The constant mean is the optimum here; the sigmoid can only approach it.
    EXPECT_LE(pred.heldout_bce, pred.baseline_heldout_bce * 1.02 + 1e-3);
}

TEST(SegPredictor, BeatsMeanBaselineAndCorrelatesWithTruth) {
    const auto w = worldgen::generate_world(spec_with(6, 2));
    const auto ids = env_ids(w);
    const auto part = default_partition(ids, 2);
    const auto data = seg_dataset_from_world(w, ids, 2);
    const auto pred = train_seg_predictor(data, part, quick_hyper());
    EXPECT_LT(pred.heldout_bce, pred.baseline_heldout_bce);

    const int classes = w.spec.semantic_classes;
    std::vector<std::vector<double>> truth(static_cast<std::size_t>(classes));
    std::vector<std::vector<double>> guess(static_cast<std::size_t>(classes));
    for (std::size_t e = 0; e < w.envs.size(); ++e) {
        const auto& env = w.envs[e];
        if (std::find(part.heldout_envs.begin(), part.heldout_envs.end(), env.id) == part.heldout_envs.end()) continue;
        for (std::size_t v = 0; v < env.viewpoints.size(); ++v) {
            for (int d = 0; d < worldgen::kDirections; ++d) {
                const auto y = learnedseg_features(pred, worldgen::low_level_appearance(w, e, v, d, 2));
                const auto& t = env.view_semantics(v, d);
                for (int c = 0; c < classes; ++c) {
                    EXPECT_GT(y[static_cast<std::size_t>(c)], 0.0);
                    EXPECT_LT(y[static_cast<std::size_t>(c)], 1.0);
                    truth[static_cast<std::size_t>(c)].push_back(t[static_cast<std::size_t>(c)]);
                    guess[static_cast<std::size_t>(c)].push_back(y[static_cast<std::size_t>(c)]);
                }
            }
        }
    }
    double mean_r = 0.0;
    for (int c = 0; c < classes; ++c) mean_r += pearson(truth[static_cast<std::size_t>(c)], guess[static_cast<std::size_t>(c)]);
    EXPECT_GT(mean_r / classes, 0.0);
}

TEST(SegPredictor, ArchitectureGradientCheck) {
    const auto params = neuralcore::make_mlp({64, 512, 256, 16}, 5);
    Rng rng(6);
    Tensor x(4, 64);
    Tensor t(4, 16);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(0, 0.3);
    const neuralcore::ModelClosure model = [&](const neuralcore::ParamSet& p, neuralcore::ParamSet* grads) {
        neuralcore::Tape tape(grads != nullptr);
        const auto loss = neuralcore::bce(neuralcore::mlp_forward(tape, p, tape.constant(x), 0.0, false, nullptr), t);
        if (grads != nullptr) {
            auto r = neuralcore::forward_backward(tape, loss, p);
            *grads = std::move(r.grads);
            return r.loss;
        }
        return loss.scalar();
    };
    EXPECT_LT(neuralcore::grad_check(model, params, 1e-4, 1e-4, 3, 60).max_relative_error, 1e-4);
}

TEST(LearnedSeg, DimensionMismatchThrows) {
    SegPredictor p;
    p.params = neuralcore::make_mlp({8, 4, 4, 3}, 1);
    EXPECT_THROW(learnedseg_features(p, std::vector<double>(5, 0.0)), ValidationError);
    EXPECT_EQ(learnedseg_features(p, std::vector<double>(8, 0.1)), learnedseg_features(p, std::vector<double>(8, 0.1)));
}

TEST(Featurizer, OutputDimensionsPerKind) {
    const auto w = worldgen::generate_world(spec_with(2, 3));
    FeaturizerConfig cfg;
    cfg.kind = FeatureKind::Zero;
    EXPECT_EQ(Featurizer(w, cfg).output_dim(), cfg.zero_dim);
    cfg.kind = FeatureKind::LowLevel;
    EXPECT_EQ(Featurizer(w, cfg).output_dim(), w.spec.lowlevel_dim);
    cfg.kind = FeatureKind::GtSeg;
    EXPECT_EQ(Featurizer(w, cfg).output_dim(), w.spec.semantic_classes);
    cfg.kind = FeatureKind::ClassProb;
    EXPECT_EQ(Featurizer(w, cfg).output_dim(), w.spec.semantic_classes * cfg.labels_per_class);
    cfg.kind = FeatureKind::Detection;
    const Featurizer det(w, cfg);
    EXPECT_EQ(det.output_dim(), static_cast<int>(det.detection_vocab().size()));
    cfg.kind = FeatureKind::LearnedSeg;
    EXPECT_THROW(Featurizer(w, cfg), ValidationError);
}

TEST(FeatureTable, CsvRoundTrip) {
    const auto w = worldgen::generate_world(spec_with(2, 3));
    FeaturizerConfig cfg;
    cfg.kind = FeatureKind::GtSeg;
    const auto table = build_feature_table(w, Featurizer(w, cfg));
    EXPECT_EQ(table.rows(), [&] {
        std::size_t n = 0;
        for (const auto& e : w.envs) n += e.viewpoints.size() * worldgen::kDirections;
        return n;
    }());
    EXPECT_EQ(FeatureTable::from_csv(table.to_csv()), table);
    EXPECT_THROW(table.get("env_0", "nope", 0), LookupError);
}

TEST(Detections, CsvRoundTrip) {
    const std::vector<ViewDetections> views{{"env_0", "env_0_vp_1", 2, {{3, 0.25, 0.75}, {9, 0.125, 0.5}}},
                                            {"env_1", "env_1_vp_0", 0, {}}};
    const auto back = detections_from_csv(detections_to_csv(views));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].detections, views[0].detections);
    EXPECT_EQ(back[1].viewpoint_id, "env_1_vp_0");
}
