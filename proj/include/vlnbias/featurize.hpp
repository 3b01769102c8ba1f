#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlnbias/neuralcore.hpp"
#include "vlnbias/worldgen.hpp"

namespace vlnbias::featurize {

using neuralcore::Tensor;
using worldgen::World;

enum class FeatureKind { Zero, LowLevel, ClassProb, Detection, GtSeg, LearnedSeg };

std::string_view to_string(FeatureKind k);
FeatureKind parse_feature_kind(std::string_view text);  // throws ValidationError

// --- individual representations ----------------------------------------------

std::vector<double> zero_features(int dim);

// Fixed L x C map from semantic classes to classifier labels.
struct LabelMap {
    Tensor matrix;
    int labels() const { return static_cast<int>(matrix.rows()); }
    int classes() const { return static_cast<int>(matrix.cols()); }
};

// Each class owns a contiguous block of `labels_per_class` labels weighted by
// `gain`.
LabelMap identity_block_label_map(int classes, int labels_per_class, double gain);

// softmax((M s + noise) / temperature); temperature may be +inf (uniform).
std::vector<double> classprob_features(std::span<const double> semantics, const LabelMap& map, double temperature,
                                       double noise_sd, std::uint64_t seed);

struct Detection {
    int label_id = 0;
    double area = 0.0;
    double confidence = 0.0;
    friend bool operator==(const Detection&, const Detection&) = default;
};

using DetectionRecord = std::vector<Detection>;  // all detections of one view

// a_c = sum over detections labelled c of area * confidence, ordered by vocab;
// labels outside the vocab are ignored.
std::vector<double> detection_features(std::span<const Detection> detections, std::span<const int> vocab);

// Labels ranked by total area*confidence mass (ties by label id); keeps the
// shortest prefix covering `coverage_fraction` of all mass.
std::vector<int> select_detection_vocab(std::span<const DetectionRecord> records, double coverage_fraction);

struct DetectionSampling {
    double min_area = 0.02;
    double conf_alpha = 5.0;
    double conf_beta = 2.0;
    int distractor_labels = 8;
    double distractor_rate = 0.3;
};

// Synthetic detector: every class above min_area emits 1-3 boxes whose areas
// sum to the class area, with Beta-distributed confidences.
DetectionRecord sample_detections(std::span<const double> semantics, const DetectionSampling& params,
                                  std::uint64_t seed);

const std::vector<double>& gtseg_features(const World& world, std::string_view env_id, std::string_view viewpoint,
                                          int direction);

// --- learned segmentation ---------------------------------------------------------

struct SegHyper {
    double lr = 0.05;
    int batch = 64;
    int epochs = 30;
    int patience = 8;
    double dropout = neuralcore::kDefaultDropout;
    double clip_norm = 5.0;
    int hidden1 = 512;
    int hidden2 = 256;
    std::uint64_t seed = 0;
};

struct SegDataset {
    Tensor inputs;   // one row per view
    Tensor targets;  // area fractions per view
    std::vector<std::string> env_of_row;
};

struct EnvPartition {
    std::vector<std::string> train_envs;
    std::vector<std::string> heldout_envs;
};

// Held-out share mirrors a 51/10 environment ratio, at least one each side.
EnvPartition default_partition(std::span<const std::string> envs, std::uint64_t seed);

struct SegPredictor {
    neuralcore::ParamSet params;
    EnvPartition partition;
    double heldout_bce = 0.0;           // mean per view, best checkpoint
    double baseline_heldout_bce = 0.0;  // constant training-mean predictor
    int best_epoch = 0;
    std::vector<double> train_loss;  // per epoch
};

SegDataset seg_dataset_from_world(const World& world, std::span<const std::string> envs, std::uint64_t appearance_seed);

// Mean per-row BCE of `predictions` vs `targets`.
double mean_bce(const Tensor& predictions, const Tensor& targets);

SegPredictor train_seg_predictor(const SegDataset& data, const EnvPartition& partition, const SegHyper& hyper);

std::vector<double> learnedseg_features(const SegPredictor& predictor, std::span<const double> lowlevel);

// --- uniform featurizer -------------------------------------------------------------

struct FeaturizerConfig {
    FeatureKind kind = FeatureKind::LowLevel;
    int zero_dim = 64;
    int labels_per_class = 2;
    double label_gain = 8.0;
    double classprob_temperature = 1.0;
    double classprob_noise_sd = 0.5;
    double detection_coverage = 0.95;
    DetectionSampling detection;
    std::uint64_t seed = 0;  // view-noise seed (appearance, detections, classprob)
};

// Immutable after construction; featurize() is pure.
class Featurizer {
public:
    // Builds kind-specific state (label map, detection vocabulary); LEARNEDSEG
    // requires a trained predictor.
    Featurizer(const World& world, const FeaturizerConfig& config, std::optional<SegPredictor> predictor = {});

    FeatureKind kind() const { return config_.kind; }
    int output_dim() const { return output_dim_; }
    const std::vector<int>& detection_vocab() const { return vocab_; }

    std::vector<double> featurize(const World& world, std::size_t env_index, std::size_t viewpoint,
                                  int direction) const;

private:
    FeaturizerConfig config_;
    int output_dim_ = 0;
    LabelMap label_map_;
    std::vector<int> vocab_;
    std::optional<SegPredictor> predictor_;
};

std::vector<DetectionRecord> world_detections(const World& world, const DetectionSampling& params,
                                              std::uint64_t seed);

// Precomputed features for every (environment, viewpoint, direction).
class FeatureTable {
public:
    FeatureTable() = default;
    FeatureTable(std::string name, int dim) : name_(std::move(name)), dim_(dim) {}

    const std::string& name() const { return name_; }
    int dim() const { return dim_; }

    void set(const std::string& env_id, const std::string& viewpoint_id, int direction, std::span<const double> values);
    std::span<const double> get(std::string_view env_id, std::string_view viewpoint_id, int direction) const;
    bool contains(std::string_view env_id, std::string_view viewpoint_id, int direction) const;
    std::size_t rows() const { return rows_.size(); }

    std::string to_csv() const;
    static FeatureTable from_csv(std::string_view text);

    friend bool operator==(const FeatureTable&, const FeatureTable&) = default;

private:
    using Key = std::tuple<std::string, std::string, int>;
    std::string name_;
    int dim_ = 0;
    std::map<Key, std::vector<double>, std::less<>> rows_;
};

FeatureTable build_feature_table(const World& world, const Featurizer& featurizer);

// Detection record CSV: env_id,viewpoint_id,direction,label_id,area,confidence.
struct ViewDetections {
    std::string env_id;
    std::string viewpoint_id;
    int direction = 0;
    DetectionRecord detections;
};
std::string detections_to_csv(std::span<const ViewDetections> views);
std::vector<ViewDetections> detections_from_csv(std::string_view text);

}  // namespace vlnbias::featurize
