#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vlnbias/agent.hpp"
#include "vlnbias/evalreport.hpp"
#include "vlnbias/featurize.hpp"
#include "vlnbias/navgraph.hpp"
#include "vlnbias/textmetrics.hpp"
#include "vlnbias/worldgen.hpp"

namespace vlnbias::pipeline {

// CLI exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitTraining = 4;

// ConfigError -> 2, TrainingError -> 4, every other vlnbias::Error -> 3.
int exit_code_for(const Error& e);

// --- configuration --------------------------------------------------------------

struct EpisodeSpec {
    std::size_t train_paths = 2000;
    int instructions_per_path = 3;
    std::size_t val_seen = 500;    // new paths in training environments
    std::size_t val_unseen = 500;  // episodes in held-out environments
    worldgen::IntRange path_edges{2, 5};
    worldgen::InstructionNoise noise{0.2, 0.2, worldgen::kDefaultSynonyms};
};

struct EnvSplitSpec {
    int heldout_envs = 2;                  // the last N environments
    std::vector<std::string> env_unseen;  // explicit list; overrides the count
};

struct LocalitySpec {
    bool enabled = true;
    navgraph::Axis axis = navgraph::Axis::X;
    double fraction = 0.5;      // share of viewpoints on the training side
    std::size_t pool = 1500;    // extra paths in training environments to classify
    int bins = 4;
    featurize::FeatureKind kind = featurize::FeatureKind::LowLevel;
};

// Paths of a dataset on disk (see load_external_dataset). `feature_tables`
// maps a feature kind name to a feature table CSV.
struct DatasetPaths {
    std::filesystem::path graph_dir;
    std::filesystem::path items_file;
    std::map<std::string, std::filesystem::path> feature_tables;
};

struct ExperimentConfig {
    std::optional<worldgen::WorldSpec> world;  // synthetic mode (default)
    std::optional<DatasetPaths> dataset;       // external mode
    EpisodeSpec episodes;
    EnvSplitSpec split;
    LocalitySpec locality;
    std::vector<featurize::FeatureKind> features{featurize::FeatureKind::LowLevel, featurize::FeatureKind::GtSeg,
                                                 featurize::FeatureKind::LearnedSeg};
    featurize::FeaturizerConfig featurizer;  // kind and seed are set per run
    featurize::SegHyper seg;
    agent::AgentHyper agent;
    int max_steps = agent::kDefaultMaxSteps;
    double success_radius = evalreport::kDefaultSuccessRadius;
    std::vector<std::uint64_t> seeds{0};
    std::filesystem::path output_dir = "out";
    std::vector<evalreport::ReportFormat> formats{evalreport::ReportFormat::Csv, evalreport::ReportFormat::Json,
                                                  evalreport::ReportFormat::Svg};
    bool save_artifacts = true;

    // Throws ConfigError: no feature kinds, no seeds, both or neither of
    // world/dataset, missing dataset files, invalid nested values.
    void validate() const;
};

// Default benchmark agent schedule: 8 epochs over 2000 x 3 episodes.
ExperimentConfig default_experiment_config();

// Strict: unknown keys and type mismatches raise ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

// --- episodes ------------------------------------------------------------------------

struct EpisodeSplits {
    std::vector<PathDatum> train;
    std::vector<PathDatum> val_seen;
    std::vector<PathDatum> val_unseen;
    std::vector<std::string> train_envs;
    std::vector<std::string> heldout_envs;
};

std::vector<std::string> heldout_env_ids(std::span<const std::string> all_envs, const EnvSplitSpec& spec);

// Distinct start/goal paths (none of `exclude`), each rendered with
// `instructions` independent instructions. Throws GenerationError when the
// environments run out of distinct paths.
std::vector<PathDatum> sample_distinct_paths(const worldgen::World& world, std::span<const std::string> envs,
                                             std::size_t paths, int instructions, const EpisodeSpec& spec,
                                             const std::set<std::pair<std::string, std::string>>& exclude,
                                             std::string_view prefix, std::uint64_t seed);

// val_seen paths never repeat a training start/goal pair; val_unseen paths
// are drawn independently from the held-out environments.
EpisodeSplits make_episode_splits(const worldgen::World& world, const EpisodeSpec& spec, const EnvSplitSpec& split,
                                  std::uint64_t seed);

std::string episodes_to_json(std::span<const PathDatum> episodes);
std::vector<PathDatum> episodes_from_json(std::string_view text);  // throws LoadError

// --- external datasets ---------------------------------------------------------------

struct ExternalItem {
    PathDatum episode;                      // instruction tokens from the tokenizer
    std::string split;                      // "train", "val_seen", "val_unseen" or empty
    std::vector<std::string> instructions;  // raw strings
};

struct ExternalDataset {
    navgraph::GraphIndex graphs;
    std::vector<ExternalItem> items;
    textmetrics::Vocabulary vocabulary;
};

// One JSON file per environment in `graph_dir` (file stem = env id):
//   [{"viewpoint_id": str, "position": [x, y, z], "neighbors": [str, ...]}, ...]
// Items file: [{"id", "env_id", "path": [...], "instruction": str, "split"?}].
// Adjacency must be symmetric and every path step an edge. Throws LoadError
// naming the file, record index and field.
ExternalDataset load_external_dataset(const std::filesystem::path& graph_dir, const std::filesystem::path& items_file);

// Inverse of load_external_dataset; writes <env>.json files and the items file.
void save_external_dataset(const ExternalDataset& dataset, const std::filesystem::path& graph_dir,
                           const std::filesystem::path& items_file);

// --- language distance ------------------------------------------------------------------

// dis_rouge / dis_bleu of every evaluation item against all training
// instructions, with histograms (per-bin success when `success` is given).
// Throws DomainError when there are no training instructions.
textmetrics::DistanceReport lang_distance_report(std::span<const PathDatum> training,
                                                 std::span<const PathDatum> evaluation,
                                                 const std::vector<std::optional<bool>>& success = {},
                                                 int num_bins = 10);

// --- experiment ------------------------------------------------------------------------

struct LocalityResult {
    std::uint64_t seed = 0;
    evalreport::LocalityTable table;
    std::size_t train_items = 0;
};

struct ReportBundle {
    std::vector<evalreport::EvalResult> results;
    std::vector<LocalityResult> locality;
    std::vector<std::filesystem::path> files;
};

// Runs every seed: world (or dataset) -> split -> per feature kind: features
// (seg predictor when needed) -> agent -> rollouts -> metrics; then the
// locality re-split; then the reports. Stage errors are rethrown with the
// same type and "stage <name>, seed <n>: " prefixed.
ReportBundle run_experiment(const ExperimentConfig& config);

// Aggregated locality table across seeds (mean per-bin success rate).
std::string locality_summary_csv(std::span<const LocalityResult> results);

}  // namespace vlnbias::pipeline
