#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlnbias/agent.hpp"
#include "vlnbias/episode.hpp"
#include "vlnbias/navgraph.hpp"

namespace vlnbias::evalreport {

inline constexpr double kDefaultSuccessRadius = 3.0;  // meters
inline constexpr const char* kValSeen = "val_seen";
inline constexpr const char* kValUnseen = "val_unseen";

// Percentage of trajectories whose final viewpoint lies within `radius`
// meters (graph distance) of the goal. Empty input gives 0.
double success_rate(std::span<const agent::Trajectory> trajectories, std::span<const std::string> goals,
                    const navgraph::GraphIndex& graphs, double radius = kDefaultSuccessRadius);

// Mean of d(start, goal) - d(end, goal) in meters.
double goal_progress(std::span<const agent::Trajectory> trajectories, std::span<const std::string> goals,
                     const navgraph::GraphIndex& graphs);

// Per-trajectory success flags under the same rule as success_rate.
std::vector<bool> successes(std::span<const agent::Trajectory> trajectories, std::span<const std::string> goals,
                            const navgraph::GraphIndex& graphs, double radius = kDefaultSuccessRadius);

inline double gap(double a, double b) { return a > b ? a - b : b - a; }

struct SplitMetrics {
    std::string split;
    std::size_t episodes = 0;
    double success_rate = 0.0;   // percent
    double goal_progress = 0.0;  // meters
    friend bool operator==(const SplitMetrics&, const SplitMetrics&) = default;
};

SplitMetrics evaluate_split(std::string split, std::span<const agent::Trajectory> trajectories,
                            std::span<const PathDatum> episodes, const navgraph::GraphIndex& graphs,
                            double radius = kDefaultSuccessRadius);

struct EvalResult {
    std::string feature;
    std::uint64_t seed = 0;
    std::vector<SplitMetrics> splits;

    const SplitMetrics& split(std::string_view name) const;  // throws LookupError
    bool has_split(std::string_view name) const;
    // |SR(val_seen) - SR(val_unseen)|.
    double gap() const;

    friend bool operator==(const EvalResult&, const EvalResult&) = default;
};

// --- locality -----------------------------------------------------------------

struct LocalityBin {
    double lo = 0.0;  // smallest distance in the bin
    double hi = 0.0;  // largest distance in the bin
    std::size_t count = 0;
    std::size_t successes = 0;
    std::optional<double> success_rate;  // percent; empty bins have none

    std::string label() const;  // "lo-hi" in whole meters
    friend bool operator==(const LocalityBin&, const LocalityBin&) = default;
};

struct LocalityTable {
    std::vector<LocalityBin> bins;
    std::vector<std::size_t> bin_of_item;
};

// Quantile bins over distance: bin k ends at the sorted item of rank
// ceil((k+1) n / num_bins) - 1 and items equal to a boundary stay in the lower
// bin. Throws ValidationError on misaligned input or fewer items than bins.
LocalityTable locality_table(std::span<const double> distances, const std::vector<bool>& success, int num_bins = 4);

// --- feature comparison ---------------------------------------------------------

struct FeatureRow {
    std::string feature;
    std::vector<std::uint64_t> seeds;
    std::vector<double> seen;    // per seed
    std::vector<double> unseen;  // per seed
    double mean_seen = 0.0;
    double mean_unseen = 0.0;
    double sd_seen = 0.0;  // sample standard deviation (0 for one seed)
    double sd_unseen = 0.0;
    double gap = 0.0;  // |mean_seen - mean_unseen|

    std::vector<double> per_seed_gaps() const;
};

// One row per feature kind in first-appearance order.
std::vector<FeatureRow> feature_ladder(std::span<const EvalResult> results);

// --- report files -------------------------------------------------------------------

enum class ReportFormat { Csv, Json, Svg };

ReportFormat parse_report_format(std::string_view text);  // throws ValidationError
std::string_view to_string(ReportFormat f);

inline constexpr const char* kResultsCsvHeader = "feature,seed,split,episodes,success_rate,goal_progress";
inline constexpr const char* kLadderCsvHeader =
    "feature,val_seen,val_unseen,gap,val_seen_sd,val_unseen_sd,seeds,per_seed_val_seen,per_seed_val_unseen,per_seed_gap";
inline constexpr const char* kLocalityCsvHeader = "bin,range,count,successes,success_rate";

std::string results_csv(std::span<const EvalResult> results);
std::vector<EvalResult> results_from_csv(std::string_view text);  // throws LoadError
std::string ladder_csv(std::span<const FeatureRow> rows);
std::string locality_csv(const LocalityTable& table);
std::string results_json(std::span<const EvalResult> results);
std::string bar_chart_svg(std::span<const EvalResult> results, bool success_metric);

// Writes results.csv + feature_table.csv, results.json, and
// success_rate.svg + goal_progress.svg depending on `formats`. Returns the
// written paths in order. Throws IoError naming the path.
std::vector<std::filesystem::path> emit_report(std::span<const EvalResult> results,
                                               const std::filesystem::path& out_dir,
                                               std::span<const ReportFormat> formats);

}  // namespace vlnbias::evalreport
