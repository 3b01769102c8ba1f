#include "vlnbias/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "vlnbias/format.hpp"

namespace vlnbias::evalreport {

namespace {

struct GoalDistances {
    const navgraph::NavGraph* graph = nullptr;
    std::vector<double> lengths;
    std::size_t start = 0;
    std::size_t end = 0;
};

GoalDistances resolve(const agent::Trajectory& t, const std::string& goal, const navgraph::GraphIndex& graphs) {
    if (t.visited.empty()) throw ValidationError("trajectory '" + t.episode_id + "' has no viewpoints");
    const auto it = graphs.find(t.env_id);
    if (it == graphs.end()) throw ValidationError("trajectory '" + t.episode_id + "' has unknown environment");
    const auto& graph = it->second;
    const auto goal_idx = graph.find(goal);
    if (!goal_idx) throw ValidationError("goal '" + goal + "' of '" + t.episode_id + "' is not in the graph");
    GoalDistances d;
    d.graph = &graph;
    d.lengths = navgraph::shortest_lengths(graph, *goal_idx);
    d.start = graph.index_of(t.visited.front());
    d.end = graph.index_of(t.visited.back());
    return d;
}

void check_aligned(std::size_t a, std::size_t b) {
    if (a != b) {
        throw ValidationError("got " + std::to_string(a) + " trajectories but " + std::to_string(b) + " goals");
    }
}

double mean_of(std::span<const double> v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_sd(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::string join(std::span<const double> values, int decimals) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i > 0) out += ';';
        out += format_fixed(values[i], decimals);
    }
    return out;
}

double round_to(double v, int decimals) { return parse_double(format_fixed(v, decimals)); }

std::string xml_escape(std::string_view text) {
    std::string out;
    for (char c : text) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::vector<bool> successes(std::span<const agent::Trajectory> trajectories, std::span<const std::string> goals,
                            const navgraph::GraphIndex& graphs, double radius) {
    check_aligned(trajectories.size(), goals.size());
    if (!(radius >= 0.0)) throw ValidationError("success radius must be >= 0");
    std::vector<bool> out;
    out.reserve(trajectories.size());
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        const auto d = resolve(trajectories[i], goals[i], graphs);
        out.push_back(d.lengths[d.end] <= radius);
    }
    return out;
}

double success_rate(std::span<const agent::Trajectory> trajectories, std::span<const std::string> goals,
                    const navgraph::GraphIndex& graphs, double radius) {
    const auto flags = successes(trajectories, goals, graphs, radius);
    if (flags.empty()) return 0.0;
    const auto hits = std::count(flags.begin(), flags.end(), true);
    return 100.0 * static_cast<double>(hits) / static_cast<double>(flags.size());
}

double goal_progress(std::span<const agent::Trajectory> trajectories, std::span<const std::string> goals,
                     const navgraph::GraphIndex& graphs) {
    check_aligned(trajectories.size(), goals.size());
    if (trajectories.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        const auto d = resolve(trajectories[i], goals[i], graphs);
        total += d.lengths[d.start] - d.lengths[d.end];
    }
    return total / static_cast<double>(trajectories.size());
}

SplitMetrics evaluate_split(std::string split, std::span<const agent::Trajectory> trajectories,
                            std::span<const PathDatum> episodes, const navgraph::GraphIndex& graphs, double radius) {
    std::vector<std::string> goals;
    goals.reserve(episodes.size());
    for (const auto& ep : episodes) goals.push_back(ep.goal);
    SplitMetrics m;
    m.split = std::move(split);
    m.episodes = episodes.size();
    m.success_rate = success_rate(trajectories, goals, graphs, radius);
    m.goal_progress = goal_progress(trajectories, goals, graphs);
    return m;
}

const SplitMetrics& EvalResult::split(std::string_view name) const {
    for (const auto& s : splits) {
        if (s.split == name) return s;
    }
    throw LookupError("result for '" + feature + "' has no split '" + std::string(name) + "'");
}

bool EvalResult::has_split(std::string_view name) const {
    return std::any_of(splits.begin(), splits.end(), [&](const SplitMetrics& s) { return s.split == name; });
}

double EvalResult::gap() const {
    return evalreport::gap(split(kValSeen).success_rate, split(kValUnseen).success_rate);
}

std::string LocalityBin::label() const {
    auto text = [](double v) { return std::isinf(v) ? std::string("inf") : format_fixed(v, 0); };
    return text(lo) + "-" + text(hi);
}

LocalityTable locality_table(std::span<const double> distances, const std::vector<bool>& success, int num_bins) {
    if (distances.size() != success.size()) {
        throw ValidationError("got " + std::to_string(distances.size()) + " distances but " +
                              std::to_string(success.size()) + " outcomes");
    }
    if (num_bins < 1) throw ValidationError("need at least one bin");
    const std::size_t n = distances.size();
    const auto bins = static_cast<std::size_t>(num_bins);
    if (n < bins) {
        throw ValidationError("cannot split " + std::to_string(n) + " items into " + std::to_string(bins) + " bins");
    }
    for (double d : distances) {
        if (std::isnan(d)) throw ValidationError("distance is NaN");
    }
    std::vector<double> sorted(distances.begin(), distances.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> upper(bins);
    for (std::size_t k = 0; k < bins; ++k) {
        const std::size_t rank = ((k + 1) * n + bins - 1) / bins - 1;
        upper[k] = sorted[rank];
    }

    LocalityTable table;
    table.bins.resize(bins);
    table.bin_of_item.resize(n);
    std::vector<bool> seen(bins, false);
    for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(std::lower_bound(upper.begin(), upper.end(), distances[i]) -
                                                upper.begin());
        table.bin_of_item[i] = k;
        auto& bin = table.bins[k];
        if (!seen[k]) {
            bin.lo = bin.hi = distances[i];
            seen[k] = true;
        }
        bin.lo = std::min(bin.lo, distances[i]);
        bin.hi = std::max(bin.hi, distances[i]);
        ++bin.count;
        bin.successes += success[i] ? 1 : 0;
    }
    for (auto& bin : table.bins) {
        if (bin.count > 0) {
            bin.success_rate = 100.0 * static_cast<double>(bin.successes) / static_cast<double>(bin.count);
        }
    }
    return table;
}

std::vector<double> FeatureRow::per_seed_gaps() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < seen.size(); ++i) out.push_back(evalreport::gap(seen[i], unseen[i]));
    return out;
}

std::vector<FeatureRow> feature_ladder(std::span<const EvalResult> results) {
    std::vector<FeatureRow> rows;
    for (const auto& r : results) {
        if (!r.has_split(kValSeen) || !r.has_split(kValUnseen)) continue;
        auto it = std::find_if(rows.begin(), rows.end(), [&](const FeatureRow& f) { return f.feature == r.feature; });
        if (it == rows.end()) {
            FeatureRow row;
            row.feature = r.feature;
            rows.push_back(std::move(row));
            it = rows.end() - 1;
        }
        it->seeds.push_back(r.seed);
        it->seen.push_back(r.split(kValSeen).success_rate);
        it->unseen.push_back(r.split(kValUnseen).success_rate);
    }
    for (auto& row : rows) {
        row.mean_seen = mean_of(row.seen);
        row.mean_unseen = mean_of(row.unseen);
        row.sd_seen = sample_sd(row.seen);
        row.sd_unseen = sample_sd(row.unseen);
        row.gap = evalreport::gap(row.mean_seen, row.mean_unseen);
    }
    return rows;
}

ReportFormat parse_report_format(std::string_view text) {
    if (text == "csv") return ReportFormat::Csv;
    if (text == "json") return ReportFormat::Json;
    if (text == "svg") return ReportFormat::Svg;
    throw ValidationError("unknown report format '" + std::string(text) + "'");
}

std::string_view to_string(ReportFormat f) {
    switch (f) {
        case ReportFormat::Csv: return "csv";
        case ReportFormat::Json: return "json";
        case ReportFormat::Svg: return "svg";
    }
    return "csv";
}

std::string results_csv(std::span<const EvalResult> results) {
    std::string out = std::string(kResultsCsvHeader) + "\n";
    for (const auto& r : results) {
        for (const auto& s : r.splits) {
            out += r.feature + "," + std::to_string(r.seed) + "," + s.split + "," + std::to_string(s.episodes) + "," +
                   format_fixed(s.success_rate, 1) + "," + format_fixed(s.goal_progress, 2) + "\n";
        }
    }
    return out;
}

std::vector<EvalResult> results_from_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || line != kResultsCsvHeader) throw LoadError("results CSV: bad header");
    std::vector<EvalResult> results;
    std::size_t record = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++record;
        const auto f = split_csv_line(line);
        if (f.size() != 6) throw LoadError("results CSV record " + std::to_string(record) + ": expected 6 fields");
        try {
            const auto seed = static_cast<std::uint64_t>(std::stoull(f[1]));
            if (results.empty() || results.back().feature != f[0] || results.back().seed != seed) {
                results.push_back(EvalResult{.feature = f[0], .seed = seed, .splits = {}});
            }
            results.back().splits.push_back(SplitMetrics{.split = f[2],
                                                         .episodes = static_cast<std::size_t>(std::stoull(f[3])),
                                                         .success_rate = parse_double(f[4]),
                                                         .goal_progress = parse_double(f[5])});
        } catch (const LoadError&) {
            throw;
        } catch (const std::exception& e) {
            throw LoadError("results CSV record " + std::to_string(record) + ": " + e.what());
        }
    }
    return results;
}

std::string ladder_csv(std::span<const FeatureRow> rows) {
    std::string out = std::string(kLadderCsvHeader) + "\n";
    for (const auto& r : rows) {
        std::string seeds;
        for (std::size_t i = 0; i < r.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(r.seeds[i]);
        const auto gaps = r.per_seed_gaps();
        out += r.feature + "," + format_fixed(r.mean_seen, 1) + "," + format_fixed(r.mean_unseen, 1) + "," +
               format_fixed(r.gap, 1) + "," + format_fixed(r.sd_seen, 1) + "," + format_fixed(r.sd_unseen, 1) + "," +
               seeds + "," + join(r.seen, 1) + "," + join(r.unseen, 1) + "," + join(gaps, 1) + "\n";
    }
    return out;
}

std::string locality_csv(const LocalityTable& table) {
    std::string out = std::string(kLocalityCsvHeader) + "\n";
    for (std::size_t k = 0; k < table.bins.size(); ++k) {
        const auto& b = table.bins[k];
        out += std::to_string(k) + "," + b.label() + "," + std::to_string(b.count) + "," + std::to_string(b.successes) +
               "," + (b.success_rate ? format_fixed(*b.success_rate, 1) : std::string()) + "\n";
    }
    return out;
}

std::string results_json(std::span<const EvalResult> results) {
    nlohmann::ordered_json doc;
    doc["results"] = nlohmann::ordered_json::array();
    for (const auto& r : results) {
        nlohmann::ordered_json jr;
        jr["feature"] = r.feature;
        jr["seed"] = r.seed;
        jr["splits"] = nlohmann::ordered_json::array();
        for (const auto& s : r.splits) {
            jr["splits"].push_back({{"split", s.split},
                                    {"episodes", s.episodes},
                                    {"success_rate", round_to(s.success_rate, 1)},
                                    {"goal_progress", round_to(s.goal_progress, 2)}});
        }
        if (r.has_split(kValSeen) && r.has_split(kValUnseen)) jr["gap"] = round_to(r.gap(), 1);
        doc["results"].push_back(std::move(jr));
    }
    doc["feature_table"] = nlohmann::ordered_json::array();
    for (const auto& row : feature_ladder(results)) {
        nlohmann::ordered_json jr;
        jr["feature"] = row.feature;
        jr["seeds"] = row.seeds;
        auto rounded = [](std::span<const double> v) {
            std::vector<double> out;
            for (double x : v) out.push_back(round_to(x, 1));
            return out;
        };
        jr["val_seen"] = rounded(row.seen);
        jr["val_unseen"] = rounded(row.unseen);
        jr["mean_val_seen"] = round_to(row.mean_seen, 1);
        jr["mean_val_unseen"] = round_to(row.mean_unseen, 1);
        jr["sd_val_seen"] = round_to(row.sd_seen, 1);
        jr["sd_val_unseen"] = round_to(row.sd_unseen, 1);
        jr["gap"] = round_to(row.gap, 1);
        doc["feature_table"].push_back(std::move(jr));
    }
    return doc.dump(2) + "\n";
}

std::string bar_chart_svg(std::span<const EvalResult> results, bool success_metric) {
    // Mean over seeds per (feature, split), in first-appearance order.
    std::vector<std::string> features;
    std::vector<std::string> splits;
    std::map<std::pair<std::string, std::string>, std::vector<double>> values;
    for (const auto& r : results) {
        if (std::find(features.begin(), features.end(), r.feature) == features.end()) features.push_back(r.feature);
        for (const auto& s : r.splits) {
            if (std::find(splits.begin(), splits.end(), s.split) == splits.end()) splits.push_back(s.split);
            values[{r.feature, s.split}].push_back(success_metric ? s.success_rate : s.goal_progress);
        }
    }
    double top = success_metric ? 100.0 : 1.0;
    if (!success_metric) {
        for (const auto& [key, v] : values) top = std::max(top, std::ceil(mean_of(v)));
    }
    const int bar_w = 18;
    const int group_gap = 24;
    const int left = 50;
    const int plot_h = 200;
    const int top_margin = 30;
    const int group_w = static_cast<int>(splits.size()) * bar_w + group_gap;
    const int width = left + std::max(1, static_cast<int>(features.size())) * group_w + 20 +
                      static_cast<int>(splits.size() > 0 ? 120 : 0);
    const int height = top_margin + plot_h + 50;
    static const char* palette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"};

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    svg << "<text x=\"" << left << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">"
        << (success_metric ? "Success rate (%)" : "Goal progress (m)") << "</text>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << top_margin + plot_h << "\" x2=\"" << width - 130
        << "\" y2=\"" << top_margin + plot_h << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << left - 6 << "\" y=\"" << top_margin + 4
        << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" << format_fixed(top, 0)
        << "</text>\n";
    for (std::size_t f = 0; f < features.size(); ++f) {
        const int gx = left + static_cast<int>(f) * group_w + group_gap / 2;
        for (std::size_t s = 0; s < splits.size(); ++s) {
            const auto it = values.find({features[f], splits[s]});
            if (it == values.end()) continue;
            const double v = std::clamp(mean_of(it->second), 0.0, top);
            const double h = plot_h * v / top;
            svg << "<rect x=\"" << gx + static_cast<int>(s) * bar_w << "\" y=\""
                << format_fixed(top_margin + plot_h - h, 2) << "\" width=\"" << bar_w - 2 << "\" height=\""
                << format_fixed(h, 2) << "\" fill=\"" << palette[s % 6] << "\"><title>"
                << xml_escape(features[f] + " " + splits[s] + " " +
                              format_fixed(mean_of(it->second), success_metric ? 1 : 2))
                << "</title></rect>\n";
        }
        svg << "<text x=\"" << gx + static_cast<int>(splits.size()) * bar_w / 2 << "\" y=\""
            << top_margin + plot_h + 16 << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">"
            << xml_escape(features[f]) << "</text>\n";
    }
    for (std::size_t s = 0; s < splits.size(); ++s) {
        const int ly = top_margin + 14 * static_cast<int>(s);
        svg << "<rect x=\"" << width - 120 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\""
            << palette[s % 6] << "\"/>\n";
        svg << "<text x=\"" << width - 105 << "\" y=\"" << ly + 9
            << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(splits[s]) << "</text>\n";
    }
    svg << "</svg>\n";
    return svg.str();
}

std::vector<std::filesystem::path> emit_report(std::span<const EvalResult> results,
                                               const std::filesystem::path& out_dir,
                                               std::span<const ReportFormat> formats) {
    auto wants = [&](ReportFormat f) { return std::find(formats.begin(), formats.end(), f) != formats.end(); };
    std::vector<std::filesystem::path> written;
    auto emit = [&](const std::string& name, const std::string& contents) {
        const auto path = out_dir / name;
        write_text_file(path, contents);
        written.push_back(path);
    };
    if (wants(ReportFormat::Csv)) {
        emit("results.csv", results_csv(results));
        emit("feature_table.csv", ladder_csv(feature_ladder(results)));
    }
    if (wants(ReportFormat::Json)) emit("results.json", results_json(results));
    if (wants(ReportFormat::Svg)) {
        emit("success_rate.svg", bar_chart_svg(results, true));
        emit("goal_progress.svg", bar_chart_svg(results, false));
    }
    return written;
}

}  // namespace vlnbias::evalreport
