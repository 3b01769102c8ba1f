#include <gtest/gtest.h>

#include <filesystem>

#include "vlnbias/evalreport.hpp"
#include "vlnbias/format.hpp"

using namespace vlnbias;
using namespace vlnbias::evalreport;

namespace {

// Straight corridor a-b-c-d-e-f with 1 m, 2 m, 2 m, 1 m, 4 m edges.
navgraph::GraphIndex corridor() {
    navgraph::NavGraph g("env");
    const double xs[] = {0, 1, 3, 5, 6, 10};
    for (int i = 0; i < 6; ++i) g.add_viewpoint(std::string(1, static_cast<char>('a' + i)), {xs[i], 0, 0});
    for (std::size_t i = 0; i + 1 < 6; ++i) g.add_edge(i, i + 1);
    navgraph::GraphIndex graphs;
    graphs.emplace("env", std::move(g));
    return graphs;
}

agent::Trajectory traj(std::string id, std::vector<std::string> visited) {
    agent::Trajectory t;
    t.episode_id = std::move(id);
    t.env_id = "env";
    t.visited = std::move(visited);
    t.terminated_by = agent::Termination::Stop;
    return t;
}

EvalResult result(std::string feature, std::uint64_t seed, double seen, double unseen) {
    EvalResult r;
    r.feature = std::move(feature);
    r.seed = seed;
    r.splits.push_back({kValSeen, 100, seen, 3.25});
    r.splits.push_back({kValUnseen, 80, unseen, 1.5});
    return r;
}

}  // namespace

TEST(SuccessRate, AllAtGoal) {
    const auto g = corridor();
    const std::vector<agent::Trajectory> t{traj("1", {"a", "b"}), traj("2", {"c", "f"})};
    const std::vector<std::string> goals{"b", "f"};
    EXPECT_EQ(success_rate(t, goals, g), 100.0);
}

TEST(SuccessRate, NoneWithinRadius) {
    const auto g = corridor();
    const std::vector<agent::Trajectory> t{traj("1", {"a"}), traj("2", {"b"})};
    const std::vector<std::string> goals{"f", "f"};
    EXPECT_EQ(success_rate(t, goals, g), 0.0);
}

TEST(SuccessRate, ThreeOfFive) {
    const auto g = corridor();
    // Final distances: e->f 4 m, d->f 5 m, f->f 0, c->a 3 m (on the
    // radius, counts), a->a 0.
    const std::vector<agent::Trajectory> t{traj("1", {"e"}), traj("2", {"d"}), traj("3", {"f"}),
                                           traj("4", {"c"}), traj("5", {"a"})};
    const std::vector<std::string> goals{"f", "f", "f", "a", "a"};
    EXPECT_DOUBLE_EQ(success_rate(t, goals, g), 60.0);
    EXPECT_EQ(successes(t, goals, g), (std::vector<bool>{false, false, true, true, true}));
}

TEST(SuccessRate, EmptyIsZeroAndMisalignedThrows) {
    const auto g = corridor();
    EXPECT_EQ(success_rate({}, {}, g), 0.0);
    const std::vector<agent::Trajectory> t{traj("1", {"a"})};
    EXPECT_THROW(success_rate(t, {}, g), ValidationError);
    const std::vector<std::string> bad{"zz"};
    EXPECT_THROW(success_rate(t, bad, g), ValidationError);
}

TEST(GoalProgress, StopAtStartIsZero) {
    const auto g = corridor();
    const std::vector<agent::Trajectory> t{traj("1", {"b"})};
    const std::vector<std::string> goals{"e"};
    EXPECT_EQ(goal_progress(t, goals, g), 0.0);
}

TEST(GoalProgress, ReachingFiveMetreGoal) {
    const auto g = corridor();
    const std::vector<agent::Trajectory> t{traj("1", {"b", "c", "e"})};
    const std::vector<std::string> goals{"e"};
    EXPECT_DOUBLE_EQ(goal_progress(t, goals, g), 5.0);
}

TEST(GoalProgress, TwoEpisodeAverage) {
    const auto g = corridor();
    // (10 - 4) = 6 and (3 - 5) = -2 -> mean 2.
    const std::vector<agent::Trajectory> t{traj("1", {"a", "b", "c", "d", "e"}), traj("2", {"c", "d"})};
    const std::vector<std::string> goals{"f", "a"};
    EXPECT_DOUBLE_EQ(goal_progress(t, goals, g), 2.0);
}

TEST(Gap, PublishedRows) {
    EXPECT_NEAR(gap(56.1, 47.5), 8.6, 1e-12);
    EXPECT_EQ(gap(40.0, 40.0), 0.0);
    EXPECT_NEAR(gap(52.6, 53.3), 0.7, 1e-12);
}

TEST(LocalityTable, UniformDistancesTwoPerBin) {
    const std::vector<double> d{7, 1, 5, 3, 8, 2, 6, 4};
    const std::vector<bool> s(8, true);
    const auto t = locality_table(d, s, 4);
    for (const auto& b : t.bins) {
        EXPECT_EQ(b.count, 2u);
        EXPECT_EQ(*b.success_rate, 100.0);
    }
    EXPECT_EQ(t.bins[0].label(), "1-2");
    EXPECT_EQ(t.bin_of_item[0], 3u);
}

TEST(LocalityTable, WholeMetreLabels) {
    const std::vector<double> d{5, 9, 13, 14, 15, 16, 17, 19, 21, 22, 40, 57};
    const std::vector<bool> s{true, true, true, true, false, true, false, true, false, false, false, false};
    const auto t = locality_table(d, s, 4);
    std::vector<std::string> labels;
    for (const auto& b : t.bins) labels.push_back(b.label());
    EXPECT_EQ(labels, (std::vector<std::string>{"5-13", "14-16", "17-21", "22-57"}));
    EXPECT_NEAR(*t.bins[1].success_rate, 200.0 / 3.0, 1e-12);
}

TEST(LocalityTable, TiesStayInLowerBin) {
    const std::vector<double> d{1, 1, 1, 1, 1, 2};
    const std::vector<bool> s(6, false);
    const auto t = locality_table(d, s, 3);
    EXPECT_EQ(t.bins[0].count, 5u);
    EXPECT_EQ(t.bins[1].count, 0u);
    EXPECT_FALSE(t.bins[1].success_rate.has_value());
    EXPECT_THROW(locality_table(std::vector<double>{1.0}, std::vector<bool>{true}, 2), ValidationError);
}

TEST(FeatureLadder, MeansGapsAndPerSeedValues) {
    const std::vector<EvalResult> results{result("lowlevel", 0, 60, 50), result("lowlevel", 1, 62, 48),
                                          result("gtseg", 0, 55, 54)};
    const auto rows = feature_ladder(results);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].feature, "lowlevel");
    EXPECT_DOUBLE_EQ(rows[0].mean_seen, 61.0);
    EXPECT_DOUBLE_EQ(rows[0].mean_unseen, 49.0);
    EXPECT_DOUBLE_EQ(rows[0].gap, 12.0);
    EXPECT_NEAR(rows[0].sd_seen, std::sqrt(2.0), 1e-12);
    EXPECT_EQ(rows[0].per_seed_gaps(), (std::vector<double>{10.0, 14.0}));
    EXPECT_EQ(rows[1].sd_seen, 0.0);

    const auto csv = ladder_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), kLadderCsvHeader);
    EXPECT_NE(csv.find("lowlevel,61.0,49.0,12.0,1.4,1.4,0;1,60.0;62.0,50.0;48.0,10.0;14.0"), std::string::npos);
}

TEST(ResultsCsv, EmptyIsHeaderOnly) {
    EXPECT_EQ(results_csv({}), std::string(kResultsCsvHeader) + "\n");
}

TEST(ResultsCsv, RoundTrip) {
    const std::vector<EvalResult> results{result("zero", 0, 41.2, 38.4), result("gtseg", 3, 55.0, 54.5)};
    EXPECT_EQ(results_from_csv(results_csv(results)), results);
    EXPECT_THROW(results_from_csv("bad header\n"), LoadError);
    EXPECT_THROW(results_from_csv(std::string(kResultsCsvHeader) + "\nzero,0,val_seen,x,1,2\n"), LoadError);
}

TEST(ReportFormats, ParseNames) {
    EXPECT_EQ(parse_report_format("svg"), ReportFormat::Svg);
    EXPECT_THROW(parse_report_format("pdf"), ValidationError);
}

TEST(EmitReport, DeterministicFiles) {
    const std::vector<EvalResult> results{result("lowlevel", 0, 60, 50), result("gtseg", 0, 55, 54)};
    const auto dir = std::filesystem::temp_directory_path() / "vlnbias_emit_test";
    std::filesystem::remove_all(dir);
    const std::vector<ReportFormat> all{ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg};
    const auto first = emit_report(results, dir / "a", all);
    const auto second = emit_report(results, dir / "b", all);
    ASSERT_EQ(first.size(), 5u);
    for (std::size_t i = 0; i < first.size(); ++i) {
        EXPECT_EQ(first[i].filename(), second[i].filename());
        EXPECT_EQ(read_text_file(first[i]), read_text_file(second[i]));
    }
    const auto json = read_text_file(dir / "a" / "results.json");
    EXPECT_NE(json.find("\"feature_table\""), std::string::npos);
    EXPECT_NE(read_text_file(dir / "a" / "success_rate.svg").find("<svg"), std::string::npos);
    std::filesystem::remove_all(dir);
}
