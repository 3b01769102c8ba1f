#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "vlnbias/pipeline.hpp"
#include "vlnbias/format.hpp"
#include "vlnbias/neuralcore.hpp"

namespace fs = std::filesystem;
using namespace vlnbias;
using featurize::FeatureKind;
using pipeline::ExperimentConfig;

namespace {

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

struct Context {
    ExperimentConfig cfg;
    std::uint64_t seed = 0;
    fs::path out;
};

Context resolve(const CommonOptions& o) {
    Context c;
    c.cfg = o.config.empty() ? pipeline::default_experiment_config() : pipeline::load_config(o.config);
    if (o.seed) c.cfg.seeds = {*o.seed};
    if (!o.out.empty()) c.cfg.output_dir = o.out;
    c.cfg.validate();
    c.seed = c.cfg.seeds.front();
    c.out = c.cfg.output_dir;
    return c;
}

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config, "experiment config JSON");
    cmd->add_option("--seed", o.seed, "seed (overrides the config's seed list)");
    cmd->add_option("--out", o.out, "output directory");
}

void require_synthetic(const Context& c, std::string_view command) {
    if (!c.cfg.world) throw ConfigError(std::string(command) + " needs a synthetic world config");
}

fs::path need(const fs::path& path, std::string_view produced_by) {
    if (!fs::exists(path)) {
        throw LoadError(path.string() + " not found (run '" + std::string(produced_by) + "' first)");
    }
    return path;
}

worldgen::World load_world(const Context& c) {
    return worldgen::world_from_string(read_text_file(need(c.out / "world.json", "gen-world")));
}

std::vector<PathDatum> load_split(const Context& c, std::string_view name) {
    return pipeline::episodes_from_json(
        read_text_file(need(c.out / ("episodes_" + std::string(name) + ".json"), "split")));
}

navgraph::GraphIndex load_graphs(const Context& c) {
    if (c.cfg.dataset) return pipeline::load_external_dataset(c.cfg.dataset->graph_dir, c.cfg.dataset->items_file).graphs;
    return load_world(c).graphs();
}

featurize::FeatureTable load_features(const Context& c, FeatureKind kind) {
    const std::string name(featurize::to_string(kind));
    if (c.cfg.dataset) {
        const auto it = c.cfg.dataset->feature_tables.find(name);
        if (it == c.cfg.dataset->feature_tables.end()) throw ConfigError("no feature table for '" + name + "'");
        return featurize::FeatureTable::from_csv(read_text_file(it->second));
    }
    return featurize::FeatureTable::from_csv(read_text_file(need(c.out / ("features_" + name + ".csv"), "featurize")));
}

int vocab_size(const Context& c) {
    if (c.cfg.dataset) {
        return static_cast<int>(
            pipeline::load_external_dataset(c.cfg.dataset->graph_dir, c.cfg.dataset->items_file).vocabulary.size());
    }
    return worldgen::vocabulary_size(c.cfg.world->room_types, c.cfg.episodes.noise.synonyms);
}

void say(const fs::path& path) { std::cout << "wrote " << path.string() << "\n"; }

void write(const fs::path& path, std::string_view text) {
    write_text_file(path, text);
    say(path);
}

// --- subcommands ----------------------------------------------------------------------

void cmd_gen_world(const Context& c) {
    require_synthetic(c, "gen-world");
    worldgen::WorldSpec spec = *c.cfg.world;
    spec.seed = c.seed;
    const auto world = worldgen::generate_world(spec);
    write(c.out / "world.json", worldgen::world_to_string(world));
}

void cmd_split(const Context& c) {
    if (c.cfg.dataset) {
        const auto ds = pipeline::load_external_dataset(c.cfg.dataset->graph_dir, c.cfg.dataset->items_file);
        std::map<std::string, std::vector<PathDatum>> by_split;
        for (const auto& item : ds.items) {
            by_split[item.split.empty() ? "unassigned" : item.split].push_back(item.episode);
        }
        for (const auto& [name, episodes] : by_split) {
            write(c.out / ("episodes_" + name + ".json"), pipeline::episodes_to_json(episodes));
        }
        return;
    }
    const auto world = load_world(c);
    const auto splits = pipeline::make_episode_splits(world, c.cfg.episodes, c.cfg.split, c.seed);
    write(c.out / "episodes_train.json", pipeline::episodes_to_json(splits.train));
    write(c.out / "episodes_val_seen.json", pipeline::episodes_to_json(splits.val_seen));
    write(c.out / "episodes_val_unseen.json", pipeline::episodes_to_json(splits.val_unseen));
    nlohmann::json envs = {{"train_envs", splits.train_envs}, {"heldout_envs", splits.heldout_envs}};
    write(c.out / "envs.json", envs.dump(2) + "\n");
}

void cmd_train_seg(const Context& c) {
    require_synthetic(c, "train-seg");
    const auto world = load_world(c);
    std::vector<std::string> envs;
    for (const auto& e : world.envs) envs.push_back(e.id);
    const auto heldout = pipeline::heldout_env_ids(envs, c.cfg.split);
    std::erase_if(envs, [&](const std::string& id) { return std::find(heldout.begin(), heldout.end(), id) != heldout.end(); });
    const auto data = featurize::seg_dataset_from_world(world, envs, c.seed);
    featurize::SegHyper hyper = c.cfg.seg;
    hyper.seed = c.seed;
    const auto predictor = featurize::train_seg_predictor(data, featurize::default_partition(envs, c.seed), hyper);
    neuralcore::save_checkpoint(c.out / "seg_predictor.ckpt", predictor.params);
    say(c.out / "seg_predictor.ckpt");
    std::cout << "held-out BCE " << format_fixed(predictor.heldout_bce, 4) << " (constant-mean baseline "
              << format_fixed(predictor.baseline_heldout_bce, 4) << ")\n";
}

void cmd_featurize(const Context& c, const std::vector<std::string>& kinds) {
    require_synthetic(c, "featurize");
    const auto world = load_world(c);
    for (const auto& name : kinds) {
        featurize::FeaturizerConfig fc = c.cfg.featurizer;
        fc.kind = featurize::parse_feature_kind(name);
        fc.seed = c.seed;
        std::optional<featurize::SegPredictor> predictor;
        if (fc.kind == FeatureKind::LearnedSeg) {
            predictor.emplace();
            predictor->params = neuralcore::load_checkpoint(need(c.out / "seg_predictor.ckpt", "train-seg"));
        }
        const featurize::Featurizer featurizer(world, fc, std::move(predictor));
        write(c.out / ("features_" + name + ".csv"), featurize::build_feature_table(world, featurizer).to_csv());
    }
}

void cmd_train(const Context& c, const std::vector<std::string>& kinds) {
    const auto graphs = load_graphs(c);
    const auto train = load_split(c, "train");
    for (const auto& name : kinds) {
        const auto table = load_features(c, featurize::parse_feature_kind(name));
        agent::AgentHyper hyper = c.cfg.agent;
        hyper.dims.vocab = vocab_size(c);
        const auto trained = agent::train_imitation(train, {&graphs, &table}, hyper, hash_combine(c.seed, hash_tag(name)));
        neuralcore::save_checkpoint(c.out / ("agent_" + name + ".ckpt"), trained.params);
        say(c.out / ("agent_" + name + ".ckpt"));
        std::string curve = "epoch,loss\n";
        for (std::size_t i = 0; i < trained.loss_curve.size(); ++i) {
            curve += std::to_string(i) + "," + format_roundtrip(trained.loss_curve[i]) + "\n";
        }
        write(c.out / ("loss_" + name + ".csv"), curve);
    }
}

std::vector<evalreport::EvalResult> evaluate(const Context& c, const std::vector<std::string>& kinds) {
    const auto graphs = load_graphs(c);
    std::vector<evalreport::EvalResult> results;
    for (const auto& name : kinds) {
        const auto table = load_features(c, featurize::parse_feature_kind(name));
        const auto params = neuralcore::load_checkpoint(need(c.out / ("agent_" + name + ".ckpt"), "train"));
        const agent::NavContext ctx{&graphs, &table};
        evalreport::EvalResult r;
        r.feature = name;
        r.seed = c.seed;
        for (const char* split : {evalreport::kValSeen, evalreport::kValUnseen}) {
            if (!fs::exists(c.out / ("episodes_" + std::string(split) + ".json"))) continue;
            const auto episodes = load_split(c, split);
            std::vector<agent::Trajectory> trajs;
            for (const auto& ep : episodes) trajs.push_back(agent::rollout(params, ctx, ep, c.cfg.max_steps));
            r.splits.push_back(evalreport::evaluate_split(split, trajs, episodes, graphs, c.cfg.success_radius));
        }
        results.push_back(std::move(r));
    }
    return results;
}

void cmd_eval(const Context& c, const std::vector<std::string>& kinds) {
    const auto results = evaluate(c, kinds);
    write(c.out / "results.csv", evalreport::results_csv(results));
    for (const auto& r : results) {
        for (const auto& s : r.splits) {
            std::cout << r.feature << " " << s.split << " SR " << format_fixed(s.success_rate, 1) << " GP "
                      << format_fixed(s.goal_progress, 2) << "\n";
        }
    }
}

void cmd_lang_dist(const Context& c, const std::string& split, const std::string& feature, int bins) {
    const auto train = load_split(c, "train");
    const auto episodes = load_split(c, split);
    std::vector<std::optional<bool>> success;
    if (!feature.empty()) {
        const auto graphs = load_graphs(c);
        const auto table = load_features(c, featurize::parse_feature_kind(feature));
        const auto params = neuralcore::load_checkpoint(need(c.out / ("agent_" + feature + ".ckpt"), "train"));
        std::vector<agent::Trajectory> trajs;
        std::vector<std::string> goals;
        for (const auto& ep : episodes) {
            trajs.push_back(agent::rollout(params, {&graphs, &table}, ep, c.cfg.max_steps));
            goals.push_back(ep.goal);
        }
        for (bool ok : evalreport::successes(trajs, goals, graphs, c.cfg.success_radius)) success.push_back(ok);
    }
    const auto report = pipeline::lang_distance_report(train, episodes, success, bins);
    write(c.out / ("lang_distance_" + split + ".csv"), textmetrics::distance_report_csv(report));
    write(c.out / ("lang_histogram_" + split + ".csv"), textmetrics::histogram_csv(report));
}

void cmd_diagnose(const Context& c) {
    const auto bundle = pipeline::run_experiment(c.cfg);
    for (const auto& path : bundle.files) say(path);
    for (const auto& row : evalreport::feature_ladder(bundle.results)) {
        std::cout << row.feature << " seen " << format_fixed(row.mean_seen, 1) << " unseen "
                  << format_fixed(row.mean_unseen, 1) << " gap " << format_fixed(row.gap, 1) << "\n";
    }
}

void cmd_report(const Context& c, const std::string& results_file, const std::vector<std::string>& formats) {
    const fs::path source = results_file.empty() ? c.out / "results.csv" : fs::path(results_file);
    const auto results = evalreport::results_from_csv(read_text_file(need(source, "eval")));
    std::vector<evalreport::ReportFormat> fmts;
    for (const auto& f : formats) fmts.push_back(evalreport::parse_report_format(f));
    if (fmts.empty()) fmts = c.cfg.formats;
    for (const auto& path : evalreport::emit_report(results, c.out, fmts)) say(path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic benchmark for environment bias in instruction-following navigation"};
    app.require_subcommand(1);
    CommonOptions common;
    std::vector<std::string> kinds;
    std::string split = evalreport::kValUnseen;
    std::string lang_feature;
    int bins = 10;
    std::string results_file;
    std::vector<std::string> formats;

    auto* gen_world = app.add_subcommand("gen-world", "generate the synthetic world");
    auto* split_cmd = app.add_subcommand("split", "sample train / val_seen / val_unseen episodes");
    auto* featurize_cmd = app.add_subcommand("featurize", "build per-view feature tables");
    auto* train_seg = app.add_subcommand("train-seg", "train the learned segmentation predictor");
    auto* train = app.add_subcommand("train", "train navigation agents by imitation");
    auto* eval = app.add_subcommand("eval", "roll out trained agents and score them");
    auto* lang_dist = app.add_subcommand("lang-dist", "instruction distance to the training set");
    auto* diagnose = app.add_subcommand("diagnose", "run the whole experiment");
    auto* report = app.add_subcommand("report", "render report files from results.csv");
    for (auto* cmd : {gen_world, split_cmd, featurize_cmd, train_seg, train, eval, lang_dist, diagnose, report}) {
        add_common(cmd, common);
    }
    for (auto* cmd : {featurize_cmd, train, eval}) {
        cmd->add_option("--feature", kinds, "feature kinds (default: the config's list)");
    }
    lang_dist->add_option("--split", split, "evaluation split to measure");
    lang_dist->add_option("--feature", lang_feature, "score per-bin success with this trained agent");
    lang_dist->add_option("--bins", bins, "histogram bins");
    report->add_option("--results", results_file, "results CSV (default: <out>/results.csv)");
    report->add_option("--format", formats, "csv, json or svg");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? pipeline::kExitOk : pipeline::kExitConfig;
    }

    try {
        const Context c = resolve(common);
        if (kinds.empty()) {
            for (auto k : c.cfg.features) kinds.emplace_back(featurize::to_string(k));
        }
        try {
            for (const auto& k : kinds) featurize::parse_feature_kind(k);
            for (const auto& f : formats) evalreport::parse_report_format(f);
        } catch (const ValidationError& e) {
            throw ConfigError(e.what());
        }
        if (*gen_world) cmd_gen_world(c);
        if (*split_cmd) cmd_split(c);
        if (*featurize_cmd) cmd_featurize(c, kinds);
        if (*train_seg) cmd_train_seg(c);
        if (*train) cmd_train(c, kinds);
        if (*eval) cmd_eval(c, kinds);
        if (*lang_dist) cmd_lang_dist(c, split, lang_feature, bins);
        if (*diagnose) cmd_diagnose(c);
        if (*report) cmd_report(c, results_file, formats);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return pipeline::exit_code_for(e);
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return pipeline::kExitData;
    }
    return pipeline::kExitOk;
}
