#include "vlnbias/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <sstream>

#include "vlnbias/format.hpp"
#include "vlnbias/neuralcore.hpp"

namespace vlnbias::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using featurize::FeatureKind;

int exit_code_for(const Error& e) {
    if (dynamic_cast<const ConfigError*>(&e) != nullptr) return kExitConfig;
    if (dynamic_cast<const TrainingError*>(&e) != nullptr) return kExitTraining;
    return kExitData;
}

namespace {

// --- strict JSON helpers ----------------------------------------------------------

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
    if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError("unknown key '" + key + "' in " + std::string(where));
        }
    }
}

template <class T>
void read(const json& j, std::string_view key, T& out) {
    const std::string k(key);
    if (j.contains(k)) j.at(k).get_to(out);
}

worldgen::IntRange read_range(const json& j) {
    const auto v = j.get<std::vector<int>>();
    if (v.size() != 2) throw ConfigError("range fields take [lo, hi]");
    return worldgen::IntRange{v[0], v[1]};
}

// Rethrows `e` as the same error type with a prefix.
[[noreturn]] void rethrow_prefixed(const Error& e, const std::string& prefix) {
    const std::string msg = prefix + e.what();
    if (dynamic_cast<const ConfigError*>(&e)) throw ConfigError(msg);
    if (dynamic_cast<const TrainingError*>(&e)) throw TrainingError(msg);
    if (dynamic_cast<const LoadError*>(&e)) throw LoadError(msg);
    if (dynamic_cast<const IoError*>(&e)) throw IoError(msg);
    if (dynamic_cast<const GenerationError*>(&e)) throw GenerationError(msg);
    if (dynamic_cast<const SplitError*>(&e)) throw SplitError(msg);
    if (dynamic_cast<const DomainError*>(&e)) throw DomainError(msg);
    if (dynamic_cast<const LookupError*>(&e)) throw LookupError(msg);
    if (dynamic_cast<const ValidationError*>(&e)) throw ValidationError(msg);
    throw Error(msg);
}

template <class F>
auto staged(std::string_view stage, std::uint64_t seed, F&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        rethrow_prefixed(e, "stage " + std::string(stage) + ", seed " + std::to_string(seed) + ": ");
    } catch (const json::exception& e) {
        throw LoadError("stage " + std::string(stage) + ", seed " + std::to_string(seed) + ": " + e.what());
    }
}

std::string pair_key_env(const PathDatum& ep) { return ep.env_id + "/" + ep.path.front(); }

json read_json_file(const fs::path& path) {
    const std::string text = read_text_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw LoadError(path.string() + ": " + e.what());
    }
}

std::string seed_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

}  // namespace

// --- configuration --------------------------------------------------------------------

void ExperimentConfig::validate() const {
    if (features.empty()) throw ConfigError("at least one feature kind is required");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (world && dataset) throw ConfigError("give either a world spec or a dataset, not both");
    if (!world && !dataset) throw ConfigError("a world spec or a dataset is required");
    if (world) {
        try {
            world->validate();
        } catch (const ValidationError& e) {
            throw ConfigError(std::string("world: ") + e.what());
        }
    }
    if (dataset) {
        if (!fs::is_directory(dataset->graph_dir)) {
            throw ConfigError("dataset graph_dir '" + dataset->graph_dir.string() + "' does not exist");
        }
        if (!fs::is_regular_file(dataset->items_file)) {
            throw ConfigError("dataset items_file '" + dataset->items_file.string() + "' does not exist");
        }
        for (const auto& [kind, path] : dataset->feature_tables) {
            featurize::parse_feature_kind(kind);
            if (!fs::is_regular_file(path)) {
                throw ConfigError("feature table '" + path.string() + "' for " + kind + " does not exist");
            }
        }
        for (FeatureKind k : features) {
            if (k != FeatureKind::Zero && !dataset->feature_tables.contains(std::string(featurize::to_string(k)))) {
                throw ConfigError("dataset mode needs a feature table for '" + std::string(featurize::to_string(k)) +
                                  "'");
            }
        }
    }
    if (episodes.instructions_per_path < 1) throw ConfigError("instructions_per_path must be >= 1");
    if (episodes.path_edges.lo < 1 || episodes.path_edges.hi < episodes.path_edges.lo) {
        throw ConfigError("path_edges must be a nonempty range of positive edge counts");
    }
    if (split.heldout_envs < 0) throw ConfigError("heldout_envs must be >= 0");
    if (!(locality.fraction > 0.0 && locality.fraction < 1.0)) throw ConfigError("locality fraction must be in (0,1)");
    if (locality.bins < 1) throw ConfigError("locality bins must be >= 1");
    if (agent.batch < 1 || agent.epochs < 0 || !(agent.lr > 0.0) || !(agent.clip_norm > 0.0)) {
        throw ConfigError("invalid agent hyperparameters");
    }
    if (seg.batch < 1 || seg.epochs < 1 || !(seg.lr > 0.0)) throw ConfigError("invalid seg hyperparameters");
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
    if (!(success_radius >= 0.0)) throw ConfigError("success_radius must be >= 0");
}

ExperimentConfig default_experiment_config() {
    ExperimentConfig c;
    c.world = worldgen::WorldSpec{};
    c.agent.epochs = 8;
    return c;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c = default_experiment_config();
    try {
        check_keys(j,
                   {"world", "dataset", "episodes", "split", "locality", "features", "featurizer", "seg", "agent",
                    "max_steps", "success_radius", "seeds", "output_dir", "formats", "save_artifacts"},
                   "experiment config");
        if (j.contains("dataset")) {
            const auto& d = j.at("dataset");
            check_keys(d, {"graph_dir", "items_file", "feature_tables"}, "dataset");
            DatasetPaths paths;
            paths.graph_dir = d.at("graph_dir").get<std::string>();
            paths.items_file = d.at("items_file").get<std::string>();
            if (d.contains("feature_tables")) {
                for (const auto& [kind, path] : d.at("feature_tables").items()) {
                    paths.feature_tables[kind] = path.get<std::string>();
                }
            }
            c.dataset = paths;
            c.world.reset();
        }
        if (j.contains("world")) {
            worldgen::WorldSpec spec;
            j.at("world").get_to(spec);
            c.world = spec;
        }
        if (j.contains("episodes")) {
            const auto& e = j.at("episodes");
            check_keys(e,
                       {"train_paths", "instructions_per_path", "val_seen", "val_unseen", "path_edges", "dropout",
                        "insertion", "synonyms"},
                       "episodes");
            read(e, "train_paths", c.episodes.train_paths);
            read(e, "instructions_per_path", c.episodes.instructions_per_path);
            read(e, "val_seen", c.episodes.val_seen);
            read(e, "val_unseen", c.episodes.val_unseen);
            if (e.contains("path_edges")) c.episodes.path_edges = read_range(e.at("path_edges"));
            read(e, "dropout", c.episodes.noise.dropout);
            read(e, "insertion", c.episodes.noise.insertion);
            read(e, "synonyms", c.episodes.noise.synonyms);
        }
        if (j.contains("split")) {
            const auto& s = j.at("split");
            check_keys(s, {"heldout_envs", "env_unseen"}, "split");
            read(s, "heldout_envs", c.split.heldout_envs);
            read(s, "env_unseen", c.split.env_unseen);
        }
        if (j.contains("locality")) {
            const auto& l = j.at("locality");
            check_keys(l, {"enabled", "axis", "fraction", "pool", "bins", "features"}, "locality");
            read(l, "enabled", c.locality.enabled);
            if (l.contains("axis")) c.locality.axis = navgraph::parse_axis(l.at("axis").get<std::string>());
            read(l, "fraction", c.locality.fraction);
            read(l, "pool", c.locality.pool);
            read(l, "bins", c.locality.bins);
            if (l.contains("features")) {
                c.locality.kind = featurize::parse_feature_kind(l.at("features").get<std::string>());
            }
        }
        if (j.contains("features")) {
            c.features.clear();
            for (const auto& k : j.at("features")) c.features.push_back(featurize::parse_feature_kind(k.get<std::string>()));
        }
        if (j.contains("featurizer")) {
            const auto& f = j.at("featurizer");
            check_keys(f,
                       {"zero_dim", "labels_per_class", "label_gain", "classprob_temperature", "classprob_noise_sd",
                        "detection_coverage", "detection"},
                       "featurizer");
            read(f, "zero_dim", c.featurizer.zero_dim);
            read(f, "labels_per_class", c.featurizer.labels_per_class);
            read(f, "label_gain", c.featurizer.label_gain);
            read(f, "classprob_temperature", c.featurizer.classprob_temperature);
            read(f, "classprob_noise_sd", c.featurizer.classprob_noise_sd);
            read(f, "detection_coverage", c.featurizer.detection_coverage);
            if (f.contains("detection")) {
                const auto& d = f.at("detection");
                check_keys(d, {"min_area", "conf_alpha", "conf_beta", "distractor_labels", "distractor_rate"},
                           "featurizer.detection");
                read(d, "min_area", c.featurizer.detection.min_area);
                read(d, "conf_alpha", c.featurizer.detection.conf_alpha);
                read(d, "conf_beta", c.featurizer.detection.conf_beta);
                read(d, "distractor_labels", c.featurizer.detection.distractor_labels);
                read(d, "distractor_rate", c.featurizer.detection.distractor_rate);
            }
        }
        if (j.contains("seg")) {
            const auto& s = j.at("seg");
            check_keys(s, {"lr", "batch", "epochs", "patience", "dropout", "clip_norm", "hidden1", "hidden2"}, "seg");
            read(s, "lr", c.seg.lr);
            read(s, "batch", c.seg.batch);
            read(s, "epochs", c.seg.epochs);
            read(s, "patience", c.seg.patience);
            read(s, "dropout", c.seg.dropout);
            read(s, "clip_norm", c.seg.clip_norm);
            read(s, "hidden1", c.seg.hidden1);
            read(s, "hidden2", c.seg.hidden2);
        }
        if (j.contains("agent")) {
            const auto& a = j.at("agent");
            check_keys(a, {"batch", "epochs", "lr", "clip_norm", "embed", "hidden", "projection"}, "agent");
            read(a, "batch", c.agent.batch);
            read(a, "epochs", c.agent.epochs);
            read(a, "lr", c.agent.lr);
            read(a, "clip_norm", c.agent.clip_norm);
            read(a, "embed", c.agent.dims.embed);
            read(a, "hidden", c.agent.dims.hidden);
            read(a, "projection", c.agent.dims.projection);
        }
        read(j, "max_steps", c.max_steps);
        read(j, "success_radius", c.success_radius);
        read(j, "seeds", c.seeds);
        if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("formats")) {
            c.formats.clear();
            for (const auto& f : j.at("formats")) c.formats.push_back(evalreport::parse_report_format(f.get<std::string>()));
        }
        read(j, "save_artifacts", c.save_artifacts);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    } catch (const ValidationError& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }
    return c;
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    if (c.world) j["world"] = *c.world;
    if (c.dataset) {
        json tables = json::object();
        for (const auto& [kind, path] : c.dataset->feature_tables) tables[kind] = path.string();
        j["dataset"] = {{"graph_dir", c.dataset->graph_dir.string()},
                        {"items_file", c.dataset->items_file.string()},
                        {"feature_tables", tables}};
    }
    j["episodes"] = {{"train_paths", c.episodes.train_paths},
                     {"instructions_per_path", c.episodes.instructions_per_path},
                     {"val_seen", c.episodes.val_seen},
                     {"val_unseen", c.episodes.val_unseen},
                     {"path_edges", {c.episodes.path_edges.lo, c.episodes.path_edges.hi}},
                     {"dropout", c.episodes.noise.dropout},
                     {"insertion", c.episodes.noise.insertion},
                     {"synonyms", c.episodes.noise.synonyms}};
    j["split"] = {{"heldout_envs", c.split.heldout_envs}, {"env_unseen", c.split.env_unseen}};
    j["locality"] = {{"enabled", c.locality.enabled},
                     {"axis", navgraph::to_string(c.locality.axis)},
                     {"fraction", c.locality.fraction},
                     {"pool", c.locality.pool},
                     {"bins", c.locality.bins},
                     {"features", featurize::to_string(c.locality.kind)}};
    json kinds = json::array();
    for (auto k : c.features) kinds.push_back(featurize::to_string(k));
    j["features"] = kinds;
    const auto& f = c.featurizer;
    j["featurizer"] = {{"zero_dim", f.zero_dim},
                       {"labels_per_class", f.labels_per_class},
                       {"label_gain", f.label_gain},
                       {"classprob_temperature", f.classprob_temperature},
                       {"classprob_noise_sd", f.classprob_noise_sd},
                       {"detection_coverage", f.detection_coverage},
                       {"detection",
                        {{"min_area", f.detection.min_area},
                         {"conf_alpha", f.detection.conf_alpha},
                         {"conf_beta", f.detection.conf_beta},
                         {"distractor_labels", f.detection.distractor_labels},
                         {"distractor_rate", f.detection.distractor_rate}}}};
    j["seg"] = {{"lr", c.seg.lr},           {"batch", c.seg.batch},         {"epochs", c.seg.epochs},
                {"patience", c.seg.patience}, {"dropout", c.seg.dropout},   {"clip_norm", c.seg.clip_norm},
                {"hidden1", c.seg.hidden1},   {"hidden2", c.seg.hidden2}};
    j["agent"] = {{"batch", c.agent.batch},        {"epochs", c.agent.epochs},
                  {"lr", c.agent.lr},              {"clip_norm", c.agent.clip_norm},
                  {"embed", c.agent.dims.embed},   {"hidden", c.agent.dims.hidden},
                  {"projection", c.agent.dims.projection}};
    j["max_steps"] = c.max_steps;
    j["success_radius"] = c.success_radius;
    j["seeds"] = c.seeds;
    j["output_dir"] = c.output_dir.string();
    json formats = json::array();
    for (auto fm : c.formats) formats.push_back(evalreport::to_string(fm));
    j["formats"] = formats;
    j["save_artifacts"] = c.save_artifacts;
    return j;
}

ExperimentConfig load_config(const fs::path& path) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    ExperimentConfig c = config_from_json(j);
    if (c.dataset) {
        const fs::path base = path.parent_path();
        auto resolve = [&](fs::path& p) {
            if (p.is_relative()) p = base / p;
        };
        resolve(c.dataset->graph_dir);
        resolve(c.dataset->items_file);
        for (auto& [kind, p] : c.dataset->feature_tables) resolve(p);
    }
    c.validate();
    return c;
}

// --- episodes ------------------------------------------------------------------------------

std::vector<std::string> heldout_env_ids(std::span<const std::string> all_envs, const EnvSplitSpec& spec) {
    if (!spec.env_unseen.empty()) {
        for (const auto& id : spec.env_unseen) {
            if (std::find(all_envs.begin(), all_envs.end(), id) == all_envs.end()) {
                throw ValidationError("env_unseen lists unknown environment '" + id + "'");
            }
        }
        return spec.env_unseen;
    }
    const auto n = static_cast<std::size_t>(spec.heldout_envs);
    if (n >= all_envs.size()) {
        throw ValidationError("cannot hold out " + std::to_string(n) + " of " + std::to_string(all_envs.size()) +
                              " environments");
    }
    return {all_envs.end() - static_cast<std::ptrdiff_t>(n), all_envs.end()};
}

std::vector<PathDatum> sample_distinct_paths(const worldgen::World& world, std::span<const std::string> envs,
                                             std::size_t paths, int instructions, const EpisodeSpec& spec,
                                             const std::set<std::pair<std::string, std::string>>& exclude,
                                             std::string_view prefix, std::uint64_t seed) {
    constexpr int kMaxRounds = 40;
    std::vector<PathDatum> found;
    if (paths == 0) return found;
    if (envs.empty()) throw GenerationError("no environments to sample " + std::string(prefix) + " paths from");
    std::set<std::pair<std::string, std::string>> taken = exclude;
    for (int round = 0, stale = 0; found.size() < paths; ++round) {
        if (round == kMaxRounds || stale == 2) {
            throw GenerationError("only " + std::to_string(found.size()) + " distinct " + std::string(prefix) +
                                  " paths available, " + std::to_string(paths) + " requested");
        }
        worldgen::EpisodeRequest request;
        request.count = 2 * (paths - found.size()) + 64;
        request.path_edges = spec.path_edges;
        request.env_ids.assign(envs.begin(), envs.end());
        request.noise = spec.noise;
        auto batch = worldgen::sample_episodes(world, request, hash_combine(seed, static_cast<std::uint64_t>(round)));
        const std::size_t before = found.size();
        for (auto& ep : batch) {
            if (!taken.insert({pair_key_env(ep), ep.goal}).second) continue;
            found.push_back(std::move(ep));
            if (found.size() == paths) break;
        }
        stale = found.size() == before ? stale + 1 : 0;
    }
    std::vector<PathDatum> out;
    out.reserve(paths * static_cast<std::size_t>(instructions));
    char id[64];
    for (std::size_t i = 0; i < found.size(); ++i) {
        for (int k = 0; k < instructions; ++k) {
            PathDatum ep = found[i];
            std::snprintf(id, sizeof id, "%s_%05zu_%d", std::string(prefix).c_str(), i, k);
            ep.id = id;
            ep.instruction = worldgen::render_instruction(
                world, ep, spec.noise, hash_combine(hash_combine(seed, hash_tag("instruction")), i * 64 + static_cast<std::size_t>(k)));
            out.push_back(std::move(ep));
        }
    }
    return out;
}

EpisodeSplits make_episode_splits(const worldgen::World& world, const EpisodeSpec& spec, const EnvSplitSpec& split,
                                  std::uint64_t seed) {
    std::vector<std::string> all;
    for (const auto& e : world.envs) all.push_back(e.id);
    EpisodeSplits s;
    s.heldout_envs = heldout_env_ids(all, split);
    for (const auto& id : all) {
        if (std::find(s.heldout_envs.begin(), s.heldout_envs.end(), id) == s.heldout_envs.end()) {
            s.train_envs.push_back(id);
        }
    }
    s.train = sample_distinct_paths(world, s.train_envs, spec.train_paths, spec.instructions_per_path, spec, {},
                                    "train", hash_combine(seed, hash_tag("train")));
    std::set<std::pair<std::string, std::string>> used;
    for (const auto& ep : s.train) used.insert({pair_key_env(ep), ep.goal});
    s.val_seen = sample_distinct_paths(world, s.train_envs, spec.val_seen, 1, spec, used, "val_seen",
                                       hash_combine(seed, hash_tag("val_seen")));
    worldgen::EpisodeRequest unseen;
    unseen.count = spec.val_unseen;
    unseen.path_edges = spec.path_edges;
    unseen.env_ids = s.heldout_envs;
    unseen.noise = spec.noise;
    unseen.id_prefix = "val_unseen";
    if (spec.val_unseen > 0) {
        s.val_unseen = worldgen::sample_episodes(world, unseen, hash_combine(seed, hash_tag("val_unseen")));
    }
    return s;
}

std::string episodes_to_json(std::span<const PathDatum> episodes) {
    json j = json::array();
    for (const auto& ep : episodes) j.push_back(ep);
    return j.dump(1) + "\n";
}

std::vector<PathDatum> episodes_from_json(std::string_view text) {
    try {
        const json j = json::parse(text);
        if (!j.is_array()) throw LoadError("episode file must hold a JSON array");
        std::vector<PathDatum> out;
        for (std::size_t i = 0; i < j.size(); ++i) {
            try {
                out.push_back(j[i].get<PathDatum>());
            } catch (const json::exception& e) {
                throw LoadError("episode record " + std::to_string(i) + ": " + e.what());
            }
        }
        return out;
    } catch (const json::parse_error& e) {
        throw LoadError(std::string("episode file: ") + e.what());
    }
}

// --- external datasets ------------------------------------------------------------------------

ExternalDataset load_external_dataset(const fs::path& graph_dir, const fs::path& items_file) {
    ExternalDataset ds;
    if (!fs::is_directory(graph_dir)) throw LoadError(graph_dir.string() + ": not a directory");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(graph_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        const std::string env_id = file.stem().string();
        const json j = read_json_file(file);
        auto fail = [&](std::size_t record, std::string_view field, const std::string& msg) -> LoadError {
            return LoadError(file.string() + " record " + std::to_string(record) + " field '" + std::string(field) +
                             "': " + msg);
        };
        if (!j.is_array()) throw LoadError(file.string() + ": expected a JSON array of viewpoints");
        navgraph::NavGraph graph(env_id);
        for (std::size_t r = 0; r < j.size(); ++r) {
            const auto& rec = j[r];
            if (!rec.is_object()) throw fail(r, "viewpoint_id", "record is not an object");
            if (!rec.contains("viewpoint_id") || !rec["viewpoint_id"].is_string()) {
                throw fail(r, "viewpoint_id", "missing or not a string");
            }
            const auto id = rec["viewpoint_id"].get<std::string>();
            if (graph.find(id)) throw fail(r, "viewpoint_id", "duplicate viewpoint '" + id + "'");
            if (!rec.contains("position") || !rec["position"].is_array() || rec["position"].size() != 3) {
                throw fail(r, "position", "expected [x, y, z]");
            }
            for (const auto& c : rec["position"]) {
                if (!c.is_number()) throw fail(r, "position", "coordinates must be numbers");
            }
            graph.add_viewpoint(id, {rec["position"][0].get<double>(), rec["position"][1].get<double>(),
                                     rec["position"][2].get<double>()});
        }
        std::vector<std::set<std::size_t>> adjacency(graph.size());
        for (std::size_t r = 0; r < j.size(); ++r) {
            const auto& rec = j[r];
            if (!rec.contains("neighbors") || !rec["neighbors"].is_array()) {
                throw fail(r, "neighbors", "missing or not an array");
            }
            for (const auto& n : rec["neighbors"]) {
                if (!n.is_string()) throw fail(r, "neighbors", "neighbor ids must be strings");
                const auto other = graph.find(n.get<std::string>());
                if (!other) throw fail(r, "neighbors", "unknown viewpoint '" + n.get<std::string>() + "'");
                if (*other == r) throw fail(r, "neighbors", "self loop");
                adjacency[r].insert(*other);
            }
        }
        for (std::size_t a = 0; a < adjacency.size(); ++a) {
            for (std::size_t b : adjacency[a]) {
                if (!adjacency[b].contains(a)) {
                    throw fail(a, "neighbors", "edge to '" + graph.id(b) + "' is not symmetric");
                }
                if (a < b) graph.add_edge(a, b);
            }
        }
        ds.graphs.emplace(env_id, std::move(graph));
    }

    const json items = read_json_file(items_file);
    if (!items.is_array()) throw LoadError(items_file.string() + ": expected a JSON array of items");
    for (std::size_t r = 0; r < items.size(); ++r) {
        const auto& rec = items[r];
        auto fail = [&](std::string_view field, const std::string& msg) -> LoadError {
            return LoadError(items_file.string() + " record " + std::to_string(r) + " field '" + std::string(field) +
                             "': " + msg);
        };
        if (!rec.is_object()) throw fail("id", "record is not an object");
        for (const char* field : {"id", "env_id", "instruction"}) {
            if (!rec.contains(field) || !rec[field].is_string()) throw fail(field, "missing or not a string");
        }
        ExternalItem item;
        item.episode.id = rec["id"].get<std::string>();
        item.episode.env_id = rec["env_id"].get<std::string>();
        const auto g = ds.graphs.find(item.episode.env_id);
        if (g == ds.graphs.end()) throw fail("env_id", "unknown environment '" + item.episode.env_id + "'");
        if (!rec.contains("path") || !rec["path"].is_array() || rec["path"].size() < 2) {
            throw fail("path", "expected at least two viewpoint ids");
        }
        for (const auto& v : rec["path"]) {
            if (!v.is_string()) throw fail("path", "viewpoint ids must be strings");
            const auto id = v.get<std::string>();
            const auto idx = g->second.find(id);
            if (!idx) throw fail("path", "unknown viewpoint '" + id + "'");
            if (!item.episode.path.empty() &&
                !g->second.has_edge(g->second.index_of(item.episode.path.back()), *idx)) {
                throw fail("path", "step to '" + id + "' is not a graph edge");
            }
            item.episode.path.push_back(id);
        }
        item.episode.goal = item.episode.path.back();
        const auto text = rec["instruction"].get<std::string>();
        item.instructions.push_back(text);
        item.episode.instruction = ds.vocabulary.encode(text);
        if (item.episode.instruction.empty()) throw fail("instruction", "instruction has no tokens");
        if (rec.contains("split")) {
            if (!rec["split"].is_string()) throw fail("split", "not a string");
            item.split = rec["split"].get<std::string>();
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

void save_external_dataset(const ExternalDataset& dataset, const fs::path& graph_dir, const fs::path& items_file) {
    for (const auto& [env_id, graph] : dataset.graphs) {
        json arr = json::array();
        for (std::size_t v = 0; v < graph.size(); ++v) {
            json nbrs = json::array();
            for (const auto& e : graph.neighbors(v)) nbrs.push_back(graph.id(e.to));
            const auto& p = graph.position(v);
            arr.push_back({{"viewpoint_id", graph.id(v)}, {"position", {p.x, p.y, p.z}}, {"neighbors", nbrs}});
        }
        write_text_file(graph_dir / (env_id + ".json"), arr.dump(1) + "\n");
    }
    json items = json::array();
    for (const auto& item : dataset.items) {
        json rec = {{"id", item.episode.id},
                    {"env_id", item.episode.env_id},
                    {"path", item.episode.path},
                    {"instruction", item.instructions.empty() ? std::string() : item.instructions.front()}};
        if (!item.split.empty()) rec["split"] = item.split;
        items.push_back(std::move(rec));
    }
    write_text_file(items_file, items.dump(1) + "\n");
}

// --- language distance --------------------------------------------------------------------------

textmetrics::DistanceReport lang_distance_report(std::span<const PathDatum> training,
                                                 std::span<const PathDatum> evaluation,
                                                 const std::vector<std::optional<bool>>& success, int num_bins) {
    if (training.empty()) throw DomainError("no training instructions to compare against");
    if (!success.empty() && success.size() != evaluation.size()) {
        throw ValidationError("success flags do not match the evaluation items");
    }
    std::vector<TokenSeq> refs;
    refs.reserve(training.size());
    for (const auto& t : training) refs.push_back(t.instruction);
    const textmetrics::ReferenceIndex index(refs);

    textmetrics::DistanceReport report;
    std::vector<double> rouge;
    std::vector<double> bleu;
    const bool known = !success.empty() &&
                       std::all_of(success.begin(), success.end(), [](const auto& s) { return s.has_value(); });
    auto flags = std::make_unique<bool[]>(evaluation.size());
    for (std::size_t i = 0; i < evaluation.size(); ++i) {
        textmetrics::DistanceItem item;
        item.item_id = evaluation[i].id;
        item.dis_rouge = textmetrics::dis_rouge(evaluation[i].instruction, refs);
        item.dis_bleu = textmetrics::dis_bleu(evaluation[i].instruction, index);
        if (!success.empty()) item.success = success[i];
        flags[i] = known && *success[i];
        rouge.push_back(item.dis_rouge);
        bleu.push_back(item.dis_bleu);
        report.items.push_back(std::move(item));
    }
    const std::span<const bool> flag_span(flags.get(), evaluation.size());
    report.rouge = textmetrics::distance_success_table(rouge, flag_span, num_bins);
    report.bleu = textmetrics::distance_success_table(bleu, flag_span, num_bins);
    if (!known) {
        for (auto* h : {&report.rouge, &report.bleu}) {
            for (auto& bin : h->bins) {
                bin.successes = 0;
                bin.success_rate.reset();
            }
        }
    }
    return report;
}

// --- experiment ------------------------------------------------------------------------------

namespace {

struct SeedData {
    const worldgen::World* world = nullptr;  // synthetic mode only
    navgraph::GraphIndex graphs;
    std::vector<PathDatum> train;
    std::vector<PathDatum> val_seen;
    std::vector<PathDatum> val_unseen;
    std::vector<std::string> train_envs;
    std::vector<std::string> heldout_envs;
};

std::vector<agent::Trajectory> rollouts(const neuralcore::ParamSet& params, const agent::NavContext& ctx,
                                        std::span<const PathDatum> episodes, int max_steps) {
    std::vector<agent::Trajectory> out;
    out.reserve(episodes.size());
    for (const auto& ep : episodes) out.push_back(agent::rollout(params, ctx, ep, max_steps));
    return out;
}

std::string trajectories_json(std::span<const agent::Trajectory> trajs) {
    json arr = json::array();
    for (const auto& t : trajs) {
        arr.push_back({{"episode_id", t.episode_id},
                       {"env_id", t.env_id},
                       {"visited", t.visited},
                       {"actions", t.actions},
                       {"terminated_by", t.terminated_by == agent::Termination::Stop ? "STOP" : "MAX_STEPS"}});
    }
    return arr.dump(1) + "\n";
}

std::string loss_curve_csv(std::span<const double> curve) {
    std::string out = "epoch,loss\n";
    for (std::size_t i = 0; i < curve.size(); ++i) out += std::to_string(i) + "," + format_roundtrip(curve[i]) + "\n";
    return out;
}

featurize::FeatureTable zero_table(const navgraph::GraphIndex& graphs, int dim) {
    featurize::FeatureTable table("zero", dim);
    const std::vector<double> zeros(static_cast<std::size_t>(dim), 0.0);
    for (const auto& [env_id, graph] : graphs) {
        for (std::size_t v = 0; v < graph.size(); ++v) {
            for (int d = 0; d < worldgen::kDirections; ++d) table.set(env_id, graph.id(v), d, zeros);
        }
    }
    return table;
}

class FeatureSource {
public:
    FeatureSource(const ExperimentConfig& cfg, const SeedData& data, std::uint64_t seed, const fs::path& dir)
        : cfg_(cfg), data_(data), seed_(seed), dir_(dir) {}

    featurize::FeatureTable table(FeatureKind kind) {
        const std::string name(featurize::to_string(kind));
        if (cfg_.dataset) {
            if (kind == FeatureKind::Zero) return zero_table(data_.graphs, cfg_.featurizer.zero_dim);
            return featurize::FeatureTable::from_csv(read_text_file(cfg_.dataset->feature_tables.at(name)));
        }
        featurize::FeaturizerConfig fc = cfg_.featurizer;
        fc.kind = kind;
        fc.seed = seed_;
        std::optional<featurize::SegPredictor> predictor;
        if (kind == FeatureKind::LearnedSeg) predictor = seg_predictor();
        const featurize::Featurizer featurizer(*data_.world, fc, predictor);
        return featurize::build_feature_table(*data_.world, featurizer);
    }

    const featurize::SegPredictor& seg_predictor() {
        if (!predictor_) {
            predictor_ = staged("train-seg", seed_, [&] {
                const auto dataset = featurize::seg_dataset_from_world(*data_.world, data_.train_envs, seed_);
                featurize::SegHyper hyper = cfg_.seg;
                hyper.seed = seed_;
                return featurize::train_seg_predictor(dataset, featurize::default_partition(data_.train_envs, seed_),
                                                      hyper);
            });
            if (cfg_.save_artifacts) {
                neuralcore::save_checkpoint(dir_ / "seg_predictor.ckpt", predictor_->params);
                json summary = {{"train_envs", predictor_->partition.train_envs},
                                {"heldout_envs", predictor_->partition.heldout_envs},
                                {"heldout_bce", predictor_->heldout_bce},
                                {"baseline_heldout_bce", predictor_->baseline_heldout_bce},
                                {"best_epoch", predictor_->best_epoch},
                                {"train_loss", predictor_->train_loss}};
                write_text_file(dir_ / "seg_predictor.json", summary.dump(2) + "\n");
            }
        }
        return *predictor_;
    }

private:
    const ExperimentConfig& cfg_;
    const SeedData& data_;
    std::uint64_t seed_;
    fs::path dir_;
    std::optional<featurize::SegPredictor> predictor_;
};

int vocabulary_for(const ExperimentConfig& cfg, const SeedData& data, const ExternalDataset* external) {
    if (external != nullptr) return static_cast<int>(std::max<std::size_t>(1, external->vocabulary.size()));
    return worldgen::vocabulary_size(data.world->spec.room_types, cfg.episodes.noise.synonyms);
}

LocalityResult run_locality(const ExperimentConfig& cfg, const SeedData& data, FeatureSource& features, int vocab,
                            std::uint64_t seed, const fs::path& dir) {
    const auto pool = staged("locality", seed, [&] {
        if (data.world == nullptr) {
            std::vector<PathDatum> extra = data.val_seen;
            return extra;
        }
        return sample_distinct_paths(*data.world, data.train_envs, cfg.locality.pool, 1, cfg.episodes, {}, "pool",
                                     hash_combine(seed, hash_tag("locality_pool")));
    });
    std::vector<PathDatum> all = data.train;
    all.insert(all.end(), pool.begin(), pool.end());
    std::set<std::string> train_ids;
    for (const auto& ep : data.train) train_ids.insert(ep.id);
    const std::set<std::string> heldout(data.heldout_envs.begin(), data.heldout_envs.end());

    const auto assignment = staged("split", seed, [&] {
        std::map<std::string, double> cuts;
        for (const auto& env : data.train_envs) {
            cuts[env] = navgraph::choose_cut(navgraph::graph_for(data.graphs, env), cfg.locality.axis,
                                             cfg.locality.fraction);
        }
        navgraph::SplitInput input{all, &train_ids, &heldout};
        return navgraph::structural_split(data.graphs, input, cfg.locality.axis, cuts);
    });

    std::vector<PathDatum> train_side;
    std::vector<PathDatum> unseen;
    for (const auto& ep : data.train) {
        if (assignment.split_items.at(ep.id) == navgraph::SplitCategory::Train) train_side.push_back(ep);
    }
    for (const auto& ep : pool) {
        if (assignment.split_items.at(ep.id) == navgraph::SplitCategory::PathUnseen) unseen.push_back(ep);
    }
    const auto table = staged("featurize", seed, [&] { return features.table(cfg.locality.kind); });
    const agent::NavContext ctx{&data.graphs, &table};
    agent::AgentHyper hyper = cfg.agent;
    hyper.dims.vocab = vocab;
    const auto trained = staged("train", seed, [&] {
        return agent::train_imitation(train_side, ctx, hyper, hash_combine(seed, hash_tag("locality_agent")));
    });
    return staged("eval", seed, [&] {
        const auto distances = navgraph::build_distance_table(data.graphs, train_side, unseen);
        const auto trajs = rollouts(trained.params, ctx, unseen, cfg.max_steps);
        std::vector<std::string> goals;
        std::vector<double> dis;
        for (const auto& ep : unseen) {
            goals.push_back(ep.goal);
            dis.push_back(distances.dis_path.at(ep.id));
        }
        const auto flags = evalreport::successes(trajs, goals, data.graphs, cfg.success_radius);
        LocalityResult result;
        result.seed = seed;
        result.table = evalreport::locality_table(dis, flags, cfg.locality.bins);
        result.train_items = train_side.size();
        if (cfg.save_artifacts) {
            json split_doc = assignment;
            write_text_file(dir / "locality_split.json", split_doc.dump(1) + "\n");
            json dist_doc = distances;
            write_text_file(dir / "locality_distances.json", dist_doc.dump(1) + "\n");
            neuralcore::save_checkpoint(dir / "agent_locality.ckpt", trained.params);
        }
        write_text_file(dir / "locality.csv", evalreport::locality_csv(result.table));
        return result;
    });
}

}  // namespace

std::string locality_summary_csv(std::span<const LocalityResult> results) {
    std::string out = "bin,mean_success_rate,seeds,per_seed_range,per_seed_count,per_seed_success_rate\n";
    if (results.empty()) return out;
    const std::size_t bins = results.front().table.bins.size();
    for (std::size_t k = 0; k < bins; ++k) {
        double total = 0.0;
        std::size_t counted = 0;
        std::string seeds, ranges, counts, rates;
        for (std::size_t i = 0; i < results.size(); ++i) {
            const auto& bin = results[i].table.bins.at(k);
            const std::string sep = i ? ";" : "";
            seeds += sep + std::to_string(results[i].seed);
            ranges += sep + bin.label();
            counts += sep + std::to_string(bin.count);
            rates += sep + (bin.success_rate ? format_fixed(*bin.success_rate, 1) : std::string());
            if (bin.success_rate) {
                total += *bin.success_rate;
                ++counted;
            }
        }
        out += std::to_string(k) + "," + (counted ? format_fixed(total / static_cast<double>(counted), 1) : "") + "," +
               seeds + "," + ranges + "," + counts + "," + rates + "\n";
    }
    return out;
}

ReportBundle run_experiment(const ExperimentConfig& config) {
    config.validate();
    ReportBundle bundle;
    const fs::path out = config.output_dir;

    std::optional<ExternalDataset> external;
    if (config.dataset) {
        external = staged("load", config.seeds.front(),
                          [&] { return load_external_dataset(config.dataset->graph_dir, config.dataset->items_file); });
    }

    for (const std::uint64_t seed : config.seeds) {
        const fs::path dir = out / seed_dir_name(seed);
        SeedData data;
        std::optional<worldgen::World> world;
        if (external) {
            data.graphs = external->graphs;
            std::set<std::string> unseen_envs;
            for (const auto& item : external->items) {
                if (item.split == "train") data.train.push_back(item.episode);
                if (item.split == evalreport::kValSeen) data.val_seen.push_back(item.episode);
                if (item.split == evalreport::kValUnseen) {
                    data.val_unseen.push_back(item.episode);
                    unseen_envs.insert(item.episode.env_id);
                }
            }
            for (const auto& id : config.split.env_unseen) unseen_envs.insert(id);
            for (const auto& [env_id, graph] : data.graphs) {
                (unseen_envs.contains(env_id) ? data.heldout_envs : data.train_envs).push_back(env_id);
            }
            if (data.train.empty()) throw LoadError("stage load, seed " + std::to_string(seed) + ": no train items");
        } else {
            world = staged("gen-world", seed, [&] {
                worldgen::WorldSpec spec = *config.world;
                spec.seed = seed;
                return worldgen::generate_world(spec);
            });
            data.world = &*world;
            data.graphs = world->graphs();
            auto splits = staged("split", seed,
                                 [&] { return make_episode_splits(*world, config.episodes, config.split, seed); });
            data.train = std::move(splits.train);
            data.val_seen = std::move(splits.val_seen);
            data.val_unseen = std::move(splits.val_unseen);
            data.train_envs = std::move(splits.train_envs);
            data.heldout_envs = std::move(splits.heldout_envs);
            if (config.save_artifacts) {
                write_text_file(dir / "world.json", worldgen::world_to_string(*world));
                write_text_file(dir / "episodes_train.json", episodes_to_json(data.train));
                write_text_file(dir / "episodes_val_seen.json", episodes_to_json(data.val_seen));
                write_text_file(dir / "episodes_val_unseen.json", episodes_to_json(data.val_unseen));
            }
        }

        const int vocab = vocabulary_for(config, data, external ? &*external : nullptr);
        FeatureSource features(config, data, seed, dir);
        for (const FeatureKind kind : config.features) {
            const std::string name(featurize::to_string(kind));
            const auto table = staged("featurize", seed, [&] { return features.table(kind); });
            if (config.save_artifacts) write_text_file(dir / ("features_" + name + ".csv"), table.to_csv());
            const agent::NavContext ctx{&data.graphs, &table};
            agent::AgentHyper hyper = config.agent;
            hyper.dims.vocab = vocab;
            const auto trained = staged("train", seed, [&] {
                return agent::train_imitation(data.train, ctx, hyper, hash_combine(seed, hash_tag(name)));
            });
            if (config.save_artifacts) {
                neuralcore::save_checkpoint(dir / ("agent_" + name + ".ckpt"), trained.params);
                write_text_file(dir / ("loss_" + name + ".csv"), loss_curve_csv(trained.loss_curve));
            }
            auto result = staged("eval", seed, [&] {
                evalreport::EvalResult r;
                r.feature = name;
                r.seed = seed;
                const std::pair<const char*, const std::vector<PathDatum>*> splits[] = {
                    {evalreport::kValSeen, &data.val_seen}, {evalreport::kValUnseen, &data.val_unseen}};
                for (const auto& [split, episodes] : splits) {
                    if (episodes->empty()) continue;
                    const auto trajs = rollouts(trained.params, ctx, *episodes, config.max_steps);
                    r.splits.push_back(evalreport::evaluate_split(split, trajs, *episodes, data.graphs,
                                                                  config.success_radius));
                    if (config.save_artifacts) {
                        write_text_file(dir / ("trajectories_" + name + "_" + split + ".json"), trajectories_json(trajs));
                    }
                }
                return r;
            });
            bundle.results.push_back(std::move(result));
        }

        if (config.locality.enabled) {
            bundle.locality.push_back(run_locality(config, data, features, vocab, seed, dir));
        }
    }

    bundle.files = staged("report", config.seeds.back(), [&] {
        auto files = evalreport::emit_report(bundle.results, out, config.formats);
        if (!bundle.locality.empty()) {
            write_text_file(out / "locality_summary.csv", locality_summary_csv(bundle.locality));
            files.push_back(out / "locality_summary.csv");
        }
        return files;
    });
    return bundle;
}

}  // namespace vlnbias::pipeline
