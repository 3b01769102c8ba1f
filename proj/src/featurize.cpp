#include "vlnbias/featurize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "vlnbias/common.hpp"
#include "vlnbias/format.hpp"

namespace vlnbias::featurize {

namespace nc = neuralcore;

std::string_view to_string(FeatureKind k) {
    switch (k) {
        case FeatureKind::Zero: return "zero";
        case FeatureKind::LowLevel: return "lowlevel";
        case FeatureKind::ClassProb: return "classprob";
        case FeatureKind::Detection: return "detection";
        case FeatureKind::GtSeg: return "gtseg";
        case FeatureKind::LearnedSeg: return "learnedseg";
    }
    return "?";
}

FeatureKind parse_feature_kind(std::string_view text) {
    for (auto k : {FeatureKind::Zero, FeatureKind::LowLevel, FeatureKind::ClassProb, FeatureKind::Detection,
                   FeatureKind::GtSeg, FeatureKind::LearnedSeg}) {
        if (to_string(k) == text) return k;
    }
    throw ValidationError("unknown feature kind '" + std::string(text) +
                          "' (expected zero, lowlevel, classprob, detection, gtseg or learnedseg)");
}

std::vector<double> zero_features(int dim) {
    if (dim < 1) throw ValidationError("feature dimension must be positive");
    return std::vector<double>(static_cast<std::size_t>(dim), 0.0);
}

LabelMap identity_block_label_map(int classes, int labels_per_class, double gain) {
    if (classes < 1 || labels_per_class < 1) throw ValidationError("label map needs positive sizes");
    LabelMap m;
    m.matrix = Tensor::Zero(classes * labels_per_class, classes);
    for (int c = 0; c < classes; ++c) {
        for (int k = 0; k < labels_per_class; ++k) m.matrix(c * labels_per_class + k, c) = gain;
    }
    return m;
}

std::vector<double> classprob_features(std::span<const double> semantics, const LabelMap& map, double temperature,
                                       double noise_sd, std::uint64_t seed) {
    if (static_cast<int>(semantics.size()) != map.classes()) {
        throw ValidationError("label map expects " + std::to_string(map.classes()) + " classes, got " +
                              std::to_string(semantics.size()));
    }
    if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
    const int labels = map.labels();
    std::vector<double> out(static_cast<std::size_t>(labels));
    if (std::isinf(temperature)) {
        std::fill(out.begin(), out.end(), 1.0 / labels);
        return out;
    }
    Rng rng(hash_combine(seed, hash_tag("classprob")));
    std::vector<double> logits(static_cast<std::size_t>(labels));
    for (int l = 0; l < labels; ++l) {
        double z = 0.0;
        for (int c = 0; c < map.classes(); ++c) z += map.matrix(l, c) * semantics[static_cast<std::size_t>(c)];
        if (noise_sd > 0.0) z += rng.normal(0.0, noise_sd);
        logits[static_cast<std::size_t>(l)] = z / temperature;
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (int l = 0; l < labels; ++l) {
        out[static_cast<std::size_t>(l)] = std::exp(logits[static_cast<std::size_t>(l)] - m);
        total += out[static_cast<std::size_t>(l)];
    }
    for (double& p : out) p /= total;
    return out;
}

std::vector<double> detection_features(std::span<const Detection> detections, std::span<const int> vocab) {
    std::vector<double> out(vocab.size(), 0.0);
    std::map<int, std::size_t> slot;
    for (std::size_t i = 0; i < vocab.size(); ++i) slot.emplace(vocab[i], i);
    for (const Detection& d : detections) {
        auto it = slot.find(d.label_id);
        if (it != slot.end()) out[it->second] += d.area * d.confidence;
    }
    return out;
}

std::vector<int> select_detection_vocab(std::span<const DetectionRecord> records, double coverage_fraction) {
    if (!(coverage_fraction > 0.0 && coverage_fraction <= 1.0)) {
        throw DomainError("coverage fraction must lie in (0, 1]");
    }
    std::map<int, std::vector<double>> contributions;
    for (const auto& rec : records) {
        for (const Detection& d : rec) contributions[d.label_id].push_back(d.area * d.confidence);
    }
    if (contributions.empty()) throw DomainError("no detections to select a vocabulary from");

    // Summing sorted contributions makes the masses independent of record order.
    std::vector<std::pair<double, int>> mass;
    double total = 0.0;
    for (auto& [label, parts] : contributions) {
        std::sort(parts.begin(), parts.end());
        const double m = std::accumulate(parts.begin(), parts.end(), 0.0);
        if (m > 0.0) {
            mass.emplace_back(m, label);
            total += m;
        }
    }
    std::sort(mass.begin(), mass.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<int> vocab;
    double covered = 0.0;
    for (const auto& [m, label] : mass) {
        vocab.push_back(label);
        covered += m;
        if (covered >= coverage_fraction * total * (1.0 - 1e-12)) break;
    }
    return vocab;
}

DetectionRecord sample_detections(std::span<const double> semantics, const DetectionSampling& params,
                                  std::uint64_t seed) {
    Rng rng(hash_combine(seed, hash_tag("detections")));
    DetectionRecord out;
    const int classes = static_cast<int>(semantics.size());
    for (int c = 0; c < classes; ++c) {
        const double area = semantics[static_cast<std::size_t>(c)];
        if (area <= params.min_area) continue;
        const int boxes = rng.uniform_int(1, 3);
        std::vector<double> share(static_cast<std::size_t>(boxes));
        for (double& s : share) s = 0.2 + rng.uniform();
        const double total = std::accumulate(share.begin(), share.end(), 0.0);
        for (double s : share) out.push_back({c, area * s / total, rng.beta(params.conf_alpha, params.conf_beta)});
    }
    if (params.distractor_labels > 0 && rng.bernoulli(params.distractor_rate)) {
        out.push_back({classes + rng.uniform_int(0, params.distractor_labels - 1), rng.uniform(0.0, params.min_area),
                       rng.beta(params.conf_beta, params.conf_alpha)});
    }
    return out;
}

const std::vector<double>& gtseg_features(const World& world, std::string_view env_id, std::string_view viewpoint,
                                          int direction) {
    return worldgen::ground_truth_semantics(world, env_id, viewpoint, direction);
}

// --- learned segmentation ---------------------------------------------------------

EnvPartition default_partition(std::span<const std::string> envs, std::uint64_t seed) {
    if (envs.size() < 2) throw ValidationError("need at least two environments to partition");
    std::vector<std::string> order(envs.begin(), envs.end());
    Rng rng(hash_combine(seed, hash_tag("seg_partition")));
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next_u64() % i)]);
    }
    auto heldout = static_cast<std::size_t>(std::lround(static_cast<double>(order.size()) * 10.0 / 61.0));
    heldout = std::clamp<std::size_t>(heldout, 1, order.size() - 1);
    EnvPartition p;
    p.heldout_envs.assign(order.end() - static_cast<std::ptrdiff_t>(heldout), order.end());
    p.train_envs.assign(order.begin(), order.end() - static_cast<std::ptrdiff_t>(heldout));
    std::sort(p.train_envs.begin(), p.train_envs.end());
    std::sort(p.heldout_envs.begin(), p.heldout_envs.end());
    return p;
}

SegDataset seg_dataset_from_world(const World& world, std::span<const std::string> envs,
                                  std::uint64_t appearance_seed) {
    std::vector<std::vector<double>> inputs;
    std::vector<std::vector<double>> targets;
    SegDataset d;
    for (const auto& id : envs) {
        std::size_t e = 0;
        while (e < world.envs.size() && world.envs[e].id != id) ++e;
        if (e == world.envs.size()) throw LookupError("unknown environment '" + id + "'");
        const auto& env = world.envs[e];
        for (std::size_t v = 0; v < env.viewpoints.size(); ++v) {
            for (int dir = 0; dir < worldgen::kDirections; ++dir) {
                inputs.push_back(worldgen::low_level_appearance(world, e, v, dir, appearance_seed));
                targets.push_back(env.view_semantics(v, dir));
                d.env_of_row.push_back(id);
            }
        }
    }
    const auto n = static_cast<Eigen::Index>(inputs.size());
    d.inputs = Tensor(n, world.spec.lowlevel_dim);
    d.targets = Tensor(n, world.spec.semantic_classes);
    for (Eigen::Index r = 0; r < n; ++r) {
        d.inputs.row(r) = nc::row_vector(inputs[static_cast<std::size_t>(r)]);
        d.targets.row(r) = nc::row_vector(targets[static_cast<std::size_t>(r)]);
    }
    return d;
}

double mean_bce(const Tensor& predictions, const Tensor& targets) {
    if (predictions.rows() == 0) return 0.0;
    return nc::bce_loss(predictions, targets) / static_cast<double>(predictions.rows());
}

namespace {

Tensor gather_rows(const Tensor& t, std::span<const Eigen::Index> rows) {
    Tensor out(static_cast<Eigen::Index>(rows.size()), t.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = t.row(rows[i]);
    return out;
}

}  // namespace

SegPredictor train_seg_predictor(const SegDataset& data, const EnvPartition& partition, const SegHyper& hyper) {
    if (partition.train_envs.empty() || partition.heldout_envs.empty()) {
        throw ValidationError("segmentation partition needs nonempty train and held-out sides");
    }
    for (const auto& e : partition.train_envs) {
        if (std::find(partition.heldout_envs.begin(), partition.heldout_envs.end(), e) != partition.heldout_envs.end()) {
            throw ValidationError("environment '" + e + "' is on both sides of the partition");
        }
    }
    if (hyper.batch < 1 || hyper.epochs < 1) throw ValidationError("batch and epochs must be positive");

    std::vector<Eigen::Index> train_rows;
    std::vector<Eigen::Index> held_rows;
    for (std::size_t r = 0; r < data.env_of_row.size(); ++r) {
        const auto& env = data.env_of_row[r];
        const auto idx = static_cast<Eigen::Index>(r);
        if (std::find(partition.train_envs.begin(), partition.train_envs.end(), env) != partition.train_envs.end()) {
            train_rows.push_back(idx);
        } else if (std::find(partition.heldout_envs.begin(), partition.heldout_envs.end(), env) !=
                   partition.heldout_envs.end()) {
            held_rows.push_back(idx);
        }
    }
    if (train_rows.empty() || held_rows.empty()) throw ValidationError("partition selects no views on one side");

    const Tensor held_x = gather_rows(data.inputs, held_rows);
    const Tensor held_y = gather_rows(data.targets, held_rows);

    SegPredictor out;
    out.partition = partition;
    Tensor mean = gather_rows(data.targets, train_rows).colwise().mean();
    mean = mean.cwiseMax(nc::kLogClamp).cwiseMin(1.0 - nc::kLogClamp);
    out.baseline_heldout_bce = mean_bce(mean.replicate(held_y.rows(), 1), held_y);

    nc::MlpShape shape{static_cast<int>(data.inputs.cols()), hyper.hidden1, hyper.hidden2,
                       static_cast<int>(data.targets.cols())};
    nc::ParamSet params = nc::make_mlp(shape, hyper.seed);
    // Output bias starts at the logit of the training mean.
    params.at("b3") = (mean.array() / (1.0 - mean.array())).log().matrix();
    nc::ParamSet best = params;
    double best_bce = mean_bce(nc::mlp_forward(params, held_x), held_y);
    int since_best = 0;

    Rng rng(hash_combine(hyper.seed, hash_tag("seg_train")));
    std::vector<Eigen::Index> order = train_rows;
    for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[static_cast<std::size_t>(rng.next_u64() % i)]);
        }
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch));
            std::span<const Eigen::Index> rows(order.data() + start, end - start);
            nc::Tape tape;
            nc::Var x = tape.constant(gather_rows(data.inputs, rows));
            nc::Var y = nc::mlp_forward(tape, params, x, hyper.dropout, true, &rng);
            nc::Var loss = nc::scale(nc::bce(y, gather_rows(data.targets, rows)), 1.0 / static_cast<double>(rows.size()));
            auto lg = nc::forward_backward(tape, loss, params);
            if (!std::isfinite(lg.loss)) {
                throw TrainingError("segmentation predictor diverged in epoch " + std::to_string(epoch));
            }
            epoch_loss += lg.loss * static_cast<double>(rows.size());
            nc::sgd_step(params, lg.grads, hyper.lr, hyper.clip_norm);
        }
        out.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));

        const double held = mean_bce(nc::mlp_forward(params, held_x), held_y);
        if (!std::isfinite(held)) throw TrainingError("segmentation predictor held-out loss is not finite");
        if (held < best_bce) {
            best_bce = held;
            best = params;
            out.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= hyper.patience) {
            break;
        }
    }
    out.params = std::move(best);
    out.heldout_bce = best_bce;
    return out;
}

std::vector<double> learnedseg_features(const SegPredictor& predictor, std::span<const double> lowlevel) {
    const auto shape = nc::mlp_shape(predictor.params);
    if (static_cast<int>(lowlevel.size()) != shape.input_dim) {
        throw ValidationError("learned-seg predictor expects " + std::to_string(shape.input_dim) +
                              " input features, got " + std::to_string(lowlevel.size()));
    }
    const Tensor y = nc::mlp_forward(predictor.params, nc::row_vector(lowlevel));
    return std::vector<double>(y.data(), y.data() + y.size());
}

// --- featurizer -----------------------------------------------------------------------

namespace {

std::uint64_t view_seed(std::uint64_t seed, const std::string& env_id, std::size_t vp, int dir) {
    return hash_combine(hash_combine(hash_combine(seed, hash_tag(env_id)), vp), static_cast<std::uint64_t>(dir));
}

}  // namespace

std::vector<DetectionRecord> world_detections(const World& world, const DetectionSampling& params,
                                              std::uint64_t seed) {
    std::vector<DetectionRecord> out;
    for (const auto& env : world.envs) {
        for (std::size_t v = 0; v < env.viewpoints.size(); ++v) {
            for (int d = 0; d < worldgen::kDirections; ++d) {
                out.push_back(sample_detections(env.view_semantics(v, d), params, view_seed(seed, env.id, v, d)));
            }
        }
    }
    return out;
}

Featurizer::Featurizer(const World& world, const FeaturizerConfig& config, std::optional<SegPredictor> predictor)
    : config_(config), predictor_(std::move(predictor)) {
    const int classes = world.spec.semantic_classes;
    switch (config_.kind) {
        case FeatureKind::Zero:
            output_dim_ = config_.zero_dim;
            break;
        case FeatureKind::LowLevel:
            output_dim_ = world.spec.lowlevel_dim;
            break;
        case FeatureKind::ClassProb:
            label_map_ = identity_block_label_map(classes, config_.labels_per_class, config_.label_gain);
            output_dim_ = label_map_.labels();
            break;
        case FeatureKind::Detection:
            vocab_ = select_detection_vocab(world_detections(world, config_.detection, config_.seed),
                                            config_.detection_coverage);
            output_dim_ = static_cast<int>(vocab_.size());
            break;
        case FeatureKind::GtSeg:
            output_dim_ = classes;
            break;
        case FeatureKind::LearnedSeg: {
            if (!predictor_) throw ValidationError("learnedseg features need a trained segmentation predictor");
            const auto shape = nc::mlp_shape(predictor_->params);
            if (shape.input_dim != world.spec.lowlevel_dim) {
                throw ValidationError("segmentation predictor input dim does not match the world");
            }
            output_dim_ = shape.output_dim;
            break;
        }
    }
    if (output_dim_ < 1) throw ValidationError("featurizer output dimension must be positive");
}

std::vector<double> Featurizer::featurize(const World& world, std::size_t env_index, std::size_t viewpoint,
                                          int direction) const {
    const auto& env = world.envs.at(env_index);
    switch (config_.kind) {
        case FeatureKind::Zero:
            return zero_features(output_dim_);
        case FeatureKind::LowLevel:
            return worldgen::low_level_appearance(world, env_index, viewpoint, direction, config_.seed);
        case FeatureKind::ClassProb:
            return classprob_features(env.view_semantics(viewpoint, direction), label_map_,
                                      config_.classprob_temperature, config_.classprob_noise_sd,
                                      view_seed(config_.seed, env.id, viewpoint, direction));
        case FeatureKind::Detection:
            return detection_features(sample_detections(env.view_semantics(viewpoint, direction), config_.detection,
                                                        view_seed(config_.seed, env.id, viewpoint, direction)),
                                      vocab_);
        case FeatureKind::GtSeg:
            return env.view_semantics(viewpoint, direction);
        case FeatureKind::LearnedSeg:
            return learnedseg_features(*predictor_,
                                       worldgen::low_level_appearance(world, env_index, viewpoint, direction,
                                                                      config_.seed));
    }
    return {};
}

// --- feature table ----------------------------------------------------------------------

void FeatureTable::set(const std::string& env_id, const std::string& viewpoint_id, int direction,
                       std::span<const double> values) {
    if (static_cast<int>(values.size()) != dim_) {
        throw ValidationError("feature row has " + std::to_string(values.size()) + " values, table dim is " +
                              std::to_string(dim_));
    }
    rows_[Key{env_id, viewpoint_id, direction}] = std::vector<double>(values.begin(), values.end());
}

std::span<const double> FeatureTable::get(std::string_view env_id, std::string_view viewpoint_id,
                                          int direction) const {
    auto it = rows_.find(Key{std::string(env_id), std::string(viewpoint_id), direction});
    if (it == rows_.end()) {
        throw LookupError("no '" + name_ + "' features for view " + std::string(env_id) + "/" +
                          std::string(viewpoint_id) + "/" + std::to_string(direction));
    }
    return it->second;
}

bool FeatureTable::contains(std::string_view env_id, std::string_view viewpoint_id, int direction) const {
    return rows_.contains(Key{std::string(env_id), std::string(viewpoint_id), direction});
}

std::string FeatureTable::to_csv() const {
    std::string out = "env_id,viewpoint_id,direction";
    for (int i = 0; i < dim_; ++i) out += "," + name_ + "_" + std::to_string(i);
    out += "\n";
    for (const auto& [key, values] : rows_) {
        out += std::get<0>(key) + "," + std::get<1>(key) + "," + std::to_string(std::get<2>(key));
        for (double v : values) out += "," + format_roundtrip(v);
        out += "\n";
    }
    return out;
}

FeatureTable FeatureTable::from_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw LoadError("feature table is empty");
    const auto header = split_csv_line(line);
    if (header.size() < 4 || header[0] != "env_id" || header[1] != "viewpoint_id" || header[2] != "direction") {
        throw LoadError("feature table header must start with env_id,viewpoint_id,direction");
    }
    const auto& first = header[3];
    const auto underscore = first.rfind('_');
    if (underscore == std::string::npos) throw LoadError("feature column names must look like <name>_<index>");
    FeatureTable table(first.substr(0, underscore), static_cast<int>(header.size() - 3));
    std::size_t record = 0;
    while (std::getline(in, line)) {
        ++record;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw LoadError("feature table record " + std::to_string(record) + ": expected " +
                            std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
        }
        std::vector<double> values;
        try {
            for (std::size_t i = 3; i < cells.size(); ++i) values.push_back(parse_double(cells[i]));
            table.set(cells[0], cells[1], static_cast<int>(parse_double(cells[2])), values);
        } catch (const ValidationError& e) {
            throw LoadError("feature table record " + std::to_string(record) + ": " + e.what());
        }
    }
    return table;
}

FeatureTable build_feature_table(const World& world, const Featurizer& featurizer) {
    FeatureTable table(std::string(to_string(featurizer.kind())), featurizer.output_dim());
    for (std::size_t e = 0; e < world.envs.size(); ++e) {
        const auto& env = world.envs[e];
        for (std::size_t v = 0; v < env.viewpoints.size(); ++v) {
            for (int d = 0; d < worldgen::kDirections; ++d) {
                table.set(env.id, env.viewpoints[v].id, d, featurizer.featurize(world, e, v, d));
            }
        }
    }
    return table;
}

std::string detections_to_csv(std::span<const ViewDetections> views) {
    std::string out = "env_id,viewpoint_id,direction,label_id,area,confidence\n";
    for (const auto& view : views) {
        if (view.detections.empty()) {
            out += view.env_id + "," + view.viewpoint_id + "," + std::to_string(view.direction) + ",,,\n";
        }
        for (const auto& d : view.detections) {
            out += view.env_id + "," + view.viewpoint_id + "," + std::to_string(view.direction) + "," +
                   std::to_string(d.label_id) + "," + format_roundtrip(d.area) + "," + format_roundtrip(d.confidence) +
                   "\n";
        }
    }
    return out;
}

std::vector<ViewDetections> detections_from_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw LoadError("detection file is empty");
    const std::vector<std::string> expected = {"env_id", "viewpoint_id", "direction", "label_id", "area", "confidence"};
    if (split_csv_line(line) != expected) {
        throw LoadError("detection file header must be env_id,viewpoint_id,direction,label_id,area,confidence");
    }
    std::vector<ViewDetections> out;
    std::size_t record = 0;
    while (std::getline(in, line)) {
        ++record;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != expected.size()) {
            throw LoadError("detection record " + std::to_string(record) + ": expected 6 fields");
        }
        Detection d;
        int dir = 0;
        const bool empty_view = cells[3].empty() && cells[4].empty() && cells[5].empty();
        try {
            dir = static_cast<int>(parse_double(cells[2]));
            if (empty_view) {
                out.push_back({cells[0], cells[1], dir, {}});
                continue;
            }
            d.label_id = static_cast<int>(parse_double(cells[3]));
            d.area = parse_double(cells[4]);
            d.confidence = parse_double(cells[5]);
        } catch (const ValidationError& e) {
            throw LoadError("detection record " + std::to_string(record) + ": " + e.what());
        }
        if (d.area < 0.0 || d.area > 1.0 || d.confidence < 0.0 || d.confidence > 1.0) {
            throw LoadError("detection record " + std::to_string(record) + ": area/confidence outside [0,1]");
        }
        if (out.empty() || out.back().env_id != cells[0] || out.back().viewpoint_id != cells[1] ||
            out.back().direction != dir) {
            out.push_back({cells[0], cells[1], dir, {}});
        }
        out.back().detections.push_back(d);
    }
    return out;
}

}  // namespace vlnbias::featurize
