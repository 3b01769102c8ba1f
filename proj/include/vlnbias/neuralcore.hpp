#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vlnbias/common.hpp"

namespace vlnbias::neuralcore {

// Dense 2-D tensor of doubles; vectors are 1 x n rows, batches stack rows.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor row_vector(std::span<const double> values);

// Ordered collection of named tensors. Order is insertion order and defines
// the checkpoint layout.
class ParamSet {
public:
    Tensor& add(std::string name, Tensor value);
    bool contains(std::string_view name) const;
    Tensor& at(std::string_view name);
    const Tensor& at(std::string_view name) const;

    std::size_t size() const { return entries_.size(); }
    const std::string& name(std::size_t i) const { return entries_[i].first; }
    Tensor& value(std::size_t i) { return entries_[i].second; }
    const Tensor& value(std::size_t i) const { return entries_[i].second; }
    std::size_t total_size() const;

    // Same names and shapes, all zeros.
    ParamSet zeros_like() const;

    friend bool operator==(const ParamSet& a, const ParamSet& b);

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

// Handle to a recorded node.
struct Var {
    Tape* tape = nullptr;
    std::size_t index = 0;

    const Tensor& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse index
// order is a valid topological order for the backward sweep. A parameter node
// references its tensor in place; the tensor must outlive the tape.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    // With track_gradients = false parameters behave as constants and no
    // backward closures are kept (inference).
    explicit Tape(bool track_gradients = true) : track_gradients_(track_gradients) {}

    Var constant(Tensor value);
    Var parameter(std::string name, const Tensor& value);

    // Records an op node. `inputs` decide whether a gradient is needed.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

    const Tensor& value(std::size_t i) const;
    const Tensor& grad(std::size_t i) const { return nodes_.at(i).grad; }
    bool needs_grad(std::size_t i) const { return nodes_[i].needs_grad; }
    void accumulate(std::size_t i, const Tensor& g);

    // Seeds d(loss)/d(loss) = 1 and sweeps every node once in reverse order.
    void backward(Var loss);
    std::size_t backward_visits() const { return visits_; }

    // Gradients of all parameter nodes, keyed by name; repeated recordings of
    // the same name are summed. Names absent from the tape are zero-filled
    // when `like` is given.
    ParamSet parameter_gradients(const ParamSet* like = nullptr) const;

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        const Tensor* external = nullptr;
        Tensor grad;
        bool needs_grad = false;
        BackwardFn backward;
        std::string param_name;
    };
    std::vector<Node> nodes_;
    std::size_t visits_ = 0;
    bool track_gradients_ = true;
};

// --- primitives --------------------------------------------------------------

Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var add_row_bias(Var x, Var bias);  // bias (1 x n) added to every row of x
Var scale(Var x, double factor);
Var concat_cols(std::span<const Var> parts);  // all parts share the row count
Var stack_rows(std::span<const Var> parts);   // all parts share the column count
Var row(Var x, Eigen::Index i);
Var tanh(Var x);
Var relu(Var x);
Var sigmoid(Var x);
Var softmax_rows(Var x);
Var dot(Var a, Var b);  // same shape, 1x1 result
Var sum(Var x);
Var embedding(Var table, std::span<const int> ids);
Var apply_mask(Var x, const Tensor& mask);  // elementwise x .* mask

// Inverted dropout: kept units are scaled by 1/(1-rate).
Tensor dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng);

inline constexpr double kLogClamp = 1e-12;

// Summed binary cross-entropy with logs clamped at kLogClamp.
Var bce(Var y, const Tensor& target);
// -log softmax(scores)[target] for a 1 x k score row.
Var cross_entropy(Var scores, int target);

double bce_loss(const Tensor& y, const Tensor& target);
double cross_entropy(const Tensor& scores, int target);

// --- training utilities ------------------------------------------------------

struct LossAndGrad {
    double loss = 0.0;
    ParamSet grads;
};

// Runs the backward sweep from a scalar loss node and collects parameter
// gradients (zero-filled for parameters of `params` that were not recorded).
LossAndGrad forward_backward(Tape& tape, Var loss, const ParamSet& params);

// Global-norm clipping followed by p <- p - lr * g. Returns the pre-clip norm.
// Throws TrainingError naming the first parameter with a non-finite gradient.
double sgd_step(ParamSet& params, const ParamSet& grads, double lr, double clip_norm);

// Computes the loss and, when `grads` is non-null, the analytic gradient.
using ModelClosure = std::function<double(const ParamSet& params, ParamSet* grads)>;

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t coordinates_checked = 0;
    std::string worst_parameter;
    bool passed = false;
};

// Central differences over a random subset of at least `min_coordinates`
// coordinates (all of them when fewer exist).
GradCheckResult grad_check(const ModelClosure& model, const ParamSet& params, double h, double tolerance,
                           std::uint64_t seed = 1, std::size_t min_coordinates = 50);

// --- multi-layer perceptron ---------------------------------------------------

struct MlpShape {
    int input_dim = 0;
    int hidden1 = 512;
    int hidden2 = 256;
    int output_dim = 0;
};

// Parameters A1 (h1 x in), b1 (1 x h1), A2, b2, A3 (out x h2), b3.
ParamSet make_mlp(const MlpShape& shape, std::uint64_t seed);
MlpShape mlp_shape(const ParamSet& params);

inline constexpr double kDefaultDropout = 0.3;

// sigmoid(A3 relu(A2 relu(A1 f + b1) + b2) + b3) row-wise over a batch;
// dropout follows each hidden activation in train mode.
Var mlp_forward(Tape& tape, const ParamSet& params, Var input, double dropout_rate, bool train_mode, Rng* rng);
Tensor mlp_forward(const ParamSet& params, const Tensor& input, double dropout_rate = kDefaultDropout,
                   bool train_mode = false, std::uint64_t seed = 0);

// --- checkpoints ----------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'V', 'L', 'N', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const ParamSet& params);
ParamSet decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace vlnbias::neuralcore
