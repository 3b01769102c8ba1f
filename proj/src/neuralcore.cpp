#include "vlnbias/neuralcore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "vlnbias/format.hpp"

namespace vlnbias::neuralcore {

Tensor row_vector(std::span<const double> values) {
    Tensor t(1, static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) t(0, static_cast<Eigen::Index>(i)) = values[i];
    return t;
}

// --- ParamSet ------------------------------------------------------------------

Tensor& ParamSet::add(std::string name, Tensor value) {
    if (index_.contains(name)) throw ValidationError("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
    return entries_.back().second;
}

bool ParamSet::contains(std::string_view name) const { return index_.contains(std::string(name)); }

Tensor& ParamSet::at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw LookupError("unknown parameter '" + std::string(name) + "'");
    return entries_[it->second].second;
}

const Tensor& ParamSet::at(std::string_view name) const { return const_cast<ParamSet*>(this)->at(name); }

std::size_t ParamSet::total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += static_cast<std::size_t>(t.size());
    return n;
}

ParamSet ParamSet::zeros_like() const {
    ParamSet out;
    for (const auto& [name, t] : entries_) out.add(name, Tensor::Zero(t.rows(), t.cols()));
    return out;
}

bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.name(i) != b.name(i)) return false;
        const Tensor& x = a.value(i);
        const Tensor& y = b.value(i);
        if (x.rows() != y.rows() || x.cols() != y.cols() || x != y) return false;
    }
    return true;
}

// --- Tape ----------------------------------------------------------------------

const Tensor& Var::value() const { return tape->value(index); }

const Tensor& Tape::value(std::size_t i) const {
    const Node& n = nodes_.at(i);
    return n.external ? *n.external : n.value;
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::parameter(std::string name, const Tensor& value) {
    Node n;
    n.external = &value;
    n.needs_grad = track_gradients_;
    n.param_name = std::move(name);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    for (const Var& v : inputs) {
        if (v.tape != this) throw ValidationError("operand recorded on a different tape");
        n.needs_grad = n.needs_grad || nodes_[v.index].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t i, const Tensor& g) {
    Node& n = nodes_[i];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
        n.grad = g;
    } else {
        n.grad += g;
    }
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw ValidationError("loss recorded on a different tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw ValidationError("loss node must be scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    nodes_[loss.index].grad = Tensor::Ones(1, 1);
    visits_ = 0;
    for (std::size_t i = loss.index + 1; i-- > 0;) {
        ++visits_;
        Node& n = nodes_[i];
        if (n.grad.size() == 0 || !n.backward) continue;
        n.backward(*this, i);
    }
}

ParamSet Tape::parameter_gradients(const ParamSet* like) const {
    ParamSet out;
    if (like) out = like->zeros_like();
    for (const Node& n : nodes_) {
        if (n.param_name.empty()) continue;
        if (!out.contains(n.param_name)) out.add(n.param_name, Tensor::Zero(n.external->rows(), n.external->cols()));
        if (n.grad.size() != 0) out.at(n.param_name) += n.grad;
    }
    return out;
}

// --- primitives ------------------------------------------------------------------

namespace {

std::string shape_of(const Tensor& t) { return std::to_string(t.rows()) + "x" + std::to_string(t.cols()); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ValidationError(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " + shape_of(b));
    }
}

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape || a.tape == nullptr) throw ValidationError("operands live on different tapes");
    return *a.tape;
}

}  // namespace

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    if (a.cols() != b.rows()) {
        throw ValidationError("matmul: inner dimensions differ " + shape_of(a.value()) + " * " + shape_of(b.value()));
    }
    Tensor v = a.value() * b.value();
    const std::size_t ia = a.index, ib = b.index;
    return t.record(std::move(v), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
        if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
    });
}

Var matmul_nt(Var a, Var b) {
    Tape& t = tape_of(a, b);
    if (a.cols() != b.cols()) {
        throw ValidationError("matmul_nt: inner dimensions differ " + shape_of(a.value()) + " * " +
                              shape_of(b.value()) + "^T");
    }
    Tensor v = a.value() * b.value().transpose();
    const std::size_t ia = a.index, ib = b.index;
    return t.record(std::move(v), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
        if (tp.needs_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
    });
}

Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape("add", a.value(), b.value());
    Tensor v = a.value() + b.value();
    const std::size_t ia = a.index, ib = b.index;
    return t.record(std::move(v), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
        tp.accumulate(ia, tp.grad(self));
        tp.accumulate(ib, tp.grad(self));
    });
}

Var add_row_bias(Var x, Var bias) {
    Tape& t = tape_of(x, bias);
    if (bias.rows() != 1 || bias.cols() != x.cols()) {
        throw ValidationError("add_row_bias: bias " + shape_of(bias.value()) + " does not fit " + shape_of(x.value()));
    }
    Tensor v = x.value().rowwise() + bias.value().row(0);
    const std::size_t ix = x.index, ib = bias.index;
    return t.record(std::move(v), {x, bias}, [ix, ib](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        tp.accumulate(ix, g);
        if (tp.needs_grad(ib)) tp.accumulate(ib, g.colwise().sum());
    });
}

Var scale(Var x, double factor) {
    Tensor v = x.value() * factor;
    const std::size_t ix = x.index;
    return x.tape->record(std::move(v), {x}, [ix, factor](Tape& tp, std::size_t self) {
        tp.accumulate(ix, tp.grad(self) * factor);
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("concat_cols: no operands");
    Tape& t = *parts.front().tape;
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    for (const Var& p : parts) {
        if (p.rows() != rows) throw ValidationError("concat_cols: row counts differ");
        cols += p.cols();
    }
    Tensor v(rows, cols);
    std::vector<std::pair<std::size_t, Eigen::Index>> layout;
    Eigen::Index offset = 0;
    for (const Var& p : parts) {
        v.middleCols(offset, p.cols()) = p.value();
        layout.emplace_back(p.index, offset);
        offset += p.cols();
    }
    return t.record(std::move(v), parts, [layout](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        for (const auto& [idx, off] : layout) {
            if (tp.needs_grad(idx)) tp.accumulate(idx, g.middleCols(off, tp.value(idx).cols()));
        }
    });
}

Var stack_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ValidationError("stack_rows: no operands");
    Tape& t = *parts.front().tape;
    const Eigen::Index cols = parts.front().cols();
    Eigen::Index rows = 0;
    for (const Var& p : parts) {
        if (p.cols() != cols) throw ValidationError("stack_rows: column counts differ");
        rows += p.rows();
    }
    Tensor v(rows, cols);
    std::vector<std::pair<std::size_t, Eigen::Index>> layout;
    Eigen::Index offset = 0;
    for (const Var& p : parts) {
        v.middleRows(offset, p.rows()) = p.value();
        layout.emplace_back(p.index, offset);
        offset += p.rows();
    }
    return t.record(std::move(v), parts, [layout](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        for (const auto& [idx, off] : layout) {
            if (tp.needs_grad(idx)) tp.accumulate(idx, g.middleRows(off, tp.value(idx).rows()));
        }
    });
}

Var row(Var x, Eigen::Index i) {
    if (i < 0 || i >= x.rows()) throw ValidationError("row: index out of range");
    Tensor v = x.value().row(i);
    const std::size_t ix = x.index;
    return x.tape->record(std::move(v), {x}, [ix, i](Tape& tp, std::size_t self) {
        if (!tp.needs_grad(ix)) return;
        Tensor g = Tensor::Zero(tp.value(ix).rows(), tp.value(ix).cols());
        g.row(i) = tp.grad(self);
        tp.accumulate(ix, g);
    });
}

Var tanh(Var x) {
    Tensor v = x.value().array().tanh().matrix();
    const std::size_t ix = x.index;
    return x.tape->record(std::move(v), {x}, [ix](Tape& tp, std::size_t self) {
        const Tensor& y = tp.value(self);
        tp.accumulate(ix, (tp.grad(self).array() * (1.0 - y.array().square())).matrix());
    });
}

Var relu(Var x) {
    Tensor v = x.value().cwiseMax(0.0);
    const std::size_t ix = x.index;
    return x.tape->record(std::move(v), {x}, [ix](Tape& tp, std::size_t self) {
        const Tensor& in = tp.value(ix);
        tp.accumulate(ix, (tp.grad(self).array() * (in.array() > 0.0).cast<double>()).matrix());
    });
}

Var sigmoid(Var x) {
    Tensor v = (1.0 / (1.0 + (-x.value().array()).exp())).matrix();
    const std::size_t ix = x.index;
    return x.tape->record(std::move(v), {x}, [ix](Tape& tp, std::size_t self) {
        const Tensor& y = tp.value(self);
        tp.accumulate(ix, (tp.grad(self).array() * y.array() * (1.0 - y.array())).matrix());
    });
}

Var softmax_rows(Var x) {
    const Tensor& in = x.value();
    Tensor v(in.rows(), in.cols());
    for (Eigen::Index r = 0; r < in.rows(); ++r) {
        const double m = in.row(r).maxCoeff();
        v.row(r) = (in.row(r).array() - m).exp().matrix();
        v.row(r) /= v.row(r).sum();
    }
    const std::size_t ix = x.index;
    return x.tape->record(std::move(v), {x}, [ix](Tape& tp, std::size_t self) {
        const Tensor& y = tp.value(self);
        const Tensor& g = tp.grad(self);
        Tensor dx(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            const double inner = g.row(r).dot(y.row(r));
            dx.row(r) = (y.row(r).array() * (g.row(r).array() - inner)).matrix();
        }
        tp.accumulate(ix, dx);
    });
}

Var dot(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require_same_shape("dot", a.value(), b.value());
    Tensor v(1, 1);
    v(0, 0) = a.value().cwiseProduct(b.value()).sum();
    const std::size_t ia = a.index, ib = b.index;
    return t.record(std::move(v), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
        const double g = tp.grad(self)(0, 0);
        if (tp.needs_grad(ia)) tp.accumulate(ia, tp.value(ib) * g);
        if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia) * g);
    });
}

Var sum(Var x) {
    Tensor v(1, 1);
    v(0, 0) = x.value().sum();
    const std::size_t ix = x.index;
    return x.tape->record(std::move(v), {x}, [ix](Tape& tp, std::size_t self) {
        const Tensor& in = tp.value(ix);
        tp.accumulate(ix, Tensor::Constant(in.rows(), in.cols(), tp.grad(self)(0, 0)));
    });
}

Var embedding(Var table, std::span<const int> ids) {
    const Tensor& tab = table.value();
    if (ids.empty()) throw ValidationError("embedding: empty id list");
    Tensor v(static_cast<Eigen::Index>(ids.size()), tab.cols());
    for (std::size_t k = 0; k < ids.size(); ++k) {
        if (ids[k] < 0 || ids[k] >= tab.rows()) {
            throw ValidationError("embedding: id " + std::to_string(ids[k]) + " outside table of " +
                                  std::to_string(tab.rows()) + " rows");
        }
        v.row(static_cast<Eigen::Index>(k)) = tab.row(ids[k]);
    }
    const std::size_t it = table.index;
    std::vector<int> rows(ids.begin(), ids.end());
    return table.tape->record(std::move(v), {table}, [it, rows](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor dt = Tensor::Zero(tp.value(it).rows(), tp.value(it).cols());
        for (std::size_t k = 0; k < rows.size(); ++k) dt.row(rows[k]) += g.row(static_cast<Eigen::Index>(k));
        tp.accumulate(it, dt);
    });
}

Var apply_mask(Var x, const Tensor& mask) {
    require_same_shape("apply_mask", x.value(), mask);
    Tensor v = x.value().cwiseProduct(mask);
    const std::size_t ix = x.index;
    return x.tape->record(std::move(v), {x}, [ix, mask](Tape& tp, std::size_t self) {
        tp.accumulate(ix, tp.grad(self).cwiseProduct(mask));
    });
}

Tensor dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ValidationError("dropout rate must lie in [0, 1)");
    Tensor m(rows, cols);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    return m;
}

double bce_loss(const Tensor& y, const Tensor& target) {
    require_same_shape("bce_loss", y, target);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double p = y.data()[i];
        const double t = target.data()[i];
        loss -= t * std::log(std::max(p, kLogClamp)) + (1.0 - t) * std::log(std::max(1.0 - p, kLogClamp));
    }
    return loss;
}

Var bce(Var y, const Tensor& target) {
    Tensor v(1, 1);
    v(0, 0) = bce_loss(y.value(), target);
    const std::size_t iy = y.index;
    return y.tape->record(std::move(v), {y}, [iy, target](Tape& tp, std::size_t self) {
        const Tensor& p = tp.value(iy);
        const double g = tp.grad(self)(0, 0);
        Tensor d(p.rows(), p.cols());
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            const double pi = p.data()[i];
            const double ti = target.data()[i];
            double di = 0.0;
            if (pi > kLogClamp) di -= ti / pi;
            if (1.0 - pi > kLogClamp) di += (1.0 - ti) / (1.0 - pi);
            d.data()[i] = g * di;
        }
        tp.accumulate(iy, d);
    });
}

double cross_entropy(const Tensor& scores, int target) {
    if (scores.rows() != 1) throw ValidationError("cross_entropy expects a single score row");
    if (target < 0 || target >= scores.cols()) {
        throw ValidationError("cross_entropy target " + std::to_string(target) + " out of range");
    }
    const double m = scores.maxCoeff();
    const double lse = m + std::log((scores.array() - m).exp().sum());
    return lse - scores(0, target);
}

Var cross_entropy(Var scores, int target) {
    Tensor v(1, 1);
    v(0, 0) = cross_entropy(scores.value(), target);
    const std::size_t is = scores.index;
    return scores.tape->record(std::move(v), {scores}, [is, target](Tape& tp, std::size_t self) {
        const Tensor& s = tp.value(is);
        const double m = s.maxCoeff();
        Tensor p = (s.array() - m).exp().matrix();
        p /= p.sum();
        p(0, target) -= 1.0;
        tp.accumulate(is, p * tp.grad(self)(0, 0));
    });
}

// --- training utilities ---------------------------------------------------------

LossAndGrad forward_backward(Tape& tape, Var loss, const ParamSet& params) {
    tape.backward(loss);
    return {loss.scalar(), tape.parameter_gradients(&params)};
}

double sgd_step(ParamSet& params, const ParamSet& grads, double lr, double clip_norm) {
    if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        const Tensor& g = grads.value(i);
        if (!g.allFinite()) throw TrainingError("non-finite gradient for parameter '" + grads.name(i) + "'");
        sq += g.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    const double factor = (std::isfinite(clip_norm) && norm > clip_norm) ? clip_norm / norm : 1.0;
    for (std::size_t i = 0; i < grads.size(); ++i) params.at(grads.name(i)) -= (lr * factor) * grads.value(i);
    return norm;
}

GradCheckResult grad_check(const ModelClosure& model, const ParamSet& params, double h, double tolerance,
                           std::uint64_t seed, std::size_t min_coordinates) {
    if (!(h > 0.0)) throw ValidationError("finite-difference step must be positive");
    ParamSet analytic = params.zeros_like();
    model(params, &analytic);

    // One coordinate from every tensor first, then a uniform fill.
    std::vector<std::pair<std::size_t, Eigen::Index>> all;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (Eigen::Index k = 0; k < params.value(p).size(); ++k) all.emplace_back(p, k);
    }
    Rng rng(hash_combine(seed, hash_tag("grad_check")));
    std::vector<std::pair<std::size_t, Eigen::Index>> chosen;
    if (all.size() <= min_coordinates) {
        chosen = all;
    } else {
        for (std::size_t p = 0; p < params.size(); ++p) {
            const Eigen::Index n = params.value(p).size();
            if (n > 0) chosen.emplace_back(p, rng.uniform_int(0, static_cast<int>(n) - 1));
        }
        for (std::size_t i = 0; i + 1 < all.size() && chosen.size() < min_coordinates; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.next_u64() % (all.size() - i));
            std::swap(all[i], all[j]);
            if (std::find(chosen.begin(), chosen.end(), all[i]) == chosen.end()) chosen.push_back(all[i]);
        }
    }

    GradCheckResult result;
    ParamSet probe = params;
    for (const auto& [p, k] : chosen) {
        double& slot = probe.value(p).data()[k];
        const double original = slot;
        slot = original + h;
        const double up = model(probe, nullptr);
        slot = original - h;
        const double down = model(probe, nullptr);
        slot = original;
        const double numeric = (up - down) / (2.0 * h);
        const double exact = analytic.at(params.name(p)).data()[k];
        const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-7});
        const double rel = std::abs(exact - numeric) / denom;
        if (result.coordinates_checked == 0 || rel > result.max_relative_error) {
            result.max_relative_error = rel;
            result.worst_parameter = params.name(p);
        }
        ++result.coordinates_checked;
    }
    result.passed = result.max_relative_error < tolerance;
    return result;
}

// --- MLP ---------------------------------------------------------------------------

ParamSet make_mlp(const MlpShape& shape, std::uint64_t seed) {
    if (shape.input_dim < 1 || shape.hidden1 < 1 || shape.hidden2 < 1 || shape.output_dim < 1) {
        throw ValidationError("MLP dimensions must be positive");
    }
    Rng rng(hash_combine(seed, hash_tag("mlp_init")));
    auto he = [&](int rows, int cols) {
        Tensor t(rows, cols);
        const double sd = std::sqrt(2.0 / cols);
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, sd);
        return t;
    };
    ParamSet p;
    p.add("A1", he(shape.hidden1, shape.input_dim));
    p.add("b1", Tensor::Zero(1, shape.hidden1));
    p.add("A2", he(shape.hidden2, shape.hidden1));
    p.add("b2", Tensor::Zero(1, shape.hidden2));
    Tensor a3 = he(shape.output_dim, shape.hidden2);
    a3 *= std::sqrt(0.5);  // Xavier-scale for the sigmoid layer
    p.add("A3", std::move(a3));
    p.add("b3", Tensor::Zero(1, shape.output_dim));
    return p;
}

MlpShape mlp_shape(const ParamSet& params) {
    MlpShape s;
    const Tensor& a1 = params.at("A1");
    const Tensor& a2 = params.at("A2");
    const Tensor& a3 = params.at("A3");
    s.input_dim = static_cast<int>(a1.cols());
    s.hidden1 = static_cast<int>(a1.rows());
    s.hidden2 = static_cast<int>(a2.rows());
    s.output_dim = static_cast<int>(a3.rows());
    if (a2.cols() != a1.rows() || a3.cols() != a2.rows() || params.at("b1").cols() != a1.rows() ||
        params.at("b2").cols() != a2.rows() || params.at("b3").cols() != a3.rows()) {
        throw ValidationError("inconsistent MLP parameter shapes");
    }
    return s;
}

Var mlp_forward(Tape& tape, const ParamSet& params, Var input, double dropout_rate, bool train_mode, Rng* rng) {
    const MlpShape s = mlp_shape(params);
    if (input.cols() != s.input_dim) {
        throw ValidationError("MLP input has " + std::to_string(input.cols()) + " features, expected " +
                              std::to_string(s.input_dim));
    }
    const bool drop = train_mode && dropout_rate > 0.0;
    if (drop && rng == nullptr) throw ValidationError("dropout in train mode needs an RNG");
    auto layer = [&](Var x, const char* w, const char* b) {
        return add_row_bias(matmul_nt(x, tape.parameter(w, params.at(w))), tape.parameter(b, params.at(b)));
    };
    Var x1 = relu(layer(input, "A1", "b1"));
    if (drop) x1 = apply_mask(x1, dropout_mask(x1.rows(), x1.cols(), dropout_rate, *rng));
    Var x2 = relu(layer(x1, "A2", "b2"));
    if (drop) x2 = apply_mask(x2, dropout_mask(x2.rows(), x2.cols(), dropout_rate, *rng));
    return sigmoid(layer(x2, "A3", "b3"));
}

Tensor mlp_forward(const ParamSet& params, const Tensor& input, double dropout_rate, bool train_mode,
                   std::uint64_t seed) {
    Tape tape(false);
    Rng rng(seed);
    Var y = mlp_forward(tape, params, tape.constant(input), dropout_rate, train_mode, &rng);
    return y.value();
}

// --- checkpoints -------------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f64(std::string& out, double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n) {
        if (pos_ + n > bytes_.size()) throw LoadError("checkpoint truncated at byte " + std::to_string(pos_));
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint64_t uint(int width) {
        auto s = take(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = width - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[i]);
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const ParamSet& params) {
    std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string& name = params.name(i);
        const Tensor& t = params.value(i);
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<std::uint32_t>(t.rows()));
        put_u32(out, static_cast<std::uint32_t>(t.cols()));
        for (Eigen::Index k = 0; k < t.size(); ++k) put_f64(out, t.data()[k]);
    }
    return out;
}

ParamSet decode_checkpoint(std::string_view bytes) {
    Reader in(bytes);
    if (in.take(sizeof kCheckpointMagic) != std::string_view(kCheckpointMagic, sizeof kCheckpointMagic)) {
        throw LoadError("not a checkpoint (bad magic)");
    }
    const auto version = in.uint(4);
    if (version != kCheckpointVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
    const auto count = in.uint(4);
    ParamSet out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = in.uint(4);
        std::string name(in.take(name_len));
        const auto rows = static_cast<Eigen::Index>(in.uint(4));
        const auto cols = static_cast<Eigen::Index>(in.uint(4));
        Tensor t(rows, cols);
        for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = std::bit_cast<double>(in.uint(8));
        out.add(std::move(name), std::move(t));
    }
    if (!in.done()) throw LoadError("trailing bytes after checkpoint tensors");
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
    write_text_file(path, encode_checkpoint(params));
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
    try {
        return decode_checkpoint(read_text_file(path));
    } catch (const LoadError& e) {
        throw LoadError(path.string() + ": " + e.what());
    }
}

}  // namespace vlnbias::neuralcore
