#pragma once
// Dense hard-parameter-sharing network engine.
//
// A model is a shared trunk of dense layers followed by one head per task.
// Parameters live in flat vectors (one for the trunk, one per head) and the
// ParamLayout maps flat offsets to layer shapes. Two models implement the
// MultiTaskModel concept: MlpModel (trunk + heads) and QuadraticModel
// (closed-form quadratic task losses over the shared vector, no heads).

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstring>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "itmtl/core.hpp"

namespace itmtl {

// ---------------------------------------------------------------------------
// Model description

enum class Activation { Identity, Tanh, Relu, Sigmoid };
enum class LossKind { CrossEntropy, MeanSquaredError };

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::Tanh: return "tanh";
        case Activation::Relu: return "relu";
        case Activation::Sigmoid: return "sigmoid";
    }
    return "?";
}

inline Activation parse_activation(std::string_view s) {
    if (s == "identity" || s == "linear") return Activation::Identity;
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    if (s == "sigmoid") return Activation::Sigmoid;
    throw ConfigError("unknown activation '" + std::string(s) + "'");
}

inline std::string_view to_string(LossKind k) {
    return k == LossKind::CrossEntropy ? "ce" : "mse";
}

inline LossKind parse_loss(std::string_view s) {
    if (s == "ce" || s == "cross-entropy" || s == "softmax") return LossKind::CrossEntropy;
    if (s == "mse") return LossKind::MeanSquaredError;
    throw ConfigError("unknown loss kind '" + std::string(s) + "'");
}

struct LayerSpec {
    std::size_t width = 1;
    Activation activation = Activation::Identity;
    bool bias = true;
};

struct TaskSpec {
    std::vector<LayerSpec> head;  // empty: the task reads the trunk output directly
    LossKind loss = LossKind::MeanSquaredError;
    double weight = 1.0;
};

struct ModelSpec {
    std::size_t input_dim = 1;
    std::vector<LayerSpec> trunk;
    std::vector<TaskSpec> tasks;

    [[nodiscard]] std::size_t task_count() const { return tasks.size(); }

    [[nodiscard]] std::size_t trunk_output_dim() const {
        return trunk.empty() ? input_dim : trunk.back().width;
    }

    [[nodiscard]] std::size_t output_dim(std::size_t task) const {
        const auto& h = tasks.at(task).head;
        return h.empty() ? trunk_output_dim() : h.back().width;
    }

    void validate() const {
        require(input_dim >= 1, "model: input_dim must be >= 1");
        require(!tasks.empty(), "model: at least one task is required");
        for (const auto& l : trunk) require(l.width >= 1, "model: trunk layer width must be >= 1");
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            for (const auto& l : tasks[i].head)
                require(l.width >= 1, "model: head layer width must be >= 1");
            require(tasks[i].weight > 0.0 && std::isfinite(tasks[i].weight),
                    "model: task loss weight must be positive");
            if (tasks[i].loss == LossKind::CrossEntropy)
                require(output_dim(i) >= 2,
                        "model: cross-entropy task " + std::to_string(i) + " needs >= 2 outputs");
        }
    }
};

// ---------------------------------------------------------------------------
// Parameters

/// Location of one dense layer inside a flat parameter vector.
/// Weights are stored row-major as (out x in).
struct DenseSlot {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
    bool has_bias = true;
    Activation activation = Activation::Identity;

    [[nodiscard]] std::size_t size() const { return in * out + (has_bias ? out : 0); }
};

struct ParamLayout {
    std::vector<DenseSlot> trunk;
    std::vector<std::vector<DenseSlot>> heads;
    std::size_t shared_size = 0;
    std::vector<std::size_t> task_sizes;

    [[nodiscard]] std::size_t task_count() const { return task_sizes.size(); }

    [[nodiscard]] std::size_t total_size() const {
        std::size_t n = shared_size;
        for (auto s : task_sizes) n += s;
        return n;
    }

    static ParamLayout dense(const ModelSpec& spec) {
        ParamLayout layout;
        auto place = [](std::vector<DenseSlot>& slots, std::size_t in,
                        const std::vector<LayerSpec>& layers) {
            std::size_t offset = 0;
            for (const auto& l : layers) {
                DenseSlot s;
                s.in = in;
                s.out = l.width;
                s.has_bias = l.bias;
                s.activation = l.activation;
                s.weight_offset = offset;
                s.bias_offset = offset + s.in * s.out;
                offset += s.size();
                slots.push_back(s);
                in = l.width;
            }
            return offset;
        };
        layout.shared_size = place(layout.trunk, spec.input_dim, spec.trunk);
        for (const auto& t : spec.tasks) {
            layout.heads.emplace_back();
            layout.task_sizes.push_back(place(layout.heads.back(), spec.trunk_output_dim(), t.head));
        }
        return layout;
    }

    /// Layout of a model whose only parameters are a shared vector.
    static ParamLayout flat(std::size_t shared, std::size_t tasks) {
        ParamLayout layout;
        layout.shared_size = shared;
        layout.task_sizes.assign(tasks, 0);
        layout.heads.resize(tasks);
        return layout;
    }

    friend bool operator==(const ParamLayout& a, const ParamLayout& b) {
        return a.shared_size == b.shared_size && a.task_sizes == b.task_sizes;
    }
};

struct ParamSet {
    Vector shared;
    std::vector<Vector> task_specific;
    ParamLayout layout;

    [[nodiscard]] std::size_t task_count() const { return task_specific.size(); }

    [[nodiscard]] bool all_finite() const {
        if (!shared.allFinite()) return false;
        return std::all_of(task_specific.begin(), task_specific.end(),
                           [](const Vector& v) { return v.allFinite(); });
    }

    [[nodiscard]] bool bit_equal(const ParamSet& o) const {
        auto same = [](const Vector& a, const Vector& b) {
            return a.size() == b.size() &&
                   std::equal(a.data(), a.data() + a.size(), b.data(),
                              [](double x, double y) {
                                  return std::bit_cast<std::uint64_t>(x) ==
                                         std::bit_cast<std::uint64_t>(y);
                              });
        };
        if (!same(shared, o.shared) || task_specific.size() != o.task_specific.size()) return false;
        for (std::size_t i = 0; i < task_specific.size(); ++i)
            if (!same(task_specific[i], o.task_specific[i])) return false;
        return true;
    }
};

/// Concatenates shared then per-task blocks.
inline Vector flatten(const ParamSet& p) {
    Vector flat(p.layout.total_size());
    Eigen::Index at = 0;
    flat.segment(at, p.shared.size()) = p.shared;
    at += p.shared.size();
    for (const auto& t : p.task_specific) {
        flat.segment(at, t.size()) = t;
        at += t.size();
    }
    return flat;
}

inline ParamSet unflatten(const ParamLayout& layout, const Vector& flat) {
    require(static_cast<std::size_t>(flat.size()) == layout.total_size(),
            "unflatten: vector size does not match layout");
    ParamSet p;
    p.layout = layout;
    Eigen::Index at = 0;
    p.shared = flat.segment(at, static_cast<Eigen::Index>(layout.shared_size));
    at += static_cast<Eigen::Index>(layout.shared_size);
    for (auto n : layout.task_sizes) {
        p.task_specific.push_back(flat.segment(at, static_cast<Eigen::Index>(n)));
        at += static_cast<Eigen::Index>(n);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Data

/// Labels for one task: class indices (cross-entropy) or a target matrix
/// with one row per example (MSE). Exactly one is populated.
struct TaskLabels {
    std::vector<int> classes;
    Matrix targets;

    [[nodiscard]] std::size_t size() const {
        return classes.empty() ? static_cast<std::size_t>(targets.rows()) : classes.size();
    }
};

struct Batch {
    Matrix inputs;  // batch_size x input_dim
    std::vector<TaskLabels> labels;
    std::int64_t batch_id = 0;

    [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
};

struct TaskGradient {
    Vector shared;
    Vector task;
};

// ---------------------------------------------------------------------------
// Model concept

template <class M>
concept MultiTaskModel = requires(const M& m, const ParamSet& p, const Batch& b, std::size_t i,
                                  const Vector& w) {
    { m.task_count() } -> std::convertible_to<std::size_t>;
    { m.layout() } -> std::convertible_to<const ParamLayout&>;
    { m.forward_losses(p, b) } -> std::same_as<Vector>;
    { m.task_gradient(p, b, i) } -> std::same_as<TaskGradient>;
    { m.task_gradients(p, b) } -> std::same_as<std::vector<TaskGradient>>;
    { m.weighted_shared_gradient(p, b, w) } -> std::same_as<Vector>;
};

// ---------------------------------------------------------------------------
// Dense MLP

namespace detail {

inline Matrix activate(const Matrix& z, Activation a) {
    switch (a) {
        case Activation::Identity: return z;
        case Activation::Tanh: return z.array().tanh().matrix();
        case Activation::Relu: return z.cwiseMax(0.0);
        case Activation::Sigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
    }
    return z;
}

// Derivative of the activation expressed through its pre-activation z and output y.
inline Matrix activation_grad(const Matrix& z, const Matrix& y, Activation a) {
    switch (a) {
        case Activation::Identity: return Matrix::Ones(z.rows(), z.cols());
        case Activation::Tanh: return (1.0 - y.array().square()).matrix();
        case Activation::Relu: return (z.array() > 0.0).cast<double>().matrix();
        case Activation::Sigmoid: return (y.array() * (1.0 - y.array())).matrix();
    }
    return Matrix::Ones(z.rows(), z.cols());
}

struct LayerCache {
    Matrix input;
    Matrix pre;
    Matrix out;
};

inline Eigen::Map<const RowMatrix> weights(const Vector& params, const DenseSlot& s) {
    return {params.data() + s.weight_offset, static_cast<Eigen::Index>(s.out),
            static_cast<Eigen::Index>(s.in)};
}

inline Matrix dense_forward(const Vector& params, const DenseSlot& s, const Matrix& in,
                            LayerCache* cache, std::ptrdiff_t layer_index) {
    Matrix z = in * weights(params, s).transpose();
    if (s.has_bias)
        z.rowwise() += params.segment(static_cast<Eigen::Index>(s.bias_offset),
                                      static_cast<Eigen::Index>(s.out))
                           .transpose();
    Matrix y = activate(z, s.activation);
    if (!y.allFinite())
        throw NumericError("non-finite activation at layer " + std::to_string(layer_index),
                           layer_index);
    if (cache) {
        cache->input = in;
        cache->pre = std::move(z);
        cache->out = y;
    }
    return y;
}

// Accumulates parameter gradients for one layer into grad and returns dL/d(input).
inline Matrix dense_backward(const Vector& params, const DenseSlot& s, const LayerCache& cache,
                             const Matrix& d_out, Vector& grad) {
    const Matrix dz = d_out.cwiseProduct(activation_grad(cache.pre, cache.out, s.activation));
    Eigen::Map<RowMatrix> gw(grad.data() + s.weight_offset, static_cast<Eigen::Index>(s.out),
                             static_cast<Eigen::Index>(s.in));
    gw.noalias() += dz.transpose() * cache.input;
    if (s.has_bias)
        grad.segment(static_cast<Eigen::Index>(s.bias_offset), static_cast<Eigen::Index>(s.out)) +=
            dz.colwise().sum().transpose();
    return dz * weights(params, s);
}

}  // namespace detail

class MlpModel {
public:
    explicit MlpModel(ModelSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        layout_ = ParamLayout::dense(spec_);
    }

    [[nodiscard]] const ModelSpec& spec() const { return spec_; }
    [[nodiscard]] const ParamLayout& layout() const { return layout_; }
    [[nodiscard]] std::size_t task_count() const { return spec_.task_count(); }

    /// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    [[nodiscard]] ParamSet init_params(std::uint64_t seed) const {
        std::mt19937_64 rng(seed);
        ParamSet p;
        p.layout = layout_;
        auto fill = [&rng](Vector& v, const std::vector<DenseSlot>& slots, std::size_t size) {
            v = Vector::Zero(static_cast<Eigen::Index>(size));
            for (const auto& s : slots) {
                std::uniform_real_distribution<double> u(-1.0 / std::sqrt(double(s.in)),
                                                         1.0 / std::sqrt(double(s.in)));
                for (std::size_t k = 0; k < s.size(); ++k)
                    v[static_cast<Eigen::Index>(s.weight_offset + k)] = u(rng);
            }
        };
        fill(p.shared, layout_.trunk, layout_.shared_size);
        p.task_specific.resize(task_count());
        for (std::size_t i = 0; i < task_count(); ++i)
            fill(p.task_specific[i], layout_.heads[i], layout_.task_sizes[i]);
        return p;
    }

    void check(const ParamSet& p, const Batch& b) const {
        if (!(p.layout == layout_) || p.shared.size() != Eigen::Index(layout_.shared_size) ||
            p.task_specific.size() != task_count())
            throw ConfigError("parameter set does not match model layout");
        for (std::size_t i = 0; i < task_count(); ++i)
            if (p.task_specific[i].size() != Eigen::Index(layout_.task_sizes[i]))
                throw ConfigError("task parameter block " + std::to_string(i) +
                                  " does not match model layout");
        if (b.size() < 1) throw ConfigError("batch must contain at least one example");
        if (b.inputs.cols() != Eigen::Index(spec_.input_dim))
            throw ConfigError("batch input dimension " + std::to_string(b.inputs.cols()) +
                              " does not match model input_dim " +
                              std::to_string(spec_.input_dim));
        if (b.labels.size() != task_count())
            throw ConfigError("batch has " + std::to_string(b.labels.size()) +
                              " label sets, model has " + std::to_string(task_count()) + " tasks");
        for (std::size_t i = 0; i < task_count(); ++i) {
            const auto& lab = b.labels[i];
            if (lab.size() != b.size())
                throw ConfigError("label set " + std::to_string(i) + " has wrong length");
            const auto k = spec_.output_dim(i);
            if (spec_.tasks[i].loss == LossKind::CrossEntropy) {
                if (lab.classes.empty()) throw ConfigError("task " + std::to_string(i) + " needs class labels");
                for (int c : lab.classes)
                    if (c < 0 || std::size_t(c) >= k)
                        throw ConfigError("class label out of range for task " + std::to_string(i));
            } else if (lab.targets.cols() != Eigen::Index(k)) {
                throw ConfigError("regression targets for task " + std::to_string(i) +
                                  " must have width " + std::to_string(k));
            }
        }
    }

    /// Raw per-task outputs (logits for cross-entropy tasks).
    [[nodiscard]] std::vector<Matrix> forward_outputs(const ParamSet& p, const Matrix& inputs) const {
        Matrix h = trunk_forward(p, inputs, nullptr);
        std::vector<Matrix> out;
        for (std::size_t i = 0; i < task_count(); ++i) out.push_back(head_forward(p, i, h, nullptr));
        return out;
    }

    [[nodiscard]] Vector forward_losses(const ParamSet& p, const Batch& b) const {
        check(p, b);
        ++forward_calls_;
        const Matrix h = trunk_forward(p, b.inputs, nullptr);
        Vector losses(static_cast<Eigen::Index>(task_count()));
        for (std::size_t i = 0; i < task_count(); ++i)
            losses[Eigen::Index(i)] = loss_and_grad(i, head_forward(p, i, h, nullptr), b.labels[i], nullptr);
        return losses;
    }

    [[nodiscard]] TaskGradient task_gradient(const ParamSet& p, const Batch& b, std::size_t task) const {
        check(p, b);
        if (task >= task_count()) throw ConfigError("task index out of range");
        ++gradient_calls_;
        std::vector<detail::LayerCache> trunk_cache(layout_.trunk.size());
        const Matrix h = trunk_forward(p, b.inputs, &trunk_cache);
        return backprop_task(p, b, task, h, trunk_cache);
    }

    [[nodiscard]] std::vector<TaskGradient> task_gradients(const ParamSet& p, const Batch& b) const {
        check(p, b);
        ++gradient_calls_;
        std::vector<detail::LayerCache> trunk_cache(layout_.trunk.size());
        const Matrix h = trunk_forward(p, b.inputs, &trunk_cache);
        std::vector<TaskGradient> out;
        out.reserve(task_count());
        for (std::size_t i = 0; i < task_count(); ++i)
            out.push_back(backprop_task(p, b, i, h, trunk_cache));
        return out;
    }

    /// Gradient of sum_i weights[i] * L_i with respect to the shared
    /// parameters, from a single trunk backward pass.
    [[nodiscard]] Vector weighted_shared_gradient(const ParamSet& p, const Batch& b,
                                                  const Vector& weights) const {
        check(p, b);
        require(weights.size() == Eigen::Index(task_count()), "weighted gradient: one weight per task");
        std::vector<detail::LayerCache> trunk_cache(layout_.trunk.size());
        const Matrix h = trunk_forward(p, b.inputs, &trunk_cache);
        Matrix d_h = Matrix::Zero(h.rows(), h.cols());
        for (std::size_t i = 0; i < task_count(); ++i) {
            Vector unused = Vector::Zero(Eigen::Index(layout_.task_sizes[i]));
            d_h += weights[Eigen::Index(i)] * head_backward(p, b, i, h, unused);
        }
        return trunk_backward(p, trunk_cache, d_h);
    }

    /// Number of forward_losses / gradient evaluations since construction.
    [[nodiscard]] std::size_t forward_calls() const { return forward_calls_; }
    [[nodiscard]] std::size_t gradient_calls() const { return gradient_calls_; }

private:
    Matrix trunk_forward(const ParamSet& p, const Matrix& x, std::vector<detail::LayerCache>* cache) const {
        Matrix h = x;
        for (std::size_t l = 0; l < layout_.trunk.size(); ++l)
            h = detail::dense_forward(p.shared, layout_.trunk[l], h, cache ? &(*cache)[l] : nullptr,
                                      std::ptrdiff_t(l));
        return h;
    }

    Matrix head_forward(const ParamSet& p, std::size_t task, const Matrix& h,
                        std::vector<detail::LayerCache>* cache) const {
        Matrix y = h;
        const auto& slots = layout_.heads[task];
        for (std::size_t l = 0; l < slots.size(); ++l)
            y = detail::dense_forward(p.task_specific[task], slots[l], y,
                                      cache ? &(*cache)[l] : nullptr,
                                      std::ptrdiff_t(layout_.trunk.size() + l));
        return y;
    }

    // Mean-reduced task loss; writes dL/d(output) when d_out is non-null.
    double loss_and_grad(std::size_t task, const Matrix& y, const TaskLabels& lab, Matrix* d_out) const {
        const auto& ts = spec_.tasks[task];
        const double n = double(y.rows());
        double total = 0.0;
        if (ts.loss == LossKind::MeanSquaredError) {
            const Matrix r = y - lab.targets;
            total = r.squaredNorm() / n;
            if (d_out) *d_out = (2.0 * ts.weight / n) * r;
        } else {
            if (d_out) d_out->resize(y.rows(), y.cols());
            for (Eigen::Index e = 0; e < y.rows(); ++e) {
                const double top = y.row(e).maxCoeff();
                const Eigen::RowVectorXd shifted = (y.row(e).array() - top).exp().matrix();
                const double s = shifted.sum();
                const int c = lab.classes[std::size_t(e)];
                total += (top - y(e, c)) + std::log(s);
                if (d_out) {
                    d_out->row(e) = shifted / s;
                    (*d_out)(e, c) -= 1.0;
                }
            }
            total /= n;
            if (d_out) *d_out *= ts.weight / n;
        }
        const double loss = ts.weight * total;
        if (!std::isfinite(loss))
            throw NumericError("non-finite loss for task " + std::to_string(task));
        return loss;
    }

    // Backpropagates task's loss through its head; accumulates head gradient
    // into task_grad and returns dL/d(trunk output).
    Matrix head_backward(const ParamSet& p, const Batch& b, std::size_t task, const Matrix& h,
                         Vector& task_grad) const {
        const auto& slots = layout_.heads[task];
        std::vector<detail::LayerCache> cache(slots.size());
        const Matrix y = head_forward(p, task, h, &cache);
        Matrix d;
        loss_and_grad(task, y, b.labels[task], &d);
        for (std::size_t l = slots.size(); l-- > 0;)
            d = detail::dense_backward(p.task_specific[task], slots[l], cache[l], d, task_grad);
        return d;
    }

    Vector trunk_backward(const ParamSet& p, const std::vector<detail::LayerCache>& cache, Matrix d) const {
        Vector g = Vector::Zero(Eigen::Index(layout_.shared_size));
        for (std::size_t l = layout_.trunk.size(); l-- > 0;)
            d = detail::dense_backward(p.shared, layout_.trunk[l], cache[l], d, g);
        return g;
    }

    TaskGradient backprop_task(const ParamSet& p, const Batch& b, std::size_t task, const Matrix& h,
                               const std::vector<detail::LayerCache>& trunk_cache) const {
        TaskGradient g;
        g.task = Vector::Zero(Eigen::Index(layout_.task_sizes[task]));
        Matrix d_h = head_backward(p, b, task, h, g.task);
        g.shared = trunk_backward(p, trunk_cache, std::move(d_h));
        return g;
    }

    ModelSpec spec_;
    ParamLayout layout_;
    mutable std::size_t forward_calls_ = 0;
    mutable std::size_t gradient_calls_ = 0;
};

// ---------------------------------------------------------------------------
// Quadratic losses over a shared vector

struct QuadraticTask {
    Matrix curvature;  // symmetric positive definite A
    Vector center;     // c
    double weight = 1.0;
};

/// L_i(theta) = w_i (theta - c_i)^T A_i (theta - c_i). Batches are ignored;
/// the model has no task-specific parameters.
class QuadraticModel {
public:
    explicit QuadraticModel(std::vector<QuadraticTask> tasks) : tasks_(std::move(tasks)) {
        require(!tasks_.empty(), "quadratic model: at least one task is required");
        const auto d = tasks_.front().center.size();
        require(d >= 1, "quadratic model: dimension must be >= 1");
        for (const auto& t : tasks_) {
            require(t.center.size() == d && t.curvature.rows() == d && t.curvature.cols() == d,
                    "quadratic model: inconsistent dimensions");
            Eigen::LLT<Matrix> llt(t.curvature);
            require(llt.info() == Eigen::Success, "quadratic model: curvature must be positive definite");
            factors_.push_back(llt.matrixU());
        }
        layout_ = ParamLayout::flat(std::size_t(d), tasks_.size());
    }

    [[nodiscard]] const std::vector<QuadraticTask>& tasks() const { return tasks_; }
    [[nodiscard]] const ParamLayout& layout() const { return layout_; }
    [[nodiscard]] std::size_t task_count() const { return tasks_.size(); }
    [[nodiscard]] std::size_t dim() const { return layout_.shared_size; }

    [[nodiscard]] ParamSet make_params(Vector theta) const {
        require(theta.size() == Eigen::Index(dim()), "quadratic model: parameter dimension mismatch");
        ParamSet p;
        p.layout = layout_;
        p.shared = std::move(theta);
        p.task_specific.assign(task_count(), Vector());
        return p;
    }

    /// theta ~ U(-scale, scale)^d.
    [[nodiscard]] ParamSet init_params(std::uint64_t seed, double scale = 2.0) const {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-scale, scale);
        Vector theta(static_cast<Eigen::Index>(dim()));
        for (Eigen::Index k = 0; k < theta.size(); ++k) theta[k] = u(rng);
        return make_params(std::move(theta));
    }

    [[nodiscard]] Vector forward_losses(const ParamSet& p, const Batch&) const {
        check(p);
        ++forward_calls_;
        Vector out(static_cast<Eigen::Index>(task_count()));
        for (std::size_t i = 0; i < task_count(); ++i) {
            const Vector r = factors_[i] * (p.shared - tasks_[i].center);
            out[Eigen::Index(i)] = tasks_[i].weight * r.squaredNorm();
        }
        if (!out.allFinite()) throw NumericError("non-finite quadratic loss");
        return out;
    }

    [[nodiscard]] TaskGradient task_gradient(const ParamSet& p, const Batch&, std::size_t task) const {
        check(p);
        require(task < task_count(), "task index out of range");
        ++gradient_calls_;
        return {gradient(p.shared, task), Vector()};
    }

    [[nodiscard]] std::vector<TaskGradient> task_gradients(const ParamSet& p, const Batch&) const {
        check(p);
        ++gradient_calls_;
        std::vector<TaskGradient> out;
        for (std::size_t i = 0; i < task_count(); ++i) out.push_back({gradient(p.shared, i), Vector()});
        return out;
    }

    [[nodiscard]] Vector weighted_shared_gradient(const ParamSet& p, const Batch&, const Vector& w) const {
        check(p);
        require(w.size() == Eigen::Index(task_count()), "weighted gradient: one weight per task");
        Vector acc = Matrix::Zero(Eigen::Index(dim()), 1);
        for (std::size_t i = 0; i < task_count(); ++i)
            acc += (2.0 * tasks_[i].weight * w[Eigen::Index(i)]) * (tasks_[i].curvature * (p.shared - tasks_[i].center));
        return acc;
    }

    [[nodiscard]] std::size_t forward_calls() const { return forward_calls_; }
    [[nodiscard]] std::size_t gradient_calls() const { return gradient_calls_; }

private:
    void check(const ParamSet& p) const {
        if (p.shared.size() != Eigen::Index(dim()) || p.task_specific.size() != task_count())
            throw ConfigError("parameter set does not match quadratic model");
    }

    Vector gradient(const Vector& theta, std::size_t i) const {
        const Vector r = factors_[i] * (theta - tasks_[i].center);
        Vector g = (2.0 * tasks_[i].weight) * (factors_[i].transpose() * r);
        if (!g.allFinite()) throw NumericError("non-finite quadratic gradient");
        return g;
    }

    std::vector<QuadraticTask> tasks_;
    std::vector<Matrix> factors_;
    ParamLayout layout_;
    mutable std::size_t forward_calls_ = 0;
    mutable std::size_t gradient_calls_ = 0;
};

/// A batch with no features, used to drive models that ignore data.
inline Batch empty_batch(std::size_t tasks, std::int64_t id = 0) {
    Batch b;
    b.inputs = Matrix(1, 0);
    b.labels.assign(tasks, TaskLabels{{}, Matrix(1, 0)});
    b.batch_id = id;
    return b;
}

// ---------------------------------------------------------------------------
// Hessian-vector products

struct HvpOptions {
    /// Finite-difference step; <= 0 selects 1e-4 * (1 + |theta_s|).
    double epsilon = 0.0;
};

/// H_task v from central differences of the shared gradient along v/|v|.
template <MultiTaskModel M>
Vector hessian_vector_product(const M& model, const ParamSet& params, const Batch& batch,
                              std::size_t task, const Vector& v, HvpOptions opts = {}) {
    require(v.size() == params.shared.size(), "hvp: direction must be shaped like the shared parameters");
    if (!v.allFinite()) throw NumericError("hvp: non-finite direction");
    const double norm = v.norm();
    if (norm == 0.0) return Vector::Zero(v.size());
    const double eps = opts.epsilon > 0.0 ? opts.epsilon : 1e-4 * (1.0 + params.shared.norm());
    const Vector unit = v / norm;
    ParamSet plus = params;
    ParamSet minus = params;
    plus.shared += eps * unit;
    minus.shared -= eps * unit;
    const Vector gp = model.task_gradient(plus, batch, task).shared;
    const Vector gm = model.task_gradient(minus, batch, task).shared;
    Vector hv = (gp - gm) * (norm / (2.0 * eps));
    if (!hv.allFinite()) throw NumericError("hvp: non-finite result");
    return hv;
}

// ---------------------------------------------------------------------------
// Optimizer

enum class OptimizerKind { Sgd, Momentum };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "momentum"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "momentum" || s == "sgd-momentum") return OptimizerKind::Momentum;
    throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::Sgd;
    double learning_rate = 0.01;
    double momentum = 0.0;
    Vector velocity_shared;
    std::vector<Vector> velocity_tasks;

    static OptimizerState create(OptimizerKind kind, double lr, double mu, const ParamLayout& layout) {
        require(lr > 0.0 && std::isfinite(lr), "optimizer: learning rate must be > 0");
        require(mu >= 0.0 && mu < 1.0, "optimizer: momentum must lie in [0, 1)");
        OptimizerState s;
        s.kind = kind;
        s.learning_rate = lr;
        s.momentum = kind == OptimizerKind::Sgd ? 0.0 : mu;
        s.velocity_shared = Vector::Zero(Eigen::Index(layout.shared_size));
        for (auto n : layout.task_sizes) s.velocity_tasks.push_back(Vector::Zero(Eigen::Index(n)));
        return s;
    }

    [[nodiscard]] bool bit_equal(const OptimizerState& o) const {
        auto same = [](const Vector& a, const Vector& b) {
            return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * std::size_t(a.size())) == 0;
        };
        if (kind != o.kind || learning_rate != o.learning_rate || momentum != o.momentum ||
            !same(velocity_shared, o.velocity_shared) || velocity_tasks.size() != o.velocity_tasks.size())
            return false;
        for (std::size_t i = 0; i < velocity_tasks.size(); ++i)
            if (!same(velocity_tasks[i], o.velocity_tasks[i])) return false;
        return true;
    }
};

namespace detail {

// One optimizer step. simulate and apply both go through here so their
// results agree bit-for-bit.
inline void step_rule(const OptimizerState& opt, const Vector& theta, const Vector& velocity,
                      const Vector& g, Vector& theta_out, Vector& velocity_out) {
    if (g.size() != theta.size()) throw ConfigError("update: gradient shape does not match parameters");
    if (!g.allFinite()) throw NumericError("update: non-finite gradient");
    if (opt.kind == OptimizerKind::Sgd) {
        theta_out = theta - opt.learning_rate * g;
        velocity_out = velocity;
    } else {
        velocity_out = opt.momentum * velocity + g;
        theta_out = theta - opt.learning_rate * velocity_out;
    }
    if (!theta_out.allFinite()) throw NumericError("update: non-finite parameters");
}

}  // namespace detail

/// The shared parameters apply_update would produce; mutates nothing.
inline Vector simulate_update(const OptimizerState& opt, const Vector& shared, const Vector& g) {
    Vector theta, vel;
    detail::step_rule(opt, shared, opt.velocity_shared, g, theta, vel);
    return theta;
}

/// Same as simulate_update for task i's head parameters.
inline Vector simulate_task_update(const OptimizerState& opt, std::size_t task, const Vector& theta,
                                   const Vector& g) {
    require(task < opt.velocity_tasks.size(), "update: task index out of range");
    Vector out, vel;
    detail::step_rule(opt, theta, opt.velocity_tasks[task], g, out, vel);
    return out;
}

/// Update target; std::nullopt-like sentinel for the shared trunk.
struct UpdateTarget {
    static constexpr std::size_t kShared = std::numeric_limits<std::size_t>::max();
    std::size_t index = kShared;

    static UpdateTarget shared() { return {}; }
    static UpdateTarget task(std::size_t i) { return {i}; }
    [[nodiscard]] bool is_shared() const { return index == kShared; }
};

inline void apply_update(OptimizerState& opt, ParamSet& params, UpdateTarget target, const Vector& g) {
    Vector theta, vel;
    if (target.is_shared()) {
        detail::step_rule(opt, params.shared, opt.velocity_shared, g, theta, vel);
        params.shared = std::move(theta);
        opt.velocity_shared = std::move(vel);
    } else {
        const auto i = target.index;
        require(i < params.task_specific.size() && i < opt.velocity_tasks.size(),
                "update: task index out of range");
        detail::step_rule(opt, params.task_specific[i], opt.velocity_tasks[i], g, theta, vel);
        params.task_specific[i] = std::move(theta);
        opt.velocity_tasks[i] = std::move(vel);
    }
}

}  // namespace itmtl
