#pragma once
// Lookahead transference between tasks and its Taylor approximations.
//
// Z_{i->j} = 1 - L_j(X, theta_s', theta_j') / L_j(X, theta_s, theta_j), where
// theta_s' is the shared vector after a simulated optimizer step along the
// source gradient and theta_j' are the (already updated) task parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "itmtl/core.hpp"
#include "itmtl/net_engine.hpp"

namespace itmtl {

struct TransferenceOptions {
    /// Baseline losses at or below this are rejected as degenerate denominators.
    double loss_epsilon = 1e-12;
};

inline void check_baseline(const Vector& losses, double eps) {
    for (Eigen::Index j = 0; j < losses.size(); ++j)
        if (!(losses[j] > eps)) throw DegenerateLossError(std::size_t(j), losses[j]);
}

/// Per-task losses after a simulated shared step along `candidate`, with the
/// task blocks replaced by `updated_task_params`.
template <MultiTaskModel M>
Vector lookahead_losses(const M& model, const ParamSet& params, const Batch& batch,
                        const OptimizerState& opt, const Vector& candidate,
                        std::span<const Vector> updated_task_params) {
    require(updated_task_params.size() == params.task_count(),
            "lookahead: one updated parameter block per task is required");
    ParamSet ahead;
    ahead.layout = params.layout;
    ahead.shared = simulate_update(opt, params.shared, candidate);
    ahead.task_specific.assign(updated_task_params.begin(), updated_task_params.end());
    return model.forward_losses(ahead, batch);
}

/// Transference of one candidate onto every task, given precomputed baseline
/// losses L_j(X, theta_s^t, theta_j^t).
template <MultiTaskModel M>
Vector transference_exact(const M& model, const ParamSet& params, const Batch& batch,
                          const OptimizerState& opt, const Vector& candidate,
                          std::span<const Vector> updated_task_params, const Vector& baseline,
                          TransferenceOptions opts = {}) {
    check_baseline(baseline, opts.loss_epsilon);
    const Vector ahead = lookahead_losses(model, params, batch, opt, candidate, updated_task_params);
    return (1.0 - ahead.array() / baseline.array()).matrix();
}

template <MultiTaskModel M>
Vector transference_exact(const M& model, const ParamSet& params, const Batch& batch,
                          const OptimizerState& opt, const Vector& candidate,
                          std::span<const Vector> updated_task_params, TransferenceOptions opts = {}) {
    const Vector baseline = model.forward_losses(params, batch);
    return transference_exact(model, params, batch, opt, candidate, updated_task_params, baseline, opts);
}

/// Sum over targets of transference_exact, one lookahead per candidate, all
/// against the same baseline.
template <MultiTaskModel M>
Vector total_transference(const M& model, const ParamSet& params, const Batch& batch,
                          const OptimizerState& opt, std::span<const Vector> candidates,
                          std::span<const Vector> updated_task_params, const Vector& baseline,
                          TransferenceOptions opts = {}) {
    check_baseline(baseline, opts.loss_epsilon);
    Vector totals(static_cast<Eigen::Index>(candidates.size()));
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        const Vector z = transference_exact(model, params, batch, opt, candidates[c],
                                            updated_task_params, baseline, opts);
        double sum = 0.0;
        for (Eigen::Index j = 0; j < z.size(); ++j) sum += z[j];
        totals[Eigen::Index(c)] = sum;
    }
    return totals;
}

inline std::vector<Vector> shared_parts(const std::vector<TaskGradient>& grads) {
    std::vector<Vector> out;
    out.reserve(grads.size());
    for (const auto& g : grads) out.push_back(g.shared);
    return out;
}

/// (i, j) = <grad L_j, grad L_i> / L_j, learning rate omitted.
inline Matrix transference_first_order(std::span<const Vector> grads, const Vector& losses,
                                       TransferenceOptions opts = {}) {
    require(grads.size() == std::size_t(losses.size()), "first order: one gradient per task");
    check_baseline(losses, opts.loss_epsilon);
    const auto m = Eigen::Index(grads.size());
    Matrix out(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j)
            out(i, j) = grads[std::size_t(j)].dot(grads[std::size_t(i)]) / losses[j];
    return out;
}

/// Second-order expansion split into its learning-rate orders:
///   Z(eta)_{i->j} ~= eta * linear(i,j) - eta^2 * curvature(i,j)
/// with linear = <grad L_j, g_i>/L_j and curvature = g_i^T H_j g_i / (2 L_j).
struct SecondOrderTransference {
    Matrix linear;
    Matrix curvature;

    [[nodiscard]] Matrix at(double eta) const { return eta * linear - (eta * eta) * curvature; }
    [[nodiscard]] Matrix unscaled() const { return at(1.0); }
};

/// hvp(j, v) must return H_j v.
using HvpAccessor = std::function<Vector(std::size_t, const Vector&)>;

inline SecondOrderTransference transference_second_order(std::span<const Vector> grads,
                                                         const Vector& losses, const HvpAccessor& hvp,
                                                         TransferenceOptions opts = {}) {
    SecondOrderTransference out;
    out.linear = transference_first_order(grads, losses, opts);
    const auto m = Eigen::Index(grads.size());
    out.curvature = Matrix::Zero(m, m);
    for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < m; ++i) {
            const Vector& g = grads[std::size_t(i)];
            if (g.isZero(0.0)) continue;
            out.curvature(i, j) = 0.5 * g.dot(hvp(std::size_t(j), g)) / losses[j];
        }
    return out;
}

template <MultiTaskModel M>
HvpAccessor make_hvp_accessor(const M& model, const ParamSet& params, const Batch& batch,
                              HvpOptions opts = {}) {
    return [&model, &params, &batch, opts](std::size_t j, const Vector& v) {
        return hessian_vector_product(model, params, batch, j, v, opts);
    };
}

/// <sum_j grad L_j / L_j, g>, the first-order total transference of g.
/// Equals <grad log prod_j L_j, g>.
inline double log_product_alignment(std::span<const Vector> grads, const Vector& losses,
                                    const Vector& candidate, TransferenceOptions opts = {}) {
    require(grads.size() == std::size_t(losses.size()), "log-product: one gradient per task");
    check_baseline(losses, opts.loss_epsilon);
    Vector direction = Vector::Zero(candidate.size());
    for (std::size_t j = 0; j < grads.size(); ++j) direction += grads[j] / losses[Eigen::Index(j)];
    return direction.dot(candidate);
}

// ---------------------------------------------------------------------------
// Aggregation

struct TransferenceRecord {
    std::int64_t step = 0;
    std::size_t source = 0;
    std::size_t target = 0;
    double value = 0.0;
};

/// Row = source task, column = target task.
struct TransferenceMatrix {
    Matrix values;
    std::size_t step_count = 0;

    [[nodiscard]] std::size_t size() const { return std::size_t(values.rows()); }
};

struct AggregateResult {
    std::vector<TransferenceMatrix> epochs;
    TransferenceMatrix run;
};

/// Epoch scores are the mean over each epoch's steps; the run score is the
/// mean over all steps.
inline AggregateResult aggregate(std::span<const TransferenceRecord> records, std::size_t tasks,
                                 std::size_t steps_per_epoch) {
    if (records.empty()) throw ConfigError("aggregate: empty record stream");
    require(tasks >= 1, "aggregate: task count must be >= 1");
    require(steps_per_epoch >= 1, "aggregate: steps_per_epoch must be >= 1");
    std::set<std::int64_t> steps;
    for (const auto& r : records) {
        require(r.source < tasks && r.target < tasks, "aggregate: task index out of range");
        steps.insert(r.step);
    }
    const auto first = *steps.begin();
    const auto last = *steps.rbegin();
    if (std::int64_t(steps.size()) != last - first + 1)
        throw ConfigError("aggregate: records do not cover contiguous steps");

    const auto m = Eigen::Index(tasks);
    const auto n_epochs = std::size_t(last - first) / steps_per_epoch + 1;
    std::vector<Matrix> epoch_sum(n_epochs, Matrix::Zero(m, m));
    std::vector<Eigen::MatrixXi> epoch_count(n_epochs, Eigen::MatrixXi::Zero(m, m));
    std::vector<std::set<std::int64_t>> epoch_steps(n_epochs);
    Matrix run_sum = Matrix::Zero(m, m);
    Eigen::MatrixXi run_count = Eigen::MatrixXi::Zero(m, m);
    for (const auto& r : records) {
        const auto e = std::size_t(r.step - first) / steps_per_epoch;
        const auto s = Eigen::Index(r.source), t = Eigen::Index(r.target);
        epoch_sum[e](s, t) += r.value;
        epoch_count[e](s, t) += 1;
        epoch_steps[e].insert(r.step);
        run_sum(s, t) += r.value;
        run_count(s, t) += 1;
    }
    auto mean = [m](const Matrix& sum, const Eigen::MatrixXi& count) {
        Matrix out(m, m);
        for (Eigen::Index a = 0; a < m; ++a)
            for (Eigen::Index b = 0; b < m; ++b)
                out(a, b) = count(a, b) ? sum(a, b) / count(a, b) : std::nan("");
        return out;
    };
    AggregateResult res;
    for (std::size_t e = 0; e < n_epochs; ++e)
        res.epochs.push_back({mean(epoch_sum[e], epoch_count[e]), epoch_steps[e].size()});
    res.run = {mean(run_sum, run_count), steps.size()};
    return res;
}

// ---------------------------------------------------------------------------
// Normalization

struct NormalizedMatrix {
    Matrix values;                    // t_hat(b, a); NaN in invalid columns
    std::vector<bool> valid_columns;  // false where t(a, a) <= eps_self

    [[nodiscard]] std::size_t size() const { return std::size_t(values.rows()); }
    [[nodiscard]] bool all_valid() const {
        return std::all_of(valid_columns.begin(), valid_columns.end(), [](bool v) { return v; });
    }
};

/// t_hat(b, a) = 1 - t(b, a) / t(a, a).
inline NormalizedMatrix normalize(const TransferenceMatrix& t, double eps_self = 1e-9) {
    const auto m = t.values.rows();
    require(t.values.cols() == m, "normalize: matrix must be square");
    NormalizedMatrix out;
    out.values = Matrix(m, m);
    out.valid_columns.assign(std::size_t(m), true);
    for (Eigen::Index a = 0; a < m; ++a) {
        const double self = t.values(a, a);
        const bool ok = std::isfinite(self) && self > eps_self;
        out.valid_columns[std::size_t(a)] = ok;
        for (Eigen::Index b = 0; b < m; ++b)
            out.values(b, a) = !ok ? std::nan("") : (b == a ? 0.0 : 1.0 - t.values(b, a) / self);
    }
    return out;
}

}  // namespace itmtl
