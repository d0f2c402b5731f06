#pragma once
// Training loop with per-step gradient-candidate selection.
//
// Each step computes per-task losses, updates every head with its own
// gradient, scores the shared-gradient candidates and applies the best one
// to the shared trunk through the real optimizer. Exact mode scores by total
// lookahead transference; first-order mode by alignment with the gradient of
// the log-product loss. Plain mode applies the first candidate; measure mode
// applies the combined gradient while recording the full per-step
// task-to-task transference matrix.

#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "itmtl/core.hpp"
#include "itmtl/datasets.hpp"
#include "itmtl/mechanisms.hpp"
#include "itmtl/net_engine.hpp"
#include "itmtl/transference.hpp"

namespace itmtl {

enum class SelectionMode { Plain, Measure, Exact, FirstOrder };

inline std::string_view to_string(SelectionMode m) {
    switch (m) {
        case SelectionMode::Plain: return "plain";
        case SelectionMode::Measure: return "measure";
        case SelectionMode::Exact: return "it-mtl-exact";
        case SelectionMode::FirstOrder: return "it-mtl-first-order";
    }
    return "?";
}

inline SelectionMode parse_mode(std::string_view s) {
    if (s == "plain") return SelectionMode::Plain;
    if (s == "measure") return SelectionMode::Measure;
    if (s == "it-mtl-exact" || s == "exact") return SelectionMode::Exact;
    if (s == "it-mtl-first-order" || s == "first-order") return SelectionMode::FirstOrder;
    throw ConfigError("unknown mode '" + std::string(s) + "'");
}

struct StepLog {
    std::int64_t step = 0;
    std::int64_t batch_id = 0;
    std::vector<double> scores;  // one per candidate; empty in plain mode
    std::size_t chosen = 0;
    Vector losses;  // baseline per-task losses
    SelectionMode mode = SelectionMode::Plain;
};

/// Pre-step state kept for offline verification.
struct StepSnapshot {
    ParamSet params;
    OptimizerState opt;
    Batch batch;
};

/// The rng stream handed to candidate mechanisms at a given step.
inline std::mt19937_64 candidate_rng(std::uint64_t seed, std::int64_t step) {
    const auto s = std::uint64_t(step);
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(s),
                      std::uint32_t(s >> 32), 0x70636772u};
    return std::mt19937_64(seq);
}

struct StepContext {
    SelectionMode mode = SelectionMode::Exact;
    std::int64_t step = 0;
    std::uint64_t candidate_seed = 0;
    TransferenceOptions transference;
};

/// Index of the largest score; ties go to the lowest index.
inline std::size_t argmax_first(std::span<const double> scores) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < scores.size(); ++k)
        if (scores[k] > scores[best]) best = k;
    return best;
}

/// One training step. Transactional: on any error params and opt are
/// restored to their pre-step values before the exception propagates.
/// In measure mode the m x m transference of every single task onto every
/// task is appended to `records` (may be null otherwise).
template <MultiTaskModel M>
StepLog train_step(const M& model, ParamSet& params, OptimizerState& opt, const Batch& batch,
                   std::span<const GradientCandidate> candidates, const StepContext& ctx,
                   std::vector<TransferenceRecord>* records = nullptr) {
    require(!candidates.empty(), "train_step: candidate list is empty");
    const ParamSet saved_params = params;
    const OptimizerState saved_opt = opt;
    try {
        StepLog log;
        log.step = ctx.step;
        log.batch_id = batch.batch_id;
        log.mode = ctx.mode;

        const ParamSet before = params;
        log.losses = model.forward_losses(before, batch);
        const auto task_grads = model.task_gradients(before, batch);
        const auto grads = shared_parts(task_grads);
        if (ctx.mode != SelectionMode::Plain) check_baseline(log.losses, ctx.transference.loss_epsilon);

        for (std::size_t i = 0; i < model.task_count(); ++i)
            apply_update(opt, params, UpdateTarget::task(i), task_grads[i].task);

        auto rng = candidate_rng(ctx.candidate_seed, ctx.step);
        std::vector<Vector> cand;
        cand.reserve(candidates.size());
        for (const auto& c : candidates) cand.push_back(c.produce(grads, rng));

        switch (ctx.mode) {
            case SelectionMode::Plain:
                log.chosen = 0;
                break;
            case SelectionMode::Exact: {
                const Vector totals = total_transference(model, before, batch, opt, cand,
                                                         params.task_specific, log.losses, ctx.transference);
                log.scores.assign(totals.data(), totals.data() + totals.size());
                log.chosen = argmax_first(log.scores);
                break;
            }
            case SelectionMode::FirstOrder: {
                for (const auto& g : cand)
                    log.scores.push_back(log_product_alignment(grads, log.losses, g, ctx.transference));
                log.chosen = argmax_first(log.scores);
                break;
            }
            case SelectionMode::Measure: {
                const Vector totals = total_transference(model, before, batch, opt, cand,
                                                         params.task_specific, log.losses, ctx.transference);
                log.scores.assign(totals.data(), totals.data() + totals.size());
                log.chosen = candidates.size();
                for (std::size_t k = 0; k < candidates.size(); ++k)
                    if (candidates[k].kind == GradientCandidate::Kind::Combined) log.chosen = k;
                require(log.chosen < candidates.size(), "measure mode requires the combined candidate");
                if (records) {
                    for (std::size_t i = 0; i < model.task_count(); ++i) {
                        const Vector z = transference_exact(model, before, batch, opt, grads[i],
                                                            params.task_specific, log.losses, ctx.transference);
                        for (std::size_t j = 0; j < model.task_count(); ++j)
                            records->push_back({ctx.step, i, j, z[Eigen::Index(j)]});
                    }
                }
                break;
            }
        }
        apply_update(opt, params, UpdateTarget::shared(), cand[log.chosen]);
        return log;
    } catch (...) {
        params = saved_params;
        opt = saved_opt;
        throw;
    }
}

struct TrainOptions {
    SelectionMode mode = SelectionMode::Plain;
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    bool record_snapshots = false;
    TransferenceOptions transference;
    /// Called before every step with the pre-step state; returning false
    /// stops training before that step runs.
    std::function<bool(std::int64_t step, const ParamSet&, const OptimizerState&, const Batch&)> before_step;
};

struct RunResult {
    ParamSet final_params;
    OptimizerState final_opt;
    std::vector<std::string> candidate_ids;
    std::vector<StepLog> steps;
    std::vector<Vector> epoch_task_losses;  // mean baseline loss per task, per epoch
    std::vector<TransferenceRecord> records;
    std::vector<StepSnapshot> snapshots;
    std::size_t steps_per_epoch = 0;
    bool stopped_early = false;
};

/// Error raised by a step, annotated with the step index.
class StepAbort : public NumericError {
public:
    StepAbort(std::int64_t step, const std::string& what)
        : NumericError("step " + std::to_string(step) + ": " + what), step_(step) {}
    [[nodiscard]] std::int64_t step() const { return step_; }

private:
    std::int64_t step_;
};

inline std::size_t steps_per_epoch(std::size_t examples, std::size_t batch_size) {
    return (examples + batch_size - 1) / batch_size;
}

/// The measure-mode candidate list: every single task, then combined.
inline std::vector<GradientCandidate> measure_candidates(std::size_t tasks) {
    return single_task_candidates(tasks, true);
}

/// Full training run. Deterministic given the inputs and options.seed; the
/// data order stream and the candidate stream are derived from it
/// independently.
template <MultiTaskModel M>
RunResult train(const M& model, ParamSet params, OptimizerState opt, const Split& data,
                std::span<const GradientCandidate> candidates, const TrainOptions& options) {
    require(options.batch_size >= 1, "train: batch_size must be >= 1");
    require(data.size() >= 1, "train: training split is empty");
    std::vector<GradientCandidate> cands(candidates.begin(), candidates.end());
    if (options.mode == SelectionMode::Measure) cands = measure_candidates(model.task_count());
    require(!cands.empty(), "train: candidate list is empty");

    RunResult run;
    for (const auto& c : cands) run.candidate_ids.push_back(c.id());
    run.steps_per_epoch = steps_per_epoch(data.size(), options.batch_size);

    std::seed_seq data_seq{std::uint32_t(options.seed), std::uint32_t(options.seed >> 32), 0x64617461u};
    std::mt19937_64 data_rng(data_seq);
    std::vector<std::size_t> order(data.size());

    StepContext ctx;
    ctx.mode = options.mode;
    ctx.candidate_seed = options.seed;
    ctx.transference = options.transference;

    std::int64_t step = 0;
    for (std::size_t epoch = 0; epoch < options.epochs && !run.stopped_early; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), data_rng);
        Vector loss_sum = Vector::Zero(Eigen::Index(model.task_count()));
        std::size_t taken = 0;
        for (std::size_t start = 0; start < order.size(); start += options.batch_size, ++step) {
            const auto n = std::min(options.batch_size, order.size() - start);
            const Batch batch = make_batch(data, std::span(order).subspan(start, n), step);
            if (options.before_step && !options.before_step(step, params, opt, batch)) {
                run.stopped_early = true;
                break;
            }
            if (options.record_snapshots) run.snapshots.push_back({params, opt, batch});
            ctx.step = step;
            try {
                run.steps.push_back(train_step(model, params, opt, batch, cands, ctx,
                                               options.mode == SelectionMode::Measure ? &run.records : nullptr));
            } catch (const ConfigError&) {
                throw;
            } catch (const std::exception& e) {
                throw StepAbort(step, e.what());
            }
            loss_sum += run.steps.back().losses;
            ++taken;
        }
        if (taken) run.epoch_task_losses.push_back(loss_sum / double(taken));
    }
    run.final_params = std::move(params);
    run.final_opt = std::move(opt);
    return run;
}

}  // namespace itmtl
