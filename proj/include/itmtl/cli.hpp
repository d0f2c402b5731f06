#pragma once
// Command implementations behind the `itmtl` executable. Each command throws
// on failure; exit_code() maps the exception to the process exit status.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "itmtl/config.hpp"
#include "itmtl/core.hpp"
#include "itmtl/datasets.hpp"
#include "itmtl/grouping.hpp"
#include "itmtl/io.hpp"
#include "itmtl/it_mtl.hpp"
#include "itmtl/landscape.hpp"
#include "itmtl/transference.hpp"

namespace itmtl::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfig = 2, kNumeric = 3, kSolverMismatch = 4 };

inline int exit_code(const std::exception& e) {
    if (dynamic_cast<const SolverMismatchError*>(&e)) return kSolverMismatch;
    if (dynamic_cast<const NumericError*>(&e)) return kNumeric;
    return kConfig;  // ConfigError, I/O and parse failures
}

/// Default output location: $ITMTL_OUTPUT_ROOT/<name>, else runs/<name>.
inline fs::path default_output(const std::string& name) {
    const char* root = std::getenv("ITMTL_OUTPUT_ROOT");
    return fs::path(root && *root ? root : "runs") / name;
}

inline std::string csv_field(const std::string& s) {
    return s.find(',') == std::string::npos ? s : "\"" + s + "\"";
}

// ---------------------------------------------------------------------------
// gen

/// Generates the dataset described by `spec_path` into `out`. Returns the
/// dataset so callers can report on it.
inline Dataset cmd_gen(const fs::path& spec_path, const fs::path& out, std::ostream& log) {
    const std::string text = read_file(spec_path);
    Dataset ds = generate_from_config(text, spec_path.string());
    const std::string bytes = encode_dataset(ds);
    write_atomic(out, bytes);
    log << "wrote " << out.string() << " (" << to_string(ds.spec.kind) << ", train " << ds.train.size()
        << ", valid " << ds.valid.size() << ", test " << ds.test.size() << ", hash " << hex64(fnv1a(bytes))
        << ")\n";
    return ds;
}

// ---------------------------------------------------------------------------
// shared run setup

using AnyModel = std::variant<MlpModel, QuadraticModel>;

struct PreparedRun {
    RunConfig config;
    std::string canonical;  // canonical config text
    std::uint64_t config_hash = 0;
    Dataset dataset;
    AnyModel model;
    ParamSet params;
    OptimizerState opt;
};

inline Dataset load_dataset(const RunConfig& cfg) {
    if (cfg.dataset) return generate(*cfg.dataset);
    return decode_dataset(read_file(cfg.dataset_path));
}

/// Builds dataset, model, initial parameters and optimizer from a config.
/// A relative dataset path is resolved against `base_dir` and stored
/// absolute so the canonical text stands on its own.
inline PreparedRun prepare_run(RunConfig cfg, const fs::path& base_dir) {
    if (!cfg.dataset && fs::path(cfg.dataset_path).is_relative())
        cfg.dataset_path = fs::absolute(base_dir / cfg.dataset_path).lexically_normal().string();
    Dataset ds = load_dataset(cfg);
    const auto m = ds.task_count();
    require(cfg.model.weights.empty() || cfg.model.weights.size() == m,
            "model: 'weights' must list one value per task (" + std::to_string(m) + ")");
    for (const auto& c : cfg.candidates)
        for (auto t : c.tasks) require(t < m, "candidate '" + c.id() + "' names a task outside 0.." + std::to_string(m - 1));

    std::optional<AnyModel> model;
    ParamSet params;
    if (!ds.quadratic.empty()) {
        auto tasks = ds.quadratic;
        for (std::size_t i = 0; i < tasks.size() && !cfg.model.weights.empty(); ++i) tasks[i].weight = cfg.model.weights[i];
        QuadraticModel q(std::move(tasks));
        if (!cfg.model.init.empty()) {
            require(cfg.model.init.size() == q.dim(),
                    "model: 'init' must list " + std::to_string(q.dim()) + " values");
            params = q.make_params(Eigen::Map<const Vector>(cfg.model.init.data(), Eigen::Index(q.dim())));
        } else {
            params = q.init_params(cfg.seed);
        }
        model.emplace(std::move(q));
    } else {
        require(cfg.model.init.empty(), "model: 'init' applies to quadratic datasets only");
        MlpModel net(cfg.model.build(ds.input_dim, ds.tasks));
        params = net.init_params(cfg.seed);
        if (cfg.model.shared_head_init)
            for (std::size_t i = 1; i < m; ++i) {
                require(params.task_specific[i].size() == params.task_specific[0].size(),
                        "model: head_init = shared needs equal head shapes");
                params.task_specific[i] = params.task_specific[0];
            }
        model.emplace(std::move(net));
    }
    const auto& layout = params.layout;
    OptimizerState opt = OptimizerState::create(cfg.optimizer.kind, cfg.optimizer.learning_rate,
                                                cfg.optimizer.momentum, layout);
    PreparedRun run{std::move(cfg), {}, 0, std::move(ds), std::move(*model), std::move(params), std::move(opt)};
    run.canonical = run_config_to_text(run.config);
    run.config_hash = fnv1a(run.canonical);
    return run;
}

inline PreparedRun prepare_run_file(const fs::path& config_path) {
    auto cfg = parse_run_config(read_file(config_path), config_path.string());
    return prepare_run(std::move(cfg), config_path.parent_path());
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
    fs::path out;
    std::uint64_t config_hash = 0;
    std::size_t steps = 0;
    bool aborted = false;
};

inline std::string steps_csv(const RunResult& run) {
    std::string out = "step,candidate_id,total_transference,chosen\n";
    for (const auto& s : run.steps)
        for (std::size_t k = 0; k < run.candidate_ids.size(); ++k) {
            out += std::to_string(s.step) + "," + csv_field(run.candidate_ids[k]) + ",";
            if (k < s.scores.size()) out += format_double(s.scores[k]);
            out += std::string(",") + (k == s.chosen ? "1" : "0") + "\n";
        }
    return out;
}

inline std::string losses_csv(const RunResult& run, std::size_t tasks) {
    std::string out = "epoch";
    for (std::size_t i = 0; i < tasks; ++i) out += ",task_" + std::to_string(i);
    out += ",total\n";
    for (std::size_t e = 0; e < run.epoch_task_losses.size(); ++e) {
        const auto& l = run.epoch_task_losses[e];
        out += std::to_string(e);
        for (Eigen::Index i = 0; i < l.size(); ++i) out += "," + format_double(l[i]);
        out += "," + format_double(l.sum()) + "\n";
    }
    return out;
}

class ArtifactWriter {
public:
    ArtifactWriter(fs::path dir, std::uint64_t config_hash) : dir_(std::move(dir)), hash_(config_hash) {}

    void write(const std::string& name, const std::string& contents) {
        write_atomic(dir_ / name, contents);
        files_[name] = hex64(fnv1a(contents));
    }

    void write_json(const std::string& name, json j) {
        j["config_hash"] = hex64(hash_);
        write(name, j.dump(2) + "\n");
    }

    void write_matrix(const std::string& name, const Matrix& m, json meta) {
        write(name, matrix_to_csv(m));
        write_json(name + ".json", std::move(meta));
    }

    void note_external(const std::string& name) { files_[name] = hex64(fnv1a(read_file(dir_ / name))); }

    void finish(json extra = json::object()) {
        extra["config_hash"] = hex64(hash_);
        extra["files"] = files_;
        write_atomic(dir_ / "manifest.json", extra.dump(2) + "\n");
    }

    [[nodiscard]] const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
    std::uint64_t hash_;
    std::map<std::string, std::string> files_;
};

/// Runs the configured training. The canonical config is written first so
/// the run directory alone reproduces the run.
inline TrainSummary cmd_train(const fs::path& config_path, std::optional<fs::path> out_override, std::ostream& log) {
    PreparedRun prep = prepare_run_file(config_path);
    fs::path out = out_override ? *out_override
                   : !prep.config.out.empty() ? fs::path(prep.config.out)
                                              : default_output(config_path.stem().string());
    ArtifactWriter art(out, prep.config_hash);
    art.write("config.ini", prep.canonical);

    TrainOptions opts;
    opts.mode = prep.config.mode;
    opts.epochs = prep.config.epochs;
    opts.batch_size = prep.config.batch_size;
    opts.seed = prep.config.seed;

    TrainSummary summary{out, prep.config_hash, 0, false};
    const auto tasks = prep.dataset.task_count();
    std::visit(
        [&](const auto& model) {
            RunResult run;
            try {
                run = train(model, prep.params, prep.opt, prep.dataset.train, prep.config.candidates, opts);
            } catch (const StepAbort& e) {
                art.write_json("abort.json", {{"step", e.step()}, {"error", e.what()}});
                art.finish({{"status", "aborted"}});
                throw;
            }
            summary.steps = run.steps.size();
            save_checkpoint(out / "params.bin", run.final_params, {{"config_hash", hex64(prep.config_hash)}});
            art.note_external("params.bin");
            art.note_external("params.bin.json");
            art.write("steps.csv", steps_csv(run));
            art.write("losses.csv", losses_csv(run, tasks));

            json eval = json::object();
            for (const auto& [name, split] : {std::pair{"valid", &prep.dataset.valid}, std::pair{"test", &prep.dataset.test}}) {
                if (split->size() == 0) continue;
                const Vector l = model.forward_losses(run.final_params, full_batch(*split));
                eval[name] = std::vector<double>(l.data(), l.data() + l.size());
            }
            std::map<std::string, std::size_t> chosen;
            for (const auto& s : run.steps) ++chosen[run.candidate_ids[s.chosen]];

            if (prep.config.mode == SelectionMode::Measure && !run.records.empty()) {
                const auto agg = aggregate(run.records, tasks, run.steps_per_epoch);
                const json meta = {{"seed", prep.config.seed}, {"learning_rate", prep.opt.learning_rate},
                                   {"tasks", tasks}};
                for (std::size_t e = 0; e < agg.epochs.size(); ++e) {
                    json m = meta;
                    m["epoch"] = e;
                    m["steps"] = agg.epochs[e].step_count;
                    art.write_matrix("transference_epoch_" + std::to_string(e) + ".csv", agg.epochs[e].values, m);
                }
                json m = meta;
                m["steps"] = agg.run.step_count;
                art.write_matrix("transference_run.csv", agg.run.values, m);
            }
            art.write_json("summary.json", {{"mode", std::string(to_string(prep.config.mode))},
                                            {"steps", run.steps.size()},
                                            {"steps_per_epoch", run.steps_per_epoch},
                                            {"chosen", chosen},
                                            {"final_losses", eval}});
            art.finish({{"status", "ok"}});
        },
        prep.model);
    log << "run " << out.string() << ": " << summary.steps << " steps, config " << hex64(prep.config_hash) << "\n";
    return summary;
}

// ---------------------------------------------------------------------------
// group

enum class Solver { Exhaustive, BranchAndBound, Both };

inline Solver parse_solver(const std::string& s) {
    if (s == "exhaustive") return Solver::Exhaustive;
    if (s == "bnb" || s == "branch-and-bound") return Solver::BranchAndBound;
    if (s == "both") return Solver::Both;
    throw ConfigError("unknown solver '" + s + "' (exhaustive | bnb | both)");
}

inline json plan_to_json(const GroupingPlan& p) {
    return {{"groups", p.groups}, {"serving", p.serving}, {"objective", p.objective}, {"budget", p.budget}};
}

inline GroupingPlan plan_from_json(const json& j) {
    GroupingPlan p;
    p.groups = j.at("groups").get<std::vector<std::vector<std::size_t>>>();
    p.serving = j.at("serving").get<std::vector<std::size_t>>();
    p.objective = j.at("objective");
    p.budget = j.at("budget");
    return p;
}

/// Objectives from different solvers agree when within this tolerance.
inline constexpr double kObjectiveTolerance = 1e-12;

inline GroupingPlan cmd_group(const fs::path& matrix_path, std::size_t budget, Solver solver,
                              const fs::path& out_dir, std::ostream& log) {
    if (budget < 1) throw ConfigError("budget must be >= 1");
    const std::string text = read_file(matrix_path);
    TransferenceMatrix t;
    t.values = matrix_from_csv(text);
    const NormalizedMatrix nm = normalize(t);
    if (!nm.all_valid()) {
        std::string bad;
        for (std::size_t a = 0; a < nm.size(); ++a)
            if (!nm.valid_columns[a]) bad += (bad.empty() ? "" : ", ") + std::to_string(a);
        throw ConfigError(matrix_path.string() + ": invalid columns (non-positive self-transference): " + bad);
    }

    GroupingPlan plan;
    if (solver == Solver::Exhaustive) plan = solve_exhaustive(nm, budget);
    if (solver == Solver::BranchAndBound) plan = solve_branch_and_bound(nm, budget);
    if (solver == Solver::Both) {
        const GroupingPlan ex = solve_exhaustive(nm, budget);
        plan = solve_branch_and_bound(nm, budget);
        if (std::abs(ex.objective - plan.objective) > kObjectiveTolerance)
            throw SolverMismatchError("solver mismatch: exhaustive " + format_double(ex.objective) +
                                      " vs branch-and-bound " + format_double(plan.objective));
    }

    const std::uint64_t hash = fnv1a(text + "\nbudget=" + std::to_string(budget));
    ArtifactWriter art(out_dir, hash);
    art.write_json("plan.json", plan_to_json(plan));
    art.write("plan.txt", render_plan(plan, nm.size()));
    art.write_matrix("normalized.csv", nm.values, {{"source", matrix_path.filename().string()}});
    art.finish({{"status", "ok"}, {"stats", {{"nodes", plan.stats.nodes}, {"prunes", plan.stats.prunes},
                                             {"shortcut", plan.stats.shortcut}}}});
    log << render_plan(plan, nm.size());
    return plan;
}

// ---------------------------------------------------------------------------
// landscape

struct Trigger {
    enum class Kind { Step, SingleBeatsCombined } kind = Kind::Step;
    std::int64_t step = 0;

    static Trigger parse(const std::string& s) {
        Trigger t;
        if (s.rfind("step=", 0) == 0) {
            const std::string n = s.substr(5);
            char* end = nullptr;
            const long long v = std::strtoll(n.c_str(), &end, 10);
            if (n.empty() || *end != '\0' || v < 0) throw ConfigError("bad trigger '" + s + "'");
            t.step = v;
            return t;
        }
        if (s == "single-beats-combined") {
            t.kind = Kind::SingleBeatsCombined;
            return t;
        }
        throw ConfigError("unknown trigger '" + s + "' (step=N | single-beats-combined)");
    }
};

struct LandscapeOptions {
    Trigger trigger;
    int dims = 1;
    std::string candidate;  // 1-D direction; empty: trigger's winner, else combined
    std::size_t samples = 31;
    double extent = 3.0;
    std::size_t grid = 21;
    double range = 0.1;
    std::uint64_t seed = 0;
};

struct LandscapeOutcome {
    std::int64_t step = -1;
    std::string candidate;
    LandscapeGrid grid;
};

inline std::string grid_csv(const LandscapeGrid& g) {
    std::string out = g.dims == 1 ? "alpha" : "u,v";
    const auto m = g.task_losses.empty() ? 0 : g.task_losses.front().size();
    for (Eigen::Index i = 0; i < m; ++i) out += ",task_" + std::to_string(i);
    out += ",combined\n";
    for (std::size_t k = 0; k < g.points.size(); ++k) {
        for (std::size_t c = 0; c < g.points[k].size(); ++c) out += (c ? "," : "") + format_double(g.points[k][c]);
        for (Eigen::Index i = 0; i < m; ++i) out += "," + format_double(g.task_losses[k][i]);
        out += "," + format_double(g.combined[k]) + "\n";
    }
    return out;
}

/// Replays the run in `run_dir` from its copied config until the trigger
/// fires, then probes the pre-step state.
inline LandscapeOutcome cmd_landscape(const fs::path& run_dir, const LandscapeOptions& lo, const fs::path& out_dir,
                                      std::ostream& log) {
    require(lo.dims == 1 || lo.dims == 2, "landscape kind must be 1d or 2d");
    PreparedRun prep = prepare_run_file(run_dir / "config.ini");
    const auto m = prep.dataset.task_count();
    const auto probes = measure_candidates(m);  // single tasks, then combined

    LandscapeOutcome outcome;
    double best_margin = -std::numeric_limits<double>::infinity();
    std::int64_t best_margin_step = -1;
    std::int64_t scanned = 0;

    std::visit(
        [&](const auto& model) {
            TrainOptions opts;
            opts.mode = prep.config.mode;
            opts.epochs = prep.config.epochs;
            opts.batch_size = prep.config.batch_size;
            opts.seed = prep.config.seed;
            opts.before_step = [&](std::int64_t step, const ParamSet& params, const OptimizerState& opt,
                                   const Batch& batch) {
                ++scanned;
                std::string winner;
                if (lo.trigger.kind == Trigger::Kind::Step) {
                    if (step != lo.trigger.step) return true;
                } else {
                    ParamSet p = params;
                    OptimizerState o = opt;
                    StepContext ctx{SelectionMode::Exact, step, prep.config.seed, {}};
                    const StepLog s = train_step(model, p, o, batch, probes, ctx);
                    const double comb = s.scores.back();
                    std::size_t best = 0;
                    for (std::size_t i = 1; i < m; ++i)
                        if (s.scores[i] > s.scores[best]) best = i;
                    const double margin = s.scores[best] - comb;
                    if (margin > best_margin) {
                        best_margin = margin;
                        best_margin_step = step;
                    }
                    if (!(s.scores[best] > comb)) return true;
                    winner = probes[best].id();
                }
                outcome.step = step;
                outcome.candidate = !lo.candidate.empty() ? lo.candidate : !winner.empty() ? winner : "combined";
                const Vector g = [&] {
                    const auto cand = GradientCandidate::parse(outcome.candidate, m);
                    const auto grads = shared_parts(model.task_gradients(params, batch));
                    auto rng = candidate_rng(prep.config.seed, step);
                    return cand.produce(grads, rng);
                }();
                outcome.grid = lo.dims == 1 ? probe_1d(model, params, batch, opt, g, lo.samples, lo.extent)
                                            : probe_2d(model, params, batch, lo.seed, lo.grid, lo.range);
                return false;
            };
            train(model, prep.params, prep.opt, prep.dataset.train, prep.config.candidates, opts);
        },
        prep.model);

    if (outcome.step < 0) {
        std::ostringstream os;
        os << "trigger never fired: scanned " << scanned << " steps";
        if (lo.trigger.kind == Trigger::Kind::SingleBeatsCombined && best_margin_step >= 0)
            os << "; best single-task margin over combined " << format_double(best_margin) << " at step "
               << best_margin_step;
        throw ConfigError(os.str());
    }

    const auto& g = outcome.grid;
    json meta = {{"step", outcome.step}, {"kind", lo.dims == 1 ? "1d" : "2d"},
                 {"learning_rate", prep.opt.learning_rate}, {"points", g.points.size()}};
    if (lo.dims == 1) {
        meta["candidate"] = outcome.candidate;
        meta["update_index"] = g.update_index;
    } else {
        std::vector<double> norms;
        for (const auto& d : g.directions) norms.push_back(d.norm());
        meta["seed"] = lo.seed;
        meta["direction_norms"] = norms;
        meta["task_argmin"] = g.task_argmin;
        meta["combined_argmin"] = g.combined_argmin;
    }
    ArtifactWriter art(out_dir, prep.config_hash);
    const std::string name = lo.dims == 1 ? "landscape_1d.csv" : "landscape_2d.csv";
    art.write(name, grid_csv(g));
    art.write_json(name + ".json", meta);
    art.finish({{"status", "ok"}});
    log << "probed step " << outcome.step << " (" << g.points.size() << " points) -> " << (out_dir / name).string()
        << "\n";
    return outcome;
}

// ---------------------------------------------------------------------------
// report

inline std::string render_matrix(const Matrix& m) {
    std::ostringstream os;
    os << std::setw(10) << "src\\tgt";
    for (Eigen::Index j = 0; j < m.cols(); ++j) os << std::setw(13) << ("task_" + std::to_string(j));
    os << '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        os << std::setw(10) << ("task_" + std::to_string(i));
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            std::ostringstream cell;
            cell << std::setprecision(5) << std::scientific << m(i, j);
            os << std::setw(13) << cell.str();
        }
        os << '\n';
    }
    return os.str();
}

/// Renders a matrix CSV or a plan JSON as an aligned text table.
inline void cmd_report(const fs::path& path, std::ostream& out) {
    const std::string text = read_file(path);
    if (path.extension() == ".csv") {
        out << render_matrix(matrix_from_csv(text));
        return;
    }
    if (path.extension() == ".json") {
        const json j = json::parse(text, nullptr, false);
        if (j.is_object() && j.contains("groups") && j.contains("serving")) {
            const GroupingPlan p = plan_from_json(j);
            out << render_plan(p, p.serving.size());
            return;
        }
    }
    throw ConfigError("report: " + path.string() + " is neither a matrix CSV nor a plan JSON");
}

}  // namespace itmtl::cli
