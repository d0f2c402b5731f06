#include <iostream>

#include <CLI11.hpp>

#include "itmtl/cli.hpp"

namespace cli = itmtl::cli;

int main(int argc, char** argv) {
    CLI::App app{"itmtl: transference measurement, IT-MTL training and task grouping"};
    app.require_subcommand(1);

    std::string spec_path, gen_out;
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset (.mtds)");
    gen->add_option("spec", spec_path, "dataset spec file")->required();
    gen->add_option("-o,--out", gen_out, "output .mtds path")->required();

    std::string config_path, train_out;
    auto* train = app.add_subcommand("train", "run a training config");
    train->add_option("config", config_path, "run config file")->required();
    train->add_option("-o,--out", train_out, "run directory (overrides [train] out)");

    std::string matrix_path, group_out, solver = "both";
    std::size_t budget = 0;
    auto* group = app.add_subcommand("group", "choose task groups under an inference budget");
    group->add_option("matrix", matrix_path, "transference matrix CSV")->required();
    group->add_option("-k,--budget", budget, "maximum number of groups")->required();
    group->add_option("-s,--solver", solver, "exhaustive | bnb | both");
    group->add_option("-o,--out", group_out, "output directory");

    std::string run_dir, trigger = "step=0", kind = "1d", land_out, candidate;
    cli::LandscapeOptions lo;
    auto* land = app.add_subcommand("landscape", "probe the loss landscape of a replayed run");
    land->add_option("run", run_dir, "run directory")->required();
    land->add_option("-t,--trigger", trigger, "step=N | single-beats-combined");
    land->add_option("--kind", kind, "1d | 2d");
    land->add_option("-c,--candidate", candidate, "1-D direction candidate id");
    land->add_option("--samples", lo.samples, "1-D sample count");
    land->add_option("--extent", lo.extent, "1-D alpha range [0, extent]");
    land->add_option("-n,--grid", lo.grid, "2-D grid size per axis");
    land->add_option("--range", lo.range, "2-D half-width in units of |theta_s|");
    land->add_option("--seed", lo.seed, "2-D direction seed");
    land->add_option("-o,--out", land_out, "output directory (default: <run>/landscape)");

    std::string report_path;
    auto* report = app.add_subcommand("report", "render a matrix CSV or plan JSON as a table");
    report->add_option("file", report_path, "matrix CSV or plan JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : cli::kConfig;
    }

    try {
        if (*gen) cli::cmd_gen(spec_path, gen_out, std::cout);
        if (*train)
            cli::cmd_train(config_path, train_out.empty() ? std::nullopt : std::optional<std::filesystem::path>(train_out),
                           std::cout);
        if (*group) {
            const auto out = group_out.empty() ? std::filesystem::path(matrix_path).parent_path() / "plan"
                                         : std::filesystem::path(group_out);
            cli::cmd_group(matrix_path, budget, cli::parse_solver(solver), out, std::cout);
        }
        if (*land) {
            lo.trigger = cli::Trigger::parse(trigger);
            if (kind != "1d" && kind != "2d") throw itmtl::ConfigError("--kind must be 1d or 2d");
            lo.dims = kind == "1d" ? 1 : 2;
            lo.candidate = candidate;
            const auto out = land_out.empty() ? std::filesystem::path(run_dir) / "landscape"
                                       : std::filesystem::path(land_out);
            cli::cmd_landscape(run_dir, lo, out, std::cout);
        }
        if (*report) cli::cmd_report(report_path, std::cout);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::exit_code(e);
    }
    return cli::kOk;
}
