#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "itmtl/cli.hpp"
#include "support.hpp"

using namespace itmtl;
using namespace itmtl::cli;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / ("itmtl_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void put(const fs::path& p, const std::string& text) {
    std::ofstream(p) << text;
}

struct Run {
    int code = -1;
    std::string output;
};

// Runs the built binary; stdout and stderr are captured together.
Run run_cli(const std::string& args) {
    const auto log = fs::temp_directory_path() / "itmtl_cli_last.log";
    const std::string cmd = std::string(ITMTL_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = read_file(log);
    return r;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::istringstream in(read_file(p));
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

const std::string kToyRun = R"([dataset]
kind = quadratic-toy
seed = 0
train = 4

[model]
init = 0.5

[optimizer]
learning_rate = 0.1

[train]
mode = plain
candidates = combined
epochs = 2
batch_size = 4
seed = 0
)";

std::string regression_run(const std::string& mode, const std::string& candidates, double rho = 0.3,
                           const std::string& extra_model = "") {
    return "[dataset]\nkind = related-regression\nseed = 4\ntasks = 3\nrho = " + format_double(rho) +
           "\ntrain = 64\nvalid = 16\ntest = 16\ninput_dim = 6\n\n[model]\ntrunk = 8:tanh\n" + extra_model +
           "\n[optimizer]\nlearning_rate = 0.05\n\n[train]\nmode = " + mode + "\ncandidates = " + candidates +
           "\nepochs = 2\nbatch_size = 16\nseed = 7\n";
}

}  // namespace

TEST_CASE("gen is deterministic and reports infeasible rho") {
    const auto dir = scratch("gen");
    put(dir / "spec.ini", "[dataset]\nkind = overlap-glyph\nseed = 3\ntrain = 30\nvalid = 5\ntest = 5\noverlap = 0.2\n");
    REQUIRE(run_cli("gen " + (dir / "spec.ini").string() + " -o " + (dir / "a.mtds").string()).code == 0);
    REQUIRE(run_cli("gen " + (dir / "spec.ini").string() + " -o " + (dir / "b.mtds").string()).code == 0);
    const std::string a = read_file(dir / "a.mtds");
    CHECK(fnv1a(a) == fnv1a(read_file(dir / "b.mtds")));
    const json header = dataset_header(a);
    CHECK(header.at("splits").at("train") == 30);
    CHECK(decode_dataset(a).train.size() == 30);

    put(dir / "bad.ini", "[dataset]\nkind = related-regression\nseed = 1\ntasks = 4\nrho = -0.5\n");
    const Run bad = run_cli("gen " + (dir / "bad.ini").string() + " -o " + (dir / "c.mtds").string());
    CHECK(bad.code == 2);
    CHECK_THAT(bad.output, ContainsSubstring("-0.333"));
    CHECK_THAT(bad.output, ContainsSubstring("bad.ini:5:"));
    CHECK_FALSE(fs::exists(dir / "c.mtds"));

    CHECK(run_cli("gen " + (dir / "missing.ini").string() + " -o x.mtds").code == 2);
    CHECK(run_cli("frobnicate").code == 2);
}

TEST_CASE("train from a generated dataset file") {
    const auto dir = scratch("train_path");
    put(dir / "spec.ini", "[dataset]\nkind = related-regression\nseed = 2\ntasks = 2\ntrain = 32\n");
    REQUIRE(run_cli("gen " + (dir / "spec.ini").string() + " -o " + (dir / "d.mtds").string()).code == 0);
    put(dir / "run.ini", "[dataset]\npath = d.mtds\n\n[model]\ntrunk = 4:tanh\n\n[train]\nseed = 1\nbatch_size = 8\n");
    std::ostringstream log;
    const auto s = cmd_train(dir / "run.ini", dir / "out", log);
    CHECK(s.steps == 4);
    CHECK_THAT(read_file(dir / "out" / "config.ini"), ContainsSubstring((dir / "d.mtds").string()));
    // the copied config alone reproduces the run
    const auto again = cmd_train(dir / "out" / "config.ini", dir / "out2", log);
    CHECK(again.config_hash == s.config_hash);
    CHECK(read_file(dir / "out" / "params.bin") == read_file(dir / "out2" / "params.bin"));
}

TEST_CASE("plain combined matches exact selection with a single candidate") {
    const auto dir = scratch("plain_exact");
    put(dir / "plain.ini", regression_run("plain", "combined"));
    put(dir / "exact.ini", regression_run("it-mtl-exact", "combined"));
    REQUIRE(run_cli("train " + (dir / "plain.ini").string() + " -o " + (dir / "p").string()).code == 0);
    REQUIRE(run_cli("train " + (dir / "exact.ini").string() + " -o " + (dir / "e").string()).code == 0);
    CHECK(read_file(dir / "p" / "losses.csv") == read_file(dir / "e" / "losses.csv"));
    CHECK(read_file(dir / "p" / "params.bin") == read_file(dir / "e" / "params.bin"));

    const auto steps = read_csv(dir / "e" / "steps.csv");
    REQUIRE(steps.size() == 1 + 8);
    CHECK(steps[0] == std::vector<std::string>{"step", "candidate_id", "total_transference", "chosen"});
    CHECK(steps[1][1] == "combined");
    CHECK(steps[1][3] == "1");
    CHECK(read_csv(dir / "p" / "steps.csv")[1][2].empty());
}

TEST_CASE("measure mode on duplicated tasks: off-diagonal equals diagonal") {
    const auto dir = scratch("measure");
    put(dir / "m.ini", regression_run("measure", "combined", 1.0, "head_init = shared\n"));
    std::ostringstream log;
    cmd_train(dir / "m.ini", dir / "out", log);
    const Matrix t = matrix_from_csv(read_file(dir / "out" / "transference_run.csv"));
    REQUIRE(t.rows() == 3);
    for (Eigen::Index i = 0; i < 3; ++i)
        for (Eigen::Index j = 0; j < 3; ++j) CHECK_THAT(t(i, j), WithinAbs(t(j, j), 1e-6));
    CHECK(fs::exists(dir / "out" / "transference_epoch_1.csv"));
    const json side = json::parse(read_file(dir / "out" / "transference_run.csv.json"));
    CHECK(side.at("config_hash") == json::parse(read_file(dir / "out" / "manifest.json")).at("config_hash"));

    // independent heads break the symmetry
    put(dir / "i.ini", regression_run("measure", "combined", 1.0));
    cmd_train(dir / "i.ini", dir / "indep", log);
    const Matrix u = matrix_from_csv(read_file(dir / "indep" / "transference_run.csv"));
    CHECK(std::abs(u(0, 1) - u(1, 1)) > 1e-6);
}

TEST_CASE("same config twice gives identical outputs") {
    const auto dir = scratch("repro");
    put(dir / "r.ini", regression_run("it-mtl-exact", "subset:{0}, subset:{1,2}, combined, pcgrad"));
    REQUIRE(run_cli("train " + (dir / "r.ini").string() + " -o " + (dir / "a").string()).code == 0);
    REQUIRE(run_cli("train " + (dir / "r.ini").string() + " -o " + (dir / "b").string()).code == 0);
    CHECK(read_file(dir / "a" / "manifest.json") == read_file(dir / "b" / "manifest.json"));
    for (const auto& e : fs::directory_iterator(dir / "a"))
        CHECK(read_file(e.path()) == read_file(dir / "b" / e.path().filename()));
    CHECK_THAT(read_file(dir / "a" / "steps.csv"), ContainsSubstring("\"subset:{1,2}\""));

    const json manifest = json::parse(read_file(dir / "a" / "manifest.json"));
    CHECK(manifest.at("files").at("params.bin") == hex64(fnv1a(read_file(dir / "a" / "params.bin"))));
    CHECK(manifest.at("config_hash") == hex64(fnv1a(read_file(dir / "a" / "config.ini"))));
}

TEST_CASE("train reports config errors") {
    const auto dir = scratch("train_err");
    put(dir / "w.ini", regression_run("plain", "combined", 0.3, "weights = 1, 2\n"));
    const Run r = run_cli("train " + (dir / "w.ini").string() + " -o " + (dir / "o").string());
    CHECK(r.code == 2);
    CHECK_THAT(r.output, ContainsSubstring("weights"));
    put(dir / "c.ini", regression_run("plain", "subset:{5}"));
    CHECK(run_cli("train " + (dir / "c.ini").string() + " -o " + (dir / "o").string()).code == 2);
}

TEST_CASE("degenerate loss aborts with the step recorded") {
    const auto dir = scratch("abort");
    std::string cfg = kToyRun;
    cfg.replace(cfg.find("init = 0.5"), 10, "init = 1");  // L2 = 0 at the start
    cfg.replace(cfg.find("mode = plain"), 12, "mode = it-mtl-exact");
    put(dir / "toy.ini", cfg);
    const Run r = run_cli("train " + (dir / "toy.ini").string() + " -o " + (dir / "o").string());
    CHECK(r.code == 3);
    const json abort = json::parse(read_file(dir / "o" / "abort.json"));
    CHECK(abort.at("step") == 0);
}

TEST_CASE("group command") {
    const auto dir = scratch("group");
    std::mt19937_64 rng(5);
    Matrix t = testing_support::random_matrix(4, 4, rng).cwiseAbs();
    t.diagonal().array() += 0.5;
    put(dir / "t4.csv", matrix_to_csv(t));

    const Run all = run_cli("group " + (dir / "t4.csv").string() + " -k 4 -o " + (dir / "p4").string());
    REQUIRE(all.code == 0);
    const json plan = json::parse(read_file(dir / "p4" / "plan.json"));
    const GroupingPlan p = plan_from_json(plan);
    std::ostringstream log;
    const auto direct = cmd_group(dir / "t4.csv", 4, Solver::Exhaustive, dir / "px", log);
    CHECK_THAT(p.objective, WithinAbs(direct.objective, 1e-12));
    CHECK(p.objective <= 0.0);

    // every normalized entry >= 0 gives the singleton plan
    Matrix s = Matrix::Constant(4, 4, 0.1);
    s.diagonal().setOnes();
    put(dir / "s.csv", matrix_to_csv(s));
    REQUIRE(run_cli("group " + (dir / "s.csv").string() + " -k 4 -o " + (dir / "ps").string()).code == 0);
    const GroupingPlan singles = plan_from_json(json::parse(read_file(dir / "ps" / "plan.json")));
    CHECK(singles.groups.size() == 4);
    CHECK(singles.objective == 0.0);

    Matrix f = testing_support::random_matrix(5, 5, rng).cwiseAbs();
    f.diagonal().array() += 0.5;
    put(dir / "t5.csv", matrix_to_csv(f));
    REQUIRE(run_cli("group " + (dir / "t5.csv").string() + " -k 2 --solver both").code == 0);
    const GroupingPlan two = plan_from_json(json::parse(read_file(dir / "plan" / "plan.json")));
    CHECK(two.groups.size() <= 2);
    CHECK(fs::exists(dir / "plan" / "plan.txt"));
    CHECK(fs::exists(dir / "plan" / "normalized.csv"));

    CHECK(run_cli("group " + (dir / "t5.csv").string() + " -k 0").code == 2);
    Matrix bad = t;
    bad(2, 2) = -1.0;
    put(dir / "bad.csv", matrix_to_csv(bad));
    const Run r = run_cli("group " + (dir / "bad.csv").string() + " -k 2");
    CHECK(r.code == 2);
    CHECK_THAT(r.output, ContainsSubstring("invalid columns"));
    CHECK(run_cli("group " + (dir / "t5.csv").string() + " -k 2 --solver greedy").code == 2);

    CHECK(exit_code(SolverMismatchError("x")) == 4);
    CHECK(exit_code(ConfigError("x")) == 2);
    CHECK(exit_code(DegenerateLossError(1, 0.0)) == 3);

    const Run rep = run_cli("report " + (dir / "plan" / "plan.json").string());
    CHECK(rep.code == 0);
    CHECK_THAT(rep.output, ContainsSubstring("G0"));
    const Run rm = run_cli("report " + (dir / "t5.csv").string());
    CHECK(rm.code == 0);
    CHECK_THAT(rm.output, ContainsSubstring("task_4"));
}

TEST_CASE("landscape replays a run") {
    const auto dir = scratch("landscape");
    put(dir / "toy.ini", kToyRun);
    std::ostringstream log;
    cmd_train(dir / "toy.ini", dir / "run", log);

    SECTION("step=0 along g1 matches the closed form") {
        const Run r = run_cli("landscape " + (dir / "run").string() + " -t step=0 -c subset:{0} --samples 31");
        REQUIRE(r.code == 0);
        const auto rows = read_csv(dir / "run" / "landscape" / "landscape_1d.csv");
        REQUIRE(rows.size() == 1 + 31);
        CHECK(rows[0] == std::vector<std::string>{"alpha", "task_0", "task_1", "combined"});
        for (std::size_t k = 1; k < rows.size(); ++k) {
            const double alpha = std::stod(rows[k][0]);
            const double theta = 0.5 - 0.1 * alpha;
            CHECK_THAT(std::stod(rows[k][1]), WithinAbs(theta * theta, 1e-14));
            CHECK_THAT(std::stod(rows[k][2]), WithinAbs((theta - 1) * (theta - 1), 1e-14));
        }
        const json meta = json::parse(read_file(dir / "run" / "landscape" / "landscape_1d.csv.json"));
        CHECK(meta.at("step") == 0);
    }
    SECTION("2-D grid shape") {
        LandscapeOptions lo;
        lo.dims = 2;
        lo.grid = 5;
        lo.trigger = Trigger::parse("step=1");
        const auto out = cmd_landscape(dir / "run", lo, dir / "l2", log);
        CHECK(out.step == 1);
        CHECK(read_csv(dir / "l2" / "landscape_2d.csv").size() == 1 + 25);
    }
    SECTION("trigger that never fires reports a scan summary") {
        // the toy always prefers the combined step
        const Run r = run_cli("landscape " + (dir / "run").string() + " -t single-beats-combined");
        CHECK(r.code == 2);
        CHECK_THAT(r.output, ContainsSubstring("scanned 2 steps"));
        CHECK_THAT(r.output, ContainsSubstring("best single-task margin"));
        CHECK(run_cli("landscape " + (dir / "run").string() + " -t step=99").code == 2);
        CHECK_THROWS_AS(Trigger::parse("when=3"), ConfigError);
    }
}
