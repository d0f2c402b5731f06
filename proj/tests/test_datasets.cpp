#include <catch_amalgamated.hpp>

#include <set>

#include "itmtl/datasets.hpp"
#include "itmtl/io.hpp"
#include "itmtl/it_mtl.hpp"
#include "support.hpp"

using namespace itmtl;
using namespace testing_support;
using Catch::Matchers::WithinAbs;

namespace {

DatasetSpec regression(std::size_t m, double rho, std::uint64_t seed = 1) {
    DatasetSpec s;
    s.kind = DatasetKind::RelatedRegression;
    s.tasks = m;
    s.rho = rho;
    s.seed = seed;
    s.train = 64;
    s.valid = 16;
    s.test = 16;
    return s;
}

double cosine(const Vector& a, const Vector& b) { return a.dot(b) / (a.norm() * b.norm()); }

}  // namespace

TEST_CASE("related regression weight correlations") {
    SECTION("rho = 0, m = 2: orthogonal") {
        const auto ds = generate(regression(2, 0.0));
        CHECK(std::abs(cosine(ds.task_weights[0], ds.task_weights[1])) < 1e-12);
    }
    SECTION("m = 3, rho = 0.5") {
        const auto ds = generate(regression(3, 0.5));
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = i + 1; j < 3; ++j)
                CHECK_THAT(cosine(ds.task_weights[i], ds.task_weights[j]), WithinAbs(0.5, 1e-12));
    }
    SECTION("rho = 1: duplicated tasks") {
        const auto ds = generate(regression(3, 1.0));
        CHECK(ds.task_weights[0] == ds.task_weights[2]);
        CHECK(ds.train.labels[0].targets == ds.train.labels[1].targets);
    }
    SECTION("negative rho at the feasibility bound") {
        const auto ds = generate(regression(4, -1.0 / 3.0));
        CHECK_THAT(cosine(ds.task_weights[0], ds.task_weights[3]), WithinAbs(-1.0 / 3.0, 1e-12));
    }
    SECTION("explicit correlation matrix") {
        auto s = regression(3, 0.0);
        s.correlation = {1, 0.9, -0.2, 0.9, 1, 0.1, -0.2, 0.1, 1};
        const auto ds = generate(s);
        CHECK_THAT(cosine(ds.task_weights[0], ds.task_weights[1]), WithinAbs(0.9, 1e-12));
        CHECK_THAT(cosine(ds.task_weights[0], ds.task_weights[2]), WithinAbs(-0.2, 1e-12));
        CHECK_THAT(cosine(ds.task_weights[1], ds.task_weights[2]), WithinAbs(0.1, 1e-12));
    }
}

TEST_CASE("infeasible rho is rejected with the bound") {
    CHECK_THROWS_WITH(generate(regression(3, -0.6)), Catch::Matchers::ContainsSubstring("-0.5"));
    CHECK_THROWS_AS(generate(regression(2, 1.5)), ConfigError);
    auto s = regression(3, 0.0);
    s.correlation = {1, 0.99, -0.99, 0.99, 1, 0.99, -0.99, 0.99, 1};
    CHECK_THROWS_WITH(generate(s), Catch::Matchers::ContainsSubstring("positive semidefinite"));
}

TEST_CASE("same spec gives a bit-identical dataset; splits are disjoint") {
    for (auto kind : {DatasetKind::RelatedRegression, DatasetKind::OverlapGlyph}) {
        DatasetSpec s = regression(3, 0.2, 9);
        s.kind = kind;
        s.overlap = 0.3;
        const auto a = encode_dataset(generate(s));
        const auto b = encode_dataset(generate(s));
        CHECK(a == b);
        s.seed = 10;
        CHECK(encode_dataset(generate(s)) != a);

        s.seed = 9;
        const auto ds = generate(s);
        std::set<std::vector<double>> rows;
        for (const Split* sp : {&ds.train, &ds.valid, &ds.test})
            for (Eigen::Index r = 0; r < sp->features.rows(); ++r) {
                const Vector row = sp->features.row(r).transpose();
                rows.insert(std::vector<double>(row.data(), row.data() + row.size()));
            }
        CHECK(rows.size() == ds.train.size() + ds.valid.size() + ds.test.size());
    }
}

TEST_CASE("features and labels are stored at float32 precision") {
    const auto ds = generate(regression(2, 0.3));
    for (Eigen::Index k = 0; k < ds.train.features.size(); ++k) {
        const double v = ds.train.features.data()[k];
        REQUIRE(double(float(v)) == v);
    }
    const double y = ds.train.labels[1].targets(3, 0);
    CHECK(double(float(y)) == y);
}

TEST_CASE("overlap glyph geometry and labels") {
    DatasetSpec s;
    s.kind = DatasetKind::OverlapGlyph;
    s.train = 50;
    s.valid = 5;
    s.test = 5;
    s.glyph_size = 10;
    s.overlap = 0.0;
    auto geo = glyph_geometry(s);
    CHECK(geo.width == 20);
    s.overlap = 0.5;
    geo = glyph_geometry(s);
    CHECK(geo.width == 15);
    CHECK(geo.right_offset == 5);
    const auto ds = generate(s);
    CHECK(ds.input_dim == 150);
    CHECK(ds.train.size() == 50);
    for (std::size_t e = 0; e < 50; ++e) {
        CHECK(ds.train.labels[0].classes[e] >= 0);
        CHECK(ds.train.labels[1].classes[e] <= 9);
    }
    CHECK(ds.train.features.minCoeff() >= 0.0);
    CHECK(ds.train.features.maxCoeff() <= 1.0);

    s.overlap = 0.95;
    CHECK_THROWS_AS(generate(s), ConfigError);
    s.overlap = 0.0;
    s.glyph_size = 4;
    CHECK_THROWS_AS(generate(s), ConfigError);
}

TEST_CASE("identical glyphs on both sides at zero overlap render mirrored halves") {
    DatasetSpec s;
    s.kind = DatasetKind::OverlapGlyph;
    s.pixel_noise = 0.0;
    s.glyph_size = 10;
    for (int glyph = 0; glyph < 10; ++glyph) {
        std::mt19937_64 rng{std::uint64_t(glyph)};
        const Vector img = render_overlap_pair(s, glyph, glyph, rng);
        const Eigen::Map<const RowMatrix> m(img.data(), 10, 20);
        // both halves carry ink; jitter may shift each copy by one pixel
        CHECK(m.leftCols(10).sum() > 0.0);
        CHECK(m.rightCols(10).sum() > 0.0);
        CHECK(std::abs(m.leftCols(10).cast<double>().array().ceil().sum() -
                       m.rightCols(10).cast<double>().array().ceil().sum()) <= 3.0);
    }
}

TEST_CASE("a single-task classifier reads the clean left glyph") {
    DatasetSpec s;
    s.kind = DatasetKind::OverlapGlyph;
    s.seed = 5;
    s.train = 2000;
    s.valid = 0;
    s.test = 500;
    s.overlap = 0.0;
    Dataset ds = generate(s);
    for (Split* sp : {&ds.train, &ds.test}) sp->labels.resize(1);  // left task only

    ModelSpec spec;
    spec.input_dim = ds.input_dim;
    spec.trunk = {{32, Activation::Tanh, true}};
    TaskSpec t;
    t.head = {{10, Activation::Identity, true}};
    t.loss = LossKind::CrossEntropy;
    spec.tasks = {t};
    const MlpModel model(spec);
    TrainOptions o;
    o.epochs = 8;
    o.batch_size = 32;
    o.seed = 1;
    const ParamSet p0 = model.init_params(3);
    const std::vector<GradientCandidate> comb = {GradientCandidate::make_combined()};
    const RunResult run = train(model, p0, sgd(0.2, p0.layout), ds.train, comb, o);

    const Matrix logits = model.forward_outputs(run.final_params, ds.test.features)[0];
    std::size_t correct = 0;
    for (Eigen::Index e = 0; e < logits.rows(); ++e) {
        Eigen::Index arg = 0;
        logits.row(e).maxCoeff(&arg);
        correct += int(arg) == ds.test.labels[0].classes[std::size_t(e)];
    }
    const double acc = double(correct) / double(logits.rows());
    INFO("test accuracy " << acc);
    CHECK(acc >= 0.95);
}

TEST_CASE("random quadratic curvature") {
    DatasetSpec s;
    s.kind = DatasetKind::RandomQuadratic;
    s.seed = 4;
    s.tasks = 3;
    s.dim = 4;
    s.kappa = 50;
    const auto ds = generate(s);
    REQUIRE(ds.quadratic.size() == 3);
    Eigen::SelfAdjointEigenSolver<Matrix> e0(ds.quadratic[0].curvature);
    CHECK_THAT(e0.eigenvalues().maxCoeff() / e0.eigenvalues().minCoeff(), WithinAbs(50.0, 1e-9));
    for (std::size_t i = 1; i < 3; ++i) {
        Eigen::SelfAdjointEigenSolver<Matrix> e(ds.quadratic[i].curvature);
        CHECK(e.eigenvalues().minCoeff() >= 1.0 - 1e-12);
        CHECK(e.eigenvalues().maxCoeff() <= 2.0 + 1e-12);
    }
    CHECK(ds.train.features.cols() == 0);
    s.kappa = 0.5;
    CHECK_THROWS_AS(generate(s), ConfigError);
}

TEST_CASE("quadratic toy dataset reproduces the toy losses") {
    DatasetSpec s;
    s.kind = DatasetKind::QuadraticToy;
    const auto ds = generate(s);
    const QuadraticModel model(ds.quadratic);
    for (double theta : {-1.0, 0.25, 0.5, 2.0}) {
        const Vector l = model.forward_losses(model.make_params(Vector::Constant(1, theta)), empty_batch(2));
        CHECK_THAT(l[0], WithinAbs(theta * theta, 1e-15));
        CHECK_THAT(l[1], WithinAbs((theta - 1) * (theta - 1), 1e-15));
    }
}

TEST_CASE("identical wells: combined is always chosen") {
    DatasetSpec s;
    s.kind = DatasetKind::RandomQuadratic;
    s.seed = 2;
    s.dim = 3;
    s.tasks = 1;
    s.kappa = 1;
    const auto base = generate(s).quadratic[0];
    const QuadraticModel model({base, base});
    ParamSet p = model.init_params(8);
    auto opt = sgd(0.05, p.layout);
    const auto cands = single_task_candidates(2, true);
    for (std::int64_t step = 0; step < 30; ++step) {
        const auto log = train_step(model, p, opt, empty_batch(2), cands, {SelectionMode::Exact, step, 0, {}});
        REQUIRE(log.chosen == 2);
    }
}

TEST_CASE("high curvature with misaligned wells produces single-task choices") {
    std::size_t single = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        DatasetSpec s;
        s.kind = DatasetKind::RandomQuadratic;
        s.seed = seed;
        s.dim = 2;
        s.tasks = 2;
        s.kappa = 50;
        s.train = 100;
        const auto ds = generate(s);
        const QuadraticModel model(ds.quadratic);
        Matrix total = Matrix::Zero(2, 2);
        for (const auto& q : ds.quadratic) total += 2.0 * q.curvature;
        const double lmax = Eigen::SelfAdjointEigenSolver<Matrix>(total).eigenvalues().maxCoeff();
        const ParamSet p0 = model.init_params(seed + 100);
        TrainOptions o;
        o.mode = SelectionMode::Exact;
        o.batch_size = 1;
        o.seed = seed;
        const auto run = train(model, p0, sgd(1.0 / lmax, p0.layout), ds.train, single_task_candidates(2, true), o);
        for (const auto& st : run.steps) single += st.chosen < 2;
    }
    CHECK(single > 0);
}
