#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "itmtl/datasets.hpp"
#include "itmtl/net_engine.hpp"
#include "support.hpp"

using namespace itmtl;
using namespace testing_support;
using Catch::Matchers::WithinAbs;

TEST_CASE("quadratic toy losses and gradients") {
    const auto model = quadratic_toy();
    const ParamSet p = model.make_params(Vector::Constant(1, 0.5));
    const Batch b = empty_batch(2);
    const Vector l = model.forward_losses(p, b);
    CHECK(l[0] == 0.25);
    CHECK(l[1] == 0.25);
    const auto g = model.task_gradients(p, b);
    CHECK(g[0].shared[0] == 1.0);
    CHECK(g[1].shared[0] == -1.0);
    CHECK(g[0].task.size() == 0);
}

TEST_CASE("weighted shared gradient matches the sum of task gradients") {
    std::mt19937_64 rng(3);
    const MlpModel model(fifty_param_spec());
    const ParamSet p = model.init_params(11);
    const Batch b = random_batch(model.spec(), 7, rng);
    const Vector w = Vector::Constant(2, 1.0);
    const auto g = model.task_gradients(p, b);
    const Vector sum = g[0].shared + g[1].shared;
    CHECK((model.weighted_shared_gradient(p, b, w) - sum).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("backprop matches central finite differences on a 50-parameter tanh net") {
    std::mt19937_64 rng(5);
    const MlpModel model(fifty_param_spec());
    REQUIRE(model.layout().total_size() == 50);
    const ParamSet p = model.init_params(21);
    const Batch b = random_batch(model.spec(), 9, rng);
    const auto grads = model.task_gradients(p, b);
    const Vector flat = flatten(p);
    const double h = 1e-6;
    double worst = 0.0;
    for (std::size_t task = 0; task < 2; ++task) {
        // analytic gradient of task `task` in flat order: shared then its own head
        Vector analytic = Vector::Zero(flat.size());
        analytic.head(grads[task].shared.size()) = grads[task].shared;
        Eigen::Index at = Eigen::Index(model.layout().shared_size);
        for (std::size_t i = 0; i < task; ++i) at += Eigen::Index(model.layout().task_sizes[i]);
        analytic.segment(at, grads[task].task.size()) = grads[task].task;
        for (Eigen::Index k = 0; k < flat.size(); ++k) {
            Vector up = flat, dn = flat;
            up[k] += h;
            dn[k] -= h;
            const double fd = (model.forward_losses(unflatten(p.layout, up), b)[Eigen::Index(task)] -
                               model.forward_losses(unflatten(p.layout, dn), b)[Eigen::Index(task)]) /
                              (2 * h);
            worst = std::max(worst, std::abs(fd - analytic[k]) / std::max(1.0, std::abs(fd)));
        }
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("cross-entropy and mse match naive formulas") {
    std::mt19937_64 rng(8);
    const MlpModel model(fifty_param_spec());
    const ParamSet p = model.init_params(4);
    const Batch b = random_batch(model.spec(), 6, rng);
    const auto outs = model.forward_outputs(p, b.inputs);
    double ce = 0.0, mse = 0.0;
    for (Eigen::Index e = 0; e < 6; ++e) {
        double z = 0.0;
        for (Eigen::Index c = 0; c < outs[0].cols(); ++c) z += std::exp(outs[0](e, c));
        ce += -std::log(std::exp(outs[0](e, b.labels[0].classes[std::size_t(e)])) / z);
        mse += (outs[1].row(e) - b.labels[1].targets.row(e)).squaredNorm();
    }
    const Vector l = model.forward_losses(p, b);
    CHECK_THAT(l[0], WithinAbs(ce / 6.0, 1e-12));
    CHECK_THAT(l[1], WithinAbs(0.7 * mse / 6.0, 1e-12));
}

TEST_CASE("cross-entropy is stable for huge logits") {
    ModelSpec s;
    s.input_dim = 1;
    TaskSpec t;
    t.head = {{2, Activation::Identity, false}};
    t.loss = LossKind::CrossEntropy;
    s.tasks = {t};
    const MlpModel model(s);
    ParamSet p = model.init_params(0);
    p.task_specific[0] << 1000.0, -1000.0;
    Batch b;
    b.inputs = Matrix::Constant(1, 1, 1.0);
    b.labels = {TaskLabels{{1}, Matrix()}};
    const Vector l = model.forward_losses(p, b);
    CHECK(std::isfinite(l[0]));
    CHECK_THAT(l[0], WithinAbs(2000.0, 1e-9));
}

TEST_CASE("finite-difference HVP") {
    SECTION("quadratic toy: H = 2") {
        const auto model = quadratic_toy();
        const ParamSet p = model.make_params(Vector::Constant(1, 0.5));
        const Vector hv = hessian_vector_product(model, p, empty_batch(2), 0, Vector::Ones(1));
        CHECK_THAT(hv[0], WithinAbs(2.0, 1e-10));
    }
    SECTION("linear mse: H v = 2 X^T X v / B") {
        ModelSpec s;
        s.input_dim = 4;
        s.trunk = {{1, Activation::Identity, false}};
        s.tasks = {TaskSpec{}};
        const MlpModel model(s);
        std::mt19937_64 rng(2);
        const ParamSet p = model.init_params(1);
        const Batch b = random_batch(s, 10, rng);
        const Vector v = random_vector(4, rng);
        const Matrix& x = b.inputs;
        const Vector expected = 2.0 * x.transpose() * (x * v) / 10.0;
        const Vector hv = hessian_vector_product(model, p, b, 0, v);
        CHECK((hv - expected).cwiseAbs().maxCoeff() < 1e-7);
    }
    SECTION("zero direction gives zero") {
        const auto model = quadratic_toy();
        const ParamSet p = model.make_params(Vector::Constant(1, 0.5));
        CHECK(hessian_vector_product(model, p, empty_batch(2), 1, Vector::Zero(1))[0] == 0.0);
    }
}

TEST_CASE("sgd and momentum update rules") {
    const auto model = quadratic_toy();
    ParamSet p = model.make_params(Vector::Constant(1, 0.5));
    const Vector g = Vector::Ones(1);

    SECTION("sgd: 0.5 -> 0.4 -> 0.3") {
        auto opt = sgd(0.1, p.layout);
        CHECK(simulate_update(opt, p.shared, g)[0] == 0.4);
        apply_update(opt, p, UpdateTarget::shared(), g);
        CHECK(p.shared[0] == 0.4);
        apply_update(opt, p, UpdateTarget::shared(), g);
        CHECK_THAT(p.shared[0], WithinAbs(0.3, 1e-15));
    }
    SECTION("momentum 0.5: steps of 0.1 then 0.15") {
        auto opt = OptimizerState::create(OptimizerKind::Momentum, 0.1, 0.5, p.layout);
        apply_update(opt, p, UpdateTarget::shared(), g);
        CHECK_THAT(p.shared[0], WithinAbs(0.4, 1e-15));
        const Vector predicted = simulate_update(opt, p.shared, g);
        apply_update(opt, p, UpdateTarget::shared(), g);
        CHECK_THAT(p.shared[0], WithinAbs(0.25, 1e-15));
        CHECK(std::memcmp(predicted.data(), p.shared.data(), sizeof(double)) == 0);
    }
    SECTION("sgd forces momentum to zero") {
        CHECK(OptimizerState::create(OptimizerKind::Sgd, 0.1, 0.9, p.layout).momentum == 0.0);
    }
    SECTION("invalid hyperparameters") {
        CHECK_THROWS_AS(OptimizerState::create(OptimizerKind::Sgd, 0.0, 0.0, p.layout), ConfigError);
        CHECK_THROWS_AS(OptimizerState::create(OptimizerKind::Momentum, 0.1, 1.0, p.layout), ConfigError);
    }
    SECTION("simulate does not mutate") {
        auto opt = OptimizerState::create(OptimizerKind::Momentum, 0.1, 0.5, p.layout);
        const auto before = opt;
        (void)simulate_update(opt, p.shared, g);
        CHECK(opt.bit_equal(before));
    }
}

TEST_CASE("simulate_update and apply_update agree bit-for-bit on a network") {
    std::mt19937_64 rng(9);
    const MlpModel model(fifty_param_spec());
    ParamSet p = model.init_params(3);
    auto opt = OptimizerState::create(OptimizerKind::Momentum, 0.05, 0.9, p.layout);
    for (int step = 0; step < 5; ++step) {
        const Batch b = random_batch(model.spec(), 8, rng);
        const Vector g = model.weighted_shared_gradient(p, b, Vector::Ones(2));
        const Vector sim = simulate_update(opt, p.shared, g);
        apply_update(opt, p, UpdateTarget::shared(), g);
        REQUIRE(std::memcmp(sim.data(), p.shared.data(), sizeof(double) * std::size_t(sim.size())) == 0);
    }
}

TEST_CASE("parameter layout, flatten and validation") {
    const MlpModel model(fifty_param_spec());
    const ParamSet p = model.init_params(7);
    CHECK(model.layout().shared_size == 20);
    CHECK(model.layout().task_sizes == std::vector<std::size_t>{18, 12});
    CHECK(unflatten(p.layout, flatten(p)).bit_equal(p));
    CHECK(model.init_params(7).bit_equal(p));
    CHECK_FALSE(model.init_params(8).bit_equal(p));

    std::mt19937_64 rng(1);
    const Batch b = random_batch(model.spec(), 4, rng);
    ParamSet bad = p;
    bad.shared[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(model.forward_losses(bad, b), NumericError);
    ParamSet short_set = p;
    short_set.task_specific.pop_back();
    CHECK_THROWS_AS(model.forward_losses(short_set, b), ConfigError);

    Batch wrong = b;
    wrong.labels[0].classes[0] = 7;
    CHECK_THROWS_AS(model.forward_losses(p, wrong), ConfigError);

    ModelSpec s = fifty_param_spec();
    s.tasks[0].weight = 0.0;
    CHECK_THROWS_AS(MlpModel(s), ConfigError);
}

TEST_CASE("quadratic model rejects indefinite curvature") {
    CHECK_THROWS_AS(QuadraticModel({{Matrix::Constant(1, 1, -1.0), Vector::Zero(1), 1.0}}), ConfigError);
}
