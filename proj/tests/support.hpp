#pragma once
// Small builders shared by the test binaries.

#include <cstdint>
#include <random>
#include <vector>

#include "itmtl/net_engine.hpp"

namespace testing_support {

using namespace itmtl;

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
    return m;
}

inline Vector random_vector(Eigen::Index n, std::mt19937_64& rng, double scale = 1.0) {
    return random_matrix(n, 1, rng, scale);
}

/// input 3 -> 5 tanh trunk (20 params); heads: 5 -> 3 classes (18), 5 -> 2 regression (12).
inline ModelSpec fifty_param_spec() {
    ModelSpec s;
    s.input_dim = 3;
    s.trunk = {{5, Activation::Tanh, true}};
    TaskSpec ce;
    ce.head = {{3, Activation::Identity, true}};
    ce.loss = LossKind::CrossEntropy;
    TaskSpec mse;
    mse.head = {{2, Activation::Identity, true}};
    mse.loss = LossKind::MeanSquaredError;
    mse.weight = 0.7;
    s.tasks = {ce, mse};
    return s;
}

/// Random inputs and labels matching `spec`.
inline Batch random_batch(const ModelSpec& spec, std::size_t n, std::mt19937_64& rng) {
    Batch b;
    b.inputs = random_matrix(Eigen::Index(n), Eigen::Index(spec.input_dim), rng);
    for (std::size_t i = 0; i < spec.tasks.size(); ++i) {
        TaskLabels l;
        const auto k = spec.output_dim(i);
        if (spec.tasks[i].loss == LossKind::CrossEntropy) {
            std::uniform_int_distribution<int> cls(0, int(k) - 1);
            for (std::size_t e = 0; e < n; ++e) l.classes.push_back(cls(rng));
        } else {
            l.targets = random_matrix(Eigen::Index(n), Eigen::Index(k), rng);
        }
        b.labels.push_back(std::move(l));
    }
    return b;
}

/// Two-layer tanh net with `tasks` regression heads.
inline ModelSpec tanh_regression_spec(std::size_t input, std::size_t hidden, std::size_t tasks) {
    ModelSpec s;
    s.input_dim = input;
    s.trunk = {{hidden, Activation::Tanh, true}, {hidden, Activation::Tanh, true}};
    for (std::size_t i = 0; i < tasks; ++i) {
        TaskSpec t;
        t.head = {{1, Activation::Identity, true}};
        s.tasks.push_back(t);
    }
    return s;
}

inline OptimizerState sgd(double lr, const ParamLayout& layout) {
    return OptimizerState::create(OptimizerKind::Sgd, lr, 0.0, layout);
}

}  // namespace testing_support
