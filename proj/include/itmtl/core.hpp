#pragma once
// Shared vocabulary: vector/matrix aliases, error types, and small helpers
// used across the itmtl headers.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace itmtl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Bad dimensions, malformed configs, invalid arguments. CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values produced by an evaluation. CLI exit code 3.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what, std::ptrdiff_t layer = -1)
        : std::runtime_error(what), layer_(layer) {}

    /// Layer at which the non-finite activation appeared, or -1.
    [[nodiscard]] std::ptrdiff_t layer() const noexcept { return layer_; }

private:
    std::ptrdiff_t layer_;
};

/// A baseline loss too close to zero to divide by. CLI exit code 3.
class DegenerateLossError : public NumericError {
public:
    DegenerateLossError(std::size_t task, double loss)
        : NumericError("degenerate baseline loss " + std::to_string(loss) + " for task " +
                       std::to_string(task)),
          task_(task) {}

    [[nodiscard]] std::size_t task() const noexcept { return task_; }

private:
    std::size_t task_;
};

/// Two grouping solvers disagreeing on the optimum. CLI exit code 4.
class SolverMismatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

}  // namespace itmtl
