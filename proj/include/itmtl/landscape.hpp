#pragma once
// Loss-landscape probes around the current shared parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "itmtl/core.hpp"
#include "itmtl/net_engine.hpp"

namespace itmtl {

struct LandscapeGrid {
    /// 1 for interpolation probes, 2 for random-direction grids.
    int dims = 1;
    std::vector<Vector> directions;
    std::vector<double> coords;  // sample coordinates along each axis
    /// One row per sample; 1-D: coordinate alpha, 2-D: (u, v) row-major over coords x coords.
    std::vector<std::vector<double>> points;
    std::vector<Vector> task_losses;  // per sample
    std::vector<double> combined;     // per sample: sum (1-D) or mean (2-D) of task losses

    // 1-D: index of alpha = 1 (the actual update).
    std::size_t update_index = 0;
    // 2-D: argmin sample index per task and for the combined surface.
    std::vector<std::size_t> task_argmin;
    std::size_t combined_argmin = 0;

    double learning_rate = 0.0;
    std::uint64_t seed = 0;
    std::string provenance;
};

/// Losses at the linear interpolation theta_s + alpha (theta_s' - theta_s),
/// theta_s' = simulate_update(opt, theta_s, g), for `samples` uniform alphas
/// over [0, extent]; alpha = 1 is added if the grid misses it. Endpoints use
/// std::lerp so alpha = 0 and alpha = 1 reproduce theta_s and theta_s' exactly.
template <MultiTaskModel M>
LandscapeGrid probe_1d(const M& model, const ParamSet& params, const Batch& batch, const OptimizerState& opt,
                       const Vector& candidate, std::size_t samples, double extent = 3.0) {
    require(samples >= 2, "probe_1d: at least 2 samples are required");
    require(extent > 0.0 && std::isfinite(extent), "probe_1d: extent must be positive");
    const Vector target = simulate_update(opt, params.shared, candidate);

    LandscapeGrid grid;
    grid.dims = 1;
    grid.directions.push_back(target - params.shared);
    grid.learning_rate = opt.learning_rate;
    for (std::size_t k = 0; k < samples; ++k)
        grid.coords.push_back(k + 1 == samples ? extent : extent * double(k) / double(samples - 1));
    if (std::find(grid.coords.begin(), grid.coords.end(), 1.0) == grid.coords.end()) {
        grid.coords.push_back(1.0);
        std::sort(grid.coords.begin(), grid.coords.end());
    }
    ParamSet probe = params;
    for (std::size_t k = 0; k < grid.coords.size(); ++k) {
        const double alpha = grid.coords[k];
        if (alpha == 1.0) grid.update_index = k;
        for (Eigen::Index e = 0; e < probe.shared.size(); ++e)
            probe.shared[e] = std::lerp(params.shared[e], target[e], alpha);
        Vector losses = model.forward_losses(probe, batch);
        grid.points.push_back({alpha});
        grid.combined.push_back(losses.sum());
        grid.task_losses.push_back(std::move(losses));
    }
    return grid;
}

/// Two seeded Gaussian directions rescaled to |theta_s|; losses on an n x n
/// grid over [-range, range]^2 in units of |theta_s|. The combined surface is
/// the mean of the task losses.
template <MultiTaskModel M>
LandscapeGrid probe_2d(const M& model, const ParamSet& params, const Batch& batch, std::uint64_t seed,
                       std::size_t n, double range = 0.1) {
    require(n >= 3, "probe_2d: grid size must be >= 3");
    require(range > 0.0 && std::isfinite(range), "probe_2d: range must be positive");
    const double norm = params.shared.norm();
    if (norm == 0.0) throw NumericError("probe_2d: shared parameters have zero norm");

    LandscapeGrid grid;
    grid.dims = 2;
    grid.seed = seed;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int d = 0; d < 2; ++d) {
        Vector dir(params.shared.size());
        for (Eigen::Index e = 0; e < dir.size(); ++e) dir[e] = normal(rng);
        grid.directions.push_back(dir * (norm / dir.norm()));
    }
    const double span = double(n - 1);
    for (std::size_t k = 0; k < n; ++k) grid.coords.push_back(range * (2.0 * double(k) - span) / span);

    const auto m = model.task_count();
    grid.task_argmin.assign(m, 0);
    ParamSet probe = params;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
            const double u = grid.coords[r], v = grid.coords[c];
            probe.shared = params.shared + u * grid.directions[0] + v * grid.directions[1];
            Vector losses = model.forward_losses(probe, batch);
            const std::size_t idx = grid.points.size();
            grid.points.push_back({u, v});
            grid.combined.push_back(losses.mean());
            grid.task_losses.push_back(std::move(losses));
            for (std::size_t j = 0; j < m; ++j)
                if (grid.task_losses[idx][Eigen::Index(j)] < grid.task_losses[grid.task_argmin[j]][Eigen::Index(j)])
                    grid.task_argmin[j] = idx;
            if (grid.combined[idx] < grid.combined[grid.combined_argmin]) grid.combined_argmin = idx;
        }
    return grid;
}

}  // namespace itmtl
