#pragma once
// Budgeted task grouping from a normalized transference matrix.
//
// A plan is a collection of at most `budget` task groups (one shared
// encoder each). Every task is served from exactly one group that contains
// it, and may additionally be a member of other groups. The cost of serving
// task a from group G is the mean of t_hat(b, a) over the other members b of
// G (0 for a singleton); the objective is the sum of served costs, minimized.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "itmtl/core.hpp"
#include "itmtl/transference.hpp"

namespace itmtl {

using TaskMask = std::uint32_t;

struct SolverStats {
    std::uint64_t nodes = 0;
    std::uint64_t prunes = 0;
    bool shortcut = false;
};

struct GroupingPlan {
    std::vector<std::vector<std::size_t>> groups;
    std::vector<std::size_t> serving;  // task -> index into groups
    double objective = 0.0;
    std::size_t budget = 0;
    SolverStats stats;
};

inline std::vector<std::size_t> mask_members(TaskMask mask) {
    std::vector<std::size_t> out;
    for (std::size_t a = 0; mask; ++a, mask >>= 1)
        if (mask & 1u) out.push_back(a);
    return out;
}

inline TaskMask members_mask(const std::vector<std::size_t>& members) {
    TaskMask m = 0;
    for (auto a : members) m |= TaskMask(1) << a;
    return m;
}

inline void require_valid_columns(const NormalizedMatrix& nm, TaskMask group) {
    for (auto a : mask_members(group))
        if (a >= nm.valid_columns.size() || !nm.valid_columns[a])
            throw ConfigError("grouping: task " + std::to_string(a) +
                              " has non-positive self-transference and cannot be scored");
}

/// Served cost of each member of `group`.
inline std::map<std::size_t, double> group_cost(const std::vector<std::size_t>& group,
                                                const NormalizedMatrix& nm) {
    require(!group.empty(), "group_cost: group is empty");
    for (auto a : group) require(a < nm.size(), "group_cost: task index out of range");
    require_valid_columns(nm, members_mask(group));
    std::vector<std::size_t> sorted = group;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::map<std::size_t, double> out;
    for (auto a : sorted) {
        double sum = 0.0;
        for (auto b : sorted)
            if (b != a) sum += nm.values(Eigen::Index(b), Eigen::Index(a));
        out[a] = sorted.size() > 1 ? sum / double(sorted.size() - 1) : 0.0;
    }
    return out;
}

namespace detail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// All nonempty groups in canonical order (size, then lexicographic members),
// with per-task served costs (infinity for non-members).
struct GroupTable {
    std::size_t tasks = 0;
    std::vector<TaskMask> masks;
    std::vector<std::vector<double>> cost;

    explicit GroupTable(const NormalizedMatrix& nm) : tasks(nm.size()) {
        require(tasks >= 1, "grouping: empty matrix");
        require(tasks <= 20, "grouping: at most 20 tasks are supported");
        const TaskMask full = TaskMask((std::uint64_t(1) << tasks) - 1);
        require_valid_columns(nm, full);
        for (TaskMask g = 1; g <= full && g != 0; ++g) {
            masks.push_back(g);
            if (g == full) break;
        }
        std::sort(masks.begin(), masks.end(), [](TaskMask x, TaskMask y) {
            const int px = std::popcount(x), py = std::popcount(y);
            if (px != py) return px < py;
            return mask_members(x) < mask_members(y);
        });
        cost.reserve(masks.size());
        for (auto g : masks) {
            std::vector<double> row(tasks, kInf);
            for (const auto& [a, c] : group_cost(mask_members(g), nm)) row[a] = c;
            cost.push_back(std::move(row));
        }
    }

    [[nodiscard]] TaskMask full() const { return TaskMask((std::uint64_t(1) << tasks) - 1); }
};

// Serving assignment and canonical objective for a chosen set of group
// indices (into the table). Groups that serve nobody are dropped.
inline GroupingPlan finalize(const GroupTable& table, std::vector<std::size_t> chosen, std::size_t budget) {
    std::sort(chosen.begin(), chosen.end());
    std::vector<std::size_t> serve_from(table.tasks, std::size_t(-1));
    for (std::size_t a = 0; a < table.tasks; ++a) {
        double best = kInf;
        for (auto g : chosen)
            if (table.cost[g][a] < best) {
                best = table.cost[g][a];
                serve_from[a] = g;
            }
        require(serve_from[a] != std::size_t(-1), "grouping: collection does not cover every task");
    }
    GroupingPlan plan;
    plan.budget = budget;
    std::map<std::size_t, std::size_t> index;
    for (auto g : chosen)
        if (std::find(serve_from.begin(), serve_from.end(), g) != serve_from.end()) {
            index[g] = plan.groups.size();
            plan.groups.push_back(mask_members(table.masks[g]));
        }
    plan.objective = 0.0;
    for (std::size_t a = 0; a < table.tasks; ++a) {
        plan.serving.push_back(index.at(serve_from[a]));
        plan.objective += table.cost[serve_from[a]][a];
    }
    return plan;
}

inline double collection_objective(const GroupTable& table, const std::vector<std::size_t>& chosen) {
    double total = 0.0;
    for (std::size_t a = 0; a < table.tasks; ++a) {
        double best = kInf;
        for (auto g : chosen) best = std::min(best, table.cost[g][a]);
        total += best;
    }
    return total;
}

}  // namespace detail

/// Enumerates every collection of at most `budget` groups.
inline GroupingPlan solve_exhaustive(const NormalizedMatrix& nm, std::size_t budget) {
    if (budget < 1) throw ConfigError("grouping: budget must be >= 1");
    require(nm.size() <= 12, "grouping: exhaustive search supports at most 12 tasks");
    const detail::GroupTable table(nm);
    const std::size_t n = table.masks.size();
    const std::size_t k_max = std::min(budget, n);

    SolverStats stats;
    double best = detail::kInf;
    std::vector<std::size_t> best_set;
    std::vector<std::size_t> idx;
    for (std::size_t k = 1; k <= k_max; ++k) {
        idx.resize(k);
        for (std::size_t i = 0; i < k; ++i) idx[i] = i;
        while (true) {
            ++stats.nodes;
            TaskMask cover = 0;
            for (auto g : idx) cover |= table.masks[g];
            if (cover == table.full()) {
                const double obj = detail::collection_objective(table, idx);
                if (obj < best) {
                    best = obj;
                    best_set = idx;
                }
            }
            // next combination
            std::size_t i = k;
            while (i > 0 && idx[i - 1] == n - k + i - 1) --i;
            if (i == 0) break;
            ++idx[i - 1];
            for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
        }
    }
    GroupingPlan plan = detail::finalize(table, best_set, budget);
    plan.stats = stats;
    return plan;
}

/// Depth-first include/exclude search over groups in canonical order. A node
/// is pruned when the sum over tasks of the best cost still reachable (from
/// committed groups or any remaining group) is no better than the incumbent.
inline GroupingPlan solve_branch_and_bound(const NormalizedMatrix& nm, std::size_t budget) {
    if (budget < 1) throw ConfigError("grouping: budget must be >= 1");
    const detail::GroupTable table(nm);
    const std::size_t m = table.tasks;
    const std::size_t n = table.masks.size();

    bool nonnegative = true;
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < m; ++b)
            if (a != b && nm.values(Eigen::Index(b), Eigen::Index(a)) < 0.0) nonnegative = false;
    if (budget >= m && nonnegative) {
        // Singletons cost 0, a lower bound on every plan.
        std::vector<std::size_t> singles;
        for (std::size_t g = 0; g < n && singles.size() < m; ++g)
            if (std::popcount(table.masks[g]) == 1) singles.push_back(g);
        GroupingPlan plan = detail::finalize(table, singles, budget);
        plan.stats.shortcut = true;
        return plan;
    }

    // rest[p][a]: cheapest cost for a among groups p..n-1.
    std::vector<std::vector<double>> rest(n + 1, std::vector<double>(m, detail::kInf));
    for (std::size_t p = n; p-- > 0;)
        for (std::size_t a = 0; a < m; ++a) rest[p][a] = std::min(rest[p + 1][a], table.cost[p][a]);

    SolverStats stats;
    double incumbent = detail::kInf;
    std::vector<std::size_t> best_set, current;

    auto search = [&](auto&& self, std::size_t p, const std::vector<double>& best) -> void {
        ++stats.nodes;
        double bound = 0.0;
        bool covered = true;
        double value = 0.0;
        for (std::size_t a = 0; a < m; ++a) {
            bound += std::min(best[a], rest[p][a]);
            if (best[a] == detail::kInf) covered = false;
            else value += best[a];
        }
        if (bound == detail::kInf) return;  // some task can no longer be covered
        if (bound >= incumbent) {
            ++stats.prunes;
            return;
        }
        if (covered && value < incumbent) {
            incumbent = value;
            best_set = current;
        }
        if (p == n || current.size() == budget) return;
        std::vector<double> with(best);
        for (std::size_t a = 0; a < m; ++a) with[a] = std::min(with[a], table.cost[p][a]);
        current.push_back(p);
        self(self, p + 1, with);
        current.pop_back();
        self(self, p + 1, best);
    };
    search(search, 0, std::vector<double>(m, detail::kInf));

    GroupingPlan plan = detail::finalize(table, best_set, budget);
    plan.stats = stats;
    return plan;
}

/// Human-readable layout: one row per group, one column per task; "S" marks
/// the serving group, "x" a training-only membership.
inline std::string render_plan(const GroupingPlan& plan, std::size_t tasks) {
    std::ostringstream os;
    os << "group";
    for (std::size_t a = 0; a < tasks; ++a) os << "  task_" << a;
    os << '\n';
    for (std::size_t g = 0; g < plan.groups.size(); ++g) {
        os << "G" << g;
        for (std::size_t s = std::to_string(g).size() + 1; s < 5; ++s) os << ' ';
        for (std::size_t a = 0; a < tasks; ++a) {
            const bool member = std::find(plan.groups[g].begin(), plan.groups[g].end(), a) != plan.groups[g].end();
            const char mark = plan.serving[a] == g ? 'S' : (member ? 'x' : '.');
            const auto width = 7 + std::to_string(a).size() - 1;
            os << std::string(width, ' ') << mark;
        }
        os << '\n';
    }
    os << "objective " << plan.objective << "  budget " << plan.budget << '\n';
    return os.str();
}

}  // namespace itmtl
