#pragma once
// Shared-parameter gradient candidates: combined sum, task-subset sums, PCGrad.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "itmtl/core.hpp"

namespace itmtl {

inline Vector combined(std::span<const Vector> grads) {
    require(!grads.empty(), "combined: no gradients");
    Vector sum = grads.front();
    for (std::size_t i = 1; i < grads.size(); ++i) sum += grads[i];
    return sum;
}

inline Vector subset(std::span<const Vector> grads, std::span<const std::size_t> tasks) {
    require(!tasks.empty(), "subset: task set is empty");
    for (auto t : tasks)
        require(t < grads.size(), "subset: task index " + std::to_string(t) + " out of range");
    Vector sum = Vector::Zero(grads.front().size());
    for (auto t : tasks) sum += grads[t];
    return sum;
}

/// Projects each task gradient off the conflicting gradients of the others
/// (inner product < 0), visiting tasks and partners in rng-shuffled order,
/// then sums the projected gradients in task-index order. Zero-norm partners
/// are skipped.
inline Vector pcgrad(std::span<const Vector> grads, std::mt19937_64& rng) {
    require(!grads.empty(), "pcgrad: no gradients");
    const std::size_t m = grads.size();
    std::vector<Vector> projected(grads.begin(), grads.end());
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < m; ++j)
            if (j != i) others.push_back(j);
        std::shuffle(others.begin(), others.end(), rng);
        Vector& gi = projected[i];
        for (std::size_t j : others) {
            const Vector& gj = grads[j];
            const double norm2 = gj.squaredNorm();
            if (norm2 == 0.0) continue;
            const double d = gi.dot(gj);
            if (d < 0.0) gi -= (d / norm2) * gj;
        }
    }
    return combined(projected);
}

// ---------------------------------------------------------------------------
// Candidate descriptors

struct GradientCandidate {
    enum class Kind { Combined, Subset, PCGrad };

    Kind kind = Kind::Combined;
    std::vector<std::size_t> tasks;  // sorted, Subset only

    /// "combined", "pcgrad", or "subset:{0,2}".
    [[nodiscard]] std::string id() const {
        switch (kind) {
            case Kind::Combined: return "combined";
            case Kind::PCGrad: return "pcgrad";
            case Kind::Subset: {
                std::string s = "subset:{";
                for (std::size_t k = 0; k < tasks.size(); ++k) {
                    if (k) s += ',';
                    s += std::to_string(tasks[k]);
                }
                return s + "}";
            }
        }
        return {};
    }

    [[nodiscard]] bool is_single_task() const { return kind == Kind::Subset && tasks.size() == 1; }

    [[nodiscard]] Vector produce(std::span<const Vector> grads, std::mt19937_64& rng) const {
        switch (kind) {
            case Kind::Combined: return combined(grads);
            case Kind::PCGrad: return pcgrad(grads, rng);
            case Kind::Subset: return subset(grads, tasks);
        }
        return {};
    }

    static GradientCandidate make_combined() { return {}; }
    static GradientCandidate make_pcgrad() { return {Kind::PCGrad, {}}; }
    static GradientCandidate make_subset(std::vector<std::size_t> t) {
        std::sort(t.begin(), t.end());
        t.erase(std::unique(t.begin(), t.end()), t.end());
        return {Kind::Subset, std::move(t)};
    }
    static GradientCandidate single(std::size_t task) { return make_subset({task}); }

    /// Accepts the forms produced by id(), plus "subset:0,2" and "task:1".
    /// Task indices are checked against `task_count` when it is given.
    static GradientCandidate parse(std::string_view text,
                                   std::size_t task_count = std::numeric_limits<std::size_t>::max()) {
        auto trim = [](std::string_view s) {
            while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
            while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
            return s;
        };
        text = trim(text);
        if (text == "combined") return make_combined();
        if (text == "pcgrad") return make_pcgrad();
        std::string_view body;
        if (text.starts_with("subset:")) body = text.substr(7);
        else if (text.starts_with("task:")) body = text.substr(5);
        else throw ConfigError("unknown gradient candidate '" + std::string(text) + "'");
        body = trim(body);
        if (body.starts_with('{') && body.ends_with('}')) body = body.substr(1, body.size() - 2);
        std::vector<std::size_t> tasks;
        std::size_t start = 0;
        while (start <= body.size()) {
            auto end = body.find(',', start);
            if (end == std::string_view::npos) end = body.size();
            const auto tok = trim(body.substr(start, end - start));
            if (tok.empty()) throw ConfigError("empty task index in candidate '" + std::string(text) + "'");
            std::size_t value = 0;
            for (char ch : tok) {
                if (ch < '0' || ch > '9')
                    throw ConfigError("bad task index in candidate '" + std::string(text) + "'");
                value = value * 10 + std::size_t(ch - '0');
            }
            if (value >= task_count)
                throw ConfigError("candidate '" + std::string(text) + "' names task " +
                                  std::to_string(value) + " but the model has " +
                                  std::to_string(task_count));
            tasks.push_back(value);
            start = end + 1;
        }
        return make_subset(std::move(tasks));
    }

    /// Splits on commas outside braces: "subset:{0,1}, combined".
    static std::vector<GradientCandidate> parse_list(
        std::string_view text, std::size_t task_count = std::numeric_limits<std::size_t>::max()) {
        std::vector<GradientCandidate> out;
        int depth = 0;
        std::size_t start = 0;
        for (std::size_t k = 0; k <= text.size(); ++k) {
            const char ch = k < text.size() ? text[k] : ',';
            if (ch == '{') ++depth;
            if (ch == '}') --depth;
            if (ch == ',' && depth == 0) {
                out.push_back(parse(text.substr(start, k - start), task_count));
                start = k + 1;
            }
        }
        require(!out.empty(), "candidate list is empty");
        return out;
    }
};

/// Single-task candidates for every task followed by the combined gradient.
inline std::vector<GradientCandidate> single_task_candidates(std::size_t tasks, bool with_combined) {
    std::vector<GradientCandidate> out;
    for (std::size_t i = 0; i < tasks; ++i) out.push_back(GradientCandidate::single(i));
    if (with_combined) out.push_back(GradientCandidate::make_combined());
    return out;
}

}  // namespace itmtl
