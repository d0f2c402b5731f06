#pragma once
// Seeded synthetic multi-task datasets.
//
//   overlap-glyph       two seven-segment glyphs side by side with a
//                       configurable horizontal overlap; tasks are the left
//                       and right glyph classes.
//   related-regression  m linear regression tasks whose weight vectors have a
//                       prescribed pairwise cosine.
//   random-quadratic    m quadratic bowls over a shared vector; task 0 has
//                       condition number kappa.
//
// Features and real-valued labels are rounded to float32 at generation so
// that a dataset loaded from disk equals the generated one exactly.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "itmtl/core.hpp"
#include "itmtl/net_engine.hpp"

namespace itmtl {

enum class DatasetKind { OverlapGlyph, RelatedRegression, RandomQuadratic, QuadraticToy };

inline std::string_view to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::OverlapGlyph: return "overlap-glyph";
        case DatasetKind::RelatedRegression: return "related-regression";
        case DatasetKind::RandomQuadratic: return "random-quadratic";
        case DatasetKind::QuadraticToy: return "quadratic-toy";
    }
    return "?";
}

inline DatasetKind parse_dataset_kind(std::string_view s) {
    if (s == "overlap-glyph") return DatasetKind::OverlapGlyph;
    if (s == "related-regression") return DatasetKind::RelatedRegression;
    if (s == "random-quadratic") return DatasetKind::RandomQuadratic;
    if (s == "quadratic-toy") return DatasetKind::QuadraticToy;
    throw ConfigError("unknown dataset kind '" + std::string(s) + "'");
}

struct DatasetSpec {
    DatasetKind kind = DatasetKind::RelatedRegression;
    std::size_t train = 512;
    std::size_t valid = 128;
    std::size_t test = 128;
    std::uint64_t seed = 0;

    // overlap-glyph
    double overlap = 0.0;
    std::size_t glyph_size = 10;
    double pixel_noise = 0.05;

    // related-regression / random-quadratic
    std::size_t tasks = 2;
    double rho = 0.0;
    std::vector<double> correlation;  // optional m*m row-major; overrides rho
    std::size_t input_dim = 8;
    double noise_std = 0.1;

    // random-quadratic
    std::size_t dim = 2;
    double kappa = 1.0;
    double spread = 1.0;
};

struct TaskInfo {
    LossKind loss = LossKind::MeanSquaredError;
    std::size_t width = 1;  // class count or regression width
};

struct Split {
    Matrix features;
    std::vector<TaskLabels> labels;

    [[nodiscard]] std::size_t size() const { return std::size_t(features.rows()); }
};

struct Dataset {
    DatasetSpec spec;
    std::size_t input_dim = 0;
    std::vector<TaskInfo> tasks;
    Split train;
    Split valid;
    Split test;
    std::vector<QuadraticTask> quadratic;  // random-quadratic only
    std::vector<Vector> task_weights;      // related-regression ground truth

    [[nodiscard]] std::size_t task_count() const { return tasks.size(); }
};

/// Gathers rows `indices` of a split into a batch.
inline Batch make_batch(const Split& split, std::span<const std::size_t> indices, std::int64_t id) {
    Batch b;
    b.batch_id = id;
    b.inputs.resize(Eigen::Index(indices.size()), split.features.cols());
    for (std::size_t r = 0; r < indices.size(); ++r)
        b.inputs.row(Eigen::Index(r)) = split.features.row(Eigen::Index(indices[r]));
    for (const auto& lab : split.labels) {
        TaskLabels out;
        if (!lab.classes.empty()) {
            for (auto i : indices) out.classes.push_back(lab.classes[i]);
        } else {
            out.targets.resize(Eigen::Index(indices.size()), lab.targets.cols());
            for (std::size_t r = 0; r < indices.size(); ++r)
                out.targets.row(Eigen::Index(r)) = lab.targets.row(Eigen::Index(indices[r]));
        }
        b.labels.push_back(std::move(out));
    }
    return b;
}

inline Batch full_batch(const Split& split, std::int64_t id = 0) {
    std::vector<std::size_t> idx(split.size());
    std::iota(idx.begin(), idx.end(), 0);
    return make_batch(split, idx, id);
}

namespace detail {

inline double to_f32(double x) { return double(static_cast<float>(x)); }

inline std::mt19937_64 split_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream),
                      std::uint32_t(0x6d747364u)};
    return std::mt19937_64(seq);
}

// Seven-segment encoding of digits 0..9: bits a b c d e f g (a = top,
// clockwise, g = middle).
inline constexpr std::array<std::uint8_t, 10> kSegments = {
    0b1111110, 0b0110000, 0b1101101, 0b1111001, 0b0110011,
    0b1011011, 0b1011111, 0b1110000, 0b1111111, 0b1111011,
};

// Renders `glyph` into a size x size cell with integer jitter and stroke intensity.
inline Matrix render_glyph(int glyph, std::size_t size, int dx, int dy, double intensity) {
    const int n = int(size);
    Matrix cell = Matrix::Zero(n, n);
    const int left = 1 + dx, right = n - 2 + dx, top = 1 + dy, bottom = n - 2 + dy;
    const int mid = (top + bottom) / 2;
    auto put = [&](int r, int c) {
        if (r >= 0 && r < n && c >= 0 && c < n) cell(r, c) = intensity;
    };
    auto hline = [&](int r) { for (int c = left; c <= right; ++c) put(r, c); };
    auto vline = [&](int c, int r0, int r1) { for (int r = r0; r <= r1; ++r) put(r, c); };
    const auto bits = kSegments[std::size_t(glyph)];
    if (bits & 0b1000000) hline(top);
    if (bits & 0b0100000) vline(right, top, mid);
    if (bits & 0b0010000) vline(right, mid, bottom);
    if (bits & 0b0001000) hline(bottom);
    if (bits & 0b0000100) vline(left, mid, bottom);
    if (bits & 0b0000010) vline(left, top, mid);
    if (bits & 0b0000001) hline(mid);
    return cell;
}

}  // namespace detail

/// Image geometry of the overlap-glyph set: (height, width, right-glyph column).
struct GlyphGeometry {
    std::size_t height;
    std::size_t width;
    std::size_t right_offset;
};

inline GlyphGeometry glyph_geometry(const DatasetSpec& spec) {
    require(spec.overlap >= 0.0 && spec.overlap <= 0.9, "overlap-glyph: overlap must lie in [0, 0.9]");
    require(spec.glyph_size >= 5, "overlap-glyph: raster too small for a glyph (glyph_size >= 5)");
    const auto g = double(spec.glyph_size);
    const auto shift = std::size_t(std::lround(spec.overlap * g));
    if (spec.glyph_size <= shift || spec.glyph_size - shift < 1)
        throw ConfigError("overlap-glyph: raster too small for offset");
    const std::size_t offset = spec.glyph_size - shift;
    return {spec.glyph_size, spec.glyph_size + offset, offset};
}

/// Renders a single example image (flattened row-major).
inline Vector render_overlap_pair(const DatasetSpec& spec, int left, int right, std::mt19937_64& rng) {
    const auto geo = glyph_geometry(spec);
    std::uniform_int_distribution<int> jitter(-1, 1);
    std::uniform_real_distribution<double> ink(0.7, 1.0);
    std::normal_distribution<double> noise(0.0, spec.pixel_noise > 0 ? spec.pixel_noise : 1.0);
    Matrix img = Matrix::Zero(Eigen::Index(geo.height), Eigen::Index(geo.width));
    auto stamp = [&](int glyph, std::size_t col0) {
        const int dx = jitter(rng), dy = jitter(rng);
        const Matrix cell = detail::render_glyph(glyph, spec.glyph_size, dx, dy, ink(rng));
        auto block = img.block(0, Eigen::Index(col0), cell.rows(), cell.cols());
        block = block.cwiseMax(cell);
    };
    stamp(left, 0);
    stamp(right, geo.right_offset);
    Vector flat(img.size());
    for (Eigen::Index r = 0; r < img.rows(); ++r)
        for (Eigen::Index c = 0; c < img.cols(); ++c) {
            const double v = img(r, c) + (spec.pixel_noise > 0 ? noise(rng) : 0.0);
            flat[r * img.cols() + c] = detail::to_f32(std::clamp(v, 0.0, 1.0));
        }
    return flat;
}

inline Dataset gen_overlap_glyph(const DatasetSpec& spec) {
    const auto geo = glyph_geometry(spec);
    require(spec.pixel_noise >= 0.0, "overlap-glyph: pixel_noise must be >= 0");
    Dataset ds;
    ds.spec = spec;
    ds.input_dim = geo.height * geo.width;
    ds.tasks = {{LossKind::CrossEntropy, 10}, {LossKind::CrossEntropy, 10}};
    auto make = [&](std::size_t n, std::uint64_t stream) {
        auto rng = detail::split_rng(spec.seed, stream);
        std::uniform_int_distribution<int> cls(0, 9);
        Split s;
        s.features.resize(Eigen::Index(n), Eigen::Index(ds.input_dim));
        s.labels.resize(2);
        for (std::size_t e = 0; e < n; ++e) {
            const int l = cls(rng), r = cls(rng);
            s.features.row(Eigen::Index(e)) = render_overlap_pair(spec, l, r, rng).transpose();
            s.labels[0].classes.push_back(l);
            s.labels[1].classes.push_back(r);
        }
        return s;
    };
    ds.train = make(spec.train, 1);
    ds.valid = make(spec.valid, 2);
    ds.test = make(spec.test, 3);
    return ds;
}

/// Correlation matrix requested by a related-regression spec.
inline Matrix task_correlation(const DatasetSpec& spec) {
    const auto m = Eigen::Index(spec.tasks);
    require(m >= 1, "related-regression: tasks must be >= 1");
    if (!spec.correlation.empty()) {
        require(spec.correlation.size() == std::size_t(m * m),
                "related-regression: correlation must have tasks*tasks entries");
        Matrix c(m, m);
        for (Eigen::Index i = 0; i < m; ++i)
            for (Eigen::Index j = 0; j < m; ++j) c(i, j) = spec.correlation[std::size_t(i * m + j)];
        require((c - c.transpose()).cwiseAbs().maxCoeff() == 0.0, "related-regression: correlation must be symmetric");
        for (Eigen::Index i = 0; i < m; ++i)
            require(c(i, i) == 1.0, "related-regression: correlation diagonal must be 1");
        return c;
    }
    require(spec.rho >= -1.0 && spec.rho <= 1.0, "related-regression: rho must lie in [-1, 1]");
    Matrix c = Matrix::Constant(m, m, spec.rho);
    c.diagonal().setOnes();
    return c;
}

/// Symmetric square root S of the correlation matrix (S^T S = C); rejects
/// matrices with an eigenvalue below -1e-10.
inline Matrix correlation_root(const DatasetSpec& spec) {
    const Matrix c = task_correlation(spec);
    const auto m = c.rows();
    if (spec.correlation.empty()) {
        // Equicorrelation: eigenvalues 1 - rho (m-1 times) and 1 + (m-1) rho.
        const double rho = spec.rho;
        const double lo = 1.0 - rho, hi = 1.0 + double(m - 1) * rho;
        if (lo < -1e-10 || hi < -1e-10) {
            const double bound = m > 1 ? -1.0 / double(m - 1) : -1.0;
            throw ConfigError("related-regression: rho = " + std::to_string(rho) +
                              " is infeasible for " + std::to_string(m) +
                              " tasks (requires rho >= " + std::to_string(bound) + ")");
        }
        const double a = std::sqrt(std::max(lo, 0.0));
        const double b = (std::sqrt(std::max(hi, 0.0)) - a) / double(m);
        Matrix s = Matrix::Constant(m, m, b);
        s.diagonal().array() += a;
        return s;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> eig(c);
    if (eig.eigenvalues().minCoeff() < -1e-10)
        throw ConfigError("related-regression: correlation matrix is not positive semidefinite "
                          "(smallest eigenvalue " + std::to_string(eig.eigenvalues().minCoeff()) + ")");
    const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

inline Dataset gen_related_regression(const DatasetSpec& spec) {
    const Matrix s = correlation_root(spec);
    const auto m = s.rows();
    const auto d = Eigen::Index(spec.input_dim);
    require(d >= m, "related-regression: input_dim must be >= tasks");
    require(spec.noise_std >= 0.0, "related-regression: noise_std must be >= 0");

    Dataset ds;
    ds.spec = spec;
    ds.input_dim = spec.input_dim;
    ds.tasks.assign(std::size_t(m), {LossKind::MeanSquaredError, 1});

    auto rng = detail::split_rng(spec.seed, 0);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix gauss(d, m);
    for (Eigen::Index k = 0; k < gauss.size(); ++k) gauss.data()[k] = normal(rng);
    const Matrix basis = Eigen::HouseholderQR<Matrix>(gauss).householderQ() * Matrix::Identity(d, m);
    const Matrix w = basis * s;  // columns are task weight vectors
    for (Eigen::Index i = 0; i < m; ++i) ds.task_weights.push_back(w.col(i));

    auto make = [&](std::size_t n, std::uint64_t stream) {
        auto r = detail::split_rng(spec.seed, stream);
        Split sp;
        sp.features.resize(Eigen::Index(n), d);
        sp.labels.assign(std::size_t(m), TaskLabels{{}, Matrix(Eigen::Index(n), 1)});
        for (std::size_t e = 0; e < n; ++e) {
            Vector x(d);
            for (Eigen::Index k = 0; k < d; ++k) x[k] = detail::to_f32(normal(r));
            Vector z(m);
            for (Eigen::Index k = 0; k < m; ++k) z[k] = normal(r);
            const Vector noise = s.transpose() * z;  // Cov = S^T S = C
            sp.features.row(Eigen::Index(e)) = x.transpose();
            for (Eigen::Index i = 0; i < m; ++i)
                sp.labels[std::size_t(i)].targets(Eigen::Index(e), 0) =
                    detail::to_f32(w.col(i).dot(x) + spec.noise_std * noise[i]);
        }
        return sp;
    };
    ds.train = make(spec.train, 1);
    ds.valid = make(spec.valid, 2);
    ds.test = make(spec.test, 3);
    return ds;
}

/// Task 0's curvature has eigenvalues log-spaced over [1, kappa] (or {kappa}
/// in one dimension); the others draw eigenvalues from U(1, 2). Centers are
/// N(0, spread^2). Splits carry no features: quadratic losses ignore data,
/// and the split sizes only set the number of steps per epoch.
inline Dataset gen_random_quadratic(const DatasetSpec& spec) {
    require(spec.kappa >= 1.0, "random-quadratic: kappa must be >= 1");
    require(spec.dim >= 1 && spec.tasks >= 1, "random-quadratic: dim and tasks must be >= 1");
    const auto d = Eigen::Index(spec.dim);
    auto rng = detail::split_rng(spec.seed, 0);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> mild(1.0, 2.0);

    Dataset ds;
    ds.spec = spec;
    ds.input_dim = 0;
    ds.tasks.assign(spec.tasks, {LossKind::MeanSquaredError, 0});
    for (std::size_t i = 0; i < spec.tasks; ++i) {
        Matrix gauss(d, d);
        for (Eigen::Index k = 0; k < gauss.size(); ++k) gauss.data()[k] = normal(rng);
        const Matrix rot = Eigen::HouseholderQR<Matrix>(gauss).householderQ();
        Vector eig(d);
        for (Eigen::Index k = 0; k < d; ++k) {
            if (i == 0)
                eig[k] = d == 1 ? spec.kappa : std::pow(spec.kappa, double(k) / double(d - 1));
            else
                eig[k] = mild(rng);
        }
        Matrix a = rot * eig.asDiagonal() * rot.transpose();
        a = 0.5 * (a + a.transpose());
        Vector c(d);
        for (Eigen::Index k = 0; k < d; ++k) c[k] = spec.spread * normal(rng);
        ds.quadratic.push_back({a, c, 1.0});
    }
    auto make = [&](std::size_t n) {
        Split s;
        s.features = Matrix(Eigen::Index(n), 0);
        s.labels.assign(spec.tasks, TaskLabels{{}, Matrix(Eigen::Index(n), 0)});
        return s;
    };
    ds.train = make(spec.train);
    ds.valid = make(spec.valid);
    ds.test = make(spec.test);
    return ds;
}

inline std::vector<QuadraticTask> quadratic_toy_tasks() {
    return {{Matrix::Ones(1, 1), Vector::Zero(1), 1.0}, {Matrix::Ones(1, 1), Vector::Ones(1), 1.0}};
}

/// L_1 = theta^2, L_2 = (theta - 1)^2: the one-dimensional two-task problem.
inline QuadraticModel quadratic_toy() {
    return QuadraticModel(quadratic_toy_tasks());
}

/// The toy problem as a dataset (no features; the tasks live in `quadratic`).
inline Dataset gen_quadratic_toy(const DatasetSpec& spec) {
    Dataset ds;
    ds.spec = spec;
    ds.input_dim = 0;
    ds.tasks.assign(2, {LossKind::MeanSquaredError, 0});
    ds.quadratic = quadratic_toy_tasks();
    auto make = [](std::size_t n) {
        Split s;
        s.features = Matrix(Eigen::Index(n), 0);
        s.labels.assign(2, TaskLabels{{}, Matrix(Eigen::Index(n), 0)});
        return s;
    };
    ds.train = make(spec.train);
    ds.valid = make(spec.valid);
    ds.test = make(spec.test);
    return ds;
}

inline Dataset generate(const DatasetSpec& spec) {
    switch (spec.kind) {
        case DatasetKind::OverlapGlyph: return gen_overlap_glyph(spec);
        case DatasetKind::RelatedRegression: return gen_related_regression(spec);
        case DatasetKind::RandomQuadratic: return gen_random_quadratic(spec);
        case DatasetKind::QuadraticToy: return gen_quadratic_toy(spec);
    }
    throw ConfigError("unknown dataset kind");
}


}  // namespace itmtl
