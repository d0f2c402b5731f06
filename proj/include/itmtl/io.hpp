#pragma once
// File formats: transference-matrix CSV, parameter checkpoints, the .mtds
// dataset container, and atomic writes.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "itmtl/core.hpp"
#include "itmtl/datasets.hpp"
#include "itmtl/net_engine.hpp"
#include "itmtl/transference.hpp"

namespace itmtl {

using json = nlohmann::json;

/// 64-bit FNV-1a; identifies config contents in artifact metadata.
inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

/// Writes to `path.tmp` then renames over `path`.
inline void write_atomic(const std::filesystem::path& path, std::string_view contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot open " + tmp.string() + " for writing");
        out.write(contents.data(), std::streamsize(contents.size()));
        if (!out) throw ConfigError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

/// %.17g: round-trips every double.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Matrix CSV

inline std::string matrix_to_csv(const Matrix& m) {
    std::string out = "source\\target";
    for (Eigen::Index j = 0; j < m.cols(); ++j) out += ",task_" + std::to_string(j);
    out += '\n';
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        out += "task_" + std::to_string(i);
        for (Eigen::Index j = 0; j < m.cols(); ++j) out += "," + format_double(m(i, j));
        out += '\n';
    }
    return out;
}

inline Matrix matrix_from_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line) || !line.starts_with("source\\target"))
        throw ConfigError("matrix csv: missing 'source\\target' header");
    const auto cols = Eigen::Index(std::count(line.begin(), line.end(), ','));
    require(cols >= 1, "matrix csv: no task columns");
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        std::getline(ls, cell, ',');  // row label
        std::vector<double> row;
        while (std::getline(ls, cell, ',')) {
            char* end = nullptr;
            const double v = std::strtod(cell.c_str(), &end);
            if (end == cell.c_str() || *end != '\0')
                throw ConfigError("matrix csv line " + std::to_string(line_no) + ": bad number '" + cell + "'");
            row.push_back(v);
        }
        if (Eigen::Index(row.size()) != cols)
            throw ConfigError("matrix csv line " + std::to_string(line_no) + ": expected " +
                              std::to_string(cols) + " values");
        rows.push_back(std::move(row));
    }
    require(Eigen::Index(rows.size()) == cols, "matrix csv: matrix must be square");
    Matrix m(cols, cols);
    for (Eigen::Index i = 0; i < cols; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rows[std::size_t(i)][std::size_t(j)];
    return m;
}

// ---------------------------------------------------------------------------
// Parameter checkpoints: flat little-endian float64 + JSON layout sidecar.

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
    auto bits = std::bit_cast<U>(value);
    for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(char((bits >> (8 * b)) & 0xff));
}

template <class T>
T get_le(std::string_view in, std::size_t& at) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
    if (at + sizeof(T) > in.size()) throw ConfigError("binary file truncated");
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) bits |= U(std::uint8_t(in[at + b])) << (8 * b);
    at += sizeof(T);
    return std::bit_cast<T>(bits);
}

}  // namespace detail

inline json layout_to_json(const ParamLayout& layout) {
    auto slots = [](const std::vector<DenseSlot>& v) {
        json arr = json::array();
        for (const auto& s : v)
            arr.push_back({{"in", s.in}, {"out", s.out}, {"weight_offset", s.weight_offset},
                           {"bias_offset", s.has_bias ? json(s.bias_offset) : json(nullptr)},
                           {"activation", std::string(to_string(s.activation))}});
        return arr;
    };
    json heads = json::array();
    for (const auto& h : layout.heads) heads.push_back(slots(h));
    return {{"shared_size", layout.shared_size}, {"task_sizes", layout.task_sizes},
            {"trunk", slots(layout.trunk)}, {"heads", heads}};
}

inline ParamLayout layout_from_json(const json& j) {
    ParamLayout layout;
    auto slots = [](const json& arr) {
        std::vector<DenseSlot> v;
        for (const auto& s : arr) {
            DenseSlot d;
            d.in = s.at("in");
            d.out = s.at("out");
            d.weight_offset = s.at("weight_offset");
            d.has_bias = !s.at("bias_offset").is_null();
            d.bias_offset = d.has_bias ? s.at("bias_offset").get<std::size_t>() : d.weight_offset + d.in * d.out;
            d.activation = parse_activation(s.at("activation").get<std::string>());
            v.push_back(d);
        }
        return v;
    };
    layout.shared_size = j.at("shared_size");
    layout.task_sizes = j.at("task_sizes").get<std::vector<std::size_t>>();
    layout.trunk = slots(j.at("trunk"));
    for (const auto& h : j.at("heads")) layout.heads.push_back(slots(h));
    layout.heads.resize(layout.task_sizes.size());
    return layout;
}

inline std::string checkpoint_bytes(const ParamSet& p) {
    const Vector flat = flatten(p);
    std::string out;
    out.reserve(std::size_t(flat.size()) * 8);
    for (Eigen::Index k = 0; k < flat.size(); ++k) detail::put_le(out, flat[k]);
    return out;
}

/// Writes `<path>` (float64 values) and `<path>.json` (layout).
inline void save_checkpoint(const std::filesystem::path& path, const ParamSet& p, const json& extra = {}) {
    json side = {{"format", "itmtl-params"}, {"dtype", "float64-le"},
                 {"count", p.layout.total_size()}, {"layout", layout_to_json(p.layout)}};
    if (!extra.is_null()) side["meta"] = extra;
    write_atomic(path, checkpoint_bytes(p));
    auto sidecar = path;
    sidecar += ".json";
    write_atomic(sidecar, side.dump(2) + "\n");
}

inline ParamSet load_checkpoint(const std::filesystem::path& path) {
    auto sidecar = path;
    sidecar += ".json";
    const json side = json::parse(read_file(sidecar));
    const ParamLayout layout = layout_from_json(side.at("layout"));
    const std::string bytes = read_file(path);
    if (bytes.size() != layout.total_size() * 8) throw ConfigError("checkpoint size does not match layout");
    Vector flat(static_cast<Eigen::Index>(layout.total_size()));
    std::size_t at = 0;
    for (Eigen::Index k = 0; k < flat.size(); ++k) flat[k] = detail::get_le<double>(bytes, at);
    return unflatten(layout, flat);
}

// ---------------------------------------------------------------------------
// .mtds dataset container
//
//   "MTDS" | u32 version (1) | u64 header length | JSON header |
//   per split (train, valid, test): features float32[n * input_dim] row-major,
//   then per task: uint16[n] class labels or float32[n * width] targets.

inline json spec_to_json(const DatasetSpec& s) {
    return {{"kind", std::string(to_string(s.kind))}, {"train", s.train}, {"valid", s.valid},
            {"test", s.test}, {"seed", s.seed}, {"overlap", s.overlap},
            {"glyph_size", s.glyph_size}, {"pixel_noise", s.pixel_noise}, {"tasks", s.tasks},
            {"rho", s.rho}, {"correlation", s.correlation}, {"input_dim", s.input_dim},
            {"noise_std", s.noise_std}, {"dim", s.dim}, {"kappa", s.kappa}, {"spread", s.spread}};
}

inline DatasetSpec spec_from_json(const json& j) {
    DatasetSpec s;
    s.kind = parse_dataset_kind(j.at("kind").get<std::string>());
    s.train = j.at("train");
    s.valid = j.at("valid");
    s.test = j.at("test");
    s.seed = j.at("seed");
    s.overlap = j.at("overlap");
    s.glyph_size = j.at("glyph_size");
    s.pixel_noise = j.at("pixel_noise");
    s.tasks = j.at("tasks");
    s.rho = j.at("rho");
    s.correlation = j.at("correlation").get<std::vector<double>>();
    s.input_dim = j.at("input_dim");
    s.noise_std = j.at("noise_std");
    s.dim = j.at("dim");
    s.kappa = j.at("kappa");
    s.spread = j.at("spread");
    return s;
}

inline std::string encode_dataset(const Dataset& ds) {
    json header = {{"format", "mtds"}, {"spec", spec_to_json(ds.spec)}, {"input_dim", ds.input_dim},
                   {"splits", {{"train", ds.train.size()}, {"valid", ds.valid.size()}, {"test", ds.test.size()}}}};
    json tasks = json::array();
    for (const auto& t : ds.tasks)
        tasks.push_back({{"label", t.loss == LossKind::CrossEntropy ? "class" : "regression"},
                         {"width", t.width}});
    header["tasks"] = tasks;
    if (!ds.quadratic.empty()) {
        json q = json::array();
        for (const auto& t : ds.quadratic) {
            std::vector<double> a(t.curvature.data(), t.curvature.data() + t.curvature.size());
            std::vector<double> c(t.center.data(), t.center.data() + t.center.size());
            q.push_back({{"curvature", a}, {"center", c}, {"weight", t.weight}});
        }
        header["quadratic"] = q;
    }
    const std::string h = header.dump();
    std::string out = "MTDS";
    detail::put_le(out, std::uint32_t(1));
    detail::put_le(out, std::uint64_t(h.size()));
    out += h;
    for (const Split* s : {&ds.train, &ds.valid, &ds.test}) {
        for (Eigen::Index r = 0; r < s->features.rows(); ++r)
            for (Eigen::Index c = 0; c < s->features.cols(); ++c)
                detail::put_le(out, float(s->features(r, c)));
        for (std::size_t t = 0; t < ds.tasks.size(); ++t) {
            const auto& lab = s->labels[t];
            if (ds.tasks[t].loss == LossKind::CrossEntropy) {
                for (int c : lab.classes) detail::put_le(out, std::uint16_t(c));
            } else {
                for (Eigen::Index r = 0; r < lab.targets.rows(); ++r)
                    for (Eigen::Index c = 0; c < lab.targets.cols(); ++c)
                        detail::put_le(out, float(lab.targets(r, c)));
            }
        }
    }
    return out;
}

inline json dataset_header(std::string_view bytes) {
    if (bytes.size() < 16 || bytes.substr(0, 4) != "MTDS") throw ConfigError("not an .mtds file");
    std::size_t at = 4;
    const auto version = detail::get_le<std::uint32_t>(bytes, at);
    if (version != 1) throw ConfigError("unsupported .mtds version " + std::to_string(version));
    const auto len = detail::get_le<std::uint64_t>(bytes, at);
    if (at + len > bytes.size()) throw ConfigError(".mtds header truncated");
    return json::parse(bytes.substr(at, len));
}

inline Dataset decode_dataset(std::string_view bytes) {
    const json header = dataset_header(bytes);
    std::size_t at = 8;
    at += detail::get_le<std::uint64_t>(bytes, at);
    Dataset ds;
    ds.spec = spec_from_json(header.at("spec"));
    ds.input_dim = header.at("input_dim");
    for (const auto& t : header.at("tasks"))
        ds.tasks.push_back({t.at("label") == "class" ? LossKind::CrossEntropy : LossKind::MeanSquaredError,
                            t.at("width").get<std::size_t>()});
    if (header.contains("quadratic")) {
        for (const auto& q : header.at("quadratic")) {
            const auto a = q.at("curvature").get<std::vector<double>>();
            const auto c = q.at("center").get<std::vector<double>>();
            const auto d = Eigen::Index(c.size());
            require(a.size() == c.size() * c.size(), ".mtds: bad quadratic block");
            ds.quadratic.push_back({Eigen::Map<const Matrix>(a.data(), d, d), Eigen::Map<const Vector>(c.data(), d),
                                    q.at("weight").get<double>()});
        }
    }
    const auto& sizes = header.at("splits");
    auto read_split = [&](std::size_t n) {
        Split s;
        s.features.resize(Eigen::Index(n), Eigen::Index(ds.input_dim));
        for (Eigen::Index r = 0; r < s.features.rows(); ++r)
            for (Eigen::Index c = 0; c < s.features.cols(); ++c) s.features(r, c) = detail::get_le<float>(bytes, at);
        for (const auto& t : ds.tasks) {
            TaskLabels lab;
            if (t.loss == LossKind::CrossEntropy) {
                for (std::size_t e = 0; e < n; ++e) lab.classes.push_back(detail::get_le<std::uint16_t>(bytes, at));
            } else {
                lab.targets.resize(Eigen::Index(n), Eigen::Index(t.width));
                for (Eigen::Index r = 0; r < lab.targets.rows(); ++r)
                    for (Eigen::Index c = 0; c < lab.targets.cols(); ++c)
                        lab.targets(r, c) = detail::get_le<float>(bytes, at);
            }
            s.labels.push_back(std::move(lab));
        }
        return s;
    };
    ds.train = read_split(sizes.at("train"));
    ds.valid = read_split(sizes.at("valid"));
    ds.test = read_split(sizes.at("test"));
    if (at != bytes.size()) throw ConfigError(".mtds: trailing bytes after payload");
    return ds;
}

}  // namespace itmtl
