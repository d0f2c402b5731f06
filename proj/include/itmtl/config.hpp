#pragma once
// Run configuration: a flat `[section]` / `key = value` text format.
//
//   [dataset]      kind, seed, train, valid, test, ... or path = file.mtds
//   [model]        trunk = 16:tanh, 16:tanh   head = 8:relu   weights = 1, 1
//                  init = 0.5  (quadratic datasets only)
//   [optimizer]    kind = sgd|momentum, learning_rate, momentum
//   [train]        mode, candidates, epochs, batch_size, seed, out
//
// Lines starting with '#' or ';' are comments. Every parse or validation
// error names the offending line.

#include <charconv>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "itmtl/core.hpp"
#include "itmtl/datasets.hpp"
#include "itmtl/io.hpp"
#include "itmtl/it_mtl.hpp"
#include "itmtl/mechanisms.hpp"
#include "itmtl/net_engine.hpp"

namespace itmtl {

struct ConfigEntry {
    std::string value;
    std::size_t line = 0;
};

/// Parsed document: section -> key -> entry.
class ConfigDocument {
public:
    static ConfigDocument parse(std::string_view text, std::string source = "config") {
        ConfigDocument doc;
        doc.source_ = std::move(source);
        std::istringstream in{std::string(text)};
        std::string raw;
        std::string section;
        std::size_t line_no = 0;
        while (std::getline(in, raw)) {
            ++line_no;
            const std::string line = trim(raw);
            if (line.empty() || line[0] == '#' || line[0] == ';') continue;
            if (line.front() == '[') {
                if (line.back() != ']' || line.size() < 3)
                    throw doc.error(line_no, "malformed section header '" + line + "'");
                section = trim(line.substr(1, line.size() - 2));
                if (doc.sections_.count(section))
                    throw doc.error(line_no, "duplicate section [" + section + "]");
                doc.sections_[section];
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw doc.error(line_no, "expected 'key = value'");
            if (section.empty()) throw doc.error(line_no, "key outside of any [section]");
            const std::string key = trim(line.substr(0, eq));
            if (key.empty()) throw doc.error(line_no, "empty key");
            auto& sec = doc.sections_[section];
            if (sec.count(key)) throw doc.error(line_no, "duplicate key '" + key + "' in [" + section + "]");
            sec[key] = {trim(line.substr(eq + 1)), line_no};
        }
        return doc;
    }

    [[nodiscard]] bool has_section(const std::string& s) const { return sections_.count(s) > 0; }

    [[nodiscard]] const ConfigEntry* find(const std::string& section, const std::string& key) const {
        auto s = sections_.find(section);
        if (s == sections_.end()) return nullptr;
        auto k = s->second.find(key);
        return k == s->second.end() ? nullptr : &k->second;
    }

    /// Rejects sections and keys outside the allowed sets.
    void restrict_to(const std::map<std::string, std::vector<std::string>>& allowed) const {
        for (const auto& [name, keys] : sections_) {
            auto a = allowed.find(name);
            if (a == allowed.end()) {
                const std::size_t line = keys.empty() ? 0 : keys.begin()->second.line;
                throw error(line, "unknown section [" + name + "]");
            }
            for (const auto& [key, entry] : keys)
                if (std::find(a->second.begin(), a->second.end(), key) == a->second.end())
                    throw error(entry.line, "unknown key '" + key + "' in [" + name + "]");
        }
    }

    [[nodiscard]] ConfigError error(std::size_t line, const std::string& msg) const {
        return ConfigError(source_ + (line ? ":" + std::to_string(line) : std::string()) + ": " + msg);
    }

    // Typed getters; missing keys leave `out` untouched.
    void get(const std::string& s, const std::string& k, std::string& out) const {
        if (auto e = find(s, k)) out = e->value;
    }
    void get(const std::string& s, const std::string& k, double& out) const {
        if (auto e = find(s, k)) out = to_double(*e, k);
    }
    void get(const std::string& s, const std::string& k, std::size_t& out) const {
        if (auto e = find(s, k)) out = std::size_t(to_uint(*e, k));
    }

    /// Runs `fn(value)` and re-throws any ConfigError with the key's line.
    template <class Fn>
    auto with_line(const std::string& s, const std::string& k, Fn&& fn) const {
        const auto* e = find(s, k);
        try {
            return fn(e ? e->value : std::string());
        } catch (const ConfigError& err) {
            throw error(e ? e->line : 0, err.what());
        }
    }

    [[nodiscard]] double to_double(const ConfigEntry& e, const std::string& key) const {
        double v = 0.0;
        const auto* b = e.value.data();
        auto [p, ec] = std::from_chars(b, b + e.value.size(), v);
        if (ec != std::errc() || p != b + e.value.size())
            throw error(e.line, "'" + key + "' expects a number, got '" + e.value + "'");
        return v;
    }

    [[nodiscard]] std::uint64_t to_uint(const ConfigEntry& e, const std::string& key) const {
        std::uint64_t v = 0;
        const auto* b = e.value.data();
        auto [p, ec] = std::from_chars(b, b + e.value.size(), v);
        if (ec != std::errc() || p != b + e.value.size())
            throw error(e.line, "'" + key + "' expects a non-negative integer, got '" + e.value + "'");
        return v;
    }

    [[nodiscard]] const std::string& source() const { return source_; }

    static std::string trim(std::string_view s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string_view::npos) return {};
        const auto e = s.find_last_not_of(" \t\r\n");
        return std::string(s.substr(b, e - b + 1));
    }

private:
    std::string source_;
    std::map<std::string, std::map<std::string, ConfigEntry>> sections_;
};

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(ConfigDocument::trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(ConfigDocument::trim(cur));
    if (out.size() == 1 && out[0].empty()) out.clear();
    return out;
}

/// "16:tanh, 8" -> layers; a bare width means identity activation.
inline std::vector<LayerSpec> parse_layers(std::string_view s) {
    std::vector<LayerSpec> out;
    for (const auto& item : split_list(s)) {
        require(!item.empty(), "empty layer in list");
        const auto colon = item.find(':');
        LayerSpec l;
        const std::string w = item.substr(0, colon);
        std::size_t width = 0;
        auto [p, ec] = std::from_chars(w.data(), w.data() + w.size(), width);
        if (ec != std::errc() || p != w.data() + w.size() || width == 0)
            throw ConfigError("bad layer width '" + w + "'");
        l.width = width;
        if (colon != std::string::npos) l.activation = parse_activation(item.substr(colon + 1));
        out.push_back(l);
    }
    return out;
}

inline std::string format_layers(const std::vector<LayerSpec>& layers) {
    std::string out;
    for (std::size_t k = 0; k < layers.size(); ++k) {
        if (k) out += ", ";
        out += std::to_string(layers[k].width) + ":" + std::string(to_string(layers[k].activation));
    }
    return out;
}

inline std::vector<double> parse_doubles(std::string_view s) {
    std::vector<double> out;
    for (const auto& item : split_list(s)) {
        double v = 0.0;
        auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc() || p != item.data() + item.size()) throw ConfigError("bad number '" + item + "'");
        out.push_back(v);
    }
    return out;
}

inline std::string format_doubles(const std::vector<double>& v) {
    std::string out;
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (k) out += ", ";
        out += format_double(v[k]);
    }
    return out;
}

/// The trainable-network part of a model; heads end in an automatically
/// appended identity layer sized to each task's output width.
struct ModelConfig {
    std::vector<LayerSpec> trunk;
    std::vector<LayerSpec> head;  // hidden head layers shared by every task
    std::vector<double> weights;  // empty: all ones
    std::vector<double> init;     // quadratic datasets: starting point (empty: seeded draw)
    bool shared_head_init = false;  // every head starts from task 0's draw

    [[nodiscard]] ModelSpec build(std::size_t input_dim, const std::vector<TaskInfo>& tasks) const {
        require(weights.empty() || weights.size() == tasks.size(),
                "model: 'weights' must list one value per task (" + std::to_string(tasks.size()) + ")");
        ModelSpec spec;
        spec.input_dim = input_dim;
        spec.trunk = trunk;
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            TaskSpec t;
            t.head = head;
            t.head.push_back({tasks[i].width, Activation::Identity, true});
            t.loss = tasks[i].loss;
            t.weight = weights.empty() ? 1.0 : weights[i];
            spec.tasks.push_back(std::move(t));
        }
        spec.validate();
        return spec;
    }
};

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Sgd;
    double learning_rate = 0.05;
    double momentum = 0.0;
};

struct RunConfig {
    std::optional<DatasetSpec> dataset;  // generate in-process
    std::string dataset_path;            // or load an .mtds file
    ModelConfig model;
    OptimizerConfig optimizer;
    SelectionMode mode = SelectionMode::Plain;
    std::vector<GradientCandidate> candidates;
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    std::string out;  // run directory; not part of the canonical text
};

inline const std::map<std::string, std::vector<std::string>>& dataset_keys() {
    static const std::map<std::string, std::vector<std::string>> keys = {
        {"dataset", {"kind", "path", "seed", "train", "valid", "test", "overlap", "glyph_size", "pixel_noise",
                     "tasks", "rho", "correlation", "input_dim", "noise_std", "dim", "kappa", "spread"}}};
    return keys;
}

inline DatasetSpec read_dataset_section(const ConfigDocument& doc) {
    DatasetSpec s;
    if (!doc.find("dataset", "kind")) throw doc.error(0, "[dataset] requires 'kind'");
    if (!doc.find("dataset", "seed")) throw doc.error(0, "[dataset] requires 'seed'");
    s.kind = doc.with_line("dataset", "kind", [](const std::string& v) { return parse_dataset_kind(v); });
    doc.get("dataset", "seed", s.seed);
    doc.get("dataset", "train", s.train);
    doc.get("dataset", "valid", s.valid);
    doc.get("dataset", "test", s.test);
    doc.get("dataset", "overlap", s.overlap);
    doc.get("dataset", "glyph_size", s.glyph_size);
    doc.get("dataset", "pixel_noise", s.pixel_noise);
    doc.get("dataset", "tasks", s.tasks);
    doc.get("dataset", "rho", s.rho);
    if (doc.find("dataset", "correlation"))
        s.correlation = doc.with_line("dataset", "correlation", [](const std::string& v) { return parse_doubles(v); });
    doc.get("dataset", "input_dim", s.input_dim);
    doc.get("dataset", "noise_std", s.noise_std);
    doc.get("dataset", "dim", s.dim);
    doc.get("dataset", "kappa", s.kappa);
    doc.get("dataset", "spread", s.spread);
    return s;
}

/// Line of the key most likely responsible for a generator error.
inline std::size_t blame_line(const ConfigDocument& doc, const std::string& message) {
    // the key named first in the message wins
    std::size_t best = std::string::npos, line = 0;
    for (const auto& key : dataset_keys().at("dataset"))
        if (auto e = doc.find("dataset", key))
            if (const auto at = message.find(key); at < best) {
                best = at;
                line = e->line;
            }
    return line;
}

/// Parses a dataset spec file and generates it, attributing generator
/// errors to the responsible line.
inline Dataset generate_from_config(std::string_view text, const std::string& source) {
    const auto doc = ConfigDocument::parse(text, source);
    doc.restrict_to(dataset_keys());
    const DatasetSpec spec = read_dataset_section(doc);
    try {
        return generate(spec);
    } catch (const ConfigError& e) {
        throw doc.error(blame_line(doc, e.what()), e.what());
    }
}

inline std::string dataset_to_config(const DatasetSpec& s) {
    std::ostringstream os;
    os << "[dataset]\n";
    os << "kind = " << to_string(s.kind) << "\n";
    os << "seed = " << s.seed << "\n";
    os << "train = " << s.train << "\nvalid = " << s.valid << "\ntest = " << s.test << "\n";
    switch (s.kind) {
        case DatasetKind::OverlapGlyph:
            os << "overlap = " << format_double(s.overlap) << "\nglyph_size = " << s.glyph_size
               << "\npixel_noise = " << format_double(s.pixel_noise) << "\n";
            break;
        case DatasetKind::RelatedRegression:
            os << "tasks = " << s.tasks << "\nrho = " << format_double(s.rho) << "\n";
            if (!s.correlation.empty()) os << "correlation = " << format_doubles(s.correlation) << "\n";
            os << "input_dim = " << s.input_dim << "\nnoise_std = " << format_double(s.noise_std) << "\n";
            break;
        case DatasetKind::RandomQuadratic:
            os << "tasks = " << s.tasks << "\ndim = " << s.dim << "\nkappa = " << format_double(s.kappa)
               << "\nspread = " << format_double(s.spread) << "\n";
            break;
        case DatasetKind::QuadraticToy:
            break;
    }
    return os.str();
}

inline std::string model_to_config(const ModelConfig& m) {
    std::ostringstream os;
    os << "[model]\n";
    os << "trunk = " << format_layers(m.trunk) << "\n";
    os << "head = " << format_layers(m.head) << "\n";
    os << "weights = " << format_doubles(m.weights) << "\n";
    if (!m.init.empty()) os << "init = " << format_doubles(m.init) << "\n";
    if (m.shared_head_init) os << "head_init = shared\n";
    return os.str();
}

inline std::string optimizer_to_config(const OptimizerConfig& o) {
    std::ostringstream os;
    os << "[optimizer]\n";
    os << "kind = " << to_string(o.kind) << "\n";
    os << "learning_rate = " << format_double(o.learning_rate) << "\n";
    os << "momentum = " << format_double(o.momentum) << "\n";
    return os.str();
}

inline ModelConfig read_model_section(const ConfigDocument& doc) {
    ModelConfig m;
    m.trunk = doc.with_line("model", "trunk", [](const std::string& v) { return parse_layers(v); });
    m.head = doc.with_line("model", "head", [](const std::string& v) { return parse_layers(v); });
    m.weights = doc.with_line("model", "weights", [](const std::string& v) { return parse_doubles(v); });
    m.init = doc.with_line("model", "init", [](const std::string& v) { return parse_doubles(v); });
    if (auto e = doc.find("model", "head_init")) {
        if (e->value != "shared" && e->value != "independent")
            throw doc.error(e->line, "head_init must be 'shared' or 'independent'");
        m.shared_head_init = e->value == "shared";
    }
    if (auto e = doc.find("model", "weights"))
        for (double w : m.weights)
            if (!(w > 0.0) || !std::isfinite(w)) throw doc.error(e->line, "task weights must be positive");
    return m;
}

inline OptimizerConfig read_optimizer_section(const ConfigDocument& doc) {
    OptimizerConfig o;
    if (doc.find("optimizer", "kind"))
        o.kind = doc.with_line("optimizer", "kind", [](const std::string& v) { return parse_optimizer(v); });
    doc.get("optimizer", "learning_rate", o.learning_rate);
    doc.get("optimizer", "momentum", o.momentum);
    if (auto e = doc.find("optimizer", "learning_rate"); e && !(o.learning_rate > 0.0 && std::isfinite(o.learning_rate)))
        throw doc.error(e->line, "learning_rate must be positive");
    if (auto e = doc.find("optimizer", "momentum"); e && !(o.momentum >= 0.0 && o.momentum < 1.0))
        throw doc.error(e->line, "momentum must be in [0, 1)");
    if (o.kind == OptimizerKind::Sgd) o.momentum = 0.0;
    return o;
}

inline RunConfig parse_run_config(std::string_view text, const std::string& source = "config") {
    const auto doc = ConfigDocument::parse(text, source);
    auto allowed = dataset_keys();
    allowed["model"] = {"trunk", "head", "weights", "init", "head_init"};
    allowed["optimizer"] = {"kind", "learning_rate", "momentum"};
    allowed["train"] = {"mode", "candidates", "epochs", "batch_size", "seed", "out"};
    doc.restrict_to(allowed);

    RunConfig cfg;
    if (auto p = doc.find("dataset", "path")) {
        cfg.dataset_path = p->value;
        for (const auto& key : dataset_keys().at("dataset"))
            if (key != "path")
                if (auto e = doc.find("dataset", key))
                    throw doc.error(e->line, "'" + key + "' cannot be combined with 'path'");
    } else if (doc.has_section("dataset")) {
        cfg.dataset = read_dataset_section(doc);
    } else {
        throw doc.error(0, "missing [dataset] section");
    }
    cfg.model = read_model_section(doc);
    cfg.optimizer = read_optimizer_section(doc);

    if (!doc.find("train", "seed")) throw doc.error(0, "[train] requires 'seed'");
    if (doc.find("train", "mode"))
        cfg.mode = doc.with_line("train", "mode", [](const std::string& v) { return parse_mode(v); });
    if (doc.find("train", "candidates"))
        cfg.candidates = doc.with_line("train", "candidates",
                                       [](const std::string& v) { return GradientCandidate::parse_list(v); });
    else
        cfg.candidates = {GradientCandidate::make_combined()};
    doc.get("train", "epochs", cfg.epochs);
    doc.get("train", "batch_size", cfg.batch_size);
    doc.get("train", "seed", cfg.seed);
    doc.get("train", "out", cfg.out);
    if (auto e = doc.find("train", "epochs"); e && cfg.epochs < 1) throw doc.error(e->line, "epochs must be >= 1");
    if (auto e = doc.find("train", "batch_size"); e && cfg.batch_size < 1)
        throw doc.error(e->line, "batch_size must be >= 1");
    if (cfg.candidates.empty()) throw doc.error(doc.find("train", "candidates")->line, "candidate list is empty");
    return cfg;
}

/// Canonical text of a run config (everything except the output directory).
/// Parsing it back yields the same run.
inline std::string run_config_to_text(const RunConfig& cfg) {
    std::ostringstream os;
    if (cfg.dataset) {
        os << dataset_to_config(*cfg.dataset);
    } else {
        os << "[dataset]\npath = " << cfg.dataset_path << "\n";
    }
    os << "\n" << model_to_config(cfg.model) << "\n" << optimizer_to_config(cfg.optimizer) << "\n";
    os << "[train]\n";
    os << "mode = " << to_string(cfg.mode) << "\n";
    os << "candidates = ";
    for (std::size_t k = 0; k < cfg.candidates.size(); ++k) os << (k ? ", " : "") << cfg.candidates[k].id();
    os << "\nepochs = " << cfg.epochs << "\nbatch_size = " << cfg.batch_size << "\nseed = " << cfg.seed << "\n";
    return os.str();
}

}  // namespace itmtl
