#pragma once

// Run configuration: a flat "key = value" text file. '#' starts a comment;
// unknown or repeated keys are errors. to_text() writes every key, so the
// snapshot of a resolved configuration reproduces the run when read back.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lseg/dataset.hpp"
#include "lseg/model.hpp"
#include "lseg/train.hpp"

namespace lseg {

struct RunConfig {
    Variant variant = Variant::proposed;
    std::size_t base_depth = 64;
    std::size_t kernel = 3;
    std::size_t num_classes = 2;

    std::size_t iterations = 100000;
    std::size_t batch_size = 16;
    double lr = 0.001;
    double dropout = 0.05;
    std::size_t eval_every = 500;
    bool augment = true;
    double clip_norm = 5.0;

    double window_low = -100.0;
    double window_high = 200.0;
    std::size_t resize = 256;
    std::size_t lesion_label = 1;
    SliceFilter slice_filter = SliceFilter::all;
    std::size_t neighbors = 2;

    std::uint64_t seed = 0;
    std::size_t folds = 4;
    std::size_t fold_index = 0;

    ModelSpec model_spec() const {
        ModelSpec s = ModelSpec::of(variant, base_depth);
        s.kernel = kernel;
        s.num_classes = num_classes;
        s.dropout = dropout;
        return s;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.iterations = iterations;
        t.batch_size = batch_size;
        t.lr = lr;
        t.dropout = dropout;
        t.folds = folds;
        t.fold_index = fold_index;
        t.seed = seed;
        t.eval_every = eval_every;
        t.augment = augment;
        t.clip_norm = clip_norm;
        return t;
    }

    DatasetOptions dataset_options() const {
        DatasetOptions d;
        d.window = {window_low, window_high};
        d.resize = resize;
        d.filter = slice_filter;
        d.neighbors = neighbors;
        d.lesion_label = lesion_label;
        d.num_classes = num_classes;
        return d;
    }

    void validate() const {
        if (base_depth == 0) throw ConfigError("model.base-depth must be positive");
        if (kernel == 0 || kernel % 2 == 0) throw ConfigError("model.kernel must be odd");
        if (num_classes < 2 || num_classes > 255) throw ConfigError("model.num-classes must be in [2, 255]");
        if (!(window_low < window_high)) throw ConfigError("data.window-low must be below data.window-high");
        if (resize == 0 || resize % 16 != 0) throw ConfigError("data.resize must be a positive multiple of 16");
        if (lesion_label == 0) throw ConfigError("data.lesion-label must be at least 1");
        try {
            model_spec().validate();
        } catch (const ShapeError& e) {
            throw ConfigError(e.what());
        }
        train_config().validate();
    }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
    N out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size()) {
        throw ConfigError("invalid value '" + v + "' for key '" + key + "'");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("invalid value '" + v + "' for key '" + key + "' (expected true or false)");
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace config_detail

inline void set_config_key(RunConfig& c, const std::string& key, const std::string& value) {
    using namespace config_detail;
    auto size = [&] { return parse_number<std::size_t>(key, value); };
    auto real = [&] { return parse_number<double>(key, value); };
    if (key == "model.variant") {
        try {
            c.variant = parse_variant(value);
        } catch (const Error&) {
            throw ConfigError("invalid value '" + value + "' for key 'model.variant' (expected proposed or baseline-unet)");
        }
    } else if (key == "model.base-depth") {
        c.base_depth = size();
    } else if (key == "model.kernel") {
        c.kernel = size();
    } else if (key == "model.num-classes") {
        c.num_classes = size();
    } else if (key == "train.iterations") {
        c.iterations = size();
    } else if (key == "train.batch-size") {
        c.batch_size = size();
    } else if (key == "train.lr") {
        c.lr = real();
    } else if (key == "train.dropout") {
        c.dropout = real();
    } else if (key == "train.eval-every") {
        c.eval_every = size();
    } else if (key == "train.augment") {
        c.augment = parse_bool(key, value);
    } else if (key == "train.clip-norm") {
        c.clip_norm = real();
    } else if (key == "data.window-low") {
        c.window_low = real();
    } else if (key == "data.window-high") {
        c.window_high = real();
    } else if (key == "data.resize") {
        c.resize = size();
    } else if (key == "data.lesion-label") {
        c.lesion_label = size();
    } else if (key == "data.slice-filter") {
        if (value == "all") {
            c.slice_filter = SliceFilter::all;
        } else if (value == "lesion-neighbors") {
            c.slice_filter = SliceFilter::lesion_neighbors;
        } else {
            throw ConfigError("invalid value '" + value + "' for key 'data.slice-filter' (expected all or lesion-neighbors)");
        }
    } else if (key == "data.neighbors") {
        c.neighbors = size();
    } else if (key == "seed") {
        c.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "folds") {
        c.folds = size();
    } else if (key == "fold-index") {
        c.fold_index = size();
    } else {
        throw ConfigError("unknown key '" + key + "'");
    }
}

inline RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>") {
    RunConfig c;
    std::map<std::string, std::size_t> seen;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = source + ":" + std::to_string(lineno) + ": ";
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key = config_detail::trim(line.substr(0, eq));
        const std::string value = config_detail::trim(line.substr(eq + 1));
        if (auto [it, fresh] = seen.emplace(key, lineno); !fresh) {
            throw ConfigError(where + "key '" + key + "' already set on line " + std::to_string(it->second));
        }
        try {
            set_config_key(c, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
    std::ostringstream text;
    text << in.rdbuf();
    return parse_run_config(text.str(), path.string());
}

// Every key, in a fixed order.
inline std::string to_text(const RunConfig& c) {
    using config_detail::format_double;
    std::ostringstream os;
    os << "model.variant = " << to_string(c.variant) << '\n'
       << "model.base-depth = " << c.base_depth << '\n'
       << "model.kernel = " << c.kernel << '\n'
       << "model.num-classes = " << c.num_classes << '\n'
       << "train.iterations = " << c.iterations << '\n'
       << "train.batch-size = " << c.batch_size << '\n'
       << "train.lr = " << format_double(c.lr) << '\n'
       << "train.dropout = " << format_double(c.dropout) << '\n'
       << "train.eval-every = " << c.eval_every << '\n'
       << "train.augment = " << (c.augment ? "true" : "false") << '\n'
       << "train.clip-norm = " << format_double(c.clip_norm) << '\n'
       << "data.window-low = " << format_double(c.window_low) << '\n'
       << "data.window-high = " << format_double(c.window_high) << '\n'
       << "data.resize = " << c.resize << '\n'
       << "data.lesion-label = " << c.lesion_label << '\n'
       << "data.slice-filter = " << (c.slice_filter == SliceFilter::all ? "all" : "lesion-neighbors") << '\n'
       << "data.neighbors = " << c.neighbors << '\n'
       << "seed = " << c.seed << '\n'
       << "folds = " << c.folds << '\n'
       << "fold-index = " << c.fold_index << '\n';
    return os.str();
}

}  // namespace lseg
