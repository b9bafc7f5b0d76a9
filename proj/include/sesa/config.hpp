#ifndef SESA_CONFIG_HPP
#define SESA_CONFIG_HPP

// Flat key=value run configuration with dotted section names. Unknown keys
// are rejected; '#' starts a comment; values are scalars or comma lists.

#include "sesa/common.hpp"
#include "sesa/pipeline.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace sesa {

struct RunConfig {
    DenoiserConfig model;

    int64_t schedule_steps = 50;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    FusionConfig fusion;
    double enhance_alpha = 2.0;
    IndexRule index_rule = IndexRule::Union;
    bool control_enabled = true;

    int64_t epochs = 30;
    int64_t batch = 2;
    double lr = 1e-5;
    double weight_decay = 0.0;
    uint64_t seed = 0;

    int64_t sample_steps = 50;
    int64_t semantics_parallelism = 1;

    std::string data_dir;
    std::string out_dir = ".";

    void validate() const {
        model.validate();
        if (schedule_steps < 1) throw InvalidRange("schedule.steps must be >= 1");
        if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start)
            throw InvalidRange("schedule betas must satisfy 0 < start <= end < 1");
        if (epochs < 0) throw InvalidRange("train.epochs must be >= 0");
        if (batch < 1) throw InvalidRange("train.batch must be >= 1");
        if (!(lr > 0.0)) throw InvalidRange("train.lr must be > 0");
        if (sample_steps < 1 || sample_steps > schedule_steps)
            throw InvalidRange("sample.steps must be in [1, schedule.steps]");
        if (semantics_parallelism < 1) throw InvalidRange("semantics.parallelism must be >= 1");
        if (enhance_alpha < 0.0) throw InvalidRange("enhance.alpha must be >= 0");
    }

    PipelineOptions pipeline_options() const {
        PipelineOptions o;
        o.fusion = fusion;
        o.hand_bias_alpha = enhance_alpha;
        o.index_rule = index_rule;
        o.control_enabled = control_enabled;
        return o;
    }
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigMismatch("key '" + key + "': expected a boolean, got '" + v + "'");
}

inline int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigMismatch("key '" + key + "': expected an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigMismatch("key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline std::vector<int64_t> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int64_t> out;
    std::istringstream is(v);
    std::string item;
    while (std::getline(is, item, ',')) out.push_back(parse_int(key, item));
    if (out.empty()) throw ConfigMismatch("key '" + key + "': empty list");
    return out;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return (a == std::string::npos) ? "" : s.substr(a, b - a + 1);
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    using namespace detail;
    if (key == "model.image_extent") cfg.model.image_extent = parse_int(key, value);
    else if (key == "model.latent_extent") cfg.model.latent_extent = parse_int(key, value);
    else if (key == "model.latent_channels") cfg.model.latent_channels = parse_int(key, value);
    else if (key == "model.condition_channels") cfg.model.condition_channels = parse_int(key, value);
    else if (key == "model.channels") cfg.model.channels = parse_int_list(key, value);
    else if (key == "model.attn_resolutions") cfg.model.attn_resolutions = parse_int_list(key, value);
    else if (key == "model.heads") cfg.model.heads = parse_int(key, value);
    else if (key == "model.d_text") cfg.model.d_text = parse_int(key, value);
    else if (key == "model.d_time") cfg.model.d_time = parse_int(key, value);
    else if (key == "model.max_tokens") cfg.model.max_tokens = parse_int(key, value);
    else if (key == "schedule.steps") cfg.schedule_steps = parse_int(key, value);
    else if (key == "schedule.beta_start") cfg.beta_start = parse_double(key, value);
    else if (key == "schedule.beta_end") cfg.beta_end = parse_double(key, value);
    else if (key == "fusion.enabled") cfg.fusion.enabled = parse_bool(key, value);
    else if (key == "fusion.normalize") cfg.fusion.normalize = parse_bool(key, value);
    else if (key == "fusion.per_level") cfg.fusion.per_level = parse_bool(key, value);
    else if (key == "fusion.transposed") cfg.fusion.transposed = parse_bool(key, value);
    else if (key == "enhance.alpha") cfg.enhance_alpha = parse_double(key, value);
    else if (key == "enhance.index_rule") {
        if (value == "union") cfg.index_rule = IndexRule::Union;
        else if (value == "intersection") cfg.index_rule = IndexRule::Intersection;
        else throw ConfigMismatch("key 'enhance.index_rule': expected union|intersection, got '" +
                                  value + "'");
    } else if (key == "control.enabled") cfg.control_enabled = parse_bool(key, value);
    else if (key == "train.epochs") cfg.epochs = parse_int(key, value);
    else if (key == "train.batch") cfg.batch = parse_int(key, value);
    else if (key == "train.lr") cfg.lr = parse_double(key, value);
    else if (key == "train.weight_decay") cfg.weight_decay = parse_double(key, value);
    else if (key == "train.seed") cfg.seed = static_cast<uint64_t>(parse_int(key, value));
    else if (key == "sample.steps") cfg.sample_steps = parse_int(key, value);
    else if (key == "semantics.parallelism") cfg.semantics_parallelism = parse_int(key, value);
    else if (key == "paths.data_dir") cfg.data_dir = value;
    else if (key == "paths.out_dir") cfg.out_dir = value;
    else throw ConfigMismatch("unknown config key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        lineno++;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigMismatch("line " + std::to_string(lineno) + ": expected key=value, got '" +
                                 line + "'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigMismatch("line " + std::to_string(lineno) + ": empty key");
        apply_config_entry(base, key, value);
    }
    base.validate();
    return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config_text(text, base);
}

inline std::string dump_config(const RunConfig& c) {
    std::ostringstream os;
    os.precision(17);
    auto list = [](const std::vector<int64_t>& v) {
        std::string s;
        for (size_t i = 0; i < v.size(); i++) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    os << "model.image_extent = " << c.model.image_extent << "\n";
    os << "model.latent_extent = " << c.model.latent_extent << "\n";
    os << "model.latent_channels = " << c.model.latent_channels << "\n";
    os << "model.condition_channels = " << c.model.condition_channels << "\n";
    os << "model.channels = " << list(c.model.channels) << "\n";
    os << "model.attn_resolutions = " << list(c.model.attn_resolutions) << "\n";
    os << "model.heads = " << c.model.heads << "\n";
    os << "model.d_text = " << c.model.d_text << "\n";
    os << "model.d_time = " << c.model.d_time << "\n";
    os << "model.max_tokens = " << c.model.max_tokens << "\n";
    os << "schedule.steps = " << c.schedule_steps << "\n";
    os << "schedule.beta_start = " << c.beta_start << "\n";
    os << "schedule.beta_end = " << c.beta_end << "\n";
    os << "fusion.enabled = " << (c.fusion.enabled ? "true" : "false") << "\n";
    os << "fusion.normalize = " << (c.fusion.normalize ? "true" : "false") << "\n";
    os << "fusion.per_level = " << (c.fusion.per_level ? "true" : "false") << "\n";
    os << "fusion.transposed = " << (c.fusion.transposed ? "true" : "false") << "\n";
    os << "enhance.alpha = " << c.enhance_alpha << "\n";
    os << "enhance.index_rule = " << (c.index_rule == IndexRule::Union ? "union" : "intersection")
       << "\n";
    os << "control.enabled = " << (c.control_enabled ? "true" : "false") << "\n";
    os << "train.epochs = " << c.epochs << "\n";
    os << "train.batch = " << c.batch << "\n";
    os << "train.lr = " << c.lr << "\n";
    os << "train.weight_decay = " << c.weight_decay << "\n";
    os << "train.seed = " << c.seed << "\n";
    os << "sample.steps = " << c.sample_steps << "\n";
    os << "semantics.parallelism = " << c.semantics_parallelism << "\n";
    if (!c.data_dir.empty()) os << "paths.data_dir = " << c.data_dir << "\n";
    os << "paths.out_dir = " << c.out_dir << "\n";
    return os.str();
}

}  // namespace sesa

#endif  // SESA_CONFIG_HPP
