#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "infosteer/error.hpp"
#include "infosteer/harness.hpp"
#include "infosteer/text.hpp"

namespace infosteer {

void TrainConfig::validate() const {
    model.validate();
    auto require = [](bool ok, const std::string& what) {
        if (!ok) {
            throw ConfigError(what);
        }
    };
    require(std::isfinite(learning_rate) && learning_rate > 0.0, "train.learning_rate must be positive");
    require(std::isfinite(weight_decay) && weight_decay >= 0.0, "train.weight_decay must be nonnegative");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "train.beta1/beta2 must lie in [0, 1)");
    require(adam_eps > 0.0, "train.adam_eps must be positive");
    require(max_seq_len > 0, "train.max_seq_len must be positive");
    require(batch_size > 0, "train.batch_size must be positive");
    require(grad_accum_steps > 0, "train.grad_accum_steps must be positive");
    require(epochs > 0 || steps > 0, "train.epochs or train.steps must be positive");
    require(!train_data.empty(), "train.train_data is required");
    require(!checkpoint_dir.empty(), "train.checkpoint_dir is required");
    for (const auto& spec : steering) {
        spec.validate(model.n_layers);
    }
}

bool deterministic_requested() {
    const char* v = std::getenv("INFOSTEER_DETERMINISTIC");
    return v != nullptr && *v != '\0' && std::string(v) != "0";
}

namespace {

struct Section {
    std::string name;
    std::map<std::string, std::string> fields;
    std::map<std::string, std::size_t> lines;
};

std::vector<Section> parse_sections(const std::string& content, const std::string& source) {
    std::vector<Section> sections;
    std::istringstream in(content);
    std::string raw;
    std::size_t number = 0;
    std::set<std::string> seen;
    while (std::getline(in, raw)) {
        ++number;
        const std::string line(text::trim(raw));
        if (line.empty() || line.front() == '#' || line.front() == ';') {
            continue;
        }
        const std::string where = source + ":" + std::to_string(number);
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw ConfigError(where + ": malformed section header");
            }
            const std::string name(text::trim(std::string_view(line).substr(1, line.size() - 2)));
            if (!seen.insert(name).second) {
                throw ConfigError(where + ": duplicate section [" + name + "]");
            }
            sections.push_back({name, {}, {}});
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(where + ": expected 'key = value'");
        }
        if (sections.empty()) {
            throw ConfigError(where + ": key outside of a section");
        }
        const std::string key(text::trim(std::string_view(line).substr(0, eq)));
        const std::string value(text::trim(std::string_view(line).substr(eq + 1)));
        if (key.empty()) {
            throw ConfigError(where + ": empty key");
        }
        if (!sections.back().fields.emplace(key, value).second) {
            throw ConfigError(where + ": duplicate key '" + key + "'");
        }
        sections.back().lines[key] = number;
    }
    return sections;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
    if (value.empty()) {
        return {};
    }
    const std::filesystem::path p(value);
    return p.is_absolute() ? p : base / p;
}

}  // namespace

TrainConfig parse_train_config(const std::string& content, const std::filesystem::path& base_dir,
                               const std::string& source) {
    TrainConfig cfg;
    std::map<int, SteeringSpec> specs;
    for (const Section& sec : parse_sections(content, source)) {
        auto fail = [&](const std::string& key, const std::string& what) {
            throw ConfigError(source + ":" + std::to_string(sec.lines.at(key)) + ": " + what);
        };
        auto wrap = [&](const std::string& key, const auto& fn) {
            try {
                fn();
            } catch (const ConfigError& e) {
                fail(key, e.what());
            }
        };
        if (sec.name == "model") {
            ModelConfig& m = cfg.model;
            for (const auto& [key, value] : sec.fields) {
                const std::string what = "model." + key;
                wrap(key, [&] {
                    if (key == "vocab_size") {
                        m.vocab_size = text::parse_size(value, what);
                    } else if (key == "d") {
                        m.d = text::parse_size(value, what);
                    } else if (key == "d_m") {
                        m.d_m = text::parse_size(value, what);
                    } else if (key == "n_layers") {
                        m.n_layers = text::parse_size(value, what);
                    } else if (key == "n_heads") {
                        m.n_heads = text::parse_size(value, what);
                    } else if (key == "max_seq_len") {
                        m.max_seq_len = text::parse_size(value, what);
                    } else if (key == "ffn_variant") {
                        m.ffn_variant = parse_ffn_variant(value);
                    } else if (key == "tie_decoder") {
                        m.tie_decoder = text::parse_bool(value, what);
                    } else {
                        throw ConfigError("unknown key '" + key + "' in [model]");
                    }
                });
            }
        } else if (sec.name == "steering" || sec.name.rfind("steering.", 0) == 0) {
            int index = 1;
            if (sec.name != "steering") {
                try {
                    index = static_cast<int>(text::parse_int(sec.name.substr(9), "section"));
                } catch (const ConfigError&) {
                    throw ConfigError(source + ": malformed section name [" + sec.name + "]");
                }
            }
            if (specs.count(index)) {
                throw ConfigError(source + ": steering section " + std::to_string(index) + " defined twice");
            }
            try {
                specs[index] = steering_from_fields(sec.fields);
            } catch (const ConfigError& e) {
                throw ConfigError(source + ": [" + sec.name + "] " + e.what());
            }
        } else if (sec.name == "train") {
            for (const auto& [key, value] : sec.fields) {
                const std::string what = "train." + key;
                wrap(key, [&] {
                    if (key == "train_data") {
                        cfg.train_data = resolve(base_dir, value);
                    } else if (key == "eval_data") {
                        cfg.eval_data = resolve(base_dir, value);
                    } else if (key == "learning_rate") {
                        cfg.learning_rate = text::parse_double(value, what);
                    } else if (key == "warmup_steps") {
                        cfg.warmup_steps = text::parse_size(value, what);
                    } else if (key == "weight_decay") {
                        cfg.weight_decay = text::parse_double(value, what);
                    } else if (key == "beta1") {
                        cfg.beta1 = text::parse_double(value, what);
                    } else if (key == "beta2") {
                        cfg.beta2 = text::parse_double(value, what);
                    } else if (key == "adam_eps") {
                        cfg.adam_eps = text::parse_double(value, what);
                    } else if (key == "max_seq_len") {
                        cfg.max_seq_len = text::parse_size(value, what);
                    } else if (key == "batch_size") {
                        cfg.batch_size = text::parse_size(value, what);
                    } else if (key == "grad_accum_steps") {
                        cfg.grad_accum_steps = text::parse_size(value, what);
                    } else if (key == "epochs") {
                        cfg.epochs = text::parse_size(value, what);
                    } else if (key == "steps") {
                        cfg.steps = text::parse_size(value, what);
                    } else if (key == "seed") {
                        cfg.seed = static_cast<std::uint64_t>(text::parse_size(value, what));
                    } else if (key == "precision") {
                        cfg.precision = parse_precision(value);
                    } else if (key == "checkpoint_dir") {
                        cfg.checkpoint_dir = resolve(base_dir, value);
                    } else if (key == "overwrite") {
                        cfg.overwrite = text::parse_bool(value, what);
                    } else if (key == "init_checkpoint") {
                        cfg.init_checkpoint = resolve(base_dir, value);
                    } else if (key == "clusters_file") {
                        cfg.clusters_file = resolve(base_dir, value);
                    } else if (key == "surrogates_file") {
                        cfg.surrogates_file = resolve(base_dir, value);
                    } else if (key == "cluster_features") {
                        cfg.cluster_features = parse_cluster_features(value);
                    } else if (key == "dev_examples") {
                        cfg.dev_examples = text::parse_size(value, what);
                    } else {
                        throw ConfigError("unknown key '" + key + "' in [train]");
                    }
                });
            }
        } else {
            throw ConfigError(source + ": unknown section [" + sec.name + "]");
        }
    }
    for (auto& [index, spec] : specs) {
        cfg.steering.push_back(std::move(spec));
    }
    cfg.validate();
    return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open config file " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str(), path.parent_path(), path.string());
}

}  // namespace infosteer
