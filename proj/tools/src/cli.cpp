#include "infosteer_tools/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "infosteer/analysis.hpp"
#include "infosteer/checkpoint.hpp"
#include "infosteer/error.hpp"
#include "infosteer/finegrain.hpp"
#include "infosteer/harness.hpp"
#include "infosteer/log.hpp"

namespace infosteer::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Options {
    std::optional<std::uint64_t> seed;

    // train
    std::string config;
    bool overwrite = false;
    bool quiet = false;

    // shared
    std::string checkpoint;
    std::string data;
    bool steered = false;
    std::size_t max_new_tokens = kMaxGeneratedTokens;

    // eval
    std::string mode = "loss";

    // analyze if
    std::string prompt;
    std::string out;
    std::string format;
    std::string aggregate = "mean";

    // analyze shift
    std::string base;
    std::string tuned;

    // cluster fit
    std::size_t groups = 8;
    std::size_t subgroups = 2;
    std::string dev;
    std::string features = "values";

    // surrogate build
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    std::string target = "uniform";
};

std::uint64_t seed_or(const Options& o, std::uint64_t fallback) {
    return o.seed.value_or(fallback);
}

// Forward-acting specs stored in the checkpoint, with their tables loaded
// from sidecars next to it (or fitted on the model when absent).
template <typename T>
std::vector<SteeringSpec> checkpoint_steering(const fs::path& dir, const LoadedCheckpoint<T>& ckpt,
                                              std::uint64_t seed) {
    std::vector<SteeringSpec> specs;
    for (const auto& s : ckpt.state.steering) {
        if (s.acts_on_forward()) {
            specs.push_back(s);
        }
    }
    const fs::path clusters = fs::exists(dir / kClustersFile) ? dir / kClustersFile : fs::path();
    const fs::path surrogates = fs::exists(dir / kSurrogatesFile) ? dir / kSurrogatesFile : fs::path();
    attach_steering_tables(specs, ckpt.model, clusters, surrogates, ClusterFeatures::values, {}, seed);
    return specs;
}

json metrics_json(const EvalMetrics& m) {
    json j{{"mode", to_string(m.mode)}, {"examples", m.examples}, {"scored_tokens", m.scored_tokens}};
    if (m.mode == EvalMode::loss) {
        j["loss"] = m.loss;
    } else {
        j["exact_match"] = m.exact_match;
    }
    return j;
}

template <typename T>
int do_eval(const Options& o, std::ostream& out) {
    const fs::path dir(o.checkpoint);
    const LoadedCheckpoint<T> ckpt = load_checkpoint<T>(dir);
    const std::vector<ExampleRecord> data = load_dataset(o.data);
    const std::vector<SteeringSpec> steering =
        o.steered ? checkpoint_steering(dir, ckpt, seed_or(o, ckpt.state.seed)) : std::vector<SteeringSpec>{};
    const EvalMetrics m = evaluate(ckpt.model, data, parse_eval_mode(o.mode), steering, o.max_new_tokens);
    out << metrics_json(m).dump() << '\n';
    return 0;
}

ReportFormat report_format(const Options& o) {
    if (!o.format.empty()) {
        return parse_report_format(o.format);
    }
    return fs::path(o.out).extension() == ".csv" ? ReportFormat::csv : ReportFormat::html;
}

template <typename T>
int do_analyze_if(const Options& o, std::ostream& out) {
    const fs::path dir(o.checkpoint);
    const LoadedCheckpoint<T> ckpt = load_checkpoint<T>(dir);
    IfOptions opt;
    opt.max_new_tokens = o.max_new_tokens;
    opt.aggregation = parse_if_aggregation(o.aggregate);
    if (o.steered) {
        opt.steering = checkpoint_steering(dir, ckpt, seed_or(o, ckpt.state.seed));
    }
    const ReportFormat format = report_format(o);
    const TokenIFReport report = if_scores(ckpt.model, o.prompt, opt);
    write_report(report, format, o.out);
    out << json{{"report", o.out},
                {"format", to_string(format)},
                {"tokens", report.tokens.size()},
                {"mean_if", report.mean},
                {"q33", report.q33},
                {"q66", report.q66},
                {"degenerate", report.degenerate}}
               .dump()
        << '\n';
    return 0;
}

template <typename T>
std::vector<KeyTrace<T>> collect_traces(const Transformer<T>& model, const std::vector<ExampleRecord>& data,
                                        const std::vector<SteeringSpec>& steering) {
    const ByteTokenizer tokenizer(model.config().vocab_size);
    std::vector<KeyTrace<T>> traces;
    for (const auto& seq : example_sequences(data, tokenizer, model.config().max_seq_len)) {
        traces.push_back(model.forward(std::span<const int>(seq), steering).trace);
    }
    return traces;
}

template <typename T>
int do_analyze_shift(const Options& o, std::ostream& out) {
    const LoadedCheckpoint<T> base = load_checkpoint<T>(o.base);
    const LoadedCheckpoint<T> tuned = load_checkpoint<T>(o.tuned);
    if (!(base.model.config() == tuned.model.config())) {
        throw ConfigError("analyze shift: base and tuned checkpoints have different model configs");
    }
    const std::vector<ExampleRecord> data = load_dataset(o.data);
    const MagnitudeMode mode = default_magnitude_mode(base.model.config().ffn_variant);
    const std::vector<SteeringSpec> steering =
        o.steered ? checkpoint_steering(o.tuned, tuned, seed_or(o, tuned.state.seed)) : std::vector<SteeringSpec>{};
    const auto base_traces = collect_traces(base.model, data, {});
    const auto tuned_traces = collect_traces(tuned.model, data, steering);
    const RegionThresholds thresholds = default_thresholds<T>(base_traces, mode);
    KeyHistogram hb = key_histogram<T>(base_traces, thresholds, mode);
    KeyHistogram ht = key_histogram<T>(tuned_traces, thresholds, mode);
    const DistributionShift shift = distribution_shift(hb, ht);
    json regions = json::array();
    for (std::size_t r = 0; r < 3; ++r) {
        regions.push_back({{"region", to_string(static_cast<KeyRegion>(r))},
                           {"base_share", shift.base_shares[r]},
                           {"tuned_share", shift.tuned_shares[r]},
                           {"delta", shift.delta[r]},
                           {"sign", shift.sign[r]},
                           {"base_count", hb.counts[r]},
                           {"tuned_count", ht.counts[r]}});
    }
    const json result{{"thresholds", {thresholds.low_medium, thresholds.medium_high}},
                      {"magnitude_mode", to_string(mode)},
                      {"steered", o.steered},
                      {"regions", regions}};
    if (!o.out.empty()) {
        std::ofstream f(o.out, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw IoError("cannot write " + o.out);
        }
        f << result.dump(2) << '\n';
    }
    out << result.dump() << '\n';
    return 0;
}

template <typename T>
int do_cluster_fit(const Options& o, std::ostream& out) {
    const fs::path dir(o.checkpoint);
    const LoadedCheckpoint<T> ckpt = load_checkpoint<T>(dir);
    const ModelConfig& cfg = ckpt.model.config();
    const std::uint64_t seed = seed_or(o, ckpt.state.seed);
    const ClusterFeatures features = parse_cluster_features(o.features);
    std::vector<FeatureMatrix> activations;
    if (!o.dev.empty()) {
        const ByteTokenizer tokenizer(cfg.vocab_size);
        activations = activation_features(ckpt.model, example_sequences(load_dataset(o.dev), tokenizer, cfg.max_seq_len));
    }
    SurrogateTable table;
    if (features == ClusterFeatures::surrogates) {
        table = build_surrogate_table(ckpt.model, 1.0, 1.0, SurrogateTarget::uniform, uniform_target(cfg.vocab_size));
    }
    ClusterOptions options;
    options.seed = seed;
    LayerClusters clusters;
    json layers = json::array();
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const FeatureMatrix f =
            features == ClusterFeatures::values ? value_features(ckpt.model, l) : surrogate_features(table.layers[l]);
        const ClusterFit fit = semantic_clusters(f, o.groups, options);
        ClusterAssignment a = fit.assignment;
        if (!activations.empty()) {
            a = activation_subclusters(a, activations[l], o.subgroups, options);
        }
        layers.push_back({{"layer", l + 1}, {"groups", a.group_count}, {"objective", fit.objective}});
        clusters.layers.push_back(std::move(a));
    }
    const fs::path file = dir / kClustersFile;
    write_clusters(file, clusters, seed);
    out << json{{"clusters", file.string()}, {"stage", to_string(clusters.layers.front().stage)}, {"layers", layers}}
               .dump()
        << '\n';
    return 0;
}

template <typename T>
int do_surrogate_build(const Options& o, std::ostream& out) {
    const fs::path dir(o.checkpoint);
    const LoadedCheckpoint<T> ckpt = load_checkpoint<T>(dir);
    const ModelConfig& cfg = ckpt.model.config();
    const SurrogateTarget kind = parse_surrogate_target(o.target);
    std::vector<double> target;
    if (kind == SurrogateTarget::uniform) {
        target = uniform_target(cfg.vocab_size);
    } else {
        if (o.data.empty()) {
            throw ConfigError("surrogate build: --target empirical needs --data");
        }
        const ByteTokenizer tokenizer(cfg.vocab_size);
        target = empirical_target(example_sequences(load_dataset(o.data), tokenizer, cfg.max_seq_len), cfg.vocab_size);
    }
    const SurrogateTable table = build_surrogate_table(ckpt.model, o.lambda1, o.lambda2, kind, target);
    const fs::path file = dir / kSurrogatesFile;
    write_surrogates(file, table);
    json layers = json::array();
    for (std::size_t l = 0; l < table.layers.size(); ++l) {
        const auto& layer = table.layers[l];
        double spec_mean = 0.0;
        for (double s : layer.specificity) {
            spec_mean += s;
        }
        layers.push_back({{"layer", l + 1}, {"mean_specificity", spec_mean / static_cast<double>(layer.width)}});
    }
    out << json{{"surrogates", file.string()}, {"layers", layers}}.dump() << '\n';
    return 0;
}

int do_train(const Options& o, std::ostream& out) {
    TrainConfig cfg = load_train_config(o.config);
    if (o.seed) {
        cfg.seed = *o.seed;
    }
    if (o.overwrite) {
        cfg.overwrite = true;
    }
    ProgressFn progress;
    if (!o.quiet) {
        progress = [&out](const StepMetrics& m) {
            if (m.step % 50 == 0 || m.step == 1) {
                out << json{{"step", m.step},
                            {"lm_loss", m.lm_loss},
                            {"entropy_term", m.entropy_term},
                            {"mean_key_entropy", m.mean_key_entropy}}
                           .dump()
                    << '\n';
            }
        };
    }
    const TrainResult r = train(cfg, progress);
    json summary{{"checkpoint", r.checkpoint_dir.string()}, {"steps", r.steps}, {"seed", cfg.seed}};
    if (!r.metrics.empty()) {
        summary["initial_lm_loss"] = r.metrics.front().lm_loss;
        summary["final_lm_loss"] = r.metrics.back().lm_loss;
        summary["final_mean_key_entropy"] = r.metrics.back().mean_key_entropy;
    }
    out << summary.dump() << '\n';
    return 0;
}

template <template <typename> class Fn>
int by_precision(const fs::path& checkpoint, const Options& o, std::ostream& out) {
    return read_checkpoint_info(checkpoint).precision == Precision::f64 ? Fn<double>{}(o, out)
                                                                        : Fn<float>{}(o, out);
}

template <typename T>
struct EvalCmd {
    int operator()(const Options& o, std::ostream& out) const { return do_eval<T>(o, out); }
};
template <typename T>
struct IfCmd {
    int operator()(const Options& o, std::ostream& out) const { return do_analyze_if<T>(o, out); }
};
template <typename T>
struct ShiftCmd {
    int operator()(const Options& o, std::ostream& out) const { return do_analyze_shift<T>(o, out); }
};
template <typename T>
struct ClusterCmd {
    int operator()(const Options& o, std::ostream& out) const { return do_cluster_fit<T>(o, out); }
};
template <typename T>
struct SurrogateCmd {
    int operator()(const Options& o, std::ostream& out) const { return do_surrogate_build<T>(o, out); }
};

void add_seed(CLI::App* app, Options& o) {
    app->add_option("--seed", o.seed, "Seed override for seeded steps");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Information steering laboratory for small transformer language models", "infosteer"};
    app.require_subcommand(1);
    add_seed(&app, o);

    CLI::App* train_cmd = app.add_subcommand("train", "Fine-tune a model from a config file");
    train_cmd->add_option("--config", o.config, "Config file")->required();
    train_cmd->add_flag("--overwrite", o.overwrite, "Replace an existing checkpoint");
    train_cmd->add_flag("--quiet", o.quiet, "Only print the final summary");
    add_seed(train_cmd, o);

    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    eval_cmd->add_option("--data", o.data, "Dataset (JSON lines)")->required();
    eval_cmd->add_option("--mode", o.mode, "loss or exact-match")->check(CLI::IsMember({"loss", "exact-match"}));
    eval_cmd->add_option("--max-new-tokens", o.max_new_tokens, "Generation limit for exact-match");
    eval_cmd->add_flag("--steered", o.steered, "Keep the checkpoint's forward steering on");
    add_seed(eval_cmd, o);

    CLI::App* analyze = app.add_subcommand("analyze", "Post-hoc analyses");
    analyze->require_subcommand(1);
    add_seed(analyze, o);
    CLI::App* if_cmd = analyze->add_subcommand("if", "Token-level Information Flux report");
    if_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    if_cmd->add_option("--prompt", o.prompt, "Prompt text")->required();
    if_cmd->add_option("--out", o.out, "Report file")->required();
    if_cmd->add_option("--format", o.format, "csv or html (default from the file extension)")
        ->check(CLI::IsMember({"csv", "html"}));
    if_cmd->add_option("--max-new-tokens", o.max_new_tokens, "Generation limit");
    if_cmd->add_option("--aggregate", o.aggregate, "Layer aggregation: mean, max or sum")
        ->check(CLI::IsMember({"mean", "max", "sum"}));
    if_cmd->add_flag("--steered", o.steered, "Keep the checkpoint's forward steering on");
    add_seed(if_cmd, o);
    CLI::App* shift_cmd = analyze->add_subcommand("shift", "Key-coefficient distribution shift");
    shift_cmd->add_option("--base", o.base, "Base checkpoint directory")->required();
    shift_cmd->add_option("--tuned", o.tuned, "Tuned checkpoint directory")->required();
    shift_cmd->add_option("--data", o.data, "Dataset (JSON lines)")->required();
    shift_cmd->add_option("--out", o.out, "Also write the result as JSON to this file");
    shift_cmd->add_flag("--steered", o.steered, "Apply the tuned checkpoint's forward steering");
    add_seed(shift_cmd, o);

    CLI::App* cluster = app.add_subcommand("cluster", "Key-value pair clustering");
    cluster->require_subcommand(1);
    add_seed(cluster, o);
    CLI::App* fit_cmd = cluster->add_subcommand("fit", "Fit clusters and write clusters.txt");
    fit_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    fit_cmd->add_option("--groups", o.groups, "Semantic groups G")->required()->check(CLI::PositiveNumber);
    fit_cmd->add_option("--dev", o.dev, "Dev set for activation sub-clustering");
    fit_cmd->add_option("--subgroups", o.subgroups, "Activation sub-clusters G'")->check(CLI::PositiveNumber);
    fit_cmd->add_option("--features", o.features, "values or surrogates")
        ->check(CLI::IsMember({"values", "surrogates"}));
    add_seed(fit_cmd, o);

    CLI::App* surrogate = app.add_subcommand("surrogate", "Information surrogates");
    surrogate->require_subcommand(1);
    add_seed(surrogate, o);
    CLI::App* build_cmd = surrogate->add_subcommand("build", "Tabulate surrogates and write surrogates.txt");
    build_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    build_cmd->add_option("--lambda1", o.lambda1, "Entropy weight");
    build_cmd->add_option("--lambda2", o.lambda2, "KL weight");
    build_cmd->add_option("--target", o.target, "uniform or empirical")
        ->check(CLI::IsMember({"uniform", "empirical"}));
    build_cmd->add_option("--data", o.data, "Dataset for the empirical target");
    add_seed(build_cmd, o);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help("", CLI::AppFormatMode::All);
        return 2;
    }

    set_warning_handler([&err](const std::string& message) {
        err << json{{"warning", message}}.dump() << '\n';
    });
    int code = 0;
    try {
        if (train_cmd->parsed()) {
            code = do_train(o, out);
        } else if (eval_cmd->parsed()) {
            code = by_precision<EvalCmd>(o.checkpoint, o, out);
        } else if (if_cmd->parsed()) {
            code = by_precision<IfCmd>(o.checkpoint, o, out);
        } else if (shift_cmd->parsed()) {
            code = by_precision<ShiftCmd>(o.base, o, out);
        } else if (fit_cmd->parsed()) {
            code = by_precision<ClusterCmd>(o.checkpoint, o, out);
        } else if (build_cmd->parsed()) {
            code = by_precision<SurrogateCmd>(o.checkpoint, o, out);
        }
    } catch (const Error& e) {
        err << json{{"error", e.kind()}, {"message", e.what()}}.dump() << '\n';
        code = 1;
    } catch (const std::exception& e) {
        err << json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
        code = 1;
    }
    set_warning_handler({});
    return code;
}

}  // namespace infosteer::cli
