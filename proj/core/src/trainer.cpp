#include <cmath>
#include <fstream>


#include "infosteer/error.hpp"
#include "infosteer/harness.hpp"
#include "infosteer/log.hpp"
#include "infosteer/rng.hpp"
#include "infosteer/text.hpp"

namespace infosteer {

template <typename T>
void attach_steering_tables(std::vector<SteeringSpec>& specs, const Transformer<T>& model,
                            const std::filesystem::path& clusters_file, const std::filesystem::path& surrogates_file,
                            ClusterFeatures features, const std::vector<std::vector<int>>& dev_sequences,
                            std::uint64_t seed) {
    const ModelConfig& cfg = model.config();
    for (auto& spec : specs) {
        const bool wants_clusters = spec.method == SteeringMethod::cluster;
        const bool wants_scores = spec.method == SteeringMethod::surrogate ||
                                  (wants_clusters && spec.cluster_delta == ClusterDeltaSource::amplify);
        std::shared_ptr<SurrogateTable> table;
        auto build_table = [&] {
            if (!table) {
                const std::vector<double> target = spec.surrogate_target == SurrogateTarget::uniform
                                                       ? uniform_target(cfg.vocab_size)
                                                       : empirical_target(dev_sequences, cfg.vocab_size);
                table = std::make_shared<SurrogateTable>(
                    build_surrogate_table(model, spec.lambda1, spec.lambda2, spec.surrogate_target, target));
            }
            return table;
        };
        if (wants_scores && !spec.scores) {
            SurrogateScores scores =
                surrogates_file.empty() ? scores_of(*build_table()) : scores_of(read_surrogates(surrogates_file));
            if (scores.layers.size() != cfg.n_layers) {
                throw ConfigError("surrogate scores cover " + std::to_string(scores.layers.size()) +
                                  " layers, model has " + std::to_string(cfg.n_layers));
            }
            for (const auto& layer : scores.layers) {
                if (layer.size() != cfg.d_m) {
                    throw ConfigError("surrogate scores have width " + std::to_string(layer.size()) +
                                      ", model d_m is " + std::to_string(cfg.d_m));
                }
            }
            spec.scores = std::make_shared<const SurrogateScores>(std::move(scores));
        }
        if (!wants_clusters) {
            continue;
        }
        if (!spec.clusters) {
            LayerClusters clusters;
            if (!clusters_file.empty()) {
                clusters = read_clusters(clusters_file);
            } else {
                std::vector<FeatureMatrix> activations;
                if (spec.subgroups > 1) {
                    if (dev_sequences.empty()) {
                        throw DataError("activation sub-clustering needs dev examples");
                    }
                    activations = activation_features(model, dev_sequences);
                }
                ClusterOptions options;
                options.seed = seed;
                for (std::size_t l = 0; l < cfg.n_layers; ++l) {
                    const FeatureMatrix f = features == ClusterFeatures::values
                                                ? value_features(model, l)
                                                : surrogate_features(build_table()->layers[l]);
                    ClusterAssignment a = semantic_clusters(f, spec.groups, options).assignment;
                    if (spec.subgroups > 1) {
                        a = activation_subclusters(a, activations[l], spec.subgroups, options);
                    }
                    clusters.layers.push_back(std::move(a));
                }
            }
            if (clusters.layers.size() != cfg.n_layers) {
                throw ConfigError("cluster assignment covers " + std::to_string(clusters.layers.size()) +
                                  " layers, model has " + std::to_string(cfg.n_layers));
            }
            for (const auto& a : clusters.layers) {
                if (a.group.size() != cfg.d_m) {
                    throw ConfigError("cluster assignment has width " + std::to_string(a.group.size()) +
                                      ", model d_m is " + std::to_string(cfg.d_m));
                }
            }
            spec.clusters = std::make_shared<const LayerClusters>(std::move(clusters));
        }
        std::size_t needed = 0;
        for (const auto& a : spec.clusters->layers) {
            needed = std::max(needed, a.group_count);
        }
        if (spec.betas.size() == 1) {
            spec.betas.assign(needed, spec.betas.front());
        }
        if (spec.betas.size() < needed) {
            throw ConfigError("steering.betas lists " + std::to_string(spec.betas.size()) +
                              " values but the cluster assignment uses " + std::to_string(needed) +
                              " groups (give one beta per group or a single shared value)");
        }
    }
}

namespace {

std::string csv_number(double v) {
    return text::format_double(v);
}

MagnitudeMode metrics_mode(const std::vector<SteeringSpec>& specs, FfnVariant variant) {
    for (const auto& s : specs) {
        if (s.method == SteeringMethod::regularization) {
            return s.mode_for(variant);
        }
    }
    return default_magnitude_mode(variant);
}

template <typename T>
TrainResult run_training(const TrainConfig& config, const ProgressFn& progress) {
    namespace fs = std::filesystem;
    const fs::path dir = config.checkpoint_dir;
    if (checkpoint_exists(dir) && !config.overwrite) {
        throw IoError("checkpoint directory " + dir.string() +
                      " already holds a checkpoint (set overwrite = true to replace it)");
    }

    std::unique_ptr<Transformer<T>> model;
    if (!config.init_checkpoint.empty()) {
        LoadedCheckpoint<T> loaded = load_checkpoint<T>(config.init_checkpoint);
        if (!(loaded.model.config() == config.model)) {
            warn("init_checkpoint model config differs from [model]; using the checkpoint's");
        }
        model = std::make_unique<Transformer<T>>(std::move(loaded.model));
    } else {
        model = std::make_unique<Transformer<T>>(config.model, config.seed);
    }
    const ModelConfig& mcfg = model->config();
    const std::size_t max_len = std::min(config.max_seq_len, mcfg.max_seq_len);

    const ByteTokenizer tokenizer(mcfg.vocab_size);
    const std::vector<ExampleRecord> records = load_dataset(config.train_data);
    std::vector<EncodedExample> examples;
    examples.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        try {
            examples.push_back(encode_example(records[i], tokenizer, max_len));
        } catch (const DataError& e) {
            throw DataError(config.train_data.string() + ": record " + std::to_string(i + 1) + ": " + e.what());
        }
    }

    std::vector<SteeringSpec> steering = config.steering;
    for (auto& spec : steering) {
        spec.validate(mcfg.n_layers);
    }
    {
        const std::vector<ExampleRecord> dev_source =
            config.eval_data.empty() ? records : load_dataset(config.eval_data);
        std::vector<std::vector<int>> dev = example_sequences(dev_source, tokenizer, max_len);
        if (dev.size() > config.dev_examples && config.dev_examples > 0) {
            dev.resize(config.dev_examples);
        }
        attach_steering_tables(steering, *model, config.clusters_file, config.surrogates_file,
                               config.cluster_features, dev, config.seed);
    }
    const MagnitudeMode mode = metrics_mode(steering, mcfg.ffn_variant);

    const std::size_t per_step = config.batch_size * config.grad_accum_steps;
    const std::size_t total_steps =
        config.steps > 0 ? config.steps : (config.epochs * examples.size() + per_step - 1) / per_step;

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    }
    std::ofstream metrics(dir / kMetricsFile, std::ios::binary | std::ios::trunc);
    std::ofstream layer_metrics(dir / kLayerEntropyFile, std::ios::binary | std::ios::trunc);
    if (!metrics || !layer_metrics) {
        throw IoError("cannot write metrics files in " + dir.string());
    }
    metrics << "step,lm_loss,entropy_term,mean_key_entropy\n";
    layer_metrics << "step";
    for (std::size_t l = 1; l <= mcfg.n_layers; ++l) {
        layer_metrics << ",layer_" << l;
    }
    layer_metrics << '\n';

    AdamWOptions opt;
    opt.beta1 = config.beta1;
    opt.beta2 = config.beta2;
    opt.eps = config.adam_eps;
    opt.weight_decay = config.weight_decay;
    AdamW<T> optimizer(model->named_parameters(), opt);

    Rng order_rng(config.seed ^ 0xD1B54A32D192ED03ULL);
    std::vector<std::size_t> order(examples.size());
    std::size_t cursor = order.size();
    auto next_example = [&]() -> const EncodedExample* {
        if (cursor == order.size()) {
            for (std::size_t i = 0; i < order.size(); ++i) {
                order[i] = i;
            }
            order_rng.shuffle(order);
            cursor = 0;
        }
        return &examples[order[cursor++]];
    };

    TrainResult result;
    result.checkpoint_dir = dir;
    for (std::size_t step = 0; step < total_steps; ++step) {
        optimizer.zero_grad();
        StepMetrics sm;
        sm.step = step + 1;
        sm.layer_entropy.assign(mcfg.n_layers, 0.0);
        for (std::size_t micro = 0; micro < config.grad_accum_steps; ++micro) {
            std::vector<const EncodedExample*> chosen;
            for (std::size_t b = 0; b < config.batch_size; ++b) {
                chosen.push_back(next_example());
            }
            const TrainingBatch tb = pack_examples(chosen);
            Tape<T> tape;
            typename Tape<T>::Scope scope(tape);
            const ForwardResult<T> out = model->forward(tb.batch, steering);
            const Tensor<T> lm = lm_loss(out.logits, tb.targets, tb.mask);
            Tensor<T> penalty;
            for (const auto& spec : steering) {
                if (spec.method == SteeringMethod::regularization) {
                    const Tensor<T> p = entropy_penalty(out.trace, spec, mcfg.ffn_variant);
                    penalty = penalty.defined() ? add(penalty, p) : p;
                }
            }
            Tensor<T> loss = penalty.defined() ? sub(lm, penalty) : lm;
            const double lm_value = static_cast<double>(lm.item());
            const double penalty_value = penalty.defined() ? static_cast<double>(penalty.item()) : 0.0;
            if (!std::isfinite(lm_value) || !std::isfinite(penalty_value)) {
                throw NumericError("training diverged at step " + std::to_string(step + 1) + ": non-finite loss");
            }
            if (config.grad_accum_steps > 1) {
                loss = scale(loss, static_cast<T>(1.0 / static_cast<double>(config.grad_accum_steps)));
            }
            tape.backward(loss);

            const EntropyStats stats = entropy_stats(out.trace, mode);
            const double share = 1.0 / static_cast<double>(config.grad_accum_steps);
            sm.lm_loss += share * lm_value;
            sm.entropy_term += share * penalty_value;
            sm.mean_key_entropy += share * stats.mean;
            for (std::size_t l = 0; l < mcfg.n_layers; ++l) {
                sm.layer_entropy[l] += share * stats.layer_mean[l];
            }
        }
        optimizer.step(learning_rate_at(config.learning_rate, config.warmup_steps, step));

        metrics << sm.step << ',' << csv_number(sm.lm_loss) << ',' << csv_number(sm.entropy_term) << ','
                << csv_number(sm.mean_key_entropy) << '\n';
        layer_metrics << sm.step;
        for (double h : sm.layer_entropy) {
            layer_metrics << ',' << csv_number(h);
        }
        layer_metrics << '\n';
        if (progress) {
            progress(sm);
        }
        result.metrics.push_back(std::move(sm));
    }
    metrics.flush();
    layer_metrics.flush();
    if (!metrics || !layer_metrics) {
        throw IoError("failed writing metrics files in " + dir.string());
    }

    CheckpointState state;
    state.step = total_steps;
    state.seed = config.seed;
    state.steering = config.steering;
    state.metadata["deterministic"] = deterministic_requested() ? "1" : "0";
    state.metadata["train_data"] = config.train_data.filename().string();
    state.metadata["examples"] = std::to_string(examples.size());
    state.metadata["learning_rate"] = text::format_double(config.learning_rate);
    state.metadata["batch_size"] = std::to_string(config.batch_size);
    save_checkpoint(dir, *model, state, optimizer.state(), true);

    for (const auto& spec : steering) {
        if (spec.clusters) {
            write_clusters(dir / kClustersFile, *spec.clusters, config.seed);
        }
    }
    result.steps = total_steps;
    return result;
}

}  // namespace

TrainResult train(const TrainConfig& config, const ProgressFn& progress) {
    config.validate();
    return config.precision == Precision::f64 ? run_training<double>(config, progress)
                                              : run_training<float>(config, progress);
}

template void attach_steering_tables<float>(std::vector<SteeringSpec>&, const Transformer<float>&,
                                            const std::filesystem::path&, const std::filesystem::path&,
                                            ClusterFeatures, const std::vector<std::vector<int>>&, std::uint64_t);
template void attach_steering_tables<double>(std::vector<SteeringSpec>&, const Transformer<double>&,
                                             const std::filesystem::path&, const std::filesystem::path&,
                                             ClusterFeatures, const std::vector<std::vector<int>>&, std::uint64_t);

}  // namespace infosteer
