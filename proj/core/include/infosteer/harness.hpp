#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "infosteer/checkpoint.hpp"
#include "infosteer/finegrain.hpp"
#include "infosteer/model.hpp"
#include "infosteer/steering.hpp"
#include "infosteer/tokenizer.hpp"

namespace infosteer {

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct ExampleRecord {
    std::string prompt;
    std::string response;
    std::map<std::string, std::string> metadata;
};

/// One JSON object per line with string fields "prompt" and "response";
/// other string/number fields become metadata. Blank lines are skipped.
std::vector<ExampleRecord> load_dataset(const std::filesystem::path& path);
std::vector<ExampleRecord> parse_dataset(const std::string& text, const std::string& source);

/// Next-token training pair for one example: inputs are bos, prompt, '\n',
/// response; targets are the same sequence shifted by one and ending in eos.
/// Only response and eos targets are scored.
struct EncodedExample {
    std::vector<int> inputs;
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;
};

EncodedExample encode_example(const ExampleRecord& record, const ByteTokenizer& tokenizer, std::size_t max_len);

struct TrainingBatch {
    PackedBatch batch;
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;
};

TrainingBatch pack_examples(const std::vector<const EncodedExample*>& examples);

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    ModelConfig model;
    std::vector<SteeringSpec> steering;

    std::filesystem::path train_data;
    std::filesystem::path eval_data;
    double learning_rate = 5e-5;
    std::size_t warmup_steps = 100;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t max_seq_len = 256;
    std::size_t batch_size = 16;
    std::size_t grad_accum_steps = 1;
    std::size_t epochs = 1;
    std::size_t steps = 0;  // 0: derived from epochs
    std::uint64_t seed = 0;
    Precision precision = Precision::f32;
    std::filesystem::path checkpoint_dir;
    bool overwrite = false;
    std::filesystem::path init_checkpoint;

    // Tables for cluster / surrogate steering; fitted from the initial model
    // when not given.
    std::filesystem::path clusters_file;
    std::filesystem::path surrogates_file;
    ClusterFeatures cluster_features = ClusterFeatures::values;
    std::size_t dev_examples = 16;

    void validate() const;
};

/// Parses the sectioned `key = value` format. Relative paths resolve
/// against `base_dir`.
TrainConfig parse_train_config(const std::string& text, const std::filesystem::path& base_dir,
                               const std::string& source = "<config>");
TrainConfig load_train_config(const std::filesystem::path& path);

/// True when INFOSTEER_DETERMINISTIC is set to a non-empty value other than 0.
bool deterministic_requested();

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;  // decoupled; applied to matrices only
};

template <typename T>
class AdamW {
public:
    AdamW(std::vector<NamedTensor<T>> params, AdamWOptions options);

    /// One update from the accumulated grads; grads are left untouched.
    void step(double learning_rate);
    void zero_grad();

    std::uint64_t steps_taken() const noexcept { return t_; }

    /// Moment buffers as "adam.m.<name>" / "adam.v.<name>" plus "adam.t".
    std::vector<NamedTensor<T>> state() const;
    void load_state(const std::vector<NamedTensor<T>>& state);

private:
    std::vector<NamedTensor<T>> params_;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
    AdamWOptions options_;
    std::uint64_t t_ = 0;
};

/// Linear warmup over `warmup` steps, then constant. `step` is 0-based.
double learning_rate_at(double base, std::size_t warmup, std::size_t step);

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

struct StepMetrics {
    std::size_t step = 0;
    double lm_loss = 0.0;
    double entropy_term = 0.0;
    double mean_key_entropy = 0.0;
    std::vector<double> layer_entropy;
};

struct TrainResult {
    std::filesystem::path checkpoint_dir;
    std::size_t steps = 0;
    std::vector<StepMetrics> metrics;
};

inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kLayerEntropyFile = "layer_entropy.csv";

using ProgressFn = std::function<void(const StepMetrics&)>;

/// Runs the SFT loop and writes checkpoint, metrics.csv and
/// layer_entropy.csv into config.checkpoint_dir.
TrainResult train(const TrainConfig& config, const ProgressFn& progress = {});

/// Fills cluster / surrogate tables of specs that need them, from the given
/// sidecar files or fitted on the model.
template <typename T>
void attach_steering_tables(std::vector<SteeringSpec>& specs, const Transformer<T>& model,
                            const std::filesystem::path& clusters_file, const std::filesystem::path& surrogates_file,
                            ClusterFeatures features, const std::vector<std::vector<int>>& dev_sequences,
                            std::uint64_t seed);

enum class EvalMode { loss, exact_match };

std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(const std::string& text);

struct EvalMetrics {
    EvalMode mode = EvalMode::loss;
    std::size_t examples = 0;
    std::size_t scored_tokens = 0;
    double loss = 0.0;          // token-weighted mean NLL
    double exact_match = 0.0;   // fraction of exact responses
};

inline constexpr std::size_t kMaxGeneratedTokens = 256;

template <typename T>
EvalMetrics evaluate(const Transformer<T>& model, const std::vector<ExampleRecord>& data, EvalMode mode,
                     const std::vector<SteeringSpec>& steering = {}, std::size_t max_new_tokens = kMaxGeneratedTokens);

/// Mean normalized key entropy over every layer and scored position of the
/// data, with the given steering in the forward pass.
template <typename T>
double mean_key_entropy(const Transformer<T>& model, const std::vector<ExampleRecord>& data,
                        const std::vector<SteeringSpec>& steering = {});

/// Token sequences (inputs followed by the final target) of the data.
std::vector<std::vector<int>> example_sequences(const std::vector<ExampleRecord>& data, const ByteTokenizer& tokenizer,
                                                std::size_t max_len);

}  // namespace infosteer
