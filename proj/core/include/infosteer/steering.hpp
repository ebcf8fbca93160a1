#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "infosteer/key_trace.hpp"
#include "infosteer/model_config.hpp"
#include "infosteer/tensor.hpp"

namespace infosteer {

enum class SteeringMethod { none, intervention, regularization, cluster, surrogate };

// How keys are ranked and normalized: by raw value (nonnegative keys, relu
// FFN) or by magnitude (signed keys from gelu/SwiGLU).
enum class MagnitudeMode { signed_values, absolute };

enum class ClusterDeltaSource { intervention, amplify };

enum class SurrogateTarget { uniform, empirical };

std::string to_string(SteeringMethod method);
std::string to_string(MagnitudeMode mode);
std::string to_string(ClusterDeltaSource source);
std::string to_string(SurrogateTarget target);
SteeringMethod parse_steering_method(const std::string& text);
MagnitudeMode parse_magnitude_mode(const std::string& text);
ClusterDeltaSource parse_cluster_delta(const std::string& text);
SurrogateTarget parse_surrogate_target(const std::string& text);

MagnitudeMode default_magnitude_mode(FfnVariant variant);

struct LayerClusters;
struct SurrogateScores;

/// One steering configuration. A spec carries exactly one method; combining
/// intervention with regularization takes two specs applied as a stack.
struct SteeringSpec {
    SteeringMethod method = SteeringMethod::none;
    double p_percent = 0.01;
    double alpha = 1.0;
    double lambda = 0.01;
    int layer_lo = 1;    // 1-based, inclusive
    int layer_hi = -1;   // inclusive; -1 means the last layer; hi < lo is an empty range
    std::optional<MagnitudeMode> magnitude_mode;  // unset: chosen from the FFN variant
    bool stop_gradient = false;  // detach the intervention mean from the graph

    // Cluster steering.
    std::size_t groups = 8;
    std::size_t subgroups = 2;
    std::vector<double> betas;
    ClusterDeltaSource cluster_delta = ClusterDeltaSource::intervention;

    // Surrogate-guided amplification.
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double gamma = 0.1;
    SurrogateTarget surrogate_target = SurrogateTarget::uniform;

    // Frozen per-layer tables for cluster / surrogate methods.
    std::shared_ptr<const LayerClusters> clusters;
    std::shared_ptr<const SurrogateScores> scores;

    void validate(std::size_t n_layers) const;

    /// Inclusive 1-based layer range resolved against the model depth; empty
    /// when first > second.
    std::pair<std::size_t, std::size_t> resolved_range(std::size_t n_layers) const;
    bool covers(std::size_t layer, std::size_t n_layers) const;

    MagnitudeMode mode_for(FfnVariant variant) const {
        return magnitude_mode.value_or(default_magnitude_mode(variant));
    }

    bool acts_on_forward() const {
        return method == SteeringMethod::intervention || method == SteeringMethod::cluster ||
               method == SteeringMethod::surrogate;
    }
};

/// Serialized key/value form used by the harness config file. Field order is
/// stable; unset optional fields are omitted.
std::vector<std::pair<std::string, std::string>> steering_to_fields(const SteeringSpec& spec);
SteeringSpec steering_from_fields(const std::map<std::string, std::string>& fields);

// ---------------------------------------------------------------------------
// Intervention
// ---------------------------------------------------------------------------

/// Number of keys replaced: max(1, round(p * width / 100)) for p > 0, else 0.
std::size_t intervention_count(double p_percent, std::size_t width);

/// Indices of the n smallest keys (by value or by |value|), ties broken by the
/// lowest index. Returned in ascending index order.
template <typename T>
std::vector<std::size_t> smallest_indices(std::span<const T> keys, std::size_t n, MagnitudeMode mode);

/// Mean accumulated left to right in T, the value the replacement is built from.
template <typename T>
T key_mean(std::span<const T> keys);

/// Replaces the smallest p% keys with alpha * mean(keys).
template <typename T>
std::vector<T> intervene_keys(std::span<const T> keys, double p_percent, double alpha, MagnitudeMode mode);

/// Row-wise intervention on [n, d_m] keys, recorded on the active tape.
/// Gradient flows through the mean unless `stop_gradient` is set.
template <typename T>
Tensor<T> intervene_rows(const Tensor<T>& keys, double p_percent, double alpha, MagnitudeMode mode,
                         bool stop_gradient = false);

// ---------------------------------------------------------------------------
// Entropy
// ---------------------------------------------------------------------------

inline constexpr double kEntropyFloor = 1e-12;

struct EntropyValue {
    double nats = 0.0;
    bool degenerate = false;  // all keys zero
};

/// Shannon entropy (nats) of k / sum(k), or |k| / sum|k| in absolute mode.
/// Signed mode rejects negative entries with a DomainError.
template <typename T>
EntropyValue normalized_entropy(std::span<const T> keys, MagnitudeMode mode);

/// Differentiable per-row normalized entropy of [n, d_m] keys; returns [n].
template <typename T>
Tensor<T> row_entropy(const Tensor<T>& keys, MagnitudeMode mode);

/// lambda * mean over rows of sum over in-range layers of H(k_hat). The total
/// training loss is lm_loss - penalty.
template <typename T>
Tensor<T> entropy_penalty(const KeyTrace<T>& trace, const SteeringSpec& spec, FfnVariant variant);

struct EntropyStats {
    std::vector<std::vector<double>> per_token;  // [layer][row]
    std::vector<double> layer_mean;
    std::vector<double> layer_std;
    double mean = 0.0;
    double std = 0.0;
};

template <typename T>
EntropyStats entropy_stats(const KeyTrace<T>& trace, MagnitudeMode mode);

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Applies one spec to the keys of 1-based `layer`. Identity (the same tensor
/// handle) outside the layer range or for none/regularization.
template <typename T>
Tensor<T> apply_steering(std::size_t layer, const Tensor<T>& keys, const SteeringSpec& spec, std::size_t n_layers,
                         FfnVariant variant);

}  // namespace infosteer
