#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "infosteer/model.hpp"
#include "infosteer/steering.hpp"
#include "infosteer/tensor.hpp"

namespace infosteer {

// ---------------------------------------------------------------------------
// Clustering of key-value pairs
// ---------------------------------------------------------------------------

/// Row-major feature vectors, one row per memory index.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

/// 1 - cosine similarity. Two zero vectors are at distance 0, a zero and a
/// nonzero vector at distance 1.
double cosine_distance(std::span<const double> a, std::span<const double> b);

enum class ClusterStage { semantic, semantic_activation };
enum class ClusterFeatures { values, surrogates };

std::string to_string(ClusterStage stage);
std::string to_string(ClusterFeatures features);
ClusterStage parse_cluster_stage(const std::string& text);
ClusterFeatures parse_cluster_features(const std::string& text);

/// Group id (0-based) for every memory index of one layer.
struct ClusterAssignment {
    std::vector<std::size_t> group;
    std::size_t group_count = 0;            // ids lie in [0, group_count)
    std::optional<std::size_t> residual;    // group holding all-zero rows, if any
    ClusterStage stage = ClusterStage::semantic;

    void validate() const;
    std::vector<std::size_t> members(std::size_t g) const;
};

struct LayerClusters {
    std::vector<ClusterAssignment> layers;  // index l-1
};

struct ClusterOptions {
    std::uint64_t seed = 0;
    std::size_t max_iterations = 50;
    std::size_t restarts = 5;
};

struct ClusterFit {
    ClusterAssignment assignment;
    double objective = 0.0;
    std::vector<std::size_t> medoids;          // row index of each group's medoid
    std::vector<double> objective_history;     // best restart, one entry per iteration
};

/// Sum over groups of the smallest total cosine distance from members to one
/// member of the group. Empty groups contribute 0.
double partition_objective(const FeatureMatrix& features, std::span<const std::size_t> group,
                           std::size_t group_count);

/// Seeded k-medoids under cosine distance (alternating updates plus a swap
/// polish), best of `restarts`. Zero rows go to an extra residual group.
ClusterFit semantic_clusters(const FeatureMatrix& features, std::size_t groups, const ClusterOptions& options = {});

/// Splits every cluster with at least 2*subgroups members into `subgroups`
/// clusters of the activation features. Original ids are kept for the first
/// sub-cluster; further sub-clusters get fresh ids.
ClusterAssignment activation_subclusters(const ClusterAssignment& assignment, const FeatureMatrix& dev_activations,
                                         std::size_t subgroups, const ClusterOptions& options = {});

/// k'_i = k_i + beta[g(i)] * delta_i.
template <typename T>
std::vector<T> cluster_steer(std::span<const T> keys, const ClusterAssignment& assignment,
                             std::span<const double> betas, std::span<const T> delta);

/// Row-wise cluster steering of [n, d_m] keys on the active tape; the delta is
/// built from the keys by SteeringSpec::cluster_delta.
template <typename T>
Tensor<T> cluster_steer_rows(const Tensor<T>& keys, const ClusterAssignment& assignment,
                             std::span<const double> betas, const Tensor<T>& steered_target);

/// Rows of W_down (values) or of the surrogate matrix, as clustering features.
template <typename T>
FeatureMatrix value_features(const Transformer<T>& model, std::size_t layer);

/// Per memory index: mean key value over the positions of each dev sequence.
/// Returns one [d_m, n_sequences] matrix per layer.
template <typename T>
std::vector<FeatureMatrix> activation_features(const Transformer<T>& model,
                                               const std::vector<std::vector<int>>& sequences);

// ---------------------------------------------------------------------------
// Information surrogates
// ---------------------------------------------------------------------------

struct SurrogateLayer {
    std::size_t width = 0;  // d_m
    std::size_t vocab = 0;
    std::vector<double> phi;          // [d_m, vocab], row i = v_i W_decode
    std::vector<double> entropy;      // H(softmax(phi_i)) in nats
    std::vector<double> specificity;  // 1 - H / ln vocab
    std::vector<double> score;        // lambda1 H + lambda2 KL(softmax(phi_i) || target)

    std::span<const double> row(std::size_t i) const { return {phi.data() + i * vocab, vocab}; }
};

struct SurrogateTable {
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    SurrogateTarget target = SurrogateTarget::uniform;
    std::vector<SurrogateLayer> layers;
};

/// Frozen per-layer scores consumed by the forward pass.
struct SurrogateScores {
    std::vector<std::vector<double>> layers;  // [layer][d_m]
};

SurrogateScores scores_of(const SurrogateTable& table);

/// phi = values W_decode for values [d_m, d] and W_decode [d, vocab]. Scores
/// are left empty.
SurrogateLayer surrogate(std::span<const double> values, std::size_t d_m, std::size_t d,
                         std::span<const double> decode, std::size_t vocab);

/// Fills entropy, specificity and score for every row.
void score_surrogate(SurrogateLayer& layer, double lambda1, double lambda2, std::span<const double> target);

/// Entropy (nats) of softmax(logits).
double softmax_entropy(std::span<const double> logits);

/// KL(p || q) in nats, q floored at 1e-12; terms with p_i = 0 vanish.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// lambda1 H(softmax phi) + lambda2 KL(softmax phi || target).
double surrogate_score(std::span<const double> phi, double lambda1, double lambda2, std::span<const double> target);

/// 1 - H(softmax phi) / ln vocab, clamped to [0, 1].
double specificity(std::span<const double> phi, std::size_t vocab);

/// Uniform distribution over `vocab`.
std::vector<double> uniform_target(std::size_t vocab);

/// Next-token frequencies of the given token sequences.
std::vector<double> empirical_target(const std::vector<std::vector<int>>& sequences, std::size_t vocab);

template <typename T>
SurrogateTable build_surrogate_table(const Transformer<T>& model, double lambda1, double lambda2,
                                     SurrogateTarget target_kind, std::span<const double> target);

/// Semantic features taken from the surrogate rows instead of the values.
FeatureMatrix surrogate_features(const SurrogateLayer& layer);

/// k_i (1 + gamma S_i).
template <typename T>
std::vector<T> amplify(std::span<const T> keys, std::span<const double> scores, double gamma);

/// Row-wise amplification of [n, d_m] keys on the active tape.
template <typename T>
Tensor<T> amplify_rows(const Tensor<T>& keys, std::span<const double> scores, double gamma);

// ---------------------------------------------------------------------------
// Sidecar files
// ---------------------------------------------------------------------------

inline constexpr const char* kClustersFile = "clusters.txt";
inline constexpr const char* kSurrogatesFile = "surrogates.txt";

void write_clusters(const std::filesystem::path& path, const LayerClusters& clusters, std::uint64_t seed);
LayerClusters read_clusters(const std::filesystem::path& path);

/// Persists per-row statistics (entropy, specificity, score); phi is not stored.
void write_surrogates(const std::filesystem::path& path, const SurrogateTable& table);
SurrogateTable read_surrogates(const std::filesystem::path& path);

}  // namespace infosteer
