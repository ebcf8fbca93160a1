#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "infosteer/error.hpp"
#include "infosteer/finegrain.hpp"
#include "infosteer/rng.hpp"

namespace infosteer {

double cosine_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("cosine_distance: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 && nb == 0.0) {
        return 0.0;
    }
    if (na == 0.0 || nb == 0.0) {
        return 1.0;
    }
    const double cos = std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
    return std::max(0.0, 1.0 - cos);
}

std::string to_string(ClusterStage stage) {
    return stage == ClusterStage::semantic ? "semantic" : "semantic+activation";
}

std::string to_string(ClusterFeatures features) {
    return features == ClusterFeatures::values ? "values" : "surrogates";
}

ClusterStage parse_cluster_stage(const std::string& text) {
    if (text == "semantic") {
        return ClusterStage::semantic;
    }
    if (text == "semantic+activation") {
        return ClusterStage::semantic_activation;
    }
    throw DataError("unknown cluster stage '" + text + "'");
}

ClusterFeatures parse_cluster_features(const std::string& text) {
    if (text == "values") {
        return ClusterFeatures::values;
    }
    if (text == "surrogates") {
        return ClusterFeatures::surrogates;
    }
    throw ConfigError("unknown cluster features '" + text + "' (expected values or surrogates)");
}

void ClusterAssignment::validate() const {
    if (group_count == 0) {
        throw DataError("cluster assignment has no groups");
    }
    for (std::size_t i = 0; i < group.size(); ++i) {
        if (group[i] >= group_count) {
            throw DataError("cluster assignment: index " + std::to_string(i) + " has group " +
                            std::to_string(group[i]) + " outside [0, " + std::to_string(group_count) + ")");
        }
    }
    if (residual && *residual >= group_count) {
        throw DataError("cluster assignment: residual group out of range");
    }
}

std::vector<std::size_t> ClusterAssignment::members(std::size_t g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < group.size(); ++i) {
        if (group[i] == g) {
            out.push_back(i);
        }
    }
    return out;
}

double partition_objective(const FeatureMatrix& features, std::span<const std::size_t> group,
                           std::size_t group_count) {
    if (group.size() != features.rows) {
        throw ShapeError("partition_objective: " + std::to_string(group.size()) + " labels for " +
                         std::to_string(features.rows) + " rows");
    }
    std::vector<std::vector<std::size_t>> members(group_count);
    for (std::size_t i = 0; i < group.size(); ++i) {
        if (group[i] >= group_count) {
            throw DataError("partition_objective: label out of range");
        }
        members[group[i]].push_back(i);
    }
    double total = 0.0;
    for (const auto& m : members) {
        double best = m.empty() ? 0.0 : std::numeric_limits<double>::infinity();
        for (std::size_t c : m) {
            double cost = 0.0;
            for (std::size_t i : m) {
                cost += cosine_distance(features.row(i), features.row(c));
            }
            best = std::min(best, cost);
        }
        total += best;
    }
    return total;
}

namespace {

// k-medoids over a precomputed distance matrix of m points.
class Medoids {
public:
    Medoids(std::vector<double> dist, std::size_t m) : dist_(std::move(dist)), m_(m) {}

    double d(std::size_t a, std::size_t b) const { return dist_[a * m_ + b]; }

    // Nearest medoid slot per point (ties to the lowest slot) and the total cost.
    double assign(const std::vector<std::size_t>& medoids, std::vector<std::size_t>& label) const {
        label.assign(m_, 0);
        double total = 0.0;
        for (std::size_t i = 0; i < m_; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t s = 0; s < medoids.size(); ++s) {
                const double v = d(i, medoids[s]);
                if (v < best) {
                    best = v;
                    label[i] = s;
                }
            }
            total += best;
        }
        return total;
    }

    std::vector<std::size_t> init(Rng& rng, std::size_t k) const {
        std::vector<std::size_t> medoids{static_cast<std::size_t>(rng.below(m_))};
        std::vector<double> nearest(m_);
        while (medoids.size() < k) {
            double total = 0.0;
            for (std::size_t i = 0; i < m_; ++i) {
                nearest[i] = std::numeric_limits<double>::infinity();
                for (std::size_t c : medoids) {
                    nearest[i] = std::min(nearest[i], d(i, c));
                }
                if (std::find(medoids.begin(), medoids.end(), i) != medoids.end()) {
                    nearest[i] = 0.0;
                }
                total += nearest[i];
            }
            std::size_t pick = m_;
            if (total > 0.0) {
                double u = rng.uniform() * total;
                for (std::size_t i = 0; i < m_; ++i) {
                    if (nearest[i] <= 0.0) {
                        continue;
                    }
                    pick = i;
                    u -= nearest[i];
                    if (u < 0.0) {
                        break;
                    }
                }
            }
            if (pick == m_) {
                // Every remaining point duplicates a medoid: draw uniformly.
                std::vector<std::size_t> rest;
                for (std::size_t i = 0; i < m_; ++i) {
                    if (std::find(medoids.begin(), medoids.end(), i) == medoids.end()) {
                        rest.push_back(i);
                    }
                }
                pick = rest[rng.below(rest.size())];
            }
            medoids.push_back(pick);
        }
        return medoids;
    }

    // Alternating assignment / medoid update. Returns true if anything moved.
    bool alternate(std::vector<std::size_t>& medoids, std::size_t max_iter, std::vector<double>& history) const {
        std::vector<std::size_t> label;
        bool moved_any = false;
        for (std::size_t iter = 0; iter < max_iter; ++iter) {
            history.push_back(assign(medoids, label));
            bool moved = false;
            for (std::size_t s = 0; s < medoids.size(); ++s) {
                std::size_t best = medoids[s];
                double best_cost = cost_of(label, s, best);
                for (std::size_t c = 0; c < m_; ++c) {
                    if (label[c] != s || c == medoids[s]) {
                        continue;
                    }
                    const double cost = cost_of(label, s, c);
                    if (cost < best_cost) {
                        best_cost = cost;
                        best = c;
                    }
                }
                if (best != medoids[s]) {
                    medoids[s] = best;
                    moved = true;
                }
            }
            if (!moved) {
                break;
            }
            moved_any = true;
        }
        return moved_any;
    }

    // Best single medoid/non-medoid swap. Returns true if it improved the cost.
    bool swap_once(std::vector<std::size_t>& medoids, std::vector<double>& history) const {
        std::vector<std::size_t> label;
        double current = assign(medoids, label);
        double best_cost = current;
        std::size_t best_slot = 0;
        std::size_t best_point = m_;
        std::vector<std::size_t> trial = medoids;
        for (std::size_t s = 0; s < medoids.size(); ++s) {
            for (std::size_t o = 0; o < m_; ++o) {
                if (std::find(medoids.begin(), medoids.end(), o) != medoids.end()) {
                    continue;
                }
                trial[s] = o;
                std::vector<std::size_t> tmp;
                const double cost = assign(trial, tmp);
                if (cost < best_cost - 1e-12) {
                    best_cost = cost;
                    best_slot = s;
                    best_point = o;
                }
            }
            trial[s] = medoids[s];
        }
        if (best_point == m_) {
            return false;
        }
        medoids[best_slot] = best_point;
        history.push_back(best_cost);
        return true;
    }

private:
    double cost_of(const std::vector<std::size_t>& label, std::size_t slot, std::size_t center) const {
        double cost = 0.0;
        for (std::size_t i = 0; i < m_; ++i) {
            if (label[i] == slot) {
                cost += d(i, center);
            }
        }
        return cost;
    }

    std::vector<double> dist_;
    std::size_t m_;
};

bool is_zero_row(std::span<const double> row) {
    return std::all_of(row.begin(), row.end(), [](double v) { return v == 0.0; });
}

}  // namespace

ClusterFit semantic_clusters(const FeatureMatrix& features, std::size_t groups, const ClusterOptions& options) {
    if (features.data.size() != features.rows * features.cols) {
        throw ShapeError("semantic_clusters: feature buffer does not match " + std::to_string(features.rows) + "x" +
                         std::to_string(features.cols));
    }
    if (groups == 0) {
        throw ConfigError("semantic_clusters: G must be positive");
    }
    if (groups > features.rows) {
        throw ConfigError("semantic_clusters: G = " + std::to_string(groups) + " exceeds d_m = " +
                          std::to_string(features.rows));
    }
    std::vector<std::size_t> active;
    std::vector<std::size_t> zero_rows;
    for (std::size_t i = 0; i < features.rows; ++i) {
        (is_zero_row(features.row(i)) ? zero_rows : active).push_back(i);
    }

    ClusterFit fit;
    fit.assignment.group.assign(features.rows, 0);
    fit.assignment.group_count = groups;
    if (!zero_rows.empty()) {
        fit.assignment.residual = groups;
        fit.assignment.group_count = groups + 1;
        for (std::size_t i : zero_rows) {
            fit.assignment.group[i] = groups;
        }
    }
    const std::size_t m = active.size();
    if (m == 0) {
        return fit;
    }
    const std::size_t k = std::min(groups, m);
    std::vector<double> dist(m * m);
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = a; b < m; ++b) {
            const double v = a == b ? 0.0 : cosine_distance(features.row(active[a]), features.row(active[b]));
            dist[a * m + b] = v;
            dist[b * m + a] = v;
        }
    }
    const Medoids solver(std::move(dist), m);

    double best_cost = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> best_medoids;
    std::vector<double> best_history;
    const std::size_t restarts = std::max<std::size_t>(options.restarts, 1);
    for (std::size_t r = 0; r < restarts; ++r) {
        Rng rng(options.seed * 0x9E3779B97F4A7C15ULL + r + 1);
        std::vector<std::size_t> medoids = solver.init(rng, k);
        std::vector<double> history;
        solver.alternate(medoids, options.max_iterations, history);
        for (std::size_t pass = 0; pass < options.max_iterations && solver.swap_once(medoids, history); ++pass) {
            solver.alternate(medoids, options.max_iterations, history);
        }
        std::vector<std::size_t> label;
        const double cost = solver.assign(medoids, label);
        if (cost < best_cost) {
            best_cost = cost;
            best_medoids = medoids;
            best_history = std::move(history);
        }
    }

    std::vector<std::size_t> label;
    solver.assign(best_medoids, label);
    // Canonical ids: groups numbered by their smallest member.
    std::vector<std::size_t> remap(k, k);
    std::size_t next = 0;
    for (std::size_t a = 0; a < m; ++a) {
        if (remap[label[a]] == k) {
            remap[label[a]] = next++;
        }
    }
    for (std::size_t s = 0; s < k; ++s) {
        if (remap[s] == k) {
            remap[s] = next++;
        }
    }
    fit.medoids.assign(k, 0);
    for (std::size_t s = 0; s < k; ++s) {
        fit.medoids[remap[s]] = active[best_medoids[s]];
    }
    for (std::size_t a = 0; a < m; ++a) {
        fit.assignment.group[active[a]] = remap[label[a]];
    }
    fit.objective = partition_objective(features, fit.assignment.group, fit.assignment.group_count);
    fit.objective_history = std::move(best_history);
    return fit;
}

ClusterAssignment activation_subclusters(const ClusterAssignment& assignment, const FeatureMatrix& dev_activations,
                                         std::size_t subgroups, const ClusterOptions& options) {
    assignment.validate();
    if (subgroups == 0) {
        throw ConfigError("activation_subclusters: G' must be positive");
    }
    if (dev_activations.cols == 0 || dev_activations.rows == 0) {
        throw DataError("activation_subclusters: missing dev activations");
    }
    if (dev_activations.rows != assignment.group.size()) {
        throw ShapeError("activation_subclusters: " + std::to_string(dev_activations.rows) +
                         " activation rows for " + std::to_string(assignment.group.size()) + " memory indices");
    }
    ClusterAssignment out = assignment;
    out.stage = ClusterStage::semantic_activation;
    if (subgroups == 1) {
        return out;
    }
    for (std::size_t g = 0; g < assignment.group_count; ++g) {
        if (assignment.residual && *assignment.residual == g) {
            continue;
        }
        const std::vector<std::size_t> members = assignment.members(g);
        if (members.size() < 2 * subgroups) {
            continue;
        }
        FeatureMatrix sub;
        sub.rows = members.size();
        sub.cols = dev_activations.cols;
        for (std::size_t i : members) {
            const auto row = dev_activations.row(i);
            sub.data.insert(sub.data.end(), row.begin(), row.end());
        }
        ClusterOptions sub_options = options;
        sub_options.seed = options.seed + 7919 * (g + 1);
        const ClusterFit fit = semantic_clusters(sub, subgroups, sub_options);
        std::vector<std::size_t> ids(fit.assignment.group_count, SIZE_MAX);
        for (std::size_t j = 0; j < members.size(); ++j) {
            std::size_t& id = ids[fit.assignment.group[j]];
            if (id == SIZE_MAX) {
                id = fit.assignment.group[j] == fit.assignment.group[0] ? g : out.group_count++;
            }
            out.group[members[j]] = id;
        }
    }
    return out;
}

template <typename T>
std::vector<T> cluster_steer(std::span<const T> keys, const ClusterAssignment& assignment,
                             std::span<const double> betas, std::span<const T> delta) {
    if (keys.size() != delta.size() || keys.size() != assignment.group.size()) {
        throw ShapeError("cluster_steer: keys (" + std::to_string(keys.size()) + "), delta (" +
                         std::to_string(delta.size()) + ") and assignment (" +
                         std::to_string(assignment.group.size()) + ") lengths differ");
    }
    std::vector<T> out(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
        const std::size_t g = assignment.group[i];
        if (g >= betas.size()) {
            throw ConfigError("cluster_steer: no beta for group " + std::to_string(g) + " (index " +
                              std::to_string(i) + ")");
        }
        out[i] = keys[i] + static_cast<T>(betas[g]) * delta[i];
    }
    return out;
}

template <typename T>
Tensor<T> cluster_steer_rows(const Tensor<T>& keys, const ClusterAssignment& assignment,
                             std::span<const double> betas, const Tensor<T>& steered_target) {
    if (keys.rank() != 2 || keys.shape() != steered_target.shape() || keys.dim(1) != assignment.group.size()) {
        throw ShapeError("cluster_steer_rows: keys " + shape_to_string(keys.shape()) + ", target " +
                         shape_to_string(steered_target.shape()) + ", assignment width " +
                         std::to_string(assignment.group.size()));
    }
    std::vector<T> beta_row(assignment.group.size());
    for (std::size_t i = 0; i < beta_row.size(); ++i) {
        const std::size_t g = assignment.group[i];
        if (g >= betas.size()) {
            throw ConfigError("cluster_steer: no beta for group " + std::to_string(g) + " (index " +
                              std::to_string(i) + ")");
        }
        beta_row[i] = static_cast<T>(betas[g]);
    }
    const Tensor<T> delta = sub(steered_target, keys);
    return add(keys, mul(Tensor<T>::vector(std::move(beta_row)), delta));
}

template <typename T>
FeatureMatrix value_features(const Transformer<T>& model, std::size_t layer) {
    const Tensor<T>& w = model.layer(layer).ffn.w_down;
    FeatureMatrix f;
    f.rows = w.dim(0);
    f.cols = w.dim(1);
    auto d = w.data();
    f.data.assign(d.begin(), d.end());
    return f;
}

template <typename T>
std::vector<FeatureMatrix> activation_features(const Transformer<T>& model,
                                               const std::vector<std::vector<int>>& sequences) {
    if (sequences.empty()) {
        throw DataError("activation features: empty dev set");
    }
    const std::size_t n_layers = model.config().n_layers;
    const std::size_t d_m = model.config().d_m;
    std::vector<FeatureMatrix> out(n_layers);
    for (auto& f : out) {
        f.rows = d_m;
        f.cols = sequences.size();
        f.data.assign(d_m * sequences.size(), 0.0);
    }
    for (std::size_t e = 0; e < sequences.size(); ++e) {
        const ForwardResult<T> res = model.forward(std::span<const int>(sequences[e]));
        for (std::size_t l = 0; l < n_layers; ++l) {
            auto kd = res.trace.layers[l].keys.data();
            const std::size_t rows = res.trace.layers[l].keys.dim(0);
            for (std::size_t i = 0; i < d_m; ++i) {
                double total = 0.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    total += static_cast<double>(kd[r * d_m + i]);
                }
                out[l].data[i * sequences.size() + e] = total / static_cast<double>(rows);
            }
        }
    }
    return out;
}

#define INFOSTEER_INSTANTIATE_CLUSTER(T)                                                                      \
    template std::vector<T> cluster_steer<T>(std::span<const T>, const ClusterAssignment&,                     \
                                             std::span<const double>, std::span<const T>);                     \
    template Tensor<T> cluster_steer_rows<T>(const Tensor<T>&, const ClusterAssignment&,                       \
                                             std::span<const double>, const Tensor<T>&);                       \
    template FeatureMatrix value_features<T>(const Transformer<T>&, std::size_t);                              \
    template std::vector<FeatureMatrix> activation_features<T>(const Transformer<T>&,                          \
                                                               const std::vector<std::vector<int>>&);

INFOSTEER_INSTANTIATE_CLUSTER(float)
INFOSTEER_INSTANTIATE_CLUSTER(double)

}  // namespace infosteer
