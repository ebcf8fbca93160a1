#include "infosteer/error.hpp"
#include "infosteer/finegrain.hpp"
#include "infosteer/steering.hpp"

namespace infosteer {

namespace {

const std::vector<double>& layer_scores(const SteeringSpec& spec, std::size_t layer) {
    if (!spec.scores) {
        throw ConfigError(to_string(spec.method) + " steering needs surrogate scores (run `surrogate build`)");
    }
    if (layer > spec.scores->layers.size()) {
        throw ConfigError("surrogate scores cover " + std::to_string(spec.scores->layers.size()) +
                          " layers, steering asks for layer " + std::to_string(layer));
    }
    return spec.scores->layers[layer - 1];
}

}  // namespace

template <typename T>
Tensor<T> apply_steering(std::size_t layer, const Tensor<T>& keys, const SteeringSpec& spec, std::size_t n_layers,
                         FfnVariant variant) {
    if (layer < 1 || layer > n_layers) {
        throw ConfigError("apply_steering: layer " + std::to_string(layer) + " outside [1, " +
                          std::to_string(n_layers) + "]");
    }
    if (!spec.acts_on_forward() || !spec.covers(layer, n_layers)) {
        return keys;
    }
    const MagnitudeMode mode = spec.mode_for(variant);
    switch (spec.method) {
        case SteeringMethod::intervention:
            return intervene_rows(keys, spec.p_percent, spec.alpha, mode, spec.stop_gradient);
        case SteeringMethod::surrogate:
            return amplify_rows(keys, layer_scores(spec, layer), spec.gamma);
        case SteeringMethod::cluster: {
            if (!spec.clusters) {
                throw ConfigError("cluster steering needs a cluster assignment (run `cluster fit`)");
            }
            if (layer > spec.clusters->layers.size()) {
                throw ConfigError("cluster assignment covers " + std::to_string(spec.clusters->layers.size()) +
                                  " layers, steering asks for layer " + std::to_string(layer));
            }
            const Tensor<T> target = spec.cluster_delta == ClusterDeltaSource::intervention
                                         ? intervene_rows(keys, spec.p_percent, spec.alpha, mode, spec.stop_gradient)
                                         : amplify_rows(keys, layer_scores(spec, layer), spec.gamma);
            return cluster_steer_rows(keys, spec.clusters->layers[layer - 1], spec.betas, target);
        }
        default:
            return keys;
    }
}

template Tensor<float> apply_steering<float>(std::size_t, const Tensor<float>&, const SteeringSpec&, std::size_t,
                                             FfnVariant);
template Tensor<double> apply_steering<double>(std::size_t, const Tensor<double>&, const SteeringSpec&, std::size_t,
                                               FfnVariant);

}  // namespace infosteer
