#pragma once

#include <cstddef>
#include <vector>

#include "infosteer/tensor.hpp"

namespace infosteer {

/// Key coefficients of one FFN layer for every packed token row ([n, d_m]).
/// `pre_steering` is defined only when steering modified this layer.
template <typename T>
struct LayerKeys {
    Tensor<T> keys;
    Tensor<T> pre_steering;

    bool steered() const { return pre_steering.defined(); }
};

/// Per-layer key coefficients captured during one forward pass. Rows follow
/// the packed batch layout; `offsets` marks sequence boundaries.
template <typename T>
struct KeyTrace {
    std::vector<LayerKeys<T>> layers;
    std::vector<std::size_t> offsets;

    std::size_t n_layers() const { return layers.size(); }
    std::size_t positions() const { return layers.empty() ? 0 : layers.front().keys.dim(0); }
    std::size_t width() const { return layers.empty() ? 0 : layers.front().keys.dim(1); }
};

}  // namespace infosteer
