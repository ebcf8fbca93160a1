#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "infosteer/key_trace.hpp"
#include "infosteer/model_config.hpp"
#include "infosteer/steering.hpp"
#include "infosteer/tensor.hpp"

namespace infosteer {

// ---------------------------------------------------------------------------
// Feed-forward block as key-value memory
// ---------------------------------------------------------------------------

/// Standard: output = sigma(h W_up + b1) W_down + b2.
/// SwiGLU:   output = (silu(h W_gate) * (h W_up)) W_down (no biases).
/// Row i of w_down is the value vector v_i.
template <typename T>
struct FfnWeights {
    Tensor<T> w_up;    // [d, d_m]
    Tensor<T> w_down;  // [d_m, d]
    Tensor<T> w_gate;  // [d, d_m], SwiGLU only
    Tensor<T> b1;      // [d_m], standard only
    Tensor<T> b2;      // [d], standard only

    void validate(FfnVariant variant) const;
};

template <typename T>
struct FfnOutput {
    Tensor<T> output;  // [n, d]
    Tensor<T> keys;    // [n, d_m], exactly the coefficients multiplying W_down
};

/// Key coefficients for rows of h ([n, d] or a single [d] vector).
template <typename T>
Tensor<T> ffn_keys(const Tensor<T>& h, const FfnWeights<T>& w, FfnVariant variant);

/// keys W_down (+ b2 for the standard variant).
template <typename T>
Tensor<T> ffn_project(const Tensor<T>& keys, const FfnWeights<T>& w, FfnVariant variant);

template <typename T>
FfnOutput<T> ffn_forward(const Tensor<T>& h, const FfnWeights<T>& w, FfnVariant variant);

template <typename T>
struct KeyValueTerm {
    T key;
    std::vector<T> value;  // row of W_down
};

/// Splits the FFN output for one token representation into (k_i, v_i) terms.
/// The standard variant's b2 stays outside the sum.
template <typename T>
std::vector<KeyValueTerm<T>> kv_decompose(std::span<const T> h, const FfnWeights<T>& w, FfnVariant variant);

/// sum_i k_i v_i, plus b2 for the standard variant.
template <typename T>
std::vector<T> kv_recompose(std::span<const KeyValueTerm<T>> terms, const FfnWeights<T>& w, FfnVariant variant);

// ---------------------------------------------------------------------------
// Transformer
// ---------------------------------------------------------------------------

/// Several token sequences packed row-wise; attention never crosses a
/// sequence boundary.
struct PackedBatch {
    std::vector<int> tokens;
    std::vector<int> positions;
    std::vector<std::size_t> offsets{0};

    void add(std::span<const int> sequence);
    std::size_t sequences() const { return offsets.size() - 1; }
    std::size_t rows() const { return tokens.size(); }
};

template <typename T>
struct LayerWeights {
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> w_q, w_k, w_v, w_o;
    Tensor<T> ln2_gain, ln2_bias;
    FfnWeights<T> ffn;
};

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;  // [rows, vocab]
    KeyTrace<T> trace;
};

template <typename T>
class Transformer {
public:
    Transformer(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }

    /// Logits and key trace. Steering specs are applied in order inside the
    /// graph; the trace keeps pre-steering keys for every modified layer.
    ForwardResult<T> forward(const PackedBatch& batch, std::span<const SteeringSpec> steering = {}) const;
    ForwardResult<T> forward(std::span<const int> tokens, std::span<const SteeringSpec> steering = {}) const;

    /// Handles (not copies) of every trainable tensor, in a fixed order.
    std::vector<NamedTensor<T>> named_parameters() const;
    std::size_t parameter_count() const;

    const LayerWeights<T>& layer(std::size_t index) const { return layers_.at(index); }
    LayerWeights<T>& mutable_layer(std::size_t index) { return layers_.at(index); }
    const Tensor<T>& token_embedding() const noexcept { return token_embedding_; }

    /// W_decode as a [d, vocab] matrix (the transposed embedding when tied).
    Tensor<T> decode_matrix() const;

private:
    ModelConfig config_;
    Tensor<T> token_embedding_;     // [vocab, d]
    Tensor<T> position_embedding_;  // [max_seq_len, d]
    std::vector<LayerWeights<T>> layers_;
    Tensor<T> lnf_gain_, lnf_bias_;
    Tensor<T> decoder_;  // [d, vocab], untied only
};

/// Mean next-token negative log-likelihood over rows with mask != 0.
template <typename T>
Tensor<T> lm_loss(const Tensor<T>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask);

/// Greedy continuation of `prefix`; stops after `max_new_tokens`, at eos
/// (which is included), or when the context is full.
template <typename T>
std::vector<int> greedy_generate(const Transformer<T>& model, std::span<const int> prefix,
                                 std::size_t max_new_tokens, std::span<const SteeringSpec> steering = {});

}  // namespace infosteer
