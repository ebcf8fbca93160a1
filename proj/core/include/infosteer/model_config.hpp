#pragma once

#include <cstddef>
#include <string>

namespace infosteer {

enum class FfnVariant { standard_relu, standard_gelu, swiglu };

std::string to_string(FfnVariant variant);
FfnVariant parse_ffn_variant(const std::string& text);

inline bool is_standard(FfnVariant variant) { return variant != FfnVariant::swiglu; }

/// Shape of a decoder-only transformer with pre-norm blocks and learned
/// absolute position embeddings.
struct ModelConfig {
    std::size_t vocab_size = 259;
    std::size_t d = 32;     // model width
    std::size_t d_m = 64;   // FFN inner width (number of key-value memories)
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t max_seq_len = 64;
    FfnVariant ffn_variant = FfnVariant::standard_relu;
    bool tie_decoder = true;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

inline constexpr std::size_t kMaxVocab = 512;

}  // namespace infosteer
