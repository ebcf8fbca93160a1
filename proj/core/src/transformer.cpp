#include <algorithm>
#include <cmath>

#include "infosteer/error.hpp"
#include "infosteer/model.hpp"
#include "infosteer/rng.hpp"
#include "infosteer/tokenizer.hpp"

namespace infosteer {

void PackedBatch::add(std::span<const int> sequence) {
    if (sequence.empty()) {
        throw DataError("cannot pack an empty token sequence");
    }
    for (std::size_t t = 0; t < sequence.size(); ++t) {
        tokens.push_back(sequence[t]);
        positions.push_back(static_cast<int>(t));
    }
    offsets.push_back(tokens.size());
}

namespace {

template <typename T>
Tensor<T> random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    std::vector<T> values(rows * cols);
    for (auto& v : values) {
        v = static_cast<T>(rng.normal(0.0, stddev));
    }
    return Tensor<T>({rows, cols}, std::move(values), true);
}

template <typename T>
Tensor<T> constant_vector(std::size_t n, T value) {
    return Tensor<T>::full({n}, value, true);
}

}  // namespace

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const std::size_t d = config_.d;
    const std::size_t d_m = config_.d_m;
    const double embed_std = 0.02;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));

    token_embedding_ = random_matrix<T>(rng, config_.vocab_size, d, embed_std);
    position_embedding_ = random_matrix<T>(rng, config_.max_seq_len, d, embed_std);
    layers_.reserve(config_.n_layers);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        LayerWeights<T> layer;
        layer.ln1_gain = constant_vector<T>(d, T(1));
        layer.ln1_bias = constant_vector<T>(d, T(0));
        layer.w_q = random_matrix<T>(rng, d, d, in_std);
        layer.w_k = random_matrix<T>(rng, d, d, in_std);
        layer.w_v = random_matrix<T>(rng, d, d, in_std);
        layer.w_o = random_matrix<T>(rng, d, d, in_std * residual_scale);
        layer.ln2_gain = constant_vector<T>(d, T(1));
        layer.ln2_bias = constant_vector<T>(d, T(0));
        layer.ffn.w_up = random_matrix<T>(rng, d, d_m, in_std);
        layer.ffn.w_down =
            random_matrix<T>(rng, d_m, d, residual_scale / std::sqrt(static_cast<double>(d_m)));
        if (config_.ffn_variant == FfnVariant::swiglu) {
            layer.ffn.w_gate = random_matrix<T>(rng, d, d_m, in_std);
        } else {
            layer.ffn.b1 = constant_vector<T>(d_m, T(0));
            layer.ffn.b2 = constant_vector<T>(d, T(0));
        }
        layers_.push_back(std::move(layer));
    }
    lnf_gain_ = constant_vector<T>(d, T(1));
    lnf_bias_ = constant_vector<T>(d, T(0));
    if (!config_.tie_decoder) {
        decoder_ = random_matrix<T>(rng, d, config_.vocab_size, embed_std);
    }
}

template <typename T>
std::vector<NamedTensor<T>> Transformer<T>::named_parameters() const {
    std::vector<NamedTensor<T>> out;
    out.push_back({"token_embedding", token_embedding_});
    out.push_back({"position_embedding", position_embedding_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& L = layers_[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        out.push_back({p + "ln1.gain", L.ln1_gain});
        out.push_back({p + "ln1.bias", L.ln1_bias});
        out.push_back({p + "attn.w_q", L.w_q});
        out.push_back({p + "attn.w_k", L.w_k});
        out.push_back({p + "attn.w_v", L.w_v});
        out.push_back({p + "attn.w_o", L.w_o});
        out.push_back({p + "ln2.gain", L.ln2_gain});
        out.push_back({p + "ln2.bias", L.ln2_bias});
        out.push_back({p + "ffn.w_up", L.ffn.w_up});
        out.push_back({p + "ffn.w_down", L.ffn.w_down});
        if (L.ffn.w_gate.defined()) {
            out.push_back({p + "ffn.w_gate", L.ffn.w_gate});
        }
        if (L.ffn.b1.defined()) {
            out.push_back({p + "ffn.b1", L.ffn.b1});
        }
        if (L.ffn.b2.defined()) {
            out.push_back({p + "ffn.b2", L.ffn.b2});
        }
    }
    out.push_back({"lnf.gain", lnf_gain_});
    out.push_back({"lnf.bias", lnf_bias_});
    if (decoder_.defined()) {
        out.push_back({"decoder", decoder_});
    }
    return out;
}

template <typename T>
std::size_t Transformer<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) {
        n += p.tensor.numel();
    }
    return n;
}

template <typename T>
Tensor<T> Transformer<T>::decode_matrix() const {
    return config_.tie_decoder ? transpose(token_embedding_) : decoder_;
}

template <typename T>
ForwardResult<T> Transformer<T>::forward(const PackedBatch& batch, std::span<const SteeringSpec> steering) const {
    if (batch.rows() == 0) {
        throw DataError("forward: empty batch");
    }
    for (std::size_t s = 0; s < batch.sequences(); ++s) {
        const std::size_t len = batch.offsets[s + 1] - batch.offsets[s];
        if (len > config_.max_seq_len) {
            throw DataError("forward: sequence of length " + std::to_string(len) + " exceeds max_seq_len " +
                            std::to_string(config_.max_seq_len));
        }
    }
    for (int id : batch.tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
            throw DataError("forward: token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(config_.vocab_size));
        }
    }
    for (const auto& spec : steering) {
        spec.validate(config_.n_layers);
    }

    Tensor<T> x = add(gather_rows(token_embedding_, batch.tokens), gather_rows(position_embedding_, batch.positions));
    ForwardResult<T> result;
    result.trace.offsets = batch.offsets;
    result.trace.layers.reserve(layers_.size());
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const auto& L = layers_[l];
        const Tensor<T> a = layer_norm(x, L.ln1_gain, L.ln1_bias);
        const Tensor<T> att = causal_attention(matmul(a, L.w_q), matmul(a, L.w_k), matmul(a, L.w_v), batch.offsets,
                                               config_.n_heads);
        x = add(x, matmul(att, L.w_o));

        const Tensor<T> b = layer_norm(x, L.ln2_gain, L.ln2_bias);
        const Tensor<T> keys = ffn_keys(b, L.ffn, config_.ffn_variant);
        Tensor<T> steered = keys;
        for (const auto& spec : steering) {
            steered = apply_steering(l + 1, steered, spec, config_.n_layers, config_.ffn_variant);
        }
        LayerKeys<T> entry;
        entry.keys = steered;
        if (!steered.same_storage(keys)) {
            entry.pre_steering = keys;
        }
        result.trace.layers.push_back(std::move(entry));
        x = add(x, ffn_project(steered, L.ffn, config_.ffn_variant));
    }
    const Tensor<T> final_hidden = layer_norm(x, lnf_gain_, lnf_bias_);
    result.logits = matmul(final_hidden, decode_matrix());
    return result;
}

template <typename T>
ForwardResult<T> Transformer<T>::forward(std::span<const int> tokens, std::span<const SteeringSpec> steering) const {
    PackedBatch batch;
    batch.add(tokens);
    return forward(batch, steering);
}

template <typename T>
Tensor<T> lm_loss(const Tensor<T>& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
    return cross_entropy(logits, targets, mask);
}

template <typename T>
std::vector<int> greedy_generate(const Transformer<T>& model, std::span<const int> prefix, std::size_t max_new_tokens,
                                 std::span<const SteeringSpec> steering) {
    std::vector<int> seq(prefix.begin(), prefix.end());
    const std::size_t vocab = model.config().vocab_size;
    for (std::size_t step = 0; step < max_new_tokens && seq.size() < model.config().max_seq_len; ++step) {
        const ForwardResult<T> out = model.forward(std::span<const int>(seq), steering);
        const std::size_t last = seq.size() - 1;
        auto logits = out.logits.data().subspan(last * vocab, vocab);
        const auto best = std::max_element(logits.begin(), logits.end());
        const int next = static_cast<int>(best - logits.begin());
        seq.push_back(next);
        if (next == ByteTokenizer::kEos) {
            break;
        }
    }
    return std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(prefix.size()), seq.end());
}

template class Transformer<float>;
template class Transformer<double>;
template Tensor<float> lm_loss<float>(const Tensor<float>&, std::span<const int>, std::span<const std::uint8_t>);
template Tensor<double> lm_loss<double>(const Tensor<double>&, std::span<const int>, std::span<const std::uint8_t>);
template std::vector<int> greedy_generate<float>(const Transformer<float>&, std::span<const int>, std::size_t,
                                                 std::span<const SteeringSpec>);
template std::vector<int> greedy_generate<double>(const Transformer<double>&, std::span<const int>, std::size_t,
                                                  std::span<const SteeringSpec>);

}  // namespace infosteer
