#include <cmath>

#include "infosteer/error.hpp"
#include "infosteer/model.hpp"

namespace infosteer {

std::string to_string(FfnVariant variant) {
    switch (variant) {
        case FfnVariant::standard_relu:
            return "standard-relu";
        case FfnVariant::standard_gelu:
            return "standard-gelu";
        case FfnVariant::swiglu:
            return "swiglu";
    }
    return "unknown";
}

FfnVariant parse_ffn_variant(const std::string& text) {
    if (text == "standard-relu" || text == "relu") {
        return FfnVariant::standard_relu;
    }
    if (text == "standard-gelu" || text == "gelu") {
        return FfnVariant::standard_gelu;
    }
    if (text == "swiglu") {
        return FfnVariant::swiglu;
    }
    throw ConfigError("unknown ffn_variant '" + text + "' (expected standard-relu, standard-gelu or swiglu)");
}

void ModelConfig::validate() const {
    auto positive = [](const char* name, std::size_t value) {
        if (value == 0) {
            throw ConfigError(std::string("model.") + name + " must be positive");
        }
    };
    positive("vocab_size", vocab_size);
    positive("d", d);
    positive("d_m", d_m);
    positive("n_layers", n_layers);
    positive("n_heads", n_heads);
    positive("max_seq_len", max_seq_len);
    if (vocab_size > kMaxVocab) {
        throw ConfigError("model.vocab_size " + std::to_string(vocab_size) + " exceeds " + std::to_string(kMaxVocab));
    }
    if (d % n_heads != 0) {
        throw ConfigError("model.d (" + std::to_string(d) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    if (d_m < d) {
        throw ConfigError("model.d_m (" + std::to_string(d_m) + ") must be >= d (" + std::to_string(d) + ")");
    }
}

template <typename T>
void FfnWeights<T>::validate(FfnVariant variant) const {
    if (!w_up.defined() || !w_down.defined() || w_up.rank() != 2 || w_down.rank() != 2) {
        throw ShapeError("ffn: W_up and W_down must be matrices");
    }
    const std::size_t d = w_up.dim(0);
    const std::size_t d_m = w_up.dim(1);
    if (w_down.dim(0) != d_m || w_down.dim(1) != d) {
        throw ShapeError("ffn: W_down shape " + shape_to_string(w_down.shape()) + " does not match W_up " +
                         shape_to_string(w_up.shape()));
    }
    if (variant == FfnVariant::swiglu) {
        if (!w_gate.defined()) {
            throw ShapeError("ffn: swiglu variant needs W_gate");
        }
        if (w_gate.shape() != w_up.shape()) {
            throw ShapeError("ffn: W_gate shape " + shape_to_string(w_gate.shape()) + " differs from W_up " +
                             shape_to_string(w_up.shape()));
        }
    } else {
        if (!b1.defined() || !b2.defined() || b1.numel() != d_m || b2.numel() != d) {
            throw ShapeError("ffn: standard variant needs b1 [d_m] and b2 [d]");
        }
    }
}

namespace {

template <typename T>
Tensor<T> as_rows(const Tensor<T>& h, std::size_t d) {
    if (h.rank() == 1) {
        if (h.dim(0) != d) {
            throw ShapeError("ffn: input width " + std::to_string(h.dim(0)) + " does not match d = " +
                             std::to_string(d));
        }
        return reshape(h, Shape{1, d});
    }
    if (h.rank() != 2 || h.dim(1) != d) {
        throw ShapeError("ffn: input shape " + shape_to_string(h.shape()) + " does not match d = " +
                         std::to_string(d));
    }
    return h;
}

}  // namespace

template <typename T>
Tensor<T> ffn_keys(const Tensor<T>& h, const FfnWeights<T>& w, FfnVariant variant) {
    w.validate(variant);
    const Tensor<T> x = as_rows(h, w.w_up.dim(0));
    switch (variant) {
        case FfnVariant::standard_relu:
            return relu(add(matmul(x, w.w_up), w.b1));
        case FfnVariant::standard_gelu:
            return gelu(add(matmul(x, w.w_up), w.b1));
        case FfnVariant::swiglu:
            return mul(silu(matmul(x, w.w_gate)), matmul(x, w.w_up));
    }
    throw ConfigError("ffn: unknown variant");
}

template <typename T>
Tensor<T> ffn_project(const Tensor<T>& keys, const FfnWeights<T>& w, FfnVariant variant) {
    Tensor<T> out = matmul(keys, w.w_down);
    if (is_standard(variant)) {
        out = add(out, w.b2);
    }
    return out;
}

template <typename T>
FfnOutput<T> ffn_forward(const Tensor<T>& h, const FfnWeights<T>& w, FfnVariant variant) {
    Tensor<T> keys = ffn_keys(h, w, variant);
    Tensor<T> out = ffn_project(keys, w, variant);
    return {std::move(out), std::move(keys)};
}

template <typename T>
std::vector<KeyValueTerm<T>> kv_decompose(std::span<const T> h, const FfnWeights<T>& w, FfnVariant variant) {
    for (T x : h) {
        if (!std::isfinite(x)) {
            throw DomainError("kv_decompose: non-finite token representation");
        }
    }
    const Tensor<T> keys = ffn_keys(Tensor<T>::vector(std::vector<T>(h.begin(), h.end())), w, variant);
    const std::size_t d_m = w.w_down.dim(0);
    const std::size_t d = w.w_down.dim(1);
    auto kd = keys.data();
    auto vd = w.w_down.data();
    std::vector<KeyValueTerm<T>> terms;
    terms.reserve(d_m);
    for (std::size_t i = 0; i < d_m; ++i) {
        terms.push_back({kd[i], std::vector<T>(vd.begin() + i * d, vd.begin() + (i + 1) * d)});
    }
    return terms;
}

template <typename T>
std::vector<T> kv_recompose(std::span<const KeyValueTerm<T>> terms, const FfnWeights<T>& w, FfnVariant variant) {
    const std::size_t d = w.w_down.dim(1);
    std::vector<T> out(d, T(0));
    for (const auto& term : terms) {
        if (term.value.size() != d) {
            throw ShapeError("kv_recompose: value vector of length " + std::to_string(term.value.size()) +
                             " for width " + std::to_string(d));
        }
        for (std::size_t j = 0; j < d; ++j) {
            out[j] += term.key * term.value[j];
        }
    }
    if (is_standard(variant)) {
        auto b2 = w.b2.data();
        for (std::size_t j = 0; j < d; ++j) {
            out[j] += b2[j];
        }
    }
    return out;
}

#define INFOSTEER_INSTANTIATE_FFN(T)                                                                      \
    template struct FfnWeights<T>;                                                                        \
    template Tensor<T> ffn_keys<T>(const Tensor<T>&, const FfnWeights<T>&, FfnVariant);                   \
    template Tensor<T> ffn_project<T>(const Tensor<T>&, const FfnWeights<T>&, FfnVariant);                \
    template FfnOutput<T> ffn_forward<T>(const Tensor<T>&, const FfnWeights<T>&, FfnVariant);             \
    template std::vector<KeyValueTerm<T>> kv_decompose<T>(std::span<const T>, const FfnWeights<T>&,       \
                                                          FfnVariant);                                    \
    template std::vector<T> kv_recompose<T>(std::span<const KeyValueTerm<T>>, const FfnWeights<T>&, FfnVariant);

INFOSTEER_INSTANTIATE_FFN(float)
INFOSTEER_INSTANTIATE_FFN(double)

}  // namespace infosteer
