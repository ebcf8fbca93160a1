#include <algorithm>
#include <cmath>

#include "infosteer/error.hpp"
#include "infosteer/finegrain.hpp"

namespace infosteer {

namespace {

std::vector<double> softmax_of(std::span<const double> logits) {
    if (logits.empty()) {
        throw ShapeError("softmax: empty logit vector");
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    if (!std::isfinite(top)) {
        throw DomainError("softmax: non-finite logits");
    }
    std::vector<double> p(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - top);
        total += p[i];
    }
    for (double& v : p) {
        v /= total;
    }
    return p;
}

double entropy_of(std::span<const double> p) {
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            h -= v * std::log(v);
        }
    }
    return std::max(h, 0.0);
}

void check_distribution(std::span<const double> q, std::size_t vocab) {
    if (q.size() != vocab) {
        throw ShapeError("surrogate target has " + std::to_string(q.size()) + " entries for vocabulary " +
                         std::to_string(vocab));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (!(q[i] >= 0.0) || !std::isfinite(q[i])) {
            throw DomainError("surrogate target entry " + std::to_string(i) + " is not a probability");
        }
        total += q[i];
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw DomainError("surrogate target sums to " + std::to_string(total) + ", expected 1");
    }
}

}  // namespace

double softmax_entropy(std::span<const double> logits) {
    return entropy_of(softmax_of(logits));
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw ShapeError("kl_divergence: lengths " + std::to_string(p.size()) + " and " + std::to_string(q.size()));
    }
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            kl += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kEntropyFloor)));
        }
    }
    return std::max(kl, 0.0);
}

double surrogate_score(std::span<const double> phi, double lambda1, double lambda2, std::span<const double> target) {
    check_distribution(target, phi.size());
    const std::vector<double> p = softmax_of(phi);
    const double h = entropy_of(p);
    const double kl = kl_divergence(p, target);
    return lambda1 * h + lambda2 * kl;
}

double specificity(std::span<const double> phi, std::size_t vocab) {
    if (vocab < 2) {
        throw DomainError("specificity: vocabulary must have at least 2 entries");
    }
    if (phi.size() != vocab) {
        throw ShapeError("specificity: " + std::to_string(phi.size()) + " logits for vocabulary " +
                         std::to_string(vocab));
    }
    const double s = 1.0 - softmax_entropy(phi) / std::log(static_cast<double>(vocab));
    return std::clamp(s, 0.0, 1.0);
}

std::vector<double> uniform_target(std::size_t vocab) {
    if (vocab == 0) {
        throw DomainError("uniform_target: empty vocabulary");
    }
    return std::vector<double>(vocab, 1.0 / static_cast<double>(vocab));
}

std::vector<double> empirical_target(const std::vector<std::vector<int>>& sequences, std::size_t vocab) {
    std::vector<double> counts(vocab, 0.0);
    double total = 0.0;
    for (const auto& seq : sequences) {
        for (std::size_t t = 1; t < seq.size(); ++t) {
            const int id = seq[t];
            if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
                throw DataError("empirical_target: token id " + std::to_string(id) + " outside vocabulary");
            }
            counts[static_cast<std::size_t>(id)] += 1.0;
            total += 1.0;
        }
    }
    if (total == 0.0) {
        throw DataError("empirical_target: no next-token events in the data");
    }
    for (double& c : counts) {
        c /= total;
    }
    return counts;
}

SurrogateScores scores_of(const SurrogateTable& table) {
    SurrogateScores out;
    for (const auto& layer : table.layers) {
        if (layer.score.size() != layer.width) {
            throw DataError("surrogate table layer has no scores");
        }
        out.layers.push_back(layer.score);
    }
    return out;
}

SurrogateLayer surrogate(std::span<const double> values, std::size_t d_m, std::size_t d,
                         std::span<const double> decode, std::size_t vocab) {
    if (values.size() != d_m * d) {
        throw ShapeError("surrogate: values buffer of " + std::to_string(values.size()) + " for [" +
                         std::to_string(d_m) + ", " + std::to_string(d) + "]");
    }
    if (decode.size() != d * vocab) {
        throw ShapeError("surrogate: W_decode buffer of " + std::to_string(decode.size()) + " for [" +
                         std::to_string(d) + ", " + std::to_string(vocab) + "]");
    }
    SurrogateLayer layer;
    layer.width = d_m;
    layer.vocab = vocab;
    layer.phi.assign(d_m * vocab, 0.0);
    for (std::size_t i = 0; i < d_m; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double v = values[i * d + j];
            for (std::size_t c = 0; c < vocab; ++c) {
                layer.phi[i * vocab + c] += v * decode[j * vocab + c];
            }
        }
    }
    return layer;
}

void score_surrogate(SurrogateLayer& layer, double lambda1, double lambda2, std::span<const double> target) {
    check_distribution(target, layer.vocab);
    layer.entropy.resize(layer.width);
    layer.specificity.resize(layer.width);
    layer.score.resize(layer.width);
    const double log_v = std::log(static_cast<double>(layer.vocab));
    for (std::size_t i = 0; i < layer.width; ++i) {
        const std::vector<double> p = softmax_of(layer.row(i));
        const double h = entropy_of(p);
        layer.entropy[i] = h;
        layer.specificity[i] = layer.vocab >= 2 ? std::clamp(1.0 - h / log_v, 0.0, 1.0) : 0.0;
        layer.score[i] = lambda1 * h + lambda2 * kl_divergence(p, target);
    }
}

template <typename T>
SurrogateTable build_surrogate_table(const Transformer<T>& model, double lambda1, double lambda2,
                                     SurrogateTarget target_kind, std::span<const double> target) {
    const ModelConfig& cfg = model.config();
    const Tensor<T> decode_t = model.decode_matrix();
    const std::vector<double> decode(decode_t.data().begin(), decode_t.data().end());
    SurrogateTable table;
    table.lambda1 = lambda1;
    table.lambda2 = lambda2;
    table.target = target_kind;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto w = model.layer(l).ffn.w_down.data();
        const std::vector<double> values(w.begin(), w.end());
        SurrogateLayer layer = surrogate(values, cfg.d_m, cfg.d, decode, cfg.vocab_size);
        score_surrogate(layer, lambda1, lambda2, target);
        table.layers.push_back(std::move(layer));
    }
    return table;
}

FeatureMatrix surrogate_features(const SurrogateLayer& layer) {
    if (layer.phi.size() != layer.width * layer.vocab) {
        throw DataError("surrogate features: table has no surrogate matrix");
    }
    FeatureMatrix f;
    f.rows = layer.width;
    f.cols = layer.vocab;
    f.data = layer.phi;
    return f;
}

template <typename T>
std::vector<T> amplify(std::span<const T> keys, std::span<const double> scores, double gamma) {
    if (keys.size() != scores.size()) {
        throw ShapeError("amplify: " + std::to_string(scores.size()) + " scores for " + std::to_string(keys.size()) +
                         " keys");
    }
    std::vector<T> out(keys.size());
    for (std::size_t i = 0; i < keys.size(); ++i) {
        out[i] = keys[i] * static_cast<T>(1.0 + gamma * scores[i]);
        if (!std::isfinite(out[i])) {
            throw NumericError("amplify: non-finite result at index " + std::to_string(i));
        }
    }
    return out;
}

template <typename T>
Tensor<T> amplify_rows(const Tensor<T>& keys, std::span<const double> scores, double gamma) {
    if (keys.rank() != 2 || keys.dim(1) != scores.size()) {
        throw ShapeError("amplify: keys " + shape_to_string(keys.shape()) + " with " + std::to_string(scores.size()) +
                         " scores");
    }
    std::vector<T> factor(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        factor[i] = static_cast<T>(1.0 + gamma * scores[i]);
    }
    Tensor<T> out = mul(keys, Tensor<T>::vector(std::move(factor)));
    auto od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) {
        if (!std::isfinite(od[i])) {
            throw NumericError("amplify: non-finite result at index " + std::to_string(i % scores.size()) +
                               " of row " + std::to_string(i / scores.size()));
        }
    }
    return out;
}

#define INFOSTEER_INSTANTIATE_SURROGATE(T)                                                                    \
    template SurrogateTable build_surrogate_table<T>(const Transformer<T>&, double, double, SurrogateTarget,   \
                                                     std::span<const double>);                                 \
    template std::vector<T> amplify<T>(std::span<const T>, std::span<const double>, double);                   \
    template Tensor<T> amplify_rows<T>(const Tensor<T>&, std::span<const double>, double);

INFOSTEER_INSTANTIATE_SURROGATE(float)
INFOSTEER_INSTANTIATE_SURROGATE(double)

}  // namespace infosteer
