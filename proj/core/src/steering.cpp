#include <algorithm>
#include <cmath>
#include <numeric>

#include "infosteer/error.hpp"
#include "infosteer/log.hpp"
#include "infosteer/steering.hpp"
#include "infosteer/text.hpp"

namespace infosteer {

std::string to_string(SteeringMethod method) {
    switch (method) {
        case SteeringMethod::none:
            return "none";
        case SteeringMethod::intervention:
            return "intervention";
        case SteeringMethod::regularization:
            return "regularization";
        case SteeringMethod::cluster:
            return "cluster";
        case SteeringMethod::surrogate:
            return "surrogate";
    }
    return "unknown";
}

std::string to_string(MagnitudeMode mode) {
    return mode == MagnitudeMode::absolute ? "absolute" : "signed";
}

std::string to_string(ClusterDeltaSource source) {
    return source == ClusterDeltaSource::amplify ? "amplify" : "intervention";
}

std::string to_string(SurrogateTarget target) {
    return target == SurrogateTarget::empirical ? "empirical" : "uniform";
}

SteeringMethod parse_steering_method(const std::string& text) {
    for (auto m : {SteeringMethod::none, SteeringMethod::intervention, SteeringMethod::regularization,
                   SteeringMethod::cluster, SteeringMethod::surrogate}) {
        if (text == to_string(m)) {
            return m;
        }
    }
    throw ConfigError("unknown steering method '" + text +
                      "' (expected none, intervention, regularization, cluster or surrogate)");
}

MagnitudeMode parse_magnitude_mode(const std::string& text) {
    if (text == "signed") {
        return MagnitudeMode::signed_values;
    }
    if (text == "absolute") {
        return MagnitudeMode::absolute;
    }
    throw ConfigError("unknown magnitude_mode '" + text + "' (expected signed or absolute)");
}

ClusterDeltaSource parse_cluster_delta(const std::string& text) {
    if (text == "intervention") {
        return ClusterDeltaSource::intervention;
    }
    if (text == "amplify") {
        return ClusterDeltaSource::amplify;
    }
    throw ConfigError("unknown cluster_delta '" + text + "' (expected intervention or amplify)");
}

SurrogateTarget parse_surrogate_target(const std::string& text) {
    if (text == "uniform") {
        return SurrogateTarget::uniform;
    }
    if (text == "empirical") {
        return SurrogateTarget::empirical;
    }
    throw ConfigError("unknown surrogate_target '" + text + "' (expected uniform or empirical)");
}

MagnitudeMode default_magnitude_mode(FfnVariant variant) {
    return variant == FfnVariant::standard_relu ? MagnitudeMode::signed_values : MagnitudeMode::absolute;
}

void SteeringSpec::validate(std::size_t n_layers) const {
    if (!(p_percent >= 0.0 && p_percent <= 100.0)) {
        throw ConfigError("steering.p_percent must lie in [0, 100], got " + text::format_double(p_percent));
    }
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw ConfigError("steering.alpha must be positive, got " + text::format_double(alpha));
    }
    if (!std::isfinite(lambda) || !std::isfinite(lambda1) || !std::isfinite(lambda2) || !std::isfinite(gamma)) {
        throw ConfigError("steering: lambda, lambda1, lambda2 and gamma must be finite");
    }
    if (layer_hi < -1) {
        throw ConfigError("steering.layer_hi must be -1 (last layer) or a layer index, got " +
                          std::to_string(layer_hi));
    }
    const auto [lo, hi] = resolved_range(n_layers);
    if (lo <= hi && (layer_lo < 1 || hi > n_layers)) {
        throw ConfigError("steering layer range [" + std::to_string(layer_lo) + ", " + std::to_string(layer_hi) +
                          "] exceeds model depth " + std::to_string(n_layers));
    }
    if (method == SteeringMethod::cluster) {
        if (groups == 0 || subgroups == 0) {
            throw ConfigError("steering.groups and steering.subgroups must be positive");
        }
        for (double b : betas) {
            if (!std::isfinite(b)) {
                throw ConfigError("steering.betas must be finite");
            }
        }
    }
}

std::pair<std::size_t, std::size_t> SteeringSpec::resolved_range(std::size_t n_layers) const {
    const long long lo = layer_lo;
    const long long hi = layer_hi == -1 ? static_cast<long long>(n_layers) : layer_hi;
    if (hi < lo || hi < 1) {
        return {1, 0};
    }
    return {static_cast<std::size_t>(std::max<long long>(lo, 0)), static_cast<std::size_t>(hi)};
}

bool SteeringSpec::covers(std::size_t layer, std::size_t n_layers) const {
    const auto [lo, hi] = resolved_range(n_layers);
    return layer >= lo && layer <= hi;
}

std::vector<std::pair<std::string, std::string>> steering_to_fields(const SteeringSpec& spec) {
    using text::format_double;
    std::vector<std::pair<std::string, std::string>> f;
    f.emplace_back("method", to_string(spec.method));
    f.emplace_back("p_percent", format_double(spec.p_percent));
    f.emplace_back("alpha", format_double(spec.alpha));
    f.emplace_back("lambda", format_double(spec.lambda));
    f.emplace_back("layer_lo", std::to_string(spec.layer_lo));
    f.emplace_back("layer_hi", std::to_string(spec.layer_hi));
    if (spec.magnitude_mode) {
        f.emplace_back("magnitude_mode", to_string(*spec.magnitude_mode));
    }
    f.emplace_back("stop_gradient", spec.stop_gradient ? "true" : "false");
    f.emplace_back("groups", std::to_string(spec.groups));
    f.emplace_back("subgroups", std::to_string(spec.subgroups));
    if (!spec.betas.empty()) {
        std::string joined;
        for (std::size_t i = 0; i < spec.betas.size(); ++i) {
            joined += (i ? "," : "") + format_double(spec.betas[i]);
        }
        f.emplace_back("betas", joined);
    }
    f.emplace_back("cluster_delta", to_string(spec.cluster_delta));
    f.emplace_back("lambda1", format_double(spec.lambda1));
    f.emplace_back("lambda2", format_double(spec.lambda2));
    f.emplace_back("gamma", format_double(spec.gamma));
    f.emplace_back("surrogate_target", to_string(spec.surrogate_target));
    return f;
}

SteeringSpec steering_from_fields(const std::map<std::string, std::string>& fields) {
    SteeringSpec spec;
    for (const auto& [key, raw] : fields) {
        const std::string value(text::trim(raw));
        const std::string what = "steering." + key;
        if (key == "method") {
            spec.method = parse_steering_method(value);
        } else if (key == "p_percent") {
            spec.p_percent = text::parse_double(value, what);
        } else if (key == "alpha") {
            spec.alpha = text::parse_double(value, what);
        } else if (key == "lambda") {
            spec.lambda = text::parse_double(value, what);
        } else if (key == "layer_lo") {
            spec.layer_lo = static_cast<int>(text::parse_int(value, what));
        } else if (key == "layer_hi") {
            spec.layer_hi = static_cast<int>(text::parse_int(value, what));
        } else if (key == "magnitude_mode") {
            if (value == "auto") {
                spec.magnitude_mode.reset();
            } else {
                spec.magnitude_mode = parse_magnitude_mode(value);
            }
        } else if (key == "stop_gradient") {
            spec.stop_gradient = text::parse_bool(value, what);
        } else if (key == "groups") {
            spec.groups = text::parse_size(value, what);
        } else if (key == "subgroups") {
            spec.subgroups = text::parse_size(value, what);
        } else if (key == "betas") {
            spec.betas.clear();
            if (!value.empty()) {
                for (const auto& part : text::split(value, ',')) {
                    spec.betas.push_back(text::parse_double(part, what));
                }
            }
        } else if (key == "cluster_delta") {
            spec.cluster_delta = parse_cluster_delta(value);
        } else if (key == "lambda1") {
            spec.lambda1 = text::parse_double(value, what);
        } else if (key == "lambda2") {
            spec.lambda2 = text::parse_double(value, what);
        } else if (key == "gamma") {
            spec.gamma = text::parse_double(value, what);
        } else if (key == "surrogate_target") {
            spec.surrogate_target = parse_surrogate_target(value);
        } else {
            throw ConfigError("unknown steering field '" + key + "'");
        }
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Intervention
// ---------------------------------------------------------------------------

std::size_t intervention_count(double p_percent, std::size_t width) {
    if (!(p_percent >= 0.0 && p_percent <= 100.0)) {
        throw ConfigError("intervention: p must lie in [0, 100], got " + text::format_double(p_percent));
    }
    if (p_percent == 0.0 || width == 0) {
        return 0;
    }
    const auto n = static_cast<std::size_t>(std::llround(p_percent * static_cast<double>(width) / 100.0));
    return std::clamp<std::size_t>(n, 1, width);
}

template <typename T>
std::vector<std::size_t> smallest_indices(std::span<const T> keys, std::size_t n, MagnitudeMode mode) {
    n = std::min(n, keys.size());
    std::vector<std::size_t> idx(keys.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto rank = [&](std::size_t i) { return mode == MagnitudeMode::absolute ? std::abs(keys[i]) : keys[i]; };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          const T ra = rank(a);
                          const T rb = rank(b);
                          return ra < rb || (ra == rb && a < b);
                      });
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    return idx;
}

template <typename T>
T key_mean(std::span<const T> keys) {
    if (keys.empty()) {
        throw ShapeError("key_mean: empty key vector");
    }
    T total = 0;
    for (T k : keys) {
        total += k;
    }
    return total / static_cast<T>(keys.size());
}

namespace {

template <typename T>
void check_finite(std::span<const T> keys, const char* op) {
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (!std::isfinite(keys[i])) {
            throw DomainError(std::string(op) + ": non-finite key at index " + std::to_string(i));
        }
    }
}

void check_alpha(double alpha) {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw ConfigError("intervention: alpha must be positive, got " + text::format_double(alpha));
    }
}

}  // namespace

template <typename T>
std::vector<T> intervene_keys(std::span<const T> keys, double p_percent, double alpha, MagnitudeMode mode) {
    check_alpha(alpha);
    const std::size_t n = intervention_count(p_percent, keys.size());
    std::vector<T> out(keys.begin(), keys.end());
    if (n == 0) {
        return out;
    }
    check_finite(keys, "intervene_keys");
    const T replacement = static_cast<T>(alpha) * key_mean(keys);
    for (std::size_t i : smallest_indices(keys, n, mode)) {
        out[i] = replacement;
    }
    return out;
}

template <typename T>
Tensor<T> intervene_rows(const Tensor<T>& keys, double p_percent, double alpha, MagnitudeMode mode,
                         bool stop_gradient) {
    check_alpha(alpha);
    if (keys.rank() != 2) {
        throw ShapeError("intervene_rows: expected [n, d_m] keys, got " + shape_to_string(keys.shape()));
    }
    const std::size_t rows = keys.dim(0);
    const std::size_t width = keys.dim(1);
    const std::size_t n = intervention_count(p_percent, width);
    if (n == 0) {
        return keys;
    }
    auto kd = keys.data();
    check_finite(kd, "intervene_rows");
    Tensor<T> out(keys.shape(), std::vector<T>(kd.begin(), kd.end()));
    auto od = out.mutable_data();
    auto replaced = std::make_shared<std::vector<std::size_t>>();
    replaced->reserve(rows * n);
    const T a = static_cast<T>(alpha);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto row = kd.subspan(r * width, width);
        const T replacement = a * key_mean(row);
        for (std::size_t i : smallest_indices(row, n, mode)) {
            od[r * width + i] = replacement;
            replaced->push_back(i);
        }
    }
    if (auto* tape = detail::recording_tape<T>({&keys})) {
        tape->record({keys}, out, [ks = keys.storage(), replaced, rows, width, n, a, stop_gradient](std::span<const T> g) {
            auto gk = ks->grad_buffer();
            const T share = a / static_cast<T>(width);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t* rep = replaced->data() + r * n;
                T replaced_grad = 0;
                std::size_t next = 0;
                for (std::size_t j = 0; j < width; ++j) {
                    if (next < n && rep[next] == j) {
                        replaced_grad += g[r * width + j];
                        ++next;
                    } else {
                        gk[r * width + j] += g[r * width + j];
                    }
                }
                if (!stop_gradient) {
                    for (std::size_t j = 0; j < width; ++j) {
                        gk[r * width + j] += share * replaced_grad;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Entropy
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_signed(std::span<const T> keys, MagnitudeMode mode, const char* op) {
    if (mode != MagnitudeMode::signed_values) {
        return;
    }
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (keys[i] < T(0)) {
            throw DomainError(std::string(op) + ": negative key at index " + std::to_string(i) +
                              " in signed magnitude mode; use magnitude_mode = absolute for gelu/swiglu keys");
        }
    }
}

}  // namespace

template <typename T>
EntropyValue normalized_entropy(std::span<const T> keys, MagnitudeMode mode) {
    check_signed(keys, mode, "normalized_entropy");
    double total = 0.0;
    for (T k : keys) {
        total += std::abs(static_cast<double>(k));
    }
    if (!std::isfinite(total)) {
        throw DomainError("normalized_entropy: non-finite keys");
    }
    if (total == 0.0) {
        return {0.0, true};
    }
    const double denom = std::max(total, kEntropyFloor);
    double h = 0.0;
    for (T k : keys) {
        const double p = std::abs(static_cast<double>(k)) / denom;
        if (p > 0.0) {
            h -= p * std::log(p);
        }
    }
    return {std::max(h, 0.0), false};
}

template <typename T>
Tensor<T> row_entropy(const Tensor<T>& keys, MagnitudeMode mode) {
    if (keys.rank() != 2) {
        throw ShapeError("row_entropy: expected [n, d_m] keys, got " + shape_to_string(keys.shape()));
    }
    const std::size_t rows = keys.dim(0);
    const std::size_t width = keys.dim(1);
    auto kd = keys.data();
    check_signed(kd, mode, "row_entropy");
    Tensor<T> out = Tensor<T>::zeros({rows});
    auto od = out.mutable_data();
    // Per row: normalizer S (floored) and whether the floor was active.
    auto denom = std::make_shared<std::vector<T>>(rows);
    auto floored = std::make_shared<std::vector<std::uint8_t>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = kd.data() + r * width;
        T total = 0;
        for (std::size_t j = 0; j < width; ++j) {
            total += std::abs(row[j]);
        }
        const T floor = static_cast<T>(kEntropyFloor);
        (*floored)[r] = total < floor ? 1 : 0;
        const T s = std::max(total, floor);
        (*denom)[r] = s;
        T h = 0;
        for (std::size_t j = 0; j < width; ++j) {
            const T p = std::abs(row[j]) / s;
            if (p > T(0)) {
                h -= p * std::log(p);
            }
        }
        od[r] = h;
    }
    if (auto* tape = detail::recording_tape<T>({&keys})) {
        tape->record({keys}, out,
                     [ks = keys.storage(), hs = out.storage(), denom, floored, rows, width,
                      mode](std::span<const T> g) {
                         auto gk = ks->grad_buffer();
                         const auto& kv = ks->data;
                         for (std::size_t r = 0; r < rows; ++r) {
                             if (g[r] == T(0)) {
                                 continue;
                             }
                             const T s = (*denom)[r];
                             const T h = hs->data[r];
                             for (std::size_t j = 0; j < width; ++j) {
                                 const T k = kv[r * width + j];
                                 const T a = std::abs(k);
                                 if (a == T(0)) {
                                     continue;
                                 }
                                 const T p = a / s;
                                 // d/da of -sum p ln p; the normalizer is constant when floored.
                                 T da = (*floored)[r] ? -(std::log(p) + T(1)) / s : (-std::log(p) - h) / s;
                                 if (mode == MagnitudeMode::absolute && k < T(0)) {
                                     da = -da;
                                 }
                                 gk[r * width + j] += g[r] * da;
                             }
                         }
                     });
    }
    return out;
}

template <typename T>
Tensor<T> entropy_penalty(const KeyTrace<T>& trace, const SteeringSpec& spec, FfnVariant variant) {
    if (spec.method != SteeringMethod::regularization) {
        throw ConfigError("entropy_penalty: spec method is " + to_string(spec.method) + ", expected regularization");
    }
    if (trace.layers.empty()) {
        throw ShapeError("entropy_penalty: empty key trace");
    }
    const std::size_t n_layers = trace.n_layers();
    const auto [lo, hi] = spec.resolved_range(n_layers);
    if (lo > hi) {
        warn("entropy_penalty: empty layer range, penalty is 0");
        return Tensor<T>::scalar(T(0));
    }
    if (lo < 1 || hi > n_layers) {
        throw ConfigError("entropy_penalty: layer range [" + std::to_string(lo) + ", " + std::to_string(hi) +
                          "] exceeds trace depth " + std::to_string(n_layers));
    }
    const MagnitudeMode mode = spec.mode_for(variant);
    Tensor<T> total;
    for (std::size_t l = lo; l <= hi; ++l) {
        Tensor<T> h = row_entropy(trace.layers[l - 1].keys, mode);
        total = total.defined() ? add(total, h) : h;
    }
    return scale(mean_all(total), static_cast<T>(spec.lambda));
}

template <typename T>
EntropyStats entropy_stats(const KeyTrace<T>& trace, MagnitudeMode mode) {
    EntropyStats stats;
    double all_sum = 0.0;
    double all_sq = 0.0;
    std::size_t all_n = 0;
    for (const auto& layer : trace.layers) {
        const std::size_t rows = layer.keys.dim(0);
        const std::size_t width = layer.keys.dim(1);
        auto kd = layer.keys.data();
        std::vector<double> hs(rows);
        double sum = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            hs[r] = normalized_entropy(kd.subspan(r * width, width), mode).nats;
            sum += hs[r];
        }
        const double m = rows ? sum / static_cast<double>(rows) : 0.0;
        double sq = 0.0;
        for (double h : hs) {
            sq += (h - m) * (h - m);
            all_sum += h;
            all_sq += h * h;
        }
        all_n += rows;
        stats.layer_mean.push_back(m);
        stats.layer_std.push_back(rows ? std::sqrt(sq / static_cast<double>(rows)) : 0.0);
        stats.per_token.push_back(std::move(hs));
    }
    if (all_n > 0) {
        stats.mean = all_sum / static_cast<double>(all_n);
        double sq = 0.0;
        for (const auto& hs : stats.per_token) {
            for (double h : hs) {
                sq += (h - stats.mean) * (h - stats.mean);
            }
        }
        stats.std = std::sqrt(sq / static_cast<double>(all_n));
    }
    return stats;
}

#define INFOSTEER_INSTANTIATE_STEERING(T)                                                                    \
    template std::vector<std::size_t> smallest_indices<T>(std::span<const T>, std::size_t, MagnitudeMode);    \
    template T key_mean<T>(std::span<const T>);                                                              \
    template std::vector<T> intervene_keys<T>(std::span<const T>, double, double, MagnitudeMode);            \
    template Tensor<T> intervene_rows<T>(const Tensor<T>&, double, double, MagnitudeMode, bool);             \
    template EntropyValue normalized_entropy<T>(std::span<const T>, MagnitudeMode);                          \
    template Tensor<T> row_entropy<T>(const Tensor<T>&, MagnitudeMode);                                      \
    template Tensor<T> entropy_penalty<T>(const KeyTrace<T>&, const SteeringSpec&, FfnVariant);              \
    template EntropyStats entropy_stats<T>(const KeyTrace<T>&, MagnitudeMode);

INFOSTEER_INSTANTIATE_STEERING(float)
INFOSTEER_INSTANTIATE_STEERING(double)

}  // namespace infosteer
