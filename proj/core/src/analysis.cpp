#include <algorithm>
#include <cmath>

#include "infosteer/analysis.hpp"
#include "infosteer/error.hpp"
#include "infosteer/tokenizer.hpp"

namespace infosteer {

std::string to_string(KeyRegion region) {
    switch (region) {
        case KeyRegion::low:
            return "low";
        case KeyRegion::medium:
            return "medium";
        case KeyRegion::high:
            return "high";
    }
    return "unknown";
}

void RegionThresholds::validate() const {
    if (!std::isfinite(low_medium) || !std::isfinite(medium_high) || !(low_medium < medium_high)) {
        throw ConfigError("histogram thresholds must be finite and strictly increasing, got (" +
                          std::to_string(low_medium) + ", " + std::to_string(medium_high) + ")");
    }
}

std::array<double, 3> KeyHistogram::shares() const {
    std::array<double, 3> s{};
    if (total == 0) {
        return s;
    }
    for (std::size_t r = 0; r < 3; ++r) {
        s[r] = static_cast<double>(counts[r]) / static_cast<double>(total);
    }
    return s;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) {
        throw DataError("percentile of an empty set");
    }
    if (!(q >= 0.0 && q <= 100.0)) {
        throw DomainError("percentile: q must lie in [0, 100]");
    }
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

template <typename T>
std::vector<double> key_magnitudes(std::span<const KeyTrace<T>> traces, MagnitudeMode mode) {
    if (traces.empty()) {
        throw DataError("key histogram: no traces");
    }
    std::vector<double> out;
    for (const auto& trace : traces) {
        for (const auto& layer : trace.layers) {
            for (T k : layer.keys.data()) {
                if (mode == MagnitudeMode::signed_values && k < T(0)) {
                    throw DomainError("key histogram: negative key in signed magnitude mode; use absolute");
                }
                out.push_back(std::abs(static_cast<double>(k)));
            }
        }
    }
    if (out.empty()) {
        throw DataError("key histogram: traces hold no keys");
    }
    return out;
}

template <typename T>
RegionThresholds default_thresholds(std::span<const KeyTrace<T>> traces, MagnitudeMode mode) {
    std::vector<double> mags = key_magnitudes(traces, mode);
    RegionThresholds t{percentile(mags, 100.0 / 3.0), percentile(mags, 200.0 / 3.0)};
    if (!(t.low_medium > 0.0 && t.low_medium < t.medium_high)) {
        std::vector<double> nonzero;
        std::copy_if(mags.begin(), mags.end(), std::back_inserter(nonzero), [](double v) { return v > 0.0; });
        if (nonzero.size() >= 2) {
            t = {percentile(nonzero, 100.0 / 3.0), percentile(nonzero, 200.0 / 3.0)};
        }
    }
    if (!(t.low_medium < t.medium_high)) {
        throw DataError("key histogram: key magnitudes are too concentrated to define three regions");
    }
    return t;
}

template <typename T>
KeyHistogram key_histogram(std::span<const KeyTrace<T>> traces, const RegionThresholds& thresholds,
                           MagnitudeMode mode) {
    thresholds.validate();
    KeyHistogram h;
    h.thresholds = thresholds;
    for (double x : key_magnitudes(traces, mode)) {
        const std::size_t region = x < thresholds.low_medium ? 0 : (x < thresholds.medium_high ? 1 : 2);
        ++h.counts[region];
        ++h.total;
    }
    return h;
}

DistributionShift distribution_shift(const KeyHistogram& base, const KeyHistogram& tuned) {
    if (!(base.thresholds == tuned.thresholds)) {
        throw DataError("distribution_shift: histograms use different thresholds");
    }
    if (base.total == 0 || tuned.total == 0) {
        throw DataError("distribution_shift: empty histogram");
    }
    DistributionShift s;
    s.thresholds = base.thresholds;
    s.base_shares = base.shares();
    s.tuned_shares = tuned.shares();
    for (std::size_t r = 0; r < 3; ++r) {
        s.delta[r] = s.tuned_shares[r] - s.base_shares[r];
        s.sign[r] = s.delta[r] > 0.0 ? 1 : (s.delta[r] < 0.0 ? -1 : 0);
    }
    return s;
}

std::string to_string(IfAggregation aggregation) {
    switch (aggregation) {
        case IfAggregation::mean:
            return "mean";
        case IfAggregation::max:
            return "max";
        case IfAggregation::sum:
            return "sum";
    }
    return "unknown";
}

std::string to_string(IfBucket bucket) {
    switch (bucket) {
        case IfBucket::low:
            return "low";
        case IfBucket::medium:
            return "medium";
        case IfBucket::high:
            return "high";
    }
    return "unknown";
}

IfAggregation parse_if_aggregation(const std::string& text) {
    for (auto a : {IfAggregation::mean, IfAggregation::max, IfAggregation::sum}) {
        if (text == to_string(a)) {
            return a;
        }
    }
    throw ConfigError("unknown IF aggregation '" + text + "' (expected mean, max or sum)");
}

IfBucket parse_if_bucket(const std::string& text) {
    for (auto b : {IfBucket::low, IfBucket::medium, IfBucket::high}) {
        if (text == to_string(b)) {
            return b;
        }
    }
    throw DataError("unknown IF bucket '" + text + "'");
}

template <typename T>
double if_score(const KeyTrace<T>& trace, std::size_t row, MagnitudeMode mode, IfAggregation aggregation) {
    if (trace.layers.empty()) {
        throw DataError("if_score: empty key trace");
    }
    if (row >= trace.positions()) {
        throw ShapeError("if_score: row " + std::to_string(row) + " outside trace of " +
                         std::to_string(trace.positions()) + " positions");
    }
    double total = 0.0;
    double top = 0.0;
    for (const auto& layer : trace.layers) {
        const std::size_t width = layer.keys.dim(1);
        const double h = normalized_entropy(layer.keys.data().subspan(row * width, width), mode).nats;
        total += h;
        top = std::max(top, h);
    }
    switch (aggregation) {
        case IfAggregation::mean:
            return total / static_cast<double>(trace.layers.size());
        case IfAggregation::max:
            return top;
        case IfAggregation::sum:
            return total;
    }
    return total;
}

BucketAssignment assign_buckets(std::span<const double> scores) {
    if (scores.empty()) {
        throw DataError("assign_buckets: no scores");
    }
    BucketAssignment out;
    const std::vector<double> values(scores.begin(), scores.end());
    out.q33 = percentile(values, 100.0 / 3.0);
    out.q66 = percentile(values, 200.0 / 3.0);
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    out.degenerate = *lo == *hi;
    for (double s : scores) {
        out.buckets.push_back(s < out.q33 ? IfBucket::low : (s > out.q66 ? IfBucket::high : IfBucket::medium));
    }
    return out;
}

template <typename T>
TokenIFReport if_scores(const Transformer<T>& model, const std::string& prompt, const IfOptions& options) {
    const ByteTokenizer tokenizer(model.config().vocab_size);
    const std::vector<int> prefix = tokenizer.encode_prompt(prompt);
    if (prefix.size() >= model.config().max_seq_len) {
        throw DataError("analyze if: prompt of " + std::to_string(prefix.size()) +
                        " tokens leaves no room within max_seq_len " + std::to_string(model.config().max_seq_len));
    }
    const std::vector<int> generated = greedy_generate(model, prefix, options.max_new_tokens, options.steering);
    if (generated.empty()) {
        throw DataError("analyze if: empty generation");
    }
    std::vector<int> full = prefix;
    full.insert(full.end(), generated.begin(), generated.end());
    const ForwardResult<T> res = model.forward(std::span<const int>(full), options.steering);
    const MagnitudeMode mode = options.magnitude_mode.value_or(default_magnitude_mode(model.config().ffn_variant));

    TokenIFReport report;
    report.prompt = prompt;
    report.aggregation = options.aggregation;
    report.width = model.config().d_m;
    std::vector<double> scores;
    for (std::size_t i = 0; i < generated.size(); ++i) {
        const std::size_t row = prefix.size() + i - 1;
        TokenIF tok;
        tok.token_id = generated[i];
        tok.text = display_token(generated[i]);
        tok.score = if_score(res.trace, row, mode, options.aggregation);
        scores.push_back(tok.score);
        report.tokens.push_back(std::move(tok));
    }
    const BucketAssignment b = assign_buckets(scores);
    report.q33 = b.q33;
    report.q66 = b.q66;
    report.degenerate = b.degenerate;
    double total = 0.0;
    report.min = scores.front();
    report.max = scores.front();
    for (std::size_t i = 0; i < scores.size(); ++i) {
        report.tokens[i].bucket = b.buckets[i];
        total += scores[i];
        report.min = std::min(report.min, scores[i]);
        report.max = std::max(report.max, scores[i]);
    }
    report.mean = total / static_cast<double>(scores.size());
    return report;
}

#define INFOSTEER_INSTANTIATE_ANALYSIS(T)                                                                    \
    template std::vector<double> key_magnitudes<T>(std::span<const KeyTrace<T>>, MagnitudeMode);             \
    template RegionThresholds default_thresholds<T>(std::span<const KeyTrace<T>>, MagnitudeMode);            \
    template KeyHistogram key_histogram<T>(std::span<const KeyTrace<T>>, const RegionThresholds&,            \
                                           MagnitudeMode);                                                   \
    template double if_score<T>(const KeyTrace<T>&, std::size_t, MagnitudeMode, IfAggregation);             \
    template TokenIFReport if_scores<T>(const Transformer<T>&, const std::string&, const IfOptions&);

INFOSTEER_INSTANTIATE_ANALYSIS(float)
INFOSTEER_INSTANTIATE_ANALYSIS(double)

}  // namespace infosteer
