#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "infosteer/key_trace.hpp"
#include "infosteer/model.hpp"
#include "infosteer/steering.hpp"

namespace infosteer {

// ---------------------------------------------------------------------------
// Key-coefficient histograms
// ---------------------------------------------------------------------------

enum class KeyRegion { low = 0, medium = 1, high = 2 };

std::string to_string(KeyRegion region);

/// low: x < low_medium; medium: low_medium <= x < medium_high; high: x >= medium_high.
struct RegionThresholds {
    double low_medium = 0.0;
    double medium_high = 0.0;

    void validate() const;
    bool operator==(const RegionThresholds&) const = default;
};

struct KeyHistogram {
    RegionThresholds thresholds;
    std::array<std::size_t, 3> counts{};
    std::size_t total = 0;
    std::string model_id;
    std::string dataset_id;
    std::string steering;

    std::array<double, 3> shares() const;
};

/// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

/// Magnitudes counted by the histogram: k in signed mode, |k| in absolute mode.
template <typename T>
std::vector<double> key_magnitudes(std::span<const KeyTrace<T>> traces, MagnitudeMode mode);

/// 33rd/66th percentiles of the key magnitudes. Falls back to the nonzero
/// magnitudes when the low cut is 0 or the cut points coincide (dead relu
/// units would otherwise leave the low region empty).
template <typename T>
RegionThresholds default_thresholds(std::span<const KeyTrace<T>> traces, MagnitudeMode mode);

template <typename T>
KeyHistogram key_histogram(std::span<const KeyTrace<T>> traces, const RegionThresholds& thresholds,
                           MagnitudeMode mode);

struct DistributionShift {
    RegionThresholds thresholds;
    std::array<double, 3> base_shares{};
    std::array<double, 3> tuned_shares{};
    std::array<double, 3> delta{};  // tuned - base
    std::array<int, 3> sign{};      // -1, 0, +1 per region
};

DistributionShift distribution_shift(const KeyHistogram& base, const KeyHistogram& tuned);

// ---------------------------------------------------------------------------
// Information Flux
// ---------------------------------------------------------------------------

enum class IfAggregation { mean, max, sum };
enum class IfBucket { low = 0, medium = 1, high = 2 };

std::string to_string(IfAggregation aggregation);
std::string to_string(IfBucket bucket);
IfAggregation parse_if_aggregation(const std::string& text);
IfBucket parse_if_bucket(const std::string& text);

struct TokenIF {
    int token_id = 0;
    std::string text;  // display form
    double score = 0.0;
    IfBucket bucket = IfBucket::medium;
};

struct TokenIFReport {
    std::string prompt;
    std::vector<TokenIF> tokens;
    double q33 = 0.0;
    double q66 = 0.0;
    bool degenerate = false;  // every score equal, all tokens share one bucket
    IfAggregation aggregation = IfAggregation::mean;
    std::size_t width = 0;    // d_m
    double mean = 0.0;
    double min = 0.0;
    double max = 0.0;
};

/// Per-layer normalized entropies of one trace row, aggregated across layers.
template <typename T>
double if_score(const KeyTrace<T>& trace, std::size_t row, MagnitudeMode mode,
                IfAggregation aggregation = IfAggregation::mean);

struct BucketAssignment {
    double q33 = 0.0;
    double q66 = 0.0;
    bool degenerate = false;
    std::vector<IfBucket> buckets;
};

/// low below the 33rd percentile, high above the 66th, medium otherwise.
BucketAssignment assign_buckets(std::span<const double> scores);

struct IfOptions {
    std::size_t max_new_tokens = 256;
    IfAggregation aggregation = IfAggregation::mean;
    std::optional<MagnitudeMode> magnitude_mode;
    std::vector<SteeringSpec> steering;  // applied to generation and scoring when nonempty
};

/// Greedy continuation of the prompt; each generated token is scored with
/// the keys of the position that produced it.
template <typename T>
TokenIFReport if_scores(const Transformer<T>& model, const std::string& prompt, const IfOptions& options = {});

/// Printable form of a token: ASCII as-is, escapes for control and high bytes.
std::string display_token(int id);

enum class ReportFormat { csv, html };

std::string to_string(ReportFormat format);
ReportFormat parse_report_format(const std::string& text);

std::string render_report(const TokenIFReport& report, ReportFormat format);
void write_report(const TokenIFReport& report, ReportFormat format, const std::filesystem::path& path);

/// Reads back the token, if_nats and bucket columns of a CSV report.
std::vector<TokenIF> parse_csv_report(const std::string& csv);

}  // namespace infosteer
