#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "infosteer/analysis.hpp"
#include "infosteer/checkpoint.hpp"
#include "infosteer/error.hpp"
#include "infosteer/harness.hpp"
#include "infosteer/rng.hpp"
#include "test_support.hpp"

using namespace infosteer;
using Td = Tensor<double>;

namespace {

KeyTrace<double> trace_of(const std::vector<std::vector<double>>& layers, std::size_t rows = 1) {
    KeyTrace<double> t;
    for (const auto& keys : layers) {
        LayerKeys<double> lk;
        lk.keys = Td({rows, keys.size() / rows}, keys);
        t.layers.push_back(lk);
    }
    return t;
}

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.vocab_size = 259;
    cfg.d = 16;
    cfg.d_m = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.max_seq_len = 48;
    return cfg;
}

TokenIFReport three_token_report() {
    TokenIFReport r;
    r.prompt = "a<b";
    r.tokens = {{97, "a", 0.1234567, IfBucket::low}, {44, ",", 1.5, IfBucket::medium}, {120, "x\"y", 2.75, IfBucket::high}};
    r.q33 = 0.5;
    r.q66 = 2.0;
    r.width = 16;
    r.mean = (0.1234567 + 1.5 + 2.75) / 3;
    r.min = 0.1234567;
    r.max = 2.75;
    return r;
}

TrainConfig toy_train(const std::filesystem::path& dir, std::size_t steps) {
    TrainConfig c;
    c.model = tiny_model();
    c.train_data = testing::data_path("copy.jsonl");
    c.learning_rate = 3e-3;
    c.warmup_steps = 20;
    c.max_seq_len = 48;
    c.batch_size = 8;
    c.steps = steps;
    c.seed = 3;
    c.precision = Precision::f32;
    c.checkpoint_dir = dir;
    return c;
}

std::vector<KeyTrace<float>> traces_over(const Transformer<float>& model, const std::vector<ExampleRecord>& data,
                                         const std::vector<SteeringSpec>& steering) {
    std::vector<KeyTrace<float>> out;
    for (const auto& seq : example_sequences(data, ByteTokenizer(model.config().vocab_size), model.config().max_seq_len)) {
        out.push_back(model.forward(std::span<const int>(seq), steering).trace);
    }
    return out;
}

}  // namespace

TEST_CASE("key histogram examples") {
    SUBCASE("all keys equal") {
        const std::vector<KeyTrace<double>> traces{trace_of({{0.5, 0.5, 0.5, 0.5}}, 2)};
        const auto h = key_histogram<double>(traces, {0.1, 0.2}, MagnitudeMode::signed_values);
        CHECK(h.total == 4);
        CHECK(h.counts == std::array<std::size_t, 3>{0, 0, 4});
        CHECK(h.shares()[2] == 1.0);
    }
    SUBCASE("uniform keys split into thirds") {
        Rng rng(10);
        std::vector<double> keys(30000);
        for (auto& k : keys) {
            k = rng.uniform(0, 1);
        }
        const std::vector<KeyTrace<double>> traces{trace_of({keys}, 100)};
        const auto h = key_histogram<double>(traces, {1.0 / 3, 2.0 / 3}, MagnitudeMode::signed_values);
        // Binomial std of one share is about 0.0027 at n = 30000.
        for (double s : h.shares()) {
            CHECK(std::abs(s - 1.0 / 3) < 0.015);
        }
        CHECK(h.counts[0] + h.counts[1] + h.counts[2] == h.total);
    }
    SUBCASE("region edges") {
        const std::vector<KeyTrace<double>> traces{trace_of({{0.0, 1.0, 1.999, 2.0}})};
        const auto h = key_histogram<double>(traces, {1.0, 2.0}, MagnitudeMode::signed_values);
        CHECK(h.counts == std::array<std::size_t, 3>{1, 2, 1});
    }
    SUBCASE("absolute mode counts |k|") {
        const std::vector<KeyTrace<double>> traces{trace_of({{-3.0, 0.5, -0.1}})};
        const auto h = key_histogram<double>(traces, {0.2, 1.0}, MagnitudeMode::absolute);
        CHECK(h.counts == std::array<std::size_t, 3>{1, 1, 1});
        CHECK_THROWS_AS(key_histogram<double>(traces, {0.2, 1.0}, MagnitudeMode::signed_values), DomainError);
    }
    SUBCASE("errors") {
        const std::vector<KeyTrace<double>> traces{trace_of({{1.0, 2.0}})};
        CHECK_THROWS_AS(key_histogram<double>(traces, {1.0, 1.0}, MagnitudeMode::signed_values), ConfigError);
        CHECK_THROWS_AS(key_histogram<double>(traces, {2.0, 1.0}, MagnitudeMode::signed_values), ConfigError);
        CHECK_THROWS_AS(key_histogram<double>(std::span<const KeyTrace<double>>{}, {0.0, 1.0},
                                              MagnitudeMode::signed_values),
                        DataError);
    }
}

TEST_CASE("percentiles and default thresholds") {
    CHECK(percentile({3, 1, 2}, 50) == 2.0);
    CHECK(percentile({1, 2, 3, 4}, 100.0 / 3.0) == doctest::Approx(2.0));
    CHECK(percentile({5}, 66) == 5.0);
    CHECK_THROWS_AS(percentile({}, 50), DataError);
    CHECK_THROWS_AS(percentile({1}, 101), DomainError);

    // Half the keys are dead relu units; cut points come from the live ones.
    const std::vector<KeyTrace<double>> traces{trace_of({{0, 0, 0, 0, 0, 0, 0, 1, 2, 3}})};
    const auto t = default_thresholds<double>(traces, MagnitudeMode::signed_values);
    CHECK(t.low_medium < t.medium_high);
    CHECK(t.low_medium == doctest::Approx(percentile({1, 2, 3}, 100.0 / 3)));
    const std::vector<KeyTrace<double>> flat{trace_of({{1, 1, 1}})};
    CHECK_THROWS_AS(default_thresholds<double>(flat, MagnitudeMode::signed_values), DataError);
}

TEST_CASE("distribution shift") {
    KeyHistogram a;
    a.thresholds = {0.1, 0.2};
    a.counts = {5, 3, 2};
    a.total = 10;
    SUBCASE("base equals tuned") {
        const auto s = distribution_shift(a, a);
        CHECK(s.delta == std::array<double, 3>{0, 0, 0});
        CHECK(s.sign == std::array<int, 3>{0, 0, 0});
    }
    SUBCASE("mismatched thresholds") {
        KeyHistogram b = a;
        b.thresholds.medium_high = 0.3;
        CHECK_THROWS_AS(distribution_shift(a, b), DataError);
    }
    SUBCASE("random histograms have zero-sum deltas") {
        Rng rng(12);
        for (int trial = 0; trial < 1000; ++trial) {
            KeyHistogram b = a, c = a;
            b.counts = {rng.below(1000), rng.below(1000), rng.below(1000) + 1};
            c.counts = {rng.below(1000), rng.below(1000), rng.below(1000) + 1};
            b.total = b.counts[0] + b.counts[1] + b.counts[2];
            c.total = c.counts[0] + c.counts[1] + c.counts[2];
            const auto s = distribution_shift(b, c);
            REQUIRE(std::abs(s.delta[0] + s.delta[1] + s.delta[2]) <= 1e-9);
            for (std::size_t r = 0; r < 3; ++r) {
                REQUIRE(s.sign[r] == (s.delta[r] > 0 ? 1 : (s.delta[r] < 0 ? -1 : 0)));
            }
        }
    }
}

TEST_CASE("IF score of hand traces") {
    SUBCASE("uniform keys") {
        const auto t = trace_of({std::vector<double>(8, 0.3), std::vector<double>(8, 2.0)});
        CHECK(if_score(t, 0, MagnitudeMode::signed_values) == doctest::Approx(std::log(8.0)).epsilon(1e-14));
    }
    SUBCASE("single layer equals its entropy") {
        const std::vector<double> keys{0.1, 0.7, 0.0, 2.0};
        const auto t = trace_of({keys});
        CHECK(if_score(t, 0, MagnitudeMode::signed_values) ==
              normalized_entropy<double>(keys, MagnitudeMode::signed_values).nats);
    }
    SUBCASE("two layers") {
        // Shares (0.75, 0.25) have entropy 0.5623; the second layer is uniform over two.
        const auto t = trace_of({{3.0, 1.0}, {1.0, 1.0}});
        const double h1 = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
        CHECK(h1 == doctest::Approx(0.5623).epsilon(1e-4));
        const double expect = (h1 + std::log(2.0)) / 2;
        CHECK(if_score(t, 0, MagnitudeMode::signed_values) == doctest::Approx(expect).epsilon(1e-14));
        CHECK(if_score(t, 0, MagnitudeMode::signed_values) == doctest::Approx(0.6280).epsilon(1e-3));
        CHECK(if_score(t, 0, MagnitudeMode::signed_values, IfAggregation::max) ==
              doctest::Approx(std::log(2.0)).epsilon(1e-14));
        CHECK(if_score(t, 0, MagnitudeMode::signed_values, IfAggregation::sum) ==
              doctest::Approx(h1 + std::log(2.0)).epsilon(1e-14));
    }
    SUBCASE("row selection and errors") {
        const auto t = trace_of({{1, 1, 5, 0}}, 2);
        CHECK(if_score(t, 0, MagnitudeMode::signed_values) == doctest::Approx(std::log(2.0)));
        CHECK(if_score(t, 1, MagnitudeMode::signed_values) == 0.0);
        CHECK_THROWS_AS(if_score(t, 2, MagnitudeMode::signed_values), ShapeError);
        CHECK_THROWS_AS(if_score(KeyTrace<double>{}, 0, MagnitudeMode::signed_values), DataError);
    }
    CHECK(parse_if_aggregation("max") == IfAggregation::max);
    CHECK_THROWS_AS(parse_if_aggregation("median"), ConfigError);
}

TEST_CASE("bucket assignment") {
    const std::vector<double> scores{0.1, 0.5, 0.9, 0.2, 0.8, 0.4};
    const auto b = assign_buckets(scores);
    CHECK_FALSE(b.degenerate);
    REQUIRE(b.buckets.size() == scores.size());
    CHECK(b.q33 == percentile(scores, 100.0 / 3));
    CHECK(b.q66 == percentile(scores, 200.0 / 3));
    std::set<IfBucket> seen(b.buckets.begin(), b.buckets.end());
    CHECK(seen.size() == 3);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const IfBucket expect =
            scores[i] < b.q33 ? IfBucket::low : (scores[i] > b.q66 ? IfBucket::high : IfBucket::medium);
        CHECK(b.buckets[i] == expect);
    }
    const std::vector<double> flat(5, 1.25);
    const auto d = assign_buckets(flat);
    CHECK(d.degenerate);
    for (auto x : d.buckets) {
        CHECK(x == IfBucket::medium);
    }
    CHECK_THROWS_AS(assign_buckets(std::vector<double>{}), DataError);
}

TEST_CASE("report rendering") {
    const auto r = three_token_report();
    SUBCASE("html has three highlight classes and a legend") {
        const std::string html = render_report(r, ReportFormat::html);
        std::set<std::string> classes;
        for (std::size_t at = html.find("<span class=\"if-"); at != std::string::npos;
             at = html.find("<span class=\"if-", at + 1)) {
            const auto start = at + 13;
            classes.insert(html.substr(start, html.find('"', start) - start));
        }
        CHECK(classes == std::set<std::string>{"if-low", "if-medium", "if-high"});
        CHECK(html.find("class=\"legend\"") != std::string::npos);
        CHECK(html.find("a&lt;b") != std::string::npos);
        CHECK(html.find("<script") == std::string::npos);
        CHECK(html.find("http") == std::string::npos);
        CHECK(html == render_report(r, ReportFormat::html));
    }
    SUBCASE("csv round trip") {
        const std::string csv = render_report(r, ReportFormat::csv);
        CHECK(csv.rfind("token,if_nats,bucket\n", 0) == 0);
        const auto back = parse_csv_report(csv);
        REQUIRE(back.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(back[i].text == r.tokens[i].text);
            CHECK(back[i].bucket == r.tokens[i].bucket);
            CHECK(back[i].score == doctest::Approx(r.tokens[i].score).epsilon(1e-6));
        }
        CHECK(csv == render_report(r, ReportFormat::csv));
    }
    SUBCASE("files") {
        testing::TempDir dir("report");
        write_report(r, ReportFormat::html, dir / "r.html");
        CHECK(testing::read_text(dir / "r.html") == render_report(r, ReportFormat::html));
        CHECK_THROWS_AS(write_report(r, ReportFormat::csv, dir / "missing" / "r.csv"), IoError);
        TokenIFReport empty;
        CHECK_THROWS_AS(render_report(empty, ReportFormat::csv), DataError);
    }
    SUBCASE("display tokens") {
        CHECK(display_token('a') == "a");
        CHECK(display_token('\n') != "\n");
        CHECK(display_token(ByteTokenizer::kEos) != display_token(ByteTokenizer::kBos));
    }
    CHECK(parse_report_format("html") == ReportFormat::html);
    CHECK_THROWS_AS(parse_report_format("pdf"), ConfigError);
}

TEST_CASE("IF scores on a fresh model") {
    Transformer<double> model(tiny_model(), 4);
    IfOptions opt;
    opt.max_new_tokens = 12;
    const auto r = if_scores(model, "abc", opt);
    REQUIRE_FALSE(r.tokens.empty());
    CHECK(r.tokens.size() <= 12);
    CHECK(r.width == 32);
    for (const auto& t : r.tokens) {
        CHECK(t.score >= 0.0);
        CHECK(t.score <= std::log(32.0) + 1e-12);
    }
    std::vector<double> scores;
    for (const auto& t : r.tokens) {
        scores.push_back(t.score);
    }
    const auto b = assign_buckets(scores);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        CHECK(r.tokens[i].bucket == b.buckets[i]);
    }
    CHECK(r.q33 == b.q33);
    // The score of each token comes from the position that produced it.
    const ByteTokenizer tok(259);
    std::vector<int> full = tok.encode_prompt("abc");
    const std::size_t prefix = full.size();
    for (const auto& t : r.tokens) {
        full.push_back(t.token_id);
    }
    const auto out = model.forward(std::span<const int>(full));
    CHECK(r.tokens[1].score == if_score(out.trace, prefix, MagnitudeMode::signed_values));

    CHECK(render_report(if_scores(model, "abc", opt), ReportFormat::html) == render_report(r, ReportFormat::html));

    opt.max_new_tokens = 0;
    CHECK_THROWS_AS(if_scores(model, "abc", opt), DataError);
    CHECK_THROWS_AS(if_scores(model, std::string(60, 'x')), DataError);
}

TEST_CASE("uniform keys give ln d_m and a degenerate bucketing") {
    Transformer<double> model(tiny_model(), 5);
    for (const auto& nt : model.named_parameters()) {
        auto t = nt.tensor;
        if (nt.name.find("ffn.w_up") != std::string::npos) {
            for (auto& x : t.mutable_data()) {
                x = 0.0;
            }
        } else if (nt.name.find("ffn.b1") != std::string::npos) {
            for (auto& x : t.mutable_data()) {
                x = 1.0;
            }
        }
    }
    IfOptions opt;
    opt.max_new_tokens = 6;
    const auto r = if_scores(model, "hi", opt);
    CHECK(r.degenerate);
    for (const auto& t : r.tokens) {
        CHECK(t.score == doctest::Approx(std::log(32.0)).epsilon(1e-14));
        CHECK(t.bucket == IfBucket::medium);
    }
    CHECK(render_report(r, ReportFormat::html).find("degenerate") != std::string::npos);
}

TEST_CASE("toy fine-tuning shifts the key distribution") {
    testing::TempDir dir("shift");
    const auto data = load_dataset(testing::data_path("copy_small.jsonl"));

    train(toy_train(dir / "base", 150));
    auto vanilla_cfg = toy_train(dir / "vanilla", 100);
    vanilla_cfg.init_checkpoint = dir / "base";
    train(vanilla_cfg);

    auto steered_cfg = toy_train(dir / "steered", 100);
    steered_cfg.init_checkpoint = dir / "base";
    SteeringSpec spec;
    spec.method = SteeringMethod::intervention;
    spec.p_percent = 10;
    steered_cfg.steering = {spec};
    train(steered_cfg);

    const auto base = load_checkpoint<float>(dir / "base");
    const auto vanilla = load_checkpoint<float>(dir / "vanilla");
    const auto steered = load_checkpoint<float>(dir / "steered");
    const auto base_traces = traces_over(base.model, data, {});
    const auto th = default_thresholds<float>(base_traces, MagnitudeMode::signed_values);
    const auto hb = key_histogram<float>(base_traces, th, MagnitudeMode::signed_values);

    const auto ht =
        key_histogram<float>(traces_over(steered.model, data, steered.state.steering), th, MagnitudeMode::signed_values);
    const auto shift = distribution_shift(hb, ht);
    MESSAGE("intervention low-region delta " << shift.delta[0]);
    CHECK(shift.delta[0] < 0.0);

    const auto hv = key_histogram<float>(traces_over(vanilla.model, data, {}), th, MagnitudeMode::signed_values);
    const auto vshift = distribution_shift(hb, hv);
    MESSAGE("vanilla low-region delta " << vshift.delta[0]);
    WARN(vshift.delta[0] > 0.0);
}
