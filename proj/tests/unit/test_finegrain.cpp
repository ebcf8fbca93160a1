#include <doctest.h>

#include <cmath>
#include <memory>
#include <numeric>
#include <set>
#include <vector>

#include "infosteer/error.hpp"
#include "infosteer/finegrain.hpp"
#include "infosteer/model.hpp"
#include "infosteer/rng.hpp"
#include "infosteer/steering.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace infosteer;
using Td = Tensor<double>;

namespace {

FeatureMatrix features_of(const testing::Rows& rows) {
    FeatureMatrix f;
    f.rows = rows.size();
    f.cols = rows.empty() ? 0 : rows.front().size();
    for (const auto& r : rows) {
        f.data.insert(f.data.end(), r.begin(), r.end());
    }
    return f;
}

testing::Rows random_rows(Rng& rng, std::size_t n, std::size_t d) {
    testing::Rows rows(n, std::vector<double>(d));
    for (auto& r : rows) {
        for (auto& x : r) {
            x = rng.uniform(-1, 1);
        }
    }
    return rows;
}

void check_partition(const ClusterAssignment& a, std::size_t n) {
    REQUIRE(a.group.size() == n);
    CHECK_NOTHROW(a.validate());
    std::size_t covered = 0;
    for (std::size_t g = 0; g < a.group_count; ++g) {
        covered += a.members(g).size();
    }
    CHECK(covered == n);
}

double softmax_entropy_ref(const std::vector<double>& z) {
    double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) {
        s += std::exp(v - mx);
    }
    double h = 0.0;
    for (double v : z) {
        const double p = std::exp(v - mx) / s;
        if (p > 0) {
            h -= p * std::log(p);
        }
    }
    return h;
}

ModelConfig small_model() {
    ModelConfig cfg;
    cfg.vocab_size = 30;
    cfg.d = 8;
    cfg.d_m = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.max_seq_len = 10;
    return cfg;
}

}  // namespace

TEST_CASE("cosine distance conventions") {
    const std::vector<double> a{1, 0}, b{0, 2}, z{0, 0};
    CHECK(cosine_distance(a, a) == doctest::Approx(0.0));
    CHECK(cosine_distance(a, b) == doctest::Approx(1.0));
    CHECK(cosine_distance(z, z) == 0.0);
    CHECK(cosine_distance(z, a) == 1.0);
    CHECK(cosine_distance(a, std::vector<double>{-3, 0}) == doctest::Approx(2.0));
}

TEST_CASE("semantic clustering examples") {
    SUBCASE("G = 1") {
        Rng rng(1);
        const auto fit = semantic_clusters(features_of(random_rows(rng, 9, 4)), 1);
        check_partition(fit.assignment, 9);
        CHECK(fit.assignment.group_count == 1);
        for (auto g : fit.assignment.group) {
            CHECK(g == 0);
        }
    }
    SUBCASE("four vectors, two groups") {
        const testing::Rows rows{{1, 0}, {0.99, 0.14}, {0, 1}, {0.14, 0.99}};
        const auto fit = semantic_clusters(features_of(rows), 2);
        const auto& g = fit.assignment.group;
        CHECK(g[0] == g[1]);
        CHECK(g[2] == g[3]);
        CHECK(g[0] != g[2]);
        const auto brute = testing::brute_force_partition(rows, 2);
        CHECK(testing::same_partition(brute.label, g));
        CHECK(fit.objective == doctest::Approx(brute.objective).epsilon(1e-12));
    }
    SUBCASE("G > d_m") {
        Rng rng(2);
        CHECK_THROWS_AS(semantic_clusters(features_of(random_rows(rng, 3, 4)), 4), ConfigError);
        CHECK_THROWS_AS(semantic_clusters(features_of(random_rows(rng, 3, 4)), 0), ConfigError);
    }
}

TEST_CASE("duplicated rows always co-cluster") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        Rng rng(seed);
        const std::size_t n = 6 + rng.below(10);
        auto rows = random_rows(rng, n, 3 + rng.below(4));
        const std::size_t i = rng.below(n);
        std::size_t j = rng.below(n);
        if (j == i) {
            j = (i + 1) % n;
        }
        rows[j] = rows[i];
        const std::size_t groups = 2 + rng.below(3);
        ClusterOptions opt;
        opt.seed = seed;
        const auto fit = semantic_clusters(features_of(rows), groups, opt);
        INFO("seed " << seed);
        CHECK(fit.assignment.group[i] == fit.assignment.group[j]);
    }
}

TEST_CASE("clustering is a deterministic partition with non-increasing objective") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Rng rng(seed * 13 + 1);
        const std::size_t n = 4 + rng.below(30);
        const auto rows = random_rows(rng, n, 2 + rng.below(6));
        const std::size_t groups = 1 + rng.below(std::min<std::size_t>(n, 6));
        ClusterOptions opt;
        opt.seed = seed;
        const auto a = semantic_clusters(features_of(rows), groups, opt);
        const auto b = semantic_clusters(features_of(rows), groups, opt);
        check_partition(a.assignment, n);
        CHECK(a.assignment.group == b.assignment.group);
        CHECK(a.objective == b.objective);
        CHECK(a.assignment.group_count == groups);
        CHECK(a.objective == doctest::Approx(testing::oracle_objective(rows, a.assignment.group, groups)).epsilon(1e-12));
        for (std::size_t k = 1; k < a.objective_history.size(); ++k) {
            CHECK(a.objective_history[k] <= a.objective_history[k - 1] + 1e-12);
        }
        CHECK(a.medoids.size() == groups);
        // Canonical numbering: group ids appear in order of their smallest member.
        std::size_t next = 0;
        std::set<std::size_t> seen;
        for (auto g : a.assignment.group) {
            if (seen.insert(g).second) {
                CHECK(g == next);
                ++next;
            }
        }
    }
}

TEST_CASE("clustering reaches the brute-force optimum on small instances") {
    std::size_t hits = 0;
    const std::size_t total = 30;
    for (std::uint64_t seed = 0; seed < total; ++seed) {
        Rng rng(seed + 500);
        const std::size_t n = 3 + rng.below(6);
        const std::size_t groups = 1 + rng.below(3);
        const auto rows = random_rows(rng, n, 2 + rng.below(4));
        ClusterOptions opt;
        opt.seed = seed;
        const auto fit = semantic_clusters(features_of(rows), std::min(groups, n), opt);
        const auto brute = testing::brute_force_partition(rows, std::min(groups, n));
        CHECK(fit.objective >= brute.objective - 1e-12);
        if (std::abs(fit.objective - brute.objective) <= 1e-9) {
            ++hits;
        }
    }
    CHECK(hits >= 27);
}

TEST_CASE("zero rows go to the residual group") {
    const testing::Rows rows{{1, 0}, {0, 0}, {0.9, 0.1}, {0, 1}, {0, 0}, {0.1, 1}};
    const auto fit = semantic_clusters(features_of(rows), 2);
    check_partition(fit.assignment, 6);
    REQUIRE(fit.assignment.residual.has_value());
    const std::size_t r = *fit.assignment.residual;
    CHECK(fit.assignment.group_count == 3);
    CHECK(fit.assignment.group[1] == r);
    CHECK(fit.assignment.group[4] == r);
    CHECK(fit.assignment.members(r) == std::vector<std::size_t>{1, 4});
    CHECK(fit.assignment.group[0] == fit.assignment.group[2]);
    CHECK(fit.assignment.group[3] == fit.assignment.group[5]);
}

TEST_CASE("partition objective") {
    const testing::Rows rows{{1, 0}, {0, 1}, {1, 1}};
    const std::vector<std::size_t> one{0, 0, 0};
    CHECK(partition_objective(features_of(rows), one, 1) ==
          doctest::Approx(testing::oracle_objective(rows, one, 1)).epsilon(1e-14));
    const std::vector<std::size_t> split{0, 1, 1};
    CHECK(partition_objective(features_of(rows), split, 3) ==
          doctest::Approx(testing::oracle_objective(rows, split, 3)).epsilon(1e-14));
    CHECK_THROWS_AS(partition_objective(features_of(rows), std::vector<std::size_t>{0, 3, 0}, 2), DataError);
}

TEST_CASE("activation sub-clustering") {
    ClusterAssignment base;
    base.group = {0, 0, 0, 0, 1, 1};
    base.group_count = 2;
    SUBCASE("G' = 1 keeps the assignment") {
        Rng rng(3);
        const auto out = activation_subclusters(base, features_of(random_rows(rng, 6, 3)), 1);
        CHECK(out.group == base.group);
        CHECK(out.group_count == base.group_count);
        CHECK(out.stage == ClusterStage::semantic_activation);
    }
    SUBCASE("orthogonal activation patterns split a semantic group") {
        const testing::Rows act{{1, 0}, {0, 1}, {1, 0.01}, {0.01, 1}, {1, 1}, {0, 1}};
        const auto out = activation_subclusters(base, features_of(act), 2);
        check_partition(out, 6);
        CHECK(out.group[0] != out.group[1]);
        CHECK(out.group[0] == out.group[2]);
        CHECK(out.group[1] == out.group[3]);
        CHECK(out.group[0] == 0);
        CHECK(out.group_count == 3);
        // Group 1 has 2 < 2 G' members and passes through.
        CHECK(out.group[4] == 1);
        CHECK(out.group[5] == 1);
        const testing::Rows sub{act[0], act[1], act[2], act[3]};
        const auto brute = testing::brute_force_partition(sub, 2);
        CHECK(testing::same_partition(brute.label, {out.group[0], out.group[1], out.group[2], out.group[3]}));
    }
    SUBCASE("missing dev activations") {
        FeatureMatrix empty;
        empty.rows = 6;
        CHECK_THROWS_AS(activation_subclusters(base, empty, 2), DataError);
        Transformer<float> model(small_model(), 1);
        CHECK_THROWS_AS(activation_features(model, {}), DataError);
    }
}

TEST_CASE("activation features average keys per sequence") {
    Transformer<double> model(small_model(), 2);
    const std::vector<std::vector<int>> seqs{{1, 2, 3}, {4, 5}};
    const auto feats = activation_features(model, seqs);
    REQUIRE(feats.size() == 2);
    CHECK(feats[0].rows == 16);
    CHECK(feats[0].cols == 2);
    const auto out = model.forward(std::span<const int>(seqs[1]));
    const auto kd = out.trace.layers[1].keys.data();
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(feats[1].row(i)[1] == doctest::Approx((kd[i] + kd[16 + i]) / 2).epsilon(1e-14));
    }
}

TEST_CASE("cluster steering examples") {
    ClusterAssignment a;
    a.group = {0, 1};
    a.group_count = 2;
    const std::vector<double> k{1, 2}, delta{0.5, 0.5};
    CHECK(cluster_steer<double>(k, a, std::vector<double>{2, 0}, delta) == std::vector<double>{2.0, 2.0});
    CHECK(cluster_steer<double>(k, a, std::vector<double>{0, 0}, delta) == k);
    CHECK(cluster_steer<double>(k, a, std::vector<double>{1, 1}, delta) == std::vector<double>{1.5, 2.5});
    CHECK_THROWS_AS(cluster_steer<double>(k, a, std::vector<double>{1}, delta), ConfigError);
    CHECK_THROWS_AS(cluster_steer<double>(k, a, std::vector<double>{1, 1}, std::vector<double>{1}), ShapeError);
}

TEST_CASE("beta = 1 reproduces the plain delta bitwise") {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 2 + rng.below(30);
        ClusterAssignment a;
        a.group_count = 1 + rng.below(std::min<std::size_t>(d, 5));
        a.group.resize(d);
        for (std::size_t i = 0; i < d; ++i) {
            a.group[i] = i < a.group_count ? i : rng.below(a.group_count);
        }
        std::vector<float> k(d);
        for (auto& x : k) {
            x = static_cast<float>(rng.uniform(0, 2));
        }
        const auto target = intervene_keys<float>(k, 20.0, 1.3, MagnitudeMode::signed_values);
        std::vector<float> delta(d), plain(d);
        for (std::size_t i = 0; i < d; ++i) {
            delta[i] = target[i] - k[i];
            plain[i] = k[i] + delta[i];
        }
        const std::vector<double> ones(a.group_count, 1.0);
        const auto steered = cluster_steer<float>(k, a, ones, delta);
        REQUIRE(testing::bitwise_equal(std::span<const float>(steered), std::span<const float>(plain)));

        // The tape version computes the same expression.
        std::vector<double> betas(a.group_count);
        for (auto& b : betas) {
            b = rng.uniform(-1, 2);
        }
        const Tensor<float> keys({1, d}, k);
        const Tensor<float> tgt({1, d}, target);
        const auto rows = cluster_steer_rows(keys, a, betas, tgt);
        const auto numeric = cluster_steer<float>(k, a, betas, delta);
        REQUIRE(testing::bitwise_equal(rows.data(), std::span<const float>(numeric)));
    }
}

TEST_CASE("surrogate examples") {
    SUBCASE("identity decode") {
        const std::vector<double> values{1, 2, 3, 4, 5, 6};
        const std::vector<double> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
        const auto layer = surrogate(values, 2, 3, eye, 3);
        CHECK(layer.phi == values);
    }
    SUBCASE("zero value row") {
        const std::vector<double> values{0, 0};
        const std::vector<double> decode{0.3, -1, 2, 0.5, 0.5, 7};
        auto layer = surrogate(values, 1, 2, decode, 3);
        CHECK(layer.phi == std::vector<double>{0, 0, 0});
        score_surrogate(layer, 1, 1, uniform_target(3));
        CHECK(layer.entropy[0] == doctest::Approx(std::log(3.0)).epsilon(1e-15));
        CHECK(layer.specificity[0] == doctest::Approx(0.0).epsilon(1e-15));
    }
    SUBCASE("d = 1, vocab = 2") {
        auto layer = surrogate(std::vector<double>{1}, 1, 1, std::vector<double>{1, 0}, 2);
        CHECK(layer.phi == std::vector<double>{1, 0});
        const double p = 1.0 / (1.0 + std::exp(-1.0));
        CHECK(p == doctest::Approx(0.7311).epsilon(1e-4));
        const double h = -(p * std::log(p) + (1 - p) * std::log(1 - p));
        CHECK(softmax_entropy(layer.row(0)) == doctest::Approx(h).epsilon(1e-14));
        CHECK(h == doctest::Approx(0.58220).epsilon(1e-4));
        CHECK(specificity(layer.row(0), 2) == doctest::Approx(1 - h / std::log(2.0)).epsilon(1e-14));
        CHECK(specificity(layer.row(0), 2) == doctest::Approx(0.16006).epsilon(1e-4));
    }
    SUBCASE("shape errors") {
        CHECK_THROWS_AS(surrogate(std::vector<double>{1, 2, 3}, 2, 2, std::vector<double>{1, 0, 0, 1}, 2),
                        ShapeError);
        CHECK_THROWS_AS(surrogate(std::vector<double>{1, 2}, 1, 2, std::vector<double>{1, 0, 0}, 2), ShapeError);
    }
}

TEST_CASE("surrogate decomposition identity on random instances") {
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 1 + rng.below(8), d_m = 1 + rng.below(16), vocab = 2 + rng.below(20);
        const auto values = testing::uniform_values(rng, d_m * d, -1, 1);
        const auto decode = testing::uniform_values(rng, d * vocab, -1, 1);
        const auto keys = testing::uniform_values(rng, d_m, 0, 2);
        const auto layer = surrogate(values, d_m, d, decode, vocab);
        std::vector<double> lhs(vocab, 0.0), hidden(d, 0.0), rhs(vocab, 0.0);
        for (std::size_t i = 0; i < d_m; ++i) {
            for (std::size_t v = 0; v < vocab; ++v) {
                lhs[v] += keys[i] * layer.phi[i * vocab + v];
            }
            for (std::size_t j = 0; j < d; ++j) {
                hidden[j] += keys[i] * values[i * d + j];
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            for (std::size_t v = 0; v < vocab; ++v) {
                rhs[v] += hidden[j] * decode[j * vocab + v];
            }
        }
        double scale = 0.0;
        for (double x : rhs) {
            scale = std::max(scale, std::abs(x));
        }
        for (std::size_t v = 0; v < vocab; ++v) {
            REQUIRE(std::abs(lhs[v] - rhs[v]) <= 1e-5 * std::max(std::abs(rhs[v]), 1e-6 * std::max(scale, 1.0)) + 1e-12);
        }
    }
}

TEST_CASE("surrogate score examples") {
    const std::vector<double> phi{1, 0};
    const auto uni = uniform_target(2);
    const double h = softmax_entropy(phi);
    CHECK(surrogate_score(phi, 0.7, 0.0, uni) == 0.7 * h);
    CHECK(surrogate_score(phi, 1, 1, uni) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    const double p = 1.0 / (1.0 + std::exp(-1.0));
    const std::vector<double> same{p, 1 - p};
    CHECK(surrogate_score(phi, 0.0, 1.0, same) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK_THROWS_AS(surrogate_score(phi, 1, 1, std::vector<double>{0.6, 0.6}), DomainError);
    CHECK_THROWS_AS(surrogate_score(phi, 1, 1, std::vector<double>{1.2, -0.2}), DomainError);
    CHECK_THROWS_AS(surrogate_score(phi, 1, 1, std::vector<double>{1.0}), ShapeError);
    CHECK_NOTHROW(surrogate_score(phi, 1, 1, std::vector<double>{0.5 + 4e-7, 0.5}));
}

TEST_CASE("KL divergence is nonnegative and vanishes at equality") {
    Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(30);
        auto p = testing::uniform_values(rng, n, 0, 1);
        auto q = testing::uniform_values(rng, n, 0, 1);
        if (trial % 5 == 0) {
            p[rng.below(n)] = 0.0;
        }
        const double sp = std::accumulate(p.begin(), p.end(), 0.0);
        const double sq = std::accumulate(q.begin(), q.end(), 0.0);
        for (auto& x : p) {
            x /= sp;
        }
        for (auto& x : q) {
            x /= sq;
        }
        const double kl = kl_divergence(p, q);
        REQUIRE(kl >= 0.0);
        REQUIRE(kl_divergence(p, p) <= 1e-15);
        double ref = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (p[i] > 0) {
                ref += p[i] * std::log(p[i] / q[i]);
            }
        }
        REQUIRE(kl == doctest::Approx(std::max(ref, 0.0)).epsilon(1e-10));
    }
}

TEST_CASE("specificity bounds") {
    CHECK(specificity(std::vector<double>{0, 0, 0, 0}, 4) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(specificity(std::vector<double>{200, 0, 0, 0}, 4) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(specificity(std::vector<double>{1}, 1), DomainError);
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t v = 2 + rng.below(40);
        const auto phi = testing::uniform_values(rng, v, -20, 20);
        const double s = specificity(phi, v);
        REQUIRE(s >= 0.0);
        REQUIRE(s <= 1.0);
        REQUIRE(softmax_entropy(phi) == doctest::Approx(softmax_entropy_ref(phi)).epsilon(1e-12));
    }
}

TEST_CASE("amplification") {
    const std::vector<double> k{1, 2};
    CHECK(amplify<double>(k, std::vector<double>{0.5, 1}, 2.0) == std::vector<double>{2, 6});
    CHECK(amplify<double>(k, std::vector<double>{0.5, 1}, 0.0) == k);
    try {
        (void)amplify<double>(k, std::vector<double>{0.0, 1e308}, 1e10);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("index 1") != std::string::npos);
    }
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t d = 2 + rng.below(30);
        const auto keys = testing::uniform_values(rng, d, 0, 3);
        const std::vector<double> s(d, rng.uniform(0, 2));
        const auto out = amplify<double>(keys, s, rng.uniform(0, 1));
        REQUIRE(normalized_entropy<double>(out, MagnitudeMode::signed_values).nats ==
                doctest::Approx(normalized_entropy<double>(keys, MagnitudeMode::signed_values).nats).epsilon(1e-13));
    }
    const Td rows = Td::matrix(2, 2, {1, 2, 3, 4});
    const auto amp = amplify_rows(rows, std::vector<double>{0.5, 1}, 2.0);
    CHECK(std::vector<double>(amp.data().begin(), amp.data().end()) == std::vector<double>{2, 6, 6, 12});
}

TEST_CASE("targets") {
    const auto uni = uniform_target(4);
    CHECK(uni == std::vector<double>(4, 0.25));
    const auto emp = empirical_target({{0, 1, 1}, {2, 1}}, 4);
    // Next-token events: 1, 1, 1.
    CHECK(emp == std::vector<double>{0, 1, 0, 0});
    CHECK_THROWS_AS(empirical_target({{3}}, 4), DataError);
}

TEST_CASE("surrogate table from a model") {
    Transformer<double> model(small_model(), 7);
    const auto table =
        build_surrogate_table(model, 1.0, 0.5, SurrogateTarget::uniform, uniform_target(30));
    REQUIRE(table.layers.size() == 2);
    const auto& layer = table.layers[1];
    CHECK(layer.width == 16);
    CHECK(layer.vocab == 30);
    const auto values = model.layer(1).ffn.w_down.data();
    const auto decode = model.decode_matrix();
    for (std::size_t v = 0; v < 30; ++v) {
        double ref = 0.0;
        for (std::size_t j = 0; j < 8; ++j) {
            ref += values[3 * 8 + j] * decode.at(j, v);
        }
        CHECK(layer.row(3)[v] == doctest::Approx(ref).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(layer.entropy[i] >= 0.0);
        CHECK(layer.entropy[i] <= std::log(30.0) + 1e-12);
        CHECK(layer.specificity[i] >= 0.0);
        CHECK(layer.specificity[i] <= 1.0);
        CHECK(layer.score[i] == doctest::Approx(surrogate_score(layer.row(i), 1.0, 0.5, uniform_target(30))));
    }
    const auto scores = scores_of(table);
    CHECK(scores.layers[0] == table.layers[0].score);
    const auto feats = surrogate_features(layer);
    CHECK(feats.rows == 16);
    CHECK(feats.cols == 30);
}

TEST_CASE("cluster and surrogate steering in the forward pass") {
    Transformer<double> model(small_model(), 8);
    const std::vector<int> tokens{1, 4, 2, 8};
    SteeringSpec spec;
    spec.method = SteeringMethod::cluster;
    spec.p_percent = 25;
    spec.alpha = 1.0;
    spec.layer_lo = 2;
    spec.layer_hi = 2;
    {
        const std::vector<SteeringSpec> specs{spec};
        CHECK_THROWS_AS(model.forward(std::span<const int>(tokens), specs), ConfigError);
    }
    auto clusters = std::make_shared<LayerClusters>();
    for (std::size_t l = 0; l < 2; ++l) {
        const auto fit = semantic_clusters(value_features(model, l), 3);
        clusters->layers.push_back(fit.assignment);
    }
    spec.clusters = clusters;
    spec.betas = {1.0, 1.0, 1.0};
    SteeringSpec plain;
    plain.method = SteeringMethod::intervention;
    plain.p_percent = 25;
    plain.layer_lo = 2;
    plain.layer_hi = 2;
    const std::vector<SteeringSpec> cluster_specs{spec};
    const std::vector<SteeringSpec> plain_specs{plain};
    const auto a = model.forward(std::span<const int>(tokens), cluster_specs);
    const auto b = model.forward(std::span<const int>(tokens), plain_specs);
    CHECK(a.trace.layers[1].steered());
    for (std::size_t i = 0; i < a.trace.layers[1].keys.numel(); ++i) {
        CHECK(a.trace.layers[1].keys.data()[i] == doctest::Approx(b.trace.layers[1].keys.data()[i]).epsilon(1e-14));
    }

    spec.betas = {0.0, 0.0, 0.0};
    const std::vector<SteeringSpec> zero{spec};
    const auto c = model.forward(std::span<const int>(tokens), zero);
    const auto base = model.forward(std::span<const int>(tokens));
    CHECK(testing::bitwise_equal(c.trace.layers[1].keys.data(), base.trace.layers[1].keys.data()));

    SteeringSpec amp;
    amp.method = SteeringMethod::surrogate;
    amp.gamma = 0.5;
    {
        const std::vector<SteeringSpec> specs{amp};
        CHECK_THROWS_AS(model.forward(std::span<const int>(tokens), specs), ConfigError);
    }
    const auto table = build_surrogate_table(model, 1.0, 1.0, SurrogateTarget::uniform, uniform_target(30));
    amp.scores = std::make_shared<SurrogateScores>(scores_of(table));
    const std::vector<SteeringSpec> amp_specs{amp};
    const auto d = model.forward(std::span<const int>(tokens), amp_specs);
    const auto k1 = base.trace.layers[0].keys.data();
    const auto expect = amplify<double>(k1.subspan(0, 16), table.layers[0].score, 0.5);
    CHECK(testing::bitwise_equal(d.trace.layers[0].keys.data().subspan(0, 16), std::span<const double>(expect)));
}

TEST_CASE("sidecar files round trip") {
    testing::TempDir dir("sidecar");
    LayerClusters clusters;
    ClusterAssignment a;
    a.group = {0, 1, 2, 1, 2};
    a.group_count = 3;
    a.residual = 2;
    a.stage = ClusterStage::semantic_activation;
    ClusterAssignment b;
    b.group = {0, 0, 0, 0, 0};
    b.group_count = 1;
    clusters.layers = {a, b};
    write_clusters(dir / kClustersFile, clusters, 42);
    const auto back = read_clusters(dir / kClustersFile);
    REQUIRE(back.layers.size() == 2);
    CHECK(back.layers[0].group == a.group);
    CHECK(back.layers[0].group_count == 3);
    CHECK(back.layers[0].residual == a.residual);
    CHECK(back.layers[0].stage == ClusterStage::semantic_activation);
    CHECK(back.layers[1].group == b.group);
    CHECK_FALSE(back.layers[1].residual.has_value());
    const std::string text = testing::read_text(dir / kClustersFile);
    CHECK(text.rfind("infosteer-clusters v1", 0) == 0);
    CHECK(text.find("seed 42") != std::string::npos);

    Transformer<double> model(small_model(), 9);
    const auto table = build_surrogate_table(model, 0.5, 2.0, SurrogateTarget::uniform, uniform_target(30));
    write_surrogates(dir / kSurrogatesFile, table);
    const auto read = read_surrogates(dir / kSurrogatesFile);
    CHECK(read.lambda1 == 0.5);
    CHECK(read.lambda2 == 2.0);
    REQUIRE(read.layers.size() == 2);
    CHECK(read.layers[1].score == table.layers[1].score);
    CHECK(read.layers[1].entropy == table.layers[1].entropy);
    CHECK(read.layers[1].specificity == table.layers[1].specificity);

    testing::write_text(dir / "bad.txt", "infosteer-clusters v9\n");
    CHECK_THROWS_AS(read_clusters(dir / "bad.txt"), DataError);
    CHECK_THROWS_AS(read_clusters(dir / "absent.txt"), IoError);
}
