#include <benchmark/benchmark.h>

#include <vector>

#include "infosteer/finegrain.hpp"
#include "infosteer/model.hpp"
#include "infosteer/rng.hpp"
#include "infosteer/steering.hpp"

using namespace infosteer;

namespace {

template <typename T>
Tensor<T> random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    std::vector<T> v(rows * cols);
    for (auto& x : v) {
        x = static_cast<T>(rng.uniform(-1, 1));
    }
    return Tensor<T>({rows, cols}, std::move(v));
}

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.vocab_size = 259;
    cfg.d = 32;
    cfg.d_m = 64;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.max_seq_len = 64;
    return cfg;
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const auto a = random_matrix<float>(rng, n, n);
    const auto b = random_matrix<float>(rng, n, n);
    for (auto _ : state) {
        benchmark::DoNotOptimize(matmul(a, b));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_Forward(benchmark::State& state) {
    const Transformer<float> model(toy_config(), 1);
    std::vector<int> tokens(static_cast<std::size_t>(state.range(0)));
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        tokens[i] = static_cast<int>(i * 7 % 256);
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.forward(std::span<const int>(tokens)));
    }
}
BENCHMARK(BM_Forward)->Arg(16)->Arg(64);

void BM_ForwardBackward(benchmark::State& state) {
    const Transformer<float> model(toy_config(), 1);
    std::vector<int> tokens(48), targets(48);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        tokens[i] = static_cast<int>(i * 5 % 256);
        targets[i] = static_cast<int>((i * 5 + 1) % 256);
    }
    const std::vector<std::uint8_t> mask(48, 1);
    SteeringSpec reg;
    reg.method = SteeringMethod::regularization;
    reg.lambda = 0.01;
    for (auto _ : state) {
        Tape<float> tape;
        Tape<float>::Scope scope(tape);
        const auto out = model.forward(std::span<const int>(tokens));
        tape.backward(add(lm_loss(out.logits, targets, mask), entropy_penalty(out.trace, reg, FfnVariant::standard_relu)));
        for (const auto& nt : model.named_parameters()) {
            auto t = nt.tensor;
            t.zero_grad();
        }
    }
}
BENCHMARK(BM_ForwardBackward);

void BM_Intervention(benchmark::State& state) {
    Rng rng(2);
    std::vector<float> keys(static_cast<std::size_t>(state.range(0)));
    for (auto& k : keys) {
        k = static_cast<float>(rng.uniform(0, 3));
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(intervene_keys<float>(keys, 1.0, 2.0, MagnitudeMode::signed_values));
    }
}
BENCHMARK(BM_Intervention)->Arg(64)->Arg(4096);

void BM_Entropy(benchmark::State& state) {
    Rng rng(3);
    std::vector<double> keys(static_cast<std::size_t>(state.range(0)));
    for (auto& k : keys) {
        k = rng.uniform(0, 3);
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(normalized_entropy<double>(keys, MagnitudeMode::signed_values));
    }
}
BENCHMARK(BM_Entropy)->Arg(64)->Arg(4096);

void BM_Clustering(benchmark::State& state) {
    Rng rng(4);
    FeatureMatrix f;
    f.rows = static_cast<std::size_t>(state.range(0));
    f.cols = 32;
    for (std::size_t i = 0; i < f.rows * f.cols; ++i) {
        f.data.push_back(rng.uniform(-1, 1));
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(semantic_clusters(f, 8));
    }
}
BENCHMARK(BM_Clustering)->Arg(64)->Arg(256);

}  // namespace
BENCHMARK_MAIN();
