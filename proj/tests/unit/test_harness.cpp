#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include "infosteer/checkpoint.hpp"
#include "infosteer/error.hpp"
#include "infosteer/harness.hpp"
#include "infosteer/rng.hpp"
#include "test_support.hpp"

using namespace infosteer;
namespace fs = std::filesystem;

namespace {

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

TrainConfig toy_train(const fs::path& dir, std::size_t steps, const std::string& data = "copy.jsonl") {
    TrainConfig c;
    c.model = tiny_model();
    c.train_data = testing::data_path(data);
    c.learning_rate = 3e-3;
    c.warmup_steps = 20;
    c.max_seq_len = 48;
    c.batch_size = 8;
    c.steps = steps;
    c.seed = 1;
    c.precision = Precision::f32;
    c.checkpoint_dir = dir;
    return c;
}

std::vector<std::string> csv_lines(const fs::path& path) {
    std::istringstream in(testing::read_text(path));
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
        out.push_back(line);
    }
    return out;
}

std::string dir_bytes(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) {
        all += f.filename().string() + '\0' + testing::read_text(f) + '\0';
    }
    return all;
}

}  // namespace

TEST_CASE("dataset ingestion") {
    SUBCASE("well-formed lines") {
        const auto d = parse_dataset(
            "{\"prompt\": \"  hi  \", \"response\": \"there\\n\"}\n\n{\"prompt\": \"a\", \"response\": \"b\", \"id\": 7, "
            "\"task\": \"copy\"}\n",
            "mem");
        REQUIRE(d.size() == 2);
        CHECK(d[0].prompt == "hi");
        CHECK(d[0].response == "there");
        CHECK(d[1].metadata.at("task") == "copy");
        CHECK(d[1].metadata.at("id") == "7");
    }
    SUBCASE("malformed third line") {
        const std::string text = "{\"prompt\": \"a\", \"response\": \"b\"}\n{\"prompt\": \"c\", \"response\": \"d\"}\n{oops\n";
        try {
            parse_dataset(text, "mem");
            FAIL("expected DataError");
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find("line 3") != std::string::npos);
        }
        CHECK_THROWS_AS(parse_dataset("{\"prompt\": \"a\"}\n", "mem"), DataError);
        CHECK_THROWS_AS(parse_dataset("[1, 2]\n", "mem"), DataError);
    }
    SUBCASE("empty and missing files") {
        CHECK_THROWS_AS(parse_dataset("\n  \n", "mem"), DataError);
        CHECK_THROWS_AS(load_dataset("/nonexistent/data.jsonl"), IoError);
    }
    SUBCASE("shipped corpora") {
        CHECK(load_dataset(testing::data_path("copy.jsonl")).size() == 200);
        CHECK(load_dataset(testing::data_path("copy_small.jsonl")).size() == 5);
        CHECK(load_dataset(testing::data_path("arithmetic.jsonl")).size() == 200);
        CHECK(load_dataset(testing::data_path("facts.jsonl")).size() == 60);
    }
}

TEST_CASE("example encoding scores only response tokens") {
    const ByteTokenizer tok(259);
    const auto ex = encode_example({"ab", "cd", {}}, tok, 64);
    const std::vector<int> inputs{ByteTokenizer::kBos, 'a', 'b', '\n', 'c', 'd'};
    const std::vector<int> targets{'a', 'b', '\n', 'c', 'd', ByteTokenizer::kEos};
    CHECK(ex.inputs == inputs);
    CHECK(ex.targets == targets);
    CHECK(ex.mask == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1});

    const auto cut = encode_example({"ab", "cd", {}}, tok, 4);
    CHECK(cut.inputs.size() == 4);
    CHECK(cut.mask == std::vector<std::uint8_t>{0, 0, 0, 1});
    CHECK_THROWS_AS(encode_example({"abcdef", "x", {}}, tok, 3), DataError);
    CHECK_THROWS_AS(encode_example({"a", "b", {}}, tok, 0), ConfigError);

    const auto b = pack_examples({&ex, &cut});
    CHECK(b.targets.size() == 10);
    CHECK(b.mask.size() == 10);
}

TEST_CASE("prompt targets never change the loss") {
    Transformer<double> model(tiny_model(), 3);
    const ByteTokenizer tok(259);
    const auto data = load_dataset(testing::data_path("copy.jsonl"));
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<EncodedExample> ex;
        for (int i = 0; i < 3; ++i) {
            ex.push_back(encode_example(data[rng.below(data.size())], tok, 48));
        }
        const auto tb = pack_examples({&ex[0], &ex[1], &ex[2]});
        const auto out = model.forward(tb.batch);
        const double base = lm_loss(out.logits, tb.targets, tb.mask).item();
        auto altered = tb.targets;
        for (std::size_t i = 0; i < altered.size(); ++i) {
            if (!tb.mask[i]) {
                altered[i] = static_cast<int>(rng.below(259));
            }
        }
        REQUIRE(lm_loss(out.logits, altered, tb.mask).item() == base);
    }
}

TEST_CASE("train config parsing") {
    testing::TempDir dir("cfg");
    SUBCASE("defaults") {
        const auto c = parse_train_config("[model]\nvocab_size = 259\n[train]\ntrain_data = d.jsonl\ncheckpoint_dir = out\n",
                                          dir.path());
        CHECK(c.learning_rate == 5e-5);
        CHECK(c.warmup_steps == 100);
        CHECK(c.weight_decay == 0.01);
        CHECK(c.max_seq_len == 256);
        CHECK(c.epochs == 1);
        CHECK(c.batch_size == 16);
        CHECK(c.grad_accum_steps == 1);
        CHECK(c.train_data == dir.path() / "d.jsonl");
        CHECK(c.checkpoint_dir == dir.path() / "out");
        CHECK(c.steering.empty());
    }
    SUBCASE("stacked steering sections") {
        const auto c = parse_train_config(
            "[model]\nn_layers = 4\n[steering.1]\nmethod = intervention\np_percent = 5\nlayer_lo = 2\nlayer_hi = 2\n"
            "[steering.2]\nmethod = regularization\nlambda = 0.05\n[train]\ntrain_data = /abs/d.jsonl\n"
            "checkpoint_dir = o\n",
            dir.path());
        REQUIRE(c.steering.size() == 2);
        CHECK(c.steering[0].method == SteeringMethod::intervention);
        CHECK(c.steering[0].p_percent == 5.0);
        CHECK(c.steering[1].method == SteeringMethod::regularization);
        CHECK(c.steering[1].lambda == 0.05);
        CHECK(c.train_data == fs::path("/abs/d.jsonl"));
    }
    SUBCASE("errors") {
        const std::string tail = "[train]\ntrain_data = d\ncheckpoint_dir = o\n";
        CHECK_THROWS_AS(parse_train_config("[model]\nwidth = 3\n" + tail, dir.path()), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[model]\nd = 3\nd = 4\n" + tail, dir.path()), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[model\n" + tail, dir.path()), ConfigError);
        CHECK_THROWS_AS(parse_train_config("d = 3\n" + tail, dir.path()), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[extra]\n" + tail, dir.path()), ConfigError);
        CHECK_THROWS_AS(parse_train_config("[train]\nlearning_rate = -1\ntrain_data = d\ncheckpoint_dir = o\n", dir.path()),
                        ConfigError);
        CHECK_THROWS_AS(parse_train_config("[train]\nbatch_size = many\ntrain_data = d\ncheckpoint_dir = o\n", dir.path()),
                        ConfigError);
        CHECK_THROWS_AS(parse_train_config("[train]\ncheckpoint_dir = o\n", dir.path()), ConfigError);
        CHECK_THROWS_AS(
            parse_train_config("[model]\nn_layers = 2\n[steering]\nmethod = intervention\nlayer_hi = 3\n" + tail, dir.path()),
            ConfigError);
        try {
            load_train_config(dir / "missing.cfg");
            FAIL("expected IoError");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("missing.cfg") != std::string::npos);
        }
    }
    SUBCASE("shipped configs parse") {
        for (const auto& e : fs::directory_iterator(INFOSTEER_CONFIG_DIR)) {
            if (e.path().extension() == ".cfg") {
                INFO(e.path().string());
                CHECK_NOTHROW(load_train_config(e.path()).validate());
            }
        }
    }
}

TEST_CASE("AdamW hand step") {
    Tensor<double> v({1}, {1.0}, true);
    Tensor<double> m({1, 1}, {2.0}, true);
    AdamWOptions opt;
    opt.weight_decay = 0.5;
    opt.eps = 0.0;
    AdamW<double> adam({{"v", v}, {"m", m}}, opt);
    {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        const auto loss = add(scale(v, 0.5), scale(m, -0.25));
        tape.backward(sum_all(loss));
    }
    adam.step(0.1);
    // The first bias-corrected step moves each weight by lr * sign(g); matrices decay first.
    CHECK(v.item() == doctest::Approx(0.9).epsilon(1e-9));
    CHECK(m.item() == doctest::Approx(2.0 * (1 - 0.1 * 0.5) + 0.1).epsilon(1e-9));
    CHECK(adam.steps_taken() == 1);

    const auto state = adam.state();
    AdamW<double> copy({{"v", v}, {"m", m}}, opt);
    copy.load_state(state);
    CHECK(copy.steps_taken() == 1);

    CHECK(learning_rate_at(1.0, 4, 0) == 0.25);
    CHECK(learning_rate_at(1.0, 4, 3) == 1.0);
    CHECK(learning_rate_at(2.0, 4, 10) == 2.0);
    CHECK(learning_rate_at(2.0, 0, 0) == 2.0);
}

TEST_CASE("null steering configs match vanilla at step 0") {
    testing::TempDir dir("null");
    const auto vanilla = train(toy_train(dir / "v", 1));
    auto reg_cfg = toy_train(dir / "r", 1);
    SteeringSpec reg;
    reg.method = SteeringMethod::regularization;
    reg.lambda = 0.0;
    reg_cfg.steering = {reg};
    const auto r = train(reg_cfg);
    auto int_cfg = toy_train(dir / "i", 1);
    SteeringSpec iv;
    iv.method = SteeringMethod::intervention;
    iv.p_percent = 0.0;
    int_cfg.steering = {iv};
    const auto i = train(int_cfg);
    CHECK(r.metrics[0].lm_loss == vanilla.metrics[0].lm_loss);
    CHECK(i.metrics[0].lm_loss == vanilla.metrics[0].lm_loss);
    CHECK(r.metrics[0].mean_key_entropy == vanilla.metrics[0].mean_key_entropy);
    CHECK(i.metrics[0].mean_key_entropy == vanilla.metrics[0].mean_key_entropy);
    CHECK(r.metrics[0].entropy_term == 0.0);

    Transformer<float> model(tiny_model(), 1);
    const std::vector<int> tokens{257, 'h', 'i', '\n', 'h'};
    const auto a = model.forward(std::span<const int>(tokens));
    const std::vector<SteeringSpec> both{reg, iv};
    const auto b = model.forward(std::span<const int>(tokens), both);
    CHECK(testing::bitwise_equal(a.logits.data(), b.logits.data()));
}

TEST_CASE("copy task training lowers the loss and writes metrics") {
    testing::TempDir dir("copy");
    const auto res = train(toy_train(dir / "run", 500));
    REQUIRE(res.metrics.size() == 500);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        first += res.metrics[i].lm_loss / 20;
        last += res.metrics[res.metrics.size() - 1 - i].lm_loss / 20;
    }
    MESSAGE("copy loss " << first << " -> " << last);
    CHECK(last < first);
    CHECK(res.metrics.back().lm_loss < res.metrics.front().lm_loss);

    const auto lines = csv_lines(dir / "run" / kMetricsFile);
    REQUIRE(lines.size() == 501);
    CHECK(lines[0] == "step,lm_loss,entropy_term,mean_key_entropy");
    for (std::size_t i = 1; i < lines.size(); ++i) {
        REQUIRE(lines[i].rfind(std::to_string(i) + ",", 0) == 0);
    }
    const auto layer_lines = csv_lines(dir / "run" / kLayerEntropyFile);
    CHECK(layer_lines[0] == "step,layer_1,layer_2");
    CHECK(layer_lines.size() == 501);

    const auto info = read_checkpoint_info(dir / "run");
    CHECK(info.state.seed == 1);
    CHECK(info.state.step == 500);

    SUBCASE("overwrite guard") {
        CHECK_THROWS_AS(train(toy_train(dir / "run", 2)), IoError);
        auto again = toy_train(dir / "run", 2);
        again.overwrite = true;
        CHECK(train(again).steps == 2);
    }
}

TEST_CASE("entropy regularization raises mean key entropy") {
    testing::TempDir dir("reg");
    const auto data = load_dataset(testing::data_path("copy.jsonl"));
    auto base_cfg = toy_train(dir / "plain", 300);
    train(base_cfg);
    auto reg_cfg = toy_train(dir / "reg", 300);
    SteeringSpec reg;
    reg.method = SteeringMethod::regularization;
    reg.lambda = 0.05;
    reg_cfg.steering = {reg};
    train(reg_cfg);
    const double h0 = mean_key_entropy(load_checkpoint<float>(dir / "plain").model, data);
    const double h1 = mean_key_entropy(load_checkpoint<float>(dir / "reg").model, data);
    MESSAGE("mean key entropy " << h0 << " vs " << h1);
    CHECK(h1 > h0);
}

TEST_CASE("seeded training is bit-reproducible") {
    testing::TempDir dir("det");
    auto a_cfg = toy_train(dir / "a", 30);
    auto b_cfg = toy_train(dir / "b", 30);
    SteeringSpec iv;
    iv.method = SteeringMethod::intervention;
    iv.p_percent = 10;
    a_cfg.steering = b_cfg.steering = {iv};
    train(a_cfg);
    train(b_cfg);
    CHECK(dir_bytes(dir / "a") == dir_bytes(dir / "b"));
    auto c_cfg = toy_train(dir / "c", 30);
    c_cfg.steering = {iv};
    c_cfg.seed = 2;
    train(c_cfg);
    CHECK(testing::read_text(dir / "a" / kMetricsFile) != testing::read_text(dir / "c" / kMetricsFile));
}

TEST_CASE("divergence aborts with the step number") {
    testing::TempDir dir("div");
    auto cfg = toy_train(dir / "x", 20);
    cfg.learning_rate = 1e30;
    cfg.warmup_steps = 0;
    try {
        train(cfg);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("at step ") != std::string::npos);
    }
}

TEST_CASE("evaluation") {
    const auto small = load_dataset(testing::data_path("copy_small.jsonl"));
    SUBCASE("fresh model loss is near ln vocab") {
        Transformer<double> model(tiny_model(), 11);
        const auto m = evaluate(model, small, EvalMode::loss);
        CHECK(m.examples == 5);
        CHECK(m.scored_tokens > 0);
        CHECK(std::abs(m.loss - std::log(259.0)) < 0.1);
        const auto again = evaluate(model, small, EvalMode::loss);
        CHECK(again.loss == m.loss);
        CHECK_THROWS_AS(evaluate(model, {}, EvalMode::loss), DataError);
    }
    SUBCASE("overfitting five copies") {
        testing::TempDir dir("overfit");
        auto cfg = toy_train(dir / "o", 400, "copy_small.jsonl");
        cfg.batch_size = 5;
        cfg.weight_decay = 0.0;
        train(cfg);
        const auto ckpt = load_checkpoint<float>(dir / "o");
        const auto m = evaluate(ckpt.model, small, EvalMode::exact_match);
        CHECK(m.exact_match == 1.0);
        const auto again = evaluate(ckpt.model, small, EvalMode::exact_match);
        CHECK(again.exact_match == m.exact_match);
        CHECK(again.scored_tokens == m.scored_tokens);
    }
    CHECK(parse_eval_mode("exact-match") == EvalMode::exact_match);
    CHECK_THROWS_AS(parse_eval_mode("bleu"), ConfigError);
}
