#include <cmath>

#include "infosteer/error.hpp"
#include "infosteer/harness.hpp"

namespace infosteer {

std::string to_string(EvalMode mode) {
    return mode == EvalMode::loss ? "loss" : "exact-match";
}

EvalMode parse_eval_mode(const std::string& text) {
    if (text == "loss") {
        return EvalMode::loss;
    }
    if (text == "exact-match") {
        return EvalMode::exact_match;
    }
    throw ConfigError("unknown eval mode '" + text + "' (expected loss or exact-match)");
}

namespace {

constexpr std::size_t kEvalBatch = 16;

}  // namespace

template <typename T>
EvalMetrics evaluate(const Transformer<T>& model, const std::vector<ExampleRecord>& data, EvalMode mode,
                     const std::vector<SteeringSpec>& steering, std::size_t max_new_tokens) {
    if (data.empty()) {
        throw DataError("evaluate: empty dataset");
    }
    const ModelConfig& cfg = model.config();
    const ByteTokenizer tokenizer(cfg.vocab_size);
    EvalMetrics m;
    m.mode = mode;
    m.examples = data.size();
    if (mode == EvalMode::loss) {
        std::vector<EncodedExample> encoded;
        for (const auto& rec : data) {
            encoded.push_back(encode_example(rec, tokenizer, cfg.max_seq_len));
        }
        double nll = 0.0;
        for (std::size_t start = 0; start < encoded.size(); start += kEvalBatch) {
            std::vector<const EncodedExample*> chunk;
            for (std::size_t i = start; i < std::min(encoded.size(), start + kEvalBatch); ++i) {
                chunk.push_back(&encoded[i]);
            }
            const TrainingBatch tb = pack_examples(chunk);
            const ForwardResult<T> out = model.forward(tb.batch, steering);
            std::size_t count = 0;
            for (std::uint8_t v : tb.mask) {
                count += v ? 1 : 0;
            }
            const double loss = static_cast<double>(lm_loss(out.logits, tb.targets, tb.mask).item());
            nll += loss * static_cast<double>(count);
            m.scored_tokens += count;
        }
        m.loss = nll / static_cast<double>(m.scored_tokens);
        return m;
    }
    std::size_t hits = 0;
    for (const auto& rec : data) {
        const std::vector<int> prefix = tokenizer.encode_prompt(rec.prompt);
        if (prefix.size() >= cfg.max_seq_len) {
            throw DataError("evaluate: prompt of " + std::to_string(prefix.size()) +
                            " tokens does not fit max_seq_len " + std::to_string(cfg.max_seq_len));
        }
        std::vector<int> generated = greedy_generate(model, prefix, max_new_tokens, steering);
        if (!generated.empty() && generated.back() == ByteTokenizer::kEos) {
            generated.pop_back();
        }
        m.scored_tokens += generated.size();
        if (tokenizer.decode(generated) == rec.response) {
            ++hits;
        }
    }
    m.exact_match = static_cast<double>(hits) / static_cast<double>(data.size());
    return m;
}

template <typename T>
double mean_key_entropy(const Transformer<T>& model, const std::vector<ExampleRecord>& data,
                        const std::vector<SteeringSpec>& steering) {
    if (data.empty()) {
        throw DataError("mean_key_entropy: empty dataset");
    }
    const ModelConfig& cfg = model.config();
    const ByteTokenizer tokenizer(cfg.vocab_size);
    MagnitudeMode mode = default_magnitude_mode(cfg.ffn_variant);
    for (const auto& s : steering) {
        if (s.method == SteeringMethod::regularization) {
            mode = s.mode_for(cfg.ffn_variant);
        }
    }
    double total = 0.0;
    std::size_t count = 0;
    std::vector<EncodedExample> encoded;
    for (const auto& rec : data) {
        encoded.push_back(encode_example(rec, tokenizer, cfg.max_seq_len));
    }
    for (std::size_t start = 0; start < encoded.size(); start += kEvalBatch) {
        std::vector<const EncodedExample*> chunk;
        for (std::size_t i = start; i < std::min(encoded.size(), start + kEvalBatch); ++i) {
            chunk.push_back(&encoded[i]);
        }
        const TrainingBatch tb = pack_examples(chunk);
        const ForwardResult<T> out = model.forward(tb.batch, steering);
        const EntropyStats stats = entropy_stats(out.trace, mode);
        for (const auto& layer : stats.per_token) {
            for (std::size_t r = 0; r < layer.size(); ++r) {
                if (tb.mask[r]) {
                    total += layer[r];
                    ++count;
                }
            }
        }
    }
    return total / static_cast<double>(count);
}

template EvalMetrics evaluate<float>(const Transformer<float>&, const std::vector<ExampleRecord>&, EvalMode,
                                     const std::vector<SteeringSpec>&, std::size_t);
template EvalMetrics evaluate<double>(const Transformer<double>&, const std::vector<ExampleRecord>&, EvalMode,
                                      const std::vector<SteeringSpec>&, std::size_t);
template double mean_key_entropy<float>(const Transformer<float>&, const std::vector<ExampleRecord>&,
                                        const std::vector<SteeringSpec>&);
template double mean_key_entropy<double>(const Transformer<double>&, const std::vector<ExampleRecord>&,
                                         const std::vector<SteeringSpec>&);

}  // namespace infosteer
