#include <fstream>
#include <sstream>

#include <json.hpp>

#include "infosteer/error.hpp"
#include "infosteer/harness.hpp"
#include "infosteer/text.hpp"

namespace infosteer {

std::vector<ExampleRecord> parse_dataset(const std::string& content, const std::string& source) {
    using json = nlohmann::json;
    std::vector<ExampleRecord> records;
    std::istringstream in(content);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (text::trim(line).empty()) {
            continue;
        }
        const std::string where = source + ":" + std::to_string(number);
        json doc;
        try {
            doc = json::parse(line);
        } catch (const json::exception&) {
            throw DataError(where + ": malformed record (line " + std::to_string(number) + " is not valid JSON)");
        }
        if (!doc.is_object()) {
            throw DataError(where + ": malformed record (line " + std::to_string(number) + " is not an object)");
        }
        ExampleRecord rec;
        for (const char* field : {"prompt", "response"}) {
            const auto it = doc.find(field);
            if (it == doc.end() || !it->is_string()) {
                throw DataError(where + ": malformed record (line " + std::to_string(number) +
                                " lacks a string \"" + field + "\" field)");
            }
        }
        rec.prompt = std::string(text::trim(doc["prompt"].get<std::string>()));
        rec.response = std::string(text::trim(doc["response"].get<std::string>()));
        for (const auto& [key, value] : doc.items()) {
            if (key == "prompt" || key == "response") {
                continue;
            }
            rec.metadata[key] = value.is_string() ? value.get<std::string>() : value.dump();
        }
        records.push_back(std::move(rec));
    }
    if (records.empty()) {
        throw DataError(source + ": dataset is empty");
    }
    return records;
}

std::vector<ExampleRecord> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open dataset " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_dataset(ss.str(), path.string());
}

namespace {

std::vector<int> full_sequence(const ExampleRecord& record, const ByteTokenizer& tokenizer, std::size_t& prompt_len) {
    std::vector<int> seq = tokenizer.encode_prompt(record.prompt);
    prompt_len = seq.size();
    const std::vector<int> body = tokenizer.encode(record.response);
    seq.insert(seq.end(), body.begin(), body.end());
    seq.push_back(ByteTokenizer::kEos);
    return seq;
}

}  // namespace

EncodedExample encode_example(const ExampleRecord& record, const ByteTokenizer& tokenizer, std::size_t max_len) {
    if (max_len == 0) {
        throw ConfigError("encode_example: max_len must be positive");
    }
    std::size_t prompt_len = 0;
    const std::vector<int> seq = full_sequence(record, tokenizer, prompt_len);
    const std::size_t n = std::min(seq.size() - 1, max_len);
    EncodedExample ex;
    ex.inputs.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(n));
    ex.targets.assign(seq.begin() + 1, seq.begin() + static_cast<std::ptrdiff_t>(n) + 1);
    ex.mask.resize(n);
    bool any = false;
    for (std::size_t t = 0; t < n; ++t) {
        ex.mask[t] = t + 1 >= prompt_len ? 1 : 0;
        any = any || ex.mask[t];
    }
    if (!any) {
        throw DataError("example with prompt of " + std::to_string(record.prompt.size()) +
                        " bytes leaves no response tokens within " + std::to_string(max_len) + " positions");
    }
    return ex;
}

TrainingBatch pack_examples(const std::vector<const EncodedExample*>& examples) {
    TrainingBatch out;
    for (const EncodedExample* ex : examples) {
        out.batch.add(ex->inputs);
        out.targets.insert(out.targets.end(), ex->targets.begin(), ex->targets.end());
        out.mask.insert(out.mask.end(), ex->mask.begin(), ex->mask.end());
    }
    return out;
}

std::vector<std::vector<int>> example_sequences(const std::vector<ExampleRecord>& data, const ByteTokenizer& tokenizer,
                                                std::size_t max_len) {
    std::vector<std::vector<int>> out;
    out.reserve(data.size());
    for (const auto& rec : data) {
        std::size_t prompt_len = 0;
        std::vector<int> seq = full_sequence(rec, tokenizer, prompt_len);
        if (seq.size() > max_len) {
            seq.resize(max_len);
        }
        out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace infosteer
