#include "infosteer/tokenizer.hpp"

#include "infosteer/error.hpp"

namespace infosteer {

ByteTokenizer::ByteTokenizer(std::size_t vocab_size) : vocab_size_(vocab_size) {
    if (vocab_size < kVocabSize) {
        throw ConfigError("byte tokenizer needs vocab_size >= " + std::to_string(kVocabSize) + ", got " +
                          std::to_string(vocab_size));
    }
}

std::vector<int> ByteTokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) {
        ids.push_back(static_cast<int>(static_cast<unsigned char>(c)));
    }
    return ids;
}

std::vector<int> ByteTokenizer::encode_prompt(std::string_view prompt) const {
    std::vector<int> ids{kBos};
    const std::vector<int> body = encode(prompt);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back('\n');
    return ids;
}

void ByteTokenizer::check_id(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
        throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(vocab_size_));
    }
}

std::string ByteTokenizer::decode(std::span<const int> ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        check_id(id);
        if (!is_special(id)) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
    }
    return out;
}

std::string ByteTokenizer::token_text(int id) const {
    check_id(id);
    switch (id) {
        case kPad:
            return "<pad>";
        case kBos:
            return "<bos>";
        case kEos:
            return "<eos>";
        default:
            break;
    }
    if (is_special(id)) {
        return "<unk" + std::to_string(id) + ">";
    }
    return std::string(1, static_cast<char>(static_cast<unsigned char>(id)));
}

}  // namespace infosteer
