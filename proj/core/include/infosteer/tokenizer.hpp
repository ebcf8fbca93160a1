#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace infosteer {

/// Byte-level tokenizer: ids 0..255 are raw bytes, followed by pad/bos/eos.
class ByteTokenizer {
public:
    static constexpr int kPad = 256;
    static constexpr int kBos = 257;
    static constexpr int kEos = 258;
    static constexpr std::size_t kVocabSize = 259;

    explicit ByteTokenizer(std::size_t vocab_size = kVocabSize);

    std::size_t vocab_size() const noexcept { return vocab_size_; }

    std::vector<int> encode(std::string_view text) const;

    /// Inverse of encode(). Special tokens are dropped; ids outside the
    /// vocabulary raise DataError.
    std::string decode(std::span<const int> ids) const;

    /// Display form of a single id ("<eos>" etc. for specials).
    std::string token_text(int id) const;

    static bool is_special(int id) noexcept { return id >= kPad; }

    /// Model input for a prompt: bos, prompt bytes, newline separator.
    std::vector<int> encode_prompt(std::string_view prompt) const;

private:
    void check_id(int id) const;

    std::size_t vocab_size_;
};

}  // namespace infosteer
