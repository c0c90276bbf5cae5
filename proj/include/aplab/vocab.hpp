#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "aplab/common.hpp"

namespace ap::corpus {

enum class TokenClass : std::uint8_t { language_like = 0, non_linguistic = 1 };

// Rough token classification: a token is non-linguistic when, after stripping
// a leading space marker, it is empty, contains non-ASCII bytes, or contains
// no alphabetic character (digits, punctuation, code fragments). Mixed
// alphanumeric tokens count as language-like.
TokenClass classify_token_string(std::string_view token, bool is_special);

// Splits raw text into orthographic tokens: maximal runs of alphanumeric (or
// non-ASCII) bytes, plus single punctuation characters. Whitespace separates.
std::vector<std::string> segment_text(std::string_view text);

struct TokenizeResult {
    TokenSeq ids;
    std::size_t unknown_count = 0;
};

class Vocab {
public:
    static constexpr const char* kUnk = "<unk>";
    static constexpr const char* kEot = "<|endoftext|>";
    static constexpr const char* kPad = "<pad>";

    // Builds a vocabulary from token strings ordered by (count desc, string
    // asc); `max_size` caps the total size including the three specials.
    static Vocab build(const std::vector<std::string>& ranked_tokens, std::size_t max_size);

    // Reconstructs a vocabulary from an explicit id-ordered token list whose
    // first three entries must be the special tokens.
    static Vocab from_token_list(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(TokenId id) const;
    std::optional<TokenId> find(std::string_view token) const;
    TokenClass token_class(TokenId id) const;
    bool is_special(TokenId id) const { return id <= pad_id_; }
    void check_id(TokenId id) const;

    TokenId unk_id() const { return unk_id_; }
    TokenId eot_id() const { return eot_id_; }
    TokenId pad_id() const { return pad_id_; }

    const std::vector<std::string>& tokens() const { return tokens_; }

    // Ids of sentence-final punctuation tokens present in the vocabulary
    // ('.', '!', '?'); the default greedy-decoding stop set.
    std::vector<TokenId> sentence_end_ids() const;

    TokenizeResult tokenize(std::string_view text) const;
    std::string detokenize(TokenView ids) const;

private:
    void index_tokens();

    std::vector<std::string> tokens_;
    std::vector<TokenClass> classes_;
    std::unordered_map<std::string, TokenId> index_;
    TokenId unk_id_ = 0;
    TokenId eot_id_ = 1;
    TokenId pad_id_ = 2;
};

} // namespace ap::corpus
