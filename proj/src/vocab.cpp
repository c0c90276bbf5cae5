#include "aplab/vocab.hpp"

#include <algorithm>
#include <cctype>

namespace ap::corpus {

namespace {

bool is_ascii_alpha(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }
bool is_ascii_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_word_byte(unsigned char c) { return is_ascii_alpha(c) || is_ascii_digit(c) || c >= 0x80; }

std::string_view strip_space_marker(std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    // common BPE space markers
    if (s.size() >= 2 && static_cast<unsigned char>(s[0]) == 0xC4 && static_cast<unsigned char>(s[1]) == 0xA0)
        s.remove_prefix(2); // "Ġ"
    if (s.size() >= 3 && static_cast<unsigned char>(s[0]) == 0xE2 && static_cast<unsigned char>(s[1]) == 0x96 &&
        static_cast<unsigned char>(s[2]) == 0x81)
        s.remove_prefix(3); // "▁"
    return s;
}

} // namespace

TokenClass classify_token_string(std::string_view token, bool is_special) {
    if (is_special) return TokenClass::non_linguistic;
    std::string_view s = strip_space_marker(token);
    if (s.empty()) return TokenClass::non_linguistic;
    bool has_alpha = false;
    for (unsigned char c : s) {
        if (c >= 0x80) return TokenClass::non_linguistic;
        if (is_ascii_alpha(c)) has_alpha = true;
    }
    return has_alpha ? TokenClass::language_like : TokenClass::non_linguistic;
}

std::vector<std::string> segment_text(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        unsigned char c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        if (is_word_byte(c)) {
            std::size_t j = i + 1;
            while (j < n && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
            out.emplace_back(text.substr(i, j - i));
            i = j;
        } else {
            out.emplace_back(text.substr(i, 1));
            ++i;
        }
    }
    return out;
}

Vocab Vocab::build(const std::vector<std::string>& ranked_tokens, std::size_t max_size) {
    require(max_size >= 4, ErrorKind::invalid_argument, "vocab max_size must leave room beyond specials");
    Vocab v;
    v.tokens_ = {kUnk, kEot, kPad};
    for (const auto& t : ranked_tokens) {
        if (v.tokens_.size() >= max_size) break;
        if (t == kUnk || t == kEot || t == kPad) continue;
        v.tokens_.push_back(t);
    }
    v.index_tokens();
    return v;
}

Vocab Vocab::from_token_list(std::vector<std::string> tokens) {
    require(tokens.size() >= 3 && tokens[0] == kUnk && tokens[1] == kEot && tokens[2] == kPad,
            ErrorKind::invalid_argument, "token list must start with <unk>, <|endoftext|>, <pad>");
    Vocab v;
    v.tokens_ = std::move(tokens);
    v.index_tokens();
    return v;
}

void Vocab::index_tokens() {
    index_.clear();
    classes_.clear();
    classes_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
        require(inserted, ErrorKind::invalid_argument, "duplicate token in vocabulary: " + tokens_[i]);
        classes_.push_back(classify_token_string(tokens_[i], i <= pad_id_));
    }
}

void Vocab::check_id(TokenId id) const {
    require(id < tokens_.size(), ErrorKind::invalid_argument,
            "token id " + std::to_string(id) + " out of range (vocab size " + std::to_string(tokens_.size()) + ")");
}

const std::string& Vocab::token(TokenId id) const {
    check_id(id);
    return tokens_[id];
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

TokenClass Vocab::token_class(TokenId id) const {
    check_id(id);
    return classes_[id];
}

std::vector<TokenId> Vocab::sentence_end_ids() const {
    std::vector<TokenId> out;
    for (const char* p : {".", "!", "?"}) {
        if (auto id = find(p)) out.push_back(*id);
    }
    return out;
}

TokenizeResult Vocab::tokenize(std::string_view text) const {
    TokenizeResult res;
    for (const auto& piece : segment_text(text)) {
        auto it = index_.find(piece);
        if (it == index_.end()) {
            res.ids.push_back(unk_id_);
            ++res.unknown_count;
        } else {
            res.ids.push_back(it->second);
        }
    }
    return res;
}

std::string Vocab::detokenize(TokenView ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out.push_back(' ');
        out += token(ids[i]);
    }
    return out;
}

} // namespace ap::corpus
