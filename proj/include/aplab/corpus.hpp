#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "aplab/common.hpp"
#include "aplab/rng.hpp"
#include "aplab/vocab.hpp"

namespace ap::corpus {

// Token index range [begin, end) into a document's token array.
struct SentenceSpan {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t length() const { return end - begin; }
};

struct Document {
    TokenSeq tokens;
    std::vector<SentenceSpan> sentences;
    std::size_t unknown_count = 0;
};

// Splits raw text into sentence strings on '.', '!' or '?' followed by
// whitespace (or end of text). The terminator stays with its sentence.
std::vector<std::string> split_sentences(std::string_view text);

class Corpus {
public:
    // One document per non-empty line across all files.
    static Corpus load_files(const std::vector<std::string>& paths, std::size_t vocab_cap);
    static Corpus from_documents(const std::vector<std::string>& doc_texts, std::size_t vocab_cap);
    // Tokenizes documents against an existing vocabulary (e.g. from a
    // checkpoint sidecar) instead of building a fresh one.
    static Corpus from_documents(const std::vector<std::string>& doc_texts, Vocab vocab);
    static Corpus load_files(const std::vector<std::string>& paths, Vocab vocab);

    const Vocab& vocab() const { return vocab_; }
    const std::vector<Document>& docs() const { return docs_; }
    std::size_t total_tokens() const { return total_tokens_; }
    std::size_t unknown_tokens() const { return unknown_tokens_; }

    // Documents joined by <|endoftext|> (one trailing each document); the
    // training token stream.
    TokenSeq training_stream() const;

    // Tokens following [begin+len] in the given document, up to max_len.
    TokenSeq continuation_after(std::size_t doc, std::size_t begin, std::size_t len,
                                std::size_t max_len) const;

    TokenView slice(std::size_t doc, std::size_t begin, std::size_t len) const;

private:
    static std::vector<std::string> read_documents(const std::vector<std::string>& paths);
    static Corpus build(const std::vector<std::string>& doc_texts, Vocab vocab);

    Vocab vocab_;
    std::vector<Document> docs_;
    std::size_t total_tokens_ = 0;
    std::size_t unknown_tokens_ = 0;
};

struct PromptSample {
    std::size_t doc = 0;
    std::size_t begin = 0; // token offset into the document
    std::size_t len = 0;
};

// Samples token spans that lie inside a single sentence, with lengths in
// [min_len, max_len]. Reproducible under the given stream; fails when no
// sentence is long enough. Duplicate spans are skipped, so fewer than `count`
// samples may be returned on small corpora.
std::vector<PromptSample> sample_original_prompts(const Corpus& corpus, std::size_t count,
                                                  std::size_t min_len, std::size_t max_len,
                                                  RandomStream& rng);

class BigramTable {
public:
    static BigramTable build(const Corpus& corpus);

    std::uint64_t unigram_count(TokenId id) const;
    std::uint64_t pair_count(TokenId a, TokenId b) const;
    // log10(count); by convention -1 when the pair is unseen.
    double log_freq(TokenId a, TokenId b) const;

    std::uint64_t total_tokens() const { return total_; }
    std::uint64_t sequence_count() const { return sequences_; }
    std::uint64_t pair_total() const { return pair_total_; }
    std::size_t vocab_size() const { return unigram_.size(); }

    void save_unigram_csv(const std::string& path, const Vocab& vocab) const;
    void save_bigram_csv(const std::string& path, const Vocab& vocab) const;

private:
    static std::uint64_t key(TokenId a, TokenId b) {
        return (static_cast<std::uint64_t>(a) << 32) | b;
    }

    std::vector<std::uint64_t> unigram_;
    std::unordered_map<std::uint64_t, std::uint64_t> pairs_;
    std::uint64_t total_ = 0;
    std::uint64_t sequences_ = 0;
    std::uint64_t pair_total_ = 0;
};

// All vocabulary ids ordered by (count desc, id asc), truncated to k.
std::vector<TokenId> top_frequent_tokens(const BigramTable& table, std::size_t k);

// Observed counts of (token, kept|pruned) occurrences with local mutual
// information scoring over the contingency table.
class LmiTable {
public:
    enum Class : std::size_t { kept = 0, pruned = 1 };

    void add(TokenId token, Class cls, std::uint64_t count = 1);

    std::uint64_t observed(TokenId token, Class cls) const;
    std::uint64_t token_total(TokenId token) const;
    std::uint64_t class_total(Class cls) const { return class_totals_[cls]; }
    std::uint64_t grand_total() const { return total_; }

    // O * log2(O*N / (f_token * f_class)); 0 for unobserved cells; errors on
    // zero marginals.
    double lmi(TokenId token, Class cls) const;

    // Cells with O > 0, ranked by LMI descending, ties by token id ascending.
    std::vector<std::pair<TokenId, double>> ranking(Class cls, std::size_t top_n) const;

private:
    std::unordered_map<TokenId, std::array<std::uint64_t, 2>> observed_;
    std::array<std::uint64_t, 2> class_totals_{0, 0};
    std::uint64_t total_ = 0;
};

} // namespace ap::corpus
