#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "aplab/common.hpp"
#include "aplab/vocab.hpp"

namespace ap::metrics {

struct BleuConfig {
    std::uint32_t max_order = 4;
    double epsilon = 1e-9;
};

struct BleuDiagnostics {
    std::size_t empty_candidates = 0;
};

// Modified sentence BLEU: clipped k-gram precision with additive smoothing,
// uniform weights, no brevity penalty. Orders where the candidate has zero
// k-grams are excluded from the geometric mean, so a short candidate that is
// a perfect prefix of the reference scores 1.0. An empty candidate scores the
// epsilon floor.
double bleu_modified(TokenView candidate, TokenView reference, const BleuConfig& cfg = {},
                     BleuDiagnostics* diag = nullptr);

double mean(const std::vector<double>& v);
// Sample standard deviation (n-1 denominator); 0 for fewer than two values.
double sample_sd(const std::vector<double>& v);
double median(std::vector<double> v);

// Regularized incomplete beta function I_x(a, b).
double incomplete_beta(double a, double b, double x);

struct TTestResult {
    double t = 0.0;
    double p_two_tailed = 1.0;
    std::size_t df = 0;
};

// Paired two-tailed Student t-test on equal-length samples; errors when the
// differences have zero variance.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(std::size_t dim) : dim_(dim) {}

    // Text format: one line per token, "<token> v1 v2 ... vD".
    static EmbeddingTable load_text(const std::string& path, const corpus::Vocab& vocab,
                                    std::size_t* skipped_lines = nullptr);

    void set(TokenId id, std::vector<float> v);
    bool has(TokenId id) const { return vectors_.count(id) != 0; }
    const std::vector<float>* get(TokenId id) const;
    std::size_t dim() const { return dim_; }
    std::size_t size() const { return vectors_.size(); }

private:
    std::size_t dim_ = 0;
    std::unordered_map<TokenId, std::vector<float>> vectors_;
};

// Cosine similarity; errors on zero vectors or dimension mismatch.
double cosine(const std::vector<float>& a, const std::vector<float>& b);

struct SemanticConsistency {
    double sim_to_original = 0.0; // mean cosine(original, member)
    double intra_set_sim = 0.0;   // mean pairwise cosine over members + original
    std::size_t used_members = 0;
    std::size_t skipped_members = 0;
};

// Restricted to language-like members with embeddings; absent when nothing
// usable remains (or the original itself is unusable).
std::optional<SemanticConsistency> semantic_consistency(TokenId original,
                                                        const std::vector<TokenId>& members,
                                                        const EmbeddingTable& emb,
                                                        const corpus::Vocab& vocab);

struct CompositionalCase {
    std::size_t triple_id = 0;
    std::uint32_t position = 0;
    TokenId original_token = 0;
    TokenId substitute_token = 0;
    std::string original_word; // continuation word that changed
    std::string new_word;
    // cos(original_token, original_word), cos(original_token, new_word),
    // cos(substitute_token, original_word), cos(substitute_token, new_word)
    std::array<double, 4> cosines{};
};

// Single-typographic-word continuation diffs: both continuations detokenize to
// the same number of whitespace words and differ at exactly one index.
// Cases where any of the four embeddings is missing are dropped and counted.
struct CompositionalInput {
    std::size_t triple_id;
    std::uint32_t position;
    TokenId original_token;
    TokenId substitute_token;
    TokenView reference_continuation;
    TokenView new_continuation;
};

std::vector<CompositionalCase> extract_compositional_cases(
    const std::vector<CompositionalInput>& inputs, const EmbeddingTable& emb,
    const corpus::Vocab& vocab, std::size_t* missing_embedding = nullptr);

struct CompositionalStats {
    double frac_original_closer_to_new = 0.0;
    double frac_substitute_closer_to_new = 0.0;
    std::size_t cases = 0;
};

// Strict-inequality comparisons; ties count only in the denominator.
std::optional<CompositionalStats> compositional_stats(const std::vector<CompositionalCase>& cases);

} // namespace ap::metrics
