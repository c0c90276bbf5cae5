#pragma once

#include <cstdint>
#include <vector>

#include "aplab/backend.hpp"
#include "aplab/common.hpp"
#include "aplab/corpus.hpp"
#include "aplab/metrics.hpp"
#include "aplab/rng.hpp"

namespace ap::gcg {

struct GcgConfig {
    std::uint32_t prompt_len = 10;
    std::uint32_t topk = 256;      // gradient top-k per position
    std::uint32_t candidates = 256; // sampled substitutions per iteration
    std::uint32_t max_iters = 50;
    bool exhaustive = false; // evaluate the whole topk grid instead of sampling
    std::vector<TokenId> mutation_pool; // empty = full vocabulary
    std::vector<TokenId> init_pool;     // empty = mutation_pool, then full vocabulary

    void validate(std::size_t vocab_size) const;
};

struct Candidate {
    std::uint32_t position;
    TokenId token;
};

// Per position: the topk tokens with the most negative gradient entries,
// restricted to the pool, ordered by (gradient asc, token id asc).
std::vector<std::vector<TokenId>> topk_candidates(const lm::GradMatrixF& grad, std::uint32_t topk,
                                                  const std::vector<TokenId>& pool);

// Uniform over positions, then uniform over that position's top-k list,
// with replacement.
std::vector<Candidate> sample_candidates(const std::vector<std::vector<TokenId>>& lists,
                                         std::uint32_t count, RandomStream& rng);

struct StepResult {
    TokenSeq prompt;
    float loss = 0.0f;           // loss of the returned prompt
    float incumbent_loss = 0.0f; // loss of the input prompt
    std::size_t evaluated = 0;   // distinct substitutions scored
};

// One coordinate step: gradient top-k proposal, candidate scoring, and
// selection of the minimum-loss sequence. The incumbent is always part of
// the comparison, so loss never increases; ties keep the incumbent, and ties
// among candidates resolve to the lowest (position, token id).
StepResult gcg_step(const backend::LmBackend& backend, TokenView prompt, TokenView target,
                    const GcgConfig& cfg, RandomStream& rng, unsigned workers = 1);

struct InduceResult {
    TokenSeq autoprompt;
    float final_loss = 0.0f;
    std::uint32_t iters_used = 0;
    bool success = false;
};

// Random initialization from the init pool, then up to max_iters steps with
// an exact-reproduction check (greedy decode vs. target) after every step.
// Failure to converge is a recorded outcome, not an error.
InduceResult induce_autoprompt(const backend::LmBackend& backend, TokenView target,
                               const GcgConfig& cfg, std::uint32_t max_new,
                               const lm::StopPolicy& stop, std::uint64_t seed,
                               unsigned workers = 1);

struct DatasetFilters {
    std::uint32_t min_prompt_len = 35;
    std::uint32_t max_prompt_len = 80;
    std::uint32_t min_cont_len = 4;
    double memorization_bleu_max = 0.1;
    std::uint32_t max_new = 25;

    void validate() const;
};

struct DatasetRow {
    std::size_t id = 0;  // index within the kept rows
    std::size_t doc = 0; // provenance of the sampled span
    std::size_t begin = 0;
    TokenSeq prompt;
    TokenSeq continuation;        // model's greedy continuation
    TokenSeq corpus_continuation; // what actually followed in the corpus
    double memorization_bleu = 0.0;
    bool truncated = false;
};

struct DatasetStats {
    std::size_t sampled = 0;
    std::size_t short_continuation = 0;
    std::size_t memorized = 0;
    std::size_t kept = 0;
};

// Samples original prompts, decodes their continuations and applies the
// length and memorization filters.
std::vector<DatasetRow> build_prompt_dataset(const backend::LmBackend& backend,
                                             const corpus::Corpus& corpus,
                                             const DatasetFilters& filters,
                                             std::size_t sample_count, std::uint64_t seed,
                                             unsigned workers, DatasetStats* stats = nullptr);

struct Triple {
    std::size_t id = 0;
    TokenSeq original_prompt;
    TokenSeq autoprompt;
    TokenSeq continuation;
    float final_loss = 0.0f;
    std::uint32_t iters_used = 0;
    bool success = false;
    double memorization_bleu = 0.0;
};

struct InduceStats {
    std::size_t attempted = 0;
    std::size_t succeeded = 0;
    double success_rate = 0.0;
};

// Runs induction against every dataset row and keeps exact successes.
std::vector<Triple> build_triple_dataset(const backend::LmBackend& backend,
                                         const std::vector<DatasetRow>& rows,
                                         const GcgConfig& cfg, const DatasetFilters& filters,
                                         std::uint64_t seed, unsigned workers,
                                         InduceStats* stats = nullptr);

} // namespace ap::gcg
