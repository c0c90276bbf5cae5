#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "aplab/backend.hpp"
#include "aplab/common.hpp"
#include "aplab/corpus.hpp"
#include "aplab/metrics.hpp"
#include "aplab/rng.hpp"

namespace ap::ablate {

struct PruneResult {
    TokenSeq input;
    TokenSeq pruned;
    std::vector<std::pair<std::uint32_t, TokenId>> removed; // (position in input, token)
    std::uint32_t steps = 0;
};

// Greedy pruning: repeatedly delete one token chosen uniformly among all
// single-token deletions that leave the greedy continuation unchanged; stops
// when none qualifies or a single token remains. The prompt must reproduce
// the reference continuation on entry.
PruneResult prune_greedy(const backend::LmBackend& backend, TokenView prompt, TokenView reference,
                         std::uint32_t max_new, const lm::StopPolicy& stop, RandomStream& rng,
                         unsigned workers = 1);

enum class EffectBin : std::uint8_t { null_effect = 0, moderate = 1, strong = 2 };

const char* effect_bin_name(EffectBin bin);

struct ReplacementRecord {
    TokenId substitute = 0;
    double bleu = 0.0;
    EffectBin bin = EffectBin::strong;
    // Index into SweepResult::continuations; -1 when the continuation equals
    // the reference.
    std::int32_t continuation_index = -1;
};

struct PositionSweep {
    std::uint32_t position = 0;
    TokenId original = 0;
    std::vector<ReplacementRecord> records; // ordered by substitute token id
    std::vector<TokenId> equivalents;       // null-effect substitutes, ascending
};

struct SweepResult {
    std::vector<PositionSweep> positions;
    std::vector<TokenSeq> continuations; // deduplicated changed continuations
};

// Replaces the token at each position in turn with every pool candidate
// (excluding the original token), decoding and scoring BLEU against the
// reference. A replacement is null-effect iff the continuation is exactly
// unchanged, independent of its BLEU; otherwise moderate when
// bleu >= moderate_threshold and strong below it.
SweepResult replace_sweep(const backend::LmBackend& backend, TokenView pruned_prompt,
                          TokenView reference, const std::vector<TokenId>& pool,
                          double moderate_threshold, const metrics::BleuConfig& bleu_cfg,
                          std::uint32_t max_new, const lm::StopPolicy& stop,
                          unsigned workers = 1);

enum class ShuffleMode : std::uint8_t { all = 0, keep_last = 1, keep_random_non_last = 2 };

const char* shuffle_mode_name(ShuffleMode mode);

struct ShuffleOutcome {
    ShuffleMode mode = ShuffleMode::all;
    std::uint32_t repetitions = 0;
    std::vector<std::vector<std::uint32_t>> permutations; // new position -> source position
    std::vector<double> bleu;
    double mean = 0.0;
    double sd = 0.0;
};

// Uniformly permutes the designated span per repetition and scores the decoded
// continuation against the reference. keep_last fixes the final token;
// keep_random_non_last fixes one uniformly chosen non-last token per
// repetition (so the permuted span has the same size as keep_last).
ShuffleOutcome shuffle_ablation(const backend::LmBackend& backend, TokenView prompt,
                                TokenView reference, ShuffleMode mode, std::uint32_t reps,
                                const metrics::BleuConfig& bleu_cfg, std::uint32_t max_new,
                                const lm::StopPolicy& stop, RandomStream& rng,
                                unsigned workers = 1);

// Fraction of adjacent in-prompt bigrams (pairs touching the last position
// excluded) with at least one attested order whose original order is strictly
// more frequent than the inverted one. Absent when no pair is attested.
std::optional<double> bigram_order_preference(const std::vector<TokenSeq>& prompts,
                                              const corpus::BigramTable& table);

struct PruneHistogram {
    // Index 0 = last token position (right-aligned).
    std::vector<std::uint64_t> pruned;
    std::vector<std::uint64_t> kept;
};

PruneHistogram prune_position_histogram(const std::vector<PruneResult>& results);

struct EffectPositionRow {
    std::uint32_t position = 0; // right-aligned, 0 = last
    std::size_t prompts = 0;    // prompts long enough to have this position
    double mean[3] = {0, 0, 0}; // null, moderate, strong proportions
    double sd[3] = {0, 0, 0};
};

// Per-position averages (and sds) of per-prompt effect-bin proportions,
// aligned from the right.
std::vector<EffectPositionRow> effect_position_stats(const std::vector<SweepResult>& sweeps);

} // namespace ap::ablate
