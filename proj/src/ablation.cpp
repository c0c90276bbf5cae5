#include "aplab/ablation.hpp"

#include <algorithm>
#include <map>

#include "aplab/parallel.hpp"

namespace ap::ablate {

namespace {

bool same_tokens(const TokenSeq& a, TokenView b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

void check_reproduces(const backend::LmBackend& backend, TokenView prompt, TokenView reference,
                      std::uint32_t max_new, const lm::StopPolicy& stop, const char* who) {
    lm::DecodeResult d = backend.decode(prompt, max_new, stop);
    require(same_tokens(d.tokens, reference), ErrorKind::invalid_argument,
            std::string(who) + ": prompt does not reproduce the reference continuation");
}

} // namespace

PruneResult prune_greedy(const backend::LmBackend& backend, TokenView prompt, TokenView reference,
                         std::uint32_t max_new, const lm::StopPolicy& stop, RandomStream& rng,
                         unsigned workers) {
    require(!prompt.empty(), ErrorKind::invalid_argument, "empty prompt");
    require(!reference.empty(), ErrorKind::invalid_argument, "empty reference continuation");
    check_reproduces(backend, prompt, reference, max_new, stop, "prune_greedy");

    PruneResult res;
    res.input.assign(prompt.begin(), prompt.end());
    res.pruned = res.input;
    std::vector<std::uint32_t> origin(prompt.size());
    for (std::uint32_t i = 0; i < origin.size(); ++i) origin[i] = i;

    while (res.pruned.size() >= 2) {
        const std::size_t len = res.pruned.size();
        std::vector<char> qualifies(len, 0);
        parallel_for(len, workers, [&](std::size_t skip) {
            TokenSeq shorter;
            shorter.reserve(len - 1);
            for (std::size_t i = 0; i < len; ++i)
                if (i != skip) shorter.push_back(res.pruned[i]);
            lm::DecodeResult d = backend.decode(shorter, max_new, stop);
            qualifies[skip] = same_tokens(d.tokens, reference) ? 1 : 0;
        });
        std::vector<std::size_t> options;
        for (std::size_t i = 0; i < len; ++i)
            if (qualifies[i]) options.push_back(i);
        if (options.empty()) break;
        std::size_t pick = options[rng.index(options.size())];
        res.removed.emplace_back(origin[pick], res.pruned[pick]);
        res.pruned.erase(res.pruned.begin() + pick);
        origin.erase(origin.begin() + pick);
        ++res.steps;
    }
    std::sort(res.removed.begin(), res.removed.end());
    return res;
}

const char* effect_bin_name(EffectBin bin) {
    switch (bin) {
        case EffectBin::null_effect: return "null";
        case EffectBin::moderate: return "moderate";
        case EffectBin::strong: return "strong";
    }
    return "?";
}

SweepResult replace_sweep(const backend::LmBackend& backend, TokenView pruned_prompt,
                          TokenView reference, const std::vector<TokenId>& pool,
                          double moderate_threshold, const metrics::BleuConfig& bleu_cfg,
                          std::uint32_t max_new, const lm::StopPolicy& stop, unsigned workers) {
    require(!pool.empty(), ErrorKind::invalid_argument, "empty replacement pool");
    require(!pruned_prompt.empty(), ErrorKind::invalid_argument, "empty prompt");
    check_reproduces(backend, pruned_prompt, reference, max_new, stop, "replace_sweep");

    std::vector<TokenId> ordered_pool = pool;
    std::sort(ordered_pool.begin(), ordered_pool.end());
    ordered_pool.erase(std::unique(ordered_pool.begin(), ordered_pool.end()), ordered_pool.end());

    SweepResult res;
    std::map<TokenSeq, std::int32_t> cont_index;
    const std::size_t len = pruned_prompt.size();

    for (std::size_t p = 0; p < len; ++p) {
        PositionSweep sweep;
        sweep.position = static_cast<std::uint32_t>(p);
        sweep.original = pruned_prompt[p];

        std::vector<TokenId> cands;
        cands.reserve(ordered_pool.size());
        for (TokenId c : ordered_pool)
            if (c != sweep.original) cands.push_back(c);

        auto prefix = backend.prefix_decoder(pruned_prompt.subspan(0, p));
        TokenView tail = pruned_prompt.subspan(p + 1);

        struct Eval {
            lm::DecodeResult dec;
            double bleu = 0.0;
            bool null_effect = false;
        };
        std::vector<Eval> evals(cands.size());
        parallel_for(cands.size(), workers, [&](std::size_t i) {
            TokenSeq suffix;
            suffix.reserve(1 + tail.size());
            suffix.push_back(cands[i]);
            suffix.insert(suffix.end(), tail.begin(), tail.end());
            Eval& e = evals[i];
            e.dec = prefix->continue_with(suffix, max_new, stop);
            e.null_effect = same_tokens(e.dec.tokens, reference);
            e.bleu = metrics::bleu_modified(e.dec.tokens, reference, bleu_cfg);
        });

        sweep.records.reserve(cands.size());
        for (std::size_t i = 0; i < cands.size(); ++i) {
            Eval& e = evals[i];
            ReplacementRecord rec;
            rec.substitute = cands[i];
            rec.bleu = e.bleu;
            if (e.null_effect) {
                rec.bin = EffectBin::null_effect;
                rec.continuation_index = -1;
                sweep.equivalents.push_back(cands[i]);
            } else {
                rec.bin = e.bleu >= moderate_threshold ? EffectBin::moderate : EffectBin::strong;
                auto [it, inserted] =
                    cont_index.emplace(std::move(e.dec.tokens),
                                       static_cast<std::int32_t>(res.continuations.size()));
                if (inserted) res.continuations.push_back(it->first);
                rec.continuation_index = it->second;
            }
            sweep.records.push_back(rec);
        }
        res.positions.push_back(std::move(sweep));
    }
    return res;
}

const char* shuffle_mode_name(ShuffleMode mode) {
    switch (mode) {
        case ShuffleMode::all: return "all";
        case ShuffleMode::keep_last: return "keep_last";
        case ShuffleMode::keep_random_non_last: return "keep_random_non_last";
    }
    return "?";
}

ShuffleOutcome shuffle_ablation(const backend::LmBackend& backend, TokenView prompt,
                                TokenView reference, ShuffleMode mode, std::uint32_t reps,
                                const metrics::BleuConfig& bleu_cfg, std::uint32_t max_new,
                                const lm::StopPolicy& stop, RandomStream& rng, unsigned workers) {
    require(reps >= 1, ErrorKind::invalid_argument, "repetitions must be >= 1");
    require(!prompt.empty(), ErrorKind::invalid_argument, "empty prompt");
    require(!reference.empty(), ErrorKind::invalid_argument, "empty reference");

    const std::size_t len = prompt.size();
    ShuffleOutcome out;
    out.mode = mode;
    out.repetitions = reps;
    out.permutations.resize(reps);

    // All permutations are drawn up front from the sequential stream so that
    // worker count cannot affect the draws.
    for (std::uint32_t r = 0; r < reps; ++r) {
        std::vector<std::uint32_t> perm(len);
        for (std::size_t i = 0; i < len; ++i) perm[i] = static_cast<std::uint32_t>(i);
        std::vector<std::uint32_t> movable;
        if (len >= 2) {
            if (mode == ShuffleMode::all) {
                movable.assign(perm.begin(), perm.end());
            } else if (mode == ShuffleMode::keep_last) {
                movable.assign(perm.begin(), perm.end() - 1);
            } else {
                std::uint32_t fixed = static_cast<std::uint32_t>(rng.index(len - 1));
                for (std::uint32_t i = 0; i < len; ++i)
                    if (i != fixed) movable.push_back(i);
            }
            std::vector<std::uint32_t> shuffled = movable;
            rng.shuffle(shuffled);
            for (std::size_t i = 0; i < movable.size(); ++i) perm[movable[i]] = shuffled[i];
        }
        out.permutations[r] = std::move(perm);
    }

    out.bleu.resize(reps);
    parallel_for(reps, workers, [&](std::size_t r) {
        TokenSeq shuffled(len);
        for (std::size_t i = 0; i < len; ++i) shuffled[i] = prompt[out.permutations[r][i]];
        lm::DecodeResult d = backend.decode(shuffled, max_new, stop);
        out.bleu[r] = metrics::bleu_modified(d.tokens, reference, bleu_cfg);
    });
    out.mean = metrics::mean(out.bleu);
    out.sd = metrics::sample_sd(out.bleu);
    return out;
}

std::optional<double> bigram_order_preference(const std::vector<TokenSeq>& prompts,
                                              const corpus::BigramTable& table) {
    std::uint64_t attested = 0, preferred = 0;
    for (const auto& prompt : prompts) {
        if (prompt.size() < 3) continue; // needs a pair not touching the last position
        for (std::size_t i = 0; i + 2 < prompt.size(); ++i) {
            std::uint64_t fwd = table.pair_count(prompt[i], prompt[i + 1]);
            std::uint64_t rev = table.pair_count(prompt[i + 1], prompt[i]);
            if (fwd == 0 && rev == 0) continue;
            ++attested;
            if (fwd > rev) ++preferred;
        }
    }
    if (attested == 0) return std::nullopt;
    return static_cast<double>(preferred) / static_cast<double>(attested);
}

PruneHistogram prune_position_histogram(const std::vector<PruneResult>& results) {
    require(!results.empty(), ErrorKind::invalid_argument, "no prune results");
    std::size_t max_len = 0;
    for (const auto& r : results) max_len = std::max(max_len, r.input.size());
    PruneHistogram h;
    h.pruned.assign(max_len, 0);
    h.kept.assign(max_len, 0);
    for (const auto& r : results) {
        std::vector<char> removed(r.input.size(), 0);
        for (const auto& [pos, tok] : r.removed) removed[pos] = 1;
        for (std::size_t pos = 0; pos < r.input.size(); ++pos) {
            std::size_t right = r.input.size() - 1 - pos;
            if (removed[pos]) ++h.pruned[right];
            else ++h.kept[right];
        }
    }
    return h;
}

std::vector<EffectPositionRow> effect_position_stats(const std::vector<SweepResult>& sweeps) {
    require(!sweeps.empty(), ErrorKind::invalid_argument, "no replacement sweeps");
    std::size_t max_len = 0;
    for (const auto& s : sweeps) max_len = std::max(max_len, s.positions.size());
    std::vector<std::array<std::vector<double>, 3>> samples(max_len);

    for (const auto& s : sweeps) {
        const std::size_t len = s.positions.size();
        for (const auto& pos : s.positions) {
            if (pos.records.empty()) continue;
            std::size_t right = len - 1 - pos.position;
            double counts[3] = {0, 0, 0};
            for (const auto& rec : pos.records) counts[static_cast<std::size_t>(rec.bin)] += 1.0;
            double total = static_cast<double>(pos.records.size());
            for (std::size_t b = 0; b < 3; ++b) samples[right][b].push_back(counts[b] / total);
        }
    }

    std::vector<EffectPositionRow> rows;
    for (std::size_t right = 0; right < max_len; ++right) {
        EffectPositionRow row;
        row.position = static_cast<std::uint32_t>(right);
        row.prompts = samples[right][0].size();
        if (row.prompts == 0) {
            rows.push_back(row);
            continue;
        }
        for (std::size_t b = 0; b < 3; ++b) {
            row.mean[b] = metrics::mean(samples[right][b]);
            row.sd[b] = metrics::sample_sd(samples[right][b]);
        }
        rows.push_back(row);
    }
    return rows;
}

} // namespace ap::ablate
