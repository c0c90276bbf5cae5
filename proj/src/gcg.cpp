#include "aplab/gcg.hpp"

#include <algorithm>

#include "aplab/parallel.hpp"

namespace ap::gcg {

void GcgConfig::validate(std::size_t vocab_size) const {
    require(prompt_len >= 1, ErrorKind::invalid_argument, "prompt_len must be >= 1");
    require(topk >= 1, ErrorKind::invalid_argument, "topk must be >= 1");
    require(candidates >= 1, ErrorKind::invalid_argument, "candidates must be >= 1");
    require(topk <= vocab_size, ErrorKind::invalid_argument,
            "topk " + std::to_string(topk) + " exceeds vocabulary size " +
                std::to_string(vocab_size));
    for (TokenId t : mutation_pool)
        require(t < vocab_size, ErrorKind::invalid_argument, "mutation pool token out of range");
    for (TokenId t : init_pool)
        require(t < vocab_size, ErrorKind::invalid_argument, "init pool token out of range");
}

std::vector<std::vector<TokenId>> topk_candidates(const lm::GradMatrixF& grad, std::uint32_t topk,
                                                  const std::vector<TokenId>& pool) {
    std::vector<TokenId> universe = pool;
    if (universe.empty()) {
        universe.resize(grad.cols);
        for (std::size_t v = 0; v < grad.cols; ++v) universe[v] = static_cast<TokenId>(v);
    } else {
        std::sort(universe.begin(), universe.end());
        universe.erase(std::unique(universe.begin(), universe.end()), universe.end());
    }
    require(!universe.empty(), ErrorKind::invalid_argument, "empty candidate pool");

    std::vector<std::vector<TokenId>> lists(grad.rows);
    std::vector<TokenId> order(universe);
    for (std::size_t i = 0; i < grad.rows; ++i) {
        const float* row = grad.values.data() + i * grad.cols;
        order = universe;
        std::sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
            if (row[a] != row[b]) return row[a] < row[b];
            return a < b;
        });
        std::size_t k = std::min<std::size_t>(topk, order.size());
        lists[i].assign(order.begin(), order.begin() + k);
    }
    return lists;
}

std::vector<Candidate> sample_candidates(const std::vector<std::vector<TokenId>>& lists,
                                         std::uint32_t count, RandomStream& rng) {
    require(!lists.empty(), ErrorKind::invalid_argument, "no positions to sample from");
    std::vector<Candidate> out;
    out.reserve(count);
    for (std::uint32_t c = 0; c < count; ++c) {
        std::uint32_t pos = static_cast<std::uint32_t>(rng.index(lists.size()));
        const auto& list = lists[pos];
        out.push_back({pos, list[rng.index(list.size())]});
    }
    return out;
}

StepResult gcg_step(const backend::LmBackend& backend, TokenView prompt, TokenView target,
                    const GcgConfig& cfg, RandomStream& rng, unsigned workers) {
    require(prompt.size() == cfg.prompt_len, ErrorKind::invalid_argument,
            "prompt length does not match configuration");
    require(backend.capabilities().supports_grad, ErrorKind::unsupported,
            "backend does not support gradients");

    lm::GradMatrixF grad = backend.grad(prompt, target);
    auto lists = topk_candidates(grad, cfg.topk, cfg.mutation_pool);

    std::vector<Candidate> cands;
    if (cfg.exhaustive) {
        for (std::uint32_t p = 0; p < lists.size(); ++p)
            for (TokenId t : lists[p]) cands.push_back({p, t});
    } else {
        cands = sample_candidates(lists, cfg.candidates, rng);
    }

    // Deduplicate and order by (position, token id); selection scans in this
    // order with strict improvement, which implements the tie-breaking rule.
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.position != b.position) return a.position < b.position;
        return a.token < b.token;
    });
    cands.erase(std::unique(cands.begin(), cands.end(),
                            [](const Candidate& a, const Candidate& b) {
                                return a.position == b.position && a.token == b.token;
                            }),
                cands.end());

    std::vector<double> losses(cands.size());
    parallel_for(cands.size(), workers, [&](std::size_t i) {
        TokenSeq mutated(prompt.begin(), prompt.end());
        mutated[cands[i].position] = cands[i].token;
        losses[i] = backend.loss(mutated, target);
    });

    StepResult res;
    res.incumbent_loss = grad.loss_at_point;
    res.evaluated = cands.size();
    double best = static_cast<double>(grad.loss_at_point);
    std::size_t best_idx = cands.size();
    for (std::size_t i = 0; i < cands.size(); ++i) {
        if (losses[i] < best) {
            best = losses[i];
            best_idx = i;
        }
    }
    res.prompt.assign(prompt.begin(), prompt.end());
    if (best_idx < cands.size()) {
        res.prompt[cands[best_idx].position] = cands[best_idx].token;
        res.loss = static_cast<float>(losses[best_idx]);
    } else {
        res.loss = grad.loss_at_point;
    }
    return res;
}

InduceResult induce_autoprompt(const backend::LmBackend& backend, TokenView target,
                               const GcgConfig& cfg, std::uint32_t max_new,
                               const lm::StopPolicy& stop, std::uint64_t seed, unsigned workers) {
    require(!target.empty(), ErrorKind::invalid_argument, "empty induction target");
    const std::size_t vocab_size = backend.vocab().size();
    cfg.validate(vocab_size);

    std::vector<TokenId> init_pool = cfg.init_pool;
    if (init_pool.empty()) init_pool = cfg.mutation_pool;
    if (init_pool.empty()) {
        init_pool.resize(vocab_size);
        for (std::size_t v = 0; v < vocab_size; ++v) init_pool[v] = static_cast<TokenId>(v);
    }

    RandomStream rng(seed);
    InduceResult res;
    res.autoprompt.resize(cfg.prompt_len);
    for (auto& t : res.autoprompt) t = init_pool[rng.index(init_pool.size())];

    auto reproduces = [&](const TokenSeq& prompt) {
        lm::DecodeResult d = backend.decode(prompt, max_new, stop);
        return d.tokens.size() == target.size() &&
               std::equal(d.tokens.begin(), d.tokens.end(), target.begin());
    };

    if (reproduces(res.autoprompt)) {
        res.success = true;
        res.final_loss = static_cast<float>(backend.loss(res.autoprompt, target));
        return res;
    }

    float loss = 0.0f;
    bool have_loss = false;
    for (std::uint32_t it = 1; it <= cfg.max_iters; ++it) {
        StepResult step = gcg_step(backend, res.autoprompt, target, cfg, rng, workers);
        res.autoprompt = std::move(step.prompt);
        loss = step.loss;
        have_loss = true;
        res.iters_used = it;
        if (reproduces(res.autoprompt)) {
            res.success = true;
            break;
        }
    }
    res.final_loss = have_loss ? loss : static_cast<float>(backend.loss(res.autoprompt, target));
    return res;
}

void DatasetFilters::validate() const {
    require(min_prompt_len >= 1 && min_prompt_len <= max_prompt_len, ErrorKind::invalid_argument,
            "invalid prompt length filter bounds");
    require(min_cont_len >= 1, ErrorKind::invalid_argument, "min_cont_len must be >= 1");
    require(memorization_bleu_max >= 0.0 && memorization_bleu_max <= 1.0,
            ErrorKind::invalid_argument, "memorization_bleu_max must lie in [0,1]");
    require(max_new >= min_cont_len, ErrorKind::invalid_argument,
            "max_new must be at least min_cont_len");
}

std::vector<DatasetRow> build_prompt_dataset(const backend::LmBackend& backend,
                                             const corpus::Corpus& corpus,
                                             const DatasetFilters& filters,
                                             std::size_t sample_count, std::uint64_t seed,
                                             unsigned workers, DatasetStats* stats) {
    filters.validate();
    RandomStream rng = derive_stream(seed, "dataset-sample");
    auto samples = corpus::sample_original_prompts(corpus, sample_count, filters.min_prompt_len,
                                                   filters.max_prompt_len, rng);
    lm::StopPolicy stop = backend.sentence_stop();

    struct Scored {
        DatasetRow row;
        bool keep = false;
        bool too_short = false;
        bool memorized = false;
    };
    std::vector<Scored> scored(samples.size());
    parallel_for(samples.size(), workers, [&](std::size_t i) {
        const auto& s = samples[i];
        Scored& sc = scored[i];
        TokenView prompt = corpus.slice(s.doc, s.begin, s.len);
        lm::DecodeResult dec = backend.decode(prompt, filters.max_new, stop);
        sc.row.doc = s.doc;
        sc.row.begin = s.begin;
        sc.row.prompt.assign(prompt.begin(), prompt.end());
        sc.row.continuation = dec.tokens;
        sc.row.truncated = dec.truncated;
        sc.row.corpus_continuation =
            corpus.continuation_after(s.doc, s.begin, s.len, filters.max_new);
        if (dec.tokens.size() < filters.min_cont_len) {
            sc.too_short = true;
            return;
        }
        sc.row.memorization_bleu =
            sc.row.corpus_continuation.empty()
                ? 0.0
                : metrics::bleu_modified(sc.row.continuation, sc.row.corpus_continuation);
        if (sc.row.memorization_bleu > filters.memorization_bleu_max) {
            sc.memorized = true;
            return;
        }
        sc.keep = true;
    });

    std::vector<DatasetRow> rows;
    DatasetStats st;
    st.sampled = samples.size();
    for (auto& sc : scored) {
        if (sc.too_short) ++st.short_continuation;
        if (sc.memorized) ++st.memorized;
        if (!sc.keep) continue;
        sc.row.id = rows.size();
        rows.push_back(std::move(sc.row));
    }
    st.kept = rows.size();
    if (stats) *stats = st;
    return rows;
}

std::vector<Triple> build_triple_dataset(const backend::LmBackend& backend,
                                         const std::vector<DatasetRow>& rows,
                                         const GcgConfig& cfg, const DatasetFilters& filters,
                                         std::uint64_t seed, unsigned workers,
                                         InduceStats* stats) {
    lm::StopPolicy stop = backend.sentence_stop();
    std::vector<InduceResult> results(rows.size());
    // Parallelism across targets; candidate scoring inside a step stays
    // single-threaded here so per-target streams alone determine the result.
    parallel_for(rows.size(), workers, [&](std::size_t i) {
        results[i] = induce_autoprompt(backend, rows[i].continuation, cfg, filters.max_new, stop,
                                       derive_seed(seed, "induce", rows[i].id), 1);
    });

    std::vector<Triple> triples;
    InduceStats st;
    st.attempted = rows.size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!results[i].success) continue;
        Triple t;
        t.id = rows[i].id;
        t.original_prompt = rows[i].prompt;
        t.autoprompt = std::move(results[i].autoprompt);
        t.continuation = rows[i].continuation;
        t.final_loss = results[i].final_loss;
        t.iters_used = results[i].iters_used;
        t.success = true;
        t.memorization_bleu = rows[i].memorization_bleu;
        triples.push_back(std::move(t));
    }
    st.succeeded = triples.size();
    st.success_rate = st.attempted ? static_cast<double>(st.succeeded) / st.attempted : 0.0;
    if (stats) *stats = st;
    return triples;
}

} // namespace ap::gcg
