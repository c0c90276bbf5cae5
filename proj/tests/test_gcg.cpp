#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "aplab/backend.hpp"
#include "aplab/gcg.hpp"
#include "aplab/rng.hpp"

using namespace ap;

namespace {

lm::Model small_model(std::uint32_t vocab, std::uint64_t seed) {
    lm::ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.context_len = 24;
    cfg.embed_dim = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    std::vector<std::string> tokens = {corpus::Vocab::kUnk, corpus::Vocab::kEot,
                                       corpus::Vocab::kPad};
    for (std::uint32_t i = 3; i < vocab; ++i) tokens.push_back("t" + std::to_string(i));
    return lm::Model{corpus::Vocab::from_token_list(tokens), lm::ParamsF::random(cfg, seed)};
}

} // namespace

TEST_CASE("topk candidate lists follow the most-negative-gradient order") {
    lm::GradMatrixF g;
    g.rows = 1;
    g.cols = 4;
    g.values = {0.5f, -1.0f, -0.2f, 0.1f};
    auto lists = gcg::topk_candidates(g, 2, {});
    REQUIRE(lists.size() == 1);
    CHECK(lists[0] == std::vector<TokenId>{1, 2});

    // pool restriction
    auto pooled = gcg::topk_candidates(g, 2, {0, 3});
    CHECK(pooled[0] == std::vector<TokenId>{3, 0});

    // ties break toward lower token ids
    lm::GradMatrixF tie;
    tie.rows = 1;
    tie.cols = 3;
    tie.values = {0.0f, 0.0f, 0.0f};
    auto t = gcg::topk_candidates(tie, 2, {});
    CHECK(t[0] == std::vector<TokenId>{0, 1});
}

TEST_CASE("candidate sampling is uniform over positions (chi-square)") {
    const std::size_t n = 10;
    std::vector<std::vector<TokenId>> lists(n, std::vector<TokenId>{1, 2, 3});
    RandomStream rng = derive_stream(77, "uniformity");
    const std::uint32_t draws = 100000;
    auto cands = gcg::sample_candidates(lists, draws, rng);
    std::vector<double> counts(n, 0.0);
    for (const auto& c : cands) counts[c.position] += 1.0;
    double expected = static_cast<double>(draws) / n;
    double chi2 = 0.0;
    for (double o : counts) chi2 += (o - expected) * (o - expected) / expected;
    // chi-square critical value, df=9, p=0.01 (standard table)
    CHECK(chi2 < 21.666);
}

TEST_CASE("gcg_step: loss never increases and selection is deterministic") {
    lm::Model model = small_model(20, 4);
    backend::LocalBackend be(model);
    gcg::GcgConfig cfg;
    cfg.prompt_len = 4;
    cfg.topk = 12;
    cfg.candidates = 24;
    cfg.max_iters = 6;

    RandomStream rng = derive_stream(9, "step");
    TokenSeq prompt = {3, 5, 7, 9};
    TokenSeq target = {4, 6, 8};
    float incumbent = static_cast<float>(be.loss(prompt, target));
    for (int it = 0; it < 6; ++it) {
        auto step = gcg::gcg_step(be, prompt, target, cfg, rng, 2);
        CHECK(step.incumbent_loss == incumbent);
        CHECK(step.loss <= step.incumbent_loss);
        prompt = step.prompt;
        incumbent = step.loss;
    }

    RandomStream ra = derive_stream(10, "det");
    RandomStream rb = derive_stream(10, "det");
    TokenSeq p0 = {3, 5, 7, 9};
    auto sa = gcg::gcg_step(be, p0, target, cfg, ra, 1);
    auto sb = gcg::gcg_step(be, p0, target, cfg, rb, 2);
    CHECK(sa.prompt == sb.prompt);
    CHECK(sa.loss == sb.loss);
}

TEST_CASE("exhaustive step equals the brute-force minimum over all substitutions") {
    lm::Model model = small_model(16, 21);
    backend::LocalBackend be(model);
    gcg::GcgConfig cfg;
    cfg.prompt_len = 2;
    cfg.topk = 16; // = vocab
    cfg.exhaustive = true;

    TokenSeq target = {5, 11, 7};
    RandomStream rng = derive_stream(3, "exhaustive");
    for (TokenSeq prompt : {TokenSeq{3, 4}, TokenSeq{15, 2}, TokenSeq{8, 8}}) {
        auto step = gcg::gcg_step(be, prompt, target, cfg, rng, 2);

        // independent brute force with the same tie rule
        double best = be.loss(prompt, target);
        TokenSeq best_prompt = prompt;
        for (std::uint32_t pos = 0; pos < 2; ++pos) {
            for (TokenId v = 0; v < 16; ++v) {
                TokenSeq cand = prompt;
                cand[pos] = v;
                double l = be.loss(cand, target);
                if (l < best) {
                    best = l;
                    best_prompt = cand;
                }
            }
        }
        CHECK(step.prompt == best_prompt);
        CHECK(step.loss == static_cast<float>(best));
    }
}

TEST_CASE("induce_autoprompt: max_iters=0, success replay, determinism") {
    lm::Model model = small_model(20, 6);
    backend::LocalBackend be(model);
    gcg::GcgConfig cfg;
    cfg.prompt_len = 3;
    cfg.topk = 10;
    cfg.candidates = 32;
    cfg.max_iters = 0;

    // with zero iterations the initialization is returned as-is
    TokenSeq target = {4, 6};
    auto r0 = gcg::induce_autoprompt(be, target, cfg, 5, {}, 123);
    CHECK(r0.iters_used == 0);
    CHECK(r0.autoprompt.size() == 3);
    auto r0b = gcg::induce_autoprompt(be, target, cfg, 5, {}, 123);
    CHECK(r0.autoprompt == r0b.autoprompt);

    // pick a reachable target: the decode of some prompt; then success must
    // replay exactly
    TokenSeq probe = {3, 9, 12};
    TokenSeq reachable = be.decode(probe, 4, {}).tokens;
    cfg.max_iters = 30;
    auto r = gcg::induce_autoprompt(be, reachable, cfg, 4, {}, 7, 2);
    if (r.success) {
        auto replay = be.decode(r.autoprompt, 4, {});
        CHECK(replay.tokens == reachable);
    }
    auto r2 = gcg::induce_autoprompt(be, reachable, cfg, 4, {}, 7, 1);
    CHECK(r.success == r2.success);
    CHECK(r.autoprompt == r2.autoprompt);
    CHECK(r.iters_used == r2.iters_used);
}

TEST_CASE("gcg config validation") {
    gcg::GcgConfig cfg;
    cfg.topk = 300;
    CHECK_THROWS_AS(cfg.validate(256), Error);
    cfg.topk = 0;
    CHECK_THROWS_AS(cfg.validate(256), Error);
    cfg = {};
    cfg.mutation_pool = {999};
    CHECK_THROWS_AS(cfg.validate(256), Error);
    cfg = {};
    CHECK_NOTHROW(cfg.validate(256));
}

TEST_CASE("gradient-free backends are rejected up front") {
    lm::Model model = small_model(18, 14);

    class NoGrad : public backend::LocalBackend {
    public:
        using LocalBackend::LocalBackend;
        backend::Capabilities capabilities() const override { return {false}; }
        lm::GradMatrixF grad(TokenView, TokenView) const override {
            fail(ErrorKind::unsupported, "gradients disabled");
        }
    } be(model);

    gcg::GcgConfig cfg;
    cfg.prompt_len = 2;
    RandomStream rng(1);
    TokenSeq prompt = {3, 4};
    TokenSeq target = {5};
    try {
        gcg::gcg_step(be, prompt, target, cfg, rng);
        FAIL("expected unsupported error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::unsupported);
    }
}

TEST_CASE("dataset filters validate and apply") {
    gcg::DatasetFilters f;
    CHECK_NOTHROW(f.validate());
    f.min_prompt_len = 50;
    f.max_prompt_len = 40;
    CHECK_THROWS_AS(f.validate(), Error);
    f = {};
    f.memorization_bleu_max = 1.5;
    CHECK_THROWS_AS(f.validate(), Error);
    f = {};
    f.max_new = 2; // below min_cont_len
    CHECK_THROWS_AS(f.validate(), Error);
}
