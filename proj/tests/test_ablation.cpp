#include <doctest.h>

#include <algorithm>
#include <set>

#include "aplab/ablation.hpp"
#include "aplab/backend.hpp"
#include "aplab/corpus.hpp"
#include "aplab/rng.hpp"

using namespace ap;
using ablate::EffectBin;
using ablate::ShuffleMode;

namespace {

// Zero-layer model with zeroed positional table: decoding depends only on the
// final token, so the anatomy of every ablation is exactly derivable.
lm::Model zero_layer_model(std::uint32_t vocab = 14, std::uint64_t seed = 17) {
    lm::ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.context_len = 40;
    cfg.embed_dim = 8;
    cfg.n_layers = 0;
    cfg.n_heads = 1;
    lm::ParamsF p = lm::ParamsF::random(cfg, seed);
    std::fill(p.pos_embed.begin(), p.pos_embed.end(), 0.0f);
    std::vector<std::string> tokens = {corpus::Vocab::kUnk, corpus::Vocab::kEot,
                                       corpus::Vocab::kPad};
    for (std::uint32_t i = 3; i < vocab; ++i) tokens.push_back("z" + std::to_string(i));
    return lm::Model{corpus::Vocab::from_token_list(tokens), std::move(p)};
}

lm::Model layered_model(std::uint64_t seed = 23) {
    lm::ModelConfig cfg;
    cfg.vocab_size = 18;
    cfg.context_len = 32;
    cfg.embed_dim = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    std::vector<std::string> tokens = {corpus::Vocab::kUnk, corpus::Vocab::kEot,
                                       corpus::Vocab::kPad};
    for (std::uint32_t i = 3; i < 18; ++i) tokens.push_back("y" + std::to_string(i));
    return lm::Model{corpus::Vocab::from_token_list(tokens), lm::ParamsF::random(cfg, seed)};
}

} // namespace

TEST_CASE("zero-layer oracle: pruning reduces to the last token") {
    lm::Model model = zero_layer_model();
    backend::LocalBackend be(model);
    TokenSeq prompt = {3, 5, 7, 9, 11};
    TokenSeq reference = be.decode(prompt, 4, {}).tokens;

    RandomStream rng = derive_stream(1, "prune");
    auto res = ablate::prune_greedy(be, prompt, reference, 4, {}, rng, 2);
    REQUIRE(res.pruned.size() == 1);
    CHECK(res.pruned[0] == prompt.back());
    CHECK(res.steps == 4);
    CHECK(res.removed.size() == 4);
    // soundness replay
    CHECK(be.decode(res.pruned, 4, {}).tokens == reference);
    // removed positions must be the non-last ones
    std::set<std::uint32_t> removed_pos;
    for (auto& [pos, tok] : res.removed) {
        removed_pos.insert(pos);
        CHECK(tok == prompt[pos]);
    }
    CHECK(removed_pos == std::set<std::uint32_t>{0, 1, 2, 3});
}

TEST_CASE("prune: bound case, precondition violation, input preserved") {
    lm::Model model = layered_model();
    backend::LocalBackend be(model);
    TokenSeq single = {4};
    TokenSeq ref = be.decode(single, 3, {}).tokens;
    RandomStream rng(3);
    auto res = ablate::prune_greedy(be, single, ref, 3, {}, rng);
    CHECK(res.pruned == single);
    CHECK(res.steps == 0);
    CHECK(res.removed.empty());

    TokenSeq wrong_ref = ref;
    wrong_ref[0] = (wrong_ref[0] + 1) % model.vocab.size();
    CHECK_THROWS_AS(ablate::prune_greedy(be, single, wrong_ref, 3, {}, rng), Error);
}

TEST_CASE("prune soundness on a layered model") {
    lm::Model model = layered_model(29);
    backend::LocalBackend be(model);
    RandomStream rng = derive_stream(12, "prune");
    for (TokenSeq prompt :
         {TokenSeq{3, 4, 5, 6, 7}, TokenSeq{10, 3, 10, 3, 12, 13}, TokenSeq{7, 7, 7}}) {
        TokenSeq reference = be.decode(prompt, 5, {}).tokens;
        auto res = ablate::prune_greedy(be, prompt, reference, 5, {}, rng, 2);
        CHECK(be.decode(res.pruned, 5, {}).tokens == reference);
        CHECK(res.pruned.size() + res.removed.size() == prompt.size());
        CHECK(res.pruned.size() >= 1);
        // pruned is an order-preserving subsequence of the input
        std::size_t j = 0;
        for (TokenId t : prompt) {
            if (j < res.pruned.size() && res.pruned[j] == t) ++j;
        }
        CHECK(j == res.pruned.size());
    }
}

TEST_CASE("zero-layer oracle: replacement sweep") {
    lm::Model model = zero_layer_model(12, 31);
    backend::LocalBackend be(model);
    TokenSeq prompt = {4, 6, 8};
    TokenSeq reference = be.decode(prompt, 3, {}).tokens;

    std::vector<TokenId> pool;
    for (TokenId v = 0; v < model.vocab.size(); ++v) pool.push_back(v);
    auto sweep = ablate::replace_sweep(be, prompt, reference, pool, 0.2, {}, 3, {}, 2);
    REQUIRE(sweep.positions.size() == 3);

    // non-last positions: every candidate is null-effect; the equivalent set
    // is the pool minus the original token
    for (std::size_t p = 0; p + 1 < 3; ++p) {
        const auto& pos = sweep.positions[p];
        CHECK(pos.equivalents.size() == pool.size() - 1);
        for (const auto& rec : pos.records) {
            CHECK(rec.bin == EffectBin::null_effect);
            CHECK(rec.continuation_index == -1);
            CHECK(rec.bleu == 1.0);
        }
        // identity substitution excluded
        CHECK(std::find(pos.equivalents.begin(), pos.equivalents.end(), pos.original) ==
              pos.equivalents.end());
        CHECK(pos.records.size() == pool.size() - 1);
    }

    // last position: null-effect iff that candidate's own decode matches
    const auto& last = sweep.positions[2];
    for (const auto& rec : last.records) {
        TokenSeq alone = prompt;
        alone[2] = rec.substitute;
        bool same = be.decode(alone, 3, {}).tokens == reference;
        CHECK((rec.bin == EffectBin::null_effect) == same);
    }
}

TEST_CASE("equivalent sets are sound and complete for small pools") {
    lm::Model model = layered_model(41);
    backend::LocalBackend be(model);
    TokenSeq prompt = {5, 9, 13};
    TokenSeq reference = be.decode(prompt, 4, {}).tokens;
    std::vector<TokenId> pool;
    for (TokenId v = 0; v < model.vocab.size(); ++v) pool.push_back(v);

    auto sweep = ablate::replace_sweep(be, prompt, reference, pool, 0.2, {}, 4, {}, 2);
    for (const auto& pos : sweep.positions) {
        std::set<TokenId> members(pos.equivalents.begin(), pos.equivalents.end());
        for (TokenId cand : pool) {
            if (cand == pos.original) continue;
            TokenSeq mod = prompt;
            mod[pos.position] = cand;
            bool same = be.decode(mod, 4, {}).tokens == reference;
            CHECK(same == (members.count(cand) > 0));
        }
        // bins partition the records
        for (const auto& rec : pos.records) {
            bool is_null = rec.bin == EffectBin::null_effect;
            CHECK(is_null == (rec.continuation_index == -1));
            if (!is_null) {
                CHECK((rec.bin == EffectBin::moderate) == (rec.bleu >= 0.2));
                REQUIRE(rec.continuation_index >= 0);
                REQUIRE(static_cast<std::size_t>(rec.continuation_index) <
                        sweep.continuations.size());
                CHECK(sweep.continuations[rec.continuation_index] != reference);
            }
        }
    }
}

TEST_CASE("zero-layer oracle: keep-last shuffles score exactly 1") {
    lm::Model model = zero_layer_model(14, 53);
    backend::LocalBackend be(model);
    TokenSeq prompt = {3, 5, 7, 9};
    TokenSeq reference = be.decode(prompt, 3, {}).tokens;

    RandomStream rng = derive_stream(8, "shuffle");
    auto out = ablate::shuffle_ablation(be, prompt, reference, ShuffleMode::keep_last, 10, {}, 3,
                                        {}, rng, 2);
    CHECK(out.bleu.size() == 10);
    for (double b : out.bleu) CHECK(b == 1.0);
    CHECK(out.mean == 1.0);
    for (const auto& perm : out.permutations) CHECK(perm.back() == prompt.size() - 1);
}

TEST_CASE("shuffle: identity permutations, mode spans, determinism") {
    lm::Model model = layered_model(61);
    backend::LocalBackend be(model);

    TokenSeq single = {6};
    TokenSeq ref1 = be.decode(single, 3, {}).tokens;
    RandomStream r1(4);
    auto o1 = ablate::shuffle_ablation(be, single, ref1, ShuffleMode::all, 4, {}, 3, {}, r1);
    for (double b : o1.bleu) CHECK(b == 1.0); // identity permutation

    TokenSeq prompt = {3, 8, 11, 14};
    TokenSeq ref = be.decode(prompt, 4, {}).tokens;
    RandomStream r2 = derive_stream(10, "sh");
    auto all = ablate::shuffle_ablation(be, prompt, ref, ShuffleMode::all, 12, {}, 4, {}, r2, 2);
    CHECK(all.permutations.size() == 12);
    for (std::size_t rep = 0; rep < all.permutations.size(); ++rep) {
        // identity permutation must reproduce the reference exactly
        bool identity = true;
        for (std::size_t i = 0; i < prompt.size(); ++i)
            if (all.permutations[rep][i] != i) identity = false;
        if (identity) CHECK(all.bleu[rep] == 1.0);
        // permutation is a bijection
        std::set<std::uint32_t> seen(all.permutations[rep].begin(), all.permutations[rep].end());
        CHECK(seen.size() == prompt.size());
    }

    // keep_random_non_last fixes exactly one non-last index per repetition
    RandomStream r3 = derive_stream(11, "sh");
    auto keep_rand = ablate::shuffle_ablation(be, prompt, ref, ShuffleMode::keep_random_non_last,
                                              8, {}, 4, {}, r3, 2);
    for (const auto& perm : keep_rand.permutations) {
        std::size_t movable = 0;
        for (std::size_t i = 0; i < perm.size(); ++i)
            if (perm[i] != i || true) ++movable; // count is structural: n-1 shuffled below
        (void)movable;
        // the permuted span has size n-1, i.e. at least one index is fixed and
        // it is not the last unless the draw fixed... the fixed index must be
        // non-last by construction: verify some non-last index maps to itself
        bool nonlast_fixed = false;
        for (std::size_t i = 0; i + 1 < perm.size(); ++i)
            if (perm[i] == i) nonlast_fixed = true;
        CHECK(nonlast_fixed);
    }

    RandomStream rd1 = derive_stream(12, "det");
    RandomStream rd2 = derive_stream(12, "det");
    auto d1 = ablate::shuffle_ablation(be, prompt, ref, ShuffleMode::all, 6, {}, 4, {}, rd1, 1);
    auto d2 = ablate::shuffle_ablation(be, prompt, ref, ShuffleMode::all, 6, {}, 4, {}, rd2, 2);
    CHECK(d1.permutations == d2.permutations);
    CHECK(d1.bleu == d2.bleu);
}

TEST_CASE("bigram order preference fixtures") {
    // corpus with "a b" five times and "b a" never
    std::vector<std::string> docs(5, "aa bb");
    corpus::Corpus c = corpus::Corpus::from_documents(docs, 16);
    auto table = corpus::BigramTable::build(c);
    TokenId a = *c.vocab().find("aa");
    TokenId b = *c.vocab().find("bb");

    // pair (a, b) sits away from the last position
    std::vector<TokenSeq> prompts = {{a, b, a}};
    auto frac = ablate::bigram_order_preference(prompts, table);
    REQUIRE(frac.has_value());
    CHECK(*frac == 1.0);

    // tied counts count against the strict inequality
    std::vector<std::string> tied_docs = {"cc dd", "dd cc"};
    corpus::Corpus c2 = corpus::Corpus::from_documents(tied_docs, 16);
    auto table2 = corpus::BigramTable::build(c2);
    TokenId cc = *c2.vocab().find("cc");
    TokenId dd = *c2.vocab().find("dd");
    std::vector<TokenSeq> tied_prompt = {{cc, dd, cc}};
    auto tied = ablate::bigram_order_preference(tied_prompt, table2);
    REQUIRE(tied.has_value());
    CHECK(*tied == 0.0);

    // nothing attested -> absent
    std::vector<TokenSeq> unseen = {{c2.vocab().pad_id(), c2.vocab().pad_id(),
                                     c2.vocab().pad_id()}};
    CHECK(!ablate::bigram_order_preference(unseen, table2).has_value());

    // pairs touching the last position are excluded: only (last-1, last) pair
    std::vector<TokenSeq> only_last = {{cc, dd}};
    CHECK(!ablate::bigram_order_preference(only_last, table2).has_value());
}

TEST_CASE("positional histograms and effect stats") {
    // single prune result of length 7 with original position 3 removed:
    // right-aligned index 3 takes the pruned count
    ablate::PruneResult r;
    r.input = {1, 2, 3, 4, 5, 6, 7};
    r.pruned = {1, 2, 3, 5, 6, 7};
    r.removed = {{3, 4}};
    r.steps = 1;
    auto hist = ablate::prune_position_histogram({r});
    REQUIRE(hist.pruned.size() == 7);
    CHECK(hist.pruned[3] == 1);
    CHECK(hist.kept[3] == 0);
    CHECK(hist.pruned[0] == 0);
    CHECK(hist.kept[0] == 1);

    // effect proportions per position sum to one
    lm::Model model = zero_layer_model(12, 71);
    backend::LocalBackend be(model);
    TokenSeq prompt = {4, 6, 8};
    TokenSeq reference = be.decode(prompt, 3, {}).tokens;
    std::vector<TokenId> pool;
    for (TokenId v = 3; v < model.vocab.size(); ++v) pool.push_back(v);
    auto sweep = ablate::replace_sweep(be, prompt, reference, pool, 0.2, {}, 3, {}, 2);
    auto stats = ablate::effect_position_stats({sweep});
    REQUIRE(stats.size() == 3);
    for (const auto& row : stats) {
        CHECK(row.mean[0] + row.mean[1] + row.mean[2] == doctest::Approx(1.0).epsilon(1e-12));
    }
    // zero-layer: strong effects can only appear at the last position
    CHECK(stats[0].mean[2] >= stats[1].mean[2]);
    CHECK(stats[0].mean[2] >= stats[2].mean[2]);
    CHECK(stats[1].mean[2] == 0.0);
    CHECK(stats[2].mean[2] == 0.0);
}
