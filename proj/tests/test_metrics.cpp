#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "aplab/corpus.hpp"
#include "aplab/metrics.hpp"
#include "aplab/rng.hpp"

using namespace ap;
using metrics::BleuConfig;

TEST_CASE("bleu: identity and prefix score exactly 1") {
    TokenSeq ref = {1, 2, 3, 4, 5, 6};
    CHECK(metrics::bleu_modified(ref, ref) == 1.0);

    // "the cat" vs "the cat sat on the mat": p1=p2=1, orders 3-4 excluded
    TokenSeq cand = {1, 2};
    CHECK(metrics::bleu_modified(cand, ref) == 1.0);
}

TEST_CASE("bleu: fully disjoint candidate matches the closed form") {
    TokenSeq cand = {10, 11, 12, 13};
    TokenSeq ref = {1, 2, 3, 4};
    const double eps = 1e-9;
    double got = metrics::bleu_modified(cand, ref);
    // independent recomputation: p_k = eps / (count_k + eps), counts 4,3,2,1
    double expect = std::exp((std::log(eps / (4 + eps)) + std::log(eps / (3 + eps)) +
                              std::log(eps / (2 + eps)) + std::log(eps / (1 + eps))) /
                             4.0);
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    CHECK(got < 1e-6);
}

TEST_CASE("bleu: partial overlap via hand-counted n-grams") {
    // cand "a b c", ref "a b d": p1 = (2+e)/(3+e), p2 = (1+e)/(2+e), p3 = (0+e)/(1+e)
    TokenSeq cand = {1, 2, 3};
    TokenSeq ref = {1, 2, 4};
    const double eps = 1e-9;
    double expect = std::exp((std::log((2 + eps) / (3 + eps)) + std::log((1 + eps) / (2 + eps)) +
                              std::log(eps / (1 + eps))) /
                             3.0);
    CHECK(metrics::bleu_modified(cand, ref) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("bleu: clipping caps repeated candidate grams") {
    // cand "a a a a" vs ref "a a": clipped unigram matches = 2 of 4
    TokenSeq cand = {7, 7, 7, 7};
    TokenSeq ref = {7, 7};
    const double eps = 1e-9;
    double p1 = (2 + eps) / (4 + eps);
    double p2 = (1 + eps) / (3 + eps);
    double p3 = eps / (2 + eps);
    double p4 = eps / (1 + eps);
    double expect = std::exp((std::log(p1) + std::log(p2) + std::log(p3) + std::log(p4)) / 4.0);
    CHECK(metrics::bleu_modified(cand, ref) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("bleu: property bleu(x, x) == 1 and range (0, 1]") {
    RandomStream rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        TokenSeq x(1 + rng.index(12));
        for (auto& t : x) t = static_cast<TokenId>(rng.index(8));
        CHECK(metrics::bleu_modified(x, x) == 1.0);
        TokenSeq y(1 + rng.index(12));
        for (auto& t : y) t = static_cast<TokenId>(rng.index(8));
        double b = metrics::bleu_modified(x, y);
        CHECK(b > 0.0);
        CHECK(b <= 1.0);
    }
}

TEST_CASE("bleu: empty candidate takes the epsilon floor with a diagnostic") {
    metrics::BleuDiagnostics diag;
    TokenSeq ref = {1, 2, 3};
    double b = metrics::bleu_modified({}, ref, {}, &diag);
    CHECK(b == 1e-9);
    CHECK(diag.empty_candidates == 1);
    CHECK_THROWS_AS(metrics::bleu_modified(ref, {}), Error);
}

TEST_CASE("paired t-test fixture d = [1,2,3]") {
    std::vector<double> a = {1, 2, 3};
    std::vector<double> b = {0, 0, 0};
    auto r = metrics::paired_t_test(a, b);
    CHECK(r.t == doctest::Approx(3.4641).epsilon(1e-3));
    CHECK(r.p_two_tailed == doctest::Approx(0.0742).epsilon(1e-2));
    CHECK(std::fabs(r.p_two_tailed - 0.0742) < 1e-3);
    CHECK(r.df == 2);

    auto swapped = metrics::paired_t_test(b, a);
    CHECK(swapped.t == doctest::Approx(-r.t).epsilon(1e-12));
    CHECK(swapped.p_two_tailed == doctest::Approx(r.p_two_tailed).epsilon(1e-12));
}

TEST_CASE("paired t-test scale invariance and degenerate variance") {
    std::vector<double> a = {0.5, 1.25, 0.75, 2.0};
    std::vector<double> b = {0.25, 1.5, 0.5, 1.0};
    auto r1 = metrics::paired_t_test(a, b);
    std::vector<double> a3(a), b3(b);
    for (auto& x : a3) x *= 3.0;
    for (auto& x : b3) x *= 3.0;
    auto r3 = metrics::paired_t_test(a3, b3);
    CHECK(r1.t == doctest::Approx(r3.t).epsilon(1e-9));

    std::vector<double> c = {1, 2, 3};
    std::vector<double> d = {0, 1, 2}; // constant difference -> zero variance
    CHECK_THROWS_AS(metrics::paired_t_test(c, d), Error);
    CHECK_THROWS_AS(metrics::paired_t_test({1.0}, {2.0}), Error);
}

TEST_CASE("incomplete beta basics") {
    CHECK(metrics::incomplete_beta(1.0, 1.0, 0.3) == doctest::Approx(0.3).epsilon(1e-12));
    // symmetry I_x(a,b) = 1 - I_{1-x}(b,a)
    double x = 0.37;
    CHECK(metrics::incomplete_beta(2.5, 1.5, x) ==
          doctest::Approx(1.0 - metrics::incomplete_beta(1.5, 2.5, 1.0 - x)).epsilon(1e-10));
    // I_x(1, 1/2) = 1 - sqrt(1-x)
    CHECK(metrics::incomplete_beta(1.0, 0.5, 1.0 / 7.0) ==
          doctest::Approx(1.0 - std::sqrt(6.0 / 7.0)).epsilon(1e-10));
}

namespace {

corpus::Vocab word_vocab() {
    // id order after specials: alphabetical by construction below
    return corpus::Vocab::build({"alpha", "beta", "delta", "gamma", "177", "face", "mushroom",
                                 "the", "of", "color"},
                                64);
}

} // namespace

TEST_CASE("cosine and semantic consistency hand cases") {
    using metrics::EmbeddingTable;
    corpus::Vocab vocab = word_vocab();
    TokenId alpha = *vocab.find("alpha");
    TokenId beta = *vocab.find("beta");
    TokenId gamma = *vocab.find("gamma");
    TokenId delta = *vocab.find("delta");
    TokenId num = *vocab.find("177");

    EmbeddingTable emb(2);
    emb.set(alpha, {1.0f, 0.0f});
    emb.set(beta, {1.0f, 0.0f});  // equal to alpha
    emb.set(gamma, {0.0f, 1.0f}); // orthogonal
    emb.set(num, {1.0f, 1.0f});

    CHECK(metrics::cosine({1, 0}, {1, 0}) == doctest::Approx(1.0));
    CHECK(metrics::cosine({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK_THROWS_AS(metrics::cosine({0, 0}, {1, 0}), Error);

    // identical vectors -> (1, 1)
    auto same = metrics::semantic_consistency(alpha, {beta}, emb, vocab);
    REQUIRE(same.has_value());
    CHECK(same->sim_to_original == doctest::Approx(1.0));
    CHECK(same->intra_set_sim == doctest::Approx(1.0));

    // original == member1, member2 orthogonal:
    // sim_to_original = (1+0)/2, intra over 3 pairs = (1+0+0)/3
    auto mixed = metrics::semantic_consistency(alpha, {beta, gamma}, emb, vocab);
    REQUIRE(mixed.has_value());
    CHECK(mixed->sim_to_original == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(mixed->intra_set_sim == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    // non-linguistic members are skipped; nothing usable -> absent
    auto absent = metrics::semantic_consistency(alpha, {num}, emb, vocab);
    CHECK(!absent.has_value());
    auto missing = metrics::semantic_consistency(alpha, {delta}, emb, vocab); // no embedding
    CHECK(!missing.has_value());
    auto partial = metrics::semantic_consistency(alpha, {delta, gamma}, emb, vocab);
    REQUIRE(partial.has_value());
    CHECK(partial->skipped_members == 1);
}

TEST_CASE("compositional case extraction and stats") {
    corpus::Vocab vocab = word_vocab();
    TokenId the = *vocab.find("the");
    TokenId of = *vocab.find("of");
    TokenId color = *vocab.find("color");
    TokenId mushroom = *vocab.find("mushroom");
    TokenId face = *vocab.find("face");
    TokenId alpha = *vocab.find("alpha");
    TokenId beta = *vocab.find("beta");

    metrics::EmbeddingTable emb(2);
    emb.set(alpha, {1.0f, 0.0f});
    emb.set(beta, {0.9f, 0.1f});
    emb.set(mushroom, {1.0f, 0.2f});
    emb.set(face, {0.2f, 1.0f});
    emb.set(the, {0.5f, 0.5f});
    emb.set(of, {0.4f, 0.6f});
    emb.set(color, {0.6f, 0.4f});

    // "the color of the mushroom" -> "the color of the face": one word changed
    TokenSeq ref = {the, color, of, the, mushroom};
    TokenSeq changed = {the, color, of, the, face};
    TokenSeq same = ref;
    TokenSeq twoChanged = {the, color, of, color, face};

    std::vector<metrics::CompositionalInput> inputs = {
        {0, 1, alpha, beta, ref, changed},
        {1, 2, alpha, beta, ref, same},       // identical -> excluded
        {2, 3, alpha, beta, ref, twoChanged}, // two diffs -> excluded
    };
    std::size_t missing = 0;
    auto cases = metrics::extract_compositional_cases(inputs, emb, vocab, &missing);
    REQUIRE(cases.size() == 1);
    CHECK(missing == 0);
    CHECK(cases[0].original_word == "mushroom");
    CHECK(cases[0].new_word == "face");
    CHECK(cases[0].cosines[0] == doctest::Approx(metrics::cosine({1.0f, 0.0f}, {1.0f, 0.2f})));

    auto stats = metrics::compositional_stats(cases);
    REQUIRE(stats.has_value());
    CHECK(stats->cases == 1);

    // all-tie fixture: identical cosines -> both fractions 0
    metrics::CompositionalCase tie;
    tie.cosines = {0.5, 0.5, 0.25, 0.25};
    auto tie_stats = metrics::compositional_stats({tie});
    REQUIRE(tie_stats.has_value());
    CHECK(tie_stats->frac_original_closer_to_new == 0.0);
    CHECK(tie_stats->frac_substitute_closer_to_new == 0.0);

    // substitute equal to the new continuation word -> cosine 1 beats the rest
    metrics::CompositionalCase forced;
    forced.cosines = {0.3, 0.2, 0.4, 1.0};
    auto f = metrics::compositional_stats({forced});
    CHECK(f->frac_substitute_closer_to_new == 1.0);

    CHECK(!metrics::compositional_stats({}).has_value());
}

TEST_CASE("embedding import from text format") {
    corpus::Vocab vocab = word_vocab();
    std::string path = "emb_import_test.txt";
    {
        std::ofstream out(path);
        out << "alpha 1.0 2.0\n";
        out << "beta 3.0 4.0\n";
        out << "notinthevocab 5.0 6.0\n";
        out << "\n";
    }
    std::size_t skipped = 0;
    auto emb = metrics::EmbeddingTable::load_text(path, vocab, &skipped);
    CHECK(emb.dim() == 2);
    CHECK(emb.size() == 2);
    CHECK(skipped == 1);
    REQUIRE(emb.get(*vocab.find("alpha")) != nullptr);
    CHECK((*emb.get(*vocab.find("alpha")))[1] == doctest::Approx(2.0f));
    std::remove(path.c_str());
}

TEST_CASE("mean, sd, median helpers") {
    CHECK(metrics::mean({1, 2, 3}) == doctest::Approx(2.0));
    CHECK(metrics::sample_sd({1, 2, 3}) == doctest::Approx(1.0));
    CHECK(metrics::median({3, 1, 2}) == doctest::Approx(2.0));
    CHECK(metrics::median({4, 1, 2, 3}) == doctest::Approx(2.5));
    CHECK_THROWS_AS(metrics::mean({}), Error);
}
