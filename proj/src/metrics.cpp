#include "aplab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace ap::metrics {

namespace {

using Gram = std::array<TokenId, 4>;

void collect_grams(TokenView seq, std::uint32_t k, std::vector<Gram>& out) {
    out.clear();
    if (seq.size() < k) return;
    for (std::size_t i = 0; i + k <= seq.size(); ++i) {
        Gram g{0, 0, 0, 0};
        for (std::uint32_t j = 0; j < k; ++j) g[j] = seq[i + j];
        out.push_back(g);
    }
    std::sort(out.begin(), out.end());
}

// Clipped matches between two sorted gram lists.
std::size_t clipped_matches(const std::vector<Gram>& cand, const std::vector<Gram>& ref) {
    std::size_t matches = 0;
    std::size_t i = 0, j = 0;
    while (i < cand.size() && j < ref.size()) {
        if (cand[i] < ref[j]) {
            ++i;
        } else if (ref[j] < cand[i]) {
            ++j;
        } else {
            const Gram& g = cand[i];
            std::size_t ci = 0, rj = 0;
            while (i < cand.size() && cand[i] == g) ++i, ++ci;
            while (j < ref.size() && ref[j] == g) ++j, ++rj;
            matches += std::min(ci, rj);
        }
    }
    return matches;
}

} // namespace

double bleu_modified(TokenView candidate, TokenView reference, const BleuConfig& cfg,
                     BleuDiagnostics* diag) {
    require(cfg.max_order >= 1, ErrorKind::invalid_argument, "BLEU max_order must be >= 1");
    require(cfg.epsilon > 0.0, ErrorKind::invalid_argument, "BLEU epsilon must be positive");
    require(!reference.empty(), ErrorKind::invalid_argument, "BLEU reference must be non-empty");
    if (candidate.empty()) {
        if (diag) ++diag->empty_candidates;
        return cfg.epsilon;
    }
    std::vector<Gram> cand_grams, ref_grams;
    double log_sum = 0.0;
    std::uint32_t included = 0;
    for (std::uint32_t k = 1; k <= cfg.max_order; ++k) {
        if (candidate.size() < k) break; // no k-grams: order excluded
        collect_grams(candidate, k, cand_grams);
        collect_grams(reference, k, ref_grams);
        double total = static_cast<double>(cand_grams.size());
        double matched = static_cast<double>(clipped_matches(cand_grams, ref_grams));
        log_sum += std::log((matched + cfg.epsilon) / (total + cfg.epsilon));
        ++included;
    }
    return std::exp(log_sum / static_cast<double>(included));
}

double mean(const std::vector<double>& v) {
    require(!v.empty(), ErrorKind::invalid_argument, "mean of empty sample");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_sd(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double median(std::vector<double> v) {
    require(!v.empty(), ErrorKind::invalid_argument, "median of empty sample");
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

// Continued fraction for the incomplete beta function (Lentz's method).
double beta_cf(double a, double b, double x) {
    constexpr int max_iter = 300;
    constexpr double eps = 3e-14;
    constexpr double fpmin = 1e-300;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= max_iter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

} // namespace

double incomplete_beta(double a, double b, double x) {
    require(a > 0.0 && b > 0.0, ErrorKind::invalid_argument, "incomplete_beta: a, b must be positive");
    require(x >= 0.0 && x <= 1.0, ErrorKind::invalid_argument, "incomplete_beta: x outside [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                      a * std::log(x) + b * std::log(1.0 - x);
    double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) {
        return front * beta_cf(a, b, x) / a;
    }
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() == b.size(), ErrorKind::invalid_argument, "paired t-test: unequal lengths");
    require(a.size() >= 2, ErrorKind::invalid_argument, "paired t-test: need at least 2 pairs");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    double m = mean(d);
    double sd = sample_sd(d);
    require(sd > 0.0, ErrorKind::invalid_argument, "paired t-test: zero variance in differences");
    double n = static_cast<double>(d.size());
    TTestResult r;
    r.df = d.size() - 1;
    r.t = m / (sd / std::sqrt(n));
    double nu = static_cast<double>(r.df);
    double x = nu / (nu + r.t * r.t);
    r.p_two_tailed = incomplete_beta(nu / 2.0, 0.5, x);
    return r;
}

EmbeddingTable EmbeddingTable::load_text(const std::string& path, const corpus::Vocab& vocab,
                                         std::size_t* skipped_lines) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot open embedding file: " + path);
    EmbeddingTable table;
    std::size_t skipped = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string token;
        ss >> token;
        std::vector<float> v;
        double x;
        while (ss >> x) v.push_back(static_cast<float>(x));
        auto id = vocab.find(token);
        if (!id || v.empty()) {
            ++skipped;
            continue;
        }
        if (table.dim_ == 0) table.dim_ = v.size();
        require(v.size() == table.dim_, ErrorKind::invalid_argument,
                "embedding dimension mismatch in " + path);
        table.vectors_[*id] = std::move(v);
    }
    if (skipped_lines) *skipped_lines = skipped;
    return table;
}

void EmbeddingTable::set(TokenId id, std::vector<float> v) {
    require(!v.empty(), ErrorKind::invalid_argument, "empty embedding vector");
    if (dim_ == 0) dim_ = v.size();
    require(v.size() == dim_, ErrorKind::invalid_argument, "embedding dimension mismatch");
    vectors_[id] = std::move(v);
}

const std::vector<float>* EmbeddingTable::get(TokenId id) const {
    auto it = vectors_.find(id);
    return it == vectors_.end() ? nullptr : &it->second;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    require(a.size() == b.size() && !a.empty(), ErrorKind::invalid_argument,
            "cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    require(na > 0.0 && nb > 0.0, ErrorKind::invalid_argument, "cosine: zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::optional<SemanticConsistency> semantic_consistency(TokenId original,
                                                        const std::vector<TokenId>& members,
                                                        const EmbeddingTable& emb,
                                                        const corpus::Vocab& vocab) {
    auto usable = [&](TokenId id) -> const std::vector<float>* {
        if (vocab.token_class(id) != corpus::TokenClass::language_like) return nullptr;
        const auto* v = emb.get(id);
        if (!v) return nullptr;
        bool nonzero = std::any_of(v->begin(), v->end(), [](float x) { return x != 0.0f; });
        return nonzero ? v : nullptr;
    };
    const auto* ov = usable(original);
    if (!ov) return std::nullopt;
    std::vector<const std::vector<float>*> kept;
    std::size_t skipped = 0;
    for (TokenId m : members) {
        const auto* v = usable(m);
        if (v) kept.push_back(v);
        else ++skipped;
    }
    if (kept.empty()) return std::nullopt;

    SemanticConsistency out;
    out.used_members = kept.size();
    out.skipped_members = skipped;
    double sum = 0.0;
    for (const auto* v : kept) sum += cosine(*ov, *v);
    out.sim_to_original = sum / static_cast<double>(kept.size());

    std::vector<const std::vector<float>*> all = kept;
    all.push_back(ov);
    double pair_sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < all.size(); ++i) {
        for (std::size_t j = i + 1; j < all.size(); ++j) {
            pair_sum += cosine(*all[i], *all[j]);
            ++pairs;
        }
    }
    out.intra_set_sim = pairs ? pair_sum / static_cast<double>(pairs) : 1.0;
    return out;
}

namespace {

std::vector<std::string> whitespace_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream ss(text);
    std::string w;
    while (ss >> w) words.push_back(w);
    return words;
}

} // namespace

std::vector<CompositionalCase> extract_compositional_cases(
    const std::vector<CompositionalInput>& inputs, const EmbeddingTable& emb,
    const corpus::Vocab& vocab, std::size_t* missing_embedding) {
    std::vector<CompositionalCase> cases;
    std::size_t missing = 0;
    for (const auto& in : inputs) {
        auto ref_words = whitespace_words(vocab.detokenize(in.reference_continuation));
        auto new_words = whitespace_words(vocab.detokenize(in.new_continuation));
        if (ref_words.size() != new_words.size()) continue;
        std::size_t diff_at = ref_words.size();
        std::size_t diffs = 0;
        for (std::size_t i = 0; i < ref_words.size(); ++i) {
            if (ref_words[i] != new_words[i]) {
                diff_at = i;
                ++diffs;
            }
        }
        if (diffs != 1) continue;
        CompositionalCase c;
        c.triple_id = in.triple_id;
        c.position = in.position;
        c.original_token = in.original_token;
        c.substitute_token = in.substitute_token;
        c.original_word = ref_words[diff_at];
        c.new_word = new_words[diff_at];

        auto nonzero = [&](const std::vector<float>* v) -> const std::vector<float>* {
            if (!v) return nullptr;
            bool any = std::any_of(v->begin(), v->end(), [](float x) { return x != 0.0f; });
            return any ? v : nullptr;
        };
        auto old_id = vocab.find(c.original_word);
        auto new_id = vocab.find(c.new_word);
        const auto* e_orig = nonzero(emb.get(in.original_token));
        const auto* e_sub = nonzero(emb.get(in.substitute_token));
        const auto* e_old = old_id ? nonzero(emb.get(*old_id)) : nullptr;
        const auto* e_new = new_id ? nonzero(emb.get(*new_id)) : nullptr;
        if (!e_orig || !e_sub || !e_old || !e_new) {
            ++missing;
            continue;
        }
        c.cosines = {cosine(*e_orig, *e_old), cosine(*e_orig, *e_new),
                     cosine(*e_sub, *e_old), cosine(*e_sub, *e_new)};
        cases.push_back(std::move(c));
    }
    if (missing_embedding) *missing_embedding = missing;
    return cases;
}

std::optional<CompositionalStats> compositional_stats(const std::vector<CompositionalCase>& cases) {
    if (cases.empty()) return std::nullopt;
    CompositionalStats s;
    s.cases = cases.size();
    std::size_t orig_closer = 0, sub_closer = 0;
    for (const auto& c : cases) {
        if (c.cosines[1] > c.cosines[0]) ++orig_closer;
        if (c.cosines[3] > c.cosines[2]) ++sub_closer;
    }
    s.frac_original_closer_to_new = static_cast<double>(orig_closer) / static_cast<double>(cases.size());
    s.frac_substitute_closer_to_new = static_cast<double>(sub_closer) / static_cast<double>(cases.size());
    return s;
}

} // namespace ap::metrics
