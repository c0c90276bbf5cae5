#include "aplab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace ap::corpus {

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    const std::size_t n = text.size();
    for (std::size_t i = 0; i < n; ++i) {
        char c = text[i];
        if (c == '.' || c == '!' || c == '?') {
            bool at_boundary = (i + 1 >= n) || std::isspace(static_cast<unsigned char>(text[i + 1]));
            if (at_boundary) {
                out.emplace_back(text.substr(start, i + 1 - start));
                start = i + 1;
            }
        }
    }
    if (start < n) {
        std::string_view tail = text.substr(start);
        bool blank = std::all_of(tail.begin(), tail.end(),
                                 [](unsigned char c) { return std::isspace(c); });
        if (!blank) out.emplace_back(tail);
    }
    return out;
}

std::vector<std::string> Corpus::read_documents(const std::vector<std::string>& paths) {
    require(!paths.empty(), ErrorKind::invalid_argument, "no corpus paths given");
    std::vector<std::string> docs;
    for (const auto& path : paths) {
        std::ifstream in(path, std::ios::binary);
        require(in.good(), ErrorKind::io, "cannot open corpus file: " + path);
        std::string line;
        while (std::getline(in, line)) {
            bool blank = std::all_of(line.begin(), line.end(),
                                     [](unsigned char c) { return std::isspace(c); });
            if (!blank) docs.push_back(line);
        }
    }
    require(!docs.empty(), ErrorKind::state, "corpus is empty");
    return docs;
}

Corpus Corpus::build(const std::vector<std::string>& doc_texts, Vocab vocab) {
    Corpus c;
    c.vocab_ = std::move(vocab);
    c.docs_.reserve(doc_texts.size());
    for (const auto& text : doc_texts) {
        Document doc;
        for (const auto& sentence : split_sentences(text)) {
            TokenizeResult tr = c.vocab_.tokenize(sentence);
            if (tr.ids.empty()) continue;
            SentenceSpan span{doc.tokens.size(), doc.tokens.size() + tr.ids.size()};
            doc.tokens.insert(doc.tokens.end(), tr.ids.begin(), tr.ids.end());
            doc.unknown_count += tr.unknown_count;
            doc.sentences.push_back(span);
        }
        if (doc.tokens.empty()) continue;
        c.total_tokens_ += doc.tokens.size();
        c.unknown_tokens_ += doc.unknown_count;
        c.docs_.push_back(std::move(doc));
    }
    require(!c.docs_.empty(), ErrorKind::state, "corpus contains no tokens");
    return c;
}

Corpus Corpus::from_documents(const std::vector<std::string>& doc_texts, std::size_t vocab_cap) {
    // Count raw token strings, rank by (count desc, string asc).
    std::map<std::string, std::uint64_t> counts;
    for (const auto& text : doc_texts) {
        for (auto& tok : segment_text(text)) counts[std::move(tok)]++;
    }
    std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> ordered;
    ordered.reserve(ranked.size());
    for (auto& [tok, cnt] : ranked) ordered.push_back(tok);
    return build(doc_texts, Vocab::build(ordered, vocab_cap));
}

Corpus Corpus::from_documents(const std::vector<std::string>& doc_texts, Vocab vocab) {
    return build(doc_texts, std::move(vocab));
}

Corpus Corpus::load_files(const std::vector<std::string>& paths, std::size_t vocab_cap) {
    return from_documents(read_documents(paths), vocab_cap);
}

Corpus Corpus::load_files(const std::vector<std::string>& paths, Vocab vocab) {
    return build(read_documents(paths), std::move(vocab));
}

TokenSeq Corpus::training_stream() const {
    TokenSeq out;
    out.reserve(total_tokens_ + docs_.size());
    for (const auto& doc : docs_) {
        out.insert(out.end(), doc.tokens.begin(), doc.tokens.end());
        out.push_back(vocab_.eot_id());
    }
    return out;
}

TokenView Corpus::slice(std::size_t doc, std::size_t begin, std::size_t len) const {
    require(doc < docs_.size(), ErrorKind::invalid_argument, "document index out of range");
    const auto& tokens = docs_[doc].tokens;
    require(begin + len <= tokens.size(), ErrorKind::invalid_argument, "token span out of range");
    return TokenView(tokens.data() + begin, len);
}

TokenSeq Corpus::continuation_after(std::size_t doc, std::size_t begin, std::size_t len,
                                    std::size_t max_len) const {
    require(doc < docs_.size(), ErrorKind::invalid_argument, "document index out of range");
    const auto& tokens = docs_[doc].tokens;
    std::size_t from = begin + len;
    require(from <= tokens.size(), ErrorKind::invalid_argument, "token span out of range");
    std::size_t take = std::min(max_len, tokens.size() - from);
    return TokenSeq(tokens.begin() + from, tokens.begin() + from + take);
}

std::vector<PromptSample> sample_original_prompts(const Corpus& corpus, std::size_t count,
                                                  std::size_t min_len, std::size_t max_len,
                                                  RandomStream& rng) {
    require(min_len >= 1 && min_len <= max_len, ErrorKind::invalid_argument,
            "invalid prompt length bounds");
    struct Candidate {
        std::size_t doc;
        SentenceSpan span;
    };
    std::vector<Candidate> sentences;
    for (std::size_t d = 0; d < corpus.docs().size(); ++d) {
        for (const auto& span : corpus.docs()[d].sentences) {
            if (span.length() >= min_len) sentences.push_back({d, span});
        }
    }
    require(!sentences.empty(), ErrorKind::state,
            "no sentence with at least " + std::to_string(min_len) + " tokens in corpus");

    std::vector<PromptSample> out;
    std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
    const std::size_t max_attempts = count * 50 + 100;
    for (std::size_t attempt = 0; attempt < max_attempts && out.size() < count; ++attempt) {
        const Candidate& cand = sentences[rng.index(sentences.size())];
        std::size_t cap = std::min(max_len, cand.span.length());
        std::size_t len = min_len + rng.index(cap - min_len + 1);
        std::size_t begin = cand.span.begin + rng.index(cand.span.length() - len + 1);
        if (!seen.emplace(cand.doc, begin, len).second) continue;
        out.push_back({cand.doc, begin, len});
    }
    return out;
}

BigramTable BigramTable::build(const Corpus& corpus) {
    BigramTable t;
    t.unigram_.assign(corpus.vocab().size(), 0);
    for (const auto& doc : corpus.docs()) {
        if (doc.tokens.empty()) continue;
        ++t.sequences_;
        for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
            ++t.unigram_[doc.tokens[i]];
            ++t.total_;
            if (i + 1 < doc.tokens.size()) {
                ++t.pairs_[key(doc.tokens[i], doc.tokens[i + 1])];
                ++t.pair_total_;
            }
        }
    }
    return t;
}

std::uint64_t BigramTable::unigram_count(TokenId id) const {
    require(id < unigram_.size(), ErrorKind::invalid_argument, "token id out of range");
    return unigram_[id];
}

std::uint64_t BigramTable::pair_count(TokenId a, TokenId b) const {
    auto it = pairs_.find(key(a, b));
    return it == pairs_.end() ? 0 : it->second;
}

double BigramTable::log_freq(TokenId a, TokenId b) const {
    std::uint64_t c = pair_count(a, b);
    if (c == 0) return -1.0;
    return std::log10(static_cast<double>(c));
}

void BigramTable::save_unigram_csv(const std::string& path, const Vocab& vocab) const {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io, "cannot write " + path);
    out << "token,count\n";
    for (TokenId id = 0; id < unigram_.size(); ++id) {
        if (unigram_[id] == 0) continue;
        out << '"' << vocab.token(id) << "\"," << unigram_[id] << '\n';
    }
}

void BigramTable::save_bigram_csv(const std::string& path, const Vocab& vocab) const {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::io, "cannot write " + path);
    out << "first,second,count\n";
    std::vector<std::pair<std::uint64_t, std::uint64_t>> rows(pairs_.begin(), pairs_.end());
    std::sort(rows.begin(), rows.end());
    for (const auto& [k, c] : rows) {
        out << '"' << vocab.token(static_cast<TokenId>(k >> 32)) << "\",\""
            << vocab.token(static_cast<TokenId>(k & 0xffffffffu)) << "\"," << c << '\n';
    }
}

std::vector<TokenId> top_frequent_tokens(const BigramTable& table, std::size_t k) {
    require(k > 0, ErrorKind::invalid_argument, "k must be positive");
    std::vector<TokenId> ids(table.vocab_size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i);
    std::sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
        std::uint64_t ca = table.unigram_count(a), cb = table.unigram_count(b);
        if (ca != cb) return ca > cb;
        return a < b;
    });
    if (k < ids.size()) ids.resize(k);
    return ids;
}

void LmiTable::add(TokenId token, Class cls, std::uint64_t count) {
    observed_[token][cls] += count;
    class_totals_[cls] += count;
    total_ += count;
}

std::uint64_t LmiTable::observed(TokenId token, Class cls) const {
    auto it = observed_.find(token);
    return it == observed_.end() ? 0 : it->second[cls];
}

std::uint64_t LmiTable::token_total(TokenId token) const {
    auto it = observed_.find(token);
    return it == observed_.end() ? 0 : it->second[0] + it->second[1];
}

double LmiTable::lmi(TokenId token, Class cls) const {
    std::uint64_t ft = token_total(token);
    std::uint64_t fc = class_totals_[cls];
    if (ft == 0 && fc == 0 && total_ == 0) return 0.0; // empty table, nothing recorded
    require(ft > 0 && fc > 0 && total_ > 0, ErrorKind::invalid_argument,
            "LMI undefined: zero marginal");
    std::uint64_t o = observed(token, cls);
    if (o == 0) return 0.0;
    double ratio = (static_cast<double>(o) * static_cast<double>(total_)) /
                   (static_cast<double>(ft) * static_cast<double>(fc));
    return static_cast<double>(o) * std::log2(ratio);
}

std::vector<std::pair<TokenId, double>> LmiTable::ranking(Class cls, std::size_t top_n) const {
    std::vector<std::pair<TokenId, double>> rows;
    for (const auto& [token, cells] : observed_) {
        if (cells[cls] == 0) continue;
        rows.emplace_back(token, lmi(token, cls));
    }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (rows.size() > top_n) rows.resize(top_n);
    return rows;
}

} // namespace ap::corpus
