#include "aplab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "aplab/backend.hpp"
#include "aplab/embedding.hpp"
#include "aplab/parallel.hpp"
#include "aplab/sha256.hpp"

namespace fs = std::filesystem;

namespace ap::pipeline {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "aplab 0.1.0";

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
    require(j.is_object(), ErrorKind::config, std::string(where) + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        require(ok, ErrorKind::config, "unknown key '" + key + "' in " + where);
    }
}

template <typename T>
T get_or(const json& j, const char* key, T def, const char* where) {
    if (!j.contains(key)) return def;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        fail(ErrorKind::config, std::string("bad type for '") + key + "' in " + where);
    }
}

TokenSeq tokens_from_json(const json& arr, const char* where) {
    require(arr.is_array(), ErrorKind::io, std::string(where) + ": expected token array");
    TokenSeq out;
    out.reserve(arr.size());
    for (const auto& v : arr) {
        require(v.is_number_unsigned(), ErrorKind::io,
                std::string(where) + ": token ids must be unsigned");
        out.push_back(v.get<TokenId>());
    }
    return out;
}

ordered_json tokens_to_json(TokenView t) {
    ordered_json arr = ordered_json::array();
    for (TokenId id : t) arr.push_back(id);
    return arr;
}

std::string fmt(double v) { return json(v).dump(); }

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::io, "cannot write " + path);
    out << content;
    require(out.good(), ErrorKind::io, "write failed: " + path);
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    double idx = q * static_cast<double>(sorted.size() - 1);
    std::size_t lo = static_cast<std::size_t>(idx);
    std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    double frac = idx - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

} // namespace

std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::state, "missing stage output: " + path);
    std::vector<json> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            rows.push_back(json::parse(line));
        } catch (const json::exception& e) {
            fail(ErrorKind::io, path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

void write_jsonl(const std::string& path, const std::vector<ordered_json>& rows) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::io, "cannot write " + path);
    for (const auto& r : rows) out << r.dump() << '\n';
    require(out.good(), ErrorKind::io, "write failed: " + path);
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot hash missing file: " + path);
    Sha256 h;
    char buf[1 << 16];
    while (in.good()) {
        in.read(buf, sizeof(buf));
        h.update(buf, static_cast<std::size_t>(in.gcount()));
    }
    return h.hex_digest();
}

// ---------------------------------------------------------------- RunConfig

RunConfig RunConfig::from_json(const json& j) {
    check_keys(j,
               {"corpus", "out_dir", "seed", "workers", "sample_count", "model", "train", "gcg",
                "filters", "ablation", "bleu", "paths"},
               "config");
    RunConfig c;
    require(j.contains("corpus"), ErrorKind::config, "config is missing 'corpus'");
    require(j["corpus"].is_array() && !j["corpus"].empty(), ErrorKind::config,
            "'corpus' must be a non-empty array of paths");
    for (const auto& p : j["corpus"]) {
        require(p.is_string(), ErrorKind::config, "'corpus' entries must be strings");
        c.corpus_paths.push_back(p.get<std::string>());
    }
    c.out_dir = get_or<std::string>(j, "out_dir", c.out_dir, "config");
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed, "config");
    c.workers = get_or<unsigned>(j, "workers", c.workers, "config");
    c.sample_count = get_or<std::size_t>(j, "sample_count", c.sample_count, "config");

    if (j.contains("model")) {
        const auto& m = j["model"];
        check_keys(m, {"vocab_size", "context_len", "embed_dim", "n_layers", "n_heads"},
                   "config.model");
        c.model.vocab_size = get_or<std::uint32_t>(m, "vocab_size", c.model.vocab_size, "model");
        c.model.context_len = get_or<std::uint32_t>(m, "context_len", c.model.context_len, "model");
        c.model.embed_dim = get_or<std::uint32_t>(m, "embed_dim", c.model.embed_dim, "model");
        c.model.n_layers = get_or<std::uint32_t>(m, "n_layers", c.model.n_layers, "model");
        c.model.n_heads = get_or<std::uint32_t>(m, "n_heads", c.model.n_heads, "model");
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        check_keys(t,
                   {"steps", "batch_size", "learning_rate", "beta1", "beta2", "adam_eps",
                    "grad_clip", "linear_lr_decay", "init_std"},
                   "config.train");
        c.train.steps = get_or<std::uint32_t>(t, "steps", c.train.steps, "train");
        c.train.batch_size = get_or<std::uint32_t>(t, "batch_size", c.train.batch_size, "train");
        c.train.learning_rate = get_or<float>(t, "learning_rate", c.train.learning_rate, "train");
        c.train.beta1 = get_or<float>(t, "beta1", c.train.beta1, "train");
        c.train.beta2 = get_or<float>(t, "beta2", c.train.beta2, "train");
        c.train.adam_eps = get_or<float>(t, "adam_eps", c.train.adam_eps, "train");
        c.train.grad_clip = get_or<float>(t, "grad_clip", c.train.grad_clip, "train");
        c.train.linear_lr_decay =
            get_or<bool>(t, "linear_lr_decay", c.train.linear_lr_decay, "train");
        c.train.init_std = get_or<float>(t, "init_std", c.train.init_std, "train");
    }
    if (j.contains("gcg")) {
        const auto& g = j["gcg"];
        check_keys(g, {"prompt_len", "topk", "candidates", "max_iters", "exhaustive"},
                   "config.gcg");
        c.gcg.prompt_len = get_or<std::uint32_t>(g, "prompt_len", c.gcg.prompt_len, "gcg");
        c.gcg.topk = get_or<std::uint32_t>(g, "topk", c.gcg.topk, "gcg");
        c.gcg.candidates = get_or<std::uint32_t>(g, "candidates", c.gcg.candidates, "gcg");
        c.gcg.max_iters = get_or<std::uint32_t>(g, "max_iters", c.gcg.max_iters, "gcg");
        c.gcg.exhaustive = get_or<bool>(g, "exhaustive", c.gcg.exhaustive, "gcg");
    }
    if (j.contains("filters")) {
        const auto& f = j["filters"];
        check_keys(f,
                   {"min_prompt_len", "max_prompt_len", "min_cont_len", "memorization_bleu_max",
                    "max_new"},
                   "config.filters");
        c.filters.min_prompt_len =
            get_or<std::uint32_t>(f, "min_prompt_len", c.filters.min_prompt_len, "filters");
        c.filters.max_prompt_len =
            get_or<std::uint32_t>(f, "max_prompt_len", c.filters.max_prompt_len, "filters");
        c.filters.min_cont_len =
            get_or<std::uint32_t>(f, "min_cont_len", c.filters.min_cont_len, "filters");
        c.filters.memorization_bleu_max = get_or<double>(
            f, "memorization_bleu_max", c.filters.memorization_bleu_max, "filters");
        c.filters.max_new = get_or<std::uint32_t>(f, "max_new", c.filters.max_new, "filters");
    }
    if (j.contains("ablation")) {
        const auto& a = j["ablation"];
        check_keys(a, {"pool_size", "shuffle_reps", "moderate_bleu", "include_natural"},
                   "config.ablation");
        c.ablation.pool_size =
            get_or<std::uint32_t>(a, "pool_size", c.ablation.pool_size, "ablation");
        c.ablation.shuffle_reps =
            get_or<std::uint32_t>(a, "shuffle_reps", c.ablation.shuffle_reps, "ablation");
        c.ablation.moderate_bleu =
            get_or<double>(a, "moderate_bleu", c.ablation.moderate_bleu, "ablation");
        c.ablation.include_natural =
            get_or<bool>(a, "include_natural", c.ablation.include_natural, "ablation");
    }
    if (j.contains("bleu")) {
        const auto& b = j["bleu"];
        check_keys(b, {"max_order", "epsilon"}, "config.bleu");
        c.bleu.max_order = get_or<std::uint32_t>(b, "max_order", c.bleu.max_order, "bleu");
        c.bleu.epsilon = get_or<double>(b, "epsilon", c.bleu.epsilon, "bleu");
    }
    if (j.contains("paths")) {
        const auto& p = j["paths"];
        check_keys(p, {"ckpt", "dataset", "triples", "prune", "replace", "shuffle", "report_dir"},
                   "config.paths");
        c.paths.ckpt = get_or<std::string>(p, "ckpt", "", "paths");
        c.paths.dataset = get_or<std::string>(p, "dataset", "", "paths");
        c.paths.triples = get_or<std::string>(p, "triples", "", "paths");
        c.paths.prune = get_or<std::string>(p, "prune", "", "paths");
        c.paths.replace = get_or<std::string>(p, "replace", "", "paths");
        c.paths.shuffle = get_or<std::string>(p, "shuffle", "", "paths");
        c.paths.report_dir = get_or<std::string>(p, "report_dir", "", "paths");
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::config, "cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        fail(ErrorKind::config, "malformed config JSON: " + std::string(e.what()));
    }
    return from_json(j);
}

ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["corpus"] = corpus_paths;
    j["out_dir"] = out_dir;
    j["seed"] = seed;
    j["workers"] = workers;
    j["sample_count"] = sample_count;
    j["model"] = {{"vocab_size", model.vocab_size},
                  {"context_len", model.context_len},
                  {"embed_dim", model.embed_dim},
                  {"n_layers", model.n_layers},
                  {"n_heads", model.n_heads}};
    j["train"] = {{"steps", train.steps},
                  {"batch_size", train.batch_size},
                  {"learning_rate", train.learning_rate},
                  {"beta1", train.beta1},
                  {"beta2", train.beta2},
                  {"adam_eps", train.adam_eps},
                  {"grad_clip", train.grad_clip},
                  {"linear_lr_decay", train.linear_lr_decay},
                  {"init_std", train.init_std}};
    j["gcg"] = {{"prompt_len", gcg.prompt_len},
                {"topk", gcg.topk},
                {"candidates", gcg.candidates},
                {"max_iters", gcg.max_iters},
                {"exhaustive", gcg.exhaustive}};
    j["filters"] = {{"min_prompt_len", filters.min_prompt_len},
                    {"max_prompt_len", filters.max_prompt_len},
                    {"min_cont_len", filters.min_cont_len},
                    {"memorization_bleu_max", filters.memorization_bleu_max},
                    {"max_new", filters.max_new}};
    j["ablation"] = {{"pool_size", ablation.pool_size},
                     {"shuffle_reps", ablation.shuffle_reps},
                     {"moderate_bleu", ablation.moderate_bleu},
                     {"include_natural", ablation.include_natural}};
    j["bleu"] = {{"max_order", bleu.max_order}, {"epsilon", bleu.epsilon}};
    j["paths"] = {{"ckpt", paths.ckpt},         {"dataset", paths.dataset},
                  {"triples", paths.triples},   {"prune", paths.prune},
                  {"replace", paths.replace},   {"shuffle", paths.shuffle},
                  {"report_dir", paths.report_dir}};
    return j;
}

std::string RunConfig::config_hash() const {
    // identifies the experiment: output location, worker count and path
    // overrides do not affect results
    ordered_json j = to_json();
    j.erase("out_dir");
    j.erase("workers");
    j.erase("paths");
    return Sha256::hex(j.dump());
}

void RunConfig::validate() const {
    require(!corpus_paths.empty(), ErrorKind::config, "config: corpus paths missing");
    for (const auto& p : corpus_paths)
        require(fs::exists(p), ErrorKind::config, "config: corpus file not found: " + p);
    require(!out_dir.empty(), ErrorKind::config, "config: out_dir is empty");
    require(workers >= 1, ErrorKind::config, "config: workers must be >= 1");
    require(sample_count >= 1, ErrorKind::config, "config: sample_count must be >= 1");
    try {
        model.validate();
        filters.validate();
    } catch (const Error& e) {
        fail(ErrorKind::config, std::string("config: ") + e.what());
    }
    require(gcg.prompt_len >= 1 && gcg.topk >= 1 && gcg.candidates >= 1, ErrorKind::config,
            "config: gcg counts must be >= 1");
    require(gcg.topk <= model.vocab_size, ErrorKind::config,
            "config: gcg.topk exceeds model vocab_size");
    require(gcg.prompt_len + filters.max_new <= model.context_len, ErrorKind::config,
            "config: prompt_len + max_new exceeds context_len");
    require(filters.max_prompt_len <= model.context_len, ErrorKind::config,
            "config: max_prompt_len exceeds context_len");
    require(ablation.pool_size >= 1, ErrorKind::config, "config: ablation.pool_size must be >= 1");
    require(ablation.shuffle_reps >= 1, ErrorKind::config,
            "config: ablation.shuffle_reps must be >= 1");
    require(ablation.moderate_bleu >= 0.0 && ablation.moderate_bleu <= 1.0, ErrorKind::config,
            "config: ablation.moderate_bleu must lie in [0,1]");
    require(bleu.max_order >= 1 && bleu.epsilon > 0.0, ErrorKind::config,
            "config: invalid bleu settings");
}

RunPaths RunPaths::resolve(const RunConfig& cfg) {
    auto pick = [&](const std::string& override_path, const char* name) {
        return override_path.empty() ? (fs::path(cfg.out_dir) / name).string() : override_path;
    };
    RunPaths p;
    p.ckpt = pick(cfg.paths.ckpt, "model.ckpt");
    p.dataset = pick(cfg.paths.dataset, "dataset.jsonl");
    p.triples = pick(cfg.paths.triples, "triples.jsonl");
    p.induce_summary = (fs::path(cfg.out_dir) / "induce_summary.json").string();
    p.prune = pick(cfg.paths.prune, "prune.jsonl");
    p.replace = pick(cfg.paths.replace, "replace.jsonl");
    p.shuffle = pick(cfg.paths.shuffle, "shuffle.jsonl");
    p.report_dir = cfg.paths.report_dir.empty() ? (fs::path(cfg.out_dir) / "report").string()
                                                : cfg.paths.report_dir;
    p.manifest = (fs::path(cfg.out_dir) / "manifest.json").string();
    p.config_copy = (fs::path(cfg.out_dir) / "config.json").string();
    return p;
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::train: return "train";
        case Stage::dataset: return "dataset";
        case Stage::induce: return "induce";
        case Stage::prune: return "prune";
        case Stage::replace: return "replace";
        case Stage::shuffle: return "shuffle";
        case Stage::report: return "report";
    }
    return "?";
}

std::optional<Stage> stage_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kStageCount; ++i) {
        Stage s = static_cast<Stage>(i);
        if (name == stage_name(s)) return s;
    }
    return std::nullopt;
}

// ------------------------------------------------------- row serialization

ordered_json dataset_row_to_json(const gcg::DatasetRow& row, const corpus::Vocab& vocab) {
    ordered_json j;
    j["id"] = row.id;
    j["doc"] = row.doc;
    j["begin"] = row.begin;
    j["prompt"] = tokens_to_json(row.prompt);
    j["prompt_text"] = vocab.detokenize(row.prompt);
    j["continuation"] = tokens_to_json(row.continuation);
    j["continuation_text"] = vocab.detokenize(row.continuation);
    j["corpus_continuation"] = tokens_to_json(row.corpus_continuation);
    j["memorization_bleu"] = row.memorization_bleu;
    j["truncated"] = row.truncated;
    return j;
}

gcg::DatasetRow dataset_row_from_json(const json& j) {
    gcg::DatasetRow row;
    row.id = j.at("id").get<std::size_t>();
    row.doc = j.at("doc").get<std::size_t>();
    row.begin = j.at("begin").get<std::size_t>();
    row.prompt = tokens_from_json(j.at("prompt"), "dataset.prompt");
    row.continuation = tokens_from_json(j.at("continuation"), "dataset.continuation");
    row.corpus_continuation =
        tokens_from_json(j.at("corpus_continuation"), "dataset.corpus_continuation");
    row.memorization_bleu = j.at("memorization_bleu").get<double>();
    row.truncated = j.at("truncated").get<bool>();
    return row;
}

ordered_json triple_to_json(const gcg::Triple& t, const corpus::Vocab& vocab) {
    ordered_json j;
    j["id"] = t.id;
    j["original_prompt"] = tokens_to_json(t.original_prompt);
    j["original_prompt_text"] = vocab.detokenize(t.original_prompt);
    j["autoprompt"] = tokens_to_json(t.autoprompt);
    j["autoprompt_text"] = vocab.detokenize(t.autoprompt);
    j["continuation"] = tokens_to_json(t.continuation);
    j["continuation_text"] = vocab.detokenize(t.continuation);
    j["final_loss"] = t.final_loss;
    j["iters_used"] = t.iters_used;
    j["success"] = t.success;
    j["memorization_bleu"] = t.memorization_bleu;
    return j;
}

gcg::Triple triple_from_json(const json& j) {
    gcg::Triple t;
    t.id = j.at("id").get<std::size_t>();
    t.original_prompt = tokens_from_json(j.at("original_prompt"), "triple.original_prompt");
    t.autoprompt = tokens_from_json(j.at("autoprompt"), "triple.autoprompt");
    t.continuation = tokens_from_json(j.at("continuation"), "triple.continuation");
    t.final_loss = j.at("final_loss").get<float>();
    t.iters_used = j.at("iters_used").get<std::uint32_t>();
    t.success = j.at("success").get<bool>();
    t.memorization_bleu = j.at("memorization_bleu").get<double>();
    return t;
}

ordered_json prune_row_to_json(const std::string& source, std::size_t id,
                               const ablate::PruneResult& r) {
    ordered_json removed = ordered_json::array();
    for (const auto& [pos, tok] : r.removed) removed.push_back(ordered_json::array({pos, tok}));
    ordered_json j;
    j["source"] = source;
    j["id"] = id;
    j["input"] = tokens_to_json(r.input);
    j["pruned"] = tokens_to_json(r.pruned);
    j["removed"] = std::move(removed);
    j["steps"] = r.steps;
    return j;
}

void prune_row_from_json(const json& j, std::string& source, std::size_t& id,
                         ablate::PruneResult& r) {
    source = j.at("source").get<std::string>();
    id = j.at("id").get<std::size_t>();
    r.input = tokens_from_json(j.at("input"), "prune.input");
    r.pruned = tokens_from_json(j.at("pruned"), "prune.pruned");
    r.removed.clear();
    for (const auto& e : j.at("removed"))
        r.removed.emplace_back(e.at(0).get<std::uint32_t>(), e.at(1).get<TokenId>());
    r.steps = j.at("steps").get<std::uint32_t>();
}

ordered_json sweep_row_to_json(const std::string& source, std::size_t id, const TokenSeq& base,
                               const ablate::SweepResult& r) {
    ordered_json conts = ordered_json::array();
    for (const auto& c : r.continuations) conts.push_back(tokens_to_json(c));
    ordered_json positions = ordered_json::array();
    for (const auto& p : r.positions) {
        ordered_json records = ordered_json::array();
        for (const auto& rec : p.records) {
            records.push_back(ordered_json::array({rec.substitute,
                                                   static_cast<int>(rec.bin),
                                                   rec.continuation_index, rec.bleu}));
        }
        ordered_json pj;
        pj["position"] = p.position;
        pj["original"] = p.original;
        pj["equivalents"] = tokens_to_json(p.equivalents);
        pj["records"] = std::move(records);
        positions.push_back(std::move(pj));
    }
    ordered_json j;
    j["source"] = source;
    j["id"] = id;
    j["base"] = tokens_to_json(base);
    j["continuations"] = std::move(conts);
    j["positions"] = std::move(positions);
    return j;
}

void sweep_row_from_json(const json& j, std::string& source, std::size_t& id, TokenSeq& base,
                         ablate::SweepResult& r) {
    source = j.at("source").get<std::string>();
    id = j.at("id").get<std::size_t>();
    base = tokens_from_json(j.at("base"), "replace.base");
    r.continuations.clear();
    for (const auto& c : j.at("continuations"))
        r.continuations.push_back(tokens_from_json(c, "replace.continuations"));
    r.positions.clear();
    for (const auto& pj : j.at("positions")) {
        ablate::PositionSweep p;
        p.position = pj.at("position").get<std::uint32_t>();
        p.original = pj.at("original").get<TokenId>();
        p.equivalents = tokens_from_json(pj.at("equivalents"), "replace.equivalents");
        for (const auto& rec : pj.at("records")) {
            ablate::ReplacementRecord rr;
            rr.substitute = rec.at(0).get<TokenId>();
            rr.bin = static_cast<ablate::EffectBin>(rec.at(1).get<int>());
            rr.continuation_index = rec.at(2).get<std::int32_t>();
            rr.bleu = rec.at(3).get<double>();
            p.records.push_back(rr);
        }
        r.positions.push_back(std::move(p));
    }
}

ordered_json shuffle_row_to_json(const std::string& source, std::size_t id,
                                 const TokenSeq& prompt, const ablate::ShuffleOutcome& o) {
    ordered_json perms = ordered_json::array();
    for (const auto& p : o.permutations) {
        ordered_json pj = ordered_json::array();
        for (auto v : p) pj.push_back(v);
        perms.push_back(std::move(pj));
    }
    ordered_json j;
    j["source"] = source;
    j["id"] = id;
    j["mode"] = ablate::shuffle_mode_name(o.mode);
    j["prompt"] = tokens_to_json(prompt);
    j["permutations"] = std::move(perms);
    j["bleu"] = o.bleu;
    j["mean"] = o.mean;
    j["sd"] = o.sd;
    return j;
}

void shuffle_row_from_json(const json& j, std::string& source, std::size_t& id, TokenSeq& prompt,
                           ablate::ShuffleOutcome& o) {
    source = j.at("source").get<std::string>();
    id = j.at("id").get<std::size_t>();
    prompt = tokens_from_json(j.at("prompt"), "shuffle.prompt");
    std::string mode = j.at("mode").get<std::string>();
    if (mode == "all") o.mode = ablate::ShuffleMode::all;
    else if (mode == "keep_last") o.mode = ablate::ShuffleMode::keep_last;
    else if (mode == "keep_random_non_last") o.mode = ablate::ShuffleMode::keep_random_non_last;
    else fail(ErrorKind::io, "unknown shuffle mode: " + mode);
    o.permutations.clear();
    for (const auto& p : j.at("permutations")) {
        std::vector<std::uint32_t> perm;
        for (const auto& v : p) perm.push_back(v.get<std::uint32_t>());
        o.permutations.push_back(std::move(perm));
    }
    o.bleu = j.at("bleu").get<std::vector<double>>();
    o.repetitions = static_cast<std::uint32_t>(o.bleu.size());
    o.mean = j.at("mean").get<double>();
    o.sd = j.at("sd").get<double>();
}

// ------------------------------------------------------------------ stages

namespace {

struct StageContext {
    const RunConfig& cfg;
    RunPaths paths;

    std::optional<lm::Model> model_;
    std::optional<corpus::Corpus> corpus_;
    std::optional<corpus::BigramTable> bigrams_;

    explicit StageContext(const RunConfig& c) : cfg(c), paths(RunPaths::resolve(c)) {}

    lm::Model& model() {
        if (!model_) model_ = lm::load_checkpoint(paths.ckpt);
        return *model_;
    }
    corpus::Corpus& corpus() {
        if (!corpus_) corpus_ = corpus::Corpus::load_files(cfg.corpus_paths, model().vocab);
        return *corpus_;
    }
    corpus::BigramTable& bigrams() {
        if (!bigrams_) bigrams_ = corpus::BigramTable::build(corpus());
        return *bigrams_;
    }
    std::vector<TokenId> frequent_pool() {
        std::size_t k = std::min<std::size_t>(cfg.ablation.pool_size, model().vocab.size());
        return corpus::top_frequent_tokens(bigrams(), k);
    }
    std::vector<gcg::Triple> triples() {
        std::vector<gcg::Triple> out;
        for (const auto& j : read_jsonl(paths.triples)) out.push_back(triple_from_json(j));
        require(!out.empty(), ErrorKind::state, "triple dataset is empty: " + paths.triples);
        return out;
    }
    // (source, id) -> prune result
    std::map<std::pair<std::string, std::size_t>, ablate::PruneResult> prune_rows() {
        std::map<std::pair<std::string, std::size_t>, ablate::PruneResult> out;
        for (const auto& j : read_jsonl(paths.prune)) {
            std::string source;
            std::size_t id;
            ablate::PruneResult r;
            prune_row_from_json(j, source, id, r);
            out[{source, id}] = std::move(r);
        }
        require(!out.empty(), ErrorKind::state, "prune output is empty: " + paths.prune);
        return out;
    }
};

void stage_train(StageContext& ctx, ordered_json& entry) {
    const RunConfig& cfg = ctx.cfg;
    corpus::Corpus corpus = corpus::Corpus::load_files(cfg.corpus_paths, cfg.model.vocab_size);
    lm::ModelConfig mcfg = cfg.model;
    mcfg.vocab_size = static_cast<std::uint32_t>(corpus.vocab().size());
    TokenSeq stream = corpus.training_stream();
    lm::TrainResult trained = lm::train_tiny_lm(stream, mcfg, cfg.train, cfg.seed, cfg.workers);

    lm::Model model{corpus.vocab(), std::move(trained.params)};
    ordered_json meta;
    meta["seed"] = cfg.seed;
    meta["corpus"] = cfg.corpus_paths;
    meta["corpus_tokens"] = stream.size();
    meta["initial_loss"] = trained.initial_loss;
    meta["final_loss"] = trained.final_loss;
    meta["train"] = {{"steps", cfg.train.steps},
                     {"batch_size", cfg.train.batch_size},
                     {"learning_rate", cfg.train.learning_rate}};
    lm::save_checkpoint(model, ctx.paths.ckpt, meta);
    ctx.model_ = std::move(model);

    entry["stats"] = {{"vocab_size", mcfg.vocab_size},
                      {"param_count", ctx.model_->params.param_count()},
                      {"corpus_tokens", stream.size()},
                      {"initial_loss", trained.initial_loss},
                      {"final_loss", trained.final_loss}};
    entry["outputs"] = {{ctx.paths.ckpt, sha256_file(ctx.paths.ckpt)},
                        {ctx.paths.ckpt + ".json", sha256_file(ctx.paths.ckpt + ".json")}};
}

void stage_dataset(StageContext& ctx, ordered_json& entry) {
    const RunConfig& cfg = ctx.cfg;
    backend::LocalBackend be(ctx.model());
    gcg::DatasetStats stats;
    auto rows = gcg::build_prompt_dataset(be, ctx.corpus(), cfg.filters, cfg.sample_count,
                                          cfg.seed, cfg.workers, &stats);
    std::vector<ordered_json> lines;
    lines.reserve(rows.size());
    for (const auto& r : rows) lines.push_back(dataset_row_to_json(r, ctx.model().vocab));
    write_jsonl(ctx.paths.dataset, lines);

    entry["stats"] = {{"sampled", stats.sampled},
                      {"short_continuation", stats.short_continuation},
                      {"memorized", stats.memorized},
                      {"kept", stats.kept}};
    entry["outputs"] = {{ctx.paths.dataset, sha256_file(ctx.paths.dataset)}};
}

gcg::GcgConfig make_gcg_config(StageContext& ctx) {
    gcg::GcgConfig g;
    g.prompt_len = ctx.cfg.gcg.prompt_len;
    g.topk = ctx.cfg.gcg.topk;
    g.candidates = ctx.cfg.gcg.candidates;
    g.max_iters = ctx.cfg.gcg.max_iters;
    g.exhaustive = ctx.cfg.gcg.exhaustive;
    // mutation pool stays the full vocabulary; initialization draws from the
    // top-frequent pool
    g.init_pool = ctx.frequent_pool();
    g.validate(ctx.model().vocab.size());
    return g;
}

void stage_induce(StageContext& ctx, ordered_json& entry) {
    const RunConfig& cfg = ctx.cfg;
    std::vector<gcg::DatasetRow> rows;
    for (const auto& j : read_jsonl(ctx.paths.dataset)) rows.push_back(dataset_row_from_json(j));
    require(!rows.empty(), ErrorKind::state,
            "dataset stage produced no rows; nothing to induce against");

    backend::LocalBackend be(ctx.model());
    gcg::GcgConfig g = make_gcg_config(ctx);
    gcg::InduceStats stats;
    auto triples = gcg::build_triple_dataset(be, rows, g, cfg.filters, cfg.seed, cfg.workers,
                                             &stats);

    std::vector<ordered_json> lines;
    for (const auto& t : triples) lines.push_back(triple_to_json(t, ctx.model().vocab));
    write_jsonl(ctx.paths.triples, lines);

    ordered_json summary;
    summary["attempted"] = stats.attempted;
    summary["succeeded"] = stats.succeeded;
    summary["success_rate"] = stats.success_rate;
    summary["gcg"] = {{"prompt_len", g.prompt_len},
                      {"topk", g.topk},
                      {"candidates", g.candidates},
                      {"max_iters", g.max_iters}};
    write_text(ctx.paths.induce_summary, summary.dump(2) + "\n");

    entry["stats"] = summary;
    entry["outputs"] = {{ctx.paths.triples, sha256_file(ctx.paths.triples)},
                        {ctx.paths.induce_summary, sha256_file(ctx.paths.induce_summary)}};
}

void stage_prune(StageContext& ctx, ordered_json& entry) {
    const RunConfig& cfg = ctx.cfg;
    auto triples = ctx.triples();
    backend::LocalBackend be(ctx.model());
    lm::StopPolicy stop = be.sentence_stop();

    struct Item {
        const char* source;
        std::size_t triple_index;
    };
    std::vector<Item> items;
    for (std::size_t i = 0; i < triples.size(); ++i) {
        items.push_back({"autoprompt", i});
        if (cfg.ablation.include_natural) items.push_back({"natural", i});
    }
    std::vector<ablate::PruneResult> results(items.size());
    parallel_for(items.size(), cfg.workers, [&](std::size_t ix) {
        const auto& item = items[ix];
        const auto& t = triples[item.triple_index];
        TokenView prompt = std::string_view(item.source) == "autoprompt"
                               ? TokenView(t.autoprompt)
                               : TokenView(t.original_prompt);
        RandomStream rng = derive_stream(cfg.seed, std::string("prune-") + item.source, t.id);
        results[ix] = ablate::prune_greedy(be, prompt, t.continuation, cfg.filters.max_new, stop,
                                           rng, 1);
    });

    std::vector<ordered_json> lines;
    for (std::size_t ix = 0; ix < items.size(); ++ix) {
        lines.push_back(
            prune_row_to_json(items[ix].source, triples[items[ix].triple_index].id, results[ix]));
    }
    write_jsonl(ctx.paths.prune, lines);
    entry["stats"] = {{"rows", lines.size()}};
    entry["outputs"] = {{ctx.paths.prune, sha256_file(ctx.paths.prune)}};
}

void stage_replace(StageContext& ctx, ordered_json& entry) {
    const RunConfig& cfg = ctx.cfg;
    auto triples = ctx.triples();
    auto prunes = ctx.prune_rows();
    backend::LocalBackend be(ctx.model());
    lm::StopPolicy stop = be.sentence_stop();
    std::vector<TokenId> pool = ctx.frequent_pool();

    std::vector<ordered_json> lines;
    for (const auto& t : triples) {
        for (const char* source : {"autoprompt", "natural"}) {
            if (std::string_view(source) == "natural" && !cfg.ablation.include_natural) continue;
            auto it = prunes.find({source, t.id});
            require(it != prunes.end(), ErrorKind::state,
                    "prune output missing for triple " + std::to_string(t.id));
            const TokenSeq& base = it->second.pruned;
            ablate::SweepResult sweep =
                ablate::replace_sweep(be, base, t.continuation, pool, cfg.ablation.moderate_bleu,
                                      cfg.bleu, cfg.filters.max_new, stop, cfg.workers);
            lines.push_back(sweep_row_to_json(source, t.id, base, sweep));
        }
    }
    write_jsonl(ctx.paths.replace, lines);
    entry["stats"] = {{"rows", lines.size()}, {"pool", pool.size()}};
    entry["outputs"] = {{ctx.paths.replace, sha256_file(ctx.paths.replace)}};
}

void stage_shuffle(StageContext& ctx, ordered_json& entry) {
    const RunConfig& cfg = ctx.cfg;
    auto triples = ctx.triples();
    auto prunes = ctx.prune_rows();
    backend::LocalBackend be(ctx.model());
    lm::StopPolicy stop = be.sentence_stop();

    struct Item {
        const char* source;
        std::size_t triple_index;
        ablate::ShuffleMode mode;
    };
    std::vector<Item> items;
    const ablate::ShuffleMode modes[] = {ablate::ShuffleMode::all, ablate::ShuffleMode::keep_last,
                                         ablate::ShuffleMode::keep_random_non_last};
    for (std::size_t i = 0; i < triples.size(); ++i) {
        for (const char* source : {"autoprompt", "natural"}) {
            if (std::string_view(source) == "natural" && !cfg.ablation.include_natural) continue;
            for (auto mode : modes) items.push_back({source, i, mode});
        }
    }

    std::vector<ablate::ShuffleOutcome> results(items.size());
    std::vector<const TokenSeq*> prompts(items.size());
    parallel_for(items.size(), cfg.workers, [&](std::size_t ix) {
        const auto& item = items[ix];
        const auto& t = triples[item.triple_index];
        auto it = prunes.find({item.source, t.id});
        require(it != prunes.end(), ErrorKind::state,
                "prune output missing for triple " + std::to_string(t.id));
        prompts[ix] = &it->second.pruned;
        RandomStream rng = derive_stream(cfg.seed,
                                         std::string("shuffle-") + item.source + "-" +
                                             ablate::shuffle_mode_name(item.mode),
                                         t.id);
        results[ix] = ablate::shuffle_ablation(be, *prompts[ix], t.continuation, item.mode,
                                               cfg.ablation.shuffle_reps, cfg.bleu,
                                               cfg.filters.max_new, stop, rng, 1);
    });

    std::vector<ordered_json> lines;
    for (std::size_t ix = 0; ix < items.size(); ++ix) {
        lines.push_back(shuffle_row_to_json(items[ix].source, triples[items[ix].triple_index].id,
                                            *prompts[ix], results[ix]));
    }
    write_jsonl(ctx.paths.shuffle, lines);
    entry["stats"] = {{"rows", lines.size()}};
    entry["outputs"] = {{ctx.paths.shuffle, sha256_file(ctx.paths.shuffle)}};
}

// ---- report helpers ----

struct SourceData {
    std::vector<ablate::PruneResult> prunes;
    std::vector<ablate::SweepResult> sweeps;
    std::vector<TokenSeq> sweep_bases;
    std::map<std::string, std::map<std::size_t, ablate::ShuffleOutcome>> shuffles; // mode -> id
    std::vector<std::size_t> ids;
};

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::string>& rows) {
    std::string content = header + "\n";
    for (const auto& r : rows) content += r + "\n";
    write_text(path, content);
}

ordered_json prune_summary(const SourceData& data, const corpus::Vocab& vocab,
                           const std::string& dir, const std::string& name) {
    const auto& prunes = data.prunes;
    std::size_t prunable = 0;
    std::vector<double> removed_counts;
    std::uint64_t pruned_nonling = 0, pruned_total = 0;
    std::uint64_t kept_nonling = 0, kept_total = 0;
    std::size_t with_pruned_last10 = 0;
    corpus::LmiTable lmi;
    for (const auto& r : prunes) {
        if (!r.removed.empty()) ++prunable;
        removed_counts.push_back(static_cast<double>(r.removed.size()));
        std::vector<char> removed(r.input.size(), 0);
        bool last10 = false;
        for (const auto& [pos, tok] : r.removed) {
            removed[pos] = 1;
            if (r.input.size() - 1 - pos < 10) last10 = true;
        }
        if (last10) ++with_pruned_last10;
        for (std::size_t pos = 0; pos < r.input.size(); ++pos) {
            bool nonling =
                vocab.token_class(r.input[pos]) == corpus::TokenClass::non_linguistic;
            if (removed[pos]) {
                ++pruned_total;
                if (nonling) ++pruned_nonling;
                lmi.add(r.input[pos], corpus::LmiTable::pruned);
            } else {
                ++kept_total;
                if (nonling) ++kept_nonling;
                lmi.add(r.input[pos], corpus::LmiTable::kept);
            }
        }
    }

    ablate::PruneHistogram hist = ablate::prune_position_histogram(prunes);
    {
        std::vector<std::string> rows;
        for (std::size_t i = 0; i < hist.pruned.size(); ++i)
            rows.push_back(std::to_string(i) + "," + std::to_string(hist.pruned[i]) + "," +
                           std::to_string(hist.kept[i]));
        write_csv(dir + "/prune_positions_" + name + ".csv", "position,pruned,kept", rows);
    }
    {
        std::vector<std::string> rows;
        for (auto cls : {corpus::LmiTable::kept, corpus::LmiTable::pruned}) {
            auto ranking = lmi.ranking(cls, 10);
            for (std::size_t i = 0; i < ranking.size(); ++i) {
                rows.push_back(std::string(cls == corpus::LmiTable::kept ? "kept" : "pruned") +
                               "," + std::to_string(i + 1) + ",\"" +
                               vocab.token(ranking[i].first) + "\"," +
                               std::to_string(lmi.observed(ranking[i].first, cls)) + "," +
                               fmt(ranking[i].second));
            }
        }
        write_csv(dir + "/lmi_" + name + ".csv", "class,rank,token,observed,lmi", rows);
    }

    ordered_json j;
    j["prompts"] = prunes.size();
    j["prunable_rate"] = prunes.empty() ? 0.0 : static_cast<double>(prunable) / prunes.size();
    j["avg_tokens_pruned"] = metrics::mean(removed_counts);
    j["sd_tokens_pruned"] = metrics::sample_sd(removed_counts);
    j["pct_nonlinguistic_pruned"] =
        pruned_total ? static_cast<double>(pruned_nonling) / pruned_total : 0.0;
    j["pct_nonlinguistic_kept"] =
        kept_total ? static_cast<double>(kept_nonling) / kept_total : 0.0;
    j["pct_nonlinguistic_all"] =
        (pruned_total + kept_total)
            ? static_cast<double>(pruned_nonling + kept_nonling) / (pruned_total + kept_total)
            : 0.0;
    j["pct_prompts_with_pruned_in_last10"] =
        prunes.empty() ? 0.0 : static_cast<double>(with_pruned_last10) / prunes.size();
    ordered_json pruned_arr = ordered_json::array(), kept_arr = ordered_json::array();
    for (auto v : hist.pruned) pruned_arr.push_back(v);
    for (auto v : hist.kept) kept_arr.push_back(v);
    j["positions"] = {{"pruned", pruned_arr}, {"kept", kept_arr}};
    return j;
}

ordered_json replacement_summary(const SourceData& data, const corpus::Vocab& vocab,
                                 const std::string& dir, const std::string& name) {
    auto effect_rows = ablate::effect_position_stats(data.sweeps);
    {
        std::vector<std::string> rows;
        for (const auto& r : effect_rows) {
            rows.push_back(std::to_string(r.position) + "," + std::to_string(r.prompts) + "," +
                           fmt(r.mean[0]) + "," + fmt(r.sd[0]) + "," + fmt(r.mean[1]) + "," +
                           fmt(r.sd[1]) + "," + fmt(r.mean[2]) + "," + fmt(r.sd[2]));
        }
        write_csv(dir + "/replacement_effects_" + name + ".csv",
                  "position,prompts,null_mean,null_sd,moderate_mean,moderate_sd,strong_mean,"
                  "strong_sd",
                  rows);
    }

    struct SetRow {
        std::size_t id;
        std::uint32_t position;
        TokenId original;
        corpus::TokenClass cls;
        std::size_t size;
    };
    std::vector<SetRow> sets;
    for (std::size_t i = 0; i < data.sweeps.size(); ++i) {
        for (const auto& p : data.sweeps[i].positions) {
            sets.push_back({data.ids[i], p.position, p.original,
                            vocab.token_class(p.original), p.equivalents.size()});
        }
    }
    {
        std::vector<std::string> rows;
        for (const auto& s : sets) {
            rows.push_back(std::to_string(s.id) + "," + std::to_string(s.position) + ",\"" +
                           vocab.token(s.original) + "\"," +
                           (s.cls == corpus::TokenClass::language_like ? "language_like"
                                                                       : "non_linguistic") +
                           "," + std::to_string(s.size));
        }
        write_csv(dir + "/equivalent_sizes_" + name + ".csv",
                  "id,position,original,class,set_size", rows);
    }

    auto class_stats = [&](auto pred) -> ordered_json {
        std::vector<double> sizes;
        std::size_t with_any = 0, over50 = 0;
        for (const auto& s : sets) {
            if (!pred(s)) continue;
            sizes.push_back(static_cast<double>(s.size));
            if (s.size >= 1) ++with_any;
            if (s.size > 50) ++over50;
        }
        ordered_json j;
        j["tokens"] = sizes.size();
        if (sizes.empty()) return j;
        j["mean"] = metrics::mean(sizes);
        j["median"] = metrics::median(sizes);
        j["pct_with_any"] = static_cast<double>(with_any) / sizes.size();
        j["pct_over_50"] = static_cast<double>(over50) / sizes.size();
        return j;
    };
    ordered_json all = class_stats([](const SetRow&) { return true; });
    ordered_json lang = class_stats(
        [](const SetRow& s) { return s.cls == corpus::TokenClass::language_like; });
    ordered_json nonling = class_stats(
        [](const SetRow& s) { return s.cls == corpus::TokenClass::non_linguistic; });
    {
        auto row = [&](const char* cls, const ordered_json& s) {
            if (!s.contains("mean"))
                return std::string(cls) + "," + s["tokens"].dump() + ",,,,";
            return std::string(cls) + "," + s["tokens"].dump() + "," + s["mean"].dump() + "," +
                   s["median"].dump() + "," + s["pct_with_any"].dump() + "," +
                   s["pct_over_50"].dump();
        };
        write_csv(dir + "/equivalents_summary_" + name + ".csv",
                  "class,tokens,mean,median,pct_with_any,pct_over_50",
                  {row("all", all), row("language_like", lang), row("non_linguistic", nonling)});
    }

    ordered_json j;
    j["sets"] = {{"all", all}, {"language_like", lang}, {"non_linguistic", nonling}};
    ordered_json strong = ordered_json::array(), null_arr = ordered_json::array();
    for (const auto& r : effect_rows) {
        strong.push_back(r.mean[2]);
        null_arr.push_back(r.mean[0]);
    }
    j["strong_by_position"] = strong;
    j["null_by_position"] = null_arr;
    return j;
}

ordered_json shuffle_summary(const SourceData& data, const std::string& dir,
                             const std::string& name, std::vector<std::string>& summary_rows,
                             std::vector<std::string>& test_rows) {
    ordered_json j;
    std::map<std::string, std::map<std::size_t, double>> means;
    for (const auto& [mode, by_id] : data.shuffles) {
        std::vector<double> vals;
        for (const auto& [id, o] : by_id) {
            means[mode][id] = o.mean;
            vals.push_back(o.mean);
        }
        ordered_json mj;
        mj["prompts"] = vals.size();
        mj["mean"] = vals.empty() ? 0.0 : metrics::mean(vals);
        mj["sd"] = metrics::sample_sd(vals);
        j[mode] = mj;
        summary_rows.push_back(name + "," + mode + "," + std::to_string(vals.size()) + "," +
                               fmt(mj["mean"].get<double>()) + "," +
                               fmt(mj["sd"].get<double>()));
    }

    auto run_test = [&](const char* label, const char* mode_a, const char* mode_b) {
        ordered_json tj;
        std::vector<double> a, b;
        for (const auto& [id, v] : means[mode_a]) {
            auto it = means[mode_b].find(id);
            if (it != means[mode_b].end()) {
                a.push_back(v);
                b.push_back(it->second);
            }
        }
        tj["pairs"] = a.size();
        try {
            metrics::TTestResult t = metrics::paired_t_test(a, b);
            tj["t"] = t.t;
            tj["p_two_tailed"] = t.p_two_tailed;
            test_rows.push_back(name + "," + label + "," + std::to_string(a.size()) + "," +
                                fmt(t.t) + "," + fmt(t.p_two_tailed));
        } catch (const Error& e) {
            tj["error"] = e.what();
            test_rows.push_back(name + "," + label + "," + std::to_string(a.size()) + ",,");
        }
        j["tests"][label] = tj;
    };
    run_test("all_vs_keep_last", "all", "keep_last");
    run_test("keep_last_vs_keep_random_non_last", "keep_last", "keep_random_non_last");
    (void)dir;
    return j;
}

void stage_report(StageContext& ctx, ordered_json& entry) {
    const RunConfig& cfg = ctx.cfg;
    auto triples = ctx.triples();
    auto prunes = ctx.prune_rows();
    const corpus::Vocab& vocab = ctx.model().vocab;
    fs::create_directories(ctx.paths.report_dir);
    const std::string dir = ctx.paths.report_dir;

    // group rows per source
    std::map<std::string, SourceData> sources;
    for (const auto& t : triples) {
        for (const char* source : {"autoprompt", "natural"}) {
            auto it = prunes.find({source, t.id});
            if (it == prunes.end()) continue;
            auto& sd = sources[source];
            sd.prunes.push_back(it->second);
            sd.ids.push_back(t.id);
        }
    }
    require(sources.count("autoprompt"), ErrorKind::state,
            "report: no autoprompt prune results present");

    {
        std::map<std::pair<std::string, std::size_t>, std::pair<TokenSeq, ablate::SweepResult>>
            sweep_map;
        for (const auto& jrow : read_jsonl(ctx.paths.replace)) {
            std::string source;
            std::size_t id;
            TokenSeq base;
            ablate::SweepResult r;
            sweep_row_from_json(jrow, source, id, base, r);
            sweep_map[{source, id}] = {std::move(base), std::move(r)};
        }
        require(!sweep_map.empty(), ErrorKind::state, "report: replacement output is empty");
        for (auto& [source, sd] : sources) {
            for (std::size_t id : sd.ids) {
                auto it = sweep_map.find({source, id});
                require(it != sweep_map.end(), ErrorKind::state,
                        "report: replacement output missing for triple " + std::to_string(id));
                sd.sweep_bases.push_back(it->second.first);
                sd.sweeps.push_back(it->second.second);
            }
        }
    }
    {
        bool any = false;
        for (const auto& jrow : read_jsonl(ctx.paths.shuffle)) {
            std::string source;
            std::size_t id;
            TokenSeq prompt;
            ablate::ShuffleOutcome o;
            shuffle_row_from_json(jrow, source, id, prompt, o);
            if (!sources.count(source)) continue;
            sources[source].shuffles[ablate::shuffle_mode_name(o.mode)][id] = std::move(o);
            any = true;
        }
        require(any, ErrorKind::state, "report: shuffle output is empty");
    }

    ordered_json summary;
    summary["triples"] = triples.size();
    {
        std::ifstream in(ctx.paths.induce_summary, std::ios::binary);
        if (in.good()) {
            try {
                ordered_json is;
                in >> is;
                summary["induction"] = is;
            } catch (...) {
            }
        }
    }

    std::vector<std::string> shuffle_rows, test_rows;
    for (const char* source : {"autoprompt", "natural"}) {
        if (!sources.count(source)) {
            summary[source] = nullptr;
            continue;
        }
        auto& sd = sources[source];
        ordered_json sj;
        sj["pruning"] = prune_summary(sd, vocab, dir, source);
        sj["replacement"] = replacement_summary(sd, vocab, dir, source);
        sj["shuffle"] = shuffle_summary(sd, dir, source, shuffle_rows, test_rows);
        summary[source] = sj;
    }
    write_csv(dir + "/shuffle_summary.csv", "source,mode,prompts,mean,sd", shuffle_rows);
    write_csv(dir + "/shuffle_tests.csv", "source,comparison,pairs,t,p_two_tailed", test_rows);

    // bigram log-frequency groups (Fig. 4 shape): three groups
    {
        corpus::BigramTable& table = ctx.bigrams();
        std::vector<double> g_nat, g_auto, g_bound;
        for (const auto& t : triples) {
            for (std::size_t i = 0; i + 1 < t.original_prompt.size(); ++i)
                g_nat.push_back(table.log_freq(t.original_prompt[i], t.original_prompt[i + 1]));
            for (std::size_t i = 0; i + 1 < t.autoprompt.size(); ++i)
                g_auto.push_back(table.log_freq(t.autoprompt[i], t.autoprompt[i + 1]));
            if (!t.autoprompt.empty() && !t.continuation.empty())
                g_bound.push_back(table.log_freq(t.autoprompt.back(), t.continuation.front()));
        }
        std::vector<std::string> rows;
        auto emit_group = [&](const char* group, const std::vector<double>& vals) {
            for (double v : vals) rows.push_back(std::string(group) + "," + fmt(v));
        };
        emit_group("original_prompt", g_nat);
        emit_group("autoprompt", g_auto);
        emit_group("boundary", g_bound);
        write_csv(dir + "/bigram_log_freqs.csv", "group,log10_freq", rows);

        std::vector<std::string> srows;
        ordered_json bj;
        auto summarize = [&](const char* group, std::vector<double> vals) {
            ordered_json gj;
            gj["pairs"] = vals.size();
            if (!vals.empty()) {
                std::sort(vals.begin(), vals.end());
                gj["median"] = quantile_sorted(vals, 0.5);
                gj["q1"] = quantile_sorted(vals, 0.25);
                gj["q3"] = quantile_sorted(vals, 0.75);
                srows.push_back(std::string(group) + "," + std::to_string(vals.size()) + "," +
                                fmt(gj["median"].get<double>()) + "," +
                                fmt(gj["q1"].get<double>()) + "," + fmt(gj["q3"].get<double>()));
            } else {
                srows.push_back(std::string(group) + ",0,,,");
            }
            bj[group] = gj;
        };
        summarize("original_prompt", g_nat);
        summarize("autoprompt", g_auto);
        summarize("boundary", g_bound);
        write_csv(dir + "/bigram_summary.csv", "group,pairs,median,q1,q3", srows);
        summary["bigrams"] = bj;

        std::vector<TokenSeq> autoprompts;
        for (const auto& t : triples) autoprompts.push_back(t.autoprompt);
        auto pref = ablate::bigram_order_preference(autoprompts, table);
        if (pref) summary["bigram_order_preference"] = *pref;
        else summary["bigram_order_preference"] = nullptr;
    }

    // semantic consistency + compositional analysis on autoprompt sweeps
    {
        metrics::EmbeddingTable emb = metrics::embeddings_from_model(ctx.model());
        const auto& sd = sources["autoprompt"];
        std::vector<std::string> rows;
        for (std::size_t i = 0; i < sd.sweeps.size(); ++i) {
            for (const auto& p : sd.sweeps[i].positions) {
                if (p.equivalents.empty()) continue;
                if (vocab.token_class(p.original) != corpus::TokenClass::language_like) continue;
                auto sc = metrics::semantic_consistency(p.original, p.equivalents, emb, vocab);
                if (!sc) continue;
                rows.push_back(std::to_string(sd.ids[i]) + "," + std::to_string(p.position) +
                               ",\"" + vocab.token(p.original) + "\"," +
                               std::to_string(p.equivalents.size()) + "," +
                               std::to_string(sc->used_members) + "," +
                               std::to_string(sc->skipped_members) + "," +
                               fmt(sc->sim_to_original) + "," + fmt(sc->intra_set_sim));
            }
        }
        write_csv(dir + "/semantic_consistency_autoprompt.csv",
                  "id,position,original,set_size,used,skipped,sim_to_original,intra_set_sim",
                  rows);

        std::map<std::size_t, const gcg::Triple*> by_id;
        for (const auto& t : triples) by_id[t.id] = &t;
        std::vector<metrics::CompositionalInput> inputs;
        for (std::size_t i = 0; i < sd.sweeps.size(); ++i) {
            const auto& sweep = sd.sweeps[i];
            const auto& t = *by_id.at(sd.ids[i]);
            for (const auto& p : sweep.positions) {
                for (const auto& rec : p.records) {
                    if (rec.continuation_index < 0) continue;
                    inputs.push_back({sd.ids[i], p.position, p.original, rec.substitute,
                                      TokenView(t.continuation),
                                      TokenView(sweep.continuations[rec.continuation_index])});
                }
            }
        }
        std::size_t missing = 0;
        auto cases = metrics::extract_compositional_cases(inputs, emb, vocab, &missing);
        std::vector<std::string> crow;
        for (const auto& c : cases) {
            crow.push_back(std::to_string(c.triple_id) + "," + std::to_string(c.position) + ",\"" +
                           vocab.token(c.original_token) + "\",\"" +
                           vocab.token(c.substitute_token) + "\",\"" + c.original_word + "\",\"" +
                           c.new_word + "\"," + fmt(c.cosines[0]) + "," + fmt(c.cosines[1]) + "," +
                           fmt(c.cosines[2]) + "," + fmt(c.cosines[3]));
        }
        write_csv(dir + "/compositional_cases.csv",
                  "id,position,original_token,substitute_token,original_word,new_word,"
                  "cos_orig_old,cos_orig_new,cos_sub_old,cos_sub_new",
                  crow);
        ordered_json cj;
        cj["candidates"] = inputs.size();
        cj["cases"] = cases.size();
        cj["missing_embeddings"] = missing;
        auto stats = metrics::compositional_stats(cases);
        if (stats) {
            cj["frac_original_closer_to_new"] = stats->frac_original_closer_to_new;
            cj["frac_substitute_closer_to_new"] = stats->frac_substitute_closer_to_new;
        }
        summary["compositional"] = cj;
    }

    // corpus count tables for inspection
    ctx.bigrams().save_unigram_csv(dir + "/corpus_unigrams.csv", vocab);
    ctx.bigrams().save_bigram_csv(dir + "/corpus_bigrams.csv", vocab);

    write_text(dir + "/summary.json", summary.dump(2) + "\n");

    std::vector<std::string> outputs;
    for (const auto& f : fs::directory_iterator(dir)) outputs.push_back(f.path().string());
    std::sort(outputs.begin(), outputs.end());
    ordered_json out_digests;
    for (const auto& f : outputs) out_digests[f] = sha256_file(f);
    entry["outputs"] = out_digests;
    entry["stats"] = {{"report_files", outputs.size()}};
}

} // namespace

std::vector<std::string> sidecar_corpus_paths(const std::string& ckpt_path) {
    auto meta = lm::load_checkpoint_meta(ckpt_path);
    std::vector<std::string> out;
    if (meta.contains("meta") && meta["meta"].contains("corpus")) {
        for (const auto& p : meta["meta"]["corpus"]) out.push_back(p.get<std::string>());
    }
    require(!out.empty(), ErrorKind::config,
            "checkpoint sidecar records no corpus paths; pass --corpus explicitly");
    return out;
}

namespace {

std::vector<std::string> resolve_corpus(const std::string& ckpt,
                                        std::vector<std::string> corpus) {
    if (corpus.empty()) corpus = sidecar_corpus_paths(ckpt);
    for (const auto& p : corpus)
        require(fs::exists(p), ErrorKind::config, "corpus file not found: " + p);
    return corpus;
}

std::string parent_or_dot(const std::string& path) {
    auto parent = fs::path(path).parent_path();
    return parent.empty() ? std::string(".") : parent.string();
}

void apply_filters(const json& options, gcg::DatasetFilters& f) {
    if (!options.contains("filters")) return;
    const auto& j = options["filters"];
    check_keys(j,
               {"min_prompt_len", "max_prompt_len", "min_cont_len", "memorization_bleu_max",
                "max_new"},
               "options.filters");
    f.min_prompt_len = get_or<std::uint32_t>(j, "min_prompt_len", f.min_prompt_len, "filters");
    f.max_prompt_len = get_or<std::uint32_t>(j, "max_prompt_len", f.max_prompt_len, "filters");
    f.min_cont_len = get_or<std::uint32_t>(j, "min_cont_len", f.min_cont_len, "filters");
    f.memorization_bleu_max =
        get_or<double>(j, "memorization_bleu_max", f.memorization_bleu_max, "filters");
    f.max_new = get_or<std::uint32_t>(j, "max_new", f.max_new, "filters");
    f.validate();
}

} // namespace

void op_train(const std::vector<std::string>& corpus, const json& options, std::uint64_t seed,
              const std::string& out_ckpt, unsigned workers) {
    check_keys(options, {"model", "train"}, "train options");
    RunConfig scratch; // reuse the defaults
    lm::ModelConfig mcfg = scratch.model;
    lm::TrainConfig tcfg = scratch.train;
    if (options.contains("model")) {
        const auto& m = options["model"];
        check_keys(m, {"vocab_size", "context_len", "embed_dim", "n_layers", "n_heads"}, "model");
        mcfg.vocab_size = get_or<std::uint32_t>(m, "vocab_size", mcfg.vocab_size, "model");
        mcfg.context_len = get_or<std::uint32_t>(m, "context_len", mcfg.context_len, "model");
        mcfg.embed_dim = get_or<std::uint32_t>(m, "embed_dim", mcfg.embed_dim, "model");
        mcfg.n_layers = get_or<std::uint32_t>(m, "n_layers", mcfg.n_layers, "model");
        mcfg.n_heads = get_or<std::uint32_t>(m, "n_heads", mcfg.n_heads, "model");
    }
    if (options.contains("train")) {
        const auto& t = options["train"];
        check_keys(t,
                   {"steps", "batch_size", "learning_rate", "beta1", "beta2", "adam_eps",
                    "grad_clip", "linear_lr_decay", "init_std"},
                   "train");
        tcfg.steps = get_or<std::uint32_t>(t, "steps", tcfg.steps, "train");
        tcfg.batch_size = get_or<std::uint32_t>(t, "batch_size", tcfg.batch_size, "train");
        tcfg.learning_rate = get_or<float>(t, "learning_rate", tcfg.learning_rate, "train");
        tcfg.beta1 = get_or<float>(t, "beta1", tcfg.beta1, "train");
        tcfg.beta2 = get_or<float>(t, "beta2", tcfg.beta2, "train");
        tcfg.adam_eps = get_or<float>(t, "adam_eps", tcfg.adam_eps, "train");
        tcfg.grad_clip = get_or<float>(t, "grad_clip", tcfg.grad_clip, "train");
        tcfg.linear_lr_decay = get_or<bool>(t, "linear_lr_decay", tcfg.linear_lr_decay, "train");
        tcfg.init_std = get_or<float>(t, "init_std", tcfg.init_std, "train");
    }
    mcfg.validate();
    for (const auto& p : corpus)
        require(fs::exists(p), ErrorKind::config, "corpus file not found: " + p);

    RunConfig cfg;
    cfg.corpus_paths = corpus;
    cfg.model = mcfg;
    cfg.train = tcfg;
    cfg.seed = seed;
    cfg.workers = workers;
    cfg.paths.ckpt = out_ckpt;
    cfg.out_dir = parent_or_dot(out_ckpt);
    StageContext ctx(cfg);
    ordered_json entry;
    stage_train(ctx, entry);
}

void op_dataset(const std::string& ckpt, std::vector<std::string> corpus, const json& options,
                std::uint64_t seed, const std::string& out_path) {
    check_keys(options, {"sample_count", "workers", "filters"}, "dataset options");
    RunConfig cfg;
    cfg.corpus_paths = resolve_corpus(ckpt, std::move(corpus));
    cfg.seed = seed;
    cfg.sample_count = get_or<std::size_t>(options, "sample_count", cfg.sample_count, "options");
    cfg.workers = get_or<unsigned>(options, "workers", cfg.workers, "options");
    apply_filters(options, cfg.filters);
    cfg.paths.ckpt = ckpt;
    cfg.paths.dataset = out_path;
    cfg.out_dir = parent_or_dot(out_path);
    StageContext ctx(cfg);
    ordered_json entry;
    stage_dataset(ctx, entry);
}

void op_induce(const std::string& ckpt, std::vector<std::string> corpus,
               const std::string& dataset_path, const json& options, std::uint64_t seed,
               const std::string& out_path) {
    check_keys(options, {"sample_count", "workers", "filters", "gcg", "pool_size"},
               "induce options");
    RunConfig cfg;
    cfg.corpus_paths = resolve_corpus(ckpt, std::move(corpus));
    cfg.seed = seed;
    cfg.sample_count = get_or<std::size_t>(options, "sample_count", cfg.sample_count, "options");
    cfg.workers = get_or<unsigned>(options, "workers", cfg.workers, "options");
    cfg.ablation.pool_size =
        get_or<std::uint32_t>(options, "pool_size", cfg.ablation.pool_size, "options");
    apply_filters(options, cfg.filters);
    if (options.contains("gcg")) {
        const auto& g = options["gcg"];
        check_keys(g, {"prompt_len", "topk", "candidates", "max_iters", "exhaustive"}, "gcg");
        cfg.gcg.prompt_len = get_or<std::uint32_t>(g, "prompt_len", cfg.gcg.prompt_len, "gcg");
        cfg.gcg.topk = get_or<std::uint32_t>(g, "topk", cfg.gcg.topk, "gcg");
        cfg.gcg.candidates = get_or<std::uint32_t>(g, "candidates", cfg.gcg.candidates, "gcg");
        cfg.gcg.max_iters = get_or<std::uint32_t>(g, "max_iters", cfg.gcg.max_iters, "gcg");
        cfg.gcg.exhaustive = get_or<bool>(g, "exhaustive", cfg.gcg.exhaustive, "gcg");
    }
    cfg.paths.ckpt = ckpt;
    cfg.paths.triples = out_path;
    cfg.paths.dataset = dataset_path.empty() ? out_path + ".dataset.jsonl" : dataset_path;
    cfg.out_dir = parent_or_dot(out_path);
    StageContext ctx(cfg);
    ordered_json entry;
    if (dataset_path.empty()) stage_dataset(ctx, entry);
    ordered_json entry2;
    stage_induce(ctx, entry2);
}

void op_prune(const std::string& ckpt, const std::string& triples_path, const json& options,
              std::uint64_t seed, const std::string& out_path) {
    check_keys(options, {"workers", "max_new", "include_natural"}, "prune options");
    RunConfig cfg;
    cfg.seed = seed;
    cfg.workers = get_or<unsigned>(options, "workers", cfg.workers, "options");
    cfg.filters.max_new = get_or<std::uint32_t>(options, "max_new", cfg.filters.max_new, "options");
    cfg.ablation.include_natural =
        get_or<bool>(options, "include_natural", cfg.ablation.include_natural, "options");
    cfg.paths.ckpt = ckpt;
    cfg.paths.triples = triples_path;
    cfg.paths.prune = out_path;
    cfg.out_dir = parent_or_dot(out_path);
    StageContext ctx(cfg);
    ordered_json entry;
    stage_prune(ctx, entry);
}

void op_replace(const std::string& ckpt, const std::string& triples_path,
                const std::string& prune_path, std::vector<std::string> corpus,
                const json& options, std::uint64_t seed, const std::string& out_path) {
    check_keys(options, {"workers", "max_new", "pool_size", "moderate_bleu", "bleu"},
               "replace options");
    RunConfig cfg;
    cfg.corpus_paths = resolve_corpus(ckpt, std::move(corpus));
    cfg.seed = seed;
    cfg.workers = get_or<unsigned>(options, "workers", cfg.workers, "options");
    cfg.filters.max_new = get_or<std::uint32_t>(options, "max_new", cfg.filters.max_new, "options");
    cfg.ablation.pool_size =
        get_or<std::uint32_t>(options, "pool_size", cfg.ablation.pool_size, "options");
    cfg.ablation.moderate_bleu =
        get_or<double>(options, "moderate_bleu", cfg.ablation.moderate_bleu, "options");
    cfg.paths.ckpt = ckpt;
    cfg.paths.triples = triples_path;
    cfg.paths.prune = prune_path;
    cfg.paths.replace = out_path;
    cfg.out_dir = parent_or_dot(out_path);
    StageContext ctx(cfg);
    ordered_json entry;
    stage_replace(ctx, entry);
}

void op_shuffle(const std::string& ckpt, const std::string& triples_path,
                const std::string& prune_path, const json& options, std::uint64_t seed,
                const std::string& out_path) {
    check_keys(options, {"workers", "max_new", "reps"}, "shuffle options");
    RunConfig cfg;
    cfg.seed = seed;
    cfg.workers = get_or<unsigned>(options, "workers", cfg.workers, "options");
    cfg.filters.max_new = get_or<std::uint32_t>(options, "max_new", cfg.filters.max_new, "options");
    cfg.ablation.shuffle_reps =
        get_or<std::uint32_t>(options, "reps", cfg.ablation.shuffle_reps, "options");
    cfg.paths.ckpt = ckpt;
    cfg.paths.triples = triples_path;
    cfg.paths.prune = prune_path;
    cfg.paths.shuffle = out_path;
    cfg.out_dir = parent_or_dot(out_path);
    StageContext ctx(cfg);
    ordered_json entry;
    stage_shuffle(ctx, entry);
}

void op_report(const std::string& run_dir, const std::string& report_dir_override) {
    std::string config_path = (fs::path(run_dir) / "config.json").string();
    require(fs::exists(config_path), ErrorKind::config,
            "run directory has no config.json: " + run_dir);
    RunConfig cfg = RunConfig::load(config_path);
    cfg.out_dir = run_dir;
    if (!report_dir_override.empty()) cfg.paths.report_dir = report_dir_override;
    run_pipeline(cfg, Stage::report);
}

ordered_json run_pipeline(const RunConfig& cfg, std::optional<Stage> only) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    StageContext ctx(cfg);
    write_text(ctx.paths.config_copy, cfg.to_json().dump(2) + "\n");

    ordered_json manifest;
    if (fs::exists(ctx.paths.manifest)) {
        try {
            std::ifstream in(ctx.paths.manifest, std::ios::binary);
            in >> manifest;
        } catch (...) {
            manifest = ordered_json::object();
        }
    }
    manifest["format"] = "aplab-manifest";
    manifest["tool"] = kToolVersion;
    manifest["config_hash"] = cfg.config_hash();
    manifest["workers"] = cfg.workers;
    if (!manifest.contains("stages")) manifest["stages"] = ordered_json::object();

    std::vector<Stage> stages;
    if (only) stages.push_back(*only);
    else
        for (std::size_t i = 0; i < kStageCount; ++i) stages.push_back(static_cast<Stage>(i));

    for (Stage s : stages) {
        ordered_json entry;
        auto start = std::chrono::steady_clock::now();
        try {
            switch (s) {
                case Stage::train: stage_train(ctx, entry); break;
                case Stage::dataset: stage_dataset(ctx, entry); break;
                case Stage::induce: stage_induce(ctx, entry); break;
                case Stage::prune: stage_prune(ctx, entry); break;
                case Stage::replace: stage_replace(ctx, entry); break;
                case Stage::shuffle: stage_shuffle(ctx, entry); break;
                case Stage::report: stage_report(ctx, entry); break;
            }
        } catch (const std::exception& e) {
            entry["failed"] = e.what();
            entry["seconds"] =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            manifest["stages"][stage_name(s)] = entry;
            write_text(ctx.paths.manifest, manifest.dump(2) + "\n");
            throw;
        }
        entry["seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        manifest["stages"][stage_name(s)] = entry;
        write_text(ctx.paths.manifest, manifest.dump(2) + "\n");
    }
    return manifest;
}

} // namespace ap::pipeline
