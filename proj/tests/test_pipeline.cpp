#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "aplab/backend.hpp"
#include "aplab/pipeline.hpp"
#include "support/corpusgen.hpp"

namespace fs = std::filesystem;
using namespace ap;
using nlohmann::json;
using pipeline::RunConfig;
using pipeline::Stage;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path test_root() {
    fs::path p = fs::temp_directory_path() / "aplab_pipeline_test";
    return p;
}

std::string write_mini_corpus(const fs::path& dir) {
    fs::create_directories(dir);
    testsupport::CorpusSpec spec;
    spec.sentences = 60;
    spec.seed = 31;
    fs::path path = dir / "mini_corpus.txt";
    std::ofstream out(path, std::ios::binary);
    out << testsupport::generate_corpus(spec);
    return path.string();
}

RunConfig mini_config(const std::string& corpus, const std::string& out_dir) {
    json j = {
        {"corpus", {corpus}},
        {"out_dir", out_dir},
        {"seed", 11},
        {"workers", 2},
        {"sample_count", 18},
        {"model",
         {{"vocab_size", 320}, {"context_len", 64}, {"embed_dim", 32}, {"n_layers", 1},
          {"n_heads", 2}}},
        {"train", {{"steps", 220}, {"batch_size", 8}, {"learning_rate", 0.004}}},
        {"gcg", {{"prompt_len", 4}, {"topk", 64}, {"candidates", 96}, {"max_iters", 12}}},
        {"filters",
         {{"min_prompt_len", 12}, {"max_prompt_len", 20}, {"min_cont_len", 4},
          {"memorization_bleu_max", 1.0}, {"max_new", 8}}},
        {"ablation", {{"pool_size", 40}, {"shuffle_reps", 3}}},
    };
    return RunConfig::from_json(j);
}

} // namespace

TEST_CASE("config defaults match the methodology constants") {
    RunConfig c;
    CHECK(c.gcg.prompt_len == 10);
    CHECK(c.gcg.topk == 256);
    CHECK(c.gcg.candidates == 256);
    CHECK(c.gcg.max_iters == 50);
    CHECK(c.filters.max_new == 25);
    CHECK(c.filters.min_cont_len == 4);
    CHECK(c.filters.min_prompt_len == 35);
    CHECK(c.filters.max_prompt_len == 80);
    CHECK(c.filters.memorization_bleu_max == 0.1);
    CHECK(c.ablation.moderate_bleu == 0.2);
    CHECK(c.ablation.shuffle_reps == 10);
    CHECK(c.ablation.pool_size == 10000);
    CHECK(c.bleu.max_order == 4);
    CHECK(c.bleu.epsilon == 1e-9);
    CHECK(c.model.vocab_size == 512);
    CHECK(c.model.context_len == 64);
    CHECK(c.model.embed_dim == 64);
    CHECK(c.model.n_layers == 2);
    CHECK(c.model.n_heads == 2);
}

TEST_CASE("config validation rejects malformed and missing inputs") {
    CHECK_THROWS_AS(RunConfig::from_json(json{{"out_dir", "x"}}), Error); // no corpus
    CHECK_THROWS_AS(RunConfig::from_json(json{{"corpus", {"/does/not/exist.txt"}}}), Error);
    fs::path dir = test_root();
    std::string corpus = write_mini_corpus(dir);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"corpus", {corpus}}, {"typo_key", 1}}), Error);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"corpus", {corpus}}, {"seed", "not a number"}}),
                    Error);
    // prompt_len + max_new must fit the context
    json bad = {{"corpus", {corpus}},
                {"model", {{"context_len", 16}}},
                {"gcg", {{"prompt_len", 10}}},
                {"filters", {{"max_new", 25}, {"max_prompt_len", 12}}}};
    CHECK_THROWS_AS(RunConfig::from_json(bad), Error);

    // stage name mapping
    CHECK(pipeline::stage_from_name("prune") == Stage::prune);
    CHECK(!pipeline::stage_from_name("nonsense").has_value());

    RunConfig ok = mini_config(corpus, (dir / "unused").string());
    CHECK(ok.config_hash().size() == 64);
}

TEST_CASE("artifact row serialization round trips") {
    corpus::Vocab vocab = corpus::Vocab::build({"a", "b", "c", "d"}, 16);
    gcg::Triple t;
    t.id = 3;
    t.original_prompt = {3, 4, 5};
    t.autoprompt = {4, 4};
    t.continuation = {5, 6};
    t.final_loss = 0.25f;
    t.iters_used = 7;
    t.success = true;
    t.memorization_bleu = 0.01;
    auto tj = pipeline::triple_to_json(t, vocab);
    auto t2 = pipeline::triple_from_json(json::parse(tj.dump()));
    CHECK(t2.id == t.id);
    CHECK(t2.autoprompt == t.autoprompt);
    CHECK(t2.final_loss == t.final_loss);
    CHECK(t2.memorization_bleu == t.memorization_bleu);

    ablate::PruneResult pr;
    pr.input = {3, 4, 5};
    pr.pruned = {4};
    pr.removed = {{0, 3}, {2, 5}};
    pr.steps = 2;
    auto pj = pipeline::prune_row_to_json("autoprompt", 3, pr);
    std::string source;
    std::size_t id;
    ablate::PruneResult pr2;
    pipeline::prune_row_from_json(json::parse(pj.dump()), source, id, pr2);
    CHECK(source == "autoprompt");
    CHECK(id == 3);
    CHECK(pr2.removed == pr.removed);

    ablate::ShuffleOutcome o;
    o.mode = ablate::ShuffleMode::keep_last;
    o.repetitions = 2;
    o.permutations = {{1, 0, 2}, {0, 1, 2}};
    o.bleu = {0.5, 1.0};
    o.mean = 0.75;
    o.sd = 0.3535533905932738;
    auto sj = pipeline::shuffle_row_to_json("natural", 9, {3, 4, 5}, o);
    TokenSeq prompt;
    ablate::ShuffleOutcome o2;
    pipeline::shuffle_row_from_json(json::parse(sj.dump()), source, id, prompt, o2);
    CHECK(o2.mode == ablate::ShuffleMode::keep_last);
    CHECK(o2.permutations == o.permutations);
    CHECK(o2.bleu == o.bleu);
}

TEST_CASE("mini pipeline: end to end, resumable, deterministic across workers") {
    fs::path root = test_root();
    fs::remove_all(root);
    std::string corpus = write_mini_corpus(root);

    RunConfig cfg_a = mini_config(corpus, (root / "run_a").string());
    auto manifest = pipeline::run_pipeline(cfg_a);

    pipeline::RunPaths paths = pipeline::RunPaths::resolve(cfg_a);
    for (const std::string& f : {paths.ckpt, paths.dataset, paths.triples, paths.prune,
                                 paths.replace, paths.shuffle, paths.manifest}) {
        CHECK(fs::exists(f));
    }
    CHECK(fs::exists(fs::path(paths.report_dir) / "summary.json"));

    // every stored triple satisfies the dataset filters, from the file alone
    auto rows = pipeline::read_jsonl(paths.triples);
    REQUIRE(!rows.empty());
    for (const auto& r : rows) {
        auto t = pipeline::triple_from_json(r);
        CHECK(t.success);
        CHECK(t.original_prompt.size() >= cfg_a.filters.min_prompt_len);
        CHECK(t.original_prompt.size() <= cfg_a.filters.max_prompt_len);
        CHECK(t.continuation.size() >= cfg_a.filters.min_cont_len);
        CHECK(t.continuation.size() <= cfg_a.filters.max_new);
        CHECK(t.memorization_bleu <= cfg_a.filters.memorization_bleu_max);
        CHECK(t.autoprompt.size() == cfg_a.gcg.prompt_len);
    }

    // success soundness: replay the decode for each triple
    lm::Model model = lm::load_checkpoint(paths.ckpt);
    backend::LocalBackend be(model);
    lm::StopPolicy stop = be.sentence_stop();
    for (const auto& r : rows) {
        auto t = pipeline::triple_from_json(r);
        auto dec = be.decode(t.autoprompt, cfg_a.filters.max_new, stop);
        CHECK(dec.tokens == t.continuation);
    }

    // manifest digests match the artifacts on disk
    for (const auto& [stage, entry] : manifest["stages"].items()) {
        if (!entry.contains("outputs")) continue;
        for (const auto& [file, digest] : entry["outputs"].items()) {
            CHECK(pipeline::sha256_file(file) == digest.get<std::string>());
        }
    }

    // re-running a single stage from existing outputs succeeds
    CHECK_NOTHROW(pipeline::run_pipeline(cfg_a, Stage::prune));

    // a fresh directory without inputs fails loudly on a late stage
    RunConfig cfg_fresh = mini_config(corpus, (root / "run_fresh").string());
    CHECK_THROWS_AS(pipeline::run_pipeline(cfg_fresh, Stage::prune), Error);

    // determinism: same config and seed, different worker count
    RunConfig cfg_b = mini_config(corpus, (root / "run_b").string());
    cfg_b.workers = 1;
    pipeline::run_pipeline(cfg_b);

    std::vector<std::string> names = {"model.ckpt", "model.ckpt.json", "dataset.jsonl",
                                      "triples.jsonl", "induce_summary.json", "prune.jsonl",
                                      "replace.jsonl", "shuffle.jsonl"};
    for (const auto& name : names) {
        CAPTURE(name);
        CHECK(slurp(root / "run_a" / name) == slurp(root / "run_b" / name));
    }
    for (const auto& f : fs::directory_iterator(root / "run_a" / "report")) {
        auto rel = f.path().filename();
        CAPTURE(rel.string());
        CHECK(slurp(f.path()) == slurp(root / "run_b" / "report" / rel));
    }
    CHECK(cfg_a.config_hash() == cfg_b.config_hash()); // location/worker independent

    // report re-emission via the standalone op into a different directory
    CHECK_NOTHROW(pipeline::op_report((root / "run_a").string(), (root / "report2").string()));
    CHECK(fs::exists(root / "report2" / "summary.json"));
}
