// aplab command line: train a tiny LM, induce autoprompts against it, and run
// the pruning / replacement / shuffling anatomy over the results.
//
// Subcommands: train, dataset, induce, prune, replace, shuffle, report,
// pipeline, serve. `pipeline --config run.json` drives everything from one
// config; the other subcommands are single-output conveniences over the same
// machinery. Environment: APLAB_OUT_DIR overrides the pipeline output
// directory, APLAB_WORKERS the worker count.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aplab.h"

namespace {

using nlohmann::json;

int exit_code_for(ap_status status) {
    if (status == AP_OK) return 0;
    if (status == AP_ERR_CONFIG) return 2;
    return 3;
}

int finish(ap_status status, const char* what) {
    if (status != AP_OK) {
        std::fprintf(stderr, "aplab: %s failed: %s\n", what, ap_last_error());
    }
    return exit_code_for(status);
}

std::string corpus_json(const std::vector<std::string>& paths) {
    if (paths.empty()) return std::string();
    return json(paths).dump();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) {
        std::fprintf(stderr, "aplab: cannot open %s\n", path.c_str());
        std::exit(2);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

unsigned env_workers(unsigned fallback) {
    if (const char* w = std::getenv("APLAB_WORKERS")) {
        long v = std::strtol(w, nullptr, 10);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    return fallback;
}

std::atomic<bool> g_stop{false};
void handle_signal(int) { g_stop = true; }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"autoprompt induction and anatomy toolkit"};
    app.require_subcommand(1);

    // shared option storage
    std::vector<std::string> corpus;
    std::string ckpt, out, config_path, dataset_path, prune_path, run_dir, stage;
    std::uint64_t seed = 0;
    unsigned workers = env_workers(2);
    std::size_t count = 200;

    // train
    auto* s_train = app.add_subcommand("train", "train the built-in tiny LM on a text corpus");
    s_train->add_option("--corpus", corpus, "corpus text file(s)")->required()->expected(-1);
    s_train->add_option("--config", config_path, "JSON file with model/train settings");
    s_train->add_option("--seed", seed, "random seed");
    s_train->add_option("--out", out, "output checkpoint path")->required();

    // dataset
    auto* s_dataset =
        app.add_subcommand("dataset", "sample original prompts and filter continuations");
    s_dataset->add_option("--ckpt", ckpt, "model checkpoint")->required();
    s_dataset->add_option("--corpus", corpus, "corpus text file(s); default from sidecar")
        ->expected(-1);
    s_dataset->add_option("--count", count, "number of prompts to sample");
    s_dataset->add_option("--seed", seed, "random seed");
    s_dataset->add_option("--workers", workers, "worker threads");
    s_dataset->add_option("--out", out, "output dataset JSONL")->required();
    std::uint32_t min_len = 35, max_len = 80, min_cont = 4, max_new = 25;
    double mem_bleu = 0.1;
    for (auto* sc : {s_dataset}) {
        sc->add_option("--min-len", min_len, "minimum prompt length");
        sc->add_option("--max-len", max_len, "maximum prompt length");
        sc->add_option("--min-cont-len", min_cont, "minimum continuation length");
        sc->add_option("--mem-bleu-max", mem_bleu, "memorization BLEU cutoff");
        sc->add_option("--max-new", max_new, "continuation length cap");
    }

    // induce
    auto* s_induce = app.add_subcommand("induce", "induce autoprompts for sampled continuations");
    s_induce->add_option("--ckpt", ckpt, "model checkpoint")->required();
    s_induce->add_option("--corpus", corpus, "corpus text file(s); default from sidecar")
        ->expected(-1);
    s_induce->add_option("--dataset", dataset_path, "reuse an existing dataset JSONL");
    std::uint32_t n = 10, topk = 256, cands = 256, iters = 50, pool = 10000, reps = 10;
    bool exhaustive = false;
    s_induce->add_option("--n", n, "autoprompt length");
    s_induce->add_option("--topk", topk, "gradient top-k per position");
    s_induce->add_option("--cands", cands, "candidates per iteration");
    s_induce->add_option("--iters", iters, "maximum iterations");
    s_induce->add_flag("--exhaustive", exhaustive, "evaluate the whole top-k grid each step");
    s_induce->add_option("--pool", pool, "top-frequent pool size for initialization");
    s_induce->add_option("--count", count, "number of prompts to sample");
    s_induce->add_option("--seed", seed, "random seed");
    s_induce->add_option("--workers", workers, "worker threads");
    s_induce->add_option("--out", out, "output triples JSONL")->required();
    s_induce->add_option("--min-len", min_len, "minimum prompt length");
    s_induce->add_option("--max-len", max_len, "maximum prompt length");
    s_induce->add_option("--min-cont-len", min_cont, "minimum continuation length");
    s_induce->add_option("--mem-bleu-max", mem_bleu, "memorization BLEU cutoff");
    s_induce->add_option("--max-new", max_new, "continuation length cap");

    // prune
    auto* s_prune = app.add_subcommand("prune", "greedily prune prompts");
    s_prune->add_option("--dataset", dataset_path, "triples JSONL")->required();
    s_prune->add_option("--ckpt", ckpt, "model checkpoint")->required();
    s_prune->add_option("--seed", seed, "random seed");
    s_prune->add_option("--workers", workers, "worker threads");
    s_prune->add_option("--max-new", max_new, "continuation length cap");
    bool skip_natural = false;
    s_prune->add_flag("--skip-natural", skip_natural, "ablate autoprompts only");
    s_prune->add_option("--out", out, "output prune JSONL")->required();

    // replace
    auto* s_replace = app.add_subcommand("replace", "positional replacement sweeps");
    s_replace->add_option("--dataset", dataset_path, "triples JSONL")->required();
    s_replace->add_option("--prune", prune_path, "prune JSONL")->required();
    s_replace->add_option("--ckpt", ckpt, "model checkpoint")->required();
    s_replace->add_option("--corpus", corpus, "corpus text file(s); default from sidecar")
        ->expected(-1);
    s_replace->add_option("--pool", pool, "replacement pool size (top frequent)");
    double moderate = 0.2;
    s_replace->add_option("--moderate", moderate, "moderate-effect BLEU threshold");
    s_replace->add_option("--seed", seed, "random seed");
    s_replace->add_option("--workers", workers, "worker threads");
    s_replace->add_option("--max-new", max_new, "continuation length cap");
    s_replace->add_option("--out", out, "output replace JSONL")->required();

    // shuffle
    auto* s_shuffle = app.add_subcommand("shuffle", "order shuffling ablations");
    s_shuffle->add_option("--dataset", dataset_path, "triples JSONL")->required();
    s_shuffle->add_option("--prune", prune_path, "prune JSONL")->required();
    s_shuffle->add_option("--ckpt", ckpt, "model checkpoint")->required();
    s_shuffle->add_option("--reps", reps, "repetitions per prompt");
    s_shuffle->add_option("--seed", seed, "random seed");
    s_shuffle->add_option("--workers", workers, "worker threads");
    s_shuffle->add_option("--max-new", max_new, "continuation length cap");
    s_shuffle->add_option("--out", out, "output shuffle JSONL")->required();

    // report
    auto* s_report = app.add_subcommand("report", "emit tables and summaries for a run");
    s_report->add_option("--run", run_dir, "run directory (with config.json)")->required();
    s_report->add_option("--out", out, "report directory override");

    // pipeline
    auto* s_pipeline = app.add_subcommand("pipeline", "run the full seeded pipeline from a config");
    s_pipeline->add_option("--config", config_path, "run configuration JSON")->required();
    s_pipeline->add_option("--stage", stage, "run a single stage");
    std::string out_dir_flag;
    s_pipeline->add_option("--out-dir", out_dir_flag, "output directory override");
    s_pipeline->add_option("--workers", workers, "worker threads override");
    bool quiet = false;
    s_pipeline->add_flag("--quiet", quiet, "suppress the manifest on stdout");

    // serve
    auto* s_serve = app.add_subcommand("serve", "serve a checkpoint over HTTP");
    s_serve->add_option("--ckpt", ckpt, "model checkpoint")->required();
    std::string host = "127.0.0.1", token;
    int port = 8311, max_conc = 4;
    bool no_grad = false;
    s_serve->add_option("--host", host, "bind address");
    s_serve->add_option("--port", port, "port (0 = auto)");
    s_serve->add_option("--max-concurrency", max_conc, "request worker threads");
    s_serve->add_option("--token", token, "require this bearer token");
    s_serve->add_flag("--no-grad", no_grad, "disable the gradient endpoint");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    auto filters_json = [&] {
        return json{{"min_prompt_len", min_len},
                    {"max_prompt_len", max_len},
                    {"min_cont_len", min_cont},
                    {"memorization_bleu_max", mem_bleu},
                    {"max_new", max_new}};
    };

    if (s_train->parsed()) {
        std::string options = config_path.empty() ? std::string() : read_file(config_path);
        return finish(ap_train(corpus_json(corpus).c_str(),
                               options.empty() ? nullptr : options.c_str(), seed, out.c_str()),
                      "train");
    }
    if (s_dataset->parsed()) {
        json options{{"sample_count", count}, {"workers", workers}, {"filters", filters_json()}};
        std::string cj = corpus_json(corpus);
        return finish(ap_dataset(ckpt.c_str(), cj.empty() ? nullptr : cj.c_str(),
                                 options.dump().c_str(), seed, out.c_str()),
                      "dataset");
    }
    if (s_induce->parsed()) {
        json options{{"sample_count", count},
                     {"workers", workers},
                     {"pool_size", pool},
                     {"filters", filters_json()},
                     {"gcg",
                      {{"prompt_len", n},
                       {"topk", topk},
                       {"candidates", cands},
                       {"max_iters", iters},
                       {"exhaustive", exhaustive}}}};
        std::string cj = corpus_json(corpus);
        return finish(ap_induce(ckpt.c_str(), cj.empty() ? nullptr : cj.c_str(),
                                dataset_path.empty() ? nullptr : dataset_path.c_str(),
                                options.dump().c_str(), seed, out.c_str()),
                      "induce");
    }
    if (s_prune->parsed()) {
        json options{
            {"workers", workers}, {"max_new", max_new}, {"include_natural", !skip_natural}};
        return finish(ap_prune(ckpt.c_str(), dataset_path.c_str(), options.dump().c_str(), seed,
                               out.c_str()),
                      "prune");
    }
    if (s_replace->parsed()) {
        json options{{"workers", workers},
                     {"max_new", max_new},
                     {"pool_size", pool},
                     {"moderate_bleu", moderate}};
        std::string cj = corpus_json(corpus);
        return finish(ap_replace(ckpt.c_str(), dataset_path.c_str(), prune_path.c_str(),
                                 cj.empty() ? nullptr : cj.c_str(), options.dump().c_str(), seed,
                                 out.c_str()),
                      "replace");
    }
    if (s_shuffle->parsed()) {
        json options{{"workers", workers}, {"max_new", max_new}, {"reps", reps}};
        return finish(ap_shuffle(ckpt.c_str(), dataset_path.c_str(), prune_path.c_str(),
                                 options.dump().c_str(), seed, out.c_str()),
                      "shuffle");
    }
    if (s_report->parsed()) {
        return finish(ap_report(run_dir.c_str(), out.empty() ? nullptr : out.c_str()), "report");
    }
    if (s_pipeline->parsed()) {
        const char* env_out = std::getenv("APLAB_OUT_DIR");
        std::string out_dir = !out_dir_flag.empty() ? out_dir_flag
                              : env_out ? std::string(env_out)
                                        : std::string();
        char* manifest = nullptr;
        ap_status st = ap_pipeline_run(config_path.c_str(), stage.empty() ? nullptr : stage.c_str(),
                                       out_dir.empty() ? nullptr : out_dir.c_str(),
                                       static_cast<int>(workers), quiet ? nullptr : &manifest);
        if (manifest) {
            std::printf("%s\n", manifest);
            ap_string_free(manifest);
        }
        return finish(st, "pipeline");
    }
    if (s_serve->parsed()) {
        ap_model* model = nullptr;
        ap_status st = ap_model_open(ckpt.c_str(), &model);
        if (st != AP_OK) return finish(st, "serve");
        ap_server* server = nullptr;
        st = ap_server_start(model, host.c_str(), port, max_conc,
                             token.empty() ? nullptr : token.c_str(), no_grad ? 0 : 1, &server);
        if (st != AP_OK) {
            ap_model_free(model);
            return finish(st, "serve");
        }
        int bound = 0;
        ap_server_port(server, &bound);
        std::printf("serving %s on http://%s:%d (grad %s)\n", ckpt.c_str(), host.c_str(), bound,
                    no_grad ? "disabled" : "enabled");
        std::fflush(stdout);
        std::signal(SIGINT, handle_signal);
        std::signal(SIGTERM, handle_signal);
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        ap_server_stop(server);
        ap_model_free(model);
        return 0;
    }
    return 2;
}
