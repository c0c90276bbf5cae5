#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "aplab/ablation.hpp"
#include "aplab/checkpoint.hpp"
#include "aplab/common.hpp"
#include "aplab/gcg.hpp"
#include "aplab/metrics.hpp"
#include "aplab/model.hpp"

namespace ap::pipeline {

struct GcgOptions {
    std::uint32_t prompt_len = 10;
    std::uint32_t topk = 256;
    std::uint32_t candidates = 256;
    std::uint32_t max_iters = 50;
    bool exhaustive = false;
};

struct AblationOptions {
    std::uint32_t pool_size = 10000; // replacement/init pool size, capped at vocab
    std::uint32_t shuffle_reps = 10;
    double moderate_bleu = 0.2;
    bool include_natural = true; // run the ablations on original prompts too
};

// Optional per-artifact path overrides; empty = <out_dir>/<standard name>.
struct PathOverrides {
    std::string ckpt;
    std::string dataset;
    std::string triples;
    std::string prune;
    std::string replace;
    std::string shuffle;
    std::string report_dir;
};

// See docs/config-schema.json for the on-disk format. Defaults follow the
// reference methodology constants (n=10, 256/256/50, max_new=25, lengths
// 35..80, min continuation 4, memorization BLEU 0.1, moderate BLEU 0.2,
// 10 shuffle repetitions, pool 10k capped at vocabulary size).
struct RunConfig {
    std::vector<std::string> corpus_paths;
    std::string out_dir = "run";
    std::uint64_t seed = 0;
    unsigned workers = 2;
    std::size_t sample_count = 200;
    lm::ModelConfig model; // vocab_size caps the built vocabulary
    lm::TrainConfig train;
    GcgOptions gcg;
    gcg::DatasetFilters filters;
    AblationOptions ablation;
    metrics::BleuConfig bleu;
    PathOverrides paths;

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path);
    nlohmann::ordered_json to_json() const;
    std::string config_hash() const; // sha256 of the canonical JSON
    void validate() const;
};

struct RunPaths {
    std::string ckpt, dataset, triples, induce_summary, prune, replace, shuffle, report_dir,
        manifest, config_copy;

    static RunPaths resolve(const RunConfig& cfg);
};

enum class Stage { train, dataset, induce, prune, replace, shuffle, report };

constexpr std::size_t kStageCount = 7;
const char* stage_name(Stage s);
std::optional<Stage> stage_from_name(std::string_view name);

// Executes one stage against existing predecessor outputs, or the whole
// sequence when `only` is empty. Returns the manifest after the run.
nlohmann::ordered_json run_pipeline(const RunConfig& cfg, std::optional<Stage> only = std::nullopt);

// ---- standalone single-output operations backing the CLI flag forms ----
// `corpus` may be empty where noted: the paths recorded in the checkpoint
// sidecar are used instead. `options` carries op-specific knobs (see
// docs/config-schema.json); unknown keys are rejected.

void op_train(const std::vector<std::string>& corpus, const nlohmann::json& model_train_options,
              std::uint64_t seed, const std::string& out_ckpt, unsigned workers);
void op_dataset(const std::string& ckpt, std::vector<std::string> corpus,
                const nlohmann::json& options, std::uint64_t seed, const std::string& out_path);
void op_induce(const std::string& ckpt, std::vector<std::string> corpus,
               const std::string& dataset_path, const nlohmann::json& options, std::uint64_t seed,
               const std::string& out_path);
void op_prune(const std::string& ckpt, const std::string& triples_path,
              const nlohmann::json& options, std::uint64_t seed, const std::string& out_path);
void op_replace(const std::string& ckpt, const std::string& triples_path,
                const std::string& prune_path, std::vector<std::string> corpus,
                const nlohmann::json& options, std::uint64_t seed, const std::string& out_path);
void op_shuffle(const std::string& ckpt, const std::string& triples_path,
                const std::string& prune_path, const nlohmann::json& options, std::uint64_t seed,
                const std::string& out_path);
void op_report(const std::string& run_dir, const std::string& report_dir_override);

// Corpus paths recorded in a checkpoint sidecar (meta.corpus).
std::vector<std::string> sidecar_corpus_paths(const std::string& ckpt_path);

// ---- artifact row (de)serialization, shared with the test suites ----

nlohmann::ordered_json dataset_row_to_json(const gcg::DatasetRow& row, const corpus::Vocab& vocab);
gcg::DatasetRow dataset_row_from_json(const nlohmann::json& j);

nlohmann::ordered_json triple_to_json(const gcg::Triple& t, const corpus::Vocab& vocab);
gcg::Triple triple_from_json(const nlohmann::json& j);

nlohmann::ordered_json prune_row_to_json(const std::string& source, std::size_t id,
                                         const ablate::PruneResult& r);
void prune_row_from_json(const nlohmann::json& j, std::string& source, std::size_t& id,
                         ablate::PruneResult& r);

nlohmann::ordered_json sweep_row_to_json(const std::string& source, std::size_t id,
                                         const TokenSeq& base, const ablate::SweepResult& r);
void sweep_row_from_json(const nlohmann::json& j, std::string& source, std::size_t& id,
                         TokenSeq& base, ablate::SweepResult& r);

nlohmann::ordered_json shuffle_row_to_json(const std::string& source, std::size_t id,
                                           const TokenSeq& prompt,
                                           const ablate::ShuffleOutcome& o);
void shuffle_row_from_json(const nlohmann::json& j, std::string& source, std::size_t& id,
                           TokenSeq& prompt, ablate::ShuffleOutcome& o);

std::vector<nlohmann::json> read_jsonl(const std::string& path);
void write_jsonl(const std::string& path, const std::vector<nlohmann::ordered_json>& rows);

std::string sha256_file(const std::string& path);

} // namespace ap::pipeline
