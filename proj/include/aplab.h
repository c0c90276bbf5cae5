/* aplab C API: autoprompt induction and anatomy toolkit.
 *
 * All functions return ap_status; AP_OK means success. On failure,
 * ap_last_error() returns a thread-local message describing what went wrong.
 * Handles are opaque and must be released with the matching *_free/_stop call.
 */
#ifndef APLAB_H
#define APLAB_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ap_status {
    AP_OK = 0,
    AP_ERR_INVALID_ARGUMENT = 1,
    AP_ERR_IO = 2,
    AP_ERR_CONFIG = 3,
    AP_ERR_UNSUPPORTED = 4,
    AP_ERR_NETWORK = 5,
    AP_ERR_PROTOCOL = 6,
    AP_ERR_NUMERICAL = 7,
    AP_ERR_STATE = 8,
    AP_ERR_RUNTIME = 9
} ap_status;

typedef struct ap_model ap_model;
typedef struct ap_backend ap_backend;
typedef struct ap_server ap_server;

const char* ap_version(void);
/* Thread-local message describing the most recent failure in this thread. */
const char* ap_last_error(void);
void ap_string_free(char* s);

/* ---- training and model lifecycle ----
 * corpus_json: JSON array of UTF-8 text file paths, e.g. ["corpus.txt"].
 * options_json (nullable): {"model": {...}, "train": {...}}; see
 * docs/config-schema.json for keys. */
ap_status ap_train(const char* corpus_json, const char* options_json, uint64_t seed,
                   const char* out_ckpt_path);

ap_status ap_model_open(const char* ckpt_path, ap_model** out);
void ap_model_free(ap_model* model);
ap_status ap_model_vocab_size(const ap_model* model, uint32_t* out);
ap_status ap_model_context_len(const ap_model* model, uint32_t* out);
/* Returned pointer stays valid while the model handle lives. */
ap_status ap_model_token_string(const ap_model* model, uint32_t token_id, const char** out);
ap_status ap_model_tokenize(const ap_model* model, const char* text, uint32_t* out_ids,
                            size_t capacity, size_t* out_len);
/* Writes a NUL-terminated string; out_len excludes the terminator. */
ap_status ap_model_detokenize(const ap_model* model, const uint32_t* ids, size_t n_ids, char* out,
                              size_t capacity, size_t* out_len);

/* ---- backends ---- */
ap_status ap_backend_local(const ap_model* model, ap_backend** out);
/* The model handle supplies the vocabulary; it must outlive the backend. */
ap_status ap_backend_remote(const ap_model* vocab_source, const char* base_url, int timeout_ms,
                            int retries, const char* bearer_token, int grad_enabled,
                            ap_backend** out);
void ap_backend_free(ap_backend* backend);
ap_status ap_backend_supports_grad(const ap_backend* backend, int* out);
ap_status ap_backend_loss(const ap_backend* backend, const uint32_t* prompt, size_t n_prompt,
                          const uint32_t* target, size_t n_target, double* out_loss);
/* stop_ids NULL: sentence-final punctuation tokens of the vocabulary. */
ap_status ap_backend_decode(const ap_backend* backend, const uint32_t* prompt, size_t n_prompt,
                            uint32_t max_new, const uint32_t* stop_ids, size_t n_stop,
                            uint32_t* out_tokens, size_t capacity, size_t* out_len,
                            int* out_stopped, int* out_truncated);
/* out_grad must hold n_prompt * vocab_size floats (row-major). */
ap_status ap_backend_grad(const ap_backend* backend, const uint32_t* prompt, size_t n_prompt,
                          const uint32_t* target, size_t n_target, float* out_grad,
                          double* out_loss);

/* ---- serving (POST /v1/loss, /v1/decode, /v1/grad; see docs/protocol.md) ---- */
ap_status ap_server_start(const ap_model* model, const char* host, int port, int max_concurrency,
                          const char* bearer_token, int serve_grad, ap_server** out);
ap_status ap_server_port(const ap_server* server, int* out);
void ap_server_stop(ap_server* server);

/* ---- pipeline ----
 * stage: "train", "dataset", "induce", "prune", "replace", "shuffle",
 * "report", or NULL for the full sequence. out_manifest_json, when non-NULL,
 * receives the run manifest (free with ap_string_free). */
ap_status ap_pipeline_run(const char* config_path, const char* stage,
                          const char* out_dir_override, int workers_override,
                          char** out_manifest_json);

/* ---- standalone stage operations (single-output convenience forms) ----
 * corpus_json may be NULL where the checkpoint sidecar records the corpus.
 * options_json keys are op-specific; see docs/config-schema.json. */
ap_status ap_dataset(const char* ckpt_path, const char* corpus_json, const char* options_json,
                     uint64_t seed, const char* out_path);
ap_status ap_induce(const char* ckpt_path, const char* corpus_json, const char* dataset_path,
                    const char* options_json, uint64_t seed, const char* out_path);
ap_status ap_prune(const char* ckpt_path, const char* triples_path, const char* options_json,
                   uint64_t seed, const char* out_path);
ap_status ap_replace(const char* ckpt_path, const char* triples_path, const char* prune_path,
                     const char* corpus_json, const char* options_json, uint64_t seed,
                     const char* out_path);
ap_status ap_shuffle(const char* ckpt_path, const char* triples_path, const char* prune_path,
                     const char* options_json, uint64_t seed, const char* out_path);
ap_status ap_report(const char* run_dir, const char* report_dir);

#ifdef __cplusplus
}
#endif

#endif /* APLAB_H */
