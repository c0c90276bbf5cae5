#include "aplab.h"

#include <cstring>
#include <string>

#include <json.hpp>

#include "aplab/backend.hpp"
#include "aplab/checkpoint.hpp"
#include "aplab/pipeline.hpp"

using nlohmann::json;

struct ap_model {
    ap::lm::Model model;
};

struct ap_backend {
    std::unique_ptr<ap::backend::LmBackend> impl;
};

struct ap_server {
    std::unique_ptr<ap::backend::ModelServer> impl;
};

namespace {

thread_local std::string g_last_error;

ap_status status_from(const ap::Error& e) {
    switch (e.kind()) {
        case ap::ErrorKind::invalid_argument: return AP_ERR_INVALID_ARGUMENT;
        case ap::ErrorKind::io: return AP_ERR_IO;
        case ap::ErrorKind::config: return AP_ERR_CONFIG;
        case ap::ErrorKind::unsupported: return AP_ERR_UNSUPPORTED;
        case ap::ErrorKind::network: return AP_ERR_NETWORK;
        case ap::ErrorKind::protocol: return AP_ERR_PROTOCOL;
        case ap::ErrorKind::numerical: return AP_ERR_NUMERICAL;
        case ap::ErrorKind::state: return AP_ERR_STATE;
    }
    return AP_ERR_RUNTIME;
}

template <typename Fn>
ap_status guarded(Fn&& fn) {
    try {
        fn();
        return AP_OK;
    } catch (const ap::Error& e) {
        g_last_error = e.what();
        return status_from(e);
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return AP_ERR_RUNTIME;
    } catch (...) {
        g_last_error = "unknown error";
        return AP_ERR_RUNTIME;
    }
}

ap_status invalid(const char* msg) {
    g_last_error = msg;
    return AP_ERR_INVALID_ARGUMENT;
}

json parse_json_arg(const char* text, const char* what) {
    if (!text || !*text) return json::object();
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        ap::fail(ap::ErrorKind::config, std::string("malformed ") + what + ": " + e.what());
    }
}

std::vector<std::string> parse_corpus_arg(const char* corpus_json) {
    if (!corpus_json || !*corpus_json) return {};
    json j = parse_json_arg(corpus_json, "corpus list");
    ap::require(j.is_array(), ap::ErrorKind::config, "corpus list must be a JSON array");
    std::vector<std::string> out;
    for (const auto& p : j) {
        ap::require(p.is_string(), ap::ErrorKind::config, "corpus entries must be strings");
        out.push_back(p.get<std::string>());
    }
    return out;
}

ap::TokenView view(const uint32_t* ids, size_t n) { return ap::TokenView(ids, n); }

} // namespace

extern "C" {

const char* ap_version(void) { return "0.1.0"; }

const char* ap_last_error(void) { return g_last_error.c_str(); }

void ap_string_free(char* s) { std::free(s); }

ap_status ap_train(const char* corpus_json, const char* options_json, uint64_t seed,
                   const char* out_ckpt_path) {
    if (!corpus_json || !out_ckpt_path) return invalid("ap_train: NULL argument");
    return guarded([&] {
        auto corpus = parse_corpus_arg(corpus_json);
        ap::require(!corpus.empty(), ap::ErrorKind::config, "ap_train: empty corpus list");
        ap::pipeline::op_train(corpus, parse_json_arg(options_json, "train options"), seed,
                               out_ckpt_path, 2);
    });
}

ap_status ap_model_open(const char* ckpt_path, ap_model** out) {
    if (!ckpt_path || !out) return invalid("ap_model_open: NULL argument");
    return guarded([&] {
        auto m = std::make_unique<ap_model>();
        m->model = ap::lm::load_checkpoint(ckpt_path);
        *out = m.release();
    });
}

void ap_model_free(ap_model* model) { delete model; }

ap_status ap_model_vocab_size(const ap_model* model, uint32_t* out) {
    if (!model || !out) return invalid("ap_model_vocab_size: NULL argument");
    *out = static_cast<uint32_t>(model->model.vocab.size());
    return AP_OK;
}

ap_status ap_model_context_len(const ap_model* model, uint32_t* out) {
    if (!model || !out) return invalid("ap_model_context_len: NULL argument");
    *out = model->model.params.cfg.context_len;
    return AP_OK;
}

ap_status ap_model_token_string(const ap_model* model, uint32_t token_id, const char** out) {
    if (!model || !out) return invalid("ap_model_token_string: NULL argument");
    return guarded([&] { *out = model->model.vocab.token(token_id).c_str(); });
}

ap_status ap_model_tokenize(const ap_model* model, const char* text, uint32_t* out_ids,
                            size_t capacity, size_t* out_len) {
    if (!model || !text || !out_len) return invalid("ap_model_tokenize: NULL argument");
    return guarded([&] {
        auto res = model->model.vocab.tokenize(text);
        *out_len = res.ids.size();
        ap::require(out_ids == nullptr || res.ids.size() <= capacity,
                    ap::ErrorKind::invalid_argument, "ap_model_tokenize: buffer too small");
        if (out_ids) std::memcpy(out_ids, res.ids.data(), res.ids.size() * sizeof(uint32_t));
    });
}

ap_status ap_model_detokenize(const ap_model* model, const uint32_t* ids, size_t n_ids, char* out,
                              size_t capacity, size_t* out_len) {
    if (!model || (!ids && n_ids) || !out_len) return invalid("ap_model_detokenize: NULL argument");
    return guarded([&] {
        std::string text = model->model.vocab.detokenize(view(ids, n_ids));
        *out_len = text.size();
        ap::require(out == nullptr || text.size() + 1 <= capacity, ap::ErrorKind::invalid_argument,
                    "ap_model_detokenize: buffer too small");
        if (out) std::memcpy(out, text.c_str(), text.size() + 1);
    });
}

ap_status ap_backend_local(const ap_model* model, ap_backend** out) {
    if (!model || !out) return invalid("ap_backend_local: NULL argument");
    return guarded([&] {
        auto b = std::make_unique<ap_backend>();
        b->impl = std::make_unique<ap::backend::LocalBackend>(model->model);
        *out = b.release();
    });
}

ap_status ap_backend_remote(const ap_model* vocab_source, const char* base_url, int timeout_ms,
                            int retries, const char* bearer_token, int grad_enabled,
                            ap_backend** out) {
    if (!vocab_source || !base_url || !out) return invalid("ap_backend_remote: NULL argument");
    return guarded([&] {
        ap::backend::RemoteConfig cfg;
        cfg.base_url = base_url;
        cfg.timeout_ms = timeout_ms > 0 ? timeout_ms : 10000;
        cfg.retries = retries >= 0 ? retries : 0;
        if (bearer_token) cfg.bearer_token = bearer_token;
        cfg.grad_enabled = grad_enabled != 0;
        auto b = std::make_unique<ap_backend>();
        b->impl = std::make_unique<ap::backend::RemoteBackend>(cfg, vocab_source->model.vocab);
        *out = b.release();
    });
}

void ap_backend_free(ap_backend* backend) { delete backend; }

ap_status ap_backend_supports_grad(const ap_backend* backend, int* out) {
    if (!backend || !out) return invalid("ap_backend_supports_grad: NULL argument");
    *out = backend->impl->capabilities().supports_grad ? 1 : 0;
    return AP_OK;
}

ap_status ap_backend_loss(const ap_backend* backend, const uint32_t* prompt, size_t n_prompt,
                          const uint32_t* target, size_t n_target, double* out_loss) {
    if (!backend || !prompt || !target || !out_loss) return invalid("ap_backend_loss: NULL argument");
    return guarded(
        [&] { *out_loss = backend->impl->loss(view(prompt, n_prompt), view(target, n_target)); });
}

ap_status ap_backend_decode(const ap_backend* backend, const uint32_t* prompt, size_t n_prompt,
                            uint32_t max_new, const uint32_t* stop_ids, size_t n_stop,
                            uint32_t* out_tokens, size_t capacity, size_t* out_len,
                            int* out_stopped, int* out_truncated) {
    if (!backend || !prompt || !out_len) return invalid("ap_backend_decode: NULL argument");
    return guarded([&] {
        ap::lm::StopPolicy stop;
        if (stop_ids) stop.stop_ids.assign(stop_ids, stop_ids + n_stop);
        else stop.stop_ids = backend->impl->vocab().sentence_end_ids();
        auto res = backend->impl->decode(view(prompt, n_prompt), max_new, stop);
        *out_len = res.tokens.size();
        ap::require(out_tokens == nullptr || res.tokens.size() <= capacity,
                    ap::ErrorKind::invalid_argument, "ap_backend_decode: buffer too small");
        if (out_tokens)
            std::memcpy(out_tokens, res.tokens.data(), res.tokens.size() * sizeof(uint32_t));
        if (out_stopped) *out_stopped = res.stopped ? 1 : 0;
        if (out_truncated) *out_truncated = res.truncated ? 1 : 0;
    });
}

ap_status ap_backend_grad(const ap_backend* backend, const uint32_t* prompt, size_t n_prompt,
                          const uint32_t* target, size_t n_target, float* out_grad,
                          double* out_loss) {
    if (!backend || !prompt || !target || !out_grad)
        return invalid("ap_backend_grad: NULL argument");
    return guarded([&] {
        auto g = backend->impl->grad(view(prompt, n_prompt), view(target, n_target));
        std::memcpy(out_grad, g.values.data(), g.values.size() * sizeof(float));
        if (out_loss) *out_loss = static_cast<double>(g.loss_at_point);
    });
}

ap_status ap_server_start(const ap_model* model, const char* host, int port, int max_concurrency,
                          const char* bearer_token, int serve_grad, ap_server** out) {
    if (!model || !out) return invalid("ap_server_start: NULL argument");
    return guarded([&] {
        ap::backend::ServerOptions opts;
        if (host && *host) opts.host = host;
        opts.port = port;
        if (max_concurrency > 0) opts.max_concurrency = max_concurrency;
        if (bearer_token) opts.bearer_token = bearer_token;
        opts.serve_grad = serve_grad != 0;
        auto s = std::make_unique<ap_server>();
        s->impl = std::make_unique<ap::backend::ModelServer>(model->model, opts);
        *out = s.release();
    });
}

ap_status ap_server_port(const ap_server* server, int* out) {
    if (!server || !out) return invalid("ap_server_port: NULL argument");
    *out = server->impl->port();
    return AP_OK;
}

void ap_server_stop(ap_server* server) { delete server; }

ap_status ap_pipeline_run(const char* config_path, const char* stage,
                          const char* out_dir_override, int workers_override,
                          char** out_manifest_json) {
    if (!config_path) return invalid("ap_pipeline_run: NULL config path");
    return guarded([&] {
        ap::pipeline::RunConfig cfg = ap::pipeline::RunConfig::load(config_path);
        if (out_dir_override && *out_dir_override) cfg.out_dir = out_dir_override;
        if (workers_override > 0) cfg.workers = static_cast<unsigned>(workers_override);
        std::optional<ap::pipeline::Stage> only;
        if (stage && *stage) {
            only = ap::pipeline::stage_from_name(stage);
            ap::require(only.has_value(), ap::ErrorKind::config,
                        std::string("unknown stage: ") + stage);
        }
        auto manifest = ap::pipeline::run_pipeline(cfg, only);
        if (out_manifest_json) {
            std::string text = manifest.dump(2);
            char* buf = static_cast<char*>(std::malloc(text.size() + 1));
            ap::require(buf != nullptr, ap::ErrorKind::state, "out of memory");
            std::memcpy(buf, text.c_str(), text.size() + 1);
            *out_manifest_json = buf;
        }
    });
}

ap_status ap_dataset(const char* ckpt_path, const char* corpus_json, const char* options_json,
                     uint64_t seed, const char* out_path) {
    if (!ckpt_path || !out_path) return invalid("ap_dataset: NULL argument");
    return guarded([&] {
        ap::pipeline::op_dataset(ckpt_path, parse_corpus_arg(corpus_json),
                                 parse_json_arg(options_json, "dataset options"), seed, out_path);
    });
}

ap_status ap_induce(const char* ckpt_path, const char* corpus_json, const char* dataset_path,
                    const char* options_json, uint64_t seed, const char* out_path) {
    if (!ckpt_path || !out_path) return invalid("ap_induce: NULL argument");
    return guarded([&] {
        ap::pipeline::op_induce(ckpt_path, parse_corpus_arg(corpus_json),
                                dataset_path ? dataset_path : "",
                                parse_json_arg(options_json, "induce options"), seed, out_path);
    });
}

ap_status ap_prune(const char* ckpt_path, const char* triples_path, const char* options_json,
                   uint64_t seed, const char* out_path) {
    if (!ckpt_path || !triples_path || !out_path) return invalid("ap_prune: NULL argument");
    return guarded([&] {
        ap::pipeline::op_prune(ckpt_path, triples_path,
                               parse_json_arg(options_json, "prune options"), seed, out_path);
    });
}

ap_status ap_replace(const char* ckpt_path, const char* triples_path, const char* prune_path,
                     const char* corpus_json, const char* options_json, uint64_t seed,
                     const char* out_path) {
    if (!ckpt_path || !triples_path || !prune_path || !out_path)
        return invalid("ap_replace: NULL argument");
    return guarded([&] {
        ap::pipeline::op_replace(ckpt_path, triples_path, prune_path,
                                 parse_corpus_arg(corpus_json),
                                 parse_json_arg(options_json, "replace options"), seed, out_path);
    });
}

ap_status ap_shuffle(const char* ckpt_path, const char* triples_path, const char* prune_path,
                     const char* options_json, uint64_t seed, const char* out_path) {
    if (!ckpt_path || !triples_path || !prune_path || !out_path)
        return invalid("ap_shuffle: NULL argument");
    return guarded([&] {
        ap::pipeline::op_shuffle(ckpt_path, triples_path, prune_path,
                                 parse_json_arg(options_json, "shuffle options"), seed, out_path);
    });
}

ap_status ap_report(const char* run_dir, const char* report_dir) {
    if (!run_dir) return invalid("ap_report: NULL run_dir");
    return guarded(
        [&] { ap::pipeline::op_report(run_dir, report_dir ? report_dir : ""); });
}

} // extern "C"
