#include "aplab/backend.hpp"

#include <atomic>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace ap::backend {

using nlohmann::json;

namespace {

json tokens_json(TokenView t) {
    json arr = json::array();
    for (TokenId id : t) arr.push_back(id);
    return arr;
}

TokenSeq parse_tokens(const json& j, const char* field, std::size_t vocab_size) {
    require(j.contains(field) && j[field].is_array(), ErrorKind::protocol,
            std::string("payload missing token array: ") + field);
    TokenSeq out;
    out.reserve(j[field].size());
    for (const auto& v : j[field]) {
        require(v.is_number_unsigned(), ErrorKind::protocol, "token ids must be unsigned integers");
        std::uint64_t id = v.get<std::uint64_t>();
        require(id < vocab_size, ErrorKind::protocol,
                "token id " + std::to_string(id) + " outside vocabulary");
        out.push_back(static_cast<TokenId>(id));
    }
    return out;
}

class ConcatPrefixDecoder : public PrefixDecoder {
public:
    ConcatPrefixDecoder(const LmBackend& backend, TokenView prefix)
        : backend_(&backend), prefix_(prefix.begin(), prefix.end()) {}

    lm::DecodeResult continue_with(TokenView suffix, std::uint32_t max_new,
                                   const lm::StopPolicy& stop) const override {
        TokenSeq full = prefix_;
        full.insert(full.end(), suffix.begin(), suffix.end());
        return backend_->decode(full, max_new, stop);
    }

private:
    const LmBackend* backend_;
    TokenSeq prefix_;
};

class SessionPrefixDecoder : public PrefixDecoder {
public:
    SessionPrefixDecoder(const lm::ParamsF& params, TokenView prefix) : session_(params) {
        for (TokenId t : prefix) session_.append(t);
        has_prefix_ = !prefix.empty();
    }

    lm::DecodeResult continue_with(TokenView suffix, std::uint32_t max_new,
                                   const lm::StopPolicy& stop) const override {
        require(has_prefix_ || !suffix.empty(), ErrorKind::invalid_argument, "empty prompt");
        lm::InferenceSession<float> fork = session_;
        for (TokenId t : suffix) fork.append(t);
        return lm::greedy_continue(fork, max_new, stop);
    }

private:
    lm::InferenceSession<float> session_;
    bool has_prefix_ = false;
};

} // namespace

std::unique_ptr<PrefixDecoder> LmBackend::prefix_decoder(TokenView prefix) const {
    return std::make_unique<ConcatPrefixDecoder>(*this, prefix);
}

double LocalBackend::loss(TokenView prompt, TokenView target) const {
    return static_cast<double>(lm::loss_nll(model_->params, prompt, target));
}

lm::DecodeResult LocalBackend::decode(TokenView prompt, std::uint32_t max_new,
                                      const lm::StopPolicy& stop) const {
    return lm::greedy_decode(model_->params, prompt, max_new, stop);
}

lm::GradMatrixF LocalBackend::grad(TokenView prompt, TokenView target) const {
    return lm::onehot_grad(model_->params, prompt, target);
}

std::unique_ptr<PrefixDecoder> LocalBackend::prefix_decoder(TokenView prefix) const {
    return std::make_unique<SessionPrefixDecoder>(model_->params, prefix);
}

void RemoteConfig::validate() const {
    require(!base_url.empty(), ErrorKind::config, "remote backend base_url is empty");
    require(timeout_ms > 0, ErrorKind::config, "remote backend timeout must be positive");
    require(retries >= 0, ErrorKind::config, "remote backend retries must be >= 0");
}

RemoteBackend::RemoteBackend(RemoteConfig cfg, corpus::Vocab vocab)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.validate();
}

std::string RemoteBackend::post(const std::string& path, const std::string& body) const {
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
        httplib::Client client(cfg_.base_url);
        client.set_connection_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
        client.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
        httplib::Headers headers;
        if (!cfg_.bearer_token.empty())
            headers.emplace("Authorization", "Bearer " + cfg_.bearer_token);
        auto res = client.Post(path, headers, body, "application/json");
        if (!res) {
            if (attempt == cfg_.retries)
                fail(ErrorKind::network, "remote backend unreachable: " + cfg_.base_url + path +
                                             " (" + httplib::to_string(res.error()) + ")");
            continue;
        }
        if (res->status == 200) return res->body;
        std::string detail;
        try {
            auto j = json::parse(res->body);
            if (j.contains("error")) detail = j["error"].get<std::string>();
        } catch (...) {
        }
        if (res->status == 501)
            fail(ErrorKind::unsupported, "remote backend does not support " + path +
                                             (detail.empty() ? "" : ": " + detail));
        if (res->status == 400)
            fail(ErrorKind::invalid_argument, "remote backend rejected request: " + detail);
        if (res->status == 401) fail(ErrorKind::network, "remote backend authorization failed");
        fail(ErrorKind::protocol,
             "unexpected status " + std::to_string(res->status) + " from " + path);
    }
    fail(ErrorKind::network, "unreachable");
}

double RemoteBackend::loss(TokenView prompt, TokenView target) const {
    json req = {{"prompt", tokens_json(prompt)}, {"target", tokens_json(target)}};
    json res;
    try {
        res = json::parse(post("/v1/loss", req.dump()));
    } catch (const json::exception& e) {
        fail(ErrorKind::protocol, std::string("malformed loss response: ") + e.what());
    }
    require(res.contains("loss") && res["loss"].is_number(), ErrorKind::protocol,
            "loss response missing numeric 'loss'");
    return res["loss"].get<double>();
}

lm::DecodeResult RemoteBackend::decode(TokenView prompt, std::uint32_t max_new,
                                       const lm::StopPolicy& stop) const {
    json req = {{"prompt", tokens_json(prompt)},
                {"max_new", max_new},
                {"stop_ids", tokens_json(stop.stop_ids)}};
    json res;
    try {
        res = json::parse(post("/v1/decode", req.dump()));
    } catch (const json::exception& e) {
        fail(ErrorKind::protocol, std::string("malformed decode response: ") + e.what());
    }
    lm::DecodeResult out;
    out.tokens = parse_tokens(res, "tokens", vocab_.size());
    require(res.contains("stopped") && res["stopped"].is_boolean() && res.contains("truncated") &&
                res["truncated"].is_boolean(),
            ErrorKind::protocol, "decode response missing flags");
    out.stopped = res["stopped"].get<bool>();
    out.truncated = res["truncated"].get<bool>();
    require(out.tokens.size() <= max_new, ErrorKind::protocol,
            "decode response longer than max_new");
    return out;
}

lm::GradMatrixF RemoteBackend::grad(TokenView prompt, TokenView target) const {
    require(cfg_.grad_enabled, ErrorKind::unsupported,
            "remote backend configured without gradient support");
    json req = {{"prompt", tokens_json(prompt)}, {"target", tokens_json(target)}};
    json res;
    try {
        res = json::parse(post("/v1/grad", req.dump()));
    } catch (const json::exception& e) {
        fail(ErrorKind::protocol, std::string("malformed grad response: ") + e.what());
    }
    require(res.contains("rows") && res.contains("cols") && res.contains("grad") &&
                res.contains("loss") && res["grad"].is_array(),
            ErrorKind::protocol, "grad response missing fields");
    lm::GradMatrixF g;
    g.rows = res["rows"].get<std::size_t>();
    g.cols = res["cols"].get<std::size_t>();
    g.loss_at_point = res["loss"].get<float>();
    require(g.rows == prompt.size() && g.cols == vocab_.size(), ErrorKind::protocol,
            "grad response shape mismatch");
    require(res["grad"].size() == g.rows * g.cols, ErrorKind::protocol,
            "grad response shape mismatch");
    g.values.reserve(g.rows * g.cols);
    for (const auto& v : res["grad"]) {
        require(v.is_number(), ErrorKind::protocol, "grad entries must be numeric");
        g.values.push_back(v.get<float>());
    }
    return g;
}

struct ModelServer::Impl {
    explicit Impl(const lm::Model& model, const ServerOptions& opts)
        : backend(model), options(opts) {}

    LocalBackend backend;
    ServerOptions options;
    httplib::Server server;
    std::thread thread;
    int port = 0;

    bool authorized(const httplib::Request& req) const {
        if (options.bearer_token.empty()) return true;
        return req.get_header_value("Authorization") == "Bearer " + options.bearer_token;
    }
};

namespace {

void reply_error(httplib::Response& res, int status, const std::string& msg) {
    res.status = status;
    res.set_content(json{{"error", msg}}.dump(), "application/json");
}

int status_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::invalid_argument: return 400;
        case ErrorKind::unsupported: return 501;
        default: return 500;
    }
}

} // namespace

ModelServer::ModelServer(const lm::Model& model, const ServerOptions& opts)
    : impl_(std::make_unique<Impl>(model, opts)) {
    auto* impl = impl_.get();
    auto& srv = impl->server;
    const int pool = std::max(1, opts.max_concurrency);
    srv.new_task_queue = [pool] { return new httplib::ThreadPool(static_cast<std::size_t>(pool)); };

    auto guarded = [impl](auto handler) {
        return [impl, handler](const httplib::Request& req, httplib::Response& res) {
            if (!impl->authorized(req)) {
                reply_error(res, 401, "missing or invalid bearer token");
                return;
            }
            try {
                json body = req.body.empty() ? json::object() : json::parse(req.body);
                handler(body, res);
            } catch (const json::exception& e) {
                reply_error(res, 400, std::string("malformed JSON: ") + e.what());
            } catch (const Error& e) {
                reply_error(res, status_for(e), e.what());
            } catch (const std::exception& e) {
                reply_error(res, 500, e.what());
            }
        };
    };

    srv.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(json{{"ok", true}}.dump(), "application/json");
    });

    srv.Post("/v1/loss", guarded([impl](const json& body, httplib::Response& res) {
                 const auto& vocab = impl->backend.vocab();
                 TokenSeq prompt = parse_tokens(body, "prompt", vocab.size());
                 TokenSeq target = parse_tokens(body, "target", vocab.size());
                 double loss = impl->backend.loss(prompt, target);
                 res.set_content(json{{"loss", loss}}.dump(), "application/json");
             }));

    srv.Post("/v1/decode", guarded([impl](const json& body, httplib::Response& res) {
                 const auto& vocab = impl->backend.vocab();
                 TokenSeq prompt = parse_tokens(body, "prompt", vocab.size());
                 std::uint32_t max_new = 25;
                 if (body.contains("max_new")) {
                     require(body["max_new"].is_number_unsigned(), ErrorKind::invalid_argument,
                             "max_new must be a non-negative integer");
                     max_new = body["max_new"].get<std::uint32_t>();
                 }
                 lm::StopPolicy stop;
                 if (body.contains("stop_ids")) stop.stop_ids = parse_tokens(body, "stop_ids", vocab.size());
                 else stop.stop_ids = vocab.sentence_end_ids();
                 auto out = impl->backend.decode(prompt, max_new, stop);
                 res.set_content(json{{"tokens", tokens_json(out.tokens)},
                                      {"stopped", out.stopped},
                                      {"truncated", out.truncated}}
                                     .dump(),
                                 "application/json");
             }));

    srv.Post("/v1/grad", guarded([impl](const json& body, httplib::Response& res) {
                 require(impl->options.serve_grad, ErrorKind::unsupported,
                         "gradient endpoint disabled on this server");
                 const auto& vocab = impl->backend.vocab();
                 TokenSeq prompt = parse_tokens(body, "prompt", vocab.size());
                 TokenSeq target = parse_tokens(body, "target", vocab.size());
                 auto g = impl->backend.grad(prompt, target);
                 json grad = json::array();
                 for (float v : g.values) grad.push_back(v);
                 res.set_content(json{{"loss", g.loss_at_point},
                                      {"rows", g.rows},
                                      {"cols", g.cols},
                                      {"grad", std::move(grad)}}
                                     .dump(),
                                 "application/json");
             }));

    if (opts.port == 0) {
        impl->port = srv.bind_to_any_port(opts.host);
        require(impl->port > 0, ErrorKind::network, "failed to bind model server");
    } else {
        require(srv.bind_to_port(opts.host, opts.port), ErrorKind::network,
                "failed to bind model server to port " + std::to_string(opts.port));
        impl->port = opts.port;
    }
    impl->thread = std::thread([impl] { impl->server.listen_after_bind(); });
    srv.wait_until_ready();
}

ModelServer::~ModelServer() { stop(); }

int ModelServer::port() const { return impl_->port; }

std::string ModelServer::base_url() const {
    return "http://" + impl_->options.host + ":" + std::to_string(impl_->port);
}

void ModelServer::stop() {
    if (impl_ && impl_->server.is_running()) impl_->server.stop();
    if (impl_ && impl_->thread.joinable()) impl_->thread.join();
}

} // namespace ap::backend
