#pragma once

#include <memory>
#include <string>

#include "aplab/checkpoint.hpp"
#include "aplab/common.hpp"
#include "aplab/model.hpp"
#include "aplab/vocab.hpp"

namespace ap::backend {

struct Capabilities {
    bool supports_grad = false;
};

// Reusable decoding handle for a fixed prompt prefix; continue_with must be
// safe to call concurrently. Results are identical to decoding the full
// concatenated prompt.
class PrefixDecoder {
public:
    virtual ~PrefixDecoder() = default;
    virtual lm::DecodeResult continue_with(TokenView suffix, std::uint32_t max_new,
                                           const lm::StopPolicy& stop) const = 0;
};

// Minimal scoring interface the induction and ablation code runs against.
// Implementations must keep loss/decode/grad mutually consistent
// (grad().loss_at_point equals loss() on identical inputs).
class LmBackend {
public:
    virtual ~LmBackend() = default;

    virtual const corpus::Vocab& vocab() const = 0;
    virtual Capabilities capabilities() const = 0;

    virtual double loss(TokenView prompt, TokenView target) const = 0;
    virtual lm::DecodeResult decode(TokenView prompt, std::uint32_t max_new,
                                    const lm::StopPolicy& stop) const = 0;
    // Throws ErrorKind::unsupported when capabilities().supports_grad is false.
    virtual lm::GradMatrixF grad(TokenView prompt, TokenView target) const = 0;

    virtual std::unique_ptr<PrefixDecoder> prefix_decoder(TokenView prefix) const;

    lm::StopPolicy sentence_stop() const { return lm::StopPolicy{vocab().sentence_end_ids()}; }
};

// In-process pass-through to the built-in model; does not own the model.
class LocalBackend : public LmBackend {
public:
    explicit LocalBackend(const lm::Model& model) : model_(&model) {}

    const corpus::Vocab& vocab() const override { return model_->vocab; }
    Capabilities capabilities() const override { return {true}; }
    double loss(TokenView prompt, TokenView target) const override;
    lm::DecodeResult decode(TokenView prompt, std::uint32_t max_new,
                            const lm::StopPolicy& stop) const override;
    lm::GradMatrixF grad(TokenView prompt, TokenView target) const override;
    std::unique_ptr<PrefixDecoder> prefix_decoder(TokenView prefix) const override;

    const lm::Model& model() const { return *model_; }

private:
    const lm::Model* model_;
};

struct RemoteConfig {
    std::string base_url; // e.g. "http://127.0.0.1:8311"
    int timeout_ms = 10000;
    int retries = 2;          // additional attempts after a transport failure
    std::string bearer_token; // empty = no Authorization header
    bool grad_enabled = true; // set false when the endpoint does not serve /v1/grad

    void validate() const;
};

// JSON-over-HTTP client for the /v1/loss, /v1/decode and /v1/grad endpoints
// (see docs/protocol.md). The vocabulary is supplied locally, typically from
// the matching checkpoint sidecar.
class RemoteBackend : public LmBackend {
public:
    RemoteBackend(RemoteConfig cfg, corpus::Vocab vocab);

    const corpus::Vocab& vocab() const override { return vocab_; }
    Capabilities capabilities() const override { return {cfg_.grad_enabled}; }
    double loss(TokenView prompt, TokenView target) const override;
    lm::DecodeResult decode(TokenView prompt, std::uint32_t max_new,
                            const lm::StopPolicy& stop) const override;
    lm::GradMatrixF grad(TokenView prompt, TokenView target) const override;

private:
    std::string post(const std::string& path, const std::string& body) const;

    RemoteConfig cfg_;
    corpus::Vocab vocab_;
};

struct ServerOptions {
    std::string host = "127.0.0.1";
    int port = 0; // 0 = pick a free port
    int max_concurrency = 4;
    std::string bearer_token; // empty = no auth
    bool serve_grad = true;
};

// Serves a model over the wire protocol on a background thread.
class ModelServer {
public:
    ModelServer(const lm::Model& model, const ServerOptions& opts);
    ~ModelServer();

    ModelServer(const ModelServer&) = delete;
    ModelServer& operator=(const ModelServer&) = delete;

    int port() const;
    std::string base_url() const;
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace ap::backend
