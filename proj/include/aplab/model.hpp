#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aplab/common.hpp"

namespace ap::lm {

struct ModelConfig {
    std::uint32_t vocab_size = 512;
    std::uint32_t context_len = 64;
    std::uint32_t embed_dim = 64;
    std::uint32_t n_layers = 2;
    std::uint32_t n_heads = 2;

    std::uint32_t head_dim() const { return embed_dim / n_heads; }
    void validate() const;
};

// Pre-norm decoder transformer, GELU MLP, learned positional embeddings,
// untied unembedding, no linear biases. With n_layers = 0 the model reduces
// to a position-wise embed -> layernorm -> unembed map.
template <typename T>
struct LayerWeights {
    std::vector<T> ln1_g, ln1_b;
    std::vector<T> wq, wk, wv, wo; // [d x d], rows are output dims
    std::vector<T> ln2_g, ln2_b;
    std::vector<T> w1; // [4d x d]
    std::vector<T> w2; // [d x 4d]
};

template <typename T>
struct Params {
    ModelConfig cfg;
    std::vector<T> tok_embed; // [V x d]
    std::vector<T> pos_embed; // [C x d]
    std::vector<LayerWeights<T>> layers;
    std::vector<T> lnf_g, lnf_b;
    std::vector<T> unembed; // [V x d]

    static Params random(const ModelConfig& cfg, std::uint64_t seed, T init_std = T(0.08));
    static Params zeros(const ModelConfig& cfg);

    std::size_t param_count() const;
    bool all_finite() const;
    void check_finite(const std::string& where) const;

    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        fn(tok_embed);
        fn(pos_embed);
        for (auto& l : layers) {
            fn(l.ln1_g); fn(l.ln1_b);
            fn(l.wq); fn(l.wk); fn(l.wv); fn(l.wo);
            fn(l.ln2_g); fn(l.ln2_b);
            fn(l.w1); fn(l.w2);
        }
        fn(lnf_g); fn(lnf_b);
        fn(unembed);
    }
    template <typename Fn>
    void for_each_tensor(Fn&& fn) const {
        const_cast<Params*>(this)->for_each_tensor([&](auto& v) { fn(const_cast<const std::vector<T>&>(v)); });
    }
};

using ParamsF = Params<float>;
using ParamsD = Params<double>;

Params<double> widen(const Params<float>& p);

struct StopPolicy {
    std::vector<TokenId> stop_ids; // empty = no stop tokens

    bool contains(TokenId id) const {
        for (TokenId s : stop_ids)
            if (s == id) return true;
        return false;
    }
};

struct DecodeResult {
    TokenSeq tokens;        // newly generated tokens (stop token included)
    bool stopped = false;   // ended on a stop token
    bool truncated = false; // hit the context boundary before max_new/stop
};

template <typename T>
struct GradMatrix {
    std::size_t rows = 0; // prompt length
    std::size_t cols = 0; // vocab size
    std::vector<T> values;
    T loss_at_point = T(0);

    T at(std::size_t i, std::size_t v) const { return values[i * cols + v]; }
};

using GradMatrixF = GradMatrix<float>;

// Unnormalized next-token scores for every position; row i conditions on
// seq[0..=i]. Shape len x vocab.
template <typename T>
std::vector<T> forward_logits(const Params<T>& p, TokenView seq);

// Sum of -log P(target_i | prompt, target_<i) over the target, computed with
// a numerically stable log-softmax.
template <typename T>
T loss_nll(const Params<T>& p, TokenView prompt, TokenView target);

// Same loss with the prompt's token-embedding lookups replaced by explicit
// rows (prompt_len x d); positional embeddings are still added. Used by the
// finite-difference gradient checks.
template <typename T>
T loss_nll_embedded(const Params<T>& p, const std::vector<T>& prompt_embeds, std::size_t prompt_len,
                    TokenView target);

// Exact gradient of loss_nll with respect to one-hot prompt encodings:
// row i = d(loss)/d(embedding input at i) right-multiplied by E^T.
template <typename T>
GradMatrix<T> onehot_grad(const Params<T>& p, TokenView prompt, TokenView target);

// Incremental decoder state with per-layer key/value caches. Appending a
// token performs exactly the same arithmetic as a full forward pass over the
// extended sequence, so decoding via a session (or a forked copy of one) is
// bit-identical to decoding from scratch.
template <typename T>
class InferenceSession {
public:
    explicit InferenceSession(const Params<T>& p);

    std::size_t length() const { return length_; }
    bool can_append() const { return length_ < params_->cfg.context_len; }
    // Feeds one token; returns logits of the new last position (size V).
    const std::vector<T>& append(TokenId tok);
    const std::vector<T>& logits() const { return logits_; }

private:
    const Params<T>* params_;
    std::vector<std::vector<T>> key_cache_, value_cache_; // per layer, length_ x d
    std::vector<T> logits_;
    std::vector<T> x_, a_, xhat_, q_, k_, v_, ctx_, z_, g_, scratch_;
    std::size_t length_ = 0;
};

// Greedy argmax continuation; ties go to the lowest token id. Stops on a
// stop-policy token (kept in the output), after max_new tokens, or at the
// context boundary (flagged as truncated).
template <typename T>
DecodeResult greedy_decode(const Params<T>& p, TokenView prompt, std::uint32_t max_new,
                           const StopPolicy& stop);

// Continues the greedy loop from an existing session state.
template <typename T>
DecodeResult greedy_continue(InferenceSession<T>& session, std::uint32_t max_new,
                             const StopPolicy& stop);

struct TrainConfig {
    std::uint32_t steps = 800;
    std::uint32_t batch_size = 8;
    float learning_rate = 3e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.99f;
    float adam_eps = 1e-8f;
    float grad_clip = 1.0f; // global-norm clip, 0 disables
    bool linear_lr_decay = true;
    float init_std = 0.08f;
};

struct TrainResult {
    ParamsF params;
    float initial_loss = 0.0f; // mean per-token loss of the first batch
    float final_loss = 0.0f;
    std::vector<float> losses; // one mean per step
};

// Adam on random context-length windows of the corpus stream. Deterministic
// for a fixed seed; batch items may be evaluated in parallel but gradients
// are reduced in batch order.
TrainResult train_tiny_lm(TokenView corpus_tokens, const ModelConfig& cfg, const TrainConfig& tc,
                          std::uint64_t seed, unsigned workers = 1);

} // namespace ap::lm
