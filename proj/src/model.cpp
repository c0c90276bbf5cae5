#include "aplab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>

#include "aplab/parallel.hpp"
#include "aplab/rng.hpp"

namespace ap::lm {

namespace {

constexpr double kLnEps = 1e-5;

template <typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <typename T>
inline T gelu_grad(T x) {
    T phi = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
    T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
    return phi + x * pdf;
}

// Y[rows x dout] = X[rows x din] * W^T, with W stored [dout x din] row-major.
template <typename T>
void matmul_nt(T* y, const T* x, const T* w, std::size_t rows, std::size_t din, std::size_t dout) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * din;
        T* yr = y + r * dout;
        for (std::size_t o = 0; o < dout; ++o) {
            const T* wo = w + o * din;
            T acc = T(0);
            for (std::size_t i = 0; i < din; ++i) acc += xr[i] * wo[i];
            yr[o] = acc;
        }
    }
}

// Y[rows x din] (+)= D[rows x dout] * W with W stored [dout x din].
template <typename T>
void matmul_nn(T* y, const T* d, const T* w, std::size_t rows, std::size_t dout, std::size_t din,
               bool accumulate) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* dr = d + r * dout;
        T* yr = y + r * din;
        if (!accumulate) std::fill(yr, yr + din, T(0));
        for (std::size_t o = 0; o < dout; ++o) {
            T s = dr[o];
            if (s == T(0)) continue;
            const T* wo = w + o * din;
            for (std::size_t i = 0; i < din; ++i) yr[i] += s * wo[i];
        }
    }
}

// dW[dout x din] += D^T[rows x dout] * X[rows x din].
template <typename T>
void matmul_tn_acc(T* dw, const T* d, const T* x, std::size_t rows, std::size_t dout,
                   std::size_t din) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* dr = d + r * dout;
        const T* xr = x + r * din;
        for (std::size_t o = 0; o < dout; ++o) {
            T s = dr[o];
            if (s == T(0)) continue;
            T* wo = dw + o * din;
            for (std::size_t i = 0; i < din; ++i) wo[i] += s * xr[i];
        }
    }
}

// Row-wise layernorm with affine parameters; stores normalized values and
// inverse stddev for the backward pass.
template <typename T>
void layernorm_rows(const T* x, const T* g, const T* b, std::size_t rows, std::size_t d, T* out,
                    T* xhat, T* inv) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * d;
        T mean = T(0);
        for (std::size_t i = 0; i < d; ++i) mean += xr[i];
        mean /= T(d);
        T var = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            T c = xr[i] - mean;
            var += c * c;
        }
        var /= T(d);
        T is = T(1) / std::sqrt(var + T(kLnEps));
        inv[r] = is;
        T* hr = xhat + r * d;
        T* or_ = out + r * d;
        for (std::size_t i = 0; i < d; ++i) {
            hr[i] = (xr[i] - mean) * is;
            or_[i] = hr[i] * g[i] + b[i];
        }
    }
}

// dx (+)= layernorm backward; accumulates affine grads when given.
template <typename T>
void layernorm_backward_rows(const T* dout, const T* g, const T* xhat, const T* inv,
                             std::size_t rows, std::size_t d, T* dx, T* dg, T* db) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* dr = dout + r * d;
        const T* hr = xhat + r * d;
        T* xr = dx + r * d;
        T m1 = T(0), m2 = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            T dh = dr[i] * g[i];
            m1 += dh;
            m2 += dh * hr[i];
        }
        m1 /= T(d);
        m2 /= T(d);
        T is = inv[r];
        for (std::size_t i = 0; i < d; ++i) {
            T dh = dr[i] * g[i];
            xr[i] += is * (dh - m1 - hr[i] * m2);
        }
        if (dg) {
            for (std::size_t i = 0; i < d; ++i) {
                dg[i] += dr[i] * hr[i];
                db[i] += dr[i];
            }
        }
    }
}

template <typename T>
struct LayerTape {
    std::vector<T> xhat1, inv1, a, q, k, v, probs, ctx, xhat2, inv2, b, z, g;
};

template <typename T>
struct Tape {
    std::size_t len = 0;
    std::vector<T> h0; // initial embeddings, kept for input gradients
    std::vector<T> h;  // running hidden state
    std::vector<LayerTape<T>> layers;
    std::vector<T> xhatf, invf, f;
    std::vector<T> scratch; // reused T x max(d, 4d) buffer
};

template <typename T>
Tape<T>& tape_scratch() {
    thread_local Tape<T> tape;
    return tape;
}

template <typename T>
void check_tokens(const Params<T>& p, TokenView seq) {
    for (TokenId id : seq) {
        require(id < p.cfg.vocab_size, ErrorKind::invalid_argument,
                "token id " + std::to_string(id) + " out of vocabulary range " +
                    std::to_string(p.cfg.vocab_size));
    }
}

// Forward pass over the whole sequence, recording activations. When
// embed_override is non-null its rows replace the token-embedding lookups for
// the first override_rows positions (positional embeddings still apply).
template <typename T>
void forward_core(const Params<T>& p, TokenView seq, std::type_identity_t<const T*> embed_override,
                  std::size_t override_rows, Tape<T>& tape) {
    const auto& cfg = p.cfg;
    const std::size_t len = seq.size();
    const std::size_t d = cfg.embed_dim;
    const std::size_t dff = 4 * d;
    require(len >= 1, ErrorKind::invalid_argument, "empty sequence");
    require(len <= cfg.context_len, ErrorKind::invalid_argument,
            "sequence length " + std::to_string(len) + " exceeds context " +
                std::to_string(cfg.context_len));
    check_tokens(p, seq.subspan(override_rows));

    tape.len = len;
    tape.h0.resize(len * d);
    tape.h.resize(len * d);
    tape.layers.resize(cfg.n_layers);
    tape.xhatf.resize(len * d);
    tape.invf.resize(len);
    tape.f.resize(len * d);
    tape.scratch.resize(len * dff);

    for (std::size_t t = 0; t < len; ++t) {
        T* h = tape.h0.data() + t * d;
        const T* pe = p.pos_embed.data() + t * d;
        if (embed_override && t < override_rows) {
            const T* e = embed_override + t * d;
            for (std::size_t i = 0; i < d; ++i) h[i] = e[i] + pe[i];
        } else {
            const T* e = p.tok_embed.data() + static_cast<std::size_t>(seq[t]) * d;
            for (std::size_t i = 0; i < d; ++i) h[i] = e[i] + pe[i];
        }
    }
    tape.h = tape.h0;

    const std::size_t hd = cfg.n_layers ? cfg.head_dim() : 0;
    const T scale = cfg.n_layers ? T(1) / std::sqrt(T(hd)) : T(0);

    for (std::size_t li = 0; li < cfg.n_layers; ++li) {
        const auto& w = p.layers[li];
        auto& lt = tape.layers[li];
        lt.xhat1.resize(len * d);
        lt.inv1.resize(len);
        lt.a.resize(len * d);
        lt.q.resize(len * d);
        lt.k.resize(len * d);
        lt.v.resize(len * d);
        lt.probs.assign(cfg.n_heads * len * len, T(0));
        lt.ctx.resize(len * d);
        lt.xhat2.resize(len * d);
        lt.inv2.resize(len);
        lt.b.resize(len * d);
        lt.z.resize(len * dff);
        lt.g.resize(len * dff);

        layernorm_rows(tape.h.data(), w.ln1_g.data(), w.ln1_b.data(), len, d, lt.a.data(),
                       lt.xhat1.data(), lt.inv1.data());
        matmul_nt(lt.q.data(), lt.a.data(), w.wq.data(), len, d, d);
        matmul_nt(lt.k.data(), lt.a.data(), w.wk.data(), len, d, d);
        matmul_nt(lt.v.data(), lt.a.data(), w.wv.data(), len, d, d);

        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::size_t hs = h * hd;
            T* probs = lt.probs.data() + h * len * len;
            for (std::size_t t = 0; t < len; ++t) {
                const T* qt = lt.q.data() + t * d + hs;
                T* pr = probs + t * len;
                T maxv = std::numeric_limits<T>::lowest();
                for (std::size_t u = 0; u <= t; ++u) {
                    const T* ku = lt.k.data() + u * d + hs;
                    T acc = T(0);
                    for (std::size_t j = 0; j < hd; ++j) acc += qt[j] * ku[j];
                    acc *= scale;
                    pr[u] = acc;
                    if (acc > maxv) maxv = acc;
                }
                T denom = T(0);
                for (std::size_t u = 0; u <= t; ++u) {
                    pr[u] = std::exp(pr[u] - maxv);
                    denom += pr[u];
                }
                T invd = T(1) / denom;
                for (std::size_t u = 0; u <= t; ++u) pr[u] *= invd;
                T* ct = lt.ctx.data() + t * d + hs;
                std::fill(ct, ct + hd, T(0));
                for (std::size_t u = 0; u <= t; ++u) {
                    const T* vu = lt.v.data() + u * d + hs;
                    T pu = pr[u];
                    for (std::size_t j = 0; j < hd; ++j) ct[j] += pu * vu[j];
                }
            }
        }

        T* attn_out = tape.scratch.data();
        matmul_nt(attn_out, lt.ctx.data(), w.wo.data(), len, d, d);
        for (std::size_t i = 0; i < len * d; ++i) tape.h[i] += attn_out[i];

        layernorm_rows(tape.h.data(), w.ln2_g.data(), w.ln2_b.data(), len, d, lt.b.data(),
                       lt.xhat2.data(), lt.inv2.data());
        matmul_nt(lt.z.data(), lt.b.data(), w.w1.data(), len, d, dff);
        for (std::size_t i = 0; i < len * dff; ++i) lt.g[i] = gelu(lt.z[i]);
        T* mlp_out = tape.scratch.data();
        matmul_nt(mlp_out, lt.g.data(), w.w2.data(), len, dff, d);
        for (std::size_t i = 0; i < len * d; ++i) tape.h[i] += mlp_out[i];
    }

    layernorm_rows(tape.h.data(), p.lnf_g.data(), p.lnf_b.data(), len, d, tape.f.data(),
                   tape.xhatf.data(), tape.invf.data());
}

// Loss (and optionally dlogits = softmax - onehot) for positions
// [first, first+targets.size()), each predicting the matching target token.
template <typename T>
double loss_rows(const Params<T>& p, const Tape<T>& tape, std::size_t first, TokenView targets,
                 std::type_identity_t<std::vector<T>*> dlogits) {
    const std::size_t d = p.cfg.embed_dim;
    const std::size_t vs = p.cfg.vocab_size;
    thread_local std::vector<T> row;
    row.resize(vs);
    if (dlogits) dlogits->resize(targets.size() * vs);
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const std::size_t t = first + i;
        matmul_nt(row.data(), tape.f.data() + t * d, p.unembed.data(), 1, d, vs);
        T maxv = row[0];
        for (std::size_t v = 1; v < vs; ++v) maxv = std::max(maxv, row[v]);
        T denom = T(0);
        for (std::size_t v = 0; v < vs; ++v) denom += std::exp(row[v] - maxv);
        T lse = maxv + std::log(denom);
        total += static_cast<double>(lse - row[targets[i]]);
        if (dlogits) {
            T* dl = dlogits->data() + i * vs;
            for (std::size_t v = 0; v < vs; ++v) dl[v] = std::exp(row[v] - lse);
            dl[targets[i]] -= T(1);
        }
    }
    return total;
}

// Full backward pass. dlogits covers positions [first, first+n_rows).
// Writes input gradients (w.r.t. the embedding inputs h0) into dinput when
// given, and accumulates parameter gradients into pg when given.
template <typename T>
void backward_core(const Params<T>& p, const Tape<T>& tape, std::size_t first, TokenView seq,
                   const std::vector<T>& dlogits, std::size_t n_rows,
                   std::type_identity_t<Params<T>*> pg,
                   std::type_identity_t<std::vector<T>*> dinput) {
    const auto& cfg = p.cfg;
    const std::size_t len = tape.len;
    const std::size_t d = cfg.embed_dim;
    const std::size_t dff = 4 * d;
    const std::size_t vs = cfg.vocab_size;

    thread_local std::vector<T> dh, df, dq, dk, dv, dctx, da, dz, dg_buf, dbuf;
    dh.assign(len * d, T(0));
    df.assign(len * d, T(0));

    // dF rows and unembedding gradient from the loss rows.
    for (std::size_t i = 0; i < n_rows; ++i) {
        const std::size_t t = first + i;
        const T* dl = dlogits.data() + i * vs;
        T* dfr = df.data() + t * d;
        for (std::size_t v = 0; v < vs; ++v) {
            T s = dl[v];
            if (s == T(0)) continue;
            const T* uv = p.unembed.data() + v * d;
            for (std::size_t j = 0; j < d; ++j) dfr[j] += s * uv[j];
        }
        if (pg) {
            const T* fr = tape.f.data() + t * d;
            for (std::size_t v = 0; v < vs; ++v) {
                T s = dl[v];
                if (s == T(0)) continue;
                T* gv = pg->unembed.data() + v * d;
                for (std::size_t j = 0; j < d; ++j) gv[j] += s * fr[j];
            }
        }
    }

    layernorm_backward_rows(df.data(), p.lnf_g.data(), tape.xhatf.data(), tape.invf.data(), len, d,
                            dh.data(), pg ? pg->lnf_g.data() : nullptr,
                            pg ? pg->lnf_b.data() : nullptr);

    const std::size_t hd = cfg.n_layers ? cfg.head_dim() : 0;
    const T scale = cfg.n_layers ? T(1) / std::sqrt(T(hd)) : T(0);

    for (std::size_t li_plus = cfg.n_layers; li_plus > 0; --li_plus) {
        const std::size_t li = li_plus - 1;
        const auto& w = p.layers[li];
        const auto& lt = tape.layers[li];
        LayerWeights<T>* gw = pg ? &pg->layers[li] : nullptr;

        // MLP block: h_out = h_mid + W2 * gelu(W1 * ln2(h_mid))
        dg_buf.resize(len * dff);
        dz.resize(len * dff);
        dbuf.assign(len * d, T(0));
        matmul_nn(dg_buf.data(), dh.data(), w.w2.data(), len, d, dff, false);
        if (gw) matmul_tn_acc(gw->w2.data(), dh.data(), lt.g.data(), len, d, dff);
        for (std::size_t i = 0; i < len * dff; ++i) dz[i] = dg_buf[i] * gelu_grad(lt.z[i]);
        matmul_nn(dbuf.data(), dz.data(), w.w1.data(), len, dff, d, false);
        if (gw) matmul_tn_acc(gw->w1.data(), dz.data(), lt.b.data(), len, dff, d);
        layernorm_backward_rows(dbuf.data(), w.ln2_g.data(), lt.xhat2.data(), lt.inv2.data(), len,
                                d, dh.data(), gw ? gw->ln2_g.data() : nullptr,
                                gw ? gw->ln2_b.data() : nullptr);

        // Attention block: h_mid = h_in + Wo * attend(ln1(h_in))
        dctx.assign(len * d, T(0));
        matmul_nn(dctx.data(), dh.data(), w.wo.data(), len, d, d, false);
        if (gw) matmul_tn_acc(gw->wo.data(), dh.data(), lt.ctx.data(), len, d, d);

        dq.assign(len * d, T(0));
        dk.assign(len * d, T(0));
        dv.assign(len * d, T(0));
        thread_local std::vector<T> dp_row, ds_row;
        dp_row.resize(len);
        ds_row.resize(len);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::size_t hs = h * hd;
            const T* probs = lt.probs.data() + h * len * len;
            for (std::size_t t = 0; t < len; ++t) {
                const T* pr = probs + t * len;
                const T* dct = dctx.data() + t * d + hs;
                T dot_pp = T(0);
                for (std::size_t u = 0; u <= t; ++u) {
                    const T* vu = lt.v.data() + u * d + hs;
                    T acc = T(0);
                    for (std::size_t j = 0; j < hd; ++j) acc += dct[j] * vu[j];
                    dp_row[u] = acc;
                    dot_pp += pr[u] * acc;
                }
                for (std::size_t u = 0; u <= t; ++u) ds_row[u] = pr[u] * (dp_row[u] - dot_pp);
                const T* qt = lt.q.data() + t * d + hs;
                T* dqt = dq.data() + t * d + hs;
                for (std::size_t u = 0; u <= t; ++u) {
                    const T s = ds_row[u] * scale;
                    const T* ku = lt.k.data() + u * d + hs;
                    T* dku = dk.data() + u * d + hs;
                    for (std::size_t j = 0; j < hd; ++j) {
                        dqt[j] += s * ku[j];
                        dku[j] += s * qt[j];
                    }
                    const T pu = pr[u];
                    T* dvu = dv.data() + u * d + hs;
                    for (std::size_t j = 0; j < hd; ++j) dvu[j] += pu * dct[j];
                }
            }
        }

        da.assign(len * d, T(0));
        matmul_nn(da.data(), dq.data(), w.wq.data(), len, d, d, true);
        matmul_nn(da.data(), dk.data(), w.wk.data(), len, d, d, true);
        matmul_nn(da.data(), dv.data(), w.wv.data(), len, d, d, true);
        if (gw) {
            matmul_tn_acc(gw->wq.data(), dq.data(), lt.a.data(), len, d, d);
            matmul_tn_acc(gw->wk.data(), dk.data(), lt.a.data(), len, d, d);
            matmul_tn_acc(gw->wv.data(), dv.data(), lt.a.data(), len, d, d);
        }
        layernorm_backward_rows(da.data(), w.ln1_g.data(), lt.xhat1.data(), lt.inv1.data(), len, d,
                                dh.data(), gw ? gw->ln1_g.data() : nullptr,
                                gw ? gw->ln1_b.data() : nullptr);
    }

    if (dinput) *dinput = dh;
    if (pg) {
        for (std::size_t t = 0; t < len; ++t) {
            const T* dhr = dh.data() + t * d;
            T* pe = pg->pos_embed.data() + t * d;
            T* te = pg->tok_embed.data() + static_cast<std::size_t>(seq[t]) * d;
            for (std::size_t j = 0; j < d; ++j) {
                pe[j] += dhr[j];
                te[j] += dhr[j];
            }
        }
    }
}

} // namespace

void ModelConfig::validate() const {
    require(vocab_size >= 1, ErrorKind::invalid_argument, "vocab_size must be >= 1");
    require(context_len >= 1, ErrorKind::invalid_argument, "context_len must be >= 1");
    require(embed_dim >= 1, ErrorKind::invalid_argument, "embed_dim must be >= 1");
    require(n_heads >= 1, ErrorKind::invalid_argument, "n_heads must be >= 1");
    require(embed_dim % n_heads == 0, ErrorKind::invalid_argument,
            "embed_dim must be divisible by n_heads");
}

template <typename T>
Params<T> Params<T>::zeros(const ModelConfig& cfg) {
    cfg.validate();
    Params<T> p;
    p.cfg = cfg;
    const std::size_t d = cfg.embed_dim;
    p.tok_embed.assign(std::size_t(cfg.vocab_size) * d, T(0));
    p.pos_embed.assign(std::size_t(cfg.context_len) * d, T(0));
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
        l.ln1_g.assign(d, T(1));
        l.ln1_b.assign(d, T(0));
        l.wq.assign(d * d, T(0));
        l.wk.assign(d * d, T(0));
        l.wv.assign(d * d, T(0));
        l.wo.assign(d * d, T(0));
        l.ln2_g.assign(d, T(1));
        l.ln2_b.assign(d, T(0));
        l.w1.assign(4 * d * d, T(0));
        l.w2.assign(4 * d * d, T(0));
    }
    p.lnf_g.assign(d, T(1));
    p.lnf_b.assign(d, T(0));
    p.unembed.assign(std::size_t(cfg.vocab_size) * d, T(0));
    return p;
}

template <typename T>
Params<T> Params<T>::random(const ModelConfig& cfg, std::uint64_t seed, T init_std) {
    Params<T> p = zeros(cfg);
    RandomStream rng(seed);
    auto fill = [&](std::vector<T>& v) {
        for (auto& x : v) x = T(rng.normal(0.0, static_cast<double>(init_std)));
    };
    fill(p.tok_embed);
    fill(p.pos_embed);
    for (auto& l : p.layers) {
        fill(l.wq);
        fill(l.wk);
        fill(l.wv);
        fill(l.wo);
        fill(l.w1);
        fill(l.w2);
    }
    fill(p.unembed);
    return p;
}

template <typename T>
std::size_t Params<T>::param_count() const {
    std::size_t n = 0;
    for_each_tensor([&](const std::vector<T>& v) { n += v.size(); });
    return n;
}

template <typename T>
bool Params<T>::all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::vector<T>& v) {
        for (T x : v) {
            if (!std::isfinite(x)) {
                ok = false;
                return;
            }
        }
    });
    return ok;
}

template <typename T>
void Params<T>::check_finite(const std::string& where) const {
    require(all_finite(), ErrorKind::numerical, "non-finite model weights: " + where);
}

Params<double> widen(const Params<float>& p) {
    Params<double> out = Params<double>::zeros(p.cfg);
    std::vector<const std::vector<float>*> src;
    p.for_each_tensor([&](const std::vector<float>& v) { src.push_back(&v); });
    std::size_t idx = 0;
    out.for_each_tensor([&](std::vector<double>& v) {
        const auto& s = *src[idx++];
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(s[i]);
    });
    return out;
}

template <typename T>
std::vector<T> forward_logits(const Params<T>& p, TokenView seq) {
    auto& tape = tape_scratch<T>();
    forward_core(p, seq, nullptr, 0, tape);
    std::vector<T> logits(seq.size() * p.cfg.vocab_size);
    matmul_nt(logits.data(), tape.f.data(), p.unembed.data(), seq.size(), p.cfg.embed_dim,
              p.cfg.vocab_size);
    return logits;
}

namespace {

TokenSeq concat(TokenView prompt, TokenView target) {
    TokenSeq seq;
    seq.reserve(prompt.size() + target.size());
    seq.insert(seq.end(), prompt.begin(), prompt.end());
    seq.insert(seq.end(), target.begin(), target.end());
    return seq;
}

void check_loss_pre(std::size_t prompt_len, std::size_t target_len, std::uint32_t context) {
    require(prompt_len >= 1 && target_len >= 1, ErrorKind::invalid_argument,
            "prompt and target must be non-empty");
    require(prompt_len + target_len <= context, ErrorKind::invalid_argument,
            "prompt+target length " + std::to_string(prompt_len + target_len) +
                " exceeds context " + std::to_string(context));
}

} // namespace

template <typename T>
T loss_nll(const Params<T>& p, TokenView prompt, TokenView target) {
    check_loss_pre(prompt.size(), target.size(), p.cfg.context_len);
    TokenSeq seq = concat(prompt, target);
    auto& tape = tape_scratch<T>();
    forward_core(p, seq, nullptr, 0, tape);
    return static_cast<T>(loss_rows(p, tape, prompt.size() - 1, target, nullptr));
}

template <typename T>
T loss_nll_embedded(const Params<T>& p, const std::vector<T>& prompt_embeds,
                    std::size_t prompt_len, TokenView target) {
    check_loss_pre(prompt_len, target.size(), p.cfg.context_len);
    require(prompt_embeds.size() == prompt_len * p.cfg.embed_dim, ErrorKind::invalid_argument,
            "prompt embedding shape mismatch");
    TokenSeq seq(prompt_len, 0);
    seq.insert(seq.end(), target.begin(), target.end());
    auto& tape = tape_scratch<T>();
    forward_core(p, seq, prompt_embeds.data(), prompt_len, tape);
    return static_cast<T>(loss_rows(p, tape, prompt_len - 1, target, nullptr));
}

template <typename T>
GradMatrix<T> onehot_grad(const Params<T>& p, TokenView prompt, TokenView target) {
    check_loss_pre(prompt.size(), target.size(), p.cfg.context_len);
    TokenSeq seq = concat(prompt, target);
    auto& tape = tape_scratch<T>();
    forward_core(p, seq, nullptr, 0, tape);
    std::vector<T> dlogits;
    double loss = loss_rows(p, tape, prompt.size() - 1, target, &dlogits);
    std::vector<T> dinput;
    backward_core(p, tape, prompt.size() - 1, seq, dlogits, target.size(), nullptr, &dinput);

    GradMatrix<T> g;
    g.rows = prompt.size();
    g.cols = p.cfg.vocab_size;
    g.loss_at_point = static_cast<T>(loss);
    g.values.resize(g.rows * g.cols);
    matmul_nt(g.values.data(), dinput.data(), p.tok_embed.data(), g.rows, p.cfg.embed_dim,
              p.cfg.vocab_size);
    return g;
}

template <typename T>
InferenceSession<T>::InferenceSession(const Params<T>& p) : params_(&p) {
    const std::size_t d = p.cfg.embed_dim;
    key_cache_.resize(p.cfg.n_layers);
    value_cache_.resize(p.cfg.n_layers);
    for (auto& c : key_cache_) c.reserve(p.cfg.context_len * d);
    for (auto& c : value_cache_) c.reserve(p.cfg.context_len * d);
    logits_.resize(p.cfg.vocab_size);
    x_.resize(d);
    a_.resize(d);
    xhat_.resize(d);
    q_.resize(d);
    k_.resize(d);
    v_.resize(d);
    ctx_.resize(d);
    z_.resize(4 * d);
    g_.resize(4 * d);
    scratch_.resize(p.cfg.context_len);
}

template <typename T>
const std::vector<T>& InferenceSession<T>::append(TokenId tok) {
    const Params<T>& p = *params_;
    const auto& cfg = p.cfg;
    const std::size_t d = cfg.embed_dim;
    const std::size_t dff = 4 * d;
    require(length_ < cfg.context_len, ErrorKind::invalid_argument,
            "context length exceeded in decode session");
    require(tok < cfg.vocab_size, ErrorKind::invalid_argument, "token id out of vocabulary range");

    const std::size_t pos = length_;
    const T* e = p.tok_embed.data() + std::size_t(tok) * d;
    const T* pe = p.pos_embed.data() + pos * d;
    for (std::size_t i = 0; i < d; ++i) x_[i] = e[i] + pe[i];

    const std::size_t hd = cfg.n_layers ? cfg.head_dim() : 0;
    const T scale = cfg.n_layers ? T(1) / std::sqrt(T(hd)) : T(0);

    for (std::size_t li = 0; li < cfg.n_layers; ++li) {
        const auto& w = p.layers[li];
        T inv_unused;
        layernorm_rows(x_.data(), w.ln1_g.data(), w.ln1_b.data(), 1, d, a_.data(), xhat_.data(),
                       &inv_unused);
        matmul_nt(q_.data(), a_.data(), w.wq.data(), 1, d, d);
        matmul_nt(k_.data(), a_.data(), w.wk.data(), 1, d, d);
        matmul_nt(v_.data(), a_.data(), w.wv.data(), 1, d, d);
        auto& kc = key_cache_[li];
        auto& vc = value_cache_[li];
        kc.insert(kc.end(), k_.begin(), k_.end());
        vc.insert(vc.end(), v_.begin(), v_.end());

        const std::size_t n_ctx = pos + 1;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::size_t hs = h * hd;
            const T* qh = q_.data() + hs;
            T maxv = std::numeric_limits<T>::lowest();
            for (std::size_t u = 0; u < n_ctx; ++u) {
                const T* ku = kc.data() + u * d + hs;
                T acc = T(0);
                for (std::size_t j = 0; j < hd; ++j) acc += qh[j] * ku[j];
                acc *= scale;
                scratch_[u] = acc;
                if (acc > maxv) maxv = acc;
            }
            T denom = T(0);
            for (std::size_t u = 0; u < n_ctx; ++u) {
                scratch_[u] = std::exp(scratch_[u] - maxv);
                denom += scratch_[u];
            }
            T invd = T(1) / denom;
            T* ch = ctx_.data() + hs;
            std::fill(ch, ch + hd, T(0));
            for (std::size_t u = 0; u < n_ctx; ++u) {
                const T pu = scratch_[u] * invd;
                const T* vu = vc.data() + u * d + hs;
                for (std::size_t j = 0; j < hd; ++j) ch[j] += pu * vu[j];
            }
        }
        matmul_nt(a_.data(), ctx_.data(), w.wo.data(), 1, d, d);
        for (std::size_t i = 0; i < d; ++i) x_[i] += a_[i];

        T inv2_unused;
        layernorm_rows(x_.data(), w.ln2_g.data(), w.ln2_b.data(), 1, d, a_.data(), xhat_.data(),
                       &inv2_unused);
        matmul_nt(z_.data(), a_.data(), w.w1.data(), 1, d, dff);
        for (std::size_t i = 0; i < dff; ++i) g_[i] = gelu(z_[i]);
        matmul_nt(a_.data(), g_.data(), w.w2.data(), 1, dff, d);
        for (std::size_t i = 0; i < d; ++i) x_[i] += a_[i];
    }

    T invf_unused;
    layernorm_rows(x_.data(), p.lnf_g.data(), p.lnf_b.data(), 1, d, a_.data(), xhat_.data(),
                   &invf_unused);
    matmul_nt(logits_.data(), a_.data(), p.unembed.data(), 1, d, cfg.vocab_size);
    ++length_;
    return logits_;
}

namespace {

template <typename T>
TokenId argmax_lowest(const std::vector<T>& v) {
    TokenId best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = static_cast<TokenId>(i);
    }
    return best;
}

} // namespace

template <typename T>
DecodeResult greedy_continue(InferenceSession<T>& session, std::uint32_t max_new,
                             const StopPolicy& stop) {
    require(max_new >= 1, ErrorKind::invalid_argument, "max_new must be >= 1");
    require(session.length() >= 1, ErrorKind::invalid_argument, "decode from empty session");
    DecodeResult out;
    for (;;) {
        TokenId next = argmax_lowest(session.logits());
        out.tokens.push_back(next);
        if (stop.contains(next)) {
            out.stopped = true;
            break;
        }
        if (out.tokens.size() >= max_new) break;
        if (!session.can_append()) {
            out.truncated = true;
            break;
        }
        session.append(next);
    }
    return out;
}

template <typename T>
DecodeResult greedy_decode(const Params<T>& p, TokenView prompt, std::uint32_t max_new,
                           const StopPolicy& stop) {
    require(!prompt.empty(), ErrorKind::invalid_argument, "empty prompt");
    require(prompt.size() <= p.cfg.context_len, ErrorKind::invalid_argument,
            "prompt exceeds context length");
    InferenceSession<T> session(p);
    for (TokenId t : prompt) session.append(t);
    return greedy_continue(session, max_new, stop);
}

TrainResult train_tiny_lm(TokenView corpus_tokens, const ModelConfig& cfg, const TrainConfig& tc,
                          std::uint64_t seed, unsigned workers) {
    cfg.validate();
    require(corpus_tokens.size() >= std::size_t(10) * cfg.context_len, ErrorKind::invalid_argument,
            "corpus must contain at least 10x context_len tokens");
    require(tc.steps >= 1 && tc.batch_size >= 1, ErrorKind::invalid_argument,
            "steps and batch_size must be >= 1");
    for (TokenId t : corpus_tokens)
        require(t < cfg.vocab_size, ErrorKind::invalid_argument, "corpus token out of vocab range");

    const std::size_t window = cfg.context_len;
    const std::size_t n_starts = corpus_tokens.size() - window; // window+1 tokens consumed
    TrainResult result;
    result.params = ParamsF::random(cfg, derive_seed(seed, "init"), tc.init_std);
    ParamsF& params = result.params;

    ParamsF m = ParamsF::zeros(cfg);
    ParamsF v = ParamsF::zeros(cfg);
    std::vector<std::vector<float>*> pt, mt, vt;
    params.for_each_tensor([&](std::vector<float>& t) { pt.push_back(&t); });
    m.for_each_tensor([&](std::vector<float>& t) { mt.push_back(&t); });
    v.for_each_tensor([&](std::vector<float>& t) { vt.push_back(&t); });

    RandomStream order = derive_stream(seed, "train-order");
    std::vector<ParamsF> batch_grads;
    std::vector<double> batch_losses(tc.batch_size, 0.0);
    for (std::uint32_t b = 0; b < tc.batch_size; ++b) batch_grads.push_back(ParamsF::zeros(cfg));

    for (std::uint32_t step = 0; step < tc.steps; ++step) {
        std::vector<std::size_t> starts(tc.batch_size);
        for (auto& s : starts) s = order.index(n_starts);

        parallel_for(tc.batch_size, workers, [&](std::size_t b) {
            ParamsF& g = batch_grads[b];
            g.for_each_tensor([](std::vector<float>& t) { std::fill(t.begin(), t.end(), 0.0f); });
            // every position of the window predicts the next corpus token
            TokenView seq(corpus_tokens.data() + starts[b], window);
            TokenView targets(corpus_tokens.data() + starts[b] + 1, window);
            auto& tape = tape_scratch<float>();
            forward_core(params, seq, nullptr, 0, tape);
            std::vector<float> dlogits;
            double loss = loss_rows(params, tape, 0, targets, &dlogits);
            const double denom = static_cast<double>(window);
            for (auto& x : dlogits) x = static_cast<float>(x / denom);
            backward_core(params, tape, 0, seq, dlogits, window, &g, nullptr);
            batch_losses[b] = loss / denom;
        });

        double step_loss = 0.0;
        for (double l : batch_losses) step_loss += l;
        step_loss /= tc.batch_size;
        require(std::isfinite(step_loss), ErrorKind::numerical,
                "non-finite training loss at step " + std::to_string(step));
        result.losses.push_back(static_cast<float>(step_loss));

        // reduce gradients in batch order, scale by 1/batch
        ParamsF& g0 = batch_grads[0];
        std::vector<std::vector<float>*> gt;
        g0.for_each_tensor([&](std::vector<float>& t) { gt.push_back(&t); });
        for (std::uint32_t b = 1; b < tc.batch_size; ++b) {
            std::vector<std::vector<float>*> gb;
            batch_grads[b].for_each_tensor([&](std::vector<float>& t) { gb.push_back(&t); });
            for (std::size_t i = 0; i < gt.size(); ++i) {
                auto& dst = *gt[i];
                const auto& src = *gb[i];
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            }
        }
        const float inv_batch = 1.0f / static_cast<float>(tc.batch_size);
        double norm_sq = 0.0;
        for (auto* t : gt) {
            for (auto& x : *t) {
                x *= inv_batch;
                norm_sq += static_cast<double>(x) * x;
            }
        }
        if (tc.grad_clip > 0.0f) {
            double norm = std::sqrt(norm_sq);
            if (norm > tc.grad_clip) {
                float s = static_cast<float>(tc.grad_clip / norm);
                for (auto* t : gt)
                    for (auto& x : *t) x *= s;
            }
        }

        float lr = tc.learning_rate;
        if (tc.linear_lr_decay) lr *= 1.0f - static_cast<float>(step) / static_cast<float>(tc.steps);
        const float bc1 = 1.0f - std::pow(tc.beta1, static_cast<float>(step + 1));
        const float bc2 = 1.0f - std::pow(tc.beta2, static_cast<float>(step + 1));
        for (std::size_t i = 0; i < pt.size(); ++i) {
            auto& pv = *pt[i];
            auto& mv = *mt[i];
            auto& vv = *vt[i];
            const auto& gv = *gt[i];
            for (std::size_t j = 0; j < pv.size(); ++j) {
                mv[j] = tc.beta1 * mv[j] + (1.0f - tc.beta1) * gv[j];
                vv[j] = tc.beta2 * vv[j] + (1.0f - tc.beta2) * gv[j] * gv[j];
                float mh = mv[j] / bc1;
                float vh = vv[j] / bc2;
                pv[j] -= lr * mh / (std::sqrt(vh) + tc.adam_eps);
            }
        }
    }

    params.check_finite("after training");
    result.initial_loss = result.losses.front();
    result.final_loss = result.losses.back();
    return result;
}

// explicit instantiations
template struct Params<float>;
template struct Params<double>;
template struct GradMatrix<float>;
template struct GradMatrix<double>;
template class InferenceSession<float>;
template class InferenceSession<double>;
template std::vector<float> forward_logits(const Params<float>&, TokenView);
template std::vector<double> forward_logits(const Params<double>&, TokenView);
template float loss_nll(const Params<float>&, TokenView, TokenView);
template double loss_nll(const Params<double>&, TokenView, TokenView);
template float loss_nll_embedded(const Params<float>&, const std::vector<float>&, std::size_t,
                                 TokenView);
template double loss_nll_embedded(const Params<double>&, const std::vector<double>&, std::size_t,
                                  TokenView);
template GradMatrix<float> onehot_grad(const Params<float>&, TokenView, TokenView);
template GradMatrix<double> onehot_grad(const Params<double>&, TokenView, TokenView);
template DecodeResult greedy_decode(const Params<float>&, TokenView, std::uint32_t,
                                    const StopPolicy&);
template DecodeResult greedy_decode(const Params<double>&, TokenView, std::uint32_t,
                                    const StopPolicy&);
template DecodeResult greedy_continue(InferenceSession<float>&, std::uint32_t, const StopPolicy&);
template DecodeResult greedy_continue(InferenceSession<double>&, std::uint32_t, const StopPolicy&);

} // namespace ap::lm
