#pragma once

// Masked multi-head self-attention with relative position encoding and a
// bounded key/value cache. Attention logits depend on content and on the
// offset i - j only, so cached states can be reused at any absolute position.
// Masking: query i attends to key j iff j <= i and i - j < left_window.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ctt/checkpoint.hpp"
#include "ctt/config.hpp"
#include "ctt/ops.hpp"
#include "ctt/tensor.hpp"

namespace ctt {

struct AttentionParams {
    Tensor wq, wk, wv, wo;  // [dm, dm], stored input-major
    Tensor wr;              // projection of sinusoidal relative encodings, [dm, dm]
    Tensor u, v;            // global content/position bias vectors, [heads, dh]
};

struct LayerNormParams {
    Tensor gain, bias;
};

struct FfnParams {
    Tensor w1, b1;  // [dm, df], [df]
    Tensor w2, b2;  // [df, dm], [dm]
};

struct TransformerLayerParams {
    LayerNormParams ln1, ln2;
    AttentionParams attn;
    FfnParams ffn;
};

// Sinusoidal encodings for relative distances 0..n_dist-1. Constant, shared by
// offline and streaming paths so both see identical values per distance.
inline Tensor relative_encoding(long n_dist, long dm) {
    if (dm % 2 != 0) {
        throw std::invalid_argument("relative_encoding: model_dim must be even");
    }
    Tensor r = Tensor::zeros({n_dist, dm});
    for (long d = 0; d < n_dist; ++d) {
        for (long i = 0; i < dm / 2; ++i) {
            const double inv_freq = std::pow(10000.0, -2.0 * double(i) / double(dm));
            r.data()[size_t(d * dm + 2 * i)] = std::sin(double(d) * inv_freq);
            r.data()[size_t(d * dm + 2 * i + 1)] = std::cos(double(d) * inv_freq);
        }
    }
    return r;
}

// q: [Tq, dm] projected queries; k, v: [Tk, dm] projected keys/values where the
// queries occupy the last Tq key positions (q_offset = Tk - Tq).
inline Tensor rel_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const AttentionParams& p, int heads, int head_dim,
                            long left_window) {
    if (left_window != kUnlimitedWindow && left_window < 1) {
        throw std::invalid_argument("rel_attention: window must be >= 1 or unlimited");
    }
    const long tq = q.dim(0), tk = k.dim(0);
    const long dm = q.dim(1);
    if (k.dim(1) != dm || v.dim(1) != dm || tk < tq) {
        throw std::invalid_argument("rel_attention: inconsistent shapes q " +
                                    shape_str(q.shape()) + " k " + shape_str(k.shape()) +
                                    " v " + shape_str(v.shape()));
    }
    const long q_offset = tk - tq;

    Tensor rel = relative_encoding(tk, dm);
    Tensor rel_proj = matmul(rel, p.wr);  // [tk, dm]

    // additive mask: 0 where attendable, large negative otherwise
    Tensor mask = Tensor::zeros({tq, tk});
    for (long i = 0; i < tq; ++i) {
        for (long j = 0; j < tk; ++j) {
            const long d = q_offset + i - j;
            const bool ok = d >= 0 && (left_window == kUnlimitedWindow || d < left_window);
            if (!ok) mask.data()[size_t(i * tk + j)] = -1e30;
        }
    }

    const double inv_sqrt_dh = 1.0 / std::sqrt(double(head_dim));
    std::vector<Tensor> head_ctx;
    head_ctx.reserve(size_t(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice(q, 1, h * head_dim, head_dim);
        Tensor kh = slice(k, 1, h * head_dim, head_dim);
        Tensor vh = slice(v, 1, h * head_dim, head_dim);
        Tensor rh = slice(rel_proj, 1, h * head_dim, head_dim);
        Tensor uh = slice(p.u, 0, h, 1);  // [1, dh], broadcasts over queries
        Tensor vbias = slice(p.v, 0, h, 1);
        Tensor content = matmul(add(qh, uh), transpose(kh));              // [tq, tk]
        Tensor pos_by_dist = matmul(add(qh, vbias), transpose(rh));       // [tq, tk] dists
        Tensor pos = rel_gather(pos_by_dist, q_offset, tk);               // [tq, tk]
        Tensor logits = add(scale(add(content, pos), inv_sqrt_dh), mask);
        Tensor probs = softmax(logits);
        head_ctx.push_back(matmul(probs, vh));  // [tq, dh]
    }
    Tensor ctx = heads == 1 ? head_ctx[0] : concat(head_ctx, 1);
    return matmul(ctx, p.wo);
}

// Per-layer projected key/value cache, trimmed to the attention window.
struct KvCache {
    Tensor k, v;  // [len, dm] or undefined when empty
    long len = 0;

    void append_and_trim(const Tensor& k_new, const Tensor& v_new, long window) {
        Tensor ka = len == 0 ? k_new : concat({k, k_new}, 0);
        Tensor va = len == 0 ? v_new : concat({v, v_new}, 0);
        long n = ka.dim(0);
        if (window != kUnlimitedWindow && n > window) {
            ka = slice(ka, 0, n - window, window);
            va = slice(va, 0, n - window, window);
            n = window;
        }
        k = ka;
        v = va;
        len = n;
    }
};

// Pre-norm residual layer: x + attn(ln1(x)), then x + ffn(ln2(x)).
// dropout_rng == nullptr disables dropout (inference / evaluation).
namespace detail {

inline Tensor maybe_dropout(const Tensor& x, double rate, Rng* rng) {
    if (rng == nullptr || rate == 0.0) return x;
    return dropout(x, rate, *rng);
}

}  // namespace detail

// Offline form: self-attention over the whole sequence (q_offset = 0).
inline Tensor transformer_layer_offline(const Tensor& x, const TransformerLayerParams& p,
                                        const TransformerSpec& spec, long left_window,
                                        double ln_eps, Rng* dropout_rng = nullptr) {
    Tensor h = layer_norm(x, p.ln1.gain, p.ln1.bias, ln_eps);
    Tensor q = matmul(h, p.attn.wq);
    Tensor k = matmul(h, p.attn.wk);
    Tensor v = matmul(h, p.attn.wv);
    Tensor ctx = rel_attention(q, k, v, p.attn, spec.heads, spec.head_dim, left_window);
    Tensor x2 = add(x, detail::maybe_dropout(ctx, spec.dropout, dropout_rng));
    Tensor h2 = layer_norm(x2, p.ln2.gain, p.ln2.bias, ln_eps);
    Tensor f = add(matmul(relu(add(matmul(h2, p.ffn.w1), p.ffn.b1)), p.ffn.w2), p.ffn.b2);
    return add(x2, detail::maybe_dropout(f, spec.dropout, dropout_rng));
}

// Streaming form: processes new positions against the cache, then appends
// their projections and trims the cache to the window.
inline Tensor transformer_layer_step(const Tensor& x_new, KvCache& cache,
                                     const TransformerLayerParams& p,
                                     const TransformerSpec& spec, long left_window,
                                     double ln_eps) {
    Tensor h = layer_norm(x_new, p.ln1.gain, p.ln1.bias, ln_eps);
    Tensor q = matmul(h, p.attn.wq);
    Tensor k_new = matmul(h, p.attn.wk);
    Tensor v_new = matmul(h, p.attn.wv);
    Tensor k_all = cache.len == 0 ? k_new : concat({cache.k, k_new}, 0);
    Tensor v_all = cache.len == 0 ? v_new : concat({cache.v, v_new}, 0);
    Tensor ctx = rel_attention(q, k_all, v_all, p.attn, spec.heads, spec.head_dim,
                               left_window);
    Tensor x2 = add(x_new, ctx);
    Tensor h2 = layer_norm(x2, p.ln2.gain, p.ln2.bias, ln_eps);
    Tensor f = add(matmul(relu(add(matmul(h2, p.ffn.w1), p.ffn.b1)), p.ffn.w2), p.ffn.b2);
    cache.append_and_trim(k_new, v_new, left_window);
    return add(x2, f);
}

// ---------------------------------------------------------------------------
// Parameter registration / initialization helpers
// ---------------------------------------------------------------------------

namespace init {

inline void xavier(Tensor t, long fan_in, long fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / double(fan_in + fan_out));
    for (auto& v : t.data()) v = rng.uniform(-a, a);
}

inline void ones(Tensor t) {
    for (auto& v : t.data()) v = 1.0;
}

}  // namespace init

inline TransformerLayerParams make_transformer_layer(ParamStore& store,
                                                     const std::string& prefix,
                                                     const TransformerSpec& spec, Rng& rng) {
    const long dm = spec.model_dim, df = spec.ffn_dim;
    TransformerLayerParams p;
    p.ln1.gain = store.add(prefix + ".ln1.g", {dm});
    p.ln1.bias = store.add(prefix + ".ln1.b", {dm});
    p.ln2.gain = store.add(prefix + ".ln2.g", {dm});
    p.ln2.bias = store.add(prefix + ".ln2.b", {dm});
    init::ones(p.ln1.gain);
    init::ones(p.ln2.gain);
    p.attn.wq = store.add(prefix + ".attn.wq", {dm, dm});
    p.attn.wk = store.add(prefix + ".attn.wk", {dm, dm});
    p.attn.wv = store.add(prefix + ".attn.wv", {dm, dm});
    p.attn.wo = store.add(prefix + ".attn.wo", {dm, dm});
    p.attn.wr = store.add(prefix + ".attn.wr", {dm, dm});
    for (auto* t : {&p.attn.wq, &p.attn.wk, &p.attn.wv, &p.attn.wo, &p.attn.wr}) {
        init::xavier(*t, dm, dm, rng);
    }
    p.attn.u = store.add(prefix + ".attn.u", {spec.heads, spec.head_dim});
    p.attn.v = store.add(prefix + ".attn.v", {spec.heads, spec.head_dim});
    p.ffn.w1 = store.add(prefix + ".ffn.w1", {dm, df});
    p.ffn.b1 = store.add(prefix + ".ffn.b1", {df});
    p.ffn.w2 = store.add(prefix + ".ffn.w2", {df, dm});
    p.ffn.b2 = store.add(prefix + ".ffn.b2", {dm});
    init::xavier(p.ffn.w1, dm, df, rng);
    init::xavier(p.ffn.w2, df, dm, rng);
    return p;
}

}  // namespace ctt
