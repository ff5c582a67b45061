#pragma once

// Prediction network: embedding -> linear -> unidirectional Transformer over
// previously emitted non-blank labels. g_u depends only on y_0..y_u, so
// incremental stepping with a key/value cache equals whole-prefix evaluation.
// States are cheap to copy (shared immutable tensors) for beam branching.

#include <stdexcept>
#include <vector>

#include "ctt/attention.hpp"
#include "ctt/checkpoint.hpp"
#include "ctt/config.hpp"
#include "ctt/ops.hpp"

namespace ctt {

struct PredictorParams {
    // Embedding rows: 0 unused (blank is output-only), 1..V labels, V+1 the
    // learned start-of-sentence embedding.
    Tensor embed;           // [V+2, embed_dim]
    Tensor proj_w, proj_b;  // embed_dim -> model_dim
    std::vector<TransformerLayerParams> layers;
};

inline PredictorParams make_predictor(ParamStore& store, const PredictorConfig& cfg,
                                      long embedding_rows, Rng& rng) {
    cfg.validate();
    PredictorParams p;
    p.embed = store.add("pred.embed", {embedding_rows, cfg.embed_dim});
    for (auto& v : p.embed.data()) v = rng.normal(0.0, 0.1);
    p.proj_w = store.add("pred.proj.w", {cfg.embed_dim, cfg.layer.model_dim});
    p.proj_b = store.add("pred.proj.b", {cfg.layer.model_dim});
    init::xavier(p.proj_w, cfg.embed_dim, cfg.layer.model_dim, rng);
    for (int li = 0; li < cfg.n_layers; ++li) {
        p.layers.push_back(
            make_transformer_layer(store, "pred.tf" + std::to_string(li), cfg.layer, rng));
    }
    return p;
}

struct PredictorState {
    std::vector<KvCache> caches;  // one per layer
    long tokens_seen = 0;         // includes the start-of-sentence token
};

inline PredictorState make_predictor_state(const PredictorConfig& cfg) {
    PredictorState st;
    st.caches.resize(size_t(cfg.n_layers));
    return st;
}

// Feeds one token (an embedding row index: label id 1..V, or the SOS row) and
// returns g as a [1, model_dim] tensor. Blank is rejected.
inline Tensor predictor_step(PredictorState& st, long embed_row, const PredictorConfig& cfg,
                             PredictorParams& params) {
    if (embed_row == 0) {
        throw std::invalid_argument("predictor_step: blank is not a valid input label");
    }
    Tensor x = embedding(params.embed, {embed_row});
    x = add(matmul(x, params.proj_w), params.proj_b);
    for (size_t li = 0; li < params.layers.size(); ++li) {
        x = transformer_layer_step(x, st.caches[li], params.layers[li], cfg.layer,
                                   cfg.left_window, cfg.ln_eps);
    }
    ++st.tokens_seen;
    return x;
}

// Whole-prefix evaluation for training: tokens = [SOS, y_1 .. y_U], output
// [U+1, model_dim] where row u is g_u.
inline Tensor predictor_forward(const std::vector<long>& labels, long sos_row,
                                const PredictorConfig& cfg, PredictorParams& params,
                                Rng* dropout_rng = nullptr) {
    std::vector<long> tokens;
    tokens.reserve(labels.size() + 1);
    tokens.push_back(sos_row);
    for (long y : labels) {
        if (y == 0) {
            throw std::invalid_argument("predictor_forward: blank in label sequence");
        }
        tokens.push_back(y);
    }
    Tensor x = embedding(params.embed, tokens);
    x = add(matmul(x, params.proj_w), params.proj_b);
    for (auto& layer : params.layers) {
        x = transformer_layer_offline(x, layer, cfg.layer, cfg.left_window, cfg.ln_eps,
                                      dropout_rng);
    }
    return x;
}

}  // namespace ctt
