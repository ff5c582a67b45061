#pragma once

// Joint network: logits = W2 * relu(W1 * [h_t ; g_u] + b1) + b2 over
// vocab + blank. W1 is applied in two halves so the per-frame encoder part can
// be shared across the whole lattice (and across label steps while decoding).

#include "ctt/checkpoint.hpp"
#include "ctt/config.hpp"
#include "ctt/attention.hpp"
#include "ctt/ops.hpp"

namespace ctt {

struct JointParams {
    Tensor w1, b1;  // [enc_dim + pred_dim, hidden], [hidden]
    Tensor w2, b2;  // [hidden, n_sym], [n_sym]
    long enc_dim = 0, pred_dim = 0;
};

inline JointParams make_joint(ParamStore& store, long enc_dim, long pred_dim, long hidden,
                              long n_sym, Rng& rng) {
    JointParams p;
    p.enc_dim = enc_dim;
    p.pred_dim = pred_dim;
    p.w1 = store.add("joint.w1", {enc_dim + pred_dim, hidden});
    p.b1 = store.add("joint.b1", {hidden});
    p.w2 = store.add("joint.w2", {hidden, n_sym});
    p.b2 = store.add("joint.b2", {n_sym});
    init::xavier(p.w1, enc_dim + pred_dim, hidden, rng);
    init::xavier(p.w2, hidden, n_sym, rng);
    return p;
}

// Encoder-side half of W1, applied once per frame: [n, enc_dim] -> [n, hidden]
inline Tensor joint_enc_proj(const Tensor& enc_rows, const JointParams& p) {
    return matmul(enc_rows, slice(p.w1, 0, 0, p.enc_dim));
}

// Predictor-side half: [m, pred_dim] -> [m, hidden]
inline Tensor joint_pred_proj(const Tensor& pred_rows, const JointParams& p) {
    return matmul(pred_rows, slice(p.w1, 0, p.enc_dim, p.pred_dim));
}

// Single (t, u) pair: both inputs [1, dim] -> [1, n_sym]
inline Tensor joint_logits(const Tensor& enc_proj_row, const Tensor& pred_proj_row,
                           const JointParams& p) {
    Tensor hidden = relu(add(add(enc_proj_row, pred_proj_row), p.b1));
    return add(matmul(hidden, p.w2), p.b2);
}

// Full lattice: enc [T', enc_dim] x pred [U+1, pred_dim] -> [T', U+1, n_sym]
inline Tensor joint_lattice_logits(const Tensor& enc_rows, const Tensor& pred_rows,
                                   const JointParams& p) {
    const long t_len = enc_rows.dim(0);
    const long rows_u = pred_rows.dim(0);
    const long hidden_dim = p.b1.dim(0);
    Tensor he = joint_enc_proj(enc_rows, p);    // [T', H]
    Tensor hp = joint_pred_proj(pred_rows, p);  // [U+1, H]
    Tensor grid = add(reshape(he, {t_len, 1, hidden_dim}), hp);  // [T', U+1, H]
    Tensor hidden = relu(add(grid, p.b1));
    Tensor flat = reshape(hidden, {t_len * rows_u, hidden_dim});
    Tensor logits = add(matmul(flat, p.w2), p.b2);
    return reshape(logits, {t_len, rows_u, p.b2.dim(0)});
}

}  // namespace ctt
