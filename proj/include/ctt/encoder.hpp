#pragma once

// Three-block interleaved convolution + unidirectional Transformer audio
// encoder with progressive time downsampling. Convolutions are the only source
// of look-ahead; self-attention is causal. The streaming path replays the
// offline arithmetic frame by frame, so chunked and whole-utterance encoding
// agree.
//
// Conv alignment convention: output frame t is centered on input frame
// t * stride and covers [t*stride - left_ctx, t*stride + right_ctx], zero
// padded at the edges. This yields ceil(T / stride) output frames.

#include <cmath>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctt/attention.hpp"
#include "ctt/checkpoint.hpp"
#include "ctt/config.hpp"
#include "ctt/frontend.hpp"
#include "ctt/ops.hpp"

namespace ctt {

enum class RunMode {
    kInference,  // frozen batch-norm statistics, no dropout
    kTrain,      // batch statistics (unless frozen in config), dropout on
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ConvLayerParams {
    ConvSpec spec;
    long in_channels = 0;
    Tensor w;  // 1-D: [Cout, Kt, Cin]; 2-D: [Cout, Kt, Kf, Cin]
    Tensor b;
    Tensor bn_scale, bn_shift;
    Tensor bn_mean, bn_var;  // running statistics, not trained

    long pad_f_lo() const { return (spec.kernel_f - 1) / 2; }
    long pad_f_hi() const { return (spec.kernel_f - 1) - pad_f_lo(); }
};

struct EncoderBlockParams {
    std::vector<ConvLayerParams> convs;
    Tensor proj_w, proj_b;  // conv output (flattened for block 1) -> model_dim
    std::vector<TransformerLayerParams> layers;
};

struct EncoderParams {
    std::vector<EncoderBlockParams> blocks;
};

namespace detail {

inline ConvLayerParams make_conv_layer(ParamStore& store, const std::string& prefix,
                                       const ConvSpec& spec, long in_channels, Rng& rng) {
    ConvLayerParams p;
    p.spec = spec;
    p.in_channels = in_channels;
    const long cout = spec.out_channels;
    const long kt = spec.kernel_t();
    if (spec.two_d) {
        p.w = store.add(prefix + ".w", {cout, kt, spec.kernel_f, in_channels});
        init::xavier(p.w, kt * spec.kernel_f * in_channels, cout, rng);
    } else {
        p.w = store.add(prefix + ".w", {cout, kt, in_channels});
        init::xavier(p.w, kt * in_channels, cout, rng);
    }
    p.b = store.add(prefix + ".b", {cout});
    p.bn_scale = store.add(prefix + ".bn.scale", {cout});
    p.bn_shift = store.add(prefix + ".bn.shift", {cout});
    init::ones(p.bn_scale);
    p.bn_mean = store.add(prefix + ".bn.mean", {cout}, /*trainable=*/false);
    p.bn_var = store.add(prefix + ".bn.var", {cout}, /*trainable=*/false);
    init::ones(p.bn_var);
    return p;
}

}  // namespace detail

inline EncoderParams make_encoder(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParams enc;
    long in_channels = 1;  // block 1 treats features as one 2-D channel
    long freq = cfg.n_mels;
    long prev_dm = 0;
    for (size_t bi = 0; bi < cfg.blocks.size(); ++bi) {
        const BlockConfig& bc = cfg.blocks[bi];
        EncoderBlockParams block;
        const std::string bp = "enc.b" + std::to_string(bi);
        if (bi > 0) in_channels = prev_dm;
        for (size_t ci = 0; ci < bc.convs.size(); ++ci) {
            const ConvSpec& cs = bc.convs[ci];
            block.convs.push_back(detail::make_conv_layer(
                store, bp + ".conv" + std::to_string(ci), cs, in_channels, rng));
            in_channels = cs.out_channels;
            if (cs.two_d) freq = (freq + cs.stride_f - 1) / cs.stride_f;
        }
        const bool two_d_block = bc.convs.front().two_d;
        const long conv_out = two_d_block ? freq * in_channels : in_channels;
        const long dm = bc.layer.model_dim;
        block.proj_w = store.add(bp + ".proj.w", {conv_out, dm});
        block.proj_b = store.add(bp + ".proj.b", {dm});
        init::xavier(block.proj_w, conv_out, dm, rng);
        for (int li = 0; li < bc.n_layers; ++li) {
            block.layers.push_back(
                make_transformer_layer(store, bp + ".tf" + std::to_string(li), bc.layer, rng));
        }
        prev_dm = dm;
        enc.blocks.push_back(std::move(block));
    }
    return enc;
}

// ---------------------------------------------------------------------------
// Look-ahead / frame-rate accounting
// ---------------------------------------------------------------------------

struct LookaheadResult {
    long input_frames = 0;  // 10 ms input frames
    double ms = 0.0;
};

// Total right receptive field: each conv layer contributes its right context
// scaled by the downsampling factor at that layer's input. Transformer layers
// are causal and contribute nothing.
inline LookaheadResult lookahead(const EncoderConfig& cfg) {
    cfg.validate();
    long factor = 1;
    long frames = 0;
    for (const auto& b : cfg.blocks) {
        for (const auto& c : b.convs) {
            frames += long(c.right_ctx) * factor;
            factor *= c.stride_t;
        }
    }
    return {frames, double(frames) * cfg.input_hop_ms};
}

inline long output_length(long t, const EncoderConfig& cfg) {
    if (t < 1) throw std::invalid_argument("output_length: T must be >= 1");
    long n = t;
    for (const auto& b : cfg.blocks) {
        for (const auto& c : b.convs) {
            n = (n + c.stride_t - 1) / c.stride_t;
        }
    }
    return n;
}

struct LatencyRow {
    std::string name;
    double input_rate_ms = 0;   // duration of one input frame of this layer
    double output_rate_ms = 0;  // duration of one output frame of this layer
    long left_ctx = 0, right_ctx = 0;  // in this layer's input frames
    double left_ms = 0, right_ms = 0;
    long cum_lookahead_frames = 0;  // in 10 ms input frames
    double cum_lookahead_ms = 0;
    long cache_doubles = 0;  // per-session carried state, -1 when unbounded
};

inline std::vector<LatencyRow> latency_table(const EncoderConfig& cfg) {
    cfg.validate();
    std::vector<LatencyRow> rows;
    long factor = 1;
    long cum = 0;
    long freq = cfg.n_mels;
    long in_ch = 1;
    long prev_dm = 0;
    for (size_t bi = 0; bi < cfg.blocks.size(); ++bi) {
        const auto& b = cfg.blocks[bi];
        if (bi > 0) in_ch = prev_dm;
        for (size_t ci = 0; ci < b.convs.size(); ++ci) {
            const auto& c = b.convs[ci];
            LatencyRow r;
            r.name = "block" + std::to_string(bi + 1) + ".conv" + std::to_string(ci + 1);
            r.input_rate_ms = double(factor) * cfg.input_hop_ms;
            r.output_rate_ms = double(factor * c.stride_t) * cfg.input_hop_ms;
            r.left_ctx = c.left_ctx;
            r.right_ctx = c.right_ctx;
            r.left_ms = double(c.left_ctx) * r.input_rate_ms;
            r.right_ms = double(c.right_ctx) * r.input_rate_ms;
            cum += long(c.right_ctx) * factor;
            factor *= c.stride_t;
            r.cum_lookahead_frames = cum;
            r.cum_lookahead_ms = double(cum) * cfg.input_hop_ms;
            const long row_width = c.two_d ? freq * in_ch : in_ch;
            r.cache_doubles = (c.kernel_t() - 1) * row_width;  // pending input rows
            if (c.two_d) freq = (freq + c.stride_f - 1) / c.stride_f;
            in_ch = c.out_channels;
            rows.push_back(r);
        }
        if (b.n_layers > 0) {
            LatencyRow r;
            r.name = "block" + std::to_string(bi + 1) + ".transformer x" +
                     std::to_string(b.n_layers);
            r.input_rate_ms = double(factor) * cfg.input_hop_ms;
            r.output_rate_ms = r.input_rate_ms;
            r.cum_lookahead_frames = cum;
            r.cum_lookahead_ms = double(cum) * cfg.input_hop_ms;
            if (cfg.left_window == kUnlimitedWindow) {
                r.cache_doubles = -1;
            } else {
                r.cache_doubles =
                    2L * cfg.left_window * b.layer.model_dim * b.n_layers;
            }
            rows.push_back(r);
        }
        prev_dm = b.layer.model_dim;
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Offline encoding
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor conv_bn_relu(const Tensor& x, ConvLayerParams& p, RunMode mode,
                           bool frozen_bn, double bn_eps, double bn_momentum) {
    const ConvSpec& s = p.spec;
    Tensor y;
    if (s.two_d) {
        y = conv2d(x, p.w, p.b, s.stride_t, s.stride_f, s.left_ctx, s.right_ctx,
                   p.pad_f_lo(), p.pad_f_hi());
    } else {
        y = conv1d(x, p.w, p.b, s.stride_t, s.left_ctx, s.right_ctx);
    }
    if (mode == RunMode::kTrain && !frozen_bn) {
        std::vector<double> batch_mean, batch_var;
        y = batch_norm_train(y, p.bn_scale, p.bn_shift, bn_eps, &batch_mean, &batch_var);
        // running-stat EMA for the streaming/inference path
        for (long i = 0; i < p.bn_mean.numel(); ++i) {
            p.bn_mean.data()[size_t(i)] =
                (1.0 - bn_momentum) * p.bn_mean.data()[size_t(i)] +
                bn_momentum * batch_mean[size_t(i)];
            p.bn_var.data()[size_t(i)] = (1.0 - bn_momentum) * p.bn_var.data()[size_t(i)] +
                                         bn_momentum * batch_var[size_t(i)];
        }
    } else {
        y = batch_norm_inference(y, p.bn_mean.data(), p.bn_var.data(), p.bn_scale,
                                 p.bn_shift, bn_eps);
    }
    return relu(y);
}

}  // namespace detail

// frames: [T, n_mels] -> [T', model_dim]. Deterministic in inference mode.
inline Tensor encode_offline(const Tensor& frames, const EncoderConfig& cfg,
                             EncoderParams& params, RunMode mode = RunMode::kInference,
                             Rng* dropout_rng = nullptr, double bn_momentum = 0.1) {
    if (frames.rank() != 2 || frames.dim(1) != cfg.n_mels) {
        throw std::invalid_argument("encode_offline: expected [T, " +
                                    std::to_string(cfg.n_mels) + "] features, got " +
                                    shape_str(frames.shape()));
    }
    Rng* drop = mode == RunMode::kTrain ? dropout_rng : nullptr;
    Tensor h = frames;
    for (size_t bi = 0; bi < cfg.blocks.size(); ++bi) {
        const BlockConfig& bc = cfg.blocks[bi];
        EncoderBlockParams& bp = params.blocks[bi];
        const bool two_d = bc.convs.front().two_d;
        if (two_d) h = reshape(h, {h.dim(0), h.dim(1), 1});
        for (auto& conv : bp.convs) {
            h = detail::conv_bn_relu(h, conv, mode, cfg.frozen_batch_norm, cfg.bn_eps,
                                     bn_momentum);
        }
        if (two_d) h = reshape(h, {h.dim(0), h.dim(1) * h.dim(2)});
        h = add(matmul(h, bp.proj_w), bp.proj_b);
        for (auto& layer : bp.layers) {
            h = transformer_layer_offline(h, layer, bc.layer, cfg.left_window, cfg.ln_eps,
                                          drop);
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Streaming encoding
// ---------------------------------------------------------------------------

// Pending-input ring for one conv layer. Rows are this layer's input frames
// (flattened [F, Cin] for 2-D layers). Output t is emitted once input frame
// t*stride + right_ctx has arrived, or at flush with zero padding.
struct ConvStreamState {
    std::deque<std::vector<double>> rows;  // buffered input frames
    long buf_start = 0;                    // absolute index of rows.front()
    long received = 0;                     // total input frames seen
    long emitted = 0;                      // total output frames produced
};

struct EncoderStreamState {
    struct Block {
        std::vector<ConvStreamState> convs;
        std::vector<KvCache> caches;
        long frames_out = 0;  // absolute frame counter at this block's rate
    };
    std::vector<Block> blocks;
    long frames_in = 0;
    long frames_out = 0;
    bool flushed = false;
};

inline EncoderStreamState make_stream_state(const EncoderConfig& cfg) {
    EncoderStreamState st;
    st.blocks.resize(cfg.blocks.size());
    for (size_t bi = 0; bi < cfg.blocks.size(); ++bi) {
        st.blocks[bi].convs.resize(cfg.blocks[bi].convs.size());
        st.blocks[bi].caches.resize(size_t(cfg.blocks[bi].n_layers));
    }
    return st;
}

namespace detail {

// Pushes new rows into one streaming conv layer and emits every output frame
// whose window is complete (or forced complete at flush). The window is
// materialized with explicit zero rows so the accumulation matches the offline
// kernel bit for bit.
inline std::vector<std::vector<double>> conv_stream_push(
    ConvStreamState& st, ConvLayerParams& p, const std::vector<std::vector<double>>& rows,
    bool flush, long freq_in, double bn_eps) {
    const ConvSpec& s = p.spec;
    const long row_width = s.two_d ? freq_in * p.in_channels : p.in_channels;
    for (const auto& r : rows) {
        if (long(r.size()) != row_width) {
            throw std::logic_error("conv_stream_push: row width mismatch");
        }
        st.rows.push_back(r);
        ++st.received;
    }
    std::vector<std::vector<double>> out;
    const long kt = s.kernel_t();
    while (true) {
        const long t = st.emitted;
        const long needed = t * s.stride_t + s.right_ctx;  // last input frame of window
        if (needed >= st.received && !flush) break;
        if (t * s.stride_t >= st.received) break;  // no center frame: done even at flush
        // assemble the window [t*stride - left : t*stride + right], zeros outside
        Tensor win;
        if (s.two_d) {
            win = Tensor::zeros({kt, freq_in, p.in_channels});
        } else {
            win = Tensor::zeros({kt, p.in_channels});
        }
        for (long kk = 0; kk < kt; ++kk) {
            const long it = t * s.stride_t - s.left_ctx + kk;
            if (it < st.buf_start || it >= st.received) continue;
            const auto& src = st.rows[size_t(it - st.buf_start)];
            std::copy(src.begin(), src.end(), win.data().begin() + kk * row_width);
        }
        Tensor y;
        if (s.two_d) {
            y = conv2d(win, p.w, p.b, s.stride_t, s.stride_f, 0, 0, p.pad_f_lo(),
                       p.pad_f_hi());
        } else {
            y = conv1d(win, p.w, p.b, s.stride_t, 0, 0);
        }
        y = batch_norm_inference(y, p.bn_mean.data(), p.bn_var.data(), p.bn_scale,
                                 p.bn_shift, bn_eps);
        y = relu(y);
        out.push_back(y.data());
        ++st.emitted;
        // retire rows older than the next window's left edge
        const long keep_from = (st.emitted) * s.stride_t - s.left_ctx;
        while (st.buf_start < keep_from && !st.rows.empty()) {
            st.rows.pop_front();
            ++st.buf_start;
        }
    }
    return out;
}

}  // namespace detail

// Feeds a chunk of input frames (possibly empty) through the streaming
// encoder; with flush=true the conv stacks drain with zero right padding so
// the total output equals the offline length. Returns newly emitted encoder
// frames as [m, model_dim] row data.
inline std::vector<std::vector<double>> encode_stream(EncoderStreamState& st,
                                                      const AcousticFrames& chunk,
                                                      const EncoderConfig& cfg,
                                                      EncoderParams& params,
                                                      bool flush = false) {
    if (st.flushed) {
        throw std::invalid_argument("encode_stream: stream already flushed");
    }
    if (chunk.n_frames > 0 && chunk.n_mels != cfg.n_mels) {
        throw std::invalid_argument("encode_stream: chunk has " +
                                    std::to_string(chunk.n_mels) + " mels, config wants " +
                                    std::to_string(cfg.n_mels));
    }
    st.frames_in += chunk.n_frames;
    std::vector<std::vector<double>> rows;
    for (long t = 0; t < chunk.n_frames; ++t) {
        rows.emplace_back(chunk.data.begin() + t * chunk.n_mels,
                          chunk.data.begin() + (t + 1) * chunk.n_mels);
    }
    long freq = cfg.n_mels;
    for (size_t bi = 0; bi < cfg.blocks.size(); ++bi) {
        const BlockConfig& bc = cfg.blocks[bi];
        EncoderBlockParams& bp = params.blocks[bi];
        auto& bst = st.blocks[bi];
        long freq_in = freq;
        for (size_t ci = 0; ci < bp.convs.size(); ++ci) {
            rows = detail::conv_stream_push(bst.convs[ci], bp.convs[ci], rows, flush,
                                            freq_in, cfg.bn_eps);
            if (bp.convs[ci].spec.two_d) {
                freq_in = (freq_in + bp.convs[ci].spec.stride_f - 1) /
                          bp.convs[ci].spec.stride_f;
            }
        }
        freq = freq_in;
        if (!rows.empty()) {
            // project and run the block's transformer layers on the new frames
            const long m = long(rows.size());
            const long width = long(rows[0].size());
            Tensor x = Tensor::zeros({m, width});
            for (long i = 0; i < m; ++i) {
                std::copy(rows[size_t(i)].begin(), rows[size_t(i)].end(),
                          x.data().begin() + i * width);
            }
            x = add(matmul(x, bp.proj_w), bp.proj_b);
            for (size_t li = 0; li < bp.layers.size(); ++li) {
                x = transformer_layer_step(x, bst.caches[li], bp.layers[li], bc.layer,
                                           cfg.left_window, cfg.ln_eps);
            }
            bst.frames_out += m;
            rows.clear();
            for (long i = 0; i < m; ++i) {
                rows.emplace_back(x.data().begin() + i * x.dim(1),
                                  x.data().begin() + (i + 1) * x.dim(1));
            }
        }
    }
    if (flush) st.flushed = true;
    st.frames_out += long(rows.size());
    return rows;
}

}  // namespace ctt
