#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ctt/encoder.hpp"
#include "ctt/model.hpp"
#include "reference_encoder.hpp"

using namespace ctt;

namespace {

// small three-block config for numeric encoder tests
ModelConfig tiny_config(long left_window = kUnlimitedWindow) {
    ModelConfig c;
    TransformerSpec spec;
    spec.heads = 2;
    spec.head_dim = 4;
    spec.model_dim = 8;
    spec.ffn_dim = 16;
    spec.dropout = 0.0;
    c.frontend.n_mels = 8;
    c.encoder.n_mels = 8;
    c.encoder.blocks = {};
    for (int b = 0; b < 3; ++b) {
        BlockConfig bc;
        ConvSpec c1, c2, c3;
        c1.two_d = c2.two_d = c3.two_d = (b == 0);
        c1.out_channels = c2.out_channels = c3.out_channels = 2;
        c2.stride_t = 2;
        if (b == 0) c2.stride_f = 2;
        c3.right_ctx = 1;
        bc.convs = {c1, c2, c3};
        bc.n_layers = 1;
        bc.layer = spec;
        c.encoder.blocks.push_back(bc);
    }
    c.encoder.left_window = left_window;
    c.encoder.frozen_batch_norm = true;
    c.predictor.embed_dim = 8;
    c.predictor.n_layers = 1;
    c.predictor.layer = spec;
    c.joint.hidden = 8;
    return c;
}

EncoderParams random_encoder(ParamStore& store, const EncoderConfig& cfg,
                             std::uint64_t seed) {
    Rng rng(seed);
    EncoderParams enc = make_encoder(store, cfg, rng);
    // randomize running stats so batch-norm is a non-trivial affine map
    for (auto& block : enc.blocks) {
        for (auto& conv : block.convs) {
            for (auto& v : conv.bn_mean.data()) v = rng.uniform(-0.3, 0.3);
            for (auto& v : conv.bn_var.data()) v = rng.uniform(0.5, 2.0);
            for (auto& v : conv.bn_shift.data()) v = rng.uniform(-0.2, 0.2);
        }
    }
    return enc;
}

AcousticFrames random_frames(long t, long n_mels, std::uint64_t seed) {
    AcousticFrames f;
    f.n_frames = t;
    f.n_mels = n_mels;
    f.data.resize(size_t(t * n_mels));
    Rng rng(seed);
    for (auto& v : f.data) v = rng.uniform(-1.0, 1.0);
    return f;
}

}  // namespace

TEST_CASE("look-ahead accounting") {
    SUBCASE("default preset: 14 input frames = 140 ms") {
        const auto la = lookahead(preset_config("default-2-2-8").encoder);
        CHECK(la.input_frames == 14);
        CHECK(la.ms == 140.0);
    }
    SUBCASE("fully causal preset: 0 ms") {
        const auto la = lookahead(preset_config("fully-causal").encoder);
        CHECK(la.input_frames == 0);
        CHECK(la.ms == 0.0);
    }
    SUBCASE("single block, one conv, right context 2 at input rate: 20 ms") {
        EncoderConfig cfg;
        cfg.n_mels = 8;
        BlockConfig b;
        ConvSpec conv;
        conv.out_channels = 4;
        conv.right_ctx = 2;
        b.convs = {conv};
        b.n_layers = 0;
        b.layer.heads = 1;
        b.layer.head_dim = 8;
        b.layer.model_dim = 8;
        b.layer.ffn_dim = 16;
        b.layer.dropout = 0.0;
        cfg.blocks = {b};
        const auto la = lookahead(cfg);
        CHECK(la.input_frames == 2);
        CHECK(la.ms == 20.0);
    }
    SUBCASE("hfr preset recomputed: stride change shrinks block-3 contribution") {
        const auto la = lookahead(preset_config("hfr").encoder);
        CHECK(la.input_frames == 2 + 4 + 4);
        CHECK(la.ms == 100.0);
    }
    SUBCASE("layer distribution presets share the default conv look-ahead") {
        for (const char* name : {"dist-2-4-6", "dist-2-6-4", "dist-2-0-10", "dist-0-0-11"}) {
            CHECK(lookahead(preset_config(name).encoder).ms == 140.0);
        }
    }
}

TEST_CASE("output length: ceil(T/8) default, ceil(T/4) hfr, for T in [1, 1000]") {
    const EncoderConfig def = preset_config("default-2-2-8").encoder;
    const EncoderConfig hfr = preset_config("hfr").encoder;
    for (long t = 1; t <= 1000; ++t) {
        CHECK(output_length(t, def) == (t + 7) / 8);
        CHECK(output_length(t, hfr) == (t + 3) / 4);
    }
    CHECK(output_length(160, def) == 20);
    CHECK(output_length(1, def) == 1);
    CHECK(output_length(160, hfr) == 40);
    CHECK_THROWS_AS(output_length(0, def), std::invalid_argument);
}

TEST_CASE("latency table covers every layer and ends at the total look-ahead") {
    const EncoderConfig cfg = preset_config("default-2-2-8").encoder;
    const auto rows = latency_table(cfg);
    REQUIRE(rows.size() == 12);  // 9 convs + 3 transformer stacks
    CHECK(rows.back().cum_lookahead_ms == 140.0);
    CHECK(rows[0].input_rate_ms == 10.0);
    CHECK(rows[2].right_ctx == 1);
    CHECK(rows[2].input_rate_ms == 20.0);
    // third block convs run at 40 ms input rate, transformer at 80 ms
    CHECK(rows[8].input_rate_ms == 40.0);
    CHECK(rows[11].input_rate_ms == 80.0);
}

TEST_CASE("offline encoder matches the hand-rolled straight-line reference") {
    ModelConfig cfg = tiny_config();
    ParamStore store;
    EncoderParams enc = random_encoder(store, cfg.encoder, 51);
    const long t_in = 20;
    AcousticFrames frames = random_frames(t_in, cfg.encoder.n_mels, 52);

    Tensor out = encode_offline(frames.to_tensor(), cfg.encoder, enc);
    long t_ref = 0;
    const auto ref = refenc::encode_ref(frames.data, t_in, cfg.encoder, store, &t_ref);

    REQUIRE(out.dim(0) == output_length(t_in, cfg.encoder));
    REQUIRE(t_ref == out.dim(0));
    REQUIRE(long(ref.size()) == out.numel());
    double max_err = 0.0;
    for (long i = 0; i < out.numel(); ++i) {
        max_err = std::max(max_err, std::fabs(out.data()[size_t(i)] - ref[size_t(i)]));
    }
    CHECK(max_err < 1e-10);
}

TEST_CASE("offline encoder matches the reference under a limited window") {
    ModelConfig cfg = tiny_config(2);
    ParamStore store;
    EncoderParams enc = random_encoder(store, cfg.encoder, 53);
    AcousticFrames frames = random_frames(33, cfg.encoder.n_mels, 54);
    Tensor out = encode_offline(frames.to_tensor(), cfg.encoder, enc);
    const auto ref = refenc::encode_ref(frames.data, 33, cfg.encoder, store, nullptr);
    double max_err = 0.0;
    for (long i = 0; i < out.numel(); ++i) {
        max_err = std::max(max_err, std::fabs(out.data()[size_t(i)] - ref[size_t(i)]));
    }
    CHECK(max_err < 1e-10);
}

TEST_CASE("causality: perturbing input beyond the look-ahead leaves earlier output bitwise equal") {
    ModelConfig cfg = tiny_config();
    ParamStore store;
    EncoderParams enc = random_encoder(store, cfg.encoder, 61);
    const long la = lookahead(cfg.encoder).input_frames;
    REQUIRE(la == 14);
    Rng rng(62);
    for (int trial = 0; trial < 20; ++trial) {
        const long t_in = 40 + long(rng.uniform_int(40));
        AcousticFrames frames = random_frames(t_in, cfg.encoder.n_mels, 100 + trial);
        Tensor base = encode_offline(frames.to_tensor(), cfg.encoder, enc);

        const long perturb_at = 16 + long(rng.uniform_int(std::uint64_t(t_in - 16)));
        AcousticFrames poked = frames;
        for (long m = 0; m < poked.n_mels; ++m) poked.at(perturb_at, m) += 10.0;
        Tensor changed = encode_offline(poked.to_tensor(), cfg.encoder, enc);

        // output frame m depends on inputs up to 8*m + 14; frames strictly
        // before (perturb_at - 14)/8 are untouched
        const long safe = (perturb_at - la + 7) / 8;  // first possibly-affected output
        const long dm = base.dim(1);
        for (long m = 0; m < std::min(safe, base.dim(0)); ++m) {
            CHECK(std::memcmp(base.data().data() + m * dm, changed.data().data() + m * dm,
                              size_t(dm) * sizeof(double)) == 0);
        }
    }
}

TEST_CASE("streaming equals offline across chunkings") {
    for (long window : {kUnlimitedWindow, 3L}) {
        ModelConfig cfg = tiny_config(window);
        ParamStore store;
        EncoderParams enc = random_encoder(store, cfg.encoder, 71);
        const long t_in = 50;
        AcousticFrames frames = random_frames(t_in, cfg.encoder.n_mels, 72);
        Tensor offline = encode_offline(frames.to_tensor(), cfg.encoder, enc);

        for (long chunk : {1L, 2L, 7L, 16L, t_in}) {
            EncoderStreamState st = make_stream_state(cfg.encoder);
            std::vector<double> got;
            long emitted = 0;
            for (long pos = 0; pos < t_in; pos += chunk) {
                AcousticFrames part;
                part.n_mels = frames.n_mels;
                part.n_frames = std::min(chunk, t_in - pos);
                part.data.assign(frames.data.begin() + pos * frames.n_mels,
                                 frames.data.begin() + (pos + part.n_frames) * frames.n_mels);
                const bool last = pos + part.n_frames >= t_in;
                for (const auto& row : encode_stream(st, part, cfg.encoder, enc, last)) {
                    got.insert(got.end(), row.begin(), row.end());
                    ++emitted;
                }
            }
            REQUIRE(emitted == offline.dim(0));
            double max_err = 0.0;
            for (long i = 0; i < offline.numel(); ++i) {
                max_err = std::max(max_err,
                                   std::fabs(got[size_t(i)] - offline.data()[size_t(i)]));
            }
            INFO("window ", window, " chunk ", chunk);
            CHECK(max_err < 1e-5);
        }
    }
}

TEST_CASE("look-ahead gating: 7 input frames emit nothing on a fresh stream") {
    ModelConfig cfg = tiny_config();
    ParamStore store;
    EncoderParams enc = random_encoder(store, cfg.encoder, 81);
    EncoderStreamState st = make_stream_state(cfg.encoder);
    AcousticFrames part = random_frames(7, cfg.encoder.n_mels, 82);
    const auto rows = encode_stream(st, part, cfg.encoder, enc, false);
    CHECK(rows.empty());
    // flush drains the full ceil(7/8) = 1 frame
    AcousticFrames empty;
    empty.n_mels = cfg.encoder.n_mels;
    const auto drained = encode_stream(st, empty, cfg.encoder, enc, true);
    CHECK(long(rows.size() + drained.size()) == output_length(7, cfg.encoder));
    CHECK_THROWS_AS(encode_stream(st, empty, cfg.encoder, enc, false),
                    std::invalid_argument);
}

TEST_CASE("cache length is exactly the window after a long stream") {
    ModelConfig cfg = tiny_config(4);
    ParamStore store;
    EncoderParams enc = random_encoder(store, cfg.encoder, 91);
    EncoderStreamState st = make_stream_state(cfg.encoder);
    AcousticFrames frames = random_frames(400, cfg.encoder.n_mels, 92);
    encode_stream(st, frames, cfg.encoder, enc, false);
    for (const auto& block : st.blocks) {
        for (const auto& cache : block.caches) {
            CHECK(cache.len == 4);
        }
    }
    // frame counters track downsampling: block 3 emits once per 8 input frames,
    // gated by the 14-frame look-ahead
    CHECK(st.frames_in == 400);
    CHECK(st.blocks[2].frames_out == (400 - 14 + 7) / 8);
    CHECK(st.frames_out == st.blocks[2].frames_out);
}

TEST_CASE("window >= sequence length equals unlimited attention exactly") {
    ModelConfig unlimited = tiny_config(kUnlimitedWindow);
    ParamStore store;
    EncoderParams enc = random_encoder(store, unlimited.encoder, 95);
    AcousticFrames frames = random_frames(40, unlimited.encoder.n_mels, 96);
    Tensor base = encode_offline(frames.to_tensor(), unlimited.encoder, enc);

    ModelConfig wide = unlimited;
    wide.encoder.left_window = 64;  // > T' at every block rate
    Tensor windowed = encode_offline(frames.to_tensor(), wide.encoder, enc);
    REQUIRE(base.numel() == windowed.numel());
    for (long i = 0; i < base.numel(); ++i) {
        CHECK(base.data()[size_t(i)] == windowed.data()[size_t(i)]);
    }
}

TEST_CASE("relative attention depends on offsets only") {
    const int heads = 2, dh = 3;
    const long dm = heads * dh;
    Rng rng(101);
    ParamStore store;
    TransformerSpec spec;
    spec.heads = heads;
    spec.head_dim = dh;
    spec.model_dim = int(dm);
    spec.ffn_dim = 12;
    spec.dropout = 0.0;
    TransformerLayerParams layer = make_transformer_layer(store, "t", spec, rng);

    auto rand_mat = [&](long r, long c) {
        Tensor t = Tensor::zeros({r, c});
        for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
        return t;
    };

    SUBCASE("identical content at cache offsets 0 and 100 gives identical output") {
        const long window = 5;
        Tensor content_k = rand_mat(window, dm);
        Tensor content_v = rand_mat(window, dm);
        Tensor q = rand_mat(1, dm);

        Tensor out_near = rel_attention(q, content_k, content_v, layer.attn, heads, dh,
                                        window);

        Tensor junk_k = rand_mat(100, dm);
        Tensor junk_v = rand_mat(100, dm);
        Tensor far_k = concat({junk_k, content_k}, 0);
        Tensor far_v = concat({junk_v, content_v}, 0);
        Tensor out_far = rel_attention(q, far_k, far_v, layer.attn, heads, dh, window);

        for (long i = 0; i < dm; ++i) {
            CHECK(std::fabs(out_near.data()[size_t(i)] - out_far.data()[size_t(i)]) < 1e-10);
        }
    }

    SUBCASE("window covering the whole sequence equals unlimited") {
        Tensor q = rand_mat(6, dm);
        Tensor k = rand_mat(6, dm);
        Tensor v = rand_mat(6, dm);
        Tensor a = rel_attention(q, k, v, layer.attn, heads, dh, kUnlimitedWindow);
        Tensor b = rel_attention(q, k, v, layer.attn, heads, dh, 6);
        for (long i = 0; i < a.numel(); ++i) {
            CHECK(a.data()[size_t(i)] == b.data()[size_t(i)]);
        }
    }

    SUBCASE("window < 1 is rejected") {
        Tensor q = rand_mat(2, dm);
        CHECK_THROWS_AS(rel_attention(q, q, q, layer.attn, heads, dh, 0),
                        std::invalid_argument);
    }
}

TEST_CASE("single-head uniform-parameter attention matches a hand softmax oracle") {
    // zero position projection and biases: output reduces to the causal
    // probability-weighted value average with logits q_i . k_j / sqrt(dh)
    const long dm = 2;
    AttentionParams p;
    p.wq = Tensor::zeros({dm, dm});
    p.wk = Tensor::zeros({dm, dm});
    p.wv = Tensor::zeros({dm, dm});
    p.wo = Tensor::from_data({dm, dm}, {1.0, 0.0, 0.0, 1.0});  // identity
    p.wr = Tensor::zeros({dm, dm});
    p.u = Tensor::zeros({1, dm});
    p.v = Tensor::zeros({1, dm});

    Tensor q = Tensor::from_data({3, dm}, {1.0, 0.0, 0.0, 1.0, 1.0, 1.0});
    Tensor k = Tensor::from_data({3, dm}, {0.5, -0.5, 1.0, 0.25, -0.75, 0.5});
    Tensor v = Tensor::from_data({3, dm}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
    Tensor out = rel_attention(q, k, v, p, 1, int(dm), kUnlimitedWindow);

    for (long i = 0; i < 3; ++i) {
        std::vector<double> logits;
        for (long j = 0; j <= i; ++j) {
            double dot = 0.0;
            for (long e = 0; e < dm; ++e) dot += q.at({i, e}) * k.at({j, e});
            logits.push_back(dot / std::sqrt(double(dm)));
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (double l : logits) z += std::exp(l - mx);
        for (long e = 0; e < dm; ++e) {
            double want = 0.0;
            for (long j = 0; j <= i; ++j) {
                want += std::exp(logits[size_t(j)] - mx) / z * v.at({j, e});
            }
            CHECK(out.at({i, e}) == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("encoder rejects mismatched feature width") {
    ModelConfig cfg = tiny_config();
    ParamStore store;
    EncoderParams enc = random_encoder(store, cfg.encoder, 111);
    AcousticFrames bad = random_frames(20, cfg.encoder.n_mels + 1, 112);
    CHECK_THROWS_AS(encode_offline(bad.to_tensor(), cfg.encoder, enc),
                    std::invalid_argument);
}
