#pragma once

// Configuration surface: frontend, encoder blocks, predictor, joint, decoding
// and training hyperparameters, plus named presets and the vocabulary file.
// Config files are JSON with a schema_version field; schema documented in the
// README.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace ctt {

using json = nlohmann::json;

constexpr int kConfigSchemaVersion = 1;

// Window size for limited left-context attention; kUnlimitedWindow means all
// history is attended.
constexpr long kUnlimitedWindow = -1;

// ---------------------------------------------------------------------------
// Frontend
// ---------------------------------------------------------------------------

struct FrontendConfig {
    int sample_rate = 16000;
    double window_ms = 20.0;
    double hop_ms = 10.0;
    int n_mels = 128;
    int fft_size = 0;  // 0 = next power of two >= window samples
    double log_floor = 1e-10;

    int window_samples() const { return int(std::lround(window_ms * sample_rate / 1000.0)); }
    int hop_samples() const { return int(std::lround(hop_ms * sample_rate / 1000.0)); }
    int effective_fft_size() const {
        if (fft_size > 0) return fft_size;
        int n = 1;
        while (n < window_samples()) n <<= 1;
        return n;
    }

    void validate() const {
        if (!(window_ms >= hop_ms && hop_ms > 0)) {
            throw std::invalid_argument("frontend: requires window >= hop > 0");
        }
        if (n_mels < 1) throw std::invalid_argument("frontend: n_mels must be >= 1");
        if (fft_size != 0 && fft_size < window_samples()) {
            throw std::invalid_argument("frontend: fft_size smaller than window");
        }
    }
};

struct AugmentPolicy {
    double noise_std = 0.0;
    std::string noise_domain = "feature";  // "waveform" reserved, not implemented
    int n_freq_masks = 0;
    int max_freq_width = 0;
    int n_time_masks = 0;
    int max_time_width = 0;
    std::uint64_t seed = 0;

    void validate() const {
        if (max_freq_width < 0 || max_time_width < 0 || n_freq_masks < 0 ||
            n_time_masks < 0) {
            throw std::invalid_argument("augment: mask counts/widths must be >= 0");
        }
        if (noise_domain != "feature") {
            throw std::invalid_argument(
                "augment: only feature-domain noise is implemented (noise_domain: '" +
                noise_domain + "')");
        }
    }
};

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

struct ConvSpec {
    bool two_d = false;   // block 1 convolves over (time, frequency)
    int out_channels = 32;
    int stride_t = 1;     // 1 or 2
    int stride_f = 1;     // 2-D only
    int left_ctx = 2;     // input frames of this layer
    int right_ctx = 0;
    int kernel_f = 3;     // 2-D only

    int kernel_t() const { return left_ctx + right_ctx + 1; }

    void validate() const {
        if (left_ctx < 0 || right_ctx < 0) {
            throw std::invalid_argument("conv: contexts must be >= 0");
        }
        if (stride_t != 1 && stride_t != 2) {
            throw std::invalid_argument("conv: time stride must be 1 or 2");
        }
        if (two_d && (stride_f != 1 && stride_f != 2)) {
            throw std::invalid_argument("conv: frequency stride must be 1 or 2");
        }
        if (two_d && kernel_f < 1) throw std::invalid_argument("conv: kernel_f must be >= 1");
    }
};

struct TransformerSpec {
    int heads = 4;
    int head_dim = 36;
    int model_dim = 144;
    int ffn_dim = 576;
    double dropout = 0.1;

    void validate() const {
        if (heads * head_dim != model_dim) {
            throw std::invalid_argument("transformer: heads * head_dim must equal model_dim");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) {
            throw std::invalid_argument("transformer: dropout must be in [0, 1)");
        }
    }
};

struct BlockConfig {
    std::vector<ConvSpec> convs;  // three per block in the stock layout
    int n_layers = 2;
    TransformerSpec layer;
};

struct EncoderConfig {
    int n_mels = 128;
    int input_hop_ms = 10;
    std::vector<BlockConfig> blocks;
    long left_window = kUnlimitedWindow;  // encoder-output frames
    double bn_eps = 1e-5;
    double ln_eps = 1e-5;
    bool frozen_batch_norm = false;  // train with running stats instead of batch stats

    void validate() const {
        if (blocks.empty()) throw std::invalid_argument("encoder: needs at least one block");
        for (const auto& b : blocks) {
            if (b.convs.empty()) {
                throw std::invalid_argument("encoder: each block needs at least one conv");
            }
            int n_strided = 0;
            for (const auto& c : b.convs) {
                c.validate();
                if (c.stride_t == 2) ++n_strided;
            }
            if (n_strided > 1) {
                throw std::invalid_argument(
                    "encoder: at most one stride-2 time conv per block");
            }
            if (b.n_layers < 0) throw std::invalid_argument("encoder: n_layers must be >= 0");
            b.layer.validate();
        }
        if (left_window != kUnlimitedWindow && left_window < 1) {
            throw std::invalid_argument("encoder: left_window must be >= 1 or unlimited");
        }
    }

    // Total downsampling factor of the conv stacks.
    long downsample_factor() const {
        long f = 1;
        for (const auto& b : blocks) {
            for (const auto& c : b.convs) f *= c.stride_t;
        }
        return f;
    }

    int output_dim() const { return blocks.back().layer.model_dim; }
};

// ---------------------------------------------------------------------------
// Predictor / joint / decode
// ---------------------------------------------------------------------------

struct PredictorConfig {
    int embed_dim = 144;  // output dim of embedding and input linear
    int n_layers = 2;
    TransformerSpec layer;
    long left_window = kUnlimitedWindow;  // tokens
    double ln_eps = 1e-5;

    void validate() const {
        if (embed_dim < 1) throw std::invalid_argument("predictor: embed_dim must be >= 1");
        if (n_layers < 0) throw std::invalid_argument("predictor: n_layers must be >= 0");
        layer.validate();
        if (left_window != kUnlimitedWindow && left_window < 1) {
            throw std::invalid_argument("predictor: left_window must be >= 1 or unlimited");
        }
    }
};

struct JointConfig {
    int hidden = 512;

    void validate() const {
        if (hidden < 1) throw std::invalid_argument("joint: hidden must be >= 1");
    }
};

struct DecodeConfig {
    int beam_width = 4;
    int max_symbols_per_frame = 8;

    void validate() const {
        if (beam_width < 1) throw std::invalid_argument("decode: beam_width must be >= 1");
        if (max_symbols_per_frame < 1) {
            throw std::invalid_argument("decode: max_symbols_per_frame must be >= 1");
        }
    }
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct ScheduleConfig {
    long warmup_steps = 10000;
    double peak_lr = 0.01;
    long decay_steps = 200000;
    double final_lr = 5e-6;
    double power = 2.0;
};

struct OptimConfig {
    double beta1 = 0.95;
    double beta2 = 0.98;
    double weight_decay = 0.0;
    double eps = 1e-8;
};

struct TrainConfig {
    ScheduleConfig schedule;
    OptimConfig optim;
    AugmentPolicy augment;
    int batch_size = 4;
    long steps = 1500;
    std::uint64_t seed = 1;
    double bn_momentum = 0.1;  // running-stat EMA rate in batch-stat mode
};

// ---------------------------------------------------------------------------
// Full model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    FrontendConfig frontend;
    EncoderConfig encoder;
    PredictorConfig predictor;
    JointConfig joint;
    DecodeConfig decode;
    TrainConfig train;

    void validate() const {
        frontend.validate();
        encoder.validate();
        predictor.validate();
        joint.validate();
        decode.validate();
        train.augment.validate();
        if (encoder.n_mels != frontend.n_mels) {
            throw std::invalid_argument("config: encoder.n_mels must match frontend.n_mels");
        }
    }
};

// ---------------------------------------------------------------------------
// JSON (de)serialization
// ---------------------------------------------------------------------------

inline void to_json(json& j, const FrontendConfig& c) {
    j = json{{"sample_rate", c.sample_rate}, {"window_ms", c.window_ms},
             {"hop_ms", c.hop_ms},           {"n_mels", c.n_mels},
             {"fft_size", c.fft_size},       {"log_floor", c.log_floor}};
}
inline void from_json(const json& j, FrontendConfig& c) {
    j.at("sample_rate").get_to(c.sample_rate);
    j.at("window_ms").get_to(c.window_ms);
    j.at("hop_ms").get_to(c.hop_ms);
    j.at("n_mels").get_to(c.n_mels);
    c.fft_size = j.value("fft_size", 0);
    c.log_floor = j.value("log_floor", 1e-10);
}

inline void to_json(json& j, const AugmentPolicy& p) {
    j = json{{"noise_std", p.noise_std},
             {"noise_domain", p.noise_domain},
             {"n_freq_masks", p.n_freq_masks},
             {"max_freq_width", p.max_freq_width},
             {"n_time_masks", p.n_time_masks},
             {"max_time_width", p.max_time_width},
             {"seed", p.seed}};
}
inline void from_json(const json& j, AugmentPolicy& p) {
    p.noise_std = j.value("noise_std", 0.0);
    p.noise_domain = j.value("noise_domain", "feature");
    p.n_freq_masks = j.value("n_freq_masks", 0);
    p.max_freq_width = j.value("max_freq_width", 0);
    p.n_time_masks = j.value("n_time_masks", 0);
    p.max_time_width = j.value("max_time_width", 0);
    p.seed = j.value("seed", std::uint64_t(0));
}

inline void to_json(json& j, const ConvSpec& c) {
    j = json{{"two_d", c.two_d},       {"out_channels", c.out_channels},
             {"stride_t", c.stride_t}, {"stride_f", c.stride_f},
             {"left_ctx", c.left_ctx}, {"right_ctx", c.right_ctx},
             {"kernel_f", c.kernel_f}};
}
inline void from_json(const json& j, ConvSpec& c) {
    c.two_d = j.value("two_d", false);
    j.at("out_channels").get_to(c.out_channels);
    c.stride_t = j.value("stride_t", 1);
    c.stride_f = j.value("stride_f", 1);
    j.at("left_ctx").get_to(c.left_ctx);
    j.at("right_ctx").get_to(c.right_ctx);
    c.kernel_f = j.value("kernel_f", 3);
}

inline void to_json(json& j, const TransformerSpec& s) {
    j = json{{"heads", s.heads},
             {"head_dim", s.head_dim},
             {"model_dim", s.model_dim},
             {"ffn_dim", s.ffn_dim},
             {"dropout", s.dropout}};
}
inline void from_json(const json& j, TransformerSpec& s) {
    j.at("heads").get_to(s.heads);
    j.at("head_dim").get_to(s.head_dim);
    j.at("model_dim").get_to(s.model_dim);
    j.at("ffn_dim").get_to(s.ffn_dim);
    s.dropout = j.value("dropout", 0.0);
}

inline void to_json(json& j, const BlockConfig& b) {
    j = json{{"convs", b.convs}, {"n_layers", b.n_layers}, {"layer", b.layer}};
}
inline void from_json(const json& j, BlockConfig& b) {
    j.at("convs").get_to(b.convs);
    j.at("n_layers").get_to(b.n_layers);
    j.at("layer").get_to(b.layer);
}

inline void to_json(json& j, const EncoderConfig& c) {
    j = json{{"n_mels", c.n_mels},
             {"input_hop_ms", c.input_hop_ms},
             {"blocks", c.blocks},
             {"left_window", c.left_window},
             {"bn_eps", c.bn_eps},
             {"ln_eps", c.ln_eps},
             {"frozen_batch_norm", c.frozen_batch_norm}};
}
inline void from_json(const json& j, EncoderConfig& c) {
    j.at("n_mels").get_to(c.n_mels);
    c.input_hop_ms = j.value("input_hop_ms", 10);
    j.at("blocks").get_to(c.blocks);
    c.left_window = j.value("left_window", kUnlimitedWindow);
    c.bn_eps = j.value("bn_eps", 1e-5);
    c.ln_eps = j.value("ln_eps", 1e-5);
    c.frozen_batch_norm = j.value("frozen_batch_norm", false);
}

inline void to_json(json& j, const PredictorConfig& c) {
    j = json{{"embed_dim", c.embed_dim},
             {"n_layers", c.n_layers},
             {"layer", c.layer},
             {"left_window", c.left_window}};
}
inline void from_json(const json& j, PredictorConfig& c) {
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("n_layers").get_to(c.n_layers);
    j.at("layer").get_to(c.layer);
    c.left_window = j.value("left_window", kUnlimitedWindow);
    c.ln_eps = j.value("ln_eps", 1e-5);
}

inline void to_json(json& j, const JointConfig& c) { j = json{{"hidden", c.hidden}}; }
inline void from_json(const json& j, JointConfig& c) { j.at("hidden").get_to(c.hidden); }

inline void to_json(json& j, const DecodeConfig& c) {
    j = json{{"beam_width", c.beam_width},
             {"max_symbols_per_frame", c.max_symbols_per_frame}};
}
inline void from_json(const json& j, DecodeConfig& c) {
    c.beam_width = j.value("beam_width", 4);
    c.max_symbols_per_frame = j.value("max_symbols_per_frame", 8);
}

inline void to_json(json& j, const ScheduleConfig& c) {
    j = json{{"warmup_steps", c.warmup_steps},
             {"peak_lr", c.peak_lr},
             {"decay_steps", c.decay_steps},
             {"final_lr", c.final_lr},
             {"power", c.power}};
}
inline void from_json(const json& j, ScheduleConfig& c) {
    c.warmup_steps = j.value("warmup_steps", 10000L);
    c.peak_lr = j.value("peak_lr", 0.01);
    c.decay_steps = j.value("decay_steps", 200000L);
    c.final_lr = j.value("final_lr", 5e-6);
    c.power = j.value("power", 2.0);
}

inline void to_json(json& j, const OptimConfig& c) {
    j = json{{"beta1", c.beta1},
             {"beta2", c.beta2},
             {"weight_decay", c.weight_decay},
             {"eps", c.eps}};
}
inline void from_json(const json& j, OptimConfig& c) {
    c.beta1 = j.value("beta1", 0.95);
    c.beta2 = j.value("beta2", 0.98);
    c.weight_decay = j.value("weight_decay", 0.0);
    c.eps = j.value("eps", 1e-8);
}

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"schedule", c.schedule}, {"optim", c.optim},
             {"augment", c.augment},   {"batch_size", c.batch_size},
             {"steps", c.steps},       {"seed", c.seed},
             {"bn_momentum", c.bn_momentum}};
}
inline void from_json(const json& j, TrainConfig& c) {
    if (j.contains("schedule")) j.at("schedule").get_to(c.schedule);
    if (j.contains("optim")) j.at("optim").get_to(c.optim);
    if (j.contains("augment")) j.at("augment").get_to(c.augment);
    c.batch_size = j.value("batch_size", 4);
    c.steps = j.value("steps", 1500L);
    c.seed = j.value("seed", std::uint64_t(1));
    c.bn_momentum = j.value("bn_momentum", 0.1);
}

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"schema_version", kConfigSchemaVersion},
             {"frontend", c.frontend},
             {"encoder", c.encoder},
             {"predictor", c.predictor},
             {"joint", c.joint},
             {"decode", c.decode},
             {"train", c.train}};
}
inline void from_json(const json& j, ModelConfig& c) {
    const int v = j.value("schema_version", 0);
    if (v != kConfigSchemaVersion) {
        throw std::invalid_argument("config: unsupported schema_version " +
                                    std::to_string(v));
    }
    j.at("frontend").get_to(c.frontend);
    j.at("encoder").get_to(c.encoder);
    j.at("predictor").get_to(c.predictor);
    j.at("joint").get_to(c.joint);
    if (j.contains("decode")) j.at("decode").get_to(c.decode);
    if (j.contains("train")) j.at("train").get_to(c.train);
}

inline ModelConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("config: cannot open " + path);
    json j;
    is >> j;
    ModelConfig c = j.get<ModelConfig>();
    c.validate();
    return c;
}

inline void save_config(const ModelConfig& c, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("config: cannot write " + path);
    os << json(c).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

namespace detail {

inline BlockConfig make_block(bool two_d, int channels, int n_layers,
                              const TransformerSpec& layer) {
    BlockConfig b;
    ConvSpec c1, c2, c3;
    c1.two_d = c2.two_d = c3.two_d = two_d;
    c1.out_channels = c2.out_channels = c3.out_channels = channels;
    c2.stride_t = 2;
    if (two_d) c2.stride_f = 2;
    c3.right_ctx = 1;  // the only look-ahead source: one frame at this block's rate
    b.convs = {c1, c2, c3};
    b.n_layers = n_layers;
    b.layer = layer;
    return b;
}

inline ModelConfig desk_scale_config(int l1, int l2, int l3) {
    ModelConfig c;
    c.frontend.n_mels = 128;
    TransformerSpec spec;  // desk-scale defaults; production sizes are a config choice
    spec.heads = 4;
    spec.head_dim = 36;
    spec.model_dim = 144;
    spec.ffn_dim = 576;
    spec.dropout = 0.1;
    c.encoder.n_mels = 128;
    c.encoder.blocks = {make_block(true, 32, l1, spec), make_block(false, 64, l2, spec),
                        make_block(false, 128, l3, spec)};
    c.predictor.embed_dim = 144;
    c.predictor.n_layers = 2;
    c.predictor.layer = spec;
    c.joint.hidden = 512;
    c.train.augment.noise_std = 0.01;
    c.train.augment.n_freq_masks = 2;
    c.train.augment.max_freq_width = 20;
    c.train.augment.n_time_masks = 2;
    c.train.augment.max_time_width = 30;
    return c;
}

}  // namespace detail

inline ModelConfig preset_config(const std::string& name) {
    if (name == "default-2-2-8") return detail::desk_scale_config(2, 2, 8);
    if (name == "dist-2-4-6") return detail::desk_scale_config(2, 4, 6);
    if (name == "dist-2-6-4") return detail::desk_scale_config(2, 6, 4);
    if (name == "dist-2-0-10") return detail::desk_scale_config(2, 0, 10);
    if (name == "dist-0-0-11") return detail::desk_scale_config(0, 0, 11);
    if (name == "hfr") {
        // 40 ms frame rate: stride 1 instead of 2 in the third block's second conv
        ModelConfig c = detail::desk_scale_config(2, 2, 8);
        c.encoder.blocks[2].convs[1].stride_t = 1;
        return c;
    }
    if (name == "fully-causal") {
        ModelConfig c = detail::desk_scale_config(2, 2, 8);
        for (auto& b : c.encoder.blocks) {
            for (auto& conv : b.convs) conv.right_ctx = 0;
        }
        return c;
    }
    if (name == "toy") {
        ModelConfig c;
        c.frontend.n_mels = 40;
        TransformerSpec spec;
        spec.heads = 2;
        spec.head_dim = 24;
        spec.model_dim = 48;
        spec.ffn_dim = 96;
        spec.dropout = 0.0;
        c.encoder.n_mels = 40;
        c.encoder.blocks = {detail::make_block(true, 8, 1, spec),
                            detail::make_block(false, 8, 1, spec),
                            detail::make_block(false, 8, 1, spec)};
        c.encoder.frozen_batch_norm = true;
        c.predictor.embed_dim = 48;
        c.predictor.n_layers = 1;
        c.predictor.layer = spec;
        c.joint.hidden = 64;
        c.train.schedule.warmup_steps = 100;
        c.train.schedule.peak_lr = 0.012;
        c.train.schedule.decay_steps = 2400;
        c.train.schedule.final_lr = 1e-4;
        c.train.batch_size = 10;
        c.train.steps = 3000;
        return c;
    }
    if (name == "micro") {
        // Tiny model (< 2k trainable parameters) for finite-difference sweeps.
        ModelConfig c;
        c.frontend.n_mels = 6;
        TransformerSpec spec;
        spec.heads = 2;
        spec.head_dim = 4;
        spec.model_dim = 8;
        spec.ffn_dim = 12;
        spec.dropout = 0.0;
        c.encoder.n_mels = 6;
        c.encoder.blocks = {detail::make_block(true, 2, 0, spec),
                            detail::make_block(false, 2, 0, spec),
                            detail::make_block(false, 2, 1, spec)};
        c.encoder.frozen_batch_norm = true;
        c.predictor.embed_dim = 8;
        c.predictor.n_layers = 1;
        c.predictor.layer = spec;
        c.joint.hidden = 8;
        return c;
    }
    throw std::invalid_argument("unknown preset '" + name + "'");
}

inline std::vector<std::string> preset_names() {
    return {"default-2-2-8", "dist-2-4-6", "dist-2-6-4", "dist-2-0-10",
            "dist-0-0-11",   "hfr",        "fully-causal", "toy",
            "micro"};
}

// ---------------------------------------------------------------------------
// Vocabulary: one label per line, line 0 reserved for <blank>.
// ---------------------------------------------------------------------------

class Vocab {
  public:
    static constexpr long kBlankId = 0;

    Vocab() = default;

    // labels exclude blank
    explicit Vocab(std::vector<std::string> labels) : labels_(std::move(labels)) {}

    static Vocab load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::invalid_argument("vocab: cannot open " + path);
        std::string line;
        std::vector<std::string> labels;
        bool first = true;
        while (std::getline(is, line)) {
            if (first) {
                if (line != "<blank>") {
                    throw std::invalid_argument("vocab: line 0 must be <blank>, got '" +
                                                line + "'");
                }
                first = false;
                continue;
            }
            labels.push_back(line);
        }
        if (first) throw std::invalid_argument("vocab: empty file " + path);
        return Vocab(std::move(labels));
    }

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) throw std::runtime_error("vocab: cannot write " + path);
        os << "<blank>\n";
        for (const auto& l : labels_) os << l << "\n";
    }

    long size_with_blank() const { return long(labels_.size()) + 1; }  // V + 1
    long n_labels() const { return long(labels_.size()); }             // V

    // Embedding table layout: row 0 unused (blank is output-only), rows 1..V
    // are labels, row V+1 is the learned start-of-sentence embedding.
    long embedding_rows() const { return long(labels_.size()) + 2; }
    long sos_row() const { return long(labels_.size()) + 1; }

    const std::string& label(long id) const {
        if (id <= 0 || id > n_labels()) {
            throw std::out_of_range("vocab: label id " + std::to_string(id) +
                                    " out of range");
        }
        return labels_[size_t(id - 1)];
    }

    long id_of(const std::string& label) const {
        for (size_t i = 0; i < labels_.size(); ++i) {
            if (labels_[i] == label) return long(i) + 1;
        }
        throw std::out_of_range("vocab: unknown label '" + label + "'");
    }

    std::string decode(const std::vector<long>& ids) const {
        std::string out;
        for (long id : ids) out += label(id);
        return out;
    }

    std::vector<long> encode(const std::string& text) const {
        std::vector<long> ids;
        for (char ch : text) ids.push_back(id_of(std::string(1, ch)));
        return ids;
    }

  private:
    std::vector<std::string> labels_;
};

}  // namespace ctt
