#pragma once

// Waveform -> 128-dim log-mel features at 10 ms hop, plus training-time
// augmentation (additive Gaussian noise in feature space, time/frequency
// masking; no time-warping). Pure functions, safe to call concurrently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctt/checkpoint.hpp"
#include "ctt/config.hpp"
#include "ctt/tensor.hpp"
#include "ctt/util.hpp"

namespace ctt {

// T x n_mels feature matrix, row-major, 10 ms hop by default.
struct AcousticFrames {
    long n_frames = 0;
    long n_mels = 0;
    std::vector<double> data;

    double at(long t, long m) const { return data[size_t(t * n_mels + m)]; }
    double& at(long t, long m) { return data[size_t(t * n_mels + m)]; }

    Tensor to_tensor() const {
        return Tensor::from_data({n_frames, n_mels}, data);
    }
};

// ---------------------------------------------------------------------------
// WAV I/O (16-bit PCM mono)
// ---------------------------------------------------------------------------

struct Waveform {
    int sample_rate = 16000;
    std::vector<double> samples;  // in [-1, 1]
};

inline Waveform read_wav(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::invalid_argument("wav: cannot open " + path);
    auto read_u32 = [&] {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
               (std::uint32_t(b[3]) << 24);
    };
    auto read_u16 = [&] {
        unsigned char b[2];
        is.read(reinterpret_cast<char*>(b), 2);
        return std::uint16_t(b[0] | (b[1] << 8));
    };
    char tag[4];
    is.read(tag, 4);
    if (!is || std::string(tag, 4) != "RIFF") throw std::invalid_argument("wav: not RIFF: " + path);
    read_u32();  // file size
    is.read(tag, 4);
    if (std::string(tag, 4) != "WAVE") throw std::invalid_argument("wav: not WAVE: " + path);

    Waveform wav;
    int channels = 0, bits = 0;
    bool got_fmt = false, got_data = false;
    while (is.read(tag, 4)) {
        const std::uint32_t chunk_size = read_u32();
        const std::string id(tag, 4);
        if (id == "fmt ") {
            const int fmt = read_u16();
            channels = read_u16();
            wav.sample_rate = int(read_u32());
            read_u32();  // byte rate
            read_u16();  // block align
            bits = read_u16();
            if (fmt != 1) throw std::invalid_argument("wav: only PCM supported: " + path);
            if (chunk_size > 16) is.seekg(chunk_size - 16, std::ios::cur);
            got_fmt = true;
        } else if (id == "data") {
            if (!got_fmt) throw std::invalid_argument("wav: data before fmt: " + path);
            if (channels != 1) throw std::invalid_argument("wav: only mono supported: " + path);
            if (bits != 16) throw std::invalid_argument("wav: only 16-bit PCM supported: " + path);
            const std::uint32_t n = chunk_size / 2;
            wav.samples.resize(n);
            for (std::uint32_t i = 0; i < n; ++i) {
                const std::int16_t s = std::int16_t(read_u16());
                wav.samples[i] = double(s) / 32768.0;
            }
            got_data = true;
        } else {
            is.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
        }
    }
    if (!got_data) throw std::invalid_argument("wav: no data chunk: " + path);
    return wav;
}

inline void write_wav(const Waveform& wav, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("wav: cannot write " + path);
    auto write_u32 = [&](std::uint32_t v) {
        char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
                     char((v >> 24) & 0xff)};
        os.write(b, 4);
    };
    auto write_u16 = [&](std::uint16_t v) {
        char b[2] = {char(v & 0xff), char((v >> 8) & 0xff)};
        os.write(b, 2);
    };
    const std::uint32_t data_bytes = std::uint32_t(wav.samples.size() * 2);
    os.write("RIFF", 4);
    write_u32(36 + data_bytes);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    write_u32(16);
    write_u16(1);  // PCM
    write_u16(1);  // mono
    write_u32(std::uint32_t(wav.sample_rate));
    write_u32(std::uint32_t(wav.sample_rate * 2));
    write_u16(2);
    write_u16(16);
    os.write("data", 4);
    write_u32(data_bytes);
    for (double s : wav.samples) {
        const long q = std::clamp<long>(std::lround(s * 32768.0), -32768, 32767);
        write_u16(std::uint16_t(std::int16_t(q)));
    }
}

// ---------------------------------------------------------------------------
// FFT + mel filterbank
// ---------------------------------------------------------------------------

namespace detail {

// In-place iterative radix-2 FFT on interleaved (re, im).
inline void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
    const size_t n = re.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / double(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (size_t k = 0; k < len / 2; ++k) {
                const size_t a = i + k, b = i + k + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace detail

// Triangular mel bank over [0, sample_rate/2], HTK mel scale. Weights are over
// the n_fft/2 + 1 spectrum bins.
struct MelBank {
    long n_mels = 0;
    long n_bins = 0;
    std::vector<double> weights;       // [n_mels, n_bins]
    std::vector<double> center_freqs;  // Hz, per mel bin

    static MelBank build(int n_mels, int fft_size, int sample_rate) {
        MelBank bank;
        bank.n_mels = n_mels;
        bank.n_bins = fft_size / 2 + 1;
        bank.weights.assign(size_t(bank.n_mels * bank.n_bins), 0.0);
        bank.center_freqs.resize(size_t(n_mels));
        const double mel_hi = detail::hz_to_mel(sample_rate / 2.0);
        std::vector<double> edges(static_cast<size_t>(n_mels) + 2);
        for (long i = 0; i < n_mels + 2; ++i) {
            edges[size_t(i)] = detail::mel_to_hz(mel_hi * double(i) / double(n_mels + 1));
        }
        const double hz_per_bin = double(sample_rate) / double(fft_size);
        for (long m = 0; m < n_mels; ++m) {
            const double lo = edges[size_t(m)], mid = edges[size_t(m) + 1],
                         hi = edges[size_t(m) + 2];
            bank.center_freqs[size_t(m)] = mid;
            for (long k = 0; k < bank.n_bins; ++k) {
                const double f = k * hz_per_bin;
                double w = 0.0;
                if (f >= lo && f <= mid && mid > lo) {
                    w = (f - lo) / (mid - lo);
                } else if (f > mid && f <= hi && hi > mid) {
                    w = (hi - f) / (hi - mid);
                }
                bank.weights[size_t(m * bank.n_bins + k)] = w;
            }
        }
        return bank;
    }
};

namespace detail {
inline std::vector<double> hann_window(int n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        w[size_t(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * double(i) / double(n));
    }
    return w;
}
}  // namespace detail

// Computes one frame's mel energies from window_samples starting at `frame`.
inline void logmel_frame(const double* frame, const std::vector<double>& window,
                         const MelBank& bank, int fft_size, double log_floor,
                         double* out_row) {
    std::vector<double> re(size_t(fft_size), 0.0), im(size_t(fft_size), 0.0);
    for (size_t i = 0; i < window.size(); ++i) re[i] = frame[i] * window[i];
    detail::fft_radix2(re, im);
    std::vector<double> power(static_cast<size_t>(bank.n_bins));
    for (long k = 0; k < bank.n_bins; ++k) {
        power[size_t(k)] = re[size_t(k)] * re[size_t(k)] + im[size_t(k)] * im[size_t(k)];
    }
    for (long m = 0; m < bank.n_mels; ++m) {
        double e = 0.0;
        const double* w = bank.weights.data() + m * bank.n_bins;
        for (long k = 0; k < bank.n_bins; ++k) e += w[k] * power[size_t(k)];
        out_row[m] = std::log(std::max(e, log_floor));
    }
}

inline AcousticFrames logmel(const std::vector<double>& samples, const FrontendConfig& cfg,
                             int input_sample_rate = 16000) {
    cfg.validate();
    if (input_sample_rate != cfg.sample_rate) {
        throw std::invalid_argument("logmel: expected " + std::to_string(cfg.sample_rate) +
                                    " Hz input, got " + std::to_string(input_sample_rate) +
                                    " (no resampling)");
    }
    const int win = cfg.window_samples();
    const int hop = cfg.hop_samples();
    if (long(samples.size()) < win) {
        throw std::invalid_argument("logmel: waveform shorter than one window (" +
                                    std::to_string(samples.size()) + " < " +
                                    std::to_string(win) + " samples)");
    }
    const int fft_size = cfg.effective_fft_size();
    const MelBank bank = MelBank::build(cfg.n_mels, fft_size, cfg.sample_rate);
    const auto window = detail::hann_window(win);
    AcousticFrames frames;
    frames.n_frames = 1 + long(samples.size() - size_t(win)) / hop;
    frames.n_mels = cfg.n_mels;
    frames.data.resize(size_t(frames.n_frames * frames.n_mels));
    for (long t = 0; t < frames.n_frames; ++t) {
        logmel_frame(samples.data() + t * hop, window, bank, fft_size, cfg.log_floor,
                     frames.data.data() + t * frames.n_mels);
    }
    return frames;
}

inline AcousticFrames logmel(const Waveform& wav, const FrontendConfig& cfg) {
    return logmel(wav.samples, cfg, wav.sample_rate);
}

// Feature fixtures reuse the checkpoint container (entry "frames", [T, n_mels]).
inline void save_frames(const AcousticFrames& frames, const std::string& path) {
    Checkpoint ckpt;
    ckpt["frames"] = CheckpointEntry{{frames.n_frames, frames.n_mels}, frames.data};
    save_checkpoint(ckpt, path);
}

inline AcousticFrames load_frames(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    auto it = ckpt.find("frames");
    if (it == ckpt.end() || it->second.shape.size() != 2) {
        throw std::runtime_error("frames fixture: missing [T, n_mels] 'frames' entry in " +
                                 path);
    }
    AcousticFrames f;
    f.n_frames = it->second.shape[0];
    f.n_mels = it->second.shape[1];
    f.data = it->second.data;
    return f;
}

// ---------------------------------------------------------------------------
// Augmentation: Gaussian noise then time/frequency masking.
// ---------------------------------------------------------------------------

inline AcousticFrames augment(const AcousticFrames& frames, const AugmentPolicy& policy) {
    policy.validate();
    AcousticFrames out = frames;
    Rng rng(policy.seed);
    if (policy.noise_std > 0.0) {
        for (auto& v : out.data) v += rng.normal(0.0, policy.noise_std);
    }
    double mask_value = 0.0;
    for (double v : out.data) mask_value += v;
    mask_value /= double(out.data.size());
    for (int i = 0; i < policy.n_freq_masks; ++i) {
        const long max_w = std::min<long>(policy.max_freq_width, out.n_mels);
        const long w = long(rng.uniform_int(std::uint64_t(max_w) + 1));
        if (w == 0) continue;
        const long start = long(rng.uniform_int(std::uint64_t(out.n_mels - w) + 1));
        for (long t = 0; t < out.n_frames; ++t) {
            for (long m = start; m < start + w; ++m) out.at(t, m) = mask_value;
        }
    }
    for (int i = 0; i < policy.n_time_masks; ++i) {
        const long max_w = std::min<long>(policy.max_time_width, out.n_frames);
        const long w = long(rng.uniform_int(std::uint64_t(max_w) + 1));
        if (w == 0) continue;
        const long start = long(rng.uniform_int(std::uint64_t(out.n_frames - w) + 1));
        for (long t = start; t < start + w; ++t) {
            for (long m = 0; m < out.n_mels; ++m) out.at(t, m) = mask_value;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Incremental featurizer for the streaming path. Emits exactly the frames
// logmel() would produce on the concatenated input.
// ---------------------------------------------------------------------------

class StreamingFeaturizer {
  public:
    explicit StreamingFeaturizer(const FrontendConfig& cfg)
        : cfg_(cfg),
          fft_size_(cfg.effective_fft_size()),
          bank_(MelBank::build(cfg.n_mels, fft_size_, cfg.sample_rate)),
          window_(detail::hann_window(cfg.window_samples())) {
        cfg_.validate();
    }

    AcousticFrames push(const std::vector<double>& samples) {
        buffer_.insert(buffer_.end(), samples.begin(), samples.end());
        const long win = cfg_.window_samples();
        const long hop = cfg_.hop_samples();
        AcousticFrames out;
        out.n_mels = cfg_.n_mels;
        while (long(buffer_.size()) - next_start_ >= win) {
            out.data.resize(size_t((out.n_frames + 1) * out.n_mels));
            logmel_frame(buffer_.data() + next_start_, window_, bank_, fft_size_,
                         cfg_.log_floor, out.data.data() + out.n_frames * out.n_mels);
            ++out.n_frames;
            next_start_ += hop;
        }
        // drop samples no future frame can touch
        if (next_start_ > 4096) {
            buffer_.erase(buffer_.begin(), buffer_.begin() + next_start_);
            next_start_ = 0;
        }
        return out;
    }

  private:
    FrontendConfig cfg_;
    int fft_size_;
    MelBank bank_;
    std::vector<double> window_;
    std::vector<double> buffer_;
    long next_start_ = 0;
};

}  // namespace ctt
