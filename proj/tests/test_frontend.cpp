#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "ctt/frontend.hpp"

using namespace ctt;

namespace {

// Independent oracle: mel energies via a direct O(N^2) DFT and a test-local
// triangle bank, sharing no code with the production path.
std::vector<double> dft_mel_energies(const std::vector<double>& frame, int fft_size,
                                     int sample_rate, int n_mels) {
    const int n_bins = fft_size / 2 + 1;
    std::vector<double> power(size_t(n_bins), 0.0);
    for (int k = 0; k < n_bins; ++k) {
        double re = 0.0, im = 0.0;
        for (size_t n = 0; n < frame.size(); ++n) {
            const double hann = 0.5 - 0.5 * std::cos(2.0 * M_PI * double(n) / frame.size());
            const double ang = -2.0 * M_PI * k * double(n) / fft_size;
            re += frame[n] * hann * std::cos(ang);
            im += frame[n] * hann * std::sin(ang);
        }
        power[size_t(k)] = re * re + im * im;
    }
    auto hz2mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
    auto mel2hz = [](double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); };
    const double mel_hi = hz2mel(sample_rate / 2.0);
    std::vector<double> energies(size_t(n_mels), 0.0);
    for (int m = 0; m < n_mels; ++m) {
        const double lo = mel2hz(mel_hi * m / (n_mels + 1));
        const double mid = mel2hz(mel_hi * (m + 1) / (n_mels + 1));
        const double hi = mel2hz(mel_hi * (m + 2) / (n_mels + 1));
        for (int k = 0; k < n_bins; ++k) {
            const double f = double(k) * sample_rate / fft_size;
            double w = 0.0;
            if (f >= lo && f <= mid && mid > lo) w = (f - lo) / (mid - lo);
            else if (f > mid && f <= hi && hi > mid) w = (hi - f) / (hi - mid);
            energies[size_t(m)] += w * power[size_t(k)];
        }
    }
    return energies;
}

std::vector<double> tone(double freq_hz, double seconds, int sample_rate) {
    std::vector<double> s(size_t(seconds * sample_rate));
    for (size_t i = 0; i < s.size(); ++i) {
        s[i] = 0.5 * std::sin(2.0 * M_PI * freq_hz * double(i) / sample_rate);
    }
    return s;
}

}  // namespace

TEST_CASE("silence maps every value to log(log_floor)") {
    FrontendConfig cfg;
    std::vector<double> silence(16000, 0.0);
    AcousticFrames f = logmel(silence, cfg);
    CHECK(f.n_frames == 99);
    CHECK(f.n_mels == 128);
    for (double v : f.data) CHECK(v == doctest::Approx(std::log(cfg.log_floor)).epsilon(1e-15));
}

TEST_CASE("frame count formula: 16000 samples, 320 window, 160 hop -> 99 frames") {
    FrontendConfig cfg;
    CHECK(cfg.window_samples() == 320);
    CHECK(cfg.hop_samples() == 160);
    Rng rng(3);
    std::vector<double> noise(16000);
    for (auto& v : noise) v = rng.uniform(-0.1, 0.1);
    CHECK(logmel(noise, cfg).n_frames == 99);
    CHECK(logmel(std::vector<double>(320, 0.1), cfg).n_frames == 1);
}

TEST_CASE("too-short and wrong-rate waveforms are rejected") {
    FrontendConfig cfg;
    CHECK_THROWS_AS(logmel(std::vector<double>(100, 0.0), cfg), std::invalid_argument);
    CHECK_THROWS_AS(logmel(std::vector<double>(16000, 0.0), cfg, 8000),
                    std::invalid_argument);
}

TEST_CASE("1 kHz tone peaks at the mel bin nearest 1 kHz, against a DFT oracle") {
    FrontendConfig cfg;
    const auto samples = tone(1000.0, 0.2, cfg.sample_rate);
    AcousticFrames f = logmel(samples, cfg);

    // expected bin: center frequency nearest 1 kHz
    MelBank bank = MelBank::build(cfg.n_mels, cfg.effective_fft_size(), cfg.sample_rate);
    long expect_bin = 0;
    for (long m = 1; m < bank.n_mels; ++m) {
        if (std::fabs(bank.center_freqs[size_t(m)] - 1000.0) <
            std::fabs(bank.center_freqs[size_t(expect_bin)] - 1000.0)) {
            expect_bin = m;
        }
    }
    // mid frame, away from edges
    const long t = f.n_frames / 2;
    long got_bin = 0;
    for (long m = 1; m < f.n_mels; ++m) {
        if (f.at(t, m) > f.at(t, got_bin)) got_bin = m;
    }
    CHECK(got_bin == expect_bin);

    // full per-bin agreement with the independent direct-DFT oracle
    std::vector<double> frame(samples.begin() + t * cfg.hop_samples(),
                              samples.begin() + t * cfg.hop_samples() + cfg.window_samples());
    const auto oracle = dft_mel_energies(frame, cfg.effective_fft_size(), cfg.sample_rate,
                                         cfg.n_mels);
    for (long m = 0; m < f.n_mels; ++m) {
        const double want = std::log(std::max(oracle[size_t(m)], cfg.log_floor));
        CHECK(f.at(t, m) == doctest::Approx(want).epsilon(1e-7));
    }
}

TEST_CASE("logmel is shift-covariant by one hop of silence") {
    FrontendConfig cfg;
    Rng rng(9);
    std::vector<double> samples(8000);
    for (auto& v : samples) v = rng.uniform(-0.4, 0.4);
    AcousticFrames base = logmel(samples, cfg);

    std::vector<double> shifted(size_t(cfg.hop_samples()), 0.0);
    shifted.insert(shifted.end(), samples.begin(), samples.end());
    AcousticFrames moved = logmel(shifted, cfg);
    REQUIRE(moved.n_frames == base.n_frames + 1);
    for (long t = 0; t < base.n_frames; ++t) {
        for (long m = 0; m < base.n_mels; ++m) {
            CHECK(std::fabs(moved.at(t + 1, m) - base.at(t, m)) < 1e-10);
        }
    }
}

TEST_CASE("augment: all-zero policy is the identity") {
    Rng rng(11);
    AcousticFrames f;
    f.n_frames = 20;
    f.n_mels = 8;
    f.data.resize(160);
    for (auto& v : f.data) v = rng.uniform(-1.0, 1.0);
    AugmentPolicy policy;
    AcousticFrames out = augment(f, policy);
    CHECK(out.data == f.data);
}

TEST_CASE("augment is deterministic given the seed and never mutates the input") {
    Rng rng(13);
    AcousticFrames f;
    f.n_frames = 30;
    f.n_mels = 12;
    f.data.resize(360);
    for (auto& v : f.data) v = rng.uniform(-1.0, 1.0);
    const std::vector<double> original = f.data;
    AugmentPolicy policy;
    policy.noise_std = 0.1;
    policy.n_freq_masks = 1;
    policy.max_freq_width = 3;
    policy.n_time_masks = 1;
    policy.max_time_width = 5;
    policy.seed = 77;
    AcousticFrames a = augment(f, policy);
    AcousticFrames b = augment(f, policy);
    CHECK(a.data == b.data);
    CHECK(f.data == original);
    CHECK(a.n_frames == f.n_frames);
    CHECK(a.n_mels == f.n_mels);
}

TEST_CASE("one time mask: a single contiguous span equals the mean, rest unchanged") {
    Rng rng(17);
    AcousticFrames f;
    f.n_frames = 40;
    f.n_mels = 6;
    f.data.resize(240);
    for (auto& v : f.data) v = rng.uniform(1.0, 2.0);  // mean is distinguishable
    AugmentPolicy policy;
    policy.n_time_masks = 1;
    policy.max_time_width = 5;
    policy.seed = 5;  // seed chosen to draw a non-zero width
    AcousticFrames out = augment(f, policy);

    double mean_v = 0.0;
    for (double v : f.data) mean_v += v;
    mean_v /= double(f.data.size());

    std::vector<long> masked;
    for (long t = 0; t < out.n_frames; ++t) {
        bool is_mean = true;
        bool unchanged = true;
        for (long m = 0; m < out.n_mels; ++m) {
            if (out.at(t, m) != mean_v) is_mean = false;
            if (out.at(t, m) != f.at(t, m)) unchanged = false;
        }
        if (is_mean) masked.push_back(t);
        else CHECK(unchanged);
    }
    REQUIRE(!masked.empty());
    CHECK(long(masked.size()) <= 5);
    for (size_t i = 1; i < masked.size(); ++i) CHECK(masked[i] == masked[i - 1] + 1);
}

TEST_CASE("augment with zero noise preserves the multiset of unmasked values") {
    Rng rng(19);
    AcousticFrames f;
    f.n_frames = 25;
    f.n_mels = 10;
    f.data.resize(250);
    for (auto& v : f.data) v = rng.uniform(-3.0, 3.0);
    AugmentPolicy policy;
    policy.n_freq_masks = 2;
    policy.max_freq_width = 3;
    policy.n_time_masks = 1;
    policy.max_time_width = 4;
    policy.seed = 23;
    AcousticFrames out = augment(f, policy);
    // every output value either equals its input or the global mean, and the
    // unmasked values keep their multiplicities
    double mean_v = 0.0;
    for (double v : f.data) mean_v += v;
    mean_v /= double(f.data.size());
    std::map<double, long> in_count, out_unmasked;
    for (size_t i = 0; i < out.data.size(); ++i) {
        if (out.data[i] == mean_v && f.data[i] != mean_v) continue;  // masked
        ++out_unmasked[out.data[i]];
        ++in_count[f.data[i]];
    }
    for (const auto& [v, n] : out_unmasked) {
        CHECK(in_count[v] == n);
    }
}

TEST_CASE("wav round trip preserves samples at 16-bit precision") {
    Waveform w;
    w.sample_rate = 16000;
    Rng rng(29);
    w.samples.resize(5000);
    for (auto& v : w.samples) v = rng.uniform(-0.9, 0.9);
    const std::string path = "test_roundtrip.wav";
    write_wav(w, path);
    Waveform r = read_wav(path);
    std::remove(path.c_str());
    REQUIRE(r.samples.size() == w.samples.size());
    CHECK(r.sample_rate == 16000);
    for (size_t i = 0; i < w.samples.size(); ++i) {
        CHECK(std::fabs(r.samples[i] - w.samples[i]) < 1.0 / 32000.0);
    }
}

TEST_CASE("streaming featurizer equals whole-utterance logmel") {
    FrontendConfig cfg;
    cfg.n_mels = 20;
    Rng rng(31);
    std::vector<double> samples(7000);
    for (auto& v : samples) v = rng.uniform(-0.5, 0.5);
    AcousticFrames whole = logmel(samples, cfg);

    StreamingFeaturizer feat(cfg);
    AcousticFrames streamed;
    streamed.n_mels = cfg.n_mels;
    size_t pos = 0;
    Rng chunk_rng(33);
    while (pos < samples.size()) {
        const size_t n = std::min<size_t>(1 + chunk_rng.uniform_int(700), samples.size() - pos);
        AcousticFrames part = feat.push(
            std::vector<double>(samples.begin() + long(pos), samples.begin() + long(pos + n)));
        streamed.data.insert(streamed.data.end(), part.data.begin(), part.data.end());
        streamed.n_frames += part.n_frames;
        pos += n;
    }
    REQUIRE(streamed.n_frames == whole.n_frames);
    for (size_t i = 0; i < whole.data.size(); ++i) {
        CHECK(streamed.data[i] == whole.data[i]);
    }
}
