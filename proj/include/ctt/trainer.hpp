#pragma once

// Desk-scale training: NovoGrad with a layer-wise second moment, linear warmup
// plus polynomial decay, a synthetic tone-coded dataset, and the overfit loop.

#include <cmath>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ctt/config.hpp"
#include "ctt/frontend.hpp"
#include "ctt/model.hpp"

namespace ctt {

// Linear warmup from 0 to peak over warmup_steps, then polynomial decay to
// final_lr over decay_steps, constant afterwards.
inline double lr_at(long step, const ScheduleConfig& s) {
    if (step < 0) throw std::invalid_argument("lr_at: step must be >= 0");
    if (step <= s.warmup_steps) {
        return s.warmup_steps == 0 ? s.peak_lr
                                   : s.peak_lr * double(step) / double(s.warmup_steps);
    }
    const long d = step - s.warmup_steps;
    if (d >= s.decay_steps) return s.final_lr;
    const double progress = double(d) / double(s.decay_steps);
    return s.final_lr + (s.peak_lr - s.final_lr) * std::pow(1.0 - progress, s.power);
}

// NovoGrad: per-layer scalar second moment, per-parameter first moment.
//   v <- beta2 * v + (1 - beta2) * ||g||^2
//   m <- beta1 * m + g / (sqrt(v) + eps) + wd * p
//   p <- p - lr * m
class NovoGrad {
  public:
    explicit NovoGrad(OptimConfig cfg) : cfg_(cfg) {}

    // Returns false (and changes nothing) when any gradient is non-finite.
    bool step(ParamStore& store, double lr) {
        for (const auto& [name, t] : store.all()) {
            if (!t.requires_grad()) continue;
            for (double g : t.grad()) {
                if (!std::isfinite(g)) return false;
            }
        }
        for (auto& [name, t] : store.all()) {
            if (!t.requires_grad()) continue;
            Tensor p = t;
            const auto& g = p.grad();
            double sq = 0.0;
            for (double gv : g) sq += gv * gv;
            double& v = v_[name];
            v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * sq;
            auto& m = m_[name];
            if (m.empty()) m.assign(g.size(), 0.0);
            const double denom = std::sqrt(v) + cfg_.eps;
            auto& data = p.data();
            for (size_t i = 0; i < g.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + g[i] / denom + cfg_.weight_decay * data[i];
                data[i] -= lr * m[i];
            }
        }
        ++step_count_;
        return true;
    }

    long step_count() const { return step_count_; }

  private:
    OptimConfig cfg_;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, double> v_;
    long step_count_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic dataset: each character maps to a fixed pure tone segment, so
// character identity is linearly recoverable from the spectrum.
// ---------------------------------------------------------------------------

struct ToyUtterance {
    std::string text;
    std::vector<long> labels;
    std::vector<double> samples;
};

inline double toy_tone_hz(long label_id) { return 350.0 + 160.0 * double(label_id); }

inline std::vector<ToyUtterance> make_toy_dataset(const Vocab& vocab, int n_utts,
                                                  int min_len, int max_len,
                                                  const FrontendConfig& fe, Rng& rng) {
    const int seg_samples = int(std::lround(0.16 * fe.sample_rate));  // 160 ms per char
    const int gap_samples = int(std::lround(0.04 * fe.sample_rate));  // 40 ms silence gap
    std::vector<ToyUtterance> data;
    for (int i = 0; i < n_utts; ++i) {
        ToyUtterance utt;
        const int len = min_len + int(rng.uniform_int(std::uint64_t(max_len - min_len + 1)));
        for (int c = 0; c < len; ++c) {
            const long id = 1 + long(rng.uniform_int(std::uint64_t(vocab.n_labels())));
            utt.labels.push_back(id);
            utt.text += vocab.label(id);
            const double freq = toy_tone_hz(id);
            for (int s = 0; s < seg_samples; ++s) {
                utt.samples.push_back(
                    0.25 * std::sin(2.0 * M_PI * freq * double(s) / fe.sample_rate));
            }
            utt.samples.insert(utt.samples.end(), size_t(gap_samples), 0.0);
        }
        data.push_back(std::move(utt));
    }
    return data;
}

inline Vocab toy_vocab() {
    return Vocab({"a", "b", "c", "d", "e", "f", "g", "h"});
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
    std::vector<double> loss_curve;  // mean nll per optimizer step
    long steps_run = 0;
    bool diverged = false;
    double final_loss = 0.0;
};

// Runs batch_loss + NovoGrad over length-sorted mini-batches. Deterministic
// given the seed; aborts on a non-finite loss.
inline TrainResult train_toy(Model& model, const std::vector<ToyUtterance>& data,
                             const TrainConfig& tcfg, std::ostream* log = nullptr,
                             double stop_below = 0.002) {
    Rng rng(tcfg.seed);
    // featurize once; augmentation (when configured) is applied per epoch
    std::vector<AcousticFrames> base_features;
    for (const auto& utt : data) base_features.push_back(logmel(utt.samples, model.cfg.frontend));

    // length-sorted mini-batches (stable order for determinism)
    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return base_features[a].n_frames < base_features[b].n_frames;
    });
    std::vector<std::vector<size_t>> batches;
    for (size_t i = 0; i < order.size(); i += size_t(tcfg.batch_size)) {
        std::vector<size_t> batch;
        for (size_t j = i; j < std::min(order.size(), i + size_t(tcfg.batch_size)); ++j) {
            batch.push_back(order[j]);
        }
        batches.push_back(std::move(batch));
    }

    NovoGrad opt(tcfg.optim);
    TrainResult result;
    Rng dropout_rng(tcfg.seed ^ 0xd50f0u);
    const bool use_augment = tcfg.augment.noise_std > 0.0 || tcfg.augment.n_freq_masks > 0 ||
                             tcfg.augment.n_time_masks > 0;
    for (long step = 0; step < tcfg.steps; ++step) {
        const auto& batch = batches[size_t(step) % batches.size()];
        std::vector<AcousticFrames> feats;
        std::vector<std::vector<long>> labels;
        for (size_t idx : batch) {
            if (use_augment) {
                AugmentPolicy p = tcfg.augment;
                p.seed = tcfg.seed * 1000003u + std::uint64_t(step) * 131u + idx;
                feats.push_back(augment(base_features[idx], p));
            } else {
                feats.push_back(base_features[idx]);
            }
            labels.push_back(data[idx].labels);
        }
        model.store.zero_grads();
        Tensor loss = batch_loss(model, feats, labels, RunMode::kTrain, &dropout_rng,
                                 tcfg.bn_momentum);
        const double nll = loss.value();
        if (!std::isfinite(nll)) {
            result.diverged = true;
            if (log) *log << "step " << step << ": non-finite loss, aborting\n";
            return result;
        }
        loss.backward();
        opt.step(model.store, lr_at(step + 1, tcfg.schedule));
        result.loss_curve.push_back(nll);
        ++result.steps_run;
        if (log && (step % 50 == 0 || step + 1 == tcfg.steps)) {
            *log << "step " << step << "  nll " << nll << "\n";
        }
        // smoothed early stop once the batch loss settles near zero
        if (long(result.loss_curve.size()) >= 25) {
            double window = 0.0;
            for (size_t i = result.loss_curve.size() - 25; i < result.loss_curve.size(); ++i) {
                window += result.loss_curve[i];
            }
            if (window / 25.0 < stop_below) break;
        }
    }
    if (!result.loss_curve.empty()) result.final_loss = result.loss_curve.back();
    return result;
}

// Mean nll of a dataset under the current parameters (no gradient, no dropout).
inline double dataset_mean_nll(Model& model, const std::vector<ToyUtterance>& data) {
    double total = 0.0;
    for (const auto& utt : data) {
        AcousticFrames f = logmel(utt.samples, model.cfg.frontend);
        Tensor nll = model.utterance_nll(f, utt.labels, RunMode::kInference);
        total += nll.value();
    }
    return total / double(data.size());
}

}  // namespace ctt
