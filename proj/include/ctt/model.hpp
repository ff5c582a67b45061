#pragma once

// Full transducer model: parameter construction, checkpoint round-trip, the
// training loss (lattice assembly + forward-backward), and decoding sessions
// over streaming or whole-utterance input.

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctt/config.hpp"
#include "ctt/decoder.hpp"
#include "ctt/encoder.hpp"
#include "ctt/frontend.hpp"
#include "ctt/joint.hpp"
#include "ctt/loss.hpp"
#include "ctt/predictor.hpp"

namespace ctt {

struct Model {
    ModelConfig cfg;
    Vocab vocab;
    ParamStore store;
    EncoderParams encoder;
    PredictorParams predictor;
    JointParams joint;

    Model(ModelConfig config, Vocab vocabulary, std::uint64_t seed = 7)
        : cfg(std::move(config)), vocab(std::move(vocabulary)) {
        cfg.validate();
        Rng rng(seed);
        encoder = make_encoder(store, cfg.encoder, rng);
        predictor = make_predictor(store, cfg.predictor, vocab.embedding_rows(), rng);
        joint = make_joint(store, cfg.encoder.output_dim(), cfg.predictor.layer.model_dim,
                           cfg.joint.hidden, vocab.size_with_blank(), rng);
    }

    long n_trainable_params() const { return store.total_trainable(); }

    void save(const std::string& path) const { save_checkpoint(store.to_checkpoint(), path); }
    void load(const std::string& path) { store.load(load_checkpoint(path)); }

    Tensor encode(const AcousticFrames& frames, RunMode mode = RunMode::kInference,
                  Rng* dropout_rng = nullptr, double bn_momentum = 0.1) {
        return encode_offline(frames.to_tensor(), cfg.encoder, encoder, mode, dropout_rng,
                              bn_momentum);
    }

    // [T', U+1, V+1] normalized log-distributions for one utterance
    Tensor lattice_logprobs(const Tensor& enc_out, const std::vector<long>& labels,
                            Rng* dropout_rng = nullptr) {
        Tensor g = predictor_forward(labels, vocab.sos_row(), cfg.predictor, predictor,
                                     dropout_rng);
        return log_softmax(joint_lattice_logits(enc_out, g, joint));
    }

    Tensor utterance_nll(const AcousticFrames& frames, const std::vector<long>& labels,
                         RunMode mode = RunMode::kTrain, Rng* dropout_rng = nullptr,
                         double bn_momentum = 0.1) {
        Tensor enc_out = encode(frames, mode, dropout_rng, bn_momentum);
        Tensor lp = lattice_logprobs(enc_out, labels, dropout_rng);
        return transducer_nll(lp, labels);
    }
};

// Mean loss over a batch of utterances; per-utterance lattices are built by
// evaluating the joint over all (t, u) and reduced in a fixed order.
inline Tensor batch_loss(Model& model, const std::vector<AcousticFrames>& features,
                         const std::vector<std::vector<long>>& labels,
                         RunMode mode = RunMode::kTrain, Rng* dropout_rng = nullptr,
                         double bn_momentum = 0.1) {
    if (features.size() != labels.size()) {
        throw std::invalid_argument("batch_loss: " + std::to_string(features.size()) +
                                    " feature sets vs " + std::to_string(labels.size()) +
                                    " label sequences");
    }
    if (features.empty()) throw std::invalid_argument("batch_loss: empty batch");
    Tensor total;
    for (size_t i = 0; i < features.size(); ++i) {
        Tensor nll =
            model.utterance_nll(features[i], labels[i], mode, dropout_rng, bn_momentum);
        total = i == 0 ? nll : add(total, nll);
    }
    return scale(total, 1.0 / double(features.size()));
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

// Scorer backed by the model's prediction and joint networks. Frames carry the
// precomputed encoder-side joint projection, so label steps only pay for the
// predictor-side half.
class ModelScorer {
  public:
    struct State {
        PredictorState pred;
        Tensor g_proj;  // [1, hidden]: predictor-side joint projection
    };
    using Frame = Tensor;  // [1, hidden]: encoder-side joint projection

    explicit ModelScorer(Model& model) : model_(model) {}

    State initial_state() {
        State st;
        st.pred = make_predictor_state(model_.cfg.predictor);
        Tensor g = predictor_step(st.pred, model_.vocab.sos_row(), model_.cfg.predictor,
                                  model_.predictor);
        st.g_proj = joint_pred_proj(g, model_.joint);
        return st;
    }

    State advance(const State& state, long label) {
        State st = state;  // caches share immutable tensors, copies are cheap
        Tensor g = predictor_step(st.pred, label, model_.cfg.predictor, model_.predictor);
        st.g_proj = joint_pred_proj(g, model_.joint);
        return st;
    }

    std::vector<double> log_probs(const State& state, const Frame& frame) {
        Tensor logits = joint_logits(frame, state.g_proj, model_.joint);
        return log_softmax(logits).data();
    }

    Frame make_frame(const Tensor& enc_row) { return joint_enc_proj(enc_row, model_.joint); }

  private:
    Model& model_;
};

using ModelHypothesis = Hypothesis<ModelScorer>;

// One live decoding stream: encoder state plus active hypotheses. Sessions are
// independent; each owns its state.
class DecodeSession {
  public:
    DecodeSession(Model& model, int beam_width, int max_symbols_per_frame)
        : model_(model),
          scorer_(model),
          enc_state_(make_stream_state(model.cfg.encoder)),
          beam_width_(beam_width),
          max_symbols_(max_symbols_per_frame) {
        hyps_.push_back(ModelHypothesis{{}, 0.0, scorer_.initial_state()});
    }

    // Feeds a chunk of acoustic frames; returns the number of encoder frames
    // consumed by the decoder during this call.
    long push(const AcousticFrames& chunk, bool flush = false) {
        const auto rows = encode_stream(enc_state_, chunk, model_.cfg.encoder,
                                        model_.encoder, flush);
        best_rewritten_ = false;
        const std::vector<long> prev_best = hyps_.front().labels;
        for (const auto& row : rows) {
            Tensor enc_row = Tensor::from_data({1, long(row.size())}, row);
            ModelScorer::Frame frame = scorer_.make_frame(enc_row);
            hyps_ = beam_frame(scorer_, frame, std::move(hyps_), beam_width_, max_symbols_);
            ++frames_decoded_;
        }
        const std::vector<long>& now = hyps_.front().labels;
        if (now.size() < prev_best.size() ||
            !std::equal(prev_best.begin(), prev_best.end(), now.begin())) {
            best_rewritten_ = true;
        }
        return long(rows.size());
    }

    const ModelHypothesis& best() const { return hyps_.front(); }
    const std::vector<ModelHypothesis>& hypotheses() const { return hyps_; }
    long frames_decoded() const { return frames_decoded_; }
    // true when the last push replaced the best hypothesis with a non-extension
    bool best_rewritten() const { return best_rewritten_; }
    std::string transcript() const { return model_.vocab.decode(hyps_.front().labels); }

  private:
    Model& model_;
    ModelScorer scorer_;
    EncoderStreamState enc_state_;
    std::vector<ModelHypothesis> hyps_;
    int beam_width_;
    int max_symbols_;
    long frames_decoded_ = 0;
    bool best_rewritten_ = false;
};

// Whole-utterance decode through the offline encoder; returns the final beam
// ranked best-first.
inline std::vector<ModelHypothesis> decode_offline_nbest(Model& model,
                                                         const AcousticFrames& frames,
                                                         int beam_width,
                                                         int max_symbols_per_frame) {
    Tensor enc_out = model.encode(frames, RunMode::kInference);
    ModelScorer scorer(model);
    std::vector<ModelHypothesis> hyps{ModelHypothesis{{}, 0.0, scorer.initial_state()}};
    for (long t = 0; t < enc_out.dim(0); ++t) {
        Tensor enc_row = slice(enc_out, 0, t, 1);
        ModelScorer::Frame frame = scorer.make_frame(enc_row);
        hyps = beam_frame(scorer, frame, std::move(hyps), beam_width, max_symbols_per_frame);
    }
    return hyps;
}

inline ModelHypothesis decode_offline(Model& model, const AcousticFrames& frames,
                                      int beam_width, int max_symbols_per_frame) {
    return decode_offline_nbest(model, frames, beam_width, max_symbols_per_frame).front();
}

}  // namespace ctt
