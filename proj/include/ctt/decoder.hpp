#pragma once

// Streaming greedy and beam-search transducer decoding, templated on a scorer:
//
//   struct Scorer {
//     using State = ...;                       // cheap to copy
//     using Frame = ...;                       // one encoder frame's context
//     State initial_state();
//     State advance(const State&, long label); // label in 1..V
//     std::vector<double> log_probs(const State&, const Frame&);  // size V+1
//   };
//
// Per encoder frame the beam expands each hypothesis with blank (finalizing it
// for the frame) and its top-W label extensions, merges hypotheses with equal
// label sequences by log-add-exp, and keeps the top W. Ties break toward lower
// label indices / lexicographically smaller sequences, so decoding is
// deterministic. beam_width == 1 runs the greedy rule exactly.

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "ctt/util.hpp"

namespace ctt {

template <class Scorer>
struct Hypothesis {
    std::vector<long> labels;  // blank never appears
    double score = 0.0;        // sum of chosen step log-probabilities
    typename Scorer::State state;
};

namespace detail {

template <class S>
bool hyp_rank_less(const Hypothesis<S>& a, const Hypothesis<S>& b) {
    if (a.score != b.score) return a.score > b.score;  // higher score first
    return std::lexicographical_compare(a.labels.begin(), a.labels.end(), b.labels.begin(),
                                        b.labels.end());
}

// merge equal label sequences by log-add-exp of scores (states are equivalent
// for equal sequences)
template <class S>
void merge_by_labels(std::vector<Hypothesis<S>>& hyps) {
    std::sort(hyps.begin(), hyps.end(),
              [](const Hypothesis<S>& a, const Hypothesis<S>& b) {
                  return a.labels < b.labels;
              });
    std::vector<Hypothesis<S>> merged;
    for (auto& h : hyps) {
        if (!merged.empty() && merged.back().labels == h.labels) {
            merged.back().score = log_add_exp(merged.back().score, h.score);
        } else {
            merged.push_back(std::move(h));
        }
    }
    hyps = std::move(merged);
}

}  // namespace detail

// Greedy rule for one frame: follow the argmax while it names a label and the
// per-frame emission budget lasts; a blank argmax adds its log-prob and ends
// the frame, an exhausted budget ends the frame without a blank score.
template <class Scorer>
Hypothesis<Scorer> greedy_step(Scorer& scorer, const typename Scorer::Frame& frame,
                               Hypothesis<Scorer> hyp, int max_symbols) {
    if (max_symbols < 1) throw std::invalid_argument("greedy_step: max_symbols must be >= 1");
    int emitted = 0;
    while (emitted < max_symbols) {
        const std::vector<double> lp = scorer.log_probs(hyp.state, frame);
        long best = 0;
        for (long k = 1; k < long(lp.size()); ++k) {
            if (lp[size_t(k)] > lp[size_t(best)]) best = k;  // ties keep lower index
        }
        if (best == 0) {
            hyp.score += lp[0];
            return hyp;
        }
        hyp.labels.push_back(best);
        hyp.score += lp[size_t(best)];
        hyp.state = scorer.advance(hyp.state, best);
        ++emitted;
    }
    return hyp;
}

template <class Scorer>
std::vector<Hypothesis<Scorer>> beam_frame(Scorer& scorer,
                                           const typename Scorer::Frame& frame,
                                           std::vector<Hypothesis<Scorer>> hyps,
                                           int beam_width, int max_symbols) {
    if (beam_width < 1) throw std::invalid_argument("beam_frame: beam_width must be >= 1");
    if (hyps.empty()) {
        hyps.push_back(Hypothesis<Scorer>{{}, 0.0, scorer.initial_state()});
    }
    if (beam_width == 1) {
        // degenerate beam follows the greedy rule exactly
        return {greedy_step(scorer, frame, hyps.front(), max_symbols)};
    }
    std::vector<Hypothesis<Scorer>> active = std::move(hyps);
    std::vector<Hypothesis<Scorer>> finalized;
    for (int round = 0; round <= max_symbols && !active.empty(); ++round) {
        std::vector<Hypothesis<Scorer>> next;
        for (auto& a : active) {
            const std::vector<double> lp = scorer.log_probs(a.state, frame);
            Hypothesis<Scorer> fin = a;
            fin.score += lp[0];
            finalized.push_back(std::move(fin));
            if (round == max_symbols) continue;  // budget spent: blank only
            // top beam_width label extensions, ties toward lower index
            std::vector<long> cand(lp.size() - 1);
            for (size_t k = 0; k < cand.size(); ++k) cand[k] = long(k) + 1;
            std::stable_sort(cand.begin(), cand.end(), [&](long x, long y) {
                return lp[size_t(x)] > lp[size_t(y)];
            });
            const size_t keep = std::min<size_t>(cand.size(), size_t(beam_width));
            for (size_t c = 0; c < keep; ++c) {
                Hypothesis<Scorer> ext = a;
                ext.labels.push_back(cand[c]);
                ext.score += lp[size_t(cand[c])];
                ext.state = scorer.advance(a.state, cand[c]);
                next.push_back(std::move(ext));
            }
        }
        detail::merge_by_labels(next);
        std::sort(next.begin(), next.end(), detail::hyp_rank_less<Scorer>);
        if (long(next.size()) > beam_width) next.resize(size_t(beam_width));
        active = std::move(next);
    }
    detail::merge_by_labels(finalized);
    std::sort(finalized.begin(), finalized.end(), detail::hyp_rank_less<Scorer>);
    if (long(finalized.size()) > beam_width) finalized.resize(size_t(beam_width));
    return finalized;
}

}  // namespace ctt
