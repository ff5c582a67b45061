#pragma once

// Transducer loss: negative log of the marginal probability of a label
// sequence over all alignment paths with exactly T' blanks and U labels,
// computed in log space by forward-backward with analytic occupancy gradients.
// A full-enumeration oracle cross-checks both the value and the convention.
//
// Path convention: every interleaving of T' blanks and U labels is a valid
// alignment (C(T'+U, U) paths). A label emitted at node (t, u) scores
// logprobs[min(t, T'-1), u, y_{u+1}]; labels emitted after the final blank are
// conditioned on the last frame. alpha/beta run over the (T'+1) x (U+1) node
// grid with alpha[0,0] = 0 and total log-probability alpha[T', U] = beta[0, 0].

#include <cmath>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctt/ops.hpp"
#include "ctt/tensor.hpp"
#include "ctt/util.hpp"

namespace ctt {

struct Lattice {
    long t_len = 0;  // T', encoder frames
    long u_len = 0;  // U, labels
    long n_sym = 0;  // V + 1 including blank at index 0
    std::vector<double> logprobs;  // [T', U+1, V+1]
    std::vector<long> labels;      // U label ids in 1..V

    double lp(long t, long u, long k) const {
        return logprobs[size_t((t * (u_len + 1) + u) * n_sym + k)];
    }
    double blank_lp(long t, long u) const { return lp(t, u, 0); }
    // label emission score at node (t, u); t clamped to the last frame
    double label_lp(long t, long u) const {
        return lp(std::min(t, t_len - 1), u, labels[size_t(u)]);
    }

    void validate() const {
        if (t_len < 1) throw std::invalid_argument("lattice: T' must be >= 1");
        if (u_len < 0) throw std::invalid_argument("lattice: U must be >= 0");
        if (n_sym < 1) throw std::invalid_argument("lattice: needs at least blank symbol");
        if (long(labels.size()) != u_len) {
            throw std::invalid_argument("lattice: labels length " +
                                        std::to_string(labels.size()) + " != U " +
                                        std::to_string(u_len));
        }
        for (long y : labels) {
            if (y < 1 || y >= n_sym) {
                throw std::invalid_argument("lattice: label id " + std::to_string(y) +
                                            " out of range (blank excluded)");
            }
        }
        if (long(logprobs.size()) != t_len * (u_len + 1) * n_sym) {
            throw std::invalid_argument("lattice: logprobs size mismatch");
        }
        for (double v : logprobs) {
            if (std::isnan(v)) throw std::invalid_argument("lattice: NaN log-probability");
        }
    }
};

struct ForwardBackwardResult {
    double nll = 0.0;
    double log_prob = 0.0;          // alpha[T', U]
    std::vector<double> grad;       // d nll / d logprobs, same layout as logprobs
    std::vector<double> alpha;      // [(T'+1), (U+1)]
    std::vector<double> beta;       // [(T'+1), (U+1)]

    double alpha_at(long t, long u, long u_len) const {
        return alpha[size_t(t * (u_len + 1) + u)];
    }
    double beta_at(long t, long u, long u_len) const {
        return beta[size_t(t * (u_len + 1) + u)];
    }
};

inline ForwardBackwardResult forward_backward(const Lattice& lat) {
    lat.validate();
    const long tn = lat.t_len, un = lat.u_len;
    const long cols = un + 1;
    ForwardBackwardResult r;
    r.alpha.assign(size_t((tn + 1) * cols), kLogZero);
    r.beta.assign(size_t((tn + 1) * cols), kLogZero);
    auto a = [&](long t, long u) -> double& { return r.alpha[size_t(t * cols + u)]; };
    auto b = [&](long t, long u) -> double& { return r.beta[size_t(t * cols + u)]; };

    a(0, 0) = 0.0;
    for (long t = 0; t <= tn; ++t) {
        for (long u = 0; u <= un; ++u) {
            if (t == 0 && u == 0) continue;
            double via_blank = kLogZero;
            double via_label = kLogZero;
            if (t > 0) via_blank = a(t - 1, u) + lat.blank_lp(t - 1, u);
            if (u > 0) via_label = a(t, u - 1) + lat.label_lp(t, u - 1);
            a(t, u) = log_add_exp(via_blank, via_label);
        }
    }
    r.log_prob = a(tn, un);
    r.nll = -r.log_prob;

    b(tn, un) = 0.0;
    for (long t = tn; t >= 0; --t) {
        for (long u = un; u >= 0; --u) {
            if (t == tn && u == un) continue;
            double via_blank = kLogZero;
            double via_label = kLogZero;
            if (t < tn) via_blank = lat.blank_lp(t, u) + b(t + 1, u);
            if (u < un) via_label = lat.label_lp(t, u) + b(t, u + 1);
            b(t, u) = log_add_exp(via_blank, via_label);
        }
    }

    // Occupancy gradients: d nll / d logprob = -(posterior of the transitions
    // that consume that logprob).
    r.grad.assign(lat.logprobs.size(), 0.0);
    auto grad_at = [&](long t, long u, long k) -> double& {
        return r.grad[size_t((t * cols + u) * lat.n_sym + k)];
    };
    for (long t = 0; t < tn; ++t) {
        for (long u = 0; u <= un; ++u) {
            const double post = a(t, u) + lat.blank_lp(t, u) + b(t + 1, u) - r.log_prob;
            if (!is_log_zero(post)) grad_at(t, u, 0) -= std::exp(post);
        }
    }
    for (long u = 0; u < un; ++u) {
        for (long t = 0; t <= tn; ++t) {
            const double post = a(t, u) + lat.label_lp(t, u) + b(t, u + 1) - r.log_prob;
            if (!is_log_zero(post)) {
                grad_at(std::min(t, tn - 1), u, lat.labels[size_t(u)]) -= std::exp(post);
            }
        }
    }
    return r;
}

// Enumerates every alignment path; log-sum-exp of path scores. The oracle is a
// straight recursion, independent of the dynamic program above.
inline double brute_force_nll(const Lattice& lat, long* n_paths = nullptr) {
    lat.validate();
    const double log_count = log_binomial(lat.t_len + lat.u_len, lat.u_len);
    if (log_count > std::log(1e6)) {
        throw std::invalid_argument("brute_force_nll: C(T'+U, U) exceeds 1e6 paths");
    }
    std::vector<double> path_scores;
    long count = 0;
    // iterative DFS over (t, u, accumulated score)
    struct Frame {
        long t, u;
        double score;
    };
    std::vector<Frame> stack;
    stack.push_back({0, 0, 0.0});
    while (!stack.empty()) {
        const Frame f = stack.back();
        stack.pop_back();
        if (f.t == lat.t_len && f.u == lat.u_len) {
            path_scores.push_back(f.score);
            ++count;
            continue;
        }
        if (f.u < lat.u_len) {
            stack.push_back({f.t, f.u + 1, f.score + lat.label_lp(f.t, f.u)});
        }
        if (f.t < lat.t_len) {
            stack.push_back({f.t + 1, f.u, f.score + lat.blank_lp(f.t, f.u)});
        }
    }
    if (n_paths) *n_paths = count;
    double mx = kLogZero;
    for (double s : path_scores) mx = std::max(mx, s);
    double acc = 0.0;
    for (double s : path_scores) acc += std::exp(s - mx);
    return -(mx + std::log(acc));
}

// Graph op: scalar NLL of a [T', U+1, V+1] log-probability tensor; backward
// reuses the forward-backward occupancy gradients.
inline Tensor transducer_nll(const Tensor& logprobs, const std::vector<long>& labels) {
    if (logprobs.rank() != 3) {
        throw std::invalid_argument("transducer_nll: expected [T', U+1, V+1], got " +
                                    shape_str(logprobs.shape()));
    }
    Lattice lat;
    lat.t_len = logprobs.dim(0);
    lat.u_len = logprobs.dim(1) - 1;
    lat.n_sym = logprobs.dim(2);
    lat.logprobs = logprobs.data();
    lat.labels = labels;
    auto fb = std::make_shared<ForwardBackwardResult>(forward_backward(lat));
    auto pn = logprobs.node();
    return detail::make_result({}, {fb->nll}, {logprobs},
                               [pn, fb](Tensor::Node& self) {
                                   if (!pn->requires_grad) return;
                                   pn->ensure_grad();
                                   const double g = self.grad[0];
                                   for (size_t i = 0; i < fb->grad.size(); ++i) {
                                       pn->grad[i] += g * fb->grad[i];
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Self-contained verification sweeps (drives the loss-check CLI subcommand).
// ---------------------------------------------------------------------------

using ForwardBackwardFn = std::function<ForwardBackwardResult(const Lattice&)>;

struct LossCheckReport {
    long trials = 0;
    double fb_vs_brute_max = 0.0;       // max |forward_backward - enumeration|
    double closed_form_max = 0.0;       // max error on uniform lattices
    double grad_fd_max_rel = 0.0;       // finite-difference gradient check
    double mass_max_err = 0.0;          // per-diagonal posterior mass vs 1
    bool pass = false;
    std::string to_string() const;
};

inline Lattice random_lattice(long t_len, long u_len, long n_sym, Rng& rng) {
    Lattice lat;
    lat.t_len = t_len;
    lat.u_len = u_len;
    lat.n_sym = n_sym;
    lat.logprobs.resize(size_t(t_len * (u_len + 1) * n_sym));
    for (long t = 0; t < t_len; ++t) {
        for (long u = 0; u <= u_len; ++u) {
            // random normalized log-distribution per node
            std::vector<double> logits(static_cast<size_t>(n_sym));
            for (auto& v : logits) v = rng.normal(0.0, 1.5);
            double mx = logits[0];
            for (double v : logits) mx = std::max(mx, v);
            double z = 0.0;
            for (double v : logits) z += std::exp(v - mx);
            const double lz = mx + std::log(z);
            for (long k = 0; k < n_sym; ++k) {
                lat.logprobs[size_t((t * (u_len + 1) + u) * n_sym + k)] = logits[size_t(k)] - lz;
            }
        }
    }
    for (long u = 0; u < u_len; ++u) {
        lat.labels.push_back(long(rng.uniform_int(std::uint64_t(n_sym - 1))) + 1);
    }
    return lat;
}

inline Lattice uniform_lattice(long t_len, long u_len, long n_sym) {
    Lattice lat;
    lat.t_len = t_len;
    lat.u_len = u_len;
    lat.n_sym = n_sym;
    lat.logprobs.assign(size_t(t_len * (u_len + 1) * n_sym), -std::log(double(n_sym)));
    for (long u = 0; u < u_len; ++u) lat.labels.push_back(1 + (u % (n_sym - 1)));
    return lat;
}

// Expected nll of a uniform lattice: (T'+U) log(V+1) - log C(T'+U, U).
inline double uniform_lattice_nll(long t_len, long u_len, long n_sym) {
    return double(t_len + u_len) * std::log(double(n_sym)) -
           log_binomial(t_len + u_len, u_len);
}

inline LossCheckReport run_loss_checks(long trials, std::uint64_t seed,
                                       const ForwardBackwardFn& fb_fn = forward_backward) {
    LossCheckReport rep;
    rep.trials = trials;
    Rng rng(seed);

    for (long i = 0; i < trials; ++i) {
        const long t_len = 1 + long(rng.uniform_int(5));
        const long u_len = long(rng.uniform_int(5));
        const long n_sym = 2 + long(rng.uniform_int(5));
        Lattice lat = random_lattice(t_len, u_len, n_sym, rng);
        const double fb = fb_fn(lat).nll;
        const double bf = brute_force_nll(lat);
        rep.fb_vs_brute_max = std::max(rep.fb_vs_brute_max, std::fabs(fb - bf));
    }

    for (long t = 1; t <= 5; ++t) {
        for (long u = 0; u <= 4; ++u) {
            const long n_sym = 5;
            const double got = fb_fn(uniform_lattice(t, u, n_sym)).nll;
            const double want = uniform_lattice_nll(t, u, n_sym);
            rep.closed_form_max = std::max(rep.closed_form_max, std::fabs(got - want));
        }
    }

    // finite differences on a handful of small random lattices
    const double fd_eps = 1e-5;
    for (long trial = 0; trial < 5; ++trial) {
        Lattice lat = random_lattice(3, 2, 4, rng);
        const auto res = fb_fn(lat);
        for (size_t i = 0; i < lat.logprobs.size(); ++i) {
            Lattice lp = lat, lm = lat;
            lp.logprobs[i] += fd_eps;
            lm.logprobs[i] -= fd_eps;
            const double numeric = (fb_fn(lp).nll - fb_fn(lm).nll) / (2.0 * fd_eps);
            const double denom =
                std::max({std::fabs(res.grad[i]), std::fabs(numeric), 1e-8});
            rep.grad_fd_max_rel =
                std::max(rep.grad_fd_max_rel, std::fabs(res.grad[i] - numeric) / denom);
        }
    }

    // total path mass entering each diagonal must be 1
    for (long trial = 0; trial < 20; ++trial) {
        Lattice lat = random_lattice(1 + long(rng.uniform_int(5)), long(rng.uniform_int(5)),
                                     2 + long(rng.uniform_int(5)), rng);
        const auto res = fb_fn(lat);
        const long cols = lat.u_len + 1;
        for (long diag = 0; diag < lat.t_len + lat.u_len; ++diag) {
            double mass = 0.0;
            for (long t = 0; t <= std::min(diag, lat.t_len); ++t) {
                const long u = diag - t;
                if (u < 0 || u > lat.u_len) continue;
                if (t < lat.t_len) {
                    const double post = res.alpha[size_t(t * cols + u)] + lat.blank_lp(t, u) +
                                        res.beta[size_t((t + 1) * cols + u)] - res.log_prob;
                    if (!is_log_zero(post)) mass += std::exp(post);
                }
                if (u < lat.u_len) {
                    const double post = res.alpha[size_t(t * cols + u)] + lat.label_lp(t, u) +
                                        res.beta[size_t(t * cols + u + 1)] - res.log_prob;
                    if (!is_log_zero(post)) mass += std::exp(post);
                }
            }
            rep.mass_max_err = std::max(rep.mass_max_err, std::fabs(mass - 1.0));
        }
    }

    rep.pass = rep.fb_vs_brute_max < 1e-9 && rep.closed_form_max < 1e-9 &&
               rep.grad_fd_max_rel < 1e-4 && rep.mass_max_err < 1e-8;
    return rep;
}

inline std::string LossCheckReport::to_string() const {
    std::string s;
    auto line = [&](const std::string& name, double v, double tol, bool ok) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-38s %.3e (tol %.0e) %s\n", name.c_str(), v, tol,
                      ok ? "ok" : "FAIL");
        s += buf;
    };
    line("forward-backward vs enumeration", fb_vs_brute_max, 1e-9, fb_vs_brute_max < 1e-9);
    line("uniform-lattice closed form", closed_form_max, 1e-9, closed_form_max < 1e-9);
    line("gradient vs finite differences", grad_fd_max_rel, 1e-4, grad_fd_max_rel < 1e-4);
    line("diagonal posterior mass", mass_max_err, 1e-8, mass_max_err < 1e-8);
    s += pass ? "loss-check: PASS\n" : "loss-check: FAIL\n";
    return s;
}

}  // namespace ctt
