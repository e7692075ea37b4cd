#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "storyflow/errors.hpp"
#include "storyflow/nn.hpp"
#include "storyflow/scene.hpp"

namespace storyflow {

// Composite interaction states driving velocity mixing and contact gates.
enum PhaseState { kApproachWithdraw = 0, kContactRelease = 1, kHoldCarry = 2 };

struct RateModelConfig {
    int S = 3;
    int feat_dim = 8;
    int hidden = 32;

    void validate() const {
        if (S < 2) throw ConfigError("RateModel: need at least two states");
        if (feat_dim < 1 || hidden < 1) throw ConfigError("RateModel: dimensions must be positive");
    }
};

// Feature-conditioned generator matrix: off-diagonals softplus(net output),
// diagonal the negated row sum, so rows sum to zero by construction.
struct RateModel {
    RateModelConfig cfg;
    ParamStore params;
    Mlp net;

    RateModel(const RateModelConfig& c, Rng& rng)
        : cfg((c.validate(), c)),
          net(params, "ctmc", {c.feat_dim, c.hidden, c.S * (c.S - 1)}, Act::tanh, Act::identity,
              rng) {}

    // Pre-softplus off-diagonal rates, flattened row-major with the diagonal
    // skipped: index s*(S-1) + (j<s ? j : j-1) holds the s->j entry.
    Var raw_rates(Tape& tp, TapeBinding& p, Var h) const { return net.forward(tp, p, h); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = 1;
        j["config"] = {{"S", cfg.S}, {"feat_dim", cfg.feat_dim}, {"hidden", cfg.hidden}};
        j["params"] = params.to_json();
        return j;
    }

    static RateModel from_json(const nlohmann::json& j) {
        if (j.at("format_version").get<int>() != 1)
            throw ConfigError("rate model checkpoint: unsupported format_version");
        RateModelConfig cfg;
        cfg.S = j.at("config").at("S");
        cfg.feat_dim = j.at("config").at("feat_dim");
        cfg.hidden = j.at("config").at("hidden");
        Rng dummy(0);
        RateModel m(cfg, dummy);
        m.params.load_json(j.at("params"));
        return m;
    }
};

inline Tensor rate_matrix(const RateModel& m, const Tensor& h) {
    h.check_finite("rate_matrix features");
    Tape tp;
    TapeBinding p(tp, m.params, false);
    Tensor r = tp.val(tp.softplus_(m.raw_rates(tp, p, tp.constant(h))));
    int S = m.cfg.S;
    Tensor Q = Tensor::zeros({S, S});
    for (int s = 0; s < S; ++s) {
        double row = 0.0;
        for (int j = 0; j < S; ++j) {
            if (j == s) continue;
            double q = r.data[s * (S - 1) + (j < s ? j : j - 1)];
            Q.at(s, j) = q;
            row += q;
        }
        Q.at(s, s) = -row;
    }
    return Q;
}

struct OccupancyTrace {
    std::vector<double> times;
    std::vector<Tensor> pis;    // each (S,)
    double max_drift = 0.0;     // worst |sum(pi) - 1| before renormalization
    double min_occupancy = 0.0; // most negative entry seen before renormalization
};

// Kolmogorov forward equation dpi/dt = pi Q(h(t)), RK4 with per-step simplex
// renormalization. Row sums of Q are zero, so the drift is roundoff only.
inline OccupancyTrace kolmogorov_integrate(const RateModel& m, const Tensor& pi0,
                                           const std::function<Tensor(double)>& h_of_t, double t0,
                                           double t1, double step) {
    if (step <= 0.0) throw ConfigError("kolmogorov_integrate: step must be positive");
    int S = m.cfg.S;
    if (pi0.numel() != S) throw std::invalid_argument("kolmogorov_integrate: pi0 size mismatch");
    double sum0 = 0.0;
    for (double v : pi0.data) sum0 += v;
    if (std::abs(sum0 - 1.0) > 1e-9)
        throw std::invalid_argument("kolmogorov_integrate: pi0 not on the simplex");

    auto deriv = [&](const std::vector<double>& pi, double t) {
        Tensor Q = rate_matrix(m, h_of_t(t));
        std::vector<double> d(S, 0.0);
        for (int j = 0; j < S; ++j)
            for (int s = 0; s < S; ++s) d[j] += pi[s] * Q.at(s, j);
        return d;
    };

    OccupancyTrace trace;
    std::vector<double> pi(pi0.data.begin(), pi0.data.end());
    double t = t0;
    auto record = [&] {
        Tensor row = Tensor::zeros({S});
        for (int s = 0; s < S; ++s) row.data[s] = pi[s];
        trace.times.push_back(t);
        trace.pis.push_back(std::move(row));
    };
    record();
    int n_steps = static_cast<int>(std::ceil((t1 - t0) / step - 1e-12));
    for (int k = 0; k < n_steps; ++k) {
        double h = std::min(step, t1 - t);
        auto k1 = deriv(pi, t);
        std::vector<double> tmp(S);
        for (int s = 0; s < S; ++s) tmp[s] = pi[s] + 0.5 * h * k1[s];
        auto k2 = deriv(tmp, t + 0.5 * h);
        for (int s = 0; s < S; ++s) tmp[s] = pi[s] + 0.5 * h * k2[s];
        auto k3 = deriv(tmp, t + 0.5 * h);
        for (int s = 0; s < S; ++s) tmp[s] = pi[s] + h * k3[s];
        auto k4 = deriv(tmp, t + h);
        double sum = 0.0, mn = 1.0;
        for (int s = 0; s < S; ++s) {
            pi[s] += h / 6.0 * (k1[s] + 2.0 * k2[s] + 2.0 * k3[s] + k4[s]);
            sum += pi[s];
            mn = std::min(mn, pi[s]);
        }
        trace.max_drift = std::max(trace.max_drift, std::abs(sum - 1.0));
        trace.min_occupancy = std::min(trace.min_occupancy, mn);
        if (mn < -1e-9)
            throw SamplerDivergence("kolmogorov_integrate: occupancy left the simplex");
        for (int s = 0; s < S; ++s) pi[s] = std::max(pi[s], 0.0) / sum;
        t += h;
        record();
    }
    return trace;
}

// Kolmogorov residual plus the entropy-spread regularizer on the rates.
// pi_path (T, S) observed occupancies at spacing dt; feats (T, feat_dim).
// dpi/dt uses central differences (one-sided at the ends). A_t is the
// Shannon entropy of the normalized off-diagonal rates; beta_reg weights its
// variance over time. The optional dwell term penalizes expected dwell times
// 1/|Q_ss| shorter than min_dwell.
inline Var ctmc_loss_on(Tape& tp, TapeBinding& p, const RateModel& m, const Tensor& pi_path,
                        const Tensor& feats, double dt, double beta_reg, double min_dwell = 0.0,
                        double lambda_dwell = 0.0) {
    int S = m.cfg.S, R = S * (S - 1);
    int T = pi_path.shape[0];
    if (feats.shape[0] != T || pi_path.shape[1] != S)
        throw std::invalid_argument("ctmc_loss: path/feature shape mismatch");
    if (T < 2) throw std::invalid_argument("ctmc_loss: need at least two samples");

    Var resid{}, dwell{};
    std::vector<Var> ents;
    for (int t = 0; t < T; ++t) {
        Tensor h = Tensor::zeros({m.cfg.feat_dim});
        for (int i = 0; i < m.cfg.feat_dim; ++i) h.data[i] = feats.at(t, i);
        Var r = tp.softplus_(m.raw_rates(tp, p, tp.constant(h)));  // (R,)

        // pi Q is linear in the off-diagonal rates; fold the observed pi into
        // a constant (R, S) matrix instead of assembling Q.
        Tensor M = Tensor::zeros({R, S});
        for (int s = 0; s < S; ++s)
            for (int j = 0; j < S; ++j) {
                if (j == s) continue;
                int idx = s * (S - 1) + (j < s ? j : j - 1);
                M.at(idx, j) += pi_path.at(t, s);
                M.at(idx, s) -= pi_path.at(t, s);
            }
        Var flow = tp.matmul(tp.reshape(r, {1, R}), tp.constant(M));  // (1, S)

        Tensor dpi = Tensor::zeros({1, S});
        for (int s = 0; s < S; ++s) {
            double d;
            if (t == 0)
                d = (pi_path.at(1, s) - pi_path.at(0, s)) / dt;
            else if (t == T - 1)
                d = (pi_path.at(T - 1, s) - pi_path.at(T - 2, s)) / dt;
            else
                d = (pi_path.at(t + 1, s) - pi_path.at(t - 1, s)) / (2.0 * dt);
            dpi.at(0, s) = d;
        }
        Var term = tp.sum(tp.square(tp.sub(tp.constant(dpi), flow)));
        resid = resid.valid() ? tp.add(resid, term) : term;

        if (beta_reg != 0.0) {
            Var total = tp.sum(r);
            Var pr = tp.div(r, tp.reshape(tp.matmul(tp.reshape(total, {1, 1}),
                                                    tp.constant(Tensor::full({1, R}, 1.0))),
                                          {R}));
            Var ent = tp.scale(tp.sum(tp.mul(pr, tp.log_eps(pr))), -1.0);
            ents.push_back(tp.reshape(ent, {1}));
        }
        if (lambda_dwell != 0.0) {
            // Row sums of off-diagonal rates = |Q_ss|.
            Tensor Rw = Tensor::zeros({R, S});
            for (int s = 0; s < S; ++s)
                for (int j = 0; j < S; ++j) {
                    if (j == s) continue;
                    Rw.at(s * (S - 1) + (j < s ? j : j - 1), s) = 1.0;
                }
            Var q_abs = tp.matmul(tp.reshape(r, {1, R}), tp.constant(Rw));  // (1, S)
            Var dw = tp.div(tp.constant(Tensor::full({1, S}, 1.0)), tp.add_scalar(q_abs, 1e-9));
            Var pen = tp.sum(tp.square(tp.relu(tp.scale(tp.add_scalar(dw, -min_dwell), -1.0))));
            dwell = dwell.valid() ? tp.add(dwell, pen) : pen;
        }
    }
    Var loss = tp.scale(resid, 1.0 / T);
    if (!ents.empty()) {
        Var A = tp.concat_rows(ents);  // (T,)
        Var mean_A = tp.mean(A);
        Var var_A = tp.sub(tp.mean(tp.square(A)), tp.square(mean_A));
        loss = tp.add(loss, tp.scale(var_A, beta_reg));
    }
    if (dwell.valid()) loss = tp.add(loss, tp.scale(dwell, lambda_dwell / T));
    return loss;
}

inline double ctmc_loss(const RateModel& m, const Tensor& pi_path, const Tensor& feats, double dt,
                        double beta_reg, double min_dwell = 0.0, double lambda_dwell = 0.0) {
    Tape tp;
    TapeBinding p(tp, m.params, false);
    return tp.val(ctmc_loss_on(tp, p, m, pi_path, feats, dt, beta_reg, min_dwell, lambda_dwell))
        .data[0];
}

struct CtmcFitConfig {
    int steps = 300;
    double lr = 3e-3;
    double beta_reg = 0.1;
    double min_dwell = 0.0;
    double lambda_dwell = 0.0;
};

struct CtmcPath {
    Tensor pi;     // (T, S)
    Tensor feats;  // (T, feat_dim)
    double dt = 0.0;
};

inline void fit_rate_model(RateModel& m, const std::vector<CtmcPath>& paths,
                           const CtmcFitConfig& cfg, Rng& rng) {
    if (paths.empty()) throw ConfigError("fit_rate_model: no paths");
    AdamConfig opt;
    opt.lr = cfg.lr;
    for (int step = 0; step < cfg.steps; ++step) {
        const CtmcPath& path = paths[rng.integer(paths.size())];
        Tape tp;
        TapeBinding p(tp, m.params, true);
        Var loss = ctmc_loss_on(tp, p, m, path.pi, path.feats, path.dt, cfg.beta_reg,
                                cfg.min_dwell, cfg.lambda_dwell);
        if (!std::isfinite(tp.val(loss).data[0]))
            throw TrainingDivergence("fit_rate_model: non-finite loss");
        tp.backward(loss);
        GradMap grads;
        p.add_grads_to(grads);
        m.params.adam_step(grads, opt);
    }
}

struct CtmcThresholds {
    double d_c = 0.10;    // hand-anchor contact distance, meters
    double v_o = 1e-3;    // object speed floor for carry, meters per frame
    int w = 3;            // frames around a contact flip labeled contact/release
    double smooth = 0.15; // logistic width for the hold label, fraction of d_c
};

// Rule-based soft phase labels from contact geometry. A pair counts at frame
// n only inside its scripted window; distances and speeds come from the
// motion itself.
inline Tensor pseudo_labels(const SceneMotion& m, const std::vector<ContactSpec>& contacts,
                            const CtmcThresholds& th) {
    int N = m.N;
    Tensor out = Tensor::zeros({N, 3});
    if (contacts.empty()) {
        for (int n = 0; n < N; ++n) out.at(n, kApproachWithdraw) = 1.0;
        return out;
    }

    auto active = [&](const ContactSpec& c, int n) {
        int hi = c.frame_hi < 0 ? N - 1 : c.frame_hi;
        return n >= c.frame_lo && n <= hi;
    };
    auto pair_dist = [&](const ContactSpec& c, int n) {
        Vec3 j = m.joint_pos(n, c.human, c.joint), a = m.anchor_pos(n, c.object, c.anchor);
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += (j[k] - a[k]) * (j[k] - a[k]);
        return std::sqrt(s);
    };

    int P = static_cast<int>(contacts.size());
    std::vector<std::vector<bool>> close(P, std::vector<bool>(N, false));
    std::vector<bool> all_close(N, false);
    std::vector<double> dmax(N, 0.0), speed(N, 0.0);
    for (int n = 0; n < N; ++n) {
        bool any = false, all = true;
        double dm = 0.0;
        int obj = contacts[0].object;
        for (int i = 0; i < P; ++i) {
            if (!active(contacts[i], n)) continue;
            any = true;
            obj = contacts[i].object;
            double d = pair_dist(contacts[i], n);
            close[i][n] = d < th.d_c;
            all = all && close[i][n];
            dm = std::max(dm, d);
        }
        all_close[n] = any && all;
        dmax[n] = dm;
        int n2 = std::min(N - 1, n + 1), n1 = std::max(0, n2 - 1);
        Vec3 a = m.obj_trans(n1, obj), b = m.obj_trans(n2, obj);
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += (b[k] - a[k]) * (b[k] - a[k]);
        speed[n] = std::sqrt(s);
    }

    // Flip frames: any pair's (active && close) indicator changes.
    std::vector<int> flips;
    for (int n = 1; n < N; ++n)
        for (int i = 0; i < P; ++i)
            if (close[i][n] != close[i][n - 1]) {
                flips.push_back(n);
                break;
            }

    for (int n = 0; n < N; ++n) {
        bool sustained = true;
        for (int k = std::max(0, n - th.w); k <= std::min(N - 1, n + th.w); ++k)
            sustained = sustained && all_close[k];
        double h = 0.0;
        if (all_close[n] && (speed[n] > th.v_o || sustained))
            h = 1.0 / (1.0 + std::exp(-(th.d_c - dmax[n]) / (th.smooth * th.d_c)));
        double c = 0.0;
        for (int f : flips)
            c = std::max(c, 1.0 - std::abs(n - f) / static_cast<double>(th.w + 1));
        double a = std::max(0.0, 1.0 - h - c);
        double sum = a + c + h;
        out.at(n, kApproachWithdraw) = a / sum;
        out.at(n, kContactRelease) = c / sum;
        out.at(n, kHoldCarry) = h / sum;
    }
    return out;
}

struct ContactGates {
    double interaction = 0.0;
    double spacing = 0.0;
};

inline ContactGates contact_gates(const Tensor& pi) {
    if (pi.numel() != 3) throw std::invalid_argument("contact_gates: expected 3 states");
    double sum = 0.0, mn = 1.0;
    for (double v : pi.data) {
        sum += v;
        mn = std::min(mn, v);
    }
    if (std::abs(sum - 1.0) > 1e-6 || mn < -1e-6)
        throw std::invalid_argument("contact_gates: occupancy off the simplex");
    ContactGates g;
    g.interaction = std::min(1.0, std::max(0.0, pi.data[kContactRelease] + pi.data[kHoldCarry]));
    g.spacing = std::min(1.0, std::max(0.0, pi.data[kApproachWithdraw]));
    return g;
}

// Feature vector for the rate network at one latent step: entity-mean latent
// pooled over tokens, hand-anchor distances, object speed.
inline Tensor ctmc_features(const Tensor& z, int q, const std::vector<double>& hand_anchor_dists,
                            double obj_speed) {
    int T = z.shape[0], V = z.shape[1], d = z.shape[2];
    if (q < 0 || q >= T) throw std::invalid_argument("ctmc_features: latent step out of range");
    Tensor h = Tensor::zeros({d + static_cast<int>(hand_anchor_dists.size()) + 1});
    for (int i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int v = 0; v < V; ++v) acc += z.at(q, v, i);
        h.data[i] = acc / V;
    }
    for (size_t i = 0; i < hand_anchor_dists.size(); ++i) h.data[d + i] = hand_anchor_dists[i];
    h.data[d + hand_anchor_dists.size()] = obj_speed;
    return h;
}

}  // namespace storyflow
