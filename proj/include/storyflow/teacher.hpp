#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "storyflow/errors.hpp"
#include "storyflow/nn.hpp"
#include "storyflow/scene.hpp"

namespace storyflow {

// Variance-preserving forward process with a linear (or constant) beta
// schedule; alpha_bar(tau) = exp(-int_0^tau beta).
struct NoiseSchedule {
    double beta0 = 0.1, beta1 = 20.0;

    double beta(double tau) const { return beta0 + (beta1 - beta0) * tau; }

    double beta_integral(double tau) const {
        return beta0 * tau + 0.5 * (beta1 - beta0) * tau * tau;
    }

    double alpha_bar(double tau) const {
        if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("alpha_bar: tau outside [0,1]");
        return std::exp(-beta_integral(tau));
    }

    // Inverse of alpha_bar, clamped to [0,1].
    double inv_alpha_bar(double ab) const {
        if (ab >= 1.0) return 0.0;
        if (ab <= alpha_bar(1.0)) return 1.0;
        double target = -std::log(ab), delta = beta1 - beta0;
        double tau = std::abs(delta) < 1e-12
                         ? target / beta0
                         : (-beta0 + std::sqrt(beta0 * beta0 + 2.0 * delta * target)) / delta;
        return std::min(1.0, std::max(0.0, tau));
    }

    void validate() const {
        if (beta0 <= 0.0 || beta(1.0) <= 0.0) throw ConfigError("NoiseSchedule: beta must stay positive");
    }
};

inline double alpha_bar(const NoiseSchedule& s, double tau) { return s.alpha_bar(tau); }

// z_tau = sqrt(ab) z0 + sqrt(1-ab) eps; returns (z_tau, eps).
inline std::pair<Tensor, Tensor> vp_forward(const NoiseSchedule& s, const Tensor& z0, double tau,
                                            Rng& rng) {
    double ab = s.alpha_bar(tau);
    Tensor eps = Tensor::randn(z0.shape, rng);
    Tensor z = z0;
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (int64_t i = 0; i < z.numel(); ++i) z.data[i] = a * z0.data[i] + b * eps.data[i];
    return {std::move(z), std::move(eps)};
}

// SNR-matching map from rectified-flow time t (data at 0, noise at 1) to
// diffusion time tau: sqrt(1-ab)/sqrt(ab) = t/(1-t). t=1 maps to tau=1.
inline double time_map(const NoiseSchedule& s, double t) {
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("time_map: t outside [0,1]");
    if (t >= 1.0) return 1.0;
    double u = 1.0 - t;
    double ab = u * u / (u * u + t * t);
    return s.inv_alpha_bar(ab);
}

// dT/dt via the chain rule through alpha_bar; zero on the clamped tails.
inline double time_map_derivative(const NoiseSchedule& s, double t) {
    if (t <= 0.0 || t >= 1.0) return 0.0;
    double u = 1.0 - t;
    double w = u * u + t * t;
    double ab = u * u / w;
    if (ab >= 1.0 || ab <= s.alpha_bar(1.0)) return 0.0;
    double dab_dt = (-2.0 * u * w - u * u * (2.0 * t - 2.0 * u)) / (w * w);
    double tau = s.inv_alpha_bar(ab);
    return -dab_dt / (s.beta(tau) * ab);
}

// softmax(Q K^T / sqrt(d_h) - lambda D) per leading batch index. Q, K are
// (B, V, d_h) or (V, d_h); D is (B, V, V) or (V, V) with nonnegative entries.
inline Var dist_attention_weights(Tape& tp, Var Q, Var K, const Tensor& D, double lambda) {
    for (double v : D.data)
        if (v < 0.0) throw std::invalid_argument("dist_attention: negative distance");
    const Tensor& tq = tp.val(Q);
    bool batched = tq.shape.size() == 3;
    int B = batched ? tq.shape[0] : 1;
    int V = tq.shape[batched ? 1 : 0], dh = tq.shape.back();
    Var q3 = batched ? Q : tp.reshape(Q, {1, V, dh});
    Var k3 = batched ? K : tp.reshape(K, {1, V, dh});
    Var scores = tp.scale(tp.bmm_nt(q3, k3), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor bias({B, V, V});
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < V; ++i)
            for (int j = 0; j < V; ++j)
                bias.at(b, i, j) = lambda * (D.shape.size() == 3 ? D.at(b, i, j) : D.at(i, j));
    Var w = tp.softmax_last(tp.sub(scores, tp.constant(bias)));
    return batched ? w : tp.reshape(w, {V, V});
}

inline Var dist_attention(Tape& tp, Var Q, Var K, Var Vv, const Tensor& D, double lambda) {
    const Tensor& tq = tp.val(Q);
    bool batched = tq.shape.size() == 3;
    int V = tq.shape[batched ? 1 : 0], dh = tq.shape.back();
    Var w = dist_attention_weights(tp, Q, K, D, lambda);
    if (batched) return tp.bmm(w, Vv);
    return tp.reshape(tp.bmm(tp.reshape(w, {1, V, V}), tp.reshape(Vv, {1, V, dh})), {V, dh});
}

// Conditioning bundle consumed by the backbone. Empty tensors disable the
// corresponding adapter; uncond drops everything (classifier-free branch).
struct Conditioning {
    Tensor traj;                 // (T_lat, f_tr) per-step trajectory features
    Tensor keyposes;             // (K, f_kf) lifted keypose features
    std::vector<int> key_steps;  // latent step of each keypose
    int task = 0;
    bool uncond = false;
};

struct BackboneConfig {
    int T = 16, V = 3, d = 16;
    int width = 32, dh = 16;
    int f_tr = 6, f_kf = 132;
    int n_tasks = 4;
    int heads = 1;
    double sigma_kf = 1.5;     // keyframe gate width in latent steps
    double lambda_dist = 1.0;  // distance-bias weight in entity attention

    int trunk_channels() const { return V * width; }

    void validate() const {
        if (T < 8 || T % 8 != 0) throw ConfigError("Backbone: T must be a multiple of 8, at least 8");
        if (V < 1 || d < 1 || width < 1 || dh < 1 || heads < 1)
            throw ConfigError("Backbone: dimensions must be positive");
        if (n_tasks < 1) throw ConfigError("Backbone: need at least one task");
    }
};

// Temporal U-Net over latent steps with distance-modulated entity attention
// at full resolution on both sides, trajectory/keyframe residual adapters,
// and a task embedding injected at the bottleneck. Adapter output layers and
// the task table start at zero, so an untrained (or dropped) condition path
// contributes nothing.
struct Backbone {
    BackboneConfig cfg;
    ParamStore params;

    Backbone(const BackboneConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        int W = cfg.width, C = cfg.trunk_channels();
        auto mat = [&](int out, int in) { return xavier_uniform(out, in, rng); };
        auto conv = [&](int co, int ci, int k) {
            Tensor w = Tensor::zeros({co, ci, k});
            double bound = std::sqrt(6.0 / (ci * k + co * k));
            for (double& x : w.data) x = rng.uniform(-bound, bound);
            return w;
        };
        params.create("bb.embed.w", mat(W, cfg.d));
        params.create("bb.embed.b", Tensor::zeros({W}));
        params.create("bb.time.w", mat(W, 8));
        params.create("bb.time.b", Tensor::zeros({W}));
        params.create("bb.tr.w0", mat(W, cfg.f_tr));
        params.create("bb.tr.b0", Tensor::zeros({W}));
        params.create("bb.tr.w1", Tensor::zeros({W, W}));
        params.create("bb.tr.b1", Tensor::zeros({W}));
        params.create("bb.kf.w0", mat(W, cfg.f_kf));
        params.create("bb.kf.b0", Tensor::zeros({W}));
        params.create("bb.kf.w1", Tensor::zeros({W, W}));
        params.create("bb.kf.b1", Tensor::zeros({W}));
        params.create("bb.task", Tensor::zeros({cfg.n_tasks, W}));
        for (const char* a : {"bb.a1", "bb.a2"}) {
            std::string p(a);
            params.create(p + ".q.w", mat(cfg.dh, W));
            params.create(p + ".q.b", Tensor::zeros({cfg.dh}));
            params.create(p + ".k.w", mat(cfg.dh, W));
            params.create(p + ".k.b", Tensor::zeros({cfg.dh}));
            params.create(p + ".v.w", mat(cfg.dh, W));
            params.create(p + ".v.b", Tensor::zeros({cfg.dh}));
            params.create(p + ".o.w", mat(W, cfg.dh));
            params.create(p + ".o.b", Tensor::zeros({W}));
        }
        params.create("bb.d1.w", conv(C, C, 4));
        params.create("bb.d1.b", Tensor::zeros({C}));
        params.create("bb.d2.w", conv(C, C, 4));
        params.create("bb.d2.b", Tensor::zeros({C}));
        params.create("bb.d3.w", conv(C, C, 4));
        params.create("bb.d3.b", Tensor::zeros({C}));
        params.create("bb.mid.w", conv(C, C, 3));
        params.create("bb.mid.b", Tensor::zeros({C}));
        params.create("bb.u3.w", conv(C, C, 4));
        params.create("bb.u3.b", Tensor::zeros({C}));
        params.create("bb.u2.w", conv(C, C, 4));
        params.create("bb.u2.b", Tensor::zeros({C}));
        params.create("bb.u1.w", conv(C, C, 4));
        params.create("bb.u1.b", Tensor::zeros({C}));
        params.create("bb.refine.w", conv(C, C, 3));
        params.create("bb.refine.b", Tensor::zeros({C}));
        params.create("bb.film.w", Tensor::zeros({C, 8}));
        params.create("bb.film.b", Tensor::zeros({C}));
        for (int h = 0; h < cfg.heads; ++h) {
            std::string p = "bb.head" + std::to_string(h);
            params.create(p + ".w", mat(cfg.d, W));
            params.create(p + ".b", Tensor::zeros({cfg.d}));
            params.create(p + ".g0.w", mat(16, 8));
            params.create(p + ".g0.b", Tensor::zeros({16}));
            params.create(p + ".g1.w", Tensor::zeros({1, 16}));
            params.create(p + ".g1.b", Tensor::zeros({1}));
        }
    }

    // Fourier features of normalized time plus raw/constant channels.
    static Tensor time_features(double tt) {
        Tensor f = Tensor::zeros({8});
        for (int k = 0; k < 3; ++k) {
            double w = 3.14159265358979323846 * std::pow(2.0, k) * tt;
            f.data[2 * k] = std::sin(w);
            f.data[2 * k + 1] = std::cos(w);
        }
        f.data[6] = tt;
        f.data[7] = 1.0;
        return f;
    }

    static Var swap01(Tape& tp, Var m) {
        const Tensor& tm = tp.val(m);
        int A = tm.shape[0], B = tm.shape[1];
        return tp.reshape(tp.transpose01(tp.reshape(m, {A, B, 1})), {B, A});
    }

    Var attention_block(Tape& tp, TapeBinding& p, Var tokens, const Tensor& D_q,
                        const std::string& pre) const {
        int T = cfg.T, V = cfg.V, W = cfg.width, dh = cfg.dh;
        Var flat = tp.reshape(tokens, {T * V, W});
        Var Q = tp.reshape(tp.linear(flat, p[pre + ".q.w"], p[pre + ".q.b"]), {T, V, dh});
        Var K = tp.reshape(tp.linear(flat, p[pre + ".k.w"], p[pre + ".k.b"]), {T, V, dh});
        Var Vv = tp.reshape(tp.linear(flat, p[pre + ".v.w"], p[pre + ".v.b"]), {T, V, dh});
        Var att = dist_attention(tp, Q, K, Vv, D_q, cfg.lambda_dist);
        Var out = tp.linear(tp.reshape(att, {T * V, dh}), p[pre + ".o.w"], p[pre + ".o.b"]);
        return tp.add(tokens, tp.reshape(out, {T, V, W}));
    }

    // z (T, V, d), tt in [0,1], D_q (T, V, V) or (V, V); returns one (T, V, d)
    // field per output head, sharing the trunk.
    std::vector<Var> forward_heads(Tape& tp, TapeBinding& p, Var z, double tt,
                                   const Conditioning& cond, const Tensor& D_q) const {
        int T = cfg.T, V = cfg.V, W = cfg.width, C = cfg.trunk_channels();
        const Tensor& tz = tp.val(z);
        if (tz.shape.size() != 3 || tz.shape[0] != T || tz.shape[1] != V || tz.shape[2] != cfg.d)
            throw std::invalid_argument("backbone: latent shape mismatch");

        Var tokens = tp.reshape(tp.linear(tp.reshape(z, {T * V, cfg.d}), p["bb.embed.w"], p["bb.embed.b"]),
                                {T, V, W});
        Var tvec = tp.linear(tp.constant(time_features(tt)), p["bb.time.w"], p["bb.time.b"]);
        tokens = tp.reshape(tp.add_rowvec(tp.reshape(tokens, {T * V, W}), tvec), {T, V, W});

        bool use_cond = !cond.uncond;
        if (use_cond && cond.traj.numel() > 0) {
            if (cond.traj.shape[0] != T || cond.traj.shape.back() != cfg.f_tr)
                throw std::invalid_argument("backbone: trajectory feature shape mismatch");
            Var r = tp.linear(tp.tanh_(tp.linear(tp.constant(cond.traj), p["bb.tr.w0"], p["bb.tr.b0"])),
                              p["bb.tr.w1"], p["bb.tr.b1"]);
            tokens = tp.add_mid1(tokens, r);
        }
        if (use_cond && cond.keyposes.numel() > 0) {
            if (cond.keyposes.shape.back() != cfg.f_kf ||
                cond.keyposes.shape[0] != static_cast<int>(cond.key_steps.size()))
                throw std::invalid_argument("backbone: keypose feature shape mismatch");
            Var e = tp.linear(tp.tanh_(tp.linear(tp.constant(cond.keyposes), p["bb.kf.w0"], p["bb.kf.b0"])),
                              p["bb.kf.w1"], p["bb.kf.b1"]);  // (K, W)
            int K = cond.keyposes.shape[0];
            Tensor gate = Tensor::zeros({T, K});
            for (int q = 0; q < T; ++q)
                for (int k = 0; k < K; ++k) {
                    double u = (q - cond.key_steps[k]) / cfg.sigma_kf;
                    gate.at(q, k) = std::exp(-0.5 * u * u);
                }
            tokens = tp.add_mid1(tokens, tp.matmul(tp.constant(gate), e));
        }

        Tensor dq = D_q;
        if (dq.numel() == 0) dq = Tensor::zeros({T, V, V});
        tokens = attention_block(tp, p, tokens, dq, "bb.a1");

        // (T, V, W) -> (C, T) for the temporal trunk.
        Var x = swap01(tp, tp.reshape(tokens, {T, C}));
        Var h0 = tp.tanh_(tp.conv1d(x, p["bb.d1.w"], p["bb.d1.b"], 2, 1));
        Var h1 = tp.tanh_(tp.conv1d(h0, p["bb.d2.w"], p["bb.d2.b"], 2, 1));
        Var h2 = tp.tanh_(tp.conv1d(h1, p["bb.d3.w"], p["bb.d3.b"], 2, 1));
        // Conditional runs add a task embedding at the bottleneck; the
        // unconditional baseline is the fixed null offset of zero.
        if (use_cond) {
            if (cond.task < 0 || cond.task >= cfg.n_tasks)
                throw std::invalid_argument("backbone: task label out of range");
            Var task = tp.pick_rows(p["bb.task"], {cond.task});  // (1, W)
            Var taskC = tp.reshape(tp.concat_last(std::vector<Var>(V, task)), {C});
            h2 = swap01(tp, tp.add_rowvec(swap01(tp, h2), taskC));
        }
        h2 = tp.tanh_(tp.conv1d(h2, p["bb.mid.w"], p["bb.mid.b"], 1, 1));
        Var u2 = tp.add(tp.tanh_(tp.conv1d_transpose(h2, p["bb.u3.w"], p["bb.u3.b"], 2, 1)), h1);
        Var u1 = tp.add(tp.tanh_(tp.conv1d_transpose(u2, p["bb.u2.w"], p["bb.u2.b"], 2, 1)), h0);
        Var u0 = tp.add(tp.tanh_(tp.conv1d_transpose(u1, p["bb.u1.w"], p["bb.u1.b"], 2, 1)), x);
        // Multiplicative time gate (zero-init, so identity at start): additive
        // time embedding alone couples too weakly to represent a
        // time-dependent gain on the latent.
        Var film = tp.add_scalar(
            tp.linear(tp.constant(time_features(tt)), p["bb.film.w"], p["bb.film.b"]), 1.0);
        Tensor ones_row({1, T});
        for (double& o : ones_row.data) o = 1.0;
        u0 = tp.mul(u0, tp.matmul(tp.reshape(film, {C, 1}), tp.constant(ones_row)));
        // Refine stays linear: the skip path keeps an unbounded route to the
        // heads, so radial (scalar-gain) maps are representable exactly.
        Var y = tp.conv1d(u0, p["bb.refine.w"], p["bb.refine.b"], 1, 1);

        Var trunk = tp.reshape(swap01(tp, y), {T, V, W});
        trunk = attention_block(tp, p, trunk, dq, "bb.a2");
        Var flat = tp.reshape(trunk, {T * V, W});
        // Each head adds a learned radial shortcut gamma_h(t) * z (zero-init):
        // the field's dominant mode is a time-dependent gain on the latent,
        // which the conv/attention trunk approximates poorly on its own.
        Var tf = tp.constant(time_features(tt));
        Var zcol = tp.reshape(z, {T * V * cfg.d, 1});
        std::vector<Var> heads;
        for (int h = 0; h < cfg.heads; ++h) {
            std::string pre = "bb.head" + std::to_string(h);
            Var out = tp.linear(flat, p[pre + ".w"], p[pre + ".b"]);
            Var gain = tp.linear(tp.tanh_(tp.linear(tf, p[pre + ".g0.w"], p[pre + ".g0.b"])),
                                 p[pre + ".g1.w"], p[pre + ".g1.b"]);
            Var radial = tp.matmul(zcol, tp.reshape(gain, {1, 1}));
            out = tp.add(tp.reshape(out, {T, V, cfg.d}), tp.reshape(radial, {T, V, cfg.d}));
            heads.push_back(out);
        }
        return heads;
    }

    Var forward(Tape& tp, TapeBinding& p, Var z, double tt, const Conditioning& cond,
                const Tensor& D_q, int head = 0) const {
        return forward_heads(tp, p, z, tt, cond, D_q)[head];
    }

    Tensor value(const Tensor& z, double tt, const Conditioning& cond, const Tensor& D_q,
                 int head = 0) const {
        Tape tp;
        TapeBinding p(tp, params, false);
        return tp.val(forward(tp, p, tp.constant(z), tt, cond, D_q, head));
    }
};

// Pairwise entity-centroid distances per latent step, the attention bias
// input. Humans use their joint centroid, objects their translation.
inline Tensor entity_distance_bias(const SceneMotion& m, int stride) {
    int T = m.N / stride, V = m.dims.H + m.dims.O;
    Tensor D = Tensor::zeros({T, V, V});
    for (int t = 0; t < T; ++t) {
        int n = std::min(m.N - 1, t * stride + stride / 2);
        std::vector<std::array<double, 3>> c(V, {0.0, 0.0, 0.0});
        for (int h = 0; h < m.dims.H; ++h) {
            for (int j = 0; j < m.dims.J; ++j) {
                auto pj = m.joint_pos(n, h, j);
                for (int k = 0; k < 3; ++k) c[h][k] += pj[k] / m.dims.J;
            }
        }
        for (int o = 0; o < m.dims.O; ++o) {
            auto po = m.obj_trans(n, o);
            for (int k = 0; k < 3; ++k) c[m.dims.H + o][k] = po[k];
        }
        for (int i = 0; i < V; ++i)
            for (int j = 0; j < V; ++j) {
                double s = 0.0;
                for (int k = 0; k < 3; ++k) s += (c[i][k] - c[j][k]) * (c[i][k] - c[j][k]);
                D.at(t, i, j) = std::sqrt(s);
            }
    }
    return D;
}

struct TeacherConfig {
    NoiseSchedule schedule;
    BackboneConfig bb;
    int steps = 1500;
    int batch = 6;
    double lr = 2e-4;
    double lr_min_frac = 1.0;  // 1.0 keeps lr constant; <1 decays linearly to lr*frac
    double dropout = 0.1;
    double tau_floor = 1e-4;
};

struct TeacherSample {
    Tensor z0;  // (T, V, d)
    Conditioning cond;
    Tensor D_q;  // (T, V, V); empty means zeros
};

// Frozen VP-diffusion teacher. The network predicts the score-scaled
// quantity g = eps_hat / sqrt(1 - alpha_bar); eps_hat stays the public
// contract while the PF velocity uses g directly, so nothing blows up as
// tau approaches 0.
struct Teacher {
    TeacherConfig cfg;
    Backbone bb;
    bool frozen = false;

    Teacher(const TeacherConfig& c, Rng& rng) : cfg(c), bb(c.bb, rng) { cfg.schedule.validate(); }

    Tensor score_net(const Tensor& z, double tau, const Conditioning& cond, const Tensor& D_q) const {
        return bb.value(z, tau, cond, D_q, 0);
    }

    Tensor eps_hat(const Tensor& z, double tau, const Conditioning& cond, const Tensor& D_q) const {
        double b = std::sqrt(1.0 - cfg.schedule.alpha_bar(tau));
        Tensor g = score_net(z, tau, cond, D_q);
        for (double& v : g.data) v *= b;
        return g;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = 1;
        j["schedule"] = {{"beta0", cfg.schedule.beta0}, {"beta1", cfg.schedule.beta1}};
        j["backbone"] = {{"T", cfg.bb.T},           {"V", cfg.bb.V},
                         {"d", cfg.bb.d},           {"width", cfg.bb.width},
                         {"dh", cfg.bb.dh},         {"f_tr", cfg.bb.f_tr},
                         {"f_kf", cfg.bb.f_kf},     {"n_tasks", cfg.bb.n_tasks},
                         {"heads", cfg.bb.heads},   {"sigma_kf", cfg.bb.sigma_kf},
                         {"lambda_dist", cfg.bb.lambda_dist}};
        j["tau_floor"] = cfg.tau_floor;
        j["params"] = bb.params.to_json();
        j["frozen"] = frozen;
        return j;
    }

    static Teacher from_json(const nlohmann::json& j) {
        if (j.at("format_version").get<int>() != 1)
            throw ConfigError("teacher checkpoint: unsupported format_version");
        TeacherConfig cfg;
        cfg.schedule.beta0 = j.at("schedule").at("beta0");
        cfg.schedule.beta1 = j.at("schedule").at("beta1");
        const auto& b = j.at("backbone");
        cfg.bb.T = b.at("T");
        cfg.bb.V = b.at("V");
        cfg.bb.d = b.at("d");
        cfg.bb.width = b.at("width");
        cfg.bb.dh = b.at("dh");
        cfg.bb.f_tr = b.at("f_tr");
        cfg.bb.f_kf = b.at("f_kf");
        cfg.bb.n_tasks = b.at("n_tasks");
        cfg.bb.heads = b.at("heads");
        cfg.bb.sigma_kf = b.at("sigma_kf");
        cfg.bb.lambda_dist = b.at("lambda_dist");
        cfg.tau_floor = j.at("tau_floor");
        Rng dummy(0);
        Teacher t(cfg, dummy);
        t.bb.params.load_json(j.at("params"));
        t.frozen = j.at("frozen");
        return t;
    }
};

// -1/2 beta(tau) (z - eps_hat / sqrt(1 - alpha_bar)); tau clamped away from
// the alpha_bar = 1 singularity.
inline Tensor pf_velocity_from_eps(const NoiseSchedule& s, const Tensor& z, double tau,
                                   const Tensor& eps, double tau_floor = 1e-4) {
    tau = std::max(tau, tau_floor);
    double b = std::sqrt(1.0 - s.alpha_bar(tau)), half_beta = 0.5 * s.beta(tau);
    Tensor v = z;
    for (int64_t i = 0; i < v.numel(); ++i) v.data[i] = -half_beta * (z.data[i] - eps.data[i] / b);
    v.check_finite("pf_velocity");
    return v;
}

inline Tensor pf_velocity(const Teacher& t, const Tensor& z, double tau, const Conditioning& cond,
                          const Tensor& D_q) {
    if (!t.frozen) throw std::logic_error("pf_velocity: teacher not frozen");
    tau = std::max(tau, t.cfg.tau_floor);
    double half_beta = 0.5 * t.cfg.schedule.beta(tau);
    Tensor g = t.score_net(z, tau, cond, D_q);
    Tensor v = z;
    for (int64_t i = 0; i < v.numel(); ++i) v.data[i] = -half_beta * (z.data[i] - g.data[i]);
    v.check_finite("pf_velocity");
    return v;
}

// Minimizes E||eps_hat - eps||^2 with conditional dropout, then freezes.
inline Teacher train_teacher(const std::vector<TeacherSample>& data, const TeacherConfig& cfg,
                             Rng& rng) {
    if (data.empty()) throw ConfigError("train_teacher: empty dataset");
    Teacher teacher(cfg, rng);
    AdamConfig opt;
    opt.lr = cfg.lr;
    for (int step = 0; step < cfg.steps; ++step) {
        Tape tp;
        TapeBinding p(tp, teacher.bb.params, true);
        GradMap grads;
        Var loss{};
        for (int b = 0; b < cfg.batch; ++b) {
            const TeacherSample& it = data[rng.integer(data.size())];
            double tau = std::max(cfg.tau_floor, rng.uniform(0.0, 1.0));
            auto [z_tau, eps] = vp_forward(cfg.schedule, it.z0, tau, rng);
            Conditioning cond = it.cond;
            if (rng.uniform(0.0, 1.0) < cfg.dropout) cond.uncond = true;
            Var g = teacher.bb.forward(tp, p, tp.constant(z_tau), tau, cond, it.D_q, 0);
            double sb = std::sqrt(1.0 - cfg.schedule.alpha_bar(tau));
            Var term = tp.mean(tp.square(tp.sub(tp.scale(g, sb), tp.constant(eps))));
            loss = loss.valid() ? tp.add(loss, term) : term;
        }
        loss = tp.scale(loss, 1.0 / cfg.batch);
        if (!std::isfinite(tp.val(loss).data[0]))
            throw TrainingDivergence("train_teacher: non-finite loss");
        tp.backward(loss);
        p.add_grads_to(grads);
        double frac = static_cast<double>(step) / std::max(1, cfg.steps - 1);
        opt.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_min_frac) * frac);
        teacher.bb.params.adam_step(grads, opt);
    }
    teacher.frozen = true;
    return teacher;
}

}  // namespace storyflow
