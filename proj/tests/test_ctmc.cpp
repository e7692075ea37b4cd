#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "storyflow/ctmc.hpp"
#include "storyflow/fdcheck.hpp"
#include "storyflow/toygen.hpp"

using namespace storyflow;

namespace {

double softplus_ref(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

// pi(t) = pi0 exp(Q t) by plain power series; rates here are O(1).
Tensor expm_propagate(const Tensor& pi0, const Tensor& Q, double t) {
    int S = Q.shape[0];
    Tensor out = pi0;
    Tensor term = pi0;
    for (int k = 1; k <= 80; ++k) {
        Tensor next = Tensor::zeros({S});
        for (int j = 0; j < S; ++j)
            for (int s = 0; s < S; ++s) next.data[j] += term.data[s] * Q.at(s, j) * t / k;
        term = next;
        double mx = 0.0;
        for (double v : term.data) mx = std::max(mx, std::abs(v));
        for (int s = 0; s < S; ++s) out.data[s] += term.data[s];
        if (mx < 1e-18) break;
    }
    return out;
}

// Pins the net to constant rates softplus(bias) by zeroing the last layer.
void set_constant_bias(RateModel& m, double bias) {
    Tensor& w1 = m.params.value("ctmc.w1");
    for (double& v : w1.data) v = 0.0;
    Tensor& b1 = m.params.value("ctmc.b1");
    for (double& v : b1.data) v = bias;
}

Tensor simplex_point(std::initializer_list<double> vals) {
    Tensor p = Tensor::zeros({static_cast<int>(vals.size())});
    int i = 0;
    for (double v : vals) p.data[i++] = v;
    return p;
}

ToyTaskSpec carry_spec(int handoff = -1) {
    ToyTaskSpec sp;
    sp.waypoints = {{-0.7, -0.1, 0.7}, {0.0, 0.15, 0.72}, {0.7, 0.1, 0.68}};
    sp.handoff = handoff;
    return sp;
}

int argmax_row(const Tensor& t, int n) {
    int best = 0;
    for (int s = 1; s < t.shape[1]; ++s)
        if (t.at(n, s) > t.at(n, best)) best = s;
    return best;
}

int count_toggles(const std::vector<int>& states) {
    int c = 0;
    for (size_t i = 1; i < states.size(); ++i) c += states[i] != states[i - 1];
    return c;
}

}  // namespace

TEST_CASE("rate matrix rows sum to zero with nonnegative off-diagonals", "[ctmc]") {
    Rng rng(3);
    for (int S : {2, 3, 4}) {
        RateModelConfig cfg;
        cfg.S = S;
        cfg.feat_dim = 5;
        RateModel m(cfg, rng);
        for (int trial = 0; trial < 10; ++trial) {
            Tensor Q = rate_matrix(m, Tensor::randn({5}, rng));
            for (int s = 0; s < S; ++s) {
                double offsum = 0.0;
                for (int j = 0; j < S; ++j) {
                    if (j == s) continue;
                    REQUIRE(Q.at(s, j) >= 0.0);
                    offsum += Q.at(s, j);
                }
                REQUIRE(Q.at(s, s) == -offsum);
            }
        }
    }
}

TEST_CASE("rate matrix matches a by-hand network evaluation", "[ctmc]") {
    Rng rng(5);
    RateModelConfig cfg;
    cfg.feat_dim = 4;
    cfg.hidden = 7;
    RateModel m(cfg, rng);
    Tensor h = Tensor::randn({4}, rng);

    const Tensor& w0 = m.params.value("ctmc.w0");
    const Tensor& b0 = m.params.value("ctmc.b0");
    const Tensor& w1 = m.params.value("ctmc.w1");
    const Tensor& b1 = m.params.value("ctmc.b1");
    std::vector<double> hid(cfg.hidden);
    for (int i = 0; i < cfg.hidden; ++i) {
        double s = b0.data[i];
        for (int j = 0; j < cfg.feat_dim; ++j) s += w0.at(i, j) * h.data[j];
        hid[i] = std::tanh(s);
    }
    int R = cfg.S * (cfg.S - 1);
    std::vector<double> rates(R);
    for (int k = 0; k < R; ++k) {
        double s = b1.data[k];
        for (int i = 0; i < cfg.hidden; ++i) s += w1.at(k, i) * hid[i];
        rates[k] = softplus_ref(s);
    }

    Tensor Q = rate_matrix(m, h);
    for (int s = 0; s < cfg.S; ++s)
        for (int j = 0; j < cfg.S; ++j) {
            if (j == s) continue;
            int idx = s * (cfg.S - 1) + (j < s ? j : j - 1);
            REQUIRE(Q.at(s, j) == Catch::Approx(rates[idx]).margin(1e-14));
        }
}

TEST_CASE("near-zero rates freeze the occupancy", "[ctmc]") {
    Rng rng(7);
    RateModelConfig cfg;
    cfg.feat_dim = 3;
    RateModel m(cfg, rng);
    set_constant_bias(m, -40.0);

    Tensor pi0 = simplex_point({0.5, 0.2, 0.3});
    auto h_of_t = [&](double) { return Tensor::full({3}, 0.7); };
    OccupancyTrace tr = kolmogorov_integrate(m, pi0, h_of_t, 0.0, 1.0, 0.05);
    for (int s = 0; s < 3; ++s)
        REQUIRE(tr.pis.back().data[s] == Catch::Approx(pi0.data[s]).margin(1e-12));

    Tensor path = Tensor::zeros({8, 3});
    Tensor feats = Tensor::zeros({8, 3});
    for (int t = 0; t < 8; ++t)
        for (int s = 0; s < 3; ++s) path.at(t, s) = pi0.data[s];
    REQUIRE(ctmc_loss(m, path, feats, 0.1, 0.0) < 1e-30);
}

TEST_CASE("kolmogorov integration matches the matrix exponential", "[ctmc]") {
    Rng rng(11);
    RateModelConfig cfg;
    cfg.feat_dim = 4;
    RateModel m(cfg, rng);
    Tensor h = Tensor::randn({4}, rng);
    Tensor Q = rate_matrix(m, h);

    Tensor pi0 = simplex_point({1.0, 0.0, 0.0});
    auto h_of_t = [&](double) { return h; };
    OccupancyTrace tr = kolmogorov_integrate(m, pi0, h_of_t, 0.0, 1.5, 0.01);
    Tensor exact = expm_propagate(pi0, Q, 1.5);
    for (int s = 0; s < 3; ++s)
        REQUIRE(tr.pis.back().data[s] == Catch::Approx(exact.data[s]).margin(1e-6));
}

TEST_CASE("two-state relaxation follows the closed form", "[ctmc]") {
    Rng rng(13);
    RateModelConfig cfg;
    cfg.S = 2;
    cfg.feat_dim = 3;
    RateModel m(cfg, rng);
    Tensor h = Tensor::randn({3}, rng);
    Tensor Q = rate_matrix(m, h);
    double a = Q.at(0, 1), b = Q.at(1, 0);

    Tensor pi0 = simplex_point({0.9, 0.1});
    auto h_of_t = [&](double) { return h; };
    OccupancyTrace tr = kolmogorov_integrate(m, pi0, h_of_t, 0.0, 1.0, 1e-3);
    for (size_t i = 0; i < tr.times.size(); i += 100) {
        double t = tr.times[i];
        double decay = std::exp(-(a + b) * t);
        double p0 = b / (a + b) + (pi0.data[0] - b / (a + b)) * decay;
        REQUIRE(tr.pis[i].data[0] == Catch::Approx(p0).margin(1e-8));
        REQUIRE(tr.pis[i].data[1] == Catch::Approx(1.0 - p0).margin(1e-8));
    }
}

TEST_CASE("integrator error scales as the fourth power of the step", "[ctmc]") {
    Rng rng(17);
    RateModelConfig cfg;
    cfg.feat_dim = 4;
    RateModel m(cfg, rng);
    Tensor h = Tensor::randn({4}, rng);
    Tensor Q = rate_matrix(m, h);
    Tensor pi0 = simplex_point({0.6, 0.3, 0.1});
    Tensor exact = expm_propagate(pi0, Q, 1.0);
    auto h_of_t = [&](double) { return h; };

    std::vector<double> hs = {0.2, 0.1, 0.05, 0.025}, errs;
    for (double step : hs) {
        OccupancyTrace tr = kolmogorov_integrate(m, pi0, h_of_t, 0.0, 1.0, step);
        double e = 0.0;
        for (int s = 0; s < 3; ++s)
            e = std::max(e, std::abs(tr.pis.back().data[s] - exact.data[s]));
        errs.push_back(e);
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < hs.size(); ++i) {
        double x = std::log(hs[i]), y = std::log(errs[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    double n = static_cast<double>(hs.size());
    double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    INFO("errors " << errs[0] << " " << errs[1] << " " << errs[2] << " " << errs[3]);
    REQUIRE(slope > 3.7);
    REQUIRE(slope < 4.3);
}

TEST_CASE("occupancy stays on the simplex under time-varying rates", "[ctmc]") {
    Rng rng(19);
    RateModelConfig cfg;
    cfg.feat_dim = 2;
    RateModel m(cfg, rng);
    auto h_of_t = [&](double t) {
        Tensor h = Tensor::zeros({2});
        h.data[0] = std::sin(3.0 * t);
        h.data[1] = std::cos(2.0 * t);
        return h;
    };
    Tensor pi0 = simplex_point({0.4, 0.35, 0.25});
    OccupancyTrace tr = kolmogorov_integrate(m, pi0, h_of_t, 0.0, 2.0, 0.02);
    REQUIRE(tr.max_drift <= 1e-12);
    REQUIRE(tr.min_occupancy >= -1e-9);
    for (const Tensor& pi : tr.pis) {
        double sum = 0.0;
        for (double v : pi.data) {
            REQUIRE(v >= 0.0);
            sum += v;
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("integration rejects bad inputs", "[ctmc]") {
    Rng rng(23);
    RateModelConfig cfg;
    cfg.feat_dim = 2;
    RateModel m(cfg, rng);
    auto h_of_t = [&](double) { return Tensor::zeros({2}); };
    REQUIRE_THROWS_AS(
        kolmogorov_integrate(m, simplex_point({0.5, 0.2, 0.2}), h_of_t, 0.0, 1.0, 0.1),
        std::invalid_argument);
    REQUIRE_THROWS_AS(kolmogorov_integrate(m, simplex_point({0.5, 0.5}), h_of_t, 0.0, 1.0, 0.1),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(
        kolmogorov_integrate(m, simplex_point({0.4, 0.3, 0.3}), h_of_t, 0.0, 1.0, 0.0),
        ConfigError);
    RateModelConfig bad;
    bad.S = 1;
    REQUIRE_THROWS_AS(RateModel(bad, rng), ConfigError);
}

TEST_CASE("runaway rates trip the divergence guard", "[ctmc]") {
    Rng rng(29);
    RateModelConfig cfg;
    cfg.feat_dim = 2;
    RateModel m(cfg, rng);
    set_constant_bias(m, 200.0);
    auto h_of_t = [&](double) { return Tensor::zeros({2}); };
    REQUIRE_THROWS_AS(
        kolmogorov_integrate(m, simplex_point({1.0, 0.0, 0.0}), h_of_t, 0.0, 1.0, 1.0),
        SamplerDivergence);
}

TEST_CASE("ctmc loss vanishes on self-generated paths", "[ctmc]") {
    Rng rng(31);
    RateModelConfig cfg;
    cfg.feat_dim = 2;
    RateModel m(cfg, rng);
    auto h_of_t = [&](double t) {
        Tensor h = Tensor::zeros({2});
        h.data[0] = std::sin(2.0 * t);
        h.data[1] = t;
        return h;
    };
    OccupancyTrace tr = kolmogorov_integrate(m, simplex_point({1.0, 0.0, 0.0}), h_of_t, 0.0, 1.0,
                                             1e-3);
    int stride = 10, T = 101;
    Tensor path = Tensor::zeros({T, 3});
    Tensor feats = Tensor::zeros({T, 2});
    for (int t = 0; t < T; ++t) {
        const Tensor& pi = tr.pis[static_cast<size_t>(t) * stride];
        Tensor h = h_of_t(tr.times[static_cast<size_t>(t) * stride]);
        for (int s = 0; s < 3; ++s) path.at(t, s) = pi.data[s];
        for (int i = 0; i < 2; ++i) feats.at(t, i) = h.data[i];
    }
    double self_loss = ctmc_loss(m, path, feats, 0.01, 0.0);
    REQUIRE(self_loss < 1e-4);

    RateModel wrong(cfg, rng);
    set_constant_bias(wrong, 2.0);
    REQUIRE(ctmc_loss(wrong, path, feats, 0.01, 0.0) > 100.0 * self_loss);
}

TEST_CASE("entropy spread regularizer adds beta times the rate-entropy variance", "[ctmc]") {
    Rng rng(37);
    RateModelConfig cfg;
    cfg.feat_dim = 3;
    RateModel m(cfg, rng);
    int T = 9;
    Tensor path = Tensor::zeros({T, 3});
    Tensor feats = Tensor::randn({T, 3}, rng);
    for (int t = 0; t < T; ++t) {
        path.at(t, 0) = 0.5;
        path.at(t, 1) = 0.3 + 0.02 * t;
        path.at(t, 2) = 0.2 - 0.02 * t;
    }

    std::vector<double> ent(T);
    for (int t = 0; t < T; ++t) {
        Tensor h = Tensor::zeros({3});
        for (int i = 0; i < 3; ++i) h.data[i] = feats.at(t, i);
        Tensor Q = rate_matrix(m, h);
        std::vector<double> r;
        double total = 0.0;
        for (int s = 0; s < 3; ++s)
            for (int j = 0; j < 3; ++j)
                if (j != s) {
                    r.push_back(Q.at(s, j));
                    total += Q.at(s, j);
                }
        double A = 0.0;
        for (double v : r) A -= v / total * std::log(v / total + 1e-12);
        ent[t] = A;
    }
    double mean = 0.0, sq = 0.0;
    for (double a : ent) {
        mean += a / T;
        sq += a * a / T;
    }
    double var_A = sq - mean * mean;
    REQUIRE(var_A > 0.0);

    double base = ctmc_loss(m, path, feats, 0.05, 0.0);
    double reg = ctmc_loss(m, path, feats, 0.05, 0.7);
    REQUIRE(reg - base == Catch::Approx(0.7 * var_A).epsilon(1e-9));
}

TEST_CASE("dwell penalty matches the closed form", "[ctmc]") {
    Rng rng(41);
    RateModelConfig cfg;
    cfg.feat_dim = 3;
    RateModel m(cfg, rng);
    int T = 5;
    Tensor path = Tensor::zeros({T, 3});
    Tensor feats = Tensor::randn({T, 3}, rng);
    for (int t = 0; t < T; ++t) path.at(t, 0) = 1.0;

    double min_dwell = 4.0, lambda = 0.8;
    double expected = 0.0;
    for (int t = 0; t < T; ++t) {
        Tensor h = Tensor::zeros({3});
        for (int i = 0; i < 3; ++i) h.data[i] = feats.at(t, i);
        Tensor Q = rate_matrix(m, h);
        for (int s = 0; s < 3; ++s) {
            double dwell = 1.0 / (-Q.at(s, s) + 1e-9);
            double gap = std::max(0.0, min_dwell - dwell);
            expected += gap * gap;
        }
    }
    expected *= lambda / T;

    double base = ctmc_loss(m, path, feats, 0.1, 0.0);
    double with_dwell = ctmc_loss(m, path, feats, 0.1, 0.0, min_dwell, lambda);
    REQUIRE(with_dwell - base == Catch::Approx(expected).epsilon(1e-9));
    REQUIRE(ctmc_loss(m, path, feats, 0.1, 0.0, 0.0, lambda) ==
            Catch::Approx(base).margin(1e-12));
}

TEST_CASE("ctmc loss gradients agree with finite differences", "[ctmc]") {
    Rng rng(43);
    int R = 6;
    Tensor M = Tensor::randn({R, 3}, rng);
    Tensor dpi = Tensor::randn({1, 3}, rng);
    Tensor x0 = Tensor::randn({R}, rng);

    auto f = [&](Tape& t, Var x) {
        Var r = t.softplus_(x);
        Var flow = t.matmul(t.reshape(r, {1, R}), t.constant(M));
        Var resid = t.sum(t.square(t.sub(t.constant(dpi), flow)));
        Var total = t.sum(r);
        Var bcast = t.reshape(
            t.matmul(t.reshape(total, {1, 1}), t.constant(Tensor::full({1, R}, 1.0))), {R});
        Var pr = t.div(r, bcast);
        Var ent = t.scale(t.sum(t.mul(pr, t.log_eps(pr))), -1.0);
        return t.add(resid, t.square(ent));
    };
    REQUIRE(fd_check(f, x0, 1e-5).within(1e-6));
}

TEST_CASE("log_eps gradient and zero behavior", "[ctmc]") {
    Rng rng(47);
    Tensor w = Tensor::randn({6}, rng);
    Tensor x0 = Tensor::zeros({6});
    for (int i = 0; i < 6; ++i) x0.data[i] = 0.2 + 0.3 * i;
    auto f = [&](Tape& t, Var x) { return t.sum(t.mul(t.log_eps(x), t.constant(w))); };
    REQUIRE(fd_check(f, x0, 1e-6).within(1e-6));

    Tape tp;
    Var z = tp.log_eps(tp.constant(Tensor::zeros({1})));
    REQUIRE(tp.val(z).data[0] == Catch::Approx(std::log(1e-12)));
}

TEST_CASE("pseudo labels mark carry, grab and release on a toy clip", "[ctmc]") {
    SceneMotion m = make_toy_scene(carry_spec());
    CtmcThresholds th;
    Tensor lab = pseudo_labels(m, m.contacts, th);
    REQUIRE(lab.shape[0] == m.N);
    REQUIRE(lab.shape[1] == 3);
    for (int n = 0; n < m.N; ++n) {
        double sum = 0.0;
        for (int s = 0; s < 3; ++s) {
            REQUIRE(lab.at(n, s) >= 0.0);
            sum += lab.at(n, s);
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
    }

    for (int n = m.carry_lo + th.w + 1; n <= m.carry_hi - th.w - 1; ++n)
        REQUIRE(lab.at(n, kHoldCarry) > 0.9);

    // Release flip sits just past the carry window; no pair is active there,
    // so the bump is exact.
    int release = m.carry_hi + 1;
    REQUIRE(lab.at(release, kContactRelease) == Catch::Approx(1.0).margin(1e-12));
    for (int k = 1; k <= th.w; ++k)
        REQUIRE(lab.at(release + k, kContactRelease) ==
                Catch::Approx(1.0 - k / double(th.w + 1)).margin(1e-12));
    REQUIRE(lab.at(m.carry_lo, kContactRelease) > 0.45);

    for (int n = 0; n < m.carry_lo - th.w; ++n) REQUIRE(lab.at(n, kApproachWithdraw) > 0.99);
    for (int n = release + th.w + 1; n < m.N; ++n)
        REQUIRE(lab.at(n, kApproachWithdraw) > 0.99);
}

TEST_CASE("no scripted contacts yields pure approach", "[ctmc]") {
    SceneMotion m = make_toy_scene(carry_spec());
    Tensor lab = pseudo_labels(m, {}, CtmcThresholds{});
    for (int n = 0; n < m.N; ++n) {
        REQUIRE(lab.at(n, kApproachWithdraw) == 1.0);
        REQUIRE(lab.at(n, kContactRelease) == 0.0);
        REQUIRE(lab.at(n, kHoldCarry) == 0.0);
    }
}

TEST_CASE("handoff adds a contact bump inside the carry", "[ctmc]") {
    SceneMotion m = make_toy_scene(carry_spec(32));
    CtmcThresholds th;
    Tensor lab = pseudo_labels(m, m.contacts, th);
    int mid = m.handoff + th.w + 2;
    REQUIRE(lab.at(m.handoff, kContactRelease) > 0.4);
    REQUIRE(lab.at(m.handoff, kContactRelease) > 10.0 * lab.at(mid, kContactRelease));
    REQUIRE(lab.at(mid, kHoldCarry) > 0.9);
}

TEST_CASE("contact gates split occupancy into interaction and spacing", "[ctmc]") {
    ContactGates g = contact_gates(simplex_point({0.2, 0.3, 0.5}));
    REQUIRE(g.interaction == Catch::Approx(0.8));
    REQUIRE(g.spacing == Catch::Approx(0.2));

    ContactGates onehot = contact_gates(simplex_point({1.0, 0.0, 0.0}));
    REQUIRE(onehot.interaction == 0.0);
    REQUIRE(onehot.spacing == 1.0);

    REQUIRE_THROWS_AS(contact_gates(simplex_point({0.5, 0.5, 0.5})), std::invalid_argument);
    REQUIRE_THROWS_AS(contact_gates(simplex_point({-0.2, 0.7, 0.5})), std::invalid_argument);
    REQUIRE_THROWS_AS(contact_gates(simplex_point({0.5, 0.5})), std::invalid_argument);
}

TEST_CASE("ctmc features concatenate pooled latent, distances and speed", "[ctmc]") {
    Tensor z = Tensor::zeros({2, 3, 2});
    for (int v = 0; v < 3; ++v) {
        z.at(1, v, 0) = v + 1.0;
        z.at(1, v, 1) = 2.0 * (v + 1.0);
    }
    Tensor h = ctmc_features(z, 1, {0.1, 0.25}, 0.05);
    REQUIRE(h.numel() == 5);
    REQUIRE(h.data[0] == Catch::Approx(2.0));
    REQUIRE(h.data[1] == Catch::Approx(4.0));
    REQUIRE(h.data[2] == Catch::Approx(0.1));
    REQUIRE(h.data[3] == Catch::Approx(0.25));
    REQUIRE(h.data[4] == Catch::Approx(0.05));
    REQUIRE_THROWS_AS(ctmc_features(z, 2, {}, 0.0), std::invalid_argument);
}

TEST_CASE("rate model serialization round trip", "[ctmc]") {
    Rng rng(53);
    RateModelConfig cfg;
    cfg.feat_dim = 3;
    RateModel m(cfg, rng);
    RateModel back = RateModel::from_json(m.to_json());
    REQUIRE(back.params.checksum() == m.params.checksum());
    Tensor h = Tensor::randn({3}, rng);
    Tensor Qa = rate_matrix(m, h), Qb = rate_matrix(back, h);
    for (int64_t i = 0; i < Qa.numel(); ++i) REQUIRE(Qa.data[i] == Qb.data[i]);
}

TEST_CASE("fitted rates smooth jittered labels without losing the carry", "[ctmc]") {
    SceneMotion m = make_toy_scene(carry_spec());
    namespace J = joints;
    // Kick the giver's grasp past the contact threshold on isolated frames so
    // the framewise labels flicker between phases.
    for (int n : {21, 26, 31, 36, 41}) {
        m.set_joint_pos(n, 0, J::l_wrist, m.anchor_pos(n, 0, 1) + Vec3{-0.13, 0, 0});
        m.set_joint_pos(n, 0, J::r_wrist, m.anchor_pos(n, 0, 3) + Vec3{0, -0.13, 0});
    }
    CtmcThresholds th;
    Tensor lab = pseudo_labels(m, m.contacts, th);

    int N = m.N;
    std::vector<int> framewise(N);
    for (int n = 0; n < N; ++n) framewise[n] = argmax_row(lab, n);
    int label_toggles = count_toggles(framewise);
    REQUIRE(label_toggles >= 10);

    // Geometric features: smoothed mean grasp distance, object speed, phase.
    auto pair_dist = [&](int n, int joint, int anchor) {
        Vec3 j = m.joint_pos(n, 0, joint), a = m.anchor_pos(n, 0, anchor);
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += (j[k] - a[k]) * (j[k] - a[k]);
        return std::sqrt(s);
    };
    std::vector<double> dist(N), speed(N);
    for (int n = 0; n < N; ++n) {
        dist[n] = 0.5 * (pair_dist(n, J::l_wrist, 1) + pair_dist(n, J::r_wrist, 3));
        int n1 = std::max(0, std::min(N - 1, n + 1) - 1);
        Vec3 a = m.obj_trans(n1, 0), b = m.obj_trans(std::min(N - 1, n + 1), 0);
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += (b[k] - a[k]) * (b[k] - a[k]);
        speed[n] = std::sqrt(s);
    }
    Tensor feats = Tensor::zeros({N, 3});
    for (int n = 0; n < N; ++n) {
        double acc = 0.0;
        int cnt = 0;
        for (int k = std::max(0, n - 4); k <= std::min(N - 1, n + 4); ++k, ++cnt) acc += dist[k];
        feats.at(n, 0) = acc / cnt;
        feats.at(n, 1) = 10.0 * speed[n];
        feats.at(n, 2) = n / double(N - 1);
    }

    RateModelConfig cfg;
    cfg.feat_dim = 3;
    cfg.hidden = 16;
    Rng model_rng(61);
    RateModel model(cfg, model_rng);
    CtmcPath path{lab, feats, 1.0 / (N - 1)};
    double before = ctmc_loss(model, path.pi, path.feats, path.dt, 0.1);
    CtmcFitConfig fit;
    fit.steps = 400;
    fit.beta_reg = 0.1;
    fit_rate_model(model, {path}, fit, model_rng);
    REQUIRE(ctmc_loss(model, path.pi, path.feats, path.dt, 0.1) < before);

    auto h_of_t = [&](double t) {
        int n = std::min(N - 1, std::max(0, static_cast<int>(std::lround(t * (N - 1)))));
        Tensor h = Tensor::zeros({3});
        for (int i = 0; i < 3; ++i) h.data[i] = feats.at(n, i);
        return h;
    };
    OccupancyTrace tr = kolmogorov_integrate(model, simplex_point({1.0, 0.0, 0.0}), h_of_t, 0.0,
                                             1.0, 0.5 / (N - 1));
    std::vector<int> smooth;
    for (size_t i = 0; i < tr.pis.size(); i += 2) {
        Tensor row = Tensor::zeros({1, 3});
        for (int s = 0; s < 3; ++s) row.at(0, s) = tr.pis[i].data[s];
        smooth.push_back(argmax_row(row, 0));
    }
    int ctmc_toggles = count_toggles(smooth);
    INFO("framewise " << label_toggles << " ctmc " << ctmc_toggles);
    REQUIRE(ctmc_toggles <= label_toggles / 2);
    bool visits_hold = false;
    for (int s : smooth) visits_hold = visits_hold || s == kHoldCarry;
    REQUIRE(visits_hold);
}

TEST_CASE("fit_rate_model rejects empty input and diverging steps", "[ctmc]") {
    Rng rng(67);
    RateModelConfig cfg;
    cfg.feat_dim = 2;
    RateModel m(cfg, rng);
    REQUIRE_THROWS_AS(fit_rate_model(m, {}, CtmcFitConfig{}, rng), ConfigError);
}
