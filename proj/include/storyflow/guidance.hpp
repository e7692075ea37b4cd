#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "storyflow/codec.hpp"

namespace storyflow {

// Per-group multipliers of the piecewise-linear weight schedule.
struct ScheduleWeights {
    double key = 1.0, tr = 1.0, inter = 1.0, phys = 1.0;
};

struct ScheduleKnot {
    double t = 0.0;
    ScheduleWeights w;
};

struct EnergyConfig {
    double w_key3d = 1.0, w_key2d = 1.0;
    double w_tr3d = 1.0, w_tr2d = 1.0;
    double w_int = 1.0, w_phys = 1.0, w_lat = 0.1;

    double time_gate_width = 3.0;  // frames, Gaussian bump around each key frame
    double qual_rho = 0.3;         // quality decay per unit 2D reference scale
    double path_taper = 3.0;       // frames, cosine taper at stroke band edges

    double huber_scale = 0.05;     // Huber delta as a fraction of the 3D reference
    double m_space = 0.3;          // meters, pre-contact spacing margin
    double soft_sharpness = 50.0;  // soft-min sharpness per unit reference scale

    double h_st = 0.05;   // stance height threshold, fraction of leg length
    double v_st = 0.002;  // stance vertical-speed threshold, meters per frame
    double w_skate = 1.0, w_ground = 1.0, w_smooth = 1.0;

    // Toy-rig joint indices; configurable so the energies stay rig-agnostic.
    std::vector<int> foot_joints{7, 8, 10, 11};
    int hip_joint = 1, knee_joint = 4, ankle_joint = 7;

    // Sampling runs t: 1 -> 0, so keyframe weight peaks at t=1 (early solver
    // phase), interaction mid, physics at t=0.
    std::vector<ScheduleKnot> knots{{0.0, {0.2, 1.0, 0.3, 1.0}},
                                    {0.5, {0.5, 1.0, 1.0, 0.5}},
                                    {1.0, {1.0, 1.0, 0.3, 0.2}}};

    void validate() const {
        for (double w : {w_key3d, w_key2d, w_tr3d, w_tr2d, w_int, w_phys, w_lat, w_skate,
                         w_ground, w_smooth})
            if (w < 0.0) throw ConfigError("energy config: weights must be >= 0");
        if (huber_scale <= 0.0) throw ConfigError("energy config: huber_scale must be > 0");
        if (soft_sharpness <= 0.0) throw ConfigError("energy config: sharpness must be > 0");
        if (time_gate_width <= 0.0 || qual_rho <= 0.0)
            throw ConfigError("energy config: gate parameters must be > 0");
        if (knots.size() < 2 || knots.front().t != 0.0 || knots.back().t != 1.0)
            throw ConfigError("energy config: schedule knots must span [0, 1]");
        for (size_t i = 1; i < knots.size(); ++i)
            if (knots[i].t <= knots[i - 1].t)
                throw ConfigError("energy config: schedule knots must be increasing");
    }
};

inline ScheduleWeights schedule(const EnergyConfig& cfg, double t) {
    t = std::min(1.0, std::max(0.0, t));
    size_t i = 1;
    while (i + 1 < cfg.knots.size() && t > cfg.knots[i].t) ++i;
    const ScheduleKnot &a = cfg.knots[i - 1], &b = cfg.knots[i];
    double u = (t - a.t) / (b.t - a.t);
    ScheduleWeights w;
    w.key = a.w.key + u * (b.w.key - a.w.key);
    w.tr = a.w.tr + u * (b.w.tr - a.w.tr);
    w.inter = a.w.inter + u * (b.w.inter - a.w.inter);
    w.phys = a.w.phys + u * (b.w.phys - a.w.phys);
    return w;
}

// Per-sequence normalizers: skeleton height for 3D terms, sketch bounding-box
// diagonal for 2D terms, leg length for stance thresholds.
struct RefScales {
    double ref3d = 1.0, ref2d = 1.0, leg = 1.0;
};

inline RefScales reference_scales(const SceneMotion& m, const Storyboard& sb,
                                  const EnergyConfig& cfg) {
    RefScales r;
    double h = 0.0;
    for (int hh = 0; hh < m.dims.H; ++hh) {
        double lo = 1e30, hi = -1e30;
        for (int j = 0; j < m.dims.J; ++j) {
            double z = m.joint_pos(0, hh, j)[2];
            lo = std::min(lo, z);
            hi = std::max(hi, z);
        }
        h += (hi - lo) / m.dims.H;
    }
    if (h > 1e-6) r.ref3d = h;

    double ulo = 1e30, uhi = -1e30, vlo = 1e30, vhi = -1e30;
    auto take = [&](double u, double v) {
        ulo = std::min(ulo, u);
        uhi = std::max(uhi, u);
        vlo = std::min(vlo, v);
        vhi = std::max(vhi, v);
    };
    for (int64_t i = 0; i < sb.keyposes.numel(); i += 2)
        take(sb.keyposes.data[i], sb.keyposes.data[i + 1]);
    for (const auto& sp : sb.strokes)
        for (int i = 0; i < sp.pts.shape[0]; ++i) take(sp.pts.at(i, 0), sp.pts.at(i, 1));
    double diag = std::hypot(uhi - ulo, vhi - vlo);
    if (diag > 1e-9) r.ref2d = diag;

    if (m.dims.H > 0 && cfg.hip_joint < m.dims.J && cfg.ankle_joint < m.dims.J) {
        Vec3 hip = m.joint_pos(0, 0, cfg.hip_joint), knee = m.joint_pos(0, 0, cfg.knee_joint),
             ank = m.joint_pos(0, 0, cfg.ankle_joint);
        double leg = norm3(knee - hip) + norm3(ank - knee);
        if (leg > 1e-6) r.leg = leg;
    }
    return r;
}

// Exact 3D proxies from the storyboard's recorded depths.
inline Tensor lift_keyposes(const Storyboard& sb, const Camera& cam) {
    int K = sb.n_keys();
    Tensor out = Tensor::zeros({K, sb.H, sb.J, 3});
    for (int k = 0; k < K; ++k)
        for (int h = 0; h < sb.H; ++h)
            for (int j = 0; j < sb.J; ++j) {
                int64_t base = ((static_cast<int64_t>(k) * sb.H + h) * sb.J + j) * 2;
                Vec2 uv{sb.keyposes.data[base], sb.keyposes.data[base + 1]};
                Vec3 p = cam.lift(uv, sb.keypose_depths.at(k, h, j));
                for (int c = 0; c < 3; ++c)
                    out.data[((static_cast<int64_t>(k) * sb.H + h) * sb.J + j) * 3 + c] = p[c];
            }
    return out;
}

inline std::vector<Tensor> lift_strokes(const Storyboard& sb, const Camera& cam) {
    std::vector<Tensor> out;
    for (const auto& sp : sb.strokes) {
        int P = sp.pts.shape[0];
        Tensor poly = Tensor::zeros({P, 3});
        for (int i = 0; i < P; ++i) {
            Vec3 p = cam.lift({sp.pts.at(i, 0), sp.pts.at(i, 1)}, sp.depths.data[i]);
            for (int c = 0; c < 3; ++c) poly.at(i, c) = p[c];
        }
        out.push_back(std::move(poly));
    }
    return out;
}

// Everything the raw-motion energies need besides the motion itself.
struct GuidanceProblem {
    SceneDims dims;
    Camera cam;
    Storyboard sb;
    Tensor key3d;              // (K, H, J, 3) proxy keypose targets
    std::vector<Tensor> tr3d;  // per stroke (P, 3) proxy polylines
    EnergyConfig cfg;
    RefScales refs;
};

inline GuidanceProblem make_guidance_problem(const SceneMotion& ref_motion, const Storyboard& sb,
                                             const Camera& cam, EnergyConfig cfg = {}) {
    cfg.validate();
    GuidanceProblem pr;
    pr.dims = ref_motion.dims;
    pr.cam = cam;
    pr.sb = sb;
    pr.key3d = lift_keyposes(sb, cam);
    pr.tr3d = lift_strokes(sb, cam);
    pr.cfg = std::move(cfg);
    pr.refs = reference_scales(ref_motion, sb, pr.cfg);
    return pr;
}

// ---- tape helpers ----

inline Var joint_cols(Tape& tp, Var frames, const SceneDims& d, int h, int j) {
    return tp.slice_cols(frames, d.pos_off(h, j), 3);
}

inline Var anchor_cols(Tape& tp, Var frames, const SceneDims& d, int o, int a) {
    return tp.slice_cols(frames, d.anchor_off(o, a), 3);
}

// Pinhole projection of (N, 3) world points. The depth gets a smooth floor at
// 0.1 m so energies stay finite and differentiable if a probe motion puts a
// joint behind the camera; beyond ~0.7 m the floor is exactly the identity.
inline Var project_rows(Tape& tp, Var X, const Camera& cam) {
    Tensor Rt = Tensor::zeros({3, 3});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) Rt.at(i, j) = cam.R[static_cast<size_t>(j) * 3 + i];
    Tensor tvec = Tensor::zeros({3});
    for (int i = 0; i < 3; ++i) tvec.data[i] = cam.t[i];
    Var Xc = tp.add_rowvec(tp.matmul(X, tp.constant(Rt)), tp.constant(tvec));
    Var x = tp.slice_cols(Xc, 0, 1), y = tp.slice_cols(Xc, 1, 1), z = tp.slice_cols(Xc, 2, 1);
    const double beta = 50.0, floor = 0.1;
    Var zs = tp.add_scalar(
        tp.scale(tp.softplus_(tp.scale(tp.add_scalar(z, -floor), beta)), 1.0 / beta), floor);
    Var u = tp.add_scalar(tp.scale(tp.div(x, zs), cam.fx), cam.cx);
    Var v = tp.add_scalar(tp.scale(tp.div(y, zs), cam.fy), cam.cy);
    return tp.concat_last({u, v});
}

// Soft closest-point distance from one point to a polyline.
inline double polyline_soft_dist(const Tensor& p, const Tensor& poly, double sharpness) {
    if (poly.shape[0] < 2) throw std::invalid_argument("polyline_soft_dist: need >= 2 points");
    if (sharpness <= 0.0) throw std::invalid_argument("polyline_soft_dist: sharpness must be > 0");
    Tape tp;
    Var pt = tp.constant(p.reshaped({1, static_cast<int>(p.numel())}));
    return tp.val(tp.polyline_soft_dist(pt, poly, sharpness)).data[0];
}

// ---- gates ----

inline double time_gate(double n, double key_frame, double width) {
    double d = (n - key_frame) / width;
    return std::exp(-0.5 * d * d);
}

// 1 inside [lo, hi], cosine-tapered to 0 over `taper` frames at each edge.
inline double path_gate(int n, int lo, int hi, double taper) {
    if (n < lo || n > hi) return 0.0;
    double edge = std::min(n - lo, hi - n);
    if (edge >= taper) return 1.0;
    return 0.5 * (1.0 - std::cos(M_PI * (edge + 1) / (taper + 1)));
}

namespace detail {

inline std::vector<int> gate_window(int center, int N, double width) {
    int half = static_cast<int>(std::ceil(2.0 * width));
    std::vector<int> rows;
    for (int n = std::max(0, center - half); n <= std::min(N - 1, center + half); ++n)
        rows.push_back(n);
    return rows;
}

}  // namespace detail

// ---- energies (scalar Vars on the tape; frames is (N, d_full) raw motion) ----

// Keypose energy: 3D residuals at the key frames against lifted proxies, plus
// a 2D reprojection term spread over a Gaussian frame window around each key
// and scaled by per-annotation quality.
inline Var e_key_on(Tape& tp, Var frames, const GuidanceProblem& pr) {
    const Storyboard& sb = pr.sb;
    int N = tp.val(frames).shape[0];
    int K = sb.n_keys();
    Var sq3{}, sq2{};
    int count3 = 0;
    double qsum = 0.0;
    for (int k = 0; k < K; ++k) {
        int nk = sb.key_frames[k];
        std::vector<int> window = detail::gate_window(nk, N, pr.cfg.time_gate_width);
        int Wn = static_cast<int>(window.size());
        Tensor gate = Tensor::zeros({Wn});
        double gsum = 0.0;
        for (int i = 0; i < Wn; ++i) {
            gate.data[i] = time_gate(window[i], nk, pr.cfg.time_gate_width);
            gsum += gate.data[i];
        }
        for (double& g : gate.data) g /= gsum;
        for (int h = 0; h < sb.H; ++h)
            for (int j = 0; j < sb.J; ++j) {
                if (!sb.chi_active(nk, h, j)) continue;
                Var X = joint_cols(tp, frames, pr.dims, h, j);
                Tensor t3 = Tensor::zeros({1, 3});
                for (int c = 0; c < 3; ++c)
                    t3.at(0, c) =
                        pr.key3d.data[((static_cast<int64_t>(k) * sb.H + h) * sb.J + j) * 3 + c];
                Var r3 = tp.sum(tp.square(tp.sub(tp.pick_rows(X, {nk}), tp.constant(t3))));
                sq3 = sq3.valid() ? tp.add(sq3, r3) : r3;
                ++count3;

                int64_t b2 = ((static_cast<int64_t>(k) * sb.H + h) * sb.J + j) * 2;
                Vec2 uv{sb.keyposes.data[b2], sb.keyposes.data[b2 + 1]};
                Vec3 proxy{t3.at(0, 0), t3.at(0, 1), t3.at(0, 2)};
                Vec2 reproj = pr.cam.project(proxy);
                double resid = std::hypot(reproj[0] - uv[0], reproj[1] - uv[1]);
                double qual = std::exp(-resid / (pr.cfg.qual_rho * pr.refs.ref2d));
                qsum += qual;

                Var P2 = project_rows(tp, tp.pick_rows(X, window), pr.cam);
                Tensor t2 = Tensor::zeros({Wn, 2});
                for (int i = 0; i < Wn; ++i) {
                    t2.at(i, 0) = uv[0];
                    t2.at(i, 1) = uv[1];
                }
                Var r2 = tp.sum_last(tp.square(tp.sub(P2, tp.constant(t2))));  // (Wn,)
                Var w2 = tp.sum(tp.mul(r2, tp.constant(gate)));
                w2 = tp.scale(w2, qual);
                sq2 = sq2.valid() ? tp.add(sq2, w2) : w2;
            }
    }
    Var out = tp.constant(0.0);
    if (sq3.valid())
        out = tp.add(out, tp.scale(sq3, pr.cfg.w_key3d / (count3 * pr.refs.ref3d * pr.refs.ref3d)));
    if (sq2.valid() && qsum > 0.0)
        out = tp.add(out, tp.scale(sq2, pr.cfg.w_key2d / (qsum * pr.refs.ref2d * pr.refs.ref2d)));
    return out;
}

// Trajectory energy: squared soft closest-point distance to the lifted proxy
// polyline over each stroke's frame band, plus a path-gated, quality-scaled
// 2D term against the sketch polylines.
inline Var e_tr_on(Tape& tp, Var frames, const GuidanceProblem& pr) {
    int N = tp.val(frames).shape[0];
    Var sq3{}, sq2{};
    int count3 = 0;
    double wsum2 = 0.0;
    double sharp3 = pr.cfg.soft_sharpness / pr.refs.ref3d;
    double sharp2 = pr.cfg.soft_sharpness / pr.refs.ref2d;
    for (size_t s = 0; s < pr.sb.strokes.size(); ++s) {
        const StrokePath& sp = pr.sb.strokes[s];
        int lo = std::max(0, sp.frame_lo), hi = std::min(N - 1, sp.frame_hi);
        if (hi < lo) continue;
        std::vector<int> band;
        for (int n = lo; n <= hi; ++n) band.push_back(n);
        int B = static_cast<int>(band.size());
        Var X = tp.pick_rows(joint_cols(tp, frames, pr.dims, sp.human, sp.joint), band);

        Var d3 = tp.polyline_soft_dist(X, pr.tr3d[s], sharp3);
        Var r3 = tp.sum(tp.square(d3));
        sq3 = sq3.valid() ? tp.add(sq3, r3) : r3;
        count3 += B;

        double resid = 0.0;
        for (int i = 0; i < sp.pts.shape[0]; ++i) {
            Vec3 p{pr.tr3d[s].at(i, 0), pr.tr3d[s].at(i, 1), pr.tr3d[s].at(i, 2)};
            Vec2 uv = pr.cam.project(p);
            resid += std::hypot(uv[0] - sp.pts.at(i, 0), uv[1] - sp.pts.at(i, 1));
        }
        resid /= sp.pts.shape[0];
        double qual = std::exp(-resid / (pr.cfg.qual_rho * pr.refs.ref2d));

        Tensor gate = Tensor::zeros({B});
        double gsum = 0.0;
        for (int i = 0; i < B; ++i) {
            gate.data[i] = path_gate(band[i], lo, hi, pr.cfg.path_taper);
            gsum += gate.data[i];
        }
        if (gsum > 0.0) {
            for (double& g : gate.data) g /= gsum;
            Var d2 = tp.polyline_soft_dist(project_rows(tp, X, pr.cam), sp.pts, sharp2);
            Var r2 = tp.scale(tp.sum(tp.mul(tp.square(d2), tp.constant(gate))), qual);
            sq2 = sq2.valid() ? tp.add(sq2, r2) : r2;
            wsum2 += qual;
        }
    }
    Var out = tp.constant(0.0);
    if (sq3.valid())
        out = tp.add(out, tp.scale(sq3, pr.cfg.w_tr3d / (count3 * pr.refs.ref3d * pr.refs.ref3d)));
    if (sq2.valid() && wsum2 > 0.0)
        out = tp.add(out, tp.scale(sq2, pr.cfg.w_tr2d / (wsum2 * pr.refs.ref2d * pr.refs.ref2d)));
    return out;
}

// Optional per-frame multipliers from the CTMC occupancy: `inter` weights the
// in-window contact residuals, `spacing` the pre-window crowding penalty.
struct GuidanceGates {
    Tensor inter;    // (N,)
    Tensor spacing;  // (N,)
};

// Contact energy: Huber deviation of joint-anchor distance from the scripted
// margin inside each contact window, plus a pre-window spacing penalty
// max(0, m_space - d)^2 that discourages premature crowding.
inline Var e_int_on(Tape& tp, Var frames, const GuidanceProblem& pr,
                    const GuidanceGates* gates = nullptr) {
    int N = tp.val(frames).shape[0];
    double delta = pr.cfg.huber_scale * pr.refs.ref3d;
    Var hub{}, spc{};
    double hub_count = 0.0, spc_count = 0.0;
    for (const ContactSpec& c : pr.sb.contacts) {
        int lo = std::max(0, c.frame_lo), hi = c.frame_hi < 0 ? N - 1 : std::min(N - 1, c.frame_hi);
        Var Xj = joint_cols(tp, frames, pr.dims, c.human, c.joint);
        Var Xa = anchor_cols(tp, frames, pr.dims, c.object, c.anchor);
        Var d = tp.sqrt_eps(tp.sum_last(tp.square(tp.sub(Xj, Xa))));  // (N,)
        if (hi >= lo) {
            std::vector<int> rows;
            Tensor w = Tensor::zeros({hi - lo + 1});
            for (int n = lo; n <= hi; ++n) {
                rows.push_back(n);
                double g = gates && gates->inter.numel() == N ? gates->inter.data[n] : 1.0;
                w.data[n - lo] = g;
                hub_count += g;
            }
            Var r = tp.huber(tp.add_scalar(tp.pick_rows(d, rows), -c.margin), delta);
            Var term = tp.sum(tp.mul(r, tp.constant(w)));
            hub = hub.valid() ? tp.add(hub, term) : term;
        }
        if (lo > 0) {
            std::vector<int> rows;
            Tensor w = Tensor::zeros({lo});
            for (int n = 0; n < lo; ++n) {
                rows.push_back(n);
                double g = gates && gates->spacing.numel() == N ? gates->spacing.data[n] : 1.0;
                w.data[n] = g;
                spc_count += g;
            }
            Var gap = tp.relu(tp.add_scalar(tp.scale(tp.pick_rows(d, rows), -1.0), pr.cfg.m_space));
            Var term = tp.sum(tp.mul(tp.square(gap), tp.constant(w)));
            spc = spc.valid() ? tp.add(spc, term) : term;
        }
    }
    Var out = tp.constant(0.0);
    if (hub.valid() && hub_count > 0.0) out = tp.add(out, tp.scale(hub, 1.0 / hub_count));
    if (spc.valid() && spc_count > 0.0) out = tp.add(out, tp.scale(spc, 1.0 / spc_count));
    return tp.scale(out, pr.cfg.w_int);
}

// Physical plausibility: stance-gated horizontal foot velocity, ground
// penetration, and second-difference smoothness on joint blocks and object
// translations. Stance gates come from the motion values and act as
// constants, so gradients hold away from the gate boundaries.
inline Var e_phys_on(Tape& tp, Var frames, const GuidanceProblem& pr) {
    const Tensor& fv = tp.val(frames);
    int N = fv.shape[0];
    const SceneDims& d = pr.dims;
    double z_th = pr.cfg.h_st * pr.refs.leg;

    Var skate{}, ground{}, smooth{};
    double stance_count = 0.0;
    int64_t ground_count = 0, smooth_count = 0;

    for (int h = 0; h < d.H; ++h) {
        for (int j : pr.cfg.foot_joints) {
            if (j >= d.J) continue;
            Var X = joint_cols(tp, frames, d, h, j);
            Var vel = tp.sub(tp.slice_rows(X, 1, N - 1), tp.slice_rows(X, 0, N - 1));
            Tensor w = Tensor::zeros({N - 1});
            for (int n = 0; n < N - 1; ++n) {
                double z0 = fv.at(n, d.pos_off(h, j) + 2), z1 = fv.at(n + 1, d.pos_off(h, j) + 2);
                bool stance = z0 < z_th && z1 < z_th && std::abs(z1 - z0) < pr.cfg.v_st;
                w.data[n] = stance ? 1.0 : 0.0;
                stance_count += w.data[n];
            }
            Var hsq = tp.sum_last(tp.square(tp.slice_cols(vel, 0, 2)));  // (N-1,)
            Var term = tp.sum(tp.mul(hsq, tp.constant(w)));
            skate = skate.valid() ? tp.add(skate, term) : term;
        }
        for (int j = 0; j < d.J; ++j) {
            Var z = tp.slice_cols(frames, d.pos_off(h, j) + 2, 1);
            Var pen = tp.sum(tp.square(tp.relu(tp.scale(z, -1.0))));
            ground = ground.valid() ? tp.add(ground, pen) : pen;
            ground_count += N;
        }
        Var blk = tp.slice_cols(frames, d.pos_off(h, 0), 9 * d.J);
        Var d2 = tp.add(tp.sub(tp.slice_rows(blk, 2, N - 2), tp.scale(tp.slice_rows(blk, 1, N - 2), 2.0)),
                        tp.slice_rows(blk, 0, N - 2));
        Var term = tp.sum(tp.square(d2));
        smooth = smooth.valid() ? tp.add(smooth, term) : term;
        smooth_count += static_cast<int64_t>(N - 2) * 9 * d.J;
    }
    for (int o = 0; o < d.O; ++o) {
        Var X = tp.slice_cols(frames, d.obj_base(o), 3);
        Var z = tp.slice_cols(frames, d.obj_base(o) + 2, 1);
        Var pen = tp.sum(tp.square(tp.relu(tp.scale(z, -1.0))));
        ground = ground.valid() ? tp.add(ground, pen) : pen;
        ground_count += N;
        Var d2 = tp.add(tp.sub(tp.slice_rows(X, 2, N - 2), tp.scale(tp.slice_rows(X, 1, N - 2), 2.0)),
                        tp.slice_rows(X, 0, N - 2));
        Var term = tp.sum(tp.square(d2));
        smooth = smooth.valid() ? tp.add(smooth, term) : term;
        smooth_count += static_cast<int64_t>(N - 2) * 3;
    }

    Var out = tp.constant(0.0);
    if (skate.valid() && stance_count > 0.0)
        out = tp.add(out, tp.scale(skate, pr.cfg.w_skate / stance_count));
    if (ground.valid())
        out = tp.add(out, tp.scale(ground, pr.cfg.w_ground / static_cast<double>(ground_count)));
    if (smooth.valid())
        out = tp.add(out, tp.scale(smooth, pr.cfg.w_smooth / static_cast<double>(smooth_count)));
    return tp.scale(out, pr.cfg.w_phys);
}

// Latent embedding hook: maps a latent Var to an embedding Var on the tape.
using LatentEmbed = std::function<Var(Tape&, Var)>;

// Latent energy: squared distance from the latent's embedding to each frozen
// 2D control embedding. Gradient lives entirely in latent space.
inline Var e_lat_on(Tape& tp, Var z, const LatentEmbed& embed, const Tensor& targets) {
    Var emb = embed(tp, z);  // (E,)
    int E = static_cast<int>(tp.val(emb).numel());
    if (targets.shape.back() != E) throw std::invalid_argument("e_lat: embedding dim mismatch");
    int Y = static_cast<int>(targets.numel()) / E;
    Var out{};
    for (int y = 0; y < Y; ++y) {
        Tensor s = Tensor::zeros({E});
        for (int i = 0; i < E; ++i) s.data[i] = targets.data[static_cast<int64_t>(y) * E + i];
        Var r = tp.sum(tp.square(tp.sub(emb, tp.constant(s))));
        out = out.valid() ? tp.add(out, r) : r;
    }
    return out.valid() ? out : tp.constant(0.0);
}

// ---- value + gradient wrappers ----

struct EnergyTerm {
    double value = 0.0;
    Tensor grad;
};

template <typename Builder>
EnergyTerm eval_energy(const Builder& build, const Tensor& x) {
    Tape tp;
    Var xv = tp.leaf(x, true);
    Var e = build(tp, xv);
    EnergyTerm out;
    out.value = tp.val(e).data[0];
    if (!std::isfinite(out.value)) throw std::runtime_error("energy: non-finite value");
    tp.backward(e);
    out.grad = tp.grad(xv);
    return out;
}

inline EnergyTerm e_key(const Tensor& frames, const GuidanceProblem& pr) {
    return eval_energy([&](Tape& tp, Var f) { return e_key_on(tp, f, pr); }, frames);
}

inline EnergyTerm e_tr(const Tensor& frames, const GuidanceProblem& pr) {
    return eval_energy([&](Tape& tp, Var f) { return e_tr_on(tp, f, pr); }, frames);
}

inline EnergyTerm e_int(const Tensor& frames, const GuidanceProblem& pr,
                        const GuidanceGates* gates = nullptr) {
    return eval_energy([&](Tape& tp, Var f) { return e_int_on(tp, f, pr, gates); }, frames);
}

inline EnergyTerm e_phys(const Tensor& frames, const GuidanceProblem& pr) {
    return eval_energy([&](Tape& tp, Var f) { return e_phys_on(tp, f, pr); }, frames);
}

inline EnergyTerm e_lat(const Tensor& z, const LatentEmbed& embed, const Tensor& targets) {
    return eval_energy([&](Tape& tp, Var zv) { return e_lat_on(tp, zv, embed, targets); }, z);
}

// Schedule-weighted sum of the raw-motion energies.
inline Var raw_energy_on(Tape& tp, Var frames, const GuidanceProblem& pr, double t,
                         const GuidanceGates* gates = nullptr) {
    ScheduleWeights s = schedule(pr.cfg, t);
    Var e = tp.scale(e_key_on(tp, frames, pr), s.key);
    e = tp.add(e, tp.scale(e_tr_on(tp, frames, pr), s.tr));
    e = tp.add(e, tp.scale(e_int_on(tp, frames, pr, gates), s.inter));
    e = tp.add(e, tp.scale(e_phys_on(tp, frames, pr), s.phys));
    return e;
}

inline double raw_energy(const Tensor& frames, const GuidanceProblem& pr, double t,
                         const GuidanceGates* gates = nullptr) {
    Tape tp;
    return tp.val(raw_energy_on(tp, tp.constant(frames), pr, t, gates)).data[0];
}

// Differentiable decode to raw frames: per-entity latents (d, T_lat) through
// the codec decoder, denormalized and assembled as (N, d_full). Used as the
// exact-gradient oracle for the surrogate path.
inline Var decoded_frames_on(Tape& tp, const Codec& codec, const std::vector<Var>& z_entity) {
    int V = codec.cfg.n_entities();
    if (static_cast<int>(z_entity.size()) != V)
        throw std::invalid_argument("decoded_frames_on: entity count mismatch");
    TapeBinding p(tp, codec.params, false);
    std::vector<Var> blocks;
    int col = 0;
    for (int v = 0; v < V; ++v) {
        Var y = codec.decode_entity(tp, p, z_entity[v], v);  // (D_v, N) normalized
        const Tensor& yv = tp.val(y);
        int Dv = yv.shape[0], N = yv.shape[1];
        Tensor sd = Tensor::zeros({Dv, N}), mn = Tensor::zeros({Dv, N});
        for (int i = 0; i < Dv; ++i)
            for (int n = 0; n < N; ++n) {
                sd.at(i, n) = codec.feat_std.data[col + i];
                mn.at(i, n) = codec.feat_mean.data[col + i];
            }
        blocks.push_back(tp.transpose2(tp.add(tp.mul(y, tp.constant(sd)), tp.constant(mn))));
        col += Dv;
    }
    return tp.concat_last(blocks);
}

// ---- learned potential over latents ----

struct PotentialConfig {
    int hidden = 32;
    double lr = 1e-3;
    int steps_margin = 400;
    int steps_cd = 120;
    int batch = 8;
    double margin = 1.0;
    int langevin_steps = 10;
    double langevin_eta = 5e-3;

    void validate() const {
        if (hidden < 1 || batch < 1) throw ConfigError("potential: hidden and batch must be >= 1");
        if (lr <= 0.0 || margin <= 0.0) throw ConfigError("potential: lr and margin must be > 0");
        if (langevin_steps < 0 || langevin_eta < 0.0)
            throw ConfigError("potential: langevin settings must be >= 0");
    }
};

// Scalar potential on latents; input is the flattened latent mean-pooled over
// latent time to keep the parameter count small.
struct Potential {
    PotentialConfig cfg;
    int in_dim = 0;  // V * d
    ParamStore params;
    Mlp net;
    bool frozen = false;

    Potential(int in_dim_, const PotentialConfig& c, Rng& rng)
        : cfg((c.validate(), c)),
          in_dim(in_dim_),
          net(params, "pot", {in_dim_, c.hidden, 1}, Act::tanh, Act::identity, rng) {}

    Var value_on(Tape& tp, TapeBinding& p, Var z) const {
        const Tensor& zv = tp.val(z);
        int T = zv.shape[0];
        int F = static_cast<int>(zv.numel()) / T;
        if (F != in_dim) throw std::invalid_argument("potential: latent dim mismatch");
        Var pooled = tp.mean_axis0(tp.reshape(z, {T, F}));
        return net.forward(tp, p, pooled);  // (1,)
    }

    double value(const Tensor& z) const {
        Tape tp;
        TapeBinding p(tp, params, false);
        return tp.val(value_on(tp, p, tp.constant(z))).data[0];
    }

    Tensor grad_z(const Tensor& z) const {
        Tape tp;
        TapeBinding p(tp, params, false);
        Var zv = tp.leaf(z, true);
        tp.backward(value_on(tp, p, zv));
        return tp.grad(zv);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = 1;
        j["in_dim"] = in_dim;
        j["hidden"] = cfg.hidden;
        j["params"] = params.to_json();
        j["frozen"] = frozen;
        return j;
    }

    static Potential from_json(const nlohmann::json& j) {
        if (j.at("format_version").get<int>() != 1)
            throw ConfigError("potential checkpoint: unsupported format_version");
        PotentialConfig cfg;
        cfg.hidden = j.at("hidden");
        Rng dummy(0);
        Potential pot(j.at("in_dim"), cfg, dummy);
        pot.params.load_json(j.at("params"));
        pot.frozen = j.at("frozen");
        return pot;
    }
};

// Unadjusted Langevin chain descending V: z <- z - eta grad V + sqrt(2 eta) xi.
inline Tensor langevin_chain(const Potential& pot, Tensor z, int steps, double eta, Rng& rng) {
    for (int k = 0; k < steps; ++k) {
        Tensor g = pot.grad_z(z);
        double sd = std::sqrt(2.0 * eta);
        for (int64_t i = 0; i < z.numel(); ++i) z.data[i] += -eta * g.data[i] + sd * rng.normal();
        z.check_finite("langevin_chain");
    }
    return z;
}

inline double ranking_accuracy(const Potential& pot, const std::vector<Tensor>& positives,
                               const std::vector<Tensor>& negatives) {
    size_t n = std::min(positives.size(), negatives.size());
    if (n == 0) throw std::invalid_argument("ranking_accuracy: empty inputs");
    int ok = 0;
    for (size_t i = 0; i < n; ++i) ok += pot.value(positives[i]) < pot.value(negatives[i]);
    return static_cast<double>(ok) / n;
}

// Phase A: margin ranking pushing V(data) below V(noise). Phase B:
// contrastive divergence with Langevin negatives (0 chain steps degenerates
// to phase A's positives-vs-initial-noise comparison).
inline Potential train_potential(const std::vector<Tensor>& positives,
                                 const std::vector<Tensor>& noise, const PotentialConfig& cfg,
                                 Rng& rng) {
    if (positives.empty() || noise.empty())
        throw ConfigError("train_potential: need positives and noise samples");
    int T = positives[0].shape[0];
    int F = static_cast<int>(positives[0].numel()) / T;
    Potential pot(F, cfg, rng);
    AdamConfig opt;
    opt.lr = cfg.lr;

    auto step_batch = [&](const std::function<Var(Tape&, TapeBinding&)>& make_loss) {
        Tape tp;
        TapeBinding p(tp, pot.params, true);
        Var loss = make_loss(tp, p);
        double lv = tp.val(loss).data[0];
        if (!std::isfinite(lv)) throw TrainingDivergence("train_potential: non-finite loss");
        tp.backward(loss);
        GradMap grads;
        p.add_grads_to(grads);
        pot.params.adam_step(grads, opt);
    };

    for (int step = 0; step < cfg.steps_margin; ++step) {
        step_batch([&](Tape& tp, TapeBinding& p) {
            Var loss{};
            for (int b = 0; b < cfg.batch; ++b) {
                const Tensor& pos = positives[rng.integer(positives.size())];
                const Tensor& neg = noise[rng.integer(noise.size())];
                Var vp = pot.value_on(tp, p, tp.constant(pos));
                Var vn = pot.value_on(tp, p, tp.constant(neg));
                Var hinge = tp.relu(tp.add_scalar(tp.sub(vp, vn), cfg.margin));
                loss = loss.valid() ? tp.add(loss, hinge) : hinge;
            }
            return tp.scale(loss, 1.0 / cfg.batch);
        });
    }
    for (int step = 0; step < cfg.steps_cd; ++step) {
        std::vector<Tensor> negs;
        for (int b = 0; b < cfg.batch; ++b)
            negs.push_back(langevin_chain(pot, noise[rng.integer(noise.size())],
                                          cfg.langevin_steps, cfg.langevin_eta, rng));
        step_batch([&](Tape& tp, TapeBinding& p) {
            Var loss{};
            for (int b = 0; b < cfg.batch; ++b) {
                const Tensor& pos = positives[rng.integer(positives.size())];
                Var d = tp.sub(pot.value_on(tp, p, tp.constant(pos)),
                               pot.value_on(tp, p, tp.constant(negs[b])));
                loss = loss.valid() ? tp.add(loss, d) : d;
            }
            return tp.scale(loss, 1.0 / cfg.batch);
        });
    }
    pot.frozen = true;
    return pot;
}

// ---- Lyapunov descent loss ----

// Hinge on the descent condition grad V . v <= -kappa ||grad V||^2.
inline Var lyapunov_loss_on(Tape& tp, Var v, const Tensor& grad_V, double kappa) {
    double g2 = 0.0;
    for (double g : grad_V.data) g2 += g * g;
    Var dot = tp.sum(tp.mul(v, tp.constant(grad_V)));
    Var hinge = tp.relu(tp.add_scalar(dot, kappa * g2));
    return tp.square(hinge);
}

inline double lyapunov_loss(const Tensor& v, const Tensor& grad_V, double kappa) {
    if (v.numel() != grad_V.numel())
        throw std::invalid_argument("lyapunov_loss: shape mismatch");
    Tape tp;
    return tp.val(lyapunov_loss_on(tp, tp.constant(v), grad_V, kappa)).data[0];
}

// ---- assembled guidance ----

struct GuidanceVectors {
    Tensor u_raw;  // (T_lat, V, d) descent direction from raw-motion energies
    Tensor u_lat;  // (T_lat, V, d) descent direction from the latent energy
    double raw_value = 0.0, lat_value = 0.0;
};

// u_raw = -raw_scale B (dE/dmotion), mapped through the decoder-transpose
// surrogate in the codec's normalized feature space; u_lat = -eta_lat dE_lat/dz.
inline GuidanceVectors guidance_vectors(const Tensor& z, double t, const Codec& codec,
                                        const JacobianSurrogate& sur, const GuidanceProblem& pr,
                                        const GuidanceGates* gates = nullptr,
                                        const LatentEmbed* embed = nullptr,
                                        const Tensor* lat_targets = nullptr,
                                        double raw_scale = 1.0, double eta_lat = 1.0) {
    GuidanceVectors out;
    SceneMotion motion = codec.decode(z);
    EnergyTerm raw = eval_energy(
        [&](Tape& tp, Var f) { return raw_energy_on(tp, f, pr, t, gates); }, motion.frames);
    out.raw_value = raw.value;
    Tensor gnorm = raw.grad;
    int D = motion.dims.d_full();
    for (int n = 0; n < motion.N; ++n)
        for (int c = 0; c < D; ++c) gnorm.at(n, c) *= codec.feat_std.data[c];
    out.u_raw = precondition(sur, codec, gnorm);
    for (double& x : out.u_raw.data) x *= -raw_scale;

    if (embed && lat_targets) {
        EnergyTerm lat = e_lat(z, *embed, *lat_targets);
        out.lat_value = lat.value;
        out.u_lat = lat.grad;
        for (double& x : out.u_lat.data) x *= -eta_lat;
    } else {
        out.u_lat = Tensor::zeros(z.shape);
    }
    return out;
}

// V(z, t): learned potential plus scheduled raw energies plus the latent term.
inline double total_potential(const Tensor& z, double t, const Codec& codec,
                              const GuidanceProblem& pr, const GuidanceGates* gates = nullptr,
                              const Potential* pot = nullptr, const LatentEmbed* embed = nullptr,
                              const Tensor* lat_targets = nullptr, double lambda_lat = 0.0) {
    double v = raw_energy(codec.decode(z).frames, pr, t, gates);
    if (pot) v += pot->value(z);
    if (embed && lat_targets) {
        Tape tp;
        v += lambda_lat * tp.val(e_lat_on(tp, tp.constant(z), *embed, *lat_targets)).data[0];
    }
    return v;
}

struct EnergyReport {
    double key = 0.0, tr = 0.0, inter = 0.0, phys = 0.0, lat = 0.0, total = 0.0;
    Tensor grad_motion;  // (N, d_full), of the schedule-weighted raw sum
    Tensor grad_latent;  // (T_lat, V, d), of the latent term (empty if unused)

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["key"] = key;
        j["tr"] = tr;
        j["interaction"] = inter;
        j["physics"] = phys;
        j["latent"] = lat;
        j["total"] = total;
        j["grad_motion_rms"] = grad_motion.numel()
                                   ? std::sqrt([&] {
                                         double s = 0.0;
                                         for (double g : grad_motion.data) s += g * g;
                                         return s / grad_motion.numel();
                                     }())
                                   : 0.0;
        return j;
    }
};

inline EnergyReport report_energies(const Tensor& frames, const GuidanceProblem& pr, double t,
                                    const GuidanceGates* gates = nullptr,
                                    const Tensor* z = nullptr, const LatentEmbed* embed = nullptr,
                                    const Tensor* lat_targets = nullptr) {
    EnergyReport rep;
    rep.key = e_key(frames, pr).value;
    rep.tr = e_tr(frames, pr).value;
    rep.inter = e_int(frames, pr, gates).value;
    rep.phys = e_phys(frames, pr).value;
    EnergyTerm raw =
        eval_energy([&](Tape& tp, Var f) { return raw_energy_on(tp, f, pr, t, gates); }, frames);
    rep.grad_motion = raw.grad;
    rep.total = raw.value;
    if (z && embed && lat_targets) {
        EnergyTerm lat = e_lat(*z, *embed, *lat_targets);
        rep.lat = lat.value;
        rep.grad_latent = lat.grad;
        rep.total += pr.cfg.w_lat * lat.value;
    }
    return rep;
}

}  // namespace storyflow
