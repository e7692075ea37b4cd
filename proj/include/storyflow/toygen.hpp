#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "storyflow/rng.hpp"
#include "storyflow/scene.hpp"

namespace storyflow {

namespace joints {
enum : int {
    pelvis = 0, l_hip = 1, r_hip = 2, spine1 = 3, l_knee = 4, r_knee = 5,
    spine2 = 6, l_ankle = 7, r_ankle = 8, spine3 = 9, l_foot = 10, r_foot = 11,
    neck = 12, l_collar = 13, r_collar = 14, head = 15, l_shoulder = 16,
    r_shoulder = 17, l_elbow = 18, r_elbow = 19, l_wrist = 20, r_wrist = 21,
    count = 22
};
}

namespace body {
constexpr double pelvis_height = 0.92;
constexpr double hip_lateral = 0.09;
constexpr double thigh = 0.40;
constexpr double shin = 0.40;
constexpr double ankle_height = 0.06;
constexpr double ankle_back = 0.11;
constexpr double foot_z = 0.02;
constexpr double spine_seg = 0.12;       // pelvis->spine1->spine2, spine3 is +0.11
constexpr double spine3_up = 0.11;
constexpr double neck_up = 0.10;
constexpr double head_up = 0.14;
constexpr double collar_lateral = 0.06;
constexpr double shoulder_lateral = 0.18;
constexpr double shoulder_up = 0.02;
constexpr double upper_arm = 0.26;
constexpr double forearm = 0.25;
constexpr double root_offset = 0.32;     // carrier root distance from box center
constexpr double crouch_drop = 0.04;     // pelvis sits at anchor height minus this
constexpr double grasp_out = 0.005;      // wrist offset outward from the anchor face
constexpr double stance_z = 0.05;        // stance rule shared with metrics/energies
}  // namespace body

struct ToyTaskSpec {
    int N = 64;
    std::vector<Vec3> waypoints;  // object-center path over the carry window
    int carry_lo = 16, carry_hi = 48;
    int handoff = -1;  // frame within the carry window, or -1
    int task_label = 0;
    Vec3 box_half{0.12, 0.15, 0.12};
    Vec2 home0{-1.5, -0.6};  // starting root xy of the two agents
    Vec2 home1{1.5, 0.8};
};

inline double smoothstep01(double x) {
    x = std::min(1.0, std::max(0.0, x));
    return x * x * (3.0 - 2.0 * x);
}

// Catmull-Rom through the waypoint list at u in [0,1]; endpoint-clamped.
inline Vec3 spline_eval(const std::vector<Vec3>& w, double u) {
    int n = static_cast<int>(w.size());
    if (n == 1) return w[0];
    u = std::min(1.0, std::max(0.0, u));
    double s = u * (n - 1);
    int i = std::min(n - 2, static_cast<int>(s));
    double f = s - i;
    const Vec3& p1 = w[i];
    const Vec3& p2 = w[i + 1];
    const Vec3 p0 = i > 0 ? w[i - 1] : p1 + (p1 - p2);
    const Vec3 p3 = i + 2 < n ? w[i + 2] : p2 + (p2 - p1);
    Vec3 out;
    for (int c = 0; c < 3; ++c) {
        double a = p1[c];
        double b = 0.5 * (p2[c] - p0[c]);
        double cc = p0[c] - 2.5 * p1[c] + 2.0 * p2[c] - 0.5 * p3[c];
        double d = 0.5 * (p3[c] - p0[c]) + 1.5 * (p1[c] - p2[c]);
        out[c] = a + b * f + cc * f * f + d * f * f * f;
    }
    return out;
}

inline Vec3 two_bone_ik(const Vec3& base, const Vec3& target, double l1, double l2,
                        const Vec3& bend_hint) {
    Vec3 d = target - base;
    double dist = norm3(d);
    dist = std::min(l1 + l2 - 1e-6, std::max(std::abs(l1 - l2) + 1e-6, dist));
    Vec3 u = (1.0 / std::max(1e-12, norm3(d))) * d;
    Vec3 w = bend_hint - dot3(bend_hint, u) * u;
    double wn = norm3(w);
    if (wn < 1e-9) {
        Vec3 alt = std::abs(u[2]) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
        w = alt - dot3(alt, u) * u;
        wn = norm3(w);
    }
    w = (1.0 / wn) * w;
    double cos_a = (l1 * l1 + dist * dist - l2 * l2) / (2.0 * l1 * dist);
    cos_a = std::min(1.0, std::max(-1.0, cos_a));
    double sin_a = std::sqrt(std::max(0.0, 1.0 - cos_a * cos_a));
    return base + (l1 * cos_a) * u + (l1 * sin_a) * w;
}

namespace detail {

struct AgentScript {
    std::vector<Vec2> root;      // xy per frame
    std::vector<Vec2> heading;   // unit xy per frame
    std::vector<double> pelvis_z;
    // Wrist pin targets; valid when pinned[side] is true at that frame.
    std::vector<std::array<Vec3, 2>> wrist_target;   // [left, right]
    std::vector<std::array<bool, 2>> wrist_pinned;
};

inline Vec2 lerp2(const Vec2& a, const Vec2& b, double s) {
    return {a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])};
}

inline Vec2 left_of(const Vec2& h) { return {-h[1], h[0]}; }

// Reactive gait: one foot swings at a time over 5 frames; planted feet do not
// move at all, so stance-phase skate is exactly zero by construction.
inline void build_feet(const AgentScript& sc, std::vector<Vec3>& lfoot, std::vector<Vec3>& rfoot) {
    int N = static_cast<int>(sc.root.size());
    lfoot.resize(N);
    rfoot.resize(N);
    const int swing_len = 5;
    const double trigger = 0.13, step_lead = 0.10;

    auto offset_of = [&](int side, int n) {
        Vec2 lat = left_of(sc.heading[n]);
        double s = side == 0 ? 1.0 : -1.0;
        return Vec2{s * body::hip_lateral * lat[0], s * body::hip_lateral * lat[1]};
    };

    Vec2 plant[2];
    for (int side = 0; side < 2; ++side) {
        Vec2 off = offset_of(side, 0);
        plant[side] = {sc.root[0][0] + off[0], sc.root[0][1] + off[1]};
    }
    int swing_side = -1, swing_start = 0, next_side = 0;
    Vec2 swing_from{0, 0}, swing_to{0, 0};

    for (int n = 0; n < N; ++n) {
        if (swing_side < 0 && n + swing_len < N) {
            Vec2 off = offset_of(next_side, n);
            Vec2 ideal{sc.root[n][0] + off[0], sc.root[n][1] + off[1]};
            double dx = ideal[0] - plant[next_side][0], dy = ideal[1] - plant[next_side][1];
            if (dx * dx + dy * dy > trigger * trigger) {
                swing_side = next_side;
                swing_start = n;
                swing_from = plant[swing_side];
                int ne = n + swing_len;
                Vec2 off_e = offset_of(swing_side, ne);
                Vec2 lead = sc.heading[ne];
                swing_to = {sc.root[ne][0] + off_e[0] + step_lead * lead[0],
                            sc.root[ne][1] + off_e[1] + step_lead * lead[1]};
                next_side = 1 - next_side;
            }
        }
        for (int side = 0; side < 2; ++side) {
            Vec3 p;
            if (side == swing_side) {
                double s = static_cast<double>(n - swing_start) / swing_len;
                Vec2 xy = lerp2(swing_from, swing_to, smoothstep01(s));
                p = {xy[0], xy[1], body::foot_z + 0.08 * std::sin(M_PI * std::min(s, 0.999))};
                if (n - swing_start == swing_len - 1) {
                    plant[side] = swing_to;
                    swing_side = -1;
                }
            } else {
                p = {plant[side][0], plant[side][1], body::foot_z};
            }
            (side == 0 ? lfoot : rfoot)[n] = p;
        }
    }
}

// Fills one agent's joints for every frame from its script.
inline void fill_agent(SceneMotion& m, int h, const AgentScript& sc) {
    namespace J = joints;
    int N = m.N;
    std::vector<Vec3> lfoot, rfoot;
    build_feet(sc, lfoot, rfoot);

    for (int n = 0; n < N; ++n) {
        Vec2 r = sc.root[n], hd = sc.heading[n];
        Vec2 lat = left_of(hd);
        double pz = sc.pelvis_z[n];
        Vec3 heading3{hd[0], hd[1], 0.0};
        Vec3 lat3{lat[0], lat[1], 0.0};
        Vec3 up{0, 0, 1};

        Vec3 pelvis{r[0], r[1], pz};
        Vec3 spine1 = pelvis + body::spine_seg * up;
        Vec3 spine2 = spine1 + body::spine_seg * up;
        Vec3 spine3 = spine2 + body::spine3_up * up;
        Vec3 neck = spine3 + body::neck_up * up;
        Vec3 head = neck + body::head_up * up;
        Vec3 lcollar = spine3 + body::collar_lateral * lat3 + 0.02 * up;
        Vec3 rcollar = spine3 - body::collar_lateral * lat3 + 0.02 * up;
        Vec3 lshoulder = spine3 + body::shoulder_lateral * lat3 + body::shoulder_up * up;
        Vec3 rshoulder = spine3 - body::shoulder_lateral * lat3 + body::shoulder_up * up;

        Vec3 lhip = pelvis + body::hip_lateral * lat3;
        Vec3 rhip = pelvis - body::hip_lateral * lat3;
        Vec3 lank = lfoot[n] - body::ankle_back * heading3 + body::ankle_height * up;
        Vec3 rank = rfoot[n] - body::ankle_back * heading3 + body::ankle_height * up;
        Vec3 lknee = two_bone_ik(lhip, lank, body::thigh, body::shin, heading3);
        Vec3 rknee = two_bone_ik(rhip, rank, body::thigh, body::shin, heading3);

        Vec3 wrists[2], elbows[2];
        Vec3 shoulders[2] = {lshoulder, rshoulder};
        for (int side = 0; side < 2; ++side) {
            Vec3 rest = shoulders[side] + 0.06 * heading3 - 0.45 * up +
                        (side == 0 ? 0.05 : -0.05) * lat3;
            wrists[side] = sc.wrist_pinned[n][side] ? sc.wrist_target[n][side] : rest;
            Vec3 bend = -0.4 * heading3 - 1.0 * up;
            elbows[side] = two_bone_ik(shoulders[side], wrists[side], body::upper_arm,
                                       body::forearm, bend);
        }

        m.set_joint_pos(n, h, J::pelvis, pelvis);
        m.set_joint_pos(n, h, J::l_hip, lhip);
        m.set_joint_pos(n, h, J::r_hip, rhip);
        m.set_joint_pos(n, h, J::spine1, spine1);
        m.set_joint_pos(n, h, J::l_knee, lknee);
        m.set_joint_pos(n, h, J::r_knee, rknee);
        m.set_joint_pos(n, h, J::spine2, spine2);
        m.set_joint_pos(n, h, J::l_ankle, lank);
        m.set_joint_pos(n, h, J::r_ankle, rank);
        m.set_joint_pos(n, h, J::spine3, spine3);
        m.set_joint_pos(n, h, J::l_foot, lfoot[n]);
        m.set_joint_pos(n, h, J::r_foot, rfoot[n]);
        m.set_joint_pos(n, h, J::neck, neck);
        m.set_joint_pos(n, h, J::l_collar, lcollar);
        m.set_joint_pos(n, h, J::r_collar, rcollar);
        m.set_joint_pos(n, h, J::head, head);
        m.set_joint_pos(n, h, J::l_shoulder, lshoulder);
        m.set_joint_pos(n, h, J::r_shoulder, rshoulder);
        m.set_joint_pos(n, h, J::l_elbow, elbows[0]);
        m.set_joint_pos(n, h, J::r_elbow, elbows[1]);
        m.set_joint_pos(n, h, J::l_wrist, wrists[0]);
        m.set_joint_pos(n, h, J::r_wrist, wrists[1]);

        // Rotation channels: root/torso take the yaw frame, limb joints the
        // shortest-arc rotation from their rest bone direction.
        Mat3 yaw{hd[0], lat[0], 0, hd[1], lat[1], 0, 0, 0, 1};
        auto rot6_yaw = matrix_to_rot6d(yaw);
        for (int j : {J::pelvis, J::spine1, J::spine2, J::spine3, J::neck, J::head,
                      J::l_collar, J::r_collar})
            m.set_joint_rot(n, h, j, rot6_yaw);

        auto bone_rot = [&](const Vec3& from, const Vec3& to, const Vec3& rest) {
            Vec3 d = to - from;
            double nd = norm3(d);
            if (nd < 1e-9) return matrix_to_rot6d(Mat3{1, 0, 0, 0, 1, 0, 0, 0, 1});
            return matrix_to_rot6d(rot_between(rest, (1.0 / nd) * d));
        };
        Vec3 down{0, 0, -1};
        auto r_lhip = bone_rot(lhip, lknee, down);
        auto r_lknee = bone_rot(lknee, lank, down);
        auto r_lank = bone_rot(lank, lfoot[n], Vec3{1, 0, 0});
        auto r_rhip = bone_rot(rhip, rknee, down);
        auto r_rknee = bone_rot(rknee, rank, down);
        auto r_rank = bone_rot(rank, rfoot[n], Vec3{1, 0, 0});
        m.set_joint_rot(n, h, J::l_hip, r_lhip);
        m.set_joint_rot(n, h, J::l_knee, r_lknee);
        m.set_joint_rot(n, h, J::l_ankle, r_lank);
        m.set_joint_rot(n, h, J::l_foot, r_lank);
        m.set_joint_rot(n, h, J::r_hip, r_rhip);
        m.set_joint_rot(n, h, J::r_knee, r_rknee);
        m.set_joint_rot(n, h, J::r_ankle, r_rank);
        m.set_joint_rot(n, h, J::r_foot, r_rank);
        auto r_lsh = bone_rot(lshoulder, elbows[0], down);
        auto r_lel = bone_rot(elbows[0], wrists[0], down);
        auto r_rsh = bone_rot(rshoulder, elbows[1], down);
        auto r_rel = bone_rot(elbows[1], wrists[1], down);
        m.set_joint_rot(n, h, J::l_shoulder, r_lsh);
        m.set_joint_rot(n, h, J::l_elbow, r_lel);
        m.set_joint_rot(n, h, J::l_wrist, r_lel);
        m.set_joint_rot(n, h, J::r_shoulder, r_rsh);
        m.set_joint_rot(n, h, J::r_elbow, r_rel);
        m.set_joint_rot(n, h, J::r_wrist, r_rel);
    }
}

}  // namespace detail

// Anchor layout on the box: face midpoints +x, -x, +y, -y in local coords.
inline Vec3 box_anchor_local(const Vec3& half, int a) {
    switch (a) {
        case 0: return {half[0], 0, 0};
        case 1: return {-half[0], 0, 0};
        case 2: return {0, half[1], 0};
        case 3: return {0, -half[1], 0};
    }
    throw std::out_of_range("box_anchor_local: anchor index");
}

// Deterministic two-agent carry clip: approach, diagonal-stance grasp,
// spline transport with optional handoff, release and withdraw.
inline SceneMotion make_toy_scene(const ToyTaskSpec& spec) {
    namespace J = joints;
    if (spec.N < 16) throw std::invalid_argument("make_toy_scene: N must be >= 16");
    if (spec.waypoints.size() < 2)
        throw std::invalid_argument("make_toy_scene: need at least two waypoints");
    if (spec.carry_lo < 6 || spec.carry_hi >= spec.N - 2 || spec.carry_lo >= spec.carry_hi)
        throw std::invalid_argument("make_toy_scene: infeasible carry window");
    if (spec.handoff >= 0 &&
        (spec.handoff <= spec.carry_lo + 3 || spec.handoff >= spec.carry_hi - 3))
        throw std::invalid_argument("make_toy_scene: infeasible handoff frame");

    SceneDims dims;
    dims.H = 2;
    dims.J = J::count;
    dims.O = 1;
    dims.anchors = {4};
    SceneMotion m(dims, spec.N);
    m.carry_lo = spec.carry_lo;
    m.carry_hi = spec.carry_hi;
    m.handoff = spec.handoff;
    m.task_label = spec.task_label;
    m.box_half = spec.box_half;
    int N = spec.N;

    // Object path.
    std::vector<Vec3> obj(N);
    std::vector<Vec2> tangent(N);
    for (int n = 0; n < N; ++n) {
        double u = smoothstep01(static_cast<double>(n - spec.carry_lo) /
                                (spec.carry_hi - spec.carry_lo));
        if (n <= spec.carry_lo) u = 0.0;
        if (n >= spec.carry_hi) u = 1.0;
        obj[n] = spline_eval(spec.waypoints, u);
    }
    for (int n = 0; n < N; ++n) {
        double du = 1e-4;
        double u0 = smoothstep01(static_cast<double>(n - spec.carry_lo) /
                                 (spec.carry_hi - spec.carry_lo));
        Vec3 a = spline_eval(spec.waypoints, std::max(0.0, u0 - du));
        Vec3 b = spline_eval(spec.waypoints, std::min(1.0, u0 + du));
        Vec2 t2{b[0] - a[0], b[1] - a[1]};
        double nt = std::sqrt(t2[0] * t2[0] + t2[1] * t2[1]);
        tangent[n] = nt > 1e-9 ? Vec2{t2[0] / nt, t2[1] / nt} : (n > 0 ? tangent[n - 1] : Vec2{1, 0});
    }
    for (int n = 0; n < N; ++n) {
        m.set_obj_trans(n, 0, obj[n]);
        m.set_obj_quat(n, 0, {1, 0, 0, 0});
        for (int a = 0; a < 4; ++a)
            m.set_anchor_pos(n, 0, a, obj[n] + box_anchor_local(spec.box_half, a));
    }

    // Carrier stances: giver on the (-x,-y) diagonal of the path frame,
    // receiver on (+x,+y). Diagonals rotate with the path tangent.
    auto diag_dir = [&](int n, double s) {
        Vec2 t = tangent[n], l = detail::left_of(t);
        Vec2 d{s * (t[0] + l[0]), s * (t[1] + l[1])};
        double nd = std::sqrt(d[0] * d[0] + d[1] * d[1]);
        return Vec2{d[0] / nd, d[1] / nd};
    };
    auto carry_root = [&](int n, double s) {
        Vec2 d = diag_dir(n, s);
        return Vec2{obj[n][0] + body::root_offset * d[0], obj[n][1] + body::root_offset * d[1]};
    };
    auto carry_pelvis_z = [&](int n) {
        return std::min(body::pelvis_height, std::max(0.5, obj[n][2] - body::crouch_drop + 0.0));
    };

    int giver_release = spec.handoff >= 0 ? spec.handoff : spec.carry_hi;
    int recv_grasp = spec.handoff;

    detail::AgentScript sc0, sc1;
    for (auto* sc : {&sc0, &sc1}) {
        sc->root.resize(N);
        sc->heading.resize(N);
        sc->pelvis_z.assign(N, body::pelvis_height);
        sc->wrist_target.resize(N);
        sc->wrist_pinned.assign(N, {false, false});
    }

    // Agent 0 (giver): approach -> carry [carry_lo, giver_release] -> withdraw.
    {
        Vec2 grasp_pos = carry_root(spec.carry_lo, -1.0);
        int settle = 4;
        int arrive = spec.carry_lo - settle;
        for (int n = 0; n < N; ++n) {
            if (n <= arrive) {
                double s = smoothstep01(static_cast<double>(n) / std::max(1, arrive));
                sc0.root[n] = detail::lerp2(spec.home0, grasp_pos, s);
            } else if (n <= giver_release) {
                sc0.root[n] = carry_root(std::max(n, spec.carry_lo), -1.0);
                if (n < spec.carry_lo) sc0.root[n] = grasp_pos;
            } else {
                Vec2 away = diag_dir(giver_release, -1.0);
                Vec2 from = carry_root(giver_release, -1.0);
                double s = smoothstep01(static_cast<double>(n - giver_release) / 14.0);
                sc0.root[n] = {from[0] + 0.8 * s * away[0], from[1] + 0.8 * s * away[1]};
            }
        }
        // Crouch through the carry segment with short blends on both sides.
        for (int n = 0; n < N; ++n) {
            double zc = carry_pelvis_z(std::min(std::max(n, spec.carry_lo), giver_release));
            double w = 0.0;
            if (n >= spec.carry_lo - settle && n <= giver_release + 6) {
                double in = smoothstep01((n - (spec.carry_lo - settle)) / static_cast<double>(settle));
                double out = 1.0 - smoothstep01((n - giver_release) / 6.0);
                w = std::min(in, n > giver_release ? out : 1.0);
            }
            sc0.pelvis_z[n] = body::pelvis_height + w * (zc - body::pelvis_height);
        }
        // Left hand takes the -x face, right hand the -y face.
        for (int n = spec.carry_lo; n <= giver_release; ++n) {
            Vec3 a1 = m.anchor_pos(n, 0, 1), a3 = m.anchor_pos(n, 0, 3);
            sc0.wrist_target[n] = {a1 + Vec3{-body::grasp_out, 0, 0},
                                   a3 + Vec3{0, -body::grasp_out, 0}};
            sc0.wrist_pinned[n] = {true, true};
        }
    }

    // Agent 1: either receiver (handoff) or bystander near the drop point.
    {
        if (recv_grasp >= 0) {
            Vec2 grasp_pos = carry_root(recv_grasp, 1.0);
            int arrive = recv_grasp - 8;
            Vec2 stage{grasp_pos[0] + 0.0, grasp_pos[1] + 0.0};
            for (int n = 0; n < N; ++n) {
                if (n <= arrive) {
                    double s = smoothstep01(static_cast<double>(n) / std::max(1, arrive));
                    sc1.root[n] = detail::lerp2(spec.home1, stage, s);
                } else if (n <= spec.carry_hi) {
                    sc1.root[n] = carry_root(std::max(n, recv_grasp), 1.0);
                    if (n < recv_grasp) sc1.root[n] = grasp_pos;
                } else {
                    Vec2 away = diag_dir(spec.carry_hi, 1.0);
                    Vec2 from = carry_root(spec.carry_hi, 1.0);
                    double s = smoothstep01(static_cast<double>(n - spec.carry_hi) / 14.0);
                    sc1.root[n] = {from[0] + 0.8 * s * away[0], from[1] + 0.8 * s * away[1]};
                }
            }
            for (int n = 0; n < N; ++n) {
                double zc = carry_pelvis_z(std::min(std::max(n, recv_grasp), spec.carry_hi));
                double w = 0.0;
                if (n >= recv_grasp - 4 && n <= spec.carry_hi + 6) {
                    double in = smoothstep01((n - (recv_grasp - 4)) / 4.0);
                    double out = 1.0 - smoothstep01((n - spec.carry_hi) / 6.0);
                    w = std::min(in, n > spec.carry_hi ? out : 1.0);
                }
                sc1.pelvis_z[n] = body::pelvis_height + w * (zc - body::pelvis_height);
            }
            for (int n = recv_grasp; n <= spec.carry_hi; ++n) {
                Vec3 a0 = m.anchor_pos(n, 0, 0), a2 = m.anchor_pos(n, 0, 2);
                sc1.wrist_target[n] = {a2 + Vec3{0, body::grasp_out, 0},
                                       a0 + Vec3{body::grasp_out, 0, 0}};
                sc1.wrist_pinned[n] = {true, true};
            }
        } else {
            // Walk toward a viewing spot near the drop point, then stand.
            Vec3 endw = spec.waypoints.back();
            Vec2 spot{endw[0] + 0.2, endw[1] + 1.0};
            int arrive = std::max(8, N / 2);
            for (int n = 0; n < N; ++n) {
                double s = smoothstep01(static_cast<double>(n) / arrive);
                sc1.root[n] = detail::lerp2(spec.home1, spot, s);
            }
        }
    }

    // Headings: face travel direction while moving, else face the object.
    for (int h = 0; h < 2; ++h) {
        detail::AgentScript& sc = h == 0 ? sc0 : sc1;
        Vec2 prev{1, 0};
        for (int n = 0; n < N; ++n) {
            Vec2 d{0, 0};
            if (n + 1 < N) d = {sc.root[n + 1][0] - sc.root[n][0], sc.root[n + 1][1] - sc.root[n][1]};
            double nd = std::sqrt(d[0] * d[0] + d[1] * d[1]);
            if (nd > 2e-3) {
                prev = {d[0] / nd, d[1] / nd};
            } else {
                Vec2 to_obj{obj[n][0] - sc.root[n][0], obj[n][1] - sc.root[n][1]};
                double no = std::sqrt(to_obj[0] * to_obj[0] + to_obj[1] * to_obj[1]);
                if (no > 1e-6) prev = {to_obj[0] / no, to_obj[1] / no};
            }
            sc.heading[n] = prev;
        }
        // While grasping (and a short lead-in) face the carry tangent so the
        // shoulders stay square to the anchors through the whole carry.
        int pin_lo = N, pin_hi = -1;
        for (int n = 0; n < N; ++n)
            if (sc.wrist_pinned[n][0] || sc.wrist_pinned[n][1]) {
                pin_lo = std::min(pin_lo, n);
                pin_hi = std::max(pin_hi, n);
            }
        if (pin_hi >= 0)
            for (int n = std::max(0, pin_lo - 6); n <= pin_hi; ++n) sc.heading[n] = tangent[n];
        // Smooth heading turns to avoid frame-to-frame snaps.
        for (int pass = 0; pass < 2; ++pass)
            for (int n = 1; n < N; ++n) {
                Vec2 a = sc.heading[n - 1], b = sc.heading[n];
                Vec2 mix{0.6 * a[0] + 0.4 * b[0], 0.6 * a[1] + 0.4 * b[1]};
                double nm = std::sqrt(mix[0] * mix[0] + mix[1] * mix[1]);
                if (nm > 1e-9) sc.heading[n] = {mix[0] / nm, mix[1] / nm};
            }
    }

    detail::fill_agent(m, 0, sc0);
    detail::fill_agent(m, 1, sc1);

    // Contact script: margins equal the grasp standoff.
    m.contacts.push_back({0, J::l_wrist, 0, 1, body::grasp_out, spec.carry_lo, giver_release});
    m.contacts.push_back({0, J::r_wrist, 0, 3, body::grasp_out, spec.carry_lo, giver_release});
    if (recv_grasp >= 0) {
        m.contacts.push_back({1, J::l_wrist, 0, 2, body::grasp_out, recv_grasp, spec.carry_hi});
        m.contacts.push_back({1, J::r_wrist, 0, 0, body::grasp_out, recv_grasp, spec.carry_hi});
    }
    m.validate();
    return m;
}

// Randomized task suite; every spec is reproducible from the rng stream.
inline std::vector<ToyTaskSpec> make_task_suite(int count, int N, Rng& rng) {
    std::vector<ToyTaskSpec> out;
    for (int i = 0; i < count; ++i) {
        ToyTaskSpec sp;
        sp.N = N;
        double x0 = rng.uniform(-0.9, -0.5), y0 = rng.uniform(-0.3, 0.3);
        double x1 = rng.uniform(0.5, 0.9), y1 = rng.uniform(-0.3, 0.3);
        double z0 = rng.uniform(0.62, 0.78), z1 = rng.uniform(0.62, 0.78);
        int kind = static_cast<int>(rng.integer(3));
        sp.task_label = kind;
        Vec3 a{x0, y0, z0}, b{x1, y1, z1};
        if (kind == 2) {
            // Curved lift: lateral bow and a raised midpoint.
            Vec3 mid{0.5 * (x0 + x1), 0.5 * (y0 + y1) + rng.uniform(0.25, 0.45),
                     rng.uniform(0.85, 0.95)};
            sp.waypoints = {a, mid, b};
        } else {
            Vec3 mid = 0.5 * (a + b);
            mid[2] = rng.uniform(0.8, 0.9);
            sp.waypoints = {a, mid, b};
        }
        int lo = N / 4 + static_cast<int>(rng.integer(N / 16 + 1));
        int hi = (3 * N) / 4 + static_cast<int>(rng.integer(N / 16 + 1));
        sp.carry_lo = lo;
        sp.carry_hi = std::min(hi, N - 4);
        sp.handoff = kind == 1 ? (lo + hi) / 2 + static_cast<int>(rng.integer(5)) - 2 : -1;
        sp.home0 = {x0 - 0.9, y0 + rng.uniform(-0.4, 0.4)};
        sp.home1 = {x1 + 0.9, y1 + rng.uniform(-0.4, 0.4)};
        out.push_back(sp);
    }
    return out;
}

inline Camera default_camera() {
    return Camera::look_at({0.0, -3.2, 1.9}, {0.0, 0.0, 0.7}, 320.0, 160.0, 160.0);
}

namespace detail {

// Interior key frames: local curvature maxima of agent 0's root path, with a
// minimum separation; falls back to even spacing on straight paths.
inline std::vector<int> salient_frames(const SceneMotion& m, int K) {
    int N = m.N;
    std::vector<int> keys{0, N - 1};
    if (K <= 2) return keys;

    std::vector<double> curv(N, 0.0);
    for (int n = 1; n + 1 < N; ++n) {
        Vec3 a = m.joint_pos(n - 1, 0, joints::pelvis);
        Vec3 b = m.joint_pos(n, 0, joints::pelvis);
        Vec3 c = m.joint_pos(n + 1, 0, joints::pelvis);
        double vx = c[0] - a[0], vy = c[1] - a[1];
        double ax = c[0] - 2 * b[0] + a[0], ay = c[1] - 2 * b[1] + a[1];
        double speed = std::sqrt(vx * vx + vy * vy);
        curv[n] = speed > 1e-6 ? std::abs(vx * ay - vy * ax) / (speed * speed * speed) : 0.0;
    }
    int need = K - 2, min_sep = std::max(2, N / (2 * K));
    std::vector<std::pair<double, int>> peaks;
    for (int n = 2; n + 2 < N; ++n)
        if (curv[n] >= curv[n - 1] && curv[n] >= curv[n + 1] && curv[n] > 1e-4)
            peaks.push_back({curv[n], n});
    std::sort(peaks.begin(), peaks.end(), [](auto& a, auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (const auto& [c, n] : peaks) {
        if (static_cast<int>(keys.size()) - 2 >= need) break;
        bool ok = true;
        for (int k : keys)
            if (std::abs(k - n) < min_sep) ok = false;
        if (ok) keys.push_back(n);
    }
    int grid = 1;
    while (static_cast<int>(keys.size()) - 2 < need) {
        int cand = grid * N / (need + 1);
        ++grid;
        if (grid > 4 * K) break;
        bool ok = true;
        for (int k : keys)
            if (std::abs(k - cand) < min_sep) ok = false;
        if (ok) keys.push_back(cand);
    }
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    return keys;
}

// Andrew monotone chain; returns hull vertices in counterclockwise order.
inline std::vector<Vec2> convex_hull(std::vector<Vec2> pts) {
    std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
        return a[0] != b[0] ? a[0] < b[0] : a[1] < b[1];
    });
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    int n = static_cast<int>(pts.size());
    if (n <= 2) return pts;
    auto cross = [](const Vec2& o, const Vec2& a, const Vec2& b) {
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    };
    std::vector<Vec2> hull(2 * n);
    int k = 0;
    for (int i = 0; i < n; ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    for (int i = n - 2, t = k + 1; i >= 0; --i) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

inline Tensor rasterize_box_mask(const SceneMotion& m, int frame, const Camera& cam) {
    int res = Storyboard::mask_res;
    Tensor mask = Tensor::zeros({res, res});
    Vec3 c = m.obj_trans(frame, 0);
    Mat3 R = quat_to_matrix(m.obj_quat(frame, 0));
    std::vector<Vec2> corners;
    for (int sx : {-1, 1})
        for (int sy : {-1, 1})
            for (int sz : {-1, 1}) {
                Vec3 local{sx * m.box_half[0], sy * m.box_half[1], sz * m.box_half[2]};
                corners.push_back(cam.project(c + mat3_apply(R, local)));
            }
    std::vector<Vec2> hull = convex_hull(corners);
    if (hull.size() < 3) return mask;
    double cell = 2.0 * cam.cx / res;  // viewport [0, 2*cx] x [0, 2*cy]
    for (int iy = 0; iy < res; ++iy)
        for (int ix = 0; ix < res; ++ix) {
            Vec2 p{(ix + 0.5) * cell, (iy + 0.5) * cell};
            bool inside = true;
            for (size_t e = 0; e < hull.size(); ++e) {
                const Vec2& a = hull[e];
                const Vec2& b = hull[(e + 1) % hull.size()];
                if ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) < 0.0) {
                    inside = false;
                    break;
                }
            }
            if (inside) mask.at(iy, ix) = 1.0;
        }
    return mask;
}

}  // namespace detail

// Projects GT joints into storyboard controls. Strokes cover each agent's
// root over the whole clip and the carrier wrists over their contact windows.
// Noise: per-vertex Gaussian jitter plus per-stroke sinusoidal drift, with
// total RMS displacement = noise * (pooled RMS stroke extent).
inline Storyboard synth_storyboard(const SceneMotion& m, const Camera& cam, int K, double noise,
                                   Rng& rng) {
    namespace J = joints;
    noise = std::min(1.0, std::max(0.0, noise));
    Storyboard sb;
    sb.N = m.N;
    sb.H = m.dims.H;
    sb.J = m.dims.J;
    sb.noise = noise;
    sb.task_label = m.task_label;
    sb.contacts = m.contacts;
    sb.key_frames = detail::salient_frames(m, std::max(2, K));

    int Kf = sb.n_keys();
    sb.keyposes = Tensor::zeros({Kf, sb.H, sb.J, 2});
    sb.keypose_depths = Tensor::zeros({Kf, sb.H, sb.J});
    for (int k = 0; k < Kf; ++k) {
        int n = sb.key_frames[k];
        for (int h = 0; h < sb.H; ++h)
            for (int j = 0; j < sb.J; ++j) {
                Vec3 p = m.joint_pos(n, h, j);
                Vec2 uv = cam.project(p);
                int64_t base = ((static_cast<int64_t>(k) * sb.H + h) * sb.J + j) * 2;
                sb.keyposes.data[base] = uv[0];
                sb.keyposes.data[base + 1] = uv[1];
                sb.keypose_depths.at(k, h, j) = cam.depth_of(p);
            }
        sb.masks.push_back(detail::rasterize_box_mask(m, n, cam));
    }

    struct TrackSpec {
        int h, j, lo, hi;
    };
    std::vector<TrackSpec> tracks;
    for (int h = 0; h < sb.H; ++h) tracks.push_back({h, J::pelvis, 0, m.N - 1});
    for (const auto& c : m.contacts) tracks.push_back({c.human, c.joint, c.frame_lo, c.frame_hi});

    const int P = 24;
    for (const auto& tr : tracks) {
        StrokePath sp;
        sp.human = tr.h;
        sp.joint = tr.j;
        sp.frame_lo = tr.lo;
        sp.frame_hi = tr.hi;
        sp.pts = Tensor::zeros({P, 2});
        sp.depths = Tensor::zeros({P});
        for (int i = 0; i < P; ++i) {
            double f = tr.lo + (tr.hi - tr.lo) * static_cast<double>(i) / (P - 1);
            int n = static_cast<int>(std::round(f));
            Vec3 p = m.joint_pos(n, tr.h, tr.j);
            Vec2 uv = cam.project(p);
            sp.pts.at(i, 0) = uv[0];
            sp.pts.at(i, 1) = uv[1];
            sp.depths.data[i] = cam.depth_of(p);
        }
        sb.strokes.push_back(std::move(sp));
    }

    // Reference scale: pooled RMS deviation of clean stroke points from their
    // per-stroke centroids.
    double sq_sum = 0.0;
    int64_t count = 0;
    for (const auto& sp : sb.strokes) {
        double cx = 0, cy = 0;
        for (int i = 0; i < P; ++i) {
            cx += sp.pts.at(i, 0);
            cy += sp.pts.at(i, 1);
        }
        cx /= P;
        cy /= P;
        for (int i = 0; i < P; ++i) {
            double dx = sp.pts.at(i, 0) - cx, dy = sp.pts.at(i, 1) - cy;
            sq_sum += dx * dx + dy * dy;
            ++count;
        }
    }
    double sigma_ref = count > 0 ? std::sqrt(sq_sum / count) : 0.0;

    if (noise > 0.0 && sigma_ref > 0.0) {
        double target = noise * sigma_ref;
        double jitter_sd = std::sqrt(0.36 / 2.0) * target;  // per-coordinate
        double drift_amp = std::sqrt(2.0 * 0.64) * target;
        for (auto& sp : sb.strokes) {
            double arc = 0.0;
            std::vector<double> s(P, 0.0);
            for (int i = 1; i < P; ++i) {
                double dx = sp.pts.at(i, 0) - sp.pts.at(i - 1, 0);
                double dy = sp.pts.at(i, 1) - sp.pts.at(i - 1, 1);
                arc += std::sqrt(dx * dx + dy * dy);
                s[i] = arc;
            }
            double wavelength = std::max(arc, 1e-6) * rng.uniform(0.6, 0.9);
            double phase = rng.uniform(0.0, 2.0 * M_PI);
            double theta = rng.uniform(0.0, 2.0 * M_PI);
            for (int i = 0; i < P; ++i) {
                double drift = drift_amp * std::sin(2.0 * M_PI * s[i] / wavelength + phase);
                sp.pts.at(i, 0) += jitter_sd * rng.normal() + drift * std::cos(theta);
                sp.pts.at(i, 1) += jitter_sd * rng.normal() + drift * std::sin(theta);
            }
        }
        for (int k = 0; k < Kf; ++k)
            for (int h = 0; h < sb.H; ++h)
                for (int j = 0; j < sb.J; ++j) {
                    int64_t base = ((static_cast<int64_t>(k) * sb.H + h) * sb.J + j) * 2;
                    sb.keyposes.data[base] += jitter_sd * rng.normal();
                    sb.keyposes.data[base + 1] += jitter_sd * rng.normal();
                }
    }

    sb.chi = Tensor::zeros({m.N, sb.H, sb.J});
    for (int k = 0; k < Kf; ++k)
        for (int h = 0; h < sb.H; ++h)
            for (int j = 0; j < sb.J; ++j) sb.chi.at(sb.key_frames[k], h, j) = 1.0;
    for (const auto& sp : sb.strokes)
        for (int n = sp.frame_lo; n <= sp.frame_hi; ++n) sb.chi.at(n, sp.human, sp.joint) = 1.0;

    return sb;
}

}  // namespace storyflow
