#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "storyflow/tensor.hpp"

namespace storyflow {

using Vec3 = std::array<double, 3>;
using Vec2 = std::array<double, 2>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }
inline Vec3 cross3(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 normalized3(const Vec3& a) {
    double n = norm3(a);
    if (n < 1e-12) throw std::runtime_error("normalized3: zero vector");
    return (1.0 / n) * a;
}
inline Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}
inline Vec3 mat3_apply_transposed(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2], m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
            m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

// Flattened per-frame scene dimension: H humans x J joints x (3 pos + 6 rot),
// O rigid objects x (3 translation + 4 quaternion), plus 3 per anchor.
inline int flat_dim(int H, int J, int O, const std::vector<int>& anchors) {
    if (H < 0 || J < 0 || O < 0 || (H > 0 && J == 0))
        throw std::invalid_argument("flat_dim: bad scene arity");
    if (static_cast<int>(anchors.size()) != O)
        throw std::invalid_argument("flat_dim: anchor list length must equal O");
    int ka = std::accumulate(anchors.begin(), anchors.end(), 0);
    return H * J * 9 + O * 7 + 3 * ka;
}

// Nearest-frame index for a continuous key location k in [0, N]; 1-based,
// rounding half away from zero.
inline int frame_index(double k, int N) {
    if (k < 0.0 || k > static_cast<double>(N))
        throw std::out_of_range("frame_index: k outside [0, N]");
    return 1 + static_cast<int>(std::round(k * (N - 1) / static_cast<double>(N)));
}

// Gram-Schmidt of two 3-vectors (r[0..2], r[3..5]) into a rotation matrix
// whose first two columns are the orthonormalized inputs.
inline Mat3 rot6d_to_matrix(const std::array<double, 6>& r) {
    Vec3 a1{r[0], r[1], r[2]}, a2{r[3], r[4], r[5]};
    double n1 = norm3(a1);
    if (n1 < 1e-9) throw std::runtime_error("rot6d_to_matrix: degenerate first column");
    Vec3 b1 = (1.0 / n1) * a1;
    Vec3 res = a2 - dot3(b1, a2) * b1;
    double n2 = norm3(res);
    if (n2 < 1e-9) throw std::runtime_error("rot6d_to_matrix: degenerate second column");
    Vec3 b2 = (1.0 / n2) * res;
    Vec3 b3 = cross3(b1, b2);
    return {b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2]};
}

inline std::array<double, 6> matrix_to_rot6d(const Mat3& m) {
    return {m[0], m[3], m[6], m[1], m[4], m[7]};
}

inline Mat3 rot_axis_angle(const Vec3& axis, double angle) {
    Vec3 u = normalized3(axis);
    double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    return {c + u[0] * u[0] * t,        u[0] * u[1] * t - u[2] * s, u[0] * u[2] * t + u[1] * s,
            u[1] * u[0] * t + u[2] * s, c + u[1] * u[1] * t,        u[1] * u[2] * t - u[0] * s,
            u[2] * u[0] * t - u[1] * s, u[2] * u[1] * t + u[0] * s, c + u[2] * u[2] * t};
}

// Shortest-arc rotation taking unit vector a to unit vector b.
inline Mat3 rot_between(const Vec3& a, const Vec3& b) {
    Vec3 ax = cross3(a, b);
    double s = norm3(ax), c = dot3(a, b);
    if (s < 1e-12) {
        if (c > 0.0) return {1, 0, 0, 0, 1, 0, 0, 0, 1};
        // Opposite vectors: rotate pi about any axis orthogonal to a.
        Vec3 ortho = std::abs(a[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
        Vec3 axis = normalized3(cross3(a, ortho));
        return rot_axis_angle(axis, M_PI);
    }
    return rot_axis_angle(ax, std::atan2(s, c));
}

struct Camera {
    Mat3 R{1, 0, 0, 0, 1, 0, 0, 0, 1};  // world -> camera
    Vec3 t{0, 0, 0};
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

    Vec3 to_camera(const Vec3& p) const { return mat3_apply(R, p) + t; }

    // Pinhole projection to sketch-plane units; the point must be in front.
    Vec2 project(const Vec3& p) const {
        Vec3 pc = to_camera(p);
        if (pc[2] <= 1e-9) throw std::runtime_error("project: point not in front of camera");
        return {fx * pc[0] / pc[2] + cx, fy * pc[1] / pc[2] + cy};
    }

    double depth_of(const Vec3& p) const { return to_camera(p)[2]; }

    // Inverse of project at a given camera-frame depth.
    Vec3 lift(const Vec2& uv, double depth) const {
        Vec3 pc{(uv[0] - cx) / fx * depth, (uv[1] - cy) / fy * depth, depth};
        return mat3_apply_transposed(R, pc - t);
    }

    static Camera look_at(const Vec3& eye, const Vec3& target, double focal, double cx_, double cy_) {
        Vec3 fwd = normalized3(target - eye);          // camera +z
        Vec3 world_up{0, 0, 1};
        Vec3 right = normalized3(cross3(fwd, world_up));  // camera +x
        Vec3 down = cross3(fwd, right);                   // camera +y (sketch v grows downward)
        Camera cam;
        cam.R = {right[0], right[1], right[2], down[0], down[1], down[2], fwd[0], fwd[1], fwd[2]};
        cam.t = {-dot3(right, eye), -dot3(down, eye), -dot3(fwd, eye)};
        cam.fx = cam.fy = focal;
        cam.cx = cx_;
        cam.cy = cy_;
        return cam;
    }
};

struct SceneDims {
    int H = 0, J = 0, O = 0;
    std::vector<int> anchors;

    int d_full() const { return flat_dim(H, J, O, anchors); }
    int human_base(int h) const { return h * J * 9; }
    int pos_off(int h, int j) const { return human_base(h) + j * 3; }
    int rot_off(int h, int j) const { return human_base(h) + J * 3 + j * 6; }
    int obj_base(int o) const { return H * J * 9 + o * 7; }
    int anchor_base(int o) const {
        int off = H * J * 9 + O * 7;
        for (int i = 0; i < o; ++i) off += anchors[i] * 3;
        return off;
    }
    int anchor_off(int o, int a) const { return anchor_base(o) + a * 3; }

    bool operator==(const SceneDims& other) const {
        return H == other.H && J == other.J && O == other.O && anchors == other.anchors;
    }
};

// A contact pairing between a human joint and an object anchor, with the
// desired contact margin in meters and the frames where it is scripted.
struct ContactSpec {
    int human = 0, joint = 0, object = 0, anchor = 0;
    double margin = 0.0;
    int frame_lo = 0, frame_hi = -1;
};

struct SceneMotion {
    SceneDims dims;
    int N = 0;
    Tensor frames;  // (N, d_full)

    // Script metadata carried by generated clips (drives storyboard
    // synthesis, phase supervision, and eval windows).
    int carry_lo = 0, carry_hi = -1, handoff = -1;
    int task_label = 0;
    std::vector<ContactSpec> contacts;
    Vec3 box_half{0.1, 0.1, 0.1};

    SceneMotion() = default;
    SceneMotion(SceneDims d, int n)
        : dims(std::move(d)), N(n), frames(Tensor::zeros({n, dims.d_full()})) {}

    double* frame_ptr(int n) { return frames.data.data() + static_cast<int64_t>(n) * dims.d_full(); }
    const double* frame_ptr(int n) const {
        return frames.data.data() + static_cast<int64_t>(n) * dims.d_full();
    }

    Vec3 joint_pos(int n, int h, int j) const {
        const double* p = frame_ptr(n) + dims.pos_off(h, j);
        return {p[0], p[1], p[2]};
    }
    void set_joint_pos(int n, int h, int j, const Vec3& v) {
        double* p = frame_ptr(n) + dims.pos_off(h, j);
        p[0] = v[0]; p[1] = v[1]; p[2] = v[2];
    }
    void set_joint_rot(int n, int h, int j, const std::array<double, 6>& r) {
        double* p = frame_ptr(n) + dims.rot_off(h, j);
        for (int i = 0; i < 6; ++i) p[i] = r[i];
    }
    std::array<double, 6> joint_rot(int n, int h, int j) const {
        const double* p = frame_ptr(n) + dims.rot_off(h, j);
        return {p[0], p[1], p[2], p[3], p[4], p[5]};
    }
    Vec3 obj_trans(int n, int o) const {
        const double* p = frame_ptr(n) + dims.obj_base(o);
        return {p[0], p[1], p[2]};
    }
    void set_obj_trans(int n, int o, const Vec3& v) {
        double* p = frame_ptr(n) + dims.obj_base(o);
        p[0] = v[0]; p[1] = v[1]; p[2] = v[2];
    }
    std::array<double, 4> obj_quat(int n, int o) const {
        const double* p = frame_ptr(n) + dims.obj_base(o) + 3;
        return {p[0], p[1], p[2], p[3]};
    }
    void set_obj_quat(int n, int o, const std::array<double, 4>& q) {
        double* p = frame_ptr(n) + dims.obj_base(o) + 3;
        for (int i = 0; i < 4; ++i) p[i] = q[i];
    }
    Vec3 anchor_pos(int n, int o, int a) const {
        const double* p = frame_ptr(n) + dims.anchor_off(o, a);
        return {p[0], p[1], p[2]};
    }
    void set_anchor_pos(int n, int o, int a, const Vec3& v) {
        double* p = frame_ptr(n) + dims.anchor_off(o, a);
        p[0] = v[0]; p[1] = v[1]; p[2] = v[2];
    }

    void validate() const {
        frames.check_finite("SceneMotion.frames");
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < dims.O; ++o) {
                auto q = obj_quat(n, o);
                double nq = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
                if (std::abs(nq - 1.0) > 1e-9)
                    throw std::runtime_error("SceneMotion: non-unit quaternion");
            }
    }
};

inline Mat3 quat_to_matrix(const std::array<double, 4>& q) {
    double w = q[0], x = q[1], y = q[2], z = q[3];
    return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
            2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

// One tracked joint path on the sketch plane. `depths` hold the true
// camera-frame depth of each clean sample, so targets can be lifted back
// to 3D for evaluation regardless of stroke noise.
struct StrokePath {
    int human = 0, joint = 0;
    int frame_lo = 0, frame_hi = 0;
    Tensor pts;     // (P, 2) sketch units
    Tensor depths;  // (P,)
};

struct Storyboard {
    int N = 0, H = 0, J = 0;
    std::vector<int> key_frames;  // 0-based, sorted
    Tensor keyposes;              // (K, H, J, 2)
    Tensor keypose_depths;        // (K, H, J)
    Tensor chi;                   // (N, H, J) in {0,1}
    std::vector<StrokePath> strokes;
    std::vector<Tensor> masks;  // one (mask_res, mask_res) binary grid per key frame
    std::vector<ContactSpec> contacts;
    int task_label = 0;
    double noise = 0.0;
    static constexpr int mask_res = 64;

    int n_keys() const { return static_cast<int>(key_frames.size()); }

    bool chi_active(int n, int h, int j) const { return chi.at(n, h, j) != 0.0; }
};

// ---- JSON round-trip (versioned) ----

inline nlohmann::json motion_to_json(const SceneMotion& m) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["N"] = m.N;
    j["H"] = m.dims.H;
    j["J"] = m.dims.J;
    j["O"] = m.dims.O;
    j["anchors"] = m.dims.anchors;
    j["frames"] = m.frames.data;
    nlohmann::json meta;
    meta["carry_lo"] = m.carry_lo;
    meta["carry_hi"] = m.carry_hi;
    meta["handoff"] = m.handoff;
    meta["task_label"] = m.task_label;
    meta["box_half"] = m.box_half;
    nlohmann::json jc = nlohmann::json::array();
    for (const auto& c : m.contacts)
        jc.push_back({{"human", c.human}, {"joint", c.joint}, {"object", c.object},
                      {"anchor", c.anchor}, {"margin", c.margin}, {"frame_lo", c.frame_lo},
                      {"frame_hi", c.frame_hi}});
    meta["contacts"] = std::move(jc);
    j["meta"] = std::move(meta);
    return j;
}

inline SceneMotion motion_from_json(const nlohmann::json& j) {
    if (j.at("format_version").get<int>() != 1)
        throw std::runtime_error("motion file: unsupported format version");
    SceneDims dims;
    dims.H = j.at("H").get<int>();
    dims.J = j.at("J").get<int>();
    dims.O = j.at("O").get<int>();
    dims.anchors = j.at("anchors").get<std::vector<int>>();
    SceneMotion m(dims, j.at("N").get<int>());
    m.frames.data = j.at("frames").get<std::vector<double>>();
    if (static_cast<int64_t>(m.frames.data.size()) != static_cast<int64_t>(m.N) * dims.d_full())
        throw std::runtime_error("motion file: frame array size mismatch");
    const auto& meta = j.at("meta");
    m.carry_lo = meta.at("carry_lo").get<int>();
    m.carry_hi = meta.at("carry_hi").get<int>();
    m.handoff = meta.at("handoff").get<int>();
    m.task_label = meta.at("task_label").get<int>();
    auto bh = meta.at("box_half").get<std::vector<double>>();
    m.box_half = {bh[0], bh[1], bh[2]};
    for (const auto& c : meta.at("contacts")) {
        ContactSpec cs;
        cs.human = c.at("human").get<int>();
        cs.joint = c.at("joint").get<int>();
        cs.object = c.at("object").get<int>();
        cs.anchor = c.at("anchor").get<int>();
        cs.margin = c.at("margin").get<double>();
        cs.frame_lo = c.at("frame_lo").get<int>();
        cs.frame_hi = c.at("frame_hi").get<int>();
        m.contacts.push_back(cs);
    }
    return m;
}

inline nlohmann::json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape}, {"data", t.data}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
    return Tensor(j.at("shape").get<std::vector<int>>(), j.at("data").get<std::vector<double>>());
}

// Binary masks as run lengths of alternating zeros/ones, row-major.
inline std::vector<int> mask_rle(const Tensor& mask) {
    std::vector<int> runs;
    double cur = 0.0;
    int len = 0;
    for (double v : mask.data) {
        if (v == cur) {
            ++len;
        } else {
            runs.push_back(len);
            cur = cur == 0.0 ? 1.0 : 0.0;
            len = 1;
        }
    }
    runs.push_back(len);
    return runs;
}

inline Tensor mask_from_rle(const std::vector<int>& runs, int res) {
    Tensor mask = Tensor::zeros({res, res});
    int64_t pos = 0;
    double cur = 0.0;
    for (int len : runs) {
        for (int i = 0; i < len; ++i) mask.data[pos++] = cur;
        cur = cur == 0.0 ? 1.0 : 0.0;
    }
    if (pos != mask.numel()) throw std::runtime_error("mask RLE: length mismatch");
    return mask;
}

inline nlohmann::json storyboard_to_json(const Storyboard& s) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["N"] = s.N;
    j["H"] = s.H;
    j["J"] = s.J;
    j["key_frames"] = s.key_frames;
    j["keyposes"] = tensor_to_json(s.keyposes);
    j["keypose_depths"] = tensor_to_json(s.keypose_depths);
    nlohmann::json chi_idx = nlohmann::json::array();
    for (int n = 0; n < s.N; ++n)
        for (int h = 0; h < s.H; ++h)
            for (int jj = 0; jj < s.J; ++jj)
                if (s.chi.at(n, h, jj) != 0.0) chi_idx.push_back({n, h, jj});
    j["chi"] = std::move(chi_idx);
    nlohmann::json js = nlohmann::json::array();
    for (const auto& st : s.strokes)
        js.push_back({{"human", st.human}, {"joint", st.joint}, {"frame_lo", st.frame_lo},
                      {"frame_hi", st.frame_hi}, {"pts", tensor_to_json(st.pts)},
                      {"depths", tensor_to_json(st.depths)}});
    j["strokes"] = std::move(js);
    nlohmann::json jm = nlohmann::json::array();
    for (const auto& m : s.masks) jm.push_back(mask_rle(m));
    j["masks"] = std::move(jm);
    nlohmann::json jc = nlohmann::json::array();
    for (const auto& c : s.contacts)
        jc.push_back({{"human", c.human}, {"joint", c.joint}, {"object", c.object},
                      {"anchor", c.anchor}, {"margin", c.margin}, {"frame_lo", c.frame_lo},
                      {"frame_hi", c.frame_hi}});
    j["contacts"] = std::move(jc);
    j["task_label"] = s.task_label;
    j["noise"] = s.noise;
    return j;
}

inline Storyboard storyboard_from_json(const nlohmann::json& j) {
    if (j.at("format_version").get<int>() != 1)
        throw std::runtime_error("storyboard file: unsupported format version");
    Storyboard s;
    s.N = j.at("N").get<int>();
    s.H = j.at("H").get<int>();
    s.J = j.at("J").get<int>();
    s.key_frames = j.at("key_frames").get<std::vector<int>>();
    s.keyposes = tensor_from_json(j.at("keyposes"));
    s.keypose_depths = tensor_from_json(j.at("keypose_depths"));
    s.chi = Tensor::zeros({s.N, s.H, s.J});
    for (const auto& idx : j.at("chi"))
        s.chi.at(idx[0].get<int>(), idx[1].get<int>(), idx[2].get<int>()) = 1.0;
    for (const auto& st : j.at("strokes")) {
        StrokePath sp;
        sp.human = st.at("human").get<int>();
        sp.joint = st.at("joint").get<int>();
        sp.frame_lo = st.at("frame_lo").get<int>();
        sp.frame_hi = st.at("frame_hi").get<int>();
        sp.pts = tensor_from_json(st.at("pts"));
        sp.depths = tensor_from_json(st.at("depths"));
        s.strokes.push_back(std::move(sp));
    }
    for (const auto& m : j.at("masks"))
        s.masks.push_back(mask_from_rle(m.get<std::vector<int>>(), Storyboard::mask_res));
    for (const auto& c : j.at("contacts")) {
        ContactSpec cs;
        cs.human = c.at("human").get<int>();
        cs.joint = c.at("joint").get<int>();
        cs.object = c.at("object").get<int>();
        cs.anchor = c.at("anchor").get<int>();
        cs.margin = c.at("margin").get<double>();
        cs.frame_lo = c.at("frame_lo").get<int>();
        cs.frame_hi = c.at("frame_hi").get<int>();
        s.contacts.push_back(cs);
    }
    s.task_label = j.at("task_label").get<int>();
    s.noise = j.at("noise").get<double>();
    return s;
}

}  // namespace storyflow
