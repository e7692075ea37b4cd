#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "storyflow/codec.hpp"
#include "storyflow/rng.hpp"
#include "storyflow/toygen.hpp"

using namespace storyflow;

namespace {

const std::vector<SceneMotion>& toy_dataset() {
    static std::vector<SceneMotion> v = [] {
        Rng rng(41);
        std::vector<SceneMotion> out;
        for (const auto& sp : make_task_suite(20, 64, rng)) out.push_back(make_toy_scene(sp));
        return out;
    }();
    return v;
}

CodecConfig small_cfg() {
    CodecConfig cfg;
    cfg.trunk = 24;
    cfg.steps = 500;
    cfg.batch = 6;
    cfg.lr = 2e-3;
    cfg.recon_threshold = 0.45;
    return cfg;
}

const Codec& main_codec() {
    static Codec c = [] {
        Rng rng(7);
        return train_codec(toy_dataset(), small_cfg(), rng);
    }();
    return c;
}

double normalized_mse(const Codec& c, const SceneMotion& gt, const SceneMotion& rec) {
    double s = 0.0;
    int64_t n = 0;
    for (int f = 0; f < gt.N; ++f)
        for (int i = 0; i < gt.frames.shape[1]; ++i) {
            double d = (rec.frames.at(f, i) - gt.frames.at(f, i)) / c.feat_std.data[i];
            s += d * d;
            ++n;
        }
    return s / n;
}

// Single stride-4 transposed convolution per type: a linear decoder whose
// transpose Jacobian is exactly block-Toeplitz, edges included.
SurrogateProblem linear_problem(Rng& rng) {
    SurrogateProblem pr;
    pr.d = 6;
    pr.stride = 4;
    pr.window = 2;
    pr.probe_scale = 1.0;
    pr.type_dim = {5, 3};
    auto w0 = std::make_shared<Tensor>(Tensor::randn({6, 5, 8}, rng));
    auto w1 = std::make_shared<Tensor>(Tensor::randn({6, 3, 8}, rng));
    pr.decode = [w0, w1](Tape& tp, Var z, int type) {
        const Tensor& w = type == 0 ? *w0 : *w1;
        Var b = tp.constant(Tensor::zeros({w.shape[1]}));
        return tp.conv1d_transpose(z, tp.constant(w), b, 4, 2);
    };
    return pr;
}

}  // namespace

TEST_CASE("encode shape contract, determinism, level decomposition") {
    const Codec& c = main_codec();
    const SceneMotion& m = toy_dataset()[0];
    LatentSeq z = c.encode(m);
    REQUIRE(z.z.shape == std::vector<int>{16, 3, 16});
    REQUIRE(static_cast<int>(z.levels.size()) == c.cfg.levels);
    LatentSeq z2 = c.encode(m);
    REQUIRE(z.z.data == z2.z.data);
    for (int64_t i = 0; i < z.z.numel(); ++i) {
        double sum = 0.0;
        for (const auto& lvl : z.levels) sum += lvl.data[i];
        REQUIRE(z.z.data[i] == sum);
    }
}

TEST_CASE("round-trip reconstruction meets the held-out gate") {
    const Codec& c = main_codec();
    const auto& data = toy_dataset();
    int n_val = data.size() / 5;
    double pooled = 0.0;
    for (size_t i = data.size() - n_val; i < data.size(); ++i) {
        SceneMotion rec = c.decode(c.encode(data[i]).z);
        pooled += normalized_mse(c, data[i], rec) / n_val;
        REQUIRE(rec.N == 16 * c.cfg.stride);
        rec.validate();
    }
    CHECK(pooled < c.cfg.recon_threshold);
}

TEST_CASE("decode of the zero latent is finite with renormalized quaternions") {
    const Codec& c = main_codec();
    SceneMotion m = c.decode(Tensor::zeros({16, 3, 16}));
    m.frames.check_finite("zero-latent decode");
    for (int n = 0; n < m.N; ++n) {
        auto q = m.obj_quat(n, 0);
        double nq = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
        CHECK(nq == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("codec rejects bad inputs") {
    CodecConfig cfg;
    Rng rng(1);
    CHECK_THROWS_AS(train_codec({}, cfg, rng), ConfigError);

    Codec unfrozen(cfg, rng);
    CHECK_THROWS(unfrozen.encode(toy_dataset()[0]));

    const Codec& c = main_codec();
    SceneMotion wrong(SceneDims{1, 22, 0, {}}, 64);
    CHECK_THROWS(c.encode(wrong));
    CHECK_THROWS(c.decode(Tensor::zeros({16, 2, 16})));
}

TEST_CASE("constant-pose dataset reconstructs to well under reference scale") {
    Rng rng(11);
    auto specs = make_task_suite(2, 32, rng);
    std::vector<SceneMotion> data;
    for (int rep = 0; rep < 2; ++rep)
        for (const auto& sp : specs) {
            SceneMotion src = make_toy_scene(sp);
            for (int pick : {4, 20}) {
                SceneMotion cm(src.dims, 32);
                for (int n = 0; n < 32; ++n)
                    for (int i = 0; i < src.frames.shape[1]; ++i)
                        cm.frames.at(n, i) = src.frames.at(pick, i);
                data.push_back(std::move(cm));
            }
        }
    CodecConfig cfg;
    cfg.trunk = 16;
    cfg.steps = 2400;
    cfg.batch = 4;
    cfg.lr = 3e-3;
    cfg.codebook = 32;
    cfg.recon_threshold = 1.0;  // gate off; measured directly below
    Rng trng(3);
    Codec c = train_codec(data, cfg, trng);

    // Reference scale: pooled variance of the data around its global mean.
    double var = 0.0, err = 0.0;
    int64_t cnt = 0;
    int D = data[0].frames.shape[1];
    std::vector<double> mean(D, 0.0);
    for (const auto& m : data)
        for (int n = 0; n < m.N; ++n)
            for (int i = 0; i < D; ++i) mean[i] += m.frames.at(n, i) / (data.size() * m.N);
    for (const auto& m : data) {
        SceneMotion rec = c.decode(c.encode(m).z);
        for (int n = 0; n < m.N; ++n)
            for (int i = 0; i < D; ++i) {
                double dv = m.frames.at(n, i) - mean[i];
                var += dv * dv;
                double de = rec.frames.at(n, i) - m.frames.at(n, i);
                err += de * de;
                ++cnt;
            }
    }
    CHECK(err / cnt < 1e-3 * (var / cnt));
}

TEST_CASE("single-level quantization with a large codebook tracks the continuous autoencoder") {
    Rng rng(19);
    std::vector<SceneMotion> data;
    for (const auto& sp : make_task_suite(10, 32, rng)) data.push_back(make_toy_scene(sp));

    CodecConfig base;
    base.trunk = 16;
    base.steps = 800;
    base.batch = 4;
    base.lr = 2e-3;
    base.recon_threshold = 1.0;

    CodecConfig vq = base;
    vq.levels = 1;
    vq.codebook = 512;
    Rng r1(5), r2(5);
    Codec cq = train_codec(data, vq, r1);

    CodecConfig cont = base;
    cont.levels = 1;
    cont.codebook = 512;
    cont.quantize = false;
    Codec cc = train_codec(data, cont, r2);

    auto val_mse = [&](const Codec& c) {
        double worst = 0.0;
        int n_val = data.size() / 5;
        for (size_t i = data.size() - n_val; i < data.size(); ++i)
            worst += normalized_mse(c, data[i], c.decode(c.encode(data[i]).z)) / n_val;
        return worst;
    };
    double mq = val_mse(cq), mc = val_mse(cc);
    CHECK(mq <= 1.1 * mc + 1e-6);
}

TEST_CASE("surrogate is exact for a linear block-Toeplitz decoder") {
    Rng rng(23);
    SurrogateProblem pr = linear_problem(rng);
    JacobianSurrogate s = fit_surrogate_on(pr, 64, 6, 77);

    Tensor z = Tensor::randn({16, 3, 6}, rng);
    Tensor g = Tensor::randn({64, 13}, rng);
    Tensor exact = jacobian_transpose_apply_on(pr, 2, 3, z, g);
    Tensor approx = precondition_on(s, 2, 3, g);
    REQUIRE(exact.shape == approx.shape);
    double scale = norm(exact) + 1e-12;
    for (int64_t i = 0; i < exact.numel(); ++i)
        CHECK(std::abs(exact.data[i] - approx.data[i]) / scale < 1e-6);

    // Linearity: zero maps to zero, scaling commutes.
    Tensor zero = precondition_on(s, 2, 3, Tensor::zeros({64, 13}));
    for (double v : zero.data) CHECK(v == 0.0);
    Tensor g3 = g;
    for (double& v : g3.data) v *= 3.0;
    Tensor a3 = precondition_on(s, 2, 3, g3);
    for (int64_t i = 0; i < a3.numel(); ++i)
        CHECK(a3.data[i] == Catch::Approx(3.0 * approx.data[i]).margin(1e-12));
}

TEST_CASE("surrogate application is shift-equivariant in the interior") {
    Rng rng(29);
    SurrogateProblem pr = linear_problem(rng);
    JacobianSurrogate s = fit_surrogate_on(pr, 64, 6, 78);
    Tensor g = Tensor::randn({64, 13}, rng);
    Tensor shifted = Tensor::zeros({64, 13});
    for (int n = 4; n < 64; ++n)
        for (int i = 0; i < 13; ++i) shifted.at(n, i) = g.at(n - 4, i);
    Tensor a = precondition_on(s, 2, 3, g);
    Tensor b = precondition_on(s, 2, 3, shifted);
    for (int t = 3; t < 13; ++t)
        for (int v = 0; v < 3; ++v)
            for (int i = 0; i < 6; ++i) REQUIRE(b.at(t, v, i) == a.at(t - 1, v, i));
}

TEST_CASE("surrogate on the trained codec aligns with the exact transpose Jacobian") {
    const Codec& c = main_codec();
    Rng rng(55);
    std::vector<Tensor> latents;
    for (int i = 0; i < 8; ++i) latents.push_back(c.encode(toy_dataset()[i]).z);
    JacobianSurrogate s = fit_surrogate(c, 512, 8, 99, latents);

    std::vector<Tensor> eval_latents;
    for (int i = 14; i < 20; ++i) eval_latents.push_back(c.encode(toy_dataset()[i]).z);
    double cos_sum = 0.0;
    int trials = 128;
    for (int i = 0; i < trials; ++i) {
        Tensor g = Tensor::randn({64, c.cfg.full_dim()}, rng);
        const Tensor& z = eval_latents[i % eval_latents.size()];
        Tensor exact = decoder_jacobian_transpose_apply(c, z, g);
        Tensor approx = precondition(s, c, g);
        cos_sum += cosine(approx, exact);
    }
    CHECK(cos_sum / trials > 0.8);
}

TEST_CASE("preconditioned descent reduces a smooth tracking energy") {
    const Codec& c = main_codec();
    std::vector<Tensor> latents;
    for (int i = 0; i < 8; ++i) latents.push_back(c.encode(toy_dataset()[i]).z);
    JacobianSurrogate s = fit_surrogate(c, 512, 8, 99, latents);
    SceneMotion ref = toy_dataset()[1];
    Rng rng(61);

    auto energy = [&](const SceneMotion& m) {
        double e = 0.0;
        for (int n = 0; n < m.N; ++n)
            for (int i = 0; i < m.frames.shape[1]; ++i) {
                double d = m.frames.at(n, i) - ref.frames.at(n, i);
                e += 0.5 * d * d;
            }
        return e;
    };

    int ok = 0, total = 20;
    for (int trial = 0; trial < total; ++trial) {
        Tensor z = c.encode(toy_dataset()[trial % toy_dataset().size()]).z;
        for (double& v : z.data) v += 0.3 * rng.normal();
        SceneMotion m0 = c.decode(z);
        double e0 = energy(m0);
        Tensor grad = Tensor::zeros(m0.frames.shape);
        for (int64_t i = 0; i < grad.numel(); ++i)
            grad.data[i] = m0.frames.data[i] - ref.frames.data[i];
        Tensor dir = precondition(s, c, grad);
        for (double eta : {3e-2, 1e-2, 3e-3, 1e-3}) {
            Tensor z2 = z;
            for (int64_t i = 0; i < z2.numel(); ++i) z2.data[i] -= eta * dir.data[i];
            if (energy(c.decode(z2)) <= e0) {
                ++ok;
                break;
            }
        }
    }
    CHECK(ok >= 18);
}

TEST_CASE("surrogate rejects bad configuration") {
    const Codec& c = main_codec();
    CHECK_THROWS_AS(fit_surrogate(c, 512, 0, 1), ConfigError);
    CHECK_THROWS_AS(fit_surrogate(c, 512, c.cfg.d + 1, 1), ConfigError);
    CHECK_THROWS_AS(fit_surrogate(c, 100, 8, 1), ConfigError);
}

TEST_CASE("codec and surrogate checkpoints round-trip bitwise") {
    const Codec& c = main_codec();
    nlohmann::json j = c.to_json();
    Codec c2 = Codec::from_json(nlohmann::json::parse(j.dump()));
    REQUIRE(c2.params.checksum() == c.params.checksum());
    const SceneMotion& m = toy_dataset()[2];
    LatentSeq a = c.encode(m), b = c2.encode(m);
    REQUIRE(a.z.data == b.z.data);
    SceneMotion da = c.decode(a.z), db = c2.decode(b.z);
    REQUIRE(da.frames.data == db.frames.data);

    JacobianSurrogate s = fit_surrogate(c, 512, 8, 99);
    JacobianSurrogate s2 = JacobianSurrogate::from_json(nlohmann::json::parse(s.to_json().dump()));
    Rng rng(2);
    Tensor g = Tensor::randn({64, c.cfg.full_dim()}, rng);
    Tensor pa = precondition(s, c, g), pb = precondition(s2, c, g);
    REQUIRE(pa.data == pb.data);
}

TEST_CASE("frozen codec parameters are immutable across downstream use") {
    const Codec& c = main_codec();
    double before = c.params.checksum();
    (void)fit_surrogate(c, 512, 8, 123);
    (void)c.encode(toy_dataset()[3]);
    (void)c.decode(Tensor::zeros({16, 3, 16}));
    CHECK(c.params.checksum() == before);
}
