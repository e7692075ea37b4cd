#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "storyflow/autodiff.hpp"
#include "storyflow/fdcheck.hpp"
#include "storyflow/nn.hpp"
#include "storyflow/rng.hpp"
#include "storyflow/tensor.hpp"

using namespace storyflow;

namespace {

Tensor randn_t(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, scale);
}

}  // namespace

TEST_CASE("rng is deterministic and forkable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(a.uniform() == b.uniform());
        REQUIRE(a.normal() == b.normal());
    }
    Rng c(42);
    Rng f1 = c.fork(1), f2 = c.fork(2);
    REQUIRE(f1.uniform() != f2.uniform());

    Rng d(7);
    double mean = 0.0, var = 0.0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (double& x : xs) x = d.normal();
    for (double x : xs) mean += x;
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("forward: identity and affine layers") {
    Tape t;
    Var x = t.leaf(Tensor({1, 2}, {1.0, 2.0}));
    Var W = t.leaf(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
    Var y = t.linear(x, W, Var{});
    REQUIRE(t.val(y).data == std::vector<double>{1.0, 2.0});

    Var x1 = t.leaf(Tensor({1, 1}, {3.0}));
    Var W1 = t.leaf(Tensor({1, 1}, {2.0}));
    Var b1 = t.leaf(Tensor({1}, {1.0}));
    Var y1 = t.linear(x1, W1, b1);
    REQUIRE(t.val(y1).data[0] == 7.0);
}

TEST_CASE("two-layer tanh net matches scalar recomputation") {
    ParamStore store;
    Rng rng(11);
    Mlp mlp(store, "net", {3, 4, 2}, Act::tanh, Act::identity, rng);

    Tensor x({1, 3}, {0.3, -0.7, 1.1});
    Tape t;
    TapeBinding bind(t, store, false);
    Var out = mlp.forward(t, bind, t.leaf(x));
    const Tensor& y = t.val(out);

    // Same accumulation order as the tape's linear op.
    const Tensor& w0 = store.value("net.w0");
    const Tensor& b0 = store.value("net.b0");
    const Tensor& w1 = store.value("net.w1");
    const Tensor& b1 = store.value("net.b1");
    double h[4];
    for (int o = 0; o < 4; ++o) {
        double s = 0.0;
        for (int i = 0; i < 3; ++i) s += x.data[i] * w0.at(o, i);
        h[o] = std::tanh(s + b0.data[o]);
    }
    for (int o = 0; o < 2; ++o) {
        double s = 0.0;
        for (int i = 0; i < 4; ++i) s += h[i] * w1.at(o, i);
        s += b1.data[o];
        REQUIRE(y.data[o] == Catch::Approx(s).margin(1e-14));
    }
}

TEST_CASE("grad: square and softmax-sum") {
    Tape t;
    Var x = t.leaf(Tensor({1}, {3.0}), true);
    Var y = t.sum(t.square(x));
    t.backward(y);
    REQUIRE(t.grad(x).data[0] == 6.0);

    Tape t2;
    Var v = t2.leaf(Tensor({4}, {0.3, -1.2, 0.9, 2.0}), true);
    Var s = t2.sum(t2.softmax_last(v));
    t2.backward(s);
    for (double g : t2.grad(v).data) REQUIRE(g == 0.0);
}

TEST_CASE("grad: random 3-layer MLP loss matches finite differences") {
    ParamStore store;
    Rng rng(5);
    Mlp mlp(store, "m", {6, 8, 8, 1}, Act::tanh, Act::identity, rng);

    Tensor x = randn_t({2, 6}, 99);
    auto f = [&](Tape& t, Var xv) {
        TapeBinding bind(t, store, false);
        Var out = mlp.forward(t, bind, xv);
        return t.sum(t.square(out));
    };
    FdReport rep = fd_check(f, x, 1e-6);
    CHECK(rep.max_rel_err < 1e-5);

    // Weight gradients too: check one layer through the same loss.
    Tensor w0 = store.value("m.w0");
    auto fw = [&](Tape& t, Var wv) {
        TapeBinding bind(t, store, false);
        Var h = t.tanh_(t.linear(t.leaf(x), wv, bind["m.b0"]));
        h = t.tanh_(t.linear(h, bind["m.w1"], bind["m.b1"]));
        h = t.linear(h, bind["m.w2"], bind["m.b2"]);
        return t.sum(t.square(h));
    };
    CHECK(fd_check(fw, w0, 1e-6).max_rel_err < 1e-5);
}

TEST_CASE("fd_check: quadratic is exact to roundoff") {
    auto f = [](Tape& t, Var x) { return t.sum(t.square(x)); };
    Tensor x({5}, {1.0, -2.0, 0.5, 3.0, -0.25});
    CHECK(fd_check(f, x, 1e-4).max_rel_err < 1e-9);
}

TEST_CASE("fd_check: Huber kink is flagged, smooth region passes") {
    const double delta = 1e-4;
    auto f = [delta](Tape& t, Var x) { return t.sum(t.huber(x, delta)); };

    Tensor at_kink({1}, {delta});
    FdReport kink = fd_check(f, at_kink, 1e-6);
    CHECK_FALSE(kink.within(1e-5));

    Tensor away({1}, {5.0 * delta});
    CHECK(fd_check(f, away, 1e-8).max_rel_err < 1e-5);
}

TEST_CASE("softmax with additive bias: backward matches finite differences") {
    Tensor bias({3, 4}, {0.5, -1.0, 0.0, 2.0, 1.0, 1.0, -0.5, 0.0, 0.0, 0.3, -0.3, 0.7});
    Tensor w = randn_t({3, 4}, 123);
    auto f = [&](Tape& t, Var x) {
        Var logits = t.add(x, t.constant(bias));
        Var p = t.softmax_last(logits);
        return t.dot_prod(p, t.constant(w));
    };
    Tensor x = randn_t({3, 4}, 321);
    CHECK(fd_check(f, x, 1e-6).max_rel_err < 1e-5);
}

TEST_CASE("fd sweep over every differentiable op") {
    auto check = [](const char* name, const ScalarFn& f, const Tensor& x, double tol = 1e-5) {
        FdReport rep = fd_check(f, x, 1e-6);
        INFO(name << " worst coord " << rep.worst_coord << " analytic "
                  << rep.analytic_at_worst << " fd " << rep.fd_at_worst);
        CHECK(rep.max_rel_err < tol);
    };

    Tensor x23 = randn_t({2, 3}, 1);
    Tensor y23 = randn_t({2, 3}, 2);
    for (double& v : y23.data) v += v >= 0.0 ? 1.5 : -1.5;  // keep divisors away from 0

    check("add", [&](Tape& t, Var v) { return t.sum(t.square(t.add(v, t.constant(y23)))); }, x23);
    check("sub", [&](Tape& t, Var v) { return t.sum(t.square(t.sub(v, t.constant(y23)))); }, x23);
    check("mul", [&](Tape& t, Var v) { return t.sum(t.mul(v, t.constant(y23))); }, x23);
    check("mul_both",
          [&](Tape& t, Var v) {
              Var a = t.slice_rows(v, 0, 1), b = t.slice_rows(v, 1, 1);
              return t.sum(t.mul(a, b));
          },
          x23);
    check("div", [&](Tape& t, Var v) { return t.sum(t.div(v, t.constant(y23))); }, x23);
    check("div_denom", [&](Tape& t, Var v) { return t.sum(t.div(t.constant(x23), v)); }, y23);
    check("scale", [&](Tape& t, Var v) { return t.sum(t.scale(v, -2.5)); }, x23);
    check("add_scalar", [&](Tape& t, Var v) { return t.sum(t.square(t.add_scalar(v, 0.7))); }, x23);
    check("tanh", [&](Tape& t, Var v) { return t.sum(t.tanh_(v)); }, x23);
    check("softplus", [&](Tape& t, Var v) { return t.sum(t.softplus_(v)); }, x23);
    check("sigmoid", [&](Tape& t, Var v) { return t.sum(t.sigmoid_(v)); }, x23);
    check("exp", [&](Tape& t, Var v) { return t.sum(t.exp_(v)); }, x23);
    check("square", [&](Tape& t, Var v) { return t.sum(t.square(v)); }, x23);

    Tensor pos23 = x23;
    for (double& v : pos23.data) v = std::abs(v) + 0.5;
    check("sqrt_eps", [&](Tape& t, Var v) { return t.sum(t.sqrt_eps(v)); }, pos23);

    Tensor off0 = x23;
    for (double& v : off0.data) v += v >= 0.0 ? 0.2 : -0.2;  // away from relu kink
    check("relu", [&](Tape& t, Var v) { return t.sum(t.square(t.relu(v)))  ; }, off0);

    Tensor mid({4}, {0.2, 0.45, 0.7, 0.9});  // strictly inside (0,1)
    check("clamp01", [&](Tape& t, Var v) { return t.sum(t.square(t.clamp01(v))); }, mid);

    check("huber", [&](Tape& t, Var v) { return t.sum(t.huber(v, 0.5)); }, off0);
    check("mean", [&](Tape& t, Var v) { return t.mean(t.square(v)); }, x23);
    check("dot", [&](Tape& t, Var v) { return t.dot_prod(v, t.constant(y23)); }, x23);
    check("sum_last", [&](Tape& t, Var v) { return t.sum(t.square(t.sum_last(v))); }, x23);
    check("mean_axis0", [&](Tape& t, Var v) { return t.sum(t.square(t.mean_axis0(v))); }, x23);
    check("softmax_last",
          [&](Tape& t, Var v) { return t.dot_prod(t.softmax_last(v), t.constant(y23)); }, x23);
    check("logsumexp_last", [&](Tape& t, Var v) { return t.sum(t.logsumexp_last(v)); }, x23);

    Tensor W = randn_t({4, 3}, 3);
    Tensor b4 = randn_t({4}, 4);
    check("linear_x",
          [&](Tape& t, Var v) {
              return t.sum(t.square(t.linear(v, t.constant(W), t.constant(b4))));
          },
          x23);
    check("linear_w",
          [&](Tape& t, Var v) {
              return t.sum(t.square(t.linear(t.constant(x23), v, t.constant(b4))));
          },
          W);
    check("linear_b",
          [&](Tape& t, Var v) {
              return t.sum(t.square(t.linear(t.constant(x23), t.constant(W), v)));
          },
          b4);

    Tensor m34 = randn_t({3, 4}, 5);
    check("matmul_a", [&](Tape& t, Var v) { return t.sum(t.square(t.matmul(v, t.constant(m34)))); },
          x23);
    check("matmul_b",
          [&](Tape& t, Var v) { return t.sum(t.square(t.matmul(t.constant(x23), v))); }, m34);

    Tensor a234 = randn_t({2, 3, 4}, 6);
    Tensor b245 = randn_t({2, 4, 5}, 7);
    Tensor c254 = randn_t({2, 5, 4}, 8);
    check("bmm_a", [&](Tape& t, Var v) { return t.sum(t.square(t.bmm(v, t.constant(b245)))); },
          a234);
    check("bmm_b", [&](Tape& t, Var v) { return t.sum(t.square(t.bmm(t.constant(a234), v))); },
          b245);
    check("bmm_nt_a",
          [&](Tape& t, Var v) { return t.sum(t.square(t.bmm_nt(v, t.constant(c254)))); }, a234);
    check("bmm_nt_b",
          [&](Tape& t, Var v) { return t.sum(t.square(t.bmm_nt(t.constant(a234), v))); }, c254);

    check("reshape", [&](Tape& t, Var v) { return t.sum(t.square(t.reshape(v, {3, 2}))); }, x23);
    check("transpose01", [&](Tape& t, Var v) { return t.sum(t.square(t.transpose01(v))); }, a234);
    check("slice_rows", [&](Tape& t, Var v) { return t.sum(t.square(t.slice_rows(v, 1, 1))); },
          x23);
    check("slice_cols", [&](Tape& t, Var v) { return t.sum(t.square(t.slice_cols(v, 1, 2))); },
          x23);
    check("pick_rows",
          [&](Tape& t, Var v) { return t.sum(t.square(t.pick_rows(v, {1, 0, 1}))); }, x23);
    check("concat_last",
          [&](Tape& t, Var v) {
              Var a = t.slice_cols(v, 0, 1), b = t.slice_cols(v, 1, 2);
              return t.sum(t.square(t.concat_last({b, a})));
          },
          x23);
    check("concat_rows",
          [&](Tape& t, Var v) {
              Var a = t.slice_rows(v, 0, 1), b = t.slice_rows(v, 1, 1);
              return t.sum(t.square(t.concat_rows({b, a})));
          },
          x23);

    Tensor v3 = randn_t({3}, 9);
    check("add_rowvec_x",
          [&](Tape& t, Var v) { return t.sum(t.square(t.add_rowvec(v, t.constant(v3)))); }, x23);
    check("add_rowvec_v",
          [&](Tape& t, Var v) { return t.sum(t.square(t.add_rowvec(t.constant(x23), v))); }, v3);

    Tensor r24 = randn_t({2, 4}, 10);
    check("add_mid1_x",
          [&](Tape& t, Var v) { return t.sum(t.square(t.add_mid1(v, t.constant(r24)))); }, a234);
    check("add_mid1_r",
          [&](Tape& t, Var v) { return t.sum(t.square(t.add_mid1(t.constant(a234), v))); }, r24);

    Tensor xc = randn_t({3, 8}, 11);
    Tensor Wc = randn_t({5, 3, 4}, 12, 0.5);
    Tensor bc = randn_t({5}, 13);
    check("conv1d_x",
          [&](Tape& t, Var v) {
              return t.sum(t.square(t.conv1d(v, t.constant(Wc), t.constant(bc), 2, 1)));
          },
          xc);
    check("conv1d_w",
          [&](Tape& t, Var v) {
              return t.sum(t.square(t.conv1d(t.constant(xc), v, t.constant(bc), 2, 1)));
          },
          Wc);
    Tensor Wt = randn_t({3, 5, 4}, 14, 0.5);
    check("conv1d_transpose_x",
          [&](Tape& t, Var v) {
              return t.sum(t.square(t.conv1d_transpose(v, t.constant(Wt), t.constant(bc), 2, 1)));
          },
          xc);
    check("conv1d_transpose_w",
          [&](Tape& t, Var v) {
              return t.sum(t.square(t.conv1d_transpose(t.constant(xc), v, t.constant(bc), 2, 1)));
          },
          Wt);

    Tensor poly({4, 2}, {0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 2.0, 1.0});
    Tensor pts = randn_t({6, 2}, 15);
    for (double& v : pts.data) v = 0.5 + 0.8 * v;
    check("polyline_soft_dist",
          [&](Tape& t, Var v) { return t.sum(t.square(t.polyline_soft_dist(v, poly, 8.0))); },
          pts);
}

TEST_CASE("conv1d shapes: stride-2 down and matching transposed up") {
    Tape t;
    Rng rng(3);
    Var x = t.leaf(Tensor::randn({3, 16}, rng));
    Var W = t.leaf(Tensor::randn({5, 3, 4}, rng, 0.3));
    Var y = t.conv1d(x, W, Var{}, 2, 1);
    REQUIRE(t.val(y).shape == std::vector<int>{5, 8});

    Var Wt = t.leaf(Tensor::randn({5, 3, 4}, rng, 0.3));
    Var z = t.conv1d_transpose(y, Wt, Var{}, 2, 1);
    REQUIRE(t.val(z).shape == std::vector<int>{3, 16});
}

TEST_CASE("backward is bit-identical across runs with the same seed") {
    auto run = [](uint64_t seed) {
        ParamStore store;
        Rng rng(seed);
        Mlp mlp(store, "m", {4, 6, 3}, Act::tanh, Act::identity, rng);
        Tensor x = Tensor::randn({2, 4}, rng);
        Tape t;
        TapeBinding bind(t, store, true);
        Var out = mlp.forward(t, bind, t.leaf(x, true));
        Var loss = t.mean(t.square(out));
        t.backward(loss);
        GradMap gm;
        bind.add_grads_to(gm);
        std::vector<double> flat;
        for (const auto& [name, g] : gm.entries())
            flat.insert(flat.end(), g.data.begin(), g.data.end());
        flat.push_back(t.val(loss).data[0]);
        return flat;
    };
    std::vector<double> a = run(1234), b = run(1234);
    REQUIRE(a.size() == b.size());
    REQUIRE(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("xavier init respects fan-in/fan-out bound; biases start at zero") {
    ParamStore store;
    Rng rng(77);
    Mlp mlp(store, "m", {10, 20, 5}, Act::tanh, Act::identity, rng);
    double lim0 = std::sqrt(6.0 / (10 + 20));
    for (double w : store.value("m.w0").data) CHECK(std::abs(w) <= lim0);
    for (double b : store.value("m.b0").data) CHECK(b == 0.0);
}

TEST_CASE("adam matches a hand-stepped oracle") {
    ParamStore store;
    store.create("w", Tensor({2}, {0.0, 1.0}));
    AdamConfig cfg;
    cfg.lr = 0.1;

    double w[2] = {0.0, 1.0}, m[2] = {0.0, 0.0}, v[2] = {0.0, 0.0};
    Tensor g({2}, {1.0, -2.0});
    for (int step = 1; step <= 3; ++step) {
        GradMap gm;
        gm.add("w", g);
        store.adam_step(gm, cfg);
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * g.data[i];
            v[i] = 0.999 * v[i] + 0.001 * g.data[i] * g.data[i];
            double mh = m[i] / (1.0 - std::pow(0.9, step));
            double vh = v[i] / (1.0 - std::pow(0.999, step));
            w[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
            REQUIRE(store.value("w").data[i] == Catch::Approx(w[i]).margin(1e-15));
        }
    }
}

TEST_CASE("parameter checkpoints round-trip exactly and verify the shape chain") {
    ParamStore store;
    Rng rng(2024);
    Mlp mlp(store, "net", {3, 5, 2}, Act::tanh, Act::identity, rng);
    GradMap gm;
    gm.add("net.w0", randn_t({5, 3}, 50));
    gm.add("net.b0", randn_t({5}, 51));
    store.adam_step(gm, AdamConfig{});

    nlohmann::json j = store.to_json();
    std::string text = j.dump();
    nlohmann::json back = nlohmann::json::parse(text);

    ParamStore fresh;
    Rng rng2(999);  // different init; load must overwrite it
    Mlp mlp2(fresh, "net", {3, 5, 2}, Act::tanh, Act::identity, rng2);
    fresh.load_json(back);
    for (const std::string& name : store.names()) {
        REQUIRE(fresh.value(name).data == store.value(name).data);
    }
    REQUIRE(fresh.step_count() == store.step_count());
    REQUIRE(fresh.checksum() == store.checksum());

    ParamStore wrong;
    Rng rng3(1);
    Mlp mlp3(wrong, "net", {3, 4, 2}, Act::tanh, Act::identity, rng3);
    REQUIRE_THROWS(wrong.load_json(back));
}

TEST_CASE("grad on non-scalar output is rejected") {
    Tape t;
    Var x = t.leaf(Tensor({2}, {1.0, 2.0}), true);
    Var y = t.square(x);
    REQUIRE_THROWS(t.backward(y));
}
