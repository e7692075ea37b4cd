#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "storyflow/tensor.hpp"

namespace storyflow {

// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over tensor ops. Nodes are appended in evaluation order,
// so reverse creation order is a reverse topological order; backward() visits
// each node exactly once. Tapes are single-owner and must not be shared
// across threads.
class Tape {
public:
    Var leaf(Tensor v, bool requires_grad = false) {
        return push(std::move(v), requires_grad, nullptr);
    }

    Var constant(Tensor v) { return leaf(std::move(v), false); }
    Var constant(double v) { return leaf(Tensor::scalar(v), false); }

    const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
    bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

    // Gradient of the last backward() target w.r.t. v; zeros if untouched.
    Tensor grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.id)];
        if (n.grad.numel() == 0) return Tensor::zeros(n.value.shape);
        return n.grad;
    }

    size_t size() const { return nodes_.size(); }

    // Backpropagate from a scalar output to every reachable leaf.
    void backward(Var out) {
        Node& o = nodes_[static_cast<size_t>(out.id)];
        if (o.value.numel() != 1) throw std::invalid_argument("backward: output must be scalar");
        for (Node& n : nodes_) n.grad = Tensor();
        o.grad = Tensor::scalar(1.0);
        for (int i = out.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.grad.numel() == 0 || !n.back) continue;
            n.back(*this, n.grad);
        }
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        Tensor y = val(a) + val(b);
        return binary(std::move(y), a, b,
                      [](const Tensor& g, Tensor& ga) { ga += g; },
                      [](const Tensor& g, Tensor& gb) { gb += g; });
    }

    Var sub(Var a, Var b) {
        Tensor y = val(a) - val(b);
        return binary(std::move(y), a, b,
                      [](const Tensor& g, Tensor& ga) { ga += g; },
                      [](const Tensor& g, Tensor& gb) { axpy(gb, -1.0, g); });
    }

    Var mul(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        assert(ta.same_shape(tb));
        Tensor y = ta;
        for (int64_t i = 0; i < y.numel(); ++i) y.data[i] *= tb.data[i];
        int aid = a.id, bid = b.id;
        return push(std::move(y), requires_grad(a) || requires_grad(b),
                    [aid, bid](Tape& t, const Tensor& g) {
                        Var av{aid}, bv{bid};
                        if (t.requires_grad(av)) {
                            Tensor& ga = t.grad_buf(av);
                            const Tensor& tb2 = t.val(bv);
                            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * tb2.data[i];
                        }
                        if (t.requires_grad(bv)) {
                            Tensor& gb = t.grad_buf(bv);
                            const Tensor& ta2 = t.val(av);
                            for (int64_t i = 0; i < g.numel(); ++i) gb.data[i] += g.data[i] * ta2.data[i];
                        }
                    });
    }

    Var div(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        assert(ta.same_shape(tb));
        Tensor y = ta;
        for (int64_t i = 0; i < y.numel(); ++i) y.data[i] /= tb.data[i];
        int aid = a.id, bid = b.id;
        return push(std::move(y), requires_grad(a) || requires_grad(b),
                    [aid, bid](Tape& t, const Tensor& g) {
                        Var av{aid}, bv{bid};
                        const Tensor& tb2 = t.val(bv);
                        if (t.requires_grad(av)) {
                            Tensor& ga = t.grad_buf(av);
                            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] / tb2.data[i];
                        }
                        if (t.requires_grad(bv)) {
                            Tensor& gb = t.grad_buf(bv);
                            const Tensor& ta2 = t.val(av);
                            for (int64_t i = 0; i < g.numel(); ++i)
                                gb.data[i] -= g.data[i] * ta2.data[i] / (tb2.data[i] * tb2.data[i]);
                        }
                    });
    }

    Var scale(Var a, double s) {
        Tensor y = s * val(a);
        return unary(std::move(y), a, [s](const Tensor& g, Tensor& ga) { axpy(ga, s, g); });
    }

    Var add_scalar(Var a, double s) {
        Tensor y = val(a);
        for (double& x : y.data) x += s;
        return unary(std::move(y), a, [](const Tensor& g, Tensor& ga) { ga += g; });
    }

    Var neg(Var a) { return scale(a, -1.0); }

    Var tanh_(Var a) {
        Tensor y = val(a);
        for (double& x : y.data) x = std::tanh(x);
        int yidhold = -1;
        Var out = unary_with_y(std::move(y), a, &yidhold,
                               [](const Tensor& g, const Tensor& yv, Tensor& ga) {
                                   for (int64_t i = 0; i < g.numel(); ++i)
                                       ga.data[i] += g.data[i] * (1.0 - yv.data[i] * yv.data[i]);
                               });
        return out;
    }

    Var softplus_(Var a) {
        const Tensor& ta = val(a);
        Tensor y = ta;
        for (double& x : y.data) x = softplus_val(x);
        int aid = a.id;
        return push(std::move(y), requires_grad(a), [aid](Tape& t, const Tensor& g) {
            Var av{aid};
            if (!t.requires_grad(av)) return;
            Tensor& ga = t.grad_buf(av);
            const Tensor& ta2 = t.val(av);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * sigmoid_val(ta2.data[i]);
        });
    }

    Var sigmoid_(Var a) {
        Tensor y = val(a);
        for (double& x : y.data) x = sigmoid_val(x);
        int hold = -1;
        return unary_with_y(std::move(y), a, &hold,
                            [](const Tensor& g, const Tensor& yv, Tensor& ga) {
                                for (int64_t i = 0; i < g.numel(); ++i)
                                    ga.data[i] += g.data[i] * yv.data[i] * (1.0 - yv.data[i]);
                            });
    }

    Var exp_(Var a) {
        Tensor y = val(a);
        for (double& x : y.data) x = std::exp(x);
        int hold = -1;
        return unary_with_y(std::move(y), a, &hold,
                            [](const Tensor& g, const Tensor& yv, Tensor& ga) {
                                for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * yv.data[i];
                            });
    }

    Var square(Var a) {
        const Tensor& ta = val(a);
        Tensor y = ta;
        for (double& x : y.data) x = x * x;
        int aid = a.id;
        return push(std::move(y), requires_grad(a), [aid](Tape& t, const Tensor& g) {
            Var av{aid};
            if (!t.requires_grad(av)) return;
            Tensor& ga = t.grad_buf(av);
            const Tensor& ta2 = t.val(av);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += 2.0 * g.data[i] * ta2.data[i];
        });
    }

    // sqrt(x + eps); smooth surrogate for Euclidean norms near zero.
    Var sqrt_eps(Var a, double eps = 1e-24) {
        Tensor y = val(a);
        for (double& x : y.data) x = std::sqrt(x + eps);
        int hold = -1;
        return unary_with_y(std::move(y), a, &hold,
                            [](const Tensor& g, const Tensor& yv, Tensor& ga) {
                                for (int64_t i = 0; i < g.numel(); ++i)
                                    ga.data[i] += 0.5 * g.data[i] / yv.data[i];
                            });
    }

    // log(x + eps); keeps entropy-style terms finite at zero.
    Var log_eps(Var a, double eps = 1e-12) {
        const Tensor& ta = val(a);
        Tensor y = ta;
        for (double& x : y.data) x = std::log(x + eps);
        int aid = a.id;
        return push(std::move(y), requires_grad(a), [aid, eps](Tape& t, const Tensor& g) {
            Var av{aid};
            if (!t.requires_grad(av)) return;
            Tensor& ga = t.grad_buf(av);
            const Tensor& ta2 = t.val(av);
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] / (ta2.data[i] + eps);
        });
    }

    Var relu(Var a) {
        const Tensor& ta = val(a);
        Tensor y = ta;
        for (double& x : y.data) x = x > 0.0 ? x : 0.0;
        int aid = a.id;
        return push(std::move(y), requires_grad(a), [aid](Tape& t, const Tensor& g) {
            Var av{aid};
            if (!t.requires_grad(av)) return;
            Tensor& ga = t.grad_buf(av);
            const Tensor& ta2 = t.val(av);
            for (int64_t i = 0; i < g.numel(); ++i)
                if (ta2.data[i] > 0.0) ga.data[i] += g.data[i];
        });
    }

    Var clamp01(Var a) {
        const Tensor& ta = val(a);
        Tensor y = ta;
        for (double& x : y.data) x = std::min(1.0, std::max(0.0, x));
        int aid = a.id;
        return push(std::move(y), requires_grad(a), [aid](Tape& t, const Tensor& g) {
            Var av{aid};
            if (!t.requires_grad(av)) return;
            Tensor& ga = t.grad_buf(av);
            const Tensor& ta2 = t.val(av);
            for (int64_t i = 0; i < g.numel(); ++i)
                if (ta2.data[i] > 0.0 && ta2.data[i] < 1.0) ga.data[i] += g.data[i];
        });
    }

    // Huber penalty, quadratic within |x| <= delta, linear outside.
    Var huber(Var a, double delta) {
        const Tensor& ta = val(a);
        Tensor y = ta;
        for (double& x : y.data) {
            double ax = std::abs(x);
            x = ax <= delta ? 0.5 * x * x : delta * (ax - 0.5 * delta);
        }
        int aid = a.id;
        return push(std::move(y), requires_grad(a), [aid, delta](Tape& t, const Tensor& g) {
            Var av{aid};
            if (!t.requires_grad(av)) return;
            Tensor& ga = t.grad_buf(av);
            const Tensor& ta2 = t.val(av);
            for (int64_t i = 0; i < g.numel(); ++i) {
                double d = std::min(delta, std::max(-delta, ta2.data[i]));
                ga.data[i] += g.data[i] * d;
            }
        });
    }

    // ---- reductions ----

    Var sum(Var a) {
        double s = 0.0;
        for (double x : val(a).data) s += x;
        return unary(Tensor::scalar(s), a, [](const Tensor& g, Tensor& ga) {
            for (double& x : ga.data) x += g.data[0];
        });
    }

    Var mean(Var a) {
        int64_t n = val(a).numel();
        double s = 0.0;
        for (double x : val(a).data) s += x;
        return unary(Tensor::scalar(s / static_cast<double>(n)), a,
                     [n](const Tensor& g, Tensor& ga) {
                         double w = g.data[0] / static_cast<double>(n);
                         for (double& x : ga.data) x += w;
                     });
    }

    Var dot_prod(Var a, Var b) {
        double s = dot(val(a), val(b));
        int aid = a.id, bid = b.id;
        return push(Tensor::scalar(s), requires_grad(a) || requires_grad(b),
                    [aid, bid](Tape& t, const Tensor& g) {
                        Var av{aid}, bv{bid};
                        if (t.requires_grad(av)) axpy(t.grad_buf(av), g.data[0], t.val(bv));
                        if (t.requires_grad(bv)) axpy(t.grad_buf(bv), g.data[0], t.val(av));
                    });
    }

    // Sum over the last axis: (..., n) -> (...).
    Var sum_last(Var a) {
        const Tensor& ta = val(a);
        int n = ta.shape.back();
        std::vector<int> os(ta.shape.begin(), ta.shape.end() - 1);
        if (os.empty()) os = {1};
        Tensor y(os);
        int64_t rows = y.numel();
        for (int64_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += ta.data[r * n + j];
            y.data[r] = s;
        }
        return unary(std::move(y), a, [n](const Tensor& g, Tensor& ga) {
            int64_t rows = g.numel();
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < n; ++j) ga.data[r * n + j] += g.data[r];
        });
    }

    // Mean over axis 0: (m, ...) -> (...).
    Var mean_axis0(Var a) {
        const Tensor& ta = val(a);
        int m = ta.shape[0];
        std::vector<int> os(ta.shape.begin() + 1, ta.shape.end());
        if (os.empty()) os = {1};
        Tensor y(os);
        int64_t cols = y.numel();
        for (int i = 0; i < m; ++i)
            for (int64_t c = 0; c < cols; ++c) y.data[c] += ta.data[i * cols + c];
        for (double& x : y.data) x /= m;
        return unary(std::move(y), a, [m](const Tensor& g, Tensor& ga) {
            int64_t cols = g.numel();
            for (int i = 0; i < m; ++i)
                for (int64_t c = 0; c < cols; ++c) ga.data[i * cols + c] += g.data[c] / m;
        });
    }

    // ---- softmax family ----

    // Softmax over the last axis, numerically stabilized.
    Var softmax_last(Var a) {
        const Tensor& ta = val(a);
        int n = ta.shape.back();
        Tensor y = ta;
        int64_t rows = ta.numel() / n;
        for (int64_t r = 0; r < rows; ++r) {
            double* row = y.data.data() + r * n;
            double mx = row[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double s = 0.0;
            for (int j = 0; j < n; ++j) {
                row[j] = std::exp(row[j] - mx);
                s += row[j];
            }
            for (int j = 0; j < n; ++j) row[j] /= s;
        }
        int hold = -1;
        return unary_with_y(std::move(y), a, &hold,
                            [n](const Tensor& g, const Tensor& yv, Tensor& ga) {
                                int64_t rows = g.numel() / n;
                                for (int64_t r = 0; r < rows; ++r) {
                                    const double* gr = g.data.data() + r * n;
                                    const double* yr = yv.data.data() + r * n;
                                    double dotgy = 0.0;
                                    for (int j = 0; j < n; ++j) dotgy += gr[j] * yr[j];
                                    double* gar = ga.data.data() + r * n;
                                    for (int j = 0; j < n; ++j) gar[j] += yr[j] * (gr[j] - dotgy);
                                }
                            });
    }

    // log(sum(exp(x), last axis)): (..., n) -> (...).
    Var logsumexp_last(Var a) {
        const Tensor& ta = val(a);
        int n = ta.shape.back();
        std::vector<int> os(ta.shape.begin(), ta.shape.end() - 1);
        if (os.empty()) os = {1};
        Tensor y(os);
        int64_t rows = y.numel();
        for (int64_t r = 0; r < rows; ++r) {
            const double* row = ta.data.data() + r * n;
            double mx = row[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += std::exp(row[j] - mx);
            y.data[r] = mx + std::log(s);
        }
        int aid = a.id;
        return push(std::move(y), requires_grad(a), [aid, n](Tape& t, const Tensor& g) {
            Var av{aid};
            if (!t.requires_grad(av)) return;
            Tensor& ga = t.grad_buf(av);
            const Tensor& ta2 = t.val(av);
            int64_t rows = g.numel();
            for (int64_t r = 0; r < rows; ++r) {
                const double* row = ta2.data.data() + r * n;
                double mx = row[0];
                for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
                double s = 0.0;
                for (int j = 0; j < n; ++j) s += std::exp(row[j] - mx);
                for (int j = 0; j < n; ++j)
                    ga.data[r * n + j] += g.data[r] * std::exp(row[j] - mx) / s;
            }
        });
    }

    // ---- linear algebra ----

    // y = x @ W^T + b with x (..., in), W (out, in), b (out) or invalid Var.
    Var linear(Var x, Var W, Var b) {
        const Tensor &tx = val(x), &tW = val(W);
        int in = tW.shape[1], out = tW.shape[0];
        assert(tx.shape.back() == in);
        int64_t rows = tx.numel() / in;
        std::vector<int> os = tx.shape;
        os.back() = out;
        Tensor y(os);
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = tx.data.data() + r * in;
            double* yr = y.data.data() + r * out;
            for (int o = 0; o < out; ++o) {
                const double* wr = tW.data.data() + static_cast<size_t>(o) * in;
                double s = 0.0;
                for (int i = 0; i < in; ++i) s += xr[i] * wr[i];
                yr[o] = s;
            }
        }
        if (b.valid()) {
            const Tensor& tb = val(b);
            for (int64_t r = 0; r < rows; ++r)
                for (int o = 0; o < out; ++o) y.data[r * out + o] += tb.data[o];
        }
        int xid = x.id, wid = W.id, bid = b.valid() ? b.id : -1;
        bool ng = requires_grad(x) || requires_grad(W) || (b.valid() && requires_grad(b));
        return push(std::move(y), ng, [xid, wid, bid, in, out](Tape& t, const Tensor& g) {
            Var xv{xid}, wv{wid};
            int64_t rows = g.numel() / out;
            const Tensor& tx2 = t.val(xv);
            const Tensor& tW2 = t.val(wv);
            if (t.requires_grad(xv)) {
                Tensor& gx = t.grad_buf(xv);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* gr = g.data.data() + r * out;
                    double* gxr = gx.data.data() + r * in;
                    for (int o = 0; o < out; ++o) {
                        double gv = gr[o];
                        if (gv == 0.0) continue;
                        const double* wr = tW2.data.data() + static_cast<size_t>(o) * in;
                        for (int i = 0; i < in; ++i) gxr[i] += gv * wr[i];
                    }
                }
            }
            if (t.requires_grad(wv)) {
                Tensor& gW = t.grad_buf(wv);
                for (int64_t r = 0; r < rows; ++r) {
                    const double* gr = g.data.data() + r * out;
                    const double* xr = tx2.data.data() + r * in;
                    for (int o = 0; o < out; ++o) {
                        double gv = gr[o];
                        if (gv == 0.0) continue;
                        double* gwr = gW.data.data() + static_cast<size_t>(o) * in;
                        for (int i = 0; i < in; ++i) gwr[i] += gv * xr[i];
                    }
                }
            }
            if (bid >= 0) {
                Var bv{bid};
                if (t.requires_grad(bv)) {
                    Tensor& gb = t.grad_buf(bv);
                    for (int64_t r = 0; r < rows; ++r)
                        for (int o = 0; o < out; ++o) gb.data[o] += g.data[r * out + o];
                }
            }
        });
    }

    // Batched matmul: a (B, m, k) @ b (B, k, n) -> (B, m, n).
    Var bmm(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        int B = ta.shape[0], m = ta.shape[1], k = ta.shape[2], n = tb.shape[2];
        assert(tb.shape[0] == B && tb.shape[1] == k);
        Tensor y({B, m, n});
        for (int bi = 0; bi < B; ++bi)
            matmul_accum(ta.data.data() + static_cast<size_t>(bi) * m * k,
                         tb.data.data() + static_cast<size_t>(bi) * k * n,
                         y.data.data() + static_cast<size_t>(bi) * m * n, m, k, n);
        int aid = a.id, bid = b.id;
        return push(std::move(y), requires_grad(a) || requires_grad(b),
                    [aid, bid, B, m, k, n](Tape& t, const Tensor& g) {
                        Var av{aid}, bv{bid};
                        const Tensor& ta2 = t.val(av);
                        const Tensor& tb2 = t.val(bv);
                        if (t.requires_grad(av)) {
                            Tensor& ga = t.grad_buf(av);
                            // dA = dC @ B^T
                            for (int bi = 0; bi < B; ++bi) {
                                const double* gc = g.data.data() + static_cast<size_t>(bi) * m * n;
                                const double* bb = tb2.data.data() + static_cast<size_t>(bi) * k * n;
                                double* gaa = ga.data.data() + static_cast<size_t>(bi) * m * k;
                                for (int i = 0; i < m; ++i)
                                    for (int p = 0; p < k; ++p) {
                                        double s = 0.0;
                                        for (int j = 0; j < n; ++j)
                                            s += gc[i * n + j] * bb[p * n + j];
                                        gaa[i * k + p] += s;
                                    }
                            }
                        }
                        if (t.requires_grad(bv)) {
                            Tensor& gb = t.grad_buf(bv);
                            // dB = A^T @ dC
                            for (int bi = 0; bi < B; ++bi) {
                                const double* gc = g.data.data() + static_cast<size_t>(bi) * m * n;
                                const double* aa = ta2.data.data() + static_cast<size_t>(bi) * m * k;
                                double* gbb = gb.data.data() + static_cast<size_t>(bi) * k * n;
                                for (int i = 0; i < m; ++i)
                                    for (int p = 0; p < k; ++p) {
                                        double av2 = aa[i * k + p];
                                        if (av2 == 0.0) continue;
                                        for (int j = 0; j < n; ++j)
                                            gbb[p * n + j] += av2 * gc[i * n + j];
                                    }
                            }
                        }
                    });
    }

    // Batched matmul with transposed rhs: a (B, m, k) @ b^T with b (B, n, k) -> (B, m, n).
    Var bmm_nt(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        int B = ta.shape[0], m = ta.shape[1], k = ta.shape[2], n = tb.shape[1];
        assert(tb.shape[0] == B && tb.shape[2] == k);
        Tensor y({B, m, n});
        for (int bi = 0; bi < B; ++bi) {
            const double* aa = ta.data.data() + static_cast<size_t>(bi) * m * k;
            const double* bb = tb.data.data() + static_cast<size_t>(bi) * n * k;
            double* yy = y.data.data() + static_cast<size_t>(bi) * m * n;
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int p = 0; p < k; ++p) s += aa[i * k + p] * bb[j * k + p];
                    yy[i * n + j] = s;
                }
        }
        int aid = a.id, bid = b.id;
        return push(std::move(y), requires_grad(a) || requires_grad(b),
                    [aid, bid, B, m, k, n](Tape& t, const Tensor& g) {
                        Var av{aid}, bv{bid};
                        const Tensor& ta2 = t.val(av);
                        const Tensor& tb2 = t.val(bv);
                        if (t.requires_grad(av)) {
                            Tensor& ga = t.grad_buf(av);
                            for (int bi = 0; bi < B; ++bi)
                                matmul_accum(g.data.data() + static_cast<size_t>(bi) * m * n,
                                             tb2.data.data() + static_cast<size_t>(bi) * n * k,
                                             ga.data.data() + static_cast<size_t>(bi) * m * k, m, n, k);
                        }
                        if (t.requires_grad(bv)) {
                            Tensor& gb = t.grad_buf(bv);
                            // dB = dC^T @ A
                            for (int bi = 0; bi < B; ++bi) {
                                const double* gc = g.data.data() + static_cast<size_t>(bi) * m * n;
                                const double* aa = ta2.data.data() + static_cast<size_t>(bi) * m * k;
                                double* gbb = gb.data.data() + static_cast<size_t>(bi) * n * k;
                                for (int i = 0; i < m; ++i)
                                    for (int j = 0; j < n; ++j) {
                                        double gv = gc[i * n + j];
                                        if (gv == 0.0) continue;
                                        for (int p = 0; p < k; ++p)
                                            gbb[j * k + p] += gv * aa[i * k + p];
                                    }
                            }
                        }
                    });
    }

    // a (..., m, k) @ b (k, n) with 2-D rhs.
    Var matmul(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        int k = tb.shape[0], n = tb.shape[1];
        assert(ta.shape.back() == k);
        int64_t rows = ta.numel() / k;
        std::vector<int> os = ta.shape;
        os.back() = n;
        Tensor y(os);
        matmul_accum(ta.data.data(), tb.data.data(), y.data.data(), static_cast<int>(rows), k, n);
        int aid = a.id, bid = b.id;
        return push(std::move(y), requires_grad(a) || requires_grad(b),
                    [aid, bid, k, n](Tape& t, const Tensor& g) {
                        Var av{aid}, bv{bid};
                        const Tensor& ta2 = t.val(av);
                        const Tensor& tb2 = t.val(bv);
                        int rows = static_cast<int>(ta2.numel() / k);
                        if (t.requires_grad(av)) {
                            Tensor& ga = t.grad_buf(av);
                            // dA = g @ B^T
                            for (int r = 0; r < rows; ++r)
                                for (int p = 0; p < k; ++p) {
                                    double s = 0.0;
                                    for (int j = 0; j < n; ++j)
                                        s += g.data[static_cast<size_t>(r) * n + j] * tb2.data[static_cast<size_t>(p) * n + j];
                                    ga.data[static_cast<size_t>(r) * k + p] += s;
                                }
                        }
                        if (t.requires_grad(bv)) {
                            Tensor& gb = t.grad_buf(bv);
                            for (int r = 0; r < rows; ++r)
                                for (int p = 0; p < k; ++p) {
                                    double av2 = ta2.data[static_cast<size_t>(r) * k + p];
                                    if (av2 == 0.0) continue;
                                    for (int j = 0; j < n; ++j)
                                        gb.data[static_cast<size_t>(p) * n + j] += av2 * g.data[static_cast<size_t>(r) * n + j];
                                }
                        }
                    });
    }

    // ---- shape ops ----

    Var reshape(Var a, std::vector<int> s) {
        Tensor y = val(a).reshaped(std::move(s));
        return unary(std::move(y), a, [](const Tensor& g, Tensor& ga) {
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i];
        });
    }

    // Swap axes 0 and 1 of a rank-3 tensor.
    Var transpose01(Var a) {
        const Tensor& ta = val(a);
        assert(ta.rank() == 3);
        int A = ta.shape[0], B = ta.shape[1], C = ta.shape[2];
        Tensor y({B, A, C});
        for (int i = 0; i < A; ++i)
            for (int j = 0; j < B; ++j)
                for (int c = 0; c < C; ++c) y.at(j, i, c) = ta.at(i, j, c);
        return unary(std::move(y), a, [A, B, C](const Tensor& g, Tensor& ga) {
            for (int j = 0; j < B; ++j)
                for (int i = 0; i < A; ++i)
                    for (int c = 0; c < C; ++c)
                        ga.data[(static_cast<size_t>(i) * B + j) * C + c] += g.data[(static_cast<size_t>(j) * A + i) * C + c];
        });
    }

    // Swap axes of a rank-2 tensor.
    Var transpose2(Var a) {
        const Tensor& ta = val(a);
        assert(ta.rank() == 2);
        int A = ta.shape[0], B = ta.shape[1];
        return reshape(transpose01(reshape(a, {A, B, 1})), {B, A});
    }

    // Rows [start, start+len) along axis 0.
    Var slice_rows(Var a, int start, int len) {
        const Tensor& ta = val(a);
        int64_t rowsz = ta.numel() / ta.shape[0];
        std::vector<int> os = ta.shape;
        os[0] = len;
        Tensor y(os);
        std::copy(ta.data.begin() + start * rowsz, ta.data.begin() + (start + len) * rowsz, y.data.begin());
        return unary(std::move(y), a, [start, rowsz](const Tensor& g, Tensor& ga) {
            for (int64_t i = 0; i < g.numel(); ++i) ga.data[start * rowsz + i] += g.data[i];
        });
    }

    // Columns [start, start+len) along the last axis.
    Var slice_cols(Var a, int start, int len) {
        const Tensor& ta = val(a);
        int n = ta.shape.back();
        int64_t rows = ta.numel() / n;
        std::vector<int> os = ta.shape;
        os.back() = len;
        Tensor y(os);
        for (int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < len; ++j) y.data[r * len + j] = ta.data[r * n + start + j];
        return unary(std::move(y), a, [start, len, n](const Tensor& g, Tensor& ga) {
            int64_t rows = g.numel() / len;
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < len; ++j) ga.data[r * n + start + j] += g.data[r * len + j];
        });
    }

    // Gather rows of a rank-1/2 tensor by constant indices (repeats allowed).
    Var pick_rows(Var a, std::vector<int> idx) {
        const Tensor& ta = val(a);
        int64_t rowsz = ta.numel() / ta.shape[0];
        std::vector<int> os = ta.shape;
        os[0] = static_cast<int>(idx.size());
        Tensor y(os);
        for (size_t r = 0; r < idx.size(); ++r)
            std::copy(ta.data.begin() + idx[r] * rowsz, ta.data.begin() + (idx[r] + 1) * rowsz,
                      y.data.begin() + static_cast<int64_t>(r) * rowsz);
        return unary(std::move(y), a, [idx, rowsz](const Tensor& g, Tensor& ga) {
            for (size_t r = 0; r < idx.size(); ++r)
                for (int64_t c = 0; c < rowsz; ++c)
                    ga.data[idx[r] * rowsz + c] += g.data[static_cast<int64_t>(r) * rowsz + c];
        });
    }

    // Concatenate along the last axis; all inputs share leading shape.
    Var concat_last(const std::vector<Var>& parts) {
        assert(!parts.empty());
        const Tensor& t0 = val(parts[0]);
        int64_t rows = t0.numel() / t0.shape.back();
        int total = 0;
        std::vector<int> widths;
        bool ng = false;
        for (Var p : parts) {
            widths.push_back(val(p).shape.back());
            total += widths.back();
            ng = ng || requires_grad(p);
        }
        std::vector<int> os = t0.shape;
        os.back() = total;
        Tensor y(os);
        int off = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor& tp = val(parts[pi]);
            int w = widths[pi];
            for (int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < w; ++j) y.data[r * total + off + j] = tp.data[r * w + j];
            off += w;
        }
        std::vector<int> ids;
        for (Var p : parts) ids.push_back(p.id);
        return push(std::move(y), ng, [ids, widths, total](Tape& t, const Tensor& g) {
            int64_t rows = g.numel() / total;
            int off = 0;
            for (size_t pi = 0; pi < ids.size(); ++pi) {
                Var pv{ids[pi]};
                int w = widths[pi];
                if (t.requires_grad(pv)) {
                    Tensor& gp = t.grad_buf(pv);
                    for (int64_t r = 0; r < rows; ++r)
                        for (int j = 0; j < w; ++j) gp.data[r * w + j] += g.data[r * total + off + j];
                }
                off += w;
            }
        });
    }

    // Concatenate along axis 0.
    Var concat_rows(const std::vector<Var>& parts) {
        assert(!parts.empty());
        const Tensor& t0 = val(parts[0]);
        int64_t rowsz = t0.numel() / t0.shape[0];
        int total = 0;
        bool ng = false;
        std::vector<int> lens;
        for (Var p : parts) {
            lens.push_back(val(p).shape[0]);
            total += lens.back();
            ng = ng || requires_grad(p);
        }
        std::vector<int> os = t0.shape;
        os[0] = total;
        Tensor y(os);
        int64_t off = 0;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            std::copy(tp.data.begin(), tp.data.end(), y.data.begin() + off);
            off += tp.numel();
        }
        std::vector<int> ids;
        for (Var p : parts) ids.push_back(p.id);
        return push(std::move(y), ng, [ids, lens, rowsz](Tape& t, const Tensor& g) {
            int64_t off = 0;
            for (size_t pi = 0; pi < ids.size(); ++pi) {
                Var pv{ids[pi]};
                int64_t cnt = static_cast<int64_t>(lens[pi]) * rowsz;
                if (t.requires_grad(pv)) {
                    Tensor& gp = t.grad_buf(pv);
                    for (int64_t i = 0; i < cnt; ++i) gp.data[i] += g.data[off + i];
                }
                off += cnt;
            }
        });
    }

    // x (..., n) + v (n), broadcast over leading axes.
    Var add_rowvec(Var x, Var v) {
        const Tensor &tx = val(x), &tv = val(v);
        int n = tv.shape.back();
        assert(tx.shape.back() == n);
        Tensor y = tx;
        int64_t rows = tx.numel() / n;
        for (int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < n; ++j) y.data[r * n + j] += tv.data[j];
        int xid = x.id, vid = v.id;
        return push(std::move(y), requires_grad(x) || requires_grad(v),
                    [xid, vid, n](Tape& t, const Tensor& g) {
                        Var xv{xid}, vv{vid};
                        int64_t rows = g.numel() / n;
                        if (t.requires_grad(xv)) t.grad_buf(xv) += g;
                        if (t.requires_grad(vv)) {
                            Tensor& gv = t.grad_buf(vv);
                            for (int64_t r = 0; r < rows; ++r)
                                for (int j = 0; j < n; ++j) gv.data[j] += g.data[r * n + j];
                        }
                    });
    }

    // x (A, B, C) + r (A, C), broadcast over the middle axis.
    Var add_mid1(Var x, Var r) {
        const Tensor &tx = val(x), &tr = val(r);
        int A = tx.shape[0], B = tx.shape[1], C = tx.shape[2];
        assert(tr.shape[0] == A && tr.shape.back() == C);
        Tensor y = tx;
        for (int i = 0; i < A; ++i)
            for (int j = 0; j < B; ++j)
                for (int c = 0; c < C; ++c) y.at(i, j, c) += tr.data[static_cast<size_t>(i) * C + c];
        int xid = x.id, rid = r.id;
        return push(std::move(y), requires_grad(x) || requires_grad(r),
                    [xid, rid, A, B, C](Tape& t, const Tensor& g) {
                        Var xv{xid}, rv{rid};
                        if (t.requires_grad(xv)) t.grad_buf(xv) += g;
                        if (t.requires_grad(rv)) {
                            Tensor& gr = t.grad_buf(rv);
                            for (int i = 0; i < A; ++i)
                                for (int j = 0; j < B; ++j)
                                    for (int c = 0; c < C; ++c)
                                        gr.data[static_cast<size_t>(i) * C + c] += g.data[(static_cast<size_t>(i) * B + j) * C + c];
                        }
                    });
    }

    // ---- temporal convolutions (unbatched; x is (C_in, T)) ----

    Var conv1d(Var x, Var W, Var b, int stride, int pad) {
        const Tensor &tx = val(x), &tW = val(W);
        int Cin = tx.shape[0], T = tx.shape[1];
        int Cout = tW.shape[0], K = tW.shape[2];
        assert(tW.shape[1] == Cin);
        int To = (T + 2 * pad - K) / stride + 1;
        Tensor y({Cout, To});
        for (int co = 0; co < Cout; ++co)
            for (int to = 0; to < To; ++to) {
                double s = 0.0;
                for (int ci = 0; ci < Cin; ++ci)
                    for (int j = 0; j < K; ++j) {
                        int ti = to * stride + j - pad;
                        if (ti < 0 || ti >= T) continue;
                        s += tW.at(co, ci, j) * tx.at(ci, ti);
                    }
                y.at(co, to) = s;
            }
        if (b.valid()) {
            const Tensor& tb = val(b);
            for (int co = 0; co < Cout; ++co)
                for (int to = 0; to < To; ++to) y.at(co, to) += tb.data[co];
        }
        int xid = x.id, wid = W.id, bid = b.valid() ? b.id : -1;
        bool ng = requires_grad(x) || requires_grad(W) || (b.valid() && requires_grad(b));
        return push(std::move(y), ng,
                    [xid, wid, bid, stride, pad, Cin, T, Cout, K, To](Tape& t, const Tensor& g) {
                        Var xv{xid}, wv{wid};
                        const Tensor& tx2 = t.val(xv);
                        const Tensor& tW2 = t.val(wv);
                        if (t.requires_grad(xv)) {
                            Tensor& gx = t.grad_buf(xv);
                            for (int co = 0; co < Cout; ++co)
                                for (int to = 0; to < To; ++to) {
                                    double gv = g.data[static_cast<size_t>(co) * To + to];
                                    if (gv == 0.0) continue;
                                    for (int ci = 0; ci < Cin; ++ci)
                                        for (int j = 0; j < K; ++j) {
                                            int ti = to * stride + j - pad;
                                            if (ti < 0 || ti >= T) continue;
                                            gx.data[static_cast<size_t>(ci) * T + ti] += gv * tW2.at(co, ci, j);
                                        }
                                }
                        }
                        if (t.requires_grad(wv)) {
                            Tensor& gW = t.grad_buf(wv);
                            for (int co = 0; co < Cout; ++co)
                                for (int to = 0; to < To; ++to) {
                                    double gv = g.data[static_cast<size_t>(co) * To + to];
                                    if (gv == 0.0) continue;
                                    for (int ci = 0; ci < Cin; ++ci)
                                        for (int j = 0; j < K; ++j) {
                                            int ti = to * stride + j - pad;
                                            if (ti < 0 || ti >= T) continue;
                                            gW.data[(static_cast<size_t>(co) * Cin + ci) * K + j] += gv * tx2.at(ci, ti);
                                        }
                                }
                        }
                        if (bid >= 0) {
                            Var bv{bid};
                            if (t.requires_grad(bv)) {
                                Tensor& gb = t.grad_buf(bv);
                                for (int co = 0; co < Cout; ++co)
                                    for (int to = 0; to < To; ++to)
                                        gb.data[co] += g.data[static_cast<size_t>(co) * To + to];
                            }
                        }
                    });
    }

    // Transposed conv; x (C_in, T), W (C_in, C_out, K) -> (C_out, (T-1)*stride + K - 2*pad).
    Var conv1d_transpose(Var x, Var W, Var b, int stride, int pad) {
        const Tensor &tx = val(x), &tW = val(W);
        int Cin = tx.shape[0], T = tx.shape[1];
        int Cout = tW.shape[1], K = tW.shape[2];
        assert(tW.shape[0] == Cin);
        int To = (T - 1) * stride + K - 2 * pad;
        Tensor y({Cout, To});
        for (int ci = 0; ci < Cin; ++ci)
            for (int ti = 0; ti < T; ++ti) {
                double xv2 = tx.at(ci, ti);
                if (xv2 == 0.0) continue;
                for (int co = 0; co < Cout; ++co)
                    for (int j = 0; j < K; ++j) {
                        int to = ti * stride + j - pad;
                        if (to < 0 || to >= To) continue;
                        y.at(co, to) += xv2 * tW.at(ci, co, j);
                    }
            }
        if (b.valid()) {
            const Tensor& tb = val(b);
            for (int co = 0; co < Cout; ++co)
                for (int to = 0; to < To; ++to) y.at(co, to) += tb.data[co];
        }
        int xid = x.id, wid = W.id, bid = b.valid() ? b.id : -1;
        bool ng = requires_grad(x) || requires_grad(W) || (b.valid() && requires_grad(b));
        return push(std::move(y), ng,
                    [xid, wid, bid, stride, pad, Cin, T, Cout, K, To](Tape& t, const Tensor& g) {
                        Var xv{xid}, wv{wid};
                        const Tensor& tx2 = t.val(xv);
                        const Tensor& tW2 = t.val(wv);
                        if (t.requires_grad(xv)) {
                            Tensor& gx = t.grad_buf(xv);
                            for (int ci = 0; ci < Cin; ++ci)
                                for (int ti = 0; ti < T; ++ti) {
                                    double s = 0.0;
                                    for (int co = 0; co < Cout; ++co)
                                        for (int j = 0; j < K; ++j) {
                                            int to = ti * stride + j - pad;
                                            if (to < 0 || to >= To) continue;
                                            s += g.data[static_cast<size_t>(co) * To + to] * tW2.at(ci, co, j);
                                        }
                                    gx.data[static_cast<size_t>(ci) * T + ti] += s;
                                }
                        }
                        if (t.requires_grad(wv)) {
                            Tensor& gW = t.grad_buf(wv);
                            for (int ci = 0; ci < Cin; ++ci)
                                for (int ti = 0; ti < T; ++ti) {
                                    double xv3 = tx2.at(ci, ti);
                                    if (xv3 == 0.0) continue;
                                    for (int co = 0; co < Cout; ++co)
                                        for (int j = 0; j < K; ++j) {
                                            int to = ti * stride + j - pad;
                                            if (to < 0 || to >= To) continue;
                                            gW.data[(static_cast<size_t>(ci) * Cout + co) * K + j] +=
                                                xv3 * g.data[static_cast<size_t>(co) * To + to];
                                        }
                                }
                        }
                        if (bid >= 0) {
                            Var bv{bid};
                            if (t.requires_grad(bv)) {
                                Tensor& gb = t.grad_buf(bv);
                                for (int co = 0; co < Cout; ++co)
                                    for (int to = 0; to < To; ++to)
                                        gb.data[co] += g.data[static_cast<size_t>(co) * To + to];
                            }
                        }
                    });
    }

    // Soft closest-point distances from points (M, D) to a fixed polyline
    // (L, D): softmin over per-segment distances with the given sharpness.
    // Fused op; the finite-difference harness is the oracle for its backward.
    Var polyline_soft_dist(Var points, const Tensor& poly, double sharpness) {
        const Tensor& tp = val(points);
        int M = tp.shape[0], D = tp.shape.back();
        int L = poly.shape[0];
        assert(poly.shape.back() == D && L >= 2 && sharpness > 0.0);
        int S = L - 1;
        Tensor y({M});
        for (int i = 0; i < M; ++i) y.data[i] = soft_dist_point(tp.data.data() + static_cast<size_t>(i) * D, poly, sharpness, D, nullptr);
        int pid = points.id;
        Tensor polyc = poly;
        return push(std::move(y), requires_grad(points),
                    [pid, polyc, sharpness, D, S](Tape& t, const Tensor& g) {
                        Var pv{pid};
                        if (!t.requires_grad(pv)) return;
                        Tensor& gp = t.grad_buf(pv);
                        const Tensor& tp2 = t.val(pv);
                        int M = tp2.shape[0];
                        std::vector<double> gbuf(static_cast<size_t>(D));
                        for (int i = 0; i < M; ++i) {
                            if (g.data[i] == 0.0) continue;
                            std::fill(gbuf.begin(), gbuf.end(), 0.0);
                            soft_dist_point(tp2.data.data() + static_cast<size_t>(i) * D, polyc, sharpness, D, gbuf.data());
                            for (int c = 0; c < D; ++c) gp.data[static_cast<size_t>(i) * D + c] += g.data[i] * gbuf[c];
                        }
                        (void)S;
                    });
    }

    // ---- internals ----

    Tensor& grad_buf(Var v) {
        Node& n = nodes_[static_cast<size_t>(v.id)];
        if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.value.shape);
        return n.grad;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::function<void(Tape&, const Tensor&)> back;
    };

    std::vector<Node> nodes_;

    Var push(Tensor v, bool needs_grad, std::function<void(Tape&, const Tensor&)> back) {
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        if (needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var unary(Tensor y, Var a, std::function<void(const Tensor&, Tensor&)> df) {
        int aid = a.id;
        return push(std::move(y), requires_grad(a),
                    [aid, df](Tape& t, const Tensor& g) {
                        Var av{aid};
                        if (t.requires_grad(av)) df(g, t.grad_buf(av));
                    });
    }

    // Unary op whose backward needs the output value.
    Var unary_with_y(Tensor y, Var a, int* /*hold*/,
                     std::function<void(const Tensor&, const Tensor&, Tensor&)> df) {
        int aid = a.id;
        Var out = push(std::move(y), requires_grad(a), nullptr);
        if (requires_grad(a)) {
            int oid = out.id;
            nodes_[static_cast<size_t>(out.id)].back = [aid, oid, df](Tape& t, const Tensor& g) {
                Var av{aid}, ov{oid};
                if (t.requires_grad(av)) df(g, t.val(ov), t.grad_buf(av));
            };
        }
        return out;
    }

    Var binary(Tensor y, Var a, Var b, std::function<void(const Tensor&, Tensor&)> dfa,
               std::function<void(const Tensor&, Tensor&)> dfb) {
        int aid = a.id, bid = b.id;
        return push(std::move(y), requires_grad(a) || requires_grad(b),
                    [aid, bid, dfa, dfb](Tape& t, const Tensor& g) {
                        Var av{aid}, bv{bid};
                        if (t.requires_grad(av)) dfa(g, t.grad_buf(av));
                        if (t.requires_grad(bv)) dfb(g, t.grad_buf(bv));
                    });
    }

    static double sigmoid_val(double x) {
        if (x >= 0.0) {
            double e = std::exp(-x);
            return 1.0 / (1.0 + e);
        }
        double e = std::exp(x);
        return e / (1.0 + e);
    }

    static double softplus_val(double x) {
        if (x > 30.0) return x;
        if (x < -30.0) return std::exp(x);
        return std::log1p(std::exp(x));
    }

    // Soft-min distance from p to the polyline; if gout != null, also writes
    // d(soft)/dp. Segment distances get a tiny smoothing epsilon so the
    // gradient stays defined on the polyline itself.
    static double soft_dist_point(const double* p, const Tensor& poly, double sharpness, int D,
                                  double* gout) {
        int L = poly.shape[0];
        int S = L - 1;
        constexpr double kEps = 1e-12;
        std::vector<double> d(static_cast<size_t>(S));
        std::vector<double> dd;  // d(dist_j)/dp, laid out S x D
        if (gout) dd.assign(static_cast<size_t>(S) * D, 0.0);
        for (int j = 0; j < S; ++j) {
            const double* a = poly.data.data() + static_cast<size_t>(j) * D;
            const double* b = poly.data.data() + static_cast<size_t>(j + 1) * D;
            double uu = 0.0, up = 0.0;
            for (int c = 0; c < D; ++c) {
                double u = b[c] - a[c];
                uu += u * u;
                up += u * (p[c] - a[c]);
            }
            double tpar = uu > 0.0 ? up / uu : 0.0;
            tpar = std::min(1.0, std::max(0.0, tpar));
            double dist2 = 0.0;
            for (int c = 0; c < D; ++c) {
                double r = p[c] - (a[c] + tpar * (b[c] - a[c]));
                dist2 += r * r;
            }
            double dist = std::sqrt(dist2 + kEps * kEps) - kEps;
            d[j] = dist;
            if (gout) {
                double denom = std::sqrt(dist2 + kEps * kEps);
                for (int c = 0; c < D; ++c) {
                    double r = p[c] - (a[c] + tpar * (b[c] - a[c]));
                    dd[static_cast<size_t>(j) * D + c] = r / denom;
                }
            }
        }
        double mn = d[0];
        for (int j = 1; j < S; ++j) mn = std::min(mn, d[j]);
        double Z = 0.0;
        for (int j = 0; j < S; ++j) Z += std::exp(-sharpness * (d[j] - mn));
        double soft = mn - std::log(Z) / sharpness;
        if (gout) {
            for (int j = 0; j < S; ++j) {
                double w = std::exp(-sharpness * (d[j] - mn)) / Z;
                for (int c = 0; c < D; ++c) gout[c] += w * dd[static_cast<size_t>(j) * D + c];
            }
        }
        return soft;
    }
};

}  // namespace storyflow
