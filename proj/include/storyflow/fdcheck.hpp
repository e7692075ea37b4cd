#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "storyflow/autodiff.hpp"

namespace storyflow {

struct FdReport {
    double max_rel_err = 0.0;
    int64_t worst_coord = -1;
    double analytic_at_worst = 0.0;
    double fd_at_worst = 0.0;

    bool within(double tol) const { return max_rel_err < tol; }
};

// Builds a scalar graph from a leaf and returns the output Var.
using ScalarFn = std::function<Var(Tape&, Var)>;

// Central-difference check of reverse-mode gradients at x. Per-coordinate
// relative error is |analytic - fd| / (|analytic| + 1e-12); the report keeps
// the max. `coords` restricts the sweep (empty = all coordinates).
inline FdReport fd_check(const ScalarFn& f, const Tensor& x, double step,
                         const std::vector<int64_t>& coords = {}) {
    if (!(step > 0.0)) throw std::invalid_argument("fd_check: step must be > 0");

    Tape tape;
    Var xv = tape.leaf(x, true);
    Var out = f(tape, xv);
    if (tape.val(out).numel() != 1) throw std::invalid_argument("fd_check: f must be scalar");
    if (!std::isfinite(tape.val(out).data[0]))
        throw std::runtime_error("fd_check: non-finite value at x");
    tape.backward(out);
    Tensor analytic = tape.grad(xv);

    auto eval = [&](const Tensor& xt) {
        Tape t;
        Var v = t.leaf(xt, false);
        Var y = f(t, v);
        double val = t.val(y).data[0];
        if (!std::isfinite(val)) throw std::runtime_error("fd_check: non-finite probe value");
        return val;
    };

    std::vector<int64_t> sweep = coords;
    if (sweep.empty()) {
        sweep.resize(static_cast<size_t>(x.numel()));
        for (int64_t i = 0; i < x.numel(); ++i) sweep[static_cast<size_t>(i)] = i;
    }

    FdReport rep;
    Tensor xt = x;
    for (int64_t c : sweep) {
        double orig = xt.data[c];
        xt.data[c] = orig + step;
        double fp = eval(xt);
        xt.data[c] = orig - step;
        double fm = eval(xt);
        xt.data[c] = orig;
        double fd = (fp - fm) / (2.0 * step);
        double an = analytic.data[c];
        double rel = std::abs(an - fd) / (std::abs(an) + 1e-12);
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_coord = c;
            rep.analytic_at_worst = an;
            rep.fd_at_worst = fd;
        }
    }
    return rep;
}

}  // namespace storyflow
