#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "storyflow/tensor.hpp"

namespace storyflow {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. A is (n, n);
// returns eigenvalues ascending and eigenvectors as columns of V.
inline void jacobi_eigh(const Tensor& A, Tensor& evals, Tensor& V, int max_sweeps = 64) {
    int n = A.shape[0];
    if (A.shape[1] != n) throw std::invalid_argument("jacobi_eigh: matrix must be square");
    Tensor M = A;
    V = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i) V.at(i, i) = 1.0;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += M.at(p, q) * M.at(p, q);
        if (off < 1e-26) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                double apq = M.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                double app = M.at(p, p), aqq = M.at(q, q);
                double theta = 0.5 * (aqq - app) / apq;
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (int k = 0; k < n; ++k) {
                    double mkp = M.at(k, p), mkq = M.at(k, q);
                    M.at(k, p) = c * mkp - s * mkq;
                    M.at(k, q) = s * mkp + c * mkq;
                }
                for (int k = 0; k < n; ++k) {
                    double mpk = M.at(p, k), mqk = M.at(q, k);
                    M.at(p, k) = c * mpk - s * mqk;
                    M.at(q, k) = s * mpk + c * mqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = V.at(k, p), vkq = V.at(k, q);
                    V.at(k, p) = c * vkp - s * vkq;
                    V.at(k, q) = s * vkp + c * vkq;
                }
            }
    }

    evals = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) evals.data[i] = M.at(i, i);

    // Sort ascending, permuting eigenvector columns alongside.
    for (int i = 0; i < n; ++i) {
        int best = i;
        for (int j = i + 1; j < n; ++j)
            if (evals.data[j] < evals.data[best]) best = j;
        if (best != i) {
            std::swap(evals.data[i], evals.data[best]);
            for (int k = 0; k < n; ++k) std::swap(V.at(k, i), V.at(k, best));
        }
    }
}

// Principal square root of a symmetric PSD matrix; small negative
// eigenvalues from roundoff are clamped to zero.
inline Tensor sym_sqrt(const Tensor& A) {
    int n = A.shape[0];
    Tensor evals, V;
    jacobi_eigh(A, evals, V);
    Tensor out = Tensor::zeros({n, n});
    for (int k = 0; k < n; ++k) {
        double lam = evals.data[k];
        double r = lam > 0.0 ? std::sqrt(lam) : 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) out.at(i, j) += r * V.at(i, k) * V.at(j, k);
    }
    return out;
}

}  // namespace storyflow
