#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "fedgnp/matrix.hpp"

namespace fedgnp {

/// Thin SVD of an m x n matrix: u is m x r, v is n x r, r = min(m, n),
/// sigma sorted descending and nonnegative, M = U diag(sigma) V^T.
struct SvdResult {
    Matrix u;
    std::vector<double> sigma;
    Matrix v;
};

namespace detail {

inline double sign_or_one(double x) { return x >= 0.0 ? 1.0 : -1.0; }

// One-sided Jacobi on a tall matrix (rows >= cols): rotates column pairs of A until
// mutually orthogonal, accumulating the rotations into V. Column norms become the
// singular values; normalized columns of A become U.
inline void jacobi_sweeps(Matrix& a, Matrix& v) {
    const std::size_t n = a.cols;
    const double tol = 1e-15;
    const std::size_t max_sweeps = 100;

    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                double alpha = 0.0, beta = 0.0, g = 0.0;
                for (std::size_t k = 0; k < a.rows; ++k) {
                    const double ai = a(k, i);
                    const double aj = a(k, j);
                    alpha += ai * ai;
                    beta += aj * aj;
                    g += ai * aj;
                }
                if (std::abs(g) <= tol * std::sqrt(alpha * beta) || alpha == 0.0 || beta == 0.0) {
                    continue;
                }
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * g);
                const double t = sign_or_one(zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < a.rows; ++k) {
                    const double ai = a(k, i);
                    const double aj = a(k, j);
                    a(k, i) = c * ai - s * aj;
                    a(k, j) = s * ai + c * aj;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vi = v(k, i);
                    const double vj = v(k, j);
                    v(k, i) = c * vi - s * vj;
                    v(k, j) = s * vi + c * vj;
                }
            }
        }
        if (!rotated) {
            break;
        }
    }
}

// Fills columns of u whose singular value vanished with vectors orthonormal to the
// rest, so U^T U stays the identity even for rank-deficient inputs. Candidates are
// standard basis vectors; the one with the largest residual is taken each time.
inline void complete_orthonormal_columns(Matrix& u, const std::vector<bool>& needs_fill) {
    const std::size_t m = u.rows;
    const std::size_t n = u.cols;
    for (std::size_t col = 0; col < n; ++col) {
        if (!needs_fill[col]) {
            continue;
        }
        std::vector<double> best;
        double best_norm = -1.0;
        for (std::size_t cand = 0; cand < m; ++cand) {
            std::vector<double> w(m, 0.0);
            w[cand] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t other = 0; other < n; ++other) {
                    if (other == col || (other > col && needs_fill[other])) {
                        continue;
                    }
                    double dot = 0.0;
                    for (std::size_t k = 0; k < m; ++k) {
                        dot += w[k] * u(k, other);
                    }
                    for (std::size_t k = 0; k < m; ++k) {
                        w[k] -= dot * u(k, other);
                    }
                }
            }
            double norm = 0.0;
            for (double x : w) {
                norm += x * x;
            }
            norm = std::sqrt(norm);
            if (norm > best_norm) {
                best_norm = norm;
                best = std::move(w);
            }
        }
        if (best_norm <= 0.0) {
            throw std::runtime_error("svd: failed to complete orthonormal basis");
        }
        for (std::size_t k = 0; k < m; ++k) {
            u(k, col) = best[k] / best_norm;
        }
    }
}

} // namespace detail

/// Deterministic one-sided Jacobi SVD. Wide matrices are handled by decomposing the
/// transpose and swapping the factors.
inline SvdResult svd(const Matrix& m) {
    if (m.rows < 1 || m.cols < 1) {
        throw std::invalid_argument("svd: matrix must have at least one row and one column");
    }
    if (!m.is_finite()) {
        throw std::invalid_argument("svd: input contains non-finite entries");
    }
    if (m.rows < m.cols) {
        SvdResult t = svd(transpose(m));
        return SvdResult{std::move(t.v), std::move(t.sigma), std::move(t.u)};
    }

    Matrix a = m;
    Matrix v = Matrix::identity(m.cols);
    detail::jacobi_sweeps(a, v);

    const std::size_t n = m.cols;
    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double sum = 0.0;
        for (std::size_t k = 0; k < m.rows; ++k) {
            sum += a(k, j) * a(k, j);
        }
        norms[j] = std::sqrt(sum);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return norms[i] > norms[j]; });

    SvdResult result;
    result.sigma.resize(n);
    result.u = Matrix(m.rows, n);
    result.v = Matrix(n, n);

    const double sigma_max = norms[order[0]];
    const double drop_tol = sigma_max * n * std::numeric_limits<double>::epsilon();
    std::vector<bool> needs_fill(n, false);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        double s = norms[src];
        if (s <= drop_tol) {
            s = 0.0;
        }
        result.sigma[j] = s;
        for (std::size_t k = 0; k < n; ++k) {
            result.v(k, j) = v(k, src);
        }
        if (s > 0.0) {
            for (std::size_t k = 0; k < m.rows; ++k) {
                result.u(k, j) = a(k, src) / norms[src];
            }
        } else {
            needs_fill[j] = true;
        }
    }
    detail::complete_orthonormal_columns(result.u, needs_fill);
    return result;
}

} // namespace fedgnp
