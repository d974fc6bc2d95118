#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedgnp {

/// Dense row-major matrix of doubles. Column vectors are n x 1.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    static Matrix column(std::span<const double> values) {
        Matrix m(values.size(), 1);
        for (std::size_t i = 0; i < values.size(); ++i) {
            m.data[i] = values[i];
        }
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::size_t size() const { return data.size(); }

    bool same_shape(const Matrix& other) const { return rows == other.rows && cols == other.cols; }

    bool is_finite() const {
        for (double v : data) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    double frobenius_norm() const {
        double sum = 0.0;
        for (double v : data) {
            sum += v * v;
        }
        return std::sqrt(sum);
    }

    bool operator==(const Matrix& other) const = default;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                                    std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                    std::to_string(b.cols) + ")");
    }
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            t(j, i) = m(i, j);
        }
    }
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw std::invalid_argument("matmul: inner dimensions differ");
    }
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) {
                continue;
            }
            for (std::size_t j = 0; j < b.cols; ++j) {
                out(i, j) += aik * b(k, j);
            }
        }
    }
    return out;
}

/// Frobenius inner product <a, b> = sum_ij a_ij * b_ij.
inline double frob_inner(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "frob_inner");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        sum += a.data[i] * b.data[i];
    }
    return sum;
}

inline Matrix scaled(const Matrix& m, double c) {
    Matrix out = m;
    for (double& v : out.data) {
        v *= c;
    }
    return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] += b.data[i];
    }
    return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "sub");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] -= b.data[i];
    }
    return out;
}

} // namespace fedgnp
