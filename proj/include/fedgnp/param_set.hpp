#pragma once

#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

#include "fedgnp/log.hpp"
#include "fedgnp/matrix.hpp"
#include "fedgnp/rng.hpp"

namespace fedgnp {

/// Named collection of weight tensors plus the set of trainable names. Arithmetic
/// treats the whole collection as one flattened parameter vector under the
/// Frobenius inner product. The map keeps names sorted, so iteration order (and
/// with it every RNG fill and serialization) is deterministic.
struct ParamSet {
    std::map<std::string, Matrix> tensors;
    std::set<std::string> trainable;

    bool shape_compatible(const ParamSet& other) const {
        if (tensors.size() != other.tensors.size()) {
            return false;
        }
        auto it = tensors.begin();
        auto jt = other.tensors.begin();
        for (; it != tensors.end(); ++it, ++jt) {
            if (it->first != jt->first || !it->second.same_shape(jt->second)) {
                return false;
            }
        }
        return true;
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [name, t] : tensors) {
            n += t.size();
        }
        return n;
    }

    double frobenius_norm() const {
        double sum = 0.0;
        for (const auto& [name, t] : tensors) {
            for (double v : t.data) {
                sum += v * v;
            }
        }
        return std::sqrt(sum);
    }

    ParamSet zeros_like() const {
        ParamSet out;
        out.trainable = trainable;
        for (const auto& [name, t] : tensors) {
            out.tensors.emplace(name, Matrix(t.rows, t.cols));
        }
        return out;
    }

    /// Subset containing only the trainable tensors.
    ParamSet trainable_subset() const {
        ParamSet out;
        out.trainable = trainable;
        for (const auto& name : trainable) {
            auto it = tensors.find(name);
            if (it == tensors.end()) {
                throw std::invalid_argument("ParamSet::trainable_subset: missing tensor " + name);
            }
            out.tensors.emplace(name, it->second);
        }
        return out;
    }

    /// Overwrites tensors named in `src` with the values from `src`.
    void assign_tensors(const ParamSet& src) {
        for (const auto& [name, t] : src.tensors) {
            auto it = tensors.find(name);
            if (it == tensors.end()) {
                throw std::invalid_argument("ParamSet::assign_tensors: unknown tensor " + name);
            }
            require_same_shape(it->second, t, "ParamSet::assign_tensors");
            it->second = t;
        }
    }

    bool operator==(const ParamSet& other) const = default;
};

inline void require_compatible(const ParamSet& a, const ParamSet& b, const char* op) {
    if (!a.shape_compatible(b)) {
        throw std::invalid_argument(std::string(op) + ": ParamSets are not shape-compatible");
    }
}

/// Frobenius inner product over the flattened parameter vectors.
inline double frob_inner(const ParamSet& a, const ParamSet& b) {
    require_compatible(a, b, "frob_inner");
    double sum = 0.0;
    auto it = a.tensors.begin();
    auto jt = b.tensors.begin();
    for (; it != a.tensors.end(); ++it, ++jt) {
        const auto& x = it->second.data;
        const auto& y = jt->second.data;
        for (std::size_t k = 0; k < x.size(); ++k) {
            sum += x[k] * y[k];
        }
    }
    return sum;
}

inline ParamSet scaled(const ParamSet& a, double c) {
    ParamSet out = a;
    for (auto& [name, t] : out.tensors) {
        for (double& v : t.data) {
            v *= c;
        }
    }
    return out;
}

/// a + coeff * b, elementwise. coeff == 0 returns a unchanged.
inline ParamSet axpy(const ParamSet& a, double coeff, const ParamSet& b) {
    require_compatible(a, b, "axpy");
    if (coeff == 0.0) {
        return a;
    }
    ParamSet out = a;
    auto it = out.tensors.begin();
    auto jt = b.tensors.begin();
    for (; it != out.tensors.end(); ++it, ++jt) {
        auto& x = it->second.data;
        const auto& y = jt->second.data;
        for (std::size_t k = 0; k < x.size(); ++k) {
            x[k] += coeff * y[k];
        }
    }
    return out;
}

/// Vector projection of `target` onto `base` over the flattened parameters:
/// (<base,target> / <base,base>) * base. A zero base yields the zero set.
inline ParamSet project(const ParamSet& base, const ParamSet& target) {
    require_compatible(base, target, "project");
    const double denom = frob_inner(base, base);
    if (denom == 0.0) {
        log::warn("project: base has zero Frobenius norm; returning zero ParamSet");
        return base.zeros_like();
    }
    const double coeff = frob_inner(base, target) / denom;
    return scaled(base, coeff);
}

/// Matrix counterpart used where a single tensor is projected (per-tensor scope,
/// classifier-layer indicators).
inline Matrix project(const Matrix& base, const Matrix& target) {
    require_same_shape(base, target, "project");
    const double denom = frob_inner(base, base);
    if (denom == 0.0) {
        log::warn("project: base matrix has zero Frobenius norm; returning zero matrix");
        return Matrix(base.rows, base.cols);
    }
    return scaled(base, frob_inner(base, target) / denom);
}

/// Standard-normal entries for every tensor, filled in name order from `rng`.
inline ParamSet gaussian_like(const ParamSet& shape_of, SeededRng& rng) {
    ParamSet out = shape_of.zeros_like();
    for (auto& [name, t] : out.tensors) {
        for (double& v : t.data) {
            v = rng.normal();
        }
    }
    return out;
}

/// Rescales `noise` so its Frobenius norm equals `target_norm`, preserving direction.
inline ParamSet scale_to_norm(const ParamSet& noise, double target_norm) {
    if (target_norm < 0.0) {
        throw std::invalid_argument("scale_to_norm: target norm must be nonnegative");
    }
    if (target_norm == 0.0) {
        return noise.zeros_like();
    }
    const double norm = noise.frobenius_norm();
    if (norm == 0.0) {
        throw std::invalid_argument("scale_to_norm: cannot scale a zero ParamSet to a positive norm");
    }
    return scaled(noise, target_norm / norm);
}

} // namespace fedgnp
