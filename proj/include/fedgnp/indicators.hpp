#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>

#include "fedgnp/log.hpp"
#include "fedgnp/matrix.hpp"
#include "fedgnp/param_set.hpp"
#include "fedgnp/svd.hpp"

namespace fedgnp {

/// Robustness indicators measured on the classifier weight layer at one round,
/// plus the value-model weight derived from them.
struct IndicatorSnapshot {
    std::size_t round = 0;
    double sve = 0.0;
    double lsvr = 0.0;
    double gda = 0.0;
    double gamma = 0.0;
    bool clamped = false;
};

/// Singular value entropy: Shannon entropy (natural log) of the normalized
/// spectrum p_i = sigma_i / sum(sigma). Zero singular values contribute nothing.
inline double sve(std::span<const double> sigma) {
    double total = 0.0;
    for (double s : sigma) {
        if (s < 0.0 || !std::isfinite(s)) {
            throw std::invalid_argument("sve: singular values must be finite and nonnegative");
        }
        total += s;
    }
    if (total == 0.0) {
        throw std::domain_error("sve: all singular values are zero");
    }
    double entropy = 0.0;
    for (double s : sigma) {
        if (s > 0.0) {
            const double p = s / total;
            entropy -= p * std::log(p);
        }
    }
    return entropy;
}

/// Largest singular value ratio: sigma_max / sum(sigma).
inline double lsvr(std::span<const double> sigma) {
    double total = 0.0;
    double largest = 0.0;
    for (double s : sigma) {
        if (s < 0.0 || !std::isfinite(s)) {
            throw std::invalid_argument("lsvr: singular values must be finite and nonnegative");
        }
        total += s;
        largest = std::max(largest, s);
    }
    if (total == 0.0) {
        throw std::domain_error("lsvr: all singular values are zero");
    }
    return largest / total;
}

/// Deviation of the current classifier layer from a reference: the Frobenius norm
/// of the residual after projecting `theta_curr` onto `theta_prev`, normalized by
/// the norm of `theta_curr`. Lies in [0, 1].
inline double gda(const Matrix& theta_prev, const Matrix& theta_curr) {
    require_same_shape(theta_prev, theta_curr, "gda");
    const double curr_norm = theta_curr.frobenius_norm();
    if (curr_norm == 0.0) {
        throw std::invalid_argument("gda: current classifier layer has zero norm");
    }
    if (theta_prev.frobenius_norm() == 0.0) {
        log::warn("gda: reference layer has zero norm; the whole layer counts as residual");
        return 1.0;
    }
    const Matrix residual = sub(theta_curr, project(theta_prev, theta_curr));
    const double ratio = residual.frobenius_norm() / curr_norm;
    return std::min(std::max(ratio, 0.0), 1.0);
}

/// Value-model weight: tau * GDA * LSVR / SVE, clamped to [0, gamma_max].
/// Clamping is logged and reported through `clamped` so the raw value stays observable.
inline double gamma_weight(double tau, double gda_value, double lsvr_value, double sve_value, double gamma_max = 1.0,
                           bool* clamped = nullptr) {
    if (tau < 0.0 || gda_value < 0.0 || lsvr_value < 0.0) {
        throw std::invalid_argument("gamma_weight: tau, gda and lsvr must be nonnegative");
    }
    if (sve_value == 0.0) {
        throw std::domain_error("gamma_weight: sve is zero (degenerate rank-1 spectrum)");
    }
    if (sve_value < 0.0) {
        throw std::invalid_argument("gamma_weight: sve must be positive");
    }
    const double raw = tau * gda_value * lsvr_value / sve_value;
    if (clamped != nullptr) {
        *clamped = false;
    }
    if (raw > gamma_max) {
        log::warn("gamma_weight: raw value " + std::to_string(raw) + " clamped to " + std::to_string(gamma_max));
        if (clamped != nullptr) {
            *clamped = true;
        }
        return gamma_max;
    }
    return raw;
}

/// Full indicator measurement for one round: SVD of the current classifier layer,
/// SVE/LSVR from its spectrum, GDA against the previous reference layer, and the
/// resulting gamma.
inline IndicatorSnapshot snapshot(const Matrix& classifier_prev, const Matrix& classifier_curr, double tau,
                                  std::size_t round, double gamma_max = 1.0) {
    require_same_shape(classifier_prev, classifier_curr, "snapshot");
    const SvdResult dec = svd(classifier_curr);
    IndicatorSnapshot snap;
    snap.round = round;
    snap.sve = sve(dec.sigma);
    snap.lsvr = lsvr(dec.sigma);
    snap.gda = gda(classifier_prev, classifier_curr);
    snap.gamma = gamma_weight(tau, snap.gda, snap.lsvr, snap.sve, gamma_max, &snap.clamped);
    return snap;
}

} // namespace fedgnp
