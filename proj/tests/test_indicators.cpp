#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "fedgnp/indicators.hpp"
#include "fedgnp/rng.hpp"

using namespace fedgnp;

namespace {

// Independent high-precision entropy oracle for the normalized spectrum.
long double entropy_oracle(const std::vector<double>& sigma) {
    long double total = 0.0L;
    for (double s : sigma) {
        total += static_cast<long double>(s);
    }
    long double h = 0.0L;
    for (double s : sigma) {
        if (s > 0.0) {
            const long double p = static_cast<long double>(s) / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

Matrix pair_matrix(double x, double y) {
    Matrix m(1, 2);
    m.data = {x, y};
    return m;
}

std::vector<double> random_sigma(SeededRng& rng, std::size_t n) {
    std::vector<double> sigma(n);
    for (double& s : sigma) {
        s = std::abs(rng.normal()) + 1e-6;
    }
    return sigma;
}

} // namespace

TEST(Sve, KnownValues) {
    EXPECT_NEAR(sve(std::vector<double>{1, 1, 1, 1}), std::log(4.0), 1e-12);
    EXPECT_NEAR(sve(std::vector<double>{3, 1}), 0.5623351446188083, 1e-12);
    EXPECT_NEAR(sve(std::vector<double>{3, 1}), static_cast<double>(entropy_oracle({3, 1})), 1e-15);
    EXPECT_DOUBLE_EQ(sve(std::vector<double>{5, 0, 0}), 0.0);
}

TEST(Sve, MatchesOracleOnRandomSpectra) {
    SeededRng rng(101);
    for (int trial = 0; trial < 50; ++trial) {
        const auto sigma = random_sigma(rng, 1 + rng.uniform_index(16));
        EXPECT_NEAR(sve(sigma), static_cast<double>(entropy_oracle(sigma)), 1e-12);
    }
}

TEST(Sve, ScaleInvarianceAndBounds) {
    SeededRng rng(103);
    for (int trial = 0; trial < 50; ++trial) {
        const auto sigma = random_sigma(rng, 2 + rng.uniform_index(14));
        const double c = std::abs(rng.normal()) + 0.01;
        auto scaled_sigma = sigma;
        for (double& s : scaled_sigma) {
            s *= c;
        }
        EXPECT_NEAR(sve(sigma), sve(scaled_sigma), 1e-9);
        EXPECT_GE(sve(sigma), 0.0);
        EXPECT_LE(sve(sigma), std::log(static_cast<double>(sigma.size())) + 1e-12);
    }
    // Entropy is maximal exactly at the uniform spectrum.
    const std::vector<double> uniform{2, 2, 2};
    EXPECT_NEAR(sve(uniform), std::log(3.0), 1e-12);
    EXPECT_NEAR(lsvr(uniform), 1.0 / 3.0, 1e-12);
}

TEST(Sve, RejectsDegenerateInput) {
    EXPECT_THROW(sve(std::vector<double>{0, 0, 0}), std::domain_error);
    EXPECT_THROW(sve(std::vector<double>{1, -1}), std::invalid_argument);
}

TEST(Lsvr, KnownValuesAndBounds) {
    EXPECT_DOUBLE_EQ(lsvr(std::vector<double>{5, 0, 0}), 1.0);
    EXPECT_DOUBLE_EQ(lsvr(std::vector<double>{1, 1, 1, 1}), 0.25);
    EXPECT_DOUBLE_EQ(lsvr(std::vector<double>{3, 1}), 0.75);
    EXPECT_THROW(lsvr(std::vector<double>{0, 0}), std::domain_error);

    SeededRng rng(107);
    for (int trial = 0; trial < 200; ++trial) {
        const auto sigma = random_sigma(rng, 1 + rng.uniform_index(12));
        const double value = lsvr(sigma);
        EXPECT_GE(value, 1.0 / static_cast<double>(sigma.size()) - 1e-12);
        EXPECT_LE(value, 1.0);
        const double c = std::abs(rng.normal()) + 0.01;
        auto scaled_sigma = sigma;
        for (double& s : scaled_sigma) {
            s *= c;
        }
        EXPECT_NEAR(value, lsvr(scaled_sigma), 1e-9);
    }
}

TEST(Gda, ParallelOrthogonalAndHandCase) {
    const Matrix prev = pair_matrix(1.0, 2.0);
    EXPECT_NEAR(gda(prev, scaled(prev, 2.0)), 0.0, 1e-12);

    const Matrix e1 = pair_matrix(1.0, 0.0);
    const Matrix e2 = pair_matrix(0.0, 3.0);
    EXPECT_NEAR(gda(e1, e2), 1.0, 1e-12);

    EXPECT_NEAR(gda(pair_matrix(1.0, 0.0), pair_matrix(3.0, 4.0)), 0.8, 1e-12);
}

TEST(Gda, ScaleInvariantInBothArguments) {
    SeededRng rng(109);
    for (int trial = 0; trial < 30; ++trial) {
        Matrix prev(3, 4);
        Matrix curr(3, 4);
        for (double& v : prev.data) {
            v = rng.normal();
        }
        for (double& v : curr.data) {
            v = rng.normal();
        }
        const double base = gda(prev, curr);
        EXPECT_NEAR(gda(scaled(prev, 3.7), curr), base, 1e-9);
        EXPECT_NEAR(gda(prev, scaled(curr, 0.21)), base, 1e-9);
        EXPECT_GE(base, 0.0);
        EXPECT_LE(base, 1.0);
    }
}

TEST(Gda, DegenerateReferences) {
    std::string warning;
    log::set_warn_sink([&warning](const std::string& msg) { warning = msg; });
    EXPECT_DOUBLE_EQ(gda(Matrix(1, 2), pair_matrix(3.0, 4.0)), 1.0);
    log::set_warn_sink({});
    EXPECT_FALSE(warning.empty());
    EXPECT_THROW(gda(pair_matrix(1.0, 0.0), Matrix(1, 2)), std::invalid_argument);
}

TEST(GammaWeight, ArithmeticAndClamp) {
    EXPECT_DOUBLE_EQ(gamma_weight(20.0, 0.1, 0.5, 1.0), 1.0);
    EXPECT_DOUBLE_EQ(gamma_weight(20.0, 0.0, 0.5, 1.0), 0.0);

    bool clamped = false;
    const double g = gamma_weight(20.0, 0.8, 0.5, 1.386, 1.0, &clamped);
    EXPECT_DOUBLE_EQ(g, 1.0);
    EXPECT_TRUE(clamped);
    // Raw value survives with a larger ceiling.
    clamped = true;
    const double raw = gamma_weight(20.0, 0.8, 0.5, 1.386, 10.0, &clamped);
    EXPECT_NEAR(raw, 20.0 * 0.8 * 0.5 / 1.386, 1e-12);
    EXPECT_FALSE(clamped);

    EXPECT_THROW(gamma_weight(20.0, 0.1, 0.5, 0.0), std::domain_error);
    EXPECT_THROW(gamma_weight(-1.0, 0.1, 0.5, 1.0), std::invalid_argument);
}

TEST(GammaWeight, MonotonePreClamp) {
    SeededRng rng(113);
    const double huge_max = 1e18; // effectively unclamped
    for (int trial = 0; trial < 50; ++trial) {
        const double tau = std::abs(rng.normal()) * 10 + 0.1;
        const double g = rng.uniform01();
        const double l = rng.uniform01() + 0.01;
        const double s = rng.uniform01() + 0.01;
        const double base = gamma_weight(tau, g, l, s, huge_max);
        EXPECT_GE(gamma_weight(tau, g + 0.1, l, s, huge_max), base);
        EXPECT_GE(gamma_weight(tau, g, l + 0.1, s, huge_max), base);
        EXPECT_LE(gamma_weight(tau, g, l, s + 0.1, huge_max), base);
    }
}

TEST(Snapshot, IdentityPairAndComposition) {
    const Matrix eye = Matrix::identity(4);
    const IndicatorSnapshot snap = snapshot(eye, eye, 20.0, 7);
    EXPECT_EQ(snap.round, 7u);
    EXPECT_NEAR(snap.gda, 0.0, 1e-12);
    EXPECT_NEAR(snap.gamma, 0.0, 1e-12);
    EXPECT_NEAR(snap.sve, std::log(4.0), 1e-9);
    EXPECT_FALSE(snap.clamped);
}

TEST(Snapshot, RankOneSpectrumHitsTheSveGuard) {
    Matrix rank1(3, 3);
    rank1(0, 0) = 5.0;
    EXPECT_THROW(snapshot(Matrix::identity(3), rank1, 20.0, 1), std::domain_error);
}

TEST(Snapshot, FieldsMatchIndependentCalls) {
    SeededRng rng(127);
    Matrix prev(3, 8);
    Matrix curr(3, 8);
    for (double& v : prev.data) {
        v = rng.normal();
    }
    for (double& v : curr.data) {
        v = rng.normal();
    }
    const IndicatorSnapshot snap = snapshot(prev, curr, 20.0, 3, 1.0);
    const SvdResult dec = svd(curr);
    EXPECT_DOUBLE_EQ(snap.sve, sve(dec.sigma));
    EXPECT_DOUBLE_EQ(snap.lsvr, lsvr(dec.sigma));
    EXPECT_DOUBLE_EQ(snap.gda, gda(prev, curr));
    bool clamped = false;
    EXPECT_DOUBLE_EQ(snap.gamma, gamma_weight(20.0, snap.gda, snap.lsvr, snap.sve, 1.0, &clamped));
    EXPECT_EQ(snap.clamped, clamped);
}
