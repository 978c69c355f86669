#include <gsl/gsl_sf_bessel.h>
#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "modm/model.hpp"

using namespace modm;

namespace {

std::filesystem::path tmp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "modm_test_model";
    std::filesystem::create_directories(dir);
    return dir / name;
}

Eigen::Vector3d random_unit(std::mt19937_64& rng) {
    std::normal_distribution<double> g;
    Eigen::Vector3d v(g(rng), g(rng), g(rng));
    return v.normalized();
}

Euler random_euler(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0, 1);
    return {2 * kPi * u(rng), std::acos(2 * u(rng) - 1), 2 * kPi * u(rng)};
}

}  // namespace

TEST(PolarGrid, EquispacedLayout) {
    const auto g = PolarGrid::equispaced(10, 24);
    EXPECT_EQ(g.m_r(), 10);
    EXPECT_DOUBLE_EQ(g.radii.front(), 0.05);
    EXPECT_DOUBLE_EQ(g.radii.back(), 0.5);
    EXPECT_DOUBLE_EQ(g.phi(6), kPi / 2);
    EXPECT_TRUE(validate(g).ok);
    EXPECT_FALSE(validate_for_solver(PolarGrid::equispaced(8, 24), 3).ok);  // 8 < (3+1)^2
    EXPECT_TRUE(validate_for_solver(PolarGrid::equispaced(16, 24), 3).ok);
}

TEST(RandomVolume, RealParityAndRank) {
    const auto grid = PolarGrid::equispaced(20, 16);
    const auto v = random_volume(3, grid, 7);
    EXPECT_TRUE(v.real_volume);
    EXPECT_LT(v.condition_number, 1e10);
    EXPECT_TRUE(validate(v).ok) << validate(v).summary();
    for (int l = 0; l <= 3; ++l) {
        const MatrixXcd r = v.real_basis(l);
        const double off = (l % 2 == 0) ? r.imag().norm() : r.real().norm();
        EXPECT_LT(off, 1e-12 * r.norm()) << "l=" << l;
    }
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        const auto x = random_unit(rng);
        for (int k = 0; k < grid.m_r(); ++k) {
            // Fourier transform of a real function: Phi(-k) = conj(Phi(k))
            EXPECT_NEAR(std::abs(v.evaluate(k, -x) - std::conj(v.evaluate(k, x))), 0.0, 1e-12);
        }
    }
}

TEST(RandomVolume, DeterministicAndDomainChecks) {
    const auto grid = PolarGrid::equispaced(20, 16);
    const auto a = random_volume(3, grid, 11), b = random_volume(3, grid, 11);
    EXPECT_EQ((a.stacked() - b.stacked()).norm(), 0.0);
    EXPECT_THROW(random_volume(4, grid, 1), DomainError);  // 20 < 25
}

TEST(VolumeCoefficients, TransformedMatchesPointwiseAction) {
    const auto grid = PolarGrid::equispaced(18, 8);
    const auto v = random_volume(3, grid, 5);
    std::mt19937_64 rng(9);
    for (int eps = 0; eps <= 1; ++eps)
        for (int t = 0; t < 10; ++t) {
            const Euler s = random_euler(rng);
            const auto w = v.transformed(s, eps);
            Eigen::Matrix3d g = rotation_matrix(s);
            if (eps) g = reflection_j() * g;
            const auto x = random_unit(rng);
            for (int k = 0; k < grid.m_r(); k += 5)
                EXPECT_NEAR(std::abs(w.evaluate(k, x) - v.evaluate(k, g * x)), 0.0, 1e-10);
            EXPECT_NEAR(w.norm(), v.norm(), 1e-10 * v.norm());
        }
}

TEST(Vmf, LegendreCoefficientsMatchBesselSeries) {
    for (double kappa : {0.5, 3.0, 12.0}) {
        const auto h = vmf_legendre_coefficients(kappa, 10);
        const double i0 = gsl_sf_bessel_il_scaled(0, kappa);
        for (int p = 0; p <= 10; ++p) {
            const double expect = (p % 2 == 0) ? (2 * p + 1) * gsl_sf_bessel_il_scaled(p, kappa) / i0 : 0.0;
            EXPECT_NEAR(h[static_cast<std::size_t>(p)], expect, 1e-10 * std::max(1.0, std::abs(expect)))
                << "kappa=" << kappa << " p=" << p;
        }
    }
}

TEST(RandomDistribution, ConstraintsAndNonnegativity) {
    const auto d = random_distribution(6, 4, 4.0);
    EXPECT_TRUE(validate(d).ok) << validate(d).summary();
    EXPECT_EQ(d.get(0, 0), cplx(1.0));
    for (int p = 1; p <= 6; p += 2) EXPECT_EQ(d.B[static_cast<std::size_t>(p)].norm(), 0.0);
    EXPECT_GT(d.norm_above(1), 0.1);
    const auto gl = gauss_legendre(24);
    double mean = 0, mn = 1e9;
    for (std::size_t i = 0; i < gl.x.size(); ++i)
        for (int j = 0; j < 48; ++j) {
            const double v = density_at_direction(d, std::acos(gl.x[i]), 2 * kPi * j / 48);
            mean += v * gl.w[i] / 2 / 48;
            mn = std::min(mn, v);
        }
    EXPECT_NEAR(mean, 1.0, 1e-12);
    EXPECT_GT(mn, 0.0);
}

TEST(RandomDistribution, ZeroConcentrationIsUniform) {
    const auto d = random_distribution(4, 1, 0.0);
    EXPECT_EQ(d.norm_above(1), 0.0);
    EXPECT_THROW(random_distribution(3, 1, 1.0), DomainError);
}

TEST(Density, WignerAndDirectionFormsAgree) {
    const auto d = random_distribution(6, 8, 3.0);
    std::mt19937_64 rng(1);
    for (int t = 0; t < 50; ++t) {
        const Euler e = random_euler(rng);
        EXPECT_NEAR(density_at(d, e), density_at_direction(d, e.beta, e.alpha), 1e-12);
    }
}

TEST(Density, InPlaneUniformAndAntipodal) {
    const auto d = random_distribution(6, 2, 5.0);
    std::mt19937_64 rng(4);
    for (int t = 0; t < 50; ++t) {
        const Euler e = random_euler(rng);
        const Eigen::Matrix3d r = rotation_matrix(e);
        const double base = density_at(d, e);
        // in-plane rotation R Rz(gamma')
        EXPECT_NEAR(density_at(d, euler_from_matrix(r * rot_z(1.234))), base, 1e-10);
        // antipodal: R Rx(pi) maps the viewing direction to its negative
        Eigen::Matrix3d rx = Eigen::Vector3d(1, -1, -1).asDiagonal();
        EXPECT_NEAR(density_at(d, euler_from_matrix(r * rx)), base, 1e-10);
    }
}

TEST(Density, RejectsBrokenConjugateSymmetry) {
    auto d = random_distribution(4, 2, 2.0);
    d.set(2, 1, d.get(2, 1) + cplx(0.3, 0.0));
    EXPECT_FALSE(validate(d).ok);
    EXPECT_THROW(density_at(d, Euler{0.3, 0.7, 0.2}), ValidationError);
}

TEST(Distribution, TransformedMatchesPointwise) {
    const auto d = random_distribution(6, 3, 3.0);
    std::mt19937_64 rng(6);
    for (int eps = 0; eps <= 1; ++eps)
        for (int t = 0; t < 10; ++t) {
            const Euler s = random_euler(rng);
            const auto ds = d.transformed(s, eps);
            const Eigen::Matrix3d je = eps ? reflection_j() : Eigen::Matrix3d::Identity();
            const Euler e = random_euler(rng);
            // rho'(R) = rho(J^eps S R J^eps)
            const Eigen::Matrix3d r = je * rotation_matrix(s) * rotation_matrix(e) * je;
            EXPECT_NEAR(density_at(ds, e), density_at(d, euler_from_matrix(r)), 1e-10);
        }
}

TEST(BlockOrthogonal, RandomIsOrthogonalAndPinned) {
    std::mt19937_64 rng(2);
    const auto b = BlockOrthogonal::random(5, rng);
    EXPECT_TRUE(validate(b, true).ok);
    EXPECT_EQ((b.O[1] - MatrixXd::Identity(3, 3)).norm(), 0.0);
    const MatrixXd d = b.dense();
    EXPECT_LT((d.transpose() * d - MatrixXd::Identity(d.rows(), d.cols())).norm(), 1e-12);
    auto bad = b;
    bad.O[3](0, 0) += 0.1;
    EXPECT_FALSE(validate(bad).ok);
}

TEST(Serialization, RoundTripsAreBitExact) {
    const auto grid = PolarGrid::equispaced(17, 12);
    const auto v = random_volume(3, grid, 21);
    const auto d = random_distribution(6, 21, 2.0);
    std::mt19937_64 rng(21);
    const auto o = BlockOrthogonal::random(3, rng);
    write_volume(tmp_path("v.modm"), v);
    write_distribution(tmp_path("d.modm"), d);
    write_block_orthogonal(tmp_path("o.modm"), o);
    const auto v2 = read_volume(tmp_path("v.modm"));
    const auto d2 = read_distribution(tmp_path("d.modm"));
    const auto o2 = read_block_orthogonal(tmp_path("o.modm"));
    EXPECT_EQ(v2.L, 3);
    EXPECT_EQ(v2.radii, v.radii);
    EXPECT_EQ((v2.stacked() - v.stacked()).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(v2.real_volume, v.real_volume);
    for (int p = 0; p <= 6; ++p) EXPECT_EQ(d2.B[static_cast<std::size_t>(p)], d.B[static_cast<std::size_t>(p)]);
    EXPECT_EQ(o2.dense(), o.dense());
    // writing the re-read objects reproduces the same bytes
    write_volume(tmp_path("v2.modm"), v2);
    EXPECT_EQ(read_bytes(tmp_path("v.modm")), read_bytes(tmp_path("v2.modm")));
}

TEST(Serialization, RejectsWrongKindAndGarbage) {
    const auto d = random_distribution(4, 1, 1.0);
    write_distribution(tmp_path("d.modm"), d);
    EXPECT_THROW(read_volume(tmp_path("d.modm")), IoError);
    write_text(tmp_path("junk.modm"), "not a record");
    EXPECT_THROW(read_volume(tmp_path("junk.modm")), IoError);
    EXPECT_THROW(read_volume(tmp_path("missing.modm")), IoError);
}
