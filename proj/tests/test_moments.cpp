#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "modm/moments.hpp"

using namespace modm;

namespace {

std::filesystem::path tmp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "modm_test_moments";
    std::filesystem::create_directories(dir);
    return dir / name;
}

struct Fixture {
    PolarGrid grid = PolarGrid::equispaced(16, 12);
    VolumeCoefficients vol = random_volume(3, grid, 101);
    DistributionCoefficients dist = random_distribution(4, 202, 3.0);
};

double max_abs(const MatrixXcd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST(BBlocks, UniformReducesToDiagonalWeights) {
    const int L = 4;
    const auto b = assemble_b_blocks(DistributionCoefficients::uniform(8), L);
    for (int n = -L; n <= L; ++n) {
        MatrixXcd expect = MatrixXcd::Zero((L + 1) * (L + 1), (L + 1) * (L + 1));
        for (int l = 0; l <= L; ++l)
            for (int m = -l; m <= l; ++m)
                expect(l * l + l + m, l * l + l + m) = cal_n_const(l, n) * cal_n_const(l, n) / (2.0 * l + 1.0);
        EXPECT_LT(max_abs(b.at(n) - expect), 1e-13) << "n=" << n;
    }
}

TEST(BBlocks, HermitianAndParitySupport) {
    Fixture f;
    const auto b = assemble_b_blocks(f.dist, 3);
    for (int n = -3; n <= 3; ++n) {
        EXPECT_LT(max_abs(b.at(n) - b.at(n).adjoint()), 1e-13);
        for (int l = 0; l <= 3; ++l)
            for (int lp = 0; lp <= 3; ++lp) {
                if ((l + n) % 2 != 0 || (lp + n) % 2 != 0 || std::abs(n) > std::min(l, lp))
                    EXPECT_EQ(max_abs(b.block(n, l, lp)), 0.0);
            }
    }
}

TEST(Moments, UniformAnalyticMatchesGeneralFormula) {
    Fixture f;
    const auto a = m2_uniform_analytic(f.vol, f.grid);
    const auto b = m2_analytic(f.vol, DistributionCoefficients::uniform(4), f.grid);
    EXPECT_LT(g_relative_error(a, b), 1e-13);
    EXPECT_LT((a.m1 - b.m1).norm(), 1e-13 * a.m1.norm());
    EXPECT_EQ(b.distribution, "uniform");
}

TEST(Moments, UniformMatchesLegendreAdditionForm) {
    Fixture f;
    const auto mt = m2_uniform_analytic(f.vol, f.grid);
    for (int i = 0; i < f.grid.m_r(); i += 3)
        for (int j = 0; j < f.grid.m_r(); j += 4)
            for (double psi : {0.0, 0.4, 1.9, 3.0})
                EXPECT_NEAR(std::abs(mt.m2_psi(i, j, psi) - m2_uniform_pointwise(f.vol, i, j, psi)), 0.0,
                            1e-12 * mt.g_norm());
}

TEST(Moments, AnalyticMatchesSO3QuadratureOracle) {
    Fixture f;
    const auto analytic = m2_analytic(f.vol, f.dist, f.grid);
    const auto oracle = oracle_m2(f.vol, f.dist, f.grid);
    EXPECT_LT(g_relative_error(analytic, oracle), 1e-8);
    EXPECT_LT((analytic.m1 - oracle.m1).norm(), 1e-8 * oracle.m1.norm());
}

TEST(Moments, FirstMomentIsAngleIndependent) {
    Fixture f;
    const MatrixXcd m1 = oracle_m1_angular(f.vol, f.dist, f.grid);
    const VectorXcd ref = m1_analytic(f.vol, f.dist);
    for (int s = 0; s < f.grid.n_phi; ++s) EXPECT_LT((m1.col(s) - ref).norm(), 1e-9 * ref.norm());
}

TEST(Moments, SimulatorPathMatchesAnalyticUnderQuadrature) {
    Fixture f;
    const auto a = m2_analytic(f.vol, f.dist, f.grid);
    const auto q = quadrature_moments(f.vol, f.dist, f.grid);
    EXPECT_LT(g_relative_error(q, a), 1e-8);
}

TEST(Moments, RealVolumeSymmetries) {
    Fixture f;
    const auto mt = m2_analytic(f.vol, f.dist, f.grid);
    const double scale = mt.g_norm();
    for (int n = -3; n <= 3; ++n) {
        EXPECT_LT(max_abs(mt.g(n) - mt.g(n).adjoint()), 1e-13 * scale);
        EXPECT_LT(max_abs(mt.g(n).imag().cast<cplx>()), 1e-13 * scale);
        EXPECT_LT(max_abs(mt.g(n) - mt.g(-n)), 1e-13 * scale);
        // G^n is a covariance of angular Fourier coefficients: PSD
        Eigen::SelfAdjointEigenSolver<MatrixXcd> es(mt.g(n));
        EXPECT_GT(es.eigenvalues().minCoeff(), -1e-12 * scale);
    }
}

TEST(Moments, GaugeInvariance) {
    Fixture f;
    const auto base = m2_analytic(f.vol, f.dist, f.grid);
    std::mt19937_64 rng(5);
    for (int eps = 0; eps <= 1; ++eps)
        for (int t = 0; t < 4; ++t) {
            const Euler s = random_haar_euler(rng);
            const auto mt = m2_analytic(f.vol.transformed(s, eps), f.dist.transformed(s, eps), f.grid);
            EXPECT_LT(g_relative_error(mt, base), 1e-11);
            EXPECT_LT((mt.m1 - base.m1).norm(), 1e-11 * base.m1.norm());
        }
}

TEST(Moments, DependsOnDistribution) {
    Fixture f;
    const auto a = m2_analytic(f.vol, f.dist, f.grid);
    const auto b = m2_uniform_analytic(f.vol, f.grid);
    EXPECT_GT(g_relative_error(a, b), 1e-3);
}

TEST(Sampler, EmpiricalCoefficientsMatchDistribution) {
    Fixture f;
    const RotationSampler sampler(f.dist);
    std::mt19937_64 rng(77);
    const int n = 40000;
    VectorXcd acc = VectorXcd::Zero(5);
    for (int i = 0; i < n; ++i) acc += wigner_u_column0(2, sampler.draw(rng)).conjugate();
    acc /= n;
    for (int u = -2; u <= 2; ++u) {
        // E_rho[conj U^p_{u0}] = B_{p,u} / (2p+1); |U_{u0}| <= 1 bounds the standard error
        EXPECT_NEAR(std::abs(acc(u + 2) - f.dist.get(2, u) / 5.0), 0.0, 4.0 / std::sqrt(n)) << "u=" << u;
    }
}

TEST(Sampler, RejectsNegativeDensity) {
    auto d = DistributionCoefficients::uniform(2);
    d.set(2, 0, 5.0);
    EXPECT_THROW(RotationSampler{d}, ValidationError);
}

TEST(Simulation, EmpiricalMomentsConverge) {
    Fixture f;
    SimulationSpec spec;
    spec.n_images = 20000;
    spec.seed = 3;
    spec.chunk_size = 2500;
    const auto emp = simulate_moments(f.vol, f.dist, f.grid, spec);
    const auto ref = m2_analytic(f.vol, f.dist, f.grid);
    EXPECT_EQ(emp.n_images, 20000);
    EXPECT_LT(g_relative_error(emp, ref), 0.05);
}

TEST(Simulation, DeterministicAndChunkMergeIsExact) {
    Fixture f;
    const auto a = simulate_images(f.vol, f.dist, f.grid, 300, 0.1, 9, 0);
    const auto b = simulate_images(f.vol, f.dist, f.grid, 300, 0.1, 9, 0);
    EXPECT_EQ((a.images - b.images).norm(), 0.0);
    const auto c = simulate_images(f.vol, f.dist, f.grid, 300, 0.1, 9, 1);
    EXPECT_GT((a.images - c.images).norm(), 0.0);

    MomentAccumulator whole(f.grid, 3), left(f.grid, 3), right(f.grid, 3);
    MatrixXcd both(600, a.images.cols());
    both << a.images, c.images;
    whole.add(both);
    left.add(a);
    right.add(c);
    left.merge(right);
    const auto mw = whole.finalize(0.01, 3), mm = left.finalize(0.01, 3);
    EXPECT_LT(g_relative_error(mm, mw), 1e-13);
}

TEST(Simulation, NoiseBiasIsRemoved) {
    // zero volume: images are pure noise, so debiased G must vanish up to sampling error
    const PolarGrid grid = PolarGrid::equispaced(6, 16);
    auto vol = VolumeCoefficients::zeros(1, grid.radii);
    vol.real_volume = true;
    const double sigma = 2.0;
    const auto batch = simulate_images(vol, DistributionCoefficients::uniform(2), grid, 20000, sigma, 4);
    const auto mt = empirical_moments(batch, 1);
    EXPECT_TRUE(mt.debiased);
    // per entry, c_n averages M_phi samples: var |c_n|^2 ~ (sigma^2/M_phi)^2 / N
    const double se = sigma * sigma / grid.n_phi / std::sqrt(20000.0);
    for (int n = -1; n <= 1; ++n) EXPECT_LT(max_abs(mt.g(n)), 6 * se) << "n=" << n;
    MomentAccumulator raw(grid, 1);
    raw.add(batch);
    const auto biased = raw.finalize(0.0, 1);
    EXPECT_NEAR(biased.g(0)(0, 0).real(), sigma * sigma / grid.n_phi, 6 * se);
}

TEST(Simulation, SymmetrizeProjectsOntoRealSymmetric) {
    Fixture f;
    const auto batch = simulate_images(f.vol, f.dist, f.grid, 500, 0.05, 1);
    const auto mt = empirical_moments(batch, 3, -1, true);
    EXPECT_TRUE(mt.symmetrized);
    for (int n = -3; n <= 3; ++n) {
        EXPECT_EQ(max_abs(mt.g(n) - mt.g(-n)), 0.0);
        EXPECT_EQ(mt.g(n).imag().norm(), 0.0);
        EXPECT_LT(max_abs(mt.g(n) - mt.g(n).transpose()), 1e-15 * mt.g_norm());
    }
}

TEST(Simulation, RejectsBadInputs) {
    Fixture f;
    auto complex_vol = f.vol;
    complex_vol.real_volume = false;
    EXPECT_THROW(simulate_images(complex_vol, f.dist, f.grid, 10, 0.0, 1), DomainError);
    const auto other = PolarGrid::equispaced(17, 12);
    EXPECT_THROW(m2_analytic(f.vol, f.dist, other), DomainError);
    MomentAccumulator acc(f.grid, 3);
    EXPECT_THROW(acc.finalize(0.0, 3), DomainError);
}

TEST(MomentIO, RoundTrip) {
    Fixture f;
    auto mt = m2_analytic(f.vol, f.dist, f.grid);
    mt.sigma2 = 0.25;
    write_moments(tmp_path("m.modm"), mt);
    const auto back = read_moments(tmp_path("m.modm"));
    EXPECT_EQ(back.n_max, mt.n_max);
    EXPECT_EQ(back.sigma2, 0.25);
    EXPECT_EQ(g_relative_error(back, mt), 0.0);
    EXPECT_EQ(back.m1, mt.m1);
    EXPECT_TRUE(back.grid.same_as(mt.grid));
}

TEST(ImageIO, ChunkedReaderReproducesBatches) {
    Fixture f;
    const auto a = simulate_images(f.vol, f.dist, f.grid, 70, 0.1, 2, 0);
    const auto b = simulate_images(f.vol, f.dist, f.grid, 50, 0.1, 2, 1);
    ImageFileWriter w(tmp_path("img.modm"), f.grid, 0.1);
    w.append(a);
    w.append(b);
    w.close();
    ImageFileReader r(tmp_path("img.modm"));
    EXPECT_EQ(r.total(), 120);
    MatrixXcd all(120, a.images.cols());
    all << a.images, b.images;
    int row = 0;
    for (auto chunk = r.next(32); chunk.size() > 0; chunk = r.next(32)) {
        EXPECT_EQ((chunk.images - all.middleRows(row, chunk.size())).norm(), 0.0);
        row += chunk.size();
    }
    EXPECT_EQ(row, 120);
}
