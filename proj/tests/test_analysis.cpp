#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "modm/analysis.hpp"

using namespace modm;

namespace {

double mean_fsc(const std::vector<std::optional<double>>& f) {
    double s = 0;
    int n = 0;
    for (const auto& v : f)
        if (v) {
            s += *v;
            ++n;
        }
    return s / n;
}

VolumeCoefficients add_noise(const VolumeCoefficients& v, double level, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    VolumeCoefficients out = v;
    for (int l = 0; l <= v.L; ++l) {
        MatrixXcd noise(v.m_r(), 2 * l + 1);
        for (int i = 0; i < noise.size(); ++i) noise(i) = cplx(g(rng), g(rng));
        auto& a = out.A[static_cast<std::size_t>(l)];
        a += level * v.A[static_cast<std::size_t>(l)].norm() / noise.norm() * noise;
    }
    out.real_volume = false;
    return out;
}

const PolarGrid kGrid = PolarGrid::equispaced(16, 16);

}  // namespace

TEST(Align, RecoversKnownRotation) {
    const auto ref = random_volume(3, kGrid, 1);
    const Euler s{0.9, 2.1, -1.3};
    const auto est = ref.transformed(s, 0);
    const auto a = align(ref, est);
    EXPECT_EQ(a.eps, 0);
    EXPECT_LT(a.error, 1e-9);
    EXPECT_LT((rotation_matrix(a.S) - rotation_matrix(s)).norm(), 1e-8);
    EXPECT_FALSE(a.fallback);
}

TEST(Align, DetectsReflection) {
    const auto ref = random_volume(3, kGrid, 2);
    const auto est = ref.transformed(Euler{-0.4, 0.7, 2.5}, 1);
    const auto a = align(ref, est);
    EXPECT_EQ(a.eps, 1);
    EXPECT_LT(a.error, 1e-9);
}

TEST(Align, IdentityCompare) {
    const auto ref = random_volume(2, kGrid, 3);
    const auto a = align(ref, ref);
    EXPECT_EQ(a.eps, 0);
    EXPECT_LT(a.error, 1e-12);
    EXPECT_LT((rotation_matrix(a.S) - Eigen::Matrix3d::Identity()).norm(), 1e-8);
}

TEST(Align, ReportedResidualsAreSelfConsistent) {
    const auto ref = random_volume(3, kGrid, 4);
    const auto est = add_noise(ref.transformed(Euler{1.0, 0.5, 0.2}, 1), 0.05, 9);
    const auto a = align(ref, est);
    std::vector<double> per;
    EXPECT_NEAR(aligned_error(ref, est, a.S, a.eps, &per), a.error, 1e-12);
    ASSERT_EQ(per.size(), a.per_degree.size());
    for (std::size_t l = 0; l < per.size(); ++l) EXPECT_NEAR(per[l], a.per_degree[l], 1e-12);
    double sq = 0;
    for (double v : per) sq += v * v;
    EXPECT_NEAR(std::sqrt(sq), a.error, 1e-12);
}

TEST(Align, GaugeRemovalIsInvariantToGlobalTransforms) {
    const auto ref = random_volume(3, kGrid, 5);
    const auto est = add_noise(ref, 0.03, 10);
    const double e0 = align(ref, est).error;
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 6; ++trial) {
        const Euler s = random_haar_euler(rng);
        const int eps = trial % 2;
        const double e = align(ref, est.transformed(s, eps)).error;
        EXPECT_NEAR(e, e0, 1e-8) << "trial " << trial;
    }
}

TEST(Align, FallsBackWhenDegreeOneVanishes) {
    auto ref = random_volume(2, kGrid, 6);
    ref.A[1].setZero();
    const auto est = ref.transformed(Euler{0.3, 1.4, -2.0}, 0);
    AlignOptions opt;
    opt.max_evals = 600;
    const auto a = align(ref, est, opt);
    EXPECT_TRUE(a.fallback);
    EXPECT_LT(a.error, 1e-6);
}

TEST(Align, RejectsMismatchedInputs) {
    const auto a = random_volume(2, kGrid, 7);
    const auto b = random_volume(3, kGrid, 7);
    EXPECT_THROW(align(a, b), DomainError);
    const auto c = random_volume(2, PolarGrid::equispaced(16, 16, 0.4), 7);
    EXPECT_THROW(align(a, c), DomainError);
}

TEST(Align, DistributionErrorUsesTheSameGauge) {
    const auto d = random_distribution(6, 8, 3.0);
    const auto ref = random_volume(3, kGrid, 8);
    const Euler s{0.2, 0.8, 1.9};
    for (int eps : {0, 1}) {
        const auto a = align(ref, ref.transformed(s, eps));
        EXPECT_LT(aligned_distribution_error(d, d.transformed(s, eps), a, 6), 1e-8) << "eps=" << eps;
    }
}

TEST(Fsc, SelfIsOne) {
    const auto ref = random_volume(3, kGrid, 20);
    for (const auto& v : fsc(ref, ref)) {
        ASSERT_TRUE(v.has_value());
        EXPECT_NEAR(*v, 1.0, 1e-14);
    }
}

TEST(Fsc, IndependentVolumesCorrelateWeakly) {
    double total = 0;
    const int trials = 20;
    for (int t = 0; t < trials; ++t) {
        const auto a = random_volume(3, kGrid, 100 + 2 * t);
        const auto b = random_volume(3, kGrid, 101 + 2 * t);
        total += std::abs(mean_fsc(fsc(a, b)));
    }
    EXPECT_LT(total / trials, 0.2);
}

TEST(Fsc, DecreasesWithNoiseLevel) {
    const auto ref = random_volume(3, kGrid, 21);
    double prev = 1.0;
    for (double level : {0.05, 0.1, 0.2, 0.4}) {
        const double m = mean_fsc(fsc(ref, add_noise(ref, level, 5)));
        EXPECT_LT(m, prev) << "level " << level;
        EXPECT_GT(m, 0.5);
        prev = m;
    }
}

TEST(Fsc, InvariantUnderSimultaneousRotation) {
    const auto ref = random_volume(3, kGrid, 22);
    const auto est = add_noise(ref, 0.2, 6);
    const auto f0 = fsc(ref, est);
    const Euler s{1.2, 0.4, -0.6};
    const auto f1 = fsc(ref.transformed(s, 0), est.transformed(s, 0));
    for (std::size_t i = 0; i < f0.size(); ++i) EXPECT_NEAR(*f0[i], *f1[i], 1e-12);
}

TEST(Fsc, MissingWhereShellVanishes) {
    auto ref = random_volume(2, kGrid, 23);
    for (auto& a : ref.A) a.row(4).setZero();
    const auto f = fsc(ref, random_volume(2, kGrid, 24));
    EXPECT_FALSE(f[4].has_value());
    EXPECT_TRUE(f[3].has_value());
    const auto csv = fsc_csv(kGrid.radii, f);
    EXPECT_EQ(csv.rfind("radius,fsc\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 17);
}

TEST(Lemmas, InjectivityRankIsFull) {
    for (int L = 3; L <= 6; ++L) {
        const auto r = check_lemma_injectivity(L, generic_lower_coefficients(L, 7 + L));
        EXPECT_EQ(r.rank, 4 * L + 1) << "L=" << L;
        EXPECT_TRUE(r.passed());
        EXPECT_GE(r.gap, 1e6);
        EXPECT_EQ(r.cols, 4 * L + 1);
    }
}

TEST(Lemmas, SingleUnderlinedFrequencySuffices) {
    for (int L = 3; L <= 6; ++L) {
        const auto r = check_lemma_injectivity(L, std::nullopt, {L % 2});
        EXPECT_EQ(r.rank, 4 * L + 1) << "L=" << L;
    }
}

TEST(Lemmas, InjectivityMatrixMatchesBlockAssembly) {
    // column u of the map is vec B^n_{L,L} for B with only B_{2L,u} = 1
    const int L = 3;
    const auto ns = lemma_n_list(L);
    const MatrixXcd m = lemma_injectivity_matrix(L, ns);
    const int d = 2 * L + 1;
    for (int u = -2 * L; u <= 2 * L; ++u) {
        DistributionCoefficients b = DistributionCoefficients::uniform(2 * L);
        b.set(0, 0, 0.0);
        b.set(2 * L, u, 1.0);
        const BBlocks bb = assemble_b_blocks(b, L);
        for (std::size_t k = 0; k < ns.size(); ++k) {
            const MatrixXcd blk = bb.block(ns[k], L, L);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j)
                    EXPECT_LT(std::abs(m(static_cast<Eigen::Index>(k) * d * d + i * d + j, u + 2 * L) - blk(i, j)), 1e-14);
        }
    }
}

TEST(Lemmas, ConcatenationHasRankTwoLPlusOne) {
    for (int L = 4; L <= 6; ++L) {
        const auto r = check_lemma_column_rank(L, 7);
        EXPECT_EQ(r.rank, 2 * L + 1) << "L=" << L;
        EXPECT_EQ(r.rows, 2 * L + 1);
        EXPECT_GT(r.cols, r.rows);
        EXPECT_TRUE(r.passed());
    }
    EXPECT_THROW(check_lemma_column_rank(3, 7), DomainError);
}

TEST(Lemmas, SparseInstanceIsDiagonallyDominant) {
    const auto r = check_lemma_sparse_instance(6);
    EXPECT_TRUE(r.diagonally_dominant);
    EXPECT_GT(r.min_dominance_margin, 0.0);
    EXPECT_EQ(r.rank.rank, 13);
    EXPECT_EQ(r.rank.rows, 13);
    EXPECT_EQ(r.rank.cols, 13);
}

TEST(Lemmas, RankDecisionsStableUnderThresholdScaling) {
    for (int L = 3; L <= 6; ++L) {
        const auto r = check_lemma_injectivity(L);
        EXPECT_EQ(r.rank_loose, r.rank);
        EXPECT_EQ(r.rank_tight, r.rank);
    }
    for (int L = 4; L <= 6; ++L) {
        const auto r = check_lemma_column_rank(L, 3);
        EXPECT_EQ(r.rank_loose, r.rank);
        EXPECT_EQ(r.rank_tight, r.rank);
    }
    const auto s = check_lemma_sparse_instance(6);
    EXPECT_EQ(s.rank.rank_loose, s.rank.rank);
    EXPECT_EQ(s.rank.rank_tight, s.rank.rank);
}

TEST(Lemmas, ReportRankCountsSingularValuesAboveThreshold) {
    const auto r = check_lemma_column_rank(5, 11);
    int count = 0;
    for (int i = 0; i < r.singular_values.size(); ++i)
        if (r.singular_values(i) > r.threshold * r.singular_values(0)) ++count;
    EXPECT_EQ(count, r.rank);
    const auto j = rank_report_json(r);
    EXPECT_EQ(j.at("rank").get<int>(), r.rank);
    EXPECT_EQ(j.at("singular_values").size(), static_cast<std::size_t>(r.singular_values.size()));
    EXPECT_NE(rank_report_text(r).find("ok"), std::string::npos);
}

TEST(Nonvanishing, AllConstantsNonzero) {
    const auto r = check_nonvanishing(6, 12);
    EXPECT_TRUE(r.passed());
    EXPECT_GT(r.min_cg, 1e-12);
    EXPECT_GT(r.min_n, 1e-12);
    EXPECT_LT(r.max_n_closed_form_error, 1e-12);
    // parity-violating (l, n) are skipped, leaving l + 1 values per degree
    long long expect = 0;
    for (int l = 0; l <= 12; ++l) expect += l + 1;
    EXPECT_EQ(r.n_count, expect);
}

TEST(Nonvanishing, DegreeOneSweep) {
    double mn = 1e300;
    for (int m = -1; m <= 1; ++m)
        for (int mp = -1; mp <= 1; ++mp)
            for (int n = -1; n <= 1; ++n)
                for (int np = -1; np <= 1; ++np)
                    mn = std::min(mn, std::abs(clebsch_gordan(1, m, 1, mp, 2, m + mp) * clebsch_gordan(1, n, 1, np, 2, n + np)));
    EXPECT_GT(mn, 0.1);
}

TEST(Nonvanishing, ClosedFormAtFourTwo) {
    const double expect = -1.0 / 16.0 * std::sqrt(9.0 / (4 * kPi)) * std::sqrt(720.0 * 2.0) / 6.0;
    EXPECT_NEAR(cal_n_const(4, 2), expect, 1e-14);
    EXPECT_NEAR(cal_n_closed_form(4, 2), expect, 1e-14);
}
