#pragma once

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "modm/errors.hpp"
#include "modm/io.hpp"
#include "modm/model.hpp"
#include "modm/moments.hpp"
#include "modm/special_fns.hpp"

namespace modm {

// ---------------------------------------------------------------------------
// Alignment

struct AlignmentResult {
    Euler S{0, 0, 0};
    int eps = 0;
    std::vector<double> per_degree;  ///< ||ref_l U^l(J^eps S) - est_l|| / ||ref||
    double error = 0;                ///< total aligned relative error
    bool fallback = false;           ///< degree-1 block degenerate, grid search used
    int evaluations = 0;
};

/// sqrt(sum_l ||ref_l U^l(J^eps S) - est_l||^2) / ||ref||, with per-degree parts.
inline double aligned_error(const VolumeCoefficients& ref, const VolumeCoefficients& est, const Euler& s, int eps,
                            std::vector<double>* per_degree = nullptr) {
    if (ref.L != est.L || ref.radii != est.radii) throw DomainError("aligned_error: bandlimit or grid mismatch");
    const VolumeCoefficients r = ref.transformed(s, eps);
    const double nrm = ref.norm();
    double tot = 0;
    if (per_degree) per_degree->clear();
    for (int l = 0; l <= ref.L; ++l) {
        const double e = (r.A[static_cast<std::size_t>(l)] - est.A[static_cast<std::size_t>(l)]).squaredNorm();
        tot += e;
        if (per_degree) per_degree->push_back(std::sqrt(e) / nrm);
    }
    return std::sqrt(tot) / nrm;
}

namespace detail {

/// Permutation taking Cartesian (x, y, z) to the degree-1 real-basis order (y, z, x).
inline Eigen::Matrix3d degree1_permutation() {
    Eigen::Matrix3d p;
    p << 0, 1, 0, 0, 0, 1, 1, 0, 0;
    return p;
}

/// Rotation closest to m in Frobenius norm.
inline Eigen::Matrix3d procrustes_so3(const Eigen::Matrix3d& m) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2, 2) = -1;
    return svd.matrixU() * d * svd.matrixV().transpose();
}

struct AlignProblem {
    const VolumeCoefficients* ref;
    const VolumeCoefficients* est;
    int eps;
    Eigen::Matrix3d seed;
    int evals = 0;
};

/// Seed rotation composed with exp of the rotation vector x (no gimbal lock near x = 0).
inline Euler perturbed_rotation(const Eigen::Matrix3d& seed, const gsl_vector* x) {
    const Eigen::Vector3d w(gsl_vector_get(x, 0), gsl_vector_get(x, 1), gsl_vector_get(x, 2));
    const double t = w.norm();
    const Eigen::Matrix3d d = t > 0 ? Eigen::AngleAxisd(t, w / t).toRotationMatrix() : Eigen::Matrix3d::Identity();
    return euler_from_matrix(seed * d);
}

inline double align_objective(const gsl_vector* x, void* params) {
    auto* p = static_cast<AlignProblem*>(params);
    ++p->evals;
    return aligned_error(*p->ref, *p->est, perturbed_rotation(p->seed, x), p->eps);
}

/// Nelder-Mead refinement over a rotation-vector offset from a seed; returns the better of seed and result.
inline std::pair<Euler, double> refine_alignment(const VolumeCoefficients& ref, const VolumeCoefficients& est, Euler seed,
                                                 int eps, int max_evals, double step, int* evals) {
    AlignProblem prob{&ref, &est, eps, rotation_matrix(seed)};
    const double seed_err = aligned_error(ref, est, seed, eps);
    gsl_multimin_function f{&align_objective, 3, &prob};
    gsl_vector* x = gsl_vector_alloc(3);
    gsl_vector* ss = gsl_vector_alloc(3);
    gsl_vector_set_zero(x);
    gsl_vector_set_all(ss, step);
    gsl_multimin_fminimizer* m = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, 3);
    gsl_multimin_fminimizer_set(m, &f, x, ss);
    while (prob.evals < max_evals) {
        if (gsl_multimin_fminimizer_iterate(m) != GSL_SUCCESS) break;
        if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(m), 1e-13) == GSL_SUCCESS) break;
    }
    const Euler out = perturbed_rotation(prob.seed, m->x);
    const double err = m->fval;
    gsl_multimin_fminimizer_free(m);
    gsl_vector_free(ss);
    gsl_vector_free(x);
    *evals += prob.evals;
    if (err < seed_err) return {out, err};
    return {seed, seed_err};
}

}  // namespace detail

struct AlignOptions {
    int max_evals = 200;         ///< Nelder-Mead budget per chirality
    int grid_size = 10000;       ///< fallback search size
    double degenerate_ratio = 1e-10;
};

/// Finds (S, eps) minimizing ||ref U(J^eps S) - est||: degree-1 Procrustes seed, then local search.
inline AlignmentResult align(const VolumeCoefficients& ref, const VolumeCoefficients& est, const AlignOptions& opt = {}) {
    if (ref.L != est.L) throw DomainError("align: bandlimit mismatch");
    if (ref.radii != est.radii) throw DomainError("align: radial grids differ");
    AlignmentResult best;
    best.error = std::numeric_limits<double>::infinity();
    const bool degenerate = ref.L < 1 || ref.A[1].norm() < opt.degenerate_ratio * ref.norm() ||
                            est.A[1].norm() < opt.degenerate_ratio * est.norm();
    int evals = 0;
    std::vector<std::pair<Euler, int>> seeds;
    if (!degenerate) {
        const Eigen::Matrix3d p = detail::degree1_permutation();
        for (int eps = 0; eps <= 1; ++eps) {
            // ref_1 U^1(J^eps S) in the real basis is ref_check_1 (P J^eps S P^T)
            const MatrixXcd rc = ref.real_basis(1), ec = est.real_basis(1);
            const Eigen::Matrix3d m = (rc.adjoint() * ec).real();
            const Eigen::Matrix3d je = eps ? reflection_j() : Eigen::Matrix3d::Identity();
            // maximize tr((P J S P^T)^T m) over S in SO(3)
            const Eigen::Matrix3d s = detail::procrustes_so3(je * p.transpose() * m * p);
            seeds.emplace_back(euler_from_matrix(s), eps);
        }
    } else {
        best.fallback = true;
        std::mt19937_64 rng(0x5EED);
        for (int eps = 0; eps <= 1; ++eps) {
            std::pair<double, Euler> top{std::numeric_limits<double>::infinity(), {}};
            for (int i = 0; i < opt.grid_size; ++i) {
                const Euler e = random_haar_euler(rng);
                const double v = aligned_error(ref, est, e, eps);
                ++evals;
                if (v < top.first) top = {v, e};
            }
            seeds.emplace_back(top.second, eps);
        }
    }
    for (const auto& [seed, eps] : seeds) {
        const double step = best.fallback ? 0.2 : 1e-3;
        auto [s, err] = detail::refine_alignment(ref, est, seed, eps, opt.max_evals, step, &evals);
        if (err < best.error) {
            best.S = s;
            best.eps = eps;
            best.error = err;
        }
    }
    best.error = aligned_error(ref, est, best.S, best.eps, &best.per_degree);
    best.evaluations = evals;
    return best;
}

/// Relative error of B_{p,u} (p <= pmax) after transporting the reference into the estimate's gauge.
inline double aligned_distribution_error(const DistributionCoefficients& ref, const DistributionCoefficients& est,
                                         const AlignmentResult& a, int pmax) {
    const DistributionCoefficients r = ref.truncated(pmax).transformed(a.S, a.eps);
    double num = 0, den = 0;
    for (int p = 0; p <= pmax; ++p)
        for (int u = -p; u <= p; ++u) {
            num += std::norm(r.get(p, u) - est.get(p, u));
            den += std::norm(r.get(p, u));
        }
    return std::sqrt(num / den);
}

inline json alignment_json(const AlignmentResult& a) {
    return {{"alpha", a.S.alpha}, {"beta", a.S.beta},     {"gamma", a.S.gamma},
            {"chirality", a.eps}, {"error", a.error},     {"per_degree", a.per_degree},
            {"fallback", a.fallback}, {"evaluations", a.evaluations}};
}

// ---------------------------------------------------------------------------
// Fourier shell correlation in coefficient space

/// FSC(r_i) = Re<A(r_i), A_est(r_i)> / (|A(r_i)| |A_est(r_i)|); empty where a shell norm vanishes.
inline std::vector<std::optional<double>> fsc(const VolumeCoefficients& ref, const VolumeCoefficients& est) {
    if (ref.L != est.L || ref.radii != est.radii) throw DomainError("fsc: bandlimit or grid mismatch");
    const MatrixXcd a = ref.stacked(), b = est.stacked();
    std::vector<std::optional<double>> out;
    for (int i = 0; i < a.rows(); ++i) {
        const double na = a.row(i).norm(), nb = b.row(i).norm();
        if (na == 0 || nb == 0) {
            out.emplace_back();
            continue;
        }
        out.emplace_back(a.row(i).dot(b.row(i)).real() / (na * nb));
    }
    return out;
}

inline std::string fsc_csv(const std::vector<double>& radii, const std::vector<std::optional<double>>& f) {
    std::ostringstream os;
    os.precision(17);
    os << "radius,fsc\n";
    for (std::size_t i = 0; i < f.size(); ++i) {
        os << radii[i] << ',';
        if (f[i]) os << *f[i];
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Identifiability checks

struct RankReport {
    std::string lemma;
    int L = 0;
    int rows = 0;
    int cols = 0;
    VectorXd singular_values;
    double threshold = 1e-8;  ///< relative to sigma_max
    int rank = 0;
    int expected = 0;
    int rank_loose = 0;       ///< rank at threshold x 10
    int rank_tight = 0;       ///< rank at threshold / 10
    double gap = 0;           ///< sigma_expected / (threshold * sigma_max)
    json extra = json::object();

    bool passed() const { return rank == expected && rank_loose == expected && rank_tight == expected; }
};

inline int numerical_rank(const VectorXd& s, double rel) {
    if (s.size() == 0 || s(0) == 0) return 0;
    int r = 0;
    for (int i = 0; i < s.size(); ++i)
        if (s(i) > rel * s(0)) ++r;
    return r;
}

inline RankReport rank_report(const std::string& lemma, int L, const MatrixXcd& m, int expected, double threshold = 1e-8) {
    RankReport r;
    r.lemma = lemma;
    r.L = L;
    r.rows = static_cast<int>(m.rows());
    r.cols = static_cast<int>(m.cols());
    r.singular_values = Eigen::JacobiSVD<MatrixXcd>(m).singularValues();
    r.threshold = threshold;
    r.expected = expected;
    r.rank = numerical_rank(r.singular_values, threshold);
    r.rank_loose = numerical_rank(r.singular_values, threshold * 10);
    r.rank_tight = numerical_rank(r.singular_values, threshold / 10);
    if (expected >= 1 && expected <= r.singular_values.size() && r.singular_values(0) > 0)
        r.gap = r.singular_values(expected - 1) / (threshold * r.singular_values(0));
    return r;
}

inline json rank_report_json(const RankReport& r) {
    std::vector<double> s(r.singular_values.data(), r.singular_values.data() + r.singular_values.size());
    json j = {{"lemma", r.lemma},         {"L", r.L},
              {"rows", r.rows},           {"cols", r.cols},
              {"singular_values", s},     {"threshold", r.threshold},
              {"rank", r.rank},           {"expected", r.expected},
              {"rank_threshold_x10", r.rank_loose}, {"rank_threshold_div10", r.rank_tight},
              {"gap", r.gap},             {"passed", r.passed()}};
    if (!r.extra.empty()) j["extra"] = r.extra;
    return j;
}

inline std::string rank_report_text(const RankReport& r) {
    std::ostringstream os;
    os << r.lemma << " L=" << r.L << ": " << r.rows << "x" << r.cols << " rank " << r.rank << " (expected "
       << r.expected << ", threshold " << r.threshold << ", gap " << r.gap << ") " << (r.passed() ? "ok" : "FAILED");
    return os.str();
}

/// Linear part of B_{2L} -> (B^n_{L,L})_n: one column per u = -2L..2L, rows (n, m, m').
inline MatrixXcd lemma_injectivity_matrix(int L, const std::vector<int>& ns) {
    const int d = 2 * L + 1;
    MatrixXcd out = MatrixXcd::Zero(static_cast<Eigen::Index>(ns.size()) * d * d, 4 * L + 1);
    for (std::size_t k = 0; k < ns.size(); ++k) {
        const int n = ns[k];
        const double nn = cal_n_const(L, n) * cal_n_const(L, n);
        for (int m = -L; m <= L; ++m)
            for (int mp = -L; mp <= L; ++mp) {
                const double c = sign_pow(m + n) * nn * cg_product(L, L, m, -mp, n, -n, 2 * L) / (4.0 * L + 1.0);
                out(static_cast<Eigen::Index>(k) * d * d + (m + L) * d + (mp + L), mp - m + 2 * L) = c;
            }
    }
    return out;
}

/// n in [0, L] with n = L (mod 2); the smallest one alone is the underlined n of the injectivity proof.
inline std::vector<int> lemma_n_list(int L) {
    std::vector<int> ns;
    for (int n = L % 2; n <= L; n += 2) ns.push_back(n);
    return ns;
}

/// B_{2L} enters B^n_{L,L} affinely; the check assembles the linear part, whose rank is independent
/// of the lower coefficients, and records the offset they induce.
inline RankReport check_lemma_injectivity(int L, const std::optional<DistributionCoefficients>& lower = std::nullopt,
                                          std::vector<int> ns = {}, double threshold = 1e-8) {
    if (L < 1) throw DomainError("check_lemma_injectivity: L must be positive");
    if (ns.empty()) ns = lemma_n_list(L);
    RankReport r = rank_report("injectivity", L, lemma_injectivity_matrix(L, ns), 4 * L + 1, threshold);
    r.extra["n"] = ns;
    if (lower) {
        const BBlocks b = assemble_b_blocks(lower->truncated(std::min(lower->P, 2 * L - 2)), L);
        double off = 0;
        for (int n : ns) off += b.block(n, L, L).squaredNorm();
        r.extra["offset_norm"] = std::sqrt(off);
    }
    return r;
}

/// Generic complex coefficients on even p in [2, 2L-2]; conjugate symmetry and normalization dropped.
inline DistributionCoefficients generic_lower_coefficients(int L, std::uint64_t seed) {
    DistributionCoefficients d = DistributionCoefficients::uniform(2 * L - 2);
    d.set(0, 0, 0.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    for (int p = 2; p <= 2 * L - 2; p += 2)
        for (int u = -p; u <= p; ++u) d.set(p, u, cplx(g(rng), g(rng)));
    return d;
}

/// Horizontal concatenation (B^n_{L,l'} : 0 <= l' < L, n = L = l' mod 2, |n| <= l').
inline MatrixXcd lemma_concatenation_matrix(int L, const DistributionCoefficients& b, std::vector<std::pair<int, int>>* cols = nullptr) {
    const BBlocks bb = assemble_b_blocks(b, L);
    std::vector<MatrixXcd> parts;
    for (int lp = L % 2; lp < L; lp += 2)
        for (int n = -lp; n <= lp; ++n) {
            if (((n - L) % 2 + 2) % 2 != 0) continue;
            parts.push_back(bb.block(n, L, lp));
            if (cols) cols->emplace_back(n, lp);
        }
    Eigen::Index w = 0;
    for (const auto& p : parts) w += p.cols();
    MatrixXcd out(2 * L + 1, w);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p.cols()) = p;
        c += p.cols();
    }
    return out;
}

inline RankReport check_lemma_column_rank(int L, std::uint64_t seed, double threshold = 1e-8) {
    if (L < 4) throw DomainError("check_lemma_column_rank: requires L >= 4");
    const auto b = generic_lower_coefficients(L, seed);
    RankReport r = rank_report("column_rank", L, lemma_concatenation_matrix(L, b), 2 * L + 1, threshold);
    r.extra["seed"] = seed;
    r.extra["note"] = "target is rank 2L+1, i.e. full row rank of the wide concatenation";
    return r;
}

struct SparseInstanceReport {
    RankReport rank;
    double min_dominance_margin = 0;  ///< min over columns of |a_jj| - sum_{i != j} |a_ij|
    bool diagonally_dominant = false;
};

/// Sparse instance of the proof for L >= 6: only B_{2L-2,2} (large) and B_{2L-4,-2L+7} (small) nonzero;
/// the leading square block of [B^n_{L,L-2} | B^n_{L,L-4}] at n = L mod 2.
inline SparseInstanceReport check_lemma_sparse_instance(int L, double large = 1.0, double small = 1e-3,
                                                        double threshold = 1e-8) {
    if (L < 6) throw DomainError("check_lemma_sparse_instance: requires L >= 6");
    DistributionCoefficients b = DistributionCoefficients::uniform(2 * L - 2);
    b.set(0, 0, 0.0);
    b.set(2 * L - 2, 2, large);
    b.set(2 * L - 4, -2 * L + 7, small);
    const int n = L % 2;
    const BBlocks bb = assemble_b_blocks(b, L);
    MatrixXcd cat(2 * L + 1, (2 * L - 3) + (2 * L - 7));
    cat << bb.block(n, L, L - 2), bb.block(n, L, L - 4);
    const MatrixXcd sq = cat.leftCols(2 * L + 1);
    SparseInstanceReport rep;
    rep.rank = rank_report("sparse_instance", L, sq, 2 * L + 1, threshold);
    rep.min_dominance_margin = std::numeric_limits<double>::infinity();
    for (int j = 0; j < sq.cols(); ++j) {
        double off = 0;
        for (int i = 0; i < sq.rows(); ++i)
            if (i != j) off += std::abs(sq(i, j));
        rep.min_dominance_margin = std::min(rep.min_dominance_margin, std::abs(sq(j, j)) - off);
    }
    rep.diagonally_dominant = rep.min_dominance_margin > 0;
    rep.rank.extra = {{"n", n}, {"large", large}, {"small", small}, {"min_dominance_margin", rep.min_dominance_margin}};
    return rep;
}

struct NonvanishingReport {
    double min_cg = std::numeric_limits<double>::infinity();
    long long cg_count = 0;
    double min_n = std::numeric_limits<double>::infinity();
    double max_n_closed_form_error = 0;
    long long n_count = 0;
    int max_l_cg = 6;
    int max_l_n = 12;

    bool passed(double floor = 1e-12) const { return min_cg > floor && min_n > floor && max_n_closed_form_error < 1e-12; }
};

/// Closed form of the calligraphic N constant for l = n (mod 2), |n| <= l.
inline double cal_n_closed_form(int l, int n) {
    const int a = (l + n) / 2, b = (l - n) / 2;
    const double lg = 0.5 * (log_factorial(l + n) + log_factorial(l - n)) - log_factorial(a) - log_factorial(b);
    return sign_pow(a) / std::pow(2.0, l) * std::sqrt((2 * l + 1) / (4 * kPi)) * std::exp(lg);
}

/// C_{l+l'}(l,l',m,m',n,n') over all admissible tuples with l, l' <= max_l_cg, and N_l^n for
/// l = n (mod 2), |n| <= l <= max_l_n against the closed form.
inline NonvanishingReport check_nonvanishing(int max_l_cg = 6, int max_l_n = 12) {
    NonvanishingReport r;
    r.max_l_cg = max_l_cg;
    r.max_l_n = max_l_n;
    for (int l = 0; l <= max_l_cg; ++l)
        for (int lp = 0; lp <= max_l_cg; ++lp)
            for (int m = -l; m <= l; ++m)
                for (int mp = -lp; mp <= lp; ++mp) {
                    const double c1 = std::abs(clebsch_gordan(l, m, lp, mp, l + lp, m + mp));
                    for (int n = -l; n <= l; ++n)
                        for (int np = -lp; np <= lp; ++np) {
                            const double v = c1 * std::abs(clebsch_gordan(l, n, lp, np, l + lp, n + np));
                            r.min_cg = std::min(r.min_cg, v);
                            ++r.cg_count;
                        }
                }
    for (int l = 0; l <= max_l_n; ++l)
        for (int n = -l; n <= l; ++n) {
            if (((l - n) % 2 + 2) % 2 != 0) continue;
            const double v = cal_n_const(l, n);
            const double cf = cal_n_closed_form(l, n);
            r.min_n = std::min(r.min_n, std::abs(v));
            r.max_n_closed_form_error = std::max(r.max_n_closed_form_error, std::abs(v - cf) / std::abs(cf));
            ++r.n_count;
        }
    return r;
}

inline json nonvanishing_json(const NonvanishingReport& r) {
    return {{"min_cg_top_coupling", r.min_cg}, {"cg_tuples", r.cg_count}, {"max_l_cg", r.max_l_cg},
            {"min_abs_N", r.min_n},            {"N_values", r.n_count},   {"max_l_N", r.max_l_n},
            {"N_closed_form_max_rel_error", r.max_n_closed_form_error}, {"passed", r.passed()}};
}

}  // namespace modm
