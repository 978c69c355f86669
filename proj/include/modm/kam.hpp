#pragma once

#include <Eigen/Dense>

#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "modm/errors.hpp"
#include "modm/moments.hpp"
#include "modm/special_fns.hpp"

namespace modm {

struct KamOptions {
    int quadrature_order = -1;        ///< Gauss-Legendre order in cos(psi); default 2L+2
    double imag_tol = 1e-9;           ///< imaginary residue allowed in C_l, relative to max_l ||C_l||
    double rank_excess_tol = 1e-6;    ///< relative energy allowed outside the top 2l+1 eigenpairs
    bool check_uniform = true;        ///< raise on residues that indicate non-uniform input
    double clamp = 1e-12;             ///< eigenvalues below clamp * lambda_max treated as zero
};

struct KamDiagnostics {
    std::vector<double> imag_residue;   ///< per l, ||Im C_l|| / max_l ||C_l||
    std::vector<double> rank_excess;    ///< per l, energy beyond rank 2l+1 relative to ||C||
    std::vector<double> min_eigenvalue; ///< per l, relative to lambda_max (negative values are noise)
    std::vector<VectorXd> spectrum;     ///< per l, descending eigenvalues
    double a0_sign_cosine = 0.0;
    bool a0_sign_informative = true;
};

/// Step-1 factors: A_tilde_l determined up to a right real orthogonal factor.
struct KamFactors {
    int L = 0;
    std::vector<double> radii;
    std::vector<MatrixXd> C;        ///< extracted C_l, real symmetric
    std::vector<MatrixXcd> A;       ///< A_tilde_l, real (even l) or imaginary (odd l)
    KamDiagnostics diag;

    /// [A_0 | ... | A_L].
    MatrixXcd stacked() const {
        MatrixXcd out(static_cast<Eigen::Index>(radii.size()), (L + 1) * (L + 1));
        for (int l = 0; l <= L; ++l) out.middleCols(l * l, 2 * l + 1) = A[static_cast<std::size_t>(l)];
        return out;
    }
};

/// C_l(r_i, r_j) = 2 pi (2l+1) int_{-1}^{1} m2(r_i, r_j, acos x) P_l(x) dx, with real and
/// imaginary parts returned separately before symmetrization.
inline std::vector<MatrixXcd> extract_cl_raw(const MomentTables& mt, int L, int order) {
    const auto gl = gauss_legendre(order);
    const int mr = mt.grid.m_r();
    std::vector<MatrixXcd> out(static_cast<std::size_t>(L + 1), MatrixXcd::Zero(mr, mr));
    for (std::size_t q = 0; q < gl.x.size(); ++q) {
        const double psi = std::acos(gl.x[q]);
        MatrixXcd m2 = MatrixXcd::Zero(mr, mr);
        for (int n = -mt.n_max; n <= mt.n_max; ++n) m2 += std::polar(1.0, n * psi) * mt.g(n);
        for (int l = 0; l <= L; ++l)
            out[static_cast<std::size_t>(l)] += (2 * kPi * (2 * l + 1) * gl.w[q] * legendre_p(l, gl.x[q])) * m2;
    }
    return out;
}

namespace detail {

struct CheckedCl {
    MatrixXd C;
    double imag = 0;
};

inline CheckedCl symmetrize_cl(const MatrixXcd& raw, double scale) {
    CheckedCl r;
    r.imag = scale > 0 ? raw.imag().norm() / scale : 0.0;
    r.C = 0.5 * (raw.real() + raw.real().transpose());
    return r;
}

}  // namespace detail

/// Extracted and symmetrized C_l for l = 0..L.
inline std::vector<MatrixXd> extract_cl(const MomentTables& mt, int L, const KamOptions& opt = {},
                                        std::vector<double>* imag_residue = nullptr) {
    if (mt.n_max < std::min(L, mt.L)) throw DomainError("extract_cl: moment tables do not cover |n| <= L");
    const int order = opt.quadrature_order > 0 ? opt.quadrature_order : 2 * L + 2;
    const auto raw = extract_cl_raw(mt, L, order);
    double scale = 0;
    for (const auto& r : raw) scale = std::max(scale, r.norm());
    std::vector<MatrixXd> out;
    for (int l = 0; l <= L; ++l) {
        const auto c = detail::symmetrize_cl(raw[static_cast<std::size_t>(l)], scale);
        if (opt.check_uniform && c.imag > opt.imag_tol)
            throw ValidationError("extract_cl: imaginary residue " + std::to_string(c.imag) + " at l=" +
                                  std::to_string(l) + " (input is not a uniform-orientation moment)");
        if (imag_residue) imag_residue->push_back(c.imag);
        out.push_back(c.C);
    }
    return out;
}

struct FactorResult {
    MatrixXcd A;
    VectorXd spectrum;
    double rank_excess = 0;
    double min_eigenvalue = 0;
};

/// Best PSD rank-(2l+1) factor of C: top eigenpairs, clamped, times i for odd l.
inline FactorResult factor_cl_full(const MatrixXd& c, int l, double clamp = 1e-12) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (c + c.transpose()));
    const VectorXd ev = es.eigenvalues().reverse();
    const MatrixXd V = es.eigenvectors().rowwise().reverse();
    const int k = std::min<int>(2 * l + 1, static_cast<int>(c.rows()));
    const double lmax = std::max(ev.size() ? ev(0) : 0.0, 0.0);
    MatrixXd r = MatrixXd::Zero(c.rows(), 2 * l + 1);
    for (int j = 0; j < k; ++j) {
        const double lam = ev(j) > clamp * lmax ? ev(j) : 0.0;
        r.col(j) = std::sqrt(lam) * V.col(j);
    }
    FactorResult f;
    f.spectrum = ev;
    f.A = (l % 2 == 0) ? r.cast<cplx>() : (cplx(0, 1) * r.cast<cplx>()).eval();
    const double cn = c.norm();
    f.rank_excess = cn > 0 ? (c - r * r.transpose()).norm() / cn : 0.0;
    f.min_eigenvalue = lmax > 0 ? ev(ev.size() - 1) / lmax : 0.0;
    return f;
}

inline MatrixXcd factor_cl(const MatrixXd& c, int l, double clamp = 1e-12) { return factor_cl_full(c, l, clamp).A; }

/// Flips A_0 so that <A_0, m1 / N_0^0> > 0; returns the cosine of the angle.
inline double fix_a0_sign(MatrixXcd& a0, const VectorXcd& m1_uniform) {
    const VectorXcd target = m1_uniform / n_const(0, 0);
    const double na = a0.norm(), nt = target.norm();
    if (na == 0 || nt == 0) return 0.0;
    const double c = a0.col(0).dot(target).real() / (na * nt);
    if (c < 0) a0 = -a0;
    return std::abs(c);
}

inline KamFactors run_kam(const MomentTables& m2_uniform, const VectorXcd& m1_uniform, int L,
                          const KamOptions& opt = {}, std::ostream* warn = &std::cerr) {
    KamFactors k;
    k.L = L;
    k.radii = m2_uniform.grid.radii;
    k.C = extract_cl(m2_uniform, L, opt, &k.diag.imag_residue);
    for (int l = 0; l <= L; ++l) {
        auto f = factor_cl_full(k.C[static_cast<std::size_t>(l)], l, opt.clamp);
        k.diag.rank_excess.push_back(f.rank_excess);
        k.diag.min_eigenvalue.push_back(f.min_eigenvalue);
        k.diag.spectrum.push_back(f.spectrum);
        k.A.push_back(f.A);
    }
    if (opt.check_uniform && m2_uniform.source != "empirical")
        for (int l = 0; l <= L; ++l)
            if (k.diag.rank_excess[static_cast<std::size_t>(l)] > opt.rank_excess_tol)
                throw ValidationError("run_kam: C_" + std::to_string(l) + " has rank excess " +
                                      std::to_string(k.diag.rank_excess[static_cast<std::size_t>(l)]) +
                                      " beyond 2l+1 (input is not a uniform-orientation moment)");
    k.diag.a0_sign_cosine = fix_a0_sign(k.A[0], m1_uniform);
    k.diag.a0_sign_informative = k.diag.a0_sign_cosine >= 0.1;
    if (!k.diag.a0_sign_informative && warn)
        *warn << "warning: m1 is nearly orthogonal to A_0 (|cos| = " << k.diag.a0_sign_cosine
              << "); the l=0 sign is unreliable\n";
    return k;
}

/// Procrustes residual min_O ||A_tilde - A_check O^T|| / ||A_check|| for real orthogonal O,
/// where A_check = A Q^H is the real-basis coefficient matrix.
inline double gauge_residual(const MatrixXcd& a_tilde, const MatrixXcd& a_check, MatrixXd* o_out = nullptr) {
    // O^T is the polar factor of Re(Ac^H A~)
    const MatrixXd m = (a_check.adjoint() * a_tilde).real();
    Eigen::JacobiSVD<MatrixXd> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const MatrixXd ot = svd.matrixU() * svd.matrixV().transpose();  // O^T
    if (o_out) *o_out = ot.transpose();
    const double nrm = a_check.norm();
    return nrm > 0 ? (a_tilde - a_check * ot).norm() / nrm : (a_tilde).norm();
}

inline json kam_diagnostics_json(const KamFactors& k, const KamOptions& opt = {}) {
    json j;
    j["imag_residue"] = k.diag.imag_residue;
    j["rank_excess"] = k.diag.rank_excess;
    j["min_eigenvalue_relative"] = k.diag.min_eigenvalue;
    j["a0_sign_cosine"] = k.diag.a0_sign_cosine;
    j["eigen_truncation"] = {{"rank", "2l+1"}, {"clamp", opt.clamp}};
    return j;
}

/// Kam factors in the coefficient file layout, flagged as determined up to O.
inline void write_kam_factors(const std::filesystem::path& path, const KamFactors& k,
                              const json& provenance = json::object()) {
    VolumeCoefficients v = VolumeCoefficients::zeros(k.L, k.radii);
    for (int l = 0; l <= k.L; ++l) v.A[static_cast<std::size_t>(l)] = k.A[static_cast<std::size_t>(l)];
    v.real_volume = false;
    json prov = provenance;
    prov["up_to_O"] = true;
    prov["kam"] = kam_diagnostics_json(k);
    write_volume(path, v, prov);
}

}  // namespace modm
