#pragma once

// Scalar special functions and rotation-group kernels.
//
// Conventions:
//   Y_l^m(theta, phi) = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!) P_l^m(cos theta) e^{i m phi}
//   with Ferrers functions P_l^m carrying the (-1)^m phase.
//   Rotations are R = Rz(alpha) Ry(beta) Rz(gamma) (ZYZ, active).
//   U^l(R)_{mn} = e^{i m alpha} d^l_{mn}(beta) e^{i n gamma}, chosen so that
//   Y_l^m(R x) = sum_n U^l_{mn}(R) Y_l^n(x).

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <vector>

#include <gsl/gsl_integration.h>

#include "modm/errors.hpp"

namespace modm {

using cplx = std::complex<double>;
using Eigen::MatrixXcd;
using Eigen::MatrixXd;
using Eigen::VectorXcd;
using Eigen::VectorXd;

inline constexpr double kPi = std::numbers::pi;
inline constexpr int kMaxDegree = 64;

namespace detail {

inline const std::vector<double>& log_factorial_table() {
    static const std::vector<double> table = [] {
        std::vector<double> t(4 * kMaxDegree + 8, 0.0);
        for (std::size_t i = 1; i < t.size(); ++i) t[i] = t[i - 1] + std::log(static_cast<double>(i));
        return t;
    }();
    return table;
}

inline void check_degree(int l, int m, const char* who) {
    if (l < 0 || l > kMaxDegree) throw DomainError(std::string(who) + ": degree out of range");
    if (m < -l || m > l) throw DomainError(std::string(who) + ": order out of range");
}

inline double parity_sign(int k) { return (k % 2 == 0) ? 1.0 : -1.0; }

}  // namespace detail

/// log(k!) for 0 <= k <= 4*kMaxDegree+7.
inline double log_factorial(int k) {
    const auto& t = detail::log_factorial_table();
    if (k < 0 || k >= static_cast<int>(t.size())) throw DomainError("log_factorial: argument out of range");
    return t[static_cast<std::size_t>(k)];
}

inline double sign_pow(int k) { return detail::parity_sign(k < 0 ? -k : k); }

/// Legendre polynomial P_l(x) by the three-term recurrence.
inline double legendre_p(int l, double x) {
    if (l < 0) throw DomainError("legendre_p: negative degree");
    if (std::abs(x) > 1.0 + 1e-12) throw DomainError("legendre_p: |x| > 1");
    if (l == 0) return 1.0;
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= l; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    return p1;
}

/// Ferrers associated Legendre function P_l^n(x) including the (-1)^n phase.
/// Negative orders use P_l^{-n} = (-1)^n (l-n)!/(l+n)! P_l^n.
inline double assoc_legendre_p(int l, int n, double x) {
    detail::check_degree(l, n, "assoc_legendre_p");
    if (std::abs(x) > 1.0 + 1e-12) throw DomainError("assoc_legendre_p: |x| > 1");
    x = std::clamp(x, -1.0, 1.0);
    if (n < 0) {
        const int k = -n;
        const double ratio = std::exp(log_factorial(l - k) - log_factorial(l + k));
        return sign_pow(k) * ratio * assoc_legendre_p(l, k, x);
    }
    // P_n^n = (-1)^n (2n-1)!! (1-x^2)^{n/2}
    const double s = std::sqrt((1.0 - x) * (1.0 + x));
    double pmm = 1.0;
    for (int k = 1; k <= n; ++k) pmm *= -(2.0 * k - 1.0) * s;
    if (l == n) return pmm;
    double pm1 = x * (2.0 * n + 1.0) * pmm;
    if (l == n + 1) return pm1;
    double pl = 0.0;
    for (int k = n + 2; k <= l; ++k) {
        pl = ((2.0 * k - 1.0) * x * pm1 - (k + n - 1.0) * pmm) / (k - n);
        pmm = pm1;
        pm1 = pl;
    }
    return pl;
}

/// Orthonormal complex spherical harmonic Y_l^m(theta, phi).
inline cplx spherical_harmonic(int l, int m, double theta, double phi) {
    detail::check_degree(l, m, "spherical_harmonic");
    const int am = std::abs(m);
    // normalized Legendre computed for |m| to avoid factorial overflow
    const double norm = std::sqrt((2.0 * l + 1.0) / (4.0 * kPi)) *
                        std::exp(0.5 * (log_factorial(l - am) - log_factorial(l + am)));
    double val = norm * assoc_legendre_p(l, am, std::cos(theta));
    if (m < 0) val *= sign_pow(am);
    return val * std::polar(1.0, m * phi);
}

/// All Y_l^m(theta, phi) for 0 <= l <= L, packed at index l*l + l + m.
inline VectorXcd spherical_harmonics_all(int L, double theta, double phi) {
    VectorXcd out((L + 1) * (L + 1));
    for (int l = 0; l <= L; ++l)
        for (int m = -l; m <= l; ++m) out(l * l + l + m) = spherical_harmonic(l, m, theta, phi);
    return out;
}

/// Y_l^m evaluated at a Cartesian direction (need not be normalized, must be nonzero).
inline VectorXcd spherical_harmonics_all(int L, const Eigen::Vector3d& v) {
    const double r = v.norm();
    const double theta = std::acos(std::clamp(v.z() / r, -1.0, 1.0));
    const double phi = std::atan2(v.y(), v.x());
    return spherical_harmonics_all(L, theta, phi);
}

/// N_l^n = sqrt((2l+1)/4pi) sqrt((l-n)!/(l+n)!) P_l^n(0); exactly zero for odd l+n.
inline double n_const(int l, int n) {
    detail::check_degree(l, n, "n_const");
    if ((l + n) % 2 != 0) return 0.0;
    const double ratio = std::exp(0.5 * (log_factorial(l - n) - log_factorial(l + n)));
    return std::sqrt((2.0 * l + 1.0) / (4.0 * kPi)) * ratio * assoc_legendre_p(l, n, 0.0);
}

/// Script-N: N_l^n restricted to l = n (mod 2) and l >= |n|; zero elsewhere.
inline double cal_n_const(int l, int n) {
    if (l < 0 || l < std::abs(n)) return 0.0;
    if (((l - n) % 2 + 2) % 2 != 0) return 0.0;
    return n_const(l, n);
}

/// Clebsch-Gordan coefficient C(l1,m1; l2,m2 | L,M) via the Racah factorial sum.
inline double clebsch_gordan(int l1, int m1, int l2, int m2, int L, int M) {
    if (M != m1 + m2) return 0.0;
    if (l1 < 0 || l2 < 0 || L < 0) return 0.0;
    if (std::abs(m1) > l1 || std::abs(m2) > l2 || std::abs(M) > L) return 0.0;
    if (L < std::abs(l1 - l2) || L > l1 + l2) return 0.0;
    const double lpre = 0.5 * (std::log(2.0 * L + 1.0) + log_factorial(L + l1 - l2) + log_factorial(L - l1 + l2) +
                               log_factorial(l1 + l2 - L) - log_factorial(l1 + l2 + L + 1) +
                               log_factorial(L + M) + log_factorial(L - M) + log_factorial(l1 - m1) +
                               log_factorial(l1 + m1) + log_factorial(l2 - m2) + log_factorial(l2 + m2));
    const int kmin = std::max({0, l2 - L - m1, l1 - L + m2});
    const int kmax = std::min({l1 + l2 - L, l1 - m1, l2 + m2});
    double sum = 0.0;
    for (int k = kmin; k <= kmax; ++k) {
        const double lden = log_factorial(k) + log_factorial(l1 + l2 - L - k) + log_factorial(l1 - m1 - k) +
                            log_factorial(l2 + m2 - k) + log_factorial(L - l2 + m1 + k) +
                            log_factorial(L - l1 - m2 + k);
        sum += sign_pow(k) * std::exp(lpre - lden);
    }
    return sum;
}

/// Product C(l,m; l',m' | l'',m+m') C(l,n; l',n' | l'',n+n').
inline double cg_product(int l, int lp, int m, int mp, int n, int np, int lpp) {
    const double a = clebsch_gordan(l, m, lp, mp, lpp, m + mp);
    if (a == 0.0) return 0.0;
    return a * clebsch_gordan(l, n, lp, np, lpp, n + np);
}

/// ZYZ Euler angles of an active rotation R = Rz(alpha) Ry(beta) Rz(gamma).
struct Euler {
    double alpha = 0.0;
    double beta = 0.0;
    double gamma = 0.0;
};

inline Eigen::Matrix3d rot_z(double a) {
    Eigen::Matrix3d r;
    r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
    return r;
}

inline Eigen::Matrix3d rot_y(double b) {
    Eigen::Matrix3d r;
    r << std::cos(b), 0, std::sin(b), 0, 1, 0, -std::sin(b), 0, std::cos(b);
    return r;
}

inline Eigen::Matrix3d rotation_matrix(const Euler& e) {
    return rot_z(e.alpha) * rot_y(e.beta) * rot_z(e.gamma);
}

/// Inverse of rotation_matrix; beta in [0, pi]. At the poles gamma is set to 0.
inline Euler euler_from_matrix(const Eigen::Matrix3d& R) {
    Euler e;
    const double cb = std::clamp(R(2, 2), -1.0, 1.0);
    e.beta = std::acos(cb);
    const double sb = std::sqrt(R(0, 2) * R(0, 2) + R(1, 2) * R(1, 2));
    if (sb > 1e-12) {
        e.alpha = std::atan2(R(1, 2), R(0, 2));
        e.gamma = std::atan2(R(2, 1), -R(2, 0));
    } else if (cb > 0) {
        e.alpha = std::atan2(R(1, 0), R(0, 0));
        e.gamma = 0.0;
    } else {
        e.alpha = std::atan2(-R(1, 0), -R(0, 0));
        e.gamma = 0.0;
    }
    return e;
}

inline Eigen::Matrix3d reflection_j() { return Eigen::Vector3d(1.0, 1.0, -1.0).asDiagonal(); }

/// Wigner small-d matrix d^l_{m'm}(beta), rows m', columns m, indices shifted by l.
inline MatrixXd wigner_d(int l, double beta) {
    detail::check_degree(l, 0, "wigner_d");
    const int dim = 2 * l + 1;
    MatrixXd d(dim, dim);
    const double c = std::cos(0.5 * beta), s = std::sin(0.5 * beta);
    for (int mp = -l; mp <= l; ++mp) {
        for (int m = -l; m <= l; ++m) {
            const double lnum = 0.5 * (log_factorial(l + mp) + log_factorial(l - mp) + log_factorial(l + m) +
                                       log_factorial(l - m));
            const int smin = std::max(0, m - mp);
            const int smax = std::min(l + m, l - mp);
            double sum = 0.0;
            for (int k = smin; k <= smax; ++k) {
                const double lden = log_factorial(l + m - k) + log_factorial(k) + log_factorial(mp - m + k) +
                                    log_factorial(l - mp - k);
                const int pc = 2 * l + m - mp - 2 * k;
                const int ps = mp - m + 2 * k;
                sum += sign_pow(mp - m + k) * std::exp(lnum - lden) * std::pow(c, pc) * std::pow(s, ps);
            }
            d(mp + l, m + l) = sum;
        }
    }
    return d;
}

/// U^l(R) for R given by ZYZ Euler angles.
inline MatrixXcd wigner_u(int l, const Euler& e) {
    const MatrixXd d = wigner_d(l, e.beta);
    const int dim = 2 * l + 1;
    MatrixXcd u(dim, dim);
    for (int m = -l; m <= l; ++m)
        for (int n = -l; n <= l; ++n)
            u(m + l, n + l) = std::polar(1.0, m * e.alpha + n * e.gamma) * d(m + l, n + l);
    return u;
}

inline MatrixXcd wigner_u(int l, const Eigen::Matrix3d& R) { return wigner_u(l, euler_from_matrix(R)); }

/// Column n = 0 of U^l(R), computed without the full matrix.
inline VectorXcd wigner_u_column0(int l, const Euler& e) {
    const MatrixXd d = wigner_d(l, e.beta);
    VectorXcd col(2 * l + 1);
    for (int m = -l; m <= l; ++m) col(m + l) = std::polar(1.0, m * e.alpha) * d(m + l, l);
    return col;
}

/// Action of J = diag(1,1,-1) on degree-l coefficients: diag((-1)^{l+m}).
inline MatrixXcd wigner_u_reflection(int l) {
    MatrixXcd u = MatrixXcd::Zero(2 * l + 1, 2 * l + 1);
    for (int m = -l; m <= l; ++m) u(m + l, m + l) = sign_pow(l + m);
    return u;
}

/// U^l(J^eps S) for an element of O(3) written as J^eps times a rotation.
inline MatrixXcd wigner_u_o3(int l, const Euler& s, int eps) {
    MatrixXcd u = wigner_u(l, s);
    if (eps != 0) u = wigner_u_reflection(l) * u;
    return u;
}

/// Complex-to-real basis change Q_l: rows are real-basis indices, columns complex orders.
inline MatrixXcd q_matrix(int l) {
    const int dim = 2 * l + 1;
    const double h = 1.0 / std::sqrt(2.0);
    const cplx I(0.0, 1.0);
    MatrixXcd q = MatrixXcd::Zero(dim, dim);
    for (int m = -l; m <= l; ++m) {
        const int j = m + l;
        if (m < 0) {
            q(j, j) = I * h;
            q(-m + l, j) = h;
        } else if (m == 0) {
            q(j, j) = 1.0;
        } else {
            q(j, j) = sign_pow(m) * h;
            q(-m + l, j) = -sign_pow(m) * I * h;
        }
    }
    return q;
}

/// Gauss-Legendre nodes and weights on [-1, 1].
struct GaussLegendre {
    std::vector<double> x;
    std::vector<double> w;
};

inline GaussLegendre gauss_legendre(int order) {
    if (order < 1) throw DomainError("gauss_legendre: order must be positive");
    gsl_integration_glfixed_table* t = gsl_integration_glfixed_table_alloc(static_cast<std::size_t>(order));
    if (t == nullptr) throw DomainError("gauss_legendre: table allocation failed");
    GaussLegendre gl;
    gl.x.resize(static_cast<std::size_t>(order));
    gl.w.resize(static_cast<std::size_t>(order));
    for (int i = 0; i < order; ++i)
        gsl_integration_glfixed_point(-1.0, 1.0, static_cast<std::size_t>(i), &gl.x[i], &gl.w[i], t);
    gsl_integration_glfixed_table_free(t);
    return gl;
}

}  // namespace modm
