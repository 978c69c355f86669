#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "modm/errors.hpp"
#include "modm/io.hpp"
#include "modm/special_fns.hpp"

namespace modm {

/// Radii and equispaced angles on which images and moments are sampled.
struct PolarGrid {
    std::vector<double> radii;
    int n_phi = 0;
    double r_max = 0.5;

    int m_r() const { return static_cast<int>(radii.size()); }
    double phi(int s) const { return 2.0 * kPi * s / n_phi; }
    /// Trapezoid weight of one angular node (all nodes share it).
    double angle_weight() const { return 2.0 * kPi / n_phi; }

    static PolarGrid equispaced(int m_r, int n_phi, double r_max = 0.5) {
        if (m_r < 1 || n_phi < 1) throw DomainError("PolarGrid: sizes must be positive");
        PolarGrid g;
        g.n_phi = n_phi;
        g.r_max = r_max;
        for (int k = 1; k <= m_r; ++k) g.radii.push_back(r_max * k / m_r);
        return g;
    }

    static PolarGrid gauss_legendre_radial(int m_r, int n_phi, double r_max = 0.5) {
        PolarGrid g;
        g.n_phi = n_phi;
        g.r_max = r_max;
        const auto gl = gauss_legendre(m_r);
        for (int k = 0; k < m_r; ++k) g.radii.push_back(0.5 * r_max * (gl.x[static_cast<std::size_t>(k)] + 1.0));
        return g;
    }

    bool same_as(const PolarGrid& o) const { return radii == o.radii && n_phi == o.n_phi && r_max == o.r_max; }
};

/// A_l(r_k) for l = 0..L; A[l] is M_r x (2l+1), column m+l.
struct VolumeCoefficients {
    int L = 0;
    std::vector<double> radii;
    std::vector<MatrixXcd> A;
    bool real_volume = true;
    double condition_number = std::numeric_limits<double>::quiet_NaN();

    int m_r() const { return static_cast<int>(radii.size()); }
    int width() const { return (L + 1) * (L + 1); }

    static VolumeCoefficients zeros(int L, std::vector<double> radii) {
        VolumeCoefficients v;
        v.L = L;
        v.radii = std::move(radii);
        for (int l = 0; l <= L; ++l) v.A.push_back(MatrixXcd::Zero(v.m_r(), 2 * l + 1));
        return v;
    }

    /// Real-basis coefficients A_l Q_l^H.
    MatrixXcd real_basis(int l) const { return A[static_cast<std::size_t>(l)] * q_matrix(l).adjoint(); }

    static VolumeCoefficients from_real_basis(int L, std::vector<double> radii, const std::vector<MatrixXcd>& real) {
        VolumeCoefficients v;
        v.L = L;
        v.radii = std::move(radii);
        for (int l = 0; l <= L; ++l) v.A.push_back(real[static_cast<std::size_t>(l)] * q_matrix(l));
        return v;
    }

    /// [A_0 | ... | A_L], M_r x (L+1)^2.
    MatrixXcd stacked() const {
        MatrixXcd out(m_r(), width());
        for (int l = 0; l <= L; ++l) out.middleCols(l * l, 2 * l + 1) = A[static_cast<std::size_t>(l)];
        return out;
    }

    /// Coefficients of x -> Phi(J^eps S x): A_l U^l(J^eps S).
    VolumeCoefficients transformed(const Euler& s, int eps) const {
        VolumeCoefficients v = *this;
        for (int l = 0; l <= L; ++l) v.A[static_cast<std::size_t>(l)] = A[static_cast<std::size_t>(l)] * wigner_u_o3(l, s, eps);
        return v;
    }

    double norm() const {
        double s = 0;
        for (const auto& a : A) s += a.squaredNorm();
        return std::sqrt(s);
    }

    /// Phi_hat(r_k, direction) from the complex expansion.
    cplx evaluate(int k, const Eigen::Vector3d& dir) const {
        const VectorXcd y = spherical_harmonics_all(L, dir);
        cplx s = 0;
        for (int l = 0; l <= L; ++l)
            for (int m = -l; m <= l; ++m) s += A[static_cast<std::size_t>(l)](k, m + l) * y(l * l + l + m);
        return s;
    }
};

/// Coefficients B_{p,u} of an in-plane-uniform density; B[p](u+p).
struct DistributionCoefficients {
    int P = 0;
    std::vector<VectorXcd> B;

    static DistributionCoefficients uniform(int P) {
        DistributionCoefficients d;
        d.P = P;
        for (int p = 0; p <= P; ++p) d.B.push_back(VectorXcd::Zero(2 * p + 1));
        d.B[0](0) = 1.0;
        return d;
    }

    cplx get(int p, int u) const {
        if (p < 0 || p > P || u < -p || u > p) return 0.0;
        return B[static_cast<std::size_t>(p)](u + p);
    }

    void set(int p, int u, cplx v) { B[static_cast<std::size_t>(p)](u + p) = v; }

    DistributionCoefficients truncated(int new_p) const {
        DistributionCoefficients d = uniform(new_p);
        for (int p = 0; p <= std::min(P, new_p); ++p) d.B[static_cast<std::size_t>(p)] = B[static_cast<std::size_t>(p)];
        return d;
    }

    /// Coefficients of R -> rho(J^eps S R J^eps): B_p U^p(J^eps S) (valid when odd p vanish).
    DistributionCoefficients transformed(const Euler& s, int eps) const {
        DistributionCoefficients d = *this;
        for (int p = 0; p <= P; ++p)
            d.B[static_cast<std::size_t>(p)] =
                (B[static_cast<std::size_t>(p)].transpose() * wigner_u_o3(p, s, eps)).transpose();
        return d;
    }

    double norm_above(int p0) const {
        double s = 0;
        for (int p = p0; p <= P; ++p) s += B[static_cast<std::size_t>(p)].squaredNorm();
        return std::sqrt(s);
    }
};

/// Real orthogonal blocks O_0..O_L.
struct BlockOrthogonal {
    std::vector<MatrixXd> O;

    int L() const { return static_cast<int>(O.size()) - 1; }

    static BlockOrthogonal identity(int L) {
        BlockOrthogonal b;
        for (int l = 0; l <= L; ++l) b.O.push_back(MatrixXd::Identity(2 * l + 1, 2 * l + 1));
        return b;
    }

    /// Haar-like random orthogonal blocks (QR of a Gaussian with sign fix); O_0 and O_1 pinned to identity.
    static BlockOrthogonal random(int L, std::mt19937_64& rng, bool pin = true) {
        std::normal_distribution<double> g;
        BlockOrthogonal b = identity(L);
        for (int l = pin ? 2 : 0; l <= L; ++l) {
            const int d = 2 * l + 1;
            MatrixXd x(d, d);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) x(i, j) = g(rng);
            Eigen::HouseholderQR<MatrixXd> qr(x);
            MatrixXd q = qr.householderQ();
            const MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
            for (int j = 0; j < d; ++j)
                if (r(j, j) < 0) q.col(j) *= -1.0;
            b.O[static_cast<std::size_t>(l)] = q;
        }
        return b;
    }

    /// blockdiag(O_0, ..., O_L).
    MatrixXd dense() const {
        const int n = (L() + 1) * (L() + 1);
        MatrixXd out = MatrixXd::Zero(n, n);
        for (int l = 0; l <= L(); ++l) out.block(l * l, l * l, 2 * l + 1, 2 * l + 1) = O[static_cast<std::size_t>(l)];
        return out;
    }
};

/// blockdiag(Q_0, ..., Q_L).
inline MatrixXcd q_block(int L) {
    const int n = (L + 1) * (L + 1);
    MatrixXcd out = MatrixXcd::Zero(n, n);
    for (int l = 0; l <= L; ++l) out.block(l * l, l * l, 2 * l + 1, 2 * l + 1) = q_matrix(l);
    return out;
}

// ---------------------------------------------------------------------------
// Random generators

struct RandomVolumeOptions {
    int extra_degree = 2;       ///< polynomial degree above (L+1)^2
    double decay = 0.9;         ///< geometric decay of Chebyshev coefficients
    double min_width = 0.35;    ///< Gaussian envelope width range, in units of r_max
    double max_width = 0.8;
    double max_condition = 1e10;
};

namespace detail {

inline double chebyshev_series(const std::vector<double>& c, double x) {
    // Clenshaw recurrence
    double b1 = 0, b2 = 0;
    for (std::size_t k = c.size(); k-- > 1;) {
        const double b0 = 2 * x * b1 - b2 + c[k];
        b2 = b1;
        b1 = b0;
    }
    return x * b1 - b2 + c[0];
}

inline double singular_condition(const MatrixXcd& a) {
    Eigen::JacobiSVD<MatrixXcd> svd(a);
    const auto& s = svd.singularValues();
    if (s.size() == 0) return std::numeric_limits<double>::infinity();
    const double smin = s(s.size() - 1);
    return smin > 0 ? s(0) / smin : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/// Smooth random radial profiles with real-volume parity and certified full column rank.
inline VolumeCoefficients random_volume(int L, const PolarGrid& grid, std::uint64_t seed,
                                        const RandomVolumeOptions& opt = {}) {
    if (L < 0) throw DomainError("random_volume: L must be nonnegative");
    const int width = (L + 1) * (L + 1);
    if (grid.m_r() < width) throw DomainError("random_volume: need M_r >= (L+1)^2");
    const int degree = width + opt.extra_degree;
    for (int attempt = 0; attempt < 10; ++attempt) {
        std::mt19937_64 rng(seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(attempt));
        std::normal_distribution<double> g;
        std::uniform_real_distribution<double> u(opt.min_width, opt.max_width);
        std::vector<MatrixXcd> real(static_cast<std::size_t>(L + 1));
        for (int l = 0; l <= L; ++l) {
            MatrixXcd a(grid.m_r(), 2 * l + 1);
            const cplx phase = (l % 2 == 0) ? cplx(1, 0) : cplx(0, 1);
            for (int m = 0; m < 2 * l + 1; ++m) {
                std::vector<double> c(static_cast<std::size_t>(degree + 1));
                for (int k = 0; k <= degree; ++k) c[static_cast<std::size_t>(k)] = g(rng) * std::pow(opt.decay, k);
                const double w = u(rng);
                for (int k = 0; k < grid.m_r(); ++k) {
                    const double t = grid.radii[static_cast<std::size_t>(k)] / grid.r_max;
                    a(k, m) = phase * detail::chebyshev_series(c, 2 * t - 1) * std::exp(-0.5 * t * t / (w * w));
                }
            }
            real[static_cast<std::size_t>(l)] = a;
        }
        VolumeCoefficients v = VolumeCoefficients::from_real_basis(L, grid.radii, real);
        v.real_volume = true;
        v.condition_number = detail::singular_condition(v.stacked());
        if (std::isfinite(v.condition_number) && v.condition_number < opt.max_condition) return v;
    }
    throw ValidationError("random_volume: could not generate a full-column-rank volume in 10 attempts");
}

struct RandomDistributionOptions {
    int components = 3;
    double uniform_weight = 0.25;  ///< weight of the flat component in the mixture
};

/// Legendre coefficients h_p = (2p+1)/2 int K(t) P_p(t) dt of the antipodally symmetrized
/// von Mises-Fisher kernel K(t) = kappa e^{kappa t} / sinh(kappa).
inline std::vector<double> vmf_legendre_coefficients(double kappa, int P) {
    const auto gl = gauss_legendre(std::max(64, 4 * P + static_cast<int>(4 * kappa)));
    std::vector<double> h(static_cast<std::size_t>(P + 1), 0.0);
    for (std::size_t i = 0; i < gl.x.size(); ++i) {
        const double t = gl.x[i];
        // 0.5 (K(t) + K(-t)) written with e^{-kappa} factored out for stability
        const double k = kappa < 1e-8 ? 1.0
                                      : kappa * (std::exp(kappa * (t - 1)) + std::exp(kappa * (-t - 1))) /
                                            (-std::expm1(-2 * kappa));
        for (int p = 0; p <= P; p += 2) h[static_cast<std::size_t>(p)] += 0.5 * (2 * p + 1) * gl.w[i] * k * legendre_p(p, t);
    }
    return h;
}

/// Random even-symmetric smooth density on the viewing sphere, projected to degree P.
inline DistributionCoefficients random_distribution(int P, std::uint64_t seed, double concentration,
                                                    const RandomDistributionOptions& opt = {}) {
    if (P < 2 || P % 2 != 0) throw DomainError("random_distribution: P must be even and >= 2");
    DistributionCoefficients d = DistributionCoefficients::uniform(P);
    if (concentration <= 0) return d;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0.5, 1.5);
    std::vector<double> w(static_cast<std::size_t>(opt.components));
    double wsum = 0;
    for (auto& x : w) wsum += (x = u(rng));
    for (auto& x : w) x *= (1.0 - opt.uniform_weight) / wsum;
    for (int k = 0; k < opt.components; ++k) {
        Eigen::Vector3d mu(g(rng), g(rng), g(rng));
        mu.normalize();
        const double kappa = concentration * u(rng);
        const auto h = vmf_legendre_coefficients(kappa, P);
        const VectorXcd y = spherical_harmonics_all(P, mu);
        for (int p = 2; p <= P; p += 2) {
            const double cp = std::sqrt(4 * kPi / (2 * p + 1));
            for (int uu = -p; uu <= p; ++uu)
                d.B[static_cast<std::size_t>(p)](uu + p) +=
                    w[static_cast<std::size_t>(k)] * h[static_cast<std::size_t>(p)] * cp * std::conj(y(p * p + p + uu));
        }
    }
    // enforce exact conjugate symmetry against rounding
    for (int p = 2; p <= P; p += 2) {
        auto& b = d.B[static_cast<std::size_t>(p)];
        b(p) = b(p).real();
        for (int uu = 1; uu <= p; ++uu) b(p - uu) = sign_pow(uu) * std::conj(b(p + uu));
    }
    return d;
}

/// rho(R) = sum_{p,u} B_{p,u} U^p_{u0}(R).
inline double density_at(const DistributionCoefficients& dist, const Euler& r) {
    cplx s = 0;
    for (int p = 0; p <= dist.P; ++p) {
        const auto& b = dist.B[static_cast<std::size_t>(p)];
        if (b.squaredNorm() == 0.0) continue;
        s += b.dot(wigner_u_column0(p, r).conjugate());
    }
    if (std::abs(s.imag()) > 1e-8 * std::max(1.0, std::abs(s.real())))
        throw ValidationError("density_at: imaginary residue " + std::to_string(s.imag()) +
                              " exceeds 1e-8 (coefficient constraints violated)");
    return s.real();
}

/// rho evaluated through the viewing direction v = R e_z with spherical angles (theta, phi):
/// U^p_{u0}(R) = sqrt(4 pi / (2p+1)) Y_p^u(theta, phi). Agrees with density_at.
inline double density_at_direction(const DistributionCoefficients& dist, double theta, double phi) {
    const VectorXcd y = spherical_harmonics_all(dist.P, theta, phi);
    cplx s = 0;
    for (int p = 0; p <= dist.P; p += 1) {
        const auto& b = dist.B[static_cast<std::size_t>(p)];
        const double cp = std::sqrt(4 * kPi / (2 * p + 1));
        for (int u = -p; u <= p; ++u) s += b(u + p) * cp * y(p * p + p + u);
    }
    return s.real();
}

// ---------------------------------------------------------------------------
// Validation

struct ValidationReport {
    bool ok = true;
    double worst = 0.0;
    std::vector<std::string> failures;

    void check(bool cond, const std::string& what, double magnitude = 0.0) {
        worst = std::max(worst, magnitude);
        if (!cond) {
            ok = false;
            failures.push_back(what);
        }
    }

    std::string summary() const {
        if (ok) return "pass";
        std::ostringstream os;
        os << "fail:";
        for (const auto& f : failures) os << " " << f << ";";
        os << " worst violation " << worst;
        return os.str();
    }
};

inline ValidationReport validate(const PolarGrid& g) {
    ValidationReport r;
    r.check(g.m_r() >= 1, "grid has no radii");
    for (std::size_t k = 1; k < g.radii.size(); ++k) r.check(g.radii[k] > g.radii[k - 1], "radii not strictly increasing");
    for (double x : g.radii) r.check(x >= 0 && x <= g.r_max, "radius outside [0, r_max]");
    r.check(g.n_phi >= 1, "no angular samples");
    return r;
}

/// Extra requirements when the grid is used by the solver at bandlimit L.
inline ValidationReport validate_for_solver(const PolarGrid& g, int L) {
    ValidationReport r = validate(g);
    r.check(g.m_r() >= (L + 1) * (L + 1), "M_r < (L+1)^2");
    r.check(g.n_phi >= 4 * L + 2, "M_phi < 4L+2");
    return r;
}

inline ValidationReport validate(const VolumeCoefficients& v, double tol = 1e-12) {
    ValidationReport r;
    r.check(static_cast<int>(v.A.size()) == v.L + 1, "wrong number of degree blocks");
    if (!r.ok) return r;
    for (int l = 0; l <= v.L; ++l) {
        const auto& a = v.A[static_cast<std::size_t>(l)];
        r.check(a.rows() == v.m_r() && a.cols() == 2 * l + 1, "block shape mismatch at l=" + std::to_string(l));
        r.check(a.allFinite(), "non-finite coefficient at l=" + std::to_string(l));
    }
    if (!r.ok) return r;
    for (std::size_t k = 1; k < v.radii.size(); ++k) r.check(v.radii[k] > v.radii[k - 1], "radii not strictly increasing");
    if (v.real_volume) {
        const double scale = std::max(v.norm(), 1e-300);
        for (int l = 0; l <= v.L; ++l) {
            const MatrixXcd rb = v.real_basis(l);
            const double bad = (l % 2 == 0 ? rb.imag().norm() : rb.real().norm()) / scale;
            r.check(bad <= tol, "reality parity violated at l=" + std::to_string(l), bad);
        }
    }
    return r;
}

inline ValidationReport validate(const DistributionCoefficients& d, double tol = 1e-12) {
    ValidationReport r;
    r.check(static_cast<int>(d.B.size()) == d.P + 1, "wrong number of degree blocks");
    if (!r.ok) return r;
    const double n00 = std::abs(d.get(0, 0) - 1.0);
    r.check(n00 <= tol, "normalization B_00 != 1", n00);
    for (int p = 0; p <= d.P; ++p) {
        for (int u = -p; u <= p; ++u) {
            const double bad = std::abs(std::conj(d.get(p, u)) - sign_pow(u) * d.get(p, -u));
            r.check(bad <= tol, "conjugate symmetry violated at p=" + std::to_string(p), bad);
        }
        if (p % 2 == 1) {
            const double bad = d.B[static_cast<std::size_t>(p)].norm();
            r.check(bad <= tol, "chirality: nonzero odd degree p=" + std::to_string(p), bad);
        }
    }
    return r;
}

inline ValidationReport validate(const BlockOrthogonal& b, bool pinned = false, double tol = 1e-10) {
    ValidationReport r;
    for (int l = 0; l <= b.L(); ++l) {
        const auto& o = b.O[static_cast<std::size_t>(l)];
        if (o.rows() != 2 * l + 1 || o.cols() != 2 * l + 1) {
            r.check(false, "block shape mismatch at l=" + std::to_string(l));
            continue;
        }
        const double bad = (o * o.transpose() - MatrixXd::Identity(o.rows(), o.cols())).norm();
        r.check(bad <= tol, "orthogonality violated at l=" + std::to_string(l), bad);
        if (pinned && l <= 1) {
            const double pin = (o - MatrixXd::Identity(o.rows(), o.cols())).norm();
            r.check(pin <= tol, "pinned block not identity at l=" + std::to_string(l), pin);
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Serialization

inline json grid_to_json(const PolarGrid& g) { return {{"radii", g.radii}, {"n_phi", g.n_phi}, {"r_max", g.r_max}}; }

inline PolarGrid grid_from_json(const json& j) {
    PolarGrid g;
    g.radii = j.at("radii").get<std::vector<double>>();
    g.n_phi = j.at("n_phi").get<int>();
    g.r_max = j.at("r_max").get<double>();
    return g;
}

inline void write_volume(const std::filesystem::path& path, const VolumeCoefficients& v,
                         const json& provenance = json::object(), json extra = json::object()) {
    std::vector<cplx> payload;
    payload.reserve(static_cast<std::size_t>(v.width() * v.m_r()));
    for (int l = 0; l <= v.L; ++l)
        for (int m = -l; m <= l; ++m)
            for (int k = 0; k < v.m_r(); ++k) payload.push_back(v.A[static_cast<std::size_t>(l)](k, m + l));
    extra["L"] = v.L;
    extra["radii"] = v.radii;
    extra["real_volume"] = v.real_volume;
    if (std::isfinite(v.condition_number)) extra["condition_number"] = v.condition_number;
    extra["layout"] = "(l, m, r)";
    write_record(path, "volume_coefficients", extra, payload, provenance);
}

inline VolumeCoefficients volume_from_record(const Record& rec) {
    VolumeCoefficients v;
    v.L = rec.header.at("L").get<int>();
    v.radii = rec.header.at("radii").get<std::vector<double>>();
    v.real_volume = rec.header.value("real_volume", true);
    if (rec.header.contains("condition_number")) v.condition_number = rec.header["condition_number"].get<double>();
    if (rec.payload.size() != static_cast<std::size_t>(v.width() * v.m_r())) throw IoError("volume payload size mismatch");
    std::size_t idx = 0;
    for (int l = 0; l <= v.L; ++l) {
        MatrixXcd a(v.m_r(), 2 * l + 1);
        for (int m = -l; m <= l; ++m)
            for (int k = 0; k < v.m_r(); ++k) a(k, m + l) = rec.payload[idx++];
        v.A.push_back(a);
    }
    return v;
}

inline VolumeCoefficients read_volume(const std::filesystem::path& path) {
    return volume_from_record(read_record(path, "volume_coefficients"));
}

inline void write_distribution(const std::filesystem::path& path, const DistributionCoefficients& d,
                               const json& provenance = json::object(), json extra = json::object()) {
    std::vector<cplx> payload;
    for (int p = 0; p <= d.P; ++p)
        for (int u = -p; u <= p; ++u) payload.push_back(d.get(p, u));
    extra["P"] = d.P;
    extra["layout"] = "(p, u)";
    write_record(path, "distribution_coefficients", extra, payload, provenance);
}

inline DistributionCoefficients distribution_from_record(const Record& rec) {
    DistributionCoefficients d = DistributionCoefficients::uniform(rec.header.at("P").get<int>());
    if (rec.payload.size() != static_cast<std::size_t>((d.P + 1) * (d.P + 1))) throw IoError("distribution payload size mismatch");
    std::size_t idx = 0;
    for (int p = 0; p <= d.P; ++p)
        for (int u = -p; u <= p; ++u) d.set(p, u, rec.payload[idx++]);
    return d;
}

inline DistributionCoefficients read_distribution(const std::filesystem::path& path) {
    return distribution_from_record(read_record(path, "distribution_coefficients"));
}

inline std::vector<cplx> block_orthogonal_payload(const BlockOrthogonal& b) {
    std::vector<cplx> payload;
    for (const auto& o : b.O)
        for (int i = 0; i < o.rows(); ++i)
            for (int j = 0; j < o.cols(); ++j) payload.emplace_back(o(i, j), 0.0);
    return payload;
}

inline BlockOrthogonal block_orthogonal_from_payload(int L, const std::vector<cplx>& payload, std::size_t offset = 0) {
    BlockOrthogonal b;
    std::size_t idx = offset;
    for (int l = 0; l <= L; ++l) {
        MatrixXd o(2 * l + 1, 2 * l + 1);
        for (int i = 0; i < o.rows(); ++i)
            for (int j = 0; j < o.cols(); ++j) {
                if (idx >= payload.size()) throw IoError("block-orthogonal payload too short");
                o(i, j) = payload[idx++].real();
            }
        b.O.push_back(o);
    }
    return b;
}

inline void write_block_orthogonal(const std::filesystem::path& path, const BlockOrthogonal& b,
                                   const json& provenance = json::object()) {
    write_record(path, "block_orthogonal", {{"L", b.L()}, {"layout", "(l, row, col)"}}, block_orthogonal_payload(b),
                 provenance);
}

inline BlockOrthogonal read_block_orthogonal(const std::filesystem::path& path) {
    const Record rec = read_record(path, "block_orthogonal");
    return block_orthogonal_from_payload(rec.header.at("L").get<int>(), rec.payload);
}

}  // namespace modm
