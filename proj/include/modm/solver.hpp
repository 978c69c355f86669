#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <fstream>
#include <future>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "modm/errors.hpp"
#include "modm/io.hpp"
#include "modm/kam.hpp"
#include "modm/model.hpp"
#include "modm/moments.hpp"
#include "modm/special_fns.hpp"

namespace modm {

// ---------------------------------------------------------------------------
// Targets M^n = pinv(A~) G^n pinv(A~)^H

struct MTargets {
    int L = 0;
    std::vector<MatrixXcd> M;  ///< M[n + L]
    VectorXd singular_values;  ///< of the stacked Kam factor
    double cutoff = 0;
    double condition = 0;
    int rank = 0;

    const MatrixXcd& at(int n) const { return M[static_cast<std::size_t>(n + L)]; }

    double energy() const {
        double s = 0;
        for (const auto& m : M) s += m.squaredNorm();
        return s;
    }
};

inline MTargets assemble_mtargets(const MomentTables& m2_nonuniform, const KamFactors& kam, double svd_cutoff = 1e-10,
                                  double max_condition = 1e12) {
    const int L = kam.L;
    if (m2_nonuniform.n_max < L) throw DomainError("assemble_mtargets: moment tables do not cover |n| <= L");
    if (m2_nonuniform.grid.radii != kam.radii) throw DomainError("assemble_mtargets: grid mismatch with Kam factors");
    const MatrixXcd a = kam.stacked();
    if (a.rows() < a.cols()) throw DomainError("assemble_mtargets: need M_r >= (L+1)^2");
    Eigen::JacobiSVD<MatrixXcd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    MTargets t;
    t.L = L;
    t.singular_values = svd.singularValues();
    const double smax = t.singular_values(0);
    const double smin = t.singular_values(t.singular_values.size() - 1);
    t.condition = smin > 0 ? smax / smin : std::numeric_limits<double>::infinity();
    if (!(t.condition <= max_condition))
        throw IllPosedError("assemble_mtargets: cond(A~) = " + std::to_string(t.condition) + " exceeds " +
                            std::to_string(max_condition) + "; the inversion is ill-posed at this bandlimit");
    t.cutoff = svd_cutoff * smax;
    VectorXd inv = VectorXd::Zero(t.singular_values.size());
    for (int i = 0; i < inv.size(); ++i)
        if (t.singular_values(i) > t.cutoff) {
            inv(i) = 1.0 / t.singular_values(i);
            ++t.rank;
        }
    const MatrixXcd pinv = svd.matrixV() * inv.asDiagonal() * svd.matrixU().adjoint();
    for (int n = -L; n <= L; ++n) t.M.push_back(pinv * m2_nonuniform.g(n) * pinv.adjoint());
    return t;
}

// ---------------------------------------------------------------------------
// B-update

/// Real unknown: B_{p,0}, Re B_{p,u} (part 0) or Im B_{p,u} (part 1) for u > 0.
struct BParam {
    int p;
    int u;
    int part;
};

/// Linear design of B -> (B^n)_n over even p in [2, pmax], with B_{0,0} = 1 fixed.
class BDesign {
public:
    BDesign(int L, int pmax) : L_(L), pmax_(std::min(pmax, 2 * L)) {
        for (int p = 2; p <= pmax_; p += 2) {
            params_.push_back({p, 0, 0});
            for (int u = 1; u <= p; ++u) {
                params_.push_back({p, u, 0});
                params_.push_back({p, u, 1});
            }
        }
        const int w = (L + 1) * (L + 1);
        const Eigen::Index rows = static_cast<Eigen::Index>(2 * L + 1) * w * w;
        E_ = MatrixXcd::Zero(rows, static_cast<Eigen::Index>(params_.size()));
        base_ = VectorXcd::Zero(rows);
        std::map<std::pair<int, int>, int> index;
        for (std::size_t k = 0; k < params_.size(); ++k)
            if (params_[k].part == 0) index[{params_[k].p, params_[k].u}] = static_cast<int>(k);
        for (const auto& t : *b_terms(L, pmax_)) {
            const Eigen::Index row = vec_index(t.n, t.row, t.col);
            if (t.p == 0) {
                base_(row) += t.coef;
                continue;
            }
            if (t.p % 2 != 0) continue;
            const int au = std::abs(t.u);
            const int k = index.at({t.p, au});
            if (t.u == 0) {
                E_(row, k) += t.coef;
            } else if (t.u > 0) {
                E_(row, k) += t.coef;
                E_(row, k + 1) += cplx(0, t.coef);
            } else {
                const double s = sign_pow(au);
                E_(row, k) += s * t.coef;
                E_(row, k + 1) += cplx(0, -s * t.coef);
            }
        }
        H_ = (E_.adjoint() * E_).real();
        cod_.setThreshold(1e-12);
        cod_.compute(H_);
        degenerate_ = cod_.rank() < H_.rows();
    }

    int L() const { return L_; }
    int pmax() const { return pmax_; }
    const std::vector<BParam>& params() const { return params_; }
    const MatrixXd& normal_matrix() const { return H_; }
    bool degenerate() const { return degenerate_; }

    Eigen::Index vec_index(int n, int row, int col) const {
        const int w = (L_ + 1) * (L_ + 1);
        return static_cast<Eigen::Index>(n + L_) * w * w + static_cast<Eigen::Index>(col) * w + row;
    }

    VectorXcd vectorize(const std::vector<MatrixXcd>& W) const {
        const int w = (L_ + 1) * (L_ + 1);
        VectorXcd v(static_cast<Eigen::Index>(2 * L_ + 1) * w * w);
        for (int n = -L_; n <= L_; ++n)
            v.segment(static_cast<Eigen::Index>(n + L_) * w * w, w * w) =
                Eigen::Map<const VectorXcd>(W[static_cast<std::size_t>(n + L_)].data(), w * w);
        return v;
    }

    DistributionCoefficients to_distribution(const VectorXd& theta) const {
        DistributionCoefficients d = DistributionCoefficients::uniform(pmax_);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            const auto& q = params_[k];
            if (q.u == 0) {
                d.set(q.p, 0, theta(static_cast<Eigen::Index>(k)));
            } else if (q.part == 0) {
                const cplx v(theta(static_cast<Eigen::Index>(k)), theta(static_cast<Eigen::Index>(k + 1)));
                d.set(q.p, q.u, v);
                d.set(q.p, -q.u, sign_pow(q.u) * std::conj(v));
            }
        }
        return d;
    }

    VectorXd to_theta(const DistributionCoefficients& d) const {
        VectorXd theta(static_cast<Eigen::Index>(params_.size()));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            const cplx v = d.get(params_[k].p, params_[k].u);
            theta(static_cast<Eigen::Index>(k)) = params_[k].part == 0 ? v.real() : v.imag();
        }
        return theta;
    }

    /// Gradient right-hand side Re(E^H (vec W - base)).
    VectorXd rhs(const std::vector<MatrixXcd>& W) const { return (E_.adjoint() * (vectorize(W) - base_)).real(); }

    VectorXd solve_normal(const VectorXd& rhs) const { return cod_.solve(rhs); }

    /// Objective sum_n ||W^n - B^n(theta)||^2.
    double residual(const std::vector<MatrixXcd>& W, const VectorXd& theta) const {
        return (vectorize(W) - base_ - E_ * theta.cast<cplx>()).squaredNorm();
    }

private:
    int L_;
    int pmax_;
    std::vector<BParam> params_;
    MatrixXcd E_;
    VectorXcd base_;
    MatrixXd H_;
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod_;
    bool degenerate_ = false;
};

/// Optional positivity of rho at collocation directions, enforced by an active-set quadratic program.
struct PositivityOptions {
    bool enabled = false;
    int points = 200;
    double floor = 0.0;
};

namespace detail {

/// Fibonacci-sphere directions as (theta, phi).
inline std::vector<std::pair<double, double>> fibonacci_directions(int n) {
    std::vector<std::pair<double, double>> out;
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n; ++i) {
        const double z = 1.0 - 2.0 * (i + 0.5) / n;
        out.emplace_back(std::acos(z), std::fmod(golden * i, 2 * kPi));
    }
    return out;
}

/// rho(v_j) = 1 + (G theta)_j for the parametrization of `design`.
inline MatrixXd collocation_matrix(const BDesign& design, int points) {
    const auto dirs = fibonacci_directions(points);
    MatrixXd g(points, static_cast<Eigen::Index>(design.params().size()));
    for (int j = 0; j < points; ++j) {
        const VectorXcd y = spherical_harmonics_all(design.pmax(), dirs[static_cast<std::size_t>(j)].first,
                                                    dirs[static_cast<std::size_t>(j)].second);
        for (std::size_t k = 0; k < design.params().size(); ++k) {
            const auto& q = design.params()[k];
            const double cp = std::sqrt(4 * kPi / (2 * q.p + 1));
            const cplx yu = cp * y(q.p * q.p + q.p + q.u);
            double v;
            if (q.u == 0) v = yu.real();
            else if (q.part == 0) v = 2 * yu.real();
            else v = -2 * yu.imag();
            g(j, static_cast<Eigen::Index>(k)) = v;
        }
    }
    return g;
}

/// Primal active-set solve of min t^T H t - 2 rhs^T t subject to G t >= c, started from the
/// feasible point t = 0 (the uniform density). Returns the size of the final working set.
inline int active_set_qp(const MatrixXd& h, const VectorXd& rhs, const MatrixXd& g, double c, VectorXd& theta) {
    const Eigen::Index k = h.rows();
    if (c > 0) throw DomainError("positivity floor must not exceed the uniform density");
    theta = h.completeOrthogonalDecomposition().solve(rhs);
    if (((g * theta).array() >= c - 1e-12).all()) return 0;
    theta = VectorXd::Zero(k);
    std::vector<Eigen::Index> work;
    for (int it = 0; it < 50 * static_cast<int>(g.rows() + k); ++it) {
        const Eigen::Index a = static_cast<Eigen::Index>(work.size());
        MatrixXd kkt = MatrixXd::Zero(k + a, k + a);
        VectorXd b = VectorXd::Zero(k + a);
        kkt.topLeftCorner(k, k) = h;
        b.head(k) = rhs - h * theta;
        for (Eigen::Index i = 0; i < a; ++i) {
            kkt.block(k + i, 0, 1, k) = g.row(work[static_cast<std::size_t>(i)]);
            kkt.block(0, k + i, k, 1) = g.row(work[static_cast<std::size_t>(i)]).transpose();
        }
        const VectorXd sol = kkt.completeOrthogonalDecomposition().solve(b);
        const VectorXd step = sol.head(k);
        if (step.norm() <= 1e-12 * std::max(1.0, theta.norm())) {
            // multipliers of the working constraints are -sol.tail(a)
            Eigen::Index worst = -1;
            double most = -1e-12;
            for (Eigen::Index i = 0; i < a; ++i)
                if (-sol(k + i) < most) {
                    most = -sol(k + i);
                    worst = i;
                }
            if (worst < 0) break;
            work.erase(work.begin() + worst);
            continue;
        }
        double alpha = 1.0;
        Eigen::Index blocking = -1;
        const VectorXd gs = g * step, gt = g * theta;
        for (Eigen::Index j = 0; j < g.rows(); ++j) {
            if (gs(j) >= -1e-15 || std::find(work.begin(), work.end(), j) != work.end()) continue;
            const double t = (c - gt(j)) / gs(j);
            if (t < alpha) {
                alpha = std::max(t, 0.0);
                blocking = j;
            }
        }
        theta += alpha * step;
        if (blocking >= 0) work.push_back(blocking);
    }
    return static_cast<int>(work.size());
}

}  // namespace detail

struct BUpdateResult {
    DistributionCoefficients B;
    double residual = 0;
    bool degenerate = false;
    int active_constraints = 0;
};

inline std::vector<MatrixXcd> rotate_targets(const MTargets& t, const BlockOrthogonal& o) {
    const MatrixXcd oq = o.dense().cast<cplx>() * q_block(t.L);
    std::vector<MatrixXcd> w;
    for (int n = -t.L; n <= t.L; ++n) w.push_back(oq.adjoint() * t.at(n) * oq);
    return w;
}

inline BUpdateResult update_b(const MTargets& t, const BlockOrthogonal& o, const BDesign& design,
                              const PositivityOptions& pos = {}) {
    const auto w = rotate_targets(t, o);
    const VectorXd rhs = design.rhs(w);
    VectorXd theta = design.solve_normal(rhs);
    BUpdateResult r;
    if (pos.enabled) {
        const MatrixXd g = detail::collocation_matrix(design, pos.points);
        r.active_constraints = detail::active_set_qp(design.normal_matrix(), rhs, g, pos.floor - 1.0, theta);
    }
    r.B = design.to_distribution(theta);
    r.residual = design.residual(w, theta);
    r.degenerate = design.degenerate();
    return r;
}

inline BUpdateResult update_b(const MTargets& t, const BlockOrthogonal& o, int pmax) {
    return update_b(t, o, BDesign(t.L, pmax));
}

// ---------------------------------------------------------------------------
// X-update and O-projection

/// T^n = Q B^n Q^H for n = -L..L.
inline std::vector<MatrixXcd> rotated_b_blocks(const DistributionCoefficients& b, int L) {
    const BBlocks bb = assemble_b_blocks(b, L);
    const MatrixXcd q = q_block(L);
    std::vector<MatrixXcd> t;
    for (int n = -L; n <= L; ++n) t.push_back(q * bb.at(n) * q.adjoint());
    return t;
}

namespace detail {

/// H(r0 + i*rows(b) + p, c0 + j*cols(b) + q) += scale * Re(a_ij b_pq), i.e. Re(kron(a, b)).
inline void add_kron_real(MatrixXd& h, Eigen::Index r0, Eigen::Index c0, const MatrixXcd& a, const MatrixXcd& b,
                          double scale) {
    const MatrixXd br = b.real(), bi = b.imag();
    for (Eigen::Index j = 0; j < a.cols(); ++j)
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
            const double ar = scale * a(i, j).real(), ai = scale * a(i, j).imag();
            if (ar == 0.0 && ai == 0.0) continue;
            h.block(r0 + i * b.rows(), c0 + j * b.cols(), b.rows(), b.cols()) += ar * br - ai * bi;
        }
}

inline VectorXd vec_real(const MatrixXcd& m) { return Eigen::Map<const VectorXcd>(m.data(), m.size()).real(); }

}  // namespace detail

struct XUpdateResult {
    std::vector<MatrixXd> X;  ///< X_0..X_L with X_0 = 1, X_1 = I
    double residual = 0;      ///< sum_n ||M^n X - X T^n||^2
    bool collapsed = false;
};

/// Relaxed residual sum_n ||M^n X - X T^n||^2 for block-diagonal X.
inline double relaxed_residual(const MTargets& t, const std::vector<MatrixXcd>& tb, const std::vector<MatrixXd>& x) {
    const int L = t.L;
    const int w = (L + 1) * (L + 1);
    MatrixXd xd = MatrixXd::Zero(w, w);
    for (int l = 0; l <= L; ++l) xd.block(l * l, l * l, 2 * l + 1, 2 * l + 1) = x[static_cast<std::size_t>(l)];
    const MatrixXcd xc = xd.cast<cplx>();
    double s = 0;
    for (int n = -L; n <= L; ++n)
        s += (t.at(n) * xc - xc * tb[static_cast<std::size_t>(n + L)]).squaredNorm();
    return s;
}

/// Exact least-squares minimizer over real block-diagonal X with X_0, X_1 pinned.
inline XUpdateResult update_x(const MTargets& t, const DistributionCoefficients& b) {
    const int L = t.L;
    const auto tb = rotated_b_blocks(b, L);
    std::vector<int> offset(static_cast<std::size_t>(L + 1), -1);
    int dim = 0;
    for (int l = 2; l <= L; ++l) {
        offset[static_cast<std::size_t>(l)] = dim;
        dim += (2 * l + 1) * (2 * l + 1);
    }
    std::vector<MatrixXcd> known(2);
    known[0] = MatrixXcd::Ones(1, 1);
    known[1] = MatrixXcd::Identity(3, 3);
    MatrixXd H = MatrixXd::Zero(dim, dim);
    VectorXd rhs = VectorXd::Zero(dim);
    for (int l = 0; l <= L; ++l)
        for (int lp = 0; lp <= L; ++lp) {
            if (l < 2 && lp < 2) continue;
            const int dl = 2 * l + 1, dlp = 2 * lp + 1;
            // residual block M X_{l'} - X_l T, unknowns vec(X_{l'}) and vec(X_l)
            MatrixXcd mhm = MatrixXcd::Zero(dlp, dlp), ttt = MatrixXcd::Zero(dl, dl);
            for (int n = -L; n <= L; ++n) {
                const MatrixXcd m = t.at(n).block(l * l, lp * lp, dl, dlp);
                const MatrixXcd tt = tb[static_cast<std::size_t>(n + L)].block(l * l, lp * lp, dl, dlp);
                mhm += m.adjoint() * m;
                ttt += tt.conjugate() * tt.transpose();
                if (tt.cwiseAbs().maxCoeff() == 0.0) continue;
                if (l >= 2 && lp >= 2) {
                    const int ol = offset[static_cast<std::size_t>(l)], olp = offset[static_cast<std::size_t>(lp)];
                    detail::add_kron_real(H, olp, ol, tt.transpose(), m.adjoint(), -1.0);
                    detail::add_kron_real(H, ol, olp, tt.conjugate(), m, -1.0);
                } else if (l >= 2) {
                    const int o = offset[static_cast<std::size_t>(l)];
                    rhs.segment(o, dl * dl) += detail::vec_real(m * known[static_cast<std::size_t>(lp)] * tt.adjoint());
                } else {
                    const int o = offset[static_cast<std::size_t>(lp)];
                    rhs.segment(o, dlp * dlp) += detail::vec_real(m.adjoint() * known[static_cast<std::size_t>(l)] * tt);
                }
            }
            if (lp >= 2) {
                const int o = offset[static_cast<std::size_t>(lp)];
                const MatrixXd re = mhm.real();
                for (int j = 0; j < dlp; ++j) H.block(o + j * dlp, o + j * dlp, dlp, dlp) += re;
            }
            if (l >= 2) {
                const int o = offset[static_cast<std::size_t>(l)];
                const MatrixXd re = ttt.real();
                for (int i = 0; i < dl; ++i)
                    for (int j = 0; j < dl; ++j)
                        H.block(o + j * dl, o + i * dl, dl, dl).diagonal().array() += re(j, i);
            }
        }
    XUpdateResult r;
    r.X.push_back(MatrixXd::Ones(1, 1));
    r.X.push_back(MatrixXd::Identity(3, 3));
    if (dim > 0) {
        const VectorXd x = H.ldlt().solve(rhs);
        const bool ok = x.allFinite() && (H * x - rhs).norm() <= 1e-8 * std::max(1.0, rhs.norm());
        const VectorXd sol = ok ? x : H.completeOrthogonalDecomposition().solve(rhs);
        for (int l = 2; l <= L; ++l) {
            const int d = 2 * l + 1;
            r.X.push_back(Eigen::Map<const MatrixXd>(sol.data() + offset[static_cast<std::size_t>(l)], d, d));
        }
    }
    const double ref = r.X[1].norm();
    for (int l = 2; l <= L; ++l)
        if (r.X[static_cast<std::size_t>(l)].norm() < 1e-8 * ref) r.collapsed = true;
    r.residual = relaxed_residual(t, tb, r.X);
    return r;
}

/// Closest orthogonal matrix (polar factor), O(n) not SO(n).
inline MatrixXd polar_factor(const MatrixXd& x) {
    Eigen::JacobiSVD<MatrixXd> svd(x, Eigen::ComputeFullU | Eigen::ComputeFullV);
    MatrixXd u = svd.matrixU(), v = svd.matrixV();
    for (int j = 0; j < u.cols(); ++j) {
        int i = 0;
        while (i < u.rows() && std::abs(u(i, j)) <= 1e-12) ++i;
        if (i < u.rows() && u(i, j) < 0) {
            u.col(j) *= -1.0;
            v.col(j) *= -1.0;
        }
    }
    return u * v.transpose();
}

inline BlockOrthogonal project_o(const std::vector<MatrixXd>& x) {
    BlockOrthogonal o = BlockOrthogonal::identity(static_cast<int>(x.size()) - 1);
    for (std::size_t l = 2; l < x.size(); ++l) o.O[l] = polar_factor(x[l]);
    return o;
}

/// Objective sum_n ||M^n - O Q B^n Q^H O^T||^2.
inline double modm_objective(const MTargets& t, const BlockOrthogonal& o, const DistributionCoefficients& b) {
    const auto tb = rotated_b_blocks(b, t.L);
    const MatrixXcd od = o.dense().cast<cplx>();
    double s = 0;
    for (int n = -t.L; n <= t.L; ++n)
        s += (t.at(n) - od * tb[static_cast<std::size_t>(n + t.L)] * od.transpose()).squaredNorm();
    return s;
}

// ---------------------------------------------------------------------------
// Driver

struct SolverConfig {
    int max_iter = 500;
    double tol = 1e-10;
    int restarts = 5;
    std::uint64_t seed = 0;
    double svd_cutoff = 1e-10;
    double max_condition = 1e12;
    int pmax = -1;                    ///< distribution bandlimit to recover, default 2L
    double target_objective = 1e-22;  ///< relative objective treated as an exact fit
    int threads = 1;                  ///< restarts run concurrently when > 1
    KamOptions kam;
    PositivityOptions positivity;
    std::string checkpoint_path;      ///< written after each iteration when non-empty
    std::optional<BlockOrthogonal> initial_o;  ///< used by restart 0 (resume)
    int initial_iteration = 0;
};

enum class SolverStatus { Converged, MaxIter, Collapsed, Degenerate };

inline std::string to_string(SolverStatus s) {
    switch (s) {
        case SolverStatus::Converged: return "converged";
        case SolverStatus::MaxIter: return "max_iter";
        case SolverStatus::Collapsed: return "collapsed";
        case SolverStatus::Degenerate: return "degenerate";
    }
    return "unknown";
}

struct IterationRecord {
    int restart;
    int iteration;
    double objective_after_b;
    double relaxed_residual;
    double objective;  ///< after O-projection with the current B
    double orthogonality_error;
};

struct SolverState {
    int L = 0;
    int restart = 0;
    int iteration = 0;
    BlockOrthogonal O;
    DistributionCoefficients B;
    double objective = std::numeric_limits<double>::infinity();
    double relative_objective = std::numeric_limits<double>::infinity();
    double target_energy = 0;
    SolverStatus status = SolverStatus::MaxIter;
    bool b_degenerate = false;
    std::vector<IterationRecord> history;
    std::vector<std::string> restart_status;
    std::vector<double> restart_objective;

    bool converged() const { return status == SolverStatus::Converged; }
};

struct ModmResult {
    VolumeCoefficients volume;
    DistributionCoefficients distribution;
    SolverState state;
    KamFactors kam;
    MTargets targets;
};

inline double orthogonality_error(const BlockOrthogonal& o) {
    double e = 0;
    for (const auto& b : o.O) e = std::max(e, (b * b.transpose() - MatrixXd::Identity(b.rows(), b.cols())).norm());
    return e;
}

inline void write_solver_state(const std::filesystem::path& path, const SolverState& s,
                               const json& provenance = json::object()) {
    std::vector<cplx> payload = block_orthogonal_payload(s.O);
    for (int p = 0; p <= s.B.P; ++p)
        for (int u = -p; u <= p; ++u) payload.push_back(s.B.get(p, u));
    json h = {{"L", s.L},
              {"P", s.B.P},
              {"restart", s.restart},
              {"iteration", s.iteration},
              {"objective", s.objective},
              {"relative_objective", s.relative_objective},
              {"status", to_string(s.status)},
              {"restart_status", s.restart_status},
              {"restart_objective", s.restart_objective},
              {"layout", "O blocks (l, row, col) then B (p, u)"}};
    write_record(path, "solver_state", h, payload, provenance);
}

inline SolverState read_solver_state(const std::filesystem::path& path) {
    const Record rec = read_record(path, "solver_state");
    SolverState s;
    s.L = rec.header.at("L").get<int>();
    s.restart = rec.header.value("restart", 0);
    s.iteration = rec.header.value("iteration", 0);
    s.objective = rec.header.value("objective", 0.0);
    s.relative_objective = rec.header.value("relative_objective", 0.0);
    s.O = block_orthogonal_from_payload(s.L, rec.payload);
    std::size_t idx = 0;
    for (const auto& o : s.O.O) idx += static_cast<std::size_t>(o.size());
    const int P = rec.header.at("P").get<int>();
    s.B = DistributionCoefficients::uniform(P);
    for (int p = 0; p <= P; ++p)
        for (int u = -p; u <= p; ++u) {
            if (idx >= rec.payload.size()) throw IoError(path.string() + ": solver state payload too short");
            s.B.set(p, u, rec.payload[idx++]);
        }
    return s;
}

inline void write_residual_csv(const std::filesystem::path& path, const SolverState& s) {
    std::ostringstream os;
    os << "restart,iteration,objective_after_b,relaxed_residual,objective,relative_objective,orthogonality_error\n";
    os << std::setprecision(17);
    for (const auto& r : s.history)
        os << r.restart << ',' << r.iteration << ',' << r.objective_after_b << ',' << r.relaxed_residual << ','
           << r.objective << ',' << r.objective / s.target_energy << ',' << r.orthogonality_error << '\n';
    write_text(path, os.str());
}

/// One restart of the alternating scheme from the initial blocks `o`.
inline SolverState solve_from(const MTargets& t, const BDesign& design, BlockOrthogonal o, const SolverConfig& cfg,
                              int restart, int first_iteration = 0) {
    SolverState s;
    s.L = t.L;
    s.restart = restart;
    s.target_energy = t.energy();
    BUpdateResult bu = update_b(t, o, design, cfg.positivity);
    s.b_degenerate = bu.degenerate;
    double prev = modm_objective(t, o, bu.B);
    s.status = SolverStatus::MaxIter;
    int k = first_iteration;
    for (; k < cfg.max_iter; ++k) {
        if (prev / s.target_energy < cfg.target_objective) {
            s.status = SolverStatus::Converged;
            break;
        }
        const XUpdateResult xu = update_x(t, bu.B);
        if (xu.collapsed) {
            s.status = SolverStatus::Collapsed;
            break;
        }
        o = project_o(xu.X);
        bu = update_b(t, o, design, cfg.positivity);
        const double obj = modm_objective(t, o, bu.B);
        s.history.push_back({restart, k, bu.residual, xu.residual, obj, orthogonality_error(o)});
        if (!cfg.checkpoint_path.empty()) {
            SolverState cp = s;
            cp.O = o;
            cp.B = bu.B;
            cp.iteration = k + 1;
            cp.objective = obj;
            cp.relative_objective = obj / s.target_energy;
            write_solver_state(cfg.checkpoint_path, cp);
        }
        const double change = std::abs(prev - obj) / std::max(prev, std::numeric_limits<double>::min());
        prev = obj;
        if (obj / s.target_energy < cfg.target_objective) {
            s.status = SolverStatus::Converged;
            ++k;
            break;
        }
        if (change < cfg.tol) {
            s.status = SolverStatus::Converged;
            ++k;
            break;
        }
    }
    s.iteration = k;
    s.O = o;
    s.B = bu.B;
    s.objective = prev;
    s.relative_objective = prev / s.target_energy;
    return s;
}

/// Steps 1-3: Kam factors from the uniform moments, targets from the non-uniform moments,
/// then the alternating B / X / O scheme with random restarts.
inline ModmResult run_modm(const MomentTables& m2_uniform, const MomentTables& m2_nonuniform, const VectorXcd& m1_uniform,
                           int L, const SolverConfig& cfg = {}, std::ostream* log = nullptr) {
    if (!m2_uniform.grid.same_as(m2_nonuniform.grid)) throw DomainError("run_modm: moment grids differ");
    if (m1_uniform.size() != m2_uniform.grid.m_r()) throw DomainError("run_modm: m1 length does not match grid");
    const auto rep = validate_for_solver(m2_uniform.grid, L);
    if (!rep.ok) throw ValidationError("run_modm: " + rep.summary());
    ModmResult res;
    res.kam = run_kam(m2_uniform, m1_uniform, L, cfg.kam, log);
    res.targets = assemble_mtargets(m2_nonuniform, res.kam, cfg.svd_cutoff, cfg.max_condition);
    const int pmax = cfg.pmax < 0 ? 2 * L : cfg.pmax;
    const BDesign design(L, pmax);

    std::vector<BlockOrthogonal> starts;
    for (int r = 0; r < std::max(1, cfg.restarts); ++r) {
        if (r == 0 && cfg.initial_o) {
            starts.push_back(*cfg.initial_o);
            continue;
        }
        std::mt19937_64 rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(r));
        starts.push_back(BlockOrthogonal::random(L, rng));
    }
    std::vector<SolverState> runs;
    auto run_one = [&](int r) {
        const int first = (r == 0 && cfg.initial_o) ? cfg.initial_iteration : 0;
        return solve_from(res.targets, design, starts[static_cast<std::size_t>(r)], cfg, r, first);
    };
    const int nr = static_cast<int>(starts.size());
    if (cfg.threads > 1) {
        for (int base = 0; base < nr; base += cfg.threads) {
            std::vector<std::future<SolverState>> fut;
            for (int r = base; r < std::min(nr, base + cfg.threads); ++r) fut.push_back(std::async(std::launch::async, run_one, r));
            bool done = false;
            for (auto& f : fut) {
                runs.push_back(f.get());
                done = done || runs.back().relative_objective < cfg.target_objective;
            }
            if (done) break;
        }
    } else {
        for (int r = 0; r < nr; ++r) {
            runs.push_back(run_one(r));
            if (log)
                *log << "restart " << r << ": " << to_string(runs.back().status) << " after " << runs.back().iteration
                     << " iterations, relative objective " << runs.back().relative_objective << "\n";
            if (runs.back().relative_objective < cfg.target_objective) break;
        }
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < runs.size(); ++i)
        if (runs[i].objective < runs[best].objective) best = i;
    SolverState st = runs[best];
    for (const auto& r : runs) {
        st.restart_status.push_back(to_string(r.status));
        st.restart_objective.push_back(r.relative_objective);
    }
    std::vector<IterationRecord> all;
    for (const auto& r : runs) all.insert(all.end(), r.history.begin(), r.history.end());
    st.history = std::move(all);
    // a target explained by a uniform B leaves every O optimal: the landscape is flat
    if (st.B.norm_above(1) < 1e-8) st.status = SolverStatus::Degenerate;
    res.state = st;

    res.volume = VolumeCoefficients::zeros(L, m2_uniform.grid.radii);
    for (int l = 0; l <= L; ++l)
        res.volume.A[static_cast<std::size_t>(l)] =
            res.kam.A[static_cast<std::size_t>(l)] * st.O.O[static_cast<std::size_t>(l)].cast<cplx>() * q_matrix(l);
    res.volume.real_volume = true;
    res.volume.condition_number = detail::singular_condition(res.volume.stacked());
    res.distribution = st.B;
    return res;
}

}  // namespace modm
