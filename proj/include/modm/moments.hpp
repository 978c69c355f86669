#pragma once

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include "modm/errors.hpp"
#include "modm/io.hpp"
#include "modm/model.hpp"
#include "modm/special_fns.hpp"

namespace modm {

// ---------------------------------------------------------------------------
// B-blocks

/// One elementary contribution coef * B_{p,u} to entry (row, col) of the n-th block matrix.
struct BTerm {
    int n;
    int row;  ///< l*l + l + m
    int col;  ///< l'*l' + l' + m'
    int p;
    int u;
    double coef;
};

namespace detail {

inline std::vector<BTerm> build_b_terms(int L, int pmax) {
    std::vector<BTerm> terms;
    for (int n = -L; n <= L; ++n)
        for (int l = 0; l <= L; ++l) {
            const double nl = cal_n_const(l, n);
            if (nl == 0.0) continue;
            for (int lp = 0; lp <= L; ++lp) {
                const double nlp = cal_n_const(lp, n);
                if (nlp == 0.0) continue;
                for (int m = -l; m <= l; ++m)
                    for (int mp = -lp; mp <= lp; ++mp) {
                        const int lo = std::max(std::abs(m - mp), std::abs(l - lp));
                        const int hi = std::min(l + lp, pmax);
                        for (int lpp = lo; lpp <= hi; ++lpp) {
                            const double c = cg_product(l, lp, m, -mp, n, -n, lpp);
                            if (c == 0.0) continue;
                            terms.push_back({n, l * l + l + m, lp * lp + lp + mp, lpp, mp - m,
                                             sign_pow(m + n) * nl * nlp * c / (2.0 * lpp + 1.0)});
                        }
                    }
            }
        }
    return terms;
}

}  // namespace detail

/// Cached term list for bandlimits (L, pmax); pmax is clipped to 2L.
inline std::shared_ptr<const std::vector<BTerm>> b_terms(int L, int pmax) {
    static std::mutex mu;
    static std::map<std::pair<int, int>, std::shared_ptr<const std::vector<BTerm>>> cache;
    pmax = std::min(pmax, 2 * L);
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = cache[{L, pmax}];
    if (!slot) slot = std::make_shared<const std::vector<BTerm>>(detail::build_b_terms(L, pmax));
    return slot;
}

/// The matrices B^n (n = -L..L) of size (L+1)^2 x (L+1)^2.
struct BBlocks {
    int L = 0;
    std::vector<MatrixXcd> Bn;

    const MatrixXcd& at(int n) const { return Bn[static_cast<std::size_t>(n + L)]; }
    MatrixXcd& at(int n) { return Bn[static_cast<std::size_t>(n + L)]; }

    MatrixXcd block(int n, int l, int lp) const { return at(n).block(l * l, lp * lp, 2 * l + 1, 2 * lp + 1); }

    static BBlocks zeros(int L) {
        BBlocks b;
        b.L = L;
        const int w = (L + 1) * (L + 1);
        for (int n = -L; n <= L; ++n) b.Bn.push_back(MatrixXcd::Zero(w, w));
        return b;
    }
};

inline BBlocks assemble_b_blocks(const DistributionCoefficients& dist, int L) {
    BBlocks b = BBlocks::zeros(L);
    for (const auto& t : *b_terms(L, dist.P)) b.at(t.n)(t.row, t.col) += t.coef * dist.get(t.p, t.u);
    return b;
}

// ---------------------------------------------------------------------------
// Moment tables

struct MomentTables {
    PolarGrid grid;
    int L = 0;
    int n_max = 0;                  ///< G^n stored for |n| <= n_max
    VectorXcd m1;                   ///< first moment per radius
    std::vector<MatrixXcd> G;       ///< G[n + n_max], M_r x M_r
    std::string distribution = "";  ///< "uniform" or "nonuniform"
    std::string source = "analytic";
    double sigma2 = 0.0;
    long long n_images = 0;
    bool debiased = false;
    bool symmetrized = false;

    const MatrixXcd& g(int n) const { return G[static_cast<std::size_t>(n + n_max)]; }
    MatrixXcd& g(int n) { return G[static_cast<std::size_t>(n + n_max)]; }

    /// m2(r_i, phi_s, r_j, phi_q) = sum_n e^{i n (phi_s - phi_q)} G^n_{ij}.
    cplx m2(int i, int s, int j, int q) const {
        cplx v = 0;
        const double d = grid.phi(s) - grid.phi(q);
        for (int n = -n_max; n <= n_max; ++n) v += std::polar(1.0, n * d) * g(n)(i, j);
        return v;
    }

    /// m2 as a function of radii pair and angle difference psi.
    cplx m2_psi(int i, int j, double psi) const {
        cplx v = 0;
        for (int n = -n_max; n <= n_max; ++n) v += std::polar(1.0, n * psi) * g(n)(i, j);
        return v;
    }

    /// Full (M_r M_phi) x (M_r M_phi) table, index k * M_phi + s.
    MatrixXcd m2_full() const {
        const int mr = grid.m_r(), mp = grid.n_phi;
        MatrixXcd out(mr * mp, mr * mp);
        for (int i = 0; i < mr; ++i)
            for (int s = 0; s < mp; ++s)
                for (int j = 0; j < mr; ++j)
                    for (int q = 0; q < mp; ++q) out(i * mp + s, j * mp + q) = m2(i, s, j, q);
        return out;
    }

    double g_norm() const {
        double s = 0;
        for (const auto& x : G) s += x.squaredNorm();
        return std::sqrt(s);
    }
};

/// Relative Frobenius distance between two G stacks over the common n range.
inline double g_relative_error(const MomentTables& est, const MomentTables& ref) {
    const int nm = std::max(est.n_max, ref.n_max);
    double num = 0, den = 0;
    for (int n = -nm; n <= nm; ++n) {
        const int mr = ref.grid.m_r();
        MatrixXcd a = std::abs(n) <= est.n_max ? est.g(n) : MatrixXcd::Zero(mr, mr);
        MatrixXcd b = std::abs(n) <= ref.n_max ? ref.g(n) : MatrixXcd::Zero(mr, mr);
        num += (a - b).squaredNorm();
        den += b.squaredNorm();
    }
    return std::sqrt(num / den);
}

inline void check_volume_grid(const VolumeCoefficients& vol, const PolarGrid& grid) {
    if (vol.radii != grid.radii) throw DomainError("volume radii do not match the polar grid");
}

/// m1(r) = sum_{l even <= min(L,P)} N_l^0/(2l+1) sum_m A_l^m(r) conj(B_{l,m}).
inline VectorXcd m1_analytic(const VolumeCoefficients& vol, const DistributionCoefficients& dist) {
    VectorXcd m1 = VectorXcd::Zero(vol.m_r());
    for (int l = 0; l <= std::min(vol.L, dist.P); l += 2) {
        VectorXcd frak(2 * l + 1);
        for (int m = -l; m <= l; ++m) frak(m + l) = cal_n_const(l, 0) / (2.0 * l + 1.0) * dist.get(l, m);
        m1 += vol.A[static_cast<std::size_t>(l)] * frak.conjugate();
    }
    return m1;
}

inline MomentTables m2_analytic(const VolumeCoefficients& vol, const DistributionCoefficients& dist,
                                const PolarGrid& grid) {
    check_volume_grid(vol, grid);
    MomentTables mt;
    mt.grid = grid;
    mt.L = vol.L;
    mt.n_max = vol.L;
    const MatrixXcd a = vol.stacked();
    const BBlocks b = assemble_b_blocks(dist, vol.L);
    for (int n = -vol.L; n <= vol.L; ++n) mt.G.push_back(a * b.at(n) * a.adjoint());
    mt.m1 = m1_analytic(vol, dist);
    bool flat = dist.norm_above(1) == 0.0;
    mt.distribution = flat ? "uniform" : "nonuniform";
    return mt;
}

/// Uniform-orientation moments: G^n = sum_l (N_l^n)^2/(2l+1) A_l A_l^H.
inline MomentTables m2_uniform_analytic(const VolumeCoefficients& vol, const PolarGrid& grid) {
    check_volume_grid(vol, grid);
    MomentTables mt;
    mt.grid = grid;
    mt.L = vol.L;
    mt.n_max = vol.L;
    mt.G.assign(static_cast<std::size_t>(2 * vol.L + 1), MatrixXcd::Zero(vol.m_r(), vol.m_r()));
    for (int l = 0; l <= vol.L; ++l) {
        const MatrixXcd c = vol.A[static_cast<std::size_t>(l)] * vol.A[static_cast<std::size_t>(l)].adjoint();
        for (int n = -l; n <= l; ++n) {
            const double w = n_const(l, n) * n_const(l, n) / (2.0 * l + 1.0);
            if (w != 0.0) mt.g(n) += w * c;
        }
    }
    mt.m1 = n_const(0, 0) * vol.A[0].col(0);
    mt.distribution = "uniform";
    return mt;
}

/// Pointwise uniform second moment (1/4pi) sum_l C_l(r_i, r_j) P_l(cos psi).
inline cplx m2_uniform_pointwise(const VolumeCoefficients& vol, int i, int j, double psi) {
    cplx v = 0;
    for (int l = 0; l <= vol.L; ++l) {
        const auto& a = vol.A[static_cast<std::size_t>(l)];
        cplx c = 0;
        for (int m = 0; m < a.cols(); ++m) c += a(i, m) * std::conj(a(j, m));
        v += c * legendre_p(l, std::cos(psi));
    }
    return v / (4 * kPi);
}

// ---------------------------------------------------------------------------
// Image simulation

struct ImageBatch {
    PolarGrid grid;
    MatrixXcd images;              ///< one image per row, column k * M_phi + s
    std::vector<Euler> rotations;  ///< hidden poses, kept for debugging
    double sigma = 0.0;

    int size() const { return static_cast<int>(images.rows()); }
};

/// Noiseless image in angular-Fourier form: c_n(r_k) = sum_l [A_l U^l(R)]_{k,n} N_l^n, |n| <= L.
inline MatrixXcd image_fourier_coefficients(const VolumeCoefficients& vol, const Euler& r) {
    MatrixXcd c = MatrixXcd::Zero(vol.m_r(), 2 * vol.L + 1);
    for (int l = 0; l <= vol.L; ++l) {
        const MatrixXcd v = vol.A[static_cast<std::size_t>(l)] * wigner_u(l, r);
        for (int n = -l; n <= l; ++n) {
            const double nn = n_const(l, n);
            if (nn != 0.0) c.col(n + vol.L) += nn * v.col(n + l);
        }
    }
    return c;
}

/// Noiseless image on the polar grid, flattened as k * M_phi + s.
inline VectorXcd render_image(const VolumeCoefficients& vol, const PolarGrid& grid, const Euler& r) {
    const MatrixXcd c = image_fourier_coefficients(vol, r);
    MatrixXcd e(2 * vol.L + 1, grid.n_phi);
    for (int n = -vol.L; n <= vol.L; ++n)
        for (int s = 0; s < grid.n_phi; ++s) e(n + vol.L, s) = std::polar(1.0, n * grid.phi(s));
    const MatrixXcd img = c * e;  // M_r x M_phi
    VectorXcd out(grid.m_r() * grid.n_phi);
    for (int k = 0; k < grid.m_r(); ++k)
        for (int s = 0; s < grid.n_phi; ++s) out(k * grid.n_phi + s) = img(k, s);
    return out;
}

inline Euler random_haar_euler(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double a = 2 * kPi * u(rng);
    const double b = std::acos(std::clamp(2 * u(rng) - 1, -1.0, 1.0));
    const double g = 2 * kPi * u(rng);
    return {a, b, g};
}

/// Rejection sampler for rotations distributed with density rho against Haar measure.
class RotationSampler {
public:
    explicit RotationSampler(const DistributionCoefficients& dist, int grid_theta = 48, int grid_phi = 96)
        : dist_(dist) {
        double mx = -1e300, mn = 1e300;
        for (int i = 0; i <= grid_theta; ++i) {
            const double th = kPi * i / grid_theta;
            for (int j = 0; j < grid_phi; ++j) {
                const double v = density_at_direction(dist_, th, 2 * kPi * j / grid_phi);
                mx = std::max(mx, v);
                mn = std::min(mn, v);
            }
        }
        if (mn < -1e-9) throw ValidationError("RotationSampler: truncated density is negative (min " + std::to_string(mn) + ")");
        envelope_ = 1.2 * mx;
        uniform_ = dist_.norm_above(1) == 0.0;
    }

    double envelope() const { return envelope_; }

    Euler draw(std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (long attempt = 0; attempt < 100000000L; ++attempt) {
            const Euler e = random_haar_euler(rng);
            if (uniform_) return e;
            const double d = density_at_direction(dist_, e.beta, e.alpha);
            if (d < -1e-9) throw ValidationError("RotationSampler: density negative at a sampled rotation");
            if (d > envelope_) throw ValidationError("RotationSampler: rejection envelope exceeded");
            if (u(rng) * envelope_ <= d) return e;
        }
        throw ValidationError("RotationSampler: acceptance rate too small");
    }

private:
    DistributionCoefficients dist_;
    double envelope_ = 1.0;
    bool uniform_ = false;
};

/// Seeds for independent streams of one chunk: stream 0 draws rotations, stream 1 draws noise.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t chunk, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(chunk), static_cast<std::uint32_t>(chunk >> 32),
                      static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

/// Images of chunk `chunk`: rotations from the rotation stream, noise of variance sigma^2 per sample.
inline ImageBatch simulate_images(const VolumeCoefficients& vol, const DistributionCoefficients& dist,
                                  const PolarGrid& grid, int n, double sigma, std::uint64_t seed,
                                  std::uint64_t chunk = 0, const RotationSampler* sampler = nullptr) {
    check_volume_grid(vol, grid);
    if (!vol.real_volume) throw DomainError("simulate_images: volume must be flagged real");
    if (n < 0) throw DomainError("simulate_images: negative image count");
    std::unique_ptr<RotationSampler> own;
    if (sampler == nullptr) {
        own = std::make_unique<RotationSampler>(dist);
        sampler = own.get();
    }
    ImageBatch batch;
    batch.grid = grid;
    batch.sigma = sigma;
    batch.images.resize(n, grid.m_r() * grid.n_phi);
    auto rot_rng = stream_rng(seed, chunk, 0);
    auto noise_rng = stream_rng(seed, chunk, 1);
    std::normal_distribution<double> g(0.0, sigma / std::sqrt(2.0));
    for (int i = 0; i < n; ++i) {
        const Euler r = sampler->draw(rot_rng);
        batch.rotations.push_back(r);
        VectorXcd img = render_image(vol, grid, r);
        if (sigma > 0)
            for (int k = 0; k < img.size(); ++k) img(k) += cplx(g(noise_rng), g(noise_rng));
        batch.images.row(i) = img.transpose();
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Empirical moments

/// Streaming one-pass accumulator of image sums; merge is associative.
class MomentAccumulator {
public:
    MomentAccumulator(PolarGrid grid, int n_max) : grid_(std::move(grid)), n_max_(n_max) {
        const int mr = grid_.m_r();
        sum_c0_ = VectorXcd::Zero(mr);
        sum_outer_.assign(static_cast<std::size_t>(2 * n_max_ + 1), MatrixXcd::Zero(mr, mr));
        dft_.resize(grid_.n_phi, 2 * n_max_ + 1);
        for (int s = 0; s < grid_.n_phi; ++s)
            for (int n = -n_max_; n <= n_max_; ++n)
                dft_(s, n + n_max_) = std::polar(1.0 / grid_.n_phi, -n * grid_.phi(s));
    }

    /// Adds each row of `images` (index k * M_phi + s) with a common weight.
    void add(const MatrixXcd& images, double weight = 1.0) {
        const int mr = grid_.m_r(), mp = grid_.n_phi;
        const int cnt = static_cast<int>(images.rows());
        if (images.cols() != mr * mp) throw DomainError("MomentAccumulator: image size does not match grid");
        std::vector<MatrixXcd> cn(static_cast<std::size_t>(2 * n_max_ + 1), MatrixXcd(mr, cnt));
        for (int i = 0; i < cnt; ++i) {
            MatrixXcd im(mr, mp);
            for (int k = 0; k < mr; ++k) im.row(k) = images.row(i).segment(k * mp, mp);
            const MatrixXcd c = im * dft_;
            for (int n = 0; n < 2 * n_max_ + 1; ++n) cn[static_cast<std::size_t>(n)].col(i) = c.col(n);
        }
        for (int n = 0; n < 2 * n_max_ + 1; ++n) {
            const auto& c = cn[static_cast<std::size_t>(n)];
            sum_outer_[static_cast<std::size_t>(n)].noalias() += weight * (c * c.adjoint());
        }
        sum_c0_ += weight * cn[static_cast<std::size_t>(n_max_)].rowwise().sum();
        weight_ += weight * cnt;
        count_ += cnt;
    }

    void add(const ImageBatch& batch) { add(batch.images); }

    /// Adds one image with the given weight (quadrature use).
    void add_weighted(const VectorXcd& image, double weight) { add(MatrixXcd(image.transpose()), weight); }

    void merge(const MomentAccumulator& o) {
        if (!o.grid_.same_as(grid_) || o.n_max_ != n_max_) throw DomainError("MomentAccumulator: incompatible merge");
        for (std::size_t n = 0; n < sum_outer_.size(); ++n) sum_outer_[n] += o.sum_outer_[n];
        sum_c0_ += o.sum_c0_;
        weight_ += o.weight_;
        count_ += o.count_;
    }

    long long count() const { return count_; }

    /// Mean moments with the noise bias sigma^2 removed from coincident samples.
    MomentTables finalize(double sigma2, int L, bool symmetrize = false) const {
        if (count_ == 0 || weight_ == 0.0) throw DomainError("empirical_moments: no images accumulated");
        MomentTables mt;
        mt.grid = grid_;
        mt.L = L;
        mt.n_max = n_max_;
        mt.m1 = sum_c0_ / weight_;
        const int mr = grid_.m_r();
        for (const auto& s : sum_outer_) {
            MatrixXcd g = s / weight_;
            g -= (sigma2 / grid_.n_phi) * MatrixXcd::Identity(mr, mr);
            mt.G.push_back(g);
        }
        mt.source = "empirical";
        mt.sigma2 = sigma2;
        mt.n_images = count_;
        mt.debiased = sigma2 > 0;
        if (symmetrize) symmetrize_moments(mt);
        return mt;
    }

    /// Projects onto the symmetries implied by a real volume and an in-plane-uniform,
    /// reflection-invariant image distribution: G^n real, symmetric, and G^n = G^{-n}.
    static void symmetrize_moments(MomentTables& mt) {
        for (int n = 0; n <= mt.n_max; ++n) {
            MatrixXd a = 0.5 * (mt.g(n).real() + mt.g(-n).real());
            a = 0.5 * (a + a.transpose()).eval();
            mt.g(n) = a.cast<cplx>();
            mt.g(-n) = mt.g(n);
        }
        mt.m1 = mt.m1.real().cast<cplx>();
        mt.symmetrized = true;
    }

private:
    PolarGrid grid_;
    int n_max_;
    MatrixXcd dft_;
    VectorXcd sum_c0_;
    std::vector<MatrixXcd> sum_outer_;
    double weight_ = 0.0;
    long long count_ = 0;
};

inline MomentTables empirical_moments(const ImageBatch& batch, int L, int n_max = -1, bool symmetrize = false) {
    if (batch.size() == 0) throw DomainError("empirical_moments: empty batch");
    MomentAccumulator acc(batch.grid, n_max < 0 ? L : n_max);
    acc.add(batch);
    return acc.finalize(batch.sigma * batch.sigma, L, symmetrize);
}

struct SimulationSpec {
    long long n_images = 0;
    double sigma = 0.0;
    std::uint64_t seed = 0;
    int chunk_size = 4096;
    int n_max = -1;  ///< defaults to L
    bool symmetrize = false;
};

/// Simulates images chunk by chunk and streams them into the accumulator; `sink`, when set,
/// also receives every chunk.
inline MomentTables simulate_moments(const VolumeCoefficients& vol, const DistributionCoefficients& dist,
                                     const PolarGrid& grid, const SimulationSpec& spec,
                                     const std::function<void(const ImageBatch&)>& sink = {}) {
    const RotationSampler sampler(dist);
    MomentAccumulator acc(grid, spec.n_max < 0 ? vol.L : spec.n_max);
    long long done = 0;
    for (std::uint64_t chunk = 0; done < spec.n_images; ++chunk) {
        const int n = static_cast<int>(std::min<long long>(spec.chunk_size, spec.n_images - done));
        const ImageBatch batch = simulate_images(vol, dist, grid, n, spec.sigma, spec.seed, chunk, &sampler);
        acc.add(batch);
        if (sink) sink(batch);
        done += n;
    }
    MomentTables mt = acc.finalize(spec.sigma * spec.sigma, vol.L, spec.symmetrize);
    mt.distribution = dist.norm_above(1) == 0.0 ? "uniform" : "nonuniform";
    return mt;
}

// ---------------------------------------------------------------------------
// SO(3) quadrature

struct SO3Quadrature {
    std::vector<Euler> nodes;
    std::vector<double> weights;  ///< sum to 1 (Haar probability measure)
};

/// Trapezoid in alpha and gamma, Gauss-Legendre in cos(beta); `order` points per angle.
inline SO3Quadrature so3_quadrature(int order) {
    SO3Quadrature q;
    const auto gl = gauss_legendre(order);
    for (int a = 0; a < order; ++a)
        for (int b = 0; b < order; ++b)
            for (int c = 0; c < order; ++c) {
                q.nodes.push_back({2 * kPi * a / order, std::acos(gl.x[static_cast<std::size_t>(b)]), 2 * kPi * c / order});
                q.weights.push_back(gl.w[static_cast<std::size_t>(b)] / (2.0 * order * order));
            }
    return q;
}

/// Direct integration of the defining moment integrals over SO(3): images are evaluated
/// pointwise as Phi_hat(R x) on the equatorial grid and the density through U^p_{u0}(R).
inline MomentTables oracle_m2(const VolumeCoefficients& vol, const DistributionCoefficients& dist,
                              const PolarGrid& grid, int order = -1) {
    check_volume_grid(vol, grid);
    if (order < 0) order = 2 * vol.L + dist.P + 2;
    const SO3Quadrature quad = so3_quadrature(order);
    const int mr = grid.m_r(), mp = grid.n_phi, dim = mr * mp;
    MatrixXcd m2 = MatrixXcd::Zero(dim, dim);
    VectorXcd m1 = VectorXcd::Zero(dim);
    const MatrixXcd a = vol.stacked();
    for (std::size_t t = 0; t < quad.nodes.size(); ++t) {
        const Euler& e = quad.nodes[t];
        const double rho = density_at(dist, e);
        const double w = quad.weights[t] * rho;
        if (w == 0.0) continue;
        const Eigen::Matrix3d R = rotation_matrix(e);
        MatrixXcd y(vol.width(), mp);
        for (int s = 0; s < mp; ++s) {
            const Eigen::Vector3d x(std::cos(grid.phi(s)), std::sin(grid.phi(s)), 0.0);
            y.col(s) = spherical_harmonics_all(vol.L, Eigen::Vector3d(R * x));
        }
        const MatrixXcd img = a * y;  // M_r x M_phi
        VectorXcd v(dim);
        for (int k = 0; k < mr; ++k)
            for (int s = 0; s < mp; ++s) v(k * mp + s) = img(k, s);
        m2.noalias() += w * (v * v.adjoint());
        m1 += w * v;
    }
    MomentTables mt;
    mt.grid = grid;
    mt.L = vol.L;
    mt.n_max = vol.L;
    mt.source = "oracle";
    mt.m1 = VectorXcd::Zero(mr);
    for (int k = 0; k < mr; ++k) mt.m1(k) = m1.segment(k * mp, mp).mean();
    for (int n = -vol.L; n <= vol.L; ++n) {
        MatrixXcd g = MatrixXcd::Zero(mr, mr);
        for (int i = 0; i < mr; ++i)
            for (int j = 0; j < mr; ++j) {
                cplx acc = 0;
                for (int s = 0; s < mp; ++s)
                    for (int q = 0; q < mp; ++q)
                        acc += m2(i * mp + s, j * mp + q) * std::polar(1.0, -n * (grid.phi(s) - grid.phi(q)));
                g(i, j) = acc / static_cast<double>(mp * mp);
            }
        mt.G.push_back(g);
    }
    return mt;
}

/// Full-angle first moment from the oracle, m1(r, phi) before angular averaging.
inline MatrixXcd oracle_m1_angular(const VolumeCoefficients& vol, const DistributionCoefficients& dist,
                                   const PolarGrid& grid, int order = -1) {
    if (order < 0) order = vol.L + dist.P + 2;
    const SO3Quadrature quad = so3_quadrature(order);
    MatrixXcd out = MatrixXcd::Zero(grid.m_r(), grid.n_phi);
    const MatrixXcd a = vol.stacked();
    for (std::size_t t = 0; t < quad.nodes.size(); ++t) {
        const double w = quad.weights[t] * density_at(dist, quad.nodes[t]);
        const Eigen::Matrix3d R = rotation_matrix(quad.nodes[t]);
        for (int s = 0; s < grid.n_phi; ++s) {
            const Eigen::Vector3d x(std::cos(grid.phi(s)), std::sin(grid.phi(s)), 0.0);
            out.col(s) += w * (a * spherical_harmonics_all(vol.L, Eigen::Vector3d(R * x)));
        }
    }
    return out;
}

/// Simulator-plus-accumulator path with quadrature nodes in place of random draws.
inline MomentTables quadrature_moments(const VolumeCoefficients& vol, const DistributionCoefficients& dist,
                                       const PolarGrid& grid, int order = -1) {
    if (order < 0) order = 2 * vol.L + dist.P + 2;
    const SO3Quadrature quad = so3_quadrature(order);
    MomentAccumulator acc(grid, vol.L);
    for (std::size_t t = 0; t < quad.nodes.size(); ++t) {
        const double w = quad.weights[t] * density_at(dist, quad.nodes[t]);
        acc.add_weighted(render_image(vol, grid, quad.nodes[t]), w);
    }
    return acc.finalize(0.0, vol.L);
}

// ---------------------------------------------------------------------------
// Serialization

inline void write_moments(const std::filesystem::path& path, const MomentTables& mt,
                          const json& provenance = json::object()) {
    std::vector<cplx> payload;
    for (int k = 0; k < mt.m1.size(); ++k) payload.push_back(mt.m1(k));
    for (const auto& g : mt.G)
        for (int i = 0; i < g.rows(); ++i)
            for (int j = 0; j < g.cols(); ++j) payload.push_back(g(i, j));
    json h = {{"grid", grid_to_json(mt.grid)}, {"L", mt.L},           {"n_max", mt.n_max},
              {"distribution", mt.distribution}, {"source", mt.source}, {"sigma2", mt.sigma2},
              {"n_images", mt.n_images},        {"debiased", mt.debiased}, {"symmetrized", mt.symmetrized},
              {"layout", "m1[r], then G^n[i][j] for n = -n_max..n_max"}};
    write_record(path, "moment_tables", h, payload, provenance);
}

inline MomentTables read_moments(const std::filesystem::path& path) {
    const Record rec = read_record(path, "moment_tables");
    MomentTables mt;
    const auto& h = rec.header;
    mt.grid = grid_from_json(h.at("grid"));
    mt.L = h.at("L").get<int>();
    mt.n_max = h.at("n_max").get<int>();
    mt.distribution = h.value("distribution", "");
    mt.source = h.value("source", "");
    mt.sigma2 = h.value("sigma2", 0.0);
    mt.n_images = h.value("n_images", 0LL);
    mt.debiased = h.value("debiased", false);
    mt.symmetrized = h.value("symmetrized", false);
    const int mr = mt.grid.m_r();
    const std::size_t expect = static_cast<std::size_t>(mr + (2 * mt.n_max + 1) * mr * mr);
    if (rec.payload.size() != expect) throw IoError(path.string() + ": moment payload size mismatch");
    std::size_t idx = 0;
    mt.m1.resize(mr);
    for (int k = 0; k < mr; ++k) mt.m1(k) = rec.payload[idx++];
    for (int n = -mt.n_max; n <= mt.n_max; ++n) {
        MatrixXcd g(mr, mr);
        for (int i = 0; i < mr; ++i)
            for (int j = 0; j < mr; ++j) g(i, j) = rec.payload[idx++];
        mt.G.push_back(g);
    }
    return mt;
}

/// Image stream file: header with grid and sigma, then images row by row.
class ImageFileWriter {
public:
    ImageFileWriter(std::filesystem::path path, PolarGrid grid, double sigma)
        : path_(std::move(path)), grid_(std::move(grid)), sigma_(sigma) {}

    void append(const ImageBatch& b) {
        for (int i = 0; i < b.size(); ++i)
            for (int c = 0; c < b.images.cols(); ++c) payload_.push_back(b.images(i, c));
        count_ += b.size();
    }

    void close(const json& provenance = json::object()) {
        write_record(path_, "image_batch",
                     {{"grid", grid_to_json(grid_)}, {"sigma", sigma_}, {"n_images", count_},
                      {"layout", "image-major, then k * M_phi + s"}},
                     payload_, provenance);
    }

private:
    std::filesystem::path path_;
    PolarGrid grid_;
    double sigma_;
    long long count_ = 0;
    std::vector<cplx> payload_;
};

/// Reads an image file in fixed-size chunks without loading the whole payload.
class ImageFileReader {
public:
    explicit ImageFileReader(const std::filesystem::path& path) : is_(path, std::ios::binary), where_(path.string()) {
        if (!is_) throw IoError("cannot open for reading: " + where_);
        header_ = read_record_header(is_, where_);
        if (header_.value("kind", "") != "image_batch") throw IoError(where_ + ": not an image batch");
        grid_ = grid_from_json(header_.at("grid"));
        sigma_ = header_.at("sigma").get<double>();
        total_ = header_.at("n_images").get<long long>();
    }

    const PolarGrid& grid() const { return grid_; }
    long long total() const { return total_; }

    /// Next batch of at most `n` images; empty when exhausted.
    ImageBatch next(int n) {
        ImageBatch b;
        b.grid = grid_;
        b.sigma = sigma_;
        const int cnt = static_cast<int>(std::min<long long>(n, total_ - read_));
        const int dim = grid_.m_r() * grid_.n_phi;
        b.images.resize(cnt, dim);
        for (int i = 0; i < cnt; ++i)
            for (int c = 0; c < dim; ++c) {
                const double re = detail::get_le<double>(is_);
                const double im = detail::get_le<double>(is_);
                b.images(i, c) = {re, im};
            }
        read_ += cnt;
        return b;
    }

private:
    std::ifstream is_;
    std::string where_;
    json header_;
    PolarGrid grid_;
    double sigma_ = 0;
    long long total_ = 0;
    long long read_ = 0;
};

}  // namespace modm
