#pragma once

// Command layer behind the modm executable: configuration, the five subcommands, voxel export
// and the reproducibility manifest. Every function here returns or throws; exit codes are
// assigned in one place (exit_code_for).

#include <fftw3.h>
#include <gsl/gsl_spline.h>
#include <openssl/evp.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "modm/analysis.hpp"
#include "modm/errors.hpp"
#include "modm/io.hpp"
#include "modm/kam.hpp"
#include "modm/model.hpp"
#include "modm/moments.hpp"
#include "modm/solver.hpp"

namespace modm::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kSuccess = 0, kFailure = 1, kNotConverged = 2, kValidation = 3, kIo = 4 };

inline json module_versions() {
    return {{"library", kLibraryVersion}, {"format", kFormatVersion},   {"special_fns", kLibraryVersion},
            {"model", kLibraryVersion},   {"moments", kLibraryVersion}, {"kam", kLibraryVersion},
            {"solver", kLibraryVersion},  {"analysis", kLibraryVersion}, {"cli", kLibraryVersion}};
}

// ---------------------------------------------------------------------------
// Hashing

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256: digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

inline std::string file_sha256(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    return sha256_hex(buf.str());
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct ExperimentConfig {
    int L = 3;
    int P = -1;  ///< default 2L
    int m_r = 20;
    int n_phi = -1;  ///< default 4L+4
    double r_max = 0.5;
    std::string radial = "equispaced";

    std::uint64_t seed = 1;  ///< master seed; unset sub-seeds derive from it
    std::optional<std::uint64_t> volume_seed, distribution_seed, image_seed, solver_seed;
    std::string volume_file, distribution_file;
    double concentration = 3.0;

    long long n_images = 100000;
    double sigma = 0.0;
    int chunk_size = 4096;
    bool write_images = false;
    bool symmetrize = false;
    bool analytic = false;

    int max_iter = 500;
    double tol = 1e-10;
    int restarts = 5;
    double svd_cutoff = 1e-10;
    double target_objective = 1e-22;
    int threads = 1;
    bool positivity = false;

    std::string output;  ///< not part of the config hash

    int p() const { return P < 0 ? 2 * L : P; }
    int phi() const { return n_phi < 0 ? 4 * L + 4 : n_phi; }
    std::uint64_t vol_seed() const { return volume_seed.value_or(seed); }
    std::uint64_t dist_seed() const { return distribution_seed.value_or(seed + 1); }
    std::uint64_t img_seed() const { return image_seed.value_or(seed + 2); }
    std::uint64_t sol_seed() const { return solver_seed.value_or(seed + 4); }

    PolarGrid grid() const {
        if (radial == "equispaced") return PolarGrid::equispaced(m_r, phi(), r_max);
        if (radial == "gauss_legendre") return PolarGrid::gauss_legendre_radial(m_r, phi(), r_max);
        throw ValidationError("config: grid.radial must be 'equispaced' or 'gauss_legendre'");
    }

    SolverConfig solver() const {
        SolverConfig s;
        s.max_iter = max_iter;
        s.tol = tol;
        s.restarts = restarts;
        s.seed = sol_seed();
        s.svd_cutoff = svd_cutoff;
        s.target_objective = target_objective;
        s.threads = threads;
        s.positivity.enabled = positivity;
        return s;
    }
};

/// Resolved configuration (defaults and derived seeds filled in), without the output directory.
inline json config_to_json(const ExperimentConfig& c) {
    return {{"L", c.L},
            {"P", c.p()},
            {"grid", {{"m_r", c.m_r}, {"n_phi", c.phi()}, {"r_max", c.r_max}, {"radial", c.radial}}},
            {"seed", c.seed},
            {"volume", {{"seed", c.vol_seed()}, {"file", c.volume_file}}},
            {"distribution", {{"seed", c.dist_seed()}, {"concentration", c.concentration}, {"file", c.distribution_file}}},
            {"images",
             {{"n", c.n_images},
              {"sigma", c.sigma},
              {"seed", c.img_seed()},
              {"chunk_size", c.chunk_size},
              {"write", c.write_images},
              {"symmetrize", c.symmetrize}}},
            {"analytic", c.analytic},
            {"solver",
             {{"max_iter", c.max_iter},
              {"tol", c.tol},
              {"restarts", c.restarts},
              {"svd_cutoff", c.svd_cutoff},
              {"target_objective", c.target_objective},
              {"seed", c.sol_seed()},
              {"threads", c.threads},
              {"positivity", c.positivity}}}};
}

namespace detail {

inline void check_keys(const json& j, const std::vector<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ValidationError("config: '" + where + "' must be an object");
    for (const auto& [k, v] : j.items())
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            throw ValidationError("config: unknown key '" + where + (where.empty() ? "" : ".") + k + "'");
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void get_seed(const json& j, std::optional<std::uint64_t>& out) {
    if (j.contains("seed")) out = j.at("seed").get<std::uint64_t>();
}

}  // namespace detail

/// Applies the fields present in `j` on top of `c`; unknown keys are rejected.
inline ExperimentConfig config_from_json(const json& j, ExperimentConfig c = {}) {
    using detail::check_keys;
    using detail::get_if;
    try {
        check_keys(j, {"L", "P", "grid", "seed", "volume", "distribution", "images", "analytic", "solver", "output"}, "");
        get_if(j, "L", c.L);
        get_if(j, "P", c.P);
        get_if(j, "seed", c.seed);
        get_if(j, "analytic", c.analytic);
        get_if(j, "output", c.output);
        if (j.contains("grid")) {
            const auto& g = j.at("grid");
            check_keys(g, {"m_r", "n_phi", "r_max", "radial"}, "grid");
            get_if(g, "m_r", c.m_r);
            get_if(g, "n_phi", c.n_phi);
            get_if(g, "r_max", c.r_max);
            get_if(g, "radial", c.radial);
        }
        if (j.contains("volume")) {
            const auto& v = j.at("volume");
            check_keys(v, {"seed", "file"}, "volume");
            detail::get_seed(v, c.volume_seed);
            get_if(v, "file", c.volume_file);
        }
        if (j.contains("distribution")) {
            const auto& d = j.at("distribution");
            check_keys(d, {"seed", "concentration", "file"}, "distribution");
            detail::get_seed(d, c.distribution_seed);
            get_if(d, "concentration", c.concentration);
            get_if(d, "file", c.distribution_file);
        }
        if (j.contains("images")) {
            const auto& i = j.at("images");
            check_keys(i, {"n", "sigma", "seed", "chunk_size", "write", "symmetrize"}, "images");
            get_if(i, "n", c.n_images);
            get_if(i, "sigma", c.sigma);
            detail::get_seed(i, c.image_seed);
            get_if(i, "chunk_size", c.chunk_size);
            get_if(i, "write", c.write_images);
            get_if(i, "symmetrize", c.symmetrize);
        }
        if (j.contains("solver")) {
            const auto& s = j.at("solver");
            check_keys(s, {"max_iter", "tol", "restarts", "svd_cutoff", "target_objective", "seed", "threads", "positivity"},
                       "solver");
            get_if(s, "max_iter", c.max_iter);
            get_if(s, "tol", c.tol);
            get_if(s, "restarts", c.restarts);
            get_if(s, "svd_cutoff", c.svd_cutoff);
            get_if(s, "target_objective", c.target_objective);
            detail::get_seed(s, c.solver_seed);
            get_if(s, "threads", c.threads);
            get_if(s, "positivity", c.positivity);
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config: ") + e.what());
    }
    return c;
}

inline ExperimentConfig load_config(const fs::path& path, ExperimentConfig base = {}) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path.string());
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j, std::move(base));
}

inline std::string config_hash(const ExperimentConfig& c) { return sha256_hex(config_to_json(c).dump()); }

/// Hard invariants raise ValidationError; soft ones are returned as warnings.
inline std::vector<std::string> validate_config(const ExperimentConfig& c, bool for_solver = true) {
    std::vector<std::string> warn;
    auto fail = [](const std::string& m) { throw ValidationError("config: " + m); };
    if (c.L < 1) fail("L must be >= 1");
    if (c.p() < 2 || c.p() % 2 != 0) fail("P must be even and >= 2");
    if (c.p() < 2 * c.L) warn.push_back("P < 2L: the distribution is not identifiable beyond degree P");
    if (c.L < 3) warn.push_back("L < 3: exact fits of the moments need not be unique up to rotation");
    if (for_solver && c.m_r < (c.L + 1) * (c.L + 1)) fail("grid.m_r must be >= (L+1)^2");
    if (c.phi() < 4 * c.L + 2) fail("grid.n_phi must be >= 4L+2");
    if (!(c.r_max > 0)) fail("grid.r_max must be positive");
    if (!c.analytic && c.n_images < 1) fail("images.n must be positive");
    if (c.sigma < 0) fail("images.sigma must be nonnegative");
    if (c.chunk_size < 1) fail("images.chunk_size must be positive");
    if (c.max_iter < 0 || c.restarts < 1) fail("solver.max_iter must be >= 0 and solver.restarts >= 1");
    if (c.threads < 1) fail("solver.threads must be >= 1");
    c.grid();
    return warn;
}

/// Output directory: explicit value, else $MODM_OUTPUT_ROOT/<command>, else ./modm_output/<command>.
inline fs::path resolve_output(const std::string& explicit_dir, const std::string& command) {
    if (!explicit_dir.empty()) return explicit_dir;
    if (const char* root = std::getenv("MODM_OUTPUT_ROOT"); root && *root) return fs::path(root) / command;
    return fs::path("modm_output") / command;
}

// ---------------------------------------------------------------------------
// Manifest

class Manifest {
public:
    Manifest(std::string command, fs::path dir, json config, std::string hash)
        : dir_(std::move(dir)) {
        j_["command"] = std::move(command);
        j_["config"] = std::move(config);
        j_["config_hash"] = std::move(hash);
        j_["versions"] = module_versions();
        j_["files"] = json::array();
        j_["warnings"] = json::array();
        j_["results"] = json::object();
    }

    json provenance() const {
        return {{"command", j_["command"]}, {"config_hash", j_["config_hash"]}, {"versions", j_["versions"]}};
    }

    /// One comment line for text outputs.
    std::string text_header() const {
        return "# modm " + std::string(kLibraryVersion) + " command=" + j_["command"].get<std::string>() +
               " config_hash=" + j_["config_hash"].get<std::string>() + "\n";
    }

    fs::path path(const std::string& name) const { return dir_ / name; }

    void add_file(const std::string& name, const std::string& role) {
        const fs::path p = dir_ / name;
        j_["files"].push_back({{"name", name}, {"role", role}, {"bytes", fs::file_size(p)}, {"sha256", file_sha256(p)}});
    }

    void warn(const std::string& w) { j_["warnings"].push_back(w); }
    json& results() { return j_["results"]; }
    json& root() { return j_; }

    void write() const { write_text(dir_ / "manifest.json", j_.dump(2) + "\n"); }

private:
    fs::path dir_;
    json j_;
};

inline void ensure_dir(const fs::path& d) {
    std::error_code ec;
    fs::create_directories(d, ec);
    if (ec) throw IoError("cannot create output directory " + d.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Voxel export

struct VoxelVolume {
    int G = 0;
    double voxel_size = 1.0;
    double fourier_spacing = 0;
    std::vector<float> data;  ///< x fastest: index (z * G + y) * G + x, origin at index G/2
    double max_imag_ratio = 0;
    std::vector<std::string> warnings;

    float at(int x, int y, int z) const { return data[(static_cast<std::size_t>(z) * G + y) * G + x]; }
};

namespace detail {

/// Cubic radial interpolant of one coefficient column with a regularity node at r = 0.
class RadialSpline {
public:
    RadialSpline(const std::vector<double>& radii, const VectorXcd& values, int l) {
        std::vector<double> r{0.0};
        r.insert(r.end(), radii.begin(), radii.end());
        std::vector<double> re{0.0}, im{0.0};
        for (int i = 0; i < values.size(); ++i) {
            re.push_back(values(i).real());
            im.push_back(values(i).imag());
        }
        if (l == 0) {
            // even extension a + b r^2 through the two innermost samples
            if (radii.size() >= 2) {
                const double r1 = radii[0] * radii[0], r2 = radii[1] * radii[1];
                re[0] = (r2 * re[1] - r1 * re[2]) / (r2 - r1);
                im[0] = (r2 * im[1] - r1 * im[2]) / (r2 - r1);
            } else {
                re[0] = re[1];
                im[0] = im[1];
            }
        }
        rmax_ = r.back();
        const gsl_interp_type* t = r.size() >= 3 ? gsl_interp_cspline : gsl_interp_linear;
        re_ = gsl_spline_alloc(t, r.size());
        im_ = gsl_spline_alloc(t, r.size());
        gsl_spline_init(re_, r.data(), re.data(), r.size());
        gsl_spline_init(im_, r.data(), im.data(), r.size());
        acc_ = gsl_interp_accel_alloc();
    }
    RadialSpline(const RadialSpline&) = delete;
    RadialSpline& operator=(const RadialSpline&) = delete;
    ~RadialSpline() {
        gsl_spline_free(re_);
        gsl_spline_free(im_);
        gsl_interp_accel_free(acc_);
    }

    cplx operator()(double r) const {
        if (r > rmax_) return 0.0;
        return {gsl_spline_eval(re_, r, acc_), gsl_spline_eval(im_, r, acc_)};
    }

private:
    gsl_spline* re_ = nullptr;
    gsl_spline* im_ = nullptr;
    gsl_interp_accel* acc_ = nullptr;
    double rmax_ = 0;
};

inline int fft_frequency(int a, int g) { return a < (g + 1) / 2 ? a : a - g; }

}  // namespace detail

/// Samples the Fourier volume on a G^3 grid spanning [-r_max, r_max) per axis and applies the
/// inverse DFT scaled by dk^3, so the result approximates the continuous inverse transform at
/// x = (index - G/2) * voxel_size with voxel_size = 1 / (G dk).
inline VoxelVolume export_voxels(const VolumeCoefficients& vol, int G, double r_max) {
    if (G < 2 || G > 512) throw DomainError("export-volume: grid size must be in [2, 512]");
    if (!(r_max > 0)) throw DomainError("export-volume: r_max must be positive");
    VoxelVolume out;
    out.G = G;
    if (G < 4 * vol.L)
        out.warnings.push_back("grid size " + std::to_string(G) + " < 4L = " + std::to_string(4 * vol.L) +
                               "; angular detail is undersampled");
    const double dk = 2.0 * r_max / G;
    out.fourier_spacing = dk;
    out.voxel_size = 1.0 / (G * dk);

    std::vector<std::unique_ptr<detail::RadialSpline>> splines;
    for (int l = 0; l <= vol.L; ++l)
        for (int m = -l; m <= l; ++m)
            splines.push_back(std::make_unique<detail::RadialSpline>(vol.radii, vol.A[static_cast<std::size_t>(l)].col(m + l), l));
    const double rlim = std::min(r_max, vol.radii.empty() ? 0.0 : vol.radii.back());

    const std::size_t n = static_cast<std::size_t>(G) * G * G;
    fftw_complex* buf = fftw_alloc_complex(n);
    if (!buf) throw Error("export-volume: allocation failed");
    for (int az = 0; az < G; ++az)
        for (int ay = 0; ay < G; ++ay)
            for (int ax = 0; ax < G; ++ax) {
                const Eigen::Vector3d k(detail::fft_frequency(ax, G) * dk, detail::fft_frequency(ay, G) * dk,
                                        detail::fft_frequency(az, G) * dk);
                const double r = k.norm();
                cplx v = 0;
                if (r <= rlim) {
                    const VectorXcd y = spherical_harmonics_all(vol.L, r > 0 ? Eigen::Vector3d(k / r) : Eigen::Vector3d::UnitZ());
                    std::size_t s = 0;
                    for (int l = 0; l <= vol.L; ++l)
                        for (int m = -l; m <= l; ++m, ++s) v += (*splines[s])(r) * y(l * l + l + m);
                }
                const std::size_t idx = (static_cast<std::size_t>(az) * G + ay) * G + ax;
                buf[idx][0] = v.real();
                buf[idx][1] = v.imag();
            }
    fftw_plan plan = fftw_plan_dft_3d(G, G, G, buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
    fftw_execute(plan);
    fftw_destroy_plan(plan);

    out.data.assign(n, 0.0f);
    const double scale = dk * dk * dk;
    double max_re = 0, max_im = 0;
    for (int bz = 0; bz < G; ++bz)
        for (int by = 0; by < G; ++by)
            for (int bx = 0; bx < G; ++bx) {
                const std::size_t src = (static_cast<std::size_t>(bz) * G + by) * G + bx;
                // fftshift: sample at offset b (wrapped) goes to index b + G/2
                const int cx = (bx + G / 2) % G, cy = (by + G / 2) % G, cz = (bz + G / 2) % G;
                const double re = buf[src][0] * scale, im = buf[src][1] * scale;
                max_re = std::max(max_re, std::abs(re));
                max_im = std::max(max_im, std::abs(im));
                out.data[(static_cast<std::size_t>(cz) * G + cy) * G + cx] = static_cast<float>(re);
            }
    fftw_free(buf);
    out.max_imag_ratio = max_re > 0 ? max_im / max_re : 0.0;
    return out;
}

inline void write_voxels(const fs::path& raw, const fs::path& sidecar, const VoxelVolume& v, const json& provenance) {
    std::ofstream os(raw, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + raw.string());
    for (float f : v.data) {
        const auto bits = std::bit_cast<std::uint32_t>(f);
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
        os.write(b, 4);
    }
    if (!os) throw IoError("write failed: " + raw.string());
    os.close();
    const json j = {{"format", "raw float32 little-endian"},
                    {"dims", {v.G, v.G, v.G}},
                    {"order", "x fastest: index = (z * G + y) * G + x"},
                    {"origin_index", {v.G / 2, v.G / 2, v.G / 2}},
                    {"voxel_size", v.voxel_size},
                    {"fourier_spacing", v.fourier_spacing},
                    {"max_imag_ratio", v.max_imag_ratio},
                    {"warnings", v.warnings},
                    {"raw_sha256", file_sha256(raw)},
                    {"provenance", provenance}};
    write_text(sidecar, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Commands

struct TruthPair {
    VolumeCoefficients volume;
    DistributionCoefficients distribution;
};

inline TruthPair make_truth(const ExperimentConfig& c, const PolarGrid& grid) {
    TruthPair t;
    if (!c.volume_file.empty()) {
        t.volume = read_volume(c.volume_file);
        if (t.volume.radii != grid.radii) throw ValidationError("volume file radii do not match the configured grid");
        if (!t.volume.real_volume) throw ValidationError("volume file is not flagged as a real volume");
    } else {
        t.volume = random_volume(c.L, grid, c.vol_seed());
    }
    if (!c.distribution_file.empty()) {
        t.distribution = read_distribution(c.distribution_file);
        const auto rep = validate(t.distribution);
        if (!rep.ok) throw ValidationError("distribution file: " + rep.summary());
    } else {
        t.distribution = random_distribution(c.p(), c.dist_seed(), c.concentration);
    }
    return t;
}

/// Writes the ground truth and moment tables for the uniform and non-uniform datasets.
inline int cmd_simulate(const ExperimentConfig& c, std::ostream& log) {
    for (const auto& w : validate_config(c, false)) log << "warning: " << w << "\n";
    const PolarGrid grid = c.grid();
    const fs::path dir = resolve_output(c.output, "simulate");
    ensure_dir(dir);
    Manifest man("simulate", dir, config_to_json(c), config_hash(c));
    const json prov = man.provenance();
    for (const auto& w : validate_config(c, false)) man.warn(w);

    const TruthPair t = make_truth(c, grid);
    write_volume(man.path("volume_true.modm"), t.volume, prov);
    man.add_file("volume_true.modm", "ground-truth volume coefficients");
    write_distribution(man.path("distribution_true.modm"), t.distribution, prov);
    man.add_file("distribution_true.modm", "ground-truth distribution coefficients");

    const DistributionCoefficients uni = DistributionCoefficients::uniform(t.distribution.P);
    MomentTables mu, mn;
    if (c.analytic) {
        mu = m2_uniform_analytic(t.volume, grid);
        mu.m1 = m1_analytic(t.volume, uni);
        mn = m2_analytic(t.volume, t.distribution, grid);
        mn.m1 = m1_analytic(t.volume, t.distribution);
    } else {
        auto run = [&](const DistributionCoefficients& d, std::uint64_t seed, const std::string& tag) {
            SimulationSpec spec;
            spec.n_images = c.n_images;
            spec.sigma = c.sigma;
            spec.seed = seed;
            spec.chunk_size = c.chunk_size;
            spec.symmetrize = c.symmetrize;
            if (!c.write_images) return simulate_moments(t.volume, d, grid, spec);
            ImageFileWriter w(man.path("images_" + tag + ".modm"), grid, c.sigma);
            MomentTables mt = simulate_moments(t.volume, d, grid, spec, [&](const ImageBatch& b) { w.append(b); });
            w.close(prov);
            man.add_file("images_" + tag + ".modm", tag + " image stack");
            return mt;
        };
        mu = run(uni, c.img_seed(), "uniform");
        mn = run(t.distribution, c.img_seed() + 1, "nonuniform");
    }
    write_moments(man.path("m2_uniform.modm"), mu, prov);
    man.add_file("m2_uniform.modm", "uniform-orientation moments (m1 and G^n)");
    write_moments(man.path("m2_nonuniform.modm"), mn, prov);
    man.add_file("m2_nonuniform.modm", "non-uniform-orientation moments (m1 and G^n)");
    man.results() = {{"source", c.analytic ? "analytic" : "empirical"},
                     {"seeds",
                      {{"volume", c.vol_seed()},
                       {"distribution", c.dist_seed()},
                       {"images_uniform", c.img_seed()},
                       {"images_nonuniform", c.img_seed() + 1}}}};
    man.write();
    log << "wrote " << dir.string() << "\n";
    return kSuccess;
}

struct ReconstructInputs {
    fs::path uniform, nonuniform;
    std::optional<fs::path> m1;                 ///< defaults to the m1 stored with the uniform tables
    std::optional<fs::path> reference_volume;   ///< enables the aligned-error report
    std::optional<fs::path> reference_distribution;
};

inline int cmd_reconstruct(const ReconstructInputs& in, const ExperimentConfig& c, std::ostream& log) {
    const MomentTables mu = read_moments(in.uniform);
    const MomentTables mn = read_moments(in.nonuniform);
    if (!mu.grid.same_as(mn.grid)) throw ValidationError("reconstruct: uniform and non-uniform moment grids differ");
    if (mu.L != mn.L) throw ValidationError("reconstruct: moment tables have different bandlimits");
    VectorXcd m1 = mu.m1;
    if (in.m1) {
        const MomentTables m1t = read_moments(*in.m1);
        if (!m1t.grid.same_as(mu.grid)) throw ValidationError("reconstruct: m1 grid differs from the moment grid");
        m1 = m1t.m1;
    }
    ExperimentConfig cc = c;
    cc.L = mu.L;
    cc.m_r = mu.grid.m_r();
    cc.n_phi = mu.grid.n_phi;
    cc.r_max = mu.grid.r_max;
    const auto warnings = validate_config(cc, true);
    for (const auto& w : warnings) log << "warning: " << w << "\n";

    const fs::path dir = resolve_output(c.output, "reconstruct");
    ensure_dir(dir);
    json cfg = config_to_json(cc);
    cfg["inputs"] = {{"uniform", in.uniform.string()},
                     {"uniform_sha256", file_sha256(in.uniform)},
                     {"nonuniform", in.nonuniform.string()},
                     {"nonuniform_sha256", file_sha256(in.nonuniform)}};
    if (in.m1) cfg["inputs"]["m1"] = in.m1->string();
    Manifest man("reconstruct", dir, cfg, sha256_hex(cfg.dump()));
    for (const auto& w : warnings) man.warn(w);
    const json prov = man.provenance();

    SolverConfig sc = cc.solver();
    if (mu.source == "empirical") sc.kam.check_uniform = true;
    const ModmResult res = run_modm(mu, mn, m1, mu.L, sc, &log);

    write_volume(man.path("volume_est.modm"), res.volume, prov);
    man.add_file("volume_est.modm", "recovered volume coefficients");
    write_distribution(man.path("distribution_est.modm"), res.distribution, prov);
    man.add_file("distribution_est.modm", "recovered distribution coefficients (p <= 2L)");
    write_kam_factors(man.path("kam_factors.modm"), res.kam, prov);
    man.add_file("kam_factors.modm", "Kam factors, determined up to block-orthogonal O");
    write_solver_state(man.path("solver_state.modm"), res.state, prov);
    man.add_file("solver_state.modm", "final solver state (resumable)");
    {
        write_residual_csv(man.path("residuals.csv"), res.state);
        std::ifstream is(man.path("residuals.csv"));
        std::ostringstream body;
        body << is.rdbuf();
        is.close();
        write_text(man.path("residuals.csv"), man.text_header() + body.str());
    }
    man.add_file("residuals.csv", "per-iteration residual trace");

    json r = {{"status", to_string(res.state.status)},
              {"iterations", res.state.iteration},
              {"restart", res.state.restart},
              {"relative_objective", res.state.relative_objective},
              {"restart_status", res.state.restart_status},
              {"restart_objective", res.state.restart_objective},
              {"targets", {{"condition", res.targets.condition}, {"rank", res.targets.rank}, {"cutoff", res.targets.cutoff}}},
              {"kam", kam_diagnostics_json(res.kam, sc.kam)}};
    if (in.reference_volume) {
        const VolumeCoefficients ref = read_volume(*in.reference_volume);
        const AlignmentResult a = align(ref, res.volume);
        r["aligned_error"] = a.error;
        r["alignment"] = alignment_json(a);
        if (in.reference_distribution) {
            const auto rd = read_distribution(*in.reference_distribution);
            r["aligned_distribution_error"] = aligned_distribution_error(rd, res.distribution, a, res.distribution.P);
        }
        log << "aligned error " << a.error << "\n";
    }
    man.results() = r;
    man.write();
    log << "status " << to_string(res.state.status) << " after " << res.state.iteration << " iterations\n";
    return res.state.converged() ? kSuccess : kNotConverged;
}

struct AnalyzeInputs {
    fs::path reference, estimate;
    std::optional<fs::path> reference_distribution, estimate_distribution;
};

inline int cmd_analyze(const AnalyzeInputs& in, const std::string& output, std::ostream& log) {
    const VolumeCoefficients ref = read_volume(in.reference);
    const VolumeCoefficients est = read_volume(in.estimate);
    if (ref.L != est.L) throw ValidationError("analyze: bandlimit mismatch (" + std::to_string(ref.L) + " vs " +
                                              std::to_string(est.L) + ")");
    if (ref.radii != est.radii) throw ValidationError("analyze: radial grids differ");
    const fs::path dir = resolve_output(output, "analyze");
    ensure_dir(dir);
    json cfg = {{"reference", in.reference.string()},
                {"reference_sha256", file_sha256(in.reference)},
                {"estimate", in.estimate.string()},
                {"estimate_sha256", file_sha256(in.estimate)}};
    Manifest man("analyze", dir, cfg, sha256_hex(cfg.dump()));

    const AlignmentResult a = align(ref, est);
    const VolumeCoefficients aligned_ref = ref.transformed(a.S, a.eps);
    const auto f = fsc(aligned_ref, est);
    json aj = alignment_json(a);
    aj["provenance"] = man.provenance();
    if (in.reference_distribution && in.estimate_distribution) {
        const auto rd = read_distribution(*in.reference_distribution);
        const auto ed = read_distribution(*in.estimate_distribution);
        aj["distribution_error"] = aligned_distribution_error(rd, ed, a, std::min(rd.P, ed.P));
    }
    write_text(man.path("alignment.json"), aj.dump(2) + "\n");
    man.add_file("alignment.json", "alignment (S, eps) and per-degree residuals");
    write_text(man.path("fsc.csv"), man.text_header() + fsc_csv(ref.radii, f));
    man.add_file("fsc.csv", "coefficient-space FSC per radius");

    double lo = 1, mean = 0;
    int cnt = 0;
    for (const auto& v : f)
        if (v) {
            lo = std::min(lo, *v);
            mean += *v;
            ++cnt;
        }
    man.results() = {{"aligned_error", a.error}, {"eps", a.eps}, {"fsc_min", cnt ? lo : 0.0},
                     {"fsc_mean", cnt ? mean / cnt : 0.0}, {"fsc_missing", static_cast<int>(f.size()) - cnt}};
    if (aj.contains("distribution_error")) man.results()["distribution_error"] = aj["distribution_error"];
    man.write();
    log << "aligned error " << a.error << " (eps=" << a.eps << "), mean FSC " << (cnt ? mean / cnt : 0.0) << "\n";
    return kSuccess;
}

inline int cmd_check_identifiability(int l_min, int l_max, const std::string& output, std::uint64_t seed, std::ostream& log) {
    if (l_min < 1 || l_max < l_min) throw ValidationError("check-identifiability: need 1 <= l-min <= l-max");
    const fs::path dir = resolve_output(output, "check-identifiability");
    ensure_dir(dir);
    const json cfg = {{"l_min", l_min}, {"l_max", l_max}, {"seed", seed}};
    Manifest man("check-identifiability", dir, cfg, sha256_hex(cfg.dump()));
    json reports = json::array();
    std::ostringstream text;
    text << man.text_header();
    bool ok = true;
    auto add = [&](const RankReport& r) {
        reports.push_back(rank_report_json(r));
        text << rank_report_text(r) << "\n";
        ok = ok && r.passed();
    };
    for (int L = l_min; L <= l_max; ++L) {
        add(check_lemma_injectivity(L, generic_lower_coefficients(L, seed + static_cast<std::uint64_t>(L))));
        if (L >= 4) add(check_lemma_column_rank(L, seed + static_cast<std::uint64_t>(L)));
    }
    const auto sparse = check_lemma_sparse_instance(std::max(6, l_max));
    add(sparse.rank);
    text << "sparse instance diagonally dominant: " << (sparse.diagonally_dominant ? "yes" : "no")
         << " (min margin " << sparse.min_dominance_margin << ")\n";
    ok = ok && sparse.diagonally_dominant;
    const auto nv = check_nonvanishing(6, 12);
    text << "nonvanishing: " << nv.cg_count << " CG tuples (min " << nv.min_cg << "), " << nv.n_count
         << " N values (min " << nv.min_n << ") " << (nv.passed() ? "ok" : "FAILED") << "\n";
    ok = ok && nv.passed();
    const json out = {{"rank_reports", reports},
                      {"sparse_instance", {{"diagonally_dominant", sparse.diagonally_dominant},
                                           {"min_dominance_margin", sparse.min_dominance_margin}}},
                      {"nonvanishing", nonvanishing_json(nv)},
                      {"passed", ok},
                      {"provenance", man.provenance()}};
    write_text(man.path("identifiability.json"), out.dump(2) + "\n");
    man.add_file("identifiability.json", "rank reports with full spectra");
    write_text(man.path("identifiability.txt"), text.str());
    man.add_file("identifiability.txt", "human-readable summary");
    man.results() = {{"passed", ok}};
    man.write();
    log << text.str();
    return ok ? kSuccess : kValidation;
}

inline int cmd_export_volume(const fs::path& coeff, int G, const std::string& output, std::ostream& log) {
    const Record rec = read_record(coeff, "volume_coefficients");
    const VolumeCoefficients vol = read_volume(coeff);
    const double r_max = rec.header.contains("grid") ? rec.header.at("grid").value("r_max", vol.radii.back())
                                                    : vol.radii.back();
    const fs::path dir = resolve_output(output, "export-volume");
    ensure_dir(dir);
    const json cfg = {{"coefficients", coeff.string()}, {"coefficients_sha256", file_sha256(coeff)}, {"grid_size", G}};
    Manifest man("export-volume", dir, cfg, sha256_hex(cfg.dump()));
    const VoxelVolume v = export_voxels(vol, G, r_max);
    for (const auto& w : v.warnings) {
        log << "warning: " << w << "\n";
        man.warn(w);
    }
    const std::string stem = coeff.stem().string();
    write_voxels(man.path(stem + ".raw"), man.path(stem + ".json"), v, man.provenance());
    man.add_file(stem + ".raw", "real-space volume, float32");
    man.add_file(stem + ".json", "voxel sidecar");
    man.results() = {{"grid_size", G}, {"voxel_size", v.voxel_size}, {"max_imag_ratio", v.max_imag_ratio}};
    man.write();
    log << "wrote " << (dir / (stem + ".raw")).string() << "\n";
    return kSuccess;
}

/// Maps exceptions to the documented exit codes.
template <class F>
int run_guarded(F&& f, std::ostream& err = std::cerr) {
    try {
        return f();
    } catch (const IoError& e) {
        err << "I/O error: " << e.what() << "\n";
        return kIo;
    } catch (const ValidationError& e) {
        err << "validation error: " << e.what() << "\n";
        return kValidation;
    } catch (const DomainError& e) {
        err << "invalid input: " << e.what() << "\n";
        return kValidation;
    } catch (const IllPosedError& e) {
        err << "ill-posed: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
}

}  // namespace modm::cli
