#include <CLI11.hpp>

#include <iostream>

#include "modm/cli.hpp"

using namespace modm;
using namespace modm::cli;

namespace {

struct Overrides {
    std::string config;
    std::optional<int> L, P, m_r, n_phi, max_iter, restarts, threads;
    std::optional<std::uint64_t> seed;
    std::optional<long long> n_images;
    std::optional<double> sigma, tol, svd_cutoff;
    bool analytic = false, write_images = false, positivity = false;
    std::string out;

    // Precedence: defaults < config file < command-line flags.
    ExperimentConfig resolve() const {
        ExperimentConfig c;
        if (!config.empty()) c = load_config(config);
        if (L) c.L = *L;
        if (P) c.P = *P;
        if (m_r) c.m_r = *m_r;
        if (n_phi) c.n_phi = *n_phi;
        if (seed) c.seed = *seed;
        if (n_images) c.n_images = *n_images;
        if (sigma) c.sigma = *sigma;
        if (max_iter) c.max_iter = *max_iter;
        if (restarts) c.restarts = *restarts;
        if (threads) c.threads = *threads;
        if (tol) c.tol = *tol;
        if (svd_cutoff) c.svd_cutoff = *svd_cutoff;
        if (analytic) c.analytic = true;
        if (write_images) c.write_images = true;
        if (positivity) c.positivity = true;
        if (!out.empty()) c.output = out;
        return c;
    }
};

void add_common(CLI::App* s, Overrides& o) {
    s->add_option("--config", o.config, "JSON experiment configuration")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "master seed");
    s->add_option("--out", o.out, "output directory (default $MODM_OUTPUT_ROOT/<command>)");
}

void add_solver(CLI::App* s, Overrides& o) {
    s->add_option("--restarts", o.restarts, "random restarts");
    s->add_option("--max-iter", o.max_iter, "iterations per restart");
    s->add_option("--tol", o.tol, "relative objective decrease tolerance");
    s->add_option("--svd-cutoff", o.svd_cutoff, "relative singular value cutoff for the targets");
    s->add_option("--threads", o.threads, "concurrent restarts");
    s->add_flag("--positivity", o.positivity, "enforce positivity of the distribution at collocation points");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Method of double moments: simulate, reconstruct and analyze"};
    app.set_version_flag("--version", std::string(kLibraryVersion));
    app.require_subcommand(1);

    Overrides sim;
    auto* s = app.add_subcommand("simulate", "write ground truth and moment tables");
    add_common(s, sim);
    s->add_option("--L", sim.L, "volume bandlimit");
    s->add_option("--P", sim.P, "distribution bandlimit (even)");
    s->add_option("--m-r", sim.m_r, "number of radial nodes");
    s->add_option("--n-phi", sim.n_phi, "angular samples per ring");
    s->add_option("--n-images", sim.n_images, "images per dataset");
    s->add_option("--sigma", sim.sigma, "noise standard deviation");
    s->add_flag("--analytic", sim.analytic, "write population moments instead of sampling images");
    s->add_flag("--write-images", sim.write_images, "also write the image stacks");

    Overrides rec;
    ReconstructInputs rin;
    std::string m1, ref_vol, ref_dist;
    auto* r = app.add_subcommand("reconstruct", "recover volume and distribution from two moment tables");
    add_common(r, rec);
    add_solver(r, rec);
    r->add_option("--uniform", rin.uniform, "moments of the uniform dataset")->required()->check(CLI::ExistingFile);
    r->add_option("--nonuniform", rin.nonuniform, "moments of the non-uniform dataset")->required()->check(CLI::ExistingFile);
    r->add_option("--m1", m1, "moment file whose m1 is used (default: the uniform file)")->check(CLI::ExistingFile);
    r->add_option("--reference-volume", ref_vol, "ground truth for the aligned-error report")->check(CLI::ExistingFile);
    r->add_option("--reference-distribution", ref_dist, "ground-truth distribution")->check(CLI::ExistingFile);

    AnalyzeInputs ain;
    std::string ana_out, ref_d, est_d;
    auto* a = app.add_subcommand("analyze", "align an estimate to a reference and report FSC");
    a->add_option("--reference", ain.reference, "reference volume coefficients")->required()->check(CLI::ExistingFile);
    a->add_option("--estimate", ain.estimate, "estimated volume coefficients")->required()->check(CLI::ExistingFile);
    a->add_option("--reference-distribution", ref_d, "reference distribution")->check(CLI::ExistingFile);
    a->add_option("--estimate-distribution", est_d, "estimated distribution")->check(CLI::ExistingFile);
    a->add_option("--out", ana_out, "output directory");

    int l_min = 3, l_max = 6;
    std::uint64_t id_seed = 1;
    std::string id_out;
    auto* c = app.add_subcommand("check-identifiability", "numerical rank checks of the identifiability lemmas");
    c->add_option("--l-min", l_min, "smallest bandlimit");
    c->add_option("--l-max", l_max, "largest bandlimit");
    c->add_option("--seed", id_seed, "seed for the generic coefficients");
    c->add_option("--out", id_out, "output directory");

    std::string coeff, ex_out;
    int grid_size = 64;
    auto* e = app.add_subcommand("export-volume", "write a real-space voxel volume from coefficients");
    e->add_option("coefficients", coeff, "volume coefficient file")->required()->check(CLI::ExistingFile);
    e->add_option("--grid-size", grid_size, "voxels per axis");
    e->add_option("--out", ex_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? kSuccess : kValidation;
    }

    return run_guarded([&]() -> int {
        if (*s) return cmd_simulate(sim.resolve(), std::cerr);
        if (*r) {
            if (!m1.empty()) rin.m1 = m1;
            if (!ref_vol.empty()) rin.reference_volume = ref_vol;
            if (!ref_dist.empty()) rin.reference_distribution = ref_dist;
            return cmd_reconstruct(rin, rec.resolve(), std::cerr);
        }
        if (*a) {
            if (!ref_d.empty()) ain.reference_distribution = ref_d;
            if (!est_d.empty()) ain.estimate_distribution = est_d;
            return cmd_analyze(ain, ana_out, std::cerr);
        }
        if (*c) return cmd_check_identifiability(l_min, l_max, id_out, id_seed, std::cerr);
        return cmd_export_volume(coeff, grid_size, ex_out, std::cerr);
    });
}
