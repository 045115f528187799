#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "cdiforge/rng.hpp"
#include "cdiforge/volume.hpp"

namespace cdiforge {

enum class PRAlgorithm { ER, HIO };

struct PRConfig {
    int total_iters = 620;
    std::vector<std::pair<PRAlgorithm, int>> block_pattern {
        {PRAlgorithm::HIO, 40}, {PRAlgorithm::ER, 20}};
    double beta = 0.9;                 // HIO feedback
    double shrinkwrap_sigma = 1.0;     // voxels
    double shrinkwrap_threshold = 0.1; // fraction of the blurred maximum
    int shrinkwrap_interval = 20;      // iterations; 0 disables shrink-wrap
    int average_last = 20;             // complex-mean of the last iterates
    double epsilon = 1e-12;            // |F| division guard
    std::optional<ComplexVolume> init; // fixed start instead of random phases

    void validate() const;
};

// 0/1 mask, same dims as the data, never empty.
struct Support {
    RealVolume mask;

    std::size_t count() const;
};

// rho~ = ifft( m * F(rho) / (|F(rho)| + eps) ).
ComplexVolume modulus_project(const ComplexVolume& rho, const RealVolume& m,
                              double epsilon = 1e-12);

// Modulus projection followed by a hard support: zero outside.
ComplexVolume er_step(const ComplexVolume& rho, const RealVolume& m, const Support& support,
                      double epsilon = 1e-12);

// Modulus projection inside the support; rho - beta*rho~ outside.
ComplexVolume hio_step(const ComplexVolume& rho, const RealVolume& m, const Support& support,
                       double beta, double epsilon = 1e-12);

// Threshold of the Gaussian-blurred |rho| at threshold * max. The blurred
// maximum is always included, so the support cannot come back empty.
Support shrinkwrap(const ComplexVolume& rho, double sigma, double threshold);

// chi^2 = sum(|F(rho)| - m)^2 / sum m^2.
double chi2(const ComplexVolume& rho, const RealVolume& m);

struct PRResult {
    ComplexVolume rho_avg;
    std::vector<double> chi2_history;  // one entry per iteration
    Support final_support;
    double final_chi2 = 0.0;  // chi^2 of rho_avg
};

// The full schedule: block_pattern cycled for total_iters, shrink-wrap every
// shrinkwrap_interval iterations, complex mean of the last average_last
// iterates. Initialization applies random uniform phases to m unless
// cfg.init is provided.
PRResult run_phase_retrieval(const RealVolume& m, const PRConfig& cfg, Rng& rng);

// Independent restarts reduced by minimum final chi^2; parallel across
// restarts, deterministic given the seed.
PRResult run_phase_retrieval_restarts(const RealVolume& m, const PRConfig& cfg,
                                      std::uint64_t seed, int restarts, int threads = 0);

}  // namespace cdiforge
