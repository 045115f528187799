#pragma once

#include <optional>
#include <vector>

#include "cdiforge/volume.hpp"

namespace cdiforge {

struct RefineConfig {
    int iterations = 200;
    double step_size = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double smoothing_eps = 1e-8;       // guard for |F| and the smoothed |.|
    bool normalize_magnitude = true;   // scale |F(rho)| by its max before comparing
    std::optional<RealVolume> support_constraint;  // 0/1 mask applied after each step

    void validate() const;
};

// Smoothed magnitude mean-absolute-error against a measured magnitude and its
// closed-form gradient. The double-precision core is the reference path; the
// float entry points convert at the boundary.
//
// L(rho) = (1/N) sum_v s(|F(rho)|_v / M - m_v), s(x) = sqrt(x^2 + eps^2),
// with M = max |F(rho)| when normalization is on (M held constant in the
// gradient) and M = 1 otherwise.
class MagnitudeLoss {
public:
    MagnitudeLoss(std::vector<double> measured, Dims3 dims, double smoothing_eps,
                  bool normalize);
    MagnitudeLoss(const RealVolume& measured, const RefineConfig& cfg);

    double value(const std::vector<std::complex<double>>& rho) const;

    // Packaged as (dL/dRe(rho), dL/dIm(rho)), i.e. 2 * dL/d(rho*).
    std::vector<std::complex<double>> gradient(const std::vector<std::complex<double>>& rho) const;

    // One diffraction pass for both, shared when a caller needs the pair.
    std::pair<double, std::vector<std::complex<double>>> value_and_gradient(
        const std::vector<std::complex<double>>& rho) const;

    const Dims3& dims() const { return dims_; }

private:
    Dims3 dims_;
    std::vector<double> m_;
    double eps_;
    bool normalize_;
};

double magnitude_mae(const ComplexVolume& rho, const RealVolume& m,
                     const RefineConfig& cfg = {});
ComplexVolume loss_gradient(const ComplexVolume& rho, const RealVolume& m,
                            const RefineConfig& cfg = {});

struct RefineResult {
    ComplexVolume object;              // best-loss iterate
    std::vector<double> loss_history;  // one entry per iteration, post-update
    double initial_loss = 0.0;
    double best_loss = 0.0;
};

// ADAM descent on the magnitude MAE from rho0. Throws if the loss goes
// non-finite, reporting the iteration.
RefineResult refine(const ComplexVolume& rho0, const RealVolume& m, const RefineConfig& cfg);

}  // namespace cdiforge
