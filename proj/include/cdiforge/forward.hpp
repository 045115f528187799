#pragma once

#include <array>

#include "cdiforge/volume.hpp"

namespace cdiforge {

struct ForwardConfig {
    bool normalize = true;   // divide the magnitude by its maximum
    double epsilon = 1e-12;  // guard for divisions by |F|

    void validate() const;
};

// The Bragg-CDI forward model: |FFT(shape * exp(i*phase))|, optionally
// max-normalized. Throws on identically zero shape.
RealVolume simulate_diffraction(const RealVolume& shape, const RealVolume& phase,
                                const ForwardConfig& cfg = {});

// Per-axis grid extent / support bounding-box extent, support defined by
// shape >= threshold. Throws on empty support.
std::array<double, 3> oversampling_ratio(const RealVolume& shape, double threshold = 0.1);

}  // namespace cdiforge
