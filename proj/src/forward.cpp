#include "cdiforge/forward.hpp"

#include <stdexcept>

namespace cdiforge {

void ForwardConfig::validate() const {
    if (epsilon <= 0.0) throw std::invalid_argument("ForwardConfig: epsilon must be positive");
}

RealVolume simulate_diffraction(const RealVolume& shape, const RealVolume& phase,
                                const ForwardConfig& cfg) {
    cfg.validate();
    RealVolume m = magnitude(fft3_centered(recombine(shape, phase)));
    const float peak = vmax(m);
    if (!(peak > 0.0f))
        throw std::invalid_argument("simulate_diffraction: shape is identically zero");
    if (cfg.normalize) {
        const float inv = 1.0f / peak;
        for (std::size_t i = 0; i < m.size(); ++i) m[i] *= inv;
    }
    return m;
}

std::array<double, 3> oversampling_ratio(const RealVolume& shape, double threshold) {
    const Dims3 d = shape.dims();
    int lo[3] = {d.nx, d.ny, d.nz};
    int hi[3] = {-1, -1, -1};
    for (int x = 0; x < d.nx; ++x)
        for (int y = 0; y < d.ny; ++y)
            for (int z = 0; z < d.nz; ++z) {
                if (shape.at(x, y, z) < threshold) continue;
                lo[0] = std::min(lo[0], x); hi[0] = std::max(hi[0], x);
                lo[1] = std::min(lo[1], y); hi[1] = std::max(hi[1], y);
                lo[2] = std::min(lo[2], z); hi[2] = std::max(hi[2], z);
            }
    if (hi[0] < 0)
        throw std::runtime_error("oversampling_ratio: empty support at threshold " +
                                 std::to_string(threshold));
    const int n[3] = {d.nx, d.ny, d.nz};
    std::array<double, 3> ratio;
    for (int a = 0; a < 3; ++a) ratio[a] = double(n[a]) / double(hi[a] - lo[a] + 1);
    return ratio;
}

}  // namespace cdiforge
