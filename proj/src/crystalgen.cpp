#include "cdiforge/crystalgen.hpp"

#include <cmath>
#include <stdexcept>

namespace cdiforge {

namespace {

constexpr std::uint64_t kPlaneSalt = 0x706c616e65736565ULL;
constexpr std::uint64_t kFieldSalt = 0x6669656c64736565ULL;

}  // namespace

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

double StrainTensor::max_abs() const {
    double m = 0.0;
    for (double v : e) m = std::max(m, std::abs(v));
    return m;
}

void CrystalGenConfig::validate() const {
    if (min_planes < 1 || max_planes < min_planes)
        throw std::invalid_argument("CrystalGenConfig: bad plane count range");
    if (strain_max < 0.0 || strain_max > 0.01 + 1e-12)
        throw std::invalid_argument("CrystalGenConfig: strain_max must be in [0, 0.01]");
    if (!(distance_lo > 0.0) || !(distance_hi > distance_lo) || distance_hi > 1.0)
        throw std::invalid_argument("CrystalGenConfig: bad distance range");
    if (subsamples < 1) throw std::invalid_argument("CrystalGenConfig: subsamples must be >= 1");
    if (box_padding < 0.0) throw std::invalid_argument("CrystalGenConfig: negative padding");
    if (max_redraws < 1) throw std::invalid_argument("CrystalGenConfig: max_redraws must be >= 1");
}

Vec3 sample_unit_normal(Rng& rng) {
    while (true) {
        Vec3 v {rng.gaussian(), rng.gaussian(), rng.gaussian()};
        const double n = v.norm();
        if (n > 1e-12) return v * (1.0 / n);
        // measure-zero degenerate draw, resample
    }
}

double crystal_region_half_extent(const GridSpec& grid, double box_padding) {
    grid.validate();
    const int n_min = std::min({grid.dims.nx, grid.dims.ny, grid.dims.nz});
    const double h = n_min * grid.voxel_pitch / 4.0 - box_padding;
    if (h <= 0.0)
        throw std::invalid_argument(
            "crystal region collapsed: padding " + std::to_string(box_padding) +
            " leaves no room on grid " + grid.dims.str());
    return h;
}

namespace detail {

VoxelizeResult voxelize_checked(const CrystalSpec& spec, const GridSpec& grid,
                                int subsamples) {
    grid.validate();
    const Dims3 d = grid.dims;
    const double pitch = grid.voxel_pitch;
    const double hx = d.nx * pitch / 2.0, hy = d.ny * pitch / 2.0, hz = d.nz * pitch / 2.0;
    const double region = crystal_region_half_extent(grid, spec.box_padding);

    auto inside = [&](const Vec3& p) {
        if (std::abs(p.x) > region || std::abs(p.y) > region || std::abs(p.z) > region)
            return false;
        for (const ClipPlane& c : spec.planes)
            if (c.normal.dot(p) > c.distance) return false;
        return true;
    };

    RealVolume occ(d, 0.0f);
    const int s = subsamples;
    const double sub_step = pitch / s;

    // Voxels that can intersect the region cube; everything else is zero.
    auto vox_range = [&](double half, int n) {
        const int lo = std::max(0, int(std::floor((half - region) / pitch)) - 1);
        const int hi = std::min(n - 1, int(std::ceil((half + region) / pitch)) + 1 - 1);
        return std::pair<int, int>(lo, hi);
    };
    auto [x0, x1] = vox_range(hx, d.nx);
    auto [y0, y1] = vox_range(hy, d.ny);
    auto [z0, z1] = vox_range(hz, d.nz);

    double occupied_volume = 0.0;
    for (int x = x0; x <= x1; ++x) {
        const double bx = x * pitch - hx;
        for (int y = y0; y <= y1; ++y) {
            const double by = y * pitch - hy;
            for (int z = z0; z <= z1; ++z) {
                const double bz = z * pitch - hz;

                // Corner classification: a convex solid either contains the
                // whole cell, misses it entirely on one face, or cuts it.
                int corners_in = 0;
                bool all_out_one_face = false;
                {
                    bool in_all = true;
                    for (int c = 0; c < 8 && in_all; ++c) {
                        Vec3 p {bx + (c & 1 ? pitch : 0.0), by + (c & 2 ? pitch : 0.0),
                                bz + (c & 4 ? pitch : 0.0)};
                        if (inside(p)) ++corners_in; else in_all = false;
                    }
                    if (corners_in == 8) {
                        occ.at(x, y, z) = 1.0f;
                        occupied_volume += pitch * pitch * pitch;
                        continue;
                    }
                    // whole cell on the far side of one constraint?
                    auto cell_outside = [&](auto dist) {
                        for (int c = 0; c < 8; ++c) {
                            Vec3 p {bx + (c & 1 ? pitch : 0.0), by + (c & 2 ? pitch : 0.0),
                                    bz + (c & 4 ? pitch : 0.0)};
                            if (dist(p) <= 0.0) return false;
                        }
                        return true;
                    };
                    if (cell_outside([&](const Vec3& p) { return std::abs(p.x) - region; }) ||
                        cell_outside([&](const Vec3& p) { return std::abs(p.y) - region; }) ||
                        cell_outside([&](const Vec3& p) { return std::abs(p.z) - region; }))
                        all_out_one_face = true;
                    if (!all_out_one_face)
                        for (const ClipPlane& cp : spec.planes) {
                            if (cell_outside([&](const Vec3& p) {
                                    return cp.normal.dot(p) - cp.distance;
                                })) {
                                all_out_one_face = true;
                                break;
                            }
                        }
                }
                if (all_out_one_face) continue;

                int hits = 0;
                for (int i = 0; i < s; ++i)
                    for (int j = 0; j < s; ++j)
                        for (int k = 0; k < s; ++k) {
                            Vec3 p {bx + (i + 0.5) * sub_step, by + (j + 0.5) * sub_step,
                                    bz + (k + 0.5) * sub_step};
                            if (inside(p)) ++hits;
                        }
                const double frac = double(hits) / double(s * s * s);
                occ.at(x, y, z) = float(frac);
                occupied_volume += frac * pitch * pitch * pitch;
            }
        }
    }

    VoxelizeResult res;
    res.fill_fraction = occupied_volume / (8.0 * region * region * region);

    // Support bounding box must stay within half the grid per axis.
    int lo[3] = {d.nx, d.ny, d.nz}, hi[3] = {-1, -1, -1};
    for (int x = 0; x < d.nx; ++x)
        for (int y = 0; y < d.ny; ++y)
            for (int z = 0; z < d.nz; ++z)
                if (occ.at(x, y, z) > 0.0f) {
                    lo[0] = std::min(lo[0], x); hi[0] = std::max(hi[0], x);
                    lo[1] = std::min(lo[1], y); hi[1] = std::max(hi[1], y);
                    lo[2] = std::min(lo[2], z); hi[2] = std::max(hi[2], z);
                }
    const int n[3] = {d.nx, d.ny, d.nz};
    res.touches_half_bound = false;
    for (int a = 0; a < 3; ++a)
        if (hi[a] >= lo[a] && hi[a] - lo[a] + 1 > n[a] / 2) res.touches_half_bound = true;

    const float peak = vmax(occ);
    if (peak > 0.0f) {
        const float inv = 1.0f / peak;
        for (std::size_t i = 0; i < occ.size(); ++i) occ[i] *= inv;
    }
    res.occupancy = std::move(occ);
    return res;
}

}  // namespace detail

RealVolume voxelize_occupancy(const CrystalSpec& spec, const GridSpec& grid, int subsamples) {
    auto res = detail::voxelize_checked(spec, grid, subsamples);
    if (res.touches_half_bound)
        throw std::runtime_error(
            "voxelize_occupancy: crystal leaks past the central half of the box "
            "(oversampling < 2); spec seed " + std::to_string(spec.seed));
    return std::move(res.occupancy);
}

CrystalSpec generate_spec(std::uint64_t seed, const CrystalGenConfig& cfg,
                          const GridSpec& grid) {
    cfg.validate();
    const double region = crystal_region_half_extent(grid, cfg.box_padding);
    Rng rng(mix_seed(seed, kPlaneSalt));

    for (int attempt = 0; attempt < cfg.max_redraws; ++attempt) {
        CrystalSpec spec;
        spec.seed = seed;
        spec.random_field_amplitude = cfg.random_field_amplitude;
        spec.random_field_smoothness = cfg.random_field_smoothness;
        spec.box_padding = cfg.box_padding;
        spec.include_strain = cfg.include_strain;
        spec.n_planes =
            cfg.min_planes + int(rng.uniform_int(std::uint64_t(cfg.max_planes - cfg.min_planes + 1)));
        spec.planes.reserve(spec.n_planes);
        for (int i = 0; i < spec.n_planes; ++i)
            spec.planes.push_back(
                {sample_unit_normal(rng),
                 rng.uniform(cfg.distance_lo * region, cfg.distance_hi * region)});
        for (double& e : spec.affine_strain.e) e = rng.uniform(-cfg.strain_max, cfg.strain_max);

        auto res = detail::voxelize_checked(spec, grid, cfg.subsamples);
        if (!res.touches_half_bound && res.fill_fraction >= cfg.min_region_fill) return spec;
    }
    throw std::runtime_error("generate_spec: " + std::to_string(cfg.max_redraws) +
                             " consecutive rejected draws for seed " + std::to_string(seed) +
                             " (degenerate config)");
}

DisplacementField synth_displacement(const CrystalSpec& spec, const RealVolume& occupancy,
                                     const GridSpec& grid, Rng& rng) {
    const Dims3 d = grid.dims;
    if (!(occupancy.dims() == d))
        throw std::invalid_argument("synth_displacement: occupancy dims " +
                                    occupancy.dims().str() + " != grid dims " + d.str());
    DisplacementField u {RealVolume(d, 0.0f), RealVolume(d, 0.0f), RealVolume(d, 0.0f)};
    if (!spec.include_strain) return u;

    const double pitch = grid.voxel_pitch;
    const double hx = d.nx * pitch / 2.0, hy = d.ny * pitch / 2.0, hz = d.nz * pitch / 2.0;

    // occupancy-weighted centroid, lattice units
    double wsum = 0.0;
    Vec3 rc {0, 0, 0};
    for (int x = 0; x < d.nx; ++x)
        for (int y = 0; y < d.ny; ++y)
            for (int z = 0; z < d.nz; ++z) {
                const double w = occupancy.at(x, y, z);
                if (w <= 0.0) continue;
                wsum += w;
                rc = rc + Vec3{(x + 0.5) * pitch - hx, (y + 0.5) * pitch - hy,
                               (z + 0.5) * pitch - hz} * w;
            }
    if (wsum > 0.0) rc = rc * (1.0 / wsum);

    // smooth random field, one white-noise volume per component
    RealVolume* comps[3] = {&u.ux, &u.uy, &u.uz};
    for (int c = 0; c < 3; ++c) {
        RealVolume noise(d);
        for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = float(rng.gaussian());
        noise = gaussian_blur(noise, spec.random_field_smoothness);
        float peak = 0.0f;
        for (std::size_t i = 0; i < noise.size(); ++i)
            peak = std::max(peak, std::abs(noise[i]));
        const double scale = peak > 0.0f ? spec.random_field_amplitude / peak : 0.0;
        RealVolume& comp = *comps[c];
        for (std::size_t i = 0; i < comp.size(); ++i) comp[i] = float(noise[i] * scale);
    }

    for (int x = 0; x < d.nx; ++x)
        for (int y = 0; y < d.ny; ++y)
            for (int z = 0; z < d.nz; ++z) {
                const std::size_t i = d.index(x, y, z);
                if (occupancy[i] <= 0.0f) {
                    u.ux[i] = u.uy[i] = u.uz[i] = 0.0f;
                    continue;
                }
                const Vec3 r {(x + 0.5) * pitch - hx, (y + 0.5) * pitch - hy,
                              (z + 0.5) * pitch - hz};
                const Vec3 affine = spec.affine_strain.apply(r - rc);
                u.ux[i] += float(affine.x);
                u.uy[i] += float(affine.y);
                u.uz[i] += float(affine.z);
            }
    return u;
}

RealVolume phase_from_displacement(const DisplacementField& u, const BraggVector& g) {
    const Dims3 d = u.ux.dims();
    if (!(u.uy.dims() == d) || !(u.uz.dims() == d))
        throw std::invalid_argument("phase_from_displacement: component dims disagree");
    RealVolume phi(d);
    for (std::size_t i = 0; i < phi.size(); ++i)
        phi[i] = float(wrap_phase(g.g.x * u.ux[i] + g.g.y * u.uy[i] + g.g.z * u.uz[i]));
    return phi;
}

TrainingSample make_sample(const CrystalSpec& spec, const GridSpec& grid,
                           const CrystalGenConfig& cfg, const ForwardConfig& fwd,
                           const BraggVector& g) {
    TrainingSample s;
    s.shape = voxelize_occupancy(spec, grid, cfg.subsamples);
    Rng field_rng(mix_seed(spec.seed, kFieldSalt));
    const DisplacementField u = synth_displacement(spec, s.shape, grid, field_rng);
    s.phase = phase_from_displacement(u, g);
    s.magnitude = simulate_diffraction(s.shape, s.phase, fwd);
    return s;
}

}  // namespace cdiforge
