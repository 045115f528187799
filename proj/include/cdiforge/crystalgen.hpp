#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cdiforge/forward.hpp"
#include "cdiforge/rng.hpp"
#include "cdiforge/volume.hpp"

namespace cdiforge {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const;
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
};

// Symmetric engineering-strain tensor, stored as (xx, yy, zz, xy, xz, yz).
struct StrainTensor {
    std::array<double, 6> e {0, 0, 0, 0, 0, 0};

    Vec3 apply(const Vec3& r) const {
        return {e[0] * r.x + e[3] * r.y + e[4] * r.z,
                e[3] * r.x + e[1] * r.y + e[5] * r.z,
                e[4] * r.x + e[5] * r.y + e[2] * r.z};
    }
    double max_abs() const;
};

struct ClipPlane {
    Vec3 normal;      // unit vector
    double distance;  // lattice units from the crystal center, > 0
};

// Scattering vector for the phase projection, phi = g . u. The default is
// the (111) reflection in reciprocal-vector convention, 2*pi*(1,1,1) with
// the lattice constant normalized to 1.
struct BraggVector {
    Vec3 g {2.0 * M_PI, 2.0 * M_PI, 2.0 * M_PI};
};

struct CrystalGenConfig {
    int min_planes = 4;
    int max_planes = 20;
    double strain_max = 0.01;            // |engineering strain component| bound
    double random_field_amplitude = 0.05;  // lattice units
    double random_field_smoothness = 3.0;  // Gaussian sigma in voxels
    double box_padding = 5.0;            // lattice units per side of the crystal region
    bool include_strain = true;
    double distance_lo = 0.25;           // clip distance range, fractions of the
    double distance_hi = 0.90;           //   region half-extent
    int subsamples = 4;                  // per-axis subdivision of each voxel
    double min_region_fill = 0.05;       // reject slivers below this fill fraction
    int max_redraws = 64;

    void validate() const;
};

struct CrystalSpec {
    std::uint64_t seed = 0;
    int n_planes = 0;
    std::vector<ClipPlane> planes;
    StrainTensor affine_strain;
    double random_field_amplitude = 0.05;
    double random_field_smoothness = 3.0;
    double box_padding = 5.0;
    bool include_strain = true;
};

// Per-component displacement in lattice units (lattice constant = 1).
struct DisplacementField {
    RealVolume ux, uy, uz;
};

struct TrainingSample {
    RealVolume shape;      // fractional occupancy in [0, 1]
    RealVolume phase;      // radians in [-pi, pi)
    RealVolume magnitude;  // diffraction magnitude per the forward model
};

// Uniform direction on the sphere via normalized independent Gaussians.
Vec3 sample_unit_normal(Rng& rng);

// Half-extent of the crystal region cube in lattice units: a quarter of the
// box extent minus the padding. Keeps every generated crystal inside the
// central half of the box (oversampling >= 2).
double crystal_region_half_extent(const GridSpec& grid, double box_padding);

// Draws clip planes and strain until the voxelized polyhedron is accepted
// (fill fraction and bounding checks). Throws after max_redraws rejections.
CrystalSpec generate_spec(std::uint64_t seed, const CrystalGenConfig& cfg,
                          const GridSpec& grid);

// Fractional occupancy of the clipped crystal region on the grid,
// max-normalized. Throws if the crystal leaks out of the central half-box.
RealVolume voxelize_occupancy(const CrystalSpec& spec, const GridSpec& grid,
                              int subsamples = 4);

// u(r) = strain*(r - centroid) + amplitude * smoothed-noise(r), masked to the
// occupancy support; identically zero when include_strain is off.
DisplacementField synth_displacement(const CrystalSpec& spec, const RealVolume& occupancy,
                                     const GridSpec& grid, Rng& rng);

// phi[v] = wrap(g . u[v]) in [-pi, pi).
RealVolume phase_from_displacement(const DisplacementField& u, const BraggVector& g = {});

// Full pipeline for one crystal: occupancy, displacement phase, and the
// simulated diffraction magnitude. Deterministic given spec.seed.
TrainingSample make_sample(const CrystalSpec& spec, const GridSpec& grid,
                           const CrystalGenConfig& cfg, const ForwardConfig& fwd = {},
                           const BraggVector& g = {});

namespace detail {

struct VoxelizeResult {
    RealVolume occupancy;     // max-normalized
    double fill_fraction;     // raw occupied volume / crystal region volume
    bool touches_half_bound;  // any occupied voxel outside the central half-box
};

VoxelizeResult voxelize_checked(const CrystalSpec& spec, const GridSpec& grid,
                                int subsamples);

}  // namespace detail

}  // namespace cdiforge
