#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace cdiforge {

// Grid dimensions of a dense 3D field. Storage is C-order with z fastest:
// index = (x*ny + y)*nz + z.
struct Dims3 {
    int nx = 0, ny = 0, nz = 0;

    std::size_t count() const { return std::size_t(nx) * ny * nz; }
    bool all_even() const { return nx % 2 == 0 && ny % 2 == 0 && nz % 2 == 0; }
    bool valid() const { return nx > 0 && ny > 0 && nz > 0; }
    std::size_t index(int x, int y, int z) const {
        return (std::size_t(x) * ny + y) * nz + z;
    }
    bool operator==(const Dims3&) const = default;
    std::string str() const;
};

class RealVolume {
public:
    RealVolume() = default;
    RealVolume(Dims3 d, float fill = 0.0f);

    const Dims3& dims() const { return dims_; }
    std::size_t size() const { return data_.size(); }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }
    float& at(int x, int y, int z) { return data_[dims_.index(x, y, z)]; }
    float at(int x, int y, int z) const { return data_[dims_.index(x, y, z)]; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& raw() { return data_; }
    const std::vector<float>& raw() const { return data_; }

private:
    Dims3 dims_;
    std::vector<float> data_;
};

class ComplexVolume {
public:
    ComplexVolume() = default;
    ComplexVolume(Dims3 d, std::complex<float> fill = {0.0f, 0.0f});

    const Dims3& dims() const { return dims_; }
    std::size_t size() const { return data_.size(); }

    std::complex<float>& operator[](std::size_t i) { return data_[i]; }
    const std::complex<float>& operator[](std::size_t i) const { return data_[i]; }
    std::complex<float>& at(int x, int y, int z) { return data_[dims_.index(x, y, z)]; }
    const std::complex<float>& at(int x, int y, int z) const { return data_[dims_.index(x, y, z)]; }

    std::complex<float>* data() { return data_.data(); }
    const std::complex<float>* data() const { return data_.data(); }

private:
    Dims3 dims_;
    std::vector<std::complex<float>> data_;
};

// Grid geometry shared by the generator and the solvers. Dims must be even
// and at least 2 per axis so the zero-frequency voxel sits at n/2.
struct GridSpec {
    Dims3 dims {32, 32, 32};
    double voxel_pitch = 2.0;  // lattice units per voxel

    void validate() const;
};

// out[v] = shape[v] * exp(i*phase[v]). Throws on dimension mismatch.
ComplexVolume recombine(const RealVolume& shape, const RealVolume& phase);

// Centered 3D DFT: center-shift o DFT o inverse-center-shift, unnormalized
// forward. Zero frequency lands at voxel (nx/2, ny/2, nz/2). Even dims only.
ComplexVolume fft3_centered(const ComplexVolume& obj);

// Exact inverse of fft3_centered (carries the 1/N factor).
ComplexVolume ifft3_centered(const ComplexVolume& f);

RealVolume magnitude(const ComplexVolume& f);

// Resamples by full-volume DCT-II, low-frequency corner crop, inverse
// DCT-III at the target size. Each axis carries a sqrt(n_out/n_in) factor so
// constants are preserved. Target dims must not exceed the source.
RealVolume dct_resample(const RealVolume& vol, Dims3 target);

// Cyclic shift by n/2 per axis. Involutive for even dims; the flag is kept
// for call-site readability only.
RealVolume center_shift(const RealVolume& vol, bool forward = true);
ComplexVolume center_shift(const ComplexVolume& vol, bool forward = true);

// Separable periodic Gaussian blur, sigma in voxels. sigma <= 0 is identity.
RealVolume gaussian_blur(const RealVolume& vol, double sigma);

// Wrap to [-pi, pi).
double wrap_phase(double t);

// Reductions with 64-bit accumulation.
float vmax(const RealVolume& v);
float vmin(const RealVolume& v);
double vsum(const RealVolume& v);
double max_abs(const ComplexVolume& v);
bool all_finite(const RealVolume& v);
bool all_finite(const ComplexVolume& v);

namespace detail {

// In-place centered 3D DFT on double-precision data, z fastest. The one FFT
// kernel in the project; float entry points convert at the boundary.
void fft3_centered_f64(Dims3 d, std::complex<double>* data, bool inverse);

// In-place 1D DCT helpers used by dct_resample (orthonormal convention).
void dct2_inplace(std::vector<double>& line);
void dct3_inplace(std::vector<double>& line);

}  // namespace detail

}  // namespace cdiforge
