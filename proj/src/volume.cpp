#include "cdiforge/volume.hpp"

#include <fftw3.h>

#include <cmath>
#include <cstring>
#include <map>
#include <mutex>
#include <stdexcept>

namespace cdiforge {

std::string Dims3::str() const {
    return "(" + std::to_string(nx) + ", " + std::to_string(ny) + ", " +
           std::to_string(nz) + ")";
}

RealVolume::RealVolume(Dims3 d, float fill) : dims_(d), data_(d.count(), fill) {
    if (!d.valid()) throw std::invalid_argument("RealVolume: invalid dims " + d.str());
}

ComplexVolume::ComplexVolume(Dims3 d, std::complex<float> fill)
    : dims_(d), data_(d.count(), fill) {
    if (!d.valid()) throw std::invalid_argument("ComplexVolume: invalid dims " + d.str());
}

void GridSpec::validate() const {
    if (!dims.valid() || !dims.all_even() || dims.nx < 2 || dims.ny < 2 || dims.nz < 2)
        throw std::invalid_argument("GridSpec: dims must be even and >= 2, got " + dims.str());
    if (voxel_pitch <= 0.0)
        throw std::invalid_argument("GridSpec: voxel_pitch must be positive");
}

ComplexVolume recombine(const RealVolume& shape, const RealVolume& phase) {
    if (!(shape.dims() == phase.dims()))
        throw std::invalid_argument("recombine: shape dims " + shape.dims().str() +
                                    " != phase dims " + phase.dims().str());
    ComplexVolume out(shape.dims());
    const std::size_t n = shape.size();
    for (std::size_t i = 0; i < n; ++i) {
        const float s = shape[i];
        const float p = phase[i];
        out[i] = {s * std::cos(p), s * std::sin(p)};
    }
    return out;
}

RealVolume magnitude(const ComplexVolume& f) {
    RealVolume out(f.dims());
    const std::size_t n = f.size();
    for (std::size_t i = 0; i < n; ++i)
        out[i] = float(std::hypot(double(f[i].real()), double(f[i].imag())));
    return out;
}

double wrap_phase(double t) {
    const double two_pi = 2.0 * M_PI;
    double w = t - two_pi * std::floor((t + M_PI) / two_pi);
    if (w >= M_PI) w -= two_pi;  // guards the t = +pi rounding edge
    return w;
}

float vmax(const RealVolume& v) {
    float m = -std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < v.size(); ++i) m = std::max(m, v[i]);
    return m;
}

float vmin(const RealVolume& v) {
    float m = std::numeric_limits<float>::infinity();
    for (std::size_t i = 0; i < v.size(); ++i) m = std::min(m, v[i]);
    return m;
}

double vsum(const RealVolume& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i];
    return s;
}

double max_abs(const ComplexVolume& v) {
    double m = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i)
        m = std::max(m, std::hypot(double(v[i].real()), double(v[i].imag())));
    return m;
}

bool all_finite(const RealVolume& v) {
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!std::isfinite(v[i])) return false;
    return true;
}

bool all_finite(const ComplexVolume& v) {
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!std::isfinite(v[i].real()) || !std::isfinite(v[i].imag())) return false;
    return true;
}

namespace {

// FFTW planning is not thread-safe; executing distinct buffers is. Plans are
// cached per (dims, direction) and reused through the new-array interface on
// fftw_malloc'd buffers, which share alignment with the planning buffer.
std::mutex& fftw_mutex() {
    static std::mutex m;
    return m;
}

fftw_plan dft3_plan(Dims3 d, int sign) {
    static std::map<std::tuple<int, int, int, int>, fftw_plan> cache;
    std::lock_guard<std::mutex> lock(fftw_mutex());
    auto key = std::make_tuple(d.nx, d.ny, d.nz, sign);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    fftw_complex* buf = fftw_alloc_complex(d.count());
    fftw_plan p = fftw_plan_dft_3d(d.nx, d.ny, d.nz, buf, buf, sign, FFTW_ESTIMATE);
    fftw_free(buf);
    if (!p) throw std::runtime_error("fftw: failed to plan 3D DFT for dims " + d.str());
    cache.emplace(key, p);
    return p;
}

fftw_plan r2r_plan(int n, fftw_r2r_kind kind) {
    static std::map<std::pair<int, int>, fftw_plan> cache;
    std::lock_guard<std::mutex> lock(fftw_mutex());
    auto key = std::make_pair(n, int(kind));
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    std::vector<double> buf(n);
    fftw_plan p = fftw_plan_r2r_1d(n, buf.data(), buf.data(), kind,
                                   FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (!p) throw std::runtime_error("fftw: failed to plan 1D r2r of size " + std::to_string(n));
    cache.emplace(key, p);
    return p;
}

void require_even(const Dims3& d, const char* op) {
    if (!d.valid() || !d.all_even())
        throw std::invalid_argument(std::string(op) + ": dims must be even, got " + d.str());
}

}  // namespace

namespace detail {

void fft3_centered_f64(Dims3 d, std::complex<double>* data, bool inverse) {
    const std::size_t n = d.count();
    fftw_complex* buf = fftw_alloc_complex(n);

    // Fold the pre-shift into the gather: buf[u] = data[u + n/2 mod n].
    const int hx = d.nx / 2, hy = d.ny / 2, hz = d.nz / 2;
    for (int x = 0; x < d.nx; ++x) {
        const int sx = (x + hx) % d.nx;
        for (int y = 0; y < d.ny; ++y) {
            const int sy = (y + hy) % d.ny;
            const std::size_t row = d.index(x, y, 0);
            const std::size_t srow = d.index(sx, sy, 0);
            for (int z = 0; z < d.nz; ++z) {
                const std::complex<double>& v = data[srow + std::size_t((z + hz) % d.nz)];
                buf[row + z][0] = v.real();
                buf[row + z][1] = v.imag();
            }
        }
    }

    fftw_execute_dft(dft3_plan(d, inverse ? FFTW_BACKWARD : FFTW_FORWARD), buf, buf);

    const double scale = inverse ? 1.0 / double(n) : 1.0;
    for (int x = 0; x < d.nx; ++x) {
        const int sx = (x + hx) % d.nx;
        for (int y = 0; y < d.ny; ++y) {
            const int sy = (y + hy) % d.ny;
            const std::size_t row = d.index(x, y, 0);
            const std::size_t srow = d.index(sx, sy, 0);
            for (int z = 0; z < d.nz; ++z) {
                const fftw_complex& v = buf[srow + std::size_t((z + hz) % d.nz)];
                data[row + z] = {v[0] * scale, v[1] * scale};
            }
        }
    }
    fftw_free(buf);
}

void dct2_inplace(std::vector<double>& line) {
    const int n = int(line.size());
    fftw_execute_r2r(r2r_plan(n, FFTW_REDFT10), line.data(), line.data());
    const double w0 = 0.5 * std::sqrt(1.0 / n);
    const double wk = 0.5 * std::sqrt(2.0 / n);
    line[0] *= w0;
    for (int k = 1; k < n; ++k) line[k] *= wk;
}

void dct3_inplace(std::vector<double>& line) {
    const int n = int(line.size());
    const double w0 = std::sqrt(1.0 / n);
    const double wk = std::sqrt(0.5 / n);
    line[0] *= w0;
    for (int k = 1; k < n; ++k) line[k] *= wk;
    fftw_execute_r2r(r2r_plan(n, FFTW_REDFT01), line.data(), line.data());
}

}  // namespace detail

namespace {

std::vector<std::complex<double>> to_f64(const ComplexVolume& v) {
    std::vector<std::complex<double>> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = {double(v[i].real()), double(v[i].imag())};
    return out;
}

ComplexVolume from_f64(Dims3 d, const std::vector<std::complex<double>>& v) {
    ComplexVolume out(d);
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = {float(v[i].real()), float(v[i].imag())};
    return out;
}

}  // namespace

ComplexVolume fft3_centered(const ComplexVolume& obj) {
    require_even(obj.dims(), "fft3_centered");
    auto buf = to_f64(obj);
    detail::fft3_centered_f64(obj.dims(), buf.data(), false);
    return from_f64(obj.dims(), buf);
}

ComplexVolume ifft3_centered(const ComplexVolume& f) {
    require_even(f.dims(), "ifft3_centered");
    auto buf = to_f64(f);
    detail::fft3_centered_f64(f.dims(), buf.data(), true);
    return from_f64(f.dims(), buf);
}

namespace {

// Resample one axis by orthonormal DCT-II, coefficient truncation, and
// DCT-III at the target length, with the constant-preserving sqrt(m/n) factor.
void resample_axis(std::vector<double>& data, Dims3& cur, int axis, int m) {
    const int n = axis == 0 ? cur.nx : axis == 1 ? cur.ny : cur.nz;
    if (m == n) return;
    Dims3 next = cur;
    (axis == 0 ? next.nx : axis == 1 ? next.ny : next.nz) = m;

    std::vector<double> out(next.count(), 0.0);
    std::vector<double> in_line(n), out_line(m);
    const double scale = std::sqrt(double(m) / double(n));

    int d1, d2;  // sizes of the non-transformed axes, outer/inner
    if (axis == 0) { d1 = cur.ny; d2 = cur.nz; }
    else if (axis == 1) { d1 = cur.nx; d2 = cur.nz; }
    else { d1 = cur.nx; d2 = cur.ny; }

    auto idx_of = [](const Dims3& d, int axis_, int i, int j, int k) {
        // i runs along axis_, (j,k) over the remaining axes in x,y,z order.
        switch (axis_) {
            case 0: return d.index(i, j, k);
            case 1: return d.index(j, i, k);
            default: return d.index(j, k, i);
        }
    };

    for (int j = 0; j < d1; ++j) {
        for (int k = 0; k < d2; ++k) {
            for (int i = 0; i < n; ++i) in_line[i] = data[idx_of(cur, axis, i, j, k)];
            detail::dct2_inplace(in_line);
            for (int i = 0; i < m; ++i) out_line[i] = in_line[i] * scale;
            detail::dct3_inplace(out_line);
            for (int i = 0; i < m; ++i) out[idx_of(next, axis, i, j, k)] = out_line[i];
        }
    }
    data.swap(out);
    cur = next;
}

}  // namespace

RealVolume dct_resample(const RealVolume& vol, Dims3 target) {
    const Dims3 src = vol.dims();
    require_even(src, "dct_resample");
    require_even(target, "dct_resample");
    if (target.nx > src.nx || target.ny > src.ny || target.nz > src.nz)
        throw std::invalid_argument("dct_resample: target " + target.str() +
                                    " exceeds source " + src.str());

    std::vector<double> data(vol.size());
    for (std::size_t i = 0; i < vol.size(); ++i) data[i] = vol[i];

    Dims3 cur = src;
    resample_axis(data, cur, 0, target.nx);
    resample_axis(data, cur, 1, target.ny);
    resample_axis(data, cur, 2, target.nz);

    RealVolume out(target);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = float(data[i]);
    return out;
}

namespace {

template <typename V>
V center_shift_impl(const V& vol) {
    const Dims3 d = vol.dims();
    V out(d);
    const int hx = d.nx / 2, hy = d.ny / 2, hz = d.nz / 2;
    for (int x = 0; x < d.nx; ++x) {
        const int sx = (x + hx) % d.nx;
        for (int y = 0; y < d.ny; ++y) {
            const int sy = (y + hy) % d.ny;
            for (int z = 0; z < d.nz; ++z)
                out.at(sx, sy, (z + hz) % d.nz) = vol.at(x, y, z);
        }
    }
    return out;
}

}  // namespace

RealVolume center_shift(const RealVolume& vol, bool) {
    require_even(vol.dims(), "center_shift");
    return center_shift_impl(vol);
}

ComplexVolume center_shift(const ComplexVolume& vol, bool) {
    require_even(vol.dims(), "center_shift");
    return center_shift_impl(vol);
}

namespace {

// Periodic tap set for one axis: taps at offsets 0..len-1 applied modulo n.
std::vector<double> circular_gauss_kernel(int n, double sigma) {
    const int r = int(std::ceil(4.0 * sigma));
    std::vector<double> circ;
    if (2 * r + 1 >= n) {
        circ.assign(n, 0.0);
        for (int dlt = -r; dlt <= r; ++dlt)
            circ[std::size_t(((dlt % n) + n) % n)] += std::exp(-0.5 * dlt * dlt / (sigma * sigma));
    } else {
        circ.assign(2 * r + 1, 0.0);
        for (int dlt = -r; dlt <= r; ++dlt)
            circ[std::size_t(dlt + r)] = std::exp(-0.5 * dlt * dlt / (sigma * sigma));
    }
    double s = 0.0;
    for (double v : circ) s += v;
    for (double& v : circ) v /= s;
    return circ;
}

void blur_axis(std::vector<double>& data, const Dims3& d, int axis, double sigma) {
    const int n = axis == 0 ? d.nx : axis == 1 ? d.ny : d.nz;
    const auto kern = circular_gauss_kernel(n, sigma);
    const bool folded = int(kern.size()) == n;
    const int r = folded ? 0 : (int(kern.size()) - 1) / 2;

    int d1, d2;
    if (axis == 0) { d1 = d.ny; d2 = d.nz; }
    else if (axis == 1) { d1 = d.nx; d2 = d.nz; }
    else { d1 = d.nx; d2 = d.ny; }

    auto idx_of = [&](int i, int j, int k) {
        switch (axis) {
            case 0: return d.index(i, j, k);
            case 1: return d.index(j, i, k);
            default: return d.index(j, k, i);
        }
    };

    std::vector<double> line(n), res(n);
    for (int j = 0; j < d1; ++j) {
        for (int k = 0; k < d2; ++k) {
            for (int i = 0; i < n; ++i) line[i] = data[idx_of(i, j, k)];
            for (int i = 0; i < n; ++i) {
                double acc = 0.0;
                if (folded) {
                    for (int t = 0; t < n; ++t) acc += kern[t] * line[((i - t) % n + n) % n];
                } else {
                    for (int t = -r; t <= r; ++t) acc += kern[t + r] * line[((i - t) % n + n) % n];
                }
                res[i] = acc;
            }
            for (int i = 0; i < n; ++i) data[idx_of(i, j, k)] = res[i];
        }
    }
}

}  // namespace

RealVolume gaussian_blur(const RealVolume& vol, double sigma) {
    if (sigma <= 0.0) return vol;
    const Dims3 d = vol.dims();
    std::vector<double> data(vol.size());
    for (std::size_t i = 0; i < vol.size(); ++i) data[i] = vol[i];
    blur_axis(data, d, 0, sigma);
    blur_axis(data, d, 1, sigma);
    blur_axis(data, d, 2, sigma);
    RealVolume out(d);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = float(data[i]);
    return out;
}

}  // namespace cdiforge
