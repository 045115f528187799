#include "cdiforge/cdiv_io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cdiforge {

namespace {

constexpr unsigned char kMagic[4] = {0x43, 0x44, 0x49, 0x56};  // "CDIV"
constexpr std::uint8_t kVersion = 1;

void put_u32le(std::string& buf, std::uint32_t v) {
    buf.push_back(char(v & 0xff));
    buf.push_back(char((v >> 8) & 0xff));
    buf.push_back(char((v >> 16) & 0xff));
    buf.push_back(char((v >> 24) & 0xff));
}

std::uint32_t get_u32le(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
}

void put_f32le(std::string& buf, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32le(buf, v);
}

float get_f32le(const unsigned char* p) {
    const std::uint32_t v = get_u32le(p);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

std::string header(CdivType dtype, Dims3 d) {
    std::string buf;
    buf.append(reinterpret_cast<const char*>(kMagic), 4);
    buf.push_back(char(kVersion));
    buf.push_back(char(std::uint8_t(dtype)));
    buf.push_back('\0');
    buf.push_back('\0');
    put_u32le(buf, std::uint32_t(d.nx));
    put_u32le(buf, std::uint32_t(d.ny));
    put_u32le(buf, std::uint32_t(d.nz));
    return buf;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cdiv: cannot open for write: " + path.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw std::runtime_error("cdiv: write failed: " + path.string());
}

struct Parsed {
    CdivType dtype;
    Dims3 dims;
    std::vector<unsigned char> payload;
};

Parsed read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cdiv: cannot open: " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 20) throw std::runtime_error("cdiv: truncated header: " + path.string());
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("cdiv: bad magic: " + path.string());
    if (bytes[4] != kVersion)
        throw std::runtime_error("cdiv: unsupported version " + std::to_string(bytes[4]) +
                                 ": " + path.string());
    if (bytes[5] > 1)
        throw std::runtime_error("cdiv: unknown dtype " + std::to_string(bytes[5]) + ": " +
                                 path.string());
    Parsed p;
    p.dtype = CdivType(bytes[5]);
    p.dims = Dims3{int(get_u32le(&bytes[8])), int(get_u32le(&bytes[12])),
                   int(get_u32le(&bytes[16]))};
    if (!p.dims.valid())
        throw std::runtime_error("cdiv: invalid dims " + p.dims.str() + ": " + path.string());
    const std::size_t scalars = p.dims.count() * (p.dtype == CdivType::complex_f32 ? 2 : 1);
    if (bytes.size() != 20 + 4 * scalars)
        throw std::runtime_error("cdiv: payload size mismatch: " + path.string());
    p.payload.assign(bytes.begin() + 20, bytes.end());
    return p;
}

}  // namespace

void write_cdiv(const std::filesystem::path& path, const RealVolume& vol) {
    std::string buf = header(CdivType::real_f32, vol.dims());
    buf.reserve(buf.size() + 4 * vol.size());
    for (std::size_t i = 0; i < vol.size(); ++i) put_f32le(buf, vol[i]);
    write_file(path, buf);
}

void write_cdiv(const std::filesystem::path& path, const ComplexVolume& vol) {
    std::string buf = header(CdivType::complex_f32, vol.dims());
    buf.reserve(buf.size() + 8 * vol.size());
    for (std::size_t i = 0; i < vol.size(); ++i) {
        put_f32le(buf, vol[i].real());
        put_f32le(buf, vol[i].imag());
    }
    write_file(path, buf);
}

CdivType cdiv_type(const std::filesystem::path& path) { return read_file(path).dtype; }

RealVolume read_cdiv_real(const std::filesystem::path& path) {
    Parsed p = read_file(path);
    if (p.dtype != CdivType::real_f32)
        throw std::runtime_error("cdiv: expected real volume: " + path.string());
    RealVolume vol(p.dims);
    for (std::size_t i = 0; i < vol.size(); ++i) vol[i] = get_f32le(&p.payload[4 * i]);
    if (!all_finite(vol))
        throw std::runtime_error("cdiv: non-finite values: " + path.string());
    return vol;
}

ComplexVolume read_cdiv_complex(const std::filesystem::path& path) {
    Parsed p = read_file(path);
    if (p.dtype != CdivType::complex_f32)
        throw std::runtime_error("cdiv: expected complex volume: " + path.string());
    ComplexVolume vol(p.dims);
    for (std::size_t i = 0; i < vol.size(); ++i)
        vol[i] = {get_f32le(&p.payload[8 * i]), get_f32le(&p.payload[8 * i + 4])};
    if (!all_finite(vol))
        throw std::runtime_error("cdiv: non-finite values: " + path.string());
    return vol;
}

}  // namespace cdiforge
