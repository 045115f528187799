#pragma once

#include <filesystem>

#include "cdiforge/volume.hpp"

namespace cdiforge {

// CDIV container: "CDIV" magic, u8 version (1), u8 dtype (0 = real f32,
// 1 = complex interleaved f32), u16 zero pad, three u32 LE dims, then the
// little-endian payload in C-order with z fastest.
enum class CdivType : std::uint8_t { real_f32 = 0, complex_f32 = 1 };

void write_cdiv(const std::filesystem::path& path, const RealVolume& vol);
void write_cdiv(const std::filesystem::path& path, const ComplexVolume& vol);

CdivType cdiv_type(const std::filesystem::path& path);
RealVolume read_cdiv_real(const std::filesystem::path& path);
ComplexVolume read_cdiv_complex(const std::filesystem::path& path);

}  // namespace cdiforge
