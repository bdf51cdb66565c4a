#pragma once

#include <cstdint>
#include <filesystem>
#include <variant>

#include "qsmfine/volume.hpp"

namespace qsmfine {

// QVOL layout (little-endian): "QVL1", u32 nx ny nz, f32 dx dy dz, u8 dtype
// (0 real, 1 complex interleaved), 7 zero bytes, then f32 samples in
// z-slowest order. Header is 32 bytes.
namespace qvol {

inline constexpr char kMagic[4] = {'Q', 'V', 'L', '1'};
inline constexpr std::size_t kHeaderBytes = 32;
enum class DType : std::uint8_t { Real = 0, Complex = 1 };

void write(const std::filesystem::path& path, const RealVolume& v);
void write(const std::filesystem::path& path, const ComplexVolume& v);

std::variant<RealVolume, ComplexVolume> read(const std::filesystem::path& path);
RealVolume read_real(const std::filesystem::path& path);
ComplexVolume read_complex(const std::filesystem::path& path);

}  // namespace qvol
}  // namespace qsmfine
