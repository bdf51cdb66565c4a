#include "qsmfine/qvol.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace qsmfine::qvol {
namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void put_f32(std::vector<unsigned char>& out, double v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}
std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}
double get_f32(const unsigned char* p) {
  return static_cast<double>(std::bit_cast<float>(get_u32(p)));
}

std::vector<unsigned char> header(const VoxelGrid& g, DType dtype) {
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(g.nx));
  put_u32(out, static_cast<std::uint32_t>(g.ny));
  put_u32(out, static_cast<std::uint32_t>(g.nz));
  put_f32(out, g.dx);
  put_f32(out, g.dy);
  put_f32(out, g.dz);
  out.push_back(static_cast<unsigned char>(dtype));
  out.resize(kHeaderBytes, 0);
  return out;
}

void dump(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw RuntimeFailure("write failed for " + path.string());
}

}  // namespace

void write(const std::filesystem::path& path, const RealVolume& v) {
  auto bytes = header(v.grid(), DType::Real);
  bytes.reserve(kHeaderBytes + 4 * v.size());
  for (double a : v.data()) put_f32(bytes, a);
  dump(path, bytes);
}

void write(const std::filesystem::path& path, const ComplexVolume& v) {
  auto bytes = header(v.grid(), DType::Complex);
  bytes.reserve(kHeaderBytes + 8 * v.size());
  for (const Complex& a : v.data()) {
    put_f32(bytes, a.real());
    put_f32(bytes, a.imag());
  }
  dump(path, bytes);
}

std::variant<RealVolume, ComplexVolume> read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  const std::string where = "QVOL " + path.string() + ": ";
  if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw ValidationError(where + "bad magic");

  VoxelGrid g;
  g.nx = static_cast<int>(get_u32(&bytes[4]));
  g.ny = static_cast<int>(get_u32(&bytes[8]));
  g.nz = static_cast<int>(get_u32(&bytes[12]));
  g.dx = get_f32(&bytes[16]);
  g.dy = get_f32(&bytes[20]);
  g.dz = get_f32(&bytes[24]);
  if (!g.valid()) throw ValidationError(where + "invalid grid in header");
  const auto dtype = bytes[28];
  if (dtype > 1) throw ValidationError(where + "unknown dtype code");

  const std::size_t per_sample = dtype == 0 ? 4 : 8;
  if (bytes.size() != kHeaderBytes + per_sample * g.size())
    throw ValidationError(where + "payload size does not match header");

  const unsigned char* p = bytes.data() + kHeaderBytes;
  if (dtype == 0) {
    std::vector<double> data(g.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = get_f32(p + 4 * i);
    return RealVolume(g, std::move(data));
  }
  std::vector<Complex> data(g.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = Complex(get_f32(p + 8 * i), get_f32(p + 8 * i + 4));
  return ComplexVolume(g, std::move(data));
}

RealVolume read_real(const std::filesystem::path& path) {
  auto v = read(path);
  if (auto* r = std::get_if<RealVolume>(&v)) return std::move(*r);
  throw ValidationError("QVOL " + path.string() + ": expected a real volume");
}

ComplexVolume read_complex(const std::filesystem::path& path) {
  auto v = read(path);
  if (auto* c = std::get_if<ComplexVolume>(&v)) return std::move(*c);
  return to_complex(std::get<RealVolume>(v));
}

}  // namespace qsmfine::qvol
