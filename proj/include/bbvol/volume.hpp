#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "bbvol/error.hpp"

namespace bbvol {

/// Z x H x W scalar field, row-major z -> h -> w.
///
/// Values are held in double precision; the on-disk format is float32.
/// `id` tags the volume's provenance so that an oracle estimator can find the
/// ground truth matching a latent volume. It is not serialized.
struct Volume {
  std::size_t Z = 0, H = 0, W = 0;
  std::vector<double> data;
  std::uint64_t id = 0;

  Volume() = default;
  Volume(std::size_t z, std::size_t h, std::size_t w, double fill = 0.0)
      : Z(z), H(h), W(w), data(z * h * w, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t slice_size() const { return H * W; }

  double& at(std::size_t z, std::size_t h, std::size_t w) { return data[(z * H + h) * W + w]; }
  double at(std::size_t z, std::size_t h, std::size_t w) const { return data[(z * H + h) * W + w]; }

  std::span<double> slice(std::size_t z) { return {data.data() + z * H * W, H * W}; }
  std::span<const double> slice(std::size_t z) const { return {data.data() + z * H * W, H * W}; }

  bool same_shape(const Volume& o) const { return Z == o.Z && H == o.H && W == o.W; }
};

inline void require_same_shape(const Volume& a, const Volume& b, const char* where) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(where) + ": shape " + std::to_string(a.Z) + "x" + std::to_string(a.H) + "x" +
                         std::to_string(a.W) + " vs " + std::to_string(b.Z) + "x" + std::to_string(b.H) + "x" +
                         std::to_string(b.W));
}

/// (2N+1) x H x W stack centred on slice `center` of a volume.
struct SubVolume {
  std::size_t center = 0;
  std::size_t half_width = 0;
  Volume stack;  // stack.Z == 2 * half_width + 1

  std::size_t depth() const { return 2 * half_width + 1; }
};

// Source index for row r of the window centred at i, with replicate-edge padding.
inline std::size_t window_source_index(std::size_t Z, std::size_t i, std::size_t N, std::size_t r) {
  const long long k = static_cast<long long>(i) + static_cast<long long>(r) - static_cast<long long>(N);
  return static_cast<std::size_t>(std::clamp<long long>(k, 0, static_cast<long long>(Z) - 1));
}

inline SubVolume extract_subvolume(const Volume& v, std::size_t i, std::size_t N) {
  if (i >= v.Z) throw IndexError("extract_subvolume: index " + std::to_string(i) + " outside [0, " + std::to_string(v.Z) + ")");
  SubVolume sv;
  sv.center = i;
  sv.half_width = N;
  sv.stack = Volume(2 * N + 1, v.H, v.W);
  sv.stack.id = v.id;
  for (std::size_t r = 0; r < 2 * N + 1; ++r) {
    const auto src = v.slice(window_source_index(v.Z, i, N, r));
    std::copy(src.begin(), src.end(), sv.stack.slice(r).begin());
  }
  return sv;
}

struct NormalizeResult {
  Volume volume;
  bool constant = false;  // input had zero range; output is all zeros
};

inline NormalizeResult min_max_normalize(const Volume& v) {
  NormalizeResult r{v, false};
  if (v.data.empty()) return r;
  const auto [lo_it, hi_it] = std::minmax_element(v.data.begin(), v.data.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(r.volume.data.begin(), r.volume.data.end(), 0.0);
    r.constant = true;
    return r;
  }
  const double scale = 1.0 / (hi - lo);
  for (double& x : r.volume.data) x = (x - lo) * scale;
  return r;
}

// ---------------------------------------------------------------------------
// Reslicing

enum class Axis { z, y, x };

inline Axis parse_axis(const std::string& s) {
  if (s == "z" || s == "axial") return Axis::z;
  if (s == "y" || s == "coronal") return Axis::y;
  if (s == "x" || s == "sagittal") return Axis::x;
  throw ParameterError("unknown axis '" + s + "' (expected z, y or x)");
}

struct Image {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// Cut the volume into 2D images perpendicular to `axis`.
///   z: Z images of H x W
///   y: H images of Z x W
///   x: W images of Z x H
inline std::vector<Image> reslice(const Volume& v, Axis axis) {
  std::vector<Image> out;
  switch (axis) {
    case Axis::z:
      for (std::size_t z = 0; z < v.Z; ++z) {
        auto s = v.slice(z);
        out.push_back({v.H, v.W, {s.begin(), s.end()}});
      }
      break;
    case Axis::y:
      for (std::size_t h = 0; h < v.H; ++h) {
        Image im{v.Z, v.W, std::vector<double>(v.Z * v.W)};
        for (std::size_t z = 0; z < v.Z; ++z)
          for (std::size_t w = 0; w < v.W; ++w) im.data[z * v.W + w] = v.at(z, h, w);
        out.push_back(std::move(im));
      }
      break;
    case Axis::x:
      for (std::size_t w = 0; w < v.W; ++w) {
        Image im{v.Z, v.H, std::vector<double>(v.Z * v.H)};
        for (std::size_t z = 0; z < v.Z; ++z)
          for (std::size_t h = 0; h < v.H; ++h) im.data[z * v.H + h] = v.at(z, h, w);
        out.push_back(std::move(im));
      }
      break;
  }
  return out;
}

/// Inverse of reslice.
inline Volume assemble(std::span<const Image> images, Axis axis) {
  if (images.empty()) throw DimensionError("assemble: no images");
  const std::size_t rows = images[0].rows, cols = images[0].cols;
  for (const auto& im : images)
    if (im.rows != rows || im.cols != cols || im.data.size() != rows * cols)
      throw DimensionError("assemble: images differ in shape");
  const std::size_t n = images.size();
  Volume v;
  switch (axis) {
    case Axis::z:
      v = Volume(n, rows, cols);
      for (std::size_t z = 0; z < n; ++z) std::copy(images[z].data.begin(), images[z].data.end(), v.slice(z).begin());
      break;
    case Axis::y:
      v = Volume(rows, n, cols);
      for (std::size_t h = 0; h < n; ++h)
        for (std::size_t z = 0; z < rows; ++z)
          for (std::size_t w = 0; w < cols; ++w) v.at(z, h, w) = images[h].at(z, w);
      break;
    case Axis::x:
      v = Volume(rows, cols, n);
      for (std::size_t w = 0; w < n; ++w)
        for (std::size_t z = 0; z < rows; ++z)
          for (std::size_t h = 0; h < cols; ++h) v.at(z, h, w) = images[w].at(z, h);
      break;
  }
  return v;
}

// ---------------------------------------------------------------------------
// RVOL file format
//
//   offset  size  field
//   0       8     magic "RVOL\0\0\0\1"
//   8       4     Z   (u32 LE)
//   12      4     H   (u32 LE)
//   16      4     W   (u32 LE)
//   20      1     dtype (1 = float32)
//   21      3     reserved, zero
//   24      4*N   payload, float32 LE, z -> h -> w

namespace rvol {

inline constexpr std::array<unsigned char, 8> kMagic = {'R', 'V', 'O', 'L', 0, 0, 0, 1};
inline constexpr std::size_t kHeaderSize = 24;
inline constexpr std::uint8_t kFloat32 = 1;
inline constexpr std::uint64_t kMaxVoxels = std::uint64_t{1} << 32;

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) b.push_back(static_cast<unsigned char>(v >> (8 * k)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}

inline std::vector<unsigned char> encode(const Volume& v) {
  for (std::size_t d : {v.Z, v.H, v.W})
    if (d == 0 || d > std::numeric_limits<std::uint32_t>::max()) throw ParameterError("rvol: dimension out of range");
  std::vector<unsigned char> b(kMagic.begin(), kMagic.end());
  b.reserve(kHeaderSize + 4 * v.size());
  put_u32(b, static_cast<std::uint32_t>(v.Z));
  put_u32(b, static_cast<std::uint32_t>(v.H));
  put_u32(b, static_cast<std::uint32_t>(v.W));
  b.push_back(kFloat32);
  b.insert(b.end(), 3, 0);
  for (double x : v.data) {
    const float f = static_cast<float>(x);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(b, bits);
  }
  return b;
}

inline Volume decode(std::span<const unsigned char> b) {
  if (b.size() < kMagic.size()) throw FormatError("rvol: file shorter than magic", b.size());
  for (std::size_t k = 0; k < kMagic.size(); ++k)
    if (b[k] != kMagic[k]) throw FormatError("rvol: bad magic", k);
  if (b.size() < kHeaderSize) throw FormatError("rvol: truncated header", b.size());
  const std::uint32_t Z = get_u32(&b[8]), H = get_u32(&b[12]), W = get_u32(&b[16]);
  if (Z == 0) throw FormatError("rvol: zero dimension", 8);
  if (H == 0) throw FormatError("rvol: zero dimension", 12);
  if (W == 0) throw FormatError("rvol: zero dimension", 16);
  const std::uint64_t n = std::uint64_t{Z} * H * W;
  if (n > kMaxVoxels) throw FormatError("rvol: dimensions overflow voxel limit", 8);
  if (b[20] != kFloat32) throw FormatError("rvol: unsupported dtype " + std::to_string(b[20]), 20);
  for (std::size_t k = 21; k < 24; ++k)
    if (b[k] != 0) throw FormatError("rvol: reserved byte not zero", k);
  const std::uint64_t need = kHeaderSize + 4 * n;
  if (b.size() < need)
    throw FormatError("rvol: truncated payload, header declares " + std::to_string(n) + " floats but " +
                          std::to_string((b.size() - kHeaderSize) / 4) + " present",
                      b.size());
  if (b.size() > need) throw FormatError("rvol: trailing bytes after payload", need);

  Volume v(Z, H, W);
  for (std::uint64_t k = 0; k < n; ++k) {
    const std::size_t off = kHeaderSize + 4 * k;
    const std::uint32_t bits = get_u32(&b[off]);
    float f;
    std::memcpy(&f, &bits, 4);
    if (!std::isfinite(f)) throw FormatError("rvol: non-finite value in payload", off);
    v.data[k] = f;
  }
  return v;
}

}  // namespace rvol

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline Volume load_volume(const std::filesystem::path& path) { return rvol::decode(read_file_bytes(path)); }

inline void save_volume(const Volume& v, const std::filesystem::path& path) { write_file_bytes(path, rvol::encode(v)); }

// Round every value through float32 so the volume survives an RVOL round trip unchanged.
inline void quantize_float32(Volume& v) {
  for (double& x : v.data) x = static_cast<float>(x);
}

// ---------------------------------------------------------------------------
// PGM export: binary P5, maxval 65535, big-endian samples, [0,1] -> [0,65535].

inline std::vector<unsigned char> encode_pgm16(const Image& im) {
  const std::string header = "P5\n" + std::to_string(im.cols) + " " + std::to_string(im.rows) + "\n65535\n";
  std::vector<unsigned char> b(header.begin(), header.end());
  b.reserve(b.size() + 2 * im.data.size());
  for (double x : im.data) {
    const double c = std::clamp(x, 0.0, 1.0);
    const auto q = static_cast<std::uint16_t>(std::lround(c * 65535.0));
    b.push_back(static_cast<unsigned char>(q >> 8));
    b.push_back(static_cast<unsigned char>(q & 0xff));
  }
  return b;
}

inline void save_pgm16(const Image& im, const std::filesystem::path& path) { write_file_bytes(path, encode_pgm16(im)); }

}  // namespace bbvol
