#pragma once

// Volume series: particle deposition, slicing into model samples,
// normalisation, train/test split, the synthetic bubbling-bed generator and
// the RAVF volume file.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rae/binary_io.hpp"
#include "rae/error.hpp"
#include "rae/tensor.hpp"

namespace rae {

// Grid extents. Volumes are stored row-major with x slowest and z fastest:
// index = (x*Y + y)*Z + z.
struct VolumeDims {
  std::size_t x = 128, y = 16, z = 128;

  std::size_t voxels() const { return x * y * z; }
  std::size_t index(std::size_t ix, std::size_t iy, std::size_t iz) const { return (ix * y + iy) * z + iz; }
  bool operator==(const VolumeDims&) const = default;
  std::string str() const {
    return std::to_string(x) + "x" + std::to_string(y) + "x" + std::to_string(z);
  }
};

struct VolumeSeries {
  VolumeDims dims;
  std::vector<std::vector<double>> timesteps;
  // Affine range used by normalize(); [0,1] until a series is normalised.
  double norm_min = 0.0;
  double norm_max = 1.0;
  bool normalized = false;

  std::size_t size() const { return timesteps.size(); }
};

struct BoundingBox {
  std::array<double, 3> lo{0, 0, 0};
  std::array<double, 3> hi{1, 1, 1};
};

struct ParticleSet {
  int timestep = 0;
  std::vector<std::array<double, 3>> positions;
};

struct Deposit {
  std::vector<double> volume;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
};

// ---------------------------------------------------------------------------
// Cloud-in-cell deposition
// ---------------------------------------------------------------------------

// Each particle spreads unit mass over the 8 cell centres around it with
// trilinear weights. Positions within half a cell of the box faces clamp onto
// the outermost centres, so mass is conserved for every accepted particle.
inline Deposit grid_density(const ParticleSet& particles, const VolumeDims& dims, const BoundingBox& bbox) {
  if (dims.x == 0 || dims.y == 0 || dims.z == 0) throw ConfigError("grid dims must be positive");
  for (int a = 0; a < 3; ++a)
    if (!(bbox.hi[a] > bbox.lo[a])) throw ConfigError("bounding box is degenerate");

  const std::array<std::size_t, 3> n{dims.x, dims.y, dims.z};
  Deposit out;
  out.volume.assign(dims.voxels(), 0.0);
  for (const auto& p : particles.positions) {
    bool inside = true;
    for (int a = 0; a < 3; ++a) inside = inside && p[a] >= bbox.lo[a] && p[a] <= bbox.hi[a];
    if (!inside) {
      ++out.rejected;
      continue;
    }
    std::array<std::size_t, 3> i0{};
    std::array<double, 3> frac{};
    for (int a = 0; a < 3; ++a) {
      const double cell = (bbox.hi[a] - bbox.lo[a]) / static_cast<double>(n[a]);
      double u = (p[a] - bbox.lo[a]) / cell - 0.5;
      u = std::clamp(u, 0.0, static_cast<double>(n[a] - 1));
      auto base = static_cast<std::size_t>(std::floor(u));
      if (n[a] == 1) base = 0;
      else if (base > n[a] - 2) base = n[a] - 2;
      i0[a] = base;
      frac[a] = n[a] == 1 ? 0.0 : u - static_cast<double>(base);
    }
    for (int corner = 0; corner < 8; ++corner) {
      double wgt = 1.0;
      std::array<std::size_t, 3> idx{};
      bool valid = true;
      for (int a = 0; a < 3; ++a) {
        const int bit = (corner >> (2 - a)) & 1;
        wgt *= bit ? frac[a] : 1.0 - frac[a];
        idx[a] = i0[a] + static_cast<std::size_t>(bit);
        valid = valid && idx[a] < n[a];
      }
      if (wgt == 0.0 || !valid) continue;
      out.volume[dims.index(idx[0], idx[1], idx[2])] += wgt;
    }
    ++out.accepted;
  }
  return out;
}

// CSV with header `t,x,y,z`; returns one ParticleSet per distinct t in
// ascending order.
inline std::vector<ParticleSet> read_particles_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) {
    throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  if (!std::getline(in, line)) {
    line_no = 1;
    fail("missing header");
  }
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "t,x,y,z") fail("expected header 't,x,y,z'");

  std::map<int, ParticleSet> sets;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<double, 4> v{};
    std::size_t field = 0;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      const auto token = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (field >= 4) fail("too many fields");
      const char* b = token.data();
      const char* e = b + token.size();
      while (b < e && *b == ' ') ++b;
      while (e > b && e[-1] == ' ') --e;
      auto [ptr, ec] = std::from_chars(b, e, v[field]);
      if (ec != std::errc() || ptr != e || b == e) fail("malformed number '" + token + "'");
      ++field;
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (field != 4) fail("expected 4 fields, got " + std::to_string(field));
    if (v[0] < 0 || v[0] != std::floor(v[0])) fail("timestep must be a non-negative integer");
    const int t = static_cast<int>(v[0]);
    auto& set = sets[t];
    set.timestep = t;
    set.positions.push_back({v[1], v[2], v[3]});
  }
  std::vector<ParticleSet> out;
  for (auto& [t, s] : sets) out.push_back(std::move(s));
  return out;
}

// ---------------------------------------------------------------------------
// Slicing
// ---------------------------------------------------------------------------

// Splits a volume into Y planes; plane j is laid out as a (1, Z, X) image.
// Returned as one [Y,1,Z,X] batch tensor.
inline Tensor slice_volume(std::span<const double> volume, const VolumeDims& dims) {
  if (volume.size() != dims.voxels()) {
    throw ShapeError("slice_volume: volume has " + std::to_string(volume.size()) + " values, dims " +
                     dims.str() + " need " + std::to_string(dims.voxels()));
  }
  Tensor out({dims.y, 1, dims.z, dims.x});
  auto d = out.mutable_data();
  for (std::size_t ix = 0; ix < dims.x; ++ix)
    for (std::size_t iy = 0; iy < dims.y; ++iy)
      for (std::size_t iz = 0; iz < dims.z; ++iz)
        d[(iy * dims.z + iz) * dims.x + ix] = volume[dims.index(ix, iy, iz)];
  return out;
}

inline std::vector<Tensor> slice_volume_list(std::span<const double> volume, const VolumeDims& dims) {
  Tensor batch = slice_volume(volume, dims);
  std::vector<Tensor> out;
  const std::size_t plane = dims.z * dims.x;
  for (std::size_t j = 0; j < dims.y; ++j) {
    auto b = batch.data().begin() + static_cast<std::ptrdiff_t>(j * plane);
    out.emplace_back(Shape{1, dims.z, dims.x}, std::vector<double>(b, b + static_cast<std::ptrdiff_t>(plane)));
  }
  return out;
}

// Inverse of slice_volume.
inline std::vector<double> unslice_volume(const Tensor& slices, const VolumeDims& dims) {
  if (slices.numel() != dims.voxels() || slices.rank() != 4 || slices.dim(0) != dims.y ||
      slices.dim(1) != 1 || slices.dim(2) != dims.z || slices.dim(3) != dims.x) {
    throw ShapeError("unslice_volume: expected (" + std::to_string(dims.y) + ",1," + std::to_string(dims.z) +
                     "," + std::to_string(dims.x) + "), got " + shape_str(slices.shape()));
  }
  std::vector<double> volume(dims.voxels());
  const auto d = slices.data();
  for (std::size_t ix = 0; ix < dims.x; ++ix)
    for (std::size_t iy = 0; iy < dims.y; ++iy)
      for (std::size_t iz = 0; iz < dims.z; ++iz)
        volume[dims.index(ix, iy, iz)] = d[(iy * dims.z + iz) * dims.x + ix];
  return volume;
}

// Every slice of every timestep, stacked as [T*Y, 1, Z, X]. Sample i comes
// from timestep i / Y, slice i % Y.
inline Tensor series_samples(const VolumeSeries& series) {
  if (series.timesteps.empty()) throw ShapeError("series_samples: empty series");
  const auto& d = series.dims;
  const std::size_t per = d.voxels();
  std::vector<double> all;
  all.reserve(per * series.size());
  for (const auto& ts : series.timesteps) {
    Tensor s = slice_volume(ts, d);
    all.insert(all.end(), s.data().begin(), s.data().end());
  }
  return Tensor({series.size() * d.y, 1, d.z, d.x}, std::move(all));
}

struct SampleProvenance {
  std::size_t timestep;
  std::size_t slice;
};

inline SampleProvenance sample_provenance(std::size_t sample, const VolumeDims& dims) {
  return {sample / dims.y, sample % dims.y};
}

// ---------------------------------------------------------------------------
// Normalisation and split
// ---------------------------------------------------------------------------

inline std::pair<double, double> series_range(const VolumeSeries& series) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& ts : series.timesteps)
    for (double v : ts) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  return {lo, hi};
}

// Maps values affinely onto [0,1] with the global series min/max.
inline VolumeSeries normalize(const VolumeSeries& series) {
  if (series.timesteps.empty()) throw ConfigError("normalize: empty series");
  const auto [lo, hi] = series_range(series);
  if (!(hi > lo)) throw ConfigError("normalize: degenerate range (series is constant)");
  VolumeSeries out = series;
  const double scale = 1.0 / (hi - lo);
  for (auto& ts : out.timesteps)
    for (double& v : ts) v = (v - lo) * scale;
  out.norm_min = lo;
  out.norm_max = hi;
  out.normalized = true;
  return out;
}

inline VolumeSeries denormalize(const VolumeSeries& series) {
  VolumeSeries out = series;
  const double range = series.norm_max - series.norm_min;
  for (auto& ts : out.timesteps)
    for (double& v : ts) v = v * range + series.norm_min;
  out.norm_min = 0.0;
  out.norm_max = 1.0;
  out.normalized = false;
  return out;
}

struct SeriesSplit {
  VolumeSeries train;
  VolumeSeries test;
};

// Drops the first `drop_head` timesteps, takes the next `train_count` for
// training and leaves the remainder for test.
inline SeriesSplit split_series(const VolumeSeries& series, std::size_t drop_head, std::size_t train_count) {
  if (drop_head + train_count > series.size() || train_count == 0) {
    throw ConfigError("split_series: series has " + std::to_string(series.size()) + " timesteps; cannot drop " +
                      std::to_string(drop_head) + " and keep " + std::to_string(train_count) + " for training");
  }
  SeriesSplit s;
  s.train = series;
  s.test = series;
  s.train.timesteps.assign(series.timesteps.begin() + static_cast<std::ptrdiff_t>(drop_head),
                           series.timesteps.begin() + static_cast<std::ptrdiff_t>(drop_head + train_count));
  s.test.timesteps.assign(series.timesteps.begin() + static_cast<std::ptrdiff_t>(drop_head + train_count),
                          series.timesteps.end());
  if (s.test.timesteps.empty()) std::clog << "warning: split_series produced an empty test set\n";
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic bubbling bed
// ---------------------------------------------------------------------------

// Dense background near 1 with low-density ellipsoidal bubbles rising along z
// (wrapping at the top), wobbling in x, and breathing in radius.
inline VolumeSeries gen_synthetic(std::size_t timesteps, const VolumeDims& dims, std::uint64_t seed,
                                  std::size_t bubbles) {
  if (timesteps == 0) throw ConfigError("gen_synthetic: need at least one timestep");
  if (dims.voxels() == 0) throw ConfigError("gen_synthetic: dims must be positive");
  struct Bubble {
    double x0, y0, z0, rise, wobble_amp, wobble_freq, wobble_phase;
    double rx, ry, rz, breathe_amp, breathe_freq, breathe_phase, depth;
  };
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  const double X = static_cast<double>(dims.x), Y = static_cast<double>(dims.y), Z = static_cast<double>(dims.z);
  const double bg_phase_x = uni(0.0, 2 * std::numbers::pi), bg_phase_z = uni(0.0, 2 * std::numbers::pi);
  std::vector<Bubble> bs(bubbles);
  for (auto& b : bs) {
    b.x0 = uni(0.15 * X, 0.85 * X);
    b.y0 = uni(0.3 * Y, 0.7 * Y);
    b.z0 = uni(0.0, Z);
    b.rise = uni(0.004, 0.012) * Z;
    b.wobble_amp = uni(0.01, 0.05) * X;
    b.wobble_freq = uni(0.05, 0.2);
    b.wobble_phase = uni(0.0, 2 * std::numbers::pi);
    b.rx = uni(0.04, 0.09) * X;
    b.rz = b.rx * uni(0.7, 1.3);
    b.ry = std::max(1.0, uni(0.25, 0.45) * Y);
    b.breathe_amp = uni(0.05, 0.15);
    b.breathe_freq = uni(0.05, 0.15);
    b.breathe_phase = uni(0.0, 2 * std::numbers::pi);
    b.depth = uni(0.6, 0.85);
  }

  VolumeSeries series;
  series.dims = dims;
  series.timesteps.resize(timesteps);
  for (std::size_t t = 0; t < timesteps; ++t) {
    const double tt = static_cast<double>(t);
    auto& vol = series.timesteps[t];
    vol.resize(dims.voxels());
    for (std::size_t ix = 0; ix < dims.x; ++ix)
      for (std::size_t iy = 0; iy < dims.y; ++iy)
        for (std::size_t iz = 0; iz < dims.z; ++iz) {
          const double fx = (static_cast<double>(ix) + 0.5) / X, fz = (static_cast<double>(iz) + 0.5) / Z;
          vol[dims.index(ix, iy, iz)] =
              0.9 + 0.03 * std::sin(2 * std::numbers::pi * fx + bg_phase_x) +
              0.02 * std::cos(2 * std::numbers::pi * fz + bg_phase_z) * (1.0 - fz * 0.5);
        }
    for (const auto& b : bs) {
      const double cz = std::fmod(b.z0 + b.rise * tt, Z);
      const double cx = b.x0 + b.wobble_amp * std::sin(b.wobble_freq * tt + b.wobble_phase);
      const double s = 1.0 + b.breathe_amp * std::sin(b.breathe_freq * tt + b.breathe_phase);
      const double rx = b.rx * s, ry = b.ry * s, rz = b.rz * s;
      for (std::size_t ix = 0; ix < dims.x; ++ix) {
        const double dx = (static_cast<double>(ix) + 0.5 - cx) / rx;
        if (dx * dx >= 1.0) continue;
        for (std::size_t iy = 0; iy < dims.y; ++iy) {
          const double dy = (static_cast<double>(iy) + 0.5 - b.y0) / ry;
          if (dx * dx + dy * dy >= 1.0) continue;
          for (std::size_t iz = 0; iz < dims.z; ++iz) {
            double dz = static_cast<double>(iz) + 0.5 - cz;
            dz -= Z * std::round(dz / Z);  // periodic in z
            dz /= rz;
            const double q = dx * dx + dy * dy + dz * dz;
            if (q >= 1.0) continue;
            const double profile = (1.0 - q) * (1.0 - q);
            vol[dims.index(ix, iy, iz)] *= 1.0 - b.depth * profile;
          }
        }
      }
    }
    for (double& v : vol) v = std::clamp(v, 0.0, 1.0);
  }
  return series;
}

// ---------------------------------------------------------------------------
// RAVF volume file
// ---------------------------------------------------------------------------
//
// "RAVF" | u16 version | u8 dtype (0 = f64, 1 = f32) | u32 dims[3] (X,Y,Z) |
// u32 timestep count | little-endian row-major timesteps.

enum class VolumeDtype : std::uint8_t { f64 = 0, f32 = 1 };

inline constexpr std::uint16_t kVolumeFormatVersion = 1;
inline constexpr std::size_t kVolumeHeaderBytes = 4 + 2 + 1 + 12 + 4;

inline std::size_t dtype_bytes(VolumeDtype d) { return d == VolumeDtype::f64 ? 8 : 4; }

inline void append_volume_payload(io::ByteWriter& out, std::span<const double> ts, VolumeDtype dtype) {
  if (dtype == VolumeDtype::f64)
    for (double v : ts) out.put_f64(v);
  else
    for (double v : ts) out.put_f32(static_cast<float>(v));
}

inline void write_ravf(const std::filesystem::path& path, const VolumeSeries& series,
                       VolumeDtype dtype = VolumeDtype::f64) {
  io::ByteWriter out;
  out.reserve(kVolumeHeaderBytes + series.size() * series.dims.voxels() * dtype_bytes(dtype));
  out.put_bytes("RAVF");
  out.put_u16(kVolumeFormatVersion);
  out.put_u8(static_cast<std::uint8_t>(dtype));
  out.put_u32(static_cast<std::uint32_t>(series.dims.x));
  out.put_u32(static_cast<std::uint32_t>(series.dims.y));
  out.put_u32(static_cast<std::uint32_t>(series.dims.z));
  out.put_u32(static_cast<std::uint32_t>(series.size()));
  for (const auto& ts : series.timesteps) {
    if (ts.size() != series.dims.voxels()) throw ShapeError("write_ravf: timestep length does not match dims");
    append_volume_payload(out, ts, dtype);
  }
  io::write_file_atomic(path, out.bytes());
}

struct RavfInfo {
  VolumeDims dims;
  VolumeDtype dtype = VolumeDtype::f64;
  std::size_t timesteps = 0;
};

inline VolumeSeries read_ravf(const std::filesystem::path& path, RavfInfo* info = nullptr) {
  const auto bytes = io::read_file(path);
  io::ByteReader in(bytes, path.string());
  in.expect_magic("RAVF");
  const auto version = in.get_u16();
  if (version != kVolumeFormatVersion) {
    throw FormatError(path.string() + ": unsupported volume format version " + std::to_string(version));
  }
  const auto code = in.get_u8();
  if (code > 1) throw FormatError(path.string() + ": unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<VolumeDtype>(code);
  VolumeSeries s;
  s.dims.x = in.get_u32();
  s.dims.y = in.get_u32();
  s.dims.z = in.get_u32();
  const std::size_t count = in.get_u32();
  if (s.dims.voxels() == 0) throw FormatError(path.string() + ": zero-sized dims");
  in.need(count * s.dims.voxels() * dtype_bytes(dtype));
  s.timesteps.resize(count);
  for (auto& ts : s.timesteps) {
    ts.resize(s.dims.voxels());
    for (double& v : ts) v = dtype == VolumeDtype::f64 ? in.get_f64() : static_cast<double>(in.get_f32());
  }
  if (!in.at_end()) throw FormatError(path.string() + ": trailing bytes after volume data");
  if (info) *info = {s.dims, dtype, count};
  return s;
}

}  // namespace rae
