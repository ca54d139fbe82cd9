#pragma once

// RALF latent streams, file-to-file encode/decode of volume series,
// reconstruction statistics, the timing benchmark and PPM slice rendering.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "rae/binary_io.hpp"
#include "rae/data.hpp"
#include "rae/error.hpp"
#include "rae/latent.hpp"
#include "rae/nn.hpp"
#include "rae/tensor.hpp"

namespace rae {

// ---------------------------------------------------------------------------
// RALF latent stream
// ---------------------------------------------------------------------------
//
// "RALF" | u16 version | u64 fingerprint | u32 latent dims (C,H,W) |
// u32 slices per timestep | u32 timestep count | f64 norm min | f64 norm max |
// f32 payload, timestep-major then slice-major.

inline constexpr std::uint16_t kLatentFormatVersion = 1;
inline constexpr std::size_t kLatentHeaderBytes = 4 + 2 + 8 + 12 + 4 + 4 + 8 + 8;

struct LatentStream {
  std::uint64_t fingerprint = 0;
  std::array<std::uint32_t, 3> latent_dims{4, 16, 16};
  std::uint32_t slices = 16;
  double norm_min = 0.0;
  double norm_max = 1.0;
  std::vector<std::vector<float>> timesteps;

  std::size_t values_per_slice() const {
    return std::size_t(latent_dims[0]) * latent_dims[1] * latent_dims[2];
  }
  std::size_t values_per_timestep() const { return values_per_slice() * slices; }
  std::size_t payload_bytes() const { return timesteps.size() * values_per_timestep() * 4; }
};

inline void serialize_stream(const LatentStream& s, io::ByteWriter& out) {
  out.put_bytes("RALF");
  out.put_u16(kLatentFormatVersion);
  out.put_u64(s.fingerprint);
  for (auto d : s.latent_dims) out.put_u32(d);
  out.put_u32(s.slices);
  out.put_u32(static_cast<std::uint32_t>(s.timesteps.size()));
  out.put_f64(s.norm_min);
  out.put_f64(s.norm_max);
  for (const auto& ts : s.timesteps) {
    if (ts.size() != s.values_per_timestep()) throw ShapeError("latent stream: timestep payload has wrong length");
    for (float v : ts) out.put_f32(v);
  }
}

inline void write_stream(const std::filesystem::path& path, const LatentStream& s) {
  io::ByteWriter out;
  out.reserve(kLatentHeaderBytes + s.payload_bytes());
  serialize_stream(s, out);
  io::write_file_atomic(path, out.bytes());
}

inline LatentStream read_stream(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader in(bytes, path.string());
  in.expect_magic("RALF");
  const auto version = in.get_u16();
  if (version != kLatentFormatVersion) {
    throw FormatError(path.string() + ": unsupported latent format version " + std::to_string(version));
  }
  LatentStream s;
  s.fingerprint = in.get_u64();
  for (auto& d : s.latent_dims) d = in.get_u32();
  s.slices = in.get_u32();
  const std::size_t count = in.get_u32();
  s.norm_min = in.get_f64();
  s.norm_max = in.get_f64();
  const std::size_t per = s.values_per_timestep();
  if (count > 0 && per == 0) throw FormatError(path.string() + ": zero-sized latent dims");
  in.need(count * per * 4);
  s.timesteps.resize(count);
  for (auto& ts : s.timesteps) {
    ts.resize(per);
    for (float& v : ts) v = in.get_f32();
  }
  if (!in.at_end()) throw FormatError(path.string() + ": trailing bytes after latent payload");
  return s;
}

// Per-timestep latent vectors (slice latents concatenated in slice order).
inline std::vector<LatentVector> stream_latents(const LatentStream& s) {
  std::vector<LatentVector> out;
  for (std::size_t t = 0; t < s.timesteps.size(); ++t)
    out.push_back({static_cast<int>(t), std::vector<double>(s.timesteps[t].begin(), s.timesteps[t].end())});
  return out;
}

// ---------------------------------------------------------------------------
// Encode / decode
// ---------------------------------------------------------------------------

inline void check_volume_compatible(const Autoencoder& model, const VolumeDims& dims) {
  const auto& c = model.config();
  if (c.input_channels != 1 || dims.z != std::size_t(c.input_height) || dims.x != std::size_t(c.input_width)) {
    throw ShapeError("volume dims " + dims.str() + " incompatible with model input (" +
                     std::to_string(c.input_channels) + "," + std::to_string(c.input_height) + "," +
                     std::to_string(c.input_width) + "); need X=" + std::to_string(c.input_width) +
                     ", Z=" + std::to_string(c.input_height));
  }
}

// One timestep through the encoder: normalise, slice, encode, quantise.
inline std::vector<float> encode_timestep(const Autoencoder& model, std::span<const double> volume,
                                          const VolumeDims& dims, double norm_min, double norm_max) {
  std::vector<double> scaled(volume.begin(), volume.end());
  const double inv = 1.0 / (norm_max - norm_min);
  for (double& v : scaled) v = (v - norm_min) * inv;
  Tensor z = model.encode(slice_volume(scaled, dims));
  std::vector<float> out(z.numel());
  const auto d = z.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(d[i]);
  return out;
}

inline std::vector<double> decode_timestep(const Autoencoder& model, std::span<const float> latent,
                                           const LatentStream& header, const VolumeDims& dims) {
  std::vector<double> z(latent.begin(), latent.end());
  Tensor zt({header.slices, header.latent_dims[0], header.latent_dims[1], header.latent_dims[2]}, std::move(z));
  Tensor x = model.decode(zt);
  auto volume = unslice_volume(x, dims);
  const double range = header.norm_max - header.norm_min;
  for (double& v : volume) v = v * range + header.norm_min;
  return volume;
}

struct EncodeOptions {
  // Overrides the input's own min/max as normalisation range.
  std::optional<std::pair<double, double>> norm_range;
};

struct EncodeSummary {
  std::size_t timesteps = 0;
  std::size_t original_bytes = 0;  // raw payload bytes of the input volume
  std::size_t latent_bytes = 0;    // raw latent payload bytes
  std::optional<double> ratio() const {
    if (latent_bytes == 0) return std::nullopt;
    return static_cast<double>(original_bytes) / static_cast<double>(latent_bytes);
  }
};

inline LatentStream encode_volume_series(const Autoencoder& model, const VolumeSeries& series,
                                         const EncodeOptions& opts = {}) {
  check_volume_compatible(model, series.dims);
  LatentStream s;
  s.fingerprint = model.weights().fingerprint();
  const auto ls = model.latent_shape();
  s.latent_dims = {std::uint32_t(ls[0]), std::uint32_t(ls[1]), std::uint32_t(ls[2])};
  s.slices = static_cast<std::uint32_t>(series.dims.y);
  if (opts.norm_range) {
    std::tie(s.norm_min, s.norm_max) = *opts.norm_range;
  } else if (!series.timesteps.empty()) {
    std::tie(s.norm_min, s.norm_max) = series_range(series);
  }
  if (!(s.norm_max > s.norm_min)) throw ConfigError("encode: degenerate normalisation range (constant input)");
  for (const auto& ts : series.timesteps)
    s.timesteps.push_back(encode_timestep(model, ts, series.dims, s.norm_min, s.norm_max));
  return s;
}

inline EncodeSummary encode_series(const Autoencoder& model, const std::filesystem::path& volume_path,
                                   const std::filesystem::path& out_path, const EncodeOptions& opts = {}) {
  RavfInfo info;
  const auto series = read_ravf(volume_path, &info);
  const auto stream = encode_volume_series(model, series, opts);
  write_stream(out_path, stream);
  return {series.size(), series.size() * info.dims.voxels() * dtype_bytes(info.dtype), stream.payload_bytes()};
}

inline VolumeSeries decode_latent_stream(const Autoencoder& model, const LatentStream& s) {
  if (s.fingerprint != model.weights().fingerprint()) {
    throw TopologyError("latent stream fingerprint does not match the model topology");
  }
  const auto ls = model.latent_shape();
  if (s.latent_dims != std::array<std::uint32_t, 3>{std::uint32_t(ls[0]), std::uint32_t(ls[1]), std::uint32_t(ls[2])}) {
    throw ShapeError("latent stream dims do not match the model latent shape");
  }
  VolumeSeries out;
  out.dims = {std::size_t(model.config().input_width), s.slices, std::size_t(model.config().input_height)};
  for (const auto& ts : s.timesteps) out.timesteps.push_back(decode_timestep(model, ts, s, out.dims));
  return out;
}

inline std::size_t decode_series(const Autoencoder& model, const std::filesystem::path& stream_path,
                                 const std::filesystem::path& out_path) {
  const auto stream = read_stream(stream_path);
  const auto series = decode_latent_stream(model, stream);
  write_ravf(out_path, series, VolumeDtype::f64);
  return series.size();
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct TimestepStats {
  std::size_t timestep = 0;
  double mse = 0.0;
  double psnr = 0.0;  // +inf when mse == 0
};

struct ReductionReport {
  std::vector<TimestepStats> per_timestep;
  double mse = 0.0;
  double psnr = 0.0;
  double value_range = 1.0;
  std::size_t original_bytes_per_timestep = 0;
  std::optional<std::size_t> latent_bytes_per_timestep;

  std::optional<double> ratio() const {
    if (!latent_bytes_per_timestep || *latent_bytes_per_timestep == 0) return std::nullopt;
    return static_cast<double>(original_bytes_per_timestep) / static_cast<double>(*latent_bytes_per_timestep);
  }
};

inline double psnr_from_mse(double mse, double range) {
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / mse);
}

// MSE/PSNR between two series. The PSNR range is the joint max - min of both
// series (1 when that is zero).
inline ReductionReport compute_stats(const VolumeSeries& original, const VolumeSeries& reconstructed,
                                     std::size_t original_bytes_per_timestep) {
  if (!(original.dims == reconstructed.dims) || original.size() != reconstructed.size()) {
    throw ShapeError("stats: series differ in dims or timestep count (" + original.dims.str() + " x " +
                     std::to_string(original.size()) + " vs " + reconstructed.dims.str() + " x " +
                     std::to_string(reconstructed.size()) + ")");
  }
  ReductionReport r;
  r.original_bytes_per_timestep = original_bytes_per_timestep;
  if (original.size() == 0) return r;
  const auto [lo1, hi1] = series_range(original);
  const auto [lo2, hi2] = series_range(reconstructed);
  const double range = std::max(hi1, hi2) - std::min(lo1, lo2);
  r.value_range = range > 0.0 ? range : 1.0;
  double total = 0.0;
  for (std::size_t t = 0; t < original.size(); ++t) {
    const auto& a = original.timesteps[t];
    const auto& b = reconstructed.timesteps[t];
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = b[i] - a[i];
      acc += d * d;
    }
    const double mse = acc / static_cast<double>(a.size());
    r.per_timestep.push_back({t, mse, psnr_from_mse(mse, r.value_range)});
    total += mse;
  }
  r.mse = total / static_cast<double>(original.size());
  r.psnr = psnr_from_mse(r.mse, r.value_range);
  return r;
}

inline ReductionReport stats(const std::filesystem::path& original_path, const std::filesystem::path& recon_path,
                             const std::optional<std::filesystem::path>& stream_path = std::nullopt) {
  RavfInfo info;
  const auto a = read_ravf(original_path, &info);
  const auto b = read_ravf(recon_path);
  auto r = compute_stats(a, b, info.dims.voxels() * dtype_bytes(info.dtype));
  if (stream_path) r.latent_bytes_per_timestep = read_stream(*stream_path).values_per_timestep() * 4;
  return r;
}

inline std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline void print_report(const ReductionReport& r, std::ostream& os) {
  os << "original_bytes_per_timestep=" << r.original_bytes_per_timestep << '\n';
  os << "latent_bytes_per_timestep="
     << (r.latent_bytes_per_timestep ? std::to_string(*r.latent_bytes_per_timestep) : std::string("n/a")) << '\n';
  os << "compression_ratio=" << (r.ratio() ? format_number(*r.ratio()) : std::string("n/a")) << '\n';
  os << "timesteps=" << r.per_timestep.size() << '\n';
  os << "mse=" << format_number(r.mse) << '\n';
  os << "psnr_db=" << format_number(r.psnr) << '\n';
}

inline void write_report_csv(const ReductionReport& r, const std::filesystem::path& path) {
  io::AtomicFile f(path);
  auto& os = f.stream();
  os << "timestep,mse,psnr_db\n";
  for (const auto& t : r.per_timestep) os << t.timestep << ',' << format_number(t.mse) << ',' << format_number(t.psnr) << '\n';
  f.commit();
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

struct BenchOptions {
  int repetitions = 3;
  bool parallel = false;
  std::filesystem::path scratch_dir = std::filesystem::temp_directory_path();
};

struct BenchRun {
  double encode = 0.0;
  double decode = 0.0;
  double original_io = 0.0;
  double encode_with_io = 0.0;
};

inline const std::array<const char*, 4> kBenchColumns{"Encoding", "Decoding", "Original I/O", "Encoding w. I/O"};

struct BenchResult {
  std::vector<BenchRun> runs;  // per repetition, mean seconds per timestep
  BenchRun mean;
  std::size_t encoder_invocations = 0;
  std::size_t timesteps = 0;
};

// Mean wall-clock seconds per timestep for the four processing stages.
// "Encoding w. I/O" is timed over the same encode call plus the latent write,
// so it is never below "Encoding" within a run.
inline BenchResult bench(const Autoencoder& model, const std::filesystem::path& volume_path,
                         const BenchOptions& opts = {}) {
  if (opts.repetitions < 3) throw ConfigError("bench: repetitions must be at least 3");
  const auto series = read_ravf(volume_path);
  check_volume_compatible(model, series.dims);
  if (series.timesteps.empty()) throw ConfigError("bench: volume file has no timesteps");
  double lo = 0.0, hi = 1.0;
  std::tie(lo, hi) = series_range(series);
  if (!(hi > lo)) hi = lo + 1.0;

  const int saved_threads = detail::thread_setting();
  if (!opts.parallel) set_num_threads(1);
  struct Restore {
    int t;
    ~Restore() { set_num_threads(t); }
  } restore{saved_threads};

  using clock = std::chrono::steady_clock;
  auto secs = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
  const auto tag = std::to_string(std::chrono::steady_clock::now().time_since_epoch().count());
  const auto orig_tmp = opts.scratch_dir / ("rae_bench_orig_" + tag + ".ravf");
  const auto lat_tmp = opts.scratch_dir / ("rae_bench_lat_" + tag + ".ralf");

  BenchResult result;
  result.timesteps = series.size();
  LatentStream header;
  header.fingerprint = model.weights().fingerprint();
  const auto ls = model.latent_shape();
  header.latent_dims = {std::uint32_t(ls[0]), std::uint32_t(ls[1]), std::uint32_t(ls[2])};
  header.slices = static_cast<std::uint32_t>(series.dims.y);
  header.norm_min = lo;
  header.norm_max = hi;

  for (int rep = 0; rep < opts.repetitions; ++rep) {
    BenchRun run;
    for (const auto& ts : series.timesteps) {
      const auto t0 = clock::now();
      auto latent = encode_timestep(model, ts, series.dims, lo, hi);
      ++result.encoder_invocations;
      const auto t1 = clock::now();
      LatentStream one = header;
      one.timesteps.push_back(std::move(latent));
      write_stream(lat_tmp, one);
      const auto t2 = clock::now();
      run.encode += secs(t0, t1);
      run.encode_with_io += secs(t0, t2);

      const auto t3 = clock::now();
      auto volume = decode_timestep(model, one.timesteps[0], header, series.dims);
      const auto t4 = clock::now();
      run.decode += secs(t3, t4);

      VolumeSeries single;
      single.dims = series.dims;
      single.timesteps.push_back(ts);
      const auto t5 = clock::now();
      write_ravf(orig_tmp, single);
      const auto t6 = clock::now();
      run.original_io += secs(t5, t6);
    }
    const double n = static_cast<double>(series.size());
    run.encode /= n;
    run.decode /= n;
    run.original_io /= n;
    run.encode_with_io /= n;
    result.runs.push_back(run);
  }
  std::error_code ec;
  std::filesystem::remove(orig_tmp, ec);
  std::filesystem::remove(lat_tmp, ec);
  for (const auto& r : result.runs) {
    result.mean.encode += r.encode;
    result.mean.decode += r.decode;
    result.mean.original_io += r.original_io;
    result.mean.encode_with_io += r.encode_with_io;
  }
  const double reps = static_cast<double>(result.runs.size());
  result.mean.encode /= reps;
  result.mean.decode /= reps;
  result.mean.original_io /= reps;
  result.mean.encode_with_io /= reps;
  return result;
}

inline void print_bench_table(const BenchResult& r, std::ostream& os) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %12s %12s %14s %17s\n", "run", kBenchColumns[0], kBenchColumns[1],
                kBenchColumns[2], kBenchColumns[3]);
  os << buf;
  auto row = [&](const std::string& label, const BenchRun& b) {
    std::snprintf(buf, sizeof buf, "%-10s %12.4f %12.4f %14.4f %17.4f\n", label.c_str(), b.encode, b.decode,
                  b.original_io, b.encode_with_io);
    os << buf;
  };
  for (std::size_t i = 0; i < r.runs.size(); ++i) row(std::to_string(i + 1), r.runs[i]);
  row("mean", r.mean);
}

inline void write_bench_csv(const BenchResult& r, const std::filesystem::path& path) {
  io::AtomicFile f(path);
  auto& os = f.stream();
  os << "run," << kBenchColumns[0] << ',' << kBenchColumns[1] << ',' << kBenchColumns[2] << ',' << kBenchColumns[3]
     << '\n';
  char buf[160];
  auto row = [&](const std::string& label, const BenchRun& b) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f\n", label.c_str(), b.encode, b.decode, b.original_io,
                  b.encode_with_io);
    os << buf;
  };
  for (std::size_t i = 0; i < r.runs.size(); ++i) row(std::to_string(i + 1), r.runs[i]);
  row("mean", r.mean);
  f.commit();
}

// ---------------------------------------------------------------------------
// PPM rendering
// ---------------------------------------------------------------------------

// Pixel value for v under a linear [lo,hi] -> [0,255] map, rounding half up.
// A degenerate range maps everything to mid-grey (128).
inline std::uint8_t grey_level(double v, double lo, double hi) {
  const double u = hi > lo ? (v - lo) / (hi - lo) : 0.5;
  const double p = std::floor(std::clamp(u, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(p, 0.0, 255.0));
}

inline std::vector<std::uint8_t> render_slice(const VolumeSeries& series, std::size_t timestep, std::size_t slice,
                                              std::optional<std::pair<double, double>> range = std::nullopt) {
  if (timestep >= series.size() || slice >= series.dims.y) {
    throw ConfigError("render: timestep " + std::to_string(timestep) + " / slice " + std::to_string(slice) +
                      " out of range (" + std::to_string(series.size()) + " timesteps, " +
                      std::to_string(series.dims.y) + " slices)");
  }
  const auto [lo, hi] = range ? *range : series_range(series);
  const auto& d = series.dims;
  std::string header = "P5\n" + std::to_string(d.x) + " " + std::to_string(d.z) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto& vol = series.timesteps[timestep];
  for (std::size_t iz = 0; iz < d.z; ++iz)
    for (std::size_t ix = 0; ix < d.x; ++ix) out.push_back(grey_level(vol[d.index(ix, slice, iz)], lo, hi));
  return out;
}

inline void render_slice_ppm(const std::filesystem::path& volume_path, std::size_t timestep, std::size_t slice,
                             const std::filesystem::path& out_path,
                             std::optional<std::pair<double, double>> range = std::nullopt) {
  const auto series = read_ravf(volume_path);
  io::write_file_atomic(out_path, render_slice(series, timestep, slice, range));
}

}  // namespace rae
