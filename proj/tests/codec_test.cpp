#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "rae/codec.hpp"
#include "test_util.hpp"

namespace rae {
namespace {

using testing::TempDir;
using testing::tiny_config;

// Same latent geometry as the default model, (1,128,128) -> (4,16,16), but
// with very thin blocks so it runs in milliseconds.
ModelConfig thin_default_geometry() {
  ModelConfig c;
  c.stem_filters = 2;
  c.rrdb_rdbs = 1;
  c.rdb = {2, 1, 1, 0.2};
  c.encoder_stage_out_channels = {2, 2, 2, 4};
  return c;
}

VolumeSeries small_series(std::size_t timesteps, std::uint64_t seed = 1) {
  return gen_synthetic(timesteps, {16, 4, 16}, seed, 2);
}

// ---------------------------------------------------------------------------
// Latent stream
// ---------------------------------------------------------------------------

TEST(Stream, DefaultGeometryGivesThirtyTwoToOne) {
  TempDir dir;
  ResidualAutoencoder m(thin_default_geometry());
  VolumeSeries s = gen_synthetic(1, VolumeDims{}, 3, 2);
  write_ravf(dir / "v.ravf", s);
  EncodeSummary sum = encode_series(m, dir / "v.ravf", dir / "v.ralf");
  EXPECT_EQ(sum.original_bytes, 2097152u);
  EXPECT_EQ(sum.latent_bytes, 65536u);
  ASSERT_TRUE(sum.ratio().has_value());
  EXPECT_EQ(*sum.ratio(), 32.0);
  EXPECT_EQ(std::filesystem::file_size(dir / "v.ralf"), kLatentHeaderBytes + 65536u);
}

TEST(Stream, ZeroTimestepsGivesHeaderOnlyStream) {
  TempDir dir;
  ResidualAutoencoder m(tiny_config(16));
  VolumeSeries empty;
  empty.dims = {16, 4, 16};
  write_ravf(dir / "v.ravf", empty);
  EncodeSummary sum = encode_series(m, dir / "v.ravf", dir / "v.ralf", {{{0.0, 1.0}}});
  EXPECT_EQ(sum.latent_bytes, 0u);
  EXPECT_FALSE(sum.ratio().has_value());
  EXPECT_EQ(std::filesystem::file_size(dir / "v.ralf"), kLatentHeaderBytes);
  LatentStream back = read_stream(dir / "v.ralf");
  EXPECT_TRUE(back.timesteps.empty());
}

TEST(Stream, EncodingIsDeterministic) {
  TempDir dir;
  ResidualAutoencoder m(tiny_config(16));
  write_ravf(dir / "v.ravf", small_series(3));
  encode_series(m, dir / "v.ravf", dir / "a.ralf");
  encode_series(m, dir / "v.ravf", dir / "b.ralf");
  EXPECT_EQ(io::read_file(dir / "a.ralf"), io::read_file(dir / "b.ralf"));
}

TEST(Stream, RoundTripIsBitwise) {
  TempDir dir;
  ResidualAutoencoder m(tiny_config(16));
  LatentStream s = encode_volume_series(m, small_series(2));
  write_stream(dir / "s.ralf", s);
  LatentStream back = read_stream(dir / "s.ralf");
  EXPECT_EQ(back.fingerprint, s.fingerprint);
  EXPECT_EQ(back.latent_dims, s.latent_dims);
  EXPECT_EQ(back.slices, s.slices);
  EXPECT_EQ(back.norm_min, s.norm_min);
  EXPECT_EQ(back.norm_max, s.norm_max);
  EXPECT_EQ(back.timesteps, s.timesteps);
  io::ByteWriter w;
  serialize_stream(back, w);
  EXPECT_EQ(w.bytes(), io::read_file(dir / "s.ralf"));
}

TEST(Stream, CorruptStreamsAreFormatErrors) {
  TempDir dir;
  ResidualAutoencoder m(tiny_config(16));
  write_stream(dir / "s.ralf", encode_volume_series(m, small_series(1)));
  auto bytes = io::read_file(dir / "s.ralf");
  auto cut = bytes;
  cut.resize(cut.size() - 4);
  io::write_file_atomic(dir / "t.ralf", cut);
  EXPECT_THROW(read_stream(dir / "t.ralf"), FormatError);
  auto magic = bytes;
  magic[1] = 'X';
  io::write_file_atomic(dir / "m.ralf", magic);
  EXPECT_THROW(read_stream(dir / "m.ralf"), FormatError);
  auto extra = bytes;
  extra.push_back(1);
  io::write_file_atomic(dir / "e.ralf", extra);
  EXPECT_THROW(read_stream(dir / "e.ralf"), FormatError);
}

TEST(Stream, LatentsPerTimestepFlatten) {
  ResidualAutoencoder m(tiny_config(16));
  LatentStream s = encode_volume_series(m, small_series(3));
  auto latents = stream_latents(s);
  ASSERT_EQ(latents.size(), 3u);
  EXPECT_EQ(latents[1].timestep, 1);
  EXPECT_EQ(latents[1].values.size(), 4u * 2 * 2 * 2);  // 4 slices of (2,2,2)
}

// ---------------------------------------------------------------------------
// Encode / decode
// ---------------------------------------------------------------------------

TEST(Codec, DecodeRestoresDimsAndCount) {
  TempDir dir;
  ResidualAutoencoder m(tiny_config(16));
  write_ravf(dir / "v.ravf", small_series(3));
  encode_series(m, dir / "v.ravf", dir / "v.ralf");
  EXPECT_EQ(decode_series(m, dir / "v.ralf", dir / "r.ravf"), 3u);
  RavfInfo info;
  auto r = read_ravf(dir / "r.ravf", &info);
  EXPECT_EQ(info.dims, (VolumeDims{16, 4, 16}));
  EXPECT_EQ(info.timesteps, 3u);
  EXPECT_EQ(info.dtype, VolumeDtype::f64);
}

TEST(Codec, ZeroResidualModelIsWellDefined) {
  ResidualAutoencoder m(tiny_config(16));
  m.weights().fill(0.0);
  auto s = small_series(2);
  auto back = decode_latent_stream(m, encode_volume_series(m, s));
  EXPECT_EQ(back.dims, s.dims);
  EXPECT_EQ(back.size(), 2u);
  // Zero weights decode to the normalisation minimum everywhere.
  const auto [lo, hi] = series_range(s);
  for (double v : back.timesteps[0]) EXPECT_EQ(v, lo);
}

TEST(Codec, IncompatibleDimsFailBeforeWriting) {
  TempDir dir;
  ResidualAutoencoder m(tiny_config(16));
  write_ravf(dir / "v.ravf", gen_synthetic(1, {8, 4, 8}, 1, 1));
  EXPECT_THROW(encode_series(m, dir / "v.ravf", dir / "v.ralf"), ShapeError);
  EXPECT_FALSE(std::filesystem::exists(dir / "v.ralf"));
}

TEST(Codec, FingerprintMismatchFailsBeforeWriting) {
  TempDir dir;
  ResidualAutoencoder a(tiny_config(16));
  write_stream(dir / "s.ralf", encode_volume_series(a, small_series(1)));
  BaselineCae b(tiny_config(16));
  EXPECT_THROW(decode_series(b, dir / "s.ralf", dir / "r.ravf"), TopologyError);
  EXPECT_FALSE(std::filesystem::exists(dir / "r.ravf"));
}

TEST(Codec, ConstantInputWithoutRangeIsError) {
  ResidualAutoencoder m(tiny_config(16));
  VolumeSeries s;
  s.dims = {16, 4, 16};
  s.timesteps.push_back(std::vector<double>(s.dims.voxels(), 0.7));
  EXPECT_THROW(encode_volume_series(m, s), ConfigError);
  EXPECT_NO_THROW(encode_volume_series(m, s, {{{0.0, 1.0}}}));
}

TEST(Codec, TrainedModelBeatsMeanImage) {
  // Train on synthetic data, then compare held-out reconstruction error with
  // the error of predicting the training mean image everywhere.
  auto series = gen_synthetic(30, {16, 4, 16}, 21, 3);
  VolumeSeries train_s = series, test_s = series;
  train_s.timesteps.resize(24);
  test_s.timesteps.erase(test_s.timesteps.begin(), test_s.timesteps.begin() + 24);
  const auto [lo, hi] = series_range(series);
  ModelConfig mc = tiny_config(16);
  mc.stem_filters = 8;
  mc.encoder_stage_out_channels = {8, 8, 8, 8};
  ResidualAutoencoder m(mc);
  {
    VolumeSeries n = train_s;
    for (auto& ts : n.timesteps)
      for (double& v : ts) v = (v - lo) / (hi - lo);
    TrainConfig c;
    c.max_epochs = 200;
    c.batch_size = 8;
    c.adam.learning_rate = 2e-3;
    c.early_stop_patience = 199;
    train(m, series_samples(n), std::nullopt, c);
  }
  auto recon = decode_latent_stream(m, encode_volume_series(m, test_s, {{{lo, hi}}}));
  const double model_mse = compute_stats(test_s, recon, 0).mse;

  std::vector<double> mean(train_s.dims.voxels(), 0.0);
  for (const auto& ts : train_s.timesteps)
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += ts[i] / double(train_s.size());
  VolumeSeries mean_pred = test_s;
  for (auto& ts : mean_pred.timesteps) ts = mean;
  const double mean_mse = compute_stats(test_s, mean_pred, 0).mse;
  EXPECT_LT(model_mse, mean_mse);
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

TEST(Stats, IdenticalSeriesHaveZeroErrorAndInfinitePsnr) {
  auto s = small_series(2);
  auto r = compute_stats(s, s, 8 * s.dims.voxels());
  EXPECT_EQ(r.mse, 0.0);
  EXPECT_TRUE(std::isinf(r.psnr));
  for (const auto& t : r.per_timestep) EXPECT_EQ(t.mse, 0.0);
  std::ostringstream os;
  print_report(r, os);
  EXPECT_NE(os.str().find("psnr_db=inf"), std::string::npos) << os.str();
  EXPECT_NE(os.str().find("compression_ratio=n/a"), std::string::npos) << os.str();
}

TEST(Stats, ZeroVersusOneGivesZeroDecibels) {
  VolumeSeries a, b;
  a.dims = b.dims = {4, 2, 4};
  a.timesteps.push_back(std::vector<double>(32, 0.0));
  b.timesteps.push_back(std::vector<double>(32, 1.0));
  auto r = compute_stats(a, b, 256);
  EXPECT_EQ(r.mse, 1.0);
  EXPECT_EQ(r.psnr, 0.0);
}

TEST(Stats, MseMatchesTrainingLoss) {
  std::mt19937_64 rng(5);
  auto a = small_series(3, 5), b = small_series(3, 6);
  auto r = compute_stats(a, b, 0);
  for (std::size_t t = 0; t < 3; ++t) {
    Tensor ta({a.dims.voxels()}, a.timesteps[t]), tb({b.dims.voxels()}, b.timesteps[t]);
    EXPECT_NEAR(r.per_timestep[t].mse, mse_loss(tb, ta).item(), 1e-12);
  }
}

TEST(Stats, DimMismatchIsShapeError) {
  auto a = small_series(2);
  auto b = gen_synthetic(2, {16, 2, 16}, 1, 1);
  EXPECT_THROW(compute_stats(a, b, 0), ShapeError);
  auto c = small_series(1);
  EXPECT_THROW(compute_stats(a, c, 0), ShapeError);
}

TEST(Stats, FileStatsIncludeByteAccounting) {
  TempDir dir;
  ResidualAutoencoder m(thin_default_geometry());
  write_ravf(dir / "v.ravf", gen_synthetic(1, VolumeDims{}, 4, 2));
  encode_series(m, dir / "v.ravf", dir / "v.ralf");
  decode_series(m, dir / "v.ralf", dir / "r.ravf");
  auto r = stats(dir / "v.ravf", dir / "r.ravf", dir / "v.ralf");
  EXPECT_EQ(r.original_bytes_per_timestep, 2097152u);
  EXPECT_EQ(r.latent_bytes_per_timestep, 65536u);
  EXPECT_EQ(r.ratio(), 32.0);
  EXPECT_TRUE(std::isfinite(r.psnr));
  write_report_csv(r, dir / "r.csv");
  EXPECT_TRUE(std::filesystem::exists(dir / "r.csv"));
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

TEST(Bench, EmitsFourColumnsAndOrdersEncodeTimes) {
  TempDir dir;
  ResidualAutoencoder m(tiny_config(16));
  write_ravf(dir / "v.ravf", small_series(2));
  BenchOptions o;
  o.repetitions = 4;
  o.scratch_dir = dir.path();
  BenchResult r = bench(m, dir / "v.ravf", o);
  ASSERT_EQ(r.runs.size(), 4u);
  EXPECT_EQ(r.encoder_invocations, 8u);
  for (const auto& run : r.runs) {
    EXPECT_GE(run.encode_with_io, run.encode);
    EXPECT_GT(run.encode, 0.0);
    EXPECT_GT(run.decode, 0.0);
    EXPECT_GT(run.original_io, 0.0);
  }
  write_bench_csv(r, dir / "b.csv");
  std::ifstream in(dir / "b.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "run,Encoding,Decoding,Original I/O,Encoding w. I/O");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 5);
  std::ostringstream table;
  print_bench_table(r, table);
  for (const char* col : kBenchColumns) EXPECT_NE(table.str().find(col), std::string::npos);
  // Scratch files are cleaned up.
  std::size_t leftovers = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path()))
    leftovers += e.path().filename().string().rfind("rae_bench_", 0) == 0;
  EXPECT_EQ(leftovers, 0u);
}

TEST(Bench, NeedsThreeRepetitions) {
  TempDir dir;
  ResidualAutoencoder m(tiny_config(16));
  write_ravf(dir / "v.ravf", small_series(1));
  BenchOptions o;
  o.repetitions = 2;
  EXPECT_THROW(bench(m, dir / "v.ravf", o), ConfigError);
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

TEST(Render, GreyLevelRounding) {
  EXPECT_EQ(grey_level(0.5, 0.0, 1.0), 128);
  EXPECT_EQ(grey_level(0.0, 0.0, 1.0), 0);
  EXPECT_EQ(grey_level(1.0, 0.0, 1.0), 255);
  EXPECT_EQ(grey_level(2.0, 0.0, 1.0), 255);
  EXPECT_EQ(grey_level(0.5, 0.5, 0.5), 128);
}

TEST(Render, ConstantHalfSliceIsMidGrey) {
  TempDir dir;
  VolumeSeries s;
  s.timesteps.push_back(std::vector<double>(s.dims.voxels(), 0.5));
  write_ravf(dir / "v.ravf", s);
  render_slice_ppm(dir / "v.ravf", 0, 3, dir / "a.ppm", std::make_pair(0.0, 1.0));
  render_slice_ppm(dir / "v.ravf", 0, 3, dir / "b.ppm");
  for (const char* name : {"a.ppm", "b.ppm"}) {
    auto bytes = io::read_file(dir / name);
    const std::string header = "P5\n128 128\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + 16384);
    EXPECT_LE(header.size(), 15u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + long(header.size())), header);
    for (std::size_t i = header.size(); i < bytes.size(); ++i) ASSERT_EQ(bytes[i], 128);
  }
}

TEST(Render, DeterministicAndOriented) {
  TempDir dir;
  VolumeSeries s = gen_synthetic(2, {8, 2, 4}, 3, 1);
  write_ravf(dir / "v.ravf", s);
  render_slice_ppm(dir / "v.ravf", 1, 1, dir / "a.ppm");
  render_slice_ppm(dir / "v.ravf", 1, 1, dir / "b.ppm");
  EXPECT_EQ(io::read_file(dir / "a.ppm"), io::read_file(dir / "b.ppm"));
  // Rows are z, columns are x.
  auto px = render_slice(s, 1, 1);
  const std::size_t head = std::string("P5\n8 4\n255\n").size();
  const auto [lo, hi] = series_range(s);
  EXPECT_EQ(px[head + 2 * 8 + 5], grey_level(s.timesteps[1][s.dims.index(5, 1, 2)], lo, hi));
}

TEST(Render, OutOfRangeIndicesAreErrors) {
  TempDir dir;
  write_ravf(dir / "v.ravf", small_series(2));
  EXPECT_THROW(render_slice_ppm(dir / "v.ravf", 2, 0, dir / "a.ppm"), ConfigError);
  EXPECT_THROW(render_slice_ppm(dir / "v.ravf", 0, 4, dir / "a.ppm"), ConfigError);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.ppm"));
}

}  // namespace
}  // namespace rae
