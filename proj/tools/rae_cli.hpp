#pragma once

// Command-line front end. run_cli() is separate from main() so tests can drive
// every subcommand in-process.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "rae/rae.hpp"

namespace rae::cli {

enum ExitCode : int { kOk = 0, kRuntimeError = 1, kUsageError = 2 };

// Small model used by `gradcheck`: 16x16 input, one dense layer of growth 2.
inline ModelConfig gradcheck_config() {
  ModelConfig c;
  c.input_height = c.input_width = 16;
  c.stem_filters = 4;
  c.rrdb_rdbs = 1;
  // Unit init scale: with near-zero RDB weights many pre-activations sit within
  // one step of the leaky-ReLU kink and central differences straddle it.
  c.rdb = {4, 1, 2, 0.2, 1.0};
  c.encoder_stage_out_channels = {4, 4, 3, 2};
  c.baseline_channels = {4, 4, 3, 2};
  c.init_seed = 7;
  return c;
}

// Finite-difference check of every parameter of the reduced residual model
// against a random-weighted sum of its reconstruction.
inline double run_model_gradcheck(const ModelConfig& cfg, std::uint64_t seed, double step) {
  ResidualAutoencoder model(cfg);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x({1, std::size_t(cfg.input_channels), std::size_t(cfg.input_height), std::size_t(cfg.input_width)});
  for (auto& v : x.mutable_data()) v = u(rng);
  Tensor w(x.shape());
  for (auto& v : w.mutable_data()) v = u(rng) - 0.5;
  std::vector<Tensor> params;
  for (const auto& p : model.weights().params()) params.push_back(p.value);
  return gradient_check([&](Tape& tape) { return weighted_sum(model.forward(x, &tape), w, &tape); }, params, step);
}

namespace detail {

inline VolumeDims parse_dims(const std::string& s) {
  std::vector<std::size_t> v;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    const auto tok = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      std::size_t used = 0;
      const long long n = std::stoll(tok, &used);
      if (used != tok.size() || n <= 0) throw std::invalid_argument(tok);
      v.push_back(static_cast<std::size_t>(n));
    } catch (const std::exception&) {
      throw ConfigError("invalid dims '" + s + "' (expected X,Y,Z positive integers)");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (v.size() != 3) throw ConfigError("invalid dims '" + s + "' (expected X,Y,Z)");
  return {v[0], v[1], v[2]};
}

inline BoundingBox parse_bbox(const std::string& s) {
  std::vector<double> v;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    const auto tok = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("invalid bbox '" + s + "'");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (v.size() != 6) throw ConfigError("invalid bbox '" + s + "' (expected x0,y0,z0,x1,y1,z1)");
  return {{v[0], v[1], v[2]}, {v[3], v[4], v[5]}};
}

struct UsageProblem : ConfigError {
  using ConfigError::ConfigError;
};

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Residual autoencoder data reduction toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  int threads = 0;
  std::string out_path;
  std::string model_name;
  app.add_option("--config", config_path, "key = value file overriding model/training defaults");
  app.add_option("--seed", seed, "seed for data generation, initialisation and shuffling");
  app.add_flag("--deterministic", deterministic, "single-threaded deterministic compute");
  app.add_option("--threads", threads, "worker threads for batch-parallel kernels (0 = all)");
  app.add_option("--model", model_name, "model topology: residual or baseline");

  auto add_out = [&](CLI::App* sub, bool required = true) {
    auto* opt = sub->add_option("--out", out_path, "output path");
    if (required) opt->required();
  };

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "generate a synthetic bubbling-bed volume series (RAVF)");
  std::size_t gen_timesteps = 409, gen_bubbles = 12;
  std::string gen_dims = "128,16,128", gen_dtype = "f64";
  gen->add_option("--timesteps", gen_timesteps, "number of timesteps")->check(CLI::PositiveNumber);
  gen->add_option("--dims", gen_dims, "X,Y,Z grid dims");
  gen->add_option("--bubbles", gen_bubbles, "number of bubbles");
  gen->add_option("--dtype", gen_dtype, "f64 or f32")->check(CLI::IsMember({"f64", "f32"}));
  add_out(gen);

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "deposit particle CSV (t,x,y,z) into density volumes (RAVF)");
  std::string pre_csv, pre_dims = "128,16,128", pre_bbox = "0,0,0,1,1,1";
  pre->add_option("--particles", pre_csv, "particle CSV")->required();
  pre->add_option("--dims", pre_dims, "X,Y,Z grid dims");
  pre->add_option("--bbox", pre_bbox, "x0,y0,z0,x1,y1,z1");
  add_out(pre);

  // train
  auto* tr = app.add_subcommand("train", "train an autoencoder on a RAVF series");
  std::string tr_data, tr_log, tr_ckpt, tr_resume;
  std::size_t tr_drop = 60, tr_count = 241;
  std::optional<int> tr_epochs, tr_batch, tr_patience;
  std::optional<double> tr_lr;
  tr->add_option("--data", tr_data, "RAVF training series")->required();
  tr->add_option("--drop-head", tr_drop, "leading timesteps to discard");
  tr->add_option("--train-count", tr_count, "timesteps used for training; the rest are test");
  tr->add_option("--log", tr_log, "loss log CSV (default: <out>.loss.csv)");
  tr->add_option("--checkpoint", tr_ckpt, "checkpoint file written during training");
  tr->add_option("--resume", tr_resume, "resume from a checkpoint");
  tr->add_option("--epochs", tr_epochs, "max epochs");
  tr->add_option("--batch-size", tr_batch, "minibatch size");
  tr->add_option("--lr", tr_lr, "Adam learning rate");
  tr->add_option("--patience", tr_patience, "early-stopping patience (epochs)");
  add_out(tr);

  // encode / decode
  auto* enc = app.add_subcommand("encode", "encode a RAVF series into a RALF latent stream");
  std::string weights_path, input_path;
  std::optional<double> norm_min, norm_max;
  enc->add_option("--weights", weights_path, "RAWT weight file")->required();
  enc->add_option("--input", input_path, "RAVF input")->required();
  enc->add_option("--norm-min", norm_min, "normalisation minimum (default: input min)");
  enc->add_option("--norm-max", norm_max, "normalisation maximum (default: input max)");
  add_out(enc);

  auto* dec = app.add_subcommand("decode", "decode a RALF latent stream into a RAVF series");
  dec->add_option("--weights", weights_path, "RAWT weight file")->required();
  dec->add_option("--input", input_path, "RALF input")->required();
  add_out(dec);

  // stats
  auto* st = app.add_subcommand("stats", "reconstruction MSE/PSNR and compression ratio");
  std::string st_orig, st_recon, st_latent;
  st->add_option("--original", st_orig, "original RAVF")->required();
  st->add_option("--reconstructed", st_recon, "reconstructed RAVF")->required();
  st->add_option("--latent", st_latent, "RALF stream for byte accounting");
  add_out(st, false);

  // bench
  auto* be = app.add_subcommand("bench", "time encoding, decoding and I/O per timestep");
  int be_reps = 3;
  bool be_parallel = false;
  be->add_option("--weights", weights_path, "RAWT weight file")->required();
  be->add_option("--input", input_path, "RAVF input")->required();
  be->add_option("--reps", be_reps, "repetitions (>= 3)");
  be->add_flag("--parallel", be_parallel, "allow multi-threaded compute");
  add_out(be, false);

  // pca / interp
  auto* pc = app.add_subcommand("pca", "PCA of per-timestep latents; writes timestep,pc1,pc2 CSV");
  std::size_t pca_k = 2;
  pc->add_option("--input", input_path, "RALF stream")->required();
  pc->add_option("--k", pca_k, "number of components (>= 2)");
  add_out(pc);

  auto* ip = app.add_subcommand("interp", "synthesize a timestep by interpolating two latents in PCA space");
  std::size_t ip_a = 0, ip_b = 1, ip_k = 2;
  double ip_t = 0.5;
  ip->add_option("--input", input_path, "RALF stream")->required();
  ip->add_option("--a", ip_a, "first timestep index")->required();
  ip->add_option("--b", ip_b, "second timestep index")->required();
  ip->add_option("--t", ip_t, "blend factor in [0,1]");
  ip->add_option("--k", ip_k, "PCA components");
  add_out(ip);

  // render
  auto* rd = app.add_subcommand("render", "render one slice of a RAVF timestep as a P5 PPM image");
  std::size_t rd_t = 0, rd_slice = 0;
  std::optional<double> rd_min, rd_max;
  rd->add_option("--input", input_path, "RAVF input")->required();
  rd->add_option("--timestep", rd_t, "timestep index");
  rd->add_option("--slice", rd_slice, "slice index along Y");
  rd->add_option("--min", rd_min, "value mapped to 0");
  rd->add_option("--max", rd_max, "value mapped to 255");
  add_out(rd);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check of a reduced model");
  double gc_step = 1e-5, gc_tol = 1e-4;
  gc->add_option("--step", gc_step, "central-difference step");
  gc->add_option("--tolerance", gc_tol, "maximum accepted relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << e.what() << '\n' << app.help();
    return kUsageError;
  }

  const int saved_threads = threads;
  if (deterministic) set_deterministic(true);
  else set_num_threads(saved_threads);

  try {
    RunConfig rc;
    try {
      if (!config_path.empty()) apply_config_file(rc, config_path);
      if (!model_name.empty()) rc.set_model(parse_model_kind(model_name));
      if (seed) {
        rc.train.seed = *seed;
        rc.model_cfg.init_seed = *seed;
      }
      rc.model_cfg.validate();
    } catch (const ConfigError& e) {
      throw detail::UsageProblem(e.what());
    }

    auto load_model = [&]() {
      auto m = make_autoencoder(rc.model, rc.model_cfg);
      load_weights(*m, weights_path);
      return m;
    };

    if (*gen) {
      const auto series = gen_synthetic(gen_timesteps, detail::parse_dims(gen_dims), seed.value_or(0), gen_bubbles);
      write_ravf(out_path, series, gen_dtype == "f64" ? VolumeDtype::f64 : VolumeDtype::f32);
      out << "wrote " << series.size() << " timesteps of " << series.dims.str() << " to " << out_path << '\n';
    } else if (*pre) {
      const auto dims = detail::parse_dims(pre_dims);
      const auto bbox = detail::parse_bbox(pre_bbox);
      const auto sets = read_particles_csv(pre_csv);
      VolumeSeries series;
      series.dims = dims;
      std::size_t rejected = 0;
      for (const auto& s : sets) {
        auto dep = grid_density(s, dims, bbox);
        rejected += dep.rejected;
        series.timesteps.push_back(std::move(dep.volume));
      }
      write_ravf(out_path, series);
      out << "timesteps=" << series.size() << " rejected_particles=" << rejected << '\n';
    } else if (*tr) {
      if (tr_epochs) {
        rc.train.max_epochs = *tr_epochs;
        rc.explicit_epochs = true;
      }
      if (tr_batch) rc.train.batch_size = *tr_batch;
      if (tr_lr) rc.train.adam.learning_rate = *tr_lr;
      if (tr_patience) rc.train.early_stop_patience = *tr_patience;
      try {
        rc.train.validate();
      } catch (const ConfigError& e) {
        throw detail::UsageProblem(e.what());
      }
      const auto raw = read_ravf(tr_data);
      const auto series = normalize(raw);
      const auto split = split_series(series, tr_drop, tr_count);
      auto model = make_autoencoder(rc.model, rc.model_cfg);
      check_volume_compatible(*model, series.dims);
      const Tensor train_x = series_samples(split.train);
      std::optional<Tensor> test_x;
      if (split.test.size() > 0) test_x = series_samples(split.test);
      TrainHooks hooks;
      if (!tr_ckpt.empty()) hooks.checkpoint_path = tr_ckpt;
      if (!tr_resume.empty()) hooks.resume = load_checkpoint(tr_resume, model->weights());
      hooks.on_epoch = [&](const EpochRow& r) {
        out << "epoch " << r.epoch << " train_loss=" << format_number(r.train_loss)
            << " test_loss=" << format_number(r.test_loss) << " seconds=" << format_number(r.seconds) << '\n';
      };
      out << "model=" << to_string(rc.model) << " params=" << total_params(*model)
          << " train_samples=" << train_x.dim(0) << " test_samples=" << (test_x ? test_x->dim(0) : 0)
          << " norm_min=" << format_number(series.norm_min) << " norm_max=" << format_number(series.norm_max)
          << '\n';
      const auto result = train(*model, train_x, test_x, rc.train, hooks);
      save_weights(*model, out_path);
      write_loss_log(result.record, tr_log.empty() ? out_path + ".loss.csv" : tr_log);
      out << "best_epoch=" << result.best_epoch << " best_loss=" << format_number(result.best_loss)
          << " epochs_run=" << result.record.rows.size() << (result.stopped_early ? " (early stop)" : "") << '\n';
    } else if (*enc) {
      auto model = load_model();
      EncodeOptions opts;
      if (norm_min.has_value() != norm_max.has_value()) {
        throw detail::UsageProblem("--norm-min and --norm-max must be given together");
      }
      if (norm_min) opts.norm_range = std::make_pair(*norm_min, *norm_max);
      const auto s = encode_series(*model, input_path, out_path, opts);
      out << "timesteps=" << s.timesteps << " original_bytes=" << s.original_bytes
          << " latent_bytes=" << s.latent_bytes
          << " ratio=" << (s.ratio() ? format_number(*s.ratio()) : std::string("n/a")) << '\n';
    } else if (*dec) {
      auto model = load_model();
      const auto n = decode_series(*model, input_path, out_path);
      out << "decoded " << n << " timesteps to " << out_path << '\n';
    } else if (*st) {
      std::optional<std::filesystem::path> latent;
      if (!st_latent.empty()) latent = st_latent;
      const auto report = stats(st_orig, st_recon, latent);
      print_report(report, out);
      if (!out_path.empty()) write_report_csv(report, out_path);
    } else if (*be) {
      auto model = load_model();
      BenchOptions opts;
      opts.repetitions = be_reps;
      opts.parallel = be_parallel;
      if (be_reps < 3) throw detail::UsageProblem("--reps must be at least 3");
      const auto r = bench(*model, input_path, opts);
      print_bench_table(r, out);
      if (!out_path.empty()) write_bench_csv(r, out_path);
    } else if (*pc) {
      const auto latents = stream_latents(read_stream(input_path));
      if (pca_k < 2) throw detail::UsageProblem("--k must be at least 2 for a projection CSV");
      const auto basis = fit_pca(latents, pca_k);
      export_projection_csv(basis, latents, out_path);
      out << "eigenvalues=";
      for (std::size_t i = 0; i < basis.eigenvalues.size(); ++i) out << (i ? "," : "") << format_number(basis.eigenvalues[i]);
      out << '\n';
    } else if (*ip) {
      auto stream = read_stream(input_path);
      if (ip_a >= stream.timesteps.size() || ip_b >= stream.timesteps.size()) {
        throw detail::UsageProblem("--a/--b out of range for a stream with " + std::to_string(stream.timesteps.size()) +
                                   " timesteps");
      }
      const auto latents = stream_latents(stream);
      const auto basis = fit_pca(latents, ip_k);
      const auto mid = interpolate_timestep(basis, latents[ip_a], latents[ip_b], ip_t);
      LatentStream one = stream;
      one.timesteps.assign(1, std::vector<float>(mid.values.begin(), mid.values.end()));
      write_stream(out_path, one);
      out << "interpolated timesteps " << ip_a << " and " << ip_b << " at t=" << ip_t << " with k=" << ip_k << '\n';
    } else if (*rd) {
      std::optional<std::pair<double, double>> range;
      if (rd_min.has_value() != rd_max.has_value()) throw detail::UsageProblem("--min and --max must be given together");
      if (rd_min) range = std::make_pair(*rd_min, *rd_max);
      render_slice_ppm(input_path, rd_t, rd_slice, out_path, range);
      out << "wrote " << out_path << '\n';
    } else if (*gc) {
      const double e = run_model_gradcheck(gradcheck_config(), seed.value_or(3), gc_step);
      out << "max_relative_error=" << format_number(e) << '\n';
      if (!(e <= gc_tol)) {
        err << "error: runtime: gradient check exceeded tolerance " << format_number(gc_tol) << '\n';
        return kRuntimeError;
      }
    }
  } catch (const detail::UsageProblem& e) {
    err << "error: usage: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: runtime: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

}  // namespace rae::cli
