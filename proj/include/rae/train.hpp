#pragma once

// Minibatch Adam training with early stopping, loss logging and exact-resume
// checkpoints.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "rae/binary_io.hpp"
#include "rae/error.hpp"
#include "rae/nn.hpp"
#include "rae/tensor.hpp"

namespace rae {

struct AdamHyper {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update over `params` using their accumulated grads.
// A parameter without a gradient buffer is treated as having zero gradient.
inline void adam_step(std::span<Tensor> params, AdamState& state, const AdamHyper& h) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state has wrong parameter count");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].mutable_data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.size() || v.size() != p.size()) {
      throw ShapeError("adam_step: optimizer state size mismatch for parameter " + std::to_string(k));
    }
    const bool has_grad = params[k].has_grad();
    const auto g = params[k].grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      p[i] -= h.learning_rate * mhat / (std::sqrt(vhat) + h.epsilon);
    }
  }
}

inline void adam_step(ModelWeights& w, AdamState& state, const AdamHyper& h) {
  std::vector<Tensor> params;
  for (const auto& p : w.params()) params.push_back(p.value);
  adam_step(std::span<Tensor>(params), state, h);
}

struct TrainConfig {
  int max_epochs = 100;
  int batch_size = 16;
  AdamHyper adam{};
  int early_stop_patience = 20;
  double early_stop_min_delta = 1e-5;
  std::uint64_t seed = 0;
  int checkpoint_every = 10;

  static TrainConfig defaults_for(ModelKind kind) {
    TrainConfig c;
    c.max_epochs = kind == ModelKind::baseline ? 7000 : 100;
    return c;
  }

  void validate() const {
    if (max_epochs <= 0 || batch_size <= 0 || early_stop_patience <= 0 || checkpoint_every <= 0) {
      throw ConfigError("epochs, batch size, patience and checkpoint interval must be positive");
    }
    if (early_stop_patience >= max_epochs) throw ConfigError("early_stop_patience must be below max_epochs");
    if (!(adam.learning_rate >= 0.0) || !(adam.epsilon > 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0) ||
        !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) || !(early_stop_min_delta >= 0.0)) {
      throw ConfigError("invalid optimizer or early-stopping settings");
    }
  }
};

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;  // NaN when there is no test set
  double seconds = 0.0;
  bool is_best = false;
};

struct TrainRecord {
  std::vector<EpochRow> rows;

  std::optional<int> best_epoch() const {
    for (const auto& r : rows)
      if (r.is_best) return r.epoch;
    return std::nullopt;
  }
};

// Everything needed to continue a run bit-for-bit.
struct TrainState {
  int epoch = 0;  // completed epochs
  AdamState adam;
  double best_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int since_best = 0;
  std::vector<std::vector<double>> best_weights;
  TrainRecord record;
};

struct TrainResult {
  TrainRecord record;
  std::vector<std::vector<double>> best_weights;
  int best_epoch = 0;
  double best_loss = 0.0;
  bool stopped_early = false;
};

struct TrainHooks {
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<TrainState> resume;
  std::function<void(const EpochRow&)> on_epoch;
  // Source of wall-clock seconds for the record; injectable for tests.
  std::function<double()> clock;
  // Stops after this many epochs without finishing the run (for resume tests).
  std::optional<int> halt_after_epoch;
  // Ends the run early once this returns true for a finished epoch (target-loss runs).
  std::function<bool(const EpochRow&)> stop_when;
};

// ---------------------------------------------------------------------------
// Checkpoints: RAWT section followed by a RAOS optimizer/trainer section.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kOptimizerFormatVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const ModelWeights& w, const TrainState& s) {
  io::ByteWriter out;
  serialize_weights(w, out);
  out.put_bytes("RAOS");
  out.put_u16(kOptimizerFormatVersion);
  out.put_u32(static_cast<std::uint32_t>(s.epoch));
  out.put_u64(s.adam.step);
  out.put_f64(s.best_loss);
  out.put_u32(static_cast<std::uint32_t>(s.best_epoch));
  out.put_u32(static_cast<std::uint32_t>(s.since_best));
  out.put_u32(static_cast<std::uint32_t>(w.size()));
  const bool have_moments = !s.adam.m.empty();
  const bool have_best = !s.best_weights.empty();
  out.put_u8(static_cast<std::uint8_t>((have_moments ? 1 : 0) | (have_best ? 2 : 0)));
  for (std::size_t k = 0; k < w.size(); ++k) {
    const auto d = w.params()[k].value.data();
    for (double v : d) out.put_f64(v);
    if (have_moments) {
      for (double v : s.adam.m[k]) out.put_f64(v);
      for (double v : s.adam.v[k]) out.put_f64(v);
    }
    if (have_best)
      for (double v : s.best_weights[k]) out.put_f64(v);
  }
  out.put_u32(static_cast<std::uint32_t>(s.record.rows.size()));
  for (const auto& r : s.record.rows) {
    out.put_u32(static_cast<std::uint32_t>(r.epoch));
    out.put_f64(r.train_loss);
    out.put_f64(r.test_loss);
    out.put_f64(r.seconds);
    out.put_u8(r.is_best ? 1 : 0);
  }
  io::write_file_atomic(path, out.bytes());
}

// Restores full-precision weights into `w` and returns the trainer state.
inline TrainState load_checkpoint(const std::filesystem::path& path, ModelWeights& w) {
  const auto bytes = io::read_file(path);
  io::ByteReader in(bytes, path.string());
  deserialize_weights(w, in);
  in.expect_magic("RAOS");
  if (in.get_u16() != kOptimizerFormatVersion) throw FormatError(path.string() + ": unsupported RAOS version");
  TrainState s;
  s.epoch = static_cast<int>(in.get_u32());
  s.adam.step = in.get_u64();
  s.best_loss = in.get_f64();
  s.best_epoch = static_cast<int>(in.get_u32());
  s.since_best = static_cast<int>(in.get_u32());
  if (in.get_u32() != w.size()) throw TopologyError(path.string() + ": optimizer state parameter count mismatch");
  const auto flags = in.get_u8();
  const bool have_moments = flags & 1, have_best = flags & 2;
  for (std::size_t k = 0; k < w.size(); ++k) {
    Tensor target = w.params()[k].value;
    auto d = target.mutable_data();
    auto read_vec = [&](std::size_t n) {
      in.need(8 * n);
      std::vector<double> v(n);
      for (double& x : v) x = in.get_f64();
      return v;
    };
    const auto master = read_vec(d.size());
    std::copy(master.begin(), master.end(), d.begin());
    if (have_moments) {
      s.adam.m.push_back(read_vec(d.size()));
      s.adam.v.push_back(read_vec(d.size()));
    }
    if (have_best) s.best_weights.push_back(read_vec(d.size()));
  }
  const auto rows = in.get_u32();
  for (std::uint32_t i = 0; i < rows; ++i) {
    EpochRow r;
    r.epoch = static_cast<int>(in.get_u32());
    r.train_loss = in.get_f64();
    r.test_loss = in.get_f64();
    r.seconds = in.get_f64();
    r.is_best = in.get_u8() != 0;
    s.record.rows.push_back(r);
  }
  if (!in.at_end()) throw FormatError(path.string() + ": trailing bytes after checkpoint");
  return s;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

inline Tensor gather_samples(const Tensor& samples, std::span<const std::size_t> indices) {
  const std::size_t per = samples.numel() / samples.dim(0);
  std::vector<double> buf(per * indices.size());
  const auto src = samples.data();
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                buf.begin() + static_cast<std::ptrdiff_t>(i * per));
  Shape shape = samples.shape();
  shape[0] = indices.size();
  return Tensor(std::move(shape), std::move(buf));
}

// Mean reconstruction MSE over all samples, evaluated in batches without a tape.
inline double evaluate_loss(const Autoencoder& model, const Tensor& samples, int batch_size) {
  const std::size_t n = samples.dim(0);
  double acc = 0.0;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tensor x = gather_samples(samples, idx);
    acc += mse_loss(model.forward(x), x).item() * static_cast<double>(end - start);
  }
  return acc / static_cast<double>(n);
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline bool all_finite(const ModelWeights& w) {
  for (const auto& p : w.params())
    for (double v : p.value.data())
      if (!std::isfinite(v)) return false;
  return true;
}

// Trains `model` on [N,C,H,W] samples. The monitored loss is the test loss, or
// the train loss when `test_samples` is empty. On return the model holds the
// weights of the best monitored epoch.
inline TrainResult train(Autoencoder& model, const Tensor& train_samples,
                         const std::optional<Tensor>& test_samples, const TrainConfig& cfg,
                         TrainHooks hooks = {}) {
  cfg.validate();
  if (!train_samples.defined() || train_samples.rank() != 4) {
    throw ConfigError("train: training samples must be a non-empty [N,C,H,W] tensor");
  }
  const bool have_test = test_samples.has_value() && test_samples->defined();
  const std::size_t n = train_samples.dim(0);
  auto& weights = model.weights();

  TrainState st;
  if (hooks.resume) st = std::move(*hooks.resume);
  if (st.best_weights.empty()) st.best_weights = weights.snapshot();

  using clock = std::chrono::steady_clock;
  auto now = hooks.clock ? hooks.clock : [] {
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
  };

  bool stopped_early = false;
  while (st.epoch < cfg.max_epochs) {
    const int epoch = st.epoch + 1;
    const double t0 = now();
    const auto order = epoch_order(n, cfg.seed, epoch);
    double loss_sum = 0.0;
    int batch_no = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      Tensor x = gather_samples(train_samples, std::span(order).subspan(start, end - start));
      weights.zero_grad();
      Tape tape;
      Tensor loss = mse_loss(model.forward(x, &tape), x, &tape);
      if (!std::isfinite(loss.item())) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_no));
      }
      tape.backward(loss);
      adam_step(weights, st.adam, cfg.adam);
      loss_sum += loss.item() * static_cast<double>(end - start);
    }
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(n);
    row.test_loss = have_test ? evaluate_loss(model, *test_samples, cfg.batch_size)
                              : std::numeric_limits<double>::quiet_NaN();
    const double monitored = have_test ? row.test_loss : row.train_loss;
    if (!std::isfinite(monitored)) {
      throw TrainingError("non-finite evaluation loss at epoch " + std::to_string(epoch));
    }
    if (monitored < st.best_loss - cfg.early_stop_min_delta || st.best_epoch == 0) {
      st.best_loss = monitored;
      st.best_epoch = epoch;
      st.since_best = 0;
      st.best_weights = weights.snapshot();
    } else {
      ++st.since_best;
    }
    row.seconds = now() - t0;
    st.record.rows.push_back(row);
    st.epoch = epoch;
    for (auto& r : st.record.rows) r.is_best = r.epoch == st.best_epoch;
    if (hooks.on_epoch) hooks.on_epoch(st.record.rows.back());

    const bool stop = st.since_best >= cfg.early_stop_patience;
    if (hooks.checkpoint_path && (epoch % cfg.checkpoint_every == 0 || stop || epoch == cfg.max_epochs)) {
      if (!all_finite(weights)) throw TrainingError("non-finite parameter at epoch " + std::to_string(epoch));
      save_checkpoint(*hooks.checkpoint_path, weights, st);
    }
    if (stop) {
      stopped_early = true;
      break;
    }
    if (hooks.halt_after_epoch && epoch >= *hooks.halt_after_epoch) break;
    if (hooks.stop_when && hooks.stop_when(st.record.rows.back())) break;
  }

  weights.restore(st.best_weights);
  TrainResult result;
  result.record = st.record;
  result.best_weights = st.best_weights;
  result.best_epoch = st.best_epoch;
  result.best_loss = st.best_loss;
  result.stopped_early = stopped_early;
  return result;
}

// ---------------------------------------------------------------------------
// Loss log CSV
// ---------------------------------------------------------------------------

inline void write_loss_log(const TrainRecord& record, const std::filesystem::path& path) {
  io::AtomicFile f(path);
  auto& os = f.stream();
  os << "epoch,train_loss,test_loss,seconds,is_best\n";
  char buf[160];
  for (const auto& r : record.rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%d\n", r.epoch, r.train_loss, r.test_loss, r.seconds,
                  r.is_best ? 1 : 0);
    os << buf;
  }
  f.commit();
}

inline TrainRecord read_loss_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "epoch,train_loss,test_loss,seconds,is_best") {
    throw FormatError(path.string() + ": missing loss log header");
  }
  TrainRecord rec;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    EpochRow r;
    int best = 0;
    char train[64], test[64];
    if (std::sscanf(line.c_str(), "%d,%63[^,],%63[^,],%lf,%d", &r.epoch, train, test, &r.seconds, &best) != 5) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    }
    r.train_loss = std::strtod(train, nullptr);
    r.test_loss = std::strtod(test, nullptr);
    r.is_best = best != 0;
    rec.rows.push_back(r);
  }
  return rec;
}

}  // namespace rae
