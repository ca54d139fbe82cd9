#pragma once

// Residual Dense Blocks, Residual-in-Residual Dense Blocks and the two
// autoencoder topologies (residual and plain baseline), with parameter
// registry, initialisation and the RAWT weight file.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "rae/binary_io.hpp"
#include "rae/error.hpp"
#include "rae/tensor.hpp"

namespace rae {

struct RdbConfig {
  int channels = 64;
  int num_dense_layers = 3;
  int growth_rate = 16;
  double beta = 0.2;
  // Multiplier on the fan-in init std of the block's convolutions. Small values
  // start each block near identity, which deep residual stacks need to train.
  double init_scale = 0.1;

  void validate() const {
    if (!(init_scale > 0.0)) throw ConfigError("RDB init_scale must be positive");
    if (channels <= 0 || num_dense_layers <= 0 || growth_rate <= 0) {
      throw ConfigError("RDB channels, dense layer count and growth rate must be positive");
    }
    if (!(beta > 0.0 && beta <= 1.0)) {
      throw ConfigError("RDB beta must lie in (0,1], got " + std::to_string(beta));
    }
  }
};

enum class ModelKind { residual, baseline };

inline std::string_view to_string(ModelKind k) {
  return k == ModelKind::residual ? "residual" : "baseline";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "residual") return ModelKind::residual;
  if (s == "baseline") return ModelKind::baseline;
  throw ConfigError("unknown model kind '" + std::string(s) + "' (expected residual or baseline)");
}

struct ModelConfig {
  int input_channels = 1;
  int input_height = 128;
  int input_width = 128;
  int stem_filters = 64;
  int rrdb_rdbs = 3;
  // `channels` is overwritten per stage with the stage's input width.
  RdbConfig rdb{64, 3, 16, 0.2};
  std::vector<int> encoder_stage_out_channels{64, 64, 32, 4};
  // Per-stage widths of the plain convolutional baseline.
  std::vector<int> baseline_channels{16, 16, 8, 4};
  double activation_slope = 0.2;
  std::uint64_t init_seed = 1;

  int pooling_stages() const { return static_cast<int>(encoder_stage_out_channels.size()) - 1; }

  std::array<int, 3> input_shape() const { return {input_channels, input_height, input_width}; }

  std::array<int, 3> latent_shape(ModelKind kind = ModelKind::residual) const {
    const int f = 1 << pooling_stages();
    const int c = kind == ModelKind::residual ? encoder_stage_out_channels.back()
                                              : baseline_channels.back();
    return {c, input_height / f, input_width / f};
  }

  void validate() const {
    if (input_channels <= 0 || input_height <= 0 || input_width <= 0 || stem_filters <= 0 ||
        rrdb_rdbs <= 0) {
      throw ConfigError("model dimensions and filter counts must be positive");
    }
    if (encoder_stage_out_channels.size() < 2) {
      throw ConfigError("encoder needs at least two stages");
    }
    if (baseline_channels.size() != encoder_stage_out_channels.size()) {
      throw ConfigError("baseline_channels must have one entry per encoder stage");
    }
    for (int c : encoder_stage_out_channels)
      if (c <= 0) throw ConfigError("encoder stage channels must be positive");
    for (int c : baseline_channels)
      if (c <= 0) throw ConfigError("baseline channels must be positive");
    const int f = 1 << pooling_stages();
    if (input_height % f != 0 || input_width % f != 0) {
      throw ConfigError("input " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                        " is not divisible by 2^" + std::to_string(pooling_stages()));
    }
    if (!(activation_slope >= 0.0 && activation_slope < 1.0)) {
      throw ConfigError("activation slope must lie in [0,1)");
    }
    RdbConfig r = rdb;
    r.channels = 1;
    r.validate();
  }
};

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

struct Param {
  std::string name;
  Tensor value;
  double init_scale = 1.0;
};

// Ordered, uniquely named parameter tensors. Order and names are fixed by the
// topology that registered them.
class ModelWeights {
 public:
  Tensor add(std::string name, Shape shape, double init_scale = 1.0) {
    if (!names_.insert(name).second) throw ConfigError("duplicate parameter name " + name);
    Tensor t(std::move(shape));
    t.set_requires_grad(true);
    params_.push_back({std::move(name), t, init_scale});
    return t;
  }

  const std::vector<Param>& params() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::optional<Tensor> find(std::string_view name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.value;
    return std::nullopt;
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  // FNV-1a over ordered (name, rank, dims).
  std::uint64_t fingerprint() const {
    io::Fnv1a h;
    for (const auto& p : params_) {
      h.update(p.name);
      h.update(std::string_view("\0", 1));
      h.update_u64(p.value.rank());
      for (auto d : p.value.shape()) h.update_u64(d);
    }
    return h.value();
  }

  void fill(double v) {
    for (auto& p : params_) {
      auto d = p.value.mutable_data();
      std::fill(d.begin(), d.end(), v);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> s;
    s.reserve(params_.size());
    for (const auto& p : params_) s.emplace_back(p.value.data().begin(), p.value.data().end());
    return s;
  }

  void restore(const std::vector<std::vector<double>>& s) {
    if (s.size() != params_.size()) throw TopologyError("snapshot parameter count mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto d = params_[i].value.mutable_data();
      if (s[i].size() != d.size()) throw TopologyError("snapshot size mismatch for " + params_[i].name);
      std::copy(s[i].begin(), s[i].end(), d.begin());
    }
  }

  // Fan-in scaled normal (std = init_scale * sqrt(2 / fan_in)) for kernels, zero biases.
  void kaiming_init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& p : params_) {
      auto d = p.value.mutable_data();
      if (p.value.rank() == 4) {
        const double fan_in = static_cast<double>(p.value.dim(1) * p.value.dim(2) * p.value.dim(3));
        std::normal_distribution<double> dist(0.0, p.init_scale * std::sqrt(2.0 / fan_in));
        for (auto& v : d) v = dist(rng);
      } else {
        std::fill(d.begin(), d.end(), 0.0);
      }
    }
  }

 private:
  std::vector<Param> params_;
  std::unordered_set<std::string> names_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

// Kaiming's sqrt(2) gain assumes a rectifier follows the conv. Convs feeding a
// linear path (stem, stage tails, outputs) use unit gain so chained linear
// layers do not inflate the activations.
inline constexpr double kLinearInitScale = 0.70710678118654752;

class Conv2d {
 public:
  Conv2d(ModelWeights& w, const std::string& name, int in_channels, int out_channels, int ksize,
         double init_scale = 1.0)
      : ksize_(ksize) {
    if (ksize != 1 && ksize != 3) throw ConfigError("only 1x1 and 3x3 convolutions are supported");
    kernel_ = w.add(name + ".weight", {std::size_t(out_channels), std::size_t(in_channels),
                                       std::size_t(ksize), std::size_t(ksize)},
                    init_scale);
    bias_ = w.add(name + ".bias", {std::size_t(out_channels)});
  }

  Tensor forward(const Tensor& x, Tape* tape) const {
    return ksize_ == 3 ? conv2d(x, kernel_, bias_, tape) : conv2d_1x1(x, kernel_, bias_, tape);
  }

  int in_channels() const { return static_cast<int>(kernel_.dim(1)); }
  int out_channels() const { return static_cast<int>(kernel_.dim(0)); }

 private:
  Tensor kernel_, bias_;
  int ksize_;
};

// Residual Dense Block: densely connected 3x3 convolutions, 1x1 local fusion
// back to the block width, and a beta-scaled residual.
class Rdb {
 public:
  Rdb(ModelWeights& w, const std::string& name, const RdbConfig& cfg, double slope)
      : cfg_(cfg), slope_(slope) {
    cfg.validate();
    int width = cfg.channels;
    for (int i = 0; i < cfg.num_dense_layers; ++i) {
      dense_.emplace_back(w, name + ".dense" + std::to_string(i), width, cfg.growth_rate, 3, cfg.init_scale);
      width += cfg.growth_rate;
    }
    fuse_.emplace(w, name + ".fuse", width, cfg.channels, 1, cfg.init_scale);
  }

  Tensor forward(const Tensor& x, Tape* tape) const {
    const auto s = detail::nchw(x, "rdb");
    if (static_cast<int>(s.c) != cfg_.channels) {
      throw ShapeError("rdb: expected " + std::to_string(cfg_.channels) + " input channels, got " +
                       std::to_string(s.c));
    }
    std::vector<Tensor> features{x};
    for (const auto& conv : dense_) {
      Tensor joined = features.size() == 1 ? x : concat_channels(features, tape);
      features.push_back(leaky_relu(conv.forward(joined, tape), slope_, tape));
    }
    Tensor fused = fuse_->forward(concat_channels(features, tape), tape);
    return add_scaled(x, fused, cfg_.beta, tape);
  }

 private:
  RdbConfig cfg_;
  double slope_;
  std::vector<Conv2d> dense_;
  std::optional<Conv2d> fuse_;
};

// Residual-in-Residual Dense Block. The RDB chain output r is blended with the
// block input as x + beta*(r - x); a trailing 3x3 conv changes the width when
// out_channels differs from the input width.
class Rrdb {
 public:
  Rrdb(ModelWeights& w, const std::string& name, const RdbConfig& cfg, int out_channels,
       int num_rdbs, double slope)
      : beta_(cfg.beta) {
    if (num_rdbs < 1) throw ConfigError("rrdb needs at least one RDB");
    for (int i = 0; i < num_rdbs; ++i) rdbs_.emplace_back(w, name + ".rdb" + std::to_string(i), cfg, slope);
    if (out_channels != cfg.channels) tail_.emplace(w, name + ".tail", cfg.channels, out_channels, 3, kLinearInitScale);
  }

  Tensor forward(const Tensor& x, Tape* tape) const {
    Tensor r = x;
    for (const auto& rdb : rdbs_) r = rdb.forward(r, tape);
    Tensor y = add_scaled(x, add_scaled(r, x, -1.0, tape), beta_, tape);
    return tail_ ? tail_->forward(y, tape) : y;
  }

 private:
  double beta_;
  std::vector<Rdb> rdbs_;
  std::optional<Conv2d> tail_;
};

// ---------------------------------------------------------------------------
// Autoencoders
// ---------------------------------------------------------------------------

class Autoencoder {
 public:
  explicit Autoencoder(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }
  virtual ~Autoencoder() = default;
  Autoencoder(const Autoencoder&) = delete;
  Autoencoder& operator=(const Autoencoder&) = delete;

  virtual ModelKind kind() const = 0;
  virtual Tensor encode(const Tensor& x, Tape* tape = nullptr) const = 0;
  virtual Tensor decode(const Tensor& z, Tape* tape = nullptr) const = 0;

  Tensor forward(const Tensor& x, Tape* tape = nullptr) const { return decode(encode(x, tape), tape); }

  const ModelConfig& config() const { return cfg_; }
  ModelWeights& weights() { return weights_; }
  const ModelWeights& weights() const { return weights_; }
  std::array<int, 3> latent_shape() const { return cfg_.latent_shape(kind()); }

 protected:
  void check_input(const Tensor& x, const char* op, std::array<int, 3> expect_chw) const {
    const auto s = detail::nchw(x, op);
    if (int(s.c) != expect_chw[0] || int(s.h) != expect_chw[1] || int(s.w) != expect_chw[2]) {
      throw ShapeError(std::string(op) + ": expected (" + std::to_string(expect_chw[0]) + "," +
                       std::to_string(expect_chw[1]) + "," + std::to_string(expect_chw[2]) +
                       ") samples, got " + shape_str(x.shape()));
    }
  }

  ModelConfig cfg_;
  ModelWeights weights_;
};

// Stem conv, then one RRDB per stage with a 2x2 max pool between stages.
class ResidualEncoder {
 public:
  ResidualEncoder(ModelWeights& w, const ModelConfig& cfg) : slope_(cfg.activation_slope) {
    stem_.emplace(w, "enc.stem", cfg.input_channels, cfg.stem_filters, 3, kLinearInitScale);
    int width = cfg.stem_filters;
    for (std::size_t i = 0; i < cfg.encoder_stage_out_channels.size(); ++i) {
      RdbConfig r = cfg.rdb;
      r.channels = width;
      const int out = cfg.encoder_stage_out_channels[i];
      stages_.emplace_back(w, "enc.stage" + std::to_string(i), r, out, cfg.rrdb_rdbs, slope_);
      width = out;
    }
  }

  Tensor forward(const Tensor& x, Tape* tape) const {
    Tensor h = stem_->forward(x, tape);
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      h = stages_[i].forward(h, tape);
      if (i + 1 < stages_.size()) h = maxpool2x2(h, tape);
    }
    return h;
  }

 private:
  double slope_;
  std::optional<Conv2d> stem_;
  std::vector<Rrdb> stages_;
};

// Mirror of the encoder: stage widths are the encoder's reversed (minus the
// latent stage) followed by the stem width, with a 2x upsample in front of
// every stage but the first, then a 3x3 output conv with identity activation.
class ResidualDecoder {
 public:
  ResidualDecoder(ModelWeights& w, const ModelConfig& cfg) {
    const auto& enc = cfg.encoder_stage_out_channels;
    std::vector<int> outs(enc.rbegin() + 1, enc.rend());
    outs.push_back(cfg.stem_filters);
    int width = enc.back();
    for (std::size_t i = 0; i < outs.size(); ++i) {
      RdbConfig r = cfg.rdb;
      r.channels = width;
      stages_.emplace_back(w, "dec.stage" + std::to_string(i), r, outs[i], cfg.rrdb_rdbs,
                           cfg.activation_slope);
      width = outs[i];
    }
    out_.emplace(w, "dec.out", width, cfg.input_channels, 3, kLinearInitScale);
  }

  static std::vector<int> stage_out_channels(const ModelConfig& cfg) {
    const auto& enc = cfg.encoder_stage_out_channels;
    std::vector<int> outs(enc.rbegin() + 1, enc.rend());
    outs.push_back(cfg.stem_filters);
    return outs;
  }

  Tensor forward(const Tensor& z, Tape* tape) const {
    Tensor h = z;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      if (i > 0) h = upsample2x2(h, tape);
      h = stages_[i].forward(h, tape);
    }
    return out_->forward(h, tape);
  }

 private:
  std::vector<Rrdb> stages_;
  std::optional<Conv2d> out_;
};

class ResidualAutoencoder final : public Autoencoder {
 public:
  explicit ResidualAutoencoder(const ModelConfig& cfg)
      : Autoencoder(cfg), encoder_(weights_, cfg_), decoder_(weights_, cfg_) {
    weights_.kaiming_init(cfg_.init_seed);
  }

  ModelKind kind() const override { return ModelKind::residual; }

  Tensor encode(const Tensor& x, Tape* tape = nullptr) const override {
    check_input(x, "encode", cfg_.input_shape());
    return encoder_.forward(x, tape);
  }

  Tensor decode(const Tensor& z, Tape* tape = nullptr) const override {
    check_input(z, "decode", latent_shape());
    return decoder_.forward(z, tape);
  }

 private:
  ResidualEncoder encoder_;
  ResidualDecoder decoder_;
};

// Plain convolutional autoencoder on the same pool/upsample skeleton: one 3x3
// conv per stage (widths from baseline_channels), leaky ReLU between convs.
class BaselineCae final : public Autoencoder {
 public:
  explicit BaselineCae(const ModelConfig& cfg) : Autoencoder(cfg) {
    const auto& ch = cfg_.baseline_channels;
    int width = cfg_.input_channels;
    for (std::size_t i = 0; i < ch.size(); ++i) {
      enc_.emplace_back(weights_, "cae.enc.conv" + std::to_string(i), width, ch[i], 3);
      width = ch[i];
    }
    for (std::size_t i = ch.size() - 1; i-- > 0;) {
      dec_.emplace_back(weights_, "cae.dec.conv" + std::to_string(dec_.size()), width, ch[i], 3);
      width = ch[i];
    }
    out_.emplace(weights_, "cae.dec.out", width, cfg_.input_channels, 3, kLinearInitScale);
    weights_.kaiming_init(cfg_.init_seed);
  }

  ModelKind kind() const override { return ModelKind::baseline; }

  Tensor encode(const Tensor& x, Tape* tape = nullptr) const override {
    check_input(x, "encode", cfg_.input_shape());
    Tensor h = x;
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      h = enc_[i].forward(h, tape);
      if (i + 1 < enc_.size()) {
        h = leaky_relu(h, cfg_.activation_slope, tape);
        h = maxpool2x2(h, tape);
      }
    }
    return h;
  }

  Tensor decode(const Tensor& z, Tape* tape = nullptr) const override {
    check_input(z, "decode", latent_shape());
    Tensor h = z;
    for (const auto& conv : dec_) {
      h = leaky_relu(conv.forward(h, tape), cfg_.activation_slope, tape);
      h = upsample2x2(h, tape);
    }
    return out_->forward(h, tape);
  }

 private:
  std::vector<Conv2d> enc_;
  std::vector<Conv2d> dec_;
  std::optional<Conv2d> out_;
};

inline std::unique_ptr<Autoencoder> make_autoencoder(ModelKind kind, const ModelConfig& cfg) {
  if (kind == ModelKind::residual) return std::make_unique<ResidualAutoencoder>(cfg);
  return std::make_unique<BaselineCae>(cfg);
}

inline std::size_t total_params(const Autoencoder& model) { return model.weights().total_params(); }

// ---------------------------------------------------------------------------
// RAWT weight file
// ---------------------------------------------------------------------------
//
// "RAWT" | u16 version | u64 fingerprint | u32 parameter count, then per
// parameter: u16 name length | name | u8 rank | u32 dims[rank] | f32 values.

inline constexpr std::uint16_t kWeightFormatVersion = 1;
inline constexpr std::size_t kWeightHeaderBytes = 4 + 2 + 8 + 4;

inline void serialize_weights(const ModelWeights& w, io::ByteWriter& out) {
  out.put_bytes("RAWT");
  out.put_u16(kWeightFormatVersion);
  out.put_u64(w.fingerprint());
  out.put_u32(static_cast<std::uint32_t>(w.size()));
  for (const auto& p : w.params()) {
    out.put_u16(static_cast<std::uint16_t>(p.name.size()));
    out.put_bytes(p.name);
    out.put_u8(static_cast<std::uint8_t>(p.value.rank()));
    for (auto d : p.value.shape()) out.put_u32(static_cast<std::uint32_t>(d));
    for (double v : p.value.data()) out.put_f32(static_cast<float>(v));
  }
}

// Reads a RAWT section into `w`. Parameter names and shapes must match `w`
// in order; the first mismatch is reported by name.
inline void deserialize_weights(ModelWeights& w, io::ByteReader& in) {
  in.expect_magic("RAWT");
  const auto version = in.get_u16();
  if (version != kWeightFormatVersion) {
    throw FormatError(in.context() + ": unsupported weight format version " + std::to_string(version));
  }
  const auto fingerprint = in.get_u64();
  const auto count = in.get_u32();
  const auto& params = w.params();
  std::vector<std::vector<float>> values(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = in.get_bytes(in.get_u16());
    Shape shape(in.get_u8());
    for (auto& d : shape) d = in.get_u32();
    if (i >= params.size()) {
      throw TopologyError(in.context() + ": unexpected extra parameter '" + name + "'");
    }
    if (params[i].name != name || params[i].value.shape() != shape) {
      throw TopologyError(in.context() + ": parameter mismatch at '" + params[i].name + "' (file has '" +
                          name + "' " + shape_str(shape) + ", model expects " +
                          shape_str(params[i].value.shape()) + ")");
    }
    const std::size_t n = shape_numel(shape);
    in.need(4 * n);
    values[i].resize(n);
    for (auto& v : values[i]) v = in.get_f32();
  }
  if (count < params.size()) {
    throw TopologyError(in.context() + ": parameter mismatch at '" + params[count].name +
                        "' (missing from file)");
  }
  if (fingerprint != w.fingerprint()) {
    throw TopologyError(in.context() + ": topology fingerprint mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor target = params[i].value;
    auto d = target.mutable_data();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = values[i][j];
  }
}

inline void save_weights(const ModelWeights& w, const std::filesystem::path& path) {
  io::ByteWriter out;
  serialize_weights(w, out);
  io::write_file_atomic(path, out.bytes());
}

inline void load_weights(ModelWeights& w, const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader in(bytes, path.string());
  deserialize_weights(w, in);
  if (!in.at_end()) throw FormatError(path.string() + ": trailing bytes after weight data");
}

inline void save_weights(const Autoencoder& m, const std::filesystem::path& path) {
  save_weights(m.weights(), path);
}
inline void load_weights(Autoencoder& m, const std::filesystem::path& path) {
  load_weights(m.weights(), path);
}

}  // namespace rae
