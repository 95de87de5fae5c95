#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "oucopula/nd/ops.hpp"

namespace oucopula {

/// Eye channel; the model's channel index j (OS = left, OD = right).
enum class EyeChannel { os = 0, od = 1 };

/// Per-eye label; the model's label index k.
enum class Label { se = 0, al = 1 };

inline constexpr std::size_t kLabelsPerEye = 2;
inline constexpr std::size_t kLabelCount = 4;

/// Fixed bijection between label position and (channel, label):
/// 0 = OS-SE, 1 = OS-AL, 2 = OD-SE, 3 = OD-AL.
constexpr std::size_t label_position(EyeChannel eye, Label label) {
  return static_cast<std::size_t>(eye) * kLabelsPerEye + static_cast<std::size_t>(label);
}
constexpr EyeChannel position_channel(std::size_t pos) { return pos < kLabelsPerEye ? EyeChannel::os : EyeChannel::od; }
constexpr Label position_label(std::size_t pos) { return pos % kLabelsPerEye == 0 ? Label::se : Label::al; }

inline constexpr std::array<std::string_view, kLabelCount> kLabelNames{"os_se", "os_al", "od_se", "od_al"};

inline std::string_view channel_name(EyeChannel eye) { return eye == EyeChannel::os ? "os" : "od"; }

struct BackboneConfig {
  std::size_t resolution = 64;
  std::size_t in_channels = 3;
  // Unset stem fields follow the resolution rule: 3x3/1 below 128 px, 7x7/2 + max-pool otherwise.
  std::optional<std::size_t> stem_kernel;
  std::optional<std::size_t> stem_stride;
  std::optional<bool> stem_pool;
  std::vector<std::size_t> stage_widths{64, 128};
  std::size_t blocks_per_stage = 2;
  std::size_t outputs = 2;
  double adapter_width_ratio = 1.0;
  bool use_adapters = true;
  bool per_channel_head = false;

  std::size_t effective_stem_kernel() const { return stem_kernel.value_or(resolution < 128 ? 3 : 7); }
  std::size_t effective_stem_stride() const { return stem_stride.value_or(resolution < 128 ? 1 : 2); }
  bool effective_stem_pool() const { return stem_pool.value_or(resolution >= 128); }
  std::size_t stem_padding() const {
    const std::size_t k = effective_stem_kernel(), s = effective_stem_stride();
    return k + 1 > s ? (k + 1 - s) / 2 : 0;
  }
};

struct ParameterCensus {
  std::size_t backbone = 0;
  std::size_t adapters = 0;  // both channels together
  std::size_t head = 0;      // included in backbone when shared

  double adapter_ratio() const { return backbone == 0 ? 0.0 : static_cast<double>(adapters) / static_cast<double>(backbone); }
};

/// Shared simplified ResNet trunk (stem + two residual stages) with per-channel
/// parallel residual adapters and a regression head.
///
/// Parameters and batch-norm statistics live in flat vectors and layers refer to
/// them by index, so copying a model yields an independent snapshot.
class BiChannelModel {
 public:
  struct ConvBn {
    std::size_t conv = 0, gamma = 0, beta = 0, stats = 0;
    std::size_t stride = 1, padding = 0;
  };

  struct Adapter {
    std::size_t gamma = 0, beta = 0, stats = 0;
    std::size_t conv = 0;                 // C -> C, or C -> r*C when bottlenecked
    std::optional<std::size_t> conv_up;   // r*C -> C
  };

  struct Block {
    ConvBn first;
    std::size_t conv2 = 0, gamma2 = 0, beta2 = 0, stats2 = 0;
    std::optional<ConvBn> downsample;
    std::array<std::optional<Adapter>, 2> adapters;  // indexed by EyeChannel
  };

  struct Head {
    std::size_t weight = 0, bias = 0;
  };

  BackboneConfig config;
  std::vector<nd::Parameter> params;
  std::vector<nd::BatchNormState> bn_states;
  std::vector<std::string> bn_names;
  ConvBn stem;
  std::vector<std::vector<Block>> stages;
  std::vector<Head> heads;  // one shared head, or one per channel
  std::size_t feature_width = 0;

  std::size_t find_parameter(std::string_view path) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].path == path) return i;
    }
    throw ShapeError("no parameter named '" + std::string(path) + "'");
  }

  bool is_adapter_parameter(std::size_t i) const { return params[i].path.starts_with("adapter."); }
  bool is_adapter_parameter(std::size_t i, EyeChannel eye) const {
    return params[i].path.starts_with("adapter." + std::string(channel_name(eye)) + ".");
  }

  ParameterCensus census() const {
    ParameterCensus c;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::size_t n = params[i].value.size();
      if (is_adapter_parameter(i)) {
        c.adapters += n;
      } else {
        c.backbone += n;
        if (params[i].path.starts_with("head")) c.head += n;
      }
    }
    return c;
  }

  void zero_grad() {
    for (auto& p : params) p.zero_grad();
  }
};

namespace detail {

class ModelBuilder {
 public:
  ModelBuilder(BiChannelModel& m, std::uint64_t seed) : m_(m), rng_(seed) {}

  std::size_t conv(const std::string& path, std::size_t out, std::size_t in, std::size_t k, bool zero = false) {
    nd::Tensor w(nd::Shape{out, in, k, k});
    if (!zero) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(in * k * k)));
      for (double& v : w.values()) v = dist(rng_);
    }
    return add(path, std::move(w));
  }

  // gamma, beta, running-stats slot
  std::array<std::size_t, 3> bn(const std::string& path, std::size_t channels) {
    const std::size_t g = add(path + ".weight", nd::Tensor(nd::Shape{channels}, 1.0));
    const std::size_t b = add(path + ".bias", nd::Tensor(nd::Shape{channels}, 0.0));
    m_.bn_states.emplace_back(channels);
    m_.bn_names.push_back(path);
    return {g, b, m_.bn_states.size() - 1};
  }

  BiChannelModel::ConvBn conv_bn(const std::string& conv_path, const std::string& bn_path, std::size_t out,
                                 std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
    BiChannelModel::ConvBn cb;
    cb.conv = conv(conv_path, out, in, k);
    auto [g, b, s] = bn(bn_path, out);
    cb.gamma = g;
    cb.beta = b;
    cb.stats = s;
    cb.stride = stride;
    cb.padding = padding;
    return cb;
  }

  BiChannelModel::Head head(const std::string& path, std::size_t features, std::size_t outputs) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(features));
    std::uniform_real_distribution<double> dist(-bound, bound);
    nd::Tensor w(nd::Shape{outputs, features});
    for (double& v : w.values()) v = dist(rng_);
    BiChannelModel::Head h;
    h.weight = add(path + ".weight", std::move(w));
    h.bias = add(path + ".bias", nd::Tensor(nd::Shape{outputs}, 0.0));
    return h;
  }

 private:
  std::size_t add(const std::string& path, nd::Tensor value) {
    m_.params.emplace_back(path, std::move(value));
    return m_.params.size() - 1;
  }

  BiChannelModel& m_;
  std::mt19937_64 rng_;
};

}  // namespace detail

/// Spatial size after the stem, or 0 if the stride plan does not fit.
inline std::size_t stem_output_size(const BackboneConfig& cfg) {
  const std::size_t k = cfg.effective_stem_kernel(), s = cfg.effective_stem_stride(), p = cfg.stem_padding();
  if (cfg.resolution + 2 * p < k) return 0;
  std::size_t size = (cfg.resolution + 2 * p - k) / s + 1;
  if (cfg.effective_stem_pool()) size = size >= 2 ? (size + 2 - 3) / 2 + 1 : 0;
  return size;
}

inline void validate(const BackboneConfig& cfg) {
  if (cfg.resolution < 16) throw ShapeError("BackboneConfig: resolution must be >= 16");
  if (cfg.in_channels < 1) throw ShapeError("BackboneConfig: in_channels must be >= 1");
  if (cfg.outputs < 1) throw ShapeError("BackboneConfig: outputs (K) must be >= 1");
  if (cfg.stage_widths.empty()) throw ShapeError("BackboneConfig: at least one stage required");
  if (cfg.blocks_per_stage < 1) throw ShapeError("BackboneConfig: blocks_per_stage must be >= 1");
  if (cfg.effective_stem_kernel() < 1 || cfg.effective_stem_stride() < 1) throw ShapeError("BackboneConfig: invalid stem");
  if (!(cfg.adapter_width_ratio > 0.0 && cfg.adapter_width_ratio <= 1.0)) {
    throw ShapeError("BackboneConfig: adapter_width_ratio must be in (0, 1]");
  }
  for (std::size_t w : cfg.stage_widths) {
    if (w < 1) throw ShapeError("BackboneConfig: stage widths must be positive");
  }
  std::size_t size = stem_output_size(cfg);
  for (std::size_t s = 1; s < cfg.stage_widths.size(); ++s) size = size / 2;
  if (size < 2) {
    throw ShapeError("BackboneConfig: resolution " + std::to_string(cfg.resolution) +
                     " too small for the stride plan (final feature map would be " + std::to_string(size) + " px)");
  }
}

/// Builds a deterministically initialized model: He fan-in normal conv weights,
/// unit/zero batch norm, zero adapter convolutions.
inline BiChannelModel build_model(const BackboneConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  BiChannelModel m;
  m.config = cfg;
  detail::ModelBuilder b(m, seed);

  const std::size_t stem_width = cfg.stage_widths.front();
  m.stem = b.conv_bn("backbone.stem.conv.weight", "backbone.stem.bn", stem_width, cfg.in_channels, cfg.effective_stem_kernel(),
                     cfg.effective_stem_stride(), cfg.stem_padding());

  std::size_t in = stem_width;
  for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    const std::size_t width = cfg.stage_widths[s];
    std::vector<BiChannelModel::Block> blocks;
    for (std::size_t k = 0; k < cfg.blocks_per_stage; ++k) {
      const std::string site = "stage" + std::to_string(s + 1) + ".block" + std::to_string(k);
      const std::string path = "backbone." + site;
      const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
      BiChannelModel::Block blk;
      blk.first = b.conv_bn(path + ".conv1.weight", path + ".bn1", width, in, 3, stride, 1);
      blk.conv2 = b.conv(path + ".conv2.weight", width, width, 3);
      auto [g2, b2, s2] = b.bn(path + ".bn2", width);
      blk.gamma2 = g2;
      blk.beta2 = b2;
      blk.stats2 = s2;
      if (stride != 1 || in != width) {
        blk.downsample = b.conv_bn(path + ".downsample.conv.weight", path + ".downsample.bn", width, in, 1, stride, 0);
      }
      if (cfg.use_adapters) {
        for (EyeChannel eye : {EyeChannel::os, EyeChannel::od}) {
          const std::string apath = "adapter." + std::string(channel_name(eye)) + "." + site;
          BiChannelModel::Adapter a;
          auto [ga, ba, sa] = b.bn(apath + ".bn", width);
          a.gamma = ga;
          a.beta = ba;
          a.stats = sa;
          if (cfg.adapter_width_ratio < 1.0) {
            const auto hidden = static_cast<std::size_t>(std::ceil(cfg.adapter_width_ratio * static_cast<double>(width)));
            a.conv = b.conv(apath + ".down.weight", hidden, width, 1);
            a.conv_up = b.conv(apath + ".up.weight", width, hidden, 1, /*zero=*/true);
          } else {
            a.conv = b.conv(apath + ".conv.weight", width, width, 1, /*zero=*/true);
          }
          blk.adapters[static_cast<std::size_t>(eye)] = a;
        }
      }
      blocks.push_back(blk);
      in = width;
    }
    m.stages.push_back(std::move(blocks));
  }
  m.feature_width = in;
  if (cfg.per_channel_head) {
    m.heads.push_back(b.head("head.os", in, cfg.outputs));
    m.heads.push_back(b.head("head.od", in, cfg.outputs));
  } else {
    m.heads.push_back(b.head("head", in, cfg.outputs));
  }

  if (cfg.use_adapters) {
    const ParameterCensus c = m.census();
    if (!(c.adapter_ratio() < 0.15)) {
      throw ShapeError("BackboneConfig: adapter parameters are " + std::to_string(100.0 * c.adapter_ratio()) +
                       "% of the backbone; must stay below 15%");
    }
  }
  return m;
}

namespace detail {

inline nd::Var conv_bn(nd::GradTape& tape, BiChannelModel& m, const BiChannelModel::ConvBn& cb, nd::Var x,
                       nd::Mode mode) {
  nd::Var y = nd::conv2d(x, tape.parameter(m.params[cb.conv]), std::nullopt, cb.stride, cb.padding);
  return nd::batchnorm2d(y, tape.parameter(m.params[cb.gamma]), tape.parameter(m.params[cb.beta]),
                         m.bn_states[cb.stats], mode);
}

inline nd::Var adapter(nd::GradTape& tape, BiChannelModel& m, const BiChannelModel::Adapter& a, nd::Var h,
                       nd::Mode mode) {
  nd::Var z = nd::batchnorm2d(h, tape.parameter(m.params[a.gamma]), tape.parameter(m.params[a.beta]),
                              m.bn_states[a.stats], mode);
  z = nd::conv2d(z, tape.parameter(m.params[a.conv]), std::nullopt, 1, 0);
  if (a.conv_up) z = nd::conv2d(z, tape.parameter(m.params[*a.conv_up]), std::nullopt, 1, 0);
  return z;
}

}  // namespace detail

namespace detail {

/// Which channel path each sample takes: all `single` (or the plain trunk when
/// unset), or, when `paired`, the first half OS and the second half OD.
struct Routing {
  std::optional<EyeChannel> single;
  bool paired = false;
};

inline nd::Var apply_adapters(nd::GradTape& tape, BiChannelModel& m, const BiChannelModel::Block& blk, nd::Var a,
                              const Routing& route, nd::Mode mode) {
  auto run = [&](EyeChannel eye, nd::Var x) {
    return adapter(tape, m, *blk.adapters[static_cast<std::size_t>(eye)], x, mode);
  };
  if (!route.paired) return run(*route.single, a);
  const std::size_t half = a.value().dim(0) / 2;
  return nd::concat_batch(run(EyeChannel::os, nd::slice_batch(a, 0, half)),
                          run(EyeChannel::od, nd::slice_batch(a, half, 2 * half)));
}

inline nd::Var trunk(nd::GradTape& tape, BiChannelModel& m, nd::Var images, const Routing& route, nd::Mode mode) {
  const nd::Tensor& x = images.value();
  const BackboneConfig& cfg = m.config;
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels || x.dim(2) != cfg.resolution || x.dim(3) != cfg.resolution) {
    throw ShapeError("forward: expected N x " + std::to_string(cfg.in_channels) + " x " + std::to_string(cfg.resolution) +
                     " x " + std::to_string(cfg.resolution) + " images, got " + x.shape().str());
  }
  const bool adapted = cfg.use_adapters && (route.paired || route.single.has_value());
  nd::Var h = nd::relu(conv_bn(tape, m, m.stem, images, mode));
  if (cfg.effective_stem_pool()) h = nd::max_pool2d(h, 3, 2, 1);
  for (const auto& stage : m.stages) {
    for (const auto& blk : stage) {
      nd::Var a = nd::relu(conv_bn(tape, m, blk.first, h, mode));
      nd::Var t = nd::conv2d(a, tape.parameter(m.params[blk.conv2]), std::nullopt, 1, 1);
      if (adapted) t = nd::add(t, apply_adapters(tape, m, blk, a, route, mode));
      t = nd::batchnorm2d(t, tape.parameter(m.params[blk.gamma2]), tape.parameter(m.params[blk.beta2]),
                          m.bn_states[blk.stats2], mode);
      nd::Var shortcut = blk.downsample ? conv_bn(tape, m, *blk.downsample, h, mode) : h;
      h = nd::relu(nd::add(t, shortcut));
    }
  }
  return nd::global_avg_pool(h);
}

inline nd::Var head(nd::GradTape& tape, BiChannelModel& m, nd::Var f, std::optional<EyeChannel> channel) {
  std::size_t k = 0;
  if (m.config.per_channel_head && m.heads.size() == 2 && channel) k = static_cast<std::size_t>(*channel);
  const auto& h = m.heads[k];
  return nd::linear(f, tape.parameter(m.params[h.weight]), tape.parameter(m.params[h.bias]));
}

}  // namespace detail

/// Pooled feature vector (N x F). With `channel` unset, or a model built without
/// adapters, the plain shared trunk is evaluated.
inline nd::Var features(nd::GradTape& tape, BiChannelModel& m, nd::Var images, std::optional<EyeChannel> channel,
                        nd::Mode mode) {
  return detail::trunk(tape, m, images, {channel, false}, mode);
}

/// Regression outputs (N x K) for one channel: the shared trunk, that channel's
/// adapters, then the head.
inline nd::Var forward(nd::GradTape& tape, BiChannelModel& m, nd::Var images, std::optional<EyeChannel> channel,
                       nd::Mode mode) {
  return detail::head(tape, m, features(tape, m, images, channel, mode), channel);
}

inline nd::Var forward(nd::GradTape& tape, BiChannelModel& m, const nd::Tensor& images,
                       std::optional<EyeChannel> channel, nd::Mode mode) {
  return forward(tape, m, tape.constant(images), channel, mode);
}

/// Paired forward: N x 2K outputs in label-position order (OS block, then OD block).
///
/// Both eyes travel through the shared trunk as one 2N batch, so in train mode the
/// shared batch norms see the pooled statistics that their running averages (and
/// hence eval mode) use; each half still takes its own channel's adapters and head.
inline nd::Var forward_pair(nd::GradTape& tape, BiChannelModel& m, const nd::Tensor& os_images,
                            const nd::Tensor& od_images, nd::Mode mode) {
  if (os_images.rank() != 4 || od_images.rank() != 4 || os_images.dim(0) != od_images.dim(0)) {
    throw ShapeError("forward_pair: OS batch " + os_images.shape().str() + " and OD batch " + od_images.shape().str() +
                     " must have equal sizes");
  }
  const std::size_t n = os_images.dim(0);
  nd::Var both = nd::concat_batch(tape.constant(os_images), tape.constant(od_images));
  nd::Var f = detail::trunk(tape, m, both, {std::nullopt, true}, mode);
  nd::Var os = detail::head(tape, m, nd::slice_batch(f, 0, n), EyeChannel::os);
  nd::Var od = detail::head(tape, m, nd::slice_batch(f, n, 2 * n), EyeChannel::od);
  return nd::concat_cols(os, od);
}

/// Eval-mode 4-vector predictions per patient, ordered (OS-SE, OS-AL, OD-SE, OD-AL):
/// the OS forward and the OD forward side by side.
inline nd::Tensor predict_labels(BiChannelModel& m, const nd::Tensor& os_images, const nd::Tensor& od_images) {
  if (os_images.rank() != 4 || od_images.rank() != 4 || os_images.dim(0) != od_images.dim(0)) {
    throw ShapeError("predict_labels: OS batch " + os_images.shape().str() + " and OD batch " + od_images.shape().str() +
                     " must have equal sizes");
  }
  nd::GradTape tape(/*recording=*/false);
  nd::Var os = forward(tape, m, os_images, EyeChannel::os, nd::Mode::eval);
  nd::Var od = forward(tape, m, od_images, EyeChannel::od, nd::Mode::eval);
  return nd::concat_cols(os, od).value();
}

}  // namespace oucopula
