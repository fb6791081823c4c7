// Generator U-net and discriminator of the virtual staining GAN.
//
// The generator has four residual down levels joined by 2x2 average pooling,
// a width-preserving bottleneck convolution, four up levels that concatenate
// the matching down-level output with the upsampled features, and a final
// convolution to three YCbCr channels. The discriminator is an initial
// convolution, five two-convolution blocks, a full-patch average pool and a
// two-layer fully connected head ending in a sigmoid.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vstain/autodiff.hpp"
#include "vstain/error.hpp"
#include "vstain/ops.hpp"
#include "vstain/parameters.hpp"

namespace vstain {

inline constexpr double kInitStd = 0.05;
inline constexpr std::size_t kMinScaledWidth = 4;

inline std::size_t scale_width(std::size_t width, double factor) {
  const auto w = static_cast<std::size_t>(std::ceil(static_cast<double>(width) * factor - 1e-9));
  return std::max(kMinScaledWidth, w);
}

struct GeneratorConfig {
  std::size_t in_channels = 1;
  std::array<std::size_t, 4> down_in{1, 64, 128, 256};
  std::array<std::size_t, 4> down_out{64, 128, 256, 512};
  std::size_t bottleneck = 512;
  std::array<std::size_t, 4> up_in{1024, 512, 256, 128};
  std::array<std::size_t, 4> up_out{256, 128, 64, 32};
  std::size_t out_channels = 3;
  double scale = 1.0;
  Padding padding = Padding::zero;

  static GeneratorConfig paper() { return {}; }

  /// All widths multiplied by `factor`, rounded up, and floored at 4. Up-level
  /// input widths are derived so the concatenation arithmetic stays exact.
  static GeneratorConfig scaled(double factor) {
    if (!(factor > 0.0) || factor > 1.0) throw InvalidArgument("generator scale must be in (0, 1]");
    const GeneratorConfig ref = paper();
    GeneratorConfig c;
    c.scale = factor;
    for (std::size_t i = 0; i < 4; ++i) {
      c.down_out[i] = scale_width(ref.down_out[i], factor);
      c.up_out[i] = scale_width(ref.up_out[i], factor);
    }
    c.down_in = {1, c.down_out[0], c.down_out[1], c.down_out[2]};
    c.bottleneck = c.down_out[3];
    for (std::size_t i = 0; i < 4; ++i) c.up_in[i] = c.down_out[3 - i] + (i == 0 ? c.bottleneck : c.up_out[i - 1]);
    return c;
  }

  void validate() const {
    if (in_channels != down_in[0]) throw ArchitectureMismatch("generator input width must equal first down-level input");
    for (std::size_t i = 1; i < 4; ++i) {
      if (down_in[i] != down_out[i - 1]) throw ArchitectureMismatch("down level " + std::to_string(i + 1) + " input width mismatch");
    }
    if (bottleneck != down_out[3]) throw ArchitectureMismatch("bottleneck must keep the last down-level width");
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t upsampled = i == 0 ? bottleneck : up_out[i - 1];
      if (up_in[i] != down_out[3 - i] + upsampled) {
        throw ArchitectureMismatch("up level " + std::to_string(i + 1) + " input width must equal skip + upsampled widths");
      }
    }
    for (std::size_t i = 0; i < 4; ++i) {
      if (down_in[i] > down_out[i]) throw ArchitectureMismatch("residual levels cannot shrink the channel count");
    }
    if (scale == 1.0) {
      const GeneratorConfig ref = paper();
      if (down_in != ref.down_in || down_out != ref.down_out || up_in != ref.up_in || up_out != ref.up_out ||
          bottleneck != ref.bottleneck || out_channels != ref.out_channels) {
        throw ArchitectureMismatch("full-scale generator widths differ from the reference layout");
      }
    }
  }

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

struct DiscriminatorConfig {
  std::vector<std::size_t> channels{3, 64, 64, 128, 128, 256, 256, 512, 512, 1024, 1024, 2048};
  std::size_t patch_size = 256;
  double scale = 1.0;
  /// Optional 2x2 average pooling after each block; off in the reference layout.
  bool downsample_between_blocks = false;
  Padding padding = Padding::zero;

  static DiscriminatorConfig paper() { return {}; }

  static DiscriminatorConfig scaled(double factor, std::size_t patch_size) {
    if (!(factor > 0.0) || factor > 1.0) throw InvalidArgument("discriminator scale must be in (0, 1]");
    DiscriminatorConfig c;
    c.scale = factor;
    c.patch_size = patch_size;
    for (std::size_t i = 1; i < c.channels.size(); ++i) c.channels[i] = scale_width(c.channels[i], factor);
    return c;
  }

  std::size_t pooled_width() const { return channels.back(); }

  void validate() const {
    if (channels.size() != 12) throw ArchitectureMismatch("discriminator needs 12 channel entries (1 + 5 blocks x 2 convs + input)");
    if (channels[0] != 3) throw ArchitectureMismatch("discriminator input must have 3 channels");
    if (patch_size == 0) throw ArchitectureMismatch("discriminator patch size must be positive");
    if (downsample_between_blocks && patch_size % 32 != 0) {
      throw ArchitectureMismatch("downsampling discriminator needs a patch size divisible by 32");
    }
    if (scale == 1.0 && channels != paper().channels) {
      throw ArchitectureMismatch("full-scale discriminator widths differ from the reference layout");
    }
  }

  friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels}, {"down_in", c.down_in},     {"down_out", c.down_out},
                     {"bottleneck", c.bottleneck},   {"up_in", c.up_in},         {"up_out", c.up_out},
                     {"out_channels", c.out_channels}, {"scale", c.scale},
                     {"padding", c.padding == Padding::zero ? "zero" : "periodic"}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  j.at("in_channels").get_to(c.in_channels);
  j.at("down_in").get_to(c.down_in);
  j.at("down_out").get_to(c.down_out);
  j.at("bottleneck").get_to(c.bottleneck);
  j.at("up_in").get_to(c.up_in);
  j.at("up_out").get_to(c.up_out);
  j.at("out_channels").get_to(c.out_channels);
  j.at("scale").get_to(c.scale);
  c.padding = j.at("padding").get<std::string>() == "periodic" ? Padding::periodic : Padding::zero;
}

inline void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
  j = nlohmann::json{{"channels", c.channels},
                     {"patch_size", c.patch_size},
                     {"scale", c.scale},
                     {"downsample_between_blocks", c.downsample_between_blocks},
                     {"padding", c.padding == Padding::zero ? "zero" : "periodic"}};
}

inline void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  j.at("channels").get_to(c.channels);
  j.at("patch_size").get_to(c.patch_size);
  j.at("scale").get_to(c.scale);
  j.at("downsample_between_blocks").get_to(c.downsample_between_blocks);
  c.padding = j.at("padding").get<std::string>() == "periodic" ? Padding::periodic : Padding::zero;
}

namespace detail {

template <class T>
void add_conv(ParameterStore<T>& params, const std::string& prefix, std::size_t cin, std::size_t cout,
              std::mt19937_64& rng) {
  params.add(prefix + ".weight", truncated_normal_init<T>({cout, cin, 3, 3}, kInitStd, rng));
  params.add(prefix + ".bias", Tensor<T>({cout}));
}

template <class T>
Var<T> apply_conv(ParameterStore<T>& params, const std::string& prefix, const Var<T>& x, Padding pad) {
  return conv2d(x, params[prefix + ".weight"], params[prefix + ".bias"], pad);
}

}  // namespace detail

template <class T>
class Generator {
 public:
  explicit Generator(GeneratorConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string p = "gen.down" + std::to_string(l + 1);
      detail::add_conv(params_, p + ".conv1", config_.down_in[l], config_.down_out[l], rng);
      detail::add_conv(params_, p + ".conv2", config_.down_out[l], config_.down_out[l], rng);
      detail::add_conv(params_, p + ".conv3", config_.down_out[l], config_.down_out[l], rng);
    }
    detail::add_conv(params_, "gen.bottleneck", config_.down_out[3], config_.bottleneck, rng);
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string p = "gen.up" + std::to_string(l + 1);
      detail::add_conv(params_, p + ".conv1", config_.up_in[l], config_.up_out[l], rng);
      detail::add_conv(params_, p + ".conv2", config_.up_out[l], config_.up_out[l], rng);
      detail::add_conv(params_, p + ".conv3", config_.up_out[l], config_.up_out[l], rng);
    }
    detail::add_conv(params_, "gen.final", config_.up_out[3], config_.out_channels, rng);
  }

  const GeneratorConfig& config() const noexcept { return config_; }
  ParameterStore<T>& parameters() noexcept { return params_; }
  const ParameterStore<T>& parameters() const noexcept { return params_; }
  std::size_t count_parameters() const { return params_.count_scalars(); }

  /// zero_pad(x) + LReLU(conv3(LReLU(conv2(LReLU(conv1(x)))))) at down level `level` (0-based).
  Var<T> residual_down_block(const Var<T>& x, std::size_t level) {
    if (x.shape().size() != 4 || x.dim(1) != config_.down_in[level]) {
      throw ShapeError("down level " + std::to_string(level + 1) + " expects " + std::to_string(config_.down_in[level]) +
                       " channels, got " + shape_str(x.shape()));
    }
    return add(zero_pad_channels(x, config_.down_out[level]), down_branch(x, level));
  }

  /// The convolutional branch of a residual down block, without the skip.
  Var<T> down_branch(const Var<T>& x, std::size_t level) {
    const std::string p = "gen.down" + std::to_string(level + 1);
    auto h = lrelu(detail::apply_conv(params_, p + ".conv1", x, config_.padding));
    h = lrelu(detail::apply_conv(params_, p + ".conv2", h, config_.padding));
    return lrelu(detail::apply_conv(params_, p + ".conv3", h, config_.padding));
  }

  /// Three LReLU convolutions over concat(skip, upsample(y)) at up level `level` (0-based).
  Var<T> up_block(const Var<T>& y, const Var<T>& skip, std::size_t level) {
    auto u = upsample_2x(y);
    if (u.dim(2) != skip.dim(2) || u.dim(3) != skip.dim(3)) {
      throw ShapeError("up level " + std::to_string(level + 1) + ": upsampled " + shape_str(u.shape()) +
                       " does not match skip " + shape_str(skip.shape()));
    }
    auto c = concat_channels(skip, u);
    if (c.dim(1) != config_.up_in[level]) {
      throw ShapeError("up level " + std::to_string(level + 1) + " expects " + std::to_string(config_.up_in[level]) +
                       " input channels, got " + std::to_string(c.dim(1)));
    }
    const std::string p = "gen.up" + std::to_string(level + 1);
    auto h = lrelu(detail::apply_conv(params_, p + ".conv1", c, config_.padding));
    h = lrelu(detail::apply_conv(params_, p + ".conv2", h, config_.padding));
    return lrelu(detail::apply_conv(params_, p + ".conv3", h, config_.padding));
  }

  /// (N,1,H,W) -> (N,3,H,W) with H and W divisible by 16.
  Var<T> forward(const Var<T>& input) {
    if (input.shape().size() != 4 || input.dim(1) != config_.in_channels) {
      throw ShapeError("generator expects (N," + std::to_string(config_.in_channels) + ",H,W), got " +
                       shape_str(input.shape()));
    }
    if (input.dim(2) % 16 != 0 || input.dim(3) % 16 != 0 || input.dim(2) == 0 || input.dim(3) == 0) {
      throw ShapeError("generator input extent must be a positive multiple of 16, got " + shape_str(input.shape()));
    }
    std::array<Var<T>, 4> skips;
    Var<T> h = input;
    for (std::size_t l = 0; l < 4; ++l) {
      skips[l] = residual_down_block(h, l);
      h = avg_pool_2x2(skips[l]);
    }
    h = lrelu(detail::apply_conv(params_, "gen.bottleneck", h, config_.padding));
    for (std::size_t l = 0; l < 4; ++l) h = up_block(h, skips[3 - l], l);
    auto out = detail::apply_conv(params_, "gen.final", h, config_.padding);
    if (out.dim(1) != config_.out_channels) throw ShapeError("generator output width mismatch");
    return out;
  }

 private:
  GeneratorConfig config_;
  ParameterStore<T> params_;
};

template <class T>
class Discriminator {
 public:
  explicit Discriminator(DiscriminatorConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const auto& ch = config_.channels;
    detail::add_conv(params_, "disc.input", ch[0], ch[1], rng);
    for (std::size_t b = 0; b < 5; ++b) {
      const std::string p = "disc.block" + std::to_string(b + 1);
      detail::add_conv(params_, p + ".conv1", ch[1 + 2 * b], ch[2 + 2 * b], rng);
      detail::add_conv(params_, p + ".conv2", ch[2 + 2 * b], ch[3 + 2 * b], rng);
    }
    const std::size_t width = config_.pooled_width();
    params_.add("disc.fc1.weight", truncated_normal_init<T>({width, width}, kInitStd, rng));
    params_.add("disc.fc1.bias", Tensor<T>({width}));
    params_.add("disc.fc2.weight", truncated_normal_init<T>({1, width}, kInitStd, rng));
    params_.add("disc.fc2.bias", Tensor<T>({1}));
  }

  const DiscriminatorConfig& config() const noexcept { return config_; }
  ParameterStore<T>& parameters() noexcept { return params_; }
  const ParameterStore<T>& parameters() const noexcept { return params_; }
  std::size_t count_parameters() const { return params_.count_scalars(); }

  /// The pooled feature vector (N, channels.back()).
  Var<T> features(const Var<T>& image) {
    if (image.shape().size() != 4 || image.dim(1) != config_.channels[0]) {
      throw ShapeError("discriminator expects (N,3,H,W), got " + shape_str(image.shape()));
    }
    if (image.dim(2) != config_.patch_size || image.dim(3) != config_.patch_size) {
      throw ShapeError("discriminator patch size is " + std::to_string(config_.patch_size) + ", got " +
                       shape_str(image.shape()));
    }
    auto h = lrelu(detail::apply_conv(params_, "disc.input", image, config_.padding));
    for (std::size_t b = 0; b < 5; ++b) {
      const std::string p = "disc.block" + std::to_string(b + 1);
      h = lrelu(detail::apply_conv(params_, p + ".conv1", h, config_.padding));
      h = lrelu(detail::apply_conv(params_, p + ".conv2", h, config_.padding));
      if (config_.downsample_between_blocks) h = avg_pool_2x2(h);
    }
    return global_avg_pool(h);
  }

  /// Pre-sigmoid score (N,1).
  Var<T> logits(const Var<T>& image) {
    auto f = features(image);
    auto h = lrelu(fully_connected(f, params_["disc.fc1.weight"], params_["disc.fc1.bias"]));
    return fully_connected(h, params_["disc.fc2.weight"], params_["disc.fc2.bias"]);
  }

  /// Probability that each batch item is a real stained image, (N,1).
  Var<T> forward(const Var<T>& image) { return sigmoid(logits(image)); }

 private:
  DiscriminatorConfig config_;
  ParameterStore<T> params_;
};

}  // namespace vstain
