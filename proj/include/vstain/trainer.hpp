// GAN training: the 4:1 generator/discriminator schedule, loss-weight
// calibration, the epoch loop with logging and checkpoints, warm starts from
// another run, and tiled inference over whole images.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vstain/autodiff.hpp"
#include "vstain/checkpoint.hpp"
#include "vstain/error.hpp"
#include "vstain/loss.hpp"
#include "vstain/networks.hpp"
#include "vstain/parameters.hpp"

namespace vstain {

struct TrainConfig {
  double gen_learning_rate = 1e-4;
  double disc_learning_rate = 1e-5;
  std::size_t batch_size = 10;
  std::size_t gen_steps_per_disc = 4;
  std::size_t epochs = 1;
  std::size_t patch_size = 256;
  std::uint64_t seed = 0;
  std::string preset;
  std::size_t max_iterations = 0;      // 0: no cap beyond the epoch count
  std::size_t checkpoint_every = 500;  // 0: final checkpoint only

  void validate() const {
    if (!(gen_learning_rate > 0.0) || !(disc_learning_rate > 0.0)) throw InvalidArgument("learning rates must be > 0");
    if (gen_steps_per_disc < 1) throw InvalidArgument("generator steps per discriminator step must be >= 1");
    if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
    if (patch_size == 0 || patch_size % 16 != 0) throw InvalidArgument("patch size must be a positive multiple of 16");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"gen_learning_rate", c.gen_learning_rate},
       {"disc_learning_rate", c.disc_learning_rate},
       {"batch_size", c.batch_size},
       {"gen_steps_per_disc", c.gen_steps_per_disc},
       {"epochs", c.epochs},
       {"patch_size", c.patch_size},
       {"seed", c.seed},
       {"preset", c.preset},
       {"max_iterations", c.max_iterations},
       {"checkpoint_every", c.checkpoint_every}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto opt = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("gen_learning_rate", c.gen_learning_rate);
  opt("disc_learning_rate", c.disc_learning_rate);
  opt("batch_size", c.batch_size);
  opt("gen_steps_per_disc", c.gen_steps_per_disc);
  opt("epochs", c.epochs);
  opt("patch_size", c.patch_size);
  opt("seed", c.seed);
  opt("preset", c.preset);
  opt("max_iterations", c.max_iterations);
  opt("checkpoint_every", c.checkpoint_every);
}

/// One registered training example: input (1,P,P) in [0,1] and YCbCr target
/// (3,P,P) scaled to [0,1].
struct TrainingExample {
  Tensor<float> input;
  Tensor<float> target;
};

struct StepReport {
  std::int64_t iteration = 0;
  double mse = 0.0;
  double tv_term = 0.0;
  double adv_term = 0.0;
  double gen_loss = 0.0;
  double disc_loss = 0.0;
  double d_out = 0.0;    // batch mean of D(generator output)
  double d_label = 0.0;  // batch mean of D(label)
};

/// Both networks, their optimizers and the run bookkeeping.
template <class T = float>
struct GanModel {
  GanModel(const GeneratorConfig& g, const DiscriminatorConfig& d, std::uint64_t seed_)
      : gen(g, seed_), disc(d, seed_ ^ 0x5bd1e995ULL), seed(seed_) {}

  Generator<T> gen;
  Discriminator<T> disc;
  LossWeights weights{1.0, 1.0};
  AdamState<T> gen_opt;
  AdamState<T> disc_opt;
  std::int64_t iteration = 0;
  std::uint64_t seed = 0;
  std::string preset;
  std::size_t gen_updates = 0;
  std::size_t disc_updates = 0;

  void set_learning_rates(const TrainConfig& c) {
    gen_opt.learning_rate = c.gen_learning_rate;
    disc_opt.learning_rate = c.disc_learning_rate;
  }
};

/// Stacks examples[indices] into (N,1,P,P) inputs and (N,3,P,P) targets.
template <class T = float>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<TrainingExample>& examples,
                                           const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw InvalidArgument("empty batch");
  const auto& first = examples.at(indices[0]);
  const Shape in_shape = first.input.shape(), tg_shape = first.target.shape();
  if (in_shape.size() != 3 || tg_shape.size() != 3 || in_shape[1] != tg_shape[1] || in_shape[2] != tg_shape[2]) {
    throw ShapeError("training example shapes " + shape_str(in_shape) + " / " + shape_str(tg_shape));
  }
  const std::size_t n = indices.size();
  Tensor<T> x({n, in_shape[0], in_shape[1], in_shape[2]});
  Tensor<T> y({n, tg_shape[0], tg_shape[1], tg_shape[2]});
  for (std::size_t b = 0; b < n; ++b) {
    const auto& e = examples.at(indices[b]);
    if (e.input.shape() != in_shape || e.target.shape() != tg_shape) throw ShapeError("mixed patch sizes in batch");
    std::transform(e.input.data().begin(), e.input.data().end(), x.data().begin() + b * e.input.size(),
                   [](float v) { return static_cast<T>(v); });
    std::transform(e.target.data().begin(), e.target.data().end(), y.data().begin() + b * e.target.size(),
                   [](float v) { return static_cast<T>(v); });
  }
  return {std::move(x), std::move(y)};
}

namespace detail {

template <class T>
double batch_mean(const Tensor<T>& t) {
  double acc = 0.0;
  for (T v : t.data()) acc += static_cast<double>(v);
  return acc / static_cast<double>(t.size());
}

inline void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

}  // namespace detail

/// One generator update with the discriminator frozen. Fills the generator
/// fields of `r`.
template <class T>
void generator_update(GanModel<T>& m, const Var<T>& x, const Var<T>& y, StepReport& r) {
  m.disc.parameters().set_trainable(false);
  m.gen.parameters().set_trainable(true);
  m.gen.parameters().zero_grad();
  auto out = m.gen.forward(x);
  auto d = m.disc.forward(out);
  auto loss = generator_loss(out, y, d, m.weights);
  detail::require_finite(static_cast<double>(loss.total.item()), "generator loss");
  backward(loss.total);
  m.disc.parameters().set_trainable(true);
  adam_step(m.gen.parameters(), m.gen_opt);
  ++m.gen_updates;
  r.mse = loss.mse;
  r.tv_term = loss.tv_term;
  r.adv_term = loss.adv_term;
  r.gen_loss = static_cast<double>(loss.total.item());
}

/// One discriminator update on the current generator output, with the
/// generator frozen. Fills the discriminator fields of `r`.
template <class T>
void discriminator_update(GanModel<T>& m, const Var<T>& x, const Var<T>& y, StepReport& r) {
  Var<T> out;
  {
    NoGradGuard guard;
    out = m.gen.forward(x);
  }
  m.disc.parameters().set_trainable(true);
  m.disc.parameters().zero_grad();
  auto d_out = m.disc.forward(out);
  auto d_lab = m.disc.forward(y);
  auto dloss = discriminator_loss(d_out, d_lab);
  detail::require_finite(static_cast<double>(dloss.item()), "discriminator loss");
  r.disc_loss = static_cast<double>(dloss.item());
  r.d_out = detail::batch_mean(d_out.value());
  r.d_label = detail::batch_mean(d_lab.value());
  backward(dloss);
  adam_step(m.disc.parameters(), m.disc_opt);
  ++m.disc_updates;
}

/// `ratio` generator updates, then one discriminator update. The report
/// carries the loss terms of the last generator update.
template <class T>
StepReport train_step(GanModel<T>& m, const Tensor<T>& input, const Tensor<T>& label, std::size_t ratio = 4) {
  if (ratio < 1) throw InvalidArgument("generator steps per discriminator step must be >= 1");
  const Var<T> x(input), y(label);
  StepReport r;
  for (std::size_t k = 0; k < ratio; ++k) generator_update(m, x, y, r);
  discriminator_update(m, x, y, r);
  r.iteration = ++m.iteration;
  return r;
}

/// Per-item MSE, TV and (1 - D)^2 of the current networks, then the weights
/// that put TV at 2% of MSE and the adversarial term at 20% of the total.
template <class T>
LossWeights calibrate_weights(GanModel<T>& m, const std::vector<TrainingExample>& sample,
                              const CalibrationTargets& targets = {}) {
  if (sample.empty()) throw InvalidArgument("calibration needs at least one example");
  NoGradGuard guard;
  std::vector<double> mse, tv, adv;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    auto [x, y] = make_batch<T>(sample, {i});
    auto out = m.gen.forward(Var<T>(x));
    mse.push_back(static_cast<double>(mse_loss(out, Var<T>(y)).item()));
    tv.push_back(static_cast<double>(total_variation(out).item()));
    const double d = static_cast<double>(m.disc.forward(out).item());
    adv.push_back((1.0 - d) * (1.0 - d));
  }
  m.weights = calibrate_from_terms(mse, tv, adv, targets);
  return m.weights;
}

// ---------------------------------------------------------------------------
// Checkpoint conversion

namespace detail {

template <class T>
Tensor<float> to_float(const Tensor<T>& t) {
  return t.template cast<float>();
}

template <class T>
void append_store(Checkpoint& c, const ParameterStore<T>& params) {
  for (const auto& [name, v] : params) c.tensors.emplace_back(name, to_float(v.value()));
}

template <class T>
void append_moments(Checkpoint& c, const ParameterStore<T>& params, const AdamState<T>& s, const std::string& tag) {
  for (const auto& [name, v] : params) {
    auto mi = s.m.find(name), vi = s.v.find(name);
    c.tensors.emplace_back("adam." + tag + ".m/" + name, mi == s.m.end() ? Tensor<float>(v.shape()) : to_float(mi->second));
    c.tensors.emplace_back("adam." + tag + ".v/" + name, vi == s.v.end() ? Tensor<float>(v.shape()) : to_float(vi->second));
  }
}

template <class T>
OptimizerSnapshot snapshot(const AdamState<T>& s) {
  return {s.learning_rate, s.beta1, s.beta2, s.epsilon, s.step};
}

/// Lists every tensor whose name or shape differs between the networks and
/// the checkpoint. Empty when they match.
template <class T>
std::vector<std::string> layout_differences(const ParameterStore<T>& params, const Checkpoint& c) {
  std::vector<std::string> diffs;
  for (const auto& [name, v] : params) {
    const auto* t = c.find(name);
    if (!t) {
      diffs.push_back(name + ": missing in checkpoint (expected " + shape_str(v.shape()) + ")");
    } else if (t->shape() != v.shape()) {
      diffs.push_back(name + ": checkpoint " + shape_str(t->shape()) + " vs network " + shape_str(v.shape()));
    }
  }
  return diffs;
}

template <class T>
void copy_into(ParameterStore<T>& params, const Checkpoint& c) {
  for (auto& [name, v] : params) v.mutable_value() = c.find(name)->template cast<T>();
}

template <class T>
void check_layout(const GanModel<T>& m, const Checkpoint& c) {
  auto diffs = layout_differences(m.gen.parameters(), c);
  auto d2 = layout_differences(m.disc.parameters(), c);
  diffs.insert(diffs.end(), d2.begin(), d2.end());
  if (!(c.generator == m.gen.config()) && diffs.empty()) diffs.push_back("generator configs differ");
  if (!(c.discriminator == m.disc.config()) && diffs.empty()) diffs.push_back("discriminator configs differ");
  if (diffs.empty()) return;
  std::ostringstream os;
  os << "checkpoint architecture does not match the network:";
  for (const auto& d : diffs) os << "\n  " << d;
  throw ArchitectureMismatch(os.str());
}

template <class T>
void restore_moments(const ParameterStore<T>& params, const Checkpoint& c, AdamState<T>& s, const std::string& tag,
                     const OptimizerSnapshot& snap) {
  s.reset();
  s.learning_rate = snap.learning_rate;
  s.beta1 = snap.beta1;
  s.beta2 = snap.beta2;
  s.epsilon = snap.epsilon;
  s.step = snap.step;
  for (const auto& [name, v] : params) {
    const auto* mt = c.find("adam." + tag + ".m/" + name);
    const auto* vt = c.find("adam." + tag + ".v/" + name);
    if (!mt || !vt) throw CheckpointError(CheckpointError::Kind::corrupt_header, "optimizer moments missing for " + name);
    s.m[name] = mt->template cast<T>();
    s.v[name] = vt->template cast<T>();
  }
}

}  // namespace detail

template <class T>
Checkpoint to_checkpoint(const GanModel<T>& m, bool with_optimizer = true) {
  Checkpoint c;
  c.generator = m.gen.config();
  c.discriminator = m.disc.config();
  c.weights = m.weights;
  c.iteration = m.iteration;
  c.seed = m.seed;
  c.preset = m.preset;
  detail::append_store(c, m.gen.parameters());
  detail::append_store(c, m.disc.parameters());
  if (with_optimizer) {
    c.gen_optimizer = detail::snapshot(m.gen_opt);
    c.disc_optimizer = detail::snapshot(m.disc_opt);
    detail::append_moments(c, m.gen.parameters(), m.gen_opt, "gen");
    detail::append_moments(c, m.disc.parameters(), m.disc_opt, "disc");
  }
  return c;
}

/// Builds networks from a checkpoint and resumes its run state.
template <class T = float>
GanModel<T> model_from_checkpoint(const Checkpoint& c) {
  GanModel<T> m(c.generator, c.discriminator, c.seed);
  detail::check_layout(m, c);
  detail::copy_into(m.gen.parameters(), c);
  detail::copy_into(m.disc.parameters(), c);
  m.weights = c.weights;
  m.iteration = c.iteration;
  m.preset = c.preset;
  if (c.gen_optimizer) detail::restore_moments(m.gen.parameters(), c, m.gen_opt, "gen", *c.gen_optimizer);
  if (c.disc_optimizer) detail::restore_moments(m.disc.parameters(), c, m.disc_opt, "disc", *c.disc_optimizer);
  return m;
}

/// Warm start: copies every network tensor from `source`, resets both
/// optimizers and the iteration counter. Loss weights are left as they are.
template <class T>
void transfer_init(GanModel<T>& m, const Checkpoint& source) {
  detail::check_layout(m, source);
  detail::copy_into(m.gen.parameters(), source);
  detail::copy_into(m.disc.parameters(), source);
  const double glr = m.gen_opt.learning_rate, dlr = m.disc_opt.learning_rate;
  m.gen_opt.reset();
  m.disc_opt.reset();
  m.gen_opt.learning_rate = glr;
  m.disc_opt.learning_rate = dlr;
  m.iteration = 0;
  m.gen_updates = 0;
  m.disc_updates = 0;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLoopOptions {
  /// Log and checkpoints go here. Empty: nothing is written.
  std::filesystem::path output_dir;
  std::string log_name = "loss_log.csv";
  std::string latest_name = "latest.vsgan";
  std::string final_name = "final.vsgan";
  std::function<void(const StepReport&)> on_step;
};

struct TrainResult {
  std::vector<StepReport> history;
  std::filesystem::path final_checkpoint;
  std::size_t epochs_run = 0;
};

inline std::string loss_log_header() { return "iteration,mse,tv_term,adv_term,gen_loss,disc_loss,d_out,d_label"; }

inline std::string loss_log_row(const StepReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", static_cast<long long>(r.iteration),
                r.mse, r.tv_term, r.adv_term, r.gen_loss, r.disc_loss, r.d_out, r.d_label);
  return buf;
}

/// Number of train_steps per epoch; a trailing partial batch is still a step.
inline std::size_t steps_per_epoch(std::size_t examples, std::size_t batch) { return (examples + batch - 1) / batch; }

/// Runs `config.epochs` epochs over `data`, reshuffled each epoch from the run
/// seed. A non-finite loss aborts with a NumericError that names the last
/// checkpoint written.
template <class T>
TrainResult train_loop(GanModel<T>& m, const TrainConfig& config, const std::vector<TrainingExample>& data,
                       const TrainLoopOptions& options = {}) {
  config.validate();
  if (data.empty()) throw DataError("no accepted training pairs");
  m.set_learning_rates(config);
  m.preset = config.preset;

  const bool write = !options.output_dir.empty();
  std::ofstream log;
  std::filesystem::path latest;
  if (write) {
    std::filesystem::create_directories(options.output_dir);
    log.open(options.output_dir / options.log_name, std::ios::trunc);
    if (!log) throw DataError("cannot write loss log in " + options.output_dir.string());
    log << loss_log_header() << '\n';
  }
  auto save = [&](const std::string& name) {
    const auto path = options.output_dir / name;
    save_checkpoint(path, to_checkpoint(m));
    return path;
  };

  TrainResult result;
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  bool done = false;
  for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + config.batch_size)));
      auto [x, y] = make_batch<T>(data, idx);
      StepReport r;
      try {
        r = train_step(m, x, y, config.gen_steps_per_disc);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(m.iteration + 1) +
                           "; last good checkpoint: " + (latest.empty() ? std::string("none") : latest.string()));
      }
      result.history.push_back(r);
      if (write) log << loss_log_row(r) << '\n' << std::flush;
      if (options.on_step) options.on_step(r);
      if (write && config.checkpoint_every && r.iteration % static_cast<std::int64_t>(config.checkpoint_every) == 0) {
        latest = save(options.latest_name);
      }
      if (config.max_iterations && result.history.size() >= config.max_iterations) {
        done = true;
        break;
      }
    }
    ++result.epochs_run;
  }
  if (write) result.final_checkpoint = save(options.final_name);
  return result;
}

// ---------------------------------------------------------------------------
// Inference

/// One forward pass without recording; input (N,1,P,P) -> (N,3,P,P).
template <class T>
Tensor<T> infer_patch(Generator<T>& gen, const Tensor<T>& input) {
  NoGradGuard guard;
  return gen.forward(Var<T>(input)).value();
}

inline constexpr std::size_t kTileOverlap = 32;

namespace detail {

/// Tile origins covering [0, extent) with the given stride, the last tile
/// flush with the far edge.
inline std::vector<std::size_t> tile_origins(std::size_t extent, std::size_t patch, std::size_t stride) {
  std::vector<std::size_t> out;
  for (std::size_t o = 0;; o += stride) {
    if (o + patch >= extent) {
      out.push_back(extent - patch);
      break;
    }
    out.push_back(o);
  }
  return out;
}

/// Feathering weight along one axis: ramps linearly over `overlap` pixels on
/// sides that border another tile, flat at image borders.
inline std::vector<double> feather(std::size_t patch, std::size_t overlap, bool ramp_lo, bool ramp_hi) {
  std::vector<double> w(patch, 1.0);
  for (std::size_t i = 0; i < patch && i < overlap; ++i) {
    const double ramp = static_cast<double>(i + 1) / static_cast<double>(overlap + 1);
    if (ramp_lo) w[i] = std::min(w[i], ramp);
    if (ramp_hi) w[patch - 1 - i] = std::min(w[patch - 1 - i], ramp);
  }
  return w;
}

}  // namespace detail

/// Runs the generator over overlapping patches of a (H,W) image and blends
/// them with linear feathering. Returns (3,H,W).
template <class T>
Tensor<T> infer_tile(Generator<T>& gen, const Tensor<T>& image, std::size_t patch, std::size_t overlap = kTileOverlap) {
  if (image.rank() != 2) throw ShapeError("infer_tile expects an (H,W) image, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (h < patch || w < patch) throw ShapeError("image " + shape_str(image.shape()) + " is smaller than one patch");
  if (overlap >= patch) throw InvalidArgument("tile overlap must be smaller than the patch");
  const std::size_t stride = patch - overlap;
  const auto ys = detail::tile_origins(h, patch, stride), xs = detail::tile_origins(w, patch, stride);

  std::vector<double> acc(3 * h * w, 0.0), wsum(h * w, 0.0);
  Tensor<T> tile({1, 1, patch, patch});
  for (std::size_t ty = 0; ty < ys.size(); ++ty) {
    const auto wy = detail::feather(patch, overlap, ty > 0, ty + 1 < ys.size());
    for (std::size_t tx = 0; tx < xs.size(); ++tx) {
      const auto wx = detail::feather(patch, overlap, tx > 0, tx + 1 < xs.size());
      const std::size_t oy = ys[ty], ox = xs[tx];
      for (std::size_t r = 0; r < patch; ++r)
        std::copy_n(image.data().begin() + (oy + r) * w + ox, patch, tile.data().begin() + r * patch);
      const auto out = infer_patch(gen, tile);
      for (std::size_t r = 0; r < patch; ++r)
        for (std::size_t q = 0; q < patch; ++q) {
          const double wt = wy[r] * wx[q];
          const std::size_t dst = (oy + r) * w + ox + q;
          wsum[dst] += wt;
          for (std::size_t c = 0; c < 3; ++c) acc[c * h * w + dst] += wt * static_cast<double>(out[(c * patch + r) * patch + q]);
        }
    }
  }
  Tensor<T> result({3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h * w; ++i) result[c * h * w + i] = static_cast<T>(acc[c * h * w + i] / wsum[i]);
  return result;
}

}  // namespace vstain
