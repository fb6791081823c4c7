// Operator pipeline: training presets, the JSONL dataset manifest, patch
// extraction, and the register / clean / train / infer / evaluate commands.
// Commands report through an ostream and throw on failure; the CLI maps
// exceptions to exit codes.
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vstain/checkpoint.hpp"
#include "vstain/error.hpp"
#include "vstain/image.hpp"
#include "vstain/io.hpp"
#include "vstain/metrics.hpp"
#include "vstain/registration.hpp"
#include "vstain/synthetic.hpp"
#include "vstain/trainer.hpp"

namespace vstain {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Presets

struct Preset {
  std::string name;
  std::string tissue;
  std::string stain;
  std::size_t training_patches = 0;
  std::size_t epochs = 0;
  bool transfer = false;  // meant to start from another preset's checkpoint
};

inline const std::vector<Preset>& presets() {
  static const std::vector<Preset> table{
      {"salivary-he", "salivary gland", "H&E", 2768, 26, false},
      {"thyroid-he", "thyroid", "H&E", 8336, 8, false},
      {"thyroid-he-transfer", "thyroid", "H&E", 8336, 4, true},
      {"liver-mt", "liver", "Masson's trichrome", 3840, 26, false},
      {"lung-mt", "lung", "Masson's trichrome", 9162, 10, false},
      {"kidney-jones", "kidney", "Jones", 4905, 8, false},
  };
  return table;
}

inline std::string preset_names() {
  std::string s;
  for (const auto& p : presets()) s += (s.empty() ? "" : ", ") + p.name;
  return s;
}

inline const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  throw InvalidArgument("unknown preset '" + name + "'; available presets: " + preset_names());
}

// ---------------------------------------------------------------------------
// Manifest

struct PatchEntry {
  std::size_t x = 0;
  std::size_t y = 0;
  double score = 0.0;
  bool accepted = true;
  std::string reason;
};

/// One registered tile and its patch grid. Paths are relative to the
/// manifest's directory.
struct ManifestRecord {
  std::string source_tile;   // raw auto-fluorescence tile
  std::string source_slide;  // whole-slide bright-field image
  std::string input;         // registered input (16-bit gray TIFF)
  std::string target;        // registered target (8-bit RGB PNG)
  std::string field;         // elastic displacement field (JSON)
  FovMatch fov;
  SimilarityTransform transform;
  std::size_t matches = 0;
  std::size_t inliers = 0;
  bool accepted = true;
  std::string reason;
  std::vector<PatchEntry> patches;
};

struct ManifestHeader {
  int version = 1;
  std::string command;
  std::string preset;
  std::uint64_t seed = 0;
  double ratio = kDefaultDownsampleRatio;
  std::size_t patch_size = 256;
  std::size_t stride = 256;
  double clean_threshold = kDefaultCleanThreshold;
  PercentileRange input_range;  // per-slide 1st/99th percentile of the input tiles
  std::vector<CleaningRound> clean_log;
};

struct DatasetManifest {
  ManifestHeader header;
  std::vector<ManifestRecord> records;

  std::size_t accepted_patches() const {
    std::size_t n = 0;
    for (const auto& r : records)
      if (r.accepted)
        for (const auto& p : r.patches) n += p.accepted;
    return n;
  }
};

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson header_json(const ManifestHeader& h) {
  ojson log = ojson::array();
  for (const auto& r : h.clean_log) log.push_back({{"threshold", r.threshold}, {"accepted", r.accepted}, {"rejected", r.rejected}});
  return {{"kind", "manifest"},
          {"version", h.version},
          {"command", h.command},
          {"preset", h.preset},
          {"seed", h.seed},
          {"ratio", h.ratio},
          {"patch_size", h.patch_size},
          {"stride", h.stride},
          {"clean_threshold", h.clean_threshold},
          {"input_range", {{"p1", h.input_range.lo}, {"p99", h.input_range.hi}}},
          {"clean_log", log}};
}

inline ojson record_json(const ManifestRecord& r) {
  ojson patches = ojson::array();
  for (const auto& p : r.patches) {
    patches.push_back({{"x", p.x}, {"y", p.y}, {"score", p.score}, {"accepted", p.accepted}, {"reason", p.reason}});
  }
  return {{"kind", "record"},
          {"source_tile", r.source_tile},
          {"source_slide", r.source_slide},
          {"input", r.input},
          {"target", r.target},
          {"field", r.field},
          {"fov", {{"x", r.fov.x}, {"y", r.fov.y}, {"score", r.fov.score}}},
          {"transform",
           {{"angle_deg", r.transform.angle_deg}, {"scale", r.transform.scale}, {"tx", r.transform.tx}, {"ty", r.transform.ty}}},
          {"matches", r.matches},
          {"inliers", r.inliers},
          {"accepted", r.accepted},
          {"reason", r.reason},
          {"patches", patches}};
}

}  // namespace detail

/// One JSON object per line: the header first, then one line per record.
inline std::string encode_manifest(const DatasetManifest& m) {
  std::string out = detail::header_json(m.header).dump() + "\n";
  for (const auto& r : m.records) out += detail::record_json(r).dump() + "\n";
  return out;
}

inline DatasetManifest decode_manifest(const std::string& text) {
  DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  bool have_header = false;
  std::size_t lineno = 0;
  try {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "manifest") {
        auto& h = m.header;
        h.version = j.at("version").get<int>();
        if (h.version != 1) throw DataError("unsupported manifest version " + std::to_string(h.version));
        h.command = j.at("command").get<std::string>();
        h.preset = j.at("preset").get<std::string>();
        h.seed = j.at("seed").get<std::uint64_t>();
        h.ratio = j.at("ratio").get<double>();
        h.patch_size = j.at("patch_size").get<std::size_t>();
        h.stride = j.at("stride").get<std::size_t>();
        h.clean_threshold = j.at("clean_threshold").get<double>();
        h.input_range = {j.at("input_range").at("p1").get<double>(), j.at("input_range").at("p99").get<double>()};
        for (const auto& r : j.at("clean_log")) {
          h.clean_log.push_back({r.at("threshold").get<double>(), r.at("accepted").get<std::size_t>(), r.at("rejected").get<std::size_t>()});
        }
        have_header = true;
      } else if (kind == "record") {
        ManifestRecord r;
        r.source_tile = j.at("source_tile").get<std::string>();
        r.source_slide = j.at("source_slide").get<std::string>();
        r.input = j.at("input").get<std::string>();
        r.target = j.at("target").get<std::string>();
        r.field = j.at("field").get<std::string>();
        r.fov = {j.at("fov").at("x").get<std::size_t>(), j.at("fov").at("y").get<std::size_t>(), j.at("fov").at("score").get<double>()};
        const auto& t = j.at("transform");
        r.transform = {t.at("angle_deg").get<double>(), t.at("scale").get<double>(), t.at("tx").get<double>(), t.at("ty").get<double>()};
        r.matches = j.at("matches").get<std::size_t>();
        r.inliers = j.at("inliers").get<std::size_t>();
        r.accepted = j.at("accepted").get<bool>();
        r.reason = j.at("reason").get<std::string>();
        for (const auto& p : j.at("patches")) {
          r.patches.push_back({p.at("x").get<std::size_t>(), p.at("y").get<std::size_t>(), p.at("score").get<double>(),
                               p.at("accepted").get<bool>(), p.at("reason").get<std::string>()});
        }
        m.records.push_back(std::move(r));
      } else {
        throw DataError("unknown manifest line kind '" + kind + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest line " + std::to_string(lineno) + ": " + e.what());
  }
  if (!have_header) throw DataError("manifest has no header line");
  return m;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out << s;
  if (!out) throw DataError("failed writing " + p.string());
}

inline DatasetManifest read_manifest(const fs::path& p) { return decode_manifest(read_text(p)); }
inline void write_manifest(const fs::path& p, const DatasetManifest& m) { write_text(p, encode_manifest(m)); }

// ---------------------------------------------------------------------------
// Displacement field files

inline nlohmann::ordered_json field_json(const DisplacementField& f) {
  return {{"spacing", f.spacing}, {"nx", f.nx}, {"ny", f.ny}, {"dx", f.dx}, {"dy", f.dy}};
}

inline DisplacementField field_from_json(const nlohmann::json& j) {
  DisplacementField f;
  f.spacing = j.at("spacing").get<std::size_t>();
  f.nx = j.at("nx").get<std::size_t>();
  f.ny = j.at("ny").get<std::size_t>();
  f.dx = j.at("dx").get<std::vector<double>>();
  f.dy = j.at("dy").get<std::vector<double>>();
  if (f.spacing == 0 || f.dx.size() != f.nx * f.ny || f.dy.size() != f.nx * f.ny) throw DataError("malformed displacement field");
  return f;
}

// ---------------------------------------------------------------------------
// Patches

struct PatchPair {
  Image input;   // (1,P,P) in [0,1]
  Image target;  // (3,P,P) YCbCr scaled to [0,1]
  double score = 0.0;
  bool accepted = true;
  std::size_t x = 0;
  std::size_t y = 0;
};

/// Normalized input patch and unit-YCbCr target patch at (x, y).
inline PatchPair make_patch(const Image& input, const Image& target_rgb, const PercentileRange& range, std::size_t x,
                            std::size_t y, std::size_t size) {
  PatchPair p;
  p.x = x;
  p.y = y;
  p.input = percentile_normalize(crop(input, x, y, size, size), range).reshaped({1, size, size});
  p.target = ycbcr_to_unit(rgb_to_ycbcr(crop(target_rgb, x, y, size, size)));
  p.score = pair_score(p.input, p.target);
  return p;
}

/// Regular grid of size x size patches at the given stride; partial border
/// patches are dropped. An image smaller than one patch yields no patches.
inline std::vector<PatchPair> extract_patches(const Image& input, const Image& target_rgb, std::size_t size,
                                              std::size_t stride, const PercentileRange& range) {
  detail::require_gray(input, "extract_patches");
  if (target_rgb.rank() != 3 || target_rgb.dim(0) != 3 || height(target_rgb) != input.dim(0) || width(target_rgb) != input.dim(1)) {
    throw ShapeError("extract_patches: input " + shape_str(input.shape()) + " vs target " + shape_str(target_rgb.shape()));
  }
  if (size == 0 || stride == 0) throw InvalidArgument("patch size and stride must be positive");
  std::vector<PatchPair> out;
  const std::size_t h = input.dim(0), w = input.dim(1);
  if (size > h || size > w) return out;
  for (std::size_t y = 0; y + size <= h; y += stride)
    for (std::size_t x = 0; x + size <= w; x += stride) out.push_back(make_patch(input, target_rgb, range, x, y, size));
  return out;
}

inline std::size_t grid_count(std::size_t extent, std::size_t size, std::size_t stride) {
  return size > extent ? 0 : (extent - size) / stride + 1;
}

// ---------------------------------------------------------------------------
// Register

struct RegisterOptions {
  fs::path autofl_dir;
  fs::path slide;
  fs::path out;  // manifest path; registered images go to <out stem>.data/
  double ratio = kDefaultDownsampleRatio;
  std::size_t patch_size = 256;
  std::size_t stride = 256;
  std::uint64_t seed = 0;
  std::string preset;
};

struct RegisteredTile {
  FovMatch fov;
  SimilarityTransform transform;
  std::size_t matches = 0;
  std::size_t inliers = 0;
  DisplacementField field;
  Image input;   // (H-100, W-100) raw downsampled intensities
  Image target;  // (3, H-100, W-100) RGB aligned to the input
};

/// Full chain for one tile: downsample, stretch/invert, FOV search,
/// feature/MSAC similarity, crop, elastic refinement.
inline RegisteredTile register_tile(const Image& autofl, const Image& slide_rgb, const Image& slide_luma, double ratio,
                                    std::uint64_t seed) {
  RegisteredTile t;
  const Image small = ratio == 1.0 ? autofl : downsample_area(autofl, ratio);
  const Image inv = contrast_stretch_invert(small);
  t.fov = fov_match(inv, slide_luma);
  const std::size_t h = small.dim(0), w = small.dim(1);
  const Image fov_rgb = crop(slide_rgb, t.fov.x, t.fov.y, w, h);
  const Image fov_luma = crop(slide_luma, t.fov.x, t.fov.y, w, h);

  auto matches = detect_and_match_features(inv, fov_luma);
  t.matches = matches.size();
  MsacOptions mo;
  mo.seed = seed;
  const auto fit = estimate_transform_msac(std::move(matches), mo);
  t.transform = fit.transform;
  t.inliers = fit.inliers;

  t.input = crop(small, kGlobalCrop, kGlobalCrop, w - 2 * kGlobalCrop, h - 2 * kGlobalCrop);
  const Image rgb = apply_global_and_crop(fov_rgb, t.transform);
  const Image luma = apply_global_and_crop(fov_luma, t.transform);
  t.field = elastic_register(contrast_stretch_invert(t.input), luma);
  t.target = warp_with_field(rgb, t.field);
  return t;
}

namespace detail {

inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = lower_extension(e.path());
    if (e.is_regular_file() && (ext == ".tif" || ext == ".tiff" || ext == ".png")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string rel(const fs::path& p, const fs::path& base) {
  auto r = fs::weakly_canonical(p).lexically_relative(fs::weakly_canonical(base));
  return (r.empty() ? p : r).generic_string();
}

inline fs::path resolve(const std::string& p, const fs::path& manifest) {
  fs::path q(p);
  return q.is_absolute() ? q : manifest.parent_path() / q;
}

inline Image luma_of(const Image& rgb) { return luma_plane(rgb_to_ycbcr(rgb)); }

}  // namespace detail

inline DatasetManifest cmd_register(const RegisterOptions& o, std::ostream& log) {
  if (!(o.ratio > 0.0)) throw InvalidArgument("--ratio must be > 0");
  if (o.patch_size == 0 || o.stride == 0) throw InvalidArgument("patch size and stride must be positive");
  if (!o.preset.empty()) find_preset(o.preset);
  const auto tiles = detail::list_images(o.autofl_dir);
  if (tiles.empty()) throw DataError("no tiles in " + o.autofl_dir.string());
  const Image slide_rgb = to_rgb_planes(read_image(o.slide));
  const Image slide_luma = detail::luma_of(slide_rgb);

  const fs::path base = o.out.parent_path().empty() ? fs::path(".") : o.out.parent_path();
  const fs::path data_dir = base / (o.out.stem().string() + ".data");
  fs::create_directories(data_dir);

  DatasetManifest m;
  m.header.command = "register";
  m.header.preset = o.preset;
  m.header.seed = o.seed;
  m.header.ratio = o.ratio;
  m.header.patch_size = o.patch_size;
  m.header.stride = o.stride;

  // First pass: register every tile; the input normalization range is then
  // taken over all registered inputs of the slide.
  std::vector<std::optional<RegisteredTile>> done(tiles.size());
  std::vector<ManifestRecord> records(tiles.size());
  std::vector<double> pooled;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    auto& r = records[i];
    r.source_tile = detail::rel(tiles[i], base);
    r.source_slide = detail::rel(o.slide, base);
    try {
      auto t = register_tile(to_gray(read_image(tiles[i])), slide_rgb, slide_luma, o.ratio, o.seed + i);
      r.fov = t.fov;
      r.transform = t.transform;
      r.matches = t.matches;
      r.inliers = t.inliers;
      pooled.insert(pooled.end(), t.input.data().begin(), t.input.data().end());
      done[i] = std::move(t);
    } catch (const InsufficientFeatures& e) {
      r.accepted = false;
      r.reason = e.what();
    } catch (const DegenerateGeometry& e) {
      r.accepted = false;
      r.reason = e.what();
    } catch (const ShapeError& e) {
      r.accepted = false;
      r.reason = e.what();
    }
    log << tiles[i].filename().string() << ": "
        << (r.accepted ? "fov (" + std::to_string(r.fov.x) + "," + std::to_string(r.fov.y) + ")" : "rejected: " + r.reason)
        << '\n';
  }
  if (!pooled.empty()) m.header.input_range = {percentile(pooled, 1.0), percentile(pooled, 99.0)};

  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (!done[i]) continue;
    auto& r = records[i];
    const auto& t = *done[i];
    const std::string stem = tiles[i].stem().string();
    write_image(data_dir / (stem + ".input.tif"), from_planes(t.input, 16));
    write_image(data_dir / (stem + ".target.png"), from_planes(t.target, 8));
    write_text(data_dir / (stem + ".field.json"), field_json(t.field).dump() + "\n");
    r.input = detail::rel(data_dir / (stem + ".input.tif"), base);
    r.target = detail::rel(data_dir / (stem + ".target.png"), base);
    r.field = detail::rel(data_dir / (stem + ".field.json"), base);
    // Score from the files as written, so later stages see the same pixels.
    const Image in = to_gray(read_image(data_dir / (stem + ".input.tif")));
    const Image tg = to_rgb_planes(read_image(data_dir / (stem + ".target.png")));
    for (const auto& p : extract_patches(in, tg, o.patch_size, o.stride, m.header.input_range)) {
      r.patches.push_back({p.x, p.y, p.score, true, ""});
    }
    if (r.patches.empty()) log << stem << ": registered image is smaller than one patch\n";
  }
  m.records = std::move(records);
  write_manifest(o.out, m);
  std::size_t ok = 0;
  for (const auto& r : m.records) ok += r.accepted;
  log << "registered " << ok << " of " << m.records.size() << " tiles; " << m.accepted_patches() << " patches\n";
  return m;
}

// ---------------------------------------------------------------------------
// Dataset loading

struct PatchRef {
  std::size_t record = 0;
  std::size_t patch = 0;
};

/// Accepted patches of accepted records, in manifest order.
inline std::vector<PatchRef> accepted_refs(const DatasetManifest& m) {
  std::vector<PatchRef> out;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (!m.records[i].accepted) continue;
    for (std::size_t k = 0; k < m.records[i].patches.size(); ++k)
      if (m.records[i].patches[k].accepted) out.push_back({i, k});
  }
  return out;
}

/// Loads the referenced patches; each registered image is read once.
inline std::vector<TrainingExample> load_examples(const DatasetManifest& m, const fs::path& manifest_path,
                                                  const std::vector<PatchRef>& refs) {
  std::vector<TrainingExample> out;
  std::map<std::size_t, std::pair<Image, Image>> cache;
  const std::size_t size = m.header.patch_size;
  for (const auto& ref : refs) {
    auto it = cache.find(ref.record);
    if (it == cache.end()) {
      const auto& r = m.records[ref.record];
      it = cache.emplace(ref.record, std::pair{to_gray(read_image(detail::resolve(r.input, manifest_path))),
                                                to_rgb_planes(read_image(detail::resolve(r.target, manifest_path)))})
               .first;
    }
    const auto& e = m.records[ref.record].patches[ref.patch];
    auto p = make_patch(it->second.first, it->second.second, m.header.input_range, e.x, e.y, size);
    out.push_back({std::move(p.input), std::move(p.target)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clean

struct CleanOptions {
  fs::path manifest;
  fs::path out;  // empty: rewrite in place
  double threshold = kDefaultCleanThreshold;
  std::size_t rounds = 1;
  fs::path checkpoint;  // required when rounds > 1
};

/// Output-based score for later rounds: NCC of generator luma and target luma.
inline double output_score(Generator<float>& gen, const TrainingExample& ex) {
  const std::size_t p = ex.input.dim(1);
  const auto out = infer_patch(gen, ex.input.reshaped({1, 1, p, p}));
  return normalized_correlation(std::span<const float>(out.data().data(), p * p),
                                std::span<const float>(ex.target.data().data(), p * p));
}

inline DatasetManifest cmd_clean(const CleanOptions& o, std::ostream& log) {
  if (!(o.threshold >= -1.0 && o.threshold <= 1.0)) throw InvalidArgument("--threshold must be in [-1, 1]");
  if (o.rounds == 0) throw InvalidArgument("--rounds must be >= 1");
  if (o.rounds > 1 && o.checkpoint.empty()) {
    throw InvalidArgument("rounds after the first re-score with the network and need --checkpoint");
  }
  auto m = read_manifest(o.manifest);
  const auto refs = [&] {
    std::vector<PatchRef> all;
    for (std::size_t i = 0; i < m.records.size(); ++i)
      if (m.records[i].accepted)
        for (std::size_t k = 0; k < m.records[i].patches.size(); ++k) all.push_back({i, k});
    return all;
  }();
  // First-round scores come from the registered files as they are now.
  const auto pairs = load_examples(m, o.manifest, refs);
  std::vector<CleaningItem> items;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& p = m.records[refs[i].record].patches[refs[i].patch];
    items.push_back({pair_score(pairs[i].input, pairs[i].target), p.accepted, p.reason});
  }

  std::optional<GanModel<float>> model;
  if (o.rounds > 1) model.emplace(model_from_checkpoint<float>(load_checkpoint(o.checkpoint)));
  auto rescore = [&](std::size_t i) { return output_score(model->gen, pairs[i]); };
  const auto log_rounds = clean_dataset(items, o.threshold, o.rounds, rescore);

  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto& p = m.records[refs[i].record].patches[refs[i].patch];
    p.score = items[i].score;
    p.accepted = items[i].accepted;
    p.reason = items[i].reason;
  }
  m.header.clean_threshold = o.threshold;
  m.header.clean_log.insert(m.header.clean_log.end(), log_rounds.begin(), log_rounds.end());
  for (std::size_t k = 0; k < log_rounds.size(); ++k) {
    log << "round " << k << ": threshold " << log_rounds[k].threshold << ", accepted " << log_rounds[k].accepted
        << ", rejected " << log_rounds[k].rejected << '\n';
  }
  write_manifest(o.out.empty() ? o.manifest : o.out, m);
  return m;
}

// ---------------------------------------------------------------------------
// Train

struct TrainOptions {
  fs::path manifest;
  std::string preset;
  fs::path config;  // JSON TrainConfig; overrides the preset's epochs
  fs::path init;    // warm start from this checkpoint
  fs::path out_dir = "run";
  double gen_scale = 1.0;
  double disc_scale = 1.0;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_iterations;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> epochs;
  std::size_t calibration_sample = 32;
};

struct TrainSummary {
  TrainConfig config;
  std::size_t examples = 0;
  LossWeights weights;
  TrainResult result;
};

inline TrainSummary cmd_train(const TrainOptions& o, std::ostream& log) {
  const auto m = read_manifest(o.manifest);
  TrainSummary s;
  auto& cfg = s.config;
  std::optional<Preset> preset;
  if (!o.config.empty()) {
    try {
      cfg = nlohmann::json::parse(read_text(o.config)).get<TrainConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad training config " + o.config.string() + ": " + e.what());
    }
    if (!cfg.preset.empty()) preset = find_preset(cfg.preset);
  } else {
    const std::string name = o.preset.empty() ? m.header.preset : o.preset;
    if (name.empty()) throw InvalidArgument("give --preset or --config; available presets: " + preset_names());
    preset = find_preset(name);
    cfg.preset = preset->name;
    cfg.epochs = preset->epochs;
    cfg.patch_size = m.header.patch_size;
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.max_iterations) cfg.max_iterations = *o.max_iterations;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (cfg.patch_size != m.header.patch_size) {
    throw InvalidArgument("config patch size " + std::to_string(cfg.patch_size) + " differs from the manifest's " +
                          std::to_string(m.header.patch_size));
  }
  cfg.validate();

  auto refs = accepted_refs(m);
  if (refs.empty()) throw DataError("manifest has no accepted pairs");
  if (preset && refs.size() > preset->training_patches) {
    // The preset fixes the training-set size; keep an even spread.
    std::vector<PatchRef> kept;
    for (std::size_t k = 0; k < preset->training_patches; ++k) kept.push_back(refs[k * refs.size() / preset->training_patches]);
    refs = std::move(kept);
  }
  const auto data = load_examples(m, o.manifest, refs);
  s.examples = data.size();
  log << "training on " << data.size() << " patches";
  if (preset) log << " (preset " << preset->name << ": " << preset->training_patches << " patches, " << cfg.epochs << " epochs)";
  log << '\n';

  GanModel<float> model(GeneratorConfig::scaled(o.gen_scale), DiscriminatorConfig::scaled(o.disc_scale, cfg.patch_size),
                        cfg.seed);
  const std::vector<TrainingExample> sample(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(std::min(data.size(), o.calibration_sample)));
  s.weights = calibrate_weights(model, sample);
  log << "loss weights: lambda " << s.weights.lambda << ", alpha " << s.weights.alpha << '\n';
  if (!o.init.empty()) {
    transfer_init(model, load_checkpoint(o.init));
    log << "warm start from " << o.init.string() << '\n';
  }
  TrainLoopOptions lo;
  lo.output_dir = o.out_dir;
  s.result = train_loop(model, cfg, data, lo);
  if (!s.result.history.empty()) {
    const auto& last = s.result.history.back();
    log << "iteration " << last.iteration << ": mse " << last.mse << ", gen loss " << last.gen_loss << ", D(out) "
        << last.d_out << '\n';
  }
  log << "checkpoint: " << s.result.final_checkpoint.string() << '\n';
  return s;
}

// ---------------------------------------------------------------------------
// Infer

struct InferOptions {
  fs::path checkpoint;
  fs::path input;
  fs::path out;
  std::size_t patch = 0;  // 0: the checkpoint's training patch size
  std::size_t overlap = kTileOverlap;
};

inline Image cmd_infer(const InferOptions& o, std::ostream& log) {
  auto model = model_from_checkpoint<float>(load_checkpoint(o.checkpoint));
  const Image raw = to_gray(read_image(o.input));
  const std::size_t patch = o.patch ? o.patch : model.disc.config().patch_size;
  if (raw.dim(0) < patch || raw.dim(1) < patch) {
    throw DataError("input " + shape_str(raw.shape()) + " is smaller than the " + std::to_string(patch) + " px patch");
  }
  const std::size_t overlap = std::min(o.overlap, patch / 2);
  const auto start = std::chrono::steady_clock::now();
  const Image unit = infer_tile(model.gen, percentile_normalize(raw), patch, overlap);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const std::size_t n = detail::tile_origins(raw.dim(0), patch, patch - overlap).size() *
                        detail::tile_origins(raw.dim(1), patch, patch - overlap).size();
  const Image rgb = ycbcr_to_rgb(unit_to_ycbcr(unit));
  if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
  write_image(o.out, from_planes(rgb, 8));
  log << "inferred " << n << " patches in " << std::fixed << std::setprecision(3) << secs << " s ("
      << secs / static_cast<double>(n) << " s/patch)\n"
      << std::defaultfloat;
  return rgb;
}

// ---------------------------------------------------------------------------
// Evaluate

struct EvaluateOptions {
  fs::path outputs;
  fs::path labels;
  fs::path report;
};

inline MetricsReport cmd_evaluate(const EvaluateOptions& o, std::ostream& log, std::ostream& warn) {
  std::map<std::string, fs::path> outs, labs;
  for (const auto& p : detail::list_images(o.outputs)) outs[p.stem().string()] = p;
  for (const auto& p : detail::list_images(o.labels)) labs[p.stem().string()] = p;
  std::vector<Image> a, b;
  std::vector<std::string> names;
  for (const auto& [stem, path] : outs) {
    auto it = labs.find(stem);
    if (it == labs.end()) {
      warn << "warning: no label for " << path.string() << "; skipped\n";
      continue;
    }
    a.push_back(to_rgb_planes(read_image(path)));
    b.push_back(to_rgb_planes(read_image(it->second)));
    if (a.back().shape() != b.back().shape()) throw DataError("size mismatch for " + stem);
    names.push_back(stem);
  }
  for (const auto& [stem, path] : labs)
    if (!outs.count(stem)) warn << "warning: no output for " << path.string() << "; skipped\n";
  if (names.empty()) throw DataError("no paired images between " + o.outputs.string() + " and " + o.labels.string());
  auto report = evaluate_report(a, b, names);
  if (!o.report.empty()) write_text(o.report, to_json(report).dump(2) + "\n");
  log << format_table(report);
  return report;
}

// ---------------------------------------------------------------------------
// Synthetic fixtures

struct FixtureOptions {
  fs::path dir;
  std::size_t slide_size = 640;
  std::size_t tile_size = 256;  // at slide scale
  std::size_t tiles = 4;
  double ratio = 1.0;           // tile pixels per slide pixel
  double angle_deg = 0.0;       // tile rotation about its center
  SyntheticStain stain = SyntheticStain::a;
  std::uint64_t seed = 0;
};

struct PlantedTile {
  std::string file;
  std::size_t x = 0;
  std::size_t y = 0;
};

/// Gray scene with fine texture so that every registration stage has
/// something to lock onto.
inline Image fixture_scene(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  Image scene = synthetic_scene(h, w, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  Image noise({h, w});
  for (auto& v : noise.data()) v = static_cast<float>(n(rng));
  noise = percentile_normalize(gaussian_blur(noise, 2.0));
  for (std::size_t i = 0; i < scene.size(); ++i) scene[i] = std::clamp(0.7f * scene[i] + 0.3f * noise[i], 0.0f, 1.0f);
  return scene;
}

/// Writes slide.png (stained bright-field), autofl/tile_NN.tif (16-bit
/// auto-fluorescence) and truth.json (planted offsets).
inline std::vector<PlantedTile> write_synthetic_fixture(const FixtureOptions& o) {
  if (o.tile_size >= o.slide_size) throw InvalidArgument("tile must be smaller than the slide");
  std::mt19937_64 rng(o.seed);
  const std::size_t s = o.slide_size;
  const Image gray = fixture_scene(s, s, rng);
  Image slide({3, s, s});
  for (std::size_t i = 0; i < s * s; ++i) {
    const auto c = synthetic_stain(o.stain, gray[i]);
    const auto rgb = ycbcr_to_rgb(c[0] * kYCbCrRange[0] + kYCbCrFloor[0], c[1] * kYCbCrRange[1] + kYCbCrFloor[1],
                                  c[2] * kYCbCrRange[2] + kYCbCrFloor[2]);
    for (std::size_t k = 0; k < 3; ++k) slide[k * s * s + i] = quantize8(rgb[k]);
  }

  // Non-overlapping placements on a coarse lattice, shuffled.
  std::vector<PlantedTile> planted;
  std::uniform_int_distribution<std::size_t> pos(0, s - o.tile_size);
  const std::size_t t = o.tile_size;
  for (std::size_t k = 0; k < o.tiles; ++k) {
    PlantedTile p;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      p.x = pos(rng);
      p.y = pos(rng);
      bool overlaps = false;
      for (const auto& q : planted)
        if (p.x < q.x + t / 2 && q.x < p.x + t / 2 && p.y < q.y + t / 2 && q.y < p.y + t / 2) overlaps = true;
      if (!overlaps) break;
    }
    char name[32];
    std::snprintf(name, sizeof name, "tile_%02zu.tif", k);
    p.file = name;
    planted.push_back(p);
  }

  fs::create_directories(o.dir / "autofl");
  std::normal_distribution<double> noise(0.0, 150.0);
  const auto tt = static_cast<std::size_t>(std::llround(static_cast<double>(t) * o.ratio));
  const double c = (static_cast<double>(t) - 1.0) / 2.0;
  const auto rot = SimilarityTransform::about({c, c}, o.angle_deg);
  for (std::size_t k = 0; k < planted.size(); ++k) {
    const auto& p = planted[k];
    Image tile({tt, tt});
    for (std::size_t y = 0; y < tt; ++y)
      for (std::size_t x = 0; x < tt; ++x) {
        const Point2 q{(static_cast<double>(x) + 0.5) / o.ratio - 0.5, (static_cast<double>(y) + 0.5) / o.ratio - 0.5};
        const Point2 r = rot.apply(q);
        const double g = sample_bilinear(gray, r.x + static_cast<double>(p.x), r.y + static_cast<double>(p.y));
        tile[y * tt + x] = static_cast<float>(2000.0 + 30000.0 * g + noise(rng));
      }
    write_image(o.dir / "autofl" / p.file, from_planes(tile, 16));
  }
  write_image(o.dir / "slide.png", from_planes(slide, 8));

  nlohmann::ordered_json truth = {{"slide", "slide.png"}, {"tiles", nlohmann::ordered_json::array()}};
  for (const auto& p : planted) truth["tiles"].push_back({{"file", "autofl/" + p.file}, {"x", p.x}, {"y", p.y}});
  write_text(o.dir / "truth.json", truth.dump(2) + "\n");
  return planted;
}

}  // namespace vstain
