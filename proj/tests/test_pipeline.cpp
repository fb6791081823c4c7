#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "vstain/pipeline.hpp"

using namespace vstain;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("vstain_pipeline_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// One fixture shared by the register-based tests; registration is the slow part.
struct Fixture {
  fs::path dir;
  std::vector<PlantedTile> planted;
  DatasetManifest manifest;
  fs::path manifest_path;
};

const Fixture& registered_fixture() {
  static const Fixture f = [] {
    Fixture f;
    f.dir = temp_dir("fixture");
    FixtureOptions fo;
    fo.dir = f.dir;
    fo.ratio = kDefaultDownsampleRatio;
    fo.seed = 11;
    f.planted = write_synthetic_fixture(fo);
    RegisterOptions ro;
    ro.autofl_dir = f.dir / "autofl";
    ro.slide = f.dir / "slide.png";
    ro.out = f.dir / "manifest.jsonl";
    ro.patch_size = 64;
    ro.stride = 64;
    ro.preset = "salivary-he";
    std::ostringstream log;
    f.manifest = cmd_register(ro, log);
    f.manifest_path = ro.out;
    return f;
  }();
  return f;
}

Image rgb_noise(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  Image img({3, h, w});
  for (auto& v : img.data()) v = static_cast<float>(u(rng));
  return img;
}

}  // namespace

TEST(Presets, TableRows) {
  const auto& s = find_preset("salivary-he");
  EXPECT_EQ(s.training_patches, 2768u);
  EXPECT_EQ(s.epochs, 26u);
  EXPECT_EQ(s.stain, "H&E");
  const auto& t = find_preset("thyroid-he-transfer");
  EXPECT_EQ(t.training_patches, 8336u);
  EXPECT_EQ(t.epochs, 4u);
  EXPECT_TRUE(t.transfer);
  EXPECT_EQ(find_preset("thyroid-he").epochs, 8u);
  EXPECT_EQ(find_preset("liver-mt").training_patches, 3840u);
  EXPECT_EQ(find_preset("lung-mt").training_patches, 9162u);
  EXPECT_EQ(find_preset("lung-mt").epochs, 10u);
  EXPECT_EQ(find_preset("kidney-jones").training_patches, 4905u);
  EXPECT_EQ(presets().size(), 6u);
}

TEST(Presets, UnknownNameListsChoices) {
  try {
    find_preset("brain-he");
    FAIL();
  } catch (const InvalidArgument& e) {
    const std::string msg = e.what();
    for (const auto& p : presets()) EXPECT_NE(msg.find(p.name), std::string::npos) << p.name;
  }
}

TEST(Patches, GridArithmetic) {
  EXPECT_EQ(grid_count(2048, 256, 256), 8u);
  EXPECT_EQ(grid_count(2048, 256, 224), 9u);
  EXPECT_EQ(grid_count(100, 256, 256), 0u);

  Image in({2048, 2048});
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(100, 5000);
  for (auto& v : in.data()) v = static_cast<float>(u(rng));
  const Image tg({3, 2048, 2048}, 128.0f);
  const auto range = percentile_range(in);
  EXPECT_EQ(extract_patches(in, tg, 256, 256, range).size(), 64u);
  const auto p224 = extract_patches(in, tg, 256, 224, range);
  ASSERT_EQ(p224.size(), 81u);
  EXPECT_EQ(p224.back().x, 8u * 224u);
  EXPECT_EQ(p224.back().y, 8u * 224u);
  EXPECT_TRUE(extract_patches(crop(in, 0, 0, 200, 200), crop(tg, 0, 0, 200, 200), 256, 256, range).empty());
}

TEST(Patches, NormalizationAndTargetScaling) {
  Image in({64, 64});
  for (std::size_t i = 0; i < in.size(); ++i) in[i] = static_cast<float>(i);
  const auto range = percentile_range(in);
  const auto p = extract_patches(in, rgb_noise(64, 64, 2), 64, 64, range);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].input.shape(), (Shape{1, 64, 64}));
  EXPECT_EQ(p[0].target.shape(), (Shape{3, 64, 64}));
  // The slide's percentiles map to exactly 0 and 1; 0..100 puts them on 1 and 99.
  Image ramp({1, 101});
  for (std::size_t i = 0; i < 101; ++i) ramp[i] = static_cast<float>(i);
  const auto rr = percentile_range(ramp);
  EXPECT_EQ(rr.lo, 1.0);
  EXPECT_EQ(rr.hi, 99.0);
  const auto n = percentile_normalize(ramp, rr);
  EXPECT_EQ(n[1], 0.0f);
  EXPECT_EQ(n[99], 1.0f);
  EXPECT_EQ(n[0], 0.0f);
  EXPECT_EQ(n[100], 1.0f);
  for (float v : p[0].target.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_GE(p[0].score, -1.0);
  EXPECT_LE(p[0].score, 1.0);
  EXPECT_THROW(extract_patches(in, rgb_noise(32, 64, 2), 16, 16, range), ShapeError);
}

TEST(Manifest, RoundTripIsByteIdentical) {
  DatasetManifest m;
  m.header.command = "register";
  m.header.preset = "liver-mt";
  m.header.seed = 42;
  m.header.input_range = {123.25, 40211.5};
  m.header.clean_log = {{0.7, 10, 2}};
  ManifestRecord r;
  r.source_tile = "autofl/a.tif";
  r.input = "m.data/a.input.tif";
  r.fov = {12, 34, 0.987654321};
  r.transform = {1.4999999, 1.0001, 10.25, -7.125};
  r.matches = 80;
  r.inliers = 61;
  r.patches = {{0, 0, 0.93, true, ""}, {64, 0, 0.1, false, "score 0.1000 below threshold 0.7000"}};
  m.records.push_back(r);
  r.accepted = false;
  r.reason = "too few features";
  r.patches.clear();
  m.records.push_back(r);

  const auto text = encode_manifest(m);
  const auto back = decode_manifest(text);
  EXPECT_EQ(encode_manifest(back), text);
  EXPECT_EQ(back.records[0].transform.angle_deg, 1.4999999);
  EXPECT_EQ(back.records[1].reason, "too few features");
  EXPECT_EQ(back.accepted_patches(), 1u);
  EXPECT_THROW(decode_manifest("{\"kind\":\"record\"}\n"), DataError);
  EXPECT_THROW(decode_manifest("not json\n"), DataError);
  EXPECT_THROW(decode_manifest(""), DataError);
}

TEST(Register, RecoversPlantedOffsets) {
  const auto& f = registered_fixture();
  ASSERT_EQ(f.manifest.records.size(), f.planted.size());
  for (std::size_t i = 0; i < f.planted.size(); ++i) {
    const auto& r = f.manifest.records[i];
    ASSERT_TRUE(r.accepted) << r.reason;
    EXPECT_EQ(r.fov.x, f.planted[i].x) << i;
    EXPECT_EQ(r.fov.y, f.planted[i].y) << i;
    EXPECT_NEAR(r.transform.angle_deg, 0.0, 0.2);
    EXPECT_NEAR(r.transform.tx, 0.0, 1.0);
    EXPECT_NEAR(r.transform.ty, 0.0, 1.0);
    // 256 px at slide scale, 50 px cropped per side: a 2x2 grid of 64 px patches.
    EXPECT_EQ(r.patches.size(), 4u);
    for (const auto& p : r.patches) EXPECT_GT(p.score, 0.7) << i;
  }
}

TEST(Register, AcceptedFilesExistAndLoad) {
  const auto& f = registered_fixture();
  for (const auto& r : f.manifest.records) {
    ASSERT_TRUE(r.accepted);
    const auto in = read_image(f.dir / r.input), tg = read_image(f.dir / r.target);
    EXPECT_EQ(in.bit_depth, 16);
    EXPECT_EQ(tg.channels, 3u);
    EXPECT_EQ(in.width, tg.width);
    const auto field = field_from_json(nlohmann::json::parse(read_text(f.dir / r.field)));
    EXPECT_TRUE(field.finite());
  }
  // Paths are stored relative to the manifest.
  EXPECT_FALSE(fs::path(f.manifest.records[0].input).is_absolute());
}

TEST(Register, RerunIsByteIdenticalAndManifestRoundTrips) {
  const auto& f = registered_fixture();
  const auto first = read_text(f.manifest_path);
  RegisterOptions ro;
  ro.autofl_dir = f.dir / "autofl";
  ro.slide = f.dir / "slide.png";
  ro.out = f.dir / "again.jsonl";
  ro.patch_size = 64;
  ro.stride = 64;
  ro.preset = "salivary-he";
  std::ostringstream log;
  cmd_register(ro, log);
  auto again = read_text(ro.out);
  // Only the data directory name differs between the two runs.
  for (std::size_t pos; (pos = again.find("again.data")) != std::string::npos;) again.replace(pos, 10, "manifest.data");
  EXPECT_EQ(again, first);
  EXPECT_EQ(encode_manifest(read_manifest(f.manifest_path)), first);
}

TEST(Register, EmptyDirectoryIsDataError) {
  const auto d = temp_dir("empty");
  fs::create_directories(d / "autofl");
  RegisterOptions ro;
  ro.autofl_dir = d / "autofl";
  ro.slide = d / "slide.png";
  ro.out = d / "m.jsonl";
  std::ostringstream log;
  try {
    cmd_register(ro, log);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("no tiles"), std::string::npos);
  }
}

TEST(Register, FeaturelessTileIsRejectedNotFatal) {
  const auto d = temp_dir("flat");
  FixtureOptions fo;
  fo.dir = d;
  fo.tiles = 1;
  fo.seed = 3;
  write_synthetic_fixture(fo);
  write_image(d / "autofl" / "tile_01.tif", from_planes(Image({256, 256}, 5000.0f), 16));
  RegisterOptions ro;
  ro.autofl_dir = d / "autofl";
  ro.slide = d / "slide.png";
  ro.out = d / "m.jsonl";
  ro.ratio = 1.0;
  ro.patch_size = 64;
  ro.stride = 64;
  std::ostringstream log;
  const auto m = cmd_register(ro, log);
  ASSERT_EQ(m.records.size(), 2u);
  EXPECT_TRUE(m.records[0].accepted);
  EXPECT_FALSE(m.records[1].accepted);
  EXPECT_FALSE(m.records[1].reason.empty());
  EXPECT_TRUE(m.records[1].patches.empty());
}

TEST(Clean, ThresholdZeroKeepsNonNegativeScores) {
  const auto& f = registered_fixture();
  CleanOptions co;
  co.manifest = f.manifest_path;
  co.out = f.dir / "clean0.jsonl";
  co.threshold = 0.0;
  std::ostringstream log;
  const auto m = cmd_clean(co, log);
  EXPECT_EQ(m.accepted_patches(), f.manifest.accepted_patches());
  ASSERT_EQ(m.header.clean_log.size(), 1u);
  EXPECT_EQ(m.header.clean_log[0].rejected, 0u);
  EXPECT_NE(log.str().find("accepted 16"), std::string::npos) << log.str();
}

TEST(Clean, CorruptedTargetsRejected) {
  const auto& f = registered_fixture();
  const auto d = temp_dir("corrupt");
  fs::copy_file(f.manifest_path, d / "manifest.jsonl");
  fs::copy(f.dir / "manifest.data", d / "manifest.data", fs::copy_options::recursive);
  // Black out the left 20 of every 64 columns (31% of each patch) in one target.
  const auto& victim = f.manifest.records[1];
  auto tg = read_image(d / victim.target);
  for (std::size_t y = 0; y < tg.height; ++y)
    for (std::size_t x = 0; x < tg.width; ++x)
      if (x % 64 < 20)
        for (std::size_t c = 0; c < 3; ++c) tg.samples[(y * tg.width + x) * 3 + c] = 0;
  write_image(d / victim.target, tg);

  CleanOptions co;
  co.manifest = d / "manifest.jsonl";
  std::ostringstream log;
  const auto m = cmd_clean(co, log);
  for (std::size_t i = 0; i < m.records.size(); ++i)
    for (const auto& p : m.records[i].patches) {
      EXPECT_EQ(p.accepted, i != 1) << i << " (" << p.x << "," << p.y << ") score " << p.score;
      if (i == 1) EXPECT_NE(p.reason.find("below threshold"), std::string::npos);
    }
  EXPECT_EQ(m.accepted_patches(), 12u);
  // The manifest was rewritten in place.
  EXPECT_EQ(read_manifest(co.manifest).accepted_patches(), 12u);
}

TEST(Clean, LaterRoundsNeedCheckpointAndRange) {
  const auto& f = registered_fixture();
  CleanOptions co;
  co.manifest = f.manifest_path;
  co.out = f.dir / "unused.jsonl";
  co.rounds = 2;
  std::ostringstream log;
  EXPECT_THROW(cmd_clean(co, log), InvalidArgument);
  co.rounds = 1;
  co.threshold = 1.5;
  EXPECT_THROW(cmd_clean(co, log), InvalidArgument);
}

TEST(Train, UnknownPresetAndInitMismatch) {
  const auto& f = registered_fixture();
  const auto out = temp_dir("train");
  TrainOptions to;
  to.manifest = f.manifest_path;
  to.preset = "nope";
  to.out_dir = out;
  std::ostringstream log;
  EXPECT_THROW(cmd_train(to, log), InvalidArgument);

  to.preset = "salivary-he";
  to.gen_scale = 1.0 / 16;
  to.disc_scale = 1.0 / 128;
  to.max_iterations = 2;
  to.batch_size = 2;
  const auto s = cmd_train(to, log);
  EXPECT_EQ(s.result.history.size(), 2u);
  EXPECT_EQ(s.config.epochs, 26u);
  EXPECT_TRUE(fs::exists(s.result.final_checkpoint));

  // A checkpoint from a different width cannot seed this architecture.
  to.gen_scale = 1.0 / 8;
  to.init = s.result.final_checkpoint;
  to.out_dir = out / "warm";
  EXPECT_THROW(cmd_train(to, log), ArchitectureMismatch);
}

TEST(Pipeline, RegisterCleanTrainInferEvaluate) {
  const auto& f = registered_fixture();
  const auto d = temp_dir("e2e");
  std::ostringstream log, warn;
  CleanOptions co;
  co.manifest = f.manifest_path;
  co.out = d / "clean.jsonl";
  cmd_clean(co, log);
  // The cleaned manifest sits in another directory; its paths must still resolve.
  fs::copy(f.dir / "manifest.data", d / "manifest.data", fs::copy_options::recursive);

  TrainOptions to;
  to.manifest = co.out;
  to.out_dir = d / "run";
  to.gen_scale = 1.0 / 16;
  to.disc_scale = 1.0 / 128;
  to.max_iterations = 3;
  to.batch_size = 4;
  const auto s = cmd_train(to, log);
  EXPECT_EQ(s.examples, 16u);
  EXPECT_EQ(s.config.preset, "salivary-he");

  // Inference: 256x256 in, 256x256 RGB out, deterministic bytes.
  Image raw({256, 256});
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(1000, 30000);
  for (auto& v : raw.data()) v = static_cast<float>(u(rng));
  write_image(d / "in.tif", from_planes(raw, 16));
  fs::create_directories(d / "out");
  InferOptions io;
  io.checkpoint = s.result.final_checkpoint;
  io.input = d / "in.tif";
  io.out = d / "out" / "a.png";
  cmd_infer(io, log);
  const auto first = read_image(io.out);
  EXPECT_EQ(first.width, 256u);
  EXPECT_EQ(first.height, 256u);
  EXPECT_EQ(first.channels, 3u);
  const auto bytes = read_text(io.out);
  cmd_infer(io, log);
  EXPECT_EQ(read_text(io.out), bytes);
  EXPECT_NE(log.str().find("s/patch"), std::string::npos);

  // Evaluate the output against itself plus an unpaired file.
  fs::create_directories(d / "labels");
  fs::copy_file(io.out, d / "labels" / "a.png");
  write_image(d / "out" / "lonely.png", from_planes(rgb_noise(32, 32, 1)));
  EvaluateOptions eo{d / "out", d / "labels", d / "report.json"};
  const auto rep = cmd_evaluate(eo, log, warn);
  EXPECT_EQ(rep.count(), 1u);
  EXPECT_NEAR(rep.ssim.mean, 1.0, 1e-12);
  EXPECT_EQ(rep.y_diff.mean, 0.0);
  EXPECT_NE(warn.str().find("lonely"), std::string::npos);
  EXPECT_TRUE(fs::exists(eo.report));
}

TEST(Infer, RejectsUnreadableAndTinyInputs) {
  const auto d = temp_dir("infer_bad");
  GanModel<float> m(GeneratorConfig::scaled(1.0 / 16), DiscriminatorConfig::scaled(1.0 / 128, 64), 0);
  save_checkpoint(d / "c.vsgan", to_checkpoint(m));
  std::ostringstream log;
  InferOptions io{d / "c.vsgan", d / "missing.tif", d / "o.png"};
  EXPECT_THROW(cmd_infer(io, log), DataError);
  write_image(d / "small.tif", from_planes(Image({32, 32}, 100.0f), 16));
  io.input = d / "small.tif";
  EXPECT_THROW(cmd_infer(io, log), DataError);
}

TEST(Evaluate, KnownFixtureMetrics) {
  const auto d = temp_dir("eval");
  fs::create_directories(d / "o");
  fs::create_directories(d / "l");
  // Uniform gray frames 0 and 22 levels apart in Y: only luma differs.
  Image a({3, 16, 16}, 100.0f), b({3, 16, 16}, 100.0f);
  write_image(d / "o" / "x.png", from_planes(a));
  write_image(d / "l" / "x.png", from_planes(b));
  std::ostringstream log, warn;
  auto r = cmd_evaluate({d / "o", d / "l", {}}, log, warn);
  EXPECT_EQ(r.y_diff.mean, 0.0);
  const auto y1 = rgb_to_ycbcr(100, 100, 100)[0], y2 = rgb_to_ycbcr(122, 122, 122)[0];
  b = Image({3, 16, 16}, 122.0f);
  write_image(d / "l" / "x.png", from_planes(b));
  r = cmd_evaluate({d / "o", d / "l", {}}, log, warn);
  EXPECT_NEAR(r.y_diff.mean, 100.0 * std::abs(y2 - y1) / 219.0, 1e-4);
  EXPECT_NEAR(r.cb_diff.mean, 0.0, 1e-4);
  EXPECT_NE(log.str().find("Y difference (%)"), std::string::npos);
  fs::remove(d / "l" / "x.png");
  EXPECT_THROW(cmd_evaluate({d / "o", d / "l", {}}, log, warn), DataError);
}
