// Command-line front end. Exit codes: 0 success, 1 usage error, 2 data error.
#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>

#include "vstain/pipeline.hpp"

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;

}  // namespace

int main(int argc, char** argv) {
  using namespace vstain;
  CLI::App app{"Virtual staining of label-free auto-fluorescence images"};
  app.require_subcommand(1);
  std::string threads;
  app.add_option("--threads", threads, "Worker threads (default: VSTAIN_THREADS or all cores)");

  RegisterOptions reg;
  auto* c_reg = app.add_subcommand("register", "Align auto-fluorescence tiles to a bright-field slide");
  c_reg->add_option("--autofl", reg.autofl_dir, "Directory of auto-fluorescence tiles")->required();
  c_reg->add_option("--slide", reg.slide, "Bright-field whole-slide image")->required();
  c_reg->add_option("--out", reg.out, "Manifest to write (.jsonl)")->required();
  c_reg->add_option("--ratio", reg.ratio, "Tile-to-slide pixel ratio")->capture_default_str();
  c_reg->add_option("--patch", reg.patch_size, "Patch size")->capture_default_str();
  c_reg->add_option("--stride", reg.stride, "Patch stride")->capture_default_str();
  c_reg->add_option("--seed", reg.seed, "MSAC seed")->capture_default_str();
  c_reg->add_option("--preset", reg.preset, "Preset recorded in the manifest");

  CleanOptions cln;
  auto* c_cln = app.add_subcommand("clean", "Reject poorly matching pairs");
  c_cln->add_option("--manifest", cln.manifest)->required();
  c_cln->add_option("--out", cln.out, "Write here instead of rewriting the manifest");
  c_cln->add_option("--threshold", cln.threshold)->capture_default_str();
  c_cln->add_option("--rounds", cln.rounds)->capture_default_str();
  c_cln->add_option("--checkpoint", cln.checkpoint, "Network used to re-score rounds after the first");

  TrainOptions trn;
  std::uint64_t trn_seed = 0;
  std::size_t trn_iters = 0, trn_batch = 0, trn_epochs = 0;
  auto* c_trn = app.add_subcommand("train", "Train the GAN on a manifest");
  c_trn->add_option("--manifest", trn.manifest)->required();
  auto* o_preset = c_trn->add_option("--preset", trn.preset, "One of: " + preset_names());
  c_trn->add_option("--config", trn.config, "Training configuration (JSON)")->excludes(o_preset);
  c_trn->add_option("--init", trn.init, "Warm-start checkpoint");
  c_trn->add_option("--out-dir", trn.out_dir)->capture_default_str();
  c_trn->add_option("--gen-scale", trn.gen_scale, "Generator width factor")->capture_default_str();
  c_trn->add_option("--disc-scale", trn.disc_scale, "Discriminator width factor")->capture_default_str();
  auto* o_seed = c_trn->add_option("--seed", trn_seed);
  auto* o_iters = c_trn->add_option("--max-iterations", trn_iters);
  auto* o_batch = c_trn->add_option("--batch-size", trn_batch);
  auto* o_epochs = c_trn->add_option("--epochs", trn_epochs);

  InferOptions inf;
  auto* c_inf = app.add_subcommand("infer", "Virtually stain an auto-fluorescence image");
  c_inf->add_option("--checkpoint", inf.checkpoint)->required();
  c_inf->add_option("--input", inf.input)->required();
  c_inf->add_option("--out", inf.out)->required();
  c_inf->add_option("--patch", inf.patch, "Tile size (default: the training patch size)");
  c_inf->add_option("--overlap", inf.overlap)->capture_default_str();

  EvaluateOptions ev;
  auto* c_ev = app.add_subcommand("evaluate", "Compare outputs with bright-field labels");
  c_ev->add_option("--outputs", ev.outputs)->required();
  c_ev->add_option("--labels", ev.labels)->required();
  c_ev->add_option("--report", ev.report, "JSON report path");

  FixtureOptions syn;
  std::string stain = "a";
  auto* c_syn = app.add_subcommand("synth", "Write a synthetic slide with planted tiles");
  c_syn->add_option("--out", syn.dir)->required();
  c_syn->add_option("--tiles", syn.tiles)->capture_default_str();
  c_syn->add_option("--slide-size", syn.slide_size)->capture_default_str();
  c_syn->add_option("--tile-size", syn.tile_size)->capture_default_str();
  c_syn->add_option("--ratio", syn.ratio)->capture_default_str();
  c_syn->add_option("--angle", syn.angle_deg, "Tile rotation in degrees")->capture_default_str();
  c_syn->add_option("--stain", stain)->check(CLI::IsMember({"a", "b"}))->capture_default_str();
  c_syn->add_option("--seed", syn.seed)->capture_default_str();

  auto* c_pre = app.add_subcommand("presets", "List training presets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (!threads.empty()) setenv("VSTAIN_THREADS", threads.c_str(), 1);
    if (c_reg->parsed()) {
      cmd_register(reg, std::cout);
    } else if (c_cln->parsed()) {
      cmd_clean(cln, std::cout);
    } else if (c_trn->parsed()) {
      if (*o_seed) trn.seed = trn_seed;
      if (*o_iters) trn.max_iterations = trn_iters;
      if (*o_batch) trn.batch_size = trn_batch;
      if (*o_epochs) trn.epochs = trn_epochs;
      cmd_train(trn, std::cout);
    } else if (c_inf->parsed()) {
      cmd_infer(inf, std::cout);
    } else if (c_ev->parsed()) {
      cmd_evaluate(ev, std::cout, std::cerr);
    } else if (c_syn->parsed()) {
      syn.stain = stain == "a" ? SyntheticStain::a : SyntheticStain::b;
      const auto planted = write_synthetic_fixture(syn);
      for (const auto& p : planted) std::cout << p.file << " at (" << p.x << "," << p.y << ")\n";
    } else if (c_pre->parsed()) {
      for (const auto& p : presets()) {
        std::cout << p.name << ": " << p.tissue << ", " << p.stain << ", " << p.training_patches << " patches, "
                  << p.epochs << " epochs\n";
      }
    }
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return 0;
}
