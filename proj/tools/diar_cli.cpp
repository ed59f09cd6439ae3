// diar: generate, train, reconstruct, align-eval and report.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diar/commands.hpp"

namespace {

// Value of "--config <path>" or "--config=<path>", if present.
std::string config_path(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return {};
}

std::string subcommand(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (!a.empty() && a[0] != '-') return a;
  }
  return {};
}

template <typename Config>
Config initial(const std::string& cmd, const std::string& wanted, const std::string& path) {
  if (cmd != wanted || path.empty()) return Config{};
  return diar::load_config<Config>(path);
}

int run(int argc, char** argv) {
  const std::string cmd = subcommand(argc, argv);
  const std::string cfg_path = config_path(argc, argv);

  CLI::App app{"Distorted image sequence alignment and reconstruction toolkit"};
  app.require_subcommand(1);
  std::string unused_config;

  // generate
  auto gen = initial<diar::GenerateConfig>(cmd, "generate", cfg_path);
  auto* g = app.add_subcommand("generate", "Render a synthetic dataset");
  g->add_option("--config", unused_config, "JSON config; flags override its fields");
  g->add_option("--out", gen.out, "Output directory")->capture_default_str();
  g->add_option("--mode", gen.mode, "aligned | misaligned | both")->capture_default_str();
  g->add_option("--preset", gen.preset, "default | mild distortion preset")->capture_default_str();
  g->add_option("--sequences", gen.sequences, "Number of sequences")->capture_default_str();
  g->add_option("--frames", gen.frames, "Frames per sequence")->capture_default_str();
  g->add_option("--size", gen.size, "Square frame extent in pixels")->capture_default_str();
  g->add_option("--seed", gen.seed, "Master seed")->capture_default_str();
  g->add_option("--base-images", gen.base_images, "Directory of PPM base images (default: procedural)");

  // train
  auto tr = initial<diar::TrainRunConfig>(cmd, "train", cfg_path);
  auto* t = app.add_subcommand("train", "Train a reconstruction model on an aligned dataset");
  t->add_option("--config", unused_config, "JSON config; flags override its fields");
  t->add_option("--data", tr.data, "Aligned dataset directory")->capture_default_str();
  t->add_option("--out", tr.out, "Run output directory")->capture_default_str();
  t->add_option("--model", tr.model.kind, "deep_sets | diar")->capture_default_str();
  t->add_option("--mode", tr.model.mode, "avg_x | avg_e | softmax_weighted")->capture_default_str();
  t->add_option("--window-t", tr.model.window_t, "Temporal window p")->capture_default_str();
  t->add_option("--window-s", tr.model.window_s, "Spatial window m")->capture_default_str();
  t->add_option("--heads", tr.model.heads, "Attention heads")->capture_default_str();
  t->add_option("--latent", tr.model.latent_width, "Latent channels")->capture_default_str();
  t->add_option("--model-seed", tr.model.seed, "Initialization seed")->capture_default_str();
  t->add_option("--epochs", tr.train.epochs, "Epochs")->capture_default_str();
  t->add_option("--batch", tr.train.batch, "Sequences per optimizer step")->capture_default_str();
  t->add_option("--lr", tr.train.lr, "Adam learning rate")->capture_default_str();
  t->add_option("--val-fraction", tr.train.val_fraction, "Validation fraction")->capture_default_str();
  t->add_option("--frames", tr.train.frames, "Frames per sequence (0 = all)")->capture_default_str();
  t->add_option("--seed", tr.train.seed, "Split and shuffle seed")->capture_default_str();

  // reconstruct
  auto rc = initial<diar::ReconstructConfig>(cmd, "reconstruct", cfg_path);
  auto* r = app.add_subcommand("reconstruct", "Reconstruct and score aligned test sequences");
  r->add_option("--config", unused_config, "JSON config; flags override its fields");
  r->add_option("--data", rc.data, "Dataset directory")->capture_default_str();
  r->add_option("--out", rc.out, "Output directory")->capture_default_str();
  r->add_option("--methods", rc.methods, "diar deep_sets median mean rpca mle")->delimiter(',');
  r->add_option("--lengths", rc.lengths, "Prefix lengths to evaluate")->delimiter(',');
  r->add_option("--diar-model", rc.diar_model, "Trained diar run directory");
  r->add_option("--deep-sets-model", rc.deep_sets_model, "Trained deep_sets run directory");
  r->add_flag("--save-images", rc.save_images, "Write reconstructions as PPM");

  // align-eval
  auto ae = initial<diar::AlignEvalConfig>(cmd, "align-eval", cfg_path);
  auto* a = app.add_subcommand("align-eval", "Align sequences, score alignment and reconstruction");
  a->add_option("--config", unused_config, "JSON config; flags override its fields");
  a->add_option("--data", ae.data, "Dataset directory")->capture_default_str();
  a->add_option("--out", ae.out, "Output directory")->capture_default_str();
  a->add_option("--alignment", ae.alignment, "estimated | ground-truth")->capture_default_str();
  a->add_option("--reference", ae.reference, "Reference frame index")->capture_default_str();
  a->add_option("--descriptor", ae.descriptor.provider, "patch | cnn")->capture_default_str();
  a->add_option("--patch-size", ae.descriptor.patch_size, "Patch descriptor extent (odd)")->capture_default_str();
  a->add_option("--patch-step", ae.descriptor.patch_step, "Patch descriptor grid step")->capture_default_str();
  a->add_option("--cnn-weights", ae.descriptor.cnn_weights, "Descriptor checkpoint (default: seeded random)");
  a->add_option("--scales", ae.descriptor.scales, "Pyramid scales")->delimiter(',');
  a->add_option("--threshold", ae.ransac.threshold_px, "RANSAC threshold in pixels")->capture_default_str();
  a->add_option("--iters", ae.ransac.max_iters, "RANSAC iterations")->capture_default_str();
  a->add_option("--seed", ae.ransac.seed, "RANSAC seed")->capture_default_str();
  a->add_option("--min-score", ae.min_score, "Minimum cosine score for a match")->capture_default_str();
  a->add_option("--methods", ae.methods, "Reconstruction methods")->delimiter(',');
  a->add_option("--diar-model", ae.diar_model, "Trained diar run directory");
  a->add_option("--deep-sets-model", ae.deep_sets_model, "Trained deep_sets run directory");

  // report
  diar::ReportConfig rp;
  auto* p = app.add_subcommand("report", "Render SVG plots and a summary table from CSV outputs");
  p->add_option("inputs", rp.inputs, "CSV files")->required();
  p->add_option("--out", rp.out, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (*g) {
    const auto s = diar::cmd_generate(gen);
    std::cout << "generated " << s.sequences << " sequences (seed " << gen.seed << ")";
    for (const auto& d : s.directories) std::cout << " -> " << d;
    std::cout << "\n";
  } else if (*t) {
    const auto res = diar::cmd_train(tr, [](const diar::EpochRecord& e) {
      std::cout << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " (" << e.wall_seconds
                << " s)\n"
                << std::flush;
    });
    std::cout << "best epoch " << res.best_epoch << ", split " << res.split.train.size() << "/" << res.split.val.size()
              << ", wrote " << tr.out << "\n";
  } else if (*r) {
    diar::cmd_reconstruct(rc);
    std::cout << "wrote " << rc.out << "/metrics.csv\n";
  } else if (*a) {
    const auto s = diar::cmd_align_eval(ae);
    std::cout << "aligned " << s.errors.size() << " frames, " << s.failures << " failures, wrote " << ae.out << "\n";
  } else if (*p) {
    const auto out = diar::cmd_report(rp);
    std::cout << out.summary;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const diar::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
