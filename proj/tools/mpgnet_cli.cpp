// Command-line front end: synthetic data generation, training, evaluation,
// ablation runs, and the finite-difference gradient suite.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "mpg/gradcheck.hpp"
#include "mpg/train.hpp"

namespace {

std::string trim(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// Plain "key = value" config support. --config FILE expands into flags before
// parsing; flags given explicitly on the command line take precedence.
std::vector<std::string> expand_config_args(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string path;
  for (size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + i, args.begin() + i + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + i);
      break;
    }
  }
  if (path.empty()) return args;
  std::ifstream is(path);
  if (!is) throw mpg::DataError("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw mpg::DataError("config line " + std::to_string(lineno) + " is not key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    const std::string flag = "--" + key;
    bool overridden = false;
    for (const auto& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) overridden = true;
    if (!overridden) {
      args.push_back(flag);
      args.push_back(value);
    }
  }
  return args;
}

struct ModelFlags {
  int in_channels = 1;
  int class_count = 8;
  std::vector<int> stage_channels = {32, 64, 128, 256};
  int frm_reduction = 8;

  mpg::ModelConfig to_config() const {
    mpg::ModelConfig cfg;
    cfg.in_channels = in_channels;
    cfg.class_count = class_count;
    if (stage_channels.size() != 4)
      throw mpg::ConfigError("--stage-channels needs exactly 4 widths");
    for (int i = 0; i < 4; ++i) cfg.stage_channels[i] = stage_channels[i];
    cfg.frm_reduction = frm_reduction;
    return cfg;
  }
};

struct TrainFlags {
  int epochs = 100;
  int batch_size = 2;
  double lr_start = 0.01;
  std::vector<int> lr_decay_epochs = {50, 80};
  double lr_decay_factor = 0.1;
  double weight_decay = 1e-4;
  double alpha = 1.0;
  double beta = 0.5;
  uint64_t seed = 1;
  int max_steps = 0;
  int checkpoint_interval = 0;
  std::string ablation = "full";

  mpg::TrainConfig to_config() const {
    mpg::TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.lr.start = lr_start;
    cfg.lr.milestones.clear();
    for (int e : lr_decay_epochs) cfg.lr.milestones.emplace_back(e, lr_decay_factor);
    cfg.weight_decay = weight_decay;
    cfg.loss_weights.alpha = alpha;
    cfg.loss_weights.beta = beta;
    cfg.seed = seed;
    cfg.max_steps = max_steps;
    cfg.checkpoint_interval = checkpoint_interval;
    cfg.ablation = ablation;
    return cfg;
  }
};

void add_model_flags(CLI::App* app, ModelFlags& f) {
  app->add_option("--in-channels", f.in_channels, "input channel count");
  app->add_option("--class-count", f.class_count, "number of classes K");
  app->add_option("--stage-channels", f.stage_channels, "four encoder stage widths")
      ->delimiter(',');
  app->add_option("--frm-reduction", f.frm_reduction, "FRM bottleneck reduction ratio");
}

void add_train_flags(CLI::App* app, TrainFlags& f) {
  app->add_option("--epochs", f.epochs, "training epochs");
  app->add_option("--batch-size", f.batch_size, "mini-batch size");
  app->add_option("--lr-start", f.lr_start, "initial learning rate");
  app->add_option("--lr-decay-epochs", f.lr_decay_epochs, "epochs at which lr decays")
      ->delimiter(',');
  app->add_option("--lr-decay-factor", f.lr_decay_factor, "multiplicative decay factor");
  app->add_option("--weight-decay", f.weight_decay, "L2 weight decay rate");
  app->add_option("--alpha", f.alpha, "cross-entropy weight");
  app->add_option("--beta", f.beta, "dice weight");
  app->add_option("--seed", f.seed, "run seed");
  app->add_option("--max-steps", f.max_steps, "stop after N optimizer steps (0 = all epochs)");
  app->add_option("--checkpoint-interval", f.checkpoint_interval,
                  "epochs between checkpoints (0 = final only)");
  app->add_option("--ablation", f.ablation, "baseline|frm|mpga|full")
      ->check(CLI::IsMember({"baseline", "frm", "mpga", "full"}));
}

int cmd_synth(const mpg::SynthConfig& cfg, int count, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::vector<mpg::Sample> samples = mpg::generate(cfg, count);
  std::vector<std::pair<std::string, std::string>> entries;
  for (int i = 0; i < count; ++i) {
    char img[64], lab[64];
    std::snprintf(img, sizeof img, "sample_%04d.pgm", i);
    std::snprintf(lab, sizeof lab, "sample_%04d_labels.pgm", i);
    const std::string img_path = out_dir + "/" + img;
    const std::string lab_path = out_dir + "/" + lab;
    mpg::write_image_pgm(samples[i].image, samples[i].height, samples[i].width, img_path);
    mpg::write_label_pgm(samples[i].labels, lab_path);
    entries.emplace_back(img_path, lab_path);
  }
  const std::string manifest = out_dir + "/manifest.txt";
  mpg::write_manifest(entries, manifest);
  std::cout << "wrote " << count << " samples (" << cfg.height << "x" << cfg.width << ", K="
            << cfg.class_count() << ") and " << manifest << "\n";
  return 0;
}

void print_report(const mpg::EvalReport& r) {
  for (int k = 0; k < r.class_count; ++k)
    std::printf("  %-12s %.4f\n", mpg::layer_class_name(k, r.class_count).c_str(),
                r.per_class_f1[k]);
  std::printf("  %-12s %.4f   (mean loss %.4f)\n", "mean_fg", r.mean_foreground_f1, r.mean_loss);
}

int run_gradcheck(double step) {
  using mpg::Tensor, mpg::Shape4;
  std::mt19937_64 rng(41);
  auto rand_t = [&](Shape4 s, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    auto t = Tensor<double>::zeros(s);
    for (long i = 0; i < t.size(); ++i) t.data()[i] = d(rng);
    return t;
  };
  // contraction weights make every output coordinate matter
  auto contract = [&](const Tensor<double>& y, const Tensor<double>& r) {
    return mpg::sum_all(mpg::elementwise_mul(y, r));
  };

  struct Case {
    const char* name;
    double tol;
    std::function<double()> run;
  };
  std::vector<Case> cases;

  {
    auto x = rand_t({2, 3, 6, 6});
    auto w = rand_t({4, 3, 3, 3}, 0.5);
    auto b = rand_t({1, 4, 1, 1}, 0.1);
    auto r = rand_t({2, 4, 6, 6});
    cases.push_back({"conv2d/input", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) { return contract(mpg::conv2d(t, w, b), r); }, x,
                           step);
                     }});
    cases.push_back({"conv2d/weight", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) { return contract(mpg::conv2d(x, t, b), r); }, w,
                           step);
                     }});
    cases.push_back({"conv2d/bias", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) { return contract(mpg::conv2d(x, w, t), r); }, b,
                           step);
                     }});
    cases.push_back({"conv2d/im2col-vs-direct", 1e-6, [=] {
                       auto a = mpg::conv2d(x, w, b, 1, 1, mpg::ConvBackend::kIm2col);
                       auto c = mpg::conv2d(x, w, b, 1, 1, mpg::ConvBackend::kDirect);
                       double worst = 0.0;
                       for (long i = 0; i < a.size(); ++i)
                         worst = std::max(worst, std::abs(a.data()[i] - c.data()[i]));
                       return worst;
                     }});
  }
  {
    auto x = rand_t({2, 3, 5, 5});
    auto g = rand_t({1, 3, 1, 1}, 0.5);
    auto be = rand_t({1, 3, 1, 1}, 0.5);
    auto r = rand_t({2, 3, 5, 5});
    auto f = [=](const Tensor<double>& t, const Tensor<double>& gg, const Tensor<double>& bb) {
      mpg::BnStats<double> stats;
      return contract(mpg::batch_norm(t, gg, bb, stats, mpg::Mode::kTrain), r);
    };
    cases.push_back({"batch_norm/input", 1e-3, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) { return f(t, g, be); }, x, step);
                     }});
    cases.push_back({"batch_norm/gamma", 1e-3, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) { return f(x, t, be); }, g, step);
                     }});
    cases.push_back({"batch_norm/beta", 1e-3, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) { return f(x, g, t); }, be, step);
                     }});
  }
  {
    auto x = rand_t({2, 4, 6, 6});
    auto r = rand_t({2, 4, 6, 6});
    for (long i = 0; i < x.size(); ++i)
      if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.1;  // keep clear of the relu kink
    cases.push_back({"relu", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) { return contract(mpg::relu(t), r); }, x, step);
                     }});
    cases.push_back({"sigmoid", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) { return contract(mpg::sigmoid(t), r); }, x,
                           step);
                     }});
    cases.push_back({"softmax_channels", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) {
                             return contract(mpg::softmax_channels(t), r);
                           },
                           x, step);
                     }});
  }
  {
    auto x = rand_t({2, 3, 6, 6});
    auto r = rand_t({2, 3, 3, 3});
    cases.push_back({"max_pool2", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) { return contract(mpg::max_pool2(t), r); }, x,
                           step);
                     }});
  }
  {
    auto x = rand_t({2, 3, 4, 4});
    auto r = rand_t({2, 3, 8, 8});
    cases.push_back({"upsample_bilinear2", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) {
                             return contract(mpg::upsample_bilinear2(t), r);
                           },
                           x, step);
                     }});
  }
  {
    auto x = rand_t({2, 5, 6, 6});
    auto r = rand_t({2, 5, 1, 1});
    cases.push_back({"global_avg_pool", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) {
                             return contract(mpg::global_avg_pool(t), r);
                           },
                           x, step);
                     }});
  }
  {
    auto a = rand_t({2, 3, 4, 4});
    auto b = rand_t({2, 3, 4, 4});
    auto gate = rand_t({2, 3, 1, 1});
    auto r = rand_t({2, 3, 4, 4});
    auto rc = rand_t({2, 6, 4, 4});
    cases.push_back({"elementwise_add", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) {
                             return contract(mpg::elementwise_add(t, b), r);
                           },
                           a, step);
                     }});
    cases.push_back({"elementwise_mul", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) {
                             return contract(mpg::elementwise_mul(t, b), r);
                           },
                           a, step);
                     }});
    cases.push_back({"elementwise_mul/gate", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) {
                             return contract(mpg::elementwise_mul(a, t), r);
                           },
                           gate, step);
                     }});
    cases.push_back({"concat_channels", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) {
                             return contract(mpg::concat_channels(t, b), rc);
                           },
                           a, step);
                     }});
  }
  {
    std::mt19937_64 brng(7);
    auto f = rand_t({2, 8, 6, 6});
    auto r = rand_t({2, 8, 6, 6});
    auto frm = mpg::FrmBlock<double>::init(8, 4, brng);
    cases.push_back({"frm_forward", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) {
                             return contract(mpg::frm_forward(frm, t), r);
                           },
                           f, step);
                     }});
    auto pgm = mpg::PgmBlock<double>::init(8, 4, brng);
    auto rf = rand_t({2, 8, 6, 6});
    auto rk = rand_t({2, 4, 6, 6});
    cases.push_back({"pgm_forward", 1e-4, [=] {
                       return mpg::grad_check<double>(
                           [&](const Tensor<double>& t) {
                             auto o = mpg::pgm_forward(pgm, t);
                             return mpg::elementwise_add(contract(o.fused, rf),
                                                         contract(o.aux_logits, rk));
                           },
                           f, step);
                     }});
  }

  int failures = 0;
  for (auto& c : cases) {
    const double err = c.run();
    const bool ok = err <= c.tol;
    std::printf("%-28s max err %.3e  tol %.0e  %s\n", c.name, err, c.tol,
                ok ? "ok" : "FAIL");
    if (!ok) ++failures;
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MPG-Net segmentation: train, evaluate and ablate on layered synthetic scans"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset and manifest");
  mpg::SynthConfig synth_cfg;
  int synth_count = 20;
  std::string synth_out;
  synth->add_option("--out-dir", synth_out, "output directory")->required();
  synth->add_option("--count", synth_count, "number of samples");
  synth->add_option("--height", synth_cfg.height, "image height (divisible by 8)");
  synth->add_option("--width", synth_cfg.width, "image width (divisible by 8)");
  synth->add_option("--layer-count", synth_cfg.layer_count, "foreground layer count");
  synth->add_option("--waves", synth_cfg.boundary_waves, "sinusoidal components per boundary");
  synth->add_option("--amp-min", synth_cfg.amp_min, "min wave amplitude (px)");
  synth->add_option("--amp-max", synth_cfg.amp_max, "max wave amplitude (px)");
  synth->add_option("--noise-sigma", synth_cfg.noise_sigma, "gaussian intensity noise");
  synth->add_option("--seed", synth_cfg.seed, "generator seed");

  // train
  auto* train = app.add_subcommand("train", "train a model from a dataset manifest");
  ModelFlags train_model_flags;
  TrainFlags train_flags;
  std::string train_manifest, train_val_manifest, train_out;
  add_model_flags(train, train_model_flags);
  add_train_flags(train, train_flags);
  train->add_option("--manifest", train_manifest, "dataset manifest")->required();
  train->add_option("--val-manifest", train_val_manifest, "validation manifest");
  train->add_option("--out-dir", train_out, "output directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  std::string eval_ckpt, eval_manifest, eval_out = "report.csv";
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  eval->add_option("--out", eval_out, "report CSV path");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "train baseline/+FRM/+MPGA/full and compare");
  ModelFlags ablate_model_flags;
  TrainFlags ablate_flags;
  std::string ablate_manifest, ablate_out;
  std::vector<uint64_t> ablate_seeds = {1};
  int ablate_steps = 200;
  add_model_flags(ablate, ablate_model_flags);
  add_train_flags(ablate, ablate_flags);
  ablate->add_option("--manifest", ablate_manifest, "dataset manifest")->required();
  ablate->add_option("--out-dir", ablate_out, "output directory")->required();
  ablate->add_option("--steps", ablate_steps, "optimizer steps per variant");
  ablate->add_option("--seeds", ablate_seeds, "seeds; baseline/full rerun on extras")
      ->delimiter(',');

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  double gradcheck_step = 1e-3;
  gradcheck->add_option("--step", gradcheck_step, "finite-difference step");

  app.footer("Every subcommand also accepts --config FILE with plain 'key = value' lines;\n"
             "flags given on the command line override the file.");

  try {
    std::vector<std::string> args = expand_config_args(argc, argv);
    std::vector<const char*> cargs;
    cargs.reserve(args.size());
    for (const auto& a : args) cargs.push_back(a.c_str());
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_cfg, synth_count, synth_out);

    if (train->parsed()) {
      const mpg::TrainConfig tc = train_flags.to_config();
      const mpg::ModelConfig mc = train_model_flags.to_config();
      const auto data = mpg::load_dataset(train_manifest, mc.class_count);
      std::vector<mpg::Sample> val;
      if (!train_val_manifest.empty()) val = mpg::load_dataset(train_val_manifest, mc.class_count);
      const mpg::TrainResult r =
          mpg::train(mc, tc, data, val.empty() ? nullptr : &val, train_out);
      std::cout << "trained " << r.trace.size() << " steps; final loss "
                << (r.trace.empty() ? 0.0f : r.trace.back().loss) << "\n"
                << "checkpoint: " << r.checkpoint_path << "\n";
      return 0;
    }

    if (eval->parsed()) {
      const mpg::EvalReport r = mpg::evaluate_checkpoint(eval_ckpt, eval_manifest, eval_out);
      print_report(r);
      std::cout << "report: " << eval_out << "\n";
      return 0;
    }

    if (ablate->parsed()) {
      mpg::TrainConfig tc = ablate_flags.to_config();
      tc.max_steps = ablate_steps;
      const mpg::ModelConfig mc = ablate_model_flags.to_config();
      const auto data = mpg::load_dataset(ablate_manifest, mc.class_count);
      const mpg::AblateResult r = mpg::ablate(mc, tc, data, ablate_seeds, ablate_out);
      std::cout << mpg::detail::ablation_text(r, mc.class_count);
      std::cout << "table: " << ablate_out << "/ablation.csv\n";
      return 0;
    }

    if (gradcheck->parsed()) return run_gradcheck(gradcheck_step);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
