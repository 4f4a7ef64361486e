#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mpg/checkpoint.hpp"
#include "mpg/data.hpp"
#include "mpg/losses.hpp"
#include "mpg/model.hpp"
#include "mpg/optim.hpp"

namespace mpg {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 2;
  LrSchedule lr;
  double weight_decay = 1e-4;
  LossWeights loss_weights;
  uint64_t seed = 1;
  int max_steps = 0;           // stop after this many optimizer steps; 0 = run all epochs
  int checkpoint_interval = 0;  // epochs between checkpoints; 0 = final only
  std::string ablation = "full";

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (max_steps < 0 || checkpoint_interval < 0)
      throw ConfigError("max_steps and checkpoint_interval must be >= 0");
    lr.validate();
    loss_weights.validate();
    if (ablation != "baseline" && ablation != "frm" && ablation != "mpga" && ablation != "full")
      throw ConfigError("ablation must be one of baseline|frm|mpga|full, got '" + ablation + "'");
  }
};

inline ModelConfig apply_ablation(ModelConfig cfg, const std::string& ablation) {
  cfg.frm_enabled = (ablation == "frm" || ablation == "full");
  cfg.mpga_enabled = (ablation == "mpga" || ablation == "full");
  return cfg;
}

struct StepRecord {
  int step = 0;
  int epoch = 0;
  double lr = 0.0;
  float loss = 0.0f;
};

struct TrainResult {
  std::vector<StepRecord> trace;
  std::vector<double> epoch_mean_loss;
  std::vector<double> val_mean_f1;  // one entry per epoch when a validation set is given
  std::string checkpoint_path;
};

namespace detail {

inline void make_batch(const std::vector<Sample>& data, const std::vector<int>& idx, size_t lo,
                       size_t hi, Tensor<float>& x, LabelMap& labels) {
  const int H = data[idx[lo]].height, W = data[idx[lo]].width;
  const int B = static_cast<int>(hi - lo);
  x = Tensor<float>::zeros({B, 1, H, W});
  labels = LabelMap::zeros(B, H, W);
  for (int b = 0; b < B; ++b) {
    const Sample& s = data[idx[lo + b]];
    if (s.height != H || s.width != W)
      throw ConfigError("all samples in a dataset must share one size; got " +
                        std::to_string(s.height) + "x" + std::to_string(s.width) + " and " +
                        std::to_string(H) + "x" + std::to_string(W));
    std::copy(s.image.begin(), s.image.end(), x.data() + static_cast<long>(b) * H * W);
    std::copy(s.labels.v.begin(), s.labels.v.end(),
              labels.v.begin() + static_cast<long>(b) * H * W);
  }
}

inline void write_loss_trace(const TrainResult& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << "step,epoch,lr,loss\n";
  os << std::setprecision(9);
  for (const auto& s : r.trace)
    os << s.step << "," << s.epoch << "," << s.lr << "," << s.loss << "\n";
}

inline void write_epoch_trace(const TrainResult& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << "epoch,mean_loss" << (r.val_mean_f1.empty() ? "" : ",val_mean_f1") << "\n";
  os << std::setprecision(9);
  for (size_t e = 0; e < r.epoch_mean_loss.size(); ++e) {
    os << e << "," << r.epoch_mean_loss[e];
    if (!r.val_mean_f1.empty()) os << "," << r.val_mean_f1[e];
    os << "\n";
  }
}

}  // namespace detail

// Mean joint loss and per-class F1 over a dataset, eval-mode forward one
// sample at a time.
inline EvalReport evaluate(Model<float>& model, const std::vector<Sample>& data,
                           const LossWeights& w = {}) {
  if (data.empty()) throw ConfigError("evaluate: empty dataset");
  const int K = model.config().class_count;
  EvalReport report;
  report.class_count = K;
  report.per_class_f1.assign(K, 0.0);
  double loss_acc = 0.0;
  for (const Sample& s : data) {
    Tensor<float> x;
    LabelMap labels;
    std::vector<int> idx = {0};
    const std::vector<Sample> one = {s};
    detail::make_batch(one, idx, 0, 1, x, labels);
    ForwardOutput<float> out = model.forward(x, Mode::kEval);
    loss_acc += joint_loss(out, labels, w).item();
    const std::vector<double> f1 = f1_per_class(argmax_labels(out.final_probs), labels, K);
    for (int k = 0; k < K; ++k) report.per_class_f1[k] += f1[k];
  }
  for (int k = 0; k < K; ++k) report.per_class_f1[k] /= static_cast<double>(data.size());
  report.mean_foreground_f1 = mean_foreground(report.per_class_f1);
  report.mean_loss = loss_acc / static_cast<double>(data.size());
  return report;
}

// One optimizer step per mini-batch: forward, joint loss, backward, Adam.
// Batches are reshuffled per epoch from the run seed. A non-finite loss
// aborts the run; checkpoints already on disk stay as they are.
inline TrainResult train_model(Model<float>& model, AdamState& adam, const TrainConfig& cfg,
                               const std::vector<Sample>& data, const std::vector<Sample>* val,
                               const std::string& out_dir) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  TrainResult result;
  auto& params = model.parameters();
  if (adam.m.size() != params.size()) adam.init(params);

  std::vector<int> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);

  const auto save = [&](const std::string& name, int epoch, int step) {
    if (out_dir.empty()) return std::string();
    std::filesystem::create_directories(out_dir);  // long runs outlive tmp cleaners
    const std::string path = out_dir + "/" + name;
    CheckpointMeta meta{epoch, step, cfg.seed, adam.t};
    save_checkpoint(path, model, &adam, meta);
    return path;
  };

  int step = 0;
  int epochs_run = 0;
  bool stop = false;
  for (int epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    std::mt19937_64 rng(detail::splitmix64(cfg.seed) ^ detail::splitmix64(epoch + 0x51ed));
    std::shuffle(idx.begin(), idx.end(), rng);
    const double lr = lr_at(cfg.lr, epoch);

    double epoch_loss = 0.0;
    int epoch_steps = 0;
    for (size_t lo = 0; lo < idx.size() && !stop; lo += cfg.batch_size) {
      const size_t hi = std::min(idx.size(), lo + cfg.batch_size);
      Tensor<float> x;
      LabelMap labels;
      detail::make_batch(data, idx, lo, hi, x, labels);

      model.zero_grads();
      Tape<float> tape;
      float loss_value = 0.0f;
      {
        TapeScope<float> scope(tape);
        ForwardOutput<float> out = model.forward(x, Mode::kTrain);
        Tensor<float> loss = joint_loss(out, labels, cfg.loss_weights);
        loss_value = loss.item();
        if (!std::isfinite(loss_value))
          throw TrainingError("non-finite loss at step " + std::to_string(step + 1) +
                              "; last-good checkpoint retained");
        tape.backward(loss);
      }
      adam_step(params, adam, lr, cfg.weight_decay);
      ++step;
      ++epoch_steps;
      epoch_loss += loss_value;
      result.trace.push_back({step, epoch, lr, loss_value});
      if (cfg.max_steps > 0 && step >= cfg.max_steps) stop = true;
    }

    epochs_run = epoch + 1;
    result.epoch_mean_loss.push_back(epoch_loss / std::max(1, epoch_steps));
    if (val != nullptr) result.val_mean_f1.push_back(evaluate(model, *val, cfg.loss_weights).mean_foreground_f1);
    if (cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0 && !stop) {
      std::ostringstream name;
      name << "checkpoint_epoch" << std::setw(4) << std::setfill('0') << epoch + 1 << ".mpgn";
      save(name.str(), epoch + 1, step);
    }
  }

  result.checkpoint_path = save("checkpoint.mpgn", epochs_run, step);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    detail::write_loss_trace(result, out_dir + "/loss_trace.csv");
    detail::write_epoch_trace(result, out_dir + "/epoch_trace.csv");
  }
  return result;
}

inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                         const std::vector<Sample>& data, const std::vector<Sample>* val,
                         const std::string& out_dir) {
  ModelConfig mc = apply_ablation(model_cfg, cfg.ablation);
  Model<float> model = Model<float>::build(mc, cfg.seed);
  AdamState adam;
  adam.init(model.parameters());
  return train_model(model, adam, cfg, data, val, out_dir);
}

inline EvalReport evaluate_checkpoint(const std::string& checkpoint_path,
                                      const std::string& manifest_path,
                                      const std::string& out_csv) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  Model<float> model = model_from_checkpoint(ckpt);
  // load leniently, then compare label range against the checkpoint's K
  const std::vector<Sample> data = load_dataset(manifest_path, 256);
  const int K = model.config().class_count;
  int32_t max_label = 0;
  for (const Sample& s : data)
    for (int32_t v : s.labels.v) max_label = std::max(max_label, v);
  if (max_label >= K)
    throw ConfigError("class-count mismatch: checkpoint has K=" + std::to_string(K) +
                      " but labels in " + manifest_path + " reach " +
                      std::to_string(max_label));
  EvalReport report = evaluate(model, data);
  if (!out_csv.empty()) write_eval_csv(report, out_csv);
  return report;
}

// --- ablation harness ---------------------------------------------------------

struct AblateVariant {
  std::string name;
  long param_count = 0;
  EvalReport report;
};

struct AblateResult {
  std::vector<AblateVariant> table;  // baseline, frm, mpga, full — trained on seeds[0]
  std::vector<uint64_t> seeds;
  std::vector<double> baseline_mean_f1;  // per seed
  std::vector<double> full_mean_f1;      // per seed
};

namespace detail {

inline long parameter_count(const Model<float>& model) {
  long total = 0;
  for (const auto& p : model.parameters()) total += p.value.size();
  return total;
}

inline void write_ablation_csv(const AblateResult& r, int K, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << "variant";
  for (int k = 0; k < K; ++k) os << "," << layer_class_name(k, K);
  os << "\n" << std::setprecision(4) << std::fixed;
  for (const auto& v : r.table) {
    os << v.name;
    for (int k = 0; k < K; ++k) os << "," << v.report.per_class_f1[k];
    os << "\n";
  }
}

inline std::string ablation_text(const AblateResult& r, int K) {
  std::ostringstream os;
  os << std::setprecision(4) << std::fixed;
  os << std::left << std::setw(16) << "variant" << std::right << std::setw(12) << "params";
  for (int k = 0; k < K; ++k) os << std::setw(10) << layer_class_name(k, K);
  os << std::setw(10) << "mean_fg" << "\n";
  for (const auto& v : r.table) {
    os << std::left << std::setw(16) << v.name << std::right << std::setw(12) << v.param_count;
    for (int k = 0; k < K; ++k) os << std::setw(10) << v.report.per_class_f1[k];
    os << std::setw(10) << v.report.mean_foreground_f1 << "\n";
  }
  os << "\nmean foreground F1 across " << r.seeds.size() << " seed(s):\n";
  auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  };
  os << "  baseline:";
  for (double f : r.baseline_mean_f1) os << " " << f;
  os << "  -> mean " << mean(r.baseline_mean_f1) << "\n";
  os << "  full:    ";
  for (double f : r.full_mean_f1) os << " " << f;
  os << "  -> mean " << mean(r.full_mean_f1) << "\n";
  return os.str();
}

}  // namespace detail

// Trains the four ablation variants with identical budgets on the first
// seed to fill the table, then repeats baseline and full on the remaining
// seeds so their mean F1 can be reported side by side.
inline AblateResult ablate(const ModelConfig& base_cfg, const TrainConfig& train_cfg,
                           const std::vector<Sample>& data, const std::vector<uint64_t>& seeds,
                           const std::string& out_dir) {
  if (seeds.empty()) throw ConfigError("ablate requires at least one seed");
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  static const char* kVariants[4] = {"baseline", "frm", "mpga", "full"};

  AblateResult result;
  result.seeds = seeds;

  auto run = [&](const std::string& variant, uint64_t seed) {
    TrainConfig tc = train_cfg;
    tc.ablation = variant;
    tc.seed = seed;
    ModelConfig mc = apply_ablation(base_cfg, variant);
    Model<float> model = Model<float>::build(mc, seed);
    AdamState adam;
    adam.init(model.parameters());
    train_model(model, adam, tc, data, nullptr, "");
    AblateVariant v;
    v.name = variant;
    v.param_count = detail::parameter_count(model);
    v.report = evaluate(model, data, tc.loss_weights);
    return v;
  };

  for (const char* variant : kVariants) {
    AblateVariant v = run(variant, seeds[0]);
    if (v.name == "baseline") result.baseline_mean_f1.push_back(v.report.mean_foreground_f1);
    if (v.name == "full") result.full_mean_f1.push_back(v.report.mean_foreground_f1);
    result.table.push_back(std::move(v));
  }
  for (size_t i = 1; i < seeds.size(); ++i) {
    result.baseline_mean_f1.push_back(run("baseline", seeds[i]).report.mean_foreground_f1);
    result.full_mean_f1.push_back(run("full", seeds[i]).report.mean_foreground_f1);
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    detail::write_ablation_csv(result, base_cfg.class_count, out_dir + "/ablation.csv");
    std::ofstream os(out_dir + "/ablation.txt");
    os << detail::ablation_text(result, base_cfg.class_count);
  }
  return result;
}

}  // namespace mpg
