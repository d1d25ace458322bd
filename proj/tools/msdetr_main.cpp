// Copyright 2026 the msdetr authors
// SPDX-License-Identifier: Apache-2.0
//
// msdetr: fuse, train, evaluate, and benchmark the detection pipeline on the
// built-in synthetic dataset.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "msdetr/checkpoint.hpp"
#include "msdetr/dataset.hpp"
#include "msdetr/train.hpp"

namespace fs = std::filesystem;
using namespace msdetr;

namespace {

RunConfig load_config(const std::string& path, uint64_t seed_override, bool has_seed) {
  RunConfig rc = path.empty() ? RunConfig{} : RunConfig::parse_file(path);
  if (has_seed) {
    rc.seed = seed_override;
    rc.model.init_seed = seed_override;
  }
  rc.validate();
  return rc;
}

int cmd_gen(const RunConfig& rc, const std::string& out) {
  DatasetSplits splits = gen_dataset(rc);
  save_dataset(out + "/dataset/train", splits.train);
  save_dataset(out + "/dataset/val", splits.val);
  save_dataset(out + "/dataset/test", splits.test);
  std::ofstream cfg(out + "/dataset/run.cfg");
  cfg << rc.to_text();
  std::cout << "wrote " << splits.train.scenes.size() << " train / " << splits.val.scenes.size()
            << " val / " << splits.test.scenes.size() << " test images under " << out
            << "/dataset\n";
  return 0;
}

DatasetSplits load_splits(const std::string& data_dir) {
  DatasetSplits s;
  s.train = load_dataset(data_dir + "/train");
  s.val = load_dataset(data_dir + "/val");
  s.test = load_dataset(data_dir + "/test");
  return s;
}

int cmd_train(const RunConfig& rc, const std::string& out, const std::string& data_dir) {
  DatasetSplits splits = load_splits(data_dir);
  Model model = build<double>(rc.model);
  std::ofstream log_file(out + "/train_log.txt");
  const std::string ckpt = out + "/model.msdk";

  struct Tee : std::streambuf {
    std::streambuf *a, *b;
    int overflow(int c) override {
      if (c != EOF) {
        a->sputc(static_cast<char>(c));
        b->sputc(static_cast<char>(c));
      }
      return c;
    }
    int sync() override {
      a->pubsync();
      b->pubsync();
      return 0;
    }
  } tee;
  tee.a = std::cout.rdbuf();
  tee.b = log_file.rdbuf();
  std::ostream log(&tee);

  log << "training on " << splits.train.scenes.size() << " images, config seed " << rc.seed
      << "\n";
  TrainResult result = train_model(model, rc, splits, ckpt, log);

  nlohmann::json j;
  j["best_epoch"] = result.best_epoch;
  j["best_val_map50"] = result.best_map50;
  j["diverged"] = result.diverged;
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : result.log)
    epochs.push_back({{"epoch", e.epoch},
                      {"loss", e.loss},
                      {"cls", e.cls},
                      {"l1", e.l1},
                      {"giou", e.giou},
                      {"lr", e.lr},
                      {"val_map50", e.val_map50}});
  j["epochs"] = epochs;
  std::ofstream(out + "/train_result.json") << j.dump(2) << "\n";

  if (result.diverged) {
    std::cerr << result.message << "\n";
    return 1;
  }
  log << "best epoch " << result.best_epoch << " (val mAP@0.5 " << std::fixed
      << std::setprecision(4) << result.best_map50 << "), checkpoint: " << ckpt << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             const std::string& out, int64_t batch) {
  Model model = load_checkpoint<double>(ckpt);
  Dataset data = load_dataset(data_dir + "/" + split);
  MetricsReport rep = eval_metrics(model, data, batch);
  std::ofstream(out + "/metrics.json") << rep.to_json() << "\n";
  std::cout << rep.to_table();
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "wrote " << out << "/metrics.json\n";
  return 0;
}

int cmd_fuse(const std::string& ckpt, const std::string& out) {
  Model model = load_checkpoint<double>(ckpt);
  Model fused = fuse_model(model);

  // divergence report over random inputs at the smallest legal size
  const int64_t size = 16 * (int64_t(1) << (model.cfg.levels - 1));
  std::mt19937_64 rng(123);
  double max_div = 0.0;
  {
    autograd::NoGradGuard no_grad;
    for (int trial = 0; trial < 8; ++trial) {
      Tensor x = Tensor::uniform({1, 3, size, size}, rng, 0.0, 1.0);
      Detections a = model.forward(x);
      Detections b = fused.forward(x);
      for (size_t i = 0; i < a.class_logits.values().size(); ++i)
        max_div = std::max(max_div,
                           std::abs(a.class_logits.values()[i] - b.class_logits.values()[i]));
      for (size_t i = 0; i < a.boxes.values().size(); ++i)
        max_div = std::max(max_div, std::abs(a.boxes.values()[i] - b.boxes.values()[i]));
    }
  }
  const std::string fused_path = out + "/fused.msdk";
  save_checkpoint(fused_path, fused);

  nlohmann::json j;
  j["max_divergence"] = max_div;
  j["fused_checkpoint"] = fused_path;
  j["flops_unfused"] = model.flops(size, size);
  j["flops_fused"] = fused.flops(size, size);
  std::ofstream(out + "/fuse_report.json") << j.dump(2) << "\n";
  std::cout << "fused checkpoint: " << fused_path << "\n"
            << "max output divergence over 8 random inputs: " << std::scientific << max_div
            << "\n"
            << "flops: " << j["flops_unfused"] << " -> " << j["flops_fused"] << "\n";
  return max_div <= 1e-9 ? 0 : 1;
}

struct BenchStats {
  double median_ms = 0.0, p95_ms = 0.0, mean_ms = 0.0, fps = 0.0;
};

template <typename F>
BenchStats run_bench(F&& forward, int warmup, int iters) {
  for (int i = 0; i < warmup; ++i) forward();
  std::vector<double> ms;
  ms.reserve(static_cast<size_t>(iters));
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    forward();
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  BenchStats st;
  st.median_ms = sorted[sorted.size() / 2];
  st.p95_ms = sorted[static_cast<size_t>(0.95 * (sorted.size() - 1))];
  for (double v : ms) st.mean_ms += v;
  st.mean_ms /= static_cast<double>(ms.size());
  st.fps = 1000.0 / st.mean_ms;
  return st;
}

int cmd_bench(const std::string& ckpt, const RunConfig& rc, bool have_ckpt, const std::string& out,
              int warmup, int iters) {
  // benchmark mode runs in 32-bit
  ModelT<float> model = have_ckpt ? load_checkpoint<float>(ckpt) : build<float>(rc.model);
  ModelT<float> fused = fuse_model(model);
  const int64_t size = rc.image_size;
  std::mt19937_64 rng(99);
  TensorT<float> x = TensorT<float>::uniform({1, 3, size, size}, rng, 0.0f, 1.0f);

  autograd::NoGradGuard no_grad;
  BenchStats unfused_stats = run_bench([&] { (void)model.forward(x); }, warmup, iters);
  BenchStats fused_stats = run_bench([&] { (void)fused.forward(x); }, warmup, iters);

  nlohmann::json j;
  j["image_size"] = size;
  j["iterations"] = iters;
  j["warmup"] = warmup;
  j["unfused"] = {{"median_ms", unfused_stats.median_ms},
                  {"p95_ms", unfused_stats.p95_ms},
                  {"fps", unfused_stats.fps}};
  j["fused"] = {{"median_ms", fused_stats.median_ms},
                {"p95_ms", fused_stats.p95_ms},
                {"fps", fused_stats.fps}};
  j["flops_unfused"] = model.flops(size, size);
  j["flops_fused"] = fused.flops(size, size);
  std::ofstream(out + "/bench.json") << j.dump(2) << "\n";

  std::cout << std::fixed << std::setprecision(3);
  std::cout << "image " << size << "x" << size << ", " << warmup << " warmup + " << iters
            << " timed iterations (f32)\n";
  std::cout << "unfused: median " << unfused_stats.median_ms << " ms, p95 "
            << unfused_stats.p95_ms << " ms, " << std::setprecision(1) << unfused_stats.fps
            << " fps\n";
  std::cout << std::setprecision(3) << "fused:   median " << fused_stats.median_ms << " ms, p95 "
            << fused_stats.p95_ms << " ms, " << std::setprecision(1) << fused_stats.fps
            << " fps\n";
  std::cout << "analytic flops: " << model.flops(size, size) << " -> " << fused.flops(size, size)
            << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& base, const std::string& out, const std::string& data_dir,
               int64_t epochs) {
  DatasetSplits splits = load_splits(data_dir);
  std::ostringstream table;
  table << "rep   da    csff  train_loss  val_loss  val_map50  seconds\n";
  nlohmann::json rows = nlohmann::json::array();

  for (int mask = 0; mask < 8; ++mask) {
    RunConfig rc = base;
    rc.epochs = epochs;
    rc.stop_at_map50 = 0.0;
    rc.model.rep = mask & 1;
    rc.model.da = (mask & 2) != 0;
    rc.model.csff = (mask & 4) != 0;
    rc.validate();

    Model model = build<double>(rc.model);
    const auto t0 = std::chrono::steady_clock::now();
    std::ostringstream quiet;
    TrainResult res = train_model(model, rc, splits, out + "/ablate_tmp.msdk", quiet);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double train_loss = res.log.empty() ? -1.0 : res.log.back().loss;
    const double val_loss = dataset_loss(model, splits.val, rc.batch_size);
    const double val_map = res.log.empty() ? 0.0 : res.log.back().val_map50;

    auto mark = [](bool on) { return on ? "x    " : "-    "; };
    table << mark(rc.model.rep) << " " << mark(rc.model.da) << " " << mark(rc.model.csff)
          << std::fixed << std::setprecision(4) << std::setw(10) << train_loss << std::setw(10)
          << val_loss << std::setw(11) << val_map << std::setw(9) << std::setprecision(1) << secs
          << "\n";
    rows.push_back({{"rep", static_cast<bool>(rc.model.rep)},
                    {"da", static_cast<bool>(rc.model.da)},
                    {"csff", static_cast<bool>(rc.model.csff)},
                    {"train_loss", train_loss},
                    {"val_loss", val_loss},
                    {"val_map50", val_map},
                    {"seconds", secs}});
    std::cout << "finished combination " << (mask + 1) << "/8\n" << std::flush;
  }
  std::error_code ec;
  fs::remove(out + "/ablate_tmp.msdk", ec);
  fs::remove(out + "/ablate_tmp.msdk.last", ec);

  std::ofstream(out + "/ablate.txt") << table.str();
  std::ofstream(out + "/ablate.json") << rows.dump(2) << "\n";
  std::cout << table.str() << "wrote " << out << "/ablate.{txt,json}\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MSD-DETR detection pipeline: synthetic data, training, evaluation, fusion, "
               "benchmarking"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "run", data_dir, ckpt_path, split = "test";
  uint64_t seed = 0;
  bool has_seed = false;
  int64_t ablate_epochs = 3;
  int bench_warmup = 20, bench_iters = 100;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration file (key = value)");
    sub->add_option("--seed", seed, "override the config seed")->each([&](const std::string&) {
      has_seed = true;
    });
    sub->add_option("--out", out_dir, "output directory (default: run)");
  };

  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  auto* train = app.add_subcommand("train", "train a model on a generated dataset");
  train->add_option("--data", data_dir, "dataset directory (default: <out>/dataset)");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint and write metrics JSON");
  eval->add_option("--ckpt", ckpt_path, "checkpoint (default: <out>/model.msdk)");
  eval->add_option("--data", data_dir, "dataset directory (default: <out>/dataset)");
  eval->add_option("--split", split, "split to evaluate: train|val|test (default test)");
  auto* fuse = app.add_subcommand("fuse", "fuse rep blocks and report output divergence");
  fuse->add_option("--ckpt", ckpt_path, "checkpoint (default: <out>/model.msdk)");
  auto* bench = app.add_subcommand("bench", "latency of fused vs unfused forward (32-bit)");
  bench->add_option("--ckpt", ckpt_path, "checkpoint to benchmark (default: fresh init)");
  bench->add_option("--warmup", bench_warmup, "warmup iterations (default 20)");
  bench->add_option("--iters", bench_iters, "timed iterations (default 100)");
  auto* ablate = app.add_subcommand("ablate", "train all 8 toggle combinations briefly");
  ablate->add_option("--data", data_dir, "dataset directory (default: <out>/dataset)");
  ablate->add_option("--epochs", ablate_epochs, "epochs per combination (default 3)");

  for (auto* sub : {gen, train, eval, fuse, bench, ablate}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    fs::create_directories(out_dir);
    RunConfig rc = load_config(config_path, seed, has_seed);
    if (data_dir.empty()) data_dir = out_dir + "/dataset";
    if (ckpt_path.empty()) ckpt_path = out_dir + "/model.msdk";

    if (gen->parsed()) return cmd_gen(rc, out_dir);
    if (train->parsed()) return cmd_train(rc, out_dir, data_dir);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_dir, split, out_dir, rc.batch_size);
    if (fuse->parsed()) return cmd_fuse(ckpt_path, out_dir);
    if (bench->parsed())
      return cmd_bench(ckpt_path, rc, fs::exists(ckpt_path), out_dir, bench_warmup, bench_iters);
    if (ablate->parsed()) return cmd_ablate(rc, out_dir, data_dir, ablate_epochs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
