#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "spx/dataset.hpp"
#include "spx/model.hpp"

namespace spx {

struct TrainConfig {
  double base_lr = 1e-3;
  int warmup_steps = 100;
  int total_steps = 3000;
  double weight_decay = 0.05;
  double backbone_lr_mult = 0.1;
  double topk_frac = 0.2;
  int batch_size = 4;
  std::uint64_t seed = 7;
  double poly_power = 0.9;
  int eval_interval = 100;
  int checkpoint_interval = 0;  // 0 = final checkpoint only
  double stop_at_miou = -1.0;   // early stop once val mIoU reaches this

  void validate() const {
    check_cfg(topk_frac > 0.0 && topk_frac <= 1.0,
              "topk_frac must be in (0, 1]");
    check_cfg(warmup_steps >= 0 && warmup_steps < total_steps,
              "warmup_steps must be < total_steps");
    check_cfg(batch_size >= 1, "batch_size must be >= 1");
    check_cfg(eval_interval >= 1, "eval_interval must be >= 1");
    check_cfg(base_lr > 0.0, "base_lr must be > 0");
  }

  PolySchedule schedule() const {
    return {base_lr, warmup_steps, total_steps, poly_power};
  }
};

// Sharded dense evaluation; confusion counts are integers, so any shard
// split yields the same totals.
template <typename T>
IouReport evaluate(const Model<T>& model, const Dataset<T>& ds,
                   int n_threads = 1) {
  check(ds.meta.count > 0, "evaluate: empty dataset");
  n_threads = std::max(1, std::min<int>(n_threads, ds.meta.count));
  std::vector<ConfusionMatrix> partial(static_cast<std::size_t>(n_threads),
                                       ConfusionMatrix(ds.meta.n_classes));
  auto worker = [&](int tid) {
    for (int i = tid; i < ds.meta.count; i += n_threads) {
      IdMap pred = model.predict(ds.images[static_cast<std::size_t>(i)]);
      partial[static_cast<std::size_t>(tid)].add_map(
          pred, ds.labels[static_cast<std::size_t>(i)]);
    }
  };
  if (n_threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker, t);
    for (auto& t : threads) t.join();
  }
  ConfusionMatrix total(ds.meta.n_classes);
  for (const auto& p : partial) total.merge(p);
  return mean_iou(total);
}

template <typename T>
struct TrainResult {
  int steps_run = 0;
  double final_loss = 0.0;
  double best_val_miou = 0.0;
  int skipped_steps = 0;
  std::string checkpoint_path;
};

namespace detail {

template <typename T>
std::vector<CheckpointRecord> snapshot_records(Model<T>& model,
                                               const AdamW<T>& opt,
                                               int completed_steps) {
  std::vector<CheckpointRecord> records;
  auto reg = model.params();
  for (const auto& p : reg) records.push_back(to_record(p.name, p.tensor));
  for (std::size_t i = 0; i < reg.size(); ++i) {
    CheckpointRecord m;
    m.name = "opt.m." + reg[i].name;
    m.shape = reg[i].tensor.shape();
    m.data.assign(opt.m[i].begin(), opt.m[i].end());
    records.push_back(std::move(m));
    CheckpointRecord v;
    v.name = "opt.v." + reg[i].name;
    v.shape = reg[i].tensor.shape();
    v.data.assign(opt.v[i].begin(), opt.v[i].end());
    records.push_back(std::move(v));
  }
  CheckpointRecord step;
  step.name = "trainer.step";
  step.shape = {1};
  step.data = {static_cast<float>(completed_steps)};
  records.push_back(std::move(step));
  CheckpointRecord t;
  t.name = "trainer.adam_t";
  t.shape = {1};
  t.data = {static_cast<float>(opt.t)};
  records.push_back(std::move(t));
  return records;
}

}  // namespace detail

// Restores parameters and optimizer state; returns the number of completed
// steps.
template <typename T>
int load_training_state(Model<T>& model, AdamW<T>& opt,
                        const std::string& path) {
  auto records = read_checkpoint(path);
  load_params(model, records);
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  auto reg = model.params();
  opt.init(reg);
  for (std::size_t i = 0; i < reg.size(); ++i) {
    auto mi = by_name.find("opt.m." + reg[i].name);
    auto vi = by_name.find("opt.v." + reg[i].name);
    if (mi == by_name.end() || vi == by_name.end()) continue;  // params-only
    opt.m[i].assign(mi->second->data.begin(), mi->second->data.end());
    opt.v[i].assign(vi->second->data.begin(), vi->second->data.end());
  }
  if (auto it = by_name.find("trainer.adam_t"); it != by_name.end())
    opt.t = static_cast<std::int64_t>(it->second->data[0]);
  if (auto it = by_name.find("trainer.step"); it != by_name.end())
    return static_cast<int>(it->second->data[0]);
  return 0;
}

// Training loop: per-step batches are drawn from a per-step RNG stream, so
// a resumed run replays exactly the same trajectory. Logs one JSON line per
// step to metrics.jsonl and per-eval results to eval.jsonl under out_dir.
template <typename T>
TrainResult<T> train(Model<T>& model, const TrainConfig& cfg,
                     const Dataset<T>& train_ds, const Dataset<T>* val_ds,
                     const std::string& out_dir, AdamW<T>* resumed_opt = nullptr,
                     int start_step = 0, int eval_threads = 1) {
  cfg.validate();
  check(train_ds.meta.count > 0 || cfg.total_steps == start_step,
        "train: empty training dataset");
  std::filesystem::create_directories(out_dir);
  std::ofstream metrics(out_dir + "/metrics.jsonl",
                        start_step == 0 ? std::ios::trunc : std::ios::app);
  std::ofstream evals(out_dir + "/eval.jsonl",
                      start_step == 0 ? std::ios::trunc : std::ios::app);
  check(metrics.good() && evals.good(),
        "train: cannot open log files under " + out_dir);

  auto reg = model.params();
  AdamW<T> local_opt;
  AdamW<T>* opt = resumed_opt ? resumed_opt : &local_opt;
  if (!resumed_opt) opt->init(reg);

  TrainResult<T> result;
  result.steps_run = start_step;
  const PolySchedule sched = cfg.schedule();

  auto write_ckpt = [&](int completed) {
    std::ostringstream name;
    name << out_dir << "/ckpt_" << std::setw(6) << std::setfill('0')
         << completed << ".spxf";
    write_checkpoint(name.str(), detail::snapshot_records(model, *opt, completed));
    result.checkpoint_path = name.str();
  };

  if (cfg.total_steps == 0 || start_step >= cfg.total_steps) {
    write_ckpt(start_step);
    return result;
  }

  for (int step = start_step + 1; step <= cfg.total_steps; ++step) {
    const double lr = poly_lr(step, sched);
    // deterministic per-step batch
    Pcg32 batch_rng(cfg.seed, 2000 + static_cast<std::uint64_t>(step));
    std::vector<int> batch(static_cast<std::size_t>(cfg.batch_size));
    for (auto& b : batch)
      b = static_cast<int>(batch_rng.uniform_int(
          static_cast<std::uint32_t>(train_ds.meta.count)));

    for (auto& p : reg) p.tensor.zero_grad();
    Tape<T> tape;
    double loss_value;
    {
      typename Tape<T>::Scope scope(tape);
      Tensor<T> loss_acc;
      for (int b : batch) {
        const auto& img = train_ds.images[static_cast<std::size_t>(b)];
        const auto& lab = train_ds.labels[static_cast<std::size_t>(b)];
        auto fwd = model.forward(img);
        std::vector<int> labels(lab.ids.begin(), lab.ids.end());
        Tensor<T> loss =
            topk_cross_entropy(fwd.pred.logits, labels, cfg.topk_frac);
        loss_acc = loss_acc.defined() ? add(loss_acc, loss) : loss;
      }
      Tensor<T> loss = scale(loss_acc, T(1) / static_cast<T>(cfg.batch_size));
      loss_value = static_cast<double>(loss.data()[0]);
      if (!std::isfinite(loss_value)) {
        std::ostringstream dump;
        dump << "train: non-finite loss at step " << step << "; batch = [";
        for (std::size_t i = 0; i < batch.size(); ++i)
          dump << (i ? "," : "") << batch[i];
        dump << "], lr = " << lr;
        for (const auto& p : reg) {
          double mx = 0;
          for (T v : p.tensor.data())
            mx = std::max(mx, std::abs(static_cast<double>(v)));
          if (!std::isfinite(mx)) dump << "; param " << p.name << " non-finite";
        }
        std::cerr << dump.str() << "\n";
        throw std::runtime_error(dump.str());
      }
      tape.backward(loss);
    }
    opt->step(reg, lr, cfg.weight_decay, cfg.backbone_lr_mult);

    metrics << "{\"step\":" << step << ",\"lr\":" << std::setprecision(17) << lr
            << ",\"loss\":" << loss_value << "}\n";
    result.final_loss = loss_value;
    result.steps_run = step;

    bool stop = false;
    if (val_ds && (step % cfg.eval_interval == 0 || step == cfg.total_steps)) {
      IouReport rep = evaluate(model, *val_ds, eval_threads);
      evals << "{\"step\":" << step << ",\"val_miou\":" << std::setprecision(17)
            << rep.mean << "}\n";
      evals.flush();
      result.best_val_miou = std::max(result.best_val_miou, rep.mean);
      if (cfg.stop_at_miou > 0 && rep.mean >= cfg.stop_at_miou) stop = true;
    }
    if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 &&
        step != cfg.total_steps)
      write_ckpt(step);
    if (stop || step == cfg.total_steps) {
      write_ckpt(step);
      break;
    }
  }
  result.skipped_steps = opt->skipped_steps;
  metrics.flush();
  return result;
}

}  // namespace spx
