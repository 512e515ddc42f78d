#include "cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sprune/error.hpp"
#include "sprune/log.hpp"
#include "sprune/pipeline.hpp"

namespace sprune::cli {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Flag values, applied over the config only when given on the command line.
struct Flags {
  std::string config_path;
  std::string arch, dataset, out;
  double expand = 0, budget = 0, gamma = 0, sparsity_r = 0, tolerance = 0;
  int epochs = 0, gate_epochs = 0, max_iters = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<int> checkpoint_epochs;
  bool lottery_init = false, no_budget_training = false, allow_unconverged = false;
};

struct Options {
  CLI::Option* config = nullptr;
  CLI::Option *arch = nullptr, *dataset = nullptr, *out = nullptr, *expand = nullptr,
              *budget = nullptr, *gamma = nullptr, *sparsity_r = nullptr, *tolerance = nullptr,
              *epochs = nullptr, *gate_epochs = nullptr, *max_iters = nullptr, *seed = nullptr,
              *seeds = nullptr, *checkpoints = nullptr, *lottery = nullptr, *no_budget = nullptr,
              *allow_unconverged = nullptr;
};

Options add_pipeline_flags(CLI::App& app, Flags& f) {
  Options o;
  o.config = app.add_option("--config", f.config_path, "JSON config file");
  o.arch = app.add_option("--arch", f.arch, "architecture preset");
  o.expand = app.add_option("--expand", f.expand, "channel expansion multiplier");
  o.budget = app.add_option("--budget", f.budget, "FLOPS budget as a fraction of the full model");
  o.gamma = app.add_option("--gamma", f.gamma, "sparsity penalty weight");
  o.sparsity_r = app.add_option("--sparsity-r", f.sparsity_r, "target mean gate value");
  o.epochs = app.add_option("--epochs", f.epochs, "base training epochs for pruned models");
  o.gate_epochs = app.add_option("--gate-epochs", f.gate_epochs, "importance learning epochs");
  o.seed = app.add_option("--seed", f.seed, "single seed");
  o.seeds = app.add_option("--seeds", f.seeds, "seed list")->delimiter(',');
  o.dataset = app.add_option("--dataset", f.dataset, "synth or cifar10:<dir>");
  o.out = app.add_option("--out", f.out, "output directory");
  o.lottery = app.add_flag("--lottery-init", f.lottery_init, "keep surviving initial weights");
  o.tolerance = app.add_option("--tolerance", f.tolerance, "relative FLOPS tolerance of the search");
  o.max_iters = app.add_option("--max-iters", f.max_iters, "search iteration cap");
  o.checkpoints =
      app.add_option("--checkpoint-epochs", f.checkpoint_epochs, "baseline checkpoint epochs")
          ->delimiter(',');
  o.no_budget = app.add_flag("--no-budget-training", f.no_budget_training,
                             "train pruned models for the base epochs only");
  o.allow_unconverged = app.add_flag("--allow-unconverged", f.allow_unconverged,
                                     "exit 0 even when the search misses the budget");
  o.seed->excludes(o.seeds);
  return o;
}

PipelineConfig resolve(const Flags& f, const Options& o) {
  PipelineConfig c;
  if (*o.config) c = load_config(f.config_path, c);
  if (*o.arch) c.arch = f.arch;
  if (*o.expand) c.expand = f.expand;
  if (*o.budget) c.budget = f.budget;
  if (*o.gamma) c.importance.gamma = f.gamma;
  if (*o.sparsity_r) c.sparsity_r = f.sparsity_r;
  if (*o.epochs) c.schedule.base_epochs = c.schedule.effective_epochs = f.epochs;
  if (*o.gate_epochs) c.importance.epochs = f.gate_epochs;
  if (*o.seed) c.seeds = {f.seed};
  if (*o.seeds) c.seeds = f.seeds;
  if (*o.dataset) c.dataset.spec = f.dataset;
  if (*o.out) c.out = f.out;
  if (*o.lottery) c.lottery_init = f.lottery_init;
  if (*o.tolerance) c.search.rel_tolerance = f.tolerance;
  if (*o.max_iters) c.search.max_iters = f.max_iters;
  if (*o.checkpoints) c.checkpoint_epochs = f.checkpoint_epochs;
  if (*o.no_budget) c.budget_training = !f.no_budget_training;
  if (*o.allow_unconverged) c.require_convergence = !f.allow_unconverged;
  validate(c);
  return c;
}

int cmd_prune(const PipelineConfig& cfg, std::ostream& out, std::ostream& err) {
  int code = kOk;
  for (std::uint64_t seed : cfg.seeds) {
    const DataSplits data = load_data(cfg.dataset, seed);
    try {
      const PruneOutcome r = run_prune(cfg, data, seed);
      const SearchResult& s = *r.record.search;
      out << "seed " << seed << ": flops_ratio " << fmt(r.flops_ratio) << " tau " << fmt(s.tau_star)
          << " iterations " << s.iterations << (s.converged ? " converged" : " not-converged")
          << " test_acc " << fmt(r.test_accuracy) << " record " << r.record_path << "\n";
      out << "  kept";
      for (int k : s.config.kept_counts()) out << " " << k;
      out << "\n";
      if (!s.converged && cfg.require_convergence && code == kOk) code = kNotConverged;
    } catch (const Error& e) {
      err << "seed " << seed << ": " << e.what() << "\n";
      code = kFailed;
    }
  }
  return code;
}

int cmd_study(const PipelineConfig& cfg, std::ostream& out) {
  const DataSplits data = load_data(cfg.dataset, cfg.seeds.front());
  const StudyBundle bundle = run_pretrain_effect_study(study_config(cfg), data);
  for (const auto& path : emit_report(bundle, cfg.out)) out << "wrote " << path << "\n";
  for (const auto& row : bundle.summary) {
    out << row.label << ": acc " << fmt(row.mean_acc) << " +- " << fmt(row.std_acc) << " flops_ratio "
        << fmt(row.flops_ratio) << " runs " << row.runs << "\n";
  }
  if (cfg.seeds.size() >= 2) {
    const SimilarityTrend t = similarity_trend(bundle, 1);
    out << "cross-seed correlation: checkpoints " << fmt(t.checkpoint_cross_seed) << " ("
        << t.checkpoint_pairs << " pairs), random " << fmt(t.random_cross_seed) << " ("
        << t.random_pairs << " pairs)\n";
  }
  return kOk;
}

int cmd_train_baseline(const PipelineConfig& cfg, std::ostream& out) {
  fs::create_directories(cfg.out);
  for (std::uint64_t seed : cfg.seeds) {
    const DataSplits data = load_data(cfg.dataset, seed);
    const ArchSpec arch = pipeline_arch(cfg, data.train);
    Network net = generate_model(arch, seed);
    const std::string stem = (fs::path(cfg.out) / ("baseline_seed" + std::to_string(seed))).string();
    save_checkpoint(net, stem + "_epoch0.ckpt");
    auto hook = [&](int epoch, const Network& n) {
      for (int e : cfg.checkpoint_epochs) {
        if (e == epoch) {
          const std::string path = stem + "_epoch" + std::to_string(epoch) + ".ckpt";
          save_checkpoint(n, path);
          out << "wrote " << path << "\n";
        }
      }
    };
    const TrainReport rep = train_network(net, data, cfg.baseline, seed, hook);
    write_metrics_csv(rep, stem + "_metrics.csv");
    save_checkpoint(net, stem + "_final.ckpt");
    out << "seed " << seed << ": test_acc " << fmt(rep.test_accuracy) << " checkpoints " << stem
        << "_*.ckpt\n";
  }
  return kOk;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path.string());
}

}  // namespace

int inspect(const std::string& record_path, const std::string& csv_dir, std::ostream& out,
            std::ostream& err) {
  const RunRecord rec = load_run(record_path);
  out << "record " << record_path << "\n"
      << "tool_version " << rec.tool_version << "\narch " << rec.arch_name << "\nconfig_hash "
      << rec.config_hash << "\nfull_flops " << rec.full_flops << "\n";

  std::ostringstream kept, traj;
  kept << "layer_id,kept,original\n";
  if (rec.search) {
    const auto counts = rec.search->config.kept_counts();
    for (std::size_t i = 0; i < counts.size(); ++i) {
      kept << rec.gated_layer_ids[i] << "," << counts[i] << "," << rec.original_widths[i] << "\n";
    }
  }
  traj << "epoch,step,sparsity,val_accuracy,selected\n";
  for (std::size_t i = 0; i < rec.trajectory.size(); ++i) {
    const auto& s = rec.trajectory[i];
    traj << s.epoch << "," << s.gates.step << "," << fmt(s.sparsity()) << "," << fmt(s.val_accuracy)
         << "," << (rec.selected_snapshot == i ? 1 : 0) << "\n";
  }
  out << "\n[kept_counts]\n" << kept.str() << "\n[trajectory]\n" << traj.str();
  std::vector<std::string> curves;
  for (const auto& rep : rec.reports) curves.push_back(metrics_csv(rep));
  for (std::size_t i = 0; i < curves.size(); ++i) out << "\n[training_" << i << "]\n" << curves[i];
  if (rec.search) {
    out << "\ntau " << fmt(rec.search->tau_star) << "\nachieved_flops " << rec.search->achieved_flops
        << "\nconverged " << (rec.search->converged ? "yes" : "no") << "\n";
  }

  if (!csv_dir.empty()) {
    fs::create_directories(csv_dir);
    write_file(fs::path(csv_dir) / "kept_counts.csv", kept.str());
    write_file(fs::path(csv_dir) / "trajectory.csv", traj.str());
    for (std::size_t i = 0; i < curves.size(); ++i) {
      write_file(fs::path(csv_dir) / ("training_" + std::to_string(i) + ".csv"), curves[i]);
    }
  }

  if (rec.failed()) {
    out << "\nfailed_stage " << rec.failed_stage << "\n";
    err << "run failed in stage '" << rec.failed_stage << "': " << rec.failure_message << "\n";
    return kFailed;
  }
  return kOk;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Channel pruning from randomly initialized weights", "sprune"};
  app.require_subcommand(1);

  Flags prune_f, study_f, base_f;
  auto* prune = app.add_subcommand("prune", "learn gates, search a structure, train it from scratch");
  const Options prune_o = add_pipeline_flags(*prune, prune_f);
  auto* study = app.add_subcommand("study", "compare structures pruned from random and trained weights");
  const Options study_o = add_pipeline_flags(*study, study_f);
  auto* base = app.add_subcommand("train-baseline", "train the full model and save checkpoints");
  const Options base_o = add_pipeline_flags(*base, base_f);
  std::string record_path, csv_dir;
  auto* insp = app.add_subcommand("inspect", "print a saved run record");
  insp->add_option("record", record_path, "run record")->required();
  insp->add_option("--csv-dir", csv_dir, "also write the views as CSV files");
  auto* dump = app.add_subcommand("dump-config", "print the resolved config as JSON");
  Flags dump_f;
  const Options dump_o = add_pipeline_flags(*dump, dump_f);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (*insp) return inspect(record_path, csv_dir, out, err);
    if (*prune) return cmd_prune(resolve(prune_f, prune_o), out, err);
    if (*study) return cmd_study(resolve(study_f, study_o), out);
    if (*base) return cmd_train_baseline(resolve(base_f, base_o), out);
    if (*dump) {
      out << config_to_json(resolve(dump_f, dump_o)) << "\n";
      return kOk;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::config ? kUsage : kFailed;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}

}  // namespace sprune::cli
