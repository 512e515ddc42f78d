#include "sprune/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sprune/error.hpp"
#include "sprune/log.hpp"
#include "sprune/version.hpp"

namespace sprune {

using nlohmann::json;

PipelineConfig::PipelineConfig() {
  schedule.base_epochs = schedule.effective_epochs = 15;
  schedule.lr0 = 0.05;
  schedule.batch_size = 64;
  importance.batch_size = 16;
  baseline = schedule;
  baseline.base_epochs = baseline.effective_epochs = 20;
}

void validate(const PipelineConfig& cfg) {
  require(cfg.budget > 0 && cfg.budget <= 1, ErrorKind::config, "budget ratio must lie in (0, 1]");
  require(cfg.expand > 0, ErrorKind::config, "expansion multiplier must be positive");
  const auto names = preset_names();
  require(std::find(names.begin(), names.end(), cfg.arch) != names.end(), ErrorKind::config,
          "unknown architecture preset '" + cfg.arch + "'");
  require(!cfg.seeds.empty(), ErrorKind::config, "at least one seed is required");
  require(cfg.search.max_iters >= 1 && cfg.search.rel_tolerance > 0, ErrorKind::config,
          "search needs max_iters >= 1 and a positive tolerance");
  ImportanceConfig imp = cfg.importance;
  imp.target_sparsity = cfg.target_sparsity();
  try {
    validate(imp);
    validate(cfg.schedule);
    validate(cfg.baseline);
  } catch (const Error& e) {
    fail(ErrorKind::config, e.what());
  }
  for (int e : cfg.checkpoint_epochs) require(e >= 1, ErrorKind::config, "checkpoint epochs must be >= 1");
  require(cfg.dataset.spec == "synth" || cfg.dataset.spec.rfind("cifar10:", 0) == 0,
          ErrorKind::config, "dataset must be 'synth' or 'cifar10:<path>'");
}

namespace {

json schedule_json(const TrainSchedule& s) {
  return {{"base_epochs", s.base_epochs},
          {"optimizer", std::string(to_string(s.optimizer))},
          {"lr_policy", std::string(to_string(s.lr_policy))},
          {"lr0", s.lr0},
          {"momentum", s.sgd.momentum},
          {"weight_decay", s.sgd.weight_decay},
          {"milestones", s.milestones},
          {"decay", s.decay},
          {"batch_size", s.batch_size},
          {"label_smoothing", s.label_smoothing}};
}

// Applies the keys of `j` onto `obj`; every key must be known.
class Overlay {
 public:
  Overlay(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    require(j_.is_object(), ErrorKind::config, where_ + " must be an object");
  }
  template <typename T>
  Overlay& field(const char* key, T& dst) {
    seen_.push_back(key);
    if (j_.contains(key)) {
      try {
        dst = j_.at(key).get<T>();
      } catch (const json::exception& e) {
        fail(ErrorKind::config, where_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }
  template <typename F>
  Overlay& custom(const char* key, F&& apply) {
    seen_.push_back(key);
    if (j_.contains(key)) apply(j_.at(key));
    return *this;
  }
  void done() const {
    for (const auto& [k, v] : j_.items()) {
      require(std::find(seen_.begin(), seen_.end(), k) != seen_.end(), ErrorKind::config,
              "unknown key '" + k + "' in " + where_);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

void overlay_schedule(const json& j, TrainSchedule& s, const std::string& where) {
  Overlay o(j, where);
  std::string opt(to_string(s.optimizer)), policy(to_string(s.lr_policy));
  o.field("base_epochs", s.base_epochs)
      .field("optimizer", opt)
      .field("lr_policy", policy)
      .field("lr0", s.lr0)
      .field("momentum", s.sgd.momentum)
      .field("weight_decay", s.sgd.weight_decay)
      .field("milestones", s.milestones)
      .field("decay", s.decay)
      .field("batch_size", s.batch_size)
      .field("label_smoothing", s.label_smoothing)
      .done();
  s.optimizer = optimizer_from_string(opt);
  s.lr_policy = lr_policy_from_string(policy);
  s.effective_epochs = s.base_epochs;
}

}  // namespace

std::string config_to_json(const PipelineConfig& c) {
  json j{{"arch", c.arch},
         {"expand", c.expand},
         {"budget", c.budget},
         {"sparsity_r", c.sparsity_r ? json(*c.sparsity_r) : json()},
         {"importance",
          {{"gamma", c.importance.gamma},
           {"epochs", c.importance.epochs},
           {"lr", c.importance.lr},
           {"batch_size", c.importance.batch_size},
           {"penalty", c.importance.penalty == PenaltyKind::l1 ? "l1" : "squared_mean"},
           {"evals_per_epoch", c.importance.evals_per_epoch}}},
         {"search", {{"max_iters", c.search.max_iters}, {"tolerance", c.search.rel_tolerance}}},
         {"schedule", schedule_json(c.schedule)},
         {"budget_training", c.budget_training},
         {"baseline", schedule_json(c.baseline)},
         {"checkpoint_epochs", c.checkpoint_epochs},
         {"lottery_init", c.lottery_init},
         {"require_convergence", c.require_convergence},
         {"dataset", c.dataset.spec},
         {"synth",
          {{"classes", c.dataset.synth.classes},
           {"per_class", c.dataset.synth.per_class},
           {"size", c.dataset.synth.size},
           {"channels", c.dataset.synth.channels},
           {"noise", c.dataset.synth.noise},
           {"task_seed", c.dataset.synth.task_seed}}},
         {"val_per_class", c.dataset.val_per_class},
         {"test_per_class", c.dataset.test_per_class},
         {"seeds", c.seeds},
         {"out", c.out}};
  return j.dump(2);
}

PipelineConfig config_from_json(const std::string& text, const PipelineConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::config, std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c = base;
  Overlay(j, "config")
      .field("arch", c.arch)
      .field("expand", c.expand)
      .field("budget", c.budget)
      .custom("sparsity_r",
              [&](const json& v) {
                if (v.is_null()) {
                  c.sparsity_r.reset();
                } else {
                  require(v.is_number(), ErrorKind::config, "sparsity_r must be a number or null");
                  c.sparsity_r = v.get<double>();
                }
              })
      .custom("importance",
              [&](const json& v) {
                std::string penalty = c.importance.penalty == PenaltyKind::l1 ? "l1" : "squared_mean";
                Overlay(v, "importance")
                    .field("gamma", c.importance.gamma)
                    .field("epochs", c.importance.epochs)
                    .field("lr", c.importance.lr)
                    .field("batch_size", c.importance.batch_size)
                    .field("penalty", penalty)
                    .field("evals_per_epoch", c.importance.evals_per_epoch)
                    .done();
                require(penalty == "l1" || penalty == "squared_mean", ErrorKind::config,
                        "importance.penalty must be 'squared_mean' or 'l1'");
                c.importance.penalty = penalty == "l1" ? PenaltyKind::l1 : PenaltyKind::squared_mean;
              })
      .custom("search",
              [&](const json& v) {
                Overlay(v, "search")
                    .field("max_iters", c.search.max_iters)
                    .field("tolerance", c.search.rel_tolerance)
                    .done();
              })
      .custom("schedule", [&](const json& v) { overlay_schedule(v, c.schedule, "schedule"); })
      .field("budget_training", c.budget_training)
      .custom("baseline", [&](const json& v) { overlay_schedule(v, c.baseline, "baseline"); })
      .field("checkpoint_epochs", c.checkpoint_epochs)
      .field("lottery_init", c.lottery_init)
      .field("require_convergence", c.require_convergence)
      .field("dataset", c.dataset.spec)
      .custom("synth",
              [&](const json& v) {
                Overlay(v, "synth")
                    .field("classes", c.dataset.synth.classes)
                    .field("per_class", c.dataset.synth.per_class)
                    .field("size", c.dataset.synth.size)
                    .field("channels", c.dataset.synth.channels)
                    .field("noise", c.dataset.synth.noise)
                    .field("task_seed", c.dataset.synth.task_seed)
                    .done();
              })
      .field("val_per_class", c.dataset.val_per_class)
      .field("test_per_class", c.dataset.test_per_class)
      .field("seeds", c.seeds)
      .field("out", c.out)
      .done();
  return c;
}

PipelineConfig load_config(const std::string& path, const PipelineConfig& base) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorKind::io, "cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return config_from_json(ss.str(), base);
}

DataSplits load_data(const DatasetSource& source, std::uint64_t seed) {
  if (source.spec == "synth") {
    return synth_splits(source.synth, source.val_per_class, source.test_per_class,
                        source.synth.task_seed * 1000003ull + 1);
  }
  require(source.spec.rfind("cifar10:", 0) == 0, ErrorKind::config,
          "unknown dataset '" + source.spec + "'");
  TrainTestPair pair = load_cifar10(source.spec.substr(8));
  auto [train, val] = make_validation_split(pair.train, source.val_per_class, seed);
  return {std::move(train), std::move(val), std::move(pair.test)};
}

ArchSpec pipeline_arch(const PipelineConfig& cfg, const Dataset& data) {
  const ArchSpec base =
      make_preset(cfg.arch, data.channels(), data.height(), data.width(), data.class_count);
  return expand_channels(base, cfg.expand);
}

PruneOutcome run_prune(const PipelineConfig& cfg, const DataSplits& data, std::uint64_t seed) {
  validate(cfg);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  require(!ec && fs::is_directory(cfg.out), ErrorKind::io, "cannot create output directory " + cfg.out);

  PruneOutcome outcome;
  RunRecord& rec = outcome.record;
  rec.tool_version = kToolVersion;
  rec.config_json = config_to_json(cfg);
  rec.config_hash = content_hash(rec.config_json);
  rec.seeds = {seed};
  rec.arch_name = cfg.arch;
  const std::string stem = (fs::path(cfg.out) / ("seed" + std::to_string(seed))).string();
  outcome.record_path = stem + ".rec";

  std::string stage = "setup";
  try {
    const ArchSpec arch = pipeline_arch(cfg, data.train);
    const GatePlacement placement = place_gates(arch);
    rec.gated_layer_ids = placement.layer_ids;
    rec.original_widths = gated_widths(arch, placement);
    rec.full_flops = count_flops(arch);

    stage = "importance";
    Network model = generate_model(arch, seed);
    const Network init = model;
    ImportanceConfig imp = cfg.importance;
    imp.target_sparsity = cfg.target_sparsity();
    rec.trajectory = learn_channel_importance(model, data.train, data.val, imp, seed);

    stage = "selection";
    rec.selected_snapshot = select_best_snapshot(rec.trajectory, imp.target_sparsity);

    stage = "search";
    SearchConfig search = cfg.search;
    search.budget = static_cast<std::int64_t>(std::llround(cfg.budget * rec.full_flops));
    rec.search = search_structure(rec.trajectory[*rec.selected_snapshot].gates, arch, search);
    if (!rec.search->converged) log_warning(rec.search->diagnostics);

    stage = "training";
    Network pruned = cfg.lottery_init ? lottery_slice_init(init, rec.search->config)
                                      : generate_model(arch, rec.search->config, seed);
    TrainSchedule sched = cfg.schedule;
    sched.effective_epochs =
        cfg.budget_training
            ? budget_epochs(sched.base_epochs, rec.full_flops, rec.search->achieved_flops)
            : sched.base_epochs;
    rec.reports.push_back(train_network(pruned, data, sched, seed));
    const std::string metrics = stem + "_metrics.csv";
    write_metrics_csv(rec.reports.back(), metrics);
    rec.files.push_back(metrics);
  } catch (const Error& e) {
    rec.failed_stage = stage;
    rec.failure_message = e.what();
    rec.sealed = false;
    rec.files.erase(std::remove_if(rec.files.begin(), rec.files.end(),
                                   [](const std::string& f) { return !fs::exists(f); }),
                    rec.files.end());
    seal(rec);
    save_run(rec, outcome.record_path);
    fail(e.kind(), "stage '" + stage + "' failed: " + e.what());
  }

  seal(rec);
  save_run(rec, outcome.record_path);
  outcome.converged = rec.search->converged;
  outcome.flops_ratio = static_cast<double>(rec.search->achieved_flops) / rec.full_flops;
  outcome.test_accuracy = rec.reports.back().test_accuracy;
  return outcome;
}

StudyConfig study_config(const PipelineConfig& cfg) {
  StudyConfig s;
  s.arch = cfg.arch;
  s.expand = cfg.expand;
  s.budget_ratio = cfg.budget;
  s.checkpoint_epochs = cfg.checkpoint_epochs;
  s.seeds = cfg.seeds;
  s.importance = cfg.importance;
  s.importance.target_sparsity = cfg.target_sparsity();
  s.search = cfg.search;
  s.baseline = cfg.baseline;
  s.scratch = cfg.schedule;
  s.budget_training = cfg.budget_training;
  return s;
}

}  // namespace sprune
