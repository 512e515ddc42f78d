#include "sprune/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "sprune/error.hpp"
#include "sprune/log.hpp"

namespace sprune {

StructureFeature structure_feature(const ChannelConfig& config, const ArchSpec& base,
                                   std::string label, std::uint64_t seed, int epoch) {
  const GatePlacement placement = place_gates(base);
  check_config(base, placement, config);
  const auto widths = gated_widths(base, placement);
  StructureFeature f;
  f.label = std::move(label);
  f.seed = seed;
  f.epoch = epoch;
  for (std::size_t j = 0; j < widths.size(); ++j) {
    f.ratios.push_back(static_cast<double>(config.kept_indices[j].size()) / widths[j]);
  }
  return f;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && !a.empty(), ErrorKind::dimension,
          "pearson needs two non-empty vectors of equal length");
  const auto n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

SimilarityMatrix correlation_matrix(std::span<const StructureFeature> features) {
  require(features.size() >= 2, ErrorKind::precondition,
          "correlation matrix needs at least two features");
  const std::size_t len = features[0].ratios.size();
  for (const auto& f : features) {
    require(f.ratios.size() == len && len > 0, ErrorKind::dimension,
            "feature '" + f.label + "' has length " + std::to_string(f.ratios.size()) +
                ", expected " + std::to_string(len));
    const auto [lo, hi] = std::minmax_element(f.ratios.begin(), f.ratios.end());
    require(*hi - *lo > 0, ErrorKind::degenerate_feature,
            "feature '" + f.label + "' has zero variance (uniform pruning)");
  }
  SimilarityMatrix m;
  const std::size_t n = features.size();
  m.values.assign(n, std::vector<double>(n, 1.0));
  for (const auto& f : features) m.labels.push_back(f.label);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      m.values[i][j] = m.values[j][i] = pearson(features[i].ratios, features[j].ratios);
    }
  return m;
}

double mean_pairwise(const SimilarityMatrix& m,
                     const std::function<bool(std::size_t, std::size_t)>& include) {
  double sum = 0;
  int count = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = i + 1; j < m.size(); ++j) {
      if (include && !include(i, j)) continue;
      sum += m.values[i][j];
      ++count;
    }
  return count ? sum / count : std::nan("");
}

std::string source_label(int epoch) {
  return epoch == 0 ? "random" : "epoch" + std::to_string(epoch);
}

namespace {

std::string structure_label(std::uint64_t seed, int epoch) {
  return "seed" + std::to_string(seed) + ":" + source_label(epoch);
}

}  // namespace

StudyBundle run_pretrain_effect_study(const StudyConfig& cfg, const DataSplits& data) {
  require(!cfg.seeds.empty(), ErrorKind::precondition, "study needs at least one seed");
  require(cfg.budget_ratio > 0 && cfg.budget_ratio <= 1, ErrorKind::precondition,
          "budget ratio must lie in (0, 1]");
  std::vector<int> epochs = cfg.checkpoint_epochs;
  epochs.push_back(0);  // the random initialization is always a source
  std::sort(epochs.begin(), epochs.end());
  epochs.erase(std::unique(epochs.begin(), epochs.end()), epochs.end());
  require(epochs.front() >= 0, ErrorKind::precondition, "checkpoint epochs must be >= 0");

  StudyBundle bundle;
  const ArchSpec base = make_preset(cfg.arch, data.train.channels(), data.train.height(),
                                    data.train.width(), data.train.class_count);
  bundle.arch = expand_channels(base, cfg.expand);
  bundle.placement = place_gates(bundle.arch);
  bundle.full_flops = count_flops(bundle.arch);
  SearchConfig search = cfg.search;
  search.budget = static_cast<std::int64_t>(std::llround(cfg.budget_ratio * bundle.full_flops));
  const auto widths = gated_widths(bundle.arch, bundle.placement);

  for (std::uint64_t seed : cfg.seeds) {
    Network init = generate_model(bundle.arch, seed);
    std::map<int, Network> checkpoints;
    checkpoints.emplace(0, init);
    if (epochs.back() > 0) {
      TrainSchedule sched = cfg.baseline;
      sched.effective_epochs = epochs.back();
      Network model = init;
      train_network(model, data, sched, seed, [&](int epoch, const Network& m) {
        if (std::binary_search(epochs.begin(), epochs.end(), epoch)) checkpoints.emplace(epoch, m);
      });
    }

    std::vector<StructureFeature> seed_features;
    for (auto& [epoch, ckpt] : checkpoints) {
      StudyStructure st;
      st.seed = seed;
      st.epoch = epoch;
      st.label = structure_label(seed, epoch);
      ckpt.reset_gates(1.0f);
      const auto snaps = learn_channel_importance(ckpt, data.train, data.val, cfg.importance, seed);
      st.snapshot = select_best_snapshot(snaps, cfg.importance.target_sparsity);
      st.search = search_structure(snaps[st.snapshot].gates, bundle.arch, search);
      if (!st.search.converged) log_warning(st.label + ": " + st.search.diagnostics);
      st.feature = structure_feature(st.search.config, bundle.arch, st.label, seed, epoch);
      st.flops_ratio = static_cast<double>(st.search.achieved_flops) / bundle.full_flops;

      TrainSchedule sched = cfg.scratch;
      sched.effective_epochs =
          cfg.budget_training
              ? budget_epochs(sched.base_epochs, bundle.full_flops, st.search.achieved_flops)
              : sched.base_epochs;
      st.scratch = train_from_scratch(bundle.arch, st.search.config, data, sched, seed);
      log_info(st.label + ": flops ratio " + std::to_string(st.flops_ratio) + ", test acc " +
               std::to_string(st.scratch.test_accuracy));
      seed_features.push_back(st.feature);
      bundle.structures.push_back(std::move(st));
    }
    if (seed_features.size() >= 2) bundle.per_seed.push_back(correlation_matrix(seed_features));
  }

  std::vector<StructureFeature> ckpt_features, random_features;
  for (const auto& st : bundle.structures) {
    (st.epoch > 0 ? ckpt_features : random_features).push_back(st.feature);
  }
  if (ckpt_features.size() >= 2) bundle.cross_checkpoint = correlation_matrix(ckpt_features);
  if (random_features.size() >= 2) bundle.cross_random = correlation_matrix(random_features);
  bundle.summary = summarize(bundle.structures);
  return bundle;
}

SimilarityTrend similarity_trend(const StudyBundle& bundle, int min_epoch) {
  SimilarityTrend t;
  auto find = [&](const std::string& label) -> const StudyStructure& {
    for (const auto& s : bundle.structures)
      if (s.label == label) return s;
    fail(ErrorKind::contract, "no structure labelled " + label);
  };
  double sum = 0;
  const auto& ck = bundle.cross_checkpoint;
  for (std::size_t i = 0; i < ck.size(); ++i)
    for (std::size_t j = i + 1; j < ck.size(); ++j) {
      const auto& a = find(ck.labels[i]);
      const auto& b = find(ck.labels[j]);
      if (a.seed == b.seed || a.epoch < min_epoch || b.epoch < min_epoch) continue;
      sum += ck.values[i][j];
      ++t.checkpoint_pairs;
    }
  t.checkpoint_cross_seed = t.checkpoint_pairs ? sum / t.checkpoint_pairs : std::nan("");
  t.random_cross_seed = mean_pairwise(bundle.cross_random);
  const auto n = static_cast<int>(bundle.cross_random.size());
  t.random_pairs = n * (n - 1) / 2;
  return t;
}

std::vector<StudySummaryRow> summarize(std::span<const StudyStructure> structures) {
  std::map<int, std::vector<const StudyStructure*>> by_epoch;
  for (const auto& s : structures) by_epoch[s.epoch].push_back(&s);
  std::vector<StudySummaryRow> rows;
  for (const auto& [epoch, list] : by_epoch) {
    StudySummaryRow r;
    r.label = source_label(epoch);
    r.runs = static_cast<int>(list.size());
    for (const auto* s : list) {
      r.mean_acc += s->scratch.test_accuracy / r.runs;
      r.flops_ratio += s->flops_ratio / r.runs;
    }
    double ss = 0;
    for (const auto* s : list) ss += (s->scratch.test_accuracy - r.mean_acc) * (s->scratch.test_accuracy - r.mean_acc);
    r.std_acc = r.runs > 1 ? std::sqrt(ss / (r.runs - 1)) : 0.0;
    rows.push_back(r);
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path.string());
  f << text;
  f.flush();
  require(static_cast<bool>(f), ErrorKind::io, "failed writing " + path.string());
}

}  // namespace

std::string matrix_csv(const SimilarityMatrix& m) {
  std::string out = "label";
  for (const auto& l : m.labels) out += "," + l;
  out += "\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    out += m.labels[i];
    for (double v : m.values[i]) out += "," + fmt(v);
    out += "\n";
  }
  return out;
}

SimilarityMatrix parse_matrix_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::stringstream ss(l);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    return cells;
  };
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::format, "empty matrix file");
  auto header = split(line);
  require(!header.empty() && header[0] == "label", ErrorKind::format, "matrix header must start with 'label'");
  SimilarityMatrix m;
  m.labels.assign(header.begin() + 1, header.end());
  while (std::getline(in, line)) {
    auto cells = split(line);
    require(cells.size() == m.labels.size() + 1, ErrorKind::format, "ragged matrix row");
    require(cells[0] == m.labels[m.values.size()], ErrorKind::format,
            "row label '" + cells[0] + "' does not match the header");
    std::vector<double> row;
    for (std::size_t k = 1; k < cells.size(); ++k) row.push_back(std::strtod(cells[k].c_str(), nullptr));
    m.values.push_back(std::move(row));
  }
  require(m.values.size() == m.labels.size(), ErrorKind::format, "matrix is not square");
  return m;
}

std::vector<std::string> emit_report(const StudyBundle& bundle, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(!ec && fs::is_directory(out_dir), ErrorKind::io,
          "cannot create output directory " + out_dir + (ec ? ": " + ec.message() : ""));
  const fs::path dir(out_dir);
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_file(dir / name, text);
    written.push_back((dir / name).string());
  };

  for (std::size_t k = 0; k < bundle.per_seed.size(); ++k) {
    emit("similarity_seed" + std::to_string(k) + ".csv", matrix_csv(bundle.per_seed[k]));
  }
  if (bundle.cross_checkpoint.size()) emit("similarity_checkpoints.csv", matrix_csv(bundle.cross_checkpoint));
  if (bundle.cross_random.size()) emit("similarity_random.csv", matrix_csv(bundle.cross_random));

  std::string counts = "layer_id,label,kept,original\n";
  const auto widths = gated_widths(bundle.arch, bundle.placement);
  for (const auto& st : bundle.structures) {
    for (std::size_t j = 0; j < widths.size(); ++j) {
      counts += std::to_string(bundle.placement.layer_ids[j]) + "," + st.label + "," +
                std::to_string(st.search.config.kept_indices[j].size()) + "," +
                std::to_string(widths[j]) + "\n";
    }
  }
  emit("channel_counts.csv", counts);

  std::string structs =
      "label,seed,epoch,tau,achieved_flops,flops_ratio,converged,effective_epochs,test_acc\n";
  for (const auto& st : bundle.structures) {
    structs += st.label + "," + std::to_string(st.seed) + "," + std::to_string(st.epoch) + "," +
               fmt(st.search.tau_star) + "," + std::to_string(st.search.achieved_flops) + "," +
               fmt(st.flops_ratio) + "," + (st.search.converged ? "1" : "0") + "," +
               std::to_string(st.scratch.effective_epochs) + "," + fmt(st.scratch.test_accuracy) +
               "\n";
  }
  emit("structures.csv", structs);

  std::string summary = "label,mean_acc,std_acc,flops_ratio\n";
  for (const auto& r : bundle.summary) {
    summary += r.label + "," + fmt(r.mean_acc) + "," + fmt(r.std_acc) + "," + fmt(r.flops_ratio) + "\n";
  }
  emit("summary.csv", summary);
  return written;
}

}  // namespace sprune
