#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "sprune/analysis.hpp"
#include "sprune/error.hpp"
#include "sprune/log.hpp"
#include "testing.hpp"

using namespace sprune;

namespace {

// Textbook single-pass Pearson in long double.
double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  const long double n = static_cast<long double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    syy += static_cast<long double>(y[i]) * y[i];
    sxy += static_cast<long double>(x[i]) * y[i];
  }
  const long double num = n * sxy - sx * sy;
  const long double den = std::sqrt(n * sxx - sx * sx) * std::sqrt(n * syy - sy * sy);
  return static_cast<double>(num / den);
}

StructureFeature feat(std::vector<double> r, std::string label) {
  StructureFeature f;
  f.ratios = std::move(r);
  f.label = std::move(label);
  return f;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ErrorKind kind_of(const std::function<void()>& fn, std::string* msg = nullptr) {
  try {
    fn();
  } catch (const Error& e) {
    if (msg) *msg = e.what();
    return e.kind();
  }
  return ErrorKind::contract;
}

StudyConfig tiny_study() {
  StudyConfig cfg;
  cfg.arch = "vgg-small";
  cfg.importance.epochs = 2;
  cfg.importance.batch_size = 32;
  cfg.baseline.batch_size = 32;
  cfg.baseline.lr0 = 0.05;
  cfg.scratch.base_epochs = 1;
  cfg.scratch.batch_size = 32;
  cfg.scratch.lr0 = 0.05;
  return cfg;
}

DataSplits tiny_data() {
  SynthSpec spec;
  spec.per_class = 30;
  return synth_splits(spec, 10, 10, 3);
}

struct Quiet {
  LogSink prev = set_log_sink([](LogLevel, std::string_view) {});
  ~Quiet() { set_log_sink(prev); }
};

}  // namespace

TEST_CASE("structure features") {
  const ArchSpec arch = vgg_small();
  const auto widths = gated_widths(arch, place_gates(arch));
  for (double r : structure_feature(ChannelConfig::full(widths), arch).ratios) CHECK(r == 1.0);

  ChannelConfig half;
  for (int w : widths) {
    std::vector<int> keep;
    for (int c = 0; c < w / 2; ++c) keep.push_back(c);
    half.kept_indices.push_back(keep);
  }
  for (double r : structure_feature(half, arch).ratios) CHECK(r == 0.5);

  const ArchSpec res = resnet_tiny();
  const auto rp = place_gates(res);
  std::mt19937_64 rng(4);
  const auto f = structure_feature(testing::random_config(gated_widths(res, rp), rng), res);
  CHECK(f.ratios.size() == rp.size());
  for (double r : f.ratios) CHECK((r > 0 && r <= 1));

  // all-positive gates thresholded at zero keep everything
  GateState g = GateState::ones(gated_widths(res, rp));
  std::uniform_real_distribution<float> u(0.01f, 1.0f);
  for (auto& l : g.lambda)
    for (auto& v : l) v = u(rng);
  for (double r : structure_feature(prune_by_threshold(g, 0.0), res).ratios) CHECK(r == 1.0);
}

TEST_CASE("correlation matrix closed cases") {
  std::vector<StructureFeature> same{feat({0.1, 0.5, 0.9}, "a"), feat({0.1, 0.5, 0.9}, "b")};
  CHECK(correlation_matrix(same).values[0][1] == doctest::Approx(1.0));

  std::vector<StructureFeature> hand{feat({0.5, 0.5, 1.0}, "a"), feat({1.0, 0.5, 0.5}, "b")};
  const auto m = correlation_matrix(hand);
  CHECK(m.values[0][1] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(m.values[1][0] == m.values[0][1]);
  CHECK(m.values[0][0] == 1.0);
  CHECK(m.labels == std::vector<std::string>{"a", "b"});

  std::string msg;
  std::vector<StructureFeature> flat{feat({0.5, 0.5, 1.0}, "ok"), feat({0.5, 0.5, 0.5}, "uniform")};
  CHECK(kind_of([&] { correlation_matrix(flat); }, &msg) == ErrorKind::degenerate_feature);
  CHECK(msg.find("uniform") != std::string::npos);
  std::vector<StructureFeature> one{feat({0.1, 0.2}, "x")};
  CHECK(kind_of([&] { correlation_matrix(one); }) == ErrorKind::precondition);
  std::vector<StructureFeature> ragged{feat({0.1, 0.2}, "x"), feat({0.1, 0.2, 0.3}, "y")};
  CHECK(kind_of([&] { correlation_matrix(ragged); }) == ErrorKind::dimension);
}

TEST_CASE("correlation matrix agrees with a brute-force Pearson") {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::uniform_int_distribution<int> count(2, 7), len(3, 20);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int k = count(rng), n = len(rng);
    std::vector<StructureFeature> fs;
    for (int i = 0; i < k; ++i) {
      std::vector<double> r(static_cast<std::size_t>(n));
      for (auto& v : r) v = u(rng);
      fs.push_back(feat(r, "f" + std::to_string(i)));
    }
    const auto m = correlation_matrix(fs);
    for (int i = 0; i < k; ++i) {
      CHECK(m.values[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)] == 1.0);
      for (int j = 0; j < k; ++j) {
        const double v = m.values[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        CHECK(v == m.values[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)]);
        CHECK((v >= -1 && v <= 1));
        if (i != j) worst = std::max(worst, std::abs(v - pearson_oracle(fs[static_cast<std::size_t>(i)].ratios, fs[static_cast<std::size_t>(j)].ratios)));
      }
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("matrix csv round trip is exact") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<StructureFeature> fs;
  for (int i = 0; i < 4; ++i) fs.push_back(feat({u(rng), u(rng), u(rng), u(rng)}, "s" + std::to_string(i)));
  const auto m = correlation_matrix(fs);
  const auto text = matrix_csv(m);
  CHECK(text.rfind("label,s0,s1,s2,s3\n", 0) == 0);
  CHECK(parse_matrix_csv(text) == m);
}

TEST_CASE("summaries pool structures by source") {
  std::vector<StudyStructure> ss(4);
  const double acc[] = {0.8, 0.9, 0.7, 0.75};
  for (int i = 0; i < 4; ++i) {
    ss[static_cast<std::size_t>(i)].epoch = i < 2 ? 0 : 10;
    ss[static_cast<std::size_t>(i)].scratch.test_accuracy = acc[i];
    ss[static_cast<std::size_t>(i)].flops_ratio = 0.5;
  }
  const auto rows = summarize(ss);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].label == "random");
  CHECK(rows[0].mean_acc == doctest::Approx(0.85));
  CHECK(rows[0].std_acc == doctest::Approx(std::sqrt(0.005)));
  CHECK(rows[1].label == "epoch10");
  CHECK(rows[1].runs == 2);
}

TEST_CASE("smallest studies and report emission") {
  Quiet quiet;
  const DataSplits d = tiny_data();

  SUBCASE("random only, two seeds") {
    auto cfg = tiny_study();
    cfg.seeds = {0, 1};
    const auto b = run_pretrain_effect_study(cfg, d);
    CHECK(b.structures.size() == 2);
    CHECK(b.cross_random.size() == 2);
    CHECK(b.per_seed.empty());
    CHECK(b.summary.size() == 1);
  }

  SUBCASE("one checkpoint, one seed, emitted twice") {
    auto cfg = tiny_study();
    cfg.checkpoint_epochs = {1};
    cfg.seeds = {5};
    const auto b = run_pretrain_effect_study(cfg, d);
    REQUIRE(b.per_seed.size() == 1);
    CHECK(b.per_seed[0].size() == 2);
    CHECK(b.per_seed[0].labels == std::vector<std::string>{"seed5:random", "seed5:epoch1"});

    const auto dir = std::filesystem::temp_directory_path() / "sprune_report_a";
    const auto dir2 = std::filesystem::temp_directory_path() / "sprune_report_b";
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
    const auto files = emit_report(b, dir.string());
    emit_report(b, dir2.string());
    for (const auto& f : files) {
      const auto name = std::filesystem::path(f).filename();
      CHECK(slurp(dir / name) == slurp(dir2 / name));
    }
    CHECK(parse_matrix_csv(slurp(dir / "similarity_seed0.csv")) == b.per_seed[0]);
    const auto counts = slurp(dir / "channel_counts.csv");
    CHECK(counts.rfind("layer_id,label,kept,original\n", 0) == 0);
    CHECK(std::count(counts.begin(), counts.end(), '\n') == 1 + 2 * static_cast<long>(b.placement.size()));
    CHECK(slurp(dir / "summary.csv").rfind("label,mean_acc,std_acc,flops_ratio\n", 0) == 0);
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);

    // a regular file in the way of the output directory
    const auto blocker = std::filesystem::temp_directory_path() / "sprune_blocker";
    std::ofstream(blocker) << "x";
    CHECK(kind_of([&] { emit_report(b, (blocker / "sub").string()); }) == ErrorKind::io);
    std::filesystem::remove(blocker);
  }

  SUBCASE("several seeds and checkpoints") {
    auto cfg = tiny_study();
    cfg.checkpoint_epochs = {1, 2, 3};
    cfg.seeds = {0, 1, 2, 3, 4};
    cfg.importance.epochs = 1;
    cfg.scratch.base_epochs = 0;
    const auto b = run_pretrain_effect_study(cfg, d);
    CHECK(b.per_seed.size() == 5);
    for (const auto& m : b.per_seed) CHECK(m.size() == 4);
    CHECK(b.cross_checkpoint.size() == 15);
    CHECK(b.cross_random.size() == 5);
    CHECK(b.summary.size() == 4);
    for (const auto& r : b.summary) CHECK(r.runs == 5);
    const auto t = similarity_trend(b, 1);
    CHECK(t.checkpoint_pairs == 15 * 14 / 2 - 5 * 3);
    CHECK(t.random_pairs == 10);
  }
}
