#include <algorithm>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "sprune/arch.hpp"
#include "sprune/network.hpp"
#include "testing.hpp"

using namespace sprune;

using testing::plain_chain;

TEST_CASE("expand_channels") {
  const auto base = vgg_small();
  CHECK(expand_channels(base, 1.0) == base);

  auto a = plain_chain({64});
  CHECK(expand_channels(a, 1.25).layers[0].channels == 80);
  CHECK(expand_channels(a, 0.75).layers[0].channels == 48);
  CHECK(expand_channels(a, 1.25).layers.back().channels == 3);
  CHECK(expand_channels(plain_chain({3}), 0.5).layers[0].channels == 2);  // 1.5 rounds up
  CHECK(expand_channels(plain_chain({1}), 0.01).layers[0].channels == 1);  // floor of 1

  CHECK_THROWS_AS(expand_channels(base, 0.0), Error);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> mult(0.3, 3.0);
  for (const auto& name : preset_names()) {
    const auto arch = make_preset(name, 3, 16, 16, 4);
    for (int t = 0; t < 25; ++t) {
      const double m = mult(rng);
      const auto e = expand_channels(arch, m);
      CHECK_NOTHROW(validate(e));  // residual joins stay consistent
      const auto back = expand_channels(e, 1.0 / m);
      for (std::size_t i = 0; i < arch.layers.size(); ++i) {
        if (arch.layers[i].kind != LayerKind::conv) continue;
        // round-trip within rounding, except where the floor of 1 kicks in
        if (arch.layers[i].channels * m >= 1.0) {
          CHECK(std::abs(back.layers[i].channels - arch.layers[i].channels) <= 1);
        }
      }
    }
  }
}

TEST_CASE("place_gates rules") {
  SUBCASE("plain chain gates every BN") {
    const auto a = plain_chain({4, 4, 4});
    const auto p = place_gates(a);
    REQUIRE(p.size() == 3);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(a.layers[static_cast<std::size_t>(p.layer_ids[j])].kind == LayerKind::batchnorm);
      CHECK(p.sites[j] == GateSite::post_bn);
    }
  }
  SUBCASE("basic residual block gates only its middle BN") {
    const auto a = resnet_tiny();
    const auto p = place_gates(a);
    CHECK(p.size() == 6);
    for (std::size_t j = 0; j < p.size(); ++j) {
      const auto& name = a.layers[static_cast<std::size_t>(p.layer_ids[j])].name;
      CHECK(name.find(".1.bn") != std::string::npos);
      CHECK(p.sites[j] == GateSite::residual_middle);
    }
  }
  SUBCASE("depthwise block gates its second BN") {
    const auto a = depthwise_tiny();
    const auto p = place_gates(a);
    CHECK(p.size() == 6);  // stem + 5 blocks
    for (std::size_t j = 1; j < p.size(); ++j) {
      CHECK(a.layers[static_cast<std::size_t>(p.layer_ids[j])].name.find(".2.bn") != std::string::npos);
      CHECK(p.sites[j] == GateSite::depthwise_second_bn);
    }
  }
  SUBCASE("inverted residual block gates its first BN") {
    const auto a = inverted_tiny();
    const auto p = place_gates(a);
    CHECK(p.size() == 3);
    for (std::size_t j = 0; j < p.size(); ++j) {
      CHECK(a.layers[static_cast<std::size_t>(p.layer_ids[j])].name.find(".expand.bn") != std::string::npos);
      CHECK(p.sites[j] == GateSite::inverted_first_bn);
    }
  }
  SUBCASE("gate on a block output feeding a residual join is rejected") {
    auto a = resnet_tiny();
    a.blocks[1].kind = BlockKind::plain;  // would gate s1.b1.2.bn
    try {
      place_gates(a);
      FAIL("expected spec error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::spec);
    }
  }
  SUBCASE("unknown block kind") {
    try {
      block_kind_from_string("octopus");
      FAIL("expected spec error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::spec);
    }
  }
  for (const auto& name : preset_names()) {
    const auto a = make_preset(name, 3, 8, 8, 3);
    for (int id : place_gates(a).layer_ids) {
      CHECK(a.layers[static_cast<std::size_t>(id)].kind == LayerKind::batchnorm);
    }
  }
}

TEST_CASE("count_flops closed cases") {
  SUBCASE("unit conv") {
    ArchSpec a;
    a.in_channels = 1;
    a.in_height = a.in_width = 1;
    a.num_classes = 1;
    a.layers = {{LayerKind::conv, "c", {}, 1, 1, 1, 0},
                {LayerKind::batchnorm, "b", {0}},
                {LayerKind::global_pool, "g", {1}},
                {LayerKind::linear, "fc", {2}, 1}};
    a.blocks = {{BlockKind::plain, "c", {0, 1}, {}}, {BlockKind::fixed, "h", {2, 3}, {}}};
    const auto geo = resolve_geometry(a);
    CHECK(geo[0].macs == 1);
  }
  SUBCASE("3x3 conv 3->16 on 32x32") {
    const auto a = plain_chain({16}, 32, 10);
    // brute-force count over every output position
    std::int64_t brute = 0;
    for (int o = 0; o < 16; ++o)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
          for (int c = 0; c < 3; ++c)
            for (int k = 0; k < 9; ++k) ++brute;
    CHECK(brute == 442368);
    CHECK(resolve_geometry(a)[0].macs == brute);
    CHECK(count_flops(a) == brute + 16 * 10);
  }
  SUBCASE("halving a plain two-conv chain") {
    const auto a = plain_chain({8, 8});
    const auto full = resolve_geometry(a);
    ChannelConfig half{{{0, 1, 2, 3}, {4, 5, 6, 7}}};
    const auto geo = resolve_geometry(a, place_gates(a), half);
    CHECK(geo[0].macs * 2 == full[0].macs);  // boundary (fixed input)
    CHECK(geo[3].macs * 4 == full[3].macs);  // interior
    CHECK(geo.back().macs * 2 == full.back().macs);
  }
  SUBCASE("inconsistent configs") {
    const auto a = plain_chain({4, 4});
    const auto p = place_gates(a);
    for (const ChannelConfig& bad : {ChannelConfig{{{0}}}, ChannelConfig{{{0, 4}, {1}}},
                                     ChannelConfig{{{1, 0}, {1}}}, ChannelConfig{{{}, {1}}}}) {
      try {
        count_flops(a, p, bad);
        FAIL("expected config error");
      } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
      }
    }
  }
}

TEST_CASE("count_flops agrees with the brute-force counter on random structures") {
  std::mt19937_64 rng(42);
  for (const auto& name : preset_names()) {
    const auto arch = expand_channels(make_preset(name, 3, 8, 8, 3), 1.25);
    const auto placement = place_gates(arch);
    const auto widths = gated_widths(arch, placement);
    for (int t = 0; t < 20; ++t) {
      const auto config = testing::random_config(widths, rng);
      auto net = generate_model(arch, config, 1);
      CHECK(count_flops(arch, placement, config) == testing::brute_force_macs(net));
    }
  }
}

TEST_CASE("generate_model") {
  const auto arch = expand_channels(vgg_small(), 1.25);
  const auto widths = gated_widths(arch, place_gates(arch));
  auto a = generate_model(arch, 7);
  auto b = generate_model(arch, 7);
  CHECK(a.flops() == count_flops(arch));
  CHECK(a.weight_hash() == b.weight_hash());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(*a.parameters()[i] == *b.parameters()[i]);
  }
  CHECK(generate_model(arch, 8).weight_hash() != a.weight_hash());

  std::mt19937_64 rng(5);
  for (const auto& name : preset_names()) {
    const auto ar = make_preset(name, 3, 8, 8, 3);
    auto net = generate_model(ar, testing::random_config(gated_widths(ar, place_gates(ar)), rng), 3);
    const auto logits = net.predict(testing::random_tensor<float>({5, 3, 8, 8}, rng));
    CHECK(logits.shape() == Shape{5, 3});
  }

  ChannelConfig zero = ChannelConfig::full(widths);
  zero.kept_indices[2].clear();
  try {
    generate_model(arch, zero, 1);
    FAIL("expected generation error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::generation);
  }
}

TEST_CASE("prune_by_threshold") {
  GateState g;
  g.lambda = {{0.9f, 0.6f, 0.3f, 0.1f}};
  CHECK(prune_by_threshold(g, 0.5).kept_indices[0] == std::vector<int>{0, 1});
  CHECK(prune_by_threshold(g, 0.0).kept_indices[0] == std::vector<int>{0, 1, 2, 3});
  CHECK(prune_by_threshold(g, 0.95).kept_indices[0] == std::vector<int>{0});  // clamp
  GateState tie;
  tie.lambda = {{0.5f, 0.2f}};
  CHECK(prune_by_threshold(tie, 0.5).kept_indices[0] == std::vector<int>{0});  // strict >
  CHECK_THROWS_AS(prune_by_threshold(g, 1.5), Error);

  std::mt19937_64 rng(99);
  std::uniform_real_distribution<float> u(0, 1);
  const auto arch = resnet_tiny();
  const auto placement = place_gates(arch);
  const auto widths = gated_widths(arch, placement);
  for (int t = 0; t < 100; ++t) {
    GateState s;
    for (int w : widths) {
      std::vector<float> v(static_cast<std::size_t>(w));
      for (auto& x : v) x = u(rng);
      s.lambda.push_back(v);
    }
    double t1 = u(rng), t2 = u(rng);
    if (t1 > t2) std::swap(t1, t2);
    const auto lo = prune_by_threshold(s, t1);
    const auto hi = prune_by_threshold(s, t2);
    for (std::size_t j = 0; j < widths.size(); ++j) {
      CHECK(std::includes(lo.kept_indices[j].begin(), lo.kept_indices[j].end(),
                          hi.kept_indices[j].begin(), hi.kept_indices[j].end()));
    }
    CHECK(count_flops(arch, placement, hi) <= count_flops(arch, placement, lo));
  }
}

TEST_CASE("lottery_slice_init") {
  const auto arch = plain_chain({4, 6});
  auto full = generate_model(arch, 11);
  auto same = lottery_slice_init(full, full.config());
  CHECK(same.weight_hash() == full.weight_hash());

  ChannelConfig cfg{{{0, 2}, {0, 1, 2, 3, 4, 5}}};
  auto sliced = lottery_slice_init(full, cfg);
  const auto& w = sliced.layers()[0].weight;
  const auto& src = full.layers()[0].weight;
  CHECK(w.shape() == Shape{2, 3, 3, 3});
  for (int k = 0; k < 27; ++k) {
    CHECK(w[static_cast<std::size_t>(k)] == src[static_cast<std::size_t>(k)]);
    CHECK(w[static_cast<std::size_t>(27 + k)] == src[static_cast<std::size_t>(2 * 27 + k)]);
  }
  CHECK(sliced.layers()[3].weight.shape() == Shape{6, 2, 3, 3});

  ChannelConfig bad{{{0, 9}, {0}}};
  try {
    lottery_slice_init(full, bad);
    FAIL("expected config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

TEST_CASE("masked full model equals sliced pruned model") {
  std::mt19937_64 rng(21);
  for (const auto& name : {"vgg-small", "resnet-tiny"}) {
    const auto arch = expand_channels(make_preset(name, 3, 8, 8, 3), 1.25);
    auto full = generate_model(arch, 4);
    // non-trivial running statistics and affine parameters
    for (auto& p : full.layers()) {
      if (p.gamma.empty()) continue;
      for (std::size_t c = 0; c < p.gamma.numel(); ++c) {
        p.gamma[c] = std::uniform_real_distribution<float>(0.5f, 1.5f)(rng);
        p.beta[c] = std::uniform_real_distribution<float>(-0.5f, 0.5f)(rng);
        p.stats.mean[c] = std::uniform_real_distribution<float>(-0.2f, 0.2f)(rng);
        p.stats.var[c] = std::uniform_real_distribution<float>(0.5f, 2.0f)(rng);
      }
    }
    const auto config = testing::random_config(gated_widths(arch, full.placement()), rng);
    for (std::size_t j = 0; j < config.kept_indices.size(); ++j) {
      full.gates()[j].fill(0.0f);
      for (int c : config.kept_indices[j]) full.gates()[j][static_cast<std::size_t>(c)] = 1.0f;
    }
    auto sliced = lottery_slice_init(full, config);
    for (int t = 0; t < 10; ++t) {
      const auto x = testing::random_tensor<float>({2, 3, 8, 8}, rng);
      const auto a = full.predict(x, true);
      const auto b = sliced.predict(x, false);
      for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-5);
    }
  }
}

TEST_CASE("arch serialization") {
  for (const auto& name : preset_names()) {
    const auto a = expand_channels(make_preset(name, 3, 16, 16, 5), 1.25);
    CHECK(arch_from_json(arch_to_json(a)) == a);
  }
  const auto path = std::filesystem::temp_directory_path() / "sprune_arch_test.json";
  save_arch(resnet_tiny(), path.string());
  CHECK(load_arch(path.string()) == resnet_tiny());
  std::filesystem::remove(path);

  auto text = arch_to_json(vgg_small());
  text.replace(text.find("sprune.arch/1"), 13, "sprune.arch/9");
  try {
    arch_from_json(text);
    FAIL("expected migration error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::migration);
  }
}
