#include "sprune/arch.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "sprune/autodiff.hpp"
#include "sprune/error.hpp"

namespace sprune {

namespace {

constexpr const char* kArchSchema = "sprune.arch/1";

// Channel domains: sets of layer outputs that always share one channel index
// space. conv/linear open a domain; BN, ReLU, pooling and depthwise conv pass
// their input's domain through; add-joins merge the domains of both operands.
struct Domains {
  std::vector<int> in_domain;   // per layer; -1 means the network input
  std::vector<int> out_domain;  // per layer
  std::vector<int> width;       // unpruned width per domain
  std::vector<char> merged;     // domain joined by an add
  std::vector<int> gate_of;     // gate index per domain, -1 when ungated
};

int find_root(std::vector<int>& parent, int x) {
  while (parent[static_cast<std::size_t>(x)] != x) {
    parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
    x = parent[static_cast<std::size_t>(x)];
  }
  return x;
}

std::string layer_label(const ArchSpec& arch, int id) {
  const auto& l = arch.layers[static_cast<std::size_t>(id)];
  return "layer " + std::to_string(id) + (l.name.empty() ? "" : " (" + l.name + ")");
}

void check_structure(const ArchSpec& arch) {
  require(!arch.layers.empty(), ErrorKind::spec, "architecture has no layers");
  require(arch.in_channels >= 1 && arch.in_height >= 1 && arch.in_width >= 1,
          ErrorKind::spec, "input shape must be positive");
  require(arch.num_classes >= 1, ErrorKind::spec, "num_classes must be positive");
  const int n = static_cast<int>(arch.layers.size());
  std::vector<int> consumers(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const auto& l = arch.layers[static_cast<std::size_t>(i)];
    const std::size_t want = l.kind == LayerKind::add ? 2 : 1;
    require(l.inputs.size() == want || (want == 1 && l.inputs.empty()), ErrorKind::spec,
            layer_label(arch, i) + " has " + std::to_string(l.inputs.size()) + " inputs");
    if (l.kind == LayerKind::add) {
      require(l.inputs[0] != l.inputs[1], ErrorKind::spec,
              layer_label(arch, i) + " joins a layer with itself");
    }
    for (int in : l.inputs) {
      require(in >= 0 && in < i, ErrorKind::spec,
              layer_label(arch, i) + " reads layer " + std::to_string(in) +
                  " which does not precede it");
      ++consumers[static_cast<std::size_t>(in)];
    }
    if (l.kind == LayerKind::conv || l.kind == LayerKind::linear) {
      require(l.channels >= 1, ErrorKind::spec, layer_label(arch, i) + " has no channels");
    }
    if (l.kind == LayerKind::conv || l.kind == LayerKind::depthwise_conv ||
        l.kind == LayerKind::pool) {
      require(l.kernel >= 1 && l.stride >= 1 && l.padding >= 0, ErrorKind::spec,
              layer_label(arch, i) + " has invalid window parameters");
    }
  }
  for (int i = 0; i + 1 < n; ++i) {
    require(consumers[static_cast<std::size_t>(i)] > 0, ErrorKind::spec,
            layer_label(arch, i) + " is a second output; the graph must have a single output");
  }
  const auto& last = arch.layers.back();
  require(last.kind == LayerKind::linear && last.channels == arch.num_classes,
          ErrorKind::spec, "the output layer must be a linear classifier with num_classes outputs");
  for (const auto& b : arch.blocks) {
    for (const auto* ids : {&b.body, &b.shortcut}) {
      for (int id : *ids) {
        require(id >= 0 && id < n, ErrorKind::spec,
                "block " + b.name + " references missing layer " + std::to_string(id));
      }
    }
  }
}

Domains analyze(const ArchSpec& arch) {
  const std::size_t n = arch.layers.size();
  std::vector<int> parent;
  std::vector<int> width;
  std::vector<char> merged;
  std::vector<int> raw_out(n, -1), raw_in(n, -1);
  auto input_domain = [&](const LayerSpec& l) {
    return l.inputs.empty() ? -1 : raw_out[static_cast<std::size_t>(l.inputs[0])];
  };
  auto width_of = [&](int d) {
    return d < 0 ? arch.in_channels : width[static_cast<std::size_t>(find_root(parent, d))];
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = arch.layers[i];
    raw_in[i] = input_domain(l);
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::linear:
        parent.push_back(static_cast<int>(parent.size()));
        width.push_back(l.channels);
        merged.push_back(0);
        raw_out[i] = parent.back();
        break;
      case LayerKind::add: {
        const int a = raw_out[static_cast<std::size_t>(l.inputs[0])];
        const int b = raw_out[static_cast<std::size_t>(l.inputs[1])];
        require(width_of(a) == width_of(b), ErrorKind::spec,
                layer_label(arch, static_cast<int>(i)) + " joins " + std::to_string(width_of(a)) +
                    " and " + std::to_string(width_of(b)) + " channels");
        require(a >= 0 && b >= 0, ErrorKind::spec,
                layer_label(arch, static_cast<int>(i)) + " joins the raw network input");
        const int ra = find_root(parent, a), rb = find_root(parent, b);
        if (ra != rb) parent[static_cast<std::size_t>(rb)] = ra;
        merged[static_cast<std::size_t>(ra)] = 1;
        raw_out[i] = ra;
        break;
      }
      default:
        raw_out[i] = raw_in[i];
        break;
    }
  }
  // Compact roots to 0..k-1.
  std::vector<int> compact(parent.size(), -1);
  Domains d;
  for (std::size_t r = 0; r < parent.size(); ++r) {
    if (find_root(parent, static_cast<int>(r)) == static_cast<int>(r)) {
      compact[r] = static_cast<int>(d.width.size());
      d.width.push_back(width[r]);
      d.merged.push_back(0);
    }
  }
  for (std::size_t r = 0; r < parent.size(); ++r) {
    const int c = compact[static_cast<std::size_t>(find_root(parent, static_cast<int>(r)))];
    if (merged[r]) d.merged[static_cast<std::size_t>(c)] = 1;
  }
  auto map = [&](int raw) {
    return raw < 0 ? -1 : compact[static_cast<std::size_t>(find_root(parent, raw))];
  };
  d.in_domain.resize(n);
  d.out_domain.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.in_domain[i] = map(raw_in[i]);
    d.out_domain[i] = map(raw_out[i]);
  }
  d.gate_of.assign(d.width.size(), -1);
  return d;
}

void attach_gates(const ArchSpec& arch, const GatePlacement& placement, Domains& d) {
  for (std::size_t j = 0; j < placement.size(); ++j) {
    const int id = placement.layer_ids[j];
    require(id >= 0 && id < static_cast<int>(arch.layers.size()) &&
                arch.layers[static_cast<std::size_t>(id)].kind == LayerKind::batchnorm,
            ErrorKind::spec, "gate " + std::to_string(j) + " is not on a BatchNorm layer");
    const int dom = d.out_domain[static_cast<std::size_t>(id)];
    require(dom >= 0, ErrorKind::spec, "gate on the network input");
    require(!d.merged[static_cast<std::size_t>(dom)], ErrorKind::spec,
            "gate on " + layer_label(arch, id) + " whose channels feed a residual join");
    require(d.gate_of[static_cast<std::size_t>(dom)] < 0, ErrorKind::spec,
            "two gates share the channels of " + layer_label(arch, id));
    require(dom != d.out_domain.back(), ErrorKind::spec, "gate on the classifier output");
    d.gate_of[static_cast<std::size_t>(dom)] = static_cast<int>(j);
  }
}

std::vector<LayerGeometry> geometry(const ArchSpec& arch, const Domains& d,
                                    const std::vector<int>& dom_width) {
  const std::size_t n = arch.layers.size();
  std::vector<LayerGeometry> geo(n);
  auto width = [&](int dom) {
    return dom < 0 ? arch.in_channels : dom_width[static_cast<std::size_t>(dom)];
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto& l = arch.layers[i];
    auto& g = geo[i];
    g.in_domain = d.in_domain[i];
    g.out_domain = d.out_domain[i];
    if (l.inputs.empty()) {
      g.in_height = arch.in_height;
      g.in_width = arch.in_width;
    } else {
      const auto& src = geo[static_cast<std::size_t>(l.inputs[0])];
      g.in_height = src.out_height;
      g.in_width = src.out_width;
    }
    g.in_channels = width(g.in_domain);
    g.out_channels = width(g.out_domain);
    g.out_height = g.in_height;
    g.out_width = g.in_width;
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::depthwise_conv: {
        g.out_height = ops::conv_output_size(g.in_height, l.kernel, l.stride, l.padding);
        g.out_width = ops::conv_output_size(g.in_width, l.kernel, l.stride, l.padding);
        g.groups = l.kind == LayerKind::depthwise_conv ? g.in_channels : 1;
        g.macs = static_cast<std::int64_t>(g.in_channels / g.groups) * g.out_channels *
                 l.kernel * l.kernel * g.out_height * g.out_width;
        break;
      }
      case LayerKind::pool:
        g.out_height = ops::conv_output_size(g.in_height, l.kernel, l.kernel, 0);
        g.out_width = ops::conv_output_size(g.in_width, l.kernel, l.kernel, 0);
        break;
      case LayerKind::global_pool:
        g.out_height = 1;
        g.out_width = 1;
        break;
      case LayerKind::linear:
        require(g.in_height == 1 && g.in_width == 1, ErrorKind::geometry,
                layer_label(arch, static_cast<int>(i)) + " needs a pooled [N, C] input");
        g.macs = static_cast<std::int64_t>(g.in_channels) * g.out_channels;
        break;
      case LayerKind::add: {
        const auto& b = geo[static_cast<std::size_t>(l.inputs[1])];
        require(b.out_height == g.in_height && b.out_width == g.in_width, ErrorKind::geometry,
                layer_label(arch, static_cast<int>(i)) + " joins tensors of different spatial size");
        break;
      }
      default:
        break;
    }
  }
  return geo;
}

std::vector<int> pruned_widths(const Domains& d, const ChannelConfig& config) {
  std::vector<int> w = d.width;
  for (std::size_t dom = 0; dom < w.size(); ++dom) {
    const int j = d.gate_of[dom];
    if (j >= 0) w[dom] = static_cast<int>(config.kept_indices[static_cast<std::size_t>(j)].size());
  }
  return w;
}

}  // namespace

std::vector<int> ChannelConfig::kept_counts() const {
  std::vector<int> out;
  out.reserve(kept_indices.size());
  for (const auto& k : kept_indices) out.push_back(static_cast<int>(k.size()));
  return out;
}

ChannelConfig ChannelConfig::full(const std::vector<int>& widths) {
  ChannelConfig c;
  for (int w : widths) {
    std::vector<int> idx(static_cast<std::size_t>(w));
    std::iota(idx.begin(), idx.end(), 0);
    c.kept_indices.push_back(std::move(idx));
  }
  return c;
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::depthwise_conv: return "depthwise_conv";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::pool: return "pool";
    case LayerKind::global_pool: return "global_pool";
    case LayerKind::linear: return "linear";
    case LayerKind::add: return "add";
  }
  return "?";
}

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::plain: return "plain";
    case BlockKind::residual: return "residual";
    case BlockKind::depthwise: return "depthwise";
    case BlockKind::inverted_residual: return "inverted_residual";
    case BlockKind::fixed: return "fixed";
  }
  return "?";
}

std::string_view to_string(GateSite site) {
  switch (site) {
    case GateSite::post_bn: return "post-bn";
    case GateSite::residual_middle: return "residual-middle";
    case GateSite::depthwise_second_bn: return "depthwise-second-bn";
    case GateSite::inverted_first_bn: return "inverted-first-bn";
  }
  return "?";
}

LayerKind layer_kind_from_string(std::string_view s) {
  for (auto k : {LayerKind::conv, LayerKind::depthwise_conv, LayerKind::batchnorm,
                 LayerKind::relu, LayerKind::pool, LayerKind::global_pool,
                 LayerKind::linear, LayerKind::add}) {
    if (to_string(k) == s) return k;
  }
  fail(ErrorKind::spec, "unknown layer kind '" + std::string(s) + "'");
}

BlockKind block_kind_from_string(std::string_view s) {
  for (auto k : {BlockKind::plain, BlockKind::residual, BlockKind::depthwise,
                 BlockKind::inverted_residual, BlockKind::fixed}) {
    if (to_string(k) == s) return k;
  }
  fail(ErrorKind::spec, "unrecognized block kind '" + std::string(s) + "'");
}

void validate(const ArchSpec& arch) {
  check_structure(arch);
  Domains d = analyze(arch);
  geometry(arch, d, d.width);
}

ArchSpec expand_channels(const ArchSpec& arch, double multiplier) {
  require(multiplier > 0 && std::isfinite(multiplier), ErrorKind::precondition,
          "expansion multiplier must be positive");
  ArchSpec out = arch;
  for (std::size_t i = 0; i + 1 < out.layers.size(); ++i) {
    auto& l = out.layers[i];
    if (l.kind != LayerKind::conv && l.kind != LayerKind::linear) continue;
    const auto scaled = static_cast<int>(std::floor(l.channels * multiplier + 0.5));
    l.channels = std::max(1, scaled);
  }
  return out;
}

GatePlacement place_gates(const ArchSpec& arch) {
  check_structure(arch);
  auto is_bn = [&](int id) {
    return arch.layers[static_cast<std::size_t>(id)].kind == LayerKind::batchnorm;
  };
  std::vector<std::pair<int, GateSite>> gates;
  for (const auto& b : arch.blocks) {
    std::vector<int> bns;
    for (int id : b.body)
      if (is_bn(id)) bns.push_back(id);
    switch (b.kind) {
      case BlockKind::plain:
        for (int id : bns) gates.emplace_back(id, GateSite::post_bn);
        break;
      case BlockKind::residual:
        // every body BN except the block output
        for (std::size_t k = 0; k + 1 < bns.size(); ++k) gates.emplace_back(bns[k], GateSite::residual_middle);
        break;
      case BlockKind::depthwise:
        require(bns.size() >= 2, ErrorKind::spec, "depthwise block " + b.name + " needs two BatchNorms");
        gates.emplace_back(bns[1], GateSite::depthwise_second_bn);
        break;
      case BlockKind::inverted_residual:
        require(!bns.empty(), ErrorKind::spec, "inverted residual block " + b.name + " has no BatchNorm");
        gates.emplace_back(bns[0], GateSite::inverted_first_bn);
        break;
      case BlockKind::fixed:
        break;
    }
  }
  std::sort(gates.begin(), gates.end());
  GatePlacement p;
  for (const auto& [id, site] : gates) {
    require(p.layer_ids.empty() || p.layer_ids.back() != id, ErrorKind::spec,
            layer_label(arch, id) + " is listed in two blocks");
    p.layer_ids.push_back(id);
    p.sites.push_back(site);
  }
  require(!p.layer_ids.empty(), ErrorKind::spec, "architecture has no gated layers");
  Domains d = analyze(arch);
  attach_gates(arch, p, d);
  return p;
}

std::vector<int> gated_widths(const ArchSpec& arch, const GatePlacement& placement) {
  Domains d = analyze(arch);
  std::vector<int> out;
  for (int id : placement.layer_ids) {
    out.push_back(d.width[static_cast<std::size_t>(d.out_domain[static_cast<std::size_t>(id)])]);
  }
  return out;
}

void check_config(const ArchSpec& arch, const GatePlacement& placement,
                  const ChannelConfig& config) {
  const auto widths = gated_widths(arch, placement);
  require(config.kept_indices.size() == widths.size(), ErrorKind::config,
          "config has " + std::to_string(config.kept_indices.size()) + " layers, expected " +
              std::to_string(widths.size()));
  for (std::size_t j = 0; j < widths.size(); ++j) {
    const auto& idx = config.kept_indices[j];
    require(!idx.empty(), ErrorKind::config, "gated layer " + std::to_string(j) + " keeps no channels");
    for (std::size_t k = 0; k < idx.size(); ++k) {
      require(idx[k] >= 0 && idx[k] < widths[j], ErrorKind::config,
              "gated layer " + std::to_string(j) + " index " + std::to_string(idx[k]) +
                  " out of range [0, " + std::to_string(widths[j]) + ")");
      require(k == 0 || idx[k] > idx[k - 1], ErrorKind::config,
              "gated layer " + std::to_string(j) + " indices are not sorted and unique");
    }
  }
}

std::vector<LayerGeometry> resolve_geometry(const ArchSpec& arch,
                                            const GatePlacement& placement,
                                            const ChannelConfig& config) {
  check_structure(arch);
  check_config(arch, placement, config);
  Domains d = analyze(arch);
  attach_gates(arch, placement, d);
  return geometry(arch, d, pruned_widths(d, config));
}

std::vector<LayerGeometry> resolve_geometry(const ArchSpec& arch) {
  check_structure(arch);
  Domains d = analyze(arch);
  return geometry(arch, d, d.width);
}

std::vector<std::vector<int>> domain_indices(const ArchSpec& arch,
                                             const GatePlacement& placement,
                                             const ChannelConfig& config) {
  check_config(arch, placement, config);
  Domains d = analyze(arch);
  attach_gates(arch, placement, d);
  std::vector<std::vector<int>> out(d.width.size());
  for (std::size_t dom = 0; dom < d.width.size(); ++dom) {
    const int j = d.gate_of[dom];
    if (j >= 0) {
      out[dom] = config.kept_indices[static_cast<std::size_t>(j)];
    } else {
      out[dom].resize(static_cast<std::size_t>(d.width[dom]));
      std::iota(out[dom].begin(), out[dom].end(), 0);
    }
  }
  return out;
}

std::int64_t count_flops(const ArchSpec& arch) {
  std::int64_t total = 0;
  for (const auto& g : resolve_geometry(arch)) total += g.macs;
  return total;
}

std::int64_t count_flops(const ArchSpec& arch, const ChannelConfig& config) {
  return count_flops(arch, place_gates(arch), config);
}

std::int64_t count_flops(const ArchSpec& arch, const GatePlacement& placement,
                         const ChannelConfig& config) {
  std::int64_t total = 0;
  for (const auto& g : resolve_geometry(arch, placement, config)) total += g.macs;
  return total;
}

ChannelConfig prune_by_threshold(const GateState& gates, double tau) {
  require(tau >= 0 && tau <= 1, ErrorKind::precondition,
          "threshold must lie in [0, 1], got " + std::to_string(tau));
  ChannelConfig config;
  for (const auto& layer : gates.lambda) {
    std::vector<int> kept;
    for (std::size_t c = 0; c < layer.size(); ++c) {
      if (layer[c] > tau) kept.push_back(static_cast<int>(c));
    }
    if (kept.empty() && !layer.empty()) {
      const auto best = std::max_element(layer.begin(), layer.end()) - layer.begin();
      kept.push_back(static_cast<int>(best));
    }
    config.kept_indices.push_back(std::move(kept));
  }
  return config;
}

// ---- presets ---------------------------------------------------------------

namespace {

class Builder {
 public:
  Builder(std::string name, int c, int h, int w, int classes) {
    arch_.name = std::move(name);
    arch_.in_channels = c;
    arch_.in_height = h;
    arch_.in_width = w;
    arch_.num_classes = classes;
  }

  int layer(LayerKind kind, const std::string& name, std::vector<int> inputs, int channels = 0,
            int kernel = 1, int stride = 1, int padding = 0) {
    arch_.layers.push_back(LayerSpec{kind, name, std::move(inputs), channels, kernel, stride, padding});
    const int id = static_cast<int>(arch_.layers.size()) - 1;
    if (open_) open_->body.push_back(id);
    return id;
  }
  std::vector<int> from(int id) const { return id < 0 ? std::vector<int>{} : std::vector<int>{id}; }

  int conv(const std::string& n, int in, int ch, int k, int s) {
    return layer(LayerKind::conv, n, from(in), ch, k, s, k / 2);
  }
  int dwconv(const std::string& n, int in, int k, int s) {
    return layer(LayerKind::depthwise_conv, n, from(in), 0, k, s, k / 2);
  }
  int bn(const std::string& n, int in) { return layer(LayerKind::batchnorm, n, from(in)); }
  int relu(const std::string& n, int in) { return layer(LayerKind::relu, n, from(in)); }
  int conv_bn_relu(const std::string& n, int in, int ch, int k, int s) {
    return relu(n + ".relu", bn(n + ".bn", conv(n + ".conv", in, ch, k, s)));
  }

  void begin(BlockKind kind, std::string name) {
    arch_.blocks.push_back(BlockSpec{kind, std::move(name), {}, {}});
    open_ = &arch_.blocks.back();
  }
  void end() { open_ = nullptr; }
  void shortcut(int id) {
    auto& body = arch_.blocks.back().body;
    body.erase(std::remove(body.begin(), body.end(), id), body.end());
    arch_.blocks.back().shortcut.push_back(id);
  }

  ArchSpec finish(int in) {
    begin(BlockKind::fixed, "head");
    const int gp = layer(LayerKind::global_pool, "head.pool", from(in));
    layer(LayerKind::linear, "head.fc", from(gp), arch_.num_classes);
    end();
    validate(arch_);
    return arch_;
  }

 private:
  ArchSpec arch_;
  BlockSpec* open_ = nullptr;
};

}  // namespace

ArchSpec vgg_small(int in_channels, int height, int width, int num_classes) {
  Builder b("vgg-small", in_channels, height, width, num_classes);
  const int plan[] = {8, 8, 0, 16, 16, 0, 32, 32, 0, 32, 32};
  int x = -1, conv = 0, pooled = 0;
  int h = height;
  for (int ch : plan) {
    if (ch == 0) {
      if (h < 2) continue;
      b.begin(BlockKind::fixed, "pool" + std::to_string(++pooled));
      x = b.layer(LayerKind::pool, "pool" + std::to_string(pooled), b.from(x), 0, 2, 2, 0);
      b.end();
      h /= 2;
      continue;
    }
    const std::string name = "conv" + std::to_string(++conv);
    b.begin(BlockKind::plain, name);
    x = b.conv_bn_relu(name, x, ch, 3, 1);
    b.end();
  }
  return b.finish(x);
}

ArchSpec resnet_tiny(int in_channels, int height, int width, int num_classes) {
  Builder b("resnet-tiny", in_channels, height, width, num_classes);
  b.begin(BlockKind::fixed, "stem");
  int x = b.conv_bn_relu("stem", -1, 8, 3, 1);
  b.end();
  int in_ch = 8;
  const int widths[] = {8, 16, 32};
  for (int s = 0; s < 3; ++s) {
    for (int k = 0; k < 2; ++k) {
      const std::string name = "s" + std::to_string(s + 1) + ".b" + std::to_string(k + 1);
      const int stride = (s > 0 && k == 0) ? 2 : 1;
      const int ch = widths[s];
      b.begin(BlockKind::residual, name);
      int y = b.conv_bn_relu(name + ".1", x, ch, 3, stride);
      y = b.bn(name + ".2.bn", b.conv(name + ".2.conv", y, ch, 3, 1));
      int skip = x;
      if (stride != 1 || in_ch != ch) {
        const int pc = b.conv(name + ".proj.conv", x, ch, 1, stride);
        const int pb = b.bn(name + ".proj.bn", pc);
        b.shortcut(pc);
        b.shortcut(pb);
        skip = pb;
      }
      const int sum = b.layer(LayerKind::add, name + ".add", {y, skip});
      x = b.relu(name + ".relu", sum);
      b.end();
      in_ch = ch;
    }
  }
  return b.finish(x);
}

ArchSpec depthwise_tiny(int in_channels, int height, int width, int num_classes) {
  Builder b("depthwise-tiny", in_channels, height, width, num_classes);
  b.begin(BlockKind::plain, "stem");
  int x = b.conv_bn_relu("stem", -1, 8, 3, 1);
  b.end();
  const std::pair<int, int> plan[] = {{16, 1}, {32, 2}, {32, 1}, {64, 2}, {64, 1}};
  int i = 0;
  for (const auto& [ch, stride] : plan) {
    const std::string name = "dw" + std::to_string(++i);
    b.begin(BlockKind::depthwise, name);
    x = b.relu(name + ".1.relu", b.bn(name + ".1.bn", b.dwconv(name + ".1.dw", x, 3, stride)));
    x = b.conv_bn_relu(name + ".2", x, ch, 1, 1);
    b.end();
  }
  return b.finish(x);
}

ArchSpec inverted_tiny(int in_channels, int height, int width, int num_classes) {
  Builder b("inverted-tiny", in_channels, height, width, num_classes);
  b.begin(BlockKind::fixed, "stem");
  int x = b.conv_bn_relu("stem", -1, 8, 3, 1);
  b.end();
  int in_ch = 8;
  const std::pair<int, int> plan[] = {{8, 1}, {16, 2}, {16, 1}};
  int i = 0;
  for (const auto& [ch, stride] : plan) {
    const std::string name = "ir" + std::to_string(++i);
    b.begin(BlockKind::inverted_residual, name);
    int y = b.conv_bn_relu(name + ".expand", x, in_ch * 4, 1, 1);
    y = b.relu(name + ".dw.relu", b.bn(name + ".dw.bn", b.dwconv(name + ".dw", y, 3, stride)));
    y = b.bn(name + ".project.bn", b.conv(name + ".project", y, ch, 1, 1));
    if (stride == 1 && in_ch == ch) y = b.layer(LayerKind::add, name + ".add", {y, x});
    b.end();
    x = y;
    in_ch = ch;
  }
  return b.finish(x);
}

std::vector<std::string> preset_names() {
  return {"vgg-small", "resnet-tiny", "depthwise-tiny", "inverted-tiny"};
}

ArchSpec make_preset(std::string_view name, int in_channels, int height, int width,
                     int num_classes) {
  if (name == "vgg-small") return vgg_small(in_channels, height, width, num_classes);
  if (name == "resnet-tiny") return resnet_tiny(in_channels, height, width, num_classes);
  if (name == "depthwise-tiny") return depthwise_tiny(in_channels, height, width, num_classes);
  if (name == "inverted-tiny") return inverted_tiny(in_channels, height, width, num_classes);
  fail(ErrorKind::config, "unknown architecture preset '" + std::string(name) + "'");
}

// ---- serialization ---------------------------------------------------------

std::string arch_to_json(const ArchSpec& arch) {
  using nlohmann::json;
  json j;
  j["schema"] = kArchSchema;
  j["name"] = arch.name;
  j["input"] = {arch.in_channels, arch.in_height, arch.in_width};
  j["num_classes"] = arch.num_classes;
  j["layers"] = json::array();
  for (const auto& l : arch.layers) {
    j["layers"].push_back({{"name", l.name},
                           {"kind", std::string(to_string(l.kind))},
                           {"inputs", l.inputs},
                           {"channels", l.channels},
                           {"kernel", l.kernel},
                           {"stride", l.stride},
                           {"padding", l.padding}});
  }
  j["blocks"] = json::array();
  for (const auto& b : arch.blocks) {
    j["blocks"].push_back({{"name", b.name},
                           {"kind", std::string(to_string(b.kind))},
                           {"body", b.body},
                           {"shortcut", b.shortcut}});
  }
  return j.dump(2) + "\n";
}

ArchSpec arch_from_json(const std::string& text) {
  using nlohmann::json;
  ArchSpec a;
  try {
    const json j = json::parse(text);
    require(j.value("schema", std::string()) == kArchSchema, ErrorKind::migration,
            "unsupported architecture schema '" + j.value("schema", std::string()) + "'");
    a.name = j.at("name").get<std::string>();
    const auto in = j.at("input").get<std::vector<int>>();
    require(in.size() == 3, ErrorKind::format, "input must be [C, H, W]");
    a.in_channels = in[0];
    a.in_height = in[1];
    a.in_width = in[2];
    a.num_classes = j.at("num_classes").get<int>();
    for (const auto& l : j.at("layers")) {
      a.layers.push_back(LayerSpec{layer_kind_from_string(l.at("kind").get<std::string>()),
                                   l.at("name").get<std::string>(),
                                   l.at("inputs").get<std::vector<int>>(),
                                   l.at("channels").get<int>(), l.at("kernel").get<int>(),
                                   l.at("stride").get<int>(), l.at("padding").get<int>()});
    }
    for (const auto& b : j.at("blocks")) {
      a.blocks.push_back(BlockSpec{block_kind_from_string(b.at("kind").get<std::string>()),
                                   b.at("name").get<std::string>(),
                                   b.at("body").get<std::vector<int>>(),
                                   b.at("shortcut").get<std::vector<int>>()});
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("architecture file: ") + e.what());
  }
  validate(a);
  return a;
}

void save_arch(const ArchSpec& arch, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path);
  out << arch_to_json(arch);
  require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path);
}

ArchSpec load_arch(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return arch_from_json(ss.str());
}

}  // namespace sprune
