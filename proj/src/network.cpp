#include "sprune/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "sprune/error.hpp"

namespace sprune {

namespace {

std::mt19937_64 layer_stream(std::uint64_t seed, std::size_t layer) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(layer), 0x5eedu};
  return std::mt19937_64(seq);
}

void fill_normal(Tensor& t, std::mt19937_64& rng, float stddev) {
  std::normal_distribution<float> dist(0.0f, stddev);
  for (auto& v : t.data()) v = dist(rng);
}

std::vector<int> iota_vec(int n) {
  std::vector<int> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

}  // namespace

Network::Network(ArchSpec arch, ChannelConfig config)
    : arch_(std::move(arch)), placement_(place_gates(arch_)), config_(std::move(config)) {
  geometry_ = resolve_geometry(arch_, placement_, config_);
  gate_of_layer_.assign(arch_.layers.size(), -1);
  for (std::size_t j = 0; j < placement_.size(); ++j) {
    gate_of_layer_[static_cast<std::size_t>(placement_.layer_ids[j])] = static_cast<int>(j);
  }
  params_.resize(arch_.layers.size());
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const auto& l = arch_.layers[i];
    const auto& g = geometry_[i];
    auto& p = params_[i];
    switch (l.kind) {
      case LayerKind::conv:
        p.weight = Tensor({g.out_channels, g.in_channels, l.kernel, l.kernel});
        break;
      case LayerKind::depthwise_conv:
        p.weight = Tensor({g.out_channels, 1, l.kernel, l.kernel});
        break;
      case LayerKind::linear:
        p.weight = Tensor({g.out_channels, g.in_channels});
        p.bias = Tensor({g.out_channels});
        break;
      case LayerKind::batchnorm:
        p.gamma = Tensor({g.out_channels}, 1.0f);
        p.beta = Tensor({g.out_channels}, 0.0f);
        p.stats = {Tensor({g.out_channels}, 0.0f), Tensor({g.out_channels}, 1.0f)};
        break;
      default:
        break;
    }
  }
  reset_gates(1.0f);
}

std::int64_t Network::flops() const {
  std::int64_t total = 0;
  for (const auto& g : geometry_) total += g.macs;
  return total;
}

std::vector<Tensor*> Network::parameters() {
  std::vector<Tensor*> out;
  for (auto& p : params_) {
    for (Tensor* t : {&p.weight, &p.bias, &p.gamma, &p.beta}) {
      if (!t->empty()) out.push_back(t);
    }
  }
  return out;
}

std::vector<const Tensor*> Network::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& p : params_) {
    for (const Tensor* t : {&p.weight, &p.bias, &p.gamma, &p.beta}) {
      if (!t->empty()) out.push_back(t);
    }
  }
  return out;
}

void Network::reset_gates(float value) {
  gates_.clear();
  for (int k : config_.kept_counts()) gates_.emplace_back(Shape{k}, value);
}

void Network::initialize(std::uint64_t seed) {
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const auto& l = arch_.layers[i];
    const auto& g = geometry_[i];
    auto& p = params_[i];
    auto rng = layer_stream(seed, i);
    switch (l.kind) {
      case LayerKind::conv: {
        const int fan_in = g.in_channels * l.kernel * l.kernel;
        fill_normal(p.weight, rng, std::sqrt(2.0f / static_cast<float>(fan_in)));
        break;
      }
      case LayerKind::depthwise_conv:
        fill_normal(p.weight, rng, std::sqrt(2.0f / static_cast<float>(l.kernel * l.kernel)));
        break;
      case LayerKind::linear:
        fill_normal(p.weight, rng, std::sqrt(1.0f / static_cast<float>(g.in_channels)));
        p.bias.fill(0.0f);
        break;
      case LayerKind::batchnorm:
        p.gamma.fill(1.0f);
        p.beta.fill(0.0f);
        p.stats.mean.fill(0.0f);
        p.stats.var.fill(1.0f);
        break;
      default:
        break;
    }
  }
}

template <typename T>
ForwardTrace Network::forward(BasicTape<T>& tape, const BasicTensor<T>& input,
                              const ForwardOptions& options) {
  require(input.rank() == 4 && input.dim(1) == arch_.in_channels &&
              input.dim(2) == arch_.in_height && input.dim(3) == arch_.in_width,
          ErrorKind::dimension,
          "input " + shape_string(input.shape()) + " does not match architecture input [N," +
              std::to_string(arch_.in_channels) + "," + std::to_string(arch_.in_height) + "," +
              std::to_string(arch_.in_width) + "]");
  ForwardTrace trace;
  const bool rg = options.params_require_grad;
  auto param = [&](const Tensor& t) {
    const VarId id = tape.leaf(t.template cast<T>(), rg);
    trace.params.push_back(id);
    return id;
  };
  const VarId x = tape.leaf(input, false);
  std::vector<VarId> out(arch_.layers.size(), -1);
  trace.gates.assign(placement_.size(), -1);
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    const auto& l = arch_.layers[i];
    auto& p = params_[i];
    const VarId in = l.inputs.empty() ? x : out[static_cast<std::size_t>(l.inputs[0])];
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::depthwise_conv: {
        const VarId w = param(p.weight);
        const int groups = l.kind == LayerKind::depthwise_conv ? geometry_[i].in_channels : 1;
        out[i] = ops::conv2d(tape, in, w, Conv2dOptions{l.stride, l.padding, groups});
        break;
      }
      case LayerKind::batchnorm: {
        const VarId gm = param(p.gamma);
        const VarId bt = param(p.beta);
        BnRunningStats<T> stats{p.stats.mean.template cast<T>(), p.stats.var.template cast<T>()};
        out[i] = ops::batchnorm(tape, in, gm, bt, &stats, options.bn_mode);
        if (options.bn_mode == BnMode::train && options.update_running_stats) {
          p.stats.mean = stats.mean.template cast<float>();
          p.stats.var = stats.var.template cast<float>();
        }
        const int j = gate_of_layer_[i];
        if (j >= 0 && options.use_gates) {
          const VarId gv = tape.leaf(gates_[static_cast<std::size_t>(j)].template cast<T>(),
                                     options.gates_require_grad);
          trace.gates[static_cast<std::size_t>(j)] = gv;
          out[i] = ops::gate_modulate(tape, out[i], gv);
        }
        break;
      }
      case LayerKind::relu:
        out[i] = ops::relu(tape, in);
        break;
      case LayerKind::pool:
        out[i] = ops::avg_pool(tape, in, l.kernel);
        break;
      case LayerKind::global_pool:
        out[i] = ops::global_avg_pool(tape, in);
        break;
      case LayerKind::linear: {
        const VarId w = param(p.weight);
        const VarId b = param(p.bias);
        out[i] = ops::linear(tape, in, w, b);
        break;
      }
      case LayerKind::add:
        out[i] = ops::add(tape, out[static_cast<std::size_t>(l.inputs[0])],
                          out[static_cast<std::size_t>(l.inputs[1])]);
        break;
    }
  }
  trace.logits = out.back();
  return trace;
}

template ForwardTrace Network::forward<float>(BasicTape<float>&, const BasicTensor<float>&,
                                              const ForwardOptions&);
template ForwardTrace Network::forward<double>(BasicTape<double>&, const BasicTensor<double>&,
                                               const ForwardOptions&);

Tensor Network::predict(const Tensor& input, bool use_gates) {
  Tape tape;
  ForwardOptions opt;
  opt.bn_mode = BnMode::eval;
  opt.use_gates = use_gates;
  const auto trace = forward(tape, input, opt);
  return tape.value(trace.logits);
}

std::uint64_t Network::weight_hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const Tensor* t : parameters()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t->ptr());
    for (std::size_t i = 0; i < t->numel() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

double accuracy(Network& net, const Tensor& images, std::span<const int> labels,
                bool use_gates, int batch_size) {
  const int n = images.dim(0);
  require(static_cast<std::size_t>(n) == labels.size(), ErrorKind::dimension,
          "image and label counts differ");
  if (n == 0) return 0.0;
  const std::size_t plane = images.numel() / static_cast<std::size_t>(n);
  int correct = 0;
  for (int start = 0; start < n; start += batch_size) {
    const int b = std::min(batch_size, n - start);
    Shape shape = images.shape();
    shape[0] = b;
    std::vector<float> chunk(images.ptr() + static_cast<std::size_t>(start) * plane,
                             images.ptr() + static_cast<std::size_t>(start + b) * plane);
    const Tensor logits = net.predict(Tensor(shape, std::move(chunk)), use_gates);
    const int k = logits.dim(1);
    for (int i = 0; i < b; ++i) {
      const float* row = logits.ptr() + static_cast<std::size_t>(i) * k;
      const int pred = static_cast<int>(std::max_element(row, row + k) - row);
      if (pred == labels[static_cast<std::size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / n;
}

Network generate_model(const ArchSpec& arch, const ChannelConfig& config, std::uint64_t seed) {
  for (int k : config.kept_counts()) {
    require(k >= 1, ErrorKind::generation, "a gated layer would be reduced to 0 channels");
  }
  Network net(arch, config);
  net.initialize(seed);
  return net;
}

Network generate_model(const ArchSpec& arch, std::uint64_t seed) {
  const auto placement = place_gates(arch);
  return generate_model(arch, ChannelConfig::full(gated_widths(arch, placement)), seed);
}

Network lottery_slice_init(const Network& full, const ChannelConfig& config) {
  const auto& arch = full.arch();
  require(full.config() == ChannelConfig::full(gated_widths(arch, full.placement())),
          ErrorKind::config, "lottery slicing needs the unpruned model's initialization");
  check_config(arch, full.placement(), config);
  const auto doms = domain_indices(arch, full.placement(), config);
  Network net(arch, config);
  const auto& geo = net.geometry();
  auto idx_of = [&](int dom, int input_width) {
    return dom < 0 ? iota_vec(input_width) : doms[static_cast<std::size_t>(dom)];
  };
  auto slice_vec = [](const Tensor& src, const std::vector<int>& keep) {
    Tensor out({static_cast<int>(keep.size())});
    for (std::size_t k = 0; k < keep.size(); ++k) out[k] = src[static_cast<std::size_t>(keep[k])];
    return out;
  };
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    const auto& src = full.layers()[i];
    auto& dst = net.layers()[i];
    const auto out_idx = idx_of(geo[i].out_domain, arch.in_channels);
    const auto in_idx = idx_of(geo[i].in_domain, arch.in_channels);
    switch (l.kind) {
      case LayerKind::conv: {
        const int full_in = src.weight.dim(1);
        const std::size_t kk = static_cast<std::size_t>(l.kernel) * l.kernel;
        for (std::size_t o = 0; o < out_idx.size(); ++o)
          for (std::size_t c = 0; c < in_idx.size(); ++c) {
            const float* s = src.weight.ptr() +
                             (static_cast<std::size_t>(out_idx[o]) * full_in + in_idx[c]) * kk;
            std::memcpy(dst.weight.ptr() + (o * in_idx.size() + c) * kk, s, kk * sizeof(float));
          }
        break;
      }
      case LayerKind::depthwise_conv: {
        const std::size_t kk = static_cast<std::size_t>(l.kernel) * l.kernel;
        for (std::size_t o = 0; o < out_idx.size(); ++o) {
          std::memcpy(dst.weight.ptr() + o * kk,
                      src.weight.ptr() + static_cast<std::size_t>(out_idx[o]) * kk, kk * sizeof(float));
        }
        break;
      }
      case LayerKind::linear: {
        const int full_in = src.weight.dim(1);
        for (std::size_t o = 0; o < out_idx.size(); ++o)
          for (std::size_t c = 0; c < in_idx.size(); ++c)
            dst.weight[o * in_idx.size() + c] =
                src.weight[static_cast<std::size_t>(out_idx[o]) * full_in + in_idx[c]];
        dst.bias = slice_vec(src.bias, out_idx);
        break;
      }
      case LayerKind::batchnorm:
        dst.gamma = slice_vec(src.gamma, out_idx);
        dst.beta = slice_vec(src.beta, out_idx);
        dst.stats = {slice_vec(src.stats.mean, out_idx), slice_vec(src.stats.var, out_idx)};
        break;
      default:
        break;
    }
  }
  for (std::size_t j = 0; j < config.kept_indices.size(); ++j) {
    net.gates()[j] = slice_vec(full.gates()[j], config.kept_indices[j]);
  }
  return net;
}

}  // namespace sprune
