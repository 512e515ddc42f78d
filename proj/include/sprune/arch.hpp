#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sprune/gate_state.hpp"

namespace sprune {

enum class LayerKind { conv, depthwise_conv, batchnorm, relu, pool, global_pool, linear, add };

/// One node of the layer graph. `inputs` index earlier layers; an empty list
/// means the network input. `channels` is the output width of conv and
/// linear layers; the other kinds inherit the width of their input.
struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  std::string name;
  std::vector<int> inputs;
  int channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;

  bool operator==(const LayerSpec&) const = default;
};

enum class BlockKind { plain, residual, depthwise, inverted_residual, fixed };

/// Grouping used by gate placement. `body` lists the main-path layers in
/// order; `shortcut` lists projection layers on the skip path.
struct BlockSpec {
  BlockKind kind = BlockKind::plain;
  std::string name;
  std::vector<int> body;
  std::vector<int> shortcut;

  bool operator==(const BlockSpec&) const = default;
};

struct ArchSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  std::vector<BlockSpec> blocks;
  int in_channels = 3;
  int in_height = 32;
  int in_width = 32;
  int num_classes = 10;

  bool operator==(const ArchSpec&) const = default;
};

enum class GateSite { post_bn, residual_middle, depthwise_second_bn, inverted_first_bn };

struct GatePlacement {
  std::vector<int> layer_ids;  // BatchNorm layers carrying gates, in layer order
  std::vector<GateSite> sites;

  std::size_t size() const noexcept { return layer_ids.size(); }
  bool operator==(const GatePlacement&) const = default;
};

/// A pruned structure: for every gated layer, the surviving channel indices
/// (sorted, unique) into the unpruned layer.
struct ChannelConfig {
  std::vector<std::vector<int>> kept_indices;

  std::vector<int> kept_counts() const;
  static ChannelConfig full(const std::vector<int>& widths);
  bool operator==(const ChannelConfig&) const = default;
};

/// Resolved shape and cost of one layer under a channel configuration.
struct LayerGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int in_height = 0, in_width = 0;
  int out_height = 0, out_width = 0;
  int groups = 1;
  int in_domain = -1;   // channel domain of the input, -1 for the network input
  int out_domain = -1;  // channel domain of the output
  std::int64_t macs = 0;
};

std::string_view to_string(LayerKind kind);
std::string_view to_string(BlockKind kind);
std::string_view to_string(GateSite site);
LayerKind layer_kind_from_string(std::string_view s);
BlockKind block_kind_from_string(std::string_view s);

/// Checks DAG order, single output, add-join widths and shape feasibility.
void validate(const ArchSpec& arch);

ArchSpec expand_channels(const ArchSpec& arch, double multiplier);

GatePlacement place_gates(const ArchSpec& arch);

/// Unpruned channel count of every gated layer.
std::vector<int> gated_widths(const ArchSpec& arch, const GatePlacement& placement);

/// Throws a config error unless `config` fits `arch`'s gate placement.
void check_config(const ArchSpec& arch, const GatePlacement& placement,
                  const ChannelConfig& config);

/// Per-layer geometry after pruning. Channel removals on a gated layer apply to
/// every layer sharing its channel domain and to the consumers' input widths.
std::vector<LayerGeometry> resolve_geometry(const ArchSpec& arch,
                                            const GatePlacement& placement,
                                            const ChannelConfig& config);
std::vector<LayerGeometry> resolve_geometry(const ArchSpec& arch);

/// Surviving channel indices of every channel domain (index = domain id).
std::vector<std::vector<int>> domain_indices(const ArchSpec& arch,
                                             const GatePlacement& placement,
                                             const ChannelConfig& config);

/// Multiply-accumulate count over conv and linear layers.
std::int64_t count_flops(const ArchSpec& arch);
std::int64_t count_flops(const ArchSpec& arch, const ChannelConfig& config);
std::int64_t count_flops(const ArchSpec& arch, const GatePlacement& placement,
                         const ChannelConfig& config);

/// Keeps channel c of gated layer j iff gates.lambda[j][c] > tau. A layer with
/// no survivors keeps its single highest-gate channel.
ChannelConfig prune_by_threshold(const GateState& gates, double tau);

// Built-in desk-scale presets.
ArchSpec vgg_small(int in_channels = 3, int height = 8, int width = 8, int num_classes = 3);
ArchSpec resnet_tiny(int in_channels = 3, int height = 8, int width = 8, int num_classes = 3);
ArchSpec depthwise_tiny(int in_channels = 3, int height = 8, int width = 8, int num_classes = 3);
ArchSpec inverted_tiny(int in_channels = 3, int height = 8, int width = 8, int num_classes = 3);
ArchSpec make_preset(std::string_view name, int in_channels, int height, int width,
                     int num_classes);
std::vector<std::string> preset_names();

std::string arch_to_json(const ArchSpec& arch);
ArchSpec arch_from_json(const std::string& text);
void save_arch(const ArchSpec& arch, const std::string& path);
ArchSpec load_arch(const std::string& path);

}  // namespace sprune
