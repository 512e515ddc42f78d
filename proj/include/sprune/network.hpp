#pragma once

#include <cstdint>
#include <vector>

#include "sprune/arch.hpp"
#include "sprune/autodiff.hpp"

namespace sprune {

/// Trainable state of one layer. Only the fields its kind uses are non-empty.
struct LayerParams {
  Tensor weight;  // conv [Cout, Cin/g, k, k]; linear [out, in]
  Tensor bias;    // linear only
  Tensor gamma, beta;
  BnRunningStats<float> stats;
};

struct ForwardOptions {
  BnMode bn_mode = BnMode::train;
  bool use_gates = false;
  bool params_require_grad = false;
  bool gates_require_grad = false;
  bool update_running_stats = true;
};

/// Tape handles produced by one forward pass. `params` is aligned with
/// Network::parameters(), `gates` with the gate placement.
struct ForwardTrace {
  VarId logits = -1;
  std::vector<VarId> params;
  std::vector<VarId> gates;
};

/// Executable model G(config): the architecture instantiated with the kept
/// channel counts of a ChannelConfig. Gates can be switched on for
/// importance learning and multiply the gated BatchNorm outputs.
class Network {
 public:
  Network(ArchSpec arch, ChannelConfig config);

  const ArchSpec& arch() const noexcept { return arch_; }
  const GatePlacement& placement() const noexcept { return placement_; }
  const ChannelConfig& config() const noexcept { return config_; }
  const std::vector<LayerGeometry>& geometry() const noexcept { return geometry_; }
  std::int64_t flops() const;

  std::vector<LayerParams>& layers() noexcept { return params_; }
  const std::vector<LayerParams>& layers() const noexcept { return params_; }

  /// Weights, biases and BN affine parameters in a stable order.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;

  /// One gate vector per gated layer, sized to the layer's kept width.
  std::vector<Tensor>& gates() noexcept { return gates_; }
  const std::vector<Tensor>& gates() const noexcept { return gates_; }
  void reset_gates(float value = 1.0f);

  /// He-normal conv weights, N(0, 1/in) classifier weights, gamma 1, beta 0,
  /// running stats (0, 1). Each layer draws from its own stream of `seed`.
  void initialize(std::uint64_t seed);

  template <typename T>
  ForwardTrace forward(BasicTape<T>& tape, const BasicTensor<T>& input,
                       const ForwardOptions& options);

  /// Logits of a batch in eval mode, no gradients.
  Tensor predict(const Tensor& input, bool use_gates = false);

  /// FNV-1a digest over every weight tensor's bytes.
  std::uint64_t weight_hash() const;

 private:
  ArchSpec arch_;
  GatePlacement placement_;
  ChannelConfig config_;
  std::vector<LayerGeometry> geometry_;
  std::vector<LayerParams> params_;
  std::vector<Tensor> gates_;
  std::vector<int> gate_of_layer_;
};

/// Fraction of correct argmax predictions, evaluated in eval mode in batches.
double accuracy(Network& net, const Tensor& images, std::span<const int> labels,
                bool use_gates = false, int batch_size = 256);

/// G(config) with freshly initialized weights from `seed`.
Network generate_model(const ArchSpec& arch, const ChannelConfig& config, std::uint64_t seed);
Network generate_model(const ArchSpec& arch, std::uint64_t seed);

/// Pruned network whose weights are the sub-tensors of `full` selected by
/// `config` on both channel axes.
Network lottery_slice_init(const Network& full, const ChannelConfig& config);

}  // namespace sprune
