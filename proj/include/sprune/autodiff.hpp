#pragma once

#include <functional>
#include <map>
#include <span>
#include <vector>

#include "sprune/tensor.hpp"

namespace sprune {

using VarId = int;

enum class OpKind {
  leaf,
  conv2d,
  batchnorm,
  gate_modulate,
  relu,
  avg_pool,
  global_avg_pool,
  linear,
  add,
  sum,
  cross_entropy,
};

/// Reverse-mode tape. Values are owned by the tape; leaves are copies of the
/// caller's tensors, so backward can never write into model parameters.
template <typename T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;
  using GradientMap = std::map<VarId, TensorT>;

  struct Node;
  // grads[i] is null when input i does not need a gradient.
  using BackwardFn = std::function<void(const BasicTape& tape, const Node& node,
                                        const TensorT& grad_out,
                                        std::span<TensorT* const> grads)>;

  struct Node {
    OpKind kind;
    std::vector<VarId> inputs;
    VarId output;
    BackwardFn backward;
  };

  VarId leaf(TensorT value, bool requires_grad);

  /// Appends an op. Rejects non-finite outputs with a divergence error.
  VarId record(OpKind kind, std::vector<VarId> inputs, TensorT output,
               BackwardFn backward);

  const TensorT& value(VarId id) const { return values_.at(check(id)); }
  bool requires_grad(VarId id) const { return requires_grad_.at(check(id)) != 0; }
  std::size_t size() const noexcept { return values_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  /// d(loss)/d(t) for every t in targets. Targets that the loss does not
  /// depend on get a zero tensor.
  GradientMap backward(VarId loss, std::span<const VarId> targets) const;

 private:
  std::size_t check(VarId id) const;

  std::vector<TensorT> values_;
  std::vector<char> requires_grad_;
  std::vector<int> producer_;  // node index, -1 for leaves
  std::vector<Node> nodes_;
};

using Tape = BasicTape<float>;

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

enum class BnMode { train, eval };

template <typename T>
struct BnRunningStats {
  BasicTensor<T> mean;
  BasicTensor<T> var;
};

constexpr double kBnMomentum = 0.1;
constexpr double kBnEps = 1e-5;

namespace ops {

/// Output spatial size of a strided, padded window; geometry error if < 1.
int conv_output_size(int in, int kernel, int stride, int padding);

template <typename T>
VarId conv2d(BasicTape<T>& tape, VarId input, VarId weight,
             const Conv2dOptions& opt);

/// In train mode the running stats are updated in place with kBnMomentum.
template <typename T>
VarId batchnorm(BasicTape<T>& tape, VarId input, VarId gamma, VarId beta,
                BnRunningStats<T>* stats, BnMode mode, double eps = kBnEps,
                double momentum = kBnMomentum);

template <typename T>
VarId gate_modulate(BasicTape<T>& tape, VarId input, VarId gates);

template <typename T>
VarId relu(BasicTape<T>& tape, VarId input);

/// Non-overlapping average pooling with window == stride == kernel.
template <typename T>
VarId avg_pool(BasicTape<T>& tape, VarId input, int kernel);

template <typename T>
VarId global_avg_pool(BasicTape<T>& tape, VarId input);

/// input [N, in], weight [out, in], bias [out] (bias may be -1).
template <typename T>
VarId linear(BasicTape<T>& tape, VarId input, VarId weight, VarId bias);

template <typename T>
VarId add(BasicTape<T>& tape, VarId a, VarId b);

template <typename T>
VarId sum(BasicTape<T>& tape, VarId input);

/// Mean over the batch of cross-entropy against (1-eps) one-hot + eps/classes.
/// eps = 0 is the plain cross-entropy.
template <typename T>
VarId cross_entropy(BasicTape<T>& tape, VarId logits, std::span<const int> labels,
                    double label_smoothing = 0.0);

}  // namespace ops
}  // namespace sprune
