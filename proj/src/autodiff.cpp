#include "sprune/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace sprune {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
bool all_finite(const BasicTensor<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
std::size_t BasicTape<T>::check(VarId id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < values_.size(),
          ErrorKind::contract, "unknown tape variable " + std::to_string(id));
  return static_cast<std::size_t>(id);
}

template <typename T>
VarId BasicTape<T>::leaf(TensorT value, bool requires_grad) {
  value.set_requires_grad(requires_grad);
  values_.push_back(std::move(value));
  requires_grad_.push_back(requires_grad ? 1 : 0);
  producer_.push_back(-1);
  return static_cast<VarId>(values_.size() - 1);
}

template <typename T>
VarId BasicTape<T>::record(OpKind kind, std::vector<VarId> inputs,
                           TensorT output, BackwardFn backward) {
  if (!all_finite(output)) {
    std::ostringstream os;
    os << "non-finite value produced by op " << static_cast<int>(kind)
       << " at tape position " << values_.size();
    fail(ErrorKind::divergence, os.str());
  }
  bool rg = false;
  for (VarId in : inputs) rg = rg || requires_grad(in);
  output.set_requires_grad(rg);
  const auto id = static_cast<VarId>(values_.size());
  values_.push_back(std::move(output));
  requires_grad_.push_back(rg ? 1 : 0);
  producer_.push_back(static_cast<int>(nodes_.size()));
  nodes_.push_back(Node{kind, std::move(inputs), id, std::move(backward)});
  return id;
}

template <typename T>
typename BasicTape<T>::GradientMap BasicTape<T>::backward(
    VarId loss, std::span<const VarId> targets) const {
  require(value(loss).numel() == 1, ErrorKind::contract,
          "backward needs a scalar loss, got shape " +
              shape_string(value(loss).shape()));
  std::vector<TensorT> grads(values_.size());
  std::vector<char> has(values_.size(), 0);
  grads[check(loss)] = TensorT(value(loss).shape(), T(1));
  has[check(loss)] = 1;

  const int last = producer_[check(loss)];
  std::vector<TensorT*> slots;
  for (int n = last; n >= 0; --n) {
    const Node& node = nodes_[static_cast<std::size_t>(n)];
    const auto out = static_cast<std::size_t>(node.output);
    if (!has[out] || !requires_grad_[out]) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const auto in = static_cast<std::size_t>(node.inputs[i]);
      if (!requires_grad_[in]) continue;
      if (!has[in]) {
        grads[in] = TensorT(values_[in].shape(), T(0));
        has[in] = 1;
      }
      slots[i] = &grads[in];
    }
    node.backward(*this, node, grads[out], slots);
    // Intermediate gradients are no longer needed once consumed.
    if (producer_[out] >= 0 && node.output != loss) {
      grads[out] = TensorT();
    }
  }

  GradientMap result;
  for (VarId t : targets) {
    const auto i = check(t);
    require(producer_[i] < 0, ErrorKind::contract,
            "gradient target " + std::to_string(t) + " is not a leaf");
    result[t] = has[i] ? grads[i] : TensorT(values_[i].shape(), T(0));
  }
  return result;
}

namespace ops {

int conv_output_size(int in, int kernel, int stride, int padding) {
  require(stride >= 1 && kernel >= 1 && padding >= 0, ErrorKind::geometry,
          "invalid window parameters");
  const int span = in + 2 * padding - kernel;
  require(span >= 0, ErrorKind::geometry,
          "window " + std::to_string(kernel) + " larger than padded input " +
              std::to_string(in + 2 * padding));
  return span / stride + 1;
}

namespace {

// Range of output columns ox whose input column ox*s + k - p lies in [0, w).
inline void valid_range(int k, int s, int p, int w, int out_w, int& lo, int& hi) {
  // smallest ox with ox*s >= p - k
  const int need = p - k;
  lo = need <= 0 ? 0 : (need + s - 1) / s;
  // largest ox with ox*s <= w - 1 + p - k
  const int top = w - 1 + p - k;
  hi = top < 0 ? -1 : std::min(out_w - 1, top / s);
}

// C[m x n] += A[m x k] * B[k x n], row-major with leading dimensions.
// Columns are processed in blocks so the C row segment stays in L1.
template <typename T>
void gemm_nn(int m, std::size_t n, int k, const T* a, std::size_t lda, const T* b,
             std::size_t ldb, T* c, std::size_t ldc) {
  constexpr std::size_t kBlock = 512;
  for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
    const std::size_t jn = std::min(kBlock, n - j0);
    for (int i = 0; i < m; ++i) {
      T* crow = c + static_cast<std::size_t>(i) * ldc + j0;
      const T* arow = a + static_cast<std::size_t>(i) * lda;
      int p = 0;
      // four B rows per pass: one load/store of C per four multiply-adds
      for (; p + 4 <= k; p += 4) {
        const T a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
        const T* b0 = b + static_cast<std::size_t>(p) * ldb + j0;
        const T* b1 = b0 + ldb;
        const T* b2 = b1 + ldb;
        const T* b3 = b2 + ldb;
        for (std::size_t j = 0; j < jn; ++j)
          crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
      for (; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + static_cast<std::size_t>(p) * ldb + j0;
        for (std::size_t j = 0; j < jn; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  constexpr std::size_t kLanes = 16;
  T lane[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t u = 0; u < kLanes; ++u) lane[u] += a[i + u] * b[i + u];
  T acc = 0;
  for (std::size_t u = 0; u < kLanes; ++u) acc += lane[u];
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile)
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile)
      for (std::size_t r = r0; r < std::min(rows, r0 + kTile); ++r)
        for (std::size_t c = c0; c < std::min(cols, c0 + kTile); ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace

template <typename T>
VarId conv2d(BasicTape<T>& tape, VarId input, VarId weight,
             const Conv2dOptions& opt) {
  const auto& x = tape.value(input);
  const auto& w = tape.value(weight);
  require(x.rank() == 4 && w.rank() == 4, ErrorKind::dimension,
          "conv2d expects 4-d input and weight, got " + shape_string(x.shape()) +
              " and " + shape_string(w.shape()));
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int g = opt.groups;
  require(g >= 1 && cin % g == 0 && cout % g == 0, ErrorKind::dimension,
          "channels " + std::to_string(cin) + "->" + std::to_string(cout) +
              " not divisible by groups " + std::to_string(g));
  require(w.dim(1) == cin / g, ErrorKind::dimension,
          "weight " + shape_string(w.shape()) + " does not match input channels " +
              std::to_string(cin) + " with groups " + std::to_string(g));
  const int s = opt.stride, p = opt.padding;
  const int oh = conv_output_size(h, kh, s, p);
  const int ow = conv_output_size(wd, kw, s, p);
  const int cin_g = cin / g, cout_g = cout / g;

  const int kk = cin_g * kh * kw;
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  const std::size_t np = static_cast<std::size_t>(n) * plane;

  // Patch matrix of one group: rows (ic, ky, kx), columns (b, oy, ox).
  auto im2col = [=](const T* xp, int grp, std::vector<T>& cols) {
    cols.assign(static_cast<std::size_t>(kk) * np, T(0));
    for (int ic = 0; ic < cin_g; ++ic)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          int lo, hi;
          valid_range(kx, s, p, wd, ow, lo, hi);
          T* row = cols.data() + static_cast<std::size_t>((ic * kh + ky) * kw + kx) * np;
          for (int b = 0; b < n; ++b) {
            const T* iplane = xp + (static_cast<std::size_t>(b) * cin + grp * cin_g + ic) * h * wd;
            T* dst = row + static_cast<std::size_t>(b) * plane;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * s + ky - p;
              if (iy < 0 || iy >= h) continue;
              const T* irow = iplane + iy * wd + kx - p;
              T* drow = dst + oy * ow;
              for (int ox = lo; ox <= hi; ++ox) drow[ox] = irow[ox * s];
            }
          }
        }
  };

  BasicTensor<T> out(Shape{n, cout, oh, ow});
  {
    std::vector<T> cols, acc;
    for (int grp = 0; grp < g; ++grp) {
      im2col(x.ptr(), grp, cols);
      acc.assign(static_cast<std::size_t>(cout_g) * np, T(0));
      gemm_nn(cout_g, np, kk, w.ptr() + static_cast<std::size_t>(grp) * cout_g * kk,
              static_cast<std::size_t>(kk), cols.data(), np, acc.data(), np);
      for (int ol = 0; ol < cout_g; ++ol) {
        const int oc = grp * cout_g + ol;
        for (int b = 0; b < n; ++b) {
          std::copy_n(acc.data() + static_cast<std::size_t>(ol) * np +
                          static_cast<std::size_t>(b) * plane,
                      plane, out.ptr() + (static_cast<std::size_t>(b) * cout + oc) * plane);
        }
      }
    }
  }

  auto backward = [=](const BasicTape<T>& tp, const typename BasicTape<T>::Node& node,
                      const BasicTensor<T>& gout,
                      std::span<BasicTensor<T>* const> grads) {
    const T* xp2 = tp.value(node.inputs[0]).ptr();
    const T* wp2 = tp.value(node.inputs[1]).ptr();
    T* gx = grads[0] ? grads[0]->ptr() : nullptr;
    T* gw = grads[1] ? grads[1]->ptr() : nullptr;
    std::vector<T> cols, gcols, w_t, gmat(static_cast<std::size_t>(cout_g) * np);
    for (int grp = 0; grp < g; ++grp) {
      // gradient rows of this group's outputs, laid out like the patch columns
      for (int ol = 0; ol < cout_g; ++ol) {
        const int oc = grp * cout_g + ol;
        for (int b = 0; b < n; ++b) {
          std::copy_n(gout.ptr() + (static_cast<std::size_t>(b) * cout + oc) * plane, plane,
                      gmat.data() + static_cast<std::size_t>(ol) * np +
                          static_cast<std::size_t>(b) * plane);
        }
      }
      if (gw) {
        im2col(xp2, grp, cols);
        // gW = G * cols^T, blocked over the long patch axis
        constexpr std::size_t kSpan = 256;
        T* gwg = gw + static_cast<std::size_t>(grp) * cout_g * kk;
        for (std::size_t j0 = 0; j0 < np; j0 += kSpan) {
          const std::size_t jn = std::min(kSpan, np - j0);
          for (int ol = 0; ol < cout_g; ++ol) {
            const T* gr = gmat.data() + static_cast<std::size_t>(ol) * np + j0;
            T* wrow = gwg + static_cast<std::size_t>(ol) * kk;
            for (int k = 0; k < kk; ++k) {
              wrow[k] += dot(gr, cols.data() + static_cast<std::size_t>(k) * np + j0, jn);
            }
          }
        }
      }
      if (gx) {
        gcols.assign(static_cast<std::size_t>(kk) * np, T(0));
        w_t.resize(static_cast<std::size_t>(cout_g) * kk);
        transpose(wp2 + static_cast<std::size_t>(grp) * cout_g * kk,
                  static_cast<std::size_t>(cout_g), static_cast<std::size_t>(kk), w_t.data());
        gemm_nn(kk, np, cout_g, w_t.data(), static_cast<std::size_t>(cout_g), gmat.data(), np,
                gcols.data(), np);
        // scatter patches back onto the input gradient
        for (int ic = 0; ic < cin_g; ++ic)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
              int lo, hi;
              valid_range(kx, s, p, wd, ow, lo, hi);
              const T* row = gcols.data() + static_cast<std::size_t>((ic * kh + ky) * kw + kx) * np;
              for (int b = 0; b < n; ++b) {
                T* gplane = gx + (static_cast<std::size_t>(b) * cin + grp * cin_g + ic) * h * wd;
                const T* src = row + static_cast<std::size_t>(b) * plane;
                for (int oy = 0; oy < oh; ++oy) {
                  const int iy = oy * s + ky - p;
                  if (iy < 0 || iy >= h) continue;
                  T* grow = gplane + iy * wd + kx - p;
                  const T* srow = src + oy * ow;
                  for (int ox = lo; ox <= hi; ++ox) grow[ox * s] += srow[ox];
                }
              }
            }
      }
    }
  };
  return tape.record(OpKind::conv2d, {input, weight}, std::move(out), backward);
}

template <typename T>
VarId batchnorm(BasicTape<T>& tape, VarId input, VarId gamma, VarId beta,
                BnRunningStats<T>* stats, BnMode mode, double eps,
                double momentum) {
  const auto& x = tape.value(input);
  require(x.rank() == 4, ErrorKind::dimension,
          "batchnorm expects 4-d input, got " + shape_string(x.shape()));
  require(eps > 0, ErrorKind::contract, "batchnorm eps must be positive");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const auto& gm = tape.value(gamma);
  const auto& bt = tape.value(beta);
  require(gm.numel() == static_cast<std::size_t>(c) && bt.numel() == gm.numel(),
          ErrorKind::dimension, "batchnorm affine parameters do not match " +
                                    std::to_string(c) + " channels");
  const std::size_t m = static_cast<std::size_t>(n) * hw;

  std::vector<T> mean(c), invstd(c);
  if (mode == BnMode::train) {
    require(m > 0, ErrorKind::statistics, "batchnorm statistics over an empty batch");
    for (int ch = 0; ch < c; ++ch) {
      T acc = 0;
      for (int b = 0; b < n; ++b) {
        const T* row = x.ptr() + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += row[i];
      }
      const T mu = acc / static_cast<T>(m);
      T sq = 0;
      for (int b = 0; b < n; ++b) {
        const T* row = x.ptr() + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const T d = row[i] - mu;
          sq += d * d;
        }
      }
      const T var = sq / static_cast<T>(m);
      mean[ch] = mu;
      invstd[ch] = T(1) / std::sqrt(var + static_cast<T>(eps));
      if (stats) {
        const T unbiased = m > 1 ? sq / static_cast<T>(m - 1) : var;
        const T mo = static_cast<T>(momentum);
        stats->mean[ch] = (1 - mo) * stats->mean[ch] + mo * mu;
        stats->var[ch] = (1 - mo) * stats->var[ch] + mo * unbiased;
      }
    }
  } else {
    require(stats != nullptr && stats->mean.numel() == static_cast<std::size_t>(c) &&
                stats->var.numel() == static_cast<std::size_t>(c),
            ErrorKind::statistics, "batchnorm eval mode needs running statistics");
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = stats->mean[ch];
      invstd[ch] = T(1) / std::sqrt(stats->var[ch] + static_cast<T>(eps));
    }
  }

  BasicTensor<T> xhat(x.shape());
  BasicTensor<T> out(x.shape());
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (x[off + i] - mean[ch]) * invstd[ch];
        xhat[off + i] = xh;
        out[off + i] = xh * gm[ch] + bt[ch];
      }
    }
  }

  const bool train = mode == BnMode::train;
  auto backward = [=, xhat = std::move(xhat)](
                      const BasicTape<T>& tp, const typename BasicTape<T>::Node& node,
                      const BasicTensor<T>& gout,
                      std::span<BasicTensor<T>* const> grads) {
    const auto& gmv = tp.value(node.inputs[1]);
    for (int ch = 0; ch < c; ++ch) {
      T sum_g = 0, sum_gx = 0;
      for (int b = 0; b < n; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_g += gout[off + i];
          sum_gx += gout[off + i] * xhat[off + i];
        }
      }
      if (grads[1]) (*grads[1])[ch] += sum_gx;
      if (grads[2]) (*grads[2])[ch] += sum_g;
      if (!grads[0]) continue;
      const T scale = gmv[ch] * invstd[ch];
      auto& gx = *grads[0];
      if (train) {
        const T inv_m = T(1) / static_cast<T>(m);
        for (int b = 0; b < n; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            gx[off + i] += scale * (gout[off + i] - inv_m * sum_g -
                                    xhat[off + i] * inv_m * sum_gx);
          }
        }
      } else {
        for (int b = 0; b < n; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) gx[off + i] += scale * gout[off + i];
        }
      }
    }
  };
  return tape.record(OpKind::batchnorm, {input, gamma, beta}, std::move(out),
                     backward);
}

template <typename T>
VarId gate_modulate(BasicTape<T>& tape, VarId input, VarId gates) {
  const auto& x = tape.value(input);
  const auto& gv = tape.value(gates);
  require(x.rank() == 4 && gv.numel() == static_cast<std::size_t>(x.dim(1)),
          ErrorKind::dimension,
          "gate vector of length " + std::to_string(gv.numel()) +
              " does not match input " + shape_string(x.shape()));
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  BasicTensor<T> out(x.shape());
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = x[off + i] * gv[ch];
    }
  }
  auto backward = [=](const BasicTape<T>& tp, const typename BasicTape<T>::Node& node,
                      const BasicTensor<T>& gout,
                      std::span<BasicTensor<T>* const> grads) {
    const auto& xv = tp.value(node.inputs[0]);
    const auto& gts = tp.value(node.inputs[1]);
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        if (grads[0]) {
          for (std::size_t i = 0; i < hw; ++i) (*grads[0])[off + i] += gout[off + i] * gts[ch];
        }
        if (grads[1]) {
          T acc = 0;
          for (std::size_t i = 0; i < hw; ++i) acc += gout[off + i] * xv[off + i];
          (*grads[1])[ch] += acc;
        }
      }
    }
  };
  return tape.record(OpKind::gate_modulate, {input, gates}, std::move(out), backward);
}

template <typename T>
VarId relu(BasicTape<T>& tape, VarId input) {
  const auto& x = tape.value(input);
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0 ? x[i] : T(0);
  auto backward = [](const BasicTape<T>& tp, const typename BasicTape<T>::Node& node,
                     const BasicTensor<T>& gout,
                     std::span<BasicTensor<T>* const> grads) {
    const auto& xv = tp.value(node.inputs[0]);
    auto& gx = *grads[0];
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      if (xv[i] > 0) gx[i] += gout[i];
    }
  };
  return tape.record(OpKind::relu, {input}, std::move(out), backward);
}

template <typename T>
VarId avg_pool(BasicTape<T>& tape, VarId input, int kernel) {
  const auto& x = tape.value(input);
  require(x.rank() == 4, ErrorKind::dimension,
          "avg_pool expects 4-d input, got " + shape_string(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = conv_output_size(h, kernel, kernel, 0);
  const int ow = conv_output_size(w, kernel, kernel, 0);
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  BasicTensor<T> out(Shape{n, c, oh, ow});
  for (int p = 0; p < n * c; ++p) {
    const T* ip = x.ptr() + static_cast<std::size_t>(p) * h * w;
    T* opl = out.ptr() + static_cast<std::size_t>(p) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T acc = 0;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            acc += ip[(oy * kernel + ky) * w + ox * kernel + kx];
          }
        }
        opl[oy * ow + ox] = acc * inv;
      }
    }
  }
  auto backward = [=](const BasicTape<T>&, const typename BasicTape<T>::Node&,
                      const BasicTensor<T>& gout,
                      std::span<BasicTensor<T>* const> grads) {
    auto& gx = *grads[0];
    for (int p = 0; p < n * c; ++p) {
      T* gp = gx.ptr() + static_cast<std::size_t>(p) * h * w;
      const T* go = gout.ptr() + static_cast<std::size_t>(p) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const T g = go[oy * ow + ox] * inv;
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              gp[(oy * kernel + ky) * w + ox * kernel + kx] += g;
            }
          }
        }
      }
    }
  };
  return tape.record(OpKind::avg_pool, {input}, std::move(out), backward);
}

template <typename T>
VarId global_avg_pool(BasicTape<T>& tape, VarId input) {
  const auto& x = tape.value(input);
  require(x.rank() == 4, ErrorKind::dimension,
          "global_avg_pool expects 4-d input, got " + shape_string(x.shape()));
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  require(hw > 0, ErrorKind::geometry, "global_avg_pool over empty plane");
  const T inv = T(1) / static_cast<T>(hw);
  BasicTensor<T> out(Shape{n, c});
  for (int p = 0; p < n * c; ++p) {
    T acc = 0;
    const T* ip = x.ptr() + static_cast<std::size_t>(p) * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += ip[i];
    out[p] = acc * inv;
  }
  auto backward = [=](const BasicTape<T>&, const typename BasicTape<T>::Node&,
                      const BasicTensor<T>& gout,
                      std::span<BasicTensor<T>* const> grads) {
    auto& gx = *grads[0];
    for (int p = 0; p < n * c; ++p) {
      const T g = gout[p] * inv;
      T* gp = gx.ptr() + static_cast<std::size_t>(p) * hw;
      for (std::size_t i = 0; i < hw; ++i) gp[i] += g;
    }
  };
  return tape.record(OpKind::global_avg_pool, {input}, std::move(out), backward);
}

template <typename T>
VarId linear(BasicTape<T>& tape, VarId input, VarId weight, VarId bias) {
  const auto& x = tape.value(input);
  const auto& w = tape.value(weight);
  require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
          ErrorKind::dimension, "linear shapes " + shape_string(x.shape()) +
                                    " and " + shape_string(w.shape()) + " mismatch");
  const int n = x.dim(0), in = x.dim(1), outf = w.dim(0);
  const bool has_bias = bias >= 0;
  if (has_bias) {
    require(tape.value(bias).numel() == static_cast<std::size_t>(outf),
            ErrorKind::dimension, "linear bias length mismatch");
  }
  BasicTensor<T> out(Shape{n, outf});
  for (int b = 0; b < n; ++b) {
    const T* xr = x.ptr() + static_cast<std::size_t>(b) * in;
    for (int o = 0; o < outf; ++o) {
      const T* wr = w.ptr() + static_cast<std::size_t>(o) * in;
      T acc = has_bias ? tape.value(bias)[o] : T(0);
      for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
      out[static_cast<std::size_t>(b) * outf + o] = acc;
    }
  }
  auto backward = [=](const BasicTape<T>& tp, const typename BasicTape<T>::Node& node,
                      const BasicTensor<T>& gout,
                      std::span<BasicTensor<T>* const> grads) {
    const auto& xv = tp.value(node.inputs[0]);
    const auto& wv = tp.value(node.inputs[1]);
    for (int b = 0; b < n; ++b) {
      for (int o = 0; o < outf; ++o) {
        const T g = gout[static_cast<std::size_t>(b) * outf + o];
        if (grads[0]) {
          T* gx = grads[0]->ptr() + static_cast<std::size_t>(b) * in;
          const T* wr = wv.ptr() + static_cast<std::size_t>(o) * in;
          for (int i = 0; i < in; ++i) gx[i] += g * wr[i];
        }
        if (grads[1]) {
          T* gw = grads[1]->ptr() + static_cast<std::size_t>(o) * in;
          const T* xr = xv.ptr() + static_cast<std::size_t>(b) * in;
          for (int i = 0; i < in; ++i) gw[i] += g * xr[i];
        }
        if (grads.size() > 2 && grads[2]) (*grads[2])[o] += g;
      }
    }
  };
  std::vector<VarId> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return tape.record(OpKind::linear, std::move(inputs), std::move(out), backward);
}

template <typename T>
VarId add(BasicTape<T>& tape, VarId a, VarId b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  require(x.shape() == y.shape(), ErrorKind::dimension,
          "add operands " + shape_string(x.shape()) + " and " +
              shape_string(y.shape()) + " differ");
  BasicTensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
  auto backward = [](const BasicTape<T>&, const typename BasicTape<T>::Node&,
                     const BasicTensor<T>& gout,
                     std::span<BasicTensor<T>* const> grads) {
    for (auto* g : grads) {
      if (!g) continue;
      for (std::size_t i = 0; i < gout.numel(); ++i) (*g)[i] += gout[i];
    }
  };
  return tape.record(OpKind::add, {a, b}, std::move(out), backward);
}

template <typename T>
VarId sum(BasicTape<T>& tape, VarId input) {
  const auto& x = tape.value(input);
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto backward = [](const BasicTape<T>&, const typename BasicTape<T>::Node&,
                     const BasicTensor<T>& gout,
                     std::span<BasicTensor<T>* const> grads) {
    auto& g = *grads[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += gout[0];
  };
  return tape.record(OpKind::sum, {input}, BasicTensor<T>(Shape{}, acc), backward);
}

template <typename T>
VarId cross_entropy(BasicTape<T>& tape, VarId logits, std::span<const int> labels,
                    double label_smoothing) {
  const auto& z = tape.value(logits);
  require(z.rank() == 2, ErrorKind::dimension,
          "cross_entropy expects [N, classes] logits, got " + shape_string(z.shape()));
  const int n = z.dim(0), k = z.dim(1);
  require(static_cast<int>(labels.size()) == n, ErrorKind::dimension,
          "label count does not match batch size");
  require(label_smoothing >= 0 && label_smoothing < 1, ErrorKind::contract,
          "label smoothing must be in [0, 1)");
  require(n > 0, ErrorKind::dimension, "cross_entropy over an empty batch");
  const T eps = static_cast<T>(label_smoothing);
  BasicTensor<T> probs(z.shape());
  T total = 0;
  for (int b = 0; b < n; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    require(y >= 0 && y < k, ErrorKind::label,
            "label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    const T* zr = z.ptr() + static_cast<std::size_t>(b) * k;
    T mx = zr[0];
    for (int c = 1; c < k; ++c) mx = std::max(mx, zr[c]);
    T se = 0;
    for (int c = 0; c < k; ++c) se += std::exp(zr[c] - mx);
    const T lse = mx + std::log(se);
    T row = 0;
    for (int c = 0; c < k; ++c) {
      const T q = (c == y ? 1 - eps : T(0)) + eps / static_cast<T>(k);
      row -= q * (zr[c] - lse);
      probs[static_cast<std::size_t>(b) * k + c] = std::exp(zr[c] - lse);
    }
    total += row;
  }
  std::vector<int> ys(labels.begin(), labels.end());
  auto backward = [=, probs = std::move(probs), ys = std::move(ys)](
                      const BasicTape<T>&, const typename BasicTape<T>::Node&,
                      const BasicTensor<T>& gout,
                      std::span<BasicTensor<T>* const> grads) {
    auto& g = *grads[0];
    const T scale = gout[0] / static_cast<T>(n);
    for (int b = 0; b < n; ++b) {
      for (int c = 0; c < k; ++c) {
        const std::size_t i = static_cast<std::size_t>(b) * k + c;
        const T q = (c == ys[static_cast<std::size_t>(b)] ? 1 - eps : T(0)) +
                    eps / static_cast<T>(k);
        g[i] += scale * (probs[i] - q);
      }
    }
  };
  return tape.record(OpKind::cross_entropy, {logits},
                     BasicTensor<T>(Shape{}, total / static_cast<T>(n)), backward);
}

#define SPRUNE_INSTANTIATE_OPS(T)                                                   \
  template VarId conv2d<T>(BasicTape<T>&, VarId, VarId, const Conv2dOptions&);      \
  template VarId batchnorm<T>(BasicTape<T>&, VarId, VarId, VarId,                   \
                              BnRunningStats<T>*, BnMode, double, double);          \
  template VarId gate_modulate<T>(BasicTape<T>&, VarId, VarId);                     \
  template VarId relu<T>(BasicTape<T>&, VarId);                                     \
  template VarId avg_pool<T>(BasicTape<T>&, VarId, int);                            \
  template VarId global_avg_pool<T>(BasicTape<T>&, VarId);                          \
  template VarId linear<T>(BasicTape<T>&, VarId, VarId, VarId);                     \
  template VarId add<T>(BasicTape<T>&, VarId, VarId);                               \
  template VarId sum<T>(BasicTape<T>&, VarId);                                      \
  template VarId cross_entropy<T>(BasicTape<T>&, VarId, std::span<const int>, double);

SPRUNE_INSTANTIATE_OPS(float)
SPRUNE_INSTANTIATE_OPS(double)

}  // namespace ops

template class BasicTape<float>;
template class BasicTape<double>;
template bool all_finite<float>(const BasicTensor<float>&);
template bool all_finite<double>(const BasicTensor<double>&);

}  // namespace sprune
