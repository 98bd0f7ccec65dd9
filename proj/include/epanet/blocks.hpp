#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <torch/torch.h>

// Convolutional building blocks of the detector: CBS, the residual
// Bottleneck, the C2f cross-stage block, the four-branch MS-DDSP bottleneck
// and MS-c2f (C2f built around MS-DDSP).
//
// Tensors are NCHW. All blocks work in float32 or float64; the precision of
// the parameters follows `module->to(dtype)`.

namespace epanet::blocks {

inline constexpr double kBatchNormEps = 1e-3;
inline constexpr double kBatchNormMomentum = 0.03;

struct BlockConfig {
  std::int64_t in_channels = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t dilation = 1;
  std::int64_t n_bottlenecks = 1;

  /// Throws ConfigError on non-positive sizes or an even kernel.
  void validate() const;
};

/// Throws ConfigError unless `x` is rank 4 with `channels` channels.
void require_channels(const torch::Tensor& x, std::int64_t channels, const char* where);
/// Throws NumericError if `x` holds NaN or Inf.
void require_finite(const torch::Tensor& x, const std::string& where);

/// Conv (no bias) -> BatchNorm -> SiLU with "same" padding.
class CbsImpl : public torch::nn::Module {
 public:
  explicit CbsImpl(const BlockConfig& cfg, std::int64_t groups = 1);
  CbsImpl(std::int64_t in, std::int64_t out, std::int64_t kernel = 1, std::int64_t stride = 1)
      : CbsImpl(BlockConfig{in, out, kernel, stride, 1, 0}) {}

  torch::Tensor forward(const torch::Tensor& x);

  const BlockConfig& config() const { return cfg_; }

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};

 private:
  BlockConfig cfg_;
};
TORCH_MODULE(Cbs);

/// B(F) = Conv3x3(SiLU(BN(Conv1x1(F)))) + F. The hidden width equals the
/// block width so the residual is always defined.
class BottleneckImpl : public torch::nn::Module {
 public:
  BottleneckImpl(std::int64_t in_channels, std::int64_t out_channels);
  explicit BottleneckImpl(std::int64_t channels) : BottleneckImpl(channels, channels) {}

  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d reduce{nullptr};  // 1x1, no bias (BN follows)
  torch::nn::BatchNorm2d bn{nullptr};
  torch::nn::Conv2d expand{nullptr};  // 3x3, with bias
};
TORCH_MODULE(Bottleneck);

/// Per-branch channel statistics and softmax weights, each [B, 4, C/4].
struct BranchStats {
  torch::Tensor s;
  torch::Tensor beta;
};

/// GAP over each branch, then softmax across the four branches at every
/// channel position. All branches must share one shape.
BranchStats channel_soft_attention(const std::array<torch::Tensor, 4>& branches);

/// Multi-scale diverse-division bottleneck.
///
///   X' = CBS1x1(X); [X1', X2', X3', X4'] = split into C/4 chunks
///   X1 = dilated 3x3 convs, d = 1, 2, 4 (stride 1, same padding)
///   X2 = pointwise(depthwise3x3(X2'))
///   X3 = pointwise(X3')
///   X4 = X4'
///   Y1 = concat(X1..X4); beta = softmax_n(GAP(Xn)); Y2 = concat(Xn * beta_n)
///   Y  = Y1 + Y2
///
/// Spatial size is preserved. Inputs smaller than the d=4 kernel extent (9)
/// are accepted and reported through the warning log.
class MsDdspImpl : public torch::nn::Module {
 public:
  explicit MsDdspImpl(std::int64_t channels);

  struct Trace {
    torch::Tensor adjusted;
    std::array<torch::Tensor, 4> splits;
    std::array<torch::Tensor, 4> branches;
    BranchStats stats;
    torch::Tensor y1;
    torch::Tensor y2;
    torch::Tensor out;
  };

  torch::Tensor forward(const torch::Tensor& x);
  /// Same computation as forward, keeping every intermediate.
  Trace trace(const torch::Tensor& x);
  /// The staged dilated-convolution branch on its own (C/4 channels in and out).
  torch::Tensor dilated_branch(const torch::Tensor& x1);

  std::int64_t channels() const { return channels_; }

  Cbs adjust{nullptr};
  torch::nn::Conv2d dc1{nullptr}, dc2{nullptr}, dc3{nullptr};
  torch::nn::Conv2d dsc_depthwise{nullptr}, dsc_pointwise{nullptr};
  torch::nn::Conv2d pwc{nullptr};

 private:
  std::int64_t channels_;
};
TORCH_MODULE(MsDdsp);

enum class BottleneckKind { plain, msddsp };

/// Y = Conv1x1(Concat(Bottleneck^N(Fa), Fb)) + X with Fa, Fb = Split(Conv1x1(X)).
/// Only the last bottleneck output is concatenated. The hidden width equals
/// out_channels. When in_channels != out_channels the outer residual is
/// dropped (`has_residual()` reports it).
class C2fImpl : public torch::nn::Module {
 public:
  C2fImpl(const BlockConfig& cfg, BottleneckKind kind = BottleneckKind::plain);

  torch::Tensor forward(const torch::Tensor& x);

  bool has_residual() const { return residual_; }
  BottleneckKind kind() const { return kind_; }
  const BlockConfig& config() const { return cfg_; }

  torch::nn::Conv2d project_in{nullptr};
  torch::nn::ModuleList bottlenecks{nullptr};
  torch::nn::Conv2d project_out{nullptr};

 private:
  BlockConfig cfg_;
  BottleneckKind kind_;
  bool residual_;
};
TORCH_MODULE(C2f);

/// C2f with MS-DDSP in place of the plain bottleneck. Requires the split
/// width (out_channels / 2) to be divisible by 4.
inline C2f make_msc2f(const BlockConfig& cfg) { return C2f(cfg, BottleneckKind::msddsp); }

/// Total number of learnable scalars.
std::int64_t count_params(const torch::nn::Module& module);

/// Zero every parameter whose name ends in "weight" or "bias" of a conv
/// layer; BN affine and running stats are left at their defaults.
void zero_conv_params(torch::nn::Module& module);

}  // namespace epanet::blocks
