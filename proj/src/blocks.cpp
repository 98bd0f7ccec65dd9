#include "epanet/blocks.hpp"

#include <cmath>
#include <sstream>

#include "epanet/errors.hpp"
#include "epanet/flops.hpp"

namespace epanet::blocks {

namespace nn = torch::nn;

namespace {

nn::Conv2d make_conv(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride = 1,
                     std::int64_t dilation = 1, std::int64_t groups = 1, bool bias = true) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel)
                        .stride(stride)
                        .padding(dilation * (kernel - 1) / 2)
                        .dilation(dilation)
                        .groups(groups)
                        .bias(bias));
}

nn::BatchNorm2d make_bn(std::int64_t channels) {
  return nn::BatchNorm2d(nn::BatchNorm2dOptions(channels).eps(kBatchNormEps).momentum(kBatchNormMomentum));
}

// Extent of a 3x3 kernel at dilation 4.
constexpr std::int64_t kWidestKernelExtent = 9;

}  // namespace

void BlockConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("block channels must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("block kernel must be a positive odd integer");
  if (stride < 1 || dilation < 1) throw ConfigError("block stride and dilation must be positive");
  if (n_bottlenecks < 0) throw ConfigError("n_bottlenecks must be non-negative");
}

void require_channels(const torch::Tensor& x, std::int64_t channels, const char* where) {
  if (x.dim() != 4) {
    throw ConfigError(std::string(where) + ": expected a rank-4 NCHW tensor, got rank " + std::to_string(x.dim()));
  }
  if (x.size(1) != channels) {
    std::ostringstream msg;
    msg << where << ": expected " << channels << " input channels, got " << x.size(1);
    throw ConfigError(msg.str());
  }
}

void require_finite(const torch::Tensor& x, const std::string& where) {
  // A single reduction: any NaN or Inf makes the sum non-finite.
  const double total = x.detach().sum().item<double>();
  if (!std::isfinite(total) && !torch::isfinite(x.detach()).all().item<bool>()) {
    throw NumericError(where + ": non-finite values in tensor");
  }
}

// ---------------------------------------------------------------- CBS

CbsImpl::CbsImpl(const BlockConfig& cfg, std::int64_t groups) : cfg_(cfg) {
  cfg_.validate();
  conv = register_module("conv", make_conv(cfg.in_channels, cfg.out_channels, cfg.kernel, cfg.stride,
                                           cfg.dilation, groups, /*bias=*/false));
  bn = register_module("bn", make_bn(cfg.out_channels));
}

torch::Tensor CbsImpl::forward(const torch::Tensor& x) {
  require_channels(x, cfg_.in_channels, "CBS");
  require_finite(x, "CBS input");
  return flops::silu(flops::batch_norm(bn, flops::conv(conv, x)));
}

// ---------------------------------------------------------------- Bottleneck

BottleneckImpl::BottleneckImpl(std::int64_t in_channels, std::int64_t out_channels) {
  if (in_channels != out_channels) {
    throw ConfigError("Bottleneck: residual requires in_channels == out_channels (" + std::to_string(in_channels) +
                      " vs " + std::to_string(out_channels) + ")");
  }
  if (in_channels < 1) throw ConfigError("Bottleneck: channels must be positive");
  reduce = register_module("reduce", make_conv(in_channels, in_channels, 1, 1, 1, 1, /*bias=*/false));
  bn = register_module("bn", make_bn(in_channels));
  expand = register_module("expand", make_conv(in_channels, in_channels, 3));
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& x) {
  require_channels(x, reduce->options.in_channels(), "Bottleneck");
  auto h = flops::silu(flops::batch_norm(bn, flops::conv(reduce, x)));
  auto y = flops::conv(expand, h) + x;
  return flops::elementwise("add", y);
}

// ---------------------------------------------------------------- attention

BranchStats channel_soft_attention(const std::array<torch::Tensor, 4>& branches) {
  const auto& ref = branches[0];
  if (ref.dim() != 4) throw ConfigError("channel_soft_attention: branches must be rank-4");
  for (std::size_t n = 1; n < branches.size(); ++n) {
    if (branches[n].sizes() != ref.sizes()) {
      std::ostringstream msg;
      msg << "channel_soft_attention: branch " << n + 1 << " has shape " << branches[n].sizes()
          << ", expected " << ref.sizes();
      throw ConfigError(msg.str());
    }
  }
  std::array<torch::Tensor, 4> pooled;
  for (std::size_t n = 0; n < branches.size(); ++n) {
    pooled[n] = branches[n].mean({2, 3});  // [B, C/4]
    flops::elementwise("pool", branches[n]);
  }
  auto s = torch::stack({pooled[0], pooled[1], pooled[2], pooled[3]}, 1);  // [B, 4, C/4]
  auto beta = torch::softmax(s, 1);
  flops::elementwise("softmax", s, 3);
  return {s, beta};
}

// ---------------------------------------------------------------- MS-DDSP

MsDdspImpl::MsDdspImpl(std::int64_t channels) : channels_(channels) {
  if (channels < 4 || channels % 4 != 0) {
    throw ConfigError("MS-DDSP: channel count must be a positive multiple of 4, got " + std::to_string(channels));
  }
  const std::int64_t q = channels / 4;
  adjust = register_module("adjust", Cbs(channels, channels, 1));
  dc1 = register_module("dc1", make_conv(q, q, 3, 1, 1));
  dc2 = register_module("dc2", make_conv(q, q, 3, 1, 2));
  dc3 = register_module("dc3", make_conv(q, q, 3, 1, 4));
  dsc_depthwise = register_module("dsc_depthwise", make_conv(q, q, 3, 1, 1, /*groups=*/q));
  dsc_pointwise = register_module("dsc_pointwise", make_conv(q, q, 1));
  pwc = register_module("pwc", make_conv(q, q, 1));
}

torch::Tensor MsDdspImpl::dilated_branch(const torch::Tensor& x1) {
  const auto h = x1.size(2);
  const auto w = x1.size(3);
  auto y = flops::conv(dc3, flops::conv(dc2, flops::conv(dc1, x1)));
  // Upsample back to the branch input resolution; stride-1 same padding
  // keeps the size, so this is the identity.
  if (y.size(2) != h || y.size(3) != w) {
    y = torch::nn::functional::interpolate(
        y, torch::nn::functional::InterpolateFuncOptions().size(std::vector<std::int64_t>{h, w}).mode(torch::kNearest));
  }
  return y;
}

MsDdspImpl::Trace MsDdspImpl::trace(const torch::Tensor& x) {
  require_channels(x, channels_, "MS-DDSP");
  if (x.size(2) < kWidestKernelExtent || x.size(3) < kWidestKernelExtent) {
    std::ostringstream msg;
    msg << "MS-DDSP: input " << x.size(2) << "x" << x.size(3) << " is smaller than the d=4 kernel extent ("
        << kWidestKernelExtent << "); relying on zero padding";
    warn(msg.str());
  }
  Trace t;
  t.adjusted = adjust(x);
  auto chunks = t.adjusted.chunk(4, 1);
  for (std::size_t n = 0; n < 4; ++n) t.splits[n] = chunks[n];

  t.branches[0] = dilated_branch(t.splits[0]);
  t.branches[1] = flops::conv(dsc_pointwise, flops::conv(dsc_depthwise, t.splits[1]));
  t.branches[2] = flops::conv(pwc, t.splits[2]);
  t.branches[3] = t.splits[3];

  t.y1 = torch::cat({t.branches[0], t.branches[1], t.branches[2], t.branches[3]}, 1);
  t.stats = channel_soft_attention(t.branches);

  std::vector<torch::Tensor> weighted;
  weighted.reserve(4);
  for (std::int64_t n = 0; n < 4; ++n) {
    auto beta_n = t.stats.beta.select(1, n).unsqueeze(-1).unsqueeze(-1);  // [B, C/4, 1, 1]
    weighted.push_back(t.branches[n] * beta_n);
  }
  t.y2 = flops::elementwise("mul", torch::cat(weighted, 1));
  t.out = flops::elementwise("add", t.y1 + t.y2);
  return t;
}

torch::Tensor MsDdspImpl::forward(const torch::Tensor& x) { return trace(x).out; }

// ---------------------------------------------------------------- C2f

C2fImpl::C2fImpl(const BlockConfig& cfg, BottleneckKind kind) : cfg_(cfg), kind_(kind) {
  cfg_.validate();
  const std::int64_t hidden = cfg.out_channels;
  if (hidden % 2 != 0) {
    throw ConfigError("C2f: internal width must be even to split, got " + std::to_string(hidden));
  }
  const std::int64_t half = hidden / 2;
  if (kind == BottleneckKind::msddsp && half % 4 != 0) {
    throw ConfigError("MS-c2f: split width " + std::to_string(half) + " is not divisible by 4");
  }
  residual_ = cfg.in_channels == cfg.out_channels;
  project_in = register_module("project_in", make_conv(cfg.in_channels, hidden, 1));
  bottlenecks = register_module("bottlenecks", nn::ModuleList());
  for (std::int64_t i = 0; i < cfg.n_bottlenecks; ++i) {
    if (kind == BottleneckKind::msddsp) {
      bottlenecks->push_back(MsDdsp(half));
    } else {
      bottlenecks->push_back(Bottleneck(half));
    }
  }
  project_out = register_module("project_out", make_conv(hidden, cfg.out_channels, 1));
}

torch::Tensor C2fImpl::forward(const torch::Tensor& x) {
  require_channels(x, cfg_.in_channels, kind_ == BottleneckKind::msddsp ? "MS-c2f" : "C2f");
  require_finite(x, "C2f input");
  auto halves = flops::conv(project_in, x).chunk(2, 1);
  auto fa = halves[0];
  for (const auto& m : *bottlenecks) {
    if (auto* plain = m->as<BottleneckImpl>()) {
      fa = plain->forward(fa);
    } else {
      fa = m->as<MsDdspImpl>()->forward(fa);
    }
  }
  auto y = flops::conv(project_out, torch::cat({fa, halves[1]}, 1));
  if (residual_) y = flops::elementwise("add", y + x);
  return y;
}

// ---------------------------------------------------------------- utilities

std::int64_t count_params(const torch::nn::Module& module) {
  std::int64_t total = 0;
  for (const auto& p : module.parameters()) total += p.numel();
  return total;
}

void zero_conv_params(torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  for (const auto& m : module.modules(/*include_self=*/true)) {
    if (auto* conv = m->as<torch::nn::Conv2dImpl>()) {
      conv->weight.zero_();
      if (conv->bias.defined()) conv->bias.zero_();
    }
  }
}

}  // namespace epanet::blocks
