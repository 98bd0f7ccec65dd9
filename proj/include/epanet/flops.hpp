#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace epanet::flops {

struct LayerRecord {
  std::string section;  // "/"-joined path of enclosing Section labels
  std::string kind;     // conv, bn, act, add, mul, pool, ...
  std::int64_t flops = 0;
};

/// Activates FLOP recording on the current thread for its lifetime.
/// Layers executed while no Scope is alive record nothing.
class Scope {
 public:
  Scope();
  ~Scope();
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

  const std::vector<LayerRecord>& records() const { return records_; }
  std::int64_t total() const;

 private:
  friend void record(std::string_view, std::int64_t);
  friend class Section;
  std::vector<LayerRecord> records_;
  std::vector<std::string> sections_;
  Scope* previous_ = nullptr;
};

/// Labels every record made while alive (no-op without an active Scope).
class Section {
 public:
  explicit Section(std::string label);
  ~Section();
  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

 private:
  bool pushed_ = false;
};

bool active();
void record(std::string_view kind, std::int64_t flops);

/// 2 * k^2 * Cin * Cout * Hout * Wout / groups for a convolution producing `out`.
std::int64_t conv2d_flops(const torch::nn::detail::ConvNdOptions<2>& options, const torch::Tensor& out);

/// Runs `conv` on `x` and records its closed-form cost.
torch::Tensor conv(const torch::nn::Conv2d& conv, const torch::Tensor& x);
/// Inference-form batch norm: one multiply and one add per element.
torch::Tensor batch_norm(const torch::nn::BatchNorm2d& bn, const torch::Tensor& x);
torch::Tensor silu(const torch::Tensor& x);
/// Records `coefficient * numel(t)` under `kind` and returns t unchanged.
const torch::Tensor& elementwise(std::string_view kind, const torch::Tensor& t, std::int64_t coefficient = 1);

}  // namespace epanet::flops
