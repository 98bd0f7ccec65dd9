#include "epanet/flops.hpp"

#include <numeric>

namespace epanet::flops {
namespace {
thread_local Scope* current = nullptr;
}

Scope::Scope() : previous_(current) { current = this; }

Scope::~Scope() { current = previous_; }

std::int64_t Scope::total() const {
  return std::accumulate(records_.begin(), records_.end(), std::int64_t{0},
                         [](std::int64_t acc, const LayerRecord& r) { return acc + r.flops; });
}

Section::Section(std::string label) {
  if (current != nullptr) {
    current->sections_.push_back(std::move(label));
    pushed_ = true;
  }
}

Section::~Section() {
  if (pushed_ && current != nullptr) current->sections_.pop_back();
}

bool active() { return current != nullptr; }

void record(std::string_view kind, std::int64_t flops) {
  if (current == nullptr) return;
  std::string path;
  for (const auto& s : current->sections_) {
    if (!path.empty()) path += '/';
    path += s;
  }
  current->records_.push_back({std::move(path), std::string(kind), flops});
}

std::int64_t conv2d_flops(const torch::nn::detail::ConvNdOptions<2>& options, const torch::Tensor& out) {
  const auto& k = options.kernel_size();
  const std::int64_t kernel_area = k->at(0) * k->at(1);
  const std::int64_t out_spatial = out.size(0) * out.size(2) * out.size(3);
  return 2 * kernel_area * options.in_channels() * options.out_channels() * out_spatial / options.groups();
}

torch::Tensor conv(const torch::nn::Conv2d& conv, const torch::Tensor& x) {
  auto y = conv.ptr()->forward(x);
  if (active()) record("conv", conv2d_flops(conv->options, y));
  return y;
}

torch::Tensor batch_norm(const torch::nn::BatchNorm2d& bn, const torch::Tensor& x) {
  auto y = bn.ptr()->forward(x);
  if (active()) record("bn", 2 * y.numel());
  return y;
}

torch::Tensor silu(const torch::Tensor& x) {
  auto y = torch::silu(x);
  if (active()) record("act", y.numel());
  return y;
}

const torch::Tensor& elementwise(std::string_view kind, const torch::Tensor& t, std::int64_t coefficient) {
  if (active()) record(kind, coefficient * t.numel());
  return t;
}

}  // namespace epanet::flops
