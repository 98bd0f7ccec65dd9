#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

// Literal, loop-based transcriptions of the block and pyramid equations.
//
// Nothing in this header touches libtorch or the production blocks: every
// operator is written out as nested loops over plain arrays so that the
// production code can be checked against an independent route. Speed is not
// a goal; keep inputs small (<= 1x16x12x12).

namespace epanet::verify::oracle {

// BN epsilon of the production blocks; restated here on purpose.
inline constexpr double kBnEps = 1e-3;

/// Dense row-major array (rank 1 or 4 in practice).
struct Array {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(std::vector<std::int64_t> dims, double fill = 0.0);

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t dim(std::size_t i) const { return shape.at(i); }

  double& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w);
  double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;
};

using ParamMap = std::map<std::string, Array>;

const Array& param(const ParamMap& params, const std::string& name);
bool has_param(const ParamMap& params, const std::string& name);

// --- primitive operators ---------------------------------------------------

/// Direct convolution with zero padding. `bias` may be null.
Array conv2d(const Array& x, const Array& weight, const Array* bias, std::int64_t stride, std::int64_t padding,
             std::int64_t dilation, std::int64_t groups);
/// Inference-mode batch norm from running statistics.
Array batch_norm(const Array& x, const Array& gamma, const Array& beta, const Array& mean, const Array& var);
Array silu(const Array& x);
Array add(const Array& a, const Array& b);
Array concat_channels(const std::vector<Array>& parts);
/// Channel slice [begin, begin + count).
Array slice_channels(const Array& x, std::int64_t begin, std::int64_t count);
Array upsample_nearest(const Array& x, std::int64_t factor);
/// Spatial mean per (n, c), returned as [N, C, 1, 1].
Array global_average_pool(const Array& x);

// --- equations ---------------------------------------------------------------

/// Bottleneck: Conv3x3(SiLU(BN(Conv1x1(F)))) + F. Parameter names relative to
/// `prefix`: reduce.weight, bn.{weight,bias,running_mean,running_var},
/// expand.{weight,bias}.
Array bottleneck(const Array& f, const ParamMap& params, const std::string& prefix = "");

/// MS-DDSP bottleneck, split / branches / GAP / softmax / weighted merge.
Array msddsp(const Array& x, const ParamMap& params, const std::string& prefix = "");

/// C2f (and MS-c2f, detected from the parameter names):
/// Conv1x1(Concat(Bottleneck^N(Fa), Fb)) + X.
Array c2f(const Array& x, const ParamMap& params, const std::string& prefix = "");

/// Top-down FPN over C3, C4, C5 with P5 = Conv3x3(Conv1x1(C5)) and
/// P_i = Conv3x3(Conv1x1(C_i) + up2(P_{i+1})). Returns {P3, P4, P5}.
/// Parameter names: lateral{3,4,5}.{weight,bias}, smooth{3,4,5}.{weight,bias}.
std::vector<Array> fpn(const Array& c3, const Array& c4, const Array& c5, const ParamMap& params);

enum class Equation { fpn_1_3, c2f_4_5, bottleneck_6_7, msddsp_8_16 };

/// Throws std::invalid_argument for unknown names.
Equation parse_equation(std::string_view name);

/// Dispatch by name. fpn_1_3 takes {C3, C4, C5} and returns {P3, P4, P5};
/// the others take and return one array.
std::vector<Array> equation_oracle(Equation eq, const std::vector<Array>& inputs, const ParamMap& params);

/// Largest absolute elementwise difference; throws on shape mismatch.
double max_abs_diff(const Array& a, const Array& b);

}  // namespace epanet::verify::oracle
