#include "epanet/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace epanet::verify::oracle {

namespace {

std::int64_t product(const std::vector<std::int64_t>& dims) {
  std::int64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void expect_rank4(const Array& x, const char* what) {
  if (x.shape.size() != 4) throw std::invalid_argument(std::string(what) + ": expected a rank-4 array");
}

}  // namespace

Array::Array(std::vector<std::int64_t> dims, double fill)
    : shape(std::move(dims)), data(static_cast<std::size_t>(product(shape)), fill) {}

double& Array::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
  return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
}

double Array::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  return data[static_cast<std::size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
}

const Array& param(const ParamMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::invalid_argument("oracle: missing parameter '" + name + "'");
  return it->second;
}

bool has_param(const ParamMap& params, const std::string& name) { return params.count(name) != 0; }

Array conv2d(const Array& x, const Array& weight, const Array* bias, std::int64_t stride, std::int64_t padding,
             std::int64_t dilation, std::int64_t groups) {
  expect_rank4(x, "conv2d input");
  expect_rank4(weight, "conv2d weight");
  const std::int64_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t cout = weight.dim(0), cin_per_group = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (cin_per_group * groups != cin) throw std::invalid_argument("conv2d: channel/group mismatch");
  const std::int64_t cout_per_group = cout / groups;
  const std::int64_t hout = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
  const std::int64_t wout = (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;

  Array y({batch, cout, hout, wout});
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t oc = 0; oc < cout; ++oc) {
      const std::int64_t g = oc / cout_per_group;
      for (std::int64_t oy = 0; oy < hout; ++oy) {
        for (std::int64_t ox = 0; ox < wout; ++ox) {
          double acc = bias != nullptr ? bias->data[static_cast<std::size_t>(oc)] : 0.0;
          for (std::int64_t ic = 0; ic < cin_per_group; ++ic) {
            const std::int64_t src_c = g * cin_per_group + ic;
            for (std::int64_t ky = 0; ky < kh; ++ky) {
              const std::int64_t iy = oy * stride - padding + ky * dilation;
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const std::int64_t ix = ox * stride - padding + kx * dilation;
                if (ix < 0 || ix >= w) continue;
                acc += x.at(n, src_c, iy, ix) * weight.at(oc, ic, ky, kx);
              }
            }
          }
          y.at(n, oc, oy, ox) = acc;
        }
      }
    }
  }
  return y;
}

Array batch_norm(const Array& x, const Array& gamma, const Array& beta, const Array& mean, const Array& var) {
  expect_rank4(x, "batch_norm");
  Array y(x.shape);
  for (std::int64_t n = 0; n < x.dim(0); ++n)
    for (std::int64_t c = 0; c < x.dim(1); ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const double scale = gamma.data[ci] / std::sqrt(var.data[ci] + kBnEps);
      for (std::int64_t i = 0; i < x.dim(2); ++i)
        for (std::int64_t j = 0; j < x.dim(3); ++j)
          y.at(n, c, i, j) = (x.at(n, c, i, j) - mean.data[ci]) * scale + beta.data[ci];
    }
  return y;
}

Array silu(const Array& x) {
  Array y(x.shape);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double v = x.data[i];
    y.data[i] = v / (1.0 + std::exp(-v));
  }
  return y;
}

Array add(const Array& a, const Array& b) {
  if (a.shape != b.shape) throw std::invalid_argument("add: shape mismatch");
  Array y(a.shape);
  for (std::size_t i = 0; i < a.data.size(); ++i) y.data[i] = a.data[i] + b.data[i];
  return y;
}

Array concat_channels(const std::vector<Array>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  std::int64_t channels = 0;
  for (const auto& p : parts) {
    expect_rank4(p, "concat");
    if (p.dim(0) != parts[0].dim(0) || p.dim(2) != parts[0].dim(2) || p.dim(3) != parts[0].dim(3))
      throw std::invalid_argument("concat: spatial/batch mismatch");
    channels += p.dim(1);
  }
  Array y({parts[0].dim(0), channels, parts[0].dim(2), parts[0].dim(3)});
  for (std::int64_t n = 0; n < y.dim(0); ++n) {
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      for (std::int64_t c = 0; c < p.dim(1); ++c)
        for (std::int64_t i = 0; i < p.dim(2); ++i)
          for (std::int64_t j = 0; j < p.dim(3); ++j) y.at(n, offset + c, i, j) = p.at(n, c, i, j);
      offset += p.dim(1);
    }
  }
  return y;
}

Array slice_channels(const Array& x, std::int64_t begin, std::int64_t count) {
  expect_rank4(x, "slice");
  Array y({x.dim(0), count, x.dim(2), x.dim(3)});
  for (std::int64_t n = 0; n < x.dim(0); ++n)
    for (std::int64_t c = 0; c < count; ++c)
      for (std::int64_t i = 0; i < x.dim(2); ++i)
        for (std::int64_t j = 0; j < x.dim(3); ++j) y.at(n, c, i, j) = x.at(n, begin + c, i, j);
  return y;
}

Array upsample_nearest(const Array& x, std::int64_t factor) {
  expect_rank4(x, "upsample");
  Array y({x.dim(0), x.dim(1), x.dim(2) * factor, x.dim(3) * factor});
  for (std::int64_t n = 0; n < y.dim(0); ++n)
    for (std::int64_t c = 0; c < y.dim(1); ++c)
      for (std::int64_t i = 0; i < y.dim(2); ++i)
        for (std::int64_t j = 0; j < y.dim(3); ++j) y.at(n, c, i, j) = x.at(n, c, i / factor, j / factor);
  return y;
}

Array global_average_pool(const Array& x) {
  expect_rank4(x, "gap");
  Array y({x.dim(0), x.dim(1), 1, 1});
  const double area = static_cast<double>(x.dim(2) * x.dim(3));
  for (std::int64_t n = 0; n < x.dim(0); ++n)
    for (std::int64_t c = 0; c < x.dim(1); ++c) {
      double sum = 0.0;
      for (std::int64_t i = 0; i < x.dim(2); ++i)
        for (std::int64_t j = 0; j < x.dim(3); ++j) sum += x.at(n, c, i, j);
      y.at(n, c, 0, 0) = sum / area;
    }
  return y;
}

// ---------------------------------------------------------------- equations

namespace {

Array conv_named(const Array& x, const ParamMap& p, const std::string& name, std::int64_t padding,
                 std::int64_t dilation = 1, std::int64_t groups = 1, std::int64_t stride = 1) {
  const Array& w = param(p, name + ".weight");
  const Array* b = has_param(p, name + ".bias") ? &param(p, name + ".bias") : nullptr;
  return conv2d(x, w, b, stride, padding, dilation, groups);
}

Array bn_named(const Array& x, const ParamMap& p, const std::string& name) {
  return batch_norm(x, param(p, name + ".weight"), param(p, name + ".bias"), param(p, name + ".running_mean"),
                    param(p, name + ".running_var"));
}

}  // namespace

Array bottleneck(const Array& f, const ParamMap& params, const std::string& prefix) {
  Array h = conv_named(f, params, prefix + "reduce", 0);
  h = bn_named(h, params, prefix + "bn");
  h = silu(h);
  h = conv_named(h, params, prefix + "expand", 1);
  return add(h, f);
}

Array msddsp(const Array& x, const ParamMap& params, const std::string& prefix) {
  const std::int64_t channels = x.dim(1);
  const std::int64_t q = channels / 4;

  // CBS adjustment, then four equal channel groups.
  Array adjusted = silu(bn_named(conv_named(x, params, prefix + "adjust.conv", 0), params, prefix + "adjust.bn"));
  const Array x1 = slice_channels(adjusted, 0 * q, q);
  const Array x2 = slice_channels(adjusted, 1 * q, q);
  const Array x3 = slice_channels(adjusted, 2 * q, q);
  const Array x4 = slice_channels(adjusted, 3 * q, q);

  // Branch 1: ((X1 *_{d=1} W1) *_{d=2} W2) *_{d=4} W3, padding = dilation.
  Array b1 = conv_named(x1, params, prefix + "dc1", 1, 1);
  b1 = conv_named(b1, params, prefix + "dc2", 2, 2);
  b1 = conv_named(b1, params, prefix + "dc3", 4, 4);
  // Branch 2: W_pw * (W_dw * X2).
  Array b2 = conv_named(x2, params, prefix + "dsc_depthwise", 1, 1, q);
  b2 = conv_named(b2, params, prefix + "dsc_pointwise", 0);
  // Branch 3: W_pwc * X3.
  Array b3 = conv_named(x3, params, prefix + "pwc", 0);
  // Branch 4: untouched.
  const Array& b4 = x4;
  const std::vector<Array> branches{b1, b2, b3, b4};

  Array y1 = concat_channels(branches);

  // S^n = GAP(X^n); beta^n = exp(S^n) / sum_k exp(S^k), per channel position.
  std::vector<Array> stats;
  for (const auto& b : branches) stats.push_back(global_average_pool(b));
  std::vector<Array> weighted;
  for (std::size_t n = 0; n < 4; ++n) {
    Array wn(branches[n].shape);
    for (std::int64_t bi = 0; bi < x.dim(0); ++bi) {
      for (std::int64_t c = 0; c < q; ++c) {
        double denom = 0.0;
        for (std::size_t k = 0; k < 4; ++k) denom += std::exp(stats[k].at(bi, c, 0, 0));
        const double beta = std::exp(stats[n].at(bi, c, 0, 0)) / denom;
        for (std::int64_t i = 0; i < x.dim(2); ++i)
          for (std::int64_t j = 0; j < x.dim(3); ++j) wn.at(bi, c, i, j) = branches[n].at(bi, c, i, j) * beta;
      }
    }
    weighted.push_back(std::move(wn));
  }
  Array y2 = concat_channels(weighted);
  return add(y1, y2);
}

Array c2f(const Array& x, const ParamMap& params, const std::string& prefix) {
  Array projected = conv_named(x, params, prefix + "project_in", 0);
  const std::int64_t hidden = projected.dim(1);
  Array fa = slice_channels(projected, 0, hidden / 2);
  const Array fb = slice_channels(projected, hidden / 2, hidden / 2);

  for (int i = 0;; ++i) {
    const std::string block = prefix + "bottlenecks." + std::to_string(i) + ".";
    if (has_param(params, block + "adjust.conv.weight")) {
      fa = msddsp(fa, params, block);
    } else if (has_param(params, block + "reduce.weight")) {
      fa = bottleneck(fa, params, block);
    } else {
      break;
    }
  }
  Array y = conv_named(concat_channels({fa, fb}), params, prefix + "project_out", 0);
  if (y.shape == x.shape) y = add(y, x);
  return y;
}

std::vector<Array> fpn(const Array& c3, const Array& c4, const Array& c5, const ParamMap& params) {
  // P5 = Conv3x3(Conv1x1(C5))
  Array p5 = conv_named(conv_named(c5, params, "lateral5", 0), params, "smooth5", 1);
  // P4 = Conv3x3(Conv1x1(C4) + up(P5))
  Array p4 = conv_named(add(conv_named(c4, params, "lateral4", 0), upsample_nearest(p5, 2)), params, "smooth4", 1);
  // P3 = Conv3x3(Conv1x1(C3) + up(P4))
  Array p3 = conv_named(add(conv_named(c3, params, "lateral3", 0), upsample_nearest(p4, 2)), params, "smooth3", 1);
  return {p3, p4, p5};
}

Equation parse_equation(std::string_view name) {
  if (name == "fpn_1_3") return Equation::fpn_1_3;
  if (name == "c2f_4_5") return Equation::c2f_4_5;
  if (name == "bottleneck_6_7") return Equation::bottleneck_6_7;
  if (name == "msddsp_8_16") return Equation::msddsp_8_16;
  throw std::invalid_argument("unknown equation oracle '" + std::string(name) +
                              "' (expected fpn_1_3, c2f_4_5, bottleneck_6_7, msddsp_8_16)");
}

std::vector<Array> equation_oracle(Equation eq, const std::vector<Array>& inputs, const ParamMap& params) {
  const std::size_t expected = eq == Equation::fpn_1_3 ? 3 : 1;
  if (inputs.size() != expected) {
    throw std::invalid_argument("equation_oracle: expected " + std::to_string(expected) + " input(s)");
  }
  switch (eq) {
    case Equation::fpn_1_3:
      return fpn(inputs[0], inputs[1], inputs[2], params);
    case Equation::c2f_4_5:
      return {c2f(inputs[0], params)};
    case Equation::bottleneck_6_7:
      return {bottleneck(inputs[0], params)};
    case Equation::msddsp_8_16:
      return {msddsp(inputs[0], params)};
  }
  throw std::invalid_argument("equation_oracle: unhandled equation");
}

double max_abs_diff(const Array& a, const Array& b) {
  if (a.shape != b.shape) throw std::invalid_argument("max_abs_diff: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
  return worst;
}

}  // namespace epanet::verify::oracle
