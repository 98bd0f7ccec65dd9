#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "epanet/training.hpp"

// The `epanet` command: train, eval, bench, inspect, viz and synth, driven
// by a versioned JSON config plus --override key=value flags.

namespace epanet::cli {

enum ExitCode : int { kSuccess = 0, kConfigError = 1, kAssertionFailure = 2 };

/// Entry point used by the executable and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Default output root: $EPANET_OUT_DIR, else "out".
std::filesystem::path default_out_dir();

/// Creates out/{run_id}/{checkpoints,reports,viz} and writes the read-only
/// config.snapshot. Returns the run directory.
std::filesystem::path prepare_run_dir(const std::filesystem::path& out_dir, const std::string& run_id,
                                      const nlohmann::json& resolved_config);

/// One row of the backbone-bottleneck x topology ablation.
struct AblationRow {
  std::string backbone_bottleneck;
  std::string topology;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  double map50 = 0.0;
  bool finite = false;
  bool halved = false;  // final loss <= 50% of the step-1 loss
  bool ok() const { return finite && halved; }
};

/// Trains {plain, msddsp} backbone bottlenecks x {fpn, epa} on the config's
/// data with its training settings and evaluates each on the eval split.
std::vector<AblationRow> run_ablation(const pipeline::RunConfig& cfg);
std::string format_ablation(const std::vector<AblationRow>& rows);

struct ScaleCheck {
  std::int64_t params = 0;
  std::int64_t flops = 0;
  double params_deviation = 0.0;  // relative to the reference
  double flops_deviation = 0.0;
  bool within() const;
};

inline constexpr double kReferenceParams = 9.7e6;
inline constexpr double kReferenceFlops = 35e9;
inline constexpr double kParamsTolerance = 0.25;
inline constexpr double kFlopsTolerance = 0.30;

/// Profiles the "s"-comparable model at 640 x 640.
ScaleCheck scale_check(int num_classes = 1);
std::string format_scale_check(const ScaleCheck& check);

}  // namespace epanet::cli
