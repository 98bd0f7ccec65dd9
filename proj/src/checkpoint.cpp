#include <cstring>
#include <filesystem>

#include "epanet/detector.hpp"
#include "epanet/errors.hpp"

namespace epanet::detector {

namespace {

constexpr const char* kFormat = "epanet-checkpoint-v1";

torch::Tensor bytes_tensor(const std::string& s) {
  auto t = torch::empty({static_cast<std::int64_t>(s.size())}, torch::kUInt8);
  if (!s.empty()) std::memcpy(t.data_ptr<std::uint8_t>(), s.data(), s.size());
  return t;
}

std::string tensor_bytes(const torch::Tensor& t) {
  const auto c = t.contiguous();
  return {reinterpret_cast<const char*>(c.data_ptr<std::uint8_t>()), static_cast<std::size_t>(c.numel())};
}

}  // namespace

void save_checkpoint(const std::string& path, DetectorImpl& model, const nlohmann::json& run_config,
                     std::int64_t step) {
  // The resolved topology travels with the weights so a checkpoint never
  // depends on preset files or code defaults at load time.
  auto cfg = model.config();
  cfg.topology_spec = model.neck->spec();

  torch::serialize::OutputArchive archive;
  archive.write("format", bytes_tensor(kFormat));
  archive.write("config", bytes_tensor(to_json(cfg).dump()));
  archive.write("run_config", bytes_tensor(run_config.dump()));
  archive.write("step", torch::tensor(step, torch::kLong));
  torch::serialize::OutputArchive weights;
  model.save(weights);
  archive.write("model", weights);
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  archive.save_to(path);
}

Checkpoint load_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path);
  torch::serialize::InputArchive archive;
  archive.load_from(path);
  torch::Tensor t;
  archive.read("format", t);
  if (tensor_bytes(t) != kFormat) throw ConfigError("not an EPANet checkpoint: " + path);

  Checkpoint ckpt;
  archive.read("config", t);
  ckpt.config = config_from_json(nlohmann::json::parse(tensor_bytes(t)));
  archive.read("run_config", t);
  ckpt.run_config = nlohmann::json::parse(tensor_bytes(t));
  archive.read("step", t);
  ckpt.step = t.item<std::int64_t>();
  ckpt.model = Detector(ckpt.config);
  torch::serialize::InputArchive weights;
  archive.read("model", weights);
  ckpt.model->load(weights);
  return ckpt;
}

}  // namespace epanet::detector
