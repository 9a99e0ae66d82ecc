#include "breaknet/checkpoint.hpp"

#include <fstream>
#include <map>

#include "breaknet/tensor_io.hpp"

namespace breaknet {

namespace {

constexpr const char* kFormat = "breaknet-checkpoint";

std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

template <typename T>
void append(std::ostream& os, nlohmann::json& entries, const NamedTensor<T>& nt, const char* kind) {
  const auto offset = static_cast<std::uint64_t>(os.tellp());
  write_tensor(os, nt.tensor);
  entries.push_back({{"name", nt.name}, {"kind", kind}, {"shape", nt.tensor.shape()}, {"offset", offset}});
}

}  // namespace

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open checkpoint manifest " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest " + manifest.string() + ": " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kFormat || !j.contains("config") || !j.contains("tensors")) {
    throw IoError(manifest.string() + " is not a breaknet checkpoint");
  }
  return j;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& manifest, const BreakNet<T>& net, const nlohmann::json& extra) {
  const auto blob = blob_path(manifest);
  nlohmann::json entries = nlohmann::json::array();
  {
    std::ofstream os(blob, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + blob.string());
    for (const auto& p : net.parameters()) append(os, entries, p, "parameter");
    for (const auto& b : net.buffers()) append(os, entries, b, "buffer");
    if (!os) throw IoError("write failed: " + blob.string());
  }
  nlohmann::json j = {{"format", kFormat},
                      {"version", 1},
                      {"dtype", sizeof(T) == 4 ? "f32" : "f64"},
                      {"config", to_json(net.config())},
                      {"blob", blob.filename().string()},
                      {"tensors", entries},
                      {"extra", extra}};
  std::ofstream os(manifest, std::ios::trunc);
  if (!os) throw IoError("cannot write " + manifest.string());
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed: " + manifest.string());
}

template <typename T>
void load_checkpoint_into(const std::filesystem::path& manifest, BreakNet<T>& net) {
  const auto j = read_checkpoint_manifest(manifest);
  const auto blob = manifest.parent_path() / j.at("blob").get<std::string>();
  std::ifstream in(blob, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint blob " + blob.string());

  std::map<std::string, nlohmann::json> stored;
  for (const auto& e : j.at("tensors")) stored[e.at("name").get<std::string>()] = e;
  auto fill = [&](std::vector<NamedTensor<T>>& list) {
    for (auto& nt : list) {
      auto it = stored.find(nt.name);
      if (it == stored.end()) throw IoError("checkpoint lacks tensor '" + nt.name + "'");
      in.seekg(static_cast<std::streamoff>(it->second.at("offset").template get<std::uint64_t>()));
      Tensor<T> t = read_tensor<T>(in);
      if (t.shape() != nt.tensor.shape()) {
        throw IoError("checkpoint tensor '" + nt.name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                      shape_str(nt.tensor.shape()));
      }
      std::copy(t.data().begin(), t.data().end(), nt.tensor.data().begin());
      stored.erase(it);
    }
  };
  fill(net.parameters());
  fill(net.buffers());
  if (!stored.empty()) throw IoError("checkpoint has unknown tensor '" + stored.begin()->first + "'");
}

template <typename T>
BreakNet<T> load_checkpoint(const std::filesystem::path& manifest) {
  const auto j = read_checkpoint_manifest(manifest);
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(j.at("config"));
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("checkpoint config: ") + e.what());
  }
  BreakNet<T> net(cfg);
  load_checkpoint_into(manifest, net);
  return net;
}

template void save_checkpoint<float>(const std::filesystem::path&, const BreakNet<float>&, const nlohmann::json&);
template void save_checkpoint<double>(const std::filesystem::path&, const BreakNet<double>&, const nlohmann::json&);
template void load_checkpoint_into<float>(const std::filesystem::path&, BreakNet<float>&);
template void load_checkpoint_into<double>(const std::filesystem::path&, BreakNet<double>&);
template BreakNet<float> load_checkpoint<float>(const std::filesystem::path&);
template BreakNet<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace breaknet
