#include "unmask/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace unmask {

namespace {

constexpr char kMagic[4] = {'U', 'M', 'C', 'K'};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::json hdr;
  hdr["step"] = ck.step;
  hdr["run_id"] = ck.run_id;
  hdr["config"] = ck.config_echo;
  hdr["build"] = ck.build_id;
  hdr["norm_stats"] = {{"mean", ck.stats.mean}, {"std", ck.stats.stddev}};
  hdr["class_names"] = ck.class_names;
  uint64_t offset = 0;
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& [name, t] : ck.tensors) {
    nlohmann::json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = offset;
    dir.push_back(e);
    offset += static_cast<uint64_t>(t.numel()) * sizeof(float);
  }
  hdr["tensors"] = dir;
  const std::string js = hdr.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write(kMagic, 4);
  const uint32_t version = ck.version;
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t jlen = js.size();
  f.write(reinterpret_cast<const char*>(&jlen), sizeof(jlen));
  f.write(js.data(), static_cast<std::streamsize>(js.size()));
  for (const auto& [name, t] : ck.tensors)
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
  f.flush();
  if (!f) throw std::runtime_error("short write on checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("missing checkpoint: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path.string() + " is not a checkpoint file");
  uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!f) throw std::runtime_error("truncated checkpoint " + path.string());
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + path.string() + " has format version " +
                             std::to_string(version) + ", this build reads version " +
                             std::to_string(kCheckpointVersion));
  uint64_t jlen = 0;
  f.read(reinterpret_cast<char*>(&jlen), sizeof(jlen));
  if (!f) throw std::runtime_error("truncated checkpoint " + path.string());
  std::string js(jlen, '\0');
  f.read(js.data(), static_cast<std::streamsize>(jlen));
  if (!f) throw std::runtime_error("truncated checkpoint " + path.string());

  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }

  Checkpoint ck;
  ck.version = version;
  ck.step = hdr.at("step").get<int64_t>();
  ck.run_id = hdr.at("run_id").get<std::string>();
  ck.config_echo = hdr.at("config").get<std::string>();
  ck.build_id = hdr.value("build", "");
  if (hdr.contains("norm_stats")) {
    const auto& ns = hdr.at("norm_stats");
    const auto mean = ns.at("mean").get<std::vector<float>>();
    const auto stdd = ns.at("std").get<std::vector<float>>();
    if (mean.size() != 3 || stdd.size() != 3)
      throw std::runtime_error("checkpoint " + path.string() + " norm_stats must have 3 channels");
    std::copy(mean.begin(), mean.end(), ck.stats.mean.begin());
    std::copy(stdd.begin(), stdd.end(), ck.stats.stddev.begin());
  }
  ck.class_names = hdr.at("class_names").get<std::vector<std::string>>();
  for (const auto& e : hdr.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    TensorF t(shape);
    f.seekg(static_cast<std::streamoff>(4 + sizeof(uint32_t) + sizeof(uint64_t) + jlen +
                                        e.at("offset").get<uint64_t>()));
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!f)
      throw std::runtime_error("checkpoint " + path.string() + " is truncated at tensor " + name);
    ck.tensors.emplace_back(name, std::move(t));
  }
  return ck;
}

Checkpoint snapshot_store(const ParamStore& store, int64_t step, const std::string& run_id,
                          const std::string& config_echo,
                          const std::vector<std::string>& class_names) {
  Checkpoint ck;
  ck.step = step;
  ck.run_id = run_id;
  ck.config_echo = config_echo;
  ck.class_names = class_names;
  for (const auto& [name, t] : store.state()) ck.tensors.emplace_back(name, t.clone());
  return ck;
}

void restore_store(const Checkpoint& ck, ParamStore& store, const std::string& who) {
  std::map<std::string, TensorF> st;
  for (const auto& [name, t] : ck.tensors) st.emplace(name, t);
  store.load_state(st, who);
}

}  // namespace unmask
