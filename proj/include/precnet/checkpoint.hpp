#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "precnet/common.hpp"
#include "precnet/network.hpp"
#include "precnet/training.hpp"

namespace precnet {

using nlohmann::json;

inline json config_to_json(const NetworkConfig& cfg) {
  return json{{"image_channels", cfg.image_channels},
              {"r_channels", cfg.r_channels},
              {"lstm_kernel", cfg.lstm_kernel},
              {"conv_kernel", cfg.conv_kernel},
              {"lambda", cfg.lambda},
              {"pix_max", cfg.pix_max},
              {"variant", cfg.variant == NetworkConfig::Variant::single_lstm ? "single_lstm"
                                                                             : "standard"}};
}

inline NetworkConfig config_from_json(const json& j) {
  NetworkConfig cfg;
  try {
    if (j.contains("preset")) cfg = preset_config(j["preset"].get<std::string>());
    if (j.contains("image_channels")) cfg.image_channels = j["image_channels"].get<int>();
    if (j.contains("r_channels")) cfg.r_channels = j["r_channels"].get<std::vector<int>>();
    if (j.contains("lstm_kernel")) cfg.lstm_kernel = j["lstm_kernel"].get<int>();
    if (j.contains("conv_kernel")) cfg.conv_kernel = j["conv_kernel"].get<int>();
    if (j.contains("lambda")) cfg.lambda = j["lambda"].get<std::vector<double>>();
    if (j.contains("pix_max")) cfg.pix_max = j["pix_max"].get<double>();
    if (j.contains("variant")) {
      const std::string v = j["variant"].get<std::string>();
      check(v == "standard" || v == "single_lstm", "unknown variant: " + v);
      cfg.variant = v == "single_lstm" ? NetworkConfig::Variant::single_lstm
                                       : NetworkConfig::Variant::standard;
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad network config: ") + e.what());
  }
  if (cfg.lambda.empty() && !cfg.r_channels.empty()) {
    cfg.lambda.assign(cfg.r_channels.size(), 0.0);
    cfg.lambda[0] = 1.0;
  }
  cfg.validate();
  return cfg;
}

// Training position carried inside a checkpoint so an interrupted run can
// resume bit-for-bit: completed epoch count, Adam moments/step, and the
// window sampler's generator state.
template <typename T>
struct TrainPosition {
  bool present = false;
  int epoch = 0;
  Adam<T> adam;
  std::uint64_t sampler_state = 0;
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts unsupported");

template <typename T>
void write_f32_blob(const std::string& path, const std::vector<const std::vector<T>*>& parts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path);
  std::vector<float> buf;
  for (const auto* p : parts) {
    buf.assign(p->begin(), p->end());
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed for " + path);
}

inline std::vector<float> read_f32_blob(const std::string& path, std::int64_t expected_count) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path);
  const std::int64_t bytes = static_cast<std::int64_t>(in.tellg());
  if (bytes != expected_count * static_cast<std::int64_t>(sizeof(float)))
    throw ValidationError(path + ": blob holds " + std::to_string(bytes / sizeof(float)) +
                          " floats, expected " + std::to_string(expected_count));
  in.seekg(0);
  std::vector<float> buf(static_cast<std::size_t>(expected_count));
  in.read(reinterpret_cast<char*>(buf.data()), bytes);
  if (!in) throw IoError("read failed for " + path);
  return buf;
}

}  // namespace detail

// Writes dir/checkpoint.json, dir/weights.f32 and, when training state is
// given, dir/optimizer.f32 (first moments then second moments, parameter
// order).
template <typename T>
void save_checkpoint(const std::string& dir, const NetworkWeights<T>& w,
                     const TrainPosition<T>* pos = nullptr) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
  json man;
  man["format"] = "precnet-checkpoint-v1";
  man["network"] = config_to_json(w.cfg);
  man["tensors"] = json::array();
  std::int64_t offset = 0;  // byte offset into the blob
  std::vector<const std::vector<T>*> parts;
  for (const auto& [name, t] : w.params.items) {
    man["tensors"].push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.numel() * static_cast<std::int64_t>(sizeof(float));
    parts.push_back(&t.data);
  }
  man["blob"] = {{"file", "weights.f32"},
                 {"dtype", "float32"},
                 {"byte_order", "little"},
                 {"count", w.params.total_size()}};
  detail::write_f32_blob((fs::path(dir) / "weights.f32").string(), parts);
  if (pos && pos->present) {
    std::vector<const std::vector<T>*> opt_parts;
    for (const auto& m : pos->adam.m) opt_parts.push_back(&m);
    for (const auto& v : pos->adam.v) opt_parts.push_back(&v);
    detail::write_f32_blob((fs::path(dir) / "optimizer.f32").string(), opt_parts);
    man["training"] = {{"epoch", pos->epoch},
                       {"sampler_state", pos->sampler_state},
                       {"adam",
                        {{"file", "optimizer.f32"},
                         {"step", pos->adam.step_count},
                         {"lr", pos->adam.cfg.lr},
                         {"beta1", pos->adam.cfg.beta1},
                         {"beta2", pos->adam.cfg.beta2},
                         {"eps", pos->adam.cfg.eps}}}};
  }
  std::ofstream mf(fs::path(dir) / "checkpoint.json");
  if (!mf) throw IoError("cannot create manifest in " + dir);
  mf << man.dump(2) << "\n";
}

// Loads a checkpoint directory; validates the manifest against the config's
// closed-form parameter count and every tensor's shape/offset.
template <typename T>
NetworkWeights<T> load_checkpoint(const std::string& dir, TrainPosition<T>* pos = nullptr) {
  namespace fs = std::filesystem;
  const fs::path man_path = fs::path(dir) / "checkpoint.json";
  std::ifstream mf(man_path);
  if (!mf) throw IoError("cannot open " + man_path.string());
  json man;
  try {
    mf >> man;
  } catch (const json::exception& e) {
    throw IoError(man_path.string() + ": malformed manifest: " + e.what());
  }
  NetworkWeights<T> w;
  try {
    check(man.at("format").get<std::string>() == "precnet-checkpoint-v1",
          "unrecognized checkpoint format");
    w.cfg = config_from_json(man.at("network"));
    const std::int64_t expected = count_parameters(w.cfg);
    check(man.at("blob").at("count").get<std::int64_t>() == expected,
          "checkpoint parameter count disagrees with the architecture");
    const std::vector<float> blob = detail::read_f32_blob(
        (fs::path(dir) / man.at("blob").at("file").get<std::string>()).string(), expected);
    // Rebuild the store in canonical order, then fill from declared offsets.
    NetworkWeights<T> fresh = NetworkWeights<T>::init(w.cfg, /*seed=*/0);
    w.params = std::move(fresh.params);
    check(man.at("tensors").size() == w.params.items.size(),
          "checkpoint tensor list length mismatch");
    for (const auto& jt : man.at("tensors")) {
      const std::string name = jt.at("name").get<std::string>();
      HostTensor<T>* t = w.params.find(name);
      check(t != nullptr, "checkpoint names unknown tensor " + name);
      check(jt.at("shape").get<Shape>() == t->shape, "shape mismatch for tensor " + name);
      const std::int64_t off = jt.at("offset").get<std::int64_t>();
      check(off >= 0 && off % sizeof(float) == 0 &&
                off / static_cast<std::int64_t>(sizeof(float)) + t->numel() <=
                    static_cast<std::int64_t>(blob.size()),
            "offset out of range for tensor " + name);
      const float* src = blob.data() + off / sizeof(float);
      for (std::int64_t i = 0; i < t->numel(); ++i) t->data[i] = static_cast<T>(src[i]);
    }
  } catch (const json::exception& e) {
    throw ValidationError(man_path.string() + ": incomplete manifest: " + e.what());
  }
  if (pos) {
    *pos = TrainPosition<T>{};
    if (man.contains("training")) {
      try {
        const json& jt = man["training"];
        pos->present = true;
        pos->epoch = jt.at("epoch").get<int>();
        pos->sampler_state = jt.at("sampler_state").get<std::uint64_t>();
        pos->adam.cfg.lr = jt.at("adam").at("lr").get<double>();
        pos->adam.cfg.beta1 = jt.at("adam").at("beta1").get<double>();
        pos->adam.cfg.beta2 = jt.at("adam").at("beta2").get<double>();
        pos->adam.cfg.eps = jt.at("adam").at("eps").get<double>();
        pos->adam.init(w.params);
        pos->adam.step_count = jt.at("adam").at("step").get<std::int64_t>();
        const std::vector<float> opt = detail::read_f32_blob(
            (fs::path(dir) / jt.at("adam").at("file").get<std::string>()).string(),
            2 * w.params.total_size());
        std::int64_t at = 0;
        for (auto& m : pos->adam.m)
          for (auto& x : m) x = static_cast<T>(opt[at++]);
        for (auto& v : pos->adam.v)
          for (auto& x : v) x = static_cast<T>(opt[at++]);
      } catch (const json::exception& e) {
        throw ValidationError(man_path.string() + ": bad training section: " + e.what());
      }
    }
  }
  return w;
}

}  // namespace precnet
