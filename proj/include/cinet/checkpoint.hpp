#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cinet/error.hpp"
#include "cinet/params.hpp"
#include "cinet/tensor.hpp"

namespace cinet {

// Checkpoint layout: 8 magic bytes, one line of JSON header (param names and
// shapes plus caller metadata such as config, config hash and seed), then the
// raw little-endian float64 payload in header order.
inline constexpr char kCheckpointMagic[9] = "CINCKPT1";

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path,
                            const nlohmann::json& meta) {
  nlohmann::json header = meta;
  auto& plist = header["params"];
  plist = nlohmann::json::array();
  for (const auto& [name, tensor] : params.values) {
    plist.push_back({{"name", name}, {"shape", tensor.shape()}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  std::string htext = header.dump();
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  out.put('\n');
  for (const auto& [name, tensor] : params.values) {
    for (std::int64_t i = 0; i < tensor.numel(); ++i) {
      double v = static_cast<double>(tensor[i]);
      out.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
  }
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

struct LoadedCheckpoint {
  ModelParams params;
  nlohmann::json header;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError("bad magic bytes in " + path.string());
  }
  std::string htext;
  if (!std::getline(in, htext)) throw CheckpointError("missing header in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed header in " + path.string() + ": " + e.what());
  }
  LoadedCheckpoint out;
  out.header = header;
  for (const auto& entry : header.at("params")) {
    std::string name = entry.at("name").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      double v;
      in.read(reinterpret_cast<char*>(&v), sizeof(double));
      if (!in) throw CheckpointError("truncated payload in " + path.string());
      t[i] = static_cast<Scalar>(v);
    }
    t.requires_grad = true;
    out.params.values.emplace(std::move(name), std::move(t));
  }
  in.peek();
  if (!in.eof()) throw CheckpointError("trailing bytes in " + path.string());
  return out;
}

}  // namespace cinet
