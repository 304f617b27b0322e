#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "json.hpp"
#include "rasr/tensor.hpp"

// Checkpoint directory layout:
//   index.json  {"format": "rasr-checkpoint-v1",
//                "tensors": {name: {"shape": [...], "dtype": "f64", "offset": bytes}},
//                "meta": {...}}
//   tensors.bin little-endian float64 data, tensors concatenated in name order.
namespace rasr {

static_assert(std::endian::native == std::endian::little, "checkpoint blob assumes a little-endian host");

inline constexpr const char* kCheckpointFormat = "rasr-checkpoint-v1";

struct CheckpointData {
  std::map<std::string, Tensor> tensors;
  nlohmann::json meta = nlohmann::json::object();
};

inline void save_checkpoint(const std::filesystem::path& dir, const CheckpointData& ckpt) {
  std::filesystem::create_directories(dir);
  nlohmann::json index;
  index["format"] = kCheckpointFormat;
  index["tensors"] = nlohmann::json::object();
  std::ofstream blob(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot write " + (dir / "tensors.bin").string());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    index["tensors"][name] = {{"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}};
    blob.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    offset += t.size() * sizeof(double);
  }
  index["meta"] = ckpt.meta;
  std::ofstream idx(dir / "index.json", std::ios::trunc);
  if (!idx) throw IoError("cannot write " + (dir / "index.json").string());
  idx << index.dump(2) << '\n';
  if (!blob || !idx) throw IoError("short write while saving checkpoint to " + dir.string());
}

inline CheckpointData load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream idx(dir / "index.json");
  if (!idx) throw IoError("cannot open " + (dir / "index.json").string());
  nlohmann::json index;
  try {
    idx >> index;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint index: ") + e.what());
  }
  if (index.value("format", "") != kCheckpointFormat) throw FormatError("unknown checkpoint format");
  std::ifstream blob(dir / "tensors.bin", std::ios::binary);
  if (!blob) throw IoError("cannot open " + (dir / "tensors.bin").string());
  blob.seekg(0, std::ios::end);
  const auto blob_size = static_cast<std::uint64_t>(blob.tellg());

  CheckpointData out;
  for (const auto& [name, entry] : index.at("tensors").items()) {
    if (entry.value("dtype", "") != "f64") throw FormatError("tensor '" + name + "' has unsupported dtype");
    Shape shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    Tensor t(shape);
    const std::uint64_t bytes = t.size() * sizeof(double);
    if (offset + bytes > blob_size) throw FormatError("tensor '" + name + "' extends past end of blob");
    blob.seekg(static_cast<std::streamoff>(offset));
    blob.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(bytes));
    out.tensors.emplace(name, std::move(t));
  }
  if (index.contains("meta")) out.meta = index["meta"];
  return out;
}

} // namespace rasr
