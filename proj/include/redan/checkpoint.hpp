#pragma once

// Checkpoint file: one line of compact manifest JSON, a newline, then every
// parameter tensor as little-endian f64 in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "redan/model.hpp"
#include "redan/training.hpp"
#include "redan/vocab.hpp"

namespace redan {

inline constexpr const char* kCheckpointFormat = "redan-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  std::optional<TrainConfig> train_config;
  std::size_t epoch = 0;
  std::string metric;
  double val_metric = 0.0;
};

struct LoadedCheckpoint {
  Model model;
  Vocabulary vocab;
  CheckpointInfo info;
};

inline void save_checkpoint(const std::string& path, const Model& model, const Vocabulary& vocab,
                            const CheckpointInfo& info = {}) {
  if (vocab.size() != model.config().vocab_size)
    throw PreconditionError("save_checkpoint: vocabulary size does not match the model");
  nlohmann::json params = nlohmann::json::array();
  std::string blob;
  model.for_each_parameter([&](const std::string& name, const Tensor& t) {
    params.push_back({{"name", name}, {"shape", t.shape()}, {"requires_grad", t.requires_grad()}});
    for (double x : t.data()) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  });
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["model_config"] = to_json(model.config());
  manifest["train_config"] = info.train_config ? to_json(*info.train_config) : nlohmann::json();
  manifest["epoch"] = info.epoch;
  manifest["metric"] = info.metric;
  manifest["val_metric"] = info.val_metric;
  manifest["vocab"] = vocab.words();
  manifest["parameters"] = std::move(params);
  manifest["blob_bytes"] = blob.size();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << manifest.dump() << '\n';
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw DataError("failed writing checkpoint " + path);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string header;
  if (!std::getline(in, header)) throw DataError(path + ": empty checkpoint");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path + ": malformed checkpoint manifest at byte " + std::to_string(e.byte));
  }
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  try {
    if (manifest.at("format") != kCheckpointFormat)
      throw DataError(path + ": not a checkpoint file");
    if (manifest.at("version").get<int>() != kCheckpointVersion)
      throw DataError(path + ": unsupported checkpoint version");
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>())
      throw DataError(path + ": blob is " + std::to_string(blob.size()) + " bytes, manifest says " +
                      std::to_string(manifest.at("blob_bytes").get<std::size_t>()));

    const ModelConfig cfg = model_config_from_json(manifest.at("model_config"));
    Vocabulary vocab = Vocabulary::from_words(manifest.at("vocab").get<std::vector<std::string>>());
    if (vocab.size() != cfg.vocab_size)
      throw DataError(path + ": vocabulary size does not match the model config");

    CheckpointInfo info;
    if (!manifest.at("train_config").is_null())
      info.train_config = train_config_from_json(manifest.at("train_config"));
    info.epoch = manifest.at("epoch").get<std::size_t>();
    info.metric = manifest.at("metric").get<std::string>();
    info.val_metric = manifest.at("val_metric").get<double>();

    Model model(cfg);
    const auto& params = manifest.at("parameters");
    std::size_t index = 0, offset = 0;
    model.for_each_parameter([&](const std::string& name, Tensor& t) {
      if (index >= params.size())
        throw DataError(path + ": manifest lacks parameter '" + name + "'");
      const auto& entry = params[index++];
      if (entry.at("name") != name)
        throw DataError(path + ": expected parameter '" + name + "', found '" +
                        entry.at("name").get<std::string>() + "'");
      if (entry.at("shape").get<Shape>() != t.shape())
        throw DataError(path + ": parameter '" + name + "' has shape " +
                        shape_str(entry.at("shape").get<Shape>()) + ", model expects " +
                        shape_str(t.shape()));
      if (offset + 8 * t.size() > blob.size())
        throw DataError(path + ": blob truncated at parameter '" + name + "'");
      for (std::size_t i = 0; i < t.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
          bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[offset + b]))
                  << (8 * b);
        t[i] = std::bit_cast<double>(bits);
        offset += 8;
      }
      t.set_requires_grad(entry.at("requires_grad").get<bool>());
    });
    if (index != params.size()) throw DataError(path + ": manifest has extra parameters");
    if (offset != blob.size()) throw DataError(path + ": trailing bytes after parameters");
    return {std::move(model), std::move(vocab), std::move(info)};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

}  // namespace redan
