#pragma once

#include <filesystem>
#include <string>

#include "emorl/lora.hpp"
#include "emorl/model.hpp"
#include "emorl/vocab.hpp"

namespace emorl {

inline constexpr int kCheckpointFormatVersion = 1;

/// Base (or merged) model: config, vocabulary and every named parameter.
struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  ModelConfig config;
  Vocabulary vocab;
  ParamStore params;

  Model model() const { return Model(config, params); }
  void validate() const;
};

/// JSON document {format_version, config, vocab, params:{name: nested arrays}}.
/// Doubles are written in shortest round-trip form, so save/load is exact.
std::string checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const std::string& text);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// JSON document {format_version, rank, alpha, targets:{name:{A, B}}}.
std::string adapter_to_json(const LoraAdapter& adapter);
LoraAdapter adapter_from_json(const std::string& text);
void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path);
LoraAdapter load_adapter(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename, creating parent directories.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace emorl
