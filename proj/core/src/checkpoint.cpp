#include "emorl/checkpoint.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "emorl/error.hpp"

namespace emorl {

using nlohmann::json;

namespace {

json tensor_to_json(const Tensor& t) {
  if (t.rank() == 0) return t[0];
  // Nested arrays, outermost axis first.
  std::function<json(std::size_t, std::size_t)> build = [&](std::size_t axis, std::size_t offset) -> json {
    json arr = json::array();
    std::size_t stride = 1;
    for (std::size_t i = axis + 1; i < t.rank(); ++i) stride *= t.dim(i);
    for (std::size_t i = 0; i < t.dim(axis); ++i) {
      if (axis + 1 == t.rank()) {
        arr.push_back(t[offset + i]);
      } else {
        arr.push_back(build(axis + 1, offset + i * stride));
      }
    }
    return arr;
  };
  return build(0, 0);
}

Tensor tensor_from_json(const json& j, const std::string& name) {
  if (j.is_number()) return Tensor::scalar(j.get<double>());
  Shape shape;
  const json* cur = &j;
  while (cur->is_array()) {
    require<FormatError>(!cur->empty(), "empty array in tensor '", name, "'");
    shape.push_back(cur->size());
    cur = &(*cur)[0];
  }
  std::vector<double> data;
  data.reserve(shape_numel(shape));
  std::function<void(const json&, std::size_t)> walk = [&](const json& node, std::size_t axis) {
    require<FormatError>(node.is_array() && node.size() == shape[axis], "ragged array in tensor '", name, "'");
    for (const auto& child : node) {
      if (axis + 1 == shape.size()) {
        require<FormatError>(child.is_number(), "non-numeric entry in tensor '", name, "'");
        data.push_back(child.get<double>());
      } else {
        walk(child, axis + 1);
      }
    }
  };
  walk(j, 0);
  Tensor t(std::move(shape), std::move(data));
  check_finite(t, "checkpoint load");
  return t;
}

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},           {"n_heads", c.n_heads},
              {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers}, {"d_ff", c.d_ff},
              {"max_seq_len", c.max_seq_len}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_enc_layers = j.at("n_enc_layers").get<std::size_t>();
  c.n_dec_layers = j.at("n_dec_layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.validate();
  return c;
}

template <typename Fn>
auto parse_document(const std::string& text, const char* what, Fn&& fn) {
  try {
    return fn(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed ") + what + ": " + e.what());
  }
}

}  // namespace

void Checkpoint::validate() const {
  require<FormatError>(format_version == kCheckpointFormatVersion, "unsupported checkpoint format_version ",
                       format_version);
  config.validate();
  require<FormatError>(vocab.size() == config.vocab_size, "vocabulary has ", vocab.size(),
                       " tokens but config.vocab_size is ", config.vocab_size);
  validate_params(config, params);
}

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  json params = json::object();
  for (const auto& [name, t] : ckpt.params) params[name] = tensor_to_json(*t);
  json doc{{"format_version", ckpt.format_version},
           {"config", config_to_json(ckpt.config)},
           {"vocab", ckpt.vocab.tokens()},
           {"params", std::move(params)}};
  return doc.dump();
}

Checkpoint checkpoint_from_json(const std::string& text) {
  return parse_document(text, "checkpoint", [](const json& doc) {
    Checkpoint ckpt;
    ckpt.format_version = doc.at("format_version").get<int>();
    ckpt.config = config_from_json(doc.at("config"));
    ckpt.vocab = Vocabulary::from_tokens(doc.at("vocab").get<std::vector<std::string>>());
    for (const auto& [name, value] : doc.at("params").items()) {
      ckpt.params.emplace(name, std::make_shared<const Tensor>(tensor_from_json(value, name)));
    }
    ckpt.validate();
    return ckpt;
  });
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_text_file(path, checkpoint_to_json(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_text_file(path)); }

std::string adapter_to_json(const LoraAdapter& adapter) {
  json targets = json::object();
  for (const auto& [name, f] : adapter.targets) {
    targets[name] = json{{"A", tensor_to_json(f.a)}, {"B", tensor_to_json(f.b)}};
  }
  json doc{{"format_version", kCheckpointFormatVersion},
           {"rank", adapter.rank},
           {"alpha", adapter.alpha},
           {"targets", std::move(targets)}};
  return doc.dump();
}

LoraAdapter adapter_from_json(const std::string& text) {
  return parse_document(text, "adapter", [](const json& doc) {
    require<FormatError>(doc.at("format_version").get<int>() == kCheckpointFormatVersion,
                         "unsupported adapter format_version");
    LoraAdapter adapter;
    adapter.rank = doc.at("rank").get<std::size_t>();
    adapter.alpha = doc.at("alpha").get<double>();
    for (const auto& [name, value] : doc.at("targets").items()) {
      adapter.targets.emplace(name, LoraFactor{tensor_from_json(value.at("A"), name + ".A"),
                                               tensor_from_json(value.at("B"), name + ".B")});
    }
    return adapter;
  });
}

void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path) {
  write_text_file(path, adapter_to_json(adapter));
}

LoraAdapter load_adapter(const std::filesystem::path& path) { return adapter_from_json(read_text_file(path)); }

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require<IoError>(static_cast<bool>(in), "cannot open '", path.string(), "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require<IoError>(static_cast<bool>(out), "cannot open '", tmp.string(), "' for writing");
    out << text;
    require<IoError>(static_cast<bool>(out), "write to '", tmp.string(), "' failed");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace emorl
