// SPDX-License-Identifier: Apache-2.0
#include "tabrep/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace tabrep {

namespace {

using nlohmann::ordered_json;

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write: " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// Explicit little-endian float32 encoding, independent of host endianness.
std::string encode_f32_le(const float* data, std::int64_t count) {
  std::string bytes(static_cast<std::size_t>(count) * 4, '\0');
  for (std::int64_t i = 0; i < count; ++i) {
    const auto u = std::bit_cast<std::uint32_t>(data[i]);
    const std::size_t o = static_cast<std::size_t>(i) * 4;
    bytes[o] = static_cast<char>(u & 0xFF);
    bytes[o + 1] = static_cast<char>((u >> 8) & 0xFF);
    bytes[o + 2] = static_cast<char>((u >> 16) & 0xFF);
    bytes[o + 3] = static_cast<char>((u >> 24) & 0xFF);
  }
  return bytes;
}

void decode_f32_le(const std::string& bytes, float* data, std::int64_t count) {
  if (bytes.size() != static_cast<std::size_t>(count) * 4)
    throw IoError("tensor blob has wrong size");
  for (std::int64_t i = 0; i < count; ++i) {
    const std::size_t o = static_cast<std::size_t>(i) * 4;
    const std::uint32_t u = static_cast<std::uint8_t>(bytes[o]) |
                            (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[o + 1]))
                             << 8) |
                            (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[o + 2]))
                             << 16) |
                            (static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[o + 3]))
                             << 24);
    data[i] = std::bit_cast<float>(u);
  }
}

std::string hash_hex(std::uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t hash_hex_parse(const std::string& s) {
  return std::stoull(s, nullptr, 16);
}

ordered_json backbone_to_json(const BackboneConfig& config) {
  ordered_json j;
  j["d_model"] = config.d_model;
  j["n_heads"] = config.n_heads;
  j["n_layers"] = config.n_layers;
  j["ffn_mult"] = config.ffn_mult;
  j["dropout"] = config.dropout;
  j["activation"] = config.activation == BackboneConfig::Activation::Gelu ? "gelu" : "relu";
  return j;
}

BackboneConfig backbone_from_json(const nlohmann::json& j) {
  BackboneConfig config;
  config.d_model = j.at("d_model").get<int>();
  config.n_heads = j.at("n_heads").get<int>();
  config.n_layers = j.at("n_layers").get<int>();
  config.ffn_mult = j.at("ffn_mult").get<int>();
  config.dropout = j.at("dropout").get<double>();
  const auto act = j.at("activation").get<std::string>();
  config.activation =
      act == "relu" ? BackboneConfig::Activation::Relu : BackboneConfig::Activation::Gelu;
  return config;
}

ordered_json run_to_json(const RunConfig& config) {
  ordered_json j;
  j["mode"] = std::string(to_string(config.mode));
  j["model_preset"] = config.model_preset;
  j["backbone"] = backbone_to_json(config.backbone);
  j["batch_size"] = config.batch_size;
  j["total_samples"] = config.total_samples;
  j["mask_p"] = config.mask_p;
  j["lr_init"] = config.lr_init;
  j["lr_peak"] = config.lr_peak;
  j["lr_final"] = config.lr_final;
  j["warmup_fraction"] = config.warmup_fraction;
  j["weight_decay"] = config.weight_decay;
  j["beta1"] = config.beta1;
  j["beta2"] = config.beta2;
  j["eps"] = config.eps;
  j["seed"] = config.seed;
  j["checkpoint_every_tokens"] = config.checkpoint_every_tokens;
  j["freeze_backbone"] = config.freeze_backbone;
  return j;
}

RunConfig run_from_json(const nlohmann::json& j) {
  RunConfig config;
  config.mode = run_mode_from_string(j.at("mode").get<std::string>());
  config.model_preset = j.at("model_preset").get<std::string>();
  config.backbone = backbone_from_json(j.at("backbone"));
  config.batch_size = j.at("batch_size").get<std::size_t>();
  config.total_samples = j.at("total_samples").get<std::uint64_t>();
  config.mask_p = j.at("mask_p").get<double>();
  config.lr_init = j.at("lr_init").get<double>();
  config.lr_peak = j.at("lr_peak").get<double>();
  config.lr_final = j.at("lr_final").get<double>();
  config.warmup_fraction = j.at("warmup_fraction").get<double>();
  config.weight_decay = j.at("weight_decay").get<double>();
  config.beta1 = j.at("beta1").get<double>();
  config.beta2 = j.at("beta2").get<double>();
  config.eps = j.at("eps").get<double>();
  config.seed = j.at("seed").get<std::uint64_t>();
  config.checkpoint_every_tokens = j.at("checkpoint_every_tokens").get<std::uint64_t>();
  config.freeze_backbone = j.at("freeze_backbone").get<bool>();
  return config;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model<float>& model,
                     const OptimizerState* opt, const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);

  ordered_json manifest;
  manifest["version"] = 1;
  manifest["run"] = run_to_json(meta.run);
  manifest["vocab_size"] = model.vocab_size;
  manifest["vocab_hash"] = hash_hex(meta.vocab_hash);
  manifest["step"] = meta.step;
  manifest["samples_seen"] = meta.samples_seen;
  manifest["tokens_seen"] = meta.tokens_seen;
  manifest["has_optimizer"] = opt != nullptr;
  manifest["opt_step"] = opt ? opt->step : 0;
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");

  ordered_json index = ordered_json::array();
  auto add_tensors = [&](const Model<float>& source, const std::string& prefix) {
    for (const auto& ref : source.tensors()) {
      const std::string name = prefix + ref.name;
      ordered_json entry;
      entry["name"] = name;
      entry["rows"] = ref.rows;
      entry["cols"] = ref.cols;
      entry["file"] = name + ".bin";
      index.push_back(std::move(entry));
      write_file(dir / (name + ".bin"), encode_f32_le(ref.data, ref.size()));
    }
  };
  add_tensors(model, "");
  if (opt) {
    add_tensors(opt->m, "opt.m.");
    add_tensors(opt->v, "opt.v.");
  }
  write_file(dir / "index.json", index.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, bool need_optimizer) {
  const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  if (manifest.at("version").get<int>() != 1)
    throw IoError("checkpoint: unsupported version in " + dir.string());

  LoadedCheckpoint loaded;
  loaded.meta.run = run_from_json(manifest.at("run"));
  loaded.meta.vocab_size = manifest.at("vocab_size").get<std::int64_t>();
  loaded.meta.vocab_hash = hash_hex_parse(manifest.at("vocab_hash").get<std::string>());
  loaded.meta.step = manifest.at("step").get<std::uint64_t>();
  loaded.meta.samples_seen = manifest.at("samples_seen").get<std::uint64_t>();
  loaded.meta.tokens_seen = manifest.at("tokens_seen").get<std::uint64_t>();
  loaded.meta.has_optimizer = manifest.at("has_optimizer").get<bool>();
  loaded.meta.opt_step = manifest.at("opt_step").get<std::uint64_t>();
  if (need_optimizer && !loaded.meta.has_optimizer)
    throw IoError("checkpoint: optimizer state requested but absent in " + dir.string());

  loaded.model = Model<float>::zeros(loaded.meta.run.backbone, loaded.meta.vocab_size);
  if (need_optimizer) {
    loaded.opt = OptimizerState::init(loaded.model);
    loaded.opt->step = loaded.meta.opt_step;
  }

  std::unordered_map<std::string, TensorRef<float>> by_name;
  for (auto& ref : loaded.model.tensors()) by_name.emplace(ref.name, ref);
  if (loaded.opt) {
    for (auto& ref : loaded.opt->m.tensors()) by_name.emplace("opt.m." + ref.name, ref);
    for (auto& ref : loaded.opt->v.tensors()) by_name.emplace("opt.v." + ref.name, ref);
  }

  const auto index = nlohmann::json::parse(read_file(dir / "index.json"));
  for (const auto& entry : index) {
    const auto name = entry.at("name").get<std::string>();
    const auto rows = entry.at("rows").get<std::int64_t>();
    const auto cols = entry.at("cols").get<std::int64_t>();
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (name.rfind("opt.", 0) == 0 && !loaded.opt) continue;  // moments not requested
      throw IoError("checkpoint: unexpected tensor '" + name + "' in index");
    }
    auto& ref = it->second;
    if (ref.rows != rows || ref.cols != cols)
      throw IoError("checkpoint: shape mismatch for tensor '" + name + "'");
    const auto blob = read_file(dir / entry.at("file").get<std::string>());
    decode_f32_le(blob, ref.data, ref.size());
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw IoError("checkpoint: tensor '" + by_name.begin()->first + "' missing from index");
  return loaded;
}

std::uint64_t checkpoint_content_hash(const std::filesystem::path& dir) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  const auto manifest = read_file(dir / "manifest.json");
  h = fnv1a_64(manifest.data(), manifest.size(), h);
  const auto index_text = read_file(dir / "index.json");
  h = fnv1a_64(index_text.data(), index_text.size(), h);
  const auto index = nlohmann::json::parse(index_text);
  for (const auto& entry : index) {
    const auto blob = read_file(dir / entry.at("file").get<std::string>());
    h = fnv1a_64(blob.data(), blob.size(), h);
  }
  return h;
}

std::uint64_t backbone_tensor_hash(const Model<float>& model) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& ref : model.tensors()) {
    if (!ref.backbone) continue;
    h = fnv1a_64(ref.name.data(), ref.name.size(), h);
    h = fnv1a_64(ref.data, static_cast<std::size_t>(ref.size()) * sizeof(float), h);
  }
  return h;
}

}  // namespace tabrep
