#include "prosona/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "prosona/image_io.hpp"

#ifndef PROSONA_GIT_HASH
#define PROSONA_GIT_HASH "unknown"
#endif

static_assert(std::endian::native == std::endian::little, "params.bin is written in native little-endian order");

namespace prosona::ckpt {

namespace {

nlohmann::ordered_json arch_json(const model::Architecture& a) {
  return {{"height", a.height},       {"width", a.width},           {"in_channels", a.in_channels},
          {"base_width", a.base_width}, {"depth", a.depth},           {"latent_dim", a.latent_dim},
          {"text_dim", a.text_dim},   {"mlp_hidden", a.mlp_hidden}, {"sigma_floor", a.sigma_floor},
          {"text_encoder", a.text_encoder}};
}

model::Architecture arch_from(const nlohmann::json& j) {
  model::Architecture a;
  a.height = j.at("height");
  a.width = j.at("width");
  a.in_channels = j.at("in_channels");
  a.base_width = j.at("base_width");
  a.depth = j.at("depth");
  a.latent_dim = j.at("latent_dim");
  a.text_dim = j.at("text_dim");
  a.mlp_hidden = j.at("mlp_hidden");
  a.sigma_floor = j.at("sigma_floor");
  a.text_encoder = j.at("text_encoder");
  return a;
}

std::string blob(const model::Model& m) {
  const auto v = m.params().values();
  std::string out(v.size() * sizeof(double), '\0');
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

}  // namespace

std::string build_git_hash() { return PROSONA_GIT_HASH; }

std::string params_sha256(const model::Model& m) {
  const auto v = m.params().values();
  return io::sha256_hex(v.data(), v.size() * sizeof(double));
}

Metadata save(const model::Model& m, const std::filesystem::path& dir, std::uint64_t seed, const std::string& parent_id,
              double val_ged, int epoch) {
  std::filesystem::create_directories(dir);
  Metadata meta;
  meta.arch = m.arch();
  meta.stage = m.stage();
  meta.seed = seed;
  meta.git_hash = build_git_hash();
  meta.params_sha256 = params_sha256(m);
  meta.checkpoint_id = meta.params_sha256.substr(0, 16);
  meta.parent_id = parent_id;
  meta.val_ged = val_ged;
  meta.epoch = epoch;

  io::write_bytes(dir / "params.bin", blob(m));
  nlohmann::ordered_json j;
  j["format_version"] = Metadata::kFormatVersion;
  j["checkpoint_id"] = meta.checkpoint_id;
  j["stage"] = meta.stage;
  j["architecture"] = arch_json(meta.arch);
  j["seed"] = meta.seed;
  j["git_hash"] = meta.git_hash;
  j["param_count"] = m.params().size();
  j["params_sha256"] = meta.params_sha256;
  j["parent_checkpoint_id"] = meta.parent_id;
  j["val_ged"] = meta.val_ged;
  j["epoch"] = meta.epoch;
  io::write_bytes(dir / "checkpoint.json", j.dump(2) + "\n");
  return meta;
}

Metadata read_metadata(const std::filesystem::path& dir) {
  const auto path = dir / "checkpoint.json";
  if (!std::filesystem::exists(path)) throw IoError("no checkpoint at " + dir.string() + " (missing checkpoint.json)");
  try {
    const auto j = nlohmann::json::parse(io::read_text(path));
    if (j.at("format_version").get<int>() != Metadata::kFormatVersion) throw FormatError(path.string() + ": unsupported format_version");
    Metadata m;
    m.arch = arch_from(j.at("architecture"));
    m.stage = j.at("stage");
    m.seed = j.at("seed");
    m.git_hash = j.at("git_hash");
    m.params_sha256 = j.at("params_sha256");
    m.checkpoint_id = j.at("checkpoint_id");
    m.parent_id = j.value("parent_checkpoint_id", "");
    m.val_ged = j.value("val_ged", -1.0);
    m.epoch = j.value("epoch", -1);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

model::Model load(const std::filesystem::path& dir, Metadata* meta_out) {
  const Metadata meta = read_metadata(dir);
  model::Model m(meta.arch, meta.seed);
  m.set_stage(meta.stage);
  const auto bytes = io::read_text(dir / "params.bin");
  auto values = m.params().values();
  if (bytes.size() != values.size() * sizeof(double))
    throw FormatError((dir / "params.bin").string() + ": size does not match the architecture");
  std::memcpy(values.data(), bytes.data(), bytes.size());
  if (params_sha256(m) != meta.params_sha256) throw FormatError((dir / "params.bin").string() + ": checksum mismatch");
  if (meta_out != nullptr) *meta_out = meta;
  return m;
}

}  // namespace prosona::ckpt
