#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prosona/common.hpp"

namespace prosona::data {

/// One simulated annotator style: a signed morphological radius (negative erodes,
/// positive dilates) followed by smooth radial boundary noise.
struct StyleSpec {
  std::string style_name;
  int morph_radius = 0;
  double boundary_jitter = 0.0;
  std::vector<std::string> prompt_texts;
};

struct GenerationConfig {
  int height = 128;
  int width = 128;
  int num_cases = 100;
  int annotators = 4;
  int cases_per_family = 2;
  double noise_std = 0.03;
  double boundary_jitter = 0.5;
  std::uint64_t seed = 0;
};

struct Case {
  std::string case_id;
  Image image;
  std::vector<Mask> masks;  // annotator i = masks[i-1], conservative → inclusive

  bool operator==(const Case&) const = default;
};

enum class Split { train, val, test };

[[nodiscard]] std::string to_string(Split s);
[[nodiscard]] Split split_from_string(const std::string& s);

struct CaseEntry {
  std::string case_id;
  int family = 0;
  Split split = Split::train;
  std::string image_path;               // relative to the dataset root
  std::vector<std::string> mask_paths;  // relative to the dataset root
};

struct DatasetManifest {
  static constexpr int kSchemaVersion = 1;

  std::string version = "1.0";
  std::filesystem::path root;
  GenerationConfig config;
  std::vector<StyleSpec> styles;
  std::vector<CaseEntry> cases;
  std::uint64_t generator_seed = 0;

  [[nodiscard]] const CaseEntry& find(const std::string& case_id) const;
  [[nodiscard]] std::vector<const CaseEntry*> cases_in(Split split) const;
  [[nodiscard]] int annotator_count() const { return static_cast<int>(styles.size()); }
};

/// Default catalog: A=2 → {−2, +2}; A=4 → {−2, 0, +2, +4}; other A spread radii evenly.
[[nodiscard]] std::vector<StyleSpec> default_styles(int annotators, double jitter);

/// Deterministic single case. Styles are applied in ascending morph_radius order, so the
/// returned masks run conservative → inclusive. `family_seed` fixes the base shape family
/// (defaults to `seed`); `seed` controls the per-case pose, scale, noise and jitter.
[[nodiscard]] Case generate_case(std::uint64_t seed, const GenerationConfig& config, std::span<const StyleSpec> styles,
                                 std::optional<std::uint64_t> family_seed = std::nullopt);

/// Base shape only (no style), as rasterised by generate_case for the same arguments.
[[nodiscard]] Mask base_shape(std::uint64_t seed, const GenerationConfig& config,
                              std::optional<std::uint64_t> family_seed = std::nullopt);

[[nodiscard]] Mask morph(const Mask& m, int radius);

/// Writes manifest.json, prompts.json and cases/<id>/{image,mask_<i>}.png.
DatasetManifest generate_dataset(const GenerationConfig& config, const std::filesystem::path& out_dir, bool force = false);

[[nodiscard]] DatasetManifest load_manifest(const std::filesystem::path& dir);
[[nodiscard]] Case load_case(const DatasetManifest& manifest, const std::string& case_id);

/// Throws IoError naming the first missing file.
void verify_files(const DatasetManifest& manifest);

/// style_name → prompt_texts, as stored in prompts.json.
struct PromptCatalog {
  std::vector<StyleSpec> styles;  // only style_name and prompt_texts are meaningful
};
[[nodiscard]] PromptCatalog load_prompt_catalog(const std::filesystem::path& path);
[[nodiscard]] PromptCatalog catalog_from_manifest(const DatasetManifest& manifest);

}  // namespace prosona::data
