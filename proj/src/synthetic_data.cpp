#include "prosona/synthetic_data.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "prosona/image_io.hpp"

namespace prosona::data {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split: " + s);
}

const CaseEntry& DatasetManifest::find(const std::string& case_id) const {
  for (const auto& c : cases) {
    if (c.case_id == case_id) return c;
  }
  throw LookupError("unknown case_id: " + case_id);
}

std::vector<const CaseEntry*> DatasetManifest::cases_in(Split split) const {
  std::vector<const CaseEntry*> out;
  for (const auto& c : cases) {
    if (c.split == split) out.push_back(&c);
  }
  return out;
}

std::vector<StyleSpec> default_styles(int annotators, double jitter) {
  if (annotators < 1) throw ValidationError("annotators must be >= 1");
  if (annotators == 2) {
    return {
        {"conservative", -2, jitter, {"conservative mask", "tight boundary, small nodule only"}},
        {"inclusive", 2, jitter, {"inclusive mask", "include subtle regions"}},
    };
  }
  if (annotators == 4) {
    return {
        {"conservative", -2, jitter, {"conservative mask", "tight boundary, small nodule only"}},
        {"moderate", 0, jitter, {"moderate mask", "standard boundary"}},
        {"generous", 2, jitter, {"generous mask", "slightly wider boundary"}},
        {"inclusive", 4, jitter, {"inclusive mask", "include subtle regions"}},
    };
  }
  std::vector<StyleSpec> out;
  for (int i = 0; i < annotators; ++i) {
    const int radius = 2 * i - 2 * (annotators / 2);
    const std::string name = "style_" + std::to_string(i + 1);
    out.push_back({name, radius, jitter, {"annotator " + std::to_string(i + 1) + " mask", name + " boundary"}});
  }
  return out;
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr int kMaxAttempts = 10;

struct FamilyShape {
  double radius_fraction = 0.2;
  std::array<double, 3> amplitude{};  // harmonics m = 2, 3, 4
  std::array<double, 3> phase{};
};

struct CasePose {
  double cx = 0, cy = 0;
  double scale = 1.0;
  double rotation = 0.0;
  double gradient_angle = 0.0;
};

FamilyShape draw_family(std::uint64_t family_seed) {
  std::mt19937_64 rng(mix_seed(family_seed, 0x51a9e));
  std::uniform_real_distribution<double> frac(0.16, 0.24);
  std::uniform_real_distribution<double> amp(-0.12, 0.12);
  std::uniform_real_distribution<double> ph(0.0, kTwoPi);
  FamilyShape f;
  f.radius_fraction = frac(rng);
  for (int m = 0; m < 3; ++m) {
    f.amplitude[m] = amp(rng) / (1.0 + 0.5 * m);
    f.phase[m] = ph(rng);
  }
  return f;
}

CasePose draw_pose(std::mt19937_64& rng, const GenerationConfig& cfg) {
  std::uniform_real_distribution<double> offset(-0.06, 0.06);
  std::uniform_real_distribution<double> scale(0.9, 1.1);
  std::uniform_real_distribution<double> angle(0.0, kTwoPi);
  CasePose p;
  p.cx = cfg.width * (0.5 + offset(rng));
  p.cy = cfg.height * (0.5 + offset(rng));
  p.scale = scale(rng);
  p.rotation = angle(rng);
  p.gradient_angle = angle(rng);
  return p;
}

double boundary_radius(const FamilyShape& f, const CasePose& p, double base_radius, double theta) {
  double r = 1.0;
  for (int m = 0; m < 3; ++m) r += f.amplitude[m] * std::cos((m + 2) * (theta - p.rotation) + f.phase[m]);
  return base_radius * r;
}

struct Rendered {
  Mask shape;
  Grid2D<double> signed_margin;  // r(theta) - distance, in pixels
};

Rendered render_shape(const FamilyShape& f, const CasePose& p, double base_radius, int h, int w) {
  Rendered out{Mask(h, w), Grid2D<double>(h, w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dx = x + 0.5 - p.cx;
      const double dy = y + 0.5 - p.cy;
      const double dist = std::hypot(dx, dy);
      const double margin = boundary_radius(f, p, base_radius, std::atan2(dy, dx)) - dist;
      out.signed_margin.at(y, x) = margin;
      out.shape.at(y, x) = margin >= 0.0 ? 1 : 0;
    }
  }
  return out;
}

std::vector<std::pair<int, int>> disk_offsets(int radius) {
  std::vector<std::pair<int, int>> offs;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) offs.emplace_back(dy, dx);
    }
  }
  return offs;
}

Mask radial_jitter(const Mask& m, double jitter, double cx, double cy, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::array<double, 3> cs{}, sn{};
  for (int k = 0; k < 3; ++k) {
    cs[k] = g(rng);
    sn[k] = g(rng);
  }
  if (jitter <= 0.0) return m;
  const double norm = jitter / std::sqrt(3.0);
  Mask out(m.height, m.width);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const double dx = x + 0.5 - cx;
      const double dy = y + 0.5 - cy;
      const double dist = std::hypot(dx, dy);
      const double theta = std::atan2(dy, dx);
      double delta = 0.0;
      for (int k = 0; k < 3; ++k) delta += cs[k] * std::cos((k + 1) * theta) + sn[k] * std::sin((k + 1) * theta);
      delta *= norm;
      // Sample the un-jittered mask at the point pulled radially inward by delta.
      const double scale = dist > 1e-9 ? std::max(0.0, dist - delta) / dist : 1.0;
      const int sx = static_cast<int>(std::floor(cx + dx * scale));
      const int sy = static_cast<int>(std::floor(cy + dy * scale));
      out.at(y, x) = (sx >= 0 && sx < m.width && sy >= 0 && sy < m.height) ? m.at(sy, sx) : 0;
    }
  }
  return out;
}

std::vector<std::size_t> radius_order(std::span<const StyleSpec> styles) {
  std::vector<std::size_t> order(styles.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return styles[a].morph_radius < styles[b].morph_radius; });
  return order;
}

void check_config(const GenerationConfig& cfg, std::span<const StyleSpec> styles) {
  if (cfg.height < 16 || cfg.width < 16) throw ValidationError("generate_case: H and W must be >= 16");
  if (styles.empty()) throw ValidationError("generate_case: at least one style is required");
  for (const auto& s : styles) {
    if (s.boundary_jitter < 0.0) throw ValidationError("style " + s.style_name + ": negative boundary_jitter");
  }
}

}  // namespace

Mask morph(const Mask& m, int radius) {
  if (radius == 0) return m;
  const auto offs = disk_offsets(std::abs(radius));
  Mask out(m.height, m.width);
  const bool dilate = radius > 0;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      bool v = !dilate;
      for (auto [dy, dx] : offs) {
        const int yy = y + dy, xx = x + dx;
        const bool inside = yy >= 0 && yy < m.height && xx >= 0 && xx < m.width && m.at(yy, xx) != 0;
        if (dilate && inside) {
          v = true;
          break;
        }
        if (!dilate && !inside) {
          v = false;
          break;
        }
      }
      out.at(y, x) = v ? 1 : 0;
    }
  }
  return out;
}

Mask base_shape(std::uint64_t seed, const GenerationConfig& config, std::optional<std::uint64_t> family_seed) {
  std::mt19937_64 rng(mix_seed(seed, 0xca5e));
  const FamilyShape family = draw_family(family_seed.value_or(seed));
  const CasePose pose = draw_pose(rng, config);
  const double base_radius = family.radius_fraction * pose.scale * std::min(config.height, config.width);
  return render_shape(family, pose, base_radius, config.height, config.width).shape;
}

Case generate_case(std::uint64_t seed, const GenerationConfig& config, std::span<const StyleSpec> styles,
                   std::optional<std::uint64_t> family_seed) {
  check_config(config, styles);
  const auto order = radius_order(styles);
  std::mt19937_64 rng(mix_seed(seed, 0xca5e));
  const FamilyShape family = draw_family(family_seed.value_or(seed));
  const CasePose pose = draw_pose(rng, config);
  double base_radius = family.radius_fraction * pose.scale * std::min(config.height, config.width);

  for (int attempt = 0; attempt < kMaxAttempts; ++attempt, base_radius *= 1.25) {
    std::mt19937_64 style_rng(mix_seed(seed, 0x57e1, static_cast<std::uint64_t>(attempt)));
    const Rendered base = render_shape(family, pose, base_radius, config.height, config.width);

    Case c;
    c.masks.reserve(styles.size());
    bool degenerate = false;
    for (std::size_t idx : order) {
      const auto& style = styles[idx];
      Mask m = radial_jitter(morph(base.shape, style.morph_radius), style.boundary_jitter, pose.cx, pose.cy, style_rng);
      if (mask_area(m) == 0) {
        degenerate = true;
        break;
      }
      c.masks.push_back(std::move(m));
    }
    if (degenerate) continue;
    Mask common = c.masks.front();
    for (const auto& m : c.masks) {
      for (std::size_t i = 0; i < common.size(); ++i) common.values[i] &= m.values[i];
    }
    if (mask_area(common) == 0) continue;

    std::normal_distribution<double> noise(0.0, config.noise_std);
    const double gx = std::cos(pose.gradient_angle), gy = std::sin(pose.gradient_angle);
    c.image = Image(config.height, config.width);
    for (int y = 0; y < config.height; ++y) {
      for (int x = 0; x < config.width; ++x) {
        const double ramp = 0.1 * (gx * (x + 0.5) / config.width + gy * (y + 0.5) / config.height);
        const double body = 0.5 / (1.0 + std::exp(-base.signed_margin.at(y, x) / 1.5));
        c.image.at(y, x) = std::clamp(0.2 + ramp + body + noise(rng), 0.0, 1.0);
      }
    }
    return c;
  }
  throw DegenerateGeometryError("generate_case: style transforms emptied a mask after " + std::to_string(kMaxAttempts) +
                                " attempts (seed " + std::to_string(seed) + ")");
}

namespace {

ordered_json style_to_json(const StyleSpec& s) {
  return ordered_json{{"style_name", s.style_name},
                      {"morph_radius", s.morph_radius},
                      {"boundary_jitter", s.boundary_jitter},
                      {"prompt_texts", s.prompt_texts}};
}

StyleSpec style_from_json(const json& j) {
  StyleSpec s;
  s.style_name = j.at("style_name").get<std::string>();
  s.morph_radius = j.at("morph_radius").get<int>();
  s.boundary_jitter = j.at("boundary_jitter").get<double>();
  s.prompt_texts = j.at("prompt_texts").get<std::vector<std::string>>();
  if (s.prompt_texts.empty()) throw FormatError("style " + s.style_name + " has no prompt_texts");
  return s;
}

std::string case_id_for(int index) {
  std::ostringstream ss;
  ss << "case_" << std::setw(4) << std::setfill('0') << index;
  return ss.str();
}

}  // namespace

DatasetManifest generate_dataset(const GenerationConfig& config, const fs::path& out_dir, bool force) {
  if (config.num_cases < 8) throw ValidationError("generate_dataset: need at least 8 cases, got " + std::to_string(config.num_cases));
  if (config.cases_per_family < 1) throw ValidationError("generate_dataset: cases_per_family must be >= 1");
  if (fs::exists(out_dir)) {
    if (!fs::is_directory(out_dir)) throw ConfigError("output path exists and is not a directory: " + out_dir.string());
    if (!fs::is_empty(out_dir)) {
      if (!force) throw ConfigError("refusing to overwrite non-empty directory " + out_dir.string() + " (use --force)");
      for (const auto& entry : fs::directory_iterator(out_dir)) fs::remove_all(entry.path());
    }
  }
  fs::create_directories(out_dir / "cases");

  std::vector<StyleSpec> styles = default_styles(config.annotators, config.boundary_jitter);
  std::stable_sort(styles.begin(), styles.end(),
                   [](const StyleSpec& a, const StyleSpec& b) { return a.morph_radius < b.morph_radius; });

  const int n = config.num_cases;
  const int families = (n + config.cases_per_family - 1) / config.cases_per_family;
  if (families < 3) throw ValidationError("generate_dataset: need at least 3 shape families for train/val/test");

  std::vector<Case> cases(static_cast<std::size_t>(n));
  parallel_for(cases.size(), default_thread_count(), [&](std::size_t i) {
    const int family = static_cast<int>(i) / config.cases_per_family;
    cases[i] = generate_case(mix_seed(config.seed, i), config, styles,
                             mix_seed(config.seed, 0xfa11, static_cast<std::uint64_t>(family)));
    cases[i].case_id = case_id_for(static_cast<int>(i));
  });

  // Annotator order: ascending mean mask area over the whole dataset.
  std::vector<double> mean_area(styles.size(), 0.0);
  for (const auto& c : cases) {
    for (std::size_t a = 0; a < styles.size(); ++a) mean_area[a] += static_cast<double>(mask_area(c.masks[a])) / n;
  }
  std::vector<std::size_t> order(styles.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mean_area[a] < mean_area[b]; });
  {
    std::vector<StyleSpec> sorted;
    for (auto a : order) sorted.push_back(styles[a]);
    styles = std::move(sorted);
    for (auto& c : cases) {
      std::vector<Mask> m;
      for (auto a : order) m.push_back(std::move(c.masks[a]));
      c.masks = std::move(m);
    }
  }

  // Family-level split 70/10/20.
  std::vector<int> family_order(static_cast<std::size_t>(families));
  std::iota(family_order.begin(), family_order.end(), 0);
  std::mt19937_64 split_rng(mix_seed(config.seed, 0x5b117));
  std::shuffle(family_order.begin(), family_order.end(), split_rng);
  const int n_test = std::max(1, static_cast<int>(std::lround(0.2 * families)));
  const int n_val = std::max(1, static_cast<int>(std::lround(0.1 * families)));
  const int n_train = families - n_test - n_val;
  if (n_train < 1) throw ValidationError("generate_dataset: too few families for a train split");
  std::vector<Split> family_split(static_cast<std::size_t>(families));
  for (int r = 0; r < families; ++r) {
    family_split[family_order[r]] = r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
  }

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.config = config;
  manifest.styles = styles;
  manifest.generator_seed = config.seed;

  ordered_json cases_json = ordered_json::array();
  ordered_json splits_json = ordered_json::object();
  for (int i = 0; i < n; ++i) {
    const auto& c = cases[static_cast<std::size_t>(i)];
    CaseEntry e;
    e.case_id = c.case_id;
    e.family = i / config.cases_per_family;
    e.split = family_split[static_cast<std::size_t>(e.family)];
    e.image_path = "cases/" + c.case_id + "/image.png";
    fs::create_directories(out_dir / "cases" / c.case_id);
    io::write_png(out_dir / e.image_path, io::to_raster(c.image));
    for (std::size_t a = 0; a < c.masks.size(); ++a) {
      e.mask_paths.push_back("cases/" + c.case_id + "/mask_" + std::to_string(a + 1) + ".png");
      io::write_png(out_dir / e.mask_paths.back(), io::to_raster(c.masks[a]));
    }
    cases_json.push_back(ordered_json{{"case_id", e.case_id}, {"family", e.family}, {"image", e.image_path}, {"masks", e.mask_paths}});
    splits_json[e.case_id] = to_string(e.split);
    manifest.cases.push_back(std::move(e));
  }

  ordered_json styles_json = ordered_json::array();
  ordered_json prompts_json = ordered_json::object();
  for (const auto& s : styles) {
    styles_json.push_back(style_to_json(s));
    prompts_json[s.style_name] = s.prompt_texts;
  }
  ordered_json j{
      {"schema_version", DatasetManifest::kSchemaVersion},
      {"version", manifest.version},
      {"generator_seed", config.seed},
      {"config",
       {{"height", config.height},
        {"width", config.width},
        {"num_cases", config.num_cases},
        {"annotators", config.annotators},
        {"cases_per_family", config.cases_per_family},
        {"noise_std", config.noise_std},
        {"boundary_jitter", config.boundary_jitter}}},
      {"styles", styles_json},
      {"cases", cases_json},
      {"splits", splits_json},
  };
  io::write_bytes(out_dir / "manifest.json", j.dump(2) + "\n");
  io::write_bytes(out_dir / "prompts.json", prompts_json.dump(2) + "\n");
  return manifest;
}

DatasetManifest load_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  if (!fs::exists(path)) throw IoError("missing manifest: " + path.string());
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  try {
    if (j.at("schema_version").get<int>() != DatasetManifest::kSchemaVersion)
      throw FormatError(path.string() + ": unsupported schema_version");
    DatasetManifest m;
    m.root = dir;
    m.version = j.at("version").get<std::string>();
    m.generator_seed = j.at("generator_seed").get<std::uint64_t>();
    const auto& cfg = j.at("config");
    m.config.height = cfg.at("height").get<int>();
    m.config.width = cfg.at("width").get<int>();
    m.config.num_cases = cfg.at("num_cases").get<int>();
    m.config.annotators = cfg.at("annotators").get<int>();
    m.config.cases_per_family = cfg.at("cases_per_family").get<int>();
    m.config.noise_std = cfg.at("noise_std").get<double>();
    m.config.boundary_jitter = cfg.at("boundary_jitter").get<double>();
    m.config.seed = m.generator_seed;
    for (const auto& s : j.at("styles")) m.styles.push_back(style_from_json(s));
    const auto& splits = j.at("splits");
    for (const auto& c : j.at("cases")) {
      CaseEntry e;
      e.case_id = c.at("case_id").get<std::string>();
      e.family = c.at("family").get<int>();
      e.image_path = c.at("image").get<std::string>();
      e.mask_paths = c.at("masks").get<std::vector<std::string>>();
      e.split = split_from_string(splits.at(e.case_id).get<std::string>());
      if (e.mask_paths.size() != m.styles.size())
        throw FormatError(path.string() + ": case " + e.case_id + " mask count does not match style count");
      m.cases.push_back(std::move(e));
    }
    return m;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void verify_files(const DatasetManifest& manifest) {
  for (const auto& c : manifest.cases) {
    if (!fs::exists(manifest.root / c.image_path)) throw IoError("missing file: " + (manifest.root / c.image_path).string());
    for (const auto& p : c.mask_paths) {
      if (!fs::exists(manifest.root / p)) throw IoError("missing file: " + (manifest.root / p).string());
    }
  }
}

Case load_case(const DatasetManifest& manifest, const std::string& case_id) {
  const CaseEntry& e = manifest.find(case_id);
  Case c;
  c.case_id = e.case_id;
  const fs::path image_path = manifest.root / e.image_path;
  c.image = io::image_from_raster(io::read_png(image_path));
  for (const auto& rel : e.mask_paths) {
    const fs::path p = manifest.root / rel;
    Mask m = io::mask_from_raster(io::read_png(p), p.string());
    if (!m.same_shape(c.image))
      throw FormatError(p.string() + ": mask is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                        " but image is " + std::to_string(c.image.height) + "x" + std::to_string(c.image.width));
    c.masks.push_back(std::move(m));
  }
  return c;
}

PromptCatalog load_prompt_catalog(const fs::path& path) {
  ordered_json j;
  try {
    j = ordered_json::parse(io::read_text(path));
  } catch (const ordered_json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError(path.string() + ": expected an object of style_name -> [prompts]");
  PromptCatalog cat;
  for (const auto& [name, texts] : j.items()) {
    StyleSpec s;
    s.style_name = name;
    s.prompt_texts = texts.get<std::vector<std::string>>();
    if (s.prompt_texts.empty()) throw FormatError(path.string() + ": style " + name + " has no prompts");
    cat.styles.push_back(std::move(s));
  }
  return cat;
}

PromptCatalog catalog_from_manifest(const DatasetManifest& manifest) { return PromptCatalog{manifest.styles}; }

}  // namespace prosona::data
