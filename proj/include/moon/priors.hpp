// Clinical priors from organ masks: connected components, volumetry, the
// liver-to-spleen volume ratio, five-level categorical bins, prompt text and
// the one-hot prior embedding.
#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <cstdio>
#include <deque>
#include <string>
#include <vector>

#include "moon/error.hpp"
#include "moon/nn.hpp"
#include "moon/ops.hpp"
#include "moon/volume.hpp"

namespace moon {

// ---- connected components ----------------------------------------------------

struct Components {
  std::vector<std::int32_t> labels;  // 0 = background, components numbered from 1
  std::vector<std::size_t> sizes;    // sizes[i] is the voxel count of label i + 1

  std::size_t count() const { return sizes.size(); }
};

// Labels are assigned in order of each component's first voxel in a
// row-major scan. connectivity: 6 (faces) or 26 (faces, edges, corners).
inline Components connected_components_3d(const Mask& mask, int connectivity = 26) {
  if (connectivity != 6 && connectivity != 26)
    throw ConfigError("connectivity must be 6 or 26, got " + std::to_string(connectivity));
  std::vector<std::array<int, 3>> offsets;
  for (int dx = -1; dx <= 1; ++dx)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dz = -1; dz <= 1; ++dz) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0 || (connectivity == 6 && manhattan != 1)) continue;
        offsets.push_back({dx, dy, dz});
      }

  const auto [nx, ny, nz] = mask.dims;
  Components out;
  out.labels.assign(mask.size(), 0);
  std::deque<std::size_t> queue;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask.data[start] || out.labels[start]) continue;
    const auto label = static_cast<std::int32_t>(out.sizes.size() + 1);
    std::size_t size = 0;
    out.labels[start] = label;
    queue.push_back(start);
    while (!queue.empty()) {
      const std::size_t v = queue.front();
      queue.pop_front();
      ++size;
      const long x = long(v / (ny * nz)), y = long((v / nz) % ny), z = long(v % nz);
      for (const auto& o : offsets) {
        const long a = x + o[0], b = y + o[1], c = z + o[2];
        if (a < 0 || b < 0 || c < 0 || a >= long(nx) || b >= long(ny) || c >= long(nz)) continue;
        const std::size_t u = (std::size_t(a) * ny + std::size_t(b)) * nz + std::size_t(c);
        if (mask.data[u] && !out.labels[u]) {
          out.labels[u] = label;
          queue.push_back(u);
        }
      }
    }
    out.sizes.push_back(size);
  }
  return out;
}

// ---- volumetry ---------------------------------------------------------------

struct OrganVolume {
  std::size_t voxels = 0;
  double mm3 = 0.0;
  double cm3 = 0.0;
};

// Occupied voxels aggregated over all connected components times the voxel volume.
inline OrganVolume organ_volume(const Mask& mask, int connectivity = 26) {
  for (double s : mask.spacing)
    if (!(s > 0.0)) throw ConfigError("voxel spacing must be strictly positive");
  const auto cc = connected_components_3d(mask, connectivity);
  OrganVolume v;
  for (auto s : cc.sizes) v.voxels += s;
  v.mm3 = static_cast<double>(v.voxels) * mask.voxel_volume_mm3();
  v.cm3 = v.mm3 / 1000.0;
  return v;
}

// ---- categorical levels ------------------------------------------------------

enum class PriorParameter { esophagus = 0, liver = 1, spleen = 2, lsvr = 3 };
enum class Level { very_low = 0, low = 1, average = 2, high = 3, very_high = 4 };

inline constexpr int kPriorGroups = 4;
inline constexpr int kLevels = 5;
inline constexpr int kOneHotWidth = kPriorGroups * kLevels;

inline PriorParameter parse_prior_parameter(const std::string& s) {
  if (s == "esophagus") return PriorParameter::esophagus;
  if (s == "liver") return PriorParameter::liver;
  if (s == "spleen") return PriorParameter::spleen;
  if (s == "lsvr") return PriorParameter::lsvr;
  throw ConfigError("unknown prior parameter '" + s + "'");
}

// Bin edges (cm3, or unitless for the ratio) between the five levels.
inline const std::array<double, 4>& level_edges(PriorParameter p) {
  static const std::array<std::array<double, 4>, 4> edges{{
      {15.0, 26.0, 50.0, 74.0},        // esophagus
      {297.0, 782.0, 1267.0, 1753.0},  // liver
      {249.0, 389.0, 529.0, 809.0},    // spleen
      {0.7, 2.4, 6.1, 7.9},            // liver-to-spleen volume ratio
  }};
  return edges[static_cast<std::size_t>(p)];
}

// Very low is v <= e1, very high is v >= e4; interior bins are [lo, hi).
inline Level level_bin(PriorParameter p, double value) {
  const auto& e = level_edges(p);
  if (value <= e[0]) return Level::very_low;
  if (value < e[1]) return Level::low;
  if (value < e[2]) return Level::average;
  if (value < e[3]) return Level::high;
  return Level::very_high;
}

inline Level level_bin(const std::string& parameter, double value) {
  return level_bin(parse_prior_parameter(parameter), value);
}

inline const char* level_word(Level l) {
  static const char* words[] = {"very low", "low", "average", "high", "very high"};
  return words[static_cast<int>(l)];
}

inline const char* level_name(Level l) {
  static const char* names[] = {"VeryLow", "Low", "Average", "High", "VeryHigh"};
  return names[static_cast<int>(l)];
}

// ---- prior record ------------------------------------------------------------

struct PriorRecord {
  double volume_e_cm3 = 0.0;
  double volume_l_cm3 = 0.0;
  double volume_s_cm3 = 0.0;
  double lsvr = 0.0;
  std::array<Level, kPriorGroups> levels{};
  std::string prompt;  // categorical volumes + categorical ratio
  std::array<double, kOneHotWidth> onehot{};
};

enum class PromptMode { volume_numeric, volume_categorical, volume_categorical_lsvr_numeric, volume_categorical_lsvr_categorical };

inline PromptMode parse_prompt_mode(const std::string& s) {
  if (s == "Volume(N)") return PromptMode::volume_numeric;
  if (s == "Volume(C)") return PromptMode::volume_categorical;
  if (s == "Volume(C)+LSVR(N)") return PromptMode::volume_categorical_lsvr_numeric;
  if (s == "Volume(C)+LSVR(C)") return PromptMode::volume_categorical_lsvr_categorical;
  throw ConfigError("unknown prompt mode '" + s + "'");
}

inline std::string prompt_generate(const PriorRecord& r, PromptMode mode) {
  auto number = [](double v, const char* unit) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f%s", v, unit);
    return std::string(buf);
  };
  const bool numeric_volumes = mode == PromptMode::volume_numeric;
  auto vol = [&](int group, double value) {
    return numeric_volumes ? number(value, " cm3") : std::string(level_word(r.levels[group]));
  };
  std::string out = "Esophagus volume: " + vol(0, r.volume_e_cm3) + ". Liver volume: " + vol(1, r.volume_l_cm3) +
                    ". Spleen volume: " + vol(2, r.volume_s_cm3) + ".";
  if (mode == PromptMode::volume_categorical_lsvr_numeric)
    out += " Liver-to-spleen volume ratio: " + number(r.lsvr, "") + ".";
  else if (mode == PromptMode::volume_categorical_lsvr_categorical)
    out += " Liver-to-spleen volume ratio: " + std::string(level_word(r.levels[3])) + ".";
  return out;
}

// Groups (esophagus, liver, spleen, ratio) x levels (very low .. very high).
inline std::array<double, kOneHotWidth> onehot_embed(const std::array<Level, kPriorGroups>& levels) {
  std::array<double, kOneHotWidth> v{};
  for (int g = 0; g < kPriorGroups; ++g) v[g * kLevels + static_cast<int>(levels[g])] = 1.0;
  return v;
}

inline PriorRecord make_prior_record(double vol_e, double vol_l, double vol_s) {
  if (!(vol_s > 0.0)) throw NumericError("spleen volume must be positive to form the liver-to-spleen ratio");
  PriorRecord r;
  r.volume_e_cm3 = vol_e;
  r.volume_l_cm3 = vol_l;
  r.volume_s_cm3 = vol_s;
  r.lsvr = vol_l / vol_s;
  r.levels = {level_bin(PriorParameter::esophagus, vol_e), level_bin(PriorParameter::liver, vol_l),
              level_bin(PriorParameter::spleen, vol_s), level_bin(PriorParameter::lsvr, r.lsvr)};
  r.prompt = prompt_generate(r, PromptMode::volume_categorical_lsvr_categorical);
  r.onehot = onehot_embed(r.levels);
  return r;
}

inline PriorRecord extract_priors(const Mask& eso, const Mask& liver, const Mask& spleen, int connectivity = 26) {
  return make_prior_record(organ_volume(eso, connectivity).cm3, organ_volume(liver, connectivity).cm3,
                           organ_volume(spleen, connectivity).cm3);
}

// ---- CSV export --------------------------------------------------------------

inline const char* kPriorCsvHeader =
    "subject_id,vol_e_cm3,vol_l_cm3,vol_s_cm3,lsvr,level_e,level_l,level_s,level_lsvr,prompt";

inline std::string prior_csv_row(const std::string& subject_id, const PriorRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f", r.volume_e_cm3, r.volume_l_cm3, r.volume_s_cm3, r.lsvr);
  std::string row = subject_id + "," + buf;
  for (auto l : r.levels) row += std::string(",") + level_name(l);
  row += ",\"" + r.prompt + "\"";
  return row;
}

// ---- embedding adaptor -------------------------------------------------------

inline constexpr std::size_t kAdaptorHidden = 32;
inline constexpr std::size_t kDefaultAdaptorDim = 64;

// Two-layer map from the 20-wide one-hot vector to `out_dim` features.
struct PriorAdaptor {
  Tensor w1, b1, w2, b2;

  static PriorAdaptor create(ParameterStore& store, const std::string& prefix, std::size_t out_dim, Rng& rng) {
    PriorAdaptor a;
    a.w1 = store.add_glorot(prefix + ".w1", {kOneHotWidth, kAdaptorHidden}, kOneHotWidth, kAdaptorHidden, rng);
    a.b1 = store.add_zeros(prefix + ".b1", {kAdaptorHidden});
    a.w2 = store.add_glorot(prefix + ".w2", {kAdaptorHidden, out_dim}, kAdaptorHidden, out_dim, rng);
    a.b2 = store.add_zeros(prefix + ".b2", {out_dim});
    return a;
  }

  static std::size_t parameter_count(std::size_t out_dim) {
    return kOneHotWidth * kAdaptorHidden + kAdaptorHidden + kAdaptorHidden * out_dim + out_dim;
  }

  // onehot: (n x 20) -> (n x out_dim)
  Tensor operator()(const Tensor& onehot) const { return linear(relu(linear(onehot, w1, b1)), w2, b2); }
};

}  // namespace moon
