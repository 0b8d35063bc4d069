// Synthetic multi-organ cohort. Each subject draws a grade, then latent organ
// parameters from grade-conditional Gaussians: spleen volume grows with the
// grade, liver volume shrinks for the severe grades, and the esophagus (an
// ellipsoidal shell) thickens and grows more heterogeneous. Organs are
// rasterized as ellipsoids on their own ROI grid with Gaussian intensity noise.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "moon/config.hpp"
#include "moon/error.hpp"
#include "moon/parallel.hpp"
#include "moon/priors.hpp"
#include "moon/rng.hpp"
#include "moon/volume.hpp"

namespace moon {

inline constexpr int kOrgans = 3;
inline const std::array<const char*, kOrgans> kOrganNames{"esophagus", "liver", "spleen"};

struct GaussianParam {
  std::vector<double> mean;  // one entry per grade
  std::vector<double> sd;
};

struct CohortConfig {
  std::size_t subjects = 500;
  std::vector<double> proportions{0.148, 0.278, 0.220, 0.354};
  Dims3 grid{32, 32, 48};
  // Isotropic voxel spacing (mm) for the esophagus, liver and spleen grids.
  std::array<double, kOrgans> spacing{2.0, 5.0, 5.0};

  GaussianParam spleen_volume{{190, 320, 640, 1050}, {40, 60, 110, 170}};  // cm3
  GaussianParam liver_volume{{1500, 1600, 1400, 1150}, {150, 150, 150, 150}};
  GaussianParam eso_radius{{14, 15, 16.5, 18}, {1.5, 1.5, 1.5, 1.5}};  // outer, mm
  GaussianParam eso_thickness{{2, 3, 4.5, 6}, {1.0, 1.1, 1.2, 1.3}};  // mm
  GaussianParam eso_heterogeneity{{0.05, 0.10, 0.18, 0.28}, {0.06, 0.06, 0.06, 0.06}};
  GaussianParam liver_heterogeneity{{0.05, 0.08, 0.14, 0.20}, {0.03, 0.03, 0.03, 0.03}};
  double eso_half_length = 42.0;  // mm
  double spleen_heterogeneity = 0.05;
  double intensity_noise = 0.1;
  double noise_level = 1.0;  // scales every latent sd and the intensity noise

  double test_fraction = 0.2;
  double val_fraction = 0.08;
  std::uint64_t seed = 20240501;

  std::size_t grades() const { return proportions.size(); }

  void validate() const {
    if (subjects == 0) throw ConfigError("cohort: subject count must be positive");
    if (proportions.size() < 2) throw ConfigError("cohort: need at least 2 grades");
    double total = 0.0;
    for (double p : proportions) {
      if (!(p >= 0.0)) throw ConfigError("grade proportions must be non-negative");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("grade proportions must sum to 1");
    for (auto d : grid)
      if (d == 0) throw ConfigError("cohort: zero-length grid axis");
    for (double s : spacing)
      if (!(s > 0.0)) throw ConfigError("cohort: spacing must be strictly positive");
    for (const auto* p : {&spleen_volume, &liver_volume, &eso_radius, &eso_thickness, &eso_heterogeneity,
                          &liver_heterogeneity}) {
      if (p->mean.size() != grades() || p->sd.size() != grades())
        throw ConfigError("cohort: per-grade parameter lists must have " + std::to_string(grades()) + " entries");
      for (double s : p->sd)
        if (!(s > 0.0)) throw ConfigError("cohort: variance parameters must be positive");
    }
    if (!(noise_level >= 0.0) || !(intensity_noise >= 0.0)) throw ConfigError("cohort: noise must be non-negative");
    if (!(test_fraction >= 0.0 && val_fraction >= 0.0 && test_fraction + val_fraction < 1.0))
      throw ConfigError("cohort: split fractions must leave a non-empty training set");
  }

  static CohortConfig from_config(const FlatConfig& c) {
    CohortConfig out;
    out.subjects = static_cast<std::size_t>(c.get_int("cohort.subjects", static_cast<std::int64_t>(out.subjects)));
    out.proportions = c.get_doubles("cohort.proportions", out.proportions);
    const auto g = c.get_ints("cohort.grid", {32, 32, 48});
    if (g.size() != 3) throw ConfigError("cohort.grid needs 3 entries");
    for (int a = 0; a < 3; ++a) {
      if (g[a] <= 0) throw ConfigError("cohort.grid entries must be positive");
      out.grid[a] = static_cast<std::size_t>(g[a]);
    }
    for (int o = 0; o < kOrgans; ++o)
      out.spacing[o] = c.get_double(std::string("cohort.spacing_") + kOrganNames[o], out.spacing[o]);
    auto param = [&](const std::string& name, GaussianParam& p) {
      p.mean = c.get_doubles("cohort." + name + "_mean", p.mean);
      p.sd = c.get_doubles("cohort." + name + "_sd", p.sd);
    };
    param("spleen_volume", out.spleen_volume);
    param("liver_volume", out.liver_volume);
    param("eso_radius", out.eso_radius);
    param("eso_thickness", out.eso_thickness);
    param("eso_heterogeneity", out.eso_heterogeneity);
    param("liver_heterogeneity", out.liver_heterogeneity);
    out.eso_half_length = c.get_double("cohort.eso_half_length", out.eso_half_length);
    out.spleen_heterogeneity = c.get_double("cohort.spleen_heterogeneity", out.spleen_heterogeneity);
    out.intensity_noise = c.get_double("cohort.intensity_noise", out.intensity_noise);
    out.noise_level = c.get_double("cohort.noise_level", out.noise_level);
    out.test_fraction = c.get_double("cohort.test_fraction", out.test_fraction);
    out.val_fraction = c.get_double("cohort.val_fraction", out.val_fraction);
    out.seed = static_cast<std::uint64_t>(c.get_int("cohort.seed", static_cast<std::int64_t>(out.seed)));
    out.validate();
    return out;
  }
};

// Latent generator draws, kept for the Bayes oracle and for auditing.
struct Latent {
  double volume_l = 0, volume_s = 0;  // cm3
  double eso_radius = 0, eso_thickness = 0;
  double eso_heterogeneity = 0, liver_heterogeneity = 0;
};

struct OrganSample {
  std::string id;
  int grade = 0;
  std::array<Image, kOrgans> images;
  std::array<Mask, kOrgans> masks;
  Latent latent;
  PriorRecord prior;
};

// Splits `total` into integer parts proportional to `weights` (largest remainder).
inline std::vector<std::size_t> apportion(const std::vector<double>& weights, std::size_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> out(weights.size(), 0);
  if (total == 0 || !(sum > 0.0)) return out;
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = weights[i] / sum * static_cast<double>(total);
    out[i] = static_cast<std::size_t>(std::floor(exact));
    used += out[i];
    rem.emplace_back(exact - static_cast<double>(out[i]), i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++out[rem[k % rem.size()].second];
  return out;
}

template <class T>
void seeded_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

// Grade per subject: exact proportional counts, then a seeded shuffle.
inline std::vector<int> assign_grades(const CohortConfig& cfg) {
  const auto counts = apportion(cfg.proportions, cfg.subjects);
  std::vector<int> grades;
  for (std::size_t g = 0; g < counts.size(); ++g) grades.insert(grades.end(), counts[g], static_cast<int>(g));
  Rng rng(derive_seed(cfg.seed, "grades", 0));
  seeded_shuffle(grades, rng);
  return grades;
}

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train|val|test)");
}

// Grade-stratified split: test and val quotas per grade by largest remainder.
inline std::vector<Split> assign_splits(const std::vector<int>& grades, double test_fraction, double val_fraction,
                                        std::uint64_t seed) {
  const int k = grades.empty() ? 0 : *std::max_element(grades.begin(), grades.end()) + 1;
  std::vector<std::vector<std::size_t>> by_grade(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < grades.size(); ++i) by_grade[static_cast<std::size_t>(grades[i])].push_back(i);
  std::vector<double> sizes;
  for (const auto& b : by_grade) sizes.push_back(static_cast<double>(b.size()));
  const auto n = static_cast<double>(grades.size());
  const auto test_quota = apportion(sizes, static_cast<std::size_t>(std::llround(n * test_fraction)));
  const auto val_quota = apportion(sizes, static_cast<std::size_t>(std::llround(n * val_fraction)));
  std::vector<Split> out(grades.size(), Split::train);
  Rng rng(derive_seed(seed, "split", 0));
  for (std::size_t g = 0; g < by_grade.size(); ++g) {
    auto idx = by_grade[g];
    seeded_shuffle(idx, rng);
    std::size_t pos = 0;
    for (std::size_t t = 0; t < test_quota[g] && pos < idx.size(); ++t) out[idx[pos++]] = Split::test;
    for (std::size_t t = 0; t < val_quota[g] && pos < idx.size(); ++t) out[idx[pos++]] = Split::val;
  }
  return out;
}

namespace detail {

struct Ellipsoid {
  std::array<double, 3> center;  // mm, grid frame
  std::array<double, 3> semi;    // mm
  bool contains(const std::array<double, 3>& p) const {
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - center[a]) / semi[a];
      s += d * d;
    }
    return s <= 1.0;
  }
};

// Aspect ratios (product ~1) for the solid organs.
inline constexpr std::array<double, 3> kLiverAspect{0.9, 0.85, 1.3};
inline constexpr std::array<double, 3> kSpleenAspect{0.75, 0.95, 1.4};

inline std::array<double, 3> semi_axes_for_volume(double cm3, const std::array<double, 3>& aspect) {
  const double k = std::cbrt(cm3 * 1000.0 / (4.0 / 3.0 * M_PI * aspect[0] * aspect[1] * aspect[2]));
  return {k * aspect[0], k * aspect[1], k * aspect[2]};
}

// Places an ellipsoid with the given semi-axes at a jittered grid center;
// false when it does not fit with one voxel of margin.
inline bool place(const Dims3& grid, double spacing, const std::array<double, 3>& semi, Rng& rng, Ellipsoid& out) {
  out.semi = semi;
  for (int a = 0; a < 3; ++a) {
    const double half = 0.5 * static_cast<double>(grid[a]) * spacing;
    const double slack = half - semi[a] - spacing;
    if (slack < 0.0) return false;
    out.center[a] = half + rng.uniform(-0.5, 0.5) * slack;
  }
  return true;
}

inline std::array<double, 3> voxel_center(std::size_t x, std::size_t y, std::size_t z, double spacing) {
  return {(static_cast<double>(x) + 0.5) * spacing, (static_cast<double>(y) + 0.5) * spacing,
          (static_cast<double>(z) + 0.5) * spacing};
}

// Solid organ: base * (1 + h * z) inside, 0 outside, plus additive noise everywhere.
inline void rasterize_solid(const Ellipsoid& e, double base, double heterogeneity, double noise, double spacing,
                            Image& img, Mask& mask, Rng& rng) {
  for (std::size_t x = 0; x < img.dims[0]; ++x)
    for (std::size_t y = 0; y < img.dims[1]; ++y)
      for (std::size_t z = 0; z < img.dims[2]; ++z) {
        const bool in = e.contains(voxel_center(x, y, z, spacing));
        double v = in ? base * (1.0 + heterogeneity * rng.normal()) : 0.0;
        if (noise > 0.0) v += noise * rng.normal();
        img.at(x, y, z) = v;
        mask.at(x, y, z) = in ? 1 : 0;
      }
}

inline constexpr double kLumenIntensity = 0.35;
inline constexpr double kSpleenIntensity = 0.8;

// Esophagus: wall between the outer and inner ellipsoid; the lumen stays
// outside the mask but keeps a distinct intensity.
inline void rasterize_shell(const Ellipsoid& outer, const Ellipsoid& inner, double heterogeneity, double noise,
                            double spacing, Image& img, Mask& mask, Rng& rng) {
  for (std::size_t x = 0; x < img.dims[0]; ++x)
    for (std::size_t y = 0; y < img.dims[1]; ++y)
      for (std::size_t z = 0; z < img.dims[2]; ++z) {
        const auto p = voxel_center(x, y, z, spacing);
        const bool lumen = inner.contains(p);
        const bool wall = !lumen && outer.contains(p);
        double v = wall ? 1.0 + heterogeneity * rng.normal() : lumen ? kLumenIntensity : 0.0;
        if (noise > 0.0) v += noise * rng.normal();
        img.at(x, y, z) = v;
        mask.at(x, y, z) = wall ? 1 : 0;
      }
}

}  // namespace detail

inline constexpr int kMaxPlacementTries = 100;

inline std::string subject_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "S%04zu", index + 1);
  return buf;
}

// Generates subject `index` with the given grade from its own derived seed.
inline OrganSample synth_subject(const CohortConfig& cfg, std::size_t index, int grade) {
  const auto g = static_cast<std::size_t>(grade);
  Rng rng(derive_seed(cfg.seed, "subject", index));
  auto draw = [&](const GaussianParam& p) { return p.mean[g] + cfg.noise_level * p.sd[g] * rng.normal(); };
  const double noise = cfg.intensity_noise * cfg.noise_level;

  OrganSample s;
  s.id = subject_id(index);
  s.grade = grade;
  for (int o = 0; o < kOrgans; ++o) {
    const Spacing3 sp{cfg.spacing[o], cfg.spacing[o], cfg.spacing[o]};
    s.images[o] = Image(cfg.grid, sp);
    s.masks[o] = Mask(cfg.grid, sp);
  }

  // Esophagus: outer radius and wall thickness, resampled until a lumen remains and the shell fits.
  detail::Ellipsoid outer, inner;
  for (int tries = 0;; ++tries) {
    if (tries == kMaxPlacementTries) throw ConfigError("cohort: esophagus does not fit the grid after 100 tries");
    const double r = draw(cfg.eso_radius), t = draw(cfg.eso_thickness);
    if (!(t >= 0.5 && r - t >= 2.0 && t < cfg.eso_half_length - 2.0)) continue;
    if (!detail::place(cfg.grid, cfg.spacing[0], {r, r, cfg.eso_half_length}, rng, outer)) continue;
    inner = {outer.center, {r - t, r - t, cfg.eso_half_length - t}};
    s.latent.eso_radius = r;
    s.latent.eso_thickness = t;
    break;
  }
  s.latent.eso_heterogeneity = std::max(0.0, draw(cfg.eso_heterogeneity));

  auto solid = [&](const GaussianParam& vol, const std::array<double, 3>& aspect, int organ, const char* name) {
    detail::Ellipsoid e;
    for (int tries = 0;; ++tries) {
      if (tries == kMaxPlacementTries)
        throw ConfigError(std::string("cohort: ") + name + " does not fit the grid after 100 tries");
      const double v = draw(vol);
      if (!(v >= 20.0)) continue;
      if (!detail::place(cfg.grid, cfg.spacing[organ], detail::semi_axes_for_volume(v, aspect), rng, e)) continue;
      return std::pair{v, e};
    }
  };
  const auto [vl, liver] = solid(cfg.liver_volume, detail::kLiverAspect, 1, "liver");
  const auto [vs, spleen] = solid(cfg.spleen_volume, detail::kSpleenAspect, 2, "spleen");
  s.latent.volume_l = vl;
  s.latent.volume_s = vs;
  s.latent.liver_heterogeneity = std::max(0.0, draw(cfg.liver_heterogeneity));

  detail::rasterize_shell(outer, inner, s.latent.eso_heterogeneity, noise, cfg.spacing[0], s.images[0], s.masks[0], rng);
  detail::rasterize_solid(liver, 1.0, s.latent.liver_heterogeneity, noise, cfg.spacing[1], s.images[1], s.masks[1], rng);
  detail::rasterize_solid(spleen, detail::kSpleenIntensity, cfg.spleen_heterogeneity, noise, cfg.spacing[2],
                          s.images[2], s.masks[2], rng);
  for (int o = 0; o < kOrgans; ++o)
    if (std::find(s.masks[o].data.begin(), s.masks[o].data.end(), 1) == s.masks[o].data.end())
      throw NumericError(std::string("cohort: empty ") + kOrganNames[o] + " mask for " + s.id);
  s.prior = extract_priors(s.masks[0], s.masks[1], s.masks[2]);
  return s;
}

inline std::vector<OrganSample> synth_cohort(const CohortConfig& cfg) {
  cfg.validate();
  const auto grades = assign_grades(cfg);
  std::vector<OrganSample> out(cfg.subjects);
  parallel_for(cfg.subjects, [&](std::size_t i) { out[i] = synth_subject(cfg, i, grades[i]); });
  return out;
}

// ---- Bayes oracle ------------------------------------------------------------

struct BayesFeatures {
  double volume_l = 0, volume_s = 0, eso_thickness = 0;
};

// Exact grade posterior under the generator's Gaussians for (liver volume,
// spleen volume, wall thickness), ignoring the rarely active resampling.
// With noise level 0 every grade is a point mass; the posterior then puts
// all weight on grades whose means match the features exactly, or on the
// nearest means if none match.
inline std::vector<double> bayes_oracle(const BayesFeatures& f, const CohortConfig& cfg) {
  const std::size_t k = cfg.grades();
  std::vector<double> logp(k, -std::numeric_limits<double>::infinity());
  const std::array<const GaussianParam*, 3> params{&cfg.liver_volume, &cfg.spleen_volume, &cfg.eso_thickness};
  const std::array<double, 3> x{f.volume_l, f.volume_s, f.eso_thickness};
  if (cfg.noise_level == 0.0) {
    std::vector<double> dist(k, 0.0);
    for (std::size_t g = 0; g < k; ++g)
      for (int j = 0; j < 3; ++j) {
        const double d = (x[j] - params[j]->mean[g]) / params[j]->sd[g];
        dist[g] += d * d;
      }
    const double best = *std::min_element(dist.begin(), dist.end());
    for (std::size_t g = 0; g < k; ++g)
      if (dist[g] == best && cfg.proportions[g] > 0.0) logp[g] = std::log(cfg.proportions[g]);
  } else {
    for (std::size_t g = 0; g < k; ++g) {
      if (cfg.proportions[g] <= 0.0) continue;
      double lp = std::log(cfg.proportions[g]);
      for (int j = 0; j < 3; ++j) {
        const double sd = cfg.noise_level * params[j]->sd[g];
        const double d = (x[j] - params[j]->mean[g]) / sd;
        lp += -0.5 * d * d - std::log(sd);
      }
      logp[g] = lp;
    }
  }
  const double m = *std::max_element(logp.begin(), logp.end());
  std::vector<double> post(k, 0.0);
  if (!std::isfinite(m)) return post;
  double z = 0.0;
  for (std::size_t g = 0; g < k; ++g) z += std::exp(logp[g] - m);
  for (std::size_t g = 0; g < k; ++g) post[g] = std::exp(logp[g] - m) / z;
  return post;
}

inline int bayes_grade(const BayesFeatures& f, const CohortConfig& cfg) {
  const auto p = bayes_oracle(f, cfg);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

// ---- on-disk cohort ----------------------------------------------------------

struct ManifestRow {
  std::string id;
  int grade = 0;
  std::array<std::string, kOrgans> image_paths;  // relative to the cohort directory
  std::array<std::string, kOrgans> mask_paths;
  Split split = Split::train;
};

inline const char* kCohortManifestHeader =
    "subject_id,grade,esophagus_image,esophagus_mask,liver_image,liver_mask,spleen_image,spleen_mask,split";

inline ManifestRow manifest_row(const OrganSample& s, Split split) {
  ManifestRow r;
  r.id = s.id;
  r.grade = s.grade;
  r.split = split;
  for (int o = 0; o < kOrgans; ++o) {
    r.image_paths[o] = "subjects/" + s.id + "_" + kOrganNames[o] + "_image.mvol";
    r.mask_paths[o] = "subjects/" + s.id + "_" + kOrganNames[o] + "_mask.mvol";
  }
  return r;
}

inline std::string manifest_csv(const std::vector<ManifestRow>& rows) {
  std::string out = std::string(kCohortManifestHeader) + "\n";
  for (const auto& r : rows) {
    out += r.id + "," + std::to_string(r.grade);
    for (int o = 0; o < kOrgans; ++o) out += "," + r.image_paths[o] + "," + r.mask_paths[o];
    out += std::string(",") + to_string(r.split) + "\n";
  }
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    else if (c == ',' && !quoted) {
      fields.push_back(cur);
      cur.clear();
    } else cur += c;
  }
  fields.push_back(cur);
  return fields;
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open cohort manifest " + path);
  std::string line;
  if (!std::getline(in, line) || line != kCohortManifestHeader) throw IoError("unexpected manifest header in " + path);
  std::vector<ManifestRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 9) throw IoError(path + ":" + std::to_string(lineno) + ": expected 9 fields");
    ManifestRow r;
    r.id = f[0];
    try {
      r.grade = std::stoi(f[1]);
    } catch (const std::exception&) {
      throw IoError(path + ":" + std::to_string(lineno) + ": bad grade '" + f[1] + "'");
    }
    for (int o = 0; o < kOrgans; ++o) {
      r.image_paths[o] = f[2 + 2 * o];
      r.mask_paths[o] = f[3 + 2 * o];
    }
    r.split = parse_split(f[8]);
    rows.push_back(r);
  }
  return rows;
}

// Writes images, masks and manifest.csv under `dir`; returns the manifest rows.
inline std::vector<ManifestRow> write_cohort(const std::string& dir, const CohortConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "subjects", ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  const auto grades = assign_grades(cfg);
  const auto splits = assign_splits(grades, cfg.test_fraction, cfg.val_fraction, cfg.seed);
  std::vector<ManifestRow> rows(cfg.subjects);
  parallel_for(cfg.subjects, [&](std::size_t i) {
    const auto s = synth_subject(cfg, i, grades[i]);
    rows[i] = manifest_row(s, splits[i]);
    for (int o = 0; o < kOrgans; ++o) {
      write_mvol((fs::path(dir) / rows[i].image_paths[o]).string(), s.images[o]);
      write_mvol((fs::path(dir) / rows[i].mask_paths[o]).string(), s.masks[o]);
    }
  });
  detail::write_file((fs::path(dir) / "manifest.csv").string(), manifest_csv(rows));
  return rows;
}

}  // namespace moon
