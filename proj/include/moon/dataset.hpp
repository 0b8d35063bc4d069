// Turning cohorts (in memory or on disk) into network-ready inputs.
#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "moon/cohort.hpp"
#include "moon/model.hpp"
#include "moon/parallel.hpp"

namespace moon {

struct Dataset {
  std::vector<ModelInput> train, val, test;

  std::vector<ModelInput>& part(Split s) { return s == Split::train ? train : s == Split::val ? val : test; }
  const std::vector<ModelInput>& part(Split s) const { return const_cast<Dataset*>(this)->part(s); }
};

inline Dataset dataset_from_samples(const std::vector<OrganSample>& samples, const std::vector<Split>& splits,
                                    const ModelConfig& cfg) {
  if (samples.size() != splits.size()) throw ShapeError("dataset: samples and splits differ in length");
  std::vector<ModelInput> inputs(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const auto& s = samples[i];
    inputs[i] = make_input(s.id, s.grade, s.images, s.masks, s.prior, cfg);
  });
  Dataset d;
  for (std::size_t i = 0; i < inputs.size(); ++i) d.part(splits[i]).push_back(std::move(inputs[i]));
  return d;
}

// Synthesizes the cohort described by `cohort` and splits it the same way
// write_cohort does.
inline Dataset synth_dataset(const CohortConfig& cohort, const ModelConfig& cfg) {
  const auto samples = synth_cohort(cohort);
  std::vector<int> grades;
  for (const auto& s : samples) grades.push_back(s.grade);
  return dataset_from_samples(samples, assign_splits(grades, cohort.test_fraction, cohort.val_fraction, cohort.seed),
                              cfg);
}

// Reads manifest.csv and the referenced volumes; priors are recomputed from
// the masks. An empty `only` loads every split.
inline Dataset load_dataset(const std::string& cohort_dir, const ModelConfig& cfg, const std::vector<Split>& only = {},
                            int connectivity = 26) {
  namespace fs = std::filesystem;
  auto rows = read_manifest((fs::path(cohort_dir) / "manifest.csv").string());
  if (!only.empty())
    std::erase_if(rows, [&](const ManifestRow& r) { return std::find(only.begin(), only.end(), r.split) == only.end(); });
  std::vector<ModelInput> inputs(rows.size());
  parallel_for(rows.size(), [&](std::size_t i) {
    const auto& r = rows[i];
    std::array<Image, kOrgans> images;
    std::array<Mask, kOrgans> masks;
    for (int o = 0; o < kOrgans; ++o) {
      images[o] = read_mvol<double>((fs::path(cohort_dir) / r.image_paths[o]).string());
      masks[o] = read_mvol<std::uint8_t>((fs::path(cohort_dir) / r.mask_paths[o]).string());
    }
    inputs[i] = make_input(r.id, r.grade, images, masks, extract_priors(masks[0], masks[1], masks[2], connectivity), cfg);
  });
  Dataset d;
  for (std::size_t i = 0; i < inputs.size(); ++i) d.part(rows[i].split).push_back(std::move(inputs[i]));
  return d;
}

}  // namespace moon
