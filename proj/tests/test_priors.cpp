#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <set>

#include "moon/priors.hpp"
#include "moon/volume.hpp"
#include "test_util.hpp"
#include "oracles.hpp"

using namespace moon;
using namespace moon::testing;

namespace {

Mask random_mask(Rng& rng, Dims3 dims, double density) {
  Mask m(dims, {1, 1, 1});
  for (auto& v : m.data) v = rng.uniform() < density ? 1 : 0;
  return m;
}

PriorRecord record_with_levels(std::array<Level, 4> levels) {
  PriorRecord r;
  r.levels = levels;
  return r;
}

}  // namespace

TEST(Components, SingleVoxel) {
  Mask m({3, 3, 3}, {1, 1, 1});
  m.at(1, 1, 1) = 1;
  const auto cc = connected_components_3d(m);
  ASSERT_EQ(cc.count(), 1u);
  EXPECT_EQ(cc.sizes[0], 1u);
}

TEST(Components, CornerContactDependsOnConnectivity) {
  Mask m({2, 2, 2}, {1, 1, 1});
  m.at(0, 0, 0) = 1;
  m.at(1, 1, 1) = 1;
  EXPECT_EQ(connected_components_3d(m, 6).count(), 2u);
  EXPECT_EQ(connected_components_3d(m, 26).count(), 1u);
  EXPECT_THROW(connected_components_3d(m, 18), ConfigError);
}

TEST(Components, EmptyMaskHasNone) {
  Mask m({4, 4, 4}, {1, 1, 1});
  EXPECT_EQ(connected_components_3d(m).count(), 0u);
}

TEST(Components, MatchFloodFillOracle) {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = random_mask(rng, {16, 16, 16}, rng.uniform(0.05, 0.6));
    for (int conn : {6, 26}) {
      const auto got = connected_components_3d(m, conn);
      const auto want = flood_fill_oracle(m, conn);
      ASSERT_EQ(got.sizes, want.sizes);
      ASSERT_EQ(got.labels, want.labels);
      std::size_t total = 0;
      for (auto s : got.sizes) total += s;
      EXPECT_EQ(total, organ_volume(m, conn).voxels);
    }
  }
}

TEST(Volume, Examples) {
  Mask a({10, 10, 10}, {1, 1, 1}, 1);
  EXPECT_DOUBLE_EQ(organ_volume(a).mm3, 1000.0);
  EXPECT_DOUBLE_EQ(organ_volume(a).cm3, 1.0);
  Mask b({10, 10, 1}, {2, 2, 2.5}, 1);
  EXPECT_DOUBLE_EQ(organ_volume(b).mm3, 1000.0);
  // Two separate slabs of 600 and 400 voxels.
  Mask c({10, 10, 12}, {1, 1, 1});
  for (std::size_t x = 0; x < 10; ++x)
    for (std::size_t y = 0; y < 10; ++y) {
      for (std::size_t z = 0; z < 6; ++z) c.at(x, y, z) = 1;
      for (std::size_t z = 8; z < 12; ++z) c.at(x, y, z) = 1;
    }
  EXPECT_EQ(connected_components_3d(c).count(), 2u);
  EXPECT_DOUBLE_EQ(organ_volume(c).mm3, 1000.0);
}

TEST(Volume, InvariantUnderVoxelPermutation) {
  Rng rng(102);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = random_mask(rng, {8, 9, 10}, 0.3);
    m.spacing = {0.7, 1.3, 2.1};
    const double v = organ_volume(m).mm3;
    for (std::size_t i = m.size(); i > 1; --i) std::swap(m.data[i - 1], m.data[rng.index(i)]);
    EXPECT_DOUBLE_EQ(organ_volume(m).mm3, v);
  }
}

TEST(Volume, RejectsNonPositiveSpacing) {
  Mask m({2, 2, 2}, {1, 0, 1}, 1);
  EXPECT_THROW(organ_volume(m), ConfigError);
}

TEST(LevelBin, TableExamples) {
  EXPECT_EQ(level_bin("liver", 1500.0), Level::high);
  EXPECT_EQ(level_bin("spleen", 900.0), Level::very_high);
  EXPECT_EQ(level_bin("lsvr", 2.4), Level::average);
  EXPECT_THROW(level_bin("kidney", 1.0), ConfigError);
}

TEST(LevelBin, BoundaryRule) {
  // Lowest bin includes its printed upper edge; interior bins include their lower edge.
  EXPECT_EQ(level_bin("esophagus", 15.0), Level::very_low);
  EXPECT_EQ(level_bin("esophagus", 15.0001), Level::low);
  EXPECT_EQ(level_bin("esophagus", 26.0), Level::average);
  EXPECT_EQ(level_bin("esophagus", 50.0), Level::high);
  EXPECT_EQ(level_bin("esophagus", 74.0), Level::very_high);
  EXPECT_EQ(level_bin("spleen", 248.9), Level::very_low);
  EXPECT_EQ(level_bin("spleen", 389.0), Level::average);
  EXPECT_EQ(level_bin("liver", 297.0), Level::very_low);
  EXPECT_EQ(level_bin("liver", 1753.0), Level::very_high);
  EXPECT_EQ(level_bin("lsvr", 0.7), Level::very_low);
  EXPECT_EQ(level_bin("lsvr", 7.9), Level::very_high);
}

TEST(LevelBin, Monotone) {
  Rng rng(103);
  for (const char* p : {"esophagus", "liver", "spleen", "lsvr"}) {
    const double top = level_edges(parse_prior_parameter(p))[3] * 1.5;
    for (int trial = 0; trial < 2000; ++trial) {
      const double a = rng.uniform(0, top), b = rng.uniform(0, top);
      if (a <= b) EXPECT_LE(static_cast<int>(level_bin(p, a)), static_cast<int>(level_bin(p, b)));
    }
  }
}

TEST(Prompt, CategoricalTemplate) {
  const auto r = record_with_levels({Level::average, Level::high, Level::very_high, Level::low});
  EXPECT_EQ(prompt_generate(r, PromptMode::volume_categorical_lsvr_categorical),
            "Esophagus volume: average. Liver volume: high. Spleen volume: very high. "
            "Liver-to-spleen volume ratio: low.");
  EXPECT_EQ(prompt_generate(r, PromptMode::volume_categorical),
            "Esophagus volume: average. Liver volume: high. Spleen volume: very high.");
}

TEST(Prompt, NumericModes) {
  const auto r = make_prior_record(30.0, 1500.0, 600.0);
  const auto n = prompt_generate(r, PromptMode::volume_numeric);
  EXPECT_NE(n.find("Liver volume: 1500.0 cm3."), std::string::npos) << n;
  EXPECT_EQ(n, prompt_generate(r, PromptMode::volume_numeric));
  EXPECT_EQ(prompt_generate(r, PromptMode::volume_categorical_lsvr_numeric),
            "Esophagus volume: average. Liver volume: high. Spleen volume: high. Liver-to-spleen volume ratio: 2.5.");
  EXPECT_EQ(parse_prompt_mode("Volume(C)+LSVR(N)"), PromptMode::volume_categorical_lsvr_numeric);
  EXPECT_THROW(parse_prompt_mode("Volume(X)"), ConfigError);
}

TEST(Prompt, InjectiveOverLevelTuples) {
  std::set<std::string> seen;
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b)
      for (int c = 0; c < 5; ++c)
        for (int d = 0; d < 5; ++d)
          seen.insert(prompt_generate(record_with_levels({Level(a), Level(b), Level(c), Level(d)}),
                                      PromptMode::volume_categorical_lsvr_categorical));
  EXPECT_EQ(seen.size(), 625u);
}

TEST(OneHot, Layout) {
  const auto avg = onehot_embed({Level::average, Level::average, Level::average, Level::average});
  const auto low = onehot_embed({Level::very_low, Level::very_low, Level::very_low, Level::very_low});
  for (int i = 0; i < kOneHotWidth; ++i) {
    EXPECT_EQ(avg[i], (i % 5 == 2) ? 1.0 : 0.0);
    EXPECT_EQ(low[i], (i % 5 == 0) ? 1.0 : 0.0);
  }
  Rng rng(104);
  for (int t = 0; t < 100; ++t) {
    const auto v = onehot_embed({Level(rng.index(5)), Level(rng.index(5)), Level(rng.index(5)), Level(rng.index(5))});
    double s = 0;
    for (double x : v) s += x;
    EXPECT_EQ(s, 4.0);
  }
}

TEST(PriorRecord, RatioAndErrors) {
  const auto r = make_prior_record(20.0, 1200.0, 400.0);
  EXPECT_DOUBLE_EQ(r.lsvr, 3.0);
  EXPECT_EQ(r.levels[3], Level::average);
  EXPECT_THROW(make_prior_record(20.0, 1200.0, 0.0), NumericError);
}

TEST(PriorRecord, CsvRow) {
  const auto r = make_prior_record(30.0, 1500.0, 600.0);
  EXPECT_EQ(prior_csv_row("S0001", r),
            "S0001,30.000000,1500.000000,600.000000,2.500000,Average,High,High,Average,\"" + r.prompt + "\"");
}

TEST(Adaptor, ShapeAndCount) {
  ParameterStore store;
  Rng rng(105);
  const auto a = PriorAdaptor::create(store, "adaptor", 64, rng);
  EXPECT_EQ(store.scalar_count(), PriorAdaptor::parameter_count(64));
  const auto v = onehot_embed({Level::low, Level::high, Level::average, Level::very_low});
  const auto out = a(Tensor::from({1, 20}, std::vector<double>(v.begin(), v.end())));
  EXPECT_EQ(out.shape(), (Shape{1, 64}));
}

TEST(Mvol, RoundTripAndLayout) {
  Rng rng(106);
  Image img({3, 4, 5}, {0.5, 1.0, 2.5});
  for (auto& v : img.data) v = rng.normal();
  const auto bytes = encode_mvol(img);
  ASSERT_EQ(bytes.size(), 4 + 2 + 12 + 24 + 1 + 60 * 8u);
  EXPECT_EQ(bytes.substr(0, 4), "MVOL");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 0u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 3u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[42]), 1u);
  const auto back = decode_mvol<double>(bytes);
  EXPECT_EQ(back.dims, img.dims);
  EXPECT_EQ(back.spacing, img.spacing);
  EXPECT_EQ(back.data, img.data);

  Mask m({2, 2, 2}, {1, 1, 1}, 1);
  const auto mb = encode_mvol(m);
  EXPECT_EQ(static_cast<unsigned char>(mb[42]), 2u);
  EXPECT_EQ(decode_mvol<std::uint8_t>(mb).data, m.data);
}

TEST(Mvol, Errors) {
  Mask m({2, 2, 2}, {1, 1, 1}, 1);
  auto bytes = encode_mvol(m);
  EXPECT_THROW(decode_mvol<double>(bytes), IoError);
  EXPECT_THROW(decode_mvol<std::uint8_t>(bytes.substr(0, bytes.size() - 1)), IoError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_mvol<std::uint8_t>(bytes), IoError);
  EXPECT_THROW(read_mvol<double>("/nonexistent/dir/file.mvol"), IoError);
}

TEST(Mvol, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "moon_test_roundtrip.mvol").string();
  Mask m({3, 2, 1}, {1, 2, 3});
  m.data = {1, 0, 1, 1, 0, 0};
  write_mvol(path, m);
  EXPECT_EQ(read_mvol<std::uint8_t>(path).data, m.data);
  std::filesystem::remove(path);
}
