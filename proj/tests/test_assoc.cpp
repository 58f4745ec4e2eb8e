#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <vector>

#include "spx/assoc.hpp"
#include "spx/grad_check.hpp"

using spx::AssociationMap;
using spx::GridConfig;
using spx::IdMap;
using spx::NeighborhoodIndex;
using spx::Pcg32;
using D = double;
using TD = spx::Tensor<double>;

namespace {

GridConfig grid(int gh, int gw, int c = 4) {
  GridConfig cfg;
  cfg.gh = gh;
  cfg.gw = gw;
  cfg.c_model = c;
  cfg.n_heads = 1;
  return cfg;
}

std::string temp_path(const char* name) {
  return std::string(::testing::TempDir()) + "/" + name;
}

std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
}

}  // namespace

TEST(AssociationLogits, ZeroSuperpixelsGiveUniformAssociation) {
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  Pcg32 rng(1);
  TD I = TD::randn({16, 4}, rng);
  TD S = TD::zeros({4, 4});
  TD logits = spx::association_logits(I, S, idx);
  auto assoc = spx::upsample_associate(logits, 4, 4, idx);  // test mode x1
  for (int p = 0; p < 16; ++p) {
    int valid = 0;
    for (int k = 0; k < 9; ++k)
      valid += idx.pixel_valid[static_cast<std::size_t>(p) * 9 + k];
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (idx.pixel_valid[at]) {
        EXPECT_NEAR(assoc.weights.data()[at], 1.0 / valid, 1e-9);
      } else {
        EXPECT_EQ(assoc.weights.data()[at], 0.0);
      }
    }
  }
}

TEST(AssociationLogits, NearOrthogonalFeaturesGiveNearOneHot) {
  auto idx = spx::build_neighborhood_index(2, 2, grid(2, 2));
  TD S = TD::zeros({4, 4});
  for (int i = 0; i < 4; ++i) S.at(i, i) = 30.0;  // orthogonal rows
  TD I = TD::zeros({4, 4});
  for (int p = 0; p < 4; ++p) I.at(p, p) = 30.0;  // pixel p matches superpixel p
  TD logits = spx::association_logits(I, S, idx);
  auto assoc = spx::upsample_associate(logits, 2, 2, idx);
  for (int p = 0; p < 4; ++p) {
    // slot 4 is the own-cell offset (0,0): h=w=1 means pixel p sits in cell p
    EXPECT_NEAR(assoc.weights.data()[static_cast<std::size_t>(p) * 9 + 4], 1.0,
                1e-9);
  }
}

TEST(AssociationLogits, MatchesExhaustiveDotOracle) {
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  Pcg32 rng(2);
  TD I = TD::randn({16, 4}, rng);
  TD S = TD::randn({4, 4}, rng);
  TD logits = spx::association_logits(I, S, idx);
  for (int p = 0; p < 16; ++p)
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (!idx.pixel_valid[at]) {
        EXPECT_EQ(logits.data()[at], -1e9);
        continue;
      }
      double dot = 0;
      for (int c = 0; c < 4; ++c)
        dot += I.at(p, c) * S.at(idx.pixel_to_sp[at], c);
      EXPECT_NEAR(logits.data()[at], dot, 1e-12);
    }
}

TEST(UpsampleAssociate, UniformLogitsStayUniform) {
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  TD logits = TD::zeros({4, 4, 9});
  // apply the sentinel on invalid slots as association_logits would
  for (std::size_t i = 0; i < idx.pixel_valid.size(); ++i)
    if (!idx.pixel_valid[i]) logits.data()[i] = -1e9;
  auto assoc = spx::upsample_associate(logits, 32, 32, idx);
  for (int p = 0; p < 32 * 32; ++p) {
    int valid = 0;
    for (int k = 0; k < 9; ++k)
      valid += assoc.index.pixel_valid[static_cast<std::size_t>(p) * 9 + k];
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (assoc.index.pixel_valid[at]) {
        EXPECT_NEAR(assoc.weights.data()[at], 1.0 / valid, 1e-6);
      } else {
        EXPECT_EQ(assoc.weights.data()[at], 0.0);
      }
    }
  }
}

TEST(UpsampleAssociate, IdentityModeEqualsPlainSoftmax) {
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  Pcg32 rng(3);
  TD I = TD::randn({16, 4}, rng);
  TD S = TD::randn({4, 4}, rng);
  TD logits = spx::association_logits(I, S, idx);
  auto assoc = spx::upsample_associate(logits, 4, 4, idx);
  // reference: masked softmax on the raw logits
  TD mask = TD::zeros({4, 4, 9});
  for (std::size_t i = 0; i < idx.pixel_valid.size(); ++i)
    mask.data()[i] = idx.pixel_valid[i] ? 1.0 : 0.0;
  TD ref = spx::softmax(logits, 2, mask);
  for (std::size_t i = 0; i < ref.data().size(); ++i)
    EXPECT_NEAR(assoc.weights.data()[i], ref.data()[i], 1e-12);
}

TEST(UpsampleAssociate, SmallMapMatchesBilinearThenSoftmaxOracle) {
  // 2x2 logit map upsampled x2: hand oracle resizes each slot channel with
  // the clamped window, then applies the masked softmax.
  GridConfig cfg = grid(2, 2);
  auto idx = spx::build_neighborhood_index(2, 2, cfg);
  Pcg32 rng(4);
  TD I = TD::randn({4, 4}, rng);
  TD S = TD::randn({4, 4}, rng);
  TD logits = spx::association_logits(I, S, idx);
  auto assoc = spx::upsample_associate(logits, 4, 4, idx);

  NeighborhoodIndex full = spx::build_neighborhood_index(4, 4, cfg);
  for (int p = 0; p < 16; ++p) {
    // reference per-pixel softmax over slot channels resized independently
    double vals[9];
    bool valid[9];
    for (int k = 0; k < 9; ++k) {
      valid[k] = full.pixel_valid[static_cast<std::size_t>(p) * 9 + k] != 0;
      const int di = k / 3 - 1, dj = k % 3 - 1;
      const int ci_lo = std::max(0, -di), ci_hi = std::min(1, 1 - di);
      const int cj_lo = std::max(0, -dj), cj_hi = std::min(1, 1 - dj);
      if (ci_lo > ci_hi || cj_lo > cj_hi) {
        vals[k] = -1e9;
        continue;
      }
      TD ch = TD::zeros({2, 2, 1});
      for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) ch.at(y, x, 0) = logits.at(y, x, k);
      TD up = spx::bilinear_resize_window(ch, 4, 4, ci_lo, ci_hi, cj_lo, cj_hi);
      vals[k] = up.data()[static_cast<std::size_t>(p)];
    }
    double mx = -1e300, denom = 0;
    for (int k = 0; k < 9; ++k)
      if (valid[k]) mx = std::max(mx, vals[k]);
    for (int k = 0; k < 9; ++k)
      if (valid[k]) denom += std::exp(vals[k] - mx);
    for (int k = 0; k < 9; ++k) {
      const double expect = valid[k] ? std::exp(vals[k] - mx) / denom : 0.0;
      EXPECT_NEAR(assoc.weights.data()[static_cast<std::size_t>(p) * 9 + k],
                  expect, 1e-9);
    }
  }
}

TEST(UpsampleAssociate, NonMultipleTargetIsAnError) {
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  TD logits = TD::zeros({4, 4, 9});
  EXPECT_THROW(spx::upsample_associate(logits, 6, 4, idx), std::runtime_error);
}

TEST(UpsampleAssociate, RowStochasticWithExactZerosAtScale8) {
  GridConfig cfg = grid(2, 3);
  auto idx = spx::build_neighborhood_index(4, 6, cfg);
  Pcg32 rng(5);
  TD I = TD::randn({24, 4}, rng);
  TD S = TD::randn({6, 4}, rng);
  TD logits = spx::association_logits(I, S, idx);
  auto assoc = spx::upsample_associate(logits, 32, 48, idx);
  for (int p = 0; p < 32 * 48; ++p) {
    double sum = 0;
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (assoc.index.pixel_valid[at]) {
        sum += assoc.weights.data()[at];
      } else {
        EXPECT_EQ(assoc.weights.data()[at], 0.0);
      }
    }
    EXPECT_NEAR(sum, 1.0, 1e-5);
  }
}

// ---------------------------------------------------------------------------
// unfold
// ---------------------------------------------------------------------------

namespace {

AssociationMap<D> random_association(const GridConfig& cfg, int h, int w,
                                     std::uint64_t seed) {
  auto idx = spx::build_neighborhood_index(h, w, cfg);
  Pcg32 rng(seed);
  TD I = TD::randn({idx.pixels(), cfg.c_model}, rng);
  TD S = TD::randn({idx.superpixels(), cfg.c_model}, rng);
  TD logits = spx::association_logits(I, S, idx);
  return spx::upsample_associate(logits, h, w, idx);
}

}  // namespace

TEST(Unfold, SharedLogitsReproduceThemExactly) {
  GridConfig cfg = grid(2, 2);
  auto assoc = random_association(cfg, 4, 4, 6);
  TD c = TD::zeros({4, 3});
  for (int i = 0; i < 4; ++i) {
    c.at(i, 0) = 0.3;
    c.at(i, 1) = -1.2;
    c.at(i, 2) = 2.0;
  }
  auto pred = spx::unfold(assoc, c);
  for (int p = 0; p < 16; ++p) {
    EXPECT_NEAR(pred.logits.data()[static_cast<std::size_t>(p) * 3 + 0], 0.3, 1e-12);
    EXPECT_NEAR(pred.logits.data()[static_cast<std::size_t>(p) * 3 + 1], -1.2, 1e-12);
    EXPECT_NEAR(pred.logits.data()[static_cast<std::size_t>(p) * 3 + 2], 2.0, 1e-12);
  }
}

TEST(Unfold, OneHotAssociationSelectsThatSuperpixel) {
  GridConfig cfg = grid(2, 2);
  auto idx = spx::build_neighborhood_index(4, 4, cfg);
  AssociationMap<D> assoc;
  assoc.index = idx;
  assoc.weights = TD::zeros({4, 4, 9});
  // pixel (0,0): one-hot at slot 5 (offset (0,+1)) -> superpixel 1
  assoc.weights.at(0, 0, 5) = 1.0;
  for (int p = 1; p < 16; ++p) assoc.weights.data()[static_cast<std::size_t>(p) * 9 + 4] = 1.0;
  Pcg32 rng(7);
  TD c = TD::randn({4, 5}, rng);
  auto pred = spx::unfold(assoc, c);
  for (int ch = 0; ch < 5; ++ch)
    EXPECT_NEAR(pred.logits.at(0, 0, ch), c.at(1, ch), 1e-12);
}

TEST(Unfold, MatchesExhaustiveWeightedSumOracle) {
  GridConfig cfg = grid(2, 3);
  auto assoc = random_association(cfg, 4, 6, 8);
  Pcg32 rng(9);
  TD c = TD::randn({6, 4}, rng);
  auto pred = spx::unfold(assoc, c);
  const auto& idx = assoc.index;
  for (int p = 0; p < idx.pixels(); ++p)
    for (int ch = 0; ch < 4; ++ch) {
      double acc = 0;
      for (int k = 0; k < 9; ++k) {
        const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
        if (!idx.pixel_valid[at]) continue;
        acc += assoc.weights.data()[at] * c.at(idx.pixel_to_sp[at], ch);
      }
      EXPECT_NEAR(pred.logits.data()[static_cast<std::size_t>(p) * 4 + ch], acc,
                  1e-10);
    }
}

TEST(Unfold, EqualsDenseMatrixFormulation) {
  GridConfig cfg = grid(3, 2);
  auto assoc = random_association(cfg, 6, 4, 10);
  Pcg32 rng(11);
  TD c = TD::randn({6, 5}, rng);
  auto pred = spx::unfold(assoc, c);
  // dense [P, G] association matrix, zeros outside N(p)
  const auto& idx = assoc.index;
  TD dense = TD::zeros({idx.pixels(), idx.superpixels()});
  for (int p = 0; p < idx.pixels(); ++p)
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (idx.pixel_valid[at])
        dense.at(p, idx.pixel_to_sp[at]) = assoc.weights.data()[at];
    }
  TD ref = spx::matmul(dense, c);
  for (std::size_t i = 0; i < ref.data().size(); ++i)
    EXPECT_NEAR(pred.logits.data()[i], ref.data()[i], 1e-5);
}

TEST(Unfold, ConvexArgmaxPreservation) {
  // if every valid neighbor's logits share a strict argmax class, the
  // unfolded argmax keeps it for any Q
  Pcg32 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    GridConfig cfg = grid(2, 2);
    auto assoc = random_association(cfg, 4, 4, 100 + trial);
    const int ncls = 4;
    const int forced = static_cast<int>(rng.uniform_int(ncls));
    TD c = TD::randn({4, ncls}, rng);
    for (int i = 0; i < 4; ++i) {
      double mx = -1e300;
      for (int ch = 0; ch < ncls; ++ch) mx = std::max(mx, c.at(i, ch));
      c.at(i, forced) = mx + 0.5;  // strict common argmax
    }
    auto pred = spx::unfold(assoc, c);
    for (std::size_t p = 0; p < pred.labels.ids.size(); ++p)
      ASSERT_EQ(pred.labels.ids[p], forced) << "trial " << trial;
  }
}

// ---------------------------------------------------------------------------
// hard_assign and rendering
// ---------------------------------------------------------------------------

TEST(HardAssign, OneHotUniformAndOracle) {
  GridConfig cfg = grid(2, 2);
  auto idx = spx::build_neighborhood_index(4, 4, cfg);
  AssociationMap<D> assoc;
  assoc.index = idx;
  assoc.weights = TD::zeros({4, 4, 9});
  // pixel 0: near-one-hot at slot 5 -> superpixel 1
  assoc.weights.data()[5] = 0.97;
  assoc.weights.data()[4] = 0.03;
  // remaining pixels: uniform over valid -> lowest valid slot's superpixel
  for (int p = 1; p < 16; ++p) {
    int valid = 0;
    for (int k = 0; k < 9; ++k)
      valid += idx.pixel_valid[static_cast<std::size_t>(p) * 9 + k];
    for (int k = 0; k < 9; ++k)
      if (idx.pixel_valid[static_cast<std::size_t>(p) * 9 + k])
        assoc.weights.data()[static_cast<std::size_t>(p) * 9 + k] = 1.0 / valid;
  }
  auto map = spx::hard_assign(assoc);
  EXPECT_EQ(map.ids[0], 1);
  // pixel (0,1) is in cell (0,0); lowest valid slot is 4 -> its own cell 0
  EXPECT_EQ(map.ids[1], 0);

  // random association matches an argmax oracle
  auto rnd = random_association(cfg, 4, 4, 13);
  auto got = spx::hard_assign(rnd);
  for (int p = 0; p < 16; ++p) {
    int best = -1;
    double bv = -1;
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (!rnd.index.pixel_valid[at]) continue;
      if (rnd.weights.data()[at] > bv) {
        bv = rnd.weights.data()[at];
        best = rnd.index.pixel_to_sp[at];
      }
    }
    EXPECT_EQ(got.ids[static_cast<std::size_t>(p)], best);
  }
}

TEST(Boundaries, UniformMapHasNone) {
  IdMap map;
  map.h = map.w = 4;
  map.ids.assign(16, 3);
  auto mask = spx::boundary_mask(map);
  for (auto v : mask) EXPECT_EQ(v, 0);
}

TEST(Boundaries, VerticalSplitMarksTheFourAdjacentPairs) {
  IdMap map;
  map.h = map.w = 4;
  map.ids.resize(16);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) map.at(y, x) = x < 2 ? 0 : 1;
  auto mask = spx::boundary_mask(map);
  int marked = 0;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const bool expect = x == 1 || x == 2;  // both sides of the 4 pairs
      EXPECT_EQ(mask[static_cast<std::size_t>(y) * 4 + x] != 0, expect);
      marked += mask[static_cast<std::size_t>(y) * 4 + x];
    }
  EXPECT_EQ(marked, 8);
}

TEST(Rendering, DeterministicBytes) {
  Pcg32 rng(14);
  TD img = TD::rand_uniform({4, 4, 3}, rng, 0.0, 1.0);
  IdMap map;
  map.h = map.w = 4;
  map.ids.resize(16);
  for (int i = 0; i < 16; ++i) map.ids[i] = i % 3;
  const std::string a = temp_path("overlay_a.ppm");
  const std::string b = temp_path("overlay_b.ppm");
  spx::render_overlay(a, img, map);
  spx::render_overlay(b, img, map);
  EXPECT_EQ(read_bytes(a), read_bytes(b));
  EXPECT_FALSE(read_bytes(a).empty());
}

TEST(Rendering, PpmPgmRoundTrip) {
  Pcg32 rng(15);
  spx::Tensor<float> img = spx::Tensor<float>::rand_uniform({6, 5, 3}, rng, 0.0f, 1.0f);
  const std::string p = temp_path("roundtrip.ppm");
  spx::write_ppm(p, img);
  auto back = spx::read_ppm<float>(p);
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.data().size(); ++i)
    EXPECT_NEAR(back.data()[i], img.data()[i], 1.0f / 255.0f);

  spx::LabelMap lab;
  lab.h = 3;
  lab.w = 4;
  lab.ids = {0, 1, 2, 3, 255, 1, 0, 2, 3, 3, 1, 0};
  const std::string q = temp_path("roundtrip.pgm");
  spx::write_pgm(q, lab);
  auto lback = spx::read_pgm(q);
  EXPECT_EQ(lback.ids, lab.ids);
}

TEST(ConnectedFraction, DetectsSplitRegions) {
  IdMap map;
  map.h = 2;
  map.w = 4;
  // id 0 split into two components, id 1 connected
  map.ids = {0, 1, 1, 0, 0, 1, 1, 0};
  EXPECT_NEAR(spx::connected_fraction(map), 0.5, 1e-12);
  IdMap uni;
  uni.h = uni.w = 2;
  uni.ids = {5, 5, 5, 5};
  EXPECT_EQ(spx::connected_fraction(uni), 1.0);
}

// ---------------------------------------------------------------------------
// gradient flow through the association pipeline
// ---------------------------------------------------------------------------

TEST(AssocPipeline, GradCheckEndToEnd) {
  GridConfig cfg = grid(2, 2);
  auto idx = spx::build_neighborhood_index(4, 4, cfg);
  auto f = [&idx](const std::vector<TD>& in) {
    TD logits = spx::association_logits(in[0], in[1], idx);
    auto assoc = spx::upsample_associate(logits, 32, 32, idx);
    auto pred = spx::unfold(assoc, in[2]);
    Pcg32 wrng(43, 911);
    TD w = TD::randn(pred.logits.shape(), wrng);
    return spx::reduce_sum(spx::mul(pred.logits, w));
  };
  for (int s = 0; s < 3; ++s) {
    Pcg32 rng(static_cast<std::uint64_t>(s), 17);
    spx::GradCheckOptions opt;
    opt.max_coords_per_input = 40;
    opt.sample_seed = static_cast<std::uint64_t>(s);
    auto rep = spx::grad_check<D>(
        f,
        {TD::randn({16, 4}, rng), TD::randn({4, 4}, rng), TD::randn({4, 3}, rng)},
        opt);
    EXPECT_TRUE(rep.pass) << "seed " << s << " rel err " << rep.max_rel_err;
  }
}
