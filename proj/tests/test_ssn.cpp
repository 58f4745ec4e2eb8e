#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "spx/grad_check.hpp"
#include "spx/ssn.hpp"

using spx::GridConfig;
using spx::NeighborhoodIndex;
using spx::Pcg32;
using D = double;
using TD = spx::Tensor<double>;

namespace {

GridConfig grid(int gh, int gw) {
  GridConfig cfg;
  cfg.gh = gh;
  cfg.gw = gw;
  cfg.c_model = 4;
  cfg.n_heads = 1;
  return cfg;
}

// Standalone brute-force evaluator of the soft k-means equations with the
// 3x3 locality: Q_pi = exp(-||I_p - S_i||^2), Z_i = sum_p Q_pi,
// S_i = sum_p Q_pi I_p / Z_i.
struct BruteSsn {
  std::vector<double> S;  // [G, C]
  std::vector<double> Q;  // [P, 9]
  std::vector<double> Z;  // [G]
};

BruteSsn brute_ssn(const TD& feat, const TD& s0, int gh, int gw, int iters) {
  const int fh = feat.dim(0), fw = feat.dim(1), c = feat.dim(2);
  const int h = fh / gh, w = fw / gw;
  const int pixels = fh * fw, supers = gh * gw;
  BruteSsn r;
  r.S = s0.data();
  for (int it = 0; it < iters; ++it) {
    r.Q.assign(static_cast<std::size_t>(pixels) * 9, 0.0);
    r.Z.assign(static_cast<std::size_t>(supers), 0.0);
    std::vector<double> numer(static_cast<std::size_t>(supers) * c, 0.0);
    for (int y = 0; y < fh; ++y) {
      for (int x = 0; x < fw; ++x) {
        const int p = y * fw + x;
        const int ci = y / h, cj = x / w;
        for (int di = -1; di <= 1; ++di) {
          for (int dj = -1; dj <= 1; ++dj) {
            const int ni = ci + di, nj = cj + dj;
            if (ni < 0 || ni >= gh || nj < 0 || nj >= gw) continue;
            const int i = ni * gw + nj;
            double d2 = 0;
            for (int ch = 0; ch < c; ++ch) {
              const double d = feat.at(y, x, ch) -
                               r.S[static_cast<std::size_t>(i) * c + ch];
              d2 += d * d;
            }
            const double q = std::exp(-d2);
            r.Q[static_cast<std::size_t>(p) * 9 + (di + 1) * 3 + (dj + 1)] = q;
            r.Z[static_cast<std::size_t>(i)] += q;
            for (int ch = 0; ch < c; ++ch)
              numer[static_cast<std::size_t>(i) * c + ch] +=
                  q * feat.at(y, x, ch);
          }
        }
      }
    }
    for (int i = 0; i < supers; ++i) {
      const double z = std::max(r.Z[static_cast<std::size_t>(i)], 1e-12);
      for (int ch = 0; ch < c; ++ch)
        r.S[static_cast<std::size_t>(i) * c + ch] =
            numer[static_cast<std::size_t>(i) * c + ch] / z;
    }
  }
  return r;
}

}  // namespace

TEST(SlicInit, ConstantMapGivesConstantCenters) {
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  TD feat = TD::filled({4, 4, 3}, 1.25);
  TD s0 = spx::slic_init(feat, idx);
  ASSERT_EQ(s0.dim(0), 4);
  for (double v : s0.data()) EXPECT_NEAR(v, 1.25, 1e-12);
}

TEST(SlicInit, UnitPatchEqualsReshapedInput) {
  auto idx = spx::build_neighborhood_index(3, 2, grid(3, 2));
  Pcg32 rng(1);
  TD feat = TD::randn({3, 2, 5}, rng);
  TD s0 = spx::slic_init(feat, idx);
  for (std::size_t i = 0; i < feat.data().size(); ++i)
    EXPECT_EQ(s0.data()[i], feat.data()[i]);
}

TEST(SlicInit, IntegerFeaturesMatchBruteForceMeans) {
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  TD feat = TD::zeros({4, 4, 1});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) feat.at(y, x, 0) = y * 4 + x;
  TD s0 = spx::slic_init(feat, idx);
  // exhaustive 2x2 patch sums
  for (int ci = 0; ci < 2; ++ci)
    for (int cj = 0; cj < 2; ++cj) {
      double sum = 0;
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) sum += feat.at(ci * 2 + r, cj * 2 + c, 0);
      EXPECT_NEAR(s0.at(ci * 2 + cj, 0), sum / 4.0, 1e-12);
    }
}

TEST(SsnIterate, IdenticalFeaturesConvergeImmediately) {
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  TD feat = TD::filled({4, 4, 2}, 0.7);
  TD s0 = spx::slic_init(feat, idx);
  auto state = spx::ssn_iterate(feat, s0, idx, 1);
  for (double v : state.S.data()) EXPECT_NEAR(v, 0.7, 1e-12);
  // e^0 = 1 on every valid slot
  for (int p = 0; p < 16; ++p)
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (idx.pixel_valid[at]) {
        EXPECT_NEAR(state.Q.data()[at], 1.0, 1e-12);
      } else {
        EXPECT_EQ(state.Q.data()[at], 0.0);
      }
    }
}

TEST(SsnIterate, SelfAttractionWithUnitPatches) {
  // h=w=1 and far-apart features: each center collapses onto its own pixel.
  auto idx = spx::build_neighborhood_index(2, 2, grid(2, 2));
  TD feat = TD::zeros({2, 2, 1});
  feat.at(0, 0, 0) = 0.0;
  feat.at(0, 1, 0) = 10.0;
  feat.at(1, 0, 0) = 20.0;
  feat.at(1, 1, 0) = 30.0;
  TD s0 = spx::slic_init(feat, idx);
  auto state = spx::ssn_iterate(feat, s0, idx, 3);
  for (int i = 0; i < 4; ++i)
    EXPECT_NEAR(state.S.at(i, 0), feat.data()[static_cast<std::size_t>(i)], 1e-6);
  // diagonal dominance of Q: own slot (center offset, slot 4) wins
  for (int p = 0; p < 4; ++p) {
    double own = state.Q.data()[static_cast<std::size_t>(p) * 9 + 4];
    for (int k = 0; k < 9; ++k) {
      if (k == 4) continue;
      EXPECT_GE(own, state.Q.data()[static_cast<std::size_t>(p) * 9 + k]);
    }
  }
}

TEST(SsnIterate, MatchesBruteForceOracle) {
  for (int seed = 0; seed < 8; ++seed) {
    Pcg32 rng(static_cast<std::uint64_t>(seed), 5);
    auto idx = spx::build_neighborhood_index(6, 6, grid(2, 2));
    TD feat = TD::randn({6, 6, 3}, rng);
    TD s0 = spx::slic_init(feat, idx);
    const int iters = 1 + seed % 3;
    auto state = spx::ssn_iterate(feat, s0, idx, iters);
    auto ref = brute_ssn(feat, s0, 2, 2, iters);
    for (std::size_t i = 0; i < ref.S.size(); ++i)
      EXPECT_NEAR(state.S.data()[i], ref.S[i], 1e-10) << "seed " << seed;
    for (std::size_t i = 0; i < ref.Q.size(); ++i)
      EXPECT_NEAR(state.Q.data()[i], ref.Q[i], 1e-10);
    for (std::size_t i = 0; i < ref.Z.size(); ++i)
      EXPECT_NEAR(state.Z.data()[i], ref.Z[i], 1e-10);
  }
}

TEST(SsnIterate, UpdateIsConvexCombination) {
  Pcg32 rng(9);
  auto idx = spx::build_neighborhood_index(6, 6, grid(3, 3));
  TD feat = TD::randn({6, 6, 2}, rng);
  TD s0 = spx::slic_init(feat, idx);
  auto state = spx::ssn_iterate(feat, s0, idx, 2);
  // channelwise bounds over each superpixel's neighborhood pixels
  for (int i = 0; i < idx.superpixels(); ++i) {
    for (int ch = 0; ch < 2; ++ch) {
      double lo = 1e300, hi = -1e300;
      for (int s = 0; s < idx.sp_slots(); ++s) {
        const std::size_t at = static_cast<std::size_t>(i) * idx.sp_slots() + s;
        if (!idx.sp_valid[at]) continue;
        const int p = idx.sp_to_pixel[at];
        lo = std::min(lo, feat.data()[static_cast<std::size_t>(p) * 2 + ch]);
        hi = std::max(hi, feat.data()[static_cast<std::size_t>(p) * 2 + ch]);
      }
      EXPECT_GE(state.S.at(i, ch), lo - 1e-9);
      EXPECT_LE(state.S.at(i, ch), hi + 1e-9);
    }
  }
}

TEST(SsnIterate, QInUnitInterval) {
  Pcg32 rng(10);
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  TD feat = TD::randn({4, 4, 3}, rng, 2.0);
  auto state = spx::ssn_iterate(feat, spx::slic_init(feat, idx), idx, 2);
  for (int p = 0; p < idx.pixels(); ++p)
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (idx.pixel_valid[at]) {
        EXPECT_GT(state.Q.data()[at], 0.0);
        EXPECT_LE(state.Q.data()[at], 1.0);
      }
    }
}

TEST(SsnIterate, SeparatedHalvesConvergeToTheirConstants) {
  // two constant half-images, 1x2 grid: centers reach the constants by
  // iteration 10
  GridConfig cfg = grid(1, 2);
  auto idx = spx::build_neighborhood_index(4, 8, cfg);
  TD feat = TD::zeros({4, 8, 1});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 8; ++x) feat.at(y, x, 0) = x < 4 ? 0.0 : 5.0;
  auto state = spx::ssn_iterate(feat, spx::slic_init(feat, idx), idx, 10);
  EXPECT_NEAR(state.S.at(0, 0), 0.0, 1e-6);
  EXPECT_NEAR(state.S.at(1, 0), 5.0, 1e-6);
}

TEST(SsnHardLabels, OneHotAndTieRules) {
  auto idx = spx::build_neighborhood_index(2, 2, grid(2, 2));
  spx::SsnState<D> state;
  state.Q = TD::zeros({4, 9});
  // pixel 0: one-hot at slot 5 (offset (0,+1) -> superpixel (0,1) = id 1)
  state.Q.at(0, 5) = 0.9;
  // pixel 1..3: uniform over valid slots -> lowest valid slot wins
  for (int p = 1; p < 4; ++p)
    for (int k = 0; k < 9; ++k)
      if (idx.pixel_valid[static_cast<std::size_t>(p) * 9 + k])
        state.Q.at(p, k) = 0.25;
  auto labels = spx::ssn_hard_labels(state, idx);
  EXPECT_EQ(labels.ids[0], 1);
  // pixel 1 = (0,1): valid slots start at offset (0,-1) -> superpixel (0,0)
  EXPECT_EQ(labels.ids[1], 0);
}

TEST(SsnHardLabels, MatchesArgmaxOracle) {
  Pcg32 rng(11);
  auto idx = spx::build_neighborhood_index(6, 6, grid(3, 3));
  TD feat = TD::randn({6, 6, 2}, rng);
  auto state = spx::ssn_iterate(feat, spx::slic_init(feat, idx), idx, 1);
  auto labels = spx::ssn_hard_labels(state, idx);
  for (int p = 0; p < idx.pixels(); ++p) {
    int best = -1;
    double bv = -1;
    for (int k = 0; k < 9; ++k) {
      const std::size_t at = static_cast<std::size_t>(p) * 9 + k;
      if (!idx.pixel_valid[at]) continue;
      if (state.Q.data()[at] > bv) {
        bv = state.Q.data()[at];
        best = idx.pixel_to_sp[at];
      }
    }
    EXPECT_EQ(labels.ids[static_cast<std::size_t>(p)], best);
  }
}

TEST(SsnIterate, GradCheckOnToy) {
  auto idx = spx::build_neighborhood_index(4, 4, grid(2, 2));
  auto f = [&idx](const std::vector<TD>& in) {
    TD s0 = spx::slic_init(in[0], idx);
    auto state = spx::ssn_iterate(in[0], s0, idx, 2);
    Pcg32 wrng(42, 911);
    TD w = TD::randn(state.S.shape(), wrng);
    return spx::reduce_sum(spx::mul(state.S, w));
  };
  for (int s = 0; s < 5; ++s) {
    Pcg32 rng(static_cast<std::uint64_t>(s), 13);
    auto rep = spx::grad_check<D>(f, {TD::randn({4, 4, 2}, rng, 0.5)});
    EXPECT_TRUE(rep.pass) << "seed " << s << " rel err " << rep.max_rel_err;
  }
}

TEST(PositionChannels, AppendsScaledCoordinates) {
  TD feat = TD::zeros({4, 8, 1});
  TD aug = spx::append_position_channels(feat, 0.5);
  ASSERT_EQ(aug.dim(2), 3);
  EXPECT_NEAR(aug.at(2, 6, 1), 0.5 * 2.0 / 8.0, 1e-12);
  EXPECT_NEAR(aug.at(2, 6, 2), 0.5 * 6.0 / 8.0, 1e-12);
}
