#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "sewkit/stitcher.hpp"

using namespace sewkit;

namespace {

SimilarityMatrix from_upper(std::size_t m, const std::vector<std::tuple<std::size_t, std::size_t, double>>& entries) {
  SimilarityMatrix s;
  s.size = m;
  s.values.assign(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) s.edge_ids.push_back({0, static_cast<int>(i)});
  for (auto [a, b, v] : entries) s.values[a * m + b] = s.values[b * m + a] = v;
  return s;
}

bool is_partial_matching(const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
  std::set<std::size_t> seen;
  for (auto [a, b] : pairs)
    if (!seen.insert(a).second || !seen.insert(b).second) return false;
  return true;
}

}  // namespace

TEST(Similarity, Examples) {
  auto same = similarity_matrix(std::vector<double>{1, 2, 1, 2, 1, 2}, 2, {{0, 0}, {0, 1}, {1, 0}});
  for (double v : same.values) EXPECT_EQ(v, 0.0);
  auto s = similarity_matrix(std::vector<double>{0, 3}, 1, {{0, 0}, {0, 1}});
  EXPECT_EQ(s.at(0, 1), -9.0);
  Rng rng(2);
  std::vector<double> tags(10 * 3);
  for (auto& t : tags) t = rng.normal();
  std::vector<EdgeRef> ids;
  for (int i = 0; i < 10; ++i) ids.push_back({i, 0});
  auto r = similarity_matrix(tags, 3, ids);
  for (std::size_t a = 0; a < 10; ++a)
    for (std::size_t b = 0; b < 10; ++b) EXPECT_EQ(r.at(a, b), r.at(b, a));
  EXPECT_THROW(similarity_matrix(tags, 4, ids), ShapeMismatch);
}

TEST(GreedyDecode, EmptyAndAllFree) {
  SimilarityMatrix empty;
  EXPECT_TRUE(greedy_decode(empty, {}).empty());
  auto s = from_upper(3, {{0, 1, 0.0}, {0, 2, 0.0}, {1, 2, 0.0}});
  std::vector<std::uint8_t> free(3, 1);
  EXPECT_TRUE(greedy_decode(s, free).empty());
}

TEST(GreedyDecode, FourEdgeExample) {
  auto s = from_upper(4, {{0, 1, -0.1}, {0, 2, -5}, {0, 3, -6}, {1, 2, -7}, {1, 3, -4}, {2, 3, -0.2}});
  auto out = greedy_decode(s, {}, -1.0);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0], Stitch::make({0, 0}, {0, 1}));
  EXPECT_EQ(out[1], Stitch::make({0, 2}, {0, 3}));
  EXPECT_EQ(greedy_pairs(s, {}, -1.0), oracle::greedy_reference(s, {}, -1.0));
}

TEST(GreedyDecode, TiesGoToSmallestRowColumn) {
  auto s = from_upper(4, {{0, 1, -0.5}, {0, 2, -0.5}, {1, 2, -0.5}, {2, 3, -0.5}, {0, 3, -0.5}, {1, 3, -0.5}});
  auto pairs = greedy_pairs(s, {}, -1.0);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0], std::make_pair(std::size_t{0}, std::size_t{1}));
  EXPECT_EQ(pairs[1], std::make_pair(std::size_t{2}, std::size_t{3}));
}

TEST(GreedyDecode, MatchesReferenceOnRandomSmallMatrices) {
  Rng rng(17);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t m = rng.below(7);
    auto s = oracle::random_symmetric(rng, m);
    std::vector<std::uint8_t> free(m);
    for (auto& f : free) f = rng.uniform() < 0.2;
    const double threshold = rng.uniform(-3, 0);
    ASSERT_EQ(greedy_pairs(s, free, threshold), oracle::greedy_reference(s, free, threshold)) << "trial " << trial;
  }
}

TEST(GreedyDecode, MatchesReferenceOnExhaustiveSigns) {
  for (std::size_t m = 2; m <= 6; ++m) {
    const std::size_t entries = m * (m - 1) / 2;
    for (std::uint32_t bits = 0; bits < (1u << entries); ++bits) {
      SimilarityMatrix s;
      s.size = m;
      s.values.assign(m * m, 0.0);
      std::size_t k = 0;
      for (std::size_t a = 0; a < m; ++a) {
        s.edge_ids.push_back({0, static_cast<int>(a)});
        for (std::size_t b = a + 1; b < m; ++b, ++k) s.values[a * m + b] = s.values[b * m + a] = (bits >> k & 1u) ? 1.0 : -1.0;
      }
      for (double threshold : {-1.0, 0.0}) ASSERT_EQ(greedy_pairs(s, {}, threshold), oracle::greedy_reference(s, {}, threshold));
    }
  }
}

TEST(GreedyDecode, PartialMatchingOnLargeMatrices) {
  Rng rng(23);
  for (int trial = 0; trial < 1000; ++trial) {
    auto s = oracle::random_symmetric(rng, 40);
    ASSERT_TRUE(is_partial_matching(greedy_pairs(s, {}, -2.0)));
  }
}

TEST(GreedyDecode, RaisingThresholdOnlyRemovesStitches) {
  Rng rng(29);
  for (int trial = 0; trial < 500; ++trial) {
    auto s = oracle::random_symmetric(rng, 12);
    const double lo = rng.uniform(-3, 0);
    const double hi = rng.uniform(lo, 0);
    auto loose = greedy_decode(s, {}, lo);
    auto strict = greedy_decode(s, {}, hi);
    EXPECT_LE(strict.size(), loose.size());
    for (const auto& st : strict) EXPECT_NE(std::find(loose.begin(), loose.end(), st), loose.end());
  }
}

TEST(GreedyDecode, Deterministic) {
  Rng rng(31);
  auto s = oracle::random_symmetric(rng, 20);
  EXPECT_EQ(greedy_decode(s, {}), greedy_decode(s, {}));
  EXPECT_THROW(greedy_decode(s, std::vector<std::uint8_t>(3, 0)), LengthMismatch);
}
