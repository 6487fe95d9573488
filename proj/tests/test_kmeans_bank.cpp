#include <gtest/gtest.h>

#include <limits>
#include <set>

#include "fixtures.hpp"

using namespace stylebank;
namespace fs = std::filesystem;

namespace {

/// Minimum inertia over every assignment of points to k labels.
double brute_force_inertia(const FeatureMatrix& pts, std::size_t k) {
  const std::size_t n = pts.rows(), dim = pts.cols();
  std::vector<std::size_t> label(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    std::vector<double> sum(k * dim, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[label[i]];
      for (std::size_t d = 0; d < dim; ++d) sum[label[i] * dim + d] += pts(i, d);
    }
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = pts(i, d) - sum[label[i] * dim + d] / static_cast<double>(count[label[i]]);
        inertia += diff * diff;
      }
    best = std::min(best, inertia);
    std::size_t i = 0;
    while (i < n && ++label[i] == k) label[i++] = 0;
    if (i == n) break;
  }
  return best;
}

std::vector<std::vector<float>> rows_of(const FeatureMatrix& m) {
  std::vector<std::vector<float>> out;
  for (std::size_t r = 0; r < m.rows(); ++r) out.emplace_back(m.row(r).begin(), m.row(r).end());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(KMeans, SaturationGivesZeroInertia) {
  const auto pts = fixtures::normal_matrix(12, 3, 4);
  const auto res = kmeans(pts, 12, 1);
  EXPECT_EQ(res.inertia, 0.0);
  EXPECT_EQ(rows_of(res.centroids), rows_of(pts));
}

TEST(KMeans, OneDimensionalTwoClusters) {
  const FeatureMatrix pts(4, 1, {0.0f, 0.1f, 10.0f, 10.1f});
  const auto res = kmeans(pts, 2, 9);
  EXPECT_EQ(res.assignments[0], res.assignments[1]);
  EXPECT_EQ(res.assignments[2], res.assignments[3]);
  EXPECT_NE(res.assignments[0], res.assignments[2]);
  EXPECT_NEAR(res.inertia, brute_force_inertia(pts, 2), 1e-6);
}

TEST(KMeans, MatchesBruteForceOnSeparatedClusters) {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t k = 2 + rng.index(2), per = 2 + rng.index(2);
    FeatureMatrix pts(k * per, 2);
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t j = 0; j < per; ++j) {
        pts(c * per + j, 0) = static_cast<float>(20.0 * c + rng.uniform(-1, 1));
        pts(c * per + j, 1) = static_cast<float>(rng.uniform(-1, 1));
      }
    const auto res = kmeans(pts, k, rng.next_u64());
    EXPECT_NEAR(res.inertia, brute_force_inertia(pts, k), 1e-4);
  }
}

TEST(KMeans, IdenticalPoints) {
  const FeatureMatrix pts(5, 2, std::vector<float>(10, 3.0f));
  const auto res = kmeans(pts, 2, 3);
  EXPECT_EQ(res.inertia, 0.0);
  EXPECT_EQ(res.k(), 2u);
}

TEST(KMeans, InertiaNeverIncreases) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pts = fixtures::normal_matrix(40 + rng.index(60), 1 + rng.index(5), rng.next_u64());
    const auto res = kmeans(pts, 1 + rng.index(10), rng.next_u64());
    for (std::size_t i = 1; i < res.inertia_history.size(); ++i)
      EXPECT_LE(res.inertia_history[i], res.inertia_history[i - 1] * (1 + 1e-6));
  }
}

TEST(KMeans, DeterministicForFixedSeed) {
  const auto pts = fixtures::normal_matrix(80, 4, 12);
  const auto a = kmeans(pts, 7, 5), b = kmeans(pts, 7, 5);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.assignments, b.assignments);
}

TEST(KMeans, RejectsBadArguments) {
  const auto pts = fixtures::normal_matrix(4, 2, 1);
  EXPECT_THROW(kmeans(pts, 0, 1), InvalidArgument);
  EXPECT_THROW(kmeans(pts, 5, 1), InvalidArgument);
  EXPECT_THROW(kmeans(FeatureMatrix(0, 2), 1, 1), InvalidArgument);
}

TEST(Representatives, NearestMemberToMean) {
  const FeatureMatrix values(3, 1, {0.0f, 1.0f, 9.0f});
  const FeatureMatrix keys(3, 2, {10, 11, 20, 21, 30, 31});
  KMeansResult res;
  res.centroids = FeatureMatrix(1, 1, {10.0f / 3.0f});
  res.assignments = {0, 0, 0};
  const auto reps = select_representatives(values, keys, res);
  ASSERT_EQ(reps.rows, std::vector<std::uint32_t>{1});
  EXPECT_EQ(reps.values(0, 0), 1.0f);
  EXPECT_EQ(reps.keys(0, 0), 20.0f);
  EXPECT_EQ(reps.keys(0, 1), 21.0f);
}

TEST(Representatives, TieTakesLowerIndex) {
  const FeatureMatrix values(2, 1, {0.0f, 2.0f});
  KMeansResult res;
  res.centroids = FeatureMatrix(1, 1, {1.0f});
  res.assignments = {0, 0};
  EXPECT_EQ(select_representatives(values, values, res).rows, std::vector<std::uint32_t>{0});
}

TEST(Representatives, SaturatedSelectionIsPermutation) {
  const auto values = fixtures::normal_matrix(9, 3, 2), keys = fixtures::normal_matrix(9, 3, 3);
  const auto reps = select_representatives(values, keys, kmeans(values, 9, 4));
  EXPECT_EQ(std::set<std::uint32_t>(reps.rows.begin(), reps.rows.end()).size(), 9u);
  EXPECT_EQ(rows_of(reps.values), rows_of(values));
  EXPECT_EQ(rows_of(reps.keys), rows_of(keys));
}

TEST(Representatives, MisalignedShapesThrow) {
  const auto values = fixtures::normal_matrix(4, 2, 2);
  EXPECT_THROW(select_representatives(values, fixtures::normal_matrix(3, 2, 1), kmeans(values, 2, 1)), InvalidArgument);
}

namespace {

struct CacheFixture {
  fs::path dir;
  std::vector<std::vector<CacheEntry>> contents;
  std::vector<CacheReader> readers;

  CacheFixture(const std::string& name, std::size_t n_caches, std::size_t tokens, std::uint64_t seed) {
    dir = fixtures::temp_dir(name);
    for (std::size_t c = 0; c < n_caches; ++c) {
      std::vector<CacheEntry> entries;
      for (std::uint16_t l = 0; l < 2; ++l)
        for (std::uint16_t t = 0; t < 3; ++t)
          for (std::uint16_t h = 0; h < 2; ++h) {
            const std::uint64_t s = mix_seed(seed, c * 100 + l * 10 + t * 2 + h);
            entries.push_back({{l, t, h}, fixtures::normal_matrix(tokens, 4, s), fixtures::normal_matrix(tokens, 4, s + 1)});
          }
      const auto path = dir / ("c" + std::to_string(c) + ".skvc");
      write_cache(entries, path, c);
      contents.push_back(std::move(entries));
      readers.push_back(open_cache(path));
    }
  }
};

}  // namespace

TEST(Distill, SingleImageDefaultKIsPermutation) {
  CacheFixture f("distill_single", 1, 10, 3);
  const auto bank = distill(f.readers, KPolicy::single_image(), 1);
  for (std::size_t i = 0; i < bank.entries.size(); ++i) {
    EXPECT_EQ(rows_of(bank.entries[i].values), rows_of(f.contents[0][i].values));
    EXPECT_EQ(rows_of(bank.entries[i].keys), rows_of(f.contents[0][i].keys));
  }
}

TEST(Distill, MembershipAndPairing) {
  CacheFixture f("distill_members", 3, 12, 5);
  const auto bank = distill(f.readers, KPolicy::single_image(), 7);
  ASSERT_EQ(bank.entries.size(), f.contents[0].size());
  for (std::size_t i = 0; i < bank.entries.size(); ++i) {
    const auto& e = bank.entries[i];
    EXPECT_EQ(e.k(), 12u);
    for (std::size_t j = 0; j < e.k(); ++j) {
      const auto& src = f.contents[e.sources[j].reader][i];
      const auto row = e.sources[j].row;
      EXPECT_TRUE(std::equal(e.keys.row(j).begin(), e.keys.row(j).end(), src.keys.row(row).begin()));
      EXPECT_TRUE(std::equal(e.values.row(j).begin(), e.values.row(j).end(), src.values.row(row).begin()));
      if (j > 0) {
        EXPECT_LT(e.sources[j - 1], e.sources[j]);
      }
    }
  }
}

TEST(Distill, CompressionAgainstSingleCache) {
  for (std::size_t n : {2u, 3u, 5u}) {
    CacheFixture f("distill_size" + std::to_string(n), n, 16, n);
    const auto bank = distill(f.readers, KPolicy::single_image(), 1);
    EXPECT_LE(static_cast<double>(bank.payload_bytes()), 1.05 * static_cast<double>(f.readers[0].payload_bytes()));
  }
}

TEST(Distill, ThreadCountDoesNotChangeBank) {
  CacheFixture f("distill_threads", 3, 12, 9);
  DistillOptions one, many;
  many.threads = 8;
  EXPECT_EQ(distill(f.readers, KPolicy::single_image(), 4, one), distill(f.readers, KPolicy::single_image(), 4, many));
}

TEST(Distill, SaturatedBankIsTheFullConcatenation) {
  CacheFixture f("distill_saturated", 3, 6, 2);
  const auto bank = distill(f.readers, KPolicy::saturated(), 4);
  for (const auto& e : bank.entries) {
    const auto full = iter_group(f.readers, e.key);
    EXPECT_EQ(e.keys, full.keys);
    EXPECT_EQ(e.values, full.values);
  }
}

TEST(Distill, KScaleAndMismatchedKeySets) {
  CacheFixture f("distill_kscale", 2, 10, 4);
  EXPECT_EQ(distill(f.readers, KPolicy::single_image(1.5), 1).entries[0].k(), 15u);
  const auto extra = f.dir / "short.skvc";
  write_cache(std::vector<CacheEntry>(f.contents[0].begin(), f.contents[0].end() - 1), extra);
  std::vector<CacheReader> mixed;
  mixed.push_back(open_cache(f.dir / "c0.skvc"));
  mixed.push_back(open_cache(extra));
  try {
    distill(mixed, KPolicy::single_image(), 1);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("head 1"), std::string::npos) << e.what();
  }
}

TEST(BankFormat, RoundTripAndTruncation) {
  CacheFixture f("bank_format", 2, 8, 6);
  const auto bank = distill(f.readers, KPolicy::single_image(), 3);
  write_bank(bank, f.dir / "b.skvb");
  EXPECT_EQ(open_bank(f.dir / "b.skvb"), bank);
  const auto bytes = read_file(f.dir / "b.skvb");
  EXPECT_EQ(bytes.size(), 36u + 22u * bank.entries.size() + bank.payload_bytes() + 8u * 8u * bank.entries.size());
  EXPECT_EQ(bank_offsets(bank).front(), 36u + 22u * bank.entries.size());
  try {
    parse_bank(std::span(bytes).first(bytes.size() - 3), "cut");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.code(), FormatErrc::truncated);
  }
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(parse_bank(bad, "magic"), FormatError);
}
