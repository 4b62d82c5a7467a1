#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "grafit/metrics.hpp"
#include "grafit/retrieval.hpp"
#include "support.hpp"

using namespace grafit;
using testsupport::close;
using testsupport::random_values;

namespace {

memory::EmbeddingMemory angle_memory(const std::vector<double>& angles,
                                     const std::vector<std::uint32_t>& labels) {
  memory::EmbeddingMemory mem;
  mem.dim = 2;
  mem.coarse_labels = labels;
  for (double a : angles) {
    mem.rows.push_back(std::cos(a));
    mem.rows.push_back(std::sin(a));
  }
  return mem;
}

std::vector<std::size_t> order_of(const retrieval::RankingResult& r) {
  std::vector<std::size_t> order;
  for (const auto& [index, score] : r.entries) order.push_back(index);
  return order;
}

memory::EmbeddingMemory random_memory(std::size_t n, std::size_t dim, std::uint32_t classes,
                                      Rng& rng, bool with_fine = false) {
  memory::EmbeddingMemory mem;
  mem.dim = dim;
  mem.rows = random_values(n * dim, rng);
  for (std::size_t i = 0; i < n; ++i) {
    mem.coarse_labels.push_back(static_cast<std::uint32_t>(i % classes));
    if (with_fine) mem.fine_labels.push_back(static_cast<std::uint32_t>(i % (classes * 2)));
  }
  return mem;
}

}  // namespace

TEST_CASE("the query's own vector ranks first with score one") {
  auto mem = angle_memory({0.0, 1.0, 2.0}, {0, 0, 0});
  std::vector<double> q = {std::cos(1.0), std::sin(1.0)};
  auto r = retrieval::rank_cosine(q, mem);
  CHECK(r.entries[0].first == 1);
  CHECK(r.entries[0].second == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cosine ties break toward the lower memory index") {
  memory::EmbeddingMemory mem;
  mem.dim = 2;
  mem.rows = {0.0, 1.0, 0.0, 1.0};  // identical rows
  mem.coarse_labels = {0, 0};
  std::vector<double> q = {1.0, 1.0};
  auto r = retrieval::rank_cosine(q, mem);
  CHECK(order_of(r) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("five vectors at known angles rank by angular distance") {
  const std::vector<double> angles = {0.1, 0.9, 1.7, 2.5, 3.1};
  auto mem = angle_memory(angles, {0, 0, 0, 0, 0});
  const double qa = 1.55;
  std::vector<double> q = {std::cos(qa), std::sin(qa)};
  auto r = retrieval::rank_cosine(q, mem);

  // Oracle: sort indices by |angle - query angle| ascending.
  std::vector<std::size_t> expected = {0, 1, 2, 3, 4};
  std::sort(expected.begin(), expected.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(angles[a] - qa) < std::abs(angles[b] - qa);
  });
  CHECK(order_of(r) == expected);
}

TEST_CASE("empty memory is a structured error") {
  memory::EmbeddingMemory mem;
  mem.dim = 2;
  std::vector<double> q = {1.0, 0.0};
  CHECK_THROWS_AS(retrieval::rank_cosine(q, mem), ContractError);
}

TEST_CASE("a uniform posterior reduces conditional ranking to cosine ranking") {
  Rng rng(50);
  auto mem = random_memory(15, 4, 3, rng);
  auto q = random_values(4, rng);
  std::map<std::uint32_t, double> posterior = {{0, 1.0 / 3}, {1, 1.0 / 3}, {2, 1.0 / 3}};
  auto cond = retrieval::rank_conditional(q, mem, posterior);
  auto cos = retrieval::rank_cosine(q, mem);
  CHECK(order_of(cond) == order_of(cos));
}

TEST_CASE("conditional scores follow the log-odds formula") {
  memory::EmbeddingMemory mem;
  mem.dim = 2;
  // Unit rows placed so cos(q, m0) = 0.9 and cos(q, m1) = 0.1.
  mem.rows = {0.9, std::sqrt(1.0 - 0.81), 0.1, std::sqrt(1.0 - 0.01)};
  mem.coarse_labels = {0, 1};
  std::vector<double> q = {1.0, 0.0};
  std::map<std::uint32_t, double> posterior = {{0, 0.1}, {1, 0.9}};
  auto r = retrieval::rank_conditional(q, mem, posterior, 1e-6);
  // Scores: 0.9 + log(1/9) and 0.1 + log(9); the second row wins.
  CHECK(r.entries[0].first == 1);
  CHECK(r.entries[0].second == doctest::Approx(0.1 + std::log(9.0)).epsilon(1e-9));
  CHECK(r.entries[1].second == doctest::Approx(0.9 + std::log(1.0 / 9.0)).epsilon(1e-9));
}

TEST_CASE("a certain posterior is clamped to finite log-odds") {
  memory::EmbeddingMemory mem;
  mem.dim = 2;
  mem.rows = {1.0, 0.0};
  mem.coarse_labels = {0};
  std::vector<double> q = {1.0, 0.0};
  std::map<std::uint32_t, double> posterior = {{0, 1.0}};
  auto r = retrieval::rank_conditional(q, mem, posterior, 1e-6);
  const double log_odds = std::log((1.0 - 1e-6) / 1e-6);
  CHECK(r.entries[0].second == doctest::Approx(1.0 + log_odds).epsilon(1e-9));
  CHECK(std::isfinite(r.entries[0].second));
  CHECK(log_odds == doctest::Approx(13.8155).epsilon(1e-4));
}

TEST_CASE("memory labels missing from the posterior raise an error naming the label") {
  Rng rng(51);
  auto mem = random_memory(6, 3, 3, rng);
  auto q = random_values(3, rng);
  std::map<std::uint32_t, double> posterior = {{0, 0.5}, {1, 0.5}};  // label 2 missing
  CHECK_THROWS_WITH_AS(retrieval::rank_conditional(q, mem, posterior),
                       doctest::Contains("2"), ContractError);
}

TEST_CASE("posteriors must be normalized and within range") {
  Rng rng(52);
  auto mem = random_memory(4, 3, 2, rng);
  auto q = random_values(3, rng);
  std::map<std::uint32_t, double> bad_sum = {{0, 0.6}, {1, 0.6}};
  CHECK_THROWS_AS(retrieval::rank_conditional(q, mem, bad_sum), ContractError);
}

TEST_CASE("oracle ranking puts the query's coarse block first") {
  SUBCASE("a same-coarse row at cosine -1 outranks a different-coarse row at +1") {
    memory::EmbeddingMemory mem;
    mem.dim = 2;
    mem.rows = {-1.0, 0.0, 1.0, 0.0};
    mem.coarse_labels = {7, 3};
    std::vector<double> q = {1.0, 0.0};
    auto r = retrieval::rank_oracle(q, mem, 7);
    CHECK(order_of(r) == std::vector<std::size_t>{0, 1});
  }

  SUBCASE("an empty same-coarse block reduces to cosine ordering") {
    Rng rng(53);
    auto mem = random_memory(10, 3, 2, rng);
    auto q = random_values(3, rng);
    auto oracle = retrieval::rank_oracle(q, mem, 99);  // class with no members
    auto cosine = retrieval::rank_cosine(q, mem);
    CHECK(order_of(oracle) == order_of(cosine));
  }

  SUBCASE("oracle ordering is the point-mass limit of conditional ranking") {
    Rng rng(54);
    auto mem = random_memory(20, 4, 3, rng);
    auto q = random_values(4, rng);
    const std::uint32_t target = 1;
    const double eps = 1e-12;
    std::map<std::uint32_t, double> posterior;
    posterior[target] = 1.0 - eps;
    posterior[0] = eps / 2;
    posterior[2] = eps / 2;
    auto oracle = retrieval::rank_oracle(q, mem, target);
    auto cond = retrieval::rank_conditional(q, mem, posterior, 1e-12);
    CHECK(order_of(oracle) == order_of(cond));
  }

  SUBCASE("within each block the oracle follows the cosine restriction") {
    Rng rng(55);
    auto mem = random_memory(16, 3, 4, rng);
    auto q = random_values(3, rng);
    auto oracle = retrieval::rank_oracle(q, mem, 2);
    auto cosine = retrieval::rank_cosine(q, mem);
    std::vector<std::size_t> oracle_same, cosine_same;
    for (auto i : order_of(oracle)) {
      if (mem.coarse_labels[i] == 2) oracle_same.push_back(i);
    }
    for (auto i : order_of(cosine)) {
      if (mem.coarse_labels[i] == 2) cosine_same.push_back(i);
    }
    CHECK(oracle_same == cosine_same);
  }
}

TEST_CASE("rankings list every memory index exactly once, self-exclusion aside") {
  Rng rng(56);
  auto mem = random_memory(12, 3, 3, rng);
  auto q = random_values(3, rng);
  auto full = retrieval::rank_cosine(q, mem);
  CHECK(full.entries.size() == 12);
  auto excluded = retrieval::rank_cosine(q, mem, "q", 5);
  CHECK(excluded.entries.size() == 11);
  for (const auto& [index, score] : excluded.entries) CHECK(index != 5);
}

TEST_CASE("the top cosine hit is invariant under positive scaling of the query") {
  Rng rng(57);
  auto mem = random_memory(10, 4, 2, rng);
  auto q = random_values(4, rng);
  auto r1 = retrieval::rank_cosine(q, mem);
  for (auto& v : q) v *= 37.5;
  auto r2 = retrieval::rank_cosine(q, mem);
  CHECK(r1.entries[0].first == r2.entries[0].first);
  CHECK(order_of(r1) == order_of(r2));
}

TEST_CASE("oracle mAP dominates cosine mAP when fine refines coarse") {
  Rng rng(58);
  for (int trial = 0; trial < 10; ++trial) {
    auto mem = random_memory(24, 4, 3, rng, /*with_fine=*/true);
    auto q = random_values(4, rng);
    // Query's fine label refines its coarse label: fine f has coarse f % 3.
    const std::uint32_t fine = static_cast<std::uint32_t>(rng.next_below(6));
    const std::uint32_t coarse = fine % 3;
    std::vector<std::uint8_t> relevance(mem.size(), 0);
    for (std::size_t i = 0; i < mem.size(); ++i) relevance[i] = mem.fine_labels[i] == fine;

    auto ap_cos = metrics::average_precision(retrieval::rank_cosine(q, mem), relevance);
    auto ap_oracle = metrics::average_precision(retrieval::rank_oracle(q, mem, coarse), relevance);
    CHECK(ap_oracle >= ap_cos - 1e-12);
  }
}
