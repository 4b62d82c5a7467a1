#include <doctest.h>

#include <cmath>

#include "grafit/metrics.hpp"
#include "support.hpp"

using namespace grafit;
using testsupport::close;
using testsupport::random_values;

namespace {

retrieval::RankingResult ranking_of(const std::vector<std::size_t>& order) {
  retrieval::RankingResult r;
  double score = static_cast<double>(order.size());
  for (auto i : order) r.entries.emplace_back(i, score--);
  return r;
}

// Definition-based quadratic oracle: precision at each relevant rank,
// computed by re-counting the prefix from scratch.
double ap_oracle(const std::vector<std::uint8_t>& relevance_in_rank_order) {
  std::size_t total_relevant = 0;
  for (auto r : relevance_in_rank_order) total_relevant += r;
  double ap = 0.0;
  for (std::size_t r = 0; r < relevance_in_rank_order.size(); ++r) {
    if (!relevance_in_rank_order[r]) continue;
    std::size_t hits = 0;
    for (std::size_t p = 0; p <= r; ++p) hits += relevance_in_rank_order[p];
    ap += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return ap / static_cast<double>(total_relevant);
}

}  // namespace

TEST_CASE("a perfect ranking has AP one") {
  auto r = ranking_of({0, 1, 2, 3});
  std::vector<std::uint8_t> relevance = {1, 1, 0, 0};
  CHECK(metrics::average_precision(r, relevance) == doctest::Approx(1.0));
}

TEST_CASE("a single relevant item at rank two of four gives one half") {
  auto r = ranking_of({0, 1, 2, 3});
  std::vector<std::uint8_t> relevance = {0, 1, 0, 0};
  CHECK(metrics::average_precision(r, relevance) == doctest::Approx(0.5));
}

TEST_CASE("relevant items at ranks one, three, and six") {
  auto r = ranking_of({0, 1, 2, 3, 4, 5});
  std::vector<std::uint8_t> relevance = {1, 0, 1, 0, 0, 1};
  const double expected = (1.0 / 3.0) * (1.0 + 2.0 / 3.0 + 3.0 / 6.0);
  CHECK(metrics::average_precision(r, relevance) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("zero relevant items is a structured error") {
  auto r = ranking_of({0, 1});
  std::vector<std::uint8_t> relevance = {0, 0};
  CHECK_THROWS_AS(metrics::average_precision(r, relevance), ContractError);
}

TEST_CASE("streaming AP equals the quadratic oracle on every ranking up to length 8") {
  for (std::size_t n = 1; n <= 8; ++n) {
    for (std::size_t pattern = 1; pattern < (1u << n); ++pattern) {
      std::vector<std::uint8_t> relevance_by_rank(n);
      for (std::size_t r = 0; r < n; ++r) relevance_by_rank[r] = (pattern >> r) & 1u;
      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      auto ranking = ranking_of(order);
      CHECK(close(metrics::average_precision(ranking, relevance_by_rank),
                  ap_oracle(relevance_by_rank), 1e-12, 1e-12));
    }
  }
}

TEST_CASE("AP ignores the ordering below the last relevant item") {
  auto a = ranking_of({0, 1, 2, 3, 4});
  auto b = ranking_of({0, 1, 2, 4, 3});  // swap two irrelevant tail items
  std::vector<std::uint8_t> relevance = {1, 0, 1, 0, 0};
  CHECK(metrics::average_precision(a, relevance) == metrics::average_precision(b, relevance));
}

TEST_CASE("mean average precision over fine labels") {
  std::vector<std::uint32_t> memory_fine = {5, 5, 6, 6};

  SUBCASE("a single perfect query") {
    std::vector<metrics::RankedQuery> queries(1);
    queries[0].ranking = ranking_of({0, 1, 2, 3});
    queries[0].fine_label = 5;
    auto report = metrics::mean_average_precision(queries, memory_fine, "cosine");
    CHECK(report.value == doctest::Approx(1.0));
    CHECK(report.num_queries == 1);
    CHECK(report.num_skipped == 0);
    CHECK(report.mode == "cosine");
  }

  SUBCASE("two queries with AP 1.0 and 0.5 average to 0.75") {
    std::vector<metrics::RankedQuery> queries(2);
    queries[0].ranking = ranking_of({0, 1, 2, 3});
    queries[0].fine_label = 5;
    // Fine 6 items sit at ranks 2 and 4: AP = (1/2)(1/2 + 2/4) = 0.5.
    queries[1].ranking = ranking_of({0, 2, 1, 3});
    queries[1].fine_label = 6;
    auto report = metrics::mean_average_precision(queries, memory_fine);
    CHECK(report.value == doctest::Approx(0.75));
  }

  SUBCASE("queries without any relevant item are skipped and counted") {
    std::vector<metrics::RankedQuery> queries(2);
    queries[0].ranking = ranking_of({0, 1, 2, 3});
    queries[0].fine_label = 5;
    queries[1].ranking = ranking_of({0, 1, 2, 3});
    queries[1].fine_label = 99;
    auto report = metrics::mean_average_precision(queries, memory_fine);
    CHECK(report.num_queries == 1);
    CHECK(report.num_skipped == 1);
    CHECK(report.value == doctest::Approx(1.0));

    queries[0].fine_label = 98;
    CHECK_THROWS_AS(metrics::mean_average_precision(queries, memory_fine), ContractError);
  }
}

TEST_CASE("mAP matches an independent quadratic reference on random queries") {
  Rng rng(70);
  const std::size_t n = 30;
  std::vector<std::uint32_t> memory_fine(n);
  for (std::size_t i = 0; i < n; ++i) memory_fine[i] = static_cast<std::uint32_t>(i % 6);

  std::vector<metrics::RankedQuery> queries(10);
  double expected_sum = 0.0;
  for (auto& q : queries) {
    // Random permutation as the ranking.
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    q.ranking = ranking_of(order);
    q.fine_label = static_cast<std::uint32_t>(rng.next_below(6));

    std::vector<std::uint8_t> by_rank(n);
    for (std::size_t r = 0; r < n; ++r) by_rank[r] = memory_fine[order[r]] == q.fine_label;
    expected_sum += ap_oracle(by_rank);
  }
  auto report = metrics::mean_average_precision(queries, memory_fine);
  CHECK(close(report.value, expected_sum / 10.0, 1e-12, 1e-12));
}

TEST_CASE("top-1 accuracy") {
  std::vector<std::uint32_t> truth = {1, 2, 3, 4, 5};
  CHECK(metrics::top1_accuracy(truth, truth) == 1.0);
  std::vector<std::uint32_t> disjoint = {6, 7, 8, 9, 10};
  CHECK(metrics::top1_accuracy(disjoint, truth) == 0.0);
  std::vector<std::uint32_t> partial = {1, 2, 3, 9, 10};
  CHECK(metrics::top1_accuracy(partial, truth) == doctest::Approx(0.6));
  std::vector<std::uint32_t> shorter = {1, 2};
  CHECK_THROWS_AS(metrics::top1_accuracy(shorter, truth), ContractError);
}
