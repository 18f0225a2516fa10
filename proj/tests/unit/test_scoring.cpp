#include <doctest.h>

#include <algorithm>
#include <set>

#include "dmprune/oracles.hpp"
#include "dmprune/rng.hpp"
#include "dmprune/scoring.hpp"

using namespace dmprune;

namespace {

Tensor vec(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor({n}, std::move(v));
}

}  // namespace

TEST_CASE("taylor scores are |w * g|") {
  CHECK(taylor_scores(vec({1, -2, 3}), vec({0.5, 0.1, 0})).data == std::vector<double>{0.5, 0.2, 0.0});
  CHECK(taylor_scores(vec({1, -2, 3}), vec({0, 0, 0})).data == std::vector<double>{0, 0, 0});
  CHECK(taylor_scores(vec({-4}), vec({-0.25})).data == std::vector<double>{1.0});
  CHECK_THROWS_AS(taylor_scores(vec({1, 2}), vec({1, 2, 3})), Error);
  CHECK_THROWS_AS(taylor_scores(Tensor({2, 2}, {1, 2, 3, 4}), vec({1, 2, 3, 4})), Error);
}

TEST_CASE("prune order sorts by score then index") {
  const std::vector<double> s1{0.5, 0.2, 0.9};
  CHECK(prune_order(s1) == std::vector<std::size_t>{1, 0, 2});
  const std::vector<double> s2{0.3, 0.3};
  CHECK(prune_order(s2) == std::vector<std::size_t>{0, 1});
  const std::vector<double> s3{0, 0, 0};
  CHECK(prune_order(s3) == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("prune order matches a pairwise-sort oracle on random scores with ties") {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> s(1 + rng.index(60));
    for (double& x : s) x = static_cast<double>(rng.index(8)) * 0.125;
    CHECK(prune_order(s) == oracle::order_by_score(s));
  }
}

TEST_CASE("masks at a count") {
  const std::vector<std::size_t> order{1, 0, 2};
  CHECK(mask_at_count(order, 1, {3}).bits.data == std::vector<double>{1, 0, 1});
  CHECK(mask_at_count(order, 0, {3}).bits.data == std::vector<double>{1, 1, 1});
  CHECK(mask_at_count(order, 3, {3}).bits.data == std::vector<double>{0, 0, 0});
  CHECK(mask_at_count(order, 1, {3}).popcount() == 2);
  CHECK_THROWS_AS(mask_at_count(order, 4, {3}), Error);
}

TEST_CASE("masks nest as the count grows") {
  Rng rng(9);
  std::vector<double> s(200);
  for (double& x : s) x = rng.uniform();
  const auto order = prune_order(s);
  std::set<std::size_t> prev;
  for (std::size_t k = 0; k <= s.size(); k += 7) {
    const auto m = mask_at_count(order, k, {200});
    std::set<std::size_t> pruned;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (m.bits.data[j] == 0.0) pruned.insert(j);
    CHECK(pruned.size() == k);
    CHECK(std::includes(pruned.begin(), pruned.end(), prev.begin(), prev.end()));
    CHECK_NOTHROW(m.validate());
    prev = std::move(pruned);
  }
}

TEST_CASE("perturbation at a count") {
  const auto w = vec({1, -2, 3});
  const std::vector<std::size_t> order{1, 0, 2};
  const auto p1 = perturbation_at_count(w, order, 1);
  CHECK(p1.delta.data == std::vector<double>{0, 2, 0});
  CHECK(p1.support == std::vector<std::size_t>{1});
  CHECK(perturbation_at_count(w, order, 0).delta.data == std::vector<double>{0, 0, 0});
  CHECK(perturbation_at_count(w, order, 3).delta.data == std::vector<double>{-1, 2, -3});
  CHECK(perturbation_at_count(w, order, 3).support == std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(perturbation_at_count(w, order, 4), Error);
}

TEST_CASE("sigma subvectors") {
  const auto w = vec({1, -2, 3});
  const std::vector<std::size_t> order{1, 0, 2};
  const auto s = sigma_subvector(w, order, 1, 2);
  CHECK(s.indices == std::vector<std::size_t>{0});
  CHECK(s.values == std::vector<double>{-1});
  CHECK(sigma_subvector(w, order, 2, 2).empty());
  CHECK_THROWS_AS(sigma_subvector(w, order, 2, 1), Error);
  CHECK_THROWS_AS(sigma_subvector(w, order, 1, 4), Error);

  std::vector<double> sum(3, 0.0);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto sig = sigma_subvector(w, order, k, k + 1);
    for (std::size_t j = 0; j < sig.nnz(); ++j) sum[sig.indices[j]] += sig.values[j];
  }
  CHECK(sum == std::vector<double>{-1, 2, -3});
}

TEST_CASE("telescoping sigma sums reproduce the perturbation exactly") {
  Rng rng(13);
  const std::size_t d = 97;
  Tensor w({static_cast<std::int64_t>(d)}, oracle::normals(rng, d));
  std::vector<double> s(d);
  for (double& x : s) x = rng.uniform();
  const auto order = prune_order(s);
  const std::vector<std::size_t> counts{0, 5, 6, 30, 64, 97};
  std::vector<double> acc(d, 0.0);
  for (std::size_t j = 1; j < counts.size(); ++j) {
    const auto sig = sigma_subvector(w, order, counts[j - 1], counts[j]);
    for (std::size_t t = 0; t < sig.nnz(); ++t) acc[sig.indices[t]] += sig.values[t];
    CHECK(acc == perturbation_at_count(w, order, counts[j]).delta.data);
  }
}

TEST_CASE("ratio to count rounds to nearest") {
  CHECK(count_for_ratio(0.5, 10) == 5);
  CHECK(count_for_ratio(0.25, 10) == 3);  // 2.5 rounds half away from zero
  CHECK(count_for_ratio(0.0, 10) == 0);
  CHECK(count_for_ratio(1.0, 7) == 7);
  CHECK(count_for_ratio(1.5, 10) == 10);
  CHECK(count_for_ratio(-0.1, 10) == 0);
}

TEST_CASE("sparse vectors") {
  const std::vector<double> dense{0, 1.5, 0, -2};
  const auto v = SparseVector::from_dense(dense);
  CHECK(v.indices == std::vector<std::size_t>{1, 3});
  CHECK(v.to_dense() == dense);
  CHECK(sparse_dot(v, dense) == doctest::Approx(6.25));
  SparseVector bad{4, {1, 1}, {1.0, 2.0}};
  CHECK_THROWS_AS(bad.validate(), Error);
  SparseVector oob{4, {4}, {1.0}};
  CHECK_THROWS_AS(oob.validate(), Error);
}
