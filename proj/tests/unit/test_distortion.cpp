#include <doctest.h>

#include <cmath>

#include "dmprune/distortion.hpp"
#include "dmprune/oracles.hpp"

using namespace dmprune;

namespace {

Tensor vec(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor({n}, std::move(v));
}

struct Layer {
  Tensor w, g;
  std::vector<double> rows;
  std::size_t n = 1;
  double kappa = 0.0;
  FisherMatrix fisher(FisherMode mode = FisherMode::dense) const {
    return FisherMatrix::build(rows, n, w.size(), kappa, mode);
  }
};

Layer random_layer(Rng& rng, std::size_t d, std::size_t n) {
  Layer l;
  l.n = n;
  l.w = vec(oracle::normals(rng, d));
  l.rows = oracle::normals(rng, n * d, 0.2);
  std::vector<double> avg(d, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < d; ++j) avg[j] += l.rows[s * d + j] / static_cast<double>(n);
  l.g = vec(avg);
  l.kappa = default_kappa(l.rows, n, d);
  return l;
}

}  // namespace

TEST_CASE("q from scratch on small layers") {
  {
    const std::vector<double> rows{1.0};
    const auto f = FisherMatrix::build(rows, 1, 1, 0.0, FisherMode::dense);
    const std::vector<double> g{0.5};
    const std::vector<std::size_t> order{0};
    CHECK(q_direct(g, f, perturbation_at_count(vec({2}), order, 1)) == 1.0);
    CHECK(q_direct(g, f, perturbation_at_count(vec({2}), order, 0)) == 0.0);
  }
  {
    const std::vector<double> rows{0.0, 0.0};
    const auto f = FisherMatrix::build(rows, 1, 2, 0.0, FisherMode::dense);
    const std::vector<double> g{1, 1};
    const std::vector<std::size_t> order{0, 1};
    CHECK(q_direct(g, f, perturbation_at_count(vec({1, 1}), order, 2)) == -2.0);
  }
}

TEST_CASE("direct curves") {
  const std::vector<double> rows{1.0};
  const auto f = FisherMatrix::build(rows, 1, 1, 0.0, FisherMode::dense);
  const auto w = vec({2}), g = vec({0.5});
  const std::vector<std::size_t> order{0};
  const auto counts = count_grid(1, 1);
  const auto c = delta_curve_direct({0, &w, &g, &f}, order, counts);
  CHECK(c.counts == std::vector<std::size_t>{0, 1});
  CHECK(c.q == std::vector<double>{0, 1});
  CHECK(c.delta == std::vector<double>{0, 1});
  CHECK(c.method == CurveMethod::direct);

  // zero gradients and zero Fisher give a flat zero curve
  const std::vector<double> zero(4, 0.0);
  const auto fz = FisherMatrix::build(zero, 1, 4, 0.0, FisherMode::dense);
  const auto w4 = vec({1, -2, 3, 4}), g4 = vec({0, 0, 0, 0});
  const std::vector<std::size_t> o4{0, 1, 2, 3};
  const auto cz = delta_curve_direct({0, &w4, &g4, &fz}, o4, count_grid(4, 4));
  for (double d : cz.delta) CHECK(d == 0.0);
}

TEST_CASE("direct curve equals the from-scratch oracle on a 3-weight layer") {
  Rng rng(7);
  const auto l = random_layer(rng, 3, 4);
  const auto f = l.fisher();
  const auto order = prune_order(taylor_scores(l.w, l.g).data);
  const auto counts = count_grid(3, 3);
  const auto c = delta_curve_direct({0, &l.w, &l.g, &f}, order, counts);
  const auto fd = f.to_dense();
  for (std::size_t j = 0; j < counts.size(); ++j) {
    const double ref = oracle::q_from_scratch(l.w.data, l.g.data, fd, order, counts[j]);
    CHECK(c.q[j] == doctest::Approx(ref).epsilon(1e-13));
    CHECK(c.delta[j] == doctest::Approx(ref * ref).epsilon(1e-12));
  }
}

TEST_CASE("incremental update on a 2-weight layer") {
  // F = diag(1, 2) from two samples
  const std::vector<double> rows{std::sqrt(2.0), 0.0, 0.0, 2.0};
  const auto f = FisherMatrix::build(rows, 2, 2, 0.0, FisherMode::dense);
  const auto w = vec({2, 1}), g = vec({0.5, 1});
  const std::vector<std::size_t> order{0, 1};
  const std::vector<std::size_t> counts{0, 1, 2};
  const auto inc = delta_curve_incremental({0, &w, &g, &f}, order, counts);
  CHECK(inc.q[0] == 0.0);
  CHECK(inc.q[1] == doctest::Approx(1.0));
  // -1 - 1 + (4 * 1 + 1 * 2) / 2
  CHECK(inc.q[2] == doctest::Approx(1.0));
  const auto dir = delta_curve_direct({0, &w, &g, &f}, order, counts);
  CHECK(dir.q[2] == doctest::Approx(1.0));
  const auto fd = f.to_dense();
  CHECK(oracle::q_from_scratch(w.data, g.data, fd, order, 2) == doctest::Approx(1.0));
}

TEST_CASE("incremental and direct curves agree on random layers") {
  Rng rng(11);
  for (int t = 0; t < 6; ++t) {
    const std::size_t d = t == 0 ? 50 : 1 + rng.index(120);
    const std::size_t n = t == 0 ? 8 : 1 + rng.index(16);
    const auto l = random_layer(rng, d, n);
    const auto order = prune_order(taylor_scores(l.w, l.g).data);
    const auto counts = count_grid(d, 10);
    for (auto mode : {FisherMode::dense, FisherMode::factor}) {
      const auto f = l.fisher(mode);
      const auto a = delta_curve_incremental({0, &l.w, &l.g, &f}, order, counts);
      const auto b = delta_curve_direct({0, &l.w, &l.g, &f}, order, counts);
      CHECK(a.method == CurveMethod::incremental);
      for (std::size_t j = 0; j < counts.size(); ++j)
        CHECK(std::abs(a.q[j] - b.q[j]) / (1.0 + std::abs(b.q[j])) <= 1e-9);
      // full-prune consistency: the last point removes every weight
      if (counts.back() == d) {
        Perturbation all = perturbation_at_count(l.w, order, d);
        CHECK(a.q.back() == doctest::Approx(q_direct(l.g.data, f, all)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("curve invariants and modes") {
  Rng rng(4);
  const auto l = random_layer(rng, 30, 5);
  const auto f = l.fisher();
  const auto order = prune_order(taylor_scores(l.w, l.g).data);
  const auto counts = count_grid(30, 6);
  const auto sq = delta_curve_incremental({3, &l.w, &l.g, &f}, order, counts, DeltaMode::squared);
  const auto ab = delta_curve_incremental({3, &l.w, &l.g, &f}, order, counts, DeltaMode::abs);
  CHECK(sq.layer_id == 3);
  CHECK(sq.delta[0] == 0.0);
  CHECK(sq.q[0] == 0.0);
  CHECK_NOTHROW(sq.validate());
  for (std::size_t j = 0; j < counts.size(); ++j) {
    CHECK(sq.delta[j] >= 0.0);
    CHECK(sq.delta[j] == sq.q[j] * sq.q[j]);
    CHECK(ab.delta[j] == std::abs(ab.q[j]));
    CHECK(sq.alphas[j] == static_cast<double>(counts[j]) / 30.0);
  }
  CHECK(delta_mode_from_string("abs") == DeltaMode::abs);
  CHECK_THROWS_AS(delta_mode_from_string("cubed"), Error);
}

TEST_CASE("invalid count sequences are rejected") {
  Rng rng(8);
  const auto l = random_layer(rng, 10, 2);
  const auto f = l.fisher();
  const auto order = prune_order(taylor_scores(l.w, l.g).data);
  const LayerCurveInput in{0, &l.w, &l.g, &f};
  const std::vector<std::size_t> decreasing{0, 5, 3};
  const std::vector<std::size_t> no_zero{1, 2};
  const std::vector<std::size_t> too_big{0, 11};
  for (const auto* counts : {&decreasing, &no_zero, &too_big}) {
    CHECK_THROWS_AS(delta_curve_incremental(in, order, *counts), Error);
    CHECK_THROWS_AS(delta_curve_direct(in, order, *counts), Error);
  }
  const auto wrong = vec({1, 2});
  CHECK_THROWS_AS(delta_curve_incremental({0, &wrong, &l.g, &f}, order, count_grid(10, 2)), Error);
}

TEST_CASE("count grid") {
  CHECK(count_grid(10, 4) == std::vector<std::size_t>{0, 3, 5, 8, 10});
  CHECK(count_grid(3, 8) == std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(count_grid(1, 1) == std::vector<std::size_t>{0, 1});
  CHECK(count_grid(100, 20).size() == 21);
  CHECK_THROWS_AS(count_grid(10, 0), Error);
}

TEST_CASE("cross-term diagnostic") {
  Rng rng(3);
  const auto a = random_layer(rng, 20, 6);
  const auto b = random_layer(rng, 15, 6);
  Tensor ga({6, 20}, a.rows), gb({6, 15}, b.rows);

  const auto zero = cross_term_diagnostic({0, &a.w, &a.g, &ga}, {1, &b.w, &b.g, &gb}, 0.0, 10, 3);
  CHECK(zero.ratio == 0.0);

  // sample 0 only sees layer a, sample 1 only layer b
  Tensor oa({2, 20}), ob({2, 15});
  for (std::size_t j = 0; j < 20; ++j) oa.data[j] = 1.0;
  for (std::size_t j = 0; j < 15; ++j) ob.data[15 + j] = 1.0;
  Tensor avg_a({20}, std::vector<double>(20, 0.5)), avg_b({15}, std::vector<double>(15, 0.5));
  const auto orth = cross_term_diagnostic({0, &a.w, &avg_a, &oa}, {1, &b.w, &avg_b, &ob}, 0.3, 20, 3);
  CHECK(orth.ratio == 0.0);
  CHECK(orth.mean_self_i > 0.0);

  const auto r = cross_term_diagnostic({0, &a.w, &a.g, &ga}, {1, &b.w, &b.g, &gb}, 0.3, 100, 3);
  CHECK(std::isfinite(r.ratio));
  CHECK(std::abs(r.ratio) <= 1.0 + 1e-12);  // Cauchy-Schwarz
  CHECK(r.trials == 100);
  const auto again = cross_term_diagnostic({0, &a.w, &a.g, &ga}, {1, &b.w, &b.g, &gb}, 0.3, 100, 3);
  CHECK(again.mean_cross == r.mean_cross);

  CHECK_THROWS_AS(cross_term_diagnostic({0, &a.w, &a.g, &ga}, {0, &a.w, &a.g, &ga}, 0.3, 10, 3), Error);
}
