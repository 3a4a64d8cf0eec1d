#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>

#include "oracles.hpp"
#include "tinc/gradcheck.hpp"
#include "tinc/losses.hpp"

using namespace tinc;
using namespace tinc::losses;

namespace {

Matrix rand_batch(Rng& rng, int n, int d, double scale = 1.0) {
  return Matrix::NullaryExpr(n, d, [&] { return uniform(rng, -scale, scale); });
}

Vector rand_dv(Rng& rng, int n) {
  return Vector::NullaryExpr(n, [&] { return uniform(rng, 0.0, 1.0); });
}

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(rows.size(), rows.begin()->size());
  int i = 0;
  for (auto r : rows) {
    int j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

std::string error_of(auto&& fn) {
  try {
    fn();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("invariance term") {
  Rng rng(1);
  const Matrix z = rand_batch(rng, 5, 3);
  CHECK(invariance_term(z, z) == 0.0);
  CHECK(invariance_term(mat({{1, 2}}), mat({{0, 0}})) == 5.0);

  const Matrix a = rand_batch(rng, 8, 6), b = rand_batch(rng, 8, 6);
  CHECK(invariance_term(a, b) == invariance_term(b, a));
  CHECK(invariance_term(a, b) >= 0.0);

  const auto msg = error_of([] { invariance_term(Matrix::Zero(2, 3), Matrix::Zero(3, 3)); });
  CHECK(msg.find("2x3") != std::string::npos);
  CHECK(msg.find("3x3") != std::string::npos);

  Matrix bad = Matrix::Zero(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(invariance_term(bad, Matrix::Zero(2, 2)), ValidationError);
}

TEST_CASE("variance term") {
  // Every dimension takes the values {0, 2}: std sqrt(2) > 1.
  CHECK(variance_term(mat({{0, 0, 0}, {2, 2, 2}}), 1.0, 0.0) == 0.0);
  CHECK(variance_term(Matrix::Constant(4, 3, 0.7), 1.0, 1e-4) == doctest::Approx(0.99).epsilon(1e-14));

  Rng rng(2);
  const Matrix wide = rand_batch(rng, 10, 4, 10.0);
  CHECK(variance_term(wide, 1.0, 1e-4) == 0.0);

  for (int k = 0; k < 50; ++k) {
    const Matrix z = rand_batch(rng, 6, 5, uniform(rng, 0.0, 2.0));
    const double v = variance_term(z, 1.0, 1e-4);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  const auto msg = error_of([] { variance_term(Matrix::Zero(1, 3), 1.0, 1e-4); });
  CHECK(msg.find("batch too small for variance term") != std::string::npos);
}

TEST_CASE("covariance term") {
  // Orthogonal, centred columns have zero sample covariance.
  const Matrix orth = mat({{1, 1}, {1, -1}, {-1, 1}, {-1, -1}});
  CHECK(covariance_term(orth) == 0.0);

  const Matrix z = mat({{1, 1}, {-1, -1}});
  CHECK(covariance_term(z) == 4.0);
  Matrix swapped = z;
  swapped.col(0).swap(swapped.col(1));
  CHECK(covariance_term(swapped) == 4.0);

  Rng rng(3);
  const Matrix r = rand_batch(rng, 9, 5);
  Matrix perm(r.rows(), r.cols());
  const int order[] = {3, 0, 4, 1, 2};
  for (int j = 0; j < 5; ++j) perm.col(j) = r.col(order[j]);
  CHECK(covariance_term(perm) == doctest::Approx(covariance_term(r)).epsilon(1e-12));
  const Matrix shifted = r.rowwise() + Eigen::RowVectorXd::Constant(5, 3.5);
  CHECK(covariance_term(shifted) == doctest::Approx(covariance_term(r)).epsilon(1e-10));
  CHECK_THROWS_AS(covariance_term(Matrix::Zero(1, 2)), ValidationError);
}

TEST_CASE("tinc term") {
  const Matrix z1 = mat({{1, 2}}), z2 = mat({{0, 0}});
  CHECK(tinc_term(z1, z2, Vector::Constant(1, 0.5)) == 4.5);

  // Squared distance 0.3 sits inside a 0.5 margin.
  const Matrix near = mat({{std::sqrt(0.3), 0.0}});
  CHECK(tinc_term(near, mat({{0, 0}}), Vector::Constant(1, 0.5)) == 0.0);

  Rng rng(4);
  const Matrix a = rand_batch(rng, 8, 6), b = rand_batch(rng, 8, 6);
  CHECK(tinc_term(a, b, Vector::Zero(8)) == invariance_term(a, b));

  CHECK_THROWS_AS(tinc_term(a, b, Vector::Zero(7)), ValidationError);
  Vector out_of_range = Vector::Zero(8);
  out_of_range[3] = 1.5;
  CHECK_THROWS_AS(tinc_term(a, b, out_of_range), ValidationError);
  out_of_range[3] = -0.1;
  CHECK_THROWS_AS(tinc_term(a, b, out_of_range), ValidationError);
}

TEST_CASE("tinc squared term") {
  CHECK(tinc_squared_term(mat({{1, 2}}), mat({{0, 0}}), Vector::Constant(1, 0.5)) == 20.25);
  CHECK(tinc_squared_term(mat({{0.1, 0.1}}), mat({{0, 0}}), Vector::Constant(1, 0.5)) == 0.0);
  const Matrix a = mat({{1, 1, 1}}), b = mat({{0, 0, 0}});
  CHECK(tinc_squared_term(a, b, Vector::Zero(1)) == 9.0);
  CHECK_THROWS_AS(tinc_squared_term(a, b, Vector::Zero(2)), ValidationError);
}

TEST_CASE("tinc algebraic properties on random batches") {
  Rng rng(5);
  for (int k = 0; k < 1000; ++k) {
    const int n = 2 + static_cast<int>(uniform_index(rng, 15));
    const int d = 1 + static_cast<int>(uniform_index(rng, 8));
    const Matrix a = rand_batch(rng, n, d, 0.5), b = rand_batch(rng, n, d, 0.5);
    const Vector dv = rand_dv(rng, n);
    const double t = tinc_term(a, b, dv), inv = invariance_term(a, b);
    REQUIRE(t >= 0.0);
    REQUIRE(t <= inv);
    REQUIRE(tinc_term(a, b, Vector::Zero(n)) == inv);
    REQUIRE(tinc_term(b, a, dv) == t);
    Vector raised = dv;
    const auto i = uniform_index(rng, static_cast<std::size_t>(n));
    raised[i] = uniform(rng, dv[i], 1.0);
    REQUIRE(tinc_term(a, b, raised) <= t);
  }
}

TEST_CASE("vicreg loss composition") {
  LossConfig cfg;  // 25 / 5 / 1
  const Matrix same = Matrix::Constant(4, 3, 0.2);
  const auto parts = vicreg_loss(same, same, cfg);
  CHECK(parts.invariance == 0.0);
  CHECK(parts.covariance == 0.0);
  CHECK(parts.variance == doctest::Approx(2 * (1.0 - std::sqrt(1e-4))).epsilon(1e-14));
  CHECK(parts.total == doctest::Approx(5.0 * parts.variance).epsilon(1e-14));

  Rng rng(6);
  const Matrix a = rand_batch(rng, 8, 6), b = rand_batch(rng, 8, 6);
  LossConfig inv_only;
  inv_only.lambda_inv = 1.0;
  inv_only.mu_var = 0.0;
  inv_only.nu_cov = 0.0;
  CHECK(vicreg_loss(a, b, inv_only).total == invariance_term(a, b));

  const auto full = vicreg_loss(a, b, cfg);
  CHECK(std::abs(vicreg_recombine(full, cfg) - full.total) <= 1e-10);

  LossConfig tc = cfg;
  tc.similarity_variant = SimilarityVariant::tinc;
  CHECK_THROWS_AS(vicreg_loss(a, b, tc), ValidationError);
  const Vector dv = rand_dv(rng, 8);
  const auto with_margin = vicreg_loss(a, b, tc, dv);
  CHECK(with_margin.invariance == tinc_term(a, b, dv));
  // tinc <= invariance termwise, so the total never exceeds plain VICReg.
  CHECK(with_margin.total <= full.total);
}

TEST_CASE("loss config validation") {
  LossConfig c;
  CHECK_NOTHROW(c.validate());
  c.gamma = 0.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.mu_var = -1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.dv_min_days = 540;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK(similarity_variant_from_string("tinc_squared") == SimilarityVariant::tinc_squared);
  CHECK_THROWS_AS(similarity_variant_from_string("huber"), ValidationError);
}

TEST_CASE("barlow twins") {
  Rng rng(7);
  const Matrix z = rand_batch(rng, 8, 4);
  const auto same = barlow_twins_loss(z, z, 0.005, 0.0);
  CHECK(same.invariance == doctest::Approx(0.0).epsilon(1e-24));
  CHECK(same.total == doctest::Approx(0.005 * same.covariance).epsilon(1e-12));
  CHECK(barlow_twins_loss(z, z, 0.0, 0.0).total == doctest::Approx(0.0).scale(1.0).epsilon(1e-20));

  const Matrix col = rand_batch(rng, 6, 1);
  CHECK(barlow_twins_loss(col, -col, 0.005, 0.0).total == doctest::Approx(4.0).epsilon(1e-12));

  const Matrix other = rand_batch(rng, 8, 4);
  CHECK(barlow_twins_loss(z, other, 0.005).total == doctest::Approx(barlow_twins_loss(other, z, 0.005).total).epsilon(1e-12));

  Matrix flat = rand_batch(rng, 5, 3);
  flat.col(1).setConstant(0.4);
  CHECK_THROWS_AS(barlow_twins_loss(flat, rand_batch(rng, 5, 3), 0.005, 0.0), ValidationError);
}

TEST_CASE("time head loss") {
  const Vector p = Vector::LinSpaced(4, -1.0, 1.0);
  CHECK(time_head_loss(p, p) == 0.0);
  CHECK(time_head_loss(Vector::Zero(1), Vector::Ones(1)) == 1.0);
  Vector pred(2), lab(2);
  pred << 0.5, -0.5;
  lab << 1.0, 0.0;
  CHECK(time_head_loss(pred, lab) == 0.25);
  CHECK_THROWS_AS(time_head_loss(pred, Vector::Zero(3)), ValidationError);
}

TEST_CASE("vectorized losses match brute-force definitions") {
  Rng rng(8);
  for (int k = 0; k < 100; ++k) {
    const int n = 2 + static_cast<int>(uniform_index(rng, 15));
    const int d = 1 + static_cast<int>(uniform_index(rng, 8));
    const Matrix a = rand_batch(rng, n, d), b = rand_batch(rng, n, d);
    const Vector dv = rand_dv(rng, n);
    REQUIRE(std::abs(invariance_term(a, b) - oracle::invariance(a, b)) <= 1e-10);
    REQUIRE(std::abs(variance_term(a, 1.0, 1e-4) - oracle::variance(a, 1.0, 1e-4)) <= 1e-10);
    REQUIRE(std::abs(covariance_term(a) - oracle::covariance(a)) <= 1e-10);
    REQUIRE(std::abs(tinc_term(a, b, dv) - oracle::tinc(a, b, dv)) <= 1e-10);
    REQUIRE(std::abs(tinc_squared_term(a, b, dv) - oracle::tinc_squared(a, b, dv)) <= 1e-10);
    REQUIRE(std::abs(barlow_twins_loss(a, b, 0.005).total - oracle::barlow_twins(a, b, 0.005, 1e-12)) <= 1e-10);
    const Vector pred = rand_dv(rng, n), lab = rand_dv(rng, n);
    REQUIRE(std::abs(time_head_loss(pred, lab) - oracle::time_head(pred, lab)) <= 1e-10);
  }
}

TEST_CASE("gradient examples") {
  const Matrix z = Matrix::Constant(3, 2, 0.3);
  CHECK(invariance_grad(z, z).dz1.isZero(0.0));

  const auto g = invariance_grad(mat({{1, 2}}), mat({{0, 0}}));
  CHECK(g.dz1 == mat({{2, 4}}));
  CHECK(g.dz2 == mat({{-2, -4}}));

  Rng rng(9);
  const Matrix a = rand_batch(rng, 5, 3, 0.01), b = rand_batch(rng, 5, 3, 0.01);
  const auto inside = tinc_grad(a, b, Vector::Ones(5));
  CHECK(inside.dz1.isZero(0.0));
  CHECK(inside.dz2.isZero(0.0));
}

TEST_CASE("finite differences agree with analytic gradients") {
  for (auto id : all_loss_ids()) {
    CAPTURE(to_string(id));
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto rep = finite_difference_check(id, random_loss_inputs(s, 8, 6), 1e-5, 1e-4);
      REQUIRE(rep.passed);
      REQUIRE(rep.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("finite differences on a flat tinc batch") {
  LossInputs in;
  Rng rng(10);
  in.z1 = rand_batch(rng, 4, 3, 0.01);
  in.z2 = rand_batch(rng, 4, 3, 0.01);
  in.dv = Vector::Ones(4);
  const auto rep = finite_difference_check(LossId::tinc, in, 1e-5, 1e-4);
  CHECK(rep.max_rel_error == 0.0);
  for (const auto& input : rep.inputs) CHECK(input.stats.checked + input.stats.excluded == 12u);
}

TEST_CASE("finite differences exclude coordinates next to a hinge") {
  LossInputs in;
  in.z1 = mat({{1.0, 0.0}, {0.0, 1.0}});
  in.z2 = Matrix::Zero(2, 2);
  // Pair 0 sits exactly on its margin.
  in.dv = Vector::Zero(2);
  in.dv[0] = 1.0;
  const auto rep = finite_difference_check(LossId::tinc, in, 1e-5, 1e-4);
  CHECK(rep.inputs[0].stats.excluded > 0u);
  CHECK(rep.passed);
}

TEST_CASE("finite differences catch a wrong gradient") {
  auto wrong = [](LossId id, const LossInputs& in) {
    auto g = loss_gradient(id, in);
    for (auto& m : g) m *= 1.5;
    return g;
  };
  const auto rep = finite_difference_check(LossId::vicreg, random_loss_inputs(3, 8, 6), 1e-5, 1e-4, wrong);
  CHECK_FALSE(rep.passed);
  CHECK(rep.max_rel_error > 0.3);
  CHECK_THROWS_AS(finite_difference_check(LossId::invariance, random_loss_inputs(3, 8, 6), 0.0, 1e-4), ValidationError);
}
