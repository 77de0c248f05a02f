#include <catch2/catch_amalgamated.hpp>

#include "bilevel/agents.hpp"
#include "bilevel/common.hpp"

using namespace bilevel;
using namespace bilevel::agents;

TEST_CASE("buyer best response") {
  SECTION("interior: marginal utility equals the price") {
    Buyer b(1.0, 1.0);
    auto r = buyer_best_response(b, 0.5);
    CHECK(r.demand == Catch::Approx(1.0));
    CHECK(r.bid == Catch::Approx(0.5));
  }
  SECTION("corner: price above the zero-consumption marginal") {
    Buyer b(1.0, 1.0);
    CHECK(buyer_best_response(b, 1.0).demand == 0.0);
    CHECK(buyer_best_response(b, 2.5).demand == 0.0);
  }
  SECTION("closed form cross-checked against the marginal") {
    Buyer b(2.0, 3.0);
    auto r = buyer_best_response(b, 1.0);
    CHECK(r.demand == Catch::Approx(5.0 / 3.0));
    CHECK(utility_marginal(b.utility, r.demand) == Catch::Approx(1.0));
    // finite-difference check of the marginal at the optimum
    double h = 1e-6;
    double fd = (utility_value(b.utility, r.demand + h) -
                 utility_value(b.utility, r.demand - h)) / (2 * h);
    CHECK(fd == Catch::Approx(1.0).epsilon(1e-6));
  }
  SECTION("nonpositive price is a domain error") {
    Buyer b(1.0, 1.0);
    CHECK_THROWS_AS(buyer_best_response(b, 0.0), PriceDomainError);
    CHECK_THROWS_AS(buyer_best_response(b, -1.0), PriceDomainError);
  }
}

TEST_CASE("seller best response") {
  SECTION("interior: retained marginal equals the price") {
    Seller s(1.0, 1.0, 2.0);
    auto r = seller_best_response(s, 0.5);
    CHECK(r.supply == Catch::Approx(1.0));
    CHECK(r.multiplier == 0.0);
    CHECK(utility_marginal(s.utility, s.g - r.supply) == Catch::Approx(0.5));
  }
  SECTION("capacity-saturated corner") {
    Seller s(1.0, 1.0, 2.0);
    auto r = seller_best_response(s, 2.0);
    CHECK(r.supply == Catch::Approx(2.0));
    CHECK(r.multiplier == Catch::Approx(1.0));  // c - x y
  }
  SECTION("keeps everything when retention is worth more") {
    Seller s(5.0, 1.0, 0.2);
    auto r = seller_best_response(s, 1.0);
    CHECK(r.supply == 0.0);
    CHECK(utility_marginal(s.utility, s.g) >= 1.0);
  }
  SECTION("payoff optimality against a 1-D grid") {
    Rng rng(19);
    for (int t = 0; t < 30; ++t) {
      Seller s(rng.uniform(0.5, 5.0), rng.uniform(0.5, 5.0), rng.uniform(0.1, 2.0));
      double c = rng.uniform(0.2, 6.0);
      auto r = seller_best_response(s, c);
      auto payoff = [&](double supply) {
        return utility_value(s.utility, s.g - supply) + c * supply;
      };
      double best = payoff(r.supply);
      const int grid = 100000;
      for (int i = 0; i <= grid; ++i) {
        double cand = s.g * i / grid;
        CHECK(payoff(cand) <= best + 1e-8);
        if (payoff(cand) > best + 1e-8) break;
      }
      CHECK(r.multiplier * (r.supply - s.g) == 0.0);  // complementarity
    }
  }
}

TEST_CASE("buyer payoff optimality and monotonicity") {
  Rng rng(23);
  for (int t = 0; t < 30; ++t) {
    Buyer b(rng.uniform(0.5, 5.0), rng.uniform(0.5, 5.0));
    double c = rng.uniform(0.2, 6.0);
    auto r = buyer_best_response(b, c);
    auto payoff = [&](double d) { return utility_value(b.utility, d) - c * d; };
    double best = payoff(r.demand);
    double hi = std::max(1.0, 3.0 * r.demand);
    const int grid = 100000;
    for (int i = 0; i <= grid; ++i) {
      double cand = hi * i / grid;
      if (payoff(cand) > best + 1e-8) {
        FAIL("grid found a better demand");
        break;
      }
    }
    // demand nonincreasing, supply nondecreasing in price
    Seller s(rng.uniform(0.5, 5.0), rng.uniform(0.5, 5.0), rng.uniform(0.1, 2.0));
    double c2 = c * rng.uniform(1.05, 2.0);
    CHECK(buyer_best_response(b, c2).demand <= r.demand + 1e-12);
    CHECK(seller_best_response(s, c2).supply >= seller_best_response(s, c).supply - 1e-12);
  }
}

TEST_CASE("utility evaluation") {
  Buyer b(1.0, 1.0);
  CHECK(utility_eval(b.utility, 0.0).value == 0.0);
  CHECK(utility_eval(b.utility, std::exp(1.0) - 1.0).value == Catch::Approx(1.0));
  CHECK_THROWS_AS(utility_eval(b.utility, -0.1), Error);

  SECTION("analytic derivative matches central differences") {
    Rng rng(31);
    for (int t = 0; t < 40; ++t) {
      Utility u = LogUtility{rng.uniform(0.5, 5.0), rng.uniform(0.5, 5.0)};
      double q = rng.uniform(0.01, 3.0);
      double h = 1e-6 * std::max(1.0, q);
      double fd = (utility_value(u, q + h) - utility_value(u, q - h)) / (2 * h);
      CHECK(utility_eval(u, q).marginal ==
            Catch::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("quadratic utility family") {
  QuadraticUtility q{4.0, 2.0};
  Utility u = q;
  CHECK(utility_value(u, 1.0) == Catch::Approx(3.0));
  CHECK(utility_marginal(u, 1.0) == Catch::Approx(2.0));
  CHECK(inverse_marginal(u, 2.0) == Catch::Approx(1.0));
  CHECK(utility_saturation(u) == Catch::Approx(2.0));

  Buyer b{u};
  auto r = buyer_best_response(b, 2.0);
  CHECK(r.demand == Catch::Approx(1.0));

  Seller s{u, 1.5};
  auto sr = seller_best_response(s, 3.0);
  // retained solves 4 - 2r = 3 -> r = 0.5, supply = 1.0
  CHECK(sr.supply == Catch::Approx(1.0));
}
