#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <variant>

#include "bilevel/common.hpp"

namespace bilevel::agents {

/// u(q) = x log(y q + 1); strictly concave increasing on q >= 0.
struct LogUtility {
  double x = 1.0;  // scale, cents
  double y = 1.0;  // curvature, 1/pu

  double value(double q) const { return x * std::log(y * q + 1.0); }
  double marginal(double q) const { return x * y / (y * q + 1.0); }
  double second(double q) const {
    double m = y * q + 1.0;
    return -x * y * y / (m * m);
  }
  /// Solves marginal(q) = c; negative results mean the corner q = 0.
  double inverse_marginal(double c) const { return (x * y / c - 1.0) / y; }
  /// Largest quantity with positive marginal utility (unbounded here).
  double saturation() const { return std::numeric_limits<double>::infinity(); }
};

/// u(q) = a q - b q^2 / 2; the quadratic family of the convergence analysis.
struct QuadraticUtility {
  double a = 1.0;  // cents/pu
  double b = 1.0;  // cents/pu^2

  double value(double q) const { return a * q - 0.5 * b * q * q; }
  double marginal(double q) const { return a - b * q; }
  double second(double) const { return -b; }
  double inverse_marginal(double c) const { return (a - c) / b; }
  double saturation() const { return a / b; }
};

using Utility = std::variant<LogUtility, QuadraticUtility>;

inline double utility_value(const Utility& u, double q) {
  return std::visit([q](const auto& f) { return f.value(q); }, u);
}
inline double utility_marginal(const Utility& u, double q) {
  return std::visit([q](const auto& f) { return f.marginal(q); }, u);
}
inline double inverse_marginal(const Utility& u, double c) {
  return std::visit([c](const auto& f) { return f.inverse_marginal(c); }, u);
}
inline double utility_second(const Utility& u, double q) {
  return std::visit([q](const auto& f) { return f.second(q); }, u);
}
inline double utility_saturation(const Utility& u) {
  return std::visit([](const auto& f) { return f.saturation(); }, u);
}
/// Marginal utility at zero consumption: the highest price the owner pays.
inline double marginal_at_zero(const Utility& u) { return utility_marginal(u, 0.0); }

/// Private buyer parameters; never crosses the auction message boundary.
struct Buyer {
  Utility utility{LogUtility{}};

  Buyer() = default;
  Buyer(double x, double y) : utility(LogUtility{x, y}) {}
  explicit Buyer(Utility u) : utility(std::move(u)) {}
};

/// Private seller parameters. g is the generation capacity in pu.
struct Seller {
  Utility utility{LogUtility{}};
  double g = 0.0;

  Seller() = default;
  Seller(double x, double y, double cap) : utility(LogUtility{x, y}), g(cap) {}
  Seller(Utility u, double cap) : utility(std::move(u)), g(cap) {}
};

struct BuyerResponse {
  double demand = 0.0;  // pu
  double bid = 0.0;     // cents
};

/// Price-taking best response: u'(d) = c when interior, d = 0 otherwise.
/// The bid b = c d makes proportional allocation return exactly d.
inline BuyerResponse buyer_best_response(const Buyer& buyer, double price) {
  if (price <= 0.0) throw PriceDomainError("buyer best response needs a positive price");
  double d = std::max(0.0, inverse_marginal(buyer.utility, price));
  return {d, price * d};
}

struct SellerResponse {
  double supply = 0.0;      // pu
  double multiplier = 0.0;  // gamma: capacity-constraint dual, cents/pu
};

/// Maximizes v(g - s) + c s over 0 <= s <= g. Interior: v'(g - s) = c.
/// At s = g the capacity multiplier gamma = c - v'(0) is nonnegative.
inline SellerResponse seller_best_response(const Seller& seller, double price) {
  if (price <= 0.0) throw PriceDomainError("seller best response needs a positive price");
  double retained = inverse_marginal(seller.utility, price);
  double s = std::clamp(seller.g - retained, 0.0, seller.g);
  double gamma = (s >= seller.g) ? std::max(0.0, price - marginal_at_zero(seller.utility)) : 0.0;
  return {s, gamma};
}

struct UtilityEval {
  double value = 0.0;     // cents
  double marginal = 0.0;  // cents/pu
};

inline UtilityEval utility_eval(const Utility& u, double quantity) {
  if (quantity < 0.0) throw Error("utility_eval: negative quantity");
  return {utility_value(u, quantity), utility_marginal(u, quantity)};
}

}  // namespace bilevel::agents
