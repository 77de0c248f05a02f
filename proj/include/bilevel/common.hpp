#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace bilevel {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Parent relation is not a tree rooted at node 0, or node ids are malformed.
struct TopologyError : Error {
  using Error::Error;
};

struct DimensionError : Error {
  using Error::Error;
};

/// Nonpositive price passed where a positive per-unit price is required.
struct PriceDomainError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

/// Iterative solver failed; carries the last iterate and residual summary.
struct SolverError : Error {
  Vec last_iterate;
  double residual = 0.0;
  SolverError(const std::string& msg, Vec iterate, double res)
      : Error(msg), last_iterate(std::move(iterate)), residual(res) {}
};

struct ParseError : Error {
  using Error::Error;
};

/// splitmix64, drawing doubles from the top 53 bits. Used instead of
/// std::uniform_real_distribution so that generated populations are
/// byte-identical for a given seed on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::uint64_t state_;
};

}  // namespace bilevel
