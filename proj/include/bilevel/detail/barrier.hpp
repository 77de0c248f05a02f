#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bilevel/common.hpp"

namespace bilevel::detail {

/// Convex constraint g(x) = x' H x + a' x + b <= 0. H is symmetric PSD and
/// may be empty for linear constraints. `scale` is a characteristic
/// magnitude of g used for feasibility margins; the barrier itself is
/// scale-invariant.
struct QuadCon {
  Mat H;
  Vec a;
  double b = 0.0;
  double scale = 1.0;

  bool quadratic() const { return H.size() > 0; }

  double value(const Vec& x) const {
    double v = a.dot(x) + b;
    if (quadratic()) v += x.dot(H * x);
    return v;
  }

  Vec gradient(const Vec& x) const {
    if (quadratic()) return 2.0 * (H * x) + a;
    return a;
  }
};

/// Smooth constraint given by callbacks, g(x) <= 0. The hessian callback may
/// be empty (treated as zero); a positive-semidefinite approximation is
/// sufficient since the barrier only needs a descent model.
struct GenCon {
  std::function<double(const Vec&)> value;
  std::function<Vec(const Vec&)> gradient;
  std::function<Mat(const Vec&)> hessian;
  double scale = 1.0;
};

struct SmoothObjective {
  std::function<double(const Vec&)> value;
  std::function<Vec(const Vec&)> gradient;
  std::function<Mat(const Vec&)> hessian;
  /// Optional open-domain membership test (beyond the barrier constraints).
  std::function<bool(const Vec&)> in_domain;

  bool domain_ok(const Vec& x) const { return !in_domain || in_domain(x); }
};

struct BarrierOptions {
  double t0 = 1.0;
  double mu = 20.0;
  double t_max = 1e13;
  double newton_tol = 1e-13;  // threshold on decrement^2 / 2
  int max_newton_per_stage = 80;
  /// Stop as soon as this returns true at a centered point (used by phase I).
  std::function<bool(const Vec&)> early_stop;
};

struct BarrierResult {
  Vec x;
  Vec multipliers;  // quads first, then extras; lambda_i = 1/(t (-g_i))
  double gap = 0.0;              // m / t at exit
  double stationarity = 0.0;     // ||grad f + sum lambda_i grad g_i||_inf
  bool converged = false;
  int newton_steps = 0;
  std::string message;
};

inline bool strictly_feasible(const std::vector<QuadCon>& quads,
                              const std::vector<GenCon>& extras, const Vec& x,
                              double margin) {
  for (const QuadCon& c : quads)
    if (c.value(x) > -margin * c.scale) return false;
  for (const GenCon& c : extras)
    if (c.value(x) > -margin * c.scale) return false;
  return true;
}

inline bool strictly_feasible(const std::vector<QuadCon>& quads, const Vec& x,
                              double margin) {
  return strictly_feasible(quads, {}, x, margin);
}

/// Minimizes t f(x) - sum log(-g_i(x)) for increasing t. x0 must be strictly
/// feasible and in the objective domain.
inline BarrierResult barrier_minimize(const SmoothObjective& f,
                                      const std::vector<QuadCon>& quads,
                                      const std::vector<GenCon>& extras, Vec x0,
                                      const BarrierOptions& opt = {}) {
  const int n = static_cast<int>(x0.size());
  const int mq = static_cast<int>(quads.size());
  const int mg = static_cast<int>(extras.size());
  const int m = mq + mg;
  BarrierResult result;
  result.x = std::move(x0);

  auto barrier_value = [&](const Vec& x) {
    double phi = 0.0;
    for (const QuadCon& c : quads) {
      double g = c.value(x);
      if (g >= 0.0) return std::numeric_limits<double>::infinity();
      phi -= std::log(-g);
    }
    for (const GenCon& c : extras) {
      double g = c.value(x);
      if (g >= 0.0) return std::numeric_limits<double>::infinity();
      phi -= std::log(-g);
    }
    return phi;
  };

  Vec x = result.x;
  double t = opt.t0;
  while (true) {
    // Center for the current t by damped Newton.
    for (int it = 0; it < opt.max_newton_per_stage; ++it) {
      Vec grad = t * f.gradient(x);
      Mat hess = t * f.hessian(x);
      auto accumulate = [&](double g, const Vec& cg, const Mat* ch) {
        grad += cg / (-g);
        hess += cg * cg.transpose() / (g * g);
        if (ch && ch->size() > 0) hess += *ch / (-g);
      };
      for (const QuadCon& c : quads) {
        double g = c.value(x);
        Vec cg = c.gradient(x);
        if (c.quadratic()) {
          Mat ch = 2.0 * c.H;
          accumulate(g, cg, &ch);
        } else {
          accumulate(g, cg, nullptr);
        }
      }
      for (const GenCon& c : extras) {
        double g = c.value(x);
        Vec cg = c.gradient(x);
        if (c.hessian) {
          Mat ch = c.hessian(x);
          accumulate(g, cg, &ch);
        } else {
          accumulate(g, cg, nullptr);
        }
      }

      Eigen::LLT<Mat> llt(hess);
      Vec step;
      if (llt.info() == Eigen::Success) {
        step = llt.solve(-grad);
      } else {
        Mat reg = hess + Mat::Identity(n, n) * (1e-12 * (1.0 + hess.trace() / n));
        step = Eigen::LDLT<Mat>(reg).solve(-grad);
      }

      double decrement2 = -grad.dot(step);
      if (!(decrement2 > 0.0)) break;  // numerically converged or stalled
      if (0.5 * decrement2 <= opt.newton_tol) break;

      // Backtracking: stay strictly feasible and in domain, then Armijo.
      double f0 = t * f.value(x) + barrier_value(x);
      double slope = grad.dot(step);
      double alpha = 1.0;
      bool moved = false;
      for (int ls = 0; ls < 60; ++ls) {
        Vec cand = x + alpha * step;
        bool ok = f.domain_ok(cand);
        for (int i = 0; ok && i < mq; ++i) ok = quads[i].value(cand) < 0.0;
        for (int i = 0; ok && i < mg; ++i) ok = extras[i].value(cand) < 0.0;
        if (ok) {
          double fc = t * f.value(cand) + barrier_value(cand);
          // absolute slack covers cancellation noise in t*f at large t
          if (fc <= f0 + 0.25 * alpha * slope + 1e-14 * std::abs(f0)) {
            x = cand;
            moved = true;
            break;
          }
        }
        alpha *= 0.5;
      }
      ++result.newton_steps;
      if (!moved) break;
    }

    if (opt.early_stop && opt.early_stop(x)) {
      result.x = x;
      result.converged = true;
      result.message = "early stop";
      break;
    }
    if (t >= opt.t_max || m == 0) {
      result.x = x;
      result.converged = true;
      break;
    }
    t = std::min(t * opt.mu, opt.t_max);
  }

  result.gap = (m > 0 && t > 0.0) ? static_cast<double>(m) / t : 0.0;
  result.multipliers = Vec::Zero(m);
  Vec kkt = f.gradient(result.x);
  for (int i = 0; i < m; ++i) {
    double g = i < mq ? quads[i].value(result.x) : extras[i - mq].value(result.x);
    Vec cg = i < mq ? quads[i].gradient(result.x) : extras[i - mq].gradient(result.x);
    double lambda = (g < 0.0) ? 1.0 / (t * (-g)) : 0.0;
    result.multipliers[i] = lambda;
    kkt += lambda * cg;
  }
  result.stationarity = kkt.size() > 0 ? kkt.cwiseAbs().maxCoeff() : 0.0;
  return result;
}

inline BarrierResult barrier_minimize(const SmoothObjective& f,
                                      const std::vector<QuadCon>& quads, Vec x0,
                                      const BarrierOptions& opt = {}) {
  return barrier_minimize(f, quads, {}, std::move(x0), opt);
}

/// Finds a strictly feasible point for the constraints by minimizing the
/// worst scaled residual. Returns nullopt when the interior is (numerically)
/// empty.
inline std::optional<Vec> phase_one(const std::vector<QuadCon>& quads,
                                    const std::vector<GenCon>& extras, const Vec& x0,
                                    double target_margin = 1e-9) {
  const int n = static_cast<int>(x0.size());
  const int m = static_cast<int>(quads.size() + extras.size());
  if (m == 0) return x0;

  // Extended problem over (x, s): minimize s subject to g_i(x)/scale_i <= s.
  std::vector<QuadCon> ext_quads;
  ext_quads.reserve(quads.size());
  for (const QuadCon& c : quads) {
    QuadCon e;
    e.a = Vec::Zero(n + 1);
    e.a.head(n) = c.a / c.scale;
    e.a[n] = -1.0;
    e.b = c.b / c.scale;
    e.scale = 1.0;
    if (c.quadratic()) {
      e.H = Mat::Zero(n + 1, n + 1);
      e.H.topLeftCorner(n, n) = c.H / c.scale;
    }
    ext_quads.push_back(std::move(e));
  }
  std::vector<GenCon> ext_extras;
  ext_extras.reserve(extras.size());
  for (const GenCon& gc : extras) {
    const GenCon* cp = &gc;  // extras outlives this call
    GenCon e;
    double scale = gc.scale;
    e.value = [cp, scale, n](const Vec& z) { return cp->value(z.head(n)) / scale - z[n]; };
    e.gradient = [cp, scale, n](const Vec& z) {
      Vec g = Vec::Zero(n + 1);
      g.head(n) = cp->gradient(z.head(n)) / scale;
      g[n] = -1.0;
      return g;
    };
    if (gc.hessian)
      e.hessian = [cp, scale, n](const Vec& z) {
        Mat h = Mat::Zero(n + 1, n + 1);
        h.topLeftCorner(n, n) = cp->hessian(z.head(n)) / scale;
        return h;
      };
    e.scale = 1.0;
    ext_extras.push_back(std::move(e));
  }

  double worst = -std::numeric_limits<double>::infinity();
  for (const QuadCon& c : quads) worst = std::max(worst, c.value(x0) / c.scale);
  for (const GenCon& c : extras) worst = std::max(worst, c.value(x0) / c.scale);

  Vec z0(n + 1);
  z0.head(n) = x0;
  z0[n] = worst + 1.0;

  SmoothObjective slack;
  slack.value = [n](const Vec& z) { return z[n]; };
  slack.gradient = [n](const Vec& z) {
    Vec g = Vec::Zero(z.size());
    g[n] = 1.0;
    return g;
  };
  slack.hessian = [](const Vec& z) { return Mat::Zero(z.size(), z.size()); };

  BarrierOptions opt;
  opt.t0 = 1.0;
  opt.t_max = 1e12;
  opt.early_stop = [&](const Vec& z) { return z[n] < -10.0 * target_margin; };

  BarrierResult res = barrier_minimize(slack, ext_quads, ext_extras, z0, opt);
  double s = res.x[n];
  if (s >= -target_margin) return std::nullopt;
  Vec x = res.x.head(n);
  if (!strictly_feasible(quads, extras, x, target_margin)) return std::nullopt;
  return x;
}

inline std::optional<Vec> phase_one(const std::vector<QuadCon>& quads, const Vec& x0,
                                    double target_margin = 1e-9) {
  return phase_one(quads, {}, x0, target_margin);
}

/// Least-squares refit of the active multipliers at a solution point. The
/// barrier's 1/(t(-g)) estimates lose precision when |g| sits near the
/// cancellation floor; the certificate only needs some valid multipliers.
struct MultiplierFit {
  Vec multipliers;      // refitted, clipped to be nonnegative
  double stationarity;  // ||grad f + sum mu_i grad g_i||_inf
};

inline MultiplierFit refit_multipliers(const Vec& grad_f,
                                       const std::vector<Vec>& active_gradients,
                                       const std::vector<int>& active_index, int m_total) {
  MultiplierFit fit;
  fit.multipliers = Vec::Zero(m_total);
  Vec residual = grad_f;
  if (!active_gradients.empty()) {
    const int n = static_cast<int>(grad_f.size());
    const int ma = static_cast<int>(active_gradients.size());
    Mat jac(n, ma);
    for (int i = 0; i < ma; ++i) jac.col(i) = active_gradients[i];
    Vec mu = jac.colPivHouseholderQr().solve(-grad_f);
    for (int i = 0; i < ma; ++i) mu[i] = std::max(mu[i], 0.0);
    residual = grad_f + jac * mu;
    for (int i = 0; i < ma; ++i) fit.multipliers[active_index[i]] = mu[i];
  }
  fit.stationarity = residual.size() > 0 ? residual.cwiseAbs().maxCoeff() : 0.0;
  return fit;
}

}  // namespace bilevel::detail
