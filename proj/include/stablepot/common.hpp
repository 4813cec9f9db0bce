// stablepot: potential theory of symmetric alpha-stable processes.
//
// Core value types, error taxonomy and small numerical utilities shared by
// every module. Everything here is pure and thread-safe.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace stablepot {

// A point of R^n. Dimension is runtime (n >= 1).
using Point = std::vector<double>;

// Inputs that violate a contract (bad parameters, malformed configs).
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Numeric failure states: non-contraction, divergence, envelope failure.
// These are honest "the computation could not certify a value" outcomes,
// distinct from caller mistakes.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension n >= 1 and stability index alpha in the open interval (0,2).
// alpha = 2 (Brownian motion) is excluded.
struct StableIndex {
  int n = 0;
  double alpha = 0.0;

  StableIndex() = default;
  StableIndex(int n_, double alpha_) : n(n_), alpha(alpha_) { validate(); }

  void validate() const {
    if (n < 1) throw ValidationError("StableIndex: dimension n must be >= 1");
    if (!(alpha > 0.0 && alpha < 2.0))
      throw ValidationError(
          "StableIndex: alpha must lie in the open interval (0,2)");
  }

  // Whole-space potential exists only when n > alpha.
  bool transient() const { return static_cast<double>(n) > alpha; }
};

inline constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// Small vector helpers. Points are plain std::vector<double>; hot loops
// mutate in place to avoid allocation.

inline void check_dim(const Point& p, int n, const char* who) {
  if (static_cast<int>(p.size()) != n)
    throw ValidationError(std::string(who) + ": dimension mismatch");
}

inline double dot(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Point& a) { return dot(a, a); }
inline double norm(const Point& a) { return std::sqrt(norm2(a)); }

inline double dist2(const Point& a, const Point& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double dist(const Point& a, const Point& b) {
  return std::sqrt(dist2(a, b));
}

inline Point sub(const Point& a, const Point& b) {
  Point r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

inline Point add(const Point& a, const Point& b) {
  Point r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

inline Point scaled(const Point& a, double c) {
  Point r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = c * a[i];
  return r;
}

// r = a + c*u
inline void axpy(Point& r, const Point& a, double c, const Point& u) {
  r.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + c * u[i];
}

inline void normalize(Point& a) {
  const double m = norm(a);
  if (m == 0.0) throw NumericError("normalize: zero vector");
  for (auto& x : a) x /= m;
}

// ---------------------------------------------------------------------------
// Gamma-function derived geometry constants.

// Surface area of the unit sphere S^{n-1} in R^n.  omega_{n-1} = 2 pi^{n/2} / Gamma(n/2).
inline double sphere_area(int n) {
  return 2.0 * std::pow(kPi, 0.5 * n) / std::tgamma(0.5 * n);
}

// Volume of the unit ball in R^n.
inline double ball_volume(int n) { return sphere_area(n) / n; }

// ---------------------------------------------------------------------------
// Gauss-Legendre nodes/weights on [-1,1], computed once per order by Newton
// iteration on the Legendre recurrence and cached.

struct GaussRule {
  std::vector<double> x, w;
};

inline const GaussRule& gauss_legendre(int k) {
  static std::map<int, GaussRule> cache;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(k);
  if (it != cache.end()) return it->second;

  GaussRule r;
  r.x.resize(k);
  r.w.resize(k);
  for (int i = 0; i < k; ++i) {
    // Chebyshev-based initial guess for the i-th root.
    double x = std::cos(kPi * (i + 0.75) / (k + 0.5));
    double p1 = 0.0;
    for (int it2 = 0; it2 < 100; ++it2) {
      p1 = 1.0;
      double p2 = 0.0;
      for (int j = 0; j < k; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = ((2.0 * j + 1.0) * x * p2 - j * p3) / (j + 1.0);
      }
      const double dp = k * (x * p1 - p2) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-15) break;
    }
    double p2 = 0.0;
    {
      p1 = 1.0;
      for (int j = 0; j < k; ++j) {
        const double p3 = p2;
        p2 = p1;
        p1 = ((2.0 * j + 1.0) * x * p2 - j * p3) / (j + 1.0);
      }
    }
    const double dp = k * (x * p1 - p2) / (x * x - 1.0);
    r.x[i] = x;
    r.w[i] = 2.0 / ((1.0 - x * x) * dp * dp);
  }
  return cache.emplace(k, std::move(r)).first->second;
}

// Integrate f over [a,b] with one k-point Gauss-Legendre panel.
template <class F>
double gauss_panel(F&& f, double a, double b, int k = 16) {
  const GaussRule& g = gauss_legendre(k);
  const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  double s = 0.0;
  for (int i = 0; i < k; ++i) s += g.w[i] * f(mid + half * g.x[i]);
  return s * half;
}

// Integrate f over [a,b] on panels geometrically graded toward a
// (panel widths shrink by `ratio` toward the endpoint). Robust for
// endpoint singularities of integrable power type.
template <class F>
double graded_panels(F&& f, double a, double b, int layers, double ratio = 0.5,
                     int k = 16) {
  if (!(b > a)) return 0.0;
  double s = 0.0;
  double hi = b;
  double width = (b - a) * (1.0 - ratio);
  for (int l = 0; l < layers - 1; ++l) {
    const double lo = hi - width;
    s += gauss_panel(f, lo, hi, k);
    hi = lo;
    width *= ratio;
  }
  s += gauss_panel(f, a, hi, k);
  return s;
}

// ---------------------------------------------------------------------------
// Quadrature rule over the unit sphere S^{n-1}; weights sum to sphere_area(n).
// n = 1: the two endpoints. n = 2: uniform angles (trapezoid, spectrally
// accurate for periodic integrands). n = 3: Gauss-Legendre in cos(theta)
// times uniform azimuth.

struct SphereRule {
  std::vector<Point> dirs;
  std::vector<double> weights;
};

inline SphereRule sphere_rule(int n, int level) {
  SphereRule r;
  if (n == 1) {
    r.dirs = {Point{1.0}, Point{-1.0}};
    r.weights = {1.0, 1.0};
    return r;
  }
  if (n == 2) {
    const int m = std::max(4, level);
    r.dirs.reserve(m);
    r.weights.assign(m, 2.0 * kPi / m);
    for (int i = 0; i < m; ++i) {
      const double t = 2.0 * kPi * (i + 0.5) / m;
      r.dirs.push_back(Point{std::cos(t), std::sin(t)});
    }
    return r;
  }
  if (n == 3) {
    const int k = std::max(4, level);
    const GaussRule& g = gauss_legendre(k);
    const int mphi = 2 * k;
    for (int i = 0; i < k; ++i) {
      const double mu = g.x[i];
      const double rho = std::sqrt(std::max(0.0, 1.0 - mu * mu));
      for (int j = 0; j < mphi; ++j) {
        const double phi = 2.0 * kPi * (j + 0.5) / mphi;
        r.dirs.push_back(Point{rho * std::cos(phi), rho * std::sin(phi), mu});
        r.weights.push_back(g.w[i] * 2.0 * kPi / mphi);
      }
    }
    return r;
  }
  throw ValidationError("sphere_rule: supported dimensions are 1, 2, 3");
}

// ---------------------------------------------------------------------------
// Regularized incomplete gamma Q(a,x) = Gamma(a,x)/Gamma(a), for chi-square
// survival probabilities. Series for x < a+1, continued fraction otherwise.

inline double gamma_q(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw ValidationError("gamma_q: bad arguments");
  if (x == 0.0) return 1.0;
  const double lg = std::lgamma(a);
  if (x < a + 1.0) {
    // P(a,x) by series; Q = 1 - P.
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    const double p = sum * std::exp(-x + a * std::log(x) - lg);
    return 1.0 - p;
  }
  // Q(a,x) by Lentz continued fraction.
  const double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - lg) * h;
}

// Survival function of the chi-square distribution with k dof.
inline double chi_square_sf(double stat, int dof) {
  return gamma_q(0.5 * dof, 0.5 * stat);
}

}  // namespace stablepot
