// Reproducible Monte Carlo engine: exact ball-exit sampling from the center,
// walk-on-spheres exit simulation, harmonic measure, and executable
// mean-value residuals for both harmonicity notions (with respect to the
// free process X and the killed process X^D).
//
// Exactness of the base step: started at the center of B(0,r), the exit
// radius satisfies |X_tau| = r / sqrt(V) with V ~ Beta(alpha/2, 1-alpha/2),
// independent of the (uniform) exit direction. This is the inverse of the
// radial law of the ball Poisson kernel, so every draw is exact in
// distribution; no tabulated CDF is involved.
#pragma once

#include <functional>

#include "stablepot/common.hpp"
#include "stablepot/geometry.hpp"
#include "stablepot/kernels.hpp"
#include "stablepot/rng.hpp"

namespace stablepot {

// Monte Carlo value with its standard error and reproducibility metadata.
struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::uint64_t n_samples = 0;
  std::uint64_t seed = 0;
  // set when the kurtosis guard detected heavy tails (sample size was then
  // doubled once automatically)
  bool tail_flagged = false;
};

struct McOptions {
  double shrink = 0.5;      // walk-on-spheres ball shrink factor rho
  int max_steps = 10000;    // hard cap per walk; exceeding it is an error
  int threads = 0;          // 0 = hardware concurrency
  std::uint64_t chunk = 8192;
};

// Beta(a,b) for a,b <= 1 by Johnk's algorithm (exact, uniforms only).
inline double sample_beta_johnk(double a, double b, RngEngine& eng) {
  for (;;) {
    const double x = std::pow(eng.u01(), 1.0 / a);
    const double y = std::pow(eng.u01(), 1.0 / b);
    const double s = x + y;
    if (s > 0.0 && s <= 1.0) return x / s;
  }
}

// Exact draw of the exit position X_{tau_B} for the walk started at the
// center of `ball`; the density is poisson_ball(center, .).
inline void sample_center_exit(const StableIndex& idx, const BallSpec& ball,
                               RngEngine& eng, Point& out) {
  const double v = sample_beta_johnk(0.5 * idx.alpha, 1.0 - 0.5 * idx.alpha, eng);
  const double radius = ball.radius / std::sqrt(v);
  eng.unit_sphere(idx.n, out);
  for (int i = 0; i < idx.n; ++i)
    out[i] = ball.center[i] + radius * out[i];
}

inline Point sample_center_exit(const StableIndex& idx, const BallSpec& ball,
                                RngEngine& eng) {
  Point p;
  sample_center_exit(idx, ball, eng, p);
  return p;
}

struct ExitRecord {
  Point start;
  Point exit_point;  // strictly outside D (the process never lands on bd D)
  int steps = 0;
  BallSpec final_ball;
};

// Walk-on-spheres: iterate exact exits from inscribed balls until the chain
// leaves D. Each step has the exact one-ball exit law, so the final point has
// exactly the law of X_{tau_D} started at x, for every shrink factor.
inline ExitRecord walk_on_spheres(const Domain& domain, const StableIndex& idx,
                                  const Point& x, double shrink,
                                  RngEngine& eng, int max_steps = 10000) {
  if (!(shrink > 0.0 && shrink <= 1.0))
    throw ValidationError("walk_on_spheres: shrink must be in (0,1]");
  if (shrink == 1.0 && domain.shape() != Shape::Ball)
    throw ValidationError(
        "walk_on_spheres: shrink = 1 is allowed only on ball domains");
  ExitRecord rec;
  rec.start = x;
  Point p = x;
  Point e(idx.n);
  for (int step = 0; step < max_steps; ++step) {
    const double delta = domain.dist_to_boundary(p);
    if (!(delta > 0.0))
      throw ValidationError("walk_on_spheres: start point is not interior");
    BallSpec b(p, shrink * delta);
    sample_center_exit(idx, b, eng, e);
    ++rec.steps;
    const double de = domain.dist_to_boundary(e);
    if (de < 0.0) {
      rec.exit_point = e;
      rec.final_ball = std::move(b);
      return rec;
    }
    if (de > 0.0) p = e;
    // de == 0 has probability zero; redraw from the same ball if it occurs
  }
  throw NumericError("walk_on_spheres: max_steps exceeded (steps=" +
                     std::to_string(max_steps) + ", start escaped to depth " +
                     std::to_string(domain.dist_to_boundary(p)) +
                     "); geometry/shrink pathology");
}

namespace detail {

struct MomentAcc {
  double s1 = 0.0, s2 = 0.0, s3 = 0.0, s4 = 0.0;
  std::uint64_t n = 0;

  void add(double v) {
    s1 += v;
    const double v2 = v * v;
    s2 += v2;
    s3 += v2 * v;
    s4 += v2 * v2;
    ++n;
  }
  void merge(const MomentAcc& o) {
    s1 += o.s1;
    s2 += o.s2;
    s3 += o.s3;
    s4 += o.s4;
    n += o.n;
  }
};

// Finalize mean/std-error and decide whether the variance estimate itself is
// too noisy to trust (heavy tails): sd of the variance estimator is roughly
// sqrt((kurtosis - 1)/n) in relative terms.
inline void finalize(const MomentAcc& m, McEstimate& out, bool& heavy) {
  const double n = static_cast<double>(m.n);
  const double mean = m.s1 / n;
  double var = (m.s2 - n * mean * mean) / std::max(1.0, n - 1.0);
  var = std::max(var, 0.0);
  out.value = mean;
  out.std_error = std::sqrt(var / n);
  out.n_samples = m.n;
  heavy = false;
  if (var > 0.0) {
    const double m4 =
        (m.s4 - 4.0 * mean * m.s3 + 6.0 * mean * mean * m.s2 -
         3.0 * n * mean * mean * mean * mean) /
        n;
    const double kurt = m4 / (var * var);
    heavy = std::sqrt(std::max(0.0, kurt - 1.0) / n) > 0.2;
  }
}

// Deterministic chunked MC mean of draw(sample_index, engine-factory), with
// the one-shot doubling guard.
template <class Draw>
McEstimate mc_mean(std::uint64_t n_samples, RngStream stream,
                   const McOptions& opts, Draw&& draw) {
  if (n_samples == 0) throw ValidationError("mc_mean: n_samples must be > 0");
  auto run = [&](std::uint64_t lo, std::uint64_t hi) {
    return chunked_reduce<MomentAcc>(
        hi - lo, opts.threads, opts.chunk,
        [&](std::uint64_t i, MomentAcc& acc) { acc.add(draw(lo + i)); },
        [](MomentAcc& a, const MomentAcc& b) { a.merge(b); });
  };
  MomentAcc acc = run(0, n_samples);
  McEstimate est;
  bool heavy = false;
  finalize(acc, est, heavy);
  if (heavy) {
    MomentAcc more = run(n_samples, 2 * n_samples);
    acc.merge(more);
    bool ignored = false;
    finalize(acc, est, ignored);
    est.tail_flagged = true;
  }
  est.seed = stream.seed;
  return est;
}

}  // namespace detail

// E_x[phi(X_{tau_D})] over walk-on-spheres runs. phi must be bounded and
// evaluable on the complement of D.
inline McEstimate harmonic_measure(const Domain& domain, const StableIndex& idx,
                                   const Point& x,
                                   const std::function<double(const Point&)>& phi,
                                   std::uint64_t n_samples, RngStream stream,
                                   const McOptions& opts = {}) {
  return detail::mc_mean(n_samples, stream, opts, [&](std::uint64_t i) {
    RngEngine eng(stream, i);
    const ExitRecord rec =
        walk_on_spheres(domain, idx, x, opts.shrink, eng, opts.max_steps);
    return phi(rec.exit_point);
  });
}

// Residual of the Definition-2.2 mean-value identity over B(x,r):
// E_x[f(X_{tau_B})] - f(x). Near zero iff f is harmonic across B with
// respect to the free process X. The caller declares the growth exponent of
// f (|f(z)| <= C(1+|z|)^growth); growth >= alpha/2 makes the estimator's
// variance infinite and is rejected.
inline McEstimate mean_value_residual_X(
    const StableIndex& idx, const BallSpec& ball,
    const std::function<double(const Point&)>& f, std::uint64_t n_samples,
    RngStream stream, const McOptions& opts = {}, double growth_exponent = 0.0) {
  if (!(2.0 * growth_exponent < idx.alpha))
    throw ValidationError(
        "mean_value_residual_X: declared growth implies infinite variance "
        "(needs growth < alpha/2)");
  const double fx = f(ball.center);
  return detail::mc_mean(n_samples, stream, opts, [&](std::uint64_t i) {
    RngEngine eng(stream, i);
    Point e(idx.n);
    sample_center_exit(idx, ball, eng, e);
    return f(e) - fx;
  });
}

// Residual of the Definition-2.1 identity for the killed process:
// E_x[h(X_{tau_B}); X_{tau_B} in D] - h(x), for a ball whose closure lies in
// D. Exits that land outside D contribute zero (the killing).
inline McEstimate mean_value_residual_XD(
    const Domain& domain, const StableIndex& idx, const BallSpec& ball,
    const std::function<double(const Point&)>& h, std::uint64_t n_samples,
    RngStream stream, const McOptions& opts = {}) {
  const double slack = domain.dist_to_boundary(ball.center);
  if (!(slack > ball.radius * (1.0 + 1e-12)))
    throw ValidationError(
        "mean_value_residual_XD: closure of the ball must lie inside D");
  const double hx = h(ball.center);
  return detail::mc_mean(n_samples, stream, opts, [&](std::uint64_t i) {
    RngEngine eng(stream, i);
    Point e(idx.n);
    sample_center_exit(idx, ball, eng, e);
    return (domain.dist_to_boundary(e) > 0.0 ? h(e) : 0.0) - hx;
  });
}

}  // namespace stablepot
