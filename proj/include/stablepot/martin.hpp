// Martin kernel machinery: Monte Carlo Green functions on general domains,
// the Martin kernel as a boundary ratio limit with geometric extrapolation,
// and the 3G inequality probe.
//
// The MC ratio route estimates G_D(x, y_k)/G_D(x0, y_k) along an approach
// sequence y_k -> z. Both Green values are computed from ONE walk set
// started at y_k (using the symmetry G_D(x,y) = G_D(y,x)): the exits serve
// numerator and denominator alike, so their noise largely cancels in the
// ratio. Walking from x and x0 instead would give the ratio diverging
// variance as y_k approaches the boundary.
#pragma once

#include "stablepot/common.hpp"
#include "stablepot/geometry.hpp"
#include "stablepot/kernels.hpp"
#include "stablepot/sampler.hpp"

namespace stablepot {

// G_D(x,y) = G(x,y) - E_x[G(X_{tau_D}, y)] by walk-on-spheres.
// y must be interior and away from the boundary (the integrand G(.,y) is
// bounded on D^c exactly because dist(y, D^c) > 0).
inline McEstimate green_mc(const Domain& domain, const StableIndex& idx,
                           const Point& x, const Point& y,
                           std::uint64_t n_samples, RngStream stream,
                           const McOptions& opts = {}) {
  if (dist2(x, y) == 0.0)
    throw ValidationError("green_mc: x and y must be distinct");
  if (!domain.contains(x) || !domain.contains(y))
    throw ValidationError("green_mc: x and y must be interior");
  if (domain.dist_to_boundary(y) < 1e-6)
    throw ValidationError(
        "green_mc: y too close to the boundary (variance blow-up)");
  const double gxy = green_whole(idx, x, y);
  McEstimate exterior = detail::mc_mean(
      n_samples, stream, opts, [&](std::uint64_t i) {
        RngEngine eng(stream, i);
        const ExitRecord rec =
            walk_on_spheres(domain, idx, x, opts.shrink, eng, opts.max_steps);
        return green_whole(idx, rec.exit_point, y);
      });
  exterior.value = gxy - exterior.value;
  return exterior;
}

struct MartinEstimate {
  Point x0, x, z;
  double value = 0.0;
  std::vector<double> sequence_values;
  double error_bound = 0.0;
  int levels = 0;
};

struct MartinOptions {
  int max_levels = 20;
  bool force_mc = false;       // use the MC ratio route even on balls
  std::uint64_t n_samples = 200000;  // walks per level (MC route)
  McOptions mc;
};

namespace detail {

// One level of the MC ratio: walks from y, exits evaluated against x and x0.
// Returns (ratio, se) with the covariance of the shared exits accounted for.
struct RatioLevel {
  double ratio = 0.0;
  double se = 0.0;
};

inline RatioLevel mc_ratio_level(const Domain& domain, const StableIndex& idx,
                                 const Point& x0, const Point& x,
                                 const Point& y, std::uint64_t n,
                                 RngStream stream, const McOptions& opts) {
  struct Acc {
    double s1 = 0, s2 = 0, s11 = 0, s22 = 0, s12 = 0;
    std::uint64_t n = 0;
  };
  const Acc acc = chunked_reduce<Acc>(
      n, opts.threads, opts.chunk,
      [&](std::uint64_t i, Acc& a) {
        RngEngine eng(stream, i);
        const ExitRecord rec =
            walk_on_spheres(domain, idx, y, opts.shrink, eng, opts.max_steps);
        const double g1 = green_whole(idx, rec.exit_point, x);
        const double g2 = green_whole(idx, rec.exit_point, x0);
        a.s1 += g1;
        a.s2 += g2;
        a.s11 += g1 * g1;
        a.s22 += g2 * g2;
        a.s12 += g1 * g2;
        ++a.n;
      },
      [](Acc& a, const Acc& b) {
        a.s1 += b.s1;
        a.s2 += b.s2;
        a.s11 += b.s11;
        a.s22 += b.s22;
        a.s12 += b.s12;
        a.n += b.n;
      });
  const double nn = static_cast<double>(acc.n);
  const double m1 = acc.s1 / nn, m2 = acc.s2 / nn;
  const double num = green_whole(idx, y, x) - m1;
  const double den = green_whole(idx, y, x0) - m2;
  if (!(den > 0.0))
    throw NumericError("martin_estimate: nonpositive denominator estimate");
  const double v1 = std::max(0.0, acc.s11 / nn - m1 * m1) / nn;
  const double v2 = std::max(0.0, acc.s22 / nn - m2 * m2) / nn;
  const double c12 = (acc.s12 / nn - m1 * m2) / nn;
  RatioLevel out;
  out.ratio = num / den;
  const double r = out.ratio;
  // var(num - r*den)/den^2, the delta-method variance of the ratio
  const double v = std::max(0.0, v1 + r * r * v2 - 2.0 * r * c12);
  out.se = std::sqrt(v) / std::abs(den);
  return out;
}

}  // namespace detail

// Martin kernel M_D(x,z) as the extrapolated limit of the Green ratio along
// the dyadic approach sequence to z. The returned error_bound is the
// geometric tail of the extrapolation plus the MC noise of the last level.
inline MartinEstimate martin_estimate(const Domain& domain,
                                      const StableIndex& idx, const Point& x0,
                                      const Point& x, const Point& z, double t0,
                                      RngStream stream, double tol,
                                      const MartinOptions& opts = {}) {
  if (!domain.contains(x) || !domain.contains(x0))
    throw ValidationError("martin_estimate: x and x0 must be interior");
  const bool closed = domain.shape() == Shape::Ball && !opts.force_mc;
  const auto ys = domain.approach_sequence(z, t0, opts.max_levels);

  MartinEstimate est;
  est.x0 = x0;
  est.x = x;
  est.z = z;

  std::vector<double> noise;
  auto level_value = [&](int k) -> detail::RatioLevel {
    if (closed) {
      const BallSpec& b = domain.as_ball();
      detail::RatioLevel rl;
      const double den = green_ball(idx, b, x0, ys[k]);
      if (!(den > 0.0))
        throw NumericError("martin_estimate: vanishing denominator");
      rl.ratio = green_ball(idx, b, x, ys[k]) / den;
      rl.se = 0.0;
      return rl;
    }
    // fresh substream per level, common exits inside the level
    RngStream ls{stream.seed, stream.stream_id * 1000003ULL + k + 1};
    return detail::mc_ratio_level(domain, idx, x0, x, ys[k],
                                  opts.n_samples, ls, opts.mc);
  };

  double prev_diff = -1.0;
  double rho_last = -1.0;
  bool contracting_seen = false;
  for (int k = 0; k < static_cast<int>(ys.size()); ++k) {
    const auto rl = level_value(k);
    est.sequence_values.push_back(rl.ratio);
    noise.push_back(rl.se);
    est.levels = k + 1;
    if (k == 0) continue;
    const double diff =
        std::abs(est.sequence_values[k] - est.sequence_values[k - 1]);
    const double noise_k = rl.se + noise[k - 1];
    if (prev_diff > 0.0 && diff > 3.0 * noise_k) {
      rho_last = diff / prev_diff;
      if (rho_last < 1.0) contracting_seen = true;
    }
    const bool converged = diff <= tol * std::max(std::abs(rl.ratio), 1e-300);
    const bool noise_floor = diff <= 2.0 * noise_k && k >= 2;
    if (converged || noise_floor || k + 1 == static_cast<int>(ys.size())) {
      if (diff == 0.0) {
        est.value = rl.ratio;
        est.error_bound = 3.0 * noise_k;
        return est;
      }
      if (!contracting_seen && rho_last >= 1.0)
        throw NumericError(
            "martin_estimate: ratio sequence is not contracting");
      double rho = rho_last > 0.0 ? rho_last : 0.5;
      rho = std::clamp(rho, 0.05, 0.9);
      const double signed_diff =
          est.sequence_values[k] - est.sequence_values[k - 1];
      const double tail = signed_diff * rho / (1.0 - rho);
      est.value = rl.ratio + tail;
      est.error_bound = std::abs(tail) + 3.0 * noise_k;
      return est;
    }
    prev_diff = std::max(diff, 3.0 * noise_k);
  }
  throw NumericError("martin_estimate: failed to converge");
}

// lhs and rhs of the 3G inequality
//   G_D(x,y) M_D(y,z) / M_D(x,z)  <=  C |x-z|^{n-a} / (|x-y|^{n-a} |y-z|^{n-a}).
// Closed forms on balls; callers aggregate lhs/rhs over samples.
inline std::pair<double, double> three_g_ratio(const Domain& domain,
                                               const StableIndex& idx,
                                               const Point& x, const Point& y,
                                               const Point& z) {
  if (domain.shape() != Shape::Ball)
    throw ValidationError(
        "three_g_ratio: closed forms require a ball domain (use the MC "
        "overload otherwise)");
  if (dist2(x, y) == 0.0 || dist2(y, z) == 0.0)
    throw ValidationError("three_g_ratio: degenerate point coincidence");
  const BallSpec& b = domain.as_ball();
  const double lhs = green_ball(idx, b, x, y) * martin_ball(idx, b, y, z) /
                     martin_ball(idx, b, x, z);
  const double e = idx.n - idx.alpha;
  const double rhs = std::pow(dist2(x, z), 0.5 * e) /
                     (std::pow(dist2(x, y), 0.5 * e) *
                      std::pow(dist2(y, z), 0.5 * e));
  return {lhs, rhs};
}

// General-domain variant with caller-provided Green and Martin evaluators.
inline std::pair<double, double> three_g_ratio(
    const StableIndex& idx, const Point& x, const Point& y, const Point& z,
    const std::function<double(const Point&, const Point&)>& green,
    const std::function<double(const Point&, const Point&)>& martin) {
  if (dist2(x, y) == 0.0 || dist2(y, z) == 0.0)
    throw ValidationError("three_g_ratio: degenerate point coincidence");
  const double lhs = green(x, y) * martin(y, z) / martin(x, z);
  const double e = idx.n - idx.alpha;
  const double rhs = std::pow(dist2(x, z), 0.5 * e) /
                     (std::pow(dist2(x, y), 0.5 * e) *
                      std::pow(dist2(y, z), 0.5 * e));
  return {lhs, rhs};
}

}  // namespace stablepot
