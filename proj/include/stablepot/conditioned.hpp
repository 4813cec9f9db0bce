// Doob h-transforms of the killed stable process: one-step conditioned
// kernels, z-conditioned path simulation, conditional lifetimes, and the
// boundary-limit law of h-conditioned paths.
//
// One conditioned step from p exits the inscribed ball B' = B(p, rho d(p))
// with density K_{B'}(p,w) h(w)/h(p) supported on w in D (h vanishes off D).
// For h = M_D(.,z) on a ball the step is drawn by exact rejection against a
// two-component envelope,
//     E(w) = M_away K_{B'}(p,w) + C_cap |w-z|^{alpha/2-n} 1_{B(z,a)}(w),
// with a = (|p-z| - rho d(p))/2, so the pole cap B(z,a) stays at distance a
// from the step sphere. A single sup-based envelope cannot work: M_D(.,z)
// is unbounded near z while the step kernel reaches every neighborhood of z
// with positive mass.
#pragma once

#include <memory>

#include "stablepot/common.hpp"
#include "stablepot/geometry.hpp"
#include "stablepot/kernels.hpp"
#include "stablepot/quad.hpp"
#include "stablepot/sampler.hpp"

namespace stablepot {

// Positive X^D-harmonic conditioning function.
class HFunction {
 public:
  enum class Kind { Constant, MartinPole, Mixture, GreenPole, Tabulated };

  static HFunction constant(double value = 1.0) {
    if (!(value > 0.0))
      throw ValidationError("HFunction::constant: value must be positive");
    HFunction h;
    h.kind_ = Kind::Constant;
    h.scale_ = value;
    return h;
  }

  static HFunction martin_pole(const Domain& domain, const StableIndex& idx,
                               Point z) {
    if (domain.shape() != Shape::Ball)
      throw ValidationError(
          "HFunction::martin_pole: closed-form Martin poles require a ball "
          "domain; use tabulated h elsewhere");
    const BallSpec& b = domain.as_ball();
    if (std::abs(dist(z, b.center) - b.radius) > 1e-8 * b.radius)
      throw ValidationError("HFunction::martin_pole: z is not on the sphere");
    HFunction h;
    h.kind_ = Kind::MartinPole;
    h.pole_ = std::move(z);
    return h;
  }

  static HFunction mixture(const Domain& domain, const StableIndex& idx,
                           DiscreteBoundaryMeasure mu) {
    mu.validate();
    if (domain.shape() != Shape::Ball)
      throw ValidationError(
          "HFunction::mixture: Martin mixtures require a ball domain");
    HFunction h;
    h.kind_ = Kind::Mixture;
    h.mixture_ = std::move(mu);
    return h;
  }

  static HFunction green_pole(Point y0) {
    HFunction h;
    h.kind_ = Kind::GreenPole;
    h.pole_ = std::move(y0);
    return h;
  }

  // Tabulated h on an interior mesh; rejected at construction when it fails
  // the positivity check or the X^D-harmonicity gate on probe balls.
  static HFunction tabulated(const Domain& domain, const StableIndex& idx,
                             std::shared_ptr<const InteriorMesh> mesh,
                             std::vector<double> values, RngStream stream,
                             std::uint64_t gate_samples = 20000) {
    if (!mesh || mesh->nodes.size() != values.size())
      throw ValidationError("HFunction::tabulated: mesh/value size mismatch");
    for (double v : values)
      if (!(v > 0.0))
        throw ValidationError(
            "HFunction::tabulated: h must be strictly positive on D");
    HFunction h;
    h.kind_ = Kind::Tabulated;
    h.tab_mesh_ = std::move(mesh);
    h.tab_values_ = std::move(values);
    h.tab_bound_ =
        *std::max_element(h.tab_values_.begin(), h.tab_values_.end());
    // harmonicity gate: mean-value residual on probe balls
    const Point c = domain.deepest_point();
    const double inr = domain.inradius();
    auto eval = [&h, &domain, &idx](const Point& y) {
      return h.eval(domain, idx, y);
    };
    for (int k = 0; k < 3; ++k) {
      Point px = c;
      px[0] += (k - 1) * 0.3 * inr;
      if (!domain.contains(px)) continue;
      const double rr = 0.4 * domain.dist_to_boundary(px);
      const McEstimate res = mean_value_residual_XD(
          domain, idx, BallSpec(px, rr), eval, gate_samples,
          RngStream{stream.seed, stream.stream_id + 17 + k});
      if (std::abs(res.value) > 5.0 * std::max(res.std_error, 1e-12))
        throw ValidationError(
            "HFunction::tabulated: harmonicity gate failed (residual " +
            std::to_string(res.value) + " vs se " +
            std::to_string(res.std_error) + ")");
    }
    return h;
  }

  Kind kind() const { return kind_; }
  const Point& pole() const { return pole_; }
  const DiscreteBoundaryMeasure& mixture_measure() const { return mixture_; }

  // h extended by zero off D.
  double eval(const Domain& domain, const StableIndex& idx,
              const Point& y) const {
    if (!domain.contains(y)) return 0.0;
    switch (kind_) {
      case Kind::Constant:
        return scale_;
      case Kind::MartinPole: {
        const BallSpec& b = domain.as_ball();
        return martin_ball(idx, b, y, pole_);
      }
      case Kind::Mixture: {
        const BallSpec& b = domain.as_ball();
        double s = 0.0;
        for (std::size_t j = 0; j < mixture_.weights.size(); ++j)
          s += mixture_.weights[j] *
               martin_ball(idx, b, y, mixture_.mesh.nodes[j]);
        return s;
      }
      case Kind::GreenPole:
        throw ValidationError(
            "HFunction::eval: Green-pole conditioning is exposed only through "
            "the V_q/G_D ratios, not path simulation");
      case Kind::Tabulated: {
        // inverse-distance interpolation over the four nearest nodes
        std::array<int, 4> best{-1, -1, -1, -1};
        std::array<double, 4> bd;
        bd.fill(std::numeric_limits<double>::infinity());
        for (int i = 0; i < static_cast<int>(tab_mesh_->nodes.size()); ++i) {
          const double d = dist2(y, tab_mesh_->nodes[i]);
          for (int k = 0; k < 4; ++k)
            if (d < bd[k]) {
              for (int l = 3; l > k; --l) {
                bd[l] = bd[l - 1];
                best[l] = best[l - 1];
              }
              bd[k] = d;
              best[k] = i;
              break;
            }
        }
        double num = 0.0, den = 0.0;
        for (int k = 0; k < 4; ++k) {
          if (best[k] < 0) continue;
          if (bd[k] < 1e-24) return tab_values_[best[k]];
          const double w = 1.0 / bd[k];
          num += w * tab_values_[best[k]];
          den += w;
        }
        return num / den;
      }
    }
    return 0.0;
  }

  double tabulated_bound() const { return tab_bound_; }

 private:
  Kind kind_ = Kind::Constant;
  double scale_ = 1.0;
  Point pole_;
  DiscreteBoundaryMeasure mixture_;
  std::shared_ptr<const InteriorMesh> tab_mesh_;
  std::vector<double> tab_values_;
  double tab_bound_ = 0.0;
};

struct ConditionedOptions {
  double shrink = 0.5;
  double eps_stop = 0.0;  // 0 = 1e-2 * inradius
  int max_steps = 10000;
  std::uint64_t max_proposals = 200000;  // per step; envelope failure beyond
  int threads = 0;
  std::uint64_t chunk = 256;
};

namespace detail {

// Radial Poisson kernel of B(p,s) seen from its center, at distance d > s.
inline double center_poisson_radial(const StableIndex& idx, double s, double d,
                                    double poisson_const) {
  return poisson_const * std::pow(s * s / (d * d - s * s), 0.5 * idx.alpha) *
         std::pow(d, -static_cast<double>(idx.n));
}

// One exact Martin-pole conditioned step on a ball domain.
inline Point martin_pole_step(const Domain& domain, const StableIndex& idx,
                              const Point& p, const Point& z, double shrink,
                              RngEngine& eng, std::uint64_t max_proposals) {
  const BallSpec& B = domain.as_ball();
  const double r = B.radius;
  const double delta = domain.dist_to_boundary(p);
  if (!(delta > 0.0))
    throw ValidationError("conditioned_step: point is not interior");
  const double s = shrink * delta;
  const double dz = dist(p, z);
  const double a = 0.5 * (dz - s);
  if (!(a > 0.0))
    throw NumericError("conditioned_step: step ball reaches the pole");
  const KernelConstants kc = KernelConstants::make(idx);

  // envelope component masses
  const double m_away =
      std::pow(a * (2.0 * r - a), 0.5 * idx.alpha) /
      std::pow(a, static_cast<double>(idx.n));
  const double k_cap =
      center_poisson_radial(idx, s, s + a, kc.poisson_const);
  const double c_cap = k_cap * std::pow(2.0 * r, 0.5 * idx.alpha);
  const double w1 = m_away;
  const double w2 = c_cap * sphere_area(idx.n) * (2.0 / idx.alpha) *
                    std::pow(a, 0.5 * idx.alpha);
  const double wtot = w1 + w2;

  BallSpec step_ball(p, s);
  Point w(idx.n), dir(idx.n);
  for (std::uint64_t trial = 0; trial < max_proposals; ++trial) {
    const bool from_kernel = eng.u01() * wtot < w1;
    if (from_kernel) {
      sample_center_exit(idx, step_ball, eng, w);
    } else {
      const double rho = a * std::pow(eng.u01(), 2.0 / idx.alpha);
      eng.unit_sphere(idx.n, dir);
      axpy(w, z, rho, dir);
    }
    if (!(dist(w, B.center) < r)) continue;       // h vanishes off D
    const double dwp = dist(w, p);
    if (!(dwp > s)) continue;                     // numerically inside B'
    const double kval =
        center_poisson_radial(idx, s, dwp, kc.poisson_const);
    const double target = kval * martin_ball(idx, B, w, z);
    double env = m_away * kval;
    const double dwz = dist(w, z);
    if (dwz < a)
      env += c_cap * std::pow(dwz, 0.5 * idx.alpha - idx.n);
    if (eng.u01() * env <= target) return w;
  }
  throw NumericError(
      "conditioned_step: rejection envelope failure (acceptance below "
      "threshold) at |p-z| = " +
      std::to_string(dz) + ", delta = " + std::to_string(delta));
}

}  // namespace detail

// Draw one step of the h-conditioned chain from p: density
// K_{B(p, shrink d(p))}(p, w) h(w) / h(p) on w in D.
inline Point conditioned_step(const Domain& domain, const StableIndex& idx,
                              const Point& p, const HFunction& h,
                              double shrink, RngEngine& eng,
                              const ConditionedOptions& opts = {}) {
  switch (h.kind()) {
    case HFunction::Kind::MartinPole:
      return detail::martin_pole_step(domain, idx, p, h.pole(), shrink, eng,
                                      opts.max_proposals);
    case HFunction::Kind::Mixture: {
      // disintegrate: pick the pole with probability mu_j M(p,z_j)/h(p),
      // then take an exact single-pole step
      const auto& mu = h.mixture_measure();
      const BallSpec& B = domain.as_ball();
      std::vector<double> cumulative(mu.weights.size());
      double total = 0.0;
      for (std::size_t j = 0; j < mu.weights.size(); ++j) {
        total += mu.weights[j] * martin_ball(idx, B, p, mu.mesh.nodes[j]);
        cumulative[j] = total;
      }
      const double u = eng.u01() * total;
      std::size_t j = 0;
      while (j + 1 < cumulative.size() && cumulative[j] < u) ++j;
      return detail::martin_pole_step(domain, idx, p, mu.mesh.nodes[j], shrink,
                                      eng, opts.max_proposals);
    }
    case HFunction::Kind::GreenPole:
      throw ValidationError(
          "conditioned_step: interior-pole (Green) conditioning is not "
          "simulated");
    case HFunction::Kind::Constant:
    case HFunction::Kind::Tabulated: {
      // bounded h: plain rejection against h_max over the reachable set
      const double delta = domain.dist_to_boundary(p);
      if (!(delta > 0.0))
        throw ValidationError("conditioned_step: point is not interior");
      BallSpec b(p, shrink * delta);
      const double hmax = h.kind() == HFunction::Kind::Constant
                              ? h.eval(domain, idx, p)
                              : h.tabulated_bound();
      Point w(idx.n);
      for (std::uint64_t trial = 0; trial < opts.max_proposals; ++trial) {
        sample_center_exit(idx, b, eng, w);
        const double hw = h.eval(domain, idx, w);
        if (hw <= 0.0) continue;
        if (eng.u01() * hmax <= hw) return w;
      }
      throw NumericError("conditioned_step: rejection envelope failure");
    }
  }
  throw ValidationError("conditioned_step: unsupported h kind");
}

struct ConditionedPath {
  std::vector<Point> points;  // includes the start, excludes the terminal
  Point terminal;
  int steps = 0;
  enum class StopReason { ReachedPole, MaxSteps } reason =
      StopReason::ReachedPole;
};

// Simulate the M_D(.,z)-conditioned chain from x until it enters the
// eps_stop neighborhood of z. The path never exits D.
inline ConditionedPath simulate_conditioned_path(
    const Domain& domain, const StableIndex& idx, const Point& x,
    const Point& z, RngEngine& eng, const ConditionedOptions& opts = {}) {
  if (domain.shape() != Shape::Ball)
    throw ValidationError(
        "simulate_conditioned_path: closed-form Martin poles require a ball "
        "domain");
  const BallSpec& B = domain.as_ball();
  if (std::abs(dist(z, B.center) - B.radius) > 1e-8 * B.radius)
    throw ValidationError("simulate_conditioned_path: z is not on the sphere");
  const double eps =
      opts.eps_stop > 0.0 ? opts.eps_stop : 1e-2 * domain.inradius();
  ConditionedPath path;
  Point p = x;
  path.points.push_back(p);
  for (int step = 0; step < opts.max_steps; ++step) {
    if (dist(p, z) < eps) {
      path.terminal = p;
      path.steps = step;
      path.reason = ConditionedPath::StopReason::ReachedPole;
      return path;
    }
    p = detail::martin_pole_step(domain, idx, p, z, opts.shrink, eng,
                                 opts.max_proposals);
    if (!domain.contains(p))
      throw NumericError(
          "simulate_conditioned_path: confinement violated (step left D)");
    path.points.push_back(p);
  }
  path.terminal = p;
  path.steps = opts.max_steps;
  path.reason = ConditionedPath::StopReason::MaxSteps;
  return path;
}

// Conditional expected lifetime E_x^z[tau_D] on a ball, via the h-transform
// identity E_x^z[tau_D] = (1/M(x,z)) Int_D G_D(x,y) M(y,z) dy.  The integral
// splits at the cap B(z,b): polar quadrature around z inside the cap (Martin
// pole), polar around x outside it (Green pole), with the cap segment of
// each ray removed.
inline double conditional_lifetime(const Domain& domain, const StableIndex& idx,
                                   const Point& x, const Point& z,
                                   int resolution = 1) {
  if (domain.shape() != Shape::Ball)
    throw ValidationError("conditional_lifetime: requires a ball domain");
  const BallSpec& B = domain.as_ball();
  const double r = B.radius;
  if (!domain.contains(x))
    throw ValidationError("conditional_lifetime: x must be interior");
  if (std::abs(dist(z, B.center) - r) > 1e-8 * r)
    throw ValidationError("conditional_lifetime: z must be on the sphere");
  const double b = 0.5 * std::min(dist(x, z), r);

  const int ang = (idx.n == 3 ? 12 : 64) * resolution;
  const int k = 12;
  Point y;

  // cap part: polar around z
  const SphereRule sz = sphere_rule(idx.n, ang);
  double cap = 0.0;
  for (std::size_t j = 0; j < sz.dirs.size(); ++j) {
    const double R = std::min(domain.ray_exit(z, sz.dirs[j]), b);
    if (!(R > 0.0)) continue;
    auto f = [&](double rho) {
      axpy(y, z, rho, sz.dirs[j]);
      return std::pow(rho, idx.n - 1.0) * green_ball(idx, B, x, y) *
             martin_ball(idx, B, y, z);
    };
    cap += sz.weights[j] * graded_panels(f, 0.0, R, 14, 0.35, k);
  }

  // outer part: polar around x with the cap segment excised
  double outer = 0.0;
  const SphereRule sx = sphere_rule(idx.n, ang);
  for (std::size_t j = 0; j < sx.dirs.size(); ++j) {
    const Point& u = sx.dirs[j];
    const double R = domain.ray_exit(x, u);
    if (!(R > 0.0)) continue;
    // ray cap intersection: |x + t u - z|^2 = b^2
    double t1 = R, t2 = R;
    {
      double bq = 0.0, cq = -b * b;
      for (int d = 0; d < idx.n; ++d) {
        const double w = x[d] - z[d];
        bq += w * u[d];
        cq += w * w;
      }
      const double disc = bq * bq - cq;
      if (disc > 0.0) {
        const double sq = std::sqrt(disc);
        t1 = std::clamp(-bq - sq, 0.0, R);
        t2 = std::clamp(-bq + sq, 0.0, R);
      }
    }
    auto f = [&](double rho) {
      axpy(y, x, rho, u);
      return std::pow(rho, idx.n - 1.0) * green_ball(idx, B, x, y) *
             martin_ball(idx, B, y, z);
    };
    double ray = 0.0;
    if (t1 > 0.0) ray += graded_panels(f, 0.0, std::min(t1, R), 12, 0.3, k);
    if (t2 < R)
      ray += graded_panels([&](double ss) { return f(R - ss); }, 0.0, R - t2,
                           12, 0.5, k);
    outer += sx.weights[j] * ray;
  }

  return (cap + outer) / martin_ball(idx, B, x, z);
}

// Analytic and empirical boundary-limit law of the h-conditioned process,
// h = sum_j mu_j M_D(., z_j). Empirical paths resample the pole per path
// from the analytic mixture (the Martin disintegration of P_x^h).
struct BoundaryLawResult {
  std::vector<double> analytic;    // P(limit in patch j)
  std::vector<double> empirical;   // terminal fractions over finished paths
  std::vector<std::uint64_t> counts;
  std::uint64_t n_paths = 0;
  std::uint64_t max_step_failures = 0;
  double chi_square = 0.0;
  double p_value = 1.0;
  bool flagged = false;  // analytic/empirical mismatch at the 1% level
};

inline BoundaryLawResult boundary_limit_law(const Domain& domain,
                                            const StableIndex& idx,
                                            const Point& x,
                                            const DiscreteBoundaryMeasure& mu,
                                            std::uint64_t n_paths,
                                            RngStream stream,
                                            const ConditionedOptions& opts = {}) {
  if (domain.shape() != Shape::Ball)
    throw ValidationError("boundary_limit_law: requires a ball domain");
  mu.validate();
  const BallSpec& B = domain.as_ball();
  const std::size_t m = mu.weights.size();

  BoundaryLawResult out;
  out.analytic.resize(m);
  double hx = 0.0;
  std::vector<double> cumulative(m);
  for (std::size_t j = 0; j < m; ++j) {
    hx += mu.weights[j] * martin_ball(idx, B, x, mu.mesh.nodes[j]);
    cumulative[j] = hx;
  }
  for (std::size_t j = 0; j < m; ++j)
    out.analytic[j] =
        mu.weights[j] * martin_ball(idx, B, x, mu.mesh.nodes[j]) / hx;

  struct Acc {
    std::vector<std::uint64_t> counts;
    std::uint64_t fails = 0;
  };
  Acc init;
  init.counts.assign(m, 0);
  const Acc total = chunked_reduce<Acc>(
      n_paths, opts.threads, opts.chunk,
      [&](std::uint64_t i, Acc& acc) {
        RngEngine eng(stream, i);
        // pole drawn from the analytic mixture
        const double u = eng.u01() * hx;
        std::size_t j = 0;
        while (j + 1 < m && cumulative[j] < u) ++j;
        const ConditionedPath path = simulate_conditioned_path(
            domain, idx, x, mu.mesh.nodes[j], eng, opts);
        if (path.reason == ConditionedPath::StopReason::MaxSteps) {
          ++acc.fails;
          return;
        }
        // terminal assigned to the nearest measure node's patch
        std::size_t best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < m; ++l) {
          const double d = dist2(path.terminal, mu.mesh.nodes[l]);
          if (d < bd) {
            bd = d;
            best = l;
          }
        }
        ++acc.counts[best];
      },
      [](Acc& a, const Acc& b) {
        for (std::size_t j = 0; j < a.counts.size(); ++j)
          a.counts[j] += b.counts[j];
        a.fails += b.fails;
      },
      init);

  out.counts = total.counts;
  out.max_step_failures = total.fails;
  std::uint64_t finished = 0;
  for (auto c : total.counts) finished += c;
  out.n_paths = n_paths;
  out.empirical.assign(m, 0.0);
  if (finished > 0) {
    double chi = 0.0;
    int dof = 0;
    for (std::size_t j = 0; j < m; ++j) {
      out.empirical[j] = static_cast<double>(total.counts[j]) / finished;
      const double expect = out.analytic[j] * finished;
      if (expect >= 5.0) {
        const double d = total.counts[j] - expect;
        chi += d * d / expect;
        ++dof;
      }
    }
    out.chi_square = chi;
    out.p_value = dof > 1 ? chi_square_sf(chi, dof - 1) : 1.0;
    out.flagged = out.p_value < 0.01;
  }
  return out;
}

}  // namespace stablepot
