// Singular and improper quadrature over domains, interior meshes with
// boundary-layer refinement, and the discretized Green operator that powers
// the gauge / V_q Neumann series and the representation solves.
//
// Interior integrals run in polar coordinates around the (optional) singular
// point with panels geometrically graded into the pole and into the
// boundary; the domains here are convex, so each ray meets the boundary
// once and the radial extent is exact.
#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "stablepot/common.hpp"
#include "stablepot/geometry.hpp"
#include "stablepot/kernels.hpp"
#include "stablepot/sampler.hpp"

namespace stablepot {

struct QuadResult {
  double value = 0.0;
  double error_est = 0.0;
};

struct QuadOptions {
  int angular = 0;           // directions (n=2: angles, n=3: Gauss order); 0 = auto
  int pole_layers = 14;      // graded layers into the singular point
  int boundary_layers = 22;  // graded layers into the boundary
  double fail_rel = 0.05;    // refinement disagreement that raises an error
  double trunc_mult = 10.0;  // exterior truncation radius, times diam(D)
};

namespace detail {

template <class F>
double polar_sweep(const Domain& domain, const Point& center, F&& f, int n,
                   int angular, int pole_layers, int boundary_layers, int k) {
  const SphereRule sr = sphere_rule(n, angular);
  double total = 0.0;
  Point y;
  for (std::size_t j = 0; j < sr.dirs.size(); ++j) {
    const Point& u = sr.dirs[j];
    const double R = domain.ray_exit(center, u);
    if (!(R > 0.0)) continue;
    auto g = [&](double rho) {
      axpy(y, center, rho, u);
      return std::pow(rho, n - 1.0) * f(static_cast<const Point&>(y));
    };
    double ray = graded_panels(g, 0.0, 0.5 * R, pole_layers, 0.3, k);
    ray += graded_panels([&](double s) { return g(R - s); }, 0.0, 0.5 * R,
                         boundary_layers, 0.5, k);
    total += sr.weights[j] * ray;
  }
  return total;
}

}  // namespace detail

// Integral of f over the domain interior. If `singular_at` is given the
// integrand may have an integrable power singularity |y-p|^{-s}, s < n,
// there (interior or boundary point); the polar sweep is centered on it.
inline QuadResult integrate_interior(const Domain& domain,
                                     const std::function<double(const Point&)>& f,
                                     const std::optional<Point>& singular_at = {},
                                     const QuadOptions& opts = {}) {
  const int n = domain.dim();
  const Point center = singular_at ? *singular_at : domain.deepest_point();
  const int ang = opts.angular > 0 ? opts.angular : (n == 3 ? 16 : 96);
  const double coarse = detail::polar_sweep(domain, center, f, n, ang / 2,
                                            opts.pole_layers - 2,
                                            opts.boundary_layers - 2, 8);
  const double fine = detail::polar_sweep(domain, center, f, n, ang,
                                          opts.pole_layers,
                                          opts.boundary_layers, 16);
  QuadResult r{fine, std::abs(fine - coarse)};
  if (r.error_est > opts.fail_rel * std::abs(fine) + 1e-12)
    throw NumericError("integrate_interior: refinement did not converge (" +
                       std::to_string(coarse) + " vs " + std::to_string(fine) +
                       ")");
  return r;
}

// Integral of f over the complement of the domain. The caller declares the
// decay exponent d with |f(z)| ~ |z|^{-d} at infinity (d > n); beyond the
// truncation radius the remainder is added analytically from the declared
// power law, with half its size counted as certified error.
inline QuadResult integrate_exterior_tail(const Domain& domain,
                                          const std::function<double(const Point&)>& f,
                                          double decay_exponent,
                                          const QuadOptions& opts = {}) {
  const int n = domain.dim();
  if (!(decay_exponent > n))
    throw ValidationError(
        "integrate_exterior_tail: decay exponent must exceed the dimension");
  const Point center = domain.deepest_point();
  const double R = opts.trunc_mult * std::max(domain.diameter(), 1e-12);

  auto sweep = [&](int ang, int k, int blayers) {
    const SphereRule sr = sphere_rule(n, ang);
    double total = 0.0, tail = 0.0;
    Point y;
    for (std::size_t j = 0; j < sr.dirs.size(); ++j) {
      const Point& u = sr.dirs[j];
      const double t0 = domain.ray_exit(center, u);
      if (!(R > t0)) continue;
      auto g = [&](double t) {
        axpy(y, center, t, u);
        return std::pow(t, n - 1.0) * f(static_cast<const Point&>(y));
      };
      // graded into the boundary start, then log-spaced panels out to R
      const double mid = std::min(2.0 * t0, R);
      double ray = graded_panels([&](double s) { return g(t0 + s); }, 0.0,
                                 mid - t0, blayers, 0.5, k);
      double lo = mid;
      while (lo < R) {
        const double hi = std::min(2.0 * lo, R);
        ray += gauss_panel(g, lo, hi, k);
        lo = hi;
      }
      total += sr.weights[j] * ray;
      // analytic tail from the declared power law, anchored at f(R u)
      axpy(y, center, R, u);
      tail += sr.weights[j] * f(static_cast<const Point&>(y)) *
              std::pow(R, static_cast<double>(n)) / (decay_exponent - n);
    }
    return std::pair<double, double>{total, tail};
  };

  const int ang = opts.angular > 0 ? opts.angular : (n == 3 ? 16 : 96);
  const auto [coarse, tail_c] = sweep(ang / 2, 8, opts.boundary_layers - 2);
  const auto [fine, tail] = sweep(ang, 16, opts.boundary_layers);
  QuadResult r{fine + tail, std::abs(fine - coarse) + 0.5 * std::abs(tail)};
  if (std::abs(fine - coarse) > opts.fail_rel * std::abs(fine) + 1e-12)
    throw NumericError("integrate_exterior_tail: refinement did not converge");
  return r;
}

// ---------------------------------------------------------------------------
// Interior meshes: cell nodes and exact cell volumes, with three geometric
// boundary layers (ratio 1/2) so that kernels blowing up like
// delta(y)^{alpha/2-n} near the boundary are resolved.

enum class CellKind { Segment1D, PolarSector2D, SphericalCell3D, Box };

struct InteriorMesh {
  std::vector<Point> nodes;
  std::vector<double> weights;

  // Parametric cell geometry, kept so kernels can be averaged over cells
  // near their pole instead of sampled at the midpoint.
  CellKind kind = CellKind::Box;
  Point origin;  // ball center for polar cells
  std::vector<std::array<double, 6>> bounds;  // (lo,hi) per parametric dim

  double volume() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
  }

  // Real-space diameter bound of cell j.
  double cell_diameter(std::size_t j) const {
    const auto& b = bounds[j];
    switch (kind) {
      case CellKind::Segment1D:
        return b[1] - b[0];
      case CellKind::PolarSector2D:
        return std::hypot(b[1] - b[0], b[1] * (b[3] - b[2]));
      case CellKind::SphericalCell3D: {
        const double dr = b[1] - b[0];
        const double arc = b[1] * std::sqrt((b[3] - b[2]) * (b[3] - b[2]) +
                                            (b[5] - b[4]) * (b[5] - b[4]));
        return std::hypot(dr, arc);
      }
      case CellKind::Box: {
        double s = 0.0;
        for (int d = 0; d < 3; ++d) s += (b[2 * d + 1] - b[2 * d]) *
                                         (b[2 * d + 1] - b[2 * d]);
        return std::sqrt(s);
      }
    }
    return 0.0;
  }
};

// Average of f over cell j by tensor Gauss quadrature in the cell's
// parametric coordinates with the exact Jacobian.
template <class F>
double cell_average(const InteriorMesh& mesh, std::size_t j, F&& f,
                    int order = 8) {
  const auto& b = mesh.bounds[j];
  const GaussRule& g = gauss_legendre(order);
  auto map1 = [&](int d, double t) {  // t in [-1,1] -> param dim d
    return 0.5 * (b[2 * d] + b[2 * d + 1]) + 0.5 * (b[2 * d + 1] - b[2 * d]) * t;
  };
  double total = 0.0;
  Point y(mesh.nodes[j].size());
  switch (mesh.kind) {
    case CellKind::Segment1D: {
      for (int i = 0; i < order; ++i) {
        y[0] = map1(0, g.x[i]);
        total += g.w[i] * f(static_cast<const Point&>(y));
      }
      total *= 0.5 * (b[1] - b[0]);
      break;
    }
    case CellKind::PolarSector2D: {
      for (int i = 0; i < order; ++i) {
        const double rho = map1(0, g.x[i]);
        for (int k = 0; k < order; ++k) {
          const double th = map1(1, g.x[k]);
          y[0] = mesh.origin[0] + rho * std::cos(th);
          y[1] = mesh.origin[1] + rho * std::sin(th);
          total += g.w[i] * g.w[k] * rho * f(static_cast<const Point&>(y));
        }
      }
      total *= 0.25 * (b[1] - b[0]) * (b[3] - b[2]);
      break;
    }
    case CellKind::SphericalCell3D: {
      for (int i = 0; i < order; ++i) {
        const double rho = map1(0, g.x[i]);
        for (int k = 0; k < order; ++k) {
          const double mu = map1(1, g.x[k]);
          const double sm = std::sqrt(std::max(0.0, 1.0 - mu * mu));
          for (int l = 0; l < order; ++l) {
            const double phi = map1(2, g.x[l]);
            y[0] = mesh.origin[0] + rho * sm * std::cos(phi);
            y[1] = mesh.origin[1] + rho * sm * std::sin(phi);
            y[2] = mesh.origin[2] + rho * mu;
            total += g.w[i] * g.w[k] * g.w[l] * rho * rho *
                     f(static_cast<const Point&>(y));
          }
        }
      }
      total *= 0.125 * (b[1] - b[0]) * (b[3] - b[2]) * (b[5] - b[4]);
      break;
    }
    case CellKind::Box: {
      const int n = static_cast<int>(mesh.nodes[j].size());
      std::vector<int> d(n, 0);
      for (;;) {
        double wprod = 1.0;
        for (int q = 0; q < n; ++q) {
          y[q] = map1(q, g.x[d[q]]);
          wprod *= g.w[d[q]];
        }
        total += wprod * f(static_cast<const Point&>(y));
        int carry = 0;
        while (carry < n && ++d[carry] >= order) {
          d[carry] = 0;
          ++carry;
        }
        if (carry == n) break;
      }
      double scale = 1.0;
      for (int q = 0; q < n; ++q) scale *= 0.5 * (b[2 * q + 1] - b[2 * q]);
      total *= scale;
      break;
    }
  }
  return total / mesh.weights[j];
}

namespace detail {

// 1-D breakpoints over [lo,hi]: `res` uniform cells, with the first and last
// cell split into three geometric layers toward the endpoints.
inline std::vector<double> layered_breaks(double lo, double hi, int res,
                                          bool refine_lo, bool refine_hi) {
  const double h = (hi - lo) / res;
  std::vector<double> b;
  b.push_back(lo);
  if (refine_lo) {
    b.push_back(lo + 0.25 * h);
    b.push_back(lo + 0.5 * h);
  }
  for (int i = 1; i < res; ++i) b.push_back(lo + i * h);
  if (refine_hi) {
    b.push_back(hi - 0.5 * h);
    b.push_back(hi - 0.25 * h);
  }
  b.push_back(hi);
  return b;
}

}  // namespace detail

inline InteriorMesh build_interior_mesh(const Domain& domain, int resolution) {
  if (resolution < 3)
    throw ValidationError("build_interior_mesh: resolution must be >= 3");
  const int n = domain.dim();
  InteriorMesh m;

  if (domain.shape() == Shape::Ball) {
    const BallSpec& b = domain.as_ball();
    m.origin = b.center;
    const auto rb =
        detail::layered_breaks(0.0, b.radius, resolution, false, true);
    if (n == 1) {
      m.kind = CellKind::Segment1D;
      for (std::size_t i = 0; i + 1 < rb.size(); ++i) {
        for (double sgn : {-1.0, 1.0}) {
          const double lo = b.center[0] + sgn * rb[i],
                       hi = b.center[0] + sgn * rb[i + 1];
          m.nodes.push_back(Point{0.5 * (lo + hi)});
          m.weights.push_back(rb[i + 1] - rb[i]);
          m.bounds.push_back({std::min(lo, hi), std::max(lo, hi), 0, 0, 0, 0});
        }
      }
      return m;
    }
    if (n == 2) {
      m.kind = CellKind::PolarSector2D;
      const int mang = std::max(8, static_cast<int>(std::lround(
                                       2.0 * kPi * resolution)));
      for (std::size_t i = 0; i + 1 < rb.size(); ++i) {
        const double vol_r = 0.5 * (rb[i + 1] * rb[i + 1] - rb[i] * rb[i]);
        const double rho = 0.5 * (rb[i] + rb[i + 1]);
        for (int a = 0; a < mang; ++a) {
          const double t0 = 2.0 * kPi * a / mang;
          const double t = t0 + kPi / mang;
          m.nodes.push_back(Point{b.center[0] + rho * std::cos(t),
                                  b.center[1] + rho * std::sin(t)});
          m.weights.push_back(vol_r * 2.0 * kPi / mang);
          m.bounds.push_back(
              {rb[i], rb[i + 1], t0, t0 + 2.0 * kPi / mang, 0, 0});
        }
      }
      return m;
    }
    if (n == 3) {
      m.kind = CellKind::SphericalCell3D;
      const int mmu = 2 * resolution, mphi = 4 * resolution;
      for (std::size_t i = 0; i + 1 < rb.size(); ++i) {
        const double vol_r =
            (std::pow(rb[i + 1], 3) - std::pow(rb[i], 3)) / 3.0;
        const double rho = 0.5 * (rb[i] + rb[i + 1]);
        for (int jm = 0; jm < mmu; ++jm) {
          const double mu0 = -1.0 + 2.0 * jm / mmu;
          const double mu = mu0 + 1.0 / mmu;
          const double sm = std::sqrt(std::max(0.0, 1.0 - mu * mu));
          for (int jp = 0; jp < mphi; ++jp) {
            const double p0 = 2.0 * kPi * jp / mphi;
            const double phi = p0 + kPi / mphi;
            m.nodes.push_back(Point{b.center[0] + rho * sm * std::cos(phi),
                                    b.center[1] + rho * sm * std::sin(phi),
                                    b.center[2] + rho * mu});
            m.weights.push_back(vol_r * (2.0 / mmu) * (2.0 * kPi / mphi));
            m.bounds.push_back({rb[i], rb[i + 1], mu0, mu0 + 2.0 / mmu, p0,
                                p0 + 2.0 * kPi / mphi});
          }
        }
      }
      return m;
    }
    throw ValidationError("build_interior_mesh: ball meshes support n <= 3");
  }

  // Box (and 2-D polytopes over their vertex bounding box).
  Point lo, hi;
  if (domain.shape() == Shape::Box) {
    lo = domain.box_lo();
    hi = domain.box_hi();
  } else {
    if (n != 2)
      throw ValidationError(
          "build_interior_mesh: polytope meshes support only n = 2");
    const BoundaryMesh bm = domain.boundary_mesh(4);
    lo = Point(n, std::numeric_limits<double>::infinity());
    hi = Point(n, -std::numeric_limits<double>::infinity());
    for (const auto& p : bm.nodes)
      for (int i = 0; i < n; ++i) {
        lo[i] = std::min(lo[i], p[i]);
        hi[i] = std::max(hi[i], p[i]);
      }
  }
  m.kind = CellKind::Box;
  std::vector<std::vector<double>> axes(n);
  for (int i = 0; i < n; ++i)
    axes[i] = detail::layered_breaks(lo[i], hi[i], resolution, true, true);
  std::vector<std::size_t> digit(n, 0);
  for (;;) {
    Point p(n);
    double w = 1.0;
    std::array<double, 6> bb{};
    for (int i = 0; i < n; ++i) {
      bb[2 * i] = axes[i][digit[i]];
      bb[2 * i + 1] = axes[i][digit[i] + 1];
      p[i] = 0.5 * (bb[2 * i] + bb[2 * i + 1]);
      w *= bb[2 * i + 1] - bb[2 * i];
    }
    if (domain.shape() == Shape::Box || domain.contains(p)) {
      m.nodes.push_back(std::move(p));
      m.weights.push_back(w);
      m.bounds.push_back(bb);
    }
    int carry = 0;
    while (carry < n && ++digit[carry] + 1 >= axes[carry].size()) {
      digit[carry] = 0;
      ++carry;
    }
    if (carry == n) break;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Discretized Green operator G_D on an interior mesh. Closed-form entries on
// balls (and 1-D intervals); Monte Carlo entries elsewhere, using the walk
// from the shallower node of each pair and the symmetry G_D(x,y) = G_D(y,x).

struct MeshGreenOperator {
  Domain domain = Domain::ball(Point{0.0}, 1.0);
  StableIndex idx;
  int resolution = 0;
  InteriorMesh mesh;
  Eigen::MatrixXd G;     // G_D(x_i, x_j); diagonal is the cell average
  Eigen::MatrixXd se;    // MC standard errors (zero when closed-form)
  bool mc_built = false;
  int flagged_entries = 0;  // MC entries with se > 10% of magnitude
  double symmetry_defect = 0.0;  // max |G_ij - G_ji| / max G before symmetrization

  int size() const { return static_cast<int>(mesh.nodes.size()); }

  // (G_D v)(x_i) = sum_j G_ij v_j w_j
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    Eigen::VectorXd wv(v.size());
    for (int j = 0; j < v.size(); ++j) wv[j] = v[j] * mesh.weights[j];
    return G * wv;
  }

  int nearest_node(const Point& p) const {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int i = 0; i < size(); ++i) {
      const double d = dist2(p, mesh.nodes[i]);
      if (d < bd) {
        bd = d;
        best = i;
      }
    }
    return best;
  }
};

struct GreenOpOptions {
  std::uint64_t n_samples = 20000;  // walks per MC source node
  RngStream stream{424242, 0};
  McOptions mc;
};

namespace detail {

// Equivalent interval ball for 1-D boxes/polytopes.
inline BallSpec interval_ball(const Domain& d) {
  if (d.shape() == Shape::Ball) return d.as_ball();
  const Point c = d.deepest_point();
  return BallSpec(c, d.dist_to_boundary(c));
}

inline double wrap_angle(double a) {
  while (a < 0.0) a += 2.0 * kPi;
  while (a >= 2.0 * kPi) a -= 2.0 * kPi;
  return a;
}

inline bool cell_contains(const InteriorMesh& m, std::size_t j,
                          const Point& y) {
  const auto& b = m.bounds[j];
  switch (m.kind) {
    case CellKind::Segment1D:
      return y[0] >= b[0] && y[0] <= b[1];
    case CellKind::PolarSector2D: {
      const double dx = y[0] - m.origin[0], dy = y[1] - m.origin[1];
      const double r = std::hypot(dx, dy);
      if (r < b[0] || r > b[1]) return false;
      return wrap_angle(std::atan2(dy, dx) - b[2]) <= b[3] - b[2];
    }
    case CellKind::SphericalCell3D: {
      const double dx = y[0] - m.origin[0], dy = y[1] - m.origin[1],
                   dz = y[2] - m.origin[2];
      const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (r < b[0] || r > b[1]) return false;
      const double mu = dz / r;
      if (mu < b[2] || mu > b[3]) return false;
      return wrap_angle(std::atan2(dy, dx) - b[4]) <= b[5] - b[4];
    }
    case CellKind::Box: {
      for (std::size_t d = 0; d < y.size(); ++d)
        if (y[d] < b[2 * d] || y[d] > b[2 * d + 1]) return false;
      return true;
    }
  }
  return false;
}

// First exit of the ray x + t u from cell j (x inside), by bisection.
inline double cell_ray_exit(const InteriorMesh& m, std::size_t j,
                            const Point& x, const Point& u) {
  double hi = m.cell_diameter(j);
  Point y;
  axpy(y, x, hi, u);
  if (cell_contains(m, j, y)) return hi;
  double lo = 0.0;
  for (int it = 0; it < 50; ++it) {
    const double mid = 0.5 * (lo + hi);
    axpy(y, x, mid, u);
    (cell_contains(m, j, y) ? lo : hi) = mid;
  }
  return lo;
}

// Average over cell j of a kernel with an integrable pole at the cell node:
// polar sweep around the node, clipped to the cell along each ray.
template <class F>
double cell_avg_pole(const InteriorMesh& m, std::size_t j, int n, F&& f) {
  const SphereRule sr = sphere_rule(n, n == 3 ? 8 : 24);
  const Point& x = m.nodes[j];
  double total = 0.0;
  Point y;
  for (std::size_t d = 0; d < sr.dirs.size(); ++d) {
    const double R = cell_ray_exit(m, j, x, sr.dirs[d]);
    if (!(R > 0.0)) continue;
    auto g = [&](double rho) {
      axpy(y, x, rho, sr.dirs[d]);
      return std::pow(rho, n - 1.0) * f(static_cast<const Point&>(y));
    };
    total += sr.weights[d] * graded_panels(g, 0.0, R, 10, 0.3, 12);
  }
  return total / m.weights[j];
}

}  // namespace detail

inline MeshGreenOperator green_operator(const Domain& domain,
                                        const StableIndex& idx, int resolution,
                                        const GreenOpOptions& opts = {}) {
  MeshGreenOperator op;
  op.domain = domain;
  op.idx = idx;
  op.resolution = resolution;
  op.mesh = build_interior_mesh(domain, resolution);
  const int N = op.size();
  op.G.setZero(N, N);
  op.se.setZero(N, N);

  const bool closed = domain.shape() == Shape::Ball || idx.n == 1;
  if (closed) {
    const BallSpec ball = detail::interval_ball(domain);
    // midpoint entries far from the pole, cell averages near it
    for (int i = 0; i < N; ++i) {
      const double di = op.mesh.cell_diameter(i);
      for (int j = i + 1; j < N; ++j) {
        const double near =
            1.8 * std::max(di, op.mesh.cell_diameter(j));
        double g;
        if (dist(op.mesh.nodes[i], op.mesh.nodes[j]) < near) {
          const Point& xi = op.mesh.nodes[i];
          g = 0.5 *
              (cell_average(op.mesh, j,
                            [&](const Point& y) {
                              return green_ball(idx, ball, xi, y);
                            }) +
               cell_average(op.mesh, i, [&](const Point& y) {
                 return green_ball(idx, ball, op.mesh.nodes[j], y);
               }));
        } else {
          g = green_ball(idx, ball, op.mesh.nodes[i], op.mesh.nodes[j]);
        }
        op.G(i, j) = g;
        op.G(j, i) = g;
      }
      op.G(i, i) = detail::cell_avg_pole(
          op.mesh, i, idx.n,
          [&](const Point& y) { return green_ball(idx, ball, op.mesh.nodes[i], y); });
    }
    return op;
  }

  if (!idx.transient())
    throw ValidationError(
        "green_operator: MC route needs the transient regime (n > alpha)");
  op.mc_built = true;
  const KernelConstants kc = KernelConstants::make(idx);

  // depth-ordered sources; exits from node i serve every pair (i,j) whose
  // deeper member is j
  std::vector<double> depth(N);
  for (int i = 0; i < N; ++i)
    depth[i] = domain.dist_to_boundary(op.mesh.nodes[i]);

  struct RowAcc {
    std::vector<double> s1, s2;
    std::uint64_t n = 0;
  };
  std::atomic<int> next{0};
  std::vector<double> diag_ext(N, 0.0);
  const int nt = effective_threads(opts.mc.threads);
  Eigen::MatrixXd Graw = Eigen::MatrixXd::Zero(N, N);
  Eigen::MatrixXd Sraw = Eigen::MatrixXd::Zero(N, N);
  Eigen::MatrixXd mask = Eigen::MatrixXd::Zero(N, N);

  auto worker = [&]() {
    Point e(idx.n);
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= N) return;
      RngStream row{opts.stream.seed,
                    opts.stream.stream_id * 2654435761ULL + i + 1};
      std::vector<double> s1(N, 0.0), s2(N, 0.0);
      double d1 = 0.0, d2 = 0.0;
      for (std::uint64_t k = 0; k < opts.n_samples; ++k) {
        RngEngine eng(row, k);
        const ExitRecord rec = walk_on_spheres(domain, idx, op.mesh.nodes[i],
                                               opts.mc.shrink, eng,
                                               opts.mc.max_steps);
        for (int j = 0; j < N; ++j) {
          if (j == i) continue;
          // only fill pairs this row is responsible for (shallower source,
          // or same depth class for the symmetry diagnostic)
          if (depth[i] > 2.0 * depth[j]) continue;
          const double g = green_whole(idx, rec.exit_point, op.mesh.nodes[j]);
          s1[j] += g;
          s2[j] += g * g;
        }
        const double gd = green_whole(idx, rec.exit_point, op.mesh.nodes[i]);
        d1 += gd;
        d2 += gd * gd;
      }
      const double nn = static_cast<double>(opts.n_samples);
      const double di = op.mesh.cell_diameter(i);
      for (int j = 0; j < N; ++j) {
        if (j == i || depth[i] > 2.0 * depth[j]) continue;
        const double mean = s1[j] / nn;
        const double var = std::max(0.0, s2[j] / nn - mean * mean);
        // free part averaged over cell j near the pole; the regular part
        // E_x[G(exit, .)] is smooth and stays at the midpoint
        const Point& xi = op.mesh.nodes[i];
        double free_part;
        if (dist(xi, op.mesh.nodes[j]) <
            1.8 * std::max(di, op.mesh.cell_diameter(j))) {
          free_part = cell_average(op.mesh, j, [&](const Point& y) {
            return green_whole(idx, xi, y);
          });
        } else {
          free_part = green_whole(idx, xi, op.mesh.nodes[j]);
        }
        Graw(i, j) = free_part - mean;
        Sraw(i, j) = std::sqrt(var / nn);
        mask(i, j) = 1.0;
      }
      // diagonal: cell-averaged free kernel minus the MC regular part
      const double cell_avg_free = detail::cell_avg_pole(
          op.mesh, i, idx.n, [&](const Point& y) {
            return kc.green_const *
                   std::pow(dist2(op.mesh.nodes[i], y), 0.5 * (idx.alpha - idx.n));
          });
      const double dm = d1 / nn;
      diag_ext[i] = cell_avg_free - dm;
      Sraw(i, i) = std::sqrt(std::max(0.0, d2 / nn - dm * dm) / nn);
    }
  };
  {
    std::vector<std::thread> pool;
    for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  double max_entry = 0.0, defect = 0.0;
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < N; ++j)
      if (mask(i, j) > 0.0) max_entry = std::max(max_entry, Graw(i, j));
  for (int i = 0; i < N; ++i) {
    op.G(i, i) = std::max(diag_ext[i], 0.0);
    op.se(i, i) = Sraw(i, i);
    for (int j = i + 1; j < N; ++j) {
      const bool bij = mask(i, j) > 0.0, bji = mask(j, i) > 0.0;
      double g = 0.0, s = 0.0;
      if (bij && bji) {
        defect = std::max(defect, std::abs(Graw(i, j) - Graw(j, i)));
        g = 0.5 * (Graw(i, j) + Graw(j, i));
        s = 0.5 * std::hypot(Sraw(i, j), Sraw(j, i));
      } else if (bij) {
        g = Graw(i, j);
        s = Sraw(i, j);
      } else if (bji) {
        g = Graw(j, i);
        s = Sraw(j, i);
      }
      g = std::max(g, 0.0);
      op.G(i, j) = op.G(j, i) = g;
      op.se(i, j) = op.se(j, i) = s;
      if (s > 0.1 * std::abs(g) && g > 1e-3 * max_entry)
        ++op.flagged_entries;
    }
  }
  op.symmetry_defect = max_entry > 0.0 ? defect / max_entry : 0.0;
  return op;
}

// ---------------------------------------------------------------------------
// Binary cache with a versioned header, keyed by (domain hash, idx,
// resolution, sampling parameters).

namespace detail {

inline constexpr std::uint32_t kOperatorCacheVersion = 1;

inline void put_bytes(std::ofstream& o, const void* p, std::size_t k) {
  o.write(static_cast<const char*>(p), static_cast<std::streamsize>(k));
}
inline void get_bytes(std::ifstream& in, void* p, std::size_t k) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(k));
  if (!in) throw NumericError("operator cache: truncated file");
}

}  // namespace detail

inline std::uint64_t operator_cache_key(const Domain& domain,
                                        const StableIndex& idx, int resolution,
                                        const GreenOpOptions& opts) {
  std::uint64_t h = domain.hash();
  auto mix = [&h](std::uint64_t v) {
    h ^= v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  };
  std::uint64_t abits;
  std::memcpy(&abits, &idx.alpha, sizeof(abits));
  mix(abits);
  mix(static_cast<std::uint64_t>(idx.n));
  mix(static_cast<std::uint64_t>(resolution));
  mix(opts.n_samples);
  mix(opts.stream.seed);
  mix(opts.stream.stream_id);
  return h;
}

inline void save_operator(const MeshGreenOperator& op, const std::string& path,
                          std::uint64_t key) {
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  if (!o) throw NumericError("operator cache: cannot write " + path);
  const char magic[4] = {'S', 'P', 'G', 'O'};
  detail::put_bytes(o, magic, 4);
  const std::uint32_t ver = detail::kOperatorCacheVersion;
  detail::put_bytes(o, &ver, sizeof(ver));
  detail::put_bytes(o, &key, sizeof(key));
  const std::int32_t n = op.idx.n, res = op.resolution, N = op.size();
  const std::int32_t mc = op.mc_built ? 1 : 0, flagged = op.flagged_entries;
  detail::put_bytes(o, &n, 4);
  detail::put_bytes(o, &op.idx.alpha, 8);
  detail::put_bytes(o, &res, 4);
  detail::put_bytes(o, &N, 4);
  detail::put_bytes(o, &mc, 4);
  detail::put_bytes(o, &flagged, 4);
  detail::put_bytes(o, &op.symmetry_defect, 8);
  for (const auto& p : op.mesh.nodes)
    detail::put_bytes(o, p.data(), sizeof(double) * p.size());
  detail::put_bytes(o, op.mesh.weights.data(), 8 * op.mesh.weights.size());
  detail::put_bytes(o, op.G.data(), 8 * static_cast<std::size_t>(N) * N);
  detail::put_bytes(o, op.se.data(), 8 * static_cast<std::size_t>(N) * N);
}

// Loads a cached operator; the caller supplies domain/idx (they key the
// file) and the expected key. Throws on any mismatch.
inline MeshGreenOperator load_operator(const Domain& domain,
                                       const StableIndex& idx,
                                       const std::string& path,
                                       std::uint64_t key) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NumericError("operator cache: cannot open " + path);
  char magic[4];
  detail::get_bytes(in, magic, 4);
  if (std::memcmp(magic, "SPGO", 4) != 0)
    throw NumericError("operator cache: bad magic");
  std::uint32_t ver;
  detail::get_bytes(in, &ver, sizeof(ver));
  if (ver != detail::kOperatorCacheVersion)
    throw NumericError("operator cache: version mismatch");
  std::uint64_t fkey;
  detail::get_bytes(in, &fkey, sizeof(fkey));
  if (fkey != key) throw NumericError("operator cache: key mismatch");
  MeshGreenOperator op;
  op.domain = domain;
  op.idx = idx;
  std::int32_t n, res, N, mc, flagged;
  double alpha;
  detail::get_bytes(in, &n, 4);
  detail::get_bytes(in, &alpha, 8);
  detail::get_bytes(in, &res, 4);
  detail::get_bytes(in, &N, 4);
  detail::get_bytes(in, &mc, 4);
  detail::get_bytes(in, &flagged, 4);
  detail::get_bytes(in, &op.symmetry_defect, 8);
  if (n != idx.n || alpha != idx.alpha)
    throw NumericError("operator cache: parameter mismatch");
  op.resolution = res;
  op.mc_built = mc != 0;
  op.flagged_entries = flagged;
  op.mesh.nodes.assign(N, Point(n));
  for (auto& p : op.mesh.nodes)
    detail::get_bytes(in, p.data(), sizeof(double) * p.size());
  op.mesh.weights.resize(N);
  detail::get_bytes(in, op.mesh.weights.data(), 8 * op.mesh.weights.size());
  op.G.resize(N, N);
  op.se.resize(N, N);
  detail::get_bytes(in, op.G.data(), 8 * static_cast<std::size_t>(N) * N);
  detail::get_bytes(in, op.se.data(), 8 * static_cast<std::size_t>(N) * N);
  return op;
}

// Build the operator, consulting the cache directory if one is given
// (or the STABLEPOT_CACHE_DIR environment variable).
inline MeshGreenOperator green_operator_cached(const Domain& domain,
                                               const StableIndex& idx,
                                               int resolution,
                                               const GreenOpOptions& opts = {},
                                               std::string cache_dir = {}) {
  if (cache_dir.empty()) {
    if (const char* env = std::getenv("STABLEPOT_CACHE_DIR")) cache_dir = env;
  }
  if (cache_dir.empty()) return green_operator(domain, idx, resolution, opts);
  const std::uint64_t key = operator_cache_key(domain, idx, resolution, opts);
  char name[64];
  std::snprintf(name, sizeof(name), "/spgo_%016llx.bin",
                static_cast<unsigned long long>(key));
  const std::string path = cache_dir + name;
  try {
    return load_operator(domain, idx, path, key);
  } catch (const NumericError&) {
    MeshGreenOperator op = green_operator(domain, idx, resolution, opts);
    save_operator(op, path, key);
    return op;
  }
}

}  // namespace stablepot
