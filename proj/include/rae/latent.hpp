#pragma once

// PCA over per-timestep latent vectors: cyclic Jacobi eigensolver, Gram-matrix
// fitting for N << D, projection/inverse projection, and interpolation of
// synthetic timesteps in PCA space.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rae/binary_io.hpp"
#include "rae/error.hpp"

namespace rae {

struct LatentVector {
  int timestep = 0;
  std::vector<double> values;
};

struct PcaBasis {
  std::vector<double> mean;
  // Row i is the i-th principal direction; rows are orthonormal.
  std::vector<std::vector<double>> components;
  std::vector<double> eigenvalues;  // descending, clamped at 0

  std::size_t dim() const { return mean.size(); }
  std::size_t rank() const { return components.size(); }
};

// Dense symmetric matrix, row-major n x n.
struct SymMatrix {
  std::size_t n = 0;
  std::vector<double> a;

  explicit SymMatrix(std::size_t size = 0) : n(size), a(size * size, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }
};

struct EigenDecomposition {
  std::vector<double> values;                // descending
  std::vector<std::vector<double>> vectors;  // vectors[i] pairs with values[i]
  int sweeps = 0;
};

// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops to
// tol * max(1, ||A||_F).
inline EigenDecomposition jacobi_eigen(SymMatrix m, double tol = 1e-12, int max_sweeps = 100) {
  const std::size_t n = m.n;
  SymMatrix v(n);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;
  double frob = 0.0;
  for (double x : m.a) frob += x * x;
  const double target = tol * std::max(1.0, std::sqrt(frob));
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += m(i, j) * m(i, j);
    return std::sqrt(s);
  };
  EigenDecomposition out;
  while (off_norm() > target) {
    if (out.sweeps++ >= max_sweeps) throw Error("jacobi_eigen: no convergence after " + std::to_string(max_sweeps) + " sweeps");
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m(p, q);
        if (apq == 0.0) continue;
        const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = m(k, p), akq = m(k, q);
          m(k, p) = c * akp - s * akq;
          m(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = m(p, k), aqk = m(q, k);
          m(p, k) = c * apk - s * aqk;
          m(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return m(i, i) > m(j, j); });
  for (auto i : order) {
    out.values.push_back(m(i, i));
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v(k, i);
    out.vectors.push_back(std::move(col));
  }
  return out;
}

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Makes the largest-magnitude entry positive (first one on ties).
inline void canonical_sign(std::vector<double>& c) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < c.size(); ++i)
    if (std::abs(c[i]) > std::abs(c[best])) best = i;
  if (c[best] < 0)
    for (double& x : c) x = -x;
}

inline void normalize(std::vector<double>& c) {
  const double nrm = std::sqrt(dot(c, c));
  for (double& x : c) x /= nrm;
}

// Orthogonalises `c` against `basis` (two passes of Gram-Schmidt) and
// normalises it. Returns false if nothing independent remains.
inline bool orthonormalize_against(std::vector<double>& c, const std::vector<std::vector<double>>& basis) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& b : basis) {
      const double d = dot(c, b);
      for (std::size_t i = 0; i < c.size(); ++i) c[i] -= d * b[i];
    }
  const double nrm = std::sqrt(dot(c, c));
  if (nrm < 1e-6) return false;
  for (double& x : c) x /= nrm;
  return true;
}

}  // namespace detail

enum class PcaMethod { automatic, gram, covariance };

// Fits the top-k principal directions of the latents. The Gram route solves
// the N x N problem X X^T/(N-1) and lifts eigenvectors with X^T u; the
// covariance route solves the D x D problem directly. `automatic` picks Gram
// when N < D.
inline PcaBasis fit_pca(const std::vector<LatentVector>& latents, std::size_t k,
                        PcaMethod method = PcaMethod::automatic) {
  const std::size_t n = latents.size();
  if (n < 2) throw ConfigError("fit_pca: need at least 2 latent vectors, got " + std::to_string(n));
  const std::size_t d = latents[0].values.size();
  for (const auto& l : latents)
    if (l.values.size() != d) throw ShapeError("fit_pca: latent vectors differ in length");
  if (k > std::min(d, n - 1)) {
    throw ConfigError("fit_pca: k=" + std::to_string(k) + " exceeds min(D, N-1)=" +
                      std::to_string(std::min(d, n - 1)));
  }

  PcaBasis basis;
  basis.mean.assign(d, 0.0);
  for (const auto& l : latents)
    for (std::size_t i = 0; i < d; ++i) basis.mean[i] += l.values[i];
  for (double& m : basis.mean) m /= static_cast<double>(n);

  std::vector<std::vector<double>> centered(n, std::vector<double>(d));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i) centered[r][i] = latents[r].values[i] - basis.mean[i];

  const double denom = static_cast<double>(n - 1);
  const bool use_gram = method == PcaMethod::gram || (method == PcaMethod::automatic && n < d);
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;
  if (use_gram) {
    SymMatrix g(n);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a; b < n; ++b) g(a, b) = g(b, a) = detail::dot(centered[a], centered[b]) / denom;
    auto eig = jacobi_eigen(std::move(g));
    double scale = 0.0;
    for (double v : eig.values) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < eig.values.size() && vectors.size() < k; ++i) {
      const double lambda = eig.values[i];
      if (lambda <= 1e-12 * std::max(1.0, scale)) break;
      std::vector<double> c(d, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        const double u = eig.vectors[i][r];
        for (std::size_t j = 0; j < d; ++j) c[j] += u * centered[r][j];
      }
      if (!detail::orthonormalize_against(c, vectors)) break;
      values.push_back(lambda);
      vectors.push_back(std::move(c));
    }
  } else {
    SymMatrix cov(d);
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) {
        double s = 0.0;
        for (std::size_t r = 0; r < n; ++r) s += centered[r][a] * centered[r][b];
        cov(a, b) = cov(b, a) = s / denom;
      }
    auto eig = jacobi_eigen(std::move(cov));
    for (std::size_t i = 0; i < k; ++i) {
      values.push_back(eig.values[i]);
      vectors.push_back(eig.vectors[i]);
    }
  }

  const bool zero_variance = values.empty() || values[0] <= 1e-300;
  if (zero_variance && k > 0) throw ConfigError("fit_pca: latents have zero variance");

  // Directions beyond the data rank: complete deterministically from the
  // standard basis.
  for (std::size_t e = 0; vectors.size() < k && e < d; ++e) {
    std::vector<double> c(d, 0.0);
    c[e] = 1.0;
    if (detail::orthonormalize_against(c, vectors)) {
      values.push_back(0.0);
      vectors.push_back(std::move(c));
    }
  }
  for (auto& c : vectors) detail::canonical_sign(c);
  for (double& v : values)
    if (v < 0.0) {
      if (v < -1e-10) throw Error("fit_pca: negative eigenvalue " + std::to_string(v));
      v = 0.0;
    }
  basis.components = std::move(vectors);
  basis.eigenvalues = std::move(values);
  return basis;
}

inline std::vector<double> project(const PcaBasis& basis, std::span<const double> latent) {
  if (latent.size() != basis.dim()) {
    throw ShapeError("project: latent has length " + std::to_string(latent.size()) + ", basis expects " +
                     std::to_string(basis.dim()));
  }
  std::vector<double> centered(latent.size());
  for (std::size_t i = 0; i < centered.size(); ++i) centered[i] = latent[i] - basis.mean[i];
  std::vector<double> coords;
  for (const auto& c : basis.components) coords.push_back(detail::dot(c, centered));
  return coords;
}

inline std::vector<double> inverse_project(const PcaBasis& basis, std::span<const double> coords) {
  if (coords.size() != basis.rank()) {
    throw ShapeError("inverse_project: got " + std::to_string(coords.size()) + " coordinates, basis has rank " +
                     std::to_string(basis.rank()));
  }
  std::vector<double> out = basis.mean;
  for (std::size_t i = 0; i < coords.size(); ++i)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += coords[i] * basis.components[i][j];
  return out;
}

inline std::vector<double> reconstruct(const PcaBasis& basis, std::span<const double> latent) {
  return inverse_project(basis, project(basis, latent));
}

// Blends the PCA coordinates of a and b as (1-t)*p_a + t*p_b and maps the
// result back to latent space.
inline LatentVector interpolate_timestep(const PcaBasis& basis, const LatentVector& a, const LatentVector& b,
                                         double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("interpolate_timestep: t must lie in [0,1]");
  if (a.values.size() != b.values.size()) throw ShapeError("interpolate_timestep: latent lengths differ");
  const auto pa = project(basis, a.values);
  const auto pb = project(basis, b.values);
  std::vector<double> p(pa.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = (1.0 - t) * pa[i] + t * pb[i];
  LatentVector out;
  out.timestep = -1;
  out.values = inverse_project(basis, p);
  return out;
}

// CSV `timestep,pc1,pc2` for plotting.
inline void export_projection_csv(const PcaBasis& basis, const std::vector<LatentVector>& latents,
                                  const std::filesystem::path& path) {
  if (basis.rank() < 2) throw ConfigError("export_projection_csv: basis needs at least 2 components");
  io::AtomicFile f(path);
  auto& os = f.stream();
  os << "timestep,pc1,pc2\n";
  char buf[128];
  for (const auto& l : latents) {
    const auto p = project(basis, l.values);
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", l.timestep, p[0], p[1]);
    os << buf;
  }
  f.commit();
}

}  // namespace rae
