// Independent reference computations for tests. These avoid the library's
// own helpers wherever a direct loop is short enough to write out.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "pearl/types.hpp"

namespace oracle {

using pearl::Matrix;
using pearl::Vector;

struct Rng {
  explicit Rng(std::uint64_t seed) : engine(seed) {}
  std::mt19937_64 engine;

  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine); }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine);
  }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine); }

  Matrix gaussian(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
    return m;
  }
  // Haar-distributed orthogonal matrix: QR of a Gaussian with the sign of
  // R's diagonal folded into Q.
  Matrix orthogonal(Eigen::Index d) {
    Eigen::HouseholderQR<Matrix> qr(gaussian(d, d));
    Matrix q = qr.householderQ();
    const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index i = 0; i < d; ++i) {
      if (r(i, i) < 0) q.col(i) = -q.col(i);
    }
    return q;
  }
  Matrix unit_rows(Eigen::Index rows, Eigen::Index cols) {
    Matrix m = gaussian(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) m.row(i) /= m.row(i).norm();
    return m;
  }
};

inline Vector softmax(const Vector& x) {
  Vector e = (x.array() - x.maxCoeff()).exp();
  return e / e.sum();
}

// Single-head attention straight from the formula, with its own centering.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& r,
                        bool key_key, const Vector& pi) {
  const Eigen::Index n = q.rows(), d = q.cols();
  Vector mu_k = Vector::Zero(d);
  for (Eigen::Index t = 0; t < n; ++t) mu_k += pi(t) * k.row(t).transpose();
  Matrix out(n, v.cols());
  for (Eigen::Index a = 0; a < n; ++a) {
    Vector s(n);
    for (Eigen::Index b = 0; b < n; ++b) {
      double dot = 0.0;
      for (Eigen::Index i = 0; i < d; ++i) {
        double kr = 0.0;
        for (Eigen::Index l = 0; l < d; ++l) kr += k(b, l) * r(l, i);
        dot += q(a, i) * kr;
      }
      if (key_key) {
        for (Eigen::Index i = 0; i < d; ++i) dot += (k(a, i) - mu_k(i)) * (k(b, i) - mu_k(i));
      }
      s(b) = dot / std::sqrt(static_cast<double>(d));
    }
    const Vector w = softmax(s);
    out.row(a) = (w.transpose() * v);
  }
  return out;
}

struct DenseEdge {
  std::size_t i, j;
  double a;
};

inline Matrix dense_operator(const Vector& rho, const std::vector<DenseEdge>& edges, double tau) {
  Matrix a = Matrix::Zero(rho.size(), rho.size());
  for (Eigen::Index i = 0; i < rho.size(); ++i) a(i, i) = rho(i);
  for (const auto& e : edges) {
    a(e.i, e.i) += tau * e.a;
    a(e.j, e.j) += tau * e.a;
    a(e.i, e.j) -= tau * e.a;
    a(e.j, e.i) -= tau * e.a;
  }
  return a;
}

// Minimizer of the propagation energy via a dense LDLT factorization.
inline Matrix dense_solve(const Vector& rho, const std::vector<DenseEdge>& edges, double tau,
                          const Matrix& z) {
  const Matrix a = dense_operator(rho, edges, tau);
  const Matrix b = rho.asDiagonal() * z;
  return a.ldlt().solve(b);
}

// 1/2 sum_i rho_i |F_i - Z_i|^2 + tau/2 sum_edges a_ij |F_i - F_j|^2
inline double energy(const Matrix& f, const Matrix& z, const Vector& rho,
                     const std::vector<DenseEdge>& edges, double tau) {
  double e = 0.0;
  for (Eigen::Index i = 0; i < f.rows(); ++i) e += 0.5 * rho(i) * (f.row(i) - z.row(i)).squaredNorm();
  for (const auto& ed : edges) e += 0.5 * tau * ed.a * (f.row(ed.i) - f.row(ed.j)).squaredNorm();
  return e;
}

// 4-neighbor edges on a row-major h x w grid, right neighbors before down.
inline std::vector<std::pair<std::size_t, std::size_t>> grid_pairs(std::size_t h, std::size_t w) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t s = 0; s < w; ++s) {
      if (s + 1 < w) out.emplace_back(r * w + s, r * w + s + 1);
      if (r + 1 < h) out.emplace_back(r * w + s, (r + 1) * w + s);
    }
  }
  return out;
}

// Mean over the floor-bounded rectangle of each output cell.
inline std::vector<double> pool(const std::vector<double>& in, std::size_t h, std::size_t w,
                                std::size_t gh, std::size_t gw) {
  std::vector<double> out(gh * gw, 0.0);
  for (std::size_t r = 0; r < gh; ++r) {
    for (std::size_t s = 0; s < gw; ++s) {
      const std::size_t y0 = r * h / gh, y1 = (r + 1) * h / gh;
      const std::size_t x0 = s * w / gw, x1 = (s + 1) * w / gw;
      double sum = 0.0;
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) sum += in[y * w + x];
      }
      out[r * gw + s] = sum / static_cast<double>((y1 - y0) * (x1 - x0));
    }
  }
  return out;
}

// Half-pixel-center bilinear sample of one channel.
inline double bilinear(const std::vector<double>& in, std::size_t h, std::size_t w,
                       std::size_t oh, std::size_t ow, std::size_t y, std::size_t x) {
  auto coord = [](std::size_t o, std::size_t n_in, std::size_t n_out) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    return std::max(s, 0.0);
  };
  const double sy = coord(y, h, oh), sx = coord(x, w, ow);
  const std::size_t y0 = std::min(static_cast<std::size_t>(sy), h - 1);
  const std::size_t x0 = std::min(static_cast<std::size_t>(sx), w - 1);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
  return (1 - fy) * ((1 - fx) * in[y0 * w + x0] + fx * in[y0 * w + x1]) +
         fy * ((1 - fx) * in[y1 * w + x0] + fx * in[y1 * w + x1]);
}

}  // namespace oracle
