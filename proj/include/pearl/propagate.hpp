#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include <Eigen/SparseCore>

#include "pearl/config.hpp"
#include "pearl/container.hpp"
#include "pearl/types.hpp"

namespace pearl {

/// Row-stochastic class affinity built from prototype similarities.
struct ClassGraph {
  Matrix g;  // C x C
  double tau_s = 0.0;
  double beta = 0.0;
};

/// rownorm(rowsoftmax(T T^T / tau_s) + beta I).
ClassGraph class_graph(const PrototypeMatrix& prototypes, double tau_s, double beta);

/// Logits and image pooled onto the propagation grid. Nodes are numbered
/// row-major: node i = r * grid_w + s.
struct GridField {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  Matrix z_g;      // nodes x C pooled logits
  GrayImage gray;  // grid_h x grid_w pooled intensity
  // Filled by node_stats.
  Matrix p;        // nodes x C class probabilities
  Vector gamma;    // peak probability
  Vector u;        // agreement p^T G p
  Vector rho;      // data-term confidence

  std::size_t nodes() const { return grid_h * grid_w; }
  std::size_t classes() const { return static_cast<std::size_t>(z_g.cols()); }
};

GridField pool_to_grid(const LogitGrid& z, const GrayImage& gray, std::size_t grid_h,
                       std::size_t grid_w);

/// p_i = softmax(z_i); gamma_i = max p_i; u_i = p_i^T G p_i;
/// rho_i = max(gamma_i, epsilon)^2 (1 + u_i).
GridField node_stats(GridField field, const ClassGraph& graph, double epsilon);

struct Edge {
  std::size_t i = 0;
  std::size_t j = 0;
  double image = 0.0;  // exp(-kappa |gray_i - gray_j|)
  double gate = 0.0;   // clip(p_i^T G p_j, 0, 1)
  double weight = 0.0; // image * (1 + lambda * gate)
};

/// Undirected 4-neighbor edges of the grid, each listed once with i < j.
struct EdgeSet {
  std::vector<Edge> edges;
  double kappa = 0.0;
  double lambda = 0.0;
};

EdgeSet edge_set(const GridField& field, const ClassGraph& graph, double kappa, double lambda);

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Weighted graph Laplacian (degree minus adjacency).
SparseMatrix graph_laplacian(const EdgeSet& edges, std::size_t nodes);

/// A = D_rho + tau L and B = D_rho Z_g.
struct LinearSystem {
  SparseMatrix a;
  Matrix b;  // nodes x C
};

LinearSystem assemble_system(const Vector& rho, const EdgeSet& edges, double tau,
                             const Matrix& z_g);

struct CgResult {
  Matrix f;                   // nodes x C
  Vector relative_residual;   // ||b - A f|| / ||b|| per channel
  int iterations = 0;         // iterations actually taken (<= requested)
};

/// Called after every CG iteration with the current iterate.
using CgObserver = std::function<void(int iteration, const Matrix& f)>;

/// Plain conjugate gradients on every column of B in lockstep, starting from
/// `initial`, for exactly `iters` iterations. A channel stops early only once
/// its residual reaches round-off level (1e-15 ||b||). Throws a solver error
/// on a non-positive curvature p^T A p or when a residual grows more than
/// tenfold in one step.
CgResult cg_solve(const SparseMatrix& a, const Matrix& b, const Matrix& initial, int iters,
                  const CgObserver& observer = {});

struct Segmentation {
  LabelMap labels;
  LogitGrid field;  // upsampled scores, out_h x out_w x C
};

LogitGrid nodes_to_grid(const Matrix& values, std::size_t grid_h, std::size_t grid_w);

/// Bilinear upsampling to out_h x out_w, then per-pixel argmax with ties going
/// to the lowest class index. Requires out extents >= grid extents.
Segmentation finalize(const LogitGrid& f_g, std::size_t out_h, std::size_t out_w);

/// Per-pixel argmax, lowest index on ties.
LabelMap argmax_labels(const LogitGrid& scores);

struct PropagationResult {
  Segmentation segmentation;
  ClassGraph graph;
  GridField field;
  EdgeSet edges;
  CgResult solve;
  double tau = 0.0;
};

/// Pool, build the class graph and edge weights, solve on the grid and upsample.
PropagationResult propagate(const LogitGrid& z, const GrayImage& gray,
                            const PrototypeMatrix& prototypes, const PipelineConfig& config,
                            std::size_t out_h, std::size_t out_w);

/// Debug dump: "G" (C x C), "rho" (Hg x Wg), "edges" (E x 3: i, j, a),
/// "A_diag" (nodes) and "tau" (1).
TensorContainer dump_system(const PropagationResult& result);

}  // namespace pearl
