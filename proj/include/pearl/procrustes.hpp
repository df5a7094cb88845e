#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "pearl/config.hpp"
#include "pearl/types.hpp"

namespace pearl {

/// Weighted-centered query and key clouds of one head.
struct CenteredClouds {
  Matrix q_c;   // N x d
  Matrix k_c;   // N x d
  Vector mu_q;  // d
  Vector mu_k;  // d
  Vector pi;    // N, nonnegative, sums to 1
};

struct AlignmentResult {
  Matrix r;  // d x d orthogonal
  PolarSolver solver_used = PolarSolver::svd;
  /// ||K_c R - Q_c||_F; only known once the clouds are at hand.
  std::optional<double> residual;
  int iterations = 0;
  /// Cross-covariance was rank deficient; R is one valid orthogonal completion.
  bool degenerate = false;
  /// Newton-Schulz was requested but SVD produced R.
  bool fell_back = false;
};

/// Token weights proportional to query row norms, normalized to sum to 1.
/// With zero_cls the CLS entry is zeroed before normalizing. If every
/// remaining row norm is zero the weights fall back to uniform.
Vector token_weights(const Matrix& q, std::optional<std::size_t> cls_index, bool zero_cls);

CenteredClouds weighted_center(const Matrix& q, const Matrix& k, const Vector& pi);

/// K_c^T Q_c.
Matrix cross_covariance(const CenteredClouds& clouds);

/// R = U V^T from a full SVD of m.
AlignmentResult polar_orthogonal_svd(const Matrix& m);

/// Orthogonal polar factor of m by the cubic Newton-Schulz iteration
///   X <- X (3I - X^T X) / 2
/// after dividing m by a power-iteration estimate of its spectral norm.
/// Uses matrix products only. Throws a solver error when m is zero or the
/// orthogonality residual ||X^T X - I||_F still exceeds 1e-2 after `iters`
/// steps (rank deficiency or poor conditioning); callers fall back to SVD.
AlignmentResult polar_orthogonal_newton_schulz(const Matrix& m, int iters);

double orthogonality_residual(const Matrix& r);

/// Solves the orthogonal Procrustes problem min ||K_c R - Q_c||_F over O(d).
/// A Newton-Schulz result with ||R^T R - I||_F above 1e-3 is replaced by the
/// SVD solution and marked `fell_back`.
AlignmentResult align_keys_to_queries(const CenteredClouds& clouds, PolarSolver solver,
                                      int ns_iters);

/// Row-stochastic attention softmax(d^{-1/2} Q (K R)^T [+ d^{-1/2} K_c K_c^T]).
Matrix attention_weights(const HeadTensors& head, const Matrix& r, bool use_key_key,
                         const CenteredClouds& clouds);

/// attention_weights(...) * V.
Matrix aligned_attention(const HeadTensors& head, const Matrix& r, bool use_key_key,
                         const CenteredClouds& clouds);

/// Patch-text logits D^{-1/2} cos(feature, t_c) on an hp x wp patch grid.
/// `features` holds exactly hp*wp patch rows (no CLS). A zero-norm row scores
/// 0 for every class and is counted in *zero_rows when given.
LogitGrid aligned_logits(const Matrix& features, const PrototypeMatrix& prototypes,
                         std::size_t hp, std::size_t wp, std::size_t* zero_rows = nullptr);

/// Tensors that follow the attention heads inside the last block.
struct BlockTail {
  std::optional<Matrix> w_o;  // D x D, applied as Y * W_o
  std::optional<Vector> b_o;
  std::optional<Matrix> x_in;  // N x D residual stream entering the block

  struct Mlp {
    Vector ln_weight, ln_bias;
    Matrix fc1;  // D x hidden
    Vector fc1_bias;
    Matrix fc2;  // hidden x D
    Vector fc2_bias;
  };
  std::optional<Mlp> mlp;

  struct Output {
    Vector ln_weight, ln_bias;
    Matrix proj;  // D x E, maps into the prototype space
  };
  std::optional<Output> post;
};

struct BlockTensors {
  std::vector<HeadTensors> heads;
  BlockTail tail;
};

struct HeadAlignment {
  AlignmentResult alignment;
  Matrix output;  // N x d
};

struct BlockResult {
  LogitGrid logits;
  std::vector<AlignmentResult> alignments;  // by head index
  bool projected = true;                    // false when W_o was absent
  std::size_t zero_norm_rows = 0;
};

/// Weights, centering, polar solve and aligned attention for one head.
/// Newton-Schulz failures fall back to SVD and set `fell_back`.
HeadAlignment align_head(const HeadTensors& head, const PipelineConfig& config);

/// Aligns every head, concatenates outputs in head order, replays the block
/// tail and scores the hp x wp patch rows against the prototypes.
BlockResult align_block(const BlockTensors& block, const PrototypeMatrix& prototypes,
                        const PipelineConfig& config, std::size_t hp, std::size_t wp);

}  // namespace pearl
