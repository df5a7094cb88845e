#include "pearl/procrustes.hpp"

#include <cmath>
#include <limits>

#include "pearl/errors.hpp"

namespace pearl {

namespace {

constexpr double kNsFailThreshold = 1e-2;
constexpr double kNsInvariant = 1e-3;
constexpr int kPowerIterations = 30;

Matrix layer_norm(const Matrix& x, const Vector& weight, const Vector& bias) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    const double mean = x.row(n).mean();
    const auto centered = x.row(n).array() - mean;
    const double var = centered.square().mean();
    out.row(n) = (centered / std::sqrt(var + 1e-5)).matrix().cwiseProduct(weight.transpose()) +
                 bias.transpose();
  }
  return out;
}

// x * sigmoid(1.702 x), the activation of CLIP's transformer MLPs.
Matrix quick_gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-1.702 * v)); });
}

void check_width(Eigen::Index have, Eigen::Index want, const char* what) {
  if (have != want) {
    fail(ErrorKind::dimension, std::string(what) + ": expected width " +
                                   std::to_string(want) + ", got " + std::to_string(have));
  }
}

Matrix replay_tail(Matrix x, const BlockTail& tail, const PipelineConfig& config,
                   bool& projected) {
  projected = tail.w_o.has_value();
  if (tail.w_o) {
    check_width(tail.w_o->rows(), x.cols(), "W_o rows");
    x = x * *tail.w_o;
    if (tail.b_o) {
      check_width(tail.b_o->size(), x.cols(), "b_o");
      x.rowwise() += tail.b_o->transpose();
    }
  }
  if (config.replay_tail && tail.x_in) {
    if (tail.x_in->rows() != x.rows() || tail.x_in->cols() != x.cols()) {
      fail(ErrorKind::dimension, "X_in must match the attention output shape");
    }
    x += *tail.x_in;
  }
  if (config.replay_tail && tail.mlp) {
    const auto& mlp = *tail.mlp;
    check_width(mlp.fc1.rows(), x.cols(), "mlp.fc1 rows");
    Matrix h = layer_norm(x, mlp.ln_weight, mlp.ln_bias) * mlp.fc1;
    h.rowwise() += mlp.fc1_bias.transpose();
    Matrix y = quick_gelu(h) * mlp.fc2;
    y.rowwise() += mlp.fc2_bias.transpose();
    x += y;
  }
  if (tail.post) {
    check_width(tail.post->proj.rows(), x.cols(), "post.proj rows");
    x = layer_norm(x, tail.post->ln_weight, tail.post->ln_bias) * tail.post->proj;
  }
  return x;
}

}  // namespace

Vector token_weights(const Matrix& q, std::optional<std::size_t> cls_index, bool zero_cls) {
  const Eigen::Index n = q.rows();
  if (n < 1) fail(ErrorKind::dimension, "token_weights needs at least one token");
  Vector w = q.rowwise().norm();
  Vector mask = Vector::Ones(n);
  if (zero_cls && cls_index) {
    if (*cls_index >= static_cast<std::size_t>(n)) {
      fail(ErrorKind::dimension, "CLS index outside token range");
    }
    mask(static_cast<Eigen::Index>(*cls_index)) = 0.0;
  }
  if (mask.sum() == 0.0) mask.setOnes();  // a lone CLS token keeps its weight
  w = w.cwiseProduct(mask);
  const double total = w.sum();
  if (!(total > 0.0)) return mask / mask.sum();
  return w / total;
}

CenteredClouds weighted_center(const Matrix& q, const Matrix& k, const Vector& pi) {
  if (q.rows() != k.rows() || q.cols() != k.cols()) {
    fail(ErrorKind::dimension, "Q and K must share one N x d shape");
  }
  if (pi.size() != q.rows()) fail(ErrorKind::dimension, "weight vector length differs from N");
  CenteredClouds cc;
  cc.pi = pi;
  cc.mu_q = q.transpose() * pi;
  cc.mu_k = k.transpose() * pi;
  cc.q_c = q.rowwise() - cc.mu_q.transpose();
  cc.k_c = k.rowwise() - cc.mu_k.transpose();
  return cc;
}

Matrix cross_covariance(const CenteredClouds& clouds) {
  return clouds.k_c.transpose() * clouds.q_c;
}

double orthogonality_residual(const Matrix& r) {
  return (r.transpose() * r - Matrix::Identity(r.cols(), r.cols())).norm();
}

AlignmentResult polar_orthogonal_svd(const Matrix& m) {
  if (m.rows() != m.cols()) fail(ErrorKind::dimension, "polar factor needs a square matrix");
  if (!m.allFinite()) fail(ErrorKind::validation, "cross-covariance has non-finite entries");
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  AlignmentResult out;
  out.r = svd.matrixU() * svd.matrixV().transpose();
  out.solver_used = PolarSolver::svd;
  const auto& s = svd.singularValues();
  const double smax = s.size() ? s(0) : 0.0;
  const double smin = s.size() ? s(s.size() - 1) : 0.0;
  out.degenerate = !(smin > smax * static_cast<double>(m.rows()) *
                                std::numeric_limits<double>::epsilon() * 16);
  return out;
}

AlignmentResult polar_orthogonal_newton_schulz(const Matrix& m, int iters) {
  if (m.rows() != m.cols()) fail(ErrorKind::dimension, "polar factor needs a square matrix");
  if (iters < 1) fail(ErrorKind::validation, "ns_iters: must be >= 1");
  if (!m.allFinite()) fail(ErrorKind::validation, "cross-covariance has non-finite entries");
  const Eigen::Index d = m.rows();
  if (m.norm() == 0.0) {
    fail(ErrorKind::solver, "Newton-Schulz: zero cross-covariance; use solver=svd");
  }

  // Spectral norm estimate by power iteration on M^T M.
  const Matrix gram = m.transpose() * m;
  Vector v = Vector::Ones(d);
  for (Eigen::Index i = 0; i < d; ++i) v(i) += 0.5 * static_cast<double>(i) / static_cast<double>(d);
  v.normalize();
  double lambda = 0.0;
  for (int i = 0; i < kPowerIterations; ++i) {
    Vector w = gram * v;
    const double norm = w.norm();
    if (norm == 0.0) break;
    v = w / norm;
  }
  lambda = v.dot(gram * v);
  if (!(lambda > 0.0)) {
    fail(ErrorKind::solver, "Newton-Schulz: degenerate spectrum estimate; use solver=svd");
  }

  const Matrix eye = Matrix::Identity(d, d);
  Matrix x = m / std::sqrt(lambda);
  for (int k = 0; k < iters; ++k) {
    x = 0.5 * x * (3.0 * eye - x.transpose() * x);
  }
  const double residual = orthogonality_residual(x);
  if (!(residual <= kNsFailThreshold)) {
    fail(ErrorKind::solver, "Newton-Schulz did not converge in " + std::to_string(iters) +
                                " iterations (||R^T R - I||_F = " + std::to_string(residual) +
                                "); raise ns_iters or use solver=svd");
  }
  AlignmentResult out;
  out.r = std::move(x);
  out.solver_used = PolarSolver::newton_schulz;
  out.iterations = iters;
  return out;
}

AlignmentResult align_keys_to_queries(const CenteredClouds& clouds, PolarSolver solver,
                                      int ns_iters) {
  const Matrix m = cross_covariance(clouds);
  AlignmentResult out;
  if (solver == PolarSolver::newton_schulz) {
    bool converged = false;
    try {
      out = polar_orthogonal_newton_schulz(m, ns_iters);
      // Results past the invariant but inside the error threshold still fall back.
      converged = orthogonality_residual(out.r) <= kNsInvariant;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::solver) throw;
    }
    if (!converged) {
      out = polar_orthogonal_svd(m);
      out.fell_back = true;
    }
  } else {
    out = polar_orthogonal_svd(m);
  }
  out.residual = (clouds.k_c * out.r - clouds.q_c).norm();
  return out;
}

Matrix attention_weights(const HeadTensors& head, const Matrix& r, bool use_key_key,
                         const CenteredClouds& clouds) {
  head.check();
  const Eigen::Index d = head.q.cols();
  if (r.rows() != d || r.cols() != d) fail(ErrorKind::dimension, "rotation must be d x d");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix scores = scale * (head.q * (head.k * r).transpose());
  if (use_key_key) {
    if (clouds.k_c.rows() != head.k.rows() || clouds.k_c.cols() != d) {
      fail(ErrorKind::dimension, "centered keys do not match the head");
    }
    scores += scale * (clouds.k_c * clouds.k_c.transpose());
  }
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const double peak = scores.row(i).maxCoeff();
    scores.row(i) = (scores.row(i).array() - peak).exp();
    scores.row(i) /= scores.row(i).sum();
  }
  return scores;
}

Matrix aligned_attention(const HeadTensors& head, const Matrix& r, bool use_key_key,
                         const CenteredClouds& clouds) {
  return attention_weights(head, r, use_key_key, clouds) * head.v;
}

LogitGrid aligned_logits(const Matrix& features, const PrototypeMatrix& prototypes,
                         std::size_t hp, std::size_t wp, std::size_t* zero_rows) {
  if (static_cast<std::size_t>(features.rows()) != hp * wp) {
    fail(ErrorKind::dimension, "feature rows (" + std::to_string(features.rows()) +
                                   ") differ from patch grid " + std::to_string(hp) + "x" +
                                   std::to_string(wp));
  }
  check_width(features.cols(), static_cast<Eigen::Index>(prototypes.dim()), "patch features");
  const auto& t = prototypes.rows();
  const double alpha = 1.0 / std::sqrt(static_cast<double>(features.cols()));
  const Vector t_norm = t.rowwise().norm();
  LogitGrid out(hp, wp, prototypes.classes());
  std::size_t zeros = 0;
  for (std::size_t p = 0; p < hp * wp; ++p) {
    const auto row = features.row(static_cast<Eigen::Index>(p));
    const double norm = row.norm();
    if (norm == 0.0) {
      ++zeros;
      continue;
    }
    const Vector dots = t * row.transpose();
    for (std::size_t c = 0; c < prototypes.classes(); ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      out.at(p / wp, p % wp, c) = alpha * dots(ci) / (norm * t_norm(ci));
    }
  }
  if (zero_rows) *zero_rows = zeros;
  return out;
}

HeadAlignment align_head(const HeadTensors& head, const PipelineConfig& config) {
  head.check();
  const Vector pi = token_weights(head.q, head.cls_index, config.zero_cls_weight);
  const CenteredClouds clouds = weighted_center(head.q, head.k, pi);
  HeadAlignment out;
  if (config.identity_rotation) {
    const auto d = head.q.cols();
    out.alignment.r = Matrix::Identity(d, d);
    out.alignment.solver_used = config.solver;
    out.alignment.residual = (clouds.k_c - clouds.q_c).norm();
  } else {
    out.alignment = align_keys_to_queries(clouds, config.solver, config.ns_iters);
  }
  out.output = aligned_attention(head, out.alignment.r, config.use_key_key, clouds);
  return out;
}

BlockResult align_block(const BlockTensors& block, const PrototypeMatrix& prototypes,
                        const PipelineConfig& config, std::size_t hp, std::size_t wp) {
  if (block.heads.empty()) fail(ErrorKind::dimension, "block has no attention heads");
  const auto n = block.heads.front().q.rows();
  const auto d = block.heads.front().q.cols();
  const auto cls = block.heads.front().cls_index;
  for (const auto& h : block.heads) {
    h.check();
    if (h.q.rows() != n || h.q.cols() != d || h.cls_index != cls) {
      fail(ErrorKind::dimension, "heads disagree on token count, width or CLS index");
    }
  }
  const std::size_t patches = static_cast<std::size_t>(n) - (cls ? 1 : 0);
  if (patches != hp * wp) {
    fail(ErrorKind::dimension, std::to_string(patches) + " patch tokens do not fill a " +
                                   std::to_string(hp) + "x" + std::to_string(wp) + " grid");
  }

  const auto heads = static_cast<Eigen::Index>(block.heads.size());
  BlockResult result;
  Matrix concat(n, d * heads);
  for (Eigen::Index j = 0; j < heads; ++j) {
    auto aligned = align_head(block.heads[static_cast<std::size_t>(j)], config);
    concat.middleCols(j * d, d) = aligned.output;
    result.alignments.push_back(std::move(aligned.alignment));
  }

  const Matrix tokens = replay_tail(std::move(concat), block.tail, config, result.projected);
  Matrix features(static_cast<Eigen::Index>(patches), tokens.cols());
  Eigen::Index row = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (cls && static_cast<std::size_t>(i) == *cls) continue;
    features.row(row++) = tokens.row(i);
  }
  result.logits = aligned_logits(features, prototypes, hp, wp, &result.zero_norm_rows);
  return result;
}

}  // namespace pearl
