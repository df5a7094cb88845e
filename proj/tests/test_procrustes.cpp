#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "pearl/errors.hpp"
#include "pearl/procrustes.hpp"

using namespace pearl;

namespace {

Matrix diag(std::initializer_list<double> v) {
  Vector d(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) d(i++) = x;
  return d.asDiagonal();
}

bool throws_kind(ErrorKind kind, auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind() == kind;
  }
  return false;
}

// N x d random head with a CLS token at index 0.
HeadTensors random_head(oracle::Rng& rng, Eigen::Index n, Eigen::Index d) {
  return {rng.gaussian(n, d), rng.gaussian(n, d), rng.gaussian(n, d), std::size_t{0}};
}

Matrix layer_norm_oracle(const Matrix& x, const Vector& w, const Vector& b) {
  Matrix out = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mean = 0, var = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) mean += x(i, j) / x.cols();
    for (Eigen::Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean) / x.cols();
    for (Eigen::Index j = 0; j < x.cols(); ++j) out(i, j) = (x(i, j) - mean) / std::sqrt(var + 1e-5) * w(j) + b(j);
  }
  return out;
}

double cosine(const Vector& a, const Vector& b) { return a.dot(b) / (a.norm() * b.norm()); }

}  // namespace

TEST_CASE("token weights") {
  SUBCASE("equal norms give uniform weights") {
    Matrix q(4, 2);
    q << 1, 0, 0, 1, -1, 0, 0, -1;
    const Vector w = token_weights(q, std::nullopt, false);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(w(i) == doctest::Approx(0.25));
  }
  SUBCASE("norms 3, 4, 0") {
    Matrix q(3, 2);
    q << 3, 0, 0, 4, 0, 0;
    const Vector w = token_weights(q, std::nullopt, false);
    CHECK(w(0) == doctest::Approx(3.0 / 7));
    CHECK(w(1) == doctest::Approx(4.0 / 7));
    CHECK(w(2) == 0.0);
  }
  SUBCASE("CLS zeroing") {
    oracle::Rng rng(5);
    const Matrix q = rng.gaussian(5, 3);
    const Vector w = token_weights(q, std::size_t{0}, true);
    CHECK(w(0) == 0.0);
    double total = 0;
    for (Eigen::Index i = 1; i < 5; ++i) total += std::sqrt(q.row(i).squaredNorm());
    for (Eigen::Index i = 1; i < 5; ++i) {
      CHECK(w(i) == doctest::Approx(std::sqrt(q.row(i).squaredNorm()) / total).epsilon(1e-12));
    }
    CHECK(w.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(token_weights(q, std::size_t{0}, false)(0) > 0.0);
  }
  SUBCASE("all-zero queries fall back to uniform") {
    const Vector w = token_weights(Matrix::Zero(4, 3), std::nullopt, false);
    for (Eigen::Index i = 0; i < 4; ++i) CHECK(w(i) == doctest::Approx(0.25));
  }
}

TEST_CASE("weighted centering") {
  oracle::Rng rng(7);
  SUBCASE("identical clouds, uniform weights") {
    const Matrix q = rng.gaussian(5, 3);
    const auto cc = weighted_center(q, q, Vector::Constant(5, 0.2));
    CHECK((cc.mu_q - q.colwise().mean().transpose()).norm() < 1e-12);
    CHECK(cc.q_c == cc.k_c);
  }
  SUBCASE("point mass") {
    const Matrix q = rng.gaussian(4, 3), k = rng.gaussian(4, 3);
    Vector pi = Vector::Zero(4);
    pi(2) = 1.0;
    const auto cc = weighted_center(q, k, pi);
    CHECK((cc.mu_q - q.row(2).transpose()).norm() < 1e-15);
    CHECK(cc.q_c.row(2).norm() < 1e-15);
    CHECK(cc.k_c.row(2).norm() < 1e-15);
  }
  SUBCASE("weighted mean of centered rows vanishes") {
    for (int trial = 0; trial < 50; ++trial) {
      const Matrix q = rng.gaussian(6, 3), k = rng.gaussian(6, 3);
      const Vector pi = token_weights(q, std::size_t{0}, trial % 2 == 0);
      const auto cc = weighted_center(q, k, pi);
      Vector sq = Vector::Zero(3), sk = Vector::Zero(3);
      for (Eigen::Index n = 0; n < 6; ++n) {
        sq += pi(n) * cc.q_c.row(n).transpose();
        sk += pi(n) * cc.k_c.row(n).transpose();
      }
      CHECK(sq.norm() < 1e-6);
      CHECK(sk.norm() < 1e-6);
      CHECK(pi.minCoeff() >= 0.0);
      CHECK(std::abs(pi.sum() - 1.0) < 1e-6);
    }
  }
  SUBCASE("shape mismatch") {
    CHECK(throws_kind(ErrorKind::dimension, [&] {
      weighted_center(rng.gaussian(4, 3), rng.gaussian(4, 2), Vector::Constant(4, 0.25));
    }));
  }
}

TEST_CASE("cross-covariance") {
  oracle::Rng rng(9);
  SUBCASE("K_c = Q_c gives a symmetric PSD matrix") {
    const Matrix q = rng.gaussian(8, 4);
    CenteredClouds cc{q, q, {}, {}, {}};
    const Matrix m = cross_covariance(cc);
    CHECK((m - m.transpose()).norm() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Matrix> es(m);
    CHECK(es.eigenvalues().minCoeff() > -1e-12);
  }
  SUBCASE("column permutation of an orthonormal cloud") {
    Eigen::HouseholderQR<Matrix> qr(rng.gaussian(6, 3));
    const Matrix q = Matrix(qr.householderQ()).leftCols(3);
    Eigen::PermutationMatrix<3> perm;
    perm.indices() << 2, 0, 1;
    const Matrix k = q * perm;  // k columns are q columns permuted
    const Matrix m = cross_covariance({q, k, {}, {}, {}});
    // K^T Q = P^T Q^T Q = P^T because Q has orthonormal columns.
    CHECK((m - Matrix(perm.transpose())).norm() < 1e-12);
  }
  SUBCASE("zero keys") {
    CHECK(cross_covariance({rng.gaussian(5, 3), Matrix::Zero(5, 3), {}, {}, {}}).norm() == 0.0);
  }
}

TEST_CASE("SVD polar factor") {
  CHECK((polar_orthogonal_svd(Matrix::Identity(4, 4)).r - Matrix::Identity(4, 4)).norm() < 1e-12);
  CHECK((polar_orthogonal_svd(diag({-1, 2})).r - diag({-1, 1})).norm() < 1e-12);

  SUBCASE("exact-fit recovery") {
    oracle::Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
      const Eigen::Index d = rng.integer(2, 8);
      const Matrix q = rng.gaussian(d + rng.integer(1, 20), d);
      const Matrix r0 = rng.orthogonal(d);
      const Matrix k = q * r0.transpose();
      const Vector pi = token_weights(q, std::nullopt, false);
      const auto cc = weighted_center(q, k, pi);
      for (auto solver : {PolarSolver::svd, PolarSolver::newton_schulz}) {
        const auto res = align_keys_to_queries(cc, solver, 60);
        CHECK((res.r - r0).norm() < 1e-5);
        CHECK(*res.residual < 1e-8);
      }
    }
  }
  SUBCASE("rank deficiency is flagged and still orthogonal") {
    Matrix m = Matrix::Zero(3, 3);
    m(0, 0) = 2;
    m(1, 2) = 1;
    const auto res = polar_orthogonal_svd(m);
    CHECK(res.degenerate);
    CHECK(orthogonality_residual(res.r) < 1e-12);
    CHECK_FALSE(polar_orthogonal_svd(Matrix::Identity(3, 3)).degenerate);
  }
}

TEST_CASE("Newton-Schulz polar factor") {
  for (int iters = 1; iters <= 10; ++iters) {
    CHECK((polar_orthogonal_newton_schulz(Matrix::Identity(5, 5), iters).r - Matrix::Identity(5, 5)).norm() <
          1e-12);
  }
  CHECK((polar_orthogonal_newton_schulz(diag({2, 3}), 8).r - Matrix::Identity(2, 2)).norm() < 1e-6);
  CHECK((polar_orthogonal_newton_schulz(diag({-1, 2}), 8).r - diag({-1, 1})).norm() < 1e-6);

  SUBCASE("failures are solver errors") {
    CHECK(throws_kind(ErrorKind::solver, [] { polar_orthogonal_newton_schulz(Matrix::Zero(3, 3), 8); }));
    CHECK(throws_kind(ErrorKind::solver, [] { polar_orthogonal_newton_schulz(diag({1, 1, 0}), 8); }));
    CHECK(throws_kind(ErrorKind::validation, [] { polar_orthogonal_newton_schulz(diag({1, 1}), 0); }));
  }
  SUBCASE("rank-deficient alignment falls back to SVD") {
    oracle::Rng rng(13);
    Matrix q = rng.gaussian(10, 4);
    q.col(3).setZero();
    const auto cc = weighted_center(q, q, token_weights(q, std::nullopt, false));
    const auto res = align_keys_to_queries(cc, PolarSolver::newton_schulz, 8);
    CHECK(res.fell_back);
    CHECK(res.solver_used == PolarSolver::svd);
    CHECK(res.degenerate);
    CHECK(orthogonality_residual(res.r) < 1e-10);
  }
  SUBCASE("agrees with SVD up to condition number 1e3 given enough iterations") {
    oracle::Rng rng(17);
    for (int trial = 0; trial < 40; ++trial) {
      const Eigen::Index d = rng.integer(2, 32);
      Vector s(d);
      for (Eigen::Index i = 0; i < d; ++i) s(i) = std::pow(10.0, rng.uniform(0.0, 3.0));
      s(0) = 1.0;
      s(d - 1) = 1e3;
      const Matrix m = rng.orthogonal(d) * s.asDiagonal() * rng.orthogonal(d);
      const auto ns = polar_orthogonal_newton_schulz(m, 40);
      const auto svd = polar_orthogonal_svd(m);
      CHECK((ns.r - svd.r).norm() < 1e-3);
      CHECK(orthogonality_residual(ns.r) < 1e-3);
    }
  }
}

TEST_CASE("produced rotations are orthogonal with determinant +-1") {
  oracle::Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index d = rng.integer(2, 16);
    const Matrix m = rng.orthogonal(d) * Vector::LinSpaced(d, 1.0, 3.0).asDiagonal() * rng.orthogonal(d);
    const auto svd = polar_orthogonal_svd(m);
    const auto ns = polar_orthogonal_newton_schulz(m, 8);
    CHECK(orthogonality_residual(svd.r) <= 1e-5);
    CHECK(orthogonality_residual(ns.r) <= 1e-3);
    CHECK(std::abs(std::abs(svd.r.determinant()) - 1.0) < 1e-3);
    CHECK(std::abs(std::abs(ns.r.determinant()) - 1.0) < 1e-3);
    const Matrix k = rng.gaussian(10, d);
    CHECK(std::abs((k * svd.r).norm() - k.norm()) < 1e-5 * k.norm());
  }
}

TEST_CASE("Procrustes solution beats random rotations") {
  oracle::Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index d = rng.integer(2, 6), n = rng.integer(4, 32);
    const Matrix q = rng.gaussian(n, d), k = rng.gaussian(n, d);
    const auto cc = weighted_center(q, k, token_weights(q, std::nullopt, false));
    const double best = *align_keys_to_queries(cc, PolarSolver::svd, 8).residual;
    for (int c = 0; c < 500; ++c) {
      REQUIRE(best <= (cc.k_c * rng.orthogonal(d) - cc.q_c).norm() + 1e-6);
    }
  }
}

TEST_CASE("aligned attention") {
  oracle::Rng rng(29);
  SUBCASE("rows are convex weights") {
    const auto head = random_head(rng, 12, 4);
    const auto cc = weighted_center(head.q, head.k, token_weights(head.q, 0, true));
    const Matrix a = attention_weights(head, rng.orthogonal(4), true, cc);
    CHECK(a.minCoeff() >= 0.0);
    for (Eigen::Index i = 0; i < a.rows(); ++i) CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-6);
  }
  SUBCASE("R = I without key-key is plain attention") {
    const auto head = random_head(rng, 9, 4);
    const auto cc = weighted_center(head.q, head.k, token_weights(head.q, 0, true));
    const Matrix out = aligned_attention(head, Matrix::Identity(4, 4), false, cc);
    const Matrix expect = oracle::attention(head.q, head.k, head.v, Matrix::Identity(4, 4), false, cc.pi);
    CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("both terms on match the dense formula") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto head = random_head(rng, 8, 4);
      const Vector pi = token_weights(head.q, 0, true);
      const auto cc = weighted_center(head.q, head.k, pi);
      const auto res = align_keys_to_queries(cc, PolarSolver::svd, 8);
      const Matrix out = aligned_attention(head, res.r, true, cc);
      const Matrix expect = oracle::attention(head.q, head.k, head.v, res.r, true, pi);
      CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("patch-text logits") {
  Matrix t(2, 4);
  t << 1, 0, 0, 0, 0, 1, 0, 0;
  const PrototypeMatrix protos(t);
  SUBCASE("parallel and orthogonal features") {
    Matrix f(2, 4);
    f << 3, 0, 0, 0, 0, 0, 5, 0;
    const auto z = aligned_logits(f, protos, 1, 2);
    CHECK(z.at(0, 0, 0) == doctest::Approx(0.5));
    CHECK(z.at(0, 0, 1) == doctest::Approx(0.0));
    CHECK(z.at(0, 1, 0) == 0.0);
    CHECK(z.at(0, 1, 1) == 0.0);
  }
  SUBCASE("zero rows score zero and are counted") {
    Matrix f = Matrix::Zero(4, 4);
    f(1, 1) = 2;
    std::size_t zeros = 0;
    const auto z = aligned_logits(f, protos, 2, 2, &zeros);
    CHECK(zeros == 3);
    CHECK(z.all_finite());
    CHECK(z.at(0, 1, 1) == doctest::Approx(0.5));
  }
  SUBCASE("random instance against direct cosine") {
    oracle::Rng rng(31);
    const PrototypeMatrix p3(rng.unit_rows(3, 6));
    const Matrix f = rng.gaussian(4, 6);
    const auto z = aligned_logits(f, p3, 2, 2);
    for (Eigen::Index n = 0; n < 4; ++n) {
      for (Eigen::Index c = 0; c < 3; ++c) {
        const double expect = cosine(f.row(n).transpose(), p3.rows().row(c).transpose()) / std::sqrt(6.0);
        CHECK(z.at(n / 2, n % 2, c) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(std::abs(z.at(n / 2, n % 2, c)) <= 1 / std::sqrt(6.0) + 1e-15);
      }
    }
  }
}

TEST_CASE("block alignment") {
  oracle::Rng rng(37);
  const Eigen::Index d = 8, heads = 2, dm = d * heads, n = 1 + 6 * 6;
  BlockTensors block;
  for (Eigen::Index j = 0; j < heads; ++j) block.heads.push_back(random_head(rng, n, d));
  block.tail.w_o = rng.orthogonal(dm);
  const PrototypeMatrix protos(rng.unit_rows(4, dm));

  SUBCASE("SVD and Newton-Schulz logits agree") {
    // Keys are a rotated copy of orthonormal queries, so the cross-covariance
    // is well conditioned and Newton-Schulz should not need the fallback.
    for (auto& head : block.heads) {
      Eigen::HouseholderQR<Matrix> qr(rng.gaussian(n, d));
      head.q = 6.0 * Matrix(qr.householderQ()).leftCols(d);
      head.k = head.q * rng.orthogonal(d) + 0.05 * rng.gaussian(n, d);
    }
    PipelineConfig svd_cfg, ns_cfg;
    svd_cfg.solver = PolarSolver::svd;
    ns_cfg.solver = PolarSolver::newton_schulz;
    const auto a = align_block(block, protos, svd_cfg, 6, 6);
    const auto b = align_block(block, protos, ns_cfg, 6, 6);
    double diff = 0;
    for (std::size_t i = 0; i < a.logits.scores.size(); ++i) {
      diff = std::max(diff, std::abs(a.logits.scores[i] - b.logits.scores[i]));
    }
    CHECK(diff <= 1e-3);
    for (const auto& al : b.alignments) CHECK_FALSE(al.fell_back);
  }
  SUBCASE("identity rotation without key-key on one head is the baseline block") {
    BlockTensors one;
    one.heads = {block.heads[0]};
    one.tail.w_o = rng.orthogonal(d);
    const PrototypeMatrix p(rng.unit_rows(3, d));
    PipelineConfig cfg;
    cfg.identity_rotation = true;
    cfg.use_key_key = false;
    const auto res = align_block(one, p, cfg, 6, 6);
    const auto& h = one.heads[0];
    const Matrix y = oracle::attention(h.q, h.k, h.v, Matrix::Identity(d, d), false, Vector::Zero(n)) * *one.tail.w_o;
    for (Eigen::Index t = 1; t < n; ++t) {
      for (Eigen::Index c = 0; c < 3; ++c) {
        const double expect = cosine(y.row(t).transpose(), p.rows().row(c).transpose()) / std::sqrt(double(d));
        CHECK(res.logits.at((t - 1) / 6, (t - 1) % 6, c) == doctest::Approx(expect).epsilon(1e-10));
      }
    }
  }
  SUBCASE("heads are independent of processing order") {
    PipelineConfig cfg;
    const auto first = align_head(block.heads[1], cfg);
    const auto second = align_head(block.heads[0], cfg);
    const auto res = align_block(block, protos, cfg, 6, 6);
    CHECK((res.alignments[0].r - second.alignment.r).norm() == 0.0);
    CHECK((res.alignments[1].r - first.alignment.r).norm() == 0.0);
    CHECK(align_block(block, protos, cfg, 6, 6).logits.scores == res.logits.scores);
  }
  SUBCASE("tail replay follows residual, MLP and output projection") {
    PipelineConfig cfg;
    cfg.solver = PolarSolver::svd;
    BlockTensors full = block;
    full.tail.b_o = rng.gaussian(dm, 1).col(0);
    full.tail.x_in = rng.gaussian(n, dm);
    BlockTail::Mlp mlp;
    mlp.ln_weight = rng.gaussian(dm, 1).col(0);
    mlp.ln_bias = rng.gaussian(dm, 1).col(0);
    mlp.fc1 = rng.gaussian(dm, 3 * dm) * 0.2;
    mlp.fc1_bias = rng.gaussian(3 * dm, 1).col(0);
    mlp.fc2 = rng.gaussian(3 * dm, dm) * 0.2;
    mlp.fc2_bias = rng.gaussian(dm, 1).col(0);
    full.tail.mlp = mlp;
    BlockTail::Output post{rng.gaussian(dm, 1).col(0), rng.gaussian(dm, 1).col(0), rng.gaussian(dm, 5)};
    full.tail.post = post;
    const PrototypeMatrix p5(rng.unit_rows(2, 5));

    Matrix concat(n, dm);
    for (Eigen::Index j = 0; j < heads; ++j) {
      const auto& h = full.heads[static_cast<std::size_t>(j)];
      const Vector pi = token_weights(h.q, 0, true);
      const auto cc = weighted_center(h.q, h.k, pi);
      const Matrix r = polar_orthogonal_svd(cross_covariance(cc)).r;
      concat.middleCols(j * d, d) = oracle::attention(h.q, h.k, h.v, r, true, pi);
    }
    Matrix x = concat * *full.tail.w_o;
    x.rowwise() += full.tail.b_o->transpose();
    x += *full.tail.x_in;
    Matrix hidden = layer_norm_oracle(x, mlp.ln_weight, mlp.ln_bias) * mlp.fc1;
    hidden.rowwise() += mlp.fc1_bias.transpose();
    for (Eigen::Index i = 0; i < hidden.size(); ++i) {
      const double v = hidden.data()[i];
      hidden.data()[i] = v / (1 + std::exp(-1.702 * v));
    }
    Matrix mlp_out = hidden * mlp.fc2;
    mlp_out.rowwise() += mlp.fc2_bias.transpose();
    x += mlp_out;
    const Matrix e = layer_norm_oracle(x, post.ln_weight, post.ln_bias) * post.proj;

    const auto res = align_block(full, p5, cfg, 6, 6);
    for (Eigen::Index t = 1; t < n; ++t) {
      for (Eigen::Index c = 0; c < 2; ++c) {
        const double expect = cosine(e.row(t).transpose(), p5.rows().row(c).transpose()) / std::sqrt(5.0);
        CHECK(res.logits.at((t - 1) / 6, (t - 1) % 6, c) == doctest::Approx(expect).epsilon(1e-9));
      }
    }

    cfg.replay_tail = false;
    const auto skipped = align_block(full, p5, cfg, 6, 6);
    CHECK(skipped.logits.scores != res.logits.scores);
  }
  SUBCASE("missing output projection is reported") {
    BlockTensors bare = block;
    bare.tail.w_o.reset();
    const auto res = align_block(bare, protos, PipelineConfig{}, 6, 6);
    CHECK_FALSE(res.projected);
  }
  SUBCASE("patch count must fill the grid") {
    CHECK(throws_kind(ErrorKind::dimension, [&] { align_block(block, protos, PipelineConfig{}, 5, 6); }));
  }
}
