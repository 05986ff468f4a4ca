#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fmtts/autodiff.hpp>
#include <fmtts/rng.hpp>

#include <cmath>
#include <functional>

using namespace fmtts;
using namespace fmtts::ad;

namespace {

using MatD = Mat<double>;

MatD random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  MatD m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// Central finite differences of a scalar-valued graph against the tape
// gradient, probing every entry of the parameter.
void check_grad(Parameter<double>& p,
                const std::function<Var<double>(Tape<double>&)>& build,
                double h = 1e-6, double tol = 1e-6) {
  Tape<double> tape;
  p.zero_grad();
  Var<double> loss = build(tape);
  tape.backward(loss);
  MatD analytic = p.grad;

  for (int i = 0; i < p.value.rows(); ++i) {
    for (int j = 0; j < p.value.cols(); ++j) {
      const double orig = p.value(i, j);
      p.value(i, j) = orig + h;
      Tape<double> tp;
      const double fp = build(tp).scalar();
      p.value(i, j) = orig - h;
      Tape<double> tm;
      const double fm = build(tm).scalar();
      p.value(i, j) = orig;
      const double fd = (fp - fm) / (2 * h);
      const double err = std::abs(analytic(i, j) - fd);
      const double denom = std::max({std::abs(analytic(i, j)), std::abs(fd), 1.0});
      CHECK(err / denom < tol);
    }
  }
}

}  // namespace

TEST_CASE("forward values of basic ops") {
  Tape<double> t;
  MatD a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  Var<double> va = t.constant(a), vb = t.constant(b);
  CHECK(add(va, vb).value()(1, 1) == 12.0);
  CHECK(sub(va, vb).value()(0, 0) == -4.0);
  CHECK(mul(va, vb).value()(0, 1) == 12.0);
  CHECK(matmul(va, vb).value()(0, 0) == doctest::Approx(19.0));
  CHECK(transpose(va).value()(0, 1) == 3.0);
  CHECK(sum_all(va).scalar() == 10.0);
  CHECK(mean_all(va).scalar() == 2.5);
}

TEST_CASE("softmax rows normalize and are shift invariant") {
  Rng rng(7);
  Tape<double> t;
  MatD x = random_mat(rng, 5, 9);
  Var<double> y = softmax_rows(t.constant(x));
  for (int r = 0; r < 5; ++r)
    CHECK(y.value().row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
  Var<double> ys = softmax_rows(t.constant(MatD(x.array() + 100.0)));
  CHECK((y.value() - ys.value()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradients of arithmetic and matmul") {
  Rng rng(1);
  Parameter<double> p("p", random_mat(rng, 3, 4));
  MatD w = random_mat(rng, 4, 2), c = random_mat(rng, 3, 2);
  check_grad(p, [&](Tape<double>& t) {
    Var<double> vp = t.param(p);
    Var<double> y = matmul(vp, t.constant(w));
    y = add(y, t.constant(c));
    y = mul(y, y);
    return mean_all(y);
  });
}

TEST_CASE("gradients of nonlinearities") {
  Rng rng(2);
  Parameter<double> p("p", random_mat(rng, 4, 3));
  check_grad(p, [&](Tape<double>& t) {
    return mean_all(tanh_(t.param(p)));
  });
  check_grad(p, [&](Tape<double>& t) {
    return mean_all(silu(t.param(p)));
  });
  check_grad(p, [&](Tape<double>& t) {
    return mean_all(exp_(scale(t.param(p), 0.3)));
  });
  Parameter<double> pos("pos", MatD(random_mat(rng, 3, 3).array().abs() + 0.5));
  check_grad(pos, [&](Tape<double>& t) {
    return mean_all(log_(t.param(pos)));
  });
  check_grad(pos, [&](Tape<double>& t) {
    return mean_all(rsqrt_off(t.param(pos), 1e-5));
  });
}

TEST_CASE("gradient of abs away from zero") {
  Rng rng(3);
  MatD v = random_mat(rng, 4, 4);
  v = (v.array().abs() + 0.3).matrix().cwiseProduct(
      (random_mat(rng, 4, 4).array() > 0).cast<double>().matrix() * 2.0 -
      MatD::Ones(4, 4));
  Parameter<double> p("p", v);
  check_grad(p, [&](Tape<double>& t) {
    return mean_all(abs_(t.param(p)));
  });
}

TEST_CASE("gradients of softmax and log softmax") {
  Rng rng(4);
  Parameter<double> p("p", random_mat(rng, 5, 6));
  MatD w = random_mat(rng, 5, 6);
  check_grad(p, [&](Tape<double>& t) {
    return mean_all(mul(softmax_rows(t.param(p)), t.constant(w)));
  });
  check_grad(p, [&](Tape<double>& t) {
    return mean_all(mul(log_softmax_rows(t.param(p)), t.constant(w)));
  });
}

TEST_CASE("gradients of reductions and broadcasts") {
  Rng rng(5);
  Parameter<double> p("p", random_mat(rng, 4, 5));
  Parameter<double> row("row", random_mat(rng, 1, 5));
  Parameter<double> col("col", random_mat(rng, 4, 1));
  MatD w = random_mat(rng, 4, 5);

  check_grad(p, [&](Tape<double>& t) {
    return mean_all(mul(sum_cols(t.param(p)), sum_cols(t.constant(w))));
  });
  check_grad(p, [&](Tape<double>& t) {
    return mean_all(mul(sum_rows(t.param(p)), sum_rows(t.constant(w))));
  });
  check_grad(row, [&](Tape<double>& t) {
    Var<double> y = add_rowvec(t.constant(w), t.param(row));
    return mean_all(mul(y, y));
  });
  check_grad(col, [&](Tape<double>& t) {
    Var<double> y = mul_colvec(t.constant(w), t.param(col));
    return mean_all(mul(y, y));
  });
  check_grad(row, [&](Tape<double>& t) {
    Var<double> y = mul_rowvec(t.constant(w), t.param(row));
    return mean_all(mul(y, y));
  });
  check_grad(col, [&](Tape<double>& t) {
    Var<double> y = add_colvec(t.constant(w), t.param(col));
    return mean_all(mul(y, tanh_(y)));
  });
  check_grad(row, [&](Tape<double>& t) {
    Var<double> y = repeat_row(t.param(row), 6);
    return mean_all(mul(y, y));
  });
}

TEST_CASE("gradient of scalar broadcast multiply") {
  Rng rng(6);
  Parameter<double> s("s", random_mat(rng, 1, 1));
  MatD w = random_mat(rng, 3, 3);
  check_grad(s, [&](Tape<double>& t) {
    Var<double> y = mul_scalar1(t.constant(w), t.param(s));
    return mean_all(mul(y, y));
  });
}

TEST_CASE("gradients of structural ops") {
  Rng rng(8);
  Parameter<double> p("p", random_mat(rng, 5, 4));
  Parameter<double> q("q", random_mat(rng, 3, 4));
  MatD side = random_mat(rng, 3, 2);

  check_grad(p, [&](Tape<double>& t) {
    Var<double> y = concat_rows(t.param(p), t.constant(q.value));
    return mean_all(mul(y, y));
  });
  check_grad(q, [&](Tape<double>& t) {
    Var<double> y = concat_cols(t.param(q), t.constant(side));
    return mean_all(mul(y, y));
  });
  check_grad(p, [&](Tape<double>& t) {
    Var<double> y = slice_rows(t.param(p), 1, 3);
    return mean_all(mul(y, y));
  });
  check_grad(p, [&](Tape<double>& t) {
    Var<double> y = slice_cols(t.param(p), 2, 2);
    return mean_all(mul(y, tanh_(y)));
  });
  check_grad(p, [&](Tape<double>& t) {
    Var<double> y = gather_rows(t.param(p), {0, 2, 2, 4, 1});
    return mean_all(mul(y, y));
  });
}

TEST_CASE("im2col matches direct convolution and its gradient") {
  Rng rng(9);
  const int T = 7, E = 3, K = 3, EO = 2;
  Parameter<double> x("x", random_mat(rng, T, E));
  Parameter<double> w("w", random_mat(rng, K * E, EO));

  // direct correlation with zero padding as reference
  Tape<double> t;
  Var<double> y = matmul(im2col(t.param(x), K), t.param(w));
  MatD ref = MatD::Zero(T, EO);
  for (int i = 0; i < T; ++i)
    for (int k = 0; k < K; ++k) {
      int src = i + k - K / 2;
      if (src < 0 || src >= T) continue;
      for (int o = 0; o < EO; ++o)
        for (int e = 0; e < E; ++e)
          ref(i, o) += x.value(src, e) * w.value(k * E + e, o);
    }
  CHECK((y.value() - ref).cwiseAbs().maxCoeff() < 1e-12);

  check_grad(x, [&](Tape<double>& t) {
    Var<double> y = matmul(im2col(t.param(x), K), t.constant(w.value));
    return mean_all(mul(y, y));
  });
  check_grad(w, [&](Tape<double>& t) {
    Var<double> y = matmul(im2col(t.constant(x.value), K, 2), t.param(w));
    return mean_all(mul(y, y));
  });
}

TEST_CASE("layer_norm_rows normalizes and differentiates") {
  Rng rng(10);
  Parameter<double> p("p", random_mat(rng, 6, 8, 3.0));
  Tape<double> t;
  Var<double> y = layer_norm_rows(t.param(p), 1e-5);
  for (int r = 0; r < 6; ++r) {
    CHECK(std::abs(y.value().row(r).mean()) < 1e-10);
    const double var = y.value().row(r).array().square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
  MatD w = random_mat(rng, 6, 8);
  check_grad(p, [&](Tape<double>& t) {
    return mean_all(mul(layer_norm_rows(t.param(p), 1e-5), t.constant(w)));
  }, 1e-6, 1e-5);
}

TEST_CASE("straight-through round passes gradient unchanged") {
  Rng rng(11);
  Parameter<double> p("p", random_mat(rng, 3, 2));
  Tape<double> t;
  p.zero_grad();
  std::vector<double> hi = {4.0, 4.0};
  Var<double> y = ste_round_clamp(t.param(p), hi);
  // forward is rounded+clamped
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double r = std::nearbyint(p.value(i, j));
      r = std::min(4.0, std::max(0.0, r));
      CHECK(y.value()(i, j) == r);
    }
  Var<double> loss = mean_all(mul(y, y));
  t.backward(loss);
  // identity backward: grad = 2*y/N
  MatD expect = 2.0 * y.value() / 6.0;
  CHECK((p.grad - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("detach blocks gradient flow") {
  Rng rng(12);
  Parameter<double> p("p", random_mat(rng, 2, 2));
  Tape<double> t;
  p.zero_grad();
  Var<double> vp = t.param(p);
  Var<double> loss = mean_all(mul(detach(vp), vp));
  t.backward(loss);
  MatD expect = p.value / 4.0;  // only the non-detached factor contributes
  CHECK((p.grad - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mse and mae") {
  Tape<double> t;
  MatD a(1, 4), b(1, 4);
  a << 1, 2, 3, 4;
  b << 1, 1, 1, 1;
  CHECK(mse(t.constant(a), t.constant(b)).scalar() ==
        doctest::Approx((0.0 + 1 + 4 + 9) / 4.0));
  CHECK(mae(t.constant(a), t.constant(b)).scalar() ==
        doctest::Approx((0.0 + 1 + 2 + 3) / 4.0));
}

TEST_CASE("gradient accumulates across reuse of a node") {
  Rng rng(13);
  Parameter<double> p("p", random_mat(rng, 3, 3));
  check_grad(p, [&](Tape<double>& t) {
    Var<double> vp = t.param(p);
    Var<double> y = add(matmul(vp, vp), mul(vp, vp));
    return mean_all(y);
  });
}
