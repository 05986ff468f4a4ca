#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>

namespace fmtts::fm {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Clamp applied to 1 - t when converting a clean-data estimate back to a
// velocity, bounding the field near the data endpoint.
inline constexpr double kOneMinusTEps = 1e-5;

namespace detail {
template <class A, class B>
void check_same_shape(const A& a, const B& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
}
}  // namespace detail

// Point on the straight-line path between the prior sample x1 (t = 0) and
// the data sample x0 (t = 1).
template <class S>
Mat<S> ot_interpolate(const Mat<S>& x0, const Mat<S>& x1, S t) {
  detail::check_same_shape(x0, x1, "ot_interpolate");
  if (t < S(0) || t > S(1))
    throw std::invalid_argument("ot_interpolate: t outside [0,1]");
  return (S(1) - t) * x1 + t * x0;
}

// Ground-truth velocity of the straight-line path; independent of t.
template <class S>
Mat<S> ot_velocity(const Mat<S>& x0, const Mat<S>& x1) {
  detail::check_same_shape(x0, x1, "ot_velocity");
  return x0 - x1;
}

// Mean squared error between a predicted velocity and the path velocity.
template <class S>
S cfm_loss(const Mat<S>& u_pred, const Mat<S>& x0, const Mat<S>& x1) {
  detail::check_same_shape(u_pred, x0, "cfm_loss");
  detail::check_same_shape(x0, x1, "cfm_loss");
  return (u_pred - (x0 - x1)).squaredNorm() /
         static_cast<S>(u_pred.rows() * u_pred.cols());
}

// Recover the velocity from a clean-data estimate at time t:
// u = (x0_hat - x_t) / max(1 - t, eps).
template <class S>
Mat<S> x0_to_velocity(const Mat<S>& x0_hat, const Mat<S>& x_t, S t) {
  detail::check_same_shape(x0_hat, x_t, "x0_to_velocity");
  if (t < S(0) || t > S(1))
    throw std::invalid_argument("x0_to_velocity: t outside [0,1]");
  const S denom = std::max(S(1) - t, static_cast<S>(kOneMinusTEps));
  return (x0_hat - x_t) / denom;
}

// Guidance: u_uncond + scale * (u_cond - u_uncond). Scale 1 returns u_cond
// without arithmetic so the identity is exact in floating point.
template <class S>
Mat<S> cfg_combine(const Mat<S>& u_cond, const Mat<S>& u_uncond, S guidance) {
  detail::check_same_shape(u_cond, u_uncond, "cfg_combine");
  if (guidance < S(0))
    throw std::invalid_argument("cfg_combine: negative scale");
  if (guidance == S(1)) return u_cond;
  return u_uncond + guidance * (u_cond - u_uncond);
}

// A predictor maps (x_t, t) to an estimate of the clean data x0, with all
// conditioning captured in the closure.
template <class S>
using X0Predictor = std::function<Mat<S>(const Mat<S>&, S)>;

// Euler integration of the probability-flow ODE from t = 0 (prior) to t = 1
// (data) in `nfe` uniform steps. The velocity at each step comes from the
// x0 estimate; when a guidance scale other than 1 is requested and an
// unconditional predictor is supplied, conditional and unconditional
// velocities are combined per step. Deterministic given x1 and predictors.
template <class S>
Mat<S> sample_ode(const X0Predictor<S>& predictor, const Mat<S>& x1, int nfe,
                  S cfg_scale = S(1),
                  const X0Predictor<S>& predictor_uncond = nullptr) {
  if (nfe < 1) throw std::invalid_argument("sample_ode: nfe must be >= 1");
  const bool use_cfg = (cfg_scale != S(1)) && predictor_uncond != nullptr;
  Mat<S> x = x1;
  const S dt = S(1) / static_cast<S>(nfe);
  for (int k = 0; k < nfe; ++k) {
    const S t = static_cast<S>(k) * dt;
    if (use_cfg) {
      Mat<S> uc = x0_to_velocity<S>(predictor(x, t), x, t);
      Mat<S> uu = x0_to_velocity<S>(predictor_uncond(x, t), x, t);
      Mat<S> u = cfg_combine<S>(uc, uu, cfg_scale);
      if (!u.allFinite())
        throw std::runtime_error("sample_ode: non-finite velocity at step " +
                                 std::to_string(k));
      x += dt * u;
    } else {
      // dt * u = w * (x0_hat - x) with w = dt / max(1 - t, eps); the convex
      // form below is the same Euler step reassociated so that w = 1 lands
      // on x0_hat without rounding error.
      Mat<S> x0_hat = predictor(x, t);
      if (!x0_hat.allFinite())
        throw std::runtime_error("sample_ode: non-finite velocity at step " +
                                 std::to_string(k));
      const S w = dt / std::max(S(1) - t, static_cast<S>(kOneMinusTEps));
      x = (S(1) - w) * x + w * x0_hat;
    }
  }
  return x;
}

}  // namespace fmtts::fm
