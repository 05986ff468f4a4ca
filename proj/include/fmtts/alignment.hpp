#pragma once

#include <Eigen/Dense>

#include <fmtts/autodiff.hpp>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace fmtts::align {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

// Row-stochastic alignment in log space: log_probs is [T x L], each row a
// log-distribution over phonemes.
template <class S>
struct SoftAlignment {
  Mat<S> log_probs;
  Eigen::Index frames() const { return log_probs.rows(); }
  Eigen::Index phones() const { return log_probs.cols(); }
};

// Monotonic surjective frame-to-phoneme assignment. Every row of `assign`
// is one-hot, the assigned index is non-decreasing over frames, and every
// phoneme receives at least one frame.
struct HardAlignment {
  Eigen::MatrixXi assign;       // [T x L]
  std::vector<int> durations;   // [L], column sums
  Eigen::Index frames() const { return assign.rows(); }
  Eigen::Index phones() const { return assign.cols(); }
};

namespace detail {

template <class S>
void check_alignable(Eigen::Index T, Eigen::Index L) {
  if (L < 1) throw std::invalid_argument("alignment: need at least 1 phoneme");
  if (T < L)
    throw std::invalid_argument(
        "unalignable: fewer frames than phonemes (T=" + std::to_string(T) +
        ", L=" + std::to_string(L) + ")");
}

template <class S>
S lse2(S a, S b) {
  if (a == -std::numeric_limits<S>::infinity()) return b;
  if (b == -std::numeric_limits<S>::infinity()) return a;
  const S m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace detail

// Pairwise score matrix [T x L]: negative squared distance between each
// projected mel frame and each projected text token.
template <class S>
Mat<S> pairwise_neg_sqdist(const Mat<S>& text_proj, const Mat<S>& mel_proj) {
  const Eigen::Index L = text_proj.rows(), T = mel_proj.rows();
  if (text_proj.cols() != mel_proj.cols())
    throw std::invalid_argument("pairwise_neg_sqdist: feature dims differ");
  Mat<S> scores(T, L);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index l = 0; l < L; ++l)
      scores(t, l) = -(mel_proj.row(t) - text_proj.row(l)).squaredNorm();
  return scores;
}

// Row-normalize scores into a soft alignment. Rejects instances with no
// monotonic surjective alignment (T < L).
template <class S>
SoftAlignment<S> soft_align_from_scores(const Mat<S>& scores) {
  detail::check_alignable<S>(scores.rows(), scores.cols());
  Mat<S> lp = scores;
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    const S m = lp.row(t).maxCoeff();
    const S lse = m + std::log((lp.row(t).array() - m).exp().sum());
    lp.row(t) = lp.row(t).array() - lse;
  }
  return SoftAlignment<S>{std::move(lp)};
}

template <class S>
SoftAlignment<S> attention_align(const Mat<S>& text_proj,
                                 const Mat<S>& mel_proj) {
  detail::check_alignable<S>(mel_proj.rows(), text_proj.rows());
  return soft_align_from_scores(pairwise_neg_sqdist(text_proj, mel_proj));
}

// Negative log of the total probability over all monotonic surjective
// paths (start at phoneme 0, end at L-1, advance by 0 or 1 per frame),
// normalized by T. Computed by the forward recursion in log space. If
// `occupancy` is non-null it receives the posterior gamma[t][l], which is
// also d(-log Z)/d log_probs[t][l] up to the -1/T factor.
template <class S>
S forwardsum_loss(const SoftAlignment<S>& soft, Mat<S>* occupancy = nullptr) {
  const Eigen::Index T = soft.frames(), L = soft.phones();
  detail::check_alignable<S>(T, L);
  const Mat<S>& lp = soft.log_probs;
  const S ninf = -std::numeric_limits<S>::infinity();

  Mat<S> alpha = Mat<S>::Constant(T, L, ninf);
  alpha(0, 0) = lp(0, 0);
  for (Eigen::Index t = 1; t < T; ++t)
    for (Eigen::Index l = 0; l < L; ++l) {
      const S stay = alpha(t - 1, l);
      const S step = (l > 0) ? alpha(t - 1, l - 1) : ninf;
      const S best = detail::lse2(stay, step);
      if (best != ninf) alpha(t, l) = lp(t, l) + best;
    }
  const S log_z = alpha(T - 1, L - 1);

  if (occupancy != nullptr) {
    Mat<S> beta = Mat<S>::Constant(T, L, ninf);
    beta(T - 1, L - 1) = S(0);
    for (Eigen::Index t = T - 2; t >= 0; --t)
      for (Eigen::Index l = 0; l < L; ++l) {
        const S stay = beta(t + 1, l) == ninf
                           ? ninf
                           : beta(t + 1, l) + lp(t + 1, l);
        const S step = (l + 1 < L && beta(t + 1, l + 1) != ninf)
                           ? beta(t + 1, l + 1) + lp(t + 1, l + 1)
                           : ninf;
        beta(t, l) = detail::lse2(stay, step);
      }
    occupancy->resize(T, L);
    for (Eigen::Index t = 0; t < T; ++t)
      for (Eigen::Index l = 0; l < L; ++l) {
        const S s = alpha(t, l) + beta(t, l);
        (*occupancy)(t, l) = (s == ninf) ? S(0) : std::exp(s - log_z);
      }
  }
  return -log_z / static_cast<S>(T);
}

// Graph version of forwardsum_loss: the pull distributes -gamma/T.
template <class S>
ad::Var<S> forwardsum_loss_op(ad::Var<S> log_probs) {
  ad::Tape<S>& t = *log_probs.tape;
  const int ia = log_probs.id;
  SoftAlignment<S> soft{log_probs.value()};
  Mat<S> gamma;
  const S loss = forwardsum_loss(soft, &gamma);
  Mat<S> out(1, 1);
  out(0, 0) = loss;
  const S inv_t = S(1) / static_cast<S>(soft.frames());
  return t.make(std::move(out), t.needs(ia),
                [ia, gamma = std::move(gamma), inv_t](ad::Tape<S>& t,
                                                      const Mat<S>& g) {
                  if (!t.needs(ia)) return;
                  t.add_grad(ia, Mat<S>(-g(0, 0) * inv_t * gamma));
                });
}

// Monotonic alignment search: the monotonic surjective path maximizing the
// summed log-probability, found by dynamic programming with backtracking.
// Score ties prefer the lower phoneme index.
template <class S>
HardAlignment mas_binarize(const SoftAlignment<S>& soft) {
  const Eigen::Index T = soft.frames(), L = soft.phones();
  detail::check_alignable<S>(T, L);
  const Mat<S>& lp = soft.log_probs;
  const S ninf = -std::numeric_limits<S>::infinity();

  Mat<S> best = Mat<S>::Constant(T, L, ninf);
  Eigen::MatrixXi from = Eigen::MatrixXi::Constant(T, L, -1);
  best(0, 0) = lp(0, 0);
  for (Eigen::Index t = 1; t < T; ++t)
    for (Eigen::Index l = 0; l < L; ++l) {
      const S stay = best(t - 1, l);
      const S step = (l > 0) ? best(t - 1, l - 1) : ninf;
      if (stay == ninf && step == ninf) continue;
      if (step >= stay) {
        best(t, l) = lp(t, l) + step;
        from(t, l) = static_cast<int>(l) - 1;
      } else {
        best(t, l) = lp(t, l) + stay;
        from(t, l) = static_cast<int>(l);
      }
    }

  HardAlignment hard;
  hard.assign = Eigen::MatrixXi::Zero(T, L);
  hard.durations.assign(L, 0);
  int l = static_cast<int>(L) - 1;
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    hard.assign(t, l) = 1;
    hard.durations[l] += 1;
    if (t > 0) l = from(t, l);
  }
  return hard;
}

// Path score of a hard alignment under the given log-probabilities.
template <class S>
S path_score(const SoftAlignment<S>& soft, const HardAlignment& hard) {
  S s = 0;
  for (Eigen::Index t = 0; t < hard.frames(); ++t)
    for (Eigen::Index l = 0; l < hard.phones(); ++l)
      if (hard.assign(t, l)) s += soft.log_probs(t, l);
  return s;
}

// Cross-entropy of the soft alignment against the hard path, per frame.
template <class S>
S bin_loss(const SoftAlignment<S>& soft, const HardAlignment& hard) {
  if (soft.frames() != hard.frames() || soft.phones() != hard.phones())
    throw std::invalid_argument("bin_loss: shape mismatch");
  return -path_score(soft, hard) / static_cast<S>(soft.frames());
}

// Expand phoneme-level rows to frame level by repeating row l durations[l]
// times, in order.
template <class S>
Mat<S> length_regulate(const Mat<S>& phone_feats,
                       const std::vector<int>& durations) {
  if (static_cast<Eigen::Index>(durations.size()) != phone_feats.rows())
    throw std::invalid_argument("length_regulate: durations size mismatch");
  Eigen::Index total = 0;
  for (int d : durations) {
    if (d < 1)
      throw std::invalid_argument("length_regulate: durations must be >= 1");
    total += d;
  }
  Mat<S> out(total, phone_feats.cols());
  Eigen::Index r = 0;
  for (Eigen::Index l = 0; l < phone_feats.rows(); ++l)
    for (int k = 0; k < durations[static_cast<std::size_t>(l)]; ++k)
      out.row(r++) = phone_feats.row(l);
  return out;
}

// Mean of the frames assigned to each phoneme.
template <class S>
Mat<S> pool_phoneme(const Mat<S>& frame_feats, const HardAlignment& hard) {
  if (frame_feats.rows() != hard.frames())
    throw std::invalid_argument("pool_phoneme: frame count mismatch");
  const Eigen::Index L = hard.phones();
  Mat<S> out = Mat<S>::Zero(L, frame_feats.cols());
  for (Eigen::Index t = 0; t < hard.frames(); ++t)
    for (Eigen::Index l = 0; l < L; ++l)
      if (hard.assign(t, l)) out.row(l) += frame_feats.row(t);
  for (Eigen::Index l = 0; l < L; ++l)
    out.row(l) /= static_cast<S>(hard.durations[static_cast<std::size_t>(l)]);
  return out;
}

// [T x L] selection matrix: expansion = E * phone_feats.
template <class S>
Mat<S> expansion_matrix(const HardAlignment& hard) {
  return hard.assign.template cast<S>();
}

// [L x T] averaging matrix: pooled = P * frame_feats.
template <class S>
Mat<S> pooling_matrix(const HardAlignment& hard) {
  Mat<S> p = hard.assign.transpose().template cast<S>();
  for (Eigen::Index l = 0; l < p.rows(); ++l)
    p.row(l) /= static_cast<S>(hard.durations[static_cast<std::size_t>(l)]);
  return p;
}

// Frame expansion switches from the expected (soft) alignment to the hard
// one once training reaches the switchover step.
inline bool use_hard_expansion(long step, long switchover_step) {
  return step >= switchover_step;
}

// Enumerate every monotonic surjective path as a duration vector. Intended
// for small instances only (test oracles and diagnostics).
inline void enumerate_paths(int T, int L, std::vector<std::vector<int>>& out) {
  std::vector<int> durs(static_cast<std::size_t>(L), 0);
  // choose L-1 transition points among T-1 gaps
  std::vector<int> cuts;
  std::function<void(int, int)> rec = [&](int start, int need) {
    if (need == 0) {
      std::vector<int> d;
      int prev = 0;
      for (int c : cuts) {
        d.push_back(c - prev);
        prev = c;
      }
      d.push_back(T - prev);
      out.push_back(d);
      return;
    }
    for (int c = start; c <= T - need; ++c) {
      cuts.push_back(c);
      rec(c + 1, need - 1);
      cuts.pop_back();
    }
  };
  (void)durs;
  rec(1, L - 1);
}

}  // namespace fmtts::align
