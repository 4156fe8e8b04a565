// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "vtp/common.hpp"

// Dense building blocks with explicit forward caches and exact reverse-mode
// backward passes. Backward functions ACCUMULATE into the gradient refs they
// are given (callers zero the flat gradient once per sample), and return the
// gradient with respect to their input.
namespace vtp::nn {

inline constexpr double kInvSqrt2Pi = 0.3989422804014327;

// erf-based smooth gelu; its derivative is exact, which keeps finite
// differences honest.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) * kInvSqrt2Pi;
}

/// --- Linear: y = x W^T + b ----------------------------------------------------

struct LinearCache {
    Mat in;
};

// w is (out x in) row-major; an empty b means no bias term.
inline Mat linear_forward(const Eigen::Ref<const Mat>& x, const Eigen::Ref<const Mat>& w,
                          const Eigen::Ref<const Vec>& b, LinearCache* cache) {
    require(x.cols() == w.cols(), "linear: input width does not match weight");
    if (cache != nullptr) cache->in = x;
    Mat y = x * w.transpose();
    if (b.size() > 0) {
        require(b.size() == w.rows(), "linear: bias length does not match weight");
        y.rowwise() += b.transpose();
    }
    return y;
}

inline Mat linear_backward(const Eigen::Ref<const Mat>& dy, const LinearCache& cache,
                           const Eigen::Ref<const Mat>& w, Eigen::Ref<Mat> dw,
                           Eigen::Ref<Vec> db) {
    dw += dy.transpose() * cache.in;
    if (db.size() > 0) db += dy.colwise().sum().transpose();
    return dy * w;
}

// --- LayerNorm over each row --------------------------------------------------

struct LayerNormCache {
    Mat xhat;
    Vec invstd;
};

inline Mat layernorm_forward(const Eigen::Ref<const Mat>& x, const Eigen::Ref<const Vec>& gamma,
                             const Eigen::Ref<const Vec>& beta, LayerNormCache* cache) {
    constexpr double eps = 1e-5;
    const Eigen::Index rows = x.rows();
    const Eigen::Index cols = x.cols();
    require(gamma.size() == cols && beta.size() == cols, "layernorm: parameter width mismatch");
    Mat xhat(rows, cols);
    Vec invstd(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const double mu = x.row(r).mean();
        const double var = (x.row(r).array() - mu).square().mean();
        invstd[r] = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.row(r).array() - mu) * invstd[r];
    }
    if (cache != nullptr) {
        cache->xhat = xhat;
        cache->invstd = invstd;
    }
    Mat y = xhat.array().rowwise() * gamma.transpose().array();
    y.rowwise() += beta.transpose();
    return y;
}

inline Mat layernorm_backward(const Eigen::Ref<const Mat>& dy, const LayerNormCache& cache,
                              const Eigen::Ref<const Vec>& gamma, Eigen::Ref<Vec> dgamma,
                              Eigen::Ref<Vec> dbeta) {
    const Eigen::Index rows = dy.rows();
    const Eigen::Index cols = dy.cols();
    dgamma += (dy.array() * cache.xhat.array()).colwise().sum().matrix().transpose();
    dbeta += dy.colwise().sum().transpose();
    Mat dx(rows, cols);
    const double inv_n = 1.0 / static_cast<double>(cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const Eigen::ArrayXd dxhat = dy.row(r).transpose().array() * gamma.array();
        const Eigen::ArrayXd xh = cache.xhat.row(r).transpose().array();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat * xh).sum() * inv_n;
        dx.row(r) = (cache.invstd[r] * (dxhat - m1 - xh * m2)).matrix().transpose();
    }
    return dx;
}

// --- Row softmax --------------------------------------------------------------

inline Mat softmax_rows(const Eigen::Ref<const Mat>& x) {
    Mat p(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const Eigen::ArrayXd e = (x.row(r).array() - x.row(r).maxCoeff()).exp();
        p.row(r) = (e / e.sum()).matrix().transpose();
    }
    return p;
}

inline Mat softmax_rows_backward(const Eigen::Ref<const Mat>& dy,
                                 const Eigen::Ref<const Mat>& probs) {
    Mat dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        const double dot = dy.row(r).dot(probs.row(r));
        dx.row(r) = probs.row(r).array() * (dy.row(r).array() - dot);
    }
    return dx;
}

// --- Multi-head attention -----------------------------------------------------

struct MhaCache {
    LinearCache q_c, k_c, v_c, o_c;
    Mat q, k, v;              // projected activations
    std::vector<Mat> probs;   // per head, (nq x nk)
    Mat concat;               // pre-output-projection, (nq x d)
};

/// q_in: (nq x d), kv_in: (nk x d). logit_bias, if present, is an (nq x nk)
// additive term shared by every head; dbias, if present, receives the
// accumulated gradient of that term in the backward pass.
inline Mat mha_forward(const Eigen::Ref<const Mat>& q_in, const Eigen::Ref<const Mat>& kv_in,
                       int heads, const Eigen::Ref<const Mat>& wq,
                       const Eigen::Ref<const Vec>& bq, const Eigen::Ref<const Mat>& wk,
                       const Eigen::Ref<const Vec>& bk, const Eigen::Ref<const Mat>& wv,
                       const Eigen::Ref<const Vec>& bv, const Eigen::Ref<const Mat>& wo,
                       const Eigen::Ref<const Vec>& bo, const Mat* logit_bias, MhaCache* cache) {
    const Eigen::Index d = q_in.cols();
    require(heads >= 1 && d % heads == 0, "mha: width must divide into heads");
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    MhaCache local;
    MhaCache& c = (cache != nullptr) ? *cache : local;
    c.q = linear_forward(q_in, wq, bq, &c.q_c);
    c.k = linear_forward(kv_in, wk, bk, &c.k_c);
    c.v = linear_forward(kv_in, wv, bv, &c.v_c);
    c.probs.assign(static_cast<std::size_t>(heads), Mat());
    c.concat = Mat(q_in.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const auto qh = c.q.middleCols(h * dh, dh);
        const auto kh = c.k.middleCols(h * dh, dh);
        const auto vh = c.v.middleCols(h * dh, dh);
        Mat logits = qh * kh.transpose() * scale;
        if (logit_bias != nullptr) logits += *logit_bias;
        c.probs[static_cast<std::size_t>(h)] = softmax_rows(logits);
        c.concat.middleCols(h * dh, dh) = c.probs[static_cast<std::size_t>(h)] * vh;
    }
    return linear_forward(c.concat, wo, bo, &c.o_c);
}

struct MhaInputGrads {
    Mat dq_in;
    Mat dkv_in;
};

inline MhaInputGrads mha_backward(const Eigen::Ref<const Mat>& dy, const MhaCache& c, int heads,
                                  const Eigen::Ref<const Mat>& wq, Eigen::Ref<Mat> dwq,
                                  Eigen::Ref<Vec> dbq, const Eigen::Ref<const Mat>& wk,
                                  Eigen::Ref<Mat> dwk, Eigen::Ref<Vec> dbk,
                                  const Eigen::Ref<const Mat>& wv, Eigen::Ref<Mat> dwv,
                                  Eigen::Ref<Vec> dbv, const Eigen::Ref<const Mat>& wo,
                                  Eigen::Ref<Mat> dwo, Eigen::Ref<Vec> dbo, Mat* dbias) {
    const Eigen::Index d = c.q.cols();
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const Mat dconcat = linear_backward(dy, c.o_c, wo, dwo, dbo);
    Mat dq = Mat::Zero(c.q.rows(), d);
    Mat dk = Mat::Zero(c.k.rows(), d);
    Mat dv = Mat::Zero(c.v.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const Mat& p = c.probs[static_cast<std::size_t>(h)];
        const auto qh = c.q.middleCols(h * dh, dh);
        const auto kh = c.k.middleCols(h * dh, dh);
        const auto vh = c.v.middleCols(h * dh, dh);
        const auto dout_h = dconcat.middleCols(h * dh, dh);
        const Mat dp = dout_h * vh.transpose();
        dv.middleCols(h * dh, dh) += p.transpose() * dout_h;
        const Mat dlogits = softmax_rows_backward(dp, p);
        if (dbias != nullptr) *dbias += dlogits;
        dq.middleCols(h * dh, dh) += dlogits * kh * scale;
        dk.middleCols(h * dh, dh) += dlogits.transpose() * qh * scale;
    }
    MhaInputGrads g;
    g.dq_in = linear_backward(dq, c.q_c, wq, dwq, dbq);
    g.dkv_in = linear_backward(dk, c.k_c, wk, dwk, dbk);
    g.dkv_in += linear_backward(dv, c.v_c, wv, dwv, dbv);
    return g;
}

}  // namespace vtp::nn
