#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "genemamba/error.hpp"

namespace genemamba::ssm {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
Scalar softplus(Scalar x) {
    return x > Scalar(20) ? x : std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x)) : std::exp(x) / (Scalar(1) + std::exp(x));
}

// Input-dependent diagonal state-space layer over D channels with an N-wide
// state per channel. For a token x (D-vector):
//   delta = softplus(dt_w x + dt_b)        (D)
//   B = b_w x, C = c_w x                    (N each)
//   A = -exp(a_log)                         (D x N, strictly negative)
template <typename Scalar>
struct SelectiveParams {
    Mat<Scalar> dt_w;   // D x D
    Vec<Scalar> dt_b;   // D
    Mat<Scalar> b_w;    // N x D
    Mat<Scalar> c_w;    // N x D
    Mat<Scalar> a_log;  // D x N
    Vec<Scalar> skip;   // D

    static SelectiveParams zeros(Eigen::Index channels, Eigen::Index state_dim) {
        SelectiveParams p;
        p.dt_w = Mat<Scalar>::Zero(channels, channels);
        p.dt_b = Vec<Scalar>::Zero(channels);
        p.b_w = Mat<Scalar>::Zero(state_dim, channels);
        p.c_w = Mat<Scalar>::Zero(state_dim, channels);
        p.a_log = Mat<Scalar>::Zero(channels, state_dim);
        p.skip = Vec<Scalar>::Zero(channels);
        return p;
    }

    Eigen::Index channels() const { return a_log.rows(); }
    Eigen::Index state_dim() const { return a_log.cols(); }
    Mat<Scalar> a() const { return -a_log.array().exp().matrix(); }
};

template <typename Scalar>
struct ScanState {
    Mat<Scalar> h;  // D x N

    static ScanState zeros(Eigen::Index channels, Eigen::Index state_dim) {
        return {Mat<Scalar>::Zero(channels, state_dim)};
    }
};

// Discrete per-step parameters, each D x N.
template <typename Scalar>
struct StepParams {
    Mat<Scalar> a_bar;
    Mat<Scalar> b_bar;
    Mat<Scalar> c;
};

// a_bar = exp(delta * A), b_bar = delta * B (Euler rule for the input matrix).
template <typename Scalar>
StepParams<Scalar> discretize(const SelectiveParams<Scalar>& p, const Eigen::Ref<const Vec<Scalar>>& x) {
    const Vec<Scalar> pre = p.dt_w * x + p.dt_b;
    const Vec<Scalar> delta = pre.unaryExpr([](Scalar v) { return softplus(v); });
    const Vec<Scalar> b = p.b_w * x;
    const Vec<Scalar> c = p.c_w * x;
    StepParams<Scalar> s;
    s.a_bar = (p.a().array().colwise() * delta.array()).exp().matrix();
    s.b_bar = delta * b.transpose();
    s.c = Vec<Scalar>::Ones(p.channels()) * c.transpose();
    return s;
}

template <typename Scalar>
struct ScanResult {
    Mat<Scalar> outputs;  // L x D
    ScanState<Scalar> final;
};

// Intermediates kept for the backward pass.
template <typename Scalar>
struct ScanCache {
    Mat<Scalar> delta_pre;  // L x D
    Mat<Scalar> delta;      // L x D
    Mat<Scalar> b;          // L x N
    Mat<Scalar> c;          // L x N
    std::vector<Mat<Scalar>> states;  // L + 1 states, states[0] is the initial one
};

namespace detail {

template <typename Scalar>
void check_finite(const Mat<Scalar>& h, Eigen::Index step) {
    if (!h.allFinite()) throw NumericError("selective scan: non-finite state at step " + std::to_string(step));
}

}  // namespace detail

// h_t = a_bar_t * h_{t-1} + b_bar_t * x_t ;  y_t = <c_t, h_t> + skip * x_t,
// sequential in t and independent across channels.
template <typename Scalar>
ScanResult<Scalar> selective_scan(const SelectiveParams<Scalar>& p, const Eigen::Ref<const Mat<Scalar>>& inputs,
                                  ScanState<Scalar> initial, ScanCache<Scalar>* cache = nullptr) {
    const Eigen::Index L = inputs.rows();
    const Eigen::Index D = p.channels();
    if (L < 1) throw InputError("selective scan needs at least one step");
    if (inputs.cols() != D) throw InputError("selective scan: input width does not match channels");

    Mat<Scalar> delta_pre = inputs * p.dt_w.transpose();
    delta_pre.rowwise() += p.dt_b.transpose();
    const Mat<Scalar> delta = delta_pre.unaryExpr([](Scalar v) { return softplus(v); });
    const Mat<Scalar> b = inputs * p.b_w.transpose();
    const Mat<Scalar> c = inputs * p.c_w.transpose();
    const Mat<Scalar> a = p.a();

    ScanResult<Scalar> out;
    out.outputs.resize(L, D);
    Mat<Scalar>& h = initial.h;
    if (cache) {
        cache->states.clear();
        cache->states.reserve(static_cast<std::size_t>(L + 1));
        cache->states.push_back(h);
    }
    for (Eigen::Index t = 0; t < L; ++t) {
        const auto dt = delta.row(t).transpose();
        const Vec<Scalar> drive = dt.cwiseProduct(inputs.row(t).transpose());
        h.array() = (a.array().colwise() * dt.array()).exp() * h.array() + (drive * b.row(t)).array();
        detail::check_finite(h, t);
        out.outputs.row(t) = (h * c.row(t).transpose()).transpose() + p.skip.cwiseProduct(inputs.row(t).transpose()).transpose();
        if (cache) cache->states.push_back(h);
    }
    out.final = std::move(initial);
    if (cache) {
        cache->delta_pre = std::move(delta_pre);
        cache->delta = delta;
        cache->b = b;
        cache->c = c;
    }
    return out;
}

template <typename Scalar>
struct ScanGradients {
    SelectiveParams<Scalar> params;
    Mat<Scalar> inputs;  // L x D
};

// Reverse-mode sweep through selective_scan, starting from a zero initial
// state gradient contribution at the end of the sequence.
template <typename Scalar>
ScanGradients<Scalar> selective_scan_backward(const SelectiveParams<Scalar>& p, const Eigen::Ref<const Mat<Scalar>>& inputs,
                                              const ScanCache<Scalar>& cache, const Eigen::Ref<const Mat<Scalar>>& d_outputs) {
    const Eigen::Index L = inputs.rows();
    const Eigen::Index D = p.channels();
    const Eigen::Index N = p.state_dim();
    const Mat<Scalar> a = p.a();

    ScanGradients<Scalar> g;
    g.params = SelectiveParams<Scalar>::zeros(D, N);
    g.inputs = Mat<Scalar>::Zero(L, D);
    Mat<Scalar> d_delta = Mat<Scalar>::Zero(L, D);
    Mat<Scalar> d_b = Mat<Scalar>::Zero(L, N);
    Mat<Scalar> d_c = Mat<Scalar>::Zero(L, N);
    Mat<Scalar> d_a = Mat<Scalar>::Zero(D, N);
    Mat<Scalar> dh = Mat<Scalar>::Zero(D, N);

    for (Eigen::Index t = L - 1; t >= 0; --t) {
        const Mat<Scalar>& h = cache.states[static_cast<std::size_t>(t + 1)];
        const Mat<Scalar>& h_prev = cache.states[static_cast<std::size_t>(t)];
        const Vec<Scalar> dy = d_outputs.row(t).transpose();
        const Vec<Scalar> x = inputs.row(t).transpose();
        const Vec<Scalar> dt = cache.delta.row(t).transpose();

        d_c.row(t) = (h.transpose() * dy).transpose();
        dh += dy * cache.c.row(t);
        g.params.skip += dy.cwiseProduct(x);
        g.inputs.row(t) += dy.cwiseProduct(p.skip).transpose();

        const Mat<Scalar> a_bar = (a.array().colwise() * dt.array()).exp().matrix();
        const Mat<Scalar> d_abar_scaled = (dh.array() * h_prev.array() * a_bar.array()).matrix();  // dL/d(delta*A)
        d_delta.row(t) += (d_abar_scaled.cwiseProduct(a)).rowwise().sum().transpose();
        d_a += (d_abar_scaled.array().colwise() * dt.array()).matrix();

        const Vec<Scalar> dh_b = dh * cache.b.row(t).transpose();  // D
        d_delta.row(t) += dh_b.cwiseProduct(x).transpose();
        g.inputs.row(t) += dh_b.cwiseProduct(dt).transpose();
        d_b.row(t) += (dh.transpose() * dt.cwiseProduct(x)).transpose();

        dh = (dh.array() * a_bar.array()).matrix();
    }

    g.params.a_log = d_a.cwiseProduct(a);
    const Mat<Scalar> d_pre = d_delta.cwiseProduct(cache.delta_pre.unaryExpr([](Scalar v) { return sigmoid(v); }));
    g.params.dt_w = d_pre.transpose() * inputs;
    g.params.dt_b = d_pre.colwise().sum().transpose();
    g.params.b_w = d_b.transpose() * inputs;
    g.params.c_w = d_c.transpose() * inputs;
    g.inputs += d_pre * p.dt_w + d_b * p.b_w + d_c * p.c_w;
    return g;
}

// Time-invariant discrete system, each D x N, plus a per-channel skip.
template <typename Scalar>
struct StaticSystem {
    Mat<Scalar> a_bar;
    Mat<Scalar> b_bar;
    Mat<Scalar> c;
    Vec<Scalar> skip;
};

// Recurrent evaluation of a time-invariant system.
template <typename Scalar>
Mat<Scalar> static_scan(const StaticSystem<Scalar>& s, const Eigen::Ref<const Mat<Scalar>>& inputs) {
    const Eigen::Index L = inputs.rows();
    Mat<Scalar> h = Mat<Scalar>::Zero(s.a_bar.rows(), s.a_bar.cols());
    Mat<Scalar> y(L, s.a_bar.rows());
    for (Eigen::Index t = 0; t < L; ++t) {
        const Vec<Scalar> x = inputs.row(t).transpose();
        h.array() = s.a_bar.array() * h.array() + s.b_bar.array().colwise() * x.array();
        y.row(t) = (s.c.cwiseProduct(h).rowwise().sum() + s.skip.cwiseProduct(x)).transpose();
    }
    return y;
}

// Kernel K_tau[d] = sum_n c[d,n] a_bar[d,n]^tau b_bar[d,n], tau = 0..length-1.
template <typename Scalar>
Mat<Scalar> convolution_kernel(const StaticSystem<Scalar>& s, Eigen::Index length) {
    Mat<Scalar> k(length, s.a_bar.rows());
    Mat<Scalar> power = Mat<Scalar>::Ones(s.a_bar.rows(), s.a_bar.cols());
    for (Eigen::Index tau = 0; tau < length; ++tau) {
        k.row(tau) = (s.c.array() * power.array() * s.b_bar.array()).rowwise().sum().transpose();
        power.array() *= s.a_bar.array();
    }
    return k;
}

// Convolutional evaluation y = x * K (+ skip * x).
template <typename Scalar>
Mat<Scalar> kernel_convolve(const StaticSystem<Scalar>& s, const Eigen::Ref<const Mat<Scalar>>& inputs) {
    const Eigen::Index L = inputs.rows();
    const Mat<Scalar> k = convolution_kernel(s, L);
    Mat<Scalar> y = Mat<Scalar>::Zero(L, inputs.cols());
    for (Eigen::Index t = 0; t < L; ++t) {
        for (Eigen::Index tau = 0; tau <= t; ++tau) y.row(t) += k.row(tau).cwiseProduct(inputs.row(t - tau));
        y.row(t) += s.skip.transpose().cwiseProduct(inputs.row(t));
    }
    return y;
}

}  // namespace genemamba::ssm
