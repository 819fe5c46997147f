#include "qest/nn/layers.hpp"

#include <cmath>

namespace qest::nn {

Mat affine_forward(const Mat& W, const Mat& x, const Mat& b) {
  if (W.cols() != x.rows()) throw ShapeMismatch("affine_forward: W cols != x rows");
  if (b.rows() != W.rows() || b.cols() != x.cols())
    throw ShapeMismatch("affine_forward: bias shape");
  return W * x + b;
}

Mat activation(Activation kind, const Mat& z) {
  switch (kind) {
    case Activation::Relu:
      return z.unaryExpr([](double v) { return v > 0.0 ? v : 0.0; });
    case Activation::Tanh:
      return z.unaryExpr([](double v) { return std::tanh(v); });
    case Activation::Sigmoid:
      return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    case Activation::Softmax: {
      Mat out(z.rows(), z.cols());
      for (long i = 0; i < z.rows(); ++i) {
        const double mx = z.row(i).maxCoeff();
        Eigen::RowVectorXd e = (z.row(i).array() - mx).exp();
        out.row(i) = e / e.sum();
      }
      return out;
    }
  }
  return z;
}

double mse_loss(const Mat& pred, const Mat& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ShapeMismatch("mse_loss: shapes differ");
  return (pred - target).squaredNorm() / static_cast<double>(pred.size());
}

double l2_penalty(const ParamSet& params, double lambda) {
  if (lambda == 0.0) return 0.0;
  double sq = 0.0;
  for (const auto& name : params.names())
    if (params.is_weight(name)) sq += params.value(name).squaredNorm();
  return 0.5 * lambda * sq;
}

void add_l2_gradients(ParamSet& params, double lambda) {
  if (lambda == 0.0) return;
  for (const auto& name : params.names())
    if (params.is_weight(name)) params.grad(name) += lambda * params.value(name);
}

Mat dropout(const Mat& x, double rate, std::mt19937_64& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const double scaleUp = 1.0 / (1.0 - rate);
  Mat out(x.rows(), x.cols());
  for (long i = 0; i < x.rows(); ++i)
    for (long j = 0; j < x.cols(); ++j) out(i, j) = keep(rng) ? x(i, j) * scaleUp : 0.0;
  return out;
}

void optimizer_step(Optimizer kind, ParamSet& params, OptState& state) {
  if (kind == Optimizer::Sgd) {
    for (const auto& name : params.names())
      params.value(name) -= state.learningRate * params.grad(name);
    ++state.step;
    return;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& name : params.names()) {
    const Mat& g = params.grad(name);
    auto [mi, inserted1] = state.m.try_emplace(name, Mat::Zero(g.rows(), g.cols()));
    auto [vi, inserted2] = state.v.try_emplace(name, Mat::Zero(g.rows(), g.cols()));
    mi->second = state.beta1 * mi->second + (1.0 - state.beta1) * g;
    vi->second.array() =
        state.beta2 * vi->second.array() + (1.0 - state.beta2) * g.array().square();
    const Mat mHat = mi->second / c1;
    const Mat vHat = vi->second / c2;
    params.value(name).array() -=
        state.learningRate * mHat.array() / (vHat.array().sqrt() + state.epsilon);
  }
}

double grad_check(const std::function<double()>& loss, ParamSet& params, double eps) {
  double maxRel = 0.0;
  for (const auto& name : params.names()) {
    Mat& value = params.value(name);
    const Mat& analytic = params.grad(name);
    for (long j = 0; j < value.cols(); ++j) {
      for (long i = 0; i < value.rows(); ++i) {
        const double keep = value(i, j);
        value(i, j) = keep + eps;
        const double up = loss();
        value(i, j) = keep - eps;
        const double down = loss();
        value(i, j) = keep;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic(i, j);
        const double rel = std::abs(a - numeric) /
                           std::max({std::abs(a), std::abs(numeric), 1e-12});
        if (std::abs(a - numeric) < 1e-10) continue;  // both effectively zero
        maxRel = std::max(maxRel, rel);
      }
    }
  }
  return maxRel;
}

}  // namespace qest::nn
