#pragma once

#include <functional>
#include <random>
#include <string>

#include "qest/nn/params.hpp"

namespace qest::nn {

enum class Activation { Relu, Tanh, Sigmoid, Softmax };
enum class Optimizer { Sgd, Adam };

/// W x + b with shape validation.
Mat affine_forward(const Mat& W, const Mat& x, const Mat& b);

/// Elementwise activations; softmax normalizes along the last axis (columns
/// of each row).
Mat activation(Activation kind, const Mat& z);

double mse_loss(const Mat& pred, const Mat& target);

/// lambda/2 * sum of squared weight entries (biases excluded).
double l2_penalty(const ParamSet& params, double lambda);
/// Adds lambda * W to each weight gradient slot.
void add_l2_gradients(ParamSet& params, double lambda);

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate). Identity at inference.
Mat dropout(const Mat& x, double rate, std::mt19937_64& rng, bool training);

struct OptState {
  double learningRate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::map<std::string, Mat> m, v;  // adam moments
};

/// Applies one update from the gradients held in `params`.
void optimizer_step(Optimizer kind, ParamSet& params, OptState& state);

/// Max relative error between the analytic gradients already stored in
/// `params` and central finite differences of `loss` (which must evaluate the
/// model at the current parameter values without touching gradients).
double grad_check(const std::function<double()>& loss, ParamSet& params,
                  double eps = 1e-5);

}  // namespace qest::nn
