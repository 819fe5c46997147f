#pragma once

#include <random>
#include <string>
#include <vector>

#include "qest/nn/layers.hpp"
#include "qest/nn/tape.hpp"
#include "qest/nn/tensor.hpp"

namespace qest::model {

using nn::Mat;
using nn::Var;

struct ModelConfig {
  int inputFeatures = 8;
  int gatFeatures = 128;  // output width of each GAT layer
  int gat1Heads = 2;
  bool gat1Concat = true;  // concat heads (per-head width = gatFeatures/heads)
  int gat2Heads = 2;
  bool gat2Concat = false;  // average heads (per-head width = gatFeatures)
  int denseWidth = 128;
  int hiddenWidth = 128;  // encoder and decoder units
  int outputs = 2;
  double attLeakSlope = 0.2;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

/// Model parameters plus the wiring description.
struct Model {
  ModelConfig cfg;
  nn::ParamSet params;
};

Model build_model(const ModelConfig& cfg, std::uint64_t seed);

/// One attention head: pre-activation aggregate and the attention rows.
/// e_ij = leaky(att_src^T W h_i + att_dst^T W h_j) over the neighborhood
/// given by A (unit diagonal expected); alpha = masked row softmax.
struct GatHeadOut {
  Var preActivation;  // N x F'
  Var attention;      // N x N, zero outside the neighborhood
};
GatHeadOut gat_head_pre(Var H, const Mat& A, Var W, Var attSrc, Var attDst,
                        double leakSlope);

/// sigma_out applied to one head: h'_i = tanh(sum_j alpha_ij W h_j).
std::pair<Var, Var> gat_head(Var H, const Mat& A, Var W, Var attSrc, Var attDst,
                             double leakSlope);

/// K independent heads combined by concatenation or pre-activation average.
Var gat_multi_head(nn::Tape& tape, Var H, const Mat& A, nn::ParamSet& params,
                   const std::string& prefix, int heads, bool concat,
                   double leakSlope);

/// Batched GRU step: rows of x/hPrev are independent sequences.
Var gru_step(nn::Tape& tape, nn::ParamSet& params, const std::string& prefix,
             Var x, Var hPrev);

/// Fold of gru_step from h_0 = 0 over a T-step input sequence.
std::vector<Var> encode(nn::Tape& tape, nn::ParamSet& params,
                        const std::string& prefix, const std::vector<Var>& xs);

/// Past-only temporal attention: context over encoder states h_1..h_i.
struct AttnOut {
  Var context;    // N x H
  Var attention;  // N x i
};
/// `cache` (optional) holds the U_a h_j products shared across decoder steps.
AttnOut attention_context(nn::Tape& tape, nn::ParamSet& params,
                          const std::string& prefix, Var sPrev,
                          const std::vector<Var>& encoderStates, size_t upTo,
                          std::vector<Var>* cache = nullptr);

/// Context-primed decoder GRU step with linear output layer.
struct DecoderOut {
  Var y;  // N x outputs
  Var s;  // N x H
};
DecoderOut decoder_step(nn::Tape& tape, nn::ParamSet& params, Var yPrev,
                        Var sPrev, Var context);

struct ForwardOptions {
  double dropoutRate = 0.0;
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

/// One simulation (T timesteps of N x F) through the full stack; returns the
/// per-timestep outputs (each N x outputs).
std::vector<Var> forward_sequence(nn::Tape& tape, Model& model,
                                  const std::vector<Mat>& X, const Mat& A,
                                  const ForwardOptions& opts);

/// X: sims x T x N x F  ->  predictions sims x T x N x outputs (inference).
nn::Tensor model_forward(Model& model, const nn::Tensor& X, const Mat& A);

/// MSE + L2 loss over the whole tensor pair; gradients land in model.params.
double model_loss_and_grads(Model& model, const nn::Tensor& X, const nn::Tensor& Y,
                            const Mat& A, double lambda, double dropoutRate,
                            std::mt19937_64& rng);

/// Loss only (no gradient bookkeeping); used by finite-difference checks.
double model_loss(Model& model, const nn::Tensor& X, const nn::Tensor& Y,
                  const Mat& A, double lambda);

}  // namespace qest::model
