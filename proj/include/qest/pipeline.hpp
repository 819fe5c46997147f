#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qest/liu.hpp"
#include "qest/micro_sim.hpp"
#include "qest/model/gdl.hpp"
#include "qest/nn/tensor.hpp"

namespace qest::pipeline {

using nn::Mat;

inline constexpr int kWindowSecondsDefault = 10;
inline constexpr std::array<const char*, 8> kFeatureOrder = {
    "stopCount", "stopOccupancy", "stopSpeed",  "advCount",
    "advOccupancy", "advSpeed",   "tlsGreen",   "liuEstimate"};
inline constexpr std::array<const char*, 2> kTargetOrder = {"maxQueueLengthMeters",
                                                            "nVehSeen"};

/// Piecewise-linear 1 Hz series through (time, value) knots with constant
/// extrapolation; all zeros (flagged) when no knots exist.
std::vector<double> liu_interpolate(
    const std::vector<std::pair<double, double>>& knots, int durationSeconds,
    bool* emptyFlag = nullptr);

struct Dataset {
  nn::Tensor X;          // sims x T x N x features
  nn::Tensor Y;          // sims x T x N x 2
  nn::Tensor liuWindow;  // sims x T x N x 1, window-averaged Liu series
  Mat adjacency;         // N x N with unit diagonal
  int windowSeconds = kWindowSecondsDefault;
  std::vector<std::string> featureOrder;
  std::vector<std::uint8_t> laneSignalized;  // per lane

  long sims() const { return X.dim(0); }
  long steps() const { return X.dim(1); }
  long laneCount() const { return X.dim(2); }
  long features() const { return X.dim(3); }
};

/// Window-averaged design/target tensors. The ground-truth queue uses the
/// startedHalts sum for simplified TLS runs and the maxJamLength maximum for
/// realistic ones, interpolated to 1 Hz before averaging.
Dataset build_design_tensors(
    const std::vector<sim::SimulationOutput>& runs,
    const std::vector<std::vector<liu::LaneEstimates>>& liuPerRun,
    int windowSeconds = kWindowSecondsDefault,
    const Mat* adjacency = nullptr);

void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Drops the liuEstimate feature (index 7); everything else is untouched.
Dataset ablate_liu_feature(const Dataset& d);

struct SplitIndices {
  std::vector<long> train, val, test;
};

/// Deterministic simulation-axis split; every part must be non-empty.
SplitIndices split_dataset(long simCount, double trainFrac, double valFrac,
                           double testFrac, std::uint64_t seed);

nn::Tensor select_sims(const nn::Tensor& t, const std::vector<long>& ids);

/// Per-channel standardization statistics fitted on training data.
struct Scaler {
  std::vector<double> mean, stdev;
  nn::Tensor apply(const nn::Tensor& t) const;
  nn::Tensor invert(const nn::Tensor& t) const;
  static Scaler fit(const nn::Tensor& t);
};

struct TrainConfig {
  double learningRate = 1e-3;
  int epochs = 100;
  double lambda = 1e-4;   // L2
  double dropoutRate = 0.2;
  nn::Optimizer optimizer = nn::Optimizer::Adam;
  double trainFrac = 0.8, valFrac = 0.1, testFrac = 0.1;
  std::uint64_t seed = 0;
};

struct TrainResult {
  model::Model model;  // best-validation parameters
  Scaler featureScaler, targetScaler;
  std::vector<double> trainLoss, valLoss;
  int bestEpoch = 0;
  std::vector<double> trainTargetMax;  // per target, raw units
};

/// Full-sequence per-simulation gradient steps; deterministic per seed.
TrainResult train(model::Model model, const nn::Tensor& trainX,
                  const nn::Tensor& trainY, const nn::Tensor& valX,
                  const nn::Tensor& valY, const Mat& adjacency,
                  const TrainConfig& cfg);

struct LaneMetrics {
  int lane = 0;
  double maeQueueDl = 0, mapeQueueDl = 0;
  double maeQueueLiu = 0, mapeQueueLiu = 0;
  double maeVehDl = 0, mapeVehDl = 0;
  bool unstable = false;
};

struct EvalReport {
  std::vector<LaneMetrics> lanes;           // signalized lanes
  double networkMaeQueueDl = 0, networkMaeQueueLiu = 0;
  double networkMapeQueueDl = 0, networkMapeQueueLiu = 0;
  double networkMaeVehDl = 0;
  double madQueueDl = 0, madQueueLiu = 0;
  int instabilityCount = 0;
  std::string to_json() const;
  void write_lanes_csv(const std::string& path) const;
};

/// Metrics for an arbitrary prediction tensor in raw target units.
EvalReport evaluate_predictions(const nn::Tensor& pred, const nn::Tensor& testY,
                                const nn::Tensor& testLiuWindow,
                                const std::vector<std::uint8_t>& laneSignalized,
                                const std::vector<double>& trainTargetMax);

/// Held-out evaluation; predictions and Liu series compared per lane at
/// window resolution.
EvalReport evaluate(model::Model& model, const Scaler& featureScaler,
                    const Scaler& targetScaler, const nn::Tensor& testX,
                    const nn::Tensor& testY, const nn::Tensor& testLiuWindow,
                    const Mat& adjacency,
                    const std::vector<std::uint8_t>& laneSignalized,
                    const std::vector<double>& trainTargetMax);

/// Prediction table for plotting: one row per (sim, window, lane).
void write_plots_csv(model::Model& model, const Scaler& featureScaler,
                     const Scaler& targetScaler, const nn::Tensor& testX,
                     const nn::Tensor& testY, const nn::Tensor& testLiuWindow,
                     const Mat& adjacency, const std::string& path);

struct Checkpoint {
  model::ModelConfig modelConfig;
  nn::ParamSet params;
  Scaler featureScaler, targetScaler;
  double trainFrac = 0.8, valFrac = 0.1, testFrac = 0.1;
  std::uint64_t splitSeed = 0;
  long simCount = 0;
  std::vector<double> trainTargetMax;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace qest::pipeline
