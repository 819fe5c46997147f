#include "qest/traffic_metrics.hpp"

#include <cmath>

namespace qest::metrics {

double space_mean_speed(const std::vector<double>& speeds) {
  if (speeds.empty()) throw EmptyInput("space_mean_speed: empty speed list");
  double inv = 0.0;
  for (double u : speeds) {
    if (!(u > 0.0)) throw NonPositiveSpeed("space_mean_speed: speed <= 0");
    inv += 1.0 / u;
  }
  return static_cast<double>(speeds.size()) / inv;
}

double flow_from_events(const std::vector<DetectorEvent>& events) {
  if (events.empty()) throw EmptyInput("flow_from_events: no events");
  double sum = 0.0;
  for (const auto& e : events) sum += e.occupancyTime + e.timeGap;
  if (!(sum > 0.0)) throw EmptyInput("flow_from_events: zero total headway");
  return static_cast<double>(events.size()) / sum;
}

double density(double flow, double spaceMeanSpeed) {
  if (!(spaceMeanSpeed > 0.0)) throw ZeroSpeed("density: u_s must be > 0");
  return flow / spaceMeanSpeed;
}

double lane_pressure(const PressureInputs& inputs) {
  double outflowQueue = 0.0;
  for (const auto& o : inputs.outputs)
    outflowQueue += o.routingProportion * o.queue;
  return inputs.saturationFlow * (inputs.ownQueue - outflowQueue);
}

ErrorMetrics error_metrics(const std::vector<double>& observed,
                           const std::vector<double>& estimated) {
  if (observed.size() != estimated.size())
    throw LengthMismatch("error_metrics: series lengths differ");
  if (observed.empty()) throw EmptyInput("error_metrics: empty series");
  ErrorMetrics m;
  double apeSum = 0.0;
  int apeCount = 0;
  double aeSum = 0.0;
  for (size_t i = 0; i < observed.size(); ++i) {
    const double err = std::abs(observed[i] - estimated[i]);
    aeSum += err;
    if (observed[i] != 0.0) {
      apeSum += err / std::abs(observed[i]);
      ++apeCount;
    } else {
      ++m.skippedZeros;
    }
  }
  m.mae = aeSum / static_cast<double>(observed.size());
  m.mape = apeCount > 0 ? 100.0 * apeSum / static_cast<double>(apeCount) : 0.0;
  return m;
}

double mad(const std::vector<double>& perLaneMaes) {
  if (perLaneMaes.empty()) throw EmptyInput("mad: empty input");
  double mean = 0.0;
  for (double v : perLaneMaes) mean += v;
  mean /= static_cast<double>(perLaneMaes.size());
  double dev = 0.0;
  for (double v : perLaneMaes) dev += std::abs(v - mean);
  return dev / static_cast<double>(perLaneMaes.size());
}

}  // namespace qest::metrics
