#pragma once

#include <vector>

#include "qest/errors.hpp"

namespace qest::metrics {

/// Flow, density and space mean speed of one traffic situation.
struct TrafficState {
  double flow = 0.0;           // q, veh/s
  double density = 0.0;        // k, veh/m
  double spaceMeanSpeed = 0.0; // u_s, m/s
};

/// One detector passage: occupancy time and the clear gap preceding it.
struct DetectorEvent {
  double time = 0.0;          // s, front arrival at the detector
  double occupancyTime = 0.0; // t_o, s
  double timeGap = 0.0;       // t_g, s since the previous vehicle cleared
  double speed = 0.0;         // u_i, m/s
};

struct PressureInputs {
  double saturationFlow = 0.0; // q_m,l, veh/s
  double ownQueue = 0.0;       // x_l, m
  struct Output {
    double routingProportion = 0.0; // r_k in [0,1]
    double queue = 0.0;             // x_k, m
  };
  std::vector<Output> outputs;  // set O_l
};

struct ErrorMetrics {
  double mape = 0.0;     // percent, over nonzero observations
  double mae = 0.0;      // same units as the series
  int skippedZeros = 0;  // observations excluded from the MAPE mean
};

/// Harmonic mean of individual speeds.
double space_mean_speed(const std::vector<double>& speeds);

/// Reciprocal of the mean per-vehicle presence time t_o + t_g.
double flow_from_events(const std::vector<DetectorEvent>& events);

/// Hydrodynamic relation k = q / u_s.
double density(double flow, double spaceMeanSpeed);

double lane_pressure(const PressureInputs& inputs);

/// MAPE (percent, zero observations skipped and counted) and MAE.
ErrorMetrics error_metrics(const std::vector<double>& observed,
                           const std::vector<double>& estimated);

/// Mean absolute deviation of per-lane MAEs from their mean.
double mad(const std::vector<double>& perLaneMaes);

}  // namespace qest::metrics
