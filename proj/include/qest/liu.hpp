#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qest/micro_sim.hpp"
#include "qest/traffic_metrics.hpp"

namespace qest::liu {

enum class BreakpointCVariant { C, CPrime };
enum class ShortQueueMethod { InputOutput, ExpansionOnStopBar };
enum class LongQueueModel { Basic, Expansion };
enum class Method { InputOutput, Basic, Expansion, OversaturatedHold };

std::string method_name(Method m);

struct LiuConfig {
  double detectorDistance = 122.0;     // L_d, m
  double jamDensity = 0.15;            // k_j, veh/m
  double occupancyBlockThreshold = 3.0;  // s
  double timeGapThreshold = 2.5;         // s
  double dischargeSettle = 5.0;          // s after green start
  BreakpointCVariant cVariant = BreakpointCVariant::CPrime;
  ShortQueueMethod shortQueueMethod = ShortQueueMethod::InputOutput;
  LongQueueModel longQueueModel = LongQueueModel::Expansion;
  double freeSpeed = 13.89;              // u_0 for the input-output time shift
  double defaultDepartureWave = 15.0;    // v3 fallback, m/s
  double defaultDischargeWave = 5.0;     // |v2| fallback, m/s
};

/// Everything the estimator needs about one traffic light cycle of one lane.
/// Cycle n runs green-then-red: greenStart T_r^n < redStart T_g^n <
/// nextGreenStart T_r^{n+1}. The queue discharging at T_r^n accumulated
/// during the previous red [prevRedStart, greenStart].
struct CycleObservation {
  int cycleIndex = 0;
  double greenStart = 0.0;      // T_r^n
  double redStart = 0.0;        // T_g^n
  double nextGreenStart = 0.0;  // T_r^{n+1}
  double prevGreenStart = 0.0;  // T_r^{n-1}
  double prevRedStart = 0.0;    // T_g^{n-1}
  std::optional<double> prevBreakpointC;

  std::vector<metrics::DetectorEvent> advEvents;   // time-sorted
  std::vector<metrics::DetectorEvent> stopEvents;  // time-sorted
  std::vector<std::uint8_t> advBinaryOccupancy;    // 1 Hz, absolute seconds

  // Filled by estimate_cycle.
  std::optional<double> tA, tB, tC;
  metrics::TrafficState arrivalState, dischargeState;
  bool arrivalReliable = false;
  bool dischargeReliable = false;
};

/// Signed shockwave velocities; v1, v2, v4 are <= 0 by construction.
struct ShockwaveSet {
  double v1 = 0.0;
  double v2 = 0.0;
  double v3 = 0.0;
  double v4 = 0.0;
  double v5 = 0.0;
  std::optional<double> v2Alt;  // L_d / (T_B - T_r), positive magnitude
};

struct QueueEstimate {
  double maxQueueMeters = 0.0;  // L_max
  double maxQueueTime = 0.0;    // T_max
  std::optional<double> minQueueMeters;  // L_min
  std::optional<double> minQueueTime;    // T_min
  double vehicleCount = 0.0;    // N_max
  Method method = Method::InputOutput;
  bool usedDefaults = false;
};

/// 1 where occupancy has been saturated for at least two consecutive samples.
std::vector<std::uint8_t> binary_occupancy(const std::vector<double>& occupancy);

/// First run of ones with duration >= blockThreshold inside [t0, t1);
/// returns (run start, one past run end) in seconds.
std::optional<std::pair<double, double>> detect_breakpoints_ab(
    const std::vector<std::uint8_t>& binarySeries, double t0, double t1,
    double blockThreshold);

/// First over-threshold clear gap between consecutive vehicles after T_B and
/// not later than `until`. Variant C returns the vehicle after the gap,
/// variant C' the vehicle before it.
std::optional<double> detect_breakpoint_c(
    const std::vector<metrics::DetectorEvent>& events, double after,
    double until, double gapThreshold, BreakpointCVariant variant);

struct StateEstimate {
  metrics::TrafficState state;
  bool reliable = false;
};

/// Flow, space mean speed and density over the events inside [t0, t1).
StateEstimate estimate_traffic_state(
    const std::vector<metrics::DetectorEvent>& events, double t0, double t1);

ShockwaveSet shockwave_velocities(
    const metrics::TrafficState& arrival, const metrics::TrafficState& discharge,
    double jamDensity, std::optional<std::pair<double, double>> breakpointsAB,
    double detectorDistance, double greenStart,
    std::optional<metrics::TrafficState> nextArrival = std::nullopt);

QueueEstimate basic_model(double tB, double tC, double v2mag, double v3,
                          double detectorDistance, double nextRedStart,
                          std::optional<double> v4mag = std::nullopt);

QueueEstimate expansion_model(double vehiclesCounted, double jamDensity,
                              double detectorDistance, double v2mag,
                              double greenStart);

/// max(N_max_prev - N_l_prev + N_a_green, 0) + N_a_red, in vehicles.
double input_output_method(double nMaxPrev, double nLeftPrev, double nAdvGreen,
                           double nAdvRed);

/// Full dispatcher for one cycle; fills breakpoints and traffic states into
/// `obs` as a side effect.
QueueEstimate estimate_cycle(CycleObservation& obs, const LiuConfig& cfg,
                             const std::optional<QueueEstimate>& prev);

struct LaneEstimates {
  int lane = 0;
  std::vector<int> cycleIndex;
  std::vector<double> greenStart;
  std::vector<QueueEstimate> estimates;
};

std::vector<CycleObservation> build_cycle_observations(
    const sim::SimulationOutput& run, int lane);

/// Runs the dispatcher over every signalized lane and cycle of a run.
std::vector<LaneEstimates> estimate_run(const sim::SimulationOutput& run,
                                        const LiuConfig& cfg);

void save_estimates_csv(const std::vector<LaneEstimates>& all,
                        const std::string& path);
std::vector<LaneEstimates> load_estimates_csv(const std::string& path);

}  // namespace qest::liu
