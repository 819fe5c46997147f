#include "qest/liu.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace qest::liu {

std::string method_name(Method m) {
  switch (m) {
    case Method::InputOutput: return "inputOutput";
    case Method::Basic: return "basic";
    case Method::Expansion: return "expansion";
    case Method::OversaturatedHold: return "oversaturatedHold";
  }
  return "?";
}

namespace {

Method method_from_name(const std::string& s) {
  if (s == "inputOutput") return Method::InputOutput;
  if (s == "basic") return Method::Basic;
  if (s == "expansion") return Method::Expansion;
  if (s == "oversaturatedHold") return Method::OversaturatedHold;
  throw ConfigError("unknown method tag: " + s);
}

/// Vehicles with arrival time in [t0, t1) or [t0, t1] when inclusive.
int count_events(const std::vector<metrics::DetectorEvent>& events, double t0,
                 double t1, bool inclusiveEnd) {
  int n = 0;
  for (const auto& e : events) {
    if (e.time < t0) continue;
    if (inclusiveEnd ? e.time <= t1 + 1e-9 : e.time < t1) ++n;
  }
  return n;
}

}  // namespace

std::vector<std::uint8_t> binary_occupancy(const std::vector<double>& occupancy) {
  std::vector<std::uint8_t> out(occupancy.size(), 0);
  auto saturated = [](double v) { return v >= 1.0 - 1e-6; };
  for (size_t i = 1; i < occupancy.size(); ++i)
    if (saturated(occupancy[i]) && saturated(occupancy[i - 1])) out[i] = 1;
  return out;
}

std::optional<std::pair<double, double>> detect_breakpoints_ab(
    const std::vector<std::uint8_t>& binarySeries, double t0, double t1,
    double blockThreshold) {
  const int lo = std::max(0, static_cast<int>(std::floor(t0)));
  const int hi = std::min(static_cast<int>(binarySeries.size()),
                          static_cast<int>(std::ceil(t1)));
  int runStart = -1;
  for (int s = lo; s <= hi; ++s) {
    const bool one = s < hi && binarySeries[static_cast<size_t>(s)];
    if (one && runStart < 0) runStart = s;
    if (!one && runStart >= 0) {
      if (s - runStart >= blockThreshold)
        return std::make_pair(static_cast<double>(runStart), static_cast<double>(s));
      runStart = -1;
    }
  }
  return std::nullopt;
}

std::optional<double> detect_breakpoint_c(
    const std::vector<metrics::DetectorEvent>& events, double after, double until,
    double gapThreshold, BreakpointCVariant variant) {
  const metrics::DetectorEvent* prev = nullptr;
  for (const auto& e : events) {
    if (e.time <= after) continue;
    if (e.time > until) break;
    if (prev && e.timeGap > gapThreshold)  // strict: a gap of exactly the
      return variant == BreakpointCVariant::C ? e.time : prev->time;  // threshold is no breakpoint
    prev = &e;
  }
  return std::nullopt;
}

StateEstimate estimate_traffic_state(
    const std::vector<metrics::DetectorEvent>& events, double t0, double t1) {
  StateEstimate out;
  std::vector<metrics::DetectorEvent> window;
  std::vector<double> speeds;
  for (const auto& e : events) {
    if (e.time < t0 || e.time >= t1) continue;
    window.push_back(e);
    speeds.push_back(e.speed);
  }
  if (window.size() < 2) return out;  // unreliable; caller substitutes defaults
  out.state.flow = metrics::flow_from_events(window);
  out.state.spaceMeanSpeed = metrics::space_mean_speed(speeds);
  out.state.density = metrics::density(out.state.flow, out.state.spaceMeanSpeed);
  out.reliable = true;
  return out;
}

ShockwaveSet shockwave_velocities(
    const metrics::TrafficState& arrival, const metrics::TrafficState& discharge,
    double jamDensity, std::optional<std::pair<double, double>> breakpointsAB,
    double detectorDistance, double greenStart,
    std::optional<metrics::TrafficState> nextArrival) {
  auto safeDiv = [](double num, double den, const char* what) {
    if (std::abs(den) < 1e-9) throw DegenerateDensities(what);
    return num / den;
  };
  ShockwaveSet w;
  w.v1 = safeDiv(0.0 - arrival.flow, jamDensity - arrival.density, "v1 denominator");
  w.v2 = safeDiv(discharge.flow - 0.0, discharge.density - jamDensity, "v2 denominator");
  w.v3 = safeDiv(discharge.flow - arrival.flow, discharge.density - arrival.density,
                 "v3 denominator");
  w.v4 = safeDiv(0.0 - discharge.flow, jamDensity - discharge.density, "v4 denominator");
  w.v5 = nextArrival ? safeDiv(0.0 - nextArrival->flow,
                               jamDensity - nextArrival->density, "v5 denominator")
                     : w.v1;
  if (breakpointsAB) {
    const double tB = breakpointsAB->second;
    if (tB - greenStart > 1e-9) w.v2Alt = detectorDistance / (tB - greenStart);
  }
  return w;
}

QueueEstimate basic_model(double tB, double tC, double v2mag, double v3,
                          double detectorDistance, double nextRedStart,
                          std::optional<double> v4mag) {
  if (tC < tB) throw InvalidBreakpoints("basic_model: T_C before T_B");
  if (!(v2mag > 0.0) || !(v3 > 0.0))
    throw InvalidBreakpoints("basic_model: velocities must be positive");
  QueueEstimate q;
  q.method = Method::Basic;
  q.maxQueueMeters = detectorDistance + (tC - tB) / (1.0 / v2mag + 1.0 / v3);
  q.maxQueueTime = tB + (q.maxQueueMeters - detectorDistance) / v2mag;
  if (v4mag && *v4mag > 0.0) {
    q.minQueueMeters = (q.maxQueueMeters / v3 + q.maxQueueTime - nextRedStart) /
                       (1.0 / v3 + 1.0 / *v4mag);
    q.minQueueTime = nextRedStart + *q.minQueueMeters / *v4mag;
  }
  return q;
}

QueueEstimate expansion_model(double vehiclesCounted, double jamDensity,
                              double detectorDistance, double v2mag,
                              double greenStart) {
  QueueEstimate q;
  q.method = Method::Expansion;
  q.maxQueueMeters = vehiclesCounted / jamDensity + detectorDistance;
  q.maxQueueTime =
      v2mag > 0.0 ? greenStart + q.maxQueueMeters / v2mag : greenStart;
  q.vehicleCount = q.maxQueueMeters * jamDensity;
  return q;
}

double input_output_method(double nMaxPrev, double nLeftPrev, double nAdvGreen,
                           double nAdvRed) {
  return std::max(nMaxPrev - nLeftPrev + nAdvGreen, 0.0) + nAdvRed;
}

QueueEstimate estimate_cycle(CycleObservation& obs, const LiuConfig& cfg,
                             const std::optional<QueueEstimate>& prev) {
  // Breakpoints A/B from the advanced detector's binary occupancy over the
  // queue's lifetime: previous red (formation) plus this green (discharge).
  auto ab = detect_breakpoints_ab(obs.advBinaryOccupancy, obs.prevRedStart,
                                  obs.redStart, cfg.occupancyBlockThreshold);
  if (ab) {
    obs.tA = ab->first;
    obs.tB = ab->second;
  }

  if (!ab) {
    // Short queue: the rear never reached the advanced detector.
    if (cfg.shortQueueMethod == ShortQueueMethod::InputOutput) {
      const double shift = cfg.detectorDistance / cfg.freeSpeed;
      const double shiftedGreenEnd = obs.prevRedStart - shift;  // T_g^{n-1*}
      const double nLeftPrev = count_events(obs.stopEvents, obs.prevGreenStart,
                                            obs.prevRedStart, false);
      const double nAdvGreen =
          count_events(obs.advEvents, obs.prevGreenStart, shiftedGreenEnd, false);
      const double nAdvRed =
          count_events(obs.advEvents, shiftedGreenEnd, obs.greenStart, false);
      QueueEstimate q;
      q.method = Method::InputOutput;
      q.vehicleCount = input_output_method(prev ? prev->vehicleCount : 0.0,
                                           nLeftPrev, nAdvGreen, nAdvRed);
      q.maxQueueMeters = q.vehicleCount / cfg.jamDensity;
      q.maxQueueTime = obs.greenStart;
      return q;
    }
    // Expansion applied to the stop-bar detector with L_d = 0.
    const bool inclusive = cfg.cVariant == BreakpointCVariant::CPrime;
    auto stopC = detect_breakpoint_c(obs.stopEvents, obs.greenStart, obs.redStart,
                                     cfg.timeGapThreshold, cfg.cVariant);
    const double cEnd = stopC ? *stopC : obs.redStart;
    const double n = count_events(obs.stopEvents, obs.greenStart, cEnd,
                                  stopC ? inclusive : true);
    QueueEstimate q = expansion_model(n, cfg.jamDensity, 0.0,
                                      cfg.defaultDischargeWave, obs.greenStart);
    q.usedDefaults = !stopC;
    return q;
  }

  obs.tC = detect_breakpoint_c(obs.advEvents, *obs.tB, obs.redStart,
                               cfg.timeGapThreshold, cfg.cVariant);
  if (!obs.tC) {
    // Oversaturation: the queue rear stayed beyond the detector all cycle.
    QueueEstimate q;
    q.method = Method::OversaturatedHold;
    q.maxQueueMeters = prev ? prev->maxQueueMeters : cfg.detectorDistance;
    q.vehicleCount = q.maxQueueMeters * cfg.jamDensity;
    q.maxQueueTime = obs.greenStart;
    return q;
  }

  // Re-estimate shockwave speeds from this cycle's arrival/discharge windows.
  const double arrivalFrom =
      obs.prevBreakpointC ? *obs.prevBreakpointC : obs.prevRedStart;
  auto arrival = estimate_traffic_state(obs.advEvents, arrivalFrom, *obs.tA);
  auto discharge = estimate_traffic_state(
      obs.advEvents, obs.greenStart + cfg.dischargeSettle, obs.redStart);
  obs.arrivalState = arrival.state;
  obs.dischargeState = discharge.state;
  obs.arrivalReliable = arrival.reliable;
  obs.dischargeReliable = discharge.reliable;

  bool usedDefaults = false;
  double v2mag = cfg.defaultDischargeWave;
  double v3 = cfg.defaultDepartureWave;
  std::optional<double> v4mag;
  std::optional<ShockwaveSet> waves;
  if (arrival.reliable && discharge.reliable) {
    try {
      waves = shockwave_velocities(arrival.state, discharge.state, cfg.jamDensity,
                                   std::make_pair(*obs.tA, *obs.tB),
                                   cfg.detectorDistance, obs.greenStart);
    } catch (const DegenerateDensities&) {
      usedDefaults = true;
    }
  } else {
    usedDefaults = true;
  }
  if (waves) {
    // Preference: breakpoint-based |v2| when B exists, else the flow/density
    // form. v3 only makes sense positive; fall back otherwise.
    v2mag = waves->v2Alt ? *waves->v2Alt : std::abs(waves->v2);
    if (waves->v3 > 0.1)
      v3 = waves->v3;
    else
      usedDefaults = true;
    if (waves->v4 < 0.0) v4mag = std::abs(waves->v4);
  } else if (obs.tB && *obs.tB - obs.greenStart > 1e-9) {
    v2mag = cfg.detectorDistance / (*obs.tB - obs.greenStart);
  }

  QueueEstimate q;
  if (cfg.longQueueModel == LongQueueModel::Basic) {
    q = basic_model(*obs.tB, *obs.tC, v2mag, v3, cfg.detectorDistance,
                    obs.redStart, v4mag);
    q.vehicleCount = q.maxQueueMeters * cfg.jamDensity;
  } else {
    const bool inclusive = cfg.cVariant == BreakpointCVariant::CPrime;
    const double n =
        count_events(obs.advEvents, obs.greenStart, *obs.tC, inclusive);
    q = expansion_model(n, cfg.jamDensity, cfg.detectorDistance, v2mag,
                        obs.greenStart);
  }
  q.usedDefaults = usedDefaults;
  return q;
}

std::vector<CycleObservation> build_cycle_observations(
    const sim::SimulationOutput& run, int lane) {
  std::vector<CycleObservation> out;
  const auto& cycles = run.cycles.at(static_cast<size_t>(lane));
  if (cycles.size() < 2) return out;

  std::vector<metrics::DetectorEvent> advEvents, stopEvents;
  std::vector<double> advOcc;
  for (const auto& rec : run.e1Adv.at(static_cast<size_t>(lane))) {
    advOcc.push_back(rec.occupancyFraction);
    advEvents.insert(advEvents.end(), rec.events.begin(), rec.events.end());
  }
  for (const auto& rec : run.e1Stop.at(static_cast<size_t>(lane)))
    stopEvents.insert(stopEvents.end(), rec.events.begin(), rec.events.end());
  const auto binary = binary_occupancy(advOcc);

  // Cycle 0 has no formation red inside the data; start at cycle 1.
  for (size_t i = 1; i < cycles.size(); ++i) {
    CycleObservation obs;
    obs.cycleIndex = cycles[i].index;
    obs.greenStart = cycles[i].greenStart;
    obs.redStart = cycles[i].redStart;
    obs.nextGreenStart = cycles[i].nextGreenStart;
    obs.prevGreenStart = cycles[i - 1].greenStart;
    obs.prevRedStart = cycles[i - 1].redStart;
    obs.advEvents = advEvents;
    obs.stopEvents = stopEvents;
    obs.advBinaryOccupancy = binary;
    out.push_back(std::move(obs));
  }
  return out;
}

std::vector<LaneEstimates> estimate_run(const sim::SimulationOutput& run,
                                        const LiuConfig& cfg) {
  std::vector<LaneEstimates> all;
  for (int lane = 0; lane < run.laneCount(); ++lane) {
    auto observations = build_cycle_observations(run, lane);
    if (observations.empty()) continue;
    LaneEstimates le;
    le.lane = lane;
    std::optional<QueueEstimate> prev;
    for (size_t i = 0; i < observations.size(); ++i) {
      auto& obs = observations[i];
      QueueEstimate q = estimate_cycle(obs, cfg, prev);
      if (i + 1 < observations.size())
        observations[i + 1].prevBreakpointC = obs.tC;
      le.cycleIndex.push_back(obs.cycleIndex);
      le.greenStart.push_back(obs.greenStart);
      le.estimates.push_back(q);
      prev = q;
    }
    all.push_back(std::move(le));
  }
  return all;
}

void save_estimates_csv(const std::vector<LaneEstimates>& all,
                        const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f.precision(10);
  f << "lane,cycle,greenStart,maxQueueMeters,maxQueueTime,vehicleCount,method\n";
  for (const auto& le : all)
    for (size_t i = 0; i < le.estimates.size(); ++i) {
      const auto& q = le.estimates[i];
      f << le.lane << "," << le.cycleIndex[i] << "," << le.greenStart[i] << ","
        << q.maxQueueMeters << "," << q.maxQueueTime << "," << q.vehicleCount
        << "," << method_name(q.method) << "\n";
    }
}

std::vector<LaneEstimates> load_estimates_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  std::map<int, LaneEstimates> byLane;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 7) continue;
    const int lane = std::stoi(cells[0]);
    auto& le = byLane[lane];
    le.lane = lane;
    le.cycleIndex.push_back(std::stoi(cells[1]));
    le.greenStart.push_back(std::stod(cells[2]));
    QueueEstimate q;
    q.maxQueueMeters = std::stod(cells[3]);
    q.maxQueueTime = std::stod(cells[4]);
    q.vehicleCount = std::stod(cells[5]);
    q.method = method_from_name(cells[6]);
    le.estimates.push_back(q);
  }
  std::vector<LaneEstimates> out;
  for (auto& [lane, le] : byLane) out.push_back(std::move(le));
  return out;
}

}  // namespace qest::liu
