#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "qest/micro_sim.hpp"
#include "qest/net_graph.hpp"

using namespace qest;
using namespace qest::sim;

namespace {

/// 1x1 grid, one lane per direction; the north entry approaches southbound.
struct SingleApproach {
  net::RoadNetwork network;
  int entryLane = -1;
  int exitLane = -1;

  SingleApproach(double laneLen = 200.0, double ld = 122.0)
      : network(net::build_grid_network(1, 1, laneLen, 1, ld)) {
    for (const auto& lane : network.lanes)
      if (lane.fringeEntry && lane.travelDir == net::Dir::South)
        entryLane = lane.id;
    auto conn = network.connection_for(entryLane, net::Turn::Straight);
    REQUIRE(conn.has_value());
    exitLane = conn->toLane;
  }

  TripTable arrivals(const std::vector<double>& departs) const {
    TripTable t;
    for (double d : departs) {
      Trip trip;
      trip.departTime = d;
      trip.lanePath = {entryLane, exitLane};
      t.trips.push_back(trip);
    }
    return t;
  }

  /// Green [0, greenS) then red [greenS, greenS + redS) for the entry lane;
  /// every other lane stays green.
  TlsProgram greenRed(double greenS, double redS) const {
    TlsProgram p;
    TlsPhase g, r;
    g.duration = greenS;
    g.green.assign(static_cast<size_t>(network.laneCount()), 1);
    r.duration = redS;
    r.green.assign(static_cast<size_t>(network.laneCount()), 1);
    r.green[static_cast<size_t>(entryLane)] = 0;
    p.phases = {g, r};
    return p;
  }
};

}  // namespace

TEST_CASE("trip generation") {
  auto network = net::build_grid_network(2, 2, 300, 1, 122);

  SUBCASE("zero rate yields no trips") {
    CHECK(generate_trips(network, 0.0, 600, 1, true).trips.empty());
  }

  SUBCASE("poisson count at rate 2.5 over 1800 s") {
    auto trips = generate_trips(network, 2.5, 1800, 12345, true);
    const double expected = 2.5 * 1800;
    const double sigma = std::sqrt(expected);
    CHECK(std::abs(static_cast<double>(trips.trips.size()) - expected) <
          3.0 * sigma);
  }

  SUBCASE("identical seed gives identical tables") {
    auto a = generate_trips(network, 1.0, 600, 99, true);
    auto b = generate_trips(network, 1.0, 600, 99, true);
    REQUIRE(a.trips.size() == b.trips.size());
    for (size_t i = 0; i < a.trips.size(); ++i) {
      CHECK(a.trips[i].departTime == b.trips[i].departTime);
      CHECK(a.trips[i].lanePath == b.trips[i].lanePath);
    }
  }

  SUBCASE("trips start on entry lanes and end on exit lanes") {
    auto trips = generate_trips(network, 1.0, 300, 5, true);
    REQUIRE(!trips.trips.empty());
    for (const auto& t : trips.trips) {
      CHECK(network.lane(t.lanePath.front()).fringeEntry);
      CHECK(network.lane(t.lanePath.back()).fringeExit);
    }
  }
}

TEST_CASE("stepping an empty simulation only advances the clock") {
  SingleApproach s;
  SimConfig cfg;
  cfg.duration = 10;
  cfg.customTls = s.greenRed(30, 30);
  Simulation sim(s.network, cfg, TripTable{});
  sim.step();
  sim.step();
  CHECK(sim.time() == doctest::Approx(1.0));
  CHECK(sim.vehicles().empty());
  CHECK(sim.entered() == 0);
}

TEST_CASE("free vehicle reaches the desired speed and integrates it") {
  SingleApproach s(400.0, 122.0);
  SimConfig cfg;
  cfg.duration = 60;
  cfg.customTls = s.greenRed(60, 0.5);  // effectively always green
  Simulation sim(s.network, cfg, s.arrivals({0.0}));

  for (int i = 0; i < 10; ++i) sim.step();
  auto vs = sim.vehicles();
  REQUIRE(vs.size() == 1);
  CHECK(vs[0].speed == doctest::Approx(cfg.freeSpeed));
  const double posBefore = vs[0].pos;
  sim.step();
  auto after = sim.vehicles();
  REQUIRE(after.size() == 1);
  CHECK(after[0].pos - posBefore == doctest::Approx(cfg.freeSpeed * cfg.dt));
}

TEST_CASE("vehicle approaching red halts with its front at the stop bar") {
  SingleApproach s(200.0, 122.0);
  SimConfig cfg;
  cfg.duration = 60;
  // Red from t=0 for the whole minute.
  cfg.customTls = s.greenRed(0.5, 59.5);
  Simulation sim(s.network, cfg, s.arrivals({1.0}));
  for (int i = 0; i < 100; ++i) sim.step();
  auto vs = sim.vehicles();
  REQUIRE(vs.size() == 1);
  CHECK(vs[0].lane == s.entryLane);
  CHECK(vs[0].speed == doctest::Approx(0.0));
  CHECK(vs[0].pos == doctest::Approx(200.0).epsilon(1e-6));
}

TEST_CASE("detector samples") {
  SUBCASE("no traffic: zero counts, zero occupancy, zero nVehSeen") {
    SingleApproach s;
    SimConfig cfg;
    cfg.duration = 30;
    cfg.customTls = s.greenRed(30, 30);
    auto out = run_simulation(s.network, cfg, TripTable{});
    for (int lane = 0; lane < out.laneCount(); ++lane)
      for (const auto& r : out.e1Adv[static_cast<size_t>(lane)]) {
        CHECK(r.vehicleCount == 0);
        CHECK(r.occupancyFraction == 0.0);
      }
    for (const auto& r : out.e2[static_cast<size_t>(s.entryLane)])
      CHECK(r.nVehSeen == 0);
  }

  SUBCASE("standing vehicle saturates the stop detector") {
    SingleApproach s(200.0, 122.0);
    SimConfig cfg;
    cfg.duration = 60;
    cfg.customTls = s.greenRed(0.5, 59.5);
    auto out = run_simulation(s.network, cfg, s.arrivals({1.0}));
    // Vehicle needs ~15 s to reach the bar; afterwards occupancy is 1.0.
    for (int t = 30; t < 60; ++t)
      CHECK(out.e1Stop[static_cast<size_t>(s.entryLane)][static_cast<size_t>(t)]
                .occupancyFraction == doctest::Approx(1.0));
  }

  SUBCASE("crossing event carries t_o = L_e / u_i") {
    SingleApproach s(400.0, 122.0);
    SimConfig cfg;
    cfg.duration = 60;
    cfg.customTls = s.greenRed(60, 0.5);
    auto out = run_simulation(s.network, cfg, s.arrivals({0.0}));
    std::vector<metrics::DetectorEvent> events;
    double coverage = 0.0;
    for (const auto& r : out.e1Adv[static_cast<size_t>(s.entryLane)]) {
      events.insert(events.end(), r.events.begin(), r.events.end());
      coverage += r.occupancyFraction;
    }
    REQUIRE(events.size() == 1);
    CHECK(events[0].speed == doctest::Approx(cfg.freeSpeed));
    CHECK(events[0].occupancyTime ==
          doctest::Approx(cfg.effectiveLength / cfg.freeSpeed));
    // total coverage across seconds equals the occupancy time
    CHECK(coverage == doctest::Approx(events[0].occupancyTime).epsilon(0.02));
  }
}

TEST_CASE("deterministic single-lane queueing: 4 s arrivals, 30 s red") {
  // Eight vehicles per cycle timed to reach the stop bar during red; the
  // whole platoon discharges in the following green.
  SingleApproach s(200.0, 122.0);
  SimConfig cfg;
  cfg.duration = 360;
  cfg.customTls = s.greenRed(30, 30);
  std::vector<double> departs;
  for (int cycle = 0; cycle < 5; ++cycle)
    for (int k = 0; k < 8; ++k) departs.push_back(60.0 * cycle + 17.0 + 4.0 * k);
  auto out = run_simulation(s.network, cfg, s.arrivals(departs));

  const auto& e2 = out.e2[static_cast<size_t>(s.entryLane)];
  const auto& cycles = out.cycles[static_cast<size_t>(s.entryLane)];
  REQUIRE(cycles.size() >= 5);
  int cyclesWithQueue = 0;
  for (size_t n = 1; n < 5; ++n) {
    // Queue builds in [T_g^{n-1}, T_r^n) and discharges after T_r^n.
    int halts = 0;
    for (int t = static_cast<int>(cycles[n - 1].redStart);
         t < static_cast<int>(cycles[n].redStart) && t < out.seconds(); ++t)
      halts += e2[static_cast<size_t>(t)].startedHalts;
    double maxJam = 0.0;
    for (int t = static_cast<int>(cycles[n - 1].redStart);
         t < static_cast<int>(cycles[n].redStart) && t < out.seconds(); ++t)
      maxJam = std::max(maxJam, e2[static_cast<size_t>(t)].maxJamLengthMeters);
    if (halts > 0) {
      ++cyclesWithQueue;
      CHECK(halts == 8);  // ceil(30 s red / 4 s headway)
      // Halted platoon length stays within one spacing of count * L_e.
      CHECK(std::abs(maxJam - halts * cfg.effectiveLength) <= cfg.effectiveLength);
    }
  }
  CHECK(cyclesWithQueue >= 3);
  CHECK(out.entered == static_cast<int>(departs.size()));
  CHECK(out.entered == out.exited + out.remaining);
}

TEST_CASE("same seed reproduces the identical simulation output") {
  auto network = net::build_grid_network(2, 2, 300, 1, 122);
  SimConfig cfg;
  cfg.arrivalRate = 0.4;
  cfg.duration = 240;
  cfg.seed = 77;
  auto a = run_simulation(network, cfg);
  auto b = run_simulation(network, cfg);
  CHECK(a.entered == b.entered);
  CHECK(a.exited == b.exited);
  for (int lane = 0; lane < a.laneCount(); ++lane)
    for (int t = 0; t < a.seconds(); ++t) {
      const auto& ra = a.e2[static_cast<size_t>(lane)][static_cast<size_t>(t)];
      const auto& rb = b.e2[static_cast<size_t>(lane)][static_cast<size_t>(t)];
      CHECK(ra.nVehSeen == rb.nVehSeen);
      CHECK(ra.startedHalts == rb.startedHalts);
      CHECK(ra.maxJamLengthMeters == doctest::Approx(rb.maxJamLengthMeters));
    }
}

TEST_CASE("vanishing arrival rate leaves the network empty") {
  auto network = net::build_grid_network(2, 2, 300, 1, 122);
  SimConfig cfg;
  cfg.arrivalRate = 1e-9;
  cfg.duration = 120;
  auto out = run_simulation(network, cfg);
  for (int lane = 0; lane < out.laneCount(); ++lane)
    for (const auto& r : out.e2[static_cast<size_t>(lane)]) CHECK(r.nVehSeen == 0);
}

TEST_CASE("no collisions and conservation on a loaded grid") {
  auto network = net::build_grid_network(2, 2, 250, 2, 100);
  SimConfig cfg;
  cfg.arrivalRate = 1.2;
  cfg.duration = 300;
  cfg.seed = 31;
  auto trips = generate_trips(network, cfg.arrivalRate, cfg.duration, cfg.seed, true);
  Simulation sim(network, cfg, trips);
  for (int step = 0; step < 600; ++step) {
    sim.step();
    std::map<int, std::vector<Simulation::VehicleView>> byLane;
    for (const auto& v : sim.vehicles()) byLane[v.lane].push_back(v);
    for (auto& [lane, vs] : byLane) {
      std::sort(vs.begin(), vs.end(),
                [](const auto& a, const auto& b) { return a.pos > b.pos; });
      for (size_t i = 1; i < vs.size(); ++i)
        CHECK(vs[i - 1].pos - vs[i].pos >= cfg.effectiveLength - 1e-9);
    }
  }
  CHECK(sim.entered() >= sim.exited());
}

TEST_CASE("realistic signals produce multi-halt vehicles on left-turn lanes") {
  auto network = net::build_grid_network(2, 2, 250, 2, 100);
  SimConfig cfg;
  cfg.arrivalRate = 1.0;
  cfg.duration = 600;
  cfg.seed = 9;
  cfg.tlsMode = TlsMode::Realistic;
  auto out = run_simulation(network, cfg);
  int total = 0;
  for (const auto& lane : network.lanes) {
    const bool hasLeft = std::find(lane.movements.begin(), lane.movements.end(),
                                   net::Turn::Left) != lane.movements.end();
    if (hasLeft) total += out.multiHaltVehicles[static_cast<size_t>(lane.id)];
  }
  CHECK(total >= 1);
}

TEST_CASE("run directory round trip") {
  SingleApproach s;
  SimConfig cfg;
  cfg.duration = 60;
  cfg.arrivalRate = 0.3;
  cfg.customTls = s.greenRed(30, 30);
  auto out = run_simulation(s.network, cfg, s.arrivals({1, 5, 9}));
  const std::string dir = "test_run_rt";
  save_run(out, s.network, dir);
  auto back = load_run(dir);
  CHECK(back.laneCount() == out.laneCount());
  CHECK(back.seconds() == out.seconds());
  CHECK(back.detectorDistance == doctest::Approx(s.network.detectorDistance));
  for (int lane = 0; lane < out.laneCount(); ++lane) {
    for (int t = 0; t < out.seconds(); ++t) {
      const auto& a = out.e1Adv[static_cast<size_t>(lane)][static_cast<size_t>(t)];
      const auto& b = back.e1Adv[static_cast<size_t>(lane)][static_cast<size_t>(t)];
      CHECK(a.vehicleCount == b.vehicleCount);
      CHECK(a.occupancyFraction == doctest::Approx(b.occupancyFraction));
      CHECK(a.events.size() == b.events.size());
    }
    CHECK(out.cycles[static_cast<size_t>(lane)].size() ==
          back.cycles[static_cast<size_t>(lane)].size());
  }
  auto netBack = load_run_network(dir);
  CHECK(netBack.hash() == s.network.hash());
  std::filesystem::remove_all(dir);
}
