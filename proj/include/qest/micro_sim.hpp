#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qest/net_graph.hpp"
#include "qest/traffic_metrics.hpp"

namespace qest::sim {

enum class TlsMode { Simplified, Realistic };

std::string tls_mode_name(TlsMode m);
TlsMode tls_mode_from_name(const std::string& name);

/// One signal phase: duration plus a green flag per lane (global lane ids).
struct TlsPhase {
  double duration = 0.0;
  std::vector<std::uint8_t> green;
};

struct TlsProgram {
  std::vector<TlsPhase> phases;
  double cycleLength() const;
  bool greenAt(int lane, double t) const;
  /// Contiguous [start, end) green offsets of a lane within one cycle.
  std::optional<std::pair<double, double>> greenWindow(int lane) const;
};

/// Simplified: one exclusive phase per approach direction. Realistic:
/// opposing approaches share a phase and left turns must yield.
TlsProgram make_tls_program(const net::RoadNetwork& network, TlsMode mode,
                            double phaseDuration);

struct SimConfig {
  double arrivalRate = 0.5;   // veh/s, network-wide
  double duration = 600.0;    // s
  std::uint64_t seed = 1;
  TlsMode tlsMode = TlsMode::Simplified;
  bool laneChanging = false;
  double phaseDuration = 30.0;
  std::optional<TlsProgram> customTls;

  double freeSpeed = 13.89;       // u_0, m/s
  double effectiveLength = 6.67;  // L_e, m; jam density k_j = 1/L_e
  double accel = 2.6;             // m/s^2
  double decel = 4.5;             // m/s^2, comfortable braking bound
  double dt = 0.5;                // s, internal step
  double haltThreshold = 0.1;     // m/s
  double startupGap = 2.0;        // m a halted vehicle waits for before moving
  double yieldHorizon = 5.0;      // s, opposing-through clearance for left turns

  double jamDensity() const { return 1.0 / effectiveLength; }
};

/// One trip: departure plus either an explicit lane path (no lane changing)
/// or a link-level path with a chosen entry lane.
struct Trip {
  double departTime = 0.0;
  std::vector<int> lanePath;          // lane ids, hop by hop
  std::vector<int> linkPath;          // link indices (lane-change mode)
  int entryLaneIndex = 0;
};

struct TripTable {
  std::vector<Trip> trips;
};

/// Directed link: all parallel lanes between one node pair.
struct Link {
  net::Node from, to;
  std::vector<int> laneIds;  // ordered by laneIndex (0 = rightmost)
};

std::vector<Link> build_links(const net::RoadNetwork& network);

TripTable generate_trips(const net::RoadNetwork& network, double arrivalRate,
                         double duration, std::uint64_t seed,
                         bool laneFeasiblePaths);

struct E1Record {
  double time = 0.0;
  int vehicleCount = 0;
  double occupancyFraction = 0.0;
  double meanSpeed = 0.0;  // arithmetic mean over passing vehicles, 0 if none
  std::vector<metrics::DetectorEvent> events;
};

struct E2Record {
  double time = 0.0;
  int startedHalts = 0;
  double maxJamLengthMeters = 0.0;
  int nVehSeen = 0;
};

struct LaneCycle {
  int index = 0;
  double greenStart = 0.0;      // T_r^n
  double redStart = 0.0;        // T_g^n
  double nextGreenStart = 0.0;  // T_r^{n+1}
};

struct SimulationOutput {
  std::vector<std::vector<E1Record>> e1Stop;   // [lane][second]
  std::vector<std::vector<E1Record>> e1Adv;    // [lane][second]
  std::vector<std::vector<E2Record>> e2;       // [lane][second]
  std::vector<std::vector<std::uint8_t>> tlsGreen;  // [lane][second]
  std::vector<std::vector<LaneCycle>> cycles;  // [lane], signalized lanes only
  std::vector<int> multiHaltVehicles;          // [lane] vehicles halting >1 time
  std::uint64_t seed = 0;
  double arrivalRate = 0.0;
  double duration = 0.0;
  double detectorDistance = 0.0;  // L_d of the generating network
  std::string tlsMode;
  std::uint64_t networkHash = 0;
  int entered = 0;
  int exited = 0;
  int remaining = 0;
  int laneCount() const { return static_cast<int>(e2.size()); }
  int seconds() const { return e2.empty() ? 0 : static_cast<int>(e2[0].size()); }
};

/// Microscopic single-run simulator. One instance is single-threaded and
/// mutable; independent instances share nothing.
class Simulation {
 public:
  Simulation(const net::RoadNetwork& network, SimConfig cfg, TripTable trips);
  ~Simulation();
  Simulation(Simulation&&) noexcept;
  Simulation& operator=(Simulation&&) noexcept;

  void step();
  double time() const;

  struct VehicleView {
    int id = -1;
    int lane = -1;
    double pos = 0.0;
    double speed = 0.0;
    int halts = 0;
  };
  std::vector<VehicleView> vehicles() const;
  int entered() const;
  int exited() const;

  /// Runs to cfg.duration and returns the detector/TLS streams.
  SimulationOutput run();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

SimulationOutput run_simulation(const net::RoadNetwork& network,
                                const SimConfig& cfg);
SimulationOutput run_simulation(const net::RoadNetwork& network,
                                const SimConfig& cfg, const TripTable& trips);

/// CSV-per-stream serialization plus a JSON run manifest. The manifest embeds
/// the network description so downstream stages can rebuild the lane graph.
void save_run(const SimulationOutput& out, const net::RoadNetwork& network,
              const std::string& dir);
SimulationOutput load_run(const std::string& dir);
net::RoadNetwork load_run_network(const std::string& dir);

}  // namespace qest::sim
