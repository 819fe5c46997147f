#include "qest/micro_sim.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <queue>
#include <random>

namespace qest::sim {

namespace {

net::Dir opposite(net::Dir d) {
  return static_cast<net::Dir>((static_cast<int>(d) + 2) % 4);
}

std::optional<net::Turn> turn_between(net::Dir from, net::Dir to) {
  for (net::Turn t : {net::Turn::Left, net::Turn::Straight, net::Turn::Right})
    if (net::turn_result(from, t) == to) return t;
  return std::nullopt;
}

}  // namespace

std::string tls_mode_name(TlsMode m) {
  return m == TlsMode::Simplified ? "simplified" : "realistic";
}

TlsMode tls_mode_from_name(const std::string& name) {
  if (name == "simplified") return TlsMode::Simplified;
  if (name == "realistic") return TlsMode::Realistic;
  throw ConfigError("unknown tls mode: " + name);
}

double TlsProgram::cycleLength() const {
  double c = 0.0;
  for (const auto& p : phases) c += p.duration;
  return c;
}

bool TlsProgram::greenAt(int lane, double t) const {
  const double cycle = cycleLength();
  if (cycle <= 0.0) return true;
  double local = std::fmod(t, cycle);
  if (local < 0.0) local += cycle;
  for (const auto& p : phases) {
    if (local < p.duration)
      return lane < static_cast<int>(p.green.size()) &&
             p.green[static_cast<size_t>(lane)];
    local -= p.duration;
  }
  return false;
}

std::optional<std::pair<double, double>> TlsProgram::greenWindow(int lane) const {
  double offset = 0.0;
  std::optional<std::pair<double, double>> window;
  for (const auto& p : phases) {
    const bool g = lane < static_cast<int>(p.green.size()) &&
                   p.green[static_cast<size_t>(lane)];
    if (g) {
      if (!window)
        window = {offset, offset + p.duration};
      else if (window->second == offset)
        window->second = offset + p.duration;  // extend contiguous green
    }
    offset += p.duration;
  }
  return window;
}

TlsProgram make_tls_program(const net::RoadNetwork& network, TlsMode mode,
                            double phaseDuration) {
  if (phaseDuration <= 0.0) throw ConfigError("phase duration must be > 0");
  const int n = network.laneCount();
  TlsProgram prog;
  const int phaseCount = mode == TlsMode::Simplified ? 4 : 2;
  for (int p = 0; p < phaseCount; ++p) {
    TlsPhase phase;
    phase.duration = phaseDuration;
    phase.green.assign(static_cast<size_t>(n), 0);
    for (const auto& lane : network.lanes) {
      if (!lane.signalized) continue;
      const int d = static_cast<int>(lane.travelDir);
      const bool green = mode == TlsMode::Simplified ? (d == p) : (d % 2 == p);
      if (green) phase.green[static_cast<size_t>(lane.id)] = 1;
    }
    prog.phases.push_back(std::move(phase));
  }
  return prog;
}

std::vector<Link> build_links(const net::RoadNetwork& network) {
  std::vector<Link> links;
  std::map<std::tuple<int, int, int, int>, size_t> index;
  for (const auto& lane : network.lanes) {
    auto key = std::make_tuple(lane.from.row, lane.from.col, lane.to.row, lane.to.col);
    auto it = index.find(key);
    if (it == index.end()) {
      index[key] = links.size();
      links.push_back({lane.from, lane.to, {}});
      it = index.find(key);
    }
    links[it->second].laneIds.push_back(lane.id);
  }
  for (auto& l : links) {
    std::sort(l.laneIds.begin(), l.laneIds.end(), [&](int a, int b) {
      return network.lane(a).laneIndex < network.lane(b).laneIndex;
    });
  }
  return links;
}

namespace {

/// BFS over the lane graph from a concrete entry lane to any lane of the
/// target link. Returns the lane path or empty when unreachable.
std::vector<int> lane_path_bfs(const net::RoadNetwork& network, int startLane,
                               const Link& exitLink) {
  std::vector<int> prev(static_cast<size_t>(network.laneCount()), -1);
  std::vector<char> seen(static_cast<size_t>(network.laneCount()), 0);
  std::queue<int> frontier;
  frontier.push(startLane);
  seen[static_cast<size_t>(startLane)] = 1;
  int found = -1;
  auto isExit = [&](int lane) {
    return std::find(exitLink.laneIds.begin(), exitLink.laneIds.end(), lane) !=
           exitLink.laneIds.end();
  };
  if (isExit(startLane)) found = startLane;
  while (!frontier.empty() && found < 0) {
    int cur = frontier.front();
    frontier.pop();
    for (const auto& c : network.connections_from(cur)) {
      if (seen[static_cast<size_t>(c.toLane)]) continue;
      seen[static_cast<size_t>(c.toLane)] = 1;
      prev[static_cast<size_t>(c.toLane)] = cur;
      if (isExit(c.toLane)) {
        found = c.toLane;
        break;
      }
      frontier.push(c.toLane);
    }
  }
  if (found < 0) return {};
  std::vector<int> path;
  for (int v = found; v != -1; v = prev[static_cast<size_t>(v)]) path.push_back(v);
  std::reverse(path.begin(), path.end());
  return path;
}

/// BFS over the link graph (no U-turns).
std::vector<int> link_path_bfs(const std::vector<Link>& links, int startLink,
                               int exitLink) {
  const int n = static_cast<int>(links.size());
  std::vector<int> prev(static_cast<size_t>(n), -1);
  std::vector<char> seen(static_cast<size_t>(n), 0);
  std::queue<int> frontier;
  frontier.push(startLink);
  seen[static_cast<size_t>(startLink)] = 1;
  while (!frontier.empty()) {
    int cur = frontier.front();
    frontier.pop();
    if (cur == exitLink) break;
    for (int j = 0; j < n; ++j) {
      if (j == cur || seen[static_cast<size_t>(j)]) continue;
      const auto& a = links[static_cast<size_t>(cur)];
      const auto& b = links[static_cast<size_t>(j)];
      if (!(a.to == b.from) || b.to == a.from) continue;
      seen[static_cast<size_t>(j)] = 1;
      prev[static_cast<size_t>(j)] = cur;
      frontier.push(j);
    }
  }
  if (!seen[static_cast<size_t>(exitLink)]) return {};
  std::vector<int> path;
  for (int v = exitLink; v != -1; v = prev[static_cast<size_t>(v)]) path.push_back(v);
  std::reverse(path.begin(), path.end());
  return path;
}

}  // namespace

TripTable generate_trips(const net::RoadNetwork& network, double arrivalRate,
                         double duration, std::uint64_t seed,
                         bool laneFeasiblePaths) {
  TripTable table;
  if (!(arrivalRate > 0.0)) return table;
  const auto links = build_links(network);
  std::vector<int> entryLinks, exitLinks;
  for (int i = 0; i < static_cast<int>(links.size()); ++i) {
    const auto& lane0 = network.lane(links[static_cast<size_t>(i)].laneIds[0]);
    if (lane0.fringeEntry) entryLinks.push_back(i);
    if (lane0.fringeExit) exitLinks.push_back(i);
  }
  if (entryLinks.empty() || exitLinks.empty()) return table;

  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> interArrival(arrivalRate);
  std::uniform_int_distribution<size_t> entryDist(0, entryLinks.size() - 1);
  std::uniform_int_distribution<size_t> exitDist(0, exitLinks.size() - 1);
  std::uniform_int_distribution<int> laneDist(0, network.lanesPerDirection - 1);

  double t = 0.0;
  while (true) {
    t += interArrival(rng);
    if (t >= duration) break;
    const int entry = entryLinks[entryDist(rng)];
    const int exit = exitLinks[exitDist(rng)];
    const int laneIndex = laneDist(rng);
    Trip trip;
    trip.departTime = t;
    trip.entryLaneIndex = laneIndex;
    if (laneFeasiblePaths) {
      int startLane =
          links[static_cast<size_t>(entry)].laneIds[static_cast<size_t>(laneIndex)];
      auto path = lane_path_bfs(network, startLane, links[static_cast<size_t>(exit)]);
      // Some lane assignments cannot reach every exit; fall back lane by lane.
      for (int k = 0; path.empty() && k < network.lanesPerDirection; ++k) {
        startLane = links[static_cast<size_t>(entry)].laneIds[static_cast<size_t>(k)];
        path = lane_path_bfs(network, startLane, links[static_cast<size_t>(exit)]);
      }
      if (path.empty()) continue;
      trip.lanePath = std::move(path);
    } else {
      auto path = link_path_bfs(links, entry, exit);
      if (path.empty()) continue;
      trip.linkPath = std::move(path);
    }
    table.trips.push_back(std::move(trip));
  }
  return table;
}

// ---------------------------------------------------------------------------

struct Simulation::Impl {
  net::RoadNetwork network;
  SimConfig cfg;
  TripTable trips;
  TlsProgram tls;
  std::vector<Link> links;
  std::vector<int> laneToLink;

  struct DetectorAccum {
    double pos = 0.0;
    double lastClear = 0.0;
    std::vector<double> coverage;  // per second
    std::vector<std::vector<metrics::DetectorEvent>> events;
  };

  struct LaneState {
    std::vector<int> order;  // vehicle ids, front (largest pos) first
    DetectorAccum stop, adv;
    std::vector<int> startedHalts;  // per second
    std::vector<double> maxJam;     // per second
    std::vector<int> nVehSeen;      // per second (end-of-second snapshot)
    std::vector<int> opposingThroughLanes;
    int multiHaltVehicles = 0;
  };

  struct Veh {
    int id = -1;
    int lane = -1;
    double pos = 0.0;  // front, m from lane start
    double speed = 0.0;
    size_t hop = 0;  // index into lanePath / linkPath
    const Trip* trip = nullptr;
    int haltsOnLane = 0;
    long long lastStep = -1;
    bool halted = false;
    bool alive = false;
  };

  std::vector<LaneState> lanes;
  std::vector<Veh> vehicles;
  std::map<std::pair<int, int>, net::Turn> connTurn;
  std::deque<size_t> upcoming;                    // trip indices by depart time
  std::vector<std::deque<size_t>> pendingByLane;  // spawns waiting for space
  long long stepIdx = 0;
  int stepsPerSecond = 2;
  int seconds = 0;
  int entered = 0, exited = 0;

  double now() const { return static_cast<double>(stepIdx) * cfg.dt; }

  Impl(const net::RoadNetwork& netIn, SimConfig cfgIn, TripTable tripsIn)
      : network(netIn), cfg(std::move(cfgIn)), trips(std::move(tripsIn)) {
    if (cfg.duration <= 0.0) throw ConfigError("duration must be > 0");
    const double spsExact = 1.0 / cfg.dt;
    stepsPerSecond = static_cast<int>(std::llround(spsExact));
    if (std::abs(spsExact - stepsPerSecond) > 1e-9 || stepsPerSecond < 1)
      throw ConfigError("dt must divide 1 second");
    tls = cfg.customTls ? *cfg.customTls
                        : make_tls_program(network, cfg.tlsMode, cfg.phaseDuration);
    links = build_links(network);
    laneToLink.assign(static_cast<size_t>(network.laneCount()), -1);
    for (int li = 0; li < static_cast<int>(links.size()); ++li)
      for (int lane : links[static_cast<size_t>(li)].laneIds)
        laneToLink[static_cast<size_t>(lane)] = li;
    for (const auto& c : network.connections) connTurn[{c.fromLane, c.toLane}] = c.turn;

    seconds = static_cast<int>(std::llround(cfg.duration));
    lanes.resize(static_cast<size_t>(network.laneCount()));
    for (int i = 0; i < network.laneCount(); ++i) {
      auto& ls = lanes[static_cast<size_t>(i)];
      const auto& lane = network.lane(i);
      ls.stop.pos = lane.stopDetectorPos;
      ls.adv.pos = lane.advancedDetectorPos;
      for (DetectorAccum* d : {&ls.stop, &ls.adv}) {
        d->coverage.assign(static_cast<size_t>(seconds), 0.0);
        d->events.resize(static_cast<size_t>(seconds));
      }
      ls.startedHalts.assign(static_cast<size_t>(seconds), 0);
      ls.maxJam.assign(static_cast<size_t>(seconds), 0.0);
      ls.nVehSeen.assign(static_cast<size_t>(seconds), 0);
      if (lane.signalized) {
        for (const auto& other : network.lanes) {
          if (other.to == lane.to && other.travelDir == opposite(lane.travelDir) &&
              std::find(other.movements.begin(), other.movements.end(),
                        net::Turn::Straight) != other.movements.end())
            ls.opposingThroughLanes.push_back(other.id);
        }
      }
    }

    std::vector<size_t> idx(trips.trips.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) {
      return trips.trips[a].departTime < trips.trips[b].departTime;
    });
    upcoming.assign(idx.begin(), idx.end());
    pendingByLane.resize(static_cast<size_t>(network.laneCount()));
  }

  int trip_start_lane(const Trip& trip) const {
    if (!trip.lanePath.empty()) return trip.lanePath.front();
    const auto& link = links[static_cast<size_t>(trip.linkPath.front())];
    return link.laneIds[static_cast<size_t>(
        std::min(trip.entryLaneIndex, static_cast<int>(link.laneIds.size()) - 1))];
  }

  /// Turn the vehicle must take at the end of its current lane, if any.
  std::optional<net::Turn> required_turn(const Veh& v) const {
    const Trip& trip = *v.trip;
    if (!trip.lanePath.empty()) {
      if (v.hop + 1 >= trip.lanePath.size()) return std::nullopt;
      auto it = connTurn.find({v.lane, trip.lanePath[v.hop + 1]});
      return it == connTurn.end() ? std::nullopt : std::optional(it->second);
    }
    if (v.hop + 1 >= trip.linkPath.size()) return std::nullopt;
    const auto& cur = links[static_cast<size_t>(trip.linkPath[v.hop])];
    const auto& nxt = links[static_cast<size_t>(trip.linkPath[v.hop + 1])];
    const auto curDir = network.lane(cur.laneIds[0]).travelDir;
    const auto nxtDir = network.lane(nxt.laneIds[0]).travelDir;
    return turn_between(curDir, nxtDir);
  }

  /// Target lane on the next hop. Falls back to the turn's geometric target
  /// when the vehicle is stuck on a lane that does not permit the movement.
  int next_lane(const Veh& v, net::Turn turn) const {
    const Trip& trip = *v.trip;
    if (!trip.lanePath.empty()) return trip.lanePath[v.hop + 1];
    const auto& nxt = links[static_cast<size_t>(trip.linkPath[v.hop + 1])];
    if (auto c = network.connection_for(v.lane, turn))
      for (int cand : nxt.laneIds)
        if (cand == c->toLane) return cand;
    int idx = network.lane(v.lane).laneIndex;
    if (turn == net::Turn::Right) idx = 0;
    if (turn == net::Turn::Left) idx = static_cast<int>(nxt.laneIds.size()) - 1;
    idx = std::min(idx, static_cast<int>(nxt.laneIds.size()) - 1);
    return nxt.laneIds[static_cast<size_t>(idx)];
  }

  bool left_turn_blocked(const Veh& v) const {
    const auto& ls = lanes[static_cast<size_t>(v.lane)];
    const double t = now();
    for (int ol : ls.opposingThroughLanes) {
      if (!tls.greenAt(ol, t)) continue;
      const auto& olane = network.lane(ol);
      for (int vid : lanes[static_cast<size_t>(ol)].order) {
        const Veh& o = vehicles[static_cast<size_t>(vid)];
        if (o.speed <= cfg.haltThreshold) continue;
        auto oturn = required_turn(o);
        if (!oturn || *oturn != net::Turn::Straight) continue;
        const double eta = (olane.length - o.pos) / std::max(o.speed, 0.1);
        if (eta <= cfg.yieldHorizon) return true;
      }
    }
    return false;
  }

  void add_coverage(DetectorAccum& det, double t0, double t1) {
    t0 = std::max(t0, 0.0);
    t1 = std::min(t1, static_cast<double>(seconds));
    while (t0 < t1 - 1e-12) {
      const int s = static_cast<int>(t0);
      const double end = std::min(t1, static_cast<double>(s + 1));
      det.coverage[static_cast<size_t>(s)] += end - t0;
      t0 = end;
    }
  }

  void record_crossing(DetectorAccum& det, double tc, double speed) {
    if (tc < 0.0 || tc >= static_cast<double>(seconds)) return;
    metrics::DetectorEvent e;
    e.time = tc;
    e.speed = speed;
    e.occupancyTime = cfg.effectiveLength / speed;
    e.timeGap = std::max(tc - det.lastClear, 0.0);
    det.lastClear = tc + e.occupancyTime;
    det.events[static_cast<size_t>(static_cast<int>(tc))].push_back(e);
  }

  /// Coverage and crossing bookkeeping for one vehicle step on one lane. The
  /// virtual front trajectory oldPos -> virtualEnd may run past the lane end;
  /// residual body coverage past the end is attributed to this lane too.
  void detector_pass(LaneState& ls, double laneLength, double oldPos,
                     double virtualEnd, double v) {
    const double t = now();
    const double Le = cfg.effectiveLength;
    for (DetectorAccum* d : {&ls.stop, &ls.adv}) {
      if (v <= 0.0) {
        if (oldPos >= d->pos && oldPos - Le <= d->pos) add_coverage(*d, t, t + cfg.dt);
        continue;
      }
      if (oldPos <= d->pos && d->pos < virtualEnd)
        record_crossing(*d, t + (d->pos - oldPos) / v, v);
      const double tau0 = (d->pos - oldPos) / v;
      const double tau1 = (d->pos + Le - oldPos) / v;
      const double a = std::max(tau0, 0.0);
      const double b = std::min(tau1, cfg.dt);
      if (b > a) add_coverage(*d, t + a, t + b);
      if (virtualEnd > laneLength && tau1 > cfg.dt && tau0 < cfg.dt)
        add_coverage(*d, t + cfg.dt, t + tau1);
    }
  }

  void try_spawns() {
    const double t = now();
    while (!upcoming.empty() && trips.trips[upcoming.front()].departTime <= t) {
      const size_t ti = upcoming.front();
      upcoming.pop_front();
      pendingByLane[static_cast<size_t>(trip_start_lane(trips.trips[ti]))].push_back(ti);
    }
    for (size_t lid = 0; lid < pendingByLane.size(); ++lid) {
      auto& pend = pendingByLane[lid];
      while (!pend.empty()) {
        auto& ls = lanes[lid];
        const double spawnPos = cfg.effectiveLength;
        double gap = network.lane(static_cast<int>(lid)).length - spawnPos;
        if (!ls.order.empty()) {
          const Veh& rear = vehicles[static_cast<size_t>(ls.order.back())];
          gap = rear.pos - cfg.effectiveLength - spawnPos;
        }
        if (gap < cfg.startupGap) break;
        const Trip& trip = trips.trips[pend.front()];
        pend.pop_front();
        Veh v;
        v.id = static_cast<int>(vehicles.size());
        v.lane = static_cast<int>(lid);
        v.pos = spawnPos;
        v.speed = std::min(cfg.freeSpeed, std::sqrt(2.0 * cfg.decel * gap));
        v.trip = &trip;
        v.alive = true;
        vehicles.push_back(v);
        ls.order.push_back(v.id);
        ++entered;
      }
    }
  }

  void try_lane_changes() {
    if (!cfg.laneChanging) return;
    for (auto& v : vehicles) {
      if (!v.alive || !v.trip->lanePath.empty()) continue;
      const auto& lane = network.lane(v.lane);
      if (!lane.signalized) continue;
      if (v.pos <= lane.advancedDetectorPos) continue;  // only past the detector
      auto turn = required_turn(v);
      if (!turn) continue;
      if (std::find(lane.movements.begin(), lane.movements.end(), *turn) !=
          lane.movements.end())
        continue;
      const auto& link =
          links[static_cast<size_t>(laneToLink[static_cast<size_t>(v.lane)])];
      int target = -1;
      for (int cand : link.laneIds) {
        const auto& cl = network.lane(cand);
        if (std::find(cl.movements.begin(), cl.movements.end(), *turn) !=
            cl.movements.end()) {
          target = cand;
          break;
        }
      }
      if (target < 0) continue;
      const int step = network.lane(target).laneIndex > lane.laneIndex ? 1 : -1;
      int adjacent = -1;
      for (int cand : link.laneIds)
        if (network.lane(cand).laneIndex == lane.laneIndex + step) adjacent = cand;
      if (adjacent < 0) continue;
      auto& dst = lanes[static_cast<size_t>(adjacent)];
      bool ok = true;
      for (int vid : dst.order) {
        const Veh& o = vehicles[static_cast<size_t>(vid)];
        if (o.pos >= v.pos) {
          if (o.pos - cfg.effectiveLength - v.pos < std::max(1.0, v.speed * cfg.dt))
            ok = false;
        } else {
          if (v.pos - cfg.effectiveLength - o.pos < std::max(1.0, o.speed * cfg.dt))
            ok = false;
        }
      }
      if (!ok) continue;
      auto& src = lanes[static_cast<size_t>(v.lane)].order;
      src.erase(std::remove(src.begin(), src.end(), v.id), src.end());
      v.lane = adjacent;
      dst.order.push_back(v.id);
      std::sort(dst.order.begin(), dst.order.end(), [&](int a, int b) {
        return vehicles[static_cast<size_t>(a)].pos >
               vehicles[static_cast<size_t>(b)].pos;
      });
    }
  }

  void step() {
    try_spawns();
    try_lane_changes();
    const double t = now();
    const int sec = std::min(static_cast<int>(stepIdx / stepsPerSecond), seconds - 1);

    struct Snapshot {
      double pos, speed;
    };
    std::vector<Snapshot> snap(vehicles.size());
    for (size_t i = 0; i < vehicles.size(); ++i)
      snap[i] = {vehicles[i].pos, vehicles[i].speed};

    std::vector<double> newSpeed(vehicles.size(), 0.0);
    for (size_t lid = 0; lid < lanes.size(); ++lid) {
      const auto& lane = network.lane(static_cast<int>(lid));
      const auto& order = lanes[lid].order;
      const bool green = !lane.signalized || tls.greenAt(static_cast<int>(lid), t);
      for (size_t k = 0; k < order.size(); ++k) {
        const Veh& v = vehicles[static_cast<size_t>(order[k])];
        double gap;
        if (k > 0) {
          gap = snap[static_cast<size_t>(order[k - 1])].pos - cfg.effectiveLength -
                v.pos;
        } else if (lane.fringeExit) {
          gap = 1e9;  // open end
        } else {
          bool mayCross = green;
          if (mayCross && cfg.tlsMode == TlsMode::Realistic) {
            auto turn = required_turn(v);
            if (turn && *turn == net::Turn::Left && left_turn_blocked(v))
              mayCross = false;
          }
          const double ahead = lane.length - v.pos;
          if (!mayCross) {
            gap = ahead;
          } else {
            auto turn = required_turn(v);
            if (!turn) {
              gap = ahead;  // route ends at a signalized lane; hold at the bar
            } else {
              const int nl = next_lane(v, *turn);
              const auto& norder = lanes[static_cast<size_t>(nl)].order;
              if (norder.empty())
                gap = ahead + network.lane(nl).length;
              else
                gap = ahead + snap[static_cast<size_t>(norder.back())].pos -
                      cfg.effectiveLength;
            }
          }
        }
        gap = std::max(gap, 0.0);
        double vn = std::min({v.speed + cfg.accel * cfg.dt, cfg.freeSpeed,
                              gap / cfg.dt, std::sqrt(2.0 * cfg.decel * gap)});
        if (v.speed < cfg.haltThreshold && gap < cfg.startupGap) vn = 0.0;
        newSpeed[static_cast<size_t>(v.id)] = std::max(vn, 0.0);
      }
    }

    // Motion, detector bookkeeping and lane transfers. Lanes in id order,
    // vehicles front to back so downstream space opens before followers move.
    for (size_t lid = 0; lid < lanes.size(); ++lid) {
      auto& ls = lanes[lid];
      const auto& lane = network.lane(static_cast<int>(lid));
      const auto order = ls.order;  // copy: transfers mutate the live lists
      for (int vid : order) {
        Veh& v = vehicles[static_cast<size_t>(vid)];
        if (!v.alive || v.lane != static_cast<int>(lid) || v.lastStep == stepIdx)
          continue;
        v.lastStep = stepIdx;
        const double vs = newSpeed[static_cast<size_t>(vid)];
        const double oldPos = v.pos;
        const double virtualEnd = oldPos + vs * cfg.dt;
        detector_pass(ls, lane.length, oldPos, virtualEnd, vs);

        const bool wasHalted = v.halted;
        v.speed = vs;
        v.halted = vs < cfg.haltThreshold;
        if (v.halted && !wasHalted) {
          ls.startedHalts[static_cast<size_t>(sec)]++;
          if (++v.haltsOnLane == 2) ls.multiHaltVehicles++;
        }

        if (virtualEnd <= lane.length) {
          v.pos = virtualEnd;
          continue;
        }
        // Crossing the downstream end of the lane.
        auto& myOrder = ls.order;
        myOrder.erase(std::remove(myOrder.begin(), myOrder.end(), vid), myOrder.end());
        if (lane.fringeExit) {
          v.alive = false;
          ++exited;
          continue;
        }
        auto turn = required_turn(v);
        if (!turn) {  // malformed route; drop the vehicle at the boundary
          v.alive = false;
          ++exited;
          continue;
        }
        const int nl = next_lane(v, *turn);
        auto& dst = lanes[static_cast<size_t>(nl)];
        const double entryPos = virtualEnd - lane.length;
        bool blocked = false;
        if (!dst.order.empty()) {
          const Veh& rear = vehicles[static_cast<size_t>(dst.order.back())];
          blocked = entryPos > rear.pos - cfg.effectiveLength;
        }
        if (blocked) {
          // Simultaneous merge lost the race; wait at the bar instead.
          v.pos = lane.length;
          v.speed = 0.0;
          myOrder.push_back(vid);
          std::sort(myOrder.begin(), myOrder.end(), [&](int a, int b) {
            return vehicles[static_cast<size_t>(a)].pos >
                   vehicles[static_cast<size_t>(b)].pos;
          });
          continue;
        }
        v.lane = nl;
        v.pos = entryPos;
        v.hop++;
        v.haltsOnLane = 0;
        dst.order.push_back(vid);
        std::sort(dst.order.begin(), dst.order.end(), [&](int a, int b) {
          return vehicles[static_cast<size_t>(a)].pos >
                 vehicles[static_cast<size_t>(b)].pos;
        });
      }
    }

    // Jam length per step; the per-second value is the max over steps.
    for (size_t lid = 0; lid < lanes.size(); ++lid) {
      auto& ls = lanes[lid];
      const auto& lane = network.lane(static_cast<int>(lid));
      double jam = 0.0;
      double prevPos = lane.length + cfg.effectiveLength;
      for (int vid : ls.order) {
        const Veh& v = vehicles[static_cast<size_t>(vid)];
        if (!v.halted || prevPos - v.pos > cfg.effectiveLength + 1.0) break;
        jam = lane.length - v.pos + cfg.effectiveLength;
        prevPos = v.pos;
      }
      ls.maxJam[static_cast<size_t>(sec)] =
          std::max(ls.maxJam[static_cast<size_t>(sec)], jam);
    }

    ++stepIdx;

    if (stepIdx % stepsPerSecond == 0) {
      const int doneSec = static_cast<int>(stepIdx / stepsPerSecond) - 1;
      if (doneSec >= 0 && doneSec < seconds)
        for (size_t lid = 0; lid < lanes.size(); ++lid)
          lanes[lid].nVehSeen[static_cast<size_t>(doneSec)] =
              static_cast<int>(lanes[lid].order.size());
    }
  }

  SimulationOutput finish() {
    SimulationOutput out;
    const int n = network.laneCount();
    out.e1Stop.resize(static_cast<size_t>(n));
    out.e1Adv.resize(static_cast<size_t>(n));
    out.e2.resize(static_cast<size_t>(n));
    out.tlsGreen.resize(static_cast<size_t>(n));
    out.cycles.resize(static_cast<size_t>(n));
    out.multiHaltVehicles.resize(static_cast<size_t>(n), 0);
    for (int lid = 0; lid < n; ++lid) {
      auto& ls = lanes[static_cast<size_t>(lid)];
      auto makeE1 = [&](DetectorAccum& d) {
        std::vector<E1Record> recs(static_cast<size_t>(seconds));
        for (int s = 0; s < seconds; ++s) {
          auto& r = recs[static_cast<size_t>(s)];
          r.time = s;
          r.events = std::move(d.events[static_cast<size_t>(s)]);
          r.vehicleCount = static_cast<int>(r.events.size());
          r.occupancyFraction =
              std::clamp(d.coverage[static_cast<size_t>(s)], 0.0, 1.0);
          double speedSum = 0.0;
          for (const auto& e : r.events) speedSum += e.speed;
          r.meanSpeed =
              r.events.empty() ? 0.0 : speedSum / static_cast<double>(r.events.size());
        }
        return recs;
      };
      out.e1Stop[static_cast<size_t>(lid)] = makeE1(ls.stop);
      out.e1Adv[static_cast<size_t>(lid)] = makeE1(ls.adv);
      auto& e2 = out.e2[static_cast<size_t>(lid)];
      e2.resize(static_cast<size_t>(seconds));
      for (int s = 0; s < seconds; ++s) {
        e2[static_cast<size_t>(s)] = {static_cast<double>(s),
                                      ls.startedHalts[static_cast<size_t>(s)],
                                      ls.maxJam[static_cast<size_t>(s)],
                                      ls.nVehSeen[static_cast<size_t>(s)]};
      }
      auto& g = out.tlsGreen[static_cast<size_t>(lid)];
      g.resize(static_cast<size_t>(seconds));
      for (int s = 0; s < seconds; ++s)
        g[static_cast<size_t>(s)] =
            network.lane(lid).signalized ? tls.greenAt(lid, s) : 1;
      out.multiHaltVehicles[static_cast<size_t>(lid)] = ls.multiHaltVehicles;

      if (network.lane(lid).signalized) {
        if (auto w = tls.greenWindow(lid)) {
          const double cycle = tls.cycleLength();
          for (int c = 0;; ++c) {
            LaneCycle lc;
            lc.index = c;
            lc.greenStart = c * cycle + w->first;
            lc.redStart = c * cycle + w->second;
            lc.nextGreenStart = (c + 1) * cycle + w->first;
            if (lc.nextGreenStart > cfg.duration + 1e-9) break;
            out.cycles[static_cast<size_t>(lid)].push_back(lc);
          }
        }
      }
    }
    out.seed = cfg.seed;
    out.arrivalRate = cfg.arrivalRate;
    out.duration = cfg.duration;
    out.detectorDistance = network.detectorDistance;
    out.tlsMode = tls_mode_name(cfg.tlsMode);
    out.networkHash = network.hash();
    out.entered = entered;
    out.exited = exited;
    out.remaining = entered - exited;
    return out;
  }
};

Simulation::Simulation(const net::RoadNetwork& network, SimConfig cfg, TripTable trips)
    : impl_(std::make_unique<Impl>(network, std::move(cfg), std::move(trips))) {}
Simulation::~Simulation() = default;
Simulation::Simulation(Simulation&&) noexcept = default;
Simulation& Simulation::operator=(Simulation&&) noexcept = default;

void Simulation::step() { impl_->step(); }
double Simulation::time() const { return impl_->now(); }
int Simulation::entered() const { return impl_->entered; }
int Simulation::exited() const { return impl_->exited; }

std::vector<Simulation::VehicleView> Simulation::vehicles() const {
  std::vector<VehicleView> out;
  for (const auto& v : impl_->vehicles)
    if (v.alive) out.push_back({v.id, v.lane, v.pos, v.speed, v.haltsOnLane});
  return out;
}

SimulationOutput Simulation::run() {
  const auto steps =
      static_cast<long long>(std::llround(impl_->cfg.duration / impl_->cfg.dt));
  for (long long i = 0; i < steps; ++i) impl_->step();
  return impl_->finish();
}

SimulationOutput run_simulation(const net::RoadNetwork& network, const SimConfig& cfg) {
  TripTable trips =
      generate_trips(network, cfg.arrivalRate, cfg.duration, cfg.seed, !cfg.laneChanging);
  return run_simulation(network, cfg, trips);
}

SimulationOutput run_simulation(const net::RoadNetwork& network, const SimConfig& cfg,
                                const TripTable& trips) {
  Simulation sim(network, cfg, trips);
  return sim.run();
}

}  // namespace qest::sim
