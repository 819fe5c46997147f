#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "qest/micro_sim.hpp"

namespace qest::sim {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw ConfigError("cannot write " + p.string());
  f.precision(10);
  return f;
}

std::ifstream open_in(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw ConfigError("cannot read " + p.string());
  return f;
}

std::vector<double> split_row(const std::string& line) {
  std::vector<double> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(std::stod(cell));
  return out;
}

}  // namespace

void save_run(const SimulationOutput& out, const net::RoadNetwork& network,
              const std::string& dir) {
  fs::create_directories(dir);
  const fs::path base(dir);

  json manifest;
  manifest["schema"] = "qest-run-v1";
  manifest["seed"] = out.seed;
  manifest["arrivalRate"] = out.arrivalRate;
  manifest["tlsMode"] = out.tlsMode;
  manifest["duration"] = out.duration;
  manifest["networkHash"] = out.networkHash;
  manifest["detectorDistance"] = out.detectorDistance;
  manifest["network"] = json::parse(net::network_to_json(network));
  manifest["laneCount"] = out.laneCount();
  manifest["entered"] = out.entered;
  manifest["exited"] = out.exited;
  manifest["remaining"] = out.remaining;
  manifest["multiHaltVehicles"] = out.multiHaltVehicles;
  json laneNames = json::array();
  for (int i = 0; i < network.laneCount(); ++i) laneNames.push_back(network.lane_name(i));
  manifest["laneNames"] = laneNames;
  open_out(base / "manifest.json") << manifest.dump(2) << "\n";

  auto writeE1 = [&](const std::vector<std::vector<E1Record>>& streams,
                     const std::string& name) {
    auto agg = open_out(base / (name + ".csv"));
    agg << "time,lane,vehicleCount,occupancyFraction,meanSpeed\n";
    auto ev = open_out(base / (name + "_events.csv"));
    ev << "time,lane,occupancyTime,timeGap,speed\n";
    for (size_t lane = 0; lane < streams.size(); ++lane) {
      for (const auto& r : streams[lane]) {
        agg << r.time << "," << lane << "," << r.vehicleCount << ","
            << r.occupancyFraction << "," << r.meanSpeed << "\n";
        for (const auto& e : r.events)
          ev << e.time << "," << lane << "," << e.occupancyTime << "," << e.timeGap
             << "," << e.speed << "\n";
      }
    }
  };
  writeE1(out.e1Stop, "e1_stop");
  writeE1(out.e1Adv, "e1_adv");

  auto e2 = open_out(base / "e2.csv");
  e2 << "time,lane,startedHalts,maxJamLengthMeters,nVehSeen\n";
  for (size_t lane = 0; lane < out.e2.size(); ++lane)
    for (const auto& r : out.e2[lane])
      e2 << r.time << "," << lane << "," << r.startedHalts << ","
         << r.maxJamLengthMeters << "," << r.nVehSeen << "\n";

  auto tls = open_out(base / "tls.csv");
  tls << "time,lane,green\n";
  for (size_t lane = 0; lane < out.tlsGreen.size(); ++lane)
    for (size_t s = 0; s < out.tlsGreen[lane].size(); ++s)
      tls << s << "," << lane << "," << static_cast<int>(out.tlsGreen[lane][s]) << "\n";

  auto cyc = open_out(base / "cycles.csv");
  cyc << "lane,cycle,greenStart,redStart,nextGreenStart\n";
  for (size_t lane = 0; lane < out.cycles.size(); ++lane)
    for (const auto& c : out.cycles[lane])
      cyc << lane << "," << c.index << "," << c.greenStart << "," << c.redStart << ","
          << c.nextGreenStart << "\n";
}

SimulationOutput load_run(const std::string& dir) {
  const fs::path base(dir);
  json manifest;
  open_in(base / "manifest.json") >> manifest;
  if (manifest.value("schema", "") != "qest-run-v1")
    throw ConfigError("unknown run schema in " + dir);

  SimulationOutput out;
  out.seed = manifest.at("seed");
  out.arrivalRate = manifest.at("arrivalRate");
  out.tlsMode = manifest.at("tlsMode");
  out.duration = manifest.at("duration");
  out.detectorDistance = manifest.value("detectorDistance", 0.0);
  out.networkHash = manifest.at("networkHash");
  out.entered = manifest.value("entered", 0);
  out.exited = manifest.value("exited", 0);
  out.remaining = manifest.value("remaining", 0);
  out.multiHaltVehicles = manifest.at("multiHaltVehicles").get<std::vector<int>>();
  const int lanes = manifest.at("laneCount");
  const int seconds = static_cast<int>(out.duration);

  auto sized = [&](auto& vec) {
    vec.resize(static_cast<size_t>(lanes));
    for (auto& s : vec) s.resize(static_cast<size_t>(seconds));
  };
  sized(out.e1Stop);
  sized(out.e1Adv);
  sized(out.e2);
  sized(out.tlsGreen);
  out.cycles.resize(static_cast<size_t>(lanes));

  auto readE1 = [&](std::vector<std::vector<E1Record>>& streams,
                    const std::string& name) {
    auto agg = open_in(base / (name + ".csv"));
    std::string line;
    std::getline(agg, line);
    while (std::getline(agg, line)) {
      const auto row = split_row(line);
      auto& r = streams[static_cast<size_t>(row[1])][static_cast<size_t>(row[0])];
      r.time = row[0];
      r.vehicleCount = static_cast<int>(row[2]);
      r.occupancyFraction = row[3];
      r.meanSpeed = row[4];
    }
    auto ev = open_in(base / (name + "_events.csv"));
    std::getline(ev, line);
    while (std::getline(ev, line)) {
      const auto row = split_row(line);
      const int sec = static_cast<int>(row[0]);
      if (sec < 0 || sec >= seconds) continue;
      metrics::DetectorEvent e;
      e.time = row[0];
      e.occupancyTime = row[2];
      e.timeGap = row[3];
      e.speed = row[4];
      streams[static_cast<size_t>(row[1])][static_cast<size_t>(sec)].events.push_back(e);
    }
  };
  readE1(out.e1Stop, "e1_stop");
  readE1(out.e1Adv, "e1_adv");

  std::string line;
  auto e2 = open_in(base / "e2.csv");
  std::getline(e2, line);
  while (std::getline(e2, line)) {
    const auto row = split_row(line);
    auto& r = out.e2[static_cast<size_t>(row[1])][static_cast<size_t>(row[0])];
    r.time = row[0];
    r.startedHalts = static_cast<int>(row[2]);
    r.maxJamLengthMeters = row[3];
    r.nVehSeen = static_cast<int>(row[4]);
  }

  auto tls = open_in(base / "tls.csv");
  std::getline(tls, line);
  while (std::getline(tls, line)) {
    const auto row = split_row(line);
    out.tlsGreen[static_cast<size_t>(row[1])][static_cast<size_t>(row[0])] =
        static_cast<std::uint8_t>(row[2]);
  }

  auto cyc = open_in(base / "cycles.csv");
  std::getline(cyc, line);
  while (std::getline(cyc, line)) {
    const auto row = split_row(line);
    LaneCycle c;
    c.index = static_cast<int>(row[1]);
    c.greenStart = row[2];
    c.redStart = row[3];
    c.nextGreenStart = row[4];
    out.cycles[static_cast<size_t>(row[0])].push_back(c);
  }
  return out;
}

net::RoadNetwork load_run_network(const std::string& dir) {
  json manifest;
  open_in(fs::path(dir) / "manifest.json") >> manifest;
  if (!manifest.contains("network"))
    throw ConfigError("run manifest has no embedded network: " + dir);
  return net::network_from_json(manifest.at("network").dump());
}

}  // namespace qest::sim
