#include "qest/net_graph.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace qest::net {

namespace {

using nlohmann::json;

struct DirVec {
  int dr, dc;
};

DirVec dir_vec(Dir d) {
  switch (d) {
    case Dir::North: return {-1, 0};
    case Dir::East: return {0, 1};
    case Dir::South: return {1, 0};
    case Dir::West: return {0, -1};
  }
  return {0, 0};
}

Dir vec_dir(int dr, int dc) {
  if (dr < 0) return Dir::North;
  if (dr > 0) return Dir::South;
  if (dc > 0) return Dir::East;
  return Dir::West;
}

std::vector<Turn> movements_for(int laneIndex, int lanesPerDirection) {
  if (lanesPerDirection == 1)
    return {Turn::Left, Turn::Straight, Turn::Right};
  if (lanesPerDirection == 2) {
    if (laneIndex == 0) return {Turn::Straight, Turn::Right};
    return {Turn::Left, Turn::Straight};
  }
  if (laneIndex == 0) return {Turn::Right};
  if (laneIndex == lanesPerDirection - 1) return {Turn::Left};
  return {Turn::Straight};
}

}  // namespace

Dir turn_result(Dir travel, Turn turn) {
  int d = static_cast<int>(travel);
  switch (turn) {
    case Turn::Right: return static_cast<Dir>((d + 1) % 4);
    case Turn::Left: return static_cast<Dir>((d + 3) % 4);
    case Turn::Straight: return travel;
  }
  return travel;
}

std::string dir_name(Dir d) {
  switch (d) {
    case Dir::North: return "N";
    case Dir::East: return "E";
    case Dir::South: return "S";
    case Dir::West: return "W";
  }
  return "?";
}

std::string turn_name(Turn t) {
  switch (t) {
    case Turn::Left: return "left";
    case Turn::Straight: return "straight";
    case Turn::Right: return "right";
  }
  return "?";
}

std::optional<Connection> RoadNetwork::connection_for(int laneId, Turn turn) const {
  for (const auto& c : connections)
    if (c.fromLane == laneId && c.turn == turn) return c;
  return std::nullopt;
}

std::vector<Connection> RoadNetwork::connections_from(int laneId) const {
  std::vector<Connection> out;
  for (const auto& c : connections)
    if (c.fromLane == laneId) out.push_back(c);
  return out;
}

std::string RoadNetwork::lane_name(int id) const {
  const Lane& l = lane(id);
  std::ostringstream os;
  os << "(" << l.from.row << "," << l.from.col << ")->(" << l.to.row << ","
     << l.to.col << ")#" << l.laneIndex;
  return os.str();
}

std::uint64_t RoadNetwork::hash() const {
  // FNV-1a over the canonical parameter string; stable across platforms.
  std::ostringstream os;
  os << rows << "|" << cols << "|" << laneLength << "|" << lanesPerDirection
     << "|" << detectorDistance << "|" << tlsProgramId;
  std::uint64_t h = 1469598103934665603ull;
  for (char c : os.str()) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

RoadNetwork build_grid_network(int rows, int cols, double laneLength,
                               int lanesPerDirection, double detectorDistance) {
  if (rows < 1 || cols < 1)
    throw InvalidGeometry("grid must have at least 1x1 intersections");
  if (lanesPerDirection < 1)
    throw InvalidGeometry("lanesPerDirection must be >= 1");
  if (!(laneLength > detectorDistance) || detectorDistance <= 0.0)
    throw InvalidGeometry("lane length must exceed advanced detector distance");

  RoadNetwork net;
  net.rows = rows;
  net.cols = cols;
  net.laneLength = laneLength;
  net.fringeLength = laneLength;
  net.lanesPerDirection = lanesPerDirection;
  net.detectorDistance = detectorDistance;

  auto inGrid = [&](Node n) {
    return n.row >= 0 && n.row < rows && n.col >= 0 && n.col < cols;
  };

  // Directed node pairs: interior links between adjacent intersections plus
  // fringe stubs on every outward-facing border side.
  std::vector<std::pair<Node, Node>> nodePairs;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      Node here{r, c};
      for (Dir d : {Dir::North, Dir::East, Dir::South, Dir::West}) {
        auto [dr, dc] = dir_vec(d);
        Node there{r + dr, c + dc};
        nodePairs.emplace_back(here, there);  // outgoing (interior or fringe exit)
        if (!inGrid(there)) nodePairs.emplace_back(there, here);  // fringe entry
      }
    }
  }
  // Interior pairs were added once per endpoint direction; deduplicate.
  std::sort(nodePairs.begin(), nodePairs.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first.row, a.first.col, a.second.row, a.second.col) <
           std::tie(b.first.row, b.first.col, b.second.row, b.second.col);
  });
  nodePairs.erase(std::unique(nodePairs.begin(), nodePairs.end()),
                  nodePairs.end());

  for (const auto& [from, to] : nodePairs) {
    Dir d = vec_dir(to.row - from.row, to.col - from.col);
    for (int i = 0; i < lanesPerDirection; ++i) {
      Lane l;
      l.from = from;
      l.to = to;
      l.travelDir = d;
      l.laneIndex = i;
      l.length = laneLength;
      l.signalized = inGrid(to);
      l.fringeEntry = !inGrid(from);
      l.fringeExit = !inGrid(to);
      l.movements = l.signalized ? movements_for(i, lanesPerDirection)
                                 : std::vector<Turn>{};
      l.stopDetectorPos = l.length;
      l.advancedDetectorPos = l.length - detectorDistance;
      net.lanes.push_back(std::move(l));
    }
  }

  // Deterministic ordering: destination node (row, col), approach direction,
  // lane index. Tensors, adjacency and CSV streams all share this order.
  std::sort(net.lanes.begin(), net.lanes.end(), [](const Lane& a, const Lane& b) {
    return std::tie(a.to.row, a.to.col, a.travelDir, a.laneIndex) <
           std::tie(b.to.row, b.to.col, b.travelDir, b.laneIndex);
  });
  for (int i = 0; i < net.laneCount(); ++i) net.lanes[static_cast<size_t>(i)].id = i;

  // Connections: for each signalized lane and permitted turn, the target is
  // the lane of the outgoing link in the turn direction. Right turns land on
  // the rightmost lane, left turns on the leftmost, straight keeps the index.
  std::map<std::tuple<int, int, int, int, int>, int> laneLookup;
  for (const Lane& l : net.lanes)
    laneLookup[{l.from.row, l.from.col, l.to.row, l.to.col, l.laneIndex}] = l.id;

  for (const Lane& l : net.lanes) {
    for (Turn t : l.movements) {
      Dir nd = turn_result(l.travelDir, t);
      auto [dr, dc] = dir_vec(nd);
      Node exitNode{l.to.row + dr, l.to.col + dc};
      int targetIndex = l.laneIndex;
      if (t == Turn::Right) targetIndex = 0;
      if (t == Turn::Left) targetIndex = lanesPerDirection - 1;
      auto it = laneLookup.find(
          {l.to.row, l.to.col, exitNode.row, exitNode.col, targetIndex});
      if (it == laneLookup.end()) continue;  // no U-turn targets exist anyway
      net.connections.push_back({l.id, it->second, t});
    }
  }
  std::sort(net.connections.begin(), net.connections.end(),
            [](const Connection& a, const Connection& b) {
              return std::tie(a.fromLane, a.toLane) < std::tie(b.fromLane, b.toLane);
            });
  return net;
}

LaneGraph lane_graph(const RoadNetwork& network) {
  LaneGraph g;
  g.nodeCount = network.laneCount();
  g.edges.reserve(network.connections.size());
  for (const auto& c : network.connections) g.edges.emplace_back(c.fromLane, c.toLane);
  std::sort(g.edges.begin(), g.edges.end());
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
  return g;
}

Eigen::MatrixXd adjacency_matrix(const LaneGraph& graph) {
  const int n = graph.nodeCount;
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
  for (const auto& [i, j] : graph.edges) a(i, j) = 1.0;
  return a;
}

std::string network_to_json(const RoadNetwork& network) {
  json j;
  j["schema"] = "qest-network-v1";
  j["rows"] = network.rows;
  j["cols"] = network.cols;
  j["laneLength"] = network.laneLength;
  j["fringeLength"] = network.fringeLength;
  j["lanesPerDirection"] = network.lanesPerDirection;
  j["detectorDistance"] = network.detectorDistance;
  j["tlsProgramId"] = network.tlsProgramId;
  j["hash"] = network.hash();
  json lanes = json::array();
  for (const Lane& l : network.lanes) {
    lanes.push_back({{"id", l.id},
                     {"name", network.lane_name(l.id)},
                     {"from", {l.from.row, l.from.col}},
                     {"to", {l.to.row, l.to.col}},
                     {"dir", dir_name(l.travelDir)},
                     {"laneIndex", l.laneIndex},
                     {"length", l.length},
                     {"signalized", l.signalized},
                     {"fringeEntry", l.fringeEntry},
                     {"fringeExit", l.fringeExit},
                     {"stopDetectorPos", l.stopDetectorPos},
                     {"advancedDetectorPos", l.advancedDetectorPos}});
  }
  j["lanes"] = lanes;
  json conns = json::array();
  for (const auto& c : network.connections)
    conns.push_back({c.fromLane, c.toLane, turn_name(c.turn)});
  j["connections"] = conns;
  return j.dump(2);
}

RoadNetwork network_from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.value("schema", "") != "qest-network-v1")
    throw ConfigError("unknown network schema");
  RoadNetwork net = build_grid_network(j.at("rows"), j.at("cols"),
                                       j.at("laneLength"),
                                       j.at("lanesPerDirection"),
                                       j.at("detectorDistance"));
  net.tlsProgramId = j.value("tlsProgramId", "default");
  return net;
}

void save_network(const RoadNetwork& network, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f << network_to_json(network) << "\n";
}

RoadNetwork load_network(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return network_from_json(ss.str());
}

void write_adjacency_csv(const Eigen::MatrixXd& a, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (j) f << ",";
      f << static_cast<int>(a(i, j) != 0.0);
    }
    f << "\n";
  }
}

}  // namespace qest::net
