#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qest/errors.hpp"

namespace qest::net {

/// Compass direction of travel. Row index grows southward, column index
/// grows eastward.
enum class Dir : int { North = 0, East = 1, South = 2, West = 3 };

enum class Turn : int { Left = 0, Straight = 1, Right = 2 };

Dir turn_result(Dir travel, Turn turn);
std::string dir_name(Dir d);
std::string turn_name(Turn t);

/// Grid node. Interior nodes have 0 <= row < rows, 0 <= col < cols; fringe
/// endpoints lie one step outside the grid.
struct Node {
  int row = 0;
  int col = 0;
  friend bool operator==(const Node&, const Node&) = default;
};

/// One directed lane. Lanes are the graph nodes of the abstracted network.
struct Lane {
  int id = -1;              // position in the deterministic lane ordering
  Node from, to;
  Dir travelDir = Dir::North;
  int laneIndex = 0;        // 0 = rightmost in travel direction
  double length = 0.0;      // m
  bool signalized = false;  // downstream end controlled by a traffic light
  bool fringeEntry = false; // vehicles may spawn at the upstream end
  bool fringeExit = false;  // vehicles leave the network at the downstream end
  std::vector<Turn> movements;       // permitted turns at the downstream node
  double stopDetectorPos = 0.0;      // m from lane start (== length)
  double advancedDetectorPos = 0.0;  // m from lane start (length - L_d)
};

/// Directed lane-to-lane movement permitted through one intersection.
struct Connection {
  int fromLane = -1;
  int toLane = -1;
  Turn turn = Turn::Straight;
};

struct RoadNetwork {
  int rows = 0;
  int cols = 0;
  double laneLength = 0.0;       // m, interior links
  double fringeLength = 0.0;     // m, entry/exit links (== laneLength)
  int lanesPerDirection = 1;
  double detectorDistance = 0.0; // L_d, advanced detector setback in m
  std::string tlsProgramId = "default";
  std::vector<Lane> lanes;
  std::vector<Connection> connections;

  int laneCount() const { return static_cast<int>(lanes.size()); }
  const Lane& lane(int id) const { return lanes.at(static_cast<size_t>(id)); }
  /// Connection leaving `laneId` with the given turn, if permitted.
  std::optional<Connection> connection_for(int laneId, Turn turn) const;
  std::vector<Connection> connections_from(int laneId) const;
  std::string lane_name(int id) const;
  std::uint64_t hash() const;
};

struct LaneGraph {
  int nodeCount = 0;
  std::vector<std::pair<int, int>> edges;  // directed (fromLane, toLane)
};

/// Builds a rows x cols signalized grid with fringe entry/exit links on every
/// border intersection. Every lane carries a stop-bar detector at its
/// downstream end and an advanced detector `detectorDistance` upstream of it.
RoadNetwork build_grid_network(int rows, int cols, double laneLength,
                               int lanesPerDirection, double detectorDistance);

/// One node per lane, one directed edge per permitted movement.
LaneGraph lane_graph(const RoadNetwork& network);

/// Binary N x N matrix: graph edges plus the unit diagonal.
Eigen::MatrixXd adjacency_matrix(const LaneGraph& graph);

std::string network_to_json(const RoadNetwork& network);
RoadNetwork network_from_json(const std::string& text);
void save_network(const RoadNetwork& network, const std::string& path);
RoadNetwork load_network(const std::string& path);
void write_adjacency_csv(const Eigen::MatrixXd& a, const std::string& path);

}  // namespace qest::net
