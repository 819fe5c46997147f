#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "qest/liu.hpp"
#include "qest/micro_sim.hpp"
#include "qest/net_graph.hpp"
#include "qest/pipeline.hpp"

namespace fs = std::filesystem;
using namespace qest;

namespace {

int run_gen_net(int rows, int cols, double laneLen, int lanesPerDir,
                double detectorDist, const std::string& out,
                const std::string& adjacencyOut) {
  auto network = net::build_grid_network(rows, cols, laneLen, lanesPerDir,
                                         detectorDist);
  net::save_network(network, out);
  if (!adjacencyOut.empty())
    net::write_adjacency_csv(net::adjacency_matrix(net::lane_graph(network)),
                             adjacencyOut);
  std::cout << "wrote " << out << " (" << network.laneCount() << " lanes)\n";
  return 0;
}

int run_simulate(const std::string& netPath, double rate, double duration,
                 std::uint64_t seed, const std::string& tls, bool laneChange,
                 double phase, const std::string& out) {
  auto network = net::load_network(netPath);
  sim::SimConfig cfg;
  cfg.arrivalRate = rate;
  cfg.duration = duration;
  cfg.seed = seed;
  cfg.tlsMode = sim::tls_mode_from_name(tls);
  cfg.laneChanging = laneChange;
  cfg.phaseDuration = phase;
  auto result = sim::run_simulation(network, cfg);
  sim::save_run(result, network, out);
  std::cout << "wrote " << out << " (entered " << result.entered << ", exited "
            << result.exited << ")\n";
  return 0;
}

int run_liu(const std::string& runDir, const std::string& variant,
            const std::string& shortQueue, const std::string& out) {
  auto run = sim::load_run(runDir);
  liu::LiuConfig cfg;
  cfg.detectorDistance = run.detectorDistance;
  if (variant == "c")
    cfg.cVariant = liu::BreakpointCVariant::C;
  else if (variant == "cprime")
    cfg.cVariant = liu::BreakpointCVariant::CPrime;
  else
    throw ConfigError("unknown breakpoint variant: " + variant);
  if (shortQueue == "io")
    cfg.shortQueueMethod = liu::ShortQueueMethod::InputOutput;
  else if (shortQueue == "expansion")
    cfg.shortQueueMethod = liu::ShortQueueMethod::ExpansionOnStopBar;
  else
    throw ConfigError("unknown short-queue method: " + shortQueue);
  auto estimates = liu::estimate_run(run, cfg);
  liu::save_estimates_csv(estimates, out);
  std::cout << "wrote " << out << " (" << estimates.size() << " lanes)\n";
  return 0;
}

std::vector<fs::path> sorted_run_dirs(const std::string& runsDir) {
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(runsDir))
    if (entry.is_directory()) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw ConfigError("no run directories under " + runsDir);
  return dirs;
}

int run_dataset(const std::string& runsDir, const std::string& liuDir, int window,
                const std::string& out) {
  const auto dirs = sorted_run_dirs(runsDir);
  std::vector<sim::SimulationOutput> runs;
  std::vector<std::vector<liu::LaneEstimates>> liuAll;
  for (const auto& dir : dirs) {
    runs.push_back(sim::load_run(dir.string()));
    const fs::path liuCsv = fs::path(liuDir) / (dir.filename().string() + ".csv");
    liuAll.push_back(liu::load_estimates_csv(liuCsv.string()));
  }
  auto network = sim::load_run_network(dirs[0].string());
  const Eigen::MatrixXd adj = net::adjacency_matrix(net::lane_graph(network));
  auto dataset = pipeline::build_design_tensors(runs, liuAll, window, &adj);
  pipeline::save_dataset(dataset, out);
  std::cout << "wrote " << out << " X=(" << dataset.sims() << "," << dataset.steps()
            << "," << dataset.laneCount() << "," << dataset.features() << ")\n";
  return 0;
}

int run_train(const std::string& dataPath, int epochs, double lr, double l2,
              double dropoutRate, std::uint64_t seed, int hidden, int gatFeatures,
              const std::string& out) {
  auto dataset = pipeline::load_dataset(dataPath);
  pipeline::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.learningRate = lr;
  cfg.lambda = l2;
  cfg.dropoutRate = dropoutRate;
  cfg.seed = seed;
  auto split = pipeline::split_dataset(dataset.sims(), cfg.trainFrac, cfg.valFrac,
                                       cfg.testFrac, seed);
  model::ModelConfig mc;
  mc.inputFeatures = static_cast<int>(dataset.features());
  mc.hiddenWidth = hidden;
  mc.denseWidth = hidden;
  mc.gatFeatures = gatFeatures;
  auto model = model::build_model(mc, seed);
  auto result = pipeline::train(std::move(model),
                                pipeline::select_sims(dataset.X, split.train),
                                pipeline::select_sims(dataset.Y, split.train),
                                pipeline::select_sims(dataset.X, split.val),
                                pipeline::select_sims(dataset.Y, split.val),
                                dataset.adjacency, cfg);
  pipeline::Checkpoint ckpt;
  ckpt.modelConfig = result.model.cfg;
  ckpt.params = std::move(result.model.params);
  ckpt.featureScaler = result.featureScaler;
  ckpt.targetScaler = result.targetScaler;
  ckpt.trainFrac = cfg.trainFrac;
  ckpt.valFrac = cfg.valFrac;
  ckpt.testFrac = cfg.testFrac;
  ckpt.splitSeed = seed;
  ckpt.simCount = dataset.sims();
  ckpt.trainTargetMax = result.trainTargetMax;
  pipeline::save_checkpoint(ckpt, out);
  std::cout << "wrote " << out << " (best epoch " << result.bestEpoch
            << ", final train loss " << result.trainLoss.back()
            << ", val loss " << result.valLoss.back() << ")\n";
  return 0;
}

int run_eval(const std::string& modelPath, const std::string& dataPath,
             const std::string& liuDir, const std::string& reportPath,
             const std::string& plotsPath) {
  auto dataset = pipeline::load_dataset(dataPath);
  auto ckpt = pipeline::load_checkpoint(modelPath);
  if (ckpt.simCount != dataset.sims())
    throw ConfigError("checkpoint was trained on a different dataset size");
  auto split = pipeline::split_dataset(dataset.sims(), ckpt.trainFrac, ckpt.valFrac,
                                       ckpt.testFrac, ckpt.splitSeed);

  nn::Tensor testLiu = pipeline::select_sims(dataset.liuWindow, split.test);
  if (!liuDir.empty()) {
    // Rebuild the Liu comparison series from the per-run estimate CSVs.
    const long T = dataset.steps();
    const int window = dataset.windowSeconds;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(liuDir))
      if (entry.path().extension() == ".csv") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (static_cast<long>(files.size()) != dataset.sims())
      throw ConfigError("liu dir file count does not match dataset sims");
    for (long ti = 0; ti < static_cast<long>(split.test.size()); ++ti) {
      const long sim = split.test[static_cast<size_t>(ti)];
      auto lanes = liu::load_estimates_csv(files[static_cast<size_t>(sim)].string());
      for (const auto& le : lanes) {
        std::vector<std::pair<double, double>> knots;
        for (size_t i = 0; i < le.estimates.size(); ++i)
          knots.emplace_back(le.estimates[i].maxQueueTime,
                             le.estimates[i].maxQueueMeters);
        auto series =
            pipeline::liu_interpolate(knots, static_cast<int>(T) * window);
        for (long w = 0; w < T; ++w) {
          double sum = 0.0;
          for (int s = 0; s < window; ++s)
            sum += series[static_cast<size_t>(w * window + s)];
          testLiu.at(ti, w, le.lane, 0) = sum / window;
        }
      }
    }
  }

  model::Model model;
  model.cfg = ckpt.modelConfig;
  model.params = std::move(ckpt.params);
  auto testX = pipeline::select_sims(dataset.X, split.test);
  auto testY = pipeline::select_sims(dataset.Y, split.test);
  auto report = pipeline::evaluate(model, ckpt.featureScaler, ckpt.targetScaler,
                                   testX, testY, testLiu, dataset.adjacency,
                                   dataset.laneSignalized, ckpt.trainTargetMax);
  std::ofstream rf(reportPath);
  if (!rf) throw ConfigError("cannot write " + reportPath);
  rf << report.to_json() << "\n";
  report.write_lanes_csv(reportPath + ".lanes.csv");
  if (!plotsPath.empty())
    pipeline::write_plots_csv(model, ckpt.featureScaler, ckpt.targetScaler, testX,
                              testY, testLiu, dataset.adjacency, plotsPath);
  std::cout << "network MAE queue: DL " << report.networkMaeQueueDl << " m, Liu "
            << report.networkMaeQueueLiu << " m; nVehSeen MAE "
            << report.networkMaeVehDl << " veh; instabilities "
            << report.instabilityCount << "\n";
  return 0;
}

int run_ablate(const std::string& dataPath, bool dropLiu, const std::string& out) {
  auto dataset = pipeline::load_dataset(dataPath);
  if (!dropLiu) throw ConfigError("nothing to do: pass --drop-liu");
  auto ablated = pipeline::ablate_liu_feature(dataset);
  pipeline::save_dataset(ablated, out);
  std::cout << "wrote " << out << " (" << ablated.features() << " features)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Signalized-grid queue estimation toolkit"};
  app.require_subcommand(1);

  // gen-net
  int rows = 3, cols = 3, lanesPerDir = 3;
  double laneLen = 600.0, detectorDist = 122.0;
  std::string netOut = "net.json", adjacencyOut;
  auto* genNet = app.add_subcommand("gen-net", "generate a grid road network");
  genNet->add_option("--rows", rows)->required();
  genNet->add_option("--cols", cols)->required();
  genNet->add_option("--lane-len", laneLen)->required();
  genNet->add_option("--lanes-per-dir", lanesPerDir)->required();
  genNet->add_option("--detector-dist", detectorDist);
  genNet->add_option("--out", netOut)->required();
  genNet->add_option("--adjacency-out", adjacencyOut);

  // simulate
  std::string simNet, simTls = "simplified", simOut;
  double rate = 0.5, duration = 600.0, phase = 30.0;
  std::uint64_t seed = 1;
  bool laneChange = false;
  auto* simulate = app.add_subcommand("simulate", "run one microsimulation");
  simulate->add_option("--net", simNet)->required();
  simulate->add_option("--rate", rate)->required();
  simulate->add_option("--duration", duration)->required();
  simulate->add_option("--seed", seed)->required();
  simulate->add_option("--tls", simTls)->check(CLI::IsMember({"simplified", "realistic"}));
  simulate->add_flag("--lane-change", laneChange);
  simulate->add_option("--phase", phase);
  simulate->add_option("--out", simOut)->required();

  // liu
  std::string liuRun, liuVariant = "cprime", liuShort = "io", liuOut;
  auto* liuCmd = app.add_subcommand("liu", "per-cycle queue estimation");
  liuCmd->add_option("--run", liuRun)->required();
  liuCmd->add_option("--variant", liuVariant)->check(CLI::IsMember({"c", "cprime"}));
  liuCmd->add_option("--short-queue", liuShort)->check(CLI::IsMember({"io", "expansion"}));
  liuCmd->add_option("--out", liuOut)->required();

  // dataset
  std::string runsDir, liuDir, dataOut;
  int window = 10;
  auto* datasetCmd = app.add_subcommand("dataset", "build design/target tensors");
  datasetCmd->add_option("--runs", runsDir)->required();
  datasetCmd->add_option("--liu", liuDir)->required();
  datasetCmd->add_option("--window", window);
  datasetCmd->add_option("--out", dataOut)->required();

  // train
  std::string trainData, trainOut;
  int epochs = 100, hidden = 128, gatFeatures = 128;
  double lr = 1e-3, l2 = 1e-4, dropoutRate = 0.2;
  std::uint64_t trainSeed = 0;
  auto* trainCmd = app.add_subcommand("train", "train the estimation model");
  trainCmd->add_option("--data", trainData)->required();
  trainCmd->add_option("--epochs", epochs)->required();
  trainCmd->add_option("--lr", lr);
  trainCmd->add_option("--l2", l2);
  trainCmd->add_option("--dropout", dropoutRate);
  trainCmd->add_option("--seed", trainSeed);
  trainCmd->add_option("--hidden", hidden);
  trainCmd->add_option("--gat-features", gatFeatures);
  trainCmd->add_option("--out", trainOut)->required();

  // eval
  std::string evalModel, evalData, evalLiu, evalReport, evalPlots;
  auto* evalCmd = app.add_subcommand("eval", "evaluate on the held-out test split");
  evalCmd->add_option("--model", evalModel)->required();
  evalCmd->add_option("--data", evalData)->required();
  evalCmd->add_option("--liu", evalLiu);
  evalCmd->add_option("--report", evalReport)->required();
  evalCmd->add_option("--plots", evalPlots);

  // ablate
  std::string ablateData, ablateOut;
  bool dropLiu = false;
  auto* ablateCmd = app.add_subcommand("ablate", "drop the Liu input feature");
  ablateCmd->add_option("--data", ablateData)->required();
  ablateCmd->add_flag("--drop-liu", dropLiu);
  ablateCmd->add_option("--out", ablateOut)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (genNet->parsed())
      return run_gen_net(rows, cols, laneLen, lanesPerDir, detectorDist, netOut,
                         adjacencyOut);
    if (simulate->parsed())
      return run_simulate(simNet, rate, duration, seed, simTls, laneChange, phase,
                          simOut);
    if (liuCmd->parsed()) return run_liu(liuRun, liuVariant, liuShort, liuOut);
    if (datasetCmd->parsed()) return run_dataset(runsDir, liuDir, window, dataOut);
    if (trainCmd->parsed())
      return run_train(trainData, epochs, lr, l2, dropoutRate, trainSeed, hidden,
                       gatFeatures, trainOut);
    if (evalCmd->parsed())
      return run_eval(evalModel, evalData, evalLiu, evalReport, evalPlots);
    if (ablateCmd->parsed()) return run_ablate(ablateData, dropLiu, ablateOut);
  } catch (const Error& e) {
    nlohmann::json err{{"error", e.code}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    nlohmann::json err{{"error", "InternalError"}, {"message", e.what()}};
    std::cerr << err.dump() << "\n";
    return 2;
  }
  return 0;
}
