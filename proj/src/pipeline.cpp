#include "qest/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "qest/traffic_metrics.hpp"

namespace qest::pipeline {

using nlohmann::json;

std::vector<double> liu_interpolate(
    const std::vector<std::pair<double, double>>& knots, int durationSeconds,
    bool* emptyFlag) {
  std::vector<double> out(static_cast<size_t>(durationSeconds), 0.0);
  if (emptyFlag) *emptyFlag = knots.empty();
  if (knots.empty()) return out;
  for (int s = 0; s < durationSeconds; ++s) {
    const double t = s;
    if (t <= knots.front().first) {
      out[static_cast<size_t>(s)] = knots.front().second;
      continue;
    }
    if (t >= knots.back().first) {
      out[static_cast<size_t>(s)] = knots.back().second;
      continue;
    }
    for (size_t k = 1; k < knots.size(); ++k) {
      if (t <= knots[k].first) {
        const auto& [t0, v0] = knots[k - 1];
        const auto& [t1, v1] = knots[k];
        out[static_cast<size_t>(s)] =
            t1 - t0 < 1e-12 ? v1 : v0 + (v1 - v0) * (t - t0) / (t1 - t0);
        break;
      }
    }
  }
  return out;
}

namespace {

std::vector<double> window_mean(const std::vector<double>& series, int window,
                                long steps) {
  std::vector<double> out(static_cast<size_t>(steps), 0.0);
  for (long w = 0; w < steps; ++w) {
    double sum = 0.0;
    for (int s = 0; s < window; ++s)
      sum += series[static_cast<size_t>(w * window + s)];
    out[static_cast<size_t>(w)] = sum / window;
  }
  return out;
}

/// Per-cycle ground-truth queue knots for one lane, in the mode matching the
/// TLS program of the run.
std::vector<std::pair<double, double>> ground_truth_knots(
    const sim::SimulationOutput& run, int lane, double effectiveLength) {
  std::vector<std::pair<double, double>> knots;
  const auto& cycles = run.cycles.at(static_cast<size_t>(lane));
  const auto& e2 = run.e2.at(static_cast<size_t>(lane));
  const bool useHalts = run.tlsMode == "simplified";
  for (size_t i = 1; i < cycles.size(); ++i) {
    // The queue discharging in cycle i builds in [T_g^{i-1}, T_g^i).
    const int lo = static_cast<int>(cycles[i - 1].redStart);
    const int hi = std::min(static_cast<int>(cycles[i].redStart),
                            static_cast<int>(e2.size()));
    if (lo >= hi) continue;
    if (useHalts) {
      int halts = 0;
      for (int s = lo; s < hi; ++s) halts += e2[static_cast<size_t>(s)].startedHalts;
      knots.emplace_back(cycles[i].greenStart, halts * effectiveLength);
    } else {
      double best = 0.0;
      int bestAt = static_cast<int>(cycles[i].greenStart);
      for (int s = lo; s < hi; ++s) {
        if (e2[static_cast<size_t>(s)].maxJamLengthMeters > best) {
          best = e2[static_cast<size_t>(s)].maxJamLengthMeters;
          bestAt = s;
        }
      }
      knots.emplace_back(bestAt, best);
    }
  }
  return knots;
}

}  // namespace

Dataset build_design_tensors(
    const std::vector<sim::SimulationOutput>& runs,
    const std::vector<std::vector<liu::LaneEstimates>>& liuPerRun,
    int windowSeconds, const Mat* adjacency) {
  if (runs.empty()) throw EmptyInput("build_design_tensors: no runs");
  if (liuPerRun.size() != runs.size())
    throw LengthMismatch("build_design_tensors: runs/liu count differ");
  const long sims = static_cast<long>(runs.size());
  const int seconds = runs[0].seconds();
  const long lanes = runs[0].laneCount();
  for (const auto& r : runs)
    if (r.seconds() != seconds || r.laneCount() != lanes)
      throw LengthMismatch("build_design_tensors: runs have unequal shapes");
  const long steps = seconds / windowSeconds;
  const double effectiveLength = 6.67;  // matches the simulator's L_e

  Dataset d;
  d.windowSeconds = windowSeconds;
  d.featureOrder.assign(kFeatureOrder.begin(), kFeatureOrder.end());
  d.adjacency = adjacency ? *adjacency : Mat::Identity(lanes, lanes);
  d.X = nn::Tensor({sims, steps, lanes, 8});
  d.Y = nn::Tensor({sims, steps, lanes, 2});
  d.liuWindow = nn::Tensor({sims, steps, lanes, 1});
  d.laneSignalized.assign(static_cast<size_t>(lanes), 0);
  for (long lane = 0; lane < lanes; ++lane)
    d.laneSignalized[static_cast<size_t>(lane)] =
        !runs[0].cycles.at(static_cast<size_t>(lane)).empty();

  for (long sim = 0; sim < sims; ++sim) {
    const auto& run = runs[static_cast<size_t>(sim)];
    // lane -> per-cycle Liu knots
    std::vector<std::vector<std::pair<double, double>>> liuKnots(
        static_cast<size_t>(lanes));
    for (const auto& le : liuPerRun[static_cast<size_t>(sim)])
      for (size_t i = 0; i < le.estimates.size(); ++i)
        liuKnots[static_cast<size_t>(le.lane)].emplace_back(
            le.estimates[i].maxQueueTime, le.estimates[i].maxQueueMeters);

    for (long lane = 0; lane < lanes; ++lane) {
      std::vector<double> stopCount(static_cast<size_t>(seconds)),
          stopOcc(static_cast<size_t>(seconds)), stopSpeed(static_cast<size_t>(seconds)),
          advCount(static_cast<size_t>(seconds)), advOcc(static_cast<size_t>(seconds)),
          advSpeed(static_cast<size_t>(seconds)), tlsGreen(static_cast<size_t>(seconds)),
          nVeh(static_cast<size_t>(seconds));
      for (int s = 0; s < seconds; ++s) {
        const auto& st = run.e1Stop[static_cast<size_t>(lane)][static_cast<size_t>(s)];
        const auto& ad = run.e1Adv[static_cast<size_t>(lane)][static_cast<size_t>(s)];
        stopCount[static_cast<size_t>(s)] = st.vehicleCount;
        stopOcc[static_cast<size_t>(s)] = st.occupancyFraction;
        stopSpeed[static_cast<size_t>(s)] = st.meanSpeed;
        advCount[static_cast<size_t>(s)] = ad.vehicleCount;
        advOcc[static_cast<size_t>(s)] = ad.occupancyFraction;
        advSpeed[static_cast<size_t>(s)] = ad.meanSpeed;
        tlsGreen[static_cast<size_t>(s)] =
            run.tlsGreen[static_cast<size_t>(lane)][static_cast<size_t>(s)];
        nVeh[static_cast<size_t>(s)] =
            run.e2[static_cast<size_t>(lane)][static_cast<size_t>(s)].nVehSeen;
      }
      const auto liuSeries =
          liu_interpolate(liuKnots[static_cast<size_t>(lane)], seconds);
      const auto gtSeries = liu_interpolate(
          ground_truth_knots(run, static_cast<int>(lane), effectiveLength), seconds);

      const bool signalized = d.laneSignalized[static_cast<size_t>(lane)];
      const std::vector<const std::vector<double>*> feats = {
          &stopCount, &stopOcc, &stopSpeed, &advCount,
          &advOcc,    &advSpeed, &tlsGreen, &liuSeries};
      for (int f = 0; f < 8; ++f) {
        const auto wm = window_mean(*feats[static_cast<size_t>(f)], windowSeconds, steps);
        for (long w = 0; w < steps; ++w) d.X.at(sim, w, lane, f) = wm[static_cast<size_t>(w)];
      }
      const auto wQueue = window_mean(gtSeries, windowSeconds, steps);
      const auto wVeh = window_mean(nVeh, windowSeconds, steps);
      const auto wLiu = window_mean(liuSeries, windowSeconds, steps);
      for (long w = 0; w < steps; ++w) {
        // Fringe exit lanes keep their features but carry zero targets.
        d.Y.at(sim, w, lane, 0) = signalized ? wQueue[static_cast<size_t>(w)] : 0.0;
        d.Y.at(sim, w, lane, 1) = signalized ? wVeh[static_cast<size_t>(w)] : 0.0;
        d.liuWindow.at(sim, w, lane, 0) = wLiu[static_cast<size_t>(w)];
      }
    }
  }
  return d;
}

namespace {

void write_tensor(std::ofstream& f, const nn::Tensor& t) {
  const std::uint64_t rank = t.shape.size();
  f.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
  for (long d : t.shape) {
    const std::int64_t v = d;
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  f.write(reinterpret_cast<const char*>(t.values.data()),
          static_cast<std::streamsize>(t.values.size() * sizeof(double)));
}

nn::Tensor read_tensor(std::ifstream& f) {
  std::uint64_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), sizeof(rank));
  std::vector<long> shape(rank);
  for (auto& d : shape) {
    std::int64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    d = static_cast<long>(v);
  }
  nn::Tensor t(shape);
  f.read(reinterpret_cast<char*>(t.values.data()),
         static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  if (!f) throw ConfigError("truncated tensor data");
  return t;
}

constexpr std::uint32_t kDatasetMagic = 0x51445354;  // "QDST"

}  // namespace

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path);
  const std::uint32_t magic = kDatasetMagic, version = 1;
  f.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::int32_t window = d.windowSeconds;
  f.write(reinterpret_cast<const char*>(&window), sizeof(window));
  const std::uint64_t nf = d.featureOrder.size();
  f.write(reinterpret_cast<const char*>(&nf), sizeof(nf));
  for (const auto& name : d.featureOrder) {
    const std::uint64_t len = name.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(name.data(), static_cast<std::streamsize>(len));
  }
  const std::uint64_t nl = d.laneSignalized.size();
  f.write(reinterpret_cast<const char*>(&nl), sizeof(nl));
  f.write(reinterpret_cast<const char*>(d.laneSignalized.data()),
          static_cast<std::streamsize>(nl));
  write_tensor(f, d.X);
  write_tensor(f, d.Y);
  write_tensor(f, d.liuWindow);
  nn::Tensor adj({d.adjacency.rows(), d.adjacency.cols()});
  for (long i = 0; i < d.adjacency.rows(); ++i)
    for (long j = 0; j < d.adjacency.cols(); ++j)
      adj.values[static_cast<size_t>(i * d.adjacency.cols() + j)] = d.adjacency(i, j);
  write_tensor(f, adj);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path);
  std::uint32_t magic = 0, version = 0;
  f.read(reinterpret_cast<char*>(&magic), sizeof(magic));
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (magic != kDatasetMagic || version != 1)
    throw ConfigError("unknown dataset format: " + path);
  Dataset d;
  std::int32_t window = 0;
  f.read(reinterpret_cast<char*>(&window), sizeof(window));
  d.windowSeconds = window;
  std::uint64_t nf = 0;
  f.read(reinterpret_cast<char*>(&nf), sizeof(nf));
  for (std::uint64_t i = 0; i < nf; ++i) {
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string name(len, '\0');
    f.read(name.data(), static_cast<std::streamsize>(len));
    d.featureOrder.push_back(std::move(name));
  }
  std::uint64_t nl = 0;
  f.read(reinterpret_cast<char*>(&nl), sizeof(nl));
  d.laneSignalized.resize(nl);
  f.read(reinterpret_cast<char*>(d.laneSignalized.data()),
         static_cast<std::streamsize>(nl));
  d.X = read_tensor(f);
  d.Y = read_tensor(f);
  d.liuWindow = read_tensor(f);
  const nn::Tensor adj = read_tensor(f);
  d.adjacency = Mat(adj.dim(0), adj.dim(1));
  for (long i = 0; i < adj.dim(0); ++i)
    for (long j = 0; j < adj.dim(1); ++j)
      d.adjacency(i, j) = adj.values[static_cast<size_t>(i * adj.dim(1) + j)];
  return d;
}

Dataset ablate_liu_feature(const Dataset& d) {
  if (d.features() != 8) throw ShapeMismatch("ablate: expected 8 features");
  Dataset out = d;
  out.featureOrder.pop_back();
  out.X = nn::Tensor({d.sims(), d.steps(), d.laneCount(), 7});
  for (long s = 0; s < d.sims(); ++s)
    for (long t = 0; t < d.steps(); ++t)
      for (long l = 0; l < d.laneCount(); ++l)
        for (long f = 0; f < 7; ++f) out.X.at(s, t, l, f) = d.X.at(s, t, l, f);
  return out;
}

SplitIndices split_dataset(long simCount, double trainFrac, double valFrac,
                           double testFrac, std::uint64_t seed) {
  if (std::abs(trainFrac + valFrac + testFrac - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
  std::vector<long> ids(static_cast<size_t>(simCount));
  std::iota(ids.begin(), ids.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const long nTrain = static_cast<long>(std::llround(trainFrac * simCount));
  const long nVal = static_cast<long>(std::llround(valFrac * simCount));
  const long nTest = simCount - nTrain - nVal;
  if (nTrain < 1 || nVal < 1 || nTest < 1)
    throw TooFewSimulations("every split part needs at least one simulation");
  SplitIndices s;
  s.train.assign(ids.begin(), ids.begin() + nTrain);
  s.val.assign(ids.begin() + nTrain, ids.begin() + nTrain + nVal);
  s.test.assign(ids.begin() + nTrain + nVal, ids.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

nn::Tensor select_sims(const nn::Tensor& t, const std::vector<long>& ids) {
  t.require_rank(4);
  nn::Tensor out({static_cast<long>(ids.size()), t.dim(1), t.dim(2), t.dim(3)});
  for (long i = 0; i < static_cast<long>(ids.size()); ++i) {
    const long src = ids[static_cast<size_t>(i)];
    for (long a = 0; a < t.dim(1); ++a)
      for (long b = 0; b < t.dim(2); ++b)
        for (long c = 0; c < t.dim(3); ++c) out.at(i, a, b, c) = t.at(src, a, b, c);
  }
  return out;
}

Scaler Scaler::fit(const nn::Tensor& t) {
  t.require_rank(4);
  const long channels = t.dim(3);
  Scaler s;
  s.mean.assign(static_cast<size_t>(channels), 0.0);
  s.stdev.assign(static_cast<size_t>(channels), 1.0);
  const long perChannel = t.count() / channels;
  for (long c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (long i = 0; i < t.dim(0); ++i)
      for (long j = 0; j < t.dim(1); ++j)
        for (long k = 0; k < t.dim(2); ++k) sum += t.at(i, j, k, c);
    const double mean = sum / static_cast<double>(perChannel);
    double var = 0.0;
    for (long i = 0; i < t.dim(0); ++i)
      for (long j = 0; j < t.dim(1); ++j)
        for (long k = 0; k < t.dim(2); ++k) {
          const double d = t.at(i, j, k, c) - mean;
          var += d * d;
        }
    var /= static_cast<double>(perChannel);
    s.mean[static_cast<size_t>(c)] = mean;
    s.stdev[static_cast<size_t>(c)] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return s;
}

nn::Tensor Scaler::apply(const nn::Tensor& t) const {
  t.require_rank(4);
  if (t.dim(3) != static_cast<long>(mean.size()))
    throw ShapeMismatch("scaler channel count");
  nn::Tensor out = t;
  for (long i = 0; i < t.dim(0); ++i)
    for (long j = 0; j < t.dim(1); ++j)
      for (long k = 0; k < t.dim(2); ++k)
        for (long c = 0; c < t.dim(3); ++c)
          out.at(i, j, k, c) = (t.at(i, j, k, c) - mean[static_cast<size_t>(c)]) /
                               stdev[static_cast<size_t>(c)];
  return out;
}

nn::Tensor Scaler::invert(const nn::Tensor& t) const {
  t.require_rank(4);
  nn::Tensor out = t;
  for (long i = 0; i < t.dim(0); ++i)
    for (long j = 0; j < t.dim(1); ++j)
      for (long k = 0; k < t.dim(2); ++k)
        for (long c = 0; c < t.dim(3); ++c)
          out.at(i, j, k, c) = t.at(i, j, k, c) * stdev[static_cast<size_t>(c)] +
                               mean[static_cast<size_t>(c)];
  return out;
}

namespace {

nn::Tensor single_sim(const nn::Tensor& t, long sim) {
  return select_sims(t, {sim});
}

}  // namespace

TrainResult train(model::Model model, const nn::Tensor& trainX,
                  const nn::Tensor& trainY, const nn::Tensor& valX,
                  const nn::Tensor& valY, const Mat& adjacency,
                  const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  TrainResult res;
  res.featureScaler = Scaler::fit(trainX);
  res.targetScaler = Scaler::fit(trainY);
  const nn::Tensor trX = res.featureScaler.apply(trainX);
  const nn::Tensor trY = res.targetScaler.apply(trainY);
  const nn::Tensor vaX = res.featureScaler.apply(valX);
  const nn::Tensor vaY = res.targetScaler.apply(valY);

  res.trainTargetMax.assign(static_cast<size_t>(trainY.dim(3)), 0.0);
  for (long i = 0; i < trainY.dim(0); ++i)
    for (long j = 0; j < trainY.dim(1); ++j)
      for (long k = 0; k < trainY.dim(2); ++k)
        for (long c = 0; c < trainY.dim(3); ++c)
          res.trainTargetMax[static_cast<size_t>(c)] = std::max(
              res.trainTargetMax[static_cast<size_t>(c)], trainY.at(i, j, k, c));

  nn::OptState opt;
  opt.learningRate = cfg.learningRate;
  std::mt19937_64 orderRng(cfg.seed);
  std::mt19937_64 dropRng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  std::vector<long> order(static_cast<size_t>(trX.dim(0)));
  std::iota(order.begin(), order.end(), 0);

  double bestVal = std::numeric_limits<double>::infinity();
  std::string bestParams = model.params.to_json();
  res.bestEpoch = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), orderRng);
    double epochLoss = 0.0;
    for (long sim : order) {
      model.params.zero_grads();
      const double loss = model::model_loss_and_grads(
          model, single_sim(trX, sim), single_sim(trY, sim), adjacency, cfg.lambda,
          cfg.dropoutRate, dropRng);
      if (!std::isfinite(loss))
        throw DivergenceDetected("training loss became non-finite at epoch " +
                                 std::to_string(epoch));
      nn::optimizer_step(cfg.optimizer, model.params, opt);
      epochLoss += loss;
    }
    epochLoss /= static_cast<double>(order.size());
    const double valLoss = model::model_loss(model, vaX, vaY, adjacency, cfg.lambda);
    if (!std::isfinite(valLoss))
      throw DivergenceDetected("validation loss became non-finite");
    res.trainLoss.push_back(epochLoss);
    res.valLoss.push_back(valLoss);
    if (valLoss < bestVal) {
      bestVal = valLoss;
      bestParams = model.params.to_json();
      res.bestEpoch = epoch;
    }
  }
  model.params = nn::ParamSet::from_json(bestParams);
  res.model = std::move(model);
  return res;
}

namespace {

struct SeriesPair {
  std::vector<double> obs, est;
};

}  // namespace

EvalReport evaluate_predictions(const nn::Tensor& pred, const nn::Tensor& testY,
                                const nn::Tensor& testLiuWindow,
                                const std::vector<std::uint8_t>& laneSignalized,
                                const std::vector<double>& trainTargetMax) {
  EvalReport rep;
  const long lanes = testY.dim(2);
  std::vector<double> maesDl, maesLiu;
  std::vector<double> netQueueObs, netQueueDl, netQueueLiu, netVehObs, netVehDl;
  for (long lane = 0; lane < lanes; ++lane) {
    if (lane < static_cast<long>(laneSignalized.size()) &&
        !laneSignalized[static_cast<size_t>(lane)])
      continue;
    SeriesPair queueDl, queueLiu, vehDl;
    bool unstable = false;
    for (long sim = 0; sim < testY.dim(0); ++sim) {
      for (long t = 0; t < testY.dim(1); ++t) {
        const double obsQ = testY.at(sim, t, lane, 0);
        const double obsV = testY.at(sim, t, lane, 1);
        const double dlQ = pred.at(sim, t, lane, 0);
        const double dlV = pred.at(sim, t, lane, 1);
        const double liuQ = testLiuWindow.at(sim, t, lane, 0);
        queueDl.obs.push_back(obsQ);
        queueDl.est.push_back(dlQ);
        queueLiu.obs.push_back(obsQ);
        queueLiu.est.push_back(liuQ);
        vehDl.obs.push_back(obsV);
        vehDl.est.push_back(dlV);
        if (dlV < 0.0 ||
            (trainTargetMax.size() > 1 && dlV > 1.5 * trainTargetMax[1]))
          unstable = true;
      }
    }
    LaneMetrics lm;
    lm.lane = static_cast<int>(lane);
    const auto mQ = metrics::error_metrics(queueDl.obs, queueDl.est);
    const auto mL = metrics::error_metrics(queueLiu.obs, queueLiu.est);
    const auto mV = metrics::error_metrics(vehDl.obs, vehDl.est);
    lm.maeQueueDl = mQ.mae;
    lm.mapeQueueDl = mQ.mape;
    lm.maeQueueLiu = mL.mae;
    lm.mapeQueueLiu = mL.mape;
    lm.maeVehDl = mV.mae;
    lm.mapeVehDl = mV.mape;
    lm.unstable = unstable;
    rep.lanes.push_back(lm);
    maesDl.push_back(mQ.mae);
    maesLiu.push_back(mL.mae);
    netQueueObs.insert(netQueueObs.end(), queueDl.obs.begin(), queueDl.obs.end());
    netQueueDl.insert(netQueueDl.end(), queueDl.est.begin(), queueDl.est.end());
    netQueueLiu.insert(netQueueLiu.end(), queueLiu.est.begin(), queueLiu.est.end());
    netVehObs.insert(netVehObs.end(), vehDl.obs.begin(), vehDl.obs.end());
    netVehDl.insert(netVehDl.end(), vehDl.est.begin(), vehDl.est.end());
    if (unstable) ++rep.instabilityCount;
  }
  if (!netQueueObs.empty()) {
    const auto q = metrics::error_metrics(netQueueObs, netQueueDl);
    const auto l = metrics::error_metrics(netQueueObs, netQueueLiu);
    const auto v = metrics::error_metrics(netVehObs, netVehDl);
    rep.networkMaeQueueDl = q.mae;
    rep.networkMapeQueueDl = q.mape;
    rep.networkMaeQueueLiu = l.mae;
    rep.networkMapeQueueLiu = l.mape;
    rep.networkMaeVehDl = v.mae;
  }
  if (!maesDl.empty()) {
    rep.madQueueDl = metrics::mad(maesDl);
    rep.madQueueLiu = metrics::mad(maesLiu);
  }
  return rep;
}

EvalReport evaluate(model::Model& model, const Scaler& featureScaler,
                    const Scaler& targetScaler, const nn::Tensor& testX,
                    const nn::Tensor& testY, const nn::Tensor& testLiuWindow,
                    const Mat& adjacency,
                    const std::vector<std::uint8_t>& laneSignalized,
                    const std::vector<double>& trainTargetMax) {
  const nn::Tensor scaled = featureScaler.apply(testX);
  nn::Tensor pred =
      targetScaler.invert(model::model_forward(model, scaled, adjacency));
  return evaluate_predictions(pred, testY, testLiuWindow, laneSignalized,
                              trainTargetMax);
}

std::string EvalReport::to_json() const {
  json j;
  j["networkMaeQueueDl"] = networkMaeQueueDl;
  j["networkMaeQueueLiu"] = networkMaeQueueLiu;
  j["networkMapeQueueDl"] = networkMapeQueueDl;
  j["networkMapeQueueLiu"] = networkMapeQueueLiu;
  j["networkMaeVehDl"] = networkMaeVehDl;
  j["madQueueDl"] = madQueueDl;
  j["madQueueLiu"] = madQueueLiu;
  j["instabilityCount"] = instabilityCount;
  json lanesJson = json::array();
  for (const auto& lm : lanes) {
    lanesJson.push_back({{"lane", lm.lane},
                         {"maeQueueDl", lm.maeQueueDl},
                         {"mapeQueueDl", lm.mapeQueueDl},
                         {"maeQueueLiu", lm.maeQueueLiu},
                         {"mapeQueueLiu", lm.mapeQueueLiu},
                         {"maeVehDl", lm.maeVehDl},
                         {"mapeVehDl", lm.mapeVehDl},
                         {"unstable", lm.unstable}});
  }
  j["lanes"] = std::move(lanesJson);
  return j.dump(2);
}

void EvalReport::write_lanes_csv(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f.precision(8);
  f << "lane,mapeQueueDl,maeQueueDl,mapeQueueLiu,maeQueueLiu,mapeVehDl,maeVehDl,"
       "unstable\n";
  for (const auto& lm : lanes)
    f << lm.lane << "," << lm.mapeQueueDl << "," << lm.maeQueueDl << ","
      << lm.mapeQueueLiu << "," << lm.maeQueueLiu << "," << lm.mapeVehDl << ","
      << lm.maeVehDl << "," << (lm.unstable ? 1 : 0) << "\n";
}

void write_plots_csv(model::Model& model, const Scaler& featureScaler,
                     const Scaler& targetScaler, const nn::Tensor& testX,
                     const nn::Tensor& testY, const nn::Tensor& testLiuWindow,
                     const Mat& adjacency, const std::string& path) {
  const nn::Tensor scaled = featureScaler.apply(testX);
  nn::Tensor pred = targetScaler.invert(model::model_forward(model, scaled, adjacency));
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f.precision(8);
  f << "sim,window,lane,obsQueue,dlQueue,liuQueue,obsNVeh,dlNVeh\n";
  for (long sim = 0; sim < testY.dim(0); ++sim)
    for (long t = 0; t < testY.dim(1); ++t)
      for (long lane = 0; lane < testY.dim(2); ++lane)
        f << sim << "," << t << "," << lane << "," << testY.at(sim, t, lane, 0) << ","
          << pred.at(sim, t, lane, 0) << "," << testLiuWindow.at(sim, t, lane, 0)
          << "," << testY.at(sim, t, lane, 1) << "," << pred.at(sim, t, lane, 1)
          << "\n";
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  json j;
  j["format"] = "qest-checkpoint";
  j["version"] = 1;
  j["modelConfig"] = json::parse(c.modelConfig.to_json());
  j["params"] = json::parse(c.params.to_json());
  j["featureScaler"] = {{"mean", c.featureScaler.mean}, {"stdev", c.featureScaler.stdev}};
  j["targetScaler"] = {{"mean", c.targetScaler.mean}, {"stdev", c.targetScaler.stdev}};
  j["split"] = {{"train", c.trainFrac},
                {"val", c.valFrac},
                {"test", c.testFrac},
                {"seed", c.splitSeed},
                {"simCount", c.simCount}};
  j["trainTargetMax"] = c.trainTargetMax;
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f << j.dump();
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read " + path);
  json j;
  f >> j;
  if (j.value("format", "") != "qest-checkpoint" || j.value("version", 0) != 1)
    throw ConfigError("unsupported checkpoint: " + path);
  Checkpoint c;
  c.modelConfig = model::ModelConfig::from_json(j.at("modelConfig").dump());
  c.params = nn::ParamSet::from_json(j.at("params").dump());
  c.featureScaler.mean = j.at("featureScaler").at("mean").get<std::vector<double>>();
  c.featureScaler.stdev = j.at("featureScaler").at("stdev").get<std::vector<double>>();
  c.targetScaler.mean = j.at("targetScaler").at("mean").get<std::vector<double>>();
  c.targetScaler.stdev = j.at("targetScaler").at("stdev").get<std::vector<double>>();
  c.trainFrac = j.at("split").at("train");
  c.valFrac = j.at("split").at("val");
  c.testFrac = j.at("split").at("test");
  c.splitSeed = j.at("split").at("seed");
  c.simCount = j.at("split").at("simCount");
  c.trainTargetMax = j.at("trainTargetMax").get<std::vector<double>>();
  return c;
}

}  // namespace qest::pipeline
