#include "qest/model/gdl.hpp"

#include "json.hpp"

namespace qest::model {

using nlohmann::json;
using namespace nn;

std::string ModelConfig::to_json() const {
  json j;
  j["inputFeatures"] = inputFeatures;
  j["gatFeatures"] = gatFeatures;
  j["gat1Heads"] = gat1Heads;
  j["gat1Concat"] = gat1Concat;
  j["gat2Heads"] = gat2Heads;
  j["gat2Concat"] = gat2Concat;
  j["denseWidth"] = denseWidth;
  j["hiddenWidth"] = hiddenWidth;
  j["outputs"] = outputs;
  j["attLeakSlope"] = attLeakSlope;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  c.inputFeatures = j.at("inputFeatures");
  c.gatFeatures = j.at("gatFeatures");
  c.gat1Heads = j.at("gat1Heads");
  c.gat1Concat = j.at("gat1Concat");
  c.gat2Heads = j.at("gat2Heads");
  c.gat2Concat = j.at("gat2Concat");
  c.denseWidth = j.at("denseWidth");
  c.hiddenWidth = j.at("hiddenWidth");
  c.outputs = j.at("outputs");
  c.attLeakSlope = j.at("attLeakSlope");
  return c;
}

namespace {

int head_width(int gatFeatures, int heads, bool concat) {
  if (!concat) return gatFeatures;
  if (gatFeatures % heads != 0)
    throw ShapeMismatch("gat width must divide evenly across concatenated heads");
  return gatFeatures / heads;
}

void add_gat_params(ParamSet& p, const std::string& prefix, int inWidth,
                    int gatFeatures, int heads, bool concat, std::mt19937_64& rng) {
  const int fw = head_width(gatFeatures, heads, concat);
  for (int k = 0; k < heads; ++k) {
    const std::string h = prefix + ".h" + std::to_string(k);
    p.add_glorot(h + ".W", fw, inWidth, rng);
    p.add_glorot(h + ".att_src", fw, 1, rng);
    p.add_glorot(h + ".att_dst", fw, 1, rng);
  }
}

void add_gru_params(ParamSet& p, const std::string& prefix, int inWidth,
                    int hidden, std::mt19937_64& rng) {
  for (const char* gate : {"", "_r", "_z"}) {
    p.add_glorot(prefix + ".W" + gate, hidden, inWidth, rng);
    p.add_glorot(prefix + ".U" + gate, hidden, hidden, rng);
    p.add(prefix + ".b" + gate, 1, hidden, false);
  }
}

}  // namespace

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model m;
  m.cfg = cfg;
  std::mt19937_64 rng(seed);
  ParamSet& p = m.params;

  add_gat_params(p, "gat1", cfg.inputFeatures, cfg.gatFeatures, cfg.gat1Heads,
                 cfg.gat1Concat, rng);
  add_gat_params(p, "gat2", cfg.gatFeatures, cfg.gatFeatures, cfg.gat2Heads,
                 cfg.gat2Concat, rng);

  // Small positive bias keeps rectified units off the exact kink at init.
  p.add_glorot("dense1.W", cfg.denseWidth, cfg.gatFeatures, rng);
  p.add("dense1.b", 1, cfg.denseWidth, false).setConstant(0.01);
  p.add_glorot("dense2.W", cfg.denseWidth, cfg.denseWidth, rng);
  p.add("dense2.b", 1, cfg.denseWidth, false).setConstant(0.01);

  add_gru_params(p, "enc", cfg.denseWidth, cfg.hiddenWidth, rng);

  p.add_glorot("att.Wa", cfg.hiddenWidth, cfg.hiddenWidth, rng);
  p.add_glorot("att.Ua", cfg.hiddenWidth, cfg.hiddenWidth, rng);
  p.add_glorot("att.va", cfg.hiddenWidth, 1, rng);

  // Decoder gates see the previous output, previous state and the context.
  for (const char* gate : {"", "_r", "_z"}) {
    p.add_glorot(std::string("dec.W") + gate, cfg.hiddenWidth, cfg.outputs, rng);
    p.add_glorot(std::string("dec.U") + gate, cfg.hiddenWidth, cfg.hiddenWidth, rng);
    p.add_glorot(std::string("dec.C") + gate, cfg.hiddenWidth, cfg.hiddenWidth, rng);
    p.add(std::string("dec.b") + gate, 1, cfg.hiddenWidth, false);
  }
  p.add_glorot("dec.Ws", cfg.hiddenWidth, cfg.hiddenWidth, rng);
  p.add_glorot("out.Wo", cfg.outputs, cfg.outputs, rng);
  p.add_glorot("out.Uo", cfg.outputs, cfg.hiddenWidth, rng);
  p.add_glorot("out.Co", cfg.outputs, cfg.hiddenWidth, rng);
  p.add("out.bo", 1, cfg.outputs, false);
  return m;
}

GatHeadOut gat_head_pre(Var H, const Mat& A, Var W, Var attSrc, Var attDst,
                        double leakSlope) {
  nn::Tape& t = *H.tape;
  if (t.value(H).rows() != A.rows() || A.rows() != A.cols())
    throw ShapeMismatch("gat_head: adjacency shape");
  Var wh = matmul_nt(H, W);              // N x F'
  Var src = matmul(wh, attSrc);          // N x 1, a_src^T W h_i
  Var dst = matmul(wh, attDst);          // N x 1, a_dst^T W h_j
  Var e = leaky_relu(outer_sum(src, dst), leakSlope);
  Var alpha = softmax_rows(e, &A);
  Var pre = matmul(alpha, wh);
  return {pre, alpha};
}

std::pair<Var, Var> gat_head(Var H, const Mat& A, Var W, Var attSrc, Var attDst,
                             double leakSlope) {
  GatHeadOut out = gat_head_pre(H, A, W, attSrc, attDst, leakSlope);
  return {tanh_v(out.preActivation), out.attention};
}

Var gat_multi_head(nn::Tape& tape, Var H, const Mat& A, ParamSet& params,
                   const std::string& prefix, int heads, bool concat,
                   double leakSlope) {
  std::vector<Var> parts;
  Var avg{};
  for (int k = 0; k < heads; ++k) {
    const std::string h = prefix + ".h" + std::to_string(k);
    Var W = tape.param(params, h + ".W");
    Var aSrc = tape.param(params, h + ".att_src");
    Var aDst = tape.param(params, h + ".att_dst");
    if (concat) {
      parts.push_back(gat_head(H, A, W, aSrc, aDst, leakSlope).first);
    } else {
      GatHeadOut out = gat_head_pre(H, A, W, aSrc, aDst, leakSlope);
      avg = k == 0 ? out.preActivation : add(avg, out.preActivation);
    }
  }
  if (concat) return concat_cols(parts);
  return tanh_v(scale(avg, 1.0 / static_cast<double>(heads)));
}

Var gru_step(nn::Tape& tape, ParamSet& params, const std::string& prefix, Var x,
             Var hPrev) {
  auto gate = [&](const char* g, Var rhMix) {
    Var W = tape.param(params, prefix + ".W" + g);
    Var U = tape.param(params, prefix + ".U" + g);
    Var b = tape.param(params, prefix + ".b" + g);
    return add_rowvec(add(matmul_nt(x, W), matmul_nt(rhMix, U)), b);
  };
  Var r = sigmoid_v(gate("_r", hPrev));
  Var z = sigmoid_v(gate("_z", hPrev));
  Var hTilde = tanh_v(gate("", hadamard(r, hPrev)));
  // h = (1 - z) o hPrev + z o hTilde
  return add(hadamard(affine(z, -1.0, 1.0), hPrev), hadamard(z, hTilde));
}

std::vector<Var> encode(nn::Tape& tape, ParamSet& params, const std::string& prefix,
                        const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeMismatch("encode: empty sequence");
  const auto& first = tape.value(xs[0]);
  const long hidden = params.value(prefix + ".W").rows();
  Var h = tape.constant(Mat::Zero(first.rows(), hidden));
  std::vector<Var> out;
  out.reserve(xs.size());
  for (Var x : xs) {
    h = gru_step(tape, params, prefix, x, h);
    out.push_back(h);
  }
  return out;
}

AttnOut attention_context(nn::Tape& tape, ParamSet& params, const std::string& prefix,
                          Var sPrev, const std::vector<Var>& encoderStates,
                          size_t upTo, std::vector<Var>* cache) {
  if (upTo == 0 || upTo > encoderStates.size())
    throw ShapeMismatch("attention_context: bad window");
  Var Wa = tape.param(params, prefix + ".Wa");
  Var Ua = tape.param(params, prefix + ".Ua");
  Var va = tape.param(params, prefix + ".va");
  Var sTerm = matmul_nt(sPrev, Wa);  // N x H
  std::vector<Var> localCache;
  std::vector<Var>& uTerms = cache ? *cache : localCache;
  while (uTerms.size() < upTo)
    uTerms.push_back(matmul_nt(encoderStates[uTerms.size()], Ua));
  std::vector<Var> energies;
  energies.reserve(upTo);
  for (size_t j = 0; j < upTo; ++j) {
    Var mix = tanh_v(add(sTerm, uTerms[j]));
    energies.push_back(matmul(mix, va));  // N x 1
  }
  Var alpha = softmax_rows(concat_cols(energies));
  std::vector<Var> window(encoderStates.begin(),
                          encoderStates.begin() + static_cast<long>(upTo));
  return {weighted_row_mix(window, alpha), alpha};
}

DecoderOut decoder_step(nn::Tape& tape, ParamSet& params, Var yPrev, Var sPrev,
                        Var context) {
  auto gate = [&](const char* g, Var sMix) {
    Var W = tape.param(params, std::string("dec.W") + g);
    Var U = tape.param(params, std::string("dec.U") + g);
    Var C = tape.param(params, std::string("dec.C") + g);
    Var b = tape.param(params, std::string("dec.b") + g);
    return add_rowvec(
        add(add(matmul_nt(yPrev, W), matmul_nt(sMix, U)), matmul_nt(context, C)), b);
  };
  Var r = sigmoid_v(gate("_r", sPrev));
  Var z = sigmoid_v(gate("_z", sPrev));
  Var sTilde = tanh_v(gate("", hadamard(r, sPrev)));
  Var s = add(hadamard(affine(z, -1.0, 1.0), sPrev), hadamard(z, sTilde));

  // Linear output layer (regression; no output nonlinearity).
  Var Wo = tape.param(params, "out.Wo");
  Var Uo = tape.param(params, "out.Uo");
  Var Co = tape.param(params, "out.Co");
  Var bo = tape.param(params, "out.bo");
  Var y = add_rowvec(
      add(add(matmul_nt(yPrev, Wo), matmul_nt(sPrev, Uo)), matmul_nt(context, Co)),
      bo);
  return {y, s};
}

std::vector<Var> forward_sequence(nn::Tape& tape, Model& model,
                                  const std::vector<Mat>& X, const Mat& A,
                                  const ForwardOptions& opts) {
  ParamSet& p = model.params;
  const ModelConfig& cfg = model.cfg;
  auto maybe_dropout = [&](Var v) {
    if (!opts.training || opts.dropoutRate <= 0.0 || opts.rng == nullptr) return v;
    return dropout_v(v, opts.dropoutRate, *opts.rng, true);
  };

  std::vector<Var> seq;
  seq.reserve(X.size());
  for (const Mat& xt : X) {
    Var h = tape.constant(xt);
    h = maybe_dropout(gat_multi_head(tape, h, A, p, "gat1", cfg.gat1Heads,
                                     cfg.gat1Concat, cfg.attLeakSlope));
    h = maybe_dropout(gat_multi_head(tape, h, A, p, "gat2", cfg.gat2Heads,
                                     cfg.gat2Concat, cfg.attLeakSlope));
    Var d1 = relu(add_rowvec(matmul_nt(h, tape.param(p, "dense1.W")),
                             tape.param(p, "dense1.b")));
    d1 = maybe_dropout(d1);
    Var d2 = relu(add_rowvec(matmul_nt(d1, tape.param(p, "dense2.W")),
                             tape.param(p, "dense2.b")));
    seq.push_back(maybe_dropout(d2));
  }

  std::vector<Var> encoded = encode(tape, p, "enc", seq);

  const long n = tape.value(encoded[0]).rows();
  Var s = tanh_v(matmul_nt(encoded[0], tape.param(p, "dec.Ws")));
  Var y = tape.constant(Mat::Zero(n, cfg.outputs));
  std::vector<Var> outputs;
  std::vector<Var> attnCache;
  outputs.reserve(encoded.size());
  for (size_t i = 1; i <= encoded.size(); ++i) {
    AttnOut att = attention_context(tape, p, "att", s, encoded, i, &attnCache);
    DecoderOut dec = decoder_step(tape, p, y, s, att.context);
    outputs.push_back(dec.y);
    y = dec.y;
    s = dec.s;
  }
  return outputs;
}

namespace {

std::vector<Mat> slice_sim(const nn::Tensor& X, long sim) {
  X.require_rank(4);
  std::vector<Mat> out;
  out.reserve(static_cast<size_t>(X.dim(1)));
  for (long t = 0; t < X.dim(1); ++t) {
    Mat m(X.dim(2), X.dim(3));
    for (long lane = 0; lane < X.dim(2); ++lane)
      for (long f = 0; f < X.dim(3); ++f) m(lane, f) = X.at(sim, t, lane, f);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

nn::Tensor model_forward(Model& model, const nn::Tensor& X, const Mat& A) {
  X.require_rank(4);
  nn::Tensor out({X.dim(0), X.dim(1), X.dim(2), model.cfg.outputs});
  for (long sim = 0; sim < X.dim(0); ++sim) {
    nn::Tape tape;
    ForwardOptions opts;
    auto ys = forward_sequence(tape, model, slice_sim(X, sim), A, opts);
    for (long t = 0; t < static_cast<long>(ys.size()); ++t) {
      const Mat& y = tape.value(ys[static_cast<size_t>(t)]);
      for (long lane = 0; lane < y.rows(); ++lane)
        for (long o = 0; o < y.cols(); ++o) out.at(sim, t, lane, o) = y(lane, o);
    }
  }
  return out;
}

namespace {

double accumulate_loss(Model& model, const nn::Tensor& X, const nn::Tensor& Y,
                       const Mat& A, double lambda, double dropoutRate,
                       std::mt19937_64* rng, bool withGrads) {
  X.require_rank(4);
  Y.require_rank(4);
  if (Y.dim(0) != X.dim(0) || Y.dim(1) != X.dim(1) || Y.dim(2) != X.dim(2))
    throw ShapeMismatch("loss: X/Y leading dims differ");
  const long sims = X.dim(0);
  double total = 0.0;
  for (long sim = 0; sim < sims; ++sim) {
    nn::Tape tape;
    ForwardOptions opts;
    opts.dropoutRate = dropoutRate;
    opts.training = rng != nullptr && dropoutRate > 0.0;
    opts.rng = rng;
    auto ys = forward_sequence(tape, model, slice_sim(X, sim), A, opts);
    Var lossSum{};
    for (long t = 0; t < static_cast<long>(ys.size()); ++t) {
      Mat target(Y.dim(2), Y.dim(3));
      for (long lane = 0; lane < Y.dim(2); ++lane)
        for (long o = 0; o < Y.dim(3); ++o) target(lane, o) = Y.at(sim, t, lane, o);
      Var l = mse_against(ys[static_cast<size_t>(t)], target);
      lossSum = t == 0 ? l : add(lossSum, l);
    }
    Var simLoss = scale(lossSum, 1.0 / static_cast<double>(ys.size()));
    Var scaled = scale(simLoss, 1.0 / static_cast<double>(sims));
    total += scalar_value(scaled);
    if (withGrads) tape.backward(scaled);
  }
  total += l2_penalty(model.params, lambda);
  if (withGrads) add_l2_gradients(model.params, lambda);
  return total;
}

}  // namespace

double model_loss_and_grads(Model& model, const nn::Tensor& X, const nn::Tensor& Y,
                            const Mat& A, double lambda, double dropoutRate,
                            std::mt19937_64& rng) {
  return accumulate_loss(model, X, Y, A, lambda, dropoutRate, &rng, true);
}

double model_loss(Model& model, const nn::Tensor& X, const nn::Tensor& Y, const Mat& A,
                  double lambda) {
  return accumulate_loss(model, X, Y, A, lambda, 0.0, nullptr, false);
}

}  // namespace qest::model
