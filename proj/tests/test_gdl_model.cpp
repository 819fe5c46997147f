#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "qest/model/gdl.hpp"

using namespace qest;
using namespace qest::model;
using nn::Mat;
using nn::ParamSet;
using nn::Tape;

namespace {

Mat random_mat(long r, long c, std::mt19937_64& rng, double scale = 0.7) {
  std::normal_distribution<double> dist(0.0, scale);
  Mat m(r, c);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Mat line_adjacency(int n) {
  Mat a = Mat::Identity(n, n);
  for (int i = 0; i + 1 < n; ++i) {
    a(i, i + 1) = 1;
    a(i + 1, i) = 1;
  }
  return a;
}

}  // namespace

TEST_CASE("gat head equals the pairwise equation oracle") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat A = line_adjacency(3);
    const Mat H = random_mat(3, 4, rng);
    const Mat W = random_mat(5, 4, rng);
    const Mat aSrc = random_mat(5, 1, rng);
    const Mat aDst = random_mat(5, 1, rng);

    Tape tape;
    ParamSet p;
    p.add("W", 5, 4) = W;
    p.add("as", 5, 1) = aSrc;
    p.add("ad", 5, 1) = aDst;
    auto [hOut, alpha] = gat_head(tape.constant(H), A, tape.param(p, "W"),
                                  tape.param(p, "as"), tape.param(p, "ad"), 0.2);

    Mat alphaRef;
    Mat ref = oracle::gat_head(H, A, W, aSrc, aDst, 0.2, &alphaRef);
    CHECK((tape.value(hOut) - ref).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((tape.value(alpha) - alphaRef).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("gat attention trivia") {
  std::mt19937_64 rng(7);
  SUBCASE("isolated node: alpha = 1 and h' = tanh(W h)") {
    const Mat A = Mat::Identity(1, 1);
    const Mat H = random_mat(1, 3, rng);
    const Mat W = random_mat(2, 3, rng);
    Tape tape;
    ParamSet p;
    p.add("W", 2, 3) = W;
    p.add("as", 2, 1) = random_mat(2, 1, rng);
    p.add("ad", 2, 1) = random_mat(2, 1, rng);
    auto [hOut, alpha] = gat_head(tape.constant(H), A, tape.param(p, "W"),
                                  tape.param(p, "as"), tape.param(p, "ad"), 0.2);
    CHECK(tape.value(alpha)(0, 0) == doctest::Approx(1.0));
    Mat expected = (W * H.row(0).transpose())
                       .unaryExpr([](double v) { return std::tanh(v); })
                       .transpose();
    CHECK(tape.value(hOut).isApprox(expected, 1e-12));
  }

  SUBCASE("identical fully-connected nodes share attention equally") {
    Mat A = Mat::Ones(2, 2);
    Mat H(2, 3);
    H << 1, -2, 0.5, 1, -2, 0.5;
    Tape tape;
    ParamSet p;
    p.add("W", 2, 3) = random_mat(2, 3, rng);
    p.add("as", 2, 1) = random_mat(2, 1, rng);
    p.add("ad", 2, 1) = random_mat(2, 1, rng);
    auto [hOut, alpha] = gat_head(tape.constant(H), A, tape.param(p, "W"),
                                  tape.param(p, "as"), tape.param(p, "ad"), 0.2);
    (void)hOut;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        CHECK(tape.value(alpha)(i, j) == doctest::Approx(0.5));
  }
}

TEST_CASE("multi-head combinations") {
  std::mt19937_64 rng(55);
  const Mat A = line_adjacency(3);
  const Mat H = random_mat(3, 4, rng);

  SUBCASE("one head reduces to gat_head") {
    ParamSet p;
    p.add("g.h0.W", 6, 4) = random_mat(6, 4, rng);
    p.add("g.h0.att_src", 6, 1) = random_mat(6, 1, rng);
    p.add("g.h0.att_dst", 6, 1) = random_mat(6, 1, rng);
    Tape tape;
    Var multi = gat_multi_head(tape, tape.constant(H), A, p, "g", 1, false, 0.2);
    Tape tape2;
    auto [single, alpha] =
        gat_head(tape2.constant(H), A, tape2.param(p, "g.h0.W"),
                 tape2.param(p, "g.h0.att_src"), tape2.param(p, "g.h0.att_dst"), 0.2);
    (void)alpha;
    CHECK(tape.value(multi).isApprox(tape2.value(single), 1e-12));
  }

  SUBCASE("two identical heads concatenated duplicate the output") {
    ParamSet p;
    const Mat W = random_mat(3, 4, rng);
    const Mat as = random_mat(3, 1, rng);
    const Mat ad = random_mat(3, 1, rng);
    for (int k = 0; k < 2; ++k) {
      const std::string h = "g.h" + std::to_string(k);
      p.add(h + ".W", 3, 4) = W;
      p.add(h + ".att_src", 3, 1) = as;
      p.add(h + ".att_dst", 3, 1) = ad;
    }
    Tape tape;
    Var multi = gat_multi_head(tape, tape.constant(H), A, p, "g", 2, true, 0.2);
    const Mat& v = tape.value(multi);
    CHECK(v.cols() == 6);
    CHECK(v.leftCols(3).isApprox(v.rightCols(3), 1e-12));
  }

  SUBCASE("three random heads averaged match the oracle") {
    ParamSet p;
    for (int k = 0; k < 3; ++k) {
      const std::string h = "g.h" + std::to_string(k);
      p.add(h + ".W", 4, 4) = random_mat(4, 4, rng);
      p.add(h + ".att_src", 4, 1) = random_mat(4, 1, rng);
      p.add(h + ".att_dst", 4, 1) = random_mat(4, 1, rng);
    }
    Tape tape;
    Var multi = gat_multi_head(tape, tape.constant(H), A, p, "g", 3, false, 0.2);
    Mat ref = oracle::gat_multi_head(H, A, p, "g", 3, false, 0.2);
    CHECK((tape.value(multi) - ref).cwiseAbs().maxCoeff() < 1e-10);
  }
}

namespace {

ParamSet gru_params(long in, long hidden, std::mt19937_64* rng) {
  ParamSet p;
  for (const char* g : {"", "_r", "_z"}) {
    p.add(std::string("enc.W") + g, hidden, in) =
        rng ? random_mat(hidden, in, *rng) : Mat::Zero(hidden, in);
    p.add(std::string("enc.U") + g, hidden, hidden) =
        rng ? random_mat(hidden, hidden, *rng) : Mat::Zero(hidden, hidden);
    p.add(std::string("enc.b") + g, 1, hidden, false) =
        rng ? random_mat(1, hidden, *rng, 0.3) : Mat::Zero(1, hidden);
  }
  return p;
}

}  // namespace

TEST_CASE("gru step") {
  SUBCASE("all-zero parameters: h stays 0 from 0, halves otherwise") {
    ParamSet p = gru_params(3, 4, nullptr);
    Tape tape;
    Var x = tape.constant(Mat::Zero(2, 3));
    Var h0 = tape.constant(Mat::Zero(2, 4));
    Var h1 = gru_step(tape, p, "enc", x, h0);
    CHECK(tape.value(h1).isZero());

    Mat v = Mat::Constant(2, 4, 0.8);
    Var hv = gru_step(tape, p, "enc", x, tape.constant(v));
    CHECK(tape.value(hv).isApprox(0.5 * v, 1e-12));  // z = sigmoid(0) = 0.5
  }

  SUBCASE("random parameters match the four-equation oracle") {
    std::mt19937_64 rng(202);
    for (int trial = 0; trial < 20; ++trial) {
      ParamSet p = gru_params(3, 4, &rng);
      const Mat X = random_mat(5, 3, rng);
      const Mat H = random_mat(5, 4, rng);
      Tape tape;
      Var h = gru_step(tape, p, "enc", tape.constant(X), tape.constant(H));
      Mat ref = oracle::gru_step(X, H, p, "enc");
      CHECK((tape.value(h) - ref).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  SUBCASE("outputs stay in the convex hull of previous state and candidate") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 100; ++trial) {
      ParamSet p = gru_params(2, 3, &rng);
      const Mat X = random_mat(4, 2, rng, 2.0);
      const Mat H = random_mat(4, 3, rng, 2.0);
      Tape tape;
      Var h = gru_step(tape, p, "enc", tape.constant(X), tape.constant(H));
      const Mat& out = tape.value(h);
      for (long i = 0; i < out.rows(); ++i)
        for (long j = 0; j < out.cols(); ++j)
          CHECK(std::abs(out(i, j)) <= std::max(std::abs(H(i, j)), 1.0) + 1e-12);
    }
  }
}

TEST_CASE("encode folds gru steps from zero state") {
  std::mt19937_64 rng(303);
  ParamSet p = gru_params(3, 4, &rng);

  SUBCASE("zero inputs and zero params give all-zero states") {
    ParamSet zero = gru_params(3, 4, nullptr);
    Tape tape;
    std::vector<Var> xs = {tape.constant(Mat::Zero(2, 3)),
                           tape.constant(Mat::Zero(2, 3))};
    auto hs = encode(tape, zero, "enc", xs);
    for (const auto& h : hs) CHECK(tape.value(h).isZero());
  }

  SUBCASE("T = 3 equals the manual unroll") {
    std::vector<Mat> X = {random_mat(4, 3, rng), random_mat(4, 3, rng),
                          random_mat(4, 3, rng)};
    Tape tape;
    std::vector<Var> xs;
    for (const auto& x : X) xs.push_back(tape.constant(x));
    auto hs = encode(tape, p, "enc", xs);
    REQUIRE(hs.size() == 3);

    Mat h = Mat::Zero(4, 4);
    for (int t = 0; t < 3; ++t) {
      h = oracle::gru_step(X[static_cast<size_t>(t)], h, p, "enc");
      CHECK((tape.value(hs[static_cast<size_t>(t)]) - h).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  SUBCASE("T = 1 is a single step") {
    const Mat X = random_mat(4, 3, rng);
    Tape tape;
    auto hs = encode(tape, p, "enc", {tape.constant(X)});
    Mat ref = oracle::gru_step(X, Mat::Zero(4, 4), p, "enc");
    CHECK((tape.value(hs[0]) - ref).cwiseAbs().maxCoeff() < 1e-10);
  }
}

namespace {

ParamSet attention_params(long hidden, std::mt19937_64& rng) {
  ParamSet p;
  p.add("att.Wa", hidden, hidden) = random_mat(hidden, hidden, rng);
  p.add("att.Ua", hidden, hidden) = random_mat(hidden, hidden, rng);
  p.add("att.va", hidden, 1) = random_mat(hidden, 1, rng);
  return p;
}

}  // namespace

TEST_CASE("attention context") {
  std::mt19937_64 rng(404);
  ParamSet p = attention_params(4, rng);

  SUBCASE("window of one: alpha = 1 and context = h_1") {
    const Mat H1 = random_mat(3, 4, rng);
    Tape tape;
    auto out = attention_context(tape, p, "att", tape.constant(random_mat(3, 4, rng)),
                                 {tape.constant(H1)}, 1);
    CHECK(tape.value(out.context).isApprox(H1, 1e-12));
    CHECK(tape.value(out.attention).isApprox(Mat::Ones(3, 1), 1e-12));
  }

  SUBCASE("two identical states split attention evenly") {
    const Mat H1 = random_mat(3, 4, rng);
    Tape tape;
    Var h = tape.constant(H1);
    auto out = attention_context(tape, p, "att", tape.constant(random_mat(3, 4, rng)),
                                 {h, h}, 2);
    CHECK(tape.value(out.attention).isApprox(Mat::Constant(3, 2, 0.5), 1e-12));
    CHECK(tape.value(out.context).isApprox(H1, 1e-12));
  }

  SUBCASE("window of three matches the row oracle") {
    const Mat S = random_mat(3, 4, rng);
    std::vector<Mat> H = {random_mat(3, 4, rng), random_mat(3, 4, rng),
                          random_mat(3, 4, rng)};
    Tape tape;
    std::vector<Var> hs;
    for (const auto& h : H) hs.push_back(tape.constant(h));
    auto out = attention_context(tape, p, "att", tape.constant(S), hs, 3);
    for (long row = 0; row < 3; ++row) {
      Eigen::RowVectorXd alphaRef;
      auto cRef = oracle::attention_row(S.row(row), H, 3, row, p.value("att.Wa"),
                                        p.value("att.Ua"), p.value("att.va"),
                                        &alphaRef);
      CHECK((tape.value(out.context).row(row) - cRef).cwiseAbs().maxCoeff() < 1e-10);
      CHECK((tape.value(out.attention).row(row) - alphaRef).cwiseAbs().maxCoeff() <
            1e-10);
    }
  }
}

namespace {

ParamSet decoder_params(long hidden, long outputs, std::mt19937_64* rng) {
  ParamSet p;
  for (const char* g : {"", "_r", "_z"}) {
    p.add(std::string("dec.W") + g, hidden, outputs) =
        rng ? random_mat(hidden, outputs, *rng) : Mat::Zero(hidden, outputs);
    p.add(std::string("dec.U") + g, hidden, hidden) =
        rng ? random_mat(hidden, hidden, *rng) : Mat::Zero(hidden, hidden);
    p.add(std::string("dec.C") + g, hidden, hidden) =
        rng ? random_mat(hidden, hidden, *rng) : Mat::Zero(hidden, hidden);
    p.add(std::string("dec.b") + g, 1, hidden, false) =
        rng ? random_mat(1, hidden, *rng, 0.3) : Mat::Zero(1, hidden);
  }
  p.add("out.Wo", outputs, outputs) =
      rng ? random_mat(outputs, outputs, *rng) : Mat::Zero(outputs, outputs);
  p.add("out.Uo", outputs, hidden) =
      rng ? random_mat(outputs, hidden, *rng) : Mat::Zero(outputs, hidden);
  p.add("out.Co", outputs, hidden) =
      rng ? random_mat(outputs, hidden, *rng) : Mat::Zero(outputs, hidden);
  p.add("out.bo", 1, outputs, false) =
      rng ? random_mat(1, outputs, *rng, 0.3) : Mat::Zero(1, outputs);
  return p;
}

}  // namespace

TEST_CASE("decoder step") {
  SUBCASE("zero parameters: y = 0 and s halves") {
    ParamSet p = decoder_params(4, 2, nullptr);
    Tape tape;
    Mat s0 = Mat::Constant(3, 4, 0.6);
    auto out = decoder_step(tape, p, tape.constant(Mat::Zero(3, 2)),
                            tape.constant(s0), tape.constant(Mat::Zero(3, 4)));
    CHECK(tape.value(out.y).isZero());
    CHECK(tape.value(out.s).isApprox(0.5 * s0, 1e-12));
  }

  SUBCASE("random parameters match the five-equation oracle") {
    std::mt19937_64 rng(505);
    for (int trial = 0; trial < 20; ++trial) {
      ParamSet p = decoder_params(4, 2, &rng);
      const Mat Y = random_mat(3, 2, rng);
      const Mat S = random_mat(3, 4, rng);
      const Mat C = random_mat(3, 4, rng);
      Tape tape;
      auto out = decoder_step(tape, p, tape.constant(Y), tape.constant(S),
                              tape.constant(C));
      for (long row = 0; row < 3; ++row) {
        Eigen::RowVectorXd yRef, sRef;
        oracle::decoder_row(Y.row(row), S.row(row), C.row(row), p, &yRef, &sRef);
        CHECK((tape.value(out.y).row(row) - yRef).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((tape.value(out.s).row(row) - sRef).cwiseAbs().maxCoeff() < 1e-10);
      }
    }
  }

  SUBCASE("zero context reduces to a plain gru update of the state") {
    std::mt19937_64 rng(606);
    ParamSet p = decoder_params(4, 2, &rng);
    const Mat Y = random_mat(3, 2, rng);
    const Mat S = random_mat(3, 4, rng);
    Tape tape;
    auto out = decoder_step(tape, p, tape.constant(Y), tape.constant(S),
                            tape.constant(Mat::Zero(3, 4)));
    // Same equations with the context terms dropped.
    ParamSet noC = decoder_params(4, 2, nullptr);
    for (const char* g : {"", "_r", "_z"}) {
      noC.value(std::string("dec.W") + g) = p.value(std::string("dec.W") + g);
      noC.value(std::string("dec.U") + g) = p.value(std::string("dec.U") + g);
      noC.value(std::string("dec.b") + g) = p.value(std::string("dec.b") + g);
    }
    noC.value("out.Wo") = p.value("out.Wo");
    noC.value("out.Uo") = p.value("out.Uo");
    noC.value("out.bo") = p.value("out.bo");
    for (long row = 0; row < 3; ++row) {
      Eigen::RowVectorXd yRef, sRef;
      oracle::decoder_row(Y.row(row), S.row(row), Eigen::RowVectorXd::Zero(4), noC,
                          &yRef, &sRef);
      CHECK((tape.value(out.s).row(row) - sRef).cwiseAbs().maxCoeff() < 1e-10);
      CHECK((tape.value(out.y).row(row) - yRef).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

namespace {

ModelConfig micro_config(int features = 2) {
  ModelConfig cfg;
  cfg.inputFeatures = features;
  cfg.gatFeatures = 4;
  cfg.gat1Heads = 2;
  cfg.gat1Concat = true;
  cfg.gat2Heads = 2;
  cfg.gat2Concat = false;
  cfg.denseWidth = 4;
  cfg.hiddenWidth = 4;
  cfg.outputs = 2;
  return cfg;
}

nn::Tensor random_tensor(std::vector<long> shape, std::mt19937_64& rng,
                         double scale = 1.0) {
  nn::Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& v : t.values) v = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("model forward shapes and zero behavior") {
  std::mt19937_64 rng(808);
  const int lanes = 5;
  Mat A = line_adjacency(lanes);

  SUBCASE("output shape follows sims x T x N x 2") {
    auto model = build_model(micro_config(8), 1);
    auto X = random_tensor({2, 12, lanes, 8}, rng);
    auto Y = model_forward(model, X, A);
    CHECK(Y.shape == std::vector<long>{2, 12, lanes, 2});
  }

  SUBCASE("zero parameters give zero predictions") {
    auto model = build_model(micro_config(3), 1);
    for (const auto& name : model.params.names())
      model.params.value(name).setZero();
    auto X = random_tensor({1, 4, lanes, 3}, rng);
    auto Y = model_forward(model, X, A);
    for (double v : Y.values) CHECK(v == 0.0);
  }
}

TEST_CASE("micro model forward equals the composed oracle") {
  std::mt19937_64 rng(909);
  auto model = build_model(micro_config(2), 3);
  const int lanes = 2;
  Mat A = Mat::Ones(lanes, lanes);
  auto X = random_tensor({1, 3, lanes, 2}, rng);

  auto pred = model_forward(model, X, A);

  // Composed brute-force route.
  const ParamSet& p = model.params;
  std::vector<Mat> seq;
  for (long t = 0; t < 3; ++t) {
    Mat xt(lanes, 2);
    for (int l = 0; l < lanes; ++l)
      for (int f = 0; f < 2; ++f) xt(l, f) = X.at(0, t, l, f);
    Mat g1 = oracle::gat_multi_head(xt, A, p, "gat1", 2, true, 0.2);
    Mat g2 = oracle::gat_multi_head(g1, A, p, "gat2", 2, false, 0.2);
    Mat d1 = (g1.rows() > 0 ? Mat(g2 * p.value("dense1.W").transpose()) : Mat());
    d1.rowwise() += p.value("dense1.b").row(0);
    d1 = d1.unaryExpr([](double v) { return v > 0 ? v : 0.0; });
    Mat d2 = d1 * p.value("dense2.W").transpose();
    d2.rowwise() += p.value("dense2.b").row(0);
    d2 = d2.unaryExpr([](double v) { return v > 0 ? v : 0.0; });
    seq.push_back(d2);
  }
  std::vector<Mat> hs;
  Mat h = Mat::Zero(lanes, 4);
  for (const Mat& x : seq) {
    h = oracle::gru_step(x, h, p, "enc");
    hs.push_back(h);
  }
  Mat s = (hs[0] * p.value("dec.Ws").transpose())
              .unaryExpr([](double v) { return std::tanh(v); });
  Mat y = Mat::Zero(lanes, 2);
  for (size_t i = 1; i <= hs.size(); ++i) {
    Mat yNext(lanes, 2), sNext(lanes, 4);
    for (int row = 0; row < lanes; ++row) {
      auto c = oracle::attention_row(s.row(row), hs, i, row, p.value("att.Wa"),
                                     p.value("att.Ua"), p.value("att.va"));
      Eigen::RowVectorXd yR, sR;
      oracle::decoder_row(y.row(row), s.row(row), c, p, &yR, &sR);
      yNext.row(row) = yR;
      sNext.row(row) = sR;
    }
    y = yNext;
    s = sNext;
    for (int l = 0; l < lanes; ++l)
      for (int o = 0; o < 2; ++o)
        CHECK(pred.at(0, static_cast<long>(i) - 1, l, o) ==
              doctest::Approx(y(l, o)).epsilon(1e-10));
  }
}

TEST_CASE("attention rows are convex combinations masked by the adjacency") {
  std::mt19937_64 rng(111);
  for (int seed = 0; seed < 100; ++seed) {
    const int n = 3 + static_cast<int>(rng() % 5);
    Mat A = Mat::Identity(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (i != j && rng() % 3 == 0) A(i, j) = 1;
    Tape tape;
    ParamSet p;
    p.add("W", 3, 4) = random_mat(3, 4, rng);
    p.add("as", 3, 1) = random_mat(3, 1, rng);
    p.add("ad", 3, 1) = random_mat(3, 1, rng);
    auto [hOut, alpha] =
        gat_head(tape.constant(random_mat(n, 4, rng)), A, tape.param(p, "W"),
                 tape.param(p, "as"), tape.param(p, "ad"), 0.2);
    (void)hOut;
    const Mat& al = tape.value(alpha);
    for (int i = 0; i < n; ++i) {
      CHECK(al.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
      for (int j = 0; j < n; ++j) {
        CHECK(al(i, j) >= 0.0);
        if (A(i, j) == 0.0) CHECK(al(i, j) == 0.0);
      }
    }
  }
}

TEST_CASE("consistent lane permutation permutes gat outputs") {
  std::mt19937_64 rng(222);
  const int n = 5;
  Mat A = line_adjacency(n);
  Mat H = random_mat(n, 3, rng);
  ParamSet p;
  p.add("W", 4, 3) = random_mat(4, 3, rng);
  p.add("as", 4, 1) = random_mat(4, 1, rng);
  p.add("ad", 4, 1) = random_mat(4, 1, rng);

  std::vector<int> perm = {3, 0, 4, 1, 2};
  Mat P = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i) P(i, perm[static_cast<size_t>(i)]) = 1.0;
  Mat Hp = P * H;
  Mat Ap = P * A * P.transpose();

  Tape t1, t2;
  auto [base, a1] = gat_head(t1.constant(H), A, t1.param(p, "W"), t1.param(p, "as"),
                             t1.param(p, "ad"), 0.2);
  (void)a1;
  auto [permuted, a2] = gat_head(t2.constant(Hp), Ap, t2.param(p, "W"),
                                 t2.param(p, "as"), t2.param(p, "ad"), 0.2);
  (void)a2;
  CHECK((t2.value(permuted) - P * t1.value(base)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("temporal causality: future inputs cannot change past outputs") {
  std::mt19937_64 rng(333);
  auto model = build_model(micro_config(2), 5);
  const int lanes = 3;
  Mat A = line_adjacency(lanes);
  auto X = random_tensor({1, 6, lanes, 2}, rng);
  auto base = model_forward(model, X, A);

  auto Xp = X;
  for (long t = 4; t < 6; ++t)
    for (int l = 0; l < lanes; ++l)
      for (int f = 0; f < 2; ++f) Xp.at(0, t, l, f) += 3.0 + l + f;
  auto perturbed = model_forward(model, Xp, A);

  for (long t = 0; t < 4; ++t)
    for (int l = 0; l < lanes; ++l)
      for (int o = 0; o < 2; ++o)
        CHECK(base.at(0, t, l, o) == doctest::Approx(perturbed.at(0, t, l, o)).epsilon(1e-13));
  bool futureChanged = false;
  for (long t = 4; t < 6; ++t)
    for (int l = 0; l < lanes; ++l)
      for (int o = 0; o < 2; ++o)
        if (std::abs(base.at(0, t, l, o) - perturbed.at(0, t, l, o)) > 1e-9)
          futureChanged = true;
  CHECK(futureChanged);
}

TEST_CASE("end-to-end gradients pass the finite-difference check") {
  std::mt19937_64 rng(444);
  auto model = build_model(micro_config(2), 7);
  const int lanes = 2;
  Mat A = Mat::Ones(lanes, lanes);
  auto X = random_tensor({1, 3, lanes, 2}, rng);
  auto Y = random_tensor({1, 3, lanes, 2}, rng);
  const double lambda = 1e-3;

  model.params.zero_grads();
  std::mt19937_64 dropRng(1);
  model::model_loss_and_grads(model, X, Y, A, lambda, 0.0, dropRng);
  auto loss = [&]() { return model::model_loss(model, X, Y, A, lambda); };
  CHECK(nn::grad_check(loss, model.params, 1e-5) < 1e-3);
}

TEST_CASE("loss behaviors") {
  std::mt19937_64 rng(555);
  auto model = build_model(micro_config(2), 11);
  const int lanes = 2;
  Mat A = Mat::Ones(lanes, lanes);
  auto X = random_tensor({1, 3, lanes, 2}, rng);

  SUBCASE("perfect predictions and no penalty give zero loss") {
    auto pred = model_forward(model, X, A);
    CHECK(model_loss(model, X, pred, A, 0.0) == doctest::Approx(0.0).epsilon(1e-12));
    std::mt19937_64 dropRng(2);
    model.params.zero_grads();
    const double l = model_loss_and_grads(model, X, pred, A, 0.0, 0.0, dropRng);
    CHECK(l == doctest::Approx(0.0).epsilon(1e-12));
    double gmax = 0.0;
    for (const auto& name : model.params.names())
      gmax = std::max(gmax, model.params.grad(name).cwiseAbs().maxCoeff());
    CHECK(gmax < 1e-9);
  }

  SUBCASE("zero data with a penalty reduces to the penalty") {
    for (const auto& name : model.params.names())
      if (!model.params.is_weight(name)) model.params.value(name).setZero();
    nn::Tensor zeroX({1, 2, lanes, 2});
    nn::Tensor zeroY({1, 2, lanes, 2});
    const double lambda = 0.01;
    // All-zero input through zeroed biases still gives zero predictions.
    const double expected = nn::l2_penalty(model.params, lambda);
    CHECK(model_loss(model, zeroX, zeroY, A, lambda) ==
          doctest::Approx(expected).epsilon(1e-9));
  }
}
