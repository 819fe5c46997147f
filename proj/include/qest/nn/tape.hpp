#pragma once

#include <Eigen/Dense>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qest/nn/params.hpp"

namespace qest::nn {

class Tape;

/// Handle to one node of a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

/// Reverse-mode differentiation tape over dense matrices. One tape records
/// one forward pass; backward() fills parameter gradients.
class Tape {
 public:
  Var constant(Mat value);
  Var param(ParamSet& params, const std::string& name);
  Var make(Mat value, bool needGrad);
  void set_back(Var v, std::function<void(Tape&)> back);

  const Mat& value(Var v) const { return node_value(v.id); }
  const Mat& node_value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool needs_grad(Var v) const { return node_needs_grad(v.id); }
  bool node_needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needGrad; }
  /// Gradient slot of a node, zero-allocated on first use.
  Mat& grad_of(int id);

  /// Seeds d(loss) = 1 and accumulates gradients into every bound ParamSet.
  void backward(Var loss);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;  // empty until touched during backward
    bool needGrad = false;
    std::function<void(Tape&)> back;
    ParamSet* owner = nullptr;  // set on parameter leaves
    std::string paramName;
  };
  std::vector<Node> nodes_;
};

// Expression-building free functions. Rows are entities (graph nodes, lanes),
// columns are features.
Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var add_rowvec(Var x, Var rowBias);  // (N x W) + broadcast (1 x W)
Var hadamard(Var a, Var b);
Var affine(Var x, double scale, double shift);  // scale*x + shift elementwise
Var relu(Var x);
Var leaky_relu(Var x, double slope);
Var tanh_v(Var x);
Var sigmoid_v(Var x);
/// Row softmax; with a mask only entries where mask != 0 participate and the
/// rest are exactly zero.
Var softmax_rows(Var z, const Mat* mask = nullptr);
Var concat_cols(const std::vector<Var>& parts);
/// out(n,:) = sum_j alpha(n,j) * hs[j](n,:)
Var weighted_row_mix(const std::vector<Var>& hs, Var alpha);
/// E(i,j) = f(i,0) + g(j,0)
Var outer_sum(Var f, Var g);
Var dropout_v(Var x, double rate, std::mt19937_64& rng, bool training);
Var mse_against(Var pred, const Mat& target);  // 1x1 scalar node
Var mean_all(Var x);
Var scale(Var x, double s);

double scalar_value(Var v);

}  // namespace qest::nn
