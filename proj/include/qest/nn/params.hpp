#pragma once

#include <Eigen/Dense>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "qest/errors.hpp"

namespace qest::nn {

using Mat = Eigen::MatrixXd;

/// Named trainable matrices with matching gradient slots. Parameters flagged
/// as weights participate in the L2 penalty; biases do not.
class ParamSet {
 public:
  Mat& add(const std::string& name, long rows, long cols, bool isWeight = true);
  /// Glorot-style uniform(-s, s) init with s = sqrt(6 / (fan_in + fan_out)).
  Mat& add_glorot(const std::string& name, long rows, long cols,
                  std::mt19937_64& rng, bool isWeight = true);

  bool has(const std::string& name) const;
  Mat& value(const std::string& name);
  const Mat& value(const std::string& name) const;
  Mat& grad(const std::string& name);
  const Mat& grad(const std::string& name) const;
  bool is_weight(const std::string& name) const;

  const std::vector<std::string>& names() const { return order_; }
  void zero_grads();
  long parameter_count() const;

  std::string to_json() const;  // versioned checkpoint payload
  static ParamSet from_json(const std::string& text);

 private:
  struct Entry {
    Mat value, grad;
    bool weight = true;
  };
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
};

}  // namespace qest::nn
