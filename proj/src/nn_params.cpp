#include "qest/nn/params.hpp"

#include <cmath>

#include "json.hpp"

namespace qest::nn {

using nlohmann::json;

ParamSet::Entry& ParamSet::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const ParamSet::Entry& ParamSet::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

Mat& ParamSet::add(const std::string& name, long rows, long cols, bool isWeight) {
  if (entries_.count(name)) throw ConfigError("duplicate parameter: " + name);
  Entry e;
  e.value = Mat::Zero(rows, cols);
  e.grad = Mat::Zero(rows, cols);
  e.weight = isWeight;
  order_.push_back(name);
  return entries_.emplace(name, std::move(e)).first->second.value;
}

Mat& ParamSet::add_glorot(const std::string& name, long rows, long cols,
                          std::mt19937_64& rng, bool isWeight) {
  Mat& m = add(name, rows, cols, isWeight);
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-s, s);
  for (long j = 0; j < cols; ++j)
    for (long i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

bool ParamSet::has(const std::string& name) const { return entries_.count(name) > 0; }
Mat& ParamSet::value(const std::string& name) { return entry(name).value; }
const Mat& ParamSet::value(const std::string& name) const { return entry(name).value; }
Mat& ParamSet::grad(const std::string& name) { return entry(name).grad; }
const Mat& ParamSet::grad(const std::string& name) const { return entry(name).grad; }
bool ParamSet::is_weight(const std::string& name) const { return entry(name).weight; }

void ParamSet::zero_grads() {
  for (auto& [name, e] : entries_) e.grad.setZero();
}

long ParamSet::parameter_count() const {
  long n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

std::string ParamSet::to_json() const {
  json j;
  j["format"] = "qest-params";
  j["version"] = 1;
  json arr = json::array();
  for (const auto& name : order_) {
    const Entry& e = entry(name);
    json p;
    p["name"] = name;
    p["rows"] = e.value.rows();
    p["cols"] = e.value.cols();
    p["weight"] = e.weight;
    std::vector<double> vals(e.value.size());
    for (long c = 0, k = 0; c < e.value.cols(); ++c)
      for (long r = 0; r < e.value.rows(); ++r) vals[static_cast<size_t>(k++)] = e.value(r, c);
    p["values"] = vals;
    arr.push_back(std::move(p));
  }
  j["params"] = std::move(arr);
  return j.dump();
}

ParamSet ParamSet::from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.value("format", "") != "qest-params" || j.value("version", 0) != 1)
    throw ConfigError("unsupported checkpoint format");
  ParamSet p;
  for (const auto& e : j.at("params")) {
    const long rows = e.at("rows"), cols = e.at("cols");
    Mat& m = p.add(e.at("name"), rows, cols, e.value("weight", true));
    const auto vals = e.at("values").get<std::vector<double>>();
    if (static_cast<long>(vals.size()) != rows * cols)
      throw ShapeMismatch("checkpoint value count mismatch");
    long k = 0;
    for (long c = 0; c < cols; ++c)
      for (long r = 0; r < rows; ++r) m(r, c) = vals[static_cast<size_t>(k++)];
  }
  return p;
}

}  // namespace qest::nn
