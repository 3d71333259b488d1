#include "amimic/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace amimic {

void MetricSeries::append(MetricRecord r) {
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->stage == r.stage && it->game == r.game && it->seed == r.seed) {
      if (r.epoch < it->epoch)
        throw std::logic_error("MetricSeries: epoch " + std::to_string(r.epoch) + " after " +
                               std::to_string(it->epoch) + " for " + r.stage + "/" + r.game);
      break;
    }
  }
  records_.push_back(std::move(r));
}

void MetricSeries::append(const std::string& stage, const std::string& game, int epoch,
                          const std::string& metric, double value, std::uint64_t seed) {
  append(MetricRecord{stage, game, epoch, metric, value, seed});
}

void MetricSeries::extend(const MetricSeries& other) {
  for (const auto& r : other.records_) append(r);
}

std::vector<double> MetricSeries::values(const std::string& stage, const std::string& game,
                                         const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : records_)
    if (r.stage == stage && r.game == game && r.metric == metric) out.push_back(r.value);
  return out;
}

double MetricSeries::last(const std::string& stage, const std::string& game,
                          const std::string& metric) const {
  const auto v = values(stage, game, metric);
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : v.back();
}

void write_metrics(std::ostream& os, const MetricSeries& series) {
  os << "stage\tgame\tepoch\tmetric\tvalue\tseed\n";
  char buf[64];
  for (const auto& r : series.records()) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    os << r.stage << '\t' << r.game << '\t' << r.epoch << '\t' << r.metric << '\t' << buf << '\t'
       << r.seed << '\n';
  }
}

MetricSeries read_metrics(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "stage\tgame\tepoch\tmetric\tvalue\tseed")
    throw std::runtime_error("metrics: missing header");
  MetricSeries out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 6) throw std::runtime_error("metrics: line " + std::to_string(lineno) + " has " +
                                                   std::to_string(cols.size()) + " columns");
    try {
      out.append(cols[0], cols[1], std::stoi(cols[2]), cols[3], std::stod(cols[4]), std::stoull(cols[5]));
    } catch (const std::invalid_argument&) {
      throw std::runtime_error("metrics: line " + std::to_string(lineno) + " is malformed");
    }
  }
  return out;
}

}  // namespace amimic
