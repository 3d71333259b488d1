#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace amimic {

struct MetricRecord {
  std::string stage;
  std::string game;
  int epoch = 0;
  std::string metric;
  double value = 0.0;
  std::uint64_t seed = 0;
};

/// Append-only list of records. Epoch indices must not decrease within one
/// (stage, game, seed) stream.
class MetricSeries {
 public:
  void append(MetricRecord r);
  void append(const std::string& stage, const std::string& game, int epoch, const std::string& metric,
              double value, std::uint64_t seed);
  void extend(const MetricSeries& other);

  const std::vector<MetricRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  /// Values of one metric for one game in insertion order.
  std::vector<double> values(const std::string& stage, const std::string& game,
                             const std::string& metric) const;
  /// Last recorded value, or NaN when absent.
  double last(const std::string& stage, const std::string& game, const std::string& metric) const;

 private:
  std::vector<MetricRecord> records_;
};

/// Tab-separated with header "stage game epoch metric value seed"; values in
/// %.17g so a write/read cycle is exact.
void write_metrics(std::ostream& os, const MetricSeries& series);
MetricSeries read_metrics(std::istream& is);

}  // namespace amimic
