#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gridstab/data.hpp"

namespace gridstab::metrics {

// Counts relative to `positive` (unstable by default).
struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
  int positive = 1;

  std::size_t total() const noexcept { return tp + fp + tn + fn; }
  double accuracy() const noexcept;
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

// Throws EmptyInput for empty input and LengthMismatch for differing lengths.
ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, int positive = 1);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // true rows of this class
  bool degenerate = false;  // some denominator was zero; the affected value is reported as 0
};

// Indexed by class label (0 stable, 1 unstable), each class scored as if it were positive.
std::array<ClassMetrics, 2> precision_recall_f1(const ConfusionMatrix& cm);

struct ClassificationReport {
  std::string model;
  ConfusionMatrix cm;
  std::array<ClassMetrics, 2> per_class;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

ClassificationReport classification_report(std::string model, std::span<const int> truth,
                                           std::span<const int> predicted, int positive = 1);

// Per-class precision / recall / F1 / support table, one block per model.
std::string format_reports(std::span<const ClassificationReport> reports);
nlohmann::json to_json(const ClassificationReport& report);
ClassificationReport report_from_json(const nlohmann::json& j);
// Flat CSV: model, class, precision, recall, f1, support, accuracy.
void write_reports_csv(std::span<const ClassificationReport> reports, const std::filesystem::path& path);

// Pearson correlations over the 12 features and stab, in column order. Throws
// TooFewRows for N < 2 and ZeroVariance for a constant column.
struct CorrelationMatrix {
  std::vector<std::string> names;
  std::vector<double> values;  // 13 x 13 row-major

  double operator()(std::size_t i, std::size_t j) const { return values[i * names.size() + j]; }
};
CorrelationMatrix correlation_matrix(const Dataset& ds);
double pearson(std::span<const double> a, std::span<const double> b);
void write_correlation_csv(const CorrelationMatrix& corr, const std::filesystem::path& path);

// (feature value, stab) pairs in row order. Throws UnknownFeature.
std::vector<std::pair<double, double>> scatter_export(const Dataset& ds, std::string_view feature);
void write_scatter_csv(const Dataset& ds, std::string_view feature, const std::filesystem::path& path);

}  // namespace gridstab::metrics
