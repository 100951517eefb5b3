#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gridstab {

inline constexpr std::size_t kNodes = 4;
inline constexpr std::size_t kFeatures = 12;

// Class indices. Ties anywhere in the library resolve toward the lower index.
enum class Label : int { Stable = 0, Unstable = 1 };

std::string_view to_string(Label label) noexcept;

// One observation of the 4-node star grid. Node 0 is the producer.
struct GridRecord {
  std::array<double, kNodes> tau{};  // reaction times [s]
  std::array<double, kNodes> p{};    // nodal power, producer positive
  std::array<double, kNodes> g{};    // price elasticity
  double stab = 0.0;                 // rightmost root real part; > 0 unstable
  Label stabf = Label::Stable;

  // tau1..tau4, p1..p4, g1..g4
  std::array<double, kFeatures> features() const noexcept;

  friend bool operator==(const GridRecord&, const GridRecord&) = default;
};

// Column names in file order; the first 12 are the predictive features.
const std::array<std::string_view, 14>& csv_columns() noexcept;

// Index of a feature or "stab" among the 13 numeric columns; throws UnknownFeature.
std::size_t column_index(std::string_view name);

// Throws RangeViolation / BalanceViolation naming `row` and the offending field.
void validate_record(const GridRecord& r, std::size_t row);

// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

// Rows at `indices`, in the given order.
Matrix take_rows(const Matrix& x, std::span<const std::size_t> indices);

// Validated, immutable collection of records with their flattened views.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<GridRecord> records);

  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }

  const std::vector<GridRecord>& records() const noexcept { return records_; }
  const GridRecord& operator[](std::size_t i) const { return records_[i]; }

  // N x 12 in column order tau1..tau4, p1..p4, g1..g4.
  const Matrix& feature_matrix() const noexcept { return features_; }
  // 0 = stable, 1 = unstable.
  const std::vector<int>& labels() const noexcept { return labels_; }
  const std::vector<double>& stab_values() const noexcept { return stab_; }

  // Rows at `indices`, in the given order.
  Dataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const Dataset& a, const Dataset& b) { return a.records_ == b.records_; }

 private:
  std::vector<GridRecord> records_;
  Matrix features_;
  std::vector<int> labels_;
  std::vector<double> stab_;
};

// Classifier inputs: the 12 features, optionally with stab appended as a 13th column.
Matrix model_inputs(const Dataset& ds, bool append_stab = false);

Dataset read_csv(std::istream& in);
Dataset load_csv(const std::filesystem::path& path);
void write_csv(const Dataset& ds, std::ostream& out);
void write_csv(const Dataset& ds, const std::filesystem::path& path);

// Rows where the label disagrees with the rule (unstable <=> stab > 0).
std::size_t check_label_consistency(const Dataset& ds);

// The 3! consumer permutations in output order; identity first.
const std::array<std::array<std::size_t, 3>, 6>& consumer_permutations() noexcept;

// Applies every consumer permutation jointly to (tau, p, g); 6 rows per input row.
Dataset augment_permutations(const Dataset& ds);

struct ScalerParams {
  std::vector<double> mean;
  std::vector<double> stddev;  // population convention, all > 0
};

ScalerParams standardize_fit(const Matrix& x);
ScalerParams standardize_fit(const Dataset& ds);
Matrix standardize_apply(const Matrix& x, const ScalerParams& params);
Matrix standardize_apply(const Dataset& ds, const ScalerParams& params);

struct SplitIndices {
  std::vector<std::size_t> train;  // ascending
  std::vector<std::size_t> test;   // ascending
};

// Stratified by label. The test side has round(fraction * N) rows overall,
// allotted to classes by largest remainder.
SplitIndices split_indices(std::span<const int> labels, double test_fraction, std::uint64_t seed);
std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, std::uint64_t seed);

}  // namespace gridstab
