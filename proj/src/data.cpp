#include "gridstab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "gridstab/error.hpp"
#include "gridstab/random.hpp"

namespace gridstab {

namespace {

constexpr double kTauMin = 0.5, kTauMax = 10.0;
constexpr double kConsumerMin = -2.0, kConsumerMax = -0.5;
constexpr double kElasticityMin = 0.05, kElasticityMax = 1.0;
constexpr double kBalanceTol = 1e-6;

std::string field_name(const char* prefix, std::size_t node) {
  return prefix + std::to_string(node + 1);
}

void require_range(double v, double lo, double hi, std::size_t row, const std::string& field) {
  if (!(v >= lo && v <= hi)) {
    throw Error(ErrorCode::RangeViolation, "row " + std::to_string(row) + ", field " + field +
                                               ": value " + std::to_string(v) + " outside [" +
                                               std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

double parse_number(std::string_view text, std::size_t row, std::string_view column) {
  std::string buf(text);
  char* end = nullptr;
  const double v = std::strtod(buf.c_str(), &end);
  if (buf.empty() || end != buf.c_str() + buf.size() || !std::isfinite(v)) {
    throw Error(ErrorCode::SchemaMismatch, "row " + std::to_string(row) + ", field " +
                                               std::string(column) + ": not a number '" + buf + "'");
  }
  return v;
}

}  // namespace

std::string_view to_string(Label label) noexcept {
  return label == Label::Stable ? "stable" : "unstable";
}

std::array<double, kFeatures> GridRecord::features() const noexcept {
  std::array<double, kFeatures> f{};
  for (std::size_t i = 0; i < kNodes; ++i) {
    f[i] = tau[i];
    f[kNodes + i] = p[i];
    f[2 * kNodes + i] = g[i];
  }
  return f;
}

const std::array<std::string_view, 14>& csv_columns() noexcept {
  static constexpr std::array<std::string_view, 14> kColumns = {
      "tau1", "tau2", "tau3", "tau4", "p1", "p2", "p3", "p4",
      "g1",   "g2",   "g3",   "g4",   "stab", "stabf"};
  return kColumns;
}

std::size_t column_index(std::string_view name) {
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < 13; ++i) {
    if (cols[i] == name) return i;
  }
  throw Error(ErrorCode::UnknownFeature, std::string(name));
}

void validate_record(const GridRecord& r, std::size_t row) {
  for (std::size_t i = 0; i < kNodes; ++i) {
    require_range(r.tau[i], kTauMin, kTauMax, row, field_name("tau", i));
  }
  for (std::size_t i = 1; i < kNodes; ++i) {
    require_range(r.p[i], kConsumerMin, kConsumerMax, row, field_name("p", i));
  }
  for (std::size_t i = 0; i < kNodes; ++i) {
    require_range(r.g[i], kElasticityMin, kElasticityMax, row, field_name("g", i));
  }
  if (!std::isfinite(r.stab)) {
    throw Error(ErrorCode::RangeViolation, "row " + std::to_string(row) + ", field stab: not finite");
  }
  const double balance = r.p[0] + r.p[1] + r.p[2] + r.p[3];
  if (!(std::abs(balance) <= kBalanceTol)) {
    throw Error(ErrorCode::BalanceViolation, "row " + std::to_string(row) +
                                                 ", field p1: power sum " + std::to_string(balance));
  }
}

Dataset::Dataset(std::vector<GridRecord> records)
    : records_(std::move(records)), features_(records_.size(), kFeatures) {
  labels_.reserve(records_.size());
  stab_.reserve(records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    const auto f = r.features();
    std::copy(f.begin(), f.end(), features_.row(i).begin());
    labels_.push_back(static_cast<int>(r.stabf));
    stab_.push_back(r.stab);
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  std::vector<GridRecord> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(records_.at(i));
  return Dataset(std::move(out));
}

Matrix take_rows(const Matrix& x, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), x.cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = x.row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Matrix model_inputs(const Dataset& ds, bool append_stab) {
  if (!append_stab) return ds.feature_matrix();
  Matrix x(ds.size(), kFeatures + 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto src = ds.feature_matrix().row(i);
    std::copy(src.begin(), src.end(), x.row(i).begin());
    x(i, kFeatures) = ds.stab_values()[i];
  }
  return x;
}

Dataset read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) {
    throw Error(ErrorCode::SchemaMismatch, "missing header row");
  }
  const auto header = split_fields(line);
  const auto& cols = csv_columns();
  if (header.size() != cols.size()) {
    throw Error(ErrorCode::SchemaMismatch, "expected 14 columns, header has " +
                                               std::to_string(header.size()));
  }
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (header[c] != cols[c]) {
      throw Error(ErrorCode::SchemaMismatch, "column " + std::to_string(c) + " is '" +
                                                 std::string(header[c]) + "', expected '" +
                                                 std::string(cols[c]) + "'");
    }
  }

  std::vector<GridRecord> records;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != cols.size()) {
      throw Error(ErrorCode::SchemaMismatch, "row " + std::to_string(row) + ": " +
                                                 std::to_string(fields.size()) + " fields");
    }
    GridRecord r;
    for (std::size_t i = 0; i < kNodes; ++i) {
      r.tau[i] = parse_number(fields[i], row, cols[i]);
      r.p[i] = parse_number(fields[kNodes + i], row, cols[kNodes + i]);
      r.g[i] = parse_number(fields[2 * kNodes + i], row, cols[2 * kNodes + i]);
    }
    r.stab = parse_number(fields[12], row, cols[12]);
    if (fields[13] == "stable") {
      r.stabf = Label::Stable;
    } else if (fields[13] == "unstable") {
      r.stabf = Label::Unstable;
    } else {
      throw Error(ErrorCode::SchemaMismatch, "row " + std::to_string(row) +
                                                 ", field stabf: '" + std::string(fields[13]) + "'");
    }
    validate_record(r, row);
    records.push_back(r);
    ++row;
  }
  return Dataset(std::move(records));
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, path.string());
  return read_csv(in);
}

void write_csv(const Dataset& ds, std::ostream& out) {
  const auto& cols = csv_columns();
  for (std::size_t c = 0; c < cols.size(); ++c) {
    out << (c ? "," : "") << cols[c];
  }
  out << '\n';
  char buf[32];
  for (const auto& r : ds.records()) {
    for (double v : r.features()) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    std::snprintf(buf, sizeof buf, "%.17g", r.stab);
    out << buf << ',' << to_string(r.stabf) << '\n';
  }
}

void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  write_csv(ds, out);
  if (!out) throw Error(ErrorCode::IoFailure, "write failed: " + path.string());
}

std::size_t check_label_consistency(const Dataset& ds) {
  return static_cast<std::size_t>(std::count_if(ds.records().begin(), ds.records().end(), [](const GridRecord& r) {
    return (r.stabf == Label::Unstable) != (r.stab > 0.0);
  }));
}

const std::array<std::array<std::size_t, 3>, 6>& consumer_permutations() noexcept {
  static constexpr std::array<std::array<std::size_t, 3>, 6> kPerms = {{
      {1, 2, 3}, {1, 3, 2}, {2, 1, 3}, {2, 3, 1}, {3, 1, 2}, {3, 2, 1}}};
  return kPerms;
}

Dataset augment_permutations(const Dataset& ds) {
  std::vector<GridRecord> out;
  out.reserve(ds.size() * 6);
  for (std::size_t row = 0; row < ds.size(); ++row) {
    const auto& src = ds[row];
    validate_record(src, row);
    for (const auto& perm : consumer_permutations()) {
      GridRecord r = src;
      for (std::size_t slot = 0; slot < 3; ++slot) {
        r.tau[slot + 1] = src.tau[perm[slot]];
        r.p[slot + 1] = src.p[perm[slot]];
        r.g[slot + 1] = src.g[perm[slot]];
      }
      out.push_back(r);
    }
  }
  return Dataset(std::move(out));
}

ScalerParams standardize_fit(const Matrix& x) {
  if (x.rows < 2) throw Error(ErrorCode::TooFewRows, "scaler needs at least 2 rows");
  ScalerParams params;
  params.mean.assign(x.cols, 0.0);
  params.stddev.assign(x.cols, 0.0);
  const double n = static_cast<double>(x.rows);
  for (std::size_t j = 0; j < x.cols; ++j) {
    double sum = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) sum += x(i, j);
    const double mean = sum / n;
    double ss = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
      const double d = x(i, j) - mean;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / n);
    if (!(sd > 0.0)) throw Error(ErrorCode::ZeroVariance, "feature " + std::to_string(j));
    params.mean[j] = mean;
    params.stddev[j] = sd;
  }
  return params;
}

ScalerParams standardize_fit(const Dataset& ds) { return standardize_fit(ds.feature_matrix()); }

Matrix standardize_apply(const Matrix& x, const ScalerParams& params) {
  if (params.mean.size() != x.cols || params.stddev.size() != x.cols) {
    throw Error(ErrorCode::ShapeMismatch, "scaler has " + std::to_string(params.mean.size()) +
                                              " features, input has " + std::to_string(x.cols));
  }
  Matrix out = x;
  for (std::size_t i = 0; i < x.rows; ++i) {
    for (std::size_t j = 0; j < x.cols; ++j) {
      out(i, j) = (x(i, j) - params.mean[j]) / params.stddev[j];
    }
  }
  return out;
}

Matrix standardize_apply(const Dataset& ds, const ScalerParams& params) {
  return standardize_apply(ds.feature_matrix(), params);
}

SplitIndices split_indices(std::span<const int> labels, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "test_fraction must lie in (0, 1)");
  }
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i] != 0 ? 1 : 0].push_back(i);

  const auto total_test = static_cast<std::size_t>(std::llround(test_fraction * labels.size()));
  std::array<std::size_t, 2> take{};
  std::array<double, 2> remainder{};
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < 2; ++c) {
    const double exact = test_fraction * static_cast<double>(by_class[c].size());
    take[c] = static_cast<std::size_t>(std::floor(exact));
    remainder[c] = exact - std::floor(exact);
    assigned += take[c];
  }
  // Largest remainder; equal remainders go to the lower class index.
  while (assigned < total_test) {
    const std::size_t c = remainder[1] > remainder[0] ? 1 : 0;
    const std::size_t pick = take[c] < by_class[c].size() ? c : 1 - c;
    ++take[pick];
    remainder[pick] = -1.0;
    ++assigned;
  }

  Rng rng(seed);
  SplitIndices out;
  for (std::size_t c = 0; c < 2; ++c) {
    auto idx = by_class[c];
    rng.shuffle(std::span<std::size_t>(idx));
    out.test.insert(out.test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take[c]));
    out.train.insert(out.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(take[c]), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  if (out.train.empty() || out.test.empty()) {
    throw Error(ErrorCode::EmptySplit, "train " + std::to_string(out.train.size()) + ", test " +
                                           std::to_string(out.test.size()));
  }
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  const auto idx = split_indices(ds.labels(), test_fraction, seed);
  return {ds.subset(idx.train), ds.subset(idx.test)};
}

}  // namespace gridstab
