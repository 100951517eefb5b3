#include "gridstab/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "gridstab/error.hpp"

namespace gridstab::metrics {

namespace {

double ratio(std::size_t num, std::size_t den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

ClassMetrics score(std::size_t tp, std::size_t fp, std::size_t fn) {
  ClassMetrics m;
  m.precision = ratio(tp, tp + fp, m.degenerate);
  m.recall = ratio(tp, tp + fn, m.degenerate);
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.degenerate = true;
  }
  m.support = tp + fn;
  return m;
}

std::vector<double> column(const Dataset& ds, std::size_t c) {
  if (c == kFeatures) return ds.stab_values();
  std::vector<double> out(ds.size());
  for (std::size_t r = 0; r < ds.size(); ++r) out[r] = ds.feature_matrix()(r, c);
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  return out;
}

}  // namespace

double ConfusionMatrix::accuracy() const noexcept {
  return total() == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(total());
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, int positive) {
  if (truth.size() != predicted.size()) {
    throw Error(ErrorCode::LengthMismatch, std::to_string(truth.size()) + " true labels vs " +
                                               std::to_string(predicted.size()) + " predictions");
  }
  if (truth.empty()) throw Error(ErrorCode::EmptyInput, "no labels");
  ConfusionMatrix cm;
  cm.positive = positive;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool t = truth[i] == positive;
    const bool p = predicted[i] == positive;
    if (t && p) ++cm.tp;
    else if (!t && p) ++cm.fp;
    else if (t) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

std::array<ClassMetrics, 2> precision_recall_f1(const ConfusionMatrix& cm) {
  const auto pos = static_cast<std::size_t>(cm.positive == 0 ? 0 : 1);
  std::array<ClassMetrics, 2> out;
  out[pos] = score(cm.tp, cm.fp, cm.fn);
  out[1 - pos] = score(cm.tn, cm.fn, cm.fp);
  return out;
}

ClassificationReport classification_report(std::string model, std::span<const int> truth,
                                           std::span<const int> predicted, int positive) {
  ClassificationReport r;
  r.model = std::move(model);
  r.cm = confusion(truth, predicted, positive);
  r.per_class = precision_recall_f1(r.cm);
  r.accuracy = r.cm.accuracy();
  r.macro_f1 = 0.5 * (r.per_class[0].f1 + r.per_class[1].f1);
  return r;
}

std::string format_reports(std::span<const ClassificationReport> reports) {
  std::string out;
  char line[160];
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%s  (accuracy %.4f, macro F1 %.4f, n=%zu)\n", r.model.c_str(), r.accuracy,
                  r.macro_f1, r.cm.total());
    out += line;
    std::snprintf(line, sizeof line, "  %-10s %10s %10s %10s %10s\n", "class", "precision", "recall", "f1-score",
                  "support");
    out += line;
    for (std::size_t c = 0; c < 2; ++c) {
      const auto& m = r.per_class[c];
      std::snprintf(line, sizeof line, "  %-10s %10.4f %10.4f %10.4f %10zu%s\n",
                    std::string(to_string(static_cast<Label>(c))).c_str(), m.precision, m.recall, m.f1, m.support,
                    m.degenerate ? "  (degenerate)" : "");
      out += line;
    }
    out += '\n';
  }
  return out;
}

nlohmann::json to_json(const ClassificationReport& report) {
  nlohmann::json classes = nlohmann::json::object();
  for (std::size_t c = 0; c < 2; ++c) {
    const auto& m = report.per_class[c];
    classes[std::string(to_string(static_cast<Label>(c)))] = {{"precision", m.precision},
                                                               {"recall", m.recall},
                                                               {"f1", m.f1},
                                                               {"support", m.support},
                                                               {"degenerate", m.degenerate}};
  }
  return {{"model", report.model},
          {"accuracy", report.accuracy},
          {"macro_f1", report.macro_f1},
          {"positive_class", to_string(static_cast<Label>(report.cm.positive))},
          {"confusion", {{"tp", report.cm.tp}, {"fp", report.cm.fp}, {"tn", report.cm.tn}, {"fn", report.cm.fn}}},
          {"classes", classes}};
}

ClassificationReport report_from_json(const nlohmann::json& j) {
  ClassificationReport r;
  try {
    r.model = j.at("model").get<std::string>();
    r.accuracy = j.at("accuracy").get<double>();
    r.macro_f1 = j.at("macro_f1").get<double>();
    r.cm.positive = j.at("positive_class").get<std::string>() == "stable" ? 0 : 1;
    const auto& cm = j.at("confusion");
    r.cm.tp = cm.at("tp").get<std::size_t>();
    r.cm.fp = cm.at("fp").get<std::size_t>();
    r.cm.tn = cm.at("tn").get<std::size_t>();
    r.cm.fn = cm.at("fn").get<std::size_t>();
    for (std::size_t c = 0; c < 2; ++c) {
      const auto& m = j.at("classes").at(std::string(to_string(static_cast<Label>(c))));
      r.per_class[c] = {m.at("precision").get<double>(), m.at("recall").get<double>(), m.at("f1").get<double>(),
                        m.at("support").get<std::size_t>(), m.at("degenerate").get<bool>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("classification report: ") + e.what());
  }
  return r;
}

void write_reports_csv(std::span<const ClassificationReport> reports, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "model,class,precision,recall,f1,support,accuracy\n";
  char line[256];
  for (const auto& r : reports) {
    for (std::size_t c = 0; c < 2; ++c) {
      const auto& m = r.per_class[c];
      std::snprintf(line, sizeof line, "%s,%s,%.17g,%.17g,%.17g,%zu,%.17g\n", r.model.c_str(),
                    std::string(to_string(static_cast<Label>(c))).c_str(), m.precision, m.recall, m.f1, m.support,
                    r.accuracy);
      out << line;
    }
  }
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::LengthMismatch, "columns differ in length");
  if (a.size() < 2) throw Error(ErrorCode::TooFewRows, "correlation needs at least 2 rows");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) throw Error(ErrorCode::ZeroVariance, "constant column");
  return sab / std::sqrt(saa * sbb);
}

CorrelationMatrix correlation_matrix(const Dataset& ds) {
  if (ds.size() < 2) throw Error(ErrorCode::TooFewRows, "correlation needs at least 2 rows");
  constexpr std::size_t n = kFeatures + 1;
  std::vector<std::vector<double>> cols;
  CorrelationMatrix corr;
  for (std::size_t c = 0; c < n; ++c) {
    cols.push_back(column(ds, c));
    corr.names.emplace_back(csv_columns()[c]);
  }
  corr.values.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double v = 1.0;
      if (i != j) {
        try {
          v = pearson(cols[i], cols[j]);
        } catch (const Error& e) {
          if (e.code() != ErrorCode::ZeroVariance) throw;
          throw Error(ErrorCode::ZeroVariance, "column " + corr.names[i] + " or " + corr.names[j] + " is constant");
        }
      } else {
        (void)pearson(cols[i], cols[i]);  // rejects a constant column
      }
      corr.values[i * n + j] = corr.values[j * n + i] = v;
    }
  }
  return corr;
}

void write_correlation_csv(const CorrelationMatrix& corr, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "feature";
  for (const auto& name : corr.names) out << ',' << name;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < corr.names.size(); ++i) {
    out << corr.names[i];
    for (std::size_t j = 0; j < corr.names.size(); ++j) {
      std::snprintf(buf, sizeof buf, ",%.17g", corr(i, j));
      out << buf;
    }
    out << '\n';
  }
}

std::vector<std::pair<double, double>> scatter_export(const Dataset& ds, std::string_view feature) {
  const std::vector<double> x = column(ds, column_index(feature));
  std::vector<std::pair<double, double>> out(ds.size());
  for (std::size_t r = 0; r < ds.size(); ++r) out[r] = {x[r], ds.stab_values()[r]};
  return out;
}

void write_scatter_csv(const Dataset& ds, std::string_view feature, const std::filesystem::path& path) {
  const auto pairs = scatter_export(ds, feature);
  auto out = open_out(path);
  out << feature << ",stab\n";
  char buf[64];
  for (const auto& [x, y] : pairs) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", x, y);
    out << buf;
  }
}

}  // namespace gridstab::metrics
