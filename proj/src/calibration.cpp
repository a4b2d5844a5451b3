#include "bnnlab/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bnnlab/error.hpp"

namespace bnnlab {

void PredictionLog::add(double c, std::size_t p, std::size_t t) {
  if (!(c > 0.0 && c <= 1.0)) throw ConfigError("prediction log: confidence must lie in (0, 1]");
  confidence.push_back(c);
  predicted.push_back(p);
  truth.push_back(t);
}

PredictionLog PredictionLog::from_probabilities(const Tensor& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size())
    throw ShapeError("prediction log: probabilities " + shape_str(probs.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  PredictionLog log;
  const std::size_t k = probs.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (probs[i * k + j] > probs[i * k + best]) best = j;
    // Rounding can push a saturated softmax a hair past 1.
    log.add(std::min(probs[i * k + best], 1.0), best, labels[i]);
  }
  return log;
}

std::size_t bin_index(double c, std::size_t n_bins) {
  const double n = static_cast<double>(n_bins);
  auto k = static_cast<std::size_t>(std::max(std::ceil(c * n), 1.0)) - 1;
  k = std::min(k, n_bins - 1);
  // c * n can round across an edge; settle against the edges themselves.
  while (k > 0 && c <= static_cast<double>(k) / n) --k;
  while (k + 1 < n_bins && c > static_cast<double>(k + 1) / n) ++k;
  return k;
}

CalibrationBins bin_predictions(const PredictionLog& log, std::size_t n_bins) {
  if (n_bins < 1) throw ConfigError("calibration: n_bins must be >= 1");
  if (log.size() == 0) throw ConfigError("calibration: empty prediction log");
  CalibrationBins out;
  out.total = log.size();
  out.bins.resize(n_bins);
  std::vector<std::size_t> correct(n_bins, 0);
  std::vector<double> conf(n_bins, 0.0);
  for (std::size_t i = 0; i < log.size(); ++i) {
    const std::size_t k = bin_index(log.confidence[i], n_bins);
    out.bins[k].count += 1;
    correct[k] += log.predicted[i] == log.truth[i];
    conf[k] += log.confidence[i];
  }
  for (std::size_t k = 0; k < n_bins; ++k) {
    auto& b = out.bins[k];
    b.lo = static_cast<double>(k) / static_cast<double>(n_bins);
    b.hi = static_cast<double>(k + 1) / static_cast<double>(n_bins);
    if (b.count > 0) {
      b.accuracy = static_cast<double>(correct[k]) / static_cast<double>(b.count);
      b.confidence = conf[k] / static_cast<double>(b.count);
    }
  }
  return out;
}

namespace {

void require_nonempty(const CalibrationBins& bins) {
  for (const auto& b : bins.bins)
    if (b.count > 0) return;
  throw ConfigError("calibration: every bin is empty");
}

}  // namespace

double ece(const CalibrationBins& bins) {
  require_nonempty(bins);
  std::size_t total = 0;
  for (const auto& b : bins.bins) total += b.count;
  double e = 0.0;
  for (const auto& b : bins.bins) {
    if (b.count == 0) continue;
    e += static_cast<double>(b.count) / static_cast<double>(total) * std::abs(b.accuracy - b.confidence);
  }
  return e;
}

double mce(const CalibrationBins& bins) {
  require_nonempty(bins);
  double m = 0.0;
  for (const auto& b : bins.bins)
    if (b.count > 0) m = std::max(m, std::abs(b.accuracy - b.confidence));
  return m;
}

CalibrationReport calibration_report(const PredictionLog& log, std::size_t n_bins) {
  CalibrationReport r;
  r.bins = bin_predictions(log, n_bins);
  r.ece = ece(r.bins);
  r.mce = mce(r.bins);
  return r;
}

std::string bins_csv(const CalibrationBins& bins) {
  std::string out = "bin_lo,bin_hi,count,accuracy,confidence\n";
  char buf[160];
  for (const auto& b : bins.bins) {
    if (b.count == 0) continue;
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%zu,%.17g,%.17g\n", b.lo, b.hi, b.count, b.accuracy, b.confidence);
    out += buf;
  }
  return out;
}

CalibrationBins parse_bins_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "bin_lo,bin_hi,count,accuracy,confidence")
    throw FormatError("calibration csv: unexpected header");
  CalibrationBins out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    CalibrationBin b;
    if (std::sscanf(line.c_str(), "%lf,%lf,%zu,%lf,%lf", &b.lo, &b.hi, &b.count, &b.accuracy, &b.confidence) != 5)
      throw FormatError("calibration csv: malformed row '" + line + "'");
    out.total += b.count;
    out.bins.push_back(b);
  }
  return out;
}

std::string reliability_svg(const CalibrationBins& bins, const std::string& title) {
  constexpr double size = 320.0, margin = 40.0;
  std::ostringstream s;
  s.precision(6);
  s << std::fixed;
  auto px = [&](double v) { return margin + v * size; };
  auto py = [&](double v) { return margin + (1.0 - v) * size; };
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * margin << "\" height=\""
    << size + 2 * margin << "\">\n";
  s << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size << "\" height=\"" << size
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (const auto& b : bins.bins) {
    if (b.count == 0) continue;
    s << "<rect x=\"" << px(b.lo) << "\" y=\"" << py(b.accuracy) << "\" width=\"" << (b.hi - b.lo) * size
      << "\" height=\"" << b.accuracy * size << "\" fill=\"steelblue\" stroke=\"white\"/>\n";
  }
  s << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(1)
    << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  s << "<text x=\"" << px(0.5) << "\" y=\"" << size + 1.75 * margin
    << "\" text-anchor=\"middle\" font-size=\"12\">confidence</text>\n";
  s << "<text x=\"12\" y=\"" << py(0.5) << "\" font-size=\"12\" transform=\"rotate(-90 12 " << py(0.5)
    << ")\" text-anchor=\"middle\">accuracy</text>\n";
  if (!title.empty())
    s << "<text x=\"" << px(0.5) << "\" y=\"" << margin * 0.6 << "\" text-anchor=\"middle\" font-size=\"14\">"
      << title << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(path + ": cannot open for writing");
  out << text;
  if (!out) throw Error(path + ": write failed");
}

}  // namespace

void reliability_diagram(const CalibrationBins& bins, const std::string& stem, const std::string& title) {
  write_text(stem + ".csv", bins_csv(bins));
  write_text(stem + ".svg", reliability_svg(bins, title));
}

}  // namespace bnnlab
