#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bnnlab/tensor.hpp"

namespace bnnlab {

struct PredictionLog {
  std::vector<double> confidence;  // top-class probability, in (0, 1]
  std::vector<std::size_t> predicted;
  std::vector<std::size_t> truth;

  std::size_t size() const { return confidence.size(); }
  void add(double confidence, std::size_t predicted, std::size_t truth);

  // From class probabilities [N, K] and true labels.
  static PredictionLog from_probabilities(const Tensor& probs, std::span<const std::size_t> labels);
};

struct CalibrationBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;    // 0 when empty
  double confidence = 0.0;  // mean confidence, 0 when empty
};

struct CalibrationBins {
  std::vector<CalibrationBin> bins;
  std::size_t total = 0;
};

// 0-based bin of confidence c among n equal-width bins over (0, 1]: the
// interval (k/n, (k+1)/n] holds c; c = 0 goes to the first bin.
std::size_t bin_index(double c, std::size_t n_bins);

CalibrationBins bin_predictions(const PredictionLog& log, std::size_t n_bins);

// Weighted mean / maximum of |accuracy - confidence| over nonempty bins.
double ece(const CalibrationBins& bins);
double mce(const CalibrationBins& bins);

struct CalibrationReport {
  double ece = 0.0;
  double mce = 0.0;
  CalibrationBins bins;
};

CalibrationReport calibration_report(const PredictionLog& log, std::size_t n_bins);

// bin_lo,bin_hi,count,accuracy,confidence for nonempty bins.
std::string bins_csv(const CalibrationBins& bins);
// Parses bins_csv output back (empty bins are absent).
CalibrationBins parse_bins_csv(const std::string& csv);
std::string reliability_svg(const CalibrationBins& bins, const std::string& title);

// Writes <stem>.csv and <stem>.svg. Throws Error if either cannot be written.
void reliability_diagram(const CalibrationBins& bins, const std::string& stem, const std::string& title = "");

}  // namespace bnnlab
