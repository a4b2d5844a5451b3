#include <cmath>
#include <filesystem>
#include <fstream>

#include "bnnlab/calibration.hpp"
#include "bnnlab/error.hpp"
#include "bnnlab/rng.hpp"
#include "doctest.h"

using namespace bnnlab;
namespace fs = std::filesystem;

namespace {

// n predictions at confidence c, the first `correct` of them right.
void add_group(PredictionLog& log, double c, std::size_t n, std::size_t correct) {
  for (std::size_t i = 0; i < n; ++i) log.add(c, 0, i < correct ? 0 : 1);
}

}  // namespace

TEST_CASE("bin edges") {
  CHECK(bin_index(0.0, 10) == 0);
  CHECK(bin_index(0.05, 10) == 0);
  CHECK(bin_index(0.1, 10) == 0);
  CHECK(bin_index(0.1000001, 10) == 1);
  CHECK(bin_index(0.3, 10) == 2);
  CHECK(bin_index(0.7, 10) == 6);
  CHECK(bin_index(1.0, 10) == 9);
  CHECK(bin_index(0.5, 2) == 0);
  CHECK(bin_index(0.5000001, 2) == 1);
  CHECK(bin_index(0.9, 1) == 0);
  for (std::size_t n : {3, 7, 10, 15})
    for (std::size_t k = 1; k < n; ++k) {
      const double edge = double(k) / double(n);
      CHECK(bin_index(edge, n) == k - 1);
      CHECK(bin_index(std::nextafter(edge, 2.0), n) == k);
    }
}

TEST_CASE("perfect calibration has zero error") {
  PredictionLog log;
  add_group(log, 0.5, 8, 4);
  add_group(log, 0.75, 8, 6);
  add_group(log, 0.625, 16, 10);
  add_group(log, 1.0, 5, 5);
  auto r = calibration_report(log, 10);
  CHECK(r.ece == 0.0);
  CHECK(r.mce == 0.0);
  CHECK(r.bins.total == 37);
}

TEST_CASE("two bin worked example") {
  PredictionLog log;
  add_group(log, 0.9, 50, 40);
  add_group(log, 0.6, 50, 30);
  auto r = calibration_report(log, 10);
  CHECK(std::abs(r.ece - 0.05) < 1e-12);
  CHECK(std::abs(r.mce - 0.1) < 1e-12);
  std::size_t nonempty = 0;
  for (const auto& b : r.bins.bins) nonempty += b.count > 0;
  CHECK(nonempty == 2);
  CHECK(r.bins.bins[8].count == 50);
  CHECK(r.bins.bins[8].accuracy == 0.8);
}

TEST_CASE("maximum error bounds expected error on random logs") {
  Rng rng(31);
  for (int t = 0; t < 100; ++t) {
    PredictionLog log;
    const std::size_t n = 1 + rng.below(300);
    for (std::size_t i = 0; i < n; ++i) {
      const double c = 0.2 + 0.8 * (1.0 - rng.uniform());
      log.add(c, 0, rng.uniform() < c * 0.9 ? 0 : 1);
    }
    const std::size_t bins = 1 + rng.below(20);
    auto r = calibration_report(log, bins);
    CHECK(r.mce >= r.ece);
    CHECK(r.ece >= 0.0);
    CHECK(r.mce <= 1.0);
  }
}

TEST_CASE("single bin error is the global gap") {
  Rng rng(5);
  PredictionLog log;
  double conf = 0, acc = 0;
  for (int i = 0; i < 500; ++i) {
    const double c = 1.0 - 0.7 * rng.uniform();
    const bool hit = rng.uniform() < 0.6;
    log.add(c, 1, hit ? 1 : 2);
    conf += c;
    acc += hit;
  }
  const double gap = std::abs(acc / 500 - conf / 500);
  auto r = calibration_report(log, 1);
  CHECK(std::abs(r.ece - gap) < 1e-12);
  CHECK(std::abs(r.mce - gap) < 1e-12);
}

TEST_CASE("logs from probabilities") {
  Tensor p({3, 3}, std::vector<double>{0.2, 0.5, 0.3, 0.6, 0.3, 0.1, 0.2, 0.2, 0.6});
  std::vector<std::size_t> labels{1, 2, 2};
  auto log = PredictionLog::from_probabilities(p, labels);
  CHECK(log.predicted == std::vector<std::size_t>{1, 0, 2});
  CHECK(log.confidence == std::vector<double>{0.5, 0.6, 0.6});
  CHECK(log.truth == labels);
  CHECK_THROWS_AS(PredictionLog().add(0.0, 0, 0), ConfigError);
  CHECK_THROWS_AS(PredictionLog().add(1.5, 0, 0), ConfigError);
}

TEST_CASE("degenerate inputs") {
  CHECK_THROWS_AS(bin_predictions(PredictionLog{}, 10), ConfigError);
  PredictionLog log;
  log.add(0.5, 0, 0);
  CHECK_THROWS_AS(bin_predictions(log, 0), ConfigError);
  CHECK_THROWS_AS(ece(CalibrationBins{}), ConfigError);
}

TEST_CASE("bins csv round trip and diagram files") {
  PredictionLog log;
  add_group(log, 0.95, 9, 7);
  add_group(log, 0.55, 3, 1);
  auto bins = bin_predictions(log, 10);
  const auto csv = bins_csv(bins);
  CHECK(csv.rfind("bin_lo,bin_hi,count,accuracy,confidence\n", 0) == 0);
  auto back = parse_bins_csv(csv);
  CHECK(back.total == 12);
  CHECK(ece(back) == ece(bins));
  CHECK(mce(back) == mce(bins));

  auto dir = fs::temp_directory_path() / "bnnlab_test_cal";
  fs::create_directories(dir);
  reliability_diagram(bins, (dir / "rd").string(), "toy");
  std::ifstream svg(dir / "rd.svg");
  std::string text((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
  CHECK(text.find("<svg") != std::string::npos);
  CHECK(fs::exists(dir / "rd.csv"));
  CHECK_THROWS_AS(reliability_diagram(bins, "/nonexistent/dir/rd"), Error);
}
