#include "bnnlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "bnnlab/error.hpp"

namespace bnnlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end())
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

std::vector<double> eps_grid(const json& j, const char* key, const std::vector<double>& fallback) {
  if (!j.contains(key)) return fallback;
  auto grid = j.at(key).get<std::vector<double>>();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0)) throw ConfigError(std::string("attacks.") + key + ": epsilons must be >= 0");
    if (i > 0 && !(grid[i] > grid[i - 1]))
      throw ConfigError(std::string("attacks.") + key + ": epsilons must be strictly ascending");
  }
  return grid;
}

std::vector<double> linspace_steps(double step, std::size_t count) {
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(static_cast<double>(i) * step);
  return out;
}

struct DataShape {
  std::size_t channels, size, classes;
};

DataShape data_shape(const DatasetConfig& d) {
  if (d.kind == "cifar10") return {3, 32, 10};
  return {d.synth.channels, d.synth.image_size, d.synth.classes};
}

RosterEntry roster_entry_from_json(const json& j, const DataShape& shape, std::size_t index) {
  const std::string where = "roster[" + std::to_string(index) + "]";
  check_keys(j, {"name", "arch", "bayesian", "arch_options", "spec", "train"}, where);
  RosterEntry e;
  e.source = j;
  e.name = j.at("name").get<std::string>();
  if (e.name.empty() || e.name.find_first_of("/\\ ,") != std::string::npos)
    throw ConfigError(where + ": name must be nonempty without spaces, commas or slashes");
  const std::string arch = j.value("arch", "plain_cnn");
  const bool bayesian = j.value("bayesian", false);
  ArchOptions opts;
  if (j.contains("arch_options")) {
    const auto& o = j.at("arch_options");
    check_keys(o, {"width", "growth", "depth", "blocks"}, where + ".arch_options");
    opts.width = o.value("width", opts.width);
    opts.growth = o.value("growth", opts.growth);
    opts.depth = o.value("depth", opts.depth);
    opts.blocks = o.value("blocks", opts.blocks);
  }
  if (arch == "plain_cnn") {
    e.spec = plain_cnn_spec(shape.channels, shape.size, shape.classes, bayesian, opts);
  } else if (arch == "mini_dense") {
    e.spec = mini_dense_spec(shape.channels, shape.size, shape.classes, bayesian, opts);
  } else if (arch == "custom") {
    if (!j.contains("spec")) throw ConfigError(where + ": custom arch needs a spec");
    e.spec = model_spec_from_json(j.at("spec"));
  } else {
    throw ConfigError(where + ": unknown arch '" + arch + "'");
  }
  if (arch != "custom" && j.contains("spec")) throw ConfigError(where + ": spec is only valid with arch 'custom'");
  e.train = train_config_from_json(j.value("train", json::object()));
  return e;
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j) {
  check_keys(j, {"dataset", "roster", "attacks", "eval_samples", "calibration_bins", "eval_limit", "output_dir",
                 "seed", "comment"},
             "config");
  try {
    ExperimentConfig c;
    c.source = j;
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.eval_samples = j.value("eval_samples", c.eval_samples);
    c.calibration_bins = j.value("calibration_bins", c.calibration_bins);
    c.eval_limit = j.value("eval_limit", c.eval_limit);
    if (c.eval_samples < 1) throw ConfigError("config: eval_samples must be >= 1");
    if (c.calibration_bins < 1) throw ConfigError("config: calibration_bins must be >= 1");

    const json d = j.value("dataset", json::object());
    check_keys(d, {"kind", "classes", "channels", "image_size", "samples_per_class", "noise", "contrast", "seed",
                   "dir"},
               "dataset");
    c.dataset.kind = d.value("kind", c.dataset.kind);
    if (c.dataset.kind == "synthetic") {
      auto& s = c.dataset.synth;
      s.classes = d.value("classes", s.classes);
      s.channels = d.value("channels", s.channels);
      s.image_size = d.value("image_size", s.image_size);
      s.samples_per_class = d.value("samples_per_class", s.samples_per_class);
      s.noise = d.value("noise", s.noise);
      s.contrast = d.value("contrast", s.contrast);
      s.seed = d.value("seed", s.seed);
      if (d.contains("dir")) throw ConfigError("dataset: dir is only valid for cifar10");
    } else if (c.dataset.kind == "cifar10") {
      c.dataset.cifar_dir = d.value("dir", std::string());
      if (c.dataset.cifar_dir.empty()) throw ConfigError("dataset: cifar10 needs a dir");
    } else {
      throw ConfigError("dataset: unknown kind '" + c.dataset.kind + "'");
    }

    const DataShape shape = data_shape(c.dataset);
    std::set<std::string> names;
    const json roster = j.value("roster", json::array());
    if (!roster.is_array() || roster.empty()) throw ConfigError("config: roster must be a nonempty array");
    for (std::size_t i = 0; i < roster.size(); ++i) {
      RosterEntry e = roster_entry_from_json(roster[i], shape, i);
      if (!names.insert(e.name).second) throw ConfigError("config: duplicate roster name '" + e.name + "'");
      c.roster.push_back(std::move(e));
    }

    const json a = j.value("attacks", json::object());
    check_keys(a, {"linf_eps", "l2_eps", "pgd_iters", "iter_sweep", "iter_sweep_eps", "grad_samples",
                   "random_start", "freeze_draws", "eot"},
               "attacks");
    auto& g = c.attacks;
    g.linf_eps = eps_grid(a, "linf_eps", linspace_steps(0.01, 8));
    g.l2_eps = eps_grid(a, "l2_eps", linspace_steps(0.5, 9));
    g.pgd_iters = a.value("pgd_iters", g.pgd_iters);
    std::vector<std::size_t> sweep;
    for (std::size_t t = 10; t <= 100; t += 10) sweep.push_back(t);
    g.iter_sweep = a.value("iter_sweep", sweep);
    g.iter_sweep_eps = a.value("iter_sweep_eps", g.iter_sweep_eps);
    g.grad_samples = a.value("grad_samples", g.grad_samples);
    g.random_start = a.value("random_start", g.random_start);
    g.freeze_draws = a.value("freeze_draws", g.freeze_draws);
    if (a.contains("eot")) {
      const auto& e = a.at("eot");
      check_keys(e, {"ensemble", "iters", "rotation_deg", "translation_px"}, "attacks.eot");
      g.eot.ensemble = e.value("ensemble", g.eot.ensemble);
      g.eot.rotation_deg = e.value("rotation_deg", g.eot.rotation_deg);
      g.eot.translation_px = e.value("translation_px", g.eot.translation_px);
      g.eot_iters = e.value("iters", g.eot_iters);
    }
    for (auto t : g.pgd_iters)
      if (t < 1) throw ConfigError("attacks.pgd_iters: iterations must be >= 1");
    for (auto t : g.iter_sweep)
      if (t < 1) throw ConfigError("attacks.iter_sweep: iterations must be >= 1");
    if (g.grad_samples < 1) throw ConfigError("attacks.grad_samples must be >= 1");
    if (g.eot.ensemble < 1 || g.eot_iters < 1) throw ConfigError("attacks.eot: ensemble and iters must be >= 1");
    if (!(g.iter_sweep_eps >= 0.0)) throw ConfigError("attacks.iter_sweep_eps must be >= 0");
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

json default_experiment_json() {
  const json adversarial = {{"kind", "pgd"}, {"norm", "linf"}, {"eps", 0.03}, {"iters", 10}, {"grad_samples", 1}};
  const json dense_opts = {{"width", 8}, {"growth", 6}, {"depth", 2}, {"blocks", 1}};
  const json plain_opts = {{"width", 8}};
  const json train = {{"epochs", 40}, {"batch_size", 32}, {"lr", 0.01}, {"beta_kl", 0.1}, {"kl_reduction", "mean"}};
  json adv_train = train;
  adv_train["adversarial"] = adversarial;
  auto entry = [](const char* name, const char* arch, bool bayes, const json& opts, const json& t) {
    return json{{"name", name}, {"arch", arch}, {"bayesian", bayes}, {"arch_options", opts}, {"train", t}};
  };
  return json{
      {"seed", 2024},
      {"output_dir", "runs/default"},
      {"dataset",
       {{"kind", "synthetic"},
        {"classes", 4},
        {"channels", 1},
        {"image_size", 8},
        {"samples_per_class", 200},
        {"noise", 0.1},
        {"contrast", 0.25},
        {"seed", 1}}},
      {"roster",
       json::array({entry("PlainCNN", "plain_cnn", false, plain_opts, train),
                    entry("MiniDense", "mini_dense", false, dense_opts, train),
                    entry("BayesPlainCNN", "plain_cnn", true, plain_opts, train),
                    entry("BayesMiniDense", "mini_dense", true, dense_opts, train),
                    entry("AdvMiniDense", "mini_dense", false, dense_opts, adv_train),
                    entry("AdvBayesMiniDense", "mini_dense", true, dense_opts, adv_train)})},
      {"attacks",
       {{"linf_eps", linspace_steps(0.01, 8)},
        {"l2_eps", linspace_steps(0.5, 9)},
        {"pgd_iters", {10, 40}},
        {"iter_sweep", {10, 20, 30, 40, 50, 60, 70, 80, 90, 100}},
        {"iter_sweep_eps", 0.03},
        {"grad_samples", 10},
        {"random_start", false},
        {"eot", {{"ensemble", 30}, {"iters", 40}, {"rotation_deg", 10.0}, {"translation_px", 2.0}}}}},
      {"eval_samples", 10},
      {"calibration_bins", 10},
      {"eval_limit", 0}};
}

// ---------------------------------------------------------------- tables

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

const char* kResultsHeader =
    "model,attack,norm,eps,iterations,alpha,random_start,grad_samples,eot,ensemble,rotation_deg,translation_px,"
    "eval_samples,accuracy,seed";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string ResultsTable::to_csv(bool with_time) const {
  std::string out = kResultsHeader;
  out += with_time ? ",seconds\n" : "\n";
  for (const auto& r : rows) {
    out += r.model + ',' + r.attack + ',' + r.norm + ',' + fmt(r.eps) + ',' + std::to_string(r.iterations) + ',' +
           fmt(r.alpha) + ',' + (r.random_start ? "1" : "0") + ',' + std::to_string(r.grad_samples) + ',' +
           (r.eot ? "1" : "0") + ',' + std::to_string(r.ensemble) + ',' + fmt(r.rotation_deg) + ',' +
           fmt(r.translation_px) + ',' + std::to_string(r.eval_samples) + ',' + fmt(r.accuracy) + ',' +
           std::to_string(r.seed);
    if (with_time) {
      char buf[32];
      std::snprintf(buf, sizeof buf, ",%.3f", r.seconds);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

ResultsTable ResultsTable::from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line.rfind(kResultsHeader, 0) != 0)
    throw FormatError("results csv: unexpected header");
  const bool with_time = line.size() > std::string(kResultsHeader).size();
  ResultsTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != (with_time ? 16u : 15u)) throw FormatError("results csv: malformed row '" + line + "'");
    try {
      ResultRow r;
      r.model = f[0];
      r.attack = f[1];
      r.norm = f[2];
      r.eps = std::stod(f[3]);
      r.iterations = std::stoul(f[4]);
      r.alpha = std::stod(f[5]);
      r.random_start = f[6] == "1";
      r.grad_samples = std::stoul(f[7]);
      r.eot = f[8] == "1";
      r.ensemble = std::stoul(f[9]);
      r.rotation_deg = std::stod(f[10]);
      r.translation_px = std::stod(f[11]);
      r.eval_samples = std::stoul(f[12]);
      r.accuracy = std::stod(f[13]);
      r.seed = std::stoull(f[14]);
      if (with_time) r.seconds = std::stod(f[15]);
      t.rows.push_back(r);
    } catch (const std::logic_error&) {
      throw FormatError("results csv: malformed row '" + line + "'");
    }
  }
  return t;
}

std::uint64_t tuple_seed(std::uint64_t master, const std::string& tuple) { return derive_seed(master, tuple); }

// ---------------------------------------------------------------- charts

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::vector<double>& xs,
                           const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
                                 "#7f7f7f"};
  constexpr double w = 420, h = 300, left = 50, top = 30, right = 150, bottom = 45;
  const double x0 = xs.empty() ? 0.0 : xs.front();
  const double x1 = xs.empty() || xs.back() == x0 ? x0 + 1.0 : xs.back();
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * w; };
  auto py = [&](double y) { return top + (1.0 - y) * h; };
  std::ostringstream s;
  s.precision(3);
  s << std::fixed;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + w + right << "\" height=\""
    << top + h + bottom << "\">\n";
  s << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << w << "\" height=\"" << h
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = k / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << y
      << "</text>\n";
  }
  for (double x : xs)
    s << "<text x=\"" << px(x) << "\" y=\"" << top + h + 14 << "\" text-anchor=\"middle\" font-size=\"10\">"
      << fmt(x) << "</text>\n";
  s << "<text x=\"" << left + w / 2 << "\" y=\"" << top + h + 36 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << x_label << "</text>\n";
  s << "<text x=\"" << left + w / 2 << "\" y=\"" << top - 10 << "\" text-anchor=\"middle\" font-size=\"13\">"
    << title << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = colors[k % std::size(colors)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < xs.size() && i < series[k].second.size(); ++i)
      s << (i ? " " : "") << px(xs[i]) << ',' << py(series[k].second[i]);
    s << "\"/>\n";
    s << "<text x=\"" << left + w + 10 << "\" y=\"" << top + 14 + 16.0 * k << "\" font-size=\"11\" fill=\"" << color
      << "\">" << series[k].first << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------- runs

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw Error(path.string() + ": write failed");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(path.string() + ": cannot open");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Records a verb's status in manifest.json, keeping entries of other verbs.
void update_manifest(const ExperimentConfig& cfg, const RunOutcome& r, double seconds, bool finished) {
  const fs::path path = fs::path(cfg.output_dir) / "manifest.json";
  json m = json::object();
  if (fs::exists(path)) {
    try {
      m = json::parse(read_file(path));
    } catch (const json::exception&) {
      m = json::object();
    }
  }
  m["tool"] = "bnnlab";
  m["format_version"] = 1;
  m["master_seed"] = cfg.seed;
  m["config"] = cfg.source;
  m["runs"][r.verb] = {{"complete", finished && r.complete},
                       {"finished", finished},
                       {"failures", r.failures},
                       {"files", r.files},
                       {"seconds", seconds}};
  bool all = true;
  for (const auto& [_, run] : m["runs"].items()) all = all && run.value("complete", false);
  m["complete"] = all;
  write_file(path, m.dump(2) + "\n");
}

template <class Body>
RunOutcome run_verb(const ExperimentConfig& cfg, const std::string& verb, Body&& body) {
  RunOutcome r;
  r.verb = verb;
  const auto start = Clock::now();
  fs::create_directories(cfg.output_dir);
  update_manifest(cfg, r, 0.0, false);
  try {
    body(r);
  } catch (const Error& e) {
    r.complete = false;
    r.failures.push_back(e.what());
  }
  update_manifest(cfg, r, since(start), true);
  return r;
}

void emit(RunOutcome& r, const ExperimentConfig& cfg, const std::string& rel, const std::string& text) {
  write_file(fs::path(cfg.output_dir) / rel, text);
  r.files.push_back(rel);
}

std::uint64_t eval_seed(const ExperimentConfig& cfg, const std::string& model) {
  return tuple_seed(cfg.seed, "eval/" + model);
}

struct LoadedModels {
  std::vector<std::pair<std::string, Model>> models;
  Dataset test;
};

LoadedModels load_models(const ExperimentConfig& cfg) {
  LoadedModels out;
  for (const auto& e : cfg.roster) {
    const std::string path = checkpoint_path(cfg, e.name);
    if (!fs::exists(path)) throw Error("missing checkpoint for model '" + e.name + "': " + path);
    out.models.emplace_back(e.name, load_checkpoint(path));
  }
  out.test = load_experiment_data(cfg).test.head(cfg.eval_limit);
  return out;
}

// One attack family of a sweep: a label, the swept values and a config per value.
struct Series {
  std::string label;
  std::string x_name;
  std::vector<double> xs;
  std::vector<AttackConfig> points;
};

ResultRow attack_row(const std::string& model, const AttackConfig& a, std::size_t eval_samples) {
  ResultRow r;
  r.model = model;
  r.attack = std::string(attack_kind_name(a.kind));
  r.norm = std::string(norm_name(a.norm));
  r.eps = a.eps;
  r.iterations = a.iters;
  r.alpha = a.step_size();
  r.random_start = a.random_start;
  r.grad_samples = a.eot ? a.eot->ensemble : a.grad_samples;
  r.eot = a.eot.has_value();
  if (a.eot) {
    r.ensemble = a.eot->ensemble;
    r.rotation_deg = a.eot->rotation_deg;
    r.translation_px = a.eot->translation_px;
  }
  r.eval_samples = eval_samples;
  return r;
}

std::string point_key(const std::string& model, const std::string& label, const AttackConfig& a) {
  return "attack/" + model + "/" + label + "/" + fmt(a.eps) + "/" + std::to_string(a.iters);
}

// Evaluates every (model, series, point); grid order fixes row order.
void run_series(RunOutcome& r, const ExperimentConfig& cfg, const std::vector<Series>& families,
                const std::string& stem) {
  LoadedModels lm = load_models(cfg);
  for (const auto& fam : families) {
    std::vector<std::pair<std::string, std::vector<double>>> curves;
    for (const auto& [name, model] : lm.models) {
      std::vector<double> accs;
      try {
        for (const auto& point : fam.points) {
          const auto start = Clock::now();
          ResultRow row = attack_row(name, point, cfg.eval_samples);
          row.seed = tuple_seed(cfg.seed, point_key(name, fam.label, point));
          row.accuracy = evaluate(model, lm.test, &point, cfg.eval_samples, eval_seed(cfg, name), row.seed);
          row.seconds = since(start);
          accs.push_back(row.accuracy);
          r.table.rows.push_back(row);
        }
      } catch (const Error& e) {
        r.complete = false;
        r.failures.push_back("model " + name + ", " + fam.label + ": " + e.what());
      }
      curves.emplace_back(name, std::move(accs));
    }
    std::string csv = fam.x_name;
    for (const auto& c : curves) csv += "," + c.first;
    csv += "\n";
    for (std::size_t i = 0; i < fam.xs.size(); ++i) {
      csv += fmt(fam.xs[i]);
      for (const auto& c : curves) csv += "," + (i < c.second.size() ? fmt(c.second[i]) : std::string());
      csv += "\n";
    }
    emit(r, cfg, "plots/" + stem + "_" + fam.label + ".csv", csv);
    emit(r, cfg, "plots/" + stem + "_" + fam.label + ".svg", line_chart_svg(fam.label, fam.x_name, fam.xs, curves));
  }
  emit(r, cfg, stem + ".csv", r.table.to_csv());
}

AttackConfig grid_attack(const ExperimentConfig& cfg, AttackKind kind, Norm norm, double eps, std::size_t iters) {
  AttackConfig a = kind == AttackKind::Fgsm ? AttackConfig::fgsm(eps, cfg.attacks.grad_samples)
                                            : AttackConfig::pgd(norm, eps, iters, cfg.attacks.grad_samples);
  if (kind == AttackKind::Pgd) {
    a.random_start = cfg.attacks.random_start;
    a.freeze_draws = cfg.attacks.freeze_draws;
  }
  return a;
}

}  // namespace

std::string checkpoint_path(const ExperimentConfig& cfg, const std::string& model) {
  return (fs::path(cfg.output_dir) / "checkpoints" / (model + ".bnnl")).string();
}

DatasetSplit load_experiment_data(const ExperimentConfig& cfg) {
  if (cfg.dataset.kind == "cifar10") return load_cifar10(cfg.dataset.cifar_dir);
  return synth_dataset(cfg.dataset.synth);
}

RunOutcome run_training_suite(const ExperimentConfig& cfg) {
  return run_verb(cfg, "train", [&](RunOutcome& r) {
    const DatasetSplit data = load_experiment_data(cfg);
    const Dataset test = data.test.head(cfg.eval_limit);
    std::string clean = "model,accuracy,eval_samples,seed\n";
    for (const auto& e : cfg.roster) {
      try {
        const std::uint64_t init_seed = tuple_seed(cfg.seed, "init/" + e.name);
        TrainConfig tc = e.train;
        tc.seed = tuple_seed(cfg.seed, "train/" + e.name);
        Model model = build_model(e.spec, init_seed);
        const TrainReport report = train(model, data.train, tc);
        model.metadata() = {{"name", e.name}, {"init_seed", init_seed}, {"train_seed", tc.seed},
                            {"train", to_json(tc)}, {"optimizer", "adam"}};
        const std::string rel = "checkpoints/" + e.name + ".bnnl";
        fs::create_directories(fs::path(cfg.output_dir) / "checkpoints");
        save_checkpoint(model, checkpoint_path(cfg, e.name));
        r.files.push_back(rel);
        emit(r, cfg, "training/" + e.name + ".csv", report.to_csv());
        ResultRow row;
        row.model = e.name;
        row.attack = "none";
        row.norm = "none";
        row.eval_samples = cfg.eval_samples;
        row.seed = eval_seed(cfg, e.name);
        const auto start = Clock::now();
        row.accuracy = evaluate(model, test, nullptr, cfg.eval_samples, row.seed);
        row.seconds = since(start);
        r.table.rows.push_back(row);
        clean += e.name + "," + fmt(row.accuracy) + "," + std::to_string(row.eval_samples) + "," +
                 std::to_string(row.seed) + "\n";
      } catch (const Error& err) {
        r.complete = false;
        r.failures.push_back("model " + e.name + ": " + err.what());
      }
    }
    emit(r, cfg, "clean_accuracy.csv", clean);
  });
}

RunOutcome run_epsilon_sweep(const ExperimentConfig& cfg) {
  return run_verb(cfg, "sweep-eps", [&](RunOutcome& r) {
    std::vector<Series> fams;
    Series f{"linf-fgsm", "eps", cfg.attacks.linf_eps, {}};
    for (double e : cfg.attacks.linf_eps) f.points.push_back(grid_attack(cfg, AttackKind::Fgsm, Norm::Linf, e, 1));
    fams.push_back(f);
    for (Norm norm : {Norm::Linf, Norm::L2}) {
      const auto& grid = norm == Norm::Linf ? cfg.attacks.linf_eps : cfg.attacks.l2_eps;
      for (std::size_t t : cfg.attacks.pgd_iters) {
        Series s{std::string(norm_name(norm)) + "-pgd" + std::to_string(t), "eps", grid, {}};
        for (double e : grid) s.points.push_back(grid_attack(cfg, AttackKind::Pgd, norm, e, t));
        fams.push_back(s);
      }
    }
    run_series(r, cfg, fams, "sweep_eps");
  });
}

RunOutcome run_iteration_sweep(const ExperimentConfig& cfg) {
  return run_verb(cfg, "sweep-iters", [&](RunOutcome& r) {
    Series s{"linf-pgd", "iterations", {}, {}};
    for (std::size_t t : cfg.attacks.iter_sweep) {
      s.xs.push_back(static_cast<double>(t));
      s.points.push_back(grid_attack(cfg, AttackKind::Pgd, Norm::Linf, cfg.attacks.iter_sweep_eps, t));
    }
    run_series(r, cfg, {s}, "sweep_iters");
  });
}

RunOutcome run_eot_campaign(const ExperimentConfig& cfg) {
  return run_verb(cfg, "eot", [&](RunOutcome& r) {
    Series f{"eot-linf-fgsm", "eps", cfg.attacks.linf_eps, {}};
    Series p{"eot-linf-pgd" + std::to_string(cfg.attacks.eot_iters), "eps", cfg.attacks.linf_eps, {}};
    for (double e : cfg.attacks.linf_eps) {
      AttackConfig a = grid_attack(cfg, AttackKind::Fgsm, Norm::Linf, e, 1);
      a.eot = cfg.attacks.eot;
      f.points.push_back(a);
      AttackConfig b = grid_attack(cfg, AttackKind::Pgd, Norm::Linf, e, cfg.attacks.eot_iters);
      b.eot = cfg.attacks.eot;
      p.points.push_back(b);
    }
    run_series(r, cfg, {f, p}, "eot");
  });
}

RunOutcome run_calibration_report(const ExperimentConfig& cfg) {
  return run_verb(cfg, "calibrate", [&](RunOutcome& r) {
    LoadedModels lm = load_models(cfg);
    std::string summary = "model,ece,mce,n_bins,eval_samples,seed\n";
    for (const auto& [name, model] : lm.models) {
      try {
        const std::uint64_t seed = eval_seed(cfg, name);
        const Tensor probs = predict_dataset(model, lm.test, cfg.eval_samples, seed);
        const CalibrationReport rep =
            calibration_report(PredictionLog::from_probabilities(probs, lm.test.labels), cfg.calibration_bins);
        emit(r, cfg, "calibration/" + name + ".csv", bins_csv(rep.bins));
        emit(r, cfg, "calibration/" + name + ".svg", reliability_svg(rep.bins, name));
        char buf[96];
        std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%zu,%zu,", rep.ece, rep.mce, cfg.calibration_bins,
                      cfg.eval_samples);
        summary += name + buf + std::to_string(seed) + "\n";
        r.calibration.emplace_back(name, rep);
      } catch (const Error& e) {
        r.complete = false;
        r.failures.push_back("model " + name + ": " + e.what());
      }
    }
    emit(r, cfg, "calibration.csv", summary);
  });
}

RunOutcome run_report(const ExperimentConfig& cfg) {
  return run_verb(cfg, "report", [&](RunOutcome& r) {
    const fs::path dir = cfg.output_dir;
    std::string md = "# Run summary\n\nMaster seed: " + std::to_string(cfg.seed) + "\n";
    std::string csv = std::string("source,") + kResultsHeader + "\n";
    bool any = false;
    auto table_md = [&](const std::string& source, const ResultsTable& t) {
      // One line per (model, attack family), accuracy per swept value.
      std::vector<std::string> keys;
      std::map<std::string, std::vector<std::pair<std::string, double>>> lines;
      for (const auto& row : t.rows) {
        std::string key = row.model + " | " + (row.eot ? "eot-" : "") + row.norm + "-" + row.attack;
        if (row.attack == "pgd" && source != "sweep_iters") key += std::to_string(row.iterations);
        if (!lines.count(key)) keys.push_back(key);
        const std::string x = source == "sweep_iters" ? "T=" + std::to_string(row.iterations) : "eps=" + fmt(row.eps);
        lines[key].emplace_back(x, row.accuracy);
      }
      md += "\n## " + source + "\n\n";
      for (const auto& k : keys) {
        md += "- " + k + ":";
        for (const auto& [x, acc] : lines[k]) md += " " + x + " " + fmt(acc) + ";";
        md += "\n";
      }
    };
    for (const char* source : {"sweep_eps", "sweep_iters", "eot"}) {
      const fs::path p = dir / (std::string(source) + ".csv");
      if (!fs::exists(p)) continue;
      any = true;
      const ResultsTable t = ResultsTable::from_csv(read_file(p));
      std::istringstream lines(t.to_csv(false));
      std::string line;
      std::getline(lines, line);
      while (std::getline(lines, line)) csv += std::string(source) + "," + line + "\n";
      table_md(source, t);
    }
    for (const char* source : {"clean_accuracy", "calibration"}) {
      const fs::path p = dir / (std::string(source) + ".csv");
      if (!fs::exists(p)) continue;
      any = true;
      md += "\n## " + std::string(source) + "\n\n```\n" + read_file(p) + "```\n";
    }
    if (!any) throw Error("report: no result tables under " + dir.string());
    emit(r, cfg, "summary.csv", csv);
    emit(r, cfg, "summary.md", md);
  });
}

}  // namespace bnnlab
