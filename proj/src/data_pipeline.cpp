#include "moerl/data_pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "moerl/error.hpp"
#include "moerl/nn/checkpoint.hpp"

namespace moerl::data {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string two_digit(int j) { return (j < 10 ? "0" : "") + std::to_string(j); }

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

double parse_double(std::string_view field, std::size_t line_no, const char* column) {
  double v = 0.0;
  const auto* end = field.data() + field.size();
  auto res = std::from_chars(field.data(), end, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != end || !std::isfinite(v)) {
    throw DataError("line " + std::to_string(line_no) + ": missing or invalid value in column " + column);
  }
  return v;
}

long parse_int(std::string_view field, std::size_t line_no, const char* column) {
  long v = 0;
  const auto* end = field.data() + field.size();
  auto res = std::from_chars(field.data(), end, v);
  if (field.empty() || res.ec != std::errc() || res.ptr != end) {
    throw DataError("line " + std::to_string(line_no) + ": missing or invalid integer in column " + column);
  }
  return v;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

// ---------------------------------------------------------------------------
// ActionSpace

ActionSpace ActionSpace::from_edges(const std::array<double, 4>& iv, const std::array<double, 4>& vaso) {
  ActionSpace s{iv, vaso};
  s.validate();
  return s;
}

void ActionSpace::validate() const {
  auto check = [](const std::array<double, 4>& e, const char* drug) {
    if (!(e[0] > 0.0)) throw ConfigError(std::string(drug) + " bin edges must be positive");
    for (std::size_t b = 1; b < 4; ++b) {
      if (!(e[b] > e[b - 1])) throw ConfigError(std::string(drug) + " bin edges are not strictly increasing");
    }
  };
  check(iv_edges, "IV");
  check(vaso_edges, "vasopressor");
}

int ActionSpace::dose_bin(double dose, const std::array<double, 4>& edges) {
  if (dose < 0.0 || std::isnan(dose)) throw DataError("negative or missing dose " + fmt_double(dose));
  if (dose == 0.0) return 0;
  for (int b = 0; b < 3; ++b) {
    if (dose <= edges[static_cast<std::size_t>(b)]) return b + 1;
  }
  return 4;
}

nlohmann::json to_json(const ActionSpace& space) {
  return {{"iv_edges", space.iv_edges}, {"vaso_edges", space.vaso_edges}, {"count", kActionCount}};
}

ActionSpace action_space_from_json(const nlohmann::json& j) {
  try {
    return ActionSpace::from_edges(j.at("iv_edges").get<std::array<double, 4>>(),
                                   j.at("vaso_edges").get<std::array<double, 4>>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed action space: ") + e.what());
  }
}

int discretize_action(const ActionSpace& space, double iv, double vaso) {
  return kBinsPerDrug * ActionSpace::dose_bin(iv, space.iv_edges) + ActionSpace::dose_bin(vaso, space.vaso_edges);
}

double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw UsageError("percentile of empty list");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

ActionSpace fit_action_space(const std::vector<RawTrajectory>& train) {
  std::vector<double> iv, vaso;
  for (const auto& t : train) {
    for (const auto& s : t.steps) {
      if (s.iv_dose < 0.0 || s.vaso_dose < 0.0) throw DataError("negative dose in patient " + t.patient_id);
      if (s.iv_dose > 0.0) iv.push_back(s.iv_dose);
      if (s.vaso_dose > 0.0) vaso.push_back(s.vaso_dose);
    }
  }
  if (iv.empty()) throw ConfigError("no nonzero IV fluid dose in training data");
  if (vaso.empty()) throw ConfigError("no nonzero vasopressor dose in training data");
  std::sort(iv.begin(), iv.end());
  std::sort(vaso.begin(), vaso.end());
  ActionSpace s;
  for (std::size_t b = 0; b < 4; ++b) {
    const double q = 0.25 * static_cast<double>(b + 1);
    s.iv_edges[b] = percentile(iv, q);
    s.vaso_edges[b] = percentile(vaso, q);
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Preprocessing

double PreprocessStats::apply(int feature, double raw) const {
  const auto& f = features[static_cast<std::size_t>(feature)];
  if (f.constant) return 0.5;
  double v = 0.0;
  if (f.transform == FeatureTransform::log) {
    v = std::log1p(std::max(raw, 0.0));
  } else {
    v = (raw - f.mean) / f.stddev;
  }
  return std::clamp((v - f.min) / (f.max - f.min), 0.0, 1.0);
}

PreprocessStats fit_preprocess(const std::vector<RawTrajectory>& train) {
  if (train.size() < 2) throw DataError("fit_preprocess needs at least 2 trajectories");
  const auto catalog = feature_catalog();
  PreprocessStats stats;
  for (int j = 0; j < kFeatureCount; ++j) {
    auto& f = stats.features[static_cast<std::size_t>(j)];
    f.transform = catalog[static_cast<std::size_t>(j)].transform;
    std::vector<double> values;
    for (const auto& t : train) {
      for (std::size_t k = 0; k < t.steps.size(); ++k) {
        const double x = t.steps[k].features[static_cast<std::size_t>(j)];
        if (!std::isfinite(x)) {
          throw DataError("missing value for feature " + std::string(catalog[static_cast<std::size_t>(j)].name) +
                          " in patient " + t.patient_id + " step " + std::to_string(k));
        }
        if (f.transform == FeatureTransform::log && x < 0.0) {
          throw DataError("negative value " + fmt_double(x) + " for log feature " +
                          std::string(catalog[static_cast<std::size_t>(j)].name) + " in patient " + t.patient_id +
                          " step " + std::to_string(k));
        }
        values.push_back(f.transform == FeatureTransform::log ? std::log1p(x) : x);
      }
    }
    if (values.empty()) throw DataError("training trajectories have no steps");
    if (f.transform == FeatureTransform::standardize) {
      const double n = static_cast<double>(values.size());
      f.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
      double var = 0.0;
      for (double v : values) var += (v - f.mean) * (v - f.mean);
      f.stddev = std::sqrt(var / n);
      if (!(f.stddev > 0.0)) {
        f.constant = true;
        f.stddev = 1.0;
      } else {
        for (double& v : values) v = (v - f.mean) / f.stddev;
      }
    }
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    f.min = *lo;
    f.max = *hi;
    if (!(f.max > f.min)) f.constant = true;
    if (f.constant) {
      stats.warnings.push_back("feature " + std::string(catalog[static_cast<std::size_t>(j)].name) +
                               " is constant in training data; mapped to 0.5");
    }
  }
  return stats;
}

std::vector<Observation> apply_preprocess(const PreprocessStats& stats, const RawTrajectory& raw) {
  std::vector<Observation> out;
  out.reserve(raw.steps.size());
  for (std::size_t k = 0; k < raw.steps.size(); ++k) {
    Observation o;
    for (int j = 0; j < kFeatureCount; ++j) {
      const double x = raw.steps[k].features[static_cast<std::size_t>(j)];
      if (!std::isfinite(x)) {
        throw DataError("missing value in patient " + raw.patient_id + " step " + std::to_string(k));
      }
      o.values[static_cast<std::size_t>(j)] = stats.apply(j, x);
    }
    out.push_back(o);
  }
  return out;
}

ProcessedTrajectory process(const PreprocessStats& stats, const ActionSpace& space, const RawTrajectory& raw) {
  if (raw.steps.empty()) throw DataError("patient " + raw.patient_id + " has no steps");
  ProcessedTrajectory p;
  p.patient_id = raw.patient_id;
  p.outcome = raw.outcome;
  const auto obs = apply_preprocess(stats, raw);
  for (std::size_t k = 0; k < obs.size(); ++k) {
    p.steps.push_back({obs[k], discretize_action(space, raw.steps[k].iv_dose, raw.steps[k].vaso_dose)});
  }
  return p;
}

std::vector<ProcessedTrajectory> process_all(const PreprocessStats& stats, const ActionSpace& space,
                                             const std::vector<RawTrajectory>& raw) {
  std::vector<ProcessedTrajectory> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(process(stats, space, r));
  return out;
}

nlohmann::json to_json(const PreprocessStats& stats) {
  nlohmann::json features = nlohmann::json::array();
  const auto catalog = feature_catalog();
  for (std::size_t j = 0; j < kFeatureCount; ++j) {
    const auto& f = stats.features[j];
    features.push_back({{"name", std::string(catalog[j].name)},
                        {"transform", f.transform == FeatureTransform::log ? "log" : "standardize"},
                        {"mean", f.mean},
                        {"stddev", f.stddev},
                        {"min", f.min},
                        {"max", f.max},
                        {"constant", f.constant}});
  }
  return {{"features", features}, {"warnings", stats.warnings}};
}

PreprocessStats preprocess_stats_from_json(const nlohmann::json& j) {
  PreprocessStats stats;
  try {
    const auto& features = j.at("features");
    if (features.size() != kFeatureCount) throw DataError("preprocess stats must describe 45 features");
    for (std::size_t k = 0; k < kFeatureCount; ++k) {
      auto& f = stats.features[k];
      const auto& e = features[k];
      f.transform = e.at("transform").get<std::string>() == "log" ? FeatureTransform::log : FeatureTransform::standardize;
      f.mean = e.at("mean").get<double>();
      f.stddev = e.at("stddev").get<double>();
      f.min = e.at("min").get<double>();
      f.max = e.at("max").get<double>();
      f.constant = e.at("constant").get<bool>();
    }
    stats.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed preprocess stats: ") + e.what());
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Split

std::vector<std::size_t> split_indices(std::size_t n, double ratio, std::uint64_t seed) {
  if (n == 0) throw DataError("cannot split an empty cohort");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0,1)");
  auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (n >= 2) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  idx.resize(n_train);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---------------------------------------------------------------------------
// CSV

void write_cohort_csv(std::ostream& out, const std::vector<RawTrajectory>& cohort) {
  out << "patient_id,t";
  for (int j = 0; j < kFeatureCount; ++j) out << ",f_" << two_digit(j);
  out << ",iv_raw,vaso_raw,outcome\n";
  for (const auto& traj : cohort) {
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const auto& s = traj.steps[t];
      out << traj.patient_id << ',' << t;
      for (double v : s.features) out << ',' << fmt_double(v);
      out << ',' << fmt_double(s.iv_dose) << ',' << fmt_double(s.vaso_dose) << ','
          << static_cast<int>(traj.outcome) << '\n';
    }
  }
}

void write_cohort_csv(const std::filesystem::path& path, const std::vector<RawTrajectory>& cohort) {
  std::ostringstream ss;
  write_cohort_csv(ss, cohort);
  nn::write_file_atomic(path, ss.str());
}

std::vector<RawTrajectory> read_cohort_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("cohort CSV is empty (header row required)");
  strip_cr(line);
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  {
    std::string expected = "patient_id,t";
    for (int j = 0; j < kFeatureCount; ++j) expected += ",f_" + two_digit(j);
    expected += ",iv_raw,vaso_raw,outcome";
    if (line != expected) throw DataError("cohort CSV header does not match the 45-feature schema");
  }
  std::vector<RawTrajectory> cohort;
  std::size_t line_no = 1;
  constexpr std::size_t kColumns = 2 + kFeatureCount + 3;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != kColumns) {
      throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(kColumns) + " columns, got " +
                      std::to_string(fields.size()));
    }
    const std::string id(fields[0]);
    if (id.empty()) throw DataError("line " + std::to_string(line_no) + ": empty patient_id");
    const long t = parse_int(fields[1], line_no, "t");
    RawStep step;
    for (int j = 0; j < kFeatureCount; ++j) {
      const std::string col = "f_" + two_digit(j);
      step.features[static_cast<std::size_t>(j)] = parse_double(fields[static_cast<std::size_t>(2 + j)], line_no, col.c_str());
    }
    step.iv_dose = parse_double(fields[2 + kFeatureCount], line_no, "iv_raw");
    step.vaso_dose = parse_double(fields[3 + kFeatureCount], line_no, "vaso_raw");
    if (step.iv_dose < 0.0 || step.vaso_dose < 0.0) {
      throw DataError("line " + std::to_string(line_no) + ": negative dose");
    }
    const long outcome = parse_int(fields[4 + kFeatureCount], line_no, "outcome");
    if (outcome != 0 && outcome != 1) throw DataError("line " + std::to_string(line_no) + ": outcome must be 0 or 1");

    if (cohort.empty() || cohort.back().patient_id != id) {
      for (const auto& prev : cohort) {
        if (prev.patient_id == id) {
          throw DataError("line " + std::to_string(line_no) + ": rows of patient " + id + " are not contiguous");
        }
      }
      if (t != 0) throw DataError("line " + std::to_string(line_no) + ": patient " + id + " does not start at t=0");
      RawTrajectory traj;
      traj.patient_id = id;
      traj.outcome = outcome == 1 ? Outcome::non_survivor : Outcome::survivor;
      cohort.push_back(std::move(traj));
    } else {
      auto& traj = cohort.back();
      if (t != static_cast<long>(traj.steps.size())) {
        throw DataError("line " + std::to_string(line_no) + ": non-contiguous t for patient " + id);
      }
      if (static_cast<long>(traj.outcome) != outcome) {
        throw DataError("line " + std::to_string(line_no) + ": inconsistent outcome for patient " + id);
      }
    }
    cohort.back().steps.push_back(step);
  }
  if (cohort.empty()) throw DataError("cohort CSV has no data rows");
  return cohort;
}

std::vector<RawTrajectory> read_cohort_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open cohort CSV " + path.string());
  return read_cohort_csv(in);
}

void write_processed_csv(const std::filesystem::path& path, const std::vector<ProcessedTrajectory>& cohort) {
  std::ostringstream out;
  out << "patient_id,t";
  for (int j = 0; j < kFeatureCount; ++j) out << ",o_" << two_digit(j);
  out << ",action,outcome\n";
  for (const auto& traj : cohort) {
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      out << traj.patient_id << ',' << t;
      for (double v : traj.steps[t].observation.values) out << ',' << fmt_double(v);
      out << ',' << traj.steps[t].action << ',' << static_cast<int>(traj.outcome) << '\n';
    }
  }
  nn::write_file_atomic(path, out.str());
}

std::vector<ProcessedTrajectory> read_processed_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + " is empty");
  std::vector<ProcessedTrajectory> cohort;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != 2 + kFeatureCount + 2) throw DataError("line " + std::to_string(line_no) + ": wrong column count");
    const std::string id(fields[0]);
    if (cohort.empty() || cohort.back().patient_id != id) {
      ProcessedTrajectory p;
      p.patient_id = id;
      p.outcome = parse_int(fields[3 + kFeatureCount], line_no, "outcome") == 1 ? Outcome::non_survivor
                                                                                : Outcome::survivor;
      cohort.push_back(std::move(p));
    }
    ProcessedStep step;
    for (int j = 0; j < kFeatureCount; ++j) {
      step.observation.values[static_cast<std::size_t>(j)] =
          parse_double(fields[static_cast<std::size_t>(2 + j)], line_no, "o");
    }
    const long a = parse_int(fields[2 + kFeatureCount], line_no, "action");
    if (a < 0 || a >= kActionCount) throw DataError("line " + std::to_string(line_no) + ": action outside [0,24]");
    step.action = static_cast<int>(a);
    cohort.back().steps.push_back(step);
  }
  return cohort;
}

}  // namespace moerl::data
