#include "moerl/ope_wdr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "moerl/data_pipeline.hpp"
#include "moerl/error.hpp"
#include "moerl/nn/checkpoint.hpp"
#include "moerl/types.hpp"

namespace moerl {

using nn::Matrix;
using nn::Vector;

void EvaluationDataset::validate() const {
  if (trajectories.empty()) throw DataError("evaluation dataset has no trajectories");
  if (!(discount > 0.0 && discount <= 1.0)) throw ConfigError("discount must lie in (0,1]");
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& tr = trajectories[i];
    const auto n = tr.length();
    const auto where = "evaluation trajectory " + std::to_string(i);
    if (n == 0) throw DataError(where + " is empty");
    if (tr.pi_e.size() != n || tr.pi_b.size() != n) throw DataError(where + " has mismatched probability columns");
    if (zero_variates) {
      if (!tr.q_hat.empty() || !tr.v_hat.empty()) {
        throw UsageError(where + " carries control variates but the dataset declares zero variates");
      }
    } else if (tr.q_hat.size() != n || tr.v_hat.size() != n) {
      throw UsageError(where + " is missing control variates; set zero_variates to evaluate without them");
    }
    for (std::size_t t = 0; t < n; ++t) {
      const auto at = where + " step " + std::to_string(t);
      if (!(tr.pi_b[t] > 0.0) || !std::isfinite(tr.pi_b[t])) throw DataError(at + ": behavior probability must be > 0");
      if (!(tr.pi_e[t] >= 0.0) || !std::isfinite(tr.pi_e[t])) throw DataError(at + ": evaluated probability must be >= 0");
      if (!std::isfinite(tr.rewards[t])) throw DataError(at + ": reward is not finite");
      if (!zero_variates && (!std::isfinite(tr.q_hat[t]) || !std::isfinite(tr.v_hat[t]))) {
        throw DataError(at + ": control variate is not finite");
      }
    }
  }
}

std::size_t EvaluationDataset::horizon() const {
  std::size_t t = 0;
  for (const auto& tr : trajectories) t = std::max(t, tr.length());
  return t;
}

namespace {

// Single pass over t. Fills the weight matrix and the parameter gradient when
// asked.
double wdr_pass(const EvaluationDataset& data, const std::vector<Matrix>* dpi, Vector* grad, Matrix* weights) {
  data.validate();
  const auto n = data.trajectories.size();
  const auto horizon = data.horizon();
  const Eigen::Index p = dpi && !dpi->empty() ? dpi->front().cols() : 0;
  if (dpi) {
    if (dpi->size() != n) throw ShapeError("policy derivative list must hold one matrix per trajectory");
    for (std::size_t i = 0; i < n; ++i) {
      if ((*dpi)[i].rows() != static_cast<Eigen::Index>(data.trajectories[i].length()) || (*dpi)[i].cols() != p) {
        throw ShapeError("policy derivative of trajectory " + std::to_string(i) + " has the wrong shape");
      }
    }
  }
  if (weights) weights->setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(horizon));
  if (grad) grad->setZero(p);

  std::vector<double> log_rho(n, 0.0);
  std::vector<char> alive(n, 1);
  Vector w(static_cast<Eigen::Index>(n));
  Vector w_prev = Vector::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n));
  Matrix g = Matrix::Zero(p, static_cast<Eigen::Index>(n));  // d log rho per patient
  Matrix dw = Matrix::Zero(p, static_cast<Eigen::Index>(n));
  Matrix dw_prev = Matrix::Zero(p, static_cast<Eigen::Index>(n));

  double value = 0.0;
  double discount_t = 1.0;
  for (std::size_t t = 0; t < horizon; ++t) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& tr = data.trajectories[i];
      if (t < tr.length() && alive[i]) {
        if (tr.pi_e[t] > 0.0) {
          log_rho[i] += std::log(tr.pi_e[t]) - std::log(tr.pi_b[t]);
          if (p > 0) g.col(static_cast<Eigen::Index>(i)) += (*dpi)[i].row(static_cast<Eigen::Index>(t)).transpose() / tr.pi_e[t];
        } else {
          alive[i] = 0;
        }
      }
      if (alive[i]) top = std::max(top, log_rho[i]);
    }
    if (!std::isfinite(top)) {
      throw NumericalError("degenerate importance weights: every ratio is zero at t = " + std::to_string(t));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w[static_cast<Eigen::Index>(i)] = alive[i] ? std::exp(log_rho[i] - top) : 0.0;
      total += w[static_cast<Eigen::Index>(i)];
    }
    w /= total;
    if (p > 0) {
      const Vector g_bar = g * w;
      for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<Eigen::Index>(i);
        dw.col(c) = w[c] * (g.col(c) - g_bar);
      }
    }
    double step = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& tr = data.trajectories[i];
      if (t >= tr.length()) continue;
      const auto c = static_cast<Eigen::Index>(i);
      const double q = data.zero_variates ? 0.0 : tr.q_hat[t];
      const double v = data.zero_variates ? 0.0 : tr.v_hat[t];
      step += w[c] * (tr.rewards[t] - q) + w_prev[c] * v;
      if (grad && p > 0) *grad += discount_t * (dw.col(c) * (tr.rewards[t] - q) + dw_prev.col(c) * v);
    }
    value += discount_t * step;
    if (weights) weights->col(static_cast<Eigen::Index>(t)) = w;
    w_prev = w;
    if (p > 0) std::swap(dw, dw_prev);
    discount_t *= data.discount;
  }
  return value;
}

std::string decade_label(int k) {
  // bin [1e-k, 1e-(k-1))
  std::ostringstream s;
  if (k == 1) {
    s << "[1e-1,1]";
  } else if (k == 2) {
    s << "[1e-2,1e-1)";
  } else {
    s << "[1e-" << k << ",1e-" << (k - 1) << ")";
  }
  return s.str();
}

}  // namespace

Matrix importance_weights(const EvaluationDataset& data) {
  Matrix w;
  wdr_pass(data, nullptr, nullptr, &w);
  return w;
}

double wdr_estimate(const EvaluationDataset& data) { return wdr_pass(data, nullptr, nullptr, nullptr); }

double wdr_from_weights(const EvaluationDataset& data, const Matrix& weights) {
  data.validate();
  const auto n = data.trajectories.size();
  if (weights.rows() != static_cast<Eigen::Index>(n) || weights.cols() != static_cast<Eigen::Index>(data.horizon())) {
    throw ShapeError("weight matrix does not match the dataset");
  }
  double value = 0.0;
  double discount_t = 1.0;
  for (Eigen::Index t = 0; t < weights.cols(); ++t) {
    double step = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& tr = data.trajectories[i];
      if (static_cast<std::size_t>(t) >= tr.length()) continue;
      const auto r = static_cast<Eigen::Index>(i);
      const auto ts = static_cast<std::size_t>(t);
      const double q = data.zero_variates ? 0.0 : tr.q_hat[ts];
      const double v = data.zero_variates ? 0.0 : tr.v_hat[ts];
      const double prev = t == 0 ? 1.0 / static_cast<double>(n) : weights(r, t - 1);
      step += weights(r, t) * (tr.rewards[ts] - q) + prev * v;
    }
    value += discount_t * step;
    discount_t *= data.discount;
  }
  return value;
}

double wdr_with_gradient(const EvaluationDataset& data, const std::vector<Matrix>& dpi_e, Vector* grad) {
  return wdr_pass(data, &dpi_e, grad, nullptr);
}

WeightDiagnostics weight_diagnostics(const EvaluationDataset& data, const Matrix& weights) {
  constexpr int kDecades = 12;
  WeightDiagnostics d;
  d.bin_labels.push_back("0");
  d.bin_labels.push_back("<1e-12");
  for (int k = kDecades; k >= 1; --k) d.bin_labels.push_back(decade_label(k));
  d.counts.assign(d.bin_labels.size(), 0);

  std::size_t nonzero = 0;
  for (Eigen::Index i = 0; i < weights.rows(); ++i) {
    for (Eigen::Index t = 0; t < weights.cols(); ++t) {
      const double w = weights(i, t);
      std::size_t bin = 0;
      if (w > 0.0) {
        ++nonzero;
        if (w < 1e-12) {
          bin = 1;
        } else {
          // floor(log10 w) in [-12, 0]; w == 1 joins the top decade
          const int e = std::clamp(static_cast<int>(std::floor(std::log10(w))), -kDecades, -1);
          bin = static_cast<std::size_t>(2 + (kDecades + e));
        }
      }
      ++d.counts[bin];
    }
  }
  const auto cells = static_cast<double>(weights.size());
  d.fraction_nonzero = cells > 0 ? static_cast<double>(nonzero) / cells : 0.0;
  std::size_t final_nonzero = 0;
  for (std::size_t i = 0; i < data.trajectories.size(); ++i) {
    const auto last = static_cast<Eigen::Index>(data.trajectories[i].length()) - 1;
    if (weights(static_cast<Eigen::Index>(i), last) > 0.0) ++final_nonzero;
  }
  d.fraction_nonzero_final = static_cast<double>(final_nonzero) / static_cast<double>(data.trajectories.size());
  return d;
}

WeightDiagnostics weight_diagnostics(const EvaluationDataset& data) {
  return weight_diagnostics(data, importance_weights(data));
}

nlohmann::json to_json(const WeightDiagnostics& d) {
  nlohmann::json hist = nlohmann::json::array();
  for (std::size_t b = 0; b < d.counts.size(); ++b) hist.push_back({{"bin", d.bin_labels[b]}, {"count", d.counts[b]}});
  return {{"fraction_nonzero_weights", d.fraction_nonzero},
          {"fraction_nonzero_final_weights", d.fraction_nonzero_final},
          {"histogram", hist}};
}

EvaluationDataset subset(const EvaluationDataset& data, const std::vector<std::size_t>& patients) {
  EvaluationDataset out;
  out.discount = data.discount;
  out.zero_variates = data.zero_variates;
  out.trajectories.reserve(patients.size());
  for (auto i : patients) out.trajectories.push_back(data.trajectories.at(i));
  return out;
}

BootstrapResult bootstrap_difference(const EvaluationDataset& a, const EvaluationDataset& b, int n,
                                     std::uint64_t seed, const Resampler& resampler) {
  if (n < 1) throw ConfigError("bootstrap.resamples must be >= 1");
  const auto patients = a.trajectories.size();
  if (b.trajectories.size() != patients) throw ShapeError("bootstrap datasets differ in patient count");
  for (std::size_t i = 0; i < patients; ++i) {
    if (a.trajectories[i].length() != b.trajectories[i].length()) {
      throw ShapeError("bootstrap datasets differ at patient " + std::to_string(i));
    }
  }
  BootstrapResult r;
  r.requested = static_cast<std::size_t>(n);
  r.original_difference = wdr_estimate(a) - wdr_estimate(b);
  std::vector<std::size_t> idx(patients);
  for (int rep = 0; rep < n; ++rep) {
    if (resampler) {
      idx = resampler(patients, rep);
    } else {
      std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(rep)));
      std::uniform_int_distribution<std::size_t> pick(0, patients - 1);
      for (auto& i : idx) i = pick(rng);
    }
    try {
      r.differences.push_back(wdr_estimate(subset(a, idx)) - wdr_estimate(subset(b, idx)));
    } catch (const NumericalError&) {
      ++r.skipped;
    }
  }
  if (!r.differences.empty()) {
    auto sorted = r.differences;
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    for (double d : r.differences) {
      sum += d;
      if (d < 0.0) ++r.negative;
    }
    r.mean = sum / static_cast<double>(sorted.size());
    r.p025 = data::percentile(sorted, 0.025);
    r.p975 = data::percentile(sorted, 0.975);
    r.min = sorted.front();
    r.max = sorted.back();
  }
  return r;
}

nlohmann::json to_json(const BootstrapResult& r) {
  const auto kept = r.differences.size();
  std::string note = "difference is negative in " + std::to_string(r.negative) + " of " + std::to_string(kept) +
                     " bootstrap datasets";
  return {{"requested", r.requested},
          {"completed", kept},
          {"skipped", r.skipped},
          {"original_difference", r.original_difference},
          {"mean", r.mean},
          {"p025", r.p025},
          {"p975", r.p975},
          {"min", r.min},
          {"max", r.max},
          {"negative", r.negative},
          {"negative_fraction", kept ? static_cast<double>(r.negative) / static_cast<double>(kept) : 0.0},
          {"sign_note", note}};
}

void write_bootstrap_csv(const std::filesystem::path& path, const BootstrapResult& r) {
  std::ostringstream s;
  s.precision(17);
  s << "difference\n";
  for (double d : r.differences) s << d << '\n';
  nn::write_file_atomic(path, s.str());
}

}  // namespace moerl
