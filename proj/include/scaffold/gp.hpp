#pragma once

// Exact Gaussian-process regression with ARD kernels.
//
// Hyperparameters are fitted by maximizing the log marginal likelihood with
// Nelder-Mead over log-parameters from several seeded restarts. Continuous
// inputs are z-scored with training statistics; categorical columns (0/1
// indicators) are passed through untouched. Targets are centred on their
// training mean, which is added back at prediction time.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "scaffold/errors.hpp"
#include "scaffold/nelder_mead.hpp"

namespace scaffold::gp {

enum class KernelFamily { kRbf, kRatQuad, kMatern52 };

inline const char* to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::kRbf: return "RBF";
    case KernelFamily::kRatQuad: return "RATQUAD";
    case KernelFamily::kMatern52: return "MATERN52";
  }
  return "?";
}

inline std::optional<KernelFamily> parse_family(std::string_view name) {
  std::string up;
  for (char c : name) up += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (up == "RBF") return KernelFamily::kRbf;
  if (up == "RATQUAD") return KernelFamily::kRatQuad;
  if (up == "MATERN52") return KernelFamily::kMatern52;
  return std::nullopt;
}

struct KernelSpec {
  KernelFamily family = KernelFamily::kRbf;
  double variance = 1.0;
  std::vector<double> lengthscales;  // one per input dimension
  double alpha = 1.0;                // RatQuad only
};

inline void validate(const KernelSpec& k) {
  if (!(k.variance > 0.0)) throw ValidationError("kernel.variance", "must be > 0");
  if (k.lengthscales.empty()) throw ValidationError("kernel.lengthscales", "must not be empty");
  for (double l : k.lengthscales)
    if (!(l > 0.0)) throw ValidationError("kernel.lengthscales", "every lengthscale must be > 0");
  if (k.family == KernelFamily::kRatQuad && !(k.alpha > 0.0)) throw ValidationError("kernel.alpha", "must be > 0");
}

/// Covariance as a function of the squared lengthscale-scaled distance.
inline double kernel_from_r2(const KernelSpec& k, double r2) {
  switch (k.family) {
    case KernelFamily::kRbf:
      return k.variance * std::exp(-0.5 * r2);
    case KernelFamily::kRatQuad:
      return k.variance * std::pow(1.0 + r2 / (2.0 * k.alpha), -k.alpha);
    case KernelFamily::kMatern52: {
      const double s = std::sqrt(5.0 * r2);
      return k.variance * (1.0 + s + s * s / 3.0) * std::exp(-s);
    }
  }
  return 0.0;
}

inline double kernel_eval(const KernelSpec& k, std::span<const double> x, std::span<const double> x2) {
  if (x.size() != x2.size() || x.size() != k.lengthscales.size())
    throw ValidationError("kernel_eval", "dimension mismatch (" + std::to_string(x.size()) + ", " +
                                             std::to_string(x2.size()) + ", " +
                                             std::to_string(k.lengthscales.size()) + " lengthscales)");
  double r2 = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double z = (x[d] - x2[d]) / k.lengthscales[d];
    r2 += z * z;
  }
  return kernel_from_r2(k, r2);
}

namespace detail {

inline Eigen::MatrixXd scale_rows(const KernelSpec& k, const Eigen::MatrixXd& X) {
  Eigen::MatrixXd Z = X;
  for (Eigen::Index d = 0; d < X.cols(); ++d) Z.col(d) /= k.lengthscales[static_cast<std::size_t>(d)];
  return Z;
}

}  // namespace detail

/// Gram matrix over the rows of X.
inline Eigen::MatrixXd gram(const KernelSpec& k, const Eigen::MatrixXd& X) {
  if (static_cast<std::size_t>(X.cols()) != k.lengthscales.size())
    throw ValidationError("gram", "input dimension does not match lengthscales");
  const Eigen::MatrixXd Z = detail::scale_rows(k, X);
  const Eigen::Index n = X.rows();
  Eigen::MatrixXd K(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    K(i, i) = k.variance;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double r2 = (Z.row(i) - Z.row(j)).squaredNorm();
      const double v = kernel_from_r2(k, r2);
      K(i, j) = K(j, i) = v < 1e-150 * k.variance ? 0.0 : v;
    }
  }
  return K;
}

inline constexpr double kBaseJitter = 1e-8;
inline constexpr double kMaxJitter = 1e-4;

struct Factorization {
  Eigen::MatrixXd lower;
  double jitter = kBaseJitter;
};

/// Cholesky of K + (noise + jitter) I, escalating jitter 1e-8 -> 1e-4.
inline Factorization factorize(const Eigen::MatrixXd& K, double noise_variance) {
  for (double jitter = kBaseJitter; jitter <= kMaxJitter * 1.0000001; jitter *= 10.0) {
    Eigen::MatrixXd A = K;
    A.diagonal().array() += noise_variance + jitter;
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() == Eigen::Success) {
      Eigen::MatrixXd L = llt.matrixL();
      if (L.allFinite()) return {std::move(L), jitter};
    }
  }
  throw NumericalError("covariance matrix is not positive definite even with jitter 1e-4");
}

inline double lml_from_factor(const Eigen::MatrixXd& L, const Eigen::VectorXd& y) {
  const Eigen::VectorXd v = L.triangularView<Eigen::Lower>().solve(y);
  const double log_det = 2.0 * L.diagonal().array().log().sum();
  return -0.5 * v.squaredNorm() - 0.5 * log_det -
         0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi);
}

/// log p(y | X) for a zero-mean GP, via the Cholesky factor of K + (noise + jitter) I.
inline double log_marginal_likelihood(const KernelSpec& k, double noise_variance, const Eigen::MatrixXd& X,
                                      const Eigen::VectorXd& y) {
  const Factorization f = factorize(gram(k, X), noise_variance);
  return lml_from_factor(f.lower, y);
}

// ---------------------------------------------------------------------------
// Input scaling
// ---------------------------------------------------------------------------

struct InputScaler {
  std::vector<double> mean;
  std::vector<double> scale;
  std::vector<bool> standardized;

  /// z-scores every column not flagged categorical; zero-variance columns keep scale 1.
  static InputScaler from_data(const Eigen::MatrixXd& X, const std::vector<bool>& categorical) {
    InputScaler s;
    const auto d = static_cast<std::size_t>(X.cols());
    s.mean.assign(d, 0.0);
    s.scale.assign(d, 1.0);
    s.standardized.assign(d, true);
    for (std::size_t c = 0; c < d; ++c) {
      if (c < categorical.size() && categorical[c]) {
        s.standardized[c] = false;
        continue;
      }
      const auto col = X.col(static_cast<Eigen::Index>(c));
      const double m = col.mean();
      const double var = X.rows() > 1 ? (col.array() - m).square().sum() / static_cast<double>(X.rows()) : 0.0;
      s.mean[c] = m;
      s.scale[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  Eigen::MatrixXd transform(const Eigen::MatrixXd& X) const {
    Eigen::MatrixXd Z = X;
    for (std::size_t c = 0; c < mean.size(); ++c) {
      if (!standardized[c]) continue;
      Z.col(static_cast<Eigen::Index>(c)).array() -= mean[c];
      Z.col(static_cast<Eigen::Index>(c)) /= scale[c];
    }
    return Z;
  }

  void transform_in_place(std::span<double> x) const {
    for (std::size_t c = 0; c < mean.size(); ++c)
      if (standardized[c]) x[c] = (x[c] - mean[c]) / scale[c];
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct Prediction {
  double mean = 0.0;
  double variance = 0.0;  // includes the noise variance
  double sd() const { return std::sqrt(variance); }
};

class GPModel {
 public:
  /// Conditions a GP with fixed hyperparameters on raw inputs/targets.
  /// `noise_variance` may be 0; jitter is added regardless.
  static GPModel condition(KernelSpec kernel, double noise_variance, Eigen::MatrixXd raw_inputs,
                           Eigen::VectorXd raw_targets, InputScaler scaler, bool center_targets = true) {
    validate(kernel);
    if (raw_inputs.rows() < 1) throw DataError("GP needs at least one training point");
    if (raw_inputs.rows() != raw_targets.size()) throw DataError("inputs and targets differ in length");
    if (static_cast<std::size_t>(raw_inputs.cols()) != kernel.lengthscales.size())
      throw DataError("input dimension does not match kernel lengthscales");
    if (!(noise_variance >= 0.0)) throw ValidationError("noise_variance", "must be >= 0");
    GPModel m;
    m.kernel_ = std::move(kernel);
    m.noise_variance_ = noise_variance;
    m.scaler_ = std::move(scaler);
    m.center_targets_ = center_targets;
    m.raw_inputs_ = std::move(raw_inputs);
    m.raw_targets_ = std::move(raw_targets);
    m.inputs_ = m.scaler_.transform(m.raw_inputs_);
    m.scaled_inputs_ = detail::scale_rows(m.kernel_, m.inputs_);
    m.target_offset_ = center_targets ? m.raw_targets_.mean() : 0.0;
    const Eigen::VectorXd yc = m.raw_targets_.array() - m.target_offset_;
    Factorization f = factorize(gram(m.kernel_, m.inputs_), noise_variance);
    m.cholesky_ = std::move(f.lower);
    m.jitter_ = f.jitter;
    const Eigen::VectorXd v = m.cholesky_.triangularView<Eigen::Lower>().solve(yc);
    m.alpha_ = m.cholesky_.transpose().triangularView<Eigen::Upper>().solve(v);
    m.lml_ = lml_from_factor(m.cholesky_, yc);
    return m;
  }

  Prediction predict(std::span<const double> x) const {
    if (x.size() != static_cast<std::size_t>(inputs_.cols())) throw ValidationError("predict", "dimension mismatch");
    std::vector<double> z(x.begin(), x.end());
    scaler_.transform_in_place(z);
    for (std::size_t d = 0; d < z.size(); ++d) z[d] /= kernel_.lengthscales[d];
    const Eigen::Index n = inputs_.rows();
    Eigen::VectorXd ks(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      double r2 = 0.0;
      for (std::size_t d = 0; d < z.size(); ++d) {
        const double diff = scaled_inputs_(i, static_cast<Eigen::Index>(d)) - z[d];
        r2 += diff * diff;
      }
      ks(i) = kernel_from_r2(kernel_, r2);
    }
    Prediction p;
    p.mean = target_offset_ + ks.dot(alpha_);
    const Eigen::VectorXd v = cholesky_.triangularView<Eigen::Lower>().solve(ks);
    p.variance = std::max(0.0, kernel_.variance + noise_variance_ - v.squaredNorm());
    return p;
  }

  Prediction predict(std::initializer_list<double> x) const { return predict(std::span<const double>(x.begin(), x.size())); }

  const KernelSpec& kernel() const { return kernel_; }
  double noise_variance() const { return noise_variance_; }
  double jitter() const { return jitter_; }
  const InputScaler& scaler() const { return scaler_; }
  bool center_targets() const { return center_targets_; }
  double target_offset() const { return target_offset_; }
  const Eigen::MatrixXd& raw_inputs() const { return raw_inputs_; }
  const Eigen::VectorXd& raw_targets() const { return raw_targets_; }
  const Eigen::MatrixXd& inputs() const { return inputs_; }
  const Eigen::MatrixXd& cholesky_factor() const { return cholesky_; }
  const Eigen::VectorXd& alpha_vector() const { return alpha_; }
  double log_marginal_likelihood() const { return lml_; }
  std::size_t size() const { return static_cast<std::size_t>(inputs_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(inputs_.cols()); }

 private:
  KernelSpec kernel_;
  double noise_variance_ = 0.0;
  double jitter_ = kBaseJitter;
  InputScaler scaler_;
  bool center_targets_ = true;
  double target_offset_ = 0.0;
  Eigen::MatrixXd raw_inputs_;
  Eigen::VectorXd raw_targets_;
  Eigen::MatrixXd inputs_;
  Eigen::MatrixXd scaled_inputs_;  // inputs_ divided by the lengthscales
  Eigen::MatrixXd cholesky_;
  Eigen::VectorXd alpha_;
  double lml_ = 0.0;
};

// ---------------------------------------------------------------------------
// Hyperparameter fitting
// ---------------------------------------------------------------------------

struct FitOptions {
  int restarts = 8;
  NelderMeadOptions optimizer{};
  std::vector<bool> categorical;  // columns passed through unscaled
  double noise_floor = 1e-6;
  bool center_targets = true;
  double log_bound = 12.0;  // every log-parameter is confined to [-bound, bound]
};

namespace detail {

// Per-dimension squared differences of the training inputs, computed once per
// fit; each likelihood evaluation then only rescales, applies the kernel
// profile and factorizes in place.
class LikelihoodWorkspace {
 public:
  explicit LikelihoodWorkspace(const Eigen::MatrixXd& Z) : n_(Z.rows()) {
    for (Eigen::Index d = 0; d < Z.cols(); ++d) {
      Eigen::MatrixXd sq(n_, n_);
      for (Eigen::Index j = 0; j < n_; ++j) sq.col(j) = (Z.col(d).array() - Z(j, d)).square().matrix();
      sq_.push_back(std::move(sq));
    }
    r2_.resize(n_, n_);
    a_.resize(n_, n_);
  }

  /// Negative log marginal likelihood; +inf when no jitter level factorizes.
  double negative_lml(const KernelSpec& k, double noise, const Eigen::VectorXd& y) {
    // Only the lower triangle is filled; LLT never reads the upper one.
    for (Eigen::Index j = 0; j < n_; ++j) {
      const Eigen::Index len = n_ - j;
      auto r2 = r2_.col(j).tail(len);
      r2.setZero();
      for (std::size_t d = 0; d < sq_.size(); ++d)
        r2.noalias() += sq_[d].col(j).tail(len) / (k.lengthscales[d] * k.lengthscales[d]);
    }
    for (double jitter = kBaseJitter; jitter <= kMaxJitter * 1.0000001; jitter *= 10.0) {
      for (Eigen::Index j = 0; j < n_; ++j) {
        const Eigen::Index len = n_ - j;
        const auto r2 = r2_.col(j).tail(len).array();
        auto out = a_.col(j).tail(len).array();
        switch (k.family) {
          case KernelFamily::kRbf:
            out = k.variance * (-0.5 * r2).exp();
            break;
          case KernelFamily::kRatQuad:
            out = k.variance * (-k.alpha * (r2 / (2.0 * k.alpha)).log1p()).exp();
            break;
          case KernelFamily::kMatern52: {
            const auto s = (5.0 * r2).sqrt();
            out = k.variance * (1.0 + s + s.square() / 3.0) * (-s).exp();
            break;
          }
        }
        // Subnormal covariances make the factorization crawl; they are zero for all purposes.
        out = (out < 1e-150 * k.variance).select(0.0, out);
      }
      a_.diagonal().array() += noise + jitter;
      Eigen::LLT<Eigen::Ref<Eigen::MatrixXd>> llt(a_);
      if (llt.info() != Eigen::Success) continue;
      const auto L = a_.triangularView<Eigen::Lower>();
      v_ = L.solve(y);
      const double log_det = 2.0 * a_.diagonal().array().log().sum();
      const double value = 0.5 * v_.squaredNorm() + 0.5 * log_det +
                           0.5 * static_cast<double>(n_) * std::log(2.0 * std::numbers::pi);
      if (std::isfinite(value)) return value;
    }
    return std::numeric_limits<double>::infinity();
  }

 private:
  Eigen::Index n_;
  std::vector<Eigen::MatrixXd> sq_;
  Eigen::MatrixXd r2_, a_;
  Eigen::VectorXd v_;
};

struct Packing {
  KernelFamily family;
  std::size_t dims;
  double noise_floor;

  std::size_t size() const { return dims + 2 + (family == KernelFamily::kRatQuad ? 1 : 0); }

  // theta = [log variance, log lengthscale_1..D, log(noise - floor), (log alpha)]
  std::pair<KernelSpec, double> unpack(const std::vector<double>& theta) const {
    KernelSpec k;
    k.family = family;
    k.variance = std::exp(theta[0]);
    k.lengthscales.resize(dims);
    for (std::size_t d = 0; d < dims; ++d) k.lengthscales[d] = std::exp(theta[1 + d]);
    const double noise = noise_floor + std::exp(theta[1 + dims]);
    if (family == KernelFamily::kRatQuad) k.alpha = std::exp(theta[2 + dims]);
    return {std::move(k), noise};
  }
};

}  // namespace detail

struct FitReport {
  double best_lml = 0.0;
  int restarts_succeeded = 0;
  int total_evaluations = 0;
};

/// Maximum-likelihood fit. Each restart draws log-lengthscales uniformly in
/// [log 0.1, log 10] around the per-dimension spread of the scaled inputs and
/// runs Nelder-Mead on the negative LML; the restart with the highest LML wins.
inline GPModel fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, KernelFamily family, std::uint64_t seed,
                   const FitOptions& opts = {}, FitReport* report = nullptr) {
  if (X.rows() < 2) throw DataError("GP fit needs at least 2 points, got " + std::to_string(X.rows()));
  if (X.rows() != y.size()) throw DataError("inputs and targets differ in length");
  if (!X.allFinite() || !y.allFinite()) throw DataError("non-finite training data");

  const InputScaler scaler = InputScaler::from_data(X, opts.categorical);
  const Eigen::MatrixXd Z = scaler.transform(X);
  const double offset = opts.center_targets ? y.mean() : 0.0;
  const Eigen::VectorXd yc = y.array() - offset;
  const double y_var = std::max(yc.squaredNorm() / static_cast<double>(yc.size()), 1e-6);

  const detail::Packing pack{family, static_cast<std::size_t>(X.cols()), opts.noise_floor};
  std::vector<double> spread(pack.dims, 1.0);
  for (std::size_t d = 0; d < pack.dims; ++d) {
    const auto col = Z.col(static_cast<Eigen::Index>(d));
    const double m = col.mean();
    const double sd = std::sqrt((col.array() - m).square().sum() / static_cast<double>(col.size()));
    spread[d] = sd > 1e-12 ? sd : 1.0;
  }

  detail::LikelihoodWorkspace workspace(Z);
  auto negative_lml = [&](const std::vector<double>& theta) {
    for (double t : theta)
      if (std::abs(t) > opts.log_bound) return std::numeric_limits<double>::infinity();
    const auto [k, noise] = pack.unpack(theta);
    return workspace.negative_lml(k, noise, yc);
  };

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double log_lo = std::log(0.1), log_hi = std::log(10.0);

  std::optional<NelderMeadResult> best;
  FitReport rep;
  for (int r = 0; r < opts.restarts; ++r) {
    std::vector<double> theta(pack.size());
    theta[0] = std::log(y_var) + (r == 0 ? 0.0 : unit(rng) * 2.0 - 1.0);
    for (std::size_t d = 0; d < pack.dims; ++d) theta[1 + d] = std::log(spread[d]) + log_lo + unit(rng) * (log_hi - log_lo);
    const double noise0 = 0.1 * y_var * (r == 0 ? 1.0 : std::exp(unit(rng) * 3.0 - 2.0));
    theta[1 + pack.dims] = std::log(std::max(noise0 - opts.noise_floor, 1e-9));
    if (family == KernelFamily::kRatQuad) theta[2 + pack.dims] = r == 0 ? 0.0 : std::log(0.5) + unit(rng) * std::log(10.0);
    for (double& t : theta) t = std::clamp(t, -opts.log_bound + 0.5, opts.log_bound - 0.5);

    NelderMeadResult res = nelder_mead(negative_lml, theta, opts.optimizer);
    rep.total_evaluations += res.evaluations;
    if (!std::isfinite(res.value)) continue;
    ++rep.restarts_succeeded;
    if (!best || res.value < best->value) best = std::move(res);
  }
  if (!best) throw NumericalError("every GP restart failed to factorize the covariance matrix");
  rep.best_lml = -best->value;
  if (report) *report = rep;

  auto [k, noise] = pack.unpack(best->x);
  return GPModel::condition(std::move(k), noise, X, y, scaler, opts.center_targets);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline constexpr int kModelSchemaVersion = 1;

inline nlohmann::json to_json(const GPModel& m) {
  nlohmann::json inputs = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.raw_inputs().rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index d = 0; d < m.raw_inputs().cols(); ++d) row.push_back(m.raw_inputs()(i, d));
    inputs.push_back(std::move(row));
  }
  std::vector<double> targets(m.raw_targets().data(), m.raw_targets().data() + m.raw_targets().size());
  const auto& s = m.scaler();
  return {
      {"schema", kModelSchemaVersion},
      {"family", to_string(m.kernel().family)},
      {"variance", m.kernel().variance},
      {"lengthscales", m.kernel().lengthscales},
      {"alpha", m.kernel().alpha},
      {"noise_variance", m.noise_variance()},
      {"center_targets", m.center_targets()},
      {"scaler", {{"mean", s.mean}, {"scale", s.scale}, {"standardized", s.standardized}}},
      {"inputs", std::move(inputs)},
      {"targets", std::move(targets)},
  };
}

inline GPModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<int>() != kModelSchemaVersion)
      throw ValidationError("schema", "unsupported model schema " + j.at("schema").dump());
    KernelSpec k;
    auto fam = parse_family(j.at("family").get<std::string>());
    if (!fam) throw ValidationError("family", "unknown kernel family " + j.at("family").dump());
    k.family = *fam;
    k.variance = j.at("variance").get<double>();
    k.lengthscales = j.at("lengthscales").get<std::vector<double>>();
    k.alpha = j.at("alpha").get<double>();
    InputScaler s;
    s.mean = j.at("scaler").at("mean").get<std::vector<double>>();
    s.scale = j.at("scaler").at("scale").get<std::vector<double>>();
    s.standardized = j.at("scaler").at("standardized").get<std::vector<bool>>();
    const auto& rows = j.at("inputs");
    const auto targets = j.at("targets").get<std::vector<double>>();
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto d = static_cast<Eigen::Index>(k.lengthscales.size());
    if (s.mean.size() != k.lengthscales.size() || s.scale.size() != k.lengthscales.size() ||
        s.standardized.size() != k.lengthscales.size())
      throw ValidationError("scaler", "dimension does not match lengthscales");
    Eigen::MatrixXd X(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto row = rows[static_cast<std::size_t>(i)].get<std::vector<double>>();
      if (static_cast<Eigen::Index>(row.size()) != d) throw ValidationError("inputs", "row width mismatch");
      for (Eigen::Index c = 0; c < d; ++c) X(i, c) = row[static_cast<std::size_t>(c)];
    }
    Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(targets.data(), static_cast<Eigen::Index>(targets.size()));
    return GPModel::condition(std::move(k), j.at("noise_variance").get<double>(), std::move(X), std::move(y),
                              std::move(s), j.at("center_targets").get<bool>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("model", std::string("malformed model document: ") + e.what());
  }
}

}  // namespace scaffold::gp
