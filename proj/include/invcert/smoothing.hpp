#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "invcert/core.hpp"

namespace invcert {

// Randomized-smoothing parameters. Defaults are desk-scale.
struct SmoothingConfig {
  double sigma = 0.25;
  long long n0 = 100;
  long long n = 100000;
  double alpha = 0.001;

  void validate() const;
};

struct NoiseSampleCounts {
  std::vector<long long> counts;
  long long total = 0;
};

// Hard-decision classifier queried under noise.
class BaseClassifier {
 public:
  virtual ~BaseClassifier() = default;
  virtual int num_classes() const = 0;
  virtual Label predict(const Eigen::VectorXd& x) const = 0;
  // Implementations that cannot be called concurrently return false and are
  // evaluated serially.
  virtual bool thread_safe() const { return true; }
};

class FunctionClassifier final : public BaseClassifier {
 public:
  using Fn = std::function<Label(const Eigen::VectorXd&)>;
  FunctionClassifier(int num_classes, Fn fn, bool thread_safe = true)
      : num_classes_(num_classes), fn_(std::move(fn)), thread_safe_(thread_safe) {}

  int num_classes() const override { return num_classes_; }
  Label predict(const Eigen::VectorXd& x) const override { return fn_(x); }
  bool thread_safe() const override { return thread_safe_; }

 private:
  int num_classes_;
  Fn fn_;
  bool thread_safe_;
};

// Label 1 iff w.x + b >= 0, else 0.
class AffineBinaryClassifier final : public BaseClassifier {
 public:
  AffineBinaryClassifier(Eigen::VectorXd w, double b) : w_(std::move(w)), b_(b) {}
  int num_classes() const override { return 2; }
  Label predict(const Eigen::VectorXd& x) const override {
    if (x.size() != w_.size()) throw ValidationError("input dimension differs from the weight vector", "x");
    return w_.dot(x) + b_ >= 0.0 ? 1 : 0;
  }
  const Eigen::VectorXd& weights() const noexcept { return w_; }
  double bias() const noexcept { return b_; }

 private:
  Eigen::VectorXd w_;
  double b_;
};

// Standard normal CDF.
double phi(double z);

// Standard normal quantile, q in (0, 1).
double phi_inv(double q);

// I_x(a, b), the regularized incomplete Beta function.
double regularized_incomplete_beta(double a, double b, double x);

// One-sided (1 - alpha) lower confidence bound on a binomial proportion:
// the alpha-quantile of Beta(successes, total - successes + 1).
double clopper_pearson_lower(long long successes, long long total, double alpha);

// One-sided (1 - alpha) upper bound, the mirror of clopper_pearson_lower.
double clopper_pearson_upper(long long successes, long long total, double alpha);

// Two-sided (1 - alpha) interval; each tail carries alpha / 2.
std::pair<double, double> clopper_pearson_interval(long long successes, long long total, double alpha);

// Counts of base-classifier labels on x + N(0, sigma^2 I). Draw i uses the
// substream (seed, i), so the result does not depend on `threads`.
NoiseSampleCounts sample_under_noise(const BaseClassifier& classifier, const Eigen::VectorXd& x, double sigma,
                                     long long n, std::uint64_t seed, unsigned threads = 1);

// sigma * Phi^-1(p_a_lower).
double radius_one_sided(double sigma, double p_a_lower);

// sigma / 2 * (Phi^-1(p_a_lower) - Phi^-1(p_b_upper)). Bounds at 0 or 1 map to
// infinite quantiles.
double radius_two_sided(double sigma, double p_a_lower, double p_b_upper);

enum class CertifyMode { kOneSided, kTwoSided };

// Selects the top label from n0 draws, bounds its probability from n fresh
// draws, and abstains when the bound does not exceed 1/2. Two-sided mode bounds
// the runner-up of the estimation draws with clopper_pearson_upper.
CertifiedPrediction certify(const BaseClassifier& classifier, const Eigen::VectorXd& x, const SmoothingConfig& config,
                            std::uint64_t seed, CertifyMode mode = CertifyMode::kOneSided, unsigned threads = 1);

// Closed-form smoothed probability of label 1 for AffineBinaryClassifier(w, b).
double exact_smoothed_linear(const Eigen::VectorXd& w, double b, const Eigen::VectorXd& x, double sigma);

// Empirical label frequencies counts / total.
ProbabilityVector frequencies(const NoiseSampleCounts& counts);

}  // namespace invcert
