#include "invcert/smoothing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "invcert/parallel.hpp"
#include "invcert/rng.hpp"

namespace invcert {

void SmoothingConfig::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("sigma must be positive", "sigma");
  if (n0 < 1) throw ValidationError("n0 must be at least 1", "n0");
  if (n < 1) throw ValidationError("n must be at least 1", "n");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)", "alpha");
}

double phi(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

namespace {

// Acklam's rational approximation, relative error ~1e-9, for q <= 0.5.
double acklam_lower(double q) {
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  if (q < 0.02425) {
    const double t = std::sqrt(-2.0 * std::log(q));
    return (((((c[0] * t + c[1]) * t + c[2]) * t + c[3]) * t + c[4]) * t + c[5]) /
           ((((d[0] * t + d[1]) * t + d[2]) * t + d[3]) * t + 1.0);
  }
  const double u = q - 0.5;
  const double r = u * u;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * u /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

}  // namespace

double phi_inv(double q) {
  if (!(q > 0.0 && q < 1.0)) throw ValidationError("phi_inv argument must lie in (0, 1)", "q");
  if (q == 0.5) return 0.0;
  // Work in the lower tail, where erfc keeps full relative precision; 1 - q is exact for q >= 0.5.
  const bool upper = q > 0.5;
  const double p = upper ? 1.0 - q : q;
  double x = acklam_lower(p);
  for (int iter = 0; iter < 3; ++iter) {
    const double e = phi(x) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
    x -= u / (1.0 + 0.5 * x * u);
  }
  return upper ? -x : x;
}

namespace {

// Modified Lentz evaluation of the incomplete Beta continued fraction.
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 100000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete Beta continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw ValidationError("incomplete Beta needs a, b > 0", "a,b");
  if (!(x >= 0.0 && x <= 1.0)) throw ValidationError("incomplete Beta needs x in [0, 1]", "x");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

namespace {

void check_counts(long long successes, long long total, double alpha) {
  if (total < 1) throw ValidationError("binomial total must be at least 1", "total");
  if (successes < 0 || successes > total) throw ValidationError("successes must lie in [0, total]", "successes");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)", "alpha");
}

// Solves I_p(a, b) = level for p by bisection; I_p is increasing in p.
double beta_quantile(double a, double b, double level) {
  double lo = 0.0;
  double hi = 1.0;
  for (int iter = 0; iter < 200 && hi - lo > 1e-15; ++iter) {
    const double mid = 0.5 * (lo + hi);
    if (regularized_incomplete_beta(a, b, mid) < level)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

double clopper_pearson_lower(long long successes, long long total, double alpha) {
  check_counts(successes, total, alpha);
  if (successes == 0) return 0.0;
  if (successes == total) return std::pow(alpha, 1.0 / static_cast<double>(total));
  return beta_quantile(static_cast<double>(successes), static_cast<double>(total - successes + 1), alpha);
}

double clopper_pearson_upper(long long successes, long long total, double alpha) {
  check_counts(successes, total, alpha);
  return 1.0 - clopper_pearson_lower(total - successes, total, alpha);
}

std::pair<double, double> clopper_pearson_interval(long long successes, long long total, double alpha) {
  check_counts(successes, total, alpha);
  return {clopper_pearson_lower(successes, total, alpha / 2.0), clopper_pearson_upper(successes, total, alpha / 2.0)};
}

NoiseSampleCounts sample_under_noise(const BaseClassifier& classifier, const Eigen::VectorXd& x, double sigma,
                                     long long n, std::uint64_t seed, unsigned threads) {
  if (n < 1) throw ValidationError("sample count must be at least 1", "n");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ValidationError("sigma must be nonnegative", "sigma");
  const int m = classifier.num_classes();
  std::vector<Label> labels(static_cast<std::size_t>(n));
  const unsigned workers = classifier.thread_safe() ? threads : 1;
  parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t i) {
    Rng rng = Rng::stream(seed, i);
    Eigen::VectorXd noisy(x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) noisy(j) = x(j) + sigma * rng.normal();
    labels[i] = classifier.predict(noisy);
  });
  NoiseSampleCounts out{std::vector<long long>(static_cast<std::size_t>(m), 0), n};
  for (Label l : labels) {
    if (l < 0 || l >= m) throw NumericError("base classifier returned label " + std::to_string(l) + " out of range");
    ++out.counts[static_cast<std::size_t>(l)];
  }
  return out;
}

double radius_one_sided(double sigma, double p_a_lower) {
  if (p_a_lower >= 1.0) return kInfinity;
  if (p_a_lower <= 0.0) return -kInfinity;
  return sigma * phi_inv(p_a_lower);
}

double radius_two_sided(double sigma, double p_a_lower, double p_b_upper) {
  auto quantile = [](double q) {
    if (q <= 0.0) return -kInfinity;
    if (q >= 1.0) return kInfinity;
    return phi_inv(q);
  };
  const double qa = quantile(p_a_lower);
  const double qb = quantile(p_b_upper);
  if (qa == qb) return 0.0;
  return 0.5 * sigma * (qa - qb);
}

CertifiedPrediction certify(const BaseClassifier& classifier, const Eigen::VectorXd& x, const SmoothingConfig& config,
                            std::uint64_t seed, CertifyMode mode, unsigned threads) {
  config.validate();
  const auto selection = sample_under_noise(classifier, x, config.sigma, config.n0, substream_seed(seed, 0), threads);
  const Label top = static_cast<Label>(
      std::max_element(selection.counts.begin(), selection.counts.end()) - selection.counts.begin());
  const auto estimation = sample_under_noise(classifier, x, config.sigma, config.n, substream_seed(seed, 1), threads);
  const long long count_a = estimation.counts[static_cast<std::size_t>(top)];
  const double p_a_lower = clopper_pearson_lower(count_a, config.n, config.alpha);
  if (p_a_lower <= 0.5) return CertifiedPrediction::abstain(p_a_lower, config.sigma, config.n);

  double radius = 0.0;
  if (mode == CertifyMode::kOneSided) {
    radius = radius_one_sided(config.sigma, p_a_lower);
  } else {
    long long count_b = 0;
    for (std::size_t l = 0; l < estimation.counts.size(); ++l)
      if (static_cast<Label>(l) != top) count_b = std::max(count_b, estimation.counts[l]);
    const double p_b_upper = clopper_pearson_upper(count_b, config.n, config.alpha);
    radius = radius_two_sided(config.sigma, p_a_lower, p_b_upper);
    if (!(radius > 0.0)) return CertifiedPrediction::abstain(p_a_lower, config.sigma, config.n);
  }
  return {top, radius, p_a_lower, config.sigma, config.n};
}

double exact_smoothed_linear(const Eigen::VectorXd& w, double b, const Eigen::VectorXd& x, double sigma) {
  const double norm = w.norm();
  if (!(norm > 0.0)) throw ValidationError("weight vector must be nonzero", "w");
  if (!(sigma > 0.0)) throw ValidationError("sigma must be positive", "sigma");
  if (w.size() != x.size()) throw ValidationError("weight and input dimensions differ", "x");
  return phi((w.dot(x) + b) / (sigma * norm));
}

ProbabilityVector frequencies(const NoiseSampleCounts& counts) {
  if (counts.total < 1) throw ValidationError("no samples to normalize", "counts");
  Eigen::VectorXd p(static_cast<Eigen::Index>(counts.counts.size()));
  for (std::size_t i = 0; i < counts.counts.size(); ++i)
    p(static_cast<Eigen::Index>(i)) = static_cast<double>(counts.counts[i]) / static_cast<double>(counts.total);
  return ProbabilityVector(std::move(p));
}

}  // namespace invcert
