#include "invcert/theory.hpp"

#include <algorithm>
#include <cmath>

#include "invcert/errors.hpp"
#include "invcert/rng.hpp"
#include "invcert/smoothing.hpp"

namespace invcert::theory {

void GaussModelParams::validate() const {
  if (d < 1) throw ValidationError("d must be at least 1", "d");
  if (!(p >= 0.5 && p <= 1.0)) throw ValidationError("p must lie in [1/2, 1]", "p");
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ValidationError("eta must be nonnegative", "eta");
}

Eigen::VectorXd gauss_row(const GaussModelParams& params, std::uint64_t seed, std::uint64_t index, int* y) {
  Rng rng = Rng::stream(seed, index);
  const int label = rng.uniform() < 0.5 ? -1 : 1;
  Eigen::VectorXd x(params.d + 1);
  x(0) = rng.uniform() < params.p ? label : -label;
  for (int j = 1; j <= params.d; ++j) x(j) = rng.normal(params.eta * label, 1.0);
  if (y) *y = label;
  return x;
}

GaussSample gauss_sample(const GaussModelParams& params, int n_samples, std::uint64_t seed) {
  params.validate();
  if (n_samples < 0) throw ValidationError("n_samples must be nonnegative", "n_samples");
  GaussSample out{Eigen::MatrixXd(n_samples, params.d + 1), Eigen::VectorXi(n_samples)};
  for (int i = 0; i < n_samples; ++i) {
    int y = 0;
    out.x.row(i) = gauss_row(params, seed, static_cast<std::uint64_t>(i), &y).transpose();
    out.y(i) = y;
  }
  return out;
}

int meta_feature(const Eigen::Ref<const Eigen::VectorXd>& x, int k) {
  if (k < 1) throw ValidationError("meta feature needs k >= 1", "k");
  if (k > x.size() - 1) throw ValidationError("k exceeds the number of Gaussian features", "k");
  return x.segment(1, k).mean() >= 0.0 ? 1 : -1;
}

double analytic_meta_accuracy(double eta, int k) {
  if (!(eta > 0.0)) throw ValidationError("eta must be positive", "eta");
  if (k < 1) throw ValidationError("k must be at least 1", "k");
  return phi(std::sqrt(static_cast<double>(k)) * eta);
}

double theorem1_bound(double p, double gamma) {
  if (!(p > 0.5 && p < 1.0)) throw ValidationError("p must lie in (1/2, 1)", "p");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("gamma must lie in [0, 1]", "gamma");
  return std::clamp(p * gamma / (1.0 - p), 0.0, 1.0);
}

Eigen::VectorXd linf_flip_attack(const Eigen::Ref<const Eigen::VectorXd>& x, int y, double eta, int k_protected) {
  const auto d = static_cast<int>(x.size()) - 1;
  if (k_protected < 0 || k_protected > d) throw ValidationError("k_protected must lie in [0, d]", "k");
  Eigen::VectorXd out = x;
  out.segment(1 + k_protected, d - k_protected).array() -= 2.0 * eta * y;
  return out;
}

int averaging_classifier(const Eigen::Ref<const Eigen::VectorXd>& x) {
  return x.segment(1, x.size() - 1).mean() >= 0.0 ? 1 : -1;
}

std::vector<GaussRow> gauss_experiment(const std::vector<double>& etas, const std::vector<int>& ks, int d, double p,
                                       int n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw ValidationError("n_samples must be at least 1", "n_samples");
  for (int k : ks)
    if (k < 0) throw ValidationError("k must be nonnegative", "ks");
  std::vector<int> admissible;
  for (int k : ks)
    if (k <= d) admissible.push_back(k);

  std::vector<GaussRow> rows;
  for (std::size_t e = 0; e < etas.size(); ++e) {
    const GaussModelParams params{d, p, etas[e]};
    params.validate();
    // Every k at a given eta scores the same samples.
    const std::uint64_t eta_seed = substream_seed(seed, e);
    std::vector<long long> natural(admissible.size(), 0), adversarial(admissible.size(), 0);
    for (int i = 0; i < n_samples; ++i) {
      int y = 0;
      const Eigen::VectorXd x = gauss_row(params, eta_seed, static_cast<std::uint64_t>(i), &y);
      for (std::size_t j = 0; j < admissible.size(); ++j) {
        const int k = admissible[j];
        const Eigen::VectorXd attacked = linf_flip_attack(x, y, params.eta, k);
        if (k == 0) {
          natural[j] += averaging_classifier(x) == y;
          adversarial[j] += averaging_classifier(attacked) == y;
        } else {
          natural[j] += meta_feature(x, k) == y;
          adversarial[j] += meta_feature(attacked, k) == y;
        }
      }
    }
    for (std::size_t j = 0; j < admissible.size(); ++j)
      rows.push_back({params.eta, admissible[j], static_cast<double>(natural[j]) / n_samples,
                      static_cast<double>(adversarial[j]) / n_samples, n_samples});
  }
  return rows;
}

void PrfModelParams::validate() const {
  if (n_bits < 1) throw ValidationError("n_bits must be at least 1", "n_bits");
  if (repetition < 1 || repetition % 2 == 0)
    throw ValidationError("repetition must be a positive odd integer", "repetition");
}

std::uint8_t prf_bit(const Bits& message, std::uint64_t key) {
  std::uint64_t h = mix64(key ^ static_cast<std::uint64_t>(message.size()));
  std::uint64_t word = 0;
  int filled = 0;
  for (std::uint8_t b : message) {
    word = (word << 1) | (b & 1u);
    if (++filled == 64) {
      h = mix64(h ^ word);
      word = 0;
      filled = 0;
    }
  }
  h = mix64(h ^ word ^ (static_cast<std::uint64_t>(filled) << 56));
  return static_cast<std::uint8_t>(mix64(h ^ key) & 1u);
}

Bits prf_encode(const Bits& message, std::uint8_t bit, int repetition) {
  if (repetition < 1 || repetition % 2 == 0)
    throw ValidationError("repetition must be a positive odd integer", "repetition");
  Bits out;
  out.reserve((message.size() + 1) * static_cast<std::size_t>(repetition));
  auto push = [&](std::uint8_t b) { out.insert(out.end(), static_cast<std::size_t>(repetition), b & 1u); };
  for (std::uint8_t b : message) push(b);
  push(bit);
  return out;
}

Bits prf_decode(const Bits& codeword, int repetition) {
  if (repetition < 1 || repetition % 2 == 0)
    throw ValidationError("repetition must be a positive odd integer", "repetition");
  const auto r = static_cast<std::size_t>(repetition);
  if (codeword.size() % r != 0) throw ValidationError("codeword length is not a multiple of r", "codeword");
  Bits out;
  for (std::size_t g = 0; g < codeword.size(); g += r) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < r; ++j) ones += codeword[g + j] & 1u;
    out.push_back(ones * 2 > r ? 1 : 0);
  }
  return out;
}

PrfResult prf_experiment(const PrfModelParams& params, int flip_budget, bool attack_first_bit, int n_trials,
                         std::uint64_t seed) {
  params.validate();
  if (n_trials < 1) throw ValidationError("n_trials must be at least 1", "n_trials");
  if (flip_budget < 0 || flip_budget > params.repetition)
    throw ValidationError("flip_budget must lie in [0, repetition]", "flip_budget");
  const auto r = static_cast<std::size_t>(params.repetition);
  PrfResult result;
  result.trials = n_trials;
  result.stress_mode = flip_budget > (params.repetition - 1) / 2;
  long long keyed = 0, keyless = 0;
  std::vector<std::size_t> slots(r);
  for (int t = 0; t < n_trials; ++t) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(t));
    const std::uint8_t b = rng.bernoulli(0.5) ? 1 : 0;
    Bits message(static_cast<std::size_t>(params.n_bits));
    for (auto& bit : message) bit = rng.bernoulli(0.5) ? 1 : 0;
    const std::uint8_t tag = prf_bit(message, params.key) ^ b;

    Bits sample{b};
    const Bits code = prf_encode(message, tag, params.repetition);
    sample.insert(sample.end(), code.begin(), code.end());

    for (std::size_t g = 1; g < sample.size(); g += r) {
      for (std::size_t j = 0; j < r; ++j) slots[j] = j;
      for (int f = 0; f < flip_budget; ++f) {
        const auto pick = static_cast<std::size_t>(f) + rng.below(r - static_cast<std::size_t>(f));
        std::swap(slots[static_cast<std::size_t>(f)], slots[pick]);
        sample[g + slots[static_cast<std::size_t>(f)]] ^= 1u;
      }
    }
    if (attack_first_bit) sample[0] = rng.bernoulli(0.5) ? 1 : 0;

    const Bits decoded = prf_decode(Bits(sample.begin() + 1, sample.end()), params.repetition);
    const Bits recovered(decoded.begin(), decoded.end() - 1);
    const std::uint8_t keyed_guess = decoded.back() == prf_bit(recovered, params.key) ? 0 : 1;
    keyed += keyed_guess == b;
    keyless += sample[0] == b;
  }
  result.keyed_accuracy = static_cast<double>(keyed) / n_trials;
  result.keyless_accuracy = static_cast<double>(keyless) / n_trials;
  return result;
}

}  // namespace invcert::theory
