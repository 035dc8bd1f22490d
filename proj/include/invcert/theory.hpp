#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace invcert::theory {

// Binary task with one robust feature and d weakly predictive Gaussian ones.
// Column 0 holds the robust feature, columns 1..d the Gaussian features.
struct GaussModelParams {
  int d = 200;
  double p = 0.95;
  double eta = 0.1;

  void validate() const;
};

struct GaussSample {
  Eigen::MatrixXd x;  // n x (d + 1)
  Eigen::VectorXi y;  // entries in {-1, +1}
};

// y uniform on {-1, +1}; column 0 is +y with probability p, else -y; the other
// columns are N(eta y, 1). Row i draws from substream (seed, i).
GaussSample gauss_sample(const GaussModelParams& params, int n_samples, std::uint64_t seed);

// Row `index` of gauss_sample(params, ., seed), without materializing the rest.
Eigen::VectorXd gauss_row(const GaussModelParams& params, std::uint64_t seed, std::uint64_t index, int* y);

// Sign of the mean of columns 1..k, with sign(0) = +1. Requires 1 <= k <= d.
int meta_feature(const Eigen::Ref<const Eigen::VectorXd>& x, int k);

// P(meta feature = y) = Phi(sqrt(k) eta).
double analytic_meta_accuracy(double eta, int k);

// Adversarial-accuracy ceiling p gamma / (1 - p) for natural accuracy 1 - gamma, clamped to [0, 1].
double theorem1_bound(double p, double gamma);

// Shifts every unprotected Gaussian feature (columns k_protected+1..d) by
// -2 eta y. Column 0 and the first k_protected Gaussian columns are unchanged.
Eigen::VectorXd linf_flip_attack(const Eigen::Ref<const Eigen::VectorXd>& x, int y, double eta, int k_protected);

// Prediction of the averaging classifier: sign of the mean of all Gaussian
// features, sign(0) = +1.
int averaging_classifier(const Eigen::Ref<const Eigen::VectorXd>& x);

struct GaussRow {
  double eta = 0.0;
  int k = 0;
  double natural_acc = 0.0;
  double adversarial_acc = 0.0;
  long long n = 0;
};

// For each (eta, k) with k <= d: the meta-feature classifier on the k protected
// features (the averaging classifier when k = 0), scored on clean samples and
// on linf_flip_attack with k protected features. Pairs with k > d are skipped.
std::vector<GaussRow> gauss_experiment(const std::vector<double>& etas, const std::vector<int>& ks, int d, double p,
                                       int n_samples, std::uint64_t seed);

using Bits = std::vector<std::uint8_t>;

struct PrfModelParams {
  int n_bits = 32;
  std::uint64_t key = 0x5eed;
  int repetition = 3;

  void validate() const;
};

// Keyed pseudo-random bit of a message: a 64-bit mix of the key and the
// message words, reduced mod 2.
std::uint8_t prf_bit(const Bits& message, std::uint64_t key);

// Message followed by `bit`, each bit repeated r times (r odd).
Bits prf_encode(const Bits& message, std::uint8_t bit, int repetition);

// Majority vote over each group of r copies.
Bits prf_decode(const Bits& codeword, int repetition);

struct PrfResult {
  double keyed_accuracy = 0.0;
  double keyless_accuracy = 0.0;
  bool stress_mode = false;  // flip_budget exceeds what the code corrects
  long long trials = 0;
};

// Samples b uniform and x uniform, emits (b, Encode(x, F_k(x) xor b)), flips
// `flip_budget` copies of every repeated group, and when `attack_first_bit`
// replaces the leading bit with an unpredictable one. The keyed classifier
// decodes and compares the last bit to F_k(x); the keyless one reads the
// leading bit.
PrfResult prf_experiment(const PrfModelParams& params, int flip_budget, bool attack_first_bit, int n_trials,
                         std::uint64_t seed);

}  // namespace invcert::theory
