#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "invcert/errors.hpp"

namespace invcert {

using Label = int;
using LabelSet = std::vector<Label>;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

// Absolute tolerance on the sum of a probability vector.
inline constexpr double kProbabilitySumTolerance = 1e-9;

class LabelSpace {
 public:
  explicit LabelSpace(int size, std::vector<std::string> names = {});

  int size() const noexcept { return size_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  bool contains(Label l) const noexcept { return l >= 0 && l < size_; }
  std::string name(Label l) const;

 private:
  int size_;
  std::vector<std::string> names_;
};

// Sorted, duplicate-free copy of `labels`; throws if any label is outside [0, m).
LabelSet make_label_set(std::vector<Label> labels, int m);

bool is_subset(const LabelSet& inner, const LabelSet& outer);

// Disjoint nonempty label classes covering {0, ..., m-1}.
class LabelPartition {
 public:
  LabelPartition(std::vector<LabelSet> classes, int m);

  // Every label in its own class.
  static LabelPartition singletons(int m);
  // A single class holding every label.
  static LabelPartition trivial(int m);

  int num_labels() const noexcept { return num_labels_; }
  std::size_t size() const noexcept { return classes_.size(); }
  const std::vector<LabelSet>& classes() const noexcept { return classes_; }
  const LabelSet& operator[](std::size_t i) const { return classes_.at(i); }

  // Index of the class holding label l.
  std::size_t class_of(Label l) const;

  friend bool operator==(const LabelPartition&, const LabelPartition&) = default;

 private:
  std::vector<LabelSet> classes_;
  std::vector<std::size_t> owner_;
  int num_labels_;
};

// Common refinement: nonempty pairwise intersections, ordered by smallest label.
LabelPartition refine(const LabelPartition& a, const LabelPartition& b);

// The same classes regardless of order (each class sorted, classes sorted).
std::vector<LabelSet> canonical_classes(const LabelPartition& p);

class ProbabilityVector {
 public:
  ProbabilityVector() = default;
  explicit ProbabilityVector(Eigen::VectorXd values);
  ProbabilityVector(std::initializer_list<double> values);

  Eigen::Index size() const noexcept { return values_.size(); }
  double operator[](Eigen::Index i) const { return values_(i); }
  const Eigen::VectorXd& values() const noexcept { return values_; }

 private:
  Eigen::VectorXd values_;
};

struct HingeGap {
  double value = kInfinity;
  // True when no competitor label existed.
  bool unbounded() const noexcept { return value == kInfinity; }
};

struct CertifiedPrediction {
  std::optional<Label> label;    // empty: abstained
  std::optional<double> radius;  // empty iff abstained
  double p_a_lower = 0.0;
  double sigma = 0.0;
  long long n_samples = 0;

  bool abstained() const noexcept { return !label.has_value(); }
  static CertifiedPrediction abstain(double p_a_lower, double sigma, long long n) {
    return {std::nullopt, std::nullopt, p_a_lower, sigma, n};
  }
};

// Index of the largest entry among `subset` (all entries when empty).
// Ties go to the lowest index.
template <class Derived>
Label argmax_over(const Eigen::DenseBase<Derived>& v, std::span<const Label> subset = {}) {
  Label best = -1;
  typename Derived::Scalar best_value{};
  auto visit = [&](Label i) {
    if (best < 0 || v(i) > best_value) {
      best = i;
      best_value = v(i);
    }
  };
  if (subset.empty()) {
    for (Eigen::Index i = 0; i < v.size(); ++i) visit(static_cast<Label>(i));
  } else {
    for (Label i : subset) visit(i);
  }
  return best;
}

// alpha_c minus the largest alpha_l over l in `competitors` with l != c.
HingeGap hinge_gap(const ProbabilityVector& alpha, Label c, const LabelSet& competitors);

// Entries on `subset` rescaled to sum to one, in subset order.
ProbabilityVector renormalize(const ProbabilityVector& p, const LabelSet& subset);

Label argmax_label(const ProbabilityVector& p, const std::optional<LabelSet>& subset = std::nullopt);

}  // namespace invcert
