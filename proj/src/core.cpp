#include "invcert/core.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace invcert {

LabelSpace::LabelSpace(int size, std::vector<std::string> names) : size_(size), names_(std::move(names)) {
  if (size_ < 2) throw ValidationError("label space needs at least 2 labels", "num_labels");
  if (!names_.empty()) {
    if (static_cast<int>(names_.size()) != size_)
      throw ValidationError("label_names length must equal num_labels", "label_names");
    std::set<std::string> unique(names_.begin(), names_.end());
    if (unique.size() != names_.size()) throw ValidationError("label names must be unique", "label_names");
  }
}

std::string LabelSpace::name(Label l) const {
  if (!contains(l)) throw ValidationError("label out of range: " + std::to_string(l), "label");
  return names_.empty() ? std::to_string(l) : names_[static_cast<std::size_t>(l)];
}

LabelSet make_label_set(std::vector<Label> labels, int m) {
  for (Label l : labels)
    if (l < 0 || l >= m)
      throw ValidationError("label " + std::to_string(l) + " outside [0, " + std::to_string(m) + ")", "labels");
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

bool is_subset(const LabelSet& inner, const LabelSet& outer) {
  return std::includes(outer.begin(), outer.end(), inner.begin(), inner.end());
}

LabelPartition::LabelPartition(std::vector<LabelSet> classes, int m) : num_labels_(m) {
  if (m < 1) throw ValidationError("partition over an empty label space", "partition");
  constexpr std::size_t unowned = static_cast<std::size_t>(-1);
  owner_.assign(static_cast<std::size_t>(m), unowned);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (classes[c].empty()) throw ValidationError("partition class " + std::to_string(c) + " is empty", "partition");
    for (Label l : classes[c]) {
      if (l < 0 || l >= m)
        throw ValidationError("partition label " + std::to_string(l) + " out of range", "partition");
      auto& slot = owner_[static_cast<std::size_t>(l)];
      if (slot != unowned)
        throw ValidationError("label " + std::to_string(l) + " appears in more than one class", "partition",
                              "make the classes disjoint");
      slot = c;
    }
    std::sort(classes[c].begin(), classes[c].end());
  }
  for (int l = 0; l < m; ++l)
    if (owner_[static_cast<std::size_t>(l)] == unowned)
      throw ValidationError("label " + std::to_string(l) + " is not covered by the partition", "partition",
                            "every label must belong to exactly one class");
  classes_ = std::move(classes);
}

LabelPartition LabelPartition::singletons(int m) {
  std::vector<LabelSet> classes;
  for (Label l = 0; l < m; ++l) classes.push_back({l});
  return LabelPartition(std::move(classes), m);
}

LabelPartition LabelPartition::trivial(int m) {
  LabelSet all(static_cast<std::size_t>(m));
  for (Label l = 0; l < m; ++l) all[static_cast<std::size_t>(l)] = l;
  return LabelPartition({all}, m);
}

std::size_t LabelPartition::class_of(Label l) const {
  if (l < 0 || l >= num_labels_) throw ValidationError("label out of range: " + std::to_string(l), "label");
  return owner_[static_cast<std::size_t>(l)];
}

LabelPartition refine(const LabelPartition& a, const LabelPartition& b) {
  if (a.num_labels() != b.num_labels())
    throw ValidationError("cannot refine partitions over different label spaces", "partition");
  std::vector<LabelSet> out;
  for (const auto& ca : a.classes())
    for (const auto& cb : b.classes()) {
      LabelSet both;
      std::set_intersection(ca.begin(), ca.end(), cb.begin(), cb.end(), std::back_inserter(both));
      if (!both.empty()) out.push_back(std::move(both));
    }
  std::sort(out.begin(), out.end(), [](const LabelSet& x, const LabelSet& y) { return x.front() < y.front(); });
  return LabelPartition(std::move(out), a.num_labels());
}

std::vector<LabelSet> canonical_classes(const LabelPartition& p) {
  auto classes = p.classes();
  std::sort(classes.begin(), classes.end());
  return classes;
}

ProbabilityVector::ProbabilityVector(Eigen::VectorXd values) : values_(std::move(values)) {
  if (values_.size() == 0) throw ValidationError("empty probability vector", "probs");
  for (Eigen::Index i = 0; i < values_.size(); ++i) {
    const double v = values_(i);
    if (!(v >= 0.0 && v <= 1.0))
      throw ValidationError("probability entry " + std::to_string(i) + " outside [0,1]", "probs");
  }
  if (std::abs(values_.sum() - 1.0) > kProbabilitySumTolerance)
    throw ValidationError("probabilities must sum to 1", "probs");
}

ProbabilityVector::ProbabilityVector(std::initializer_list<double> values)
    : ProbabilityVector(Eigen::VectorXd::Map(values.begin(), static_cast<Eigen::Index>(values.size())).eval()) {}

namespace {

void check_labels(const ProbabilityVector& p, const LabelSet& labels, const char* field) {
  for (Label l : labels)
    if (l < 0 || l >= p.size())
      throw ValidationError("label " + std::to_string(l) + " out of range", field);
}

}  // namespace

HingeGap hinge_gap(const ProbabilityVector& alpha, Label c, const LabelSet& competitors) {
  if (c < 0 || c >= alpha.size()) throw ValidationError("label c out of range", "c");
  check_labels(alpha, competitors, "L");
  double best = -kInfinity;
  for (Label l : competitors)
    if (l != c) best = std::max(best, alpha[l]);
  if (best == -kInfinity) return {};
  return {alpha[c] - best};
}

ProbabilityVector renormalize(const ProbabilityVector& p, const LabelSet& subset) {
  if (subset.empty()) throw ValidationError("renormalization subset is empty", "subset");
  check_labels(p, subset, "subset");
  Eigen::VectorXd out(static_cast<Eigen::Index>(subset.size()));
  for (std::size_t i = 0; i < subset.size(); ++i) out(static_cast<Eigen::Index>(i)) = p[subset[i]];
  const double mass = out.sum();
  if (!(mass > 0.0))
    throw DegenerateError("zero probability mass on renormalization subset", "subset",
                          "treat the sample as abstained");
  out /= mass;
  return ProbabilityVector(std::move(out));
}

Label argmax_label(const ProbabilityVector& p, const std::optional<LabelSet>& subset) {
  if (!subset) return argmax_over(p.values());
  if (subset->empty()) throw ValidationError("argmax subset is empty", "subset");
  check_labels(p, *subset, "subset");
  return argmax_over(p.values(), *subset);
}

}  // namespace invcert
