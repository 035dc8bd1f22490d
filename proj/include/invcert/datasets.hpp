#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "invcert/core.hpp"

namespace invcert {

// Labelled feature rows. `ids` is either empty or one id per row.
struct Dataset {
  Eigen::MatrixXd features;
  std::vector<Label> labels;
  std::vector<std::string> ids;

  Eigen::Index size() const noexcept { return features.rows(); }
  Eigen::Index dim() const noexcept { return features.cols(); }
  Eigen::VectorXd row(Eigen::Index i) const { return features.row(i).transpose(); }
  std::string id(Eigen::Index i) const;

  void validate(int num_labels) const;
};

// Rows whose label is in `subset`. With `reindex`, labels become positions in
// the (sorted) subset.
Dataset restrict_to(const Dataset& data, const LabelSet& subset, bool reindex);

// Isotropic Gaussian blobs: `per_center` points around each row of `centers`,
// labelled by center index.
Dataset make_blobs(const Eigen::MatrixXd& centers, double spread, int per_center, std::uint64_t seed);

// The four corners of the unit square labelled by XOR of the coordinates.
Dataset make_xor();

// Softmax outputs of random logits: a true label drawn uniformly gets a bonus
// of `signal`, every logit gets N(0, noise^2).
std::vector<ProbabilityVector> synthetic_probabilities(int num_samples, int num_labels, std::uint64_t seed,
                                                       double signal = 2.0, double noise = 1.0,
                                                       std::vector<Label>* true_labels = nullptr);

}  // namespace invcert
