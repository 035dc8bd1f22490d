#include "invcert/datasets.hpp"

#include <algorithm>
#include <cmath>

#include "invcert/rng.hpp"

namespace invcert {

std::string Dataset::id(Eigen::Index i) const {
  return ids.empty() ? std::to_string(i) : ids[static_cast<std::size_t>(i)];
}

void Dataset::validate(int num_labels) const {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows())
    throw ValidationError("dataset has " + std::to_string(labels.size()) + " labels for " +
                              std::to_string(features.rows()) + " rows",
                          "dataset");
  if (!ids.empty() && ids.size() != labels.size()) throw ValidationError("dataset ids do not match rows", "dataset");
  for (Label l : labels)
    if (l < 0 || l >= num_labels)
      throw ValidationError("dataset label " + std::to_string(l) + " outside the label space", "dataset");
  if (!features.allFinite()) throw ValidationError("dataset contains non-finite features", "dataset");
}

Dataset restrict_to(const Dataset& data, const LabelSet& subset, bool reindex) {
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < data.size(); ++i)
    if (std::binary_search(subset.begin(), subset.end(), data.labels[static_cast<std::size_t>(i)])) rows.push_back(i);
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), data.dim());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Eigen::Index src = rows[r];
    out.features.row(static_cast<Eigen::Index>(r)) = data.features.row(src);
    Label l = data.labels[static_cast<std::size_t>(src)];
    if (reindex) l = static_cast<Label>(std::lower_bound(subset.begin(), subset.end(), l) - subset.begin());
    out.labels.push_back(l);
    if (!data.ids.empty()) out.ids.push_back(data.ids[static_cast<std::size_t>(src)]);
  }
  return out;
}

Dataset make_blobs(const Eigen::MatrixXd& centers, double spread, int per_center, std::uint64_t seed) {
  const Eigen::Index k = centers.rows();
  const Eigen::Index d = centers.cols();
  Dataset out;
  out.features.resize(k * per_center, d);
  Eigen::Index row = 0;
  for (Eigen::Index c = 0; c < k; ++c)
    for (int i = 0; i < per_center; ++i, ++row) {
      Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(row));
      for (Eigen::Index j = 0; j < d; ++j) out.features(row, j) = centers(c, j) + spread * rng.normal();
      out.labels.push_back(static_cast<Label>(c));
    }
  return out;
}

Dataset make_xor() {
  Dataset out;
  out.features.resize(4, 2);
  out.features << 0, 0, 0, 1, 1, 0, 1, 1;
  out.labels = {0, 1, 1, 0};
  return out;
}

std::vector<ProbabilityVector> synthetic_probabilities(int num_samples, int num_labels, std::uint64_t seed,
                                                       double signal, double noise,
                                                       std::vector<Label>* true_labels) {
  if (num_labels < 2) throw ValidationError("need at least 2 labels", "num_labels");
  if (num_samples < 0) throw ValidationError("negative sample count", "num_samples");
  std::vector<ProbabilityVector> out;
  out.reserve(static_cast<std::size_t>(num_samples));
  if (true_labels) true_labels->clear();
  for (int i = 0; i < num_samples; ++i) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(i));
    const Label truth = static_cast<Label>(rng.below(static_cast<std::uint64_t>(num_labels)));
    Eigen::VectorXd z(num_labels);
    for (int j = 0; j < num_labels; ++j) z(j) = noise * rng.normal() + (j == truth ? signal : 0.0);
    Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
    e /= e.sum();
    out.emplace_back(std::move(e));
    if (true_labels) true_labels->push_back(truth);
  }
  return out;
}

}  // namespace invcert
