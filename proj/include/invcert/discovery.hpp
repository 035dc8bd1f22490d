#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "invcert/core.hpp"

namespace invcert {

struct EmbeddingSet {
  Eigen::MatrixXd vectors;  // n x d
  std::vector<Label> labels;
  std::vector<std::string> ids;
  std::string layer_tag;

  void validate(int num_labels) const;
};

struct ConfusionMatrix {
  Eigen::MatrixXd counts;  // rows: true label, columns: predicted label

  int num_labels() const noexcept { return static_cast<int>(counts.rows()); }
  void validate() const;
};

struct KMeansResult {
  std::vector<int> assignment;
  Eigen::MatrixXd centroids;    // k x d
  std::vector<double> inertia;  // after each iteration's update step
  int iterations = 0;
  bool converged = false;
};

// Lloyd iterations from a seeded k-means++ start. Stops once no assignment
// changes, the largest centroid shift drops below `tol`, or after max_iter
// iterations. Clusters left empty take the point farthest from its centroid.
KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iter = 300, double tol = 1e-8);

// Sum of squared distances from each point to its assigned centroid.
double inertia(const Eigen::MatrixXd& points, const std::vector<int>& assignment, const Eigen::MatrixXd& centroids);

// Each observed label joins the cluster holding most of its points (ties to
// the lower cluster index); clusters left without labels are dropped and labels
// absent from the data join the first class.
LabelPartition derive_partition(const std::vector<int>& assignment, const std::vector<Label>& labels, int k,
                                int num_labels);

struct SeparationReport {
  double silhouette = 0.0;
  bool pass = false;
  long long singleton_points = 0;  // scored 0 by convention
};

inline constexpr double kSilhouetteThreshold = 0.1;

// Mean silhouette coefficient; pass iff it reaches kSilhouetteThreshold.
SeparationReport cluster_separation_check(const std::vector<int>& assignment, const Eigen::MatrixXd& points);

// Greedy agglomeration on A = C + C^T with a zeroed diagonal: repeatedly merges
// the two groups sharing the most confusion mass until k groups remain. Ties
// go to the pair with the lowest smallest labels. Classes are ordered by their
// smallest label.
LabelPartition partition_from_confusion(const ConfusionMatrix& cm, int k);

// Algorithm-level driver: cluster embeddings, check separation, derive classes.
// The separation check is skipped (left empty) for k = 1.
struct DiscoveryResult {
  KMeansResult clustering;
  std::optional<SeparationReport> separation;
  LabelPartition partition;
};
DiscoveryResult discover_partition(const EmbeddingSet& embeddings, int k, int num_labels, std::uint64_t seed,
                                   int max_iter = 300, double tol = 1e-8);

}  // namespace invcert
