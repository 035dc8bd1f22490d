#include "invcert/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "invcert/rng.hpp"

namespace invcert {

void EmbeddingSet::validate(int num_labels) const {
  if (vectors.rows() < 1) throw ValidationError("embedding set is empty", "embeddings");
  if (vectors.cols() < 1) throw ValidationError("embeddings have no dimensions", "embeddings");
  if (static_cast<Eigen::Index>(labels.size()) != vectors.rows())
    throw ValidationError("embedding labels do not match rows", "embeddings");
  for (Label l : labels)
    if (l < 0 || l >= num_labels)
      throw ValidationError("embedding label " + std::to_string(l) + " outside the label space", "embeddings");
  if (!vectors.allFinite()) throw ValidationError("embeddings contain non-finite values", "embeddings");
}

void ConfusionMatrix::validate() const {
  if (counts.rows() < 1 || counts.rows() != counts.cols())
    throw ValidationError("confusion matrix must be square and nonempty", "confusion");
  if (!counts.allFinite() || (counts.array() < 0.0).any())
    throw ValidationError("confusion counts must be finite and nonnegative", "confusion");
}

double inertia(const Eigen::MatrixXd& points, const std::vector<int>& assignment, const Eigen::MatrixXd& centroids) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    total += (points.row(i) - centroids.row(assignment[static_cast<std::size_t>(i)])).squaredNorm();
  return total;
}

namespace {

// Nearest centroid, lowest index on ties.
int nearest(const Eigen::MatrixXd& points, Eigen::Index i, const Eigen::MatrixXd& centroids, double* dist) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d = (points.row(i) - centroids.row(c)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  if (dist) *dist = best_d;
  return best;
}

Eigen::MatrixXd kmeans_plus_plus(const Eigen::MatrixXd& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  Eigen::MatrixXd centroids(k, points.cols());
  centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n))));
  Eigen::VectorXd d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2(i) = (points.row(i) - centroids.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        target -= d2(i);
        if (target < 0.0 && d2(i) > 0.0) {
          pick = i;
          break;
        }
      }
      while (d2(pick) == 0.0 && pick > 0) --pick;
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centroids.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) d2(i) = std::min(d2(i), (points.row(i) - centroids.row(c)).squaredNorm());
  }
  return centroids;
}

}  // namespace

KMeansResult kmeans(const Eigen::MatrixXd& points, int k, std::uint64_t seed, int max_iter, double tol) {
  const Eigen::Index n = points.rows();
  if (n < 1) throw ValidationError("no points to cluster", "embeddings");
  if (k < 1 || k > n)
    throw ValidationError("k=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]", "k");
  if (max_iter < 1) throw ValidationError("max_iter must be at least 1", "max_iter");
  if (!(tol >= 0.0)) throw ValidationError("tol must be nonnegative", "tol");

  Rng rng(mix64(seed));
  KMeansResult r;
  r.centroids = kmeans_plus_plus(points, k, rng);
  r.assignment.assign(static_cast<std::size_t>(n), -1);
  std::vector<double> dist(static_cast<std::size_t>(n));

  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = nearest(points, i, r.centroids, &dist[static_cast<std::size_t>(i)]);
      changed |= c != r.assignment[static_cast<std::size_t>(i)];
      r.assignment[static_cast<std::size_t>(i)] = c;
    }

    std::vector<Eigen::Index> sizes(static_cast<std::size_t>(k), 0);
    for (int c : r.assignment) ++sizes[static_cast<std::size_t>(c)];
    for (int c = 0; c < k; ++c) {
      if (sizes[static_cast<std::size_t>(c)] > 0) continue;
      Eigen::Index far = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        const int owner = r.assignment[static_cast<std::size_t>(i)];
        if (sizes[static_cast<std::size_t>(owner)] < 2) continue;
        if (far < 0 || dist[static_cast<std::size_t>(i)] > dist[static_cast<std::size_t>(far)]) far = i;
      }
      --sizes[static_cast<std::size_t>(r.assignment[static_cast<std::size_t>(far)])];
      r.assignment[static_cast<std::size_t>(far)] = c;
      dist[static_cast<std::size_t>(far)] = 0.0;
      sizes[static_cast<std::size_t>(c)] = 1;
      changed = true;
    }

    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(k, points.cols());
    for (Eigen::Index i = 0; i < n; ++i) next.row(r.assignment[static_cast<std::size_t>(i)]) += points.row(i);
    for (int c = 0; c < k; ++c) next.row(c) /= static_cast<double>(sizes[static_cast<std::size_t>(c)]);
    const double shift = (next - r.centroids).rowwise().norm().maxCoeff();
    r.centroids = std::move(next);
    r.inertia.push_back(inertia(points, r.assignment, r.centroids));
    r.iterations = iter + 1;
    if (!changed || shift < tol) {
      r.converged = true;
      break;
    }
  }
  return r;
}

LabelPartition derive_partition(const std::vector<int>& assignment, const std::vector<Label>& labels, int k,
                                int num_labels) {
  if (assignment.size() != labels.size()) throw ValidationError("assignment and labels differ in length", "assignment");
  if (k < 1) throw ValidationError("k must be at least 1", "k");
  if (num_labels < 1) throw ValidationError("num_labels must be at least 1", "num_labels");
  // votes(label, cluster)
  Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic> votes =
      Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>::Zero(num_labels, k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int c = assignment[i];
    const Label l = labels[i];
    if (c < 0 || c >= k) throw ValidationError("cluster index " + std::to_string(c) + " out of range", "assignment");
    if (l < 0 || l >= num_labels) throw ValidationError("label " + std::to_string(l) + " out of range", "labels");
    ++votes(l, c);
  }
  std::vector<LabelSet> by_cluster(static_cast<std::size_t>(k));
  LabelSet unobserved;
  for (Label l = 0; l < num_labels; ++l) {
    Eigen::Index owner = 0;
    const long long top = votes.row(l).maxCoeff(&owner);
    if (top == 0)
      unobserved.push_back(l);
    else
      by_cluster[static_cast<std::size_t>(owner)].push_back(l);
  }
  std::vector<LabelSet> classes;
  for (auto& cls : by_cluster)
    if (!cls.empty()) classes.push_back(std::move(cls));
  if (classes.empty()) classes.emplace_back();
  classes.front().insert(classes.front().end(), unobserved.begin(), unobserved.end());
  return LabelPartition(std::move(classes), num_labels);
}

SeparationReport cluster_separation_check(const std::vector<int>& assignment, const Eigen::MatrixXd& points) {
  const Eigen::Index n = points.rows();
  if (static_cast<Eigen::Index>(assignment.size()) != n)
    throw ValidationError("assignment does not match points", "assignment");
  int k = 0;
  for (int c : assignment) {
    if (c < 0) throw ValidationError("negative cluster index", "assignment");
    k = std::max(k, c + 1);
  }
  std::vector<Eigen::Index> sizes(static_cast<std::size_t>(k), 0);
  for (int c : assignment) ++sizes[static_cast<std::size_t>(c)];
  const auto populated = std::count_if(sizes.begin(), sizes.end(), [](Eigen::Index s) { return s > 0; });
  if (populated < 2)
    throw ValidationError("separation is undefined for a single cluster", "k", "cluster with k >= 2");

  SeparationReport report;
  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int own = assignment[static_cast<std::size_t>(i)];
    if (sizes[static_cast<std::size_t>(own)] == 1) {
      ++report.singleton_points;
      continue;
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) sums[static_cast<std::size_t>(assignment[static_cast<std::size_t>(j)])] += (points.row(i) - points.row(j)).norm();
    const double a = sums[static_cast<std::size_t>(own)] / static_cast<double>(sizes[static_cast<std::size_t>(own)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c)
      if (c != own && sizes[static_cast<std::size_t>(c)] > 0)
        b = std::min(b, sums[static_cast<std::size_t>(c)] / static_cast<double>(sizes[static_cast<std::size_t>(c)]));
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  report.silhouette = total / static_cast<double>(n);
  report.pass = report.silhouette >= kSilhouetteThreshold;
  return report;
}

LabelPartition partition_from_confusion(const ConfusionMatrix& cm, int k) {
  cm.validate();
  const int m = cm.num_labels();
  if (k < 1 || k > m) throw ValidationError("k must lie in [1, " + std::to_string(m) + "]", "k");
  Eigen::MatrixXd a = cm.counts + cm.counts.transpose();
  a.diagonal().setZero();
  if (k < m && !(a.array() > 0.0).any())
    throw DegenerateError("confusion matrix has no off-diagonal mass to group labels by", "confusion",
                          "supply a confusion matrix from a model that makes mistakes");

  std::vector<LabelSet> groups;
  for (Label l = 0; l < m; ++l) groups.push_back({l});
  // link(i, j): confusion mass between groups i and j.
  Eigen::MatrixXd link = a;
  while (static_cast<int>(groups.size()) > k) {
    std::size_t bi = 0, bj = 1;
    double best = -1.0;
    for (std::size_t i = 0; i < groups.size(); ++i)
      for (std::size_t j = i + 1; j < groups.size(); ++j)
        if (link(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) > best) {
          best = link(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
          bi = i;
          bj = j;
        }
    auto& merged = groups[bi];
    merged.insert(merged.end(), groups[bj].begin(), groups[bj].end());
    std::sort(merged.begin(), merged.end());
    groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(bj));

    const auto ii = static_cast<Eigen::Index>(bi);
    const auto jj = static_cast<Eigen::Index>(bj);
    link.row(ii) += link.row(jj);
    link.col(ii) += link.col(jj);
    link(ii, ii) = 0.0;
    const Eigen::Index g = link.rows();
    Eigen::MatrixXd shrunk(g - 1, g - 1);
    for (Eigen::Index r = 0, rr = 0; r < g; ++r) {
      if (r == jj) continue;
      for (Eigen::Index c = 0, cc = 0; c < g; ++c) {
        if (c == jj) continue;
        shrunk(rr, cc++) = link(r, c);
      }
      ++rr;
    }
    link = std::move(shrunk);
  }
  // Groups stay ordered by smallest label: merges keep the earlier group's slot.
  return LabelPartition(std::move(groups), m);
}

DiscoveryResult discover_partition(const EmbeddingSet& embeddings, int k, int num_labels, std::uint64_t seed,
                                   int max_iter, double tol) {
  embeddings.validate(num_labels);
  KMeansResult clustering = kmeans(embeddings.vectors, k, seed, max_iter, tol);
  std::optional<SeparationReport> separation;
  if (k >= 2) separation = cluster_separation_check(clustering.assignment, embeddings.vectors);
  LabelPartition partition = derive_partition(clustering.assignment, embeddings.labels, k, num_labels);
  return {std::move(clustering), separation, std::move(partition)};
}

}  // namespace invcert
