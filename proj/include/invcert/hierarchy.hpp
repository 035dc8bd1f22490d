#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "invcert/core.hpp"
#include "invcert/datasets.hpp"
#include "invcert/models.hpp"

namespace invcert {

enum class LeafStrategy { kRenormalize, kRetrain };

// Nothing (singleton leaves, structure-only trees), a built-in model, or a
// table of precomputed logits.
using NodeClassifier = std::variant<std::monostate, Model, std::shared_ptr<const LookupClassifier>>;

using NodeId = std::size_t;

// Intermediate nodes route to one of their children; the classifier's output
// i selects children[i]. Leaves predict within `labels`: RENORMALIZE leaves
// hold a full-label-space classifier restricted to `labels`, RETRAIN leaves a
// classifier whose output i is labels[i].
struct HierarchyNode {
  enum class Kind { kIntermediate, kLeaf };

  Kind kind = Kind::kLeaf;
  LabelSet labels;
  NodeClassifier classifier;
  LeafStrategy strategy = LeafStrategy::kRenormalize;
  std::vector<NodeId> children;
  std::optional<NodeId> parent;

  bool is_leaf() const noexcept { return kind == Kind::kLeaf; }
  bool has_classifier() const noexcept { return !std::holds_alternative<std::monostate>(classifier); }
};

// Recursive description consumed by Hierarchy's constructor.
struct NodeSpec {
  HierarchyNode::Kind kind = HierarchyNode::Kind::kLeaf;
  LabelSet labels;  // leaves only; intermediates take the union of their children
  NodeClassifier classifier;
  LeafStrategy strategy = LeafStrategy::kRenormalize;
  std::vector<NodeSpec> children;

  static NodeSpec leaf(LabelSet labels, NodeClassifier classifier = {},
                       LeafStrategy strategy = LeafStrategy::kRenormalize);
  static NodeSpec intermediate(NodeClassifier classifier, std::vector<NodeSpec> children);
};

class Hierarchy {
 public:
  // Nodes are numbered in preorder; the root is node 0.
  Hierarchy(LabelSpace space, const NodeSpec& root);

  const LabelSpace& label_space() const noexcept { return space_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const HierarchyNode& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<HierarchyNode>& nodes() const noexcept { return nodes_; }

  NodeId leaf_of(Label label) const;
  // Root-to-leaf node ids of the leaf that owns `label`.
  std::vector<NodeId> path_to(Label label) const;
  // Output index of intermediate `id` whose child subtree holds `label`.
  std::size_t branch_of(NodeId id, Label label) const;
  // Leaf label sets in preorder: the partition the tree induces.
  LabelPartition leaf_partition() const;

 private:
  NodeId add(const NodeSpec& spec, std::optional<NodeId> parent);
  void check_node(NodeId id) const;

  LabelSpace space_;
  std::vector<HierarchyNode> nodes_;
  std::vector<NodeId> leaf_owner_;
};

// One leaf spanning every label.
Hierarchy flat_hierarchy(LabelSpace space, NodeClassifier baseline);

// Root split by partitions[0], each class split further by partitions[1], and
// so on. Levels that would not split a class are skipped. No classifiers.
Hierarchy stacked_topology(LabelSpace space, const std::vector<LabelPartition>& partitions);

// Probabilities of `classifier` on one input (lookup tables use `sample_id`).
ProbabilityVector node_proba(const NodeClassifier& classifier, const Eigen::VectorXd& x,
                             const std::string& sample_id = {});

// Root-to-leaf route followed by x.
std::vector<NodeId> route(const Hierarchy& h, const Eigen::VectorXd& x, const std::string& sample_id = {});

Label infer(const Hierarchy& h, const Eigen::VectorXd& x, const std::string& sample_id = {});

// As infer, but node `target` sees `x_target` while every other node sees x.
Label infer_with_override(const Hierarchy& h, const Eigen::VectorXd& x, NodeId target,
                          const Eigen::VectorXd& x_target, const std::string& sample_id = {});

// Two-sided margin certificate from the top entry and runner-up among `subset`
// (all entries when empty), using the estimates as the bounds. A subset of one
// label certifies an infinite radius.
CertifiedPrediction margin_certificate(const ProbabilityVector& probs, double sigma, const LabelSet& subset = {});

// Leaf certificate from full-space smoothed estimates restricted to `subset`.
// Throws RoutingMismatch when the global top label is outside `subset`.
CertifiedPrediction leaf_certificate_renormalized(const ProbabilityVector& probs, const LabelSet& subset,
                                                  double sigma);

// Guarantee of a root-to-leaf path: the smallest per-node radius.
double hierarchy_certificate(const std::vector<double>& node_radii);

enum class SweepMode { kAllSubsets, kSampled };

struct SweepOptions {
  SweepMode mode = SweepMode::kSampled;
  int subsets_per_size = 500;
  std::uint64_t seed = 0;
  // ALL_SUBSETS budget on C(m, s) * |dataset|.
  double max_evaluations = 1e7;
};

struct SweepStats {
  int size = 0;
  long long subsets = 0;
  long long evaluations = 0;     // (subset, sample) pairs with the sample's top label in the subset
  long long infinite_count = 0;  // singleton subsets land here and are excluded below
  double mean = 0.0;
  double stddev = 0.0;
  double q1 = 0.0;
  double median = 0.0;
  double q3 = 0.0;
};

std::vector<SweepStats> subset_radius_sweep(const std::vector<ProbabilityVector>& probs, double sigma,
                                            const std::vector<int>& sizes, const SweepOptions& options);

// Linear-interpolation quantile of sorted values, q in [0, 1].
double quantile_sorted(const std::vector<double>& sorted, double q);

enum class AttackMode { kWorstCase, kBudgeted };

struct AttackScenario {
  AttackMode mode = AttackMode::kWorstCase;
  std::optional<NodeId> budget_target;
  PgdParams params;

  void validate(const Hierarchy& h) const;
};

struct AdversarialReport {
  double natural_acc = 0.0;
  std::optional<double> adv_acc;     // WORST_CASE
  std::optional<double> budget_acc;  // BUDGETED
  std::optional<NodeId> budget_node;
  long long total = 0;
};

// WORST_CASE: each classifier on the sample's true path is attacked with PGD
// against its correct output; the sample counts as correct iff the clean input
// and every attacked input are classified correctly by the whole hierarchy.
// BUDGETED: only `budget_target` sees the attacked input.
AdversarialReport evaluate_adversarial(const Hierarchy& h, const Dataset& data, const AttackScenario& scenario,
                                       std::uint64_t seed, unsigned threads = 1);

// BUDGETED attack of every node with a classifier; reports the lowest accuracy.
AdversarialReport evaluate_budgeted_worst(const Hierarchy& h, const Dataset& data, const PgdParams& params,
                                          std::uint64_t seed, unsigned threads = 1);

// Trains a classifier on the rows labelled in `subset`, labels re-indexed to
// positions in the subset. Returns nullopt for singleton subsets.
std::optional<Model> retrain_leaf(const Dataset& data, const LabelSet& subset, const ModelSpec& spec,
                                  const TrainOptions& options);

}  // namespace invcert
