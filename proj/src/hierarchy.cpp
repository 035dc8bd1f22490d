#include "invcert/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "invcert/parallel.hpp"
#include "invcert/rng.hpp"
#include "invcert/smoothing.hpp"

namespace invcert {

NodeSpec NodeSpec::leaf(LabelSet labels, NodeClassifier classifier, LeafStrategy strategy) {
  NodeSpec s;
  s.kind = HierarchyNode::Kind::kLeaf;
  s.labels = std::move(labels);
  s.classifier = std::move(classifier);
  s.strategy = strategy;
  return s;
}

NodeSpec NodeSpec::intermediate(NodeClassifier classifier, std::vector<NodeSpec> children) {
  NodeSpec s;
  s.kind = HierarchyNode::Kind::kIntermediate;
  s.classifier = std::move(classifier);
  s.children = std::move(children);
  return s;
}

namespace {

int classifier_arity(const NodeClassifier& c) {
  if (const auto* m = std::get_if<Model>(&c)) return num_classes(*m);
  if (const auto* t = std::get_if<std::shared_ptr<const LookupClassifier>>(&c)) return (*t)->num_classes();
  return -1;
}

std::string node_name(NodeId id) { return "node " + std::to_string(id); }

}  // namespace

Hierarchy::Hierarchy(LabelSpace space, const NodeSpec& root) : space_(std::move(space)) {
  add(root, std::nullopt);
  const int m = space_.size();
  constexpr NodeId unowned = static_cast<NodeId>(-1);
  leaf_owner_.assign(static_cast<std::size_t>(m), unowned);
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].is_leaf()) continue;
    for (Label l : nodes_[id].labels) {
      if (!space_.contains(l)) throw ValidationError(node_name(id) + " has label out of range", "hierarchy");
      if (leaf_owner_[static_cast<std::size_t>(l)] != unowned)
        throw ValidationError("label " + std::to_string(l) + " appears in two leaves", "hierarchy",
                              "leaf label sets must be disjoint");
      leaf_owner_[static_cast<std::size_t>(l)] = id;
    }
  }
  for (Label l = 0; l < m; ++l)
    if (leaf_owner_[static_cast<std::size_t>(l)] == unowned)
      throw ValidationError("label " + std::to_string(l) + " is not covered by any leaf", "hierarchy",
                            "the leaves must partition the label space");
  for (NodeId id = 0; id < nodes_.size(); ++id) check_node(id);
}

NodeId Hierarchy::add(const NodeSpec& spec, std::optional<NodeId> parent) {
  const NodeId id = nodes_.size();
  nodes_.emplace_back();
  HierarchyNode node;
  node.kind = spec.kind;
  node.classifier = spec.classifier;
  node.strategy = spec.strategy;
  node.parent = parent;
  if (spec.kind == HierarchyNode::Kind::kLeaf) {
    if (spec.labels.empty()) throw ValidationError(node_name(id) + " is a leaf without labels", "hierarchy");
    node.labels = make_label_set(spec.labels, space_.size());
    if (node.labels.size() != spec.labels.size())
      throw ValidationError(node_name(id) + " lists a label twice", "hierarchy");
  } else {
    if (spec.children.empty()) throw ValidationError(node_name(id) + " has no children", "hierarchy");
    for (const auto& child : spec.children) {
      const NodeId cid = add(child, id);
      node.children.push_back(cid);
      const auto& cl = nodes_[cid].labels;
      node.labels.insert(node.labels.end(), cl.begin(), cl.end());
    }
    std::sort(node.labels.begin(), node.labels.end());
  }
  nodes_[id] = std::move(node);
  return id;
}

void Hierarchy::check_node(NodeId id) const {
  const auto& n = nodes_[id];
  const int arity = classifier_arity(n.classifier);
  if (!n.is_leaf()) {
    if (arity >= 0 && arity != static_cast<int>(n.children.size()))
      throw ValidationError(node_name(id) + " routes " + std::to_string(arity) + " ways but has " +
                                std::to_string(n.children.size()) + " children",
                            "hierarchy");
    return;
  }
  if (arity < 0) return;
  const int expected = n.strategy == LeafStrategy::kRenormalize ? space_.size() : static_cast<int>(n.labels.size());
  if (arity != expected)
    throw ValidationError(node_name(id) + " classifier has " + std::to_string(arity) + " outputs, expected " +
                              std::to_string(expected),
                          "hierarchy",
                          n.strategy == LeafStrategy::kRenormalize
                              ? "renormalized leaves take a full-label-space classifier"
                              : "retrained leaves output one score per leaf label");
}

NodeId Hierarchy::leaf_of(Label label) const {
  if (!space_.contains(label)) throw ValidationError("label out of range: " + std::to_string(label), "label");
  return leaf_owner_[static_cast<std::size_t>(label)];
}

std::vector<NodeId> Hierarchy::path_to(Label label) const {
  std::vector<NodeId> path;
  for (std::optional<NodeId> v = leaf_of(label); v; v = nodes_[*v].parent) path.push_back(*v);
  std::reverse(path.begin(), path.end());
  return path;
}

std::size_t Hierarchy::branch_of(NodeId id, Label label) const {
  const auto& n = node(id);
  for (std::size_t i = 0; i < n.children.size(); ++i) {
    const auto& cl = nodes_[n.children[i]].labels;
    if (std::binary_search(cl.begin(), cl.end(), label)) return i;
  }
  throw ValidationError("label " + std::to_string(label) + " is not below " + node_name(id), "label");
}

LabelPartition Hierarchy::leaf_partition() const {
  std::vector<LabelSet> classes;
  for (const auto& n : nodes_)
    if (n.is_leaf()) classes.push_back(n.labels);
  return LabelPartition(std::move(classes), space_.size());
}

Hierarchy flat_hierarchy(LabelSpace space, NodeClassifier baseline) {
  LabelSet all(static_cast<std::size_t>(space.size()));
  std::iota(all.begin(), all.end(), 0);
  return Hierarchy(std::move(space), NodeSpec::leaf(std::move(all), std::move(baseline)));
}

namespace {

NodeSpec stack_level(const LabelSet& labels, const std::vector<LabelPartition>& partitions, std::size_t level) {
  for (; level < partitions.size(); ++level) {
    std::vector<LabelSet> pieces;
    for (const auto& cls : partitions[level].classes()) {
      LabelSet piece;
      std::set_intersection(labels.begin(), labels.end(), cls.begin(), cls.end(), std::back_inserter(piece));
      if (!piece.empty()) pieces.push_back(std::move(piece));
    }
    if (pieces.size() < 2) continue;
    std::vector<NodeSpec> children;
    for (const auto& piece : pieces) children.push_back(stack_level(piece, partitions, level + 1));
    return NodeSpec::intermediate({}, std::move(children));
  }
  return NodeSpec::leaf(labels);
}

}  // namespace

Hierarchy stacked_topology(LabelSpace space, const std::vector<LabelPartition>& partitions) {
  for (const auto& p : partitions)
    if (p.num_labels() != space.size())
      throw ValidationError("partition label count differs from the label space", "partitions");
  LabelSet all(static_cast<std::size_t>(space.size()));
  std::iota(all.begin(), all.end(), 0);
  return Hierarchy(std::move(space), stack_level(all, partitions, 0));
}

ProbabilityVector node_proba(const NodeClassifier& classifier, const Eigen::VectorXd& x,
                             const std::string& sample_id) {
  if (const auto* m = std::get_if<Model>(&classifier)) return predict_proba(*m, x);
  if (const auto* t = std::get_if<std::shared_ptr<const LookupClassifier>>(&classifier))
    return (*t)->predict_proba(sample_id);
  throw CapabilityError("node has no classifier to evaluate", "hierarchy",
                        "attach a classifier to every non-singleton node");
}

namespace {

// Label predicted by leaf `n` on input x.
Label leaf_predict(const HierarchyNode& n, const Eigen::VectorXd& x, const std::string& id) {
  if (n.labels.size() == 1) return n.labels.front();
  const ProbabilityVector p = node_proba(n.classifier, x, id);
  if (n.strategy == LeafStrategy::kRenormalize) return argmax_over(p.values(), n.labels);
  return n.labels[static_cast<std::size_t>(argmax_over(p.values()))];
}

template <class InputFor>
Label walk(const Hierarchy& h, InputFor&& input_for, const std::string& id, std::vector<NodeId>* path) {
  NodeId v = 0;
  for (;;) {
    if (path) path->push_back(v);
    const auto& n = h.node(v);
    if (n.is_leaf()) return leaf_predict(n, input_for(v), id);
    const ProbabilityVector p = node_proba(n.classifier, input_for(v), id);
    v = n.children[static_cast<std::size_t>(argmax_over(p.values()))];
  }
}

}  // namespace

std::vector<NodeId> route(const Hierarchy& h, const Eigen::VectorXd& x, const std::string& sample_id) {
  std::vector<NodeId> path;
  walk(h, [&](NodeId) -> const Eigen::VectorXd& { return x; }, sample_id, &path);
  return path;
}

Label infer(const Hierarchy& h, const Eigen::VectorXd& x, const std::string& sample_id) {
  return walk(h, [&](NodeId) -> const Eigen::VectorXd& { return x; }, sample_id, nullptr);
}

Label infer_with_override(const Hierarchy& h, const Eigen::VectorXd& x, NodeId target,
                          const Eigen::VectorXd& x_target, const std::string& sample_id) {
  return walk(
      h, [&](NodeId v) -> const Eigen::VectorXd& { return v == target ? x_target : x; }, sample_id, nullptr);
}

CertifiedPrediction margin_certificate(const ProbabilityVector& probs, double sigma, const LabelSet& subset) {
  if (!(sigma > 0.0)) throw ValidationError("sigma must be positive", "sigma");
  for (Label l : subset)
    if (l < 0 || l >= probs.size()) throw ValidationError("subset label out of range", "subset");
  const Label top = argmax_over(probs.values(), subset);
  const double p_a = probs[top];
  if (subset.size() == 1 || (subset.empty() && probs.size() == 1)) return {top, kInfinity, p_a, sigma, 0};
  double p_b = -1.0;
  auto consider = [&](Label l) {
    if (l != top) p_b = std::max(p_b, probs[l]);
  };
  if (subset.empty())
    for (Label l = 0; l < probs.size(); ++l) consider(l);
  else
    for (Label l : subset) consider(l);
  return {top, radius_two_sided(sigma, p_a, p_b), p_a, sigma, 0};
}

CertifiedPrediction leaf_certificate_renormalized(const ProbabilityVector& probs, const LabelSet& subset,
                                                  double sigma) {
  if (subset.empty()) throw ValidationError("leaf subset is empty", "subset");
  const Label top = argmax_over(probs.values());
  if (!std::binary_search(subset.begin(), subset.end(), top))
    throw RoutingMismatch("top label " + std::to_string(top) + " lies outside the leaf subset", "subset",
                          "count the sample as misrouted");
  return margin_certificate(probs, sigma, subset);
}

double hierarchy_certificate(const std::vector<double>& node_radii) {
  if (node_radii.empty()) throw ValidationError("no node radii on the path", "node_radii");
  for (double r : node_radii)
    if (!(r >= 0.0)) throw ValidationError("node radii must be nonnegative", "node_radii");
  return *std::min_element(node_radii.begin(), node_radii.end());
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return std::nan("");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace {

double binomial(int n, int k) {
  double r = 1.0;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// Advances `comb` to the next k-combination of {0..m-1} in lexicographic order.
bool next_combination(LabelSet& comb, int m) {
  const int k = static_cast<int>(comb.size());
  int i = k - 1;
  while (i >= 0 && comb[static_cast<std::size_t>(i)] == m - k + i) --i;
  if (i < 0) return false;
  ++comb[static_cast<std::size_t>(i)];
  for (int j = i + 1; j < k; ++j) comb[static_cast<std::size_t>(j)] = comb[static_cast<std::size_t>(j - 1)] + 1;
  return true;
}

LabelSet random_subset(int m, int size, Rng& rng) {
  std::vector<Label> pool(static_cast<std::size_t>(m));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < size; ++i) {
    const auto j = static_cast<std::size_t>(i) + rng.below(static_cast<std::uint64_t>(m - i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<std::size_t>(size));
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

std::vector<SweepStats> subset_radius_sweep(const std::vector<ProbabilityVector>& probs, double sigma,
                                            const std::vector<int>& sizes, const SweepOptions& options) {
  if (!(sigma > 0.0)) throw ValidationError("sigma must be positive", "sigma");
  if (probs.empty()) throw ValidationError("probability dataset is empty", "probabilities");
  const int m = static_cast<int>(probs.front().size());
  for (const auto& p : probs)
    if (p.size() != m) throw ValidationError("probability vectors differ in length", "probabilities");
  if (options.mode == SweepMode::kSampled && options.subsets_per_size < 1)
    throw ValidationError("subsets_per_size must be at least 1", "subsets_per_size");

  std::vector<Label> top(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) top[i] = argmax_over(probs[i].values());

  std::vector<SweepStats> out;
  for (int s : sizes) {
    if (s < 1 || s > m)
      throw ValidationError("subset size " + std::to_string(s) + " outside [1, " + std::to_string(m) + "]", "sizes");
    std::vector<LabelSet> subsets;
    if (options.mode == SweepMode::kAllSubsets) {
      if (binomial(m, s) * static_cast<double>(probs.size()) > options.max_evaluations)
        throw ValidationError("enumerating all size-" + std::to_string(s) + " subsets exceeds the evaluation budget",
                              "mode", "use sampled mode with subsets_per_size");
      LabelSet comb(static_cast<std::size_t>(s));
      std::iota(comb.begin(), comb.end(), 0);
      do subsets.push_back(comb);
      while (next_combination(comb, m));
    } else {
      Rng rng = Rng::stream(options.seed, static_cast<std::uint64_t>(s));
      for (int i = 0; i < options.subsets_per_size; ++i) subsets.push_back(random_subset(m, s, rng));
    }

    SweepStats stats;
    stats.size = s;
    stats.subsets = static_cast<long long>(subsets.size());
    std::vector<double> finite;
    for (const auto& subset : subsets)
      for (std::size_t i = 0; i < probs.size(); ++i) {
        if (!std::binary_search(subset.begin(), subset.end(), top[i])) continue;
        ++stats.evaluations;
        const double r = *margin_certificate(probs[i], sigma, subset).radius;
        if (std::isinf(r))
          ++stats.infinite_count;
        else
          finite.push_back(r);
      }
    if (!finite.empty()) {
      double sum = 0.0;
      for (double r : finite) sum += r;
      stats.mean = sum / static_cast<double>(finite.size());
      double ss = 0.0;
      for (double r : finite) ss += (r - stats.mean) * (r - stats.mean);
      stats.stddev = std::sqrt(ss / static_cast<double>(finite.size()));
      std::sort(finite.begin(), finite.end());
      stats.q1 = quantile_sorted(finite, 0.25);
      stats.median = quantile_sorted(finite, 0.5);
      stats.q3 = quantile_sorted(finite, 0.75);
    } else {
      stats.mean = stats.stddev = stats.q1 = stats.median = stats.q3 = std::nan("");
    }
    out.push_back(stats);
  }
  return out;
}

void AttackScenario::validate(const Hierarchy& h) const {
  params.validate();
  if (mode == AttackMode::kBudgeted) {
    if (!budget_target) throw ValidationError("budgeted attack needs a target node", "budget_target");
    if (*budget_target >= h.size())
      throw ValidationError("budget target " + std::to_string(*budget_target) + " is not a node", "budget_target");
  }
}

namespace {

// PGD against node v toward its correct output for true label y. Singleton
// leaves have nothing to attack and return x.
Eigen::VectorXd attack_node(const Hierarchy& h, NodeId v, const Eigen::VectorXd& x, Label y, const PgdParams& params,
                            std::uint64_t seed) {
  const auto& n = h.node(v);
  if (n.is_leaf() && n.labels.size() == 1) return x;
  const auto* model = std::get_if<Model>(&n.classifier);
  if (!model)
    throw CapabilityError(node_name(v) + " is on an attack path but is not a differentiable built-in model",
                          "hierarchy", "attacks need linear_softmax or mlp classifiers");
  if (!n.is_leaf()) return pgd_attack(*model, x, static_cast<Label>(h.branch_of(v, y)), params, seed);
  if (n.strategy == LeafStrategy::kRetrain) {
    const auto local = std::lower_bound(n.labels.begin(), n.labels.end(), y) - n.labels.begin();
    return pgd_attack(*model, x, static_cast<Label>(local), params, seed);
  }
  const bool full = static_cast<int>(n.labels.size()) == h.label_space().size();
  return pgd_attack(*model, x, y, params, seed, full ? LabelSet{} : n.labels);
}

std::uint64_t attack_seed(std::uint64_t seed, Eigen::Index sample, NodeId node, std::size_t nodes) {
  return substream_seed(seed, static_cast<std::uint64_t>(sample) * nodes + node);
}

double fraction(const std::vector<char>& ok) {
  if (ok.empty()) return 0.0;
  return static_cast<double>(std::count(ok.begin(), ok.end(), 1)) / static_cast<double>(ok.size());
}

}  // namespace

AdversarialReport evaluate_adversarial(const Hierarchy& h, const Dataset& data, const AttackScenario& scenario,
                                       std::uint64_t seed, unsigned threads) {
  scenario.validate(h);
  data.validate(h.label_space().size());
  const auto n = static_cast<std::size_t>(data.size());
  std::vector<char> natural(n, 0);
  std::vector<char> attacked(n, 0);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto row = static_cast<Eigen::Index>(i);
    const Eigen::VectorXd x = data.row(row);
    const Label y = data.labels[i];
    const std::string id = data.id(row);
    if (infer(h, x, id) != y) return;
    natural[i] = 1;
    if (scenario.mode == AttackMode::kBudgeted) {
      const NodeId target = *scenario.budget_target;
      const auto path = h.path_to(y);
      if (std::find(path.begin(), path.end(), target) == path.end()) {
        attacked[i] = 1;
        return;
      }
      const Eigen::VectorXd adv = attack_node(h, target, x, y, scenario.params, attack_seed(seed, row, target, h.size()));
      attacked[i] = infer_with_override(h, x, target, adv, id) == y;
      return;
    }
    for (NodeId v : h.path_to(y)) {
      const Eigen::VectorXd adv = attack_node(h, v, x, y, scenario.params, attack_seed(seed, row, v, h.size()));
      if (infer(h, adv, id) != y) return;
    }
    attacked[i] = 1;
  });
  AdversarialReport report;
  report.total = static_cast<long long>(n);
  report.natural_acc = fraction(natural);
  if (scenario.mode == AttackMode::kBudgeted) {
    report.budget_acc = fraction(attacked);
    report.budget_node = scenario.budget_target;
  } else {
    report.adv_acc = fraction(attacked);
  }
  return report;
}

AdversarialReport evaluate_budgeted_worst(const Hierarchy& h, const Dataset& data, const PgdParams& params,
                                          std::uint64_t seed, unsigned threads) {
  std::optional<AdversarialReport> worst;
  for (NodeId v = 0; v < h.size(); ++v) {
    const auto& node = h.node(v);
    if (node.is_leaf() && node.labels.size() == 1) continue;
    AttackScenario scenario{AttackMode::kBudgeted, v, params};
    AdversarialReport r = evaluate_adversarial(h, data, scenario, seed, threads);
    if (!worst || *r.budget_acc < *worst->budget_acc) worst = r;
  }
  if (!worst) {
    AttackScenario none{AttackMode::kWorstCase, std::nullopt, params};
    AdversarialReport r = evaluate_adversarial(h, data, none, seed, threads);
    r.budget_acc = r.natural_acc;
    r.adv_acc.reset();
    return r;
  }
  return *worst;
}

std::optional<Model> retrain_leaf(const Dataset& data, const LabelSet& subset, const ModelSpec& spec,
                                  const TrainOptions& options) {
  if (subset.empty()) throw ValidationError("leaf subset is empty", "subset");
  if (subset.size() == 1) return std::nullopt;
  const Dataset local = restrict_to(data, subset, /*reindex=*/true);
  std::vector<Label> seen = local.labels;
  std::sort(seen.begin(), seen.end());
  seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
  if (seen.size() < 2)
    throw ValidationError("training rows for the leaf cover fewer than 2 of its labels", "subset",
                          "use a singleton leaf or supply more data");
  return train(spec, local, static_cast<int>(subset.size()), options).model;
}

}  // namespace invcert
