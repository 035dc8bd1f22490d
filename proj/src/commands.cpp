#include "invcert/commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>

#include "invcert/discovery.hpp"
#include "invcert/hierarchy.hpp"
#include "invcert/parallel.hpp"
#include "invcert/rng.hpp"
#include "invcert/smoothing.hpp"
#include "invcert/theory.hpp"

namespace invcert::cli {

using io::ConfigObject;
using io::format_double;
using io::json;

io::CsvTable ReportTable::to_csv() const {
  io::CsvTable t;
  t.header = columns;
  t.rows = rows;
  return t;
}

std::filesystem::path RunContext::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

void RunContext::write(const std::string& file, const ReportTable& table) { write(file, table.to_csv()); }

void RunContext::write(const std::string& file, io::CsvTable table) {
  table.metadata.insert(table.metadata.begin(), {{"config_hash", config_hash}, {"seed", std::to_string(seed)}});
  io::write_csv(out_dir / file, table);
  files.push_back(file);
}

void RunContext::write_json(const std::string& file, const json& doc) {
  io::write_json(out_dir / file, doc);
  files.push_back(file);
}

std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

ReportTable make_table(const std::string& name, std::vector<std::string> columns, const RunContext& ctx) {
  ReportTable t;
  t.name = name;
  t.columns = std::move(columns);
  t.seed = ctx.seed;
  t.config_hash = ctx.config_hash;
  return t;
}

std::string join_labels(const LabelSet& labels) {
  std::string out;
  for (std::size_t i = 0; i < labels.size(); ++i) out += (i ? " " : "") + std::to_string(labels[i]);
  return out;
}

std::string short_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

Model require_model(const NodeClassifier& c, const std::string& field) {
  if (const auto* m = std::get_if<Model>(&c)) return *m;
  throw CapabilityError("a built-in model is required here", field, "use linear_softmax, mlp, constant or model_file");
}

template <class T>
T positive(const ConfigObject& c, const std::string& key, T fallback) {
  const T v = c.get_or<T>(key, fallback);
  if (!(v > T{0})) throw ValidationError(c.field(key) + " must be positive", c.field(key));
  return v;
}

std::vector<double> radius_grid(const ConfigObject& c) {
  auto radii = c.get_or<std::vector<double>>("radii", {0.25, 0.5, 1.0, 1.5, 2.0});
  for (double r : radii)
    if (!(r >= 0.0)) throw ValidationError("radii must be nonnegative", c.field("radii"));
  return radii;
}

// Dataset rows from "dataset" (features) or "samples" (a logits table used
// only for its ids and labels).
Dataset load_samples(const ConfigObject& c, const RunContext& ctx) {
  const bool has_dataset = c.has("dataset"), has_samples = c.has("samples");
  if (has_dataset == has_samples)
    throw ValidationError("give exactly one of dataset or samples", c.field("dataset"),
                          "dataset holds features, samples a logits table keyed by sample id");
  if (has_dataset) return io::read_dataset_csv(ctx.resolve(c.get<std::string>("dataset")));
  const io::LogitsTable t = io::read_logits_csv(ctx.resolve(c.get<std::string>("samples")));
  if (t.labels.size() != t.ids.size())
    throw ValidationError("samples table needs a label column", c.field("samples"), "use sample_id,label,l0,..");
  return {Eigen::MatrixXd(static_cast<Eigen::Index>(t.ids.size()), 0), t.labels, t.ids};
}

io::HierarchyDocument load_hierarchy(const ConfigObject& c, const RunContext& ctx) {
  const json& spec = c.raw("hierarchy");
  if (spec.is_string()) {
    const auto path = ctx.resolve(spec.get<std::string>());
    return io::hierarchy_from_json(io::read_json(path), path.parent_path(), c.field("hierarchy"));
  }
  return io::hierarchy_from_json(spec, ctx.base_dir, c.field("hierarchy"));
}

struct AttackConfig {
  AttackMode mode = AttackMode::kWorstCase;
  bool budget_worst = false;
  std::optional<NodeId> budget_target;
  PgdParams params;
};

AttackConfig parse_attack(const ConfigObject& c) {
  AttackConfig a;
  const auto mode = c.get_or<std::string>("mode", "worst_case");
  if (mode == "worst_case")
    a.mode = AttackMode::kWorstCase;
  else if (mode == "budgeted")
    a.mode = AttackMode::kBudgeted;
  else
    throw ValidationError("mode must be worst_case or budgeted", c.field("mode"));
  if (c.has("budget_target")) {
    const json& t = c.raw("budget_target");
    if (t.is_string() && t.get<std::string>() == "worst")
      a.budget_worst = true;
    else if (t.is_number_unsigned())
      a.budget_target = t.get<NodeId>();
    else
      throw ValidationError("budget_target must be a node id or \"worst\"", c.field("budget_target"));
  }
  if (a.mode == AttackMode::kBudgeted && !a.budget_worst && !a.budget_target)
    throw ValidationError("budgeted attacks need budget_target", c.field("budget_target"),
                          "give a preorder node id or \"worst\"");
  a.params.epsilon = c.get_or<double>("epsilon", a.params.epsilon);
  a.params.step = c.get_or<double>("step", a.params.step);
  a.params.iters = c.get_or<int>("iters", a.params.iters);
  a.params.restarts = c.get_or<int>("restarts", a.params.restarts);
  try {
    a.params.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(e.what(), c.field(e.field()), e.hint());
  }
  return a;
}

ReportTable run_attack(const Hierarchy& h, const Dataset& data, const AttackConfig& a, RunContext& ctx) {
  if (data.dim() == 0) throw CapabilityError("attacks need feature rows", "dataset", "give a dataset CSV");
  AdversarialReport r;
  if (a.mode == AttackMode::kBudgeted && a.budget_worst) {
    r = evaluate_budgeted_worst(h, data, a.params, substream_seed(ctx.seed, 2), ctx.threads);
  } else {
    const AttackScenario s{a.mode, a.budget_target, a.params};
    s.validate(h);
    r = evaluate_adversarial(h, data, s, substream_seed(ctx.seed, 2), ctx.threads);
  }
  ReportTable t = make_table("attack", {"mode", "budget_node", "epsilon", "natural_acc", "adversarial_acc",
                                        "budget_acc", "total"},
                             ctx);
  t.rows.push_back({a.mode == AttackMode::kWorstCase ? "worst_case" : "budgeted",
                    r.budget_node ? std::to_string(*r.budget_node) : std::string{}, format_double(a.params.epsilon),
                    format_double(r.natural_acc), r.adv_acc ? format_double(*r.adv_acc) : std::string{},
                    r.budget_acc ? format_double(*r.budget_acc) : std::string{}, std::to_string(r.total)});
  return t;
}

}  // namespace

ReportTable cmd_certify(const json& config, RunContext& ctx) {
  const ConfigObject c(config, "");
  c.get_or<std::uint64_t>("seed", 0);
  const Model model = require_model(io::classifier_from_json(c.raw("classifier"), ctx.base_dir, "classifier"),
                                    "classifier");
  const auto sigmas = c.get_or<std::vector<double>>("sigmas", {0.25, 0.5, 1.0});
  SmoothingConfig base;
  base.n0 = c.get_or<long long>("n0", base.n0);
  base.n = c.get_or<long long>("n", base.n);
  base.alpha = c.get_or<double>("alpha", base.alpha);
  const auto mode_name = c.get_or<std::string>("mode", "one_sided");
  if (mode_name != "one_sided" && mode_name != "two_sided")
    throw ValidationError("mode must be one_sided or two_sided", "mode");
  const CertifyMode mode = mode_name == "one_sided" ? CertifyMode::kOneSided : CertifyMode::kTwoSided;
  const auto radii = radius_grid(c);
  const Dataset data = io::read_dataset_csv(ctx.resolve(c.get<std::string>("dataset")));
  c.finish();

  if (sigmas.empty()) throw ValidationError("sigmas is empty", "sigmas");
  data.validate(num_classes(model));
  if (data.dim() != input_dim(model))
    throw ValidationError("dataset has " + std::to_string(data.dim()) + " features, classifier expects " +
                              std::to_string(input_dim(model)),
                          "dataset");
  if (data.size() == 0) ctx.warnings.push_back("dataset is empty; no certificates produced");

  const ModelClassifier clf(model);
  ReportTable table = make_table(
      "certified_accuracy", {"sigma", "radius", "certified_accuracy", "abstain_rate", "clean_accuracy", "n_samples"},
      ctx);
  for (std::size_t s = 0; s < sigmas.size(); ++s) {
    SmoothingConfig cfg = base;
    cfg.sigma = sigmas[s];
    try {
      cfg.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(e.what(), e.field(), e.hint());
    }
    const std::uint64_t sigma_seed = substream_seed(ctx.seed, s);
    std::vector<io::CertificateRow> rows(static_cast<std::size_t>(data.size()));
    parallel_for(rows.size(), ctx.threads, [&](std::size_t i) {
      const auto idx = static_cast<Eigen::Index>(i);
      rows[i] = {data.id(idx), data.labels[i], certify(clf, data.row(idx), cfg, substream_seed(sigma_seed, i), mode)};
    });
    ctx.write("certificates_sigma_" + short_double(cfg.sigma) + ".csv", io::certificates_table(rows));
    if (rows.empty()) continue;
    const double n = static_cast<double>(rows.size());
    long long abstained = 0, correct = 0;
    for (const auto& r : rows) {
      abstained += r.prediction.abstained();
      correct += !r.prediction.abstained() && *r.prediction.label == r.label;
    }
    for (double radius : radii) {
      long long certified = 0;
      for (const auto& r : rows)
        certified += !r.prediction.abstained() && *r.prediction.label == r.label && *r.prediction.radius >= radius;
      table.rows.push_back({format_double(cfg.sigma), format_double(radius), format_double(certified / n),
                            format_double(abstained / n), format_double(correct / n), std::to_string(rows.size())});
    }
  }
  ctx.write("certified_accuracy.csv", table);
  return table;
}

namespace {

struct SampleOutcome {
  CertifiedPrediction baseline, leaf, end_to_end;
};

struct GroupStats {
  std::vector<double> values;  // 0 for wrong predictions

  double mean() const {
    if (values.empty()) return std::nan("");
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  }
  double stddev() const {
    const double m = mean();
    if (values.empty() || std::isinf(m)) return std::nan("");
    double ss = 0.0;
    for (double v : values) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(values.size()));
  }
  long long infinite() const {
    return std::count_if(values.begin(), values.end(), [](double v) { return std::isinf(v); });
  }
  double at_least(double r) const {
    if (values.empty()) return std::nan("");
    return static_cast<double>(std::count_if(values.begin(), values.end(), [&](double v) { return v >= r && v > 0; })) /
           static_cast<double>(values.size());
  }
};

// Radius credited to a prediction: its certificate when correct, else 0.
double credited(const CertifiedPrediction& p, Label y) {
  if (p.abstained() || *p.label != y) return 0.0;
  return *p.radius;
}

}  // namespace

ReportTable cmd_hierarchy(const json& config, RunContext& ctx) {
  const ConfigObject c(config, "");
  c.get_or<std::uint64_t>("seed", 0);
  const io::HierarchyDocument doc = load_hierarchy(c, ctx);
  const Hierarchy& h = doc.hierarchy;
  const Dataset data = load_samples(c, ctx);
  const double sigma = positive<double>(c, "sigma", 0.25);
  const auto source = c.get_or<std::string>("probabilities", "logits");
  if (source != "logits" && source != "monte_carlo")
    throw ValidationError("probabilities must be logits or monte_carlo", "probabilities");
  const long long n_mc = positive<long long>(c, "n", 1000);
  const auto radii = radius_grid(c);
  std::optional<AttackConfig> attack;
  if (c.has("attack")) attack = parse_attack(c.object("attack"));
  c.finish();

  if (std::holds_alternative<std::monostate>(doc.baseline))
    throw ValidationError("the hierarchy document needs a baseline classifier", "hierarchy.baseline");
  const int m = h.label_space().size();
  data.validate(m);
  if (data.size() == 0) ctx.warnings.push_back("dataset is empty");
  const bool monte_carlo = source == "monte_carlo";

  std::vector<SampleOutcome> outcomes(static_cast<std::size_t>(data.size()));
  parallel_for(outcomes.size(), ctx.threads, [&](std::size_t i) {
    const auto idx = static_cast<Eigen::Index>(i);
    const Eigen::VectorXd x = data.row(idx);
    const std::string id = data.id(idx);
    // Every node sees the same noise draws, so identical classifiers agree.
    const std::uint64_t sample_seed = substream_seed(ctx.seed, i);
    auto probs = [&](const NodeClassifier& clf, const std::string& field) -> ProbabilityVector {
      if (!monte_carlo) return node_proba(clf, x, id);
      const ModelClassifier model(require_model(clf, field));
      return frequencies(sample_under_noise(model, x, sigma, n_mc, sample_seed));
    };
    auto leaf_cert = [&](NodeId leaf) {
      const HierarchyNode& node = h.node(leaf);
      if (node.labels.size() == 1) return CertifiedPrediction{node.labels.front(), kInfinity, 1.0, sigma, 0};
      const ProbabilityVector p = probs(node.classifier, "hierarchy.node" + std::to_string(leaf));
      if (node.strategy == LeafStrategy::kRenormalize) return margin_certificate(p, sigma, node.labels);
      CertifiedPrediction cert = margin_certificate(p, sigma);
      cert.label = node.labels.at(static_cast<std::size_t>(*cert.label));
      return cert;
    };

    SampleOutcome& out = outcomes[i];
    out.baseline = margin_certificate(probs(doc.baseline, "hierarchy.baseline"), sigma);
    const Label y = data.labels[i];
    out.leaf = leaf_cert(h.leaf_of(y));

    std::vector<double> radii_on_path;
    NodeId at = 0;
    while (!h.node(at).is_leaf()) {
      const HierarchyNode& node = h.node(at);
      const CertifiedPrediction step = margin_certificate(probs(node.classifier, "hierarchy.node" + std::to_string(at)), sigma);
      radii_on_path.push_back(*step.radius);
      at = node.children.at(static_cast<std::size_t>(*step.label));
    }
    CertifiedPrediction last = leaf_cert(at);
    radii_on_path.push_back(*last.radius);
    last.radius = hierarchy_certificate(radii_on_path);
    out.end_to_end = last;
  });

  const LabelPartition classes = h.leaf_partition();
  std::vector<std::string> columns{"class",          "labels",           "count",
                                   "baseline_cr_mean", "baseline_cr_std",  "hierarchy_cr_mean",
                                   "hierarchy_cr_std", "end_to_end_cr_mean", "end_to_end_cr_std",
                                   "baseline_inf",   "hierarchy_inf",    "end_to_end_inf"};
  for (double r : radii) {
    const std::string tag = short_double(r);
    columns.push_back("baseline_ca_" + tag);
    columns.push_back("hierarchy_ca_" + tag);
    columns.push_back("end_to_end_ca_" + tag);
  }
  ReportTable table = make_table("hierarchy", columns, ctx);

  auto emit = [&](const std::string& name, const LabelSet& labels, const std::vector<std::size_t>& members) {
    GroupStats base, leaf, e2e;
    for (std::size_t i : members) {
      const Label y = data.labels[i];
      base.values.push_back(credited(outcomes[i].baseline, y));
      leaf.values.push_back(credited(outcomes[i].leaf, y));
      e2e.values.push_back(credited(outcomes[i].end_to_end, y));
    }
    std::vector<std::string> row{name,
                                 join_labels(labels),
                                 std::to_string(members.size()),
                                 format_double(base.mean()),
                                 format_double(base.stddev()),
                                 format_double(leaf.mean()),
                                 format_double(leaf.stddev()),
                                 format_double(e2e.mean()),
                                 format_double(e2e.stddev()),
                                 std::to_string(base.infinite()),
                                 std::to_string(leaf.infinite()),
                                 std::to_string(e2e.infinite())};
    for (double r : radii) {
      row.push_back(format_double(base.at_least(r)));
      row.push_back(format_double(leaf.at_least(r)));
      row.push_back(format_double(e2e.at_least(r)));
    }
    table.rows.push_back(std::move(row));
  };
  std::vector<std::size_t> all(outcomes.size());
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::vector<std::size_t> members;
    for (std::size_t i : all)
      if (classes.class_of(data.labels[i]) == k) members.push_back(i);
    emit(std::to_string(k), classes[k], members);
  }
  LabelSet every(static_cast<std::size_t>(m));
  std::iota(every.begin(), every.end(), 0);
  emit("all", every, all);

  io::CsvTable samples;
  samples.header = {"sample_id",     "label",          "baseline_pred",   "baseline_radius",
                    "hierarchy_pred", "hierarchy_radius", "end_to_end_pred", "end_to_end_radius"};
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    samples.rows.push_back({data.id(static_cast<Eigen::Index>(i)), std::to_string(data.labels[i]),
                            std::to_string(*o.baseline.label), format_double(*o.baseline.radius),
                            std::to_string(*o.leaf.label), format_double(*o.leaf.radius),
                            std::to_string(*o.end_to_end.label), format_double(*o.end_to_end.radius)});
  }
  ctx.write("hierarchy_samples.csv", samples);
  ctx.write("hierarchy_report.csv", table);
  if (attack) ctx.write("adversarial.csv", run_attack(h, data, *attack, ctx));
  return table;
}

ReportTable cmd_discover(const json& config, RunContext& ctx) {
  const ConfigObject c(config, "");
  c.get_or<std::uint64_t>("seed", 0);
  const int m = c.get<int>("num_labels");
  const int k = c.get<int>("k");
  const int max_iter = positive<int>(c, "max_iter", 300);
  const double tol = c.get_or<double>("tol", 1e-8);
  const bool has_emb = c.has("embeddings"), has_cm = c.has("confusion");
  if (has_emb == has_cm)
    throw ValidationError("give exactly one of embeddings or confusion", "embeddings",
                          "embeddings: sample_id,label,e0.. CSV; confusion: m x m counts");
  const auto source = ctx.resolve(c.get<std::string>(has_emb ? "embeddings" : "confusion"));
  const auto layer_tag = c.get_or<std::string>("layer_tag", "");
  c.finish();
  if (m < 2) throw ValidationError("num_labels must be at least 2", "num_labels");
  if (k < 1 || k > m) throw ValidationError("k must lie in [1, num_labels]", "k");

  json summary{{"num_labels", m}, {"k", k}, {"source", has_emb ? "embeddings" : "confusion"}};
  std::optional<LabelPartition> partition;
  if (has_emb) {
    EmbeddingSet emb = io::read_embeddings_csv(source);
    emb.layer_tag = layer_tag;
    emb.validate(m);
    DiscoveryResult r = discover_partition(emb, k, m, ctx.seed, max_iter, tol);
    summary["iterations"] = r.clustering.iterations;
    summary["converged"] = r.clustering.converged;
    if (r.separation) {
      summary["silhouette"] = r.separation->silhouette;
      summary["separation_pass"] = r.separation->pass;
      if (!r.separation->pass)
        ctx.warnings.push_back("silhouette " + format_double(r.separation->silhouette) + " is below " +
                               short_double(kSilhouetteThreshold) + "; clusters are weakly separated");
    }
    io::CsvTable clusters;
    clusters.header = {"sample_id", "label", "cluster"};
    for (std::size_t i = 0; i < emb.labels.size(); ++i)
      clusters.rows.push_back({emb.ids.empty() ? std::to_string(i) : emb.ids[i], std::to_string(emb.labels[i]),
                               std::to_string(r.clustering.assignment[i])});
    ctx.write("clusters.csv", clusters);
    partition = std::move(r.partition);
  } else {
    const ConfusionMatrix cm = io::read_confusion_csv(source);
    if (cm.num_labels() != m)
      throw ValidationError("confusion matrix is " + std::to_string(cm.num_labels()) + " x " +
                                std::to_string(cm.num_labels()) + " but num_labels is " + std::to_string(m),
                            "confusion");
    partition = partition_from_confusion(cm, k);
  }
  summary["partition"] = io::partition_to_json(*partition);
  ctx.write_json("partition.json", io::partition_to_json(*partition));
  ctx.write_json("discovery.json", summary);

  ReportTable table = make_table("partition", {"class", "labels", "size"}, ctx);
  for (std::size_t i = 0; i < partition->size(); ++i)
    table.rows.push_back({std::to_string(i), join_labels((*partition)[i]), std::to_string((*partition)[i].size())});
  ctx.write("partition.csv", table);
  return table;
}

ReportTable cmd_sweep(const json& config, RunContext& ctx) {
  const ConfigObject c(config, "");
  c.get_or<std::uint64_t>("seed", 0);
  const double sigma = positive<double>(c, "sigma", 0.25);
  SweepOptions options;
  const auto mode = c.get_or<std::string>("mode", "sampled");
  if (mode == "sampled")
    options.mode = SweepMode::kSampled;
  else if (mode == "all")
    options.mode = SweepMode::kAllSubsets;
  else
    throw ValidationError("mode must be sampled or all", "mode");
  options.subsets_per_size = positive<int>(c, "subsets_per_size", options.subsets_per_size);
  options.max_evaluations = positive<double>(c, "max_evaluations", options.max_evaluations);
  options.seed = substream_seed(ctx.seed, 1);

  std::vector<ProbabilityVector> probs;
  const bool has_logits = c.has("logits"), has_synth = c.has("synthetic");
  if (has_logits == has_synth)
    throw ValidationError("give exactly one of logits or synthetic", "logits");
  if (has_logits) {
    const io::LogitsTable t = io::read_logits_csv(ctx.resolve(c.get<std::string>("logits")));
    for (Eigen::Index i = 0; i < t.logits.rows(); ++i)
      probs.emplace_back(softmax(Eigen::VectorXd(t.logits.row(i).transpose())));
  } else {
    const ConfigObject s = c.object("synthetic");
    const int n = positive<int>(s, "num_samples", 2000);
    const int m = s.get_or<int>("num_labels", 10);
    const double signal = s.get_or<double>("signal", 2.0);
    const double noise = s.get_or<double>("noise", 1.0);
    s.finish();
    if (m < 2) throw ValidationError("num_labels must be at least 2", "synthetic.num_labels");
    probs = synthetic_probabilities(n, m, substream_seed(ctx.seed, 0), signal, noise);
  }
  const int m = probs.empty() ? 0 : static_cast<int>(probs.front().size());
  std::vector<int> default_sizes(static_cast<std::size_t>(m));
  std::iota(default_sizes.begin(), default_sizes.end(), 1);
  const auto sizes = c.get_or<std::vector<int>>("sizes", default_sizes);
  c.finish();
  if (probs.empty()) ctx.warnings.push_back("no probability vectors; sweep is empty");

  ReportTable table = make_table(
      "sweep", {"size", "subsets", "evaluations", "infinite_count", "mean", "stddev", "q1", "median", "q3"}, ctx);
  if (!probs.empty())
    for (const SweepStats& s : subset_radius_sweep(probs, sigma, sizes, options))
      table.rows.push_back({std::to_string(s.size), std::to_string(s.subsets), std::to_string(s.evaluations),
                            std::to_string(s.infinite_count), format_double(s.mean), format_double(s.stddev),
                            format_double(s.q1), format_double(s.median), format_double(s.q3)});
  ctx.write("sweep.csv", table);
  return table;
}

ReportTable cmd_toy_gauss(const json& config, RunContext& ctx) {
  const ConfigObject c(config, "");
  c.get_or<std::uint64_t>("seed", 0);
  theory::GaussModelParams params;
  params.d = c.get_or<int>("d", params.d);
  params.p = c.get_or<double>("p", params.p);
  const auto etas = c.get_or<std::vector<double>>("etas", {0.05, 0.1, 0.3, 0.5, 1.0});
  const auto ks = c.get_or<std::vector<int>>("ks", {0, 1, 2, 5, 9, 10, 20, 36, 50, 100, 150, 200});
  const int n = positive<int>(c, "n_samples", 100000);
  c.finish();
  params.validate();
  for (int k : ks)
    if (k > params.d) ctx.warnings.push_back("k=" + std::to_string(k) + " exceeds d and is skipped");

  const auto rows = theory::gauss_experiment(etas, ks, params.d, params.p, n, ctx.seed);
  ReportTable table = make_table("toy_gauss",
                                 {"eta", "k", "natural_acc", "adversarial_acc", "n", "analytic_natural_acc", "gamma",
                                  "theorem1_bound", "bound_respected"},
                                 ctx);
  const bool bound_defined = params.p > 0.5 && params.p < 1.0;
  for (const auto& r : rows) {
    const double analytic = r.eta > 0.0 ? phi(std::sqrt(static_cast<double>(r.k == 0 ? params.d : r.k)) * r.eta)
                                         : 0.5;
    std::vector<std::string> row{format_double(r.eta),         std::to_string(r.k),
                                 format_double(r.natural_acc), format_double(r.adversarial_acc),
                                 std::to_string(r.n),          format_double(analytic)};
    const double gamma = 1.0 - r.natural_acc;
    row.push_back(format_double(gamma));
    if (r.k == 0 && bound_defined) {
      const double bound = theory::theorem1_bound(params.p, gamma);
      const double se = std::sqrt(std::max(r.adversarial_acc * (1.0 - r.adversarial_acc), 1e-12) / r.n);
      row.push_back(format_double(bound));
      row.push_back(r.adversarial_acc <= bound + 3.0 * se ? "1" : "0");
    } else {
      row.insert(row.end(), {"", ""});
    }
    table.rows.push_back(std::move(row));
  }
  ctx.write("toy_gauss.csv", table);
  return table;
}

ReportTable cmd_toy_prf(const json& config, RunContext& ctx) {
  const ConfigObject c(config, "");
  c.get_or<std::uint64_t>("seed", 0);
  theory::PrfModelParams params;
  params.n_bits = c.get_or<int>("n_bits", params.n_bits);
  params.key = c.get_or<std::uint64_t>("key", params.key);
  params.repetition = c.get_or<int>("repetition", params.repetition);
  const int flip_budget = c.get_or<int>("flip_budget", (params.repetition - 1) / 2);
  const int trials = positive<int>(c, "n_trials", 10000);
  c.finish();
  params.validate();

  ReportTable table = make_table(
      "toy_prf", {"invariant", "flip_budget", "stress_mode", "keyed_accuracy", "keyless_accuracy", "trials"}, ctx);
  for (int enforced = 0; enforced < 2; ++enforced) {
    const theory::PrfResult r =
        theory::prf_experiment(params, flip_budget, !enforced, trials, substream_seed(ctx.seed, enforced));
    table.rows.push_back({enforced ? "on" : "off", std::to_string(flip_budget), r.stress_mode ? "1" : "0",
                          format_double(r.keyed_accuracy), format_double(r.keyless_accuracy),
                          std::to_string(r.trials)});
  }
  if (flip_budget > (params.repetition - 1) / 2)
    ctx.warnings.push_back("flip_budget exceeds the correction capacity (stress mode)");
  ctx.write("toy_prf.csv", table);
  return table;
}

ReportTable cmd_attack(const json& config, RunContext& ctx) {
  const ConfigObject c(config, "");
  c.get_or<std::uint64_t>("seed", 0);
  const io::HierarchyDocument doc = load_hierarchy(c, ctx);
  const Dataset data = io::read_dataset_csv(ctx.resolve(c.get<std::string>("dataset")));
  const AttackConfig attack = parse_attack(c);
  c.finish();
  data.validate(doc.hierarchy.label_space().size());
  if (data.size() == 0) ctx.warnings.push_back("dataset is empty");
  ReportTable table = run_attack(doc.hierarchy, data, attack, ctx);
  ctx.write("attack.csv", table);
  return table;
}

namespace {

void print_table(std::ostream& out, const ReportTable& t) {
  out << "# " << t.name << '\n';
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
  out << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << '\n';
  }
}

void diagnostic(std::ostream& err, const char* kind, const std::string& field, const std::string& message,
                const std::string& hint) {
  err << "error[" << kind << "]: " << (field.empty() ? "-" : field) << ": " << message;
  if (!hint.empty()) err << " (hint: " << hint << ")";
  err << '\n';
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  using Command = ReportTable (*)(const json&, RunContext&);
  const std::vector<std::pair<std::string, Command>> commands{
      {"certify", cmd_certify},     {"hierarchy", cmd_hierarchy}, {"discover", cmd_discover}, {"sweep", cmd_sweep},
      {"toy-gauss", cmd_toy_gauss}, {"toy-prf", cmd_toy_prf},     {"attack", cmd_attack}};
  const std::map<std::string, std::string> descriptions{
      {"certify", "randomized-smoothing certificates and certified accuracy"},
      {"hierarchy", "baseline versus hierarchy certified radius and accuracy"},
      {"discover", "label partition from embeddings or a confusion matrix"},
      {"sweep", "mean radius by label-subset size"},
      {"toy-gauss", "Gaussian toy model: accuracy by protected features"},
      {"toy-prf", "keyed construction with and without the first-bit invariant"},
      {"attack", "worst-case or budgeted PGD attacks on a hierarchy"}};

  CLI::App app{"Certified robustness under label invariances", "invcert"};
  app.fallthrough();
  app.require_subcommand(1);
  std::string config_path, out_dir = ".";
  unsigned threads = 1;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "experiment config (JSON)")->required();
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--threads", threads, "worker threads, 0 for all cores");
  app.add_option("--seed", seed, "override the config seed");
  std::vector<CLI::App*> subs;
  for (const auto& [name, fn] : commands) subs.push_back(app.add_subcommand(name, descriptions.at(name)));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    diagnostic(err, "validation", "cli", e.what(), "run with --help for usage");
    return 1;
  }

  std::size_t chosen = 0;
  for (std::size_t i = 0; i < subs.size(); ++i)
    if (subs[i]->parsed()) chosen = i;
  const auto& [name, fn] = commands[chosen];

  try {
    const auto started = std::chrono::steady_clock::now();
    json config = io::read_json(config_path);
    if (!config.is_object()) throw ValidationError("config must be a JSON object", config_path);
    if (seed) config["seed"] = *seed;
    RunContext ctx;
    ctx.out_dir = out_dir;
    ctx.base_dir = std::filesystem::path(config_path).parent_path();
    if (ctx.base_dir.empty()) ctx.base_dir = ".";
    ctx.threads = resolve_threads(threads);
    if (config.contains("seed") && !config["seed"].is_number_unsigned())
      throw ValidationError("seed must be a nonnegative integer", "seed");
    ctx.seed = config.value<std::uint64_t>("seed", 0);
    ctx.config_hash = config_hash(config);
    std::filesystem::create_directories(ctx.out_dir);

    ReportTable table = fn(config, ctx);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    table.wall_time_seconds = wall;
    io::write_json(ctx.out_dir / "manifest.json", json{{"command", name},
                                                       {"config", config_path},
                                                       {"config_hash", ctx.config_hash},
                                                       {"seed", ctx.seed},
                                                       {"threads", ctx.threads},
                                                       {"wall_time_seconds", wall},
                                                       {"files", ctx.files},
                                                       {"warnings", ctx.warnings}});
    for (const auto& w : ctx.warnings) err << "warning: " << w << '\n';
    print_table(out, table);
    return 0;
  } catch (const ValidationError& e) {
    diagnostic(err, e.kind(), e.field(), e.what(), e.hint());
    return 1;
  } catch (const Error& e) {
    diagnostic(err, e.kind(), e.field(), e.what(), e.hint());
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    diagnostic(err, "io", e.path1().string(), e.what(), "check the output directory");
    return 2;
  } catch (const std::exception& e) {
    diagnostic(err, "runtime", "", e.what(), "");
    return 2;
  }
}

}  // namespace invcert::cli
