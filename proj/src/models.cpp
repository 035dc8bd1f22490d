#include "invcert/models.hpp"

#include <algorithm>
#include <cmath>

#include "invcert/rng.hpp"

namespace invcert {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

Eigen::VectorXd one_hot_residual(const Eigen::VectorXd& z, Label y, const LabelSet& subset, double* loss) {
  Eigen::VectorXd dz = Eigen::VectorXd::Zero(z.size());
  if (subset.empty()) {
    if (y < 0 || y >= z.size()) throw ValidationError("target label out of range", "y");
    const Eigen::VectorXd p = softmax(z);
    dz = p;
    dz(y) -= 1.0;
    *loss = log_sum_exp(z) - z(y);
    return dz;
  }
  Eigen::VectorXd zs(static_cast<Eigen::Index>(subset.size()));
  Eigen::Index target = -1;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const Label l = subset[i];
    if (l < 0 || l >= z.size()) throw ValidationError("subset label out of range", "subset");
    zs(static_cast<Eigen::Index>(i)) = z(l);
    if (l == y) target = static_cast<Eigen::Index>(i);
  }
  if (target < 0) throw ValidationError("target label is not in the subset", "y");
  const Eigen::VectorXd ps = softmax(zs);
  for (std::size_t i = 0; i < subset.size(); ++i) dz(subset[i]) = ps(static_cast<Eigen::Index>(i));
  dz(y) -= 1.0;
  *loss = log_sum_exp(zs) - zs(target);
  return dz;
}

void check_input(const Model& model, const Eigen::VectorXd& x) {
  if (x.size() != input_dim(model))
    throw ValidationError("input has dimension " + std::to_string(x.size()) + ", model expects " +
                              std::to_string(input_dim(model)),
                          "x");
}

}  // namespace

int num_classes(const Model& model) {
  return std::visit([](const auto& m) { return m.num_classes(); }, model);
}

int input_dim(const Model& model) {
  return std::visit([](const auto& m) { return m.input_dim(); }, model);
}

Eigen::VectorXd logits(const Model& model, const Eigen::VectorXd& x) {
  check_input(model, x);
  return std::visit([&](const auto& m) { return m.logits(x); }, model);
}

ProbabilityVector predict_proba(const Model& model, const Eigen::VectorXd& x) {
  return ProbabilityVector(softmax(logits(model, x)));
}

Label predict(const Model& model, const Eigen::VectorXd& x, const LabelSet& subset) {
  return argmax_over(logits(model, x), subset);
}

void validate(const Model& model) {
  std::visit(Overloaded{
                 [](const LinearSoftmax& m) {
                   if (m.W.rows() < 1 || m.W.cols() < 1) throw ValidationError("empty weight matrix", "W");
                   if (m.b.size() != m.W.rows()) throw ValidationError("bias length must equal W rows", "b");
                   if (!m.W.allFinite() || !m.b.allFinite()) throw ValidationError("non-finite parameters", "W");
                 },
                 [](const SmallMlp& m) {
                   if (m.W1.rows() < 1 || m.W1.cols() < 1) throw ValidationError("hidden width must be >= 1", "W1");
                   if (m.b1.size() != m.W1.rows()) throw ValidationError("b1 length must equal W1 rows", "b1");
                   if (m.W2.cols() != m.W1.rows()) throw ValidationError("W2 columns must equal hidden width", "W2");
                   if (m.W2.rows() < 1) throw ValidationError("W2 has no rows", "W2");
                   if (m.b2.size() != m.W2.rows()) throw ValidationError("b2 length must equal W2 rows", "b2");
                   if (!m.W1.allFinite() || !m.b1.allFinite() || !m.W2.allFinite() || !m.b2.allFinite())
                     throw ValidationError("non-finite parameters", "W1");
                 },
             },
             model);
}

Backward backward(const Model& model, const Eigen::VectorXd& x, const Eigen::VectorXd& dlogits) {
  check_input(model, x);
  return std::visit(Overloaded{
                        [&](const LinearSoftmax& m) -> Backward {
                          LinearSoftmax g{dlogits * x.transpose(), dlogits};
                          return {m.W.transpose() * dlogits, std::move(g)};
                        },
                        [&](const SmallMlp& m) -> Backward {
                          const Eigen::VectorXd pre = m.pre_activation(x);
                          const Eigen::VectorXd hidden = pre.cwiseMax(0.0);
                          const Eigen::VectorXd dpre =
                              ((m.W2.transpose() * dlogits).array() * (pre.array() > 0.0).cast<double>()).matrix();
                          SmallMlp g{dpre * x.transpose(), dpre, dlogits * hidden.transpose(), dlogits};
                          return {m.W1.transpose() * dpre, std::move(g)};
                        },
                    },
                    model);
}

double cross_entropy(const Model& model, const Eigen::VectorXd& x, Label y, const LabelSet& subset) {
  double loss = 0.0;
  one_hot_residual(logits(model, x), y, subset, &loss);
  return loss;
}

LossGradient cross_entropy_gradient(const Model& model, const Eigen::VectorXd& x, Label y, const LabelSet& subset) {
  double loss = 0.0;
  const Eigen::VectorXd dz = one_hot_residual(logits(model, x), y, subset, &loss);
  Backward b = backward(model, x, dz);
  return {loss, std::move(b.input), std::move(b.params)};
}

namespace {

void append(std::vector<double>& out, const Eigen::MatrixXd& m) {
  out.insert(out.end(), m.data(), m.data() + m.size());
}

void read(const Eigen::VectorXd& flat, Eigen::Index& pos, Eigen::MatrixXd& m) {
  if (pos + m.size() > flat.size()) throw ValidationError("flat parameter vector too short", "params");
  m = Eigen::Map<const Eigen::MatrixXd>(flat.data() + pos, m.rows(), m.cols());
  pos += m.size();
}

void read(const Eigen::VectorXd& flat, Eigen::Index& pos, Eigen::VectorXd& v) {
  if (pos + v.size() > flat.size()) throw ValidationError("flat parameter vector too short", "params");
  v = flat.segment(pos, v.size());
  pos += v.size();
}

}  // namespace

Eigen::VectorXd flatten(const Model& model) {
  std::vector<double> out;
  std::visit(Overloaded{
                 [&](const LinearSoftmax& m) {
                   append(out, m.W);
                   append(out, m.b);
                 },
                 [&](const SmallMlp& m) {
                   append(out, m.W1);
                   append(out, m.b1);
                   append(out, m.W2);
                   append(out, m.b2);
                 },
             },
             model);
  return Eigen::VectorXd::Map(out.data(), static_cast<Eigen::Index>(out.size()));
}

Model unflatten(const Model& shape, const Eigen::VectorXd& flat) {
  Model out = shape;
  Eigen::Index pos = 0;
  std::visit(Overloaded{
                 [&](LinearSoftmax& m) {
                   read(flat, pos, m.W);
                   read(flat, pos, m.b);
                 },
                 [&](SmallMlp& m) {
                   read(flat, pos, m.W1);
                   read(flat, pos, m.b1);
                   read(flat, pos, m.W2);
                   read(flat, pos, m.b2);
                 },
             },
             out);
  if (pos != flat.size()) throw ValidationError("flat parameter vector too long", "params");
  return out;
}

double gradient_check(const Model& model, const Eigen::VectorXd& x, Label y, double step) {
  const LossGradient analytic = cross_entropy_gradient(model, x, y);
  auto rel = [](double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-4}); };
  double worst = 0.0;

  Eigen::VectorXd probe = x;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    probe(j) = x(j) + step;
    const double up = cross_entropy(model, probe, y);
    probe(j) = x(j) - step;
    const double down = cross_entropy(model, probe, y);
    probe(j) = x(j);
    worst = std::max(worst, rel(analytic.input(j), (up - down) / (2.0 * step)));
  }

  const Eigen::VectorXd theta = flatten(model);
  const Eigen::VectorXd grad = flatten(analytic.params);
  Eigen::VectorXd shifted = theta;
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    shifted(j) = theta(j) + step;
    const double up = cross_entropy(unflatten(model, shifted), x, y);
    shifted(j) = theta(j) - step;
    const double down = cross_entropy(unflatten(model, shifted), x, y);
    shifted(j) = theta(j);
    worst = std::max(worst, rel(grad(j), (up - down) / (2.0 * step)));
  }
  return worst;
}

double min_abs_preactivation(const SmallMlp& mlp, const Eigen::VectorXd& x) {
  return mlp.pre_activation(x).cwiseAbs().minCoeff();
}

void PgdParams::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ValidationError("epsilon must be nonnegative", "epsilon");
  if (!(step > 0.0) || !std::isfinite(step)) throw ValidationError("step must be positive", "step");
  if (iters < 0) throw ValidationError("iters must be nonnegative", "iters");
  if (restarts < 1) throw ValidationError("restarts must be at least 1", "restarts");
}

Eigen::VectorXd project_linf(const Eigen::VectorXd& x, Eigen::VectorXd candidate, double eps) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    double& c = candidate(i);
    c = std::clamp(c, x(i) - eps, x(i) + eps);
    while (std::abs(c - x(i)) > eps) c = std::nextafter(c, x(i));
  }
  return candidate;
}

Eigen::VectorXd pgd_attack(const Model& model, const Eigen::VectorXd& x, Label y, const PgdParams& params,
                           std::uint64_t seed, const LabelSet& subset) {
  params.validate();
  check_input(model, x);
  if (params.epsilon == 0.0) return x;
  Eigen::VectorXd best = x;
  double best_loss = cross_entropy(model, x, y, subset);
  for (int r = 0; r < params.restarts; ++r) {
    Eigen::VectorXd adv = x;
    if (r > 0) {
      Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(r));
      for (Eigen::Index i = 0; i < x.size(); ++i) adv(i) += rng.uniform(-params.epsilon, params.epsilon);
      adv = project_linf(x, std::move(adv), params.epsilon);
      const double loss = cross_entropy(model, adv, y, subset);
      if (loss > best_loss) {
        best_loss = loss;
        best = adv;
      }
    }
    for (int t = 0; t < params.iters; ++t) {
      const Eigen::VectorXd g = cross_entropy_gradient(model, adv, y, subset).input;
      adv = project_linf(x, adv + params.step * g.array().sign().matrix(), params.epsilon);
      const double loss = cross_entropy(model, adv, y, subset);
      if (loss > best_loss) {
        best_loss = loss;
        best = adv;
      }
    }
  }
  return best;
}

LookupClassifier::LookupClassifier(std::vector<std::string> ids, const Eigen::MatrixXd& logits)
    : num_classes_(static_cast<int>(logits.cols())) {
  if (static_cast<Eigen::Index>(ids.size()) != logits.rows())
    throw ValidationError("lookup ids do not match logit rows", "logits");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Eigen::VectorXd row = logits.row(static_cast<Eigen::Index>(i)).transpose();
    if (!row.allFinite()) throw ValidationError("non-finite logits for sample " + ids[i], "logits");
    if (!table_.emplace(ids[i], row).second) throw ValidationError("duplicate sample id " + ids[i], "sample_id");
  }
}

const Eigen::VectorXd& LookupClassifier::logits(const std::string& id) const {
  auto it = table_.find(id);
  if (it == table_.end())
    throw ValidationError("sample id '" + id + "' missing from lookup table", "sample_id",
                          "regenerate the logits file for this dataset");
  return it->second;
}

ProbabilityVector LookupClassifier::predict_proba(const std::string& id) const {
  return ProbabilityVector(softmax(logits(id)));
}

Model init_model(const ModelSpec& spec, int input_dim, int num_classes, std::uint64_t seed) {
  if (input_dim < 1 || num_classes < 1) throw ValidationError("model dimensions must be positive", "model");
  Rng rng(mix64(seed));
  auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double scale) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
    return m;
  };
  if (spec.kind == ModelKind::kLinear)
    return LinearSoftmax{gaussian(num_classes, input_dim, 0.01), Eigen::VectorXd::Zero(num_classes)};
  if (spec.hidden < 1) throw ValidationError("hidden width must be >= 1", "hidden");
  SmallMlp m;
  m.W1 = gaussian(spec.hidden, input_dim, std::sqrt(2.0 / input_dim));
  m.b1 = Eigen::VectorXd::Constant(spec.hidden, 0.01);
  m.W2 = gaussian(num_classes, spec.hidden, std::sqrt(1.0 / spec.hidden));
  m.b2 = Eigen::VectorXd::Zero(num_classes);
  return m;
}

double mean_cross_entropy(const Model& model, const Dataset& data) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < data.size(); ++i)
    total += cross_entropy(model, data.row(i), data.labels[static_cast<std::size_t>(i)]);
  return total / static_cast<double>(data.size());
}

double accuracy(const Model& model, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < data.size(); ++i)
    correct += predict(model, data.row(i)) == data.labels[static_cast<std::size_t>(i)];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train(Model initial, const Dataset& data, const TrainOptions& options) {
  validate(initial);
  const int m = num_classes(initial);
  if (data.size() == 0) throw ValidationError("training set is empty", "dataset");
  if (data.dim() != input_dim(initial)) throw ValidationError("training features do not match model input", "dataset");
  data.validate(m);
  if (options.epochs < 0) throw ValidationError("epochs must be nonnegative", "epochs");
  if (!(options.learning_rate >= 0.0)) throw ValidationError("learning_rate must be nonnegative", "learning_rate");
  if (options.noise_sigma && !(*options.noise_sigma > 0.0))
    throw ValidationError("noise_sigma must be positive", "noise_sigma");
  if (options.adversarial) options.adversarial->validate();

  TrainResult result{std::move(initial), {}};
  Eigen::VectorXd theta = flatten(result.model);
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    Rng noise = Rng::stream(options.seed, static_cast<std::uint64_t>(epoch));
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta.size());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < data.size(); ++i) {
      Eigen::VectorXd x = data.row(i);
      const Label y = data.labels[static_cast<std::size_t>(i)];
      if (options.noise_sigma)
        for (Eigen::Index j = 0; j < x.size(); ++j) x(j) += *options.noise_sigma * noise.normal();
      if (options.adversarial)
        x = pgd_attack(result.model, x, y, *options.adversarial,
                       substream_seed(options.seed, static_cast<std::uint64_t>(epoch) * 1000003ULL + i));
      LossGradient g = cross_entropy_gradient(result.model, x, y);
      loss += g.loss;
      grad += flatten(g.params);
    }
    loss *= inv_n;
    if (!std::isfinite(loss) || !grad.allFinite())
      throw TrainingError("training diverged at epoch " + std::to_string(epoch) + " (loss " + std::to_string(loss) +
                              ", learning rate " + std::to_string(options.learning_rate) + ")",
                          "learning_rate", "lower the learning rate");
    result.loss_history.push_back(loss);
    theta -= options.learning_rate * inv_n * grad;
    result.model = unflatten(result.model, theta);
  }
  if (!theta.allFinite())
    throw TrainingError("parameters became non-finite", "learning_rate", "lower the learning rate");
  return result;
}

TrainResult train(const ModelSpec& spec, const Dataset& data, int num_classes, const TrainOptions& options) {
  return train(init_model(spec, static_cast<int>(data.dim()), num_classes, options.seed), data, options);
}

LinearSoftmax constant_model(int input_dim, int num_classes, Label label, double margin) {
  if (label < 0 || label >= num_classes) throw ValidationError("constant label out of range", "label");
  LinearSoftmax m{Eigen::MatrixXd::Zero(num_classes, input_dim), Eigen::VectorXd::Zero(num_classes)};
  m.b(label) = margin;
  return m;
}

}  // namespace invcert
