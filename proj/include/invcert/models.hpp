#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "invcert/core.hpp"
#include "invcert/datasets.hpp"
#include "invcert/smoothing.hpp"

namespace invcert {

// Numerically stable softmax of a logit vector.
template <class Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

// log(sum(exp(z))), shifted by the max.
template <class Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& z) {
  const auto top = z.maxCoeff();
  return top + std::log((z.array() - top).exp().sum());
}

// z -> W z + b.
struct LinearSoftmax {
  Eigen::MatrixXd W;  // m x d
  Eigen::VectorXd b;  // m

  int num_classes() const noexcept { return static_cast<int>(W.rows()); }
  int input_dim() const noexcept { return static_cast<int>(W.cols()); }
  Eigen::VectorXd logits(const Eigen::VectorXd& x) const { return W * x + b; }
};

// z -> W2 relu(W1 x + b1) + b2.
struct SmallMlp {
  Eigen::MatrixXd W1;  // h x d
  Eigen::VectorXd b1;  // h
  Eigen::MatrixXd W2;  // m x h
  Eigen::VectorXd b2;  // m

  int num_classes() const noexcept { return static_cast<int>(W2.rows()); }
  int input_dim() const noexcept { return static_cast<int>(W1.cols()); }
  int hidden() const noexcept { return static_cast<int>(W1.rows()); }
  Eigen::VectorXd pre_activation(const Eigen::VectorXd& x) const { return W1 * x + b1; }
  Eigen::VectorXd logits(const Eigen::VectorXd& x) const {
    return W2 * pre_activation(x).cwiseMax(0.0) + b2;
  }
};

// Differentiable built-in model. Gradients with respect to parameters are
// returned as a Model of the same alternative and shape.
using Model = std::variant<LinearSoftmax, SmallMlp>;

int num_classes(const Model& model);
int input_dim(const Model& model);
Eigen::VectorXd logits(const Model& model, const Eigen::VectorXd& x);
ProbabilityVector predict_proba(const Model& model, const Eigen::VectorXd& x);
// Argmax of the logits over `subset` (all labels when empty).
Label predict(const Model& model, const Eigen::VectorXd& x, const LabelSet& subset = {});

void validate(const Model& model);

// Pulls dL/dlogits back through the model.
struct Backward {
  Eigen::VectorXd input;
  Model params;
};
Backward backward(const Model& model, const Eigen::VectorXd& x, const Eigen::VectorXd& dlogits);

// Cross-entropy of label `y` under the softmax restricted to `subset` (all
// labels when empty); y must belong to the subset.
struct LossGradient {
  double loss = 0.0;
  Eigen::VectorXd input;
  Model params;
};
double cross_entropy(const Model& model, const Eigen::VectorXd& x, Label y, const LabelSet& subset = {});
LossGradient cross_entropy_gradient(const Model& model, const Eigen::VectorXd& x, Label y,
                                    const LabelSet& subset = {});

Eigen::VectorXd flatten(const Model& model);
// Same architecture as `shape`, parameters read from `flat`.
Model unflatten(const Model& shape, const Eigen::VectorXd& flat);

// Max over input and parameter entries of |analytic - numeric| / max(|analytic|,
// |numeric|, 1e-4), with central differences of step `step`.
double gradient_check(const Model& model, const Eigen::VectorXd& x, Label y, double step = 1e-5);

// Smallest |pre-activation| of the hidden layer; kink distance for gradient checks.
double min_abs_preactivation(const SmallMlp& mlp, const Eigen::VectorXd& x);

struct PgdParams {
  double epsilon = 8.0 / 255.0;
  double step = 2.0 / 255.0;
  int iters = 20;
  int restarts = 1;

  void validate() const;
};

// Moves `candidate` into the closed l-inf ball of radius eps around x so that
// |candidate_i - x_i| <= eps holds in floating point.
Eigen::VectorXd project_linf(const Eigen::VectorXd& x, Eigen::VectorXd candidate, double eps);

// l-inf PGD ascent on cross_entropy(model, ., y, subset). The first restart
// starts at x, later ones uniformly in the ball; the highest-loss iterate over
// all restarts is returned.
Eigen::VectorXd pgd_attack(const Model& model, const Eigen::VectorXd& x, Label y, const PgdParams& params,
                           std::uint64_t seed, const LabelSet& subset = {});

// Precomputed logits keyed by sample id.
class LookupClassifier {
 public:
  LookupClassifier() = default;
  LookupClassifier(std::vector<std::string> ids, const Eigen::MatrixXd& logits);

  int num_classes() const noexcept { return num_classes_; }
  bool contains(const std::string& id) const { return table_.contains(id); }
  const Eigen::VectorXd& logits(const std::string& id) const;
  ProbabilityVector predict_proba(const std::string& id) const;
  std::size_t size() const noexcept { return table_.size(); }

 private:
  std::map<std::string, Eigen::VectorXd> table_;
  int num_classes_ = 0;
};

enum class ModelKind { kLinear, kMlp };

struct ModelSpec {
  ModelKind kind = ModelKind::kLinear;
  int hidden = 16;
};

// Random initialization: linear weights N(0, 0.01^2), MLP layers He-scaled.
Model init_model(const ModelSpec& spec, int input_dim, int num_classes, std::uint64_t seed);

struct TrainOptions {
  int epochs = 500;
  double learning_rate = 0.1;
  std::optional<double> noise_sigma;     // fresh Gaussian input noise per epoch
  std::optional<PgdParams> adversarial;  // train on PGD examples of the current model
  std::uint64_t seed = 0;
};

struct TrainResult {
  Model model;
  std::vector<double> loss_history;  // mean loss at the start of each epoch
};

// Full-batch gradient descent on mean cross-entropy, starting from `initial`.
TrainResult train(Model initial, const Dataset& data, const TrainOptions& options);
TrainResult train(const ModelSpec& spec, const Dataset& data, int num_classes, const TrainOptions& options);

double accuracy(const Model& model, const Dataset& data);
double mean_cross_entropy(const Model& model, const Dataset& data);

// Hard-decision adapter for smoothing.
class ModelClassifier final : public BaseClassifier {
 public:
  explicit ModelClassifier(Model model) : model_(std::move(model)) {}
  int num_classes() const override { return invcert::num_classes(model_); }
  Label predict(const Eigen::VectorXd& x) const override { return invcert::predict(model_, x); }
  const Model& model() const noexcept { return model_; }

 private:
  Model model_;
};

// A model that always predicts `label`: zero weights and a one-hot bias.
LinearSoftmax constant_model(int input_dim, int num_classes, Label label, double margin = 10.0);

}  // namespace invcert
