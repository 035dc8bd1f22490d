#include <doctest.h>

#include <cmath>

#include "invcert/datasets.hpp"
#include "invcert/models.hpp"
#include "invcert/rng.hpp"

using namespace invcert;

namespace {

Eigen::VectorXd random_vector(Rng& rng, Eigen::Index n, double scale = 1.0) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = scale * rng.normal();
  return v;
}

Model random_linear(Rng& rng, int d, int m) {
  LinearSoftmax l{Eigen::MatrixXd(m, d), random_vector(rng, m)};
  for (int i = 0; i < m; ++i) l.W.row(i) = random_vector(rng, d).transpose();
  return l;
}

Model random_mlp(Rng& rng, int d, int h, int m) {
  SmallMlp net{Eigen::MatrixXd(h, d), random_vector(rng, h), Eigen::MatrixXd(m, h), random_vector(rng, m)};
  for (int i = 0; i < h; ++i) net.W1.row(i) = random_vector(rng, d).transpose();
  for (int i = 0; i < m; ++i) net.W2.row(i) = random_vector(rng, h).transpose();
  return net;
}

// Input gradient by central differences, computed here rather than by the library.
Eigen::VectorXd numeric_input_gradient(const Model& model, const Eigen::VectorXd& x, Label y) {
  Eigen::VectorXd g(x.size());
  const double h = 1e-6;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Eigen::VectorXd up = x, down = x;
    up(j) += h;
    down(j) -= h;
    g(j) = (cross_entropy(model, up, y) - cross_entropy(model, down, y)) / (2 * h);
  }
  return g;
}

// Perceptron run to convergence; returning true certifies linear separability.
bool perceptron_separates(const Dataset& data) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(data.dim() + 1);
  for (int epoch = 0; epoch < 10000; ++epoch) {
    bool clean = true;
    for (Eigen::Index i = 0; i < data.size(); ++i) {
      Eigen::VectorXd xi(data.dim() + 1);
      xi << data.row(i), 1.0;
      const double s = data.labels[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
      if (s * w.dot(xi) <= 0) {
        w += s * xi;
        clean = false;
      }
    }
    if (clean) return true;
  }
  return false;
}

Dataset two_blobs(std::uint64_t seed) {
  Eigen::MatrixXd centers(2, 2);
  centers << -2, -1, 2, 1;
  return make_blobs(centers, 0.4, 40, seed);
}

}  // namespace

TEST_CASE("softmax and predict_proba") {
  const LinearSoftmax zero{Eigen::MatrixXd::Zero(4, 3), Eigen::VectorXd::Zero(4)};
  const ProbabilityVector p = predict_proba(zero, Eigen::VectorXd::Ones(3));
  for (int i = 0; i < 4; ++i) CHECK(p[i] == 0.25);

  Rng rng(2);
  const Eigen::VectorXd z = random_vector(rng, 6);
  const Eigen::VectorXd shifted = (z.array() + 37.5).matrix();
  const Eigen::VectorXd a = softmax(z), b = softmax(shifted);
  for (int i = 0; i < 6; ++i) CHECK(std::abs(a(i) - b(i)) < 1e-12);

  const Eigen::VectorXd big = softmax(Eigen::Vector2d(1000, 0));
  CHECK(big(0) == 1.0);
  CHECK(big(1) < 1e-300);
  CHECK(std::isfinite(log_sum_exp(Eigen::Vector2d(1000, 0))));
  CHECK(log_sum_exp(Eigen::Vector2d(1000, 0)) == doctest::Approx(1000.0));
  CHECK(softmax(Eigen::Vector2f(1.0f, 1.0f))(0) == 0.5f);
}

TEST_CASE("model validation") {
  LinearSoftmax bad{Eigen::MatrixXd::Zero(2, 2), Eigen::VectorXd::Zero(3)};
  CHECK_THROWS_AS(validate(Model{bad}), ValidationError);
  LinearSoftmax inf{Eigen::MatrixXd::Zero(2, 2), Eigen::VectorXd::Zero(2)};
  inf.W(0, 0) = std::nan("");
  CHECK_THROWS_AS(validate(Model{inf}), ValidationError);
  const SmallMlp empty{Eigen::MatrixXd(0, 2), Eigen::VectorXd(0), Eigen::MatrixXd(2, 0), Eigen::VectorXd::Zero(2)};
  CHECK_THROWS_AS(validate(Model{empty}), ValidationError);
  CHECK_THROWS_AS(logits(Model{constant_model(3, 2, 0)}, Eigen::VectorXd::Zero(2)), ValidationError);
}

TEST_CASE("analytic gradients match independent finite differences") {
  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    const Model lin = random_linear(rng, 5, 4);
    const Eigen::VectorXd x = random_vector(rng, 5);
    const Label y = static_cast<Label>(rng.below(4));
    const Eigen::VectorXd g = cross_entropy_gradient(lin, x, y).input;
    CHECK((g - numeric_input_gradient(lin, x, y)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("gradient check examples") {
  Rng rng(23);
  for (int t = 0; t < 10; ++t) {
    const Model lin = random_linear(rng, 6, 3);
    CHECK(gradient_check(lin, random_vector(rng, 6), static_cast<Label>(rng.below(3))) < 1e-5);
  }
  int checked = 0;
  while (checked < 10) {
    const Model net = random_mlp(rng, 4, 8, 3);
    const Eigen::VectorXd x = random_vector(rng, 4);
    if (min_abs_preactivation(std::get<SmallMlp>(net), x) < 1e-3) continue;
    CHECK(gradient_check(net, x, static_cast<Label>(rng.below(3))) < 1e-4);
    ++checked;
  }
  const LinearSoftmax zero{Eigen::MatrixXd::Zero(3, 2), Eigen::VectorXd::Zero(3)};
  const LossGradient g = cross_entropy_gradient(zero, Eigen::Vector2d(0.3, -1), 1);
  CHECK(g.input.cwiseAbs().maxCoeff() == 0.0);
  CHECK(gradient_check(zero, Eigen::Vector2d(0.3, -1), 1) < 1e-9);
}

TEST_CASE("subset cross entropy is the restricted softmax loss") {
  Rng rng(8);
  const Model lin = random_linear(rng, 3, 5);
  const Eigen::VectorXd x = random_vector(rng, 3);
  const LabelSet subset{1, 3, 4};
  const Eigen::VectorXd z = logits(lin, x);
  const double expected = -(z(3) - std::log(std::exp(z(1)) + std::exp(z(3)) + std::exp(z(4))));
  CHECK(cross_entropy(lin, x, 3, subset) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(predict(lin, x, subset) == argmax_over(z, subset));
  CHECK_THROWS_AS(cross_entropy(lin, x, 0, subset), ValidationError);
}

TEST_CASE("flatten and unflatten round trip") {
  Rng rng(4);
  const Model net = random_mlp(rng, 3, 5, 2);
  const Eigen::VectorXd theta = flatten(net);
  CHECK(theta.size() == 5 * 3 + 5 + 2 * 5 + 2);
  const Model back = unflatten(net, theta);
  CHECK(flatten(back) == theta);
  CHECK_THROWS_AS(unflatten(net, Eigen::VectorXd::Zero(3)), ValidationError);
}

TEST_CASE("training separable blobs") {
  const Dataset data = two_blobs(31);
  REQUIRE(perceptron_separates(data));
  TrainOptions opt;
  opt.epochs = 500;
  opt.learning_rate = 0.5;
  opt.seed = 1;
  const TrainResult r = train(ModelSpec{ModelKind::kLinear}, data, 2, opt);
  CHECK(accuracy(r.model, data) == 1.0);

  const TrainResult again = train(ModelSpec{ModelKind::kLinear}, data, 2, opt);
  CHECK(flatten(again.model) == flatten(r.model));
}

TEST_CASE("linear training loss does not increase at a small learning rate") {
  Eigen::MatrixXd centers(3, 2);
  centers << 0, 0, 1, 1, -1, 1;
  const Dataset data = make_blobs(centers, 0.8, 30, 5);
  TrainOptions opt;
  opt.epochs = 200;
  opt.learning_rate = 0.05;
  const TrainResult r = train(ModelSpec{ModelKind::kLinear}, data, 3, opt);
  for (std::size_t i = 1; i < r.loss_history.size(); ++i) CHECK(r.loss_history[i] <= r.loss_history[i - 1] + 1e-15);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const Dataset data = two_blobs(2);
  TrainOptions opt;
  opt.learning_rate = 0.0;
  opt.epochs = 10;
  const Model init = init_model(ModelSpec{ModelKind::kMlp, 4}, 2, 2, 9);
  CHECK(flatten(train(init, data, opt).model) == flatten(init));
}

TEST_CASE("xor capacity") {
  const Dataset data = make_xor();
  TrainOptions opt;
  opt.epochs = 3000;
  opt.learning_rate = 0.5;
  opt.seed = 3;
  CHECK(accuracy(train(ModelSpec{ModelKind::kLinear}, data, 2, opt).model, data) <= 0.75);
  CHECK(accuracy(train(ModelSpec{ModelKind::kMlp, 8}, data, 2, opt).model, data) == 1.0);
}

TEST_CASE("noise augmentation is deterministic given the seed") {
  const Dataset data = two_blobs(6);
  TrainOptions opt;
  opt.epochs = 30;
  opt.noise_sigma = 0.5;
  opt.seed = 44;
  const auto a = train(ModelSpec{ModelKind::kLinear}, data, 2, opt);
  const auto b = train(ModelSpec{ModelKind::kLinear}, data, 2, opt);
  CHECK(a.loss_history == b.loss_history);
  opt.seed = 45;
  CHECK(train(ModelSpec{ModelKind::kLinear}, data, 2, opt).loss_history != a.loss_history);
}

TEST_CASE("divergent training raises a training error") {
  const Dataset data = two_blobs(7);
  TrainOptions opt;
  opt.epochs = 50;
  opt.learning_rate = 1e306;
  CHECK_THROWS_AS(train(ModelSpec{ModelKind::kMlp, 4}, data, 2, opt), TrainingError);
  opt.learning_rate = -1;
  CHECK_THROWS_AS(train(ModelSpec{ModelKind::kLinear}, data, 2, opt), ValidationError);
  CHECK_THROWS_AS(train(ModelSpec{ModelKind::kLinear}, Dataset{}, 2, TrainOptions{}), ValidationError);
}

TEST_CASE("adversarial training runs and stays finite") {
  const Dataset data = two_blobs(8);
  TrainOptions opt;
  opt.epochs = 20;
  opt.adversarial = PgdParams{0.1, 0.05, 3, 1};
  const auto r = train(ModelSpec{ModelKind::kLinear}, data, 2, opt);
  CHECK(flatten(r.model).allFinite());
}

TEST_CASE("pgd on a binary linear model reaches the closed-form optimum") {
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    const Model lin = random_linear(rng, 4, 2);
    const Eigen::VectorXd x = random_vector(rng, 4);
    const Label y = static_cast<Label>(rng.below(2));
    const PgdParams params{0.3, 0.1, 20, 1};
    const Eigen::VectorXd adv = pgd_attack(lin, x, y, params, 5);
    const auto& W = std::get<LinearSoftmax>(lin).W;
    const Eigen::VectorXd dir = (W.row(y) - W.row(1 - y)).transpose();
    const Eigen::VectorXd best = x - params.epsilon * dir.array().sign().matrix();
    CHECK(std::abs(cross_entropy(lin, adv, y) - cross_entropy(lin, best, y)) < 1e-6);
  }
}

TEST_CASE("pgd stays in the ball and never lowers the loss") {
  Rng rng(13);
  for (int t = 0; t < 50; ++t) {
    const Model net = t % 2 ? random_mlp(rng, 5, 6, 3) : random_linear(rng, 5, 3);
    const Eigen::VectorXd x = random_vector(rng, 5);
    const Label y = static_cast<Label>(rng.below(3));
    const PgdParams params{0.05 + 0.3 * rng.uniform(), 0.07, 10, 1 + static_cast<int>(rng.below(3))};
    const Eigen::VectorXd adv = pgd_attack(net, x, y, params, 100 + t);
    CHECK((adv - x).cwiseAbs().maxCoeff() <= params.epsilon);
    CHECK(cross_entropy(net, adv, y) >= cross_entropy(net, x, y));
  }
  const Model lin = random_linear(rng, 3, 2);
  const Eigen::VectorXd x = random_vector(rng, 3);
  CHECK(pgd_attack(lin, x, 0, PgdParams{0.0, 0.1, 10, 2}, 1) == x);
  CHECK_THROWS_AS(pgd_attack(lin, x, 0, PgdParams{0.1, 0.0, 10, 1}, 1), ValidationError);
  CHECK_THROWS_AS(pgd_attack(lin, x, 0, PgdParams{-0.1, 0.1, 10, 1}, 1), ValidationError);
}

TEST_CASE("projection holds exactly in floating point") {
  Rng rng(14);
  for (int t = 0; t < 2000; ++t) {
    const Eigen::VectorXd x = random_vector(rng, 8, 1e3);
    const double eps = rng.uniform() * 0.1;
    const Eigen::VectorXd p = project_linf(x, random_vector(rng, 8, 1e3), eps);
    for (Eigen::Index i = 0; i < 8; ++i) CHECK(std::abs(p(i) - x(i)) <= eps);
  }
}

TEST_CASE("lookup classifier") {
  Eigen::MatrixXd z(2, 3);
  z << 0, 0, 0, 1000, 0, 0;
  const LookupClassifier table({"a", "b"}, z);
  CHECK(table.num_classes() == 3);
  CHECK(table.predict_proba("a")[1] == doctest::Approx(1.0 / 3));
  CHECK(table.predict_proba("b")[0] == 1.0);
  CHECK_THROWS_AS(table.logits("zzz"), ValidationError);
  CHECK_THROWS_AS(LookupClassifier({"a", "a"}, z), ValidationError);
  CHECK_THROWS_AS(LookupClassifier({"a"}, z), ValidationError);
}

TEST_CASE("model classifier and constant model") {
  const ModelClassifier c(constant_model(3, 4, 2));
  CHECK(c.num_classes() == 4);
  CHECK(c.predict(Eigen::Vector3d(5, -5, 1)) == 2);
  CHECK_THROWS_AS(constant_model(3, 4, 4), ValidationError);
}
