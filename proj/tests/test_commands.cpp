#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "invcert/commands.hpp"
#include "invcert/rng.hpp"
#include "invcert/smoothing.hpp"

using namespace invcert;
using namespace invcert::io;
namespace fs = std::filesystem;

namespace {

struct Workspace {
  fs::path root;
  explicit Workspace(const std::string& name) : root(fs::temp_directory_path() / ("invcert_cli_" + name)) {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workspace() { fs::remove_all(root); }

  fs::path config(const std::string& name, const json& doc) const {
    write_json(root / name, doc);
    return root / name;
  }
};

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(const std::string& command, const fs::path& config, const fs::path& out_dir,
               std::vector<std::string> extra = {}) {
  std::vector<std::string> args{"invcert", command, "--config", config.string(), "--out", out_dir.string()};
  args.insert(args.end(), extra.begin(), extra.end());
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Dataset blob_dataset(int per, std::uint64_t seed) {
  Eigen::MatrixXd centers(2, 2);
  centers << -2, 0, 2, 0;
  return make_blobs(centers, 0.5, per, seed);
}

int subprocess_exit(const std::string& args) {
  const int status = std::system((std::string(INVCERT_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 10-label logits whose softmax mixes a true-label bump with noise.
LogitsTable ten_label_logits(int n, std::uint64_t seed) {
  Rng rng(seed);
  LogitsTable t{{}, {}, Eigen::MatrixXd(n, 10)};
  for (int i = 0; i < n; ++i) {
    const Label y = static_cast<Label>(rng.below(10));
    t.ids.push_back("s" + std::to_string(i));
    t.labels.push_back(y);
    for (int j = 0; j < 10; ++j) t.logits(i, j) = rng.normal();
    t.logits(i, y) += 2.0;
  }
  return t;
}

// Root logits: log of the class-summed softmax mass.
LogitsTable coarse_logits(const LogitsTable& fine, const LabelPartition& p) {
  LogitsTable t{fine.ids, fine.labels, Eigen::MatrixXd(fine.logits.rows(), static_cast<Eigen::Index>(p.size()))};
  for (Eigen::Index i = 0; i < fine.logits.rows(); ++i) {
    const Eigen::VectorXd prob = softmax(Eigen::VectorXd(fine.logits.row(i).transpose()));
    for (std::size_t k = 0; k < p.size(); ++k) {
      double mass = 0.0;
      for (Label l : p[k]) mass += prob(l);
      t.logits(i, static_cast<Eigen::Index>(k)) = std::log(mass);
    }
  }
  return t;
}

}  // namespace

TEST_CASE("config hash is stable and order independent") {
  const json a = json::parse(R"({"b": 1, "a": [1, 2]})");
  const json b = json::parse(R"({"a": [1, 2], "b": 1})");
  CHECK(cli::config_hash(a) == cli::config_hash(b));
  CHECK(cli::config_hash(a).size() == 16);
  CHECK(cli::config_hash(a) != cli::config_hash(json::parse(R"({"b": 2, "a": [1, 2]})")));
}

TEST_CASE("certify with a constant classifier") {
  Workspace ws("certify");
  write_dataset_csv(ws.root / "data.csv", blob_dataset(20, 1));
  const json cfg{{"seed", 4},
                 {"classifier", {{"type", "constant"}, {"input_dim", 2}, {"num_classes", 2}, {"label", 1}}},
                 {"dataset", "data.csv"},
                 {"sigmas", {0.5}},
                 {"n0", 50},
                 {"n", 400},
                 {"alpha", 0.01}};
  const Outcome r = invoke("certify", ws.config("c.json", cfg), ws.root / "out");
  REQUIRE(r.code == 0);
  const auto rows = read_certificates_csv(ws.root / "out" / "certificates_sigma_0.5.csv");
  REQUIRE(rows.size() == 40);
  const double expected = clopper_pearson_lower(400, 400, 0.01);
  for (const auto& row : rows) {
    REQUIRE_FALSE(row.prediction.abstained());
    CHECK(*row.prediction.label == 1);
    CHECK(row.prediction.p_a_lower == doctest::Approx(expected).epsilon(1e-12));
  }
  const CsvTable ca = read_csv(ws.root / "out" / "certified_accuracy.csv");
  CHECK(ca.metadata.at(0).first == "config_hash");
  CHECK(ca.metadata.at(1) == std::pair<std::string, std::string>{"seed", "4"});
  CHECK(ca.rows.size() == 5);
  CHECK(ca.rows[0][ca.column("clean_accuracy")] == "0.5");
  const json manifest = read_json(ws.root / "out" / "manifest.json");
  CHECK(manifest["command"] == "certify");
  CHECK(manifest["config_hash"] == ca.metadata[0].second);
}

TEST_CASE("certify on an empty dataset warns and succeeds") {
  Workspace ws("empty");
  write_dataset_csv(ws.root / "data.csv", Dataset{Eigen::MatrixXd(0, 2), {}, {}});
  const json cfg{{"classifier", {{"type", "constant"}, {"input_dim", 2}, {"num_classes", 2}, {"label", 0}}},
                 {"dataset", "data.csv"}};
  const Outcome r = invoke("certify", ws.config("c.json", cfg), ws.root / "out");
  CHECK(r.code == 0);
  CHECK(r.err.find("warning") != std::string::npos);
  CHECK(read_csv(ws.root / "out" / "certified_accuracy.csv").rows.empty());
}

TEST_CASE("reruns are byte identical and independent of threads") {
  Workspace ws("repro");
  const Dataset data = blob_dataset(15, 2);
  write_dataset_csv(ws.root / "data.csv", data);
  TrainOptions opt;
  opt.epochs = 50;
  write_json(ws.root / "model.json", model_to_json(train(ModelSpec{}, data, 2, opt).model));
  const json cfg{{"seed", 11},
                 {"classifier", {{"type", "model_file"}, {"path", "model.json"}}},
                 {"dataset", "data.csv"},
                 {"sigmas", {0.25, 1.0}},
                 {"n", 300},
                 {"mode", "two_sided"}};
  const fs::path c = ws.config("c.json", cfg);
  REQUIRE(invoke("certify", c, ws.root / "a").code == 0);
  REQUIRE(invoke("certify", c, ws.root / "b", {"--threads", "4"}).code == 0);
  for (const char* f : {"certified_accuracy.csv", "certificates_sigma_0.25.csv", "certificates_sigma_1.csv"})
    CHECK(slurp(ws.root / "a" / f) == slurp(ws.root / "b" / f));
  REQUIRE(invoke("certify", c, ws.root / "c", {"--seed", "12"}).code == 0);
  CHECK(slurp(ws.root / "a" / "certificates_sigma_1.csv") != slurp(ws.root / "c" / "certificates_sigma_1.csv"));
}

TEST_CASE("hierarchy command") {
  Workspace ws("hierarchy");
  const LogitsTable fine = ten_label_logits(400, 3);
  const LabelPartition part({{0, 1, 2, 3, 4}, {5, 6, 7, 8, 9}}, 10);
  write_logits_csv(ws.root / "fine.csv", fine);
  write_logits_csv(ws.root / "coarse.csv", coarse_logits(fine, part));

  SUBCASE("identity hierarchy reproduces the baseline") {
    const json cfg{{"hierarchy",
                    {{"num_labels", 10},
                     {"baseline", {{"type", "logits"}, {"path", "fine.csv"}}},
                     {"root", {{"kind", "leaf"}, {"labels", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}}}}}},
                   {"samples", "fine.csv"}};
    const Outcome r = invoke("hierarchy", ws.config("h.json", cfg), ws.root / "out");
    REQUIRE(r.code == 0);
    const CsvTable t = read_csv(ws.root / "out" / "hierarchy_report.csv");
    for (const auto& row : t.rows) {
      CHECK(row[t.column("baseline_cr_mean")] == row[t.column("hierarchy_cr_mean")]);
      CHECK(row[t.column("baseline_cr_mean")] == row[t.column("end_to_end_cr_mean")]);
      CHECK(row[t.column("baseline_ca_0.5")] == row[t.column("hierarchy_ca_0.5")]);
    }
  }

  SUBCASE("two-class partition never lowers the mean radius") {
    const json cfg{{"hierarchy",
                    {{"num_labels", 10},
                     {"baseline", {{"type", "logits"}, {"path", "fine.csv"}}},
                     {"root",
                      {{"kind", "intermediate"},
                       {"partition", partition_to_json(part)},
                       {"classifier", {{"type", "logits"}, {"path", "coarse.csv"}}},
                       {"children",
                        {{{"kind", "leaf"}, {"labels", {0, 1, 2, 3, 4}}},
                         {{"kind", "leaf"}, {"labels", {5, 6, 7, 8, 9}}}}}}}}},
                   {"samples", "fine.csv"},
                   {"sigma", 0.5}};
    const Outcome r = invoke("hierarchy", ws.config("h.json", cfg), ws.root / "out");
    REQUIRE(r.code == 0);
    const CsvTable t = read_csv(ws.root / "out" / "hierarchy_report.csv");
    REQUIRE(t.rows.size() == 3);
    CHECK(t.rows[2][0] == "all");
    for (const auto& row : t.rows)
      CHECK(parse_double(row[t.column("hierarchy_cr_mean")], "") >= parse_double(row[t.column("baseline_cr_mean")], ""));
    CHECK(parse_double(t.rows[2][t.column("hierarchy_cr_mean")], "") >
          parse_double(t.rows[2][t.column("baseline_cr_mean")], ""));
    const CsvTable s = read_csv(ws.root / "out" / "hierarchy_samples.csv");
    CHECK(s.rows.size() == 400);
  }

  SUBCASE("partition that does not cover the labels is rejected") {
    const json cfg{{"hierarchy",
                    {{"num_labels", 10},
                     {"baseline", {{"type", "logits"}, {"path", "fine.csv"}}},
                     {"root",
                      {{"kind", "intermediate"},
                       {"partition", {{0, 1, 2, 3, 4}, {5, 6, 7, 8}}},
                       {"classifier", {{"type", "logits"}, {"path", "coarse.csv"}}},
                       {"children",
                        {{{"kind", "leaf"}, {"labels", {0, 1, 2, 3, 4}}},
                         {{"kind", "leaf"}, {"labels", {5, 6, 7, 8}}}}}}}}},
                   {"samples", "fine.csv"}};
    const Outcome r = invoke("hierarchy", ws.config("h.json", cfg), ws.root / "out");
    CHECK(r.code == 1);
    CHECK(r.err.rfind("error[validation]", 0) == 0);
  }
}

TEST_CASE("hierarchy command with an attack") {
  Workspace ws("hattack");
  const Dataset data = blob_dataset(20, 6);
  write_dataset_csv(ws.root / "data.csv", data);
  TrainOptions opt;
  opt.epochs = 100;
  write_json(ws.root / "m.json", model_to_json(train(ModelSpec{}, data, 2, opt).model));
  const json cfg{{"hierarchy",
                  {{"num_labels", 2},
                   {"baseline", {{"type", "model_file"}, {"path", "m.json"}}},
                   {"root", {{"kind", "leaf"}, {"labels", {0, 1}}}}}},
                 {"dataset", "data.csv"},
                 {"probabilities", "monte_carlo"},
                 {"n", 200},
                 {"attack", {{"epsilon", 0.5}, {"iters", 10}}}};
  REQUIRE(invoke("hierarchy", ws.config("h.json", cfg), ws.root / "out").code == 0);
  const CsvTable adv = read_csv(ws.root / "out" / "adversarial.csv");
  REQUIRE(adv.rows.size() == 1);
  CHECK(parse_double(adv.rows[0][adv.column("adversarial_acc")], "") <=
        parse_double(adv.rows[0][adv.column("natural_acc")], ""));

  const json budget{{"hierarchy", cfg["hierarchy"]}, {"dataset", "data.csv"}, {"mode", "budgeted"},
                    {"budget_target", "worst"}, {"epsilon", 0.5}};
  REQUIRE(invoke("attack", ws.config("a.json", budget), ws.root / "att").code == 0);
  const CsvTable a = read_csv(ws.root / "att" / "attack.csv");
  CHECK(a.rows[0][a.column("budget_node")] == "0");

  const json bad{{"hierarchy", cfg["hierarchy"]}, {"dataset", "data.csv"}, {"mode", "budgeted"}};
  const Outcome r = invoke("attack", ws.config("b.json", bad), ws.root / "bad");
  CHECK(r.code == 1);
  CHECK(r.err.find("budget_target") != std::string::npos);
}

TEST_CASE("discover command") {
  Workspace ws("discover");
  ConfusionMatrix cm{Eigen::MatrixXd::Identity(4, 4) * 50};
  cm.counts(0, 3) = 9;
  cm.counts(1, 2) = 4;
  write_confusion_csv(ws.root / "cm.csv", cm);
  const json cfg{{"num_labels", 4}, {"k", 2}, {"confusion", "cm.csv"}};
  REQUIRE(invoke("discover", ws.config("d.json", cfg), ws.root / "out").code == 0);
  CHECK(partition_from_json(read_json(ws.root / "out" / "partition.json"), 4) ==
        LabelPartition({{0, 3}, {1, 2}}, 4));

  write_confusion_csv(ws.root / "diag.csv", ConfusionMatrix{Eigen::MatrixXd::Identity(4, 4)});
  const json degenerate{{"num_labels", 4}, {"k", 2}, {"confusion", "diag.csv"}};
  const Outcome r = invoke("discover", ws.config("g.json", degenerate), ws.root / "g");
  CHECK(r.code == 2);
  CHECK(r.err.find("error[") == 0);

  EmbeddingSet emb{Eigen::MatrixXd(40, 2), {}, {}, ""};
  Rng rng(3);
  for (int i = 0; i < 40; ++i) {
    emb.vectors(i, 0) = (i % 2 ? 10.0 : 0.0) + 0.3 * rng.normal();
    emb.vectors(i, 1) = 0.3 * rng.normal();
    emb.labels.push_back((i % 2) * 2 + (i / 2) % 2);
    emb.ids.push_back("e" + std::to_string(i));
  }
  write_embeddings_csv(ws.root / "emb.csv", emb);
  const json from_emb{{"num_labels", 4}, {"k", 2}, {"embeddings", "emb.csv"}, {"seed", 1}};
  REQUIRE(invoke("discover", ws.config("e.json", from_emb), ws.root / "e").code == 0);
  CHECK(canonical_classes(partition_from_json(read_json(ws.root / "e" / "partition.json"), 4)) ==
        canonical_classes(LabelPartition({{0, 1}, {2, 3}}, 4)));
  CHECK(read_csv(ws.root / "e" / "clusters.csv").rows.size() == 40);
}

TEST_CASE("sweep command mean radius is monotone") {
  Workspace ws("sweep");
  const json cfg{{"seed", 3},
                 {"sigma", 0.5},
                 {"mode", "all"},
                 {"synthetic", {{"num_samples", 100}, {"num_labels", 6}}}};
  REQUIRE(invoke("sweep", ws.config("s.json", cfg), ws.root / "out").code == 0);
  const CsvTable t = read_csv(ws.root / "out" / "sweep.csv");
  REQUIRE(t.rows.size() == 6);
  const std::size_t mean = t.column("mean");
  for (std::size_t i = 2; i < t.rows.size(); ++i)
    CHECK(parse_double(t.rows[i][mean], "") <= parse_double(t.rows[i - 1][mean], ""));
}

TEST_CASE("toy commands") {
  Workspace ws("toys");
  const json gauss{{"seed", 1}, {"etas", {0.1}}, {"ks", {0, 50}}, {"n_samples", 20000}};
  REQUIRE(invoke("toy-gauss", ws.config("g.json", gauss), ws.root / "g").code == 0);
  const CsvTable g = read_csv(ws.root / "g" / "toy_gauss.csv");
  REQUIRE(g.rows.size() == 2);
  CHECK(g.rows[0][g.column("bound_respected")] == "1");
  CHECK(g.rows[1][g.column("theorem1_bound")].empty());

  const json prf{{"seed", 1}, {"n_trials", 4000}, {"flip_budget", 1}};
  REQUIRE(invoke("toy-prf", ws.config("p.json", prf), ws.root / "p").code == 0);
  const CsvTable p = read_csv(ws.root / "p" / "toy_prf.csv");
  REQUIRE(p.rows.size() == 2);
  const std::size_t keyless = p.column("keyless_accuracy");
  CHECK(std::abs(parse_double(p.rows[0][keyless], "") - 0.5) < 0.03);
  CHECK(parse_double(p.rows[1][keyless], "") == 1.0);
}

TEST_CASE("diagnostics and exit codes") {
  Workspace ws("errors");
  const json typo{{"seed", 1}, {"n_trails", 10}};
  const Outcome r = invoke("toy-prf", ws.config("t.json", typo), ws.root / "out");
  CHECK(r.code == 1);
  CHECK(r.err.find("error[validation]: n_trails:") == 0);

  CHECK(invoke("toy-prf", ws.root / "missing.json", ws.root / "out").code == 1);
  const json negative{{"seed", -1}};
  CHECK(invoke("toy-prf", ws.config("n.json", negative), ws.root / "out").code == 1);

  std::ostringstream out, err;
  const char* no_command[] = {"invcert", "--config", "x.json"};
  CHECK(cli::run(3, no_command, out, err) == 1);
}

TEST_CASE("installed binary honours the exit code contract") {
  Workspace ws("binary");
  write_json(ws.root / "ok.json", json{{"n_trials", 100}});
  write_json(ws.root / "bad.json", json{{"n_trials", 0}});
  write_confusion_csv(ws.root / "diag.csv", ConfusionMatrix{Eigen::MatrixXd::Identity(3, 3)});
  write_json(ws.root / "degenerate.json", json{{"num_labels", 3}, {"k", 2}, {"confusion", "diag.csv"}});
  const std::string out = " --out " + (ws.root / "out").string();
  CHECK(subprocess_exit("toy-prf --config " + (ws.root / "ok.json").string() + out) == 0);
  CHECK(subprocess_exit("toy-prf --config " + (ws.root / "bad.json").string() + out) == 1);
  CHECK(subprocess_exit("discover --config " + (ws.root / "degenerate.json").string() + out) == 2);
  CHECK(subprocess_exit("frobnicate --config x") == 1);
}
