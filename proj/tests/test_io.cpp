#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "invcert/io.hpp"
#include "invcert/rng.hpp"

using namespace invcert;
using namespace invcert::io;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("invcert_io_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& f) const { return path / f; }
};

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

double awkward(Rng& rng) {
  const double mag = std::ldexp(rng.uniform_open(), static_cast<int>(rng.below(200)) - 100);
  return rng.bernoulli(0.5) ? mag : -mag;
}

bool same_bits(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (std::memcmp(a.data() + i, b.data() + i, sizeof(double)) != 0) return false;
  return true;
}

}  // namespace

TEST_CASE("double formatting round trips") {
  Rng rng(1);
  for (int t = 0; t < 20000; ++t) {
    const double v = awkward(rng);
    const double back = parse_double(format_double(v), "v");
    CHECK(std::memcmp(&v, &back, sizeof v) == 0);
  }
  CHECK(format_double(kInfinity) == "inf");
  CHECK(format_double(-kInfinity) == "-inf");
  CHECK(std::isinf(parse_double("inf", "v")));
  CHECK(parse_double("-inf", "v") < 0);
  CHECK(std::isnan(parse_double(format_double(std::numeric_limits<double>::quiet_NaN()), "v")));
  CHECK(parse_double(format_double(std::numeric_limits<double>::denorm_min()), "v") ==
        std::numeric_limits<double>::denorm_min());
  CHECK_THROWS_AS(parse_double("1.5x", "v"), ValidationError);
  CHECK_THROWS_AS(parse_double("", "v"), ValidationError);
  CHECK(parse_int("-42", "i") == -42);
  CHECK_THROWS_AS(parse_int("4.2", "i"), ValidationError);
}

TEST_CASE("csv tables with metadata") {
  TempDir dir("csv");
  CsvTable t;
  t.metadata = {{"config_hash", "00ff"}, {"seed", "7"}};
  t.header = {"a", "b"};
  t.rows = {{"1", "x"}, {"2", "y"}};
  write_csv(dir / "t.csv", t);
  const CsvTable back = read_csv(dir / "t.csv");
  CHECK(back.metadata == t.metadata);
  CHECK(back.header == t.header);
  CHECK(back.rows == t.rows);
  CHECK(back.column("b") == 1);
  CHECK_THROWS_AS(back.column("zz"), ValidationError);

  write_text(dir / "ragged.csv", "a,b\n1,2\n3\n");
  CHECK_THROWS_AS(read_csv(dir / "ragged.csv"), ValidationError);
  CHECK_THROWS_AS(read_csv(dir / "missing.csv"), ValidationError);
}

TEST_CASE("dataset, logits and embeddings round trip bit for bit") {
  TempDir dir("tables");
  Rng rng(5);
  Dataset data{Eigen::MatrixXd(7, 3), {}, {}};
  for (Eigen::Index i = 0; i < data.features.size(); ++i) data.features.data()[i] = awkward(rng);
  for (int i = 0; i < 7; ++i) {
    data.labels.push_back(i % 3);
    data.ids.push_back("s" + std::to_string(i));
  }
  write_dataset_csv(dir / "d.csv", data);
  const Dataset d2 = read_dataset_csv(dir / "d.csv");
  CHECK(same_bits(d2.features, data.features));
  CHECK(d2.labels == data.labels);
  CHECK(d2.ids == data.ids);

  LogitsTable logits{data.ids, data.labels, data.features};
  logits.logits(2, 1) = -kInfinity;
  write_logits_csv(dir / "l.csv", logits);
  const LogitsTable l2 = read_logits_csv(dir / "l.csv");
  CHECK(same_bits(l2.logits, logits.logits));
  CHECK(l2.ids == logits.ids);
  CHECK(l2.labels == logits.labels);

  write_text(dir / "unlabeled.csv", "sample_id,l0,l1\na,1,2\nb,3,4\n");
  const LogitsTable l3 = read_logits_csv(dir / "unlabeled.csv");
  CHECK(l3.labels.empty());
  CHECK(l3.logits(1, 0) == 3.0);

  EmbeddingSet emb{data.features, data.labels, data.ids, ""};
  write_embeddings_csv(dir / "e.csv", emb);
  const EmbeddingSet e2 = read_embeddings_csv(dir / "e.csv");
  CHECK(same_bits(e2.vectors, emb.vectors));
  CHECK(e2.labels == emb.labels);

  ConfusionMatrix cm{Eigen::MatrixXd(3, 3)};
  cm.counts << 5, 1, 0, 2, 7, 1, 0, 0, 9;
  write_confusion_csv(dir / "c.csv", cm);
  CHECK(read_confusion_csv(dir / "c.csv").counts == cm.counts);
  write_text(dir / "bad.csv", "1,2\n3,4\n5,6\n");
  CHECK_THROWS_AS(read_confusion_csv(dir / "bad.csv"), ValidationError);
}

TEST_CASE("certificate rows round trip") {
  TempDir dir("certs");
  std::vector<CertificateRow> rows;
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    CertificateRow r{"id" + std::to_string(i), i % 4, {}};
    r.prediction.p_a_lower = rng.uniform();
    if (i % 5 == 0) {
      r.prediction.label.reset();
    } else {
      r.prediction.label = i % 3;
      r.prediction.radius = i % 7 == 0 ? kInfinity : rng.uniform() * 3;
    }
    rows.push_back(r);
  }
  write_csv(dir / "c.csv", certificates_table(rows));
  const auto back = read_certificates_csv(dir / "c.csv");
  REQUIRE(back.size() == rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(back[i] == rows[i]);
  const CsvTable raw = read_csv(dir / "c.csv");
  CHECK(raw.header == std::vector<std::string>{"sample_id", "label", "pred", "radius", "abstain", "p_a_lower"});
  CHECK(raw.rows[0][2] == "-1");
  CHECK(raw.rows[0][3].empty());
}

TEST_CASE("models and partitions round trip") {
  for (ModelKind kind : {ModelKind::kLinear, ModelKind::kMlp}) {
    const Model m = init_model(ModelSpec{kind, 5}, 3, 4, 11);
    const Model back = model_from_json(json::parse(model_to_json(m).dump()));
    CHECK(same_bits(flatten(back), flatten(m)));
    CHECK(num_classes(back) == 4);
    CHECK(input_dim(back) == 3);
  }
  const Model c = model_from_json(json{{"type", "constant"}, {"input_dim", 2}, {"num_classes", 3}, {"label", 1}});
  CHECK(predict(c, Eigen::Vector2d(5, -5)) == 1);

  CHECK_THROWS_AS(model_from_json(json{{"type", "rbf"}}), ValidationError);
  CHECK_THROWS_AS(model_from_json(json{{"type", "linear_softmax"}, {"W", {{1, 2}}}, {"b", {0, 0}}}), ValidationError);
  CHECK_THROWS_AS(model_from_json(json{{"type", "linear_softmax"}, {"W", {{1, 2}}}, {"b", {0}}, {"extra", 1}}),
                  ValidationError);

  const LabelPartition p({{0, 3}, {1}, {2, 4}}, 5);
  CHECK(partition_from_json(partition_to_json(p), 5) == p);
  CHECK_THROWS_AS(partition_from_json(json{{0, 1}, {1, 2}}, 3), ValidationError);
  CHECK_THROWS_AS(partition_from_json(json{{0}, {2}}, 3), ValidationError);
}

TEST_CASE("config objects") {
  const json doc = json::parse(R"({"a": 1, "b": {"c": "x"}, "typo": 3})");
  ConfigObject c(doc, "");
  CHECK(c.get<int>("a") == 1);
  CHECK(c.get_or<double>("missing", 2.5) == 2.5);
  const ConfigObject b = c.object("b");
  CHECK(b.get<std::string>("c") == "x");
  CHECK(b.field("c") == "b.c");
  CHECK_NOTHROW(b.finish());
  try {
    c.finish();
    FAIL("unknown key accepted");
  } catch (const ValidationError& e) {
    CHECK(e.field() == "typo");
  }
  try {
    b.get<int>("c");
    FAIL("wrong type accepted");
  } catch (const ValidationError& e) {
    CHECK(e.field() == "b.c");
  }
  CHECK_THROWS_AS(c.get<int>("nope"), ValidationError);
}

TEST_CASE("hierarchy documents") {
  TempDir dir("hier");
  const json root_model = model_to_json(init_model(ModelSpec{}, 2, 2, 1));
  write_json(dir / "root.json", root_model);
  const json doc = json::parse(R"({
    "num_labels": 4,
    "baseline": {"type": "constant", "input_dim": 2, "num_classes": 4, "label": 3},
    "root": {"kind": "intermediate", "partition": [[0, 1], [2, 3]],
             "classifier": {"type": "model_file", "path": "root.json"},
             "children": [{"kind": "leaf", "labels": [0, 1]},
                          {"kind": "leaf", "labels": [2, 3], "strategy": "renormalize"}]}})");
  const HierarchyDocument h = hierarchy_from_json(doc, dir.path);
  CHECK(h.hierarchy.size() == 3);
  CHECK(h.hierarchy.node(1).has_classifier());
  CHECK(h.hierarchy.node(2).labels == LabelSet{2, 3});

  json wrong = doc;
  wrong["root"]["partition"] = json::parse("[[0, 2], [1, 3]]");
  CHECK_THROWS_AS(hierarchy_from_json(wrong, dir.path), ValidationError);

  json uncovered = doc;
  uncovered["root"]["children"][1]["labels"] = json::parse("[2]");
  uncovered["root"]["partition"] = json::parse("[[0, 1], [2]]");
  CHECK_THROWS_AS(hierarchy_from_json(uncovered, dir.path), ValidationError);

  json unknown = doc;
  unknown["root"]["children"][0]["colour"] = "red";
  try {
    hierarchy_from_json(unknown, dir.path);
    FAIL("unknown key accepted");
  } catch (const ValidationError& e) {
    CHECK(e.field().find("colour") != std::string::npos);
  }

  json missing_file = doc;
  missing_file["root"]["classifier"]["path"] = "nowhere.json";
  CHECK_THROWS_AS(hierarchy_from_json(missing_file, dir.path), ValidationError);

  json no_baseline = doc;
  no_baseline.erase("baseline");
  CHECK_THROWS_AS(hierarchy_from_json(no_baseline, dir.path), ValidationError);
}

TEST_CASE("json parse errors are validation errors") {
  TempDir dir("json");
  write_text(dir / "bad.json", "{\"a\": ");
  CHECK_THROWS_AS(read_json(dir / "bad.json"), ValidationError);
  CHECK_THROWS_AS(read_json(dir / "absent.json"), ValidationError);
}
