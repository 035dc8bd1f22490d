#pragma once

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "invcert/core.hpp"
#include "invcert/datasets.hpp"
#include "invcert/discovery.hpp"
#include "invcert/hierarchy.hpp"
#include "invcert/models.hpp"

namespace invcert::io {

using json = nlohmann::json;

// 17 significant digits; "inf", "-inf", "nan" for non-finite values.
std::string format_double(double v);
double parse_double(const std::string& text, const std::string& field);
long long parse_int(const std::string& text, const std::string& field);

// Comment lines "# key=value" precede the header and carry metadata.
struct CsvTable {
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path, bool has_header = true);
void write_csv(const std::filesystem::path& path, const CsvTable& table);

// sample_id,label,x0..x{d-1}
Dataset read_dataset_csv(const std::filesystem::path& path);
void write_dataset_csv(const std::filesystem::path& path, const Dataset& data);

// sample_id,label,l0..l{m-1}
struct LogitsTable {
  std::vector<std::string> ids;
  std::vector<Label> labels;
  Eigen::MatrixXd logits;
};
LogitsTable read_logits_csv(const std::filesystem::path& path);
void write_logits_csv(const std::filesystem::path& path, const LogitsTable& table);

// sample_id,label,e0..e{d-1}
EmbeddingSet read_embeddings_csv(const std::filesystem::path& path);
void write_embeddings_csv(const std::filesystem::path& path, const EmbeddingSet& embeddings);

// m rows of m counts, no header.
ConfusionMatrix read_confusion_csv(const std::filesystem::path& path);
void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm);

// sample_id,label,pred,radius,abstain,p_a_lower. Abstained rows carry pred -1
// and an empty radius.
struct CertificateRow {
  std::string sample_id;
  Label label = 0;
  CertifiedPrediction prediction;

  friend bool operator==(const CertificateRow& a, const CertificateRow& b) {
    return a.sample_id == b.sample_id && a.label == b.label && a.prediction.label == b.prediction.label &&
           a.prediction.radius == b.prediction.radius && a.prediction.p_a_lower == b.prediction.p_a_lower;
  }
};
CsvTable certificates_table(const std::vector<CertificateRow>& rows);
std::vector<CertificateRow> read_certificates_csv(const std::filesystem::path& path);

json model_to_json(const Model& model);
Model model_from_json(const json& doc, const std::string& field = "model");

json partition_to_json(const LabelPartition& p);
LabelPartition partition_from_json(const json& doc, int num_labels, const std::string& field = "partition");

// Reader over one JSON object that reports missing, mistyped, and unknown keys
// with their dotted path.
class ConfigObject {
 public:
  ConfigObject(const json& doc, std::string path);

  bool has(const std::string& key) const;
  const json& raw(const std::string& key) const;
  ConfigObject object(const std::string& key) const;

  template <class T>
  T get(const std::string& key) const {
    const json& v = raw(key);
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw ValidationError("wrong type for " + field(key), field(key));
    }
  }

  template <class T>
  T get_or(const std::string& key, T fallback) const {
    return has(key) ? get<T>(key) : fallback;
  }

  // Rejects keys never looked up through this object.
  void finish() const;
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  const std::string& path() const noexcept { return path_; }

 private:
  const json* doc_;
  std::string path_;
  mutable std::set<std::string> seen_;
};

json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const json& doc);

// Hierarchy document:
//   {"num_labels": m, "label_names": [...], "baseline": <classifier>,
//    "root": <node>}
//   node: {"kind": "intermediate", "partition": [[...], ...], "classifier": <classifier>, "children": [<node>...]}
//       | {"kind": "leaf", "labels": [...], "strategy": "renormalize"|"retrain", "classifier": <classifier>}
//   classifier: {"type": "linear_softmax"|"mlp", ...parameters}
//             | {"type": "model_file", "path": p} | {"type": "logits", "path": p}
//             | {"type": "constant", "input_dim": d, "num_classes": m, "label": l}
//             | {"type": "baseline"}
// Renormalized leaves without a classifier use the baseline. Relative paths
// resolve against `base_dir`.
struct HierarchyDocument {
  Hierarchy hierarchy;
  NodeClassifier baseline;
};
HierarchyDocument hierarchy_from_json(const json& doc, const std::filesystem::path& base_dir,
                                      const std::string& field = "hierarchy");

NodeClassifier classifier_from_json(const json& doc, const std::filesystem::path& base_dir,
                                    const std::string& field);

}  // namespace invcert::io
