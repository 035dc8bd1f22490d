#include "invcert/io.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

namespace invcert::io {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& text, const std::string& field) {
  if (text == "inf" || text == "+inf") return kInfinity;
  if (text == "-inf") return -kInfinity;
  if (text == "nan") return std::nan("");
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  const bool overflow = errno == ERANGE && std::abs(v) > std::numeric_limits<double>::min();
  if (text.empty() || end != text.c_str() + text.size() || overflow)
    throw ValidationError("cannot parse '" + text + "' as a number", field);
  return v;
}

long long parse_int(const std::string& text, const std::string& field) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size())
    throw ValidationError("cannot parse '" + text + "' as an integer", field);
  return v;
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw ValidationError("missing column '" + name + "'", name);
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'", path.string(), "check the file path");
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path.string() + "'", path.string());
  return out;
}

// Checks the leading columns and returns the count of indexed trailing columns.
std::size_t indexed_columns(const CsvTable& t, const std::vector<std::string>& lead, const std::string& prefix,
                            const std::string& what) {
  if (t.header.size() < lead.size() + 1)
    throw ValidationError(what + " CSV needs columns " + lead.front() + ",...," + prefix + "0..", what);
  for (std::size_t i = 0; i < lead.size(); ++i)
    if (t.header[i] != lead[i])
      throw ValidationError(what + " CSV column " + std::to_string(i) + " must be '" + lead[i] + "'", what);
  const std::size_t count = t.header.size() - lead.size();
  for (std::size_t j = 0; j < count; ++j)
    if (t.header[lead.size() + j] != prefix + std::to_string(j))
      throw ValidationError(what + " CSV column '" + t.header[lead.size() + j] + "' should be '" + prefix +
                                std::to_string(j) + "'",
                            what);
  return count;
}

struct LabelledRows {
  std::vector<std::string> ids;
  std::vector<Label> labels;
  Eigen::MatrixXd values;
};

LabelledRows read_labelled(const std::filesystem::path& path, const std::string& prefix, const std::string& what) {
  const CsvTable t = read_csv(path);
  const std::size_t d = indexed_columns(t, {"sample_id", "label"}, prefix, what);
  LabelledRows out;
  out.values.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = path.string() + ":" + std::to_string(r + 1);
    if (row.size() != d + 2) throw ValidationError("row has " + std::to_string(row.size()) + " cells", where);
    out.ids.push_back(row[0]);
    out.labels.push_back(static_cast<Label>(parse_int(row[1], where)));
    for (std::size_t j = 0; j < d; ++j)
      out.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = parse_double(row[j + 2], where);
  }
  return out;
}

void write_labelled(const std::filesystem::path& path, const std::vector<std::string>& ids,
                    const std::vector<Label>& labels, const Eigen::MatrixXd& values, const std::string& prefix) {
  CsvTable t;
  t.header = {"sample_id", "label"};
  for (Eigen::Index j = 0; j < values.cols(); ++j) t.header.push_back(prefix + std::to_string(j));
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    std::vector<std::string> row{ids.empty() ? std::to_string(i) : ids[static_cast<std::size_t>(i)],
                                 std::to_string(labels[static_cast<std::size_t>(i)])};
    for (Eigen::Index j = 0; j < values.cols(); ++j) row.push_back(format_double(values(i, j)));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

}  // namespace

CsvTable read_csv(const std::filesystem::path& path, bool has_header) {
  std::ifstream in = open_in(path);
  CsvTable t;
  std::string line;
  bool header_done = !has_header;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto body = line.substr(1);
      const auto eq = body.find('=');
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(' ');
        return b == std::string::npos ? std::string{} : s.substr(b);
      };
      if (eq != std::string::npos) t.metadata.emplace_back(trim(body.substr(0, eq)), body.substr(eq + 1));
      continue;
    }
    if (!header_done) {
      t.header = split(line);
      header_done = true;
    } else {
      t.rows.push_back(split(line));
      const std::size_t width = has_header ? t.header.size() : t.rows.front().size();
      if (t.rows.back().size() != width)
        throw ValidationError(path.string() + ": row " + std::to_string(t.rows.size()) + " has " +
                                  std::to_string(t.rows.back().size()) + " cells, expected " + std::to_string(width),
                              path.filename().string());
    }
  }
  return t;
}

void write_csv(const std::filesystem::path& path, const CsvTable& table) {
  std::ofstream out = open_out(path);
  for (const auto& [k, v] : table.metadata) out << "# " << k << '=' << v << '\n';
  auto emit = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  if (!table.header.empty()) emit(table.header);
  for (const auto& row : table.rows) emit(row);
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
  LabelledRows rows = read_labelled(path, "x", "dataset");
  return {std::move(rows.values), std::move(rows.labels), std::move(rows.ids)};
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
  write_labelled(path, data.ids, data.labels, data.features, "x");
}

LogitsTable read_logits_csv(const std::filesystem::path& path) {
  {
    const CsvTable t = read_csv(path);
    if (t.header.size() < 2 || t.header[1] != "label") {
      // Label-free variant: sample_id,l0..l{m-1}.
      const std::size_t m = indexed_columns(t, {"sample_id"}, "l", "logits");
      LogitsTable out;
      out.logits.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(m));
      for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const std::string where = path.string() + ":" + std::to_string(r + 1);
        if (t.rows[r].size() != m + 1) throw ValidationError("row has " + std::to_string(t.rows[r].size()) + " cells", where);
        out.ids.push_back(t.rows[r][0]);
        for (std::size_t j = 0; j < m; ++j)
          out.logits(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = parse_double(t.rows[r][j + 1], where);
      }
      return out;
    }
  }
  LabelledRows rows = read_labelled(path, "l", "logits");
  return {std::move(rows.ids), std::move(rows.labels), std::move(rows.values)};
}

void write_logits_csv(const std::filesystem::path& path, const LogitsTable& table) {
  write_labelled(path, table.ids, table.labels, table.logits, "l");
}

EmbeddingSet read_embeddings_csv(const std::filesystem::path& path) {
  LabelledRows rows = read_labelled(path, "e", "embeddings");
  EmbeddingSet out;
  out.vectors = std::move(rows.values);
  out.labels = std::move(rows.labels);
  out.ids = std::move(rows.ids);
  return out;
}

void write_embeddings_csv(const std::filesystem::path& path, const EmbeddingSet& embeddings) {
  write_labelled(path, embeddings.ids, embeddings.labels, embeddings.vectors, "e");
}

ConfusionMatrix read_confusion_csv(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path, /*has_header=*/false);
  const auto m = static_cast<Eigen::Index>(t.rows.size());
  ConfusionMatrix cm{Eigen::MatrixXd(m, m)};
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& row = t.rows[static_cast<std::size_t>(i)];
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    if (static_cast<Eigen::Index>(row.size()) != m)
      throw ValidationError("confusion matrix must be square", where);
    for (Eigen::Index j = 0; j < m; ++j) cm.counts(i, j) = parse_double(row[static_cast<std::size_t>(j)], where);
  }
  cm.validate();
  return cm;
}

void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& cm) {
  CsvTable t;
  for (Eigen::Index i = 0; i < cm.counts.rows(); ++i) {
    std::vector<std::string> row;
    for (Eigen::Index j = 0; j < cm.counts.cols(); ++j) row.push_back(format_double(cm.counts(i, j)));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

CsvTable certificates_table(const std::vector<CertificateRow>& rows) {
  CsvTable t;
  t.header = {"sample_id", "label", "pred", "radius", "abstain", "p_a_lower"};
  for (const auto& r : rows) {
    const auto& p = r.prediction;
    t.rows.push_back({r.sample_id, std::to_string(r.label), std::to_string(p.abstained() ? -1 : *p.label),
                      p.radius ? format_double(*p.radius) : std::string{}, p.abstained() ? "1" : "0",
                      format_double(p.p_a_lower)});
  }
  return t;
}

std::vector<CertificateRow> read_certificates_csv(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const std::vector<std::string> expected{"sample_id", "label", "pred", "radius", "abstain", "p_a_lower"};
  if (t.header != expected) throw ValidationError("unexpected certificate CSV header", path.string());
  std::vector<CertificateRow> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = path.string() + ":" + std::to_string(r + 1);
    if (row.size() != expected.size()) throw ValidationError("certificate row has wrong cell count", where);
    CertificateRow c;
    c.sample_id = row[0];
    c.label = static_cast<Label>(parse_int(row[1], where));
    const bool abstain = parse_int(row[4], where) != 0;
    c.prediction.p_a_lower = parse_double(row[5], where);
    if (!abstain) {
      c.prediction.label = static_cast<Label>(parse_int(row[2], where));
      c.prediction.radius = parse_double(row[3], where);
    }
    out.push_back(std::move(c));
  }
  return out;
}

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_to_json(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Eigen::MatrixXd matrix_from_json(const json& doc, const std::string& field) {
  if (!doc.is_array() || doc.empty()) throw ValidationError("expected a nonempty array of rows", field);
  const auto rows = static_cast<Eigen::Index>(doc.size());
  const auto cols = static_cast<Eigen::Index>(doc.front().is_array() ? doc.front().size() : 0);
  if (cols == 0) throw ValidationError("expected rows of numbers", field);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const json& row = doc[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ValidationError("ragged matrix rows", field);
    for (Eigen::Index j = 0; j < cols; ++j) {
      const json& v = row[static_cast<std::size_t>(j)];
      if (!v.is_number()) throw ValidationError("matrix entries must be numbers", field);
      m(i, j) = v.get<double>();
    }
  }
  return m;
}

Eigen::VectorXd vector_from_json(const json& doc, const std::string& field) {
  if (!doc.is_array()) throw ValidationError("expected an array of numbers", field);
  Eigen::VectorXd v(static_cast<Eigen::Index>(doc.size()));
  for (std::size_t i = 0; i < doc.size(); ++i) {
    if (!doc[i].is_number()) throw ValidationError("vector entries must be numbers", field);
    v(static_cast<Eigen::Index>(i)) = doc[i].get<double>();
  }
  return v;
}

}  // namespace

json model_to_json(const Model& model) {
  if (const auto* lin = std::get_if<LinearSoftmax>(&model))
    return {{"type", "linear_softmax"}, {"W", matrix_to_json(lin->W)}, {"b", vector_to_json(lin->b)}};
  const auto& mlp = std::get<SmallMlp>(model);
  return {{"type", "mlp"},
          {"W1", matrix_to_json(mlp.W1)},
          {"b1", vector_to_json(mlp.b1)},
          {"W2", matrix_to_json(mlp.W2)},
          {"b2", vector_to_json(mlp.b2)}};
}

Model model_from_json(const json& doc, const std::string& field) {
  ConfigObject obj(doc, field);
  const auto type = obj.get<std::string>("type");
  Model model;
  if (type == "linear_softmax") {
    model = LinearSoftmax{matrix_from_json(obj.raw("W"), obj.field("W")), vector_from_json(obj.raw("b"), obj.field("b"))};
  } else if (type == "mlp") {
    model = SmallMlp{matrix_from_json(obj.raw("W1"), obj.field("W1")), vector_from_json(obj.raw("b1"), obj.field("b1")),
                     matrix_from_json(obj.raw("W2"), obj.field("W2")), vector_from_json(obj.raw("b2"), obj.field("b2"))};
  } else if (type == "constant") {
    model = constant_model(obj.get<int>("input_dim"), obj.get<int>("num_classes"), obj.get<int>("label"));
  } else {
    throw ValidationError("unknown model type '" + type + "'", obj.field("type"), "use linear_softmax, mlp or constant");
  }
  obj.finish();
  try {
    validate(model);
  } catch (const ValidationError& e) {
    throw ValidationError(e.what(), field + "." + e.field());
  }
  return model;
}

json partition_to_json(const LabelPartition& p) {
  json out = json::array();
  for (const auto& cls : p.classes()) out.push_back(cls);
  return out;
}

LabelPartition partition_from_json(const json& doc, int num_labels, const std::string& field) {
  if (!doc.is_array()) throw ValidationError("partition must be an array of label arrays", field);
  std::vector<LabelSet> classes;
  for (const auto& cls : doc) {
    if (!cls.is_array()) throw ValidationError("partition classes must be arrays", field);
    LabelSet set;
    for (const auto& l : cls) {
      if (!l.is_number_integer()) throw ValidationError("partition labels must be integers", field);
      set.push_back(l.get<Label>());
    }
    classes.push_back(std::move(set));
  }
  try {
    return LabelPartition(std::move(classes), num_labels);
  } catch (const ValidationError& e) {
    throw ValidationError(e.what(), field, e.hint());
  }
}

ConfigObject::ConfigObject(const json& doc, std::string path) : doc_(&doc), path_(std::move(path)) {
  if (!doc.is_object()) throw ValidationError("expected a JSON object", path_.empty() ? "config" : path_);
}

bool ConfigObject::has(const std::string& key) const {
  seen_.insert(key);
  return doc_->contains(key) && !(*doc_)[key].is_null();
}

const json& ConfigObject::raw(const std::string& key) const {
  seen_.insert(key);
  if (!doc_->contains(key)) throw ValidationError("missing required key " + field(key), field(key));
  return (*doc_)[key];
}

ConfigObject ConfigObject::object(const std::string& key) const { return ConfigObject(raw(key), field(key)); }

void ConfigObject::finish() const {
  for (const auto& [key, value] : doc_->items())
    if (!seen_.contains(key))
      throw ValidationError("unknown key " + field(key), field(key), "remove it or check its spelling");
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("invalid JSON: ") + e.what(), path.string());
  }
}

void write_json(const std::filesystem::path& path, const json& doc) {
  std::ofstream out = open_out(path);
  out << doc.dump(2) << '\n';
}

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

struct NodeParser {
  const std::filesystem::path& base;
  const LabelSpace& space;
  const NodeClassifier& baseline;
  bool has_baseline;

  NodeClassifier classifier(const json& doc, const std::string& field) const {
    if (doc.is_object() && doc.value("type", "") == "baseline") {
      ConfigObject obj(doc, field);
      obj.get<std::string>("type");
      obj.finish();
      if (!has_baseline) throw ValidationError("no baseline classifier defined", field);
      return baseline;
    }
    return classifier_from_json(doc, base, field);
  }

  NodeSpec node(const json& doc, const std::string& field) const {
    ConfigObject obj(doc, field);
    const auto kind = obj.get<std::string>("kind");
    NodeSpec spec;
    if (kind == "leaf") {
      spec.kind = HierarchyNode::Kind::kLeaf;
      spec.labels = obj.get<std::vector<Label>>("labels");
      const auto strategy = obj.get_or<std::string>("strategy", "renormalize");
      if (strategy == "renormalize")
        spec.strategy = LeafStrategy::kRenormalize;
      else if (strategy == "retrain")
        spec.strategy = LeafStrategy::kRetrain;
      else
        throw ValidationError("strategy must be renormalize or retrain", obj.field("strategy"));
      if (obj.has("classifier"))
        spec.classifier = classifier(obj.raw("classifier"), obj.field("classifier"));
      else if (spec.strategy == LeafStrategy::kRenormalize && spec.labels.size() > 1 && has_baseline)
        spec.classifier = baseline;
      else if (spec.labels.size() > 1)
        throw ValidationError("leaf with several labels needs a classifier", obj.field("classifier"),
                              "add a classifier or a top-level baseline");
    } else if (kind == "intermediate") {
      spec.kind = HierarchyNode::Kind::kIntermediate;
      spec.classifier = classifier(obj.raw("classifier"), obj.field("classifier"));
      const json& children = obj.raw("children");
      if (!children.is_array()) throw ValidationError("children must be an array", obj.field("children"));
      for (std::size_t i = 0; i < children.size(); ++i)
        spec.children.push_back(node(children[i], obj.field("children") + "[" + std::to_string(i) + "]"));
      const LabelPartition declared = partition_from_json(obj.raw("partition"), space.size(), obj.field("partition"));
      (void)declared;
    } else {
      throw ValidationError("kind must be leaf or intermediate", obj.field("kind"));
    }
    obj.finish();
    return spec;
  }
};

// Labels under a spec, for checking declared partitions.
LabelSet spec_labels(const NodeSpec& spec) {
  if (spec.kind == HierarchyNode::Kind::kLeaf) {
    LabelSet l = spec.labels;
    std::sort(l.begin(), l.end());
    return l;
  }
  LabelSet all;
  for (const auto& c : spec.children) {
    const LabelSet cl = spec_labels(c);
    all.insert(all.end(), cl.begin(), cl.end());
  }
  std::sort(all.begin(), all.end());
  return all;
}

void check_declared_partitions(const json& doc, const NodeSpec& spec, const std::string& field) {
  if (spec.kind == HierarchyNode::Kind::kLeaf) return;
  const json& declared = doc["partition"];
  if (declared.size() != spec.children.size())
    throw ValidationError("partition has " + std::to_string(declared.size()) + " classes for " +
                              std::to_string(spec.children.size()) + " children",
                          field + ".partition");
  for (std::size_t i = 0; i < spec.children.size(); ++i) {
    LabelSet want = declared[i].get<LabelSet>();
    std::sort(want.begin(), want.end());
    if (want != spec_labels(spec.children[i]))
      throw ValidationError("partition class " + std::to_string(i) + " does not match the labels of child " +
                                std::to_string(i),
                            field + ".partition", "list each child's labels in child order");
    check_declared_partitions(doc["children"][i], spec.children[i], field + ".children[" + std::to_string(i) + "]");
  }
}

}  // namespace

NodeClassifier classifier_from_json(const json& doc, const std::filesystem::path& base_dir, const std::string& field) {
  if (!doc.is_object()) throw ValidationError("classifier must be an object", field);
  const auto type = doc.value("type", "");
  if (type == "logits" || type == "model_file") {
    ConfigObject obj(doc, field);
    obj.get<std::string>("type");
    const auto path = resolve(base_dir, obj.get<std::string>("path"));
    obj.finish();
    if (type == "model_file") return model_from_json(read_json(path), field);
    const LogitsTable table = read_logits_csv(path);
    return std::make_shared<const LookupClassifier>(table.ids, table.logits);
  }
  return model_from_json(doc, field);
}

HierarchyDocument hierarchy_from_json(const json& doc, const std::filesystem::path& base_dir, const std::string& field) {
  ConfigObject obj(doc, field);
  const int m = obj.get<int>("num_labels");
  const auto names = obj.get_or<std::vector<std::string>>("label_names", {});
  LabelSpace space = [&] {
    try {
      return LabelSpace(m, names);
    } catch (const ValidationError& e) {
      throw ValidationError(e.what(), field + "." + e.field());
    }
  }();
  NodeClassifier baseline;
  const bool has_baseline = obj.has("baseline");
  if (has_baseline) baseline = classifier_from_json(obj.raw("baseline"), base_dir, obj.field("baseline"));
  NodeParser parser{base_dir, space, baseline, has_baseline};
  const NodeSpec root = parser.node(obj.raw("root"), obj.field("root"));
  check_declared_partitions(obj.raw("root"), root, obj.field("root"));
  obj.finish();
  try {
    return {Hierarchy(std::move(space), root), baseline};
  } catch (const ValidationError& e) {
    throw ValidationError(e.what(), field, e.hint());
  }
}

}  // namespace invcert::io
