#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "invcert/io.hpp"

namespace invcert::cli {

// Named columns of string cells. Wall time lives only in the run manifest so
// that rerunning a config reproduces every table byte for byte.
struct ReportTable {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  std::uint64_t seed = 0;
  std::string config_hash;
  double wall_time_seconds = 0.0;

  io::CsvTable to_csv() const;
};

struct RunContext {
  std::filesystem::path out_dir = ".";
  std::filesystem::path base_dir = ".";  // relative config paths resolve here
  unsigned threads = 1;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::string> warnings;
  std::vector<std::string> files;  // relative to out_dir

  std::filesystem::path resolve(const std::string& path) const;
  // Writes `table` under out_dir with the seed and config hash header lines.
  void write(const std::string& file, const ReportTable& table);
  void write(const std::string& file, io::CsvTable table);
  void write_json(const std::string& file, const io::json& doc);
};

// FNV-1a 64 of the compact dump, as 16 hex digits.
std::string config_hash(const io::json& config);

// Each command reads its config, writes its files through ctx, and returns the
// headline table.
ReportTable cmd_certify(const io::json& config, RunContext& ctx);
ReportTable cmd_hierarchy(const io::json& config, RunContext& ctx);
ReportTable cmd_discover(const io::json& config, RunContext& ctx);
ReportTable cmd_sweep(const io::json& config, RunContext& ctx);
ReportTable cmd_toy_gauss(const io::json& config, RunContext& ctx);
ReportTable cmd_toy_prf(const io::json& config, RunContext& ctx);
ReportTable cmd_attack(const io::json& config, RunContext& ctx);

// Exit codes: 0 success, 1 validation error, 2 runtime or numeric error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace invcert::cli
