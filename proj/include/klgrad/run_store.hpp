#pragma once

/** @file
 * Deterministic experiment records.
 *
 * Layout under an output directory:
 *
 *   <out>/<run_id>/manifest.json     RunRecord
 *   <out>/<run_id>/<row kind>.csv    one file per row kind, header row first
 *
 * run_id is the FNV-1a hash of the canonical JSON dump of the run's
 * configuration (which includes its seed). Doubles are written with 17
 * significant digits.
 */

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "klgrad/error.hpp"
#include "klgrad/random.hpp"

namespace klgrad {

inline constexpr std::string_view kCodeVersion = "klgrad-0.1.0";
inline constexpr int kManifestSchemaVersion = 1;

/// Column layout of one CSV row kind. `flag_column`, when set, names the
/// column whose nonzero value licenses non-finite numbers in that row.
struct Schema {
  std::string kind;
  int version = 1;
  std::vector<std::string> columns;  // excluding the leading run_id column
  std::optional<std::string> flag_column;
};

inline const Schema& bias_variance_schema() {
  static const Schema s{"bias_variance",
                        1,
                        {"kind", "placement", "T", "trials", "n_per_trial", "mean_a", "mean_b", "true_a", "true_b",
                         "bias_a", "bias_b", "abs_bias_a", "abs_bias_b", "bias_norm", "var_a", "var_b", "var_trace",
                         "se_a", "se_b", "config_a", "config_b", "config_missing"},
                        "config_missing"};
  return s;
}

inline const Schema& train_metric_schema() {
  static const Schema s{"train_metric",
                        1,
                        {"step", "mean_reward", "expected_reward", "exact_reverse_kl", "exact_forward_kl", "entropy",
                         "grad_norm", "collapse_flag"},
                        "collapse_flag"};
  return s;
}

inline const Schema& mc_estimate_schema() {
  static const Schema s{"mc_estimate",
                        1,
                        {"kind", "T", "n", "mean", "std_err", "variance", "exact_kl"},
                        std::nullopt};
  return s;
}

inline const Schema& schema_for(std::string_view kind) {
  for (const Schema* s : {&bias_variance_schema(), &train_metric_schema(), &mc_estimate_schema()}) {
    if (s->kind == kind) return *s;
  }
  throw SchemaError("unknown row kind '" + std::string(kind) + "'");
}

using Cell = std::variant<long long, double, std::string>;

struct ResultRow {
  std::string kind;
  std::vector<Cell> values;  // in schema column order
};

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_cell(const Cell& c) {
  if (const auto* i = std::get_if<long long>(&c)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&c)) return format_double(*d);
  const auto& s = std::get<std::string>(c);
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

inline std::string csv_header(const Schema& s) {
  std::string h = "run_id";
  for (const auto& c : s.columns) h += "," + c;
  return h + "\n";
}

inline void validate_row(const Schema& schema, const ResultRow& row) {
  if (row.kind != schema.kind) throw SchemaError("row kind '" + row.kind + "' written to '" + schema.kind + "'");
  if (row.values.size() != schema.columns.size()) {
    throw SchemaError(schema.kind + " rows have " + std::to_string(schema.columns.size()) + " columns, got " +
                      std::to_string(row.values.size()));
  }
  bool flagged = false;
  if (schema.flag_column) {
    for (std::size_t i = 0; i < schema.columns.size(); ++i) {
      if (schema.columns[i] != *schema.flag_column) continue;
      const auto* f = std::get_if<long long>(&row.values[i]);
      if (f == nullptr) throw SchemaError(schema.kind + "." + *schema.flag_column + " must be an integer flag");
      flagged = *f != 0;
    }
  }
  for (std::size_t i = 0; i < row.values.size(); ++i) {
    const auto* d = std::get_if<double>(&row.values[i]);
    if (d != nullptr && !std::isfinite(*d) && !flagged) {
      throw SchemaError("non-finite " + schema.kind + "." + schema.columns[i] + " without a set flag column");
    }
  }
}

struct RunRecord {
  std::string run_id;
  nlohmann::json config;
  std::string code_version{kCodeVersion};
  std::string created_at;
  std::vector<std::string> outputs;  // file names relative to dir
  bool complete = false;
  std::filesystem::path dir;

  nlohmann::json manifest() const {
    return {{"schema_version", kManifestSchemaVersion},
            {"run_id", run_id},
            {"config", config},
            {"code_version", code_version},
            {"created_at", created_at},
            {"outputs", outputs},
            {"complete", complete}};
  }
};

inline std::string make_run_id(const nlohmann::json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Owns an output directory. All writes to all runs go through one mutex,
/// so concurrent producers never interleave partial rows.
class RunStore {
 public:
  explicit RunStore(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const noexcept { return root_; }

  /// Creates (or reopens) the record for `config`. A complete run is
  /// returned untouched; an incomplete one has its outputs truncated so it
  /// can be replayed from scratch.
  RunRecord record_run(const nlohmann::json& config) {
    std::lock_guard lock(mu_);
    RunRecord r;
    r.run_id = make_run_id(config);
    r.config = config;
    r.dir = root_ / r.run_id;
    std::error_code ec;
    std::filesystem::create_directories(r.dir, ec);
    if (ec) throw IoError("cannot create " + r.dir.string() + ": " + ec.message());

    if (auto existing = load_manifest_unlocked(r.dir)) {
      if (existing->run_id == r.run_id && existing->config == config) {
        if (existing->complete) return *existing;
        for (const auto& f : existing->outputs) std::filesystem::remove(r.dir / f, ec);
        r.created_at = existing->created_at;
      }
    }
    if (r.created_at.empty()) r.created_at = utc_timestamp();
    write_manifest_unlocked(r);
    return r;
  }

  void append_rows(RunRecord& record, const std::vector<ResultRow>& rows) {
    if (rows.empty()) return;
    const Schema& schema = schema_for(rows.front().kind);
    std::string blob;
    for (const auto& row : rows) {
      validate_row(schema, row);
      blob += record.run_id;
      for (const auto& v : row.values) blob += "," + format_cell(v);
      blob += "\n";
    }

    std::lock_guard lock(mu_);
    const std::string file = schema.kind + ".csv";
    const auto path = record.dir / file;
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot open " + path.string());
    if (fresh) out << csv_header(schema);
    out << blob;
    out.flush();
    if (!out) throw IoError("write failed on " + path.string());

    bool known = false;
    for (const auto& o : record.outputs) known = known || o == file;
    if (!known) {
      record.outputs.push_back(file);
      write_manifest_unlocked(record);
    }
  }

  void mark_complete(RunRecord& record) {
    std::lock_guard lock(mu_);
    record.complete = true;
    write_manifest_unlocked(record);
  }

  std::optional<RunRecord> load(const std::string& run_id) {
    std::lock_guard lock(mu_);
    return load_manifest_unlocked(root_ / run_id);
  }

 private:
  static std::optional<RunRecord> load_manifest_unlocked(const std::filesystem::path& dir) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) return std::nullopt;
    nlohmann::json j;
    try {
      in >> j;
      RunRecord r;
      r.run_id = j.at("run_id").get<std::string>();
      r.config = j.at("config");
      r.code_version = j.at("code_version").get<std::string>();
      r.created_at = j.at("created_at").get<std::string>();
      r.outputs = j.at("outputs").get<std::vector<std::string>>();
      r.complete = j.at("complete").get<bool>();
      r.dir = dir;
      return r;
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;  // unreadable manifest: treat the run as absent
    }
  }

  static void write_manifest_unlocked(const RunRecord& r) {
    const auto path = r.dir / "manifest.json";
    const auto tmp = r.dir / "manifest.json.tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot write " + tmp.string());
      out << r.manifest().dump(2) << "\n";
      if (!out) throw IoError("write failed on " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename manifest in " + r.dir.string() + ": " + ec.message());
  }

  std::filesystem::path root_;
  std::mutex mu_;
};

}  // namespace klgrad
