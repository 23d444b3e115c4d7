#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace steerkit {

/// Append-only record log, one self-describing JSON object per line.
/// Every record carries a run id and a kind; a (run_id, kind, key) triple is
/// written at most once and records are immutable after the append.
class ResultStore {
 public:
  explicit ResultStore(std::filesystem::path path);

  /// Appends and flushes one record. `key` disambiguates multiple records of
  /// the same kind within a run (e.g. one per concept); leave empty otherwise.
  void append(const std::string& run_id, const std::string& kind,
              nlohmann::json payload, const std::string& key = "");

  bool has(const std::string& run_id, const std::string& kind,
           const std::string& key = "") const;

  /// All records, in append order.
  const std::vector<nlohmann::json>& records() const { return records_; }

  std::vector<nlohmann::json> find(const std::string& run_id,
                                   const std::string& kind) const;
  nlohmann::json get(const std::string& run_id, const std::string& kind,
                     const std::string& key = "") const;

  const std::filesystem::path& path() const { return path_; }

  /// Rewrites the file keeping only records for which keep() is true.
  /// Used by forced stage re-runs to retire their previous records before
  /// appending fresh ones.
  static void compact(const std::filesystem::path& path,
                      const std::function<bool(const nlohmann::json&)>& keep);

 private:
  std::filesystem::path path_;
  std::vector<nlohmann::json> records_;
};

}  // namespace steerkit
