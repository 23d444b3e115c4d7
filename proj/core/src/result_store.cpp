#include "steerkit/result_store.hpp"

#include <fstream>

#include "steerkit/errors.hpp"

namespace steerkit {

ResultStore::ResultStore(std::filesystem::path path) : path_(std::move(path)) {
  if (std::filesystem::exists(path_)) {
    std::ifstream in(path_);
    if (!in) throw IoError("cannot open result store '" + path_.string() + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
      if (rec.is_discarded() || !rec.is_object() || !rec.contains("run_id") ||
          !rec.contains("kind"))
        throw FormatError("result store '" + path_.string() + "' line " +
                          std::to_string(lineno) + ": bad record");
      records_.push_back(std::move(rec));
    }
  } else if (path_.has_parent_path()) {
    std::filesystem::create_directories(path_.parent_path());
  }
}

void ResultStore::append(const std::string& run_id, const std::string& kind,
                         nlohmann::json payload, const std::string& key) {
  if (has(run_id, kind, key))
    throw ValidationError("result store: record (" + run_id + ", " + kind +
                          ", " + key + ") already written");
  nlohmann::json rec = std::move(payload);
  rec["run_id"] = run_id;
  rec["kind"] = kind;
  if (!key.empty()) rec["key"] = key;

  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to '" + path_.string() + "'");
  out << rec.dump() << "\n";
  out.flush();
  if (!out) throw IoError("append failed for '" + path_.string() + "'");
  records_.push_back(std::move(rec));
}

bool ResultStore::has(const std::string& run_id, const std::string& kind,
                      const std::string& key) const {
  for (const auto& r : records_) {
    if (r.at("run_id") == run_id && r.at("kind") == kind &&
        r.value("key", "") == key)
      return true;
  }
  return false;
}

std::vector<nlohmann::json> ResultStore::find(const std::string& run_id,
                                              const std::string& kind) const {
  std::vector<nlohmann::json> out;
  for (const auto& r : records_)
    if (r.at("run_id") == run_id && r.at("kind") == kind) out.push_back(r);
  return out;
}

nlohmann::json ResultStore::get(const std::string& run_id,
                                const std::string& kind,
                                const std::string& key) const {
  for (const auto& r : records_)
    if (r.at("run_id") == run_id && r.at("kind") == kind &&
        r.value("key", "") == key)
      return r;
  throw ValidationError("result store: no record (" + run_id + ", " + kind +
                        ", " + key + ")");
}

void ResultStore::compact(const std::filesystem::path& path,
                          const std::function<bool(const nlohmann::json&)>& keep) {
  if (!std::filesystem::exists(path)) return;
  ResultStore store(path);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    for (const auto& r : store.records_)
      if (keep(r)) out << r.dump() << "\n";
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace steerkit
