#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bandvq/error.hpp"
#include "bandvq/signal.hpp"

namespace bandvq::data {

/// One trial of a dataset: an EEGB file plus its label and subject.
struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  std::string subject;
  std::size_t label = 0;
  std::string task;
  std::string phase;
  std::string reference;

  bool operator==(const ManifestEntry&) const = default;
};

inline nlohmann::json to_json(const ManifestEntry& e) {
  return {{"path", e.path},   {"subject", e.subject}, {"label", e.label},
          {"task", e.task},   {"phase", e.phase},     {"reference", e.reference}};
}

inline ManifestEntry entry_from_json(const nlohmann::json& j, const std::string& where) {
  static const std::vector<std::string> keys{"path", "subject", "label", "task", "phase", "reference"};
  if (!j.is_object()) throw FormatError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw FormatError(where + ": unknown key '" + k + "'");
  ManifestEntry e;
  try {
    e.path = j.at("path").get<std::string>();
    e.subject = j.at("subject").get<std::string>();
    e.label = j.at("label").get<std::size_t>();
    e.task = j.value("task", "");
    e.phase = j.value("phase", "");
    e.reference = j.value("reference", "");
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(where + ": " + ex.what());
  }
  if (e.path.empty() || e.subject.empty()) throw FormatError(where + ": path and subject must be non-empty");
  return e;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& e : entries) out << to_json(e).dump() << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInputError("manifest not found: " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw FormatError(where + ": " + ex.what());
    }
    out.push_back(entry_from_json(j, where));
  }
  return out;
}

}  // namespace bandvq::data
