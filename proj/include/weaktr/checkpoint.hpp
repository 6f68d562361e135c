#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "weaktr/io.hpp"
#include "weaktr/tensor.hpp"

namespace weaktr {

/// Writes named parameters as WTT1 tensors plus a manifest.json holding the
/// name→file map and caller metadata. The directory is staged under a
/// temporary name and atomically renamed into place.
inline void save_checkpoint(const std::string& dir, const std::vector<Parameter*>& params,
                            const nlohmann::json& meta) {
  namespace fs = std::filesystem;
  const fs::path target(dir);
  const fs::path tmp = target.parent_path().empty() ? fs::path(dir + ".tmp") : target.parent_path() / (target.filename().string() + ".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  nlohmann::json manifest;
  manifest["meta"] = meta;
  nlohmann::json tensors = nlohmann::json::object();
  for (const Parameter* p : params) {
    const std::string file = p->name + ".wtt";
    write_wtt((tmp / file).string(), p->value);
    tensors[p->name] = file;
  }
  manifest["tensors"] = tensors;
  write_text_file((tmp / "manifest.json").string(), manifest.dump(2) + "\n");
  fs::remove_all(target);
  fs::rename(tmp, target);
}

inline nlohmann::json load_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  return nlohmann::json::parse(read_text_file((fs::path(dir) / "manifest.json").string()));
}

/// Loads tensors by name into existing parameters; shapes must match.
inline void load_checkpoint(const std::string& dir, const std::vector<Parameter*>& params) {
  namespace fs = std::filesystem;
  const nlohmann::json manifest = load_manifest(dir);
  const nlohmann::json& tensors = manifest.at("tensors");
  for (Parameter* p : params) {
    if (!tensors.contains(p->name)) {
      throw std::runtime_error("load_checkpoint: missing tensor '" + p->name + "' in " + dir);
    }
    Tensor t = read_wtt((fs::path(dir) / tensors.at(p->name).get<std::string>()).string());
    if (t.shape != p->value.shape) {
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + p->name + "': checkpoint " +
                               shape_str(t.shape) + " vs model " + shape_str(p->value.shape));
    }
    *p->value.data = *t.data;
  }
}

}  // namespace weaktr
