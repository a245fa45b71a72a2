#include "quicknat/remap.hpp"

#include <sstream>

#include "quicknat/fileio.hpp"
#include "quicknat/log.hpp"

#ifndef QUICKNAT_DATA_DIR
#define QUICKNAT_DATA_DIR "data"
#endif

namespace quicknat {

std::string_view to_string(LabelScheme scheme) {
  switch (scheme) {
    case LabelScheme::quicknat: return "quicknat";
    case LabelScheme::freesurfer: return "freesurfer";
    case LabelScheme::manual: return "manual";
  }
  return "unknown";
}

LabelScheme parse_scheme(std::string_view name) {
  if (name == "quicknat") return LabelScheme::quicknat;
  if (name == "freesurfer") return LabelScheme::freesurfer;
  if (name == "manual") return LabelScheme::manual;
  throw DataError("unknown label scheme '" + std::string(name) + "' (quicknat, freesurfer or manual)");
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::int32_t parse_id(const std::string& s, const std::filesystem::path& path, const std::string& line) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size() || v < 0) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("remap table " + path.string() + ": bad id '" + s + "' in line '" + line + "'");
  }
}

void insert_unique(std::map<std::int32_t, std::int32_t>& m, std::int32_t source, std::int32_t target,
                   const std::filesystem::path& path, const char* column) {
  if (!m.emplace(source, target).second) {
    throw DataError("remap table " + path.string() + ": " + column + " id " + std::to_string(source) +
                    " is listed twice");
  }
}

}  // namespace

RemapTable RemapTable::load(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw DataError("remap table " + path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "structure,quicknat,freesurfer,manual") {
    throw DataError("remap table " + path.string() + ": header must be 'structure,quicknat,freesurfer,manual'");
  }
  RemapTable t;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv(line);
    if (f.size() != 4) throw DataError("remap table " + path.string() + ": expected 4 fields in '" + line + "'");
    const std::int32_t q = parse_id(f[1], path, line);
    if (q == 0) throw DataError("remap table " + path.string() + ": QuickNAT id 0 is reserved for background");
    if (!t.structures.emplace(q, f[0]).second) {
      throw DataError("remap table " + path.string() + ": QuickNAT id " + f[1] + " is listed twice");
    }
    insert_unique(t.freesurfer, parse_id(f[2], path, line), q, path, "freesurfer");
    insert_unique(t.manual, parse_id(f[3], path, line), q, path, "manual");
  }
  if (t.structures.empty()) throw DataError("remap table " + path.string() + " has no rows");
  return t;
}

RemapTable RemapTable::builtin() { return load(std::filesystem::path(QUICKNAT_DATA_DIR) / "label_remap.csv"); }

RemapTable RemapTable::identity() {
  RemapTable t;
  for (std::int32_t q = 1; q < 28; ++q) {
    t.structures[q] = "label_" + std::to_string(q);
    t.freesurfer[q] = q;
    t.manual[q] = q;
  }
  return t;
}

std::string RemapTable::name_of(std::int32_t quicknat_id) const {
  if (quicknat_id == 0) return "Background";
  const auto it = structures.find(quicknat_id);
  return it != structures.end() ? it->second : "label_" + std::to_string(quicknat_id);
}

std::int32_t collapse_manual_cortex(std::int32_t id) {
  if (id <= 100) return id;
  return id % 2 == 0 ? 210 : 211;
}

RemapResult remap_labels(const LabelVolume& labels, const RemapTable& table, LabelScheme scheme) {
  RemapResult out{labels, 0, {}};
  if (scheme == LabelScheme::quicknat) {
    for (Index i = 0; i < labels.size(); ++i) {
      const std::int32_t l = labels.voxels[i];
      if (l != 0 && !table.structures.contains(l)) {
        out.labels.voxels[i] = 0;
        ++out.unmapped_voxels;
        ++out.unmapped_ids[l];
      }
    }
  } else {
    const auto& map = scheme == LabelScheme::freesurfer ? table.freesurfer : table.manual;
    for (Index i = 0; i < labels.size(); ++i) {
      std::int32_t l = labels.voxels[i];
      if (scheme == LabelScheme::manual) l = collapse_manual_cortex(l);
      if (l == 0) {
        out.labels.voxels[i] = 0;
        continue;
      }
      const auto it = map.find(l);
      if (it != map.end()) {
        out.labels.voxels[i] = it->second;
      } else {
        out.labels.voxels[i] = 0;
        ++out.unmapped_voxels;
        ++out.unmapped_ids[labels.voxels[i]];
      }
    }
  }
  if (out.unmapped_voxels > 0) {
    std::ostringstream msg;
    msg << "remap_labels(" << to_string(scheme) << "): " << out.unmapped_voxels << " voxels with "
        << out.unmapped_ids.size() << " unlisted ids mapped to background";
    log_warning(msg.str());
  }
  return out;
}

}  // namespace quicknat
