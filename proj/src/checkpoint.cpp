#include "reinseg/checkpoint.hpp"

#include "reinseg/digest.hpp"

#include <cstdint>
#include <fstream>
#include <sstream>
#include <vector>

namespace reinseg {
namespace {

constexpr const char* kMagic = "REINSEG-CKPT v1";

struct ManifestEntry {
  std::string group;
  std::string name;
  long long rows = 0;
  long long cols = 0;
  bool trainable = false;
  bool decay = false;
};

// Manifest order is fixed: backbone store, adapter store, head store, each
// in insertion order. Loading walks the same order, which is what makes the
// round trip bitwise.
std::vector<std::pair<std::string, ParamStore*>> stores_of(SegModel& model) {
  std::vector<std::pair<std::string, ParamStore*>> out;
  out.emplace_back("backbone", &model.backbone().params());
  if (model.has_adapter()) out.emplace_back("rein", &model.adapter().params());
  out.emplace_back("head", &model.head().params());
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

ManifestEntry parse_manifest_line(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    auto bar = line.find('|', start);
    fields.push_back(line.substr(start, bar == std::string::npos ? bar : bar - start));
    if (bar == std::string::npos) break;
    start = bar + 1;
  }
  if (fields.size() != 6) throw ValidationError("malformed checkpoint manifest line: " + line);
  ManifestEntry e;
  e.group = fields[0];
  e.name = fields[1];
  e.rows = std::stoll(fields[2]);
  e.cols = std::stoll(fields[3]);
  e.trainable = fields[4] == "1";
  e.decay = fields[5] == "1";
  return e;
}

}  // namespace

void save_checkpoint(const std::string& path, SegModel& model, const RunConfig& cfg,
                     int iteration) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);

  std::string frozen = "none";
  if (model.config().backbone_frozen) frozen = digest_hex(model.backbone().params().digest());

  out << kMagic << "\n";
  out << "iteration = " << iteration << "\n";
  out << "frozen_digest = " << frozen << "\n";
  out << "config_begin\n" << cfg.serialize() << "config_end\n";
  out << "manifest_begin\n";
  for (auto& [group, store] : stores_of(model)) {
    for (std::size_t i = 0; i < store->size(); ++i) {
      const Param& p = store->at(i);
      out << "param = " << group << "|" << p.name << "|" << p.value.rows() << "|"
          << p.value.cols() << "|" << (p.trainable ? 1 : 0) << "|" << (p.decay ? 1 : 0) << "\n";
    }
  }
  out << "manifest_end\n";
  out << "blob_begin\n";
  for (auto& [group, store] : stores_of(model)) {
    for (std::size_t i = 0; i < store->size(); ++i) {
      const Param& p = store->at(i);
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    }
  }
  if (!out) throw IoError("short write while saving checkpoint: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);

  std::string line;
  if (!std::getline(in, line) || trim(line) != kMagic)
    throw IoError("not a checkpoint file (bad magic): " + path);

  CheckpointMeta meta;
  std::ostringstream config_text;
  std::vector<ManifestEntry> manifest;
  enum class Section { header, config, manifest } section = Section::header;
  bool saw_blob = false;

  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (section == Section::header) {
      if (t == "config_begin") {
        section = Section::config;
      } else if (t == "manifest_begin") {
        section = Section::manifest;
      } else if (t == "blob_begin") {
        saw_blob = true;
        break;
      } else if (t.rfind("iteration =", 0) == 0) {
        meta.iteration = std::stoi(trim(t.substr(11)));
      } else if (t.rfind("frozen_digest =", 0) == 0) {
        meta.frozen_digest_hex = trim(t.substr(15));
      } else if (!t.empty()) {
        throw ValidationError("unexpected checkpoint header line: " + t);
      }
    } else if (section == Section::config) {
      if (t == "config_end")
        section = Section::header;
      else
        config_text << line << "\n";
    } else {
      if (t == "manifest_end")
        section = Section::header;
      else if (t.rfind("param = ", 0) == 0)
        manifest.push_back(parse_manifest_line(t.substr(8)));
      else if (!t.empty())
        throw ValidationError("unexpected checkpoint manifest line: " + t);
    }
  }
  if (!saw_blob) throw ValidationError("checkpoint has no parameter blob: " + path);

  meta.config = RunConfig::deserialize(config_text.str());
  LoadedCheckpoint result;
  result.model = std::make_unique<SegModel>(SegModel::build(meta.config.model()));
  result.meta = meta;

  auto stores = stores_of(*result.model);
  std::size_t entry = 0;
  for (auto& [group, store] : stores) {
    for (std::size_t i = 0; i < store->size(); ++i, ++entry) {
      Param& p = store->at(i);
      if (entry >= manifest.size())
        throw ValidationError("checkpoint manifest is shorter than the model parameter list");
      const ManifestEntry& e = manifest[entry];
      if (e.group != group || e.name != p.name || e.rows != p.value.rows() ||
          e.cols != p.value.cols()) {
        std::ostringstream msg;
        msg << "checkpoint manifest mismatch at entry " << entry << ": file has " << e.group << "/"
            << e.name << " " << e.rows << "x" << e.cols << ", model expects " << group << "/"
            << p.name << " " << p.value.rows() << "x" << p.value.cols();
        throw ValidationError(msg.str());
      }
      in.read(reinterpret_cast<char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
      if (in.gcount() != static_cast<std::streamsize>(p.value.size() * sizeof(double)))
        throw IoError("checkpoint blob truncated at parameter " + p.name);
    }
  }
  if (entry != manifest.size())
    throw ValidationError("checkpoint manifest is longer than the model parameter list");
  char extra;
  if (in.read(&extra, 1))
    throw IoError("trailing bytes after checkpoint blob: " + path);

  if (meta.frozen_digest_hex != "none") {
    std::string now = digest_hex(result.model->backbone().params().digest());
    if (now != meta.frozen_digest_hex)
      throw ValidationError("frozen backbone content does not match its recorded digest (" + now +
                            " vs " + meta.frozen_digest_hex + ")");
  }
  return result;
}

}  // namespace reinseg
