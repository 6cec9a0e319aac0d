#include "reinseg/weights.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace fs = std::filesystem;

namespace reinseg {

void export_weight_manifest(const std::string& dir, const ParamStore& store) {
  fs::create_directories(dir);
  std::ofstream index(fs::path(dir) / "index.txt");
  if (!index) throw IoError("cannot write weight index under " + dir);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Param& p = store.at(i);
    std::string file = p.name + ".bin";
    index << p.name << " " << file << "\n";
    std::ofstream out(fs::path(dir) / file, std::ios::binary);
    if (!out) throw IoError("cannot write weight file " + file + " under " + dir);
    out << p.value.rows() << " " << p.value.cols() << "\n";
    // Row-major on disk; Eigen stores column-major, so transpose on the way out.
    std::vector<float> row_major(static_cast<std::size_t>(p.value.size()));
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) row_major[k++] = static_cast<float>(p.value(r, c));
    out.write(reinterpret_cast<const char*>(row_major.data()),
              static_cast<std::streamsize>(row_major.size() * sizeof(float)));
    if (!out) throw IoError("short write for weight file " + file);
  }
}

void import_weight_manifest(const std::string& dir, ParamStore& store) {
  std::ifstream index(fs::path(dir) / "index.txt");
  if (!index) throw IoError("cannot read weight index under " + dir);

  std::map<std::string, std::string> listed;
  std::string name, file;
  while (index >> name >> file) listed[name] = file;

  std::vector<std::string> missing;
  for (std::size_t i = 0; i < store.size(); ++i)
    if (!listed.count(store.at(i).name)) missing.push_back(store.at(i).name);
  if (!missing.empty()) {
    std::ostringstream msg;
    msg << "weight index is missing parameters:";
    for (const std::string& m : missing) msg << " " << m;
    throw ValidationError(msg.str());
  }
  for (const auto& [n, f] : listed)
    if (!store.contains(n)) throw ValidationError("weight index lists unknown parameter: " + n);

  for (std::size_t i = 0; i < store.size(); ++i) {
    Param& p = store.at(i);
    fs::path path = fs::path(dir) / listed.at(p.name);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read weight file " + path.string());
    long long rows = 0, cols = 0;
    std::string header;
    if (!std::getline(in, header)) throw IoError("missing shape header in " + path.string());
    std::istringstream hs(header);
    if (!(hs >> rows >> cols)) throw ValidationError("malformed shape header in " + path.string());
    if (rows != p.value.rows() || cols != p.value.cols()) {
      std::ostringstream msg;
      msg << "weight shape mismatch for " << p.name << ": file " << rows << "x" << cols
          << ", model " << p.value.rows() << "x" << p.value.cols();
      throw ValidationError(msg.str());
    }
    std::vector<float> row_major(static_cast<std::size_t>(rows * cols));
    in.read(reinterpret_cast<char*>(row_major.data()),
            static_cast<std::streamsize>(row_major.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(row_major.size() * sizeof(float)))
      throw IoError("weight file truncated: " + path.string());
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < p.value.rows(); ++r)
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = row_major[k++];
  }
}

}  // namespace reinseg
