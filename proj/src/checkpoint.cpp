#include "ookd/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "ookd/common.hpp"

namespace ookd::ckpt {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'O', 'O', 'K', 'D', 'C', 'K', 'P', '1'};
}

void save_checkpoint(const std::string& path, const std::vector<nn::Parameter*>& params,
                     const json& meta) {
  json manifest = json::array();
  for (const nn::Parameter* p : params) {
    manifest.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  }
  json header = {{"schema_version", kSchemaVersion}, {"meta", meta}, {"params", manifest}};
  std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_checkpoint: cannot open " + path);
  f.write(kMagic, sizeof(kMagic));
  uint64_t hlen = htext.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const nn::Parameter* p : params) {
    f.write(reinterpret_cast<const char*>(p->value.data()),
            static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
  }
  if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

namespace {

json read_header(std::ifstream& f, const std::string& path) {
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IoError("checkpoint: bad magic in " + path);
  }
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!f || hlen > (1ull << 30)) throw IoError("checkpoint: bad header length in " + path);
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw IoError("checkpoint: truncated header in " + path);
  json header = json::parse(htext);
  if (header.at("schema_version").get<int>() != kSchemaVersion) {
    throw ValidationError("checkpoint: unsupported schema version in " + path);
  }
  return header;
}

}  // namespace

json load_checkpoint(const std::string& path, const std::vector<nn::Parameter*>& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  json header = read_header(f, path);
  const json& manifest = header.at("params");
  if (manifest.size() != params.size()) {
    throw ValidationError("load_checkpoint: parameter count mismatch in " + path + " (" +
                          std::to_string(manifest.size()) + " stored vs " +
                          std::to_string(params.size()) + " expected)");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const json& m = manifest[i];
    if (m.at("name").get<std::string>() != params[i]->name ||
        m.at("shape").get<std::vector<int>>() != params[i]->value.shape()) {
      throw ValidationError("load_checkpoint: parameter " + std::to_string(i) +
                            " mismatch: stored " + m.dump() + " vs expected " +
                            params[i]->name);
    }
  }
  for (nn::Parameter* p : params) {
    f.read(reinterpret_cast<char*>(p->value.data()),
           static_cast<std::streamsize>(p->value.numel() * sizeof(double)));
  }
  if (!f) throw IoError("load_checkpoint: truncated data in " + path);
  return header.at("meta");
}

json peek_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("peek_checkpoint: cannot open " + path);
  return read_header(f, path).at("meta");
}

uint64_t checkpoint_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint_hash: cannot open " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
  }
  return h;
}

}  // namespace ookd::ckpt
