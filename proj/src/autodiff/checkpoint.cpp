#include "stacklab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace stacklab {

namespace {

constexpr const char* kMagic = "stacklab-tensors";
constexpr int kVersion = 1;

void put_le32(std::string& out, float value) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

float get_le32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw std::runtime_error("write failed: " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw std::runtime_error("cannot move into place: " + path.string());
  }
}

void write_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ostringstream manifest;
  manifest << kMagic << ' ' << kVersion << '\n' << "count " << tensors.size() << '\n';
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
      throw std::invalid_argument("tensor name must be non-empty without whitespace: '" + name +
                                  "'");
    }
    manifest << name << ' ' << t.rows() << ' ' << t.cols() << ' ' << offset << '\n';
    offset += t.size();
  }
  manifest << "data\n";
  std::string blob = manifest.str();
  blob.reserve(blob.size() + offset * 4);
  for (const auto& [name, t] : tensors) {
    for (float v : t.data) put_le32(blob, v);
  }
  write_file_atomic(path, blob);
}

std::vector<NamedTensor> read_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::string magic;
  int version = 0;
  std::string line;
  std::getline(in, line);
  std::istringstream(line) >> magic >> version;
  if (magic != kMagic || version != kVersion) {
    throw std::runtime_error("not a tensor container: " + path.string());
  }
  std::getline(in, line);
  std::string key;
  std::size_t count = 0;
  std::istringstream(line) >> key >> count;
  if (key != "count") throw std::runtime_error("malformed manifest in " + path.string());

  struct Entry {
    std::string name;
    std::size_t rows, cols, offset;
  };
  std::vector<Entry> entries;
  std::size_t total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error("truncated manifest: " + path.string());
    Entry e;
    std::istringstream fields(line);
    if (!(fields >> e.name >> e.rows >> e.cols >> e.offset)) {
      throw std::runtime_error("malformed manifest record '" + line + "'");
    }
    total = std::max(total, e.offset + e.rows * e.cols);
    entries.push_back(e);
  }
  if (!std::getline(in, line) || line != "data") {
    throw std::runtime_error("missing data marker in " + path.string());
  }
  std::vector<unsigned char> blob(total * 4);
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (static_cast<std::size_t>(in.gcount()) != blob.size()) {
    throw std::runtime_error("truncated tensor blob in " + path.string());
  }
  std::vector<NamedTensor> out;
  for (const auto& e : entries) {
    Tensor t(e.rows, e.cols);
    for (std::size_t k = 0; k < t.size(); ++k) t.data[k] = get_le32(&blob[(e.offset + k) * 4]);
    out.push_back({e.name, std::move(t)});
  }
  return out;
}

}  // namespace stacklab
