#include "moerl/nn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "moerl/error.hpp"

namespace moerl::nn {

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

class Reader {
 public:
  Reader(const std::string& data, const std::filesystem::path& path) : data_(data), path_(path) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IoError("truncated checkpoint " + path_.string());
  }
  const std::string& data_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::string out(kCheckpointMagic);
  const std::string header = checkpoint.header.dump();
  put_u64(out, header.size());
  out += header;
  put_u64(out, checkpoint.blocks.size());
  for (const auto& b : checkpoint.blocks) {
    put_u64(out, static_cast<std::uint64_t>(b.size()));
    for (Eigen::Index i = 0; i < b.size(); ++i) put_f64(out, b(i));
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  if (data.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) {
    throw IoError(path.string() + " is not a checkpoint (bad magic)");
  }
  Reader r(data, path);
  r.bytes(kCheckpointMagic.size());
  Checkpoint ck;
  const auto header_len = r.u64();
  try {
    ck.header = nlohmann::json::parse(r.bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
  const auto blocks = r.u64();
  for (std::uint64_t b = 0; b < blocks; ++b) {
    const auto n = r.u64();
    Vector v(static_cast<Eigen::Index>(n));
    for (std::uint64_t i = 0; i < n; ++i) v(static_cast<Eigen::Index>(i)) = r.f64();
    ck.blocks.push_back(std::move(v));
  }
  if (!r.done()) throw IoError("trailing bytes in checkpoint " + path.string());
  return ck;
}

void save_matrix(const std::filesystem::path& path, const Matrix& m, nlohmann::json header) {
  header["rows"] = m.rows();
  header["cols"] = m.cols();
  Checkpoint ck{std::move(header), {Eigen::Map<const Vector>(m.data(), m.size())}};
  save_checkpoint(path, ck);
}

Matrix load_matrix(const std::filesystem::path& path, nlohmann::json* header) {
  auto ck = load_checkpoint(path);
  if (ck.blocks.size() != 1) throw IoError(path.string() + " is not a matrix file");
  const auto rows = ck.header.at("rows").get<Eigen::Index>();
  const auto cols = ck.header.at("cols").get<Eigen::Index>();
  if (rows * cols != ck.blocks[0].size()) throw IoError(path.string() + " has inconsistent matrix size");
  Matrix m = Eigen::Map<const Matrix>(ck.blocks[0].data(), rows, cols);
  if (header != nullptr) *header = std::move(ck.header);
  return m;
}

}  // namespace moerl::nn
