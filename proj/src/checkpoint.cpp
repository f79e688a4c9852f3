#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmfsod/harness.hpp"

namespace mmfsod {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'M', 'F', 'S', 'O', 'D', 'C', 'K'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ParseError("checkpoint: truncated header");
  T v;
  std::memcpy(&v, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

const Matrix* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

std::string Checkpoint::serialize() const {
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    entries.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size());
  }
  const json manifest{{"tensors", entries}, {"config", config}, {"step", step}, {"vocab_size", vocab_size}};
  const std::string text = manifest.dump();
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, m] : tensors)
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  return out;
}

Checkpoint Checkpoint::deserialize(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ParseError("checkpoint: bad magic");
  std::size_t pos = sizeof(kMagic);
  const auto version = take<std::uint32_t>(bytes, pos);
  if (version != kVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  const auto length = take<std::uint64_t>(bytes, pos);
  if (pos + length > bytes.size()) throw ParseError("checkpoint: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(pos, length));
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what());
  }
  pos += length;
  Checkpoint ck;
  try {
    ck.config = manifest.at("config");
    ck.step = manifest.at("step").get<std::uint64_t>();
    ck.vocab_size = manifest.at("vocab_size").get<int>();
    const std::size_t data_start = pos;
    const std::size_t available = (bytes.size() - data_start) / sizeof(double);
    std::size_t used = 0;
    for (const auto& e : manifest.at("tensors")) {
      const auto rows = e.at("rows").get<Eigen::Index>(), cols = e.at("cols").get<Eigen::Index>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = static_cast<std::size_t>(rows * cols);
      if (rows < 0 || cols < 0 || offset + count > available) throw ParseError("checkpoint: tensor data out of range");
      Matrix m(rows, cols);
      std::memcpy(m.data(), bytes.data() + data_start + offset * sizeof(double), count * sizeof(double));
      ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(m));
      used = std::max(used, offset + count);
    }
    if (data_start + used * sizeof(double) != bytes.size()) throw ParseError("checkpoint: trailing bytes");
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what());
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

Checkpoint snapshot(MultiModalDetector& model, const RunConfig& config, std::uint64_t step, int vocab_size) {
  Checkpoint ck;
  for (const auto& p : model.parameters()) ck.tensors.emplace_back(p.name, *p.value);
  ck.config = config.to_json();
  ck.step = step;
  ck.vocab_size = vocab_size;
  return ck;
}

void restore(MultiModalDetector& model, const Checkpoint& checkpoint) {
  for (auto& p : model.parameters()) {
    const Matrix* m = checkpoint.find(p.name);
    if (!m) throw ValidationError("checkpoint has no tensor '" + p.name + "'");
    if (m->rows() != p.value->rows() || m->cols() != p.value->cols())
      throw ValidationError("checkpoint tensor '" + p.name + "' is " + shape_str(*m) + ", model expects " +
                            shape_str(*p.value));
    *p.value = *m;
  }
}

}  // namespace mmfsod
