#include "mmfsod/backends.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <regex>

namespace mmfsod {

namespace {

constexpr std::uint64_t kQueryStream = 0x51;
constexpr std::uint64_t kTokenSeed = 0x70c3e2a1ULL;

std::map<std::string, BackendFactory>& registry() {
  static std::map<std::string, BackendFactory> r;
  return r;
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

void check_box(const Box& b) {
  const bool ok = b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 1.0 && b.y1 <= 1.0 && b.x0 < b.x1 && b.y0 < b.y1;
  if (!ok)
    throw std::invalid_argument("invalid box (" + std::to_string(b.x0) + ", " + std::to_string(b.y0) + ", " +
                                std::to_string(b.x1) + ", " + std::to_string(b.y1) + ")");
}

std::vector<int> covered_positions(int height, int width, const Box& box) {
  std::vector<int> cells;
  for (int r = 0; r < height; ++r) {
    const double cy = (r + 0.5) / height;
    if (cy < box.y0 || cy > box.y1) continue;
    for (int c = 0; c < width; ++c) {
      const double cx = (c + 0.5) / width;
      if (cx >= box.x0 && cx <= box.x1) cells.push_back(r * width + c);
    }
  }
  if (cells.empty()) {
    const int r = std::min(height - 1, static_cast<int>(box.center_y() * height));
    const int c = std::min(width - 1, static_cast<int>(box.center_x() * width));
    cells.push_back(r * width + c);
  }
  return cells;
}

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

QueryFeatureMap::QueryFeatureMap(int height, int width, Matrix values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (height <= 0 || width <= 0) throw std::invalid_argument("QueryFeatureMap: H and W must be positive");
  require_shape(values_.rows() == static_cast<Eigen::Index>(height) * width && values_.cols() > 0,
                "QueryFeatureMap: values " + shape_str(values_) + " do not match H*W=" + std::to_string(height * width));
  if (!values_.allFinite()) throw std::invalid_argument("QueryFeatureMap: non-finite values");
}

QueryFeatureMap SyntheticBackend::extract_query_features(const ImageRef& image, int height, int width,
                                                         int dim) const {
  if (height <= 0 || width <= 0 || dim <= 0)
    throw std::invalid_argument("extract_query_features: H, W and d must be positive");
  if (image.tensor_path) {
    int h = 0, w = 0;
    Matrix values = load_npy_features(*image.tensor_path, h, w);
    if (h != height || w != width || values.cols() != dim)
      throw ShapeError("extract_query_features: " + image.tensor_path->string() + " has shape (" + std::to_string(h) +
                       ", " + std::to_string(w) + ", " + std::to_string(values.cols()) + ")");
    return QueryFeatureMap(height, width, std::move(values));
  }
  // Mix the shape into the stream so differently-shaped requests are unrelated draws.
  const std::uint64_t stream = hashrng::combine(kQueryStream, static_cast<std::uint64_t>(height) << 32 | width,
                                                static_cast<std::uint64_t>(dim));
  return QueryFeatureMap(height, width, hashrng::normal_matrix(image.seed, stream, height * width, dim));
}

RowVector SyntheticBackend::token_vector(int id, int dim) {
  RowVector v(dim);
  for (int c = 0; c < dim; ++c)
    v(c) = hashrng::normal(kTokenSeed, static_cast<std::uint64_t>(id), static_cast<std::uint64_t>(c));
  return v;
}

Matrix SyntheticBackend::token_table(int vocab_size, int dim) {
  Matrix t(vocab_size, dim);
  for (int id = 0; id < vocab_size; ++id) t.row(id) = token_vector(id, dim);
  return t;
}

TokenEmbeddingSequence SyntheticBackend::embed_tokens(const TokenSequence& seq, int vocab_size, int dim) const {
  if (dim <= 0) throw std::invalid_argument("embed_tokens: d must be positive");
  const auto m = static_cast<int>(seq.length());
  const Matrix pos = sinusoidal_table(m, dim % 2 == 0 ? dim : dim + 1).leftCols(dim);
  Matrix out(m, dim);
  for (int j = 0; j < m; ++j) {
    const int id = seq.ids[static_cast<std::size_t>(j)];
    if (id < 0 || id >= vocab_size)
      throw std::out_of_range("embed_tokens: id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab_size));
    out.row(j) = token_vector(id, dim) + pos.row(j);
  }
  return TokenEmbeddingSequence{std::move(out)};
}

void register_external_backend(const std::string& name, BackendFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(factory);
}

void unregister_external_backend(const std::string& name) {
  std::lock_guard lock(registry_mutex());
  registry().erase(name);
}

std::unique_ptr<FeatureBackend> make_backend(std::string_view selection) {
  if (selection == "synthetic") return std::make_unique<SyntheticBackend>();
  constexpr std::string_view prefix = "external:";
  if (selection.substr(0, prefix.size()) != prefix)
    throw BackendError("unknown backend selection '" + std::string(selection) + "'");
  const std::string name(selection.substr(prefix.size()));
  BackendFactory factory;
  {
    std::lock_guard lock(registry_mutex());
    auto it = registry().find(name);
    if (it == registry().end()) throw BackendError("external backend '" + name + "' is not available");
    factory = it->second;
  }
  auto backend = factory();
  if (!backend) throw BackendError("external backend '" + name + "' failed to initialize");
  return backend;
}

RowVector roi_align_weights(int height, int width, const Box& box, int out_h, int out_w) {
  check_box(box);
  if (box.area() < 1e-6) throw std::invalid_argument("roi_align_pool: degenerate box (area below 1e-6)");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("roi_align_pool: out_size must be at least (1, 1)");
  RowVector w = RowVector::Zero(static_cast<Eigen::Index>(height) * width);
  const double share = 1.0 / (static_cast<double>(out_h) * out_w);
  for (int i = 0; i < out_h; ++i) {
    const double y = box.y0 + (i + 0.5) / out_h * box.height();
    const double gy = std::clamp(y * height - 0.5, 0.0, height - 1.0);
    const int r0 = static_cast<int>(std::floor(gy));
    const int r1 = std::min(r0 + 1, height - 1);
    const double fy = gy - r0;
    for (int j = 0; j < out_w; ++j) {
      const double x = box.x0 + (j + 0.5) / out_w * box.width();
      const double gx = std::clamp(x * width - 0.5, 0.0, width - 1.0);
      const int c0 = static_cast<int>(std::floor(gx));
      const int c1 = std::min(c0 + 1, width - 1);
      const double fx = gx - c0;
      w(r0 * width + c0) += share * (1 - fy) * (1 - fx);
      w(r0 * width + c1) += share * (1 - fy) * fx;
      w(r1 * width + c0) += share * fy * (1 - fx);
      w(r1 * width + c1) += share * fy * fx;
    }
  }
  return w;
}

InstanceFeature roi_align_pool(const QueryFeatureMap& fm, const Box& box, int out_h, int out_w) {
  const RowVector w = roi_align_weights(fm.height(), fm.width(), box, out_h, out_w);
  return InstanceFeature{w * fm.values(), box};
}

namespace {

void write_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

}  // namespace

Matrix load_npy_features(const std::filesystem::path& path, int& height, int& width) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("npy: cannot open " + path.string());
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw ParseError("npy: bad magic in " + path.string());
  unsigned char ver[2];
  in.read(reinterpret_cast<char*>(ver), 2);
  std::uint32_t header_len = 0;
  if (ver[0] == 1) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    header_len = b[0] | (b[1] << 8);
  } else {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    header_len = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (!in) throw ParseError("npy: truncated header in " + path.string());

  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('descr'\s*:\s*'([<|>]f[48])')")))
    throw ParseError("npy: unsupported dtype in " + path.string());
  const std::string descr = m[1];
  if (descr[0] == '>') throw ParseError("npy: big-endian data not supported");
  const bool f64 = descr[2] == '8';
  if (std::regex_search(header, std::regex(R"('fortran_order'\s*:\s*True)")))
    throw ParseError("npy: fortran order not supported");
  if (!std::regex_search(header, m, std::regex(R"('shape'\s*:\s*\(\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,?\s*\))")))
    throw ParseError("npy: expected a 3-d shape (H, W, d) in " + path.string());
  height = std::stoi(m[1]);
  width = std::stoi(m[2]);
  const int dim = std::stoi(m[3]);
  Matrix values(static_cast<Eigen::Index>(height) * width, dim);
  const auto n = static_cast<std::size_t>(values.size());
  if (f64) {
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    std::vector<float> buf(n);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    for (std::size_t i = 0; i < n; ++i) values.data()[i] = buf[i];
  }
  if (!in) throw ParseError("npy: truncated data in " + path.string());
  return values;
}

void save_npy_features(const std::filesystem::path& path, int height, int width, const Matrix& values) {
  require_shape(values.rows() == static_cast<Eigen::Index>(height) * width, "save_npy_features: shape");
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + std::to_string(height) + ", " +
                       std::to_string(width) + ", " + std::to_string(values.cols()) + "), }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write("\x93NUMPY\x01\x00", 8);
  write_u16(out, static_cast<std::uint16_t>(header.size()));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
}

}  // namespace mmfsod
