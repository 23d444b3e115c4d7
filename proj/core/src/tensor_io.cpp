#include "steerkit/tensor_io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <utility>

#include "steerkit/errors.hpp"

namespace steerkit {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'K', 'T', 'N', 'S', 'R', '\0'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const char* data, std::size_t size) : data_(data), size_(size) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(std::uint8_t(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= std::uint64_t(std::uint8_t(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > size_) throw FormatError("tensor container: truncated file");
  }

  const char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

}  // namespace

void TensorContainer::add(const std::string& name, Tensor tensor) {
  if (has(name))
    throw ValidationError("tensor container: duplicate name '" + name + "'");
  if (tensor.element_count() != tensor.values.size())
    throw ValidationError("tensor '" + name +
                          "': shape product does not match value count");
  order_.push_back(name);
  tensors_.push_back(std::move(tensor));
}

void TensorContainer::add_scalar(const std::string& name, double value) {
  add(name, Tensor{{}, {value}});
}

void TensorContainer::add_vector(const std::string& name,
                                 const Eigen::VectorXd& v) {
  Tensor t;
  t.shape = {static_cast<std::size_t>(v.size())};
  t.values.assign(v.data(), v.data() + v.size());
  add(name, std::move(t));
}

void TensorContainer::add_matrix(const std::string& name,
                                 const Eigen::MatrixXd& m) {
  Tensor t;
  t.shape = {static_cast<std::size_t>(m.rows()),
             static_cast<std::size_t>(m.cols())};
  t.values.reserve(m.size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.values.push_back(m(r, c));
  add(name, std::move(t));
}

bool TensorContainer::has(const std::string& name) const {
  return std::find(order_.begin(), order_.end(), name) != order_.end();
}

const Tensor& TensorContainer::get(const std::string& name) const {
  auto it = std::find(order_.begin(), order_.end(), name);
  if (it == order_.end())
    throw ValidationError("tensor container: no tensor named '" + name + "'");
  return tensors_[static_cast<std::size_t>(it - order_.begin())];
}

double TensorContainer::get_scalar(const std::string& name) const {
  const Tensor& t = get(name);
  if (t.values.size() != 1)
    throw ValidationError("tensor '" + name + "' is not a scalar");
  return t.values[0];
}

Eigen::VectorXd TensorContainer::get_vector(const std::string& name) const {
  const Tensor& t = get(name);
  if (t.shape.size() != 1)
    throw ValidationError("tensor '" + name + "' is not rank 1");
  return Eigen::Map<const Eigen::VectorXd>(t.values.data(),
                                           Eigen::Index(t.values.size()));
}

Eigen::MatrixXd TensorContainer::get_matrix(const std::string& name) const {
  const Tensor& t = get(name);
  if (t.shape.size() != 2)
    throw ValidationError("tensor '" + name + "' is not rank 2");
  const auto rows = Eigen::Index(t.shape[0]);
  const auto cols = Eigen::Index(t.shape[1]);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      m(r, c) = t.values[std::size_t(r * cols + c)];
  return m;
}

bool TensorContainer::operator==(const TensorContainer& other) const {
  if (order_ != other.order_) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].shape != other.tensors_[i].shape) return false;
    const auto& a = tensors_[i].values;
    const auto& b = other.tensors_[i].values;
    if (a.size() != b.size()) return false;
    // Bitwise comparison; NaN payloads and signed zeros must round-trip too.
    if (!a.empty() &&
        std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

void write_container(const std::filesystem::path& path,
                     const TensorContainer& tensors) {
  static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559);

  std::string header;
  header.append(kMagic, sizeof(kMagic));
  put_u32(header, kVersion);
  put_u32(header, std::uint32_t(tensors.size()));

  std::uint64_t offset = 0;
  for (const auto& name : tensors.names()) {
    const Tensor& t = tensors.get(name);
    put_u32(header, std::uint32_t(name.size()));
    header.append(name);
    put_u32(header, std::uint32_t(t.shape.size()));
    for (auto s : t.shape) put_u64(header, s);
    put_u64(header, offset);
    offset += std::uint64_t(t.values.size()) * sizeof(double);
  }
  put_u64(header, offset);  // total payload bytes

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(header.data(), std::streamsize(header.size()));
  for (const auto& name : tensors.names()) {
    const Tensor& t = tensors.get(name);
    out.write(reinterpret_cast<const char*>(t.values.data()),
              std::streamsize(t.values.size() * sizeof(double)));
  }
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

TensorContainer read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string blob((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  Reader r(blob.data(), blob.size());

  if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
    throw FormatError("tensor container: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError("tensor container: unknown version " +
                      std::to_string(version));

  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::uint64_t offset;
    std::uint64_t bytes;
  };
  const std::uint32_t count = r.u32();
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.bytes(r.u32());
    const std::uint32_t ndim = r.u32();
    std::uint64_t elems = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint64_t s = r.u64();
      e.shape.push_back(std::size_t(s));
      elems *= s;
    }
    e.offset = r.u64();
    e.bytes = elems * sizeof(double);
    entries.push_back(std::move(e));
  }
  const std::uint64_t payload_bytes = r.u64();
  const std::size_t payload_start = r.pos();
  if (r.remaining() != payload_bytes)
    throw FormatError("tensor container: payload size mismatch (descriptor " +
                      std::to_string(payload_bytes) + " bytes, file has " +
                      std::to_string(r.remaining()) + ")");

  // Offsets must be in bounds and non-overlapping.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& e : entries) {
    if (e.offset + e.bytes > payload_bytes)
      throw FormatError("tensor '" + e.name + "': payload out of bounds");
    spans.emplace_back(e.offset, e.offset + e.bytes);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second)
      throw FormatError("tensor container: overlapping payload offsets");

  TensorContainer out;
  for (const auto& e : entries) {
    Tensor t;
    t.shape = e.shape;
    t.values.resize(e.bytes / sizeof(double));
    if (e.bytes > 0)
      std::memcpy(t.values.data(), blob.data() + payload_start + e.offset,
                  e.bytes);
    out.add(e.name, std::move(t));
  }
  return out;
}

}  // namespace steerkit
