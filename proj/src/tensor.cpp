#include "afm/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "afm/errors.hpp"

static_assert(std::endian::native == std::endian::little, "dump format assumes a little-endian host");

namespace afm {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  if (data_.size() != numel(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
  }
}

template <typename T>
std::size_t Tensor<T>::flat_index(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index rank " + std::to_string(index.size()) + " does not match shape " + shape_str(shape_));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) flat = flat * shape_[axis++] + i;
  return flat;
}

template <typename T>
T& Tensor<T>::at(std::initializer_list<std::size_t> index) {
  return data_[flat_index(index)];
}

template <typename T>
const T& Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  return data_[flat_index(index)];
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape_));
  return data_[0];
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

std::size_t tensor_dump_bytes(const Shape& shape, Precision precision) {
  return 8 + 2 + 8 * shape.size() + numel(shape) * static_cast<std::size_t>(precision);
}

template <typename T>
void write_tensor_dump(std::ostream& out, const Tensor<T>& tensor) {
  if (tensor.rank() > 255) throw DimensionError("rank too large for dump format");
  out.write(kTensorDumpMagic, 8);
  const auto precision = static_cast<std::uint8_t>(precision_of<T>());
  const auto rank = static_cast<std::uint8_t>(tensor.rank());
  out.put(static_cast<char>(precision));
  out.put(static_cast<char>(rank));
  for (auto d : tensor.shape()) {
    const auto dim = static_cast<std::uint64_t>(d);
    out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  }
  out.write(reinterpret_cast<const char*>(tensor.ptr()), static_cast<std::streamsize>(tensor.size() * sizeof(T)));
}

template <typename T>
Tensor<T> read_tensor_dump(std::istream& in, const std::string& what) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kTensorDumpMagic, 8) != 0) {
    throw IntegrityError(what + ": bad tensor dump magic");
  }
  const int precision = in.get();
  const int rank = in.get();
  if (!in) throw IntegrityError(what + ": truncated tensor dump header");
  if (precision != static_cast<int>(precision_of<T>())) {
    throw IntegrityError(what + ": precision byte " + std::to_string(precision) + " does not match requested " +
                         std::to_string(static_cast<int>(precision_of<T>())));
  }
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) {
    std::uint64_t dim = 0;
    if (!in.read(reinterpret_cast<char*>(&dim), sizeof(dim))) throw IntegrityError(what + ": truncated shape");
    if (dim == 0) throw IntegrityError(what + ": zero dimension in dump");
    d = static_cast<std::size_t>(dim);
  }
  std::vector<T> values(numel(shape));
  const auto bytes = static_cast<std::streamsize>(values.size() * sizeof(T));
  if (!in.read(reinterpret_cast<char*>(values.data()), bytes) || in.gcount() != bytes) {
    throw IntegrityError(what + ": truncated payload, expected " + std::to_string(values.size()) + " values");
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  write_tensor_dump(out, tensor);
  if (!out) throw DataError("write failed: " + path);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError(what + ": cannot open " + path);
  auto tensor = read_tensor_dump<T>(in, what);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IntegrityError(what + ": trailing bytes after payload in " + path);
  }
  return tensor;
}

template class Tensor<float>;
template class Tensor<double>;
template void write_tensor_dump(std::ostream&, const Tensor<float>&);
template void write_tensor_dump(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor_dump(std::istream&, const std::string&);
template Tensor<double> read_tensor_dump(std::istream&, const std::string&);
template void save_tensor(const std::string&, const Tensor<float>&);
template void save_tensor(const std::string&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::string&, const std::string&);
template Tensor<double> load_tensor(const std::string&, const std::string&);

}  // namespace afm
