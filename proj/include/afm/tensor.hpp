#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace afm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// 64-byte aligned storage, so vectorized reductions split work the same way
// regardless of where the allocator placed a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

enum class Precision : std::uint8_t { kSingle = 4, kDouble = 8 };

template <typename T>
constexpr Precision precision_of();
template <>
constexpr Precision precision_of<float>() {
  return Precision::kSingle;
}
template <>
constexpr Precision precision_of<double>() {
  return Precision::kDouble;
}

// Dense row-major array. A default-constructed tensor is "absent": it has no
// shape and no storage, which is how missing gradients are represented.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool empty() const { return data_.empty(); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const T* ptr() const { return data_.data(); }
  T* ptr() { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Multi-index access, bounds unchecked beyond the flat index.
  T& at(std::initializer_list<std::size_t> index);
  const T& at(std::initializer_list<std::size_t> index) const;

  T item() const;

  Tensor reshaped(Shape shape) const;
  void fill(T value);

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::copy(data_.begin(), data_.end(), out.ptr());
    return out;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;

  Shape shape_;
  Storage<T> data_;
};

// Tensor dump format (little-endian):
//   8-byte magic "AFMTENSR" | precision byte (4 or 8) | rank byte |
//   rank x uint64 dims | numel x float32/float64 values
inline constexpr char kTensorDumpMagic[8] = {'A', 'F', 'M', 'T', 'E', 'N', 'S', 'R'};

template <typename T>
void write_tensor_dump(std::ostream& out, const Tensor<T>& tensor);

/// Reads one dump; throws IntegrityError on bad magic, wrong precision, or
/// truncated payload. `what` names the blob in error messages.
template <typename T>
Tensor<T> read_tensor_dump(std::istream& in, const std::string& what = "tensor");

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& tensor);
template <typename T>
Tensor<T> load_tensor(const std::string& path, const std::string& what = "tensor");

std::size_t tensor_dump_bytes(const Shape& shape, Precision precision);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace afm
