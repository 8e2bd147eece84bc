#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cellprompt/error.hpp"

namespace cellprompt {

/// Dense row-major 2-D array.
template <class T>
class Grid {
public:
  Grid() = default;
  Grid(int height, int width, T fill = T{}) : height_(height), width_(width) {
    if (height < 0 || width < 0) throw InvalidArgument("grid dimensions must be non-negative");
    data_.assign(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill);
  }
  Grid(int height, int width, std::vector<T> values) : height_(height), width_(width), data_(std::move(values)) {
    if (height < 0 || width < 0) throw InvalidArgument("grid dimensions must be non-negative");
    if (data_.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
      throw DimensionMismatch("grid data size does not match height*width");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(int y, int x) { return data_[index(y, x)]; }
  const T& operator()(int y, int x) const { return data_[index(y, x)]; }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  bool same_shape(const Grid& other) const { return height_ == other.height_ && width_ == other.width_; }
  friend bool operator==(const Grid& a, const Grid& b) = default;

private:
  std::size_t index(int y, int x) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

} // namespace cellprompt
