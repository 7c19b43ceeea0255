#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace decolle {

// Batched quantities are stored row-per-sample; spatial tensors are flattened
// channel-major ([c, h, w]) within each row.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct Shape3 {
  int channels = 1;
  int height = 1;
  int width = 1;

  std::int64_t size() const { return std::int64_t{channels} * height * width; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

}  // namespace decolle
