#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

namespace cdl::net {

// Channel-major shape; dense vectors use {n, 1, 1}.
struct Shape {
  int c = 1;
  int h = 1;
  int w = 1;
  std::int64_t count() const {
    return static_cast<std::int64_t>(c) * h * w;
  }
  bool operator==(const Shape&) const = default;
};

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(s), data(static_cast<std::size_t>(s.count()), 0.0) {}

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape.h + y) * shape.w + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape.h + y) * shape.w + x];
  }
};

}  // namespace cdl::net
