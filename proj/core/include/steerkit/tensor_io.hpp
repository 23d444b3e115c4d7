#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace steerkit {

/// One named tensor: shape plus row-major 64-bit values.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

/// A named tensor set with insertion order preserved. Persisted as a flat
/// file: a descriptor section (names, shapes, payload offsets) followed by
/// the raw little-endian IEEE-754 64-bit payload, row-major.
class TensorContainer {
 public:
  void add(const std::string& name, Tensor tensor);
  void add_scalar(const std::string& name, double value);
  void add_vector(const std::string& name, const Eigen::VectorXd& v);
  void add_matrix(const std::string& name, const Eigen::MatrixXd& m);

  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  double get_scalar(const std::string& name) const;
  Eigen::VectorXd get_vector(const std::string& name) const;
  Eigen::MatrixXd get_matrix(const std::string& name) const;

  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  bool operator==(const TensorContainer& other) const;

 private:
  std::vector<std::string> order_;
  std::vector<Tensor> tensors_;
};

void write_container(const std::filesystem::path& path,
                     const TensorContainer& tensors);
TensorContainer read_container(const std::filesystem::path& path);

}  // namespace steerkit
