#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace solens {

using Shape = std::vector<std::int64_t>;

std::int64_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major f32 tensor. The shape is authoritative; data.size() always
/// equals the product of the dimensions.
struct Tensor {
    Shape shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(Shape s);
    Tensor(Shape s, std::vector<float> values);

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t dim(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }

    std::span<float> span() { return data; }
    std::span<const float> span() const { return data; }

    bool operator==(const Tensor&) const = default;
};

using TensorMap = std::map<std::string, Tensor>;

using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Tensor tensor_from(const Eigen::MatrixXf& m);
Tensor tensor_from(const Eigen::VectorXf& v);

// Rank-2 tensor to matrix; rank-1 tensors become a single row.
Eigen::MatrixXf to_matrix(const Tensor& t);
Eigen::VectorXf to_vector(const Tensor& t);

}  // namespace solens
