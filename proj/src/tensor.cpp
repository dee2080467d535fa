#include "solens/tensor.hpp"

#include <sstream>

#include "solens/errors.hpp"

namespace solens {

std::int64_t element_count(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

Tensor::Tensor(Shape s) : shape(std::move(s)), data(static_cast<std::size_t>(element_count(shape)), 0.0f) {}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
    if (static_cast<std::int64_t>(data.size()) != element_count(shape))
        throw ValidationError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                              shape_string(shape));
}

Tensor tensor_from(const Eigen::MatrixXf& m) {
    Tensor t({m.rows(), m.cols()});
    Eigen::Map<RowMatrixXf>(t.data.data(), m.rows(), m.cols()) = m;
    return t;
}

Tensor tensor_from(const Eigen::VectorXf& v) {
    return Tensor({v.size()}, std::vector<float>(v.data(), v.data() + v.size()));
}

Eigen::MatrixXf to_matrix(const Tensor& t) {
    if (t.rank() == 1) return Eigen::Map<const RowMatrixXf>(t.data.data(), 1, t.dim(0));
    if (t.rank() != 2) throw ValidationError("expected rank-2 tensor, got shape " + shape_string(t.shape));
    return Eigen::Map<const RowMatrixXf>(t.data.data(), t.dim(0), t.dim(1));
}

Eigen::VectorXf to_vector(const Tensor& t) {
    return Eigen::Map<const Eigen::VectorXf>(t.data.data(), t.size());
}

}  // namespace solens
