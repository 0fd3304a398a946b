#include "mzu/tensor.hpp"

namespace mzu {

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {

std::string shape_message(const std::string& op, const std::vector<Shape>& dims, const std::string& detail) {
    std::string msg = op + ": " + detail + " (";
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (i) msg += ", ";
        msg += shape_str(dims[i]);
    }
    return msg + ")";
}

}  // namespace

ShapeError::ShapeError(std::string op, std::vector<Shape> dims, const std::string& detail)
    : std::invalid_argument(shape_message(op, dims, detail)), op_(std::move(op)), dims_(std::move(dims)) {}

}  // namespace mzu
