#pragma once

#include <functional>
#include <initializer_list>
#include <vector>

#include "floodlora/tensor.hpp"

namespace floodlora::detail {

// Creates an op result; records history only when grad mode is on and some
// input requires a gradient.
Tensor make_op(Shape shape, std::vector<double> data, const char* op, std::initializer_list<Tensor> inputs,
               std::function<void(Node&)> backward);
Tensor make_op(Shape shape, std::vector<double> data, const char* op, const std::vector<Tensor>& inputs,
               std::function<void(Node&)> backward);

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace floodlora::detail
