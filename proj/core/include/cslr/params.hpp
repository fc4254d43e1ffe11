#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cslr/rng.hpp"
#include "cslr/tensor.hpp"

namespace cslr {

// Named parameter registry shared by optimizers and checkpoints. Order is
// registration order and must be deterministic across runs.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Uniform init in +-1/sqrt(fan_in), seeded per parameter name so that the
// layout of the registry does not influence values.
Tensor init_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed);
Tensor init_zeros(Shape shape);
Tensor init_ones(Shape shape);

inline void collect_into(NamedTensors& out, const std::string& name, const Tensor& t) {
  out.emplace_back(name, t);
}

}  // namespace cslr
