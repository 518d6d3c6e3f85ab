#pragma once

#include <map>
#include <string>

#include "fmm/model.hpp"

namespace fmm::detail {

Var linear(Params& p, const std::string& name, Var x);
Var norm(Params& p, const std::string& name, Var x);
void add_linear(std::map<std::string, Shape>& out, const std::string& name, std::size_t in, std::size_t o);
void add_norm(std::map<std::string, Shape>& out, const std::string& name, std::size_t d);
void add_transformer_shapes(std::map<std::string, Shape>& out, const std::string& prefix, std::size_t layers,
                            std::size_t d, std::size_t ff_multiplier);

}  // namespace fmm::detail
