#include "fmm/optimizer.hpp"

#include <cmath>

#include "json_reader.hpp"

namespace fmm {

Json to_json(const AdamConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"weight_decay", c.weight_decay}};
}

AdamConfig adam_config_from_json(const Json& j, std::vector<std::string>* warnings, const std::string& path) {
  AdamConfig c;
  detail::JsonReader r(j, path, warnings);
  r.read("learning_rate", c.learning_rate);
  r.read("beta1", c.beta1);
  r.read("beta2", c.beta2);
  r.read("epsilon", c.epsilon);
  r.read("weight_decay", c.weight_decay);
  r.finish();
  validate(c);
  return c;
}

void validate(const AdamConfig& c) {
  if (!(c.learning_rate > 0.0)) throw ValueError("optimizer.learning_rate must be > 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
    throw ValueError("optimizer betas must lie in [0, 1)");
  }
  if (!(c.epsilon > 0.0)) throw ValueError("optimizer.epsilon must be > 0");
  if (c.weight_decay < 0.0) throw ValueError("optimizer.weight_decay must be >= 0");
}

void adam_step(OptimizerState& state, ParameterMap& params, const GradientMap& grads) {
  for (const auto& [name, grad] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ValueError("adam_step: gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != grad.shape()) {
      throw ShapeError("adam_step: gradient shape " + shape_string(grad.shape()) + " does not match parameter '" +
                       name + "' " + shape_string(it->second.shape()));
    }
  }
  ++state.step;
  const AdamConfig& c = state.config;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));

  for (const auto& [name, grad] : grads) {
    Tensor& param = params.at(name);
    const auto g = grad.to_vector();
    auto p = param.to_vector();
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      if (c.weight_decay > 0.0) p[i] -= c.learning_rate * c.weight_decay * p[i];
      p[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
    param = Tensor::from_values(param.shape(), p, param.dtype());
  }
}

void accumulate_gradients(GradientMap& total, const GradientMap& part) {
  for (const auto& [name, grad] : part) {
    auto it = total.find(name);
    if (it == total.end()) {
      total.emplace(name, grad);
      continue;
    }
    if (it->second.shape() != grad.shape()) throw ShapeError("accumulate_gradients: shape mismatch for '" + name + "'");
    dispatch_dtype(grad.dtype(), [&]<class T>() {
      const auto a = it->second.template data<T>();
      const auto b = grad.template data<T>();
      std::vector<T> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
      it->second = Tensor(grad.shape(), std::move(out));
    });
  }
}

GradientMap scale_gradients(const GradientMap& grads, double factor) {
  GradientMap out;
  for (const auto& [name, grad] : grads) {
    auto values = grad.to_vector();
    for (auto& v : values) v *= factor;
    out.emplace(name, Tensor::from_values(grad.shape(), values, grad.dtype()));
  }
  return out;
}

}  // namespace fmm
