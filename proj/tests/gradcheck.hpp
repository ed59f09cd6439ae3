#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "diar/aggregator.hpp"
#include "diar/rng.hpp"
#include "diar/tensor.hpp"

namespace diar::testing {

using GraphFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Contracts a non-scalar output with fixed random weights so the check
/// covers the whole Jacobian.
inline Var<double> project(const Var<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor<double> w(y.shape());
  for (auto& v : w.data()) v = rng.uniform(-1.0, 1.0);
  return reduce_sum(mul(y, y.tape().constant(std::move(w))));
}

inline double evaluate(const GraphFn& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value().item();
}

/// Largest relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)
/// over the inputs, central differences with step h.
inline double gradient_error(const GraphFn& f, std::vector<Tensor<double>> inputs, double h = 1e-5,
                             const std::vector<bool>& check = {}) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t));
    const Var<double> out = f(tape, vars);
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!check.empty() && !check[i]) continue;
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + h;
      const double fp = evaluate(f, inputs);
      inputs[i][k] = orig - h;
      const double fm = evaluate(f, inputs);
      inputs[i][k] = orig;
      const double num = (fp - fm) / (2 * h);
      const double a = analytic[i][k];
      diff += (a - num) * (a - num);
      na += a * a;
      nn += num * num;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

// Every differentiable op against central differences.
struct OpCase {
  const char* name;
  diar::testing::GraphFn fn;
  std::vector<Shape> shapes;
};

inline std::vector<OpCase> op_cases() {
  using V = std::vector<Var<double>>;
  return {
      {"matmul", [](Tape<double>&, const V& v) { return project(matmul(v[0], v[1])); }, {{3, 4}, {4, 2}}},
      {"bmm", [](Tape<double>&, const V& v) { return project(bmm(v[0], v[1])); }, {{2, 3, 4}, {2, 4, 5}}},
      {"bmm_t", [](Tape<double>&, const V& v) { return project(bmm(v[0], v[1], true)); }, {{2, 3, 4}, {2, 5, 4}}},
      {"add", [](Tape<double>&, const V& v) { return project(add(v[0], v[1])); }, {{3, 4}, {3, 4}}},
      {"sub", [](Tape<double>&, const V& v) { return project(sub(v[0], v[1])); }, {{3, 4}, {3, 4}}},
      {"mul", [](Tape<double>&, const V& v) { return project(mul(v[0], v[1])); }, {{3, 4}, {3, 4}}},
      {"scale", [](Tape<double>&, const V& v) { return project(scale(v[0], 2.5)); }, {{5}}},
      {"add_bias", [](Tape<double>&, const V& v) { return project(add_bias(v[0], v[1])); }, {{2, 3, 4}, {4}}},
      {"relu", [](Tape<double>&, const V& v) { return project(relu(v[0])); }, {{4, 4}}},
      {"sigmoid", [](Tape<double>&, const V& v) { return project(sigmoid(v[0])); }, {{4, 4}}},
      {"abs", [](Tape<double>&, const V& v) { return project(abs(v[0])); }, {{4, 4}}},
      {"softmax0", [](Tape<double>&, const V& v) { return project(softmax(v[0], 0)); }, {{3, 4}}},
      {"softmax1", [](Tape<double>&, const V& v) { return project(softmax(v[0], 1)); }, {{3, 4, 2}}},
      {"layer_norm", [](Tape<double>&, const V& v) { return project(layer_norm(v[0], v[1], v[2])); }, {{3, 6}, {6}, {6}}},
      {"reduce_sum", [](Tape<double>&, const V& v) { return reduce_sum(mul(v[0], v[0])); }, {{3, 4}}},
      {"reduce_sum_axis", [](Tape<double>&, const V& v) { return project(reduce_sum(v[0], 1)); }, {{3, 4, 2}}},
      {"mean", [](Tape<double>&, const V& v) { return mean(mul(v[0], v[0])); }, {{3, 4}}},
      {"set_mean", [](Tape<double>&, const V& v) { return project(set_mean(v[0])); }, {{4, 3, 2}}},
      {"set_sum", [](Tape<double>&, const V& v) { return project(set_sum(v[0])); }, {{4, 3, 2}}},
      {"reshape", [](Tape<double>&, const V& v) { return project(reshape(v[0], Shape{6, 2})); }, {{3, 4}}},
      {"permute", [](Tape<double>&, const V& v) { return project(permute(v[0], {2, 0, 1})); }, {{2, 3, 4}}},
      {"transpose", [](Tape<double>&, const V& v) { return project(transpose(v[0])); }, {{3, 5}}},
      {"gather_rows", [](Tape<double>&, const V& v) { return project(gather_rows(v[0], {2, 0, 2, 1})); }, {{3, 4}}},
      {"stack", [](Tape<double>&, const V& v) { return project(stack(V{v[0], v[1], v[0]})); }, {{2, 3}, {2, 3}}},
      {"conv2d", [](Tape<double>&, const V& v) { return project(conv2d(v[0], v[1], v[2], 1, 1)); }, {{2, 5, 5}, {3, 2, 3, 3}, {3}}},
      {"conv2d_s2", [](Tape<double>&, const V& v) { return project(conv2d(v[0], v[1], 2, 1)); }, {{2, 6, 5}, {2, 2, 3, 3}}},
      {"upsample2x", [](Tape<double>&, const V& v) { return project(upsample2x(v[0])); }, {{2, 3, 2}}},
  };
}

/// Relative gradient error of the L1 reconstruction loss over a random
/// `fraction` of the model parameters (plus the first entry of every weight).
inline double model_gradient_error(const ModelConfig& cfg, std::size_t t, std::size_t size, double fraction,
                                   std::uint64_t seed, std::size_t* sampled = nullptr) {
  const auto params = cast_params<double>(DiarModel::create(cfg).params);
  Rng rng(seed);
  std::vector<Tensor<double>> frames;
  for (std::size_t i = 0; i < t; ++i) frames.push_back(random_tensor({cfg.image_channels, size, size}, rng, 0.0, 1.0));
  const Tensor<double> label = random_tensor({cfg.image_channels, size, size}, rng, 0.0, 1.0);
  auto loss_of = [&](const ParamStore<double>& ps, Gradients<double>* g) {
    Tape<double> tape;
    ParamBinding<double> p(tape, ps, g != nullptr);
    std::vector<Var<double>> in;
    for (const auto& f : frames) in.push_back(tape.constant(f));
    const Var<double> loss = l1_loss(model_forward(p, cfg, in), tape.constant(label));
    if (g) {
      tape.backward(loss);
      *g = p.gradients();
    }
    return loss.value().item();
  };
  Gradients<double> analytic;
  loss_of(params, &analytic);
  const double h = 1e-6;
  double diff = 0, na = 0, nn = 0;
  std::size_t n = 0;
  ParamStore<double> ps = params;
  for (const auto& [name, e] : params.entries()) {
    for (std::size_t k = 0; k < e.value.size(); ++k) {
      if (rng.uniform() >= fraction && !(k == 0 && name.ends_with(".w"))) continue;
      const double orig = e.value[k];
      ps.get_mut(name)[k] = orig + h;
      const double fp = loss_of(ps, nullptr);
      ps.get_mut(name)[k] = orig - h;
      const double fm = loss_of(ps, nullptr);
      ps.get_mut(name)[k] = orig;
      const double num = (fp - fm) / (2 * h), a = analytic.at(name)[k];
      diff += (a - num) * (a - num);
      na += a * a;
      nn += num * num;
      ++n;
    }
  }
  if (sampled) *sampled = n;
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-300});
}

}  // namespace diar::testing
