#ifndef TRISPEECH_TESTS_TESTUTIL_HPP
#define TRISPEECH_TESTS_TESTUTIL_HPP

// Shared test helpers. The central-difference gradient checker here is the
// independent oracle for every differentiable op: it never touches the
// backward implementations it verifies, only repeated forward evaluations.

#include <cmath>
#include <functional>
#include <vector>

#include "trispeech/rng.hpp"
#include "trispeech/tensor.hpp"

namespace trispeech::testing {

using BuildFn = std::function<Tensor<double>(Graph<double>&)>;

// Max over checked coordinates of |analytic - fd| / max(1, |fd|).
// `max_coords` < 0 checks every coordinate of every leaf; otherwise that many
// coordinates are sampled per leaf.
inline double grad_check(const std::vector<TensorData<double>*>& leaves, const BuildFn& build,
                         double h = 1e-5, int max_coords = -1, Rng* rng = nullptr) {
  for (auto* l : leaves) {
    l->ensure_grad();
    l->zero_grad();
  }
  {
    Graph<double> g;
    Tensor<double> loss = build(g);
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph<double> g;
    return build(g).scalar();
  };
  double worst = 0.0;
  for (auto* leaf : leaves) {
    const int64_t n = leaf->numel();
    std::vector<int64_t> coords;
    if (max_coords < 0 || max_coords >= n) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int i = 0; i < max_coords; ++i)
        coords.push_back(rng ? rng->uniform_int(0, n - 1) : i % n);
    }
    for (int64_t c : coords) {
      const double orig = leaf->data[static_cast<size_t>(c)];
      leaf->data[static_cast<size_t>(c)] = orig + h;
      const double up = eval();
      leaf->data[static_cast<size_t>(c)] = orig - h;
      const double down = eval();
      leaf->data[static_cast<size_t>(c)] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double an = leaf->grad[static_cast<size_t>(c)];
      const double rel = std::abs(an - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline TensorData<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  auto t = TensorData<double>::zeros(std::move(shape));
  for (auto& x : t.data) x = rng.normal(0.0, scale);
  return t;
}

inline TensorData<float> random_tensor_f(Shape shape, Rng& rng, double scale = 1.0) {
  auto t = TensorData<float>::zeros(std::move(shape));
  for (auto& x : t.data) x = static_cast<float>(rng.normal(0.0, scale));
  return t;
}

}  // namespace trispeech::testing

#endif  // TRISPEECH_TESTS_TESTUTIL_HPP
