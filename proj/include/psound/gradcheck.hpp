#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "psound/autodiff.hpp"
#include "psound/rng.hpp"
#include "psound/tensor.hpp"

namespace psound {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates checked per leaf; negative means all of them. Sampling keeps
  /// whole-model checks tractable without giving up coverage of every leaf.
  int coords_per_leaf = -1;
  std::uint64_t sample_seed = 0;
};

/// Compare the reverse-mode gradient of a scalar-valued function against
/// central finite differences, in double precision. `rebuild` must re-run the
/// forward graph from the current leaf values and return the scalar output;
/// `leaves` are the inputs differentiated against.
///
/// Returns max over checked coordinates of |analytic - fd| / max(1, |fd|).
inline double gradcheck(const std::function<Variable<double>()>& rebuild,
                        const std::vector<Variable<double>>& leaves,
                        const GradCheckOptions& opts = {}) {
  if (leaves.empty()) throw std::invalid_argument("gradcheck: no leaves given");
  Tape<double>* tape = leaves.front().tape();

  auto eval = [&]() {
    Variable<double> out = rebuild();
    if (out.size() != 1) throw std::invalid_argument("gradcheck: function output must be scalar");
    double v = out.value()[0];
    tape->clear();
    return v;
  };

  // Analytic pass.
  Variable<double> out = rebuild();
  if (out.size() != 1) throw std::invalid_argument("gradcheck: function output must be scalar");
  for (auto& leaf : leaves) const_cast<Variable<double>&>(leaf).zero_grad();
  tape->backward(out);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad());
  tape->clear();

  Rng rng(opts.sample_seed);
  double worst = 0.0;
  const double h = opts.step;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& value = const_cast<Variable<double>&>(leaves[li]).mutable_value();
    std::vector<std::size_t> coords;
    if (opts.coords_per_leaf < 0 ||
        static_cast<std::size_t>(opts.coords_per_leaf) >= value.size()) {
      coords.resize(value.size());
      for (std::size_t i = 0; i < value.size(); ++i) coords[i] = i;
    } else {
      // Sample distinct coordinates.
      std::vector<std::size_t> all(value.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      rng.shuffle(all);
      coords.assign(all.begin(), all.begin() + opts.coords_per_leaf);
    }
    for (std::size_t c : coords) {
      const double saved = value[c];
      value[c] = saved + h;
      const double fp = eval();
      value[c] = saved - h;
      const double fm = eval();
      value[c] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[li][c] - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Single-input convenience form: f is rebuilt around one leaf holding
/// `point`; returns the max relative error over all coordinates.
inline double gradcheck(Tape<double>& tape,
                        const std::function<Variable<double>(const Variable<double>&)>& f,
                        const Tensor<double>& point, double step = 1e-5) {
  Variable<double> x = Variable<double>::leaf(tape, point, true);
  GradCheckOptions opts;
  opts.step = step;
  return gradcheck([&]() { return f(x); }, {x}, opts);
}

}  // namespace psound
