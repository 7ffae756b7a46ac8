#pragma once

#include <cmath>
#include <vector>

#include "psound/errors.hpp"
#include "psound/model.hpp"
#include "psound/ops.hpp"

namespace psound {

/// Class-weighted negative log likelihood: mean over the batch of
/// -weights[y_b] * log_probs[b, y_b].
template <typename T>
Variable<T> weighted_nll(const Variable<T>& log_probs, const std::vector<int>& labels,
                         const Tensor<T>& weights) {
  return nll_loss(log_probs, labels, weights);
}

/// Similarity between two prototypes of a bank: cosine for 1D banks, the
/// scalarized average similarity for 2D banks.
template <typename T>
Variable<T> bank_pair_similarity(const PrototypeBank<T>& bank, std::size_t i, std::size_t j) {
  Variable<T> a = slice_first(bank.prototypes, i);
  Variable<T> b = slice_first(bank.prototypes, j);
  if (bank.variant == Variant::P1D) return sim_1d(a, b);
  return scalarize(sim_2av(a, b));
}

/// Diverse loss: mean inter-class prototype similarity over mean intra-class
/// similarity. Intra-class uses distinct unordered pairs when N >= 2 and the
/// self-pair when N == 1.
template <typename T>
Variable<T> diverse_loss(const PrototypeBank<T>& bank) {
  const std::size_t L = bank.classes, N = bank.per_class;
  std::vector<Variable<T>> inter;
  for (std::size_t l1 = 0; l1 < L; ++l1)
    for (std::size_t l2 = l1 + 1; l2 < L; ++l2)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
          inter.push_back(bank_pair_similarity(bank, l1 * N + i, l2 * N + j));

  std::vector<Variable<T>> intra_means;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<Variable<T>> pairs;
    if (N == 1) {
      pairs.push_back(bank_pair_similarity(bank, l, l));
    } else {
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i + 1; j < N; ++j)
          pairs.push_back(bank_pair_similarity(bank, l * N + i, l * N + j));
    }
    intra_means.push_back(mean_scalars(pairs));
  }

  Variable<T> numerator = mean_scalars(inter);
  Variable<T> denominator = mean_scalars(intra_means);
  if (std::abs(static_cast<double>(denominator.value()[0])) < 1e-8)
    throw NumericError("diverse_loss: degenerate intra-class similarity");
  return div(numerator, denominator);
}

struct LossReport {
  double nll = 0.0;
  double diverse = 0.0;
  double total = 0.0;
  double alpha = 0.1;
};

/// Composite objective: weighted NLL plus alpha times the diverse loss.
template <typename T>
std::pair<Variable<T>, LossReport> total_loss(const Variable<T>& log_probs,
                                              const std::vector<int>& labels,
                                              const Tensor<T>& weights,
                                              const PrototypeBank<T>& bank, T alpha) {
  Variable<T> nll = weighted_nll(log_probs, labels, weights);
  Variable<T> dv = diverse_loss(bank);
  Variable<T> total = add(nll, scale(dv, alpha));
  LossReport report;
  report.nll = static_cast<double>(nll.value()[0]);
  report.diverse = static_cast<double>(dv.value()[0]);
  report.total = static_cast<double>(total.value()[0]);
  report.alpha = static_cast<double>(alpha);
  return {total, report};
}

}  // namespace psound
