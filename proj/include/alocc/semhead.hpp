#pragma once

#include <cstdint>
#include <vector>

#include "alocc/labels.hpp"
#include "alocc/tape.hpp"

namespace alocc::sem {

// Learnable pieces of the prototype decoder: one embedding row per semantic
// class plus a trailing row for empty space, and a two-layer map with a
// sigmoid hidden layer. The map is applied to the prototypes rather than the
// features, so scoring a voxel stays one inner product per class.
struct PrototypeBank {
  ng::Tensor prototypes;  // [C+1, F]
  ng::Tensor w1;          // [F, H]
  ng::Tensor b1;          // [1, H]
  ng::Tensor w2;          // [H, F]
  ng::Tensor b2;          // [1, F]
};

// sigmoid(P W1 + b1) W2 + b2, one mapped row per class.
ng::Tensor mapped_prototypes(ng::Tape& tape, const PrototypeBank& bank);

// Inner product of every feature row against every mapped prototype row:
// features [V, F] x mapped [C+1, F] -> logits [V, C+1].
ng::Tensor class_logits(ng::Tape& tape, const ng::Tensor& mapped,
                        const ng::Tensor& features);

struct SemanticLossParams {
  double dice_weight = 5.0;
  double bce_weight = 20.0;
  double dice_eps = 1.0;
};

// Classes that occur in `labels`, ascending, with the empty column
// (n_classes) always appended. Only these take part in the loss.
std::vector<std::size_t> present_classes(const std::vector<std::uint8_t>& labels,
                                         std::size_t n_classes);

// Mean one-vs-rest soft-Dice over the present classes plus binary
// cross-entropy over all (present class, position) pairs, combined with the
// configured weights. Columns of absent classes are never gathered, so their
// loss contribution and their gradient are exactly zero.
// logits [V, n_classes+1]; labels[v] in [0, n_classes) or kEmptyLabel.
ng::Tensor dice_bce_loss(ng::Tape& tape, const ng::Tensor& logits,
                         const std::vector<std::uint8_t>& labels,
                         std::size_t n_classes,
                         const SemanticLossParams& params = {});

// Row-wise argmax with ties going to the lowest column; the empty column
// comes back as kEmptyLabel.
std::vector<std::uint8_t> infer_labels(const ng::Tensor& logits,
                                       std::size_t n_classes);

// clamp(1 / class frequency, 1, 100) of each position's label; the prior
// weight fed to uncertainty_sample so long-tail classes keep getting picked.
std::vector<double> inverse_frequency_prior(const std::vector<std::uint8_t>& labels,
                                            std::size_t n_classes);

// Indices of the k positions to supervise. Uncertainty is -min_c |logit_c|
// (closest to a decision boundary first), rank-normalized to [0,1] by
// counting strictly-smaller values, then multiplied by the prior weight.
// Score ties pick the lower index. If every score is identical the ranking
// carries no information (e.g. freshly initialized logits), so a seeded
// uniform sample is drawn instead. Indices come back ascending.
std::vector<std::int64_t> uncertainty_sample(const ng::Tensor& logits,
                                             const std::vector<double>& prior,
                                             std::size_t k, std::uint64_t seed);

}  // namespace alocc::sem
