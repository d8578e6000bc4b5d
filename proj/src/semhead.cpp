#include "alocc/semhead.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace alocc::sem {

namespace {

// Column index a label occupies in the logit matrix.
std::size_t label_column(std::uint8_t label, std::size_t n_classes) {
  if (label == kEmptyLabel) return n_classes;
  detail::require(label < n_classes, "labels: class id " + std::to_string(label) +
                                         " outside [0, " + std::to_string(n_classes) +
                                         ")");
  return label;
}

void check_label_setup(const ng::Tensor& logits,
                       const std::vector<std::uint8_t>& labels,
                       std::size_t n_classes) {
  detail::require(n_classes >= 1 && n_classes < kEmptyLabel,
                  "labels: class count must be in [1, 255)");
  detail::require(logits.shape().size() == 2 &&
                      logits.shape()[1] == n_classes + 1,
                  "logits: expected [V, n_classes+1], got " +
                      ng::shape_str(logits.shape()));
  detail::require(logits.shape()[0] == labels.size(),
                  "labels: count does not match logit rows");
  detail::require(!labels.empty(), "labels: need at least one position");
}

}  // namespace

ng::Tensor mapped_prototypes(ng::Tape& tape, const PrototypeBank& bank) {
  const ng::Tensor hidden =
      tape.sigmoid(tape.add(tape.matmul(bank.prototypes, bank.w1), bank.b1));
  return tape.add(tape.matmul(hidden, bank.w2), bank.b2);
}

ng::Tensor class_logits(ng::Tape& tape, const ng::Tensor& mapped,
                        const ng::Tensor& features) {
  return tape.matmul_nt(features, mapped);
}

std::vector<std::size_t> present_classes(const std::vector<std::uint8_t>& labels,
                                         std::size_t n_classes) {
  std::vector<bool> seen(n_classes, false);
  for (const std::uint8_t l : labels) {
    const std::size_t c = label_column(l, n_classes);
    if (c < n_classes) seen[c] = true;
  }
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < n_classes; ++c)
    if (seen[c]) present.push_back(c);
  present.push_back(n_classes);  // empty space always participates
  return present;
}

ng::Tensor dice_bce_loss(ng::Tape& tape, const ng::Tensor& logits,
                         const std::vector<std::uint8_t>& labels,
                         std::size_t n_classes, const SemanticLossParams& params) {
  check_label_setup(logits, labels, n_classes);
  detail::require(params.dice_eps > 0.0, "dice_bce_loss: eps must be positive");
  const std::size_t v_count = labels.size();
  const std::size_t width = n_classes + 1;
  const std::vector<std::size_t> present = present_classes(labels, n_classes);
  const std::size_t p_count = present.size();

  // Class-major gather of the present logit columns, with matching
  // one-vs-rest targets. Absent columns never enter the graph.
  std::vector<std::int64_t> flat;
  std::vector<double> target(p_count * v_count, 0.0);
  std::vector<double> inv_target(p_count * v_count, 1.0);
  flat.reserve(p_count * v_count);
  for (std::size_t pc = 0; pc < p_count; ++pc) {
    for (std::size_t v = 0; v < v_count; ++v) {
      flat.push_back(static_cast<std::int64_t>(v * width + present[pc]));
      if (label_column(labels[v], n_classes) == present[pc]) {
        target[pc * v_count + v] = 1.0;
        inv_target[pc * v_count + v] = 0.0;
      }
    }
  }
  const ng::Tensor z =
      tape.gather(logits.reshaped({v_count * width}), flat).reshaped({p_count, v_count});
  const ng::Tensor t(ng::Shape{p_count, v_count}, target);
  const ng::Tensor t_inv(ng::Shape{p_count, v_count}, inv_target);
  const ng::Tensor p = tape.sigmoid(z);

  // Soft Dice per class: 1 - (2 <p,t> + eps) / (sum p + sum t + eps).
  const ng::Tensor col_ones = ng::Tensor::full({v_count, 1}, 1.0);
  std::vector<double> tsum_host(p_count, 0.0);
  for (std::size_t pc = 0; pc < p_count; ++pc)
    for (std::size_t v = 0; v < v_count; ++v) tsum_host[pc] += target[pc * v_count + v];
  const ng::Tensor eps = ng::Tensor::scalar(params.dice_eps);
  const ng::Tensor inter = tape.matmul(tape.mul(p, t), col_ones);
  const ng::Tensor numer = tape.add(tape.mul(inter, ng::Tensor::scalar(2.0)), eps);
  const ng::Tensor denom = tape.add(
      tape.add(tape.matmul(p, col_ones), ng::Tensor({p_count, 1}, tsum_host)), eps);
  const ng::Tensor dice = tape.add(
      tape.mul(tape.div(numer, denom), ng::Tensor::scalar(-1.0)), ng::Tensor::scalar(1.0));
  const ng::Tensor dice_mean = tape.mean(dice);

  // Binary cross-entropy, averaged over every (class, position) pair:
  // -(t log sigmoid(z) + (1-t) log sigmoid(-z)).
  const ng::Tensor log_p = tape.log(p);
  const ng::Tensor log_q = tape.log(tape.sigmoid(tape.mul(z, ng::Tensor::scalar(-1.0))));
  const ng::Tensor bce = tape.mul(
      tape.mean(tape.add(tape.mul(log_p, t), tape.mul(log_q, t_inv))),
      ng::Tensor::scalar(-1.0));

  return tape.add(tape.mul(dice_mean, ng::Tensor::scalar(params.dice_weight)),
                  tape.mul(bce, ng::Tensor::scalar(params.bce_weight)));
}

std::vector<std::uint8_t> infer_labels(const ng::Tensor& logits,
                                       std::size_t n_classes) {
  detail::require(n_classes >= 1 && n_classes < kEmptyLabel,
                  "infer_labels: class count must be in [1, 255)");
  detail::require(logits.shape().size() == 2 &&
                      logits.shape()[1] == n_classes + 1,
                  "infer_labels: expected [V, n_classes+1], got " +
                      ng::shape_str(logits.shape()));
  const std::size_t width = n_classes + 1;
  const std::size_t v_count = logits.shape()[0];
  std::vector<std::uint8_t> out(v_count);
  for (std::size_t v = 0; v < v_count; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < width; ++c)
      if (logits.at(v * width + c) > logits.at(v * width + best)) best = c;
    out[v] = best == n_classes ? kEmptyLabel : static_cast<std::uint8_t>(best);
  }
  return out;
}

std::vector<double> inverse_frequency_prior(const std::vector<std::uint8_t>& labels,
                                            std::size_t n_classes) {
  detail::require(!labels.empty(), "inverse_frequency_prior: no labels");
  std::vector<std::size_t> count(n_classes + 1, 0);
  for (const std::uint8_t l : labels) ++count[label_column(l, n_classes)];
  const double total = static_cast<double>(labels.size());
  std::vector<double> prior(labels.size());
  for (std::size_t v = 0; v < labels.size(); ++v) {
    const double inv =
        total / static_cast<double>(count[label_column(labels[v], n_classes)]);
    prior[v] = std::clamp(inv, 1.0, 100.0);
  }
  return prior;
}

std::vector<std::int64_t> uncertainty_sample(const ng::Tensor& logits,
                                             const std::vector<double>& prior,
                                             std::size_t k, std::uint64_t seed) {
  detail::require(logits.shape().size() == 2 && logits.shape()[1] >= 1,
                  "uncertainty_sample: expected [V, C] logits");
  const std::size_t v_count = logits.shape()[0];
  const std::size_t width = logits.shape()[1];
  detail::require(v_count >= 1, "uncertainty_sample: no positions");
  detail::require(prior.size() == v_count,
                  "uncertainty_sample: prior size does not match logit rows");
  detail::require(k >= 1, "uncertainty_sample: k must be positive");
  for (const double w : prior)
    detail::require(std::isfinite(w) && w >= 0.0,
                    "uncertainty_sample: prior weights must be finite and nonnegative");
  k = std::min(k, v_count);

  std::vector<double> u(v_count);
  for (std::size_t v = 0; v < v_count; ++v) {
    double closest = std::abs(logits.at(v * width));
    for (std::size_t c = 1; c < width; ++c)
      closest = std::min(closest, std::abs(logits.at(v * width + c)));
    u[v] = -closest;
  }

  // Competition rank: positions sharing a value share the count of strictly
  // smaller values, so equal uncertainty means equal score.
  std::vector<std::size_t> order(v_count);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return u[a] < u[b]; });
  std::vector<double> score(v_count);
  const double norm = v_count > 1 ? static_cast<double>(v_count - 1) : 1.0;
  for (std::size_t i = 0; i < v_count;) {
    std::size_t j = i;
    while (j < v_count && u[order[j]] == u[order[i]]) ++j;
    for (std::size_t m = i; m < j; ++m)
      score[order[m]] = (static_cast<double>(i) / norm) * prior[order[m]];
    i = j;
  }

  std::vector<std::int64_t> idx(v_count);
  std::iota(idx.begin(), idx.end(), 0);
  const auto [lo, hi] = std::minmax_element(score.begin(), score.end());
  if (*lo == *hi) {
    // Uninformative scores: a deterministic cut would just take the first k
    // indices forever, so draw a seeded uniform sample instead.
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, v_count - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
  } else {
    std::sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
      if (score[a] != score[b]) return score[a] > score[b];
      return a < b;
    });
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace alocc::sem
