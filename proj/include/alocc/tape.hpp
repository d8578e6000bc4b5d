#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "alocc/tensor.hpp"

namespace alocc::ng {

// Primitive op set. The tape is closed over exactly these operations; every
// differentiable computation in the library is composed from them.
enum class Op {
  kLeaf,
  kAdd,
  kMul,
  kDiv,
  kMatmul,
  kMatmulNT,  // a * b^T, same primitive as kMatmul with a transposed operand
  kScatterAdd,
  kGather,
  kSoftmaxLastDim,
  kSigmoid,
  kLog,
  kSquare,
  kSum,
  kMean,
  kL2NormLastDim,
  kCosineSimLastDim,
  kBilinearSample2d,
  kTrilinearScatterWeights,
};

// Result of trilinear_scatter_weights: for each input point, the 8 lattice
// corners around it and their interpolation weights. Corner coordinates are
// flattened as (point, corner, axis) and may lie outside any particular grid;
// dropping out-of-range corners is the consumer's job.
struct TrilinearScatter {
  Tensor weights;                      // [N, 8]
  std::vector<std::int64_t> corners;   // N * 8 * 3
};

// Append-only record of primitive applications. Inputs always precede
// consumers, so reverse insertion order is a valid reverse topological order
// for backpropagation. All accumulation loops run in a fixed index order,
// which makes results bit-identical from run to run.
class Tape {
 public:
  // Registers a differentiable leaf. The returned tensor carries the node id
  // used to look up its gradient after backward().
  Tensor leaf(const Tensor& value);

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  // Elementwise a / b; broadcasting rules match mul. Throws NumericError when
  // the result is non-finite (b ~ 0), rather than silently saturating.
  Tensor div(const Tensor& a, const Tensor& b);
  Tensor matmul(const Tensor& a, const Tensor& b);
  // a [m,k] times b^T for b [n,k]. Needed wherever a weight matrix is used on
  // both sides of an inner product; kept as a flavor of the matmul primitive.
  Tensor matmul_nt(const Tensor& a, const Tensor& b);
  // out[index[i], ...] += src[i, ...]; out has `rows` leading rows. Duplicate
  // destinations accumulate in ascending source order.
  Tensor scatter_add(const Tensor& src, const std::vector<std::int64_t>& index,
                     std::size_t rows);
  // out[i, ...] = src[index[i], ...]
  Tensor gather(const Tensor& src, const std::vector<std::int64_t>& index);
  Tensor softmax_lastdim(const Tensor& a);
  Tensor sigmoid(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor square(const Tensor& a);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  Tensor l2norm_lastdim(const Tensor& a);
  // Row-wise cosine similarity over the last axis. Defined as exactly 0, with
  // zero gradient, when either row norm falls below 1e-8.
  Tensor cosine_sim_lastdim(const Tensor& a, const Tensor& b);
  // src [H,W,C], coords flattened (row, col) pairs; samples outside the grid
  // read as zero. No gradient flows to the coordinates.
  Tensor bilinear_sample_2d(const Tensor& src, const std::vector<double>& coords);
  // points [N,3] in continuous lattice coordinates. Differentiable w.r.t. the
  // points (except on lattice planes, where the one-sided derivative is used).
  TrilinearScatter trilinear_scatter_weights(const Tensor& points);

  // Name-dispatched forward application over the primitive set above.
  // Index-like and coordinate-like arguments are passed as constant tensors:
  //   gather:       {src, index}
  //   scatter_add:  {src, index, rows-scalar}
  //   bilinear_sample_2d: {src, coords [N,2]}
  //   trilinear_scatter_weights: {points [N,3]} (returns the weights)
  Tensor forward_op(const std::string& name, const std::vector<Tensor>& inputs);

  // Reverse-mode sweep from a scalar root. Returns one gradient per leaf,
  // keyed by the leaf's node id; leaves the root does not depend on get zeros.
  std::unordered_map<int, Tensor> backward(const Tensor& root) const;

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value_of(int node) const;

 private:
  struct Node {
    Op op;
    int a = -1;  // input node ids; -1 marks a constant input
    int b = -1;
    Tensor va;   // input values, saved for the backward formulas
    Tensor vb;
    Tensor value;
    std::vector<std::int64_t> indices;  // gather/scatter/trilinear side data
    std::vector<double> coords;         // bilinear sample coordinates
    std::size_t rows = 0;               // scatter destination row count
  };

  Tensor record(Node node);

  std::vector<Node> nodes_;
};

// Central finite differences of a scalar function at x, step h per element:
// (f(x + h e_i) - f(x - h e_i)) / 2h. Throws NumericError if f returns a
// non-finite value. This is the ground-truth oracle the tape is tested
// against; it never touches the tape machinery.
Tensor finite_diff(const std::function<double(const Tensor&)>& fn, const Tensor& x,
                   double step);

// |a - b| <= max(rel * max(|a|,|b|), abs_floor)
bool close(double a, double b, double rel, double abs_floor);

}  // namespace alocc::ng
