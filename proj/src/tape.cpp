#include "alocc/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace alocc::ng {

namespace {

constexpr double kCosineNormEps = 1e-8;

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Strides of `b` aligned against the trailing dimensions of `a`, with stride 0
// on broadcast dimensions. Only `b` may broadcast; `a` fixes the output shape.
struct BroadcastMap {
  Shape a_shape;
  std::vector<std::size_t> b_strides;  // one per dimension of a
  bool identity = false;

  std::size_t map(std::size_t a_flat) const {
    if (identity) return a_flat;
    std::size_t b_flat = 0;
    for (std::size_t d = a_shape.size(); d-- > 0;) {
      const std::size_t coord = a_flat % a_shape[d];
      a_flat /= a_shape[d];
      b_flat += coord * b_strides[d];
    }
    return b_flat;
  }
};

BroadcastMap make_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastMap m;
  m.a_shape = a;
  if (shape_eq(a, b)) {
    m.identity = true;
    return m;
  }
  detail::require(b.size() <= a.size(),
                  std::string(op) + ": shape " + shape_str(b) +
                      " does not broadcast to " + shape_str(a));
  m.b_strides.assign(a.size(), 0);
  // Row-major strides of b, aligned to the trailing dims of a.
  std::size_t stride = 1;
  const std::size_t offset = a.size() - b.size();
  std::vector<std::size_t> raw(b.size(), 0);
  for (std::size_t d = b.size(); d-- > 0;) {
    raw[d] = stride;
    stride *= b[d];
  }
  for (std::size_t d = 0; d < b.size(); ++d) {
    const std::size_t ad = a[offset + d];
    if (b[d] == ad) {
      m.b_strides[offset + d] = raw[d];
    } else {
      detail::require(b[d] == 1, std::string(op) + ": shape " + shape_str(b) +
                                     " does not broadcast to " + shape_str(a));
    }
  }
  return m;
}

std::size_t row_width_lastdim(const Tensor& t, const char* op) {
  detail::require(!t.shape().empty() && t.shape().back() > 0,
                  std::string(op) + ": needs a non-empty last dimension, got " +
                      shape_str(t.shape()));
  return t.shape().back();
}

std::vector<std::int64_t> indices_from_tensor(const Tensor& t, const char* op) {
  std::vector<std::int64_t> out;
  out.reserve(t.numel());
  for (double v : t.data()) {
    detail::require(v == std::floor(v),
                    std::string(op) + ": index tensor holds non-integral value");
    out.push_back(static_cast<std::int64_t>(v));
  }
  return out;
}

}  // namespace

Tensor Tape::record(Node node) {
  node.value.node_ = static_cast<int>(nodes_.size());
  Tensor out = node.value;
  nodes_.push_back(std::move(node));
  return out;
}

const Tensor& Tape::value_of(int node) const {
  detail::require(node >= 0 && node < static_cast<int>(nodes_.size()),
                  "tape: node id out of range");
  return nodes_[static_cast<std::size_t>(node)].value;
}

Tensor Tape::leaf(const Tensor& value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = value;
  n.value.set_requires_grad(true);
  return record(std::move(n));
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  const BroadcastMap bm = make_broadcast(a.shape(), b.shape(), "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.data()[bm.map(i)];
  Node n;
  n.op = Op::kAdd;
  n.a = a.node();
  n.b = b.node();
  n.va = a;
  n.vb = b;
  n.value = Tensor(a.shape(), std::move(out));
  return record(std::move(n));
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  const BroadcastMap bm = make_broadcast(a.shape(), b.shape(), "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.data()[bm.map(i)];
  Node n;
  n.op = Op::kMul;
  n.a = a.node();
  n.b = b.node();
  n.va = a;
  n.vb = b;
  n.value = Tensor(a.shape(), std::move(out));
  return record(std::move(n));
}

Tensor Tape::div(const Tensor& a, const Tensor& b) {
  const BroadcastMap bm = make_broadcast(a.shape(), b.shape(), "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) / b.data()[bm.map(i)];
  Node n;
  n.op = Op::kDiv;
  n.a = a.node();
  n.b = b.node();
  n.va = a;
  n.vb = b;
  n.value = Tensor(a.shape(), std::move(out));  // rejects Inf/NaN from b ~ 0
  return record(std::move(n));
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.shape().size() == 2 && b.shape().size() == 2 &&
                      a.shape()[1] == b.shape()[0],
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  std::vector<double> out(m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double av = a.data()[i * k + l];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < p; ++j) out[i * p + j] += av * b.data()[l * p + j];
    }
  Node n;
  n.op = Op::kMatmul;
  n.a = a.node();
  n.b = b.node();
  n.va = a;
  n.vb = b;
  n.value = Tensor({m, p}, std::move(out));
  return record(std::move(n));
}

Tensor Tape::matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require(a.shape().size() == 2 && b.shape().size() == 2 &&
                      a.shape()[1] == b.shape()[1],
                  "matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()) + "^T");
  const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[0];
  std::vector<double> out(m * p, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += a.data()[i * k + l] * b.data()[j * k + l];
      out[i * p + j] = acc;
    }
  Node n;
  n.op = Op::kMatmulNT;
  n.a = a.node();
  n.b = b.node();
  n.va = a;
  n.vb = b;
  n.value = Tensor({m, p}, std::move(out));
  return record(std::move(n));
}

Tensor Tape::scatter_add(const Tensor& src, const std::vector<std::int64_t>& index,
                         std::size_t rows) {
  detail::require(!src.shape().empty(), "scatter_add: source must have rank >= 1");
  detail::require(src.shape()[0] == index.size(),
                  "scatter_add: index count " + std::to_string(index.size()) +
                      " does not match source rows " + std::to_string(src.shape()[0]));
  const std::size_t width = src.shape()[0] == 0 ? 0 : src.numel() / src.shape()[0];
  Shape out_shape = src.shape();
  out_shape[0] = rows;
  std::vector<double> out(rows * width, 0.0);
  // Ascending source order fixes the per-destination accumulation sequence,
  // so repeated runs produce bit-identical sums.
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::int64_t dst = index[i];
    detail::require(dst >= 0 && static_cast<std::size_t>(dst) < rows,
                    "scatter_add: destination index out of range");
    for (std::size_t c = 0; c < width; ++c)
      out[static_cast<std::size_t>(dst) * width + c] += src.data()[i * width + c];
  }
  Node n;
  n.op = Op::kScatterAdd;
  n.a = src.node();
  n.va = src;
  n.indices = index;
  n.rows = rows;
  n.value = Tensor(std::move(out_shape), std::move(out));
  return record(std::move(n));
}

Tensor Tape::gather(const Tensor& src, const std::vector<std::int64_t>& index) {
  detail::require(!src.shape().empty(), "gather: source must have rank >= 1");
  const std::size_t rows = src.shape()[0];
  const std::size_t width = rows == 0 ? 0 : src.numel() / rows;
  Shape out_shape = src.shape();
  out_shape[0] = index.size();
  std::vector<double> out(index.size() * width);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const std::int64_t s = index[i];
    detail::require(s >= 0 && static_cast<std::size_t>(s) < rows,
                    "gather: source index out of range");
    for (std::size_t c = 0; c < width; ++c)
      out[i * width + c] = src.data()[static_cast<std::size_t>(s) * width + c];
  }
  Node n;
  n.op = Op::kGather;
  n.a = src.node();
  n.va = src;
  n.indices = index;
  n.value = Tensor(std::move(out_shape), std::move(out));
  return record(std::move(n));
}

Tensor Tape::softmax_lastdim(const Tensor& a) {
  const std::size_t width = row_width_lastdim(a, "softmax_lastdim");
  const std::size_t rows = a.numel() / width;
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * width;
    double* y = out.data() + r * width;
    double mx = x[0];
    for (std::size_t c = 1; c < width; ++c) mx = std::max(mx, x[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      y[c] = std::exp(x[c] - mx);
      denom += y[c];
    }
    for (std::size_t c = 0; c < width; ++c) y[c] /= denom;
  }
  Node n;
  n.op = Op::kSoftmaxLastDim;
  n.a = a.node();
  n.va = a;
  n.value = Tensor(a.shape(), std::move(out));
  return record(std::move(n));
}

Tensor Tape::sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(a.at(i));
  Node n;
  n.op = Op::kSigmoid;
  n.a = a.node();
  n.va = a;
  n.value = Tensor(a.shape(), std::move(out));
  return record(std::move(n));
}

Tensor Tape::log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (a.at(i) <= 0.0) throw NumericError("log: non-positive input");
    out[i] = std::log(a.at(i));
  }
  Node n;
  n.op = Op::kLog;
  n.a = a.node();
  n.va = a;
  n.value = Tensor(a.shape(), std::move(out));
  return record(std::move(n));
}

Tensor Tape::square(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * a.at(i);
  Node n;
  n.op = Op::kSquare;
  n.a = a.node();
  n.va = a;
  n.value = Tensor(a.shape(), std::move(out));
  return record(std::move(n));
}

Tensor Tape::sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Node n;
  n.op = Op::kSum;
  n.a = a.node();
  n.va = a;
  n.value = Tensor::scalar(acc);
  return record(std::move(n));
}

Tensor Tape::mean(const Tensor& a) {
  detail::require(a.numel() > 0, "mean: empty tensor");
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Node n;
  n.op = Op::kMean;
  n.a = a.node();
  n.va = a;
  n.value = Tensor::scalar(acc / static_cast<double>(a.numel()));
  return record(std::move(n));
}

Tensor Tape::l2norm_lastdim(const Tensor& a) {
  const std::size_t width = row_width_lastdim(a, "l2norm_lastdim");
  const std::size_t rows = a.numel() / width;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      const double v = a.data()[r * width + c];
      acc += v * v;
    }
    out[r] = std::sqrt(acc);
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Node n;
  n.op = Op::kL2NormLastDim;
  n.a = a.node();
  n.va = a;
  n.value = Tensor(std::move(out_shape), std::move(out));
  return record(std::move(n));
}

Tensor Tape::cosine_sim_lastdim(const Tensor& a, const Tensor& b) {
  detail::require(shape_eq(a.shape(), b.shape()),
                  "cosine_sim_lastdim: shapes differ, " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  const std::size_t width = row_width_lastdim(a, "cosine_sim_lastdim");
  const std::size_t rows = a.numel() / width;
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < width; ++c) {
      const double av = a.data()[r * width + c];
      const double bv = b.data()[r * width + c];
      dot += av * bv;
      na += av * av;
      nb += bv * bv;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < kCosineNormEps || nb < kCosineNormEps) {
      out[r] = 0.0;
    } else {
      // Clamp only mops up roundoff; mathematically the value is in [-1,1].
      out[r] = std::clamp(dot / (na * nb), -1.0, 1.0);
    }
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  Node n;
  n.op = Op::kCosineSimLastDim;
  n.a = a.node();
  n.b = b.node();
  n.va = a;
  n.vb = b;
  n.value = Tensor(std::move(out_shape), std::move(out));
  return record(std::move(n));
}

Tensor Tape::bilinear_sample_2d(const Tensor& src, const std::vector<double>& coords) {
  detail::require(src.shape().size() == 3,
                  "bilinear_sample_2d: source must be [H,W,C], got " +
                      shape_str(src.shape()));
  detail::require(coords.size() % 2 == 0,
                  "bilinear_sample_2d: coordinate list must hold (row,col) pairs");
  const std::size_t H = src.shape()[0], W = src.shape()[1], C = src.shape()[2];
  const std::size_t samples = coords.size() / 2;
  std::vector<double> out(samples * C, 0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    const double x = coords[2 * s], y = coords[2 * s + 1];
    detail::require(std::isfinite(x) && std::isfinite(y),
                    "bilinear_sample_2d: non-finite coordinate");
    const double x0 = std::floor(x), y0 = std::floor(y);
    const double fx = x - x0, fy = y - y0;
    const std::int64_t ix = static_cast<std::int64_t>(x0);
    const std::int64_t iy = static_cast<std::int64_t>(y0);
    const double w[4] = {(1.0 - fx) * (1.0 - fy), (1.0 - fx) * fy, fx * (1.0 - fy),
                         fx * fy};
    const std::int64_t cx[4] = {ix, ix, ix + 1, ix + 1};
    const std::int64_t cy[4] = {iy, iy + 1, iy, iy + 1};
    for (int k = 0; k < 4; ++k) {
      if (cx[k] < 0 || cy[k] < 0 || cx[k] >= static_cast<std::int64_t>(H) ||
          cy[k] >= static_cast<std::int64_t>(W))
        continue;  // zero padding outside the map
      const std::size_t base =
          (static_cast<std::size_t>(cx[k]) * W + static_cast<std::size_t>(cy[k])) * C;
      for (std::size_t c = 0; c < C; ++c) out[s * C + c] += w[k] * src.data()[base + c];
    }
  }
  Node n;
  n.op = Op::kBilinearSample2d;
  n.a = src.node();
  n.va = src;
  n.coords = coords;
  n.value = Tensor({samples, C}, std::move(out));
  return record(std::move(n));
}

TrilinearScatter Tape::trilinear_scatter_weights(const Tensor& points) {
  detail::require(points.shape().size() == 2 && points.shape()[1] == 3,
                  "trilinear_scatter_weights: points must be [N,3], got " +
                      shape_str(points.shape()));
  const std::size_t count = points.shape()[0];
  std::vector<double> weights(count * 8);
  std::vector<std::int64_t> corners(count * 8 * 3);
  for (std::size_t i = 0; i < count; ++i) {
    double base[3], frac[3];
    for (int a = 0; a < 3; ++a) {
      const double p = points.data()[i * 3 + a];
      base[a] = std::floor(p);
      frac[a] = p - base[a];
    }
    for (int s = 0; s < 8; ++s) {
      const bool hi[3] = {(s & 4) != 0, (s & 2) != 0, (s & 1) != 0};
      double w = 1.0;
      for (int a = 0; a < 3; ++a) {
        w *= hi[a] ? frac[a] : (1.0 - frac[a]);
        corners[(i * 8 + s) * 3 + a] =
            static_cast<std::int64_t>(base[a]) + (hi[a] ? 1 : 0);
      }
      weights[i * 8 + s] = w;
    }
  }
  Node n;
  n.op = Op::kTrilinearScatterWeights;
  n.a = points.node();
  n.va = points;
  n.indices = corners;
  n.value = Tensor({count, 8}, std::move(weights));
  TrilinearScatter result;
  result.weights = record(std::move(n));
  result.corners = std::move(corners);
  return result;
}

Tensor Tape::forward_op(const std::string& name, const std::vector<Tensor>& inputs) {
  auto need = [&](std::size_t n) {
    detail::require(inputs.size() == n, "forward_op: " + name + " expects " +
                                            std::to_string(n) + " inputs, got " +
                                            std::to_string(inputs.size()));
  };
  if (name == "add") {
    need(2);
    return add(inputs[0], inputs[1]);
  }
  if (name == "mul") {
    need(2);
    return mul(inputs[0], inputs[1]);
  }
  if (name == "div") {
    need(2);
    return div(inputs[0], inputs[1]);
  }
  if (name == "matmul") {
    need(2);
    return matmul(inputs[0], inputs[1]);
  }
  if (name == "scatter_add") {
    need(3);
    const double rows = inputs[2].scalar_value();
    detail::require(rows >= 0 && rows == std::floor(rows),
                    "forward_op: scatter_add row count must be a nonnegative integer");
    return scatter_add(inputs[0], indices_from_tensor(inputs[1], "scatter_add"),
                       static_cast<std::size_t>(rows));
  }
  if (name == "gather") {
    need(2);
    return gather(inputs[0], indices_from_tensor(inputs[1], "gather"));
  }
  if (name == "softmax_lastdim") {
    need(1);
    return softmax_lastdim(inputs[0]);
  }
  if (name == "sigmoid") {
    need(1);
    return sigmoid(inputs[0]);
  }
  if (name == "log") {
    need(1);
    return log(inputs[0]);
  }
  if (name == "square") {
    need(1);
    return square(inputs[0]);
  }
  if (name == "sum") {
    need(1);
    return sum(inputs[0]);
  }
  if (name == "mean") {
    need(1);
    return mean(inputs[0]);
  }
  if (name == "l2norm_lastdim") {
    need(1);
    return l2norm_lastdim(inputs[0]);
  }
  if (name == "cosine_sim_lastdim") {
    need(2);
    return cosine_sim_lastdim(inputs[0], inputs[1]);
  }
  if (name == "bilinear_sample_2d") {
    need(2);
    const auto& c = inputs[1];
    detail::require(c.shape().size() == 2 && c.shape()[1] == 2,
                    "forward_op: bilinear_sample_2d coords must be [N,2]");
    return bilinear_sample_2d(inputs[0],
                              std::vector<double>(c.data().begin(), c.data().end()));
  }
  if (name == "trilinear_scatter_weights") {
    need(1);
    return trilinear_scatter_weights(inputs[0]).weights;
  }
  throw ContractError("forward_op: unknown op '" + name + "'");
}

std::unordered_map<int, Tensor> Tape::backward(const Tensor& root) const {
  detail::require(root.node() >= 0 && root.node() < static_cast<int>(nodes_.size()),
                  "backward: root is not on this tape");
  detail::require(root.numel() == 1, "backward: root must be scalar, got shape " +
                                         shape_str(root.shape()));

  std::vector<std::vector<double>> grads(nodes_.size());
  auto slot = [&](int id) -> std::vector<double>& {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(id)].value.numel(), 0.0);
    return g;
  };
  slot(root.node())[0] = 1.0;

  for (int id = root.node(); id >= 0; --id) {
    const auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        if (n.a >= 0) {
          auto& ga = slot(n.a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (n.b >= 0) {
          auto& gb = slot(n.b);
          const BroadcastMap bm = make_broadcast(n.va.shape(), n.vb.shape(), "add");
          for (std::size_t i = 0; i < g.size(); ++i) gb[bm.map(i)] += g[i];
        }
        break;
      }
      case Op::kMul: {
        const BroadcastMap bm = make_broadcast(n.va.shape(), n.vb.shape(), "mul");
        if (n.a >= 0) {
          auto& ga = slot(n.a);
          for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] * n.vb.data()[bm.map(i)];
        }
        if (n.b >= 0) {
          auto& gb = slot(n.b);
          for (std::size_t i = 0; i < g.size(); ++i)
            gb[bm.map(i)] += g[i] * n.va.data()[i];
        }
        break;
      }
      case Op::kDiv: {
        const BroadcastMap bm = make_broadcast(n.va.shape(), n.vb.shape(), "div");
        if (n.a >= 0) {
          auto& ga = slot(n.a);
          for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] / n.vb.data()[bm.map(i)];
        }
        if (n.b >= 0) {
          auto& gb = slot(n.b);
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double bv = n.vb.data()[bm.map(i)];
            gb[bm.map(i)] -= g[i] * n.va.data()[i] / (bv * bv);
          }
        }
        break;
      }
      case Op::kMatmul: {
        const std::size_t m = n.va.shape()[0], k = n.va.shape()[1], p = n.vb.shape()[1];
        if (n.a >= 0) {
          auto& ga = slot(n.a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              double acc = 0.0;
              for (std::size_t j = 0; j < p; ++j)
                acc += g[i * p + j] * n.vb.data()[l * p + j];
              ga[i * k + l] += acc;
            }
        }
        if (n.b >= 0) {
          auto& gb = slot(n.b);
          for (std::size_t l = 0; l < k; ++l)
            for (std::size_t j = 0; j < p; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < m; ++i)
                acc += n.va.data()[i * k + l] * g[i * p + j];
              gb[l * p + j] += acc;
            }
        }
        break;
      }
      case Op::kMatmulNT: {
        const std::size_t m = n.va.shape()[0], k = n.va.shape()[1], p = n.vb.shape()[0];
        if (n.a >= 0) {
          auto& ga = slot(n.a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              double acc = 0.0;
              for (std::size_t j = 0; j < p; ++j)
                acc += g[i * p + j] * n.vb.data()[j * k + l];
              ga[i * k + l] += acc;
            }
        }
        if (n.b >= 0) {
          auto& gb = slot(n.b);
          for (std::size_t j = 0; j < p; ++j)
            for (std::size_t l = 0; l < k; ++l) {
              double acc = 0.0;
              for (std::size_t i = 0; i < m; ++i)
                acc += g[i * p + j] * n.va.data()[i * k + l];
              gb[j * k + l] += acc;
            }
        }
        break;
      }
      case Op::kScatterAdd: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        const std::size_t width =
            n.indices.empty() ? 0 : n.va.numel() / n.indices.size();
        for (std::size_t i = 0; i < n.indices.size(); ++i) {
          const std::size_t dst = static_cast<std::size_t>(n.indices[i]);
          for (std::size_t c = 0; c < width; ++c)
            ga[i * width + c] += g[dst * width + c];
        }
        break;
      }
      case Op::kGather: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        const std::size_t width =
            n.indices.empty() ? 0 : n.value.numel() / n.indices.size();
        for (std::size_t i = 0; i < n.indices.size(); ++i) {
          const std::size_t src = static_cast<std::size_t>(n.indices[i]);
          for (std::size_t c = 0; c < width; ++c)
            ga[src * width + c] += g[i * width + c];
        }
        break;
      }
      case Op::kSoftmaxLastDim: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        const std::size_t width = n.value.shape().back();
        const std::size_t rows = n.value.numel() / width;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = n.value.data().data() + r * width;
          const double* gr = g.data() + r * width;
          double dot = 0.0;
          for (std::size_t c = 0; c < width; ++c) dot += gr[c] * y[c];
          for (std::size_t c = 0; c < width; ++c)
            ga[r * width + c] += y[c] * (gr[c] - dot);
        }
        break;
      }
      case Op::kSigmoid: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double y = n.value.data()[i];
          ga[i] += g[i] * y * (1.0 - y);
        }
        break;
      }
      case Op::kLog: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / n.va.data()[i];
        break;
      }
      case Op::kSquare: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * n.va.data()[i] * g[i];
        break;
      }
      case Op::kSum: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
        break;
      }
      case Op::kMean: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        const double scale = g[0] / static_cast<double>(n.va.numel());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += scale;
        break;
      }
      case Op::kL2NormLastDim: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        const std::size_t width = n.va.shape().back();
        const std::size_t rows = n.va.numel() / width;
        for (std::size_t r = 0; r < rows; ++r) {
          const double norm = n.value.data()[r];
          if (norm == 0.0) continue;  // zero vector: gradient defined as zero
          const double scale = g[r] / norm;
          for (std::size_t c = 0; c < width; ++c)
            ga[r * width + c] += scale * n.va.data()[r * width + c];
        }
        break;
      }
      case Op::kCosineSimLastDim: {
        const std::size_t width = n.va.shape().back();
        const std::size_t rows = n.va.numel() / width;
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0, na2 = 0.0, nb2 = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            const double av = n.va.data()[r * width + c];
            const double bv = n.vb.data()[r * width + c];
            dot += av * bv;
            na2 += av * av;
            nb2 += bv * bv;
          }
          const double na = std::sqrt(na2), nb = std::sqrt(nb2);
          if (na < kCosineNormEps || nb < kCosineNormEps) continue;
          const double inv = 1.0 / (na * nb);
          const double cosv = dot * inv;
          if (n.a >= 0) {
            auto& ga = slot(n.a);
            for (std::size_t c = 0; c < width; ++c)
              ga[r * width + c] += g[r] * (n.vb.data()[r * width + c] * inv -
                                           cosv * n.va.data()[r * width + c] / na2);
          }
          if (n.b >= 0) {
            auto& gb = slot(n.b);
            for (std::size_t c = 0; c < width; ++c)
              gb[r * width + c] += g[r] * (n.va.data()[r * width + c] * inv -
                                           cosv * n.vb.data()[r * width + c] / nb2);
          }
        }
        break;
      }
      case Op::kBilinearSample2d: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        const std::size_t H = n.va.shape()[0], W = n.va.shape()[1],
                          C = n.va.shape()[2];
        const std::size_t samples = n.coords.size() / 2;
        for (std::size_t s = 0; s < samples; ++s) {
          const double x = n.coords[2 * s], y = n.coords[2 * s + 1];
          const double x0 = std::floor(x), y0 = std::floor(y);
          const double fx = x - x0, fy = y - y0;
          const std::int64_t ix = static_cast<std::int64_t>(x0);
          const std::int64_t iy = static_cast<std::int64_t>(y0);
          const double w[4] = {(1.0 - fx) * (1.0 - fy), (1.0 - fx) * fy,
                               fx * (1.0 - fy), fx * fy};
          const std::int64_t cx[4] = {ix, ix, ix + 1, ix + 1};
          const std::int64_t cy[4] = {iy, iy + 1, iy, iy + 1};
          for (int k = 0; k < 4; ++k) {
            if (cx[k] < 0 || cy[k] < 0 || cx[k] >= static_cast<std::int64_t>(H) ||
                cy[k] >= static_cast<std::int64_t>(W))
              continue;
            const std::size_t base = (static_cast<std::size_t>(cx[k]) * W +
                                      static_cast<std::size_t>(cy[k])) *
                                     C;
            for (std::size_t c = 0; c < C; ++c) ga[base + c] += w[k] * g[s * C + c];
          }
        }
        break;
      }
      case Op::kTrilinearScatterWeights: {
        if (n.a < 0) break;
        auto& ga = slot(n.a);
        const std::size_t count = n.va.shape()[0];
        for (std::size_t i = 0; i < count; ++i) {
          double frac[3];
          for (int a = 0; a < 3; ++a) {
            const double p = n.va.data()[i * 3 + a];
            frac[a] = p - std::floor(p);
          }
          for (int s = 0; s < 8; ++s) {
            const double gw = g[i * 8 + s];
            if (gw == 0.0) continue;
            const bool hi[3] = {(s & 4) != 0, (s & 2) != 0, (s & 1) != 0};
            for (int a = 0; a < 3; ++a) {
              double prod = 1.0;
              for (int o = 0; o < 3; ++o) {
                if (o == a) continue;
                prod *= hi[o] ? frac[o] : (1.0 - frac[o]);
              }
              ga[i * 3 + a] += gw * (hi[a] ? prod : -prod);
            }
          }
        }
        break;
      }
    }
  }

  std::unordered_map<int, Tensor> out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op != Op::kLeaf) continue;
    auto& g = grads[id];
    if (g.empty()) g.assign(n.value.numel(), 0.0);
    out.emplace(static_cast<int>(id), Tensor(n.value.shape(), std::move(g)));
  }
  return out;
}

Tensor finite_diff(const std::function<double(const Tensor&)>& fn, const Tensor& x,
                   double step) {
  detail::require(step > 0.0, "finite_diff: step must be positive");
  std::vector<double> grad(x.numel());
  std::vector<double> work(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < work.size(); ++i) {
    const double orig = work[i];
    work[i] = orig + step;
    const double fp = fn(Tensor(x.shape(), work));
    work[i] = orig - step;
    const double fm = fn(Tensor(x.shape(), work));
    work[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff: function returned a non-finite value");
    }
    grad[i] = (fp - fm) / (2.0 * step);
  }
  return Tensor(x.shape(), std::move(grad));
}

bool close(double a, double b, double rel, double abs_floor) {
  const double diff = std::abs(a - b);
  const double scale = std::max(std::abs(a), std::abs(b));
  return diff <= std::max(rel * scale, abs_floor);
}

}  // namespace alocc::ng
