#include "alocc/io.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <numeric>

#include "alocc/errors.hpp"

namespace alocc::io {

namespace {

void put_bytes(std::ofstream& out, std::uint64_t value, int n) {
  char buf[8];
  for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  out.write(buf, n);
}

void put_u32(std::ofstream& out, std::uint32_t v) { put_bytes(out, v, 4); }
void put_u64(std::ofstream& out, std::uint64_t v) { put_bytes(out, v, 8); }
void put_f64(std::ofstream& out, double v) {
  put_bytes(out, std::bit_cast<std::uint64_t>(v), 8);
}

std::uint64_t take_bytes(std::ifstream& in, const std::string& path, int n) {
  char buf[8];
  in.read(buf, n);
  if (in.gcount() != n) throw DataError(path + ": truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return v;
}

std::uint32_t take_u32(std::ifstream& in, const std::string& path) {
  return static_cast<std::uint32_t>(take_bytes(in, path, 4));
}
std::uint64_t take_u64(std::ifstream& in, const std::string& path) {
  return take_bytes(in, path, 8);
}
double take_f64(std::ifstream& in, const std::string& path) {
  return std::bit_cast<double>(take_bytes(in, path, 8));
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(path + ": cannot open for writing");
  return out;
}

std::ifstream open_in(const std::string& path, const char magic[4]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  char head[4];
  in.read(head, 4);
  if (in.gcount() != 4 || !std::equal(head, head + 4, magic))
    throw DataError(path + ": wrong magic, expected " + std::string(magic, 4));
  return in;
}

void finish(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw DataError(path + ": write failed");
}

}  // namespace

void write_tensor(const std::string& path, const ng::Tensor& tensor) {
  std::ofstream out = open_out(path);
  out.write("OCLT", 4);
  put_u32(out, static_cast<std::uint32_t>(tensor.shape().size()));
  for (std::size_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < tensor.numel(); ++i) put_f64(out, tensor.data()[i]);
  finish(out, path);
}

ng::Tensor read_tensor(const std::string& path) {
  std::ifstream in = open_in(path, "OCLT");
  const std::uint32_t rank = take_u32(in, path);
  if (rank > 8) throw DataError(path + ": implausible tensor rank");
  ng::Shape shape(rank);
  for (std::uint32_t d = 0; d < rank; ++d) shape[d] = take_u32(in, path);
  std::vector<double> data(ng::shape_numel(shape));
  for (double& v : data) v = take_f64(in, path);
  return ng::Tensor(std::move(shape), std::move(data));
}

void write_transfer(const std::string& path, const lift::SparseTransferMatrix& m) {
  std::vector<std::size_t> order(m.rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (m.rows[a] != m.rows[b]) return m.rows[a] < m.rows[b];
    return m.cols[a] < m.cols[b];
  });

  std::ofstream out = open_out(path);
  out.write("OCMT", 4);
  put_u64(out, m.rows.size());
  for (std::size_t i : order) {
    put_u64(out, m.rows[i]);
    put_u64(out, m.cols[i]);
    put_f64(out, m.values.data()[i]);
  }
  finish(out, path);
}

TransferTriplets read_transfer(const std::string& path) {
  std::ifstream in = open_in(path, "OCMT");
  const std::uint64_t count = take_u64(in, path);
  TransferTriplets t;
  t.rows.reserve(count);
  t.cols.reserve(count);
  t.values.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    t.rows.push_back(take_u64(in, path));
    t.cols.push_back(take_u64(in, path));
    t.values.push_back(take_f64(in, path));
  }
  return t;
}

namespace {

void write_grid_header(std::ofstream& out, std::uint32_t kind,
                       const std::array<std::size_t, 3>& dims) {
  out.write("OCGR", 4);
  put_u32(out, kind);
  for (std::size_t d : dims) put_u32(out, static_cast<std::uint32_t>(d));
}

std::size_t grid_cells(const std::array<std::size_t, 3>& dims) {
  return dims[0] * dims[1] * dims[2];
}

}  // namespace

void write_labels(const std::string& path, const std::array<std::size_t, 3>& dims,
                  const std::vector<std::uint8_t>& labels) {
  detail::require(labels.size() == grid_cells(dims),
                  "write_labels: label count does not match the extents");
  std::ofstream out = open_out(path);
  write_grid_header(out, kGridLabels, dims);
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
  finish(out, path);
}

void write_flow(const std::string& path, const std::array<std::size_t, 3>& dims,
                const std::vector<double>& flow) {
  detail::require(flow.size() == 2 * grid_cells(dims),
                  "write_flow: flow size must be twice the voxel count");
  std::ofstream out = open_out(path);
  write_grid_header(out, kGridFlow, dims);
  for (double v : flow) put_f64(out, v);
  finish(out, path);
}

GridFile read_grid(const std::string& path) {
  std::ifstream in = open_in(path, "OCGR");
  GridFile g;
  g.kind = take_u32(in, path);
  if (g.kind != kGridLabels && g.kind != kGridFlow)
    throw DataError(path + ": unknown grid payload kind");
  for (std::size_t& d : g.dims) d = take_u32(in, path);
  const std::size_t cells = grid_cells(g.dims);
  if (g.kind == kGridLabels) {
    g.labels.resize(cells);
    in.read(reinterpret_cast<char*>(g.labels.data()),
            static_cast<std::streamsize>(cells));
    if (static_cast<std::size_t>(in.gcount()) != cells)
      throw DataError(path + ": truncated file");
  } else {
    g.flow.resize(2 * cells);
    for (double& v : g.flow) v = take_f64(in, path);
  }
  return g;
}

}  // namespace alocc::io
