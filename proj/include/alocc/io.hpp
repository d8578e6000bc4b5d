#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "alocc/lifting.hpp"
#include "alocc/tensor.hpp"

namespace alocc::io {

// All files are little-endian binary and start with a four-byte magic. Every
// reader throws DataError with the offending path on open failures, short
// reads, or a wrong magic.

// Tensor dump "OCLT": magic, u32 rank, u32 per-axis extents, then the
// row-major f64 payload.
void write_tensor(const std::string& path, const ng::Tensor& tensor);
ng::Tensor read_tensor(const std::string& path);

// Sparse transfer dump "OCMT": magic, u64 entry count, then (u64 row,
// u64 col, f64 weight) records sorted by (row, col).
struct TransferTriplets {
  std::vector<std::uint64_t> rows;
  std::vector<std::uint64_t> cols;
  std::vector<double> values;
};
void write_transfer(const std::string& path, const lift::SparseTransferMatrix& m);
TransferTriplets read_transfer(const std::string& path);

// Voxel grid dump "OCGR": magic, u32 payload kind, u32 extents (h, w, z),
// then the payload. Kind 0 stores one u8 class id per voxel (255 = empty);
// kind 1 stores two f64 velocity components per voxel, interleaved (x, y).
inline constexpr std::uint32_t kGridLabels = 0;
inline constexpr std::uint32_t kGridFlow = 1;

void write_labels(const std::string& path, const std::array<std::size_t, 3>& dims,
                  const std::vector<std::uint8_t>& labels);
void write_flow(const std::string& path, const std::array<std::size_t, 3>& dims,
                const std::vector<double>& flow);

struct GridFile {
  std::uint32_t kind = kGridLabels;
  std::array<std::size_t, 3> dims{};
  std::vector<std::uint8_t> labels;  // filled for kind 0
  std::vector<double> flow;          // filled for kind 1
};
GridFile read_grid(const std::string& path);

}  // namespace alocc::io
