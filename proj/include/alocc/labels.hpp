#pragma once

#include <cstdint>

namespace alocc {

// Voxel and pixel label maps store one semantic class id per cell, with this
// sentinel for empty space. Classes use 0..n_classes-1 everywhere, so a scene
// may define at most 255 of them.
inline constexpr std::uint8_t kEmptyLabel = 255;

}  // namespace alocc
