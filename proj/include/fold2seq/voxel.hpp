#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fold2seq/structio.hpp"

namespace fold2seq::voxel {

constexpr int kGridN = 20;
constexpr double kBoxEdge = 40.0;   // Angstrom
constexpr double kVoxelSize = 2.0;  // Angstrom
constexpr int kChannels = io::kNumSseClasses;

// Center of voxel index i along one axis: {-19, -17, ..., 19}.
inline double voxel_center(int i) { return 2.0 * i - (kGridN - 1.0); }

enum class ScalingMode { PerAxis, Isotropic };
enum class OrientationMode { FirstResidueNegZ, PrincipalAxes };

struct VoxelConfig {
    double sigma = 2.0;
    ScalingMode scaling_mode = ScalingMode::PerAxis;
    OrientationMode orientation_mode = OrientationMode::FirstResidueNegZ;
};

// 20x20x20x4 SSE density tensor, row-major in (x, y, z, channel).
struct VoxelGrid {
    std::vector<double> data = std::vector<double>(kGridN * kGridN * kGridN * kChannels, 0.0);

    double& at(int x, int y, int z, int c) {
        return data[((static_cast<size_t>(x) * kGridN + y) * kGridN + z) * kChannels + c];
    }
    double at(int x, int y, int z, int c) const {
        return data[((static_cast<size_t>(x) * kGridN + y) * kGridN + z) * kChannels + c];
    }
};

std::string to_string(ScalingMode m);
std::string to_string(OrientationMode m);
ScalingMode scaling_mode_from_string(const std::string& s);
OrientationMode orientation_mode_from_string(const std::string& s);

// Translates the center of geometry to the origin under a rigid transform,
// then rotates per mode. FirstResidueNegZ puts residue 1 on the negative z
// axis; PrincipalAxes aligns axes with descending-variance eigenvectors,
// signs fixed to the first residue's hemisphere.
io::Structure canonical_orient(const io::Structure& s, OrientationMode mode);

// Scales coordinates so the largest |coordinate| per axis lands on the
// outermost voxel center (19 A). PerAxis scales each axis independently;
// Isotropic applies the smallest per-axis ratio everywhere. A zero-extent
// axis falls back to the isotropic ratio.
struct RescaleResult {
    io::Structure structure;
    std::array<double, 3> ratio;
};
RescaleResult rescale(const io::Structure& s, const VoxelConfig& cfg);

// Gaussian SSE density: grid(v, c) = sum_j exp(-|c_j - v|^2 / sigma^2) over
// residues j with SSE class c. Expects an oriented, rescaled structure.
VoxelGrid voxelize(const io::Structure& s, const VoxelConfig& cfg);

// The 9 right-hand rotations by 90/180/270 degrees about x, y, z (original
// not included). Variant ids get a "__r<axis><deg>" suffix.
std::vector<io::Structure> augment_rotations(const io::Structure& s);

VoxelGrid average_ensemble(const std::vector<VoxelGrid>& grids);

// Removes one contiguous stretch of floor(p*N) residues at a seeded-uniform
// start; survivors keep their order and are renumbered 1..N'.
io::Structure mask_missing(const io::Structure& s, double p, uint64_t seed);

// Binary grid format: 16-byte header ("F2SGRID\0", u32 version, 4 reserved
// bytes), then 20*20*20*4 little-endian f32 in (x, y, z, channel) order.
// The JSON sidecar at <path>.json records id, r, sigma and the modes.
constexpr uint32_t kGridFormatVersion = 1;

struct GridSidecar {
    std::string id;
    std::array<double, 3> ratio{1.0, 1.0, 1.0};
    double sigma = 2.0;
    ScalingMode scaling_mode = ScalingMode::PerAxis;
    OrientationMode orientation_mode = OrientationMode::FirstResidueNegZ;
};

void save_grid(const VoxelGrid& grid, const GridSidecar& meta, const std::string& path);
VoxelGrid load_grid(const std::string& path, GridSidecar* meta = nullptr);

}  // namespace fold2seq::voxel
