#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cslr/tensor.hpp"

namespace cslr {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

inline constexpr std::size_t kPoseJointCount = 22;
inline constexpr std::size_t kHandJointCount = 21;
inline constexpr std::size_t kTotalJointCount = kPoseJointCount + 2 * kHandJointCount;  // 64

// Per-frame 3D joint estimates: 22 upper-body pose joints plus 21 joints per
// hand. Missing joints are all-zero with visibility cleared.
struct SkeletonFrame {
  std::array<Vec3, kPoseJointCount> pose{};
  std::array<Vec3, kHandJointCount> left_hand{};
  std::array<Vec3, kHandJointCount> right_hand{};
  std::array<bool, kTotalJointCount> visibility;

  SkeletonFrame() { visibility.fill(true); }

  // Flat joint access in file order: pose, left hand, right hand.
  const Vec3& joint(std::size_t i) const;
  Vec3& joint(std::size_t i);
};

using KeypointSequence = std::vector<SkeletonFrame>;

using IndexPair = std::pair<int, int>;

// Edge and parent structure over the skeleton. The pose bone set covers the
// shoulder bridge, both arm chains, and the wrist/finger-landmark triangles;
// face landmarks contribute raw coordinates only. Hands follow the standard
// 21-joint tree rooted at the wrist.
struct SkeletonTopology {
  std::vector<IndexPair> pose_bones;        // 14 pairs over pose joints
  std::vector<IndexPair> hand_bones;        // 20 pairs, shared by both hands
  std::vector<int> pose_parents;            // parent of pose joint i+1, i in [0, 21)
  std::vector<int> hand_parents;            // parent of hand joint i+1, i in [0, 20)
  std::vector<IndexPair> pose_distance_pairs;  // 4: palm-palm, palm-elbow, palm-shoulder x2
  std::vector<IndexPair> hand_distance_pairs;  // 5: (8,0) (12,0) (16,0) (20,0) (4,0)

  static const SkeletonTopology& standard();

  // Throws ConfigError when indices are out of range, bones degenerate,
  // parent maps cyclic, or the hand distance list deviates.
  void validate() const;
};

inline constexpr std::size_t kPoseBoneCount = 14;
inline constexpr std::size_t kHandBoneCount = 20;
inline constexpr std::size_t kBoneFeatureCount = kPoseBoneCount + 2 * kHandBoneCount;  // 54
inline constexpr std::size_t kRelativeFeatureCount = 3 * (21 + 2 * 20);                // 183
inline constexpr std::size_t kDistanceFeatureCount = 4 + 2 * 5;                        // 14

// Canonical per-frame feature layout:
//   [0,192)    raw coordinates (pose 66, left hand 63, right hand 63)
//   [192,246)  bone lengths (pose 14, left 20, right 20)
//   [246,429)  parent-relative positions (pose 63, left 60, right 60)
//   [429,443)  joint distances (pose 4, left 5, right 5)
inline constexpr std::size_t kRawOffset = 0;
inline constexpr std::size_t kBoneOffset = 192;
inline constexpr std::size_t kRelativeOffset = 246;
inline constexpr std::size_t kDistanceOffset = 429;
inline constexpr std::size_t kFeatureDim = 443;

struct FeatureVector {
  std::array<double, kFeatureDim> values{};

  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }
  static constexpr std::size_t size() { return kFeatureDim; }
};

// Euclidean length of each bone: 14 pose, then 20 left-hand, then 20
// right-hand, in topology order.
std::vector<double> bone_lengths(const SkeletonFrame& frame, const SkeletonTopology& topology);

// (child - parent) offsets for every non-root joint: 21 pose joints then 20
// per hand, three components each.
std::vector<double> relative_positions(const SkeletonFrame& frame, const SkeletonTopology& topology);

// Distances for the configured pose pairs (4) then each hand's pairs (5 + 5).
std::vector<double> pairwise_distances(const SkeletonFrame& frame, const SkeletonTopology& topology);

FeatureVector assemble_feature_vector(const SkeletonFrame& frame, const SkeletonTopology& topology);

// x + N(0, sigma^2) i.i.d. per component from a generator seeded with `seed`.
FeatureVector add_gaussian_noise(const FeatureVector& x, double sigma, std::uint64_t seed);

// Affine map into the encoder dimension: weights [443 x d], bias [d].
Tensor project_features(const FeatureVector& x, const Tensor& weights, const Tensor& bias);

// Stacks per-frame feature vectors into a [T x 443] constant tensor.
Tensor sequence_tensor(const std::vector<FeatureVector>& features);

std::vector<FeatureVector> featurize_sequence(const KeypointSequence& frames,
                                              const SkeletonTopology& topology);

// Keypoint stream file: one frame per line, "index x0 y0 z0 ... x63 y63 z63"
// with space-separated decimal floats and indices counting from 0.
KeypointSequence read_keypoint_file(const std::filesystem::path& path);
void write_keypoint_file(const std::filesystem::path& path, const KeypointSequence& frames);

}  // namespace cslr
