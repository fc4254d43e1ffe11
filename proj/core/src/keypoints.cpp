#include "cslr/keypoints.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "cslr/error.hpp"
#include "cslr/rng.hpp"

namespace cslr {

const Vec3& SkeletonFrame::joint(std::size_t i) const {
  if (i < kPoseJointCount) return pose[i];
  i -= kPoseJointCount;
  if (i < kHandJointCount) return left_hand[i];
  return right_hand[i - kHandJointCount];
}

Vec3& SkeletonFrame::joint(std::size_t i) {
  return const_cast<Vec3&>(static_cast<const SkeletonFrame&>(*this).joint(i));
}

const SkeletonTopology& SkeletonTopology::standard() {
  static const SkeletonTopology topo = [] {
    SkeletonTopology t;
    // Shoulder bridge, arm chains, and the finger-landmark triangles of the
    // upper-body landmark set (0..21; right thumb is outside the set).
    t.pose_bones = {
        {11, 12},                                     // shoulder bridge
        {11, 13}, {13, 15}, {12, 14}, {14, 16},       // arms
        {15, 17}, {15, 19}, {15, 21},                 // left wrist to landmarks
        {17, 19}, {17, 21}, {19, 21},                 // left palm triangle closure
        {16, 18}, {16, 20}, {18, 20},                 // right wrist/palm
    };
    t.hand_bones = {
        {0, 1},  {1, 2},   {2, 3},   {3, 4},    // thumb
        {0, 5},  {5, 6},   {6, 7},   {7, 8},    // index
        {0, 9},  {9, 10},  {10, 11}, {11, 12},  // middle
        {0, 13}, {13, 14}, {14, 15}, {15, 16},  // ring
        {0, 17}, {17, 18}, {18, 19}, {19, 20},  // pinky
    };
    // Parent of pose joint i+1; tree rooted at the nose.
    t.pose_parents = {0, 1, 2, 0, 4, 5, 3, 6, 0, 0, 0, 11, 11, 12, 13, 14, 15, 16, 15, 16, 15};
    // Parent of hand joint i+1; tree rooted at the wrist.
    t.hand_parents = {0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19};
    t.pose_distance_pairs = {{15, 16}, {15, 14}, {15, 11}, {16, 12}};
    t.hand_distance_pairs = {{8, 0}, {12, 0}, {16, 0}, {20, 0}, {4, 0}};
    t.validate();
    return t;
  }();
  return topo;
}

namespace {

void check_pairs(const std::vector<IndexPair>& pairs, int limit, const char* what) {
  for (const auto& [a, b] : pairs) {
    if (a < 0 || b < 0 || a >= limit || b >= limit)
      throw ConfigError(std::string(what) + ": index out of range");
    if (a == b) throw ConfigError(std::string(what) + ": degenerate pair");
  }
}

void check_parents(const std::vector<int>& parents, int joint_count, const char* what) {
  if (static_cast<int>(parents.size()) != joint_count - 1)
    throw ConfigError(std::string(what) + ": expected " + std::to_string(joint_count - 1) + " entries");
  for (std::size_t i = 0; i < parents.size(); ++i) {
    const int child = static_cast<int>(i) + 1;
    int p = parents[i];
    if (p < 0 || p >= joint_count) throw ConfigError(std::string(what) + ": parent out of range");
    // Walking up must terminate at the root without revisiting the child.
    int steps = 0;
    while (p != 0) {
      if (p == child || ++steps > joint_count) throw ConfigError(std::string(what) + ": parent map has a cycle");
      p = parents[p - 1];
    }
  }
}

double dist(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace

void SkeletonTopology::validate() const {
  if (pose_bones.size() != kPoseBoneCount) throw ConfigError("topology: expected 14 pose bones");
  if (hand_bones.size() != kHandBoneCount) throw ConfigError("topology: expected 20 hand bones");
  check_pairs(pose_bones, kPoseJointCount, "pose_bones");
  check_pairs(hand_bones, kHandJointCount, "hand_bones");
  for (std::size_t i = 0; i < pose_bones.size(); ++i)
    for (std::size_t j = i + 1; j < pose_bones.size(); ++j)
      if ((pose_bones[i] == pose_bones[j]) ||
          (pose_bones[i].first == pose_bones[j].second && pose_bones[i].second == pose_bones[j].first))
        throw ConfigError("pose_bones: duplicate pair");
  check_parents(pose_parents, kPoseJointCount, "pose_parents");
  check_parents(hand_parents, kHandJointCount, "hand_parents");
  if (pose_distance_pairs.size() != 4) throw ConfigError("topology: expected 4 pose distance pairs");
  check_pairs(pose_distance_pairs, kPoseJointCount, "pose_distance_pairs");
  const std::vector<IndexPair> expected = {{8, 0}, {12, 0}, {16, 0}, {20, 0}, {4, 0}};
  if (hand_distance_pairs != expected)
    throw ConfigError("topology: hand distance pairs must be (8,0) (12,0) (16,0) (20,0) (4,0)");
}

std::vector<double> bone_lengths(const SkeletonFrame& frame, const SkeletonTopology& topology) {
  std::vector<double> out;
  out.reserve(kBoneFeatureCount);
  for (const auto& [a, b] : topology.pose_bones) out.push_back(dist(frame.pose[a], frame.pose[b]));
  for (const auto& [a, b] : topology.hand_bones) out.push_back(dist(frame.left_hand[a], frame.left_hand[b]));
  for (const auto& [a, b] : topology.hand_bones) out.push_back(dist(frame.right_hand[a], frame.right_hand[b]));
  return out;
}

std::vector<double> relative_positions(const SkeletonFrame& frame, const SkeletonTopology& topology) {
  std::vector<double> out;
  out.reserve(kRelativeFeatureCount);
  auto push = [&out](const Vec3& child, const Vec3& parent) {
    out.push_back(child.x - parent.x);
    out.push_back(child.y - parent.y);
    out.push_back(child.z - parent.z);
  };
  for (std::size_t i = 0; i < topology.pose_parents.size(); ++i)
    push(frame.pose[i + 1], frame.pose[topology.pose_parents[i]]);
  for (std::size_t i = 0; i < topology.hand_parents.size(); ++i)
    push(frame.left_hand[i + 1], frame.left_hand[topology.hand_parents[i]]);
  for (std::size_t i = 0; i < topology.hand_parents.size(); ++i)
    push(frame.right_hand[i + 1], frame.right_hand[topology.hand_parents[i]]);
  return out;
}

std::vector<double> pairwise_distances(const SkeletonFrame& frame, const SkeletonTopology& topology) {
  std::vector<double> out;
  out.reserve(kDistanceFeatureCount);
  for (const auto& [a, b] : topology.pose_distance_pairs) out.push_back(dist(frame.pose[a], frame.pose[b]));
  for (const auto& [a, b] : topology.hand_distance_pairs)
    out.push_back(dist(frame.left_hand[a], frame.left_hand[b]));
  for (const auto& [a, b] : topology.hand_distance_pairs)
    out.push_back(dist(frame.right_hand[a], frame.right_hand[b]));
  return out;
}

FeatureVector assemble_feature_vector(const SkeletonFrame& frame, const SkeletonTopology& topology) {
  FeatureVector f;
  std::size_t k = kRawOffset;
  for (std::size_t i = 0; i < kTotalJointCount; ++i) {
    const Vec3& j = frame.joint(i);
    f[k++] = j.x;
    f[k++] = j.y;
    f[k++] = j.z;
  }
  for (double v : bone_lengths(frame, topology)) f[k++] = v;
  for (double v : relative_positions(frame, topology)) f[k++] = v;
  for (double v : pairwise_distances(frame, topology)) f[k++] = v;
  if (k != kFeatureDim) throw ContractError("assemble_feature_vector: layout does not sum to 443");
  return f;
}

FeatureVector add_gaussian_noise(const FeatureVector& x, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ConfigError("add_gaussian_noise: sigma must be >= 0");
  FeatureVector out = x;
  if (sigma == 0.0) return out;
  Rng rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  for (std::size_t i = 0; i < kFeatureDim; ++i) out[i] += noise(rng);
  return out;
}

Tensor project_features(const FeatureVector& x, const Tensor& weights, const Tensor& bias) {
  if (weights.rank() != 2 || weights.rows() != kFeatureDim)
    throw DimensionError("project_features: weights must be [443 x d], got " +
                         shape_to_string(weights.shape()));
  Tensor row = Tensor::from_values({1, kFeatureDim}, {x.values.begin(), x.values.end()});
  Tensor projected = add_rowwise(matmul(row, weights), bias);
  return reshape(projected, {weights.cols()});
}

Tensor sequence_tensor(const std::vector<FeatureVector>& features) {
  if (features.empty()) throw DataError("sequence_tensor: empty sequence");
  std::vector<double> data;
  data.reserve(features.size() * kFeatureDim);
  for (const FeatureVector& f : features) data.insert(data.end(), f.values.begin(), f.values.end());
  return Tensor::from_values({features.size(), kFeatureDim}, std::move(data));
}

std::vector<FeatureVector> featurize_sequence(const KeypointSequence& frames,
                                              const SkeletonTopology& topology) {
  std::vector<FeatureVector> out;
  out.reserve(frames.size());
  for (const SkeletonFrame& f : frames) out.push_back(assemble_feature_vector(f, topology));
  return out;
}

KeypointSequence read_keypoint_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open keypoint file " + path.string());
  KeypointSequence frames;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    long idx = -1;
    if (!(ss >> idx) || idx != static_cast<long>(line_no))
      throw DataError("keypoint file " + path.string() + ": bad frame index at line " +
                      std::to_string(line_no + 1));
    SkeletonFrame frame;
    for (std::size_t j = 0; j < kTotalJointCount; ++j) {
      Vec3& v = frame.joint(j);
      if (!(ss >> v.x >> v.y >> v.z))
        throw DataError("keypoint file " + path.string() + ": expected 64 joint triples at line " +
                        std::to_string(line_no + 1));
    }
    double extra;
    if (ss >> extra)
      throw DataError("keypoint file " + path.string() + ": trailing fields at line " +
                      std::to_string(line_no + 1));
    frames.push_back(frame);
    ++line_no;
  }
  if (frames.empty()) throw DataError("keypoint file " + path.string() + ": no frames");
  return frames;
}

void write_keypoint_file(const std::filesystem::path& path, const KeypointSequence& frames) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write keypoint file " + path.string());
  char buf[32];
  for (std::size_t t = 0; t < frames.size(); ++t) {
    out << t;
    for (std::size_t j = 0; j < kTotalJointCount; ++j) {
      const Vec3& v = frames[t].joint(j);
      for (double c : {v.x, v.y, v.z}) {
        std::snprintf(buf, sizeof buf, "%.17g", c);
        out << ' ' << buf;
      }
    }
    out << '\n';
  }
  if (!out) throw IoError("failed while writing " + path.string());
}

}  // namespace cslr
