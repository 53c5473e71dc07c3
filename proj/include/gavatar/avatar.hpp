#pragma once

// Canonical Gaussian avatar and its canonical-to-target deformation by
// linear blend skinning.

#include <gavatar/prior_model.hpp>

#include <nlohmann/json.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace gavatar {

inline int sh_basis_count(int degree) {
  if (degree < 0 || degree > 2) throw ConfigError("SH degree must be 0, 1 or 2");
  return (degree + 1) * (degree + 1);
}

struct CanonicalAvatar {
  int sh_degree = 0;
  std::vector<Vec3> positions;   // meters, canonical frame
  std::vector<Vec3> log_scales;  // log-meters
  std::vector<Quat> rotations;   // (w, x, y, z)
  std::vector<double> opacities;  // logits
  std::vector<double> sh;         // N x 3 x B, channel-major per Gaussian
  RowMatrix gauss_weights;        // N x J

  size_t size() const { return positions.size(); }
  int joint_count() const { return static_cast<int>(gauss_weights.cols()); }
  int sh_basis() const { return sh_basis_count(sh_degree); }
  double* sh_of(size_t i) { return sh.data() + i * 3 * sh_basis(); }
  const double* sh_of(size_t i) const { return sh.data() + i * 3 * sh_basis(); }

  void resize(size_t n, int joints) {
    positions.resize(n);
    log_scales.resize(n);
    rotations.resize(n);
    opacities.resize(n);
    sh.resize(n * 3 * sh_basis());
    gauss_weights.resize(static_cast<Eigen::Index>(n), joints);
  }

  // Keeps the Gaussians whose flag is set, preserving order.
  void keep(const std::vector<bool>& flags) {
    const int b = sh_basis();
    size_t out = 0;
    for (size_t i = 0; i < size(); ++i) {
      if (!flags[i]) continue;
      positions[out] = positions[i];
      log_scales[out] = log_scales[i];
      rotations[out] = rotations[i];
      opacities[out] = opacities[i];
      std::copy_n(sh.begin() + static_cast<std::ptrdiff_t>(i * 3 * b), 3 * b,
                  sh.begin() + static_cast<std::ptrdiff_t>(out * 3 * b));
      gauss_weights.row(static_cast<Eigen::Index>(out)) = gauss_weights.row(static_cast<Eigen::Index>(i));
      ++out;
    }
    const int joints = joint_count();
    RowMatrix weights = gauss_weights.topRows(static_cast<Eigen::Index>(out));
    resize(out, joints);
    gauss_weights = std::move(weights);
  }

  void validate() const {
    const size_t n = size();
    if (log_scales.size() != n || rotations.size() != n || opacities.size() != n ||
        sh.size() != n * 3 * static_cast<size_t>(sh_basis()) || static_cast<size_t>(gauss_weights.rows()) != n)
      throw ShapeError("avatar: attribute arrays inconsistent");
    for (size_t i = 0; i < n; ++i) {
      if (std::abs(rotations[i].norm() - 1.0) > 1e-6) throw ContractError("avatar: quaternion not unit-norm");
      for (int a = 0; a < 3; ++a) {
        const double s = std::exp(log_scales[i][a]);
        if (!(s > 1e-7 && s < 10.0)) throw ContractError("avatar: scale out of range");
      }
      if (!std::isfinite(opacities[i])) throw ContractError("avatar: opacity not finite");
      int nonzero = 0;
      double sum = 0;
      for (Eigen::Index k = 0; k < gauss_weights.cols(); ++k) {
        const double w = gauss_weights(static_cast<Eigen::Index>(i), k);
        if (w < 0) throw ContractError("avatar: negative skin weight");
        nonzero += w > 0;
        sum += w;
      }
      if (nonzero > kMaxInfluences || std::abs(sum - 1.0) > 1e-6) throw ContractError("avatar: skin weights invalid");
    }
  }
};

// The 94-value temporal payload of one frame (for a 24-joint prior).
struct FrameParams {
  Eigen::VectorXd theta;
  Eigen::VectorXd beta;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  int value_count() const { return static_cast<int>(theta.size() + beta.size()) + 12; }

  // theta | beta | rotation (row-major) | translation
  Eigen::VectorXd to_vector() const {
    Eigen::VectorXd v(value_count());
    v << theta, beta, rotation(0, 0), rotation(0, 1), rotation(0, 2), rotation(1, 0), rotation(1, 1),
        rotation(1, 2), rotation(2, 0), rotation(2, 1), rotation(2, 2), translation;
    return v;
  }
  static FrameParams from_vector(const Eigen::VectorXd& v, int pose_size) {
    if (v.size() != pose_size + kShapeCount + 12) throw ShapeError("frame params: wrong value count");
    FrameParams fp;
    fp.theta = v.head(pose_size);
    fp.beta = v.segment(pose_size, kShapeCount);
    const int r0 = pose_size + kShapeCount;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) fp.rotation(i, j) = v(r0 + 3 * i + j);
    fp.translation = v.segment<3>(r0 + 9);
    return fp;
  }
};

inline FrameParams canonical_frame(const PriorModel& m) {
  return {m.canonical_pose, m.canonical_shape, Mat3::Identity(), Vec3::Zero()};
}

struct DeformedGaussians {
  int sh_degree = 0;
  std::vector<Vec3> world_means;
  std::vector<Mat3> covariances;
  std::vector<double> opacities;  // in (0, 1)
  std::vector<double> sh;

  size_t size() const { return world_means.size(); }
  const double* sh_of(size_t i) const { return sh.data() + i * 3 * sh_basis_count(sh_degree); }
};

struct BlendedTransform {
  Mat3 A;
  Vec3 b;
};

// ---------------------------------------------------------------------------

template <class Row>
BlendedTransform blend_transforms(const JointTransforms& tf, const Row& weights) {
  if (static_cast<size_t>(weights.size()) != tf.rotation.size())
    throw ShapeError("blend_transforms: weight row does not match joint count");
  double sum = 0;
  for (Eigen::Index k = 0; k < weights.size(); ++k) {
    if (weights(k) < 0) throw ContractError("blend_transforms: negative weight");
    sum += weights(k);
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ContractError("blend_transforms: weights not normalized");
  BlendedTransform out{Mat3::Zero(), Vec3::Zero()};
  for (Eigen::Index k = 0; k < weights.size(); ++k) {
    const double w = weights(k);
    if (w == 0.0) continue;
    out.A += w * tf.rotation[static_cast<size_t>(k)];
    out.b += w * tf.translation[static_cast<size_t>(k)];
  }
  return out;
}

// Row-vector form (A p + b) R^T + T, evaluated as R (A p + b) + T.
inline Vec3 transform_position(const Vec3& p, const Mat3& A, const Vec3& b, const Mat3& R, const Vec3& T) {
  return R * (A * p + b) + T;
}

inline Mat3 quat_to_matrix(const Quat& q_in) {
  const Quat q = q_in.normalized();
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),  //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

inline Mat3 canonical_covariance(const Vec3& log_scale, const Quat& rotation) {
  const Mat3 m = quat_to_matrix(rotation) * log_scale.array().exp().matrix().asDiagonal();
  const Mat3 sigma = m * m.transpose();
  return 0.5 * (sigma + sigma.transpose());
}

inline Mat3 transform_covariance(const Mat3& sigma_c, const Mat3& A, const Mat3& R) {
  const Mat3 ra = R * A;
  const Mat3 sigma = ra * sigma_c * ra.transpose();
  return 0.5 * (sigma + sigma.transpose());
}

inline DeformedGaussians deform(const CanonicalAvatar& avatar, const PriorModel& model, const FrameParams& fp,
                                std::vector<BlendedTransform>* blends = nullptr) {
  if (avatar.joint_count() != model.joint_count) throw ShapeError("deform: avatar/model joint counts differ");
  const JointTransforms tf = forward(model, {fp.theta, fp.beta}).transforms;
  const size_t n = avatar.size();
  DeformedGaussians out;
  out.sh_degree = avatar.sh_degree;
  out.world_means.resize(n);
  out.covariances.resize(n);
  out.opacities.resize(n);
  out.sh = avatar.sh;
  if (blends) blends->resize(n);
  parallel_for(n, [&](size_t i) {
    const BlendedTransform bt = blend_transforms(tf, avatar.gauss_weights.row(static_cast<Eigen::Index>(i)));
    out.world_means[i] = transform_position(avatar.positions[i], bt.A, bt.b, fp.rotation, fp.translation);
    out.covariances[i] =
        transform_covariance(canonical_covariance(avatar.log_scales[i], avatar.rotations[i]), bt.A, fp.rotation);
    out.opacities[i] = sigmoid(avatar.opacities[i]);
    if (blends) (*blends)[i] = bt;
  });
  return out;
}

// ---------------------------------------------------------------------------
// GAVA file: "GAVA" | version u16 | N u32 | J u16 | sh_degree u8 | reserved u8 |
// f32 positions[N*3] | log_scales[N*3] | rotations[N*4] | opacities[N] |
// sh[N*3*B] | gauss_weights[N*J]

inline constexpr uint16_t kAvatarVersion = 1;

inline std::vector<uint8_t> serialize_avatar(const CanonicalAvatar& a) {
  ByteWriter w;
  w.tag("GAVA");
  w.u16(kAvatarVersion);
  w.u32(static_cast<uint32_t>(a.size()));
  w.u16(static_cast<uint16_t>(a.joint_count()));
  w.u8(static_cast<uint8_t>(a.sh_degree));
  w.u8(0);
  for (const auto& p : a.positions)
    for (int k = 0; k < 3; ++k) w.f32(p[k]);
  for (const auto& s : a.log_scales)
    for (int k = 0; k < 3; ++k) w.f32(s[k]);
  for (const auto& q : a.rotations)
    for (int k = 0; k < 4; ++k) w.f32(q[k]);
  for (double o : a.opacities) w.f32(o);
  for (double c : a.sh) w.f32(c);
  for (Eigen::Index i = 0; i < a.gauss_weights.rows(); ++i)
    for (Eigen::Index k = 0; k < a.gauss_weights.cols(); ++k) w.f32(a.gauss_weights(i, k));
  return std::move(w).bytes();
}

inline CanonicalAvatar deserialize_avatar(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("GAVA", "avatar");
  if (r.u16() != kAvatarVersion) throw CorruptionError("avatar: unsupported version");
  CanonicalAvatar a;
  const size_t n = r.u32();
  const int joints = r.u16();
  a.sh_degree = r.u8();
  r.u8();
  if (a.sh_degree > 2) throw CorruptionError("avatar: unsupported SH degree");
  const size_t floats = n * (3 + 3 + 4 + 1 + 3 * static_cast<size_t>(a.sh_basis()) + static_cast<size_t>(joints));
  if (r.remaining() != 4 * floats) throw CorruptionError("avatar: length mismatch");
  a.resize(n, joints);
  for (auto& p : a.positions) p = r.f32_vec<3>();
  for (auto& s : a.log_scales) s = r.f32_vec<3>();
  for (auto& q : a.rotations) q = r.f32_vec<4>().normalized();
  for (auto& o : a.opacities) o = r.f32();
  for (auto& c : a.sh) c = r.f32();
  for (Eigen::Index i = 0; i < a.gauss_weights.rows(); ++i) {
    for (Eigen::Index k = 0; k < joints; ++k) a.gauss_weights(i, k) = r.f32();
    const double sum = a.gauss_weights.row(i).sum();
    if (!(sum > 0)) throw CorruptionError("avatar: empty skin weight row");
    a.gauss_weights.row(i) /= sum;
  }
  try {
    a.validate();
  } catch (const Error& e) {
    throw CorruptionError(std::string("avatar: ") + e.what());
  }
  return a;
}

inline void save_avatar(const CanonicalAvatar& a, const std::string& path) { write_file(path, serialize_avatar(a)); }
inline CanonicalAvatar load_avatar(const std::string& path) { return deserialize_avatar(read_file(path)); }

// GAFP file: "GAFP" | version u16 | values-per-frame u16 | pose size u16 |
// reserved u16 | frame count u32 | f32 values[frames * values-per-frame]

inline constexpr uint16_t kFrameFileVersion = 1;

inline std::vector<uint8_t> serialize_frames(std::span<const FrameParams> frames, int pose_size) {
  ByteWriter w;
  w.tag("GAFP");
  w.u16(kFrameFileVersion);
  w.u16(static_cast<uint16_t>(pose_size + kShapeCount + 12));
  w.u16(static_cast<uint16_t>(pose_size));
  w.u16(0);
  w.u32(static_cast<uint32_t>(frames.size()));
  for (const auto& fp : frames) {
    if (fp.theta.size() != pose_size) throw ShapeError("frame params: pose size mismatch");
    const Eigen::VectorXd v = fp.to_vector();
    for (Eigen::Index i = 0; i < v.size(); ++i) w.f32(v(i));
  }
  return std::move(w).bytes();
}

inline std::vector<FrameParams> deserialize_frames(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("GAFP", "frames");
  if (r.u16() != kFrameFileVersion) throw CorruptionError("frames: unsupported version");
  const int per_frame = r.u16();
  const int pose_size = r.u16();
  r.u16();
  const size_t count = r.u32();
  if (per_frame != pose_size + kShapeCount + 12) throw CorruptionError("frames: inconsistent layout");
  if (r.remaining() != count * per_frame * 4) throw CorruptionError("frames: length mismatch");
  std::vector<FrameParams> frames;
  frames.reserve(count);
  for (size_t f = 0; f < count; ++f) {
    Eigen::VectorXd v(per_frame);
    for (int i = 0; i < per_frame; ++i) v(i) = r.f32();
    frames.push_back(FrameParams::from_vector(v, pose_size));
  }
  return frames;
}

inline void save_frames(std::span<const FrameParams> frames, int pose_size, const std::string& path) {
  write_file(path, serialize_frames(frames, pose_size));
}
inline std::vector<FrameParams> load_frames(const std::string& path) { return deserialize_frames(read_file(path)); }

inline nlohmann::json frames_to_json(std::span<const FrameParams> frames) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& fp : frames) {
    nlohmann::json rot = nlohmann::json::array();
    for (int i = 0; i < 3; ++i) rot.push_back({fp.rotation(i, 0), fp.rotation(i, 1), fp.rotation(i, 2)});
    arr.push_back({{"theta", std::vector<double>(fp.theta.data(), fp.theta.data() + fp.theta.size())},
                   {"beta", std::vector<double>(fp.beta.data(), fp.beta.data() + fp.beta.size())},
                   {"R", rot},
                   {"T", {fp.translation.x(), fp.translation.y(), fp.translation.z()}}});
  }
  return arr;
}

inline std::vector<FrameParams> frames_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw ConfigError("frames JSON must be an array");
  std::vector<FrameParams> frames;
  for (const auto& item : arr) {
    FrameParams fp;
    const auto theta = item.at("theta").get<std::vector<double>>();
    const auto beta = item.at("beta").get<std::vector<double>>();
    if (beta.size() != kShapeCount) throw ShapeError("frames JSON: beta must have 10 entries");
    fp.theta = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
    fp.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), kShapeCount);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) fp.rotation(i, j) = item.at("R").at(i).at(j).get<double>();
    for (int i = 0; i < 3; ++i) fp.translation(i) = item.at("T").at(i).get<double>();
    frames.push_back(std::move(fp));
  }
  return frames;
}

}  // namespace gavatar
